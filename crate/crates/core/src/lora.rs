//! Low-rank adaptation of linear layers.
//!
//! An adapter adds `scale·B·A·x` to a frozen layer's output, with
//! `A ∈ ℝ^{r×d_in}` initialized small and random and `B ∈ ℝ^{d_out×r}`
//! initialized to zero, so attaching an adapter never changes the model's
//! output. Adapters fold back into the weight as `W' = W + scale·B·A`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::FsSam2;
use crate::nn::{uniform, Bound, BoundAdapter, Group, Linear, ParamId, ProjKind};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub targets: BTreeSet<ProjKind>,
    pub rank_by_group: BTreeMap<Group, usize>,
    pub scale: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            targets: ProjKind::ALL.into_iter().collect(),
            rank_by_group: BTreeMap::new(),
            scale: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn with_rank(mut self, group: Group, rank: usize) -> Self {
        self.rank_by_group.insert(group, rank);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.rank_by_group.is_empty()
    }

    /// Layers eligible for adaptation: attention projections of the chosen
    /// kinds, and the plain linear projections of the memory encoder.
    pub fn covers(&self, layer: &Linear) -> bool {
        if !self.rank_by_group.contains_key(&layer.group) {
            return false;
        }
        match layer.kind {
            Some(kind) => self.targets.contains(&kind),
            None => layer.group == Group::MemoryEncoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((g, _)) = self.rank_by_group.iter().find(|(_, &r)| r == 0) {
            return Err(Error::Config(format!("LoRA rank for {g} must be positive")));
        }
        if !(self.scale.is_finite()) {
            return Err(Error::Config("LoRA scale must be finite".into()));
        }
        Ok(())
    }

    /// Parses `image_encoder=4,memory_attention=32` style rank lists.
    pub fn parse_ranks(spec: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (g, r) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected group=rank, got `{part}`")))?;
            let rank = r
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad rank `{r}`")))?;
            cfg.rank_by_group.insert(Group::parse(g.trim())?, rank);
        }
        Ok(cfg)
    }
}

/// `base + scale·(x·Aᵀ)·Bᵀ`
pub(crate) fn add_low_rank(
    tape: &mut Tape,
    adapter: &BoundAdapter,
    x: Var,
    base: Var,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().unwrap();
    let flat = if shape.len() == 2 {
        x
    } else {
        tape.reshape(x, &[shape.iter().product::<usize>() / d_in, d_in])?
    };
    let down = tape.matmul_nt(flat, adapter.a)?;
    let up = tape.matmul_nt(down, adapter.b)?;
    let up = if adapter.scale == 1.0 {
        up
    } else {
        tape.scale(up, adapter.scale)
    };
    let up = if shape.len() == 2 {
        up
    } else {
        let base_shape = tape.shape(base).to_vec();
        tape.reshape(up, &base_shape)?
    };
    tape.add(base, up)
}

/// Forward through `layer` with `adapter` applied: `Wx + b + scale·BAx`.
pub fn lora_forward(
    tape: &mut Tape,
    bound: &Bound,
    layer: &Linear,
    adapter: &BoundAdapter,
    x: Var,
) -> Result<Var> {
    if adapter.target != layer.name {
        return Err(Error::Wiring {
            adapter: adapter.target.clone(),
            layer: layer.name.clone(),
        });
    }
    let base = layer.forward_base(tape, bound, x)?;
    add_low_rank(tape, adapter, x, base)
}

/// `W + scale·B·A`
pub fn merge_weights(w: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let r = a.shape()[0];
    if a.shape() != [r, d_in] || b.shape() != [d_out, r] {
        return Err(Error::shape(format!(
            "adapter A {:?} / B {:?} do not fit weight {:?}",
            a.shape(),
            b.shape(),
            w.shape()
        )));
    }
    let ba = gemm(b.data(), a.data(), d_out, r, d_in);
    let data = w
        .data()
        .iter()
        .zip(ba)
        .map(|(w, d)| w + scale * d)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// `Σ r·(d_in + d_out)` over the targeted layers.
pub fn count_lora_params(manifest: &[(usize, usize)], rank: usize) -> usize {
    manifest
        .iter()
        .map(|(d_in, d_out)| rank * (d_in + d_out))
        .sum()
}

/// Attaches one adapter to every layer `config` covers. Base parameters are
/// frozen; the returned ids are exactly the new adapter tensors.
pub fn attach_lora(model: &mut FsSam2, config: &LoraConfig, seed: u64) -> Result<Vec<ParamId>> {
    config.validate()?;
    if !model.adapters().is_empty() {
        return Err(Error::Config("model already carries LoRA adapters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers: Vec<Linear> = model
        .linears()
        .into_iter()
        .filter(|l| config.covers(l))
        .cloned()
        .collect();
    for layer in &layers {
        let r = config.rank_by_group[&layer.group];
        if r >= layer.d_in.min(layer.d_out) {
            return Err(Error::Config(format!(
                "rank {r} not below min(d_in, d_out) = {} for `{}`",
                layer.d_in.min(layer.d_out),
                layer.name
            )));
        }
    }
    model.store_mut().set_all_trainable(false);
    let mut trainable = Vec::with_capacity(2 * layers.len());
    for layer in layers {
        let r = config.rank_by_group[&layer.group];
        let bound = 1.0 / (layer.d_in as f64).sqrt();
        let store = model.store_mut();
        let a = store.add(
            format!("{}.lora_a", layer.name),
            uniform(&mut rng, &[r, layer.d_in], bound),
            layer.group,
        )?;
        let b = store.add(
            format!("{}.lora_b", layer.name),
            Tensor::zeros(&[layer.d_out, r]),
            layer.group,
        )?;
        store.get_mut(a).trainable = true;
        store.get_mut(b).trainable = true;
        trainable.extend([a, b]);
        model.push_adapter(LoraAdapter {
            target: layer.name.clone(),
            a,
            b,
            rank: r,
            scale: config.scale,
        });
    }
    model.set_lora_config(config.clone());
    Ok(trainable)
}

/// Folds every adapter into its layer's weight and removes the adapter
/// tensors. A model without adapters is returned unchanged.
pub fn merge_lora(model: &mut FsSam2) -> Result<()> {
    let adapters = model.adapters().to_vec();
    if adapters.is_empty() {
        return Ok(());
    }
    for adapter in &adapters {
        let layer = model
            .linears()
            .into_iter()
            .find(|l| l.name == adapter.target)
            .cloned()
            .ok_or_else(|| Error::Wiring {
                adapter: adapter.target.clone(),
                layer: "<missing>".into(),
            })?;
        let store = model.store();
        let merged = merge_weights(
            store.value(layer.weight),
            store.value(adapter.a),
            store.value(adapter.b),
            adapter.scale,
        )?;
        model.store_mut().get_mut(layer.weight).value = merged;
    }
    model.clear_adapters();
    Ok(())
}

/// Fine-tuning strategies, one per ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    FullMemory,
    LoraMem,
    LoraEnc,
    LoraEncMem,
    LoraEncMemDec,
    LoraEncFullMemory,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::None,
        Strategy::FullMemory,
        Strategy::LoraMem,
        Strategy::LoraEnc,
        Strategy::LoraEncMem,
        Strategy::LoraEncMemDec,
        Strategy::LoraEncFullMemory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::FullMemory => "full_memory",
            Strategy::LoraMem => "lora_mem",
            Strategy::LoraEnc => "lora_enc",
            Strategy::LoraEncMem => "lora_enc_mem",
            Strategy::LoraEncMemDec => "lora_enc_mem_dec",
            Strategy::LoraEncFullMemory => "lora_enc_full_memory",
        }
    }

    fn lora_groups(self) -> &'static [Group] {
        use Group::*;
        match self {
            Strategy::None | Strategy::FullMemory => &[],
            Strategy::LoraMem => &[MemoryEncoder, MemoryAttention],
            Strategy::LoraEnc | Strategy::LoraEncFullMemory => &[ImageEncoder],
            Strategy::LoraEncMem => &[ImageEncoder, MemoryEncoder, MemoryAttention],
            Strategy::LoraEncMemDec => &[ImageEncoder, MemoryEncoder, MemoryAttention, MaskDecoder],
        }
    }

    /// Groups whose base parameters are trained directly.
    pub fn full_groups(self) -> &'static [Group] {
        match self {
            Strategy::FullMemory | Strategy::LoraEncFullMemory => {
                &[Group::MemoryEncoder, Group::MemoryAttention]
            }
            _ => &[],
        }
    }

    /// Adapter configuration for this strategy on `model`.
    ///
    /// Nominal ranks (encoder 4, memory and decoder 32) are capped at half
    /// the narrowest adapted layer of each group so they stay low-rank on
    /// small models.
    pub fn lora_config(self, model: &FsSam2, ranks: &StrategyRanks) -> LoraConfig {
        let mut cfg = LoraConfig {
            scale: ranks.scale,
            ..LoraConfig::default()
        };
        for &group in self.lora_groups() {
            let nominal = match group {
                Group::ImageEncoder => ranks.encoder,
                Group::MaskDecoder => ranks.decoder,
                Group::MemoryEncoder | Group::MemoryAttention => ranks.memory,
            };
            let probe = LoraConfig::default().with_rank(group, 1);
            let narrowest = model
                .linears()
                .into_iter()
                .filter(|l| probe.covers(l))
                .map(|l| l.d_in.min(l.d_out))
                .min();
            if let Some(narrowest) = narrowest {
                cfg.rank_by_group
                    .insert(group, nominal.min(narrowest / 2).max(1));
            }
        }
        cfg
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyRanks {
    pub encoder: usize,
    pub memory: usize,
    pub decoder: usize,
    pub scale: f64,
}

impl Default for StrategyRanks {
    fn default() -> Self {
        Self {
            encoder: 4,
            memory: 32,
            decoder: 32,
            scale: 1.0,
        }
    }
}

/// Configures `model` for `strategy`: attaches adapters where the strategy
/// asks for them and marks exactly the parameters it trains.
pub fn select_trainable(
    model: &mut FsSam2,
    strategy: Strategy,
    ranks: &StrategyRanks,
    seed: u64,
) -> Result<Vec<ParamId>> {
    let cfg = strategy.lora_config(model, ranks);
    let mut trainable = if cfg.is_empty() {
        model.store_mut().set_all_trainable(false);
        Vec::new()
    } else {
        attach_lora(model, &cfg, seed)?
    };
    let full = strategy.full_groups();
    let base_len = model.base_len();
    let store = model.store_mut();
    let base: Vec<ParamId> = store
        .iter()
        .filter(|(id, p)| id.index() < base_len && full.contains(&p.group))
        .map(|(id, _)| id)
        .collect();
    for &id in &base {
        store.get_mut(id).trainable = true;
    }
    trainable.extend(base);
    trainable.sort();
    Ok(trainable)
}
