use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::mask::BinaryMask;
use crate::nn::{
    grid_to_tokens, patchify, sinusoidal_positions, tokens_to_grid, Bound, BoundAdapter, Conv2d,
    Group, LayerNorm, Linear, ParamStore, TransformerBlock, UpsampleStack,
};
use crate::tensor::Tensor;

/// Encoded image: one token per grid cell.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

/// Memory tokens of all support frames, concatenated along the spatial axis.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub tokens: Var,
    /// Start row of each frame.
    pub offsets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub logits: Tensor,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
struct ImageEncoder {
    patch_embed: Linear,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
struct MemoryEncoder {
    mask_down: Vec<Conv2d>,
    mask_proj: Conv2d,
    pix_proj: Linear,
    fuse1: Conv2d,
    fuse2: Conv2d,
    out_proj: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct MemoryAttention {
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
struct MaskDecoder {
    blocks: Vec<TransformerBlock>,
    stack: UpsampleStack,
}

const MASK_SCALE: f64 = 20.0;

/// Image encoder → memory encoder → memory attention → mask decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FsSam2 {
    cfg: ModelConfig,
    store: ParamStore,
    base_len: usize,
    encoder: ImageEncoder,
    memory_encoder: MemoryEncoder,
    memory_attention: MemoryAttention,
    decoder: MaskDecoder,
    adapters: Vec<LoraAdapter>,
    lora_config: Option<LoraConfig>,
}

impl FsSam2 {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, heads) = (cfg.d_model, cfg.n_heads);

        let g = Group::ImageEncoder;
        let encoder = ImageEncoder {
            patch_embed: Linear::new(
                &mut store,
                &mut rng,
                "image_encoder.patch_embed",
                g,
                3 * cfg.patch * cfg.patch,
                d,
                true,
                None,
            )?,
            blocks: (0..cfg.enc_depth)
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("image_encoder.block{i}"),
                        g,
                        d,
                        heads,
                        None,
                    )
                })
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut store, "image_encoder.norm", g, d)?,
        };

        let g = Group::MemoryEncoder;
        let n_down = cfg.patch.trailing_zeros() as usize;
        let mut mask_down = Vec::with_capacity(n_down);
        let mut c_in = 1;
        for i in 0..n_down {
            let c_out = (c_in * 4).min(d);
            mask_down.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("memory_encoder.mask_down{i}"),
                g,
                c_in,
                c_out,
                2,
                2,
                0,
            )?);
            c_in = c_out;
        }
        let memory_encoder = MemoryEncoder {
            mask_down,
            mask_proj: Conv2d::new(
                &mut store,
                &mut rng,
                "memory_encoder.mask_proj",
                g,
                c_in,
                d,
                1,
                1,
                0,
            )?,
            pix_proj: Linear::new(
                &mut store,
                &mut rng,
                "memory_encoder.pix_proj",
                g,
                d,
                d,
                true,
                None,
            )?,
            fuse1: Conv2d::new(
                &mut store,
                &mut rng,
                "memory_encoder.fuse1",
                g,
                d,
                d,
                3,
                1,
                1,
            )?,
            fuse2: Conv2d::new(
                &mut store,
                &mut rng,
                "memory_encoder.fuse2",
                g,
                d,
                d,
                3,
                1,
                1,
            )?,
            out_proj: Linear::new(
                &mut store,
                &mut rng,
                "memory_encoder.out_proj",
                g,
                d,
                cfg.d_mem,
                true,
                None,
            )?,
        };

        let g = Group::MemoryAttention;
        let memory_attention = MemoryAttention {
            blocks: (0..cfg.mem_depth)
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("memory_attention.block{i}"),
                        g,
                        d,
                        heads,
                        Some(cfg.d_mem),
                    )
                })
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut store, "memory_attention.norm", g, d)?,
        };

        let g = Group::MaskDecoder;
        let decoder = MaskDecoder {
            blocks: (0..cfg.dec_depth)
                .map(|i| {
                    TransformerBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("mask_decoder.block{i}"),
                        g,
                        d,
                        heads,
                        None,
                    )
                })
                .collect::<Result<_>>()?,
            stack: UpsampleStack::new(&mut store, &mut rng, "mask_decoder.upsample", g, d)?,
        };

        let base_len = store.len();
        Ok(Self {
            cfg,
            store,
            base_len,
            encoder,
            memory_encoder,
            memory_attention,
            decoder,
            adapters: Vec::new(),
            lora_config: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of base (non-adapter) parameter tensors.
    pub fn base_len(&self) -> usize {
        self.base_len
    }

    /// Scalar count of base parameters.
    pub fn base_numel(&self) -> usize {
        self.store
            .iter()
            .filter(|(id, _)| id.index() < self.base_len)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn group_numel(&self, group: Group) -> usize {
        self.store
            .iter()
            .filter(|(id, p)| id.index() < self.base_len && p.group == group)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora_config.as_ref()
    }

    pub(crate) fn push_adapter(&mut self, adapter: LoraAdapter) {
        self.adapters.push(adapter);
    }

    pub(crate) fn set_lora_config(&mut self, cfg: LoraConfig) {
        self.lora_config = Some(cfg);
    }

    pub(crate) fn clear_adapters(&mut self) {
        self.store.truncate(self.base_len);
        self.adapters.clear();
        self.lora_config = None;
    }

    /// Every linear layer, in construction order.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.encoder.patch_embed];
        self.encoder
            .blocks
            .iter()
            .for_each(|b| out.extend(block_linears(b)));
        out.extend([&self.memory_encoder.pix_proj, &self.memory_encoder.out_proj]);
        self.memory_attention
            .blocks
            .iter()
            .for_each(|b| out.extend(block_linears(b)));
        self.decoder
            .blocks
            .iter()
            .for_each(|b| out.extend(block_linears(b)));
        out
    }

    /// Records all parameters on `tape`; trainable ones track gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_vars(self.store.bind(tape))
    }

    /// Builds a [`Bound`] from caller-provided leaves, one per parameter in
    /// store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound {
        let mut bound = Bound::new(vars);
        for a in &self.adapters {
            let (va, vb) = (bound.var(a.a), bound.var(a.b));
            bound = bound.with_adapter(BoundAdapter {
                target: a.target.clone(),
                a: va,
                b: vb,
                scale: a.scale,
            });
        }
        bound
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(format!(
                "image {:?} does not match configured size 3×{s}×{s}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Patch embedding, positional encoding, self-attention blocks.
    pub fn encode_image(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        image: &Tensor,
    ) -> Result<FeatureMap> {
        self.check_image(image)?;
        let grid = self.cfg.grid();
        let patches = tape.constant(patchify(image, self.cfg.patch)?);
        let mut x = self.encoder.patch_embed.forward(tape, bound, patches)?;
        let pos = tape.constant(sinusoidal_positions(grid, grid, self.cfg.d_model)?);
        x = tape.add(x, pos)?;
        for block in &self.encoder.blocks {
            x = block.forward(tape, bound, x, None)?;
        }
        let tokens = self.encoder.norm.forward(tape, bound, x)?;
        Ok(FeatureMap {
            tokens,
            h: grid,
            w: grid,
        })
    }

    /// Fuses a support mask into its image features; returns `[(h·w)×d_mem]`.
    pub fn encode_memory(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        feat: &FeatureMap,
        mask: &BinaryMask,
    ) -> Result<Var> {
        let s = self.cfg.image_size;
        if mask.dims() != (s, s) {
            return Err(Error::shape(format!(
                "mask {:?} does not match image resolution {s}×{s}",
                mask.dims()
            )));
        }
        let me = &self.memory_encoder;
        // {0, 1} → {−10, +10} so the mask is not drowned out by the image
        // features at initialisation.
        let mut mask = mask.to_tensor();
        for v in mask.data_mut() {
            *v = MASK_SCALE * *v - MASK_SCALE / 2.0;
        }
        let mut m = tape.constant(mask);
        for conv in &me.mask_down {
            m = conv.forward(tape, bound, m)?;
            m = tape.relu(m);
        }
        let m = me.mask_proj.forward(tape, bound, m)?;
        let pix = me.pix_proj.forward(tape, bound, feat.tokens)?;
        let pix = tokens_to_grid(tape, pix, feat.h, feat.w)?;
        let x = tape.add(pix, m)?;
        let y = me.fuse1.forward(tape, bound, x)?;
        let y = tape.relu(y);
        let y = me.fuse2.forward(tape, bound, y)?;
        let x = tape.add(x, y)?;
        let tokens = grid_to_tokens(tape, x)?;
        me.out_proj.forward(tape, bound, tokens)
    }

    /// Adds spatial positions to each frame's memory tokens and concatenates
    /// them in the given order. No frame-index encoding is added.
    pub fn build_memory_bank(&self, tape: &mut Tape, entries: &[Var]) -> Result<MemoryBank> {
        if entries.is_empty() {
            return Err(Error::Contract(
                "memory bank needs at least one support frame".into(),
            ));
        }
        let grid = self.cfg.grid();
        let expected = [grid * grid, self.cfg.d_mem];
        let pos = tape.constant(sinusoidal_positions(grid, grid, self.cfg.d_mem)?);
        let mut frames = Vec::with_capacity(entries.len());
        let mut offsets = Vec::with_capacity(entries.len());
        for (i, &e) in entries.iter().enumerate() {
            if tape.shape(e) != expected {
                return Err(Error::shape(format!(
                    "memory entry {i} has shape {:?}, expected {expected:?}",
                    tape.shape(e)
                )));
            }
            offsets.push(i * expected[0]);
            frames.push(tape.add(e, pos)?);
        }
        let tokens = if frames.len() == 1 {
            frames[0]
        } else {
            tape.concat_rows(&frames)?
        };
        Ok(MemoryBank { tokens, offsets })
    }

    /// Conditions query tokens on the bank through self- and cross-attention.
    pub fn memory_attend(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        query: &FeatureMap,
        bank: &MemoryBank,
    ) -> Result<FeatureMap> {
        if bank.offsets.is_empty() {
            return Err(Error::Contract("empty memory bank".into()));
        }
        if tape.shape(query.tokens) != [query.h * query.w, self.cfg.d_model] {
            return Err(Error::shape(format!(
                "query tokens {:?} do not match d_model {}",
                tape.shape(query.tokens),
                self.cfg.d_model
            )));
        }
        let mut x = query.tokens;
        for block in &self.memory_attention.blocks {
            x = block.forward(tape, bound, x, Some(bank.tokens))?;
        }
        let tokens = self.memory_attention.norm.forward(tape, bound, x)?;
        Ok(FeatureMap { tokens, ..*query })
    }

    /// Mask logits `[1×H×W]` at image resolution.
    pub fn decode_mask(&self, tape: &mut Tape, bound: &Bound, cond: &FeatureMap) -> Result<Var> {
        let grid = self.cfg.grid();
        if (cond.h, cond.w) != (grid, grid) {
            return Err(Error::shape(format!(
                "feature grid {}×{} does not match {grid}×{grid}",
                cond.h, cond.w
            )));
        }
        let mut x = cond.tokens;
        for block in &self.decoder.blocks {
            x = block.forward(tape, bound, x, None)?;
        }
        let s = self.cfg.image_size;
        self.decoder
            .stack
            .forward(tape, bound, x, (cond.h, cond.w), (s, s))
    }

    /// Full pipeline on the tape; returns the logits variable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        query: &Tensor,
        support: &[(Tensor, BinaryMask)],
    ) -> Result<Var> {
        if support.is_empty() {
            return Err(Error::Contract(
                "support set is empty; K ≥ 1 required".into(),
            ));
        }
        let q = self.encode_image(tape, bound, query)?;
        let mut entries = Vec::with_capacity(support.len());
        for (image, mask) in support {
            let feat = self.encode_image(tape, bound, image)?;
            entries.push(self.encode_memory(tape, bound, &feat, mask)?);
        }
        let bank = self.build_memory_bank(tape, &entries)?;
        let cond = self.memory_attend(tape, bound, &q, &bank)?;
        self.decode_mask(tape, bound, &cond)
    }

    /// Segments `query` given `K = support.len()` annotated support images.
    pub fn segment(
        &self,
        query: &Tensor,
        support: &[(Tensor, BinaryMask)],
    ) -> Result<SegmentationOutput> {
        let mut tape = Tape::new();
        let vars = self
            .store
            .iter()
            .map(|(_, p)| tape.constant(p.value.clone()))
            .collect();
        let bound = self.bind_vars(vars);
        let logits = self.forward(&mut tape, &bound, query, support)?;
        let logits = tape.value(logits).clone();
        let mask = BinaryMask::from_logits(&logits)?;
        Ok(SegmentationOutput { logits, mask })
    }
}

fn block_linears(b: &TransformerBlock) -> Vec<&Linear> {
    let mut v: Vec<&Linear> = b.attentions().flat_map(|a| a.projections()).collect();
    v.extend([&b.fc1, &b.fc2]);
    v
}
