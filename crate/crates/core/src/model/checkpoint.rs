//! Single-file checkpoint: a text header (model config, LoRA config, run
//! metadata, tensor manifest) followed by raw little-endian `f64` data.
//!
//! ```text
//! FSSAM2-CHECKPOINT v1
//! [model]
//! image_size=64
//! ...
//! [lora]
//! state=factored            # none | factored | merged
//! scale=1.0
//! targets=Q,K,V,O
//! rank.image_encoder=4
//! [meta]
//! kind=model                # model | oracle
//! epoch=12
//! best_val_miou=0.4375      # or `none`
//! [manifest]
//! <name>\t<d0>x<d1>…\t<byte offset>
//! [data]
//! bytes=<n>
//! <n raw bytes>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{FsSam2, ModelConfig};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::nn::{Group, ProjKind};
use crate::tensor::Tensor;

const MAGIC: &str = "FSSAM2-CHECKPOINT v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    /// Predicts the ground-truth mask; used to check evaluation plumbing.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: FsSam2,
    pub epoch: usize,
    pub best_val_miou: Option<f64>,
    /// True once adapters have been folded into the base weights.
    pub merged: bool,
}

fn lora_state(ckpt: &Checkpoint) -> &'static str {
    if !ckpt.model.adapters().is_empty() {
        "factored"
    } else if ckpt.merged {
        "merged"
    } else {
        "none"
    }
}

fn proj_name(k: ProjKind) -> &'static str {
    match k {
        ProjKind::Q => "Q",
        ProjKind::K => "K",
        ProjKind::V => "V",
        ProjKind::O => "O",
    }
}

impl Checkpoint {
    pub fn new(model: FsSam2) -> Self {
        Self {
            kind: CheckpointKind::Model,
            model,
            epoch: 0,
            best_val_miou: None,
            merged: false,
        }
    }

    pub fn oracle(cfg: ModelConfig) -> Result<Self> {
        Ok(Self {
            kind: CheckpointKind::Oracle,
            ..Self::new(FsSam2::new(cfg, 0)?)
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push_str("\n[model]\n");
        for (k, v) in self.model.config().to_kv() {
            head.push_str(&format!("{k}={v}\n"));
        }
        head.push_str("[lora]\n");
        head.push_str(&format!("state={}\n", lora_state(self)));
        if let Some(cfg) = self.model.lora_config() {
            head.push_str(&format!("scale={:?}\n", cfg.scale));
            let targets: Vec<&str> = cfg.targets.iter().map(|&k| proj_name(k)).collect();
            head.push_str(&format!("targets={}\n", targets.join(",")));
            for (g, r) in &cfg.rank_by_group {
                head.push_str(&format!("rank.{g}={r}\n"));
            }
        }
        head.push_str("[meta]\n");
        let kind = match self.kind {
            CheckpointKind::Model => "model",
            CheckpointKind::Oracle => "oracle",
        };
        head.push_str(&format!("kind={kind}\nepoch={}\n", self.epoch));
        match self.best_val_miou {
            Some(v) => head.push_str(&format!("best_val_miou={v:?}\n")),
            None => head.push_str("best_val_miou=none\n"),
        }
        head.push_str("[manifest]\n");
        let mut offset = 0usize;
        for (_, p) in self.model.store().iter() {
            let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("{}\t{}\t{offset}\n", p.name, dims.join("x")));
            offset += p.value.numel() * 8;
        }
        head.push_str(&format!("[data]\nbytes={offset}\n"));
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, p) in self.model.store().iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut section = String::new();
        let data_len: usize = loop {
            let line = next_line()?;
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            match section.as_str() {
                "manifest" => {
                    let mut parts = line.split('\t');
                    let (Some(name), Some(dims), Some(off), None) =
                        (parts.next(), parts.next(), parts.next(), parts.next())
                    else {
                        return Err(bad("malformed manifest line"));
                    };
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad manifest shape")))
                        .collect::<Result<Vec<usize>>>()?;
                    let off = off.parse().map_err(|_| bad("bad manifest offset"))?;
                    manifest.push((name.to_string(), shape, off));
                }
                "data" => {
                    let n = line
                        .strip_prefix("bytes=")
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(|| bad("bad data length"))?;
                    break n;
                }
                _ => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| bad("malformed key=value line"))?;
                    sections
                        .entry(section.clone())
                        .or_default()
                        .insert(k.into(), v.into());
                }
            }
        };
        let data = &bytes[pos..];
        if data.len() != data_len {
            return Err(bad("data section length mismatch"));
        }

        let empty = BTreeMap::new();
        let cfg = ModelConfig::from_kv(sections.get("model").unwrap_or(&empty))?;
        let mut model = FsSam2::new(cfg, 0)?;
        let lora = sections.get("lora").unwrap_or(&empty);
        let meta = sections.get("meta").unwrap_or(&empty);

        let read_tensor = |shape: &[usize], off: usize| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let raw = data
                .get(off..off + 8 * n)
                .ok_or_else(|| bad("tensor outside data section"))?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), vals)
        };

        let mut seen = vec![false; model.base_len()];
        let mut lora_parts: Vec<(String, Tensor, Tensor)> = Vec::new();
        let mut pending_a: Option<(String, Tensor)> = None;
        for (name, shape, off) in &manifest {
            let t = read_tensor(shape, *off)?;
            if let Some(layer) = name.strip_suffix(".lora_a") {
                pending_a = Some((layer.to_string(), t));
            } else if let Some(layer) = name.strip_suffix(".lora_b") {
                let (la, a) = pending_a
                    .take()
                    .ok_or_else(|| bad("lora_b without lora_a"))?;
                if la != layer {
                    return Err(bad("adapter tensors out of order"));
                }
                lora_parts.push((la, a, t));
            } else {
                let id = model
                    .store()
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
                let p = model.store_mut().get_mut(id);
                if p.value.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t;
                seen[id.index()] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = &model.store().iter().nth(missing).expect("in range").1.name;
            return Err(Error::Checkpoint(format!("parameter `{name}` missing")));
        }

        if !lora_parts.is_empty() {
            let mut cfg = LoraConfig {
                targets: Default::default(),
                ..LoraConfig::default()
            };
            cfg.scale = lora
                .get("scale")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("missing lora scale"))?;
            for t in lora
                .get("targets")
                .map(String::as_str)
                .unwrap_or("")
                .split(',')
            {
                let kind = match t {
                    "Q" => ProjKind::Q,
                    "K" => ProjKind::K,
                    "V" => ProjKind::V,
                    "O" => ProjKind::O,
                    "" => continue,
                    _ => return Err(bad("unknown lora target")),
                };
                cfg.targets.insert(kind);
            }
            for (k, v) in lora {
                if let Some(g) = k.strip_prefix("rank.") {
                    let r = v.parse().map_err(|_| bad("bad lora rank"))?;
                    cfg.rank_by_group.insert(Group::parse(g)?, r);
                }
            }
            for (layer, a, b) in lora_parts {
                let group = model
                    .linears()
                    .into_iter()
                    .find(|l| l.name == layer)
                    .map(|l| l.group)
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("adapter for unknown layer `{layer}`"))
                    })?;
                let rank = a.shape()[0];
                let store = model.store_mut();
                let a_id = store.add(format!("{layer}.lora_a"), a, group)?;
                let b_id = store.add(format!("{layer}.lora_b"), b, group)?;
                model.push_adapter(LoraAdapter {
                    target: layer,
                    a: a_id,
                    b: b_id,
                    rank,
                    scale: cfg.scale,
                });
            }
            model.set_lora_config(cfg);
        }

        let kind = match meta.get("kind").map(String::as_str) {
            Some("model") | None => CheckpointKind::Model,
            Some("oracle") => CheckpointKind::Oracle,
            Some(_) => return Err(bad("unknown checkpoint kind")),
        };
        let epoch = meta.get("epoch").and_then(|e| e.parse().ok()).unwrap_or(0);
        let best_val_miou = match meta.get("best_val_miou").map(String::as_str) {
            None | Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| bad("bad best_val_miou"))?),
        };
        let merged = lora.get("state").map(String::as_str) == Some("merged");
        Ok(Self {
            kind,
            model,
            epoch,
            best_val_miou,
            merged,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
