//! `.ckpt` files: a `key=value` text header terminated by `end`, then named
//! `.ten` blocks, each introduced by a `<name> <byte length>` line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::nets::ParamSet;
use crate::optim::{AdamState, SgdState};
use crate::tensor::Tensor;

const MAGIC: &str = "ckpt v1";

/// Optimizer and discriminator state needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub sgd: SgdState<f32>,
    pub disc: Option<DiscState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscState {
    pub params: ParamSet<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub mean_target_affinity: f64,
    pub fingerprint: String,
    /// Resolved run configuration the checkpoint was produced under.
    pub config: Manifest,
    pub seg: ParamSet<f32>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn num_classes(&self) -> Result<usize> {
        self.config.require("classes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Manifest::new();
        header.set("iteration", self.iteration);
        header.set("mean_target_affinity", self.mean_target_affinity);
        header.set("fingerprint", &self.fingerprint);
        for (k, v) in self.config.iter() {
            header.set(&format!("config.{k}"), v);
        }
        let mut blocks: Vec<(String, &Tensor<f32>)> = Vec::new();
        fn add<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, names: &[String], tensors: &'a [Tensor<f32>]) {
            for (n, t) in names.iter().zip(tensors) {
                out.push((format!("{prefix}/{n}"), t));
            }
        }
        add(&mut blocks, "seg", self.seg.names(), self.seg.tensors());
        if let Some(state) = &self.state {
            add(&mut blocks, "sgd", self.seg.names(), &state.sgd.velocity);
            if let Some(d) = &state.disc {
                header.set("adam_step", d.adam.step);
                add(&mut blocks, "disc", d.params.names(), d.params.tensors());
                add(&mut blocks, "adam_m", d.params.names(), &d.adam.m);
                add(&mut blocks, "adam_v", d.params.names(), &d.adam.v);
            }
        }
        header.set("blocks", blocks.len());
        let mut out = format!("{MAGIC}\n{}end\n", header.render()).into_bytes();
        for (name, t) in blocks {
            let body = t.to_bytes();
            out.extend_from_slice(format!("{name} {}\n", body.len()).as_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint", d);
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8".into()))?;
            *pos += nl + 1;
            Ok(line.to_string())
        };
        if next_line(&mut pos)? != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut text = String::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            text.push_str(&line);
            text.push('\n');
        }
        let header = Manifest::parse(&text)?;
        let n_blocks: usize = header.require("blocks")?;
        let mut blocks: Vec<(String, String, Tensor<f32>)> = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let line = next_line(&mut pos)?;
            let (name, len) = line.rsplit_once(' ').ok_or_else(|| bad(format!("bad block line {line:?}")))?;
            let len: usize = len.parse().map_err(|_| bad(format!("bad block length in {line:?}")))?;
            if pos + len > bytes.len() {
                return Err(bad(format!("block {name} is truncated")));
            }
            let (group, pname) = name.split_once('/').ok_or_else(|| bad(format!("bad block name {name:?}")))?;
            blocks.push((group.to_string(), pname.to_string(), Tensor::from_bytes(&bytes[pos..pos + len])?));
            pos += len;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last block".into()));
        }
        let group = |g: &str| -> (Vec<String>, Vec<Tensor<f32>>) {
            blocks
                .iter()
                .filter(|(bg, _, _)| bg == g)
                .map(|(_, n, t)| (n.clone(), t.clone()))
                .unzip()
        };
        let (names, tensors) = group("seg");
        let seg = ParamSet::new(names, tensors)?;
        let (sgd_names, velocity) = group("sgd");
        let state = if velocity.is_empty() {
            None
        } else {
            if sgd_names != seg.names() {
                return Err(bad("optimizer slots do not match parameters".into()));
            }
            let (dn, dt) = group("disc");
            let disc = if dt.is_empty() {
                None
            } else {
                let (mn, m) = group("adam_m");
                let (vn, v) = group("adam_v");
                if mn != dn || vn != dn {
                    return Err(bad("Adam slots do not match discriminator parameters".into()));
                }
                Some(DiscState {
                    params: ParamSet::new(dn, dt)?,
                    adam: AdamState {
                        step: header.require("adam_step")?,
                        m,
                        v,
                    },
                })
            };
            Some(TrainState {
                sgd: SgdState { velocity },
                disc,
            })
        };
        let mut config = Manifest::new();
        for (k, v) in header.iter() {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v);
            }
        }
        Ok(Checkpoint {
            iteration: header.require("iteration")?,
            mean_target_affinity: header.require("mean_target_affinity")?,
            fingerprint: header.require("fingerprint")?,
            config,
            seg,
            state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what: format!("{what} {}", path.display()),
                detail,
            },
            other => other,
        })
    }
}

/// Checkpoint with the largest `mean_target_affinity`; ties go to the later
/// iteration.
pub fn select_model(history: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best: Option<&Checkpoint> = None;
    for c in history {
        best = match best {
            Some(b)
                if b.mean_target_affinity > c.mean_target_affinity
                    || (b.mean_target_affinity == c.mean_target_affinity && b.iteration > c.iteration) =>
            {
                Some(b)
            }
            _ => Some(c),
        };
    }
    best.ok_or_else(|| Error::InvalidArgument("model selection over an empty history".into()))
}
