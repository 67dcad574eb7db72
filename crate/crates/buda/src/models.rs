//! The three networks: per-pixel segmenter, feature generator, and domain
//! discriminator, plus the shared checkpoint format.
//!
//! All models hold plain [`Tensor`] parameters (He-initialized weights, zero
//! biases) and are pushed onto a [`Tape`] as leaves for training. Evaluation
//! paths reuse the exact same kernels, so taped and tape-free forwards agree
//! bit for bit.

use crate::rng::Rng;
use crate::tensor::{matmul_plain, softmax_rows_plain, NodeId, Tape, Tensor};
use crate::{ioaudit, write_atomic, BudaError, Result};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Negative-side slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Generator hidden width; fixed by construction, not configurable.
pub const GEN_HIDDEN: usize = 256;
/// Generator hidden dropout rate (inverted scaling at train time).
pub const DROPOUT_RATE: f64 = 0.5;

const CHECKPOINT_MAGIC: &[u8; 8] = b"BUDAMDL1";

/// Fully connected layer; `w` is (fan_in x fan_out), `b` is (fan_out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// He-initialized weights (std sqrt(2/fan_in)), zero biases.
    pub fn he(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = rng.gaussian_vec(fan_in * fan_out).iter().map(|g| g * std).collect();
        Linear {
            w: Tensor::from_vec(vec![fan_in, fan_out], w).expect("sized above").with_grad(),
            b: Tensor::zeros(vec![fan_out]).with_grad(),
        }
    }

    pub fn leaves(&self, tape: &mut Tape) -> (NodeId, NodeId) {
        (tape.leaf(&self.w), tape.leaf(&self.b))
    }

    pub fn forward(tape: &mut Tape, nodes: (NodeId, NodeId), x: NodeId) -> Result<NodeId> {
        let h = tape.matmul(x, nodes.0)?;
        tape.add_row_vec(h, nodes.1)
    }

    /// Tape-free forward over `n` rows.
    pub fn forward_plain(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (fan_in, fan_out) = (self.w.shape[0], self.w.shape[1]);
        let mut out = matmul_plain(x, &self.w.values, n, fan_in, fan_out);
        for r in 0..n {
            for c in 0..fan_out {
                out[r * fan_out + c] += self.b.values[c];
            }
        }
        out
    }
}

fn leaky_plain(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Per-pixel segmenter: a two-layer feature extractor (leaky ReLU after each
/// layer; the second activation is the feature vector) and a linear
/// classification head over the current class set.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    pub l1: Linear,
    pub l2: Linear,
    pub cls: Linear,
}

/// Tape node ids for one [`Segmenter`] instance.
#[derive(Debug, Clone, Copy)]
pub struct SegmenterNodes {
    pub l1: (NodeId, NodeId),
    pub l2: (NodeId, NodeId),
    pub cls: (NodeId, NodeId),
}

/// Taped forward products of the segmenter.
#[derive(Debug, Clone, Copy)]
pub struct SegmenterOut {
    pub features: NodeId,
    pub logits: NodeId,
}

impl Segmenter {
    pub fn new(d_in: usize, d_hidden: usize, d_f: usize, n_classes: usize, rng: &mut Rng) -> Self {
        assert!(d_in >= 1 && d_hidden >= 1 && d_f >= 1 && n_classes >= 1);
        Segmenter {
            l1: Linear::he(d_in, d_hidden, &mut rng.derive("seg.l1")),
            l2: Linear::he(d_hidden, d_f, &mut rng.derive("seg.l2")),
            cls: Linear::he(d_f, n_classes, &mut rng.derive("seg.cls")),
        }
    }

    pub fn d_in(&self) -> usize {
        self.l1.w.shape[0]
    }

    pub fn d_f(&self) -> usize {
        self.l2.w.shape[1]
    }

    pub fn n_classes(&self) -> usize {
        self.cls.w.shape[1]
    }

    /// Replaces the classification head with a fresh He-initialized one over
    /// `n_classes` outputs; the feature extractor is untouched.
    pub fn reinit_head(&mut self, n_classes: usize, rng: &mut Rng) {
        self.cls = Linear::he(self.d_f(), n_classes, &mut rng.derive("seg.cls"));
    }

    pub fn leaves(&self, tape: &mut Tape) -> SegmenterNodes {
        SegmenterNodes {
            l1: self.l1.leaves(tape),
            l2: self.l2.leaves(tape),
            cls: self.cls.leaves(tape),
        }
    }

    /// Forward over pixel rows (n x d_in). Features are the post-activation
    /// output of the second layer; logits are the linear head on top.
    pub fn forward(tape: &mut Tape, nodes: SegmenterNodes, x: NodeId) -> Result<SegmenterOut> {
        let h = Linear::forward(tape, nodes.l1, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let f = Linear::forward(tape, nodes.l2, h)?;
        let f = tape.leaky_relu(f, LEAKY_SLOPE)?;
        let logits = Linear::forward(tape, nodes.cls, f)?;
        Ok(SegmenterOut { features: f, logits })
    }

    /// Classification head only, for feature-space inputs (n x d_f).
    pub fn head_forward(tape: &mut Tape, nodes: SegmenterNodes, f: NodeId) -> Result<NodeId> {
        Linear::forward(tape, nodes.cls, f)
    }

    /// Tape-free features for pixel rows (n x d_in).
    pub fn features_plain(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        if n * self.d_in() != x.len() {
            return Err(BudaError::Shape(format!(
                "segmenter input: {} values is not {n} rows of {}",
                x.len(),
                self.d_in()
            )));
        }
        let mut h = self.l1.forward_plain(x, n);
        leaky_plain(&mut h);
        let mut f = self.l2.forward_plain(&h, n);
        leaky_plain(&mut f);
        Ok(f)
    }

    /// Tape-free (features, probs) for pixel rows.
    pub fn forward_plain(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.features_plain(x, n)?;
        let mut probs = self.cls.forward_plain(&f, n);
        softmax_rows_plain(&mut probs, n, self.n_classes());
        Ok((f, probs))
    }

    /// Parameter slices in checkpoint order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.l1.w.values,
            &mut self.l1.b.values,
            &mut self.l2.w.values,
            &mut self.l2.b.values,
            &mut self.cls.w.values,
            &mut self.cls.b.values,
        ]
    }

    /// Feature-extractor slices only (head frozen).
    pub fn feat_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.l1.w.values,
            &mut self.l1.b.values,
            &mut self.l2.w.values,
            &mut self.l2.b.values,
        ]
    }

    /// Head slices only (feature extractor frozen).
    pub fn head_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.cls.w.values, &mut self.cls.b.values]
    }

    /// Gradients from the tape, in the same order as [`Self::param_slices_mut`].
    pub fn grads<'t>(&self, tape: &'t Tape, nodes: SegmenterNodes) -> Vec<&'t [f64]> {
        [nodes.l1.0, nodes.l1.1, nodes.l2.0, nodes.l2.1, nodes.cls.0, nodes.cls.1]
            .iter()
            .map(|id| tape.grad(*id).expect("segmenter leaves require grad"))
            .collect()
    }

    pub fn feat_grads<'t>(&self, tape: &'t Tape, nodes: SegmenterNodes) -> Vec<&'t [f64]> {
        [nodes.l1.0, nodes.l1.1, nodes.l2.0, nodes.l2.1]
            .iter()
            .map(|id| tape.grad(*id).expect("segmenter leaves require grad"))
            .collect()
    }

    pub fn head_grads<'t>(&self, tape: &'t Tape, nodes: SegmenterNodes) -> Vec<&'t [f64]> {
        [nodes.cls.0, nodes.cls.1]
            .iter()
            .map(|id| tape.grad(*id).expect("segmenter leaves require grad"))
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("l1.w".into(), &self.l1.w),
            ("l1.b".into(), &self.l1.b),
            ("l2.w".into(), &self.l2.w),
            ("l2.b".into(), &self.l2.b),
            ("cls.w".into(), &self.cls.w),
            ("cls.b".into(), &self.cls.b),
        ]
    }

    pub fn from_params(params: &mut ParamReader<'_>) -> Result<Self> {
        Ok(Segmenter {
            l1: Linear { w: params.take2("l1.w")?.with_grad(), b: params.take1("l1.b")?.with_grad() },
            l2: Linear { w: params.take2("l2.w")?.with_grad(), b: params.take1("l2.b")?.with_grad() },
            cls: Linear { w: params.take2("cls.w")?.with_grad(), b: params.take1("cls.b")?.with_grad() },
        })
    }
}

/// Feature generator: input `[a | z | d]` of width d_a + d_z + 1, one hidden
/// layer of [`GEN_HIDDEN`] units with leaky ReLU and dropout, linear output
/// of width d_f.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorNodes {
    pub l1: (NodeId, NodeId),
    pub l2: (NodeId, NodeId),
}

impl Generator {
    pub fn new(d_a: usize, d_z: usize, d_f: usize, rng: &mut Rng) -> Self {
        Generator {
            l1: Linear::he(d_a + d_z + 1, GEN_HIDDEN, &mut rng.derive("gen.l1")),
            l2: Linear::he(GEN_HIDDEN, d_f, &mut rng.derive("gen.l2")),
        }
    }

    /// Input width d_a + d_z + 1.
    pub fn d_input(&self) -> usize {
        self.l1.w.shape[0]
    }

    pub fn d_f(&self) -> usize {
        self.l2.w.shape[1]
    }

    /// Packs one generator input row: embedding, then noise, then the domain
    /// indicator as the single trailing scalar.
    pub fn pack_input(a: &[f64], z: &[f64], d: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(a.len() + z.len() + 1);
        row.extend_from_slice(a);
        row.extend_from_slice(z);
        row.push(d);
        row
    }

    pub fn leaves(&self, tape: &mut Tape) -> GeneratorNodes {
        GeneratorNodes { l1: self.l1.leaves(tape), l2: self.l2.leaves(tape) }
    }

    /// Taped forward over packed input rows (n x d_input). In train mode a
    /// fresh inverted-scaled dropout mask is drawn from `rng` per call.
    pub fn forward(
        tape: &mut Tape,
        nodes: GeneratorNodes,
        input: NodeId,
        train_mode: bool,
        rng: &mut Rng,
    ) -> Result<NodeId> {
        let n = tape.shape(input)[0];
        let h = Linear::forward(tape, nodes.l1, input)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = if train_mode {
            let keep = 1.0 - DROPOUT_RATE;
            let mask: Vec<f64> = (0..n * GEN_HIDDEN)
                .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            let m = tape.constant(Tensor::from_vec(vec![n, GEN_HIDDEN], mask)?);
            tape.mul(h, m)?
        } else {
            h
        };
        Linear::forward(tape, nodes.l2, h)
    }

    /// Tape-free eval-mode forward (dropout is the identity).
    pub fn forward_eval(&self, input: &[f64], n: usize) -> Result<Vec<f64>> {
        if n * self.d_input() != input.len() {
            return Err(BudaError::Shape(format!(
                "generator input: {} values is not {n} rows of {}",
                input.len(),
                self.d_input()
            )));
        }
        let mut h = self.l1.forward_plain(input, n);
        leaky_plain(&mut h);
        Ok(self.l2.forward_plain(&h, n))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.l1.w.values,
            &mut self.l1.b.values,
            &mut self.l2.w.values,
            &mut self.l2.b.values,
        ]
    }

    pub fn grads<'t>(&self, tape: &'t Tape, nodes: GeneratorNodes) -> Vec<&'t [f64]> {
        [nodes.l1.0, nodes.l1.1, nodes.l2.0, nodes.l2.1]
            .iter()
            .map(|id| tape.grad(*id).expect("generator leaves require grad"))
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("l1.w".into(), &self.l1.w),
            ("l1.b".into(), &self.l1.b),
            ("l2.w".into(), &self.l2.w),
            ("l2.b".into(), &self.l2.b),
        ]
    }

    pub fn from_params(params: &mut ParamReader<'_>) -> Result<Self> {
        Ok(Generator {
            l1: Linear { w: params.take2("l1.w")?.with_grad(), b: params.take1("l1.b")?.with_grad() },
            l2: Linear { w: params.take2("l2.w")?.with_grad(), b: params.take1("l2.b")?.with_grad() },
        })
    }
}

/// Domain discriminator: one linear map d_f -> 1 plus a logistic squash.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub l: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorNodes {
    pub l: (NodeId, NodeId),
}

impl Discriminator {
    pub fn new(d_f: usize, rng: &mut Rng) -> Self {
        Discriminator { l: Linear::he(d_f, 1, &mut rng.derive("disc.l")) }
    }

    pub fn leaves(&self, tape: &mut Tape) -> DiscriminatorNodes {
        DiscriminatorNodes { l: self.l.leaves(tape) }
    }

    /// Probabilities in (0,1), one per input row.
    pub fn forward(tape: &mut Tape, nodes: DiscriminatorNodes, f: NodeId) -> Result<NodeId> {
        let logit = Linear::forward(tape, nodes.l, f)?;
        tape.sigmoid(logit)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.l.w.values, &mut self.l.b.values]
    }

    pub fn grads<'t>(&self, tape: &'t Tape, nodes: DiscriminatorNodes) -> Vec<&'t [f64]> {
        [nodes.l.0, nodes.l.1]
            .iter()
            .map(|id| tape.grad(*id).expect("discriminator leaves require grad"))
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("l.w".into(), &self.l.w), ("l.b".into(), &self.l.b)]
    }

    pub fn from_params(params: &mut ParamReader<'_>) -> Result<Self> {
        Ok(Discriminator {
            l: Linear { w: params.take2("l.w")?.with_grad(), b: params.take1("l.b")?.with_grad() },
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "BUDAMDL1", u32 LE manifest length, JSON manifest
// listing (name, shape) in order, then the raw little-endian f64 arrays
// back to back in manifest order.

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Saves named tensors to `path`; ordering in `entries` is preserved and
/// significant.
pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let manifest: Vec<ManifestEntry> = entries
        .iter()
        .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape.clone() })
        .collect();
    let mjson = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(12 + mjson.len() + entries.iter().map(|(_, t)| t.numel() * 8).sum::<usize>());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    for (_, t) in entries {
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Loads a checkpoint into (name, tensor) pairs in file order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    ioaudit::record(path);
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(BudaError::Format(format!("{}: not a model checkpoint", path.display())));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + mlen {
        return Err(BudaError::Format(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[12..12 + mlen])?;
    let mut off = 12 + mlen;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let numel: usize = entry.shape.iter().product();
        let end = off + numel * 8;
        if bytes.len() < end {
            return Err(BudaError::Format(format!(
                "{}: truncated array for {}",
                path.display(),
                entry.name
            )));
        }
        let values: Vec<f64> = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((entry.name, Tensor::from_vec(entry.shape, values)?));
        off = end;
    }
    if off != bytes.len() {
        return Err(BudaError::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}

/// Cursor over loaded checkpoint entries; models consume their parameters by
/// name under an optional prefix.
pub struct ParamReader<'a> {
    entries: &'a [(String, Tensor)],
    prefix: String,
}

impl<'a> ParamReader<'a> {
    pub fn new(entries: &'a [(String, Tensor)], prefix: &str) -> Self {
        ParamReader { entries, prefix: prefix.to_string() }
    }

    fn take(&mut self, name: &str, want_rank: usize) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let found = self
            .entries
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| BudaError::Format(format!("checkpoint missing tensor {full}")))?;
        if found.1.shape.len() != want_rank {
            return Err(BudaError::Format(format!(
                "checkpoint tensor {full} has rank {}, wanted {want_rank}",
                found.1.shape.len()
            )));
        }
        Ok(found.1.clone())
    }

    pub fn take2(&mut self, name: &str) -> Result<Tensor> {
        self.take(name, 2)
    }

    pub fn take1(&mut self, name: &str) -> Result<Tensor> {
        self.take(name, 1)
    }
}

/// Prefixes every name in a model's parameter list, for multi-model files.
pub fn prefixed<'t>(prefix: &str, params: Vec<(String, &'t Tensor)>) -> Vec<(String, &'t Tensor)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}
