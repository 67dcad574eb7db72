//! The three-step training pipeline and its ablation modes.
//!
//! Step 1 pretrains the segmenter on labeled source grids, then (in the
//! adaptation modes) fine-tunes it jointly on source cross-entropy and
//! entropy minimization over unlabeled target grids, restricted to the
//! top-k% most confident pixels as judged once by the frozen pretrained
//! model. Step 2 pseudo-labels the target split, banks real per-(class,
//! domain) features, and fits a noise-to-feature generator by Gaussian MMD —
//! domain-aware and adversarial in the full mode. Step 3 retrains the
//! classification head over the full class set on real shared source
//! features plus generated private features, and the full mode finishes with
//! self-training on its own pseudo-labels.
//!
//! Sum-shaped losses are divided by the pixel (or kept-pixel) count of each
//! minibatch before stepping, so the configured learning rates are
//! batch-size independent.

use crate::losses::{
    adversarial_loss, discriminator_loss, entropy_loss, gmmn_mmd, seg_cross_entropy,
    ConfidenceMask, KernelBandwidths,
};
use crate::metrics::{gzsl_report, ConfusionMatrix, MetricsReport, ABSENT_LABEL};
use crate::models::{
    load_checkpoint, prefixed, save_checkpoint, Discriminator, Generator, ParamReader, Segmenter,
};
use crate::optim::{Adam, SgdPoly};
use crate::rng::Rng;
use crate::scenario::{validate_scenario, Dataset, Domain, LabeledGrid};
use crate::tensor::{Tape, Tensor};
use crate::{BudaError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Ablation ladder; each mode adds one ingredient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Zero-shot transfer only: source pretraining, domain-agnostic
    /// generator, head retraining.
    Zs3,
    /// Plus all-pixel entropy minimization on the target split.
    Zs3Uda,
    /// Plus confidence masking of the entropy term.
    Zs3Adapt,
    /// Plus the domain-aware adversarial generator and final self-training.
    Budanet,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Zs3, Mode::Zs3Uda, Mode::Zs3Adapt, Mode::Budanet];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Zs3 => "zs3",
            Mode::Zs3Uda => "zs3-uda",
            Mode::Zs3Adapt => "zs3-adapt",
            Mode::Budanet => "budanet",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = BudaError;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "zs3" => Ok(Mode::Zs3),
            "zs3-uda" => Ok(Mode::Zs3Uda),
            "zs3-adapt" => Ok(Mode::Zs3Adapt),
            "budanet" => Ok(Mode::Budanet),
            other => Err(BudaError::Contract(format!(
                "unknown mode {other:?}; expected zs3 | zs3-uda | zs3-adapt | budanet"
            ))),
        }
    }
}

/// Everything tunable about a run. All fields have working defaults; JSON
/// configs may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub lambda_ent: f64,
    pub lambda_adv: f64,
    /// Top-k% confident pixels kept by the entropy mask.
    pub k_pct: f64,
    /// Top-p% confident pseudo-labels kept, split-wide.
    pub p_pct: f64,
    pub n_gen_per_class: usize,
    pub d_hidden: usize,
    pub d_f: usize,
    pub d_z: usize,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub gen_iters: usize,
    pub gen_batch: usize,
    pub head_iters: usize,
    pub head_batch_per_class: usize,
    pub self_train_epochs: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_lr: f64,
    pub bandwidths: Vec<f64>,
    /// Rescale the bandwidth family to the real population's median pairwise
    /// distance instead of using it verbatim.
    pub auto_bandwidth: bool,
    /// Substitute hidden ground-truth labels for kept pseudo-labels.
    pub use_oracle_labels: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lambda_ent: 0.01,
            lambda_adv: 0.1,
            k_pct: 50.0,
            p_pct: 50.0,
            n_gen_per_class: 200,
            d_hidden: 32,
            d_f: 16,
            d_z: 8,
            pretrain_epochs: 3,
            adapt_epochs: 3,
            gen_iters: 3000,
            gen_batch: 48,
            head_iters: 300,
            head_batch_per_class: 16,
            self_train_epochs: 1,
            base_lr: 1e-2,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            adam_lr: 2e-4,
            bandwidths: vec![2.0, 5.0, 10.0, 20.0, 40.0, 60.0],
            auto_bandwidth: false,
            use_oracle_labels: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k_pct", self.k_pct), ("p_pct", self.p_pct)] {
            if !(v > 0.0 && v <= 100.0) {
                return Err(BudaError::Contract(format!("{name} must lie in (0, 100], got {v}")));
            }
        }
        if self.lambda_ent < 0.0 || self.lambda_adv < 0.0 {
            return Err(BudaError::Contract("loss weights must be >= 0".into()));
        }
        if self.d_hidden < 1 || self.d_f < 1 || self.d_z < 1 {
            return Err(BudaError::Contract("model dims must be >= 1".into()));
        }
        if self.n_gen_per_class < 1 || self.gen_batch < 1 || self.head_batch_per_class < 1 {
            return Err(BudaError::Contract("batch/population sizes must be >= 1".into()));
        }
        KernelBandwidths { sigmas: self.bandwidths.clone() }.validate()?;
        Ok(())
    }
}

/// Which objectives actually shaped this run; introspected by mode tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveLosses {
    pub seg_ce: bool,
    pub entropy: bool,
    pub masked_entropy: bool,
    pub gmmn: bool,
    pub domain_aware_generator: bool,
    pub adversarial: bool,
    pub self_training: bool,
    pub oracle_labels: bool,
}

/// Loss trace of one named training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub name: String,
    pub losses: Vec<f64>,
    /// Probability clamps hit on this stage's tapes.
    pub clamps: u64,
}

impl StageLog {
    fn new(name: &str) -> Self {
        StageLog { name: name.into(), losses: Vec::new(), clamps: 0 }
    }
}

/// Everything a run reports besides metrics and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub mode: String,
    pub active: ActiveLosses,
    pub stages: Vec<StageLog>,
    /// Step-2 class draws that hit an empty real population and were redrawn.
    pub skip_resample_count: u64,
    /// Self-training found zero kept pixels and left the model untouched.
    pub zero_kept_warning: bool,
    /// Probability clamps observed across all tapes of the run.
    pub clamp_warnings: u64,
    pub pseudo_kept: Option<usize>,
    pub self_train_kept: Option<usize>,
    /// Classes that had no real or generated features at head retraining.
    pub head_classes_without_features: Vec<usize>,
}

/// Models produced along the way; every checkpoint is reloadable and
/// evaluation-equivalent to its in-memory source.
#[derive(Debug, Clone)]
pub struct StepArtifacts {
    pub f_pre: Segmenter,
    pub f_adapted: Option<Segmenter>,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    /// After head retraining, before any self-training.
    pub f_head: Segmenter,
    pub f_final: Segmenter,
}

impl StepArtifacts {
    /// Writes one checkpoint file per model into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join("f_pre.ckpt"), &prefixed("segmenter", self.f_pre.named_params()))?;
        if let Some(f) = &self.f_adapted {
            save_checkpoint(&dir.join("f_step1.ckpt"), &prefixed("segmenter", f.named_params()))?;
        }
        save_checkpoint(&dir.join("generator.ckpt"), &prefixed("generator", self.generator.named_params()))?;
        if let Some(d) = &self.discriminator {
            save_checkpoint(&dir.join("discriminator.ckpt"), &prefixed("discriminator", d.named_params()))?;
        }
        save_checkpoint(&dir.join("f_head.ckpt"), &prefixed("segmenter", self.f_head.named_params()))?;
        save_checkpoint(&dir.join("f_final.ckpt"), &prefixed("segmenter", self.f_final.named_params()))?;
        Ok(())
    }
}

/// Loads a segmenter checkpoint saved by [`StepArtifacts::save`].
pub fn load_segmenter(path: &Path) -> Result<Segmenter> {
    let entries = load_checkpoint(path)?;
    Segmenter::from_params(&mut ParamReader::new(&entries, "segmenter"))
}

/// Output bundle of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub log: RunLog,
    pub artifacts: StepArtifacts,
}

// ---------------------------------------------------------------------------
// Shared helpers.

fn grid_tensor(grid: &LabeledGrid, d_in: usize) -> Tensor {
    let n = grid.labels.len();
    Tensor::from_vec(vec![n, d_in], grid.inputs.clone()).expect("grid shapes validated on load")
}

/// One-hot rows for every labeled pixel; ABSENT pixels get a zero row and so
/// contribute nothing to a cross-entropy sum. Returns the labeled count.
fn onehot_rows(labels: &[u16], n_classes: usize) -> (Tensor, usize) {
    let mut vals = vec![0.0; labels.len() * n_classes];
    let mut kept = 0;
    for (p, l) in labels.iter().enumerate() {
        if *l != ABSENT_LABEL {
            vals[p * n_classes + *l as usize] = 1.0;
            kept += 1;
        }
    }
    (Tensor::from_vec(vec![labels.len(), n_classes], vals).expect("sized above"), kept)
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels and per-pixel max-probability confidence for one grid.
fn predict_grid(seg: &Segmenter, grid: &LabeledGrid) -> Result<(Vec<u16>, Vec<f64>)> {
    let n = grid.labels.len();
    let (_, probs) = seg.forward_plain(&grid.inputs, n)?;
    let c = seg.n_classes();
    let mut labels = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    for p in 0..n {
        let row = &probs[p * c..(p + 1) * c];
        let a = argmax_row(row);
        labels.push(a as u16);
        conf.push(row[a]);
    }
    Ok((labels, conf))
}

/// max(1, round(pct/100 * n)).
fn top_count(pct: f64, n: usize) -> usize {
    ((pct * n as f64 / 100.0).round() as usize).max(1)
}

// ---------------------------------------------------------------------------
// Step 1: pretraining and entropy adaptation.

/// Trains a fresh shared-class segmenter on the labeled source split.
pub fn pretrain_source(ds: &Dataset, cfg: &PipelineConfig, rng: &Rng) -> Result<(Segmenter, StageLog)> {
    let spec = &ds.spec;
    let mut seg = Segmenter::new(spec.d_in, cfg.d_hidden, cfg.d_f, spec.n_shared, &mut rng.derive("init"));
    let n_grids = ds.source.len();
    let mut opt = SgdPoly::new(
        cfg.base_lr,
        cfg.poly_power,
        cfg.momentum,
        cfg.weight_decay,
        (cfg.pretrain_epochs * n_grids).max(1) as u64,
    );
    let order_rng = rng.derive("order");
    let mut log = StageLog::new("pretrain");
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..n_grids).collect();
        order_rng.child(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for gi in &order {
            let grid = &ds.source[*gi];
            let (onehot, labeled) = onehot_rows(&grid.labels, spec.n_shared);
            let mut tape = Tape::new();
            let nodes = seg.leaves(&mut tape);
            let x = tape.constant(grid_tensor(grid, spec.d_in));
            let out = Segmenter::forward(&mut tape, nodes, x)?;
            let probs = tape.softmax_rows(out.logits)?;
            let ce = seg_cross_entropy(&mut tape, probs, &onehot)?;
            let loss = tape.scale(ce, 1.0 / labeled.max(1) as f64)?;
            epoch_loss += tape.values(loss)[0];
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = seg.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut seg.param_slices_mut(), &grad_refs)?;
            log.clamps += tape.clamp_warnings();
        }
        log.losses.push(epoch_loss / n_grids as f64);
    }
    Ok((seg, log))
}

/// Ranks pixels by max-probability confidence under `seg` and keeps the top
/// max(1, round(k_pct·H·W/100)); ties broken by ascending row-major index.
pub fn select_topk_confident(
    seg: &Segmenter,
    grid: &LabeledGrid,
    h: usize,
    w: usize,
    k_pct: f64,
) -> Result<ConfidenceMask> {
    if !(k_pct > 0.0 && k_pct <= 100.0) {
        return Err(BudaError::Contract(format!("k_pct must lie in (0, 100], got {k_pct}")));
    }
    if grid.labels.len() != h * w {
        return Err(BudaError::Shape(format!(
            "mask: grid has {} pixels, not {h}x{w}",
            grid.labels.len()
        )));
    }
    let (_, conf) = predict_grid(seg, grid)?;
    let n = top_count(k_pct, h * w);
    let mut idx: Vec<usize> = (0..h * w).collect();
    idx.sort_by(|a, b| conf[*b].partial_cmp(&conf[*a]).expect("finite confidences").then(a.cmp(b)));
    let mut selected = vec![false; h * w];
    for i in &idx[..n] {
        selected[*i] = true;
    }
    Ok(ConfidenceMask { h, w, selected, source_confidences: conf })
}

/// Joint source cross-entropy + masked target entropy fine-tuning, starting
/// from (a clone of) the pretrained model. Masks are computed once from the
/// frozen `f_pre` and never refreshed.
pub fn adapt_shared_step1(
    f_pre: &Segmenter,
    ds: &Dataset,
    cfg: &PipelineConfig,
    k_pct: f64,
    rng: &Rng,
) -> Result<(Segmenter, Vec<ConfidenceMask>, StageLog)> {
    let spec = &ds.spec;
    let masks: Vec<ConfidenceMask> = ds
        .target_train
        .iter()
        .map(|g| select_topk_confident(f_pre, g, spec.h, spec.w, k_pct))
        .collect::<Result<_>>()?;

    let mut seg = f_pre.clone();
    let n_tgt = ds.target_train.len();
    let n_src = ds.source.len();
    let mut opt = SgdPoly::new(
        cfg.base_lr,
        cfg.poly_power,
        cfg.momentum,
        cfg.weight_decay,
        (cfg.adapt_epochs * n_tgt).max(1) as u64,
    );
    let order_rng = rng.derive("order");
    let mut log = StageLog::new("adapt");
    for epoch in 0..cfg.adapt_epochs {
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        order_rng.child(2 * epoch as u64).shuffle(&mut tgt_order);
        let mut src_order: Vec<usize> = (0..n_src).collect();
        order_rng.child(2 * epoch as u64 + 1).shuffle(&mut src_order);
        let mut epoch_loss = 0.0;
        for (it, ti) in tgt_order.iter().enumerate() {
            let src = &ds.source[src_order[it % n_src]];
            let tgt = &ds.target_train[*ti];
            let (onehot, labeled) = onehot_rows(&src.labels, spec.n_shared);
            let mut tape = Tape::new();
            let nodes = seg.leaves(&mut tape);

            let xs = tape.constant(grid_tensor(src, spec.d_in));
            let out_s = Segmenter::forward(&mut tape, nodes, xs)?;
            let probs_s = tape.softmax_rows(out_s.logits)?;
            let ce = seg_cross_entropy(&mut tape, probs_s, &onehot)?;
            let ce = tape.scale(ce, 1.0 / labeled.max(1) as f64)?;

            let xt = tape.constant(grid_tensor(tgt, spec.d_in));
            let out_t = Segmenter::forward(&mut tape, nodes, xt)?;
            let probs_t = tape.softmax_rows(out_t.logits)?;
            let ent = entropy_loss(&mut tape, probs_t, Some(&masks[*ti]))?;
            let ent = tape.scale(ent, cfg.lambda_ent / spec.n_pixels() as f64)?;

            let loss = tape.add(ce, ent)?;
            epoch_loss += tape.values(loss)[0];
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = seg.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut seg.param_slices_mut(), &grad_refs)?;
            log.clamps += tape.clamp_warnings();
        }
        log.losses.push(epoch_loss / n_tgt as f64);
    }
    Ok((seg, masks, log))
}

// ---------------------------------------------------------------------------
// Step 2: pseudo-labels, feature bank, generator training.

/// Per-grid pseudo-labels; ignored pixels carry [`ABSENT_LABEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<Vec<u16>>,
    /// Max-probability confidence per pixel (kept or not).
    pub confidences: Vec<Vec<f64>>,
    pub n_kept: usize,
}

/// Argmax labels with split-wide top-p% retention; ties broken by ascending
/// (grid index, row-major pixel index). With `oracle` labels supplied, kept
/// pixels carry ground truth instead of the argmax.
pub fn pseudo_label(
    seg: &Segmenter,
    grids: &[LabeledGrid],
    p_pct: f64,
    oracle: Option<&[Vec<u16>]>,
) -> Result<PseudoLabelSet> {
    if !(p_pct > 0.0 && p_pct <= 100.0) {
        return Err(BudaError::Contract(format!("p_pct must lie in (0, 100], got {p_pct}")));
    }
    if let Some(o) = oracle {
        if o.len() != grids.len() {
            return Err(BudaError::Contract(format!(
                "oracle labels for {} grids, split has {}",
                o.len(),
                grids.len()
            )));
        }
    }
    let mut arg: Vec<Vec<u16>> = Vec::with_capacity(grids.len());
    let mut confidences: Vec<Vec<f64>> = Vec::with_capacity(grids.len());
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, grid) in grids.iter().enumerate() {
        let (labels, conf) = predict_grid(seg, grid)?;
        for (p, c) in conf.iter().enumerate() {
            ranked.push((*c, gi, p));
        }
        arg.push(labels);
        confidences.push(conf);
    }
    let total: usize = ranked.len();
    let n_kept = top_count(p_pct, total);
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).expect("finite confidences").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut labels: Vec<Vec<u16>> =
        grids.iter().map(|g| vec![ABSENT_LABEL; g.labels.len()]).collect();
    for (_, gi, p) in &ranked[..n_kept] {
        labels[*gi][*p] = match oracle {
            Some(o) => o[*gi][*p],
            None => arg[*gi][*p],
        };
    }
    Ok(PseudoLabelSet { labels, confidences, n_kept })
}

/// Where a banked feature came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gt,
    Pseudo,
    Generated,
}

/// Real (and later generated) d_f features keyed by (class, domain).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub d_f: usize,
    pub n_classes: usize,
    cells: Vec<BankCell>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BankCell {
    /// Row-major (count x d_f).
    pub features: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl BankCell {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

fn domain_slot(domain: Domain) -> usize {
    match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

impl FeatureBank {
    pub fn new(n_classes: usize, d_f: usize) -> Self {
        FeatureBank { d_f, n_classes, cells: vec![BankCell::default(); n_classes * 2] }
    }

    pub fn cell(&self, class: usize, domain: Domain) -> &BankCell {
        &self.cells[class * 2 + domain_slot(domain)]
    }

    pub fn push(&mut self, class: usize, domain: Domain, feature: &[f64], tag: Provenance) {
        debug_assert_eq!(feature.len(), self.d_f);
        let cell = &mut self.cells[class * 2 + domain_slot(domain)];
        cell.features.extend_from_slice(feature);
        cell.provenance.push(tag);
    }

    /// Mean feature of a cell; `None` when empty.
    pub fn cell_mean(&self, class: usize, domain: Domain) -> Option<Vec<f64>> {
        let cell = self.cell(class, domain);
        if cell.is_empty() {
            return None;
        }
        let n = cell.len();
        let mut mean = vec![0.0; self.d_f];
        for row in 0..n {
            for c in 0..self.d_f {
                mean[c] += cell.features[row * self.d_f + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Some(mean)
    }
}

/// Extracts features for every labeled source pixel and every kept target
/// pseudo-pixel. `oracle_mode` marks target entries as ground truth.
pub fn build_feature_bank(
    seg: &Segmenter,
    ds: &Dataset,
    pseudo: Option<&PseudoLabelSet>,
    oracle_mode: bool,
) -> Result<FeatureBank> {
    let spec = &ds.spec;
    let mut bank = FeatureBank::new(spec.n_total(), seg.d_f());
    for grid in &ds.source {
        let feats = seg.features_plain(&grid.inputs, grid.labels.len())?;
        for (p, l) in grid.labels.iter().enumerate() {
            bank.push(
                *l as usize,
                Domain::Source,
                &feats[p * bank.d_f..(p + 1) * bank.d_f],
                Provenance::Gt,
            );
        }
    }
    if let Some(pseudo) = pseudo {
        let tag = if oracle_mode { Provenance::Gt } else { Provenance::Pseudo };
        for (grid, labels) in ds.target_train.iter().zip(&pseudo.labels) {
            let feats = seg.features_plain(&grid.inputs, grid.labels.len())?;
            for (p, l) in labels.iter().enumerate() {
                if *l != ABSENT_LABEL {
                    bank.push(
                        *l as usize,
                        Domain::Target,
                        &feats[p * bank.d_f..(p + 1) * bank.d_f],
                        tag,
                    );
                }
            }
        }
    }
    Ok(bank)
}

fn sample_rows(cell: &BankCell, d_f: usize, n: usize, rng: &mut Rng) -> Tensor {
    let mut vals = Vec::with_capacity(n * d_f);
    for _ in 0..n {
        let row = rng.below(cell.len());
        vals.extend_from_slice(&cell.features[row * d_f..(row + 1) * d_f]);
    }
    Tensor::from_vec(vec![n, d_f], vals).expect("sized above")
}

fn gen_input_batch(
    embedding: &[f64],
    domain_indicator: f64,
    d_z: usize,
    n: usize,
    rng: &mut Rng,
) -> Tensor {
    let width = embedding.len() + d_z + 1;
    let mut vals = Vec::with_capacity(n * width);
    for _ in 0..n {
        let z = rng.gaussian_vec(d_z);
        vals.extend(Generator::pack_input(embedding, &z, domain_indicator));
    }
    Tensor::from_vec(vec![n, width], vals).expect("sized above")
}

/// Result of step-2 training.
pub struct GeneratorTraining {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub skip_resample_count: u64,
    pub logs: Vec<StageLog>,
}

/// Trains the feature generator by per-(class, domain) MMD. In domain-aware
/// mode a discriminator over generated source-vs-target features is trained
/// alongside and the generator additionally minimizes the adversarial BCE;
/// otherwise the generator is domain-agnostic (indicator fixed at target)
/// and matches real source features only.
pub fn train_generator_step2(
    bank: &FeatureBank,
    ds: &Dataset,
    cfg: &PipelineConfig,
    domain_aware: bool,
    rng: &Rng,
) -> Result<GeneratorTraining> {
    let spec = &ds.spec;
    let mut generator = Generator::new(spec.d_a, cfg.d_z, cfg.d_f, &mut rng.derive("gen_init"));
    let mut g_opt = Adam::new(cfg.adam_lr);
    let mut discriminator = domain_aware.then(|| Discriminator::new(cfg.d_f, &mut rng.derive("disc_init")));
    let mut d_opt = Adam::new(cfg.adam_lr);
    let mut step_rng = rng.derive("steps");
    let mut skip_resample_count = 0u64;

    // Classes eligible for training: at least one non-empty real cell in the
    // domains this mode matches against.
    let domains: &[Domain] =
        if domain_aware { &[Domain::Source, Domain::Target] } else { &[Domain::Source] };
    let candidates: Vec<usize> = (0..bank.n_classes)
        .filter(|c| domains.iter().any(|d| !bank.cell(*c, *d).is_empty()))
        .collect();
    if candidates.is_empty() {
        return Err(BudaError::Contract("generator training: feature bank is empty".into()));
    }

    let bandwidths = if cfg.auto_bandwidth {
        // Scale to the largest real source population for stability.
        let biggest = candidates
            .iter()
            .max_by_key(|c| bank.cell(**c, Domain::Source).len())
            .copied()
            .expect("non-empty candidate list");
        let cell = bank.cell(biggest, Domain::Source);
        let take = cell.len().min(256);
        let pop = Tensor::from_vec(
            vec![take, bank.d_f],
            cell.features[..take * bank.d_f].to_vec(),
        )?;
        KernelBandwidths::scaled_to_population(&pop)?
    } else {
        KernelBandwidths { sigmas: cfg.bandwidths.clone() }
    };

    let mut d_log = StageLog::new("step2.discriminator");
    let mut mmd_log = StageLog::new("step2.generator_mmd");
    let mut adv_log = StageLog::new("step2.generator_adv");

    for _ in 0..cfg.gen_iters {
        // Sample a class with real features; redraw (logged) on empty draws.
        let class = loop {
            let c = step_rng.below(bank.n_classes);
            if candidates.contains(&c) {
                break c;
            }
            skip_resample_count += 1;
        };
        let embedding = ds.embeddings.embedding(class);

        if let Some(disc) = discriminator.as_mut() {
            // Discriminator step on generated source vs generated target.
            let mut tape = Tape::new();
            let gnodes = generator.leaves(&mut tape);
            let in_s = tape.constant(gen_input_batch(
                embedding,
                Domain::Source.indicator(),
                cfg.d_z,
                cfg.gen_batch,
                &mut step_rng,
            ));
            let in_t = tape.constant(gen_input_batch(
                embedding,
                Domain::Target.indicator(),
                cfg.d_z,
                cfg.gen_batch,
                &mut step_rng,
            ));
            let fs = Generator::forward(&mut tape, gnodes, in_s, true, &mut step_rng)?;
            let ft = Generator::forward(&mut tape, gnodes, in_t, true, &mut step_rng)?;
            // Detach: D sees the generated features as constants.
            let fs_detached = tape.tensor(fs);
            let ft_detached = tape.tensor(ft);
            let fs = tape.constant(fs_detached);
            let ft = tape.constant(ft_detached);
            let dnodes = disc.leaves(&mut tape);
            let ps = Discriminator::forward(&mut tape, dnodes, fs)?;
            let pt = Discriminator::forward(&mut tape, dnodes, ft)?;
            let dl = discriminator_loss(&mut tape, ps, pt)?;
            d_log.losses.push(tape.values(dl)[0]);
            tape.backward(dl)?;
            let grads: Vec<Vec<f64>> = disc.grads(&tape, dnodes).iter().map(|g| g.to_vec()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            d_opt.step(&mut disc.param_slices_mut(), &grad_refs)?;
            d_log.clamps += tape.clamp_warnings();
        }

        // Generator step: MMD against each available real population, plus
        // the adversarial term in domain-aware mode.
        let mut tape = Tape::new();
        let gnodes = generator.leaves(&mut tape);
        let mut loss: Option<crate::tensor::NodeId> = None;
        let mut mmd_total = 0.0;
        let mut gen_t: Option<crate::tensor::NodeId> = None;
        for domain in domains {
            let cell = bank.cell(class, *domain);
            let indicator = if domain_aware { domain.indicator() } else { Domain::Target.indicator() };
            let input = tape.constant(gen_input_batch(
                embedding,
                indicator,
                cfg.d_z,
                cfg.gen_batch,
                &mut step_rng,
            ));
            let gen = Generator::forward(&mut tape, gnodes, input, true, &mut step_rng)?;
            if *domain == Domain::Target {
                gen_t = Some(gen);
            }
            if cell.is_empty() {
                continue;
            }
            let real = sample_rows(cell, bank.d_f, cfg.gen_batch, &mut step_rng);
            let mmd = gmmn_mmd(&mut tape, &real, gen, &bandwidths)?;
            mmd_total += tape.values(mmd)[0];
            loss = Some(match loss {
                Some(acc) => tape.add(acc, mmd)?,
                None => mmd,
            });
        }
        mmd_log.losses.push(mmd_total);
        if let Some(disc) = discriminator.as_ref() {
            if cfg.lambda_adv > 0.0 {
                // Frozen discriminator: parameters enter as constants.
                let wd = tape.constant(disc.l.w.clone());
                let bd = tape.constant(disc.l.b.clone());
                let gen_t = gen_t.expect("domain-aware loop always generates a target batch");
                let logit = tape.matmul(gen_t, wd)?;
                let logit = tape.add_row_vec(logit, bd)?;
                let pt = tape.sigmoid(logit)?;
                let adv = adversarial_loss(&mut tape, pt)?;
                adv_log.losses.push(tape.values(adv)[0]);
                let adv = tape.scale(adv, cfg.lambda_adv)?;
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, adv)?,
                    None => adv,
                });
            }
        }
        let loss = loss.ok_or_else(|| {
            BudaError::Contract("generator training: sampled class had no real features".into())
        })?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = generator.grads(&tape, gnodes).iter().map(|g| g.to_vec()).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        g_opt.step(&mut generator.param_slices_mut(), &grad_refs)?;
        mmd_log.clamps += tape.clamp_warnings();
    }

    let mut logs = vec![mmd_log];
    if domain_aware {
        logs.insert(0, d_log);
        logs.push(adv_log);
    }
    Ok(GeneratorTraining { generator, discriminator, skip_resample_count, logs })
}

/// Draws `n_per_class` eval-mode features per private class, conditioned on
/// the target domain.
pub fn synthesize_private_features(
    generator: &Generator,
    ds: &Dataset,
    n_per_class: usize,
    d_z: usize,
    rng: &Rng,
) -> Result<Vec<(usize, Tensor)>> {
    let mut out = Vec::new();
    for class in ds.spec.private_set() {
        let mut crng = rng.child(class as u64);
        let input = gen_input_batch(
            ds.embeddings.embedding(class),
            Domain::Target.indicator(),
            d_z,
            n_per_class,
            &mut crng,
        );
        let feats = generator.forward_eval(&input.values, n_per_class)?;
        out.push((class, Tensor::from_vec(vec![n_per_class, generator.d_f()], feats)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Step 3: head retraining and self-training.

/// Retrains a fresh full-width classification head on real shared source
/// features plus generated private features; the feature extractor is never
/// touched (bitwise).
pub fn retrain_classifier_step3(
    seg: &Segmenter,
    bank: &FeatureBank,
    generated: &[(usize, Tensor)],
    ds: &Dataset,
    cfg: &PipelineConfig,
    rng: &Rng,
) -> Result<(Segmenter, Vec<usize>, StageLog)> {
    let spec = &ds.spec;
    let n_total = spec.n_total();
    let mut full = seg.clone();
    full.reinit_head(n_total, &mut rng.derive("head_init"));

    // Per-class training pools: shared classes use real source features;
    // private classes use generated ones.
    let mut pools: Vec<&[f64]> = Vec::with_capacity(n_total);
    let mut pool_counts: Vec<usize> = Vec::with_capacity(n_total);
    let empty: &[f64] = &[];
    for class in 0..n_total {
        if class < spec.n_shared {
            let cell = bank.cell(class, Domain::Source);
            pools.push(&cell.features);
            pool_counts.push(cell.len());
        } else {
            match generated.iter().find(|(c, _)| *c == class) {
                Some((_, t)) => {
                    pools.push(&t.values);
                    pool_counts.push(t.shape[0]);
                }
                None => {
                    pools.push(empty);
                    pool_counts.push(0);
                }
            }
        }
    }
    let missing: Vec<usize> =
        (0..n_total).filter(|c| pool_counts[*c] == 0).collect();
    let present: Vec<usize> = (0..n_total).filter(|c| pool_counts[*c] > 0).collect();
    if present.is_empty() {
        return Err(BudaError::Contract("head retraining: no features at all".into()));
    }

    let mut opt = SgdPoly::new(
        cfg.base_lr,
        cfg.poly_power,
        cfg.momentum,
        cfg.weight_decay,
        cfg.head_iters.max(1) as u64,
    );
    let mut step_rng = rng.derive("steps");
    let mut log = StageLog::new("head_retrain");
    let m = cfg.head_batch_per_class;
    for _ in 0..cfg.head_iters {
        // Class-balanced batch: m feature rows per class with a pool.
        let rows = present.len() * m;
        let mut vals = Vec::with_capacity(rows * bank.d_f);
        let mut target = vec![0.0; rows * n_total];
        for (slot, class) in present.iter().enumerate() {
            for j in 0..m {
                let row = step_rng.below(pool_counts[*class]);
                vals.extend_from_slice(&pools[*class][row * bank.d_f..(row + 1) * bank.d_f]);
                target[(slot * m + j) * n_total + class] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let nodes = full.leaves(&mut tape);
        let f = tape.constant(Tensor::from_vec(vec![rows, bank.d_f], vals)?);
        let logits = Segmenter::head_forward(&mut tape, nodes, f)?;
        let probs = tape.softmax_rows(logits)?;
        let onehot = Tensor::from_vec(vec![rows, n_total], target)?;
        let ce = seg_cross_entropy(&mut tape, probs, &onehot)?;
        let loss = tape.scale(ce, 1.0 / rows as f64)?;
        log.losses.push(tape.values(loss)[0]);
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = full.head_grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut full.head_slices_mut(), &grad_refs)?;
        log.clamps += tape.clamp_warnings();
    }
    Ok((full, missing, log))
}

/// Pseudo-labels the target split over the full class set and fine-tunes the
/// whole network on the kept pixels. Returns the kept count; zero kept
/// leaves the model untouched.
pub fn self_train_step3(
    seg: &mut Segmenter,
    ds: &Dataset,
    cfg: &PipelineConfig,
    oracle: Option<&[Vec<u16>]>,
    rng: &Rng,
) -> Result<(usize, StageLog)> {
    let spec = &ds.spec;
    let pseudo = pseudo_label(seg, &ds.target_train, cfg.p_pct, oracle)?;
    let mut log = StageLog::new("self_train");
    if pseudo.n_kept == 0 {
        return Ok((0, log));
    }
    let grids_with_kept: Vec<usize> = (0..ds.target_train.len())
        .filter(|gi| pseudo.labels[*gi].iter().any(|l| *l != ABSENT_LABEL))
        .collect();
    // Fine-tuning stage: a fraction of the pretrain rate, so noisy pseudo-labels
    // refine the network instead of retraining it from scratch on them.
    let mut opt = SgdPoly::new(
        cfg.base_lr * 0.01,
        cfg.poly_power,
        cfg.momentum,
        cfg.weight_decay,
        (cfg.self_train_epochs * ds.target_train.len()).max(1) as u64,
    );
    let order_rng = rng.derive("order");
    for epoch in 0..cfg.self_train_epochs {
        let mut order = grids_with_kept.clone();
        order_rng.child(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for gi in &order {
            let grid = &ds.target_train[*gi];
            let (onehot, kept) = onehot_rows(&pseudo.labels[*gi], seg.n_classes());
            let mut tape = Tape::new();
            let nodes = seg.leaves(&mut tape);
            let x = tape.constant(grid_tensor(grid, spec.d_in));
            let out = Segmenter::forward(&mut tape, nodes, x)?;
            let probs = tape.softmax_rows(out.logits)?;
            let ce = seg_cross_entropy(&mut tape, probs, &onehot)?;
            let loss = tape.scale(ce, 1.0 / kept.max(1) as f64)?;
            epoch_loss += tape.values(loss)[0];
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = seg.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut seg.param_slices_mut(), &grad_refs)?;
            log.clamps += tape.clamp_warnings();
        }
        if !order.is_empty() {
            log.losses.push(epoch_loss / order.len() as f64);
        }
    }
    Ok((pseudo.n_kept, log))
}

// ---------------------------------------------------------------------------
// Orchestration.

/// Evaluates a segmenter on the labeled target-test split.
pub fn evaluate(seg: &Segmenter, ds: &Dataset) -> Result<MetricsReport> {
    let spec = &ds.spec;
    if seg.n_classes() != spec.n_total() {
        return Err(BudaError::Contract(format!(
            "evaluation: head covers {} classes, dataset has {}",
            seg.n_classes(),
            spec.n_total()
        )));
    }
    let mut cm = ConfusionMatrix::new(spec.n_total());
    for grid in &ds.target_test {
        let (pred, _) = predict_grid(seg, grid)?;
        cm.accumulate(&pred, &grid.labels)?;
    }
    gzsl_report(&cm, &spec.shared_set(), &spec.private_set())
}

/// Runs the full pipeline for `mode`. `oracle` must be provided exactly when
/// `cfg.use_oracle_labels` is set; the caller controls sidecar IO so that
/// non-oracle runs can be audited to never open it.
pub fn run_experiment(
    ds: &Dataset,
    cfg: &PipelineConfig,
    mode: Mode,
    seed: u64,
    oracle: Option<&[Vec<u16>]>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.use_oracle_labels != oracle.is_some() {
        return Err(BudaError::Contract(
            "oracle labels must be supplied iff use_oracle_labels is set".into(),
        ));
    }
    let gate = validate_scenario(ds, oracle);
    if !gate.is_clean() {
        return Err(BudaError::DatasetViolation(gate.violations.join("; ")));
    }

    let root = Rng::new(seed);
    let mut stages = Vec::new();
    let mut clamp_warnings = 0u64;

    // Step 1: pretraining, then mode-dependent entropy adaptation.
    let (f_pre, log) = pretrain_source(ds, cfg, &root.derive("pretrain"))?;
    stages.push(log);
    let k_eff = match mode {
        Mode::Zs3 => None,
        Mode::Zs3Uda => Some(100.0),
        Mode::Zs3Adapt | Mode::Budanet => Some(cfg.k_pct),
    };
    let f_adapted = match k_eff {
        Some(k) => {
            let (f, _masks, log) = adapt_shared_step1(&f_pre, ds, cfg, k, &root.derive("adapt"))?;
            stages.push(log);
            Some(f)
        }
        None => None,
    };
    let f_step1 = f_adapted.clone().unwrap_or_else(|| f_pre.clone());

    // Step 2: pseudo-labels and the feature bank. Baseline modes train a
    // domain-agnostic generator on real source features only.
    let domain_aware = mode == Mode::Budanet;
    let pseudo = if domain_aware {
        Some(pseudo_label(&f_step1, &ds.target_train, cfg.p_pct, oracle)?)
    } else {
        None
    };
    let pseudo_kept = pseudo.as_ref().map(|p| p.n_kept);
    let bank = build_feature_bank(&f_step1, ds, pseudo.as_ref(), cfg.use_oracle_labels)?;
    let trained = train_generator_step2(&bank, ds, cfg, domain_aware, &root.derive("step2"))?;
    stages.extend(trained.logs.clone());

    // Step 3: full-width head on real shared + generated private features.
    let generated = synthesize_private_features(
        &trained.generator,
        ds,
        cfg.n_gen_per_class,
        cfg.d_z,
        &root.derive("synthesize"),
    )?;
    let (mut f_final, missing, log) =
        retrain_classifier_step3(&f_step1, &bank, &generated, ds, cfg, &root.derive("head"))?;
    stages.push(log);
    let f_head = f_final.clone();

    let mut zero_kept_warning = false;
    let mut self_train_kept = None;
    let self_training = mode == Mode::Budanet && cfg.self_train_epochs > 0;
    if self_training {
        let (kept, log) =
            self_train_step3(&mut f_final, ds, cfg, oracle, &root.derive("selftrain"))?;
        self_train_kept = Some(kept);
        zero_kept_warning = kept == 0;
        stages.push(log);
    }

    let report = evaluate(&f_final, ds)?;
    clamp_warnings += stages.iter().map(|s| s.clamps).sum::<u64>();

    let active = ActiveLosses {
        seg_ce: true,
        entropy: mode != Mode::Zs3 && cfg.lambda_ent > 0.0,
        masked_entropy: mode != Mode::Zs3 && cfg.lambda_ent > 0.0 && k_eff.unwrap_or(100.0) < 100.0,
        gmmn: true,
        domain_aware_generator: domain_aware,
        adversarial: domain_aware && cfg.lambda_adv > 0.0,
        self_training: self_training && !zero_kept_warning,
        oracle_labels: cfg.use_oracle_labels,
    };
    let log = RunLog {
        mode: mode.as_str().to_string(),
        active,
        stages,
        skip_resample_count: trained.skip_resample_count,
        zero_kept_warning,
        clamp_warnings,
        pseudo_kept,
        self_train_kept,
        head_classes_without_features: missing,
    };
    let artifacts = StepArtifacts {
        f_pre,
        f_adapted,
        generator: trained.generator,
        discriminator: trained.discriminator,
        f_head,
        f_final,
    };
    Ok(RunOutput { report, log, artifacts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioSpec, ShiftSpec};

    fn small_spec(seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            n_source: 24,
            n_target_train: 24,
            n_target_test: 12,
            h: 8,
            w: 8,
            seed,
            ..ScenarioSpec::default()
        }
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            pretrain_epochs: 2,
            adapt_epochs: 1,
            gen_iters: 30,
            gen_batch: 24,
            head_iters: 60,
            self_train_epochs: 1,
            n_gen_per_class: 40,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn top_count_rule() {
        assert_eq!(top_count(1.0, 256), 3); // 2.56 rounds to 3
        assert_eq!(top_count(50.0, 4), 2);
        assert_eq!(top_count(25.0, 4), 1);
        assert_eq!(top_count(1.0, 1), 1);
        assert_eq!(top_count(100.0, 256), 256);
        assert_eq!(top_count(0.1, 10_000), 10);
    }

    #[test]
    fn topk_mask_matches_sort_oracle() {
        // 2x2 grid with confidences engineered via a degenerate segmenter is
        // overkill; instead check the public contract through pseudo-ranking
        // by constructing a grid whose pixel confidences are forced through
        // a real forward pass and then comparing against an explicit sort.
        let spec = small_spec(77);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = small_cfg();
        let (seg, _) = pretrain_source(&ds, &cfg, &Rng::new(1).derive("pretrain")).unwrap();
        let grid = &ds.target_train[0];
        for k in [1.0, 10.0, 25.0, 50.0, 100.0] {
            let mask = select_topk_confident(&seg, grid, spec.h, spec.w, k).unwrap();
            let n = top_count(k, spec.h * spec.w);
            assert_eq!(mask.n_selected(), n);
            mask.validate(n).unwrap();
            // Every selected confidence >= every unselected one.
            let sel_min = mask
                .source_confidences
                .iter()
                .zip(&mask.selected)
                .filter(|(_, s)| **s)
                .map(|(c, _)| *c)
                .fold(f64::INFINITY, f64::min);
            let unsel_max = mask
                .source_confidences
                .iter()
                .zip(&mask.selected)
                .filter(|(_, s)| !**s)
                .map(|(c, _)| *c)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(sel_min >= unsel_max);
        }
    }

    #[test]
    fn pseudo_label_cardinality_and_tie_breaks() {
        let spec = small_spec(5);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = small_cfg();
        let (seg, _) = pretrain_source(&ds, &cfg, &Rng::new(2).derive("pretrain")).unwrap();
        let n_pixels = ds.target_train.len() * spec.h * spec.w;
        for p in [1.0, 10.0, 25.0, 50.0, 100.0] {
            let pl = pseudo_label(&seg, &ds.target_train, p, None).unwrap();
            assert_eq!(pl.n_kept, top_count(p, n_pixels));
            let actual: usize = pl
                .labels
                .iter()
                .map(|g| g.iter().filter(|l| **l != ABSENT_LABEL).count())
                .sum();
            assert_eq!(actual, pl.n_kept);
        }
        let full = pseudo_label(&seg, &ds.target_train, 100.0, None).unwrap();
        assert!(full.labels.iter().all(|g| g.iter().all(|l| *l != ABSENT_LABEL)));
    }

    #[test]
    fn bank_counts_cross_check() {
        let spec = small_spec(6);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = small_cfg();
        let (seg, _) = pretrain_source(&ds, &cfg, &Rng::new(3).derive("pretrain")).unwrap();
        let pl = pseudo_label(&seg, &ds.target_train, 50.0, None).unwrap();
        let bank = build_feature_bank(&seg, &ds, Some(&pl), false).unwrap();

        let source_total: usize =
            (0..ds.spec.n_total()).map(|c| bank.cell(c, Domain::Source).len()).sum();
        let labeled_source: usize = ds.source.iter().map(|g| g.labels.len()).sum();
        assert_eq!(source_total, labeled_source);

        let target_total: usize =
            (0..ds.spec.n_total()).map(|c| bank.cell(c, Domain::Target).len()).sum();
        assert_eq!(target_total, pl.n_kept);

        for c in ds.spec.private_set() {
            assert!(bank.cell(c, Domain::Source).is_empty(), "no real private source features");
        }
    }

    #[test]
    fn head_retrain_freezes_features_bitwise_and_learns_bank() {
        let spec = ScenarioSpec { noise_std: 0.05, ..small_spec(7) };
        let ds = generate_scenario(&spec).unwrap();
        let cfg = small_cfg();
        let root = Rng::new(4);
        let (seg, _) = pretrain_source(&ds, &cfg, &root.derive("pretrain")).unwrap();
        let bank = build_feature_bank(&seg, &ds, None, false).unwrap();
        let trained = train_generator_step2(&bank, &ds, &cfg, false, &root.derive("step2")).unwrap();
        let generated = synthesize_private_features(
            &trained.generator,
            &ds,
            cfg.n_gen_per_class,
            cfg.d_z,
            &root.derive("synth"),
        )
        .unwrap();
        let (full, missing, _) =
            retrain_classifier_step3(&seg, &bank, &generated, &ds, &cfg, &root.derive("head"))
                .unwrap();
        assert!(missing.is_empty());
        assert_eq!(full.n_classes(), ds.spec.n_total());
        for (a, b) in [(&seg.l1, &full.l1), (&seg.l2, &full.l2)] {
            for (x, y) in a.w.values.iter().zip(&b.w.values) {
                assert_eq!(x.to_bits(), y.to_bits(), "feature extractor must be frozen");
            }
        }
        // Accuracy on the bank beats chance comfortably.
        let mut correct = 0usize;
        let mut total = 0usize;
        for c in 0..ds.spec.n_shared {
            let cell = bank.cell(c, Domain::Source);
            let n = cell.len().min(200);
            let logits = full.cls.forward_plain(&cell.features[..n * cfg.d_f], n);
            for r in 0..n {
                if argmax_row(&logits[r * full.n_classes()..(r + 1) * full.n_classes()]) == c {
                    correct += 1;
                }
            }
            total += n;
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 1.0 / ds.spec.n_total() as f64, "bank accuracy {acc} at chance");
    }

    #[test]
    fn generated_count_and_finiteness() {
        let spec = small_spec(8);
        let ds = generate_scenario(&spec).unwrap();
        let gen = Generator::new(spec.d_a, 8, 16, &mut Rng::new(5));
        let out = synthesize_private_features(&gen, &ds, 17, 8, &Rng::new(6)).unwrap();
        assert_eq!(out.len(), spec.n_private);
        for (_, t) in &out {
            assert_eq!(t.shape, vec![17, 16]);
            assert!(t.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn mode_ladder_activates_expected_losses() {
        let spec = small_spec(9);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = small_cfg();
        let run = |mode: Mode| run_experiment(&ds, &cfg, mode, 11, None).unwrap();

        let zs3 = run(Mode::Zs3);
        assert!(zs3.log.active.seg_ce && zs3.log.active.gmmn);
        assert!(!zs3.log.active.entropy && !zs3.log.active.masked_entropy);
        assert!(!zs3.log.active.domain_aware_generator && !zs3.log.active.adversarial);
        assert!(!zs3.log.active.self_training);

        let uda = run(Mode::Zs3Uda);
        assert!(uda.log.active.entropy && !uda.log.active.masked_entropy);
        assert!(!uda.log.active.adversarial && !uda.log.active.self_training);

        let adapt = run(Mode::Zs3Adapt);
        assert!(adapt.log.active.entropy && adapt.log.active.masked_entropy);
        assert!(!adapt.log.active.domain_aware_generator);

        let buda = run(Mode::Budanet);
        assert!(buda.log.active.entropy && buda.log.active.masked_entropy);
        assert!(buda.log.active.domain_aware_generator && buda.log.active.adversarial);
        assert!(buda.log.active.self_training);
        assert_eq!(buda.log.mode, "budanet");
    }

    #[test]
    fn budanet_with_neutralized_extras_reports_them_inactive() {
        let spec = small_spec(10);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = PipelineConfig {
            lambda_adv: 0.0,
            self_train_epochs: 0,
            k_pct: 100.0,
            ..small_cfg()
        };
        let out = run_experiment(&ds, &cfg, Mode::Budanet, 12, None).unwrap();
        assert!(!out.log.active.adversarial);
        assert!(!out.log.active.self_training);
        assert!(!out.log.active.masked_entropy);
        assert!(out.log.active.entropy);
        assert!(out.log.active.domain_aware_generator, "generator stays domain-conditioned");
    }

    #[test]
    fn same_seed_same_run_bitwise() {
        let spec = small_spec(11);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = small_cfg();
        let a = run_experiment(&ds, &cfg, Mode::Budanet, 13, None).unwrap();
        let b = run_experiment(&ds, &cfg, Mode::Budanet, 13, None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.log, b.log);
        for ((_, x), (_, y)) in a
            .artifacts
            .f_final
            .named_params()
            .iter()
            .zip(b.artifacts.f_final.named_params().iter())
        {
            for (v, w) in x.values.iter().zip(&y.values) {
                assert_eq!(v.to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn zs3_uda_is_exactly_adapt_with_k_100() {
        let spec = small_spec(12);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = PipelineConfig { k_pct: 100.0, ..small_cfg() };
        let uda = run_experiment(&ds, &cfg, Mode::Zs3Uda, 14, None).unwrap();
        let adapt = run_experiment(&ds, &cfg, Mode::Zs3Adapt, 14, None).unwrap();
        for ((_, x), (_, y)) in uda
            .artifacts
            .f_final
            .named_params()
            .iter()
            .zip(adapt.artifacts.f_final.named_params().iter())
        {
            for (v, w) in x.values.iter().zip(&y.values) {
                assert_eq!(v.to_bits(), w.to_bits());
            }
        }
        assert_eq!(uda.report, adapt.report);
    }

    #[test]
    fn run_rejects_invalid_dataset() {
        let spec = small_spec(13);
        let mut ds = generate_scenario(&spec).unwrap();
        ds.source[0].labels[0] = ds.spec.n_shared as u16;
        match run_experiment(&ds, &small_cfg(), Mode::Zs3, 15, None) {
            Err(BudaError::DatasetViolation(_)) => {}
            other => panic!("expected dataset violation, got {other:?}"),
        }
    }

    #[test]
    fn zero_weight_entropy_matches_source_only_fine_tuning() {
        let spec = small_spec(14);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = PipelineConfig { lambda_ent: 0.0, adapt_epochs: 1, ..small_cfg() };
        let root = Rng::new(16);
        let (f_pre, _) = pretrain_source(&ds, &cfg, &root.derive("pretrain")).unwrap();
        let (adapted, masks, _) =
            adapt_shared_step1(&f_pre, &ds, &cfg, cfg.k_pct, &root.derive("adapt")).unwrap();
        assert_eq!(masks.len(), ds.target_train.len());

        // Manual source-only loop consuming the same shuffles.
        let mut manual = f_pre.clone();
        let n_tgt = ds.target_train.len();
        let n_src = ds.source.len();
        let mut opt = SgdPoly::new(
            cfg.base_lr,
            cfg.poly_power,
            cfg.momentum,
            cfg.weight_decay,
            n_tgt as u64,
        );
        let order_rng = root.derive("adapt").derive("order");
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        order_rng.child(0).shuffle(&mut tgt_order);
        let mut src_order: Vec<usize> = (0..n_src).collect();
        order_rng.child(1).shuffle(&mut src_order);
        for (it, _) in tgt_order.iter().enumerate() {
            let src = &ds.source[src_order[it % n_src]];
            let (onehot, labeled) = onehot_rows(&src.labels, ds.spec.n_shared);
            let mut tape = Tape::new();
            let nodes = manual.leaves(&mut tape);
            let x = tape.constant(grid_tensor(src, ds.spec.d_in));
            let out = Segmenter::forward(&mut tape, nodes, x).unwrap();
            let probs = tape.softmax_rows(out.logits).unwrap();
            let ce = seg_cross_entropy(&mut tape, probs, &onehot).unwrap();
            let loss = tape.scale(ce, 1.0 / labeled as f64).unwrap();
            tape.backward(loss).unwrap();
            let grads: Vec<Vec<f64>> =
                manual.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            opt.step(&mut manual.param_slices_mut(), &grad_refs).unwrap();
        }
        for ((_, a), (_, b)) in adapted.named_params().iter().zip(manual.named_params().iter()) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits(), "zero-weight entropy must not move params");
            }
        }
    }

    #[test]
    fn self_train_reaches_private_pixels_on_easy_scenario() {
        let spec = ScenarioSpec {
            noise_std: 0.02,
            shift: ShiftSpec::Strength { strength: 0.1 },
            ..small_spec(17)
        };
        let ds = generate_scenario(&spec).unwrap();
        let cfg = PipelineConfig {
            pretrain_epochs: 3,
            adapt_epochs: 2,
            gen_iters: 1500,
            gen_batch: 32,
            self_train_epochs: 1,
            ..small_cfg()
        };
        let out = run_experiment(&ds, &cfg, Mode::Budanet, 18, None).unwrap();
        assert!(out.log.self_train_kept.unwrap() > 0);
        // The final model must predict private classes somewhere on test.
        let mut private_predicted = false;
        for grid in &ds.target_test {
            let (pred, _) = predict_grid(&out.artifacts.f_final, grid).unwrap();
            if pred.iter().any(|l| (*l as usize) >= spec.n_shared) {
                private_predicted = true;
                break;
            }
        }
        assert!(private_predicted, "budanet never predicts private classes");
    }

    #[test]
    fn checkpoints_round_trip_evaluation_equivalent() {
        let spec = small_spec(19);
        let ds = generate_scenario(&spec).unwrap();
        let cfg = small_cfg();
        let out = run_experiment(&ds, &cfg, Mode::Zs3, 20, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.artifacts.save(dir.path()).unwrap();
        let reloaded = load_segmenter(&dir.path().join("f_final.ckpt")).unwrap();
        let r1 = evaluate(&out.artifacts.f_final, &ds).unwrap();
        let r2 = evaluate(&reloaded, &ds).unwrap();
        assert_eq!(r1, r2);
    }
}

