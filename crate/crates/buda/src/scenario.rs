//! Synthetic BUDA scenarios: labeled source grids over shared classes,
//! unlabeled target-train grids, and labeled target-test grids over shared
//! plus private classes, joined by a controlled affine domain shift.
//!
//! The construction keeps the zero-shot premise exactly true: class means in
//! input space are an affine image of the class embeddings (`x̄_c = M a_c`
//! in the source domain, `W_t (M a_c) + s_t` in the target domain), and each
//! private-class embedding is a convex combination of 2–3 shared anchors.
//! Inputs are quantized to f32 at generation time so the on-disk format
//! round-trips bit-exactly.
//!
//! Oracle labels for the (nominally unlabeled) target-train split live in a
//! separate sidecar file that is only ever opened by the explicit oracle
//! loading call, never by ordinary dataset loading.

use crate::metrics::ABSENT_LABEL;
use crate::rng::Rng;
use crate::{ioaudit, write_atomic, BudaError, Result};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

const SPLIT_MAGIC: &[u8; 6] = b"BUDA1\0";
const FORMAT_VERSION: u32 = 1;

/// Which distribution a grid was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Generator/discriminator conditioning scalar: source 1, target 0.
    pub fn indicator(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }
}

/// Domain shift requested by a scenario spec: either a seeded random affine
/// of a given strength, or explicit matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShiftSpec {
    /// `w_t = I + (strength/sqrt(d_in)) G`, `s_t = strength g`, with G, g
    /// standard normal draws from the scenario seed.
    Strength { strength: f64 },
    /// Row-major d_in x d_in matrix and length-d_in offset.
    Explicit { w_t: Vec<f64>, s_t: Vec<f64> },
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::Strength { strength: 0.35 }
    }
}

/// User-facing scenario description (the JSON `gen-data` consumes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n_shared: usize,
    pub n_private: usize,
    pub h: usize,
    pub w: usize,
    pub d_in: usize,
    pub d_a: usize,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub shift: ShiftSpec,
    /// Per-coordinate input noise τ.
    pub noise_std: f64,
    pub rects_min: usize,
    pub rects_max: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            n_shared: 6,
            n_private: 2,
            h: 16,
            w: 16,
            d_in: 8,
            d_a: 8,
            n_source: 200,
            n_target_train: 200,
            n_target_test: 100,
            shift: ShiftSpec::default(),
            noise_std: 0.3,
            rects_min: 2,
            rects_max: 5,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn n_total(&self) -> usize {
        self.n_shared + self.n_private
    }

    /// Hard gate applied by the CLI before generation. The library itself
    /// accepts τ = 0 and other degenerate corners for diagnostics.
    pub fn validate(&self) -> Result<()> {
        if self.n_shared < 2 {
            return Err(BudaError::Contract(format!(
                "scenario: n_shared must be >= 2, got {}",
                self.n_shared
            )));
        }
        if self.n_private < 1 {
            return Err(BudaError::Contract("scenario: n_private must be >= 1".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(BudaError::Contract(format!(
                "scenario: noise_std must be > 0, got {}",
                self.noise_std
            )));
        }
        if self.h < 1 || self.w < 1 || self.d_in < 1 || self.d_a < 1 {
            return Err(BudaError::Contract("scenario: all dimensions must be >= 1".into()));
        }
        if self.n_source < 1 || self.n_target_train < 1 || self.n_target_test < 1 {
            return Err(BudaError::Contract("scenario: all split sizes must be >= 1".into()));
        }
        if self.rects_min < 1 || self.rects_min > self.rects_max {
            return Err(BudaError::Contract(format!(
                "scenario: bad rectangle range {}..{}",
                self.rects_min, self.rects_max
            )));
        }
        if self.n_total() > usize::from(ABSENT_LABEL) {
            return Err(BudaError::Contract("scenario: class count exceeds label width".into()));
        }
        if let ShiftSpec::Explicit { w_t, s_t } = &self.shift {
            if w_t.len() != self.d_in * self.d_in || s_t.len() != self.d_in {
                return Err(BudaError::Contract(format!(
                    "scenario: explicit shift sized {}/{} does not match d_in {}",
                    w_t.len(),
                    s_t.len(),
                    self.d_in
                )));
            }
        }
        Ok(())
    }
}

/// Convex recipe behind one private-class embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateMix {
    pub anchors: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Per-class semantic embeddings; rows 0..n_shared are unit-norm shared
/// embeddings, the rest are convex combinations described by `private_mixes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub d_a: usize,
    /// n_total rows of d_a values.
    pub table: Vec<Vec<f64>>,
    /// One entry per private class, in class-id order.
    pub private_mixes: Vec<PrivateMix>,
}

impl EmbeddingTable {
    pub fn embedding(&self, class: usize) -> &[f64] {
        &self.table[class]
    }
}

/// Draws shared embeddings i.i.d. normal then unit-normalizes; each private
/// embedding mixes 2–3 distinct shared anchors with flat-Dirichlet weights
/// (not re-normalized afterwards).
pub fn make_embeddings(spec: &ScenarioSpec, rng: &Rng) -> EmbeddingTable {
    let mut table = Vec::with_capacity(spec.n_total());
    for c in 0..spec.n_shared {
        let mut e = rng.child(c as u64);
        let mut v = e.gaussian_vec(spec.d_a);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate embedding draw");
        v.iter_mut().for_each(|x| *x /= norm);
        table.push(v);
    }
    let mut private_mixes = Vec::with_capacity(spec.n_private);
    for j in 0..spec.n_private {
        let mut e = rng.child((spec.n_shared + j) as u64);
        let n_anchors = e.range_inclusive(2, 3.min(spec.n_shared));
        let anchors = e.sample_distinct(spec.n_shared, n_anchors);
        // Flat Dirichlet via normalized unit-exponential draws.
        let draws: Vec<f64> = (0..n_anchors).map(|_| -(1.0 - e.next_f64()).ln()).collect();
        let total: f64 = draws.iter().sum();
        let weights: Vec<f64> = draws.iter().map(|d| d / total).collect();
        let mut v = vec![0.0; spec.d_a];
        for (a, w) in anchors.iter().zip(&weights) {
            for (vi, ti) in v.iter_mut().zip(&table[*a]) {
                *vi += w * ti;
            }
        }
        table.push(v);
        private_mixes.push(PrivateMix { anchors, weights });
    }
    EmbeddingTable { d_a: spec.d_a, table, private_mixes }
}

/// One H x W grid; `inputs` is pixel-major row-major, so pixel p occupies
/// `inputs[p*d_in .. (p+1)*d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGrid {
    pub inputs: Vec<f64>,
    pub labels: Vec<u16>,
    pub domain: Domain,
}

/// Spec echo with every seeded draw resolved, written to the manifest; this
/// plus the embedding table fully determines the dataset geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedScenario {
    pub n_shared: usize,
    pub n_private: usize,
    pub h: usize,
    pub w: usize,
    pub d_in: usize,
    pub d_a: usize,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    /// Row-major d_in x d_in target warp.
    pub w_t: Vec<f64>,
    /// Length-d_in target offset.
    pub s_t: Vec<f64>,
    pub noise_std: f64,
    pub rects_min: usize,
    pub rects_max: usize,
    pub seed: u64,
    /// Row-major d_in x d_a embedding-to-input mixing matrix M.
    pub mixing: Vec<f64>,
    pub class_names: Vec<String>,
}

impl ResolvedScenario {
    pub fn n_total(&self) -> usize {
        self.n_shared + self.n_private
    }

    pub fn n_pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn shared_set(&self) -> Vec<usize> {
        (0..self.n_shared).collect()
    }

    pub fn private_set(&self) -> Vec<usize> {
        (self.n_shared..self.n_total()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: ResolvedScenario,
    embeddings: EmbeddingTable,
}

/// A full scenario in memory. `oracle` carries the hidden target-train
/// labels; plain [`load_dataset`] leaves it `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ResolvedScenario,
    pub embeddings: EmbeddingTable,
    pub source: Vec<LabeledGrid>,
    pub target_train: Vec<LabeledGrid>,
    pub target_test: Vec<LabeledGrid>,
    pub oracle: Option<Vec<Vec<u16>>>,
}

impl Dataset {
    /// Noise-free input-space mean of `class` in `domain`.
    pub fn class_mean(&self, class: usize, domain: Domain) -> Vec<f64> {
        let d_in = self.spec.d_in;
        let a = self.embeddings.embedding(class);
        let mut base = vec![0.0; d_in];
        for (i, b) in base.iter_mut().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                *b += self.spec.mixing[i * self.spec.d_a + j] * aj;
            }
        }
        match domain {
            Domain::Source => base,
            Domain::Target => {
                let mut out = self.spec.s_t.clone();
                for (i, o) in out.iter_mut().enumerate() {
                    for (j, bj) in base.iter().enumerate() {
                        *o += self.spec.w_t[i * d_in + j] * bj;
                    }
                }
                out
            }
        }
    }
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn paint_labels(spec: &ScenarioSpec, palette: usize, rng: &mut Rng) -> Vec<u16> {
    let mut labels = vec![rng.below(palette) as u16; spec.h * spec.w];
    let n_rects = rng.range_inclusive(spec.rects_min, spec.rects_max);
    for _ in 0..n_rects {
        let class = rng.below(palette) as u16;
        let (h0, h1) = order(rng.below(spec.h), rng.below(spec.h));
        let (w0, w1) = order(rng.below(spec.w), rng.below(spec.w));
        for h in h0..=h1 {
            for w in w0..=w1 {
                labels[h * spec.w + w] = class;
            }
        }
    }
    labels
}

fn order(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn render_inputs(
    labels: &[u16],
    means: &[Vec<f64>],
    noise_std: f64,
    d_in: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut inputs = Vec::with_capacity(labels.len() * d_in);
    for label in labels {
        let mean = &means[*label as usize];
        for m in mean.iter().take(d_in) {
            inputs.push(quantize_f32(m + noise_std * rng.gaussian()));
        }
    }
    inputs
}

/// Builds the full dataset for `spec`. Deterministic: the same spec yields a
/// bit-identical dataset.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Dataset> {
    if spec.noise_std < 0.0 || !spec.noise_std.is_finite() {
        return Err(BudaError::Contract("scenario: noise_std must be finite and >= 0".into()));
    }
    if spec.n_shared < 2 || spec.n_private < 1 {
        return Err(BudaError::Contract("scenario: need n_shared >= 2 and n_private >= 1".into()));
    }
    let root = Rng::new(spec.seed);
    let embeddings = make_embeddings(spec, &root.derive("embeddings"));

    let mixing = root.derive("mixing").gaussian_vec(spec.d_in * spec.d_a);
    let (w_t, s_t) = match &spec.shift {
        ShiftSpec::Explicit { w_t, s_t } => {
            if w_t.len() != spec.d_in * spec.d_in || s_t.len() != spec.d_in {
                return Err(BudaError::Contract("scenario: explicit shift dims mismatch".into()));
            }
            (w_t.clone(), s_t.clone())
        }
        ShiftSpec::Strength { strength } => {
            let mut sr = root.derive("shift");
            let scale = strength / (spec.d_in as f64).sqrt();
            let mut w_t: Vec<f64> = sr.gaussian_vec(spec.d_in * spec.d_in);
            w_t.iter_mut().for_each(|v| *v *= scale);
            for i in 0..spec.d_in {
                w_t[i * spec.d_in + i] += 1.0;
            }
            let s_t: Vec<f64> = sr.gaussian_vec(spec.d_in).iter().map(|v| v * strength).collect();
            (w_t, s_t)
        }
    };

    let mut class_names: Vec<String> = (0..spec.n_shared).map(|c| format!("shared_{c}")).collect();
    class_names.extend((0..spec.n_private).map(|c| format!("private_{c}")));
    let resolved = ResolvedScenario {
        n_shared: spec.n_shared,
        n_private: spec.n_private,
        h: spec.h,
        w: spec.w,
        d_in: spec.d_in,
        d_a: spec.d_a,
        n_source: spec.n_source,
        n_target_train: spec.n_target_train,
        n_target_test: spec.n_target_test,
        w_t,
        s_t,
        noise_std: spec.noise_std,
        rects_min: spec.rects_min,
        rects_max: spec.rects_max,
        seed: spec.seed,
        mixing,
        class_names,
    };

    // Noise-free class means per domain, computed once.
    let skeleton = Dataset {
        spec: resolved.clone(),
        embeddings: embeddings.clone(),
        source: Vec::new(),
        target_train: Vec::new(),
        target_test: Vec::new(),
        oracle: None,
    };
    let src_means: Vec<Vec<f64>> =
        (0..spec.n_total()).map(|c| skeleton.class_mean(c, Domain::Source)).collect();
    let tgt_means: Vec<Vec<f64>> =
        (0..spec.n_total()).map(|c| skeleton.class_mean(c, Domain::Target)).collect();

    let src_stream = root.derive("source");
    let source: Vec<LabeledGrid> = (0..spec.n_source)
        .map(|i| {
            let mut g = src_stream.child(i as u64);
            let labels = paint_labels(spec, spec.n_shared, &mut g);
            let inputs = render_inputs(&labels, &src_means, spec.noise_std, spec.d_in, &mut g);
            LabeledGrid { inputs, labels, domain: Domain::Source }
        })
        .collect();

    let tt_stream = root.derive("target_train");
    let mut oracle = Vec::with_capacity(spec.n_target_train);
    let target_train: Vec<LabeledGrid> = (0..spec.n_target_train)
        .map(|i| {
            let mut g = tt_stream.child(i as u64);
            let labels = paint_labels(spec, spec.n_total(), &mut g);
            let inputs = render_inputs(&labels, &tgt_means, spec.noise_std, spec.d_in, &mut g);
            oracle.push(labels);
            LabeledGrid {
                inputs,
                labels: vec![ABSENT_LABEL; spec.h * spec.w],
                domain: Domain::Target,
            }
        })
        .collect();

    let te_stream = root.derive("target_test");
    let target_test: Vec<LabeledGrid> = (0..spec.n_target_test)
        .map(|i| {
            let mut g = te_stream.child(i as u64);
            let labels = paint_labels(spec, spec.n_total(), &mut g);
            let inputs = render_inputs(&labels, &tgt_means, spec.noise_std, spec.d_in, &mut g);
            LabeledGrid { inputs, labels, domain: Domain::Target }
        })
        .collect();

    Ok(Dataset {
        spec: resolved,
        embeddings,
        source,
        target_train,
        target_test,
        oracle: Some(oracle),
    })
}

// ---------------------------------------------------------------------------
// Disk format.

fn encode_split(spec: &ResolvedScenario, grids: &[LabeledGrid]) -> Vec<u8> {
    let per_grid = spec.d_in * spec.n_pixels() * 4 + spec.n_pixels() * 2;
    let mut bytes = Vec::with_capacity(26 + grids.len() * per_grid);
    bytes.extend_from_slice(SPLIT_MAGIC);
    for v in [grids.len(), spec.h, spec.w, spec.d_in, spec.n_total()] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for grid in grids {
        for v in &grid.inputs {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for l in &grid.labels {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
    }
    bytes
}

struct SplitHeader {
    n_grids: usize,
    h: usize,
    w: usize,
    d_in: usize,
    n_total: usize,
}

fn read_header(bytes: &[u8], path: &Path) -> Result<SplitHeader> {
    if bytes.len() < 26 || &bytes[..6] != SPLIT_MAGIC {
        return Err(BudaError::Format(format!("{}: not a split file", path.display())));
    }
    let word = |i: usize| -> usize {
        u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    Ok(SplitHeader { n_grids: word(0), h: word(1), w: word(2), d_in: word(3), n_total: word(4) })
}

fn decode_split(bytes: &[u8], path: &Path, domain: Domain) -> Result<(SplitHeader, Vec<LabeledGrid>)> {
    let header = read_header(bytes, path)?;
    let n_pixels = header.h * header.w;
    let per_grid = header.d_in * n_pixels * 4 + n_pixels * 2;
    let want = 26 + header.n_grids * per_grid;
    if bytes.len() != want {
        return Err(BudaError::Format(format!(
            "{}: {} bytes, header implies {want}",
            path.display(),
            bytes.len()
        )));
    }
    let mut grids = Vec::with_capacity(header.n_grids);
    let mut off = 26;
    for _ in 0..header.n_grids {
        let mut inputs = Vec::with_capacity(header.d_in * n_pixels);
        for _ in 0..header.d_in * n_pixels {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
            inputs.push(v as f64);
            off += 4;
        }
        let mut labels = Vec::with_capacity(n_pixels);
        for _ in 0..n_pixels {
            labels.push(u16::from_le_bytes(bytes[off..off + 2].try_into().expect("2 bytes")));
            off += 2;
        }
        grids.push(LabeledGrid { inputs, labels, domain });
    }
    Ok((header, grids))
}

fn encode_oracle(spec: &ResolvedScenario, oracle: &[Vec<u16>]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(26 + oracle.len() * spec.n_pixels() * 2);
    bytes.extend_from_slice(SPLIT_MAGIC);
    for v in [oracle.len(), spec.h, spec.w, spec.d_in, spec.n_total()] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for labels in oracle {
        for l in labels {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
    }
    bytes
}

/// Writes `manifest.json`, the three split files, and the oracle sidecar
/// (`target_train.oracle`, label blocks only) into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let oracle = ds.oracle.as_ref().ok_or_else(|| {
        BudaError::Contract("save_dataset: dataset carries no oracle labels".into())
    })?;
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        embeddings: ds.embeddings.clone(),
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    write_atomic(&dir.join("source.bin"), &encode_split(&ds.spec, &ds.source))?;
    write_atomic(&dir.join("target_train.bin"), &encode_split(&ds.spec, &ds.target_train))?;
    write_atomic(&dir.join("target_test.bin"), &encode_split(&ds.spec, &ds.target_test))?;
    write_atomic(&dir.join("target_train.oracle"), &encode_oracle(&ds.spec, oracle))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    ioaudit::record(path);
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn check_header(h: &SplitHeader, spec: &ResolvedScenario, n_grids: usize, path: &Path) -> Result<()> {
    if h.h != spec.h || h.w != spec.w || h.d_in != spec.d_in || h.n_total != spec.n_total() {
        return Err(BudaError::Format(format!(
            "{}: header ({}, {}, {}, {}) disagrees with manifest ({}, {}, {}, {})",
            path.display(),
            h.h,
            h.w,
            h.d_in,
            h.n_total,
            spec.h,
            spec.w,
            spec.d_in,
            spec.n_total()
        )));
    }
    if h.n_grids != n_grids {
        return Err(BudaError::Format(format!(
            "{}: {} grids, manifest says {n_grids}",
            path.display(),
            h.n_grids
        )));
    }
    Ok(())
}

/// Loads a dataset directory. The oracle sidecar is deliberately not read;
/// use [`load_oracle`] in the explicit oracle branch.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(BudaError::Format(format!(
            "manifest format version {} unsupported",
            manifest.format_version
        )));
    }
    let spec = manifest.spec;
    if manifest.embeddings.table.len() != spec.n_total() {
        return Err(BudaError::Format(format!(
            "manifest: {} classes but {} embedding rows",
            spec.n_total(),
            manifest.embeddings.table.len()
        )));
    }
    if manifest.embeddings.private_mixes.len() != spec.n_private {
        return Err(BudaError::Format("manifest: private mix count mismatch".into()));
    }

    let load = |name: &str, domain: Domain, n: usize| -> Result<Vec<LabeledGrid>> {
        let path = dir.join(name);
        let (header, grids) = decode_split(&read_file(&path)?, &path, domain)?;
        check_header(&header, &spec, n, &path)?;
        Ok(grids)
    };
    let source = load("source.bin", Domain::Source, spec.n_source)?;
    let target_train = load("target_train.bin", Domain::Target, spec.n_target_train)?;
    let target_test = load("target_test.bin", Domain::Target, spec.n_target_test)?;
    Ok(Dataset {
        spec,
        embeddings: manifest.embeddings,
        source,
        target_train,
        target_test,
        oracle: None,
    })
}

/// Reads the hidden target-train labels. The only call site is the oracle
/// pseudo-label branch; everything else must leave the sidecar untouched.
pub fn load_oracle(dir: &Path, spec: &ResolvedScenario) -> Result<Vec<Vec<u16>>> {
    let path = dir.join("target_train.oracle");
    let bytes = read_file(&path)?;
    let header = read_header(&bytes, &path)?;
    check_header(&header, spec, spec.n_target_train, &path)?;
    let n_pixels = spec.n_pixels();
    let want = 26 + header.n_grids * n_pixels * 2;
    if bytes.len() != want {
        return Err(BudaError::Format(format!(
            "{}: {} bytes, header implies {want}",
            path.display(),
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(header.n_grids);
    let mut off = 26;
    for _ in 0..header.n_grids {
        let labels: Vec<u16> = bytes[off..off + 2 * n_pixels]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect();
        off += 2 * n_pixels;
        out.push(labels);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Validation.

/// Violations found by [`validate_scenario`]; data, not exceptions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks structural dataset invariants: split sizes, label ranges, source
/// purity (no private labels), unlabeled target-train, and — when oracle
/// labels are supplied — sidecar alignment against the scenario's class
/// geometry.
pub fn validate_scenario(ds: &Dataset, oracle: Option<&[Vec<u16>]>) -> ValidationReport {
    let mut v = Vec::new();
    let spec = &ds.spec;
    let n_total = spec.n_total() as u16;
    let n_pixels = spec.n_pixels();

    for (name, split, want) in [
        ("source", &ds.source, spec.n_source),
        ("target_train", &ds.target_train, spec.n_target_train),
        ("target_test", &ds.target_test, spec.n_target_test),
    ] {
        if split.len() != want {
            v.push(format!("{name}: {} grids, spec says {want}", split.len()));
        }
        for (i, grid) in split.iter().enumerate() {
            if grid.labels.len() != n_pixels || grid.inputs.len() != n_pixels * spec.d_in {
                v.push(format!("{name}[{i}]: wrong grid shape"));
            }
        }
    }

    for (i, grid) in ds.source.iter().enumerate() {
        for (p, label) in grid.labels.iter().enumerate() {
            if *label == ABSENT_LABEL {
                v.push(format!("source[{i}] pixel {p}: unlabeled pixel in labeled split"));
            } else if *label >= spec.n_shared as u16 {
                v.push(format!(
                    "source[{i}] pixel {p}: private or out-of-range class {label} in source"
                ));
            }
        }
    }
    for (i, grid) in ds.target_train.iter().enumerate() {
        if grid.labels.iter().any(|l| *l != ABSENT_LABEL) {
            v.push(format!("target_train[{i}]: carries labels but must be unlabeled"));
        }
    }
    for (i, grid) in ds.target_test.iter().enumerate() {
        for (p, label) in grid.labels.iter().enumerate() {
            if *label == ABSENT_LABEL {
                v.push(format!("target_test[{i}] pixel {p}: unlabeled pixel in labeled split"));
            } else if *label >= n_total {
                v.push(format!("target_test[{i}] pixel {p}: class {label} out of range"));
            }
        }
    }

    if let Some(oracle) = oracle {
        if oracle.len() != ds.target_train.len() {
            v.push(format!(
                "oracle: {} grids, target_train has {}",
                oracle.len(),
                ds.target_train.len()
            ));
        }
        let means: Vec<Vec<f64>> =
            (0..spec.n_total()).map(|c| ds.class_mean(c, Domain::Target)).collect();
        // Mean squared residual of an aligned grid concentrates around
        // d_in τ²; six standard errors plus a quantization allowance keeps
        // aligned grids inside while a shuffled sidecar (residual at the
        // scale of squared class-mean separation) lands far outside.
        let tau2 = spec.noise_std * spec.noise_std;
        let threshold = tau2 * (spec.d_in as f64 + 6.0 * (2.0 * spec.d_in as f64 / n_pixels as f64).sqrt())
            + 1e-9;
        for (i, (grid, labels)) in ds.target_train.iter().zip(oracle).enumerate() {
            if labels.len() != n_pixels {
                v.push(format!("oracle[{i}]: wrong pixel count"));
                continue;
            }
            if let Some(p) = labels.iter().position(|l| *l >= n_total) {
                v.push(format!("oracle[{i}] pixel {p}: class {} out of range", labels[p]));
                continue;
            }
            let mut residual = 0.0;
            for (p, label) in labels.iter().enumerate() {
                let mean = &means[*label as usize];
                for c in 0..spec.d_in {
                    let diff = grid.inputs[p * spec.d_in + c] - mean[c];
                    residual += diff * diff;
                }
            }
            residual /= n_pixels as f64;
            if residual > threshold {
                v.push(format!(
                    "oracle[{i}]: mean residual {residual:.4} exceeds {threshold:.4}; sidecar misaligned"
                ));
            }
        }
    }

    for (c, mix) in ds.embeddings.private_mixes.iter().enumerate() {
        let sum: f64 = mix.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            v.push(format!("embeddings: private {c} weights sum to {sum}"));
        }
        if mix.weights.iter().any(|w| *w < 0.0) {
            v.push(format!("embeddings: private {c} has negative weight"));
        }
    }

    ValidationReport { violations: v }
}
