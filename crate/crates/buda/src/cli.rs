//! Command-line interface: dataset generation, experiment runs, sweeps,
//! checkpoint evaluation, and the gradient self-check.
//!
//! Exit codes are stable: 0 success, 2 contract/usage errors (bad flags,
//! unknown mode, invalid spec or config, malformed files, head-width
//! mismatch), 3 dataset validation failures, 1 anything else.

use crate::metrics::MetricsReport;
use crate::models::{Discriminator, Generator, Segmenter};
use crate::pipeline::{
    self, load_segmenter, Mode, PipelineConfig, RunOutput,
};
use crate::rng::Rng;
use crate::scenario::{
    generate_scenario, load_dataset, load_oracle, save_dataset, validate_scenario, ScenarioSpec,
};
use crate::tensor::{finite_diff_gradient, max_rel_err, Tape, Tensor};
use crate::{write_atomic, BudaError, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "buda", version, about = "Boundless domain adaptation on synthetic desk-scale scenarios")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scenario dataset directory.
    GenData {
        /// Scenario spec JSON; defaults apply for missing fields and when
        /// the flag is omitted entirely.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one pipeline mode on a dataset directory.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// zs3 | zs3-uda | zs3-adapt | budanet
        #[arg(long)]
        mode: String,
        /// Pipeline config JSON; defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a parameter sweep: one run per (value, seed), plus seed-mean rows.
    Sweep {
        /// p | private-count
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 10,30,50,70,100.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds, e.g. 0,1,2,3,4.
        #[arg(long)]
        seeds: String,
        /// Base scenario spec JSON (defaults when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Pipeline mode for every run (default budanet).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Add a ground-truth pseudo-label variant row (param p only).
        #[arg(long)]
        oracle: bool,
    },
    /// Evaluate a segmenter checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every loss/network gradient against finite differences.
    Gradcheck,
}

/// Written next to every run's outputs; enough to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub mode: String,
    pub dataset: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub wall_clock_secs: f64,
    pub outputs: Vec<String>,
}

fn exit_code(err: &BudaError) -> i32 {
    match err {
        BudaError::Contract(_) | BudaError::Format(_) | BudaError::Json(_) => 2,
        BudaError::DatasetViolation(_) => 3,
        _ => 1,
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out, seed } => cmd_gen_data(spec.as_deref(), &out, seed),
        Cmd::Run { data, mode, config, seed, out } => {
            cmd_run(&data, &mode, config.as_deref(), seed, &out).map(|_| ())
        }
        Cmd::Sweep { param, values, seeds, spec, mode, config, out, oracle } => cmd_sweep(
            &param,
            &values,
            &seeds,
            spec.as_deref(),
            mode.as_deref(),
            config.as_deref(),
            &out,
            oracle,
        ),
        Cmd::Eval { data, model, out } => cmd_eval(&data, &model, &out),
        Cmd::Gradcheck => cmd_gradcheck(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_spec(path: Option<&Path>, seed: Option<u64>) -> Result<ScenarioSpec> {
    let mut spec: ScenarioSpec = match path {
        Some(p) => read_json(p)?,
        None => ScenarioSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    Ok(spec)
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// gen-data

pub fn cmd_gen_data(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let spec = load_spec(spec_path, seed)?;
    let ds = generate_scenario(&spec)?;
    let gate = validate_scenario(&ds, ds.oracle.as_deref());
    if !gate.is_clean() {
        return Err(BudaError::DatasetViolation(gate.violations.join("; ")));
    }
    save_dataset(&ds, out)?;
    println!(
        "wrote scenario to {}: {} shared + {} private classes, {}x{} grids, {}/{}/{} splits",
        out.display(),
        spec.n_shared,
        spec.n_private,
        spec.h,
        spec.w,
        spec.n_source,
        spec.n_target_train,
        spec.n_target_test
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_vec_pretty(report)?;
    write_atomic(&dir.join("report.json"), &json)?;
    let csv = format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row());
    write_atomic(&dir.join("report.csv"), csv.as_bytes())
}

fn write_run_outputs(dir: &Path, out: &RunOutput, with_checkpoints: bool) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = vec!["report.json".to_string(), "report.csv".to_string(), "run_log.json".to_string()];
    write_report(dir, &out.report)?;
    write_atomic(&dir.join("run_log.json"), &serde_json::to_vec_pretty(&out.log)?)?;
    if with_checkpoints {
        out.artifacts.save(dir)?;
        files.push("f_pre.ckpt".into());
        if out.artifacts.f_adapted.is_some() {
            files.push("f_step1.ckpt".into());
        }
        files.push("generator.ckpt".into());
        if out.artifacts.discriminator.is_some() {
            files.push("discriminator.ckpt".into());
        }
        files.push("f_head.ckpt".into());
        files.push("f_final.ckpt".into());
    }
    Ok(files)
}

pub fn cmd_run(
    data: &Path,
    mode_str: &str,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<RunOutput> {
    let mode: Mode = mode_str.parse()?;
    let cfg = load_config(config)?;
    let started = Instant::now();
    let ds = load_dataset(data)?;
    let oracle = if cfg.use_oracle_labels { Some(load_oracle(data, &ds.spec)?) } else { None };
    let result = pipeline::run_experiment(&ds, &cfg, mode, seed, oracle.as_deref())?;
    let mut outputs = write_run_outputs(out, &result, true)?;
    outputs.push("run_manifest.json".into());
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        mode: mode.as_str().to_string(),
        dataset: data.display().to_string(),
        seed,
        config: cfg,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        outputs,
    };
    write_atomic(&out.join("run_manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    println!(
        "mode {} seed {seed}: hPA {:.1} hMA {:.1} hIoU {:.1} -> {}",
        mode.as_str(),
        manifest_metric(&result, |r| r.h_pa),
        manifest_metric(&result, |r| r.h_ma),
        manifest_metric(&result, |r| r.h_iou),
        out.display()
    );
    Ok(result)
}

fn manifest_metric(out: &RunOutput, f: impl Fn(&MetricsReport) -> f64) -> f64 {
    f(&out.report)
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone)]
struct SweepTask {
    index: usize,
    /// Value column as printed in the CSV ("10", "2", "gt").
    label: String,
    spec: ScenarioSpec,
    cfg: PipelineConfig,
    seed: u64,
}

fn parse_list(raw: &str, what: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| BudaError::Contract(format!("invalid {what} entry {v:?}")))
        })
        .collect()
}

fn sweep_workers() -> usize {
    match std::env::var("BUDA_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|n| *n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    param: &str,
    values_raw: &str,
    seeds_raw: &str,
    spec_path: Option<&Path>,
    mode_str: Option<&str>,
    config: Option<&Path>,
    out: &Path,
    oracle: bool,
) -> Result<()> {
    let mode: Mode = mode_str.unwrap_or("budanet").parse()?;
    let base_spec = load_spec(spec_path, None)?;
    let base_cfg = load_config(config)?;
    let values = parse_list(values_raw, "values")?;
    let seeds = parse_list(seeds_raw, "seeds")?;
    if values.is_empty() || seeds.is_empty() {
        return Err(BudaError::Contract("sweep needs at least one value and one seed".into()));
    }

    // Build the task list; validity of each value is checked up front.
    let mut tasks: Vec<SweepTask> = Vec::new();
    for value in &values {
        for seed in &seeds {
            let mut spec = base_spec.clone();
            spec.seed = *seed;
            let mut cfg = base_cfg.clone();
            match param {
                "p" => {
                    if !(*value >= 1 && *value <= 100) {
                        return Err(BudaError::Contract(format!(
                            "p value {value} outside 1..=100"
                        )));
                    }
                    cfg.p_pct = *value as f64;
                }
                "private-count" => {
                    if *value < 1 {
                        return Err(BudaError::Contract("private-count values must be >= 1".into()));
                    }
                    spec.n_private = *value as usize;
                }
                other => {
                    return Err(BudaError::Contract(format!(
                        "unknown sweep param {other:?}; expected p | private-count"
                    )));
                }
            }
            spec.validate()?;
            tasks.push(SweepTask { index: tasks.len(), label: value.to_string(), spec, cfg, seed: *seed });
        }
    }
    if oracle {
        if param != "p" {
            return Err(BudaError::Contract("--oracle is only meaningful for --param p".into()));
        }
        for seed in &seeds {
            let mut spec = base_spec.clone();
            spec.seed = *seed;
            let mut cfg = base_cfg.clone();
            cfg.use_oracle_labels = true;
            tasks.push(SweepTask { index: tasks.len(), label: "gt".into(), spec, cfg, seed: *seed });
        }
    }

    // Dispatch to a worker pool; results keep task order.
    let queue: Mutex<VecDeque<SweepTask>> = Mutex::new(tasks.iter().cloned().collect());
    let results: Mutex<Vec<(usize, Result<MetricsReport>)>> = Mutex::new(Vec::new());
    let workers = sweep_workers().min(tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = match queue.lock().expect("queue lock").pop_front() {
                    Some(t) => t,
                    None => break,
                };
                let report = run_sweep_task(&task, mode);
                results.lock().expect("results lock").push((task.index, report));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);

    let mut per_run = format!("param,value,seed,{}\n", MetricsReport::csv_header());
    let mut reports: Vec<(String, u64, MetricsReport)> = Vec::new();
    for ((idx, res), task) in results.into_iter().zip(&tasks) {
        debug_assert_eq!(idx, task.index);
        let report = res?;
        per_run.push_str(&format!("{param},{},{},{}\n", task.label, task.seed, report.csv_row()));
        reports.push((task.label.clone(), task.seed, report));
    }

    // Seed means per value label, in first-appearance order.
    let mut labels: Vec<String> = Vec::new();
    for (label, _, _) in &reports {
        if !labels.contains(label) {
            labels.push(label.clone());
        }
    }
    let mut mean_csv = format!("param,value,n_seeds,{}\n", MetricsReport::csv_header());
    for label in &labels {
        let group: Vec<&MetricsReport> =
            reports.iter().filter(|(l, _, _)| l == label).map(|(_, _, r)| r).collect();
        let mut mean = [0.0f64; 9];
        for r in &group {
            for (m, v) in mean.iter_mut().zip(r.csv_values()) {
                *m += v;
            }
        }
        let row: Vec<String> =
            mean.iter().map(|m| format!("{:.1}", m / group.len() as f64)).collect();
        mean_csv.push_str(&format!("{param},{label},{},{}\n", group.len(), row.join(",")));
    }

    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("sweep_runs.csv"), per_run.as_bytes())?;
    write_atomic(&out.join("sweep_mean.csv"), mean_csv.as_bytes())?;
    println!("sweep over {param} complete: {} runs -> {}", tasks.len(), out.display());
    Ok(())
}

fn run_sweep_task(task: &SweepTask, mode: Mode) -> Result<MetricsReport> {
    let ds = generate_scenario(&task.spec)?;
    let oracle = if task.cfg.use_oracle_labels { ds.oracle.clone() } else { None };
    let out = pipeline::run_experiment(&ds, &task.cfg, mode, task.seed, oracle.as_deref())?;
    Ok(out.report)
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(data: &Path, model: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let seg = load_segmenter(model)?;
    let report = pipeline::evaluate(&seg, &ds)?;
    std::fs::create_dir_all(out)?;
    write_report(out, &report)?;
    println!(
        "eval {}: hPA {:.1} hMA {:.1} hIoU {:.1} -> {}",
        model.display(),
        report.h_pa,
        report.h_ma,
        report.h_iou,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

const GRADCHECK_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

/// One named gradient check: max over all parameter tensors of the relative
/// error between taped gradients and central finite differences.
pub struct GradCheck {
    pub component: String,
    pub max_rel_err: f64,
}

fn segmenter_from(ps: &[Tensor]) -> Segmenter {
    use crate::models::Linear;
    Segmenter {
        l1: Linear { w: ps[0].clone().with_grad(), b: ps[1].clone().with_grad() },
        l2: Linear { w: ps[2].clone().with_grad(), b: ps[3].clone().with_grad() },
        cls: Linear { w: ps[4].clone().with_grad(), b: ps[5].clone().with_grad() },
    }
}

fn generator_from(ps: &[Tensor]) -> Generator {
    use crate::models::Linear;
    Generator {
        l1: Linear { w: ps[0].clone().with_grad(), b: ps[1].clone().with_grad() },
        l2: Linear { w: ps[2].clone().with_grad(), b: ps[3].clone().with_grad() },
    }
}

fn discriminator_from(ps: &[Tensor]) -> Discriminator {
    use crate::models::Linear;
    Discriminator { l: Linear { w: ps[0].clone().with_grad(), b: ps[1].clone().with_grad() } }
}

/// Generic check: `eval` maps a parameter vector to (loss, gradient per
/// tensor); finite differences perturb one tensor at a time through the same
/// closure, so taped and numeric derivatives see identical computations.
fn check_component(
    name: &str,
    params: &[Tensor],
    eval: &dyn Fn(&[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>,
) -> Result<GradCheck> {
    let (_, autos) = eval(params)?;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut f = |probe: &Tensor| -> Result<f64> {
            let mut ps = params.to_vec();
            ps[i] = probe.clone();
            Ok(eval(&ps)?.0)
        };
        let fd = finite_diff_gradient(&mut f, &params[i], FD_STEP)?;
        worst = worst.max(max_rel_err(&autos[i], &fd.values));
    }
    Ok(GradCheck { component: name.into(), max_rel_err: worst })
}

fn params_of<T>(named: Vec<(String, &Tensor)>, _m: &T) -> Vec<Tensor> {
    named.into_iter().map(|(_, t)| t.clone()).collect()
}

/// Runs the loss-by-network gradient suite at its canonical configuration.
pub fn gradcheck_suite() -> Result<Vec<GradCheck>> {
    gradcheck_suite_seeded(0)
}

/// The same five loss-by-network checks with every dimension, weight, input,
/// mask, and dropout stream drawn from `seed`, so repeated calls exercise
/// fresh shapes and data.
pub fn gradcheck_suite_seeded(seed: u64) -> Result<Vec<GradCheck>> {
    let master = Rng::new(seed ^ 0x67d2_c0de);
    let mut checks = Vec::new();

    // Segmenter through softmax and cross-entropy.
    {
        let mut r = master.derive("seg_ce");
        let (d_in, d_hidden, d_f, classes) = (2 + r.below(4), 3 + r.below(5), 3 + r.below(4), 2 + r.below(4));
        let pixels = 3 + r.below(5);
        let seg = Segmenter::new(d_in, d_hidden, d_f, classes, &mut r);
        let x = Tensor::from_vec(vec![pixels, d_in], r.gaussian_vec(pixels * d_in))?;
        let mut labels = vec![0.0; pixels * classes];
        for (p, row) in labels.chunks_mut(classes).enumerate() {
            let c = if p == 0 { p % classes } else { r.below(classes) };
            row[c] = 1.0;
        }
        let onehot = Tensor::from_vec(vec![pixels, classes], labels)?;
        let params = params_of(seg.named_params(), &seg);
        let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
            let seg = segmenter_from(ps);
            let mut tape = Tape::new();
            let nodes = seg.leaves(&mut tape);
            let xn = tape.constant(x.clone());
            let out = Segmenter::forward(&mut tape, nodes, xn)?;
            let p = tape.softmax_rows(out.logits)?;
            let l = crate::losses::seg_cross_entropy(&mut tape, p, &onehot)?;
            tape.backward(l)?;
            let grads = seg.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            Ok((tape.values(l)[0], grads))
        };
        checks.push(check_component("segmenter+cross_entropy", &params, &eval)?);
    }

    // Segmenter through the masked entropy objective.
    {
        let mut r = master.derive("seg_ent");
        let (d_in, d_hidden, d_f, classes) = (2 + r.below(4), 3 + r.below(5), 3 + r.below(4), 2 + r.below(4));
        let (h, w) = (1 + r.below(3), 2 + r.below(3));
        let n = h * w;
        let seg = Segmenter::new(d_in, d_hidden, d_f, classes, &mut r);
        let x = Tensor::from_vec(vec![n, d_in], r.gaussian_vec(n * d_in))?;
        let mut selected = vec![false; n];
        let n_sel = 1 + r.below(n);
        for idx in r.sample_distinct(n, n_sel) {
            selected[idx] = true;
        }
        let mask = crate::losses::ConfidenceMask {
            h,
            w,
            selected,
            source_confidences: vec![0.9; n],
        };
        let params = params_of(seg.named_params(), &seg);
        let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
            let seg = segmenter_from(ps);
            let mut tape = Tape::new();
            let nodes = seg.leaves(&mut tape);
            let xn = tape.constant(x.clone());
            let out = Segmenter::forward(&mut tape, nodes, xn)?;
            let p = tape.softmax_rows(out.logits)?;
            let l = crate::losses::entropy_loss(&mut tape, p, Some(&mask))?;
            tape.backward(l)?;
            let grads = seg.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            Ok((tape.values(l)[0], grads))
        };
        checks.push(check_component("segmenter+masked_entropy", &params, &eval)?);
    }

    // Generator (fixed dropout mask via a reseeded stream) through MMD.
    {
        let mut r = master.derive("gen_mmd");
        let (d_a, d_z, d_f) = (2 + r.below(3), 2 + r.below(3), 3 + r.below(4));
        let (n_gen, n_real) = (3 + r.below(3), 3 + r.below(4));
        let gen = Generator::new(d_a, d_z, d_f, &mut r);
        let input = {
            let mut vals = Vec::new();
            for _ in 0..n_gen {
                let a = r.gaussian_vec(d_a);
                let z = r.gaussian_vec(d_z);
                let d = if r.below(2) == 0 { 0.0 } else { 1.0 };
                vals.extend(Generator::pack_input(&a, &z, d));
            }
            Tensor::from_vec(vec![n_gen, d_a + d_z + 1], vals)?
        };
        let real = Tensor::from_vec(vec![n_real, d_f], r.gaussian_vec(n_real * d_f))?;
        let bw = crate::losses::KernelBandwidths::default_family();
        let drop_seed = r.next_u64();
        let params = params_of(gen.named_params(), &gen);
        let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
            let gen = generator_from(ps);
            let mut tape = Tape::new();
            let nodes = gen.leaves(&mut tape);
            let xn = tape.constant(input.clone());
            let mut drop_rng = Rng::new(drop_seed);
            let f = Generator::forward(&mut tape, nodes, xn, true, &mut drop_rng)?;
            let l = crate::losses::gmmn_mmd(&mut tape, &real, f, &bw)?;
            tape.backward(l)?;
            let grads = gen.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            Ok((tape.values(l)[0], grads))
        };
        checks.push(check_component("generator+gmmn_mmd", &params, &eval)?);
    }

    // Generator through a frozen discriminator and the adversarial BCE.
    {
        let mut r = master.derive("gen_adv");
        let (d_a, d_z, d_f) = (2 + r.below(3), 2 + r.below(3), 3 + r.below(4));
        let n_gen = 3 + r.below(3);
        let gen = Generator::new(d_a, d_z, d_f, &mut r);
        let disc = Discriminator::new(d_f, &mut r);
        let input = {
            let mut vals = Vec::new();
            for _ in 0..n_gen {
                let a = r.gaussian_vec(d_a);
                let z = r.gaussian_vec(d_z);
                vals.extend(Generator::pack_input(&a, &z, 0.0));
            }
            Tensor::from_vec(vec![n_gen, d_a + d_z + 1], vals)?
        };
        let drop_seed = r.next_u64();
        let params = params_of(gen.named_params(), &gen);
        let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
            let gen = generator_from(ps);
            let mut tape = Tape::new();
            let nodes = gen.leaves(&mut tape);
            let xn = tape.constant(input.clone());
            let mut drop_rng = Rng::new(drop_seed);
            let f = Generator::forward(&mut tape, nodes, xn, true, &mut drop_rng)?;
            let wd = tape.constant(disc.l.w.clone());
            let bd = tape.constant(disc.l.b.clone());
            let logit = tape.matmul(f, wd)?;
            let logit = tape.add_row_vec(logit, bd)?;
            let p = tape.sigmoid(logit)?;
            let l = crate::losses::adversarial_loss(&mut tape, p)?;
            tape.backward(l)?;
            let grads = gen.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            Ok((tape.values(l)[0], grads))
        };
        checks.push(check_component("generator+adversarial", &params, &eval)?);
    }

    // Discriminator through its own two-sided BCE.
    {
        let mut r = master.derive("disc_bce");
        let d_f = 3 + r.below(4);
        let (n_s, n_t) = (2 + r.below(4), 2 + r.below(4));
        let disc = Discriminator::new(d_f, &mut r);
        let fs = Tensor::from_vec(vec![n_s, d_f], r.gaussian_vec(n_s * d_f))?;
        let ft = Tensor::from_vec(vec![n_t, d_f], r.gaussian_vec(n_t * d_f))?;
        let params = params_of(disc.named_params(), &disc);
        let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
            let disc = discriminator_from(ps);
            let mut tape = Tape::new();
            let nodes = disc.leaves(&mut tape);
            let s = tape.constant(fs.clone());
            let t = tape.constant(ft.clone());
            let p_s = Discriminator::forward(&mut tape, nodes, s)?;
            let p_t = Discriminator::forward(&mut tape, nodes, t)?;
            let l = crate::losses::discriminator_loss(&mut tape, p_s, p_t)?;
            tape.backward(l)?;
            let grads = disc.grads(&tape, nodes).iter().map(|g| g.to_vec()).collect();
            Ok((tape.values(l)[0], grads))
        };
        checks.push(check_component("discriminator+bce", &params, &eval)?);
    }

    Ok(checks)
}

pub fn cmd_gradcheck() -> Result<()> {
    let checks = gradcheck_suite()?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_rel_err <= GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{:<28} max_rel_err {:.3e}  {}",
            c.component,
            c.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        println!("all gradient checks within {GRADCHECK_TOL:e}");
        Ok(())
    } else {
        Err(BudaError::Numeric("gradient check exceeded tolerance".into()))
    }
}
