//! Training objectives: segmentation cross-entropy, normalized entropy with
//! optional confidence masking, Gaussian-kernel maximum mean discrepancy, and
//! the BCE-based discriminator/adversarial pair.
//!
//! Sum-versus-mean conventions are deliberate and load-bearing: the
//! segmentation cross-entropy and the entropy objective are sums over pixels,
//! the MMD is an unnormalized self-inclusive V-statistic, and the BCE losses
//! are batch means. Gradient routing (MMD and the adversarial loss update the
//! generator only, the discriminator loss updates the discriminator only) is
//! done by pushing the frozen side onto the tape as constants.

use crate::tensor::{NodeId, Tape, Tensor};
use crate::{BudaError, Result};

/// Gaussian kernel bandwidths for the MMD.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBandwidths {
    pub sigmas: Vec<f64>,
}

impl KernelBandwidths {
    /// The stock bandwidth family {2, 5, 10, 20, 40, 60}.
    pub fn default_family() -> Self {
        KernelBandwidths { sigmas: vec![2.0, 5.0, 10.0, 20.0, 40.0, 60.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() {
            return Err(BudaError::Contract("bandwidths: empty set".into()));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(BudaError::Contract("bandwidths: all sigmas must be > 0".into()));
        }
        Ok(())
    }

    /// Rescales the stock family so its median bandwidth (15) equals the
    /// median pairwise distance of `real` (count x dim, at least 2 rows).
    /// Keeps the kernels non-degenerate when the feature dimension is far
    /// from the scale the stock family assumes.
    pub fn scaled_to_population(real: &Tensor) -> Result<Self> {
        let (n, d) = real.dims2()?;
        if n < 2 {
            return Err(BudaError::Contract(
                "auto bandwidth needs at least 2 real features".into(),
            ));
        }
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let mut s = 0.0;
                for c in 0..d {
                    let diff = real.values[i * d + c] - real.values[j * d + c];
                    s += diff * diff;
                }
                dists.push(s.sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let median = dists[dists.len() / 2];
        if median <= 0.0 {
            return Err(BudaError::Contract(
                "auto bandwidth: degenerate population (zero median distance)".into(),
            ));
        }
        let base = Self::default_family();
        let default_median = 15.0; // median of {2, 5, 10, 20, 40, 60}
        let factor = median / default_median;
        Ok(KernelBandwidths { sigmas: base.sigmas.iter().map(|s| s * factor).collect() })
    }
}

/// Frozen per-pixel confidence selection for masked entropy minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMask {
    pub h: usize,
    pub w: usize,
    /// Row-major pixel selection flags.
    pub selected: Vec<bool>,
    /// The max class probability each flag was ranked by.
    pub source_confidences: Vec<f64>,
}

impl ConfidenceMask {
    pub fn n_selected(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    pub fn validate(&self, expected_selected: usize) -> Result<()> {
        if self.selected.len() != self.h * self.w || self.source_confidences.len() != self.h * self.w {
            return Err(BudaError::Shape(format!(
                "confidence mask: {}x{} grid with {} flags / {} confidences",
                self.h,
                self.w,
                self.selected.len(),
                self.source_confidences.len()
            )));
        }
        if self.n_selected() != expected_selected {
            return Err(BudaError::Contract(format!(
                "confidence mask selects {} pixels, cardinality rule wants {expected_selected}",
                self.n_selected()
            )));
        }
        Ok(())
    }
}

/// Segmentation cross-entropy, summed over pixels: -sum y log P with P
/// clamped at 1e-12 before the log (clamps are counted on the tape).
/// `probs` is (n x C) on the tape; `onehot` is a fixed (n x C) target.
pub fn seg_cross_entropy(tape: &mut Tape, probs: NodeId, onehot: &Tensor) -> Result<NodeId> {
    let pshape = tape.shape(probs).to_vec();
    if pshape != onehot.shape {
        return Err(BudaError::Shape(format!(
            "cross-entropy: probs {:?} vs targets {:?}",
            pshape, onehot.shape
        )));
    }
    let logp = tape.ln_clamped(probs)?;
    let yn = tape.constant(onehot.clone());
    let picked = tape.mul(yn, logp)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// Normalized entropy objective: (-1/ln C) * sum over (selected) pixels of
/// sum_c P log P. Every pixel contributes a value in [0, 1]; an unmasked
/// call sums all pixels.
pub fn entropy_loss(
    tape: &mut Tape,
    probs: NodeId,
    mask: Option<&ConfidenceMask>,
) -> Result<NodeId> {
    let (n, c) = match tape.shape(probs) {
        [n, c] => (*n, *c),
        s => return Err(BudaError::Shape(format!("entropy: probs must be 2-D, got {s:?}"))),
    };
    if c < 2 {
        return Err(BudaError::Contract(format!(
            "entropy: normalizer ln({c}) is degenerate; need at least 2 classes"
        )));
    }
    let logp = tape.ln_clamped(probs)?;
    let plogp = tape.mul(probs, logp)?;
    let summed = match mask {
        Some(m) => {
            if m.h * m.w != n {
                return Err(BudaError::Shape(format!(
                    "entropy: mask {}x{} against {n} pixel rows",
                    m.h, m.w
                )));
            }
            let mut flat = vec![0.0; n * c];
            for (pix, sel) in m.selected.iter().enumerate() {
                if *sel {
                    flat[pix * c..(pix + 1) * c].fill(1.0);
                }
            }
            let mn = tape.constant(Tensor::from_vec(vec![n, c], flat)?);
            let masked = tape.mul(plogp, mn)?;
            tape.sum(masked)?
        }
        None => tape.sum(plogp)?,
    };
    tape.scale(summed, -1.0 / (c as f64).ln())
}

/// Gaussian-kernel MMD between a fixed real population and a generated node,
/// both (count x d_f). See [`Tape::mmd_gaussian`] for the exact statistic.
pub fn gmmn_mmd(tape: &mut Tape, real: &Tensor, gen: NodeId, bw: &KernelBandwidths) -> Result<NodeId> {
    bw.validate()?;
    tape.mmd_gaussian(real, gen, &bw.sigmas)
}

/// Scalar binary cross-entropy with clamping into [1e-12, 1 - 1e-12].
pub fn binary_cross_entropy(p: f64, label: f64) -> f64 {
    let pc = p.clamp(crate::tensor::LOG_CLAMP, 1.0 - crate::tensor::LOG_CLAMP);
    -label * pc.ln() - (1.0 - label) * (1.0 - pc).ln()
}

/// Discriminator objective: mean BCE(source probs, 1) + mean BCE(target
/// probs, 0). Callers keep the gradient out of the feature generator by
/// passing generated features to the discriminator as tape constants.
pub fn discriminator_loss(tape: &mut Tape, src_probs: NodeId, tgt_probs: NodeId) -> Result<NodeId> {
    let ls = tape.bce_mean(src_probs, 1.0)?;
    let lt = tape.bce_mean(tgt_probs, 0.0)?;
    tape.add(ls, lt)
}

/// Adversarial objective for the generator: mean BCE(target probs, 1).
/// Callers freeze the discriminator by pushing its parameters as constants.
pub fn adversarial_loss(tape: &mut Tape, tgt_probs: NodeId) -> Result<NodeId> {
    tape.bce_mean(tgt_probs, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Discriminator, Segmenter};
    use crate::optim::SgdPoly;
    use crate::rng::Rng;
    use crate::tensor::{finite_diff_gradient, max_rel_err};

    fn probs_node(tape: &mut Tape, rows: usize, cols: usize, vals: &[f64]) -> NodeId {
        tape.constant(Tensor::from_vec(vec![rows, cols], vals.to_vec()).unwrap())
    }

    #[test]
    fn cross_entropy_of_exact_prediction_is_zero() {
        let mut tape = Tape::new();
        let y = Tensor::from_vec(vec![2, 3], vec![1., 0., 0., 0., 0., 1.]).unwrap();
        let p = probs_node(&mut tape, 2, 3, &y.values);
        let l = seg_cross_entropy(&mut tape, p, &y).unwrap();
        assert!(tape.values(l)[0].abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_single_pixel() {
        let mut tape = Tape::new();
        let p = probs_node(&mut tape, 1, 4, &[0.25; 4]);
        let y = Tensor::from_vec(vec![1, 4], vec![0., 1., 0., 0.]).unwrap();
        let l = seg_cross_entropy(&mut tape, p, &y).unwrap();
        assert!((tape.values(l)[0] - 4.0f64.ln()).abs() < 1e-12);
        assert!((tape.values(l)[0] - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_two_pixel_example() {
        let mut tape = Tape::new();
        let p = probs_node(&mut tape, 2, 2, &[0.7, 0.3, 0.2, 0.8]);
        let y = Tensor::from_vec(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let l = seg_cross_entropy(&mut tape, p, &y).unwrap();
        let expect = -(0.7f64.ln() + 0.8f64.ln());
        assert!((tape.values(l)[0] - expect).abs() < 1e-12);
        assert!((tape.values(l)[0] - 0.5798).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability_and_counts_it() {
        let mut tape = Tape::new();
        let p = probs_node(&mut tape, 1, 2, &[0.0, 1.0]);
        let y = Tensor::from_vec(vec![1, 2], vec![1., 0.]).unwrap();
        let l = seg_cross_entropy(&mut tape, p, &y).unwrap();
        assert!((tape.values(l)[0] - -(1e-12f64.ln())).abs() < 1e-9);
        assert!(tape.clamp_warnings() >= 1);
    }

    #[test]
    fn entropy_uniform_grid_is_pixel_count() {
        for c in [2usize, 4, 7] {
            let mut tape = Tape::new();
            let vals = vec![1.0 / c as f64; 4 * c];
            let p = probs_node(&mut tape, 4, c, &vals);
            let l = entropy_loss(&mut tape, p, None).unwrap();
            assert!(
                (tape.values(l)[0] - 4.0).abs() < 1e-12,
                "uniform rows each contribute exactly 1, got {} at C={c}",
                tape.values(l)[0]
            );
        }
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let mut tape = Tape::new();
        let p = probs_node(&mut tape, 2, 3, &[1., 0., 0., 0., 1., 0.]);
        let l = entropy_loss(&mut tape, p, None).unwrap();
        assert!(tape.values(l)[0].abs() < 1e-10);
    }

    #[test]
    fn entropy_half_split_pixel() {
        let mut tape = Tape::new();
        let p = probs_node(&mut tape, 1, 4, &[0.5, 0.5, 0.0, 0.0]);
        let l = entropy_loss(&mut tape, p, None).unwrap();
        assert!((tape.values(l)[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn entropy_rejects_single_class() {
        let mut tape = Tape::new();
        let p = probs_node(&mut tape, 1, 1, &[1.0]);
        match entropy_loss(&mut tape, p, None) {
            Err(BudaError::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn masked_entropy_never_exceeds_unmasked_and_stays_in_bounds() {
        let mut rng = Rng::new(40);
        for _ in 0..30 {
            let (h, w, c) = (2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(4));
            let n = h * w;
            // Random rows normalized into a simplex.
            let mut vals = Vec::with_capacity(n * c);
            for _ in 0..n {
                let mut row: Vec<f64> = (0..c).map(|_| rng.next_f64() + 1e-3).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                vals.extend(row);
            }
            let k = 1 + rng.below(n);
            let mut selected = vec![false; n];
            for idx in rng.sample_distinct(n, k) {
                selected[idx] = true;
            }
            let mask = ConfidenceMask {
                h,
                w,
                selected,
                source_confidences: vec![0.0; n],
            };

            let mut tape = Tape::new();
            let p = probs_node(&mut tape, n, c, &vals);
            let full = entropy_loss(&mut tape, p, None).unwrap();
            let masked = entropy_loss(&mut tape, p, Some(&mask)).unwrap();
            let (fv, mv) = (tape.values(full)[0], tape.values(masked)[0]);
            assert!((-1e-12..=n as f64 + 1e-12).contains(&fv), "unmasked {fv} out of [0, {n}]");
            assert!(mv <= fv + 1e-12, "masked {mv} > unmasked {fv}");
            assert!(mv >= -1e-12);
        }
    }

    #[test]
    fn mmd_identical_populations_is_zero() {
        let mut rng = Rng::new(50);
        let pop = Tensor::from_vec(vec![10, 4], rng.gaussian_vec(40)).unwrap();
        let mut tape = Tape::new();
        let gen = tape.constant(pop.clone());
        let bw = KernelBandwidths::default_family();
        let l = gmmn_mmd(&mut tape, &pop, gen, &bw).unwrap();
        assert!(tape.values(l)[0].abs() <= 1e-12);
    }

    #[test]
    fn mmd_scalar_example() {
        let real = Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let gen = tape.constant(Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap());
        let bw = KernelBandwidths { sigmas: vec![1.0] };
        let l = gmmn_mmd(&mut tape, &real, gen, &bw).unwrap();
        let expect = 2.0 * (1.0 - (-2.0f64).exp());
        assert!((tape.values(l)[0] - expect).abs() < 1e-12);
        assert!((tape.values(l)[0] - 1.7293).abs() < 1e-4);
    }

    #[test]
    fn mmd_empty_population_is_contract_error() {
        let real = Tensor::zeros(vec![0, 4]);
        let mut tape = Tape::new();
        let gen = tape.constant(Tensor::zeros(vec![3, 4]));
        match gmmn_mmd(&mut tape, &real, gen, &KernelBandwidths::default_family()) {
            Err(BudaError::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn mmd_symmetric_under_population_swap() {
        let mut rng = Rng::new(51);
        let a = Tensor::from_vec(vec![6, 3], rng.gaussian_vec(18)).unwrap();
        let b = Tensor::from_vec(vec![9, 3], rng.gaussian_vec(27)).unwrap();
        let bw = KernelBandwidths::default_family();
        let mut t1 = Tape::new();
        let g1 = t1.constant(b.clone());
        let l1 = gmmn_mmd(&mut t1, &a, g1, &bw).unwrap();
        let mut t2 = Tape::new();
        let g2 = t2.constant(a.clone());
        let l2 = gmmn_mmd(&mut t2, &b, g2, &bw).unwrap();
        assert!((t1.values(l1)[0] - t2.values(l2)[0]).abs() < 1e-10);
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = Rng::new(52);
        let real = Tensor::from_vec(vec![5, 3], rng.gaussian_vec(15)).unwrap();
        let gen0 = Tensor::from_vec(vec![4, 3], rng.gaussian_vec(12)).unwrap().with_grad();
        let bw = KernelBandwidths { sigmas: vec![1.0, 3.0] };

        let mut tape = Tape::new();
        let gn = tape.leaf(&gen0);
        let l = gmmn_mmd(&mut tape, &real, gn, &bw).unwrap();
        tape.backward(l).unwrap();
        let auto = tape.grad(gn).unwrap().to_vec();

        let mut f = |t: &Tensor| {
            let mut tp = Tape::new();
            let g = tp.constant(t.clone());
            let l = gmmn_mmd(&mut tp, &real, g, &bw)?;
            Ok(tp.values(l)[0])
        };
        let fd = finite_diff_gradient(&mut f, &gen0, 1e-6).unwrap();
        let err = max_rel_err(&auto, &fd.values);
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn bce_scalar_examples() {
        assert!((binary_cross_entropy(0.5, 1.0) - 2.0f64.ln()).abs() < 1e-12);
        assert!((binary_cross_entropy(0.5, 0.0) - 2.0f64.ln()).abs() < 1e-12);
        assert!((binary_cross_entropy(0.9, 0.0) - -(0.1f64.ln())).abs() < 1e-10);
        assert!((binary_cross_entropy(0.9, 0.0) - 2.3026).abs() < 1e-4);
        assert!(binary_cross_entropy(1.0 - 1e-15, 1.0) < 1e-10);
        // Out-of-range input is clamped, not rejected.
        assert!(binary_cross_entropy(1.5, 1.0).is_finite());
    }

    #[test]
    fn discriminator_loss_examples() {
        let mut tape = Tape::new();
        let half_s = probs_node(&mut tape, 3, 1, &[0.5; 3]);
        let half_t = probs_node(&mut tape, 3, 1, &[0.5; 3]);
        let l = discriminator_loss(&mut tape, half_s, half_t).unwrap();
        assert!((tape.values(l)[0] - 2.0 * 2.0f64.ln()).abs() < 1e-12);

        let s = probs_node(&mut tape, 1, 1, &[0.8]);
        let t = probs_node(&mut tape, 1, 1, &[0.3]);
        let l = discriminator_loss(&mut tape, s, t).unwrap();
        let expect = -(0.8f64.ln()) - 0.7f64.ln();
        assert!((tape.values(l)[0] - expect).abs() < 1e-12);
        assert!((tape.values(l)[0] - 0.5798).abs() < 1e-4);
    }

    #[test]
    fn adversarial_loss_examples() {
        let mut tape = Tape::new();
        let half = probs_node(&mut tape, 4, 1, &[0.5; 4]);
        let l = adversarial_loss(&mut tape, half).unwrap();
        assert!((tape.values(l)[0] - 2.0f64.ln()).abs() < 1e-12);

        let q = probs_node(&mut tape, 1, 1, &[0.25]);
        let l = adversarial_loss(&mut tape, q).unwrap();
        assert!((tape.values(l)[0] - -(0.25f64.ln())).abs() < 1e-12);
        assert!((tape.values(l)[0] - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let mut rng = Rng::new(60);
        let disc = Discriminator::new(4, &mut rng);
        let fs = Tensor::from_vec(vec![3, 4], rng.gaussian_vec(12)).unwrap();
        let ft = Tensor::from_vec(vec![5, 4], rng.gaussian_vec(20)).unwrap();

        let loss_for = |d: &Discriminator| -> f64 {
            let mut tape = Tape::new();
            let nodes = d.leaves(&mut tape);
            let fsn = tape.constant(fs.clone());
            let ftn = tape.constant(ft.clone());
            let ps = Discriminator::forward(&mut tape, nodes, fsn).unwrap();
            let pt = Discriminator::forward(&mut tape, nodes, ftn).unwrap();
            let l = discriminator_loss(&mut tape, ps, pt).unwrap();
            tape.values(l)[0]
        };

        let mut tape = Tape::new();
        let nodes = disc.leaves(&mut tape);
        let fsn = tape.constant(fs.clone());
        let ftn = tape.constant(ft.clone());
        let ps = Discriminator::forward(&mut tape, nodes, fsn).unwrap();
        let pt = Discriminator::forward(&mut tape, nodes, ftn).unwrap();
        let l = discriminator_loss(&mut tape, ps, pt).unwrap();
        tape.backward(l).unwrap();
        let auto = tape.grad(nodes.l.0).unwrap().to_vec();

        let mut f = |t: &Tensor| {
            let mut probe = disc.clone();
            probe.l.w = t.clone().with_grad();
            Ok(loss_for(&probe))
        };
        let fd = finite_diff_gradient(&mut f, &disc.l.w, 1e-6).unwrap();
        let err = max_rel_err(&auto, &fd.values);
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn entropy_gradient_through_softmax_matches_finite_differences() {
        let mut rng = Rng::new(61);
        let logits0 = Tensor::from_vec(vec![4, 3], rng.gaussian_vec(12)).unwrap().with_grad();
        let mask = ConfidenceMask {
            h: 2,
            w: 2,
            selected: vec![true, false, true, true],
            source_confidences: vec![0.9, 0.2, 0.8, 0.7],
        };

        let run = |logits: &Tensor, tape: &mut Tape| -> (NodeId, NodeId) {
            let ln = tape.leaf(logits);
            let p = tape.softmax_rows(ln).unwrap();
            let l = entropy_loss(tape, p, Some(&mask)).unwrap();
            (ln, l)
        };

        let mut tape = Tape::new();
        let (ln, l) = run(&logits0, &mut tape);
        tape.backward(l).unwrap();
        let auto = tape.grad(ln).unwrap().to_vec();

        let mut f = |t: &Tensor| {
            let mut tp = Tape::new();
            let (_, l) = run(&t.clone().with_grad(), &mut tp);
            Ok(tp.values(l)[0])
        };
        let fd = finite_diff_gradient(&mut f, &logits0, 1e-6).unwrap();
        let err = max_rel_err(&auto, &fd.values);
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn cross_entropy_descends_under_sgd() {
        let mut rng = Rng::new(62);
        let mut seg = Segmenter::new(4, 6, 5, 3, &mut rng);
        let x = Rng::new(63).gaussian_vec(2 * 4);
        let y = Tensor::from_vec(vec![2, 3], vec![1., 0., 0., 0., 1., 0.]).unwrap();
        let mut opt = SgdPoly::new(1e-2, 0.9, 0.0, 0.0, 100);
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let mut tape = Tape::new();
            let nodes = seg.leaves(&mut tape);
            let xn = tape.constant(Tensor::from_vec(vec![2, 4], x.clone()).unwrap());
            let out = Segmenter::forward(&mut tape, nodes, xn).unwrap();
            let p = tape.softmax_rows(out.logits).unwrap();
            let l = seg_cross_entropy(&mut tape, p, &y).unwrap();
            let lv = tape.values(l)[0];
            assert!(lv < last, "loss must strictly decrease: {lv} !< {last}");
            last = lv;
            tape.backward(l).unwrap();
            let grads = seg.grads(&tape, nodes);
            let grads_owned: Vec<Vec<f64>> = grads.iter().map(|g| g.to_vec()).collect();
            let grad_refs: Vec<&[f64]> = grads_owned.iter().map(|g| g.as_slice()).collect();
            let mut params = seg.param_slices_mut();
            opt.step(&mut params, &grad_refs).unwrap();
        }
    }

    #[test]
    fn auto_bandwidth_centers_on_population_scale() {
        let mut rng = Rng::new(64);
        let pop = Tensor::from_vec(vec![20, 3], rng.gaussian_vec(60)).unwrap();
        let bw = KernelBandwidths::scaled_to_population(&pop).unwrap();
        assert_eq!(bw.sigmas.len(), 6);
        bw.validate().unwrap();
        // The middle of the scaled family tracks the population's median
        // pairwise distance; for a standard gaussian cloud in 3-D that is
        // around sqrt(2 * 3) ~ 2.4, far below the stock 15.
        assert!(bw.sigmas[2] < 10.0);
        let ratio = bw.sigmas[5] / bw.sigmas[0];
        assert!((ratio - 30.0).abs() < 1e-9, "family shape preserved, ratio {ratio}");
    }
}
