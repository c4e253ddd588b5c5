//! FedGCA loss terms.
//!
//! Per-batch losses over the augmented view set: cross-entropy, the
//! prediction-consistency term, the CAM-consistency term, their sum (the
//! globally guided consistency loss), the dynamic class-consistency
//! regularizer, and the total combination. Reductions are mean over
//! images, mean over views for the prediction terms, sum over views for
//! the CAM term, and sum over classes / spatial cells; this keeps the
//! alpha/beta weights stable across batch sizes.
//!
//! Each term exists twice on purpose: a plain evaluator over arrays
//! (the public operation) and a tape builder used inside training;
//! tests pin the two against each other.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Clamp bounds keeping the consistency logs finite in float32-scale
/// territory.
pub const PBAR_CLAMP: f64 = 1e-7;
pub const CE_FLOOR: f64 = 1e-12;

/// Which form the prediction-consistency term takes: the elementwise
/// binary cross-entropy as printed, or a KL divergence reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CpForm {
    #[default]
    Bce,
    Kl,
}

/// Softmax predictions of the local and global (snapshot) models over
/// the J+1 views; each entry is an (images x classes) matrix.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub local: Vec<Array2<f64>>,
    pub global: Vec<Array2<f64>>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        if self.local.len() != self.global.len() {
            return Err(Error::Shape(format!(
                "local has {} views, global has {}",
                self.local.len(),
                self.global.len()
            )));
        }
        for m in self.local.iter().chain(self.global.iter()) {
            if m.dim() != self.local[0].dim() {
                return Err(Error::Shape("prediction matrices differ in shape".into()));
            }
            for row in m.rows() {
                let s: f64 = row.sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "prediction row sums to {s}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-batch loss values; `gc == cp + cam` and
/// `total == ce + alpha*oc + beta*gc` by construction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cp: f64,
    pub cam: f64,
    pub gc: f64,
    pub oc: f64,
    pub total: f64,
}

/// Mean over rows of -log p[label], with probabilities floored.
pub fn loss_ce(predictions: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, c) = predictions.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {c})")));
        }
        total -= predictions[(i, l)].max(CE_FLOOR).ln();
    }
    Ok(total / n as f64)
}

/// Cross-entropy over all views against the shared labels.
pub fn loss_ce_views(views: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        total += loss_ce(v, labels)?;
    }
    Ok(total / views.len() as f64)
}

fn mean_prediction(local: &[Array2<f64>], global: Option<&[Array2<f64>]>) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros(local[0].dim());
    let mut count = 0usize;
    for m in local.iter().chain(global.into_iter().flatten()) {
        acc += m;
        count += 1;
    }
    acc / count as f64
}

/// Prediction-consistency term against the clamped mean of the local
/// and global view predictions; the BCE form accumulates
/// -[p log pbar + (1-p) log(1-pbar)] per class, the KL form p log(p/pbar).
/// Mean over images and local views, sum over classes.
pub fn loss_cp_with(
    local: &[Array2<f64>],
    global: Option<&[Array2<f64>]>,
    form: CpForm,
) -> Result<f64> {
    if local.is_empty() {
        return Err(Error::InvalidArgument("no local prediction views".into()));
    }
    if let Some(g) = global {
        if g.len() != local.len() {
            return Err(Error::Shape(format!(
                "local has {} views, global has {}",
                local.len(),
                g.len()
            )));
        }
    }
    let pbar = mean_prediction(local, global).mapv(|v| v.clamp(PBAR_CLAMP, 1.0 - PBAR_CLAMP));
    let (n, c) = pbar.dim();
    let mut total = 0.0;
    for view in local {
        for i in 0..n {
            for j in 0..c {
                let p = view[(i, j)];
                let pb = pbar[(i, j)];
                total -= match form {
                    CpForm::Bce => p * pb.ln() + (1.0 - p) * (1.0 - pb).ln(),
                    CpForm::Kl => -p * (p.max(CE_FLOOR).ln() - pb.ln()),
                };
            }
        }
    }
    Ok(total / (n * local.len()) as f64)
}

pub fn loss_cp(pred_set: &PredictionSet, form: CpForm) -> Result<f64> {
    pred_set.validate()?;
    loss_cp_with(&pred_set.local, Some(&pred_set.global), form)
}

/// CAM-consistency term: KL(M_view || mean of local+global maps),
/// summed over local views and averaged over images. Maps are the
/// floored normalized CAMs, one (h_f x w_f) matrix per image per view.
pub fn loss_cam_with(
    local: &[Vec<Array2<f64>>],
    global: Option<&[Vec<Array2<f64>>]>,
) -> Result<f64> {
    if local.is_empty() || local[0].is_empty() {
        return Err(Error::InvalidArgument("no local CAM views".into()));
    }
    let images = local[0].len();
    let shape = local[0][0].dim();
    for view in local.iter().chain(global.into_iter().flatten()) {
        if view.len() != images {
            return Err(Error::Shape("CAM views differ in image count".into()));
        }
        for m in view {
            if m.dim() != shape {
                return Err(Error::Shape(format!(
                    "CAM spatial shape {:?} != {:?}",
                    m.dim(),
                    shape
                )));
            }
        }
    }
    let view_total = local.len() + global.map_or(0, |g| g.len());
    let mut total = 0.0;
    for i in 0..images {
        let mut mbar = Array2::<f64>::zeros(shape);
        for view in local.iter().chain(global.into_iter().flatten()) {
            mbar += &view[i];
        }
        mbar /= view_total as f64;
        for view in local {
            let m = &view[i];
            let mut kl = 0.0;
            for (p, q) in m.iter().zip(mbar.iter()) {
                if *p > 0.0 {
                    kl += p * (p.ln() - q.ln());
                }
            }
            total += kl;
        }
    }
    Ok(total / images as f64)
}

pub fn loss_cam(local: &[Vec<Array2<f64>>], global: &[Vec<Array2<f64>>]) -> Result<f64> {
    loss_cam_with(local, Some(global))
}

/// Globally guided consistency: prediction term plus CAM term.
pub fn loss_gc(
    pred_set: &PredictionSet,
    local_cams: &[Vec<Array2<f64>>],
    global_cams: &[Vec<Array2<f64>>],
    form: CpForm,
) -> Result<f64> {
    Ok(loss_cp(pred_set, form)? + loss_cam(local_cams, global_cams)?)
}

/// Dynamic class-consistency regularizer:
/// -(1/alpha) <lambda_i, w_i> + 1/2 ||w_i - w_global||^2.
pub fn loss_oc(w_i: &[f64], w_global: &[f64], lambda_i: &[f64], alpha: f64) -> Result<f64> {
    if w_i.len() != w_global.len() || w_i.len() != lambda_i.len() {
        return Err(Error::Shape(format!(
            "dimension mismatch: w_i {}, w_global {}, lambda {}",
            w_i.len(),
            w_global.len(),
            lambda_i.len()
        )));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let inner: f64 = lambda_i.iter().zip(w_i).map(|(l, w)| l * w).sum();
    let sq: f64 = w_i.iter().zip(w_global).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-inner / alpha + 0.5 * sq)
}

/// Combines the parts into the total training loss
/// `ce + alpha * oc + beta * gc`, populating the breakdown.
pub fn loss_total(ce: f64, cp: f64, cam: f64, oc: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument(
            "alpha and beta must be non-negative".into(),
        ));
    }
    let gc = cp + cam;
    Ok(LossBreakdown {
        ce,
        cp,
        cam,
        gc,
        oc,
        total: ce + alpha * oc + beta * gc,
    })
}

// ---------------------------------------------------------------------
// Tape builders (the differentiated path used by client training).

fn const2(tape: &mut Tape, m: &Array2<f64>) -> Var {
    tape.constant(m.clone().into_dyn())
}

/// Mean over views and images of -log softmax(logits)[label].
pub fn ce_on_tape(tape: &mut Tape, logits_views: &[Var], labels: &[usize]) -> Var {
    let n = labels.len();
    let mut acc: Option<Var> = None;
    for &logits in logits_views {
        let logp = tape.log_softmax_rows(logits);
        let picked = tape.gather_rows(logp, labels);
        let s = tape.sum_all(picked);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one view");
    tape.scale(total, -1.0 / (n * logits_views.len()) as f64)
}

/// Prediction-consistency on the tape. `local` are softmax nodes
/// (gradients flow through them and through their share of the mean);
/// `global` entries enter as constants.
pub fn cp_on_tape(
    tape: &mut Tape,
    local: &[Var],
    global: Option<&[Array2<f64>]>,
    form: CpForm,
) -> Var {
    let dims = tape.value(local[0]).shape().to_vec();
    let (n, _c) = (dims[0], dims[1]);
    let view_total = local.len() + global.map_or(0, |g| g.len());

    let mut sum = local[0];
    for &v in &local[1..] {
        sum = tape.add(sum, v);
    }
    if let Some(g) = global {
        let mut gsum = ArrayD::zeros(IxDyn(&dims));
        for m in g {
            gsum += &m.clone().into_dyn();
        }
        let gconst = tape.constant(gsum);
        sum = tape.add(sum, gconst);
    }
    let pbar = tape.scale(sum, 1.0 / view_total as f64);
    let pbar = tape.clamp(pbar, PBAR_CLAMP, 1.0 - PBAR_CLAMP);
    let log_pbar = tape.ln(pbar);
    let one_minus = tape.scale_shift(pbar, -1.0, 1.0);
    let log_one_minus = tape.ln(one_minus);

    let mut acc: Option<Var> = None;
    for &p in local {
        let term = match form {
            CpForm::Bce => {
                let a = tape.mul(p, log_pbar);
                let q = tape.scale_shift(p, -1.0, 1.0);
                let b = tape.mul(q, log_one_minus);
                let s = tape.add(a, b);
                tape.scale(s, -1.0)
            }
            CpForm::Kl => {
                let pc = tape.clamp(p, CE_FLOOR, 1.0);
                let logp = tape.ln(pc);
                let diff = tape.sub(logp, log_pbar);
                tape.mul(p, diff)
            }
        };
        let s = tape.sum_all(term);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one local view");
    tape.scale(total, 1.0 / (n * local.len()) as f64)
}

/// CAM-consistency on the tape. Each entry is an (images x cells) node
/// of floored normalized CAMs; globals are constants.
pub fn cam_on_tape(tape: &mut Tape, local: &[Var], global: Option<&[Array2<f64>]>) -> Var {
    let dims = tape.value(local[0]).shape().to_vec();
    let n = dims[0];
    let view_total = local.len() + global.map_or(0, |g| g.len());

    let mut sum = local[0];
    for &v in &local[1..] {
        sum = tape.add(sum, v);
    }
    if let Some(g) = global {
        let mut gsum = ArrayD::zeros(IxDyn(&dims));
        for m in g {
            gsum += &m.clone().into_dyn();
        }
        let gconst = tape.constant(gsum);
        sum = tape.add(sum, gconst);
    }
    let mbar = tape.scale(sum, 1.0 / view_total as f64);
    let log_mbar = tape.ln(mbar);

    let mut acc: Option<Var> = None;
    for &m in local {
        let logm = tape.ln(m);
        let diff = tape.sub(logm, log_mbar);
        let prod = tape.mul(m, diff);
        let s = tape.sum_all(prod);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one local view");
    tape.scale(total, 1.0 / n as f64)
}

/// Dynamic regularizer on the tape; `w_global` and `lambda` are
/// constants, the gradient w.r.t. the parameter node is
/// -(1/alpha) lambda + (w - w_global).
pub fn oc_on_tape(tape: &mut Tape, params: Var, w_global: &[f64], lambda: &[f64], alpha: f64) -> Var {
    let lam = tape.constant(ndarray::Array1::from(lambda.to_vec()).into_dyn());
    let wg = tape.constant(ndarray::Array1::from(w_global.to_vec()).into_dyn());
    let inner = tape.dot(lam, params);
    let first = tape.scale(inner, -1.0 / alpha);
    let d = tape.sub(params, wg);
    let sq = tape.dot(d, d);
    let second = tape.scale(sq, 0.5);
    tape.add(first, second)
}

/// Helper for tests: evaluates a prediction matrix as a constant node.
pub fn prediction_const(tape: &mut Tape, m: &Array2<f64>) -> Var {
    const2(tape, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::Rng;

    fn rand_probs(n: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(&[seed]);
        let mut m = Array2::from_shape_fn((n, c), |_| rng.random_range(0.01..1.0));
        for mut row in m.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        m
    }

    fn rand_cam(h: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(&[seed]);
        let mut m = Array2::from_shape_fn((h, h), |_| rng.random_range(0.01..1.0));
        let s: f64 = m.iter().sum();
        m.mapv_inplace(|v| v / s);
        m
    }

    #[test]
    fn ce_perfect_prediction_is_zero() {
        let p = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = loss_ce(&p, &[0, 1]).unwrap();
        assert!(l < 1e-10);
    }

    #[test]
    fn ce_uniform_is_ln_c() {
        let p = Array2::from_elem((4, 10), 0.1);
        let l = loss_ce(&p, &[0, 3, 5, 9]).unwrap();
        assert_abs_diff_eq!(l, 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 2.302585, epsilon = 1e-6);
    }

    #[test]
    fn ce_matches_scalar_loop() {
        let p = rand_probs(6, 4, 3);
        let labels = [0, 1, 2, 3, 0, 2];
        let l = loss_ce(&p, &labels).unwrap();
        let mut expect = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            expect -= p[(i, lab)].ln();
        }
        assert_abs_diff_eq!(l, expect / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn ce_rejects_bad_label() {
        let p = rand_probs(2, 3, 1);
        assert!(loss_ce(&p, &[0, 3]).is_err());
    }

    #[test]
    fn cp_analytic_single_view() {
        // local == global == [0.6, 0.4]: pbar = [0.6, 0.4],
        // loss = 2 * (-0.6 ln 0.6 - 0.4 ln 0.4).
        let p = arr2(&[[0.6, 0.4]]);
        let set = PredictionSet {
            local: vec![p.clone()],
            global: vec![p.clone()],
        };
        let l = loss_cp(&set, CpForm::Bce).unwrap();
        let expect = 2.0 * (-0.6 * 0.6f64.ln() - 0.4 * 0.4f64.ln());
        assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 1.34602, epsilon = 1e-5);
    }

    #[test]
    fn cp_clamped_case_is_finite() {
        let p = arr2(&[[1.0, 0.0]]);
        let set = PredictionSet {
            local: vec![p.clone()],
            global: vec![p.clone()],
        };
        let l = loss_cp(&set, CpForm::Bce).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn cp_symmetric_half_is_two_ln_two() {
        let p = arr2(&[[0.5, 0.5]]);
        let set = PredictionSet {
            local: vec![p.clone(), p.clone()],
            global: vec![p.clone(), p.clone()],
        };
        let l = loss_cp(&set, CpForm::Bce).unwrap();
        assert_abs_diff_eq!(l, 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 1.386294, epsilon = 1e-6);
    }

    #[test]
    fn cp_matches_direct_oracle() {
        for seed in 0..20u64 {
            let local = vec![rand_probs(3, 4, seed * 10), rand_probs(3, 4, seed * 10 + 1)];
            let global = vec![rand_probs(3, 4, seed * 10 + 2), rand_probs(3, 4, seed * 10 + 3)];
            let set = PredictionSet {
                local: local.clone(),
                global: global.clone(),
            };
            let got = loss_cp(&set, CpForm::Bce).unwrap();
            // independent straight-line evaluation of the printed formula
            let mut expect = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    let pbar = (local[0][(i, j)]
                        + local[1][(i, j)]
                        + global[0][(i, j)]
                        + global[1][(i, j)])
                        / 4.0;
                    let pbar = pbar.clamp(1e-7, 1.0 - 1e-7);
                    for view in &local {
                        let p = view[(i, j)];
                        expect -= p * pbar.ln() + (1.0 - p) * (1.0 - pbar).ln();
                    }
                }
            }
            expect /= 3.0 * 2.0;
            assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn cp_nonnegative_on_random_inputs() {
        for seed in 0..1000u64 {
            let set = PredictionSet {
                local: vec![rand_probs(2, 3, seed * 2)],
                global: vec![rand_probs(2, 3, seed * 2 + 1)],
            };
            assert!(loss_cp(&set, CpForm::Bce).unwrap() >= 0.0);
        }
    }

    #[test]
    fn cp_rejects_view_count_mismatch() {
        let set = PredictionSet {
            local: vec![rand_probs(2, 3, 0), rand_probs(2, 3, 1)],
            global: vec![rand_probs(2, 3, 2)],
        };
        assert!(loss_cp(&set, CpForm::Bce).is_err());
    }

    #[test]
    fn cam_identical_maps_is_zero() {
        let m = rand_cam(3, 4);
        let local = vec![vec![m.clone()], vec![m.clone()]];
        let global = vec![vec![m.clone()], vec![m.clone()]];
        let l = loss_cam(&local, &global).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cam_single_view_equal_global_is_zero() {
        let m = rand_cam(3, 9);
        let l = loss_cam(&[vec![m.clone()]], &[vec![m.clone()]]).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cam_matches_scalar_kl_loop() {
        for seed in 0..20u64 {
            let cells = 9.0;
            let uniform = Array2::from_elem((3, 3), 1.0 / cells);
            let peaked = {
                let mut m = Array2::from_elem((3, 3), 1e-3 / cells);
                m[(1, 1)] = 1.0 - 1e-3 * 8.0 / cells - 1e-3 / cells + 1e-3 / cells;
                let s: f64 = m.iter().sum();
                m.mapv(|v| v / s)
            };
            let local = vec![vec![uniform.clone()], vec![rand_cam(3, seed)]];
            let global = vec![vec![peaked.clone()], vec![peaked.clone()]];
            let got = loss_cam(&local, &global).unwrap();
            assert!(got >= 0.0);
            let mut mbar = Array2::<f64>::zeros((3, 3));
            for v in local.iter().chain(global.iter()) {
                mbar += &v[0];
            }
            mbar /= 4.0;
            let mut expect = 0.0;
            for v in &local {
                for (p, q) in v[0].iter().zip(mbar.iter()) {
                    expect += p * (p.ln() - q.ln());
                }
            }
            assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn cam_nonnegative_on_random_inputs() {
        for seed in 0..1000u64 {
            let local = vec![vec![rand_cam(2, seed * 3)], vec![rand_cam(2, seed * 3 + 1)]];
            let global = vec![vec![rand_cam(2, seed * 3 + 2)]];
            let l = loss_cam_with(&local, Some(&global)).unwrap();
            assert!(l >= -1e-15, "seed {seed}: {l}");
        }
    }

    #[test]
    fn cam_rejects_shape_mismatch() {
        let local = vec![vec![rand_cam(3, 0)]];
        let global = vec![vec![rand_cam(2, 1)]];
        assert!(loss_cam(&local, &global).is_err());
    }

    #[test]
    fn gc_is_sum_of_parts() {
        let set = PredictionSet {
            local: vec![rand_probs(2, 3, 5)],
            global: vec![rand_probs(2, 3, 6)],
        };
        let local = vec![vec![rand_cam(3, 7), rand_cam(3, 8)]];
        let global = vec![vec![rand_cam(3, 9), rand_cam(3, 10)]];
        let gc = loss_gc(&set, &local, &global, CpForm::Bce).unwrap();
        let cp = loss_cp(&set, CpForm::Bce).unwrap();
        let cam = loss_cam(&local, &global).unwrap();
        assert_abs_diff_eq!(gc, cp + cam, epsilon = 1e-12);
    }

    #[test]
    fn oc_zero_at_fixed_point() {
        let w = [1.0, 2.0];
        assert_abs_diff_eq!(loss_oc(&w, &w, &[0.0, 0.0], 0.5).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn oc_hand_arithmetic() {
        // -(1/0.5)*<[2,0],[1,2]> + 0 = -4
        let l = loss_oc(&[1.0, 2.0], &[1.0, 2.0], &[2.0, 0.0], 0.5).unwrap();
        assert_abs_diff_eq!(l, -4.0, epsilon = 1e-12);
        // lambda = 0, w - wg = [3,4]: 0.5*25 = 12.5
        let l = loss_oc(&[3.0, 4.0], &[0.0, 0.0], &[0.0, 0.0], 0.1).unwrap();
        assert_abs_diff_eq!(l, 12.5, epsilon = 1e-12);
    }

    #[test]
    fn oc_rejects_dimension_mismatch() {
        assert!(loss_oc(&[1.0], &[1.0, 2.0], &[0.0], 0.1).is_err());
    }

    #[test]
    fn total_reductions() {
        let b = loss_total(1.0, 0.0, 0.0, 2.0, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(b.total, b.ce, epsilon = 1e-12);
        let b = loss_total(1.0, 0.0, 0.0, 2.0, 0.3, 0.0).unwrap();
        assert_abs_diff_eq!(b.total, 1.0 + 0.3 * 2.0, epsilon = 1e-12);
        let b = loss_total(1.0, 1.0, 2.0, 2.0, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(b.gc, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.total, 1.5, epsilon = 1e-12);
        assert!(loss_total(1.0, 0.0, 0.0, 0.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn total_is_affine_in_parts() {
        let (alpha, beta) = (0.25, 0.75);
        let base = loss_total(1.0, 2.0, 3.0, 4.0, alpha, beta).unwrap();
        let bumped = loss_total(2.0, 2.0, 3.0, 4.0, alpha, beta).unwrap();
        assert_abs_diff_eq!(bumped.total - base.total, 1.0, epsilon = 1e-12);
        let bumped = loss_total(1.0, 2.0, 3.0, 5.0, alpha, beta).unwrap();
        assert_abs_diff_eq!(bumped.total - base.total, alpha, epsilon = 1e-12);
        let bumped = loss_total(1.0, 3.0, 3.0, 4.0, alpha, beta).unwrap();
        assert_abs_diff_eq!(bumped.total - base.total, beta, epsilon = 1e-12);
    }

    #[test]
    fn tape_cp_matches_plain() {
        for form in [CpForm::Bce, CpForm::Kl] {
            let local = vec![rand_probs(3, 4, 50), rand_probs(3, 4, 51)];
            let global = vec![rand_probs(3, 4, 52), rand_probs(3, 4, 53)];
            let plain = loss_cp_with(&local, Some(&global), form).unwrap();
            let mut tape = Tape::new();
            let lv: Vec<Var> = local.iter().map(|m| prediction_const(&mut tape, m)).collect();
            let v = cp_on_tape(&mut tape, &lv, Some(&global), form);
            assert_abs_diff_eq!(tape.scalar(v), plain, epsilon = 1e-12);
        }
    }

    #[test]
    fn tape_cam_matches_plain() {
        let l0 = vec![rand_cam(3, 60), rand_cam(3, 61)];
        let l1 = vec![rand_cam(3, 62), rand_cam(3, 63)];
        let g0 = vec![rand_cam(3, 64), rand_cam(3, 65)];
        let plain = loss_cam_with(&[l0.clone(), l1.clone()], Some(&[g0.clone()])).unwrap();
        let to_flat = |views: &[Vec<Array2<f64>>]| -> Vec<Array2<f64>> {
            views
                .iter()
                .map(|v| {
                    let mut m = Array2::zeros((v.len(), 9));
                    for (i, cam) in v.iter().enumerate() {
                        for (j, &x) in cam.iter().enumerate() {
                            m[(i, j)] = x;
                        }
                    }
                    m
                })
                .collect()
        };
        let lf = to_flat(&[l0, l1]);
        let gf = to_flat(&[g0]);
        let mut tape = Tape::new();
        let lv: Vec<Var> = lf.iter().map(|m| prediction_const(&mut tape, m)).collect();
        let v = cam_on_tape(&mut tape, &lv, Some(&gf));
        assert_abs_diff_eq!(tape.scalar(v), plain, epsilon = 1e-12);
    }

    #[test]
    fn tape_ce_matches_plain() {
        let logits = arr2(&[[0.5, -1.0, 2.0], [1.0, 1.0, -2.0]]);
        let probs = crate::tape::kernels::softmax_rows(&logits);
        let labels = [2usize, 0];
        let plain = loss_ce(&probs, &labels).unwrap();
        let mut tape = Tape::new();
        let lv = tape.constant(logits.into_dyn());
        let v = ce_on_tape(&mut tape, &[lv], &labels);
        assert_abs_diff_eq!(tape.scalar(v), plain, epsilon = 1e-12);
    }

    #[test]
    fn tape_oc_matches_plain_and_gradient() {
        let w = vec![1.0, -2.0, 0.5];
        let wg = vec![0.5, 0.5, 0.5];
        let lam = vec![0.1, 0.0, -0.3];
        let alpha = 0.2;
        let plain = loss_oc(&w, &wg, &lam, alpha).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(ndarray::Array1::from(w.clone()).into_dyn(), true);
        let v = oc_on_tape(&mut tape, p, &wg, &lam, alpha);
        assert_abs_diff_eq!(tape.scalar(v), plain, epsilon = 1e-12);
        let grads = tape.backward(v).unwrap();
        let g = grads.get(p).unwrap();
        for i in 0..3 {
            let expect = -lam[i] / alpha + (w[i] - wg[i]);
            assert_abs_diff_eq!(g.as_slice().unwrap()[i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_terms_receive_no_gradient() {
        // Perturbing the global predictions changes the loss value but
        // the global entries stay constants on the tape.
        let local = vec![rand_probs(2, 3, 70)];
        let g1 = vec![rand_probs(2, 3, 71)];
        let g2 = vec![rand_probs(2, 3, 72)];
        let l1 = loss_cp_with(&local, Some(&g1), CpForm::Bce).unwrap();
        let l2 = loss_cp_with(&local, Some(&g2), CpForm::Bce).unwrap();
        assert!((l1 - l2).abs() > 1e-9);

        let mut tape = Tape::new();
        let p = tape.leaf(local[0].clone().into_dyn(), true);
        let v = cp_on_tape(&mut tape, &[p], Some(&g1), CpForm::Bce);
        let grads = tape.backward(v).unwrap();
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn cp_kl_increases_under_single_view_perturbation() {
        // In the KL reading, agreement is a minimum: nudging one view
        // away from the shared prediction must increase the loss. (The
        // BCE form also carries each view's entropy, so this only holds
        // for KL.)
        let p = arr2(&[[0.5, 0.5]]);
        let base_set = PredictionSet {
            local: vec![p.clone(), p.clone(), p.clone()],
            global: vec![p.clone(), p.clone(), p.clone()],
        };
        let base = loss_cp(&base_set, CpForm::Kl).unwrap();
        let nudged = arr2(&[[0.6, 0.4]]);
        let set = PredictionSet {
            local: vec![nudged, p.clone(), p.clone()],
            global: vec![p.clone(), p.clone(), p.clone()],
        };
        let perturbed = loss_cp(&set, CpForm::Kl).unwrap();
        assert!(perturbed > base, "{perturbed} <= {base}");
    }

    #[test]
    fn cp_bce_penalizes_disagreement_at_fixed_entropy() {
        // Two views with identical per-view entropy; mirrored
        // disagreement must cost more than agreement.
        let a = arr2(&[[0.7, 0.3]]);
        let b = arr2(&[[0.3, 0.7]]);
        let agree = PredictionSet {
            local: vec![a.clone(), a.clone()],
            global: vec![a.clone(), a.clone()],
        };
        let disagree = PredictionSet {
            local: vec![a.clone(), b.clone()],
            global: vec![a.clone(), b.clone()],
        };
        let l_agree = loss_cp(&agree, CpForm::Bce).unwrap();
        let l_disagree = loss_cp(&disagree, CpForm::Bce).unwrap();
        assert!(l_disagree > l_agree, "{l_disagree} <= {l_agree}");
    }
}
