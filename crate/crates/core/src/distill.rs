//! Training losses for the student: cross-entropy, smooth-L1 box regression
//! and the class-aware Bhattacharyya penalty, with analytic gradients with
//! respect to the linear heads.
//!
//! The penalty compares, for each student class `c`, the column of student
//! probabilities `p_s(i, c)` over the `n` anchors of a batch with the teacher's
//! foreground column `p_t(i)`. Both columns are normalized over the batch
//! (unless `normalize_over_batch` is off), the coefficient
//! `BC = sum_i sqrt(u_i * v_i)` is computed and the class distance is
//! `B_c = -lambda_c * ln(max(BC, eps))`. The penalty is
//! `D = sum_c B_c / sum_c lambda_c`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::detector::{softmax_rows, LinearHeads};
use crate::error::{Error, Result};
use crate::geometry::BoxDelta;

/// Penalty weights and numerical guards for the distillation term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub enabled: bool,
    pub lambda_ndbe: f64,
    pub lambda_neoplasia: f64,
    pub lambda_polyp: f64,
    /// Floor applied to the Bhattacharyya coefficient inside the logarithm.
    pub eps_floor: f64,
    /// Rescale each probability column to sum 1 over the batch before comparing.
    pub normalize_over_batch: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            enabled: true,
            lambda_ndbe: 0.165,
            lambda_neoplasia: 0.33,
            lambda_polyp: 0.33,
            eps_floor: 1e-7,
            normalize_over_batch: true,
        }
    }
}

impl KdConfig {
    pub fn disabled() -> Self {
        KdConfig { enabled: false, ..Default::default() }
    }

    /// Weights in merged-class order (ndbe, neoplasia, polyp).
    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda_ndbe, self.lambda_neoplasia, self.lambda_polyp]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in ["lambda_ndbe", "lambda_neoplasia", "lambda_polyp"].iter().zip(self.lambdas()) {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Config(format!("kd.{name} must be positive and finite, got {l}")));
            }
        }
        if !(self.eps_floor > 0.0 && self.eps_floor < 1e-3) {
            return Err(Error::Config(format!("kd.eps_floor must lie in (0, 1e-3), got {}", self.eps_floor)));
        }
        Ok(())
    }
}

/// Rescales a nonnegative series to unit sum.
pub fn normalize_series(u: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = u.iter().sum();
    if !(s > 0.0) {
        return Err(Error::EmptyDistribution);
    }
    Ok(u.iter().map(|x| x / s).collect())
}

fn coefficient(u: &[f64], v: &[f64], normalize: bool) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension { expected: u.len(), got: v.len() });
    }
    if u.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let (u, v) = if normalize {
        (normalize_series(u)?, normalize_series(v)?)
    } else {
        if !(u.iter().sum::<f64>() > 0.0 && v.iter().sum::<f64>() > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        (u.to_vec(), v.to_vec())
    };
    Ok(u.iter().zip(&v).map(|(a, b)| (a * b).sqrt()).sum())
}

/// `ln(max(BC, eps))`. For normalized series `BC` is first capped at its
/// theoretical maximum of 1, so rounding cannot produce a negative distance;
/// unnormalized series have no such bound.
fn bounded_log(bc: f64, eps: f64, normalized: bool) -> f64 {
    let bc = if normalized { bc.min(1.0) } else { bc };
    bc.max(eps).ln()
}

/// Weighted Bhattacharyya distance `-lambda * ln(max(BC, eps))` between two
/// probability series over the same anchors.
pub fn bhattacharyya_distance(u: &[f64], v: &[f64], lambda: f64, eps: f64, normalize: bool) -> Result<f64> {
    let bc = coefficient(u, v, normalize)?;
    Ok(-lambda * bounded_log(bc, eps, normalize))
}

/// Value of the penalty together with its gradient with respect to the
/// student probability matrix.
#[derive(Debug, Clone)]
pub struct KdTerms {
    /// Normalized penalty `D`.
    pub value: f64,
    /// Weighted per-class distances `B_c`.
    pub per_class: Vec<f64>,
    /// `dD / dp_s`, shape `n x (K + 1)`; the background column is zero.
    pub grad_probs: Array2<f64>,
}

/// Penalty between an `n x (K+1)` student probability matrix and an `n x 2`
/// teacher probability matrix, using one weight per student foreground class.
/// Weights may be zero here (used for component isolation), but their sum
/// must be positive.
pub fn kd_terms(
    student_probs: &Array2<f64>,
    teacher_probs: &Array2<f64>,
    lambdas: &[f64],
    eps: f64,
    normalize: bool,
) -> Result<KdTerms> {
    let (n, cols) = student_probs.dim();
    if cols != lambdas.len() + 1 {
        return Err(Error::Dimension { expected: lambdas.len() + 1, got: cols });
    }
    if teacher_probs.dim() != (n, 2) {
        return Err(Error::Dimension { expected: n, got: teacher_probs.nrows() });
    }
    let lambda_sum: f64 = lambdas.iter().sum();
    if !(lambda_sum > 0.0) {
        return Err(Error::Config("penalty weights must have a positive sum".into()));
    }

    let v_raw: Vec<f64> = teacher_probs.column(1).to_vec();
    let v = if normalize { normalize_series(&v_raw)? } else { v_raw };
    if !normalize && !(v.iter().sum::<f64>() > 0.0) {
        return Err(Error::EmptyDistribution);
    }

    let mut per_class = Vec::with_capacity(lambdas.len());
    let mut grad = Array2::zeros((n, cols));
    for (c, &lambda) in lambdas.iter().enumerate() {
        let u: Vec<f64> = student_probs.column(c + 1).to_vec();
        let s: f64 = u.iter().sum();
        if !(s > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        let scale = if normalize { s } else { 1.0 };
        let bc: f64 = u.iter().zip(&v).map(|(a, b)| (a / scale * b).sqrt()).sum();
        per_class.push(-lambda * bounded_log(bc, eps, normalize));
        if bc <= eps || lambda == 0.0 {
            // Clamped (or switched-off) term is locally constant.
            continue;
        }
        // d(-lambda ln BC)/du_j = -(lambda / BC) * dBC/du_j, where
        //   normalized: dBC/du_j = 0.5 * (sqrt(v_j / (u_j S)) - BC / S)
        //   raw:        dBC/du_j = 0.5 * sqrt(v_j / u_j)
        let outer = -lambda / (bc * lambda_sum);
        for j in 0..n {
            let uj = u[j].max(f64::MIN_POSITIVE);
            let root = if v[j] > 0.0 { (v[j] / (uj * scale)).sqrt() } else { 0.0 };
            let dbc = if normalize { 0.5 * (root - bc / s) } else { 0.5 * root };
            grad[[j, c + 1]] = outer * dbc;
        }
    }
    let value = per_class.iter().sum::<f64>() / lambda_sum;
    Ok(KdTerms { value, per_class, grad_probs: grad })
}

/// Normalized penalty `D` and the per-class weighted distances for a
/// three-class student against a single-class teacher.
pub fn kd_penalty(
    student_probs: &Array2<f64>,
    teacher_probs: &Array2<f64>,
    cfg: &KdConfig,
) -> Result<(f64, [f64; 3])> {
    let t = kd_terms(student_probs, teacher_probs, &cfg.lambdas(), cfg.eps_floor, cfg.normalize_over_batch)?;
    Ok((t.value, [t.per_class[0], t.per_class[1], t.per_class[2]]))
}

fn log_softmax_row(z: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    z.mapv(|x| x - m - lse)
}

/// Mean negative log-likelihood over the anchors whose label is `Some`.
/// Labels are head indices (0 = background).
pub fn cross_entropy(logits: &Array2<f64>, labels: &[Option<usize>]) -> Result<f64> {
    if labels.len() != logits.nrows() {
        return Err(Error::Dimension { expected: logits.nrows(), got: labels.len() });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, label) in logits.outer_iter().zip(labels) {
        if let Some(y) = *label {
            if y >= row.len() {
                return Err(Error::Dimension { expected: row.len(), got: y + 1 });
            }
            total -= log_softmax_row(row)[y];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoLabeledAnchors);
    }
    Ok(total / count as f64)
}

#[inline]
pub fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Regression target of one positive anchor: the foreground class slot to
/// read (0-based, background excluded) and the encoded ground-truth delta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTarget {
    pub class: usize,
    pub delta: BoxDelta,
}

/// Smooth-L1 summed over the four coordinates of each positive anchor's class
/// slot and averaged over positives; zero without positives.
pub fn smooth_l1(pred_deltas: &Array2<f64>, targets: &[Option<RegTarget>]) -> Result<f64> {
    if targets.len() != pred_deltas.nrows() {
        return Err(Error::Dimension { expected: pred_deltas.nrows(), got: targets.len() });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, t) in pred_deltas.outer_iter().zip(targets) {
        if let Some(t) = t {
            if 4 * t.class + 4 > row.len() {
                return Err(Error::Dimension { expected: row.len(), got: 4 * t.class + 4 });
            }
            for (k, target) in t.delta.as_array().iter().enumerate() {
                total += smooth_l1_scalar(row[4 * t.class + k] - target);
            }
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// One mini-batch of sampled anchors, possibly drawn from several images.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Region descriptors, `n x d`.
    pub descriptors: Array2<f64>,
    /// Head index per anchor (0 = background); `None` excludes it from the
    /// classification loss.
    pub labels: Vec<Option<usize>>,
    /// Regression target for positive anchors.
    pub reg_targets: Vec<Option<RegTarget>>,
    /// Frozen-teacher probabilities on the same anchors, `n x 2`. Only needed
    /// when the penalty is enabled.
    pub teacher_probs: Option<Array2<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar objective and its parts. `total = ce + kd + reg_weight * reg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    /// Unweighted smooth-L1 term.
    pub reg: f64,
    pub reg_weight: f64,
    /// Weighted per-class distances (ndbe, neoplasia, polyp); zeros when the
    /// penalty is off.
    pub kd_per_class: [f64; 3],
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.ce.is_finite() && self.kd.is_finite() && self.reg.is_finite()
    }
}

fn teacher_for<'a>(batch: &'a Batch, kd: &KdConfig) -> Result<Option<&'a Array2<f64>>> {
    if !kd.enabled {
        return Ok(None);
    }
    batch
        .teacher_probs
        .as_ref()
        .map(Some)
        .ok_or_else(|| Error::Config("penalty enabled but the batch carries no teacher probabilities".into()))
}

/// Evaluates `L = CE + D + reg_weight * smoothL1` from forward outputs.
pub fn total_student_loss(
    logits: &Array2<f64>,
    deltas: &Array2<f64>,
    batch: &Batch,
    kd: &KdConfig,
    reg_weight: f64,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, &batch.labels)?;
    let reg = smooth_l1(deltas, &batch.reg_targets)?;
    let (d, per_class) = match teacher_for(batch, kd)? {
        Some(t) => kd_penalty(&softmax_rows(logits), t, kd)?,
        None => (0.0, [0.0; 3]),
    };
    Ok(LossBreakdown { total: ce + d + reg_weight * reg, ce, kd: d, reg, reg_weight, kd_per_class: per_class })
}

/// Forward pass plus [`total_student_loss`].
pub fn student_objective(heads: &LinearHeads, batch: &Batch, kd: &KdConfig, reg_weight: f64) -> Result<LossBreakdown> {
    let (logits, deltas) = heads.forward(&batch.descriptors)?;
    total_student_loss(&logits, &deltas, batch, kd, reg_weight)
}

/// Loss and its gradient with respect to every head parameter, returned in a
/// [`LinearHeads`] of the same shape. The teacher enters only through its
/// fixed probabilities.
pub fn loss_gradient(
    heads: &LinearHeads,
    batch: &Batch,
    kd: &KdConfig,
    reg_weight: f64,
) -> Result<(LossBreakdown, LinearHeads)> {
    let (logits, deltas) = heads.forward(&batch.descriptors)?;
    let probs = softmax_rows(&logits);
    let (n, k1) = logits.dim();

    // Cross-entropy: (p - onehot) / N over labeled rows.
    let ce = cross_entropy(&logits, &batch.labels)?;
    let labeled = batch.labels.iter().filter(|l| l.is_some()).count() as f64;
    let mut g_logits = Array2::<f64>::zeros((n, k1));
    for (i, label) in batch.labels.iter().enumerate() {
        if let Some(y) = *label {
            for k in 0..k1 {
                g_logits[[i, k]] = probs[[i, k]] / labeled;
            }
            g_logits[[i, y]] -= 1.0 / labeled;
        }
    }

    // Penalty: chain dD/dp through the softmax Jacobian, row by row.
    let (d, per_class) = match teacher_for(batch, kd)? {
        Some(t) => {
            let terms = kd_terms(&probs, t, &kd.lambdas(), kd.eps_floor, kd.normalize_over_batch)?;
            for i in 0..n {
                let gp = terms.grad_probs.row(i);
                let p = probs.row(i);
                let dot: f64 = gp.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                for k in 0..k1 {
                    g_logits[[i, k]] += p[k] * (gp[k] - dot);
                }
            }
            (terms.value, [terms.per_class[0], terms.per_class[1], terms.per_class[2]])
        }
        None => (0.0, [0.0; 3]),
    };

    // Smooth-L1: clamp(residual, -1, 1) / N_pos on the matched slot.
    let reg = smooth_l1(&deltas, &batch.reg_targets)?;
    let positives = batch.reg_targets.iter().filter(|t| t.is_some()).count();
    let mut g_deltas = Array2::<f64>::zeros(deltas.dim());
    if positives > 0 {
        let scale = reg_weight / positives as f64;
        for (i, t) in batch.reg_targets.iter().enumerate() {
            if let Some(t) = t {
                for (k, target) in t.delta.as_array().iter().enumerate() {
                    let col = 4 * t.class + k;
                    g_deltas[[i, col]] = (deltas[[i, col]] - target).clamp(-1.0, 1.0) * scale;
                }
            }
        }
    }

    let grads = LinearHeads {
        cls_w: g_logits.t().dot(&batch.descriptors),
        cls_b: g_logits.sum_axis(Axis(0)),
        reg_w: g_deltas.t().dot(&batch.descriptors),
        reg_b: g_deltas.sum_axis(Axis(0)),
    };
    let breakdown = LossBreakdown { total: ce + d + reg_weight * reg, ce, kd: d, reg, reg_weight, kd_per_class: per_class };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn distance_worked_values() {
        assert_abs_diff_eq!(
            bhattacharyya_distance(&[0.9, 0.1], &[0.1, 0.9], 1.0, 1e-7, true).unwrap(),
            -(0.6f64.ln()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(bhattacharyya_distance(&[0.9, 0.1], &[0.1, 0.9], 1.0, 1e-7, true).unwrap(), 0.5108, epsilon = 1e-4);
        assert_abs_diff_eq!(bhattacharyya_distance(&[1.0, 0.0], &[0.0, 1.0], 1.0, 1e-7, true).unwrap(), 16.118, epsilon = 1e-3);
        let d = bhattacharyya_distance(&[0.2, 0.5, 0.3], &[0.2, 0.5, 0.3], 0.33, 1e-7, true).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_series_is_an_error() {
        assert!(matches!(
            bhattacharyya_distance(&[0.0, 0.0], &[0.5, 0.5], 1.0, 1e-7, true),
            Err(Error::EmptyDistribution)
        ));
        assert!(matches!(
            bhattacharyya_distance(&[0.5, 0.5], &[0.0, 0.0], 1.0, 1e-7, false),
            Err(Error::EmptyDistribution)
        ));
    }

    #[test]
    fn normalization_makes_scale_irrelevant() {
        let a = bhattacharyya_distance(&[0.9, 0.1, 0.4], &[0.1, 0.9, 0.2], 1.0, 1e-7, true).unwrap();
        let b = bhattacharyya_distance(&[0.45, 0.05, 0.2], &[0.3, 2.7, 0.6], 1.0, 1e-7, true).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn unnormalized_coefficient_is_not_capped() {
        // BC = sqrt(0.9 * 0.9) + sqrt(0.8 * 0.8) = 1.7 exceeds 1 without normalization.
        let d = bhattacharyya_distance(&[0.9, 0.8], &[0.9, 0.8], 1.0, 1e-7, false).unwrap();
        assert_abs_diff_eq!(d, -(1.7f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn penalty_with_equal_class_distances() {
        // Every student foreground column is (0.9, 0.1) up to scale; teacher is (0.1, 0.9).
        let s = array![[0.1, 0.3, 0.3, 0.3], [0.9, 1.0 / 30.0, 1.0 / 30.0, 1.0 / 30.0]];
        let t = array![[0.9, 0.1], [0.1, 0.9]];
        let (d, per) = kd_penalty(&s, &t, &KdConfig::default()).unwrap();
        assert_abs_diff_eq!(d, -(0.6f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(per[0], -0.165 * 0.6f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_worked_values() {
        let uniform = Array2::zeros((3, 4));
        let l = cross_entropy(&uniform, &[Some(0), Some(2), None]).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-12);
        let z = array![[1f64.ln(), 3f64.ln()]];
        assert_abs_diff_eq!(cross_entropy(&z, &[Some(1)]).unwrap(), -(0.75f64.ln()), epsilon = 1e-12);
        let sure = array![[0.0, 30.0, 0.0]];
        assert!(cross_entropy(&sure, &[Some(1)]).unwrap() < 1e-9);
        assert!(matches!(cross_entropy(&uniform, &[None, None, None]), Err(Error::NoLabeledAnchors)));
    }

    #[test]
    fn smooth_l1_worked_values() {
        let zeros = Array2::zeros((2, 12));
        let t = |tx| Some(RegTarget { class: 2, delta: BoxDelta { tx, ty: 0.0, tw: 0.0, th: 0.0 } });
        assert_eq!(smooth_l1(&zeros, &[None, None]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&zeros, &[t(0.0), None]).unwrap(), 0.0);
        assert_abs_diff_eq!(smooth_l1(&zeros, &[t(-0.5), None]).unwrap(), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1(&zeros, &[None, t(-2.0)]).unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(KdConfig::default().validate().is_ok());
        assert!(KdConfig { lambda_polyp: 0.0, ..Default::default() }.validate().is_err());
        assert!(KdConfig { eps_floor: 1e-2, ..Default::default() }.validate().is_err());
        assert!(KdConfig { eps_floor: 0.0, ..Default::default() }.validate().is_err());
    }
    #[test]
    fn distance_is_symmetric_and_nonnegative() {
        let u = [0.3, 0.1, 0.05, 0.7];
        let v = [0.2, 0.4, 0.4, 0.01];
        let a = bhattacharyya_distance(&u, &v, 0.33, 1e-7, true).unwrap();
        let b = bhattacharyya_distance(&v, &u, 0.33, 1e-7, true).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        assert!(a > 0.0);
    }

    #[test]
    fn penalty_is_homogeneous_in_weights() {
        let s = array![[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1], [0.25, 0.25, 0.25, 0.25]];
        let t = array![[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]];
        let cfg = KdConfig::default();
        let doubled = KdConfig {
            lambda_ndbe: 2.0 * cfg.lambda_ndbe,
            lambda_neoplasia: 2.0 * cfg.lambda_neoplasia,
            lambda_polyp: 2.0 * cfg.lambda_polyp,
            ..cfg.clone()
        };
        let (a, _) = kd_penalty(&s, &t, &cfg).unwrap();
        let (b, _) = kd_penalty(&s, &t, &doubled).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        // Matching columns give a zero penalty.
        let same = array![[0.1, 0.3, 0.3, 0.3], [0.4, 0.2, 0.2, 0.2]];
        let t2 = array![[0.7, 0.3], [0.8, 0.2]];
        assert_abs_diff_eq!(kd_penalty(&same, &t2, &cfg).unwrap().0, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_isolates_a_class() {
        let s = array![[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1], [0.2, 0.5, 0.1, 0.2]];
        let t = array![[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]];
        let full = kd_terms(&s, &t, &[0.165, 0.33, 0.33], 1e-7, true).unwrap();
        let off = kd_terms(&s, &t, &[0.0, 0.33, 0.33], 1e-7, true).unwrap();
        let only = kd_terms(&s, &t, &[0.165, 0.0, 0.0], 1e-7, true).unwrap();
        for i in 0..3 {
            assert_eq!(off.grad_probs[[i, 1]], 0.0);
            assert_eq!(only.grad_probs[[i, 2]], 0.0);
            assert_eq!(only.grad_probs[[i, 3]], 0.0);
            assert_eq!(full.grad_probs[[i, 0]], 0.0);
            // Away from the zeroed class, gradients differ only by the normaliser.
            for c in 2..4 {
                assert_abs_diff_eq!(off.grad_probs[[i, c]] * 0.66, full.grad_probs[[i, c]] * 0.825, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(only.grad_probs[[i, 1]] * 0.165, full.grad_probs[[i, 1]] * 0.825, epsilon = 1e-12);
        }
    }

    #[test]
    fn clamped_coefficient_has_no_gradient() {
        let s = array![[0.0, 1.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]];
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let terms = kd_terms(&s, &t, &[1.0, 1.0, 1.0], 1e-7, true).unwrap();
        assert_abs_diff_eq!(terms.value, -(1e-7f64.ln()), epsilon = 1e-9);
        assert!(terms.grad_probs.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn perfect_student_has_zero_loss_and_gradient() {
        // One-hot descriptors routed to saturated logits; regression already exact.
        let mut heads = LinearHeads::zeros(3, 2);
        heads.cls_w[[0, 0]] = 800.0;
        heads.cls_w[[3, 1]] = 800.0;
        heads.reg_w[[8, 1]] = 0.5;
        let batch = Batch {
            descriptors: array![[1.0, 0.0], [0.0, 1.0]],
            labels: vec![Some(0), Some(3)],
            reg_targets: vec![
                None,
                Some(RegTarget { class: 2, delta: BoxDelta { tx: 0.5, ty: 0.0, tw: 0.0, th: 0.0 } }),
            ],
            teacher_probs: None,
        };
        let (loss, grads) = loss_gradient(&heads, &batch, &KdConfig::disabled(), 1.0).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grads.flatten().iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn disabled_penalty_ignores_teacher() {
        let heads = LinearHeads::init(3, 2, 4);
        let mut batch = Batch {
            descriptors: array![[0.3, 0.9], [0.1, 0.4]],
            labels: vec![Some(1), Some(0)],
            reg_targets: vec![Some(RegTarget { class: 0, delta: BoxDelta::default() }), None],
            teacher_probs: None,
        };
        let a = loss_gradient(&heads, &batch, &KdConfig::disabled(), 1.0).unwrap();
        batch.teacher_probs = Some(array![[0.5, 0.5], [0.1, 0.9]]);
        let b = loss_gradient(&heads, &batch, &KdConfig::disabled(), 1.0).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(loss_gradient(&heads, &Batch { teacher_probs: None, ..batch }, &KdConfig::default(), 1.0).is_err());
    }
}
