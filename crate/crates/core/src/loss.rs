//! The Conservative Loss family as pure scalar functions of the
//! ground-truth-class probability `p`.
//!
//! Six losses share one interface:
//!
//! - `CrossEntropy`:  `-ln p`
//! - `Focal`:         `-alpha_t * (1-p)^gamma * ln p`
//! - `Conservative`:  `lambda * (1 + log_a p)^2 * log_a(-log_a p)`
//! - `Cubic1`:        `-lambda1 * (p - 1/2)^3`
//! - `Cubic2`:        `-lambda2 * (p - 1/e)^3`
//! - `Cubic3`:        `-alpha * (p - 1/e)^3` for `p < 1/e`, `-beta * (...)` otherwise
//!
//! The conservative form is positive below its zero point `1/a` and negative
//! above it. [`eval_grad`] is the plain analytic derivative of the closed
//! form (what a finite-difference oracle reproduces). [`train_grad`] is the
//! gradient used for parameter updates: it descends the loss where the value
//! is positive and ascends it where the value is negative, so predictions are
//! driven toward the zero point instead of toward certainty. For the
//! everywhere-positive losses (cross entropy, focal) the two coincide.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `1/e`, the zero point of the base-`e` conservative loss and of the
/// cubic losses modeled on it.
pub const INV_E: f64 = 1.0 / std::f64::consts::E;

/// Which member of the loss family to evaluate, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    /// Alpha-balanced focal loss with exponent `gamma`.
    Focal { alpha_t: f64, gamma: f64 },
    /// Log-base `a` conservative loss scaled by `lambda`.
    Conservative { a: f64, lambda: f64 },
    /// Cubic with zero point at 1/2.
    Cubic1 { lambda1: f64 },
    /// Cubic with zero point at 1/e.
    Cubic2 { lambda2: f64 },
    /// Piecewise cubic with zero point at 1/e and separate branch weights.
    Cubic3 { alpha: f64, beta: f64 },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Focal { .. } => "focal",
            LossKind::Conservative { .. } => "conservative",
            LossKind::Cubic1 { .. } => "cubic1",
            LossKind::Cubic2 { .. } => "cubic2",
            LossKind::Cubic3 { .. } => "cubic3",
        }
    }
}

/// A loss selection plus an optional output clamp.
///
/// The clamp clips the loss *value* into `[lo, hi]`; where it binds, both
/// gradients are zero. Cold-start schedules clamp the conservative loss to
/// `[-10, 10]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub clamp: Option<(f64, f64)>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, clamp: None }
    }

    pub fn cross_entropy() -> Self {
        Self::new(LossKind::CrossEntropy)
    }

    pub fn focal(alpha_t: f64, gamma: f64) -> Self {
        Self::new(LossKind::Focal { alpha_t, gamma })
    }

    pub fn conservative(a: f64, lambda: f64) -> Self {
        Self::new(LossKind::Conservative { a, lambda })
    }

    pub fn cubic1(lambda1: f64) -> Self {
        Self::new(LossKind::Cubic1 { lambda1 })
    }

    pub fn cubic2(lambda2: f64) -> Self {
        Self::new(LossKind::Cubic2 { lambda2 })
    }

    pub fn cubic3(alpha: f64, beta: f64) -> Self {
        Self::new(LossKind::Cubic3 { alpha, beta })
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = Some((lo, hi));
        self
    }

    pub fn kind_name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self.kind {
            LossKind::CrossEntropy => {}
            LossKind::Focal { alpha_t, gamma } => {
                if !(alpha_t > 0.0) {
                    return bad(format!("focal alpha_t must be > 0, got {alpha_t}"));
                }
                if !(gamma >= 0.0) {
                    return bad(format!("focal gamma must be >= 0, got {gamma}"));
                }
            }
            LossKind::Conservative { a, lambda } => {
                if !(a > 1.0) {
                    return bad(format!("conservative base a must be > 1, got {a}"));
                }
                if !(lambda > 0.0) {
                    return bad(format!("conservative lambda must be > 0, got {lambda}"));
                }
            }
            LossKind::Cubic1 { lambda1 } => {
                if !(lambda1 > 0.0) {
                    return bad(format!("cubic1 lambda1 must be > 0, got {lambda1}"));
                }
            }
            LossKind::Cubic2 { lambda2 } => {
                if !(lambda2 > 0.0) {
                    return bad(format!("cubic2 lambda2 must be > 0, got {lambda2}"));
                }
            }
            LossKind::Cubic3 { alpha, beta } => {
                if !(alpha > 0.0 && beta > 0.0) {
                    return bad(format!(
                        "cubic3 branch weights must be > 0, got alpha={alpha} beta={beta}"
                    ));
                }
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return bad(format!("clamp bounds must satisfy lo < hi, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// Probability clamp applied before any loss evaluation; the conservative
/// loss diverges at both ends of (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbPolicy {
    pub eps: f64,
}

impl Default for ProbPolicy {
    fn default() -> Self {
        Self { eps: 1e-6 }
    }
}

impl ProbPolicy {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::Config(format!(
                "probability eps must lie in (0, 0.5), got {eps}"
            )));
        }
        Ok(Self { eps })
    }
}

/// Maps `p` into `[eps, 1-eps]`; identity when already inside.
pub fn clamp_probability(p: f64, policy: ProbPolicy) -> Result<f64> {
    if !p.is_finite() {
        return Err(Error::Domain(format!("probability must be finite, got {p}")));
    }
    Ok(p.clamp(policy.eps, 1.0 - policy.eps))
}

fn check_open_unit(p: f64) -> Result<()> {
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(Error::Domain(format!("p must lie in (0, 1), got {p}")));
    }
    Ok(())
}

fn cube(x: f64) -> f64 {
    x * x * x
}

// Unclamped loss value. Weights multiply last so that scaling the weight
// scales the value bit-exactly.
fn raw_value(kind: LossKind, p: f64) -> f64 {
    match kind {
        LossKind::CrossEntropy => -p.ln(),
        LossKind::Focal { alpha_t, gamma } => alpha_t * (-(1.0 - p).powf(gamma) * p.ln()),
        LossKind::Conservative { a, lambda } => {
            let c = a.ln();
            let l = p.ln() / c;
            let modulating = (1.0 + l) * (1.0 + l);
            let switch = (-l).ln() / c;
            lambda * (modulating * switch)
        }
        LossKind::Cubic1 { lambda1 } => lambda1 * -cube(p - 0.5),
        LossKind::Cubic2 { lambda2 } => lambda2 * -cube(p - INV_E),
        LossKind::Cubic3 { alpha, beta } => {
            let base = -cube(p - INV_E);
            if p < INV_E {
                alpha * base
            } else {
                beta * base
            }
        }
    }
}

// Unclamped analytic derivative of `raw_value` with respect to `p`.
fn raw_grad(kind: LossKind, p: f64) -> f64 {
    match kind {
        LossKind::CrossEntropy => -1.0 / p,
        LossKind::Focal { alpha_t, gamma } => {
            let modulating = if gamma > 0.0 {
                gamma * (1.0 - p).powf(gamma - 1.0) * p.ln()
            } else {
                0.0
            };
            alpha_t * (modulating - (1.0 - p).powf(gamma) / p)
        }
        LossKind::Conservative { a, lambda } => {
            let c = a.ln();
            let l = p.ln() / c;
            lambda * (1.0 + l) / (p * c * c) * (2.0 * (-l).ln() + (1.0 + l) / l)
        }
        LossKind::Cubic1 { lambda1 } => {
            let d = p - 0.5;
            -3.0 * lambda1 * d * d
        }
        LossKind::Cubic2 { lambda2 } => {
            let d = p - INV_E;
            -3.0 * lambda2 * d * d
        }
        LossKind::Cubic3 { alpha, beta } => {
            let d = p - INV_E;
            let w = if p < INV_E { alpha } else { beta };
            -3.0 * w * d * d
        }
    }
}

/// Loss value at ground-truth probability `p`, clipped into the spec's clamp
/// interval when one is present.
pub fn eval_loss(spec: &LossSpec, p: f64) -> Result<f64> {
    check_open_unit(p)?;
    let v = raw_value(spec.kind, p);
    Ok(match spec.clamp {
        Some((lo, hi)) => v.clamp(lo, hi),
        None => v,
    })
}

/// Analytic derivative `d eval_loss / dp`. Zero wherever the value clamp
/// binds (the clipped function is flat there).
pub fn eval_grad(spec: &LossSpec, p: f64) -> Result<f64> {
    check_open_unit(p)?;
    if let Some((lo, hi)) = spec.clamp {
        let v = raw_value(spec.kind, p);
        if v < lo || v > hi {
            return Ok(0.0);
        }
    }
    Ok(raw_grad(spec.kind, p))
}

/// Gradient used for parameter updates.
///
/// Equal to [`eval_grad`] where the loss value is non-negative and to its
/// negation where the value is negative, i.e. the derivative of `|loss|`.
/// Descending it pushes low-probability predictions up and over-confident
/// predictions back down toward the zero point.
pub fn train_grad(spec: &LossSpec, p: f64) -> Result<f64> {
    check_open_unit(p)?;
    let v = raw_value(spec.kind, p);
    if let Some((lo, hi)) = spec.clamp {
        if v < lo || v > hi {
            return Ok(0.0);
        }
    }
    let g = raw_grad(spec.kind, p);
    Ok(if v < 0.0 { -g } else { g })
}

/// The probability at which the loss crosses zero, when one exists inside
/// (0, 1). Cross entropy and focal only touch zero at the excluded boundary
/// `p = 1`.
pub fn zero_point(spec: &LossSpec) -> Option<f64> {
    match spec.kind {
        LossKind::CrossEntropy | LossKind::Focal { .. } => None,
        LossKind::Conservative { a, .. } => Some(1.0 / a),
        LossKind::Cubic1 { .. } => Some(0.5),
        LossKind::Cubic2 { .. } | LossKind::Cubic3 { .. } => Some(INV_E),
    }
}

/// Mean loss and update gradient over a per-pixel label map.
///
/// `probs` is `[h, w, k]` with each pixel's class vector summing to 1 within
/// `1e-6`; `labels` is `[h, w]` with classes in `[0, k)`. The returned
/// gradient tensor holds `d mean / d prob` (in the [`train_grad`] sense) at
/// each pixel's ground-truth channel and zero elsewhere. Where the
/// probability clamp binds, the gradient is zero.
pub fn pixelwise_loss(
    spec: &LossSpec,
    probs: &Tensor,
    labels: &Tensor,
    policy: ProbPolicy,
) -> Result<(f64, Tensor)> {
    let pshape = probs.shape();
    if pshape.len() != 3 {
        return Err(Error::Structure(format!(
            "probs must be [h, w, k], got {:?}",
            pshape
        )));
    }
    let (h, w, k) = (pshape[0], pshape[1], pshape[2]);
    if labels.shape() != [h, w] {
        return Err(Error::Structure(format!(
            "labels must be [{}, {}], got {:?}",
            h,
            w,
            labels.shape()
        )));
    }
    let n = (h * w) as f64;
    let mut grad = Tensor::zeros(&[h, w, k]);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for c in 0..k {
                sum += probs.at3(y, x, c);
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "probabilities at ({y}, {x}) sum to {sum}, expected 1"
                )));
            }
            let label = labels.label_at(y, x, k)?;
            let p_raw = probs.at3(y, x, label);
            let p = clamp_probability(p_raw, policy)?;
            total += eval_loss(spec, p)?;
            let idx = grad.idx3(y, x, label);
            // No gradient through a binding probability clamp.
            grad.data_mut()[idx] = if p_raw > policy.eps && p_raw < 1.0 - policy.eps {
                train_grad(spec, p)? / n
            } else {
                0.0
            };
        }
    }
    Ok((total / n, grad))
}
