//! Log-space evaluation of component, joint and mixture densities.
//!
//! Every production path works with log-densities and combines components
//! through [`log_sum_exp`]. Linear-space evaluation only exists inside
//! [`underflow_ratio`], which measures how often the linear-space joint
//! density would round to zero at a given precision.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::scalar::{Precision, Real};
use crate::types::{GroupPartition, KeypointSet, MixtureField};

/// Per-dimension component distribution. `gamma` is the Laplace scale, the
/// Gaussian standard deviation and the Cauchy scale respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ComponentKind {
    #[default]
    Laplace,
    Gaussian,
    Cauchy,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [
        ComponentKind::Laplace,
        ComponentKind::Gaussian,
        ComponentKind::Cauchy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Laplace => "laplace",
            ComponentKind::Gaussian => "gaussian",
            ComponentKind::Cauchy => "cauchy",
        }
    }

    /// Log-density without argument checks; `gamma` must be positive.
    #[inline]
    pub fn log_pdf<T: Real>(self, x: T, mu: T, gamma: T) -> T {
        let r = x - mu;
        match self {
            ComponentKind::Laplace => -(T::lit(2.0) * gamma).ln() - r.abs() / gamma,
            ComponentKind::Gaussian => {
                let z = r / gamma;
                -T::lit(0.5) * (T::lit(2.0) * T::PI() * gamma * gamma).ln() - T::lit(0.5) * z * z
            }
            ComponentKind::Cauchy => {
                let z = r / gamma;
                -(T::PI() * gamma).ln() - (z * z).ln_1p()
            }
        }
    }

    /// Partial derivatives of [`ComponentKind::log_pdf`] with respect to
    /// `mu` and `gamma`. The Laplace kink at `x == mu` uses subgradient 0.
    #[inline]
    pub fn grad_log_pdf<T: Real>(self, x: T, mu: T, gamma: T) -> (T, T) {
        let r = x - mu;
        let inv = gamma.recip();
        match self {
            ComponentKind::Laplace => {
                let sign = if r > T::zero() {
                    T::one()
                } else if r < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                (sign * inv, -inv + r.abs() * inv * inv)
            }
            ComponentKind::Gaussian => {
                let z = r * inv;
                (z * inv, -inv + z * z * inv)
            }
            ComponentKind::Cauchy => {
                let z = r * inv;
                let w = T::lit(2.0) * z / (T::one() + z * z);
                (w * inv, -inv + w * z * inv)
            }
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "laplace" => Ok(ComponentKind::Laplace),
            "gaussian" | "normal" => Ok(ComponentKind::Gaussian),
            "cauchy" => Ok(ComponentKind::Cauchy),
            other => Err(Error::Parse(format!("unknown component kind `{other}`"))),
        }
    }
}

/// Ordered, duplicate-free set of keypoint indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimSelection {
    indices: Vec<usize>,
}

impl DimSelection {
    pub fn new(indices: Vec<usize>, k_total: usize) -> Result<Self> {
        let mut seen = vec![false; k_total];
        for &j in &indices {
            if j >= k_total {
                return Err(invalid(format!("keypoint index {j} >= {k_total}")));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(invalid(format!("keypoint index {j} selected twice")));
            }
        }
        Ok(Self { indices })
    }

    pub fn full(k_total: usize) -> Self {
        Self {
            indices: (0..k_total).collect(),
        }
    }

    /// The first `k` indices, `0..k`.
    pub fn prefix(k: usize) -> Self {
        Self::full(k)
    }

    /// One selection per group of a partition.
    pub fn from_partition(p: &GroupPartition) -> Vec<Self> {
        p.groups()
            .iter()
            .map(|g| Self { indices: g.clone() })
            .collect()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn log_pdf_1d<T: Real>(kind: ComponentKind, x: T, mu: T, gamma: T) -> Result<T> {
    if !(gamma > T::zero()) {
        return Err(Error::NonPositiveScale(gamma.as_f64()));
    }
    Ok(kind.log_pdf(x, mu, gamma))
}

#[inline]
pub(crate) fn joint_log_pdf_unchecked<T: Real>(
    kind: ComponentKind,
    k: &KeypointSet<T>,
    mu: &[T],
    gamma: &[T],
    sel: &[usize],
) -> T {
    let mut acc = T::zero();
    for &j in sel {
        if !k.is_visible(j) {
            continue;
        }
        let [x, y] = k.coords()[j];
        acc += kind.log_pdf(x, mu[2 * j], gamma[2 * j]);
        acc += kind.log_pdf(y, mu[2 * j + 1], gamma[2 * j + 1]);
    }
    acc
}

/// Sum of per-dimension log-densities over the selected, visible keypoints.
///
/// Unlabeled keypoints are marginalized out, so they contribute nothing.
pub fn joint_log_pdf<T: Real>(
    kind: ComponentKind,
    k: &KeypointSet<T>,
    mu: &[T],
    gamma: &[T],
    sel: &DimSelection,
) -> Result<T> {
    let need = sel.indices().iter().map(|&j| 2 * j + 2).max().unwrap_or(0);
    if mu.len() < need || gamma.len() < need || k.len() * 2 < need {
        return Err(invalid(format!(
            "selection needs {need} dims; have mu {}, gamma {}, keypoints {}",
            mu.len(),
            gamma.len(),
            2 * k.len()
        )));
    }
    for &j in sel.indices() {
        for d in [2 * j, 2 * j + 1] {
            if !(gamma[d] > T::zero()) {
                return Err(Error::NonPositiveScale(gamma[d].as_f64()));
            }
        }
    }
    Ok(joint_log_pdf_unchecked(kind, k, mu, gamma, sel.indices()))
}

/// `ln(sum(exp(xs)))`, shifting by the maximum. Empty input gives `-inf`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

fn check_inputs<T: Real>(field: &MixtureField<T>, gt: &KeypointSet<T>, sel: &DimSelection) -> Result<()> {
    if sel.is_empty() {
        return Err(invalid("empty keypoint selection"));
    }
    let k = field.num_keypoints();
    if gt.len() != k {
        return Err(invalid(format!("ground truth has {} keypoints, field has {k}", gt.len())));
    }
    if let Some(&j) = sel.indices().iter().find(|&&j| j >= k) {
        return Err(invalid(format!("selected keypoint {j} >= {k}")));
    }
    Ok(())
}

/// `ln pi_m + ln F(k; mu_m, gamma_m)` for every component.
pub fn component_log_terms<T: Real>(
    field: &MixtureField<T>,
    gt: &KeypointSet<T>,
    sel: &DimSelection,
    kind: ComponentKind,
) -> Result<Vec<T>> {
    check_inputs(field, gt, sel)?;
    Ok(component_log_terms_unchecked(field, gt, sel.indices(), kind))
}

pub(crate) fn component_log_terms_unchecked<T: Real>(
    field: &MixtureField<T>,
    gt: &KeypointSet<T>,
    sel: &[usize],
    kind: ComponentKind,
) -> Vec<T> {
    (0..field.num_components())
        .map(|m| {
            let pi = field.pi()[m];
            if pi > T::zero() {
                pi.ln() + joint_log_pdf_unchecked(kind, gt, field.mu(m), field.gamma(m), sel)
            } else {
                T::neg_infinity()
            }
        })
        .collect()
}

/// `ln sum_m pi_m F(k_sel; mu_m, gamma_m)`, evaluated by log-sum-exp.
pub fn mixture_log_likelihood<T: Real>(
    field: &MixtureField<T>,
    gt: &KeypointSet<T>,
    sel: &DimSelection,
    kind: ComponentKind,
) -> Result<T> {
    let terms = component_log_terms(field, gt, sel, kind)?;
    if field.pi().iter().all(|&p| p == T::zero()) {
        return Err(Error::ZeroMixture);
    }
    Ok(log_sum_exp(&terms))
}

/// Posterior weight of each component for one ground truth; sums to 1.
pub fn responsibilities<T: Real>(
    field: &MixtureField<T>,
    gt: &KeypointSet<T>,
    sel: &DimSelection,
    kind: ComponentKind,
) -> Result<Vec<T>> {
    let terms = component_log_terms(field, gt, sel, kind)?;
    if field.pi().iter().all(|&p| p == T::zero()) {
        return Err(Error::ZeroMixture);
    }
    let total = log_sum_exp(&terms);
    Ok(terms.iter().map(|&t| (t - total).exp()).collect())
}

/// Linear-space joint density at precision `P`.
///
/// Parameters are rounded to `P`, the log-density is accumulated in `P`, and
/// the result is flushed to exactly zero when it falls below the smallest
/// positive subnormal of `P`.
pub fn linear_joint_pdf<P: Real, T: Real>(
    kind: ComponentKind,
    gt: &KeypointSet<T>,
    mu: &[T],
    gamma: &[T],
    sel: &[usize],
) -> P {
    let mut acc = P::zero();
    for &j in sel {
        if !gt.is_visible(j) {
            continue;
        }
        for d in [2 * j, 2 * j + 1] {
            acc += kind.log_pdf(gt.dim(d).cast::<P>(), mu[d].cast::<P>(), gamma[d].cast::<P>());
        }
    }
    if acc < P::ln_min_positive_subnormal() || acc.is_nan() {
        P::zero()
    } else {
        acc.exp().max(P::min_positive_subnormal())
    }
}

/// Fraction of (ground truth, component) pairs whose linear-space joint
/// density over `sel` rounds to zero at precision `P`.
///
/// Returns 0 for an empty `gts`.
pub fn underflow_ratio<P: Real, T: Real>(
    field: &MixtureField<T>,
    gts: &[KeypointSet<T>],
    sel: &DimSelection,
    kind: ComponentKind,
) -> f64 {
    let mut zero = 0usize;
    let mut total = 0usize;
    for gt in gts {
        for m in 0..field.num_components() {
            let p: P = linear_joint_pdf(kind, gt, field.mu(m), field.gamma(m), sel.indices());
            total += 1;
            if p == P::zero() {
                zero += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        zero as f64 / total as f64
    }
}

/// [`underflow_ratio`] with the precision chosen at runtime.
pub fn underflow_ratio_at<T: Real>(
    precision: Precision,
    field: &MixtureField<T>,
    gts: &[KeypointSet<T>],
    sel: &DimSelection,
    kind: ComponentKind,
) -> f64 {
    match precision {
        Precision::Single => underflow_ratio::<f32, T>(field, gts, sel, kind),
        Precision::Double => underflow_ratio::<f64, T>(field, gts, sel, kind),
    }
}

/// One `K_g,kind,precision,ratio` CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnderflowRow {
    pub k_g: usize,
    pub kind: ComponentKind,
    pub precision: Precision,
    pub ratio: f64,
}

impl UnderflowRow {
    pub const CSV_HEADER: &'static str = "K_g,kind,precision,ratio";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.k_g, self.kind, self.precision, self.ratio)
    }
}
