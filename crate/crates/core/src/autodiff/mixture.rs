//! Grouped mixture negative log-likelihood as a tape operation.
//!
//! [`Tape::mixture_nll`] is the production path: one fused node whose local
//! gradients come from component responsibilities. [`Tape::mixture_nll_composed`]
//! builds the same quantity from primitive ops and serves as its oracle.

use super::{shape_err, Op, Tape, Tensor, Var};
use crate::density::{log_sum_exp, ComponentKind};
use crate::error::Result;
use crate::loss::LikelihoodSpace;
use crate::scalar::Real;
use crate::types::KeypointSet;

/// Ground truth and grouping for one image's mixture loss.
#[derive(Debug, Clone, Copy)]
pub struct MixtureTargets<'a, T> {
    /// Keypoint sets with `K_total` entries (auxiliary center included).
    pub gts: &'a [KeypointSet<T>],
    /// Keypoint index groups; the loss is averaged over them.
    pub groups: &'a [Vec<usize>],
    pub kind: ComponentKind,
    pub space: LikelihoodSpace,
}

impl<T: Real> Tape<T> {
    fn check_mixture_inputs(&self, mu: Var, gamma: Var, log_pi: Var, t: &MixtureTargets<T>) -> Result<(usize, usize)> {
        let (ms, gs, ps) = (self.shape(mu), self.shape(gamma), self.shape(log_pi));
        if ms.len() != 2 || gs != ms || ps != [ms[0]] {
            return Err(shape_err(
                "mixture_nll",
                format!("mu {ms:?}, gamma {gs:?}, log_pi {ps:?}"),
            ));
        }
        let (m, dims) = (ms[0], ms[1]);
        if t.groups.is_empty() {
            return Err(shape_err("mixture_nll", "no keypoint groups".into()));
        }
        for gt in t.gts {
            if 2 * gt.len() != dims {
                return Err(shape_err(
                    "mixture_nll",
                    format!("ground truth with {} keypoints for {dims} dims", gt.len()),
                ));
            }
        }
        if let Some(&j) = t.groups.iter().flatten().find(|&&j| 2 * j + 1 >= dims) {
            return Err(shape_err("mixture_nll", format!("group index {j} for {dims} dims")));
        }
        Ok((m, dims))
    }

    /// `(1/N_g) sum_i sum_g -ln sum_m exp(log_pi_m) F(k_i^g; mu_m, gamma_m)`.
    ///
    /// `mu` and `gamma` are `[M, 2K]`, `log_pi` is `[M]`. In
    /// [`LikelihoodSpace::LinearSingle`] the mixture sum is formed from
    /// single-precision linear densities and differentiated in single
    /// precision, so a vanishing sum gives an infinite loss or non-finite
    /// gradients.
    pub fn mixture_nll(&self, mu: Var, gamma: Var, log_pi: Var, t: &MixtureTargets<T>) -> Result<Var> {
        let (m, dims) = self.check_mixture_inputs(mu, gamma, log_pi, t)?;
        let (loss, g_mu, g_gamma, g_pi) = {
            let nodes = self.nodes.borrow();
            let mu_v = &nodes[mu.0].value.data;
            let gamma_v = &nodes[gamma.0].value.data;
            let lp = &nodes[log_pi.0].value.data;
            let mut g_mu = vec![T::zero(); m * dims];
            let mut g_gamma = vec![T::zero(); m * dims];
            let mut g_pi = vec![T::zero(); m];
            let mut loss = T::zero();
            let mut terms = vec![T::zero(); m];
            let mut resp = vec![T::zero(); m];
            let scale = T::one() / T::lit(t.groups.len() as f64);
            for gt in t.gts {
                for group in t.groups {
                    let ll = match t.space {
                        LikelihoodSpace::Log => {
                            for (c, term) in terms.iter_mut().enumerate() {
                                let mut acc = lp[c];
                                for &j in group {
                                    if !gt.is_visible(j) {
                                        continue;
                                    }
                                    for d in [2 * j, 2 * j + 1] {
                                        acc += t.kind.log_pdf(gt.dim(d), mu_v[c * dims + d], gamma_v[c * dims + d]);
                                    }
                                }
                                *term = acc;
                            }
                            let lse = log_sum_exp(&terms);
                            for (r, &term) in resp.iter_mut().zip(&terms) {
                                *r = if lse.is_finite() { (term - lse).exp() } else { T::nan() };
                            }
                            lse
                        }
                        LikelihoodSpace::LinearSingle => {
                            let mut total = 0f32;
                            let mut weighted = vec![0f32; m];
                            for (c, w) in weighted.iter_mut().enumerate() {
                                let mut f = lp[c].cast::<f32>().exp();
                                for &j in group {
                                    if !gt.is_visible(j) {
                                        continue;
                                    }
                                    for d in [2 * j, 2 * j + 1] {
                                        let lpdf = t.kind.log_pdf(
                                            gt.dim(d).cast::<f32>(),
                                            mu_v[c * dims + d].cast::<f32>(),
                                            gamma_v[c * dims + d].cast::<f32>(),
                                        );
                                        f *= lpdf.exp();
                                    }
                                }
                                *w = f;
                                total += f;
                            }
                            // d(-ln S)/dS in single precision; infinite once S < 1/f32::MAX.
                            let inv = 1f32 / total;
                            for (r, &w) in resp.iter_mut().zip(&weighted) {
                                *r = T::lit((w * inv) as f64);
                            }
                            T::lit(total.ln() as f64)
                        }
                    };
                    loss -= ll;
                    for c in 0..m {
                        let r = resp[c];
                        if r == T::zero() {
                            continue;
                        }
                        g_pi[c] -= r * scale;
                        for &j in group {
                            if !gt.is_visible(j) {
                                continue;
                            }
                            for d in [2 * j, 2 * j + 1] {
                                let i = c * dims + d;
                                let (dm, dg) = t.kind.grad_log_pdf(gt.dim(d), mu_v[i], gamma_v[i]);
                                g_mu[i] -= r * dm * scale;
                                g_gamma[i] -= r * dg * scale;
                            }
                        }
                    }
                }
            }
            (loss * scale, g_mu, g_gamma, g_pi)
        };
        let rg = self.requires(&[mu, gamma, log_pi]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Fused(vec![(mu, g_mu), (gamma, g_gamma), (log_pi, g_pi)]),
            rg,
        ))
    }

    /// The log-space grouped NLL assembled from primitive operations.
    ///
    /// Slow; exists to cross-check [`Tape::mixture_nll`]. `t.space` is
    /// ignored.
    pub fn mixture_nll_composed(&self, mu: Var, gamma: Var, log_pi: Var, t: &MixtureTargets<T>) -> Result<Var> {
        let (m, dims) = self.check_mixture_inputs(mu, gamma, log_pi, t)?;
        let mut total: Option<Var> = None;
        for gt in t.gts {
            for group in t.groups {
                let sel: Vec<usize> = group
                    .iter()
                    .filter(|&&j| gt.is_visible(j))
                    .flat_map(|&j| [2 * j, 2 * j + 1])
                    .collect();
                let terms = if sel.is_empty() {
                    log_pi
                } else {
                    let n = sel.len();
                    let idx: Vec<usize> = (0..m).flat_map(|c| sel.iter().map(move |&d| c * dims + d)).collect();
                    let mu_s = self.gather(mu, idx.clone(), vec![m, n])?;
                    let g_s = self.gather(gamma, idx, vec![m, n])?;
                    let target: Vec<T> = (0..m).flat_map(|_| sel.iter().map(|&d| gt.dim(d))).collect();
                    let k = self.constant(Tensor::new(vec![m, n], target)?);
                    let r = self.sub(k, mu_s)?;
                    let neg_log_pdf = match t.kind {
                        ComponentKind::Laplace => {
                            let a = self.abs(r);
                            let a = self.div(a, g_s)?;
                            let two_g = self.scalar_mul(g_s, T::lit(2.0));
                            let norm = self.log(two_g);
                            self.add(a, norm)?
                        }
                        ComponentKind::Gaussian => {
                            let z = self.div(r, g_s)?;
                            let z2 = self.square(z);
                            let half = self.scalar_mul(z2, T::lit(0.5));
                            let lg = self.log(g_s);
                            let lg = self.add_scalar(lg, T::lit(0.5) * (T::lit(2.0) * T::PI()).ln());
                            self.add(half, lg)?
                        }
                        ComponentKind::Cauchy => {
                            let z = self.div(r, g_s)?;
                            let z2 = self.square(z);
                            let one_plus = self.add_scalar(z2, T::one());
                            let tail = self.log(one_plus);
                            let pg = self.scalar_mul(g_s, T::PI());
                            let norm = self.log(pg);
                            self.add(tail, norm)?
                        }
                    };
                    let joint = self.sum_over(neg_log_pdf, &[1])?;
                    self.sub(log_pi, joint)?
                };
                let ll = self.logsumexp_over(terms, 0)?;
                total = Some(match total {
                    None => self.scalar_mul(ll, -T::one()),
                    Some(acc) => self.sub(acc, ll)?,
                });
            }
        }
        let total = match total {
            Some(v) => v,
            None => self.constant(Tensor::scalar(T::zero())),
        };
        Ok(self.scalar_mul(total, T::one() / T::lit(t.groups.len() as f64)))
    }
}
