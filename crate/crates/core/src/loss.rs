//! Weighted InfoNCE over an interleaved `[2N, d]` projection matrix.
//!
//! Rows `2i` and `2i + 1` (zero-based) are the two views of pair `i`. For a
//! row `a` with partner `b`,
//! `l(a, b) = −s_ab/τ + log Σ_{k≠a} exp(s_ak/τ)`: the partner is part of the
//! denominator, the row itself is not. The pair loss is
//! `L_i = l(2i, 2i+1) + l(2i+1, 2i)` and the batch loss is
//! `(1/2N) Σ w_i L_i`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Norm floor for cosine similarity.
pub const COS_EPS: f64 = 1e-12;

/// `a·b / (max(|a|, ε) · max(|b|, ε))`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_sim on vectors of different length");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COS_EPS);
    dot / (na * nb)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Maps `Z: [2N, d]` to the pair losses `[N]`.
#[derive(Debug)]
pub struct InfoNce {
    pub tau: f64,
}

struct Normalized {
    u: Vec<f64>,
    norms: Vec<f64>,
    rows: usize,
    dim: usize,
}

fn normalize(z: &Tensor) -> Result<Normalized> {
    if z.rank() != 2 || z.shape()[0] < 2 || !z.shape()[0].is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "InfoNCE needs a [2N, d] matrix with N >= 1, got {:?}",
            z.shape()
        )));
    }
    let (rows, dim) = (z.shape()[0], z.shape()[1]);
    let mut u = Vec::with_capacity(rows * dim);
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = z.row(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = n.max(COS_EPS);
        u.extend(row.iter().map(|x| x / scale));
        norms.push(n);
    }
    Ok(Normalized { u, norms, rows, dim })
}

impl Normalized {
    fn row(&self, r: usize) -> &[f64] {
        &self.u[r * self.dim..(r + 1) * self.dim]
    }

    fn sims(&self) -> Vec<f64> {
        let n = self.rows;
        let mut s = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let v: f64 = self.row(a).iter().zip(self.row(b)).map(|(x, y)| x * y).sum();
                s[a * n + b] = v;
                s[b * n + a] = v;
            }
        }
        s
    }
}

/// Softmax row over `k ≠ a` of `s_ak / τ` and the loss `l(a, partner)`.
fn row_terms(s: &[f64], rows: usize, a: usize, tau: f64) -> (Vec<f64>, f64) {
    let partner = a ^ 1;
    let logits: Vec<f64> = (0..rows).map(|k| s[a * rows + k] / tau).collect();
    let max = (0..rows)
        .filter(|&k| k != a)
        .map(|k| logits[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; rows];
    let mut denom = 0.0;
    for k in (0..rows).filter(|&k| k != a) {
        p[k] = (logits[k] - max).exp();
        denom += p[k];
    }
    for v in p.iter_mut() {
        *v /= denom;
    }
    let lse = max + denom.ln();
    (p, lse - logits[partner])
}

impl CustomOp for InfoNce {
    fn name(&self) -> &'static str {
        "info_nce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_tau(self.tau)?;
        let nz = normalize(inputs[0])?;
        let s = nz.sims();
        let rows = nz.rows;
        let mut out = vec![0.0; rows / 2];
        for a in 0..rows {
            out[a / 2] += row_terms(&s, rows, a, self.tau).1;
        }
        Tensor::new(vec![rows / 2], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let z = inputs[0];
        let nz = normalize(z)?;
        let s = nz.sims();
        let (rows, dim) = (nz.rows, nz.dim);
        // gs[a][k] = d(sum_i g_i L_i) / d s_ak, for the occurrence of s in row a
        let mut gs = vec![0.0; rows * rows];
        for a in 0..rows {
            let g = grad.data()[a / 2];
            let (p, _) = row_terms(&s, rows, a, self.tau);
            for k in (0..rows).filter(|&k| k != a) {
                let target = if k == a ^ 1 { 1.0 } else { 0.0 };
                gs[a * rows + k] = g * (p[k] - target) / self.tau;
            }
        }
        let mut gz = vec![0.0; rows * dim];
        for a in 0..rows {
            // s_ak = u_a·u_k appears in row a and (as s_ka) in row k
            let mut du = vec![0.0; dim];
            for k in 0..rows {
                let c = gs[a * rows + k] + gs[k * rows + a];
                if c != 0.0 {
                    for (d, uk) in du.iter_mut().zip(nz.row(k)) {
                        *d += c * uk;
                    }
                }
            }
            let ua = nz.row(a);
            let norm = nz.norms[a];
            let out = &mut gz[a * dim..(a + 1) * dim];
            if norm > COS_EPS {
                let proj: f64 = du.iter().zip(ua).map(|(d, u)| d * u).sum();
                for ((o, d), u) in out.iter_mut().zip(&du).zip(ua) {
                    *o = (d - u * proj) / norm;
                }
            } else {
                for (o, d) in out.iter_mut().zip(&du) {
                    *o = d / COS_EPS;
                }
            }
        }
        Ok(vec![Some(Tensor::new(z.shape().to_vec(), gz)?)])
    }
}

/// Pair losses `[N]` on a tape.
pub fn pairwise_losses_on(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    tape.custom(Arc::new(InfoNce { tau }), &[z])
}

pub fn pairwise_losses(z: &Tensor, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(InfoNce { tau }.forward(&[z])?.into_data())
}

/// `(1/2N) Σ w_i L_i` on a tape; `w` may be `[N]` or `[N, 1]`.
pub fn weighted_infonce_on(tape: &mut Tape, z: Var, w: Var, tau: f64) -> Result<Var> {
    let l = pairwise_losses_on(tape, z, tau)?;
    let n = tape.value(l)?.len();
    let wshape = tape.value(w)?.shape().to_vec();
    if wshape.iter().product::<usize>() != n || !(wshape == [n] || wshape == [n, 1]) {
        return Err(Error::ShapeMismatch {
            op: "weighted_infonce",
            left: vec![n],
            right: wshape,
        });
    }
    let w = if wshape.len() == 2 { tape.reshape(w, &[n])? } else { w };
    let wl = tape.mul(l, w)?;
    let total = tape.sum(wl)?;
    tape.mul_scalar(total, 1.0 / (2 * n) as f64)
}

/// Unweighted loss on a tape.
pub fn validation_loss_on(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let l = pairwise_losses_on(tape, z, tau)?;
    let n = tape.value(l)?.len();
    let total = tape.sum(l)?;
    tape.mul_scalar(total, 1.0 / (2 * n) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_pair: Vec<f64>,
    pub weights: Vec<f64>,
    pub tau: f64,
}

pub fn weighted_infonce(z: &Tensor, weights: &[f64], tau: f64) -> Result<LossBreakdown> {
    let per_pair = pairwise_losses(z, tau)?;
    if weights.len() != per_pair.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_infonce",
            left: vec![per_pair.len()],
            right: vec![weights.len()],
        });
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { op: "weighted_infonce" });
    }
    let n = per_pair.len();
    let sum: f64 = weights.iter().zip(&per_pair).map(|(w, l)| w * l).sum();
    Ok(LossBreakdown {
        total: sum * (1.0 / (2 * n) as f64),
        per_pair,
        weights: weights.to_vec(),
        tau,
    })
}

pub fn validation_loss(z: &Tensor, tau: f64) -> Result<f64> {
    let n = z.shape().first().copied().unwrap_or(0) / 2;
    Ok(weighted_infonce(z, &vec![1.0; n], tau)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn single_pair_is_zero() {
        let z = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(pairwise_losses(&z, 0.5).unwrap(), vec![0.0]);
        assert_eq!(validation_loss(&z, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_two_log_three() {
        let z = Tensor::full(&[4, 3], 0.7);
        for l in pairwise_losses(&z, 0.5).unwrap() {
            assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_act_linearly() {
        let mut rng = Rng::new(5);
        let z = Tensor::new(vec![6, 4], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let base = weighted_infonce(&z, &[1.0, 0.5, 2.0], 0.5).unwrap();
        let bumped = weighted_infonce(&z, &[1.0, 1.0, 2.0], 0.5).unwrap();
        let expect = base.per_pair[1] * 0.5 / 6.0;
        assert!((bumped.total - base.total - expect).abs() < 1e-14);
        assert_eq!(weighted_infonce(&z, &[0.0; 3], 0.5).unwrap().total, 0.0);
        assert!(weighted_infonce(&z, &[1.0; 2], 0.5).is_err());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let z = Tensor::ones(&[4, 2]);
        assert!(pairwise_losses(&z, 0.0).is_err());
        assert!(pairwise_losses(&Tensor::ones(&[3, 2]), 0.5).is_err());
    }

    #[test]
    fn stable_for_huge_norms_and_low_temperature() {
        let mut rng = Rng::new(6);
        let z = Tensor::new(vec![8, 4], (0..32).map(|_| rng.normal() * 1e6).collect()).unwrap();
        let l = pairwise_losses(&z, 0.05).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
    }
}
