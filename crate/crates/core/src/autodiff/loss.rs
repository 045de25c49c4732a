//! Fused sequence losses over (positions, vocab) logits.
//!
//! Each loss averages over the masked-in (valid) positions; an all-masked
//! input is defined as 0 with zero gradient.

use crate::autodiff::tape::{log_softmax_into, softmax_into, Tape, Var};
use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};

fn check_logits_mask(
    tape: &Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<(usize, usize, Vec<f64>)> {
    let t = tape.value(logits);
    if t.shape().len() != 2 {
        return Err(CoreError::shape("loss expects (positions, vocab) logits"));
    }
    let (m, n) = (t.rows(), t.cols());
    if targets.len() != m || mask.len() != m {
        return Err(CoreError::shape(format!(
            "loss: {} positions, {} targets, {} mask entries",
            m,
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= n) {
        return Err(CoreError::InvalidInput(format!(
            "target class {bad} outside vocab {n}"
        )));
    }
    Ok((m, n, t.data().to_vec()))
}

impl Tape {
    /// Mean negative log-likelihood over masked-in positions.
    pub fn softmax_cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        self.focal_loss(logits, targets, mask, 1.0, 0.0)
    }

    /// Focal loss: mean over valid positions of `alpha * (1-p_t)^gamma * (-ln p_t)`.
    ///
    /// `gamma = 0`, `alpha = 1` reduces exactly to softmax cross-entropy.
    pub fn focal_loss(
        &self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        if alpha <= 0.0 || gamma < 0.0 {
            return Err(CoreError::InvalidInput(format!(
                "focal loss needs alpha > 0 (got {alpha}) and gamma >= 0 (got {gamma})"
            )));
        }
        let (m, n, lv) = check_logits_mask(self, logits, targets, mask)?;
        let valid: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
        if valid.is_empty() {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let count = valid.len() as f64;

        let mut logp = vec![0.0; m * n];
        for &i in &valid {
            log_softmax_into(&lv[i * n..(i + 1) * n], &mut logp[i * n..(i + 1) * n]);
        }
        let mut total = 0.0;
        for &i in &valid {
            let lp = logp[i * n + targets[i]];
            let p = lp.exp();
            total += alpha * (1.0 - p).powf(gamma) * (-lp);
        }
        let value = total / count;

        let rg = self.var_requires_grad(logits);
        let targets_owned = targets.to_vec();
        let back = if rg {
            Some(move |g: &[f64], ga: &mut [f64]| {
                let scale = g[0] / count;
                for &i in &valid {
                    let t = targets_owned[i];
                    let lp_row = &logp[i * n..(i + 1) * n];
                    let lp = lp_row[t];
                    let p = lp.exp();
                    let u = 1.0 - p;
                    // L = alpha * u^gamma * (-ln p)
                    // dL/dp = alpha * (gamma * u^(gamma-1) * ln p - u^gamma / p)
                    // dp/dz_j = p * (delta_tj - q_j)
                    let dl_dp = if gamma == 0.0 {
                        -alpha / p
                    } else if u <= 0.0 {
                        0.0 // perfectly classified: zero gradient in the limit
                    } else {
                        alpha * (gamma * u.powf(gamma - 1.0) * lp - u.powf(gamma) / p)
                    };
                    for j in 0..n {
                        let q = lp_row[j].exp();
                        let delta = if j == t { 1.0 } else { 0.0 };
                        ga[i * n + j] += scale * dl_dp * p * (delta - q);
                    }
                }
            })
        } else {
            None
        };
        Ok(self.push_scalar_loss(logits, value, back))
    }

    /// Temperature-scaled KL divergence `KL(softmax(p/tau) || softmax(q/tau)) * tau^2`,
    /// averaged over masked-in positions. Differentiable in both operands;
    /// detach the teacher side with [`Tape::detach`] when it must stay frozen.
    pub fn kl_masked(&self, p_logits: Var, q_logits: Var, mask: &[bool], tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(CoreError::InvalidInput(format!("temperature {tau} <= 0")));
        }
        let (tp, tq) = (self.value(p_logits), self.value(q_logits));
        if tp.shape() != tq.shape() || tp.shape().len() != 2 {
            return Err(CoreError::shape(format!(
                "kl_masked: {:?} vs {:?}",
                tp.shape(),
                tq.shape()
            )));
        }
        let (m, n) = (tp.rows(), tp.cols());
        if mask.len() != m {
            return Err(CoreError::shape("kl_masked: mask length"));
        }
        let valid: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
        if valid.is_empty() {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let count = valid.len() as f64;

        let pv = tp.data();
        let qv = tq.data();
        let mut p_probs = vec![0.0; m * n];
        let mut p_logp = vec![0.0; m * n];
        let mut q_logp = vec![0.0; m * n];
        let mut scaled = vec![0.0; n];
        for &i in &valid {
            for j in 0..n {
                scaled[j] = pv[i * n + j] / tau;
            }
            softmax_into(&scaled, &mut p_probs[i * n..(i + 1) * n]);
            log_softmax_into(&scaled, &mut p_logp[i * n..(i + 1) * n]);
            for j in 0..n {
                scaled[j] = qv[i * n + j] / tau;
            }
            log_softmax_into(&scaled, &mut q_logp[i * n..(i + 1) * n]);
        }

        let mut per_pos = vec![0.0; m];
        let mut total = 0.0;
        for &i in &valid {
            let mut kl = 0.0;
            for j in 0..n {
                let idx = i * n + j;
                kl += p_probs[idx] * (p_logp[idx] - q_logp[idx]);
            }
            per_pos[i] = kl;
            total += kl;
        }
        let value = total / count * tau * tau;

        let rg_p = self.var_requires_grad(p_logits);
        let rg_q = self.var_requires_grad(q_logits);
        if !rg_p && !rg_q {
            return Ok(self.constant(Tensor::scalar(value)));
        }
        // dV/dzp_j = (tau / count) * P_j * ((logP - logQ)_j - KL_pos)
        // dV/dzq_j = (tau / count) * (Q_j - P_j)
        let back_both = move |g: &[f64], gp: Option<&mut [f64]>, gq: Option<&mut [f64]>| {
            let scale = g[0] * tau / count;
            if let Some(gp) = gp {
                for &i in &valid {
                    let kl = per_pos[i];
                    for j in 0..n {
                        let idx = i * n + j;
                        gp[idx] +=
                            scale * p_probs[idx] * (p_logp[idx] - q_logp[idx] - kl);
                    }
                }
            }
            if let Some(gq) = gq {
                for &i in &valid {
                    for j in 0..n {
                        let idx = i * n + j;
                        gq[idx] += scale * (q_logp[idx].exp() - p_probs[idx]);
                    }
                }
            }
        };
        Ok(self.push_scalar_loss2(p_logits, q_logits, value, back_both))
    }

    /// Symmetric KL between two dropout-perturbed passes:
    /// `0.5 * [KL(P1||P2) + KL(P2||P1)]` over masked-in positions.
    pub fn symmetric_kl(&self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        let ab = self.kl_masked(a, b, mask, 1.0)?;
        let ba = self.kl_masked(b, a, mask, 1.0)?;
        let s = self.add(ab, ba)?;
        Ok(self.scale(s, 0.5))
    }

    /// Mean absolute difference between two same-shape tensors.
    pub fn l1_loss(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(CoreError::shape(format!(
                "l1_loss: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = ta.numel() as f64;
        let value = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / n;
        let av = ta.data().to_vec();
        let bv = tb.data().to_vec();
        let back = move |g: &[f64], gp: Option<&mut [f64]>, gq: Option<&mut [f64]>| {
            let scale = g[0] / n;
            if let Some(gp) = gp {
                for (i, (&x, &y)) in av.iter().zip(&bv).enumerate() {
                    gp[i] += scale * (x - y).signum_or_zero();
                }
            }
            if let Some(gq) = gq {
                for (i, (&x, &y)) in av.iter().zip(&bv).enumerate() {
                    gq[i] -= scale * (x - y).signum_or_zero();
                }
            }
        };
        Ok(self.push_scalar_loss2(a, b, value, back))
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
