//! Loss terms of the multi-view BiGAN.
//!
//! The scalar functions here take discriminator probabilities and are the
//! reference forms. Training uses the equivalent [`tape`] versions, which
//! work on logits so that `log D` and `log(1 - D)` stay finite when a
//! discriminator saturates.

use crate::error::{Error, Result};
use crate::view::LatentGaussian;

/// Closed-form `KL(N(μ₁, diag σ₁²) ‖ N(μ₂, diag σ₂²))`.
pub fn kl_diag_gaussian(p: &LatentGaussian, q: &LatentGaussian) -> Result<f64> {
    if p.dim() != q.dim() || p.log_var.len() != p.dim() || q.log_var.len() != q.dim() {
        return Err(Error::shape(format!(
            "KL between latents of dimension {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let log_ratio = p.log_var[i] - q.log_var[i];
        let diff = p.mu[i] - q.mu[i];
        acc += -1.0 - log_ratio + log_ratio.exp() + diff * diff * (-q.log_var[i]).exp();
    }
    let kl = 0.5 * acc;
    if !kl.is_finite() {
        return Err(Error::NonFinite(format!("KL divergence = {kl}")));
    }
    // Rounding can leave tiny negatives when p == q.
    Ok(kl.max(0.0))
}

fn mean_log(scores: &[f64], complement: bool) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::shape("empty score vector"));
    }
    let sum: f64 = scores
        .iter()
        .map(|&s| if complement { (1.0 - s).ln() } else { s.ln() })
        .sum();
    Ok(sum / scores.len() as f64)
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v} (saturated discriminator)")))
    }
}

/// `-mean log D(real) - mean log(1 - D(fake))`.
fn discriminator_form(what: &str, real: &[f64], fake: &[f64]) -> Result<f64> {
    finite(what, -mean_log(real, false)? - mean_log(fake, true)?)
}

/// Discriminator loss of `D1` on `(y, z_E)` (real) and `(G(z), z)` (fake) pairs.
pub fn d1_objective(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    discriminator_form("D1 loss", real_scores, fake_scores)
}

/// Discriminator loss of `D2` on `(v(s,x), z_E)` (real) and `(v(s,x), z_H)` (fake) pairs.
pub fn d2_objective(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    discriminator_form("D2 loss", real_scores, fake_scores)
}

/// Label-swapped objective of `G`, `E` and `H`: each discriminator's fake
/// pairs are scored as real and its real pairs as fake.
pub fn generator_objective(
    d1_fake: &[f64],
    d1_real: &[f64],
    d2_fake: &[f64],
    d2_real: &[f64],
) -> Result<f64> {
    let d1 = discriminator_form("generator loss (D1 part)", d1_fake, d1_real)?;
    let d2 = discriminator_form("generator loss (D2 part)", d2_fake, d2_real)?;
    finite("generator loss", d1 + d2)
}

/// `Σ_t KL(latents[t] ‖ latents[t-1])` along a nested sequence; each
/// superset distribution sits in the first slot.
pub fn sequence_kl_penalty(latents: &[LatentGaussian]) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::EmptySequence);
    }
    latents
        .windows(2)
        .map(|w| kl_diag_gaussian(&w[1], &w[0]))
        .sum()
}

/// Unassembled loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub d1_loss: f64,
    pub d2_loss: f64,
    pub gen_adv_loss: f64,
    pub enc_adv_loss: f64,
    pub kl_penalty: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub d1_loss: f64,
    pub d2_loss: f64,
    /// Generator-side adversarial term against `D1`.
    pub gen_adv_loss: f64,
    /// Generator-side adversarial term against `D2`.
    pub enc_adv_loss: f64,
    pub kl_penalty: f64,
    pub total_gen_side: f64,
}

/// Combines the parts with `total_gen_side = gen_adv + enc_adv + λ·kl`.
pub fn assemble_losses(parts: LossParts, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("λ must be finite and non-negative, got {lambda}")));
    }
    let LossParts {
        d1_loss,
        d2_loss,
        gen_adv_loss,
        enc_adv_loss,
        kl_penalty,
    } = parts;
    for (name, v) in [
        ("d1_loss", d1_loss),
        ("d2_loss", d2_loss),
        ("gen_adv_loss", gen_adv_loss),
        ("enc_adv_loss", enc_adv_loss),
        ("kl_penalty", kl_penalty),
    ] {
        finite(name, v)?;
    }
    if kl_penalty < 0.0 {
        return Err(Error::NonFinite(format!("negative KL penalty {kl_penalty}")));
    }
    let total_gen_side = if kl_penalty == 0.0 {
        gen_adv_loss + enc_adv_loss
    } else {
        gen_adv_loss + enc_adv_loss + lambda * kl_penalty
    };
    Ok(LossBreakdown {
        d1_loss,
        d2_loss,
        gen_adv_loss,
        enc_adv_loss,
        kl_penalty,
        total_gen_side: finite("total_gen_side", total_gen_side)?,
    })
}

/// Differentiable versions of the losses, recorded on a [`Graph`](crate::autodiff::Graph).
pub mod tape {
    use crate::autodiff::{Graph, Real, Var};
    use crate::netdef::Latent;

    /// `mean softplus(-real) + mean softplus(fake)`, i.e. the discriminator
    /// form evaluated on logits.
    pub fn discriminator_loss<F: Real>(g: &mut Graph<F>, real_logits: Var, fake_logits: Var) -> Var {
        let neg = g.scale(real_logits, -F::one());
        let a = g.softplus(neg);
        let a = g.mean(a);
        let b = g.softplus(fake_logits);
        let b = g.mean(b);
        g.add(a, b)
    }

    /// Label-swapped form: `fake` pairs are pushed towards the real label.
    pub fn generator_loss<F: Real>(g: &mut Graph<F>, fake_logits: Var, real_logits: Var) -> Var {
        discriminator_loss(g, fake_logits, real_logits)
    }

    /// Per-item `KL(p ‖ q)` as a `rows × 1` column.
    pub fn kl_diag<F: Real>(g: &mut Graph<F>, p: Latent, q: Latent) -> Var {
        let log_ratio = g.sub(p.log_var, q.log_var);
        let ratio = g.exp(log_ratio);
        let diff = g.sub(p.mu, q.mu);
        let sq = g.square(diff);
        let neg_lv = g.scale(q.log_var, -F::one());
        let inv_var = g.exp(neg_lv);
        let maha = g.mul(sq, inv_var);
        let t = g.sub(ratio, log_ratio);
        let t = g.add(t, maha);
        let t = g.add_scalar(t, -F::one());
        let s = g.row_sum(t);
        g.scale(s, F::lit(0.5))
    }

    /// Item-averaged `Σ_t KL(latents[t] ‖ latents[t-1])`; `None` when `L = 1`.
    pub fn sequence_kl<F: Real>(g: &mut Graph<F>, latents: &[Latent]) -> Option<Var> {
        let mut acc: Option<Var> = None;
        for w in latents.windows(2) {
            let kl = kl_diag(g, w[1], w[0]);
            acc = Some(match acc {
                Some(a) => g.add(a, kl),
                None => kl,
            });
        }
        acc.map(|a| g.mean(a))
    }
}
