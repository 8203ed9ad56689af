//! Gaussian priors over the flow latents, training loss and scores.
//!
//! `z_c ~ N(0, I)` for every velocity-invariant part. The domain latent
//! `z_d ~ N(k·v, I)` when the prior is constrained, `N(0, I)` otherwise.

use std::f64::consts::PI;

use nfad_autodiff::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{LatentBundle, LatentVars};

/// Default velocity scale `k` of the domain prior mean.
pub const DEFAULT_K: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub k: f64,
    /// When false, `z_d` shares the unit-normal prior with `z_c`.
    pub constrained: bool,
}

impl PriorConfig {
    pub fn constrained(k: f64) -> Self {
        PriorConfig {
            k,
            constrained: true,
        }
    }

    pub fn unconstrained() -> Self {
        PriorConfig {
            k: DEFAULT_K,
            constrained: false,
        }
    }

    pub fn domain_mean(&self, velocity: f64) -> f64 {
        if self.constrained {
            self.k * velocity
        } else {
            0.0
        }
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::constrained(DEFAULT_K)
    }
}

/// `Σ ln N(z_i; mean, 1)`.
pub fn gaussian_logpdf<T: Scalar>(z: impl IntoIterator<Item = T>, mean: f64) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    z.into_iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            -0.5 * d * d - half_ln_2pi
        })
        .sum()
}

/// Per-sample decomposition of `log p(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub log_p_zc: f64,
    pub log_p_zd: f64,
    pub log_det: f64,
}

impl ScoreBreakdown {
    pub fn log_p_z0(&self) -> f64 {
        self.log_p_zc + self.log_p_zd
    }

    pub fn log_p_x(&self) -> f64 {
        self.log_p_zc + self.log_p_zd + self.log_det
    }

    pub fn nll(&self) -> f64 {
        -self.log_p_x()
    }

    /// Velocity-invariant anomaly score `−ln p(z_c)`.
    pub fn invariant_score(&self) -> f64 {
        -self.log_p_zc
    }
}

/// Score breakdown for every sample of a bundle. `velocities` gives each
/// sample's domain-prior mean; `None` uses the zero-mean prior for `z_d`.
pub fn breakdown<T: Scalar>(
    bundle: &LatentBundle<T>,
    prior: &PriorConfig,
    velocities: Option<&[f64]>,
) -> Result<Vec<ScoreBreakdown>> {
    let n = bundle.batch();
    if prior.constrained && velocities.is_none() {
        return Err(Error::Contract(
            "a constrained prior needs velocities".into(),
        ));
    }
    if let Some(v) = velocities {
        if v.len() != n {
            return Err(Error::Input(format!(
                "{} velocities for a batch of {n}",
                v.len()
            )));
        }
    }
    Ok((0..n)
        .map(|i| {
            let mean = velocities.map_or(0.0, |v| prior.domain_mean(v[i]));
            ScoreBreakdown {
                log_p_zc: gaussian_logpdf(bundle.zc_sample(i), 0.0),
                log_p_zd: gaussian_logpdf(bundle.zd_sample(i).iter().copied(), mean),
                log_det: bundle.log_det_sample(i).as_f64(),
            }
        })
        .collect())
}

/// Velocity-invariant anomaly scores `−ln p(z_c)`, one per sample.
pub fn invariant_scores<T: Scalar>(bundle: &LatentBundle<T>) -> Vec<f64> {
    (0..bundle.batch())
        .map(|i| -gaussian_logpdf(bundle.zc_sample(i), 0.0))
        .collect()
}

/// Full negative log-likelihood under the zero-mean prior, one per sample.
pub fn full_nll_scores<T: Scalar>(bundle: &LatentBundle<T>) -> Vec<f64> {
    let unit = PriorConfig::unconstrained();
    breakdown(bundle, &unit, None)
        .expect("no velocities")
        .iter()
        .map(ScoreBreakdown::nll)
        .collect()
}

/// `mean(z_d) / k` for each sample.
pub fn estimate_velocity<T: Scalar>(
    bundle: &LatentBundle<T>,
    prior: &PriorConfig,
) -> Result<Vec<f64>> {
    if !prior.constrained {
        return Err(Error::Contract(
            "velocity estimates need a constrained prior".into(),
        ));
    }
    if prior.k == 0.0 {
        return Err(Error::Contract("velocity scale k is zero".into()));
    }
    Ok((0..bundle.batch())
        .map(|i| {
            let z = bundle.zd_sample(i);
            let mean = z.iter().map(|v| v.as_f64()).sum::<f64>() / z.len() as f64;
            mean / prior.k
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
}

/// Combine per-patch scores into one clip score.
pub fn clip_score(patch_scores: &[f64], how: Aggregation) -> Result<f64> {
    if patch_scores.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty clip".into()));
    }
    Ok(match how {
        Aggregation::Mean => patch_scores.iter().sum::<f64>() / patch_scores.len() as f64,
        Aggregation::Max => patch_scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Batch-mean negative log-likelihood as a scalar on `tape`.
pub fn nll_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    latents: &LatentVars,
    prior: &PriorConfig,
    velocities: &[f64],
) -> Result<Var> {
    let n = tape.dims(latents.zd)[0];
    if velocities.len() != n {
        return Err(Error::Input(format!(
            "{} velocities for a batch of {n}",
            velocities.len()
        )));
    }
    let mut dims = 0usize;
    let mut sq_total: Option<Var> = None;
    let mut push = |tape: &mut Tape<T>, z: Var| -> Result<()> {
        dims += tape.dims(z)[1..].iter().product::<usize>();
        let sq = tape.mul(z, z)?;
        let s = tape.sum(sq)?;
        sq_total = Some(match sq_total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
        Ok(())
    };
    for &z in &latents.zc {
        push(tape, z)?;
    }
    let zd_dims = tape.dims(latents.zd).to_vec();
    let per = zd_dims[1..].iter().product::<usize>();
    let means: Vec<T> = velocities
        .iter()
        .flat_map(|&v| std::iter::repeat(T::of(prior.domain_mean(v))).take(per))
        .collect();
    let mean = tape.constant(Tensor::new(zd_dims, means)?);
    let centered = tape.sub(latents.zd, mean)?;
    push(tape, centered)?;

    // −ln p = ½Σz² + (D/2)ln 2π − log_det, averaged over the batch
    let sq_total = sq_total.expect("at least z_d");
    let half_sq = tape.scale(sq_total, 0.5)?;
    let ld = tape.sum(latents.log_det)?;
    let total = tape.sub(half_sq, ld)?;
    let mean_loss = tape.scale(total, 1.0 / n as f64)?;
    Ok(tape.add_scalar(mean_loss, 0.5 * dims as f64 * (2.0 * PI).ln())?)
}
