//! Fully connected VAE baseline with a supervised first latent.
//!
//! Loss: `recon + β·kld + γ·(μ₀ − k_vae·v)²`, where `recon` is the mean
//! squared error over input dimensions and `kld` the closed-form divergence
//! from the unit normal.

use nfad_autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub beta: f64,
    pub gamma: f64,
    /// `k_vae`; 1.0 regresses on raw mm/s.
    pub velocity_scale: f64,
}

impl VaeConfig {
    pub fn new(input_dim: usize, gamma: f64) -> Self {
        VaeConfig {
            input_dim,
            hidden: 128,
            latent: 8,
            beta: 1.0,
            gamma,
            velocity_scale: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config(format!("degenerate VAE shape {self:?}")));
        }
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("β and γ must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel<T> {
    config: VaeConfig,
    params: ParamStore<T>,
    encoder: Vec<Linear>,
    mean_head: Linear,
    logvar_head: Linear,
    decoder: Vec<Linear>,
}

/// Tape variables of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VaeVars {
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// Batch-mean loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VaeLossBreakdown {
    pub recon: f64,
    pub kld: f64,
    pub sup: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub recon: Var,
    pub kld: Var,
    pub sup: Option<Var>,
    pub total: Var,
}

impl<T: Scalar> VaeModel<T> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h, l) = (config.input_dim, config.hidden, config.latent);
        let mut layer = |name: String, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / fan_in as f64).sqrt() * 0.5;
            let w = Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.gen_range(-bound..bound)));
            Linear {
                weight: params.add(format!("{name}.weight"), w),
                bias: params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            }
        };
        let encoder = (0..4)
            .map(|i| layer(format!("encoder.fc{i}"), if i == 0 { d } else { h }, h))
            .collect();
        let mean_head = layer("encoder.mean".into(), h, l);
        let logvar_head = layer("encoder.logvar".into(), h, l);
        let decoder = (0..5)
            .map(|i| {
                let fan_in = if i == 0 { l } else { h };
                let fan_out = if i == 4 { d } else { h };
                layer(format!("decoder.fc{i}"), fan_in, fan_out)
            })
            .collect();
        Ok(VaeModel {
            config,
            params,
            encoder,
            mean_head,
            logvar_head,
            decoder,
        })
    }

    pub fn from_params(config: VaeConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "expected {} VAE tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, expect), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || expect.dims() != got.dims() {
                return Err(Error::Data(format!(
                    "VAE tensor mismatch: expected {name} {:?}, found {got_name} {:?}",
                    expect.dims(),
                    got.dims()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn linear(&self, tape: &mut Tape<T>, vars: &[Var], l: Linear, x: Var) -> Result<Var> {
        let n = tape.dims(x)[0];
        let y = tape.matmul(x, vars[l.weight.index()])?;
        let b = tape.broadcast(vars[l.bias.index()], &[n], &[])?;
        Ok(tape.add(y, b)?)
    }

    /// `x (n, input_dim)`, `noise (n, latent)`; `z = μ + exp(½ logσ²) ⊙ noise`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        noise: &Tensor<T>,
    ) -> Result<VaeVars> {
        let d = tape.dims(x).to_vec();
        if d.len() != 2 || d[1] != self.config.input_dim {
            return Err(Error::Input(format!(
                "VAE expects (n,{}) input, got {d:?}",
                self.config.input_dim
            )));
        }
        if noise.dims() != [d[0], self.config.latent] {
            return Err(Error::Input(format!(
                "noise must be ({},{}), got {:?}",
                d[0],
                self.config.latent,
                noise.dims()
            )));
        }
        let mut h = x;
        for &l in &self.encoder {
            h = self.linear(tape, vars, l, h)?;
            h = tape.relu(h)?;
        }
        let mu = self.linear(tape, vars, self.mean_head, h)?;
        let logvar = self.linear(tape, vars, self.logvar_head, h)?;
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let eps = tape.constant(noise.clone());
        let spread = tape.mul(std, eps)?;
        let mut z = tape.add(mu, spread)?;
        for (i, &l) in self.decoder.iter().enumerate() {
            z = self.linear(tape, vars, l, z)?;
            if i + 1 < self.decoder.len() {
                z = tape.relu(z)?;
            }
        }
        Ok(VaeVars {
            recon: z,
            mu,
            logvar,
        })
    }

    /// Batch-mean loss terms on `tape`.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        out: &VaeVars,
        velocities: Option<&[f64]>,
    ) -> Result<VaeLossVars> {
        let n = tape.dims(x)[0];
        let inv_n = 1.0 / n as f64;

        let diff = tape.sub(out.recon, x)?;
        let sq = tape.mul(diff, diff)?;
        let recon = tape.mean(sq)?;

        // ½ Σ (μ² + σ² − ln σ² − 1)
        let mu2 = tape.mul(out.mu, out.mu)?;
        let var = tape.exp(out.logvar)?;
        let a = tape.add(mu2, var)?;
        let b = tape.sub(a, out.logvar)?;
        let b = tape.add_scalar(b, -1.0)?;
        let s = tape.sum(b)?;
        let kld = tape.scale(s, 0.5 * inv_n)?;

        let weighted_kld = tape.scale(kld, self.config.beta)?;
        let mut total = tape.add(recon, weighted_kld)?;
        let mut sup = None;
        if self.config.gamma > 0.0 {
            let v = velocities
                .ok_or_else(|| Error::Config("γ > 0 needs training velocities".into()))?;
            if v.len() != n {
                return Err(Error::Input(format!(
                    "{} velocities for a batch of {n}",
                    v.len()
                )));
            }
            let mu0 = tape.channel_split(out.mu, 0, 1)?;
            let target = Tensor::from_fn(&[n, 1], |i| T::of(self.config.velocity_scale * v[i]));
            let target = tape.constant(target);
            let e = tape.sub(mu0, target)?;
            let e2 = tape.mul(e, e)?;
            let sup_v = tape.mean(e2)?;
            let weighted = tape.scale(sup_v, self.config.gamma)?;
            total = tape.add(total, weighted)?;
            sup = Some(sup_v);
        }
        Ok(VaeLossVars {
            recon,
            kld,
            sup,
            total,
        })
    }

    /// Loss terms evaluated without recording gradients.
    pub fn loss(
        &self,
        x: &Tensor<T>,
        noise: &Tensor<T>,
        velocities: Option<&[f64]>,
    ) -> Result<VaeLossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &vars, xv, noise)?;
        let l = self.loss_on(&mut tape, xv, &out, velocities)?;
        let get = |v: Var| tape.value(v).data()[0].as_f64();
        Ok(VaeLossBreakdown {
            recon: get(l.recon),
            kld: get(l.kld),
            sup: l.sup.map_or(0.0, get),
            total: get(l.total),
        })
    }

    /// Per-sample `(reconstruction MSE, KLD)` at the posterior mean.
    pub fn scores(&self, x: &Tensor<T>) -> Result<Vec<(f64, f64)>> {
        let n = x.dims().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(
            &mut tape,
            &vars,
            xv,
            &Tensor::zeros(&[n, self.config.latent]),
        )?;
        let recon = tape.value(out.recon);
        let mu = tape.value(out.mu);
        let logvar = tape.value(out.logvar);
        Ok((0..n)
            .map(|i| {
                let mse = recon
                    .sample(i)
                    .iter()
                    .zip(x.sample(i))
                    .map(|(r, v)| (r.as_f64() - v.as_f64()).powi(2))
                    .sum::<f64>()
                    / self.config.input_dim as f64;
                let kld = kld_closed_form(mu.sample(i), logvar.sample(i));
                (mse, kld)
            })
            .collect())
    }

    /// Posterior means `(n, latent)`.
    pub fn encode_mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.dims().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(
            &mut tape,
            &vars,
            xv,
            &Tensor::zeros(&[n, self.config.latent]),
        )?;
        Ok(tape.value(out.mu).clone())
    }
}

/// `½ Σ (μ² + e^{lv} − lv − 1)`.
pub fn kld_closed_form<T: Scalar>(mu: &[T], logvar: &[T]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            m * m + lv.exp() - lv - 1.0
        })
        .sum::<f64>()
}
