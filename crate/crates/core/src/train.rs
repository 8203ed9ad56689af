//! Seeded mini-batch training for the flow and VAE models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use nfad_autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{ClipFeatures, Normalizer};
use crate::flow::{CouplingScale, GlowConfig, GlowModel};
use crate::prior::{nll_on_tape, PriorConfig};
use crate::vae::{VaeConfig, VaeModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GlowMulti,
    GlowSingle,
    Vae,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::GlowMulti => "glow-multi",
            ModelKind::GlowSingle => "glow-single",
            ModelKind::Vae => "vae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub model: ModelKind,
    /// Blocks of the multi-scale flow; the single-scale flow always has one.
    pub blocks: usize,
    pub steps: usize,
    pub hidden: usize,
    pub coupling_scale: CouplingScale,
    pub prior: PriorConfig,
    pub beta: f64,
    pub gamma: f64,
    pub vae_velocity_scale: f64,
    pub nan_guard: bool,
    pub grad_clip: Option<f64>,
    pub checkpoint_interval: Option<usize>,
    /// Fraction of training patches held out for monitoring.
    pub holdout_fraction: Option<f64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            model: ModelKind::GlowMulti,
            blocks: 2,
            steps: 3,
            hidden: 32,
            coupling_scale: CouplingScale::Sigmoid,
            prior: PriorConfig::default(),
            beta: 1.0,
            gamma: 0.01,
            vae_velocity_scale: 0.01,
            nan_guard: true,
            grad_clip: None,
            checkpoint_interval: None,
            holdout_fraction: None,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            epochs: 1000,
            lr: 1e-4,
            blocks: 3,
            steps: 5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.prior.constrained && !(self.prior.k > 0.0) {
            return Err(Error::Config("a constrained prior needs k > 0".into()));
        }
        if let Some(f) = self.holdout_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "holdout_fraction must be in [0,1), got {f}"
                )));
            }
        }
        if self.checkpoint_interval == Some(0) {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn glow_config(&self, data: &TrainingSet) -> GlowConfig {
        GlowConfig {
            channels: 1,
            height: data.n_mels,
            width: data.frames,
            blocks: if self.model == ModelKind::GlowSingle {
                1
            } else {
                self.blocks
            },
            steps: self.steps,
            hidden: self.hidden,
            coupling_scale: self.coupling_scale,
        }
    }

    pub fn vae_config(&self, data: &TrainingSet) -> VaeConfig {
        VaeConfig {
            beta: self.beta,
            gamma: self.gamma,
            velocity_scale: self.vae_velocity_scale,
            ..VaeConfig::new(data.patch_len(), self.gamma)
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Normalized training patches with their velocities.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub n_mels: usize,
    pub frames: usize,
    pub patches: Vec<f32>,
    pub velocities: Option<Vec<f64>>,
    pub normalizer: Normalizer,
}

impl TrainingSet {
    /// Fit the normalizer on `clips` and flatten all their patches.
    pub fn from_clips(clips: &[ClipFeatures]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Input("no training clips".into()))?;
        let (n_mels, frames) = (first.n_mels, first.frames);
        if let Some(c) = clips
            .iter()
            .find(|c| c.n_mels != n_mels || c.frames != frames)
        {
            return Err(Error::Input(format!(
                "clip {} has {}×{} patches, expected {n_mels}×{frames}",
                c.clip_id, c.n_mels, c.frames
            )));
        }
        let normalizer = Normalizer::fit(clips.iter().map(|c| c.data.as_slice()))?;
        let mut patches = Vec::with_capacity(clips.iter().map(|c| c.data.len()).sum());
        let mut velocities = Vec::new();
        for c in clips {
            patches.extend_from_slice(&c.data);
            velocities.extend(std::iter::repeat(c.velocity as f64).take(c.n_patches()));
        }
        normalizer.apply(&mut patches);
        Ok(TrainingSet {
            n_mels,
            frames,
            patches,
            velocities: Some(velocities),
            normalizer,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.n_mels * self.frames
    }

    pub fn len(&self) -> usize {
        self.patches.len() / self.patch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize], dims: &[usize]) -> Tensor<f32> {
        let l = self.patch_len();
        let mut data = Vec::with_capacity(idx.len() * l);
        for &i in idx {
            data.extend_from_slice(&self.patches[i * l..(i + 1) * l]);
        }
        let mut full = vec![idx.len()];
        full.extend_from_slice(dims);
        Tensor::new(full, data).expect("gathered patch count")
    }

    fn gather_velocities(&self, idx: &[usize]) -> Option<Vec<f64>> {
        self.velocities
            .as_ref()
            .map(|v| idx.iter().map(|&i| v[i]).collect())
    }
}

/// One loss-log line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Values of one loss term in epoch order.
    pub fn term(&self, name: &str) -> Vec<f64> {
        self.curve
            .iter()
            .filter(|r| r.term == name)
            .map(|r| r.value)
            .collect()
    }
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,term,value\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.term, r.value));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Where to write checkpoints during and after training.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub path: Option<PathBuf>,
}

impl CheckpointSink {
    fn write(&self, ck: &Checkpoint, epoch: Option<usize>) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        match epoch {
            None => ck.save(path),
            Some(e) => {
                let mut p = path.clone().into_os_string();
                p.push(format!(".epoch{e:04}"));
                ck.save(Path::new(&p))
            }
        }
    }
}

struct Split {
    train: Vec<usize>,
    holdout: Vec<usize>,
}

fn split_indices(n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    match cfg.holdout_fraction {
        Some(f) if f > 0.0 => {
            idx.shuffle(rng);
            let h = ((n as f64) * f).round() as usize;
            let holdout = idx.split_off(n - h);
            idx.sort_unstable();
            Split {
                train: idx,
                holdout,
            }
        }
        _ => Split {
            train: idx,
            holdout: Vec::new(),
        },
    }
}

fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn apply_step(
    adam: &mut Adam<f32>,
    params: &mut ParamStore<f32>,
    mut grads: Vec<Tensor<f32>>,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(c) = cfg.grad_clip {
        clip_gradients(&mut grads, c);
    }
    adam.step(params, &grads)?;
    Ok(())
}

fn check_finite(loss: f64, cfg: &TrainConfig, epoch: usize, batch: usize) -> Result<()> {
    if cfg.nan_guard && !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, batch });
    }
    Ok(())
}

/// Maximum-likelihood training of a Glow model.
pub fn train_flow(
    data: &TrainingSet,
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.model == ModelKind::Vae {
        return Err(Error::Config("train_flow needs a glow model kind".into()));
    }
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let velocities =
        if cfg.prior.constrained {
            Some(data.velocities.as_ref().ok_or_else(|| {
                Error::Config("a constrained prior needs training velocities".into())
            })?)
        } else {
            None
        };
    let glow = cfg.glow_config(data);
    let dims = glow.input_dims();
    let mut model = GlowModel::<f32>::new(glow, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut split = split_indices(data.len(), cfg, &mut rng);
    let mut adam = Adam::new(cfg.adam());
    let mut curve = Vec::new();
    let batch_velocities = |idx: &[usize]| -> Vec<f64> {
        match velocities {
            Some(v) => idx.iter().map(|&i| v[i]).collect(),
            None => vec![0.0; idx.len()],
        }
    };

    for epoch in 1..=cfg.epochs {
        split.train.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for (b, idx) in split.train.chunks(cfg.batch_size).enumerate() {
            let x = data.gather(idx, &dims);
            if !model.is_initialized() {
                model.initialize(&x)?;
            }
            let v = batch_velocities(idx);
            let mut tape = Tape::new();
            let vars = model.params().register(&mut tape, true);
            let xv = tape.constant(x);
            let lat = model.forward_on(&mut tape, &vars, xv)?;
            let loss = nll_on_tape(&mut tape, &lat, &cfg.prior, &v)?;
            let lv = tape.value(loss).data()[0] as f64;
            check_finite(lv, cfg, epoch, b)?;
            let mut g = tape.backward(loss)?;
            let grads = model.params().collect_grads(&vars, &mut g);
            apply_step(&mut adam, model.params_mut(), grads, cfg)?;
            sum += lv * idx.len() as f64;
            count += idx.len();
            debug!("epoch {epoch} batch {b}: nll {lv:.4}");
        }
        let mean = sum / count as f64;
        info!(
            "{} epoch {epoch}/{}: mean nll {mean:.4}",
            cfg.model.as_str(),
            cfg.epochs
        );
        curve.push(LossRecord {
            epoch,
            term: "nll".into(),
            value: mean,
        });
        if !split.holdout.is_empty() {
            let mut hsum = 0.0;
            for idx in split.holdout.chunks(cfg.batch_size) {
                let x = data.gather(idx, &dims);
                let v = batch_velocities(idx);
                let mut tape = Tape::new();
                let vars = model.params().register(&mut tape, false);
                let xv = tape.constant(x);
                let lat = model.forward_on(&mut tape, &vars, xv)?;
                let loss = nll_on_tape(&mut tape, &lat, &cfg.prior, &v)?;
                hsum += tape.value(loss).data()[0] as f64 * idx.len() as f64;
            }
            curve.push(LossRecord {
                epoch,
                term: "holdout_nll".into(),
                value: hsum / split.holdout.len() as f64,
            });
        }
        if cfg
            .checkpoint_interval
            .is_some_and(|k| epoch % k == 0 && epoch < cfg.epochs)
        {
            sink.write(
                &Checkpoint::from_glow(&model, cfg.prior, data.normalizer),
                Some(epoch),
            )?;
        }
    }
    let checkpoint = Checkpoint::from_glow(&model, cfg.prior, data.normalizer);
    sink.write(&checkpoint, None)?;
    Ok(TrainOutcome { checkpoint, curve })
}

/// Training of the VAE baseline; `cfg.gamma > 0` adds the velocity regressor.
pub fn train_vae(
    data: &TrainingSet,
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if cfg.gamma > 0.0 && data.velocities.is_none() {
        return Err(Error::Config("γ > 0 needs training velocities".into()));
    }
    let vcfg = cfg.vae_config(data);
    let latent = vcfg.latent;
    let dims = [data.patch_len()];
    let mut model = VaeModel::<f32>::new(vcfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut split = split_indices(data.len(), cfg, &mut rng);
    let mut adam = Adam::new(cfg.adam());
    let mut curve = Vec::new();

    for epoch in 1..=cfg.epochs {
        split.train.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for (b, idx) in split.train.chunks(cfg.batch_size).enumerate() {
            let x = data.gather(idx, &dims);
            let v = data.gather_velocities(idx);
            let noise = Tensor::from_fn(&[idx.len(), latent], |_| {
                noise_rng.sample::<f32, _>(StandardNormal)
            });
            let mut tape = Tape::new();
            let vars = model.params().register(&mut tape, true);
            let xv = tape.constant(x);
            let out = model.forward_on(&mut tape, &vars, xv, &noise)?;
            let terms = model.loss_on(&mut tape, xv, &out, v.as_deref())?;
            let get = |v| tape.value(v).data()[0] as f64;
            let total = get(terms.total);
            check_finite(total, cfg, epoch, b)?;
            let vals = [
                total,
                get(terms.recon),
                get(terms.kld),
                terms.sup.map_or(0.0, get),
            ];
            let mut g = tape.backward(terms.total)?;
            let grads = model.params().collect_grads(&vars, &mut g);
            apply_step(&mut adam, model.params_mut(), grads, cfg)?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * idx.len() as f64;
            }
            count += idx.len();
        }
        let names = ["total", "recon", "kld", "sup"];
        for (name, s) in names.iter().zip(sums) {
            curve.push(LossRecord {
                epoch,
                term: name.to_string(),
                value: s / count as f64,
            });
        }
        info!(
            "vae epoch {epoch}/{}: total {:.4} recon {:.4} kld {:.4} sup {:.4}",
            cfg.epochs,
            sums[0] / count as f64,
            sums[1] / count as f64,
            sums[2] / count as f64,
            sums[3] / count as f64
        );
        if !split.holdout.is_empty() {
            let x = data.gather(&split.holdout, &dims);
            let v = data.gather_velocities(&split.holdout);
            let l = model.loss(
                &x,
                &Tensor::zeros(&[split.holdout.len(), latent]),
                v.as_deref(),
            )?;
            curve.push(LossRecord {
                epoch,
                term: "holdout_total".into(),
                value: l.total,
            });
        }
        if cfg
            .checkpoint_interval
            .is_some_and(|k| epoch % k == 0 && epoch < cfg.epochs)
        {
            sink.write(&Checkpoint::from_vae(&model, data.normalizer), Some(epoch))?;
        }
    }
    let checkpoint = Checkpoint::from_vae(&model, data.normalizer);
    sink.write(&checkpoint, None)?;
    Ok(TrainOutcome { checkpoint, curve })
}

/// Dispatch on `cfg.model`.
pub fn train(data: &TrainingSet, cfg: &TrainConfig, sink: &CheckpointSink) -> Result<TrainOutcome> {
    match cfg.model {
        ModelKind::Vae => train_vae(data, cfg, sink),
        _ => train_flow(data, cfg, sink),
    }
}
