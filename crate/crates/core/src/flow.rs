//! Glow-style multi-scale normalizing flow.
//!
//! A block squeezes its input `(c,h,w)` to `(4c,h/2,w/2)` and applies `K`
//! steps of actnorm → invertible 1×1 convolution → affine coupling. Every
//! block but the last then factors out half of its channels as a
//! velocity-invariant latent `z_ic`. The last block splits its channels into
//! the domain latent `z_d` (first half) and `z_Nc` (second half).

use nfad_autodiff::{kernels, linalg, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest `|det W|` accepted for an invertible 1×1 convolution.
pub const MIN_ABS_DET: f64 = 1e-12;

/// Offset added to the raw coupling scale before the sigmoid.
pub const SIGMOID_SHIFT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingScale {
    /// `s = sigmoid(raw + 2)`.
    Sigmoid,
    /// `s = exp(raw)`; a zeroed coupling network is then the identity.
    Exp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlowConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: usize,
    pub steps: usize,
    pub hidden: usize,
    pub coupling_scale: CouplingScale,
}

impl GlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.steps == 0 || self.hidden == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "degenerate flow architecture {self:?}"
            )));
        }
        let div = 1usize << self.blocks;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "input {}×{} not divisible by 2^{} for {} blocks",
                self.height, self.width, self.blocks, self.blocks
            )));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `(c, h, w)` inside block `i`, after its squeeze.
    pub fn block_dims(&self, i: usize) -> [usize; 3] {
        // each earlier block doubles channels net (×4 squeeze, ÷2 split)
        let c = self.channels * 4 * (1 << i);
        [c, self.height >> (i + 1), self.width >> (i + 1)]
    }

    /// Shapes of `z_1c … z_Nc` for one sample.
    pub fn zc_dims(&self) -> Vec<[usize; 3]> {
        (0..self.blocks)
            .map(|i| {
                let [c, h, w] = self.block_dims(i);
                [c / 2, h, w]
            })
            .collect()
    }

    /// Shape of `z_d`: the first half of the last block's channels.
    pub fn zd_dims(&self) -> [usize; 3] {
        let [c, h, w] = self.block_dims(self.blocks - 1);
        [c / 2, h, w]
    }

    pub fn domain_channels(&self) -> usize {
        self.zd_dims()[0]
    }

    pub fn zc_len(&self) -> usize {
        self.zc_dims()
            .iter()
            .map(|d| d.iter().product::<usize>())
            .sum()
    }

    pub fn zd_len(&self) -> usize {
        self.zd_dims().iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StepParams {
    channels: usize,
    an_scale: ParamId,
    an_bias: ParamId,
    invconv: ParamId,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    conv3_w: ParamId,
    conv3_b: ParamId,
}

impl StepParams {
    fn net(&self, vars: &[Var]) -> CouplingNet {
        let v = |id: ParamId| vars[id.index()];
        CouplingNet {
            conv1_w: v(self.conv1_w),
            conv1_b: v(self.conv1_b),
            conv2_w: v(self.conv2_w),
            conv2_b: v(self.conv2_b),
            conv3_w: v(self.conv3_w),
            conv3_b: v(self.conv3_b),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlowModel<T> {
    config: GlowConfig,
    params: ParamStore<T>,
    steps: Vec<Vec<StepParams>>,
    initialized: bool,
}

/// Latents of a batch as tape variables.
#[derive(Clone, Debug)]
pub struct LatentVars {
    pub zc: Vec<Var>,
    pub zd: Var,
    /// `(n)` accumulated log-determinant.
    pub log_det: Var,
}

/// Latents of a batch, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<T> {
    /// `z_1c … z_Nc`, each `(n, c_i, h_i, w_i)`.
    pub zc: Vec<Tensor<T>>,
    /// `(n, c_d, h_d, w_d)`.
    pub zd: Tensor<T>,
    /// `(n)`.
    pub log_det: Tensor<T>,
}

impl<T: Scalar> LatentBundle<T> {
    pub fn batch(&self) -> usize {
        self.zd.batch()
    }

    /// Concatenated `z_c` entries of sample `i`.
    pub fn zc_sample(&self, i: usize) -> impl Iterator<Item = T> + '_ {
        self.zc
            .iter()
            .flat_map(move |t| t.sample(i).iter().copied())
    }

    pub fn zd_sample(&self, i: usize) -> &[T] {
        self.zd.sample(i)
    }

    pub fn log_det_sample(&self, i: usize) -> T {
        self.log_det.data()[i]
    }
}

type InitLog<T> = Vec<(ParamId, Tensor<T>)>;

impl<T: Scalar> GlowModel<T> {
    /// Random 1×1 convolutions (orthogonal), small coupling weights with a
    /// zeroed last layer, and identity actnorm awaiting data-dependent init.
    pub fn new(config: GlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut steps = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let [c, _, _] = config.block_dims(b);
            let half = c / 2;
            let hid = config.hidden;
            let mut block = Vec::with_capacity(config.steps);
            for k in 0..config.steps {
                let p = |n: &str| format!("block{b}.step{k}.{n}");
                block.push(StepParams {
                    channels: c,
                    an_scale: params.add(p("actnorm.scale"), Tensor::ones(&[c])),
                    an_bias: params.add(p("actnorm.bias"), Tensor::zeros(&[c])),
                    invconv: params.add(p("invconv.weight"), random_orthogonal(&mut rng, c)),
                    conv1_w: params.add(
                        p("coupling.conv1.weight"),
                        normal(&mut rng, &[hid, half, 3, 3], 0.05),
                    ),
                    conv1_b: params.add(p("coupling.conv1.bias"), Tensor::zeros(&[hid])),
                    conv2_w: params.add(
                        p("coupling.conv2.weight"),
                        normal(&mut rng, &[hid, hid, 1, 1], 0.05),
                    ),
                    conv2_b: params.add(p("coupling.conv2.bias"), Tensor::zeros(&[hid])),
                    conv3_w: params.add(p("coupling.conv3.weight"), Tensor::zeros(&[c, hid, 3, 3])),
                    conv3_b: params.add(p("coupling.conv3.bias"), Tensor::zeros(&[c])),
                });
            }
            steps.push(block);
        }
        Ok(GlowModel {
            config,
            params,
            steps,
            initialized: false,
        })
    }

    /// Rebuild a model around stored parameters, checking names and shapes.
    pub fn from_params(
        config: GlowConfig,
        params: ParamStore<T>,
        initialized: bool,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "expected {} flow tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, expect), (got_name, got)) in model.params.iter().zip(params.iter()) {
            if name != got_name || expect.dims() != got.dims() {
                return Err(Error::Data(format!(
                    "flow tensor mismatch: expected {name} {:?}, found {got_name} {:?}",
                    expect.dims(),
                    got.dims()
                )));
            }
        }
        model.params = params;
        model.initialized = initialized;
        Ok(model)
    }

    pub fn config(&self) -> &GlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn cast<U: Scalar>(&self) -> GlowModel<U> {
        GlowModel {
            config: self.config.clone(),
            params: self.params.cast(),
            steps: self.steps.clone(),
            initialized: self.initialized,
        }
    }

    /// Parameter ids of one flow step, for tests that configure layers by hand.
    pub fn step_param_names(&self, block: usize, step: usize) -> Vec<&str> {
        let s = &self.steps[block][step];
        [
            s.an_scale, s.an_bias, s.invconv, s.conv1_w, s.conv1_b, s.conv2_w, s.conv2_b,
            s.conv3_w, s.conv3_b,
        ]
        .iter()
        .map(|&id| self.params.name(id))
        .collect()
    }

    /// Set every layer to the identity map (unit actnorm, `W = I`, zeroed coupling nets).
    pub fn set_identity(&mut self) {
        for block in &self.steps {
            for s in block {
                let c = s.channels;
                *self.params.get_mut(s.an_scale) = Tensor::ones(&[c]);
                *self.params.get_mut(s.an_bias) = Tensor::zeros(&[c]);
                *self.params.get_mut(s.invconv) =
                    Tensor::from_fn(
                        &[c, c],
                        |i| if i / c == i % c { T::one() } else { T::zero() },
                    );
                for id in [s.conv3_w, s.conv3_b] {
                    let d = self.params.get(id).dims().to_vec();
                    *self.params.get_mut(id) = Tensor::zeros(&d);
                }
            }
        }
        self.initialized = true;
    }

    /// Fill every parameter with random values, including the zero-initialised
    /// coupling output layers. Used by invertibility and log-det checks.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &self.steps {
            for s in block {
                let c = s.channels;
                *self.params.get_mut(s.an_scale) =
                    Tensor::from_fn(&[c], |_| T::of(rng.gen_range(0.5..1.5)));
                *self.params.get_mut(s.an_bias) =
                    Tensor::from_fn(&[c], |_| T::of(rng.gen_range(-0.5..0.5)));
                *self.params.get_mut(s.invconv) = random_orthogonal(&mut rng, c);
                for id in [
                    s.conv1_w, s.conv1_b, s.conv2_w, s.conv2_b, s.conv3_w, s.conv3_b,
                ] {
                    let d = self.params.get(id).dims().to_vec();
                    *self.params.get_mut(id) = normal(&mut rng, &d, scale);
                }
            }
        }
        self.initialized = true;
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let [c, h, w] = self.config.input_dims();
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            return Err(Error::Input(format!(
                "flow expects (n,{c},{h},{w}) input, got {dims:?}"
            )));
        }
        Ok(())
    }

    fn check_actnorm(&self) -> Result<()> {
        for (b, block) in self.steps.iter().enumerate() {
            for (k, s) in block.iter().enumerate() {
                if self
                    .params
                    .get(s.an_scale)
                    .data()
                    .iter()
                    .any(|&v| v == T::zero())
                {
                    return Err(Error::Degenerate {
                        layer: format!("block{b}.step{k}.actnorm"),
                        msg: "scale has a zero entry".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Forward pass recorded on `tape`. `vars` come from
    /// `self.params().register(tape, trainable)`.
    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<LatentVars> {
        if !self.initialized {
            return Err(Error::Contract("actnorm has not been initialized".into()));
        }
        self.run(tape, vars, x, None)
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        mut init: Option<&mut InitLog<T>>,
    ) -> Result<LatentVars> {
        self.check_input(tape.dims(x))?;
        self.check_actnorm()?;
        let n = tape.dims(x)[0];
        let mut log_det = tape.constant(Tensor::zeros(&[n]));
        let mut h = x;
        let mut zc = Vec::with_capacity(self.config.blocks);
        let last = self.config.blocks - 1;
        for (b, block) in self.steps.iter().enumerate() {
            h = tape.squeeze(h)?;
            for s in block {
                let (y, ld) = self.step_forward(tape, vars, s, h, init.as_deref_mut())?;
                h = y;
                log_det = tape.add(log_det, ld)?;
            }
            let c = tape.dims(h)[1];
            let keep = tape.channel_split(h, 0, c / 2)?;
            let out = tape.channel_split(h, c / 2, c / 2)?;
            zc.push(out);
            if b == last {
                return Ok(LatentVars {
                    zc,
                    zd: keep,
                    log_det,
                });
            }
            h = keep;
        }
        unreachable!("at least one block")
    }

    /// One flow step; returns the output and its `(n)` log-det contribution.
    fn step_forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        s: &StepParams,
        x: Var,
        init: Option<&mut InitLog<T>>,
    ) -> Result<(Var, Var)> {
        let (scale, bias) = match init {
            Some(log) => {
                let (sv, bv) = actnorm_init_values(tape.value(x));
                log.push((s.an_scale, sv.clone()));
                log.push((s.an_bias, bv.clone()));
                (tape.constant(sv), tape.constant(bv))
            }
            None => (vars[s.an_scale.index()], vars[s.an_bias.index()]),
        };
        let (y, an_ld) = actnorm_forward(tape, x, scale, bias)?;
        let (y, conv_ld) =
            invconv_forward(tape, y, vars[s.invconv.index()]).map_err(|e| match e {
                Error::Degenerate { msg, .. } => Error::Degenerate {
                    layer: self.params.name(s.invconv).to_string(),
                    msg,
                },
                other => other,
            })?;
        let (y, coupling_ld) = coupling_forward(tape, y, &s.net(vars), self.config.coupling_scale)?;
        let ld = tape.add(an_ld, conv_ld)?;
        let ld = tape.add(ld, coupling_ld)?;
        Ok((y, ld))
    }

    /// Data-dependent actnorm initialisation on one batch.
    ///
    /// Each actnorm is set so that its output has zero mean and unit variance
    /// per channel on `batch`, layer by layer.
    pub fn initialize(&mut self, batch: &Tensor<T>) -> Result<()> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let x = tape.constant(batch.clone());
        let mut log = InitLog::new();
        self.run(&mut tape, &vars, x, Some(&mut log))?;
        for (id, value) in log {
            self.params.set(id, value)?;
        }
        self.initialized = true;
        Ok(())
    }

    /// `x (n,c,h,w)` → latents, without recording gradients.
    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentBundle<T>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let lat = self.forward_on(&mut tape, &vars, xv)?;
        Ok(LatentBundle {
            zc: lat.zc.iter().map(|&v| tape.value(v).clone()).collect(),
            zd: tape.value(lat.zd).clone(),
            log_det: tape.value(lat.log_det).clone(),
        })
    }

    /// Exact inverse of [`GlowModel::encode`]; `log_det` is ignored.
    pub fn decode(&self, bundle: &LatentBundle<T>) -> Result<Tensor<T>> {
        let nb = self.config.blocks;
        if bundle.zc.len() != nb {
            return Err(Error::Input(format!(
                "expected {nb} z_c parts, got {}",
                bundle.zc.len()
            )));
        }
        let n = bundle.zd.batch();
        let check = |t: &Tensor<T>, want: [usize; 3], what: &str| -> Result<()> {
            if t.dims() != [n, want[0], want[1], want[2]] {
                return Err(Error::Input(format!(
                    "{what}: expected {:?}, got {:?}",
                    [n, want[0], want[1], want[2]],
                    t.dims()
                )));
            }
            Ok(())
        };
        check(&bundle.zd, self.config.zd_dims(), "z_d")?;
        for (i, (z, dims)) in bundle.zc.iter().zip(self.config.zc_dims()).enumerate() {
            check(z, dims, &format!("z_{}c", i + 1))?;
        }
        self.check_actnorm()?;

        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let mut h = tape.constant(bundle.zd.clone());
        for (b, block) in self.steps.iter().enumerate().rev() {
            let z = tape.constant(bundle.zc[b].clone());
            h = tape.channel_concat(&[h, z])?;
            for s in block.iter().rev() {
                h = self.step_inverse(&mut tape, &vars, s, h)?;
            }
            h = tape.unsqueeze(h)?;
        }
        Ok(tape.value(h).clone())
    }

    fn step_inverse(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        s: &StepParams,
        y: Var,
    ) -> Result<Var> {
        let d = tape.dims(y).to_vec();
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        let half = c / 2;

        // coupling
        let ya = tape.channel_split(y, 0, half)?;
        let yb = tape.channel_split(y, half, half)?;
        let (raw, shift) = coupling_net(tape, ya, &s.net(vars))?;
        let scale = match self.config.coupling_scale {
            CouplingScale::Sigmoid => {
                let shifted = tape.add_scalar(raw, SIGMOID_SHIFT)?;
                tape.sigmoid(shifted)?
            }
            CouplingScale::Exp => tape.exp(raw)?,
        };
        let diff = tape
            .value(yb)
            .zip_map(tape.value(shift), "coupling_inverse", |a, b| a - b)?;
        let xb = diff.zip_map(tape.value(scale), "coupling_inverse", |a, s| a / s)?;
        let xb = tape.constant(xb);
        let x = tape.channel_concat(&[ya, xb])?;

        // 1×1 convolution
        let wmat = self.params.get(s.invconv);
        let inv = linalg::inverse(wmat.data(), c, MIN_ABS_DET).map_err(|e| Error::Degenerate {
            layer: self.params.name(s.invconv).to_string(),
            msg: e.to_string(),
        })?;
        let shape = kernels::ConvShape {
            batch: n,
            in_ch: c,
            out_ch: c,
            height: h,
            width: w,
            kernel: 1,
        };
        let x = kernels::conv2d_forward(tape.value(x).data(), &inv, shape);

        // actnorm: x = y / s − b
        let scale = self.params.get(s.an_scale).data();
        let bias = self.params.get(s.an_bias).data();
        let hw = h * w;
        let out: Vec<T> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                v / scale[ch] - bias[ch]
            })
            .collect();
        Ok(tape.constant(Tensor::new(d, out)?))
    }
}

// ---------------------------------------------------------------------------
// Layers. Each maps `(n,c,h,w)` to the same shape and returns its `(n)`
// log-determinant alongside.

/// `y = s ⊙ (x + b)` per channel; log-det `h·w·Σ ln|s|`.
pub fn actnorm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    scale: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let d = tape.dims(x).to_vec();
    if d.len() != 4 || tape.dims(scale) != [d[1]] || tape.dims(bias) != [d[1]] {
        return Err(Error::Input(format!(
            "actnorm: input {d:?} with scale {:?} and bias {:?}",
            tape.dims(scale),
            tape.dims(bias)
        )));
    }
    if tape.value(scale).data().iter().any(|&v| v == T::zero()) {
        return Err(Error::Degenerate {
            layer: "actnorm".into(),
            msg: "scale has a zero entry".into(),
        });
    }
    let (n, h, w) = (d[0], d[2], d[3]);
    let bias_b = tape.broadcast(bias, &[n], &[h, w])?;
    let scale_b = tape.broadcast(scale, &[n], &[h, w])?;
    let shifted = tape.add(x, bias_b)?;
    let y = tape.mul(shifted, scale_b)?;
    let log_s = tape.log_abs(scale)?;
    let sum_log_s = tape.sum(log_s)?;
    let ld = tape.scale(sum_log_s, (h * w) as f64)?;
    Ok((y, tape.broadcast(ld, &[n], &[])?))
}

/// `y[:, i, j] = W · x[:, i, j]`; log-det `h·w·ln|det W|`.
pub fn invconv_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var) -> Result<(Var, Var)> {
    let d = tape.dims(x).to_vec();
    let c = d.get(1).copied().unwrap_or(0);
    if d.len() != 4 || tape.dims(weight) != [c, c] {
        return Err(Error::Input(format!(
            "invconv: input {d:?} with weight {:?}",
            tape.dims(weight)
        )));
    }
    let (n, h, w) = (d[0], d[2], d[3]);
    let logdet_w = tape
        .log_abs_det(weight, MIN_ABS_DET)
        .map_err(|e| Error::Degenerate {
            layer: "invconv".into(),
            msg: e.to_string(),
        })?;
    let kernel = tape.reshape(weight, &[c, c, 1, 1])?;
    let y = tape.conv2d(x, kernel)?;
    let ld = tape.scale(logdet_w, (h * w) as f64)?;
    Ok((y, tape.broadcast(ld, &[n], &[])?))
}

/// Parameters of a coupling network: 3×3 conv, relu, 1×1 conv, relu, 3×3 conv.
#[derive(Clone, Copy, Debug)]
pub struct CouplingNet {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub conv3_w: Var,
    pub conv3_b: Var,
}

/// Network output split into `(raw scale, shift)`.
pub fn coupling_net<T: Scalar>(
    tape: &mut Tape<T>,
    xa: Var,
    net: &CouplingNet,
) -> Result<(Var, Var)> {
    let d = tape.dims(xa).to_vec();
    let (n, h, w) = (d[0], d[2], d[3]);
    let mut hcur = xa;
    let layers = [
        (net.conv1_w, net.conv1_b, true),
        (net.conv2_w, net.conv2_b, true),
        (net.conv3_w, net.conv3_b, false),
    ];
    for (weight, bias, relu) in layers {
        hcur = tape.conv2d(hcur, weight)?;
        let b = tape.broadcast(bias, &[n], &[h, w])?;
        hcur = tape.add(hcur, b)?;
        if relu {
            hcur = tape.relu(hcur)?;
        }
    }
    let c = tape.dims(hcur)[1];
    if c % 2 != 0 {
        return Err(Error::Input(format!(
            "coupling network emits {c} channels, need an even count"
        )));
    }
    let raw = tape.channel_split(hcur, 0, c / 2)?;
    let shift = tape.channel_split(hcur, c / 2, c / 2)?;
    Ok((raw, shift))
}

/// `y = (x_a, s ⊙ x_b + t)` with `(raw, t)` from the network on `x_a`;
/// log-det `Σ ln s`.
pub fn coupling_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    net: &CouplingNet,
    mode: CouplingScale,
) -> Result<(Var, Var)> {
    let c = tape.dims(x)[1];
    if c % 2 != 0 {
        return Err(Error::Input(format!(
            "coupling needs an even channel count, got {c}"
        )));
    }
    let half = c / 2;
    let xa = tape.channel_split(x, 0, half)?;
    let xb = tape.channel_split(x, half, half)?;
    let (raw, shift) = coupling_net(tape, xa, net)?;
    if tape.dims(raw) != tape.dims(xb) {
        return Err(Error::Input(format!(
            "coupling network output {:?} does not match x_b {:?}",
            tape.dims(raw),
            tape.dims(xb)
        )));
    }
    let (scale, log_scale) = match mode {
        CouplingScale::Sigmoid => {
            let shifted = tape.add_scalar(raw, SIGMOID_SHIFT)?;
            (tape.sigmoid(shifted)?, tape.log_sigmoid(shifted)?)
        }
        CouplingScale::Exp => (tape.exp(raw)?, raw),
    };
    let yb = tape.mul(scale, xb)?;
    let yb = tape.add(yb, shift)?;
    let y = tape.channel_concat(&[xa, yb])?;
    let ld = tape.sum_rows(log_scale)?;
    Ok((y, ld))
}

fn actnorm_init_values<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let d = x.dims();
    let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
    let count = (n * hw) as f64;
    let mut scale = Vec::with_capacity(c);
    let mut bias = Vec::with_capacity(c);
    for ch in 0..c {
        let values = (0..n).flat_map(|b| x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter());
        let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
        for v in values {
            let v = v.as_f64();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / count;
        let var = (sumsq / count - mean * mean).max(0.0);
        bias.push(T::of(-mean));
        scale.push(T::of(1.0 / var.sqrt().max(1e-6)));
    }
    (
        Tensor::new(vec![c], scale).expect("c entries"),
        Tensor::new(vec![c], bias).expect("c entries"),
    )
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

/// Orthogonal matrix from Gram–Schmidt on a Gaussian draw.
fn random_orthogonal<T: Scalar>(rng: &mut ChaCha8Rng, c: usize) -> Tensor<T> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..c).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..c {
            for j in 0..i {
                let proj: f64 = (0..c).map(|k| rows[i][k] * rows[j][k]).sum();
                let (head, tail) = rows.split_at_mut(i);
                for k in 0..c {
                    tail[0][k] -= proj * head[j][k];
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let flat: Vec<f64> = rows.concat();
            return Tensor::from_f64(&[c, c], &flat).expect("c×c");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(blocks: usize, steps: usize, c: usize, h: usize, w: usize) -> GlowConfig {
        GlowConfig {
            channels: c,
            height: h,
            width: w,
            blocks,
            steps,
            hidden: 8,
            coupling_scale: CouplingScale::Sigmoid,
        }
    }

    fn random_input(seed: u64, dims: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.sample(StandardNormal))
    }

    #[test]
    fn latent_dims_add_up() {
        for (blocks, h, w) in [(1, 32, 16), (2, 32, 16), (3, 32, 16), (3, 128, 64)] {
            let c = cfg(blocks, 1, 1, h, w);
            assert_eq!(c.zc_len() + c.zd_len(), h * w);
        }
        let c = cfg(3, 1, 1, 32, 16);
        assert_eq!(c.zc_dims(), vec![[2, 16, 8], [4, 8, 4], [8, 4, 2]]);
        assert_eq!(c.zd_dims(), [8, 4, 2]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        assert!(GlowModel::<f32>::new(cfg(3, 1, 1, 12, 16), 0).is_err());
        assert!(GlowModel::<f32>::new(cfg(1, 1, 1, 3, 4), 0).is_err());
    }

    #[test]
    fn forward_requires_initialization() {
        let model = GlowModel::<f64>::new(cfg(1, 1, 1, 4, 4), 0).unwrap();
        assert!(matches!(
            model.encode(&Tensor::zeros(&[1, 1, 4, 4])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn actnorm_init_standardizes() {
        let mut model = GlowModel::<f64>::new(cfg(1, 1, 1, 8, 8), 3).unwrap();
        let batch = random_input(4, &[16, 1, 8, 8]).map(|v| 3.0 * v + 1.5);
        model.initialize(&batch).unwrap();
        // first actnorm output = s ⊙ (squeeze(x) + b)
        let s = model.params.get(model.steps[0][0].an_scale).clone();
        let b = model.params.get(model.steps[0][0].an_bias).clone();
        let sq = kernels::squeeze2x2(batch.data(), 16, 1, 8, 8);
        let (c, hw) = (4, 16);
        for ch in 0..c {
            let vals: Vec<f64> = (0..16)
                .flat_map(|n| sq[(n * c + ch) * hw..(n * c + ch + 1) * hw].to_vec())
                .map(|v| s.data()[ch] * (v + b.data()[ch]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "{mean}");
            assert!((0.99..=1.01).contains(&var), "{var}");
        }
    }

    #[test]
    fn zero_actnorm_scale_is_degenerate() {
        let mut model = GlowModel::<f64>::new(cfg(1, 1, 1, 4, 4), 0).unwrap();
        model.set_identity();
        let id = model.steps[0][0].an_scale;
        model.params.get_mut(id).data_mut()[1] = 0.0;
        assert!(matches!(
            model.encode(&Tensor::zeros(&[1, 1, 4, 4])),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn singular_invconv_is_degenerate() {
        let mut model = GlowModel::<f64>::new(cfg(1, 1, 1, 4, 4), 0).unwrap();
        model.set_identity();
        let id = model.steps[0][0].invconv;
        *model.params.get_mut(id) = Tensor::zeros(&[4, 4]);
        assert!(matches!(
            model.encode(&Tensor::zeros(&[1, 1, 4, 4])),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn random_model_roundtrip_f64() {
        let mut model = GlowModel::<f64>::new(cfg(2, 2, 1, 8, 8), 5).unwrap();
        model.randomize(6, 0.1);
        let x = random_input(7, &[3, 1, 8, 8]);
        let z = model.encode(&x).unwrap();
        let back = model.decode(&z).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-8);
    }

    #[test]
    fn orthogonal_init_has_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = random_orthogonal(&mut rng, 8);
        assert!((linalg::det(w.data(), 8).unwrap().abs() - 1.0).abs() < 1e-10);
    }
}
