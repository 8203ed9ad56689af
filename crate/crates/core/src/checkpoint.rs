//! Binary model container.
//!
//! Layout, all little-endian: magic `NFAD`, `u32` version, `u32` architecture
//! tag (1 = Glow, 2 = VAE) followed by its descriptor, normalizer mean and std
//! as `f64`, then a `u32` tensor count and the named tensors
//! (`u32` name length, name bytes, `u32` ndim, `u32` dims, `f32` payload).

use std::fs;
use std::path::Path;

use nfad_autodiff::{ParamStore, Tensor};

use crate::binio::{put_f32s, put_f64, put_str, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::features::Normalizer;
use crate::flow::{CouplingScale, GlowConfig, GlowModel};
use crate::prior::PriorConfig;
use crate::vae::{VaeConfig, VaeModel};

pub const MAGIC: &[u8; 4] = b"NFAD";
pub const VERSION: u32 = 1;

const TAG_GLOW: u32 = 1;
const TAG_VAE: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Glow {
        flow: GlowConfig,
        prior: PriorConfig,
    },
    Vae(VaeConfig),
}

impl Architecture {
    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Glow { .. } => "glow",
            Architecture::Vae(_) => "vae",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub normalizer: Normalizer,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_glow(model: &GlowModel<f32>, prior: PriorConfig, normalizer: Normalizer) -> Self {
        Checkpoint {
            arch: Architecture::Glow {
                flow: model.config().clone(),
                prior,
            },
            normalizer,
            params: model.params().clone(),
        }
    }

    pub fn from_vae(model: &VaeModel<f32>, normalizer: Normalizer) -> Self {
        Checkpoint {
            arch: Architecture::Vae(model.config().clone()),
            normalizer,
            params: model.params().clone(),
        }
    }

    pub fn glow(&self) -> Result<(GlowModel<f32>, PriorConfig)> {
        match &self.arch {
            Architecture::Glow { flow, prior } => Ok((
                GlowModel::from_params(flow.clone(), self.params.clone(), true)?,
                *prior,
            )),
            other => Err(Error::Contract(format!(
                "expected a glow checkpoint, found {}",
                other.kind()
            ))),
        }
    }

    pub fn vae(&self) -> Result<VaeModel<f32>> {
        match &self.arch {
            Architecture::Vae(cfg) => VaeModel::from_params(cfg.clone(), self.params.clone()),
            other => Err(Error::Contract(format!(
                "expected a vae checkpoint, found {}",
                other.kind()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        match &self.arch {
            Architecture::Glow { flow, prior } => {
                put_u32(&mut buf, TAG_GLOW);
                for v in [
                    flow.channels,
                    flow.height,
                    flow.width,
                    flow.blocks,
                    flow.steps,
                    flow.hidden,
                ] {
                    put_u32(&mut buf, v as u32);
                }
                buf.push(match flow.coupling_scale {
                    CouplingScale::Sigmoid => 0,
                    CouplingScale::Exp => 1,
                });
                put_u32(&mut buf, flow.domain_channels() as u32);
                put_f64(&mut buf, prior.k);
                buf.push(prior.constrained as u8);
            }
            Architecture::Vae(cfg) => {
                put_u32(&mut buf, TAG_VAE);
                for v in [cfg.input_dim, cfg.hidden, cfg.latent] {
                    put_u32(&mut buf, v as u32);
                }
                for v in [cfg.beta, cfg.gamma, cfg.velocity_scale] {
                    put_f64(&mut buf, v);
                }
            }
        }
        put_f64(&mut buf, self.normalizer.mean);
        put_f64(&mut buf, self.normalizer.std);
        put_u32(&mut buf, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.dims().len() as u32);
            for &d in t.dims() {
                put_u32(&mut buf, d as u32);
            }
            put_f32s(&mut buf, t.data());
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    /// Load and reject any architecture other than `expected`.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.arch != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                field: "architecture",
                msg: format!("expected {expected:?}, found {:?}", ck.arch),
            });
        }
        Ok(ck)
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let fail = |field: &'static str, msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            field,
            msg,
        };
        let field = |field: &'static str| {
            move |e: Error| Error::Checkpoint {
                path: path.to_path_buf(),
                field,
                msg: e.to_string(),
            }
        };

        let magic = r.take(4, "magic").map_err(field("magic"))?;
        if magic != MAGIC {
            return Err(fail("magic", format!("expected NFAD, found {magic:?}")));
        }
        let version = r.u32("version").map_err(field("version"))?;
        if version != VERSION {
            return Err(fail(
                "version",
                format!("file has version {version}, this build reads version {VERSION}"),
            ));
        }
        let tag = r.u32("architecture tag").map_err(field("architecture"))?;
        let arch = match tag {
            TAG_GLOW => {
                let mut dims = [0usize; 6];
                for d in &mut dims {
                    *d = r.u32("glow descriptor").map_err(field("architecture"))? as usize;
                }
                let coupling_scale = match r.u8("coupling scale").map_err(field("architecture"))? {
                    0 => CouplingScale::Sigmoid,
                    1 => CouplingScale::Exp,
                    other => {
                        return Err(fail(
                            "architecture",
                            format!("unknown coupling scale {other}"),
                        ))
                    }
                };
                let flow = GlowConfig {
                    channels: dims[0],
                    height: dims[1],
                    width: dims[2],
                    blocks: dims[3],
                    steps: dims[4],
                    hidden: dims[5],
                    coupling_scale,
                };
                flow.validate().map_err(field("architecture"))?;
                let zd = r.u32("partition").map_err(field("partition"))? as usize;
                if zd != flow.domain_channels() {
                    return Err(fail(
                        "partition",
                        format!(
                            "z_d has {zd} channels, architecture implies {}",
                            flow.domain_channels()
                        ),
                    ));
                }
                let k = r.f64("prior k").map_err(field("prior"))?;
                let constrained = r.u8("prior mode").map_err(field("prior"))? != 0;
                Architecture::Glow {
                    flow,
                    prior: PriorConfig { k, constrained },
                }
            }
            TAG_VAE => {
                let mut dims = [0usize; 3];
                for d in &mut dims {
                    *d = r.u32("vae descriptor").map_err(field("architecture"))? as usize;
                }
                let mut w = [0f64; 3];
                for v in &mut w {
                    *v = r.f64("vae weights").map_err(field("architecture"))?;
                }
                let cfg = VaeConfig {
                    input_dim: dims[0],
                    hidden: dims[1],
                    latent: dims[2],
                    beta: w[0],
                    gamma: w[1],
                    velocity_scale: w[2],
                };
                cfg.validate().map_err(field("architecture"))?;
                Architecture::Vae(cfg)
            }
            other => {
                return Err(fail(
                    "architecture",
                    format!("unknown architecture tag {other}"),
                ))
            }
        };
        let mean = r.f64("normalizer mean").map_err(field("normalizer"))?;
        let std = r.f64("normalizer std").map_err(field("normalizer"))?;
        let count = r.u32("tensor count").map_err(field("tensors"))?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("tensor name").map_err(field("tensors"))?;
            let ndim = r.u32("tensor rank").map_err(field("tensors"))? as usize;
            if ndim > 8 {
                return Err(fail("tensors", format!("{name}: implausible rank {ndim}")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("tensor dims").map_err(field("tensors"))? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| fail("tensors", format!("{name}: dims overflow")))?;
            let data = r
                .f32_vec(numel, "tensor payload")
                .map_err(field("tensors"))?;
            params.add(
                name,
                Tensor::new(dims, data).map_err(|e| fail("tensors", e.to_string()))?,
            );
        }
        if !r.at_end() {
            return Err(fail(
                "tensors",
                format!("{} trailing bytes", bytes.len() - r.pos()),
            ));
        }
        let ck = Checkpoint {
            arch,
            normalizer: Normalizer { mean, std },
            params,
        };
        // shape and name agreement with the declared architecture
        match &ck.arch {
            Architecture::Glow { .. } => ck.glow().map(|_| ()),
            Architecture::Vae(_) => ck.vae().map(|_| ()),
        }
        .map_err(field("tensors"))?;
        Ok(ck)
    }
}
