//! Synthetic slide-rail sounds.
//!
//! A clip is the sum of four independently seeded components:
//!
//! * pink background noise at a fixed RMS,
//! * a "sliding" noise band centred at `500 + 8·v` Hz whose RMS grows
//!   linearly with velocity,
//! * carriage-reversal transients, one every `2·d / v` seconds,
//! * for anomalous clips, a rattle: a jittered 12 Hz impulse train ringing
//!   a 4 kHz resonance. The rattle does not depend on velocity.
//!
//! Generation is a pure function of [`SlideRailParams`].

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wav;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SECONDS: u32 = 10;
pub const CLIP_SAMPLES: usize = (SAMPLE_RATE * CLIP_SECONDS) as usize;

pub const VELOCITY_RANGE: (f64, f64) = (50.0, 750.0);
pub const DISTANCE_RANGE: (f64, f64) = (100.0, 500.0);

const BACKGROUND_RMS: f64 = 0.01;
const SLIDING_RMS_AT_MAX: f64 = 0.06;
const TRANSIENT_PEAK_AT_MAX: f64 = 0.12;
const RATTLE_AMPLITUDE: f64 = 0.05;
const RATTLE_RATE_HZ: f64 = 12.0;
const RATTLE_RESONANCE_HZ: f64 = 4000.0;
const RATTLE_DECAY_S: f64 = 0.004;
const PEAK_LIMIT: f64 = 0.9;

/// Centre frequency of the sliding band, linear in velocity.
pub fn sliding_band_center_hz(velocity: f64) -> f64 {
    500.0 + 8.0 * velocity
}

/// Seconds between carriage reversals at the given velocity and stroke distance.
pub fn transient_period_s(velocity: f64, distance: f64) -> f64 {
    2.0 * distance / velocity
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideRailParams {
    /// mm/s
    pub velocity: f64,
    /// mm
    pub distance: f64,
    pub anomalous: bool,
    pub seed: u64,
}

impl SlideRailParams {
    pub fn validate(&self) -> Result<()> {
        let (vlo, vhi) = VELOCITY_RANGE;
        let (dlo, dhi) = DISTANCE_RANGE;
        if !(vlo..=vhi).contains(&self.velocity) {
            return Err(Error::Param(format!(
                "velocity {} mm/s outside [{vlo}, {vhi}]",
                self.velocity
            )));
        }
        if !(dlo..=dhi).contains(&self.distance) {
            return Err(Error::Param(format!(
                "distance {} mm outside [{dlo}, {dhi}]",
                self.distance
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Generation parameters, when known.
    pub params: Option<SlideRailParams>,
}

impl WaveformClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// The separately rendered parts of a clip, before summation and limiting.
#[derive(Clone, Debug)]
pub struct Components {
    pub background: Vec<f64>,
    pub sliding: Vec<f64>,
    pub transients: Vec<f64>,
    pub rattle: Vec<f64>,
}

impl Components {
    pub fn mix(&self) -> Vec<f32> {
        (0..self.background.len())
            .map(|i| {
                let s = self.background[i] + self.sliding[i] + self.transients[i] + self.rattle[i];
                s.clamp(-PEAK_LIMIT, PEAK_LIMIT) as f32
            })
            .collect()
    }
}

/// Render each component without range checks.
///
/// Velocity-scaled components vanish at `velocity == 0`, and the rattle
/// vanishes for normal clips.
pub fn render_components(params: &SlideRailParams) -> Components {
    let n = CLIP_SAMPLES;
    let fs = SAMPLE_RATE as f64;
    let v = params.velocity;
    let vel_gain = (v / VELOCITY_RANGE.1).max(0.0);

    let background = {
        let mut rng = component_rng(params.seed, 0);
        let pink = pink_noise(&mut rng, n);
        scale_to_rms(pink, BACKGROUND_RMS)
    };

    let sliding = if vel_gain > 0.0 {
        let mut rng = component_rng(params.seed, 1);
        let white = white_noise(&mut rng, n);
        let fc = sliding_band_center_hz(v).min(0.45 * fs);
        let mut band = Biquad::bandpass(fc, 3.0, fs).run(&white);
        band = Biquad::bandpass(fc, 3.0, fs).run(&band);
        scale_to_rms(band, SLIDING_RMS_AT_MAX * vel_gain)
    } else {
        vec![0.0; n]
    };

    let transients = if vel_gain > 0.0 && params.distance > 0.0 {
        let mut rng = component_rng(params.seed, 2);
        let period = transient_period_s(v, params.distance);
        let burst_len = (0.2 * fs) as usize;
        let burst: Vec<f64> = {
            let noise = white_noise(&mut rng, burst_len);
            let shaped: Vec<f64> = noise
                .iter()
                .enumerate()
                .map(|(i, w)| w * (-(i as f64) / (0.03 * fs)).exp())
                .collect();
            let filtered = Biquad::bandpass(1200.0, 2.0, fs).run(&shaped);
            let peak = filtered
                .iter()
                .fold(0.0f64, |m, s| m.max(s.abs()))
                .max(1e-12);
            filtered.iter().map(|s| s / peak).collect()
        };
        let mut out = vec![0.0; n];
        let mut t = rng.gen_range(0.0..1.0) * period;
        while t < n as f64 / fs {
            let start = (t * fs) as usize;
            for (k, b) in burst.iter().enumerate() {
                if start + k >= n {
                    break;
                }
                out[start + k] += TRANSIENT_PEAK_AT_MAX * vel_gain * b;
            }
            t += period;
        }
        out
    } else {
        vec![0.0; n]
    };

    let rattle = if params.anomalous {
        let mut rng = component_rng(params.seed, 3);
        let ring_len = (8.0 * RATTLE_DECAY_S * fs) as usize;
        let ring: Vec<f64> = (0..ring_len)
            .map(|i| {
                let t = i as f64 / fs;
                (-t / RATTLE_DECAY_S).exp() * (2.0 * PI * RATTLE_RESONANCE_HZ * t).sin()
            })
            .collect();
        let mut out = vec![0.0; n];
        let mean_gap = 1.0 / RATTLE_RATE_HZ;
        let mut t = rng.gen_range(0.0..mean_gap);
        while t < n as f64 / fs {
            let start = (t * fs) as usize;
            let amp = RATTLE_AMPLITUDE * rng.gen_range(0.7..1.0);
            for (k, r) in ring.iter().enumerate() {
                if start + k >= n {
                    break;
                }
                out[start + k] += amp * r;
            }
            t += mean_gap * rng.gen_range(0.9..1.1);
        }
        out
    } else {
        vec![0.0; n]
    };

    Components {
        background,
        sliding,
        transients,
        rattle,
    }
}

/// Generate a validated 10 s, 16 kHz clip.
pub fn synth_clip(params: &SlideRailParams) -> Result<WaveformClip> {
    params.validate()?;
    Ok(WaveformClip {
        samples: render_components(params).mix(),
        sample_rate: SAMPLE_RATE,
        params: Some(*params),
    })
}

fn component_rng(seed: u64, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component);
    rng
}

fn white_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Paul Kellet's economy pink filter over white noise.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn scale_to_rms(mut x: Vec<f64>, target: f64) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

/// RBJ cookbook biquad.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Band-pass with 0 dB peak gain.
    fn bandpass(fc: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: alpha / a0,
            b1: 0.0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b0 * x0 + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Dataset layout

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestNormal,
    TestAnomalous,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestNormal => "test-normal",
            Split::TestAnomalous => "test-anomalous",
        }
    }

    pub fn is_test(self) -> bool {
        !matches!(self, Split::Train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_velocities: Vec<f64>,
    pub train_distances: Vec<f64>,
    pub test_velocities: Vec<f64>,
    pub test_distance: f64,
    pub clips_per_set: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    /// Seven training velocities × three distances; fifteen test velocities at 500 mm.
    fn default() -> Self {
        DatasetConfig {
            train_velocities: (1..=7).map(|i| 100.0 * i as f64).collect(),
            train_distances: vec![100.0, 250.0, 500.0],
            test_velocities: (1..=15).map(|i| 50.0 * i as f64).collect(),
            test_distance: 500.0,
            clips_per_set: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub velocity_mm_s: f64,
    pub distance_mm: f64,
    pub anomalous: bool,
    pub split: Split,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn params(&self) -> SlideRailParams {
        SlideRailParams {
            velocity: self.velocity_mm_s,
            distance: self.distance_mm,
            anomalous: self.anomalous,
            seed: self.seed,
        }
    }

    /// Stable identifier: the file stem.
    pub fn clip_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seen_velocities: Vec<f64>,
    pub unseen_velocities: Vec<f64>,
    pub sliding_band_hz: String,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Entries and velocity sets implied by a config, without rendering audio.
    pub fn plan(config: &DatasetConfig) -> Result<Self> {
        if config.train_velocities.is_empty() || config.test_velocities.is_empty() {
            return Err(Error::Config("empty velocity list".into()));
        }
        if config.train_distances.is_empty() {
            return Err(Error::Config("empty distance list".into()));
        }
        if config.clips_per_set == 0 {
            return Err(Error::Config("empty dataset: clips_per_set is 0".into()));
        }
        let mut entries = Vec::new();
        let mut push = |split: Split, v: f64, d: f64, anomalous: bool, idx: usize| {
            let tag = format!(
                "{}_v{:03}_d{:03}_{:02}",
                split.as_str(),
                v.round() as i64,
                d.round() as i64,
                idx
            );
            let seed = mix_seed(config.seed, &tag);
            entries.push(ManifestEntry {
                path: PathBuf::from(split.as_str()).join(format!("{tag}.wav")),
                velocity_mm_s: v,
                distance_mm: d,
                anomalous,
                split,
                seed,
            });
        };
        for &v in &config.train_velocities {
            for &d in &config.train_distances {
                for i in 0..config.clips_per_set {
                    push(Split::Train, v, d, false, i);
                }
            }
        }
        for &v in &config.test_velocities {
            for i in 0..config.clips_per_set {
                push(Split::TestNormal, v, config.test_distance, false, i);
            }
            for i in 0..config.clips_per_set {
                push(Split::TestAnomalous, v, config.test_distance, true, i);
            }
        }
        let seen: Vec<f64> = dedup_sorted(config.train_velocities.clone());
        let unseen: Vec<f64> = dedup_sorted(
            config
                .test_velocities
                .iter()
                .copied()
                .filter(|v| !seen.contains(v))
                .collect(),
        );
        for e in &entries {
            e.params().validate()?;
        }
        Ok(DatasetManifest {
            seen_velocities: seen,
            unseen_velocities: unseen,
            sliding_band_hz: "500 + 8*v".to_string(),
            entries,
        })
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Render every clip of `config` to WAV files under `output_dir` and write
/// `manifest.json` beside them.
pub fn make_dataset(output_dir: &Path, config: &DatasetConfig) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::plan(config)?;
    for split in [Split::Train, Split::TestNormal, Split::TestAnomalous] {
        let dir = output_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for entry in &manifest.entries {
        let clip = synth_clip(&entry.params())?;
        wav::write_wav(&clip, &output_dir.join(&entry.path))?;
    }
    manifest.save(&output_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn dedup_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// splitmix64 over the base seed and an FNV-1a hash of `tag`.
fn mix_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
