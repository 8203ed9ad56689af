//! Log-mel spectrogram patches.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_str, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::synth::{synth_clip, DatasetManifest, SlideRailParams, Split, WaveformClip};
use crate::wav::read_wav;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub fft_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub patch_frames: usize,
    pub patch_hop: usize,
    pub sample_rate: u32,
    pub floor: f64,
    pub window: WindowKind,
    pub center_pad: bool,
}

impl FeatureConfig {
    /// 1024/512 STFT, 128 mels, 64-frame patches overlapping by 48.
    pub fn paper() -> Self {
        FeatureConfig {
            fft_length: 1024,
            hop: 512,
            n_mels: 128,
            patch_frames: 64,
            patch_hop: 16,
            sample_rate: 16_000,
            floor: 1e-10,
            window: WindowKind::Hann,
            center_pad: true,
        }
    }

    /// Same STFT, 32 mels, non-overlapping 16-frame patches.
    pub fn desk() -> Self {
        FeatureConfig {
            n_mels: 32,
            patch_frames: 16,
            patch_hop: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if self.hop == 0 || self.fft_length < self.hop {
            return Err(Error::Config(format!(
                "need 0 < hop <= fft_length, got hop {} and fft_length {}",
                self.hop, self.fft_length
            )));
        }
        if self.patch_frames == 0 || self.patch_hop == 0 {
            return Err(Error::Config(
                "patch_frames and patch_hop must be positive".into(),
            ));
        }
        if !(self.floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced for a clip of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if self.center_pad {
            1 + len / self.hop
        } else if len < self.fft_length {
            0
        } else {
            1 + (len - self.fft_length) / self.hop
        }
    }

    /// Patches produced from `n_frames` frames.
    pub fn patch_count(&self, n_frames: usize) -> usize {
        if n_frames < self.patch_frames {
            0
        } else {
            (n_frames - self.patch_frames) / self.patch_hop + 1
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK filters spanning 0 Hz to Nyquist, `n_mels × (fft_length/2 + 1)` row-major.
pub fn mel_filterbank(n_mels: usize, fft_length: usize, sample_rate: u32) -> Result<Vec<f64>> {
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be at least 1".into()));
    }
    let n_bins = fft_length / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_length as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} of {n_mels} covers no FFT bin ({lo:.1}-{hi:.1} Hz at {bin_hz:.2} Hz per bin)"
            )));
        }
    }
    Ok(weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `n_mels × n_frames`, row-major.
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub clip_id: String,
    pub params: Option<SlideRailParams>,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }
}

/// Reusable STFT + mel projection for one [`FeatureConfig`].
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<f64>,
}

impl LogMelExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_length);
        let n = cfg.fft_length;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg.n_mels, cfg.fft_length, cfg.sample_rate)?;
        Ok(LogMelExtractor {
            cfg: cfg.clone(),
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    /// Power spectrogram `n_frames × (fft_length/2 + 1)`.
    pub fn power_frames(&self, samples: &[f32]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.cfg;
        if samples.len() < cfg.fft_length {
            return Err(Error::Input(format!(
                "clip of {} samples is shorter than one {}-sample frame",
                samples.len(),
                cfg.fft_length
            )));
        }
        let padded: Vec<f64> = if cfg.center_pad {
            reflect_pad(samples, cfg.fft_length / 2)
        } else {
            samples.iter().map(|&s| s as f64).collect()
        };
        let n_frames = cfg.frame_count(samples.len());
        let n_bins = cfg.fft_length / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_length];
        let mut frames = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = f * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            frames.push(buf[..n_bins].iter().map(|c| c.norm_sqr()).collect());
        }
        Ok(frames)
    }

    /// `ln(max(mel power, floor))`.
    pub fn logmel(&self, samples: &[f32]) -> Result<(Vec<f32>, usize)> {
        let frames = self.power_frames(samples)?;
        let n_frames = frames.len();
        let n_mels = self.cfg.n_mels;
        let n_bins = self.cfg.fft_length / 2 + 1;
        let mut values = vec![0.0f32; n_mels * n_frames];
        for (f, power) in frames.iter().enumerate() {
            for m in 0..n_mels {
                let row = &self.filters[m * n_bins..(m + 1) * n_bins];
                let e: f64 = row.iter().zip(power).map(|(w, p)| w * p).sum();
                values[m * n_frames + f] = e.max(self.cfg.floor).ln() as f32;
            }
        }
        Ok((values, n_frames))
    }

    pub fn spectrogram(&self, clip: &WaveformClip, clip_id: &str) -> Result<MelSpectrogram> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::Input(format!(
                "clip sample rate {} Hz, features expect {} Hz",
                clip.sample_rate, self.cfg.sample_rate
            )));
        }
        let (values, n_frames) = self.logmel(&clip.samples)?;
        Ok(MelSpectrogram {
            values,
            n_mels: self.cfg.n_mels,
            n_frames,
            clip_id: clip_id.to_string(),
            params: clip.params,
        })
    }
}

/// numpy-style reflect padding (edge sample not repeated).
fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let reflect = |i: isize| -> f64 {
        let mut j = i;
        if n == 1 {
            return x[0] as f64;
        }
        let period = 2 * (n - 1);
        j = j.rem_euclid(period);
        if j >= n {
            j = period - j;
        }
        x[j as usize] as f64
    };
    (-(pad as isize)..n + pad as isize).map(reflect).collect()
}

pub fn stft_logmel(clip: &WaveformClip, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    LogMelExtractor::new(cfg)?.spectrogram(clip, "")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePatch {
    /// `n_mels × patch_frames`, row-major.
    pub values: Vec<f32>,
    pub n_mels: usize,
    pub frames: usize,
    pub clip_id: String,
    pub patch_index: usize,
    pub velocity: f64,
}

/// Windows of `patch_frames` columns starting every `patch_hop` frames.
pub fn extract_patches(spec: &MelSpectrogram, cfg: &FeatureConfig) -> Result<Vec<FeaturePatch>> {
    if spec.n_frames < cfg.patch_frames {
        return Err(Error::Input(format!(
            "{} frames is fewer than one {}-frame patch",
            spec.n_frames, cfg.patch_frames
        )));
    }
    let velocity = spec.params.map(|p| p.velocity).unwrap_or(f64::NAN);
    let count = cfg.patch_count(spec.n_frames);
    Ok((0..count)
        .map(|p| {
            let start = p * cfg.patch_hop;
            let mut values = Vec::with_capacity(spec.n_mels * cfg.patch_frames);
            for m in 0..spec.n_mels {
                let row = &spec.values[m * spec.n_frames..(m + 1) * spec.n_frames];
                values.extend_from_slice(&row[start..start + cfg.patch_frames]);
            }
            FeaturePatch {
                values,
                n_mels: spec.n_mels,
                frames: cfg.patch_frames,
                clip_id: spec.clip_id.clone(),
                patch_index: p,
                velocity,
            }
        })
        .collect())
}

/// Global scalar standardization fitted on training patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

pub const MIN_STD: f64 = 1e-6;

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn fit<'a>(patches: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let (mut n, mut sum, mut sumsq) = (0usize, 0.0f64, 0.0f64);
        for p in patches {
            for &v in p {
                let v = v as f64;
                n += 1;
                sum += v;
                sumsq += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Input("cannot fit a normalizer on no data".into()));
        }
        let mean = sum / n as f64;
        // two-pass-free variance, clamped against cancellation
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        Ok(Normalizer {
            mean,
            std: var.sqrt().max(MIN_STD),
        })
    }

    pub fn apply(&self, values: &mut [f32]) {
        for v in values {
            *v = ((*v as f64 - self.mean) / self.std) as f32;
        }
    }

    pub fn normalize_patches(&self, patches: &mut [FeaturePatch]) {
        for p in patches {
            self.apply(&mut p.values);
        }
    }
}

// ---------------------------------------------------------------------------
// Feature cache

pub const CACHE_MAGIC: &[u8; 4] = b"NFFT";
pub const CACHE_VERSION: u32 = 1;

/// All patches of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub velocity: f32,
    pub anomalous: bool,
    pub n_mels: usize,
    pub frames: usize,
    /// `n_patches × n_mels × frames`.
    pub data: Vec<f32>,
}

impl ClipFeatures {
    pub fn from_patches(
        clip_id: &str,
        velocity: f64,
        anomalous: bool,
        patches: &[FeaturePatch],
    ) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Input(format!("clip {clip_id} has no patches")))?;
        let data = patches
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .collect();
        Ok(ClipFeatures {
            clip_id: clip_id.to_string(),
            velocity: velocity as f32,
            anomalous,
            n_mels: first.n_mels,
            frames: first.frames,
            data,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.n_mels * self.frames
    }

    pub fn n_patches(&self) -> usize {
        self.data.len() / self.patch_len()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let l = self.patch_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.patch_len())
    }
}

/// Log-mel patches of one clip, unnormalized.
pub fn clip_features(
    extractor: &LogMelExtractor,
    clip: &WaveformClip,
    clip_id: &str,
    velocity: f64,
    anomalous: bool,
) -> Result<ClipFeatures> {
    let spec = extractor.spectrogram(clip, clip_id)?;
    let patches = extract_patches(&spec, extractor.config())?;
    ClipFeatures::from_patches(clip_id, velocity, anomalous, &patches)
}

/// Featurize every WAV listed in a dataset manifest, returning
/// `(training clips, test clips)`.
pub fn featurize_manifest(
    data_dir: &Path,
    manifest: &DatasetManifest,
    cfg: &FeatureConfig,
) -> Result<(Vec<ClipFeatures>, Vec<ClipFeatures>)> {
    let extractor = LogMelExtractor::new(cfg)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in &manifest.entries {
        let clip = read_wav(&data_dir.join(&e.path))?;
        let f = clip_features(
            &extractor,
            &clip,
            &e.clip_id(),
            e.velocity_mm_s,
            e.anomalous,
        )?;
        if e.split == Split::Train {
            train.push(f);
        } else {
            test.push(f);
        }
    }
    Ok((train, test))
}

/// Like [`featurize_manifest`] but renders each clip in memory instead of
/// reading its WAV file.
pub fn synthesize_features(
    manifest: &DatasetManifest,
    cfg: &FeatureConfig,
) -> Result<(Vec<ClipFeatures>, Vec<ClipFeatures>)> {
    let extractor = LogMelExtractor::new(cfg)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in &manifest.entries {
        let clip = synth_clip(&e.params())?;
        let f = clip_features(
            &extractor,
            &clip,
            &e.clip_id(),
            e.velocity_mm_s,
            e.anomalous,
        )?;
        if e.split == Split::Train {
            train.push(f);
        } else {
            test.push(f);
        }
    }
    Ok((train, test))
}

pub fn write_cache(path: &Path, clips: &[ClipFeatures]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut buf, CACHE_VERSION);
    for c in clips {
        put_str(&mut buf, &c.clip_id);
        buf.extend_from_slice(&c.velocity.to_le_bytes());
        buf.push(c.anomalous as u8);
        put_u32(&mut buf, c.n_patches() as u32);
        put_u32(&mut buf, c.n_mels as u32);
        put_u32(&mut buf, c.frames as u32);
        put_f32s(&mut buf, &c.data);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<ClipFeatures>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4, "magic")? != CACHE_MAGIC {
        return Err(r.format_error(0, "bad magic, expected NFFT"));
    }
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(r.format_error(4, format!("unsupported feature cache version {version}")));
    }
    let mut clips = Vec::new();
    while !r.at_end() {
        let clip_id = r.string("clip id")?;
        let velocity = r.f32("velocity")?;
        let anomalous = r.u8("anomalous flag")? != 0;
        let n_patches = r.u32("patch count")? as usize;
        let n_mels = r.u32("patch rows")? as usize;
        let frames = r.u32("patch columns")? as usize;
        let data = r.f32_vec(n_patches * n_mels * frames, "patch payload")?;
        clips.push(ClipFeatures {
            clip_id,
            velocity,
            anomalous,
            n_mels,
            frames,
            data,
        });
    }
    Ok(clips)
}
