//! Spectral checks on the synthesizer, measured with an FFT independent of
//! the feature pipeline.

use nfad::synth::{
    render_components, sliding_band_center_hz, synth_clip, transient_period_s, SlideRailParams,
    CLIP_SAMPLES, SAMPLE_RATE,
};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn params(velocity: f64, anomalous: bool, seed: u64) -> SlideRailParams {
    SlideRailParams {
        velocity,
        distance: 300.0,
        anomalous,
        seed,
    }
}

/// Power spectrum of the whole signal, bins at `k * fs / n` Hz.
fn spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    buf[..x.len() / 2 + 1]
        .iter()
        .map(|c| c.norm_sqr())
        .collect()
}

fn band_energy(spec: &[f64], lo_hz: f64, hi_hz: f64) -> f64 {
    let bin_hz = SAMPLE_RATE as f64 / CLIP_SAMPLES as f64;
    spec.iter()
        .enumerate()
        .filter(|(k, _)| (lo_hz..hi_hz).contains(&(*k as f64 * bin_hz)))
        .map(|(_, p)| p)
        .sum()
}

fn centroid(spec: &[f64]) -> f64 {
    let bin_hz = SAMPLE_RATE as f64 / CLIP_SAMPLES as f64;
    let total: f64 = spec.iter().sum();
    spec.iter()
        .enumerate()
        .map(|(k, p)| k as f64 * bin_hz * p)
        .sum::<f64>()
        / total
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn sliding_energy_grows_with_velocity() {
    let mut last = 0.0;
    for v in (100..=700).step_by(100) {
        let c = render_components(&params(v as f64, false, 7));
        let e = rms(&c.sliding);
        let expected = 0.06 * v as f64 / 750.0;
        assert!(
            (e - expected).abs() < 1e-9 * expected.max(1.0),
            "v={v}: rms {e} vs {expected}"
        );
        assert!(e > last, "v={v}: {e} <= {last}");
        last = e;
    }
}

#[test]
fn sliding_band_tracks_its_centre() {
    let mut last = 0.0;
    for v in (100..=700).step_by(100) {
        let c = render_components(&params(v as f64, false, 11));
        let spec = spectrum(&c.sliding);
        let cen = centroid(&spec);
        let fc = sliding_band_center_hz(v as f64);
        assert!(
            cen > last,
            "v={v}: centroid {cen} did not increase past {last}"
        );
        assert!(
            (cen - fc).abs() < 0.25 * fc,
            "v={v}: centroid {cen} far from {fc}"
        );
        let near = band_energy(&spec, 0.7 * fc, 1.3 * fc);
        assert!(
            near > 0.5 * spec.iter().sum::<f64>(),
            "v={v}: band holds too little energy"
        );
        last = cen;
    }
}

#[test]
fn rattle_adds_energy_near_its_resonance() {
    for seed in 0..3 {
        for v in [100.0, 400.0, 700.0] {
            let normal = synth_clip(&params(v, false, seed)).unwrap();
            let anomalous = synth_clip(&params(v, true, seed)).unwrap();
            let to64 = |c: &[f32]| c.iter().map(|&s| s as f64).collect::<Vec<_>>();
            let en = band_energy(&spectrum(&to64(&normal.samples)), 3800.0, 4200.0);
            let ea = band_energy(&spectrum(&to64(&anomalous.samples)), 3800.0, 4200.0);
            assert!(
                ea > en,
                "seed {seed} v {v}: rattle band {ea} vs normal {en}"
            );
        }
    }
}

#[test]
fn rattle_energy_is_concentrated_near_4khz() {
    for seed in 0..3 {
        let c = render_components(&params(400.0, true, seed));
        let spec = spectrum(&c.rattle);
        let near = band_energy(&spec, 3500.0, 4500.0);
        let total = band_energy(&spec, 0.0, 8000.0);
        assert!(near > 0.5 * total, "seed {seed}: {near} of {total}");
    }
}

#[test]
fn normal_clips_have_no_rattle_and_anomalous_ones_share_the_rest() {
    let n = render_components(&params(300.0, false, 5));
    let a = render_components(&params(300.0, true, 5));
    assert!(n.rattle.iter().all(|&s| s == 0.0));
    assert!(a.rattle.iter().any(|&s| s != 0.0));
    assert_eq!(n.background, a.background);
    assert_eq!(n.sliding, a.sliding);
    assert_eq!(n.transients, a.transients);
}

#[test]
fn transients_repeat_at_the_reversal_period() {
    let p = params(400.0, false, 3);
    let c = render_components(&p);
    let period = transient_period_s(p.velocity, p.distance);
    let fs = SAMPLE_RATE as f64;
    // autocorrelation of the envelope peaks at the period
    let env: Vec<f64> = c.transients.iter().map(|s| s.abs()).collect();
    let lag_of = |t: f64| (t * fs).round() as usize;
    let corr = |lag: usize| env.iter().zip(&env[lag..]).map(|(a, b)| a * b).sum::<f64>();
    let at_period = corr(lag_of(period));
    let at_half = corr(lag_of(period / 2.0));
    assert!(at_period > 5.0 * at_half, "{at_period} vs {at_half}");
}

#[test]
fn clips_are_deterministic_and_bounded() {
    let p = params(250.0, true, 42);
    let a = synth_clip(&p).unwrap();
    let b = synth_clip(&p).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples.len(), CLIP_SAMPLES);
    assert!(a.peak() <= 0.9);
    let other = synth_clip(&params(250.0, true, 43)).unwrap();
    assert_ne!(a.samples, other.samples);
}

#[test]
fn out_of_range_parameters_are_rejected() {
    assert!(synth_clip(&params(20.0, false, 0)).is_err());
    assert!(synth_clip(&params(800.0, false, 0)).is_err());
    let mut p = params(300.0, false, 0);
    p.distance = 50.0;
    assert!(synth_clip(&p).is_err());
}
