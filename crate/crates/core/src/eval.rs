//! AUC, seen/unseen velocity splits, method comparison and velocity reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nfad_autodiff::Tensor;
use serde::Serialize;

use crate::checkpoint::{Architecture, Checkpoint};
use crate::error::{Error, Result};
use crate::features::ClipFeatures;
use crate::flow::GlowModel;
use crate::prior::{self, clip_score, gaussian_logpdf, Aggregation, PriorConfig};
use crate::vae::VaeModel;

const SCORE_BATCH: usize = 256;
const VELOCITY_MATCH_TOL: f64 = 1e-3;

/// Pairwise Mann–Whitney AUC: the fraction of (normal, anomalous) pairs in
/// which the anomalous score is higher, ties counting one half.
pub fn auc(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::Contract(format!(
            "AUC needs both classes, got {} normal and {} anomalous scores",
            normal.len(),
            anomalous.len()
        )));
    }
    let mut wins = 0u64; // counted in halves so the sum stays exact
    for &a in anomalous {
        for &n in normal {
            wins += if a > n {
                2
            } else if a == n {
                1
            } else {
                0
            };
        }
    }
    Ok(wins as f64 / (2 * normal.len() * anomalous.len()) as f64)
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One scored clip.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub velocity: f64,
    pub anomalous: bool,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitAuc {
    pub seen: f64,
    pub unseen: f64,
    pub all: f64,
}

/// The default seen (training) and unseen velocity lists in mm/s.
pub fn default_velocity_sets() -> (Vec<f64>, Vec<f64>) {
    let seen = (1..=7).map(|i| 100.0 * i as f64).collect();
    let unseen = (0..8).map(|i| 50.0 + 100.0 * i as f64).collect();
    (seen, unseen)
}

fn member(set: &[f64], v: f64) -> bool {
    set.iter().any(|&s| (s - v).abs() < VELOCITY_MATCH_TOL)
}

pub fn split_auc(rows: &[ClipScore], seen: &[f64], unseen: &[f64]) -> Result<SplitAuc> {
    let mut parts: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    for r in rows {
        let slot = match (member(seen, r.velocity), member(unseen, r.velocity)) {
            (true, false) => 0,
            (false, true) => 1,
            (true, true) => {
                return Err(Error::Data(format!(
                    "velocity {} is both seen and unseen",
                    r.velocity
                )));
            }
            (false, false) => {
                return Err(Error::Data(format!(
                    "clip {} has velocity {} outside the seen and unseen sets",
                    r.clip_id, r.velocity
                )));
            }
        };
        let (normal, anomalous) = &mut parts[slot];
        if r.anomalous {
            anomalous.push(r.score);
        } else {
            normal.push(r.score);
        }
    }
    let all_n: Vec<f64> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
    let all_a: Vec<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    Ok(SplitAuc {
        seen: auc(&parts[0].0, &parts[0].1)?,
        unseen: auc(&parts[1].0, &parts[1].1)?,
        all: auc(&all_n, &all_a)?,
    })
}

// ---------------------------------------------------------------------------
// Scoring

/// Per-clip Glow scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlowClipScores {
    pub clip_id: String,
    pub velocity: f64,
    pub anomalous: bool,
    /// Mean over patches of `−ln p(z_c)`.
    pub score_invariant: f64,
    /// Mean over patches of `−ln p(x)` with a zero-mean prior on every latent.
    pub score_full_nll: f64,
    /// Mean of `mean(z_d)/k`; only for constrained models.
    pub v_estimate: Option<f64>,
}

fn normalized_patches(clip: &ClipFeatures, ck: &Checkpoint) -> Vec<f32> {
    let mut data = clip.data.clone();
    ck.normalizer.apply(&mut data);
    data
}

/// Check the factorized prior against a joint density over the concatenated
/// latent on every sample of a batch.
fn check_factorization(
    bundle: &crate::flow::LatentBundle<f32>,
    parts: &[prior::ScoreBreakdown],
) -> Result<()> {
    for (i, p) in parts.iter().enumerate() {
        let joint = gaussian_logpdf(
            bundle
                .zc_sample(i)
                .chain(bundle.zd_sample(i).iter().copied()),
            0.0,
        );
        let factorized = p.log_p_z0();
        if (joint - factorized).abs() > 1e-12 * joint.abs().max(1.0) {
            return Err(Error::Contract(format!(
                "log p(z0) = {joint} but log p(z_c) + log p(z_d) = {factorized}"
            )));
        }
    }
    Ok(())
}

pub fn score_glow(
    ck: &Checkpoint,
    clips: &[ClipFeatures],
    how: Aggregation,
) -> Result<Vec<GlowClipScores>> {
    let (model, prior) = ck.glow()?;
    score_glow_model(&model, &prior, ck, clips, how)
}

fn score_glow_model(
    model: &GlowModel<f32>,
    prior: &PriorConfig,
    ck: &Checkpoint,
    clips: &[ClipFeatures],
    how: Aggregation,
) -> Result<Vec<GlowClipScores>> {
    let [c, h, w] = model.config().input_dims();
    let unit = PriorConfig::unconstrained();
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.n_mels != h || clip.frames != w {
            return Err(Error::Input(format!(
                "clip {} has {}×{} patches, model expects {h}×{w}",
                clip.clip_id, clip.n_mels, clip.frames
            )));
        }
        let data = normalized_patches(clip, ck);
        let (mut inv, mut full, mut vel) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in data.chunks(SCORE_BATCH * clip.patch_len()) {
            let n = chunk.len() / clip.patch_len();
            let x = Tensor::new(vec![n, c, h, w], chunk.to_vec())?;
            let bundle = model.encode(&x)?;
            let parts = prior::breakdown(&bundle, &unit, None)?;
            check_factorization(&bundle, &parts)?;
            inv.extend(parts.iter().map(|p| p.invariant_score()));
            full.extend(parts.iter().map(|p| p.nll()));
            if prior.constrained {
                vel.extend(prior::estimate_velocity(&bundle, prior)?);
            }
        }
        out.push(GlowClipScores {
            clip_id: clip.clip_id.clone(),
            velocity: clip.velocity as f64,
            anomalous: clip.anomalous,
            score_invariant: clip_score(&inv, how)?,
            score_full_nll: clip_score(&full, how)?,
            v_estimate: if prior.constrained {
                Some(clip_score(&vel, Aggregation::Mean)?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

/// Per-clip VAE scores: `(reconstruction MSE, KLD)` at the posterior mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VaeClipScores {
    pub clip_id: String,
    pub velocity: f64,
    pub anomalous: bool,
    pub recon: f64,
    pub kld: f64,
}

pub fn score_vae(
    ck: &Checkpoint,
    clips: &[ClipFeatures],
    how: Aggregation,
) -> Result<Vec<VaeClipScores>> {
    let model: VaeModel<f32> = ck.vae()?;
    let dim = model.config().input_dim;
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.patch_len() != dim {
            return Err(Error::Input(format!(
                "clip {} has {}-value patches, model expects {dim}",
                clip.clip_id,
                clip.patch_len()
            )));
        }
        let data = normalized_patches(clip, ck);
        let (mut rec, mut kld) = (Vec::new(), Vec::new());
        for chunk in data.chunks(SCORE_BATCH * dim) {
            let x = Tensor::new(vec![chunk.len() / dim, dim], chunk.to_vec())?;
            for (r, k) in model.scores(&x)? {
                rec.push(r);
                kld.push(k);
            }
        }
        out.push(VaeClipScores {
            clip_id: clip.clip_id.clone(),
            velocity: clip.velocity as f64,
            anomalous: clip.anomalous,
            recon: clip_score(&rec, how)?,
            kld: clip_score(&kld, how)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Method comparison

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Method {
    VaeRecon,
    VaeKld,
    SupervisedVaeKld,
    GlowSingleNll,
    GlowSingleProposed,
    GlowMultiNll,
    GlowMultiProposed,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::VaeRecon,
        Method::VaeKld,
        Method::SupervisedVaeKld,
        Method::GlowSingleNll,
        Method::GlowSingleProposed,
        Method::GlowMultiNll,
        Method::GlowMultiProposed,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::VaeRecon => "VAE (reconstruction error)",
            Method::VaeKld => "VAE (KLD)",
            Method::SupervisedVaeKld => "VAE with velocity loss (KLD)",
            Method::GlowSingleNll => "Single-scale Glow (NLL)",
            Method::GlowSingleProposed => "Single-scale Glow (proposed)",
            Method::GlowMultiNll => "Multi-scale Glow (NLL)",
            Method::GlowMultiProposed => "Multi-scale Glow (proposed)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::VaeRecon => "vae-recon",
            Method::VaeKld => "vae-kld",
            Method::SupervisedVaeKld => "vae-velocity-kld",
            Method::GlowSingleNll => "glow-single-nll",
            Method::GlowSingleProposed => "glow-single-proposed",
            Method::GlowMultiNll => "glow-multi-nll",
            Method::GlowMultiProposed => "glow-multi-proposed",
        }
    }

    /// Checkpoint file name inside a run directory.
    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Method::VaeRecon | Method::VaeKld => "vae.nfad",
            Method::SupervisedVaeKld => "vae-velocity.nfad",
            Method::GlowSingleNll => "glow-single-unconstrained.nfad",
            Method::GlowSingleProposed => "glow-single-constrained.nfad",
            Method::GlowMultiNll => "glow-multi-unconstrained.nfad",
            Method::GlowMultiProposed => "glow-multi-constrained.nfad",
        }
    }

    pub fn is_glow(self) -> bool {
        matches!(
            self,
            Method::GlowSingleNll
                | Method::GlowSingleProposed
                | Method::GlowMultiNll
                | Method::GlowMultiProposed
        )
    }
}

/// Score every clip with one method.
pub fn method_scores(
    method: Method,
    ck: &Checkpoint,
    clips: &[ClipFeatures],
    how: Aggregation,
) -> Result<Vec<ClipScore>> {
    let rows = if method.is_glow() {
        score_glow(ck, clips, how)?
            .into_iter()
            .map(|s| ClipScore {
                score: match method {
                    Method::GlowSingleProposed | Method::GlowMultiProposed => s.score_invariant,
                    _ => s.score_full_nll,
                },
                clip_id: s.clip_id,
                velocity: s.velocity,
                anomalous: s.anomalous,
            })
            .collect()
    } else {
        score_vae(ck, clips, how)?
            .into_iter()
            .map(|s| ClipScore {
                score: if method == Method::VaeRecon {
                    s.recon
                } else {
                    s.kld
                },
                clip_id: s.clip_id,
                velocity: s.velocity,
                anomalous: s.anomalous,
            })
            .collect()
    };
    Ok(rows)
}

/// Min, mean and max of a set of scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        Some(Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VelocitySummary {
    pub velocity: f64,
    pub normal: Option<Summary>,
    pub anomalous: Option<Summary>,
}

pub fn per_velocity(rows: &[ClipScore]) -> Vec<VelocitySummary> {
    let mut groups: BTreeMap<i64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let g = groups
            .entry((r.velocity * 1000.0).round() as i64)
            .or_default();
        if r.anomalous {
            g.1.push(r.score);
        } else {
            g.0.push(r.score);
        }
    }
    groups
        .into_iter()
        .map(|(v, (n, a))| VelocitySummary {
            velocity: v as f64 / 1000.0,
            normal: Summary::of(&n),
            anomalous: Summary::of(&a),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: Method,
    /// `None` when the method's checkpoint was missing.
    pub auc: Option<SplitAuc>,
    pub checkpoint: PathBuf,
    pub per_velocity: Vec<VelocitySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<MethodRow>,
}

impl EvalReport {
    pub fn row(&self, m: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    pub fn auc(&self, m: Method) -> Option<SplitAuc> {
        self.row(m).and_then(|r| r.auc)
    }

    pub fn missing(&self) -> Vec<&Path> {
        self.rows
            .iter()
            .filter(|r| r.auc.is_none())
            .map(|r| r.checkpoint.as_path())
            .collect()
    }
}

/// Evaluate every method whose checkpoint exists in `run_dir`.
pub fn compare_methods(
    run_dir: &Path,
    clips: &[ClipFeatures],
    seen: &[f64],
    unseen: &[f64],
    how: Aggregation,
) -> Result<EvalReport> {
    let mut cache: BTreeMap<PathBuf, Checkpoint> = BTreeMap::new();
    let mut rows = Vec::new();
    for m in Method::ALL {
        let path = run_dir.join(m.checkpoint_file());
        if !path.exists() {
            log::warn!("{}: checkpoint {} missing", m.label(), path.display());
            rows.push(MethodRow {
                method: m,
                auc: None,
                checkpoint: path,
                per_velocity: Vec::new(),
            });
            continue;
        }
        if !cache.contains_key(&path) {
            cache.insert(path.clone(), Checkpoint::load(&path)?);
        }
        let scores = method_scores(m, &cache[&path], clips, how)?;
        rows.push(MethodRow {
            method: m,
            auc: Some(split_auc(&scores, seen, unseen)?),
            checkpoint: path,
            per_velocity: per_velocity(&scores),
        });
    }
    Ok(EvalReport { rows })
}

pub fn format_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let width = Method::ALL
        .iter()
        .map(|m| m.label().len())
        .max()
        .unwrap_or(0);
    let _ = writeln!(
        s,
        "{:<width$}  {:>6}  {:>6}  {:>6}",
        "Method", "Seen", "Unseen", "All"
    );
    let _ = writeln!(s, "{}", "-".repeat(width + 26));
    for r in &report.rows {
        match r.auc {
            Some(a) => {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>6.1}  {:>6.1}  {:>6.1}",
                    r.method.label(),
                    100.0 * a.seen,
                    100.0 * a.unseen,
                    100.0 * a.all
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>6}  {:>6}  {:>6}",
                    r.method.label(),
                    "absent",
                    "",
                    ""
                );
            }
        }
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// AUCs in percent; absent methods have empty cells.
pub fn write_table_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut s = String::from("method,label,auc_seen,auc_unseen,auc_all\n");
    for r in &report.rows {
        let cells = match r.auc {
            Some(a) => format!(
                "{:.4},{:.4},{:.4}",
                100.0 * a.seen,
                100.0 * a.unseen,
                100.0 * a.all
            ),
            None => ",,".into(),
        };
        let _ = writeln!(s, "{},\"{}\",{cells}", r.method.key(), r.method.label());
    }
    write(path, &s)
}

/// One gnuplot data file per method: velocity, then mean/min/max of the
/// normal and anomalous scores at that velocity.
pub fn write_score_plots(dir: &Path, report: &EvalReport) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for r in report.rows.iter().filter(|r| r.auc.is_some()) {
        let path = dir.join(format!("scores-{}.dat", r.method.key()));
        let mut s = String::from("# velocity normal_mean normal_min normal_max anomalous_mean anomalous_min anomalous_max\n");
        let cell = |x: Option<Summary>| match x {
            Some(v) => format!("{} {} {}", v.mean, v.min, v.max),
            None => "NaN NaN NaN".into(),
        };
        for v in &r.per_velocity {
            let _ = writeln!(s, "{} {} {}", v.velocity, cell(v.normal), cell(v.anomalous));
        }
        write(&path, &s)?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_glow_scores_csv(path: &Path, rows: &[GlowClipScores]) -> Result<()> {
    let mut s =
        String::from("clip_id,velocity,anomalous,score_invariant,score_full_nll,v_estimate\n");
    for r in rows {
        let v = r.v_estimate.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{v}",
            r.clip_id, r.velocity, r.anomalous as u8, r.score_invariant, r.score_full_nll
        );
    }
    write(path, &s)
}

pub fn write_vae_scores_csv(path: &Path, rows: &[VaeClipScores]) -> Result<()> {
    let mut s = String::from("clip_id,velocity,anomalous,score_recon,score_kld\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.clip_id, r.velocity, r.anomalous as u8, r.recon, r.kld
        );
    }
    write(path, &s)
}

// ---------------------------------------------------------------------------
// Velocity estimation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VelocityReport {
    /// `(clip id, true velocity, estimate)`.
    pub pairs: Vec<(String, f64, f64)>,
    pub pearson: Option<f64>,
    pub zero_variance: bool,
}

/// Estimates for normal clips at `velocities` (typically the unseen set).
pub fn velocity_report(
    ck: &Checkpoint,
    clips: &[ClipFeatures],
    velocities: &[f64],
) -> Result<VelocityReport> {
    match &ck.arch {
        Architecture::Glow { prior, .. } if prior.constrained => {}
        Architecture::Glow { .. } => {
            return Err(Error::Contract(
                "velocity estimates need a constrained-prior checkpoint".into(),
            ));
        }
        Architecture::Vae(_) => {
            return Err(Error::Contract(
                "velocity estimates need a glow checkpoint".into(),
            ));
        }
    }
    let selected: Vec<ClipFeatures> = clips
        .iter()
        .filter(|c| !c.anomalous && member(velocities, c.velocity as f64))
        .cloned()
        .collect();
    if selected.is_empty() {
        return Err(Error::Data(
            "no normal clips at the requested velocities".into(),
        ));
    }
    let scores = score_glow(ck, &selected, Aggregation::Mean)?;
    let pairs: Vec<(String, f64, f64)> = scores
        .into_iter()
        .map(|s| (s.clip_id, s.velocity, s.v_estimate.expect("constrained")))
        .collect();
    Ok(velocity_pairs_report(pairs))
}

pub fn velocity_pairs_report(pairs: Vec<(String, f64, f64)>) -> VelocityReport {
    let v: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let e: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let pearson = pearson(&v, &e);
    VelocityReport {
        pairs,
        pearson,
        zero_variance: pearson.is_none(),
    }
}

pub fn write_velocity_csv(path: &Path, report: &VelocityReport) -> Result<()> {
    let mut s = String::from("clip_id,velocity,v_estimate\n");
    for (id, v, e) in &report.pairs {
        let _ = writeln!(s, "{id},{v},{e}");
    }
    match report.pearson {
        Some(r) => {
            let _ = writeln!(s, "# pearson_r,{r}");
        }
        None => s.push_str("# pearson_r,undefined (zero variance)\n"),
    }
    write(path, &s)
}
