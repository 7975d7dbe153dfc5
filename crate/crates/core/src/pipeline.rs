//! End-to-end orchestration: manifests, grouped k-fold CV, model-stack
//! training, the online predict path and table-style evaluation reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    anatomy_context, AngulationFeatures, AnatomyContext, CentroidFeatures,
    ANGULATION_FEATURE_NAMES, CENTROID_FEATURE_NAMES,
};
use crate::geometry::{angle3d, PlaneAngles};
use crate::search::{pick_final, run_nsga2, GaConfig, Genome, Objectives, SearchDataset};
use crate::segmentation::SegParams;
use crate::svr::{self, SvrModel};
use crate::volume::{PhysicalPoint, Volume};

/// Exact plane/centroid truth attached to a case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub lv_centroid_mm: PhysicalPoint,
    pub sa: PlaneAngles,
    pub ch4: PlaneAngles,
    pub ch2: PlaneAngles,
    pub ch2_axial_planned: bool,
}

/// One dataset entry: a (possibly noised) volume of a patient with truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub patient_id: String,
    /// None for the original (un-degraded) volume.
    pub snr_tag: Option<f64>,
    pub volume_path: Option<PathBuf>,
    pub centroid_features: Option<CentroidFeatures>,
    pub angulation_features: Option<AngulationFeatures>,
    pub truth: GroundTruth,
}

/// Manifest serialization wrapper.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub cases: Vec<Case>,
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(m)?;
    crate::volume::atomic_write(path, &bytes)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Patient-grouped k-fold over bare patient-id labels: every row follows
/// its patient, patients shuffled by seed into k near-equal groups.
pub fn grouped_kfold_ids(
    ids: &[&str],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut patients: Vec<&str> = Vec::new();
    for &id in ids {
        if !patients.contains(&id) {
            patients.push(id);
        }
    }
    if patients.len() < k {
        return Err(Error::Precondition(format!(
            "{} distinct patients, need at least k = {k}",
            patients.len()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    // near-equal contiguous groups of the shuffled patient list
    let mut group_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        group_of.insert(p, i * k / patients.len());
    }
    let mut folds = vec![(Vec::new(), Vec::new()); k];
    for (ri, id) in ids.iter().enumerate() {
        let g = group_of[id];
        for (fi, fold) in folds.iter_mut().enumerate() {
            if fi == g {
                fold.1.push(ri);
            } else {
                fold.0.push(ri);
            }
        }
    }
    Ok(folds)
}

/// Patient-grouped k-fold split of dataset cases.
pub fn grouped_kfold(cases: &[Case], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let ids: Vec<&str> = cases.iter().map(|c| c.patient_id.as_str()).collect();
    grouped_kfold_ids(&ids, k, seed)
}

/// Axial-planned detection tolerance on the truth 2CH elevation, degrees.
pub const CH2_AXIAL_TOLERANCE_DEG: f64 = 0.5;

/// Fill a case's feature records from its volume; the SA-init features are
/// seeded by the ground-truth LV centroid (training-time convention).
pub fn populate_features(case: &Case, v: &Volume, seg: &SegParams) -> Result<Case> {
    let ctx = anatomy_context(v, seg)?;
    let sa_init = crate::features::geometric_sa_init(v, &case.truth.lv_centroid_mm, seg)?;
    let mut out = case.clone();
    out.centroid_features = Some(ctx.centroid_features());
    out.angulation_features = Some(ctx.angulation_features(&sa_init));
    Ok(out)
}

/// The nine regression targets of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    LvCx,
    LvCy,
    LvCz,
    SaAz,
    SaEl,
    Ch4Az,
    Ch4El,
    Ch2Az,
    Ch2El,
}

pub const ALL_TARGETS: [Target; 9] = [
    Target::LvCx,
    Target::LvCy,
    Target::LvCz,
    Target::SaAz,
    Target::SaEl,
    Target::Ch4Az,
    Target::Ch4El,
    Target::Ch2Az,
    Target::Ch2El,
];

impl Target {
    pub fn name(&self) -> &'static str {
        match self {
            Target::LvCx => "lv_cx",
            Target::LvCy => "lv_cy",
            Target::LvCz => "lv_cz",
            Target::SaAz => "sa_az",
            Target::SaEl => "sa_el",
            Target::Ch4Az => "ch4_az",
            Target::Ch4El => "ch4_el",
            Target::Ch2Az => "ch2_az",
            Target::Ch2El => "ch2_el",
        }
    }

    pub fn from_name(s: &str) -> Result<Target> {
        ALL_TARGETS
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown target '{s}'")))
    }

    pub fn is_centroid(&self) -> bool {
        matches!(self, Target::LvCx | Target::LvCy | Target::LvCz)
    }

    /// Azimuth residuals wrap at 360 degrees.
    pub fn wraps(&self) -> bool {
        matches!(self, Target::SaAz | Target::Ch4Az | Target::Ch2Az)
    }

    pub fn truth_value(&self, t: &GroundTruth) -> f64 {
        match self {
            Target::LvCx => t.lv_centroid_mm.x,
            Target::LvCy => t.lv_centroid_mm.y,
            Target::LvCz => t.lv_centroid_mm.z,
            Target::SaAz => t.sa.azimuth_deg,
            Target::SaEl => t.sa.elevation_deg,
            Target::Ch4Az => t.ch4.azimuth_deg,
            Target::Ch4El => t.ch4.elevation_deg,
            Target::Ch2Az => t.ch2.azimuth_deg,
            Target::Ch2El => t.ch2.elevation_deg,
        }
    }
}

/// Build the per-target search dataset from populated cases.
pub fn build_dataset(cases: &[Case], target: Target) -> Result<SearchDataset> {
    let mut features = Vec::with_capacity(cases.len());
    let mut targets = Vec::with_capacity(cases.len());
    let mut patient_ids = Vec::with_capacity(cases.len());
    for c in cases {
        if target == Target::Ch2El && c.truth.ch2_axial_planned {
            continue;
        }
        let row = if target.is_centroid() {
            c.centroid_features
                .ok_or_else(|| Error::Precondition("centroid features missing".into()))?
                .to_vec()
        } else {
            c.angulation_features
                .ok_or_else(|| Error::Precondition("angulation features missing".into()))?
                .to_vec()
        };
        features.push(row);
        targets.push(target.truth_value(&c.truth));
        patient_ids.push(c.patient_id.clone());
    }
    let names = if target.is_centroid() {
        &CENTROID_FEATURE_NAMES[..]
    } else {
        &ANGULATION_FEATURE_NAMES[..]
    };
    Ok(SearchDataset {
        features,
        targets,
        patient_ids,
        feature_names: names.iter().map(|s| s.to_string()).collect(),
        wrap_degrees: target.wraps(),
    })
}

/// 2CH elevation is either a learned model or the constant-axial rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Ch2ElevationModel {
    /// Every training case was planned axially: always predict 90 degrees.
    ConstantAxial,
    Svr(SvrModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub ga: GaConfig,
    pub seg: SegParams,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            ga: GaConfig::default(),
            seg: SegParams::default(),
        }
    }
}

/// Nine trained models plus the config snapshot and per-target search
/// objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedStack {
    pub lv_cx: SvrModel,
    pub lv_cy: SvrModel,
    pub lv_cz: SvrModel,
    pub sa_az: SvrModel,
    pub sa_el: SvrModel,
    pub ch4_az: SvrModel,
    pub ch4_el: SvrModel,
    pub ch2_az: SvrModel,
    pub ch2_el: Ch2ElevationModel,
    pub config: StackConfig,
    pub objectives: BTreeMap<String, Objectives>,
    pub genomes: BTreeMap<String, Genome>,
    /// Final Pareto front per target, for artifact output.
    pub fronts: BTreeMap<String, Vec<(Genome, Objectives)>>,
}

fn target_cfg(base: &GaConfig, target_index: usize) -> GaConfig {
    GaConfig {
        seed: base.seed ^ ((target_index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        ..*base
    }
}

fn search_and_train(
    cases: &[Case],
    target: Target,
    cfg: &StackConfig,
    objectives: &mut BTreeMap<String, Objectives>,
    genomes: &mut BTreeMap<String, Genome>,
    fronts: &mut BTreeMap<String, Vec<(Genome, Objectives)>>,
) -> Result<SvrModel> {
    let ds = build_dataset(cases, target)?;
    let idx = ALL_TARGETS.iter().position(|t| *t == target).unwrap();
    let ga = target_cfg(&cfg.ga, idx);
    let result = run_nsga2(&ds, &ga)?;
    // Counter the winner's curse of selecting by the search's own CV score:
    // re-score every front member with grouped leave-one-patient-out CV.
    // Spurious feature subsets that luck into a good k-fold score on a small
    // patient pool tend to fail on at least one unseen patient, which the
    // per-patient holdout exposes; the front is small, so this stays cheap.
    let n_patients = ds
        .patient_ids
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let loo = GaConfig {
        k_folds: n_patients,
        ..ga
    };
    let rescored: Vec<(Genome, Objectives)> = result
        .front
        .iter()
        .map(|(g, o)| {
            (
                g.clone(),
                Objectives {
                    cv_mad: crate::search::evaluate_genome(g, &ds, &loo).cv_mad,
                    n_features: o.n_features,
                },
            )
        })
        .collect();
    // Parsimony pressure: with few patients, masks that add weakly related
    // features can luck into a slightly better CV score yet generalize far
    // worse, so features beyond the second must buy a clear error reduction.
    // Two features are exempt because some plane angles genuinely depend on
    // both initializer angles.
    const FEATURE_PENALTY: f64 = 0.75;
    let penalized: Vec<(Genome, Objectives)> = rescored
        .iter()
        .map(|(g, o)| {
            (
                g.clone(),
                Objectives {
                    cv_mad: o.cv_mad + FEATURE_PENALTY * (o.n_features.saturating_sub(2)) as f64,
                    n_features: o.n_features,
                },
            )
        })
        .collect();
    let data: Vec<(Vec<f64>, f64)> = ds
        .features
        .iter()
        .cloned()
        .zip(ds.targets.iter().copied())
        .collect();
    // A genome can cross-validate fine yet fail to converge when trained on
    // the full pool; walk the front in selection order until one trains.
    let mut candidates = penalized;
    loop {
        let genome = pick_final(&candidates)?;
        match svr::train(&data, &genome.params(), &genome.mask) {
            Ok(mut model) => {
                let obj = rescored
                    .iter()
                    .find(|(g, _)| *g == genome)
                    .map(|(_, o)| *o)
                    .unwrap();
                objectives.insert(target.name().to_string(), obj);
                genomes.insert(target.name().to_string(), genome.clone());
                fronts.insert(target.name().to_string(), result.front.clone());
                model.feature_names = ds.feature_names.clone();
                return Ok(model);
            }
            Err(Error::Convergence(_)) => candidates.retain(|(g, _)| *g != genome),
            Err(e) => return Err(e),
        }
    }
}

/// GA-optimized SVR per target; ch2_el falls back to the constant-axial
/// rule when every training case was planned axially.
pub fn train_stack(cases: &[Case], cfg: &StackConfig) -> Result<TrainedStack> {
    let mut objectives = BTreeMap::new();
    let mut genomes = BTreeMap::new();
    let mut fronts = BTreeMap::new();
    let mut models: Vec<SvrModel> = Vec::new();
    for t in [
        Target::LvCx,
        Target::LvCy,
        Target::LvCz,
        Target::SaAz,
        Target::SaEl,
        Target::Ch4Az,
        Target::Ch4El,
        Target::Ch2Az,
    ] {
        models.push(search_and_train(
            cases,
            t,
            cfg,
            &mut objectives,
            &mut genomes,
            &mut fronts,
        )?);
    }
    let ch2_el = if cases.iter().all(|c| c.truth.ch2_axial_planned) {
        Ch2ElevationModel::ConstantAxial
    } else {
        Ch2ElevationModel::Svr(search_and_train(
            cases,
            Target::Ch2El,
            cfg,
            &mut objectives,
            &mut genomes,
            &mut fronts,
        )?)
    };
    let mut it = models.into_iter();
    Ok(TrainedStack {
        lv_cx: it.next().unwrap(),
        lv_cy: it.next().unwrap(),
        lv_cz: it.next().unwrap(),
        sa_az: it.next().unwrap(),
        sa_el: it.next().unwrap(),
        ch4_az: it.next().unwrap(),
        ch4_el: it.next().unwrap(),
        ch2_az: it.next().unwrap(),
        ch2_el,
        config: *cfg,
        objectives,
        genomes,
        fronts,
    })
}

pub fn save_stack(path: &Path, s: &TrainedStack) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(s)?;
    crate::volume::atomic_write(path, &bytes)
}

pub fn load_stack(path: &Path) -> Result<TrainedStack> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Online-path output for one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub lv_centroid_mm: PhysicalPoint,
    pub sa: PlaneAngles,
    pub ch4: PlaneAngles,
    pub ch2: PlaneAngles,
}

/// Online chain given a precomputed anatomy context: centroid SVRs →
/// blood-pool SA-init at the predicted centroid → angle SVRs.
pub fn predict_with_context(
    stack: &TrainedStack,
    v: &Volume,
    ctx: &AnatomyContext,
) -> Result<Prediction> {
    let cf = ctx.centroid_features().to_vec();
    let centroid = PhysicalPoint::new(
        svr::predict(&stack.lv_cx, &cf)?,
        svr::predict(&stack.lv_cy, &cf)?,
        svr::predict(&stack.lv_cz, &cf)?,
    );
    let seg = &stack.config.seg;
    let sa_init = crate::features::geometric_sa_init(v, &centroid, seg)?;
    let af = ctx.angulation_features(&sa_init).to_vec();
    let sa = PlaneAngles::canonical(
        svr::predict(&stack.sa_az, &af)?,
        svr::predict(&stack.sa_el, &af)?,
    );
    let ch4 = PlaneAngles::canonical(
        svr::predict(&stack.ch4_az, &af)?,
        svr::predict(&stack.ch4_el, &af)?,
    );
    let ch2_az = svr::predict(&stack.ch2_az, &af)?;
    let ch2 = match &stack.ch2_el {
        Ch2ElevationModel::ConstantAxial => PlaneAngles::canonical(ch2_az, 90.0),
        Ch2ElevationModel::Svr(m) => PlaneAngles::canonical(ch2_az, svr::predict(m, &af)?),
    };
    Ok(Prediction {
        lv_centroid_mm: centroid,
        sa,
        ch4,
        ch2,
    })
}

/// Full online path from a raw volume.
pub fn predict_case(stack: &TrainedStack, v: &Volume) -> Result<Prediction> {
    let ctx = anatomy_context(v, &stack.config.seg)?;
    predict_with_context(stack, v, &ctx)
}

/// One row of the per-SNR breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SnrBreakdown {
    pub n: usize,
    pub n_failures: usize,
    pub lv_mm: f64,
    pub sa_deg: f64,
    pub ch4_deg: f64,
    pub ch2_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PlaneStats {
    pub mean_deg: f64,
    pub frac_under_15deg: f64,
}

/// Table-1-style evaluation summary; failed cases are counted separately
/// and excluded from the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n_cases: usize,
    pub n_failures: usize,
    pub lv_centroid_mean_mm: f64,
    pub short_axis: PlaneStats,
    pub four_chamber: PlaneStats,
    pub two_chamber: PlaneStats,
    pub per_snr: BTreeMap<String, SnrBreakdown>,
}

fn snr_key(tag: Option<f64>) -> String {
    match tag {
        None => "original".to_string(),
        Some(t) => format!("snr{t:02.0}"),
    }
}

pub fn evaluate(cases: &[Case], predictions: &[Option<Prediction>]) -> Result<Report> {
    if cases.len() != predictions.len() {
        return Err(Error::Precondition(
            "case/prediction count mismatch".into(),
        ));
    }
    if cases.is_empty() {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    let mut n_failures = 0usize;
    let mut lv = Vec::new();
    let mut sa = Vec::new();
    let mut ch4 = Vec::new();
    let mut ch2 = Vec::new();
    let mut per_snr: BTreeMap<String, (usize, usize, f64, f64, f64, f64)> = BTreeMap::new();
    for (c, p) in cases.iter().zip(predictions) {
        let slot = per_snr.entry(snr_key(c.snr_tag)).or_default();
        slot.0 += 1;
        match p {
            None => {
                n_failures += 1;
                slot.1 += 1;
            }
            Some(p) => {
                let d = {
                    let t = c.truth.lv_centroid_mm;
                    let q = p.lv_centroid_mm;
                    ((q.x - t.x).powi(2) + (q.y - t.y).powi(2) + (q.z - t.z).powi(2)).sqrt()
                };
                let a_sa = angle3d(&p.sa, &c.truth.sa);
                let a_ch4 = angle3d(&p.ch4, &c.truth.ch4);
                let a_ch2 = angle3d(&p.ch2, &c.truth.ch2);
                lv.push(d);
                sa.push(a_sa);
                ch4.push(a_ch4);
                ch2.push(a_ch2);
                slot.2 += d;
                slot.3 += a_sa;
                slot.4 += a_ch4;
                slot.5 += a_ch2;
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let plane = |v: &[f64]| PlaneStats {
        mean_deg: mean(v),
        frac_under_15deg: if v.is_empty() {
            0.0
        } else {
            v.iter().filter(|&&x| x < 15.0).count() as f64 / v.len() as f64
        },
    };
    let per_snr = per_snr
        .into_iter()
        .map(|(k, (n, nf, lv, sa, ch4, ch2))| {
            let ok = (n - nf).max(1) as f64;
            (
                k,
                SnrBreakdown {
                    n,
                    n_failures: nf,
                    lv_mm: lv / ok,
                    sa_deg: sa / ok,
                    ch4_deg: ch4 / ok,
                    ch2_deg: ch2 / ok,
                },
            )
        })
        .collect();
    Ok(Report {
        n_cases: cases.len(),
        n_failures,
        lv_centroid_mean_mm: mean(&lv),
        short_axis: plane(&sa),
        four_chamber: plane(&ch4),
        two_chamber: plane(&ch2),
        per_snr,
    })
}

/// Published cross-validation reference values (original-only, with-noise)
/// for side-by-side display: LV centroid mm, then SA/4CH/2CH degrees.
pub const CV_REFERENCE: [(&str, f64, f64); 4] = [
    ("LV Centroid (mm)", 9.64, 9.26),
    ("Short Axis (deg)", 8.94, 8.18),
    ("4 Chamber (deg)", 11.53, 10.56),
    ("2 Chamber (deg)", 7.33, 7.11),
];

/// Published holdout reference values for the same rows.
pub const HOLDOUT_REFERENCE: [(&str, f64, f64); 4] = [
    ("LV Centroid (mm)", 15.38, 13.75),
    ("Short Axis (deg)", 12.86, 12.05),
    ("4 Chamber (deg)", 11.95, 11.40),
    ("2 Chamber (deg)", 9.15, 11.83),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub original_only: f64,
    pub with_noise: f64,
}

/// Paired clean-vs-noised-training experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub original_only: Report,
    pub with_noise: Report,
    pub cv_reference: Vec<ReferenceRow>,
    pub holdout_reference: Vec<ReferenceRow>,
}

fn reference_rows(src: &[(&str, f64, f64)]) -> Vec<ReferenceRow> {
    src.iter()
        .map(|(l, a, b)| ReferenceRow {
            label: l.to_string(),
            original_only: *a,
            with_noise: *b,
        })
        .collect()
}

/// Grouped 6-fold protocol run twice over identical test partitions: the
/// training pool is restricted to original volumes vs. originals + ladder.
pub fn cv_experiment(
    cases: &[Case],
    provider: &dyn Fn(&Case) -> Result<Volume>,
    cfg: &StackConfig,
) -> Result<ExperimentReport> {
    // The outer evaluation split is fixed at 6 folds regardless of the inner
    // GA fold count: with 12 patients this trains every stack on 10 patients,
    // which matters more for honest feature selection than inner-CV budget.
    const OUTER_FOLDS: usize = 6;
    let folds = grouped_kfold(cases, OUTER_FOLDS, cfg.ga.seed)?;
    // anatomy contexts are stack-independent: compute once per case
    let loaded: Vec<(Volume, Result<AnatomyContext>)> = cases
        .iter()
        .map(|c| {
            let v = provider(c)?;
            let ctx = anatomy_context(&v, &cfg.seg);
            Ok((v, ctx))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut preds_orig: Vec<Option<Prediction>> = vec![None; cases.len()];
    let mut preds_noise: Vec<Option<Prediction>> = vec![None; cases.len()];
    for (train_idx, test_idx) in &folds {
        let pool_noise: Vec<Case> = train_idx.iter().map(|&i| cases[i].clone()).collect();
        let pool_orig: Vec<Case> = pool_noise
            .iter()
            .filter(|c| c.snr_tag.is_none())
            .cloned()
            .collect();
        for (pool, preds) in [(&pool_orig, &mut preds_orig), (&pool_noise, &mut preds_noise)] {
            let stack = train_stack(pool, cfg)?;
            for &i in test_idx {
                let (v, ctx) = &loaded[i];
                preds[i] = match ctx {
                    Ok(ctx) => predict_with_context(&stack, v, ctx).ok(),
                    Err(_) => None,
                };
            }
        }
    }
    Ok(ExperimentReport {
        original_only: evaluate(cases, &preds_orig)?,
        with_noise: evaluate(cases, &preds_noise)?,
        cv_reference: reference_rows(&CV_REFERENCE),
        holdout_reference: reference_rows(&HOLDOUT_REFERENCE),
    })
}

/// Aligned-text rendering of the paired report with published reference
/// values alongside.
pub fn render_text(r: &ExperimentReport) -> String {
    let mut s = String::new();
    let line = |s: &mut String, label: &str, a: f64, b: f64, ra: f64, rb: f64| {
        s.push_str(&format!(
            "{label:<18} {a:>12.2} {b:>12.2} {ra:>14.2} {rb:>14.2}\n"
        ));
    };
    s.push_str(&format!(
        "{:<18} {:>12} {:>12} {:>14} {:>14}\n",
        "Target", "orig-only", "with-noise", "ref orig-only", "ref with-noise"
    ));
    let rows = [
        (
            0,
            r.original_only.lv_centroid_mean_mm,
            r.with_noise.lv_centroid_mean_mm,
        ),
        (
            1,
            r.original_only.short_axis.mean_deg,
            r.with_noise.short_axis.mean_deg,
        ),
        (
            2,
            r.original_only.four_chamber.mean_deg,
            r.with_noise.four_chamber.mean_deg,
        ),
        (
            3,
            r.original_only.two_chamber.mean_deg,
            r.with_noise.two_chamber.mean_deg,
        ),
    ];
    for (i, a, b) in rows {
        let (label, ra, rb) = CV_REFERENCE[i];
        line(&mut s, label, a, b, ra, rb);
    }
    s.push_str(&format!(
        "fraction under 15 deg (with-noise): SA {:.2}  4CH {:.2}  2CH {:.2}\n",
        r.with_noise.short_axis.frac_under_15deg,
        r.with_noise.four_chamber.frac_under_15deg,
        r.with_noise.two_chamber.frac_under_15deg,
    ));
    s.push_str(&format!(
        "cases {}  failures orig-only {}  with-noise {}\n",
        r.with_noise.n_cases, r.original_only.n_failures, r.with_noise.n_failures
    ));
    s
}
