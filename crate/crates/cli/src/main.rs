//! `cmrplan`: phantom generation, SNR degradation, segmentation, feature
//! extraction, model search, cross-validation and the end-to-end repro run.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use cmrplan_core::error::{Error, Result};
use cmrplan_core::features;
use cmrplan_core::noise::{self, SnrRois, SnrSpec};
use cmrplan_core::phantom::{self, VariationSpec};
use cmrplan_core::pipeline::{
    self, Case, Manifest, Prediction, StackConfig, Target,
};
use cmrplan_core::search::{self, GaConfig, SearchDataset};
use cmrplan_core::segmentation::{segment_image, Connectivity, SegParams};
use cmrplan_core::svr;
use cmrplan_core::volume::{atomic_write, load_volume, save_volume, BoxRoi, PhysicalPoint, Volume};

#[derive(Parser)]
#[command(name = "cmrplan", version, about = "Automated cardiac plane prescription pipeline")]
struct Cli {
    /// Upper bound on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// error | warn | info | debug
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom population with volumes, manifest and SNR ROIs.
    Phantom {
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Manifest path (default <out-dir>/manifest.json).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Degrade a volume to each SNR target on the ladder.
    Noise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "30,25,20,15,10", value_delimiter = ',')]
        targets: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// x0,y0,z0,x1,y1,z1 (inclusive lo, exclusive hi)
        #[arg(long, value_delimiter = ',')]
        signal_roi: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        background_roi: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Graph-based segmentation of a volume or one axial slice.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        /// Axial slice index; omit to segment the full volume in 3D.
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long, default_value_t = 300.0)]
        k: f64,
        #[arg(long, default_value_t = 20)]
        min_size: usize,
        #[arg(long, default_value_t = 0.8)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract anatomy features from a volume.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        /// LV centroid x,y,z in mm; enables the angulation feature block.
        #[arg(long, value_delimiter = ',')]
        lv_centroid: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// NSGA-II feature/hyperparameter search for one target.
    Search {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 40)]
        pop: usize,
        #[arg(long, default_value_t = 50)]
        gens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        front: Option<PathBuf>,
    },
    /// Grouped 6-fold clean-vs-noised cross-validation experiment.
    Cv {
        #[arg(long)]
        manifest: PathBuf,
        /// StackConfig JSON; omit for defaults.
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online prediction for one volume.
    Predict {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against manifest truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full chain: phantoms -> noise ladder -> features -> cv -> report.
    Repro {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Halve GA population and generations.
        #[arg(long, default_value_t = false)]
        fast: bool,
        #[arg(long, default_value_t = 12)]
        n_phantoms: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn log(cli_level: &str, level: &str, msg: &str) {
    let rank = |l: &str| match l {
        "error" => 0,
        "warn" => 1,
        "info" => 2,
        _ => 3,
    };
    if rank(level) <= rank(cli_level) {
        eprintln!("[{level}] {msg}");
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(value)?)
}

/// Every run echoes its resolved configuration next to its outputs.
fn echo_config(dir: &Path, name: &str, cfg: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(format!("{name}_config.json")), &cfg)
}

fn roi_from(v: &[usize]) -> Result<BoxRoi> {
    if v.len() != 6 {
        return Err(Error::Parameter("ROI needs exactly 6 integers".into()));
    }
    Ok(BoxRoi::new((v[0], v[1], v[2]), (v[3], v[4], v[5])))
}

/// Resolve a manifest-relative volume path.
fn resolve(manifest: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn load_case_volume(manifest: &Path, c: &Case) -> Result<Volume> {
    let p = c
        .volume_path
        .as_ref()
        .ok_or_else(|| Error::Precondition(format!("case {} has no volume path", c.patient_id)))?;
    load_volume(&resolve(manifest, p))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Phantom {
            n,
            seed,
            out_dir,
            manifest,
        } => cmd_phantom(cli, *n, *seed, out_dir, manifest.as_deref()),
        Cmd::Noise {
            input,
            targets,
            seed,
            signal_roi,
            background_roi,
            out_dir,
        } => cmd_noise(cli, input, targets, *seed, signal_roi, background_roi, out_dir),
        Cmd::Segment {
            input,
            slice,
            k,
            min_size,
            sigma,
            out,
        } => cmd_segment(input, *slice, *k, *min_size, *sigma, out),
        Cmd::Features {
            input,
            lv_centroid,
            out,
        } => cmd_features(input, lv_centroid.as_deref(), out),
        Cmd::Search {
            dataset,
            target,
            pop,
            gens,
            seed,
            out,
            front,
        } => cmd_search(cli, dataset, target, *pop, *gens, *seed, out, front.as_deref()),
        Cmd::Cv { manifest, cfg, out } => cmd_cv(cli, manifest, cfg.as_deref(), out),
        Cmd::Predict { stack, input, out } => cmd_predict(stack, input, out),
        Cmd::Evaluate {
            pred,
            manifest,
            out,
        } => cmd_evaluate(pred, manifest, out),
        Cmd::Repro {
            seed,
            out_dir,
            fast,
            n_phantoms,
        } => cmd_repro(cli, *seed, out_dir, *fast, *n_phantoms),
    }
}

fn cmd_phantom(
    cli: &Cli,
    n: usize,
    seed: u64,
    out_dir: &Path,
    manifest: Option<&Path>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    echo_config(
        out_dir,
        "phantom",
        json!({"n": n, "seed": seed, "variation": VariationSpec::default()}),
    )?;
    let population = phantom::sample_population(n, &VariationSpec::default(), seed)?;
    let mut cases = Vec::with_capacity(n);
    let mut rois = serde_json::Map::new();
    for (spec, mut case) in population {
        let (v, _, roi) = phantom::generate(&spec)?;
        let file = format!("{}.json", spec.patient_id);
        save_volume(&v, &out_dir.join(&file))?;
        case.volume_path = Some(PathBuf::from(&file));
        rois.insert(spec.patient_id.clone(), serde_json::to_value(&roi)?);
        cases.push(case);
        log(&cli.log_level, "info", &format!("wrote {file}"));
    }
    write_json(&out_dir.join("rois.json"), &serde_json::Value::Object(rois))?;
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("manifest.json"));
    pipeline::save_manifest(&manifest_path, &Manifest { cases })
}

fn cmd_noise(
    cli: &Cli,
    input: &Path,
    targets: &[f64],
    seed: u64,
    signal_roi: &[usize],
    background_roi: &[usize],
    out_dir: &Path,
) -> Result<()> {
    let v = load_volume(input)?;
    let rois = SnrRois {
        signal: roi_from(signal_roi)?,
        background: roi_from(background_roi)?,
    };
    let spec = SnrSpec {
        targets: targets.to_vec(),
        seed,
        ..SnrSpec::default()
    };
    std::fs::create_dir_all(out_dir)?;
    echo_config(
        out_dir,
        "noise",
        json!({"in": input, "spec": spec, "rois": rois}),
    )?;
    let ladder = noise::snr_ladder(&v, &rois, &spec)?;
    for (t, dv) in spec.targets.iter().zip(ladder) {
        let file = format!("{}_snr{t:02.0}.json", v.meta.patient_id);
        save_volume(&dv, &out_dir.join(&file))?;
        log(
            &cli.log_level,
            "info",
            &format!("wrote {file} (measured SNR {:.2})", dv.meta.snr_tag.unwrap_or(0.0)),
        );
    }
    Ok(())
}

fn cmd_segment(
    input: &Path,
    slice: Option<usize>,
    k: f64,
    min_size: usize,
    sigma: f64,
    out: &Path,
) -> Result<()> {
    let v = load_volume(input)?;
    let p = SegParams {
        k_threshold: k,
        min_size,
        presmooth_sigma: sigma,
    };
    let (nx, ny, nz) = v.dims;
    let seg = match slice {
        Some(z) => {
            if z >= nz {
                return Err(Error::OutOfBounds {
                    index: (0, 0, z as i64),
                    dims: v.dims,
                });
            }
            let data = v.data[nx * ny * z..nx * ny * (z + 1)].to_vec();
            segment_image(&data, (nx, ny, 1), Connectivity::Four2D, &p)?
        }
        None => segment_image(&v.data, v.dims, Connectivity::Six3D, &p)?,
    };
    if let Some(dir) = out.parent() {
        echo_config(dir, "segment", json!({"in": input, "slice": slice, "params": p}))?;
    }
    write_json(
        out,
        &json!({
            "dims": seg.dims,
            "labels": seg.labels,
            "components": seg.component_sizes,
        }),
    )
}

fn cmd_features(input: &Path, lv_centroid: Option<&[f64]>, out: &Path) -> Result<()> {
    let v = load_volume(input)?;
    let seg = SegParams::default();
    let ctx = features::anatomy_context(&v, &seg)?;
    let mut record = json!({
        "patient_id": v.meta.patient_id,
        "snr_tag": v.meta.snr_tag,
        "centroid_features": ctx.centroid_features(),
        "anatomy": ctx,
    });
    if let Some(c) = lv_centroid {
        let centroid = PhysicalPoint::new(c[0], c[1], c[2]);
        let sa_init = features::geometric_sa_init(&v, &centroid, &seg)?;
        record["angulation_features"] = serde_json::to_value(ctx.angulation_features(&sa_init))?;
    }
    if let Some(dir) = out.parent() {
        echo_config(dir, "features", json!({"in": input, "lv_centroid": lv_centroid}))?;
    }
    write_json(out, &record)
}

/// Populate feature records for every manifest case, loading each volume.
fn populate_all(manifest_path: &Path, cases: &[Case], seg: &SegParams) -> Result<Vec<Case>> {
    cases
        .iter()
        .map(|c| {
            if c.centroid_features.is_some() && c.angulation_features.is_some() {
                return Ok(c.clone());
            }
            let v = load_case_volume(manifest_path, c)?;
            pipeline::populate_features(c, &v, seg)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_search(
    cli: &Cli,
    dataset: &Path,
    target: &str,
    pop: usize,
    gens: usize,
    seed: u64,
    out: &Path,
    front: Option<&Path>,
) -> Result<()> {
    let target = Target::from_name(target)?;
    let manifest = pipeline::load_manifest(dataset)?;
    let seg = SegParams::default();
    log(&cli.log_level, "info", "populating features");
    let cases = populate_all(dataset, &manifest.cases, &seg)?;
    let ds: SearchDataset = pipeline::build_dataset(&cases, target)?;
    let cfg = GaConfig {
        population_size: pop,
        generations: gens,
        seed,
        ..GaConfig::default()
    };
    if let Some(dir) = out.parent() {
        echo_config(dir, "search", json!({"target": target.name(), "ga": cfg}))?;
    }
    let result = search::run_nsga2(&ds, &cfg)?;
    let genome = search::pick_final(&result.front)?;
    let data: Vec<(Vec<f64>, f64)> = ds
        .features
        .iter()
        .cloned()
        .zip(ds.targets.iter().copied())
        .collect();
    let mut model = svr::train(&data, &genome.params(), &genome.mask)?;
    model.feature_names = ds.feature_names.clone();
    svr::save_model(&model, out)?;
    if let Some(front_path) = front {
        write_json(front_path, &result)?;
    }
    Ok(())
}

fn cmd_cv(cli: &Cli, manifest_path: &Path, cfg: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: StackConfig = match cfg {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => StackConfig::default(),
    };
    std::fs::create_dir_all(out)?;
    echo_config(out, "cv", serde_json::to_value(cfg)?)?;
    let manifest = pipeline::load_manifest(manifest_path)?;
    log(&cli.log_level, "info", "populating features");
    let cases = populate_all(manifest_path, &manifest.cases, &cfg.seg)?;
    log(&cli.log_level, "info", "running paired cv experiment");
    let report = pipeline::cv_experiment(
        &cases,
        &|c| load_case_volume(manifest_path, c),
        &cfg,
    )?;
    write_json(&out.join("report.json"), &report)?;
    atomic_write(
        &out.join("report.txt"),
        pipeline::render_text(&report).as_bytes(),
    )?;
    print!("{}", pipeline::render_text(&report));
    Ok(())
}

fn cmd_predict(stack: &Path, input: &Path, out: &Path) -> Result<()> {
    let stack = pipeline::load_stack(stack)?;
    let v = load_volume(input)?;
    let pred = pipeline::predict_case(&stack, &v)?;
    write_json(out, &pred)
}

fn cmd_evaluate(pred: &Path, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = pipeline::load_manifest(manifest_path)?;
    let preds: Vec<Option<Prediction>> = serde_json::from_slice(&std::fs::read(pred)?)?;
    let report = pipeline::evaluate(&manifest.cases, &preds)?;
    write_json(out, &report)
}

fn cmd_repro(cli: &Cli, seed: u64, out_dir: &Path, fast: bool, n_phantoms: usize) -> Result<()> {
    let data_dir = out_dir.join("data");
    let report_dir = out_dir.join("report");
    std::fs::create_dir_all(&data_dir)?;
    std::fs::create_dir_all(&report_dir)?;

    // Trimmed search budget relative to GaConfig::default(): the repro run
    // trains 13 stacks of 8 targets each, so the per-target budget has to fit
    // the whole experiment into the wall-clock envelope on a single core.
    let mut ga = GaConfig {
        population_size: 28,
        generations: 24,
        k_folds: 3,
        seed,
        ..GaConfig::default()
    };
    if fast {
        ga.population_size /= 2;
        ga.generations /= 2;
    }
    let cfg = StackConfig {
        ga,
        seg: SegParams::default(),
    };
    echo_config(
        out_dir,
        "repro",
        json!({"seed": seed, "fast": fast, "n_phantoms": n_phantoms, "stack": cfg}),
    )?;

    // 1. phantom population with originals written to disk
    log(&cli.log_level, "info", "generating phantom population");
    let population = phantom::sample_population(n_phantoms, &VariationSpec::default(), seed)?;
    let mut cases: Vec<Case> = Vec::new();
    let spec_noise = SnrSpec {
        seed,
        ..SnrSpec::default()
    };
    for (pspec, mut case) in population {
        let (v, _, rois) = phantom::generate(&pspec)?;
        let file = format!("{}.json", pspec.patient_id);
        save_volume(&v, &data_dir.join(&file))?;
        case.volume_path = Some(PathBuf::from(format!("data/{file}")));
        cases.push(case.clone());
        // 2. SNR ladder variants per patient
        let ladder = noise::snr_ladder(&v, &rois, &spec_noise)?;
        for (t, dv) in spec_noise.targets.iter().zip(ladder) {
            let dfile = format!("{}_snr{t:02.0}.json", pspec.patient_id);
            save_volume(&dv, &data_dir.join(&dfile))?;
            let mut dcase = case.clone();
            dcase.snr_tag = Some(*t);
            dcase.volume_path = Some(PathBuf::from(format!("data/{dfile}")));
            cases.push(dcase);
        }
        log(
            &cli.log_level,
            "info",
            &format!("phantom {} + ladder done", pspec.patient_id),
        );
    }
    let manifest_path = out_dir.join("manifest.json");
    pipeline::save_manifest(&manifest_path, &Manifest { cases: cases.clone() })?;

    // 3. features for every case
    log(&cli.log_level, "info", "extracting features for all cases");
    let cases = populate_all(&manifest_path, &cases, &cfg.seg)?;

    // 4. paired cross-validation experiment
    log(&cli.log_level, "info", "running paired cv experiment");
    let report = pipeline::cv_experiment(
        &cases,
        &|c| load_case_volume(&manifest_path, c),
        &cfg,
    )?;
    write_json(&report_dir.join("cv_report.json"), &report)?;
    atomic_write(
        &report_dir.join("cv_report.txt"),
        pipeline::render_text(&report).as_bytes(),
    )?;

    // 5. final stack trained on the full noised pool, with search fronts
    log(&cli.log_level, "info", "training final stack");
    let stack = pipeline::train_stack(&cases, &cfg)?;
    pipeline::save_stack(&report_dir.join("stack.json"), &stack)?;
    for (name, front) in &stack.fronts {
        write_json(&report_dir.join(format!("front_{name}.json")), front)?;
    }
    print!("{}", pipeline::render_text(&report));
    Ok(())
}
