//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line (run with `--nocapture` to see them).

use std::collections::{BTreeMap, HashSet};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmrplan_core::geometry::{
    angle3d, angles_to_normal, fit_ellipse, normal_to_angles, PlaneAngles, UnitVector3,
};
use cmrplan_core::noise::{
    acceleration_headroom, degrade_to_snr, measure_snr, rss_noise_field, SnrSpec,
};
use cmrplan_core::phantom::{self, PhantomSpec};
use cmrplan_core::pipeline::{self, grouped_kfold, ExperimentReport};
use cmrplan_core::search::{
    evaluate_genome, non_dominated_sort, run_nsga2, GaConfig, Genome, Objectives,
};
use cmrplan_core::segmentation::{build_grid_graph, segment, Connectivity, SegParams};
use cmrplan_core::svr::{rbf_kernel, solve_epsilon_svr_dual};

fn verdict(criterion: u32, what: &str, pass: bool) -> bool {
    println!(
        "criterion {criterion} ({what}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_noise_fidelity() {
    let spec = PhantomSpec::default();
    let (v, _, rois) = phantom::generate(&spec).unwrap();
    let nspec = SnrSpec {
        seed: 7,
        ..SnrSpec::default()
    };
    let mut ok = true;
    let mut worst: Duration = Duration::ZERO;
    for &target in &nspec.targets {
        let t0 = Instant::now();
        let dv = degrade_to_snr(&v, target, &rois, &nspec).unwrap();
        worst = worst.max(t0.elapsed());
        let snr = measure_snr(&dv, &rois).unwrap();
        ok &= (snr - target).abs() <= 0.05 * target;
    }
    ok &= worst < Duration::from_secs(5);

    // zero-signal statistics: RSS field mean vs chi mean, 1e6 voxels
    let sigma = 3.0;
    let n_coils = 2u32;
    let field = rss_noise_field((100, 100, 100), (1.0, 1.0, 1.0), sigma, n_coils, 11, 0).unwrap();
    let mean = field.data.iter().map(|&x| x as f64).sum::<f64>() / field.data.len() as f64;
    let k = 2.0 * n_coils as f64; // chi with 2*n_coils degrees of freedom
    let chi_mean = sigma
        * (2.0f64).sqrt()
        * (statrs::function::gamma::ln_gamma((k + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(k / 2.0))
        .exp();
    ok &= (mean - chi_mean).abs() <= 0.02 * chi_mean;
    assert!(verdict(1, "noise fidelity", ok));
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_acceleration_headroom() {
    let ok = acceleration_headroom(30.0, 10.0).unwrap() == 9.0;
    assert!(verdict(2, "Eq. 1 headroom(30,10) == 9.0", ok));
}

// ---------------------------------------------------------------- criterion 3

/// Naive Felzenszwalb reference: explicit component sets, same stable edge
/// order, same merge predicate, same min-size pass.
fn naive_felzenszwalb(data: &[f32], nx: usize, ny: usize, p: &SegParams) -> Vec<usize> {
    let g = build_grid_graph(data, (nx, ny, 1), Connectivity::Four2D).unwrap();
    let mut edges = g.edges.clone();
    edges.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let n = nx * ny;
    let mut comp: Vec<usize> = (0..n).collect();
    let mut internal: Vec<f64> = vec![0.0; n];
    let mut size: Vec<usize> = vec![1; n];
    let relabel = |comp: &mut Vec<usize>, from: usize, to: usize| {
        for c in comp.iter_mut() {
            if *c == from {
                *c = to;
            }
        }
    };
    for &(u, v, w) in &edges {
        let (cu, cv) = (comp[u as usize], comp[v as usize]);
        if cu == cv {
            continue;
        }
        let w = w as f64;
        let thr_u = internal[cu] + p.k_threshold / size[cu] as f64;
        let thr_v = internal[cv] + p.k_threshold / size[cv] as f64;
        if w <= thr_u.min(thr_v) {
            let merged_size = size[cu] + size[cv];
            let merged_int = internal[cu].max(internal[cv]).max(w);
            relabel(&mut comp, cv, cu);
            size[cu] = merged_size;
            internal[cu] = merged_int;
        }
    }
    for &(u, v, _) in &edges {
        let (cu, cv) = (comp[u as usize], comp[v as usize]);
        if cu != cv && (size[cu] < p.min_size || size[cv] < p.min_size) {
            let merged_size = size[cu] + size[cv];
            relabel(&mut comp, cv, cu);
            size[cu] = merged_size;
        }
    }
    comp
}

/// Canonical partition signature: map labels to first-seen indices.
fn canonical(labels: &[u32]) -> Vec<usize> {
    let mut seen: BTreeMap<u32, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = seen.len();
            *seen.entry(l).or_insert(next)
        })
        .collect()
}

fn canonical_usize(labels: &[usize]) -> Vec<usize> {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = seen.len();
            *seen.entry(l).or_insert(next)
        })
        .collect()
}

#[test]
fn criterion_3_segmentation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (nx, ny) = (16, 16);
    let mut ok = true;
    for _ in 0..200 {
        let data: Vec<f32> = (0..nx * ny).map(|_| rng.gen_range(0.0..255.0)).collect();
        let p = SegParams {
            k_threshold: rng.gen_range(1.0..500.0),
            min_size: rng.gen_range(1..8),
            presmooth_sigma: 0.0,
        };
        let g = build_grid_graph(&data, (nx, ny, 1), Connectivity::Four2D).unwrap();
        let seg = segment(&g, &p).unwrap();
        let oracle = naive_felzenszwalb(&data, nx, ny, &p);
        ok &= canonical(&seg.labels) == canonical_usize(&oracle);
    }
    // uniform image -> one component; k -> infinity -> one component
    let uniform = vec![42.0f32; nx * ny];
    let p = SegParams {
        k_threshold: 10.0,
        min_size: 1,
        presmooth_sigma: 0.0,
    };
    let g = build_grid_graph(&uniform, (nx, ny, 1), Connectivity::Four2D).unwrap();
    ok &= segment(&g, &p).unwrap().component_sizes.len() == 1;
    let noisy: Vec<f32> = (0..nx * ny).map(|i| (i % 7) as f32 * 30.0).collect();
    let g = build_grid_graph(&noisy, (nx, ny, 1), Connectivity::Four2D).unwrap();
    let p_inf = SegParams {
        k_threshold: 1e12,
        min_size: 1,
        presmooth_sigma: 0.0,
    };
    ok &= segment(&g, &p_inf).unwrap().component_sizes.len() == 1;
    assert!(verdict(3, "segmentation naive-oracle equality", ok));
}

// ---------------------------------------------------------------- criterion 4

/// Dual objective in beta form: 1/2 b'Kb + eps*sum|b| - y'b.
fn dual_objective(kernel: &[Vec<f64>], y: &[f64], beta: &[f64], eps: f64) -> f64 {
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += beta[i] * beta[j] * kernel[i][j];
        }
    }
    0.5 * quad + eps * beta.iter().map(|b| b.abs()).sum::<f64>()
        - y.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
}

/// Exact projection of x onto {z in [0,C]^2n : sum(z_alpha) - sum(z_alpha*) = 0}
/// via bisection on the hyperplane multiplier.
fn project(x: &[f64], c: f64, n: usize) -> Vec<f64> {
    let eval = |lambda: f64| -> (Vec<f64>, f64) {
        let z: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(s, &v)| {
                let w = if s < n { 1.0 } else { -1.0 };
                (v - lambda * w).clamp(0.0, c)
            })
            .collect();
        let r: f64 = z[..n].iter().sum::<f64>() - z[n..].iter().sum::<f64>();
        (z, r)
    };
    let (mut lo, mut hi) = (-1e6, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (_, r) = eval(mid);
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    eval(0.5 * (lo + hi)).0
}

/// Projected-gradient oracle for the epsilon-SVR dual (2n variables).
fn oracle_qp(kernel: &[Vec<f64>], y: &[f64], c: f64, eps: f64) -> Vec<f64> {
    let n = y.len();
    let m = 2 * n;
    let mut z = vec![0.0f64; m];
    // Lipschitz bound: 2 * max row sum of |K|
    let lip: f64 = kernel
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1.0)
        * 2.0;
    let step = 1.0 / lip;
    for _ in 0..60_000 {
        // gradient of f(a, b) at beta = a - b
        let beta: Vec<f64> = (0..n).map(|i| z[i] - z[n + i]).collect();
        let kb: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| kernel[i][j] * beta[j]).sum::<f64>())
            .collect();
        let mut g = vec![0.0f64; m];
        for i in 0..n {
            g[i] = kb[i] + eps - y[i];
            g[n + i] = -kb[i] + eps + y[i];
        }
        let next: Vec<f64> = z.iter().zip(&g).map(|(&v, &d)| v - step * d).collect();
        z = project(&next, c, n);
    }
    (0..n).map(|i| z[i] - z[n + i]).collect()
}

#[test]
fn criterion_4_svr_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.gen_range(2..=6);
        let dim = rng.gen_range(1..=3);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c = rng.gen_range(0.5..20.0);
        let eps = rng.gen_range(0.01..0.3);
        let gamma = rng.gen_range(0.1..2.0);
        let kernel: Vec<Vec<f64>> = x
            .iter()
            .map(|a| x.iter().map(|b| rbf_kernel(a, b, gamma).unwrap()).collect())
            .collect();
        let (beta, bias) = solve_epsilon_svr_dual(&kernel, &y, c, eps, 1e-6).unwrap();
        let beta_oracle = oracle_qp(&kernel, &y, c, eps);
        let obj = dual_objective(&kernel, &y, &beta, eps);
        let obj_oracle = dual_objective(&kernel, &y, &beta_oracle, eps);
        ok &= (obj - obj_oracle).abs() <= 1e-4;
        // dual feasibility
        ok &= beta.iter().sum::<f64>().abs() < 1e-6;
        ok &= beta.iter().all(|b| b.abs() <= c * (1.0 + 1e-9));
        // KKT residuals by coefficient regime
        for i in 0..beta.len() {
            let f_i: f64 = (0..beta.len()).map(|j| beta[j] * kernel[i][j]).sum::<f64>() + bias;
            let r = y[i] - f_i;
            let tol = 1e-3;
            let b = beta[i];
            let at_c = (b.abs() - c).abs() < 1e-9 * c.max(1.0);
            if b.abs() < 1e-12 {
                ok &= r.abs() <= eps + tol;
            } else if b > 0.0 && !at_c {
                ok &= (r - eps).abs() <= tol;
            } else if b < 0.0 && !at_c {
                ok &= (r + eps).abs() <= tol;
            } else if b > 0.0 {
                ok &= r >= eps - tol;
            } else {
                ok &= r <= -eps + tol;
            }
        }
    }
    assert!(verdict(4, "SVR dual vs brute-force QP oracle", ok));
}

// ---------------------------------------------------------------- criterion 5

fn reference_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !remaining.is_empty() {
        let front: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| {
                !remaining
                    .iter()
                    .any(|&j| j != i && points[j].dominates(&points[i]))
            })
            .collect();
        remaining.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

#[test]
fn criterion_5_nsga2_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..30);
        let pts: Vec<Objectives> = (0..n)
            .map(|_| Objectives {
                cv_mad: (rng.gen_range(0..10) as f64) * 0.5,
                n_features: rng.gen_range(1..6),
            })
            .collect();
        ok &= non_dominated_sort(&pts) == reference_sort(&pts);
    }

    // toy space: 4 features x 3x3 hyperparameter grid, exhaustive oracle
    let ds = {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut features = Vec::new();
        let mut targets = Vec::new();
        let mut patient_ids = Vec::new();
        for p in 0..12 {
            for _ in 0..2 {
                let t: f64 = rng.gen_range(-2.0..2.0);
                let row = vec![
                    t + rng.gen_range(-0.05..0.05),
                    rng.gen_range(-1.0..1.0),
                    0.5 * t + rng.gen_range(-0.3..0.3),
                    rng.gen_range(-1.0..1.0),
                ];
                features.push(row);
                targets.push(t);
                patient_ids.push(format!("p{p:02}"));
            }
        }
        cmrplan_core::search::SearchDataset {
            features,
            targets,
            patient_ids,
            feature_names: (0..4).map(|i| format!("f{i}")).collect(),
            wrap_degrees: false,
        }
    };
    let grid = [0.0f64, 4.0, 8.0];
    let ggrid = [-6.0f64, -3.0, 0.0];
    let cfg = GaConfig {
        population_size: 24,
        generations: 25,
        k_folds: 6,
        log2_c_bounds: (grid[0], grid[2]),
        log2_gamma_bounds: (ggrid[0], ggrid[2]),
        seed: 5,
        ..GaConfig::default()
    };
    let mut exhaustive: Vec<Objectives> = Vec::new();
    for bits in 1u32..16 {
        let mask: Vec<bool> = (0..4).map(|b| bits >> b & 1 == 1).collect();
        for &lc in &grid {
            for &lg in &ggrid {
                let g = Genome {
                    mask: mask.clone(),
                    log2_c: lc,
                    log2_gamma: lg,
                };
                exhaustive.push(evaluate_genome(&g, &ds, &cfg));
            }
        }
    }
    let res = run_nsga2(&ds, &cfg).unwrap();
    let mut toy_ok = !res.front.is_empty();
    for (_, obj) in &res.front {
        toy_ok &= !exhaustive.iter().any(|e| e.dominates(obj));
    }
    ok &= toy_ok;
    assert!(verdict(5, "NSGA-II sort + toy-space oracle", ok));
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_geometry() {
    let mut ok = true;
    // exact ellipse recovery to 1e-6
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..50 {
        let (cx, cy) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let a = rng.gen_range(2.0..6.0);
        let b = rng.gen_range(0.5..a - 0.5);
        let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let pts: Vec<(f64, f64)> = (0..64)
            .map(|i| {
                let t = i as f64 / 64.0 * std::f64::consts::TAU;
                let (x, y) = (a * t.cos(), b * t.sin());
                (
                    cx + x * th.cos() - y * th.sin(),
                    cy + x * th.sin() + y * th.cos(),
                )
            })
            .collect();
        let e = fit_ellipse(&pts).unwrap();
        ok &= (e.center.0 - cx).abs() < 1e-6
            && (e.center.1 - cy).abs() < 1e-6
            && (e.semi_major - a).abs() < 1e-6
            && (e.semi_minor - b).abs() < 1e-6;
    }
    // angle3d axioms and roundtrip on 1e4 random canonical angles
    for _ in 0..10_000 {
        let p = PlaneAngles::canonical(rng.gen_range(0.0..360.0), rng.gen_range(0.0..89.9));
        let q = PlaneAngles::canonical(rng.gen_range(0.0..360.0), rng.gen_range(0.0..89.9));
        let d_pq = angle3d(&p, &q);
        ok &= (angle3d(&q, &p) - d_pq).abs() < 1e-9;
        ok &= (0.0..=90.0 + 1e-9).contains(&d_pq);
        ok &= angle3d(&p, &p) < 1e-6;
        let back = normal_to_angles(&angles_to_normal(&p));
        ok &= (back.azimuth_deg - p.azimuth_deg).abs() < 1e-9
            && (back.elevation_deg - p.elevation_deg).abs() < 1e-9;
    }
    // zero iff parallel
    let n = UnitVector3::new(0.3, -0.2, 0.93).unwrap();
    let same = normal_to_angles(&n);
    ok &= angle3d(&same, &same) < 1e-9;
    assert!(verdict(6, "geometry: ellipse fit + angle axioms + roundtrip", ok));
}

// ------------------------------------------------- shared repro run (7-10)

struct ReproArtifacts {
    report_a: Vec<u8>,
    report_b: Vec<u8>,
    manifest: pipeline::Manifest,
    wall: Duration,
}

fn repro() -> &'static ReproArtifacts {
    static CELL: OnceLock<ReproArtifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let bin = env!("CARGO_BIN_EXE_cmrplan");
        let run = |dir: &std::path::Path| {
            let status = Command::new(bin)
                .args([
                    "repro",
                    "--seed",
                    "7",
                    "--out-dir",
                    dir.to_str().unwrap(),
                    "--log-level",
                    "warn",
                ])
                .status()
                .expect("spawn repro");
            assert!(status.success(), "repro run failed");
        };
        let tmp = tempfile::tempdir().expect("tempdir");
        let dir_a = tmp.path().join("a");
        let dir_b = tmp.path().join("b");
        let t0 = Instant::now();
        run(&dir_a);
        let wall = t0.elapsed();
        run(&dir_b);
        let report_a = std::fs::read(dir_a.join("report/cv_report.json")).unwrap();
        let report_b = std::fs::read(dir_b.join("report/cv_report.json")).unwrap();
        let manifest = pipeline::load_manifest(&dir_a.join("manifest.json")).unwrap();
        ReproArtifacts {
            report_a,
            report_b,
            manifest,
            wall,
        }
    })
}

#[test]
fn criterion_7_grouped_cv_integrity() {
    let cases = &repro().manifest.cases;
    let mut ok = cases.len() == 72;
    let folds = grouped_kfold(cases, 6, 7).unwrap();
    let mut seen = HashSet::new();
    for (train, test) in &folds {
        let train_p: HashSet<_> = train.iter().map(|&i| &cases[i].patient_id).collect();
        let test_p: HashSet<_> = test.iter().map(|&i| &cases[i].patient_id).collect();
        ok &= train_p.is_disjoint(&test_p);
        for &i in test {
            ok &= seen.insert(i);
        }
    }
    ok &= seen.len() == cases.len();
    assert!(verdict(7, "grouped CV integrity on 72-case dataset", ok));
}

#[test]
fn criterion_8_end_to_end() {
    let art = repro();
    let report: ExperimentReport = serde_json::from_slice(&art.report_a).unwrap();
    let r = &report.with_noise;
    let mut ok = true;
    ok &= r.short_axis.frac_under_15deg >= 0.90;
    ok &= r.four_chamber.frac_under_15deg >= 0.90;
    ok &= r.two_chamber.frac_under_15deg >= 0.90;
    ok &= r.lv_centroid_mean_mm < 10.0;
    ok &= art.wall <= Duration::from_secs(15 * 60);
    println!(
        "  repro: {:.1} s; LV {:.2} mm; frac<15deg SA {:.2} 4CH {:.2} 2CH {:.2}; failures {}",
        art.wall.as_secs_f64(),
        r.lv_centroid_mean_mm,
        r.short_axis.frac_under_15deg,
        r.four_chamber.frac_under_15deg,
        r.two_chamber.frac_under_15deg,
        r.n_failures
    );
    assert!(verdict(8, "end-to-end phantom analogue", ok));
}

#[test]
fn criterion_9_noised_training_trend_soft() {
    let art = repro();
    let report: ExperimentReport = serde_json::from_slice(&art.report_a).unwrap();
    let low = ["snr10", "snr15"];
    let mean_low = |r: &pipeline::Report| {
        let mut s = 0.0;
        let mut n = 0usize;
        for key in low {
            if let Some(b) = r.per_snr.get(key) {
                s += b.sa_deg + b.ch4_deg + b.ch2_deg;
                n += 3;
            }
        }
        s / n.max(1) as f64
    };
    let clean = mean_low(&report.original_only);
    let noised = mean_low(&report.with_noise);
    let pass = noised <= clean + 2.0;
    // soft check: reported, not gated (2CH caveat applies)
    println!(
        "criterion 9 (noised-training trend, soft): {} — low-SNR mean angle {noised:.2} vs clean {clean:.2} (+2 deg allowance)",
        if pass { "PASS" } else { "SOFT-FAIL" }
    );
}

#[test]
fn criterion_10_determinism() {
    let art = repro();
    let ok = art.report_a == art.report_b;
    assert!(verdict(10, "repro reports byte-identical", ok));
}
