use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use cmrplan_core::geometry::fit_ellipse;
use cmrplan_core::noise::{degrade_to_snr, rss_noise_field, SnrSpec};
use cmrplan_core::phantom::{self, PhantomSpec};
use cmrplan_core::segmentation::{segment_image, Connectivity, SegParams};
use cmrplan_core::svr::{train, SvrParams};

fn bench_noise(c: &mut Criterion) {
    let spec = PhantomSpec::default();
    let (v, _, rois) = phantom::generate(&spec).unwrap();
    let nspec = SnrSpec::default();

    c.bench_function("rss_noise_field_128x128x32", |b| {
        b.iter(|| rss_noise_field(v.dims, v.spacing, 5.0, 2, 7, 0).unwrap())
    });
    c.bench_function("degrade_to_snr_15", |b| {
        b.iter(|| degrade_to_snr(&v, 15.0, &rois, &nspec).unwrap())
    });
}

fn bench_segmentation(c: &mut Criterion) {
    let spec = PhantomSpec::default();
    let (v, _, _) = phantom::generate(&spec).unwrap();
    let params = SegParams::default();

    c.bench_function("segment_image_3d_128x128x32", |b| {
        b.iter(|| segment_image(&v.data, v.dims, Connectivity::Six3D, &params).unwrap())
    });
}

fn bench_svr(c: &mut Criterion) {
    // small regression problem comparable to one CV fold
    let n = 60;
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            (
                vec![t, (t * 7.3).sin(), t * t, 1.0 - t],
                (t * 3.1).cos() + 0.1 * t,
            )
        })
        .collect();
    let params = SvrParams::new(8.0, 0.5);
    let mask = vec![true; 4];

    c.bench_function("svr_train_60x4", |b| {
        b.iter_batched(
            || rows.clone(),
            |rows| train(&rows, &params, &mask).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_geometry(c: &mut Criterion) {
    let pts: Vec<(f64, f64)> = (0..256)
        .map(|i| {
            let t = i as f64 / 256.0 * std::f64::consts::TAU;
            (12.0 + 40.0 * t.cos(), -3.0 + 25.0 * t.sin())
        })
        .collect();
    c.bench_function("fit_ellipse_256pts", |b| b.iter(|| fit_ellipse(&pts).unwrap()));
}

criterion_group!(
    benches,
    bench_noise,
    bench_segmentation,
    bench_svr,
    bench_geometry
);
criterion_main!(benches);
