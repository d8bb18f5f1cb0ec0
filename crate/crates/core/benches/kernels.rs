use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nicegan::config::default_paper_config;
use nicegan::data::{batch_iterator, make_synthetic_domains, SyntheticSpec};
use nicegan::exec;
use nicegan::kernels::{conv2d_forward, gemm, ConvGeom, MatRef};
use nicegan::networks::Scale;
use nicegan::training::ModelState;

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn bench_gemm(c: &mut Criterion) {
    let n = 256;
    let a: Vec<f32> = (0..n * n).map(|i| (i % 17) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..n * n).map(|i| (i % 13) as f32 * 0.1).collect();
    let mut out = vec![0.0f32; n * n];
    let mut group = c.benchmark_group("gemm_256");
    for (name, par) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            exec::set_parallel(par);
            bch.iter(|| gemm(MatRef::new(&a, n, n), MatRef::new(&b, n, n), black_box(&mut out), false))
        });
    }
    group.finish();
    exec::set_parallel(true);
}

fn bench_conv(c: &mut Criterion) {
    let geom = ConvGeom {
        in_c: 64,
        in_h: 64,
        in_w: 64,
        out_c: 128,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let x: Vec<f32> = (0..2 * 64 * 64 * 64).map(|i| ((i % 31) as f32 - 15.0) / 15.0).collect();
    let w: Vec<f32> = (0..128 * 64 * 16).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect();
    let mut group = c.benchmark_group("conv_k4s2_64to128_64px");
    for (name, par) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            exec::set_parallel(par);
            bch.iter(|| conv2d_forward(black_box(&x), 2, &w, None, &geom))
        });
    }
    group.finish();
    exec::set_parallel(true);
}

fn bench_train_step(c: &mut Criterion) {
    let mut cfg = default_paper_config();
    cfg.image_size = 32;
    cfg.base_filters = 8;
    cfg.n_res_blocks = 2;
    cfg.scales_enabled = vec![Scale::C0, Scale::C1];
    let (x, y) = make_synthetic_domains(
        SyntheticSpec {
            n: 4,
            size: 32,
            hue_x: 0.0,
            hue_y: 0.5,
        },
        0,
    )
    .unwrap();
    let batch = batch_iterator(&x, &y, &cfg, 0).unwrap().batch_at(0).unwrap();
    let mut group = c.benchmark_group("train_step_32px_f8");
    group.sample_size(10);
    for (name, par) in modes() {
        let mut state = ModelState::init(&cfg).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            exec::set_parallel(par);
            bch.iter(|| state.train_step(black_box(&batch)).unwrap())
        });
    }
    group.finish();
    exec::set_parallel(true);
}

criterion_group!(benches, bench_gemm, bench_conv, bench_train_step);
criterion_main!(benches);
