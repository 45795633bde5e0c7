//! Criterion benchmarks over the pipeline's hot paths: raw tensor math,
//! the dual-branch forward pass, one optimizer step, up-sampling, and the
//! evaluation-side point adjustment. Sizes are kept small enough that the
//! whole suite finishes in a few minutes on one core.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcdetector::{
    discrepancy_loss, generate, point_adjust, upsample_inpatch, upsample_patchwise, AdamState,
    AnomalyInjection, AnomalyKind, DetectorConfig, DetectorModel, LossVariant,
    RunSeed, SynthSpec, Tape, Tensor, WindowBatch,
};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn toy_batch(rng: &mut ChaCha8Rng, batch: usize, win: usize, channels: usize) -> WindowBatch {
    WindowBatch {
        windows: rand_vec(rng, batch * win * channels),
        batch,
        win_size: win,
        channels,
        origins: (0..batch).map(|i| i * win).collect(),
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::from_vec(rand_vec(&mut rng, 8 * 64 * 32), vec![8, 64, 32]).unwrap();
    let b = Tensor::from_vec(rand_vec(&mut rng, 8 * 32 * 64), vec![8, 32, 64]).unwrap();
    c.bench_function("matmul 8x64x32 * 8x32x64", |bench| {
        bench.iter_batched(
            Tape::new,
            |mut tape| {
                let ia = tape.leaf(a.clone()).unwrap();
                let ib = tape.leaf(b.clone()).unwrap();
                tape.matmul(ia, ib).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_upsample(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20; // W = 60 with p = 3
    let patch = Tensor::from_vec(rand_vec(&mut rng, 6 * n * n), vec![6, n, n]).unwrap();
    let inpatch = Tensor::from_vec(rand_vec(&mut rng, 6 * 3 * 3), vec![6, 3, 3]).unwrap();
    c.bench_function("upsample_patchwise 20->60", |bench| {
        bench.iter_batched(
            Tape::new,
            |mut tape| {
                let id = tape.leaf(patch.clone()).unwrap();
                upsample_patchwise(&mut tape, id, 3).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("upsample_inpatch 3->60", |bench| {
        bench.iter_batched(
            Tape::new,
            |mut tape| {
                let id = tape.leaf(inpatch.clone()).unwrap();
                upsample_inpatch(&mut tape, id, 20).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_forward_eval(c: &mut Criterion) {
    let mut cfg = DetectorConfig::new(60, vec![1, 3, 5], 1);
    cfg.d_model = 64;
    let model = DetectorModel::new(cfg, RunSeed(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = toy_batch(&mut rng, 8, 60, 1);
    c.bench_function("forward_eval W=60 patches [1,3,5] d=64 b=8", |bench| {
        bench.iter(|| model.forward_eval(&batch).unwrap())
    });
}

fn bench_training_step(c: &mut Criterion) {
    let mut cfg = DetectorConfig::new(32, vec![2, 4], 1);
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.dropout = 0.0;
    let seed = RunSeed(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = toy_batch(&mut rng, 8, 32, 1);
    c.bench_function("train step W=32 patches [2,4] d=32 b=8", |bench| {
        bench.iter_batched(
            || {
                let model = DetectorModel::new(cfg.clone(), seed).unwrap();
                let adam = AdamState::new(1e-4, &model.param_sizes()).unwrap();
                (model, adam)
            },
            |(mut model, mut adam)| {
                let mut tape = Tape::new();
                let ids = model.stage(&mut tape, true).unwrap();
                let fw = model.forward_on_tape(&mut tape, &ids, &batch, false, None).unwrap();
                let arts =
                    discrepancy_loss(&mut tape, &fw, true, true, LossVariant::SymKl).unwrap();
                tape.backward(arts.total).unwrap();
                let grads: Vec<Vec<f64>> = ids
                    .iter()
                    .map(|&id| tape.grad(id).expect("trained parameter").to_vec())
                    .collect();
                let views: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
                adam.step(&mut model.params_mut(), &views, None).unwrap();
                arts.report.total
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_point_adjust(c: &mut Criterion) {
    let spec = SynthSpec {
        length: 20_000,
        channels: 1,
        base_freqs: vec![5.0],
        noise_sigma: 0.05,
        seed: 6,
        injections: (0..20)
            .map(|i| AnomalyInjection {
                kind: AnomalyKind::Seasonal,
                start: 400 + i * 950,
                length: 50,
                magnitude: 3.0,
                channel: 0,
            })
            .collect(),
    };
    let ds = generate(&spec).unwrap();
    let gt = ds.labels.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pred: Vec<bool> = (0..gt.len()).map(|_| rng.gen_bool(0.05)).collect();
    c.bench_function("point_adjust 20k timestamps", |bench| {
        bench.iter(|| point_adjust(&pred, &gt).unwrap())
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_upsample,
    bench_forward_eval,
    bench_training_step,
    bench_point_adjust
);
criterion_main!(benches);
