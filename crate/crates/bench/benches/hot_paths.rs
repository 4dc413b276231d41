use cograph::irm::{irm_init, irm_sweep, IrmHyperParams};
use cograph::logreg::{fast_predict, fast_predict_unchecked, loss_grad, predict_indices};
use cograph::nmf::{nmf_factorize_from, nmf_init};
use cograph_bench::{binary_design, block_graph, model_and_table};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

fn predictors(c: &mut Criterion) {
    let (model, table) = model_and_table(10_000, 1);
    let mut group = c.benchmark_group("predict");
    for active in [3usize, 50] {
        let idx: Vec<u32> = (0..active as u32).map(|i| i * 97 % 10_000).collect();
        let ones = vec![1.0; active];
        group.bench_with_input(BenchmarkId::new("product_form", active), &idx, |b, idx| {
            b.iter(|| fast_predict(&table, black_box(idx)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("product_form_unchecked", active), &idx, |b, idx| {
            b.iter(|| fast_predict_unchecked(&table, black_box(idx)))
        });
        group.bench_with_input(BenchmarkId::new("sigmoid", active), &idx, |b, idx| {
            b.iter(|| predict_indices(&model, black_box(idx), &ones))
        });
    }
    group.finish();
}

fn irm(c: &mut Criterion) {
    let g = block_graph(2000, 500, 4, 3);
    let state = irm_init(&g, IrmHyperParams::with_truncation(20), 5).unwrap();
    c.bench_function("irm_sweep/2000x500/k20", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| irm_sweep(&mut s, &g).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn logreg(c: &mut Criterion) {
    let x = binary_design(20_000, 5_000, 20, 7);
    let w = vec![0.01; x.n_features()];
    c.bench_function("loss_grad/20000x5000", |b| {
        b.iter(|| loss_grad(&x, black_box(&w), -1.0).unwrap())
    });
}

fn nmf(c: &mut Criterion) {
    let g = block_graph(2000, 500, 4, 9);
    let (w, h) = nmf_init(&g, 10, 11).unwrap();
    c.bench_function("nmf_iteration/2000x500/k10", |b| {
        b.iter_batched(
            || (w.clone(), h.clone()),
            |(w, h)| nmf_factorize_from(&g, w, h, 1, 0.0).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, predictors, irm, logreg, nmf);
criterion_main!(benches);
