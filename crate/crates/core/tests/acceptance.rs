//! Acceptance criteria 1–10. Each test prints one PASS/FAIL line.

mod common;

use std::time::Instant;

use cograph::bidserver::ServingBundle;
use cograph::eval::{geometric_grid, lift, TuningProtocol};
use cograph::experiment::{prepare, ExperimentConfig};
use cograph::features::{FeatureGroup, SparseRow};
use cograph::graph::planted_blocks;
use cograph::ingest::{ctr_spread, SyntheticConfig};
use cograph::irm::{irm_run, irm_run_with, nmi, IrmHyperParams, IrmRunOptions};
use cograph::logreg::{
    export_weight_table, fast_predict, kkt_violation, loss_grad, predict_proba, train, LogRegModel, TrainOptions,
};
use cograph::nmf::nmf_factorize;
use cograph::svd::truncated_svd;
use common::{dense, report, rng, Instance};
use nalgebra::DMatrix;
use rand::Rng;

#[test]
fn criterion_01_lift_formula() {
    let a = lift(0.8815, 0.9383).unwrap();
    let b = lift(0.8935, 0.9176).unwrap();
    let pass = (a - 6.05).abs() <= 0.01 && (b - 2.63).abs() <= 0.01;
    report(1, "lift formula", pass, &format!("{a:.3}% and {b:.3}%"));
    assert!(pass);
}

fn model_with(weights: Vec<f64>, intercept: f64) -> LogRegModel {
    LogRegModel {
        penalty: vec![0.0; weights.len() + 1],
        nnz_total: weights.iter().filter(|w| **w != 0.0).count(),
        nnz_by_group: vec![],
        weights,
        intercept,
        fit_intercept: true,
        converged: true,
        iterations: 0,
        final_objective: 0.0,
        train_seconds: 0.0,
    }
}

#[test]
fn criterion_02_product_form_equivalence() {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let weights: Vec<f64> = (0..10)
            .map(|_| {
                if r.random::<f64>() < 0.2 {
                    0.0
                } else {
                    r.random_range(-3.0..3.0)
                }
            })
            .collect();
        let model = model_with(weights, r.random_range(-4.0..1.0));
        let table = export_weight_table(&model);
        for bits in 0u32..1024 {
            let active: Vec<u32> = (0..10).filter(|j| bits >> j & 1 == 1).collect();
            let row = SparseRow {
                values: vec![1.0; active.len()],
                indices: active.clone(),
            };
            let d = (fast_predict(&table, &active).unwrap() - predict_proba(&model, &row)).abs();
            worst = worst.max(d);
        }
    }
    let pass = worst <= 1e-12;
    report(
        2,
        "product-form predictor",
        pass,
        &format!("max |Δ| = {worst:.2e} over 20×1024 rows"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient() {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let inst = Instance::random(50, 10, 0.5, 300 + seed);
        let x = inst.design();
        let mut r = rng(seed);
        let w: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let w0 = r.random_range(-1.0..1.0);
        let lg = loss_grad(&x, &w, w0).unwrap();
        assert!((lg.loss - inst.loss(&w, w0)).abs() < 1e-9 * lg.loss);
        let mut check = |fd: f64, an: f64| {
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
        };
        for j in 0..10 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            let fd = (inst.loss(&wp, w0) - inst.loss(&wm, w0)) / (2.0 * h);
            check(fd, lg.grad[j]);
        }
        let fd = (inst.loss(&w, w0 + h) - inst.loss(&w, w0 - h)) / (2.0 * h);
        check(fd, lg.grad0);
    }
    let pass = worst < 1e-5;
    report(
        3,
        "gradient vs finite differences",
        pass,
        &format!("max relative error {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_owlqn_optimality() {
    let opts = TrainOptions {
        tol: 1e-15,
        grad_tol: 1e-10,
        max_iter: 5000,
        ..Default::default()
    };
    let (mut worst_kkt, mut worst_cd, mut worst_newton): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut worst_oracle_kkt: f64 = 0.0;
    for seed in 0..20 {
        let inst = Instance::random(60, 6, 0.6, 400 + seed);
        let x = inst.design();
        let mut r = rng(40 + seed);
        let mut lam: Vec<f64> = (0..6).map(|_| [0.0, 0.3, 2.0, 8.0][r.random_range(0..4)]).collect();
        lam.push(0.0);
        let m = train(&x, &lam, &opts).unwrap();
        worst_kkt = worst_kkt.max(kkt_violation(&m, &x).unwrap());
        let (w, w0) = inst.proximal_gradient(&lam);
        worst_oracle_kkt = worst_oracle_kkt.max(inst.kkt(&w, w0, &lam));
        let oracle = inst.objective(&w, w0, &lam);
        let ours = inst.objective(&m.weights, m.intercept, &lam);
        worst_cd = worst_cd.max((ours - oracle).abs() / oracle);

        let zero = vec![0.0; 7];
        let m0 = train(&x, &zero, &opts).unwrap();
        let (w, w0) = inst.newton();
        let oracle = inst.loss(&w, w0);
        worst_newton = worst_newton.max((inst.loss(&m0.weights, m0.intercept) - oracle).abs() / oracle);
    }
    let pass = worst_kkt <= 1e-4 && worst_oracle_kkt <= 1e-6 && worst_cd <= 1e-8 && worst_newton <= 1e-6;
    report(
        4,
        "OWL-QN optimality",
        pass,
        &format!(
            "KKT {worst_kkt:.1e}, vs proximal gradient {worst_cd:.1e} (oracle KKT {worst_oracle_kkt:.1e}), vs Newton {worst_newton:.1e}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_nmf() {
    let mut worst_rise: f64 = 0.0;
    for seed in 0..10 {
        let (g, _, _) = planted_blocks(&[100], &[80], 0.3, 0.3, 500 + seed).unwrap();
        for k in [2, 5] {
            let f = nmf_factorize(&g, k, 200, 0.0, seed).unwrap();
            for w in f.objective_trace.windows(2) {
                worst_rise = worst_rise.max((w[1] - w[0]) / w[0]);
            }
        }
    }
    let (ones, _, _) = planted_blocks(&[20], &[15], 1.0, 1.0, 1).unwrap();
    let f = nmf_factorize(&ones, 1, 500, 1e-14, 3).unwrap();
    let rel = f.residual_fro / (ones.n_edges() as f64).sqrt();
    let pass = worst_rise <= 1e-10 && rel < 1e-3;
    report(
        5,
        "NMF monotone objective and rank-1 recovery",
        pass,
        &format!("largest relative rise {worst_rise:.1e}, rank-1 residual {rel:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_svd() {
    let (mut sv_err, mut ortho_err, mut ey_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seed in 0..10 {
        let (g, _, _) = planted_blocks(&[20], &[15], 0.4, 0.4, 600 + seed).unwrap();
        let x = dense(&g);
        let f = truncated_svd(&g, 5, 100, 1e-12, seed).unwrap();
        // oracle: eigenvalues of XᵀX
        let eig = (x.transpose() * &x).symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for (s, e) in f.s.iter().zip(&ev[..5]) {
            sv_err = sv_err.max((s - e).abs());
        }
        let id = DMatrix::<f64>::identity(5, 5);
        ortho_err = ortho_err
            .max((f.u.transpose() * &f.u - &id).amax())
            .max((f.v.transpose() * &f.v - &id).amax());
        let resid = (&x - f.reconstruct()).norm_squared();
        let tail: f64 = ev[5..].iter().map(|s| s * s).sum();
        ey_err = ey_err.max((resid - tail).abs() / x.norm_squared());
    }
    let pass = sv_err <= 1e-8 && ortho_err <= 1e-8 && ey_err <= 1e-8;
    report(
        6,
        "truncated SVD",
        pass,
        &format!("σ error {sv_err:.1e}, orthonormality {ortho_err:.1e}, Eckart–Young {ey_err:.1e}"),
    );
    assert!(pass);
}

fn planted_fixture() -> (cograph::BipartiteGraph, Vec<usize>, Vec<usize>) {
    planted_blocks(&[60, 40], &[50, 50], 0.9, 0.1, 7).unwrap()
}

#[test]
fn criterion_07_irm_planted_recovery() {
    let (g, zu, zv) = planted_fixture();
    let hyper = IrmHyperParams::with_truncation(10);
    let mut perfect = 0;
    let mut detail = Vec::new();
    let mut within = true;
    for seed in [1, 2, 3] {
        let r = irm_run(&g, hyper, 200, seed).unwrap();
        let ca = r.cluster_assignments();
        let (a, b) = (nmi(&ca.user, &zu), nmi(&ca.url, &zv));
        if a == 1.0 && b == 1.0 {
            perfect += 1;
        }
        within &= r.k1_used <= 10 && r.k2_used <= 10;
        detail.push(format!("seed {seed}: NMI {a:.3}/{b:.3}, K {}x{}", r.k1_used, r.k2_used));
    }
    let pass = perfect >= 2 && within;
    report(7, "IRM planted recovery", pass, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_08_irm_determinism() {
    let (g, _, _) = planted_fixture();
    let hyper = IrmHyperParams::with_truncation(10);
    let runs: Vec<_> = [1, 2, 8]
        .iter()
        .map(|&w| {
            irm_run_with(
                &g,
                hyper,
                IrmRunOptions {
                    n_sweeps: 100,
                    seed: 42,
                    workers: Some(w),
                },
            )
            .unwrap()
        })
        .collect();
    let pass = runs.windows(2).all(|p| p[0] == p[1]);
    report(
        8,
        "IRM determinism across worker counts",
        pass,
        "workers 1, 2, 8 at seed 42",
    );
    assert!(pass);
}

fn criterion_9_config() -> ExperimentConfig {
    ExperimentConfig {
        synthetic: SyntheticConfig {
            n_users: 10_000,
            n_urls: 2_000,
            k_user: 4,
            k_url: 4,
            density_in: 0.02,
            density_out: 0.002,
            ctr_by_block: ctr_spread(4, 4, 0.002, 0.05, 9),
            n_impressions: 200_000,
            n_banners: 5,
            n_days: 7,
            seed: 9,
            ..Default::default()
        },
        irm: Some((IrmHyperParams::with_truncation(20), 40)),
        seed: 9,
        ..Default::default()
    }
}

/// Criteria 9 and 10 share the experiment.
#[test]
fn criteria_09_10_synthetic_end_to_end() {
    let start = Instant::now();
    let prepared = prepare(&criterion_9_config()).unwrap();
    let grid = geometric_grid(0.05, 2.5, 8);
    let protocol = TuningProtocol {
        grid_f1: grid.clone(),
        grid_f2: grid.clone(),
        grid_rest: grid,
        ..Default::default()
    };
    let tuned = prepared.tune(&protocol).unwrap();
    let ll = |groups: &[FeatureGroup]| tuned.result.selected_for(groups).unwrap().ll_normalized;
    use FeatureGroup::*;
    let lift_irm = lift(ll(&[F1, F3, F4]), ll(&[F1])).unwrap();
    let lift_irm_f2 = lift(ll(&[F1, F2, F3, F4]), ll(&[F1, F2])).unwrap();
    let pass9 = lift_irm > 0.0 && lift_irm_f2 >= 0.0;
    report(
        9,
        "synthetic lift ordering",
        pass9,
        &format!(
            "lift(f1,f3,f4 | f1) = {lift_irm:.2}%, lift(f1,f2,f3,f4 | f1,f2) = {lift_irm_f2:.2}%, {} reports in {:.0}s",
            tuned.result.reports.len(),
            start.elapsed().as_secs_f64()
        ),
    );

    // criterion 10: active features with IRM groups only, and serving latency
    let sub = tuned.test_x.select_groups(&[F1, F3, F4]).unwrap();
    let active: usize = (0..sub.n_rows()).map(|i| sub.row(i).0.len() + 1).sum();
    let avg_active = active as f64 / sub.n_rows() as f64;
    let selected = tuned.result.selected_for(&[F1, F3, F4]).unwrap();
    let encoder = prepared.encoder().unwrap();
    let bundle = ServingBundle::build(&selected.model, sub.layout(), &encoder).unwrap();
    let mut max_diff: f64 = 0.0;
    let mut elapsed = Vec::with_capacity(10_000);
    for i in 0..10_000 {
        let o = &prepared.test_obs[i % prepared.test_obs.len()];
        let r = bundle.handle_request(&o.user_id, &o.banner_id, &o.url, 100_000);
        elapsed.push(r.elapsed_us);
        if i < prepared.test_obs.len() {
            let row = sub.sparse_row(i);
            max_diff = max_diff.max((r.probability - predict_proba(&selected.model, &row)).abs());
            assert_eq!(r.active, row.nnz() + 1);
        }
    }
    elapsed.sort_by(f64::total_cmp);
    let p99 = elapsed[elapsed.len() * 99 / 100];
    let pass10 = avg_active <= 4.0 && p99 < 1000.0 && max_diff <= 1e-12;
    report(
        10,
        "sparsity economics",
        pass10,
        &format!("average active features {avg_active:.2}, p99 handling {p99:.2}µs, offline |Δ| {max_diff:.1e}"),
    );
    assert!(pass9 && pass10);
}
