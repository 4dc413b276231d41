//! Fixtures shared by the benchmarks.

use std::collections::HashMap;

use cograph::features::{ColumnLayout, FeatureGroup, GroupRange, SparseRow};
use cograph::graph::planted_blocks;
use cograph::logreg::WeightTable;
use cograph::{BipartiteGraph, DesignMatrix, LogRegModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Planted block graph with `k` equal user and URL blocks.
pub fn block_graph(users: usize, urls: usize, k: usize, seed: u64) -> BipartiteGraph {
    let (g, _, _) = planted_blocks(&vec![users / k; k], &vec![urls / k; k], 0.1, 0.01, seed).expect("valid sizes");
    g
}

/// Binary design matrix with `per_row` active columns out of `cols`, labels
/// from a sparse logistic model.
pub fn binary_design(rows: usize, cols: usize, per_row: usize, seed: u64) -> DesignMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..cols)
        .map(|_| {
            if rng.random::<f64>() < 0.1 {
                rng.random_range(-2.0..2.0)
            } else {
                0.0
            }
        })
        .collect();
    let mut data = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut idx: Vec<u32> = (0..per_row).map(|_| rng.random_range(0..cols as u32)).collect();
        idx.sort_unstable();
        idx.dedup();
        let z: f64 = -3.0 + idx.iter().map(|&j| w[j as usize]).sum::<f64>();
        labels.push(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-z).exp())));
        let values = vec![1.0; idx.len()];
        data.push(SparseRow { indices: idx, values });
    }
    let layout = ColumnLayout {
        groups: vec![GroupRange {
            group: FeatureGroup::F1,
            columns: 0..cols,
        }],
        n_features: cols,
        intercept: true,
    };
    DesignMatrix::from_rows(data, labels, layout).expect("valid rows")
}

/// Dense random model and its product-form table.
pub fn model_and_table(cols: usize, seed: u64) -> (LogRegModel, WeightTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let intercept: f64 = -2.0;
    let entries: HashMap<u32, f64> = weights.iter().enumerate().map(|(j, w)| (j as u32, w.exp())).collect();
    let table = WeightTable::new(entries, intercept.exp(), cols).expect("valid table");
    let model = LogRegModel {
        weights,
        intercept,
        fit_intercept: true,
        penalty: vec![0.0; cols + 1],
        converged: true,
        iterations: 0,
        final_objective: 0.0,
        train_seconds: 0.0,
        nnz_total: cols,
        nnz_by_group: Vec::new(),
    };
    (model, table)
}
