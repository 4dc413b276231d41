//! Least-squares NMF `X ≈ W H` with Lee–Seung multiplicative updates.
//!
//! The adjacency is never densified: `WᵀX` and `XHᵀ` come from the sparse
//! layouts and the objective uses
//! `½‖X − WH‖² = ½(nnz − 2 Σ_(m,n)∈E (WH)_mn + ⟨WᵀW, HHᵀ⟩)`.
//!
//! Internally `W` is kept row-major (one row per user) and `H` column-major
//! (one column per URL) so that both updates stream over contiguous rows.
//! Reductions run over a fixed chunking, independent of the thread count.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::rng;

pub const EPSILON: f64 = 1e-12;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITER: usize = 500;
/// Entries at or below this fraction of their component's maximum count as zero.
pub const NONZERO_REL_THRESHOLD: f64 = 1e-8;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct NmfFactors {
    /// `M × K`, non-negative.
    pub w: DMatrix<f64>,
    /// `K × N`, non-negative.
    pub h: DMatrix<f64>,
    pub k: usize,
    /// `½‖X − WH‖²` at initialization and after every iteration.
    pub objective_trace: Vec<f64>,
    /// `‖X − WH‖_F` of the returned factors.
    pub residual_fro: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Loading counts in the layout of a predictor-statistics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadingStats {
    pub dimensionality: usize,
    pub nnz: usize,
    /// Fraction of zero entries.
    pub sparsity: f64,
}

/// Gram matrix `Σ_i a_i a_iᵀ` of the `k`-wide rows of `rows`.
fn gram(rows: &[f64], k: usize) -> Vec<f64> {
    let partial: Vec<Vec<f64>> = rows
        .par_chunks(CHUNK * k)
        .map(|chunk| {
            let mut g = vec![0.0; k * k];
            for r in chunk.chunks_exact(k) {
                for a in 0..k {
                    let ra = r[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in 0..k {
                        g[a * k + b] += ra * r[b];
                    }
                }
            }
            g
        })
        .collect();
    let mut g = vec![0.0; k * k];
    for p in partial {
        g.iter_mut().zip(p).for_each(|(x, y)| *x += y);
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective from node-major buffers.
fn objective_raw(g: &BipartiteGraph, w: &[f64], h: &[f64], k: usize) -> f64 {
    let cross_rows: Vec<f64> = (0..g.n_users())
        .into_par_iter()
        .map(|m| {
            let wr = &w[m * k..(m + 1) * k];
            g.user_row(m)
                .iter()
                .map(|&n| dot(wr, &h[n as usize * k..(n as usize + 1) * k]))
                .sum::<f64>()
        })
        .collect();
    let cross: f64 = cross_rows.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).sum();
    let gw = gram(w, k);
    let gh = gram(h, k);
    let quad = dot(&gw, &gh);
    (0.5 * (g.n_edges() as f64 - 2.0 * cross + quad)).max(0.0)
}

fn to_buffers(w: &DMatrix<f64>, h: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    // row-major W; DMatrix storage of K×N H is already one column per URL
    (w.transpose().as_slice().to_vec(), h.as_slice().to_vec())
}

/// `½‖X − WH‖²_F`.
pub fn nmf_objective(g: &BipartiteGraph, w: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64> {
    let k = w.ncols();
    if w.nrows() != g.n_users() || h.ncols() != g.n_urls() || h.nrows() != k {
        return Err(Error::Dimension(format!(
            "W {}x{} and H {}x{} do not fit a {}x{} graph",
            w.nrows(),
            w.ncols(),
            h.nrows(),
            h.ncols(),
            g.n_users(),
            g.n_urls()
        )));
    }
    let (wb, hb) = to_buffers(w, h);
    Ok(objective_raw(g, &wb, &hb, k))
}

/// Seeded initial factors: uniform (0, 1] scaled by `sqrt(mean(X)/K)`,
/// drawn W row by row, then H row by row.
pub fn nmf_init(g: &BipartiteGraph, k: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if k == 0 {
        return Err(Error::Dimension("NMF needs K >= 1".into()));
    }
    let (m, n) = (g.n_users(), g.n_urls());
    let mean = g.n_edges() as f64 / (m as f64 * n as f64);
    let scale = (mean / k as f64).sqrt();
    let mut rng = rng::seeded(seed);
    let mut draw = || scale * (1.0 - rng.random::<f64>());
    let w_rows: Vec<f64> = (0..m * k).map(|_| draw()).collect();
    let h_rows: Vec<f64> = (0..k * n).map(|_| draw()).collect();
    Ok((
        DMatrix::from_row_slice(m, k, &w_rows),
        DMatrix::from_row_slice(k, n, &h_rows),
    ))
}

pub fn nmf_factorize(g: &BipartiteGraph, k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<NmfFactors> {
    let (w, h) = nmf_init(g, k, seed)?;
    nmf_factorize_from(g, w, h, max_iter, tol)
}

/// Runs the multiplicative updates from the given factors.
///
/// One iteration is `H ← H ∘ (WᵀX) ⊘ (WᵀWH + ε)` followed by
/// `W ← W ∘ (XHᵀ) ⊘ (WHHᵀ + ε)`. Stops when the relative objective change
/// falls below `tol` or after `max_iter` iterations.
pub fn nmf_factorize_from(
    g: &BipartiteGraph,
    w0: DMatrix<f64>,
    h0: DMatrix<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<NmfFactors> {
    let k = w0.ncols();
    if k == 0 {
        return Err(Error::Dimension("NMF needs K >= 1".into()));
    }
    let f0 = nmf_objective(g, &w0, &h0)?;
    if w0.iter().chain(h0.iter()).any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Validation(
            "initial factors must be finite and non-negative".into(),
        ));
    }
    let (m, n) = (g.n_users(), g.n_urls());
    let (mut w, mut h) = to_buffers(&w0, &h0);
    let mut trace = vec![f0];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;

        let gw = gram(&w, k);
        h.par_chunks_mut(k).enumerate().for_each(|(col, hc)| {
            let mut num = vec![0.0; k];
            for &u in g.url_col(col) {
                let wr = &w[u as usize * k..(u as usize + 1) * k];
                num.iter_mut().zip(wr).for_each(|(a, b)| *a += b);
            }
            let den: Vec<f64> = (0..k).map(|a| dot(&gw[a * k..(a + 1) * k], hc)).collect();
            for a in 0..k {
                hc[a] *= num[a] / (den[a] + EPSILON);
            }
        });

        let gh = gram(&h, k);
        w.par_chunks_mut(k).enumerate().for_each(|(row, wr)| {
            let mut num = vec![0.0; k];
            for &v in g.user_row(row) {
                let hc = &h[v as usize * k..(v as usize + 1) * k];
                num.iter_mut().zip(hc).for_each(|(a, b)| *a += b);
            }
            let den: Vec<f64> = (0..k).map(|a| dot(&gh[a * k..(a + 1) * k], wr)).collect();
            for a in 0..k {
                wr[a] *= num[a] / (den[a] + EPSILON);
            }
        });

        debug_assert!(w.iter().chain(h.iter()).all(|&x| x >= 0.0));
        if w.iter().chain(h.iter()).any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN in NMF factors at iteration {iterations}")));
        }

        let f = objective_raw(g, &w, &h, k);
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(f);
        if prev <= 0.0 || (prev - f).abs() / prev < tol {
            converged = true;
            break;
        }
    }

    let last = *trace.last().expect("non-empty");
    Ok(NmfFactors {
        w: DMatrix::from_row_slice(m, k, &w),
        h: DMatrix::from_column_slice(k, n, &h),
        k,
        objective_trace: trace,
        residual_fro: (2.0 * last).sqrt(),
        iterations,
        converged,
    })
}

/// Per-component thresholds: `NONZERO_REL_THRESHOLD · max` over the component.
fn thresholds(values: impl Fn(usize) -> Vec<f64>, k: usize) -> Vec<f64> {
    (0..k)
        .map(|c| NONZERO_REL_THRESHOLD * values(c).into_iter().fold(0.0, f64::max))
        .collect()
}

impl NmfFactors {
    /// Zero thresholds for user loadings, one per component.
    pub fn user_thresholds(&self) -> Vec<f64> {
        thresholds(|c| self.w.column(c).iter().copied().collect(), self.k)
    }

    /// Zero thresholds for URL loadings, one per component.
    pub fn url_thresholds(&self) -> Vec<f64> {
        thresholds(|c| self.h.row(c).iter().copied().collect(), self.k)
    }

    pub fn user_loading_stats(&self) -> LoadingStats {
        let t = self.user_thresholds();
        let nnz = (0..self.w.nrows())
            .map(|m| (0..self.k).filter(|&c| self.w[(m, c)] > t[c]).count())
            .sum();
        stats(self.k, nnz, self.w.nrows())
    }

    pub fn url_loading_stats(&self) -> LoadingStats {
        let t = self.url_thresholds();
        let nnz = (0..self.h.ncols())
            .map(|n| (0..self.k).filter(|&c| self.h[(c, n)] > t[c]).count())
            .sum();
        stats(self.k, nnz, self.h.ncols())
    }

    /// `w.txt` and `h.txt` as `rows cols nnz` then `row col value` triplets
    /// above the zero threshold; `trace.txt` with one objective per line.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let ut = self.user_thresholds();
        let vt = self.url_thresholds();
        write_triplets(&dir.join("w.txt"), &self.w, |_, c| ut[c])?;
        write_triplets(&dir.join("h.txt"), &self.h, |r, _| vt[r])?;
        let path = dir.join("trace.txt");
        let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
        writeln!(
            f,
            "# k={} iterations={} converged={}",
            self.k, self.iterations, self.converged
        )?;
        for v in &self.objective_trace {
            writeln!(f, "{v:e}")?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads factors back; entries below threshold come back as zero.
    pub fn load(dir: &Path) -> Result<Self> {
        let w = read_triplets(&dir.join("w.txt"))?;
        let h = read_triplets(&dir.join("h.txt"))?;
        if w.ncols() != h.nrows() {
            return Err(Error::load(dir, "W and H disagree on K"));
        }
        let path = dir.join("trace.txt");
        let f = File::open(&path).map_err(|e| Error::file(&path, e))?;
        let mut trace = Vec::new();
        let (mut iterations, mut converged) = (0, false);
        for line in BufReader::new(f).lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("iterations", x)) => iterations = x.parse().unwrap_or(0),
                        Some(("converged", x)) => converged = x == "true",
                        _ => {}
                    }
                }
                continue;
            }
            trace.push(
                line.trim()
                    .parse()
                    .map_err(|_| Error::load(&path, format!("bad value {line:?}")))?,
            );
        }
        let last = trace.last().copied().unwrap_or(f64::NAN);
        Ok(NmfFactors {
            k: w.ncols(),
            w,
            h,
            objective_trace: trace,
            residual_fro: (2.0 * last).sqrt(),
            iterations,
            converged,
        })
    }
}

fn stats(k: usize, nnz: usize, entities: usize) -> LoadingStats {
    let total = (k * entities) as f64;
    LoadingStats {
        dimensionality: k,
        nnz,
        sparsity: if total > 0.0 { 1.0 - nnz as f64 / total } else { 0.0 },
    }
}

fn write_triplets(path: &Path, m: &DMatrix<f64>, threshold: impl Fn(usize, usize) -> f64) -> Result<()> {
    let mut entries = Vec::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let v = m[(r, c)];
            if v > threshold(r, c) {
                entries.push((r, c, v));
            }
        }
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
    writeln!(f, "{} {} {}", m.nrows(), m.ncols(), entries.len())?;
    for (r, c, v) in entries {
        writeln!(f, "{r} {c} {v:e}")?;
    }
    f.flush()?;
    Ok(())
}

fn read_triplets(path: &Path) -> Result<DMatrix<f64>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let bad = |msg: String| Error::load(path, msg);
    let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    if h.len() != 3 {
        return Err(bad(format!("bad header {header:?}")));
    }
    let mut m = DMatrix::zeros(h[0], h[1]);
    let mut count = 0;
    for line in lines {
        let line = line?;
        let t: Vec<&str> = line.split_whitespace().collect();
        let parsed = match t.as_slice() {
            [r, c, v] => r
                .parse::<usize>()
                .ok()
                .zip(c.parse::<usize>().ok())
                .zip(v.parse::<f64>().ok()),
            _ => None,
        };
        let Some(((r, c), v)) = parsed.filter(|((r, c), _)| *r < h[0] && *c < h[1]) else {
            return Err(bad(format!("bad triplet {line:?}")));
        };
        m[(r, c)] = v;
        count += 1;
    }
    if count != h[2] {
        return Err(bad(format!("header says {} entries, found {count}", h[2])));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{planted_blocks, IdDict};

    /// Dense reference: objective and updates written directly from the
    /// matrix formulas.
    fn dense_x(g: &BipartiteGraph) -> DMatrix<f64> {
        DMatrix::from_fn(g.n_users(), g.n_urls(), |i, j| f64::from(u8::from(g.has_edge(i, j))))
    }

    fn dense_objective(x: &DMatrix<f64>, w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
        0.5 * (x - w * h).norm_squared()
    }

    fn dense_nmf(x: &DMatrix<f64>, mut w: DMatrix<f64>, mut h: DMatrix<f64>, iters: usize) -> f64 {
        for _ in 0..iters {
            let num = w.transpose() * x;
            let den = w.transpose() * &w * &h;
            h = h.component_mul(&num.zip_map(&den, |a, b| a / (b + EPSILON)));
            let num = x * h.transpose();
            let den = &w * (&h * h.transpose());
            w = w.component_mul(&num.zip_map(&den, |a, b| a / (b + EPSILON)));
        }
        dense_objective(x, &w, &h)
    }

    fn random_graph(rows: usize, cols: usize, seed: u64) -> BipartiteGraph {
        planted_blocks(&[rows], &[cols], 0.3, 0.3, seed).unwrap().0
    }

    #[test]
    fn zero_factors_give_half_edge_count() {
        let g = random_graph(10, 8, 1);
        let f = nmf_objective(&g, &DMatrix::zeros(10, 2), &DMatrix::zeros(2, 8)).unwrap();
        assert_eq!(f, 0.5 * g.n_edges() as f64);
    }

    #[test]
    fn exact_factorization_has_zero_objective() {
        // 2x2 block diagonal = [1_a 0; 0 1_b] [1 0; 0 1]
        let (g, zu, zv) = planted_blocks(&[3, 2], &[2, 4], 1.0, 0.0, 0).unwrap();
        let w = DMatrix::from_fn(5, 2, |i, c| f64::from(u8::from(zu[i] == c)));
        let h = DMatrix::from_fn(2, 6, |c, j| f64::from(u8::from(zv[j] == c)));
        assert!(nmf_objective(&g, &w, &h).unwrap().abs() < 1e-12);
    }

    #[test]
    fn objective_matches_dense() {
        let g = random_graph(10, 8, 4);
        let (w, h) = nmf_init(&g, 3, 9).unwrap();
        let sparse = nmf_objective(&g, &w, &h).unwrap();
        let dense = dense_objective(&dense_x(&g), &w, &h);
        assert!((sparse - dense).abs() <= 1e-10 * dense.max(1.0));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let g = random_graph(4, 3, 0);
        let r = nmf_objective(&g, &DMatrix::zeros(4, 2), &DMatrix::zeros(3, 3));
        assert!(matches!(r, Err(Error::Dimension(_))));
        assert!(matches!(nmf_factorize(&g, 0, 10, 1e-5, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_iterations_records_initial_objective() {
        let g = random_graph(6, 5, 2);
        let (w, h) = nmf_init(&g, 2, 1).unwrap();
        let f = nmf_factorize(&g, 2, 0, 1e-5, 1).unwrap();
        assert_eq!(f.objective_trace, vec![nmf_objective(&g, &w, &h).unwrap()]);
    }

    #[test]
    fn rank_one_input_is_recovered() {
        // all-ones block: X = 1 1ᵀ, strictly positive rank one
        let users = IdDict::from_ids((0..7).map(|i| format!("u{i}")).collect()).unwrap();
        let urls = IdDict::from_ids((0..5).map(|i| format!("v{i}")).collect()).unwrap();
        let edges: Vec<(u32, u32)> = (0..7).flat_map(|i| (0..5).map(move |j| (i, j))).collect();
        let g = BipartiteGraph::from_edges(users, urls, &edges).unwrap();
        let f = nmf_factorize(&g, 1, 2000, 0.0, 3).unwrap();
        let rel = f.residual_fro / (g.n_edges() as f64).sqrt();
        assert!(rel < 1e-3, "relative residual {rel}");
    }

    #[test]
    fn matches_dense_reference_and_decreases() {
        let g = random_graph(30, 20, 8);
        let (w, h) = nmf_init(&g, 3, 5).unwrap();
        let f = nmf_factorize_from(&g, w.clone(), h.clone(), 50, 0.0).unwrap();
        let oracle = dense_nmf(&dense_x(&g), w, h, 50);
        let last = *f.objective_trace.last().unwrap();
        assert!(last <= f.objective_trace[0]);
        assert!(last <= oracle + 1e-8, "{last} vs {oracle}");
        assert!((last - oracle).abs() < 1e-8);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let g = random_graph(40, 30, 1);
        let run = |t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| nmf_factorize(&g, 4, 30, 0.0, 2).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn sparse_files_round_trip_above_threshold() {
        let g = random_graph(12, 9, 3);
        let f = nmf_factorize(&g, 2, 40, 0.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path()).unwrap();
        let back = NmfFactors::load(dir.path()).unwrap();
        assert_eq!(back.objective_trace, f.objective_trace);
        let ut = f.user_thresholds();
        for i in 0..12 {
            for c in 0..2 {
                let expect = if f.w[(i, c)] > ut[c] { f.w[(i, c)] } else { 0.0 };
                assert_eq!(back.w[(i, c)], expect);
            }
        }
        assert_eq!(back.user_loading_stats(), f.user_loading_stats());
    }
}
