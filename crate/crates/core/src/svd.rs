//! Rank-K truncated SVD of the binary adjacency by randomized subspace
//! iteration.
//!
//! A Gaussian test matrix with `K + oversampling` columns is pushed through
//! alternating products with `X` and `Xᵀ`, re-orthonormalizing after each
//! product. The top-K triplets are read off the small projected matrix and
//! the iteration stops once `max_i ‖X v_i − σ_i u_i‖ / σ_1` drops below the
//! tolerance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::linalg::{read_dense, write_dense, x_times, xt_times};
use crate::rng;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const OVERSAMPLING: usize = 10;
pub const MIN_POWER_ITERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `M × K` left singular vectors.
    pub u: DMatrix<f64>,
    /// Non-increasing singular values.
    pub s: Vec<f64>,
    /// `N × K` right singular vectors.
    pub v: DMatrix<f64>,
    pub k: usize,
    /// Relative residual at exit.
    pub achieved_tol: f64,
    pub iterations: usize,
    /// False when `max_iter` ran out before reaching the tolerance.
    pub converged: bool,
}

fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

/// Top-`k` singular triplets of `g`'s adjacency.
///
/// At least [`MIN_POWER_ITERS`] power iterations run; at most
/// `max(max_iter, MIN_POWER_ITERS)`. Missing the tolerance is not an error:
/// the factors come back with `converged == false` and a logged warning.
pub fn truncated_svd(g: &BipartiteGraph, k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<SvdFactors> {
    let (m, n) = (g.n_users(), g.n_urls());
    if k == 0 || k > m.min(n) {
        return Err(Error::Dimension(format!(
            "rank {k} not in 1..={} for a {m}x{n} graph",
            m.min(n)
        )));
    }
    let width = (k + OVERSAMPLING).min(m.min(n));
    let mut rng = rng::seeded(seed);
    let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(x_times(g, &omega));

    let max_iter = max_iter.max(MIN_POWER_ITERS);
    let mut iterations = 0;
    loop {
        iterations += 1;
        let z = orthonormalize(xt_times(g, &q));
        q = orthonormalize(x_times(g, &z));
        if iterations < MIN_POWER_ITERS {
            continue;
        }
        let mut f = project(g, &q, k)?;
        f.iterations = iterations;
        if f.achieved_tol < tol || iterations >= max_iter {
            f.converged = f.achieved_tol < tol;
            if !f.converged {
                log::warn!(
                    "truncated SVD stopped after {iterations} iterations at residual {:.3e} (tol {tol:.1e})",
                    f.achieved_tol
                );
            }
            return Ok(f);
        }
    }
}

/// Rayleigh–Ritz step on the subspace spanned by `q`.
fn project(g: &BipartiteGraph, q: &DMatrix<f64>, k: usize) -> Result<SvdFactors> {
    // Xᵀ Q = (Qᵀ X)ᵀ = V_c S U_cᵀ, so Qᵀ X = U_c S V_cᵀ
    let c = xt_times(g, q);
    let svd = c.svd(true, true);
    let (Some(vc), Some(uc_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numeric("SVD of projected matrix failed".into()));
    };
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    order.truncate(k);

    let uc = uc_t.transpose();
    let small_u = DMatrix::from_fn(uc.nrows(), k, |i, j| uc[(i, order[j])]);
    let mut u = q * small_u;
    let mut v = DMatrix::from_fn(vc.nrows(), k, |i, j| vc[(i, order[j])]);
    let s: Vec<f64> = order.iter().map(|&i| sv[i].max(0.0)).collect();

    for j in 0..k {
        let col = u.column(j);
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > col[best].abs() { i } else { best });
        if col[pivot] < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }

    let xv = x_times(g, &v);
    let scale = s[0];
    let mut residual: f64 = 0.0;
    if scale > 0.0 {
        for j in 0..k {
            let r = (xv.column(j) - u.column(j) * s[j]).norm();
            residual = residual.max(r / scale);
        }
    }
    if !residual.is_finite() {
        return Err(Error::Numeric("non-finite SVD residual".into()));
    }
    Ok(SvdFactors {
        u,
        s,
        v,
        k,
        achieved_tol: residual,
        iterations: 0,
        converged: false,
    })
}

impl SvdFactors {
    /// `u.bin`, `v.bin` (see [`write_dense`]) and `s.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        for (name, mat) in [("u.bin", &self.u), ("v.bin", &self.v)] {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
            write_dense(&mut w, mat)?;
            w.flush()?;
        }
        let path = dir.join("s.txt");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
        writeln!(
            w,
            "# k={} achieved_tol={:e} iterations={} converged={}",
            self.k, self.achieved_tol, self.iterations, self.converged
        )?;
        for s in &self.s {
            writeln!(w, "{s:e}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            let path = dir.join(name);
            File::open(&path).map(BufReader::new).map_err(|e| Error::file(&path, e))
        };
        let u = read_dense(open("u.bin")?).map_err(|e| Error::load(dir.join("u.bin"), e.to_string()))?;
        let v = read_dense(open("v.bin")?).map_err(|e| Error::load(dir.join("v.bin"), e.to_string()))?;
        let mut s = Vec::new();
        let mut meta = (f64::NAN, 0usize, false);
        for line in open("s.txt")?.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("achieved_tol", x)) => meta.0 = x.parse().unwrap_or(f64::NAN),
                        Some(("iterations", x)) => meta.1 = x.parse().unwrap_or(0),
                        Some(("converged", x)) => meta.2 = x == "true",
                        _ => {}
                    }
                }
                continue;
            }
            s.push(
                line.trim()
                    .parse()
                    .map_err(|_| Error::load(dir.join("s.txt"), format!("bad value {line:?}")))?,
            );
        }
        let k = s.len();
        if u.ncols() != k || v.ncols() != k {
            return Err(Error::load(dir, "factor widths disagree with s.txt"));
        }
        Ok(SvdFactors {
            u,
            s,
            v,
            k,
            achieved_tol: meta.0,
            iterations: meta.1,
            converged: meta.2,
        })
    }

    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::IdDict;
    use rand::Rng;

    fn graph_from_dense(x: &[Vec<u8>]) -> BipartiteGraph {
        let edges: Vec<(u32, u32)> = x
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1)
                    .map(move |(j, _)| (i as u32, j as u32))
            })
            .collect();
        let users = IdDict::from_ids((0..x.len()).map(|i| format!("u{i}")).collect()).unwrap();
        let urls = IdDict::from_ids((0..x[0].len()).map(|i| format!("v{i}")).collect()).unwrap();
        BipartiteGraph::from_edges(users, urls, &edges).unwrap()
    }

    fn random_binary(rows: usize, cols: usize, seed: u64) -> BipartiteGraph {
        let mut rng = rng::seeded(seed);
        let x: Vec<Vec<u8>> = (0..rows)
            .map(|_| (0..cols).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect())
            .collect();
        graph_from_dense(&x)
    }

    fn dense(g: &BipartiteGraph) -> DMatrix<f64> {
        DMatrix::from_fn(g.n_users(), g.n_urls(), |i, j| f64::from(u8::from(g.has_edge(i, j))))
    }

    #[test]
    fn identity_spectrum() {
        let x: Vec<Vec<u8>> = (0..4).map(|i| (0..4).map(|j| u8::from(i == j)).collect()).collect();
        let f = truncated_svd(&graph_from_dense(&x), 2, 20, DEFAULT_TOL, 1).unwrap();
        assert!((f.s[0] - 1.0).abs() < 1e-12 && (f.s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_block() {
        // X = 1_a 1_bᵀ = sqrt(|a||b|) · â b̂ᵀ with unit vectors â, b̂
        let a = [1u8, 1, 0, 1, 0];
        let b = [0u8, 1, 1, 0];
        let x: Vec<Vec<u8>> = a.iter().map(|&ai| b.iter().map(|&bj| ai * bj).collect()).collect();
        let g = graph_from_dense(&x);
        let f = truncated_svd(&g, 1, 20, DEFAULT_TOL, 3).unwrap();
        assert!((f.s[0] - 6f64.sqrt()).abs() < 1e-10);
        for (i, &ai) in a.iter().enumerate() {
            assert!((f.u[(i, 0)] - f64::from(ai) / 3f64.sqrt()).abs() < 1e-10);
        }
        for (j, &bj) in b.iter().enumerate() {
            assert!((f.v[(j, 0)] - f64::from(bj) / 2f64.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_out_of_range() {
        let g = random_binary(5, 3, 1);
        assert!(matches!(
            truncated_svd(&g, 4, 10, DEFAULT_TOL, 0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            truncated_svd(&g, 0, 10, DEFAULT_TOL, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matches_dense_eigen_oracle() {
        for seed in 0..5 {
            let g = random_binary(20, 15, seed);
            let x = dense(&g);
            let eig = (x.transpose() * &x).symmetric_eigen();
            let mut oracle: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
            oracle.sort_by(|a, b| b.total_cmp(a));
            let f = truncated_svd(&g, 5, 50, DEFAULT_TOL, seed).unwrap();
            for i in 0..5 {
                assert!((f.s[i] - oracle[i]).abs() < 1e-8, "seed {seed} i {i}");
            }
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sign_convention_and_determinism() {
        let g = random_binary(30, 25, 7);
        let a = truncated_svd(&g, 4, 30, DEFAULT_TOL, 5).unwrap();
        let b = truncated_svd(&g, 4, 30, DEFAULT_TOL, 5).unwrap();
        assert_eq!(a, b);
        for j in 0..4 {
            let col = a.u.column(j);
            let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let first = col.iter().find(|x| x.abs() == max).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn files_round_trip() {
        let g = random_binary(12, 10, 2);
        let f = truncated_svd(&g, 3, 30, DEFAULT_TOL, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        f.save(dir.path()).unwrap();
        assert_eq!(SvdFactors::load(dir.path()).unwrap(), f);
    }
}
