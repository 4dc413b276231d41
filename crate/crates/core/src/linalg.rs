//! Products between the sparse adjacency and dense factor matrices, and the
//! binary dense-matrix file format.
//!
//! Each output row is computed by exactly one task in a fixed order, so the
//! results are bit-identical for any number of worker threads.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

/// `X · D` for `D` with `n_urls` rows.
pub fn x_times(g: &BipartiteGraph, d: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(d.nrows(), g.n_urls());
    let k = d.ncols();
    let mut out = vec![0.0; g.n_users() * k];
    if k > 0 {
        out.par_chunks_mut(k).enumerate().for_each(|(m, row)| {
            for &n in g.user_row(m) {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += d[(n as usize, j)];
                }
            }
        });
    }
    DMatrix::from_row_slice(g.n_users(), k, &out)
}

/// `Xᵀ · D` for `D` with `n_users` rows.
pub fn xt_times(g: &BipartiteGraph, d: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(d.nrows(), g.n_users());
    let k = d.ncols();
    let mut out = vec![0.0; g.n_urls() * k];
    if k > 0 {
        out.par_chunks_mut(k).enumerate().for_each(|(n, row)| {
            for &m in g.url_col(n) {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += d[(m as usize, j)];
                }
            }
        });
    }
    DMatrix::from_row_slice(g.n_urls(), k, &out)
}

/// Little-endian `u64 rows`, `u64 cols`, then `rows*cols` `f64` row-major.
pub fn write_dense<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dense<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix shape overflows".into()))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format(format!("truncated {rows}x{cols} matrix")))?;
        data.push(f64::from_le_bytes(word));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after matrix".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::planted_blocks;

    #[test]
    fn products_match_dense() {
        let (g, _, _) = planted_blocks(&[4, 3], &[2, 5], 0.7, 0.2, 11).unwrap();
        let x = DMatrix::from_fn(g.n_users(), g.n_urls(), |i, j| if g.has_edge(i, j) { 1.0 } else { 0.0 });
        let d = DMatrix::from_fn(g.n_urls(), 3, |i, j| (i * 3 + j) as f64 * 0.25 - 1.0);
        assert_eq!(x_times(&g, &d), &x * &d);
        let e = DMatrix::from_fn(g.n_users(), 2, |i, j| (i + 2 * j) as f64 * 0.5);
        assert_eq!(xt_times(&g, &e), x.transpose() * &e);
    }

    #[test]
    fn dense_file_round_trip() {
        let m = DMatrix::from_fn(3, 4, |i, j| i as f64 - 0.1 * j as f64);
        let mut buf = Vec::new();
        write_dense(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 16 + 12 * 8);
        assert_eq!(read_dense(buf.as_slice()).unwrap(), m);
        assert!(read_dense(&buf[..buf.len() - 1]).is_err());
    }
}
