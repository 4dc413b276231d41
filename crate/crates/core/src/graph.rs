//! Binary user×URL graph with interned ids and both sparse layouts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::{Event, Transaction};
use crate::rng;

/// Bidirectional id ↔ index map; indices follow first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdDict {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdDict {
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate id {id:?}")));
            }
        }
        Ok(IdDict { ids, index })
    }

    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sparse binary adjacency `X` (users × URLs).
///
/// Rows (per user) and columns (per URL) are both materialized with sorted
/// indices; the graph is immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    row_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    col_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    users: IdDict,
    urls: IdDict,
}

impl BipartiteGraph {
    /// Builds from an edge list; duplicates are collapsed.
    pub fn from_edges(users: IdDict, urls: IdDict, edges: &[(u32, u32)]) -> Result<Self> {
        let (m, n) = (users.len(), urls.len());
        if m == 0 || n == 0 || edges.is_empty() {
            return Err(Error::EmptyGraph("no edges".into()));
        }
        if m > u32::MAX as usize || n > u32::MAX as usize {
            return Err(Error::Dimension("graph exceeds 2^32 nodes per mode".into()));
        }
        let mut e = edges.to_vec();
        for &(u, v) in &e {
            if u as usize >= m || v as usize >= n {
                return Err(Error::Dimension(format!("edge ({u}, {v}) outside {m}x{n}")));
            }
        }
        e.sort_unstable();
        e.dedup();

        let mut row_ptr = vec![0usize; m + 1];
        for &(u, _) in &e {
            row_ptr[u as usize + 1] += 1;
        }
        for i in 0..m {
            row_ptr[i + 1] += row_ptr[i];
        }
        let row_idx: Vec<u32> = e.iter().map(|&(_, v)| v).collect();

        let mut col_ptr = vec![0usize; n + 1];
        for &(_, v) in &e {
            col_ptr[v as usize + 1] += 1;
        }
        for j in 0..n {
            col_ptr[j + 1] += col_ptr[j];
        }
        let mut fill = col_ptr.clone();
        let mut col_idx = vec![0u32; e.len()];
        // e is sorted by user, so each column receives users in order
        for &(u, v) in &e {
            col_idx[fill[v as usize]] = u;
            fill[v as usize] += 1;
        }
        Ok(BipartiteGraph {
            row_ptr,
            row_idx,
            col_ptr,
            col_idx,
            users,
            urls,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_urls(&self) -> usize {
        self.urls.len()
    }

    pub fn n_edges(&self) -> usize {
        self.row_idx.len()
    }

    /// URL indices adjacent to user `m`, ascending.
    pub fn user_row(&self, m: usize) -> &[u32] {
        &self.row_idx[self.row_ptr[m]..self.row_ptr[m + 1]]
    }

    /// User indices adjacent to URL `n`, ascending.
    pub fn url_col(&self, n: usize) -> &[u32] {
        &self.col_idx[self.col_ptr[n]..self.col_ptr[n + 1]]
    }

    pub fn user_degree(&self, m: usize) -> usize {
        self.row_ptr[m + 1] - self.row_ptr[m]
    }

    pub fn url_degree(&self, n: usize) -> usize {
        self.col_ptr[n + 1] - self.col_ptr[n]
    }

    pub fn users(&self) -> &IdDict {
        &self.users
    }

    pub fn urls(&self) -> &IdDict {
        &self.urls
    }

    pub fn has_edge(&self, m: usize, n: usize) -> bool {
        self.user_row(m).binary_search(&(n as u32)).is_ok()
    }

    /// Edges in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_users()).flat_map(move |m| self.user_row(m).iter().map(move |&n| (m, n as usize)))
    }

    /// Edges read from the column-major layout, in column-major order.
    pub fn edges_by_url(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_urls()).flat_map(move |n| self.url_col(n).iter().map(move |&m| (m as usize, n)))
    }

    /// Dense 0/1 copy, row-major. Intended for small graphs and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_urls()]; self.n_users()];
        for (m, n) in self.edges() {
            d[m][n] = 1.0;
        }
        d
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let path = dir.join("graph.txt");
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
        write_edges(&mut w, self)?;
        w.flush()?;
        for (name, dict) in [("users.txt", &self.users), ("urls.txt", &self.urls)] {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::file(&path, e))?);
            for id in dict.ids() {
                writeln!(w, "{id}")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read_dict = |name: &str| -> Result<IdDict> {
            let path = dir.join(name);
            let f = File::open(&path).map_err(|e| Error::file(&path, e))?;
            let ids = BufReader::new(f).lines().collect::<std::io::Result<Vec<_>>>()?;
            IdDict::from_ids(ids).map_err(|e| Error::load(&path, e.to_string()))
        };
        let users = read_dict("users.txt")?;
        let urls = read_dict("urls.txt")?;
        let path = dir.join("graph.txt");
        let f = File::open(&path).map_err(|e| Error::file(&path, e))?;
        let (m, n, edges) = read_edges(BufReader::new(f)).map_err(|e| Error::load(&path, e.to_string()))?;
        if m != users.len() || n != urls.len() {
            return Err(Error::load(
                &path,
                format!(
                    "header {m}x{n} disagrees with dictionaries {}x{}",
                    users.len(),
                    urls.len()
                ),
            ));
        }
        BipartiteGraph::from_edges(users, urls, &edges)
    }
}

/// `M N E` header then one `user_idx url_idx` line per edge.
pub fn write_edges<W: Write>(mut w: W, g: &BipartiteGraph) -> Result<()> {
    writeln!(w, "{} {} {}", g.n_users(), g.n_urls(), g.n_edges())?;
    for (m, n) in g.edges() {
        writeln!(w, "{m} {n}")?;
    }
    Ok(())
}

pub fn read_edges<R: BufRead>(r: R) -> Result<(usize, usize, Vec<(u32, u32)>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("missing header".into()))??;
    let h: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    if h.len() != 3 {
        return Err(Error::Format(format!("bad header {header:?}")));
    }
    let mut edges = Vec::with_capacity(h[2]);
    for line in lines {
        let line = line?;
        let mut it = line.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Format(format!("bad edge line {line:?}")));
        };
        let parse = |t: &str| {
            t.parse::<u32>()
                .map_err(|_| Error::Format(format!("bad edge line {line:?}")))
        };
        edges.push((parse(a)?, parse(b)?));
    }
    if edges.len() != h[2] {
        return Err(Error::Format(format!(
            "header says {} edges, found {}",
            h[2],
            edges.len()
        )));
    }
    Ok((h[0], h[1], edges))
}

/// Graph of which URLs each user has viewed; repeat views collapse to one
/// unweighted edge. Click events do not create edges.
pub fn build_bipartite(train: &[Transaction]) -> Result<BipartiteGraph> {
    if train.is_empty() {
        return Err(Error::EmptyGraph("no transactions".into()));
    }
    let mut users = IdDict::default();
    let mut urls = IdDict::default();
    let mut edges = Vec::new();
    for t in train.iter().filter(|t| t.event == Event::View) {
        let u = users.intern(&t.user_id) as u32;
        let v = urls.intern(&t.url) as u32;
        edges.push((u, v));
    }
    if edges.is_empty() {
        return Err(Error::EmptyGraph("no view transactions".into()));
    }
    BipartiteGraph::from_edges(users, urls, &edges)
}

/// A filtered graph plus, for each new index, the index in the source graph.
#[derive(Debug, Clone)]
pub struct FilteredGraph {
    pub graph: BipartiteGraph,
    pub user_origin: Vec<usize>,
    pub url_origin: Vec<usize>,
}

/// Keeps the `top_users` users with most URLs (ties go to the user seen
/// first), then the URLs seen by at least `min_unique_users_per_url` of the
/// kept users. Survivors keep their relative order.
pub fn filter_graph(g: &BipartiteGraph, top_users: usize, min_unique_users_per_url: usize) -> Result<FilteredGraph> {
    if top_users == 0 || min_unique_users_per_url == 0 {
        return Err(Error::Validation(
            "top_users and min_unique_users_per_url must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..g.n_users()).collect();
    order.sort_by_key(|&m| std::cmp::Reverse(g.user_degree(m)));
    order.truncate(top_users);
    order.sort_unstable();
    let user_origin = order;

    let mut new_user = vec![u32::MAX; g.n_users()];
    for (i, &m) in user_origin.iter().enumerate() {
        new_user[m] = i as u32;
    }
    let url_origin: Vec<usize> = (0..g.n_urls())
        .filter(|&n| {
            g.url_col(n)
                .iter()
                .filter(|&&m| new_user[m as usize] != u32::MAX)
                .count()
                >= min_unique_users_per_url
        })
        .collect();
    if url_origin.is_empty() {
        return Err(Error::EmptyGraph(format!(
            "no URL has {min_unique_users_per_url} distinct users among the top {top_users}"
        )));
    }
    let mut new_url = vec![u32::MAX; g.n_urls()];
    for (i, &n) in url_origin.iter().enumerate() {
        new_url[n] = i as u32;
    }
    let mut edges = Vec::new();
    for (i, &m) in user_origin.iter().enumerate() {
        for &n in g.user_row(m) {
            let j = new_url[n as usize];
            if j != u32::MAX {
                edges.push((i as u32, j));
            }
        }
    }
    let users = IdDict::from_ids(user_origin.iter().map(|&m| g.users.id(m).to_owned()).collect())?;
    let urls = IdDict::from_ids(url_origin.iter().map(|&n| g.urls.id(n).to_owned()).collect())?;
    Ok(FilteredGraph {
        graph: BipartiteGraph::from_edges(users, urls, &edges)?,
        user_origin,
        url_origin,
    })
}

/// Planted block fixture: `user_sizes[k]` users in cluster `k` (contiguous
/// indices), likewise for URLs; edges with `p_in` inside diagonal blocks and
/// `p_out` elsewhere. Returns the graph and the true assignments.
pub fn planted_blocks(
    user_sizes: &[usize],
    url_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<(BipartiteGraph, Vec<usize>, Vec<usize>)> {
    let expand = |sizes: &[usize]| -> Vec<usize> {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &s)| std::iter::repeat_n(k, s))
            .collect()
    };
    let zu = expand(user_sizes);
    let zv = expand(url_sizes);
    let mut rng = rng::seeded(seed);
    let mut edges = Vec::new();
    for (m, &a) in zu.iter().enumerate() {
        for (n, &b) in zv.iter().enumerate() {
            let p = if a == b { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((m as u32, n as u32));
            }
        }
    }
    let users = IdDict::from_ids((0..zu.len()).map(|i| format!("u{i}")).collect())?;
    let urls = IdDict::from_ids((0..zv.len()).map(|i| format!("url{i}")).collect())?;
    Ok((BipartiteGraph::from_edges(users, urls, &edges)?, zu, zv))
}
