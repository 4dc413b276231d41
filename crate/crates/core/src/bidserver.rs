//! Prediction server over a newline-delimited TCP protocol.
//!
//! Request: `user_id \t banner_id \t url \t deadline_us`.
//! Response: `probability \t active \t elapsed_us \t met`, or `ERR <reason>`.
//!
//! The bundle is immutable and shared through an [`ArcSwap`], so request
//! handling takes no locks and a new bundle can be swapped in atomically.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;

use crate::error::{Error, Result};
use crate::features::{ColumnLayout, FeatureEncoder, FeatureGroup};
use crate::logreg::{export_weight_table, fast_predict_unchecked, LogRegModel, WeightTable};

pub const WEIGHTS_FILE: &str = "weights.tsv";
pub const USER_CLUSTERS_FILE: &str = "user_clusters.tsv";
pub const URL_CLUSTERS_FILE: &str = "url_clusters.tsv";
pub const F1_VOCAB_FILE: &str = "f1_vocab.tsv";
pub const F2_VOCAB_FILE: &str = "f2_vocab.tsv";
pub const USER_HISTORY_FILE: &str = "user_history.tsv";

/// Everything needed to resolve a request to model columns. All columns are
/// absolute positions in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ServingBundle {
    pub weight_table: WeightTable,
    pub user_cluster: HashMap<String, u32>,
    pub url_cluster: HashMap<String, u32>,
    pub f1_vocab: HashMap<(String, String), u32>,
    pub f2_vocab: HashMap<String, u32>,
    pub user_history: HashMap<String, Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    pub probability: f64,
    /// Resolved columns plus the intercept.
    pub active: usize,
    pub elapsed_us: f64,
    pub deadline_met: bool,
}

impl ServingBundle {
    /// Bundle for `model`, trained on a matrix with `layout` whose groups are
    /// a subset of f1–f4 taken from `encoder`.
    pub fn build(model: &LogRegModel, layout: &ColumnLayout, encoder: &FeatureEncoder) -> Result<Self> {
        if layout.n_features != model.dimension() {
            return Err(Error::Dimension(format!(
                "layout has {} columns, model {}",
                layout.n_features,
                model.dimension()
            )));
        }
        let mut b = ServingBundle {
            weight_table: export_weight_table(model),
            user_cluster: HashMap::new(),
            url_cluster: HashMap::new(),
            f1_vocab: HashMap::new(),
            f2_vocab: HashMap::new(),
            user_history: HashMap::new(),
        };
        let irm_graph = || -> Result<_> {
            match (encoder.artifacts.graph, encoder.artifacts.irm) {
                (Some(g), Some(irm)) => Ok((g, irm)),
                _ => Err(Error::Config("cluster groups need the graph and IRM artifacts".into())),
            }
        };
        for r in &layout.groups {
            let base = r.columns.start as u32;
            match r.group {
                FeatureGroup::F1 => {
                    for (k, key) in encoder.vocab.f1.keys().iter().enumerate() {
                        b.f1_vocab.insert(key.clone(), base + k as u32);
                    }
                }
                FeatureGroup::F2 => {
                    for (k, url) in encoder.vocab.f2.keys().iter().enumerate() {
                        b.f2_vocab.insert(url.clone(), base + k as u32);
                    }
                    for (user, urls) in encoder.history.iter() {
                        let cols: Vec<u32> = urls.iter().filter_map(|u| b.f2_vocab.get(u).copied()).collect();
                        b.user_history.insert(user.to_owned(), cols);
                    }
                }
                FeatureGroup::F3 => {
                    let (g, irm) = irm_graph()?;
                    for (m, id) in g.users().ids().iter().enumerate() {
                        b.user_cluster.insert(id.clone(), base + irm.user[m] as u32);
                    }
                }
                FeatureGroup::F4 => {
                    let (g, irm) = irm_graph()?;
                    for (n, id) in g.urls().ids().iter().enumerate() {
                        b.url_cluster.insert(id.clone(), base + irm.url[n] as u32);
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "group {other} is not binary and cannot be served"
                    )))
                }
            }
        }
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let dim = self.weight_table.dimension;
        let columns = self
            .user_cluster
            .values()
            .chain(self.url_cluster.values())
            .chain(self.f1_vocab.values())
            .chain(self.f2_vocab.values())
            .chain(self.user_history.values().flatten());
        for &c in columns {
            if c as usize >= dim {
                return Err(Error::Dimension(format!("column {c} outside model dimension {dim}")));
            }
        }
        Ok(())
    }

    /// Active model columns for a request, in group order.
    pub fn active_columns(&self, user: &str, banner: &str, url: &str, out: &mut Vec<u32>) {
        out.clear();
        if !self.f1_vocab.is_empty() {
            // the key is owned, so only build it when f1 is served
            if let Some(&c) = self.f1_vocab.get(&(banner.to_owned(), url.to_owned())) {
                out.push(c);
            }
        }
        if let Some(h) = self.user_history.get(user) {
            out.extend_from_slice(h);
        }
        if let Some(&c) = self.user_cluster.get(user) {
            out.push(c);
        }
        if let Some(&c) = self.url_cluster.get(url) {
            out.push(c);
        }
    }

    pub fn handle_request(&self, user: &str, banner: &str, url: &str, deadline_us: u64) -> Response {
        let start = Instant::now();
        let mut cols = Vec::with_capacity(8);
        self.active_columns(user, banner, url, &mut cols);
        let probability = fast_predict_unchecked(&self.weight_table, &cols);
        let elapsed = start.elapsed();
        Response {
            probability,
            active: cols.len() + 1,
            elapsed_us: elapsed.as_secs_f64() * 1e6,
            deadline_met: deadline_us > 0 && elapsed <= Duration::from_micros(deadline_us),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        self.weight_table.save(&dir.join(WEIGHTS_FILE))?;
        let sorted = |m: &HashMap<String, u32>| {
            let mut v: Vec<(String, u32)> = m.iter().map(|(k, c)| (k.clone(), *c)).collect();
            v.sort();
            v
        };
        write_lines(
            &dir.join(USER_CLUSTERS_FILE),
            sorted(&self.user_cluster).iter().map(|(k, c)| format!("{k}\t{c}")),
        )?;
        write_lines(
            &dir.join(URL_CLUSTERS_FILE),
            sorted(&self.url_cluster).iter().map(|(k, c)| format!("{k}\t{c}")),
        )?;
        write_lines(
            &dir.join(F2_VOCAB_FILE),
            sorted(&self.f2_vocab).iter().map(|(k, c)| format!("{k}\t{c}")),
        )?;
        let mut f1: Vec<_> = self.f1_vocab.iter().collect();
        f1.sort();
        write_lines(
            &dir.join(F1_VOCAB_FILE),
            f1.iter().map(|((b, u), c)| format!("{b}\t{u}\t{c}")),
        )?;
        let mut hist: Vec<_> = self.user_history.iter().collect();
        hist.sort();
        write_lines(
            &dir.join(USER_HISTORY_FILE),
            hist.iter().map(|(u, cols)| {
                let cols: Vec<String> = cols.iter().map(|c| c.to_string()).collect();
                format!("{u}\t{}", cols.join(","))
            }),
        )?;
        Ok(())
    }
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_fields(path: &Path, n: usize) -> Result<Vec<Vec<String>>> {
    let f = File::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::load(path, e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_owned).collect();
        if fields.len() != n {
            return Err(Error::load(path, format!("line {}: expected {n} fields", i + 1)));
        }
        out.push(fields);
    }
    Ok(out)
}

fn parse_col(path: &Path, s: &str) -> Result<u32> {
    s.parse().map_err(|_| Error::load(path, format!("bad column {s:?}")))
}

/// Loads a bundle directory; returns the bundle and the load time.
pub fn load_bundle(dir: &Path) -> Result<(ServingBundle, Duration)> {
    let start = Instant::now();
    let weight_table = WeightTable::load(&dir.join(WEIGHTS_FILE))?;
    let map = |name: &str| -> Result<HashMap<String, u32>> {
        let path = dir.join(name);
        read_fields(&path, 2)?
            .into_iter()
            .map(|f| Ok((f[0].clone(), parse_col(&path, &f[1])?)))
            .collect()
    };
    let user_cluster = map(USER_CLUSTERS_FILE)?;
    let url_cluster = map(URL_CLUSTERS_FILE)?;
    let f2_vocab = map(F2_VOCAB_FILE)?;
    let path = dir.join(F1_VOCAB_FILE);
    let f1_vocab = read_fields(&path, 3)?
        .into_iter()
        .map(|f| Ok(((f[0].clone(), f[1].clone()), parse_col(&path, &f[2])?)))
        .collect::<Result<_>>()?;
    let path = dir.join(USER_HISTORY_FILE);
    let user_history = read_fields(&path, 2)?
        .into_iter()
        .map(|f| {
            let cols = f[1]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| parse_col(&path, s))
                .collect::<Result<_>>()?;
            Ok((f[0].clone(), cols))
        })
        .collect::<Result<_>>()?;
    let b = ServingBundle {
        weight_table,
        user_cluster,
        url_cluster,
        f1_vocab,
        f2_vocab,
        user_history,
    };
    b.validate().map_err(|e| Error::load(dir, e.to_string()))?;
    Ok((b, start.elapsed()))
}

/// Handling-time histogram with power-of-two nanosecond buckets.
#[derive(Debug)]
pub struct LatencyHistogram {
    counts: Vec<AtomicU64>,
}

const FIRST_BUCKET_NS: u64 = 128;
const BUCKETS: usize = 21;

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            counts: (0..=BUCKETS).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl LatencyHistogram {
    /// Upper bound of bucket `i` in microseconds; the last is unbounded.
    pub fn bucket_upper_us(i: usize) -> f64 {
        if i >= BUCKETS {
            f64::INFINITY
        } else {
            (FIRST_BUCKET_NS << i) as f64 / 1000.0
        }
    }

    pub fn record(&self, d: Duration) {
        let ns = d.as_nanos().min(u64::MAX as u128) as u64;
        let i = (0..BUCKETS).find(|&i| ns <= FIRST_BUCKET_NS << i).unwrap_or(BUCKETS);
        self.counts[i].fetch_add(1, Ordering::Relaxed);
    }

    pub fn counts(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts().iter().sum()
    }

    /// Upper bound (µs) of the bucket containing quantile `q`.
    pub fn quantile_upper_us(&self, q: f64) -> Option<f64> {
        let counts = self.counts();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return None;
        }
        let target = (q * total as f64).ceil().max(1.0) as u64;
        let mut acc = 0;
        counts.iter().enumerate().find_map(|(i, &c)| {
            acc += c;
            (acc >= target).then(|| Self::bucket_upper_us(i))
        })
    }

    /// `bucket_upper_us \t count` lines.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bucket_upper_us\tcount")?;
        for (i, c) in self.counts().iter().enumerate() {
            writeln!(w, "{}\t{c}", Self::bucket_upper_us(i))?;
        }
        Ok(())
    }
}

fn respond(line: &str, bundle: &ServingBundle, hist: &LatencyHistogram) -> String {
    let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
    let [user, banner, url, deadline] = fields.as_slice() else {
        return format!("ERR expected 4 tab-separated fields, got {}", fields.len());
    };
    let Ok(deadline) = deadline.trim().parse::<u64>() else {
        return format!("ERR bad deadline {deadline:?}");
    };
    let r = bundle.handle_request(user, banner, url, deadline);
    hist.record(Duration::from_secs_f64(r.elapsed_us / 1e6));
    format!(
        "{}\t{}\t{:.3}\t{}",
        r.probability, r.active, r.elapsed_us, r.deadline_met
    )
}

/// A running server; dropping it without [`BidServer::shutdown`] leaves the
/// threads running until the process exits.
pub struct BidServer {
    addr: SocketAddr,
    bundle: Arc<ArcSwap<ServingBundle>>,
    histogram: Arc<LatencyHistogram>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

const POLL: Duration = Duration::from_millis(20);

fn serve_connection(
    stream: TcpStream,
    bundle: Arc<ArcSwap<ServingBundle>>,
    hist: Arc<LatencyHistogram>,
    stop: Arc<AtomicBool>,
) {
    let _ = stream.set_nodelay(true);
    if stream.set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let Ok(write_half) = stream.try_clone() else { return };
    let mut out = BufWriter::new(write_half);
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    while !stop.load(Ordering::Relaxed) {
        match reader.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {
                if !line.ends_with('\n') {
                    // partial line before a timeout; keep reading
                    continue;
                }
                let reply = respond(line.trim_end_matches('\n'), &bundle.load(), &hist);
                line.clear();
                if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
                    return;
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(_) => return,
        }
    }
}

impl BidServer {
    /// Binds `addr` (e.g. `127.0.0.1:0`) and starts accepting connections.
    pub fn start(addr: &str, bundle: ServingBundle) -> Result<BidServer> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Config(format!("bind {addr}: {e}")))?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let bundle = Arc::new(ArcSwap::from_pointee(bundle));
        let histogram = Arc::new(LatencyHistogram::default());
        let stop = Arc::new(AtomicBool::new(false));
        let workers = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let (bundle, histogram, stop, workers) = (bundle.clone(), histogram.clone(), stop.clone(), workers.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            if stream.set_nonblocking(false).is_err() {
                                continue;
                            }
                            let (b, h, s) = (bundle.clone(), histogram.clone(), stop.clone());
                            let handle = std::thread::spawn(move || serve_connection(stream, b, h, s));
                            let mut w = workers.lock().expect("worker list");
                            w.retain(|h: &JoinHandle<()>| !h.is_finished());
                            w.push(handle);
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                        Err(e) => log::warn!("accept failed: {e}"),
                    }
                }
            })
        };
        Ok(BidServer {
            addr: local,
            bundle,
            histogram,
            stop,
            acceptor: Some(acceptor),
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Replaces the bundle; in-flight requests finish on the old one.
    pub fn swap_bundle(&self, bundle: ServingBundle) {
        self.bundle.store(Arc::new(bundle));
    }

    pub fn histogram(&self) -> &LatencyHistogram {
        &self.histogram
    }

    /// Stops accepting, lets open connections finish their current request,
    /// joins all threads and returns the latency histogram.
    pub fn shutdown(mut self) -> Arc<LatencyHistogram> {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        let workers = std::mem::take(&mut *self.workers.lock().expect("worker list"));
        for w in workers {
            let _ = w.join();
        }
        self.histogram.clone()
    }
}
