//! One function per subcommand. Each reads the artifacts of earlier stages
//! from the workdir, writes its own, and returns a manifest for the caller
//! to time and write.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use cograph::bidserver::{load_bundle, BidServer, ServingBundle};
use cograph::eval::{
    lift, normalized_ll, tune_lambda, write_reports_jsonl, write_reports_tsv, EvalReport, TestSetScorer, TuningProtocol,
};
use cograph::features::{per_feature_lambda, Artifacts, DesignMatrix, FeatureEncoder, FeatureGroup, FeatureSpec};
use cograph::graph::{build_bipartite, filter_graph, BipartiteGraph};
use cograph::ingest::{
    generate_synthetic, label_observations, last_day, parse_transactions, read_observations, split_by_day,
    write_observations, write_planted, write_transactions, Event, LabeledObservation, Transaction,
};
use cograph::irm::{irm_run, load_assignments, ClusterAssignments};
use cograph::logreg::{predict_all, train, LogRegModel};
use cograph::nmf::{nmf_factorize, NmfFactors};
use cograph::svd::{truncated_svd, SvdFactors};
use log::{info, warn};

use crate::config::{PipelineConfig, Reducer};
use crate::error::{CliError, CliResult};
use crate::manifest::{require, Manifest};

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let f = File::create(path).map_err(|e| cograph::Error::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    let f = File::open(path).map_err(|e| cograph::Error::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufReader::new(f))
}

fn write_with<F>(path: &Path, f: F) -> CliResult<()>
where
    F: FnOnce(&mut BufWriter<File>) -> cograph::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_log(path: &Path) -> CliResult<Vec<Transaction>> {
    let parsed = parse_transactions(open(path)?)?;
    if parsed.malformed > 0 {
        warn!("{}: skipped {} malformed lines", path.display(), parsed.malformed);
    }
    Ok(parsed.transactions)
}

fn ctr(obs: &[LabeledObservation]) -> f64 {
    if obs.is_empty() {
        return 0.0;
    }
    obs.iter().map(|o| o.label as f64).sum::<f64>() / obs.len() as f64
}

pub fn synth(cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut m = Manifest::new("synth", cfg);
    let (log, planted) = generate_synthetic(&cfg.synthetic)?;
    write_with(&cfg.log, |w| write_transactions(w, &log))?;
    let planted_path = cfg.stage_dir("synth").join("planted.tsv");
    write_with(&planted_path, |w| write_planted(w, &planted))?;
    m.output(cfg, &cfg.log);
    m.output(cfg, &planted_path);
    let clicks = log.iter().filter(|t| t.event == Event::Click).count();
    m.metric("transactions", log.len());
    m.metric("clicks", clicks);
    m.metric("test_day", cfg.synthetic.test_day().to_string());
    info!("wrote {} transactions to {}", log.len(), cfg.log.display());
    Ok(m)
}

struct IngestPaths {
    train_log: PathBuf,
    test_log: PathBuf,
    train_obs: PathBuf,
    test_obs: PathBuf,
}

fn ingest_paths(cfg: &PipelineConfig) -> IngestPaths {
    let d = cfg.stage_dir("ingest");
    IngestPaths {
        train_log: d.join("train_log.tsv"),
        test_log: d.join("test_log.tsv"),
        train_obs: d.join("train_obs.tsv"),
        test_obs: d.join("test_obs.tsv"),
    }
}

pub fn ingest(cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut m = Manifest::new("ingest", cfg);
    if !cfg.log.is_file() {
        return Err(CliError::Config(format!(
            "transaction log {} not found",
            cfg.log.display()
        )));
    }
    m.input(cfg, &cfg.log);
    let log = read_log(&cfg.log)?;
    let test_day = match cfg.test_day {
        Some(d) => d,
        None => last_day(&log)?.ok_or_else(|| cograph::Error::Validation("the log is empty".into()))?,
    };
    let n = log.len();
    let split = split_by_day(log, test_day)?;
    let train_obs = label_observations(&split.train)?;
    let test_obs = label_observations(&split.test)?;
    if train_obs.is_empty() || test_obs.is_empty() {
        return Err(cograph::Error::Validation(format!(
            "test day {test_day} leaves {} training and {} test impressions",
            train_obs.len(),
            test_obs.len()
        ))
        .into());
    }
    let p = ingest_paths(cfg);
    write_with(&p.train_log, |w| write_transactions(w, &split.train))?;
    write_with(&p.test_log, |w| write_transactions(w, &split.test))?;
    write_with(&p.train_obs, |w| write_observations(w, &train_obs))?;
    write_with(&p.test_obs, |w| write_observations(w, &test_obs))?;
    for path in [&p.train_log, &p.test_log, &p.train_obs, &p.test_obs] {
        m.output(cfg, path);
    }
    m.metric("transactions", n);
    m.metric("test_day", test_day.to_string());
    m.metric("train_impressions", train_obs.len());
    m.metric("test_impressions", test_obs.len());
    m.metric("train_ctr", ctr(&train_obs));
    m.metric("test_ctr", ctr(&test_obs));
    Ok(m)
}

pub fn graph(cfg: &PipelineConfig) -> CliResult<Manifest> {
    require("ingest", &cfg.stage_dir("ingest"))?;
    let mut m = Manifest::new("graph", cfg);
    let p = ingest_paths(cfg);
    m.input(cfg, &p.train_log);
    let full = build_bipartite(&read_log(&p.train_log)?)?;
    let filtered = filter_graph(&full, cfg.top_users, cfg.min_unique_users)?;
    let g = &filtered.graph;
    let dir = cfg.stage_dir("graph");
    g.save(&dir)?;
    m.output(cfg, &dir.join("graph.txt"));
    m.metric("users_before_filter", full.n_users());
    m.metric("urls_before_filter", full.n_urls());
    m.metric("users", g.n_users());
    m.metric("urls", g.n_urls());
    m.metric("edges", g.n_edges());
    info!(
        "graph: {} users, {} urls, {} edges",
        g.n_users(),
        g.n_urls(),
        g.n_edges()
    );
    Ok(m)
}

fn load_graph(cfg: &PipelineConfig) -> CliResult<BipartiteGraph> {
    let dir = cfg.stage_dir("graph");
    require("graph", &dir)?;
    Ok(BipartiteGraph::load(&dir)?)
}

fn reducer_dir(cfg: &PipelineConfig, r: Reducer) -> PathBuf {
    cfg.stage_dir("reduce").join(r.name())
}

/// Runs every configured reducer; each gets its own directory and manifest.
pub fn reduce(cfg: &PipelineConfig) -> CliResult<Vec<(PathBuf, Manifest)>> {
    if cfg.reducers.is_empty() {
        return Err(CliError::Config("reducer: no reducer selected".into()));
    }
    let g = load_graph(cfg)?;
    let mut out = Vec::new();
    for &r in &cfg.reducers {
        let mut m = Manifest::new(&format!("reduce.{}", r.name()), cfg);
        m.input(cfg, &cfg.stage_dir("graph").join("graph.txt"));
        let dir = reducer_dir(cfg, r);
        let start = Instant::now();
        match r {
            Reducer::Irm => {
                let res = irm_run(&g, cfg.irm, cfg.irm_sweeps, cfg.seed)?;
                m.metric("fit_seconds", start.elapsed().as_secs_f64());
                res.save(&dir)?;
                m.metric("k1_used", res.k1_used);
                m.metric("k2_used", res.k2_used);
                m.metric("best_sweep", res.best_sweep);
                m.metric(
                    "best_log_posterior",
                    res.log_posterior_trace
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max),
                );
                m.metric(
                    "top_stick_occupancy",
                    vec![res.top_stick_occupancy.0, res.top_stick_occupancy.1],
                );
                info!("irm: {} user and {} url clusters", res.k1_used, res.k2_used);
            }
            Reducer::Svd => {
                let f = truncated_svd(&g, cfg.svd_k, cfg.svd_max_iter, cfg.svd_tol, cfg.seed)?;
                m.metric("fit_seconds", start.elapsed().as_secs_f64());
                f.save(&dir)?;
                m.metric("k", cfg.svd_k);
                m.metric("singular_values", f.s.clone());
                m.metric("converged", f.converged);
            }
            Reducer::Nmf => {
                let f = nmf_factorize(&g, cfg.nmf_k, cfg.nmf_max_iter, cfg.nmf_tol, cfg.seed)?;
                m.metric("fit_seconds", start.elapsed().as_secs_f64());
                f.save(&dir)?;
                m.metric("k", cfg.nmf_k);
                m.metric("residual_fro", f.residual_fro);
                m.metric("iterations", f.objective_trace.len());
            }
        }
        m.output(cfg, &dir);
        out.push((dir, m));
    }
    Ok(out)
}

/// Everything the encoder indexes, loaded from the workdir.
struct EncoderInputs {
    train_obs: Vec<LabeledObservation>,
    graph: BipartiteGraph,
    irm: Option<ClusterAssignments>,
    svd: Option<SvdFactors>,
    nmf: Option<NmfFactors>,
}

impl EncoderInputs {
    fn load(cfg: &PipelineConfig, spec: &FeatureSpec, m: &mut Manifest) -> CliResult<Self> {
        require("ingest", &cfg.stage_dir("ingest"))?;
        let graph = load_graph(cfg)?;
        let needs = |r: Reducer| spec.groups().iter().any(|&g| Reducer::of_group(g) == Some(r));
        let mut dirs = Vec::new();
        for r in [Reducer::Irm, Reducer::Svd, Reducer::Nmf] {
            if needs(r) {
                let dir = reducer_dir(cfg, r);
                require("reduce", &dir)?;
                dirs.push((r, dir));
            }
        }
        let p = ingest_paths(cfg);
        m.input(cfg, &p.train_obs);
        m.input(cfg, &cfg.stage_dir("graph").join("graph.txt"));
        let mut inputs = EncoderInputs {
            train_obs: read_observations(open(&p.train_obs)?)?,
            graph,
            irm: None,
            svd: None,
            nmf: None,
        };
        for (r, dir) in dirs {
            m.input(cfg, &dir);
            match r {
                Reducer::Irm => inputs.irm = Some(load_assignments(&dir)?),
                Reducer::Svd => inputs.svd = Some(SvdFactors::load(&dir)?),
                Reducer::Nmf => inputs.nmf = Some(NmfFactors::load(&dir)?),
            }
        }
        Ok(inputs)
    }

    fn encoder(&self, spec: &FeatureSpec) -> CliResult<FeatureEncoder<'_>> {
        let artifacts = Artifacts {
            graph: Some(&self.graph),
            irm: self.irm.as_ref(),
            svd: self.svd.as_ref(),
            nmf: self.nmf.as_ref(),
        };
        Ok(FeatureEncoder::fit(&self.train_obs, artifacts, spec)?)
    }
}

fn matrix_paths(cfg: &PipelineConfig) -> (PathBuf, PathBuf) {
    let d = cfg.stage_dir("features");
    (d.join("train.mtx"), d.join("test.mtx"))
}

pub fn features(cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut m = Manifest::new("features", cfg);
    let inputs = EncoderInputs::load(cfg, &cfg.features, &mut m)?;
    let enc = inputs.encoder(&cfg.features)?;
    let p = ingest_paths(cfg);
    m.input(cfg, &p.test_obs);
    let test_obs = read_observations(open(&p.test_obs)?)?;
    let train_x = enc.design_matrix(&inputs.train_obs)?;
    let test_x = enc.design_matrix(&test_obs)?;
    let (train_path, test_path) = matrix_paths(cfg);
    std::fs::create_dir_all(cfg.stage_dir("features"))?;
    train_x.save(&train_path)?;
    test_x.save(&test_path)?;
    m.output(cfg, &train_path);
    m.output(cfg, &test_path);
    m.metric("columns", train_x.n_cols());
    m.metric("train_rows", train_x.n_rows());
    m.metric("test_rows", test_x.n_rows());
    m.metric("train_nnz", train_x.nnz());
    for r in &train_x.layout().groups {
        m.metric(&format!("dim_{}", r.group), r.dimensionality());
    }
    Ok(m)
}

fn load_matrices(cfg: &PipelineConfig, m: &mut Manifest) -> CliResult<(DesignMatrix, DesignMatrix)> {
    require("features", &cfg.stage_dir("features"))?;
    let (train_path, test_path) = matrix_paths(cfg);
    m.input(cfg, &train_path);
    m.input(cfg, &test_path);
    Ok((DesignMatrix::load(&train_path)?, DesignMatrix::load(&test_path)?))
}

fn groups_of(x: &DesignMatrix) -> Vec<FeatureGroup> {
    x.layout().groups.iter().map(|r| r.group).collect()
}

fn label(groups: &[FeatureGroup]) -> String {
    groups.iter().map(|g| g.name()).collect::<Vec<_>>().join(",")
}

fn reduction_label(groups: &[FeatureGroup]) -> Option<String> {
    let mut names: Vec<&str> = Vec::new();
    for r in groups.iter().filter_map(|&g| Reducer::of_group(g)) {
        if !names.contains(&r.name()) {
            names.push(r.name());
        }
    }
    (!names.is_empty()).then(|| names.join("+"))
}

fn model_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.stage_dir("train").join("model.txt")
}

/// Trains on the full feature matrix with the configured λs; also exports
/// a serving bundle when every group is binary (f1..f4).
pub fn train_stage(cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut m = Manifest::new("train", cfg);
    require("features", &cfg.stage_dir("features"))?;
    let (train_path, _) = matrix_paths(cfg);
    m.input(cfg, &train_path);
    let x = DesignMatrix::load(&train_path)?;
    let pen = per_feature_lambda(x.layout(), cfg.lambda_f1, cfg.lambda_f2, cfg.lambda_rest)?;
    let model = match train(&x, &pen, &cfg.train) {
        Ok(model) => model,
        Err(cograph::Error::Convergence { message, last }) => {
            warn!("{message}; keeping the last iterate");
            *last
        }
        Err(e) => return Err(e.into()),
    };
    let path = model_path(cfg);
    std::fs::create_dir_all(cfg.stage_dir("train"))?;
    model.save(&path)?;
    m.output(cfg, &path);
    m.metric("train_seconds", model.train_seconds);
    m.metric("objective", model.final_objective);
    m.metric("iterations", model.iterations);
    m.metric("converged", model.converged);
    m.metric("nnz", model.nnz_total);

    let groups = groups_of(&x);
    if groups.iter().all(|g| g.is_binary()) {
        let spec = FeatureSpec::new(groups, x.has_intercept())?;
        let inputs = EncoderInputs::load(cfg, &spec, &mut m)?;
        let enc = inputs.encoder(&spec)?;
        if enc.vocab.layout != *x.layout() {
            return Err(CliError::Config(
                "encoder inputs changed since `cograph features`; rerun it".into(),
            ));
        }
        let bundle = ServingBundle::build(&model, x.layout(), &enc)?;
        let dir = cfg.stage_dir("train").join("bundle");
        bundle.save(&dir)?;
        m.output(cfg, &dir);
        m.metric("bundle_weights", bundle.weight_table.len());
    } else {
        info!("dense groups present; no serving bundle written");
    }
    info!(
        "trained in {:.3}s, {} non-zero weights, converged: {}",
        model.train_seconds, model.nnz_total, model.converged
    );
    Ok(m)
}

fn write_reports(
    dir: &Path,
    stem: &str,
    reports: &[EvalReport],
    m: &mut Manifest,
    cfg: &PipelineConfig,
) -> CliResult<()> {
    let tsv = dir.join(format!("{stem}.tsv"));
    let jsonl = dir.join(format!("{stem}.jsonl"));
    write_with(&tsv, |w| write_reports_tsv(w, reports))?;
    write_with(&jsonl, |w| write_reports_jsonl(w, reports))?;
    m.output(cfg, &tsv);
    m.output(cfg, &jsonl);
    Ok(())
}

/// Scores the trained model on the test matrix. Lift is relative to the
/// constant-CTR baseline, whose normalized likelihood is 1.
pub fn eval(cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut m = Manifest::new("eval", cfg);
    require("train", &cfg.stage_dir("train"))?;
    require("features", &cfg.stage_dir("features"))?;
    let (_, test_path) = matrix_paths(cfg);
    let path = model_path(cfg);
    m.input(cfg, &path);
    m.input(cfg, &test_path);
    let model = LogRegModel::load(&path)?;
    let x = DesignMatrix::load(&test_path)?;
    if model.dimension() != x.n_features() {
        return Err(cograph::Error::Dimension(format!(
            "model has {} columns, test matrix {}; rerun `cograph train`",
            model.dimension(),
            x.n_features()
        ))
        .into());
    }
    let ll = normalized_ll(&predict_all(&model, &x), x.labels())?;
    let groups = groups_of(&x);
    let has_f2 = groups.contains(&FeatureGroup::F2);
    let has_rest = groups.iter().any(|g| Reducer::of_group(*g).is_some());
    let report = EvalReport {
        model_label: label(&groups),
        reduction: reduction_label(&groups),
        stage: 0,
        lambda_f1: cfg.lambda_f1,
        lambda_f2: has_f2.then_some(cfg.lambda_f2),
        lambda_rest: has_rest.then_some(cfg.lambda_rest),
        train_seconds: model.train_seconds,
        nnz_all: model.nnz_total,
        nnz_f2: if has_f2 { model.nnz(FeatureGroup::F2) } else { None },
        ll_normalized: ll,
        lift_percent: lift(ll, 1.0)?,
        selected: true,
        converged: model.converged,
        baseline: "test_ctr",
    };
    write_reports(
        &cfg.stage_dir("eval"),
        "report",
        std::slice::from_ref(&report),
        &mut m,
        cfg,
    )?;
    m.metric("ll_normalized", ll);
    m.metric("lift_over_baseline_percent", report.lift_percent);
    println!(
        "{}\tLL·100 {:.2}\tlift over baseline {:.2}%",
        report.model_label,
        100.0 * ll,
        report.lift_percent
    );
    Ok(m)
}

/// Three-stage λ selection over every reduction present in the feature
/// matrices. Selection uses the test set, as the reference experiments did.
pub fn tune(cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut m = Manifest::new("tune", cfg);
    let (train_x, test_x) = load_matrices(cfg, &mut m)?;
    let groups = groups_of(&train_x);
    if !groups.contains(&FeatureGroup::F1) {
        return Err(CliError::Config("tune needs f1 in `features`".into()));
    }
    let reductions = cfg
        .reducers
        .iter()
        .map(|r| r.reduction())
        .filter(|r| r.groups.iter().all(|g| groups.contains(g)))
        .collect();
    let protocol = TuningProtocol {
        grid_f1: cfg.grid_f1.clone(),
        grid_f2: cfg.grid_f2.clone(),
        grid_rest: cfg.grid_rest.clone(),
        reductions,
        with_f2: cfg.tune_with_f2 && groups.contains(&FeatureGroup::F2),
        train: cfg.train,
    };
    warn!("regularization is selected on the test set; reported likelihoods are optimistic");
    let result = tune_lambda(&train_x, &TestSetScorer::new(test_x), &protocol)?;
    let dir = cfg.stage_dir("tune");
    write_reports(&dir, "reports", &result.reports, &mut m, cfg)?;
    let sel_dir = dir.join("selected");
    std::fs::create_dir_all(&sel_dir)?;
    for s in &result.selected {
        let path = sel_dir.join(format!("{}.model", s.model_label.replace(',', "_")));
        s.model.save(&path)?;
        m.output(cfg, &path);
        m.metric(&format!("ll_normalized[{}]", s.model_label), s.ll_normalized);
        println!("{}\tLL·100 {:.2}", s.model_label, 100.0 * s.ll_normalized);
    }
    m.metric("reports", result.reports.len());
    Ok(m)
}

/// Serves until interrupted or until `serve.duration_s` elapses, then
/// writes the latency histogram.
pub fn serve(cfg: &PipelineConfig) -> CliResult<Manifest> {
    let mut m = Manifest::new("serve", cfg);
    if !cfg.bundle.is_dir() {
        return Err(CliError::Missing {
            stage: "train",
            path: cfg.bundle.clone(),
        });
    }
    m.input(cfg, &cfg.bundle);
    let (bundle, load_time) = load_bundle(&cfg.bundle)?;
    info!("bundle loaded in {:.3}s", load_time.as_secs_f64());
    let server = BidServer::start(&cfg.listen, bundle)?;
    println!("listening on {}", server.local_addr());
    std::io::stdout().flush()?;

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| CliError::Runtime(format!("cannot install interrupt handler: {e}")))?;
    if cfg.serve_duration_s > 0.0 {
        let _ = rx.recv_timeout(Duration::from_secs_f64(cfg.serve_duration_s));
    } else {
        let _ = rx.recv();
    }
    let hist = server.shutdown();
    let path = cfg.stage_dir("serve").join("latency.tsv");
    write_with(&path, |w| hist.write_tsv(w))?;
    m.output(cfg, &path);
    m.metric("requests", hist.total());
    m.metric("bundle_load_seconds", load_time.as_secs_f64());
    if let Some(p99) = hist.quantile_upper_us(0.99) {
        m.metric("p99_upper_us", p99);
    }
    info!("served {} requests", hist.total());
    Ok(m)
}
