//! Artifacts written to disk and read back give the same features, the same
//! predictions and the same served probabilities.

use cograph::bidserver::{load_bundle, ServingBundle};
use cograph::experiment::{prepare, ExperimentConfig};
use cograph::features::{Artifacts, FeatureEncoder, FeatureGroup, FeatureSpec};
use cograph::ingest::SyntheticConfig;
use cograph::irm::{load_assignments, IrmHyperParams};
use cograph::logreg::{predict_all, predict_proba, train, TrainOptions};
use cograph::nmf::NmfFactors;
use cograph::svd::SvdFactors;
use cograph::{BipartiteGraph, DesignMatrix, LogRegModel};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        synthetic: SyntheticConfig {
            n_users: 300,
            n_urls: 60,
            n_impressions: 5000,
            seed: 4,
            ..Default::default()
        },
        irm: Some((IrmHyperParams::with_truncation(6), 15)),
        svd: Some(3),
        nmf: Some(3),
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn reloaded_artifacts_encode_identically() {
    let p = prepare(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    p.graph.graph.save(&d.join("graph")).unwrap();
    p.irm.as_ref().unwrap().save(&d.join("irm")).unwrap();
    p.svd.as_ref().unwrap().save(&d.join("svd")).unwrap();
    p.nmf.as_ref().unwrap().save(&d.join("nmf")).unwrap();

    let g = BipartiteGraph::load(&d.join("graph")).unwrap();
    let irm = load_assignments(&d.join("irm")).unwrap();
    let svd = SvdFactors::load(&d.join("svd")).unwrap();
    let nmf = NmfFactors::load(&d.join("nmf")).unwrap();
    assert_eq!(&irm, p.clusters.as_ref().unwrap());

    let spec = p.full_spec().unwrap();
    let reloaded = Artifacts {
        graph: Some(&g),
        irm: Some(&irm),
        svd: Some(&svd),
        nmf: Some(&nmf),
    };
    let a = p.encoder().unwrap().design_matrix(&p.test_obs).unwrap();
    let b = FeatureEncoder::fit(&p.train_obs, reloaded, &spec)
        .unwrap()
        .design_matrix(&p.test_obs)
        .unwrap();
    assert_eq!(a, b);

    let path = d.join("test.mtx");
    a.save(&path).unwrap();
    assert_eq!(DesignMatrix::load(&path).unwrap(), a);
}

#[test]
fn model_and_bundle_round_trip() {
    use FeatureGroup::*;
    let p = prepare(&small()).unwrap();
    let spec = FeatureSpec::new(vec![F1, F2, F3, F4], true).unwrap();
    let enc = FeatureEncoder::fit(&p.train_obs, p.artifacts(), &spec).unwrap();
    let train_x = enc.design_matrix(&p.train_obs).unwrap();
    let test_x = enc.design_matrix(&p.test_obs).unwrap();
    let pen = cograph::features::per_feature_lambda(train_x.layout(), 0.5, 1.0, 0.5).unwrap();
    let model = train(&train_x, &pen, &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("model.txt");
    model.save(&mpath).unwrap();
    let loaded = LogRegModel::load(&mpath).unwrap();
    assert_eq!(predict_all(&model, &test_x), predict_all(&loaded, &test_x));

    let bundle = ServingBundle::build(&model, train_x.layout(), &enc).unwrap();
    bundle.save(&dir.path().join("bundle")).unwrap();
    let (served, _) = load_bundle(&dir.path().join("bundle")).unwrap();
    assert_eq!(served, bundle);
    let mut worst: f64 = 0.0;
    for (i, o) in p.test_obs.iter().enumerate() {
        let r = served.handle_request(&o.user_id, &o.banner_id, &o.url, 1_000_000);
        let row = test_x.sparse_row(i);
        worst = worst.max((r.probability - predict_proba(&model, &row)).abs());
        assert_eq!(r.active, row.nnz() + 1);
    }
    assert!(worst <= 1e-12, "served vs offline {worst:e}");
}
