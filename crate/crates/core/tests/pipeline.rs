use std::fs;

use qpinn::network::{read_checkpoint, LayerKind, PreparedNetwork, Propagation};
use qpinn::pde::{self, HjbReferenceConfig, ProblemId};
use qpinn::smx::PrecisionPolicy;
use qpinn::trainer::{ablation_csv, run_ablation, train, AblationRow, TrainConfig};
use qpinn::tt::ContractionScheme;

fn small(id: ProblemId) -> TrainConfig {
    let mut c = TrainConfig::preset(id);
    c.network.width = 16;
    c.stein.samples = 16;
    c.loss.n_c = 16;
    c.loss.n_b = 16;
    c.iterations = 60;
    c.eval_every = 20;
    c.hjb_reference = HjbReferenceConfig { seed: 7, draws: 2000 };
    c
}

#[test]
fn record_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ProblemId::Poisson2d);
    let rec = train(&cfg, None, |_| {}).unwrap();
    rec.write(dir.path()).unwrap();

    let back: TrainConfig = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(back, cfg);
    let bytes = fs::read(dir.path().join("checkpoint.qpnn")).unwrap();
    let (net_cfg, params) = read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(params, rec.params);
    let eval = cfg.problem_def().eval_set(cfg.eval_seed, None).unwrap();
    let net = PreparedNetwork::new(&net_cfg, &params, None).unwrap();
    let m = pde::evaluate_metrics(&net, &eval).unwrap();
    assert_eq!(m.l2_rel, rec.final_metrics().l2_rel);
    assert_eq!(
        fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        pde::metrics_csv(&rec.metrics)
    );
}

#[test]
fn quantized_tt_training_reduces_loss() {
    let mut cfg = small(ProblemId::Poisson2d);
    cfg.network.layer_kind = LayerKind::Tt {
        rank: 4,
        factors: None,
        scheme: ContractionScheme::Prs,
    };
    cfg.precision = Some(PrecisionPolicy::default());
    cfg.iterations = 150;
    let rec = train(&cfg, None, |_| {}).unwrap();
    let first = rec.losses[..10].iter().sum::<f64>();
    let last = rec.losses[rec.losses.len() - 10..].iter().sum::<f64>();
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(rec.grad_check.is_none());
}

#[test]
fn heat_and_hjb_run_end_to_end() {
    let cache = tempfile::tempdir().unwrap();
    for id in [ProblemId::Heat100d, ProblemId::Hjb20d] {
        let rec = train(&small(id), Some(cache.path()), |_| {}).unwrap();
        let m = rec.final_metrics();
        assert!(m.l2_rel.is_finite() && m.l2_rel < rec.metrics[0].l2_rel, "{id:?}: {m:?}");
        assert!(rec.grad_check.as_ref().unwrap().passed);
    }
    // the HJB reference was cached and is reused verbatim
    let p = small(ProblemId::Hjb20d).problem_def();
    let a = p.eval_set(0, Some(cache.path())).unwrap();
    let b = p.eval_set(0, Some(cache.path())).unwrap();
    assert_eq!(a.reference, b.reference);
}

#[test]
fn ablation_table_lists_rows_in_order() {
    let mut base = small(ProblemId::Poisson2d);
    base.iterations = 5;
    base.eval_every = 5;
    let rows = [AblationRow::SeTtPrsDiffQuant, AblationRow::AdFpFr, AblationRow::SeNaiveQuant];
    let results = run_ablation(&base, &rows, 4, None, |_, _| {}).unwrap();
    let csv = ablation_csv(&base, &results);
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["AD-FP-FR", "SE-NaiveQuant", "SE-TT-PRS-DiffQuant"]);
    assert!(csv.lines().nth(1).unwrap().contains("not_run"));
    let naive = results[1].record.as_ref().unwrap();
    assert_eq!(naive.config.propagation, Propagation::NaiveQuant);
}
