mod common;

use dynconv::config::CriterionName;
use dynconv::metrics::write_metrics;
use dynconv::train::train;

fn metrics_csv(cfg: &dynconv::config::Config) -> Vec<u8> {
    let out = train(cfg, |_| {}).unwrap();
    let mut buf = Vec::new();
    write_metrics(&mut buf, &out.metrics, cfg.model.spec().gated_blocks(), true).unwrap();
    buf
}

#[test]
fn seeded_runs_are_identical() {
    let cfg = common::tiny_config();
    let a = metrics_csv(&cfg);
    assert_eq!(a, metrics_csv(&cfg));
    let mut other = cfg.clone();
    other.train.seed = 1;
    assert_ne!(a, metrics_csv(&other));
}

#[test]
fn metrics_header_and_rows() {
    let cfg = common::tiny_config();
    let text = String::from_utf8(metrics_csv(&cfg)).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    for col in ["epoch", "task_loss", "sp_net", "sp_low", "sp_up", "fraction_0", "fraction_1", "p"] {
        assert!(header.split(',').any(|c| c == col), "missing {col} in {header}");
    }
    assert!(!header.contains("seconds"));
    assert_eq!(lines.count(), cfg.train.epochs);
}

#[test]
fn noise_turns_off_for_the_last_fifth() {
    let mut cfg = common::tiny_config();
    cfg.train.epochs = 10;
    let out = train(&cfg, |_| {}).unwrap();
    let noise: Vec<bool> = out.metrics.iter().map(|m| m.noise).collect();
    assert_eq!(noise, [true, true, true, true, true, true, true, true, false, false]);
    assert_eq!(out.metrics[0].p, 1.0);
    assert_eq!(out.metrics[9].p, 0.0);
}

#[test]
fn full_budget_keeps_blocks_executed() {
    for criterion in [CriterionName::Net, CriterionName::NetBounds, CriterionName::PerLayer] {
        let mut cfg = common::tiny_config();
        cfg.train.theta = 1.0;
        cfg.train.criterion = criterion;
        cfg.train.epochs = 5;
        let out = train(&cfg, |_| {}).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(last.val_net_fraction >= 0.95, "{criterion:?}: {}", last.val_net_fraction);
    }
}

#[test]
fn ungated_model_trains() {
    let mut cfg = common::tiny_config();
    for b in &mut cfg.model.blocks {
        b.gated = false;
    }
    let out = train(&cfg, |_| {}).unwrap();
    let last = out.metrics.last().unwrap();
    assert_eq!(last.val_net_fraction, 1.0);
    assert!(last.fractions.is_empty());
}

#[test]
fn temperature_follows_schedule() {
    let mut cfg = common::tiny_config();
    cfg.train.epochs = 4;
    cfg.train.temperature_anneal = Some(dynconv::config::TemperatureAnneal {
        start: 4.0,
        start_epoch: 0,
        end_epoch: 3,
    });
    let out = train(&cfg, |_| {}).unwrap();
    let taus: Vec<f32> = out.metrics.iter().map(|m| m.temperature).collect();
    assert_eq!(taus, [4.0, 3.0, 2.0, 1.0]);
}
