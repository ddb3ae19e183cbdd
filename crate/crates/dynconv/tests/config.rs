mod common;

use dynconv::config::{Config, CriterionName, TemperatureAnneal};

#[test]
fn default_round_trips() {
    let cfg = Config::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(Config::from_toml(&text).unwrap(), cfg);
}

#[test]
fn tiny_round_trips_with_gate_bias() {
    let mut cfg = common::tiny_config();
    cfg.train.gate_bias_init = Some(-2.5);
    cfg.train.criterion = CriterionName::PerLayer;
    let back = Config::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn unknown_keys_rejected() {
    let text = Config::default().to_toml().unwrap();
    let bad = text.replacen("[train]", "[train]\nlearning_rate = 0.1", 1);
    assert!(Config::from_toml(&bad).is_err());
    let bad = format!("colour = \"red\"\n{text}");
    assert!(Config::from_toml(&bad).is_err());
}

#[test]
fn criterion_names() {
    let text = Config::default().to_toml().unwrap();
    for (name, want) in [
        ("net", CriterionName::Net),
        ("per_layer", CriterionName::PerLayer),
        ("net_bounds", CriterionName::NetBounds),
    ] {
        let t = text.replace("criterion = \"net_bounds\"", &format!("criterion = \"{name}\""));
        assert_eq!(Config::from_toml(&t).unwrap().train.criterion, want);
    }
}

#[test]
fn invalid_values_rejected() {
    let mut cfg = Config::default();
    cfg.train.theta = 0.0;
    assert!(Config::from_toml(&cfg.to_toml().unwrap()).is_err());
    let mut cfg = Config::default();
    cfg.train.theta = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = Config::default();
    cfg.model.blocks[1].out_channels = 8;
    assert!(cfg.validate().is_err());
    let mut cfg = Config::default();
    cfg.train.alpha = -1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn temperature_anneal_round_trips() {
    let mut cfg = Config::default();
    cfg.train.temperature_anneal = Some(TemperatureAnneal {
        start: 5.0,
        start_epoch: 0,
        end_epoch: 10,
    });
    let text = cfg.to_toml().unwrap();
    assert!(text.contains("temperature_anneal"));
    let back = Config::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    let s = back.temperature();
    assert_eq!((s.at(0), s.at(5), s.at(10), s.at(40)), (5.0, 3.0, 1.0, 1.0));
    cfg.train.temperature_anneal.as_mut().unwrap().start = 0.0;
    assert!(cfg.validate().is_err());
}
