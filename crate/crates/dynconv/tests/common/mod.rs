use dynconv::config::{BlockConfig, Config};

/// Small enough to train in a couple of seconds.
pub fn tiny_config() -> Config {
    let mut cfg = Config::default();
    cfg.model.stem_channels = 4;
    cfg.model.blocks = (0..2).map(|_| BlockConfig::inverted_residual(4, 12)).collect();
    let t = &mut cfg.train;
    t.epochs = 3;
    t.lr = 3e-3;
    t.batch_size = 16;
    t.train_size = 64;
    t.val_size = 32;
    let b = &mut cfg.bench;
    b.channels = 4;
    b.expansion_channels = 24;
    b.height = 8;
    b.width = 8;
    b.batch = 2;
    b.warmup = 1;
    b.repeats = 1;
    b.runs = 1;
    cfg
}
