use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dynconv::bench::bench_block;
use dynconv::checkpoint::Checkpoint;
use dynconv::config::{Config, CriterionName};
use dynconv::data::GlyphDataset;
use dynconv::metrics::{write_bench, write_metrics};
use dynconv::ponder::{ponder_csv, ponder_maps};
use dynconv::train::train;
use dynconv::verify::{verify_equivalence, VerifyMasks, VERIFY_TOLERANCE};
use dynconv_core::model::{MaskPolicy, Model};

#[derive(Parser)]
#[command(name = "dynconv", version, about = "Dynamic convolution networks: train, verify, bench, ponder")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum)]
    criterion: Option<CriterionArg>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Leave wall-clock columns out of CSV output.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum CriterionArg {
    Net,
    PerLayer,
    NetBounds,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Learned,
    Full,
    Empty,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the glyph task; writes metrics.csv, model.json and config.toml.
    Train,
    /// Compare sparse and dense execution; fails above the tolerance.
    Verify {
        /// Model checkpoint; a freshly initialised model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, default_value = "learned")]
        masks: MaskArg,
    },
    /// Time dense and sparse execution of one block; writes bench.csv.
    Bench,
    /// Write ponder-cost maps for glyph images.
    Ponder {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = c.seed {
        t.seed = v;
    }
    if let Some(v) = c.theta {
        t.theta = v;
    }
    if let Some(v) = c.alpha {
        t.alpha = v;
    }
    if let Some(v) = c.epochs {
        t.epochs = v;
    }
    if let Some(v) = c.criterion {
        t.criterion = match v {
            CriterionArg::Net => CriterionName::Net,
            CriterionArg::PerLayer => CriterionName::PerLayer,
            CriterionArg::NetBounds => CriterionName::NetBounds,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cfg: &Config, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => Checkpoint::load(p)?.to_model(),
        None => Ok(Model::init(cfg.model.spec(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Train => {
            let blocks = cfg.model.spec().gated_blocks();
            let outcome = train(&cfg, |m| {
                println!(
                    "epoch {:3}  task {:.4}  sp_net {:.4}  low {:.4}  up {:.4}  p {:.3}  fraction {:.3}  val_acc {:.3}  val_fraction {:.3}",
                    m.epoch, m.task_loss, m.sp_net, m.sp_low, m.sp_up, m.p, m.net_fraction, m.val_accuracy, m.val_net_fraction
                );
            })?;
            let f = fs::File::create(out.join("metrics.csv"))?;
            write_metrics(f, &outcome.metrics, blocks, cli.common.deterministic)?;
            Checkpoint::from_model(&cfg.model, &outcome.model).save(&out.join("model.json"))?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Verify {
            checkpoint,
            trials,
            masks,
        } => {
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let masks = match masks {
                MaskArg::Learned => VerifyMasks::Learned,
                MaskArg::Full => VerifyMasks::Full,
                MaskArg::Empty => VerifyMasks::Empty,
            };
            let r = verify_equivalence(&model, trials, cfg.train.seed, masks)?;
            for (i, e) in r.per_block.iter().enumerate() {
                println!("block {i}: max relative error {e:.3e}");
            }
            println!("end to end: max relative error {:.3e}", r.end_to_end);
            println!("mean gated density {:.3} over {} inputs", r.mean_density, r.trials);
            let ok = r.passed();
            println!("{} (tolerance {VERIFY_TOLERANCE:e})", if ok { "PASS" } else { "FAIL" });
            Ok(ok)
        }
        Command::Bench => {
            let rows = bench_block(&cfg.bench, cfg.train.seed)?;
            println!("bookkeeping = mask thresholding + dilation + index construction");
            for r in &rows {
                println!(
                    "density {:.3}: dense {:.3} ms, sparse {:.3} ms (mask {:.3}, bookkeeping {:.3}, gather {:.3}, residual {:.3}, scatter {:.3}), {:.1} vs {:.1} images/s, speedup {:.2}x",
                    r.density,
                    r.dense_ms,
                    r.sparse_ms,
                    r.mask_ms,
                    r.bookkeeping_ms,
                    r.gather_ms,
                    r.residual_ms,
                    r.scatter_ms,
                    r.dense_ips,
                    r.sparse_ips,
                    r.speedup()
                );
            }
            write_bench(fs::File::create(out.join("bench.csv"))?, &rows, cli.common.deterministic)?;
            Ok(true)
        }
        Command::Ponder { checkpoint, images } => {
            let model = load_model(&cfg, checkpoint.as_deref())?;
            let s = &model.spec;
            let data = GlyphDataset::generate(images, s.height, s.width, cfg.train.seed);
            let idx: Vec<usize> = (0..data.len()).collect();
            let (x, _) = data.batch(&idx);
            let maps = ponder_maps(&model.compile(), &x, MaskPolicy::Gate)?;
            for (i, m) in maps.iter().enumerate() {
                fs::write(out.join(format!("ponder_{i}.pgm")), m.to_pgm())?;
                let bbox = data.samples[i].bbox(2, s.height, s.width);
                println!("image {i}: {:.1}% of ponder mass near the glyph", 100.0 * m.mass_fraction_in(bbox));
            }
            fs::write(out.join("ponder.csv"), ponder_csv(&maps, 0))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
