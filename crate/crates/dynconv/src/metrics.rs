//! CSV output of training and benchmark logs.

use std::io::Write;

use anyhow::Result;

use crate::bench::BenchRow;
use crate::train::EpochMetrics;

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// `metrics.csv`. With `deterministic` the wall-clock column is left out so
/// that seeded runs produce identical files.
pub fn write_metrics<W: Write>(out: W, rows: &[EpochMetrics], blocks: usize, deterministic: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["epoch", "task_loss", "sp_net", "sp_low", "sp_up", "total_loss", "p", "lr", "noise", "temperature", "net_fraction"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..blocks).map(|b| format!("fraction_{b}")));
    header.extend((0..blocks).map(|b| format!("end_fraction_{b}")));
    header.extend(["val_accuracy".to_string(), "val_net_fraction".to_string()]);
    header.extend((0..blocks).map(|b| format!("val_fraction_{b}")));
    if !deterministic {
        header.push("seconds".into());
    }
    w.write_record(&header)?;
    for m in rows {
        let mut rec = vec![
            m.epoch.to_string(),
            fmt(m.task_loss),
            fmt(m.sp_net),
            fmt(m.sp_low),
            fmt(m.sp_up),
            fmt(m.total_loss),
            fmt(m.p),
            format!("{:e}", m.lr),
            (m.noise as u8).to_string(),
            fmt(m.temperature as f64),
            fmt(m.net_fraction),
        ];
        rec.extend(m.fractions.iter().map(|&f| fmt(f)));
        rec.extend(m.end_fractions.iter().map(|&f| fmt(f)));
        rec.extend([fmt(m.val_accuracy), fmt(m.val_net_fraction)]);
        rec.extend(m.val_fractions.iter().map(|&f| fmt(f)));
        if !deterministic {
            rec.push(format!("{:.3}", m.seconds));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `bench.csv`. With `deterministic` only the mask and MAC columns are kept.
pub fn write_bench<W: Write>(out: W, rows: &[BenchRow], deterministic: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["density", "active_fraction", "dense_macs", "sparse_macs", "formula_macs"];
    if !deterministic {
        header.extend([
            "dense_ms",
            "sparse_ms",
            "mask_ms",
            "bookkeeping_ms",
            "gather_ms",
            "residual_ms",
            "scatter_ms",
            "dense_images_per_s",
            "sparse_images_per_s",
            "speedup",
            "overhead_fraction",
        ]);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            fmt(r.density),
            fmt(r.active_fraction),
            format!("{:.1}", r.dense_macs),
            format!("{:.1}", r.sparse_macs),
            format!("{:.1}", r.formula_macs),
        ];
        if !deterministic {
            rec.extend(
                [
                    r.dense_ms,
                    r.sparse_ms,
                    r.mask_ms,
                    r.bookkeeping_ms,
                    r.gather_ms,
                    r.residual_ms,
                    r.scatter_ms,
                    r.dense_ips,
                    r.sparse_ips,
                    r.speedup(),
                    r.overhead_fraction(),
                ]
                .map(|v| format!("{v:.4}")),
            );
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
