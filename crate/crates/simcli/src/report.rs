//! Files written for a simulation run.
//!
//! `metrics.csv` and `weights.csv` depend only on the configuration and seed;
//! wall-clock measurements go to `timings.csv`.

use std::path::{Path, PathBuf};

use crate::experiments::{BenchReport, EquivalenceRow};
use crate::output::{f, gnuplot, header, Table};
use crate::sim::RunOutput;
use crate::SimResult;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";

pub fn metrics_table(out: &RunOutput) -> Table {
    let m = out.metrics.first().map(|r| r.param_error.len()).unwrap_or(0);
    let mut cols = vec!["round".to_string()];
    for prefix in ["test_loss", "test_acc", "param_error"] {
        cols.extend((0..m).map(|j| format!("{prefix}_{j}")));
    }
    cols.extend(header(&["fa", "ma", "asr", "air", "bytes_client", "bytes_server", "bytes_kdc", "skipped"]));
    let mut t = Table::new("metrics", 1, cols);
    for r in &out.metrics {
        let mut row = vec![r.round.to_string()];
        for v in [&r.test_loss, &r.test_acc, &r.param_error] {
            row.extend(v.iter().map(|&x| f(x)));
        }
        row.extend([f(r.fa), f(r.ma), f(r.asr), f(r.air)]);
        row.extend([r.bytes_client, r.bytes_server, r.bytes_kdc, r.skipped].map(|b| b.to_string()));
        t.push(row);
    }
    t
}

pub fn timings_table(out: &RunOutput) -> Table {
    let mut t = Table::new("timings", 1, header(&["round", "local_train", "keygen", "encode", "aggregate"]));
    for p in &out.times {
        t.push(vec![p.round.to_string(), f(p.local_train), f(p.keygen), f(p.encode), f(p.aggregate)]);
    }
    t
}

pub fn weights_table(out: &RunOutput) -> Table {
    let mut t = Table::new("weights", 1, header(&["round", "client", "cluster", "adversary", "weight"]));
    for (round, (w, c)) in out.weights.iter().zip(&out.clusters).enumerate() {
        for i in 0..w.len() {
            t.push(vec![round.to_string(), i.to_string(), c[i].to_string(), u8::from(out.adversary[i]).to_string(), f(w[i])]);
        }
    }
    t
}

/// Writes the three tables plus `metrics.gp` and returns the paths.
pub fn write_run(out: &RunOutput, dir: &Path) -> SimResult<Vec<PathBuf>> {
    let metrics = metrics_table(out);
    let errs: Vec<String> = metrics.header.iter().filter(|h| h.starts_with("param_error_")).cloned().collect();
    let errs: Vec<&str> = errs.iter().map(String::as_str).collect();
    Ok(vec![
        metrics.write(dir, METRICS_FILE)?,
        timings_table(out).write(dir, TIMINGS_FILE)?,
        weights_table(out).write(dir, WEIGHTS_FILE)?,
        gnuplot(dir, "metrics.gp", METRICS_FILE, "round", &errs, &format!("{} parameter error", out.mode.name()), false)?,
    ])
}

pub fn equivalence_table(rows: &[EquivalenceRow]) -> Table {
    let mut t = Table::new("equivalence", 1, header(&["n", "m", "l", "seed", "residual", "norm_dev", "all_accepted"]));
    for r in rows {
        t.push(vec![
            r.n.to_string(),
            r.m.to_string(),
            r.l.to_string(),
            r.seed.to_string(),
            f(r.residual),
            f(r.norm_dev),
            r.all_accepted.to_string(),
        ]);
    }
    t
}

pub fn bench_table(rep: &BenchReport) -> Table {
    let cols = ["n", "m", "l", "s", "t", "bytes_client", "bytes_key", "encode_secs", "keygen_secs", "aggregate_secs"];
    let mut t = Table::new("bench", 1, header(&cols));
    for r in &rep.rows {
        t.push(vec![
            r.n.to_string(),
            r.m.to_string(),
            r.l.to_string(),
            r.s.to_string(),
            r.t.to_string(),
            r.bytes_client.to_string(),
            r.bytes_key.to_string(),
            f(r.encode_secs),
            f(r.keygen_secs),
            f(r.aggregate_secs),
        ]);
    }
    t
}
