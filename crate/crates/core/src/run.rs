//! File-producing entry points behind the CLI: a single run and a side-by-side
//! comparison of strategies.
//!
//! Every output file is written next to its final path and renamed into place,
//! so a reader never observes a half-written file.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::cohort::StrategyKind;
use crate::config::{RunConfig, TrainData};
use crate::error::{Error, Result};
use crate::train::{CsvMetrics, RunReport, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

/// Trains `cfg` on already loaded data and writes `metrics.csv`, `report.json`
/// and `checkpoint.ckpt` into `cfg.output_dir`.
///
/// When training fails the metrics gathered so far are still moved into
/// place before the error is returned.
pub fn run_with_data(cfg: &RunConfig, data: &TrainData) -> Result<RunReport> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trainer = Trainer::new(cfg, data)?;

    let metrics_path = dir.join(METRICS_FILE);
    let metrics_tmp = tmp_path(&metrics_path);
    let file = File::create(&metrics_tmp).map_err(|e| Error::io(&metrics_tmp, e))?;
    let mut sink = CsvMetrics::new(BufWriter::new(file))?;
    let outcome = trainer.run(&mut sink);
    let file = sink
        .into_inner()?
        .into_inner()
        .map_err(|e| Error::io(&metrics_tmp, e.into_error()))?;
    file.sync_all().map_err(|e| Error::io(&metrics_tmp, e))?;
    fs::rename(&metrics_tmp, &metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let (report, cohort) = outcome?;
    atomic_write(&dir.join(REPORT_FILE), &to_json(&report)?)?;
    atomic_write(&dir.join(CHECKPOINT_FILE), &checkpoint::encode(&cohort.nets)?)?;
    Ok(report)
}

/// Loads the dataset and runs [`run_with_data`].
pub fn run_to_dir(cfg: &RunConfig) -> Result<RunReport> {
    let data = cfg.dataset.load()?;
    run_with_data(cfg, &data)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: String,
    /// Network index, or `None` for the best-net summary row.
    pub net: Option<usize>,
    pub arch: String,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub imp_ind: Option<f64>,
    pub imp_dml: Option<f64>,
    pub teacher_switches: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reports: Vec<RunReport>,
    pub rows: Vec<ComparisonRow>,
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn deltas(report: &RunReport, baseline: Option<&RunReport>) -> Option<Vec<f64>> {
    let base = baseline?;
    Some(
        report
            .nets
            .iter()
            .zip(&base.nets)
            .map(|(a, b)| a.final_accuracy - b.final_accuracy)
            .collect(),
    )
}

/// Fills in the Imp-Ind / Imp-DML columns of each report against the first
/// independent and the first DML entry of `reports`.
pub fn attach_deltas(reports: &mut [RunReport], kinds: &[StrategyKind]) {
    let (ind, dml) = baselines(reports, kinds);
    let (ind, dml) = (ind.cloned(), dml.cloned());
    for r in reports.iter_mut() {
        r.imp_ind = deltas(r, ind.as_ref());
        r.imp_dml = deltas(r, dml.as_ref());
    }
}

fn baselines<'a>(reports: &'a [RunReport], kinds: &[StrategyKind]) -> (Option<&'a RunReport>, Option<&'a RunReport>) {
    let first = |k: StrategyKind| kinds.iter().position(|&x| x == k).map(|i| &reports[i]);
    (first(StrategyKind::Independent), first(StrategyKind::Dml))
}

fn table_rows(reports: &[RunReport], baselines: (Option<&RunReport>, Option<&RunReport>)) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for r in reports {
        for (i, n) in r.nets.iter().enumerate() {
            rows.push(ComparisonRow {
                strategy: r.strategy.clone(),
                net: Some(n.net),
                arch: n.arch.clone(),
                final_accuracy: n.final_accuracy,
                best_accuracy: n.best_accuracy,
                imp_ind: r.imp_ind.as_ref().map(|d| d[i]),
                imp_dml: r.imp_dml.as_ref().map(|d| d[i]),
                teacher_switches: r.teacher_switches,
            });
        }
        let best = r.best_net_accuracy();
        rows.push(ComparisonRow {
            strategy: r.strategy.clone(),
            net: None,
            arch: String::new(),
            final_accuracy: best,
            best_accuracy: r.nets.iter().map(|n| n.best_accuracy).fold(f64::NEG_INFINITY, f64::max),
            imp_ind: baselines.0.map(|b| best - b.best_net_accuracy()),
            imp_dml: baselines.1.map(|b| best - b.best_net_accuracy()),
            teacher_switches: r.teacher_switches,
        });
    }
    rows
}

/// Runs every strategy in `cfg.compare` over the same cohort, data, seeds and
/// batch order. Each run gets its own sub-directory of `cfg.output_dir`; the
/// comparison table goes at the top level.
pub fn compare(cfg: &RunConfig) -> Result<Comparison> {
    if cfg.compare.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 strategies, got {}",
            cfg.compare.len()
        )));
    }
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let mut reports = Vec::new();
    for (i, s) in cfg.compare.iter().enumerate() {
        let mut sub = cfg.with_strategy(s.clone());
        sub.compare.clear();
        sub.output_dir = cfg.output_dir.join(format!("{i}-{}", slug(&s.label())));
        reports.push(run_with_data(&sub, &data)?);
    }
    let kinds: Vec<StrategyKind> = cfg.compare.iter().map(|s| s.kind).collect();
    attach_deltas(&mut reports, &kinds);
    for (i, (s, r)) in cfg.compare.iter().zip(&reports).enumerate() {
        let dir = cfg.output_dir.join(format!("{i}-{}", slug(&s.label())));
        atomic_write(&dir.join(REPORT_FILE), &to_json(r)?)?;
    }
    let rows = table_rows(&reports, baselines(&reports, &kinds));
    atomic_write(&cfg.output_dir.join(COMPARISON_CSV), comparison_csv(&rows)?.as_bytes())?;
    atomic_write(&cfg.output_dir.join(COMPARISON_TXT), comparison_text(&rows).as_bytes())?;
    Ok(Comparison { reports, rows })
}

const TABLE_HEADER: [&str; 8] = [
    "strategy",
    "net",
    "arch",
    "final_acc",
    "best_acc",
    "imp_ind",
    "imp_dml",
    "teacher_switches",
];

fn cells(row: &ComparisonRow) -> [String; 8] {
    let opt = |v: Option<f64>| v.map_or(String::new(), |d| format!("{d:+.2}"));
    [
        row.strategy.clone(),
        row.net.map_or("best".into(), |n| n.to_string()),
        row.arch.clone(),
        format!("{:.2}", row.final_accuracy),
        format!("{:.2}", row.best_accuracy),
        opt(row.imp_ind),
        opt(row.imp_dml),
        row.teacher_switches.to_string(),
    ]
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::io(COMPARISON_CSV, std::io::Error::other(e.to_string()));
    w.write_record(TABLE_HEADER).map_err(err)?;
    for row in rows {
        w.write_record(cells(row)).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(COMPARISON_CSV, std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Fixed-width text rendering of the comparison table.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let body: Vec<[String; 8]> = rows.iter().map(cells).collect();
    let mut widths: Vec<usize> = TABLE_HEADER.iter().map(|h| h.len()).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[String]| {
        let parts: Vec<String> = cols
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&TABLE_HEADER.map(String::from));
    for r in &body {
        line(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSpec;
    use crate::data::BlobSpec;
    use crate::nn::ArchSpec;
    use crate::train::NetReport;

    fn report(strategy: &str, accs: &[f64]) -> RunReport {
        RunReport {
            strategy: strategy.into(),
            epochs: 1,
            iterations: 1,
            teacher_switches: 0,
            nets: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| NetReport {
                    net: i,
                    arch: "mlp[4]".into(),
                    final_accuracy: a,
                    best_accuracy: a,
                    convergence_step: 0,
                    accuracy_history: vec![a],
                    times_teacher: 0,
                })
                .collect(),
            wall_clock_ms_per_step: 0.0,
            imp_ind: None,
            imp_dml: None,
        }
    }

    #[test]
    fn deltas_are_plain_differences() {
        let mut reports = vec![
            report("independent", &[70.0, 72.5]),
            report("dml", &[71.0, 73.0]),
            report("competitive", &[72.25, 74.0]),
        ];
        attach_deltas(
            &mut reports,
            &[StrategyKind::Independent, StrategyKind::Dml, StrategyKind::Competitive],
        );
        assert_eq!(reports[2].imp_ind, Some(vec![2.25, 1.5]));
        assert_eq!(reports[2].imp_dml, Some(vec![1.25, 1.0]));
        assert_eq!(reports[0].imp_ind, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn no_baseline_means_no_delta_column() {
        let mut reports = vec![report("competitive", &[1.0]), report("competitive", &[2.0])];
        attach_deltas(&mut reports, &[StrategyKind::Competitive; 2]);
        assert!(reports.iter().all(|r| r.imp_ind.is_none() && r.imp_dml.is_none()));
        let text = comparison_text(&table_rows(&reports, (None, None)));
        assert!(text.lines().next().unwrap().starts_with("strategy"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn text_table_columns_align() {
        let mut reports = vec![report("independent", &[9.5, 100.0]), report("competitive+lf+pert", &[10.0, 99.0])];
        let kinds = [StrategyKind::Independent, StrategyKind::Competitive];
        attach_deltas(&mut reports, &kinds);
        let rows = table_rows(&reports, baselines(&reports, &kinds));
        assert_eq!(rows[2].imp_ind, Some(0.0));
        assert_eq!(rows[5].imp_ind, Some(-1.0));
        let text = comparison_text(&rows);
        let lens: Vec<usize> = text.lines().map(str::len).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]), "{text}");
    }

    #[test]
    fn run_writes_all_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let blobs = BlobSpec {
            samples: 120,
            classes: 3,
            input_dim: 4,
            spread: 0.3,
            label_noise: 0.0,
            seed: 1,
        };
        let mut cfg = RunConfig::new(
            vec![ArchSpec::mlp(4, &[6], 3), ArchSpec::mlp(4, &[8], 3)],
            DatasetSpec::Blobs(blobs),
        );
        cfg.epochs = 1;
        cfg.batch_size = 16;
        cfg.output_dir = dir.path().join("out");
        let report = run_to_dir(&cfg).unwrap();
        for f in [METRICS_FILE, REPORT_FILE, CHECKPOINT_FILE] {
            assert!(cfg.output_dir.join(f).is_file(), "{f}");
            assert!(!tmp_path(&cfg.output_dir.join(f)).exists());
        }
        let nets = checkpoint::read(cfg.output_dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(nets.len(), 2);
        assert_eq!(report.iterations, 5);
    }
}
