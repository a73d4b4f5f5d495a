//! Table rendering for suites and sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{write_file, Condition, ExperimentConfig, SweepRow};
use crate::error::{Error, Result};
use crate::eval::{MeanStd, TTestResult};

/// Per-run MAP/MAUC read back from a suite directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRecord {
    pub dir: PathBuf,
    pub condition: Condition,
    pub seeds: Vec<u64>,
    pub maps: Vec<f64>,
    pub maucs: Vec<f64>,
}

fn read_metrics(path: &Path) -> Result<(f64, f64)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let (mut map, mut mauc) = (None, None);
    for row in rdr.records() {
        let row = row?;
        let value = || -> Result<f64> {
            row.get(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::CorruptFile {
                    path: path.to_path_buf(),
                    message: format!("bad value in row {row:?}"),
                })
        };
        match row.get(0) {
            Some("map") => map = Some(value()?),
            Some("mauc") => mauc = Some(value()?),
            _ => {}
        }
    }
    match (map, mauc) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::CorruptFile {
            path: path.to_path_buf(),
            message: "missing map or mauc row".into(),
        }),
    }
}

/// Reads `config.toml` and every `run-<seed>/metrics.csv` of a suite.
/// Missing runs are all named in the error.
pub fn read_suite(dir: impl AsRef<Path>) -> Result<SuiteRecord> {
    let dir = dir.as_ref();
    let cfg = ExperimentConfig::load(dir.join("config.toml"))?;
    let mut record = SuiteRecord {
        dir: dir.to_path_buf(),
        condition: cfg.condition,
        seeds: Vec::new(),
        maps: Vec::new(),
        maucs: Vec::new(),
    };
    let mut missing = Vec::new();
    for &seed in &cfg.train.seeds {
        let path = dir.join(format!("run-{seed}")).join("metrics.csv");
        if !path.exists() {
            missing.push(path.display().to_string());
            continue;
        }
        let (map, mauc) = read_metrics(&path)?;
        record.seeds.push(seed);
        record.maps.push(map);
        record.maucs.push(mauc);
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!("missing runs: {}", missing.join(", "))));
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub map: MeanStd,
    pub mauc: MeanStd,
}

/// Conditions as rows, MAP and MAUC as `mean ± std` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

fn fixed3(v: f64) -> String {
    format!("{v:.3}")
}

impl ReportTable {
    pub fn from_suites(suites: &[SuiteRecord]) -> Result<Self> {
        let rows = suites
            .iter()
            .map(|s| {
                Ok(ReportRow {
                    label: s.condition.label(),
                    map: MeanStd::of(&s.maps)?,
                    mauc: MeanStd::of(&s.maucs)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn render_text(&self) -> String {
        let header = ["Training Data", "MAP", "MAUC"];
        let cells: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [r.label.clone(), r.map.to_string(), r.mauc.to_string()])
            .collect();
        render_grid(&header, &cells)
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("training_data,map_mean,map_std,mauc_mean,mauc_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "\"{}\",{},{},{},{}",
                r.label,
                fixed3(r.map.mean),
                fixed3(r.map.std),
                fixed3(r.mauc.mean),
                fixed3(r.mauc.std)
            );
        }
        out
    }
}

fn render_grid<const N: usize>(header: &[&str; N], rows: &[[String; N]]) -> String {
    let width = |i: usize| {
        rows.iter()
            .map(|r| r[i].chars().count())
            .chain([header[i].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..N).map(width).collect();
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = widths[i] - c.chars().count();
            s.push_str(c);
            if i + 1 < N {
                s.push_str(&" ".repeat(pad));
            }
        }
        s.push('\n');
        s
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (N - 1)) + "\n";
    let mut out = line(header.to_vec());
    out.push_str(&rule);
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Reads the suites in `suite_dirs` and writes `table.txt` and `table.csv`
/// to `out_dir`.
pub fn cmd_report(suite_dirs: &[PathBuf], out_dir: impl AsRef<Path>) -> Result<ReportTable> {
    if suite_dirs.is_empty() {
        return Err(Error::invalid("report needs at least one suite directory"));
    }
    let mut suites = Vec::new();
    let mut errors = Vec::new();
    for d in suite_dirs {
        match read_suite(d) {
            Ok(s) => suites.push(s),
            Err(e) => errors.push(format!("{}: {e}", d.display())),
        }
    }
    if !errors.is_empty() {
        return Err(Error::invalid(errors.join("; ")));
    }
    let table = ReportTable::from_suites(&suites)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(out_dir.join("table.txt"), table.render_text())?;
    write_file(out_dir.join("table.csv"), table.render_csv())?;
    Ok(table)
}

fn t_cells(t: &Option<TTestResult>) -> [String; 2] {
    match t {
        Some(t) => [format!("{:.3}", t.t), if t.significant { "yes" } else { "no" }.to_string()],
        None => ["n/a".into(), "n/a".into()],
    }
}

pub(super) fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut csv = String::from(
        "r,map_mean,map_std,mauc_mean,mauc_std,t_map,significant_map,t_mauc,significant_mauc,complete\n",
    );
    let mut cells = Vec::new();
    for row in rows {
        let (map, mauc) = match &row.aggregate {
            Some(a) => (a.map.to_string(), a.mauc.to_string()),
            None => ("n/a".into(), "n/a".into()),
        };
        let [tm, sm] = t_cells(&row.map_test);
        let [ta, sa] = t_cells(&row.mauc_test);
        let nums = row
            .aggregate
            .as_ref()
            .map(|a| {
                [a.map.mean, a.map.std, a.mauc.mean, a.mauc.std]
                    .map(fixed3)
                    .join(",")
            })
            .unwrap_or_else(|| ",,,".into());
        let _ = writeln!(csv, "{},{nums},{tm},{sm},{ta},{sa},{}", row.r, row.complete);
        cells.push([format!("{}%", row.r), map, mauc, tm, sm, ta, sa]);
    }
    let header = ["r", "MAP", "MAUC", "t(MAP)", "sig", "t(MAUC)", "sig"];
    write_file(dir.join("sweep.csv"), csv)?;
    write_file(dir.join("sweep.txt"), render_grid(&header, &cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_text_and_csv_agree() {
        let table = ReportTable {
            rows: vec![
                ReportRow {
                    label: "Curated".into(),
                    map: MeanStd { mean: 0.7672, std: 0.0051 },
                    mauc: MeanStd { mean: 0.9101, std: 0.0032 },
                },
                ReportRow {
                    label: "Curated (shuffled labels)".into(),
                    map: MeanStd { mean: 0.2104, std: 0.0069 },
                    mauc: MeanStd { mean: 0.502, std: 0.007 },
                },
            ],
        };
        let text = table.render_text();
        let csv = table.render_csv();
        assert!(text.starts_with("Training Data"));
        assert!(text.contains("0.767 ± 0.005"));
        assert!(text.contains("0.502 ± 0.007"));
        assert!(csv.contains("\"Curated\",0.767,0.005,0.910,0.003"));
        assert_eq!(text, table.render_text());
        assert_eq!(text.lines().count(), 4);
    }
}
