use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::{write_atomic, RunnerError};
use crate::federation::{Mode, RoundLog};
use crate::metrics::{improved_rate, Orientation, StationMetrics};
use crate::threats::AttackKind;

pub(crate) const REPORT_FILE: &str = "report.json";
pub(crate) const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// One-step-ahead test forecasts in demand units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrace {
    /// Time of the forecast slot, one per test window.
    pub timestamps: Vec<String>,
    /// `actual[station][window]`.
    pub actual: Vec<Vec<f64>>,
    /// `forecast[station][level][window]`.
    pub forecast: Vec<Vec<Vec<f64>>>,
}

/// Results of one (mode, malicious count) cell. `log_file` is relative to
/// the output directory and holds the cell's round logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub mode: Mode,
    pub malicious: usize,
    pub attack: AttackKind,
    pub attacked: Vec<usize>,
    pub best_round: usize,
    pub best_val_loss: f64,
    pub fine_tuned: bool,
    pub log_file: String,
    pub metrics: Vec<StationMetrics>,
    pub avg_qs: f64,
    pub avg_mil: f64,
    pub avg_icp: f64,
    /// Mean QS over stations that did not attack; `None` if all did.
    pub honest_qs: Option<f64>,
    /// Aggregation weights of the selected round.
    pub lambda: Vec<Vec<f64>>,
    pub forecast: ForecastTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub stations: Vec<String>,
    pub levels: Vec<f64>,
    pub cells: Vec<CellReport>,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    pub fn cell(&self, mode: Mode, malicious: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.mode == mode && c.malicious == malicious)
    }

    /// Local cell used as the improvement baseline for `cell`.
    fn baseline(&self, cell: &CellReport) -> Option<&CellReport> {
        if cell.mode == Mode::Local {
            return None;
        }
        self.cell(Mode::Local, cell.malicious)
            .or_else(|| self.cells.iter().find(|c| c.mode == Mode::Local))
    }

    /// Round logs of `cell`, read back from disk.
    pub fn round_logs(&self, cell: &CellReport) -> Result<Vec<RoundLog>, RunnerError> {
        let path = self.config.output_dir.join(&cell.log_file);
        let text =
            fs::read_to_string(&path).map_err(|e| RunnerError::ReportIncomplete(format!("{}: {e}", path.display())))?;
        text.lines()
            .map(|l| {
                serde_json::from_str(l).map_err(|e| RunnerError::ReportIncomplete(format!("{}: {e}", path.display())))
            })
            .collect()
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// `metrics_{qs,mil,icp}.csv`: one row per cell, one column per station,
/// then the station average and the improved rate against Local.
pub(crate) fn write_tables(report: &ExperimentReport, dir: &Path) -> Result<(), RunnerError> {
    let (lo, hi) = (report.levels[0], *report.levels.last().expect("levels"));
    let tables: [(&str, fn(&StationMetrics) -> f64, Orientation); 3] = [
        ("qs", |m| m.qs, Orientation::LowerIsBetter),
        ("mil", |m| m.mil, Orientation::LowerIsBetter),
        ("icp", |m| m.icp, Orientation::CloserTo(hi - lo)),
    ];
    for (name, get, orientation) in tables {
        let mut out = String::from("cell,mode,malicious");
        for s in &report.stations {
            write!(out, ",{s}").expect("string write");
        }
        out.push_str(",Avg,ImprovedRate\n");
        for c in &report.cells {
            let vals: Vec<f64> = c.metrics.iter().map(get).collect();
            write!(out, "{},{},{}", c.label, c.mode, c.malicious).expect("string write");
            for v in &vals {
                write!(out, ",{}", fmt(*v)).expect("string write");
            }
            write!(out, ",{}", fmt(vals.iter().sum::<f64>() / vals.len() as f64)).expect("string write");
            match report.baseline(c) {
                Some(b) => {
                    let base: Vec<f64> = b.metrics.iter().map(get).collect();
                    let r = improved_rate(&vals, &base, orientation)?;
                    writeln!(out, ",{}", fmt(r)).expect("string write");
                }
                None => out.push_str(",\n"),
            }
        }
        write_atomic(&dir.join(format!("metrics_{name}.csv")), out.as_bytes())?;
    }
    Ok(())
}

/// Read `report.json` from `dir`; log paths resolve against `dir`.
pub fn load_report(dir: &Path) -> Result<ExperimentReport, RunnerError> {
    let path = dir.join(REPORT_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| RunnerError::ReportIncomplete(format!("{}: {e}", path.display())))?;
    let mut r: ExperimentReport = serde_json::from_str(&text)?;
    r.config.output_dir = dir.to_path_buf();
    Ok(r)
}

/// Files written by [`emit_plot_data`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotFiles {
    pub loss: Vec<PathBuf>,
    pub lambda: Vec<PathBuf>,
    pub heatmap: Vec<PathBuf>,
    pub forecast: Vec<PathBuf>,
}

/// Per cell: loss curves, λ trajectories (one column per `(i, j)`), the
/// selected round's λ heatmap, and forecast-vs-actual traces per station.
pub fn emit_plot_data(report: &ExperimentReport, out: &Path) -> Result<PlotFiles, RunnerError> {
    let incomplete = |m: String| RunnerError::ReportIncomplete(m);
    if report.cells.is_empty() {
        return Err(incomplete("report has no cells".into()));
    }
    let n = report.stations.len();
    let mut files = PlotFiles::default();
    for c in &report.cells {
        let logs = report.round_logs(c)?;
        if logs.len() != report.config.federation.rounds {
            return Err(incomplete(format!(
                "{}: {} of {} rounds logged",
                c.label,
                logs.len(),
                report.config.federation.rounds
            )));
        }
        if c.metrics.len() != n || c.lambda.len() != n || c.forecast.actual.len() != n {
            return Err(incomplete(format!("{}: station data missing", c.label)));
        }
        if c.forecast.timestamps.is_empty() {
            return Err(incomplete(format!("{}: no forecast trace", c.label)));
        }

        let mut loss = String::from("round,train_mean,val_mean");
        for s in &report.stations {
            write!(loss, ",val_{s}").expect("string write");
        }
        loss.push('\n');
        let mut lam = String::from("round");
        for i in &report.stations {
            for j in &report.stations {
                write!(lam, ",{i}->{j}").expect("string write");
            }
        }
        lam.push('\n');
        for l in &logs {
            let train = l.train_loss.iter().sum::<f64>() / n as f64;
            write!(loss, "{},{},{}", l.round, fmt(train), fmt(l.mean_val_loss)).expect("string write");
            for v in &l.val_loss {
                write!(loss, ",{}", fmt(*v)).expect("string write");
            }
            loss.push('\n');
            if l.lambda.len() != n || l.lambda.iter().any(|r| r.len() != n) {
                return Err(incomplete(format!("{}: round {} has no λ matrix", c.label, l.round)));
            }
            write!(lam, "{}", l.round).expect("string write");
            for v in l.lambda.iter().flatten() {
                write!(lam, ",{}", fmt(*v)).expect("string write");
            }
            lam.push('\n');
        }

        let mut heat = String::from("station");
        for s in &report.stations {
            write!(heat, ",{s}").expect("string write");
        }
        heat.push('\n');
        for (s, row) in report.stations.iter().zip(&c.lambda) {
            heat.push_str(s);
            for v in row {
                write!(heat, ",{}", fmt(*v)).expect("string write");
            }
            heat.push('\n');
        }

        let path = |kind: &str| out.join(format!("{}_{kind}.csv", c.label));
        for (p, text, list) in [
            (path("loss"), loss, &mut files.loss),
            (path("lambda"), lam, &mut files.lambda),
            (path("heatmap"), heat, &mut files.heatmap),
        ] {
            write_atomic(&p, text.as_bytes())?;
            list.push(p);
        }

        for (s, name) in report.stations.iter().enumerate() {
            let mut f = String::from("timestamp,actual");
            for q in &report.levels {
                write!(f, ",q{q}").expect("string write");
            }
            f.push('\n');
            for (k, t) in c.forecast.timestamps.iter().enumerate() {
                write!(f, "{t},{}", fmt(c.forecast.actual[s][k])).expect("string write");
                for q in &c.forecast.forecast[s] {
                    write!(f, ",{}", fmt(q[k])).expect("string write");
                }
                f.push('\n');
            }
            let p = out.join(format!("{}_forecast_{name}.csv", c.label));
            write_atomic(&p, f.as_bytes())?;
            files.forecast.push(p);
        }
    }
    Ok(files)
}
