use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::report::{write_tables, CellReport, ExperimentReport, ForecastTrace, REPORT_FILE, TIME_FORMAT};
use super::synthetic::{generate_synthetic, SyntheticData};
use super::{write_atomic, RunnerError};
use crate::dataio::{
    build_spatial_graph, discretize_sessions, make_windows, normalize_panel, read_coords_csv, read_sessions_csv,
    split_dataset, train_slot_range, write_sessions_csv, ChargingSession, DemandPanel, SpatialGraph,
};
use crate::federation::{pairwise_sum, run_training, Mode, RoundLog, TrainingData, TrainingOutcome};
use crate::metrics::{evaluate, EvalBatch, StationMetrics};
use crate::model::Batch;
use crate::threats::{schedule_attacks, AttackKind};

/// Test windows are predicted in chunks of this many samples.
const PREDICT_CHUNK: usize = 256;

/// Discretized panel and station graph, plus the generator output when the
/// data is synthetic.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub panel: DemandPanel,
    pub graph: SpatialGraph,
    pub sessions: Vec<ChargingSession>,
    pub synthetic: Option<SyntheticData>,
}

fn open(path: &Path) -> Result<BufReader<File>, RunnerError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| RunnerError::DataMissing(format!("{}: {e}", path.display())))
}

/// Ingest (or generate) sessions, discretize them and build the graph.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, RunnerError> {
    let d = &cfg.data;
    let (sessions, coords_by_id, synthetic) = match (&d.synthetic, &d.sessions) {
        (Some(spec), _) => {
            let syn = generate_synthetic(spec)?;
            let coords: Vec<(String, (f64, f64))> = syn
                .station_ids
                .iter()
                .cloned()
                .zip(syn.coords.iter().copied())
                .collect();
            (syn.sessions.clone(), Some(coords), Some(syn))
        }
        (None, Some(path)) => (read_sessions_csv(open(path)?)?, None, None),
        (None, None) => return Err(RunnerError::DataMissing("no data source configured".into())),
    };
    let panel = discretize_sessions(&sessions, d.interval_minutes)?;
    let coords = match coords_by_id {
        Some(pairs) => panel
            .stations
            .iter()
            .map(|s| {
                pairs
                    .iter()
                    .find(|(id, _)| id == s)
                    .map(|(_, c)| *c)
                    .expect("generated station")
            })
            .collect(),
        None => {
            let path = d
                .coords
                .as_ref()
                .ok_or_else(|| RunnerError::DataMissing("data.coords is not set".into()))?;
            read_coords_csv(open(path)?, &panel.stations)?
        }
    };
    let graph = build_spatial_graph(&coords, d.distance_threshold)?;
    if !graph.is_connected() {
        log::warn!("station graph at threshold {} is disconnected", d.distance_threshold);
    }
    Ok(PreparedData {
        panel,
        graph,
        sessions,
        synthetic,
    })
}

/// Window, split and normalize the prepared panel for training.
pub fn training_data(prepared: &PreparedData, cfg: &ExperimentConfig) -> Result<TrainingData, RunnerError> {
    let q = &cfg.model.quantiles;
    let windows = make_windows(&prepared.panel, cfg.model.history, q.horizon)?;
    let [a, b, c] = cfg.data.split;
    let split = split_dataset(&windows, (a, b, c))?;
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(RunnerError::DataMissing(format!(
            "{} windows leave an empty split",
            windows.len()
        )));
    }
    let panel = normalize_panel(&prepared.panel, train_slot_range(&split.train))?;
    Ok(TrainingData {
        panel,
        split,
        adjacency: prepared.graph.adjacency.clone(),
    })
}

/// Write `panel.csv`, `adjacency.csv` and, for synthetic data, the
/// generated `sessions.csv` and `coords.csv`.
pub fn write_prepared(prepared: &PreparedData, dir: &Path) -> Result<(), RunnerError> {
    let mut buf = Vec::new();
    prepared.panel.write_csv(&mut buf)?;
    write_atomic(&dir.join("panel.csv"), &buf)?;

    let mut adj = String::from("station");
    for s in &prepared.panel.stations {
        adj.push(',');
        adj.push_str(s);
    }
    adj.push('\n');
    for (s, row) in prepared.panel.stations.iter().zip(&prepared.graph.adjacency) {
        adj.push_str(s);
        for v in row {
            adj.push_str(&format!(",{v}"));
        }
        adj.push('\n');
    }
    write_atomic(&dir.join("adjacency.csv"), adj.as_bytes())?;

    if prepared.synthetic.is_some() {
        let mut buf = Vec::new();
        write_sessions_csv(&prepared.sessions, &mut buf)?;
        write_atomic(&dir.join("sessions.csv"), &buf)?;
        let mut coords = String::from("station_id,x,y\n");
        for (s, (x, y)) in prepared.panel.stations.iter().zip(&prepared.graph.coords) {
            coords.push_str(&format!("{s},{x},{y}\n"));
        }
        write_atomic(&dir.join("coords.csv"), coords.as_bytes())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    mode: Mode,
    malicious: usize,
}

impl Cell {
    fn label(&self) -> String {
        format!("{}_m{}", self.mode, self.malicious)
    }
}

/// Denormalized test metrics pooled over every horizon step, and the
/// one-step-ahead trace per station.
fn evaluate_test(
    outcome: &TrainingOutcome,
    data: &TrainingData,
    prepared: &PreparedData,
    levels: &[f64],
) -> Result<(Vec<StationMetrics>, ForecastTrace), RunnerError> {
    let n = data.num_clients();
    let nq = levels.len();
    let test = &data.split.test;
    let mut y = vec![Vec::new(); n];
    let mut preds = vec![vec![Vec::new(); nq]; n];
    let mut trace = ForecastTrace {
        timestamps: test
            .iter()
            .map(|w| {
                prepared.panel.slot_times[w.target_range().start]
                    .format(TIME_FORMAT)
                    .to_string()
            })
            .collect(),
        actual: vec![Vec::with_capacity(test.len()); n],
        forecast: vec![vec![Vec::with_capacity(test.len()); nq]; n],
    };
    let scaler = &data.panel.scaler;
    for chunk in test.chunks(PREDICT_CHUNK) {
        let batch = Batch::from_windows(&data.panel, chunk);
        let out = outcome
            .network
            .predict(&outcome.model.client_refs(), &outcome.model.server, &batch)?;
        for (s, t) in out.iter().enumerate() {
            let v = t.data();
            for (b, w) in chunk.iter().enumerate() {
                let p = w.horizon;
                for (step, slot) in w.target_range().enumerate() {
                    let actual = prepared.panel.demand[s][slot];
                    y[s].push(actual);
                    if step == 0 {
                        trace.actual[s].push(actual);
                    }
                    for q in 0..nq {
                        let z = v[(b * nq + q) * p + step];
                        let f = scaler.denormalize(s, z);
                        preds[s][q].push(f);
                        if step == 0 {
                            trace.forecast[s][q].push(f);
                        }
                    }
                }
            }
        }
    }
    let metrics = y
        .into_iter()
        .zip(preds)
        .map(|(y, p)| EvalBatch::new(y, p, levels.to_vec()).and_then(|b| evaluate(&b)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((metrics, trace))
}

fn write_jsonl(path: &Path, logs: &[RoundLog]) -> Result<(), RunnerError> {
    let mut buf = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut buf, l)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)?;
    Ok(())
}

fn run_cell(
    cell: Cell,
    cfg: &ExperimentConfig,
    data: &TrainingData,
    prepared: &PreparedData,
) -> Result<CellReport, RunnerError> {
    let n = data.num_clients();
    let fed = cfg.fed();
    let label = cell.label();
    let template = cfg.attacks.template(cfg.seed);
    let attacks = schedule_attacks(&template, n, cell.malicious, fed.rounds, cfg.attacks.permute)
        .map_err(|e| RunnerError::ConfigInvalid(e.to_string()))?;
    log::info!("cell {label}: {} rounds", fed.rounds);
    let outcome = run_training(&cfg.model, &fed, data, cell.mode, &attacks, |l| {
        log::debug!("{label} round {}: val {:.5}", l.round, l.mean_val_loss);
    })
    .map_err(|e| match RunnerError::from(e) {
        RunnerError::RunDiverged(m) => RunnerError::RunDiverged(format!("{label}: {m}")),
        other => other,
    })?;
    let levels = &cfg.model.quantiles.levels;
    let (metrics, forecast) = evaluate_test(&outcome, data, prepared, levels)?;

    let log_file = format!("logs/{label}.jsonl");
    write_jsonl(&cfg.output_dir.join(&log_file), &outcome.logs)?;

    let attacked = outcome.logs.last().map(|l| l.attacked.clone()).unwrap_or_default();
    let honest: Vec<f64> = metrics
        .iter()
        .enumerate()
        .filter(|(i, _)| !attacked.contains(i))
        .map(|(_, m)| m.qs)
        .collect();
    let mean = |v: &[f64]| pairwise_sum(v) / v.len() as f64;
    let col = |f: fn(&StationMetrics) -> f64| metrics.iter().map(f).collect::<Vec<_>>();
    Ok(CellReport {
        label,
        mode: cell.mode,
        malicious: cell.malicious,
        attack: attacks.first().map_or(AttackKind::None, |a| a.kind),
        attacked,
        best_round: outcome.best_round,
        best_val_loss: outcome.best_val_loss,
        fine_tuned: outcome.fine_tuned,
        log_file,
        avg_qs: mean(&col(|m| m.qs)),
        avg_mil: mean(&col(|m| m.mil)),
        avg_icp: mean(&col(|m| m.icp)),
        honest_qs: (!honest.is_empty()).then(|| mean(&honest)),
        lambda: outcome.logs[outcome.best_round].lambda.clone(),
        metrics,
        forecast,
    })
}

/// Run every (malicious count × mode) cell, persist logs, tables and
/// `report.json` under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, RunnerError> {
    let started = Instant::now();
    cfg.validate()?;
    let prepared = prepare_data(cfg)?;
    let data = training_data(&prepared, cfg)?;
    let n = data.num_clients();
    cfg.fed().validate(n)?;
    if let Some(&m) = cfg.attacks.malicious.iter().find(|&&m| m > n) {
        return Err(RunnerError::ConfigInvalid(format!("{m} malicious clients among {n}")));
    }
    let cells: Vec<Cell> = cfg
        .attacks
        .malicious
        .iter()
        .flat_map(|&malicious| cfg.modes.iter().map(move |&mode| Cell { mode, malicious }))
        .collect();
    let run = |c: &Cell| run_cell(*c, cfg, &data, &prepared);
    let results: Vec<CellReport> = if cfg.parallel {
        cells.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        cells.iter().map(run).collect::<Result<_, _>>()?
    };
    let report = ExperimentReport {
        config: cfg.clone(),
        stations: prepared.panel.stations.clone(),
        levels: cfg.model.quantiles.levels.clone(),
        cells: results,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_tables(&report, &cfg.output_dir)?;
    write_atomic(
        &cfg.output_dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}
