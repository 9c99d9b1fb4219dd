use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_personalized, aggregation_weights, fedavg_aggregate, pairwise_sum, RowParams};
use super::config::{FedConfig, Mode};
use super::local::{prox_step, Adam};
use super::FedError;
use crate::dataio::{NormalizedPanel, Split, WindowSample};
use crate::model::{Batch, ForecastModel, ForecastNetwork, ModelConfig};
use crate::threats::{apply_attack_at, AttackKind, AttackSpec};

/// Windows are evaluated in chunks of this many samples.
const EVAL_CHUNK: usize = 256;

/// Normalized panel, chronological window split and spatial adjacency.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub panel: NormalizedPanel,
    pub split: Split<WindowSample>,
    /// Spatial adjacency `λ̂` with self-connections.
    pub adjacency: Vec<Vec<f64>>,
}

impl TrainingData {
    pub fn num_clients(&self) -> usize {
        self.panel.num_stations()
    }
}

/// Client-side state: encoder/decoder vector and per-round training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub params: Vec<f64>,
    pub loss_history: Vec<f64>,
}

/// Server-side state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Shared graph-block parameters.
    pub params: Vec<f64>,
    pub optimizer: Adam,
    /// Vectors received in the last round (after any attack).
    pub uploads: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    /// Per-client aggregated models `w^G_i`.
    pub globals: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub mode: Mode,
    pub eta: f64,
    /// Mean training loss over the round's local iterations.
    pub train_loss: Vec<f64>,
    /// Validation loss of the model each client would be evaluated with.
    pub val_loss: Vec<f64>,
    pub mean_val_loss: f64,
    /// Aggregation weights (row `i` builds `w^G_i`).
    pub lambda: Vec<Vec<f64>>,
    /// Attention channel before blending; empty outside the personalized mode.
    pub attention: Vec<Vec<f64>>,
    pub gated: Vec<Vec<usize>>,
    /// `‖w_i − w^G_i‖` at the start of the round.
    pub prox_gap: Vec<f64>,
    pub attack: AttackKind,
    pub attacked: Vec<usize>,
}

/// Result of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub mode: Mode,
    pub network: ForecastNetwork,
    /// Parameters each station is evaluated with.
    pub model: ForecastModel,
    pub logs: Vec<RoundLog>,
    /// Round whose snapshot was selected (before fine-tuning).
    pub best_round: usize,
    pub best_val_loss: f64,
    /// Whether the fine-tuned model replaced the snapshot.
    pub fine_tuned: bool,
}

fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) | b);
    rng
}

fn sample_batch(data: &TrainingData, size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let train = &data.split.train;
    let picked: Vec<WindowSample> = if train.len() <= size {
        train.clone()
    } else {
        let mut idx = index::sample(rng, train.len(), size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| train[i]).collect()
    };
    Batch::from_windows(&data.panel, &picked)
}

/// Build the network a mode trains: the graph block is only used by the
/// personalized mode.
pub fn network_for(cfg: &ModelConfig, data: &TrainingData, mode: Mode) -> Result<ForecastNetwork, FedError> {
    Ok(match mode {
        Mode::Pfgl => ForecastNetwork::new(cfg.clone(), &data.adjacency)?,
        Mode::Fedavg | Mode::Local => ForecastNetwork::without_graph(cfg.clone(), data.num_clients())?,
    })
}

/// Window-weighted mean loss per station over `windows`.
pub fn split_losses(
    net: &ForecastNetwork,
    clients: &[&[f64]],
    server: &[f64],
    data: &TrainingData,
    windows: &[WindowSample],
) -> Result<Vec<f64>, FedError> {
    let n = net.num_stations();
    let mut sums = vec![0.0; n];
    for chunk in windows.chunks(EVAL_CHUNK) {
        let batch = Batch::from_windows(&data.panel, chunk);
        let l = net.losses(clients, server, &batch)?;
        for (s, v) in sums.iter_mut().zip(l) {
            *s += v * chunk.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / windows.len() as f64).collect())
}

/// Parameters each station is evaluated with after a round.
fn eval_clients<'a>(mode: Mode, clients: &'a [ClientState], server: &'a ServerState) -> Vec<&'a [f64]> {
    match mode {
        Mode::Fedavg => server.globals.iter().map(Vec::as_slice).collect(),
        Mode::Pfgl | Mode::Local => clients.iter().map(|c| c.params.as_slice()).collect(),
    }
}

/// Fresh client and server state with every client at the same `w_0`.
pub fn init_states(net: &ForecastNetwork, fed: &FedConfig) -> (Vec<ClientState>, ServerState) {
    let mut rng = ChaCha8Rng::seed_from_u64(fed.seed);
    let model = net.init(&mut rng);
    let n = net.num_stations();
    let clients = model
        .clients
        .iter()
        .map(|w| ClientState {
            params: w.clone(),
            loss_history: Vec::new(),
        })
        .collect();
    let server = ServerState {
        optimizer: Adam::new(fed.server_lr(), model.server.len()),
        params: model.server,
        uploads: model.clients.clone(),
        lambda: (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
        globals: model.clients,
    };
    (clients, server)
}

/// One communication round: joint local updates, server step, attacks on
/// uploads, aggregation and validation.
pub fn run_round(
    round: usize,
    mode: Mode,
    net: &ForecastNetwork,
    fed: &FedConfig,
    data: &TrainingData,
    clients: &mut [ClientState],
    server: &mut ServerState,
    attack: &AttackSpec,
) -> Result<RoundLog, FedError> {
    let n = clients.len();
    let eta = fed.eta();
    if mode == Mode::Fedavg {
        for (c, g) in clients.iter_mut().zip(&server.globals) {
            c.params.clone_from(g);
        }
    }
    let prox_gap: Vec<f64> = clients
        .iter()
        .zip(&server.globals)
        .map(|(c, g)| {
            pairwise_sum(
                &c.params
                    .iter()
                    .zip(g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .collect::<Vec<_>>(),
            )
            .sqrt()
        })
        .collect();
    let beta: Vec<f64> = (0..n)
        .map(|i| if mode == Mode::Pfgl { fed.beta.get(i) } else { 0.0 })
        .collect();

    let mut loss_sums = vec![0.0; n];
    let mut server_grad = vec![0.0; server.params.len()];
    for k in 0..fed.local_iters {
        let mut rng = stream_rng(fed.seed, round as u64, k as u64);
        let batch = sample_batch(data, fed.batch_size, &mut rng);
        let refs: Vec<&[f64]> = clients.iter().map(|c| c.params.as_slice()).collect();
        let g = net.loss_and_grad(&refs, &server.params, &batch)?;
        for i in 0..n {
            if !g.losses[i].is_finite() {
                return Err(FedError::Diverged { round, client: i });
            }
            if g.clients[i].iter().any(|v| !v.is_finite()) {
                return Err(FedError::NonFiniteGradient { iteration: k });
            }
            loss_sums[i] += g.losses[i];
            prox_step(&mut clients[i].params, &g.clients[i], &server.globals[i], eta, beta[i]);
        }
        for (a, b) in server_grad.iter_mut().zip(&g.server) {
            *a += b;
        }
    }
    let train_loss: Vec<f64> = loss_sums.iter().map(|s| s / fed.local_iters as f64).collect();
    for (c, l) in clients.iter_mut().zip(&train_loss) {
        c.loss_history.push(*l);
    }
    if !server.params.is_empty() {
        let scale = 1.0 / fed.local_iters as f64;
        let g: Vec<f64> = server_grad.iter().map(|v| v * scale).collect();
        server.optimizer.step(&mut server.params, &g);
    }

    server.uploads = clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if mode != Mode::Local && attack.attacks(i) {
                apply_attack_at(&c.params, attack, round, i)
            } else {
                c.params.clone()
            }
        })
        .collect();
    let attacked: Vec<usize> = if mode == Mode::Local {
        Vec::new()
    } else {
        (0..n).filter(|&i| attack.attacks(i)).collect()
    };

    let uploads: Vec<&[f64]> = server.uploads.iter().map(Vec::as_slice).collect();
    let mut attention = Vec::new();
    let mut gated = vec![Vec::new(); n];
    match mode {
        Mode::Local => {
            server.globals = clients.iter().map(|c| c.params.clone()).collect();
        }
        Mode::Fedavg => {
            let sizes = vec![data.split.train.len(); n];
            let w = fedavg_aggregate(&uploads, &sizes)?;
            let p = 1.0 / n as f64;
            server.lambda = vec![vec![p; n]; n];
            server.globals = vec![w; n];
        }
        Mode::Pfgl if n == 1 => {
            server.globals = vec![server.uploads[0].clone()];
        }
        Mode::Pfgl => {
            let mut lambda = Vec::with_capacity(n);
            let mut globals = Vec::with_capacity(n);
            for i in 0..n {
                let p = RowParams {
                    sigma: fed.sigma.get(i),
                    tau: fed.tau_for(i),
                    alpha: fed.alpha,
                    rule: fed.phi_rule,
                    gate_spatial: fed.gate_spatial,
                };
                let row = aggregation_weights(&uploads, i, &data.adjacency[i], p)?;
                globals.push(aggregate_personalized(&uploads, &row.lambda)?);
                gated[i] = row.gated;
                attention.push(row.attention);
                lambda.push(row.lambda);
            }
            server.lambda = lambda;
            server.globals = globals;
        }
    }
    if mode == Mode::Local {
        server.lambda = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
    }

    let eval = eval_clients(mode, clients, server);
    let val_loss = split_losses(net, &eval, &server.params, data, &data.split.val)?;
    if let Some(i) = val_loss.iter().position(|v| !v.is_finite()) {
        return Err(FedError::Diverged { round, client: i });
    }
    Ok(RoundLog {
        round,
        mode,
        eta,
        mean_val_loss: pairwise_sum(&val_loss) / n as f64,
        train_loss,
        val_loss,
        lambda: server.lambda.clone(),
        attention,
        gated,
        prox_gap,
        attack: if attacked.is_empty() {
            AttackKind::None
        } else {
            attack.kind
        },
        attacked,
    })
}

/// One epoch of joint proximal steps over the shuffled training windows
/// with the graph block frozen.
fn fine_tune(
    net: &ForecastNetwork,
    fed: &FedConfig,
    data: &TrainingData,
    model: &mut ForecastModel,
    anchors: &[Vec<f64>],
    epoch: usize,
) -> Result<(), FedError> {
    let mut order = data.split.train.clone();
    order.shuffle(&mut stream_rng(fed.seed, u32::MAX as u64, epoch as u64));
    let eta = fed.eta();
    for chunk in order.chunks(fed.batch_size) {
        let batch = Batch::from_windows(&data.panel, chunk);
        let g = net.loss_and_grad(&model.client_refs(), &model.server, &batch)?;
        for (i, w) in model.clients.iter_mut().enumerate() {
            if g.clients[i].iter().any(|v| !v.is_finite()) {
                return Err(FedError::NonFiniteGradient { iteration: 0 });
            }
            prox_step(w, &g.clients[i], &anchors[i], eta, fed.beta.get(i));
        }
    }
    Ok(())
}

/// Train for `fed.rounds` rounds, keep the round with the lowest mean
/// validation loss, then (personalized mode) fine-tune locally.
///
/// `attacks[t]` applies to round `t`; missing entries mean no attack.
/// `on_round` sees every log as soon as it is produced.
pub fn run_training(
    model_cfg: &ModelConfig,
    fed: &FedConfig,
    data: &TrainingData,
    mode: Mode,
    attacks: &[AttackSpec],
    mut on_round: impl FnMut(&RoundLog),
) -> Result<TrainingOutcome, FedError> {
    let n = data.num_clients();
    fed.validate(n)?;
    if data.split.train.is_empty() || data.split.val.is_empty() {
        return Err(FedError::EmptySplit);
    }
    if data.adjacency.len() != n {
        return Err(FedError::LengthMismatch {
            expected: n,
            got: data.adjacency.len(),
        });
    }
    for a in attacks {
        a.validate(n)?;
    }
    let net = network_for(model_cfg, data, mode)?;
    let (mut clients, mut server) = init_states(&net, fed);
    let none = AttackSpec::none();
    let mut logs = Vec::with_capacity(fed.rounds);
    let mut best: Option<(usize, f64, ForecastModel, Vec<Vec<f64>>)> = None;
    for t in 0..fed.rounds {
        let attack = attacks.get(t).unwrap_or(&none);
        let log = run_round(t, mode, &net, fed, data, &mut clients, &mut server, attack)?;
        log::debug!("{mode} round {t}: mean val loss {:.5}", log.mean_val_loss);
        on_round(&log);
        if best.as_ref().is_none_or(|b| log.mean_val_loss < b.1) {
            let snapshot = ForecastModel {
                clients: eval_clients(mode, &clients, &server)
                    .into_iter()
                    .map(<[f64]>::to_vec)
                    .collect(),
                server: server.params.clone(),
            };
            best = Some((t, log.mean_val_loss, snapshot, server.globals.clone()));
        }
        logs.push(log);
    }
    let (best_round, best_val_loss, mut model, anchors) = best.expect("at least one round");
    let mut fine_tuned = false;
    if mode == Mode::Pfgl && fed.fine_tune_epochs > 0 {
        let mut tuned = model.clone();
        for e in 0..fed.fine_tune_epochs {
            fine_tune(&net, fed, data, &mut tuned, &anchors, e)?;
        }
        let v = split_losses(&net, &tuned.client_refs(), &tuned.server, data, &data.split.val)?;
        let mean = pairwise_sum(&v) / n as f64;
        log::debug!("fine-tuned mean val loss {mean:.5} vs {best_val_loss:.5}");
        if mean < best_val_loss {
            model = tuned;
            fine_tuned = true;
        }
    }
    Ok(TrainingOutcome {
        mode,
        network: net,
        model,
        logs,
        best_round,
        best_val_loss,
        fine_tuned,
    })
}
