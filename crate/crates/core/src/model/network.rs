use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{
    chebyshev_basis, normalized_laplacian, tape_decode, tape_encode, tape_st_block, BlockVars, DecoderVars, EncoderVars,
};
use super::params::ParamLayout;
use super::ModelError;
use crate::dataio::{NormalizedPanel, WindowSample, INPUT_FEATURES};
use crate::gradtape::{Tape, Tensor, Var};

/// One personal encoder/decoder vector per station plus the shared
/// graph-block vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub clients: Vec<Vec<f64>>,
    pub server: Vec<f64>,
}

impl ForecastModel {
    pub fn client_refs(&self) -> Vec<&[f64]> {
        self.clients.iter().map(Vec::as_slice).collect()
    }
}

/// Inputs `[B, F, h]` and targets `[B, p]` for every station over the same
/// window start times.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl Batch {
    pub fn from_windows(panel: &NormalizedPanel, samples: &[WindowSample]) -> Self {
        let b = samples.len();
        let (h, p) = samples.first().map_or((0, 0), |s| (s.history, s.horizon));
        let mut inputs = Vec::with_capacity(panel.num_stations());
        let mut targets = Vec::with_capacity(panel.num_stations());
        for st in 0..panel.num_stations() {
            let mut x = vec![0.0; b * INPUT_FEATURES * h];
            let mut y = Vec::with_capacity(b * p);
            for (bi, s) in samples.iter().enumerate() {
                for (t, slot) in s.input_range().enumerate() {
                    let base = bi * INPUT_FEATURES * h;
                    x[base + t] = panel.demand[st][slot];
                    for (c, v) in panel.calendar[slot].iter().enumerate() {
                        x[base + (c + 1) * h + t] = *v;
                    }
                }
                y.extend(s.targets(panel, st));
            }
            inputs.push(Tensor::new(vec![b, INPUT_FEATURES, h], x).expect("batch shape"));
            targets.push(Tensor::new(vec![b, p], y).expect("batch shape"));
        }
        Self { inputs, targets }
    }

    pub fn size(&self) -> usize {
        self.targets.first().map_or(0, |t| t.shape()[0])
    }

    pub fn num_stations(&self) -> usize {
        self.inputs.len()
    }
}

/// Per-station losses with gradients of their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGrad {
    pub losses: Vec<f64>,
    /// `∂(Σ_j loss_j)/∂w_i`, which only loss_i contributes to.
    pub clients: Vec<Vec<f64>>,
    /// Gradient w.r.t. the shared graph block (empty when it is disabled).
    pub server: Vec<f64>,
}

struct Recorded {
    preds: Vec<Var>,
    losses: Vec<Var>,
    client_vars: Vec<Vec<Var>>,
    server_vars: Vec<Var>,
}

/// Joint forward pass of all stations for a fixed graph.
#[derive(Clone, Debug)]
pub struct ForecastNetwork {
    cfg: ModelConfig,
    stations: usize,
    client_layout: ParamLayout,
    server_layout: ParamLayout,
    /// Chebyshev basis of the scaled Laplacian; `None` runs without the graph block.
    basis: Option<Vec<Tensor>>,
}

fn load(tape: &mut Tape, layout: &ParamLayout, values: &[f64], trainable: bool) -> Vec<Var> {
    layout
        .entries
        .iter()
        .map(|e| {
            let t = Tensor::new(e.shape.clone(), values[e.range()].to_vec()).expect("layout shape");
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        })
        .collect()
}

impl ForecastNetwork {
    /// Network whose graph block runs over the weighted adjacency `adjacency`.
    pub fn new(cfg: ModelConfig, adjacency: &[Vec<f64>]) -> Result<Self, ModelError> {
        cfg.validate()?;
        let lap = normalized_laplacian(adjacency)?;
        let n = adjacency.len();
        Ok(Self {
            client_layout: ParamLayout::client(&cfg),
            server_layout: ParamLayout::server(&cfg, n),
            basis: Some(chebyshev_basis(&lap.scaled, cfg.cheb_order)),
            stations: n,
            cfg,
        })
    }

    /// Encoder/decoder only; the decoder sees zeros in place of graph features.
    pub fn without_graph(cfg: ModelConfig, stations: usize) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self {
            client_layout: ParamLayout::client(&cfg),
            server_layout: ParamLayout::default(),
            basis: None,
            stations,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_stations(&self) -> usize {
        self.stations
    }

    pub fn uses_graph(&self) -> bool {
        self.basis.is_some()
    }

    pub fn client_layout(&self) -> &ParamLayout {
        &self.client_layout
    }

    pub fn server_layout(&self) -> &ParamLayout {
        &self.server_layout
    }

    /// Seeded initial model; every station starts from the same client vector.
    pub fn init(&self, rng: &mut impl Rng) -> ForecastModel {
        let w0 = self.client_layout.init(rng);
        ForecastModel {
            clients: vec![w0; self.stations],
            server: self.server_layout.init(rng),
        }
    }

    fn check(&self, clients: &[&[f64]], server: &[f64], batch: &Batch) -> Result<(), ModelError> {
        let bad = clients.len() != self.stations
            || batch.num_stations() != self.stations
            || clients.iter().any(|c| c.len() != self.client_layout.total)
            || server.len() != self.server_layout.total;
        if bad {
            return Err(ModelError::Shape(format!(
                "{} client vectors / {} batch stations for {} stations, server vector {} of {}",
                clients.len(),
                batch.num_stations(),
                self.stations,
                server.len(),
                self.server_layout.total
            )));
        }
        if let Some(x) = batch.inputs.first() {
            if x.shape()[1..] != [self.cfg.features, self.cfg.history] {
                return Err(ModelError::Shape(format!(
                    "inputs {:?}, expected [B, {}, {}]",
                    x.shape(),
                    self.cfg.features,
                    self.cfg.history
                )));
            }
        }
        Ok(())
    }

    fn record(
        &self,
        tape: &mut Tape,
        clients: &[&[f64]],
        server: &[f64],
        batch: &Batch,
        trainable: bool,
    ) -> Result<Recorded, ModelError> {
        self.check(clients, server, batch)?;
        let cfg = &self.cfg;
        let b = batch.size();
        let client_vars: Vec<Vec<Var>> = clients
            .iter()
            .map(|c| load(tape, &self.client_layout, c, trainable))
            .collect();
        let server_vars = load(tape, &self.server_layout, server, trainable);

        let mut encoded = Vec::with_capacity(self.stations);
        for (i, cv) in client_vars.iter().enumerate() {
            let x = tape.constant(batch.inputs[i].clone());
            let enc = EncoderVars { w: cv[0], b: cv[1] };
            encoded.push(tape_encode(tape, x, &enc)?);
        }

        let graph_features: Vec<Var> = match &self.basis {
            Some(basis) => {
                let stacked = tape.stack(&encoded)?;
                let mut h = tape.permute(stacked, &[1, 0, 2, 3])?;
                let basis: Vec<Var> = basis.iter().map(|t| tape.constant(t.clone())).collect();
                for blk in 0..cfg.blocks {
                    let s = &server_vars[blk * 12..(blk + 1) * 12];
                    let bv = BlockVars {
                        sat_v: s[0],
                        sat_b: s[1],
                        w1: s[2],
                        w2: s[3],
                        w3: s[4],
                        tat_v: s[5],
                        tat_b: s[6],
                        u1: s[7],
                        u2: s[8],
                        u3: s[9],
                        theta: s[10],
                        phi: s[11],
                    };
                    h = tape_st_block(tape, h, &basis, &bv)?;
                }
                (0..self.stations)
                    .map(|i| tape.select(h, 1, i))
                    .collect::<Result<_, _>>()?
            }
            None => {
                let z = tape.constant(Tensor::zeros(&[b, cfg.graph_channels(), cfg.history]));
                vec![z; self.stations]
            }
        };

        let mut preds = Vec::with_capacity(self.stations);
        let mut losses = Vec::with_capacity(self.stations);
        for (i, cv) in client_vars.iter().enumerate() {
            let dec = DecoderVars {
                conv_w: cv[2],
                conv_b: cv[3],
                lin_w: cv[4],
                lin_b: cv[5],
            };
            let q = &cfg.quantiles;
            let y_hat = tape_decode(tape, graph_features[i], encoded[i], &dec, q.num_levels(), q.horizon)?;
            let y = tape.constant(batch.targets[i].clone());
            losses.push(tape.pinball(y_hat, y, &q.levels)?);
            preds.push(y_hat);
        }
        Ok(Recorded {
            preds,
            losses,
            client_vars,
            server_vars,
        })
    }

    /// Forecasts `[B, Q, p]` per station (normalized units).
    pub fn predict(&self, clients: &[&[f64]], server: &[f64], batch: &Batch) -> Result<Vec<Tensor>, ModelError> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, clients, server, batch, false)?;
        Ok(r.preds.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Batch-mean quantile loss per station.
    pub fn losses(&self, clients: &[&[f64]], server: &[f64], batch: &Batch) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, clients, server, batch, false)?;
        Ok(r.losses.iter().map(|v| tape.value(*v).data()[0]).collect())
    }

    /// Losses and gradients of their sum.
    pub fn loss_and_grad(&self, clients: &[&[f64]], server: &[f64], batch: &Batch) -> Result<JointGrad, ModelError> {
        let mut tape = Tape::new();
        let r = self.record(&mut tape, clients, server, batch, true)?;
        let mut total = r.losses[0];
        for l in &r.losses[1..] {
            total = tape.add(total, *l)?;
        }
        let grads = tape.backward(total)?;
        let flat = |vars: &[Var]| -> Vec<f64> { vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect() };
        Ok(JointGrad {
            losses: r.losses.iter().map(|v| tape.value(*v).data()[0]).collect(),
            clients: r.client_vars.iter().map(|vs| flat(vs)).collect(),
            server: flat(&r.server_vars),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuantileConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            history: 8,
            quantiles: QuantileConfig {
                levels: vec![0.1, 0.5, 0.9],
                horizon: 2,
            },
            encoder_channels: 3,
            hidden: 3,
            decoder_channels: 3,
            ..ModelConfig::default()
        }
    }

    fn rand_batch(rng: &mut ChaCha8Rng, n: usize, b: usize, cfg: &ModelConfig) -> Batch {
        let mut t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = (0..n).map(|_| t(&[b, cfg.features, cfg.history])).collect();
        let targets = (0..n).map(|_| t(&[b, cfg.quantiles.horizon])).collect();
        Batch { inputs, targets }
    }

    fn triangle() -> Vec<Vec<f64>> {
        vec![vec![0.0, 1.0, 0.5], vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.0]]
    }

    fn randomize(model: &mut ForecastModel, rng: &mut ChaCha8Rng) {
        for c in &mut model.clients {
            for v in c.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let net = ForecastNetwork::new(cfg.clone(), &triangle()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = net.init(&mut rng);
        randomize(&mut model, &mut rng);
        let batch = rand_batch(&mut rng, 3, 4, &cfg);
        let total =
            |m: &ForecastModel| -> f64 { net.losses(&m.client_refs(), &m.server, &batch).unwrap().iter().sum() };
        let g = net.loss_and_grad(&model.client_refs(), &model.server, &batch).unwrap();
        assert_eq!(
            g.losses,
            net.losses(&model.client_refs(), &model.server, &batch).unwrap()
        );

        let eps = 1e-6;
        let mut worst = 0.0f64;
        let mut check = |m: &mut ForecastModel, slot: Option<usize>, k: usize, ad: f64| {
            let cell = |m: &mut ForecastModel| -> *mut f64 {
                match slot {
                    Some(i) => &mut m.clients[i][k],
                    None => &mut m.server[k],
                }
            };
            let orig = unsafe { *cell(m) };
            unsafe { *cell(m) = orig + eps };
            let up = total(m);
            unsafe { *cell(m) = orig - eps };
            let down = total(m);
            unsafe { *cell(m) = orig };
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - ad).abs() / ad.abs().max(1.0));
        };
        for i in 0..3 {
            for k in 0..net.client_layout().total {
                check(&mut model, Some(i), k, g.clients[i][k]);
            }
        }
        for k in 0..net.server_layout().total {
            check(&mut model, None, k, g.server[k]);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
        assert!(g.server.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn client_gradient_only_depends_on_own_loss_without_graph() {
        let cfg = small_cfg();
        let net = ForecastNetwork::without_graph(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = net.init(&mut rng);
        assert!(model.server.is_empty());
        let batch = rand_batch(&mut rng, 3, 5, &cfg);
        let joint = net.loss_and_grad(&model.client_refs(), &model.server, &batch).unwrap();
        let solo = ForecastNetwork::without_graph(cfg, 1).unwrap();
        let one = Batch {
            inputs: vec![batch.inputs[1].clone()],
            targets: vec![batch.targets[1].clone()],
        };
        let g1 = solo.loss_and_grad(&[&model.clients[1]], &[], &one).unwrap();
        assert_eq!(g1.clients[0], joint.clients[1]);
        assert_eq!(g1.losses[0], joint.losses[1]);
    }

    fn permute_server(net: &ForecastNetwork, server: &[f64], perm: &[usize]) -> Vec<f64> {
        let n = perm.len();
        let mut out = server.to_vec();
        for e in &net.server_layout().entries {
            let base = e.offset;
            if e.name.ends_with("sat.v") || e.name.ends_with("sat.b") {
                for j in 0..n {
                    for k in 0..n {
                        out[base + j * n + k] = server[base + perm[j] * n + perm[k]];
                    }
                }
            } else if e.name.ends_with("tat.u1") {
                for j in 0..n {
                    out[base + j] = server[base + perm[j]];
                }
            } else if e.name.ends_with("tat.u2") {
                for r in 0..e.shape[0] {
                    for j in 0..n {
                        out[base + r * n + j] = server[base + r * n + perm[j]];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let cfg = small_cfg();
        let a = vec![
            vec![0.0, 1.0, 0.5, 0.0],
            vec![1.0, 0.0, 0.0, 0.3],
            vec![0.5, 0.0, 0.0, 0.8],
            vec![0.0, 0.3, 0.8, 0.0],
        ];
        let perm = [2, 0, 3, 1];
        let ap: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| a[i][j]).collect()).collect();
        let net = ForecastNetwork::new(cfg.clone(), &a).unwrap();
        let netp = ForecastNetwork::new(cfg.clone(), &ap).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = net.init(&mut rng);
        randomize(&mut model, &mut rng);
        let batch = rand_batch(&mut rng, 4, 3, &cfg);
        let out = net.predict(&model.client_refs(), &model.server, &batch).unwrap();

        let clients_p: Vec<&[f64]> = perm.iter().map(|&i| model.clients[i].as_slice()).collect();
        let server_p = permute_server(&net, &model.server, &perm);
        let batch_p = Batch {
            inputs: perm.iter().map(|&i| batch.inputs[i].clone()).collect(),
            targets: perm.iter().map(|&i| batch.targets[i].clone()).collect(),
        };
        let out_p = netp.predict(&clients_p, &server_p, &batch_p).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for (x, y) in out_p[j].data().iter().zip(out[i].data()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn batch_layout_and_shape_errors() {
        use crate::dataio::{calendar_features, normalize_panel, windows_for_len, DemandPanel};
        use chrono::{Duration, NaiveDate};
        let t0 = NaiveDate::from_ymd_opt(2018, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let times: Vec<_> = (0..20).map(|k| t0 + Duration::minutes(30 * k)).collect();
        let panel = DemandPanel {
            stations: vec!["a".into(), "b".into()],
            interval_minutes: 30,
            calendar: times.iter().map(|t| calendar_features(*t)).collect(),
            slot_times: times,
            demand: vec![
                (0..20).map(f64::from).collect(),
                (0..20).map(|v| f64::from(v * v)).collect(),
            ],
        };
        let np = normalize_panel(&panel, 0..20).unwrap();
        let w = windows_for_len(20, 8, 2).unwrap();
        let batch = Batch::from_windows(&np, &w[3..6]);
        assert_eq!(batch.size(), 3);
        assert_eq!(batch.inputs[1].shape(), &[3, INPUT_FEATURES, 8]);
        // Channel-major layout matches the per-window [h × F] matrix transposed.
        let m = w[4].inputs(&np, 1);
        for t in 0..8 {
            for c in 0..INPUT_FEATURES {
                assert_eq!(
                    batch.inputs[1].data()[(INPUT_FEATURES + c) * 8 + t],
                    m.data()[t * INPUT_FEATURES + c]
                );
            }
        }
        assert_eq!(&batch.targets[0].data()[2..4], w[4].targets(&np, 0).as_slice());

        let cfg = small_cfg();
        let net = ForecastNetwork::without_graph(cfg, 2).unwrap();
        let model = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(net.predict(&model.client_refs(), &model.server, &batch).is_ok());
        assert!(matches!(
            net.predict(&[&model.clients[0]], &model.server, &batch),
            Err(ModelError::Shape(_))
        ));
    }
}
