use serde::{Deserialize, Serialize};

use super::FedError;

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Personalized attention aggregation with the shared graph block.
    Pfgl,
    /// One global encoder/decoder averaged by dataset size.
    Fedavg,
    /// Per-station training, nothing exchanged.
    Local,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pfgl" => Ok(Self::Pfgl),
            "fedavg" => Ok(Self::Fedavg),
            "local" => Ok(Self::Local),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pfgl => "pfgl",
            Self::Fedavg => "fedavg",
            Self::Local => "local",
        })
    }
}

/// How the similarity kernel scales with relative distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiRule {
    /// `exp(-x²/φ)` with `φ = -x_min² / ln σ`.
    #[default]
    Squared,
    /// `exp(-x/φ)` with `φ = -x_min / ln σ`.
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η = 1/√T` for all rounds.
    InvSqrtRounds,
}

/// One value shared by all clients or one per client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClient {
    All(f64),
    Each(Vec<f64>),
}

impl PerClient {
    pub fn get(&self, i: usize) -> f64 {
        match self {
            Self::All(v) => *v,
            Self::Each(v) => v[i],
        }
    }

    fn check(&self, name: &str, n: usize, ok: impl Fn(f64) -> bool) -> Result<(), FedError> {
        let vals: Vec<f64> = match self {
            Self::All(v) => vec![*v],
            Self::Each(v) if v.len() == n => v.clone(),
            Self::Each(v) => {
                return Err(FedError::Config(format!(
                    "{name} has {} entries for {n} clients",
                    v.len()
                )));
            }
        };
        match vals.into_iter().find(|v| !ok(*v)) {
            Some(bad) => Err(FedError::Config(format!("{name} value {bad} out of range"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    /// Local iterations per round.
    pub local_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Proximal coefficient.
    pub beta: PerClient,
    /// Credit parameter in (0, 1).
    pub sigma: PerClient,
    /// Weight of the attention channel against the spatial channel.
    pub alpha: f64,
    /// Similarities below this are zeroed; defaults to `0.1 σ_i`.
    pub tau: Option<f64>,
    pub phi_rule: PhiRule,
    /// Also drop gated clients from the spatial channel.
    pub gate_spatial: bool,
    /// Adam step size for the shared graph block; defaults to `lr`.
    pub server_lr: Option<f64>,
    /// Epochs of local fine-tuning after the last round (personalized mode only).
    pub fine_tune_epochs: usize,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_iters: 10,
            batch_size: 32,
            lr: 5e-4,
            lr_schedule: LrSchedule::Constant,
            beta: PerClient::All(1.0),
            sigma: PerClient::All(0.8),
            alpha: 0.8,
            tau: None,
            phi_rule: PhiRule::Squared,
            gate_spatial: true,
            server_lr: None,
            fine_tune_epochs: 1,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self, clients: usize) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::Config(m));
        if clients == 0 {
            return bad("at least one client is required".into());
        }
        if self.rounds == 0 || self.local_iters == 0 || self.batch_size == 0 {
            return bad("rounds, local_iters and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if let Some(s) = self.server_lr {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("server_lr {s} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} must be in [0, 1]", self.alpha));
        }
        if let Some(t) = self.tau {
            if !(0.0..1.0).contains(&t) {
                return bad(format!("tau {t} must be in [0, 1)"));
            }
        }
        self.beta.check("beta", clients, |b| b >= 0.0 && b.is_finite())?;
        self.sigma.check("sigma", clients, |s| s > 0.0 && s < 1.0)
    }

    /// Local step size in `round`.
    pub fn eta(&self) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InvSqrtRounds => 1.0 / (self.rounds as f64).sqrt(),
        }
    }

    pub fn tau_for(&self, i: usize) -> f64 {
        self.tau.unwrap_or(0.1 * self.sigma.get(i))
    }

    pub fn server_lr(&self) -> f64 {
        self.server_lr.unwrap_or(self.lr)
    }
}
