use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use super::RunnerError;
use crate::dataio::INPUT_FEATURES;
use crate::federation::{FedConfig, Mode, PerClient};
use crate::model::ModelConfig;
use crate::threats::{AttackKind, AttackSpec};

/// Where station data comes from. Exactly one of `sessions` and `synthetic`
/// must be set; `coords` is required alongside `sessions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sessions: Option<PathBuf>,
    pub coords: Option<PathBuf>,
    pub interval_minutes: u32,
    /// Stations closer than this are spatial neighbours.
    pub distance_threshold: f64,
    /// Chronological train / validation / test window ratios.
    pub split: [f64; 3],
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sessions: None,
            coords: None,
            interval_minutes: 30,
            distance_threshold: 1.5,
            split: [0.6, 0.2, 0.2],
            synthetic: None,
        }
    }
}

/// Attack cells to run: one per entry of `malicious`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSweep {
    pub kind: AttackKind,
    pub malicious: Vec<usize>,
    pub scale: f64,
    pub epsilon: f64,
    /// Pick the cohort from a seeded shuffle instead of the lowest indices.
    pub permute: bool,
}

impl Default for AttackSweep {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            malicious: vec![0],
            scale: 10.0,
            epsilon: 0.01,
            permute: false,
        }
    }
}

impl AttackSweep {
    /// Template spec for this sweep, seeded by the experiment seed.
    pub fn template(&self, seed: u64) -> AttackSpec {
        AttackSpec {
            kind: self.kind,
            scale: self.scale,
            epsilon: self.epsilon,
            malicious: Vec::new(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives initialization, minibatches and attack noise. Overrides
    /// `federation.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub modes: Vec<Mode>,
    /// Run independent cells on the rayon pool.
    pub parallel: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FedConfig,
    pub attacks: AttackSweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            modes: vec![Mode::Pfgl, Mode::Fedavg, Mode::Local],
            parallel: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            federation: FedConfig::default(),
            attacks: AttackSweep::default(),
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub malicious: Option<usize>,
    pub attack: Option<AttackKind>,
    pub rounds: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn from_str_any(text: &str) -> Result<Self, RunnerError> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| RunnerError::ConfigInvalid(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| RunnerError::ConfigInvalid(e.to_string()))?
        };
        Ok(cfg)
    }

    /// Load and validate; relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_str_any(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.sessions, &mut cfg.data.coords].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.modes = vec![m];
        }
        if let Some(k) = o.malicious {
            self.attacks.malicious = vec![k];
        }
        if let Some(a) = o.attack {
            self.attacks.kind = a;
        }
        if let Some(r) = o.rounds {
            self.federation.rounds = r;
        }
        if let Some(out) = &o.out {
            self.output_dir.clone_from(out);
        }
    }

    /// Federation settings with the experiment seed applied.
    pub fn fed(&self) -> FedConfig {
        FedConfig {
            seed: self.seed,
            ..self.federation.clone()
        }
    }

    /// Checks that do not need the data; client-count checks happen once the
    /// panel is loaded.
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::ConfigInvalid(m));
        if self.modes.is_empty() {
            return bad("at least one mode is required".into());
        }
        let mut seen = HashSet::new();
        if let Some(m) = self.modes.iter().find(|m| !seen.insert(**m)) {
            return bad(format!("mode {m} listed twice"));
        }
        if self.attacks.malicious.is_empty() {
            return bad("attacks.malicious must list at least one count".into());
        }
        let mut seen = HashSet::new();
        if let Some(m) = self.attacks.malicious.iter().find(|m| !seen.insert(**m)) {
            return bad(format!("malicious count {m} listed twice"));
        }
        if self.attacks.kind == AttackKind::None && self.attacks.malicious.iter().any(|m| *m > 0) {
            return bad("malicious clients need an attack kind".into());
        }
        match (&self.data.sessions, &self.data.synthetic) {
            (Some(_), Some(_)) => return bad("set either data.sessions or data.synthetic, not both".into()),
            (None, None) => return bad("no data source: set data.sessions or data.synthetic".into()),
            (Some(_), None) if self.data.coords.is_none() => {
                return bad("data.coords is required with data.sessions".into())
            }
            _ => {}
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
            if s.interval_minutes != self.data.interval_minutes {
                return bad("synthetic.interval_minutes must equal data.interval_minutes".into());
            }
        }
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|r| !(*r > 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad(format!("split {:?} must be positive and sum to 1", self.data.split));
        }
        if !(self.data.distance_threshold > 0.0) {
            return bad("distance_threshold must be positive".into());
        }
        self.model
            .validate()
            .map_err(|e| RunnerError::ConfigInvalid(e.to_string()))?;
        if self.model.features != INPUT_FEATURES {
            return bad(format!("model.features must be {INPUT_FEATURES}"));
        }
        // Per-client lists are checked once the station count is known.
        let clients = match (&self.federation.beta, &self.federation.sigma) {
            (PerClient::Each(v), _) | (_, PerClient::Each(v)) => v.len().max(1),
            _ => 1,
        };
        self.fed()
            .validate(clients)
            .map_err(|e| RunnerError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
modes = ["local"]
[data.synthetic]
stations = 4
days = 10
"#;

    #[test]
    fn toml_and_json_parse_to_the_same_config() {
        let t = ExperimentConfig::from_str_any(MINIMAL).unwrap();
        let j = ExperimentConfig::from_str_any(
            r#"{"seed": 3, "modes": ["local"], "data": {"synthetic": {"stations": 4, "days": 10}}}"#,
        )
        .unwrap();
        assert_eq!(t, j);
        t.validate().unwrap();
        assert_eq!(t.federation.rounds, 100);
        assert_eq!(t.fed().seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "sede = 1\n[data.synthetic]\n",
            "[data.synthetic]\nrhoo = 0.3\n",
            "[federation]\nlearning_rate = 0.1\n[data.synthetic]\n",
            "[attacks]\nkind = \"flipping\"\nextra = 1\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_str_any(text), Err(RunnerError::ConfigInvalid(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        let ok = ExperimentConfig::from_str_any(MINIMAL).unwrap();
        let cases: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
            Box::new(|c| c.modes.clear()),
            Box::new(|c| c.modes = vec![Mode::Local, Mode::Local]),
            Box::new(|c| c.data.synthetic = None),
            Box::new(|c| c.data.sessions = Some("x.csv".into())),
            Box::new(|c| c.data.split = [0.5, 0.5, 0.5]),
            Box::new(|c| c.attacks.malicious = vec![1]),
            Box::new(|c| c.model.features = 3),
            Box::new(|c| c.federation.alpha = 2.0),
        ];
        for (k, f) in cases.iter().enumerate() {
            let mut c = ok.clone();
            f(&mut c);
            assert!(c.validate().is_err(), "case {k}");
        }
    }

    #[test]
    fn overrides_replace_fields() {
        let mut c = ExperimentConfig::from_str_any(MINIMAL).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            mode: Some(Mode::Pfgl),
            malicious: Some(2),
            attack: Some(AttackKind::Flipping),
            rounds: Some(5),
            out: Some("elsewhere".into()),
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.modes, vec![Mode::Pfgl]);
        assert_eq!(c.attacks.malicious, vec![2]);
        assert_eq!(c.federation.rounds, 5);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        c.validate().unwrap();
    }
}
