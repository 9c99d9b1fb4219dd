//! Model-poisoning transforms applied to uploaded client vectors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ThreatError {
    #[error("malicious index {index} out of range for {clients} clients")]
    IndexOutOfRange { index: usize, clients: usize },
    #[error("{requested} malicious clients requested but only {clients} exist")]
    TooManyMalicious { requested: usize, clients: usize },
    #[error("gaussian attack needs epsilon > 0, got {0}")]
    BadEpsilon(f64),
    #[error("scaling attack needs a nonzero finite scale, got {0}")]
    BadScale(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[default]
    None,
    Flipping,
    Scaling,
    Gaussian,
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "flipping" => Ok(Self::Flipping),
            "scaling" => Ok(Self::Scaling),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(format!("unknown attack `{other}`")),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Flipping => "flipping",
            Self::Scaling => "scaling",
            Self::Gaussian => "gaussian",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Multiplier for `scaling`.
    pub scale: f64,
    /// Variance of the replacement draw for `gaussian`.
    pub epsilon: f64,
    /// Indices of attacking clients.
    pub malicious: Vec<usize>,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            scale: 10.0,
            epsilon: 0.01,
            malicious: Vec::new(),
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, clients: usize) -> Result<(), ThreatError> {
        if let Some(&index) = self.malicious.iter().find(|&&i| i >= clients) {
            return Err(ThreatError::IndexOutOfRange { index, clients });
        }
        match self.kind {
            AttackKind::Gaussian if !(self.epsilon > 0.0) || !self.epsilon.is_finite() => {
                Err(ThreatError::BadEpsilon(self.epsilon))
            }
            AttackKind::Scaling if self.scale == 0.0 || !self.scale.is_finite() => {
                Err(ThreatError::BadScale(self.scale))
            }
            _ => Ok(()),
        }
    }

    /// Whether client `i` corrupts its upload.
    pub fn attacks(&self, i: usize) -> bool {
        self.kind != AttackKind::None && self.malicious.contains(&i)
    }
}

/// Transform `w` as `spec` prescribes, drawing Gaussian replacements from the
/// stream for `(spec.seed, round, client)`.
pub fn apply_attack_at(w: &[f64], spec: &AttackSpec, round: usize, client: usize) -> Vec<f64> {
    match spec.kind {
        AttackKind::None => w.to_vec(),
        AttackKind::Flipping => w.iter().map(|v| -v).collect(),
        AttackKind::Scaling => w.iter().map(|v| spec.scale * v).collect(),
        AttackKind::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((round as u64) << 32) | client as u64);
            let normal = Normal::new(0.0, spec.epsilon.sqrt()).expect("validated epsilon");
            (0..w.len()).map(|_| normal.sample(&mut rng)).collect()
        }
    }
}

pub fn apply_attack(w: &[f64], spec: &AttackSpec) -> Vec<f64> {
    apply_attack_at(w, spec, 0, 0)
}

/// Attack specs for rounds `0..rounds` with `num_malicious` attackers.
///
/// The cohort is the lowest indices unless `permute` is set, in which case
/// it is the first `num_malicious` of a seeded shuffle.
pub fn schedule_attacks(
    template: &AttackSpec,
    clients: usize,
    num_malicious: usize,
    rounds: usize,
    permute: bool,
) -> Result<Vec<AttackSpec>, ThreatError> {
    if num_malicious > clients {
        return Err(ThreatError::TooManyMalicious {
            requested: num_malicious,
            clients,
        });
    }
    let mut order: Vec<usize> = (0..clients).collect();
    if permute {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(template.seed));
    }
    let mut cohort = order[..num_malicious].to_vec();
    cohort.sort_unstable();
    let spec = AttackSpec {
        kind: if num_malicious == 0 {
            AttackKind::None
        } else {
            template.kind
        },
        malicious: if num_malicious == 0 { Vec::new() } else { cohort },
        ..template.clone()
    };
    spec.validate(clients)?;
    Ok(vec![spec; rounds])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: AttackKind) -> AttackSpec {
        AttackSpec {
            kind,
            malicious: vec![0],
            ..AttackSpec::default()
        }
    }

    #[test]
    fn attack_examples() {
        assert_eq!(apply_attack(&[1.0, -2.0], &spec(AttackKind::Flipping)), vec![-1.0, 2.0]);
        assert_eq!(
            apply_attack(&[1.0, -2.0], &spec(AttackKind::Scaling)),
            vec![10.0, -20.0]
        );
        assert_eq!(apply_attack(&[1.0, -2.0], &spec(AttackKind::None)), vec![1.0, -2.0]);

        let w = vec![5.0; 10_000];
        let g = apply_attack(&w, &spec(AttackKind::Gaussian));
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (g.len() - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 0.01).abs() < 0.002, "variance {var}");
        assert_eq!(g, apply_attack(&w, &spec(AttackKind::Gaussian)));
        assert_ne!(g, apply_attack_at(&w, &spec(AttackKind::Gaussian), 1, 0));
        assert_ne!(g, apply_attack_at(&w, &spec(AttackKind::Gaussian), 0, 1));
    }

    #[test]
    fn schedule_examples() {
        let t = spec(AttackKind::Flipping);
        let none = schedule_attacks(&t, 8, 0, 5, false).unwrap();
        assert_eq!(none.len(), 5);
        assert!(none.iter().all(|s| (0..8).all(|i| !s.attacks(i))));

        let one = schedule_attacks(&t, 8, 1, 5, false).unwrap();
        assert!(one
            .iter()
            .all(|s| (0..8).filter(|&i| s.attacks(i)).count() == 1 && s.attacks(0)));

        let all = schedule_attacks(&t, 8, 8, 3, false).unwrap();
        assert!(all.iter().all(|s| (0..8).all(|i| s.attacks(i))));

        let perm = schedule_attacks(&AttackSpec { seed: 9, ..t.clone() }, 8, 3, 1, true).unwrap();
        assert_eq!(perm[0].malicious.len(), 3);
        assert_eq!(
            perm,
            schedule_attacks(&AttackSpec { seed: 9, ..t.clone() }, 8, 3, 1, true).unwrap()
        );

        assert!(matches!(
            schedule_attacks(&t, 8, 9, 1, false),
            Err(ThreatError::TooManyMalicious { .. })
        ));
        assert!(matches!(
            AttackSpec {
                malicious: vec![8],
                ..t.clone()
            }
            .validate(8),
            Err(ThreatError::IndexOutOfRange { index: 8, clients: 8 })
        ));
        assert!(AttackSpec {
            epsilon: 0.0,
            ..spec(AttackKind::Gaussian)
        }
        .validate(2)
        .is_err());
        assert!(AttackSpec {
            scale: 0.0,
            ..spec(AttackKind::Scaling)
        }
        .validate(2)
        .is_err());
    }

    proptest! {
        #[test]
        fn flipping_is_an_involution_and_lengths_hold(w in proptest::collection::vec(-1e6f64..1e6, 0..64)) {
            let f = spec(AttackKind::Flipping);
            prop_assert_eq!(apply_attack(&apply_attack(&w, &f), &f), w.clone());
            for k in [AttackKind::None, AttackKind::Flipping, AttackKind::Scaling, AttackKind::Gaussian] {
                prop_assert_eq!(apply_attack(&w, &spec(k)).len(), w.len());
            }
        }
    }
}
