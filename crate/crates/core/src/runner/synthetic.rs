use chrono::{Duration, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::RunnerError;
use crate::dataio::{parse_timestamp, ChargingSession};

/// Generator settings for periodic, group-correlated station demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub stations: usize,
    pub days: usize,
    pub interval_minutes: u32,
    pub start: String,
    /// Consecutive stations sharing a demand profile and a common noise term.
    pub group_size: usize,
    /// Correlation of the noise within a group.
    pub rho: f64,
    /// Noise standard deviation `s` (kWh).
    pub noise: f64,
    /// Mean level of the first group; later groups add `level_step`.
    pub base_level: f64,
    pub level_step: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    /// Distance between neighbouring stations on the line.
    pub spacing: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            stations: 8,
            days: 60,
            interval_minutes: 30,
            start: "2018-01-01T00:00:00".into(),
            group_size: 2,
            rho: 0.8,
            noise: 1.0,
            base_level: 6.0,
            level_step: 2.0,
            daily_amplitude: 4.0,
            weekly_amplitude: 1.5,
            spacing: 1.0,
            seed: 0,
        }
    }
}

/// Generated sessions, coordinates and the noise-free mean per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub sessions: Vec<ChargingSession>,
    pub station_ids: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    /// `mean[station][slot]` before noise and clipping.
    pub mean: Vec<Vec<f64>>,
    pub noise: f64,
}

impl SyntheticData {
    /// Exact level-`q` quantile of the clipped demand at `(station, slot)`.
    pub fn true_quantile(&self, station: usize, slot: usize, q: f64) -> f64 {
        (self.mean[station][slot] + self.noise * normal_quantile(q)).max(0.0)
    }
}

/// Inverse standard normal CDF.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: &str| Err(RunnerError::ConfigInvalid(format!("synthetic: {m}")));
        if self.stations == 0 || self.days == 0 || self.group_size == 0 {
            return bad("stations, days and group_size must be positive");
        }
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 {
            return bad("interval must divide a day");
        }
        if !(0.0..=1.0).contains(&self.rho) || !(self.noise >= 0.0) || !(self.spacing > 0.0) {
            return bad("rho in [0,1], noise >= 0 and spacing > 0 required");
        }
        if parse_timestamp(&self.start).is_none() {
            return bad("start is not a timestamp");
        }
        Ok(())
    }

    fn start_time(&self) -> NaiveDateTime {
        parse_timestamp(&self.start).expect("validated")
    }
}

/// Seeded daily + weekly periodic demand. Stations in the same group share
/// the mean profile and a noise component weighted by `√ρ`; each slot's
/// demand becomes one session spanning that slot.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, RunnerError> {
    spec.validate()?;
    let slots_per_day = (1440 / spec.interval_minutes) as usize;
    let slots = spec.days * slots_per_day;
    let groups = spec.stations.div_ceil(spec.group_size);
    let t0 = spec.start_time();
    let step = Duration::minutes(spec.interval_minutes as i64);
    let tau = std::f64::consts::TAU;

    let mut mean = vec![vec![0.0; slots]; spec.stations];
    for (i, row) in mean.iter_mut().enumerate() {
        let g = (i / spec.group_size) as f64;
        let level = spec.base_level + spec.level_step * g;
        // Each group peaks at a different hour.
        let phase = tau * g / groups as f64 * 0.5;
        for (t, m) in row.iter_mut().enumerate() {
            let day_frac = (t % slots_per_day) as f64 / slots_per_day as f64;
            let day = (t / slots_per_day) as f64;
            let weekday = (t0 + step * t as i32)
                .format("%u")
                .to_string()
                .parse::<f64>()
                .unwrap_or(1.0);
            let daily = (tau * day_frac - phase).sin() + 0.5 * (2.0 * tau * day_frac - phase).sin();
            let weekly = if weekday >= 6.0 {
                -1.0
            } else {
                (tau * day / 7.0).cos() * 0.3
            };
            *m = level + spec.daily_amplitude * daily + spec.weekly_amplitude * weekly;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (a, b) = (spec.rho.sqrt(), (1.0 - spec.rho).sqrt());
    let mut demand = mean.clone();
    for t in 0..slots {
        let common: Vec<f64> = (0..groups).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (i, row) in demand.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = a * common[i / spec.group_size] + b * e;
            row[t] = (row[t] + spec.noise * z).max(0.0);
        }
    }

    let width = (spec.stations.max(2) - 1).to_string().len();
    let station_ids: Vec<String> = (0..spec.stations).map(|i| format!("S{i:0width$}")).collect();
    let mut sessions = Vec::with_capacity(spec.stations * slots);
    for (i, id) in station_ids.iter().enumerate() {
        for (t, v) in demand[i].iter().enumerate() {
            let start = t0 + step * t as i32;
            sessions.push(ChargingSession {
                station_id: id.clone(),
                start,
                end: start + step,
                energy_kwh: *v,
            });
        }
    }
    Ok(SyntheticData {
        sessions,
        coords: (0..spec.stations).map(|i| (i as f64 * spec.spacing, 0.0)).collect(),
        station_ids,
        mean,
        noise: spec.noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::discretize_sessions;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn normal_quantile_values() {
        assert!((normal_quantile(0.9) - 1.2815515655446004).abs() < 1e-12);
        assert!((normal_quantile(0.1) + 1.2815515655446004).abs() < 1e-12);
        assert!(normal_quantile(0.5).abs() < 1e-15);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.001) + 3.090232306167813).abs() < 1e-10);
    }

    #[test]
    fn perfect_correlation_without_noise_gives_identical_neighbours() {
        let spec = SyntheticSpec {
            rho: 1.0,
            noise: 0.0,
            days: 3,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let p = discretize_sessions(&d.sessions, 30).unwrap();
        assert_eq!(p.num_slots(), 3 * 48);
        assert_eq!(p.stations, d.station_ids);
        assert_eq!(p.demand[0], p.demand[1]);
        assert_ne!(p.demand[1], p.demand[2]);
        for (a, b) in p.demand[0].iter().zip(&d.mean[0]) {
            assert!((a - b.max(0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_correlation_residuals_are_uncorrelated() {
        let spec = SyntheticSpec {
            rho: 0.0,
            days: 209, // > 10,000 slots
            base_level: 50.0,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let p = discretize_sessions(&d.sessions, 30).unwrap();
        assert!(p.num_slots() >= 10_000);
        let resid = |i: usize| -> Vec<f64> { p.demand[i].iter().zip(&d.mean[i]).map(|(a, b)| a - b).collect() };
        assert!(corr(&resid(0), &resid(1)).abs() < 0.1);

        let correlated = generate_synthetic(&SyntheticSpec { rho: 0.8, ..spec }).unwrap();
        let r: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                correlated.sessions[i * p.num_slots()..(i + 1) * p.num_slots()]
                    .iter()
                    .zip(&correlated.mean[i])
                    .map(|(s, m)| s.energy_kwh - m)
                    .collect()
            })
            .collect();
        assert!((corr(&r[0], &r[1]) - 0.8).abs() < 0.05);
    }

    #[test]
    fn upper_quantile_is_mean_plus_z_sigma() {
        let spec = SyntheticSpec {
            noise: 2.0,
            days: 2,
            base_level: 40.0,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let q = d.true_quantile(3, 17, 0.9);
        assert!((q - (d.mean[3][17] + 1.2816 * 2.0)).abs() < 1e-3);
        // Empirical check over many draws of the same slot distribution.
        let mut hits = 0;
        let trials = 4000;
        for seed in 0..trials {
            let one = generate_synthetic(&SyntheticSpec {
                seed,
                days: 1,
                ..spec.clone()
            })
            .unwrap();
            if one.sessions[5].energy_kwh <= one.true_quantile(0, 5, 0.9) {
                hits += 1;
            }
        }
        assert!((hits as f64 / trials as f64 - 0.9).abs() < 0.02);
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(generate_synthetic(&SyntheticSpec {
            rho: 1.5,
            ..SyntheticSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            interval_minutes: 7,
            ..SyntheticSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            start: "yesterday".into(),
            ..SyntheticSpec::default()
        })
        .is_err());
    }
}
