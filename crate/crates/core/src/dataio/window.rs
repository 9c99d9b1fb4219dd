use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::calendar::{scale_calendar, CALENDAR_FEATURES};
use super::{DataError, DemandPanel};
use crate::gradtape::Tensor;

/// Demand plus the six calendar features.
pub const INPUT_FEATURES: usize = 1 + CALENDAR_FEATURES;

/// A sliding-window sample. Inputs cover slots `[start, start + h)` and
/// targets `[start + h, start + h + p)` for every station.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub start: usize,
    pub history: usize,
    pub horizon: usize,
}

impl WindowSample {
    pub fn input_range(&self) -> Range<usize> {
        self.start..self.start + self.history
    }

    pub fn target_range(&self) -> Range<usize> {
        self.start + self.history..self.start + self.history + self.horizon
    }

    /// `[h × F]` input matrix for one station.
    pub fn inputs(&self, panel: &NormalizedPanel, station: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.history * INPUT_FEATURES);
        for t in self.input_range() {
            data.push(panel.demand[station][t]);
            data.extend_from_slice(&panel.calendar[t]);
        }
        Tensor::new(vec![self.history, INPUT_FEATURES], data).expect("window shape")
    }

    /// Normalized targets for one station.
    pub fn targets(&self, panel: &NormalizedPanel, station: usize) -> Vec<f64> {
        panel.demand[station][self.target_range()].to_vec()
    }
}

/// All stride-1 windows over the panel: `T - h - p + 1` of them.
pub fn make_windows(panel: &DemandPanel, history: usize, horizon: usize) -> Result<Vec<WindowSample>, DataError> {
    windows_for_len(panel.num_slots(), history, horizon)
}

/// Stride-1 windows over a series of `num_slots` slots.
pub fn windows_for_len(num_slots: usize, history: usize, horizon: usize) -> Result<Vec<WindowSample>, DataError> {
    if history == 0 || horizon == 0 {
        return Err(DataError::BadWindow { history, horizon });
    }
    let need = history + horizon;
    if num_slots < need {
        return Err(DataError::SeriesTooShort {
            len: num_slots,
            needed: need,
        });
    }
    Ok((0..=num_slots - need)
        .map(|start| WindowSample {
            start,
            history,
            horizon,
        })
        .collect())
}

/// Chronological train/validation/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Contiguous split; validation and test sizes are `floor(n · ratio)` and the
/// remainder goes to training.
pub fn split_dataset<T: Clone>(samples: &[T], ratios: (f64, f64, f64)) -> Result<Split<T>, DataError> {
    if samples.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(a, b, c));
    }
    let n = samples.len();
    let n_val = (n as f64 * b).floor() as usize;
    let n_test = (n as f64 * c).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: samples[..n_train].to_vec(),
        val: samples[n_train..n_train + n_val].to_vec(),
        test: samples[n_train + n_val..].to_vec(),
    })
}

/// Per-station standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StationScaler {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn normalize(&self, station: usize, v: f64) -> f64 {
        (v - self.mean[station]) / self.std[station]
    }

    pub fn denormalize(&self, station: usize, z: f64) -> f64 {
        z * self.std[station] + self.mean[station]
    }
}

/// Model-ready panel: standardized demand and min-max scaled calendar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPanel {
    pub demand: Vec<Vec<f64>>,
    pub calendar: Vec<[f64; CALENDAR_FEATURES]>,
    pub scaler: StationScaler,
}

impl NormalizedPanel {
    pub fn num_stations(&self) -> usize {
        self.demand.len()
    }
}

/// Standardize each station with statistics from `train_range` only.
pub fn normalize_panel(panel: &DemandPanel, train_range: Range<usize>) -> Result<NormalizedPanel, DataError> {
    if train_range.is_empty() || train_range.end > panel.num_slots() {
        return Err(DataError::BadRange(train_range));
    }
    let n = train_range.len() as f64;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for row in &panel.demand {
        let w = &row[train_range.clone()];
        let m = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        mean.push(m);
        std.push(var.sqrt().max(StationScaler::STD_FLOOR));
    }
    let scaler = StationScaler { mean, std };
    let demand = panel
        .demand
        .iter()
        .enumerate()
        .map(|(s, row)| row.iter().map(|v| scaler.normalize(s, *v)).collect())
        .collect();
    let calendar = panel.calendar.iter().map(scale_calendar).collect();
    Ok(NormalizedPanel {
        demand,
        calendar,
        scaler,
    })
}

/// Slots touched by any training window: `[0, last_start + h + p)`.
pub fn train_slot_range(train: &[WindowSample]) -> Range<usize> {
    match train.last() {
        Some(w) => 0..w.target_range().end,
        None => 0..0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, NaiveDate};
    use proptest::prelude::*;

    fn panel(series: Vec<Vec<f64>>) -> DemandPanel {
        let t0 = NaiveDate::from_ymd_opt(2018, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        let t = series[0].len();
        let slot_times: Vec<_> = (0..t).map(|k| t0 + Duration::minutes(30 * k as i64)).collect();
        DemandPanel {
            stations: (0..series.len()).map(|i| format!("S{i}")).collect(),
            interval_minutes: 30,
            calendar: slot_times.iter().map(|t| super::super::calendar_features(*t)).collect(),
            slot_times,
            demand: series,
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(windows_for_len(40, 32, 6).unwrap().len(), 3);
        assert_eq!(windows_for_len(38, 32, 6).unwrap().len(), 1);
        assert!(matches!(
            windows_for_len(37, 32, 6),
            Err(DataError::SeriesTooShort { len: 37, needed: 38 })
        ));
        assert!(matches!(windows_for_len(37, 0, 6), Err(DataError::BadWindow { .. })));
    }

    #[test]
    fn windows_shift_by_one_slot() {
        let p = panel(vec![(0..20).map(f64::from).collect()]);
        let np = normalize_panel(&p, 0..20).unwrap();
        let w = make_windows(&p, 4, 2).unwrap();
        for pair in w.windows(2) {
            let a = pair[0].inputs(&np, 0);
            let b = pair[1].inputs(&np, 0);
            assert_eq!(&a.data()[INPUT_FEATURES..], &b.data()[..3 * INPUT_FEATURES]);
        }
        let first = w[0];
        assert_eq!(first.target_range(), 4..6);
        assert_eq!(first.targets(&np, 0), vec![np.demand[0][4], np.demand[0][5]]);
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(&(0..100).collect::<Vec<_>>(), (0.6, 0.2, 0.2)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        let s = split_dataset(&(0..5).collect::<Vec<_>>(), (0.6, 0.2, 0.2)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 1));
        let s = split_dataset(&[7], (0.6, 0.2, 0.2)).unwrap();
        assert_eq!((s.train, s.val, s.test), (vec![7], vec![], vec![]));
        assert!(matches!(
            split_dataset::<u8>(&[], (0.6, 0.2, 0.2)),
            Err(DataError::EmptyInput)
        ));
        assert!(matches!(
            split_dataset(&[1], (0.5, 0.2, 0.2)),
            Err(DataError::BadRatios(..))
        ));
    }

    #[test]
    fn normalization_examples() {
        let p = panel(
            vec![vec![3.0; 10], vec![1.0, 3.0, 1.0, 3.0, 4.0]]
                .into_iter()
                .map(|mut v| {
                    v.resize(10, 4.0);
                    v
                })
                .collect(),
        );
        let np = normalize_panel(&p, 0..4).unwrap();
        assert!(np.demand[0].iter().all(|v| *v == 0.0));
        // train mean 2, std 1 -> 4 maps to 2
        assert_eq!(np.scaler.mean[1], 2.0);
        assert_eq!(np.scaler.std[1], 1.0);
        assert_eq!(np.demand[1][4], 2.0);
        for (s, row) in p.demand.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                assert!((np.scaler.denormalize(s, np.demand[s][t]) - v).abs() < 1e-12);
            }
        }
        assert!(np.calendar.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(normalize_panel(&p, 3..3), Err(DataError::BadRange(_))));
    }

    proptest! {
        #[test]
        fn split_is_disjoint_cover_and_ordered(n in 1usize..500) {
            let w = windows_for_len(n + 7, 4, 4).unwrap();
            let s = split_dataset(&w, (0.6, 0.2, 0.2)).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), w.len());
            let joined: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            prop_assert_eq!(&joined, &w);
            if let (Some(last_train), Some(first_test)) = (s.train.last(), s.test.first()) {
                prop_assert!(first_test.target_range().start >= last_train.input_range().end);
            }
        }
    }
}
