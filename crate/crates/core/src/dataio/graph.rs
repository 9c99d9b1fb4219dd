use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Distance-thresholded station adjacency with self-connections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    pub adjacency: Vec<Vec<f64>>,
    pub threshold: f64,
    pub coords: Vec<(f64, f64)>,
}

impl SpatialGraph {
    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    /// Row `i` scaled to sum to one.
    pub fn normalized_row(&self, i: usize) -> Vec<f64> {
        let row = &self.adjacency[i];
        let s: f64 = row.iter().sum();
        row.iter().map(|v| v / s).collect()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if !seen[v] && self.adjacency[u][v] > 0.0 {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// `λ̂_ij = 1` iff the Euclidean distance is at most `threshold`; `λ̂_ii = 1`.
pub fn build_spatial_graph(coords: &[(f64, f64)], threshold: f64) -> Result<SpatialGraph, DataError> {
    if coords.is_empty() {
        return Err(DataError::EmptyInput);
    }
    if !(threshold > 0.0) {
        return Err(DataError::BadThreshold(threshold));
    }
    let n = coords.len();
    let mut adjacency = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d = ((coords[i].0 - coords[j].0).powi(2) + (coords[i].1 - coords[j].1).powi(2)).sqrt();
            if i != j && d == 0.0 {
                log::warn!("stations {i} and {j} share coordinates");
            }
            if i == j || d <= threshold {
                adjacency[i][j] = 1.0;
            }
        }
    }
    Ok(SpatialGraph {
        adjacency,
        threshold,
        coords: coords.to_vec(),
    })
}

#[derive(Deserialize)]
struct CoordRow {
    station_id: String,
    x: f64,
    y: f64,
}

/// Read `station_id,x,y` and return coordinates in the order of `stations`.
pub fn read_coords_csv<R: Read>(r: R, stations: &[String]) -> Result<Vec<(f64, f64)>, DataError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut by_id = HashMap::new();
    for rec in rdr.deserialize::<CoordRow>() {
        let row = rec?;
        by_id.insert(row.station_id, (row.x, row.y));
    }
    stations
        .iter()
        .map(|s| {
            by_id
                .get(s)
                .copied()
                .ok_or_else(|| DataError::MissingStation(s.clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pairwise-distance oracle, independent of the builder's loop.
    fn oracle(coords: &[(f64, f64)], thr: f64) -> Vec<Vec<f64>> {
        coords
            .iter()
            .enumerate()
            .map(|(i, a)| {
                coords
                    .iter()
                    .enumerate()
                    .map(|(j, b)| {
                        let d = (a.0 - b.0).hypot(a.1 - b.1);
                        if i == j || d <= thr {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn two_station_cases() {
        let g = build_spatial_graph(&[(0.0, 0.0), (1.0, 0.0)], 2.0).unwrap();
        assert_eq!(g.adjacency, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let g = build_spatial_graph(&[(0.0, 0.0), (3.0, 0.0)], 2.0).unwrap();
        assert_eq!(g.adjacency, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn collinear_chain() {
        let c = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)];
        let g = build_spatial_graph(&c, 1.0).unwrap();
        assert_eq!(g.adjacency, oracle(&c, 1.0));
        assert_eq!(g.adjacency[0][2], 0.0);
        assert!(g.is_connected());
    }

    #[test]
    fn duplicates_allowed_and_symmetric() {
        let c = [(1.0, 1.0), (1.0, 1.0), (5.0, -2.0), (4.0, -1.5)];
        let g = build_spatial_graph(&c, 1.2).unwrap();
        assert_eq!(g.adjacency, oracle(&c, 1.2));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(g.adjacency[i][j], g.adjacency[j][i]);
            }
        }
        assert!(!g.is_connected());
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(matches!(
            build_spatial_graph(&[(0.0, 0.0)], 0.0),
            Err(DataError::BadThreshold(_))
        ));
        assert!(matches!(build_spatial_graph(&[], 1.0), Err(DataError::EmptyInput)));
    }

    #[test]
    fn coords_follow_station_order() {
        let text = "station_id,x,y\nB,1,2\nA,3,4\n";
        let c = read_coords_csv(text.as_bytes(), &["A".into(), "B".into()]).unwrap();
        assert_eq!(c, vec![(3.0, 4.0), (1.0, 2.0)]);
        assert!(matches!(
            read_coords_csv(text.as_bytes(), &["C".into()]),
            Err(DataError::MissingStation(_))
        ));
    }
}
