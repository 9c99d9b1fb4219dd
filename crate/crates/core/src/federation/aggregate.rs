use serde::{Deserialize, Serialize};

use super::config::PhiRule;
use super::FedError;

/// Pairwise (tree) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

fn norm(v: &[f64]) -> f64 {
    pairwise_sum(&v.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt()
}

/// `‖w_i − w_j‖ / ‖w_i‖`.
pub fn relative_distance(wi: &[f64], wj: &[f64]) -> Result<f64, FedError> {
    if wi.len() != wj.len() {
        return Err(FedError::LengthMismatch {
            expected: wi.len(),
            got: wj.len(),
        });
    }
    let r = norm(wi);
    if r == 0.0 {
        return Err(FedError::ZeroReferenceNorm);
    }
    let diff: Vec<f64> = wi.iter().zip(wj).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / r)
}

fn kernel(x: f64, phi: f64, rule: PhiRule) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    match rule {
        PhiRule::Squared => (-x * x / phi).exp(),
        PhiRule::Linear => (-x / phi).exp(),
    }
}

/// `exp(−x²/φ)` of the relative distance, exactly 1 for identical models.
pub fn similarity(wi: &[f64], wj: &[f64], phi: f64) -> Result<f64, FedError> {
    similarity_with(wi, wj, phi, PhiRule::Squared)
}

pub fn similarity_with(wi: &[f64], wj: &[f64], phi: f64, rule: PhiRule) -> Result<f64, FedError> {
    if !(phi > 0.0) {
        return Err(FedError::Config(format!("phi {phi} must be positive")));
    }
    Ok(kernel(relative_distance(wi, wj)?, phi, rule))
}

/// Bandwidth for which the nearest peer's similarity equals `sigma`.
/// Falls back to `f64::EPSILON` when a peer coincides with `wi`.
pub fn resolve_phi(wi: &[f64], others: &[&[f64]], sigma: f64, rule: PhiRule) -> Result<f64, FedError> {
    if others.is_empty() {
        return Err(FedError::NoPeers);
    }
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(FedError::Config(format!("sigma {sigma} must be in (0, 1)")));
    }
    let mut x_min = f64::INFINITY;
    for w in others {
        x_min = x_min.min(relative_distance(wi, w)?);
    }
    if x_min == 0.0 {
        return Ok(f64::EPSILON);
    }
    Ok(match rule {
        PhiRule::Squared => -x_min * x_min / sigma.ln(),
        PhiRule::Linear => -x_min / sigma.ln(),
    })
}

/// Inputs of one aggregation row besides the models.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowParams {
    pub sigma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub rule: PhiRule,
    pub gate_spatial: bool,
}

/// One row of the personalized aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationRow {
    /// Blended weights; a probability vector.
    pub lambda: Vec<f64>,
    /// Normalized attention channel after gating.
    pub attention: Vec<f64>,
    /// Raw similarities `S_{i,j}`.
    pub similarity: Vec<f64>,
    pub phi: f64,
    /// Peers whose similarity fell below the gate.
    pub gated: Vec<usize>,
    /// Every peer was gated and the row fell back to `e_i`.
    pub isolated: bool,
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let s = pairwise_sum(v);
    (s > 0.0).then(|| v.iter().map(|x| x / s).collect())
}

/// Attention-channel similarities gated at `tau`, normalized, and blended
/// with the row-normalized spatial adjacency `spatial_row`.
pub fn aggregation_weights(
    models: &[&[f64]],
    i: usize,
    spatial_row: &[f64],
    p: RowParams,
) -> Result<AggregationRow, FedError> {
    let n = models.len();
    if n < 2 {
        return Err(FedError::NoPeers);
    }
    if spatial_row.len() != n {
        return Err(FedError::LengthMismatch {
            expected: n,
            got: spatial_row.len(),
        });
    }
    let others: Vec<&[f64]> = (0..n).filter(|&j| j != i).map(|j| models[j]).collect();
    let phi = resolve_phi(models[i], &others, p.sigma, p.rule)?;
    let mut s = vec![0.0; n];
    for j in 0..n {
        s[j] = if j == i {
            1.0
        } else {
            kernel(relative_distance(models[i], models[j])?, phi, p.rule)
        };
    }
    let gated: Vec<usize> = (0..n).filter(|&j| j != i && s[j] < p.tau).collect();
    let e_i: Vec<f64> = (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
    if gated.len() == n - 1 {
        log::warn!("client {i}: every peer below the gate, aggregating locally");
        return Ok(AggregationRow {
            lambda: e_i.clone(),
            attention: e_i,
            similarity: s,
            phi,
            gated,
            isolated: true,
        });
    }
    let mut kept = s.clone();
    for &j in &gated {
        kept[j] = 0.0;
    }
    let attention = normalized(&kept).expect("self weight is 1");
    let mut spatial = spatial_row.to_vec();
    if spatial.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(FedError::Config(format!(
            "spatial row {spatial_row:?} must be nonnegative"
        )));
    }
    if p.gate_spatial {
        for &j in &gated {
            spatial[j] = 0.0;
        }
    }
    let spatial = normalized(&spatial).unwrap_or(e_i);
    let lambda = attention
        .iter()
        .zip(&spatial)
        .map(|(a, b)| p.alpha * a + (1.0 - p.alpha) * b)
        .collect();
    Ok(AggregationRow {
        lambda,
        attention,
        similarity: s,
        phi,
        gated,
        isolated: false,
    })
}

/// `Σ_j λ_j w_j`, summed pairwise over clients.
pub fn aggregate_personalized(models: &[&[f64]], lambda: &[f64]) -> Result<Vec<f64>, FedError> {
    if models.is_empty() || models.len() != lambda.len() {
        return Err(FedError::LengthMismatch {
            expected: models.len(),
            got: lambda.len(),
        });
    }
    let d = models[0].len();
    if let Some(bad) = models.iter().find(|m| m.len() != d) {
        return Err(FedError::LengthMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    // Expanded around the heaviest model so that identical inputs and
    // one-hot weights reproduce a model bit for bit.
    let r = (0..lambda.len()).fold(0, |best, j| if lambda[j] > lambda[best] { j } else { best });
    let total = pairwise_sum(lambda);
    let mut terms = vec![0.0; models.len()];
    Ok((0..d)
        .map(|k| {
            let base = models[r][k];
            for (j, m) in models.iter().enumerate() {
                terms[j] = lambda[j] * (m[k] - base);
            }
            total * base + pairwise_sum(&terms)
        })
        .collect())
}

/// Dataset-size weighted average.
pub fn fedavg_aggregate(models: &[&[f64]], sizes: &[usize]) -> Result<Vec<f64>, FedError> {
    let total: usize = sizes.iter().sum();
    if sizes.contains(&0) || total == 0 {
        return Err(FedError::Config("dataset sizes must be positive".into()));
    }
    let p: Vec<f64> = sizes.iter().map(|s| *s as f64 / total as f64).collect();
    aggregate_personalized(models, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: RowParams = RowParams {
        sigma: 0.8,
        tau: 0.08,
        alpha: 1.0,
        rule: PhiRule::Squared,
        gate_spatial: true,
    };

    #[test]
    fn similarity_examples() {
        let wi = [3.0, 4.0];
        assert_eq!(similarity(&wi, &wi, 0.5).unwrap(), 1.0);
        // x_min = 0.1
        let near = [3.3, 4.4];
        let far = [3.6, 4.8];
        let phi = resolve_phi(&wi, &[&near], 0.8, PhiRule::Squared).unwrap();
        assert!((phi - (-0.01 / 0.8f64.ln())).abs() < 1e-15);
        assert!((phi - 0.044814).abs() < 1e-6);
        assert!((similarity(&wi, &near, phi).unwrap() - 0.8).abs() < 1e-12);
        assert!((similarity(&wi, &far, phi).unwrap() - 0.4096).abs() < 1e-12);

        let lin = resolve_phi(&wi, &[&near], 0.8, PhiRule::Linear).unwrap();
        assert!((similarity_with(&wi, &near, lin, PhiRule::Linear).unwrap() - 0.8).abs() < 1e-12);

        assert_eq!(
            resolve_phi(&wi, &[&wi, &near], 0.8, PhiRule::Squared).unwrap(),
            f64::EPSILON
        );
        let peers: Vec<[f64; 2]> = [0.3, 0.1, 0.5]
            .iter()
            .map(|x| [3.0 * (1.0 + x), 4.0 * (1.0 + x)])
            .collect();
        let refs: Vec<&[f64]> = peers.iter().map(|p| p.as_slice()).collect();
        let phi = resolve_phi(&wi, &refs, 0.8, PhiRule::Squared).unwrap();
        assert!((phi - (-0.01 / 0.8f64.ln())).abs() < 1e-12);

        assert!(matches!(
            similarity(&[0.0, 0.0], &wi, 1.0),
            Err(FedError::ZeroReferenceNorm)
        ));
        assert!(matches!(
            resolve_phi(&wi, &[], 0.8, PhiRule::Squared),
            Err(FedError::NoPeers)
        ));
    }

    #[test]
    fn weight_examples() {
        // S row {1, 0.8, gated}: peer 1 at x_min, peer 2 far away.
        let w0 = [1.0, 0.0];
        let w1 = [1.0, 0.1];
        let w2 = [-1.0, 0.0];
        let models: Vec<&[f64]> = vec![&w0, &w1, &w2];
        let row = aggregation_weights(&models, 0, &[1.0, 1.0, 1.0], P).unwrap();
        assert_eq!(row.gated, vec![2]);
        let want = [1.0 / 1.8, 0.8 / 1.8, 0.0];
        for (a, b) in row.lambda.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }

        let spatial = [1.0, 0.0, 1.0];
        let row = aggregation_weights(
            &models,
            0,
            &spatial,
            RowParams {
                alpha: 0.0,
                gate_spatial: false,
                ..P
            },
        )
        .unwrap();
        assert_eq!(row.lambda, vec![0.5, 0.0, 0.5]);

        // α = 0.8, S_norm = (0.5, 0.5, 0), spatial uniform.
        let w1b = [1.0, 0.0];
        let models: Vec<&[f64]> = vec![&w0, &w1b, &w2];
        let row = aggregation_weights(
            &models,
            0,
            &[1.0; 3],
            RowParams {
                alpha: 0.8,
                gate_spatial: false,
                ..P
            },
        )
        .unwrap();
        let want = [0.4 + 0.2 / 3.0, 0.4 + 0.2 / 3.0, 0.2 / 3.0];
        for (a, b) in row.lambda.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((row.lambda[0] - 0.4667).abs() < 1e-4);

        // Gating the spatial channel removes the gated peer entirely.
        let row = aggregation_weights(&models, 0, &[1.0; 3], RowParams { alpha: 0.8, ..P }).unwrap();
        assert_eq!(row.lambda[2], 0.0);
    }

    #[test]
    fn all_gated_falls_back_to_self() {
        let w0 = [1.0];
        let w1 = [-1.0];
        let models: Vec<&[f64]> = vec![&w0, &w1];
        let row = aggregation_weights(&models, 0, &[1.0, 1.0], RowParams { tau: 0.9, ..P }).unwrap();
        assert!(row.isolated);
        assert_eq!(row.lambda, vec![1.0, 0.0]);
    }

    #[test]
    fn aggregate_examples() {
        let a = [1.0, 1.0];
        let b = [3.0, 3.0];
        assert_eq!(aggregate_personalized(&[&a, &b], &[0.5, 0.5]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(aggregate_personalized(&[&a, &b], &[0.0, 1.0]).unwrap(), b.to_vec());
        assert!(aggregate_personalized(&[&a, &b[..1]], &[0.5, 0.5]).is_err());
        assert!(aggregate_personalized(&[&a], &[0.5, 0.5]).is_err());

        assert_eq!(fedavg_aggregate(&[&[0.0], &[2.0]], &[5, 5]).unwrap(), vec![1.0]);
        assert_eq!(fedavg_aggregate(&[&[0.0], &[4.0]], &[1, 3]).unwrap(), vec![3.0]);
        let m: Vec<&[f64]> = vec![&[1.0, -2.0], &[0.5, 7.0], &[3.0, 3.0]];
        assert_eq!(
            fedavg_aggregate(&m, &[2, 3, 5]).unwrap(),
            aggregate_personalized(&m, &[0.2, 0.3, 0.5]).unwrap()
        );
        assert!(fedavg_aggregate(&m, &[2, 0, 5]).is_err());
    }

    #[test]
    fn random_four_client_sum_matches_direct_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let models: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..50).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut lam: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = lam.iter().sum();
        lam.iter_mut().for_each(|v| *v /= s);
        let refs: Vec<&[f64]> = models.iter().map(Vec::as_slice).collect();
        let got = aggregate_personalized(&refs, &lam).unwrap();
        for k in 0..50 {
            let mut want = 0.0;
            for j in 0..4 {
                want += lam[j] * models[j][k];
            }
            assert!((got[k] - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rows_are_distributions(
            seed in 0u64..500,
            n in 2usize..7,
            sigma in 0.05f64..0.99,
            alpha in 0.0f64..=1.0,
            gate_spatial in proptest::bool::ANY,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let refs: Vec<&[f64]> = models.iter().map(Vec::as_slice).collect();
            let spatial: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let p = RowParams { sigma, tau: 0.1 * sigma, alpha, rule: PhiRule::Squared, gate_spatial };
            for i in 0..n {
                let row = aggregation_weights(&refs, i, &spatial, p).unwrap();
                prop_assert!(row.lambda.iter().all(|v| *v >= 0.0));
                prop_assert!((row.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for &j in &row.gated {
                    prop_assert_eq!(row.attention[j], 0.0);
                    prop_assert!(row.similarity[j] < p.tau);
                }
            }
        }

        #[test]
        fn scaled_attacker_similarity_decreases(c1 in 1.0f64..50.0, dc in 0.01f64..50.0) {
            let wi = [0.3, -1.2, 2.0];
            let a: Vec<f64> = wi.iter().map(|v| v * c1).collect();
            let b: Vec<f64> = wi.iter().map(|v| v * (c1 + dc)).collect();
            prop_assert!(similarity(&wi, &b, 0.7).unwrap() <= similarity(&wi, &a, 0.7).unwrap());
        }

        #[test]
        fn identical_clients_aggregate_to_common_model(
            w in proptest::collection::vec(-10.0f64..10.0, 1..20),
            n in 2usize..6,
        ) {
            prop_assume!(w.iter().any(|v| *v != 0.0));
            let refs: Vec<&[f64]> = vec![w.as_slice(); n];
            let row = aggregation_weights(&refs, 0, &vec![1.0; n], P).unwrap();
            prop_assert_eq!(aggregate_personalized(&refs, &row.lambda).unwrap(), w);
        }
    }

    #[test]
    fn equal_distances_give_uniform_rows() {
        // Vertices of a regular simplex around a common center: all pairwise distances equal.
        let n = 5;
        let center = 10.0;
        let models: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|k| center + if k == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let refs: Vec<&[f64]> = models.iter().map(Vec::as_slice).collect();
        let p = RowParams {
            sigma: 1.0 - 1e-9,
            tau: 0.0,
            alpha: 1.0,
            ..P
        };
        for i in 0..n {
            let row = aggregation_weights(&refs, i, &vec![1.0; n], p).unwrap();
            assert!(
                row.lambda.iter().all(|v| (v - 1.0 / n as f64).abs() < 1e-6),
                "{:?}",
                row.lambda
            );
        }
    }
}
