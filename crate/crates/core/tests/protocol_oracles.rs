//! Reference-oracle checks for the FA aggregation rule and the consensus
//! protocol's conservation and contraction behavior.

use flcarbon_core::compression::CompressionPolicy;
use flcarbon_core::model::{
    generate_synthetic_dataset, partition_iid, Dataset, DatasetPartition, MlpArchitecture,
    OptimizerConfig,
};
use flcarbon_core::protocol_cfa::{
    cfa_apply_round, cfa_local_step, CfaDeviceState, MixingMatrix, Topology,
};
use flcarbon_core::protocol_fa::{fa_device_round, fa_server_aggregate, FaDeviceState, FaServerState};
use flcarbon_core::rng::{self, stream, StreamKind};
use flcarbon_core::ParameterVector;

fn arch() -> MlpArchitecture {
    MlpArchitecture { input_dim: 3, hidden_dims: vec![], n_classes: 2 }
}

fn sgd(lr: f64) -> OptimizerConfig {
    OptimizerConfig { learning_rate: lr, momentum: 0.0, batch_size: 8, local_epochs: 1 }
}

fn partitions(k: usize, seed: u64) -> Vec<DatasetPartition> {
    let mut data_rng = stream(seed, StreamKind::Dataset, 0, 0);
    let (train, _) =
        generate_synthetic_dataset(2, 3, 5 * k, 2.0, 0.5, &mut data_rng).unwrap();
    let mut part_rng = stream(seed, StreamKind::Partition, 0, 0);
    partition_iid(&train, k, &mut part_rng).unwrap()
}

fn dummy_partition(owner: usize) -> DatasetPartition {
    DatasetPartition {
        owner,
        data: Dataset {
            features: vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            labels: vec![0, 1],
            input_dim: 3,
            n_classes: 2,
        },
    }
}

fn random_params(n: usize, seed: u64) -> ParameterVector {
    let mut r = stream(seed, StreamKind::Init, 1, 0);
    ParameterVector::new((0..n).map(|_| rng::next_gaussian(&mut r)).collect()).unwrap()
}

/// With identity payloads the aggregate must equal the size-weighted mean of
/// the local half-steps exactly (up to summation-order rounding).
#[test]
fn fedavg_matches_weighted_mean_oracle() {
    let arch = arch();
    let parts = partitions(5, 21);
    let mut init_rng = stream(21, StreamKind::Init, 0, 0);
    let initial = arch.init_params(&mut init_rng);
    let policy = CompressionPolicy::identity();
    let opt = sgd(0.05);

    let mut server = FaServerState::with_size_weights(initial.clone(), &parts);
    let sigmas = server.aggregation_weights.clone();
    let devices: Vec<FaDeviceState> = parts
        .into_iter()
        .map(|partition| FaDeviceState {
            device_id: partition.owner,
            weights: initial.clone(),
            partition,
        })
        .collect();

    let mut updates = Vec::new();
    let mut halves = Vec::new();
    for d in &devices {
        let mut orng = stream(21, StreamKind::Optimizer, d.device_id as u64, 0);
        let mut qrng = stream(21, StreamKind::Quantizer, d.device_id as u64, 0);
        let (u, half) = fa_device_round(d, &arch, &policy, &opt, &mut orng, &mut qrng).unwrap();
        updates.push(u);
        halves.push(half);
    }
    fa_server_aggregate(&mut server, &updates).unwrap();

    let mut expected = ParameterVector::zeros(arch.n_params());
    for (half, &sigma) in halves.iter().zip(&sigmas) {
        expected.add_scaled(half, sigma).unwrap();
    }
    let err = server.global.sub(&expected).unwrap().linf_norm();
    assert!(err < 1e-12, "aggregate off by {err}");
}

/// Aggregating a permutation of (update, weight) pairs lands on the same
/// model: no device is privileged by position.
#[test]
fn fedavg_aggregation_is_permutation_invariant() {
    let arch = arch();
    let parts = partitions(4, 33);
    let mut init_rng = stream(33, StreamKind::Init, 0, 0);
    let initial = arch.init_params(&mut init_rng);
    let policy = CompressionPolicy { delta: 0.5, n_bits: 8, n_bits_clear: 32, identity: false };
    let opt = sgd(0.05);

    let mut server = FaServerState::with_size_weights(initial.clone(), &parts);
    let devices: Vec<FaDeviceState> = parts
        .into_iter()
        .map(|partition| FaDeviceState {
            device_id: partition.owner,
            weights: initial.clone(),
            partition,
        })
        .collect();
    let mut updates = Vec::new();
    for d in &devices {
        let mut orng = stream(33, StreamKind::Optimizer, d.device_id as u64, 0);
        let mut qrng = stream(33, StreamKind::Quantizer, d.device_id as u64, 0);
        updates.push(fa_device_round(d, &arch, &policy, &opt, &mut orng, &mut qrng).unwrap().0);
    }

    let mut permuted = server.clone();
    let order = [2usize, 0, 3, 1];
    permuted.aggregation_weights = order.iter().map(|&i| server.aggregation_weights[i]).collect();
    let shuffled: Vec<_> = order.iter().map(|&i| updates[i].clone()).collect();

    fa_server_aggregate(&mut server, &updates).unwrap();
    fa_server_aggregate(&mut permuted, &shuffled).unwrap();
    let err = server.global.sub(&permuted.global).unwrap().linf_norm();
    assert!(err < 1e-12, "permutation changed the aggregate by {err}");
}

/// The column sums of the mixing matrix are one, so the device-mean model is
/// conserved under pure consensus (zero learning rate), payloads quantized
/// or not.
#[test]
fn cfa_preserves_mean_over_many_rounds() {
    let arch = arch();
    let n = arch.n_params();
    let topology = Topology::ring(10).unwrap();
    let mixing = MixingMatrix::metropolis(&topology).unwrap();
    let policy = CompressionPolicy { delta: 0.4, n_bits: 4, n_bits_clear: 32, identity: false };
    let opt = sgd(0.0);

    let mut states: Vec<CfaDeviceState> = (0..10)
        .map(|d| CfaDeviceState::new(d, random_params(n, d as u64), dummy_partition(d)))
        .collect();
    let mut initial_mean = ParameterVector::zeros(n);
    for s in &states {
        initial_mean.add_scaled(&s.weights, 0.1).unwrap();
    }

    for round in 0..200u64 {
        let mut updates = Vec::new();
        let mut halves = Vec::new();
        for s in &states {
            let mut orng = stream(55, StreamKind::Optimizer, s.device_id as u64, round);
            let mut qrng = stream(55, StreamKind::Quantizer, s.device_id as u64, round);
            let (u, half) = cfa_local_step(s, &arch, &policy, &opt, &mut orng, &mut qrng).unwrap();
            updates.push(u);
            halves.push(half);
        }
        cfa_apply_round(&mut states, &halves, &updates, &topology, &mixing, 0.05).unwrap();
    }

    let mut mean = ParameterVector::zeros(n);
    for s in &states {
        mean.add_scaled(&s.weights, 0.1).unwrap();
    }
    let drift = mean.sub(&initial_mean).unwrap().linf_norm();
    assert!(drift < 1e-9, "mean drifted by {drift}");
}

/// With exact payloads, zero learning rate, and gamma = 1 the protocol is a
/// plain gossip iteration, which must contract to consensus on a connected
/// ring.
#[test]
fn cfa_contracts_to_consensus_with_identity_payloads() {
    let arch = arch();
    let n = arch.n_params();
    let topology = Topology::ring(10).unwrap();
    let mixing = MixingMatrix::metropolis(&topology).unwrap();
    let policy = CompressionPolicy::identity();
    let opt = sgd(0.0);

    let mut states: Vec<CfaDeviceState> = (0..10)
        .map(|d| CfaDeviceState::new(d, random_params(n, 100 + d as u64), dummy_partition(d)))
        .collect();
    let initial_spread = spread(&states);
    assert!(initial_spread > 0.1, "degenerate start");

    for round in 0..500u64 {
        let mut updates = Vec::new();
        let mut halves = Vec::new();
        for s in &states {
            let mut orng = stream(77, StreamKind::Optimizer, s.device_id as u64, round);
            let mut qrng = stream(77, StreamKind::Quantizer, s.device_id as u64, round);
            let (u, half) = cfa_local_step(s, &arch, &policy, &opt, &mut orng, &mut qrng).unwrap();
            updates.push(u);
            halves.push(half);
        }
        cfa_apply_round(&mut states, &halves, &updates, &topology, &mixing, 1.0).unwrap();
    }
    let final_spread = spread(&states);
    assert!(final_spread < 1e-6, "spread {final_spread} after 500 rounds");
}

fn spread(states: &[CfaDeviceState]) -> f64 {
    let mut worst: f64 = 0.0;
    for a in states {
        for b in states {
            worst = worst.max(a.weights.sub(&b.weights).unwrap().linf_norm());
        }
    }
    worst
}
