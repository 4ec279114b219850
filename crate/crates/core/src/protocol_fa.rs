//! Parameter-server federated averaging: devices run the local optimizer,
//! compress the model delta, the server aggregates the decompressed deltas
//! with normalized weights and broadcasts the global model uncompressed.

use alloc::format;
use alloc::vec::Vec;

use crate::compression::{compress, decompress, CompressionPolicy, Update};
use crate::error::{Error, Result};
use crate::model::{local_optimize, DatasetPartition, MlpArchitecture, OptimizerConfig};
use crate::params::ParameterVector;
use crate::rng::RngStream;

/// One device in the FA federation. After every broadcast its `weights`
/// equal the server model exactly.
#[derive(Debug, Clone)]
pub struct FaDeviceState {
    pub device_id: usize,
    pub weights: ParameterVector,
    pub partition: DatasetPartition,
}

/// The parameter server: global model plus per-device aggregation weights.
#[derive(Debug, Clone)]
pub struct FaServerState {
    pub global: ParameterVector,
    pub aggregation_weights: Vec<f64>,
}

impl FaServerState {
    /// Dataset-size weighting: `sigma_k = n_k / sum_j n_j`, reducing to 1/K
    /// for equal shards.
    pub fn with_size_weights(global: ParameterVector, partitions: &[DatasetPartition]) -> Self {
        let total: usize = partitions.iter().map(|p| p.data.n_samples()).sum();
        let weights = partitions
            .iter()
            .map(|p| p.data.n_samples() as f64 / total as f64)
            .collect();
        FaServerState { global, aggregation_weights: weights }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.aggregation_weights.iter().sum();
        if self.aggregation_weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "aggregation weights must be nonnegative and sum to 1 (sum = {sum})"
            )));
        }
        Ok(())
    }
}

/// Runs one device round: local optimization followed by compression of the
/// model delta `P = W_half - W`. The device state is not advanced; the
/// server decides the next model.
pub fn fa_device_round(
    state: &FaDeviceState,
    arch: &MlpArchitecture,
    policy: &CompressionPolicy,
    optimizer: &OptimizerConfig,
    optimizer_rng: &mut RngStream,
    quantizer_rng: &mut RngStream,
) -> Result<(Update, ParameterVector)> {
    let w_half = local_optimize(&state.weights, arch, &state.partition, optimizer, optimizer_rng)?;
    let delta = w_half.sub(&state.weights)?;
    // A finite delta can still overflow the norm; that is divergence too.
    if !delta.l2_norm().is_finite() {
        return Err(Error::Diverged { device: state.device_id, round: 0 });
    }
    let update = compress(&delta, policy, quantizer_rng)?;
    Ok((update, w_half))
}

/// Server aggregation: `W <- W + sum_k sigma_k * decompress(update_k)`.
pub fn fa_server_aggregate(server: &mut FaServerState, updates: &[Update]) -> Result<()> {
    server.validate()?;
    if updates.len() != server.aggregation_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: server.aggregation_weights.len(),
            actual: updates.len(),
        });
    }
    for (update, &weight) in updates.iter().zip(&server.aggregation_weights) {
        if update.n_params() != server.global.n_params() {
            return Err(Error::DimensionMismatch {
                expected: server.global.n_params(),
                actual: update.n_params(),
            });
        }
        let dense = decompress(update)?;
        server.global.add_scaled(&dense, weight)?;
    }
    Ok(())
}

/// Copies the global model into every device, bit-identically. The downlink
/// is uncompressed; the energy model charges `b_W` bits per device.
pub fn fa_broadcast(server: &FaServerState, devices: &mut [FaDeviceState]) {
    for device in devices.iter_mut() {
        device.weights = server.global.clone();
    }
}
