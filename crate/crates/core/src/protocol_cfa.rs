//! Decentralized consensus training over a gossip topology.
//!
//! Each device keeps, besides its model `W`, a tracker `X` of its own
//! transmitted (compressed) deltas and a tracker `S` of the mixing-weighted
//! neighbor deltas. Both start at zero and absorb the decompressed payloads
//! every round, so consensus converges despite lossy compression. The
//! neighbor sum includes the self term with weight `omega_kk` (no
//! communication charged for it): a symmetric doubly stochastic matrix on an
//! arbitrary connected graph needs a nonzero diagonal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::compression::{compress, decompress, CompressionPolicy, Update};
use crate::error::{Error, Result};
use crate::model::{local_optimize, DatasetPartition, MlpArchitecture, OptimizerConfig};
use crate::params::ParameterVector;
use crate::rng::{self, RngStream};

/// How the gossip graph is wired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    /// Every device neighbors every other (N = K - 1).
    Full,
    /// Cycle over device ids.
    Ring,
    /// Random d-regular graph, resampled until simple and connected.
    RandomRegular { degree: usize },
}

/// A static undirected neighbor structure over `k` devices.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl Topology {
    pub fn full(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig("full topology needs at least 2 devices".into()));
        }
        let neighbors = (0..k)
            .map(|i| (0..k).filter(|&j| j != i).collect())
            .collect();
        Ok(Topology { k, neighbors })
    }

    pub fn ring(k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::InvalidConfig("ring topology needs at least 3 devices".into()));
        }
        let neighbors = (0..k)
            .map(|i| {
                let mut n = vec![(i + k - 1) % k, (i + 1) % k];
                n.sort_unstable();
                n.dedup();
                n
            })
            .collect();
        Ok(Topology { k, neighbors })
    }

    /// Seeded random regular graph via the pairing model, retried until the
    /// sample is simple and connected.
    pub fn random_regular(k: usize, degree: usize, rng: &mut RngStream) -> Result<Self> {
        if degree == 0 || degree >= k || (k * degree) % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "no {degree}-regular graph on {k} vertices"
            )));
        }
        'attempt: for _ in 0..10_000 {
            let mut stubs: Vec<usize> = (0..k).flat_map(|v| core::iter::repeat(v).take(degree)).collect();
            rng::shuffle(rng, &mut stubs);
            let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); k];
            for pair in stubs.chunks(2) {
                let (a, b) = (pair[0], pair[1]);
                if a == b || neighbors[a].contains(&b) {
                    continue 'attempt;
                }
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
            let topo = Topology { k, neighbors };
            if topo.is_connected() {
                let mut topo = topo;
                for n in &mut topo.neighbors {
                    n.sort_unstable();
                }
                return Ok(topo);
            }
        }
        Err(Error::DisconnectedTopology)
    }

    pub fn from_spec(spec: &TopologySpec, k: usize, rng: &mut RngStream) -> Result<Self> {
        match spec {
            TopologySpec::Full => Topology::full(k),
            TopologySpec::Ring => Topology::ring(k),
            TopologySpec::RandomRegular { degree } => Topology::random_regular(k, *degree, rng),
        }
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn is_connected(&self) -> bool {
        if self.k == 0 {
            return false;
        }
        let mut seen = vec![false; self.k];
        let mut queue = vec![0usize];
        seen[0] = true;
        while let Some(v) = queue.pop() {
            for &n in &self.neighbors[v] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push(n);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                if j >= self.k || j == i {
                    return Err(Error::InvalidConfig(format!("bad neighbor {j} of node {i}")));
                }
                if !self.neighbors[j].contains(&i) {
                    return Err(Error::InvalidConfig(format!(
                        "asymmetric edge between {i} and {j}"
                    )));
                }
            }
        }
        if !self.is_connected() {
            return Err(Error::DisconnectedTopology);
        }
        Ok(())
    }
}

/// Symmetric doubly stochastic mixing weights over a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub k: usize,
    entries: Vec<f64>,
}

impl MixingMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.k + col]
    }

    /// Metropolis-Hastings weights: `omega_kj = 1 / (1 + max(deg_k, deg_j))`
    /// for neighbors, the remainder on the diagonal. Symmetric doubly
    /// stochastic on any connected graph.
    pub fn metropolis(topology: &Topology) -> Result<Self> {
        topology.validate()?;
        let k = topology.k;
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            let mut off_diagonal = 0.0;
            for &j in &topology.neighbors[i] {
                let w = 1.0 / (1 + topology.degree(i).max(topology.degree(j))) as f64;
                entries[i * k + j] = w;
                off_diagonal += w;
            }
            entries[i * k + i] = 1.0 - off_diagonal;
        }
        Ok(MixingMatrix { k, entries })
    }

    pub fn validate(&self, topology: &Topology) -> Result<()> {
        let k = self.k;
        for i in 0..k {
            let row: f64 = (0..k).map(|j| self.get(i, j)).sum();
            let col: f64 = (0..k).map(|j| self.get(j, i)).sum();
            if (row - 1.0).abs() > 1e-12 || (col - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "mixing matrix row/col {i} sums {row}/{col} != 1"
                )));
            }
            for j in 0..k {
                let w = self.get(i, j);
                if w < 0.0 || (self.get(j, i) - w).abs() > 1e-15 {
                    return Err(Error::InvalidConfig("mixing matrix not symmetric nonnegative".into()));
                }
                if w > 0.0 && i != j && !topology.neighbors[i].contains(&j) {
                    return Err(Error::InvalidConfig(format!(
                        "nonzero weight between non-neighbors {i} and {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-device consensus state.
#[derive(Debug, Clone)]
pub struct CfaDeviceState {
    pub device_id: usize,
    pub weights: ParameterVector,
    /// Tracker of this device's own decompressed payloads.
    pub x: ParameterVector,
    /// Tracker of mixing-weighted neighbor payloads (self term included).
    pub s: ParameterVector,
    pub partition: DatasetPartition,
}

impl CfaDeviceState {
    pub fn new(device_id: usize, weights: ParameterVector, partition: DatasetPartition) -> Self {
        let n = weights.n_params();
        CfaDeviceState {
            device_id,
            weights,
            x: ParameterVector::zeros(n),
            s: ParameterVector::zeros(n),
            partition,
        }
    }
}

/// Runs the local optimizer and compresses `W_half - X`. Trackers are not
/// advanced here; [`cfa_apply_round`] does that once all payloads exist.
pub fn cfa_local_step(
    state: &CfaDeviceState,
    arch: &MlpArchitecture,
    policy: &CompressionPolicy,
    optimizer: &OptimizerConfig,
    optimizer_rng: &mut RngStream,
    quantizer_rng: &mut RngStream,
) -> Result<(Update, ParameterVector)> {
    let w_half = local_optimize(&state.weights, arch, &state.partition, optimizer, optimizer_rng)?;
    let delta = w_half.sub(&state.x)?;
    // A finite delta can still overflow the norm; that is divergence too.
    if !delta.l2_norm().is_finite() {
        return Err(Error::Diverged { device: state.device_id, round: 0 });
    }
    let update = compress(&delta, policy, quantizer_rng)?;
    Ok((update, w_half))
}

/// Synchronous consensus step over all devices:
/// `X_k += D_k`, `S_k += sum_{j in N_k + {k}} omega_kj * D_j`,
/// `W_k = W_half_k + gamma * (S_k - X_k)` with `D_j = decompress(payload_j)`.
pub fn cfa_apply_round(
    states: &mut [CfaDeviceState],
    half_steps: &[ParameterVector],
    payloads: &[Update],
    topology: &Topology,
    mixing: &MixingMatrix,
    gamma: f64,
) -> Result<()> {
    let k = states.len();
    if payloads.len() != k || half_steps.len() != k || topology.k != k || mixing.k != k {
        return Err(Error::DimensionMismatch { expected: k, actual: payloads.len() });
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidConfig(format!("gamma must be in (0, 1], got {gamma}")));
    }
    let n_params = states[0].weights.n_params();
    let mut dense = Vec::with_capacity(k);
    for payload in payloads {
        if payload.n_params() != n_params {
            return Err(Error::DimensionMismatch { expected: n_params, actual: payload.n_params() });
        }
        dense.push(decompress(payload)?);
    }
    for (i, state) in states.iter_mut().enumerate() {
        state.x.add_scaled(&dense[i], 1.0)?;
        state.s.add_scaled(&dense[i], mixing.get(i, i))?;
        for &j in &topology.neighbors[i] {
            state.s.add_scaled(&dense[j], mixing.get(i, j))?;
        }
        state.weights = half_steps[i].clone();
        state.weights.add_scaled(&state.s, gamma)?;
        state.weights.add_scaled(&state.x, -gamma)?;
    }
    Ok(())
}
