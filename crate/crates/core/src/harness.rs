//! Experiment orchestration: run a protocol to a stopping condition while
//! charging energy and carbon each round, and expand sweep grids with
//! per-cell derived seeds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::compression::{model_bits, payload_bits, CompressionPolicy};
use crate::energy::{
    cfa_device_energy, fa_device_energy, ps_energy, CarbonIntensitySchedule, CarbonLedger,
    EnergyProfile, LinkEfficiencies, PsEnergyProfile,
};
use crate::error::{Error, Result};
use crate::model::{
    evaluate, generate_synthetic_dataset, partition_iid, Dataset, MlpArchitecture,
    OptimizerConfig,
};
use crate::protocol_cfa::{
    cfa_apply_round, cfa_local_step, CfaDeviceState, MixingMatrix, Topology, TopologySpec,
};
use crate::protocol_fa::{fa_broadcast, fa_device_round, fa_server_aggregate, FaDeviceState, FaServerState};
use crate::rng::{self, StreamKind};

pub const PS_ENTITY: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Fa,
    Cfa,
}

/// Synthetic Gaussian-blob task; class count and dimensionality come from
/// the model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

/// When to stop a run. Checked after each round in the order carbon budget,
/// target accuracy, max rounds; `max_rounds` is the mandatory backstop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingConfig {
    pub max_rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carbon_budget_kg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

/// Carbon intensities per entity. Constant by default; stepwise schedules
/// override the constants for hourly-monitoring scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarbonConfig {
    /// kgCO2-eq/kWh at every device.
    pub device_intensity: f64,
    /// kgCO2-eq/kWh at the parameter server.
    pub ps_intensity: f64,
    /// Seconds per round; only matters for stepwise schedules.
    #[serde(default = "default_round_duration")]
    pub round_duration_s: f64,
    /// Optional per-device schedules (one per device, overrides the constant).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_schedules: Option<Vec<CarbonIntensitySchedule>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ps_schedule: Option<CarbonIntensitySchedule>,
}

fn default_round_duration() -> f64 {
    60.0
}

/// Full description of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub k: usize,
    pub seed: u64,
    pub model: MlpArchitecture,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerConfig,
    pub compression: CompressionPolicy,
    #[serde(default = "default_topology")]
    pub topology: TopologySpec,
    /// Consensus step size.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub device_energy: EnergyProfile,
    pub ps_energy: PsEnergyProfile,
    pub links: LinkEfficiencies,
    pub carbon: CarbonConfig,
    pub stopping: StoppingConfig,
}

fn default_topology() -> TopologySpec {
    TopologySpec::Full
}

fn default_gamma() -> f64 {
    0.01
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.protocol == Protocol::Cfa && self.k < 2 {
            return Err(Error::InvalidConfig("cfa needs at least 2 devices".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.compression.validate()?;
        self.device_energy.validate()?;
        self.ps_energy.validate()?;
        self.links.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.dataset.samples_per_class == 0 {
            return Err(Error::InvalidConfig("samples_per_class must be positive".into()));
        }
        if !(self.dataset.noise_sigma > 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be > 0".into()));
        }
        if self.stopping.max_rounds == 0 {
            return Err(Error::InvalidConfig("max_rounds must be at least 1".into()));
        }
        if let Some(b) = self.stopping.carbon_budget_kg {
            if !(b.is_finite() && b >= 0.0) {
                return Err(Error::InvalidConfig("carbon_budget_kg must be >= 0".into()));
            }
        }
        if let Some(a) = self.stopping.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig("target_accuracy must be in [0, 1]".into()));
            }
        }
        if !(self.carbon.device_intensity > 0.0 && self.carbon.ps_intensity > 0.0) {
            return Err(Error::InvalidConfig("carbon intensities must be > 0".into()));
        }
        if !(self.carbon.round_duration_s > 0.0) {
            return Err(Error::InvalidConfig("round_duration_s must be > 0".into()));
        }
        if let Some(schedules) = &self.carbon.device_schedules {
            if schedules.len() != self.k {
                return Err(Error::InvalidConfig(format!(
                    "device_schedules has {} entries for k = {}",
                    schedules.len(),
                    self.k
                )));
            }
            for s in schedules {
                s.validate()?;
            }
        }
        if let Some(s) = &self.carbon.ps_schedule {
            s.validate()?;
        }
        Ok(())
    }

    fn device_schedule(&self, device: usize) -> CarbonIntensitySchedule {
        match &self.carbon.device_schedules {
            Some(schedules) => schedules[device].clone(),
            None => CarbonIntensitySchedule::constant(self.carbon.device_intensity),
        }
    }

    fn ps_schedule(&self) -> CarbonIntensitySchedule {
        self.carbon
            .ps_schedule
            .clone()
            .unwrap_or_else(|| CarbonIntensitySchedule::constant(self.carbon.ps_intensity))
    }
}

/// One entity's row in a round log. Entity 0 is the parameter server (only
/// present for FA); devices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntityRound {
    pub entity: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub bits_tx: u64,
    pub bits_rx: u64,
    pub energy_j: f64,
    pub delta_c_kg: f64,
    /// System-wide cumulative carbon after this round.
    pub c_tot_kg: f64,
}

/// Everything recorded about one completed round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub entries: Vec<EntityRound>,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub c_tot_kg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    CarbonBudgetReached,
    TargetAccuracyReached,
    MaxRoundsReached,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub protocol: Protocol,
    pub rounds_executed: usize,
    pub stop_reason: StopReason,
    /// Stopping/reporting accuracy: global-model validation accuracy for FA,
    /// mean device validation accuracy for CFA.
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub c_tot_kg: f64,
    /// Amount by which the final round overshot the budget, when one was set
    /// and reached.
    pub budget_overshoot_kg: Option<f64>,
    /// Total bits transmitted by all entities over all rounds.
    pub bits_total: u64,
    pub n_params: usize,
    pub model_bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rounds: Vec<RoundLog>,
    pub summary: RunSummary,
}

/// Budget semantics: stop as soon as the cumulative total meets the budget
/// (equality included).
pub fn check_budget(c_tot_kg: f64, budget_kg: f64) -> bool {
    c_tot_kg >= budget_kg
}

struct LedgerBank {
    devices: Vec<CarbonLedger>,
    device_schedules: Vec<CarbonIntensitySchedule>,
    ps: Option<(CarbonLedger, CarbonIntensitySchedule)>,
    round_duration_s: f64,
}

impl LedgerBank {
    fn charge_device(&mut self, device: usize, round: usize, energy_j: f64) -> Result<f64> {
        let t = round as f64 * self.round_duration_s;
        let intensity = self.device_schedules[device].intensity_at(t);
        self.devices[device].charge(round, energy_j, intensity)
    }

    fn charge_ps(&mut self, round: usize, energy_j: f64) -> Result<f64> {
        let t = round as f64 * self.round_duration_s;
        let (ledger, schedule) = self.ps.as_mut().expect("FA run has a PS ledger");
        let intensity = schedule.intensity_at(t);
        ledger.charge(round, energy_j, intensity)
    }

    fn total(&self) -> f64 {
        crate::energy::total_carbon(&self.devices, self.ps.as_ref().map(|(l, _)| l))
    }
}

/// Executes lockstep rounds of the configured protocol until a stopping
/// condition fires. Fully deterministic given the config seed.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let seed = config.seed;
    let arch = &config.model;
    let _n_params = arch.n_params();

    let mut dataset_rng = rng::stream(seed, StreamKind::Dataset, 0, 0);
    let (train, val) = generate_synthetic_dataset(
        arch.n_classes,
        arch.input_dim,
        config.dataset.samples_per_class,
        config.dataset.class_separation,
        config.dataset.noise_sigma,
        &mut dataset_rng,
    )?;
    run_with_dataset(config, &train, &val)
}

/// Like [`run`], but over caller-provided train/validation data (CSV-loaded
/// datasets enter here).
pub fn run_with_dataset(config: &RunConfig, train: &Dataset, val: &Dataset) -> Result<RunOutput> {
    config.validate()?;
    train.validate()?;
    val.validate()?;
    if train.input_dim != config.model.input_dim || train.n_classes != config.model.n_classes {
        return Err(Error::InvalidConfig(
            "dataset shape does not match the model architecture".into(),
        ));
    }
    let seed = config.seed;
    let arch = &config.model;
    let n_params = arch.n_params();
    let policy = &config.compression;
    let b_w = model_bits(n_params, policy.n_bits_clear);
    let p_bits = payload_bits(policy, n_params);

    let mut partition_rng = rng::stream(seed, StreamKind::Partition, 0, 0);
    let partitions = partition_iid(train, config.k, &mut partition_rng)?;

    let mut init_rng = rng::stream(seed, StreamKind::Init, 0, 0);
    let initial = arch.init_params(&mut init_rng);

    let mut ledgers = LedgerBank {
        devices: vec![CarbonLedger::new(); config.k],
        device_schedules: (0..config.k).map(|d| config.device_schedule(d)).collect(),
        ps: (config.protocol == Protocol::Fa)
            .then(|| (CarbonLedger::new(), config.ps_schedule())),
        round_duration_s: config.carbon.round_duration_s,
    };

    enum State {
        Fa { server: FaServerState, devices: Vec<FaDeviceState> },
        Cfa { states: Vec<CfaDeviceState>, topology: Topology, mixing: MixingMatrix },
    }

    let mut state = match config.protocol {
        Protocol::Fa => {
            let server = FaServerState::with_size_weights(initial.clone(), &partitions);
            server.validate()?;
            let devices = partitions
                .into_iter()
                .map(|partition| FaDeviceState {
                    device_id: partition.owner,
                    weights: initial.clone(),
                    partition,
                })
                .collect();
            State::Fa { server, devices }
        }
        Protocol::Cfa => {
            let mut topo_rng = rng::stream(seed, StreamKind::Topology, 0, 0);
            let topology = Topology::from_spec(&config.topology, config.k, &mut topo_rng)?;
            let mixing = MixingMatrix::metropolis(&topology)?;
            mixing.validate(&topology)?;
            let states = partitions
                .into_iter()
                .map(|partition| CfaDeviceState::new(partition.owner, initial.clone(), partition))
                .collect();
            State::Cfa { states, topology, mixing }
        }
    };

    let (mut last_loss, mut last_accuracy) = evaluate(&initial, arch, val)?;
    let mut rounds: Vec<RoundLog> = Vec::new();
    let mut bits_total: u64 = 0;
    let mut stop_reason = StopReason::MaxRoundsReached;
    let mut budget_overshoot_kg = None;

    for round in 0..config.stopping.max_rounds {
        // A zero (or already exhausted) budget stops before any work.
        if let Some(budget) = config.stopping.carbon_budget_kg {
            if check_budget(ledgers.total(), budget) {
                stop_reason = StopReason::CarbonBudgetReached;
                budget_overshoot_kg = Some(ledgers.total() - budget);
                break;
            }
        }

        let mut entries: Vec<EntityRound> = Vec::with_capacity(config.k + 1);
        let round_result: Result<()> = (|| {
            match &mut state {
                State::Fa { server, devices } => {
                    let mut updates = Vec::with_capacity(config.k);
                    for device in devices.iter() {
                        let mut orng =
                            rng::stream(seed, StreamKind::Optimizer, device.device_id as u64, round as u64);
                        let mut qrng =
                            rng::stream(seed, StreamKind::Quantizer, device.device_id as u64, round as u64);
                        let (update, _) = fa_device_round(
                            device,
                            arch,
                            policy,
                            &config.optimizer,
                            &mut orng,
                            &mut qrng,
                        )
                        .map_err(|e| match e {
                            Error::Diverged { device: d, .. } => Error::Diverged { device: d, round },
                            other => other,
                        })?;
                        updates.push(update);
                    }
                    fa_server_aggregate(server, &updates)?;
                    fa_broadcast(server, devices);

                    let (loss, accuracy) = evaluate(&server.global, arch, val)?;
                    last_loss = loss;
                    last_accuracy = accuracy;

                    let device_energy = fa_device_energy(&config.device_energy, &config.links, policy, n_params);
                    let policies = vec![*policy; config.k];
                    let server_energy = ps_energy(&config.ps_energy, &config.links, &policies, n_params);

                    let ps_delta = ledgers.charge_ps(round, server_energy)?;
                    let mut device_rows = Vec::with_capacity(config.k);
                    for d in 0..config.k {
                        let delta = ledgers.charge_device(d, round, device_energy)?;
                        device_rows.push((d, delta));
                    }
                    let c_tot = ledgers.total();
                    entries.push(EntityRound {
                        entity: PS_ENTITY,
                        loss,
                        accuracy,
                        bits_tx: b_w,
                        bits_rx: config.k as u64 * p_bits,
                        energy_j: server_energy,
                        delta_c_kg: ps_delta,
                        c_tot_kg: c_tot,
                    });
                    for (d, delta) in device_rows {
                        entries.push(EntityRound {
                            entity: d + 1,
                            loss,
                            accuracy,
                            bits_tx: p_bits,
                            bits_rx: b_w,
                            energy_j: device_energy,
                            delta_c_kg: delta,
                            c_tot_kg: c_tot,
                        });
                    }
                    bits_total += b_w + config.k as u64 * p_bits;
                }
                State::Cfa { states, topology, mixing } => {
                    let mut updates = Vec::with_capacity(config.k);
                    let mut half_steps = Vec::with_capacity(config.k);
                    for device in states.iter() {
                        let mut orng =
                            rng::stream(seed, StreamKind::Optimizer, device.device_id as u64, round as u64);
                        let mut qrng =
                            rng::stream(seed, StreamKind::Quantizer, device.device_id as u64, round as u64);
                        let (update, half) = cfa_local_step(
                            device,
                            arch,
                            policy,
                            &config.optimizer,
                            &mut orng,
                            &mut qrng,
                        )
                        .map_err(|e| match e {
                            Error::Diverged { device: d, .. } => Error::Diverged { device: d, round },
                            other => other,
                        })?;
                        updates.push(update);
                        half_steps.push(half);
                    }
                    cfa_apply_round(states, &half_steps, &updates, topology, mixing, config.gamma)?;

                    let mut device_metrics = Vec::with_capacity(config.k);
                    for device in states.iter() {
                        device_metrics.push(evaluate(&device.weights, arch, val)?);
                    }
                    let mut device_rows = Vec::with_capacity(config.k);
                    for d in 0..config.k {
                        let neighbor_policies = vec![*policy; topology.degree(d)];
                        let energy = cfa_device_energy(
                            &config.device_energy,
                            &config.links,
                            policy,
                            &neighbor_policies,
                            n_params,
                        );
                        let delta = ledgers.charge_device(d, round, energy)?;
                        device_rows.push((d, energy, delta));
                    }
                    let c_tot = ledgers.total();
                    for (d, energy, delta) in device_rows {
                        let (loss, accuracy) = device_metrics[d];
                        entries.push(EntityRound {
                            entity: d + 1,
                            loss,
                            accuracy,
                            bits_tx: p_bits,
                            bits_rx: topology.degree(d) as u64 * p_bits,
                            energy_j: energy,
                            delta_c_kg: delta,
                            c_tot_kg: c_tot,
                        });
                        bits_total += p_bits;
                    }
                    let n = config.k as f64;
                    last_accuracy = device_metrics.iter().map(|m| m.1).sum::<f64>() / n;
                    last_loss = device_metrics.iter().map(|m| m.0).sum::<f64>() / n;
                }
            }
            Ok(())
        })();

        match round_result {
            Ok(()) => {}
            Err(Error::Diverged { device, round }) => {
                log::error!("optimizer diverged on device {device} at round {round}");
                stop_reason = StopReason::Diverged;
                break;
            }
            Err(other) => return Err(other),
        }

        let device_accuracies: Vec<f64> = entries
            .iter()
            .filter(|e| e.entity != PS_ENTITY)
            .map(|e| e.accuracy)
            .collect();
        let min_accuracy = device_accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_accuracy = device_accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean_accuracy =
            device_accuracies.iter().sum::<f64>() / device_accuracies.len() as f64;
        let c_tot = ledgers.total();
        rounds.push(RoundLog {
            round,
            entries,
            mean_accuracy,
            min_accuracy,
            max_accuracy,
            c_tot_kg: c_tot,
        });

        if let Some(budget) = config.stopping.carbon_budget_kg {
            if check_budget(c_tot, budget) {
                stop_reason = StopReason::CarbonBudgetReached;
                budget_overshoot_kg = Some(c_tot - budget);
                break;
            }
        }
        if let Some(target) = config.stopping.target_accuracy {
            if last_accuracy >= target {
                stop_reason = StopReason::TargetAccuracyReached;
                break;
            }
        }
    }

    let summary = RunSummary {
        protocol: config.protocol,
        rounds_executed: rounds.len(),
        stop_reason,
        final_accuracy: last_accuracy,
        final_loss: last_loss,
        c_tot_kg: ledgers.total(),
        budget_overshoot_kg,
        bits_total,
        n_params,
        model_bits: b_w,
    };
    Ok(RunOutput { rounds, summary })
}

/// Axes of a what-if sweep; an empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub delta: Vec<f64>,
    pub n_bits: Vec<u8>,
    pub ee_com: Vec<f64>,
    pub i_0: Vec<f64>,
    pub i_k: Vec<f64>,
    pub protocol: Vec<Protocol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: RunConfig,
    #[serde(default)]
    pub axes: SweepAxes,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_repetitions() -> usize {
    1
}

fn default_cap() -> usize {
    10_000
}

/// One grid point: the resolved config plus the axis values that key it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub index: usize,
    pub repetition: usize,
    pub delta: f64,
    pub n_bits: u8,
    pub ee_com: f64,
    pub i_0: f64,
    pub i_k: f64,
    pub protocol: Protocol,
    pub seed: u64,
    #[serde(skip)]
    pub config: RunConfig,
}

/// Expands the Cartesian product of all non-empty axes times repetitions.
/// Each cell's seed derives from the base seed and the cell coordinates, so
/// grids are reproducible cell by cell in any execution order.
pub fn expand_sweep(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    spec.base.validate()?;
    if spec.repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
    }
    let axes = &spec.axes;
    let one = |len: usize| len.max(1);
    let cells = one(axes.delta.len())
        * one(axes.n_bits.len())
        * one(axes.ee_com.len())
        * one(axes.i_0.len())
        * one(axes.i_k.len())
        * one(axes.protocol.len())
        * spec.repetitions;
    if cells > spec.cap {
        return Err(Error::GridCapExceeded { cells, cap: spec.cap });
    }

    fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
        if values.is_empty() {
            vec![base]
        } else {
            values.to_vec()
        }
    }
    let base = &spec.base;
    let deltas = axis(&axes.delta, base.compression.delta);
    let bits = axis(&axes.n_bits, base.compression.n_bits);
    // A base with asymmetric links cannot express a scalar EE_COM; the axis
    // overrides all three links uniformly either way.
    let ees = axis(&axes.ee_com, base.links.ee_downlink);
    let i0s = axis(&axes.i_0, base.carbon.ps_intensity);
    let iks = axis(&axes.i_k, base.carbon.device_intensity);
    let protocols = axis(&axes.protocol, base.protocol);

    let mut out = Vec::with_capacity(cells);
    let mut index = 0;
    for &protocol in &protocols {
        for &delta in &deltas {
            for &n_bits in &bits {
                for &ee_com in &ees {
                    for &i_0 in &i0s {
                        for &i_k in &iks {
                            for repetition in 0..spec.repetitions {
                                let mut config = base.clone();
                                config.protocol = protocol;
                                config.compression.delta = delta;
                                config.compression.n_bits = n_bits;
                                if !axes.ee_com.is_empty() {
                                    config.links = LinkEfficiencies::uniform(ee_com);
                                }
                                config.carbon.ps_intensity = i_0;
                                config.carbon.device_intensity = i_k;
                                config.seed = rng::derive_seed(
                                    base.seed,
                                    StreamKind::SweepCell,
                                    index as u64,
                                    repetition as u64,
                                );
                                config.validate()?;
                                out.push(SweepCell {
                                    index,
                                    repetition,
                                    delta,
                                    n_bits,
                                    ee_com,
                                    i_0,
                                    i_k,
                                    protocol,
                                    seed: config.seed,
                                    config,
                                });
                                index += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Runs every grid point sequentially. Cells share nothing, so callers that
/// want parallelism can expand the grid themselves and run cells on workers.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<(SweepCell, RunOutput)>> {
    let cells = expand_sweep(spec)?;
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let output = run(&cell.config)?;
        results.push((cell, output));
    }
    Ok(results)
}
