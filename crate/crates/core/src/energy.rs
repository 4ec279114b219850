//! Per-round energy costs and the iterative carbon ledger.
//!
//! Energies are Joules, link efficiencies bit/Joule, carbon intensities
//! kgCO2-eq/kWh. The ledger converts Joules to kWh (divide by 3.6e6) when
//! charging a round. The server-side formula charges its downlink
//! publication at the uplink efficiency and its collection at the downlink
//! efficiency; with equal efficiencies (the usual configuration) the
//! labeling is moot, under asymmetric links it is followed literally.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::compression::{model_bits, payload_bits, CompressionPolicy};
use crate::error::{Error, Result};

pub const JOULES_PER_KWH: f64 = 3.6e6;

/// Per-device energy constants (Joules per round).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyProfile {
    /// Local optimizer cost per round.
    pub e_comp: f64,
    /// Compression cost endpoints over delta in [0.1, 1].
    pub e_q_min: f64,
    pub e_q_max: f64,
    /// Sleep cost per round.
    pub e_sleep: f64,
    /// One weighted-averaging step (consensus aggregation).
    pub e_global: f64,
}

impl EnergyProfile {
    pub fn validate(&self) -> Result<()> {
        let all = [self.e_comp, self.e_q_min, self.e_q_max, self.e_sleep, self.e_global];
        if all.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::InvalidConfig("energies must be finite and >= 0".into()));
        }
        if self.e_q_min > self.e_q_max {
            return Err(Error::InvalidConfig("e_q_min must not exceed e_q_max".into()));
        }
        Ok(())
    }

    /// Compression cost, interpolated affinely in delta between the
    /// endpoints at delta = 0.1 and delta = 1, clamped outside that range.
    pub fn e_quantize(&self, delta: f64) -> f64 {
        let frac = ((delta - 0.1) / 0.9).clamp(0.0, 1.0);
        self.e_q_min + frac * (self.e_q_max - self.e_q_min)
    }
}

/// Parameter-server energy constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsEnergyProfile {
    /// One global model update (per received contribution).
    pub e_global: f64,
    pub e_sleep: f64,
}

impl PsEnergyProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_global >= 0.0 && self.e_sleep >= 0.0)
            || !self.e_global.is_finite()
            || !self.e_sleep.is_finite()
        {
            return Err(Error::InvalidConfig("PS energies must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Link efficiencies in bit/Joule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEfficiencies {
    pub ee_downlink: f64,
    pub ee_uplink: f64,
    pub ee_sidelink: f64,
}

impl LinkEfficiencies {
    /// The common what-if setting: one efficiency for every link.
    pub fn uniform(ee_com: f64) -> Self {
        LinkEfficiencies { ee_downlink: ee_com, ee_uplink: ee_com, ee_sidelink: ee_com }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.ee_downlink, self.ee_uplink, self.ee_sidelink]
            .iter()
            .any(|ee| !(ee.is_finite() && *ee > 0.0))
        {
            return Err(Error::InvalidConfig("link efficiencies must be > 0".into()));
        }
        Ok(())
    }
}

/// Device energy for one FA round: compute, uncompressed downlink receive,
/// compressed uplink transmit, compression cost, sleep.
pub fn fa_device_energy(
    profile: &EnergyProfile,
    links: &LinkEfficiencies,
    policy: &CompressionPolicy,
    n_params: usize,
) -> f64 {
    let b_w = model_bits(n_params, policy.n_bits_clear) as f64;
    let uplink_bits = payload_bits(policy, n_params) as f64;
    profile.e_comp
        + b_w / links.ee_downlink
        + uplink_bits / links.ee_uplink
        + profile.e_quantize(policy.delta)
        + profile.e_sleep
}

/// Server energy for one FA round: K aggregation steps, one uncompressed
/// model publication, collection of every device's compressed payload,
/// sleep.
pub fn ps_energy(
    profile: &PsEnergyProfile,
    links: &LinkEfficiencies,
    device_policies: &[CompressionPolicy],
    n_params: usize,
) -> f64 {
    let k = device_policies.len();
    if k == 0 {
        log::warn!("PS energy computed with zero participating devices");
    }
    let n_bits_clear = device_policies.first().map(|p| p.n_bits_clear).unwrap_or(32);
    let b_w = model_bits(n_params, n_bits_clear) as f64;
    let collection: f64 = device_policies
        .iter()
        .map(|p| payload_bits(p, n_params) as f64 / links.ee_downlink)
        .sum();
    k as f64 * profile.e_global + b_w / links.ee_uplink + collection + profile.e_sleep
}

/// Device energy for one consensus round: compute, N averaging steps,
/// receiving every neighbor payload, one transmit, compression cost, sleep.
pub fn cfa_device_energy(
    profile: &EnergyProfile,
    links: &LinkEfficiencies,
    own_policy: &CompressionPolicy,
    neighbor_policies: &[CompressionPolicy],
    n_params: usize,
) -> f64 {
    let n = neighbor_policies.len();
    let receive: f64 = neighbor_policies
        .iter()
        .map(|p| payload_bits(p, n_params) as f64 / links.ee_sidelink)
        .sum();
    profile.e_comp
        + n as f64 * profile.e_global
        + receive
        + payload_bits(own_policy, n_params) as f64 / links.ee_sidelink
        + profile.e_quantize(own_policy.delta)
        + profile.e_sleep
}

/// Stepwise (or constant) carbon intensity over time for one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarbonIntensitySchedule {
    /// `(start_time_s, intensity_kg_per_kwh)` steps, sorted by start time.
    /// The first step must start at or before t = 0.
    pub steps: Vec<(f64, f64)>,
}

impl CarbonIntensitySchedule {
    pub fn constant(intensity: f64) -> Self {
        CarbonIntensitySchedule { steps: alloc::vec![(0.0, intensity)] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidConfig("carbon intensity schedule is empty".into()));
        }
        if self.steps[0].0 > 0.0 {
            return Err(Error::InvalidConfig(
                "carbon intensity schedule must cover t = 0".into(),
            ));
        }
        for pair in self.steps.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidConfig(
                    "carbon intensity steps must be strictly increasing in time".into(),
                ));
            }
        }
        if self.steps.iter().any(|&(_, i)| !(i.is_finite() && i > 0.0)) {
            return Err(Error::InvalidConfig("carbon intensities must be > 0".into()));
        }
        Ok(())
    }

    /// Intensity in force at time `t` (last step whose start <= t).
    pub fn intensity_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|&&(start, _)| start <= t)
            .last()
            .map(|&(_, i)| i)
            .unwrap_or(self.steps[0].1)
    }
}

/// One charged round in a ledger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub round: usize,
    pub energy_j: f64,
    pub intensity: f64,
    pub delta_kg: f64,
}

/// Cumulative carbon emissions of one entity, updated round by round.
#[derive(Debug, Clone, Default)]
pub struct CarbonLedger {
    cumulative_kg: f64,
    entries: Vec<LedgerEntry>,
}

impl CarbonLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charges a round: `delta = E * I / 3.6e6` kgCO2-eq. Round indices must
    /// strictly increase.
    pub fn charge(&mut self, round: usize, energy_j: f64, intensity: f64) -> Result<f64> {
        if let Some(last) = self.entries.last() {
            if round <= last.round {
                return Err(Error::InvalidConfig(format!(
                    "ledger round {round} not after {}",
                    last.round
                )));
            }
        }
        if !(energy_j >= 0.0 && intensity > 0.0) {
            return Err(Error::InvalidConfig("ledger needs energy >= 0 and intensity > 0".into()));
        }
        let delta_kg = energy_j * intensity / JOULES_PER_KWH;
        self.cumulative_kg += delta_kg;
        self.entries.push(LedgerEntry { round, energy_j, intensity, delta_kg });
        Ok(delta_kg)
    }

    pub fn cumulative_kg(&self) -> f64 {
        self.cumulative_kg
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// From-scratch recomputation of the closed form `sum E*I / 3.6e6`.
    pub fn recompute_total(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.energy_j * e.intensity / JOULES_PER_KWH)
            .sum()
    }
}

/// Protocol totals: FA sums devices plus the server, consensus sums devices
/// only.
pub fn total_carbon(device_ledgers: &[CarbonLedger], ps_ledger: Option<&CarbonLedger>) -> f64 {
    device_ledgers.iter().map(|l| l.cumulative_kg()).sum::<f64>()
        + ps_ledger.map(|l| l.cumulative_kg()).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_profile() -> EnergyProfile {
        EnergyProfile { e_comp: 3.51, e_q_min: 0.04, e_q_max: 0.14, e_sleep: 0.12, e_global: 0.06 }
    }

    fn mnist_ps() -> PsEnergyProfile {
        PsEnergyProfile { e_global: 0.24, e_sleep: 0.70 }
    }

    fn full_policy() -> CompressionPolicy {
        CompressionPolicy { delta: 1.0, n_bits: 32, n_bits_clear: 32, identity: false }
    }

    #[test]
    fn fa_device_energy_reference_value() {
        // 3.51 + 190.4 + 190.4 + 0.14 + 0.12 = 384.57 J
        let e = fa_device_energy(
            &mnist_profile(),
            &LinkEfficiencies::uniform(10_000.0),
            &full_policy(),
            59_500,
        );
        assert!((e - 384.57).abs() / 384.57 < 1e-9, "{e}");
    }

    #[test]
    fn ps_energy_reference_value() {
        // 10*0.24 + 190.4 + 10*190.4 + 0.70 = 2097.5 J
        let policies = [full_policy(); 10];
        let e = ps_energy(
            &mnist_ps(),
            &LinkEfficiencies::uniform(10_000.0),
            &policies,
            59_500,
        );
        assert!((e - 2097.5).abs() / 2097.5 < 1e-9, "{e}");
    }

    #[test]
    fn cfa_device_energy_reference_value() {
        // 3.51 + 9*0.06 + 9*190.4 + 190.4 + 0.14 + 0.12 = 1908.31 J
        let neighbors = [full_policy(); 9];
        let e = cfa_device_energy(
            &mnist_profile(),
            &LinkEfficiencies::uniform(10_000.0),
            &full_policy(),
            &neighbors,
            59_500,
        );
        assert!((e - 1908.31).abs() / 1908.31 < 1e-9, "{e}");
    }

    #[test]
    fn sparse_uplink_term() {
        // delta = 0.1, N_b = 8: uplink bits 47,600 -> 4.76 J at 10 kbit/J.
        let policy = CompressionPolicy { delta: 0.1, n_bits: 8, n_bits_clear: 32, identity: false };
        let links = LinkEfficiencies::uniform(10_000.0);
        let profile = mnist_profile();
        let e = fa_device_energy(&profile, &links, &policy, 59_500);
        let expected = 3.51 + 190.4 + 4.76 + profile.e_quantize(0.1) + 0.12;
        assert!((e - expected).abs() < 1e-12);
        assert_eq!(profile.e_quantize(0.1), 0.04);
        assert_eq!(profile.e_quantize(1.0), 0.14);
    }

    #[test]
    fn infinite_efficiency_leaves_compute_terms() {
        let profile = mnist_profile();
        let links = LinkEfficiencies::uniform(1e18);
        let e = fa_device_energy(&profile, &links, &full_policy(), 59_500);
        let floor = profile.e_comp + profile.e_quantize(1.0) + profile.e_sleep;
        assert!((e - floor).abs() < 1e-6);
    }

    #[test]
    fn doubling_efficiency_halves_communication() {
        let profile = mnist_profile();
        let policy = CompressionPolicy { delta: 0.3, n_bits: 12, n_bits_clear: 32, identity: false };
        let base = LinkEfficiencies::uniform(7_000.0);
        let doubled = LinkEfficiencies::uniform(14_000.0);
        let huge = LinkEfficiencies::uniform(1e300);
        let compute = fa_device_energy(&profile, &huge, &policy, 5_000);
        let comm1 = fa_device_energy(&profile, &base, &policy, 5_000) - compute;
        let comm2 = fa_device_energy(&profile, &doubled, &policy, 5_000) - compute;
        assert!((comm1 - 2.0 * comm2).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_network_energy_identity() {
        // Whole-system FA network energy = (K+1)*b_W/EE + 2*sum_k t_k*N_b/EE.
        let k = 7;
        let ee = 9_000.0;
        let links = LinkEfficiencies::uniform(ee);
        let profile = mnist_profile();
        let ps = mnist_ps();
        let policy = CompressionPolicy { delta: 0.2, n_bits: 8, n_bits_clear: 32, identity: false };
        let n_params = 2_000;
        let huge = LinkEfficiencies::uniform(1e300);
        let policies = alloc::vec![policy; k];

        let device_comm: f64 = (0..k)
            .map(|_| {
                fa_device_energy(&profile, &links, &policy, n_params)
                    - fa_device_energy(&profile, &huge, &policy, n_params)
            })
            .sum();
        let ps_comm = ps_energy(&ps, &links, &policies, n_params)
            - ps_energy(&ps, &huge, &policies, n_params);
        let b_w = model_bits(n_params, 32) as f64;
        let t_nb: f64 = (0..k).map(|_| payload_bits(&policy, n_params) as f64).sum();
        let expected = ((k + 1) as f64 * b_w + 2.0 * t_nb) / ee;
        assert!((device_comm + ps_comm - expected).abs() < 1e-9);
    }

    #[test]
    fn ledger_matches_hand_value() {
        let mut ledger = CarbonLedger::new();
        let delta = ledger.charge(0, 384.57, 0.449).unwrap();
        assert!((delta - 4.796e-5).abs() < 1e-8);
        assert!((delta - 384.57 * 0.449 / 3.6e6).abs() < 1e-20);
    }

    #[test]
    fn ledger_zero_energy_is_free() {
        let mut ledger = CarbonLedger::new();
        ledger.charge(0, 0.0, 0.5).unwrap();
        assert_eq!(ledger.cumulative_kg(), 0.0);
    }

    #[test]
    fn ledger_rounds_must_increase() {
        let mut ledger = CarbonLedger::new();
        ledger.charge(3, 1.0, 0.5).unwrap();
        assert!(ledger.charge(3, 1.0, 0.5).is_err());
        assert!(ledger.charge(2, 1.0, 0.5).is_err());
        ledger.charge(4, 1.0, 0.5).unwrap();
    }

    #[test]
    fn two_equal_rounds_double_the_total() {
        let mut ledger = CarbonLedger::new();
        let d1 = ledger.charge(0, 10.0, 0.449).unwrap();
        let d2 = ledger.charge(1, 10.0, 0.449).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(ledger.cumulative_kg(), 2.0 * d1);
    }

    #[test]
    fn schedule_lookup() {
        let schedule = CarbonIntensitySchedule {
            steps: alloc::vec![(0.0, 0.449), (3600.0, 0.193), (7200.0, 0.952)],
        };
        schedule.validate().unwrap();
        assert_eq!(schedule.intensity_at(0.0), 0.449);
        assert_eq!(schedule.intensity_at(3599.9), 0.449);
        assert_eq!(schedule.intensity_at(3600.0), 0.193);
        assert_eq!(schedule.intensity_at(1e9), 0.952);
    }

    #[test]
    fn total_carbon_sums_entities() {
        let mut dev = CarbonLedger::new();
        dev.charge(0, 100.0, 0.449).unwrap();
        let mut ps = CarbonLedger::new();
        ps.charge(0, 50.0, 0.449).unwrap();
        let fa = total_carbon(&[dev.clone()], Some(&ps));
        let cfa = total_carbon(&[dev.clone()], None);
        assert!(fa > cfa);
        assert_eq!(cfa, dev.cumulative_kg());
        assert_eq!(fa, dev.cumulative_kg() + ps.cumulative_kg());
    }
}
