//! File formats: dataset and carbon-intensity CSV loaders plus the CSV/JSON
//! report writers. All outputs are UTF-8 with LF line endings.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use flcarbon_core::energy::CarbonIntensitySchedule;
use flcarbon_core::harness::{Protocol, RunConfig, RunOutput, StopReason, SweepCell, PS_ENTITY};
use flcarbon_core::model::Dataset;
use serde::Serialize;

/// Loads a labeled dataset from a CSV of feature columns followed by one
/// integer label column. A header row is required (names are not
/// interpreted); widths are checked against the model architecture.
pub fn load_dataset_csv(path: &Path, input_dim: usize, n_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open dataset {}", path.display()))?;
    let width = input_dim + 1;
    if reader.headers()?.len() != width {
        bail!(
            "{}: expected {} columns ({} features + label), found {}",
            path.display(),
            width,
            input_dim,
            reader.headers()?.len()
        );
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != width {
            bail!("{}: row {} has {} columns, expected {width}", path.display(), row + 2, record.len());
        }
        for field in record.iter().take(input_dim) {
            features.push(
                field
                    .trim()
                    .parse::<f64>()
                    .with_context(|| format!("{}: row {}: bad feature {field:?}", path.display(), row + 2))?,
            );
        }
        let label: usize = record[input_dim]
            .trim()
            .parse()
            .with_context(|| format!("{}: row {}: bad label {:?}", path.display(), row + 2, &record[input_dim]))?;
        labels.push(label);
    }
    if labels.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    let dataset = Dataset { features, labels, input_dim, n_classes };
    dataset.validate().map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(dataset)
}

/// Loads stepwise carbon-intensity schedules from a CSV with columns
/// `entity_id, start_time_s, intensity_kg_per_kwh`. Entity 0 is the
/// parameter server; devices are 1..=K. Entities without rows keep the
/// constant intensity from the config.
pub fn apply_schedule_csv(path: &Path, config: &mut RunConfig) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open schedule {}", path.display()))?;
    let mut steps: Vec<Vec<(f64, f64)>> = vec![Vec::new(); config.k + 1];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != 3 {
            bail!("{}: row {} has {} columns, expected 3", path.display(), row + 2, record.len());
        }
        let entity: usize = record[0].trim().parse().context("bad entity_id")?;
        let start: f64 = record[1].trim().parse().context("bad start_time_s")?;
        let intensity: f64 = record[2].trim().parse().context("bad intensity_kg_per_kwh")?;
        if entity > config.k {
            bail!("{}: row {}: entity {entity} out of range (K = {})", path.display(), row + 2, config.k);
        }
        steps[entity].push((start, intensity));
    }
    for entity_steps in &mut steps {
        entity_steps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    }
    if !steps[PS_ENTITY].is_empty() {
        config.carbon.ps_schedule = Some(CarbonIntensitySchedule { steps: steps[PS_ENTITY].clone() });
    }
    if steps[1..].iter().any(|s| !s.is_empty()) {
        config.carbon.device_schedules = Some(
            steps[1..]
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        CarbonIntensitySchedule::constant(config.carbon.device_intensity)
                    } else {
                        CarbonIntensitySchedule { steps: s.clone() }
                    }
                })
                .collect(),
        );
    }
    Ok(())
}

pub const ROUNDS_HEADER: [&str; 9] = [
    "round", "entity", "loss", "accuracy", "bits_tx", "bits_rx", "energy_j", "delta_c_kg",
    "c_tot_kg",
];

pub fn write_rounds_csv(path: &Path, output: &RunOutput) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writer.write_record(ROUNDS_HEADER)?;
    for round in &output.rounds {
        for e in &round.entries {
            writer.write_record([
                round.round.to_string(),
                e.entity.to_string(),
                e.loss.to_string(),
                e.accuracy.to_string(),
                e.bits_tx.to_string(),
                e.bits_rx.to_string(),
                e.energy_j.to_string(),
                e.delta_c_kg.to_string(),
                e.c_tot_kg.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryReport<'a> {
    summary: &'a flcarbon_core::harness::RunSummary,
    /// Effective config echo: every default filled in.
    config: &'a RunConfig,
}

pub fn write_summary_json(path: &Path, output: &RunOutput, config: &RunConfig) -> Result<()> {
    let report = SummaryReport { summary: &output.summary, config };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Fa => "fa",
        Protocol::Cfa => "cfa",
    }
}

fn stop_reason_name(r: StopReason) -> &'static str {
    match r {
        StopReason::CarbonBudgetReached => "carbon_budget_reached",
        StopReason::TargetAccuracyReached => "target_accuracy_reached",
        StopReason::MaxRoundsReached => "max_rounds_reached",
        StopReason::Diverged => "diverged",
    }
}

pub fn write_sweep_csv(path: &Path, results: &[(SweepCell, RunOutput)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writer.write_record([
        "index",
        "repetition",
        "protocol",
        "delta",
        "n_bits",
        "ee_com",
        "i_0",
        "i_k",
        "seed",
        "rounds_executed",
        "stop_reason",
        "final_accuracy",
        "final_loss",
        "c_tot_kg",
        "budget_overshoot_kg",
        "bits_total",
    ])?;
    for (cell, output) in results {
        let s = &output.summary;
        writer.write_record([
            cell.index.to_string(),
            cell.repetition.to_string(),
            protocol_name(cell.protocol).to_string(),
            cell.delta.to_string(),
            cell.n_bits.to_string(),
            cell.ee_com.to_string(),
            cell.i_0.to_string(),
            cell.i_k.to_string(),
            cell.seed.to_string(),
            s.rounds_executed.to_string(),
            stop_reason_name(s.stop_reason).to_string(),
            s.final_accuracy.to_string(),
            s.final_loss.to_string(),
            s.c_tot_kg.to_string(),
            s.budget_overshoot_kg.map(|v| v.to_string()).unwrap_or_default(),
            s.bits_total.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
