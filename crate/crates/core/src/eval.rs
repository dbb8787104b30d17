//! Validation indicators: modal split, trip-length/duration histograms, RMSE
//! against reference surveys, stratified splits, and count-profile shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::network::Mode;
use crate::{Error, Result};

/// Default histogram edges, kilometres. The last bin is open-ended.
pub const LENGTH_EDGES_KM: [f64; 8] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, f64::INFINITY];
/// Default histogram edges, minutes. The last bin is open-ended.
pub const DURATION_EDGES_MIN: [f64; 8] = [5.0, 10.0, 15.0, 20.0, 30.0, 45.0, 60.0, f64::INFINITY];

pub const MODE_ORDER: [&str; 4] = ["walk", "bike", "mit", "public_transport"];

/// One completed trip with its decided mode, as consumed by the evaluator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTrip {
    pub agent_id: u64,
    pub mode: Mode,
    pub length_m: f64,
    pub duration_s: f64,
    /// Expansion weight (1.0 unless agents carry survey weights).
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Upper bin edges; strictly increasing, last may be infinite. An
    /// infinite (open-ended) edge is written as JSON `null`.
    #[serde(with = "edge_serde")]
    pub edges: Vec<f64>,
    /// Percentage per bin; sums to 100 within 1e-6 for nonempty trip sets.
    pub percentages: Vec<f64>,
}

/// JSON has no literal for infinity, so open-ended edges round-trip as null.
mod edge_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(edges: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        edges
            .iter()
            .map(|e| e.is_finite().then_some(*e))
            .collect::<Vec<Option<f64>>>()
            .serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(deserializer)?
            .into_iter()
            .map(|e| e.unwrap_or(f64::INFINITY))
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceDataset {
    pub region: String,
    /// (walk, bike, mit, public_transport) percentages.
    pub modal_split: [f64; 4],
    #[serde(default)]
    pub length_histogram: Option<Histogram>,
    #[serde(default)]
    pub duration_histogram: Option<Histogram>,
    /// Optional stratified splits, attribute -> group -> 4-way split.
    #[serde(default)]
    pub stratified: BTreeMap<String, BTreeMap<String, [f64; 4]>>,
}

impl ReferenceDataset {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.modal_split.iter().sum();
        if (sum - 100.0).abs() > 0.5 {
            return Err(Error::rejected(format!(
                "{}: modal split sums to {sum}, expected 100 ± 0.5",
                self.region
            )));
        }
        for h in [&self.length_histogram, &self.duration_histogram].into_iter().flatten() {
            let s: f64 = h.percentages.iter().sum();
            if (s - 100.0).abs() > 0.5 {
                return Err(Error::rejected(format!(
                    "{}: histogram sums to {s}, expected 100 ± 0.5",
                    self.region
                )));
            }
        }
        Ok(())
    }
}

fn mode_slot(mode: Mode) -> usize {
    match mode {
        Mode::Pedestrian => 0,
        Mode::Bicycle => 1,
        Mode::Passenger => 2,
        Mode::PublicTransport => 3,
    }
}

/// Trip-weighted 4-way shares (walk, bike, MIT, public transport) in
/// percentage points.
pub fn modal_split(trips: &[EvalTrip]) -> Result<[f64; 4]> {
    if trips.is_empty() {
        return Err(Error::rejected("modal split of an empty trip set"));
    }
    let mut shares = [0.0f64; 4];
    let mut total = 0.0;
    for trip in trips {
        shares[mode_slot(trip.mode)] += trip.weight;
        total += trip.weight;
    }
    for s in &mut shares {
        *s = *s / total * 100.0;
    }
    Ok(shares)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistDimension {
    Length,
    Duration,
}

/// Percentage histogram over trip lengths (km) or durations (minutes).
pub fn distribution_histogram(
    trips: &[EvalTrip],
    dimension: HistDimension,
    edges: &[f64],
) -> Result<Histogram> {
    if trips.is_empty() {
        return Err(Error::rejected("histogram of an empty trip set"));
    }
    debug_assert!(edges.windows(2).all(|w| w[0] < w[1]));
    let mut counts = vec![0.0f64; edges.len()];
    let mut total = 0.0;
    for trip in trips {
        let value = match dimension {
            HistDimension::Length => trip.length_m / 1000.0,
            HistDimension::Duration => trip.duration_s / 60.0,
        };
        let bin = edges
            .iter()
            .position(|&e| value < e)
            .unwrap_or(edges.len() - 1);
        counts[bin] += trip.weight;
        total += trip.weight;
    }
    let percentages = counts.iter().map(|c| c / total * 100.0).collect();
    Ok(Histogram {
        edges: edges.to_vec(),
        percentages,
    })
}

/// Root-mean-square error between two percentage vectors.
pub fn rmse(simulated: &[f64], reference: &[f64]) -> Result<f64> {
    if simulated.len() != reference.len() {
        return Err(Error::rejected(format!(
            "rmse length mismatch: {} vs {}",
            simulated.len(),
            reference.len()
        )));
    }
    let k = simulated.len() as f64;
    let sum: f64 = simulated
        .iter()
        .zip(reference)
        .map(|(s, r)| (s - r) * (s - r))
        .sum();
    Ok((sum / k).sqrt())
}

pub const MIN_GROUP_SIZE: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSplit {
    pub group: String,
    pub n_trips: usize,
    /// None when the group fell below the minimum sample threshold.
    pub split: Option<[f64; 4]>,
    pub excluded: bool,
}

/// Modal split per value of an agent attribute. Groups with fewer than
/// `MIN_GROUP_SIZE` trips are excluded and flagged.
pub fn split_by_attribute(
    trips: &[EvalTrip],
    agent_groups: &BTreeMap<u64, String>,
    attribute: &str,
) -> Result<Vec<GroupSplit>> {
    let mut grouped: BTreeMap<String, Vec<EvalTrip>> = BTreeMap::new();
    for trip in trips {
        let group = agent_groups.get(&trip.agent_id).ok_or_else(|| {
            Error::rejected(format!(
                "agent {} lacks attribute {attribute}",
                trip.agent_id
            ))
        })?;
        grouped.entry(group.clone()).or_default().push(trip.clone());
    }
    let mut out = Vec::new();
    for (group, group_trips) in grouped {
        if group_trips.len() < MIN_GROUP_SIZE {
            out.push(GroupSplit {
                group,
                n_trips: group_trips.len(),
                split: None,
                excluded: true,
            });
        } else {
            out.push(GroupSplit {
                group,
                n_trips: group_trips.len(),
                split: Some(modal_split(&group_trips)?),
                excluded: false,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndicatorRmse {
    pub modality: Option<f64>,
    pub duration: Option<f64>,
    pub length: Option<f64>,
    pub average: Option<f64>,
    /// Indicators missing from the reference dataset.
    pub skipped: Vec<String>,
}

fn average_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.len() == values.len() {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    } else if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn indicator_rmse(
    sim_split: &[f64; 4],
    sim_length: &Histogram,
    sim_duration: &Histogram,
    reference: &ReferenceDataset,
) -> Result<IndicatorRmse> {
    let modality = Some(rmse(sim_split, &reference.modal_split)?);
    let mut skipped = Vec::new();
    let length = match &reference.length_histogram {
        Some(h) => Some(rmse(&sim_length.percentages, &h.percentages)?),
        None => {
            skipped.push("length".to_string());
            None
        }
    };
    let duration = match &reference.duration_histogram {
        Some(h) => Some(rmse(&sim_duration.percentages, &h.percentages)?),
        None => {
            skipped.push("duration".to_string());
            None
        }
    };
    let average = average_of(&[modality, duration, length]);
    Ok(IndicatorRmse {
        modality,
        duration,
        length,
        average,
        skipped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingRow {
    pub region: String,
    pub is_simulation: bool,
    pub rmse: IndicatorRmse,
}

/// Scores the simulation against each reference region and sorts ascending by
/// average RMSE (the simulation row included).
pub fn interregional_compare(
    sim_split: &[f64; 4],
    sim_length: &Histogram,
    sim_duration: &Histogram,
    home_region: &ReferenceDataset,
    others: &[ReferenceDataset],
) -> Result<Vec<RankingRow>> {
    let mut rows = vec![RankingRow {
        region: "simulation".to_string(),
        is_simulation: true,
        rmse: indicator_rmse(sim_split, sim_length, sim_duration, home_region)?,
    }];
    for other in others {
        // Other regions scored against the same home reference, mirroring a
        // cross-region comparison table.
        let modality = Some(rmse(&other.modal_split, &home_region.modal_split)?);
        let mut skipped = Vec::new();
        let length = match (&other.length_histogram, &home_region.length_histogram) {
            (Some(a), Some(b)) => Some(rmse(&a.percentages, &b.percentages)?),
            _ => {
                skipped.push("length".to_string());
                None
            }
        };
        let duration = match (&other.duration_histogram, &home_region.duration_histogram) {
            (Some(a), Some(b)) => Some(rmse(&a.percentages, &b.percentages)?),
            _ => {
                skipped.push("duration".to_string());
                None
            }
        };
        let average = average_of(&[modality, duration, length]);
        rows.push(RankingRow {
            region: other.region.clone(),
            is_simulation: false,
            rmse: IndicatorRmse {
                modality,
                duration,
                length,
                average,
                skipped,
            },
        });
    }
    rows.sort_by(|a, b| {
        let ka = a.rmse.average.unwrap_or(f64::INFINITY);
        let kb = b.rmse.average.unwrap_or(f64::INFINITY);
        ka.partial_cmp(&kb)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.region.cmp(&b.region))
    });
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedProfiles {
    pub simulated: Vec<f64>,
    pub observed: Vec<f64>,
    pub shape_rmse: f64,
    /// True when the simulated profile was all zeros.
    pub simulated_flat_zero: bool,
}

/// Divides each 24-hour profile by its own peak and reports the RMSE between
/// the unit-peak shapes.
pub fn normalize_counts(simulated: &[f64], observed: &[f64]) -> Result<NormalizedProfiles> {
    if simulated.len() != observed.len() {
        return Err(Error::rejected("profile length mismatch"));
    }
    let obs_peak = observed.iter().cloned().fold(0.0f64, f64::max);
    if obs_peak <= 0.0 {
        return Err(Error::rejected("observed profile peak must be positive"));
    }
    let sim_peak = simulated.iter().cloned().fold(0.0f64, f64::max);
    let simulated_flat_zero = sim_peak <= 0.0;
    let sim_norm: Vec<f64> = if simulated_flat_zero {
        vec![0.0; simulated.len()]
    } else {
        simulated.iter().map(|v| v / sim_peak).collect()
    };
    let obs_norm: Vec<f64> = observed.iter().map(|v| v / obs_peak).collect();
    let shape_rmse = rmse(&sim_norm, &obs_norm)?;
    Ok(NormalizedProfiles {
        simulated: sim_norm,
        observed: obs_norm,
        shape_rmse,
        simulated_flat_zero,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub modal_split: [f64; 4],
    pub length_histogram: Histogram,
    pub duration_histogram: Histogram,
    pub rmse: IndicatorRmse,
    pub stratified: BTreeMap<String, Vec<GroupSplit>>,
    pub ranking: Vec<RankingRow>,
    pub count_profiles: BTreeMap<String, NormalizedProfiles>,
    pub n_trips: usize,
}

pub fn load_reference(path: &std::path::Path) -> Result<ReferenceDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let dataset: ReferenceDataset = serde_json::from_str(&text)?;
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_report_json(path: &std::path::Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Long-format CSV companion to the JSON report (indicator, key, value).
pub fn write_report_csv(path: &std::path::Path, report: &EvalReport) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["indicator", "key", "value"])?;
    for (mode, value) in MODE_ORDER.iter().zip(report.modal_split.iter()) {
        wtr.write_record(["modal_split", mode, &format!("{value:.6}")])?;
    }
    for (edge, pct) in report.length_histogram.edges.iter().zip(&report.length_histogram.percentages) {
        wtr.write_record(["length_histogram", &format!("<{edge}km"), &format!("{pct:.6}")])?;
    }
    for (edge, pct) in report
        .duration_histogram
        .edges
        .iter()
        .zip(&report.duration_histogram.percentages)
    {
        wtr.write_record(["duration_histogram", &format!("<{edge}min"), &format!("{pct:.6}")])?;
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "skipped".into());
    wtr.write_record(["rmse", "modality", &fmt(report.rmse.modality)])?;
    wtr.write_record(["rmse", "duration", &fmt(report.rmse.duration)])?;
    wtr.write_record(["rmse", "length", &fmt(report.rmse.length)])?;
    wtr.write_record(["rmse", "average", &fmt(report.rmse.average)])?;
    wtr.flush()?;
    Ok(())
}
