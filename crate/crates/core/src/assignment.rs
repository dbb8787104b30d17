//! Static-by-hour traffic assignment: BPR volume delay, method of successive
//! averages, and hourly count emission per station.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::network::ModeGraph;
use crate::{Error, Result};

pub const HOURS: usize = 24;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentConfig {
    pub bpr_alpha: f64,
    pub bpr_beta: f64,
    pub max_iterations: usize,
    pub gap_tolerance: f64,
    /// Expansion weight applied when emitting counts (e.g. 10.0 for a 10%
    /// sample scaled back to the full population).
    pub scale_factor: f64,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            bpr_alpha: 0.15,
            bpr_beta: 4.0,
            max_iterations: 50,
            gap_tolerance: 1e-3,
            scale_factor: 1.0,
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bpr_alpha < 0.0 {
            return Err(Error::Config("bpr_alpha must be >= 0".into()));
        }
        if self.bpr_beta < 1.0 {
            return Err(Error::Config("bpr_beta must be >= 1".into()));
        }
        if self.gap_tolerance <= 0.0 {
            return Err(Error::Config("gap_tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Congested travel time t = t0 · (1 + alpha·(v/c)^beta).
pub fn bpr_travel_time(t0: f64, v: f64, c: f64, alpha: f64, beta: f64) -> f64 {
    debug_assert!(t0 > 0.0 && c > 0.0 && v >= 0.0);
    t0 * (1.0 + alpha * (v / c).powf(beta))
}

/// One decided car trip entering the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarTrip {
    pub agent_id: u64,
    pub leg: u32,
    pub origin_node: usize,
    pub destination_node: usize,
    pub departure_hour: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkState {
    pub edge_id: String,
    pub t0_s: f64,
    pub capacity_vph: f64,
    pub hourly_flow: [f64; HOURS],
}

impl LinkState {
    pub fn congested_time(&self, hour: usize, cfg: &AssignmentConfig) -> f64 {
        bpr_travel_time(
            self.t0_s,
            self.hourly_flow[hour],
            self.capacity_vph,
            cfg.bpr_alpha,
            cfg.bpr_beta,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub links: Vec<LinkState>,
    /// Relative gap reached per hour with demand.
    pub gaps: BTreeMap<u8, f64>,
    pub iterations: BTreeMap<u8, usize>,
    /// Final path per trip, as edge indices into the car graph.
    pub trip_paths: Vec<(u64, u32, Vec<usize>)>,
    pub converged: bool,
}

/// Relative gap: (Σ f·t − total shortest-path cost) / total shortest-path
/// cost. Zero demand defines a gap of 0.
pub fn relative_gap(current_cost: f64, shortest_cost: f64) -> f64 {
    if shortest_cost <= 0.0 {
        return 0.0;
    }
    ((current_cost - shortest_cost) / shortest_cost).max(0.0)
}

/// MSA on each departure hour independently: all-or-nothing loading on
/// congested times, then f ← f + (1/n)(y − f). Non-convergence keeps the best
/// iterate and reports the residual gap.
pub fn msa_iterate(
    trips: &[CarTrip],
    graph: &ModeGraph,
    cfg: &AssignmentConfig,
) -> Result<AssignmentResult> {
    cfg.validate()?;
    let mut links: Vec<LinkState> = graph
        .edges
        .iter()
        .map(|e| LinkState {
            edge_id: e.edge_id.clone(),
            t0_s: e.free_flow_time_s(),
            capacity_vph: e.capacity_vph,
            hourly_flow: [0.0; HOURS],
        })
        .collect();

    let mut by_hour: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, trip) in trips.iter().enumerate() {
        if trip.departure_hour as usize >= HOURS {
            return Err(Error::rejected(format!(
                "trip for agent {} departs at hour {}",
                trip.agent_id, trip.departure_hour
            )));
        }
        by_hour.entry(trip.departure_hour).or_default().push(i);
    }

    let mut gaps = BTreeMap::new();
    let mut iterations = BTreeMap::new();
    let mut trip_paths: Vec<(u64, u32, Vec<usize>)> =
        trips.iter().map(|t| (t.agent_id, t.leg, Vec::new())).collect();
    let mut converged = true;

    for (&hour, trip_idx) in &by_hour {
        let h = hour as usize;
        let mut flows = vec![0.0f64; links.len()];
        let mut gap = f64::INFINITY;
        let mut iters = 0usize;

        for n in 1..=cfg.max_iterations {
            // All-or-nothing on current congested times.
            let times: Vec<f64> = links
                .iter()
                .enumerate()
                .map(|(e, l)| {
                    bpr_travel_time(l.t0_s, flows[e], l.capacity_vph, cfg.bpr_alpha, cfg.bpr_beta)
                })
                .collect();
            let mut aux = vec![0.0f64; links.len()];
            let mut shortest_cost = 0.0f64;
            for &ti in trip_idx {
                let trip = &trips[ti];
                let path = graph
                    .shortest_path(trip.origin_node, trip.destination_node, |ei, _| times[ei])
                    .ok_or_else(|| {
                        Error::NoRoute(format!(
                            "car trip for agent {} leg {} has no path",
                            trip.agent_id, trip.leg
                        ))
                    })?;
                shortest_cost += path.edges.iter().map(|&e| times[e]).sum::<f64>();
                for &e in &path.edges {
                    aux[e] += 1.0;
                }
                trip_paths[ti].2 = path.edges.clone();
            }
            // Gap of the *current* flows against this iteration's shortest paths.
            let current_cost: f64 = flows.iter().zip(&times).map(|(f, t)| f * t).sum();
            gap = relative_gap(current_cost, shortest_cost);
            iters = n;
            if n > 1 && gap < cfg.gap_tolerance {
                break;
            }
            let step = 1.0 / n as f64;
            for e in 0..flows.len() {
                flows[e] += step * (aux[e] - flows[e]);
            }
        }
        if gap >= cfg.gap_tolerance {
            converged = false;
        }
        gaps.insert(hour, gap);
        iterations.insert(hour, iters);
        for (e, link) in links.iter_mut().enumerate() {
            link.hourly_flow[h] = flows[e];
        }
    }

    Ok(AssignmentResult {
        links,
        gaps,
        iterations,
        trip_paths,
        converged,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationCount {
    pub station_id: String,
    pub hour: u8,
    pub simulated_count: f64,
}

/// Scales link flows by the expansion factor and maps them onto count
/// stations. Station map rows are (station_id, edge_id).
pub fn emit_counts(
    links: &[LinkState],
    station_map: &[(String, String)],
    scale_factor: f64,
) -> Result<Vec<StationCount>> {
    let by_edge: BTreeMap<&str, &LinkState> =
        links.iter().map(|l| (l.edge_id.as_str(), l)).collect();
    let mut out = Vec::new();
    for (station_id, edge_id) in station_map {
        let link = by_edge.get(edge_id.as_str()).ok_or_else(|| {
            Error::rejected(format!("station {station_id} maps to unknown edge {edge_id}"))
        })?;
        for hour in 0..HOURS {
            out.push(StationCount {
                station_id: station_id.clone(),
                hour: hour as u8,
                simulated_count: link.hourly_flow[hour] * scale_factor,
            });
        }
    }
    Ok(out)
}

pub fn read_station_map(path: &std::path::Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse("station map rows need station_id,edge_id".into()));
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

pub fn write_counts(path: &std::path::Path, counts: &[StationCount]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for c in counts {
        wtr.serialize(c)?;
    }
    wtr.flush()?;
    Ok(())
}
