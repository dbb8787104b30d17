//! Per-trip route option generation across all travel modes.

use serde::{Deserialize, Serialize};

use crate::locations::Building;
use crate::network::{Mode, ModeGraph, BIKE_SPEED_MS, WALK_SPEED_MS};
use crate::osm::distance;
use crate::schedule::DayType;
use crate::transit::{Timetable, TransitLeg, TransitParams};
use crate::{Error, Result};

/// Option identifiers pack agent, leg and option index into one integer:
/// `agent_id * 10_000 + (leg - 1) * 100 + option_index`, with `leg` and
/// `option_index` starting at 1.
pub fn encode_route_id(agent_id: u64, leg: u32, option_index: u32) -> u64 {
    debug_assert!(leg >= 1 && option_index >= 1 && option_index < 100);
    agent_id * 10_000 + (leg as u64 - 1) * 100 + option_index as u64
}

pub fn decode_route_id(route_id: u64) -> (u64, u32, u32) {
    let agent_id = route_id / 10_000;
    let rest = route_id % 10_000;
    (agent_id, (rest / 100) as u32 + 1, (rest % 100) as u32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteLeg {
    pub description: String,
    pub meters: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteOption {
    pub route_id: u64,
    pub mode: Mode,
    pub duration_s: f64,
    pub length_m: f64,
    pub legs: Vec<RouteLeg>,
    /// Road edges traversed, for car options fed to assignment.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edge_ids: Vec<String>,
}

/// All routable layers bundled together.
pub struct MultimodalNetwork {
    pub walk: ModeGraph,
    pub bike: ModeGraph,
    pub car: ModeGraph,
    pub timetable: Option<Timetable>,
    pub transit_params: TransitParams,
}

impl MultimodalNetwork {
    fn graph_option(
        &self,
        graph: &ModeGraph,
        mode: Mode,
        from: &Building,
        to: &Building,
        route_id: u64,
        access_speed: f64,
    ) -> Option<RouteOption> {
        let from_node = graph.snap(from.position)?;
        let to_node = graph.snap(to.position)?;
        let access_m = distance(from.position, graph.positions[from_node]);
        let egress_m = distance(graph.positions[to_node], to.position);
        if from_node == to_node {
            // Degenerate snap: pure access + egress.
            let meters = access_m + egress_m;
            let seconds = meters / access_speed;
            return Some(RouteOption {
                route_id,
                mode,
                duration_s: seconds,
                length_m: meters,
                legs: vec![RouteLeg {
                    description: format!("{} direct", mode.label()),
                    meters,
                    seconds,
                }],
                edge_ids: Vec::new(),
            });
        }
        let path = graph.shortest_path(from_node, to_node, |_, e| e.free_flow_time_s())?;
        let mut legs = Vec::new();
        if access_m > 0.0 {
            legs.push(RouteLeg {
                description: "access walk".into(),
                meters: access_m,
                seconds: access_m / WALK_SPEED_MS,
            });
        }
        legs.push(RouteLeg {
            description: format!("{} on network", mode.label()),
            meters: path.length_m,
            seconds: path.duration_s,
        });
        if egress_m > 0.0 {
            legs.push(RouteLeg {
                description: "egress walk".into(),
                meters: egress_m,
                seconds: egress_m / WALK_SPEED_MS,
            });
        }
        let duration_s = legs.iter().map(|l| l.seconds).sum();
        let length_m = legs.iter().map(|l| l.meters).sum();
        Some(RouteOption {
            route_id,
            mode,
            duration_s,
            length_m,
            legs,
            edge_ids: if mode == Mode::Passenger {
                path.edges.iter().map(|e| graph.edges[*e].edge_id.clone()).collect()
            } else {
                Vec::new()
            },
        })
    }

    fn transit_option(
        &self,
        from: &Building,
        to: &Building,
        depart_after_s: u32,
        day: DayType,
        route_id: u64,
    ) -> Option<RouteOption> {
        let tt = self.timetable.as_ref()?;
        let it = tt.earliest_arrival(from.position, to.position, depart_after_s, day, &self.transit_params)?;
        let legs = it
            .legs
            .iter()
            .map(|l| match l {
                TransitLeg::AccessWalk { meters, seconds } => RouteLeg {
                    description: "access walk".into(),
                    meters: *meters,
                    seconds: *seconds,
                },
                TransitLeg::Ride { trip_id, from_stop, to_stop, meters, seconds } => RouteLeg {
                    description: format!("ride {trip_id} {from_stop}->{to_stop}"),
                    meters: *meters,
                    seconds: *seconds,
                },
                TransitLeg::TransferWalk { meters, seconds } => RouteLeg {
                    description: "transfer walk".into(),
                    meters: *meters,
                    seconds: *seconds,
                },
                TransitLeg::EgressWalk { meters, seconds } => RouteLeg {
                    description: "egress walk".into(),
                    meters: *meters,
                    seconds: *seconds,
                },
            })
            .collect();
        Some(RouteOption {
            route_id,
            mode: Mode::PublicTransport,
            duration_s: (it.arrival_s - depart_after_s) as f64,
            length_m: it.length_m,
            legs,
            edge_ids: Vec::new(),
        })
    }

    /// Builds the option set for one trip in a fixed mode order
    /// (pedestrian, bicycle, passenger, public transport), numbering options
    /// consecutively from 1. Modes without a feasible route are skipped; an
    /// empty result is an error.
    pub fn route_options(
        &self,
        agent_id: u64,
        leg: u32,
        from: &Building,
        to: &Building,
        depart_after_s: u32,
        day: DayType,
    ) -> Result<Vec<RouteOption>> {
        if from.building_id == to.building_id {
            return Err(Error::rejected(format!(
                "trip for agent {agent_id} leg {leg} starts and ends at building {}",
                from.building_id
            )));
        }
        let mut options: Vec<RouteOption> = Vec::new();
        for mode in [Mode::Pedestrian, Mode::Bicycle, Mode::Passenger, Mode::PublicTransport] {
            let route_id = encode_route_id(agent_id, leg, options.len() as u32 + 1);
            let opt = match mode {
                Mode::Pedestrian => {
                    self.graph_option(&self.walk, mode, from, to, route_id, WALK_SPEED_MS)
                }
                Mode::Bicycle => {
                    self.graph_option(&self.bike, mode, from, to, route_id, BIKE_SPEED_MS)
                }
                Mode::Passenger => {
                    self.graph_option(&self.car, mode, from, to, route_id, WALK_SPEED_MS)
                }
                Mode::PublicTransport => self.transit_option(from, to, depart_after_s, day, route_id),
            };
            if let Some(o) = opt {
                options.push(o);
            }
        }
        if options.is_empty() {
            return Err(Error::EmptyOptionSet(format!(
                "agent {agent_id} leg {leg}: no mode produced a feasible route"
            )));
        }
        Ok(options)
    }
}

/// Flat row for the per-trip option table artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptionRow {
    pub agent_id: u64,
    pub leg: u32,
    pub route_id: u64,
    pub mode: String,
    pub duration_s: f64,
    pub length_m: f64,
}

pub fn write_option_table(path: &std::path::Path, rows: &[OptionRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}
