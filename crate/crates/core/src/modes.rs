//! Mode-choice prompting, decision parsing, and vehicle-consistency repair.

use serde::{Deserialize, Serialize};

use crate::backend::{extract_json, Backend, ChatRequest, TaskKind};
use crate::network::Mode;
use crate::persona::AgentProfile;
use crate::routing::RouteOption;
use crate::schedule::TripIntent;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    DefaultFewshotCot,
    NoSystemPrompt,
    FewshotNoCot,
    ZeroshotCot,
}

impl Default for PromptVariant {
    fn default() -> Self {
        PromptVariant::DefaultFewshotCot
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default_fewshot_cot" => Ok(PromptVariant::DefaultFewshotCot),
            "no_system_prompt" => Ok(PromptVariant::NoSystemPrompt),
            "fewshot_no_cot" => Ok(PromptVariant::FewshotNoCot),
            "zeroshot_cot" => Ok(PromptVariant::ZeroshotCot),
            other => Err(Error::Config(format!("unknown prompt variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDecision {
    pub route_id: u64,
    pub means_of_transport: Mode,
    pub reasoning: String,
}

/// Persisted per-leg decision record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub agent_id: u64,
    pub leg: u32,
    pub route_id: u64,
    pub mode: Mode,
    pub reasoning: String,
    pub repaired: bool,
}

const SYSTEM_PREAMBLE: &str = "You live in Berlin and have several tasks to complete today, \
for which you need to plan several trips. Berliners typically\n\
- walk for very short trips (<1 km),\n\
- bike for medium trips (1-5 km),\n\
- use public transport for longer trips (>5 km),\n\
- and drive only if they have a car immediately available.";

const EXEMPLARS: &str = "The eight examples below are *shuffled*, but together they reflect a \
typical Berlin modal split (2 walk, 1 bicycle, 3 car, 2 public transport):\n\n\
1. 0.3 km in 5 min -> **walk** (\"300 m is fastest on foot\")\n\
2. 4.0 km in 10 min -> **car** (\"fastest for a 4 km morning commute\")\n\
3. 8.0 km in 20 min -> **public transportation** (\"subway is most reliable\")\n\
4. 1.5 km in 7 min -> **bicycle** (\"Berlin's bike paths make this ideal\")\n\
5. 0.7 km in 10 min (with groceries) -> **walk** (\"easiest to carry bags\")\n\
6. 5.0 km in 15 min -> **public transportation** (\"smooth transfer on S-Bahn\")\n\
7. 3.0 km in 12 min (rainy) -> **car** (\"stay dry and faster than cycling\")\n\
8. 12.0 km in 30 min -> **car** (\"direct suburban route is best by car\")";

const COT_CLAUSE: &str = "For each route, first reason in one sentence how you would usually \
cover the distance, then select the means of transport.";

const CONSISTENCY_CLAUSE: &str = "Switch transportation modes only when it logically fits the \
scenario. For example, you may only use your bicycle or car if it is already with you, and you \
should choose walking or public transit only if your bicycle or car remains at home or is \
scheduled to be picked up later.";

/// Renders the decision prompt as (optional system message, user message).
pub fn build_mode_prompt(
    profile: &AgentProfile,
    trips: &[TripIntent],
    options: &[Vec<RouteOption>],
    variant: PromptVariant,
    external_factors: Option<&str>,
) -> (Option<String>, String) {
    debug_assert_eq!(trips.len(), options.len());
    let mut user = format!("You are: {}\n\n", profile.persona_text);

    match variant {
        PromptVariant::DefaultFewshotCot | PromptVariant::NoSystemPrompt | PromptVariant::FewshotNoCot => {
            user.push_str(EXEMPLARS);
            user.push_str("\n\n");
        }
        PromptVariant::ZeroshotCot => {}
    }
    if let Some(factors) = external_factors {
        user.push_str(factors);
        user.push_str("\n\n");
    }
    user.push_str(
        "You live in Berlin. Today, you will go to several places. You have checked various \
         ways to get from one place to another. ",
    );
    match variant {
        PromptVariant::DefaultFewshotCot | PromptVariant::NoSystemPrompt => {
            user.push_str(COT_CLAUSE);
            user.push(' ');
        }
        PromptVariant::FewshotNoCot => {}
        PromptVariant::ZeroshotCot => {
            user.push_str(
                "Think step by step about each trip before selecting the means of transport. ",
            );
        }
    }
    user.push_str(CONSISTENCY_CLAUSE);
    user.push_str(" Your route options are as follows:\n");

    for (trip, opts) in trips.iter().zip(options) {
        user.push_str(&format!(
            "\nLocation Change {}:\n  Purpose: {}\n  From: {}\n  To:   {}\n",
            trip.sequence_index, trip.purpose_text, trip.from_category, trip.to_category
        ));
        for opt in opts {
            user.push_str(&format!(
                "    Option {}: {} covering {:.1} km in {:.0} min\n",
                opt.route_id,
                opt.mode.label(),
                opt.length_m / 1000.0,
                opt.duration_s / 60.0
            ));
        }
    }
    user.push_str(
        "\nRespond with a JSON array holding one object per location change, each with keys \
         \"route_id\", \"means_of_transport\", and \"reasoning\".",
    );

    let system = match variant {
        PromptVariant::NoSystemPrompt => None,
        _ => Some(SYSTEM_PREAMBLE.to_string()),
    };
    (system, user)
}

/// Parses decision objects out of a backend response and validates each
/// against the offered options. Accepts the single-quoted object style some
/// models emit.
pub fn parse_decision(response: &str, options: &[Vec<RouteOption>]) -> Result<Vec<ModeDecision>> {
    let mut remaining = response;
    let mut objects: Vec<serde_json::Value> = Vec::new();
    while let Some(snippet) = extract_json(remaining) {
        let parsed: Option<serde_json::Value> = serde_json::from_str(snippet)
            .ok()
            .or_else(|| serde_json::from_str(&snippet.replace('\'', "\"")).ok());
        if let Some(value) = parsed {
            match value {
                serde_json::Value::Array(items) => objects.extend(items),
                obj @ serde_json::Value::Object(_) => objects.push(obj),
                _ => {}
            }
        }
        let advance = remaining.find(snippet).unwrap_or(0) + snippet.len();
        remaining = &remaining[advance..];
        if objects.len() >= options.len() {
            break;
        }
    }
    if objects.is_empty() {
        return Err(Error::Parse("no decision objects in response".into()));
    }

    let mut decisions = Vec::new();
    for (i, offered) in options.iter().enumerate() {
        let obj = objects
            .get(i)
            .ok_or_else(|| Error::Parse(format!("missing decision for trip {}", i + 1)))?;
        let route_id = obj["route_id"]
            .as_u64()
            .or_else(|| obj["route_id"].as_str().and_then(|s| s.parse().ok()))
            .ok_or_else(|| Error::Parse(format!("decision {} lacks route_id", i + 1)))?;
        let option = offered
            .iter()
            .find(|o| o.route_id == route_id)
            .ok_or_else(|| Error::Parse(format!("route_id {route_id} not offered for trip {}", i + 1)))?;
        let mode_text = obj["means_of_transport"]
            .as_str()
            .ok_or_else(|| Error::Parse(format!("decision {} lacks means_of_transport", i + 1)))?;
        let mode = Mode::parse(mode_text)
            .ok_or_else(|| Error::Parse(format!("unknown means_of_transport `{mode_text}`")))?;
        if mode != option.mode {
            return Err(Error::Parse(format!(
                "decision mode {} does not match option {} ({})",
                mode.label(),
                route_id,
                option.mode.label()
            )));
        }
        decisions.push(ModeDecision {
            route_id,
            means_of_transport: mode,
            reasoning: obj["reasoning"].as_str().unwrap_or("").to_string(),
        });
    }
    Ok(decisions)
}

/// Where the agent's private vehicles currently sit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VehicleState {
    pub owns_car: bool,
    pub owns_bike: bool,
    /// Building holding the vehicle; vehicles start at home.
    pub car_at: Option<u64>,
    pub bike_at: Option<u64>,
}

impl VehicleState {
    pub fn at_home(home_building: u64, owns_car: bool, owns_bike: bool) -> Self {
        VehicleState {
            owns_car,
            owns_bike,
            car_at: owns_car.then_some(home_building),
            bike_at: owns_bike.then_some(home_building),
        }
    }

    fn available(&self, mode: Mode, at_building: u64) -> bool {
        match mode {
            Mode::Passenger => self.owns_car && self.car_at == Some(at_building),
            Mode::Bicycle => self.owns_bike && self.bike_at == Some(at_building),
            Mode::Pedestrian | Mode::PublicTransport => true,
        }
    }

    fn ride(&mut self, mode: Mode, to_building: u64) {
        match mode {
            Mode::Passenger => self.car_at = Some(to_building),
            Mode::Bicycle => self.bike_at = Some(to_building),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairEntry {
    pub leg: u32,
    pub original_mode: Mode,
    pub repaired_mode: Mode,
    pub reason: String,
}

/// Forward pass over the agent's day. A passenger or bicycle decision whose
/// vehicle is not co-located with the agent is replaced by the fastest
/// feasible offered option; vehicle locations update after each accepted leg.
pub fn enforce_vehicle_consistency(
    decisions: &[ModeDecision],
    options: &[Vec<RouteOption>],
    trip_buildings: &[(u64, u64)],
    state: &mut VehicleState,
) -> (Vec<ModeDecision>, Vec<RepairEntry>) {
    debug_assert_eq!(decisions.len(), options.len());
    debug_assert_eq!(decisions.len(), trip_buildings.len());
    let mut repaired = Vec::with_capacity(decisions.len());
    let mut log = Vec::new();
    for (i, decision) in decisions.iter().enumerate() {
        let (from_b, to_b) = trip_buildings[i];
        let offered = &options[i];
        let mut accepted = decision.clone();
        if !state.available(decision.means_of_transport, from_b) {
            let fallback = offered
                .iter()
                .filter(|o| state.available(o.mode, from_b))
                .min_by(|a, b| {
                    a.duration_s
                        .partial_cmp(&b.duration_s)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.route_id.cmp(&b.route_id))
                })
                .expect("walk option keeps the feasible set nonempty");
            log.push(RepairEntry {
                leg: i as u32 + 1,
                original_mode: decision.means_of_transport,
                repaired_mode: fallback.mode,
                reason: if matches!(decision.means_of_transport, Mode::Passenger)
                    && !state.owns_car
                {
                    "agent owns no car".into()
                } else if matches!(decision.means_of_transport, Mode::Bicycle) && !state.owns_bike {
                    "agent owns no bicycle".into()
                } else {
                    format!(
                        "{} not at building {from_b}",
                        decision.means_of_transport.label()
                    )
                },
            });
            accepted = ModeDecision {
                route_id: fallback.route_id,
                means_of_transport: fallback.mode,
                reasoning: decision.reasoning.clone(),
            };
        }
        state.ride(accepted.means_of_transport, to_b);
        repaired.push(accepted);
    }
    (repaired, log)
}

fn fastest_offered(offered: &[RouteOption]) -> &RouteOption {
    offered
        .iter()
        .min_by(|a, b| {
            a.duration_s
                .partial_cmp(&b.duration_s)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.route_id.cmp(&b.route_id))
        })
        .expect("option sets are nonempty by construction")
}

/// Runs the full decision flow for one agent: prompt, parse, one regeneration
/// on parse failure, then per-trip default to the fastest offered option.
#[allow(clippy::too_many_arguments)]
pub fn decide_modes(
    backend: &Backend,
    profile: &AgentProfile,
    trips: &[TripIntent],
    options: &[Vec<RouteOption>],
    trip_buildings: &[(u64, u64)],
    home_building: u64,
    variant: PromptVariant,
    external_factors: Option<&str>,
    seed: u64,
) -> Result<(Vec<DecisionRecord>, Vec<RepairEntry>)> {
    if trips.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let (system, user) = build_mode_prompt(profile, trips, options, variant, external_factors);
    let hint = mode_hint(profile, options);

    let mut decisions: Option<Vec<ModeDecision>> = None;
    for attempt in 0..2u64 {
        let req = ChatRequest {
            task: TaskKind::ModeChoice,
            system: system.clone(),
            user: user.clone(),
            seed: seed.wrapping_add(attempt),
            hint: Some(hint.clone()),
        };
        match backend.complete(&req).and_then(|r| parse_decision(&r, options)) {
            Ok(d) => {
                decisions = Some(d);
                break;
            }
            Err(_) if attempt == 0 => continue,
            Err(_) => break,
        }
    }
    // Default path: fastest offered option per trip.
    let decisions = decisions.unwrap_or_else(|| {
        options
            .iter()
            .map(|offered| {
                let best = fastest_offered(offered);
                ModeDecision {
                    route_id: best.route_id,
                    means_of_transport: best.mode,
                    reasoning: "No decision.".into(),
                }
            })
            .collect()
    });

    let owns_car = attr_count(profile, "car_ownership") > 0;
    let owns_bike = attr_count(profile, "bike_ownership") > 0;
    let mut state = VehicleState::at_home(home_building, owns_car, owns_bike);
    let (final_decisions, log) =
        enforce_vehicle_consistency(&decisions, options, trip_buildings, &mut state);

    let records = final_decisions
        .iter()
        .enumerate()
        .map(|(i, d)| DecisionRecord {
            agent_id: profile.agent_id,
            leg: i as u32 + 1,
            route_id: d.route_id,
            mode: d.means_of_transport,
            reasoning: d.reasoning.clone(),
            repaired: log.iter().any(|r| r.leg == i as u32 + 1),
        })
        .collect();
    Ok((records, log))
}

fn attr_count(profile: &AgentProfile, key: &str) -> i64 {
    profile
        .attributes
        .get(key)
        .and_then(|v| v.render().parse::<f64>().ok())
        .map(|v| v as i64)
        .unwrap_or(0)
}

fn attr_text(profile: &AgentProfile, key: &str) -> String {
    profile
        .attributes
        .get(key)
        .map(|v| v.render())
        .unwrap_or_default()
}

/// Structured payload for the deterministic stub backend.
pub fn mode_hint(profile: &AgentProfile, options: &[Vec<RouteOption>]) -> serde_json::Value {
    let trips: Vec<serde_json::Value> = options
        .iter()
        .map(|offered| {
            let opts: Vec<serde_json::Value> = offered
                .iter()
                .map(|o| {
                    serde_json::json!({
                        "route_id": o.route_id,
                        "mode": o.mode.label(),
                        "length_m": o.length_m,
                        "duration_s": o.duration_s,
                    })
                })
                .collect();
            serde_json::json!({ "options": opts })
        })
        .collect();
    serde_json::json!({
        "trips": trips,
        "owns_car": attr_count(profile, "car_ownership") > 0,
        "owns_bike": attr_count(profile, "bike_ownership") > 0,
        "economic_status": attr_text(profile, "economic_status"),
    })
}

pub fn write_decisions(path: &std::path::Path, records: &[DecisionRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_decisions(path: &std::path::Path) -> Result<Vec<DecisionRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
