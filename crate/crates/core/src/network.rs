//! Per-mode road graphs built from OSM ways, with label-setting shortest
//! paths at free-flow speeds.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::osm::{distance, LocalProjection, OsmData};
use crate::{Error, Result};

pub const WALK_SPEED_MS: f64 = 1.4;
pub const BIKE_SPEED_MS: f64 = 4.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pedestrian,
    Bicycle,
    Passenger,
    PublicTransport,
}

impl Mode {
    pub const ROAD_MODES: [Mode; 3] = [Mode::Pedestrian, Mode::Bicycle, Mode::Passenger];
    pub const ALL: [Mode; 4] = [
        Mode::Pedestrian,
        Mode::Bicycle,
        Mode::Passenger,
        Mode::PublicTransport,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Pedestrian => "pedestrian",
            Mode::Bicycle => "bicycle",
            Mode::Passenger => "passenger",
            Mode::PublicTransport => "public_transport",
        }
    }

    /// Lenient parse accepting the synonyms seen in generated output.
    pub fn parse(text: &str) -> Option<Mode> {
        let t = text.trim().to_lowercase().replace([' ', '-'], "_");
        match t.as_str() {
            "pedestrian" | "walk" | "walking" | "foot" | "on_foot" => Some(Mode::Pedestrian),
            "bicycle" | "bike" | "cycling" | "cycle" => Some(Mode::Bicycle),
            "passenger" | "car" | "drive" | "driving" | "mit" => Some(Mode::Passenger),
            "public_transport" | "public_transportation" | "transit" | "pt" | "bus" | "train"
            | "subway" => Some(Mode::PublicTransport),
            _ => None,
        }
    }
}

pub type NodeIndex = usize;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    /// Stable identifier `way<osm_way_id>:<segment>` (direction-less).
    pub edge_id: String,
    pub from: NodeIndex,
    pub to: NodeIndex,
    pub length_m: f64,
    pub speed_ms: f64,
    /// Capacity in vehicles/hour; meaningful for the car graph only.
    pub capacity_vph: f64,
}

impl Edge {
    pub fn free_flow_time_s(&self) -> f64 {
        self.length_m / self.speed_ms
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModeGraph {
    /// OSM node id per graph node, index-aligned with `positions`.
    pub node_ids: Vec<i64>,
    pub positions: Vec<(f64, f64)>,
    pub edges: Vec<Edge>,
    pub adjacency: Vec<Vec<usize>>,
}

impl ModeGraph {
    pub fn add_node(&mut self, osm_id: i64, pos: (f64, f64)) -> NodeIndex {
        self.node_ids.push(osm_id);
        self.positions.push(pos);
        self.adjacency.push(Vec::new());
        self.node_ids.len() - 1
    }

    pub fn add_edge(&mut self, edge: Edge) {
        self.adjacency[edge.from].push(self.edges.len());
        self.edges.push(edge);
    }

    /// Nearest graph node to a projected position; ties by lowest node index.
    pub fn snap(&self, pos: (f64, f64)) -> Option<NodeIndex> {
        (0..self.positions.len()).min_by(|&a, &b| {
            distance(pos, self.positions[a])
                .partial_cmp(&distance(pos, self.positions[b]))
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        })
    }

    /// Dijkstra by travel time with deterministic tie-breaking by node index.
    /// `edge_time(edge index, edge)` lets callers inject congested times.
    pub fn shortest_path<F>(&self, from: NodeIndex, to: NodeIndex, edge_time: F) -> Option<PathResult>
    where
        F: Fn(usize, &Edge) -> f64,
    {
        #[derive(PartialEq)]
        struct Entry(f64, NodeIndex);
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                other
                    .0
                    .partial_cmp(&self.0)
                    .unwrap_or(Ordering::Equal)
                    .then(other.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let n = self.node_ids.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev_edge: Vec<Option<usize>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(Entry(0.0, from));
        while let Some(Entry(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            if u == to {
                break;
            }
            for &ei in &self.adjacency[u] {
                let e = &self.edges[ei];
                let nd = d + edge_time(ei, e);
                if nd < dist[e.to] {
                    dist[e.to] = nd;
                    prev_edge[e.to] = Some(ei);
                    heap.push(Entry(nd, e.to));
                }
            }
        }
        if !dist[to].is_finite() {
            return None;
        }
        let mut edges = Vec::new();
        let mut cur = to;
        while cur != from {
            let ei = prev_edge[cur]?;
            edges.push(ei);
            cur = self.edges[ei].from;
        }
        edges.reverse();
        let length_m = edges.iter().map(|&ei| self.edges[ei].length_m).sum();
        Some(PathResult {
            duration_s: dist[to],
            length_m,
            edges,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub duration_s: f64,
    pub length_m: f64,
    pub edges: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSpeeds {
    pub walk_ms: f64,
    pub bike_ms: f64,
    /// Fallback car speeds (m/s) by highway class when `maxspeed` is absent.
    pub car_class_defaults: BTreeMap<String, f64>,
    pub car_default_ms: f64,
}

impl Default for ModeSpeeds {
    fn default() -> Self {
        let kmh = |v: f64| v / 3.6;
        let car_class_defaults: BTreeMap<String, f64> = [
            ("motorway", kmh(120.0)),
            ("trunk", kmh(100.0)),
            ("primary", kmh(50.0)),
            ("secondary", kmh(50.0)),
            ("tertiary", kmh(50.0)),
            ("residential", kmh(30.0)),
            ("unclassified", kmh(50.0)),
            ("service", kmh(20.0)),
            ("living_street", kmh(10.0)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        ModeSpeeds {
            walk_ms: WALK_SPEED_MS,
            bike_ms: BIKE_SPEED_MS,
            car_class_defaults,
            car_default_ms: kmh(50.0),
        }
    }
}

fn car_allowed(class: &str) -> bool {
    matches!(
        class,
        "motorway"
            | "motorway_link"
            | "trunk"
            | "trunk_link"
            | "primary"
            | "primary_link"
            | "secondary"
            | "secondary_link"
            | "tertiary"
            | "tertiary_link"
            | "residential"
            | "unclassified"
            | "service"
            | "living_street"
    )
}

fn walk_allowed(class: &str) -> bool {
    !matches!(
        class,
        "motorway" | "motorway_link" | "trunk" | "trunk_link"
    )
}

fn bike_allowed(class: &str, tags: &BTreeMap<String, String>) -> bool {
    match class {
        "motorway" | "motorway_link" | "trunk" | "trunk_link" | "steps" => false,
        "footway" | "pedestrian" => tags.get("bicycle").map(|v| v == "yes").unwrap_or(false),
        _ => true,
    }
}

fn default_capacity_vph(class: &str) -> f64 {
    let per_lane = match class {
        "motorway" | "motorway_link" => 2000.0,
        "trunk" | "trunk_link" => 1800.0,
        "primary" | "primary_link" => 1000.0,
        "secondary" | "secondary_link" => 900.0,
        "tertiary" | "tertiary_link" => 800.0,
        _ => 600.0,
    };
    per_lane
}

/// Builds the three road-mode graphs from an OSM extract. `projection` must
/// match the building catalog's projection so snapping is consistent.
pub fn build_road_graphs(
    data: &OsmData,
    projection: &LocalProjection,
    speeds: &ModeSpeeds,
) -> Result<BTreeMap<Mode, ModeGraph>> {
    let mut graphs: BTreeMap<Mode, ModeGraph> = Mode::ROAD_MODES
        .iter()
        .map(|m| (*m, ModeGraph::default()))
        .collect();
    let mut node_maps: BTreeMap<Mode, HashMap<i64, NodeIndex>> =
        Mode::ROAD_MODES.iter().map(|m| (*m, HashMap::new())).collect();

    let mut ways: Vec<&crate::osm::OsmWay> = data
        .ways
        .iter()
        .filter(|w| w.tags.contains_key("highway"))
        .collect();
    ways.sort_by_key(|w| w.id);

    for way in ways {
        let class = way.tags.get("highway").map(|s| s.as_str()).unwrap_or("");
        let oneway = way.tags.get("oneway").map(|v| v == "yes").unwrap_or(false)
            || class.starts_with("motorway");
        let lanes: f64 = way
            .tags
            .get("lanes")
            .and_then(|v| v.parse().ok())
            .unwrap_or(1.0);
        let car_speed = way
            .tags
            .get("maxspeed")
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(|kmh| kmh / 3.6)
            .or_else(|| speeds.car_class_defaults.get(class).copied())
            .unwrap_or(speeds.car_default_ms);

        for (mode, allowed, speed) in [
            (Mode::Pedestrian, walk_allowed(class), speeds.walk_ms),
            (Mode::Bicycle, bike_allowed(class, &way.tags), speeds.bike_ms),
            (Mode::Passenger, car_allowed(class), car_speed),
        ] {
            if !allowed {
                continue;
            }
            let graph = graphs.get_mut(&mode).unwrap();
            let node_map = node_maps.get_mut(&mode).unwrap();
            for (seg, pair) in way.node_refs.windows(2).enumerate() {
                let (Some(a), Some(b)) = (data.nodes.get(&pair[0]), data.nodes.get(&pair[1]))
                else {
                    continue;
                };
                let pa = projection.project(a.lat, a.lon);
                let pb = projection.project(b.lat, b.lon);
                let length_m = distance(pa, pb);
                if length_m <= 0.0 {
                    continue;
                }
                let ia = *node_map
                    .entry(a.id)
                    .or_insert_with(|| graph.add_node(a.id, pa));
                let ib = *node_map
                    .entry(b.id)
                    .or_insert_with(|| graph.add_node(b.id, pb));
                let edge_id = format!("way{}:{}", way.id, seg);
                let capacity = default_capacity_vph(class) * lanes;
                graph.add_edge(Edge {
                    edge_id: edge_id.clone(),
                    from: ia,
                    to: ib,
                    length_m,
                    speed_ms: speed,
                    capacity_vph: capacity,
                });
                let reverse_ok = mode != Mode::Passenger || !oneway;
                if reverse_ok {
                    graph.add_edge(Edge {
                        edge_id,
                        from: ib,
                        to: ia,
                        length_m,
                        speed_ms: speed,
                        capacity_vph: capacity,
                    });
                }
            }
        }
    }
    Ok(graphs)
}

/// Query handed to the routers once origin/destination buildings are
/// resolved.
#[derive(Debug, Clone)]
pub struct ItineraryQuery {
    pub origin_building: u64,
    pub destination_building: u64,
    pub origin_pos: (f64, f64),
    pub destination_pos: (f64, f64),
    /// Seconds from midnight.
    pub depart_after_s: u32,
}

impl ItineraryQuery {
    pub fn validate(&self) -> Result<()> {
        if self.origin_building == self.destination_building {
            return Err(Error::rejected("origin equals destination building"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::osm::{OsmNode, OsmWay};

    fn node(id: i64, lat: f64, lon: f64) -> OsmNode {
        OsmNode {
            id,
            lat,
            lon,
            tags: BTreeMap::new(),
        }
    }

    fn way(id: i64, refs: &[i64], tags: &[(&str, &str)]) -> OsmWay {
        OsmWay {
            id,
            node_refs: refs.to_vec(),
            tags: tags
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn line_data() -> OsmData {
        let mut data = OsmData::default();
        // Three nodes ~1000 m apart along a meridian.
        let step = 1000.0 / 111_194.9; // degrees latitude per 1000 m
        for i in 0..3 {
            data.nodes.insert(i, node(i, 52.5 + step * i as f64, 13.4));
        }
        data
    }

    #[test]
    fn maxspeed_tag_sets_car_edge_speed() {
        let mut data = line_data();
        data.ways.push(way(10, &[0, 1, 2], &[("highway", "primary"), ("maxspeed", "50")]));
        let proj = LocalProjection::new(52.5, 13.4);
        let graphs = build_road_graphs(&data, &proj, &ModeSpeeds::default()).unwrap();
        let car = &graphs[&Mode::Passenger];
        assert!(!car.edges.is_empty());
        for e in &car.edges {
            assert!((e.speed_ms - 13.888888888888889).abs() < 1e-9);
        }
    }

    #[test]
    fn footway_excluded_from_car_graph() {
        let mut data = line_data();
        data.ways.push(way(10, &[0, 1], &[("highway", "footway")]));
        let proj = LocalProjection::new(52.5, 13.4);
        let graphs = build_road_graphs(&data, &proj, &ModeSpeeds::default()).unwrap();
        assert!(graphs[&Mode::Passenger].edges.is_empty());
        assert!(!graphs[&Mode::Pedestrian].edges.is_empty());
        // Footway closed to bikes unless tagged bicycle=yes.
        assert!(graphs[&Mode::Bicycle].edges.is_empty());
    }

    #[test]
    fn straight_kilometer_walk_duration() {
        let mut data = line_data();
        data.ways.push(way(10, &[0, 1], &[("highway", "residential")]));
        let proj = LocalProjection::new(52.5, 13.4);
        let graphs = build_road_graphs(&data, &proj, &ModeSpeeds::default()).unwrap();
        let walk = &graphs[&Mode::Pedestrian];
        let res = walk.shortest_path(0, 1, |_, e| e.free_flow_time_s()).unwrap();
        // 1000 m at 1.4 m/s ≈ 714 s.
        assert!((res.duration_s - 714.2857).abs() < 2.0, "got {}", res.duration_s);
        assert!((res.length_m - 1000.0).abs() < 2.0);
    }

    #[test]
    fn unreachable_destination_is_none() {
        let mut g = ModeGraph::default();
        let a = g.add_node(1, (0.0, 0.0));
        let b = g.add_node(2, (10.0, 0.0));
        assert!(g.shortest_path(a, b, |_, e| e.free_flow_time_s()).is_none());
    }

    #[test]
    fn mode_synonyms_parse() {
        assert_eq!(Mode::parse("walk"), Some(Mode::Pedestrian));
        assert_eq!(Mode::parse("public transport"), Some(Mode::PublicTransport));
        assert_eq!(Mode::parse("Public Transportation"), Some(Mode::PublicTransport));
        assert_eq!(Mode::parse("car"), Some(Mode::Passenger));
        assert_eq!(Mode::parse("hovercraft"), None);
    }
}
