//! GTFS timetable and round-based earliest-arrival transit search.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::osm::{distance, LocalProjection};
use crate::schedule::DayType;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stop {
    pub stop_id: String,
    pub pos: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct TripTimes {
    pub trip_id: String,
    /// Arrival/departure seconds per stop along the pattern.
    pub arrivals: Vec<u32>,
    pub departures: Vec<u32>,
    pub weekday: bool,
    pub weekend: bool,
}

/// Trips sharing an identical ordered stop sequence.
#[derive(Debug, Clone)]
pub struct Pattern {
    pub stop_seq: Vec<usize>,
    /// Sorted by departure time at the first stop.
    pub trips: Vec<TripTimes>,
}

#[derive(Debug, Clone)]
pub struct Timetable {
    pub stops: Vec<Stop>,
    pub patterns: Vec<Pattern>,
    /// Patterns serving each stop: (pattern index, position within pattern).
    pub stop_patterns: Vec<Vec<(usize, usize)>>,
    /// Footpaths between nearby stops: (other stop, walk seconds, meters).
    pub transfers: Vec<Vec<(usize, f64, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitParams {
    pub access_radius_m: f64,
    pub transfer_radius_m: f64,
    pub max_transfers: u32,
    pub walk_speed_ms: f64,
}

impl Default for TransitParams {
    fn default() -> Self {
        TransitParams {
            access_radius_m: 500.0,
            transfer_radius_m: 300.0,
            max_transfers: 3,
            walk_speed_ms: crate::network::WALK_SPEED_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitLeg {
    AccessWalk { meters: f64, seconds: f64 },
    Ride { trip_id: String, from_stop: String, to_stop: String, meters: f64, seconds: f64 },
    TransferWalk { meters: f64, seconds: f64 },
    EgressWalk { meters: f64, seconds: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Itinerary {
    pub arrival_s: u32,
    pub length_m: f64,
    pub legs: Vec<TransitLeg>,
    pub boardings: u32,
}

fn parse_gtfs_time(text: &str) -> Result<u32> {
    let parts: Vec<&str> = text.trim().split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("bad GTFS time `{text}`")));
    }
    let h: u32 = parts[0].parse().map_err(|_| Error::Parse(format!("bad GTFS time `{text}`")))?;
    let m: u32 = parts[1].parse().map_err(|_| Error::Parse(format!("bad GTFS time `{text}`")))?;
    let s: u32 = parts[2].parse().map_err(|_| Error::Parse(format!("bad GTFS time `{text}`")))?;
    Ok(h * 3600 + m * 60 + s)
}

struct GtfsFiles {
    stops: String,
    trips: String,
    stop_times: String,
    calendar: String,
}

fn read_gtfs_files(path: &Path) -> Result<GtfsFiles> {
    let get = |name: &str| -> Result<String> {
        if path.is_dir() {
            let p = path.join(name);
            if !p.exists() {
                return Err(Error::rejected(format!("GTFS bundle missing {name}")));
            }
            Ok(std::fs::read_to_string(p)?)
        } else {
            let file = std::fs::File::open(path)?;
            let mut archive = zip::ZipArchive::new(file)
                .map_err(|e| Error::rejected(format!("bad GTFS zip: {e}")))?;
            let mut entry = archive
                .by_name(name)
                .map_err(|_| Error::rejected(format!("GTFS bundle missing {name}")))?;
            let mut text = String::new();
            entry.read_to_string(&mut text)?;
            Ok(text)
        }
    };
    Ok(GtfsFiles {
        stops: get("stops.txt")?,
        trips: get("trips.txt")?,
        stop_times: get("stop_times.txt")?,
        calendar: get("calendar.txt")?,
    })
}

fn csv_rows(text: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.push(
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(out)
}

/// Loads a GTFS bundle (zip or directory of `.txt` files) and builds the
/// pattern-grouped timetable. Validates that trips reference existing stops
/// and services.
pub fn load_timetable(path: &Path, projection: &LocalProjection, params: &TransitParams) -> Result<Timetable> {
    let files = read_gtfs_files(path)?;

    let mut stops = Vec::new();
    let mut stop_index: HashMap<String, usize> = HashMap::new();
    for row in csv_rows(&files.stops)? {
        let stop_id = row.get("stop_id").cloned().unwrap_or_default();
        let lat: f64 = row
            .get("stop_lat")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse("stop missing stop_lat".into()))?;
        let lon: f64 = row
            .get("stop_lon")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse("stop missing stop_lon".into()))?;
        stop_index.insert(stop_id.clone(), stops.len());
        stops.push(Stop {
            stop_id,
            pos: projection.project(lat, lon),
        });
    }

    let mut services: HashMap<String, (bool, bool)> = HashMap::new();
    for row in csv_rows(&files.calendar)? {
        let id = row.get("service_id").cloned().unwrap_or_default();
        let day = |name: &str| row.get(name).map(|v| v.trim() == "1").unwrap_or(false);
        let weekday = day("monday") || day("tuesday") || day("wednesday") || day("thursday") || day("friday");
        let weekend = day("saturday") || day("sunday");
        services.insert(id, (weekday, weekend));
    }
    if services.is_empty() {
        return Err(Error::rejected("GTFS calendar defines no services"));
    }

    let mut trip_service: HashMap<String, (bool, bool)> = HashMap::new();
    for row in csv_rows(&files.trips)? {
        let trip_id = row.get("trip_id").cloned().unwrap_or_default();
        let service_id = row.get("service_id").cloned().unwrap_or_default();
        let days = services.get(&service_id).ok_or_else(|| {
            Error::rejected(format!("trip {trip_id} references unknown service {service_id}"))
        })?;
        trip_service.insert(trip_id, *days);
    }

    // stop_times grouped per trip, ordered by stop_sequence.
    let mut per_trip: BTreeMap<String, Vec<(u32, usize, u32, u32)>> = BTreeMap::new();
    for row in csv_rows(&files.stop_times)? {
        let trip_id = row.get("trip_id").cloned().unwrap_or_default();
        if !trip_service.contains_key(&trip_id) {
            return Err(Error::rejected(format!("stop_times references unknown trip {trip_id}")));
        }
        let stop_id = row.get("stop_id").cloned().unwrap_or_default();
        let stop = *stop_index
            .get(&stop_id)
            .ok_or_else(|| Error::rejected(format!("stop_times references unknown stop {stop_id}")))?;
        let seq: u32 = row
            .get("stop_sequence")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse("bad stop_sequence".into()))?;
        let arr = parse_gtfs_time(row.get("arrival_time").map(|s| s.as_str()).unwrap_or(""))?;
        let dep = parse_gtfs_time(row.get("departure_time").map(|s| s.as_str()).unwrap_or(""))?;
        per_trip.entry(trip_id).or_default().push((seq, stop, arr, dep));
    }

    // Group trips by stop sequence into patterns.
    let mut pattern_index: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut patterns: Vec<Pattern> = Vec::new();
    for (trip_id, mut times) in per_trip {
        times.sort_by_key(|t| t.0);
        let seq: Vec<usize> = times.iter().map(|t| t.1).collect();
        let (weekday, weekend) = trip_service[&trip_id];
        let trip = TripTimes {
            trip_id,
            arrivals: times.iter().map(|t| t.2).collect(),
            departures: times.iter().map(|t| t.3).collect(),
            weekday,
            weekend,
        };
        let idx = *pattern_index.entry(seq.clone()).or_insert_with(|| {
            patterns.push(Pattern {
                stop_seq: seq,
                trips: Vec::new(),
            });
            patterns.len() - 1
        });
        patterns[idx].trips.push(trip);
    }
    for p in &mut patterns {
        p.trips.sort_by_key(|t| t.departures.first().copied().unwrap_or(0));
    }

    let mut stop_patterns = vec![Vec::new(); stops.len()];
    for (pi, p) in patterns.iter().enumerate() {
        for (pos, &s) in p.stop_seq.iter().enumerate() {
            stop_patterns[s].push((pi, pos));
        }
    }

    let mut transfers = vec![Vec::new(); stops.len()];
    for i in 0..stops.len() {
        for j in 0..stops.len() {
            if i == j {
                continue;
            }
            let d = distance(stops[i].pos, stops[j].pos);
            if d <= params.transfer_radius_m {
                transfers[i].push((j, d / params.walk_speed_ms, d));
            }
        }
    }

    Ok(Timetable {
        stops,
        patterns,
        stop_patterns,
        transfers,
    })
}

impl Timetable {
    fn trip_runs(&self, trip: &TripTimes, day: DayType) -> bool {
        match day {
            DayType::Weekday => trip.weekday,
            DayType::Weekend => trip.weekend,
        }
    }

    /// Round-based earliest-arrival search. Walk access/egress within
    /// `access_radius_m`, up to `max_transfers` transfers, and the itinerary
    /// must board at least one vehicle.
    pub fn earliest_arrival(
        &self,
        origin: (f64, f64),
        destination: (f64, f64),
        depart_after_s: u32,
        day: DayType,
        params: &TransitParams,
    ) -> Option<Itinerary> {
        let n = self.stops.len();
        let rounds = params.max_transfers as usize + 1;
        const INF: u32 = u32::MAX;

        #[derive(Clone)]
        enum Back {
            Access,
            Ride { pattern: usize, trip: usize, board_pos: usize, alight_pos: usize, from_round: usize },
            Transfer { from_stop: usize, meters: f64 },
        }
        // labels[k][stop]: earliest arrival using exactly k boardings.
        let mut labels: Vec<Vec<u32>> = vec![vec![INF; n]; rounds + 1];
        let mut back: Vec<Vec<Option<Back>>> = vec![vec![None; n]; rounds + 1];

        for (s, stop) in self.stops.iter().enumerate() {
            let d = distance(origin, stop.pos);
            if d <= params.access_radius_m {
                let t = depart_after_s + (d / params.walk_speed_ms).ceil() as u32;
                if t < labels[0][s] {
                    labels[0][s] = t;
                    back[0][s] = Some(Back::Access);
                }
            }
        }

        for k in 1..=rounds {
            let mut improved = false;
            for (pi, pattern) in self.patterns.iter().enumerate() {
                // Earliest boarding sweep along the pattern.
                let mut current: Option<(usize, usize)> = None; // (trip idx, board pos)
                for (pos, &stop) in pattern.stop_seq.iter().enumerate() {
                    if let Some((ti, board_pos)) = current {
                        let arr = pattern.trips[ti].arrivals[pos];
                        if arr < labels[k][stop] {
                            labels[k][stop] = arr;
                            back[k][stop] = Some(Back::Ride {
                                pattern: pi,
                                trip: ti,
                                board_pos,
                                alight_pos: pos,
                                from_round: k - 1,
                            });
                            improved = true;
                        }
                    }
                    let reach = labels[k - 1][stop];
                    if reach != INF {
                        // Earliest runnable trip departing this stop at or
                        // after the round-(k-1) arrival. Trips are sorted by
                        // departure, so a smaller index means an earlier trip.
                        let candidate = pattern
                            .trips
                            .iter()
                            .enumerate()
                            .filter(|(_, t)| self.trip_runs(t, day))
                            .find(|(_, t)| t.departures[pos] >= reach);
                        if let Some((ti, _)) = candidate {
                            let switch = match current {
                                None => true,
                                Some((ci, _)) => ti < ci,
                            };
                            if switch {
                                current = Some((ti, pos));
                            }
                        }
                    }
                }
            }
            if !improved {
                break;
            }
            // Footpath transfers stay within the same round.
            for s in 0..n {
                if labels[k][s] == INF {
                    continue;
                }
                let base = labels[k][s];
                for &(other, secs, meters) in &self.transfers[s] {
                    let t = base + secs.ceil() as u32;
                    if t < labels[k][other] {
                        labels[k][other] = t;
                        back[k][other] = Some(Back::Transfer { from_stop: s, meters });
                    }
                }
            }
        }

        // Best egress over rounds >= 1 (must ride at least once).
        let mut best: Option<(u32, usize, usize, f64)> = None; // (arrival, round, stop, egress m)
        for k in 1..=rounds {
            for (s, stop) in self.stops.iter().enumerate() {
                if labels[k][s] == INF {
                    continue;
                }
                let d = distance(destination, stop.pos);
                if d > params.access_radius_m {
                    continue;
                }
                let arrival = labels[k][s] + (d / params.walk_speed_ms).ceil() as u32;
                let replace = match best {
                    None => true,
                    Some((ba, _, bs, _)) => {
                        arrival < ba || (arrival == ba && self.stops[s].stop_id < self.stops[bs].stop_id)
                    }
                };
                if replace {
                    best = Some((arrival, k, s, d));
                }
            }
        }
        let (arrival_s, mut round, mut stop, egress_m) = best?;

        // Reconstruct legs.
        let mut legs_rev: Vec<TransitLeg> = vec![TransitLeg::EgressWalk {
            meters: egress_m,
            seconds: egress_m / params.walk_speed_ms,
        }];
        let mut boardings = 0u32;
        loop {
            match back[round][stop].clone() {
                Some(Back::Access) | None => {
                    let d = distance(origin, self.stops[stop].pos);
                    legs_rev.push(TransitLeg::AccessWalk {
                        meters: d,
                        seconds: d / params.walk_speed_ms,
                    });
                    break;
                }
                Some(Back::Transfer { from_stop, meters }) => {
                    legs_rev.push(TransitLeg::TransferWalk {
                        meters,
                        seconds: meters / params.walk_speed_ms,
                    });
                    stop = from_stop;
                }
                Some(Back::Ride {
                    pattern,
                    trip,
                    board_pos,
                    alight_pos,
                    from_round,
                }) => {
                    let p = &self.patterns[pattern];
                    let t = &p.trips[trip];
                    let mut meters = 0.0;
                    for w in board_pos..alight_pos {
                        meters += distance(
                            self.stops[p.stop_seq[w]].pos,
                            self.stops[p.stop_seq[w + 1]].pos,
                        );
                    }
                    legs_rev.push(TransitLeg::Ride {
                        trip_id: t.trip_id.clone(),
                        from_stop: self.stops[p.stop_seq[board_pos]].stop_id.clone(),
                        to_stop: self.stops[p.stop_seq[alight_pos]].stop_id.clone(),
                        meters,
                        seconds: (t.arrivals[alight_pos].saturating_sub(t.departures[board_pos])) as f64,
                    });
                    boardings += 1;
                    stop = p.stop_seq[board_pos];
                    round = from_round;
                }
            }
        }
        legs_rev.reverse();
        let length_m = legs_rev
            .iter()
            .map(|l| match l {
                TransitLeg::AccessWalk { meters, .. }
                | TransitLeg::Ride { meters, .. }
                | TransitLeg::TransferWalk { meters, .. }
                | TransitLeg::EgressWalk { meters, .. } => *meters,
            })
            .sum();
        Some(Itinerary {
            arrival_s,
            length_m,
            legs: legs_rev,
            boardings,
        })
    }
}
