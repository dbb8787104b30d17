//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)] // each test target uses a different subset

use std::fmt::Write as FmtWrite;
use std::path::Path;

pub const CENTER_LAT: f64 = 52.5;
pub const CENTER_LON: f64 = 13.4;
const METERS_PER_DEG_LAT: f64 = 111_194.92664455873; // 6371000 * pi / 180

/// Converts local meters (relative to the fixture center) to lat/lon so the
/// engine's projection maps them back to roughly the same offsets.
pub fn to_lat_lon(x_m: f64, y_m: f64) -> (f64, f64) {
    let lat = CENTER_LAT + y_m / METERS_PER_DEG_LAT;
    let lon = CENTER_LON + x_m / (METERS_PER_DEG_LAT * CENTER_LAT.to_radians().cos());
    (lat, lon)
}

/// Writes the toy-city OSM extract: a 6 km street grid (500 m spacing) plus
/// ~200 point buildings strung along the central east-west row. Homes cluster
/// in the west, offices in the east (≈5 km away), supermarkets throughout.
pub fn write_toy_osm(path: &Path) {
    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<osm version=\"0.6\">\n");
    let grid = 13; // 0..6000 m every 500 m
    let node_id = |ix: i64, iy: i64| 1000 + iy * 100 + ix;
    for iy in 0..grid {
        for ix in 0..grid {
            let (lat, lon) = to_lat_lon(ix as f64 * 500.0, iy as f64 * 500.0);
            writeln!(
                xml,
                "  <node id=\"{}\" lat=\"{lat:.7}\" lon=\"{lon:.7}\"/>",
                node_id(ix, iy)
            )
            .unwrap();
        }
    }
    // Horizontal and vertical streets.
    let mut way_id = 50_000;
    for iy in 0..grid {
        writeln!(xml, "  <way id=\"{way_id}\">").unwrap();
        for ix in 0..grid {
            writeln!(xml, "    <nd ref=\"{}\"/>", node_id(ix, iy)).unwrap();
        }
        xml.push_str("    <tag k=\"highway\" v=\"residential\"/>\n  </way>\n");
        way_id += 1;
    }
    for ix in 0..grid {
        writeln!(xml, "  <way id=\"{way_id}\">").unwrap();
        for iy in 0..grid {
            writeln!(xml, "    <nd ref=\"{}\"/>", node_id(ix, iy)).unwrap();
        }
        xml.push_str("    <tag k=\"highway\" v=\"residential\"/>\n  </way>\n");
        way_id += 1;
    }

    // Point buildings along the y = 3000 m row, offset at most 100 m from a
    // grid node so every building sits within walking range of the transit
    // stops strung along that row.
    let mut building_id = 200_000;
    let mut push_building = |x: f64, y: f64, key: &str, value: &str, xml: &mut String| {
        let (lat, lon) = to_lat_lon(x, y);
        writeln!(
            xml,
            "  <node id=\"{building_id}\" lat=\"{lat:.7}\" lon=\"{lon:.7}\">\n    <tag k=\"{key}\" v=\"{value}\"/>\n  </node>"
        )
        .unwrap();
        building_id += 1;
    };
    // 120 homes in the west (x 0..1500).
    for i in 0..120u32 {
        let x = (i % 16) as f64 * 100.0;
        let y = 3000.0 + ((i / 16) as f64 - 3.0) * 25.0;
        push_building(x, y, "building", "house", &mut xml);
    }
    // 30 offices in the east (x 5000..6000).
    for i in 0..30u32 {
        let x = 5000.0 + (i % 10) as f64 * 100.0;
        let y = 3000.0 + ((i / 10) as f64 - 1.0) * 50.0;
        push_building(x, y, "building", "office", &mut xml);
    }
    // 30 supermarkets spread along the whole row.
    for i in 0..30u32 {
        let x = i as f64 * 200.0;
        let y = 3050.0;
        push_building(x, y, "shop", "supermarket", &mut xml);
    }
    // 10 schools mid-town (x 2500..3400).
    for i in 0..10u32 {
        push_building(2500.0 + i as f64 * 100.0, 2950.0, "amenity", "school", &mut xml);
    }
    // 10 cafes west/mid.
    for i in 0..10u32 {
        push_building(500.0 + i as f64 * 250.0, 3075.0, "amenity", "cafe", &mut xml);
    }
    xml.push_str("</osm>\n");
    std::fs::write(path, xml).unwrap();
}

/// Mini-GTFS: an east-west line along y = 3000 m and a north-south line along
/// x = 3000 m, stops every 500 m, 10-minute weekday headways (05:00–23:00),
/// 1 minute between stops. The two lines share the city-center location so a
/// zero-length transfer connects them.
pub fn write_toy_gtfs(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let mut stops = String::from("stop_id,stop_name,stop_lat,stop_lon\n");
    let n_stops = 13;
    for i in 0..n_stops {
        let (lat, lon) = to_lat_lon(i as f64 * 500.0, 3000.0);
        writeln!(stops, "EW{i:02},EW Stop {i},{lat:.7},{lon:.7}").unwrap();
    }
    for i in 0..n_stops {
        let (lat, lon) = to_lat_lon(3000.0, i as f64 * 500.0);
        writeln!(stops, "NS{i:02},NS Stop {i},{lat:.7},{lon:.7}").unwrap();
    }
    std::fs::write(dir.join("stops.txt"), stops).unwrap();

    std::fs::write(
        dir.join("calendar.txt"),
        "service_id,monday,tuesday,wednesday,thursday,friday,saturday,sunday,start_date,end_date\n\
         WK,1,1,1,1,1,0,0,20250101,20261231\n",
    )
    .unwrap();

    let mut trips = String::from("route_id,service_id,trip_id\n");
    let mut stop_times = String::from("trip_id,arrival_time,departure_time,stop_id,stop_sequence\n");
    let mut trip_no = 0;
    for hour in 5..23 {
        for minute in (0..60).step_by(10) {
            for (line, dir_label, reverse) in [
                ("EW", "E", false),
                ("EW", "W", true),
                ("NS", "N", false),
                ("NS", "S", true),
            ] {
                let trip_id = format!("T{dir_label}{trip_no:04}");
                writeln!(trips, "{line}LINE,WK,{trip_id}").unwrap();
                for seq in 0..n_stops {
                    let stop = if reverse { n_stops - 1 - seq } else { seq };
                    let t = hour * 3600 + minute * 60 + seq * 60;
                    let hh = t / 3600;
                    let mm = (t % 3600) / 60;
                    let ss = t % 60;
                    writeln!(
                        stop_times,
                        "{trip_id},{hh:02}:{mm:02}:{ss:02},{hh:02}:{mm:02}:{ss:02},{line}{stop:02},{}",
                        seq + 1
                    )
                    .unwrap();
                }
            }
            trip_no += 1;
        }
    }
    std::fs::write(dir.join("trips.txt"), trips).unwrap();
    std::fs::write(dir.join("stop_times.txt"), stop_times).unwrap();
}

/// Survey microdata for 500 stub agents: every record owns a bicycle, car
/// ownership and occupation vary so the stub policy exercises every mode.
pub fn write_toy_microdata(path: &Path) {
    let mut csv = String::from(
        "record_id,weight,age,sex,occupation,economic_status,household_size,car_ownership,bike_ownership,income_band\n",
    );
    let occupations = ["full_time", "part_time", "student", "retiree", "unemployed"];
    let statuses = ["very_low", "low", "medium", "high", "very_high"];
    let incomes = ["under_1500", "1500_2000", "2000_3000", "3000_4000", "4000_5000"];
    for i in 0..50 {
        let occupation = occupations[i % occupations.len()];
        let status = statuses[(i / 5) % statuses.len()];
        let income = incomes[(i / 5) % incomes.len()];
        let sex = if i % 2 == 0 { "male" } else { "female" };
        let age = 20 + (i * 7) % 60;
        let car = u32::from(i % 3 != 0); // two thirds own a car
        writeln!(
            csv,
            "r{i:03},10.0,{age},{sex},{occupation},{status},{},{car},1,{income}",
            1 + i % 4
        )
        .unwrap();
    }
    std::fs::write(path, csv).unwrap();
}

/// Home-region reference dataset for the evaluator.
pub fn write_toy_reference(path: &Path) {
    let reference = serde_json::json!({
        "region": "toy_city",
        "modal_split": [27.0, 15.0, 34.0, 24.0],
        "length_histogram": {
            "edges": [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, null],
            "percentages": [12.0, 14.0, 18.0, 26.0, 16.0, 9.0, 4.0, 1.0]
        },
        "duration_histogram": {
            "edges": [5.0, 10.0, 15.0, 20.0, 30.0, 45.0, 60.0, null],
            "percentages": [1.3, 14.7, 19.0, 17.0, 24.0, 14.0, 7.0, 3.0]
        }
    });
    std::fs::write(path, reference.to_string()).unwrap();
}

/// Station map covering two central grid edges.
pub fn write_toy_station_map(path: &Path) {
    // Horizontal way for row y=3000 is 50006 (rows 0..12 -> ids 50000..50012).
    std::fs::write(
        path,
        "station_id,edge_id\nS_CENTRAL,way50006:5\nS_EAST,way50006:9\n",
    )
    .unwrap();
}

pub fn write_toy_config(dir: &Path, seed: u64, out_name: &str) -> std::path::PathBuf {
    let config = format!(
        r#"global_seed = {seed}
region = "toy_city"
sample_fraction = 1.0
scale_factor = 10.0
output_dir = "{out_name}"

[paths]
microdata = "microdata.csv"
osm = "city.osm.xml"
gtfs = "gtfs"
references = ["reference.json"]
station_map = "stations.csv"

[backend]
kind = "stub"

[date]
day_type = "weekday"
date_text = "a typical Tuesday"
"#
    );
    let path = dir.join(format!("config_{out_name}.toml"));
    std::fs::write(&path, config).unwrap();
    path
}

/// Builds every toy-city fixture file under `dir`.
pub fn build_toy_city(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    write_toy_osm(&dir.join("city.osm.xml"));
    write_toy_gtfs(&dir.join("gtfs"));
    write_toy_microdata(&dir.join("microdata.csv"));
    write_toy_reference(&dir.join("reference.json"));
    write_toy_station_map(&dir.join("stations.csv"));
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Bellman-Ford over every edge: an independent shortest-path oracle that
/// relaxes exhaustively instead of label-setting.
pub fn bellman_ford(
    n_nodes: usize,
    edges: &[(usize, usize, f64)],
    from: usize,
    to: usize,
) -> Option<f64> {
    let mut dist = vec![f64::INFINITY; n_nodes];
    dist[from] = 0.0;
    for _ in 0..n_nodes {
        let mut changed = false;
        for &(u, v, w) in edges {
            if dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    dist[to].is_finite().then_some(dist[to])
}

/// Exhaustive transit itinerary enumeration under the engine's rules: access
/// walk within the access radius, ride, then either egress, one footpath
/// transfer (within the transfer radius), or the next boarding; at most
/// `max_transfers` transfers, at least one boarding. Returns the earliest
/// achievable arrival at the destination.
pub fn exhaustive_transit_arrival(
    tt: &travelsim::transit::Timetable,
    params: &travelsim::transit::TransitParams,
    origin: (f64, f64),
    destination: (f64, f64),
    depart_after_s: u32,
    weekday: bool,
) -> Option<u32> {
    fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    }
    let walk = |meters: f64| (meters / params.walk_speed_ms).ceil() as u32;

    let mut best: Option<u32> = None;
    // State: (stop, time, boardings, rode, transferred-since-alight).
    let mut stack: Vec<(usize, u32, u32, bool, bool)> = Vec::new();
    for (s, stop) in tt.stops.iter().enumerate() {
        let d = dist(origin, stop.pos);
        if d <= params.access_radius_m {
            stack.push((s, depart_after_s + walk(d), 0, false, false));
        }
    }
    // Dominance pruning: earliest seen time per (stop, boardings, transferred).
    let mut seen: std::collections::HashMap<(usize, u32, bool), u32> =
        std::collections::HashMap::new();
    while let Some((stop, time, boardings, rode, transferred)) = stack.pop() {
        if let Some(&t) = seen.get(&(stop, boardings, transferred)) {
            if t <= time {
                continue;
            }
        }
        seen.insert((stop, boardings, transferred), time);
        if rode {
            let d = dist(destination, tt.stops[stop].pos);
            if d <= params.access_radius_m {
                let arrival = time + walk(d);
                if best.map(|b| arrival < b).unwrap_or(true) {
                    best = Some(arrival);
                }
            }
        }
        if boardings >= params.max_transfers + 1 {
            continue;
        }
        // Board any runnable trip serving this stop.
        for pattern in &tt.patterns {
            for (pos, &s) in pattern.stop_seq.iter().enumerate() {
                if s != stop {
                    continue;
                }
                for trip in &pattern.trips {
                    let runs = if weekday { trip.weekday } else { trip.weekend };
                    if !runs || trip.departures[pos] < time {
                        continue;
                    }
                    for alight in pos + 1..pattern.stop_seq.len() {
                        stack.push((
                            pattern.stop_seq[alight],
                            trip.arrivals[alight],
                            boardings + 1,
                            true,
                            false,
                        ));
                    }
                }
            }
        }
        // One footpath transfer between consecutive rides.
        if rode && !transferred {
            for (other, other_stop) in tt.stops.iter().enumerate() {
                if other == stop {
                    continue;
                }
                let d = dist(tt.stops[stop].pos, other_stop.pos);
                if d <= params.transfer_radius_m {
                    stack.push((other, time + walk(d), boardings, rode, true));
                }
            }
        }
    }
    best
}

/// Independent vehicle-location replay: walks an agent's day and reports how
/// many accepted decisions used a vehicle that was not co-located.
pub fn replay_vehicle_violations(
    decisions: &[travelsim::modes::ModeDecision],
    trip_buildings: &[(u64, u64)],
    home: u64,
    owns_car: bool,
    owns_bike: bool,
) -> usize {
    use travelsim::network::Mode;
    let mut car = owns_car.then_some(home);
    let mut bike = owns_bike.then_some(home);
    let mut violations = 0;
    for (d, &(from, to)) in decisions.iter().zip(trip_buildings) {
        match d.means_of_transport {
            Mode::Passenger => {
                if car != Some(from) {
                    violations += 1;
                } else {
                    car = Some(to);
                }
            }
            Mode::Bicycle => {
                if bike != Some(from) {
                    violations += 1;
                } else {
                    bike = Some(to);
                }
            }
            _ => {}
        }
    }
    violations
}
