//! Minimal OSM XML extract reader shared by the building catalog and the
//! road network builder.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use quick_xml::events::Event;
use quick_xml::Reader;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct OsmNode {
    pub id: i64,
    pub lat: f64,
    pub lon: f64,
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct OsmWay {
    pub id: i64,
    pub node_refs: Vec<i64>,
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Default)]
pub struct OsmData {
    pub nodes: HashMap<i64, OsmNode>,
    pub ways: Vec<OsmWay>,
}

pub fn read_osm_xml(path: &Path) -> Result<OsmData> {
    if path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pbf"))
        .unwrap_or(false)
    {
        return Err(Error::rejected(
            "PBF extracts are not supported; convert to OSM XML first",
        ));
    }
    let mut reader = Reader::from_file(path)
        .map_err(|e| Error::rejected(format!("cannot open OSM extract: {e}")))?;
    reader.config_mut().trim_text(true);

    let mut data = OsmData::default();
    let mut buf = Vec::new();
    let mut current_node: Option<OsmNode> = None;
    let mut current_way: Option<OsmWay> = None;

    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| Error::Parse(format!("malformed OSM XML: {e}")))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let name = e.name();
                let attrs = || -> Result<BTreeMap<String, String>> {
                    let mut map = BTreeMap::new();
                    for attr in e.attributes() {
                        let attr = attr.map_err(|e| Error::Parse(format!("bad attribute: {e}")))?;
                        map.insert(
                            String::from_utf8_lossy(attr.key.as_ref()).into_owned(),
                            String::from_utf8_lossy(&attr.value).into_owned(),
                        );
                    }
                    Ok(map)
                };
                let is_empty = matches!(event, Event::Empty(_));
                match name.as_ref() {
                    b"node" => {
                        let a = attrs()?;
                        let node = OsmNode {
                            id: parse_num(&a, "id")?,
                            lat: parse_num(&a, "lat")?,
                            lon: parse_num(&a, "lon")?,
                            tags: BTreeMap::new(),
                        };
                        if is_empty {
                            data.nodes.insert(node.id, node);
                        } else {
                            current_node = Some(node);
                        }
                    }
                    b"way" => {
                        let a = attrs()?;
                        let way = OsmWay {
                            id: parse_num(&a, "id")?,
                            node_refs: Vec::new(),
                            tags: BTreeMap::new(),
                        };
                        if is_empty {
                            data.ways.push(way);
                        } else {
                            current_way = Some(way);
                        }
                    }
                    b"nd" => {
                        let a = attrs()?;
                        if let Some(way) = current_way.as_mut() {
                            way.node_refs.push(parse_num(&a, "ref")?);
                        }
                    }
                    b"tag" => {
                        let a = attrs()?;
                        let k = a.get("k").cloned().unwrap_or_default();
                        let v = a.get("v").cloned().unwrap_or_default();
                        if let Some(way) = current_way.as_mut() {
                            way.tags.insert(k, v);
                        } else if let Some(node) = current_node.as_mut() {
                            node.tags.insert(k, v);
                        }
                    }
                    _ => {}
                }
            }
            Event::End(ref e) => match e.name().as_ref() {
                b"node" => {
                    if let Some(node) = current_node.take() {
                        data.nodes.insert(node.id, node);
                    }
                }
                b"way" => {
                    if let Some(way) = current_way.take() {
                        data.ways.push(way);
                    }
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    Ok(data)
}

fn parse_num<T: std::str::FromStr>(attrs: &BTreeMap<String, String>, key: &str) -> Result<T> {
    attrs
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("OSM element missing numeric `{key}`")))
}

/// Local equirectangular projection to meters around a reference point.
/// Adequate at city scale.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LocalProjection {
    pub lat0: f64,
    pub lon0: f64,
}

const EARTH_RADIUS_M: f64 = 6_371_000.0;

impl LocalProjection {
    pub fn new(lat0: f64, lon0: f64) -> Self {
        LocalProjection { lat0, lon0 }
    }

    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let x = EARTH_RADIUS_M * (lon - self.lon0).to_radians() * self.lat0.to_radians().cos();
        let y = EARTH_RADIUS_M * (lat - self.lat0).to_radians();
        (x, y)
    }
}

pub fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}
