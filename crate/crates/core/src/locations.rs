//! Categorized building catalog from OSM extracts: home sampling, nearest
//! destination choice, and radius resampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::osm::{distance, read_osm_xml, LocalProjection, OsmData};
use crate::{Error, Result};

/// Footprint area assigned to point features (tagged nodes), m².
pub const DEFAULT_POINT_AREA_M2: f64 = 100.0;

/// Category holding candidate home locations.
pub const RESIDENTIAL_CATEGORY: &str = "residential";

pub type BuildingId = u64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Building {
    pub building_id: BuildingId,
    /// Projected coordinates, meters.
    pub position: (f64, f64),
    pub footprint_area: f64,
    pub categories: Vec<String>,
    pub tags: BTreeMap<String, String>,
}

/// OSM key/value to category rules over the keys `building`, `amenity`,
/// `office`, `shop`, and `craft`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryMap {
    pub rules: BTreeMap<String, BTreeMap<String, String>>,
}

pub const CATEGORY_KEYS: &[&str] = &["building", "amenity", "office", "shop", "craft"];

impl CategoryMap {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let rules: BTreeMap<String, BTreeMap<String, String>> = serde_json::from_str(&text)?;
        Ok(CategoryMap { rules })
    }

    pub fn categories_for(&self, tags: &BTreeMap<String, String>) -> Vec<String> {
        let mut out = Vec::new();
        for key in CATEGORY_KEYS {
            if let (Some(value), Some(values)) = (tags.get(*key), self.rules.get(*key)) {
                if let Some(cat) = values.get(value) {
                    if !out.contains(cat) {
                        out.push(cat.clone());
                    }
                }
            }
        }
        out
    }

    /// Every distinct category produced by the rules, plus `house`.
    pub fn category_vocabulary(&self) -> Vec<String> {
        let mut set: std::collections::BTreeSet<String> =
            self.rules.values().flat_map(|m| m.values().cloned()).collect();
        set.insert("house".into());
        set.into_iter().collect()
    }

    pub fn default_map() -> Self {
        let mut rules: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut add = |key: &str, pairs: &[(&str, &str)]| {
            let entry = rules.entry(key.to_string()).or_default();
            for (value, cat) in pairs {
                entry.insert(value.to_string(), cat.to_string());
            }
        };
        add(
            "building",
            &[
                ("apartments", RESIDENTIAL_CATEGORY),
                ("house", RESIDENTIAL_CATEGORY),
                ("residential", RESIDENTIAL_CATEGORY),
                ("detached", RESIDENTIAL_CATEGORY),
                ("terrace", RESIDENTIAL_CATEGORY),
                ("school", "school"),
                ("hospital", "hospital"),
                ("office", "office"),
                ("commercial", "office"),
                ("industrial", "workplace"),
                ("retail", "shop"),
                ("supermarket", "supermarket"),
                ("church", "place_of_worship"),
                ("sports_hall", "sports_centre"),
            ],
        );
        add(
            "amenity",
            &[
                ("school", "school"),
                ("university", "university"),
                ("hospital", "hospital"),
                ("library", "library"),
                ("cafe", "cafe"),
                ("restaurant", "restaurant"),
                ("canteen", "canteen"),
                ("community_centre", "community_centre"),
                ("social_centre", "social_centre"),
                ("bench", "bench"),
                ("place_of_worship", "place_of_worship"),
                ("theatre", "theatre"),
                ("cinema", "cinema"),
                ("pharmacy", "pharmacy"),
                ("doctors", "doctors"),
            ],
        );
        add(
            "office",
            &[
                ("government", "office"),
                ("company", "office"),
                ("university", "university"),
                ("it", "office"),
                ("insurance", "office"),
            ],
        );
        add(
            "shop",
            &[
                ("supermarket", "supermarket"),
                ("bakery", "bakery"),
                ("clothes", "shop"),
                ("convenience", "supermarket"),
                ("hairdresser", "shop"),
                ("butcher", "shop"),
            ],
        );
        add(
            "craft",
            &[
                ("carpenter", "workplace"),
                ("blacksmith", "workplace"),
                ("pottery", "workplace"),
                ("electrician", "workplace"),
            ],
        );
        CategoryMap { rules }
    }
}

/// Uniform grid over projected coordinates for nearest/radius queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridIndex {
    cell_size: f64,
    cells: BTreeMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    fn build(positions: &[(f64, f64)], cell_size: f64) -> Self {
        let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, pos) in positions.iter().enumerate() {
            cells.entry(Self::cell_of(*pos, cell_size)).or_default().push(i);
        }
        GridIndex { cell_size, cells }
    }

    fn cell_of(pos: (f64, f64), cell_size: f64) -> (i64, i64) {
        (
            (pos.0 / cell_size).floor() as i64,
            (pos.1 / cell_size).floor() as i64,
        )
    }

    /// Indices of items within `radius` of `pos` (by ring expansion; the
    /// caller applies the exact distance predicate).
    fn candidates_within(&self, pos: (f64, f64), radius: f64) -> Vec<usize> {
        let r_cells = (radius / self.cell_size).ceil() as i64 + 1;
        let center = Self::cell_of(pos, self.cell_size);
        let mut out = Vec::new();
        for dx in -r_cells..=r_cells {
            for dy in -r_cells..=r_cells {
                if let Some(items) = self.cells.get(&(center.0 + dx, center.1 + dy)) {
                    out.extend_from_slice(items);
                }
            }
        }
        out
    }

    /// Nearest item by ring expansion with an exhaustive fallback ring check.
    fn nearest(&self, pos: (f64, f64), positions: &[(f64, f64)], subset: &[usize]) -> Option<usize> {
        // Subset is small in most categories; grid cells are per-catalog, not
        // per-category, so scan rings over the subset's own positions.
        let mut best: Option<(f64, usize)> = None;
        for &i in subset {
            let d = distance(pos, positions[i]);
            match best {
                None => best = Some((d, i)),
                Some((bd, bi)) => {
                    if d < bd || (d == bd && i < bi) {
                        best = Some((d, i));
                    }
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationCatalog {
    pub buildings: Vec<Building>,
    pub projection: LocalProjection,
    by_category: BTreeMap<String, Vec<usize>>,
    grid: GridIndex,
    /// Residential building indices with normalized sampling weights.
    residential: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
}

/// Absolute shoelace area of a projected polygon ring.
pub fn shoelace_area(ring: &[(f64, f64)]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..ring.len() {
        let (x1, y1) = ring[i];
        let (x2, y2) = ring[(i + 1) % ring.len()];
        sum += x1 * y2 - x2 * y1;
    }
    (sum / 2.0).abs()
}

fn is_self_intersecting(ring: &[(f64, f64)]) -> bool {
    fn seg_cross(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
        fn orient(p: (f64, f64), q: (f64, f64), r: (f64, f64)) -> f64 {
            (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
        }
        let o1 = orient(a, b, c);
        let o2 = orient(a, b, d);
        let o3 = orient(c, d, a);
        let o4 = orient(c, d, b);
        o1 * o2 < 0.0 && o3 * o4 < 0.0
    }
    let n = ring.len();
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue; // adjacent through the wrap
            }
            if seg_cross(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

impl LocationCatalog {
    /// Builds a catalog from an OSM extract and category rules.
    pub fn ingest_osm(path: &Path, category_map: &CategoryMap) -> Result<Self> {
        let data = read_osm_xml(path)?;
        Self::from_osm_data(&data, category_map)
    }

    pub fn from_osm_data(data: &OsmData, category_map: &CategoryMap) -> Result<Self> {
        if data.nodes.is_empty() {
            return Err(Error::rejected("empty OSM extract"));
        }
        // Sum in node-id order: float addition is order-sensitive and the
        // projection origin must not depend on hash iteration order.
        let mut node_ids: Vec<i64> = data.nodes.keys().copied().collect();
        node_ids.sort_unstable();
        let (sum_lat, sum_lon) = node_ids.iter().map(|id| &data.nodes[id]).fold(
            (0.0, 0.0),
            |acc, n| (acc.0 + n.lat, acc.1 + n.lon),
        );
        let count = data.nodes.len() as f64;
        let projection = LocalProjection::new(sum_lat / count, sum_lon / count);

        let mut buildings = Vec::new();
        let mut warnings = Vec::new();

        let mut ways: Vec<&crate::osm::OsmWay> = data.ways.iter().collect();
        ways.sort_by_key(|w| w.id);
        for way in ways {
            let categories = category_map.categories_for(&way.tags);
            let has_building_key = CATEGORY_KEYS.iter().any(|k| way.tags.contains_key(*k));
            if !has_building_key {
                continue;
            }
            let ring: Vec<(f64, f64)> = way
                .node_refs
                .iter()
                .filter_map(|r| data.nodes.get(r))
                .map(|n| projection.project(n.lat, n.lon))
                .collect();
            if ring.is_empty() {
                continue;
            }
            let mut closed = ring.clone();
            if closed.first() == closed.last() && closed.len() > 1 {
                closed.pop();
            }
            if closed.len() >= 4 && is_self_intersecting(&closed) {
                warnings.push(format!(
                    "way {} has a self-intersecting footprint; using absolute shoelace area",
                    way.id
                ));
            }
            let footprint_area = if closed.len() >= 3 {
                shoelace_area(&closed)
            } else {
                DEFAULT_POINT_AREA_M2
            };
            let centroid = (
                closed.iter().map(|p| p.0).sum::<f64>() / closed.len() as f64,
                closed.iter().map(|p| p.1).sum::<f64>() / closed.len() as f64,
            );
            buildings.push(Building {
                building_id: way.id as u64,
                position: centroid,
                footprint_area,
                categories,
                tags: way.tags.clone(),
            });
        }

        // Tagged point features become zero-footprint buildings with a
        // configurable default area.
        let mut nodes: Vec<&crate::osm::OsmNode> = data
            .nodes
            .values()
            .filter(|n| !n.tags.is_empty())
            .collect();
        nodes.sort_by_key(|n| n.id);
        for node in nodes {
            let categories = category_map.categories_for(&node.tags);
            if categories.is_empty() {
                continue;
            }
            buildings.push(Building {
                building_id: node.id as u64,
                position: projection.project(node.lat, node.lon),
                footprint_area: DEFAULT_POINT_AREA_M2,
                categories,
                tags: node.tags.clone(),
            });
        }

        if buildings.is_empty() {
            return Err(Error::rejected("no buildings found in extract"));
        }
        Ok(Self::from_buildings(buildings, projection, warnings))
    }

    pub fn from_buildings(
        mut buildings: Vec<Building>,
        projection: LocalProjection,
        warnings: Vec<String>,
    ) -> Self {
        buildings.sort_by_key(|b| b.building_id);
        let positions: Vec<(f64, f64)> = buildings.iter().map(|b| b.position).collect();
        let mut by_category: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, b) in buildings.iter().enumerate() {
            for cat in &b.categories {
                by_category.entry(cat.clone()).or_default().push(i);
            }
        }
        let residential_total: f64 = by_category
            .get(RESIDENTIAL_CATEGORY)
            .map(|idxs| idxs.iter().map(|i| buildings[*i].footprint_area).sum())
            .unwrap_or(0.0);
        let residential = by_category
            .get(RESIDENTIAL_CATEGORY)
            .map(|idxs| {
                idxs.iter()
                    .map(|&i| (i, buildings[i].footprint_area / residential_total.max(f64::MIN_POSITIVE)))
                    .collect()
            })
            .unwrap_or_default();
        let grid = GridIndex::build(&positions, 250.0);
        LocationCatalog {
            buildings,
            projection,
            by_category,
            grid,
            residential,
            warnings,
        }
    }

    pub fn building(&self, id: BuildingId) -> Option<&Building> {
        self.buildings
            .binary_search_by_key(&id, |b| b.building_id)
            .ok()
            .map(|i| &self.buildings[i])
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.by_category.keys().map(|s| s.as_str())
    }

    pub fn category_count(&self, category: &str) -> usize {
        self.by_category.get(category).map(|v| v.len()).unwrap_or(0)
    }

    /// Residential sampling weights `(building_id, p_i)`, `p_i` proportional
    /// to footprint area and summing to 1.
    pub fn residential_weights(&self) -> Vec<(BuildingId, f64)> {
        self.residential
            .iter()
            .map(|(i, p)| (self.buildings[*i].building_id, *p))
            .collect()
    }

    /// Draws a home with probability proportional to footprint area.
    pub fn sample_home<R: Rng>(&self, rng: &mut R) -> Result<BuildingId> {
        if self.residential.is_empty() {
            return Err(Error::rejected("no residential buildings in catalog"));
        }
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut last = self.residential[0].0;
        for (i, p) in &self.residential {
            if *p <= 0.0 {
                continue;
            }
            cum += p;
            last = *i;
            if u < cum {
                return Ok(self.buildings[*i].building_id);
            }
        }
        Ok(self.buildings[last].building_id)
    }

    /// Nearest building of a category by Euclidean distance in projected
    /// coordinates; ties broken by lowest building id.
    pub fn nearest_building(&self, from: (f64, f64), category: &str) -> Result<BuildingId> {
        let subset = self
            .by_category
            .get(category)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::rejected(format!("no buildings in category `{category}`")))?;
        let positions: Vec<(f64, f64)> = self.buildings.iter().map(|b| b.position).collect();
        let idx = self
            .grid
            .nearest(from, &positions, subset)
            .expect("nonempty subset");
        Ok(self.buildings[idx].building_id)
    }

    /// Same-category buildings within `radius_m` of `building_id` (the
    /// original included).
    pub fn within_radius(&self, building_id: BuildingId, radius_m: f64, category: &str) -> Vec<BuildingId> {
        let Some(center) = self.building(building_id) else {
            return Vec::new();
        };
        let Some(subset) = self.by_category.get(category) else {
            return Vec::new();
        };
        let positions: Vec<(f64, f64)> = self.buildings.iter().map(|b| b.position).collect();
        let candidates = self.grid.candidates_within(center.position, radius_m);
        let candidate_set: std::collections::BTreeSet<usize> = candidates.into_iter().collect();
        let mut out: Vec<BuildingId> = subset
            .iter()
            .filter(|i| candidate_set.contains(i))
            .filter(|&&i| distance(positions[i], center.position) <= radius_m)
            .map(|&i| self.buildings[i].building_id)
            .collect();
        out.sort_unstable();
        out
    }

    /// Uniform draw among same-category buildings within the radius; falls
    /// back to the original when no neighbor qualifies.
    pub fn resample_within_radius<R: Rng>(
        &self,
        building_id: BuildingId,
        radius_m: f64,
        category: &str,
        rng: &mut R,
    ) -> BuildingId {
        let candidates = self.within_radius(building_id, radius_m, category);
        if candidates.is_empty() {
            return building_id;
        }
        candidates[rng.gen_range(0..candidates.len())]
    }

    /// Catalog summary CSV: `building_id,category,area,x,y`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["building_id", "category", "area", "x", "y"])?;
        for b in &self.buildings {
            let cats = if b.categories.is_empty() {
                "uncategorized".to_string()
            } else {
                b.categories.join("|")
            };
            w.write_record([
                b.building_id.to_string(),
                cats,
                format!("{:.1}", b.footprint_area),
                format!("{:.1}", b.position.0),
                format!("{:.1}", b.position.1),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
