//! Staged pipeline orchestration: configuration, run manifests with digest
//! based skipping, per-agent seeding, and the eight stages from population
//! synthesis to evaluation.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{emit_counts, msa_iterate, read_station_map, write_counts, AssignmentConfig, CarTrip};
use crate::backend::{Backend, BackendConfig};
use crate::eval::{
    distribution_histogram, indicator_rmse, interregional_compare, load_reference, modal_split,
    normalize_counts, split_by_attribute, write_report_csv, write_report_json, EvalReport,
    EvalTrip, HistDimension, NormalizedProfiles, DURATION_EDGES_MIN, LENGTH_EDGES_KM,
};
use crate::locations::{CategoryMap, LocationCatalog, RESIDENTIAL_CATEGORY};
use crate::modes::{decide_modes, read_decisions, write_decisions, DecisionRecord, PromptVariant, RepairEntry};
use crate::network::{build_road_graphs, Mode, ModeSpeeds};
use crate::osm::read_osm_xml;
use crate::persona::{generate_persona, AgentProfile};
use crate::population::{read_microdata, read_population, synthesize, write_population};
use crate::routing::{write_option_table, MultimodalNetwork, OptionRow, RouteOption};
use crate::schedule::{extract_trips, generate_schedule, DateContext, TripIntent};
use crate::schema::AttributeSchema;
use crate::transit::{load_timetable, TransitParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    pub microdata: PathBuf,
    pub osm: PathBuf,
    #[serde(default)]
    pub gtfs: Option<PathBuf>,
    /// Reference datasets (JSON); the first entry is the home region.
    #[serde(default)]
    pub references: Vec<PathBuf>,
    #[serde(default)]
    pub station_map: Option<PathBuf>,
    /// Observed hourly counts CSV (station_id, hour, count), optional.
    #[serde(default)]
    pub observed_counts: Option<PathBuf>,
    #[serde(default)]
    pub category_map: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
}

fn default_sample_fraction() -> f64 {
    1.0
}
fn default_scale_factor() -> f64 {
    1.0
}
fn default_region() -> String {
    "Berlin".into()
}
fn default_resample_radius() -> f64 {
    2000.0
}
fn default_max_regenerations() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub global_seed: u64,
    #[serde(default = "default_region")]
    pub region: String,
    /// Fraction of the survey-weighted population to instantiate, in (0, 1].
    #[serde(default = "default_sample_fraction")]
    pub sample_fraction: f64,
    /// Expansion factor applied when emitting counts.
    #[serde(default = "default_scale_factor")]
    pub scale_factor: f64,
    #[serde(default)]
    pub prompt_variant: PromptVariant,
    #[serde(default = "default_resample_radius")]
    pub resample_radius_m: f64,
    #[serde(default = "default_max_regenerations")]
    pub max_regenerations: u32,
    pub output_dir: PathBuf,
    pub paths: PathsConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub date: DateContext,
    #[serde(default)]
    pub assignment: AssignmentConfig,
    #[serde(default)]
    pub transit: TransitParams,
    /// Record backend traffic (on by default so runs are replayable).
    #[serde(default = "default_true")]
    pub record_backend: bool,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        // Relative paths resolve against the config file's directory.
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&p);
                }
            };
            fix(&mut cfg.output_dir);
            fix(&mut cfg.paths.microdata);
            fix(&mut cfg.paths.osm);
            if let Some(p) = cfg.paths.gtfs.as_mut() {
                fix(p);
            }
            for p in cfg.paths.references.iter_mut() {
                fix(p);
            }
            for opt in [
                cfg.paths.station_map.as_mut(),
                cfg.paths.observed_counts.as_mut(),
                cfg.paths.category_map.as_mut(),
                cfg.paths.schema.as_mut(),
            ]
            .into_iter()
            .flatten()
            {
                fix(opt);
            }
            if let BackendConfig::Replay { path } = &mut cfg.backend {
                fix(path);
            }
        }
        Ok(cfg)
    }

    /// Stable hash of the configuration contents.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Report-only configuration checks.
pub fn validate_config(cfg: &RunConfig) -> Vec<String> {
    let mut violations = Vec::new();
    if !(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0) {
        violations.push(format!(
            "sample_fraction {} outside (0, 1]",
            cfg.sample_fraction
        ));
    }
    if cfg.scale_factor <= 0.0 {
        violations.push("scale_factor must be positive".into());
    }
    if let Err(e) = cfg.assignment.validate() {
        violations.push(e.to_string());
    }
    for (label, path) in [
        ("microdata", Some(&cfg.paths.microdata)),
        ("osm", Some(&cfg.paths.osm)),
        ("gtfs", cfg.paths.gtfs.as_ref()),
        ("station_map", cfg.paths.station_map.as_ref()),
        ("observed_counts", cfg.paths.observed_counts.as_ref()),
        ("category_map", cfg.paths.category_map.as_ref()),
        ("schema", cfg.paths.schema.as_ref()),
    ] {
        if let Some(path) = path {
            if !path.exists() {
                violations.push(format!("{label} file missing: {}", path.display()));
            }
        }
    }
    for path in &cfg.paths.references {
        if !path.exists() {
            violations.push(format!("reference file missing: {}", path.display()));
        }
    }
    if let BackendConfig::Remote { endpoint, .. } = &cfg.backend {
        let probe = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs(3))
            .build()
            .request("HEAD", endpoint)
            .call();
        if let Err(ureq::Error::Transport(t)) = probe {
            violations.push(format!("remote backend unreachable: {t}"));
        }
    }
    violations
}

/// Per-agent, per-stage RNG seed so parallelism cannot change results.
pub fn agent_seed(global_seed: u64, agent_id: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(agent_id.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageEntry {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_ms: u128,
    #[serde(default)]
    pub tallies: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Self {
        std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Digest of a file's bytes; directories (e.g. an unzipped GTFS bundle)
/// digest to the hash of their sorted entry names and entry digests.
pub fn file_digest(path: &Path) -> Result<String> {
    let missing = |e: std::io::Error| Error::MissingArtifact(format!("{}: {e}", path.display()));
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(missing)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        let mut hasher = Sha256::new();
        for entry in entries {
            if let Some(name) = entry.file_name() {
                hasher.update(name.to_string_lossy().as_bytes());
            }
            hasher.update(file_digest(&entry)?.as_bytes());
        }
        return Ok(hex(&hasher.finalize()));
    }
    let bytes = std::fs::read(path).map_err(missing)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn digest_paths(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.display().to_string(), file_digest(p)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Personas,
    Schedules,
    Routes,
    Modes,
    Assign,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Personas,
        Stage::Schedules,
        Stage::Routes,
        Stage::Modes,
        Stage::Assign,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Personas => "personas",
            Stage::Schedules => "schedules",
            Stage::Routes => "routes",
            Stage::Modes => "modes",
            Stage::Assign => "assign",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(name: &str) -> Result<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage `{name}`")))
    }
}

/// One leg of an agent's planned day with its full option set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannedLeg {
    pub leg: u32,
    pub from_building: u64,
    pub to_building: u64,
    pub from_pos: (f64, f64),
    pub to_pos: (f64, f64),
    pub from_category: String,
    pub to_category: String,
    pub depart_after_s: u32,
    pub arrive_by_s: u32,
    pub purpose: String,
    pub options: Vec<RouteOption>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentPlan {
    pub agent_id: u64,
    pub home_building: u64,
    pub legs: Vec<PlannedLeg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub agent_id: u64,
    pub schedule: crate::schedule::DaySchedule,
    pub trips: Vec<TripIntent>,
    pub attempts: u32,
    pub dropped_activities: usize,
    pub repaired_home_start: bool,
}

fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut file, item)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

pub struct Runner {
    pub cfg: RunConfig,
    manifest: RunManifest,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)?;
        std::fs::create_dir_all(cfg.output_dir.join("logs"))?;
        let mut manifest = RunManifest::load(&cfg.output_dir.join("manifest.json"));
        let hash = cfg.hash();
        if manifest.config_hash != hash {
            // Stale outputs from a different configuration.
            manifest = RunManifest {
                config_hash: hash,
                stages: BTreeMap::new(),
            };
        }
        Ok(Runner { cfg, manifest })
    }

    fn art(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn backend(&self, stage: Stage) -> Result<Backend> {
        let backend = Backend::new(self.cfg.backend.clone())?;
        if self.cfg.record_backend && !matches!(self.cfg.backend, BackendConfig::Replay { .. }) {
            let log = self
                .cfg
                .output_dir
                .join("logs")
                .join(format!("{}.ndjson", stage.name()));
            backend.with_recording(&log)
        } else {
            Ok(backend)
        }
    }

    fn schema(&self) -> Result<AttributeSchema> {
        match &self.cfg.paths.schema {
            Some(path) => AttributeSchema::load(path),
            None => Ok(AttributeSchema::default_survey()),
        }
    }

    fn category_map(&self) -> Result<CategoryMap> {
        match &self.cfg.paths.category_map {
            Some(path) => CategoryMap::load(path),
            None => Ok(CategoryMap::default_map()),
        }
    }

    fn stage_io(&self, stage: Stage) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let p = &self.cfg.paths;
        let inputs = match stage {
            Stage::Synth => vec![p.microdata.clone()],
            Stage::Personas => vec![self.art("population.ndjson")],
            Stage::Schedules => vec![self.art("personas.ndjson"), p.osm.clone()],
            Stage::Routes => {
                let mut v = vec![self.art("schedules.ndjson"), p.osm.clone()];
                if let Some(g) = &p.gtfs {
                    v.push(g.clone());
                }
                v
            }
            Stage::Modes => vec![self.art("plans.ndjson"), self.art("personas.ndjson")],
            Stage::Assign => vec![self.art("decisions.ndjson"), self.art("plans.ndjson"), p.osm.clone()],
            Stage::Evaluate => {
                let mut v = vec![self.art("decisions.ndjson"), self.art("plans.ndjson")];
                v.extend(p.references.iter().cloned());
                v
            }
        };
        let outputs = match stage {
            Stage::Synth => vec![self.art("population.ndjson")],
            Stage::Personas => vec![self.art("personas.ndjson")],
            Stage::Schedules => vec![self.art("schedules.ndjson")],
            Stage::Routes => vec![
                self.art("plans.ndjson"),
                self.art("buildings.csv"),
                self.art("options.csv"),
            ],
            Stage::Modes => vec![self.art("decisions.ndjson"), self.art("repairs.ndjson")],
            Stage::Assign => vec![self.art("counts.csv"), self.art("assignment.json")],
            Stage::Evaluate => vec![self.art("report.json"), self.art("report.csv")],
        };
        (inputs, outputs)
    }

    fn can_skip(&self, stage: Stage) -> bool {
        let Some(entry) = self.manifest.stages.get(stage.name()) else {
            return false;
        };
        let (inputs, outputs) = self.stage_io(stage);
        let check = |files: &[PathBuf], recorded: &BTreeMap<String, String>| {
            files.iter().all(|p| {
                recorded
                    .get(&p.display().to_string())
                    .map(|d| file_digest(p).map(|now| now == *d).unwrap_or(false))
                    .unwrap_or(false)
            })
        };
        check(&inputs, &entry.inputs) && check(&outputs, &entry.outputs)
    }

    /// Runs one stage (skipping on digest match). Returns true when work ran.
    pub fn run_stage(&mut self, stage: Stage) -> Result<bool> {
        let (inputs, outputs) = self.stage_io(stage);
        for input in &inputs {
            if !input.exists() {
                return Err(Error::MissingArtifact(format!(
                    "stage {} requires {}",
                    stage.name(),
                    input.display()
                )));
            }
        }
        if self.can_skip(stage) {
            return Ok(false);
        }
        let started = std::time::Instant::now();
        let tallies = match stage {
            Stage::Synth => self.stage_synth()?,
            Stage::Personas => self.stage_personas()?,
            Stage::Schedules => self.stage_schedules()?,
            Stage::Routes => self.stage_routes()?,
            Stage::Modes => self.stage_modes()?,
            Stage::Assign => self.stage_assign()?,
            Stage::Evaluate => self.stage_evaluate()?,
        };
        let entry = StageEntry {
            inputs: digest_paths(&inputs)?,
            outputs: digest_paths(&outputs)?,
            duration_ms: started.elapsed().as_millis(),
            tallies,
        };
        self.manifest.stages.insert(stage.name().to_string(), entry);
        self.manifest.save(&self.cfg.output_dir.join("manifest.json"))?;
        Ok(true)
    }

    pub fn run_all(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    // -- Stage bodies -------------------------------------------------------

    fn stage_synth(&self) -> Result<BTreeMap<String, u64>> {
        let schema = self.schema()?;
        let records = read_microdata(&self.cfg.paths.microdata, &schema)?;
        let total_weight: f64 = records.iter().map(|r| r.weight).sum();
        let target = ((total_weight * self.cfg.sample_fraction).round() as usize).max(1);
        let pop = synthesize(&records, target, self.cfg.global_seed)?;
        write_population(&self.art("population.ndjson"), &pop)?;
        Ok([("agents".to_string(), pop.agents.len() as u64)].into())
    }

    fn stage_personas(&self) -> Result<BTreeMap<String, u64>> {
        let schema = self.schema()?;
        let pop = read_population(&self.art("population.ndjson"), self.cfg.global_seed)?;
        let backend = self.backend(Stage::Personas)?;
        let region = self.cfg.region.clone();
        let seed = self.cfg.global_seed;
        let profiles: Vec<AgentProfile> = parallel_map(&pop.agents, backend.workers(), |agent| {
            generate_persona(
                agent,
                &backend,
                &schema,
                &region,
                agent_seed(seed, agent.agent_id, "personas"),
            )
        })?;
        write_ndjson(&self.art("personas.ndjson"), &profiles)?;
        Ok([("personas".to_string(), profiles.len() as u64)].into())
    }

    fn stage_schedules(&self) -> Result<BTreeMap<String, u64>> {
        let profiles: Vec<AgentProfile> = read_ndjson(&self.art("personas.ndjson"))?;
        let category_map = self.category_map()?;
        // Offer only categories present in the extract, with homes presented
        // as `house`.
        let catalog = LocationCatalog::ingest_osm(&self.cfg.paths.osm, &category_map)?;
        let mut categories: Vec<String> = catalog
            .categories()
            .filter(|c| *c != RESIDENTIAL_CATEGORY)
            .map(|c| c.to_string())
            .collect();
        categories.push("house".to_string());
        categories.sort();
        let backend = self.backend(Stage::Schedules)?;
        let seed = self.cfg.global_seed;
        let date = self.cfg.date.clone();
        let max_regen = self.cfg.max_regenerations;
        let records: Vec<ScheduleRecord> = parallel_map(&profiles, backend.workers(), |profile| {
            let outcome = generate_schedule(
                profile,
                &backend,
                &date,
                &categories,
                agent_seed(seed, profile.agent_id, "schedules"),
                max_regen,
            )?;
            let trips = extract_trips(&outcome.schedule);
            Ok(ScheduleRecord {
                agent_id: profile.agent_id,
                schedule: outcome.schedule,
                trips,
                attempts: outcome.attempts,
                dropped_activities: outcome.dropped_activities,
                repaired_home_start: outcome.repaired_home_start,
            })
        })?;
        let n_trips: u64 = records.iter().map(|r| r.trips.len() as u64).sum();
        write_ndjson(&self.art("schedules.ndjson"), &records)?;
        Ok([
            ("schedules".to_string(), records.len() as u64),
            ("trips".to_string(), n_trips),
        ]
        .into())
    }

    fn stage_routes(&self) -> Result<BTreeMap<String, u64>> {
        let schedules: Vec<ScheduleRecord> = read_ndjson(&self.art("schedules.ndjson"))?;
        let category_map = self.category_map()?;
        let osm = read_osm_xml(&self.cfg.paths.osm)?;
        let catalog = LocationCatalog::from_osm_data(&osm, &category_map)?;
        let graphs = build_road_graphs(&osm, &catalog.projection, &ModeSpeeds::default())?;
        let timetable = match &self.cfg.paths.gtfs {
            Some(path) => Some(load_timetable(path, &catalog.projection, &self.cfg.transit)?),
            None => None,
        };
        let network = MultimodalNetwork {
            walk: graphs[&Mode::Pedestrian].clone(),
            bike: graphs[&Mode::Bicycle].clone(),
            car: graphs[&Mode::Passenger].clone(),
            timetable,
            transit_params: self.cfg.transit.clone(),
        };

        let mut plans = Vec::new();
        let mut option_rows = Vec::new();
        for record in &schedules {
            let mut rng = ChaCha20Rng::seed_from_u64(agent_seed(
                self.cfg.global_seed,
                record.agent_id,
                "routes",
            ));
            let home = catalog.sample_home(&mut rng)?;
            let mut current = home;
            let mut legs = Vec::new();
            for trip in &record.trips {
                let from = catalog.building(current).expect("current building exists");
                let to_id = if trip.to_category == "house" {
                    home
                } else {
                    let nearest = catalog.nearest_building(from.position, &trip.to_category)?;
                    catalog.resample_within_radius(
                        nearest,
                        self.cfg.resample_radius_m,
                        &trip.to_category,
                        &mut rng,
                    )
                };
                if to_id == current {
                    // Degenerate move (e.g. the only building of a category is
                    // the current one); no travel happens.
                    continue;
                }
                let to = catalog.building(to_id).expect("destination exists");
                let leg_no = legs.len() as u32 + 1;
                let depart_after_s = trip.depart_after * 60;
                let options = network.route_options(
                    record.agent_id,
                    leg_no,
                    from,
                    to,
                    depart_after_s,
                    self.cfg.date.day_type,
                )?;
                for opt in &options {
                    option_rows.push(OptionRow {
                        agent_id: record.agent_id,
                        leg: leg_no,
                        route_id: opt.route_id,
                        mode: opt.mode.label().to_string(),
                        duration_s: opt.duration_s,
                        length_m: opt.length_m,
                    });
                }
                legs.push(PlannedLeg {
                    leg: leg_no,
                    from_building: current,
                    to_building: to_id,
                    from_pos: from.position,
                    to_pos: to.position,
                    from_category: trip.from_category.clone(),
                    to_category: trip.to_category.clone(),
                    depart_after_s,
                    arrive_by_s: trip.arrive_by * 60,
                    purpose: trip.purpose_text.clone(),
                    options,
                });
                current = to_id;
            }
            plans.push(AgentPlan {
                agent_id: record.agent_id,
                home_building: home,
                legs,
            });
        }
        catalog.write_summary_csv(&self.art("buildings.csv"))?;
        write_option_table(&self.art("options.csv"), &option_rows)?;
        write_ndjson(&self.art("plans.ndjson"), &plans)?;
        let n_legs: u64 = plans.iter().map(|p| p.legs.len() as u64).sum();
        Ok([
            ("plans".to_string(), plans.len() as u64),
            ("legs".to_string(), n_legs),
        ]
        .into())
    }

    fn stage_modes(&self) -> Result<BTreeMap<String, u64>> {
        let plans: Vec<AgentPlan> = read_ndjson(&self.art("plans.ndjson"))?;
        let profiles: Vec<AgentProfile> = read_ndjson(&self.art("personas.ndjson"))?;
        let by_id: BTreeMap<u64, &AgentProfile> =
            profiles.iter().map(|p| (p.agent_id, p)).collect();
        let backend = self.backend(Stage::Modes)?;
        let seed = self.cfg.global_seed;
        let variant = self.cfg.prompt_variant;
        let external = self.cfg.date.external_factors.clone();

        let per_agent: Vec<(Vec<DecisionRecord>, Vec<RepairEntry>)> =
            parallel_map(&plans, backend.workers(), |plan| {
                let profile = by_id.get(&plan.agent_id).ok_or_else(|| {
                    Error::MissingArtifact(format!("no persona for agent {}", plan.agent_id))
                })?;
                let trips: Vec<TripIntent> = plan
                    .legs
                    .iter()
                    .map(|l| TripIntent {
                        sequence_index: l.leg,
                        depart_after: l.depart_after_s / 60,
                        arrive_by: l.arrive_by_s / 60,
                        from_category: l.from_category.clone(),
                        to_category: l.to_category.clone(),
                        purpose_text: l.purpose.clone(),
                    })
                    .collect();
                let options: Vec<Vec<RouteOption>> =
                    plan.legs.iter().map(|l| l.options.clone()).collect();
                let buildings: Vec<(u64, u64)> = plan
                    .legs
                    .iter()
                    .map(|l| (l.from_building, l.to_building))
                    .collect();
                decide_modes(
                    &backend,
                    profile,
                    &trips,
                    &options,
                    &buildings,
                    plan.home_building,
                    variant,
                    external.as_deref(),
                    agent_seed(seed, plan.agent_id, "modes"),
                )
            })?;

        let mut decisions = Vec::new();
        let mut repairs: Vec<serde_json::Value> = Vec::new();
        for (plan, (records, log)) in plans.iter().zip(per_agent) {
            decisions.extend(records);
            for entry in log {
                repairs.push(serde_json::json!({
                    "agent_id": plan.agent_id,
                    "leg": entry.leg,
                    "original_mode": entry.original_mode,
                    "repaired_mode": entry.repaired_mode,
                    "reason": entry.reason,
                }));
            }
        }
        let n_repairs = repairs.len() as u64;
        write_decisions(&self.art("decisions.ndjson"), &decisions)?;
        write_ndjson(&self.art("repairs.ndjson"), &repairs)?;
        Ok([
            ("decisions".to_string(), decisions.len() as u64),
            ("repairs".to_string(), n_repairs),
        ]
        .into())
    }

    fn stage_assign(&self) -> Result<BTreeMap<String, u64>> {
        let decisions = read_decisions(&self.art("decisions.ndjson"))?;
        let plans: Vec<AgentPlan> = read_ndjson(&self.art("plans.ndjson"))?;
        let category_map = self.category_map()?;
        let osm = read_osm_xml(&self.cfg.paths.osm)?;
        let catalog = LocationCatalog::from_osm_data(&osm, &category_map)?;
        let graphs = build_road_graphs(&osm, &catalog.projection, &ModeSpeeds::default())?;
        let car = &graphs[&Mode::Passenger];

        let legs: BTreeMap<(u64, u32), &PlannedLeg> = plans
            .iter()
            .flat_map(|p| p.legs.iter().map(move |l| ((p.agent_id, l.leg), l)))
            .collect();
        let mut trips = Vec::new();
        for d in &decisions {
            if d.mode != Mode::Passenger {
                continue;
            }
            let leg = legs.get(&(d.agent_id, d.leg)).ok_or_else(|| {
                Error::MissingArtifact(format!("no plan for agent {} leg {}", d.agent_id, d.leg))
            })?;
            let origin = car.snap(leg.from_pos).ok_or_else(|| {
                Error::NoRoute(format!("agent {} leg {}: empty car graph", d.agent_id, d.leg))
            })?;
            let destination = car.snap(leg.to_pos).ok_or_else(|| {
                Error::NoRoute(format!("agent {} leg {}: empty car graph", d.agent_id, d.leg))
            })?;
            if origin == destination {
                continue;
            }
            trips.push(CarTrip {
                agent_id: d.agent_id,
                leg: d.leg,
                origin_node: origin,
                destination_node: destination,
                departure_hour: ((leg.depart_after_s / 3600) as u8).min(23),
            });
        }
        let mut cfg = self.cfg.assignment.clone();
        cfg.scale_factor = self.cfg.scale_factor;
        let result = msa_iterate(&trips, car, &cfg)?;
        let counts = match &self.cfg.paths.station_map {
            Some(path) => {
                let map = read_station_map(path)?;
                emit_counts(&result.links, &map, cfg.scale_factor)?
            }
            None => Vec::new(),
        };
        write_counts(&self.art("counts.csv"), &counts)?;
        let summary = serde_json::json!({
            "car_trips": trips.len(),
            "converged": result.converged,
            "gaps": result.gaps,
            "iterations": result.iterations,
        });
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        std::fs::write(self.art("assignment.json"), text)?;
        Ok([
            ("car_trips".to_string(), trips.len() as u64),
            ("converged".to_string(), result.converged as u64),
        ]
        .into())
    }

    fn stage_evaluate(&self) -> Result<BTreeMap<String, u64>> {
        let decisions = read_decisions(&self.art("decisions.ndjson"))?;
        let plans: Vec<AgentPlan> = read_ndjson(&self.art("plans.ndjson"))?;
        let legs: BTreeMap<(u64, u32), &PlannedLeg> = plans
            .iter()
            .flat_map(|p| p.legs.iter().map(move |l| ((p.agent_id, l.leg), l)))
            .collect();
        let mut trips = Vec::new();
        for d in &decisions {
            let leg = legs.get(&(d.agent_id, d.leg)).ok_or_else(|| {
                Error::MissingArtifact(format!("no plan for agent {} leg {}", d.agent_id, d.leg))
            })?;
            let option = leg
                .options
                .iter()
                .find(|o| o.route_id == d.route_id)
                .ok_or_else(|| {
                    Error::MissingArtifact(format!(
                        "decision references unknown route {}",
                        d.route_id
                    ))
                })?;
            trips.push(EvalTrip {
                agent_id: d.agent_id,
                mode: d.mode,
                length_m: option.length_m,
                duration_s: option.duration_s,
                weight: 1.0,
            });
        }
        if trips.is_empty() {
            return Err(Error::rejected("no decided trips to evaluate"));
        }
        let split = modal_split(&trips)?;
        let length_hist = distribution_histogram(&trips, HistDimension::Length, &LENGTH_EDGES_KM)?;
        let duration_hist =
            distribution_histogram(&trips, HistDimension::Duration, &DURATION_EDGES_MIN)?;

        let mut references = Vec::new();
        for path in &self.cfg.paths.references {
            references.push(load_reference(path)?);
        }
        let (rmse_block, ranking) = match references.split_first() {
            Some((home, others)) => (
                indicator_rmse(&split, &length_hist, &duration_hist, home)?,
                interregional_compare(&split, &length_hist, &duration_hist, home, others)?,
            ),
            None => (
                crate::eval::IndicatorRmse {
                    modality: None,
                    duration: None,
                    length: None,
                    average: None,
                    skipped: vec!["modality".into(), "duration".into(), "length".into()],
                },
                Vec::new(),
            ),
        };

        // Stratified splits over agent attributes.
        let pop = read_population(&self.art("population.ndjson"), self.cfg.global_seed)?;
        let mut stratified = BTreeMap::new();
        for attribute in ["economic_status", "occupation"] {
            let groups: BTreeMap<u64, String> = pop
                .agents
                .iter()
                .filter_map(|a| {
                    a.attributes
                        .get(attribute)
                        .map(|v| (a.agent_id, v.render()))
                })
                .collect();
            if groups.len() == pop.agents.len() {
                stratified.insert(
                    attribute.to_string(),
                    split_by_attribute(&trips, &groups, attribute)?,
                );
            }
        }

        // Count profile shapes when observed data is available.
        let mut count_profiles: BTreeMap<String, NormalizedProfiles> = BTreeMap::new();
        if let Some(observed_path) = &self.cfg.paths.observed_counts {
            let observed = read_hourly_profiles(observed_path)?;
            let simulated = read_hourly_profiles(&self.art("counts.csv"))?;
            for (station, obs) in &observed {
                if let Some(sim) = simulated.get(station) {
                    count_profiles.insert(station.clone(), normalize_counts(sim, obs)?);
                }
            }
        }

        let n_trips = trips.len();
        let report = EvalReport {
            modal_split: split,
            length_histogram: length_hist,
            duration_histogram: duration_hist,
            rmse: rmse_block,
            stratified,
            ranking,
            count_profiles,
            n_trips,
        };
        write_report_json(&self.art("report.json"), &report)?;
        write_report_csv(&self.art("report.csv"), &report)?;
        Ok([("trips_evaluated".to_string(), n_trips as u64)].into())
    }
}

/// Reads a CSV of (station_id, hour, count) into 24-hour vectors.
fn read_hourly_profiles(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 3 {
            continue;
        }
        let station = rec[0].to_string();
        let hour: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad hour `{}`", &rec[1])))?;
        let count: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad count `{}`", &rec[2])))?;
        let profile = out.entry(station).or_insert_with(|| vec![0.0; 24]);
        if hour < 24 {
            profile[hour] += count;
        }
    }
    Ok(out)
}

/// Order-preserving map with bounded workers. Sequential when `workers <= 1`;
/// otherwise fixed chunks processed by scoped threads, so results never depend
/// on scheduling.
pub fn parallel_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk_size = items.len().div_ceil(workers);
    let chunks: Vec<&[T]> = items.chunks(chunk_size).collect();
    let mut results: Vec<Vec<Result<U>>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| scope.spawn(|| chunk.iter().map(&f).collect::<Vec<Result<U>>>()))
            .collect();
        for handle in handles {
            results.push(handle.join().expect("worker panicked"));
        }
    });
    results.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_seeds_differ_by_agent_and_stage() {
        let a = agent_seed(42, 1, "personas");
        let b = agent_seed(42, 2, "personas");
        let c = agent_seed(42, 1, "schedules");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, agent_seed(42, 1, "personas"));
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let seq = parallel_map(&items, 1, |x| Ok(x * 2)).unwrap();
        let par = parallel_map(&items, 7, |x| Ok(x * 2)).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq[3], 6);
    }

    #[test]
    fn parallel_map_propagates_errors() {
        let items: Vec<u64> = (0..10).collect();
        let res = parallel_map(&items, 3, |x| {
            if *x == 5 {
                Err(Error::rejected("boom"))
            } else {
                Ok(*x)
            }
        });
        assert!(res.is_err());
    }

    #[test]
    fn stage_parse_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::parse(stage.name()).unwrap(), stage);
        }
        assert!(Stage::parse("nope").is_err());
    }
}
