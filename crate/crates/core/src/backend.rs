//! Pluggable text-generation backend.
//!
//! Three kinds: a chat-completions-style remote endpoint, a deterministic
//! offline stub, and a record/replay store for exact reproduction of a prior
//! run. All pipeline stages that need generated text go through
//! [`Backend::complete`], so recording one run is enough to replay it.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Persona,
    Schedule,
    ModeChoice,
}

/// One request to the backend. `hint` carries the structured payload the
/// deterministic stub works from; remote backends ignore it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub task: TaskKind,
    pub system: Option<String>,
    pub user: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<serde_json::Value>,
}

impl ChatRequest {
    /// Replay key: hash of the prompt bytes and seed.
    pub fn key(&self) -> String {
        let mut hasher = Sha256::new();
        if let Some(s) = &self.system {
            hasher.update(s.as_bytes());
        }
        hasher.update([0x1f]);
        hasher.update(self.user.as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.seed.to_le_bytes());
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-attribute probability that an agent with a car available actually
/// drives a qualifying trip (stub mode policy).
pub fn default_car_use_table() -> BTreeMap<String, f64> {
    [
        ("very_low", 0.10),
        ("low", 0.25),
        ("medium", 0.50),
        ("high", 0.70),
        ("very_high", 0.85),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Deterministic offline stub; pure function of (request, seed).
    Stub {
        #[serde(default = "default_rule_table_version")]
        rule_table_version: u32,
        /// Keyed by `economic_status`; probability a qualifying trip (> 2 km,
        /// car owned) is driven.
        #[serde(default = "default_car_use_table")]
        car_use_probability: BTreeMap<String, f64>,
    },
    /// Chat-completions-compatible JSON endpoint.
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_workers")]
        workers: usize,
    },
    /// Replay a previously recorded request log.
    Replay { path: PathBuf },
}

fn default_rule_table_version() -> u32 {
    1
}
fn default_retries() -> u32 {
    2
}
fn default_workers() -> usize {
    4
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Stub {
            rule_table_version: 1,
            car_use_probability: default_car_use_table(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecordEntry {
    pub key: String,
    pub task: TaskKind,
    pub system: Option<String>,
    pub user: String,
    pub seed: u64,
    pub response: String,
}

pub struct Backend {
    config: BackendConfig,
    replay: Option<HashMap<String, String>>,
    recorder: Option<Mutex<std::io::BufWriter<std::fs::File>>>,
}

impl Backend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        let replay = match &config {
            BackendConfig::Replay { path } => Some(load_record_log(path)?),
            _ => None,
        };
        Ok(Backend {
            config,
            replay,
            recorder: None,
        })
    }

    /// Enables request/response logging as newline-delimited JSON.
    pub fn with_recording(mut self, path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        self.recorder = Some(Mutex::new(std::io::BufWriter::new(file)));
        Ok(self)
    }

    pub fn max_retries(&self) -> u32 {
        match &self.config {
            BackendConfig::Remote { max_retries, .. } => *max_retries,
            _ => 0,
        }
    }

    pub fn workers(&self) -> usize {
        match &self.config {
            BackendConfig::Remote { workers, .. } => (*workers).max(1),
            _ => 1,
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.config, BackendConfig::Remote { .. })
    }

    pub fn endpoint(&self) -> Option<&str> {
        match &self.config {
            BackendConfig::Remote { endpoint, .. } => Some(endpoint),
            _ => None,
        }
    }

    /// Issues a single request. Retry policy lives at the call sites so the
    /// total request count stays bounded by `1 + max_retries` there.
    pub fn complete(&self, req: &ChatRequest) -> Result<String> {
        let response = match &self.config {
            BackendConfig::Stub {
                car_use_probability,
                ..
            } => stub_complete(req, car_use_probability)?,
            BackendConfig::Remote {
                endpoint,
                model,
                temperature,
                ..
            } => remote_complete(endpoint, model, *temperature, req)?,
            BackendConfig::Replay { .. } => {
                let map = self.replay.as_ref().expect("replay map loaded");
                map.get(&req.key())
                    .cloned()
                    .ok_or_else(|| Error::Backend(format!("no replay entry for key {}", req.key())))?
            }
        };
        if let Some(rec) = &self.recorder {
            let entry = RecordEntry {
                key: req.key(),
                task: req.task,
                system: req.system.clone(),
                user: req.user.clone(),
                seed: req.seed,
                response: response.clone(),
            };
            let mut w = rec.lock().expect("recorder lock");
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(response)
    }
}

fn load_record_log(path: &Path) -> Result<HashMap<String, String>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Backend(format!("cannot open replay log {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: RecordEntry = serde_json::from_str(&line)?;
        map.insert(entry.key, entry.response);
    }
    Ok(map)
}

fn remote_complete(endpoint: &str, model: &str, temperature: f64, req: &ChatRequest) -> Result<String> {
    let mut messages = Vec::new();
    if let Some(system) = &req.system {
        messages.push(serde_json::json!({"role": "system", "content": system}));
    }
    messages.push(serde_json::json!({"role": "user", "content": req.user}));
    let body = serde_json::json!({
        "model": model,
        "messages": messages,
        "temperature": temperature,
        "seed": req.seed,
    });
    let response = ureq::post(endpoint)
        .send_json(body)
        .map_err(|e| Error::Backend(format!("transport failure: {e}")))?;
    let value: serde_json::Value = response
        .into_json()
        .map_err(|e| Error::Backend(format!("malformed response body: {e}")))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Backend("response missing choices[0].message.content".into()))
}

/// Extracts the first balanced JSON object or array embedded in free text.
pub fn extract_json(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find(['{', '['])?;
    let open = bytes[start];
    let close = if open == b'{' { b'}' } else { b']' };
    let mut depth = 0i32;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            _ if b == open => depth += 1,
            _ if b == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Deterministic stub
// ---------------------------------------------------------------------------

fn stub_complete(req: &ChatRequest, car_table: &BTreeMap<String, f64>) -> Result<String> {
    let hint = req
        .hint
        .as_ref()
        .ok_or_else(|| Error::Backend("stub backend requires a structured hint".into()))?;
    match req.task {
        TaskKind::Persona => stub_persona(hint),
        TaskKind::Schedule => stub_schedule(hint, req.seed),
        TaskKind::ModeChoice => stub_mode_choice(hint, req.seed, car_table),
    }
}

fn hint_str<'a>(hint: &'a serde_json::Value, key: &str) -> &'a str {
    hint[key].as_str().unwrap_or("")
}

fn stub_persona(hint: &serde_json::Value) -> Result<String> {
    let attrs = hint["attributes"]
        .as_array()
        .ok_or_else(|| Error::Backend("persona hint missing attributes".into()))?;
    let get = |name: &str| -> String {
        attrs
            .iter()
            .find(|pair| pair[0].as_str() == Some(name))
            .and_then(|pair| pair[1].as_str())
            .unwrap_or("unknown")
            .to_string()
    };
    let occupation = get("occupation").replace('_', " ");
    let description = format!(
        "A {}-year-old {} ({}) living in a {}-person household in the city. \
         The household owns {} car(s) and {} bicycle(s), has a {} economic status, \
         and a monthly net income band of {}.",
        get("age"),
        occupation,
        get("sex"),
        get("household_size"),
        get("car_ownership"),
        get("bike_ownership"),
        get("economic_status").replace('_', " "),
        get("income_band").replace('_', " "),
    );
    Ok(serde_json::json!({ "description": description }).to_string())
}

fn stub_schedule(hint: &serde_json::Value, seed: u64) -> Result<String> {
    let categories: Vec<String> = hint["categories"]
        .as_array()
        .ok_or_else(|| Error::Backend("schedule hint missing categories".into()))?
        .iter()
        .filter_map(|v| v.as_str().map(|s| s.to_string()))
        .collect();
    let occupation = hint_str(hint, "occupation").to_string();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let away: Vec<&String> = categories.iter().filter(|c| c.as_str() != "house").collect();
    let mut entries: Vec<(u32, String, String)> = Vec::new();
    let wake = 300 + 15 * rng.gen_range(0..12); // 05:00..08:00
    entries.push((wake, "Waking up and getting ready for the day".into(), "house".into()));

    // Occupation-flavored anchor activity, then a few generic outings.
    let preferred: &[&str] = match occupation.as_str() {
        "full_time" | "part_time" => &["office", "workplace", "company"],
        "student" | "pupil" | "child" => &["school", "university", "college"],
        _ => &["supermarket", "park", "cafe"],
    };
    let mut time = wake + 60 + 30 * rng.gen_range(0..4);
    if let Some(anchor) = preferred.iter().find_map(|p| away.iter().find(|c| c.as_str() == *p)) {
        entries.push((time, format!("Spending the morning at the {anchor}"), anchor.to_string()));
        time += 120 + 30 * rng.gen_range(0..4);
    }
    if !away.is_empty() {
        let n_outings = 1 + rng.gen_range(0..3);
        for _ in 0..n_outings {
            if time > 1200 {
                break;
            }
            let cat = away[rng.gen_range(0..away.len())];
            entries.push((time, format!("Running an errand at the {cat}"), cat.to_string()));
            time += 60 + 30 * rng.gen_range(0..4);
        }
    }
    let home_time = (time + 30).min(1380);
    entries.push((home_time, "Relaxing at home in the evening".into(), "house".into()));

    entries.sort_by_key(|(t, _, _)| *t);
    entries.dedup_by_key(|(t, _, _)| *t);
    let array: Vec<serde_json::Value> = entries
        .iter()
        .map(|(t, activity, building)| {
            serde_json::json!({
                "time": format!("{:02}:{:02}", t / 60, t % 60),
                "activity": activity,
                "building": building,
            })
        })
        .collect();
    Ok(serde_json::Value::Array(array).to_string())
}

/// Distance-threshold mode policy: walk below 1 km, bike between 1 and 5 km
/// when a bike is owned, public transport above 5 km. A qualifying trip
/// (> 2 km, car owned and offered) is switched to the car with a probability
/// keyed by economic status. Co-location of vehicles is not simulated here;
/// the downstream consistency repair handles it.
fn stub_mode_choice(
    hint: &serde_json::Value,
    seed: u64,
    car_table: &BTreeMap<String, f64>,
) -> Result<String> {
    let trips = hint["trips"]
        .as_array()
        .ok_or_else(|| Error::Backend("mode hint missing trips".into()))?;
    let owns_car = hint["owns_car"].as_bool().unwrap_or(false);
    let owns_bike = hint["owns_bike"].as_bool().unwrap_or(false);
    let status = hint_str(hint, "economic_status");
    let car_prob = car_table.get(status).copied().unwrap_or(0.5);

    let mut decisions = Vec::new();
    for (i, trip) in trips.iter().enumerate() {
        let options = trip["options"].as_array().cloned().unwrap_or_default();
        if options.is_empty() {
            continue;
        }
        let find = |mode: &str| -> Option<&serde_json::Value> {
            options.iter().find(|o| o["mode"].as_str() == Some(mode))
        };
        let length_km = options
            .iter()
            .filter_map(|o| o["length_m"].as_f64())
            .fold(f64::INFINITY, f64::min)
            / 1000.0;

        let mut chosen = if length_km < 1.0 {
            find("pedestrian")
        } else if length_km < 5.0 {
            if owns_bike {
                find("bicycle")
            } else {
                find("public_transport")
            }
        } else {
            find("public_transport")
        };
        // Fallback chain when the threshold mode is not offered.
        if chosen.is_none() {
            for mode in ["public_transport", "bicycle", "passenger", "pedestrian"] {
                if mode == "bicycle" && !owns_bike {
                    continue;
                }
                if mode == "passenger" && !owns_car {
                    continue;
                }
                if let Some(o) = find(mode) {
                    chosen = Some(o);
                    break;
                }
            }
        }
        let mut chosen = match chosen.or_else(|| options.first()) {
            Some(o) => o.clone(),
            None => continue,
        };
        // Car switch only upgrades a bicycle-range choice; long trips stay on
        // public transport per the distance rule.
        if owns_car && length_km > 2.0 && chosen["mode"].as_str() == Some("bicycle") {
            let mut rng =
                ChaCha20Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));
            if rng.gen_bool(car_prob.clamp(0.0, 1.0)) {
                if let Some(car) = find("passenger") {
                    chosen = car.clone();
                }
            }
        }
        let mode = chosen["mode"].as_str().unwrap_or("pedestrian");
        decisions.push(serde_json::json!({
            "route_id": chosen["route_id"],
            "means_of_transport": mode,
            "reasoning": format!(
                "At {length_km:.1} km, {} is the usual way to cover this trip.",
                mode.replace('_', " ")
            ),
        }));
    }
    Ok(serde_json::Value::Array(decisions).to_string())
}
