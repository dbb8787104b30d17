//! Full-day activity schedules: prompt construction, parsing, validation,
//! and trip extraction.

use serde::{Deserialize, Serialize};

use crate::backend::{extract_json, Backend, ChatRequest, TaskKind};
use crate::persona::AgentProfile;
use crate::schema::AttrValue;
use crate::{Error, Result};

/// Minimum dwell time at an activity before departing for the next one.
pub const DWELL_MINUTES: u32 = 10;

/// Transport phrases the planning prompt forbids; used by the validator.
pub const DEFAULT_TRANSPORT_PHRASES: &[&str] = &[
    "walking by foot",
    "driving a car",
    "taking the bus",
    "taking the train",
    "riding the bike",
    "commuting",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    /// Minutes from midnight, `0..1440`.
    pub start_time: u32,
    pub activity_text: String,
    pub location_category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Weekday,
    Weekend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DateContext {
    pub day_type: DayType,
    pub date_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_factors: Option<String>,
}

impl Default for DateContext {
    fn default() -> Self {
        DateContext {
            day_type: DayType::Weekday,
            date_text: "a typical Tuesday".into(),
            external_factors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySchedule {
    pub agent_id: u64,
    pub date_context: DateContext,
    pub activities: Vec<Activity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripIntent {
    /// 1-based trip index within the day.
    pub sequence_index: u32,
    /// Earliest departure in minutes from midnight.
    pub depart_after: u32,
    /// Start time of the destination activity (arrival target), minutes.
    pub arrive_by: u32,
    pub from_category: String,
    pub to_category: String,
    pub purpose_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MissingHomeStart,
    TransportPhrase { index: usize, phrase: String },
    UnknownCategory { index: usize, category: String },
    DuplicateTime { minutes: u32 },
    EmptySchedule,
}

/// Renders the daily-plan prompt: persona, date, optional external factors,
/// the transport exclusion clause, and the category list.
pub fn build_schedule_prompt(
    profile: &AgentProfile,
    date: &DateContext,
    categories: &[String],
) -> String {
    let external = match &date.external_factors {
        Some(text) => format!("{text}\n"),
        None => String::new(),
    };
    format!(
        "You are: {persona}\n\
         Today is {date}.\n\
         {external}\
         Write in broad strokes what you are doing during the day. Start the day at home.\n\
         Only include tasks that occur at a specific location which must be one of the provided \
         building options and do not include any transportation or commuting tasks (for example, \
         do not include actions like \"walking by foot\" or \"driving a car\" or \"taking the bus\") \
         or locations (for example, \"parking\", \"bicycle_parking\", etc.).\n\
         building options:\n\
         {categories}\n\
         Respond with a single JSON array of objects with the fields \"time\" (HH:MM), \
         \"activity\", and \"building\".",
        persona = profile.persona_text,
        date = date.date_text,
        categories = categories.join(", "),
    )
}

fn parse_time(text: &str) -> Result<u32> {
    let (h, m) = text
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("unparseable time `{text}`")))?;
    let h: u32 = h
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("unparseable time `{text}`")))?;
    let m: u32 = m
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("unparseable time `{text}`")))?;
    if h >= 24 || m >= 60 {
        return Err(Error::Parse(format!("time `{text}` out of range")));
    }
    Ok(h * 60 + m)
}

pub fn normalize_category(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Parses a schedule response: a JSON array of `{time, activity, building}`,
/// or plain lines of the form `- HH:MM: text [category]`. Entries are sorted
/// by time; categories are normalized to lowercase snake case and checked
/// against the configured set.
pub fn parse_schedule(
    response: &str,
    agent_id: u64,
    date_context: &DateContext,
    categories: &[String],
) -> Result<DaySchedule> {
    let entries = match extract_json(response).and_then(|j| serde_json::from_str::<serde_json::Value>(j).ok()) {
        Some(serde_json::Value::Array(items)) => {
            let mut out = Vec::new();
            for item in items {
                let time = item["time"]
                    .as_str()
                    .ok_or_else(|| Error::Parse("schedule entry missing `time`".into()))?
                    .to_string();
                let activity = item["activity"].as_str().unwrap_or("").to_string();
                let building = item["building"]
                    .as_str()
                    .ok_or_else(|| Error::Parse("schedule entry missing `building`".into()))?
                    .to_string();
                out.push((time, activity, building));
            }
            out
        }
        _ => parse_schedule_lines(response)?,
    };
    if entries.is_empty() {
        return Err(Error::Parse("empty schedule".into()));
    }
    let mut activities = Vec::new();
    for (time, activity_text, building) in entries {
        let start_time = parse_time(&time)?;
        let location_category = normalize_category(&building);
        if !categories.iter().any(|c| *c == location_category) {
            return Err(Error::Parse(format!(
                "unknown location category `{location_category}`"
            )));
        }
        activities.push(Activity {
            start_time,
            activity_text,
            location_category,
        });
    }
    activities.sort_by_key(|a| a.start_time);
    Ok(DaySchedule {
        agent_id,
        date_context: date_context.clone(),
        activities,
    })
}

/// Fallback line format: `[- ]HH:MM[:] activity text [category]`.
fn parse_schedule_lines(response: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for line in response.lines() {
        let line = line.trim().trim_start_matches('-').trim();
        if line.len() < 5 || !line.as_bytes()[0].is_ascii_digit() {
            continue;
        }
        let time = line[..5].to_string();
        let rest = line[5..].trim_start_matches(':').trim();
        let (text, category) = match (rest.rfind('['), rest.rfind(']')) {
            (Some(open), Some(close)) if open < close => (
                rest[..open].trim().to_string(),
                rest[open + 1..close].to_string(),
            ),
            _ => continue,
        };
        out.push((time, text, category));
    }
    Ok(out)
}

/// Report-only schedule checks: transport phrases, unknown categories,
/// missing home start, duplicate times.
pub fn validate_schedule(
    schedule: &DaySchedule,
    categories: &[String],
    transport_phrases: &[&str],
) -> Vec<Violation> {
    let mut violations = Vec::new();
    if schedule.activities.is_empty() {
        violations.push(Violation::EmptySchedule);
        return violations;
    }
    if schedule.activities[0].location_category != "house" {
        violations.push(Violation::MissingHomeStart);
    }
    let mut seen_times = std::collections::BTreeSet::new();
    for (index, act) in schedule.activities.iter().enumerate() {
        let lower = act.activity_text.to_lowercase();
        for phrase in transport_phrases {
            if lower.contains(&phrase.to_lowercase()) {
                violations.push(Violation::TransportPhrase {
                    index,
                    phrase: phrase.to_string(),
                });
            }
        }
        if !categories.iter().any(|c| *c == act.location_category) {
            violations.push(Violation::UnknownCategory {
                index,
                category: act.location_category.clone(),
            });
        }
        if !seen_times.insert(act.start_time) {
            violations.push(Violation::DuplicateTime {
                minutes: act.start_time,
            });
        }
    }
    violations
}

/// One trip intent per consecutive pair of activities with differing
/// categories. Departure is the previous activity's start plus a dwell,
/// clamped to the arrival target.
pub fn extract_trips(schedule: &DaySchedule) -> Vec<TripIntent> {
    let mut trips = Vec::new();
    for pair in schedule.activities.windows(2) {
        let (from, to) = (&pair[0], &pair[1]);
        if from.location_category == to.location_category {
            continue;
        }
        let depart_after = (from.start_time + DWELL_MINUTES).min(to.start_time);
        trips.push(TripIntent {
            sequence_index: trips.len() as u32 + 1,
            depart_after,
            arrive_by: to.start_time,
            from_category: from.location_category.clone(),
            to_category: to.location_category.clone(),
            purpose_text: to.activity_text.clone(),
        });
    }
    trips
}

/// Canonical text form; `parse(format(s)) == s`.
pub fn format_schedule(schedule: &DaySchedule) -> String {
    let array: Vec<serde_json::Value> = schedule
        .activities
        .iter()
        .map(|a| {
            serde_json::json!({
                "time": format!("{:02}:{:02}", a.start_time / 60, a.start_time % 60),
                "activity": a.activity_text,
                "building": a.location_category,
            })
        })
        .collect();
    serde_json::Value::Array(array).to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleOutcome {
    pub schedule: DaySchedule,
    pub attempts: u32,
    /// Violations remaining before the final repair pass.
    pub dropped_activities: usize,
    pub repaired_home_start: bool,
}

/// Generates a validated schedule. Schedules with violations are re-requested
/// up to `max_regenerations` times; after that the offending activities are
/// dropped and a home start is inserted if still missing.
pub fn generate_schedule(
    profile: &AgentProfile,
    backend: &Backend,
    date: &DateContext,
    categories: &[String],
    seed: u64,
    max_regenerations: u32,
) -> Result<ScheduleOutcome> {
    let prompt = build_schedule_prompt(profile, date, categories);
    let occupation = profile
        .attributes
        .get("occupation")
        .map(AttrValue::render)
        .unwrap_or_default();
    let hint = serde_json::json!({
        "categories": categories,
        "occupation": occupation,
    });
    let mut last: Option<(DaySchedule, Vec<Violation>)> = None;
    let attempts = 1 + max_regenerations;
    for attempt in 0..attempts {
        let req = ChatRequest {
            task: TaskKind::Schedule,
            system: None,
            user: prompt.clone(),
            seed: seed.wrapping_add(attempt as u64),
            hint: Some(hint.clone()),
        };
        let response = backend.complete(&req)?;
        let schedule = match parse_schedule(&response, profile.agent_id, date, categories) {
            Ok(s) => s,
            Err(e) => {
                if attempt + 1 == attempts {
                    return Err(e);
                }
                continue;
            }
        };
        let violations = validate_schedule(&schedule, categories, DEFAULT_TRANSPORT_PHRASES);
        if violations.is_empty() {
            return Ok(ScheduleOutcome {
                schedule,
                attempts: attempt + 1,
                dropped_activities: 0,
                repaired_home_start: false,
            });
        }
        last = Some((schedule, violations));
    }
    // Repair path: drop offending activities, reinstate a home start.
    let (mut schedule, violations) = last.expect("at least one parsed schedule");
    let mut drop_indices: Vec<usize> = violations
        .iter()
        .filter_map(|v| match v {
            Violation::TransportPhrase { index, .. } => Some(*index),
            Violation::UnknownCategory { index, .. } => Some(*index),
            _ => None,
        })
        .collect();
    drop_indices.sort_unstable();
    drop_indices.dedup();
    for idx in drop_indices.iter().rev() {
        schedule.activities.remove(*idx);
    }
    let mut repaired_home_start = false;
    let needs_home = schedule
        .activities
        .first()
        .map(|a| a.location_category != "house")
        .unwrap_or(true);
    if needs_home {
        let start_time = schedule
            .activities
            .first()
            .map(|a| a.start_time.saturating_sub(60))
            .unwrap_or(360);
        schedule.activities.insert(
            0,
            Activity {
                start_time,
                activity_text: "Starting the day at home".into(),
                location_category: "house".into(),
            },
        );
        repaired_home_start = true;
    }
    Ok(ScheduleOutcome {
        schedule,
        attempts,
        dropped_activities: drop_indices.len(),
        repaired_home_start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> Vec<String> {
        ["house", "office", "canteen", "supermarket", "bench", "park"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn ctx() -> DateContext {
        DateContext::default()
    }

    fn profile() -> AgentProfile {
        AgentProfile {
            agent_id: 3828,
            attributes: Default::default(),
            persona_text: "A 43-year-old full-time professional.".into(),
        }
    }

    /// The four-trip appendix day, in the plain line format.
    fn example_day() -> &'static str {
        " - 06:00: Waking up and getting ready for the day [house]\n\
         - 07:00: Having breakfast with the family [house]\n\
         - 08:00: Helping the children with their homework [house]\n\
         - 09:00: Leaving for work after ensuring the family is prepared for the day [house]\n\
         - 10:00: Attending a meeting with colleagues at the office [office]\n\
         - 12:00: Having lunch at the office canteen [canteen]\n\
         - 13:00: Continuing work at the office [office]\n\
         - 17:00: Heading home from work [office]\n\
         - 18:00: Spending quality time with the family, preparing dinner together [house]\n\
         - 20:00: Eating dinner together as a family [house]\n\
         - 21:00: Relaxing with the family in the evening [house]"
    }

    #[test]
    fn prompt_renders_all_slots() {
        let mut date = ctx();
        date.external_factors = Some("There is a public transport strike today.".into());
        let prompt = build_schedule_prompt(&profile(), &date, &cats());
        assert!(prompt.contains("Today is a typical Tuesday."));
        assert!(prompt.contains("public transport strike"));
        assert!(prompt.contains("house, office"));
        assert!(prompt.contains("do not include any transportation"));
    }

    #[test]
    fn parses_line_format() {
        let s = parse_schedule("06:00 Waking up [house]", 1, &ctx(), &cats()).unwrap();
        assert_eq!(s.activities[0].start_time, 360);
        assert_eq!(s.activities[0].location_category, "house");
    }

    #[test]
    fn parses_json_format_and_sorts() {
        let response = r#"[
            {"time": "12:00", "activity": "Lunch", "building": "canteen"},
            {"time": "08:00", "activity": "Work", "building": "Office"}
        ]"#;
        let s = parse_schedule(response, 1, &ctx(), &cats()).unwrap();
        assert_eq!(s.activities[0].start_time, 480);
        assert_eq!(s.activities[0].location_category, "office");
        assert_eq!(s.activities[1].location_category, "canteen");
    }

    #[test]
    fn rejects_transport_location_category() {
        let err = parse_schedule("09:00 Getting the bike [parking]", 1, &ctx(), &cats());
        assert!(matches!(err, Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_unparseable_time() {
        assert!(parse_schedule("9 o'clock Work [office]", 1, &ctx(), &cats()).is_err());
        assert!(parse_schedule("25:00 Work [office]", 1, &ctx(), &cats()).is_err());
    }

    #[test]
    fn validate_flags_missing_home_start() {
        let s = parse_schedule("09:00 Work [office]", 1, &ctx(), &cats()).unwrap();
        let v = validate_schedule(&s, &cats(), DEFAULT_TRANSPORT_PHRASES);
        assert!(v.contains(&Violation::MissingHomeStart));
    }

    #[test]
    fn validate_flags_transport_phrase() {
        let s = parse_schedule(
            "06:00 Morning [house]\n09:00 Taking the bus downtown [office]",
            1,
            &ctx(),
            &cats(),
        )
        .unwrap();
        let v = validate_schedule(&s, &cats(), DEFAULT_TRANSPORT_PHRASES);
        assert!(matches!(v[0], Violation::TransportPhrase { index: 1, .. }));
    }

    #[test]
    fn validate_flags_duplicate_times() {
        let s = parse_schedule(
            "06:00 Morning [house]\n06:00 Also morning [house]",
            1,
            &ctx(),
            &cats(),
        )
        .unwrap();
        let v = validate_schedule(&s, &cats(), DEFAULT_TRANSPORT_PHRASES);
        assert!(matches!(v[0], Violation::DuplicateTime { minutes: 360 }));
    }

    #[test]
    fn clean_example_day_has_zero_violations() {
        let s = parse_schedule(example_day(), 3828, &ctx(), &cats()).unwrap();
        assert!(validate_schedule(&s, &cats(), DEFAULT_TRANSPORT_PHRASES).is_empty());
    }

    #[test]
    fn example_day_yields_four_trips() {
        let s = parse_schedule(example_day(), 3828, &ctx(), &cats()).unwrap();
        let trips = extract_trips(&s);
        let pairs: Vec<(&str, &str)> = trips
            .iter()
            .map(|t| (t.from_category.as_str(), t.to_category.as_str()))
            .collect();
        assert_eq!(
            pairs,
            vec![
                ("house", "office"),
                ("office", "canteen"),
                ("canteen", "office"),
                ("office", "house"),
            ]
        );
        // Departure: previous start + dwell, clamped to the arrival target.
        assert_eq!(trips[0].depart_after, 9 * 60 + DWELL_MINUTES);
        assert_eq!(trips[0].arrive_by, 600);
    }

    #[test]
    fn single_activity_day_has_zero_trips() {
        let s = parse_schedule("08:00 At home all day [house]", 1, &ctx(), &cats()).unwrap();
        assert!(extract_trips(&s).is_empty());
    }

    #[test]
    fn extract_trips_idempotent_and_bounded() {
        let s = parse_schedule(example_day(), 1, &ctx(), &cats()).unwrap();
        let a = extract_trips(&s);
        let b = extract_trips(&s);
        assert_eq!(a, b);
        assert!(a.len() <= s.activities.len() - 1);
    }

    #[test]
    fn format_parse_round_trip() {
        let s = parse_schedule(example_day(), 3828, &ctx(), &cats()).unwrap();
        let round = parse_schedule(&format_schedule(&s), 3828, &ctx(), &cats()).unwrap();
        assert_eq!(s, round);
    }
}
