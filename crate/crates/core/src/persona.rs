//! Persona description generation from sampled attributes.

use serde::{Deserialize, Serialize};

use crate::backend::{extract_json, Backend, ChatRequest, TaskKind};
use crate::population::Agent;
use crate::schema::{AttrMap, AttributeSchema};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: u64,
    pub attributes: AttrMap,
    pub persona_text: String,
}

/// Renders the persona prompt: sampled attributes as `key: value` lines in
/// schema order, followed by the one-paragraph instruction and a structured
/// output request.
pub fn build_description_prompt(
    attributes: &AttrMap,
    schema: &AttributeSchema,
    region: &str,
) -> Result<String> {
    schema.validate(attributes)?;
    let mut lines = String::new();
    for def in &schema.attributes {
        if let Some(v) = attributes.get(&def.name) {
            lines.push_str(&format!("{}: {}\n", def.name, v.render()));
        }
    }
    Ok(format!(
        "Sample attributes from the {region} population:\n{lines}\
         Imagine a realistic person with these attributes. Write a specific one paragraph description:\n\
         Respond with a single JSON object with the field \"description\"."
    ))
}

/// Ordered `[name, rendered value]` pairs for the stub hint.
pub fn attribute_pairs(attributes: &AttrMap, schema: &AttributeSchema) -> serde_json::Value {
    let pairs: Vec<serde_json::Value> = schema
        .attributes
        .iter()
        .filter_map(|def| {
            attributes
                .get(&def.name)
                .map(|v| serde_json::json!([def.name, v.render()]))
        })
        .collect();
    serde_json::Value::Array(pairs)
}

fn parse_description(response: &str) -> Result<String> {
    let json = extract_json(response)
        .ok_or_else(|| Error::Parse("no JSON object in persona response".into()))?;
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("invalid persona JSON: {e}")))?;
    let description = value["description"]
        .as_str()
        .ok_or_else(|| Error::Parse("persona response missing `description` field".into()))?;
    if description.trim().is_empty() {
        return Err(Error::Parse("empty persona description".into()));
    }
    Ok(description.to_string())
}

/// Generates the persona text for one agent. Malformed responses are
/// re-requested up to the backend's retry budget; total requests stay within
/// `1 + max_retries`.
pub fn generate_persona(
    agent: &Agent,
    backend: &Backend,
    schema: &AttributeSchema,
    region: &str,
    seed: u64,
) -> Result<AgentProfile> {
    let prompt = build_description_prompt(&agent.attributes, schema, region)?;
    let req = ChatRequest {
        task: TaskKind::Persona,
        system: None,
        user: prompt,
        seed,
        hint: Some(serde_json::json!({
            "attributes": attribute_pairs(&agent.attributes, schema),
        })),
    };
    let attempts = 1 + backend.max_retries();
    let mut last_err = None;
    for attempt in 0..attempts {
        let mut attempt_req = req.clone();
        attempt_req.seed = seed.wrapping_add(attempt as u64);
        match backend.complete(&attempt_req).and_then(|r| parse_description(&r)) {
            Ok(persona_text) => {
                return Ok(AgentProfile {
                    agent_id: agent.agent_id,
                    attributes: agent.attributes.clone(),
                    persona_text,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Backend("persona generation failed".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BackendConfig;
    use crate::schema::AttrValue;

    fn agent() -> Agent {
        let mut attributes = AttrMap::new();
        for (k, v) in [
            ("sex", "male"),
            ("occupation", "retiree"),
            ("economic_status", "low"),
            ("income_band", "1500_2000"),
        ] {
            attributes.insert(k.into(), AttrValue::Text(v.into()));
        }
        for (k, v) in [
            ("age", 78.0),
            ("household_size", 2.0),
            ("car_ownership", 1.0),
            ("bike_ownership", 0.0),
        ] {
            attributes.insert(k.into(), AttrValue::Number(v));
        }
        Agent {
            agent_id: 1847,
            source_record_id: "r0".into(),
            attributes,
        }
    }

    #[test]
    fn prompt_contains_template_and_schema_ordered_attributes() {
        let schema = AttributeSchema::default_survey();
        let prompt = build_description_prompt(&agent().attributes, &schema, "Berlin").unwrap();
        assert!(prompt.contains("Imagine a realistic person with these attributes"));
        assert!(prompt.contains("age: 78\nsex: male\noccupation: retiree"));
        assert!(prompt.contains("JSON object"));
    }

    #[test]
    fn identical_attributes_identical_prompt_bytes() {
        let schema = AttributeSchema::default_survey();
        let a = build_description_prompt(&agent().attributes, &schema, "Berlin").unwrap();
        let b = build_description_prompt(&agent().attributes, &schema, "Berlin").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_attribute_is_schema_error() {
        let schema = AttributeSchema::default_survey();
        let mut attrs = agent().attributes;
        attrs.insert("favorite_color".into(), AttrValue::Text("blue".into()));
        assert!(matches!(
            build_description_prompt(&attrs, &schema, "Berlin"),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn stub_persona_mentions_age_and_occupation() {
        let backend = Backend::new(BackendConfig::default()).unwrap();
        let schema = AttributeSchema::default_survey();
        let profile = generate_persona(&agent(), &backend, &schema, "Berlin", 7).unwrap();
        assert!(profile.persona_text.contains("78-year-old retiree"));
        // Attributes unchanged by generation.
        assert_eq!(profile.attributes, agent().attributes);
    }

    #[test]
    fn missing_description_field_is_parse_error() {
        assert!(matches!(
            parse_description("{\"text\": \"hi\"}"),
            Err(Error::Parse(_))
        ));
        assert!(parse_description("not json at all").is_err());
        assert!(parse_description("{\"description\": \"  \"}").is_err());
    }

    #[test]
    fn verbatim_paragraph_stored_unchanged() {
        let paragraph = "Meet 43-year-old Thomas, a married man living in the city with his wife and two children.";
        let wrapped = format!("{{\"description\": {}}}", serde_json::to_string(paragraph).unwrap());
        assert_eq!(parse_description(&wrapped).unwrap(), paragraph);
    }
}
