//! Declarative attribute schema for survey microdata and agent profiles.
//!
//! The schema is user-supplied (JSON); a default mirroring a German national
//! travel survey's attribute list is shipped for convenience.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A single attribute value: categorical text or a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Number(f64),
    Text(String),
}

impl AttrValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttrValue::Number(n) => Some(*n),
            AttrValue::Text(t) => t.parse().ok(),
        }
    }

    pub fn render(&self) -> String {
        match self {
            AttrValue::Number(n) => {
                if n.fract() == 0.0 && n.abs() < 1e15 {
                    format!("{}", *n as i64)
                } else {
                    format!("{n}")
                }
            }
            AttrValue::Text(t) => t.clone(),
        }
    }
}

/// Ordered attribute map. BTreeMap keeps serialization deterministic;
/// rendering order comes from the schema, not the map.
pub type AttrMap = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrKind {
    Categorical { values: Vec<String> },
    Numeric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttrDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<AttrDef>,
}

impl AttributeSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&AttrDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    /// Checks required keys, unknown keys, and categorical membership.
    pub fn validate(&self, attrs: &AttrMap) -> Result<()> {
        for def in &self.attributes {
            match attrs.get(&def.name) {
                None if def.required => {
                    return Err(Error::Schema(format!("missing required attribute `{}`", def.name)));
                }
                None => {}
                Some(v) => match &def.kind {
                    AttrKind::Numeric => {
                        if v.as_number().is_none() {
                            return Err(Error::Schema(format!(
                                "attribute `{}` must be numeric, got `{}`",
                                def.name,
                                v.render()
                            )));
                        }
                    }
                    AttrKind::Categorical { values } => {
                        let text = v.render();
                        if !values.iter().any(|c| c == &text) {
                            return Err(Error::Schema(format!(
                                "attribute `{}` value `{text}` not in declared categories",
                                def.name
                            )));
                        }
                    }
                },
            }
        }
        for key in attrs.keys() {
            if self.get(key).is_none() {
                return Err(Error::Schema(format!("unknown attribute key `{key}`")));
            }
        }
        Ok(())
    }

    /// Default schema mirroring the survey attribute list used throughout.
    pub fn default_survey() -> Self {
        fn cat(name: &str, values: &[&str]) -> AttrDef {
            AttrDef {
                name: name.to_string(),
                kind: AttrKind::Categorical {
                    values: values.iter().map(|s| s.to_string()).collect(),
                },
                required: true,
            }
        }
        fn num(name: &str) -> AttrDef {
            AttrDef {
                name: name.to_string(),
                kind: AttrKind::Numeric,
                required: true,
            }
        }
        AttributeSchema {
            attributes: vec![
                num("age"),
                cat("sex", &["male", "female", "diverse"]),
                cat(
                    "occupation",
                    &[
                        "full_time",
                        "part_time",
                        "student",
                        "pupil",
                        "unemployed",
                        "retiree",
                        "homemaker",
                        "child",
                        "other",
                    ],
                ),
                cat(
                    "economic_status",
                    &["very_low", "low", "medium", "high", "very_high"],
                ),
                num("household_size"),
                num("car_ownership"),
                num("bike_ownership"),
                cat(
                    "income_band",
                    &[
                        "under_1500",
                        "1500_2000",
                        "2000_3000",
                        "3000_4000",
                        "4000_5000",
                        "over_5000",
                    ],
                ),
            ],
        }
    }
}
