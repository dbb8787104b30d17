//! Synthetic population from weighted survey microdata.
//!
//! Weight scaling, TRS integerization (truncate, replicate, sample), IPF for
//! marginal fitting, and deterministic expansion into an agent list.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::schema::{AttrMap, AttrValue, AttributeSchema};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub record_id: String,
    pub attributes: AttrMap,
    pub weight: f64,
}

impl SurveyRecord {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if !(self.weight > 0.0) {
            return Err(Error::rejected(format!(
                "record `{}` has nonpositive weight {}",
                self.record_id, self.weight
            )));
        }
        schema.validate(&self.attributes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub agent_id: u64,
    pub source_record_id: String,
    pub attributes: AttrMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPopulation {
    pub agents: Vec<Agent>,
    pub target_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalTable {
    pub attribute: String,
    pub categories: Vec<String>,
    pub totals: Vec<f64>,
}

impl MarginalTable {
    pub fn total(&self) -> f64 {
        self.totals.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.len() != self.totals.len() {
            return Err(Error::rejected("marginal categories/totals length mismatch"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.categories {
            if !seen.insert(c) {
                return Err(Error::rejected(format!("duplicate marginal category `{c}`")));
            }
        }
        for t in &self.totals {
            if !t.is_finite() || *t < 0.0 {
                return Err(Error::rejected(format!("marginal total {t} not finite nonnegative")));
            }
        }
        Ok(())
    }

    /// Marginals CSV: `category,total` with header.
    pub fn read_csv(path: &Path, attribute: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut categories = Vec::new();
        let mut totals = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            categories.push(rec.get(0).unwrap_or_default().to_string());
            let t: f64 = rec
                .get(1)
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|_| Error::rejected("non-numeric marginal total"))?;
            totals.push(t);
        }
        let table = MarginalTable {
            attribute: attribute.to_string(),
            categories,
            totals,
        };
        table.validate()?;
        Ok(table)
    }
}

/// Scales weights so they sum to the target population size:
/// `w_i* = w_i * N / sum_j w_j`.
pub fn scale_weights(records: &[SurveyRecord], target_size: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::rejected("empty record list"));
    }
    if target_size == 0 {
        return Err(Error::rejected("target size must be >= 1"));
    }
    let mut total = 0.0;
    for r in records {
        if !(r.weight > 0.0) || !r.weight.is_finite() {
            return Err(Error::rejected(format!(
                "record `{}` has invalid weight {}",
                r.record_id, r.weight
            )));
        }
        total += r.weight;
    }
    let n = target_size as f64;
    Ok(records.iter().map(|r| r.weight * n / total).collect())
}

/// TRS integerization: floor each scaled weight, then draw the remainder
/// without replacement with probability proportional to fractional parts.
///
/// The remainder draw uses systematic sampling over the fractional parts, so
/// each record's inclusion probability in the remainder equals its fractional
/// part exactly and the result is reproducible from the seed.
pub fn trs_sample(scaled_weights: &[f64], seed: u64) -> Result<Vec<u64>> {
    if scaled_weights.is_empty() {
        return Err(Error::rejected("empty weight list"));
    }
    let sum: f64 = scaled_weights.iter().sum();
    let n = sum.round();
    if (sum - n).abs() > 1e-6 * n.max(1.0) {
        return Err(Error::rejected(format!(
            "scaled weights sum {sum} is not integral within tolerance"
        )));
    }
    let mut counts: Vec<u64> = Vec::with_capacity(scaled_weights.len());
    let mut fracs: Vec<f64> = Vec::with_capacity(scaled_weights.len());
    let mut floor_sum: u64 = 0;
    for &w in scaled_weights {
        if w < 0.0 || !w.is_finite() {
            return Err(Error::rejected(format!("invalid scaled weight {w}")));
        }
        let f = w.floor();
        floor_sum += f as u64;
        counts.push(f as u64);
        fracs.push(w - f);
    }
    let remainder = n as u64 - floor_sum;
    if remainder == 0 {
        return Ok(counts);
    }
    let positive = fracs.iter().filter(|f| **f > 0.0).count();
    if (remainder as usize) > positive {
        return Err(Error::DegenerateWeights(format!(
            "remainder {remainder} exceeds {positive} records with positive fractional part"
        )));
    }
    // Systematic PPS without replacement: fractional parts sum to the
    // remainder (up to rounding), so a unit-spaced sweep from a single
    // uniform start selects exactly `remainder` records, each with
    // inclusion probability equal to its fractional part.
    let frac_sum: f64 = fracs.iter().sum();
    let step = frac_sum / remainder as f64;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let start: f64 = rng.gen_range(0.0..step);
    let mut cum = 0.0;
    let mut k = 0u64;
    for (i, &f) in fracs.iter().enumerate() {
        cum += f;
        while k < remainder && start + k as f64 * step < cum {
            counts[i] += 1;
            k += 1;
        }
    }
    // Floating-point slack at the very end of the sweep.
    let mut i = fracs.len();
    while k < remainder && i > 0 {
        i -= 1;
        if fracs[i] > 0.0 && counts[i] == (scaled_weights[i].floor() as u64) {
            counts[i] += 1;
            k += 1;
        }
    }
    debug_assert_eq!(counts.iter().sum::<u64>(), n as u64);
    Ok(counts)
}

/// Iterative proportional fitting of a seed table to row/column marginals.
///
/// Alternates row and column proportional scaling until the maximum absolute
/// marginal deviation drops below `tol`. Structural zeros in the seed are
/// preserved.
pub fn ipf_fit(
    seed_table: &[Vec<f64>],
    row_marginals: &MarginalTable,
    col_marginals: &MarginalTable,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<Vec<f64>>> {
    row_marginals.validate()?;
    col_marginals.validate()?;
    let nr = seed_table.len();
    if nr == 0 || nr != row_marginals.totals.len() {
        return Err(Error::rejected("seed table rows do not match row marginals"));
    }
    let nc = seed_table[0].len();
    if nc == 0 || seed_table.iter().any(|r| r.len() != nc) || nc != col_marginals.totals.len() {
        return Err(Error::rejected("seed table columns do not match column marginals"));
    }
    let rt = row_marginals.total();
    let ct = col_marginals.total();
    if (rt - ct).abs() > 1e-6 * rt.max(ct).max(1.0) {
        return Err(Error::rejected(format!(
            "inconsistent marginal totals: rows {rt}, columns {ct}"
        )));
    }
    for (i, row) in seed_table.iter().enumerate() {
        if row_marginals.totals[i] > 0.0 && row.iter().all(|v| *v == 0.0) {
            return Err(Error::rejected(format!("seed row {i} has no mass but positive marginal")));
        }
    }
    for j in 0..nc {
        if col_marginals.totals[j] > 0.0 && (0..nr).all(|i| seed_table[i][j] == 0.0) {
            return Err(Error::rejected(format!(
                "seed column {j} has no mass but positive marginal"
            )));
        }
    }

    let mut table: Vec<Vec<f64>> = seed_table.to_vec();
    let mut deviation = f64::INFINITY;
    for _ in 0..max_iters {
        for (i, row) in table.iter_mut().enumerate() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                let factor = row_marginals.totals[i] / s;
                for v in row.iter_mut() {
                    *v *= factor;
                }
            }
        }
        for j in 0..nc {
            let s: f64 = table.iter().map(|r| r[j]).sum();
            if s > 0.0 {
                let factor = col_marginals.totals[j] / s;
                for row in table.iter_mut() {
                    row[j] *= factor;
                }
            }
        }
        deviation = 0.0f64;
        for (i, row) in table.iter().enumerate() {
            let s: f64 = row.iter().sum();
            deviation = deviation.max((s - row_marginals.totals[i]).abs());
        }
        for j in 0..nc {
            let s: f64 = table.iter().map(|r| r[j]).sum();
            deviation = deviation.max((s - col_marginals.totals[j]).abs());
        }
        if deviation < tol {
            return Ok(table);
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iters,
        deviation,
    })
}

/// Expands TRS counts into a dense agent list, sorted by record id then
/// replica index, agent ids `0..N-1`.
pub fn expand_population(
    records: &[SurveyRecord],
    counts: &[u64],
    seed: u64,
) -> Result<SyntheticPopulation> {
    if records.len() != counts.len() {
        return Err(Error::rejected("records/counts length mismatch"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|a, b| records[*a].record_id.cmp(&records[*b].record_id));
    let mut agents = Vec::new();
    for idx in order {
        for _replica in 0..counts[idx] {
            agents.push(Agent {
                agent_id: agents.len() as u64,
                source_record_id: records[idx].record_id.clone(),
                attributes: records[idx].attributes.clone(),
            });
        }
    }
    let target_size = agents.len();
    Ok(SyntheticPopulation {
        agents,
        target_size,
        seed,
    })
}

/// Full synthesis: scale weights, TRS, expand.
pub fn synthesize(
    records: &[SurveyRecord],
    target_size: usize,
    seed: u64,
) -> Result<SyntheticPopulation> {
    let scaled = scale_weights(records, target_size)?;
    let counts = trs_sample(&scaled, seed)?;
    expand_population(records, &counts, seed)
}

/// Microdata reader: CSV with a header row (one column per attribute plus a
/// `weight` column) or newline-delimited JSON records.
pub fn read_microdata(path: &Path, schema: &AttributeSchema) -> Result<Vec<SurveyRecord>> {
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    let records = if is_csv {
        read_microdata_csv(path, schema)?
    } else {
        read_microdata_ndjson(path)?
    };
    for r in &records {
        r.validate(schema)?;
    }
    Ok(records)
}

fn read_microdata_csv(path: &Path, schema: &AttributeSchema) -> Result<Vec<SurveyRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let weight_col = headers
        .iter()
        .position(|h| h == "weight")
        .ok_or_else(|| Error::rejected("microdata CSV missing `weight` column"))?;
    let id_col = headers.iter().position(|h| h == "record_id");
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut attributes = AttrMap::new();
        for (i, h) in headers.iter().enumerate() {
            if i == weight_col || Some(i) == id_col {
                continue;
            }
            let raw = rec.get(i).unwrap_or_default().trim();
            if raw.is_empty() {
                continue;
            }
            let value = match schema.get(h).map(|d| &d.kind) {
                Some(crate::schema::AttrKind::Numeric) => AttrValue::Number(
                    raw.parse()
                        .map_err(|_| Error::rejected(format!("non-numeric `{h}` value `{raw}`")))?,
                ),
                _ => AttrValue::Text(raw.to_string()),
            };
            attributes.insert(h.to_string(), value);
        }
        let weight: f64 = rec
            .get(weight_col)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| Error::rejected("non-numeric weight"))?;
        let record_id = match id_col {
            Some(c) => rec.get(c).unwrap_or_default().to_string(),
            None => format!("r{line:06}"),
        };
        out.push(SurveyRecord {
            record_id,
            attributes,
            weight,
        });
    }
    Ok(out)
}

fn read_microdata_ndjson(path: &Path) -> Result<Vec<SurveyRecord>> {
    let file = std::fs::File::open(path)?;
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

/// Population output: newline-delimited JSON, one agent per line.
pub fn write_population(path: &Path, pop: &SyntheticPopulation) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for agent in &pop.agents {
        serde_json::to_writer(&mut file, agent)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_population(path: &Path, seed: u64) -> Result<SyntheticPopulation> {
    let file = std::fs::File::open(path)?;
    let mut agents = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        agents.push(serde_json::from_str::<Agent>(&line)?);
    }
    let target_size = agents.len();
    Ok(SyntheticPopulation {
        agents,
        target_size,
        seed,
    })
}
