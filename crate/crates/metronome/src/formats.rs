//! On-disk formats: lattice TOML, trace CSV/JSON, spectrum and fit JSON.
//!
//! Every JSON document carries `schema_version`; see `docs/formats.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use metronome_core::model::{build_geometry, Edge};
use metronome_core::propagator::TimeGrid;
use metronome_core::{FitResult, Geometry, LatticeSpec, SpectrumReport, TimeTrace};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// A scalar applied to every site, or one value per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSite {
    Uniform(f64),
    Sites(Vec<f64>),
}

impl PerSite {
    fn expand(&self, spins: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerSite::Uniform(v) => Ok(vec![*v; spins]),
            PerSite::Sites(v) if v.len() == spins => Ok(v.clone()),
            PerSite::Sites(v) => bail!("{what} lists {} values for {spins} sites", v.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub a: usize,
    pub b: usize,
    #[serde(rename = "J")]
    pub coupling: f64,
}

/// Lattice description as written in TOML.
///
/// Presets need only `geometry`, `L` and the scalars; `custom` lattices
/// list their `edges`. `epsilon_prime` overrides `epsilon` on
/// `metronome_site`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeFile {
    pub geometry: Geometry,
    #[serde(rename = "L")]
    pub spins: usize,
    #[serde(rename = "J", default = "one")]
    pub coupling: f64,
    #[serde(default = "zero_field")]
    pub h: PerSite,
    pub epsilon: PerSite,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metronome_site: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeEntry>,
}

fn one() -> f64 {
    1.0
}

fn zero_field() -> PerSite {
    PerSite::Uniform(0.0)
}

impl LatticeFile {
    pub fn to_lattice(&self) -> Result<LatticeSpec> {
        let l = self.spins;
        let fields = self.h.expand(l, "h")?;
        let mut deviations = self.epsilon.expand(l, "epsilon")?;
        let metronome = self.metronome_site.or(self.geometry.metronome_site(l));
        if let (Some(eps_prime), Some(m)) = (self.epsilon_prime, metronome) {
            if m == 0 || m > l {
                bail!("metronome_site {m} outside 1..={l}");
            }
            deviations[m - 1] = eps_prime;
        }
        let edges = if self.edges.is_empty() {
            if self.geometry == Geometry::Custom {
                bail!("custom geometry needs an explicit edge list");
            }
            build_geometry(self.geometry, l, self.coupling, 0.0, 0.5, 0.5)?.edges().to_vec()
        } else {
            self.edges.iter().map(|e| Edge::new(e.a, e.b, e.coupling)).collect()
        };
        Ok(LatticeSpec::new(l, self.geometry, edges, fields, deviations, metronome)?)
    }

    /// Fully explicit form: per-site lists and the edge list.
    pub fn from_lattice(spec: &LatticeSpec) -> Self {
        LatticeFile {
            geometry: spec.geometry(),
            spins: spec.spins(),
            coupling: spec.edges().first().map_or(1.0, |e| e.coupling),
            h: PerSite::Sites(spec.fields().to_vec()),
            epsilon: PerSite::Sites(spec.deviations().to_vec()),
            epsilon_prime: None,
            metronome_site: spec.metronome_site(),
            edges: spec
                .edges()
                .iter()
                .map(|e| EdgeEntry { a: e.a, b: e.b, coupling: e.coupling })
                .collect(),
        }
    }
}

pub fn read_lattice(path: &Path) -> Result<LatticeSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: LatticeFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    file.to_lattice()
}

pub fn lattice_to_toml(spec: &LatticeSpec) -> Result<String> {
    Ok(toml::to_string(&LatticeFile::from_lattice(spec))?)
}

/// One CSV row; `stderr` is empty for unaveraged series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub period: u64,
    pub observable: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Long-format CSV, one row per (period, observable), rows ordered by
/// observable name and then period.
pub fn write_trace_csv<W: Write>(trace: &TimeTrace, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for (name, values) in &trace.series {
        let errors = trace.stderr.get(name);
        for (k, (n, v)) in trace.periods().iter().zip(values).enumerate() {
            writer.serialize(TraceRow {
                period: *n,
                observable: name.clone(),
                value: *v,
                stderr: errors.map(|e| e[k]),
            })?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads a trace CSV back. Metadata is not part of the CSV and comes back
/// empty; the grid is the sorted set of periods, all series must cover it.
pub fn read_trace_csv<R: Read>(input: R) -> Result<TimeTrace> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows: BTreeMap<String, BTreeMap<u64, (f64, Option<f64>)>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: TraceRow = row?;
        rows.entry(row.observable).or_default().insert(row.period, (row.value, row.stderr));
    }
    let Some(first) = rows.values().next() else {
        bail!("trace file has no rows");
    };
    let periods: Vec<u64> = first.keys().copied().collect();
    let even_only = periods.iter().all(|n| n % 2 == 0);
    let mut trace = TimeTrace::new(TimeGrid::from_periods(periods.clone(), even_only)?, Default::default());
    for (name, points) in rows {
        if !points.keys().copied().eq(periods.iter().copied()) {
            bail!("series {name} is sampled on a different grid");
        }
        let values = points.values().map(|p| p.0).collect();
        trace.insert(name.clone(), values)?;
        if points.values().all(|p| p.1.is_some()) {
            trace.insert_stderr(name, points.values().map(|p| p.1.unwrap()).collect())?;
        }
    }
    Ok(trace)
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&Versioned {
        schema_version: SCHEMA_VERSION,
        body: value,
    })?;
    text.push('\n');
    Ok(text)
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let doc: Versioned<T> = serde_json::from_str(text)?;
    if doc.schema_version != SCHEMA_VERSION {
        bail!("unsupported schema_version {}", doc.schema_version);
    }
    Ok(doc.body)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_trace(trace: &TimeTrace, csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut csv_bytes = Vec::new();
    write_trace_csv(trace, &mut csv_bytes)?;
    write_atomic(csv_path, &csv_bytes)?;
    write_atomic(json_path, to_json(trace)?.as_bytes())
}

pub fn write_spectrum(report: &SpectrumReport, path: &Path) -> Result<()> {
    write_atomic(path, to_json(report)?.as_bytes())
}

pub fn write_fit(fit: &FitResult, path: &Path) -> Result<()> {
    write_atomic(path, to_json(fit)?.as_bytes())
}

/// `x,lifetime` table consumed by power-law fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifetimeRow {
    pub x: f64,
    pub lifetime: f64,
}

pub fn read_lifetime_table<R: Read>(input: R) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_reader(input);
    let rows: Vec<LifetimeRow> = reader.deserialize().collect::<Result<_, _>>()?;
    Ok(rows.into_iter().map(|r| (r.x, r.lifetime)).collect())
}

pub fn write_lifetime_table<W: Write>(points: &[(f64, f64)], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for &(x, lifetime) in points {
        writer.serialize(LifetimeRow { x, lifetime })?;
    }
    writer.flush()?;
    Ok(())
}
