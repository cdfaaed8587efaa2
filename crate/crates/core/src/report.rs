//! Result-file persistence and table emitters.
//!
//! Tables are pure views over a [`ResultSet`]: values are derived on demand
//! and rounded only when a Markdown cell is printed. CSV cells keep full
//! precision.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::analysis::{self, DEFAULT_EFFICIENCY_THRESHOLD};
use crate::backends::BackendId;
use crate::error::{Error, Result};
use crate::placement::Allocator;
use crate::results::{ResultSet, SCHEMA_VERSION};

/// Placeholder for a cell with no usable measurement.
pub const ABSENT: &str = "---";

pub fn to_json(results: &ResultSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(results)?)
}

pub fn emit<W: Write>(results: &ResultSet, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, results)?;
    out.write_all(b"\n").map_err(|source| Error::Io {
        path: "<writer>".into(),
        source,
    })
}

pub fn save_results(results: &ResultSet, path: &Path) -> Result<()> {
    let text = to_json(results)? + "\n";
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

/// Parses a result file, checking the schema version before the body.
pub fn parse_results(text: &str) -> Result<ResultSet> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .unwrap_or(0);
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn load_results(path: &Path) -> Result<ResultSet> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_results(&text)
}

/// Union of several result sets. The first set's metadata is kept and the
/// warnings of all sets are concatenated.
pub fn merge_results(sets: Vec<ResultSet>) -> Result<ResultSet> {
    let mut iter = sets.into_iter();
    let mut merged = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
    for set in iter {
        merged.metadata.warnings.extend(set.metadata.warnings);
        merged.records.extend(set.records);
    }
    let mut collisions: Vec<String> = merged
        .duplicate_keys()
        .iter()
        .map(|k| k.to_string())
        .collect();
    if !collisions.is_empty() {
        collisions.sort();
        collisions.dedup();
        return Err(Error::DuplicatePoints(collisions));
    }
    Ok(merged)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Markdown,
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(Error::InvalidArgument(format!(
                "unknown format `{other}` (expected md or csv)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Artifact {
    Speedup,
    Efficiency,
    Allocator,
    SweetSpot,
    Plot,
}

impl Artifact {
    pub const ALL: [Artifact; 5] = [
        Artifact::Speedup,
        Artifact::Efficiency,
        Artifact::Allocator,
        Artifact::SweetSpot,
        Artifact::Plot,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            Artifact::Speedup => "speedup",
            Artifact::Efficiency => "efficiency",
            Artifact::Allocator => "allocator",
            Artifact::SweetSpot => "sweet-spot",
            Artifact::Plot => "plot",
        }
    }
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Artifact {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Artifact::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "sweet_spot" && *a == Artifact::SweetSpot))
            .ok_or_else(|| {
                let names: Vec<_> = Artifact::ALL.iter().map(|a| a.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown artifact `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    /// Markdown shows the given number of decimals.
    Number(f64, usize),
    Integer(u64),
    Absent,
}

impl Cell {
    fn markdown(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Number(v, d) => format!("{v:.d$}"),
            Cell::Integer(v) => v.to_string(),
            Cell::Absent => ABSENT.to_owned(),
        }
    }

    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Number(v, _) => v.to_string(),
            Cell::Integer(v) => v.to_string(),
            Cell::Absent => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(Cell::markdown).collect())
            .collect();
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.headers[c].len(), 3])
                    .max()
                    .unwrap_or(3)
            })
            .collect();
        let line = |row: &[String]| {
            let padded: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| {
                    if i == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = format!("### {}\n\n", self.title);
        out += &line(&self.headers);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out += &format!("|-{}-|\n", rule.join("-|-"));
        for row in &cells {
            out += &line(row);
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(&self.headers)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(Cell::csv))?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Execution(format!("csv flush failed: {e}")))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Markdown => Ok(self.to_markdown()),
            Format::Csv => self.to_csv(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    /// Problem size for the per-size tables; defaults to each kernel's
    /// largest size with a sequential baseline.
    pub size: Option<u64>,
    pub threshold: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            size: None,
            threshold: DEFAULT_EFFICIENCY_THRESHOLD,
        }
    }
}

fn backends_of(results: &ResultSet) -> Vec<BackendId> {
    let set: BTreeSet<BackendId> = results.records.iter().map(|r| r.key.backend).collect();
    set.into_iter().collect()
}

fn table_size(
    results: &ResultSet,
    kernel: &str,
    allocator: Allocator,
    opts: &ReportOptions,
) -> Option<u64> {
    opts.size.or_else(|| {
        results
            .records
            .iter()
            .filter(|r| {
                r.key.kernel == kernel
                    && r.key.allocator == allocator
                    && r.key.backend == BackendId::Seq
            })
            .map(|r| r.key.size)
            .max()
    })
}

fn has_usable(
    results: &ResultSet,
    kernel: &str,
    size: u64,
    allocator: Allocator,
    backend: BackendId,
) -> bool {
    results.records.iter().any(|r| {
        r.key.kernel == kernel
            && r.key.size == size
            && r.key.allocator == allocator
            && r.key.backend == backend
            && r.usable_median().is_some()
    })
}

fn kernel_header(kernel: &str, size: Option<u64>) -> String {
    match size {
        Some(n) if n.is_power_of_two() => format!("{kernel} (n=2^{})", n.trailing_zeros()),
        Some(n) => format!("{kernel} (n={n})"),
        None => kernel.to_owned(),
    }
}

/// Backends by kernels; each cell is the speedup at the backend's largest
/// measured thread count.
pub fn speedup_tables(results: &ResultSet, opts: &ReportOptions) -> Result<Vec<Table>> {
    let backends = backends_of(results);
    let mut tables = Vec::new();
    for allocator in results.allocators() {
        let kernels = results.kernels();
        let sizes: Vec<Option<u64>> = kernels
            .iter()
            .map(|k| table_size(results, k, allocator, opts))
            .collect();
        let mut headers = vec!["backend".to_owned()];
        headers.extend(
            kernels
                .iter()
                .zip(&sizes)
                .map(|(k, s)| kernel_header(k, *s)),
        );
        let mut columns = Vec::new();
        for (kernel, size) in kernels.iter().zip(&sizes) {
            let size = size.ok_or_else(|| {
                Error::Analysis(format!(
                    "missing valid baseline point {kernel}/seq/t1 for allocator {allocator}"
                ))
            })?;
            columns.push(analysis::speedup_table(results, kernel, size, allocator)?);
        }
        let rows = backends
            .iter()
            .map(|&b| {
                let mut row = vec![Cell::Text(b.name().to_owned())];
                row.extend(columns.iter().map(|t| {
                    t.rows
                        .iter()
                        .filter(|r| r.backend == b)
                        .max_by_key(|r| r.threads)
                        .and_then(|r| r.speedup)
                        .map_or(Cell::Absent, |v| Cell::Number(v, 2))
                }));
                row
            })
            .collect();
        tables.push(Table {
            title: format!("Speedup over sequential at max threads ({allocator})"),
            headers,
            rows,
        });
    }
    Ok(tables)
}

/// Backends by kernels; each cell is the largest thread count whose
/// efficiency meets the threshold.
pub fn efficiency_tables(results: &ResultSet, opts: &ReportOptions) -> Result<Vec<Table>> {
    let backends = backends_of(results);
    let mut tables = Vec::new();
    for allocator in results.allocators() {
        let kernels = results.kernels();
        let sizes: Vec<Option<u64>> = kernels
            .iter()
            .map(|k| table_size(results, k, allocator, opts))
            .collect();
        let mut headers = vec!["backend".to_owned()];
        headers.extend(
            kernels
                .iter()
                .zip(&sizes)
                .map(|(k, s)| kernel_header(k, *s)),
        );
        let mut rows = Vec::new();
        for &backend in &backends {
            let mut row = vec![Cell::Text(backend.name().to_owned())];
            for (kernel, size) in kernels.iter().zip(&sizes) {
                let cell = match size {
                    Some(size) if has_usable(results, kernel, *size, allocator, backend) => {
                        analysis::efficiency_for_backend(
                            results,
                            kernel,
                            *size,
                            allocator,
                            backend,
                            opts.threshold,
                        )?
                        .threshold_threads
                        .map_or(Cell::Absent, |p| Cell::Integer(p as u64))
                    }
                    _ => Cell::Absent,
                };
                row.push(cell);
            }
            rows.push(row);
        }
        tables.push(Table {
            title: format!(
                "Largest thread count with efficiency >= {:.0}% ({allocator})",
                opts.threshold * 100.0
            ),
            headers,
            rows,
        });
    }
    Ok(tables)
}

/// Percent change of first-touch over the default allocator, one row per
/// grid point.
pub fn allocator_table(results: &ResultSet) -> Result<Table> {
    let default = results.with_allocator(Allocator::Default);
    let touched = results.with_allocator(Allocator::FirstTouch);
    if default.records.is_empty() || touched.records.is_empty() {
        return Err(Error::Analysis(
            "allocator comparison needs both default and first_touch points".into(),
        ));
    }
    let deltas = analysis::allocator_comparison(&default, &touched)?;
    Ok(Table {
        title: "First-touch vs default allocation (% faster)".into(),
        headers: ["kernel", "backend", "threads", "size", "percent"]
            .map(String::from)
            .to_vec(),
        rows: deltas
            .into_iter()
            .map(|d| {
                vec![
                    Cell::Text(d.key.kernel),
                    Cell::Text(d.key.backend.name().to_owned()),
                    Cell::Integer(d.key.threads as u64),
                    Cell::Integer(d.key.size),
                    d.percent.map_or(Cell::Absent, |p| Cell::Number(p, 1)),
                ]
            })
            .collect(),
    })
}

/// Smallest stably profitable size per kernel and parallel backend.
pub fn sweet_spot_tables(results: &ResultSet) -> Result<Vec<Table>> {
    let parallel: Vec<BackendId> = backends_of(results)
        .into_iter()
        .filter(|b| *b != BackendId::Seq)
        .collect();
    let mut tables = Vec::new();
    for allocator in results.allocators() {
        let mut headers = vec!["kernel".to_owned()];
        headers.extend(parallel.iter().map(|b| b.name().to_owned()));
        let mut rows = Vec::new();
        for kernel in results.kernels() {
            let mut row = vec![Cell::Text(kernel.to_owned())];
            for &backend in &parallel {
                let present = results.records.iter().any(|r| {
                    r.key.kernel == kernel
                        && r.key.backend == backend
                        && r.key.allocator == allocator
                });
                let cell = if present {
                    analysis::sweet_spot(results, kernel, backend, allocator)?
                        .map_or(Cell::Absent, Cell::Integer)
                } else {
                    Cell::Absent
                };
                row.push(cell);
            }
            rows.push(row);
        }
        tables.push(Table {
            title: format!("Smallest size where parallel stably beats sequential ({allocator})"),
            headers,
            rows,
        });
    }
    Ok(tables)
}

/// Long-format table of every point, for external plotting.
pub fn plot_table(results: &ResultSet) -> Table {
    let mut records: Vec<_> = results.records.iter().collect();
    records.sort_by(|a, b| a.key.cmp(&b.key));
    Table {
        title: "Median durations".into(),
        headers: [
            "kernel",
            "backend",
            "threads",
            "size",
            "allocator",
            "element_type",
            "median_ns",
            "valid",
            "fallback",
            "skipped",
        ]
        .map(String::from)
        .to_vec(),
        rows: records
            .into_iter()
            .map(|r| {
                vec![
                    Cell::Text(r.key.kernel.clone()),
                    Cell::Text(r.key.backend.name().to_owned()),
                    Cell::Integer(r.key.threads as u64),
                    Cell::Integer(r.key.size),
                    Cell::Text(r.key.allocator.name().to_owned()),
                    Cell::Text(r.key.element_type.name().to_owned()),
                    r.usable_median()
                        .map_or(Cell::Absent, |m| Cell::Number(m, 0)),
                    Cell::Text(r.valid.to_string()),
                    Cell::Text(r.fallback.to_string()),
                    Cell::Text(r.skipped.to_string()),
                ]
            })
            .collect(),
    }
}

pub fn artifact_tables(
    results: &ResultSet,
    artifact: Artifact,
    opts: &ReportOptions,
) -> Result<Vec<Table>> {
    match artifact {
        Artifact::Speedup => speedup_tables(results, opts),
        Artifact::Efficiency => efficiency_tables(results, opts),
        Artifact::Allocator => Ok(vec![allocator_table(results)?]),
        Artifact::SweetSpot => sweet_spot_tables(results),
        Artifact::Plot => Ok(vec![plot_table(results)]),
    }
}

/// Renders the artifact's tables, separated by blank lines.
pub fn render(
    results: &ResultSet,
    artifact: Artifact,
    format: Format,
    opts: &ReportOptions,
) -> Result<String> {
    let parts = artifact_tables(results, artifact, opts)?
        .iter()
        .map(|t| t.render(format))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join("\n"))
}
