//! Region × month panels: ingest, validation and alignment of case counts,
//! population and covariates, plus expected counts and observed relative risk.
//!
//! Every panel stores its values region-major: cell `(i, t)` lives at
//! `i * n_months + t`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("{file}: cannot read: {message}")]
    Io { file: String, message: String },
    #[error("{file}: row {row}: field `{field}`: {message}")]
    Schema {
        file: String,
        row: u64,
        field: String,
        message: String,
    },
    #[error("{file}: row {row}: field `cases`: negative count {value}")]
    NegativeCount { file: String, row: u64, value: i64 },
    #[error("{file}: region `{region}` {problem}")]
    RegionMismatch {
        file: String,
        region: String,
        problem: String,
    },
    #[error("{file}: months are not contiguous: {after} is followed by {next}")]
    NonContiguous {
        file: String,
        after: Month,
        next: Month,
    },
    #[error("{file}: row {row}: duplicate cell ({region}, {key})")]
    Duplicate {
        file: String,
        row: u64,
        region: String,
        key: String,
    },
    #[error("{file}: missing cell ({region}, {key})")]
    MissingCell {
        file: String,
        region: String,
        key: String,
    },
    #[error("{file}: row {row}: field `population`: must be positive, got {value}")]
    NonPositivePopulation { file: String, row: u64, value: f64 },
    #[error("{file}: covariate `{name}` must be identical across regions, differs at {month}")]
    NotRegionConstant {
        file: String,
        name: String,
        month: Month,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("window {window} is not inside the case panel months")]
    WindowOutOfRange { window: MonthWindow },
    #[error("total case count over {window} is zero; the reference rate is undefined")]
    ZeroTotalCount { window: MonthWindow },
    #[error("{0}")]
    Invalid(String),
}

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Month {
    pub year: i32,
    pub month: u8,
}

impl Month {
    pub fn new(year: i32, month: u8) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    /// Months since year 0, January.
    pub fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ordinal: i64) -> Self {
        Self {
            year: ordinal.div_euclid(12) as i32,
            month: (ordinal.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn offset(self, months: i64) -> Self {
        Self::from_ordinal(self.ordinal() + months)
    }

    /// Zero-based calendar month (January = 0).
    pub fn month0(self) -> usize {
        self.month as usize - 1
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| format!("expected YYYY-MM, got `{s}`"))?;
        let year: i32 = y.parse().map_err(|_| format!("bad year in `{s}`"))?;
        let month: u8 = m.parse().map_err(|_| format!("bad month in `{s}`"))?;
        Month::new(year, month).ok_or_else(|| format!("month out of range in `{s}`"))
    }
}

impl Serialize for MonthWindow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MonthWindow {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive range of months.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonthWindow {
    pub first: Month,
    pub last: Month,
}

impl MonthWindow {
    pub fn new(first: Month, last: Month) -> Result<Self, PanelError> {
        if last < first {
            return Err(PanelError::Invalid(format!(
                "window ends ({last}) before it starts ({first})"
            )));
        }
        Ok(Self { first, last })
    }

    pub fn len(&self) -> usize {
        (self.last.ordinal() - self.first.ordinal() + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, m: Month) -> bool {
        self.first <= m && m <= self.last
    }

    pub fn months(&self) -> impl Iterator<Item = Month> + '_ {
        (self.first.ordinal()..=self.last.ordinal()).map(Month::from_ordinal)
    }
}

impl fmt::Display for MonthWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

impl FromStr for MonthWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("expected YYYY-MM..YYYY-MM, got `{s}`"))?;
        let w = MonthWindow::new(a.parse()?, b.parse()?).map_err(|e| e.to_string())?;
        Ok(w)
    }
}

/// Observed counts `Y_it`.
#[derive(Debug, Clone, PartialEq)]
pub struct CasePanel {
    regions: Vec<String>,
    first: Month,
    n_months: usize,
    counts: Vec<u64>,
}

impl CasePanel {
    pub fn new(
        regions: Vec<String>,
        first: Month,
        n_months: usize,
        counts: Vec<u64>,
    ) -> Result<Self, PanelError> {
        if regions.is_empty() || n_months == 0 {
            return Err(PanelError::ShapeMismatch("empty case panel".into()));
        }
        if counts.len() != regions.len() * n_months {
            return Err(PanelError::ShapeMismatch(format!(
                "{} counts for {} regions x {} months",
                counts.len(),
                regions.len(),
                n_months
            )));
        }
        let unique: BTreeSet<_> = regions.iter().collect();
        if unique.len() != regions.len() {
            return Err(PanelError::Invalid("duplicate region identifiers".into()));
        }
        Ok(Self {
            regions,
            first,
            n_months,
            counts,
        })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }

    pub fn first_month(&self) -> Month {
        self.first
    }

    pub fn month(&self, t: usize) -> Month {
        self.first.offset(t as i64)
    }

    pub fn months(&self) -> Vec<Month> {
        (0..self.n_months).map(|t| self.month(t)).collect()
    }

    pub fn span(&self) -> MonthWindow {
        MonthWindow {
            first: self.first,
            last: self.month(self.n_months - 1),
        }
    }

    pub fn month_index(&self, m: Month) -> Option<usize> {
        let k = m.ordinal() - self.first.ordinal();
        (0..self.n_months as i64).contains(&k).then_some(k as usize)
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == id)
    }

    pub fn count(&self, region: usize, t: usize) -> u64 {
        self.counts[region * self.n_months + t]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn counts_mut(&mut self) -> &mut [u64] {
        &mut self.counts
    }

    pub fn years(&self) -> Vec<i32> {
        let span = self.span();
        (span.first.year..=span.last.year).collect()
    }
}

/// Yearly population per region.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPanel {
    regions: Vec<String>,
    first_year: i32,
    n_years: usize,
    values: Vec<f64>,
}

impl PopulationPanel {
    pub fn new(
        regions: Vec<String>,
        first_year: i32,
        n_years: usize,
        values: Vec<f64>,
    ) -> Result<Self, PanelError> {
        if values.len() != regions.len() * n_years {
            return Err(PanelError::ShapeMismatch(format!(
                "{} population values for {} regions x {} years",
                values.len(),
                regions.len(),
                n_years
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(PanelError::Invalid(format!(
                "population must be positive, got {v}"
            )));
        }
        Ok(Self {
            regions,
            first_year,
            n_years,
            values,
        })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_year..=self.first_year + self.n_years as i32 - 1
    }

    pub fn get(&self, region: usize, year: i32) -> Option<f64> {
        let k = year - self.first_year;
        (0..self.n_years as i32)
            .contains(&k)
            .then(|| self.values[region * self.n_years + k as usize])
    }

    /// Multiplies every population by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Expected counts `E_it` together with the reference rate that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedPanel {
    n_regions: usize,
    n_months: usize,
    values: Vec<f64>,
    rate: f64,
}

impl ExpectedPanel {
    pub fn from_values(
        n_regions: usize,
        n_months: usize,
        values: Vec<f64>,
    ) -> Result<Self, PanelError> {
        if values.len() != n_regions * n_months {
            return Err(PanelError::ShapeMismatch("expected panel size".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(PanelError::Invalid("expected counts must be positive".into()));
        }
        Ok(Self {
            n_regions,
            n_months,
            values,
            rate: f64::NAN,
        })
    }

    pub fn get(&self, region: usize, t: usize) -> f64 {
        self.values[region * self.n_months + t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }
}

/// Observed relative risk `Y_it / E_it`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskPanel {
    n_regions: usize,
    n_months: usize,
    first: Month,
    values: Vec<f64>,
}

impl RiskPanel {
    pub fn new(
        n_regions: usize,
        first: Month,
        n_months: usize,
        values: Vec<f64>,
    ) -> Result<Self, PanelError> {
        if values.len() != n_regions * n_months {
            return Err(PanelError::ShapeMismatch("risk panel size".into()));
        }
        Ok(Self {
            n_regions,
            n_months,
            first,
            values,
        })
    }

    pub fn get(&self, region: usize, t: usize) -> f64 {
        self.values[region * self.n_months + t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }

    pub fn first_month(&self) -> Month {
        self.first
    }

    pub fn month_index(&self, m: Month) -> Option<usize> {
        let k = m.ordinal() - self.first.ordinal();
        (0..self.n_months as i64).contains(&k).then_some(k as usize)
    }
}

/// One named covariate series per region and month.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePanel {
    name: String,
    n_regions: usize,
    n_months: usize,
    values: Vec<f64>,
}

/// Covariates that are a single basin-wide index replicated across regions.
const REGION_CONSTANT: &[&str] = &["enso", "s", "tna", "tn"];

pub fn is_region_constant(name: &str) -> bool {
    REGION_CONSTANT.contains(&name.to_ascii_lowercase().as_str())
}

impl CovariatePanel {
    pub fn new(
        name: impl Into<String>,
        n_regions: usize,
        n_months: usize,
        values: Vec<f64>,
    ) -> Result<Self, PanelError> {
        let name = name.into();
        if values.len() != n_regions * n_months {
            return Err(PanelError::ShapeMismatch(format!(
                "covariate `{name}`: {} values for {n_regions} x {n_months}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            n_regions,
            n_months,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn get(&self, region: usize, t: usize) -> f64 {
        self.values[region * self.n_months + t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_months(&self) -> usize {
        self.n_months
    }

    /// Series for one region.
    pub fn series(&self, region: usize) -> &[f64] {
        &self.values[region * self.n_months..(region + 1) * self.n_months]
    }

    /// Delays the series by `k` months: the value at `t` becomes the old
    /// value at `t - k`; the first `k` months repeat the first value.
    pub fn delayed(&self, k: usize) -> Self {
        let mut values = self.values.clone();
        for i in 0..self.n_regions {
            for t in 0..self.n_months {
                let src = t.saturating_sub(k);
                values[i * self.n_months + t] = self.values[i * self.n_months + src];
            }
        }
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Aligned inputs for one study.
#[derive(Debug, Clone, PartialEq)]
pub struct Panels {
    pub cases: CasePanel,
    pub population: PopulationPanel,
    pub covariates: Vec<CovariatePanel>,
}

impl Panels {
    pub fn covariate(&self, name: &str) -> Option<&CovariatePanel> {
        self.covariates.iter().find(|c| c.name == name)
    }
}

// ---------------------------------------------------------------------------
// CSV ingest

struct Row {
    line: u64,
    record: csv::StringRecord,
}

fn read_rows<R: Read>(reader: R, file: &str, header: &[&str]) -> Result<Vec<Row>, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let found = rdr
        .headers()
        .map_err(|e| PanelError::Io {
            file: file.into(),
            message: e.to_string(),
        })?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(PanelError::Schema {
            file: file.into(),
            row: 1,
            field: "header".into(),
            message: format!(
                "expected `{}`, found `{}`",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let record = rec.map_err(|e| PanelError::Schema {
            file: file.into(),
            row: e.position().map_or(0, |p| p.line()),
            field: "record".into(),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push(Row { line, record });
    }
    Ok(rows)
}

fn field<T: FromStr>(row: &Row, idx: usize, name: &str, file: &str) -> Result<T, PanelError> {
    let raw = row.record.get(idx).unwrap_or("");
    raw.parse::<T>().map_err(|_| PanelError::Schema {
        file: file.into(),
        row: row.line,
        field: name.into(),
        message: format!("cannot parse `{raw}`"),
    })
}

fn parse_month(row: &Row, file: &str) -> Result<Month, PanelError> {
    let year: i32 = field(row, 1, "year", file)?;
    let month: u8 = field(row, 2, "month", file)?;
    Month::new(year, month).ok_or_else(|| PanelError::Schema {
        file: file.into(),
        row: row.line,
        field: "month".into(),
        message: format!("month {month} outside 1-12"),
    })
}

fn check_contiguous(months: &BTreeSet<Month>, file: &str) -> Result<(), PanelError> {
    let v: Vec<Month> = months.iter().copied().collect();
    for w in v.windows(2) {
        if w[1].ordinal() != w[0].ordinal() + 1 {
            return Err(PanelError::NonContiguous {
                file: file.into(),
                after: w[0],
                next: w[1],
            });
        }
    }
    Ok(())
}

/// Parses a `region,year,month,cases` table.
pub fn read_cases<R: Read>(reader: R, file: &str) -> Result<CasePanel, PanelError> {
    let rows = read_rows(reader, file, &["region", "year", "month", "cases"])?;
    let mut regions: Vec<String> = Vec::new();
    let mut region_pos: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, Month), u64> = HashMap::new();
    let mut months = BTreeSet::new();
    for row in &rows {
        let region: String = field(row, 0, "region", file)?;
        let month = parse_month(row, file)?;
        let count: i64 = field(row, 3, "cases", file)?;
        if count < 0 {
            return Err(PanelError::NegativeCount {
                file: file.into(),
                row: row.line,
                value: count,
            });
        }
        let idx = *region_pos.entry(region.clone()).or_insert_with(|| {
            regions.push(region.clone());
            regions.len() - 1
        });
        if cells.insert((idx, month), count as u64).is_some() {
            return Err(PanelError::Duplicate {
                file: file.into(),
                row: row.line,
                region,
                key: month.to_string(),
            });
        }
        months.insert(month);
    }
    if months.is_empty() {
        return Err(PanelError::Schema {
            file: file.into(),
            row: 1,
            field: "record".into(),
            message: "no data rows".into(),
        });
    }
    check_contiguous(&months, file)?;
    let first = *months.iter().next().unwrap();
    let n_months = months.len();
    let mut counts = Vec::with_capacity(regions.len() * n_months);
    for (i, region) in regions.iter().enumerate() {
        for m in &months {
            match cells.get(&(i, *m)) {
                Some(c) => counts.push(*c),
                None => {
                    return Err(PanelError::MissingCell {
                        file: file.into(),
                        region: region.clone(),
                        key: m.to_string(),
                    })
                }
            }
        }
    }
    CasePanel::new(regions, first, n_months, counts)
}

fn check_region_sets(
    expected: &[String],
    found: &BTreeSet<String>,
    file: &str,
) -> Result<(), PanelError> {
    if let Some(missing) = expected.iter().find(|r| !found.contains(*r)) {
        return Err(PanelError::RegionMismatch {
            file: file.into(),
            region: missing.clone(),
            problem: "is in the case file but missing here".into(),
        });
    }
    if let Some(extra) = found.iter().find(|r| !expected.contains(r)) {
        return Err(PanelError::RegionMismatch {
            file: file.into(),
            region: extra.clone(),
            problem: "is not in the case file".into(),
        });
    }
    Ok(())
}

/// Parses `region,year,population`, aligned to the case panel's regions and
/// required to cover every year the case panel spans.
pub fn read_population<R: Read>(
    reader: R,
    file: &str,
    cases: &CasePanel,
) -> Result<PopulationPanel, PanelError> {
    let rows = read_rows(reader, file, &["region", "year", "population"])?;
    let mut cells: HashMap<(String, i32), f64> = HashMap::new();
    let mut found = BTreeSet::new();
    for row in &rows {
        let region: String = field(row, 0, "region", file)?;
        let year: i32 = field(row, 1, "year", file)?;
        let value: f64 = field(row, 2, "population", file)?;
        if !(value.is_finite() && value > 0.0) {
            return Err(PanelError::NonPositivePopulation {
                file: file.into(),
                row: row.line,
                value,
            });
        }
        if cells.insert((region.clone(), year), value).is_some() {
            return Err(PanelError::Duplicate {
                file: file.into(),
                row: row.line,
                region,
                key: year.to_string(),
            });
        }
        found.insert(region);
    }
    check_region_sets(cases.regions(), &found, file)?;
    let years: BTreeSet<i32> = cells.keys().map(|(_, y)| *y).collect();
    let span = cases.span();
    let first_year = (*years.iter().next().unwrap_or(&span.first.year)).min(span.first.year);
    let last_year = (*years.iter().last().unwrap_or(&span.last.year)).max(span.last.year);
    let n_years = (last_year - first_year + 1) as usize;
    let mut values = Vec::with_capacity(cases.n_regions() * n_years);
    for region in cases.regions() {
        for year in first_year..=last_year {
            match cells.get(&(region.clone(), year)) {
                Some(v) => values.push(*v),
                None if (span.first.year..=span.last.year).contains(&year) => {
                    return Err(PanelError::MissingCell {
                        file: file.into(),
                        region: region.clone(),
                        key: year.to_string(),
                    })
                }
                // Years outside the case span may be absent; they are never read.
                None => values.push(f64::NAN),
            }
        }
    }
    Ok(PopulationPanel {
        regions: cases.regions().to_vec(),
        first_year,
        n_years,
        values,
    })
}

/// Parses one `region,year,month,value` covariate table, restricted to the
/// case panel's months.
pub fn read_covariate<R: Read>(
    reader: R,
    file: &str,
    name: &str,
    cases: &CasePanel,
) -> Result<CovariatePanel, PanelError> {
    let rows = read_rows(reader, file, &["region", "year", "month", "value"])?;
    let mut cells: HashMap<(String, Month), f64> = HashMap::new();
    let mut found = BTreeSet::new();
    let mut months = BTreeSet::new();
    for row in &rows {
        let region: String = field(row, 0, "region", file)?;
        let month = parse_month(row, file)?;
        let value: f64 = field(row, 3, "value", file)?;
        if !value.is_finite() {
            return Err(PanelError::Schema {
                file: file.into(),
                row: row.line,
                field: "value".into(),
                message: format!("non-finite value {value}"),
            });
        }
        if cells.insert((region.clone(), month), value).is_some() {
            return Err(PanelError::Duplicate {
                file: file.into(),
                row: row.line,
                region,
                key: month.to_string(),
            });
        }
        found.insert(region);
        months.insert(month);
    }
    check_region_sets(cases.regions(), &found, file)?;
    check_contiguous(&months, file)?;
    let n_months = cases.n_months();
    let mut values = Vec::with_capacity(cases.n_regions() * n_months);
    for region in cases.regions() {
        for t in 0..n_months {
            let m = cases.month(t);
            match cells.get(&(region.clone(), m)) {
                Some(v) => values.push(*v),
                None => {
                    return Err(PanelError::MissingCell {
                        file: file.into(),
                        region: region.clone(),
                        key: m.to_string(),
                    })
                }
            }
        }
    }
    if is_region_constant(name) {
        for t in 0..n_months {
            let v0 = values[t];
            if (1..cases.n_regions()).any(|i| values[i * n_months + t] != v0) {
                return Err(PanelError::NotRegionConstant {
                    file: file.into(),
                    name: name.into(),
                    month: cases.month(t),
                });
            }
        }
    }
    CovariatePanel::new(name, cases.n_regions(), n_months, values)
}

fn open(path: &Path) -> Result<std::fs::File, PanelError> {
    std::fs::File::open(path).map_err(|e| PanelError::Io {
        file: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads and aligns the case, population and covariate files. Covariate names
/// are the file stems.
pub fn load_and_align(
    case_file: &Path,
    population_file: &Path,
    covariate_files: &[impl AsRef<Path>],
) -> Result<Panels, PanelError> {
    let cases = read_cases(open(case_file)?, &case_file.display().to_string())?;
    let population = read_population(
        open(population_file)?,
        &population_file.display().to_string(),
        &cases,
    )?;
    let mut covariates = Vec::with_capacity(covariate_files.len());
    for path in covariate_files {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| PanelError::Io {
                file: path.display().to_string(),
                message: "covariate file has no usable name".into(),
            })?;
        covariates.push(read_covariate(
            open(path)?,
            &path.display().to_string(),
            name,
            &cases,
        )?);
    }
    Ok(Panels {
        cases,
        population,
        covariates,
    })
}

// ---------------------------------------------------------------------------
// CSV emission

pub fn write_cases<W: Write>(out: W, cases: &CasePanel) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["region", "year", "month", "cases"])?;
    for (i, region) in cases.regions().iter().enumerate() {
        for t in 0..cases.n_months() {
            let m = cases.month(t);
            w.write_record([
                region.clone(),
                m.year.to_string(),
                m.month.to_string(),
                cases.count(i, t).to_string(),
            ])?;
        }
    }
    w.flush()
}

pub fn write_population<W: Write>(out: W, pop: &PopulationPanel) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["region", "year", "population"])?;
    for (i, region) in pop.regions().iter().enumerate() {
        for year in pop.years() {
            if let Some(v) = pop.get(i, year).filter(|v| v.is_finite()) {
                w.write_record([region.clone(), year.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()
}

pub fn write_covariate<W: Write>(
    out: W,
    cases: &CasePanel,
    cov: &CovariatePanel,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["region", "year", "month", "value"])?;
    for (i, region) in cases.regions().iter().enumerate() {
        for t in 0..cases.n_months() {
            let m = cases.month(t);
            w.write_record([
                region.clone(),
                m.year.to_string(),
                m.month.to_string(),
                cov.get(i, t).to_string(),
            ])?;
        }
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// Expected counts and relative risk

/// `E_it = pop_{i,year(t)} * r` with one reference rate `r` over `window`.
pub fn compute_expected_counts(
    cases: &CasePanel,
    pop: &PopulationPanel,
    window: MonthWindow,
) -> Result<ExpectedPanel, PanelError> {
    let (Some(t0), Some(t1)) = (cases.month_index(window.first), cases.month_index(window.last))
    else {
        return Err(PanelError::WindowOutOfRange { window });
    };
    if pop.regions() != cases.regions() {
        return Err(PanelError::ShapeMismatch(
            "population and case panels have different regions".into(),
        ));
    }
    let pop_at = |i: usize, t: usize| -> Result<f64, PanelError> {
        let year = cases.month(t).year;
        pop.get(i, year)
            .filter(|v| v.is_finite() && *v > 0.0)
            .ok_or_else(|| PanelError::MissingCell {
                file: "population".into(),
                region: cases.regions()[i].clone(),
                key: year.to_string(),
            })
    };
    let mut total_cases = 0.0;
    let mut total_pop = 0.0;
    for i in 0..cases.n_regions() {
        for t in t0..=t1 {
            total_cases += cases.count(i, t) as f64;
            total_pop += pop_at(i, t)?;
        }
    }
    if total_cases <= 0.0 {
        return Err(PanelError::ZeroTotalCount { window });
    }
    let rate = total_cases / total_pop;
    let mut values = Vec::with_capacity(cases.n_regions() * cases.n_months());
    for i in 0..cases.n_regions() {
        for t in 0..cases.n_months() {
            values.push(pop_at(i, t)? * rate);
        }
    }
    Ok(ExpectedPanel {
        n_regions: cases.n_regions(),
        n_months: cases.n_months(),
        values,
        rate,
    })
}

pub fn observed_relative_risk(
    cases: &CasePanel,
    expected: &ExpectedPanel,
) -> Result<RiskPanel, PanelError> {
    if cases.n_regions() != expected.n_regions || cases.n_months() != expected.n_months {
        return Err(PanelError::ShapeMismatch(format!(
            "cases {}x{} vs expected {}x{}",
            cases.n_regions(),
            cases.n_months(),
            expected.n_regions,
            expected.n_months
        )));
    }
    let values = cases
        .counts()
        .iter()
        .zip(&expected.values)
        .map(|(y, e)| *y as f64 / e)
        .collect();
    RiskPanel::new(cases.n_regions(), cases.first, cases.n_months(), values)
}

/// Calendar-year blocks of a panel, in order.
pub fn year_index(cases: &CasePanel) -> BTreeMap<i32, usize> {
    cases
        .years()
        .into_iter()
        .enumerate()
        .map(|(k, y)| (y, k))
        .collect()
}
