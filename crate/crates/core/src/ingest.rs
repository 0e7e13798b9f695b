//! Reading and writing observation and country files, and the preprocessing
//! that turns raw records into a fit-ready dataset: size classification,
//! sampling-error imputation, VR recombination and stochastic errors.
//!
//! Observation files have the columns `country_id, year, nmr, u5mr,
//! series_type, series_id, sampling_sd, births, included`, plus an optional
//! `stochastic_sd`. A year written as an integer means midyear (`1990` is
//! read as 1990.5); any year with a decimal point is taken as is. Reported
//! sampling SDs are on the log-ratio scale.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{nmr_to_ratio, CountryInput, Observation, SeriesType, SizeCategory};
use crate::rng::rng_indexed;
use crate::stats::{logit, quantile, sd};

pub const OBS_COLUMNS: [&str; 9] = [
    "country_id",
    "year",
    "nmr",
    "u5mr",
    "series_type",
    "series_id",
    "sampling_sd",
    "births",
    "included",
];
pub const COUNTRY_COLUMNS: [&str; 6] = [
    "country_id",
    "name",
    "year",
    "u5mr",
    "births",
    "crisis_adjustment",
];
pub const DRAW_COLUMNS: [&str; 4] = ["country_id", "draw_index", "year", "u5mr"];

/// Imputed SD of the log ratio for SVR observations without a reported error.
pub const SVR_SAMPLING_SD: f64 = 0.20;
pub const CV_THRESHOLD: f64 = 0.10;
pub const DEFAULT_N_SIMS: usize = 3000;
const MAX_REDRAW_FACTOR: usize = 100;

fn column_index(headers: &csv::StringRecord, required: &[&str]) -> Result<BTreeMap<String, usize>> {
    let idx: BTreeMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    for c in required {
        if !idx.contains_key(*c) {
            return Err(Error::Data(format!("missing mandatory column '{c}'")));
        }
    }
    Ok(idx)
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    idx: &'a BTreeMap<String, usize>,
}

impl Row<'_> {
    fn get(&self, col: &str) -> &str {
        self.idx
            .get(col)
            .and_then(|i| self.rec.get(*i))
            .map(str::trim)
            .unwrap_or("")
    }

    fn text(&self, col: &str) -> std::result::Result<String, String> {
        let v = self.get(col);
        if v.is_empty() {
            Err(format!("{col} is empty"))
        } else {
            Ok(v.to_string())
        }
    }

    fn num(&self, col: &str) -> std::result::Result<f64, String> {
        let v = self.get(col);
        let x: f64 = v
            .parse()
            .map_err(|_| format!("{col} '{v}' is not a number"))?;
        if !x.is_finite() {
            return Err(format!("{col} '{v}' is not finite"));
        }
        Ok(x)
    }

    fn opt_num(&self, col: &str) -> std::result::Result<Option<f64>, String> {
        if self.get(col).is_empty() {
            Ok(None)
        } else {
            self.num(col).map(Some)
        }
    }
}

/// Decimal year from text: integers mean midyear.
pub fn parse_year(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let t = if s.contains('.') || s.contains('e') || s.contains('E') {
        s.parse::<f64>()
            .map_err(|_| format!("year '{s}' is not a number"))?
    } else {
        s.parse::<i32>()
            .map_err(|_| format!("year '{s}' is not a number"))? as f64
            + 0.5
    };
    if !(1900.0..=2100.0).contains(&t) {
        return Err(format!("year {t} outside [1900, 2100]"));
    }
    Ok(t)
}

fn check_rate(name: &str, x: f64) -> std::result::Result<f64, String> {
    if x > 0.0 && x < 1000.0 {
        Ok(x)
    } else {
        Err(format!("{name} {x} outside (0, 1000)"))
    }
}

fn parse_flag(s: &str) -> std::result::Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(format!("included '{other}' is not 0/1")),
    }
}

fn parse_obs_row(row: &Row) -> std::result::Result<Observation, String> {
    let t = parse_year(row.get("year"))?;
    let nmr = check_rate("nmr", row.num("nmr")?)?;
    let u5mr = check_rate("u5mr", row.num("u5mr")?)?;
    let series_type: SeriesType = row
        .get("series_type")
        .parse()
        .map_err(|e: Error| e.to_string())?;
    let sampling_sd = row.opt_num("sampling_sd")?;
    if let Some(s) = sampling_sd {
        if s < 0.0 {
            return Err(format!("sampling_sd {s} is negative"));
        }
    }
    let stochastic_sd = row.opt_num("stochastic_sd")?;
    let births = row.opt_num("births")?;
    if let Some(b) = births {
        if b <= 0.0 {
            return Err(format!("births {b} must be positive"));
        }
    }
    let mut included = parse_flag(row.get("included"))?;
    let country_id = row.text("country_id")?;
    let log_ratio = if nmr < u5mr {
        nmr_to_ratio(nmr, u5mr).map_err(|e| e.to_string())?.ln()
    } else {
        warn!("{country_id} {t}: nmr {nmr} >= u5mr {u5mr}, observation excluded");
        included = false;
        f64::NAN
    };
    Ok(Observation {
        series_id: row.text("series_id")?,
        country_id,
        t,
        nmr,
        u5mr,
        log_ratio,
        series_type,
        sampling_sd,
        stochastic_sd,
        births,
        included,
    })
}

/// Parse observations. Malformed rows are collected and reported together
/// with their line numbers. Rows with `nmr >= u5mr` are kept but excluded.
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let idx = column_index(rdr.headers()?, &OBS_COLUMNS)?;
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        match parse_obs_row(&Row {
            rec: &rec,
            idx: &idx,
        }) {
            Ok(o) => out.push(o),
            Err(m) => bad.push((line, m)),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::Rows(bad))
    }
}

pub fn load_observations(path: &Path) -> Result<Vec<Observation>> {
    read_observations(File::open(path)?)
}

fn fmt_num(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

/// Write observations with full precision; values read back bit-exactly.
pub fn write_observations<W: Write>(writer: W, obs: &[Observation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = OBS_COLUMNS.to_vec();
    header.push("stochastic_sd");
    w.write_record(&header)?;
    for o in obs {
        w.write_record([
            o.country_id.clone(),
            fmt_num(o.t),
            fmt_num(o.nmr),
            fmt_num(o.u5mr),
            o.series_type.as_str().to_string(),
            o.series_id.clone(),
            fmt_opt(o.sampling_sd),
            fmt_opt(o.births),
            if o.included { "1" } else { "0" }.to_string(),
            fmt_opt(o.stochastic_sd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_observations(path: &Path, obs: &[Observation]) -> Result<()> {
    write_observations(File::create(path)?, obs)
}

/// Parse the country file (one row per country-year). An optional
/// `size_category` column is honoured; otherwise countries start as
/// "other" until classified.
pub fn read_countries<R: Read>(reader: R) -> Result<Vec<CountryInput>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let idx = column_index(rdr.headers()?, &COUNTRY_COLUMNS)?;
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, CountryInput> = BTreeMap::new();
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = Row {
            rec: &rec,
            idx: &idx,
        };
        let parsed = (|| -> std::result::Result<(), String> {
            let id = row.text("country_id")?;
            let year: i32 = row
                .get("year")
                .parse()
                .map_err(|_| format!("year '{}' is not an integer", row.get("year")))?;
            if !(1900..=2100).contains(&year) {
                return Err(format!("year {year} outside [1900, 2100]"));
            }
            let u5mr = row
                .opt_num("u5mr")?
                .map(|u| check_rate("u5mr", u))
                .transpose()?;
            let births = row.opt_num("births")?;
            let crisis = row.opt_num("crisis_adjustment")?;
            let size = match row.get("size_category") {
                "" => None,
                s => Some(s.parse::<SizeCategory>().map_err(|e| e.to_string())?),
            };
            let c = map.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                CountryInput {
                    country_id: id.clone(),
                    name: String::new(),
                    size_category: SizeCategory::Other,
                    u5mr_point: BTreeMap::new(),
                    u5mr_draws: None,
                    births: BTreeMap::new(),
                    crisis_adjustments: BTreeMap::new(),
                }
            });
            if c.name.is_empty() {
                c.name = row.get("name").to_string();
            }
            if let Some(s) = size {
                c.size_category = s;
            }
            if let Some(u) = u5mr {
                c.u5mr_point.insert(year, u);
            }
            if let Some(b) = births {
                c.births.insert(year, b);
            }
            if let Some(a) = crisis {
                if a != 0.0 {
                    c.crisis_adjustments.insert(year, a);
                }
            }
            Ok(())
        })();
        if let Err(m) = parsed {
            bad.push((line, m));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Rows(bad));
    }
    Ok(order
        .into_iter()
        .map(|id| map.remove(&id).unwrap())
        .collect())
}

pub fn load_countries(path: &Path) -> Result<Vec<CountryInput>> {
    read_countries(File::open(path)?)
}

pub fn write_countries<W: Write>(writer: W, countries: &[CountryInput]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = COUNTRY_COLUMNS.to_vec();
    header.push("size_category");
    w.write_record(&header)?;
    for c in countries {
        let mut years: Vec<i32> = c.u5mr_point.keys().copied().collect();
        years.extend(c.births.keys());
        years.extend(c.crisis_adjustments.keys());
        years.sort_unstable();
        years.dedup();
        for y in years {
            w.write_record([
                c.country_id.clone(),
                c.name.clone(),
                y.to_string(),
                fmt_opt(c.u5mr_point.get(&y).copied()),
                fmt_opt(c.births.get(&y).copied()),
                fmt_opt(c.crisis_adjustments.get(&y).copied()),
                c.size_category.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_countries(path: &Path, countries: &[CountryInput]) -> Result<()> {
    write_countries(File::create(path)?, countries)
}

/// Attach U5MR draws (`country_id, draw_index, year, u5mr`). Each draw must
/// cover exactly the years of the country's point series.
pub fn read_u5mr_draws<R: Read>(reader: R, countries: &mut [CountryInput]) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let idx = column_index(rdr.headers()?, &DRAW_COLUMNS)?;
    let mut raw: BTreeMap<String, BTreeMap<usize, BTreeMap<i32, f64>>> = BTreeMap::new();
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row = Row {
            rec: &rec,
            idx: &idx,
        };
        let parsed = (|| -> std::result::Result<(), String> {
            let id = row.text("country_id")?;
            let d: usize = row
                .get("draw_index")
                .parse()
                .map_err(|_| "bad draw_index".to_string())?;
            let y: i32 = row
                .get("year")
                .parse()
                .map_err(|_| "bad year".to_string())?;
            let u = check_rate("u5mr", row.num("u5mr")?)?;
            raw.entry(id)
                .or_default()
                .entry(d)
                .or_default()
                .insert(y, u);
            Ok(())
        })();
        if let Err(m) = parsed {
            bad.push((line, m));
        }
    }
    if !bad.is_empty() {
        return Err(Error::Rows(bad));
    }
    for (id, draws) in raw {
        let c = countries
            .iter_mut()
            .find(|c| c.country_id == id)
            .ok_or_else(|| Error::Data(format!("U5MR draws for unknown country '{id}'")))?;
        let years: Vec<i32> = c.u5mr_point.keys().copied().collect();
        let mut out = Vec::with_capacity(draws.len());
        for (d, series) in draws {
            if series.keys().copied().collect::<Vec<_>>() != years {
                return Err(Error::Data(format!(
                    "U5MR draw {d} of {id} does not cover the point-series years"
                )));
            }
            out.push(series.into_values().collect());
        }
        c.u5mr_draws = Some(out);
    }
    Ok(())
}

pub fn load_u5mr_draws(path: &Path, countries: &mut [CountryInput]) -> Result<()> {
    read_u5mr_draws(File::open(path)?, countries)
}

/// Lowest-quartile boundary of annual births across countries.
pub fn size_boundary(all_births: &[f64]) -> Option<f64> {
    if all_births.is_empty() {
        None
    } else {
        Some(quantile(all_births, 0.25))
    }
}

/// "Small" iff births are at or below the quartile boundary.
pub fn classify_with_boundary(births: f64, boundary: f64) -> SizeCategory {
    if births <= boundary {
        SizeCategory::Small
    } else {
        SizeCategory::Other
    }
}

/// Classify one country from its births series (latest year) against the
/// latest-year births of all countries. `None` when births are missing.
pub fn classify_size(
    country_births: &BTreeMap<i32, f64>,
    all_births: &[f64],
) -> Option<SizeCategory> {
    let latest = country_births.values().next_back()?;
    Some(classify_with_boundary(*latest, size_boundary(all_births)?))
}

/// Classify every country in place; countries without births get `default`.
pub fn classify_sizes(countries: &mut [CountryInput], default: SizeCategory) -> Vec<String> {
    let all: Vec<f64> = countries
        .iter()
        .filter_map(|c| c.births.values().next_back().copied())
        .collect();
    let mut notes = Vec::new();
    for c in countries.iter_mut() {
        match classify_size(&c.births, &all) {
            Some(s) => c.size_category = s,
            None => {
                warn!(
                    "{} has no births; using size category {}",
                    c.country_id,
                    default.as_str()
                );
                notes.push(c.country_id.clone());
                c.size_category = default;
            }
        }
    }
    notes
}

/// Sampling SDs imputed for survey observations without a reported error,
/// by series type and country size.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationTable {
    /// `[survey index][0 = other, 1 = small]`
    values: [[f64; 2]; 4],
}

impl Default for ImputationTable {
    fn default() -> Self {
        // DHS, OtherDHS, MICS, Others
        Self {
            values: [[0.13, 0.26], [0.14, 0.24], [0.16, 0.21], [0.16, 0.22]],
        }
    }
}

fn size_slot(size: SizeCategory) -> usize {
    match size {
        SizeCategory::Other => 0,
        SizeCategory::Small => 1,
    }
}

impl ImputationTable {
    pub fn get(&self, series: SeriesType, size: SizeCategory) -> Result<f64> {
        let j = series.survey_index().ok_or_else(|| {
            Error::Config(format!(
                "no imputed sampling error for series type {series}"
            ))
        })?;
        Ok(self.values[j][size_slot(size)])
    }

    pub fn set(&mut self, series: SeriesType, size: SizeCategory, value: f64) -> Result<()> {
        let j = series.survey_index().ok_or_else(|| {
            Error::Config(format!(
                "no imputed sampling error for series type {series}"
            ))
        })?;
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Config(format!(
                "imputed SD must be positive, got {value}"
            )));
        }
        self.values[j][size_slot(size)] = value;
        Ok(())
    }
}

pub fn impute_sampling_sd(
    series: SeriesType,
    size: SizeCategory,
    table: &ImputationTable,
) -> Result<f64> {
    table.get(series, size)
}

pub fn impute_svr_sd() -> f64 {
    SVR_SAMPLING_SD
}

/// SD of `logit(d_n / d_5)` over `n_sims` simulations of
/// `d_5 ~ Poisson(births q5)`, `d_n ~ Binomial(d_5, p)`. Draws where the
/// logit is undefined are redrawn.
pub fn simulate_stochastic_sd<R: Rng + ?Sized>(
    births: f64,
    q5: f64,
    p: f64,
    n_sims: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(births > 0.0 && q5 > 0.0 && q5 < 1.0 && p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "stochastic error needs births > 0 and q5, p in (0, 1); got births={births}, q5={q5}, p={p}"
        )));
    }
    if n_sims < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_sims must be at least 2, got {n_sims}"
        )));
    }
    let pois = Poisson::new(births * q5).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut ys = Vec::with_capacity(n_sims);
    let mut attempts = 0;
    while ys.len() < n_sims {
        attempts += 1;
        if attempts > MAX_REDRAW_FACTOR * n_sims {
            return Err(Error::InvalidArgument(format!(
                "expected deaths too small for a stochastic error (births={births}, q5={q5}, p={p})"
            )));
        }
        let d5 = pois.sample(rng) as u64;
        if d5 < 2 {
            continue;
        }
        let dn = Binomial::new(d5, p)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(rng);
        if dn == 0 || dn == d5 {
            continue;
        }
        ys.push(logit(dn as f64 / d5 as f64));
    }
    Ok(sd(&ys))
}

/// Stochastic SD for a VR-type observation from its own counts.
pub fn observation_stochastic_sd<R: Rng + ?Sized>(
    obs: &Observation,
    n_sims: usize,
    rng: &mut R,
) -> Result<f64> {
    let births = obs.births.ok_or_else(|| {
        Error::InvalidArgument(format!("{} {} has no births", obs.country_id, obs.t))
    })?;
    simulate_stochastic_sd(births, obs.u5mr / 1000.0, obs.nmr / obs.u5mr, n_sims, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub country_id: String,
    pub series_id: String,
    pub year: f64,
    pub action: String,
    pub detail: String,
}

impl AuditEntry {
    fn new(o: &Observation, action: &str, detail: String) -> Self {
        Self {
            country_id: o.country_id.clone(),
            series_id: o.series_id.clone(),
            year: o.t,
            action: action.to_string(),
            detail,
        }
    }
}

fn merge_pair(a: &Observation, b: &Observation) -> Observation {
    let (ba, bb) = (a.births.unwrap(), b.births.unwrap());
    let births = ba + bb;
    let dn = a.nmr * ba / 1000.0 + b.nmr * bb / 1000.0;
    let d5 = a.u5mr * ba / 1000.0 + b.u5mr * bb / 1000.0;
    let nmr = dn / births * 1000.0;
    let u5mr = d5 / births * 1000.0;
    Observation {
        country_id: b.country_id.clone(),
        t: (a.t * ba + b.t * bb) / births,
        nmr,
        u5mr,
        log_ratio: (nmr / (u5mr - nmr)).ln(),
        series_type: b.series_type,
        series_id: b.series_id.clone(),
        sampling_sd: None,
        stochastic_sd: None,
        births: Some(births),
        included: true,
    }
}

/// Recombine a time-ordered VR series. Starting from the latest record, a
/// record whose stochastic SD (used as its coefficient of variation)
/// exceeds `cv_threshold` absorbs the previous record, pooling deaths and
/// births, until it falls below the threshold or the series is exhausted.
/// Merged records sit at the births-weighted mean year. Records without
/// births pass through unmerged.
pub fn recombine_vr<R: Rng + ?Sized>(
    records: &[Observation],
    cv_threshold: f64,
    n_sims: usize,
    rng: &mut R,
) -> Result<(Vec<Observation>, Vec<AuditEntry>)> {
    let mut audit = Vec::new();
    let mut out: Vec<Observation> = Vec::with_capacity(records.len());
    let mut pending: Vec<Observation> = Vec::new();
    for r in records {
        if r.births.is_some() {
            pending.push(r.clone());
        } else {
            warn!(
                "{} {}: VR record without births passed through unmerged",
                r.country_id, r.t
            );
            audit.push(AuditEntry::new(r, "unmerged", "births missing".into()));
            out.push(r.clone());
        }
    }
    let mut merged_rev = Vec::new();
    while let Some(mut cur) = pending.pop() {
        let mut tau = observation_stochastic_sd(&cur, n_sims, rng)?;
        let mut n_merged = 1;
        while tau > cv_threshold {
            let Some(prev) = pending.pop() else { break };
            cur = merge_pair(&prev, &cur);
            n_merged += 1;
            tau = observation_stochastic_sd(&cur, n_sims, rng)?;
        }
        cur.stochastic_sd = Some(tau);
        if n_merged > 1 {
            audit.push(AuditEntry::new(
                &cur,
                "recombine",
                format!("{n_merged} records pooled; stochastic sd {tau:.4}"),
            ));
        }
        merged_rev.push(cur);
    }
    merged_rev.reverse();
    out.extend(merged_rev);
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok((out, audit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub table: ImputationTable,
    pub cv_threshold: f64,
    pub n_sims: usize,
    pub seed: u64,
    pub default_size: SizeCategory,
    pub recombine: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            table: ImputationTable::default(),
            cv_threshold: CV_THRESHOLD,
            n_sims: DEFAULT_N_SIMS,
            seed: 1,
            default_size: SizeCategory::Other,
            recombine: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub observations: Vec<Observation>,
    pub countries: Vec<CountryInput>,
    pub audit: Vec<AuditEntry>,
}

fn preprocess_country(
    index: u64,
    country: &CountryInput,
    obs: Vec<Observation>,
    config: &PreprocessConfig,
) -> Result<(Vec<Observation>, Vec<AuditEntry>)> {
    let mut rng = rng_indexed(
        config.seed,
        &format!("preprocess/{}", country.country_id),
        index,
    );
    let mut audit = Vec::new();
    let mut out = Vec::new();
    let mut vr: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    for mut o in obs {
        if !o.included {
            out.push(o);
            continue;
        }
        match o.series_type {
            SeriesType::VR => {
                if o.stochastic_sd.is_some() {
                    out.push(o);
                } else if o.births.is_none() {
                    audit.push(AuditEntry::new(
                        &o,
                        "exclude",
                        "VR record without births".into(),
                    ));
                    warn!(
                        "{} {}: VR record without births excluded",
                        o.country_id, o.t
                    );
                    o.included = false;
                    out.push(o);
                } else {
                    vr.entry(o.series_id.clone()).or_default().push(o);
                }
            }
            SeriesType::SVR => {
                let tau = match o.sampling_sd {
                    Some(s) => s,
                    None => {
                        audit.push(AuditEntry::new(
                            &o,
                            "impute_svr",
                            format!("{SVR_SAMPLING_SD}"),
                        ));
                        impute_svr_sd()
                    }
                };
                o.stochastic_sd = Some(tau);
                out.push(o);
            }
            s => {
                if o.sampling_sd.is_none() {
                    let v = impute_sampling_sd(s, country.size_category, &config.table)?;
                    audit.push(AuditEntry::new(
                        &o,
                        "impute_sampling",
                        format!("{v} ({} {})", s, country.size_category.as_str()),
                    ));
                    o.sampling_sd = Some(v);
                }
                out.push(o);
            }
        }
    }
    for (_, mut series) in vr {
        series.sort_by(|a, b| a.t.total_cmp(&b.t));
        if config.recombine {
            match recombine_vr(&series, config.cv_threshold, config.n_sims, &mut rng) {
                Ok((recs, a)) => {
                    audit.extend(a);
                    out.extend(recs);
                }
                Err(e) => return Err(Error::Data(format!("{}: {e}", country.country_id))),
            }
        } else {
            for mut o in series {
                match observation_stochastic_sd(&o, config.n_sims, &mut rng) {
                    Ok(t) => o.stochastic_sd = Some(t),
                    Err(e) => {
                        audit.push(AuditEntry::new(&o, "exclude", e.to_string()));
                        o.included = false;
                    }
                }
                out.push(o);
            }
        }
    }
    out.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then_with(|| a.series_id.cmp(&b.series_id))
    });
    Ok((out, audit))
}

/// Full preprocessing: classify sizes, impute missing errors, recombine VR
/// series and simulate their stochastic errors. Every included observation
/// of the result carries a complete error specification.
pub fn preprocess(
    observations: &[Observation],
    countries: &[CountryInput],
    config: &PreprocessConfig,
) -> Result<Preprocessed> {
    let mut countries = countries.to_vec();
    let missing = classify_sizes(&mut countries, config.default_size);
    let mut audit: Vec<AuditEntry> = missing
        .into_iter()
        .map(|id| AuditEntry {
            country_id: id,
            series_id: String::new(),
            year: f64::NAN,
            action: "size_default".into(),
            detail: config.default_size.as_str().into(),
        })
        .collect();
    let mut by_country: BTreeMap<&str, Vec<Observation>> = BTreeMap::new();
    for o in observations {
        if !countries.iter().any(|c| c.country_id == o.country_id) {
            return Err(Error::Data(format!(
                "observation references unknown country '{}'",
                o.country_id
            )));
        }
        if !o.included && o.log_ratio.is_nan() {
            audit.push(AuditEntry::new(o, "exclude", "nmr >= u5mr".into()));
        }
        by_country
            .entry(o.country_id.as_str())
            .or_default()
            .push(o.clone());
    }
    let jobs: Vec<(u64, &CountryInput, Vec<Observation>)> = countries
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                i as u64,
                c,
                by_country.remove(c.country_id.as_str()).unwrap_or_default(),
            )
        })
        .collect();
    let results: Vec<Result<(Vec<Observation>, Vec<AuditEntry>)>> = jobs
        .into_par_iter()
        .map(|(i, c, obs)| preprocess_country(i, c, obs, config))
        .collect();
    let mut out = Vec::new();
    for r in results {
        let (o, a) = r?;
        out.extend(o);
        audit.extend(a);
    }
    for o in out.iter().filter(|o| o.included) {
        o.own_variance()?;
    }
    Ok(Preprocessed {
        observations: out,
        countries,
        audit,
    })
}

pub fn write_audit<W: Write>(writer: W, audit: &[AuditEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["country_id", "series_id", "year", "action", "detail"])?;
    for a in audit {
        let year = if a.year.is_nan() {
            String::new()
        } else {
            fmt_num(a.year)
        };
        w.write_record([&a.country_id, &a.series_id, &year, &a.action, &a.detail])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> crate::rng::Rng {
        crate::rng::Rng::seed_from_u64(seed)
    }

    #[test]
    fn year_convention() {
        assert_eq!(parse_year("1990").unwrap(), 1990.5);
        assert_eq!(parse_year("1990.0").unwrap(), 1990.0);
        assert_eq!(parse_year("2003.25").unwrap(), 2003.25);
        assert!(parse_year("1850").is_err());
    }

    #[test]
    fn table_lookup_rejects_registration() {
        let t = ImputationTable::default();
        assert!(matches!(
            t.get(SeriesType::VR, SizeCategory::Small),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn quartile_boundary_inclusive() {
        assert_eq!(
            classify_with_boundary(25_000.0, 25_000.0),
            SizeCategory::Small
        );
        assert_eq!(
            classify_with_boundary(25_000.1, 25_000.0),
            SizeCategory::Other
        );
    }

    #[test]
    fn stochastic_sd_rejects_bad_inputs() {
        let mut r = rng(1);
        assert!(simulate_stochastic_sd(0.0, 0.05, 0.5, 100, &mut r).is_err());
        assert!(simulate_stochastic_sd(1e5, 1.0, 0.5, 100, &mut r).is_err());
        assert!(simulate_stochastic_sd(1e5, 0.05, 0.0, 100, &mut r).is_err());
        assert!(simulate_stochastic_sd(0.5, 0.01, 0.5, 100, &mut r).is_err());
    }
}
