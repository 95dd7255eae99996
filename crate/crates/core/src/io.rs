//! Reading and writing the long-format CSV files.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::CountsPanel;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn check_header(rdr: &mut csv::Reader<impl std::io::Read>, what: &str, expected: &[&str]) -> Result<()> {
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != expected {
        return Err(Error::input(format!(
            "{what} header must be '{}', got '{}'",
            expected.join(","),
            headers.join(",")
        )));
    }
    Ok(())
}

fn reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

/// Rows of `(area_id, year, value)` with the 1-based file line of each.
fn read_long<R: std::io::Read>(r: R, what: &str, value: &str) -> Result<Vec<(usize, String, i32, String)>> {
    let mut rdr = reader(r);
    check_header(&mut rdr, what, &["area_id", "year", value])?;
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::input(format!("{what} row {line}: {e}")))?;
        if rec.len() != 3 {
            return Err(Error::input(format!("{what} row {line}: expected 3 fields, got {}", rec.len())));
        }
        let year = rec[1]
            .parse::<i32>()
            .map_err(|_| Error::input(format!("{what} row {line}: invalid year '{}'", &rec[1])))?;
        rows.push((line, rec[0].to_string(), year, rec[2].to_string()));
    }
    Ok(rows)
}

/// Builds a panel from `area_id,year,count` and `area_id,year,population`
/// readers. Empty or `NA` counts are missing. Areas keep their order of
/// first appearance in the counts; years are sorted.
pub fn parse_panel<R1: std::io::Read, R2: std::io::Read>(counts: R1, population: R2) -> Result<CountsPanel> {
    let count_rows = read_long(counts, "counts", "count")?;
    let pop_rows = read_long(population, "population", "population")?;
    let mut areas: Vec<String> = Vec::new();
    let mut area_index: HashMap<String, usize> = HashMap::new();
    let mut years: Vec<i32> = Vec::new();
    for (_, a, y, _) in &count_rows {
        if !area_index.contains_key(a) {
            area_index.insert(a.clone(), areas.len());
            areas.push(a.clone());
        }
        years.push(*y);
    }
    years.sort_unstable();
    years.dedup();
    let year_index: HashMap<i32, usize> = years.iter().enumerate().map(|(k, &y)| (y, k)).collect();
    let s = areas.len();
    let n = s * years.len();

    let mut counts: Vec<Option<Option<u64>>> = vec![None; n];
    for (line, a, y, v) in &count_rows {
        let c = year_index[y] * s + area_index[a];
        if counts[c].is_some() {
            return Err(Error::input(format!("counts row {line}: duplicate entry for area '{a}' in {y}")));
        }
        let value = if v.is_empty() || v.eq_ignore_ascii_case("NA") {
            None
        } else {
            Some(
                v.parse::<u64>()
                    .map_err(|_| Error::input(format!("counts row {line}: invalid count '{v}'")))?,
            )
        };
        counts[c] = Some(value);
    }
    if let Some(c) = counts.iter().position(Option::is_none) {
        return Err(Error::input(format!(
            "counts file has no row for area '{}' in {}",
            areas[c % s],
            years[c / s]
        )));
    }

    let mut population: Vec<Option<f64>> = vec![None; n];
    for (line, a, y, v) in &pop_rows {
        let (Some(&i), Some(&t)) = (area_index.get(a), year_index.get(y)) else {
            return Err(Error::input(format!(
                "population row {line}: area '{a}' in {y} does not appear in the counts"
            )));
        };
        let c = t * s + i;
        if population[c].is_some() {
            return Err(Error::input(format!("population row {line}: duplicate entry for area '{a}' in {y}")));
        }
        let p = v
            .parse::<f64>()
            .map_err(|_| Error::input(format!("population row {line}: invalid population '{v}'")))?;
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::input(format!("population row {line}: population must be positive, got {v}")));
        }
        population[c] = Some(p);
    }
    if let Some(c) = population.iter().position(Option::is_none) {
        return Err(Error::input(format!(
            "population file has no row for area '{}' in {}",
            areas[c % s],
            years[c / s]
        )));
    }
    let counts: Vec<Option<u64>> = counts.into_iter().map(Option::unwrap).collect();
    let suppressed = counts.iter().any(Option::is_none);
    let mut panel = CountsPanel::new(areas, years, counts, population.into_iter().map(Option::unwrap).collect())?;
    panel.suppressed = suppressed;
    Ok(panel)
}

pub fn load_panel(counts: &Path, population: &Path) -> Result<CountsPanel> {
    parse_panel(open(counts)?, open(population)?)
}

/// Counts in the input format, missing cells written as `NA`.
pub fn counts_csv(panel: &CountsPanel) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "year", "count"])?;
    for t in 0..panel.n_years() {
        for i in 0..panel.n_areas() {
            let v = panel.count(i, t).map_or_else(|| "NA".to_string(), |y| y.to_string());
            w.write_record([panel.area_ids[i].as_str(), &panel.years[t].to_string(), &v])?;
        }
    }
    finish(w)
}

pub fn population_csv(panel: &CountsPanel) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["area_id", "year", "population"])?;
    for t in 0..panel.n_years() {
        for i in 0..panel.n_areas() {
            let p = panel.population[panel.cell(i, t)];
            w.write_record([panel.area_ids[i].as_str(), &panel.years[t].to_string(), &p.to_string()])?;
        }
    }
    finish(w)
}

/// Serializes accumulated CSV records.
pub fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(format!("csv output: {e}")))
}

/// Formats an optional number, empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Two-column `from,to` mapping such as the subdomain merge map.
pub fn parse_pairs<R: std::io::Read>(r: R, what: &str, header: [&str; 2]) -> Result<BTreeMap<String, String>> {
    let mut rdr = reader(r);
    check_header(&mut rdr, what, &header)?;
    let mut out = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::input(format!("{what} row {line}: {e}")))?;
        if rec.len() != 2 {
            return Err(Error::input(format!("{what} row {line}: expected 2 fields, got {}", rec.len())));
        }
        if out.insert(rec[0].to_string(), rec[1].to_string()).is_some() {
            return Err(Error::input(format!("{what} row {line}: duplicate key '{}'", &rec[0])));
        }
    }
    Ok(out)
}

pub fn read_pairs(path: &Path, what: &str, header: [&str; 2]) -> Result<BTreeMap<String, String>> {
    parse_pairs(open(path)?, what, header)
}

pub const MERGE_MAP_HEADER: [&str; 2] = ["from_label", "to_label"];
pub const LABELS_HEADER: [&str; 2] = ["area_id", "label"];
