//! Blinded human-grading sheets: export for annotators and ingestion of the
//! completed sheets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::taxonomy::TargetFunction;

pub const ASPECTS: [&str; 4] = ["Fluency", "Relevance", "Informativeness", "Accuracy"];
pub const SHEET_HEADER: [&str; 9] =
    ["row_id", "query", "target_sf", "system", "response", "Fluency", "Relevance", "Informativeness", "Accuracy"];
pub const KEY_HEADER: [&str; 2] = ["row_id", "system"];
pub const MAX_GRADE: u8 = 5;
pub const DEFAULT_SAMPLE: usize = 200;

/// A test query with the response function it should receive.
#[derive(Debug, Clone, PartialEq)]
pub struct GradingItem {
    pub query: String,
    pub target: TargetFunction,
}

/// One system's top-1 response for every item, in item order.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemOutputs {
    pub name: String,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SheetRow {
    pub row_id: usize,
    pub query: String,
    pub target_sf: String,
    /// Blinded system tag, only meaningful within the row's query.
    pub system: String,
    pub response: String,
}

/// Rows for annotators plus the key mapping rows back to systems.
#[derive(Debug, Clone, PartialEq)]
pub struct GradingSheet {
    pub rows: Vec<SheetRow>,
    pub key: BTreeMap<usize, String>,
}

fn blind_tag(i: usize) -> String {
    let mut s = String::new();
    let mut n = i;
    loop {
        s.insert(0, char::from(b'A' + (n % 26) as u8));
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s
}

/// Samples up to `sample` items, emits one row per item and system with the
/// system order shuffled per item, then shuffles the rows.
pub fn export_grading_sheet(
    items: &[GradingItem],
    systems: &[SystemOutputs],
    sample: usize,
    seed: u64,
) -> Result<GradingSheet, HarnessError> {
    if systems.is_empty() {
        return Err(HarnessError::NoSystems);
    }
    if let Some(s) = systems.iter().find(|s| s.responses.len() != items.len()) {
        return Err(HarnessError::CoverageMismatch {
            system: s.name.clone(),
            expected: items.len(),
            found: s.responses.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = (0..items.len()).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(sample);
    chosen.sort_unstable();

    let mut rows = Vec::with_capacity(chosen.len() * systems.len());
    for &i in &chosen {
        let mut order: Vec<usize> = (0..systems.len()).collect();
        order.shuffle(&mut rng);
        for (tag, &s) in order.iter().enumerate() {
            rows.push((
                s,
                SheetRow {
                    row_id: 0,
                    query: items[i].query.clone(),
                    target_sf: items[i].target.to_string(),
                    system: blind_tag(tag),
                    response: systems[s].responses[i].clone(),
                },
            ));
        }
    }
    rows.shuffle(&mut rng);
    let mut key = BTreeMap::new();
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(id, (s, mut row))| {
            row.row_id = id + 1;
            key.insert(id + 1, systems[s].name.clone());
            row
        })
        .collect();
    Ok(GradingSheet { rows, key })
}

impl GradingSheet {
    /// Sheet CSV with empty grade columns.
    pub fn write_sheet<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SHEET_HEADER)?;
        for r in &self.rows {
            let id = r.row_id.to_string();
            w.write_record([id.as_str(), &r.query, &r.target_sf, &r.system, &r.response, "", "", "", ""])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_key<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(KEY_HEADER)?;
        for (id, system) in &self.key {
            w.write_record([id.to_string().as_str(), system])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, sheet: &Path, key: &Path) -> Result<(), HarnessError> {
        self.write_sheet(File::create(sheet)?)?;
        self.write_key(File::create(key)?)
    }
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), HarnessError> {
    if !found.iter().eq(expected.iter().copied()) {
        return Err(HarnessError::Sheet(format!("header must be `{}`", expected.join(","))));
    }
    Ok(())
}

pub fn read_key<R: Read>(input: R) -> Result<BTreeMap<usize, String>, HarnessError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = r.records();
    let header = records.next().ok_or_else(|| HarnessError::Sheet("empty key file".into()))??;
    check_header(&header, &KEY_HEADER)?;
    let mut key = BTreeMap::new();
    for rec in records {
        let rec = rec?;
        let id = rec[0].parse().map_err(|_| HarnessError::Sheet(format!("bad row id `{}` in key", &rec[0])))?;
        key.insert(id, rec[1].to_string());
    }
    Ok(key)
}

/// Normalised mean grade per system and aspect, in [`ASPECTS`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeScores {
    pub systems: BTreeMap<String, [f64; 4]>,
}

impl fmt::Display for GradeScores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<16}", "system")?;
        for a in ASPECTS {
            write!(f, " {a:>15}")?;
        }
        writeln!(f)?;
        for (name, s) in &self.systems {
            write!(f, "{name:<16}")?;
            for v in s {
                write!(f, " {v:>15.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Reads one completed sheet. Every grade must be an integer in 0..=5;
/// rows with blank grades are reported together.
pub fn ingest_grading_sheet<R: Read>(input: R, key: &BTreeMap<usize, String>) -> Result<GradeScores, HarnessError> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = r.records();
    let header = records.next().ok_or_else(|| HarnessError::Sheet("empty sheet".into()))??;
    check_header(&header, &SHEET_HEADER)?;
    let mut sums: BTreeMap<String, ([u64; 4], u64)> = BTreeMap::new();
    let mut missing = Vec::new();
    for rec in records {
        let rec = rec?;
        let row: usize = rec[0].parse().map_err(|_| HarnessError::Sheet(format!("bad row id `{}`", &rec[0])))?;
        let mut grades = [0u64; 4];
        let mut blank = false;
        for (a, aspect) in ASPECTS.iter().enumerate() {
            let cell = rec[5 + a].trim();
            if cell.is_empty() {
                blank = true;
                continue;
            }
            match cell.parse::<u8>() {
                Ok(g) if g <= MAX_GRADE => grades[a] = u64::from(g),
                _ => {
                    return Err(HarnessError::InvalidGrade { row, aspect: aspect.to_string(), value: cell.to_string() })
                }
            }
        }
        if blank {
            missing.push(row);
            continue;
        }
        let system = key.get(&row).ok_or_else(|| HarnessError::Sheet(format!("row {row} is not in the key")))?;
        let e = sums.entry(system.clone()).or_default();
        e.0.iter_mut().zip(grades).for_each(|(s, g)| *s += g);
        e.1 += 1;
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingGrades(missing));
    }
    let systems = sums
        .into_iter()
        .map(|(name, (s, n))| (name, s.map(|v| v as f64 / n as f64 / f64::from(MAX_GRADE))))
        .collect();
    Ok(GradeScores { systems })
}

/// Averages the per-annotator scores of several sheets sharing one key.
pub fn ingest_grading_sheets(sheets: &[&Path], key: &Path) -> Result<GradeScores, HarnessError> {
    let key = read_key(File::open(key)?)?;
    let mut all = Vec::with_capacity(sheets.len());
    for p in sheets {
        all.push(ingest_grading_sheet(File::open(p)?, &key)?);
    }
    average_scores(&all)
}

pub fn average_scores(scores: &[GradeScores]) -> Result<GradeScores, HarnessError> {
    let first = scores.first().ok_or(HarnessError::EmptyInput)?;
    let mut systems = BTreeMap::new();
    for name in first.systems.keys() {
        let mut acc = [0.0; 4];
        for s in scores {
            let v = s.systems.get(name).ok_or_else(|| HarnessError::Sheet(format!("system {name} missing from a sheet")))?;
            acc.iter_mut().zip(v).for_each(|(a, v)| *a += v);
        }
        systems.insert(name.clone(), acc.map(|a| a / scores.len() as f64));
    }
    Ok(GradeScores { systems })
}
