//! Marker CSV files: `case_id,x,y,z,marker_id,tag`, with `x,y,z` the
//! 0-based indices along volume axes 0, 1, 2 and `z` blank for 2D.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flim::{MarkerSet, Tag};

pub const MARKER_HEADER: [&str; 6] = ["case_id", "x", "y", "z", "marker_id", "tag"];

fn malformed(line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        line,
        message: message.into(),
    }
}

fn parse_index(field: &str, name: &str, line: usize) -> Result<usize> {
    field.trim().parse().map_err(|_| {
        malformed(
            line,
            format!("{name} {field:?} is not a non-negative integer"),
        )
    })
}

/// Parses marker rows, grouping them by case in order of first appearance.
/// Line numbers in errors are 1-based and count the header.
pub fn parse_markers_csv(text: &str) -> Result<Vec<MarkerSet>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if headers.iter().ne(MARKER_HEADER.iter().copied()) {
        return Err(malformed(
            1,
            format!(
                "expected header {:?}, found {:?}",
                MARKER_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut sets: Vec<MarkerSet> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let case = &record[0];
        if case.is_empty() {
            return Err(malformed(line, "empty case_id"));
        }
        let mut coord = vec![
            parse_index(&record[1], "x", line)?,
            parse_index(&record[2], "y", line)?,
        ];
        if !record[3].is_empty() {
            coord.push(parse_index(&record[3], "z", line)?);
        }
        let marker_id: u32 = record[4].parse().map_err(|_| {
            malformed(
                line,
                format!("marker_id {:?} is not an integer", &record[4]),
            )
        })?;
        if marker_id == 0 {
            return Err(malformed(line, "marker ids start at 1"));
        }
        let tag: Tag = record[5]
            .parse()
            .map_err(|e: Error| malformed(line, e.to_string()))?;
        let idx = match sets.iter().position(|s| s.image_id == case) {
            Some(i) => i,
            None => {
                sets.push(MarkerSet::new(case));
                sets.len() - 1
            }
        };
        if let Some(first) = sets[idx].entries.first() {
            if first.coord.len() != coord.len() {
                return Err(malformed(
                    line,
                    "mixes 2D and 3D coordinates within one case",
                ));
            }
        }
        sets[idx].push(coord, marker_id, tag);
    }
    Ok(sets)
}

/// Rows for one marker set, checking coordinates against `dims` and
/// reporting the failing CSV line.
pub fn parse_case_markers(text: &str, case_id: &str, dims: &[usize]) -> Result<MarkerSet> {
    let mut sets = parse_markers_csv(text)?;
    if let Some(other) = sets.iter().find(|s| s.image_id != case_id) {
        return Err(malformed(
            0,
            format!(
                "rows for case {:?} in a body for {case_id:?}",
                other.image_id
            ),
        ));
    }
    let set = sets.pop().unwrap_or_else(|| MarkerSet::new(case_id));
    set.validate(dims).map_err(|e| match e {
        // Entry index to CSV line: header is line 1.
        Error::Malformed { line, message } => malformed(line + 2, message),
        other => other,
    })?;
    Ok(set)
}

pub fn markers_to_csv(sets: &[MarkerSet]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MARKER_HEADER).expect("in-memory write");
    for set in sets {
        for e in &set.entries {
            let z = e.coord.get(2).map(|z| z.to_string()).unwrap_or_default();
            w.write_record([
                set.image_id.clone(),
                e.coord[0].to_string(),
                e.coord[1].to_string(),
                z,
                e.marker_id.to_string(),
                e.tag.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn read_markers(path: &Path) -> Result<Vec<MarkerSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_markers_csv(&text)
}

pub fn write_markers(sets: &[MarkerSet], path: &Path) -> Result<()> {
    fs::write(path, markers_to_csv(sets)).map_err(|e| Error::io(path, e))
}
