use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{RegionId, RegionSet};
use crate::staging::Stage;

/// One reference-standard row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub patient_id: String,
    pub involved: RegionSet,
    pub extranodal: bool,
    pub stage: Stage,
}

/// Reference table keyed by patient id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceTable {
    pub rows: BTreeMap<String, ReferenceRow>,
}

pub fn reference_header() -> Vec<String> {
    let mut h = vec!["patient_id".to_string()];
    h.extend((1..=21).map(|i| format!("region_{i}")));
    h.push("extranodal".into());
    h.push("stage".into());
    h
}

fn flag(value: &str, column: &str, line: u64) -> Result<bool> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Reference(format!("line {line}: column {column} must be 0 or 1, got {other:?}"))),
    }
}

impl ReferenceTable {
    /// Parses the CSV form. Region columns follow the fixed region order;
    /// stage is 1-4, or 0 for no involvement.
    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != reference_header() {
            return Err(Error::Reference(format!(
                "expected header `{}`, got `{}`",
                reference_header().join(","),
                header.join(",")
            )));
        }
        let mut rows = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let id = rec[0].to_string();
            if id.is_empty() {
                return Err(Error::Reference(format!("line {line}: empty patient_id")));
            }
            let mut involved = RegionSet::new();
            for r in RegionId::ALL {
                let col = r.index() + 1;
                if flag(&rec[col], &header[col], line)? {
                    involved.insert(r);
                }
            }
            let extranodal = flag(&rec[22], "extranodal", line)?;
            let stage = match rec[23].parse::<u8>().ok().and_then(Stage::from_number) {
                Some(s) => s,
                None => {
                    return Err(Error::Reference(format!(
                        "line {line}: stage must be 0-4, got {:?}",
                        &rec[23]
                    )))
                }
            };
            let row = ReferenceRow {
                patient_id: id.clone(),
                involved,
                extranodal,
                stage,
            };
            if rows.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicatePatient(id));
            }
        }
        Ok(ReferenceTable { rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_reader(f)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(reference_header())?;
        for row in self.rows.values() {
            let mut rec = vec![row.patient_id.clone()];
            rec.extend(RegionId::ALL.iter().map(|&r| u8::from(row.involved.contains(r)).to_string()));
            rec.push(u8::from(row.extranodal).to_string());
            rec.push(row.stage.number().to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Reference(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
