//! Line-delimited JSON record files.
//!
//! The first line is a [`Header`]; every following line is one [`Record`],
//! tagged by its `type` field.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{DenseCapGroundTruth, DenseCapPrediction, Detection, GroundingPrediction, GtObject};
use crate::synthpipe::{DatasetStats, RejectedPair, Scene, SynthPair};

pub const FORMAT: &str = "vlscene-records";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("unsupported record format `{format}` version {version}")]
    Unsupported { format: String, version: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub aux_dim: usize,
    pub class_names: Vec<String>,
}

impl Header {
    pub fn new(aux_dim: usize, class_names: Vec<String>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            aux_dim,
            class_names,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Scene(Scene),
    SynthPair(SynthPair),
    Rejected(RejectedPair),
    Stats(DatasetStats),
    GroundingPrediction(GroundingPrediction),
    DensecapPrediction(DenseCapPrediction),
    DensecapGt(DenseCapGroundTruth),
    Detection(Detection),
    GtObject(GtObject),
}

pub fn write_records(mut w: impl Write, header: &Header, records: &[Record]) -> Result<(), RecordError> {
    let line = serde_json::to_string(header).map_err(|e| RecordError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    writeln!(w, "{line}")?;
    for (i, r) in records.iter().enumerate() {
        let line = serde_json::to_string(r).map_err(|e| RecordError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<(Header, Vec<Record>), RecordError> {
    let mut lines = r.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(RecordError::MissingHeader),
            Some((_, Ok(l))) if l.trim().is_empty() => continue,
            Some((i, Ok(l))) => {
                break serde_json::from_str(&l).map_err(|e| RecordError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?
            }
            Some((_, Err(e))) => return Err(e.into()),
        }
    };
    if header.format != FORMAT || header.version != VERSION {
        return Err(RecordError::Unsupported {
            format: header.format,
            version: header.version,
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok((header, records))
}

pub fn save(path: &Path, header: &Header, records: &[Record]) -> Result<(), RecordError> {
    let mut buf = Vec::new();
    write_records(&mut buf, header, records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Header, Vec<Record>), RecordError> {
    let file = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;

    #[test]
    fn round_trip_and_bad_header() {
        let b = Aabb::new([0.0; 3], [1.0, 2.0, 0.5]).unwrap();
        let recs = vec![
            Record::GroundingPrediction(GroundingPrediction {
                query_id: "q0".into(),
                scene_id: "s".into(),
                pred_box: b,
                gt_box: b,
                gt_class: 2,
            }),
            Record::Stats(DatasetStats::default()),
        ];
        let header = Header::new(9, vec!["chair".into()]);
        let mut buf = Vec::new();
        write_records(&mut buf, &header, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with(r#"{"type":"grounding_prediction""#));
        let (h, back) = read_records(buf.as_slice()).unwrap();
        assert_eq!((h, back), (header, recs));
        let bad = br#"{"format":"other","version":1,"aux_dim":0,"class_names":[]}"#;
        assert!(matches!(read_records(&bad[..]), Err(RecordError::Unsupported { .. })));
        assert!(matches!(read_records(&b""[..]), Err(RecordError::MissingHeader)));
        let broken = format!("{}\n{{\"type\":\"nope\"}}\n", text.lines().next().unwrap());
        assert!(matches!(read_records(broken.as_bytes()), Err(RecordError::Parse { line: 2, .. })));
    }
}
