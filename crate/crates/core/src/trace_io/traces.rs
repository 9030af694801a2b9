//! Line-delimited JSON trace files, format version 1.
//!
//! Line 1 is the header, every following line one record:
//!
//! ```text
//! {"C":3,"L":2,"eos_token":null,"mode":"classification","version":1}
//! {"exits":[[0.100000000,0.800000000,0.100000000],[...]],"id":"s0","label":1}
//! ```
//!
//! Sequence files carry `"mode":"sequence"` and an `eos_token`, and records
//! of the form `{"eos":2,"id":"q0","ref":[1,2]|null,"tokens":[<exits>, ...]}`.
//! The header may also carry a `"split"` tag. Keys are written sorted and
//! probabilities with exactly nine decimals, so saving a loaded canonical
//! file reproduces it byte for byte. Nothing is repaired on load.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::trace::{Dataset, Label, SampleTrace, SequenceTrace, Split, Traces};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classification,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFileHeader {
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(default)]
    pub eos_token: Option<Label>,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub version: u32,
}

impl TraceFileHeader {
    pub fn for_dataset(data: &Dataset) -> Self {
        let (mode, eos_token) = match data.traces() {
            Traces::Classification(_) => (Mode::Classification, None),
            Traces::Sequence { eos_token, .. } => (Mode::Sequence, Some(*eos_token)),
        };
        TraceFileHeader {
            classes: data.classes(),
            layers: data.layers(),
            eos_token,
            mode,
            split: data.split(),
            version: FORMAT_VERSION,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::validation(
                "version",
                format!("unsupported format version {}, expected {FORMAT_VERSION}", self.version),
            ));
        }
        match (self.mode, self.eos_token) {
            (Mode::Sequence, None) => Err(Error::validation(
                "mode-consistency",
                "sequence mode requires eos_token",
            )),
            (Mode::Classification, Some(_)) => Err(Error::validation(
                "mode-consistency",
                "eos_token is only allowed in sequence mode",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: String,
    label: Option<Label>,
    exits: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    id: String,
    eos: Label,
    tokens: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "ref")]
    reference: Option<Vec<Label>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceRecord {
    Sample(SampleTrace),
    Sequence(SequenceTrace),
}

impl TraceRecord {
    pub fn id(&self) -> &str {
        match self {
            TraceRecord::Sample(s) => s.id(),
            TraceRecord::Sequence(s) => s.id(),
        }
    }
}

/// Streaming reader: parses the header eagerly, then yields validated records.
pub struct TraceReader<R> {
    header: TraceFileHeader,
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| parse_err(1, e))?,
            None => return Err(parse_err(1, "missing header line")),
        };
        let header: TraceFileHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
        header.validate().map_err(|e| e.at_line(1))?;
        if header.layers == 0 {
            return Err(Error::validation("layer-count", "header declares zero exits").at_line(1));
        }
        if header.classes < 2 {
            return Err(Error::validation("class-count", "header declares fewer than 2 classes").at_line(1));
        }
        if let Some(eos) = header.eos_token.filter(|&e| e >= header.classes) {
            return Err(Error::validation(
                "eos-range",
                format!("eos token {eos} but only {} classes", header.classes),
            )
            .at_line(1));
        }
        Ok(TraceReader {
            header,
            lines,
            line_no: 1,
        })
    }

    pub fn header(&self) -> &TraceFileHeader {
        &self.header
    }

    fn parse_record(&self, line: &str) -> Result<TraceRecord> {
        let n = self.line_no;
        let value: Value = serde_json::from_str(line).map_err(|e| parse_err(n, e))?;
        let obj = value.as_object().ok_or_else(|| parse_err(n, "record is not a JSON object"))?;
        let (expected, foreign) = match self.header.mode {
            Mode::Classification => ("exits", "tokens"),
            Mode::Sequence => ("tokens", "exits"),
        };
        if obj.contains_key(foreign) && !obj.contains_key(expected) {
            return Err(Error::shape(format!(
                "`{foreign}` record in a {:?} file",
                self.header.mode
            ))
            .at_line(n));
        }
        let record = match self.header.mode {
            Mode::Classification => {
                let raw: RawSample = serde_json::from_value(value).map_err(|e| parse_err(n, e))?;
                self.check_rows(&raw.id, &raw.exits)?;
                TraceRecord::Sample(SampleTrace::new(raw.id, raw.label, raw.exits)?)
            }
            Mode::Sequence => {
                let raw: RawSequence = serde_json::from_value(value).map_err(|e| parse_err(n, e))?;
                let eos = self.header.eos_token.expect("validated header");
                if raw.eos != eos {
                    return Err(Error::shape(format!(
                        "sequence `{}` declares eos {} but the header says {eos}",
                        raw.id, raw.eos
                    )));
                }
                let steps = raw
                    .tokens
                    .into_iter()
                    .enumerate()
                    .map(|(k, rows)| {
                        let step_id = format!("{}#{k}", raw.id);
                        self.check_rows(&step_id, &rows)?;
                        SampleTrace::new(step_id, None, rows)
                    })
                    .collect::<Result<Vec<_>>>()?;
                TraceRecord::Sequence(SequenceTrace::new(raw.id, steps, raw.eos, raw.reference)?)
            }
        };
        Ok(record)
    }

    /// Row counts against the header, before per-vector validation.
    fn check_rows(&self, id: &str, rows: &[Vec<f64>]) -> Result<()> {
        if rows.len() != self.header.layers {
            return Err(Error::validation(
                "layer-count",
                format!("`{id}` has {} exits, header declares {}", rows.len(), self.header.layers),
            ));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != self.header.classes) {
            return Err(Error::validation(
                "class-count",
                format!(
                    "`{id}` exit {} has {} classes, header declares {}",
                    i + 1,
                    r.len(),
                    self.header.classes
                ),
            ));
        }
        Ok(())
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = self.lines.next()?;
        self.line_no += 1;
        let n = self.line_no;
        Some(match line {
            Err(e) => Err(parse_err(n, e)),
            Ok(l) if l.trim().is_empty() => Err(parse_err(n, "empty line")),
            Ok(l) => self.parse_record(&l).map_err(|e| e.at_line(n)),
        })
    }
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Read and validate a whole trace file.
pub fn read_traces<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut rd = TraceReader::new(reader)?;
    let header = rd.header().clone();
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    let mut sequences = Vec::new();
    while let Some(rec) = rd.next() {
        let rec = rec?;
        if !seen.insert(rec.id().to_string()) {
            return Err(Error::validation("unique-id", format!("duplicate trace id `{}`", rec.id()))
                .at_line(rd.line_no));
        }
        match rec {
            TraceRecord::Sample(s) => samples.push(s),
            TraceRecord::Sequence(s) => sequences.push(s),
        }
    }
    match header.mode {
        Mode::Classification => Dataset::classification(header.layers, header.classes, header.split, samples),
        Mode::Sequence => Dataset::sequence(
            header.layers,
            header.classes,
            header.split,
            header.eos_token.expect("validated header"),
            sequences,
        ),
    }
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn write_rows(out: &mut String, rows: &[crate::trace::ExitRecord]) {
    out.push('[');
    for (i, r) in rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, p) in r.probs().as_slice().iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{p:.9}"));
        }
        out.push(']');
    }
    out.push(']');
}

fn json_opt<T: Serialize>(v: &Option<T>) -> String {
    serde_json::to_string(v).expect("serializable")
}

/// Write `data` in canonical form.
pub fn write_traces<W: Write>(data: &Dataset, mut w: W) -> std::io::Result<()> {
    let header = serde_json::to_string(&TraceFileHeader::for_dataset(data)).expect("serializable header");
    writeln!(w, "{header}")?;
    let mut line = String::new();
    match data.traces() {
        Traces::Classification(traces) => {
            for t in traces {
                line.clear();
                line.push_str("{\"exits\":");
                write_rows(&mut line, t.records());
                line.push_str(",\"id\":");
                line.push_str(&serde_json::to_string(t.id()).expect("string"));
                line.push_str(",\"label\":");
                line.push_str(&json_opt(&t.true_label()));
                line.push('}');
                writeln!(w, "{line}")?;
            }
        }
        Traces::Sequence { traces, .. } => {
            for s in traces {
                line.clear();
                line.push_str(&format!("{{\"eos\":{},\"id\":", s.eos_token()));
                line.push_str(&serde_json::to_string(s.id()).expect("string"));
                line.push_str(",\"ref\":");
                line.push_str(&json_opt(&s.reference_tokens()));
                line.push_str(",\"tokens\":[");
                for (k, step) in s.token_traces().iter().enumerate() {
                    if k > 0 {
                        line.push(',');
                    }
                    write_rows(&mut line, step.records());
                }
                line.push_str("]}");
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Write `data` to `path`; on failure no file is left behind.
pub fn save_traces(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_traces(data, w))
}
