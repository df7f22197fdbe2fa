//! Input/output trajectories, train/validation/test splitting and the
//! dataset CSV format.
//!
//! CSV layout, one row per sample:
//!
//! ```text
//! k,segment,split,u1,...,uq,y[,z]
//! ```
//!
//! `k` is the 1-based global sample index, `segment` the 0-based segment
//! index, `split` one of `train`, `validation`, `test`, `none`, and `z` the
//! 1-based true mode when ground truth is exported.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    None,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::None => "none",
        })
    }
}

impl FromStr for Split {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "none" => Ok(Split::None),
            other => Err(DatasetError::Malformed(format!("unknown split tag {other:?}"))),
        }
    }
}

/// A run of consecutive samples.
///
/// `inputs` is row-major with `input_dim` entries per sample. Modes are
/// 0-based in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub split: Split,
    /// 0-based global index of the first sample.
    pub start: usize,
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    pub outputs: Vec<f64>,
    pub modes: Option<Vec<usize>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.input_dim..(k + 1) * self.input_dim]
    }

    fn slice(&self, range: std::ops::Range<usize>, split: Split) -> Segment {
        let q = self.input_dim;
        Segment {
            split,
            start: self.start + range.start,
            inputs: self.inputs[range.start * q..range.end * q].to_vec(),
            input_dim: q,
            outputs: self.outputs[range.clone()].to_vec(),
            modes: self.modes.as_ref().map(|m| m[range].to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryDataset {
    pub segments: Vec<Segment>,
}

impl TrajectoryDataset {
    pub fn total_len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.segments.first().map(|s| s.input_dim)
    }

    pub fn has_modes(&self) -> bool {
        !self.segments.is_empty() && self.segments.iter().all(|s| s.modes.is_some())
    }

    pub fn segments_in(&self, split: Split) -> impl Iterator<Item = &Segment> + '_ {
        self.segments.iter().filter(move |s| s.split == split)
    }

    pub fn count_in(&self, split: Split) -> usize {
        self.segments_in(split).map(Segment::len).sum()
    }

    /// True when some training segment is shorter than its siblings.
    pub fn has_short_batch(&self) -> bool {
        let lens: Vec<usize> = self.segments_in(Split::Train).map(Segment::len).collect();
        lens.first().is_some_and(|&l0| lens.iter().any(|&l| l != l0))
    }

    /// Joins consecutive segments back into one run.
    pub fn concatenated(&self) -> Result<Segment, DatasetError> {
        let first = self
            .segments
            .first()
            .ok_or_else(|| DatasetError::Malformed("empty dataset".into()))?;
        let mut out = Segment {
            split: Split::None,
            start: first.start,
            inputs: Vec::new(),
            input_dim: first.input_dim,
            outputs: Vec::new(),
            modes: first.modes.as_ref().map(|_| Vec::new()),
        };
        for seg in &self.segments {
            if seg.start != out.start + out.len() {
                return Err(DatasetError::Malformed(format!(
                    "segment starting at k={} does not continue the previous one",
                    seg.start + 1
                )));
            }
            if seg.input_dim != out.input_dim {
                return Err(DatasetError::Malformed("inconsistent input dimension".into()));
            }
            out.inputs.extend_from_slice(&seg.inputs);
            out.outputs.extend_from_slice(&seg.outputs);
            match (&mut out.modes, &seg.modes) {
                (Some(m), Some(s)) => m.extend_from_slice(s),
                (None, None) => {}
                _ => return Err(DatasetError::Malformed("mode labels on some segments only".into())),
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, writer: W, include_modes: bool) -> Result<(), DatasetError> {
        let q = self.input_dim().unwrap_or(1);
        let include_modes = include_modes && self.has_modes();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["k".to_string(), "segment".into(), "split".into()];
        header.extend((1..=q).map(|i| format!("u{i}")));
        header.push("y".into());
        if include_modes {
            header.push("z".into());
        }
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for (si, seg) in self.segments.iter().enumerate() {
            for k in 0..seg.len() {
                rec.clear();
                rec.push((seg.start + k + 1).to_string());
                rec.push(si.to_string());
                rec.push(seg.split.to_string());
                rec.extend(seg.input(k).iter().map(|&u| fmt_f64(u)));
                rec.push(fmt_f64(seg.outputs[k]));
                if include_modes {
                    let z = seg.modes.as_ref().expect("checked above")[k];
                    rec.push((z + 1).to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DatasetError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 5 || cols[0] != "k" || cols[1] != "segment" || cols[2] != "split" {
            return Err(DatasetError::Malformed(
                "expected header k,segment,split,u1..uq,y[,z]".into(),
            ));
        }
        let has_z = cols.last() == Some(&"z");
        let y_col = if has_z { cols.len() - 2 } else { cols.len() - 1 };
        if cols[y_col] != "y" {
            return Err(DatasetError::Malformed("missing y column".into()));
        }
        let q = y_col - 3;
        if q == 0 {
            return Err(DatasetError::Malformed("no input columns".into()));
        }
        for (i, c) in cols[3..y_col].iter().enumerate() {
            if *c != format!("u{}", i + 1) {
                return Err(DatasetError::Malformed(format!("unexpected column {c:?}")));
            }
        }

        let mut segments: Vec<Segment> = Vec::new();
        let mut current: Option<usize> = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| DatasetError::Malformed(format!("row {}: bad {what}", line + 2));
            let k: usize = rec[0].parse().map_err(|_| bad("k"))?;
            if k == 0 {
                return Err(bad("k (indices are 1-based)"));
            }
            let seg_id: usize = rec[1].parse().map_err(|_| bad("segment"))?;
            let split: Split = rec[2].parse()?;
            let mut u = Vec::with_capacity(q);
            for c in 3..y_col {
                u.push(parse_f64(&rec[c]).ok_or_else(|| bad("input"))?);
            }
            let y = parse_f64(&rec[y_col]).ok_or_else(|| bad("y"))?;
            let z = if has_z {
                let z: usize = rec[y_col + 1].parse().map_err(|_| bad("z"))?;
                if z == 0 {
                    return Err(bad("z (modes are 1-based)"));
                }
                Some(z - 1)
            } else {
                None
            };

            if current != Some(seg_id) {
                if seg_id != segments.len() {
                    return Err(bad("segment id (segments must appear in order 0,1,2,...)"));
                }
                segments.push(Segment {
                    split,
                    start: k - 1,
                    inputs: Vec::new(),
                    input_dim: q,
                    outputs: Vec::new(),
                    modes: has_z.then(Vec::new),
                });
                current = Some(seg_id);
            }
            let seg = segments.last_mut().expect("pushed above");
            if seg.split != split {
                return Err(bad("split (changes inside a segment)"));
            }
            if k - 1 != seg.start + seg.len() {
                return Err(bad("k (indices within a segment must be consecutive)"));
            }
            seg.inputs.extend(u);
            seg.outputs.push(y);
            if let (Some(m), Some(z)) = (seg.modes.as_mut(), z) {
                m.push(z);
            }
        }
        Ok(TrajectoryDataset { segments })
    }
}

/// 17 significant digits, enough for exact round trips.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Tags the first `train` samples as training (cut into `batch_len`
/// mini-batches), the next `val` as validation and the last `test` as test.
pub fn split_dataset(
    data: &TrajectoryDataset,
    train: usize,
    val: usize,
    test: usize,
    batch_len: usize,
) -> Result<TrajectoryDataset, DatasetError> {
    if batch_len == 0 {
        return Err(DatasetError::InvalidSplit("batch length must be positive".into()));
    }
    if train == 0 {
        return Err(DatasetError::InvalidSplit("training split is empty".into()));
    }
    let whole = data.concatenated()?;
    let n = whole.len();
    if train + val + test > n {
        return Err(DatasetError::InvalidSplit(format!(
            "{train}+{val}+{test} samples requested but only {n} available"
        )));
    }
    let mut segments = Vec::new();
    let mut at = 0;
    while at < train {
        let end = (at + batch_len).min(train);
        segments.push(whole.slice(at..end, Split::Train));
        at = end;
    }
    if !train.is_multiple_of(batch_len) {
        log::warn!(
            "batch length {batch_len} does not divide {train}; last training batch has {} samples",
            train % batch_len
        );
    }
    if val > 0 {
        segments.push(whole.slice(train..train + val, Split::Validation));
    }
    if test > 0 {
        segments.push(whole.slice(n - test..n, Split::Test));
    }
    Ok(TrajectoryDataset { segments })
}
