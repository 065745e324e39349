//! Labeled-sample file format: one CSV row per sample with the session key,
//! emission time, window id (sliding only), per-task label, and the feature
//! snapshot time.

use super::{LabeledSample, TaskLabel, TaskLabels};
use crate::events::{EventError, SessionKey, Timestamp};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

const HEADER: [&str; 9] = [
    "user_id",
    "live_id",
    "request_ts",
    "emit_ts",
    "window_id",
    "click",
    "follow",
    "like",
    "snapshot_ts",
];

pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<(), EventError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", HEADER.join(","))?;
    for s in samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.session.user_id,
            s.session.live_id,
            s.session.request_ts,
            s.emit_ts,
            s.window_id.map_or(String::new(), |k| k.to_string()),
            s.labels.click.as_str(),
            s.labels.follow.as_str(),
            s.labels.like.as_str(),
            s.snapshot_ts,
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>, EventError> {
    let file = File::open(path)?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| EventError::Schema(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize, EventError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EventError::Schema(format!("missing required column '{name}'")))
    };
    let cols: Vec<usize> = HEADER.iter().map(|h| col(h)).collect::<Result<_, _>>()?;

    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| EventError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let get = |i: usize| record.get(cols[i]).unwrap_or("");
        let int = |i: usize| -> Result<i64, EventError> {
            get(i).parse().map_err(|_| EventError::Parse {
                line,
                msg: format!("'{}' is not an integer", get(i)),
            })
        };
        let label = |i: usize| -> Result<TaskLabel, EventError> {
            TaskLabel::parse(get(i)).ok_or_else(|| EventError::Parse {
                line,
                msg: format!("'{}' is not a label", get(i)),
            })
        };
        let window_id = if get(4).is_empty() {
            None
        } else {
            Some(int(4)?)
        };
        samples.push(LabeledSample {
            session: SessionKey {
                user_id: get(0).to_string(),
                live_id: get(1).to_string(),
                request_ts: Timestamp(int(2)?),
            },
            labels: TaskLabels {
                click: label(5)?,
                follow: label(6)?,
                like: label(7)?,
            },
            emit_ts: Timestamp(int(3)?),
            window_id,
            snapshot_ts: Timestamp(int(8)?),
        });
    }
    Ok(samples)
}
