//! Event-log readers and writers.
//!
//! The canonical interchange format is JSON Lines, one event per line with
//! fields `kind, user_id, live_id, anchor_id, ts_ms` plus optional profile
//! side-columns on `request` rows. A delimited (CSV) layout is accepted as
//! well; its columns are bound by name through a [`CsvColumnMap`] so exports
//! from other systems can be ingested without rewriting headers.

use super::{BehaviorKind, EventError, InteractionEvent, RequestContext, Timestamp};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// One line of the canonical JSONL layout: flat columns, side fields only
/// present when they carry a value.
#[derive(Debug, Serialize, Deserialize)]
struct RawEvent {
    kind: BehaviorKind,
    user_id: String,
    live_id: String,
    anchor_id: String,
    ts_ms: i64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    gender: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    age_bucket: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    city: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    click_anchor_history: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    live_type: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    anchor_gender: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    anchor_type: String,
}

impl RawEvent {
    fn into_event(self) -> InteractionEvent {
        let context = if self.kind == BehaviorKind::Request {
            Some(RequestContext {
                gender: self.gender,
                age_bucket: self.age_bucket,
                city: self.city,
                click_anchor_history: self.click_anchor_history,
                live_type: self.live_type,
                anchor_gender: self.anchor_gender,
                anchor_type: self.anchor_type,
            })
        } else {
            None
        };
        InteractionEvent {
            kind: self.kind,
            user_id: self.user_id,
            live_id: self.live_id,
            anchor_id: self.anchor_id,
            ts: Timestamp(self.ts_ms),
            context,
        }
    }

    fn from_event(event: &InteractionEvent) -> RawEvent {
        let ctx = event.context.clone().unwrap_or_default();
        RawEvent {
            kind: event.kind,
            user_id: event.user_id.clone(),
            live_id: event.live_id.clone(),
            anchor_id: event.anchor_id.clone(),
            ts_ms: event.ts.ms(),
            gender: ctx.gender,
            age_bucket: ctx.age_bucket,
            city: ctx.city,
            click_anchor_history: ctx.click_anchor_history,
            live_type: ctx.live_type,
            anchor_gender: ctx.anchor_gender,
            anchor_type: ctx.anchor_type,
        }
    }
}

/// Column-name bindings for delimited logs. Required columns must exist in
/// the header; side columns are optional and only read on `request` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvColumnMap {
    pub kind: String,
    pub user_id: String,
    pub live_id: String,
    pub anchor_id: String,
    pub ts: String,
    pub gender: String,
    pub age_bucket: String,
    pub city: String,
    /// Pipe-separated list of anchor ids, oldest first.
    pub click_anchor_history: String,
    pub live_type: String,
    pub anchor_gender: String,
    pub anchor_type: String,
}

impl Default for CsvColumnMap {
    fn default() -> CsvColumnMap {
        CsvColumnMap {
            kind: "kind".into(),
            user_id: "user_id".into(),
            live_id: "live_id".into(),
            anchor_id: "anchor_id".into(),
            ts: "ts_ms".into(),
            gender: "gender".into(),
            age_bucket: "age_bucket".into(),
            city: "city".into(),
            click_anchor_history: "click_anchor_history".into(),
            live_type: "live_type".into(),
            anchor_gender: "anchor_gender".into(),
            anchor_type: "anchor_type".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventLogFormat {
    Jsonl,
    Csv(CsvColumnMap),
}

/// Reads an event log, validates each row, and returns events sorted by
/// timestamp (ties keep input order). Malformed rows fail with their line
/// number; duplicate `(user, live, kind, ts)` rows are rejected because the
/// sessionizer could not attribute them deterministically.
pub fn load_event_log(
    path: &Path,
    format: &EventLogFormat,
) -> Result<Vec<InteractionEvent>, EventError> {
    let mut events = match format {
        EventLogFormat::Jsonl => read_jsonl(path)?,
        EventLogFormat::Csv(map) => read_csv(path, map)?,
    };
    reject_duplicates(&events)?;
    events.sort_by_key(|e| e.ts);
    Ok(events)
}

/// Writes events as JSON Lines in the given order. Output is byte-stable:
/// field order is fixed and nothing derived from a wall clock is emitted.
pub fn write_event_log(path: &Path, events: &[InteractionEvent]) -> Result<(), EventError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for event in events {
        let raw = RawEvent::from_event(event);
        serde_json::to_writer(&mut w, &raw)
            .map_err(|e| EventError::Schema(format!("serialize event: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<InteractionEvent>, EventError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEvent = serde_json::from_str(&line).map_err(|e| EventError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let event = raw.into_event();
        validate_event(&event, idx + 1)?;
        events.push(event);
    }
    Ok(events)
}

fn read_csv(path: &Path, map: &CsvColumnMap) -> Result<Vec<InteractionEvent>, EventError> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
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
    let opt_col = |name: &str| headers.iter().position(|h| h == name);

    let kind_c = col(&map.kind)?;
    let user_c = col(&map.user_id)?;
    let live_c = col(&map.live_id)?;
    let anchor_c = col(&map.anchor_id)?;
    let ts_c = col(&map.ts)?;
    let gender_c = opt_col(&map.gender);
    let age_c = opt_col(&map.age_bucket);
    let city_c = opt_col(&map.city);
    let hist_c = opt_col(&map.click_anchor_history);
    let ltype_c = opt_col(&map.live_type);
    let agender_c = opt_col(&map.anchor_gender);
    let atype_c = opt_col(&map.anchor_type);

    let mut events = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header occupies line 1
        let record = record.map_err(|e| EventError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let opt_field = |c: Option<usize>| {
            c.map(|c| record.get(c).unwrap_or(""))
                .unwrap_or("")
                .to_string()
        };

        let kind_raw = field(kind_c);
        let kind = BehaviorKind::parse(&kind_raw).ok_or_else(|| EventError::Parse {
            line,
            msg: format!("unknown event kind '{kind_raw}'"),
        })?;
        let ts_raw = field(ts_c);
        let ts: i64 = ts_raw.parse().map_err(|_| EventError::Parse {
            line,
            msg: format!("timestamp '{ts_raw}' is not an integer"),
        })?;

        let context = if kind == BehaviorKind::Request {
            let history_raw = opt_field(hist_c);
            let click_anchor_history = if history_raw.is_empty() {
                Vec::new()
            } else {
                history_raw.split('|').map(str::to_string).collect()
            };
            Some(RequestContext {
                gender: opt_field(gender_c),
                age_bucket: opt_field(age_c),
                city: opt_field(city_c),
                click_anchor_history,
                live_type: opt_field(ltype_c),
                anchor_gender: opt_field(agender_c),
                anchor_type: opt_field(atype_c),
            })
        } else {
            None
        };

        let event = InteractionEvent {
            kind,
            user_id: field(user_c),
            live_id: field(live_c),
            anchor_id: field(anchor_c),
            ts: Timestamp(ts),
            context,
        };
        validate_event(&event, line)?;
        events.push(event);
    }
    Ok(events)
}

fn validate_event(event: &InteractionEvent, line: usize) -> Result<(), EventError> {
    if event.ts.ms() < 0 {
        return Err(EventError::Parse {
            line,
            msg: format!("negative timestamp {}", event.ts),
        });
    }
    if event.user_id.is_empty() || event.live_id.is_empty() {
        return Err(EventError::Parse {
            line,
            msg: "user_id and live_id must be non-empty".into(),
        });
    }
    Ok(())
}

fn reject_duplicates(events: &[InteractionEvent]) -> Result<(), EventError> {
    let mut seen: HashSet<(&str, &str, BehaviorKind, i64)> = HashSet::with_capacity(events.len());
    for event in events {
        let key = (
            event.user_id.as_str(),
            event.live_id.as_str(),
            event.kind,
            event.ts.ms(),
        );
        if !seen.insert(key) {
            return Err(EventError::validation(format!(
                "duplicate event ({}, {}, {}, {})",
                event.user_id, event.live_id, event.kind, event.ts
            )));
        }
    }
    Ok(())
}
