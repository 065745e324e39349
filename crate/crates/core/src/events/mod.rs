//! Event and session domain model.
//!
//! An interaction log is a flat sequence of [`InteractionEvent`]s. Grouping by
//! `(user_id, live_id)` and cutting at `request` events yields
//! [`ImpressionSession`]s, the unit every labeling paradigm operates on.

mod log;
mod sessionize;

pub use log::{load_event_log, write_event_log, CsvColumnMap, EventLogFormat};
pub use sessionize::{events_from_sessions, sessionize};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

/// Milliseconds since the epoch of the simulated world. Event-time only;
/// nothing in the engine reads a wall clock.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn ms(self) -> i64 {
        self.0
    }

    /// Signed distance `self - earlier` in milliseconds.
    pub fn since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }
}

impl std::ops::Add<DurationMs> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: DurationMs) -> Timestamp {
        Timestamp(self.0 + rhs.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A strictly positive span of event time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DurationMs(pub i64);

impl DurationMs {
    pub const fn minutes(m: i64) -> DurationMs {
        DurationMs(m * 60_000)
    }

    pub const fn seconds(s: i64) -> DurationMs {
        DurationMs(s * 1_000)
    }

    pub fn ms(self) -> i64 {
        self.0
    }
}

/// Every event kind the log can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Request,
    Impression,
    Click,
    Follow,
    Like,
    Exit,
}

impl BehaviorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorKind::Request => "request",
            BehaviorKind::Impression => "impression",
            BehaviorKind::Click => "click",
            BehaviorKind::Follow => "follow",
            BehaviorKind::Like => "like",
            BehaviorKind::Exit => "exit",
        }
    }

    pub fn parse(s: &str) -> Option<BehaviorKind> {
        Some(match s {
            "request" => BehaviorKind::Request,
            "impression" => BehaviorKind::Impression,
            "click" => BehaviorKind::Click,
            "follow" => BehaviorKind::Follow,
            "like" => BehaviorKind::Like,
            "exit" => BehaviorKind::Exit,
            _ => return None,
        })
    }
}

impl fmt::Display for BehaviorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The three behaviors the learner predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Click,
    Follow,
    Like,
}

/// Where a behavior's negative evidence comes from: impression-space
/// behaviors are falsified by exit-without-behavior; post-click behaviors
/// additionally require the click to have happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorSpace {
    Impression,
    PostClick,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Click, TaskKind::Follow, TaskKind::Like];

    pub fn space(self) -> BehaviorSpace {
        match self {
            TaskKind::Click | TaskKind::Follow => BehaviorSpace::Impression,
            TaskKind::Like => BehaviorSpace::PostClick,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Click => "click",
            TaskKind::Follow => "follow",
            TaskKind::Like => "like",
        }
    }

    pub fn index(self) -> usize {
        match self {
            TaskKind::Click => 0,
            TaskKind::Follow => 1,
            TaskKind::Like => 2,
        }
    }

    pub fn behavior(self) -> BehaviorKind {
        match self {
            TaskKind::Click => BehaviorKind::Click,
            TaskKind::Follow => BehaviorKind::Follow,
            TaskKind::Like => BehaviorKind::Like,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// User-side features captured when a request is served. All fields are
/// opaque categorical identifiers; empty strings mean "unknown".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct UserProfile {
    pub user_id: String,
    #[serde(default)]
    pub gender: String,
    #[serde(default)]
    pub age_bucket: String,
    #[serde(default)]
    pub city: String,
    /// Anchor ids of the user's most recent clicks, oldest first. Only
    /// clicks that happened strictly before the request may appear here.
    #[serde(default)]
    pub click_anchor_history: Vec<String>,
}

/// Live-room-side features as they looked at `snapshot_ts`. Live rooms
/// mutate continuously, so a snapshot is only valid for the moment it was
/// taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LiveRoomSnapshot {
    pub live_id: String,
    #[serde(default)]
    pub live_type: String,
    pub anchor_id: String,
    #[serde(default)]
    pub anchor_gender: String,
    #[serde(default)]
    pub anchor_type: String,
    pub snapshot_ts: Timestamp,
}

/// Side columns present only on `request` rows: the user profile and the
/// live-room snapshot fetched when the recommendation was computed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RequestContext {
    pub gender: String,
    pub age_bucket: String,
    pub city: String,
    pub click_anchor_history: Vec<String>,
    pub live_type: String,
    pub anchor_gender: String,
    pub anchor_type: String,
}

/// One row of the interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionEvent {
    pub kind: BehaviorKind,
    pub user_id: String,
    pub live_id: String,
    pub anchor_id: String,
    pub ts: Timestamp,
    /// Present on `request` events only.
    pub context: Option<RequestContext>,
}

/// Identifies a session uniquely: re-entering the same room later starts a
/// new session under a new `request_ts`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub user_id: String,
    pub live_id: String,
    pub request_ts: Timestamp,
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.user_id, self.live_id, self.request_ts)
    }
}

/// A request and everything the user did inside the room before leaving.
///
/// Invariants (enforced by [`sessionize`]):
/// * if `impression_ts` is absent, every behavior and `exit_ts` are absent;
/// * every present behavior lies in `[impression_ts, exit_ts]`;
/// * `like_ts` is present only if `click_ts` is and `click_ts <= like_ts`.
///
/// Sessions still open at the observation horizon are closed there with
/// `censored = true`; their `exit_ts` is the horizon, not a real exit.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionSession {
    pub user: UserProfile,
    pub live: LiveRoomSnapshot,
    pub request_ts: Timestamp,
    pub impression_ts: Option<Timestamp>,
    pub click_ts: Option<Timestamp>,
    pub follow_ts: Option<Timestamp>,
    pub like_ts: Option<Timestamp>,
    pub exit_ts: Option<Timestamp>,
    pub censored: bool,
}

impl ImpressionSession {
    pub fn key(&self) -> SessionKey {
        SessionKey {
            user_id: self.user.user_id.clone(),
            live_id: self.live.live_id.clone(),
            request_ts: self.request_ts,
        }
    }

    pub fn behavior_ts(&self, task: TaskKind) -> Option<Timestamp> {
        match task {
            TaskKind::Click => self.click_ts,
            TaskKind::Follow => self.follow_ts,
            TaskKind::Like => self.like_ts,
        }
    }

    pub fn is_impressed(&self) -> bool {
        self.impression_ts.is_some()
    }
}

/// Sessions plus an index for key lookups; the order is the sessionizer's
/// output order (ascending `request_ts`).
#[derive(Debug, Clone, Default)]
pub struct SessionStore {
    sessions: Vec<ImpressionSession>,
    by_key: HashMap<SessionKey, usize>,
}

impl SessionStore {
    pub fn new(sessions: Vec<ImpressionSession>) -> SessionStore {
        let by_key = sessions
            .iter()
            .enumerate()
            .map(|(i, s)| (s.key(), i))
            .collect();
        SessionStore { sessions, by_key }
    }

    pub fn get(&self, key: &SessionKey) -> Option<&ImpressionSession> {
        self.by_key.get(key).map(|&i| &self.sessions[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImpressionSession> {
        self.sessions.iter()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn as_slice(&self) -> &[ImpressionSession] {
        &self.sessions
    }
}

impl From<Vec<ImpressionSession>> for SessionStore {
    fn from(sessions: Vec<ImpressionSession>) -> SessionStore {
        SessionStore::new(sessions)
    }
}

/// Errors raised while reading, validating, or grouping event logs.
#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed event: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
}

impl EventError {
    pub(crate) fn validation(msg: impl Into<String>) -> EventError {
        EventError::Validation(msg.into())
    }
}
