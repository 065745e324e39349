//! The label-join core: turns [`ImpressionSession`]s into time-ordered
//! labeled samples under three paradigms.
//!
//! * fixed-from-request — one window of length `w_h` anchored at the request;
//! * fixed-from-impression — one window of length `w_m` anchored at the
//!   impression;
//! * sliding ("sliver") — a grid of `w_s` windows anchored at a uniform
//!   epoch `t_uni`; positives are emitted at the boundary of the window the
//!   behavior fell in, negatives at the boundary of the exit window.
//!
//! Fixed windows use open intervals `(start, start+w)`: a behavior exactly
//! on a boundary counts as outside the window. Sliding windows are half-open
//! `[t_uni+(k−1)·w_s, t_uni+k·w_s)`, so every timestamp belongs to exactly
//! one window.

mod audit;
mod io;

pub use audit::{
    audit_label_accuracy, default_delay_grid, BucketAccuracy, LabelAccuracyReport, TaskAccuracy,
};
pub use io::{read_samples, write_samples};

use crate::events::{DurationMs, ImpressionSession, SessionKey, Timestamp};
pub use crate::events::TaskKind;
use std::collections::BTreeMap;

/// How a paradigm anchors and sizes its label-join window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowPolicy {
    FixedFromRequest { w: DurationMs },
    FixedFromImpression { w: DurationMs },
    Sliding { w: DurationMs, t_uni: Timestamp },
}

impl WindowPolicy {
    /// The classical long window: one hour from the request.
    pub fn one_hour() -> WindowPolicy {
        WindowPolicy::FixedFromRequest {
            w: DurationMs::minutes(60),
        }
    }

    /// The shortened window: five minutes from the impression.
    pub fn five_minute() -> WindowPolicy {
        WindowPolicy::FixedFromImpression {
            w: DurationMs::minutes(5),
        }
    }

    /// The sliding-window paradigm: 30-second windows on a uniform grid.
    pub fn sliver() -> WindowPolicy {
        WindowPolicy::Sliding {
            w: DurationMs::seconds(30),
            t_uni: Timestamp(0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WindowPolicy::FixedFromRequest { .. } => "one-hour",
            WindowPolicy::FixedFromImpression { .. } => "five-minute",
            WindowPolicy::Sliding { .. } => "sliver",
        }
    }

    pub fn window(&self) -> DurationMs {
        match *self {
            WindowPolicy::FixedFromRequest { w } => w,
            WindowPolicy::FixedFromImpression { w } => w,
            WindowPolicy::Sliding { w, .. } => w,
        }
    }
}

/// Per-task outcome of a label join. `Absent` means the paradigm emits no
/// supervision for that task from this sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLabel {
    Positive,
    Negative,
    Absent,
}

impl TaskLabel {
    pub fn is_present(self) -> bool {
        self != TaskLabel::Absent
    }

    /// The target value fed to the loss, if any.
    pub fn target(self) -> Option<f64> {
        match self {
            TaskLabel::Positive => Some(1.0),
            TaskLabel::Negative => Some(0.0),
            TaskLabel::Absent => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskLabel::Positive => "+1",
            TaskLabel::Negative => "-1",
            TaskLabel::Absent => "absent",
        }
    }

    pub fn parse(s: &str) -> Option<TaskLabel> {
        Some(match s {
            "+1" | "1" => TaskLabel::Positive,
            "-1" => TaskLabel::Negative,
            "absent" | "" => TaskLabel::Absent,
            _ => return None,
        })
    }
}

/// Labels for the three tasks carried by one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLabels {
    pub click: TaskLabel,
    pub follow: TaskLabel,
    pub like: TaskLabel,
}

impl Default for TaskLabels {
    fn default() -> TaskLabels {
        TaskLabels {
            click: TaskLabel::Absent,
            follow: TaskLabel::Absent,
            like: TaskLabel::Absent,
        }
    }
}

impl TaskLabels {
    pub fn get(&self, task: TaskKind) -> TaskLabel {
        match task {
            TaskKind::Click => self.click,
            TaskKind::Follow => self.follow,
            TaskKind::Like => self.like,
        }
    }

    pub fn set(&mut self, task: TaskKind, label: TaskLabel) {
        match task {
            TaskKind::Click => self.click = label,
            TaskKind::Follow => self.follow = label,
            TaskKind::Like => self.like = label,
        }
    }

    pub fn any_present(&self) -> bool {
        TaskKind::ALL.iter().any(|&t| self.get(t).is_present())
    }
}

/// One unit of training supervision: emitted at `emit_ts` (μ), carrying the
/// labels that became decidable at that moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub session: SessionKey,
    pub labels: TaskLabels,
    pub emit_ts: Timestamp,
    /// Uniform window index `k`; sliding paradigm only.
    pub window_id: Option<i64>,
    pub snapshot_ts: Timestamp,
}

/// Errors raised by window arithmetic and audits.
#[derive(Debug, thiserror::Error)]
pub enum WindowError {
    #[error("timestamp {ts} precedes the uniform epoch {t_uni}")]
    BeforeEpoch { ts: Timestamp, t_uni: Timestamp },
    #[error("no ground truth for session {0}")]
    UnknownSession(SessionKey),
}

/// Uniform window id for `ts` on the grid anchored at `t_uni`: windows are
/// half-open, `k = floor((ts − t_uni)/w_s) + 1`, and `μ_k = t_uni + k·w_s`
/// is the moment window `k`'s contents become final.
pub fn window_index(
    t_uni: Timestamp,
    w_s: DurationMs,
    ts: Timestamp,
) -> Result<(i64, Timestamp), WindowError> {
    if ts < t_uni {
        return Err(WindowError::BeforeEpoch { ts, t_uni });
    }
    let k = (ts.since(t_uni)).div_euclid(w_s.ms()) + 1;
    let mu = Timestamp(t_uni.ms() + k * w_s.ms());
    Ok((k, mu))
}

/// In-window test for fixed paradigms: open interval, boundaries excluded.
fn inside_open(start: Timestamp, end: Timestamp, ts: Option<Timestamp>) -> bool {
    matches!(ts, Some(y) if start < y && y < end)
}

/// Whether a fixed window ending at `mu` is fully observed for this session.
/// For censored sessions `exit_ts` is the observation horizon; a window
/// reaching past it would label events nobody has seen yet.
fn window_observed(session: &ImpressionSession, mu: Timestamp) -> bool {
    if !session.censored {
        return true;
    }
    match session.exit_ts {
        Some(horizon) => mu <= horizon,
        None => false,
    }
}

/// One-hour-style labeler: a single window `(t, t + w_h)` anchored at the
/// request. Emits one sample at `μ = t + w_h` when the impression happened
/// inside the window, else nothing.
pub fn label_fixed_from_request(
    session: &ImpressionSession,
    w_h: DurationMs,
) -> Vec<LabeledSample> {
    let t = session.request_ts;
    let mu = t + w_h;
    let impressed_in_window = match session.impression_ts {
        Some(imp) => imp.since(t) < w_h.ms(),
        None => false,
    };
    if !impressed_in_window || !window_observed(session, mu) {
        return Vec::new();
    }
    fixed_window_sample(session, t, mu)
}

/// Five-minute-style labeler: a single window `(t+τ, t+τ+w_m)` anchored at
/// the impression. Sessions without an impression emit nothing.
pub fn label_fixed_from_impression(
    session: &ImpressionSession,
    w_m: DurationMs,
) -> Vec<LabeledSample> {
    let imp = match session.impression_ts {
        Some(imp) => imp,
        None => return Vec::new(),
    };
    let mu = imp + w_m;
    if !window_observed(session, mu) {
        return Vec::new();
    }
    fixed_window_sample(session, imp, mu)
}

/// Shared fixed-window case analysis over the open interval `(start, end)`:
/// impression-space tasks are Positive inside the window and Negative
/// otherwise (a too-late behavior becomes a fake negative); the post-click
/// task is gated on the click having happened inside the window.
fn fixed_window_sample(
    session: &ImpressionSession,
    start: Timestamp,
    end: Timestamp,
) -> Vec<LabeledSample> {
    let mut labels = TaskLabels::default();
    for task in [TaskKind::Click, TaskKind::Follow] {
        let label = if inside_open(start, end, session.behavior_ts(task)) {
            TaskLabel::Positive
        } else {
            TaskLabel::Negative
        };
        labels.set(task, label);
    }
    let click_in_window = inside_open(start, end, session.click_ts);
    let like = if inside_open(start, end, session.like_ts) {
        TaskLabel::Positive
    } else if click_in_window {
        TaskLabel::Negative
    } else {
        TaskLabel::Absent
    };
    labels.set(TaskKind::Like, like);

    if !labels.any_present() {
        return Vec::new();
    }
    vec![LabeledSample {
        session: session.key(),
        labels,
        emit_ts: end,
        window_id: None,
        snapshot_ts: session.live.snapshot_ts,
    }]
}

/// Sliding-window labeler. Per task: a Positive at the boundary of the
/// window the behavior fell in; for impression-space tasks a Negative at the
/// boundary of the exit window when the behavior never happened; for the
/// post-click task a Negative at the exit window only when the click is
/// already decided (`click_ts < μ_exit`) and the like never happened.
/// Windows where the user is still watching without new behavior emit
/// nothing, and censored sessions emit positives only.
pub fn label_sliver(
    session: &ImpressionSession,
    w_s: DurationMs,
    t_uni: Timestamp,
) -> Result<Vec<LabeledSample>, WindowError> {
    if session.impression_ts.is_none() {
        return Ok(Vec::new());
    }
    // k → labels resolving at μ_k; BTreeMap gives ascending μ for free.
    let mut windows: BTreeMap<i64, TaskLabels> = BTreeMap::new();

    for task in TaskKind::ALL {
        if let Some(y) = session.behavior_ts(task) {
            let (k, _) = window_index(t_uni, w_s, y)?;
            windows.entry(k).or_default().set(task, TaskLabel::Positive);
        }
    }

    if !session.censored {
        let exit = session
            .exit_ts
            .expect("uncensored impressed session has an exit");
        let (k_exit, mu_exit) = window_index(t_uni, w_s, exit)?;
        let entry = windows.entry(k_exit).or_default();
        if session.click_ts.is_none() {
            entry.click = TaskLabel::Negative;
        }
        if session.follow_ts.is_none() {
            entry.follow = TaskLabel::Negative;
        }
        let click_decided = matches!(session.click_ts, Some(c) if c < mu_exit);
        if click_decided && session.like_ts.is_none() {
            entry.like = TaskLabel::Negative;
        }
    }

    let key = session.key();
    // The exit-window entry is created before we know whether any negative
    // applies; when every task already resolved positive elsewhere it stays
    // empty and must not surface as a supervision-free sample.
    Ok(windows
        .into_iter()
        .filter(|(_, labels)| labels.any_present())
        .map(|(k, labels)| LabeledSample {
            session: key.clone(),
            labels,
            emit_ts: Timestamp(t_uni.ms() + k * w_s.ms()),
            window_id: Some(k),
            snapshot_ts: session.live.snapshot_ts,
        })
        .collect())
}

/// Applies the policy's labeler to every session and merge-sorts the result
/// into one μ-ordered stream. The sort key `(μ, request_ts, user_id,
/// live_id, window_id)` is total, so the stream is a pure function of its
/// inputs.
pub fn produce_stream(
    sessions: &[ImpressionSession],
    policy: &WindowPolicy,
) -> Result<Vec<LabeledSample>, WindowError> {
    let mut samples = Vec::new();
    for session in sessions {
        let mut batch = match *policy {
            WindowPolicy::FixedFromRequest { w } => label_fixed_from_request(session, w),
            WindowPolicy::FixedFromImpression { w } => label_fixed_from_impression(session, w),
            WindowPolicy::Sliding { w, t_uni } => label_sliver(session, w, t_uni)?,
        };
        samples.append(&mut batch);
    }
    samples.sort_by(|a, b| {
        (
            a.emit_ts,
            a.session.request_ts,
            &a.session.user_id,
            &a.session.live_id,
            a.window_id,
        )
            .cmp(&(
                b.emit_ts,
                b.session.request_ts,
                &b.session.user_id,
                &b.session.live_id,
                b.window_id,
            ))
    });
    Ok(samples)
}
