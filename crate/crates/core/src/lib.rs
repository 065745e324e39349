//! Core engine for comparing data-stream labeling paradigms in live-stream
//! recommendation: event/session modeling, a deterministic traffic simulator,
//! three window-join labelers (one-hour, five-minute, sliver), an online
//! multi-task learner, evaluation metrics, and a re-recommendation simulator.

pub mod events;
pub mod learner;
pub mod metrics;
pub mod rereco;
pub mod simgen;
pub mod windowing;

pub use events::{
    BehaviorKind, DurationMs, EventError, ImpressionSession, InteractionEvent, LiveRoomSnapshot,
    RequestContext, SessionKey, SessionStore, Timestamp, UserProfile,
};
pub use windowing::{LabeledSample, TaskKind, TaskLabel, TaskLabels, WindowPolicy};
