//! Ground-truth sidecar: eventual per-session labels plus each room's
//! content-state trajectory, stored next to the event log so audits never
//! re-run the generator.

use crate::events::{SessionKey, Timestamp};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// What eventually happened in one session, regardless of any window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub user_id: String,
    pub live_id: String,
    pub request_ts: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impression_ts: Option<Timestamp>,
    pub click: bool,
    pub follow: bool,
    pub like: bool,
    /// True when the session had no observed exit before the horizon; its
    /// eventual labels only cover what the log retained.
    pub censored: bool,
}

impl SessionTruth {
    pub fn key(&self) -> SessionKey {
        SessionKey {
            user_id: self.user_id.clone(),
            live_id: self.live_id.clone(),
            request_ts: self.request_ts,
        }
    }

    pub fn behavior(&self, task: crate::events::TaskKind) -> bool {
        match task {
            crate::events::TaskKind::Click => self.click,
            crate::events::TaskKind::Follow => self.follow,
            crate::events::TaskKind::Like => self.like,
        }
    }
}

/// One room's piecewise-constant content state over the horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomTrajectory {
    pub live_id: String,
    /// `(segment start, state index)`, ascending; the first start is 0 and
    /// each state holds until the next start (or the horizon).
    pub states: Vec<(Timestamp, usize)>,
}

impl RoomTrajectory {
    pub fn state_at(&self, ts: Timestamp) -> usize {
        let idx = self.states.partition_point(|(start, _)| *start <= ts);
        // partition_point ≥ 1 because the first segment starts at 0.
        self.states[idx.saturating_sub(1)].1
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TruthError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot decode ground truth: {0}")]
    Decode(String),
    #[error("unknown live_id '{0}'")]
    UnknownLive(String),
    #[error("timestamp {0} outside the generation horizon")]
    OutsideHorizon(Timestamp),
}

/// Sidecar bundle written by the generator and consumed by audits, offline
/// evaluation, and the re-recommendation simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub horizon: Timestamp,
    /// Marginal click probability per content state (uniform user mix).
    pub state_click_rate: Vec<f64>,
    /// Sorted by `live_id`.
    pub rooms: Vec<RoomTrajectory>,
    /// Sorted by `(request_ts, user_id, live_id)` — the sessionizer's order.
    pub sessions: Vec<SessionTruth>,
}

impl GroundTruth {
    fn room(&self, live_id: &str) -> Result<&RoomTrajectory, TruthError> {
        self.rooms
            .binary_search_by(|r| r.live_id.as_str().cmp(live_id))
            .map(|i| &self.rooms[i])
            .map_err(|_| TruthError::UnknownLive(live_id.to_string()))
    }

    /// The generator's instantaneous room-level click probability at `ts`:
    /// the marginal rate of the content state active at that moment.
    pub fn true_ctr(&self, live_id: &str, ts: Timestamp) -> Result<f64, TruthError> {
        if ts.ms() < 0 || ts > self.horizon {
            return Err(TruthError::OutsideHorizon(ts));
        }
        let room = self.room(live_id)?;
        Ok(self.state_click_rate[room.state_at(ts)])
    }

    pub fn write(&self, path: &Path) -> Result<(), TruthError> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| TruthError::Decode(e.to_string()))?;
        use std::io::Write as _;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<GroundTruth, TruthError> {
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| TruthError::Decode(e.to_string()))
    }
}
