//! Label-accuracy audit: compares emitted labels against eventual ground
//! truth, bucketed by how long after the impression the label was emitted.

use super::{LabeledSample, TaskKind, TaskLabel, WindowError};
use crate::events::SessionKey;
use crate::simgen::GroundTruth;
use std::collections::HashMap;

/// Accuracy within one delay bucket `[lo_ms, hi_ms)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketAccuracy {
    pub lo_ms: i64,
    /// `i64::MAX` marks the open-ended last bucket.
    pub hi_ms: i64,
    pub correct: usize,
    pub total: usize,
}

impl BucketAccuracy {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAccuracy {
    pub task: TaskKind,
    pub correct: usize,
    pub total: usize,
    pub buckets: Vec<BucketAccuracy>,
}

impl TaskAccuracy {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Per-task accuracy of emitted labels against eventual session labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAccuracyReport {
    pub tasks: [TaskAccuracy; 3],
    /// Samples whose session was censored: excluded from every denominator.
    pub excluded_censored: usize,
}

impl LabelAccuracyReport {
    pub fn task(&self, task: TaskKind) -> &TaskAccuracy {
        &self.tasks[task.index()]
    }
}

/// Default audit grid: bucket edges at 1, 2, 5, 10, 30, and 60 minutes of
/// label delay since the impression.
pub fn default_delay_grid() -> Vec<i64> {
    vec![60_000, 120_000, 300_000, 600_000, 1_800_000, 3_600_000]
}

fn bucket_index(edges: &[i64], delay: i64) -> usize {
    edges.partition_point(|&e| e <= delay)
}

/// Scores every non-Absent emitted label against the session's eventual
/// behavior. A label is correct when `Positive` coincides with the behavior
/// having eventually happened and `Negative` with it never happening.
/// Censored sessions are excluded (their eventual labels are unknowable) and
/// counted; sessions missing from the ground truth are an error.
pub fn audit_label_accuracy(
    samples: &[LabeledSample],
    truth: &GroundTruth,
    delay_grid_ms: &[i64],
) -> Result<LabelAccuracyReport, WindowError> {
    let mut edges = delay_grid_ms.to_vec();
    edges.sort_unstable();
    edges.dedup();

    let by_key: HashMap<SessionKey, &crate::simgen::SessionTruth> = truth
        .sessions
        .iter()
        .map(|s| (s.key(), s))
        .collect();

    let empty_buckets: Vec<BucketAccuracy> = edges
        .iter()
        .enumerate()
        .map(|(i, &hi)| BucketAccuracy {
            lo_ms: if i == 0 { 0 } else { edges[i - 1] },
            hi_ms: hi,
            correct: 0,
            total: 0,
        })
        .chain(std::iter::once(BucketAccuracy {
            lo_ms: edges.last().copied().unwrap_or(0),
            hi_ms: i64::MAX,
            correct: 0,
            total: 0,
        }))
        .collect();
    let mut tasks = TaskKind::ALL.map(|task| TaskAccuracy {
        task,
        correct: 0,
        total: 0,
        buckets: empty_buckets.clone(),
    });
    let mut excluded_censored = 0usize;

    for sample in samples {
        let session = by_key
            .get(&sample.session)
            .ok_or_else(|| WindowError::UnknownSession(sample.session.clone()))?;
        if session.censored {
            excluded_censored += 1;
            continue;
        }
        let impression_ts = session.impression_ts.unwrap_or(session.request_ts);
        let delay = sample.emit_ts.since(impression_ts).max(0);
        let bucket = bucket_index(&edges, delay);
        for task in TaskKind::ALL {
            let label = sample.labels.get(task);
            if !label.is_present() {
                continue;
            }
            let correct = (label == TaskLabel::Positive) == session.behavior(task);
            let acc = &mut tasks[task.index()];
            acc.total += 1;
            acc.buckets[bucket].total += 1;
            if correct {
                acc.correct += 1;
                acc.buckets[bucket].correct += 1;
            }
        }
    }

    Ok(LabelAccuracyReport {
        tasks,
        excluded_censored,
    })
}
