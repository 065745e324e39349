//! Evaluation: AUC, relative improvement, delay summaries, and the
//! streaming train/evaluate protocol that compares labeling paradigms.

use crate::events::{SessionKey, SessionStore, TaskKind, Timestamp};
use crate::learner::{
    encode_session, AdamState, FitOptions, MultiTaskModel, TrainError,
};
use crate::windowing::LabeledSample;
use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("relative improvement undefined: baseline AUC {base} must exceed 0.5")]
    DegenerateBase { base: f64 },
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error(
        "leakage: paradigm {paradigm} trained through emit time {last_mu} \
         but the evaluated interval starts at {eval_start}"
    )]
    Leakage {
        paradigm: String,
        last_mu: Timestamp,
        eval_start: Timestamp,
    },
    #[error("bad schedule: {0}")]
    Schedule(String),
    #[error("sample references unknown session {key}")]
    UnknownSession { key: SessionKey },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Area under the ROC curve with the tie convention
/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`. Returns `None` when either class is empty
/// (undefined, deliberately not 0). Win counts accumulate in integer
/// half-units, so the result is exact up to the single final division.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let num_pos = labels.iter().filter(|&&l| l).count() as u128;
    let num_neg = labels.len() as u128 - num_pos;
    if num_pos == 0 || num_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Scan ascending score groups; each positive beats every negative in a
    // lower group and half-ties with negatives in its own group.
    let mut half_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos: u128 = 0;
        let mut group_neg: u128 = 0;
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            if labels[order[j]] {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        half_wins += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Some(half_wins as f64 / (2 * num_pos * num_neg) as f64)
}

/// Relative improvement of one AUC over a baseline, in percent:
/// `((a − 0.5)/(b − 0.5) − 1) × 100`. A baseline at or below chance has no
/// signal to improve over, so it is a domain error.
pub fn rela_impr(measured: f64, base: f64) -> Result<f64, MetricsError> {
    if !(base > 0.5) {
        return Err(MetricsError::DegenerateBase { base });
    }
    Ok(((measured - 0.5) / (base - 0.5) - 1.0) * 100.0)
}

/// Summary of a non-negative lag distribution, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DelaySummary {
    pub count: usize,
    pub p50: i64,
    pub p90: i64,
    pub max: i64,
}

fn summarize(mut lags: Vec<i64>) -> Option<DelaySummary> {
    if lags.is_empty() {
        return None;
    }
    lags.sort_unstable();
    let q = |f: f64| {
        let idx = (f * (lags.len() - 1) as f64).round() as usize;
        lags[idx]
    };
    Some(DelaySummary {
        count: lags.len(),
        p50: q(0.5),
        p90: q(0.9),
        max: *lags.last().unwrap(),
    })
}

/// Label latency of one paradigm's stream: how far behind the behavior
/// (`μ − y^b`, positives only) and behind the impression (`μ − impression`)
/// its supervision arrives.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DelayStats {
    pub paradigm: String,
    /// `emit − behavior_ts` over positive labels, per task.
    pub positive_lag: [Option<DelaySummary>; 3],
    /// `emit − impression_ts` over all samples.
    pub impression_lag: Option<DelaySummary>,
}

pub fn delay_stats(
    paradigm: &str,
    samples: &[LabeledSample],
    sessions: &SessionStore,
) -> Result<DelayStats, MetricsError> {
    let mut positive: [Vec<i64>; 3] = Default::default();
    let mut impression = Vec::with_capacity(samples.len());
    for sample in samples {
        let session = sessions
            .get(&sample.session)
            .ok_or_else(|| MetricsError::UnknownSession {
                key: sample.session.clone(),
            })?;
        if let Some(imp) = session.impression_ts {
            impression.push(sample.emit_ts.since(imp));
        }
        for task in TaskKind::ALL {
            if sample.labels.get(task) == crate::windowing::TaskLabel::Positive {
                let y = session
                    .behavior_ts(task)
                    .expect("positive label implies the behavior happened");
                positive[task.index()].push(sample.emit_ts.since(y));
            }
        }
    }
    Ok(DelayStats {
        paradigm: paradigm.to_string(),
        positive_lag: positive.map(summarize),
        impression_lag: summarize(impression),
    })
}

/// One evaluated test hour.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalWindowResult {
    pub start: Timestamp,
    pub end: Timestamp,
    /// Per-task AUC; `None` when the hour had a single class (undefined,
    /// recorded as absent rather than 0).
    pub auc: [Option<f64>; 3],
    pub positives: [usize; 3],
    pub negatives: [usize; 3],
}

/// One seed's pass through the alternating train/evaluate schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub windows: Vec<EvalWindowResult>,
    /// Per-task mean AUC over the windows where it was defined.
    pub mean_auc: [Option<f64>; 3],
    /// Windows skipped per task because AUC was undefined there.
    pub undefined_windows: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParadigmEval {
    pub paradigm: String,
    pub seeds: Vec<SeedRun>,
    /// Mean over seeds of the per-seed mean AUCs.
    pub mean_auc: [Option<f64>; 3],
    /// Standard error over seeds (sample std / √n); needs ≥ 2 seeds.
    pub se_auc: [Option<f64>; 3],
}

/// Relative improvement of one paradigm over the baseline for one task;
/// `None` when either AUC is missing or the baseline is ≤ 0.5.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RelaImprRow {
    pub paradigm: String,
    pub task: String,
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub baseline: String,
    pub paradigms: Vec<ParadigmEval>,
    pub rela_impr: Vec<RelaImprRow>,
    pub delay: Vec<DelayStats>,
}

/// Evaluation timetable: five one-hour test windows by default, each
/// evaluated with the model trained on everything emitted before it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSchedule {
    pub test_start: Timestamp,
    pub hour_ms: i64,
    pub num_hours: usize,
    pub seeds: Vec<u64>,
}

impl EvalSchedule {
    pub fn new(test_start: Timestamp) -> EvalSchedule {
        EvalSchedule {
            test_start,
            hour_ms: 3_600_000,
            num_hours: 5,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.hour_ms <= 0 || self.num_hours == 0 || self.seeds.is_empty() {
            return Err(MetricsError::Schedule(
                "need a positive hour length, at least one test hour, and at least one seed"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One paradigm's label stream, already μ-sorted by the stream producer.
#[derive(Debug, Clone)]
pub struct ParadigmStream<'a> {
    pub name: String,
    pub samples: &'a [LabeledSample],
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn standard_error(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Some((var / values.len() as f64).sqrt())
}

/// Eventual ("ground truth") test target for one task, or `None` when the
/// task does not apply to the session. Click and follow are defined for
/// every impressed, exited session: positive if the behavior ever happened,
/// negative otherwise. Like only applies once the session clicked.
fn eventual_target(session: &crate::events::ImpressionSession, task: TaskKind) -> Option<bool> {
    match task {
        TaskKind::Click | TaskKind::Follow => Some(session.behavior_ts(task).is_some()),
        TaskKind::Like => session.click_ts.map(|_| session.like_ts.is_some()),
    }
}

/// Sessions evaluated in `(start, end]`: impressed, fully observed, with
/// the request inside the interval. Index order is the store's order, so
/// scoring is deterministic.
fn test_rows(
    sessions: &SessionStore,
    start: Timestamp,
    end: Timestamp,
) -> Vec<&crate::events::ImpressionSession> {
    sessions
        .iter()
        .filter(|s| {
            s.is_impressed() && !s.censored && s.request_ts > start && s.request_ts <= end
        })
        .collect()
}

/// Run the streaming comparison: per seed, train on everything emitted
/// before the first test hour, then alternately evaluate an hour and absorb
/// that hour's labels. Per-task scores are the tasks' own predicted
/// probabilities; test labels are the sessions' eventual outcomes.
pub fn streaming_eval(
    factory: &dyn Fn(u64) -> MultiTaskModel,
    streams: &[ParadigmStream<'_>],
    sessions: &SessionStore,
    schedule: &EvalSchedule,
    fit: &FitOptions,
) -> Result<EvalReport, MetricsError> {
    schedule.validate()?;
    let model_name = factory(schedule.seeds[0]).config.arch.name().to_string();
    let mut paradigms = Vec::with_capacity(streams.len());
    for stream in streams {
        let mut seed_runs = Vec::with_capacity(schedule.seeds.len());
        for &seed in &schedule.seeds {
            seed_runs.push(run_one_seed(factory, seed, stream, sessions, schedule, fit)?);
        }
        let mut mean_auc = [None; 3];
        let mut se_auc = [None; 3];
        for t in 0..3 {
            let per_seed: Vec<f64> = seed_runs.iter().filter_map(|r| r.mean_auc[t]).collect();
            mean_auc[t] = mean(&per_seed);
            se_auc[t] = standard_error(&per_seed);
        }
        paradigms.push(ParadigmEval {
            paradigm: stream.name.clone(),
            seeds: seed_runs,
            mean_auc,
            se_auc,
        });
    }

    let baseline = paradigms
        .first()
        .map(|p| p.paradigm.clone())
        .unwrap_or_default();
    let base_auc = paradigms.first().map(|p| p.mean_auc).unwrap_or_default();
    let mut rows = Vec::new();
    for p in paradigms.iter().skip(1) {
        for task in TaskKind::ALL {
            let t = task.index();
            let percent = match (p.mean_auc[t], base_auc[t]) {
                (Some(a), Some(b)) => rela_impr(a, b).ok(),
                _ => None,
            };
            rows.push(RelaImprRow {
                paradigm: p.paradigm.clone(),
                task: task.as_str().to_string(),
                percent,
            });
        }
    }

    let mut delay = Vec::with_capacity(streams.len());
    for stream in streams {
        delay.push(delay_stats(&stream.name, stream.samples, sessions)?);
    }

    Ok(EvalReport {
        model: model_name,
        baseline,
        paradigms,
        rela_impr: rows,
        delay,
    })
}

fn run_one_seed(
    factory: &dyn Fn(u64) -> MultiTaskModel,
    seed: u64,
    stream: &ParadigmStream<'_>,
    sessions: &SessionStore,
    schedule: &EvalSchedule,
    fit: &FitOptions,
) -> Result<SeedRun, MetricsError> {
    let mut model = factory(seed);
    let mut adam = model.optimizer(fit.adam);
    let samples = stream.samples;
    let mut cursor = 0usize;

    // Consume the stream strictly below `cutoff`, enforcing that nothing at
    // or past the upcoming evaluation boundary leaks into training.
    let train_through = |model: &mut MultiTaskModel,
                             adam: &mut AdamState,
                             cursor: &mut usize,
                             cutoff: Timestamp|
     -> Result<(), MetricsError> {
        let start = *cursor;
        let mut end = start;
        while end < samples.len() && samples[end].emit_ts < cutoff {
            end += 1;
        }
        if end > start {
            let last_mu = samples[end - 1].emit_ts;
            if last_mu >= cutoff {
                return Err(MetricsError::Leakage {
                    paradigm: stream.name.clone(),
                    last_mu,
                    eval_start: cutoff,
                });
            }
            crate::learner::streaming_fit(model, adam, &samples[start..end], sessions, fit, None)?;
        }
        *cursor = end;
        Ok(())
    };

    let mut windows = Vec::with_capacity(schedule.num_hours);
    for k in 0..schedule.num_hours {
        let start = Timestamp(schedule.test_start.0 + k as i64 * schedule.hour_ms);
        let end = Timestamp(start.0 + schedule.hour_ms);
        // Everything emitted before this hour is fair training material.
        train_through(&mut model, &mut adam, &mut cursor, start)?;
        if cursor > 0 && samples[cursor - 1].emit_ts >= start {
            return Err(MetricsError::Leakage {
                paradigm: stream.name.clone(),
                last_mu: samples[cursor - 1].emit_ts,
                eval_start: start,
            });
        }

        let rows = test_rows(sessions, start, end);
        let mut auc_t = [None; 3];
        let mut positives = [0usize; 3];
        let mut negatives = [0usize; 3];
        if !rows.is_empty() {
            let features: Vec<_> = rows.iter().map(|s| encode_session(&model, s)).collect();
            let probs = model.predict_batch(&features);
            for task in TaskKind::ALL {
                let t = task.index();
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for (i, session) in rows.iter().enumerate() {
                    if let Some(label) = eventual_target(session, task) {
                        scores.push(probs[[i, t]]);
                        labels.push(label);
                        if label {
                            positives[t] += 1;
                        } else {
                            negatives[t] += 1;
                        }
                    }
                }
                auc_t[t] = auc(&scores, &labels);
            }
        }
        windows.push(EvalWindowResult {
            start,
            end,
            auc: auc_t,
            positives,
            negatives,
        });
    }

    let mut mean_auc = [None; 3];
    let mut undefined = [0usize; 3];
    for t in 0..3 {
        let defined: Vec<f64> = windows.iter().filter_map(|w| w.auc[t]).collect();
        undefined[t] = windows.len() - defined.len();
        mean_auc[t] = mean(&defined);
    }
    Ok(SeedRun {
        seed,
        windows,
        mean_auc,
        undefined_windows: undefined,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV rendering: one `window` row per (paradigm, task, seed, hour), then
/// `seed_mean`, `mean`, and `se` aggregate rows; `rela_impr` rows carry the
/// improvement against the baseline paradigm.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "kind,paradigm,model,task,seed,hour,start_ts,end_ts,auc,positives,negatives,value"
    )?;
    for p in &report.paradigms {
        for run in &p.seeds {
            for (h, w) in run.windows.iter().enumerate() {
                for task in TaskKind::ALL {
                    let t = task.index();
                    writeln!(
                        out,
                        "window,{},{},{},{},{},{},{},{},{},{},",
                        p.paradigm,
                        report.model,
                        task.as_str(),
                        run.seed,
                        h,
                        w.start.0,
                        w.end.0,
                        fmt_opt(w.auc[t]),
                        w.positives[t],
                        w.negatives[t],
                    )?;
                }
            }
            for task in TaskKind::ALL {
                let t = task.index();
                writeln!(
                    out,
                    "seed_mean,{},{},{},{},,,,{},,,",
                    p.paradigm,
                    report.model,
                    task.as_str(),
                    run.seed,
                    fmt_opt(run.mean_auc[t]),
                )?;
            }
        }
        for task in TaskKind::ALL {
            let t = task.index();
            writeln!(
                out,
                "mean,{},{},{},,,,,{},,,",
                p.paradigm,
                report.model,
                task.as_str(),
                fmt_opt(p.mean_auc[t]),
            )?;
            writeln!(
                out,
                "se,{},{},{},,,,,{},,,",
                p.paradigm,
                report.model,
                task.as_str(),
                fmt_opt(p.se_auc[t]),
            )?;
        }
    }
    for row in &report.rela_impr {
        writeln!(
            out,
            "rela_impr,{},{},{},,,,,,,,{}",
            row.paradigm,
            report.model,
            row.task,
            fmt_opt(row.percent),
        )?;
    }
    out.flush()
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Quick positive-class rate per task over a stream, used by reports.
pub fn label_balance(samples: &[LabeledSample]) -> [(usize, usize); 3] {
    let mut counts = [(0usize, 0usize); 3];
    for s in samples {
        for task in TaskKind::ALL {
            match s.labels.get(task) {
                crate::windowing::TaskLabel::Positive => counts[task.index()].0 += 1,
                crate::windowing::TaskLabel::Negative => counts[task.index()].1 += 1,
                crate::windowing::TaskLabel::Absent => {}
            }
        }
    }
    counts
}

/// Map each session key to its position, for joins in reporting code.
pub fn session_index(sessions: &SessionStore) -> HashMap<SessionKey, usize> {
    sessions
        .iter()
        .enumerate()
        .map(|(i, s)| (s.key(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{ImpressionSession, LiveRoomSnapshot, UserProfile};
    use crate::learner::{Architecture, FeatureEncoding, ModelConfig};
    use crate::windowing::{produce_stream, WindowPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Brute-force pairwise AUC with the same half-integer accumulation, so
    /// agreement with the scan implementation is exact, not approximate.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| !l)
            .map(|(s, _)| *s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut half_wins: u128 = 0;
        for &p in &pos {
            for &n in &neg {
                match p.total_cmp(&n) {
                    std::cmp::Ordering::Greater => half_wins += 2,
                    std::cmp::Ordering::Equal => half_wins += 1,
                    std::cmp::Ordering::Less => {}
                }
            }
        }
        Some(half_wins as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.9], &[true, false]), Some(0.0));
        assert_eq!(auc(&[0.4, 0.4, 0.4, 0.4], &[true, false, true, false]), Some(0.5));
        assert_eq!(auc(&[0.2, 0.8], &[true, true]), None);
        assert_eq!(auc(&[], &[]), None);
    }

    #[test]
    fn auc_matches_pairwise_oracle_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(404);
        for round in 0..20 {
            let n = 50 + round * 47; // up to ~1000
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..40) as f64) / 40.0).collect();
            let labels: Vec<bool> = scores
                .iter()
                .map(|s| rng.gen_bool((0.2 + 0.6 * s).clamp(0.05, 0.95)))
                .collect();
            let fast = auc(&scores, &labels);
            let slow = pairwise_auc(&scores, &labels);
            assert_eq!(fast, slow, "round {round}: exact equality expected");
        }
    }

    #[test]
    fn rela_impr_reference_points() {
        assert!((rela_impr(0.6837, 0.6757).unwrap() - 4.55).abs() < 0.005 + 0.02);
        assert!((rela_impr(0.6924, 0.6839).unwrap() - 4.62).abs() < 0.005 + 0.02);
        assert_eq!(rela_impr(0.7, 0.7).unwrap(), 0.0);
        assert!(matches!(
            rela_impr(0.7, 0.5),
            Err(MetricsError::DegenerateBase { .. })
        ));
        assert!(matches!(
            rela_impr(0.7, 0.42),
            Err(MetricsError::DegenerateBase { .. })
        ));
    }

    /// Frozen reference grid: (baseline AUC, comparison AUC, printed percent).
    /// Positive percents are gains, negative are drops.
    const REFERENCE_IMPROVEMENTS: [(f64, f64, f64); 24] = [
        // five-minute vs one-hour base
        (0.6724, 0.6779, 3.19),
        (0.6621, 0.6656, 2.16),
        (0.6839, 0.6808, -1.69),
        (0.6757, 0.6798, 2.33),
        (0.6613, 0.6635, 1.36),
        (0.6817, 0.6842, 1.38),
        (0.6764, 0.6822, 3.29),
        (0.6646, 0.6654, 0.49),
        (0.6843, 0.6869, 1.41),
        (0.6740, 0.6791, 2.93),
        (0.6624, 0.6619, -0.31),
        (0.6804, 0.6831, 1.50),
        // sliver vs one-hour base
        (0.6724, 0.6811, 5.04),
        (0.6621, 0.6690, 4.26),
        (0.6839, 0.6924, 4.62),
        (0.6757, 0.6837, 4.55),
        (0.6613, 0.6714, 6.26),
        (0.6817, 0.6959, 7.82),
        (0.6764, 0.6855, 5.16),
        (0.6646, 0.6722, 4.61),
        (0.6843, 0.6972, 7.00),
        (0.6740, 0.6837, 5.57),
        (0.6624, 0.6686, 3.81),
        (0.6804, 0.6917, 6.26),
    ];

    #[test]
    fn rela_impr_reproduces_all_reference_cells() {
        for (i, &(base, measured, printed)) in REFERENCE_IMPROVEMENTS.iter().enumerate() {
            let got = rela_impr(measured, base).unwrap();
            assert!(
                (got - printed).abs() < 0.02 + 0.005,
                "cell {i}: ({measured} vs {base}) -> {got:.4}%, printed {printed}%"
            );
        }
    }

    #[test]
    fn delay_summary_quantiles() {
        let s = summarize((1..=100).collect()).unwrap();
        assert_eq!(s.count, 100);
        assert_eq!(s.p50, 51); // index round(0.5*99)=50 -> value 51
        assert_eq!(s.p90, 90); // index round(0.9*99)=89 -> value 90
        assert_eq!(s.max, 100);
        assert_eq!(summarize(vec![]), None);
    }

    fn session(
        i: usize,
        request_ts: i64,
        click_after: Option<i64>,
        like_after: Option<i64>,
        exit_after: i64,
    ) -> ImpressionSession {
        let user = UserProfile {
            user_id: format!("u{i:05}"),
            gender: if i % 2 == 0 { "female" } else { "male" }.into(),
            age_bucket: ["18-24", "25-34", "35-44"][i % 3].into(),
            city: format!("city{:02}", i % 4),
            click_anchor_history: vec![],
        };
        let live = LiveRoomSnapshot {
            live_id: format!("live{:03}", i % 7),
            live_type: format!("type{}", i % 2),
            anchor_id: format!("anchor{:03}", i % 5),
            anchor_gender: "female".into(),
            anchor_type: ["pro", "casual"][i % 2].into(),
            snapshot_ts: Timestamp(request_ts),
        };
        let impression_ts = request_ts + 400;
        ImpressionSession {
            user,
            live,
            request_ts: Timestamp(request_ts),
            impression_ts: Some(Timestamp(impression_ts)),
            click_ts: click_after.map(|d| Timestamp(impression_ts + d)),
            follow_ts: None,
            like_ts: like_after.map(|d| {
                Timestamp(impression_ts + click_after.unwrap_or(0) + d)
            }),
            exit_ts: Some(Timestamp(
                impression_ts
                    + exit_after
                        .max(click_after.unwrap_or(0) + like_after.unwrap_or(0) + 1),
            )),
            censored: false,
        }
    }

    /// A small world where clicking correlates with `anchor_type`, so a
    /// trained model can beat chance. Requests spread over `hours` hours.
    fn toy_world(hours: usize, per_hour: usize) -> SessionStore {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut sessions = Vec::new();
        let mut i = 0usize;
        for h in 0..hours {
            for j in 0..per_hour {
                let ts = h as i64 * 3_600_000 + j as i64 * (3_600_000 / per_hour as i64) + 17;
                // "pro" anchors (even i) click 80%, others 20%.
                let p = if i % 2 == 0 { 0.8 } else { 0.2 };
                let clicked = rng.gen_bool(p);
                let liked = clicked && rng.gen_bool(0.5);
                sessions.push(session(
                    i,
                    ts,
                    clicked.then_some(5_000),
                    liked.then_some(20_000),
                    120_000,
                ));
                i += 1;
            }
        }
        sessions.sort_by(|a, b| {
            (a.request_ts, a.user.user_id.clone()).cmp(&(b.request_ts, b.user.user_id.clone()))
        });
        SessionStore::new(sessions)
    }

    fn tiny_factory(seed_base: u64) -> impl Fn(u64) -> MultiTaskModel {
        move |seed| {
            MultiTaskModel::new(&ModelConfig {
                arch: Architecture::SharedBottom,
                encoding: FeatureEncoding {
                    id_hash_size: 64,
                    side_hash_size: 16,
                    id_width: 4,
                    side_width: 2,
                    include_user_id: false,
                    history_cap: 10,
                },
                bottom_hidden: vec![8, 4],
                num_experts: 2,
                expert_hidden: vec![8, 4],
                tower_hidden: vec![4],
                seed: seed_base ^ seed,
            })
        }
    }

    #[test]
    fn streaming_eval_is_deterministic_and_leak_free() {
        let store = toy_world(8, 40);
        let sessions: Vec<_> = store.as_slice().to_vec();
        let streams: Vec<(WindowPolicy, &str)> = vec![
            (WindowPolicy::one_hour(), "one-hour"),
            (WindowPolicy::five_minute(), "five-minute"),
            (WindowPolicy::sliver(), "sliver"),
        ];
        let produced: Vec<(String, Vec<LabeledSample>)> = streams
            .iter()
            .map(|(p, name)| (name.to_string(), produce_stream(&sessions, p).unwrap()))
            .collect();
        let paradigm_streams: Vec<ParadigmStream<'_>> = produced
            .iter()
            .map(|(name, samples)| ParadigmStream {
                name: name.clone(),
                samples,
            })
            .collect();
        let schedule = EvalSchedule {
            test_start: Timestamp(5 * 3_600_000),
            hour_ms: 3_600_000,
            num_hours: 3,
            seeds: vec![1, 2],
        };
        let fit = FitOptions {
            batch_size: 32,
            ..FitOptions::default()
        };
        let factory = tiny_factory(100);
        let report1 =
            streaming_eval(&factory, &paradigm_streams, &store, &schedule, &fit).unwrap();
        let report2 =
            streaming_eval(&factory, &paradigm_streams, &store, &schedule, &fit).unwrap();
        assert_eq!(report1, report2, "identical inputs give identical reports");

        assert_eq!(report1.paradigms.len(), 3);
        assert_eq!(report1.baseline, "one-hour");
        for p in &report1.paradigms {
            assert_eq!(p.seeds.len(), 2);
            for run in &p.seeds {
                assert_eq!(run.windows.len(), 3);
                for w in &run.windows {
                    for t in 0..3 {
                        if let Some(a) = w.auc[t] {
                            assert!((0.0..=1.0).contains(&a));
                        }
                    }
                }
            }
            // Click AUC should be defined: both classes appear each hour.
            assert!(p.mean_auc[0].is_some());
        }
        // rela_impr rows: 2 non-baseline paradigms × 3 tasks.
        assert_eq!(report1.rela_impr.len(), 6);
        // Delay invariant: the sliding stream's positives arrive within one
        // uniform window of the behavior.
        let sliver_delay = report1.delay.iter().find(|d| d.paradigm == "sliver").unwrap();
        for lag in sliver_delay.positive_lag.iter().flatten() {
            assert!(lag.max <= 30_000 && lag.max > 0);
        }
        // Fixed-from-request emits exactly one hour after the request.
        let one_hour = &produced.iter().find(|(n, _)| n == "one-hour").unwrap().1;
        for s in one_hour.iter() {
            assert_eq!(s.emit_ts.since(s.session.request_ts), 3_600_000);
        }
    }

    #[test]
    fn streaming_eval_learns_the_toy_signal() {
        let store = toy_world(8, 60);
        let sessions: Vec<_> = store.as_slice().to_vec();
        let samples = produce_stream(&sessions, &WindowPolicy::sliver()).unwrap();
        let streams = [ParadigmStream {
            name: "sliver".into(),
            samples: &samples,
        }];
        let schedule = EvalSchedule {
            test_start: Timestamp(6 * 3_600_000),
            hour_ms: 3_600_000,
            num_hours: 2,
            seeds: vec![3],
        };
        // A few hundred samples only, so train hot.
        let fit = FitOptions {
            batch_size: 16,
            adam: crate::learner::AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            ..FitOptions::default()
        };
        let report =
            streaming_eval(&tiny_factory(7), &streams, &store, &schedule, &fit).unwrap();
        let click = report.paradigms[0].mean_auc[0].unwrap();
        // Click rate is 0.8 vs 0.2 by anchor type, so the best possible AUC
        // for that binary signal is 0.8·0.8 + ½·2·0.8·0.2 = 0.80.
        assert!(
            click > 0.7,
            "anchor type determines click propensity (AUC ceiling 0.80); got {click}"
        );
    }

    #[test]
    fn undefined_windows_are_excluded_not_zeroed() {
        // Sessions only in hour 0 and hour 2; hour 1 has no test rows, and
        // hour 2's labels are single-class for follow (never positive).
        let mut sessions = Vec::new();
        for i in 0..10 {
            sessions.push(session(i, i as i64 * 1_000 + 100, Some(2_000), None, 60_000));
        }
        for i in 10..20 {
            sessions.push(session(
                i,
                2 * 3_600_000 + (i as i64 - 10) * 1_000,
                (i % 2 == 0).then_some(2_000),
                None,
                60_000,
            ));
        }
        let store = SessionStore::new(sessions.clone());
        let samples = produce_stream(&sessions, &WindowPolicy::sliver()).unwrap();
        let streams = [ParadigmStream {
            name: "sliver".into(),
            samples: &samples,
        }];
        let schedule = EvalSchedule {
            test_start: Timestamp(3_600_000),
            hour_ms: 3_600_000,
            num_hours: 2,
            seeds: vec![1],
        };
        let report = streaming_eval(
            &tiny_factory(1),
            &streams,
            &store,
            &schedule,
            &FitOptions::default(),
        )
        .unwrap();
        let run = &report.paradigms[0].seeds[0];
        assert_eq!(run.windows[0].auc, [None, None, None], "empty hour");
        assert!(run.windows[1].auc[0].is_some(), "click has both classes");
        assert_eq!(run.windows[1].auc[1], None, "follow never positive");
        // Means skip the undefined windows instead of counting them as 0.
        assert_eq!(run.undefined_windows[0], 1);
        assert_eq!(run.undefined_windows[1], 2);
        assert_eq!(run.mean_auc[1], None);
        assert_eq!(run.mean_auc[0], run.windows[1].auc[0]);
    }

    #[test]
    fn delay_stats_fixed_window_lag_is_constant() {
        let sessions: Vec<_> = (0..30)
            .map(|i| session(i, i as i64 * 10_000, Some(3_000), None, 90_000))
            .collect();
        let store = SessionStore::new(sessions.clone());
        let samples = produce_stream(&sessions, &WindowPolicy::five_minute()).unwrap();
        let stats = delay_stats("five-minute", &samples, &store).unwrap();
        let imp = stats.impression_lag.unwrap();
        // Every emit is exactly the window length after the impression.
        assert_eq!(imp.p50, 300_000);
        assert_eq!(imp.max, 300_000);
        let unknown = delay_stats("x", &samples, &SessionStore::default());
        assert!(matches!(unknown, Err(MetricsError::UnknownSession { .. })));
    }

    #[test]
    fn report_writers_are_byte_stable() {
        let store = toy_world(4, 20);
        let sessions: Vec<_> = store.as_slice().to_vec();
        let samples = produce_stream(&sessions, &WindowPolicy::sliver()).unwrap();
        let streams = [ParadigmStream {
            name: "sliver".into(),
            samples: &samples,
        }];
        let schedule = EvalSchedule {
            test_start: Timestamp(2 * 3_600_000),
            hour_ms: 3_600_000,
            num_hours: 2,
            seeds: vec![1],
        };
        let report = streaming_eval(
            &tiny_factory(2),
            &streams,
            &store,
            &schedule,
            &FitOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv1 = dir.path().join("r1.csv");
        let csv2 = dir.path().join("r2.csv");
        write_report_csv(&csv1, &report).unwrap();
        write_report_csv(&csv2, &report).unwrap();
        assert_eq!(
            std::fs::read(&csv1).unwrap(),
            std::fs::read(&csv2).unwrap()
        );
        let header = std::fs::read_to_string(&csv1).unwrap();
        assert!(header.starts_with("kind,paradigm,model,task,seed,hour,"));

        let json1 = dir.path().join("r1.json");
        let json2 = dir.path().join("r2.json");
        write_report_json(&json1, &report).unwrap();
        write_report_json(&json2, &report).unwrap();
        assert_eq!(
            std::fs::read(&json1).unwrap(),
            std::fs::read(&json2).unwrap()
        );
        let parsed: EvalReport =
            serde_json::from_slice(&std::fs::read(&json1).unwrap()).unwrap();
        assert_eq!(parsed, report);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // AUC depends only on the score ordering (tie groups included),
            // so any increasing affine map leaves it bit-identical, flipping
            // the labels mirrors it around ½, and it stays inside [0, 1].
            #[test]
            fn auc_is_ordinal_flip_symmetric_and_bounded(
                pairs in proptest::collection::vec((0u8..5, any::<bool>()), 1..200),
                a in 0.1f64..10.0,
                b in -5.0f64..5.0,
            ) {
                let scores: Vec<f64> = pairs.iter().map(|&(s, _)| f64::from(s)).collect();
                let labels: Vec<bool> = pairs.iter().map(|&(_, l)| l).collect();
                let base = auc(&scores, &labels);

                let mapped: Vec<f64> = scores.iter().map(|&x| a * x + b).collect();
                prop_assert_eq!(auc(&mapped, &labels), base);

                let flipped: Vec<bool> = labels.iter().map(|&l| !l).collect();
                match (base, auc(&scores, &flipped)) {
                    (Some(x), Some(y)) => {
                        prop_assert!((x + y - 1.0).abs() < 1e-12);
                        prop_assert!((0.0..=1.0).contains(&x));
                    }
                    (None, None) => {
                        let kinds: std::collections::HashSet<bool> =
                            labels.iter().copied().collect();
                        prop_assert!(kinds.len() < 2, "None only for one-class input");
                    }
                    (got, other) => {
                        return Err(TestCaseError::fail(format!(
                            "flip changed definedness: {got:?} vs {other:?}"
                        )));
                    }
                }
            }
        }
    }
}
