//! Serving-loop simulator for re-recommendation. The first request caches a
//! candidate list; while the chosen room is still unimpressed, a refresh pass
//! re-scores the cached candidates on fresh feature snapshots every
//! `period_ms` and replaces the pending choice. The experiment measures how
//! stale the impressed features are and what the swap is worth in
//! ground-truth click rate, with the refresh policy on versus off on
//! identical episodes.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{LiveRoomSnapshot, Timestamp, UserProfile};
use crate::learner::{encode, LossWeights, MultiTaskModel};
use crate::simgen::{GroundTruth, TruthError, UserSpec, World};

pub const DEFAULT_REFRESH_PERIOD_MS: i64 = 30_000;
pub const DEFAULT_CANDIDATES: usize = 8;

#[derive(Debug, Error)]
pub enum RerecoError {
    #[error("invalid re-recommendation setup: {0}")]
    Config(String),
    #[error("episode {index} differs between the paired runs")]
    Unpaired { index: usize },
    #[error(transparent)]
    Truth(#[from] TruthError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether and how often the pending recommendation is re-scored while the
/// client has not yet rendered it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerecoPolicy {
    pub enabled: bool,
    pub period_ms: i64,
}

impl Default for RerecoPolicy {
    fn default() -> RerecoPolicy {
        RerecoPolicy {
            enabled: true,
            period_ms: DEFAULT_REFRESH_PERIOD_MS,
        }
    }
}

impl RerecoPolicy {
    pub fn off() -> RerecoPolicy {
        RerecoPolicy {
            enabled: false,
            ..RerecoPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<(), RerecoError> {
        if self.period_ms <= 0 {
            return Err(RerecoError::Config(format!(
                "refresh period must be positive, got {} ms",
                self.period_ms
            )));
        }
        Ok(())
    }
}

/// The randomness of one serving episode, fixed before either policy runs so
/// the on/off comparison is paired: same user, same candidates, same
/// exogenous impression delay. Re-recommendation freshens the choice, not
/// the client's render time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub user_idx: usize,
    /// Indices into `World::rooms`; distinct, in draw order.
    pub candidate_rooms: Vec<usize>,
    pub request_ts: Timestamp,
    pub impression_ts: Timestamp,
}

const EPISODE_STREAM: u64 = 0x5114_E12D_0000_0003;

/// Draws independent serving episodes from the world: uniform user, uniform
/// request time, `candidates` distinct rooms (the rank stage's top-N), and an
/// impression delay from the generator's own delay distribution.
pub fn draw_episodes(
    world: &World,
    count: usize,
    candidates: usize,
    seed: u64,
) -> Result<Vec<EpisodeSpec>, RerecoError> {
    if candidates == 0 || candidates > world.rooms.len() {
        return Err(RerecoError::Config(format!(
            "need between 1 and {} candidates per request, got {candidates}",
            world.rooms.len()
        )));
    }
    let horizon = world.config.horizon_ms;
    if horizon < 2 {
        return Err(RerecoError::Config("horizon too short for episodes".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ EPISODE_STREAM);
    let room_ids: Vec<usize> = (0..world.rooms.len()).collect();
    let specs = (0..count)
        .map(|_| {
            let user_idx = rng.gen_range(0..world.users.len());
            let request_ts = rng.gen_range(1..horizon);
            let tau = world.config.impression_delay.sample(&mut rng);
            // Clamp to the trajectory horizon so ground-truth lookups at the
            // impression stay defined; the pairing is unaffected because both
            // policies replay the same spec.
            let impression_ts = (request_ts + tau).min(horizon);
            let candidate_rooms = room_ids
                .choose_multiple(&mut rng, candidates)
                .copied()
                .collect();
            EpisodeSpec {
                user_idx,
                candidate_rooms,
                request_ts: Timestamp(request_ts),
                impression_ts: Timestamp(impression_ts),
            }
        })
        .collect();
    Ok(specs)
}

/// Serves room features as the online feature store would: the room's
/// attributes as of `ts`, never anything newer.
pub trait FeatureClock {
    fn snapshot(&self, room_idx: usize, ts: Timestamp) -> LiveRoomSnapshot;
}

/// The generator's content-state trajectory as a feature clock.
pub struct WorldClock<'a> {
    pub world: &'a World,
}

impl FeatureClock for WorldClock<'_> {
    fn snapshot(&self, room_idx: usize, ts: Timestamp) -> LiveRoomSnapshot {
        self.world.rooms[room_idx].snapshot(ts, self.world.config.expose_state_as_live_type)
    }
}

/// Ranks one candidate for one user; higher wins. Ties break toward the
/// earlier candidate so runs are deterministic.
pub trait CandidateScorer {
    fn score(&self, user: &UserProfile, candidate: &LiveRoomSnapshot) -> f64;
}

/// Scores with a trained multi-task model's fused probability.
pub struct ModelScorer<'a> {
    pub model: &'a MultiTaskModel,
    pub weights: LossWeights,
}

impl CandidateScorer for ModelScorer<'_> {
    fn score(&self, user: &UserProfile, candidate: &LiveRoomSnapshot) -> f64 {
        let features = encode(user, candidate, &self.model.config.encoding);
        self.model.score(&features, &self.weights)
    }
}

/// One refresh pass: when it ran, what it chose, and how fresh the features
/// it chose from were.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub refresh_ts: Timestamp,
    pub chosen_live_id: String,
    pub snapshot_ts: Timestamp,
}

/// A simulated request→impression episode after serving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingEpisode {
    pub user: UserProfile,
    /// Candidate snapshots cached at the first request; immutable afterwards.
    pub candidates: Vec<LiveRoomSnapshot>,
    pub request_ts: Timestamp,
    pub impression_ts: Timestamp,
    pub refresh_log: Vec<RefreshRecord>,
    /// What the client finally rendered.
    pub impressed_live_id: String,
    /// Feature snapshot the impressed choice was scored on.
    pub impressed_snapshot_ts: Timestamp,
}

impl ServingEpisode {
    /// Age of the impressed choice's features at render time.
    pub fn staleness_ms(&self) -> i64 {
        self.impression_ts.since(self.impressed_snapshot_ts)
    }
}

/// Episodes that survived serving plus the count that could not be served.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutcome {
    pub episodes: Vec<ServingEpisode>,
    pub skipped_empty: usize,
}

/// Builds the scoring profile for a generator user. Click-history features
/// are left empty: candidate freshness, not user state, is the variable
/// under test here.
pub fn user_profile(spec: &UserSpec) -> UserProfile {
    UserProfile {
        user_id: spec.user_id.clone(),
        gender: spec.gender.clone(),
        age_bucket: spec.age_bucket.clone(),
        city: spec.city.clone(),
        click_anchor_history: Vec::new(),
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Runs the serving loop over the episode specs. With the policy off, the
/// impression shows the first-request choice scored on request-time
/// snapshots. With it on, every tick `request_ts + i·period < impression_ts`
/// (i ≥ 1) re-scores the cached candidate list on snapshots taken at the
/// tick and replaces the pending choice.
pub fn simulate_serving(
    specs: &[EpisodeSpec],
    world: &World,
    scorer: &dyn CandidateScorer,
    policy: &RerecoPolicy,
    clock: &dyn FeatureClock,
) -> Result<SimulationOutcome, RerecoError> {
    policy.validate()?;
    let mut episodes = Vec::with_capacity(specs.len());
    let mut skipped_empty = 0usize;

    for spec in specs {
        if spec.candidate_rooms.is_empty() {
            skipped_empty += 1;
            continue;
        }
        if spec.user_idx >= world.users.len() {
            return Err(RerecoError::Config(format!(
                "episode references user index {} outside the world",
                spec.user_idx
            )));
        }
        let user = user_profile(&world.users[spec.user_idx]);

        let score_at = |ts: Timestamp| -> (usize, Vec<LiveRoomSnapshot>) {
            let snaps: Vec<LiveRoomSnapshot> = spec
                .candidate_rooms
                .iter()
                .map(|&r| clock.snapshot(r, ts))
                .collect();
            let scores: Vec<f64> = snaps.iter().map(|s| scorer.score(&user, s)).collect();
            (argmax(&scores), snaps)
        };

        let (first_pick, cached) = score_at(spec.request_ts);
        let mut impressed_live_id = cached[first_pick].live_id.clone();
        let mut impressed_snapshot_ts = spec.request_ts;
        let mut refresh_log = Vec::new();

        if policy.enabled {
            for i in 1.. {
                let tick = spec.request_ts.ms() + i * policy.period_ms;
                if tick >= spec.impression_ts.ms() {
                    break;
                }
                let ts = Timestamp(tick);
                let (pick, snaps) = score_at(ts);
                impressed_live_id = snaps[pick].live_id.clone();
                impressed_snapshot_ts = ts;
                refresh_log.push(RefreshRecord {
                    refresh_ts: ts,
                    chosen_live_id: impressed_live_id.clone(),
                    snapshot_ts: ts,
                });
            }
        }

        episodes.push(ServingEpisode {
            user,
            candidates: cached,
            request_ts: spec.request_ts,
            impression_ts: spec.impression_ts,
            refresh_log,
            impressed_live_id,
            impressed_snapshot_ts,
        });
    }

    Ok(SimulationOutcome {
        episodes,
        skipped_empty,
    })
}

/// Per-policy aggregate over one run's episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub episodes: usize,
    pub mean_staleness_ms: f64,
    pub max_staleness_ms: i64,
    pub mean_refreshes: f64,
    /// Mean ground-truth click rate of the impressed choice at impression
    /// time.
    pub mean_true_ctr: f64,
}

/// Aggregates one policy's run on its own (no pairing).
pub fn policy_summary(
    episodes: &[ServingEpisode],
    truth: &GroundTruth,
) -> Result<PolicySummary, RerecoError> {
    let n = episodes.len();
    let mut staleness_sum = 0.0;
    let mut max_staleness = 0i64;
    let mut refreshes = 0usize;
    let mut ctr_sum = 0.0;
    for ep in episodes {
        let lag = ep.staleness_ms();
        staleness_sum += lag as f64;
        max_staleness = max_staleness.max(lag);
        refreshes += ep.refresh_log.len();
        ctr_sum += truth.true_ctr(&ep.impressed_live_id, ep.impression_ts)?;
    }
    let denom = n.max(1) as f64;
    Ok(PolicySummary {
        episodes: n,
        mean_staleness_ms: staleness_sum / denom,
        max_staleness_ms: max_staleness,
        mean_refreshes: refreshes as f64 / denom,
        mean_true_ctr: ctr_sum / denom,
    })
}

/// Paired on-versus-off comparison over identical episode randomness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StalenessReport {
    pub on: PolicySummary,
    pub off: PolicySummary,
    /// Mean of the per-episode true-CTR differences (on − off).
    pub ctr_diff_mean: f64,
    /// Standard error of that mean (sample std / √n; 0 when n < 2).
    pub ctr_diff_se: f64,
    /// `ctr_diff_mean / ctr_diff_se`; exactly 0 when every paired difference
    /// is 0 (nothing to gain, e.g. a stationary world).
    pub ctr_diff_z: f64,
}

/// Summarizes a paired run. `on` and `off` must replay the same specs in the
/// same order: same user, same request and impression times per index.
pub fn staleness_report(
    on: &[ServingEpisode],
    off: &[ServingEpisode],
    truth: &GroundTruth,
) -> Result<StalenessReport, RerecoError> {
    if on.len() != off.len() {
        return Err(RerecoError::Unpaired { index: on.len().min(off.len()) });
    }
    let mut diffs = Vec::with_capacity(on.len());
    for (i, (a, b)) in on.iter().zip(off).enumerate() {
        if a.user.user_id != b.user.user_id
            || a.request_ts != b.request_ts
            || a.impression_ts != b.impression_ts
        {
            return Err(RerecoError::Unpaired { index: i });
        }
        let ctr_on = truth.true_ctr(&a.impressed_live_id, a.impression_ts)?;
        let ctr_off = truth.true_ctr(&b.impressed_live_id, b.impression_ts)?;
        diffs.push(ctr_on - ctr_off);
    }
    let n = diffs.len() as f64;
    let mean = if diffs.is_empty() { 0.0 } else { diffs.iter().sum::<f64>() / n };
    let se = if diffs.len() < 2 {
        0.0
    } else {
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    let z = if se == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(mean)
        }
    } else {
        mean / se
    };
    Ok(StalenessReport {
        on: policy_summary(on, truth)?,
        off: policy_summary(off, truth)?,
        ctr_diff_mean: mean,
        ctr_diff_se: se,
        ctr_diff_z: z,
    })
}

/// Writes the report as CSV: one metric per row, on/off columns, paired
/// statistics in the last column.
pub fn write_staleness_csv(path: &Path, report: &StalenessReport) -> Result<(), RerecoError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric,policy_on,policy_off,paired")?;
    writeln!(out, "episodes,{},{},", report.on.episodes, report.off.episodes)?;
    writeln!(
        out,
        "mean_staleness_ms,{},{},",
        report.on.mean_staleness_ms, report.off.mean_staleness_ms
    )?;
    writeln!(
        out,
        "max_staleness_ms,{},{},",
        report.on.max_staleness_ms, report.off.max_staleness_ms
    )?;
    writeln!(
        out,
        "mean_refreshes,{},{},",
        report.on.mean_refreshes, report.off.mean_refreshes
    )?;
    writeln!(
        out,
        "mean_true_ctr,{},{},{}",
        report.on.mean_true_ctr, report.off.mean_true_ctr, report.ctr_diff_mean
    )?;
    writeln!(out, "ctr_diff_se,,,{}", report.ctr_diff_se)?;
    writeln!(out, "ctr_diff_z,,,{}", report.ctr_diff_z)?;
    out.flush()?;
    Ok(())
}

/// Writes a single policy's summary as CSV (one data row).
pub fn write_policy_csv(
    path: &Path,
    policy: &str,
    summary: &PolicySummary,
) -> Result<(), RerecoError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "policy,episodes,mean_staleness_ms,max_staleness_ms,mean_refreshes,mean_true_ctr"
    )?;
    writeln!(
        out,
        "{policy},{},{},{},{},{}",
        summary.episodes,
        summary.mean_staleness_ms,
        summary.max_staleness_ms,
        summary.mean_refreshes,
        summary.mean_true_ctr
    )?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{GeneratorConfig, TaskRates};

    /// Scores a room by the content state its `live_type` exposes; monotone
    /// in the generator's state click rates, so it is an oracle ranker for
    /// worlds built with `expose_state_as_live_type`.
    struct StateScorer;

    impl CandidateScorer for StateScorer {
        fn score(&self, _user: &UserProfile, candidate: &LiveRoomSnapshot) -> f64 {
            candidate
                .live_type
                .strip_prefix("state")
                .and_then(|s| s.parse::<f64>().ok())
                .unwrap_or(0.0)
        }
    }

    struct ConstScorer;

    impl CandidateScorer for ConstScorer {
        fn score(&self, _user: &UserProfile, _candidate: &LiveRoomSnapshot) -> f64 {
            0.0
        }
    }

    fn small_world(shift_period_ms: i64, states: usize, expose: bool) -> World {
        let rates: Vec<Vec<TaskRates>> = (0..4)
            .map(|seg| {
                (0..states)
                    .map(|s| TaskRates {
                        // Spread clicks across states so freshness matters;
                        // keep every rate a probability.
                        click: 0.1 + 0.8 * s as f64 / states.max(2) as f64
                            + 0.01 * seg as f64,
                        follow: 0.5,
                        like: 0.5,
                    })
                    .collect()
            })
            .collect();
        World::build(GeneratorConfig {
            num_users: 40,
            num_lives: 12,
            num_anchors: 6,
            horizon_ms: 4 * 3_600_000,
            content_shift_period_ms: shift_period_ms,
            base_rates: rates,
            expose_state_as_live_type: expose,
            seed: 99,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    fn truth_for(world: &World) -> GroundTruth {
        GroundTruth {
            horizon: Timestamp(world.config.horizon_ms),
            state_click_rate: world.state_click_rate(),
            rooms: world.ground_truth_rooms(),
            sessions: Vec::new(),
        }
    }

    fn fixed_spec(world: &World, request_ms: i64, impression_ms: i64) -> EpisodeSpec {
        EpisodeSpec {
            user_idx: 0,
            candidate_rooms: (0..world.rooms.len().min(8)).collect(),
            request_ts: Timestamp(request_ms),
            impression_ts: Timestamp(impression_ms),
        }
    }

    #[test]
    fn staleness_matches_hand_arithmetic() {
        let world = small_world(9_000_000, 4, false);
        let clock = WorldClock { world: &world };
        let spec = vec![fixed_spec(&world, 0, 400_000)];

        let on = RerecoPolicy { enabled: true, period_ms: 30_000 };
        let got = simulate_serving(&spec, &world, &ConstScorer, &on, &clock).unwrap();
        let ep = &got.episodes[0];
        assert_eq!(ep.refresh_log.len(), 13, "ticks at 30s..390s");
        assert_eq!(ep.refresh_log.last().unwrap().refresh_ts, Timestamp(390_000));
        assert_eq!(ep.staleness_ms(), 10_000);

        let off = RerecoPolicy::off();
        let got = simulate_serving(&spec, &world, &ConstScorer, &off, &clock).unwrap();
        let ep = &got.episodes[0];
        assert!(ep.refresh_log.is_empty());
        assert_eq!(ep.impressed_snapshot_ts, Timestamp(0));
        assert_eq!(ep.staleness_ms(), 400_000);

        let slow = RerecoPolicy { enabled: true, period_ms: 600_000 };
        let got = simulate_serving(&spec, &world, &ConstScorer, &slow, &clock).unwrap();
        let ep = &got.episodes[0];
        assert!(ep.refresh_log.is_empty(), "period longer than the delay");
        assert_eq!(ep.staleness_ms(), 400_000);
    }

    #[test]
    fn refresh_log_is_increasing_and_inside_the_episode() {
        let world = small_world(120_000, 4, true);
        let clock = WorldClock { world: &world };
        let specs = draw_episodes(&world, 200, 5, 7).unwrap();
        let policy = RerecoPolicy::default();
        let got = simulate_serving(&specs, &world, &StateScorer, &policy, &clock).unwrap();
        assert_eq!(got.episodes.len(), specs.len());
        assert_eq!(got.skipped_empty, 0);
        for (ep, spec) in got.episodes.iter().zip(&specs) {
            assert_eq!(ep.candidates.len(), 5);
            for snap in &ep.candidates {
                assert_eq!(snap.snapshot_ts, spec.request_ts, "cached at first request");
            }
            let mut prev = ep.request_ts.ms();
            for rec in &ep.refresh_log {
                assert!(rec.refresh_ts.ms() > prev, "strictly increasing");
                assert!(rec.refresh_ts < ep.impression_ts, "no future snapshots");
                assert_eq!(rec.snapshot_ts, rec.refresh_ts);
                prev = rec.refresh_ts.ms();
            }
            assert!(ep.staleness_ms() <= policy.period_ms);
            assert!(ep.staleness_ms() >= 0);
            if let Some(last) = ep.refresh_log.last() {
                assert_eq!(ep.impressed_snapshot_ts, last.snapshot_ts);
                assert_eq!(ep.impressed_live_id, last.chosen_live_id);
            } else {
                assert_eq!(ep.impressed_snapshot_ts, ep.request_ts);
            }
        }
    }

    #[test]
    fn draw_episodes_is_deterministic_and_in_bounds() {
        let world = small_world(9_000_000, 4, false);
        let a = draw_episodes(&world, 50, 8, 3).unwrap();
        let b = draw_episodes(&world, 50, 8, 3).unwrap();
        assert_eq!(a, b);
        let c = draw_episodes(&world, 50, 8, 4).unwrap();
        assert_ne!(a, c, "different seed, different traffic");
        for spec in &a {
            assert!(spec.user_idx < world.users.len());
            assert!(spec.request_ts.ms() >= 1);
            assert!(spec.request_ts < spec.impression_ts || spec.impression_ts == Timestamp(world.config.horizon_ms));
            assert!(spec.impression_ts.ms() <= world.config.horizon_ms);
            let mut rooms = spec.candidate_rooms.clone();
            rooms.sort_unstable();
            rooms.dedup();
            assert_eq!(rooms.len(), 8, "candidates are distinct");
            assert!(rooms.iter().all(|&r| r < world.rooms.len()));
        }
        assert!(draw_episodes(&world, 1, 0, 3).is_err());
        assert!(draw_episodes(&world, 1, world.rooms.len() + 1, 3).is_err());
    }

    #[test]
    fn stationary_world_gains_exactly_nothing() {
        // One content state: snapshots never change, so every refresh
        // re-derives the first-request choice and the paired difference is
        // identically zero.
        let world = small_world(9_000_000, 1, true);
        let truth = truth_for(&world);
        let clock = WorldClock { world: &world };
        let specs = draw_episodes(&world, 300, 6, 11).unwrap();
        let on = simulate_serving(&specs, &world, &StateScorer, &RerecoPolicy::default(), &clock)
            .unwrap();
        let off =
            simulate_serving(&specs, &world, &StateScorer, &RerecoPolicy::off(), &clock).unwrap();
        for (a, b) in on.episodes.iter().zip(&off.episodes) {
            assert_eq!(a.impressed_live_id, b.impressed_live_id);
        }
        let report = staleness_report(&on.episodes, &off.episodes, &truth).unwrap();
        assert_eq!(report.ctr_diff_mean, 0.0);
        assert_eq!(report.ctr_diff_se, 0.0);
        assert_eq!(report.ctr_diff_z, 0.0);
        assert_eq!(report.on.mean_true_ctr, report.off.mean_true_ctr);
        assert!(report.on.mean_staleness_ms <= 30_000.0);
        assert!(report.off.mean_staleness_ms > report.on.mean_staleness_ms);
    }

    #[test]
    fn drifting_world_rewards_the_refresh() {
        // Content shifts every ~2 minutes while impressions land ~5 minutes
        // after the request: the first-request choice is usually obsolete by
        // render time, so re-scoring on fresh state must win on average.
        let mut config = GeneratorConfig {
            num_users: 60,
            num_lives: 24,
            num_anchors: 12,
            horizon_ms: 6 * 3_600_000,
            content_shift_period_ms: 120_000,
            expose_state_as_live_type: true,
            seed: 5,
            ..GeneratorConfig::default()
        };
        config.impression_delay.median_ms = 300_000.0;
        config.impression_delay.sigma = 0.5;
        let world = World::build(config).unwrap();
        let truth = truth_for(&world);
        let clock = WorldClock { world: &world };
        let specs = draw_episodes(&world, 2_000, 8, 23).unwrap();
        let on = simulate_serving(&specs, &world, &StateScorer, &RerecoPolicy::default(), &clock)
            .unwrap();
        let off =
            simulate_serving(&specs, &world, &StateScorer, &RerecoPolicy::off(), &clock).unwrap();
        let report = staleness_report(&on.episodes, &off.episodes, &truth).unwrap();
        assert!(
            report.ctr_diff_mean > 0.0 && report.ctr_diff_z > 2.326,
            "freshness should pay off: diff {} z {}",
            report.ctr_diff_mean,
            report.ctr_diff_z
        );
        assert!(report.on.max_staleness_ms <= 30_000);
        assert!(report.off.mean_staleness_ms > report.on.mean_staleness_ms);
    }

    #[test]
    fn model_scorer_agrees_with_the_model() {
        use crate::learner::{fusion_score, Architecture, FeatureEncoding, ModelConfig};
        let world = small_world(9_000_000, 4, false);
        let config = ModelConfig {
            arch: Architecture::SharedBottom,
            encoding: FeatureEncoding {
                id_hash_size: 64,
                side_hash_size: 16,
                id_width: 4,
                side_width: 2,
                ..FeatureEncoding::default()
            },
            bottom_hidden: vec![8, 4],
            tower_hidden: vec![4],
            seed: 2,
            ..ModelConfig::default()
        };
        let model = MultiTaskModel::new(&config);
        let weights = LossWeights::default();
        let scorer = ModelScorer { model: &model, weights: weights.clone() };
        let user = user_profile(&world.users[3]);
        let snap = world.rooms[5].snapshot(Timestamp(1_000), false);
        let by_scorer = scorer.score(&user, &snap);
        let probs = model.predict(&encode(&user, &snap, &config.encoding));
        assert_eq!(by_scorer, fusion_score(probs, &weights));
    }

    #[test]
    fn unpaired_runs_are_rejected() {
        let world = small_world(9_000_000, 2, false);
        let truth = truth_for(&world);
        let clock = WorldClock { world: &world };
        let specs = draw_episodes(&world, 4, 3, 1).unwrap();
        let on = simulate_serving(&specs, &world, &ConstScorer, &RerecoPolicy::default(), &clock)
            .unwrap();
        let off =
            simulate_serving(&specs, &world, &ConstScorer, &RerecoPolicy::off(), &clock).unwrap();
        assert!(staleness_report(&on.episodes, &off.episodes[..3], &truth).is_err());
        let mut shuffled = off.episodes.clone();
        shuffled.swap(0, 1);
        assert!(matches!(
            staleness_report(&on.episodes, &shuffled, &truth),
            Err(RerecoError::Unpaired { .. })
        ));
    }

    #[test]
    fn empty_candidate_lists_are_skipped_with_count() {
        let world = small_world(9_000_000, 2, false);
        let clock = WorldClock { world: &world };
        let mut specs = vec![fixed_spec(&world, 0, 60_000), fixed_spec(&world, 0, 60_000)];
        specs[1].candidate_rooms.clear();
        let got =
            simulate_serving(&specs, &world, &ConstScorer, &RerecoPolicy::default(), &clock)
                .unwrap();
        assert_eq!(got.episodes.len(), 1);
        assert_eq!(got.skipped_empty, 1);
    }

    #[test]
    fn invalid_period_is_rejected() {
        let policy = RerecoPolicy { enabled: true, period_ms: 0 };
        assert!(policy.validate().is_err());
        let world = small_world(9_000_000, 2, false);
        let clock = WorldClock { world: &world };
        assert!(simulate_serving(&[], &world, &ConstScorer, &policy, &clock).is_err());
    }

    #[test]
    fn staleness_csv_is_byte_stable() {
        let world = small_world(120_000, 4, true);
        let truth = truth_for(&world);
        let clock = WorldClock { world: &world };
        let specs = draw_episodes(&world, 40, 4, 9).unwrap();
        let on = simulate_serving(&specs, &world, &StateScorer, &RerecoPolicy::default(), &clock)
            .unwrap();
        let off =
            simulate_serving(&specs, &world, &StateScorer, &RerecoPolicy::off(), &clock).unwrap();
        let report = staleness_report(&on.episodes, &off.episodes, &truth).unwrap();

        let dir = std::env::temp_dir().join(format!("rereco-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let a = dir.join("a.csv");
        let b = dir.join("b.csv");
        write_staleness_csv(&a, &report).unwrap();
        write_staleness_csv(&b, &report).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());
        let text = String::from_utf8(bytes_a).unwrap();
        assert!(text.starts_with("metric,policy_on,policy_off,paired\n"));
        assert!(text.lines().any(|l| l.starts_with("ctr_diff_z,")));
        std::fs::remove_dir_all(&dir).ok();
    }
}
