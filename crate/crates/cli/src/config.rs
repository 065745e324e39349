//! Experiment configuration. One TOML file describes the whole experiment —
//! generator, paradigm list, model, fitting, evaluation schedule, and the
//! re-recommendation study — and is persisted beside every artifact it
//! produces. CLI flags override file values; a directory whose snapshot
//! disagrees with the effective config is refused rather than silently
//! mixed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sliver_core::learner::{Architecture, FitOptions, ModelConfig};
use sliver_core::metrics::EvalSchedule;
use sliver_core::simgen::GeneratorConfig;
use sliver_core::windowing::WindowPolicy;
use sliver_core::{DurationMs, Timestamp};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParadigmKind {
    OneHour,
    FiveMinute,
    Sliver,
}

impl ParadigmKind {
    pub const ALL: [ParadigmKind; 3] =
        [ParadigmKind::OneHour, ParadigmKind::FiveMinute, ParadigmKind::Sliver];

    pub fn parse(s: &str) -> Result<ParadigmKind, CliError> {
        match s {
            "one-hour" => Ok(ParadigmKind::OneHour),
            "five-minute" => Ok(ParadigmKind::FiveMinute),
            "sliver" => Ok(ParadigmKind::Sliver),
            other => Err(CliError::Usage(format!(
                "unknown paradigm '{other}' (expected one-hour, five-minute, or sliver)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParadigmKind::OneHour => "one-hour",
            ParadigmKind::FiveMinute => "five-minute",
            ParadigmKind::Sliver => "sliver",
        }
    }

    fn default_window_ms(self) -> i64 {
        match self {
            ParadigmKind::OneHour => 3_600_000,
            ParadigmKind::FiveMinute => 300_000,
            ParadigmKind::Sliver => 30_000,
        }
    }
}

/// One labeling paradigm with its parameters; omitted fields take the
/// paradigm's canonical values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParadigmSpec {
    pub kind: ParadigmKind,
    pub window_ms: Option<i64>,
    /// Uniform grid epoch; sliding paradigm only.
    pub t_uni_ms: Option<i64>,
}

impl ParadigmSpec {
    pub fn of(kind: ParadigmKind) -> ParadigmSpec {
        ParadigmSpec {
            kind,
            window_ms: None,
            t_uni_ms: None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn policy(&self) -> Result<WindowPolicy, CliError> {
        let w = self.window_ms.unwrap_or_else(|| self.kind.default_window_ms());
        if w <= 0 {
            return Err(CliError::Usage(format!(
                "paradigm {} needs a positive window, got {w} ms",
                self.name()
            )));
        }
        if self.t_uni_ms.is_some() && self.kind != ParadigmKind::Sliver {
            return Err(CliError::Usage(format!(
                "t_uni only applies to the sliver paradigm, not {}",
                self.name()
            )));
        }
        Ok(match self.kind {
            ParadigmKind::OneHour => WindowPolicy::FixedFromRequest { w: DurationMs(w) },
            ParadigmKind::FiveMinute => WindowPolicy::FixedFromImpression { w: DurationMs(w) },
            ParadigmKind::Sliver => WindowPolicy::Sliding {
                w: DurationMs(w),
                t_uni: Timestamp(self.t_uni_ms.unwrap_or(0)),
            },
        })
    }
}

/// Evaluation timetable settings; `test_start_ms` defaults to leaving the
/// last `num_hours` windows of the horizon for testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub test_start_ms: Option<i64>,
    pub hour_ms: i64,
    pub num_hours: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> EvalSettings {
        EvalSettings {
            test_start_ms: None,
            hour_ms: 3_600_000,
            num_hours: 5,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl EvalSettings {
    pub fn schedule(&self, generator: &GeneratorConfig) -> Result<EvalSchedule, CliError> {
        let test_start = self
            .test_start_ms
            .unwrap_or(generator.horizon_ms - self.num_hours as i64 * self.hour_ms);
        if test_start <= 0 {
            return Err(CliError::Usage(format!(
                "evaluation needs training time before it: test_start {test_start} ms \
                 does not fit a {} ms horizon",
                generator.horizon_ms
            )));
        }
        let schedule = EvalSchedule {
            test_start: Timestamp(test_start),
            hour_ms: self.hour_ms,
            num_hours: self.num_hours,
            seeds: self.seeds.clone(),
        };
        schedule
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(schedule)
    }
}

/// Re-recommendation study settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerecoSettings {
    pub period_ms: i64,
    pub episodes: usize,
    /// Rank-stage top-N cached at the first request.
    pub candidates: usize,
    pub seed: u64,
}

impl Default for RerecoSettings {
    fn default() -> RerecoSettings {
        RerecoSettings {
            period_ms: 30_000,
            episodes: 10_000,
            candidates: 8,
            seed: 23,
        }
    }
}

/// Which architectures `compare` sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSettings {
    pub archs: Vec<Architecture>,
}

impl Default for CompareSettings {
    fn default() -> CompareSettings {
        CompareSettings {
            archs: vec![Architecture::SharedBottom, Architecture::Mmoe],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub paradigms: Vec<ParadigmSpec>,
    pub model: ModelConfig,
    pub fit: FitOptions,
    pub eval: EvalSettings,
    pub rereco: RerecoSettings,
    pub compare: CompareSettings,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            generator: GeneratorConfig::default(),
            paradigms: ParadigmKind::ALL.map(ParadigmSpec::of).to_vec(),
            model: ModelConfig::default(),
            fit: FitOptions::default(),
            eval: EvalSettings::default(),
            rereco: RerecoSettings::default(),
            compare: CompareSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid model config: {e}")))?;
        if self.paradigms.is_empty() {
            return Err(CliError::Usage("configure at least one paradigm".into()));
        }
        for (i, spec) in self.paradigms.iter().enumerate() {
            spec.policy()?;
            if self.paradigms[..i].iter().any(|p| p.kind == spec.kind) {
                return Err(CliError::Usage(format!(
                    "paradigm {} configured twice; artifacts are named by paradigm",
                    spec.name()
                )));
            }
        }
        if self.fit.batch_size == 0 {
            return Err(CliError::Usage("fit.batch_size must be positive".into()));
        }
        if self.rereco.period_ms <= 0 {
            return Err(CliError::Usage("rereco.period_ms must be positive".into()));
        }
        if self.rereco.episodes == 0 || self.rereco.candidates == 0 {
            return Err(CliError::Usage(
                "rereco needs at least one episode and one candidate".into(),
            ));
        }
        if self.compare.archs.is_empty() {
            return Err(CliError::Usage("compare.archs must not be empty".into()));
        }
        Ok(())
    }

    pub fn paradigm(&self, kind: ParadigmKind) -> Result<&ParadigmSpec, CliError> {
        self.paradigms
            .iter()
            .find(|p| p.kind == kind)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "paradigm {} is not in this experiment's config",
                    kind.name()
                ))
            })
    }

    pub fn paradigm_mut(&mut self, kind: ParadigmKind) -> Result<&mut ParadigmSpec, CliError> {
        self.paradigms
            .iter_mut()
            .find(|p| p.kind == kind)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "paradigm {} is not in this experiment's config",
                    kind.name()
                ))
            })
    }
}

/// The fully-resolved invocation: effective config plus output directory.
#[derive(Debug, Clone)]
pub struct Effective {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

pub fn snapshot_path(out_dir: &Path) -> PathBuf {
    out_dir.join("config.toml")
}

/// Resolves config and output directory. Precedence: `--config` file, else
/// the output directory's own snapshot, else built-in defaults; then flag
/// overrides. Output directory: `--out`, else `$SLIVER_OUT`, else
/// `./sliver-out`.
pub fn resolve(
    config_path: Option<&Path>,
    out_flag: Option<&Path>,
    seed: Option<u64>,
) -> Result<Effective, CliError> {
    let out_dir = out_flag
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("SLIVER_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sliver-out"));

    let mut config = if let Some(path) = config_path {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        ExperimentConfig::from_toml(&text)?
    } else {
        let snapshot = snapshot_path(&out_dir);
        match std::fs::read_to_string(&snapshot) {
            Ok(text) => ExperimentConfig::from_toml(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ExperimentConfig::default(),
            Err(e) => {
                return Err(CliError::Runtime(format!(
                    "cannot read {}: {e}",
                    snapshot.display()
                )))
            }
        }
    };

    if let Some(seed) = seed {
        config.generator.seed = seed;
    }
    config.validate()?;
    Ok(Effective { config, out_dir })
}

/// Writes the effective config beside the artifacts, or verifies that the
/// directory was produced with exactly this config. Refusing drift keeps
/// every directory's snapshot exact and re-runs byte-identical.
pub fn persist_or_check(eff: &Effective) -> Result<(), CliError> {
    std::fs::create_dir_all(&eff.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", eff.out_dir.display())))?;
    let path = snapshot_path(&eff.out_dir);
    let text = eff.config.to_toml();
    match std::fs::read_to_string(&path) {
        Ok(existing) if existing == text => Ok(()),
        Ok(_) => Err(CliError::Usage(format!(
            "config drift: {} differs from the effective configuration; \
             use a fresh --out or matching flags",
            path.display()
        ))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            crate::artifacts::write_atomic(&path, text.as_bytes())
        }
        Err(e) => Err(CliError::Runtime(format!(
            "cannot read {}: {e}",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(config, back);
        // Serialization is deterministic, so snapshots can be compared as
        // bytes.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let config = ExperimentConfig::from_toml(
            "[generator]\nseed = 4\nnum_users = 10\n\n[[paradigms]]\nkind = \"sliver\"\nwindow_ms = 15000\n",
        )
        .unwrap();
        assert_eq!(config.generator.seed, 4);
        assert_eq!(config.generator.num_users, 10);
        assert_eq!(config.generator.num_lives, GeneratorConfig::default().num_lives);
        assert_eq!(config.paradigms.len(), 1);
        assert_eq!(config.paradigms[0].window_ms, Some(15_000));
        assert_eq!(config.eval.num_hours, 5);
    }

    #[test]
    fn paradigm_policies_use_canonical_defaults() {
        let p = |kind| ParadigmSpec::of(kind).policy().unwrap();
        assert_eq!(p(ParadigmKind::OneHour), WindowPolicy::one_hour());
        assert_eq!(p(ParadigmKind::FiveMinute), WindowPolicy::five_minute());
        assert_eq!(p(ParadigmKind::Sliver), WindowPolicy::sliver());
        let custom = ParadigmSpec {
            kind: ParadigmKind::Sliver,
            window_ms: Some(10_000),
            t_uni_ms: Some(500),
        };
        assert_eq!(
            custom.policy().unwrap(),
            WindowPolicy::Sliding {
                w: DurationMs(10_000),
                t_uni: Timestamp(500)
            }
        );
    }

    #[test]
    fn misconfigurations_are_usage_errors() {
        let bad = ParadigmSpec {
            kind: ParadigmKind::OneHour,
            window_ms: Some(0),
            t_uni_ms: None,
        };
        assert!(matches!(bad.policy(), Err(CliError::Usage(_))));
        let misplaced = ParadigmSpec {
            kind: ParadigmKind::OneHour,
            window_ms: None,
            t_uni_ms: Some(0),
        };
        assert!(matches!(misplaced.policy(), Err(CliError::Usage(_))));

        let mut dup = ExperimentConfig::default();
        dup.paradigms.push(ParadigmSpec::of(ParadigmKind::Sliver));
        assert!(matches!(dup.validate(), Err(CliError::Usage(_))));

        assert!(matches!(
            ExperimentConfig::from_toml("generator = 3"),
            Err(CliError::Usage(_))
        ));
        assert!(ParadigmKind::parse("weekly").is_err());
    }

    #[test]
    fn eval_schedule_defaults_to_the_horizon_tail() {
        let config = ExperimentConfig::default();
        let schedule = config.eval.schedule(&config.generator).unwrap();
        assert_eq!(
            schedule.test_start.ms(),
            config.generator.horizon_ms - 5 * 3_600_000
        );
        let mut cramped = config;
        cramped.generator.horizon_ms = 2 * 3_600_000;
        assert!(cramped.eval.schedule(&cramped.generator).is_err());
    }

    #[test]
    fn snapshot_drift_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let eff = Effective {
            config: ExperimentConfig::default(),
            out_dir: dir.path().to_path_buf(),
        };
        persist_or_check(&eff).unwrap();
        persist_or_check(&eff).unwrap();

        let mut drifted = eff.clone();
        drifted.config.generator.seed += 1;
        assert!(matches!(
            persist_or_check(&drifted),
            Err(CliError::Usage(_))
        ));
    }
}
