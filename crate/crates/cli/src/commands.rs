//! The subcommands. Each one resolves its inputs from the output directory,
//! writes its artifacts atomically under an in-progress marker, and persists
//! the exact config beside them. Subcommands compose via files only.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sliver_core::events::{load_event_log, sessionize, write_event_log, EventLogFormat};
use sliver_core::learner::{
    load_model, save_model, streaming_fit, write_trace, Architecture, ModelConfig, MultiTaskModel,
    TraceRow,
};
use sliver_core::metrics::{
    label_balance, streaming_eval, write_report_csv, write_report_json, EvalReport, ParadigmStream,
};
use sliver_core::rereco::{
    draw_episodes, policy_summary, simulate_serving, staleness_report, write_policy_csv,
    write_staleness_csv, ModelScorer, RerecoPolicy, SimulationOutcome, WorldClock,
};
use sliver_core::simgen::{generate, GroundTruth, World};
use sliver_core::windowing::{audit_label_accuracy, default_delay_grid, produce_stream, TaskKind};
use sliver_core::{LabeledSample, SessionStore, Timestamp};

use crate::artifacts::{read_labels, write_atomic, write_atomic_with, IncompleteMarker};
use crate::config::{persist_or_check, Effective, ParadigmKind};
use crate::CliError;

fn events_path(out: &Path) -> PathBuf {
    out.join("events.jsonl")
}

fn truth_path(out: &Path) -> PathBuf {
    out.join("truth.json")
}

fn labels_path(out: &Path, kind: ParadigmKind) -> PathBuf {
    out.join(format!("labels-{}.csv", kind.name()))
}

/// Loads the generated event log and re-derives its sessions. Sessionization
/// is deterministic, so every consumer sees the same sessions without a
/// separate session artifact.
fn load_sessions(eff: &Effective) -> Result<SessionStore, CliError> {
    let path = events_path(&eff.out_dir);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; run `sliver generate` first",
            path.display()
        )));
    }
    let events = load_event_log(&path, &EventLogFormat::Jsonl)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let sessions = sessionize(&events, Timestamp(eff.config.generator.horizon_ms))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(SessionStore::new(sessions))
}

fn load_truth(out: &Path) -> Result<GroundTruth, CliError> {
    let path = truth_path(out);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; run `sliver generate` first",
            path.display()
        )));
    }
    GroundTruth::read(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn generate_cmd(eff: &Effective) -> Result<(), CliError> {
    persist_or_check(eff)?;
    let marker = IncompleteMarker::start(&eff.out_dir, "generate")?;
    let (events, truth) = generate(eff.config.generator.clone())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic_with(&events_path(&eff.out_dir), |tmp| {
        write_event_log(tmp, &events).map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    write_atomic_with(&truth_path(&eff.out_dir), |tmp| {
        truth.write(tmp).map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    marker.finish()?;
    println!(
        "generated {} events across {} sessions → {}",
        events.len(),
        truth.sessions.len(),
        eff.out_dir.display()
    );
    Ok(())
}

pub fn label_cmd(eff: &Effective, kind: ParadigmKind) -> Result<(), CliError> {
    persist_or_check(eff)?;
    let spec = *eff.config.paradigm(kind)?;
    let marker = IncompleteMarker::start(&eff.out_dir, "label")?;
    let store = load_sessions(eff)?;
    let samples = produce_stream(store.as_slice(), &spec.policy()?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = labels_path(&eff.out_dir, kind);
    crate::artifacts::write_labels(&path, &samples)?;
    marker.finish()?;
    let balance = label_balance(&samples);
    println!(
        "{}: {} samples (click {}/{}, follow {}/{}, like {}/{}) → {}",
        spec.name(),
        samples.len(),
        balance[0].0,
        balance[0].1,
        balance[1].0,
        balance[1].1,
        balance[2].0,
        balance[2].1,
        path.display()
    );
    Ok(())
}

pub fn audit_cmd(eff: &Effective, kind: ParadigmKind) -> Result<(), CliError> {
    persist_or_check(eff)?;
    let marker = IncompleteMarker::start(&eff.out_dir, "audit")?;
    let samples = read_labels(&labels_path(&eff.out_dir, kind))?;
    let truth = load_truth(&eff.out_dir)?;
    let report = audit_label_accuracy(&samples, &truth, &default_delay_grid())
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let path = eff.out_dir.join(format!("audit-{}.csv", kind.name()));
    let mut text = String::from("task,scope,lo_ms,hi_ms,correct,total,accuracy\n");
    let fmt_acc = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
    for task in &report.tasks {
        text.push_str(&format!(
            "{},overall,,,{},{},{}\n",
            task.task.as_str(),
            task.correct,
            task.total,
            fmt_acc(task.accuracy()),
        ));
        for b in &task.buckets {
            text.push_str(&format!(
                "{},bucket,{},{},{},{},{}\n",
                task.task.as_str(),
                b.lo_ms,
                if b.hi_ms == i64::MAX { String::new() } else { b.hi_ms.to_string() },
                b.correct,
                b.total,
                fmt_acc(b.accuracy()),
            ));
        }
    }
    text.push_str(&format!(
        "censored,excluded,,,{},,\n",
        report.excluded_censored
    ));
    write_atomic(&path, text.as_bytes())?;
    marker.finish()?;

    for task in &report.tasks {
        println!(
            "{} {} accuracy: {} ({}/{} labels, censored excluded: {})",
            kind.name(),
            task.task.as_str(),
            task.accuracy().map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
            task.correct,
            task.total,
            report.excluded_censored
        );
    }
    println!("→ {}", path.display());
    Ok(())
}

fn parse_arch(eff: &Effective, arch: Option<&str>) -> Result<Architecture, CliError> {
    match arch {
        None => Ok(eff.config.model.arch),
        Some(s) => Architecture::parse(s)
            .ok_or_else(|| CliError::Usage(format!("unknown architecture '{s}'"))),
    }
}

pub fn train_cmd(
    eff: &Effective,
    kind: ParadigmKind,
    arch: Option<&str>,
) -> Result<(), CliError> {
    persist_or_check(eff)?;
    let arch = parse_arch(eff, arch)?;
    let marker = IncompleteMarker::start(&eff.out_dir, "train")?;
    let store = load_sessions(eff)?;
    let samples = read_labels(&labels_path(&eff.out_dir, kind))?;

    let model_config = ModelConfig {
        arch,
        ..eff.config.model.clone()
    };
    let mut model = MultiTaskModel::new(&model_config);
    let mut adam = model.optimizer(eff.config.fit.adam);
    let mut trace: Vec<TraceRow> = Vec::new();
    let stats = streaming_fit(
        &mut model,
        &mut adam,
        &samples,
        &store,
        &eff.config.fit,
        Some(&mut trace),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let stem = format!("{}-{}", kind.name(), arch.name());
    let model_path = eff.out_dir.join(format!("model-{stem}.bin"));
    write_atomic_with(&model_path, |tmp| {
        save_model(tmp, &model).map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    write_atomic_with(&eff.out_dir.join(format!("trace-{stem}.csv")), |tmp| {
        write_trace(tmp, &trace).map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    let mut stats_json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
    stats_json.push(b'\n');
    write_atomic(&eff.out_dir.join(format!("fit-{stem}.json")), &stats_json)?;
    marker.finish()?;
    println!(
        "trained {} on {}: {} steps over {} samples, mean loss {:.4} → {}",
        arch.name(),
        kind.name(),
        stats.steps,
        stats.samples,
        stats.mean_loss,
        model_path.display()
    );
    Ok(())
}

/// Builds the per-seed model factory used by `eval` and `compare`: every
/// schedule seed trains a fresh model whose init seed mixes the configured
/// model seed with the schedule seed.
fn model_factory(base: ModelConfig) -> impl Fn(u64) -> MultiTaskModel {
    move |seed| {
        MultiTaskModel::new(&ModelConfig {
            seed: base.seed ^ seed,
            ..base.clone()
        })
    }
}

fn eval_over_streams(
    eff: &Effective,
    arch: Architecture,
    streams: &[(String, Vec<LabeledSample>)],
    store: &SessionStore,
) -> Result<EvalReport, CliError> {
    let schedule = eff.config.eval.schedule(&eff.config.generator)?;
    let refs: Vec<ParadigmStream<'_>> = streams
        .iter()
        .map(|(name, samples)| ParadigmStream {
            name: name.clone(),
            samples,
        })
        .collect();
    let factory = model_factory(ModelConfig {
        arch,
        ..eff.config.model.clone()
    });
    streaming_eval(&factory, &refs, store, &schedule, &eff.config.fit)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn print_report_headline(report: &EvalReport) {
    for p in &report.paradigms {
        let cell = |t: usize| {
            p.mean_auc[t]
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "n/a".into())
        };
        println!(
            "{:12} click {} follow {} like {}",
            p.paradigm,
            cell(0),
            cell(1),
            cell(2)
        );
    }
}

pub fn eval_cmd(
    eff: &Effective,
    arch: Option<&str>,
    only: Option<ParadigmKind>,
) -> Result<(), CliError> {
    persist_or_check(eff)?;
    let arch = parse_arch(eff, arch)?;
    let marker = IncompleteMarker::start(&eff.out_dir, "eval")?;
    let store = load_sessions(eff)?;

    let mut streams = Vec::new();
    for spec in &eff.config.paradigms {
        if only.is_some_and(|k| k != spec.kind) {
            continue;
        }
        let samples = read_labels(&labels_path(&eff.out_dir, spec.kind))?;
        streams.push((spec.name().to_string(), samples));
    }
    if streams.is_empty() {
        return Err(CliError::Usage(
            "nothing to evaluate: the paradigm filter matched no configured paradigm".into(),
        ));
    }

    let report = eval_over_streams(eff, arch, &streams, &store)?;
    let csv_path = eff.out_dir.join(format!("eval-{}.csv", arch.name()));
    write_atomic_with(&csv_path, |tmp| {
        write_report_csv(tmp, &report).map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    let json_path = eff.out_dir.join(format!("eval-{}.json", arch.name()));
    write_atomic_with(&json_path, |tmp| {
        write_report_json(tmp, &report).map_err(|e| CliError::Runtime(e.to_string()))
    })?;
    marker.finish()?;
    print_report_headline(&report);
    println!("→ {}", json_path.display());
    Ok(())
}

pub fn rereco_cmd(
    eff: &Effective,
    policy_filter: Option<bool>,
    model_path: Option<&Path>,
) -> Result<(), CliError> {
    persist_or_check(eff)?;
    let marker = IncompleteMarker::start(&eff.out_dir, "rereco-sim")?;
    let world = World::build(eff.config.generator.clone())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    // True CTR needs only the room trajectories, which the world rebuilds
    // deterministically from the config; no generated log required.
    let truth = GroundTruth {
        horizon: Timestamp(eff.config.generator.horizon_ms),
        state_click_rate: world.state_click_rate(),
        rooms: world.ground_truth_rooms(),
        sessions: Vec::new(),
    };
    let model = match model_path {
        Some(path) => load_model(path).map_err(|e| CliError::Runtime(e.to_string()))?,
        // Without a checkpoint the scorer is an untrained model: staleness
        // numbers still hold, the CTR comparison is a null experiment.
        None => MultiTaskModel::new(&eff.config.model),
    };
    let scorer = ModelScorer {
        model: &model,
        weights: eff.config.fit.weights.clone(),
    };
    let clock = WorldClock { world: &world };
    let settings = &eff.config.rereco;
    let specs = draw_episodes(&world, settings.episodes, settings.candidates, settings.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let run = |enabled: bool| -> Result<SimulationOutcome, CliError> {
        let policy = RerecoPolicy {
            enabled,
            period_ms: settings.period_ms,
        };
        simulate_serving(&specs, &world, &scorer, &policy, &clock)
            .map_err(|e| CliError::Runtime(e.to_string()))
    };

    match policy_filter {
        None => {
            let on = run(true)?;
            let off = run(false)?;
            let report = staleness_report(&on.episodes, &off.episodes, &truth)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let path = eff.out_dir.join("staleness.csv");
            write_atomic_with(&path, |tmp| {
                write_staleness_csv(tmp, &report).map_err(|e| CliError::Runtime(e.to_string()))
            })?;
            marker.finish()?;
            println!(
                "re-reco on: mean staleness {:.0} ms (max {}), off: {:.0} ms; \
                 paired ctr diff {:+.5} (z {:.2}), skipped {} → {}",
                report.on.mean_staleness_ms,
                report.on.max_staleness_ms,
                report.off.mean_staleness_ms,
                report.ctr_diff_mean,
                report.ctr_diff_z,
                on.skipped_empty + off.skipped_empty,
                path.display()
            );
        }
        Some(enabled) => {
            let outcome = run(enabled)?;
            let summary = policy_summary(&outcome.episodes, &truth)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let name = if enabled { "on" } else { "off" };
            let path = eff.out_dir.join(format!("staleness-{name}.csv"));
            write_atomic_with(&path, |tmp| {
                write_policy_csv(tmp, name, &summary).map_err(|e| CliError::Runtime(e.to_string()))
            })?;
            marker.finish()?;
            println!(
                "re-reco {name}: {} episodes, mean staleness {:.0} ms (max {}), \
                 mean true ctr {:.5} → {}",
                summary.episodes,
                summary.mean_staleness_ms,
                summary.max_staleness_ms,
                summary.mean_true_ctr,
                path.display()
            );
        }
    }
    Ok(())
}

pub fn report_cmd(eff: &Effective, arch: Option<&str>) -> Result<(), CliError> {
    let arch = parse_arch(eff, arch)?;
    let path = eff.out_dir.join(format!("eval-{}.json", arch.name()));
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{} not found; run `sliver eval` first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let report: EvalReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;

    let rendered = render_markdown(&report);
    let md_path = eff.out_dir.join(format!("report-{}.md", arch.name()));
    write_atomic(&md_path, rendered.as_bytes())?;
    print!("{rendered}");
    println!("→ {}", md_path.display());
    Ok(())
}

fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Streaming evaluation — {}\n\n", report.model));
    out.push_str(&format!(
        "Mean test AUC (±1 s.e. over seeds); relative improvement is against the {} baseline.\n\n",
        report.baseline
    ));
    out.push_str("| paradigm | click AUC | follow AUC | like AUC | click Δ | follow Δ | like Δ |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for p in &report.paradigms {
        let auc_cell = |t: usize| match (p.mean_auc[t], p.se_auc[t]) {
            (Some(a), Some(se)) => format!("{a:.4} ± {se:.4}"),
            (Some(a), None) => format!("{a:.4}"),
            _ => "n/a".to_string(),
        };
        let impr_cell = |t: usize| {
            if p.paradigm == report.baseline {
                return "—".to_string();
            }
            report
                .rela_impr
                .iter()
                .find(|r| r.paradigm == p.paradigm && r.task == TaskKind::ALL[t].as_str())
                .and_then(|r| r.percent)
                .map(|pc| format!("{pc:+.2}%"))
                .unwrap_or_else(|| "n/a".to_string())
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            p.paradigm,
            auc_cell(0),
            auc_cell(1),
            auc_cell(2),
            impr_cell(0),
            impr_cell(1),
            impr_cell(2),
        ));
    }
    out.push_str("\n## Label delay\n\n");
    out.push_str("| paradigm | lag | count | p50 ms | p90 ms | max ms |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for d in &report.delay {
        for (t, lag) in d.positive_lag.iter().enumerate() {
            if let Some(s) = lag {
                out.push_str(&format!(
                    "| {} | {} positives | {} | {} | {} | {} |\n",
                    d.paradigm,
                    TaskKind::ALL[t].as_str(),
                    s.count,
                    s.p50,
                    s.p90,
                    s.max
                ));
            }
        }
        if let Some(s) = &d.impression_lag {
            out.push_str(&format!(
                "| {} | since impression | {} | {} | {} | {} |\n",
                d.paradigm, s.count, s.p50, s.p90, s.max
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CompareRow {
    model: String,
    paradigm: String,
    task: String,
    mean_auc: Option<f64>,
    se_auc: Option<f64>,
    /// Relative improvement vs the baseline paradigm; absent on the
    /// baseline's own rows.
    rela_impr_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CompareMatrix {
    baseline: String,
    rows: Vec<CompareRow>,
}

pub fn compare_cmd(eff: &Effective) -> Result<(), CliError> {
    persist_or_check(eff)?;
    let marker = IncompleteMarker::start(&eff.out_dir, "compare")?;
    let (events, _truth) = generate(eff.config.generator.clone())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let sessions = sessionize(&events, Timestamp(eff.config.generator.horizon_ms))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let store = SessionStore::new(sessions);

    let mut streams = Vec::new();
    for spec in &eff.config.paradigms {
        let samples = produce_stream(store.as_slice(), &spec.policy()?)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        streams.push((spec.name().to_string(), samples));
    }

    let mut matrix = CompareMatrix {
        baseline: streams[0].0.clone(),
        rows: Vec::new(),
    };
    for &arch in &eff.config.compare.archs {
        let report = eval_over_streams(eff, arch, &streams, &store)?;
        println!("model: {}", arch.name());
        print_report_headline(&report);
        for p in &report.paradigms {
            for task in TaskKind::ALL {
                let t = task.index();
                let rela_impr_pct = report
                    .rela_impr
                    .iter()
                    .find(|r| r.paradigm == p.paradigm && r.task == task.as_str())
                    .and_then(|r| r.percent);
                matrix.rows.push(CompareRow {
                    model: report.model.clone(),
                    paradigm: p.paradigm.clone(),
                    task: task.as_str().to_string(),
                    mean_auc: p.mean_auc[t],
                    se_auc: p.se_auc[t],
                    rela_impr_pct,
                });
            }
        }
    }

    let mut csv = String::from("model,paradigm,task,mean_auc,se_auc,rela_impr_pct\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &matrix.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.model,
            row.paradigm,
            row.task,
            opt(row.mean_auc),
            opt(row.se_auc),
            opt(row.rela_impr_pct),
        ));
    }
    write_atomic(&eff.out_dir.join("compare.csv"), csv.as_bytes())?;
    let mut json = serde_json::to_vec_pretty(&matrix).expect("matrix serializes");
    json.push(b'\n');
    write_atomic(&eff.out_dir.join("compare.json"), &json)?;
    marker.finish()?;
    println!("→ {}", eff.out_dir.join("compare.csv").display());
    Ok(())
}
