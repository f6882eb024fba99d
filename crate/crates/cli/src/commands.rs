//! Command implementations and config resolution.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use reasoner_core::codec::Task;
use reasoner_core::config::Config;
use reasoner_core::gradcheck::standard_checks;
use reasoner_core::model::{Backbone, Model};
use reasoner_core::optim::OptimState;
use reasoner_core::probe::{emit_visualization, probe_report, train_probe, ProbeConfig};
use reasoner_core::rng::derive_seed;
use reasoner_core::trainer::{
    evaluate_acre, evaluate_cater, evaluate_count, evaluate_detection, evaluate_snitch,
    load_checkpoint, save_checkpoint, train, CheckpointMeta, Schedule, TaskData, TaskSpec,
    TrainRun,
};
use reasoner_core::worldgen::{
    gen_acre_episode, gen_cater_episode, gen_frame_scene, read_acre_records, read_video_records,
    write_acre_records, write_png_dump, write_video_records, AcreEpisode, VideoSample,
};

use crate::{Cli, Command};

/// Marker for mistakes that should exit with code 1 (bad flags or config).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Defaults ← config file ← --set overrides ← --seed flag.
fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut value: toml::Value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            text.parse::<toml::Value>().map_err(|e| usage(format!("config parse: {e}")))?
        }
        None => toml::Value::Table(Default::default()),
    };
    for kv in &cli.overrides {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("override '{kv}' is not KEY=VALUE")))?;
        let parsed: toml::Value = format!("v = {raw}")
            .parse::<toml::Value>()
            .ok()
            .and_then(|t| t.get("v").cloned())
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut node = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| usage(format!("override path '{key}' crosses a non-table")))?;
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| usage(format!("override path '{key}' crosses a non-table")))?;
        table.insert(parts[parts.len() - 1].to_string(), parsed);
    }
    let mut config: Config =
        value.try_into().map_err(|e| usage(format!("config does not fit schema: {e}")))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
        config.probe.seed = seed;
    }
    Ok(config)
}

/// Every command writes the fully resolved config next to its outputs.
fn write_snapshot(out: &Path, config: &Config) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = toml::to_string_pretty(config).context("serializing resolved config")?;
    std::fs::write(out.join("config.toml"), text).context("writing config snapshot")?;
    Ok(())
}

fn parse_task(name: &str) -> Result<Task> {
    Task::parse(name).ok_or_else(|| usage(format!("unknown task '{name}'")))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = resolve_config(&cli)?;
    match &cli.command {
        Command::Train { backbone, slots, .. } => {
            if let Some(b) = backbone {
                config.model.backbone = Backbone::parse(b)
                    .ok_or_else(|| usage(format!("unknown backbone '{b}'")))?;
            }
            if let Some(s) = slots {
                config.model.slots = *s;
            }
        }
        Command::Probe { task, threshold, steps, .. } => {
            if let Some(t) = task {
                config.probe.task = parse_task(t)?;
            }
            if let Some(t) = threshold {
                config.probe.threshold = *t;
            }
            if let Some(s) = steps {
                config.probe.steps = *s;
            }
        }
        Command::Viz { threshold, .. } => {
            if let Some(t) = threshold {
                config.probe.threshold = *t;
            }
        }
        _ => {}
    }
    config.validate().map_err(|e| usage(format!("invalid config: {e}")))?;
    write_snapshot(&cli.out, &config)?;

    match cli.command {
        Command::GenData { ref format } => cmd_gen_data(&cli, &config, format),
        Command::Train {
            ref data,
            ref schedule,
            ref pretrain_task,
            ref main_task,
            pretrain_steps,
            interval,
            ref resume,
            ..
        } => cmd_train(
            &cli,
            &config,
            data,
            schedule,
            pretrain_task,
            main_task,
            pretrain_steps,
            interval,
            resume.as_deref(),
        ),
        Command::Eval { ref checkpoint, ref data, ref tasks } => {
            cmd_eval(&cli, &config, checkpoint, data, tasks)
        }
        Command::Probe { ref checkpoint, ref data, .. } => {
            cmd_probe(&cli, &config, checkpoint, data)
        }
        Command::Viz {
            ref checkpoint,
            ref probe_checkpoint,
            ref data,
            ref frames,
            scale,
            ..
        } => cmd_viz(&cli, &config, checkpoint, probe_checkpoint, data, frames, scale),
        Command::GradCheck { cases } => cmd_grad_check(&config, cases),
    }
}

// ---- gen-data -------------------------------------------------------------

struct SplitPlan {
    domain: &'static str,
    split: &'static str,
    count: usize,
}

fn split_plans(config: &Config) -> Vec<SplitPlan> {
    let d = &config.data;
    vec![
        SplitPlan { domain: "frames", split: "train", count: d.frames.train },
        SplitPlan { domain: "frames", split: "val", count: d.frames.val },
        SplitPlan { domain: "frames", split: "test", count: d.frames.test },
        SplitPlan { domain: "cater", split: "train", count: d.cater.train },
        SplitPlan { domain: "cater", split: "val", count: d.cater.val },
        SplitPlan { domain: "cater", split: "test", count: d.cater.test },
        SplitPlan { domain: "acre", split: "train", count: d.acre.train },
        SplitPlan { domain: "acre", split: "val", count: d.acre.val },
        SplitPlan { domain: "acre", split: "test", count: d.acre.test },
    ]
}

fn records_path(root: &Path, domain: &str, split: &str) -> PathBuf {
    root.join(domain).join(format!("{split}.records"))
}

fn cmd_gen_data(cli: &Cli, config: &Config, format: &str) -> Result<()> {
    if format != "records" && format != "png-dump" {
        return Err(usage(format!("unknown format '{format}' (records | png-dump)")));
    }
    for plan in split_plans(config) {
        let path = records_path(&cli.out, plan.domain, plan.split);
        if path.exists() && !cli.force {
            bail!("output {} already exists; pass --force to overwrite", path.display());
        }
        std::fs::create_dir_all(path.parent().unwrap())?;
        // Disjoint seed ranges by construction: the stream domain encodes
        // both the dataset kind and the split.
        let seed_domain = format!("data-{}-{}", plan.domain, plan.split);
        let seeds: Vec<u64> =
            (0..plan.count).map(|i| derive_seed(config.seed, &seed_domain, i as u64)).collect();
        match plan.domain {
            "frames" => {
                let samples: Result<Vec<VideoSample>, _> = reasoner_core::par::map_collect(
                    seeds.len(),
                    |i| gen_frame_scene(seeds[i], &config.cater),
                )
                .into_iter()
                .collect();
                let samples = samples?;
                if format == "png-dump" {
                    dump_videos(&path, &samples)?;
                } else {
                    write_video_records(&path, &samples)?;
                }
            }
            "cater" => {
                let samples: Result<Vec<VideoSample>, _> = reasoner_core::par::map_collect(
                    seeds.len(),
                    |i| gen_cater_episode(seeds[i], &config.cater),
                )
                .into_iter()
                .collect();
                let samples = samples?;
                if format == "png-dump" {
                    dump_videos(&path, &samples)?;
                } else {
                    write_video_records(&path, &samples)?;
                }
            }
            "acre" => {
                let episodes: Result<Vec<AcreEpisode>, _> = reasoner_core::par::map_collect(
                    seeds.len(),
                    |i| gen_acre_episode(seeds[i], &config.acre),
                )
                .into_iter()
                .collect();
                let episodes = episodes?;
                if format == "png-dump" {
                    let named: Vec<(String, &[reasoner_core::tensor::Tensor<f32>])> = episodes
                        .iter()
                        .enumerate()
                        .map(|(i, e)| (format!("sample_{i:05}"), e.frames.as_slice()))
                        .collect();
                    write_png_dump(path.parent().unwrap().join(plan.split).as_path(), &named)?;
                } else {
                    write_acre_records(&path, &episodes)?;
                }
            }
            _ => unreachable!(),
        }
        println!(
            "{}",
            serde_json::json!({
                "event": "gen-data", "domain": plan.domain, "split": plan.split,
                "count": plan.count, "path": path.display().to_string(), "format": format,
            })
        );
    }
    Ok(())
}

fn dump_videos(records_path: &Path, samples: &[VideoSample]) -> Result<()> {
    let dir = records_path.with_extension("");
    let named: Vec<(String, &[reasoner_core::tensor::Tensor<f32>])> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("sample_{i:05}"), s.frames.as_slice()))
        .collect();
    write_png_dump(&dir, &named)?;
    Ok(())
}

// ---- train ---------------------------------------------------------------

fn task_data_kind(task: Task) -> &'static str {
    match task {
        Task::Cater => "cater",
        Task::Acre => "acre",
        _ => "frames",
    }
}

enum Loaded {
    Videos(Vec<VideoSample>),
    Acre(Vec<AcreEpisode>),
}

fn load_split(data: &Path, task: Task, split: &str) -> Result<Loaded> {
    let path = records_path(data, task_data_kind(task), split);
    if !path.exists() {
        bail!("missing dataset for task {task}: expected {}", path.display());
    }
    Ok(match task {
        Task::Acre => Loaded::Acre(read_acre_records(&path)?),
        _ => Loaded::Videos(read_video_records(&path)?),
    })
}

impl Loaded {
    fn as_task_data(&self, task: Task) -> TaskData<'_> {
        match (self, task) {
            (Loaded::Acre(v), _) => TaskData::Acre(v),
            (Loaded::Videos(v), Task::Cater) => TaskData::Videos(v),
            (Loaded::Videos(v), _) => TaskData::Frames(v),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    config: &Config,
    data: &Path,
    schedule_name: &str,
    pretrain_task: &str,
    main_task: &str,
    pretrain_steps: Option<u64>,
    interval: u64,
    resume: Option<&Path>,
) -> Result<()> {
    let main = parse_task(main_task)?;
    let pre = parse_task(pretrain_task)?;
    let total = config.train.total_steps;
    let (schedule, tasks) = match schedule_name {
        "none" => (Schedule::Joint, vec![main]),
        "joint" => (Schedule::Joint, vec![pre, main]),
        "alternating" => (Schedule::Alternating { interval }, vec![pre, main]),
        "single-switch" => (
            Schedule::SingleSwitch { pretrain_steps: pretrain_steps.unwrap_or(total / 2) },
            vec![pre, main],
        ),
        other => return Err(usage(format!("unknown schedule '{other}'"))),
    };

    let vocab = config.vocab();
    let loaded: Vec<Loaded> =
        tasks.iter().map(|&t| load_split(data, t, "train")).collect::<Result<_>>()?;
    let task_data: Vec<TaskData> =
        tasks.iter().zip(&loaded).map(|(&t, l)| l.as_task_data(t)).collect();

    let (mut model, mut optim, start_step) = match resume {
        Some(path) => {
            let (model, optim, meta) = load_checkpoint(path)?;
            log::info!("resuming from step {} of {}", meta.step, path.display());
            (model, optim, meta.step)
        }
        None => {
            let model = Model::<f32>::init(config.model.clone(), vocab.size(), config.seed)?;
            let optim = OptimState::new(config.train.optimizer(), &model.param_shapes());
            (model, optim, 0)
        }
    };
    log::info!(
        "training {} params, schedule {schedule:?}, tasks {:?}",
        model.param_count(),
        tasks.iter().map(|t| t.name()).collect::<Vec<_>>()
    );

    let run = TrainRun {
        config: config.train,
        schedule,
        tasks: tasks.iter().map(|&t| TaskSpec::new(t)).collect(),
        data: task_data,
        vocab: vocab.clone(),
    };
    let out = cli.out.clone();
    let meta_base = CheckpointMeta {
        model_config: config.model.clone(),
        vocab: vocab.clone(),
        optim_config: config.train.optimizer(),
        step: 0,
        seed: config.seed,
        extra: serde_json::json!({
            "schedule": schedule_name,
            "tasks": tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
            "train": config.train,
        }),
    };
    let report = train(&mut model, &mut optim, &run, start_step, |step, m, o, metrics| {
        let meta = CheckpointMeta { step, ..meta_base.clone() };
        save_checkpoint(&out.join(format!("ckpt_{step:06}.ckpt")), m, o, &meta)
            .map_err(|e| reasoner_core::trainer::TrainError::Invalid(e.to_string()))?;
        metrics
            .write_jsonl(&out.join("metrics.jsonl"))
            .map_err(|e| reasoner_core::trainer::TrainError::Invalid(e.to_string()))?;
        Ok(())
    })?;
    let final_path = out.join("final.ckpt");
    let meta = CheckpointMeta { step: config.train.total_steps, ..meta_base.clone() };
    save_checkpoint(&final_path, &model, &optim, &meta)?;
    report.metrics.write_jsonl(&out.join("metrics.jsonl"))?;

    // Final test metrics for the main task, one structured line.
    let test = load_split(data, main, "test")?;
    let summary = eval_task(&model, &vocab, config, main, &test)?;
    println!(
        "{}",
        serde_json::json!({
            "event": "train-final",
            "checkpoint": final_path.display().to_string(),
            "realized_counts": report.realized_counts,
            "task": main.name(),
            "metrics": summary,
        })
    );
    Ok(())
}

fn eval_task(
    model: &Model<f32>,
    vocab: &reasoner_core::codec::Vocab,
    config: &Config,
    task: Task,
    data: &Loaded,
) -> Result<serde_json::Value> {
    Ok(match (task, data) {
        (Task::Cater, Loaded::Videos(v)) => {
            let e = evaluate_cater(model, v, vocab, config.train.eval_frames);
            let near_chance = e.top1 <= 2.0 / config.vocab().config.grid_cells as f64;
            serde_json::json!({
                "top1": e.top1, "total": e.total,
                "non_cell_answers": e.non_cell_answers, "near_chance": near_chance,
            })
        }
        (Task::Acre, Loaded::Acre(v)) => {
            let e = evaluate_acre(model, v, vocab);
            serde_json::json!({
                "overall": e.overall, "total": e.total,
                "per_type": e.per_type.iter()
                    .map(|(qt, acc, n)| serde_json::json!({"type": qt.name(), "acc": acc, "n": n}))
                    .collect::<Vec<_>>(),
                "non_answer_tokens": e.non_answer_tokens,
            })
        }
        (Task::DetectAll | Task::DetectVisible, Loaded::Videos(v)) => {
            let e = evaluate_detection(model, v, vocab, task, config.train.max_objects);
            serde_json::json!({
                "ap50": e.mean_ap, "undefined": e.undefined,
                "per_class": e.per_class,
            })
        }
        (Task::CountAll | Task::CountUnique, Loaded::Videos(v)) => {
            serde_json::json!({"accuracy": evaluate_count(model, v, vocab, task)})
        }
        (Task::Snitch, Loaded::Videos(v)) => {
            serde_json::json!({"iou50_accuracy": evaluate_snitch(model, v, vocab)})
        }
        _ => bail!("task {task} has no evaluator for this dataset kind"),
    })
}

fn cmd_eval(cli: &Cli, config: &Config, checkpoint: &Path, data: &Path, tasks: &str) -> Result<()> {
    let _ = cli;
    let (model, _optim, meta) = load_checkpoint(checkpoint)?;
    let vocab = meta.vocab.clone();
    if vocab != config.vocab() {
        log::warn!("checkpoint vocabulary differs from config; using the checkpoint's");
    }
    for name in tasks.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let task = parse_task(name)?;
        let data = load_split(data, task, "test")?;
        let metrics = eval_task(&model, &vocab, config, task, &data)?;
        println!(
            "{}",
            serde_json::json!({"event": "eval", "task": task.name(), "step": meta.step, "metrics": metrics})
        );
    }
    Ok(())
}

// ---- probe / viz -----------------------------------------------------------

fn cmd_probe(cli: &Cli, config: &Config, checkpoint: &Path, data: &Path) -> Result<()> {
    let (base, _, meta) = load_checkpoint(checkpoint)?;
    let vocab = meta.vocab.clone();
    let train_split = match load_split(data, config.probe.task, "train")? {
        Loaded::Videos(v) => v,
        Loaded::Acre(_) => unreachable!("probe tasks are frame tasks"),
    };
    let test_split = match load_split(data, config.probe.task, "test")? {
        Loaded::Videos(v) => v,
        Loaded::Acre(_) => unreachable!(),
    };
    let (probe, optim, draws) = train_probe(&base, &config.probe, &train_split, &vocab)?;
    let probe_path = cli.out.join("probe.ckpt");
    let probe_meta = CheckpointMeta {
        model_config: probe.config.clone(),
        vocab: vocab.clone(),
        optim_config: optim.config,
        step: config.probe.steps,
        seed: config.probe.seed,
        extra: serde_json::json!({"probe": true, "base": checkpoint.display().to_string(),
                                  "task": config.probe.task.name()}),
    };
    save_checkpoint(&probe_path, &probe, &optim, &probe_meta)?;
    let report = probe_report(&base, &probe, &config.probe, &test_split, &vocab)?;
    std::fs::write(
        cli.out.join("probe_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "event": "probe",
            "checkpoint": probe_path.display().to_string(),
            "slots": base.config.slots,
            "slot_draws": draws.len(),
            "kept_detections": report.detections.len(),
            "coverage": report.coverage,
            "gt_total": report.gt_total,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_viz(
    cli: &Cli,
    config: &Config,
    checkpoint: &Path,
    probe_checkpoint: &Path,
    data: &Path,
    frames: &str,
    scale: usize,
) -> Result<()> {
    let (base, _, meta) = load_checkpoint(checkpoint)?;
    let (probe, _, _) = load_checkpoint(probe_checkpoint)?;
    let vocab = meta.vocab.clone();
    let test_split = match load_split(data, config.probe.task, "test")? {
        Loaded::Videos(v) => v,
        Loaded::Acre(_) => unreachable!(),
    };
    let report = probe_report(&base, &probe, &config.probe, &test_split, &vocab)?;
    let slots: Vec<usize> = (0..base.config.slots).collect();
    for token in frames.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let idx: usize = token.parse().map_err(|_| usage(format!("bad frame index '{token}'")))?;
        let sample = test_split
            .get(idx)
            .ok_or_else(|| anyhow!("frame {idx} out of range ({} test samples)", test_split.len()))?;
        let dir = cli.out.join(format!("viz/frame_{idx:04}"));
        let written = emit_visualization(&sample.frames[0], idx, &report, &slots, &dir, scale)?;
        println!(
            "{}",
            serde_json::json!({
                "event": "viz", "frame": idx,
                "files": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            })
        );
    }
    Ok(())
}

fn cmd_grad_check(config: &Config, cases: usize) -> Result<()> {
    let report = standard_checks(config.seed, cases);
    for r in &report.reports {
        println!(
            "{} {:>24}  max_rel_err {:.3e}  tol {:.1e}  cases {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.op,
            r.max_rel_err,
            r.tolerance,
            r.cases
        );
    }
    if !report.all_passed() {
        bail!("gradient check failed");
    }
    Ok(())
}
