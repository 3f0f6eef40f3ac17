//! Two-stage training: full fine-tuning, promotion + freezing, MTA-only
//! tuning, checkpoints, run reports and the ablation suite.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::{Datasets, RunConfig};
use crate::data::{Example, TaskSuite};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ExampleRecord, Scores};
use crate::mta::Stage;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::transformer::Model;

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const DIVERGENCE_FILE: &str = "divergence.json";

/// Final-loss window: the reported final loss is the mean of this many last steps.
const LOSS_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSelect {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    Both,
}

impl std::str::FromStr for StageSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageSelect::One),
            "2" => Ok(StageSelect::Two),
            "both" => Ok(StageSelect::Both),
            other => Err(Error::Config(vec![format!(
                "stage must be 1, 2 or both, got {other:?}"
            )])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Interval (in steps) of the frozen-parameter bit check.
    pub eval_every: usize,
    /// Freeze everything outside the MTA layers in stage 2.
    pub freeze_backbone: bool,
    /// Decoding budget per example at evaluation.
    pub max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 2000,
            stage2_steps: 800,
            batch_size: 16,
            lr_stage1: 3e-4,
            lr_stage2: 1e-3,
            eval_every: 200,
            freeze_backbone: true,
            max_new_tokens: 16,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("stage1_steps", self.stage1_steps),
            ("stage2_steps", self.stage2_steps),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("max_new_tokens", self.max_new_tokens),
        ] {
            if val == 0 {
                v.push(format!("train.{name} must be at least 1"));
            }
        }
        for (name, val) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(val > 0.0 && val.is_finite()) {
                v.push(format!("train.{name} must be positive, got {val}"));
            }
        }
        v
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub stage: u8,
}

/// Optional on-disk outputs of a training run.
#[derive(Default)]
pub struct RunSink {
    dir: Option<PathBuf>,
    log: Option<BufWriter<fs::File>>,
}

impl RunSink {
    /// Discards the log; divergence dumps are not written.
    pub fn none() -> Self {
        RunSink::default()
    }

    /// Appends to `{dir}/train_log.jsonl` and dumps divergences into `dir`.
    pub fn in_dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(TRAIN_LOG_FILE);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunSink {
            dir: Some(dir.to_path_buf()),
            log: Some(BufWriter::new(file)),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")
                .map_err(|e| Error::io(Path::new(TRAIN_LOG_FILE), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            w.flush().map_err(|e| Error::io(Path::new(TRAIN_LOG_FILE), e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct DivergenceDump<'a> {
    stage: u8,
    step: usize,
    loss: f64,
    recent_losses: &'a [f64],
    non_finite_params: Vec<String>,
}

/// Per-epoch shuffled minibatches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, rng: Rng) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Settings for one optimization phase.
#[derive(Debug, Clone)]
pub struct PhaseOptions {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds batching and dropout.
    pub seed: u64,
    pub check_every: usize,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub losses: Vec<f64>,
    pub seconds: f64,
    pub trainable_params: usize,
}

/// Adam over the model's trainable parameters for `opts.steps` minibatches.
/// Aborts on a non-finite loss and checks every `check_every` steps that no
/// frozen tensor changed.
pub fn train_phase(
    model: &mut Model,
    data: &[Example],
    opts: &PhaseOptions,
    sink: &mut RunSink,
) -> Result<PhaseOutcome> {
    if data.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let stage_num = u8::from(opts.stage);
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr))?;
    let frozen = model.params().frozen_snapshot();
    let trainable_params = model.params().num_trainable_values();
    let mut batcher = Batcher::new(data.len(), rng_for(opts.seed, "batches"));
    let mut losses = Vec::with_capacity(opts.steps);
    let started = Instant::now();
    for step in 1..=opts.steps {
        let batch: Vec<Example> = batcher
            .next(opts.batch_size)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let dropout_seed = derive_seed(opts.seed, &format!("dropout/{step}"));
        model.params_mut().zero_grad();
        let (loss, grads) = {
            let mut g = Graph::new(model.params());
            let parts = model.build_loss(&mut g, &batch, opts.stage, Some(dropout_seed))?;
            let loss = g.value(parts.loss).item()?;
            if !loss.is_finite() {
                losses.push(loss);
                return Err(divergence(model, stage_num, step, loss, &losses, sink));
            }
            (loss, g.backward(parts.loss)?)
        };
        grads.accumulate_into(model.params_mut())?;
        adam.step(model.params_mut());
        losses.push(loss);
        sink.record(&LogRecord {
            step,
            loss,
            lr: opts.lr,
            stage: stage_num,
        })?;
        if step % opts.check_every == 0 || step == opts.steps {
            let changed = model.params().changed_since(&frozen);
            if !changed.is_empty() {
                return Err(Error::State(format!(
                    "frozen parameters changed: {}",
                    changed.join(", ")
                )));
            }
            log::debug!("stage {stage_num} step {step}: loss {loss:.4}");
        }
    }
    sink.flush()?;
    Ok(PhaseOutcome {
        losses,
        seconds: started.elapsed().as_secs_f64(),
        trainable_params,
    })
}

fn divergence(model: &Model, stage: u8, step: usize, loss: f64, losses: &[f64], sink: &mut RunSink) -> Error {
    let _ = sink.flush();
    if let Some(dir) = sink.dir() {
        let dump = DivergenceDump {
            stage,
            step,
            loss,
            recent_losses: &losses[losses.len().saturating_sub(20)..],
            non_finite_params: model
                .params()
                .iter()
                .filter(|(_, p)| !p.value.all_finite())
                .map(|(n, _)| n.to_string())
                .collect(),
        };
        let path = dir.join(DIVERGENCE_FILE);
        match serde_json::to_string_pretty(&dump) {
            Ok(text) => {
                if let Err(e) = fs::write(&path, text + "\n") {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => log::error!("could not serialize divergence dump: {e}"),
        }
    }
    Error::Divergence { stage, step, loss }
}

/// Marks exactly the MTA-layer parameters trainable.
pub fn freeze_non_mta(model: &mut Model) -> Result<()> {
    if model.stage() != Stage::Two {
        return Err(Error::State("freeze_non_mta called before promotion".into()));
    }
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let keep = model.is_mta_param(&name);
        model.params_mut().set_trainable(&name, keep)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub initial_loss: f64,
    /// Mean loss over the last steps of the stage.
    pub final_loss: f64,
    /// Per MTA layer, `softmax_T(W)` rows after the stage.
    pub task_weights: BTreeMap<String, Vec<Vec<f64>>>,
    /// Stage 2 only: per MTA layer and task, the mean gate output `W*` over the training data.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate_means: Option<BTreeMap<String, BTreeMap<String, [f64; 2]>>>,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage1: Option<StageReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scores_after_promotion: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage2: Option<StageReport>,
    /// Stage-2 trainable parameters divided by stage-1 trainable parameters.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trainable_ratio: Option<f64>,
    pub scores: Scores,
    pub examples: Vec<ExampleRecord>,
}

/// Wall-clock measurements, kept apart from the reproducible report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stage1_seconds: Option<f64>,
    pub stage1_step_seconds: Option<f64>,
    pub stage2_seconds: Option<f64>,
    pub stage2_step_seconds: Option<f64>,
    pub total_seconds: f64,
}

fn task_weight_snapshot(model: &Model) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    model
        .mta_layers()
        .map(|(i, l)| Ok((format!("layer{i}"), l.task_weight_distribution(model.params())?)))
        .collect()
}

/// Mean stage-2 gate output per MTA layer and task over `data`.
pub fn gate_means(
    model: &Model,
    suite: &TaskSuite,
    data: &[Example],
) -> Result<BTreeMap<String, BTreeMap<String, [f64; 2]>>> {
    let mut sums: BTreeMap<usize, Vec<([f64; 2], usize)>> = BTreeMap::new();
    for chunk in data.chunks(64) {
        let inputs: Vec<(&[usize], usize)> = chunk.iter().map(|e| (e.input_ids.as_slice(), e.task_id)).collect();
        for (layer, gates) in model.gate_values(&inputs)? {
            let acc = sums
                .entry(layer)
                .or_insert_with(|| vec![([0.0; 2], 0); suite.specs.len()]);
            for (r, e) in chunk.iter().enumerate() {
                let row = gates.row(r);
                acc[e.task_id].0[0] += row[0];
                acc[e.task_id].0[1] += row[1];
                acc[e.task_id].1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(layer, per_task)| {
            let m = per_task
                .into_iter()
                .enumerate()
                .filter(|(_, (_, n))| *n > 0)
                .map(|(t, (s, n))| {
                    (
                        suite.specs[t].task_type.name().to_string(),
                        [s[0] / n as f64, s[1] / n as f64],
                    )
                })
                .collect();
            (format!("layer{layer}"), m)
        })
        .collect())
}

fn stage_report(
    model: &Model,
    stage: Stage,
    opts: &PhaseOptions,
    outcome: &PhaseOutcome,
    scores: Scores,
    gates: Option<BTreeMap<String, BTreeMap<String, [f64; 2]>>>,
) -> Result<StageReport> {
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(LOSS_WINDOW)..];
    Ok(StageReport {
        stage: u8::from(stage),
        steps: opts.steps,
        lr: opts.lr,
        batch_size: opts.batch_size,
        trainable_params: outcome.trainable_params,
        total_params: model.num_params(),
        initial_loss: outcome.losses[0],
        final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
        task_weights: task_weight_snapshot(model)?,
        gate_means: gates,
        scores,
    })
}

pub fn stage1_options(cfg: &RunConfig) -> PhaseOptions {
    PhaseOptions {
        stage: Stage::One,
        steps: cfg.train.stage1_steps,
        lr: cfg.train.lr_stage1,
        batch_size: cfg.train.batch_size,
        seed: derive_seed(cfg.seed, "stage1"),
        check_every: cfg.train.eval_every,
    }
}

pub fn stage2_options(cfg: &RunConfig) -> PhaseOptions {
    PhaseOptions {
        stage: Stage::Two,
        steps: cfg.train.stage2_steps,
        lr: cfg.train.lr_stage2,
        batch_size: cfg.train.batch_size,
        seed: derive_seed(cfg.seed, "stage2"),
        check_every: cfg.train.eval_every,
    }
}

/// Promotes the MTA layers to stage 2 and, when `freeze` is set, freezes
/// every other parameter.
pub fn promote(model: &mut Model, cfg: &RunConfig, freeze: bool) -> Result<()> {
    model.promote_to_stage2(derive_seed(cfg.seed, "promote"))?;
    if freeze {
        freeze_non_mta(model)?;
    }
    Ok(())
}

pub fn evaluate_model(model: &Model, data: &Datasets, cfg: &RunConfig) -> Result<EvalReport> {
    evaluate(model, &data.suite, &data.test, model.stage(), cfg.train.max_new_tokens)
}

/// Result of a training run plus the trained model.
pub struct RunOutcome {
    pub model: Model,
    pub report: RunReport,
    pub timings: Timings,
}

/// Stage 1 from a fresh model.
pub fn run_stage1(cfg: &RunConfig, data: &Datasets, sink: &mut RunSink) -> Result<(Model, StageReport, PhaseOutcome)> {
    let mut model = Model::build(cfg.model.clone(), cfg.init_seed())?;
    let opts = stage1_options(cfg);
    let outcome = train_phase(&mut model, &data.train, &opts, sink)?;
    let eval = evaluate_model(&model, data, cfg)?;
    let report = stage_report(&model, Stage::One, &opts, &outcome, eval.scores, None)?;
    Ok((model, report, outcome))
}

/// Stage 2 on an already promoted model. Returns the stage report and the
/// final evaluation.
pub fn run_stage2(
    model: &mut Model,
    cfg: &RunConfig,
    data: &Datasets,
    sink: &mut RunSink,
) -> Result<(StageReport, PhaseOutcome, EvalReport)> {
    if model.stage() != Stage::Two {
        return Err(Error::State("stage-2 training requires a promoted model".into()));
    }
    let opts = stage2_options(cfg);
    let outcome = train_phase(model, &data.train, &opts, sink)?;
    let eval = evaluate_model(model, data, cfg)?;
    let gates = gate_means(model, &data.suite, &data.train)?;
    let report = stage_report(model, Stage::Two, &opts, &outcome, eval.scores, Some(gates))?;
    Ok((report, outcome, eval))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn per_step(o: &PhaseOutcome) -> f64 {
    o.seconds / o.losses.len().max(1) as f64
}

/// Runs the requested stages. Stage 2 alone resumes from
/// `{run_dir}/stage1.ckpt`. With a run directory, checkpoints, the training
/// log, `report.json` and `timings.json` are written there.
pub fn run_training(
    cfg: &RunConfig,
    data: &Datasets,
    select: StageSelect,
    run_dir: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut sink = match run_dir {
        Some(d) => {
            let log = d.join(TRAIN_LOG_FILE);
            if select != StageSelect::Two && log.exists() {
                fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
            }
            RunSink::in_dir(d)?
        }
        None => RunSink::none(),
    };
    let started = Instant::now();
    let mut timings = Timings::default();
    let mut stage1_report = None;
    let stage1_trainable;
    let mut model = match select {
        StageSelect::One | StageSelect::Both => {
            let (model, rep, outcome) = run_stage1(cfg, data, &mut sink)?;
            timings.stage1_seconds = Some(outcome.seconds);
            timings.stage1_step_seconds = Some(per_step(&outcome));
            stage1_trainable = Some(outcome.trainable_params);
            if let Some(d) = run_dir {
                checkpoint::save(&d.join(STAGE1_CKPT), &model, cfg.train.stage1_steps)?;
            }
            stage1_report = Some(rep);
            model
        }
        StageSelect::Two => {
            let dir = run_dir.ok_or_else(|| Error::State("stage 2 alone needs a run directory".into()))?;
            let (model, manifest) = checkpoint::load_expecting(&dir.join(STAGE1_CKPT), &cfg.model)?;
            if manifest.stage != Stage::One {
                return Err(Error::State("stage1.ckpt does not hold a stage-1 model".into()));
            }
            stage1_trainable = Some(model.num_params());
            model
        }
    };

    let mut scores_after_promotion = None;
    let mut stage2_report = None;
    let final_eval = if select == StageSelect::One || !model.has_mta() {
        if select != StageSelect::One {
            log::warn!("model has no MTA layers; skipping stage 2");
        }
        evaluate_model(&model, data, cfg)?
    } else {
        promote(&mut model, cfg, cfg.train.freeze_backbone)?;
        scores_after_promotion = Some(evaluate_model(&model, data, cfg)?.scores);
        let (rep, outcome, eval) = run_stage2(&mut model, cfg, data, &mut sink)?;
        timings.stage2_seconds = Some(outcome.seconds);
        timings.stage2_step_seconds = Some(per_step(&outcome));
        if let (Some(s1), Some(s2)) = (timings.stage1_step_seconds, timings.stage2_step_seconds) {
            if s2 >= s1 {
                log::warn!("stage-2 step time {s2:.4}s is not below stage-1 step time {s1:.4}s");
            }
        }
        if let Some(d) = run_dir {
            checkpoint::save(&d.join(STAGE2_CKPT), &model, cfg.train.stage2_steps)?;
        }
        stage2_report = Some(rep);
        eval
    };

    let trainable_ratio = match (&stage2_report, stage1_trainable) {
        (Some(s2), Some(s1)) => {
            let ratio = s2.trainable_params as f64 / s1 as f64;
            log::info!(
                "stage-2 trainable parameters: {} of {} ({:.2}%)",
                s2.trainable_params,
                s1,
                100.0 * ratio
            );
            Some(ratio)
        }
        _ => None,
    };
    let report = RunReport {
        seed: cfg.seed,
        dataset_fingerprint: data.fingerprint.clone(),
        n_train: data.train.len(),
        n_test: data.test.len(),
        stage1: stage1_report,
        scores_after_promotion,
        stage2: stage2_report,
        trainable_ratio,
        scores: final_eval.scores,
        examples: final_eval.examples,
    };
    timings.total_seconds = started.elapsed().as_secs_f64();
    if let Some(d) = run_dir {
        write_json(&d.join(REPORT_FILE), &report)?;
        write_json(&d.join(TIMINGS_FILE), &timings)?;
    }
    Ok(RunOutcome { model, report, timings })
}

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "vanilla", "no_stage2", "no_freeze"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Composite score per seed, in seed order.
    pub scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Export(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec!["variant".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        header.push("mean".into());
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.variant.clone()];
            rec.extend(r.scores.iter().map(|v| v.to_string()));
            rec.push(r.mean.to_string());
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Composite scores of the four training strategies for one seed, in
/// [`ABLATION_VARIANTS`] order. All four consume the same dataset.
pub fn ablation_scores(cfg: &RunConfig, data: &Datasets) -> Result<[f64; 4]> {
    cfg.validate()?;
    if cfg.model.mta_layer_indices.is_empty() {
        return Err(Error::Config(vec!["ablations need at least one MTA layer".into()]));
    }
    let (stage1, s1_report, _) = run_stage1(cfg, data, &mut RunSink::none())?;
    ablation_scores_from_stage1(cfg, data, stage1, s1_report.scores.composite)
}

/// [`ablation_scores`] reusing an already trained stage-1 model and its
/// composite score.
pub fn ablation_scores_from_stage1(
    cfg: &RunConfig,
    data: &Datasets,
    stage1: Model,
    no_stage2: f64,
) -> Result<[f64; 4]> {
    if stage1.stage() != Stage::One {
        return Err(Error::State("ablations start from an unpromoted stage-1 model".into()));
    }
    let mut sink = RunSink::none();
    let mut full = stage1.clone();
    promote(&mut full, cfg, true)?;
    let (_, _, full_eval) = run_stage2(&mut full, cfg, data, &mut sink)?;

    let mut no_freeze = stage1;
    promote(&mut no_freeze, cfg, false)?;
    let (_, _, nf_eval) = run_stage2(&mut no_freeze, cfg, data, &mut sink)?;

    // Same fine-tuning run as stage 1, with a plain FFN in place of the MTA block.
    let mut vanilla_cfg = cfg.clone();
    vanilla_cfg.model.mta_layer_indices.clear();
    let (_, vanilla_report, _) = run_stage1(&vanilla_cfg, data, &mut sink)?;

    Ok([
        full_eval.scores.composite,
        vanilla_report.scores.composite,
        no_stage2,
        nf_eval.scores.composite,
    ])
}

/// Runs [`ablation_scores`] for every seed; each seed also selects its own dataset
/// unless the config points at a fixed data directory.
pub fn run_ablations(cfg: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config(vec!["at least one seed is required".into()]));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let data = c.datasets()?;
        let scores = ablation_scores(&c, &data)?;
        log::info!("seed {seed}: {:?}", scores);
        per_seed.push(scores);
    }
    Ok(AblationTable::from_scores(seeds, &per_seed))
}

impl AblationTable {
    /// Table from per-seed scores in [`ABLATION_VARIANTS`] order.
    pub fn from_scores(seeds: &[u64], per_seed: &[[f64; 4]]) -> Self {
        let rows = ABLATION_VARIANTS
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let scores: Vec<f64> = per_seed.iter().map(|s| s[i]).collect();
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                AblationRow {
                    variant: v.to_string(),
                    scores,
                    mean,
                }
            })
            .collect();
        AblationTable {
            seeds: seeds.to_vec(),
            rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 16;
        cfg.model.d_ff = 32;
        cfg.model.n_heads = 2;
        cfg.train.stage1_steps = 6;
        cfg.train.stage2_steps = 4;
        cfg.train.batch_size = 4;
        cfg.train.eval_every = 2;
        cfg.train.max_new_tokens = 4;
        cfg.data.n_train_per_task = 8;
        cfg.data.n_test_per_task = 2;
        cfg
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(10, rng_for(0, "t"));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn freeze_requires_promotion_and_selects_mta() {
        let cfg = small_cfg();
        let mut m = Model::build(cfg.model.clone(), 0).unwrap();
        assert!(matches!(freeze_non_mta(&mut m), Err(Error::State(_))));
        promote(&mut m, &cfg, true).unwrap();
        let trainable = m.params().trainable_names();
        let mut expected: Vec<String> = m.mta_layers().flat_map(|(_, l)| l.expected_param_names()).collect();
        expected.sort();
        assert_eq!(trainable, expected);
    }

    #[test]
    fn stage2_leaves_backbone_bit_identical() {
        let cfg = small_cfg();
        let data = cfg.datasets().unwrap();
        let (mut m, _, _) = run_stage1(&cfg, &data, &mut RunSink::none()).unwrap();
        promote(&mut m, &cfg, true).unwrap();
        let before = m.params().frozen_snapshot();
        let mta_before: Vec<_> = m.params().trainable_names();
        let adapter0 = m
            .params()
            .value(&format!(
                "{}.down.w",
                m.mta_layers().next().unwrap().1.adapter_prefix(0)
            ))
            .unwrap()
            .clone();
        run_stage2(&mut m, &cfg, &data, &mut RunSink::none()).unwrap();
        assert!(m.params().changed_since(&before).is_empty());
        assert!(!mta_before.is_empty());
        let after = m
            .params()
            .value(&format!(
                "{}.down.w",
                m.mta_layers().next().unwrap().1.adapter_prefix(0)
            ))
            .unwrap();
        assert!(!after.bit_eq(&adapter0));
    }

    #[test]
    fn divergence_aborts_with_dump() {
        let cfg = small_cfg();
        let data = cfg.datasets().unwrap();
        let mut m = Model::build(cfg.model.clone(), 0).unwrap();
        let mut t = m.params().value("enc.0.ln1.g").unwrap().clone();
        t.data_mut()[0] = f64::NAN;
        m.params_mut().set_value("enc.0.ln1.g", t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut sink = RunSink::in_dir(dir.path()).unwrap();
        let err = train_phase(&mut m, &data.train, &stage1_options(&cfg), &mut sink).unwrap_err();
        assert!(matches!(err, Error::Divergence { stage: 1, step: 1, .. }));
        let dump = fs::read_to_string(dir.path().join(DIVERGENCE_FILE)).unwrap();
        assert!(dump.contains("enc.0.ln1.g"));
    }

    #[test]
    fn run_writes_artifacts_and_is_reproducible() {
        let cfg = small_cfg();
        let data = cfg.datasets().unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_training(&cfg, &data, StageSelect::Both, Some(a.path())).unwrap();
        run_training(&cfg, &data, StageSelect::Both, Some(b.path())).unwrap();
        for f in [REPORT_FILE, STAGE1_CKPT, STAGE2_CKPT, TRAIN_LOG_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let log = fs::read_to_string(a.path().join(TRAIN_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), cfg.train.stage1_steps + cfg.train.stage2_steps);
        let rec: LogRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!((rec.step, rec.stage), (1, 1));
        let ratio = ra.report.trainable_ratio.unwrap();
        assert!(ratio > 0.0 && ratio < 1.0);
        assert!(ra.report.stage2.as_ref().unwrap().gate_means.is_some());
    }

    #[test]
    fn stage2_resumes_from_stage1_checkpoint() {
        let cfg = small_cfg();
        let data = cfg.datasets().unwrap();
        let both = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let full = run_training(&cfg, &data, StageSelect::Both, Some(both.path())).unwrap();
        run_training(&cfg, &data, StageSelect::One, Some(split.path())).unwrap();
        let resumed = run_training(&cfg, &data, StageSelect::Two, Some(split.path())).unwrap();
        assert!(resumed.model.params().bit_eq(full.model.params()));
        assert_eq!(resumed.report.scores, full.report.scores);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_training(&cfg, &data, StageSelect::Two, Some(empty.path())),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn ablation_table_shape() {
        let cfg = small_cfg();
        let table = run_ablations(&cfg, &[1, 2]).unwrap();
        assert_eq!(table.rows.len(), 4);
        for r in &table.rows {
            assert_eq!(r.scores.len(), 2);
            assert!((r.mean - (r.scores[0] + r.scores[1]) / 2.0).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        table.write_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("variant,seed_1,seed_2,mean\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
