//! Staged optimization of the caption loss, checkpointing and evaluation.

pub mod checkpoint;
pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::{Fault, Tape};
use crate::bridge::{Vocabulary, PROMPT};
use crate::data::{all_captions, iterate, CaptionRecord, Dataset, Item};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalCorpus, EvalEntry, MetricReport};
use crate::model::{ChangeCaptioner, SampleGrad};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::params::Group;
use crate::rng::derive_seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use config::{Config, DataConfig, StageConfig, StageSettings, TrainSettings};

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for per-sample gradients; 0 or 1 runs inline.
    pub threads: usize,
    /// Corrupts backward passes (verification only).
    pub fault: Option<Fault>,
}

impl RunOptions {
    /// Reads `CCX_THREADS`, defaulting to one worker.
    pub fn from_env() -> Self {
        let threads = std::env::var("CCX_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
        RunOptions { threads, fault: None }
    }
}

/// Training records with their images and tokenized captions.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub dataset: Dataset,
    /// Caption token ids per record, per caption.
    pub captions: Vec<Vec<Vec<usize>>>,
}

impl TrainData {
    pub fn new(dataset: Dataset, vocab: &Vocabulary) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid("train_data", "no training records"));
        }
        let captions = dataset
            .records
            .iter()
            .map(|r| r.captions.iter().map(|c| vocab.encode(c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData { dataset, captions })
    }

    pub fn records(&self) -> &[CaptionRecord] {
        &self.dataset.records
    }
}

/// Prompt, every template caption, then every caption in `records`.
pub fn build_vocabulary(records: &[CaptionRecord]) -> Result<Vocabulary> {
    let templates = all_captions();
    let texts = std::iter::once(PROMPT)
        .chain(templates.iter().map(String::as_str))
        .chain(records.iter().flat_map(|r| r.captions.iter().map(String::as_str)));
    Vocabulary::build(texts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub stage: u8,
    pub epoch: u64,
    pub mean_loss: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub epochs: Vec<EpochReport>,
    pub steps: usize,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
}

fn sample_grads(model: &ChangeCaptioner, cfg: &StageConfig, data: &TrainData, batch: &[Item], options: &RunOptions) -> Vec<Result<SampleGrad>> {
    let one = |item: &Item| {
        let tape = match options.fault {
            Some(f) => Tape::new().with_fault(f),
            None => Tape::new(),
        };
        let (a, b) = &data.dataset.images[item.record];
        model.sample_grad(&tape, cfg.trainable, a, b, &data.captions[item.record][item.caption])
    };
    let threads = options.threads.max(1).min(batch.len());
    if threads <= 1 {
        return batch.iter().map(one).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch.chunks(chunk).map(|c| s.spawn(move || c.iter().map(one).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Mean-over-batch gradients accumulated onto the parameter store, in
/// sample order regardless of thread count. Returns the mean loss.
pub fn accumulate_batch_grads(model: &mut ChangeCaptioner, cfg: &StageConfig, data: &TrainData, batch: &[Item], options: &RunOptions) -> Result<f64> {
    model.store.zero_grads();
    let results = sample_grads(model, cfg, data, batch, options);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for r in results {
        let sg = r?;
        loss += sg.loss;
        for (id, g) in sg.grads {
            let scaled: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
            model.store.get_mut(id).tensor.accumulate_grad(&scaled);
        }
    }
    Ok(loss * scale)
}

/// One optimizer step on `batch`: gradients, clipping, AdamW.
pub fn train_step(model: &mut ChangeCaptioner, opt: &mut AdamW, cfg: &StageConfig, data: &TrainData, batch: &[Item], options: &RunOptions) -> Result<StepOutcome> {
    let loss = accumulate_batch_grads(model, cfg, data, batch, options)?;
    let groups: Vec<Group> = cfg.trainable.iter().collect();
    let grad_norm = clip_grad_norm(&mut model.store, &groups, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient" });
    }
    opt.step(&mut model.store, &cfg.lr_map())?;
    model.store.zero_grads();
    Ok(StepOutcome { loss, grad_norm })
}

/// Runs one stage. Parameters of frozen groups are never written.
pub fn train_stage(
    model: &mut ChangeCaptioner,
    opt: &mut AdamW,
    cfg: &StageConfig,
    data: &TrainData,
    seed: u64,
    options: &RunOptions,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<StageReport> {
    let stage_seed = derive_seed(seed, 100 + cfg.stage as u64);
    let mut report = StageReport {
        stage: cfg.stage,
        epochs: Vec::new(),
        steps: 0,
    };
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..cfg.epochs as u64 {
        if report.steps >= budget {
            break;
        }
        let start = Instant::now();
        let items = iterate(data.records(), cfg.mode, stage_seed, epoch)?;
        let (mut total, mut steps) = (0.0, 0);
        for (b, batch) in items.chunks(cfg.batch_size).enumerate() {
            if report.steps >= budget {
                break;
            }
            let outcome = train_step(model, opt, cfg, data, batch, options).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NumericAbort {
                    stage: cfg.stage,
                    epoch,
                    batch: b,
                },
                other => other,
            })?;
            total += outcome.loss;
            steps += 1;
            report.steps += 1;
        }
        let e = EpochReport {
            stage: cfg.stage,
            epoch,
            mean_loss: total / steps.max(1) as f64,
            steps,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&e);
        report.epochs.push(e);
    }
    Ok(report)
}

/// Result of `run_pipeline`.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: ChangeCaptioner,
    pub optimizer: AdamW,
    pub state: TrainState,
    pub reports: Vec<StageReport>,
    /// Checkpoint written after each executed stage.
    pub checkpoints: Vec<PathBuf>,
}

impl PipelineOutcome {
    pub fn final_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }
}

/// Which stages to run and where to start from.
#[derive(Debug, Clone)]
pub struct PipelinePlan {
    pub stages: Vec<u8>,
    pub resume: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl PipelinePlan {
    pub fn all(out_dir: impl Into<PathBuf>) -> Self {
        PipelinePlan {
            stages: vec![1, 2, 3],
            resume: None,
            out_dir: out_dir.into(),
        }
    }
}

/// Runs the requested stages in order, writing `stage<k>/` checkpoints
/// under `plan.out_dir`.
pub fn run_pipeline(config: &Config, plan: &PipelinePlan, options: &RunOptions, on_epoch: &mut dyn FnMut(&EpochReport)) -> Result<PipelineOutcome> {
    config.validate()?;
    if plan.stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("stages must be increasing, got {:?}", plan.stages)));
    }
    let (mut model, mut opt, mut state) = match &plan.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.state.fingerprint != config.fingerprint() {
                return Err(Error::Config(format!("checkpoint {} was trained with different model dimensions", dir.display())));
            }
            if let Some(&first) = plan.stages.first() {
                if first <= ck.state.stage {
                    return Err(Error::Config(format!(
                        "checkpoint already completed stage {}, cannot run stage {first}",
                        ck.state.stage
                    )));
                }
            }
            (ck.model, ck.optimizer, ck.state)
        }
        None => {
            let records = crate::data::load_manifest(&config.data.manifest)?;
            let vocab = build_vocabulary(&records)?;
            let model = ChangeCaptioner::new(config.model(), vocab, config.seed)?;
            let opt = AdamW::new(AdamWConfig::default(), &model.store);
            let state = TrainState {
                stage: 0,
                epoch: 0,
                step: 0,
                rng_seed: config.seed,
                rng_counter: 0,
                adam_steps: Default::default(),
                fingerprint: config.fingerprint(),
            };
            (model, opt, state)
        }
    };
    let dataset = Dataset::load(&config.data.manifest, Some(config.data.train_split))?;
    let data = TrainData::new(dataset, &model.vocab)?;
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    for &s in &plan.stages {
        let cfg = config.stage(s)?;
        if !(s == 1 && config.train.skip_stage1) {
            if config.train.reset_moments {
                opt = AdamW::new(AdamWConfig::default(), &model.store);
            }
            let report = train_stage(&mut model, &mut opt, &cfg, &data, config.seed, options, on_epoch)?;
            state.step += report.steps as u64;
            state.epoch = report.epochs.len() as u64;
            reports.push(report);
        }
        state.stage = s;
        state.adam_steps = opt.steps.clone();
        let dir = plan.out_dir.join(format!("stage{s}"));
        save_checkpoint(&dir, config, &model, &opt, &state)?;
        checkpoints.push(dir);
    }
    Ok(PipelineOutcome {
        model,
        optimizer: opt,
        state,
        reports,
        checkpoints,
    })
}

/// Generated captions and their scores.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    /// `(record id, generated caption)` in dataset order.
    pub captions: Vec<(String, String)>,
    /// Fraction of pairs whose caption equals one of its references.
    pub exact_match: f64,
    pub truncated: usize,
}

pub fn evaluate_model(model: &ChangeCaptioner, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate", "evaluation split is empty"));
    }
    let mut entries = Vec::with_capacity(dataset.len());
    let mut captions = Vec::with_capacity(dataset.len());
    let (mut exact, mut truncated) = (0usize, 0usize);
    for (r, (a, b)) in dataset.records.iter().zip(&dataset.images) {
        let g = model.caption(a, b)?;
        let entry = EvalEntry::from_text(r.id.clone(), &g.text, &r.captions)?;
        if entry.refs.iter().any(|x| x == &entry.hyp) {
            exact += 1;
        }
        truncated += g.truncated as usize;
        entries.push(entry);
        captions.push((r.id.clone(), g.text));
    }
    Ok(Evaluation {
        report: evaluate(&EvalCorpus::new(entries))?,
        exact_match: exact as f64 / dataset.len() as f64,
        captions,
        truncated,
    })
}

pub fn evaluate_checkpoint(dir: &Path, manifest: &Path, split: crate::data::Split) -> Result<Evaluation> {
    let ck = load_checkpoint(dir)?;
    let dataset = Dataset::load(manifest, Some(split))?;
    evaluate_model(&ck.model, &dataset)
}
