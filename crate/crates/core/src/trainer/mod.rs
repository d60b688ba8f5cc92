//! Adapter training: the disjoint parameter-group registry, single steps with
//! group routing, the joint caption/instruction loop and its ablations.

mod registry;
mod schedule;

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use registry::{build_registry, Group, ParamGroupRegistry};
pub use schedule::{Schedule, StreamCursor};

use crate::adapter::{forward_adapted_vars, AdaptedInput, AdapterState, AdapterVars, FusionMode};
use crate::backbone::{BackboneWeights, LogitRows};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Tape, Tensor, Var};

/// A tokenized training sequence. `loss_mask[i]` marks whether token `i` is
/// predicted (response tokens and the closing EOS).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<f32>,
    pub features: Option<Vec<f32>>,
}

/// Which data stream a batch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Caption,
    Instruction,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Caption => "caption",
            Stream::Instruction => "instruction",
        }
    }

    /// The parameter group this stream trains under disjoint routing.
    pub fn group(self) -> Group {
        match self {
            Stream::Caption => Group::Caption,
            Stream::Instruction => Group::Instruction,
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which tensors a step may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    Only(Group),
    All,
}

/// Training regime. `Joint` is the disjoint-group recipe; the rest are
/// baselines for comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Joint,
    CaptionOnly,
    InstructionOnly,
    /// Same batch schedule as `Joint`, but every batch updates every tensor.
    NaiveMixed,
    /// Same batch schedule as `Joint`, global visual feature added to the
    /// prompts instead of early fusion, every batch updates every tensor.
    V1Style,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Joint,
        TrainMode::CaptionOnly,
        TrainMode::InstructionOnly,
        TrainMode::NaiveMixed,
        TrainMode::V1Style,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::CaptionOnly => "caption_only",
            TrainMode::InstructionOnly => "instruction_only",
            TrainMode::NaiveMixed => "naive_mixed",
            TrainMode::V1Style => "v1_style",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn fusion(self) -> FusionMode {
        match self {
            TrainMode::V1Style => FusionMode::V1,
            _ => FusionMode::Early,
        }
    }

    fn scope(self, stream: Stream) -> UpdateScope {
        match self {
            TrainMode::NaiveMixed | TrainMode::V1Style => UpdateScope::All,
            _ => UpdateScope::Only(stream.group()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTrainConfig {
    pub caption_lr: f32,
    pub instruction_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    /// Caption batches per instruction batch.
    pub ratio: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            caption_lr: 1e-3,
            instruction_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            ratio: 1,
            batch_size: 8,
            steps: 2000,
            seed: 0,
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.ratio == 0 {
            return bad("mixing ratio must be at least 1");
        }
        if !(self.caption_lr > 0.0 && self.instruction_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("optimizer betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("weight_decay must be non-negative and clip_norm positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.instruction_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: Some(self.clip_norm),
        }
    }

    pub fn lr(&self, group: Group) -> f32 {
        match group {
            Group::Caption => self.caption_lr,
            Group::Instruction => self.instruction_lr,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stream: Stream,
    pub loss: f32,
    pub lr: f32,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub records: Vec<StepRecord>,
    pub adapter: AdapterState,
}

impl TrainReport {
    pub fn losses(&self, stream: Stream) -> Vec<f32> {
        self.records.iter().filter(|r| r.stream == stream).map(|r| r.loss).collect()
    }

    /// Mean loss of `stream` over the first and last `fraction` of its steps.
    pub fn window_means(&self, stream: Stream, fraction: f64) -> Option<(f64, f64)> {
        let l = self.losses(stream);
        if l.is_empty() {
            return None;
        }
        let w = ((l.len() as f64 * fraction).ceil() as usize).clamp(1, l.len());
        let mean = |s: &[f32]| s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64;
        Some((mean(&l[..w]), mean(&l[l.len() - w..])))
    }

    /// Write the step log as JSON lines.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mutable training state over a frozen backbone.
pub struct Trainer<'a> {
    backbone: &'a BackboneWeights,
    adapter: AdapterState,
    registry: ParamGroupRegistry,
    optimizer: AdamW,
    config: JointTrainConfig,
    fusion: FusionMode,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        backbone: &'a BackboneWeights,
        adapter: AdapterState,
        config: JointTrainConfig,
        fusion: FusionMode,
    ) -> Result<Self> {
        config.validate()?;
        if !backbone.is_frozen() {
            return Err(Error::InvalidConfig("adapter training needs a frozen backbone".into()));
        }
        crate::adapter::check_backbone_match(&backbone.config, &adapter.backbone)?;
        let registry = build_registry(&adapter)?;
        Ok(Self {
            backbone,
            adapter,
            registry,
            optimizer: AdamW::new(config.optimizer()),
            config,
            fusion,
            step: 0,
        })
    }

    pub fn adapter(&self) -> &AdapterState {
        &self.adapter
    }

    pub fn into_adapter(self) -> AdapterState {
        self.adapter
    }

    pub fn registry(&self) -> &ParamGroupRegistry {
        &self.registry
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Masked next-token loss of a batch under the current adapter, without
    /// touching any state.
    pub fn loss(&self, examples: &[&TrainExample]) -> Result<f32> {
        let (inputs, targets, mask) = flatten(examples)?;
        let mut tape = Tape::<f32>::new();
        let (loss, _) = self.build(&mut tape, &inputs, &targets, &mask)?;
        Ok(tape.scalar(loss))
    }

    fn build<'t>(
        &'t self,
        tape: &mut Tape<'t, f32>,
        inputs: &[AdaptedInput<'_>],
        targets: &[usize],
        mask: &[f32],
    ) -> Result<(Var, Vec<Var>)> {
        let bv = self.backbone.bind(tape);
        let vars: Vec<Var> = self.adapter.tensors().into_iter().map(|(_, t)| tape.param(t)).collect();
        let av = AdapterVars::from_slice(&self.backbone.config, &self.adapter.config, &vars);
        let logits = forward_adapted_vars(
            tape,
            &self.backbone.config,
            &self.adapter.config,
            &bv,
            &av,
            inputs,
            LogitRows::All,
            self.fusion,
        )?;
        Ok((tape.cross_entropy_masked(logits, targets, mask)?, vars))
    }

    /// Forward, backward and one optimizer update restricted to `scope`.
    /// Gradients that fall outside the scope are dropped unapplied.
    pub fn train_step(&mut self, stream: Stream, examples: &[&TrainExample], scope: UpdateScope) -> Result<f32> {
        let step = self.step;
        let fail = |reason: String| Error::Training {
            step,
            stream: stream.as_str().to_string(),
            reason,
        };
        let (inputs, targets, mask) = flatten(examples)?;
        let (loss, grads) = {
            let mut tape = Tape::<f32>::new();
            let (loss, vars) = self.build(&mut tape, &inputs, &targets, &mask)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(fail(format!("loss is {value}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect();
            (value, grads)
        };

        let registry = &self.registry;
        let in_scope = |name: &str| match scope {
            UpdateScope::All => true,
            UpdateScope::Only(g) => registry.group_of(name) == Some(g),
        };
        let mut params: Vec<(String, &mut Tensor)> = Vec::new();
        for ((name, t), g) in self.adapter.tensors_mut().into_iter().zip(grads) {
            t.take_grad();
            if let (true, Some(g)) = (in_scope(&name), g) {
                t.accumulate_grad(&g);
                params.push((name, t));
            }
        }
        let mut refs: Vec<(&str, &mut Tensor)> =
            params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        let config = &self.config;
        let norm = self
            .optimizer
            .step_each(&mut refs, |name| config.lr(registry.group_of(name).unwrap_or(Group::Instruction)));
        for (_, t) in refs.iter_mut() {
            t.take_grad();
        }
        if !norm.is_finite() {
            return Err(fail(format!("gradient norm is {norm}")));
        }
        if refs.iter().any(|(_, t)| !t.is_finite()) {
            return Err(fail("non-finite adapter weights after update".into()));
        }
        self.step += 1;
        Ok(loss)
    }
}

type Flat<'e> = (Vec<AdaptedInput<'e>>, Vec<usize>, Vec<f32>);

/// Shift each example into (inputs, next-token targets, target mask).
fn flatten<'e>(examples: &[&'e TrainExample]) -> Result<Flat<'e>> {
    if examples.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let mut inputs = Vec::with_capacity(examples.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for ex in examples {
        if ex.tokens.len() < 2 || ex.loss_mask.len() != ex.tokens.len() {
            return Err(Error::Dataset(format!(
                "training example needs >= 2 tokens and a mask of equal length (got {} and {})",
                ex.tokens.len(),
                ex.loss_mask.len()
            )));
        }
        let n = ex.tokens.len();
        inputs.push(AdaptedInput {
            tokens: &ex.tokens[..n - 1],
            features: ex.features.as_deref(),
        });
        targets.extend_from_slice(&ex.tokens[1..]);
        mask.extend_from_slice(&ex.loss_mask[1..]);
    }
    Ok((inputs, targets, mask))
}

/// Training step-by-step under a mode's schedule and routing, so callers
/// can inspect the adapter between steps.
pub struct TrainSession<'a, 'd> {
    trainer: Trainer<'a>,
    mode: TrainMode,
    schedule: Schedule,
    caption: StreamCursor<'d>,
    instruction: StreamCursor<'d>,
    records: Vec<StepRecord>,
}

impl<'a, 'd> TrainSession<'a, 'd> {
    pub fn new(
        backbone: &'a BackboneWeights,
        adapter: AdapterState,
        captions: &'d [TrainExample],
        instructions: &'d [TrainExample],
        mode: TrainMode,
        config: &JointTrainConfig,
    ) -> Result<Self> {
        let schedule = match mode {
            TrainMode::CaptionOnly => Schedule::only(Stream::Caption),
            TrainMode::InstructionOnly => Schedule::only(Stream::Instruction),
            _ => Schedule::interleaved(config.ratio),
        };
        for s in [Stream::Caption, Stream::Instruction] {
            let data = if s == Stream::Caption { captions } else { instructions };
            if schedule.uses(s) && data.is_empty() {
                return Err(Error::Dataset(format!("{s} stream is empty")));
            }
        }
        let trainer = Trainer::new(backbone, adapter, config.clone(), mode.fusion())?;
        Ok(Self {
            trainer,
            mode,
            schedule,
            caption: StreamCursor::new(captions, config.seed ^ 0xCA),
            instruction: StreamCursor::new(instructions, config.seed ^ 0x1A),
            records: Vec::new(),
        })
    }

    pub fn adapter(&self) -> &AdapterState {
        self.trainer.adapter()
    }

    pub fn trainer(&self) -> &Trainer<'a> {
        &self.trainer
    }

    /// The stream the next step will draw from.
    pub fn next_stream(&self) -> Stream {
        self.schedule.stream_at(self.trainer.steps_done())
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.trainer.steps_done();
        let stream = self.next_stream();
        let bs = self.trainer.config.batch_size;
        let batch = match stream {
            Stream::Caption => self.caption.next_batch(bs),
            Stream::Instruction => self.instruction.next_batch(bs),
        };
        let scope = self.mode.scope(stream);
        let loss = self.trainer.train_step(stream, &batch, scope)?;
        let lr = match scope {
            UpdateScope::Only(g) => self.trainer.config.lr(g),
            UpdateScope::All => self.trainer.config.lr(stream.group()),
        };
        let record = StepRecord { step, stream, loss, lr };
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn finish(self) -> TrainReport {
        TrainReport {
            mode: self.mode,
            records: self.records,
            adapter: self.trainer.into_adapter(),
        }
    }
}

/// The disjoint-group joint recipe: `config.ratio` caption batches per
/// instruction batch, each updating only its own group.
pub fn joint_train(
    backbone: &BackboneWeights,
    adapter: AdapterState,
    captions: &[TrainExample],
    instructions: &[TrainExample],
    config: &JointTrainConfig,
) -> Result<TrainReport> {
    ablation_train(TrainMode::Joint, backbone, adapter, captions, instructions, config)
}

/// Train under any [`TrainMode`] for `config.steps` steps.
pub fn ablation_train(
    mode: TrainMode,
    backbone: &BackboneWeights,
    adapter: AdapterState,
    captions: &[TrainExample],
    instructions: &[TrainExample],
    config: &JointTrainConfig,
) -> Result<TrainReport> {
    let mut session = TrainSession::new(backbone, adapter, captions, instructions, mode, config)?;
    for _ in 0..config.steps {
        session.step()?;
    }
    Ok(session.finish())
}
