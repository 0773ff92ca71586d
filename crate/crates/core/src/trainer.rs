//! Toy end-to-end training: a two-layer embedding network in front of the
//! sharded partial classification layer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasynth::SyntheticDataset;
use crate::error::{Error, Result};
use crate::loss::MarginConfig;
use crate::metrics::{self, DiagnosticsSnapshot, VerificationReport};
use crate::numerics::{domain, l2_normalize_columns, matmul, matmul_tn, sample_without_replacement, Matrix, SeededRng, NORM_EPS};
use crate::sampler::ShardLayout;
use crate::shardsim::{
    all_gather_features, distributed_partial_step, init_shards, CenterShard, FeatureBatch, StepConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub power: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64, power: f64) -> Result<Self> {
        if !(base_lr > 0.0) || warmup_steps >= total_steps || !(power > 0.0) {
            return Err(Error::Config(format!(
                "schedule needs base_lr > 0, warmup < total, power > 0 \
                 (got {base_lr}, {warmup_steps}, {total_steps}, {power})"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
            power,
        })
    }
}

/// Linear warmup from 0 to `base_lr`, then polynomial decay to 0 at `total_steps`.
pub fn lr_at(schedule: &Schedule, step: u64) -> Result<f64> {
    let Schedule {
        base_lr,
        warmup_steps,
        total_steps,
        power,
    } = *schedule;
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond schedule end {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * (1.0 - progress).powf(power))
}

/// `embedding = W2 · tanh(W1 · x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations kept from a forward pass.
pub struct ForwardCache {
    pub hidden: Matrix,
    pub output: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGrad {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Backbone {
    pub fn init(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::keyed(seed, domain::INIT, 1, 0);
        let n1 = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        let w1 = Matrix::from_fn(hidden, input_dim, |_, _| n1.sample(&mut rng));
        let w2 = Matrix::from_fn(output_dim, hidden, |_, _| n2.sample(&mut rng));
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward_cached(&self, inputs: &Matrix) -> Result<ForwardCache> {
        let mut hidden = matmul(&self.w1, inputs)?;
        for r in 0..hidden.rows() {
            for c in 0..hidden.cols() {
                hidden[(r, c)] = (hidden[(r, c)] + self.b1[r]).tanh();
            }
        }
        let mut output = matmul(&self.w2, &hidden)?;
        for r in 0..output.rows() {
            for c in 0..output.cols() {
                output[(r, c)] += self.b2[r];
            }
        }
        Ok(ForwardCache { hidden, output })
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.output)
    }

    /// Parameter gradients for upstream gradient `d_output` (`D × N`).
    pub fn gradients(&self, inputs: &Matrix, cache: &ForwardCache, d_output: &Matrix) -> Result<BackboneGrad> {
        if d_output.shape() != cache.output.shape() {
            return Err(Error::Shape {
                op: "Backbone::gradients",
                left: cache.output.shape(),
                right: d_output.shape(),
            });
        }
        let w2 = matmul(d_output, &cache.hidden.transpose())?;
        let b2 = (0..d_output.rows()).map(|r| d_output.row(r).iter().sum()).collect();
        let mut d_pre = matmul_tn(&self.w2, d_output)?;
        for r in 0..d_pre.rows() {
            for c in 0..d_pre.cols() {
                let h = cache.hidden[(r, c)];
                d_pre[(r, c)] *= 1.0 - h * h;
            }
        }
        let w1 = matmul(&d_pre, &inputs.transpose())?;
        let b1 = (0..d_pre.rows()).map(|r| d_pre.row(r).iter().sum()).collect();
        Ok(BackboneGrad { w1, b1, w2, b2 })
    }

    pub fn apply(&mut self, grad: &BackboneGrad, lr: f64) {
        let step = |p: &mut [f64], g: &[f64]| {
            for (w, d) in p.iter_mut().zip(g) {
                *w -= lr * d;
            }
        };
        step(self.w1.as_mut_slice(), grad.w1.as_slice());
        step(&mut self.b1, &grad.b1);
        step(self.w2.as_mut_slice(), grad.w2.as_slice());
        step(&mut self.b2, &grad.b2);
    }

    /// All parameters flattened in the order w1, b1, w2, b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend(&self.b1);
        out.extend(self.w2.as_slice());
        out.extend(&self.b2);
        out
    }

    pub fn unflatten(&self, params: &[f64]) -> Result<Backbone> {
        let mut out = self.clone();
        let sizes = [out.w1.as_slice().len(), out.b1.len(), out.w2.as_slice().len(), out.b2.len()];
        if params.len() != sizes.iter().sum::<usize>() {
            return Err(Error::Shape {
                op: "Backbone::unflatten",
                left: (sizes.iter().sum(), 1),
                right: (params.len(), 1),
            });
        }
        let (a, rest) = params.split_at(sizes[0]);
        let (b, rest) = rest.split_at(sizes[1]);
        let (c, d) = rest.split_at(sizes[2]);
        out.w1.as_mut_slice().copy_from_slice(a);
        out.b1.copy_from_slice(b);
        out.w2.as_mut_slice().copy_from_slice(c);
        out.b2.copy_from_slice(d);
        Ok(out)
    }
}

impl BackboneGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend(&self.b1);
        out.extend(self.w2.as_slice());
        out.extend(&self.b2);
        out
    }
}

/// Forward, backward with upstream `d_features`, and one plain SGD step.
pub fn backbone_forward_backward(
    mut bb: Backbone,
    inputs: &Matrix,
    d_features: &Matrix,
    lr: f64,
) -> Result<Backbone> {
    if inputs.rows() != bb.input_dim() {
        return Err(Error::Shape {
            op: "backbone_forward_backward",
            left: (bb.input_dim(), inputs.cols()),
            right: inputs.shape(),
        });
    }
    let cache = bb.forward_cached(inputs)?;
    let grad = bb.gradients(inputs, &cache, d_features)?;
    bb.apply(&grad, lr);
    Ok(bb)
}

/// Sampling ratio, or "batch" for a buffer that holds roughly one batch worth of classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplingRatio {
    Fixed(f64),
    Named(BatchOnly),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchOnly {
    Batch,
}

impl SamplingRatio {
    pub const BATCH_ONLY: SamplingRatio = SamplingRatio::Named(BatchOnly::Batch);

    /// Concrete ratio for `num_classes` classes and batch size `batch`: `B / C` for batch-only.
    pub fn resolve(&self, num_classes: usize, batch: usize) -> f64 {
        match self {
            SamplingRatio::Fixed(r) => *r,
            SamplingRatio::Named(BatchOnly::Batch) => (batch as f64 / num_classes as f64).min(1.0),
        }
    }

    pub fn label(&self) -> String {
        match self {
            SamplingRatio::Fixed(r) => format!("{r}"),
            SamplingRatio::Named(BatchOnly::Batch) => "batch".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ratio: SamplingRatio,
    pub margin: MarginConfig,
    pub filter_threshold: Option<f64>,
    pub shards: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Record a diagnostics snapshot every this many steps (and at the last step).
    pub eval_every: u64,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Standard deviation of initial center entries; defaults to `1/√D` (unit expected norm).
    pub center_init_std: Option<f64>,
    /// Identities held out from training for verification.
    pub holdout_fraction: f64,
    pub far_target: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ratio: SamplingRatio::Fixed(0.1),
            margin: MarginConfig::cosface(),
            filter_threshold: None,
            shards: 1,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            eval_every: 50,
            base_lr: 0.05,
            warmup_epochs: 2.0,
            power: 2.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            hidden_dim: 64,
            embedding_dim: 18,
            center_init_std: None,
            holdout_fraction: 0.1,
            far_target: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn center_init_std(&self) -> f64 {
        self.center_init_std
            .unwrap_or(1.0 / (self.embedding_dim as f64).sqrt())
    }
}

/// Identity-disjoint train/eval split with training classes renumbered `0..C'`.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Identity of each (renumbered) training class.
    pub class_identity: Vec<usize>,
    pub eval_inputs: Matrix,
    pub eval_identities: Vec<usize>,
}

impl SplitData {
    pub fn num_classes(&self) -> usize {
        self.class_identity.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Holds out `⌈fraction·I⌉` random identities. A training point is kept when
/// both its identity and its observed class's identity are kept.
pub fn holdout_split(ds: &SyntheticDataset, fraction: f64, seed: u64) -> Result<SplitData> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction must be in [0, 1), got {fraction}")));
    }
    let ids = ds.num_identities();
    let held = (fraction * ids as f64).ceil() as usize;
    let mut rng = SeededRng::keyed(seed, domain::SPLIT, 0, 0);
    let mut is_held = vec![false; ids];
    for i in sample_without_replacement(&mut rng, 0..ids, &[], held)? {
        is_held[i] = true;
    }
    let mut remap = vec![usize::MAX; ds.num_classes()];
    let mut class_identity = Vec::new();
    for (class, id) in ds.class_identity.iter().enumerate() {
        if !is_held[*id] {
            remap[class] = class_identity.len();
            class_identity.push(*id);
        }
    }
    let (mut train, mut labels, mut eval) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..ds.len() {
        let y = ds.observed_labels[i];
        if is_held[ds.true_identities[i]] {
            eval.push(i);
        } else if remap[y] != usize::MAX {
            train.push(i);
            labels.push(remap[y]);
        }
    }
    Ok(SplitData {
        inputs: ds.points.select_columns(&train),
        labels,
        class_identity,
        eval_inputs: ds.points.select_columns(&eval),
        eval_identities: eval.iter().map(|i| ds.true_identities[*i]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub backbone: Backbone,
    pub shards: Vec<CenterShard>,
    pub loss_sum: f64,
    pub last_loss: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub snapshot: Option<DiagnosticsSnapshot>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalReport {
    pub steps: u64,
    pub mean_loss: f64,
    pub final_loss: f64,
    /// Whole-training-set diagnostics after the last step.
    pub diagnostics: DiagnosticsSnapshot,
    pub mics_mean: f64,
    pub mics_max: f64,
    pub train_accuracy: f64,
    pub verification: VerificationReport,
}

pub struct TrainOutcome {
    pub backbone: Backbone,
    pub shards: Vec<CenterShard>,
    pub snapshots: Vec<DiagnosticsSnapshot>,
    pub report: FinalReport,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: SplitData,
    schedule: Schedule,
    steps_per_epoch: u64,
    total_steps: u64,
    ratio: f64,
    order: Option<(u64, Vec<usize>)>,
    state: TrainState,
}

impl Trainer {
    pub fn new(ds: &SyntheticDataset, cfg: TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.shards == 0 || cfg.eval_every == 0 {
            return Err(Error::Config("batch_size, epochs, shards and eval_every must be positive".into()));
        }
        let data = holdout_split(ds, cfg.holdout_fraction, cfg.seed)?;
        if data.is_empty() {
            return Err(Error::Config("no training points left after the holdout split".into()));
        }
        let layout = ShardLayout::new(data.num_classes(), cfg.shards)?;
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let warmup = (cfg.warmup_epochs * steps_per_epoch as f64).round() as u64;
        // optimizer step t uses lr_at(t + 1) so neither zero endpoint is used
        let schedule = Schedule::new(cfg.base_lr, warmup, total_steps + 1, cfg.power)?;
        let ratio = cfg.ratio.resolve(data.num_classes(), cfg.batch_size);
        crate::sampler::check_ratio(ratio)?;
        let state = TrainState {
            step: 0,
            backbone: Backbone::init(ds.dim(), cfg.hidden_dim, cfg.embedding_dim, cfg.seed),
            shards: init_shards(&layout, cfg.embedding_dim, cfg.center_init_std(), cfg.seed)?,
            loss_sum: 0.0,
            last_loss: f64::NAN,
        };
        Ok(Self {
            cfg,
            data,
            schedule,
            steps_per_epoch,
            total_steps,
            ratio,
            order: None,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &SplitData {
        &self.data
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps
    }

    fn step_config(&self, lr: f64) -> StepConfig {
        StepConfig {
            ratio: self.ratio,
            margin: self.cfg.margin,
            filter_threshold: self.cfg.filter_threshold,
            lr,
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
        }
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            let mut rng = SeededRng::keyed(self.cfg.seed, domain::SHUFFLE, 0, epoch);
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().unwrap().1;
        let pos = (step % self.steps_per_epoch) as usize * self.cfg.batch_size;
        order[pos..(pos + self.cfg.batch_size).min(order.len())].to_vec()
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::contract("training already finished"));
        }
        let step = self.state.step;
        let idx = self.batch_indices(step);
        let inputs = self.data.inputs.select_columns(&idx);
        let labels: Vec<usize> = idx.iter().map(|i| self.data.labels[*i]).collect();
        let cache = self.state.backbone.forward_cached(&inputs)?;
        let local = FeatureBatch::new(cache.output.clone(), labels)?;
        let (batch, _) = all_gather_features(&local.split(self.cfg.shards))?;

        let snapshot = if step % self.cfg.eval_every == 0 || step + 1 == self.total_steps {
            Some(metrics::snapshot(step, &batch, &self.state.shards, Some(&self.data.class_identity))?)
        } else {
            None
        };

        let lr = lr_at(&self.schedule, step + 1)?;
        let shards = std::mem::take(&mut self.state.shards);
        let res = distributed_partial_step(shards, &batch, &self.step_config(lr), self.cfg.seed, step)
            .map_err(|e| match e {
                Error::NumericalFailure { iteration, detail } => Error::NumericalFailure {
                    iteration,
                    detail: format!("{detail}; last good state is step {step}"),
                },
                other => other,
            })?;
        let grad = self.state.backbone.gradients(&inputs, &cache, &res.d_features)?;
        self.state.backbone.apply(&grad, lr);
        self.state.shards = res.shards;
        self.state.loss_sum += res.loss;
        self.state.last_loss = res.loss;
        self.state.step += 1;
        Ok(StepOutcome {
            step,
            loss: res.loss,
            lr,
            snapshot,
        })
    }

    /// Runs until `until` steps have completed (or training ends), returning the snapshots taken.
    pub fn run_until(&mut self, until: u64) -> Result<Vec<DiagnosticsSnapshot>> {
        let mut snaps = Vec::new();
        while self.state.step < until.min(self.total_steps) {
            if let Some(s) = self.step()?.snapshot {
                snaps.push(s);
            }
        }
        Ok(snaps)
    }

    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.state.backbone.forward(inputs)
    }

    pub fn final_report(&self) -> Result<FinalReport> {
        let emb = self.embed(&self.data.inputs)?;
        let batch = FeatureBatch::new(emb, self.data.labels.clone())?;
        let diagnostics = metrics::snapshot(
            self.state.step,
            &batch,
            &self.state.shards,
            Some(&self.data.class_identity),
        )?;
        let mics = metrics::mics(&self.state.shards)?;
        let train_accuracy = nearest_center_accuracy(&batch, &self.state.shards)?;
        let eval_emb = self.embed(&self.data.eval_inputs)?;
        let (genuine, impostor) = metrics::pair_scores(&eval_emb, &self.data.eval_identities)?;
        let verification = metrics::verify_tar_at_far(&genuine, &impostor, self.cfg.far_target)?;
        Ok(FinalReport {
            steps: self.state.step,
            mean_loss: self.state.loss_sum / self.state.step.max(1) as f64,
            final_loss: self.state.last_loss,
            diagnostics,
            mics_mean: mics.iter().sum::<f64>() / mics.len() as f64,
            mics_max: mics.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            train_accuracy,
            verification,
        })
    }

    pub fn finish(self) -> Result<(Backbone, Vec<CenterShard>, FinalReport)> {
        let report = self.final_report()?;
        Ok((self.state.backbone, self.state.shards, report))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.cfg, &self.state)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a trainer mid-run. The dataset and config must be the ones the checkpoint was taken with.
    pub fn resume(ds: &SyntheticDataset, cfg: TrainConfig, bytes: &[u8]) -> Result<Self> {
        let mut trainer = Self::new(ds, cfg)?;
        let state = checkpoint::decode(&trainer.cfg, &trainer.state, bytes)?;
        if state.step > trainer.total_steps {
            return Err(Error::format("checkpoint", "step beyond the configured run"));
        }
        trainer.state = state;
        Ok(trainer)
    }
}

/// Fraction of samples whose most similar center is their labelled one.
pub fn nearest_center_accuracy(batch: &FeatureBatch, shards: &[CenterShard]) -> Result<f64> {
    let x = l2_normalize_columns(&batch.features, NORM_EPS);
    let w = l2_normalize_columns(&crate::shardsim::gather_centers(shards)?, NORM_EPS);
    let cos = matmul_tn(&x, &w)?;
    let hits = (0..batch.len())
        .filter(|i| {
            let row = cos.row(*i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == batch.labels[*i]
        })
        .count();
    Ok(hits as f64 / batch.len().max(1) as f64)
}

/// Trains to completion.
pub fn train(ds: &SyntheticDataset, cfg: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(ds, cfg)?;
    let snapshots = trainer.run_until(u64::MAX)?;
    let (backbone, shards, report) = trainer.finish()?;
    Ok(TrainOutcome {
        backbone,
        shards,
        snapshots,
        report,
    })
}

pub mod checkpoint {
    //! Versioned little-endian checkpoint container:
    //!
    //! ```text
    //! magic "PFCCKPT\0" | version u32 | config-json length u64 | config json
    //! step u64 | loss_sum f64 | last_loss f64
    //! backbone: in, hidden, out u64 | params f64...
    //! K u64 | per shard: start u64, cols u64, weights f64..., momentum f64...
    //! ```
    //!
    //! Random streams are keyed by (seed, step), so the step is the only cursor.

    use super::*;

    pub const VERSION: u32 = 1;
    const MAGIC: &[u8; 8] = b"PFCCKPT\0";

    fn put_u64(out: &mut Vec<u8>, v: u64) {
        out.extend_from_slice(&v.to_le_bytes());
    }

    fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn encode(cfg: &TrainConfig, state: &TrainState) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(cfg).expect("config serializes");
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        put_u64(&mut out, state.step);
        put_f64s(&mut out, &[state.loss_sum, state.last_loss]);
        let bb = &state.backbone;
        for d in [bb.input_dim(), bb.hidden_dim(), bb.output_dim()] {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, &bb.flatten());
        put_u64(&mut out, state.shards.len() as u64);
        for s in &state.shards {
            put_u64(&mut out, s.owned_range().start as u64);
            put_u64(&mut out, s.weights().cols() as u64);
            put_f64s(&mut out, s.weights().as_slice());
            put_f64s(&mut out, s.momentum().as_slice());
        }
        out
    }

    struct Cursor<'a>(&'a [u8]);

    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            if self.0.len() < n {
                return Err(Error::format("checkpoint", "truncated"));
            }
            let (head, tail) = self.0.split_at(n);
            self.0 = tail;
            Ok(head)
        }

        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
            (0..n)
                .map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap())))
                .collect()
        }
    }

    /// Decodes against a freshly initialised `template` state, which fixes every shape.
    pub fn decode(cfg: &TrainConfig, template: &TrainState, bytes: &[u8]) -> Result<TrainState> {
        let mut c = Cursor(bytes);
        if c.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("version {version}, expected {VERSION}")));
        }
        let len = c.u64()? as usize;
        let stored: TrainConfig = serde_json::from_slice(c.take(len)?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if &stored != cfg {
            return Err(Error::Config("checkpoint was written with a different training config".into()));
        }
        let step = c.u64()?;
        let sums = c.f64s(2)?;
        let dims: Vec<usize> = (0..3).map(|_| c.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        let bb = &template.backbone;
        if dims != [bb.input_dim(), bb.hidden_dim(), bb.output_dim()] {
            return Err(Error::format("checkpoint", "backbone shape mismatch"));
        }
        let backbone = bb.unflatten(&c.f64s(bb.flatten().len())?)?;
        let k = c.u64()? as usize;
        if k != template.shards.len() {
            return Err(Error::format("checkpoint", "shard count mismatch"));
        }
        let mut shards = Vec::with_capacity(k);
        for t in &template.shards {
            let start = c.u64()? as usize;
            let cols = c.u64()? as usize;
            if start != t.owned_range().start || cols != t.weights().cols() {
                return Err(Error::format("checkpoint", "shard layout mismatch"));
            }
            let d = t.dim();
            let w = Matrix::new(d, cols, c.f64s(d * cols)?)?;
            let m = Matrix::new(d, cols, c.f64s(d * cols)?)?;
            shards.push(CenterShard::with_momentum(t.shard_id(), start, w, m)?);
        }
        if !c.0.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(TrainState {
            step,
            backbone,
            shards,
            loss_sum: sums[0],
            last_loss: sums[1],
        })
    }
}
