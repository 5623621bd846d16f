use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::Network;
use crate::nn::{Binder, Mode};
use crate::scalar::Scalar;
use crate::spn::{Lifecycle, StateValue};
use crate::tensor::{Tape, Tensor};
use crate::train::checkpoint::Checkpoint;
use crate::train::data::Dataset;
use crate::train::loss::{distillation_loss, DistillConfig};
use crate::train::optim::{cosine_lr, nag_step, NagConfig, NagState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseName {
    #[serde(rename = "FP_TRAIN")]
    FpTrain,
    #[serde(rename = "QUANT_ACTIVE")]
    QuantActive,
    #[serde(rename = "FROZEN")]
    Frozen,
}

impl PhaseName {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseName::FpTrain => "FP_TRAIN",
            PhaseName::QuantActive => "QUANT_ACTIVE",
            PhaseName::Frozen => "FROZEN",
        }
    }

    fn lifecycle(self) -> Lifecycle {
        match self {
            PhaseName::FpTrain => Lifecycle::FullPrecision,
            PhaseName::QuantActive => Lifecycle::QuantActive,
            PhaseName::Frozen => Lifecycle::FrozenTernary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub name: PhaseName,
    pub epochs: usize,
    pub initial_lr: f64,
    /// Linear warmup epochs; defaults to 5 for `FP_TRAIN` and 0 otherwise.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
}

impl PhaseConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or(if self.name == PhaseName::FpTrain {
                5
            } else {
                0
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phases: Vec<PhaseConfig>,
    pub optimizer: NagConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub distillation: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let phase = |name, epochs, initial_lr| PhaseConfig {
            name,
            epochs,
            initial_lr,
            warmup_epochs: None,
        };
        Self {
            phases: vec![
                phase(PhaseName::FpTrain, 20, 0.025),
                phase(PhaseName::QuantActive, 8, 0.0025),
                phase(PhaseName::Frozen, 3, 0.00025),
            ],
            optimizer: NagConfig::default(),
            batch_size: 64,
            eval_batch_size: 256,
            seed: 0,
            distillation: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::invalid("training needs at least one phase"));
        }
        for w in self.phases.windows(2) {
            if w[0].name >= w[1].name {
                return Err(Error::PhaseOrder(format!(
                    "{} cannot follow {}",
                    w[1].name.as_str(),
                    w[0].name.as_str()
                )));
            }
        }
        for p in &self.phases {
            if p.epochs == 0 {
                return Err(Error::invalid(format!(
                    "phase {} needs at least one epoch",
                    p.name.as_str()
                )));
            }
            if !(p.initial_lr > 0.0 && p.initial_lr.is_finite()) {
                return Err(Error::invalid(format!(
                    "phase {} needs a positive learning rate",
                    p.name.as_str()
                )));
            }
            if p.warmup() > 0 && p.warmup() >= p.epochs {
                return Err(Error::invalid(format!(
                    "phase {} warmup must be shorter than the phase",
                    p.name.as_str()
                )));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "batch size must be at least 2 for batch normalization",
            ));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::invalid("eval batch size must be positive"));
        }
        if !(self.optimizer.momentum >= 0.0
            && self.optimizer.momentum < 1.0
            && self.optimizer.weight_decay >= 0.0)
        {
            return Err(Error::invalid(
                "momentum must lie in [0, 1) and weight decay be non-negative",
            ));
        }
        self.distillation.validate()
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        for p in &mut c.phases {
            p.warmup_epochs = Some(p.warmup());
        }
        c
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: PhaseName,
    pub phase_epoch: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

/// Position of the next epoch to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub phase: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingState {
    config: TrainConfig,
    cursor: Cursor,
    teacher: bool,
    metrics: Vec<EpochMetrics>,
}

/// Three-phase training loop with resumable state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    network: Network<T>,
    config: TrainConfig,
    teacher: Option<Network<T>>,
    opt: NagState<T>,
    cursor: Cursor,
    metrics: Vec<EpochMetrics>,
}

/// Top-1 accuracy of `logits [N, K]` against labels.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Eval-mode accuracy over the evaluation split.
pub fn evaluate<T: Scalar>(
    network: &mut Network<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let n = data.eval_len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut hits = 0.0;
    for start in (0..n).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let (x, y) = data.eval_batch::<T>(&idx)?;
        hits += accuracy(&network.predict(&x)?, &y) * idx.len() as f64;
    }
    Ok(hits / n as f64)
}

fn epoch_rng(seed: u64, global_epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (global_epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl<T: Scalar> Trainer<T> {
    pub fn new(network: Network<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if network.lifecycle() > config.phases[0].name.lifecycle() {
            return Err(Error::PhaseOrder(format!(
                "network is already {} but training starts with {}",
                network.lifecycle().name(),
                config.phases[0].name.as_str()
            )));
        }
        Ok(Self {
            network,
            config,
            teacher: None,
            opt: NagState::new(),
            cursor: Cursor { phase: 0, epoch: 0 },
            metrics: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.network
    }

    pub fn into_network(self) -> Network<T> {
        self.network
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        self.cursor.phase >= self.config.phases.len()
    }

    fn global_epoch(&self) -> usize {
        self.config.phases[..self.cursor.phase]
            .iter()
            .map(|p| p.epochs)
            .sum::<usize>()
            + self.cursor.epoch
    }

    /// Lifecycle transitions on entering the current phase.
    fn enter_phase(&mut self) -> Result<()> {
        let phase = self.config.phases[self.cursor.phase];
        let leaving_fp = self.network.lifecycle() == Lifecycle::FullPrecision
            && phase.name != PhaseName::FpTrain;
        if leaving_fp && self.config.distillation.active() && self.teacher.is_none() {
            self.teacher = Some(self.network.clone());
        }
        let target = phase.name.lifecycle();
        while self.network.lifecycle() < target {
            match self.network.lifecycle() {
                Lifecycle::FullPrecision => self.network.activate_quantization()?,
                Lifecycle::QuantActive => self.network.freeze_and_fold()?,
                Lifecycle::FrozenTernary => unreachable!("no state after FROZEN_TERNARY"),
            }
        }
        self.opt = NagState::new();
        Ok(())
    }

    /// Runs one epoch and advances the cursor.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if self.is_done() {
            return Err(Error::PhaseOrder("training has already finished".into()));
        }
        if data.num_classes != self.network.num_classes() {
            return Err(Error::invalid(format!(
                "dataset has {} classes, network {}",
                data.num_classes,
                self.network.num_classes()
            )));
        }
        if self.cursor.epoch == 0 {
            self.enter_phase()?;
        }
        let phase = self.config.phases[self.cursor.phase];
        let global = self.global_epoch();
        let mut rng = epoch_rng(self.config.seed, global);
        let order = data.epoch_order(&mut rng);
        let bs = self.config.batch_size;
        let batches: Vec<&[usize]> = order.chunks(bs).filter(|b| b.len() >= 2).collect();
        if batches.is_empty() {
            return Err(Error::invalid("training set too small for one batch"));
        }
        let steps = batches.len();
        let (mut loss_sum, mut hit_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut lr = 0.0;
        let distill = self.config.distillation;
        for (step, idx) in batches.into_iter().enumerate() {
            lr = cosine_lr(
                self.cursor.epoch as f64 + step as f64 / steps as f64,
                phase.epochs,
                phase.warmup(),
                phase.initial_lr,
            )?;
            let (x, y) = data.train_batch::<T>(idx, &mut rng)?;
            let teacher_logits = match (&mut self.teacher, distill.active()) {
                (Some(t), true) => Some(t.predict(&x)?),
                _ => None,
            };
            let non_finite = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    phase: phase.name.as_str().into(),
                    epoch: self.cursor.epoch,
                    step,
                },
                other => other,
            };
            let tape = Tape::new();
            let mut b = Binder::new(&tape, Mode::Train);
            let xv = tape.constant(x);
            let logits = self.network.forward(&mut b, xv).map_err(non_finite)?;
            let loss = match &teacher_logits {
                Some(t) => distillation_loss(logits, t, &y, distill.temperature, distill.lambda),
                None => logits.softmax_cross_entropy(&y),
            }
            .map_err(non_finite)?;
            let lv = loss.item().to_f64_lossy();
            if !lv.is_finite() {
                return Err(non_finite(Error::NonFinite { op: "loss" }));
            }
            tape.backward(loss).map_err(non_finite)?;
            let grads = b.grads();
            loss_sum += lv * idx.len() as f64;
            hit_sum += logits.with_value(|l| accuracy(l, &y)) * idx.len() as f64;
            seen += idx.len();
            drop(b);
            drop(tape);
            let mut params = self.network.params_mut();
            nag_step(
                &mut params,
                &grads,
                &mut self.opt,
                lr,
                &self.config.optimizer,
            )?;
        }
        let eval_acc = evaluate(&mut self.network, data, self.config.eval_batch_size)?;
        let m = EpochMetrics {
            phase: phase.name,
            phase_epoch: self.cursor.epoch,
            epoch: global,
            lr,
            loss: loss_sum / seen as f64,
            train_acc: hit_sum / seen as f64,
            eval_acc,
        };
        self.metrics.push(m.clone());
        self.cursor.epoch += 1;
        if self.cursor.epoch == phase.epochs {
            self.cursor = Cursor {
                phase: self.cursor.phase + 1,
                epoch: 0,
            };
        }
        Ok(m)
    }

    /// Runs to completion. `on_epoch` sees each epoch's metrics and whether
    /// it closed a phase.
    pub fn run(
        &mut self,
        data: &Dataset,
        on_epoch: &mut dyn FnMut(&Self, &EpochMetrics, bool) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let phase = self.cursor.phase;
            let m = self.run_epoch(data)?;
            let closed = self.cursor.phase != phase;
            on_epoch(self, &m, closed)?;
        }
        Ok(())
    }

    /// Full resumable state.
    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::from_network(&self.network);
        if let Some(t) = &self.teacher {
            ck.push_network("teacher/", t);
        }
        for (name, v) in &self.opt.buffers {
            let t = Tensor::from_vec(vec![v.len()], v.clone())?;
            ck.entries
                .push((format!("opt/{name}"), StateValue::Real(t)));
        }
        let state = TrainingState {
            config: self.config.resolved(),
            cursor: self.cursor,
            teacher: self.teacher.is_some(),
            metrics: self.metrics.clone(),
        };
        ck.training = Some(serde_json::to_value(state)?);
        Ok(ck)
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let state: TrainingState = match &ck.training {
            Some(v) => serde_json::from_value(v.clone())?,
            None => {
                return Err(Error::Malformed(
                    "checkpoint carries no training state".into(),
                ))
            }
        };
        state.config.validate()?;
        let network = ck.network()?;
        let teacher = if state.teacher {
            Some(ck.network_at("teacher/", Lifecycle::FullPrecision)?)
        } else {
            None
        };
        let mut opt = NagState::new();
        for (name, v) in &ck.entries {
            if let (Some(n), StateValue::Real(t)) = (name.strip_prefix("opt/"), v) {
                opt.buffers.insert(n.to_string(), t.data().to_vec());
            }
        }
        Ok(Self {
            network,
            config: state.config,
            teacher,
            opt,
            cursor: state.cursor,
            metrics: state.metrics,
        })
    }
}

/// Train `network` through every configured phase.
pub fn train<T: Scalar>(
    network: Network<T>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(Network<T>, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(network, config.clone())?;
    t.run(data, &mut |_, _, _| Ok(()))?;
    let metrics = t.metrics.clone();
    Ok((t.into_network(), metrics))
}

/// Line-delimited JSON metrics. Only the header line carries a timestamp.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W, config: &serde_json::Value, timestamp: u64) -> Result<Self> {
        let header =
            serde_json::json!({ "record": "header", "timestamp": timestamp, "config": config });
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        Ok(Self { out })
    }

    pub fn epoch(&mut self, m: &EpochMetrics) -> Result<()> {
        let mut v = serde_json::to_value(m)?;
        v.as_object_mut()
            .expect("metrics serialize to an object")
            .insert("record".into(), "epoch".into());
        writeln!(self.out, "{}", serde_json::to_string(&v)?)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
