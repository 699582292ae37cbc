use rand::Rng;
use symupe_tensor::optim::{AdamConfig, AdamState, LrSchedule};
use symupe_tensor::{Array, Graph, Var};

use super::{ModelError, PianoFlow, SequenceInput, NOTE_FEATURES};
use crate::codec::{normalize, AlignedSequence, ScoreNote, Vocab};
use crate::conditioning::{cfg_dropout, ControlInputs, DEFAULT_DROP_PROB};
use crate::flow::{make_training_target, DEFAULT_SIGMA_MIN};
use crate::maskgen::{batch_mask_plan, sample_mask, MAX_RATIO, MIN_RATIO};

/// A training sequence with its normalized features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub score: Array,
    pub perf: Array,
    pub interpolated: Vec<bool>,
    pub notes: Vec<ScoreNote>,
    pub control: Option<ControlInputs>,
}

impl TrainExample {
    /// Control channels come from the sequence when a vocabulary is given.
    pub fn from_sequence(seq: &AlignedSequence, vocab: Option<&Vocab>) -> Self {
        let (score, perf) = normalize(seq);
        Self {
            score: Array::from_rows(&score, NOTE_FEATURES).expect("4 features"),
            perf: Array::from_rows(&perf, NOTE_FEATURES).expect("4 features"),
            interpolated: seq.perf.iter().map(|p| p.interpolated).collect(),
            notes: seq.score.clone(),
            control: vocab.map(|v| ControlInputs::from_sequence(seq, v)),
        }
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub sigma_min: f64,
    /// Per-channel probability of dropping the control.
    pub drop_prob: f64,
    /// Range of the uniform mask ratio draw.
    pub mask_ratio: (f64, f64),
}

impl TrainConfig {
    pub fn with_total_steps(total_steps: usize) -> Self {
        Self {
            schedule: LrSchedule { initial: 2e-4, final_lr: 1e-4, warmup: 1000, total_steps },
            adam: AdamConfig::default(),
            sigma_min: DEFAULT_SIGMA_MIN,
            drop_prob: DEFAULT_DROP_PROB,
            mask_ratio: (MIN_RATIO, MAX_RATIO),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked_entries: usize,
}

/// Optimizer state for one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
}

impl PianoFlow {
    /// Mean squared error between the packed prediction and `targets` over
    /// the entries of masked rows. Returns the loss node and the entry count.
    pub fn masked_loss(
        &self,
        g: &mut Graph,
        inputs: &[SequenceInput],
        targets: &[&Array],
    ) -> Result<(Var, usize), ModelError> {
        if targets.len() != inputs.len() {
            return Err(ModelError::Shape("one target per sequence".into()));
        }
        let pred = self.forward(g, inputs)?;
        let total = g.value(pred).rows();
        let mut u = Array::zeros(&[total, NOTE_FEATURES]);
        let mut w = Array::zeros(&[total, NOTE_FEATURES]);
        let mut r = 0;
        let mut count = 0;
        for (inp, tgt) in inputs.iter().zip(targets) {
            if tgt.shape() != inp.x_t.shape() {
                return Err(ModelError::Shape(format!("target {:?} vs input {:?}", tgt.shape(), inp.x_t.shape())));
            }
            for (i, &m) in inp.mask.iter().enumerate() {
                u.row_mut(r).copy_from_slice(tgt.row(i));
                if m {
                    w.row_mut(r).fill(1.0);
                    count += NOTE_FEATURES;
                }
                r += 1;
            }
        }
        let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        let w = w.map(|x| x * scale);
        let u = g.constant(u);
        let diff = g.sub(pred, u);
        let sq = g.mul(diff, diff);
        let w = g.constant(w);
        let weighted = g.mul(sq, w);
        Ok((g.sum(weighted), count))
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &PianoFlow) -> Self {
        Self { config, adam: AdamState::new(config.adam, &model.params) }
    }

    pub fn step_count(&self) -> usize {
        self.adam.step
    }

    /// One optimizer step on a batch: masks are drawn per the batch plan,
    /// flow times and noise per sequence, control channels dropped at
    /// random.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &mut PianoFlow,
        batch: &[&TrainExample],
        rng: &mut R,
    ) -> Result<StepStats, ModelError> {
        let cfg = self.config;
        let plan = batch_mask_plan(batch.len(), rng);
        let mut masks = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut controls = Vec::with_capacity(batch.len());
        for (ex, &strategy) in batch.iter().zip(&plan) {
            let ratio = rng.random_range(cfg.mask_ratio.0..=cfg.mask_ratio.1);
            let mask = sample_mask(strategy, &ex.notes, ratio, rng).map_err(|e| ModelError::Shape(e.to_string()))?;
            let mut tgt = make_training_target(&ex.perf, &mask.mask, rng, cfg.sigma_min)
                .map_err(|e| ModelError::Shape(e.to_string()))?;
            // the sampler holds known rows at their context values, so train on the same input
            for (i, &m) in mask.mask.iter().enumerate() {
                if !m {
                    tgt.x_t.row_mut(i).copy_from_slice(ex.perf.row(i));
                }
            }
            controls.push(ex.control.as_ref().map(|c| cfg_dropout(c, rng, cfg.drop_prob)));
            masks.push(mask.mask);
            targets.push(tgt);
        }
        let inputs: Vec<SequenceInput> = batch
            .iter()
            .zip(&masks)
            .zip(&targets)
            .zip(&controls)
            .map(|(((ex, mask), tgt), ctrl)| SequenceInput {
                score: &ex.score,
                x_t: &tgt.x_t,
                x_ctx: &tgt.x_ctx,
                mask,
                interpolated: &ex.interpolated,
                t: tgt.t,
                control: ctrl.as_ref(),
            })
            .collect();
        let u: Vec<&Array> = targets.iter().map(|t| &t.u).collect();
        let lr = cfg.schedule.at(self.adam.step + 1);
        let (loss, count, grads) = {
            let mut g = Graph::new(&model.params);
            let (loss, count) = model.masked_loss(&mut g, &inputs, &u)?;
            let value = g.value(loss).data()[0];
            (value, count, g.backward(loss))
        };
        if !loss.is_finite() {
            return Err(ModelError::Shape(format!("non-finite loss {loss} at step {}", self.adam.step + 1)));
        }
        if count > 0 {
            self.adam.update(&mut model.params, &grads, lr);
        }
        Ok(StepStats { step: self.adam.step, loss, lr, masked_entries: count })
    }
}
