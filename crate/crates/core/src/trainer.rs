//! Full-batch training with Nesterov momentum and periodic vocabulary checks.

use std::io::Write;
use std::ops::ControlFlow;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::{self, init_model, GruModel, GruParams, OUTPUT_DIM};
use crate::phonology::{cohort_stats, Lexicon, FEATURES, LARGE_COHORT};
use crate::representations::{RepSet, SemVisRep};

/// How the summed squared error of a batch is scaled before the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Averaged over batch items and padded timesteps.
    #[default]
    FrameMean,
    /// Averaged over batch items only.
    Mean,
    /// No averaging.
    Sum,
}

impl LossReduction {
    pub fn scale(self, items: usize, steps: usize) -> f64 {
        match self {
            LossReduction::FrameMean => 1.0 / (items * steps).max(1) as f64,
            LossReduction::Mean => 1.0 / items.max(1) as f64,
            LossReduction::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub epochs: usize,
    pub eval_every: usize,
    pub hidden_sizes: (usize, usize),
    pub seed: u64,
    pub reduction: LossReduction,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.4,
            momentum: 0.4,
            nesterov: true,
            epochs: 100_000,
            eval_every: 20_000,
            hidden_sizes: (200, 200),
            seed: 0,
            reduction: LossReduction::FrameMean,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.eval_every == 0 {
            return Err(Error::Parameter("eval_every must be positive".into()));
        }
        if self.epochs > 0 && self.eval_every > self.epochs {
            return Err(Error::Parameter(format!(
                "eval_every {} exceeds epochs {}",
                self.eval_every, self.epochs
            )));
        }
        if self.hidden_sizes.0 == 0 || self.hidden_sizes.1 == 0 {
            return Err(Error::Parameter("hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Padded training tensors for a whole lexicon.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (T_max, N, 20)
    pub inputs: Array3<f64>,
    /// (T_max, N, 250); zero after each item's offset.
    pub targets: Array3<f64>,
    pub offsets: Vec<usize>,
    pub item_ids: Vec<usize>,
}

impl Batch {
    pub fn steps(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

fn rep_for<'a>(reps: &'a RepSet, id: usize, label: &str) -> Result<&'a SemVisRep> {
    reps.get(id).ok_or_else(|| Error::MissingRepresentation {
        id,
        label: label.to_string(),
    })
}

/// Inputs zero-padded after the offset; targets active up to and including it.
pub fn make_batch(lexicon: &Lexicon, reps: &RepSet) -> Result<Batch> {
    let t_max = lexicon.max_sequence_len();
    let n = lexicon.len();
    let mut inputs = Array3::zeros((t_max, n, FEATURES));
    let mut targets = Array3::zeros((t_max, n, OUTPUT_DIM));
    let mut offsets = Vec::with_capacity(n);
    let mut item_ids = Vec::with_capacity(n);
    for (i, item) in lexicon.items().iter().enumerate() {
        let rep = rep_for(reps, item.id, &item.label)?;
        let seq = lexicon.sequence(item)?;
        inputs.slice_mut(s![..seq.len(), i, ..]).assign(&seq.frames);
        for t in 0..=seq.offset_index {
            for (dst, &b) in targets.slice_mut(s![t, i, ..]).iter_mut().zip(rep.bits()) {
                *dst = f64::from(b);
            }
        }
        offsets.push(seq.offset_index);
        item_ids.push(item.id);
    }
    Ok(Batch {
        inputs,
        targets,
        offsets,
        item_ids,
    })
}

/// `v' = mu·v − lr·g` and `θ' = θ + v'`, where `g` was taken at the lookahead
/// point `θ + mu·v`.
pub fn nesterov_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, mu: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::dim("gradient length", params.len(), grads.len()));
    }
    if velocity.len() != params.len() {
        return Err(Error::dim("velocity length", params.len(), velocity.len()));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

fn momentum_update(params: &mut GruParams, grads: &GruParams, velocity: &mut GruParams, lr: f64, mu: f64) -> Result<()> {
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        nesterov_step(p, g, v, lr, mu)?;
    }
    Ok(())
}

/// Distance used by the learned-word criterion: the output is thresholded at
/// 0.5, with outputs of exactly 0.5 counted as half a mismatch against either
/// bit so that an undecided output is equidistant from every target.
fn thresholded_distance(output: &[f64], bits: &[u8]) -> f64 {
    let mismatches: f64 = output
        .iter()
        .zip(bits)
        .map(|(&o, &b)| {
            if o == 0.5 {
                0.5
            } else if (o > 0.5) != (b == 1) {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    mismatches / bits.len() as f64
}

/// Whether the unique nearest target to `output` belongs to `own`.
pub fn nearest_is_own(output: &[f64], own: usize, reps: &[&SemVisRep]) -> bool {
    let dists: Vec<f64> = reps.iter().map(|r| thresholded_distance(output, r.bits())).collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let winners: Vec<usize> = (0..dists.len()).filter(|&i| dists[i] == min).collect();
    winners == [own]
}

fn learned_from_trace(trace: &gru::ForwardTrace, batch: &Batch, reps: &[&SemVisRep]) -> Vec<bool> {
    (0..batch.len())
        .map(|i| {
            let out = trace.output(batch.offsets[i], i).to_vec();
            nearest_is_own(&out, i, reps)
        })
        .collect()
}

fn ordered_reps<'a>(lexicon: &Lexicon, reps: &'a RepSet) -> Result<Vec<&'a SemVisRep>> {
    lexicon
        .items()
        .iter()
        .map(|it| rep_for(reps, it.id, &it.label))
        .collect()
}

/// Per-item learned flags, in lexicon order.
///
/// Each item is read out at its label offset. Sequences run in one padded
/// batch; the recurrence is causal and starts from zero, so the output at the
/// offset equals that of the unpadded sequence.
pub fn evaluate_learned(model: &GruModel, lexicon: &Lexicon, reps: &RepSet) -> Result<Vec<bool>> {
    let batch = make_batch(lexicon, reps)?;
    let ordered = ordered_reps(lexicon, reps)?;
    let trace = gru::forward_batch(model, &batch.inputs)?;
    Ok(learned_from_trace(&trace, &batch, &ordered))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCheckpoint {
    pub epoch: usize,
    pub vocab_size: usize,
    pub learned: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub item_ids: Vec<usize>,
    pub checkpoints: Vec<LogCheckpoint>,
    /// Loss (at the gradient evaluation point) sampled at each checkpoint.
    pub loss_curve: Vec<(usize, f64)>,
}

impl TrainingLog {
    pub fn new(item_ids: Vec<usize>) -> Self {
        Self {
            item_ids,
            checkpoints: Vec::new(),
            loss_curve: Vec::new(),
        }
    }

    fn push(&mut self, epoch: usize, learned: Vec<bool>) {
        let vocab_size = learned.iter().filter(|&&l| l).count();
        self.checkpoints.push(LogCheckpoint {
            epoch,
            vocab_size,
            learned,
        });
    }

    pub fn final_vocab_size(&self) -> usize {
        self.checkpoints.last().map_or(0, |c| c.vocab_size)
    }

    /// Epoch of the first checkpoint from which each item stays learned.
    pub fn epoch_of_acquisition(&self) -> Vec<Option<usize>> {
        (0..self.item_ids.len())
            .map(|i| {
                let mut first = None;
                for c in &self.checkpoints {
                    match (c.learned[i], first) {
                        (true, None) => first = Some(c.epoch),
                        (false, _) => first = None,
                        _ => {}
                    }
                }
                first
            })
            .collect()
    }

    /// `epoch,itemId,learnedFlag`
    pub fn write_flags_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "itemId", "learnedFlag"])?;
        for c in &self.checkpoints {
            for (id, &l) in self.item_ids.iter().zip(&c.learned) {
                w.write_record([c.epoch.to_string(), id.to_string(), u8::from(l).to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<training log>", e))
    }

    /// `itemId,cohortSize,epochOfAcquisition` (empty when never acquired).
    pub fn write_summary_csv<W: Write>(&self, lexicon: &Lexicon, writer: W) -> Result<()> {
        let stats = cohort_stats(lexicon);
        let eoa = self.epoch_of_acquisition();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["itemId", "cohortSize", "epochOfAcquisition"])?;
        for (i, id) in self.item_ids.iter().enumerate() {
            let idx = lexicon.index_of(*id)?;
            w.write_record([
                id.to_string(),
                stats.per_item[idx].to_string(),
                eoa[i].map(|e| e.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<training summary>", e))
    }
}

/// What the training loop reports at each evaluation epoch.
pub struct CheckpointEvent<'a> {
    pub epoch: usize,
    pub model: &'a GruModel,
    pub learned: &'a [bool],
    pub loss: f64,
}

pub fn train(config: &TrainerConfig, lexicon: &Lexicon, reps: &RepSet) -> Result<(GruModel, TrainingLog)> {
    train_with(config, lexicon, reps, |_| ControlFlow::Continue(()))
}

/// Trains one model, calling `observer` at every evaluation epoch (including
/// epoch 0 and the final epoch). Returning `Break` ends the run after that
/// checkpoint.
pub fn train_with<F>(config: &TrainerConfig, lexicon: &Lexicon, reps: &RepSet, mut observer: F) -> Result<(GruModel, TrainingLog)>
where
    F: FnMut(&CheckpointEvent<'_>) -> ControlFlow<()>,
{
    config.validate()?;
    let (h1, h2) = config.hidden_sizes;
    let mut model = init_model(h1, h2, config.seed)?;
    let batch = make_batch(lexicon, reps)?;
    let ordered = ordered_reps(lexicon, reps)?;
    let mut velocity = model.params.zeros_like();
    let mut log = TrainingLog::new(batch.item_ids.clone());
    let grad_scale = config.reduction.scale(batch.len(), batch.steps());
    let mu = config.momentum;

    let mut checkpoint = |epoch: usize, model: &GruModel, log: &mut TrainingLog| -> Result<ControlFlow<()>> {
        let trace = gru::forward_batch(model, &batch.inputs)?;
        let loss = gru::loss(&trace, &batch.targets)? * grad_scale;
        let learned = learned_from_trace(&trace, &batch, &ordered);
        let flow = observer(&CheckpointEvent {
            epoch,
            model,
            learned: &learned,
            loss,
        });
        log.loss_curve.push((epoch, loss));
        log.push(epoch, learned);
        Ok(flow)
    };

    for epoch in 0..config.epochs {
        if epoch % config.eval_every == 0 && checkpoint(epoch, &model, &mut log)?.is_break() {
            return Ok((model, log));
        }
        let lookahead = if config.nesterov && mu != 0.0 {
            let mut ahead = model.clone();
            ahead.params.scaled_add(mu, &velocity);
            ahead
        } else {
            model.clone()
        };
        let trace = gru::forward_batch(&lookahead, &batch.inputs)?;
        let loss = gru::loss(&trace, &batch.targets)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        let mut grads = gru::backward(&lookahead, &trace, &batch.targets)?;
        grads.scale(grad_scale);
        momentum_update(&mut model.params, &grads, &mut velocity, config.learning_rate, mu)?;
        if !model.params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
    }
    let _ = checkpoint(config.epochs, &model, &mut log)?;
    Ok((model, log))
}

/// Vocabulary growth split by onset-cohort size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabGrowth {
    pub epochs: Vec<usize>,
    /// Items acquired (and kept) by each checkpoint, cohort < 25.
    pub small: Vec<usize>,
    /// Same for cohort ≥ 25.
    pub large: Vec<usize>,
    pub small_size: usize,
    pub large_size: usize,
    pub small_mean_acquisition: Option<f64>,
    pub large_mean_acquisition: Option<f64>,
}

/// Growth curves and mean epoch of acquisition per cohort group.
///
/// Items never acquired are counted at one evaluation interval past the final
/// checkpoint, so the group means stay comparable when a run ends early.
pub fn vocab_growth(log: &TrainingLog, lexicon: &Lexicon) -> Result<VocabGrowth> {
    if log.checkpoints.is_empty() {
        return Err(Error::Parameter("training log has no checkpoints".into()));
    }
    let stats = cohort_stats(lexicon);
    let eoa = log.epoch_of_acquisition();
    let epochs: Vec<usize> = log.checkpoints.iter().map(|c| c.epoch).collect();
    let last = *epochs.last().expect("non-empty");
    let interval = if epochs.len() > 1 { last - epochs[epochs.len() - 2] } else { 1 };
    let censored = (last + interval.max(1)) as f64;

    let mut large_flags = Vec::with_capacity(log.item_ids.len());
    for id in &log.item_ids {
        large_flags.push(stats.per_item[lexicon.index_of(*id)?] >= LARGE_COHORT);
    }
    let curve = |want_large: bool| -> Vec<usize> {
        epochs
            .iter()
            .map(|&e| {
                eoa.iter()
                    .zip(&large_flags)
                    .filter(|(a, &l)| l == want_large && a.is_some_and(|a| a <= e))
                    .count()
            })
            .collect()
    };
    let mean = |want_large: bool| -> Option<f64> {
        let vals: Vec<f64> = eoa
            .iter()
            .zip(&large_flags)
            .filter(|(_, &l)| l == want_large)
            .map(|(a, _)| a.map_or(censored, |a| a as f64))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let large_size = large_flags.iter().filter(|&&l| l).count();
    Ok(VocabGrowth {
        small: curve(false),
        large: curve(true),
        small_size: large_flags.len() - large_size,
        large_size,
        small_mean_acquisition: mean(false),
        large_mean_acquisition: mean(true),
        epochs,
    })
}

impl VocabGrowth {
    /// `epoch,smallCohort,largeCohort`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "smallCohort", "largeCohort"])?;
        for ((e, s), l) in self.epochs.iter().zip(&self.small).zip(&self.large) {
            w.write_record([e.to_string(), s.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<vocabulary growth>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representations::{synth_reps, REP_DIM};

    fn small_lexicon(n: usize) -> Lexicon {
        let ids: Vec<usize> = (0..n).collect();
        Lexicon::shipped().subset(&ids).unwrap()
    }

    #[test]
    fn momentum_free_limit_is_gradient_descent() {
        let mut p = [1.0, -2.0];
        let mut v = [0.3, 0.1];
        nesterov_step(&mut p, &[0.5, -1.0], &mut v, 0.4, 0.0).unwrap();
        assert_eq!(p, [1.0 - 0.4 * 0.5, -2.0 + 0.4]);
    }

    #[test]
    fn quadratic_closed_form() {
        // L(θ) = θ²/2, ∇L = θ
        let (lr, mu) = (0.4, 0.4);
        let mut theta = [1.0];
        let mut v = [0.0];
        let ahead = theta[0] + mu * v[0];
        assert_eq!(ahead, 1.0);
        nesterov_step(&mut theta, &[ahead], &mut v, lr, mu).unwrap();
        assert!((v[0] + 0.4).abs() < 1e-12 && (theta[0] - 0.6).abs() < 1e-12);
        let ahead = theta[0] + mu * v[0];
        assert!((ahead - 0.44).abs() < 1e-12);
        nesterov_step(&mut theta, &[ahead], &mut v, lr, mu).unwrap();
        assert!((v[0] + 0.336).abs() < 1e-12 && (theta[0] - 0.264).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        assert!(nesterov_step(&mut [0.0; 2], &[0.0], &mut [0.0; 2], 0.1, 0.1).is_err());
        assert!(nesterov_step(&mut [0.0; 2], &[0.0; 2], &mut [0.0], 0.1, 0.1).is_err());
    }

    #[test]
    fn batch_shapes_and_target_masking() {
        let lex = Lexicon::shipped();
        let reps = RepSet::synthetic(&lex, 0.1, 0.15, 3).unwrap();
        let b = make_batch(&lex, &reps).unwrap();
        assert_eq!(b.steps(), 28);
        assert_eq!(b.len(), 200);
        for (i, &off) in b.offsets.iter().enumerate() {
            for t in off + 1..b.steps() {
                assert_eq!(b.targets.slice(s![t, i, ..]).sum(), 0.0);
                assert_eq!(b.inputs.slice(s![t, i, ..]).sum(), 0.0);
            }
            assert!(b.inputs.slice(s![off, i, ..]).iter().all(|&v| v == 1.0));
        }

        let one = small_lexicon(1);
        let reps1 = RepSet::synthetic(&one, 0.1, 0.15, 3).unwrap();
        assert_eq!(make_batch(&one, &reps1).unwrap().steps(), one.items()[0].sequence_len());
    }

    #[test]
    fn missing_representation_names_item() {
        let lex = small_lexicon(3);
        let reps = RepSet::new(synth_reps(2, 0.1, 0.1, 0).unwrap());
        match make_batch(&lex, &reps) {
            Err(Error::MissingRepresentation { id, label }) => {
                assert_eq!(id, 2);
                assert_eq!(label, lex.items()[2].label);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn constant_model(outputs: &[f64]) -> GruModel {
        let mut m = init_model(2, 2, 0).unwrap();
        m.params = GruParams::zeros(2, 2);
        for (b, &o) in m.params.readout_bias.iter_mut().zip(outputs) {
            *b = (o / (1.0 - o)).ln();
        }
        m
    }

    #[test]
    fn exact_output_is_learned_and_midpoint_is_not() {
        let lex = small_lexicon(5);
        let reps = RepSet::synthetic(&lex, 0.2, 0.2, 8).unwrap();
        let target = reps.get(lex.items()[3].id).unwrap();
        let out: Vec<f64> = target.bits().iter().map(|&b| if b == 1 { 0.99 } else { 0.01 }).collect();
        let flags = evaluate_learned(&constant_model(&out), &lex, &reps).unwrap();
        assert_eq!(flags, [false, false, false, true, false]);

        let flags = evaluate_learned(&constant_model(&[0.5; REP_DIM]), &lex, &reps).unwrap();
        assert!(flags.iter().all(|&f| !f));
    }

    #[test]
    fn epoch_of_acquisition_requires_stability() {
        let mut log = TrainingLog::new(vec![10, 11, 12]);
        log.push(0, vec![false, true, false]);
        log.push(5, vec![true, false, false]);
        log.push(10, vec![true, true, false]);
        assert_eq!(log.epoch_of_acquisition(), [Some(5), Some(10), None]);
        assert_eq!(log.final_vocab_size(), 2);
    }

    #[test]
    fn zero_epochs_gives_one_checkpoint() {
        let lex = small_lexicon(4);
        let reps = RepSet::synthetic(&lex, 0.1, 0.15, 1).unwrap();
        let cfg = TrainerConfig {
            epochs: 0,
            eval_every: 1,
            hidden_sizes: (4, 4),
            ..Default::default()
        };
        let (_, log) = train(&cfg, &lex, &reps).unwrap();
        assert_eq!(log.checkpoints.len(), 1);
        assert_eq!(log.checkpoints[0].epoch, 0);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let lex = small_lexicon(4);
        let reps = RepSet::synthetic(&lex, 0.1, 0.15, 1).unwrap();
        let cfg = TrainerConfig {
            learning_rate: f64::MAX,
            epochs: 10,
            eval_every: 10,
            hidden_sizes: (4, 4),
            ..Default::default()
        };
        match train(&cfg, &lex, &reps) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch < 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainerConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainerConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainerConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainerConfig { eval_every: 200_000, ..ok.clone() }.validate().is_err());
    }

    #[test]
    fn growth_flat_when_learned_immediately() {
        let lex = Lexicon::shipped();
        let mut log = TrainingLog::new(lex.items().iter().map(|i| i.id).collect());
        log.push(0, vec![true; 200]);
        log.push(10, vec![true; 200]);
        let g = vocab_growth(&log, &lex).unwrap();
        assert_eq!(g.small, [g.small_size; 2]);
        assert_eq!(g.large, [g.large_size; 2]);
        assert_eq!((g.small_size, g.large_size), (120, 80));
        assert_eq!(g.small_mean_acquisition, Some(0.0));
    }

    #[test]
    fn growth_curves_non_decreasing_despite_forgetting() {
        let lex = small_lexicon(3);
        let mut log = TrainingLog::new(lex.items().iter().map(|i| i.id).collect());
        log.push(0, vec![true, false, false]);
        log.push(10, vec![false, true, false]);
        log.push(20, vec![true, true, true]);
        let g = vocab_growth(&log, &lex).unwrap();
        let total: Vec<usize> = g.small.iter().zip(&g.large).map(|(a, b)| a + b).collect();
        assert!(total.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(total, [0, 1, 3]);
        assert!(vocab_growth(&TrainingLog::new(vec![]), &lex).is_err());
    }
}
