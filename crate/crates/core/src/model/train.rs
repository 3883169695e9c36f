//! Online gradient descent on `CE + KL` with a cosine-annealed step size.
//!
//! Every frame is one update. Prototype banks are double-buffered: frames
//! of epoch `e` retrieve from the banks collected during epoch `e - 1`
//! while offering themselves to a fresh set, which becomes the model's
//! banks when the epoch ends.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::{frame_loss, FrameContext, Gradient};
use super::loss::class_weights;
use super::{forward_frame, Model, PipelineParams, Variant};
use crate::error::{check_dims, contract, Error, Result};
use crate::gate::{GateParams, GATE_SLOPE_MAX, GATE_SLOPE_MIN};
use crate::rmp::RmpConfig;
use crate::synth::LabeledSequence;
use crate::upr::{self, PolicyAction, PrototypeBankSet, UprConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Standard deviation of the initial classifier weights.
    pub init_std: f64,
    pub gate: GateParams,
    pub rmp: RmpConfig,
    pub upr: UprConfig,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            init_std: 0.01,
            gate: GateParams::default(),
            rmp: RmpConfig::default(),
            upr: UprConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        self.gate.validate()?;
        self.rmp.validate()?;
        self.upr.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over sequences of the per-sequence loss.
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Fraction of training frames predicted correctly during the pass.
    pub accuracy: f64,
    pub learning_rate: f64,
    pub prototypes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub class_weights: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// Bounds enforced on `a_m`, `a_u` after every update.
    pub slope_bounds: [f64; 2],
    /// Number of updates where a slope hit a bound.
    pub slope_clamps: usize,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub log: TrainingLog,
}

fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    let progress = step as f64 / total.max(1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn apply_update(params: &mut PipelineParams, grad: &Gradient, lr: f64) -> bool {
    let g = &grad.values;
    let (gw, rest) = g.split_at(params.head.weight.len());
    let (gf, rest) = rest.split_at(params.fusion.weight.len());
    let (gb, rest) = rest.split_at(params.fusion.bias.len());
    for (p, d) in params.head.weight.iter_mut().zip(gw) {
        *p -= lr * d;
    }
    for (p, d) in params.fusion.weight.iter_mut().zip(gf) {
        *p -= lr * d;
    }
    for (p, d) in params.fusion.bias.iter_mut().zip(gb) {
        *p -= lr * d;
    }
    params.gate.a_m -= lr * rest[0];
    params.gate.a_u -= lr * rest[1];
    let before = (params.gate.a_m, params.gate.a_u);
    params.gate.clamp_slopes();
    before != (params.gate.a_m, params.gate.a_u)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Trains a model of `classes` phases on `data`. Deterministic for a
/// fixed `seed`.
pub fn train(data: &[LabeledSequence], classes: usize, cfg: &TrainConfig, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    let first = data.iter().find(|s| !s.is_empty()).ok_or_else(|| contract("training set is empty"))?;
    let dim = first.dim();
    for s in data {
        s.validate(classes)?;
        if !s.is_empty() {
            check_dims("training feature", s.dim(), dim)?;
        }
    }
    let weights = class_weights(data.iter().map(|s| s.labels.as_slice()), classes)?;
    let params = PipelineParams::init(classes, dim, cfg.gate, cfg.rmp, cfg.upr, cfg.init_std, seed)?;
    let mut model = Model::new(params, cfg.variant);

    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
    policy_rng.set_stream(2);

    let frames_per_epoch: u64 = data.iter().map(|s| s.len() as u64).sum();
    let total_steps = frames_per_epoch * cfg.epochs as u64;
    let mut step: u64 = 0;
    let mut grad = Gradient::zeros(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog {
        class_weights: weights.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        slope_bounds: [GATE_SLOPE_MIN, GATE_SLOPE_MAX],
        slope_clamps: 0,
        steps: 0,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut collecting = PrototypeBankSet::new(classes, cfg.upr.capacity);
        let (mut ce_sum, mut kl_sum, mut seqs) = (0.0, 0.0, 0usize);
        let (mut correct, mut seen) = (0usize, 0usize);

        for &idx in &order {
            let seq = &data[idx];
            if seq.is_empty() {
                continue;
            }
            let mut session = model.session();
            let mut prev: Option<Vec<f64>> = None;
            let (mut seq_ce, mut seq_kl) = (0.0, 0.0);
            for (t, (f, &label)) in seq.features.iter().zip(&seq.labels).enumerate() {
                let out = forward_frame(&model, &mut session, f, t as u64).map_err(diverged(epoch))?;
                correct += usize::from(out.record.final_pred() == label);
                seen += 1;
                let baseline = out.record.baseline.clone();
                let ctx = FrameContext {
                    f_t: f.clone(),
                    label,
                    memory_context: out.memory_context,
                    prototype_offset: out.prototype_offset,
                    prev_final: prev.take(),
                };
                grad.clear();
                let l = frame_loss(&model.params, model.variant, &ctx, &weights, 1.0, 1.0, Some(&mut grad))
                    .map_err(diverged(epoch))?;
                let total = l.ce + l.kl;
                if !total.is_finite() || grad.values.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { epoch, loss: total });
                }
                seq_ce += l.ce;
                seq_kl += l.kl;

                let lr = cosine_lr(cfg.learning_rate, step, total_steps);
                if apply_update(&mut model.params, &grad, lr) {
                    log.slope_clamps += 1;
                }
                step += 1;

                let u = upr::uncertainty(&baseline);
                let state = upr::policy_state(&baseline, collecting.bank(label), cfg.upr.capacity)?;
                if upr::policy_decide(&state, &cfg.upr, &model.params.policy, &mut policy_rng) == PolicyAction::Add {
                    collecting.insert(label, f.clone(), u, step)?;
                }
                prev = Some(out.record.final_dist.into_vec());
            }
            let n = seq.len() as f64;
            ce_sum += seq_ce / n;
            kl_sum += if seq.len() > 1 { seq_kl / (n - 1.0) } else { 0.0 };
            seqs += 1;
        }

        model.banks = collecting;
        let (ce, kl) = (ce_sum / seqs as f64, kl_sum / seqs as f64);
        let loss = ce + kl;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        log.epochs.push(EpochLog {
            epoch,
            loss,
            ce,
            kl,
            accuracy: correct as f64 / seen.max(1) as f64,
            learning_rate: cosine_lr(cfg.learning_rate, step, total_steps),
            prototypes: model.banks.total(),
        });
    }
    log.steps = step;
    Ok(TrainedModel { model, log })
}
