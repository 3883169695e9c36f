//! Hand-derived gradients of `CE + KL` through the gated pipeline.
//!
//! Reliability scores, memory selection, prototype ranking and retrieval
//! weights are constants of the forward pass: a [`FrameContext`] freezes
//! them, so the loss is a smooth function of the learnable parameters and
//! can be compared against central finite differences.

use super::{evaluate_frame, forward_frame, loss::CE_EPS, GateMode, Model, PipelineParams, Variant};
use crate::error::{check_dims, contract, Result};
use crate::synth::LabeledSequence;

/// Inputs of one frame's loss that do not depend on the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameContext {
    pub f_t: Vec<f64>,
    pub label: usize,
    /// Weighted memory context, `None` when no memory passed the filter.
    pub memory_context: Option<Vec<f64>>,
    /// `sum_j w_j p_j` over retrieved prototypes.
    pub prototype_offset: Option<Vec<f64>>,
    /// Final distribution of the previous frame, the KL target.
    pub prev_final: Option<Vec<f64>>,
}

/// Gradient in the layout of [`PipelineParams::learnable`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    head_len: usize,
    fusion_len: usize,
    dim: usize,
}

impl Gradient {
    pub fn zeros(params: &PipelineParams) -> Self {
        Self {
            values: vec![0.0; params.num_learnable()],
            head_len: params.head.weight.len(),
            fusion_len: params.fusion.weight.len(),
            dim: params.dim(),
        }
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    fn head_mut(&mut self) -> &mut [f64] {
        &mut self.values[..self.head_len]
    }

    fn fusion_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let start = self.head_len;
        let (w, rest) = self.values[start..].split_at_mut(self.fusion_len);
        (w, &mut rest[..self.dim])
    }

    fn slopes_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        &mut self.values[n - 2..]
    }
}

/// Unscaled loss terms of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct FrameLoss {
    pub ce: f64,
    pub kl: f64,
}

/// Loss of one frame; the gradient of `ce_scale * CE + kl_scale * KL` is
/// accumulated into `grad` when given.
pub(crate) fn frame_loss(
    params: &PipelineParams,
    variant: Variant,
    ctx: &FrameContext,
    class_weights: &[f64],
    ce_scale: f64,
    kl_scale: f64,
    grad: Option<&mut Gradient>,
) -> Result<FrameLoss> {
    let classes = params.classes();
    let dim = params.dim();
    if ctx.label >= classes {
        return Err(contract(format!("label {} out of range 0..{classes}", ctx.label)));
    }
    let ev = evaluate_frame(params, variant, &ctx.f_t, ctx.memory_context.as_deref(), ctx.prototype_offset.as_deref())?;
    let weight = class_weights[ctx.label];
    let y_label = ev.probs[ctx.label];
    let mut loss = FrameLoss { ce: -weight * (y_label + CE_EPS).ln(), kl: 0.0 };
    if let Some(prev) = &ctx.prev_final {
        check_dims("KL target", prev.len(), classes)?;
        loss.kl = prev.iter().zip(&ev.log_probs).filter(|(p, _)| **p > 0.0).map(|(p, lq)| p * (p.ln() - lq)).sum();
    }
    let Some(grad) = grad else {
        return Ok(loss);
    };

    // d loss / d final logits
    let ce_coef = -ce_scale * weight * y_label / (y_label + CE_EPS);
    let mut dz: Vec<f64> = ev.probs.iter().map(|y| -ce_coef * y).collect();
    dz[ctx.label] += ce_coef;
    if let Some(prev) = &ctx.prev_final {
        let mass: f64 = prev.iter().sum();
        for ((d, y), p) in dz.iter_mut().zip(&ev.probs).zip(prev) {
            *d += kl_scale * (y * mass - p);
        }
    }

    let head = &params.head.weight;
    let mut d_fused = vec![0.0; dim];
    {
        let dw = grad.head_mut();
        for (k, &dzk) in dz.iter().enumerate() {
            let row = &head[k * dim..(k + 1) * dim];
            let drow = &mut dw[k * dim..(k + 1) * dim];
            for i in 0..dim {
                drow[i] += dzk * ev.fused[i];
                d_fused[i] += dzk * row[i];
            }
        }
    }

    let (mode_m, mode_u) = variant.gate_modes();
    let mut d_conf = 0.0;
    let confidence = ev.base_probs[ev.conf_index];
    if let Some(f_m) = &ev.f_m {
        if let Some(mem) = &ctx.memory_context {
            let (dw, db) = grad.fusion_mut();
            for i in 0..dim {
                let d = ev.g_m * d_fused[i];
                let row = &mut dw[i * 2 * dim..(i + 1) * 2 * dim];
                for j in 0..dim {
                    row[j] += d * ctx.f_t[j];
                    row[dim + j] += d * mem[j];
                }
                db[i] += d;
            }
        }
        if mode_m == GateMode::Learned {
            let dg: f64 = d_fused.iter().zip(f_m).map(|(a, b)| a * b).sum();
            let slope = ev.g_m * (1.0 - ev.g_m);
            grad.slopes_mut()[0] += dg * slope * (params.gate.tau_m - confidence);
            d_conf -= dg * slope * params.gate.a_m;
        }
    }
    if let Some(f_u) = &ev.f_u {
        if mode_u == GateMode::Learned {
            let dg: f64 = d_fused.iter().zip(f_u).map(|(a, b)| a * b).sum();
            let slope = ev.g_u * (1.0 - ev.g_u);
            grad.slopes_mut()[1] += dg * slope * (params.gate.tau_u - confidence);
            d_conf -= dg * slope * params.gate.a_u;
        }
    }

    // Confidence is the max baseline probability: back through softmax.
    if d_conf != 0.0 {
        let m = ev.conf_index;
        let dw = grad.head_mut();
        for (k, &pk) in ev.base_probs.iter().enumerate() {
            let indicator = if k == m { 1.0 } else { 0.0 };
            let dz0 = d_conf * confidence * (indicator - pk);
            for (d, &x) in dw[k * dim..(k + 1) * dim].iter_mut().zip(&ctx.f_t) {
                *d += dz0 * x;
            }
        }
    }
    Ok(loss)
}

fn scales(contexts: &[FrameContext]) -> (f64, f64) {
    let with_prev = contexts.iter().filter(|c| c.prev_final.is_some()).count();
    let ce = 1.0 / contexts.len() as f64;
    let kl = if with_prev > 0 { 1.0 / with_prev as f64 } else { 0.0 };
    (ce, kl)
}

/// Mean class-weighted CE over frames plus mean KL over frames with a
/// predecessor.
pub fn sequence_loss(
    params: &PipelineParams,
    variant: Variant,
    contexts: &[FrameContext],
    class_weights: &[f64],
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(contract("loss of an empty sequence"));
    }
    let (ce, kl) = scales(contexts);
    let mut total = 0.0;
    for c in contexts {
        let l = frame_loss(params, variant, c, class_weights, ce, kl, None)?;
        total += ce * l.ce + kl * l.kl;
    }
    Ok(total)
}

pub fn sequence_loss_and_grad(
    params: &PipelineParams,
    variant: Variant,
    contexts: &[FrameContext],
    class_weights: &[f64],
) -> Result<(f64, Gradient)> {
    if contexts.is_empty() {
        return Err(contract("loss of an empty sequence"));
    }
    let (ce, kl) = scales(contexts);
    let mut grad = Gradient::zeros(params);
    let mut loss = 0.0;
    for c in contexts {
        let l = frame_loss(params, variant, c, class_weights, ce, kl, Some(&mut grad))?;
        loss += ce * l.ce + kl * l.kl;
    }
    Ok((loss, grad))
}

/// Streams `seq` through `model` with fixed parameters and records the
/// forward-pass constants of every frame.
pub fn frozen_contexts(model: &Model, seq: &LabeledSequence) -> Result<Vec<FrameContext>> {
    let mut session = model.session();
    let mut prev: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(seq.len());
    for (t, (f, &label)) in seq.features.iter().zip(&seq.labels).enumerate() {
        let o = forward_frame(model, &mut session, f, t as u64)?;
        out.push(FrameContext {
            f_t: f.clone(),
            label,
            memory_context: o.memory_context,
            prototype_offset: o.prototype_offset,
            prev_final: prev.take(),
        });
        prev = Some(o.record.final_dist.into_vec());
    }
    Ok(out)
}

/// Worst coordinate-wise relative error between `analytic` and central
/// differences of `loss` around `theta`, with denominator
/// `max(|g_a|, |g_n|, 1e-8)`.
pub fn max_relative_error<F>(theta: &[f64], analytic: &[f64], coords: &[usize], h: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    check_dims("gradient", analytic.len(), theta.len())?;
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= theta.len() {
            return Err(contract(format!("coordinate {i} out of range")));
        }
        probe[i] = theta[i] + h;
        let up = loss(&probe)?;
        probe[i] = theta[i] - h;
        let down = loss(&probe)?;
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Checks the analytic gradient of the sequence loss on `batch` against
/// central differences over every learnable coordinate.
pub fn grad_check(model: &Model, batch: &LabeledSequence, class_weights: &[f64], h: f64) -> Result<f64> {
    let contexts = frozen_contexts(model, batch)?;
    let (_, grad) = sequence_loss_and_grad(&model.params, model.variant, &contexts, class_weights)?;
    let theta = model.params.learnable();
    let coords: Vec<usize> = (0..theta.len()).collect();
    let mut probe = model.params.clone();
    max_relative_error(&theta, &grad.values, &coords, h, |values| {
        probe.set_learnable(values)?;
        sequence_loss(&probe, model.variant, &contexts, class_weights)
    })
}
