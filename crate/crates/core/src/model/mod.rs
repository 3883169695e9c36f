//! Streaming pipeline: baseline head, memory and prototype pathways, gated
//! integration, plus the training loop and gradient verification.

mod checkpoint;
mod grad;
mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{content_hash, Checkpoint, CHECKPOINT_VERSION};
pub use grad::{
    frozen_contexts, grad_check, max_relative_error, sequence_loss, sequence_loss_and_grad, FrameContext, Gradient,
};
pub use loss::{class_weights, loss_ce, loss_kl, CE_EPS};
pub use train::{train, EpochLog, TrainConfig, TrainedModel, TrainingLog};

use crate::error::{check_dims, contract, Error, Result};
use crate::gate::{self, ClassifierHead, GateParams};
use crate::numerics::{self, PhaseDistribution};
use crate::rmp::{self, FusionLayer, MemoryBank, MemoryEntry, RmpConfig};
use crate::synth::LabeledSequence;
use crate::upr::{self, PolicyNet, PrototypeBankSet, PrototypeId, UprConfig};

/// How a pathway's gate is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// Confidence-driven sigmoid gate with a learnable slope.
    Learned,
    /// Constant gate value; `0` removes the pathway entirely.
    Fixed(f64),
}

impl GateMode {
    fn active(self) -> bool {
        self != GateMode::Fixed(0.0)
    }
}

/// Ablation variants. Each one forces some gates and learns the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both gates forced to 0: the linear head on the raw feature.
    Baseline,
    /// Prototype gate forced to 0.
    Rmp,
    /// Memory gate forced to 0.
    Upr,
    /// Both gates forced to 1.
    Both,
    /// Both gates learned.
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Rmp, Variant::Upr, Variant::Both, Variant::Full];

    pub fn gate_modes(self) -> (GateMode, GateMode) {
        use GateMode::*;
        match self {
            Variant::Baseline => (Fixed(0.0), Fixed(0.0)),
            Variant::Rmp => (Learned, Fixed(0.0)),
            Variant::Upr => (Fixed(0.0), Learned),
            Variant::Both => (Fixed(1.0), Fixed(1.0)),
            Variant::Full => (Learned, Learned),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Rmp => "+RMP",
            Variant::Upr => "+UPR",
            Variant::Both => "+Both",
            Variant::Full => "DSTED",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Rmp => "rmp",
            Variant::Upr => "upr",
            Variant::Both => "both",
            Variant::Full => "full",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Every learnable and configured parameter of the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineParams {
    pub head: ClassifierHead,
    pub fusion: FusionLayer,
    pub gate: GateParams,
    pub rmp: RmpConfig,
    pub upr: UprConfig,
    pub policy: PolicyNet,
}

impl PipelineParams {
    /// Head drawn from `N(0, init_std^2)`, identity fusion, seeded policy.
    pub fn init(
        classes: usize,
        dim: usize,
        gate: GateParams,
        rmp: RmpConfig,
        upr: UprConfig,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_std).map_err(|e| crate::Error::Config(e.to_string()))?;
        let head =
            ClassifierHead { classes, dim, weight: (0..classes * dim).map(|_| normal.sample(&mut rng)).collect() };
        let params = Self {
            head,
            fusion: FusionLayer::identity(dim),
            gate,
            rmp,
            upr,
            policy: PolicyNet::seeded(seed ^ 0x5eed_0f90_11c7),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    pub fn dim(&self) -> usize {
        self.head.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.fusion.validate()?;
        check_dims("fusion vs head dimension", self.fusion.dim, self.head.dim)?;
        self.gate.validate()?;
        self.rmp.validate()?;
        self.upr.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    /// Number of learnable scalars: head, fusion weight and bias, two slopes.
    pub fn num_learnable(&self) -> usize {
        self.head.weight.len() + self.fusion.weight.len() + self.fusion.bias.len() + 2
    }

    /// Learnable parameters in the fixed order head, fusion weight, fusion
    /// bias, `a_m`, `a_u`.
    pub fn learnable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_learnable());
        out.extend_from_slice(&self.head.weight);
        out.extend_from_slice(&self.fusion.weight);
        out.extend_from_slice(&self.fusion.bias);
        out.push(self.gate.a_m);
        out.push(self.gate.a_u);
        out
    }

    pub fn set_learnable(&mut self, values: &[f64]) -> Result<()> {
        check_dims("learnable parameters", values.len(), self.num_learnable())?;
        let (w, rest) = values.split_at(self.head.weight.len());
        let (fw, rest) = rest.split_at(self.fusion.weight.len());
        let (fb, rest) = rest.split_at(self.fusion.bias.len());
        self.head.weight.copy_from_slice(w);
        self.fusion.weight.copy_from_slice(fw);
        self.fusion.bias.copy_from_slice(fb);
        self.gate.a_m = rest[0];
        self.gate.a_u = rest[1];
        Ok(())
    }
}

/// Parameters, frozen prototype banks and the ablation variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub params: PipelineParams,
    pub banks: PrototypeBankSet,
    pub variant: Variant,
}

impl Model {
    pub fn new(params: PipelineParams, variant: Variant) -> Self {
        let banks = PrototypeBankSet::new(params.classes(), params.upr.capacity);
        Self { params, banks, variant }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        check_dims("prototype banks vs classes", self.banks.num_classes(), self.params.classes())?;
        self.banks.validate(self.params.dim())
    }

    pub fn session(&self) -> Session {
        Session::new(self.params.rmp.capacity)
    }
}

/// Per-sequence streaming state: the memory bank of past frames.
#[derive(Clone, Debug)]
pub struct Session {
    memory: MemoryBank,
    last_t: Option<u64>,
}

impl Session {
    pub fn new(memory_capacity: usize) -> Self {
        Self { memory: MemoryBank::new(memory_capacity), last_t: None }
    }

    pub fn memory(&self) -> &MemoryBank {
        &self.memory
    }
}

/// Diagnostics for one processed frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: u64,
    pub baseline: PhaseDistribution,
    #[serde(rename = "final")]
    pub final_dist: PhaseDistribution,
    pub g_m: f64,
    pub g_u: f64,
    pub selected_memories: usize,
    pub prototypes: Vec<PrototypeId>,
}

impl FrameRecord {
    pub fn baseline_pred(&self) -> usize {
        self.baseline.argmax()
    }

    pub fn final_pred(&self) -> usize {
        self.final_dist.argmax()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub id: String,
    pub records: Vec<FrameRecord>,
}

impl SequenceResult {
    pub fn final_preds(&self) -> Vec<usize> {
        self.records.iter().map(FrameRecord::final_pred).collect()
    }

    pub fn baseline_preds(&self) -> Vec<usize> {
        self.records.iter().map(FrameRecord::baseline_pred).collect()
    }
}

/// Every intermediate of one frame given parameters and the frozen
/// memory context / prototype offset.
#[derive(Clone, Debug)]
pub(crate) struct FrameEval {
    pub base_probs: Vec<f64>,
    pub conf_index: usize,
    pub g_m: f64,
    pub g_u: f64,
    pub f_m: Option<Vec<f64>>,
    pub f_u: Option<Vec<f64>>,
    pub fused: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

pub(crate) fn evaluate_frame(
    params: &PipelineParams,
    variant: Variant,
    f_t: &[f64],
    memory_context: Option<&[f64]>,
    prototype_offset: Option<&[f64]>,
) -> Result<FrameEval> {
    let base_logits = params.head.logits(f_t)?;
    if base_logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("baseline logits"));
    }
    let base_probs = numerics::softmax(&base_logits)?;
    let conf_index = numerics::argmax(&base_probs);
    let confidence = base_probs[conf_index];
    let (learned_m, learned_u) = gate::gates(confidence, &params.gate);
    let (mode_m, mode_u) = variant.gate_modes();
    let g_m = match mode_m {
        GateMode::Learned => learned_m,
        GateMode::Fixed(v) => v,
    };
    let g_u = match mode_u {
        GateMode::Learned => learned_u,
        GateMode::Fixed(v) => v,
    };

    let f_m = if mode_m.active() {
        Some(match memory_context {
            Some(ctx) => params.fusion.apply(f_t, ctx)?,
            None => f_t.to_vec(),
        })
    } else {
        None
    };
    let f_u = if mode_u.active() {
        let mut f_u = f_t.to_vec();
        if let Some(offset) = prototype_offset {
            check_dims("prototype offset", offset.len(), f_t.len())?;
            numerics::axpy(&mut f_u, 1.0, offset);
        }
        Some(f_u)
    } else {
        None
    };

    let mut fused = f_t.to_vec();
    if let Some(f_m) = &f_m {
        numerics::axpy(&mut fused, g_m, f_m);
    }
    if let Some(f_u) = &f_u {
        numerics::axpy(&mut fused, g_u, f_u);
    }
    let logits = params.head.logits(&fused)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("final logits"));
    }
    let lse = numerics::log_sum_exp(&logits);
    let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let probs = numerics::softmax(&logits)?;
    Ok(FrameEval { base_probs, conf_index, g_m, g_u, f_m, f_u, fused, log_probs, probs })
}

/// Output of [`forward_frame`]: the diagnostics record and the frozen
/// quantities that training treats as constants.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub record: FrameRecord,
    pub memory_context: Option<Vec<f64>>,
    pub prototype_offset: Option<Vec<f64>>,
}

/// Processes frame `t` of a stream and then stores it in the session's
/// memory, so the memory only ever holds strictly earlier frames.
pub fn forward_frame(model: &Model, session: &mut Session, f_t: &[f64], t: u64) -> Result<FrameOutput> {
    if let Some(last) = session.last_t {
        if t <= last {
            return Err(contract(format!("frame {t} presented after frame {last}")));
        }
    }
    let params = &model.params;
    check_dims("frame feature", f_t.len(), params.dim())?;
    let base_logits = params.head.logits(f_t)?;
    if base_logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("baseline logits"));
    }
    let baseline = PhaseDistribution::from_logits(&base_logits)?;
    let (mode_m, mode_u) = model.variant.gate_modes();

    let (memory_context, selected_memories) = if mode_m.active() {
        let selected = rmp::select_and_weight(&session.memory, f_t, &baseline, t, &params.rmp)?;
        (rmp::weighted_context(&selected), selected.len())
    } else {
        (None, 0)
    };
    let (prototype_offset, prototypes) = if mode_u.active() && !model.banks.is_empty() {
        let retrieval = upr::retrieve(f_t, &baseline, &model.banks, params.upr.retrieval_k)?;
        let ids = retrieval.selected.iter().map(|s| s.id).collect();
        (Some(retrieval.offset(f_t)), ids)
    } else {
        (None, Vec::new())
    };

    let eval = evaluate_frame(params, model.variant, f_t, memory_context.as_deref(), prototype_offset.as_deref())?;
    let record = FrameRecord {
        t,
        baseline: baseline.clone(),
        final_dist: PhaseDistribution::new(eval.probs)?,
        g_m: eval.g_m,
        g_u: eval.g_u,
        selected_memories,
        prototypes,
    };
    session.memory.push(MemoryEntry::new(f_t.to_vec(), baseline, t))?;
    session.last_t = Some(t);
    Ok(FrameOutput { record, memory_context, prototype_offset })
}

/// Runs a whole sequence through a fresh session. Frame `i` has timestep `i`.
pub fn run_sequence(model: &Model, seq: &LabeledSequence) -> Result<SequenceResult> {
    let mut session = model.session();
    let records = seq
        .features
        .iter()
        .enumerate()
        .map(|(t, f)| forward_frame(model, &mut session, f, t as u64).map(|o| o.record))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceResult { id: seq.id.clone(), records })
}

/// Runs many sequences, fanning out over the rayon pool. The result does
/// not depend on the pool width.
pub fn run_sequences(model: &Model, seqs: &[LabeledSequence]) -> Result<Vec<SequenceResult>> {
    use rayon::prelude::*;
    seqs.par_iter().map(|s| run_sequence(model, s)).collect()
}
