//! Uncertainty-aware prototype retrieval.
//!
//! During training each class keeps a bounded bank of its hardest samples
//! (lowest baseline confidence). At inference the frame feature is refined
//! by adding a softmax-weighted mix of the top-k prototypes, ranked by
//! cosine similarity scaled with the baseline probability of the
//! prototype's class.

use std::cmp::Ordering;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, contract, Error, Result};
use crate::numerics::{self, cosine_with_norms, entropy, sigmoid, PhaseDistribution};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prototype {
    pub feature: Vec<f64>,
    pub class_label: usize,
    pub uncertainty: f64,
    pub insert_step: u64,
    #[serde(skip)]
    norm: Option<f64>,
}

impl Prototype {
    pub fn new(feature: Vec<f64>, class_label: usize, uncertainty: f64, insert_step: u64) -> Self {
        let norm = Some(numerics::norm(&feature));
        Self { feature, class_label, uncertainty, insert_step, norm }
    }

    fn norm(&self) -> f64 {
        self.norm.unwrap_or_else(|| numerics::norm(&self.feature))
    }
}

impl PartialEq for Prototype {
    fn eq(&self, other: &Self) -> bool {
        self.feature == other.feature
            && self.class_label == other.class_label
            && self.uncertainty == other.uncertainty
            && self.insert_step == other.insert_step
    }
}

/// Identifies a stored prototype across banks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrototypeId {
    pub class_label: usize,
    pub insert_step: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Always propose; hardness is enforced by the replacement rule.
    #[default]
    Deterministic,
    /// Sample add/skip from the policy perceptron.
    Stochastic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UprConfig {
    /// Prototypes kept per class (`N`).
    pub capacity: usize,
    /// Prototypes retrieved per frame (`k`).
    pub retrieval_k: usize,
    #[serde(default)]
    pub policy_mode: PolicyMode,
}

impl Default for UprConfig {
    fn default() -> Self {
        Self { capacity: 64, retrieval_k: 8, policy_mode: PolicyMode::Deterministic }
    }
}

impl UprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("prototype capacity must be at least 1".into()));
        }
        if self.retrieval_k == 0 {
            return Err(Error::Config("retrieval k must be at least 1".into()));
        }
        Ok(())
    }
}

/// One bounded bank of prototypes per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeBankSet {
    banks: Vec<Vec<Prototype>>,
    capacity: usize,
}

impl PrototypeBankSet {
    pub fn new(classes: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "prototype capacity must be positive");
        Self { banks: vec![Vec::new(); classes], capacity }
    }

    pub fn num_classes(&self) -> usize {
        self.banks.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn bank(&self, class: usize) -> &[Prototype] {
        &self.banks[class]
    }

    pub fn total(&self) -> usize {
        self.banks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.banks.iter().flatten()
    }

    /// Checks bank sizes, labels and feature dimensions after loading.
    pub fn validate(&self, dim: usize) -> Result<()> {
        for (c, bank) in self.banks.iter().enumerate() {
            if bank.len() > self.capacity {
                return Err(contract(format!("bank {c} holds {} > {} prototypes", bank.len(), self.capacity)));
            }
            for p in bank {
                if p.class_label != c {
                    return Err(contract(format!("prototype labelled {} stored in bank {c}", p.class_label)));
                }
                check_dims("prototype feature", p.feature.len(), dim)?;
            }
        }
        Ok(())
    }

    /// Offers a sample to class `class`'s bank.
    ///
    /// Below capacity it is appended. At capacity it replaces the least
    /// uncertain stored prototype if strictly more uncertain; among equally
    /// uncertain minima the most recently inserted one is evicted. The
    /// bank therefore always equals the top-`N` of everything offered,
    /// ordered by uncertainty descending then insertion step ascending.
    /// Returns whether the sample was stored.
    pub fn insert(&mut self, class: usize, feature: Vec<f64>, uncertainty: f64, step: u64) -> Result<bool> {
        if class >= self.banks.len() {
            return Err(contract(format!("class {class} out of range 0..{}", self.banks.len())));
        }
        if !(0.0..=1.0).contains(&uncertainty) {
            return Err(contract(format!("uncertainty {uncertainty} outside [0, 1]")));
        }
        if let Some(p) = self.iter().next() {
            check_dims("prototype insert", feature.len(), p.feature.len())?;
        }
        let bank = &mut self.banks[class];
        if bank.len() < self.capacity {
            bank.push(Prototype::new(feature, class, uncertainty, step));
            return Ok(true);
        }
        let (slot, weakest) = bank
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.uncertainty.total_cmp(&b.uncertainty).then(b.insert_step.cmp(&a.insert_step)))
            .expect("bank at capacity is non-empty");
        if uncertainty > weakest.uncertainty {
            bank[slot] = Prototype::new(feature, class, uncertainty, step);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn clear(&mut self) {
        for b in &mut self.banks {
            b.clear();
        }
    }
}

/// `1 - max p`.
pub fn uncertainty(p: &PhaseDistribution) -> f64 {
    (1.0 - p.max()).max(0.0)
}

/// Input of the add/skip policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub uncertainty: f64,
    pub entropy: f64,
    /// Top-1 minus top-2 probability.
    pub margin: f64,
    /// Fraction of the class bank in use.
    pub occupancy: f64,
}

impl PolicyState {
    pub fn as_array(&self) -> [f64; 4] {
        [self.uncertainty, self.entropy, self.margin, self.occupancy]
    }
}

pub fn policy_state(p: &PhaseDistribution, bank: &[Prototype], capacity: usize) -> Result<PolicyState> {
    if capacity == 0 || bank.len() > capacity {
        return Err(contract(format!("bank holds {} prototypes, capacity {capacity}", bank.len())));
    }
    let probs = p.as_slice();
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in probs {
        if x > first {
            second = first;
            first = x;
        } else if x > second {
            second = x;
        }
    }
    Ok(PolicyState {
        uncertainty: uncertainty(p),
        entropy: entropy(p),
        margin: first - second,
        occupancy: bank.len() as f64 / capacity as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    Add,
    Skip,
}

pub const POLICY_HIDDEN: usize = 8;
const POLICY_INPUTS: usize = 4;

/// Two-layer perceptron `sigmoid(w2 . tanh(W1 s + b1) + b2)` giving the
/// probability of adding a sample. Untrained unless loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyNet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl PolicyNet {
    /// Uniform(+-1/sqrt(fan_in)) initialization from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound1 = 1.0 / (POLICY_INPUTS as f64).sqrt();
        let bound2 = 1.0 / (POLICY_HIDDEN as f64).sqrt();
        let mut draw = |n: usize, b: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-b..b)).collect() };
        let w1 = draw(POLICY_HIDDEN * POLICY_INPUTS, bound1);
        let b1 = draw(POLICY_HIDDEN, bound1);
        let w2 = draw(POLICY_HIDDEN, bound2);
        let b2 = draw(1, bound2)[0];
        Self { w1, b1, w2, b2 }
    }

    /// Saturated network whose add-probability is exactly 1.
    pub fn always_add() -> Self {
        Self {
            w1: vec![0.0; POLICY_HIDDEN * POLICY_INPUTS],
            b1: vec![0.0; POLICY_HIDDEN],
            w2: vec![0.0; POLICY_HIDDEN],
            b2: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims("policy w1", self.w1.len(), POLICY_HIDDEN * POLICY_INPUTS)?;
        check_dims("policy b1", self.b1.len(), POLICY_HIDDEN)?;
        check_dims("policy w2", self.w2.len(), POLICY_HIDDEN)?;
        Ok(())
    }

    pub fn add_probability(&self, s: &PolicyState) -> f64 {
        let x = s.as_array();
        let hidden = numerics::mat_vec(&self.w1, POLICY_HIDDEN, &x);
        let logit: f64 =
            hidden.iter().zip(&self.b1).zip(&self.w2).map(|((h, b), w)| w * (h + b).tanh()).sum::<f64>() + self.b2;
        sigmoid(logit)
    }
}

/// Decides whether to offer a sample to its class bank. Only the
/// stochastic mode draws from `rng`.
pub fn policy_decide(s: &PolicyState, cfg: &UprConfig, policy: &PolicyNet, rng: &mut impl Rng) -> PolicyAction {
    let add = match cfg.policy_mode {
        PolicyMode::Deterministic => s.occupancy < 1.0 || s.uncertainty > 0.0,
        PolicyMode::Stochastic => rng.random::<f64>() < policy.add_probability(s),
    };
    if add {
        PolicyAction::Add
    } else {
        PolicyAction::Skip
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPrototype {
    pub id: PrototypeId,
    pub score: f64,
    pub cosine: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    /// `f_t^u`
    pub feature: Vec<f64>,
    pub selected: Vec<RetrievedPrototype>,
}

impl Retrieval {
    /// `f_t^u - f_t`, the part contributed by prototypes.
    pub fn offset(&self, f_t: &[f64]) -> Vec<f64> {
        self.feature.iter().zip(f_t).map(|(a, b)| a - b).collect()
    }
}

struct Candidate<'a> {
    proto: &'a Prototype,
    slot: usize,
    score: f64,
    cosine: f64,
}

// Higher score, then higher cosine, then earlier insertion, then bank
// position; total so the selection is deterministic.
fn rank(a: &Candidate<'_>, b: &Candidate<'_>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.cosine.total_cmp(&a.cosine))
        .then(a.proto.insert_step.cmp(&b.proto.insert_step))
        .then(a.proto.class_label.cmp(&b.proto.class_label))
        .then(a.slot.cmp(&b.slot))
}

/// Refines `f_t` with its top-`k` prototypes across all classes.
pub fn retrieve(f_t: &[f64], p_t: &PhaseDistribution, banks: &PrototypeBankSet, k: usize) -> Result<Retrieval> {
    check_dims("retrieval classes", p_t.num_classes(), banks.num_classes())?;
    if k == 0 {
        return Err(contract("retrieval k must be at least 1"));
    }
    let f_norm = numerics::norm(f_t);
    let probs = p_t.as_slice();
    let mut candidates = Vec::with_capacity(banks.total());
    for (class, bank) in banks.banks.iter().enumerate() {
        for (slot, proto) in bank.iter().enumerate() {
            check_dims("retrieval feature", proto.feature.len(), f_t.len())?;
            let cosine = cosine_with_norms(f_t, f_norm, &proto.feature, proto.norm());
            candidates.push(Candidate { proto, slot, score: probs[class] * cosine, cosine });
        }
    }
    if candidates.is_empty() {
        return Ok(Retrieval { feature: f_t.to_vec(), selected: Vec::new() });
    }
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, rank);
        candidates.truncate(k);
    }
    candidates.sort_by(rank);

    let max = candidates.iter().map(|c| c.cosine).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = candidates.iter().map(|c| (c.cosine - max).exp()).sum();
    let mut feature = f_t.to_vec();
    let selected = candidates
        .iter()
        .map(|c| {
            let weight = (c.cosine - max).exp() / total;
            numerics::axpy(&mut feature, weight, &c.proto.feature);
            RetrievedPrototype {
                id: PrototypeId { class_label: c.proto.class_label, insert_step: c.proto.insert_step },
                score: c.score,
                cosine: c.cosine,
                weight,
            }
        })
        .collect();
    Ok(Retrieval { feature, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty(&PhaseDistribution::one_hot(7, 0)), 0.0);
        assert!((uncertainty(&PhaseDistribution::uniform(7)) - 6.0 / 7.0).abs() < 1e-15);
        let p = PhaseDistribution::new(vec![0.6, 0.3, 0.1]).unwrap();
        assert!((uncertainty(&p) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn policy_state_examples() {
        let s = policy_state(&PhaseDistribution::uniform(7), &[], 256).unwrap();
        assert!((s.uncertainty - 6.0 / 7.0).abs() < 1e-15);
        assert!((s.entropy - 7f64.ln()).abs() < 1e-12);
        assert_eq!(s.margin, 0.0);
        assert_eq!(s.occupancy, 0.0);

        let full: Vec<Prototype> = (0..4).map(|i| Prototype::new(vec![1.0], 0, 0.1, i)).collect();
        let s = policy_state(&PhaseDistribution::one_hot(3, 1), &full, 4).unwrap();
        assert_eq!((s.uncertainty, s.entropy, s.margin, s.occupancy), (0.0, 0.0, 1.0, 1.0));

        let half: Vec<Prototype> = (0..128).map(|i| Prototype::new(vec![1.0], 0, 0.1, i)).collect();
        let p = PhaseDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let s = policy_state(&p, &half, 256).unwrap();
        let h = -(0.5f64 * 0.5f64.ln() + 0.3 * 0.3f64.ln() + 0.2 * 0.2f64.ln());
        assert!((s.uncertainty - 0.5).abs() < 1e-15);
        assert!((s.entropy - h).abs() < 1e-15);
        assert!((s.entropy - 1.029_653).abs() < 1e-6);
        assert!((s.margin - 0.2).abs() < 1e-15);
        assert_eq!(s.occupancy, 0.5);
    }

    #[test]
    fn deterministic_policy_adds_when_not_full() {
        let cfg = UprConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = PolicyState { uncertainty: 0.0, entropy: 0.0, margin: 1.0, occupancy: 0.5 };
        assert_eq!(policy_decide(&s, &cfg, &PolicyNet::seeded(1), &mut rng), PolicyAction::Add);
        let s = PolicyState { occupancy: 1.0, ..s };
        assert_eq!(policy_decide(&s, &cfg, &PolicyNet::seeded(1), &mut rng), PolicyAction::Skip);
    }

    #[test]
    fn saturated_policy_always_adds() {
        let cfg = UprConfig { policy_mode: PolicyMode::Stochastic, ..Default::default() };
        let net = PolicyNet::always_add();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000 {
            let s = PolicyState { uncertainty: (i % 7) as f64 / 10.0, entropy: 0.3, margin: 0.2, occupancy: 1.0 };
            assert_eq!(policy_decide(&s, &cfg, &net, &mut rng), PolicyAction::Add);
        }
    }

    #[test]
    fn stochastic_policy_replays_for_fixed_seed() {
        let cfg = UprConfig { policy_mode: PolicyMode::Stochastic, ..Default::default() };
        let net = PolicyNet::seeded(11);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..500)
                .map(|i| {
                    let u = (i as f64 * 0.37).sin().abs() * 0.8;
                    let s = PolicyState { uncertainty: u, entropy: u * 2.0, margin: 1.0 - u, occupancy: 0.5 };
                    policy_decide(&s, &cfg, &net, &mut rng)
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.contains(&PolicyAction::Add) && a.contains(&PolicyAction::Skip));
    }

    #[test]
    fn insert_append_then_reject() {
        let mut banks = PrototypeBankSet::new(2, 2);
        assert!(banks.insert(1, vec![1.0, 0.0], 0.5, 0).unwrap());
        assert_eq!(banks.bank(1).len(), 1);
        assert!(banks.insert(1, vec![0.0, 1.0], 0.6, 1).unwrap());
        assert!(!banks.insert(1, vec![1.0, 1.0], 0.1, 2).unwrap());
        assert_eq!(banks.bank(1).iter().map(|p| p.insert_step).collect::<Vec<_>>(), vec![0, 1]);
        assert!(banks.insert(1, vec![1.0, 1.0], 0.55, 3).unwrap());
        assert_eq!(banks.bank(1).iter().map(|p| p.insert_step).collect::<Vec<_>>(), vec![3, 1]);
    }

    #[test]
    fn insert_ties_evict_most_recent_minimum() {
        let mut banks = PrototypeBankSet::new(1, 2);
        banks.insert(0, vec![1.0], 0.5, 0).unwrap();
        banks.insert(0, vec![1.0], 0.5, 1).unwrap();
        // equal uncertainty never displaces an incumbent
        assert!(!banks.insert(0, vec![1.0], 0.5, 2).unwrap());
        assert!(banks.insert(0, vec![1.0], 0.7, 3).unwrap());
        let mut steps: Vec<u64> = banks.bank(0).iter().map(|p| p.insert_step).collect();
        steps.sort();
        assert_eq!(steps, vec![0, 3]);
    }

    #[test]
    fn insert_rejects_bad_input() {
        let mut banks = PrototypeBankSet::new(2, 2);
        assert!(banks.insert(2, vec![1.0], 0.5, 0).is_err());
        assert!(banks.insert(0, vec![1.0], 1.5, 0).is_err());
    }

    fn top_n_oracle(items: &[(f64, u64)], n: usize) -> Vec<u64> {
        let mut sorted = items.to_vec();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut steps: Vec<u64> = sorted.into_iter().take(n).map(|(_, s)| s).collect();
        steps.sort();
        steps
    }

    #[test]
    fn insert_matches_sort_oracle_on_random_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut banks = PrototypeBankSet::new(1, 4);
        let mut offered = Vec::new();
        for step in 0..200u64 {
            let u: f64 = rng.random_range(0.0..0.9);
            banks.insert(0, vec![u], u, step).unwrap();
            offered.push((u, step));
        }
        let mut kept: Vec<u64> = banks.bank(0).iter().map(|p| p.insert_step).collect();
        kept.sort();
        assert_eq!(kept, top_n_oracle(&offered, 4));
    }

    #[test]
    fn retrieve_empty_banks_is_identity() {
        let banks = PrototypeBankSet::new(3, 4);
        let f = vec![1.0, -2.0];
        let r = retrieve(&f, &PhaseDistribution::uniform(3), &banks, 8).unwrap();
        assert_eq!(r.feature, f);
        assert!(r.selected.is_empty());
    }

    #[test]
    fn retrieve_single_prototype_equal_to_feature() {
        let mut banks = PrototypeBankSet::new(3, 4);
        let f = vec![0.25, -1.5, 3.0];
        banks.insert(2, f.clone(), 0.3, 0).unwrap();
        let p = PhaseDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let r = retrieve(&f, &p, &banks, 8).unwrap();
        assert_eq!(r.selected.len(), 1);
        assert_eq!(r.selected[0].weight, 1.0);
        let doubled: Vec<f64> = f.iter().map(|x| 2.0 * x).collect();
        assert_eq!(r.feature, doubled);
    }

    #[test]
    fn retrieve_zero_prototypes_leave_feature_unchanged() {
        let mut banks = PrototypeBankSet::new(2, 8);
        for i in 0..6 {
            banks.insert(i % 2, vec![0.0; 3], 0.4, i as u64).unwrap();
        }
        let f = vec![0.3, 0.1, -0.7];
        let r = retrieve(&f, &PhaseDistribution::uniform(2), &banks, 4).unwrap();
        assert_eq!(r.feature, f);
        let total: f64 = r.selected.iter().map(|s| s.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    fn random_banks(rng: &mut ChaCha8Rng, classes: usize, dim: usize, count: usize) -> PrototypeBankSet {
        let mut banks = PrototypeBankSet::new(classes, count);
        for step in 0..count as u64 {
            let c = rng.random_range(0..classes);
            let feat: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            banks.insert(c, feat, rng.random_range(0.0..0.8), step).unwrap();
        }
        banks
    }

    proptest! {
        #[test]
        fn retrieval_invariant_to_positive_rescaling(seed in 0u64..1000, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let banks = random_banks(&mut rng, 4, 5, 30);
            let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = PhaseDistribution::from_logits(&logits).unwrap();
            let scaled: Vec<f64> = f.iter().map(|x| x * scale).collect();
            let a = retrieve(&f, &p, &banks, 8).unwrap();
            let b = retrieve(&scaled, &p, &banks, 8).unwrap();
            let ids_a: Vec<_> = a.selected.iter().map(|s| s.id).collect();
            let ids_b: Vec<_> = b.selected.iter().map(|s| s.id).collect();
            prop_assert_eq!(ids_a, ids_b);
            let total: f64 = a.selected.iter().map(|s| s.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn banks_never_exceed_capacity(ops in proptest::collection::vec((0usize..3, 0.0f64..1.0), 0..200), cap in 1usize..6) {
            let mut banks = PrototypeBankSet::new(3, cap);
            for (step, (c, u)) in ops.into_iter().enumerate() {
                banks.insert(c, vec![u, 1.0], u, step as u64).unwrap();
                prop_assert!(banks.bank(c).len() <= cap);
            }
            prop_assert!(banks.validate(2).is_ok());
        }
    }
}
