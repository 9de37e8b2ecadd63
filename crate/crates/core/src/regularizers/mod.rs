//! Stochastic residual-branch regularizers with decoupled forward and
//! backward coefficients.
//!
//! All four methods reduce to two graph nodes from [`crate::autograd`]:
//!
//! * [`Tape::branch_scale`] multiplies a branch by `b + alpha - b*alpha`
//!   forward and passes `(b + beta - b*beta) ⊙ upstream` backward
//!   (ShakeDrop; RandomDrop when `alpha = beta = 0`; Single-branch Shake
//!   when `b` is always 0).
//! * [`Tape::shake_shake`] interpolates two branches with `alpha` forward
//!   and `beta` backward.
//!
//! In the evaluation phase every unit is replaced by its expectation and no
//! random numbers are drawn.

mod coefficients;
mod decay;
mod rng;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use coefficients::{
    draw_coefficients, draw_pool_pairs, Coefficient, CoefficientSpec, Granularity, PoolDraw, Which,
};
pub use decay::{linear_decay, DecaySchedule};
pub use rng::{derive_seed, StreamKey, UnitRng};

use crate::autograd::{GradientFactor, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use coefficients::sample_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Eval,
}

/// Draws `b ~ Bernoulli(p)` from the unit's gate stream.
pub fn draw_gate(p: f64, rng: &mut UnitRng) -> bool {
    rng.gate.gen::<f64>() < p
}

/// `b + c - b*c` for a gate `b` in {0, 1}: all ones when open, `c` when closed.
fn gate_mix(gate: bool, coef: Tensor) -> Tensor {
    if gate {
        Tensor::ones(coef.shape())
    } else {
        coef
    }
}

/// Backward coefficient drawn when the backward pass actually runs.
struct DeferredBeta {
    gate: bool,
    beta: Coefficient,
    gran: Granularity,
    rng: ChaCha8Rng,
}

impl GradientFactor for DeferredBeta {
    fn factor(&mut self, shape: &[usize]) -> Tensor {
        let beta = sample_tensor(self.beta, self.gran, shape, &mut self.rng);
        gate_mix(self.gate, beta)
    }
}

/// ShakeDrop with an already drawn gate: draws `alpha` now and defers
/// `beta` to the backward pass (or draws both jointly in pool mode).
pub fn shakedrop_gated(
    tape: &mut Tape,
    branch: Var,
    gate: bool,
    spec: &CoefficientSpec,
    gran: Granularity,
    rng: &mut UnitRng,
) -> Result<Var> {
    let shape = tape.value(branch).shape().to_vec();
    let (forward, backward): (Tensor, Box<dyn GradientFactor>) = match &spec.pool {
        Some(pool) => {
            let pairs = draw_pool_pairs(pool, gran, &shape, &mut rng.alpha)?;
            (gate_mix(gate, pairs.alpha), Box::new(gate_mix(gate, pairs.beta)))
        }
        None => {
            let alpha = sample_tensor(spec.alpha, gran, &shape, &mut rng.alpha);
            let deferred = DeferredBeta {
                gate,
                beta: spec.beta,
                gran,
                rng: rng.spawn_backward(),
            };
            (gate_mix(gate, alpha), Box::new(deferred))
        }
    };
    tape.branch_scale(branch, &forward, backward)
}

/// ShakeDrop with every random quantity supplied by the caller.
pub fn shakedrop_frozen(
    tape: &mut Tape,
    branch: Var,
    gate: bool,
    alpha: &Tensor,
    beta: &Tensor,
) -> Result<Var> {
    let forward = gate_mix(gate, alpha.clone());
    tape.branch_scale(branch, &forward, Box::new(gate_mix(gate, beta.clone())))
}

/// `E[b + alpha - b*alpha] = p + (1 - p) E[alpha]`.
pub fn shakedrop_expectation(p: f64, spec: &CoefficientSpec) -> f64 {
    p + (1.0 - p) * spec.expected_alpha()
}

/// ShakeDrop at survival probability `p`.
pub fn shakedrop_with_probability(
    tape: &mut Tape,
    branch: Var,
    p: f64,
    spec: &CoefficientSpec,
    gran: Granularity,
    phase: Phase,
    rng: &mut UnitRng,
) -> Result<Var> {
    match phase {
        Phase::Train => {
            let gate = draw_gate(p, rng);
            shakedrop_gated(tape, branch, gate, spec, gran, rng)
        }
        Phase::Eval => Ok(tape.scale(branch, shakedrop_expectation(p, spec))),
    }
}

/// ShakeDrop on block `l` of a network governed by `schedule`.
#[allow(clippy::too_many_arguments)]
pub fn shakedrop_apply(
    tape: &mut Tape,
    branch: Var,
    l: usize,
    schedule: &DecaySchedule,
    spec: &CoefficientSpec,
    gran: Granularity,
    phase: Phase,
    rng: &mut UnitRng,
) -> Result<Var> {
    let p = schedule.survival(l)?;
    shakedrop_with_probability(tape, branch, p, spec, gran, phase, rng)
}

/// RandomDrop with a given gate: the same `b` scales forward and backward.
pub fn randomdrop_frozen(tape: &mut Tape, branch: Var, gate: bool) -> Result<Var> {
    let rank = tape.value(branch).shape().len();
    let b = Tensor::full(&vec![1; rank], if gate { 1.0 } else { 0.0 });
    tape.branch_scale(branch, &b, Box::new(b.clone()))
}

pub fn randomdrop_apply(
    tape: &mut Tape,
    branch: Var,
    l: usize,
    schedule: &DecaySchedule,
    phase: Phase,
    rng: &mut UnitRng,
) -> Result<Var> {
    let p = schedule.survival(l)?;
    match phase {
        Phase::Train => {
            let gate = draw_gate(p, rng);
            randomdrop_frozen(tape, branch, gate)
        }
        Phase::Eval => Ok(tape.scale(branch, p)),
    }
}

/// `alpha` forward, `beta` backward, no gate: ShakeDrop with `p = 0`.
pub fn single_branch_shake_apply(
    tape: &mut Tape,
    branch: Var,
    spec: &CoefficientSpec,
    gran: Granularity,
    phase: Phase,
    rng: &mut UnitRng,
) -> Result<Var> {
    shakedrop_with_probability(tape, branch, 0.0, spec, gran, phase, rng)
}

/// `x + alpha ⊙ f1 + (1 - alpha) ⊙ f2`, gradients `beta` / `1 - beta`.
#[allow(clippy::too_many_arguments)]
pub fn shake_shake_combine(
    tape: &mut Tape,
    x: Var,
    f1: Var,
    f2: Var,
    spec: &CoefficientSpec,
    gran: Granularity,
    phase: Phase,
    rng: &mut UnitRng,
) -> Result<Var> {
    let shape = tape.value(f1).shape().to_vec();
    match phase {
        Phase::Train => match &spec.pool {
            Some(pool) => {
                let pairs = draw_pool_pairs(pool, gran, &shape, &mut rng.alpha)?;
                tape.shake_shake(x, f1, f2, &pairs.alpha, Box::new(pairs.beta))
            }
            None => {
                let alpha = sample_tensor(spec.alpha, gran, &shape, &mut rng.alpha);
                let deferred = DeferredBeta {
                    gate: false,
                    beta: spec.beta,
                    gran,
                    rng: rng.spawn_backward(),
                };
                tape.shake_shake(x, f1, f2, &alpha, Box::new(deferred))
            }
        },
        Phase::Eval => {
            let mean = Tensor::full(&vec![1; shape.len()], spec.expected_alpha());
            tape.shake_shake(x, f1, f2, &mean, Box::new(mean.clone()))
        }
    }
}

pub fn shake_shake_frozen(
    tape: &mut Tape,
    x: Var,
    f1: Var,
    f2: Var,
    alpha: &Tensor,
    beta: &Tensor,
) -> Result<Var> {
    tape.shake_shake(x, f1, f2, alpha, Box::new(beta.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegularizerKind {
    None,
    RandomDrop,
    ShakeDrop,
    ShakeShake,
    SingleBranchShake,
}

impl RegularizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::RandomDrop => "random-drop",
            RegularizerKind::ShakeDrop => "shakedrop",
            RegularizerKind::ShakeShake => "shake-shake",
            RegularizerKind::SingleBranchShake => "single-branch-shake",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(RegularizerKind::None),
            "random-drop" => Ok(RegularizerKind::RandomDrop),
            "shakedrop" => Ok(RegularizerKind::ShakeDrop),
            "shake-shake" => Ok(RegularizerKind::ShakeShake),
            "single-branch-shake" => Ok(RegularizerKind::SingleBranchShake),
            other => Err(Error::Parse(format!("unknown regularizer {other:?}"))),
        }
    }
}

/// Caller-chosen values for one unit's random draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrozenDraw {
    pub gate: bool,
    pub alpha: f64,
    pub beta: f64,
}

impl FrozenDraw {
    pub fn new(gate: bool, alpha: f64, beta: f64) -> Self {
        Self { gate, alpha, beta }
    }

    /// Open gate with unit coefficients: every unit becomes the identity.
    pub fn identity() -> Self {
        Self::new(true, 1.0, 1.0)
    }
}

/// Where a unit's random quantities come from during training.
pub enum Draws<'a> {
    Random(&'a mut UnitRng),
    Frozen(FrozenDraw),
}

/// What a unit did on one call; `gate` is `None` for gate-free methods and
/// in the evaluation phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitOutcome {
    pub out: Var,
    pub gate: Option<bool>,
}

/// A regularizer as configured for a whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub coefficients: CoefficientSpec,
    pub p_last: f64,
    pub granularity: Granularity,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            coefficients: CoefficientSpec::fixed(1.0, 1.0),
            p_last: 1.0,
            granularity: Granularity::Batch,
        }
    }

    pub fn shakedrop(coefficients: CoefficientSpec, p_last: f64, granularity: Granularity) -> Self {
        Self {
            kind: RegularizerKind::ShakeDrop,
            coefficients,
            p_last,
            granularity,
        }
    }

    pub fn random_drop(p_last: f64) -> Self {
        Self {
            kind: RegularizerKind::RandomDrop,
            coefficients: CoefficientSpec::fixed(0.0, 0.0),
            p_last,
            granularity: Granularity::Batch,
        }
    }

    pub fn shake_shake(coefficients: CoefficientSpec, granularity: Granularity) -> Self {
        Self {
            kind: RegularizerKind::ShakeShake,
            coefficients,
            p_last: 1.0,
            granularity,
        }
    }

    pub fn single_branch_shake(coefficients: CoefficientSpec, granularity: Granularity) -> Self {
        Self {
            kind: RegularizerKind::SingleBranchShake,
            coefficients,
            p_last: 1.0,
            granularity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coefficients.validate()?;
        if !(0.0..=1.0).contains(&self.p_last) {
            return Err(Error::Invalid(format!(
                "p_L must lie in [0, 1], got {}",
                self.p_last
            )));
        }
        Ok(())
    }

    pub fn uses_decay(&self) -> bool {
        matches!(self.kind, RegularizerKind::RandomDrop | RegularizerKind::ShakeDrop)
    }

    /// The scalar the unit multiplies a branch by in the evaluation phase.
    pub fn eval_coefficient(&self, p: f64) -> f64 {
        match self.kind {
            RegularizerKind::None => 1.0,
            RegularizerKind::RandomDrop => p,
            RegularizerKind::ShakeDrop => shakedrop_expectation(p, &self.coefficients),
            RegularizerKind::SingleBranchShake | RegularizerKind::ShakeShake => {
                self.coefficients.expected_alpha()
            }
        }
    }

    /// Applies a single-branch unit (everything except Shake-Shake) to
    /// `branch` at survival probability `p`.
    pub fn perturb_branch(
        &self,
        tape: &mut Tape,
        branch: Var,
        p: f64,
        phase: Phase,
        draws: Draws<'_>,
    ) -> Result<UnitOutcome> {
        let plain = |out| Ok(UnitOutcome { out, gate: None });
        if self.kind == RegularizerKind::None {
            return plain(branch);
        }
        if self.kind == RegularizerKind::ShakeShake {
            return Err(Error::Invalid(
                "shake-shake combines two branches; it cannot wrap a single branch".into(),
            ));
        }
        if phase == Phase::Eval {
            return plain(tape.scale(branch, self.eval_coefficient(p)));
        }
        let spec = &self.coefficients;
        let gran = self.granularity;
        match (self.kind, draws) {
            (RegularizerKind::RandomDrop, Draws::Random(rng)) => {
                let gate = draw_gate(p, rng);
                let out = randomdrop_frozen(tape, branch, gate)?;
                Ok(UnitOutcome { out, gate: Some(gate) })
            }
            (RegularizerKind::RandomDrop, Draws::Frozen(f)) => {
                let out = randomdrop_frozen(tape, branch, f.gate)?;
                Ok(UnitOutcome { out, gate: Some(f.gate) })
            }
            (RegularizerKind::ShakeDrop, Draws::Random(rng)) => {
                let gate = draw_gate(p, rng);
                let out = shakedrop_gated(tape, branch, gate, spec, gran, rng)?;
                Ok(UnitOutcome { out, gate: Some(gate) })
            }
            (RegularizerKind::ShakeDrop, Draws::Frozen(f)) => {
                let out = frozen_scale(tape, branch, f.gate, f)?;
                Ok(UnitOutcome { out, gate: Some(f.gate) })
            }
            (RegularizerKind::SingleBranchShake, Draws::Random(rng)) => {
                plain(shakedrop_gated(tape, branch, false, spec, gran, rng)?)
            }
            (RegularizerKind::SingleBranchShake, Draws::Frozen(f)) => {
                plain(frozen_scale(tape, branch, false, f)?)
            }
            (RegularizerKind::None | RegularizerKind::ShakeShake, _) => unreachable!(),
        }
    }

    /// Shake-Shake combination `x + alpha f1 + (1 - alpha) f2`.
    pub fn combine_pair(
        &self,
        tape: &mut Tape,
        skip: Var,
        first: Var,
        second: Var,
        phase: Phase,
        draws: Draws<'_>,
    ) -> Result<Var> {
        if self.kind != RegularizerKind::ShakeShake {
            return Err(Error::Invalid(format!("{} is not a two-branch combiner", self.kind)));
        }
        match (phase, draws) {
            (Phase::Train, Draws::Frozen(f)) => {
                let rank = tape.value(first).shape().len();
                let ones = vec![1; rank];
                shake_shake_frozen(
                    tape,
                    skip,
                    first,
                    second,
                    &Tensor::full(&ones, f.alpha),
                    &Tensor::full(&ones, f.beta),
                )
            }
            (phase, Draws::Random(rng)) => shake_shake_combine(
                tape,
                skip,
                first,
                second,
                &self.coefficients,
                self.granularity,
                phase,
                rng,
            ),
            (Phase::Eval, Draws::Frozen(_)) => {
                let mut unused = UnitRng::from_seed(0);
                shake_shake_combine(
                    tape,
                    skip,
                    first,
                    second,
                    &self.coefficients,
                    self.granularity,
                    Phase::Eval,
                    &mut unused,
                )
            }
        }
    }
}

fn frozen_scale(tape: &mut Tape, branch: Var, gate: bool, f: FrozenDraw) -> Result<Var> {
    let rank = tape.value(branch).shape().len();
    let ones = vec![1; rank];
    shakedrop_frozen(
        tape,
        branch,
        gate,
        &Tensor::full(&ones, f.alpha),
        &Tensor::full(&ones, f.beta),
    )
}
