//! KL-divergence objectives for logit distillation.
//!
//! All objectives take raw teacher and student logits, soften both with the
//! same temperature, and return the loss scaled by `tau^2` together with its
//! gradient with respect to the student logits. The teacher is a constant.
//!
//! The stage-mixed objective is
//!
//! ```text
//! L(t) = a(t)   * [g1 KL(T||S) + (1-g1) KL(T||S_l)]
//!      + (1-a(t)) * [g2 KL(S||T) + (1-g2) KL(S||T_l)]
//!
//! S_l = l T + (1-l) S        T_l = (1-l) T + l S
//! a(t) = 1 if t < tau_step else 0
//! ```
//!
//! and the temperature follows `tau(s) = T_b - (T_b - T_f) * s / L_max`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, log_softmax_unchecked};

/// A probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("distribution must be non-empty"));
        }
        if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "probability {} at index {i} is not a finite non-negative number",
                p[i]
            )));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(p))
    }

    pub(crate) fn from_raw(p: Vec<f64>) -> Self {
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `sum_i p_i ln(p_i / q_i)` in nats.
///
/// Terms with `p_i = 0` contribute 0; `p_i > 0` with `q_i = 0` yields
/// `f64::INFINITY`.
pub fn kl(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distribution sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// `w * a + (1 - w) * b`.
pub fn mix(a: &ProbDist, b: &ProbDist, w: f64) -> Result<ProbDist> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("mixture weight {w} outside [0,1]")));
    }
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "distribution sizes differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let out = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| w * x + (1.0 - w) * y)
        .collect();
    Ok(ProbDist(out))
}

/// Binary stage switch: 1 before `tau_step`, 0 from then on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageWeight {
    pub tau_step: u64,
}

impl StageWeight {
    pub fn new(tau_step: u64) -> Self {
        Self { tau_step }
    }

    pub fn alpha(&self, t: u64) -> f64 {
        if t < self.tau_step {
            1.0
        } else {
            0.0
        }
    }
}

pub fn alpha(stage: &StageWeight, t: u64) -> f64 {
    stage.alpha(t)
}

/// Linear temperature decay from `initial` to `final_temp` over `max_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    initial: f64,
    final_temp: f64,
    max_steps: u64,
}

impl TemperatureSchedule {
    pub fn new(initial: f64, final_temp: f64, max_steps: u64) -> Result<Self> {
        if !(final_temp > 0.0) || !initial.is_finite() || !final_temp.is_finite() {
            return Err(Error::invalid(format!(
                "temperatures must be finite and positive, got T_b={initial}, T_f={final_temp}"
            )));
        }
        if initial < final_temp {
            return Err(Error::invalid(format!(
                "initial temperature {initial} is below final temperature {final_temp}"
            )));
        }
        if max_steps < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        Ok(Self { initial, final_temp, max_steps })
    }

    /// A schedule that never changes.
    pub fn constant(tau: f64, max_steps: u64) -> Result<Self> {
        Self::new(tau, tau, max_steps)
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    pub fn final_temp(&self) -> f64 {
        self.final_temp
    }

    pub fn max_steps(&self) -> u64 {
        self.max_steps
    }

    /// Same endpoints stretched over a different horizon.
    pub fn with_max_steps(&self, max_steps: u64) -> Result<Self> {
        Self::new(self.initial, self.final_temp, max_steps)
    }

    pub fn temperature(&self, s: u64) -> Result<f64> {
        if s > self.max_steps {
            return Err(Error::invalid(format!(
                "step {s} beyond schedule length {}",
                self.max_steps
            )));
        }
        if s == self.max_steps {
            // pinned so the end point is T_f even when T_b - T_f rounds
            return Ok(self.final_temp);
        }
        let frac = s as f64 / self.max_steps as f64;
        Ok(self.initial - (self.initial - self.final_temp) * frac)
    }

    /// Temperature at `s`, holding the final value past the horizon.
    pub fn temperature_clamped(&self, s: u64) -> f64 {
        self.temperature(s.min(self.max_steps))
            .expect("clamped step is always within the schedule")
    }
}

pub fn temperature(sched: &TemperatureSchedule, s: u64) -> Result<f64> {
    sched.temperature(s)
}

/// The distillation objectives that can be selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossVariant {
    ForwardKl,
    BackwardKl,
    FixedParamBiKl,
    BiKl,
    SteppedBiKl,
    StageMixedSkewed,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::ForwardKl,
        LossVariant::BackwardKl,
        LossVariant::FixedParamBiKl,
        LossVariant::BiKl,
        LossVariant::SteppedBiKl,
        LossVariant::StageMixedSkewed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::ForwardKl => "forward-kl",
            LossVariant::BackwardKl => "backward-kl",
            LossVariant::FixedParamBiKl => "fixed-param-bikl",
            LossVariant::BiKl => "bikl",
            LossVariant::SteppedBiKl => "stepped-bikl",
            LossVariant::StageMixedSkewed => "stage-mixed-skewed",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LossVariant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown loss variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Hyperparameters of every distillation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    variant: LossVariant,
    gamma1: f64,
    gamma2: f64,
    lambda: f64,
    lambda_fix: f64,
    stage: StageWeight,
    tau_step_auto: bool,
    temp: TemperatureSchedule,
    total_steps: u64,
}

impl DistillConfig {
    /// Defaults for a run of `total_steps` optimizer steps.
    pub fn builder(total_steps: u64) -> DistillConfigBuilder {
        DistillConfigBuilder {
            variant: LossVariant::StageMixedSkewed,
            gamma1: 0.5,
            gamma2: 0.5,
            lambda: 0.1,
            lambda_fix: 0.5,
            tau_step: None,
            t_begin: 2.0,
            t_final: 1.0,
            total_steps,
        }
    }

    pub fn variant(&self) -> LossVariant {
        self.variant
    }
    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }
    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn lambda_fix(&self) -> f64 {
        self.lambda_fix
    }
    pub fn stage(&self) -> StageWeight {
        self.stage
    }
    pub fn temp(&self) -> &TemperatureSchedule {
        &self.temp
    }
    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn with_variant(&self, variant: LossVariant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// Rescales the run length and the temperature horizon. An explicit
    /// `tau_step` is kept; a defaulted one follows the new length.
    pub fn with_total_steps(&self, total_steps: u64) -> Result<Self> {
        if total_steps < 1 {
            return Err(Error::invalid("total_steps must be at least 1"));
        }
        let stage = if self.tau_step_auto {
            StageWeight::new(total_steps.div_ceil(2))
        } else {
            self.stage
        };
        Ok(Self {
            total_steps,
            stage,
            temp: self.temp.with_max_steps(total_steps)?,
            ..self.clone()
        })
    }

    /// Temperature used at training step `t`.
    pub fn tau_at(&self, t: u64) -> f64 {
        self.temp.temperature_clamped(t)
    }

    /// Forward-direction weight of the stepped objective, `1 - t / total_steps`.
    pub fn stepped_lambda(&self, t: u64) -> f64 {
        (1.0 - t as f64 / self.total_steps as f64).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct DistillConfigBuilder {
    variant: LossVariant,
    gamma1: f64,
    gamma2: f64,
    lambda: f64,
    lambda_fix: f64,
    tau_step: Option<u64>,
    t_begin: f64,
    t_final: f64,
    total_steps: u64,
}

impl DistillConfigBuilder {
    pub fn variant(mut self, v: LossVariant) -> Self {
        self.variant = v;
        self
    }
    pub fn gamma1(mut self, v: f64) -> Self {
        self.gamma1 = v;
        self
    }
    pub fn gamma2(mut self, v: f64) -> Self {
        self.gamma2 = v;
        self
    }
    pub fn lambda(mut self, v: f64) -> Self {
        self.lambda = v;
        self
    }
    pub fn lambda_fix(mut self, v: f64) -> Self {
        self.lambda_fix = v;
        self
    }
    /// Stage threshold; defaults to `ceil(total_steps / 2)`.
    pub fn tau_step(mut self, v: u64) -> Self {
        self.tau_step = Some(v);
        self
    }
    pub fn temperatures(mut self, begin: f64, final_temp: f64) -> Self {
        self.t_begin = begin;
        self.t_final = final_temp;
        self
    }

    pub fn build(self) -> Result<DistillConfig> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [0,1]")))
            }
        };
        unit("gamma1", self.gamma1)?;
        unit("gamma2", self.gamma2)?;
        unit("lambda_fix", self.lambda_fix)?;
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("lambda = {} outside (0,1]", self.lambda)));
        }
        if self.total_steps < 1 {
            return Err(Error::invalid("total_steps must be at least 1"));
        }
        let tau_step = self.tau_step.unwrap_or(self.total_steps.div_ceil(2));
        Ok(DistillConfig {
            variant: self.variant,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            lambda: self.lambda,
            lambda_fix: self.lambda_fix,
            stage: StageWeight::new(tau_step),
            tau_step_auto: self.tau_step.is_none(),
            temp: TemperatureSchedule::new(self.t_begin, self.t_final, self.total_steps)?,
            total_steps: self.total_steps,
        })
    }
}

/// Loss value and its gradient with respect to the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// One half of the stage-mixed objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bracket {
    /// `g1 KL(T||S) + (1-g1) KL(T||S_l)`, active while `t < tau_step`.
    Forward,
    /// `g2 KL(S||T) + (1-g2) KL(S||T_l)`, active from `tau_step` on.
    Reverse,
}

/// Teacher and student distributions softened with a shared temperature,
/// kept in both log and linear form.
struct Softened {
    log_t: Vec<f64>,
    t: Vec<f64>,
    log_s: Vec<f64>,
    s: Vec<f64>,
}

impl Softened {
    fn new(teacher_logits: &[f64], student_logits: &[f64], tau: f64) -> Result<Self> {
        if teacher_logits.len() != student_logits.len() {
            return Err(Error::invalid(format!(
                "teacher has {} logits but student has {}",
                teacher_logits.len(),
                student_logits.len()
            )));
        }
        if teacher_logits.is_empty() {
            return Err(Error::invalid("logits must be non-empty"));
        }
        ensure_finite(teacher_logits, "teacher logits")?;
        ensure_finite(student_logits, "student logits")?;
        let scaled = |z: &[f64]| z.iter().map(|v| v / tau).collect::<Vec<_>>();
        let log_t = log_softmax_unchecked(&scaled(teacher_logits));
        let log_s = log_softmax_unchecked(&scaled(student_logits));
        let t = log_t.iter().map(|v| v.exp()).collect();
        let s = log_s.iter().map(|v| v.exp()).collect();
        Ok(Self { log_t, t, log_s, s })
    }

    /// Pulls `dF/dS` back through the softmax: `S * (g - <S, g>)`.
    fn through_softmax(&self, g: &[f64]) -> Vec<f64> {
        let mean: f64 = self.s.iter().zip(g).map(|(s, g)| s * g).sum();
        self.s.iter().zip(g).map(|(s, g)| s * (g - mean)).collect()
    }

    /// `KL(T||S)`; gradient `S - T`.
    fn forward_kl(&self) -> (f64, Vec<f64>) {
        let value = weighted_log_ratio(&self.t, &self.log_t, &self.log_s);
        let grad = self.s.iter().zip(&self.t).map(|(s, t)| s - t).collect();
        (value, grad)
    }

    /// `KL(S||T)`; gradient `S * (log S - log T - KL)`.
    fn reverse_kl(&self) -> (f64, Vec<f64>) {
        let value = weighted_log_ratio(&self.s, &self.log_s, &self.log_t);
        let grad = (0..self.s.len())
            .map(|i| self.s[i] * (self.log_s[i] - self.log_t[i] - value))
            .collect();
        (value, grad)
    }

    /// `KL(T||S_l)` with `S_l = l T + (1-l) S`.
    fn forward_skew(&self, lambda: f64) -> (f64, Vec<f64>) {
        let log_m = log_mixture(&self.log_t, &self.log_s, lambda);
        let value = weighted_log_ratio(&self.t, &self.log_t, &log_m);
        let g: Vec<f64> = (0..self.t.len())
            .map(|i| {
                if self.t[i] == 0.0 {
                    0.0
                } else {
                    -(1.0 - lambda) * (self.log_t[i] - log_m[i]).exp()
                }
            })
            .collect();
        (value, self.through_softmax(&g))
    }

    /// `KL(S||T_l)` with `T_l = (1-l) T + l S`.
    fn reverse_skew(&self, lambda: f64) -> (f64, Vec<f64>) {
        let log_n = log_mixture(&self.log_s, &self.log_t, lambda);
        let value = weighted_log_ratio(&self.s, &self.log_s, &log_n);
        let g: Vec<f64> = (0..self.s.len())
            .map(|i| {
                let ratio = (self.log_s[i] - log_n[i]).exp();
                self.log_s[i] - log_n[i] - lambda * ratio
            })
            .collect();
        (value, self.through_softmax(&g))
    }
}

/// `sum_i p_i (log_p_i - log_q_i)`, skipping zero-mass terms.
fn weighted_log_ratio(p: &[f64], log_p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_p.iter().zip(log_q))
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, (lp, lq))| p * (lp - lq))
        .sum()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log(w * exp(log_a) + (1 - w) * exp(log_b))`, elementwise.
fn log_mixture(log_a: &[f64], log_b: &[f64], w: f64) -> Vec<f64> {
    let (lw, lv) = (w.ln(), (1.0 - w).ln());
    log_a
        .iter()
        .zip(log_b)
        .map(|(a, b)| log_add_exp(lw + a, lv + b))
        .collect()
}

#[derive(Clone, Copy)]
enum Term {
    Forward,
    Reverse,
    ForwardSkew,
    ReverseSkew,
}

/// Evaluates `tau^2 * sum_k w_k F_k` and its logit gradient. Zero-weight
/// terms are never evaluated, so they contribute exactly nothing.
fn combine(
    teacher_logits: &[f64],
    student_logits: &[f64],
    tau: f64,
    lambda: f64,
    terms: &[(f64, Term)],
) -> Result<LossOutput> {
    let soft = Softened::new(teacher_logits, student_logits, tau)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student_logits.len()];
    for &(weight, term) in terms {
        if weight == 0.0 {
            continue;
        }
        let (value, g) = match term {
            Term::Forward => soft.forward_kl(),
            Term::Reverse => soft.reverse_kl(),
            Term::ForwardSkew => soft.forward_skew(lambda),
            Term::ReverseSkew => soft.reverse_skew(lambda),
        };
        if !value.is_finite() {
            return Err(Error::DegenerateMixture(format!(
                "divergence term is {value} at lambda={lambda}"
            )));
        }
        loss += weight * value;
        grad.iter_mut().zip(&g).for_each(|(acc, gi)| *acc += weight * gi);
    }
    // loss carries tau^2; d/dz_student = tau^2 * (1/tau) * d/d(z/tau)
    grad.iter_mut().for_each(|v| *v *= tau);
    Ok(LossOutput { loss: loss * tau * tau, grad })
}

/// One bracket of the stage-mixed objective at the temperature for step `t`,
/// regardless of which stage `t` falls into.
pub fn bracket_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    cfg: &DistillConfig,
    t: u64,
    bracket: Bracket,
) -> Result<LossOutput> {
    let tau = cfg.tau_at(t);
    let terms = match bracket {
        Bracket::Forward => [(cfg.gamma1, Term::Forward), (1.0 - cfg.gamma1, Term::ForwardSkew)],
        Bracket::Reverse => [(cfg.gamma2, Term::Reverse), (1.0 - cfg.gamma2, Term::ReverseSkew)],
    };
    combine(teacher_logits, student_logits, tau, cfg.lambda, &terms)
}

/// Stage-mixed bidirectional skewed KL at training step `t`.
pub fn stage_mixed_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    cfg: &DistillConfig,
    t: u64,
) -> Result<LossOutput> {
    if cfg.variant != LossVariant::StageMixedSkewed {
        return Err(Error::invalid(format!(
            "stage_mixed_loss called with variant {}",
            cfg.variant
        )));
    }
    stage_mixed_unchecked(teacher_logits, student_logits, cfg, t)
}

fn stage_mixed_unchecked(
    teacher_logits: &[f64],
    student_logits: &[f64],
    cfg: &DistillConfig,
    t: u64,
) -> Result<LossOutput> {
    // alpha is 0 or 1, so exactly one bracket is evaluated
    let bracket = if cfg.stage.alpha(t) == 1.0 {
        Bracket::Forward
    } else {
        Bracket::Reverse
    };
    bracket_loss(teacher_logits, student_logits, cfg, t, bracket)
}

/// The objective selected by `cfg.variant()` at step `t`.
pub fn variant_loss(
    teacher_logits: &[f64],
    student_logits: &[f64],
    cfg: &DistillConfig,
    t: u64,
) -> Result<LossOutput> {
    let tau = cfg.tau_at(t);
    let run = |terms: &[(f64, Term)]| combine(teacher_logits, student_logits, tau, cfg.lambda, terms);
    match cfg.variant {
        LossVariant::ForwardKl => run(&[(1.0, Term::Forward)]),
        LossVariant::BackwardKl => run(&[(1.0, Term::Reverse)]),
        LossVariant::FixedParamBiKl => run(&[(cfg.lambda_fix, Term::Forward), (cfg.lambda_fix, Term::Reverse)]),
        LossVariant::BiKl => run(&[(1.0, Term::Forward), (1.0, Term::Reverse)]),
        LossVariant::SteppedBiKl => {
            let w = cfg.stepped_lambda(t);
            run(&[(w, Term::Forward), (1.0 - w, Term::Reverse)])
        }
        LossVariant::StageMixedSkewed => stage_mixed_unchecked(teacher_logits, student_logits, cfg, t),
    }
}
