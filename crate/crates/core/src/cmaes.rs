//! (μ/μ_w, λ) CMA-ES with cumulative step-size adaptation and rank-one plus
//! rank-μ covariance updates, driven through an ask/tell interface that
//! maximizes rewards.
//!
//! Candidates are stored as steps `yᵢ = B·D·zᵢ` relative to the mean, so the
//! step size, covariance and evolution paths never depend on where the mean
//! lies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{eig_sym, MvnFactor, Rng, SymEigen, Tensor};

/// Tolerance of the symmetry invariant, relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// `4 + ⌊3 ln d⌋`.
pub fn recommended_population_size(d: usize) -> usize {
    4 + (3.0 * (d.max(1) as f64).ln()).floor() as usize
}

/// Strategy constants derived from `d` and `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
}

impl CmaParams {
    pub fn new(d: usize, lambda: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Contract("CMA-ES dimension must be at least 1".into()));
        }
        if lambda < 2 {
            return Err(Error::Contract(format!("population size {lambda} below 2")));
        }
        let n = d as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Ok(Self {
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopTrigger {
    Sigma,
    Plateau,
    MaxGenerations,
}

impl StopTrigger {
    pub fn name(self) -> &'static str {
        match self {
            StopTrigger::Sigma => "sigma",
            StopTrigger::Plateau => "plateau",
            StopTrigger::MaxGenerations => "max_generations",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopCriteria {
    pub sigma_stop: f64,
    pub plateau_window: usize,
    pub plateau_epsilon: f64,
    pub max_generations: usize,
    /// Generations before which only `max_generations` can fire.
    pub min_generations: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            sigma_stop: 0.01,
            plateau_window: 50,
            plateau_epsilon: 1e-3,
            max_generations: 1000,
            min_generations: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CmaState {
    dim: usize,
    mean: Vec<f64>,
    sigma: f64,
    cov: Tensor,
    p_sigma: Vec<f64>,
    p_c: Vec<f64>,
    generation: usize,
    evaluations: usize,
    params: CmaParams,
    eigen: SymEigen,
    factor: MvnFactor,
    rng: Rng,
    pending: Option<Vec<Vec<f64>>>,
}

impl CmaState {
    /// Starts at `mean0` with `C = I`; `lambda` defaults to
    /// [`recommended_population_size`].
    pub fn new(mean0: Vec<f64>, sigma0: f64, lambda: Option<usize>, rng: Rng) -> Result<Self> {
        let dim = mean0.len();
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(Error::Contract(format!("sigma0 must be positive, got {sigma0}")));
        }
        if mean0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial mean".into()));
        }
        let params = CmaParams::new(dim, lambda.unwrap_or_else(|| recommended_population_size(dim)))?;
        let cov = Tensor::eye(dim);
        let eigen = eig_sym(&cov)?;
        let factor = MvnFactor::new(&eigen)?;
        Ok(Self {
            dim,
            mean: mean0,
            sigma: sigma0,
            cov,
            p_sigma: vec![0.0; dim],
            p_c: vec![0.0; dim],
            generation: 0,
            evaluations: 0,
            params,
            eigen,
            factor,
            rng,
            pending: None,
        })
    }

    /// Replaces the covariance before the first generation.
    pub fn with_covariance(mut self, cov: Tensor) -> Result<Self> {
        if self.generation != 0 || self.pending.is_some() {
            return Err(Error::Protocol(
                "covariance can only be set before the first ask".into(),
            ));
        }
        if cov.shape() != [self.dim, self.dim] {
            return Err(Error::Dimension(format!(
                "covariance of shape {:?} for dimension {}",
                cov.shape(),
                self.dim
            )));
        }
        self.eigen = eig_sym(&cov)?;
        self.factor = MvnFactor::new(&self.eigen)?;
        self.cov = cov;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &Tensor {
        &self.cov
    }

    pub fn p_sigma(&self) -> &[f64] {
        &self.p_sigma
    }

    pub fn p_c(&self) -> &[f64] {
        &self.p_c
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn params(&self) -> &CmaParams {
        &self.params
    }

    pub fn lambda(&self) -> usize {
        self.params.lambda
    }

    pub fn condition_number(&self) -> f64 {
        self.eigen.condition_number()
    }

    /// `λ` candidates `μ + σ·yᵢ`; must be followed by [`CmaState::tell`].
    pub fn ask(&mut self) -> Result<Vec<Vec<f64>>> {
        if self.pending.is_some() {
            return Err(Error::Protocol("ask called twice without tell".into()));
        }
        let steps: Vec<Vec<f64>> = (0..self.params.lambda)
            .map(|_| self.factor.draw_step(&mut self.rng))
            .collect();
        let candidates = steps
            .iter()
            .map(|y| self.mean.iter().zip(y).map(|(m, y)| m + self.sigma * y).collect())
            .collect();
        self.pending = Some(steps);
        Ok(candidates)
    }

    /// Updates the distribution from rewards given in candidate order; higher is better.
    pub fn tell(&mut self, rewards: &[f64]) -> Result<()> {
        let Some(steps) = self.pending.as_ref() else {
            return Err(Error::Protocol("tell called without a pending ask".into()));
        };
        if rewards.len() != steps.len() {
            return Err(Error::Protocol(format!(
                "expected {} rewards, got {}",
                steps.len(),
                rewards.len()
            )));
        }
        if let Some(i) = rewards.iter().position(|r| r.is_nan()) {
            return Err(Error::Evaluation(format!("candidate {i} has a NaN reward")));
        }
        let steps = self.pending.take().expect("checked above");
        let mut order: Vec<usize> = (0..steps.len()).collect();
        order.sort_by(|&a, &b| rewards[b].partial_cmp(&rewards[a]).expect("no NaN"));

        let d = self.dim;
        let p = &self.params;
        let selected: Vec<&Vec<f64>> = order[..p.mu].iter().map(|&i| &steps[i]).collect();
        let mut y_w = vec![0.0; d];
        for (w, y) in p.weights.iter().zip(&selected) {
            for (acc, yi) in y_w.iter_mut().zip(y.iter()) {
                *acc += w * yi;
            }
        }
        for (m, y) in self.mean.iter_mut().zip(&y_w) {
            *m += self.sigma * y;
        }

        let cs = p.c_sigma;
        let ps_gain = (cs * (2.0 - cs) * p.mu_eff).sqrt();
        let white = self.factor.whiten(&y_w);
        for (ps, w) in self.p_sigma.iter_mut().zip(&white) {
            *ps = (1.0 - cs) * *ps + ps_gain * w;
        }
        let ps_norm = self.p_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        let decay = 1.0 - (1.0 - cs).powi(2 * (self.generation as i32 + 1));
        let h_sigma = ps_norm / decay.sqrt() / p.chi_n < 1.4 + 2.0 / (d as f64 + 1.0);
        let hs = if h_sigma { 1.0 } else { 0.0 };

        let cc = p.c_c;
        let pc_gain = (cc * (2.0 - cc) * p.mu_eff).sqrt();
        for (pc, y) in self.p_c.iter_mut().zip(&y_w) {
            *pc = (1.0 - cc) * *pc + hs * pc_gain * y;
        }

        let keep = 1.0 - p.c_1 - p.c_mu + (1.0 - hs) * p.c_1 * cc * (2.0 - cc);
        let c = self.cov.data_mut();
        for i in 0..d {
            for j in i..d {
                let mut rank_mu = 0.0;
                for (w, y) in p.weights.iter().zip(&selected) {
                    rank_mu += w * y[i] * y[j];
                }
                let v = keep * c[i * d + j] + p.c_1 * self.p_c[i] * self.p_c[j] + p.c_mu * rank_mu;
                c[i * d + j] = v;
                c[j * d + i] = v;
            }
        }

        self.sigma *= ((cs / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::Numeric(format!("step size became {}", self.sigma)));
        }
        self.eigen = eig_sym(&self.cov)?;
        self.factor = MvnFactor::new(&self.eigen)?;
        self.generation += 1;
        self.evaluations += p.lambda;
        Ok(())
    }

    /// Which stop trigger fires, given the best held-out reward of each
    /// generation so far.
    pub fn should_stop(&self, best_history: &[f64], criteria: &StopCriteria) -> Option<StopTrigger> {
        if self.generation >= criteria.max_generations {
            return Some(StopTrigger::MaxGenerations);
        }
        if self.generation == 0 || self.generation < criteria.min_generations {
            return None;
        }
        if self.sigma < criteria.sigma_stop {
            return Some(StopTrigger::Sigma);
        }
        let w = criteria.plateau_window;
        if w > 0 && best_history.len() >= w {
            let window = &best_history[best_history.len() - w..];
            let best = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best - window[0] < criteria.plateau_epsilon {
                return Some(StopTrigger::Plateau);
            }
        }
        None
    }

    /// Largest `|C − Cᵀ|` entry relative to the largest `|C|` entry.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let c = self.cov.data();
        let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                worst = worst.max((c[i * d + j] - c[j * d + i]).abs());
            }
        }
        worst / scale
    }

    pub fn check_invariants(&self) -> Result<()> {
        let asym = self.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::Numeric(format!("covariance asymmetry {asym:e}")));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Numeric(format!("step size {}", self.sigma)));
        }
        Ok(())
    }

    /// Perturbs one off-diagonal covariance entry; a fault-injection hook for self-tests.
    #[doc(hidden)]
    pub fn inject_asymmetry(&mut self, eps: f64) {
        if self.dim > 1 {
            self.cov.data_mut()[1] += eps;
        }
    }
}

/// `Σ xᵢ²`.
pub fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `Σ 100·(xᵢ₊₁ − xᵢ²)² + (1 − xᵢ)²`.
pub fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub best: f64,
    pub evaluations: usize,
    pub generations: usize,
    pub reached: bool,
    /// Best-so-far reward after every generation.
    pub best_history: Vec<f64>,
}

/// Maximizes `reward` from `x0` until the best reward exceeds `target` or
/// the evaluation budget is spent.
pub fn maximize(
    reward: impl Fn(&[f64]) -> f64,
    x0: Vec<f64>,
    sigma0: f64,
    seed: u64,
    max_evaluations: usize,
    target: f64,
) -> Result<RunOutcome> {
    let mut cma = CmaState::new(x0, sigma0, None, Rng::new(seed, crate::numerics::rng::stream::CMA))?;
    let mut best = f64::NEG_INFINITY;
    let mut best_history = Vec::new();
    while cma.evaluations() + cma.lambda() <= max_evaluations && best <= target {
        let xs = cma.ask()?;
        let r: Vec<f64> = xs.iter().map(|x| reward(x)).collect();
        best = r.iter().copied().fold(best, f64::max);
        best_history.push(best);
        cma.tell(&r)?;
    }
    Ok(RunOutcome {
        best,
        evaluations: cma.evaluations(),
        generations: cma.generation(),
        reached: best > target,
        best_history,
    })
}
