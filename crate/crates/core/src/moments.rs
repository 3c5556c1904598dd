//! Propagation of activation mean and variance through one dense layer.
//!
//! A unit in the lower layer has mean `μ` and variance `ν`. A neuron with
//! incoming weights `w` sees the pre-activation `x = Σ wᵢ zᵢ`, which is taken to be
//! Gaussian with mean `μω` and standard deviation `√(ντ)`, where `ω = Σ wᵢ` and
//! `τ = Σ wᵢ²`. The moment map `g(μ, ν) = (μ̃, ν̃)` gives the mean and variance of
//! `f(x)`.
//!
//! Three independent evaluations are provided: a closed form for SERLU, adaptive
//! quadrature for any activation, and Monte Carlo sampling with jackknife errors.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, ActivationSpec};
use crate::error::{Error, Result};
use crate::quadrature::{integrate_pieces, Tolerance};
use crate::special::{erfc, erfcx};

/// Mean and variance of a unit activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mu: f64,
    pub nu: f64,
}

impl MomentPair {
    pub fn new(mu: f64, nu: f64) -> Result<Self> {
        let p = MomentPair { mu, nu };
        p.validate()?;
        Ok(p)
    }

    /// The target fixed point `(0, 1)`.
    pub const FIXED_POINT: MomentPair = MomentPair { mu: 0.0, nu: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.nu.is_finite()) {
            return Err(Error::Domain(format!("moments must be finite, got ({}, {})", self.mu, self.nu)));
        }
        if self.nu <= 0.0 {
            return Err(Error::Domain(format!("variance must be positive, got {}", self.nu)));
        }
        Ok(())
    }

    /// Max-norm distance.
    pub fn distance(&self, other: &MomentPair) -> f64 {
        (self.mu - other.mu).abs().max((self.nu - other.nu).abs())
    }
}

/// Summary statistics of a neuron's incoming weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    /// `ω = Σ wᵢ`
    pub omega: f64,
    /// `τ = Σ wᵢ²`
    pub tau: f64,
}

impl WeightStats {
    pub fn new(omega: f64, tau: f64) -> Result<Self> {
        let w = WeightStats { omega, tau };
        w.validate()?;
        Ok(w)
    }

    /// `ω = 0`, `τ = 1`.
    pub const NORMALIZED: WeightStats = WeightStats { omega: 0.0, tau: 1.0 };

    pub fn from_weights(w: &[f64]) -> Result<Self> {
        Self::new(w.iter().sum(), w.iter().map(|v| v * v).sum())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.tau.is_finite()) {
            return Err(Error::Domain(format!("weight stats must be finite, got ({}, {})", self.omega, self.tau)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Domain(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Density of `N(mean, std²)` at `x`.
pub fn gauss_pdf(x: f64, mean: f64, std: f64) -> Result<f64> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Domain(format!("standard deviation must be positive, got {std}")));
    }
    let z = (x - mean) / std;
    Ok((-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt()))
}

fn check_inputs(p: &MomentPair, w: &WeightStats) -> Result<()> {
    p.validate()?;
    w.validate()
}

fn finite_output(mu: f64, nu: f64, what: &str) -> Result<MomentPair> {
    if !(mu.is_finite() && nu.is_finite()) {
        return Err(Error::Numeric(format!("{what} produced non-finite moments ({mu}, {nu})")));
    }
    if nu <= 0.0 {
        return Err(Error::Numeric(format!("{what} produced non-positive variance {nu}")));
    }
    Ok(MomentPair { mu, nu })
}

/// Closed-form SERLU moment map.
///
/// Every `exp(a²)·erfc(a)` product is evaluated as `erfcx(a)` so the terms stay
/// finite for large `ντ`; the remaining factors are transcribed term by term.
pub fn moment_map_serlu(p: &MomentPair, w: &WeightStats, spec: &ActivationSpec) -> Result<MomentPair> {
    if spec.kind != ActivationKind::Serlu {
        return Err(Error::Config(format!("closed-form moment map is only defined for serlu, got {}", spec.kind)));
    }
    spec.validate()?;
    check_inputs(p, w)?;
    let (alpha, lambda) = (spec.alpha, spec.lambda);
    let (mu, nu, omega, tau) = (p.mu, p.nu, w.omega, w.tau);

    let vt = nu * tau;
    let mw = mu * omega;
    let sd = vt.sqrt();
    let root2_sd = std::f64::consts::SQRT_2 * sd;
    // e^{-μ²ω²/(2ντ)}
    let damp = (-mw * mw / (2.0 * vt)).exp();
    let erfc_mid = erfc(mw / root2_sd);

    let a1 = (vt + mw) / root2_sd;
    let mu_out = lambda / (2.0 * PI.sqrt())
        * (damp * erfcx(a1) * PI.sqrt() * alpha * (vt + mw)
            + damp * root2_sd * (1.0 - alpha)
            + PI.sqrt() * mw * (2.0 - erfc_mid));

    let a2 = (2.0 * vt + mw) / root2_sd;
    let alpha2 = alpha * alpha;
    let second = 0.5
        * lambda
        * lambda
        * (damp * (2.0 / PI).sqrt() * sd * ((1.0 - alpha2) * mw - 2.0 * alpha2 * vt)
            + (vt + mw * mw) * (2.0 - erfc_mid)
            + alpha2 * damp * erfcx(a2) * (4.0 * vt * vt + mw * mw + nu * (tau + 4.0 * mu * tau * omega)));
    let nu_out = second - mu_out * mu_out;
    finite_output(mu_out, nu_out, "closed-form moment map")
}

/// Default relative tolerance for the quadrature moment map.
pub const QUADRATURE_REL_TOL: f64 = 1e-10;
/// Half-width of the integration window in standard deviations.
pub const QUADRATURE_SIGMAS: f64 = 12.0;

/// Moment map for any activation by adaptive quadrature.
pub fn moment_map_quadrature(spec: &ActivationSpec, p: &MomentPair, w: &WeightStats) -> Result<MomentPair> {
    moment_map_quadrature_with_tol(spec, p, w, QUADRATURE_REL_TOL)
}

pub fn moment_map_quadrature_with_tol(spec: &ActivationSpec, p: &MomentPair, w: &WeightStats, rel_tol: f64) -> Result<MomentPair> {
    spec.validate()?;
    moment_map_quadrature_fn(|x| spec.value(x), spec.kinks(), p, w, rel_tol)
}

/// Quadrature moment map for an arbitrary scalar function with the given kink locations.
///
/// `E[f(x)]` and `E[f(x)²]` are integrated over `μω ± 12√(ντ)`, split at every
/// kink inside the window. The second moment is computed first and fixes the
/// absolute accuracy scale of the first, which may be arbitrarily close to zero.
pub fn moment_map_quadrature_fn<F: Fn(f64) -> f64>(f: F, kinks: &[f64], p: &MomentPair, w: &WeightStats, rel_tol: f64) -> Result<MomentPair> {
    check_inputs(p, w)?;
    let mean = p.mu * w.omega;
    let sd = (p.nu * w.tau).sqrt();
    let lo = mean - QUADRATURE_SIGMAS * sd;
    let hi = mean + QUADRATURE_SIGMAS * sd;
    let norm = 1.0 / (sd * (2.0 * PI).sqrt());
    let density = |x: f64| {
        let z = (x - mean) / sd;
        (-0.5 * z * z).exp() * norm
    };

    let second = integrate_pieces(
        |x| {
            let v = f(x);
            v * v * density(x)
        },
        lo,
        hi,
        kinks,
        Tolerance::relative(rel_tol),
    )?
    .value;
    let first = integrate_pieces(
        |x| f(x) * density(x),
        lo,
        hi,
        kinks,
        Tolerance::relative(rel_tol).with_abs(rel_tol * second.sqrt()),
    )?
    .value;
    finite_output(first, second - first * first, "quadrature moment map")
}

/// The moment map for `spec`: closed form for SERLU, quadrature otherwise.
pub fn moment_map(spec: &ActivationSpec, p: &MomentPair, w: &WeightStats) -> Result<MomentPair> {
    match spec.kind {
        ActivationKind::Serlu => moment_map_serlu(p, w, spec),
        _ => moment_map_quadrature(spec, p, w),
    }
}

/// Monte Carlo estimate with jackknife standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloMoments {
    pub moments: MomentPair,
    pub se_mu: f64,
    pub se_nu: f64,
    pub n: u64,
}

pub const MONTE_CARLO_MIN_SAMPLES: u64 = 10_000;
const JACKKNIFE_GROUPS: u64 = 100;

/// Empirical mean and variance of `f(x)` over `n` Gaussian draws.
///
/// Standard errors come from a delete-one-group jackknife over 100 contiguous
/// groups of draws. The draws are a ChaCha8 stream keyed by `seed`.
pub fn moment_map_montecarlo(spec: &ActivationSpec, p: &MomentPair, w: &WeightStats, n: u64, seed: u64) -> Result<MonteCarloMoments> {
    spec.validate()?;
    check_inputs(p, w)?;
    if n < MONTE_CARLO_MIN_SAMPLES {
        return Err(Error::Domain(format!("monte carlo needs at least {MONTE_CARLO_MIN_SAMPLES} samples, got {n}")));
    }
    let mean = p.mu * w.omega;
    let sd = (p.nu * w.tau).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let groups = JACKKNIFE_GROUPS;
    let mut sums = Vec::with_capacity(groups as usize);
    for g in 0..groups {
        let count = (g + 1) * n / groups - g * n / groups;
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for _ in 0..count {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = spec.value(mean + sd * z);
            s1 += v;
            s2 += v * v;
        }
        sums.push((count as f64, s1, s2));
    }

    let stats = |count: f64, s1: f64, s2: f64| {
        let m = s1 / count;
        (m, (s2 - s1 * m) / (count - 1.0))
    };
    let total = sums.iter().fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2));
    let (mu_hat, nu_hat) = stats(total.0, total.1, total.2);

    let leave_out: Vec<(f64, f64)> = sums
        .iter()
        .map(|s| stats(total.0 - s.0, total.1 - s.1, total.2 - s.2))
        .collect();
    let g = groups as f64;
    let jack_se = |pick: fn(&(f64, f64)) -> f64| {
        let avg = leave_out.iter().map(pick).sum::<f64>() / g;
        ((g - 1.0) / g * leave_out.iter().map(|t| (pick(t) - avg).powi(2)).sum::<f64>()).sqrt()
    };
    let se_mu = jack_se(|t| t.0);
    let se_nu = jack_se(|t| t.1);

    Ok(MonteCarloMoments {
        moments: finite_output(mu_hat, nu_hat, "monte carlo moment map")?,
        se_mu,
        se_nu,
        n,
    })
}
