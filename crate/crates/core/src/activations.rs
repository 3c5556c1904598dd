//! Activation functions and shift-dropout.
//!
//! Six activations are supported: SERLU, SELU, ELU, Swish, Leaky ReLU and ReLU.
//! Each exposes a value and an exact first derivative. At the kink `x = 0` the
//! derivative is the right-hand (positive branch) value.
//!
//! Shift-dropout replaces a dropped activation with a shift target `f_min`
//! instead of zero and then applies the affine correction
//! `ẑ = (z̃ − (1 − q)·f_min) / q`, which keeps the activation mean unchanged.
//! With `f_min = 0` it is ordinary inverted dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SERLU scale of the negative branch, as produced by [`crate::analysis::solve_serlu_params`]
/// for the fixed point `(μ, ν) = (0, 1)` with `(ω, τ) = (0, 1)`. Reference value 2.90427.
pub const SERLU_ALPHA: f64 = 2.904_271_233_329_692;
/// SERLU global scale. Reference value 1.07862.
pub const SERLU_LAMBDA: f64 = 1.078_618_283_577_226_7;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

pub const ELU_ALPHA: f64 = 1.0;
pub const SWISH_BETA: f64 = 1.0;
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Serlu,
    Selu,
    Elu,
    Swish,
    LeakyRelu,
    Relu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 6] = [
        ActivationKind::Serlu,
        ActivationKind::Selu,
        ActivationKind::Elu,
        ActivationKind::Swish,
        ActivationKind::LeakyRelu,
        ActivationKind::Relu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Serlu => "serlu",
            ActivationKind::Selu => "selu",
            ActivationKind::Elu => "elu",
            ActivationKind::Swish => "swish",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Relu => "relu",
        }
    }
}

impl std::fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "serlu" => Ok(ActivationKind::Serlu),
            "selu" => Ok(ActivationKind::Selu),
            "elu" => Ok(ActivationKind::Elu),
            "swish" => Ok(ActivationKind::Swish),
            "leaky_relu" | "leakyrelu" | "lrelu" => Ok(ActivationKind::LeakyRelu),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// An activation together with its shape parameters.
///
/// Only the fields relevant to `kind` are read: `alpha`/`lambda` for SERLU, SELU
/// and ELU (`lambda` is 1 for ELU), `beta` for Swish, `leak` for Leaky ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub leak: f64,
}

impl ActivationSpec {
    /// The default parameterization for `kind`.
    pub fn new(kind: ActivationKind) -> Self {
        let (alpha, lambda) = match kind {
            ActivationKind::Serlu => (SERLU_ALPHA, SERLU_LAMBDA),
            ActivationKind::Selu => (SELU_ALPHA, SELU_LAMBDA),
            ActivationKind::Elu => (ELU_ALPHA, 1.0),
            _ => (1.0, 1.0),
        };
        ActivationSpec {
            kind,
            alpha,
            lambda,
            beta: SWISH_BETA,
            leak: LEAKY_RELU_SLOPE,
        }
    }

    pub fn serlu() -> Self {
        Self::new(ActivationKind::Serlu)
    }

    /// SERLU with explicit constants.
    pub fn serlu_with(alpha: f64, lambda: f64) -> Self {
        ActivationSpec {
            alpha,
            lambda,
            ..Self::serlu()
        }
    }

    pub fn selu() -> Self {
        Self::new(ActivationKind::Selu)
    }

    pub fn selu_with(alpha: f64, lambda: f64) -> Self {
        ActivationSpec {
            alpha,
            lambda,
            ..Self::selu()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Error::Config(format!("{} requires {what} > 0, got {v}", self.kind));
        match self.kind {
            ActivationKind::Serlu | ActivationKind::Selu => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(bad("alpha", self.alpha));
                }
                if !(self.lambda > 0.0 && self.lambda.is_finite()) {
                    return Err(bad("lambda", self.lambda));
                }
            }
            ActivationKind::Elu => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(bad("alpha", self.alpha));
                }
            }
            ActivationKind::Swish => {
                if !self.beta.is_finite() {
                    return Err(Error::Config(format!("swish beta must be finite, got {}", self.beta)));
                }
            }
            ActivationKind::LeakyRelu => {
                if !self.leak.is_finite() {
                    return Err(Error::Config(format!("leak must be finite, got {}", self.leak)));
                }
            }
            ActivationKind::Relu => {}
        }
        Ok(())
    }

    /// Evaluate the activation. Unchecked hot-path variant of [`activate`].
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Serlu => {
                if x >= 0.0 {
                    self.lambda * x
                } else {
                    self.lambda * self.alpha * x * x.exp()
                }
            }
            ActivationKind::Selu => {
                if x >= 0.0 {
                    self.lambda * x
                } else {
                    self.lambda * self.alpha * x.exp_m1()
                }
            }
            ActivationKind::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    self.alpha * x.exp_m1()
                }
            }
            ActivationKind::Swish => x * sigmoid(self.beta * x),
            ActivationKind::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    self.leak * x
                }
            }
            ActivationKind::Relu => x.max(0.0),
        }
    }

    /// First derivative; right-hand value at `x = 0`. Unchecked variant of [`activate_grad`].
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Serlu => {
                if x >= 0.0 {
                    self.lambda
                } else {
                    self.lambda * self.alpha * x.exp() * (x + 1.0)
                }
            }
            ActivationKind::Selu => {
                if x >= 0.0 {
                    self.lambda
                } else {
                    self.lambda * self.alpha * x.exp()
                }
            }
            ActivationKind::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    self.alpha * x.exp()
                }
            }
            ActivationKind::Swish => {
                let s = sigmoid(self.beta * x);
                s + self.beta * x * s * (1.0 - s)
            }
            ActivationKind::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    self.leak
                }
            }
            ActivationKind::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Global minimum of the activation when it is attained and used as the
    /// shift-dropout target: `−λαe⁻¹` for SERLU, `0` for ReLU.
    pub fn global_min(&self) -> Option<f64> {
        match self.kind {
            ActivationKind::Serlu => Some(serlu_f_min(self.alpha, self.lambda)),
            ActivationKind::Relu => Some(0.0),
            _ => None,
        }
    }

    /// Shift target used by the network trainer: the global minimum for SERLU,
    /// zero (plain dropout) for every other kind.
    pub fn dropout_shift(&self) -> f64 {
        match self.kind {
            ActivationKind::Serlu => serlu_f_min(self.alpha, self.lambda),
            _ => 0.0,
        }
    }

    /// Locations where the function is not smooth.
    pub(crate) fn kinks(&self) -> &'static [f64] {
        match self.kind {
            ActivationKind::Swish => &[],
            _ => &[0.0],
        }
    }
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self::serlu()
    }
}

/// `−λ·α·e⁻¹`, the value of SERLU at `x = −1`.
pub fn serlu_f_min(alpha: f64, lambda: f64) -> f64 {
    -lambda * alpha * (-1.0f64).exp()
}

/// Logistic sigmoid, split on sign so `exp` never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("activation input must be finite, got {x}")))
    }
}

/// `f(x)` for the given activation.
pub fn activate(spec: &ActivationSpec, x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(spec.value(x))
}

/// `f'(x)` for the given activation, right-hand value at the kink.
pub fn activate_grad(spec: &ActivationSpec, x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(spec.derivative(x))
}

/// Shift-dropout parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// Keep probability in `(0, 1]`.
    pub q: f64,
    /// Value a dropped unit is set to before the affine correction.
    pub f_min: f64,
    pub seed: u64,
}

impl DropoutConfig {
    pub fn new(q: f64, f_min: f64, seed: u64) -> Result<Self> {
        let cfg = DropoutConfig { q, f_min, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shift-dropout tuned to `spec`: SERLU shifts to its minimum, others shift to 0.
    pub fn for_activation(spec: &ActivationSpec, q: f64, seed: u64) -> Result<Self> {
        Self::new(q, spec.dropout_shift(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("dropout keep probability must lie in (0, 1], got {}", self.q)));
        }
        if !self.f_min.is_finite() {
            return Err(Error::Config(format!("dropout f_min must be finite, got {}", self.f_min)));
        }
        Ok(())
    }

    /// `ẑ` for one element given its keep decision.
    #[inline]
    pub fn apply(&self, z: f64, keep: bool) -> f64 {
        let shifted = if keep { z } else { self.f_min };
        (shifted - (1.0 - self.q) * self.f_min) / self.q
    }
}

/// Stateful shift-dropout layer owning its random stream.
///
/// The stream is ChaCha8 keyed by `cfg.seed` with a caller-chosen stream id, so
/// layers seeded from one run seed never share draws.
#[derive(Debug, Clone)]
pub struct ShiftDropout {
    cfg: DropoutConfig,
    rng: ChaCha8Rng,
}

impl ShiftDropout {
    pub fn new(cfg: DropoutConfig) -> Result<Self> {
        Self::with_stream(cfg, 0)
    }

    pub fn with_stream(cfg: DropoutConfig, stream: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        Ok(ShiftDropout { cfg, rng })
    }

    pub fn config(&self) -> &DropoutConfig {
        &self.cfg
    }

    /// Draw `n` keep decisions (each true with probability `q`).
    pub fn sample_mask(&mut self, n: usize) -> Vec<bool> {
        let q = self.cfg.q;
        (0..n).map(|_| self.rng.random::<f64>() < q).collect()
    }

    /// Apply in place. Inference mode leaves `z` untouched and returns an all-true mask.
    pub fn forward_in_place(&mut self, z: &mut [f64], training: bool) -> Vec<bool> {
        if !training {
            return vec![true; z.len()];
        }
        let mask = self.sample_mask(z.len());
        apply_mask(z, &mask, &self.cfg);
        mask
    }
}

/// Apply a frozen mask in place.
pub fn apply_mask(z: &mut [f64], mask: &[bool], cfg: &DropoutConfig) {
    debug_assert_eq!(z.len(), mask.len());
    for (v, &keep) in z.iter_mut().zip(mask) {
        *v = cfg.apply(*v, keep);
    }
}

/// One-shot shift-dropout with a fresh stream from `cfg.seed`.
pub fn shift_dropout(z: &[f64], cfg: &DropoutConfig, training: bool) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut layer = ShiftDropout::new(*cfg)?;
    let mut out = z.to_vec();
    let mask = layer.forward_in_place(&mut out, training);
    Ok((out, mask))
}

/// Backward pass of shift-dropout: `upstream · d / q`.
pub fn shift_dropout_grad(upstream: &[f64], mask: &[bool], cfg: &DropoutConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if upstream.len() != mask.len() {
        return Err(Error::shape(format!("mask of length {}", mask.len()), format!("upstream of length {}", upstream.len())));
    }
    Ok(upstream
        .iter()
        .zip(mask)
        .map(|(&g, &keep)| if keep { g / cfg.q } else { 0.0 })
        .collect())
}

/// Outcome of [`dropout_mean_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutCheckReport {
    pub q: f64,
    pub f_min: f64,
    pub n: u64,
    pub seed: u64,
    pub input_mean: f64,
    pub output_mean: f64,
    /// Mean of the paired differences `ẑ − z`.
    pub mean_shift: f64,
    pub standard_error: f64,
    pub output_variance: f64,
    /// `q·E[(z − (1−q)f)²]/q² + (1−q)f² − μ²` evaluated on the sample moments of `z`.
    pub predicted_output_variance: f64,
    /// Largest gap to plain inverted dropout `keep·z/q`; only reported when `f_min = 0`.
    pub inverted_max_abs_diff: Option<f64>,
    pub passes: bool,
}

/// Monte Carlo check that shift-dropout preserves the mean.
///
/// Inputs are SERLU activations of standard normal draws (mean 0, variance 1).
/// Passes when the mean shift is within three standard errors of zero.
pub fn dropout_mean_check(q: f64, f_min: f64, n: u64, seed: u64) -> Result<DropoutCheckReport> {
    use rand_distr::StandardNormal;
    let cfg = DropoutConfig::new(q, f_min, seed)?;
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 draws, got {n}")));
    }
    let spec = ActivationSpec::serlu();
    let mut input_rng = ChaCha8Rng::seed_from_u64(seed);
    input_rng.set_stream(1);
    let mut layer = ShiftDropout::new(cfg)?;
    let (mut sz, mut szz, mut so, mut soo, mut sd, mut sdd) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut inverted_gap: f64 = 0.0;
    let chunk = 1 << 16;
    let mut left = n;
    while left > 0 {
        let m = left.min(chunk) as usize;
        left -= m as u64;
        let z: Vec<f64> = (0..m)
            .map(|_| spec.value(input_rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mask = layer.sample_mask(m);
        for (&zi, &keep) in z.iter().zip(&mask) {
            let o = cfg.apply(zi, keep);
            let d = o - zi;
            sz += zi;
            szz += zi * zi;
            so += o;
            soo += o * o;
            sd += d;
            sdd += d * d;
            if f_min == 0.0 {
                let plain = if keep { zi / q } else { 0.0 };
                inverted_gap = inverted_gap.max((o - plain).abs());
            }
        }
    }
    let nf = n as f64;
    let input_mean = sz / nf;
    let output_mean = so / nf;
    let mean_shift = sd / nf;
    let shift_var = ((sdd - sd * sd / nf) / (nf - 1.0)).max(0.0);
    let standard_error = (shift_var / nf).sqrt();
    let output_variance = (soo - so * so / nf) / (nf - 1.0);
    let ez2 = szz / nf;
    let shift = (1.0 - q) * f_min;
    let kept_sq = ez2 - 2.0 * shift * input_mean + shift * shift;
    let predicted_output_variance = kept_sq / q + (1.0 - q) * f_min * f_min - input_mean * input_mean;
    let passes = mean_shift == 0.0 || mean_shift.abs() < 3.0 * standard_error;
    Ok(DropoutCheckReport {
        q,
        f_min,
        n,
        seed,
        input_mean,
        output_mean,
        mean_shift,
        standard_error,
        output_variance,
        predicted_output_variance,
        inverted_max_abs_diff: (f_min == 0.0).then_some(inverted_gap),
        passes,
    })
}
