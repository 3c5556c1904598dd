//! Fixed-point analysis of the moment map.
//!
//! Solves for the SERLU constants that make a chosen `(μ, ν)` a fixed point,
//! computes the Jacobian of the map and its spectral norm, scans a 4-D grid of
//! `(μ, ω, ν, τ)` for extreme values, and iterates the map to show contraction.

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, ActivationSpec};
use crate::error::{Error, Result};
use crate::moments::{moment_map_quadrature_with_tol, moment_map_serlu, MomentPair, WeightStats};

/// Central-difference step for the Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;
/// Quadrature tolerance used whenever the map is differentiated numerically.
const DIFF_QUAD_TOL: f64 = 1e-13;

/// Moment map used by the analysis: SERLU closed form, quadrature for everything else.
pub fn evaluate_map(spec: &ActivationSpec, p: &MomentPair, w: &WeightStats) -> Result<MomentPair> {
    match spec.kind {
        ActivationKind::Serlu => moment_map_serlu(p, w, spec),
        _ => moment_map_quadrature_with_tol(spec, p, w, DIFF_QUAD_TOL),
    }
}

/// Largest singular value of `[[a, b], [c, d]]`.
///
/// Uses `σ_max = (√((a+d)² + (c−b)²) + √((a−d)² + (b+c)²)) / 2`, which avoids
/// the cancellation in the eigenvalues of `mᵀm`.
pub fn spectral_norm_2x2(m: [[f64; 2]; 2]) -> f64 {
    let [[a, b], [c, d]] = m;
    0.5 * ((a + d).hypot(c - b) + (a - d).hypot(b + c))
}

/// Jacobian of `(μ, ν) ↦ (μ̃, ν̃)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jacobian2 {
    pub d_mu_d_mu: f64,
    pub d_mu_d_nu: f64,
    pub d_nu_d_mu: f64,
    pub d_nu_d_nu: f64,
    pub spectral_norm: f64,
}

impl Jacobian2 {
    pub fn from_matrix(m: [[f64; 2]; 2]) -> Self {
        Jacobian2 {
            d_mu_d_mu: m[0][0],
            d_mu_d_nu: m[0][1],
            d_nu_d_mu: m[1][0],
            d_nu_d_nu: m[1][1],
            spectral_norm: spectral_norm_2x2(m),
        }
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.d_mu_d_mu, self.d_mu_d_nu], [self.d_nu_d_mu, self.d_nu_d_nu]]
    }
}

/// Central-difference Jacobian of the moment map at `p`.
pub fn jacobian_at(spec: &ActivationSpec, p: &MomentPair, w: &WeightStats, h: f64) -> Result<Jacobian2> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Domain(format!("finite-difference step must lie in [1e-7, 1e-4], got {h}")));
    }
    p.validate()?;
    if p.nu - h <= 0.0 {
        return Err(Error::Domain(format!("perturbed variance {} is not positive", p.nu - h)));
    }
    let at = |mu: f64, nu: f64| evaluate_map(spec, &MomentPair { mu, nu }, w);
    let mu_plus = at(p.mu + h, p.nu)?;
    let mu_minus = at(p.mu - h, p.nu)?;
    let nu_plus = at(p.mu, p.nu + h)?;
    let nu_minus = at(p.mu, p.nu - h)?;
    let inv = 1.0 / (2.0 * h);
    Ok(Jacobian2::from_matrix([
        [(mu_plus.mu - mu_minus.mu) * inv, (nu_plus.mu - nu_minus.mu) * inv],
        [(mu_plus.nu - mu_minus.nu) * inv, (nu_plus.nu - nu_minus.nu) * inv],
    ]))
}

/// Result of [`solve_serlu_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub alpha: f64,
    pub lambda: f64,
    /// Max-norm of `g(target) − target` at the returned parameters.
    pub residual: f64,
    pub iterations: usize,
}

pub const SOLVER_MAX_ITER: usize = 100;
pub const SOLVER_FD_STEP: f64 = 1e-7;
pub const SOLVER_START: (f64, f64) = (2.0, 1.0);

/// Find SERLU `(α, λ)` that make `target` a fixed point for weights `w`.
pub fn solve_serlu_params(target: &MomentPair, w: &WeightStats, tol: f64) -> Result<SolveReport> {
    solve_serlu_params_from(target, w, tol, SOLVER_START)
}

/// Damped 2-D Newton iteration from an explicit starting guess.
///
/// The Jacobian of the residual is taken by central differences with step
/// [`SOLVER_FD_STEP`]; a step that does not reduce the residual is halved.
pub fn solve_serlu_params_from(target: &MomentPair, w: &WeightStats, tol: f64, start: (f64, f64)) -> Result<SolveReport> {
    target.validate()?;
    w.validate()?;
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let residual = |alpha: f64, lambda: f64| -> Result<[f64; 2]> {
        let out = moment_map_serlu(target, w, &ActivationSpec::serlu_with(alpha, lambda))?;
        Ok([out.mu - target.mu, out.nu - target.nu])
    };
    let norm = |r: &[f64; 2]| r[0].abs().max(r[1].abs());

    let (mut alpha, mut lambda) = start;
    let mut r = residual(alpha, lambda)?;
    for iter in 0..SOLVER_MAX_ITER {
        if norm(&r) <= tol {
            return Ok(SolveReport {
                alpha,
                lambda,
                residual: norm(&r),
                iterations: iter,
            });
        }
        let h = SOLVER_FD_STEP;
        let ra_p = residual(alpha + h, lambda)?;
        let ra_m = residual(alpha - h, lambda)?;
        let rl_p = residual(alpha, lambda + h)?;
        let rl_m = residual(alpha, lambda - h)?;
        let j = [
            [(ra_p[0] - ra_m[0]) / (2.0 * h), (rl_p[0] - rl_m[0]) / (2.0 * h)],
            [(ra_p[1] - ra_m[1]) / (2.0 * h), (rl_p[1] - rl_m[1]) / (2.0 * h)],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Solver {
                iterations: iter,
                alpha,
                lambda,
                residual: norm(&r),
            });
        }
        let da = (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let dl = (j[0][0] * r[1] - j[1][0] * r[0]) / det;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let (a_new, l_new) = (alpha - scale * da, lambda - scale * dl);
            if a_new > 0.0 && l_new > 0.0 {
                if let Ok(r_new) = residual(a_new, l_new) {
                    if norm(&r_new) < norm(&r) {
                        accepted = Some((a_new, l_new, r_new));
                        break;
                    }
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((a_new, l_new, r_new)) => {
                alpha = a_new;
                lambda = l_new;
                r = r_new;
            }
            None => {
                // No descent possible: either converged to rounding level or stuck.
                return if norm(&r) <= tol {
                    Ok(SolveReport {
                        alpha,
                        lambda,
                        residual: norm(&r),
                        iterations: iter,
                    })
                } else {
                    Err(Error::Solver {
                        iterations: iter,
                        alpha,
                        lambda,
                        residual: norm(&r),
                    })
                };
            }
        }
    }
    if norm(&r) <= tol {
        return Ok(SolveReport {
            alpha,
            lambda,
            residual: norm(&r),
            iterations: SOLVER_MAX_ITER,
        });
    }
    Err(Error::Solver {
        iterations: SOLVER_MAX_ITER,
        alpha,
        lambda,
        residual: norm(&r),
    })
}

/// Closed interval on one axis of the scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn is_endpoint(&self, x: f64) -> bool {
        x == self.lo || x == self.hi
    }

    /// Number of grid samples: `round((hi − lo)/step) + 1`.
    pub fn samples(&self, step: f64) -> usize {
        ((self.hi - self.lo) / step).round() as usize + 1
    }

    /// The `i`-th of `n` equally spaced samples; endpoints are exact.
    pub fn sample(&self, i: usize, n: usize) -> f64 {
        if n == 1 || i == 0 {
            self.lo
        } else if i == n - 1 {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * (i as f64 / (n - 1) as f64)
        }
    }
}

/// The scan domain: `Ω` for `(μ, ν)` and `Φ` for `(ω, τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub mu: Interval,
    pub nu: Interval,
    pub omega: Interval,
    pub tau: Interval,
    pub step: f64,
}

/// A point of the scan grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mu: f64,
    pub omega: f64,
    pub nu: f64,
    pub tau: f64,
}

impl GridPoint {
    fn key(&self) -> [f64; 4] {
        [self.mu, self.omega, self.nu, self.tau]
    }

    /// Lexicographic order on `(μ, ω, ν, τ)`.
    fn lex_cmp(&self, other: &GridPoint) -> std::cmp::Ordering {
        self.key()
            .iter()
            .zip(other.key().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

impl DomainBox {
    /// `Ω = [−0.2, 0.2] × [0.8, 1.5]`, `Φ = [−0.1, 0.1] × [0.9, 1.2]`, step 0.02.
    pub fn standard() -> Self {
        DomainBox {
            mu: Interval::new(-0.2, 0.2),
            nu: Interval::new(0.8, 1.5),
            omega: Interval::new(-0.1, 0.1),
            tau: Interval::new(0.9, 1.2),
            step: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("grid step must be positive, got {}", self.step)));
        }
        for (name, iv) in [("mu", self.mu), ("nu", self.nu), ("omega", self.omega), ("tau", self.tau)] {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo <= iv.hi) {
                return Err(Error::Config(format!("{name} interval [{}, {}] is invalid", iv.lo, iv.hi)));
            }
        }
        if self.nu.lo <= 0.0 {
            return Err(Error::Config(format!("nu_min must be positive, got {}", self.nu.lo)));
        }
        if self.tau.lo <= 0.0 {
            return Err(Error::Config(format!("tau_min must be positive, got {}", self.tau.lo)));
        }
        Ok(())
    }

    /// Per-axis sample counts in `(μ, ω, ν, τ)` order.
    pub fn counts(&self) -> [usize; 4] {
        [
            self.mu.samples(self.step),
            self.omega.samples(self.step),
            self.nu.samples(self.step),
            self.tau.samples(self.step),
        ]
    }

    pub fn len(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point at flat index `k` (τ varies fastest).
    pub fn point(&self, k: usize) -> GridPoint {
        let [nm, no, nn, nt] = self.counts();
        let it = k % nt;
        let inn = (k / nt) % nn;
        let io = (k / (nt * nn)) % no;
        let im = k / (nt * nn * no);
        GridPoint {
            mu: self.mu.sample(im, nm),
            omega: self.omega.sample(io, no),
            nu: self.nu.sample(inn, nn),
            tau: self.tau.sample(it, nt),
        }
    }

    /// True if any coordinate sits at an end of its interval.
    pub fn on_boundary(&self, p: &GridPoint) -> bool {
        self.mu.is_endpoint(p.mu) || self.omega.is_endpoint(p.omega) || self.nu.is_endpoint(p.nu) || self.tau.is_endpoint(p.tau)
    }
}

/// An extreme value and where it was found.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub value: f64,
    pub at: GridPoint,
}

impl Extremum {
    /// Replace `self` with the candidate if it is better; equal values go to the
    /// lexicographically smaller point.
    fn offer(slot: &mut Option<Extremum>, candidate: Extremum, prefer_larger: bool) {
        let replace = match slot {
            None => true,
            Some(cur) => {
                let ord = candidate.value.total_cmp(&cur.value);
                let better = if prefer_larger { ord.is_gt() } else { ord.is_lt() };
                better || (ord.is_eq() && candidate.at.lex_cmp(&cur.at).is_lt())
            }
        };
        if replace {
            *slot = Some(candidate);
        }
    }
}

/// Streaming min/max aggregate over grid evaluations.
#[derive(Debug, Clone, Default)]
struct Aggregate {
    max_norm: Option<Extremum>,
    min_mu: Option<Extremum>,
    max_mu: Option<Extremum>,
    min_nu: Option<Extremum>,
    max_nu: Option<Extremum>,
    count: usize,
}

impl Aggregate {
    fn update(&mut self, at: GridPoint, out: MomentPair, norm: f64) {
        Extremum::offer(&mut self.max_norm, Extremum { value: norm, at }, true);
        Extremum::offer(&mut self.min_mu, Extremum { value: out.mu, at }, false);
        Extremum::offer(&mut self.max_mu, Extremum { value: out.mu, at }, true);
        Extremum::offer(&mut self.min_nu, Extremum { value: out.nu, at }, false);
        Extremum::offer(&mut self.max_nu, Extremum { value: out.nu, at }, true);
        self.count += 1;
    }

    fn merge(&mut self, other: Aggregate) {
        for (slot, theirs, larger) in [
            (&mut self.max_norm, other.max_norm, true),
            (&mut self.min_mu, other.min_mu, false),
            (&mut self.max_mu, other.max_mu, true),
            (&mut self.min_nu, other.min_nu, false),
            (&mut self.max_nu, other.max_nu, true),
        ] {
            if let Some(e) = theirs {
                Extremum::offer(slot, e, larger);
            }
        }
        self.count += other.count;
    }
}

/// Summary of a grid scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScanReport {
    pub max_spectral_norm: Extremum,
    pub lower_bound_mu_tilde: Extremum,
    pub upper_bound_mu_tilde: Extremum,
    pub lower_bound_nu_tilde: Extremum,
    pub upper_bound_nu_tilde: Extremum,
    pub points_evaluated: usize,
}

impl GridScanReport {
    fn rows(&self) -> [(&'static str, &Extremum); 5] {
        [
            ("max_spectral_norm", &self.max_spectral_norm),
            ("lower_bound_mu_tilde", &self.lower_bound_mu_tilde),
            ("upper_bound_mu_tilde", &self.upper_bound_mu_tilde),
            ("lower_bound_nu_tilde", &self.lower_bound_nu_tilde),
            ("upper_bound_nu_tilde", &self.upper_bound_nu_tilde),
        ]
    }

    /// Flat `(name, value)` pairs: each row value followed by its `_mu`, `_omega`,
    /// `_nu`, `_tau` argpoint, then `points_evaluated`.
    pub fn flat_fields(&self) -> Vec<(String, f64)> {
        let mut out = Vec::with_capacity(26);
        for (name, e) in self.rows() {
            out.push((name.to_string(), e.value));
            out.push((format!("{name}_mu"), e.at.mu));
            out.push((format!("{name}_omega"), e.at.omega));
            out.push((format!("{name}_nu"), e.at.nu));
            out.push((format!("{name}_tau"), e.at.tau));
        }
        out.push(("points_evaluated".to_string(), self.points_evaluated as f64));
        out
    }

    /// Flat JSON object with the field names of [`GridScanReport::flat_fields`].
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (k, v) in self.flat_fields() {
            let value = if k == "points_evaluated" {
                serde_json::Value::from(self.points_evaluated as u64)
            } else {
                serde_json::Value::from(v)
            };
            map.insert(k, value);
        }
        serde_json::Value::Object(map)
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> Result<String> {
        let fields = self.flat_fields();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(fields.iter().map(|(k, _)| k.as_str()))?;
        w.write_record(fields.iter().map(|(k, v)| {
            if k == "points_evaluated" {
                self.points_evaluated.to_string()
            } else {
                format!("{v:?}")
            }
        }))?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// All five extremes sit on the boundary of the box.
    pub fn extremes_on_boundary(&self, domain: &DomainBox) -> bool {
        self.rows().iter().all(|(_, e)| domain.on_boundary(&e.at))
    }

    /// `g(Ω) ⊂ Ω` over the scanned points.
    pub fn maps_into(&self, domain: &DomainBox) -> bool {
        domain.mu.contains(self.lower_bound_mu_tilde.value)
            && domain.mu.contains(self.upper_bound_mu_tilde.value)
            && domain.nu.contains(self.lower_bound_nu_tilde.value)
            && domain.nu.contains(self.upper_bound_nu_tilde.value)
    }
}

fn scan_range(spec: &ActivationSpec, domain: &DomainBox, range: std::ops::Range<usize>) -> Result<Aggregate> {
    let mut agg = Aggregate::default();
    for k in range {
        let at = domain.point(k);
        let eval = || -> Result<(MomentPair, f64)> {
            let p = MomentPair::new(at.mu, at.nu)?;
            let w = WeightStats::new(at.omega, at.tau)?;
            let out = evaluate_map(spec, &p, &w)?;
            let jac = jacobian_at(spec, &p, &w, JACOBIAN_STEP)?;
            Ok((out, jac.spectral_norm))
        };
        let (out, norm) = eval().map_err(|e| Error::GridPoint {
            mu: at.mu,
            omega: at.omega,
            nu: at.nu,
            tau: at.tau,
            source: Box::new(e),
        })?;
        agg.update(at, out, norm);
    }
    Ok(agg)
}

/// Evaluate the moment map and its Jacobian at every grid point of `domain`.
///
/// Points are split into `workers` contiguous chunks evaluated on scoped
/// threads. Ties are broken towards the lexicographically smallest
/// `(μ, ω, ν, τ)`, so the report does not depend on the worker count.
pub fn grid_scan(spec: &ActivationSpec, domain: &DomainBox, workers: usize) -> Result<GridScanReport> {
    spec.validate()?;
    domain.validate()?;
    let total = domain.len();
    let workers = workers.clamp(1, total.max(1));
    let agg = if workers == 1 {
        scan_range(spec, domain, 0..total)?
    } else {
        let chunks: Vec<_> = (0..workers).map(|i| i * total / workers..(i + 1) * total / workers).collect();
        let results: Vec<Result<Aggregate>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|r| s.spawn(move || scan_range(spec, domain, r)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("scan worker panicked")).collect()
        });
        let mut agg = Aggregate::default();
        for r in results {
            agg.merge(r?);
        }
        agg
    };
    let missing = || Error::Config("grid has no points".to_string());
    Ok(GridScanReport {
        max_spectral_norm: agg.max_norm.ok_or_else(missing)?,
        lower_bound_mu_tilde: agg.min_mu.ok_or_else(missing)?,
        upper_bound_mu_tilde: agg.max_mu.ok_or_else(missing)?,
        lower_bound_nu_tilde: agg.min_nu.ok_or_else(missing)?,
        upper_bound_nu_tilde: agg.max_nu.ok_or_else(missing)?,
        points_evaluated: agg.count,
    })
}

/// Outcome of repeatedly applying the moment map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointRun {
    pub last: MomentPair,
    /// Start point followed by every iterate.
    pub trajectory: Vec<MomentPair>,
    pub converged: bool,
    pub iterations: usize,
}

impl FixedPointRun {
    /// Ratios `e_{k+1}/e_k` of max-norm distances to `target` along the trajectory,
    /// restricted to steps where `e_k > floor`.
    pub fn error_ratios(&self, target: &MomentPair, floor: f64) -> Vec<f64> {
        self.trajectory
            .windows(2)
            .filter_map(|w| {
                let e0 = w[0].distance(target);
                let e1 = w[1].distance(target);
                (e0 > floor).then(|| e1 / e0)
            })
            .collect()
    }
}

/// Iterate `g` from `start` until successive iterates differ by less than `tol`
/// in max-norm or `max_iter` applications have been made.
pub fn iterate_to_fixed_point(spec: &ActivationSpec, start: &MomentPair, w: &WeightStats, tol: f64, max_iter: usize) -> Result<FixedPointRun> {
    start.validate()?;
    w.validate()?;
    let mut trajectory = vec![*start];
    let mut current = *start;
    for iter in 1..=max_iter {
        let next = evaluate_map(spec, &current, w)?;
        trajectory.push(next);
        let step = next.distance(&current);
        current = next;
        if step < tol {
            return Ok(FixedPointRun {
                last: current,
                trajectory,
                converged: true,
                iterations: iter,
            });
        }
    }
    Ok(FixedPointRun {
        last: current,
        trajectory,
        converged: false,
        iterations: max_iter,
    })
}
