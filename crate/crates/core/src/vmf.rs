//! von Mises–Fisher distribution on `S^{p−1}`.
//!
//! Density `C_p(κ) exp(κ μᵀy)` with `C_p(κ) = κ^{p/2−1} / ((2π)^{p/2} I_{p/2−1}(κ))`,
//! mean resultant length `γ = I_{p/2}(κ)/I_{p/2−1}(κ)`, Wood's rejection sampler,
//! and Chernoff-type tail bounds for `ε = Z − μ`.
//!
//! Bessel functions are never formed directly: the ratio comes from a continued
//! fraction and `log I_ν` from a positive power series (small argument) or the
//! uniform asymptotic expansion (large order or argument).

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, norm, DenseMatrix};
use crate::rng::{self, Rng};
use crate::spherical_regression::SphericalMatrix;

/// Mean direction, concentration and dimension of a vMF law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(invalid("p", "dimension must be at least 2"));
        }
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(invalid("kappa", format!("must be finite and >= 0, got {kappa}")));
        }
        let nm = norm(&mu);
        if (nm - 1.0).abs() > 1e-12 {
            return Err(invalid("mu", format!("must be a unit vector, norm is {nm}")));
        }
        Ok(Self { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }
}

/// Mean resultant length `γ_{κ,p}` and noise level `η_{κ,p} = 1 − γ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmfMoments {
    pub gamma: f64,
    pub eta: f64,
}

/// `I_{ν+1}(x) / I_ν(x)` for `ν ≥ 0`, `x ≥ 0`.
///
/// Evaluates `1/(2(ν+1)/x + 1/(2(ν+2)/x + …))` with the modified Lentz method.
/// The number of terms grows roughly like `x/2`, which stays cheap for `x ≤ 1e6`.
pub fn bessel_ratio(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    let mut k = 1.0;
    loop {
        let b = 2.0 * (nu + k) / x;
        d += b;
        if d == 0.0 {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < EPS || k > 1e8 {
            break;
        }
        k += 1.0;
    }
    f
}

/// Natural log of the modified Bessel function of the first kind `I_ν(x)`, `x > 0`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x > 0.0);
    let s = nu.hypot(x);
    if s > DEBYE_SWITCH {
        log_bessel_i_debye(nu, x)
    } else {
        log_bessel_i_series(nu, x)
    }
}

const DEBYE_SWITCH: f64 = 100.0;

/// Ascending series `Σ (x/2)^{2k+ν} / (k! Γ(k+ν+1))`; every term is positive.
pub(crate) fn log_bessel_i_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 0.0;
    loop {
        term *= q / ((k + 1.0) * (k + nu + 1.0));
        sum += term;
        k += 1.0;
        if term < sum * 1e-17 && k > 0.5 * x {
            break;
        }
    }
    nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + sum.ln()
}

// Coefficients of u_k(t) / t^k as polynomials in t², from the uniform expansion
// I_ν(νz) ~ e^{νη} / (√(2πν) (1+z²)^{1/4}) Σ u_k(t)/ν^k.
const DEBYE_U: [(&[f64], f64); 4] = [
    (&[3.0, -5.0], 24.0),
    (&[81.0, -462.0, 385.0], 1152.0),
    (&[30375.0, -369603.0, 765765.0, -425425.0], 414720.0),
    (
        &[4465125.0, -94121676.0, 349922430.0, -446185740.0, 185910725.0],
        39813120.0,
    ),
];

pub(crate) fn log_bessel_i_debye(nu: f64, x: f64) -> f64 {
    let s = nu.hypot(x);
    let t = nu / s;
    let t2 = t * t;
    // u_k(t)/ν^k = P_k(t²) / s^k, finite at ν = 0
    let mut correction = 0.0;
    let mut inv_sk = 1.0;
    for (coeffs, denom) in DEBYE_U {
        inv_sk /= s;
        let poly = coeffs.iter().rev().fold(0.0, |acc, c| acc * t2 + c);
        correction += poly / denom * inv_sk;
    }
    let order_term = if nu == 0.0 { 0.0 } else { nu * (x / (nu + s)).ln() };
    s + order_term - 0.5 * (2.0 * PI * s).ln() + correction.ln_1p()
}

/// `log C_p(κ)`; for `κ = 0` the log reciprocal surface area of `S^{p−1}`.
pub fn log_normalizer(kappa: f64, p: usize) -> f64 {
    let half_p = p as f64 / 2.0;
    if kappa == 0.0 {
        return ln_gamma(half_p) - (2.0f64).ln() - half_p * PI.ln();
    }
    let nu = half_p - 1.0;
    nu * kappa.ln() - half_p * (2.0 * PI).ln() - log_bessel_i(nu, kappa)
}

/// Log-density of `y` under `params`; `y` must be unit length within `1e-10`.
pub fn log_density(params: &VmfParams, y: &[f64]) -> Result<f64> {
    if y.len() != params.p() {
        return Err(Error::DimensionMismatch {
            context: "log_density",
            expected: format!("length {}", params.p()),
            got: format!("length {}", y.len()),
        });
    }
    let ny = norm(y);
    if (ny - 1.0).abs() > 1e-10 {
        return Err(Error::NotUnitRow { row: 0, norm: ny });
    }
    Ok(log_normalizer(params.kappa, params.p()) + params.kappa * dot(params.mu(), y))
}

/// `γ_{κ,p} = I_{p/2}(κ)/I_{p/2−1}(κ)` and `η = 1 − γ²`.
pub fn gamma_kp(kappa: f64, p: usize) -> Result<VmfMoments> {
    if !kappa.is_finite() || kappa <= 0.0 {
        return Err(invalid("kappa", format!("must be positive and finite, got {kappa}")));
    }
    if p < 2 {
        return Err(invalid("p", "dimension must be at least 2"));
    }
    let gamma = bessel_ratio(p as f64 / 2.0 - 1.0, kappa);
    Ok(VmfMoments {
        gamma,
        eta: 1.0 - gamma * gamma,
    })
}

/// Wood's rejection sampler for the projection `t = μᵀZ`, plus the
/// tangent-normal assembly of full draws.
#[derive(Debug, Clone)]
pub struct VmfSampler {
    p: usize,
    kappa: f64,
    b: f64,
    x0: f64,
    c: f64,
    beta: Option<Beta<f64>>,
}

impl VmfSampler {
    pub fn new(kappa: f64, p: usize) -> Result<Self> {
        if p < 2 {
            return Err(invalid("p", "dimension must be at least 2"));
        }
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(invalid("kappa", format!("must be finite and >= 0, got {kappa}")));
        }
        let m = (p - 1) as f64;
        // b = (−2κ + √(4κ² + m²)) / m, written without cancellation
        let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
        let beta = if kappa > 0.0 {
            Some(Beta::new(m / 2.0, m / 2.0).map_err(|e| invalid("p", e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            p,
            kappa,
            b,
            x0,
            c,
            beta,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// One draw of `(t, 1 − t)` with `t = μᵀZ`; `1 − t` is returned separately
    /// because it loses all precision when formed by subtraction at large κ.
    pub fn draw_projection(&self, rng: &mut Rng) -> (f64, f64) {
        let m = (self.p - 1) as f64;
        let Some(beta) = &self.beta else {
            // κ = 0: t = 1 − 2z with z ~ Beta(m/2, m/2); use the symmetric form
            let z: f64 = Beta::new(m / 2.0, m / 2.0)
                .expect("valid shape")
                .sample(rng);
            return (1.0 - 2.0 * z, 2.0 * z);
        };
        loop {
            let z: f64 = beta.sample(rng);
            let denom = 1.0 - (1.0 - self.b) * z;
            let w = (1.0 - (1.0 + self.b) * z) / denom;
            let one_minus_w = 2.0 * self.b * z / denom;
            let u: f64 = rng.random();
            if self.kappa * w + m * (1.0 - self.x0 * w).ln() - self.c >= u.ln() {
                return (w, one_minus_w);
            }
        }
    }

    /// Writes one draw around the unit mean `mu` into `out`.
    pub fn draw_into(&self, mu: &[f64], rng: &mut Rng, out: &mut [f64]) {
        debug_assert_eq!(mu.len(), self.p);
        debug_assert_eq!(out.len(), self.p);
        if self.kappa == 0.0 {
            fill_uniform_direction(rng, out);
            return;
        }
        let (t, one_minus_t) = self.draw_projection(rng);
        // draw in the frame where μ = e₁, then reflect e₁ onto μ
        out[0] = 0.0;
        fill_uniform_direction(rng, &mut out[1..]);
        let radial = (one_minus_t * (1.0 + t)).max(0.0).sqrt();
        for v in out[1..].iter_mut() {
            *v *= radial;
        }
        out[0] = t;
        householder_e1_to(mu, out);
    }
}

fn fill_uniform_direction(rng: &mut Rng, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let nv = norm(out);
        if nv > 1e-300 {
            out.iter_mut().for_each(|v| *v /= nv);
            return;
        }
    }
}

/// Applies the reflection `H = I − 2uuᵀ/uᵀu`, `u = e₁ − μ`, which sends `e₁` to `μ`.
fn householder_e1_to(mu: &[f64], z: &mut [f64]) {
    let uu = 2.0 * (1.0 - mu[0]);
    if uu <= 0.0 {
        return;
    }
    // uᵀz with u = e₁ − μ
    let uz = z[0] - dot(mu, z);
    let scale = 2.0 * uz / uu;
    z[0] -= scale;
    for (zi, &mi) in z.iter_mut().zip(mu) {
        *zi += scale * mi;
    }
}

/// `count` i.i.d. draws from `params`; deterministic in `seed`.
pub fn sample(params: &VmfParams, count: usize, seed: u64) -> Result<SphericalMatrix> {
    if count == 0 {
        return Err(invalid("count", "must be at least 1"));
    }
    let sampler = VmfSampler::new(params.kappa, params.p())?;
    let mut rng = rng::seeded(seed);
    let p = params.p();
    let mut data = vec![0.0; count * p];
    for row in data.chunks_mut(p) {
        sampler.draw_into(params.mu(), &mut rng, row);
    }
    Ok(SphericalMatrix::from_trusted(DenseMatrix::from_vec_unchecked(
        count, p, data,
    )))
}

fn tail_exponent(kappa: f64, p: usize, delta: f64) -> f64 {
    let h = 0.5 * (p - 1) as f64;
    -delta * kappa + h * (kappa.ln() + 1.0) - h * (h / delta).ln()
}

/// Upper bound on `P(εᵀμ ≤ −δ)` (equivalently `P(‖ε‖ ≥ √(2δ))`), clamped to `[0, 1]`.
///
/// Valid for `p ≥ 4` and `(p−1)/(2κ) ≤ δ ≤ 2`.
pub fn tail_bound_deviation(kappa: f64, p: usize, delta: f64) -> Result<f64> {
    if p < 4 {
        return Err(invalid("p", format!("tail bound needs p >= 4, got {p}")));
    }
    if kappa.is_nan() || kappa <= 0.0 {
        return Err(invalid("kappa", "must be positive"));
    }
    let lo = (p - 1) as f64 / (2.0 * kappa);
    if !(delta >= lo && delta <= 2.0) {
        return Err(invalid(
            "delta",
            format!("must lie in [(p-1)/(2 kappa), 2] = [{lo}, 2], got {delta}"),
        ));
    }
    Ok(tail_exponent(kappa, p, delta).exp().clamp(0.0, 1.0))
}

/// Bound on `P(Σ_{i≤m} Q_i ≥ m(p−1)(1+s)/κ)` for i.i.d. `Q_i = ‖ε_i‖²`.
pub fn sum_tail_bound(m: usize, p: usize, s: f64) -> f64 {
    let mp = (m * (p - 1)) as f64;
    (-0.5 * mp * (s - s.ln_1p())).exp().min(1.0)
}

/// Level `4 n_max (p−1)/κ` whose grouped-maximum exceedance is bounded by `1/K`.
pub fn group_sum_threshold(n_max: usize, p: usize, kappa: f64) -> f64 {
    4.0 * (n_max * (p - 1)) as f64 / kappa
}

/// Monte-Carlo check of the grouped maximum-sum tail bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTailReport {
    pub threshold: f64,
    pub trials: usize,
    pub exceedances: usize,
    pub frequency: f64,
    /// `1/K`.
    pub bound: f64,
    /// Union of the per-group sum bounds at the common threshold; for `K = 1`
    /// this is the single-sum bound.
    pub union_bound: f64,
}

pub fn group_sum_tail_check(
    group_sizes: &[usize],
    p: usize,
    kappa: f64,
    trials: usize,
    seed: u64,
) -> Result<GroupTailReport> {
    let k = group_sizes.len();
    if k == 0 || group_sizes.contains(&0) {
        return Err(invalid("group_sizes", "need at least one nonempty group"));
    }
    if trials == 0 {
        return Err(invalid("trials", "must be at least 1"));
    }
    let n_min = *group_sizes.iter().min().expect("nonempty");
    let n_max = *group_sizes.iter().max().expect("nonempty");
    if 4.0 * (k as f64).ln() > ((p - 1) * n_min) as f64 {
        return Err(invalid(
            "group_sizes",
            format!("need 4 log K <= (p-1) min n_k; K = {k}, p = {p}, min n_k = {n_min}"),
        ));
    }
    let sampler = VmfSampler::new(kappa, p)?;
    let threshold = group_sum_threshold(n_max, p, kappa);
    let mut rng = rng::seeded(seed);
    let mut exceedances = 0;
    for _ in 0..trials {
        let mut worst = 0.0f64;
        for &nk in group_sizes {
            let mut total = 0.0;
            for _ in 0..nk {
                let (_, one_minus_t) = sampler.draw_projection(&mut rng);
                total += 2.0 * one_minus_t;
            }
            worst = worst.max(total);
        }
        if worst >= threshold {
            exceedances += 1;
        }
    }
    let union_bound = group_sizes
        .iter()
        .map(|&nk| sum_tail_bound(nk, p, 4.0 * n_max as f64 / nk as f64 - 1.0))
        .sum::<f64>()
        .min(1.0);
    Ok(GroupTailReport {
        threshold,
        trials,
        exceedances,
        frequency: exceedances as f64 / trials as f64,
        bound: 1.0 / k as f64,
        union_bound,
    })
}
