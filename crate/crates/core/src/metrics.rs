//! Instance exposure and exploitation.
//!
//! Exposure measures how unusually low a model's log-perplexity on one
//! instance is compared to a population of instances it never saw.
//! [`rank_exposure`] counts directly; [`approx_exposure`] reads the same
//! quantity off a skew-normal fit of the population, which is what makes it
//! cheap enough to compute per instance. Exploitation is the exposure
//! gained by training: target exposure minus reference exposure.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {min} samples, got {n}")]
    InsufficientSample { n: usize, min: usize },
    #[error("samples have zero variance")]
    Degenerate,
    #[error("population is empty")]
    EmptyPopulation,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub const MIN_FIT_SAMPLES: usize = 30;
pub const SKEW_CLAMP: f64 = 0.99;
pub const CDF_FLOOR: f64 = 1e-12;
pub const KS_VALID_P: f64 = 0.1;

/// `ln|population| - ln(rank)`, rank = #{p <= px} clamped to >= 1.
pub fn rank_exposure(px: f64, population: &[f64]) -> Result<f64, MetricsError> {
    if population.is_empty() {
        return Err(MetricsError::EmptyPopulation);
    }
    if !px.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    let rank = population.iter().filter(|&&p| p <= px).count().max(1);
    Ok((population.len() as f64).ln() - (rank as f64).ln())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Owen's T function, T(h, a) = 1/(2π) ∫₀ᵃ exp(-h²(1+x²)/2) / (1+x²) dx.
pub fn owens_t(h: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    if a < 0.0 {
        return -owens_t(h, -a);
    }
    if a > 1.0 {
        let ah = a * h;
        let (ph, pah) = (normal_cdf(h), normal_cdf(ah));
        return 0.5 * ph + 0.5 * pah - ph * pah - owens_t(ah, 1.0 / a);
    }
    let f = |x: f64| (-0.5 * h * h * (1.0 + x * x)).exp() / (1.0 + x * x);
    adaptive_simpson(&f, 0.0, a, 1e-13, 48) / (2.0 * PI)
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewNormalFit {
    pub xi: f64,
    pub omega: f64,
    pub alpha: f64,
    pub sample_n: usize,
    pub ks_stat: f64,
    pub ks_p: f64,
    /// `ks_p > 0.1`.
    pub valid: bool,
}

impl SkewNormalFit {
    /// A fit with given parameters and no goodness-of-fit information.
    pub fn from_params(xi: f64, omega: f64, alpha: f64) -> Self {
        Self { xi, omega, alpha, sample_n: 0, ks_stat: 0.0, ks_p: 1.0, valid: true }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        skew_normal_cdf(self, x)
    }

    pub fn delta(&self) -> f64 {
        self.alpha / (1.0 + self.alpha * self.alpha).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.xi + self.omega * self.delta() * (2.0 / PI).sqrt()
    }
}

fn moments(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m3) = (0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    (mean, m2 / n, m3 / n)
}

/// Method-of-moments skew-normal fit, with a KS test against the samples.
pub fn fit_skew_normal(samples: &[f64]) -> Result<SkewNormalFit, MetricsError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(MetricsError::InsufficientSample { n: samples.len(), min: MIN_FIT_SAMPLES });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (mean, var, m3) = moments(samples);
    if !(var > 1e-24 * mean.abs().max(1.0).powi(2)) {
        return Err(MetricsError::Degenerate);
    }
    let mut g1 = m3 / var.powf(1.5);
    if g1.abs() > SKEW_CLAMP {
        log::warn!("sample skewness {g1:.3} clamped to ±{SKEW_CLAMP}");
        g1 = g1.signum() * SKEW_CLAMP;
    }
    let g23 = g1.abs().powf(2.0 / 3.0);
    let c = ((4.0 - PI) / 2.0).powf(2.0 / 3.0);
    let delta = g1.signum() * ((PI / 2.0) * g23 / (g23 + c)).sqrt();
    let delta = if g1 == 0.0 { 0.0 } else { delta };
    let alpha = delta / (1.0 - delta * delta).sqrt();
    let omega = (var / (1.0 - 2.0 * delta * delta / PI)).sqrt();
    let xi = mean - omega * delta * (2.0 / PI).sqrt();
    let mut fit = SkewNormalFit { xi, omega, alpha, sample_n: samples.len(), ks_stat: 0.0, ks_p: 1.0, valid: true };
    let (d, p) = ks_test(samples, &fit);
    fit.ks_stat = d;
    fit.ks_p = p;
    fit.valid = p > KS_VALID_P;
    Ok(fit)
}

/// F(x) = Φ(z) - 2 T(z, α), z = (x - ξ) / ω.
pub fn skew_normal_cdf(fit: &SkewNormalFit, x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    let z = (x - fit.xi) / fit.omega;
    (normal_cdf(z) - 2.0 * owens_t(z, fit.alpha)).clamp(0.0, 1.0)
}

/// Kolmogorov distribution survival function Q(λ) = P(K > λ).
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // theta-function form converges fast for small λ
        let mut s = 0.0;
        for k in 1..=100 {
            let j = (2 * k - 1) as f64;
            let term = (-j * j * PI * PI / (8.0 * lambda * lambda)).exp();
            s += term;
            if term < 1e-16 {
                break;
            }
        }
        return (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sided one-sample KS statistic against the fit and its asymptotic
/// p-value at √n·D.
pub fn ks_test(samples: &[f64], fit: &SkewNormalFit) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 1.0);
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = skew_normal_cdf(fit, x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let d = d.clamp(0.0, 1.0);
    (d, kolmogorov_q(n.sqrt() * d))
}

/// −ln max(F(px), 1e-12).
pub fn approx_exposure(fit: &SkewNormalFit, px: f64) -> f64 {
    if !fit.valid {
        log::warn!("exposure from a fit that failed the KS check (p = {:.3})", fit.ks_p);
    }
    -skew_normal_cdf(fit, px).max(CDF_FLOOR).ln()
}

pub fn exploitation(e_target: f64, e_ref: f64) -> f64 {
    e_target - e_ref
}

/// Exploitation with a protocol check: both exposures should come from
/// populations of the same size.
pub fn exploitation_checked(e_target: f64, e_ref: f64, target_population: usize, ref_population: usize) -> (f64, bool) {
    let mismatch = target_population != ref_population;
    if mismatch {
        log::warn!("exposure populations differ ({target_population} vs {ref_population})");
    }
    (exploitation(e_target, e_ref), mismatch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub px: f64,
    pub rank_exposure: Option<f64>,
    pub fitted_exposure: Option<f64>,
    pub method: String,
}

pub fn exposure_report(
    px: f64,
    population: Option<&[f64]>,
    fit: Option<&SkewNormalFit>,
) -> Result<ExposureReport, MetricsError> {
    let rank_exposure = population.map(|p| rank_exposure(px, p)).transpose()?;
    let fitted_exposure = fit.map(|f| approx_exposure(f, px));
    let method = match (rank_exposure.is_some(), fitted_exposure.is_some()) {
        (true, true) => "rank+fitted",
        (true, false) => "rank",
        (false, true) => "fitted",
        (false, false) => "none",
    };
    Ok(ExposureReport { px, rank_exposure, fitted_exposure, method: method.into() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefKind {
    /// Trained on everything but the instance.
    Exact,
    /// Trained without the whole protected set.
    Approx,
    /// The untrained initialization.
    Initial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploitationRecord {
    pub id: String,
    pub px: f64,
    pub e_target: f64,
    pub e_ref: f64,
    pub ex: f64,
    pub ref_kind: RefKind,
}

impl ExploitationRecord {
    pub fn new(id: impl Into<String>, px: f64, e_target: f64, e_ref: f64, ref_kind: RefKind) -> Self {
        Self { id: id.into(), px, e_target, e_ref, ex: exploitation(e_target, e_ref), ref_kind }
    }
}

pub fn write_jsonl<W: Write>(records: &[ExploitationRecord], mut out: W) -> Result<(), MetricsError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng::seeded;

    fn sample_skew_normal(n: usize, xi: f64, omega: f64, alpha: f64, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let delta = alpha / (1.0 + alpha * alpha).sqrt();
        (0..n)
            .map(|_| {
                let u0: f64 = rng.sample(StandardNormal);
                let u1: f64 = rng.sample(StandardNormal);
                xi + omega * (delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1)
            })
            .collect()
    }

    fn integrate_density(alpha: f64, z: f64) -> f64 {
        // ∫_{-40}^{z} 2 φ(t) Φ(αt) dt by composite Simpson
        let n = 400_000;
        let a = -40.0;
        let h = (z - a) / n as f64;
        let f = |t: f64| 2.0 * (-(t * t) / 2.0).exp() / (2.0 * PI).sqrt() * normal_cdf(alpha * t);
        let mut s = f(a) + f(z);
        for i in 1..n {
            let t = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        s * h / 3.0
    }

    #[test]
    fn rank_examples() {
        let pop: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(rank_exposure(5000.0, &pop).unwrap(), 0.0);
        assert!((rank_exposure(-1.0, &pop).unwrap() - 1000f64.ln()).abs() < 1e-12);
        let odd: Vec<f64> = (0..999).map(f64::from).collect();
        let median = 499.0;
        let count = odd.iter().filter(|&&p| p <= median).count();
        assert_eq!(count, 500);
        assert!((rank_exposure(median, &odd).unwrap() + (500.0f64 / 999.0).ln()).abs() < 1e-12);
        assert!(rank_exposure(1.0, &[]).is_err());
        // anti-monotone in rank
        assert!(rank_exposure(10.5, &pop).unwrap() > rank_exposure(11.5, &pop).unwrap());
    }

    #[test]
    fn owens_t_known_values() {
        // T(0, a) = atan(a) / 2π; T(h, 1) = Φ(h)(1 - Φ(h)) / 2
        for a in [0.1, 0.5, 1.0, 2.0, 10.0] {
            assert!((owens_t(0.0, a) - a.atan() / (2.0 * PI)).abs() < 1e-10, "{a}");
        }
        for h in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let p = normal_cdf(h);
            assert!((owens_t(h, 1.0) - p * (1.0 - p) / 2.0).abs() < 1e-10, "{h}");
        }
        // large a approaches (1 - Φ(|h|)) / 2
        assert!((owens_t(1.0, 1e6) - (1.0 - normal_cdf(1.0)) / 2.0).abs() < 1e-8);
        assert!((owens_t(0.5, -0.4) + owens_t(0.5, 0.4)).abs() < 1e-15);
    }

    #[test]
    fn cdf_examples() {
        let f = SkewNormalFit::from_params(0.0, 1.0, 0.0);
        assert!((skew_normal_cdf(&f, 0.0) - 0.5).abs() < 1e-12);
        for z in [-2.0, -0.5, 1.3] {
            assert!((skew_normal_cdf(&f, z) - normal_cdf(z)).abs() < 1e-12);
        }
        let g = SkewNormalFit::from_params(0.0, 1.0, 3.0);
        assert!((skew_normal_cdf(&g, 0.7) - integrate_density(3.0, 0.7)).abs() < 1e-6);
        let h = SkewNormalFit::from_params(1.0, 2.0, -2.5);
        assert!((skew_normal_cdf(&h, 0.4) - integrate_density(-2.5, -0.3)).abs() < 1e-6);
        for fit in [g, h] {
            assert_eq!(skew_normal_cdf(&fit, f64::NEG_INFINITY), 0.0);
            assert_eq!(skew_normal_cdf(&fit, f64::INFINITY), 1.0);
            assert!(skew_normal_cdf(&fit, -60.0) < 1e-12);
            assert!(skew_normal_cdf(&fit, 60.0) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn cdf_monotone_on_grids() {
        let mut rng = seeded(99);
        for _ in 0..50 {
            let fit = SkewNormalFit::from_params(rng.random_range(-3.0..3.0), rng.random_range(0.2..4.0), rng.random_range(-8.0..8.0));
            let mut prev = 0.0;
            for i in 0..400 {
                let x = -30.0 + i as f64 * 0.15;
                let v = skew_normal_cdf(&fit, x);
                assert!(v >= prev - 1e-12, "{fit:?} at {x}");
                prev = v;
            }
        }
    }

    #[test]
    fn fit_examples() {
        let sym: Vec<f64> = (0..101).map(|i| f64::from(i) - 50.0).collect();
        let f = fit_skew_normal(&sym).unwrap();
        assert_eq!(f.alpha, 0.0);
        let (mean, var, _) = moments(&sym);
        assert!((f.xi - mean).abs() < 1e-12 && (f.omega - var.sqrt()).abs() < 1e-12);
        assert!(matches!(fit_skew_normal(&[2.0; 40]), Err(MetricsError::Degenerate)));
        assert!(matches!(fit_skew_normal(&[1.0; 10]), Err(MetricsError::InsufficientSample { .. })));
        let xs = sample_skew_normal(5000, 0.0, 1.0, 3.0, 7);
        let f = fit_skew_normal(&xs).unwrap();
        assert!((f.alpha - 3.0).abs() <= 0.5, "{f:?}");
        assert!(f.ks_p > 0.1 && f.valid);
        assert!((0.0..=1.0).contains(&f.ks_stat));
    }

    #[test]
    fn ks_examples() {
        let f = SkewNormalFit::from_params(0.0, 1.0, 0.0);
        let (d, _) = ks_test(&[0.0], &f);
        assert!((d - 0.5).abs() < 1e-12);
        let fit = SkewNormalFit::from_params(2.0, 1.5, 2.0);
        let mut passes = 0;
        for seed in 0..100 {
            let xs = sample_skew_normal(2000, fit.xi, fit.omega, fit.alpha, seed);
            if ks_test(&xs, &fit).1 > 0.1 {
                passes += 1;
            }
            if seed < 10 {
                let shifted: Vec<f64> = xs.iter().map(|x| x + 5.0 * fit.omega).collect();
                assert!(ks_test(&shifted, &fit).1 < 1e-3);
            }
        }
        assert!(passes >= 85, "{passes}");
    }

    #[test]
    fn kolmogorov_branches_agree() {
        // both series are valid near λ = 1
        for lambda in [0.9, 1.0, 1.1] {
            let mut alt = 0.0;
            for k in 1..200 {
                let kf = f64::from(k);
                alt += if k % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * kf * kf * lambda * lambda).exp();
            }
            assert!((kolmogorov_q(lambda) - 2.0 * alt).abs() < 1e-10);
        }
        assert_eq!(kolmogorov_q(0.0), 1.0);
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn approx_exposure_examples() {
        let f = SkewNormalFit::from_params(3.0, 1.0, 0.0);
        assert!((approx_exposure(&f, 3.0) - 2f64.ln()).abs() < 1e-12);
        assert!(approx_exposure(&f, 1e6) < 1e-12);
        assert!((approx_exposure(&f, -1e6) + CDF_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn fitted_and_rank_exposures_agree_mid_quantile() {
        let pop = sample_skew_normal(2000, 4.0, 0.8, 2.0, 3);
        let fit = fit_skew_normal(&pop).unwrap();
        let mut sorted = pop.clone();
        sorted.sort_by(f64::total_cmp);
        for q in [0.2, 0.35, 0.5, 0.65, 0.8] {
            let px = sorted[(q * 2000.0) as usize];
            let diff = (approx_exposure(&fit, px) - rank_exposure(px, &pop).unwrap()).abs();
            assert!(diff <= 0.15, "q={q} diff={diff}");
        }
    }

    #[test]
    fn exploitation_examples() {
        assert_eq!(exploitation(1.25, 1.25), 0.0);
        assert_eq!(exploitation(2.0, 0.5), 1.5);
        assert!(exploitation_checked(1.0, 1.0, 10, 11).1);
        let r = ExploitationRecord::new("d1", 3.2, 2.0, 0.5, RefKind::Approx);
        assert_eq!(r.ex, r.e_target - r.e_ref);
        let mut buf = Vec::new();
        write_jsonl(&[r], &mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line, "{\"id\":\"d1\",\"px\":3.2,\"e_target\":2.0,\"e_ref\":0.5,\"ex\":1.5,\"ref_kind\":\"approx\"}\n");
        let rep = exposure_report(1.0, Some(&[0.5, 2.0]), None).unwrap();
        assert_eq!(rep.method, "rank");
    }
}
