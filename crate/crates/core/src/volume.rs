//! Monte-Carlo volume-scaling oracle for the local learning coefficient.
//!
//! Near a minimum w* the volume of the set {w in B : l(w) <= l(w*) + eps}
//! shrinks like c·eps^lambda·log(1/eps)^(m-1). All built-in potentials have
//! multiplicity m = 1, so the log-log slope of V(eps) against eps recovers
//! lambda directly. The oracle estimates V(eps) by uniform sampling in the
//! ball and fits the slope by least squares; it is independent of SGLD and
//! of the analytic gradients.

use crate::error::{CoreError, Result};
use crate::par::map_indexed;
use crate::potentials::AnalyticPotential;
use crate::rng::{RngKey, Stream};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// One estimated sublevel-set volume.
#[derive(Clone, Debug, Serialize)]
pub struct VolumePoint {
    pub epsilon: f64,
    pub volume: f64,
    pub hits: u64,
    pub samples: u64,
}

/// Least-squares fit of log V against log eps.
#[derive(Clone, Debug, Serialize)]
pub struct VolumeFit {
    pub lambda: f64,
    pub lambda_stderr: f64,
    /// Intercept log c of the fitted power law.
    pub intercept: f64,
    pub points: Vec<VolumePoint>,
}

/// Log-spaced grid of `n` thresholds from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

fn ball_volume(d: usize, r: f64) -> f64 {
    // V_d(r) = pi^(d/2) / Gamma(d/2 + 1) * r^d, via ln-gamma for stability
    let half = d as f64 / 2.0;
    (half * std::f64::consts::PI.ln() - ln_gamma(half + 1.0) + d as f64 * r.ln()).exp()
}

/// Lanczos approximation, enough accuracy for volume constants.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

const SAMPLE_CHUNK: usize = 65_536;
const MIN_HITS: u64 = 100;
const MAX_WIDEN: u32 = 6;

/// Count, for each threshold, how many of `n` uniform ball samples fall in
/// the sublevel set. Sample i is keyed by its absolute index so widening
/// the sample budget extends the same stream.
fn count_hits(
    p: &AnalyticPotential,
    radius: f64,
    thresholds: &[f64],
    start: u64,
    n: u64,
    seed: u64,
) -> Vec<u64> {
    let d = p.dim;
    let nchunks = (n as usize).div_ceil(SAMPLE_CHUNK);
    let partials = map_indexed(nchunks, |ci| {
        let lo = start + (ci * SAMPLE_CHUNK) as u64;
        let hi = (lo + SAMPLE_CHUNK as u64).min(start + n);
        let mut counts = vec![0u64; thresholds.len()];
        let mut w = vec![0.0f64; d];
        for i in lo..hi {
            let mut rng = RngKey::new(seed, Stream::Volume, i, 0).rng();
            // uniform in the ball: gaussian direction, radius ~ u^(1/d)
            let mut norm2 = 0.0;
            for x in w.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *x = g;
                norm2 += g * g;
            }
            let u: f64 = rng.gen::<f64>();
            let scale = radius * u.powf(1.0 / d as f64) / norm2.sqrt();
            for (x, c) in w.iter_mut().zip(&p.reference_point) {
                *x = *x * scale + c;
            }
            let loss: f64 = p.eval(&w);
            for (t, c) in thresholds.iter().zip(counts.iter_mut()) {
                if loss <= *t {
                    *c += 1;
                }
            }
        }
        counts
    });
    let mut total = vec![0u64; thresholds.len()];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Estimate lambda by fitting the volume-scaling law on `eps_grid`.
///
/// The reference point must be the maximally degenerate minimum inside the
/// ball (true for the built-in potentials at their default radii). Any
/// threshold with fewer than 100 hits triggers sample widening (up to 64x)
/// before failing with `InsufficientHits`.
pub fn volume_llc_oracle(
    p: &AnalyticPotential,
    ball_radius: f64,
    eps_grid: &[f64],
    samples_per_eps: u64,
    seed: u64,
) -> Result<VolumeFit> {
    if eps_grid.len() < 6 {
        return Err(CoreError::config(
            "eps_grid",
            "need at least 6 log-spaced thresholds",
        ));
    }
    let mut eps = eps_grid.to_vec();
    eps.sort_by(|a, b| a.total_cmp(b));
    if eps[0] <= 0.0 {
        return Err(CoreError::config("eps_grid", "thresholds must be > 0"));
    }

    // the loss is evaluated once per sample and compared with every
    // threshold, so the sample budget is shared across the grid
    let mut total: u64 = samples_per_eps;
    let mut hits = count_hits(p, ball_radius, &eps, 0, total, seed);
    let mut widen = 0;
    while hits.iter().any(|&h| h < MIN_HITS) {
        if widen >= MAX_WIDEN {
            let (i, &h) = hits
                .iter()
                .enumerate()
                .min_by_key(|(_, &h)| h)
                .expect("nonempty");
            return Err(CoreError::InsufficientHits {
                epsilon: eps[i],
                hits: h,
                required: MIN_HITS,
            });
        }
        // double the budget, extending the existing sample stream
        let extra = count_hits(p, ball_radius, &eps, total, total, seed);
        for (h, e) in hits.iter_mut().zip(extra) {
            *h += e;
        }
        total *= 2;
        widen += 1;
    }

    let vol = ball_volume(p.dim, ball_radius);
    let points: Vec<VolumePoint> = eps
        .iter()
        .zip(&hits)
        .map(|(&epsilon, &h)| VolumePoint {
            epsilon,
            volume: vol * h as f64 / total as f64,
            hits: h,
            samples: total,
        })
        .collect();

    // least squares on (ln eps, ln V); multiplicity 1 -> pure power law
    let xs: Vec<f64> = points.iter().map(|p| p.epsilon.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.volume.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let dof = (xs.len().max(3) - 2) as f64;
    let stderr = (ss_res / dof / sxx).sqrt();

    Ok(VolumeFit {
        lambda: slope,
        lambda_stderr: stderr,
        intercept,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{builtin_potentials, iso_quadratic};

    fn get(name: &str) -> AnalyticPotential {
        builtin_potentials().into_iter().find(|p| p.name == name).unwrap()
    }

    #[test]
    fn ball_volume_closed_forms() {
        assert!((ball_volume(2, 1.0) - std::f64::consts::PI).abs() < 1e-10);
        assert!((ball_volume(3, 1.0) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-9);
        assert!((ball_volume(2, 0.5) - std::f64::consts::PI * 0.25).abs() < 1e-10);
    }

    #[test]
    fn quadratic_slope_is_one() {
        // V(eps) = pi*eps exactly inside the unit ball
        let p = get("l1");
        let grid = log_spaced(1e-4, 1e-1, 8);
        let fit = volume_llc_oracle(&p, 1.0, &grid, 2_000_000, 0).unwrap();
        assert!(
            (fit.lambda - 1.0).abs() < 0.05,
            "l1 slope {} should be 1 within 5%",
            fit.lambda
        );
        // the smallest-threshold volume also matches pi*eps itself
        let v0 = &fit.points[0];
        assert!((v0.volume / (std::f64::consts::PI * v0.epsilon) - 1.0).abs() < 0.25);
    }

    #[test]
    fn quartic_slope_is_half() {
        let p = get("l2");
        let grid = log_spaced(1e-5, 1e-1, 8);
        let fit = volume_llc_oracle(&p, 1.0, &grid, 1_000_000, 0).unwrap();
        assert!(
            (fit.lambda - 0.5).abs() < 0.05,
            "l2 slope {} should be 0.5 within 10%",
            fit.lambda
        );
    }

    #[test]
    fn product_degenerate_slope_is_quarter() {
        let p = get("l3");
        let grid = log_spaced(1e-6, 1e-2, 8);
        let fit = volume_llc_oracle(&p, 1.0, &grid, 1_000_000, 0).unwrap();
        assert!(
            (fit.lambda - 0.25).abs() < 0.25 * 0.15,
            "l3 slope {} should be 0.25 within 15%",
            fit.lambda
        );
    }

    #[test]
    fn flat_direction_keeps_slope_one() {
        let p = get("l6");
        let grid = log_spaced(1e-4, 1e-2, 8);
        let fit = volume_llc_oracle(&p, 1.0, &grid, 2_000_000, 0).unwrap();
        assert!((fit.lambda - 1.0).abs() < 0.1, "l6 slope {}", fit.lambda);
    }

    #[test]
    fn anisotropic_quadratic_slope_three_halves() {
        let p = iso_quadratic(3);
        let grid = log_spaced(1e-3, 1e-1, 8);
        let fit = volume_llc_oracle(&p, 1.0, &grid, 2_000_000, 0).unwrap();
        assert!((fit.lambda - 1.5).abs() < 0.12, "quad3 slope {}", fit.lambda);
    }

    #[test]
    fn insufficient_hits_is_reported() {
        let p = get("l1");
        let grid = log_spaced(1e-12, 1e-10, 6);
        match volume_llc_oracle(&p, 1.0, &grid, 1000, 0) {
            Err(CoreError::InsufficientHits { epsilon, .. }) => assert!(epsilon <= 1e-10),
            other => panic!("expected InsufficientHits, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = get("l2");
        let grid = log_spaced(1e-4, 1e-1, 6);
        let a = volume_llc_oracle(&p, 1.0, &grid, 200_000, 3).unwrap();
        let b = volume_llc_oracle(&p, 1.0, &grid, 200_000, 3).unwrap();
        assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
    }
}
