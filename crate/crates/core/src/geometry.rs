//! Stage-boundary detection from LLC curves, Hessian comparison
//! statistics, and the free-energy crossover calculator.
//!
//! Stage boundaries are plateaus of the LLC-over-training curve: the curve
//! is fit with a Gaussian process over log10(t) (squared-exponential kernel
//! plus an explicit constant+linear mean), the derivative of the posterior
//! mean is computed analytically from the kernel, and boundaries are zeros
//! of that derivative together with local minima of its absolute value
//! that fall below a tolerance.

use crate::error::{CoreError, Result};
use crate::model::{hvp_flat, DifferentiableLoss};
use crate::rng::{standard_normal_vec, RngKey, Stream};
use serde::{Deserialize, Serialize};

/// One LLC estimate along a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub lambda_hat: f64,
    /// Across-chain standard deviation of the estimate.
    pub std: f64,
    /// Test loss at this checkpoint, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

/// The (t, lambda_hat) series for a training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LlcCurve {
    pub points: Vec<CurvePoint>,
    /// Checkpoints whose estimate failed, with the reason.
    #[serde(default)]
    pub gaps: Vec<(u64, String)>,
}

impl LlcCurve {
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].step <= w[0].step {
                return Err(CoreError::shape("curve steps must be strictly increasing"));
            }
        }
        Ok(())
    }
}

/// Observation-noise specification for the GP fit.
#[derive(Clone, Copy, Debug)]
pub enum NoiseSpec {
    /// One variance for every point.
    Scalar(f64),
    /// Per-point variance from the curve's chain std, with a floor.
    FromCurveStd { floor: f64 },
}

/// GP posterior mean, derivative d lambda / d log10 t, and the
/// derivative's posterior standard deviation, at the curve's own steps.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothedCurve {
    pub steps: Vec<u64>,
    /// log10 of the step.
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub derivative: Vec<f64>,
    pub derivative_std: Vec<f64>,
}

/// Symmetric positive-definite solve via Cholesky; jitter retries on the
/// diagonal before giving up.
struct Chol {
    l: Vec<f64>,
    n: usize,
}

impl Chol {
    fn new(a: &[f64], n: usize) -> Option<Chol> {
        let mut l = a.to_vec();
        for j in 0..n {
            let mut d = l[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= 0.0 || !d.is_finite() {
                return None;
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in j + 1..n {
                let mut s = l[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / dj;
            }
            for k in j + 1..n {
                l[j * n + k] = 0.0;
            }
        }
        Some(Chol { l, n })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }
}

fn se_kernel(x1: f64, x2: f64, sf2: f64, ls: f64) -> f64 {
    let d = (x1 - x2) / ls;
    sf2 * (-0.5 * d * d).exp()
}

/// Fit the GP and return the posterior mean and its analytic derivative.
///
/// The curve is first de-trended with an ordinary least-squares line in
/// log10(t); a zero-mean squared-exponential GP is fit to the residuals.
/// The posterior-mean derivative is the trend slope plus the analytic
/// kernel derivative applied to the residual weights (never finite
/// differences of the fit). Points with t = 0 cannot live on the log axis
/// and are skipped.
pub fn smooth_curve(curve: &LlcCurve, length_scale: f64, noise: NoiseSpec) -> Result<SmoothedCurve> {
    curve.validate()?;
    let pts: Vec<&CurvePoint> = curve.points.iter().filter(|p| p.step > 0).collect();
    let n = pts.len();
    if n < 5 {
        return Err(CoreError::shape(format!(
            "need at least 5 points with t > 0 for smoothing, have {n}"
        )));
    }
    if !(length_scale > 0.0) {
        return Err(CoreError::config("analysis.gp_length_scale", "must be > 0"));
    }
    let xs: Vec<f64> = pts.iter().map(|p| (p.step as f64).log10()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.lambda_hat).collect();

    // OLS trend in log10(t)
    let xbar = xs.iter().sum::<f64>() / n as f64;
    let ybar = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ybar - slope * xbar;
    let resid: Vec<f64> = ys
        .iter()
        .zip(&xs)
        .map(|(y, x)| y - intercept - slope * x)
        .collect();

    // signal variance from the de-trended curve, so the prior is scale-free
    let var_r = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let sf2 = var_r.max(1e-12);

    let noise_var: Vec<f64> = match noise {
        NoiseSpec::Scalar(v) => vec![v.max(0.0); n],
        NoiseSpec::FromCurveStd { floor } => pts
            .iter()
            .map(|p| (p.std * p.std).max(floor.max(0.0)))
            .collect(),
    };

    // K + diag(noise + relative floor), jitter retries on singularity
    let mut kmat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            kmat[i * n + j] = se_kernel(xs[i], xs[j], sf2, length_scale);
        }
    }
    let base_jitter = sf2 * 1e-8;
    let mut chol = None;
    let mut jitter = base_jitter;
    const MAX_JITTER_RETRIES: usize = 6;
    for _ in 0..=MAX_JITTER_RETRIES {
        let mut a = kmat.clone();
        for i in 0..n {
            a[i * n + i] += noise_var[i] + jitter;
        }
        if let Some(c) = Chol::new(&a, n) {
            chol = Some(c);
            break;
        }
        jitter *= 10.0;
    }
    let chol = chol.ok_or(CoreError::SingularKernel {
        retries: MAX_JITTER_RETRIES,
    })?;
    let alpha = chol.solve(&resid);

    let mut mean = Vec::with_capacity(n);
    let mut deriv = Vec::with_capacity(n);
    let mut deriv_std = Vec::with_capacity(n);
    for &x in xs.iter() {
        let mut m = intercept + slope * x;
        let mut dm = slope;
        // c_j = dk(x, x_j)/dx = -(x - x_j)/ls^2 * k(x, x_j)
        let mut c = vec![0.0; n];
        for j in 0..n {
            let k = se_kernel(x, xs[j], sf2, length_scale);
            m += k * alpha[j];
            let dk = -(x - xs[j]) / (length_scale * length_scale) * k;
            c[j] = dk;
            dm += dk * alpha[j];
        }
        // Var[f'(x)] = d²k/dx dx'|_(x,x) − c' K⁻¹ c, trend treated as fixed
        let kinv_c = chol.solve(&c);
        let ctkc: f64 = c.iter().zip(&kinv_c).map(|(a, b)| a * b).sum();
        let var = (sf2 / (length_scale * length_scale) - ctkc).max(0.0);
        mean.push(m);
        deriv.push(dm);
        deriv_std.push(var.sqrt());
    }

    Ok(SmoothedCurve {
        steps: pts.iter().map(|p| p.step).collect(),
        x: xs,
        mean,
        derivative: deriv,
        derivative_std: deriv_std,
    })
}

/// Kind of plateau a boundary sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    ZeroCrossing,
    SaddlePlateau,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageBoundary {
    pub step: u64,
    pub kind: BoundaryKind,
    pub derivative_value: f64,
}

/// Tolerance below which a local minimum of |derivative| counts as a
/// plateau.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tolerance {
    /// Fraction of the curve's max |derivative|; the scale-free default.
    Relative(f64),
    Absolute(f64),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Relative(0.05)
    }
}

/// Boundaries are approximate zeros of the smoothed derivative:
/// sign changes, plus plateau regions where |derivative| stays under the
/// tolerance. A contiguous sub-tolerance region yields one boundary (the
/// local minimum of |derivative| inside it), and only when the derivative
/// climbs back above tolerance on both sides; regions running off the
/// ends of the grid are the curve's tails, not stage boundaries.
pub fn detect_boundaries(smoothed: &SmoothedCurve, tolerance: Tolerance) -> Vec<StageBoundary> {
    let d = &smoothed.derivative;
    let n = d.len();
    if n < 3 {
        return Vec::new();
    }
    let max_abs = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = match tolerance {
        Tolerance::Relative(f) => f * max_abs,
        Tolerance::Absolute(a) => a,
    };

    let mut boundaries: Vec<(usize, StageBoundary)> = Vec::new();

    // bracketed sub-tolerance regions -> one plateau each
    let mut i = 0;
    while i < n {
        if d[i].abs() < tol {
            let start = i;
            while i < n && d[i].abs() < tol {
                i += 1;
            }
            let end = i; // exclusive
            if start > 0 && end < n {
                let idx = (start..end)
                    .min_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()))
                    .expect("nonempty region");
                let has_sign_change = (start.saturating_sub(1)..end.min(n - 1))
                    .any(|j| d[j] == 0.0 || d[j] * d[j + 1] < 0.0);
                boundaries.push((
                    idx,
                    StageBoundary {
                        step: smoothed.steps[idx],
                        kind: if has_sign_change {
                            BoundaryKind::ZeroCrossing
                        } else {
                            BoundaryKind::SaddlePlateau
                        },
                        derivative_value: d[idx],
                    },
                ));
            }
        } else {
            i += 1;
        }
    }

    // sign changes outside any sub-tolerance region (steep crossings)
    for i in 0..n - 1 {
        if d[i] * d[i + 1] < 0.0 && d[i].abs() >= tol && d[i + 1].abs() >= tol {
            let idx = if d[i].abs() <= d[i + 1].abs() { i } else { i + 1 };
            boundaries.push((
                idx,
                StageBoundary {
                    step: smoothed.steps[idx],
                    kind: BoundaryKind::ZeroCrossing,
                    derivative_value: d[idx],
                },
            ));
        }
    }

    boundaries.sort_by_key(|(i, _)| *i);
    // merge boundaries within one checkpoint of each other
    let mut out: Vec<(usize, StageBoundary)> = Vec::new();
    for (i, b) in boundaries {
        match out.last() {
            Some((j, prev)) if i <= j + 1 => {
                if b.derivative_value.abs() < prev.derivative_value.abs() {
                    out.pop();
                    out.push((i, b));
                }
            }
            _ => out.push((i, b)),
        }
    }
    out.into_iter().map(|(_, b)| b).collect()
}

/// One developmental stage: the interval ending at `end_step`.
#[derive(Clone, Debug, Serialize)]
pub struct StageRow {
    pub stage: usize,
    pub end_step: u64,
    pub delta_loss: Option<f64>,
    pub delta_llc: f64,
}

/// Summarize stages as consecutive intervals between boundaries, with
/// deltas taken from the raw (unsmoothed) series at the interval ends.
/// The final checkpoint always closes the last stage.
pub fn stage_table(curve: &LlcCurve, boundaries: &[StageBoundary]) -> Vec<StageRow> {
    if curve.points.is_empty() {
        return Vec::new();
    }
    let last_step = curve.points.last().unwrap().step;
    let mut ends: Vec<u64> = boundaries.iter().map(|b| b.step).collect();
    if ends.last() != Some(&last_step) {
        ends.push(last_step);
    }
    let value_at = |step: u64| -> &CurvePoint {
        curve
            .points
            .iter()
            .min_by_key(|p| p.step.abs_diff(step))
            .unwrap()
    };
    let mut rows = Vec::new();
    let mut prev = &curve.points[0];
    for (i, &end) in ends.iter().enumerate() {
        let cur = value_at(end);
        rows.push(StageRow {
            stage: i + 1,
            end_step: end,
            delta_loss: match (prev.loss, cur.loss) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            },
            delta_llc: cur.lambda_hat - prev.lambda_hat,
        });
        prev = cur;
    }
    rows
}

/// Human-readable stage table in the End-t / delta-loss / delta-LLC layout.
pub fn render_stage_table(rows: &[StageRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<8}{:>12}{:>14}{:>14}\n",
        "Stage", "End t", "Δloss", "Δλ̂"
    ));
    for r in rows {
        let dl = r
            .delta_loss
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<8}{:>12}{:>14}{:>14}\n",
            format!("S{}", r.stage),
            r.end_step,
            dl,
            format_sig3(r.delta_llc),
        ));
    }
    s
}

/// Three significant digits, matching the published table style.
fn format_sig3(v: f64) -> String {
    if v == 0.0 {
        return "+0.00".into();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (2 - mag).max(0) as usize;
    format!("{v:+.decimals$}")
}

// ---------------------------------------------------------------------------
// Hessian statistics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct HessianStats {
    pub trace: f64,
    pub trace_stderr: f64,
    pub max_eigenvalue: f64,
    pub power_residual: f64,
    pub power_converged: bool,
    pub hutchinson_samples: usize,
    pub power_iterations: usize,
}

/// Hutchinson trace estimate with Rademacher probes plus power iteration
/// for the dominant eigenvalue, both on top of matrix-free Hessian-vector
/// products.
pub fn hessian_stats<M: DifferentiableLoss>(
    model: &M,
    params: &[f64],
    batch: &M::Batch,
    hutchinson_samples: usize,
    power_iters: usize,
    seed: u64,
) -> Result<HessianStats> {
    if hutchinson_samples < 10 {
        return Err(CoreError::config(
            "hutchinson_samples",
            "need at least 10 probes",
        ));
    }
    if power_iters < 50 {
        return Err(CoreError::config("power_iters", "need at least 50 iterations"));
    }
    let d = params.len();

    // trace: z' H z over Rademacher z has expectation tr(H)
    let estimates = crate::par::map_indexed(hutchinson_samples, |i| -> Result<f64> {
        let mut rng = RngKey::new(seed, Stream::Probe, i as u64, 0).rng();
        let z: Vec<f64> = (0..d)
            .map(|_| if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { -1.0 })
            .collect();
        let hz = hvp_flat(model, params, batch, &z)?;
        Ok(z.iter().zip(&hz).map(|(a, b)| a * b).sum())
    });
    let mut vals = Vec::with_capacity(hutchinson_samples);
    for e in estimates {
        vals.push(e?);
    }
    let trace = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - trace).powi(2)).sum::<f64>()
        / (vals.len().saturating_sub(1)).max(1) as f64;
    let trace_stderr = (var / vals.len() as f64).sqrt();

    // power iteration with deflation-free restarts: fresh random starts,
    // keep the largest |Rayleigh quotient| that converged
    let mut best: Option<(f64, f64, bool)> = None; // (rayleigh, residual, converged)
    const RESTARTS: u64 = 3;
    for restart in 0..RESTARTS {
        let mut v = standard_normal_vec(RngKey::new(seed, Stream::Probe, 1000 + restart, 0), d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        let mut ray = 0.0;
        let mut residual = f64::INFINITY;
        for _ in 0..power_iters {
            let hv = hvp_flat(model, params, batch, &v)?;
            ray = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
            let hv_norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if hv_norm < 1e-300 {
                // H v = 0: v is in the kernel; the dominant eigenvalue of a
                // zero operator restricted to this start is 0
                ray = 0.0;
                residual = 0.0;
                break;
            }
            residual = hv
                .iter()
                .zip(&v)
                .map(|(h, vi)| (h - ray * vi).powi(2))
                .sum::<f64>()
                .sqrt();
            for (x, h) in v.iter_mut().zip(&hv) {
                *x = h / hv_norm;
            }
            if residual <= 1e-9 * ray.abs().max(1e-12) {
                break;
            }
        }
        let converged = residual <= 1e-6 * ray.abs().max(1e-12);
        let better = match best {
            None => true,
            Some((r, _, c)) => {
                (converged && !c) || (converged == c && ray.abs() > r.abs())
            }
        };
        if better {
            best = Some((ray, residual, converged));
        }
        // restarts guard against a start vector orthogonal to the dominant
        // eigenspace; once a run converges there is nothing left to find
        if converged {
            break;
        }
    }
    let (max_eigenvalue, power_residual, power_converged) = best.expect("restarts ran");

    Ok(HessianStats {
        trace,
        trace_stderr,
        max_eigenvalue,
        power_residual,
        power_converged,
        hutchinson_samples,
        power_iterations: power_iters,
    })
}

// ---------------------------------------------------------------------------
// Free-energy crossover
// ---------------------------------------------------------------------------

/// A local minimum entering the free-energy competition
/// F_n = n·loss + llc·log n.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FreeEnergyMinimum {
    pub loss: f64,
    pub llc: f64,
    pub label: String,
}

/// Outcome of the two-minimum free-energy comparison over n >= 2.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n_crit")]
pub enum Crossover {
    /// w2's neighborhood drops below w1's at this sample size and stays
    /// below.
    At(f64),
    /// w1 preferred at every n >= 2.
    AlwaysW1,
    /// w2 preferred at every n >= 2.
    AlwaysW2,
    /// w2 preferred from n = 2 but permanently loses at this sample size
    /// (possible only when w2 has both higher loss and lower LLC).
    W2UntilN(f64),
}

/// Solve n·(l1 − l2) = (λ2 − λ1)·log n for the crossover where
/// F_n(W2) permanently drops below F_n(W1); lower-order terms dropped.
pub fn free_energy_crossover(w1: &FreeEnergyMinimum, w2: &FreeEnergyMinimum) -> Crossover {
    let dl = w1.loss - w2.loss; // > 0 when w2 is more accurate
    let dlam = w2.llc - w1.llc; // > 0 when w2 is less degenerate
    // h(n) = F_n(W1) − F_n(W2) = dl·n − dlam·ln n; w2 preferred when h > 0
    let h = |n: f64| dl * n - dlam * n.ln();
    const N_MIN: f64 = 2.0;

    if dl == 0.0 {
        return if dlam > 0.0 {
            Crossover::AlwaysW1
        } else if dlam < 0.0 {
            Crossover::AlwaysW2
        } else {
            // identical minima: treat as w2-never-preferred
            Crossover::AlwaysW1
        };
    }
    if dl > 0.0 && dlam <= 0.0 {
        return Crossover::AlwaysW2;
    }
    if dl < 0.0 && dlam >= 0.0 {
        return Crossover::AlwaysW1;
    }

    if dl > 0.0 {
        // dlam > 0: h is convex with minimum at n0 = dlam/dl and h -> +inf
        let n0 = dlam / dl;
        if n0 <= N_MIN || h(n0) >= 0.0 {
            if h(N_MIN) >= 0.0 {
                return Crossover::AlwaysW2;
            }
            // minimum left of 2 but h(2) < 0: single upward root right of 2
            return Crossover::At(bisect_up(h, N_MIN, grow_until_positive(h, N_MIN)));
        }
        // h(n0) < 0: the upward crossing right of n0 is where w2 wins for good
        let hi = grow_until_positive(h, n0);
        Crossover::At(bisect_up(h, n0, hi))
    } else {
        // dl < 0, dlam < 0: h(n) = |dlam|·ln n − |dl|·n is concave with a
        // maximum at n0 = dlam/dl and h -> -inf; w2 can only hold a window
        let n0 = (dlam / dl).max(N_MIN);
        if h(N_MIN) > 0.0 {
            // window already open at n = 2; report where it closes
            let hi = {
                let mut hi = n0.max(4.0);
                while h(hi) > 0.0 && hi < 1e300 {
                    hi *= 2.0;
                }
                hi
            };
            let exit = bisect_up(|n| -h(n), n0, hi);
            return Crossover::W2UntilN(exit);
        }
        if h(n0) <= 0.0 {
            return Crossover::AlwaysW1;
        }
        // h(2) <= 0 < h(n0): upward crossing in (2, n0)
        Crossover::At(bisect_up(h, N_MIN, n0))
    }
}

fn grow_until_positive(h: impl Fn(f64) -> f64, lo: f64) -> f64 {
    let mut hi = lo.max(4.0) * 2.0;
    while h(hi) <= 0.0 && hi < 1e300 {
        hi *= 2.0;
    }
    hi
}

/// Bisection for the upward root of h on [lo, hi] with h(lo) <= 0 < h(hi).
fn bisect_up(h: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-9 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Synthetic staircase fixtures
// ---------------------------------------------------------------------------

/// A staircase LLC curve on a log-spaced checkpoint grid: `plateaus + 1`
/// sigmoid rises in log10(t) separated by flats. Returns the curve and the
/// planted boundary indices (the flat midpoints between rises).
pub fn staircase_fixture(
    n_points: usize,
    t_min: f64,
    t_max: f64,
    plateaus: usize,
    rise_width: f64,
    noise_std: f64,
    seed: u64,
) -> (LlcCurve, Vec<usize>) {
    assert!(plateaus >= 1 && n_points >= 16);
    let (a, b) = (t_min.log10(), t_max.log10());
    let xs: Vec<f64> = (0..n_points)
        .map(|i| a + (b - a) * i as f64 / (n_points - 1) as f64)
        .collect();
    let rises = plateaus + 1;
    // rise centers evenly spread with margins at both ends
    let centers: Vec<f64> = (0..rises)
        .map(|j| a + (b - a) * (0.08 + 0.84 * j as f64 / (rises - 1) as f64))
        .collect();
    let amps: Vec<f64> = (0..rises).map(|j| 8.0 + 1.5 * (j % 3) as f64).collect();
    let noise = if noise_std > 0.0 {
        standard_normal_vec(RngKey::new(seed, Stream::Fixture, 0, 0), n_points)
    } else {
        vec![0.0; n_points]
    };
    let value = |x: f64| -> f64 {
        centers
            .iter()
            .zip(&amps)
            .map(|(c, amp)| amp / (1.0 + (-(x - c) / rise_width).exp()))
            .sum()
    };
    // steps are integers; evaluate at the realized log10(step) so the
    // fixture is exactly consistent with the curve's own axis
    let steps: Vec<u64> = xs.iter().map(|&x| 10f64.powf(x).round() as u64).collect();
    let grid: Vec<f64> = steps.iter().map(|&s| (s as f64).log10()).collect();
    let points: Vec<CurvePoint> = grid
        .iter()
        .enumerate()
        .map(|(i, &x)| CurvePoint {
            step: steps[i],
            lambda_hat: value(x) + noise_std * noise[i],
            std: noise_std.max(1e-4),
            loss: None,
        })
        .collect();
    // planted boundaries: argmin of the true |derivative| between rises
    let deriv = |x: f64| -> f64 {
        centers
            .iter()
            .zip(&amps)
            .map(|(c, amp)| {
                let s = 1.0 / (1.0 + (-(x - c) / rise_width).exp());
                amp * s * (1.0 - s) / rise_width
            })
            .sum()
    };
    let mut planted = Vec::new();
    for w in centers.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let idx = grid
            .iter()
            .enumerate()
            .filter(|(_, &x)| x > lo && x < hi)
            .min_by(|(_, &xa), (_, &xb)| deriv(xa).abs().total_cmp(&deriv(xb).abs()))
            .map(|(i, _)| i)
            .expect("grid covers the flat");
        planted.push(idx);
    }
    (LlcCurve { points, gaps: Vec::new() }, planted)
}
