//! Analytic toy losses with exactly known local learning coefficients.
//!
//! These serve as golden references: the volume-scaling oracle and the
//! SGLD estimator must both recover the known exponents. Gradients are
//! analytic so the estimator's noise budget is attributable to SGLD alone.

use crate::error::{CoreError, Result};
use crate::model::DifferentiableLoss;
use crate::params::Layout;
use crate::scalar::Scalar;
use std::sync::Arc;

/// Exact positive rational, kept unreduced for display.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    pub const fn new(num: u32, den: u32) -> Self {
        Rational { num, den }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Rational {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// The potential families shipped with the crate.
#[derive(Clone, Debug, PartialEq)]
pub enum PotentialKind {
    /// l1: w1² + w2²
    Quadratic2,
    /// l2: w1⁴ + w2⁴
    Quartic2,
    /// l3: w1²·w2⁴
    ProductDegenerate,
    /// l4: (w1−1)²·(w1²+w2²)⁴, treated at the origin
    ShellProduct,
    /// l5: a·w1² + b·w2² + c·w3²
    Anisotropic3 { a: f64, b: f64, c: f64 },
    /// l6: w1² + w2² + 0·w3 (one unused coordinate)
    FlatDirection3,
    /// l7: w1² + w2⁴ + w3⁴
    MixedOrder3,
    /// Σᵢ wᵢ² in d dimensions (λ = d/2)
    IsoQuadratic { d: usize },
}

/// An analytic loss with a known LLC at its reference point.
#[derive(Clone, Debug)]
pub struct AnalyticPotential {
    pub name: String,
    pub dim: usize,
    pub kind: PotentialKind,
    pub known_llc: Rational,
    pub known_multiplicity: u32,
    /// The degenerate minimum the LLC refers to.
    pub reference_point: Vec<f64>,
    /// Ball radius for which the reference point is the maximally
    /// degenerate minimum inside the ball.
    pub default_ball_radius: f64,
}

impl AnalyticPotential {
    pub fn eval<S: Scalar>(&self, w: &[S]) -> S {
        debug_assert_eq!(w.len(), self.dim);
        match &self.kind {
            PotentialKind::Quadratic2 => w[0] * w[0] + w[1] * w[1],
            PotentialKind::Quartic2 => {
                w[0] * w[0] * w[0] * w[0] + w[1] * w[1] * w[1] * w[1]
            }
            PotentialKind::ProductDegenerate => w[0] * w[0] * w[1] * w[1] * w[1] * w[1],
            PotentialKind::ShellProduct => {
                let s = w[0] - S::one();
                let r2 = w[0] * w[0] + w[1] * w[1];
                let r8 = r2 * r2 * r2 * r2;
                s * s * r8
            }
            PotentialKind::Anisotropic3 { a, b, c } => {
                S::from_f64(*a) * w[0] * w[0]
                    + S::from_f64(*b) * w[1] * w[1]
                    + S::from_f64(*c) * w[2] * w[2]
            }
            PotentialKind::FlatDirection3 => w[0] * w[0] + w[1] * w[1],
            PotentialKind::MixedOrder3 => {
                w[0] * w[0]
                    + w[1] * w[1] * w[1] * w[1]
                    + w[2] * w[2] * w[2] * w[2]
            }
            PotentialKind::IsoQuadratic { .. } => {
                let mut acc = S::zero();
                for &x in w {
                    acc += x * x;
                }
                acc
            }
        }
    }

    pub fn grad<S: Scalar>(&self, w: &[S], out: &mut [S]) {
        debug_assert_eq!(w.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        let two = S::from_f64(2.0);
        let four = S::from_f64(4.0);
        match &self.kind {
            PotentialKind::Quadratic2 => {
                out[0] = two * w[0];
                out[1] = two * w[1];
            }
            PotentialKind::Quartic2 => {
                out[0] = four * w[0] * w[0] * w[0];
                out[1] = four * w[1] * w[1] * w[1];
            }
            PotentialKind::ProductDegenerate => {
                let w1 = w[0];
                let w2 = w[1];
                let w2p3 = w2 * w2 * w2;
                out[0] = two * w1 * w2p3 * w2;
                out[1] = four * w1 * w1 * w2p3;
            }
            PotentialKind::ShellProduct => {
                let s = w[0] - S::one();
                let r2 = w[0] * w[0] + w[1] * w[1];
                let r6 = r2 * r2 * r2;
                let r8 = r6 * r2;
                // d/dw1 = 2s·r8 + s²·8·r6·w1 ; d/dw2 = s²·8·r6·w2
                out[0] = two * s * r8 + s * s * S::from_f64(8.0) * r6 * w[0];
                out[1] = s * s * S::from_f64(8.0) * r6 * w[1];
            }
            PotentialKind::Anisotropic3 { a, b, c } => {
                out[0] = two * S::from_f64(*a) * w[0];
                out[1] = two * S::from_f64(*b) * w[1];
                out[2] = two * S::from_f64(*c) * w[2];
            }
            PotentialKind::FlatDirection3 => {
                out[0] = two * w[0];
                out[1] = two * w[1];
                out[2] = S::zero();
            }
            PotentialKind::MixedOrder3 => {
                out[0] = two * w[0];
                out[1] = four * w[1] * w[1] * w[1];
                out[2] = four * w[2] * w[2] * w[2];
            }
            PotentialKind::IsoQuadratic { .. } => {
                for (o, &x) in out.iter_mut().zip(w) {
                    *o = two * x;
                }
            }
        }
    }
}

/// Construct l5 with given positive curvatures; the LLC is 3/2 regardless.
pub fn anisotropic3(a: f64, b: f64, c: f64) -> AnalyticPotential {
    AnalyticPotential {
        name: "l5".into(),
        dim: 3,
        kind: PotentialKind::Anisotropic3 { a, b, c },
        known_llc: Rational::new(3, 2),
        known_multiplicity: 1,
        reference_point: vec![0.0; 3],
        default_ball_radius: 1.0,
    }
}

/// d-dimensional isotropic quadratic with λ = d/2.
pub fn iso_quadratic(d: usize) -> AnalyticPotential {
    AnalyticPotential {
        name: format!("quad{d}"),
        dim: d,
        kind: PotentialKind::IsoQuadratic { d },
        known_llc: Rational::new(d as u32, 2),
        known_multiplicity: 1,
        reference_point: vec![0.0; d],
        default_ball_radius: 1.0,
    }
}

/// The built-in example potentials, l1 through l7.
pub fn builtin_potentials() -> Vec<AnalyticPotential> {
    vec![
        AnalyticPotential {
            name: "l1".into(),
            dim: 2,
            kind: PotentialKind::Quadratic2,
            known_llc: Rational::new(1, 1),
            known_multiplicity: 1,
            reference_point: vec![0.0; 2],
            default_ball_radius: 1.0,
        },
        AnalyticPotential {
            name: "l2".into(),
            dim: 2,
            kind: PotentialKind::Quartic2,
            known_llc: Rational::new(1, 2),
            known_multiplicity: 1,
            reference_point: vec![0.0; 2],
            default_ball_radius: 1.0,
        },
        AnalyticPotential {
            name: "l3".into(),
            dim: 2,
            kind: PotentialKind::ProductDegenerate,
            known_llc: Rational::new(1, 4),
            known_multiplicity: 1,
            reference_point: vec![0.0; 2],
            default_ball_radius: 1.0,
        },
        // The reference point is the origin (the octic minimum), not the
        // quadratic valley at w1 = 1; the ball radius keeps that valley out.
        AnalyticPotential {
            name: "l4".into(),
            dim: 2,
            kind: PotentialKind::ShellProduct,
            known_llc: Rational::new(1, 4),
            known_multiplicity: 1,
            reference_point: vec![0.0; 2],
            default_ball_radius: 0.5,
        },
        anisotropic3(1.0, 1.0, 1.0),
        AnalyticPotential {
            name: "l6".into(),
            dim: 3,
            kind: PotentialKind::FlatDirection3,
            known_llc: Rational::new(1, 1),
            known_multiplicity: 1,
            reference_point: vec![0.0; 3],
            default_ball_radius: 1.0,
        },
        AnalyticPotential {
            name: "l7".into(),
            dim: 3,
            kind: PotentialKind::MixedOrder3,
            known_llc: Rational::new(1, 1),
            known_multiplicity: 1,
            reference_point: vec![0.0; 3],
            default_ball_radius: 1.0,
        },
    ]
}

/// Look up a potential by name: `l1`..`l7`, or `quadN` for the
/// N-dimensional isotropic quadratic.
pub fn potential_by_name(name: &str) -> Result<AnalyticPotential> {
    if let Some(p) = builtin_potentials().into_iter().find(|p| p.name == name) {
        return Ok(p);
    }
    if let Some(d) = name.strip_prefix("quad").and_then(|s| s.parse::<usize>().ok()) {
        if d >= 1 {
            return Ok(iso_quadratic(d));
        }
    }
    Err(CoreError::config(
        "potential",
        format!("unknown potential `{name}` (expected l1..l7 or quadN)"),
    ))
}

/// Dummy batch for potential models; evaluation ignores its contents.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticBatch {
    pub draw: u64,
}

/// Adapter presenting an [`AnalyticPotential`] through the estimator
/// interface. The "empirical" loss equals the analytic loss for every
/// batch; `synthetic_n` plays the role of the sample count n in nβ.
pub struct PotentialModel {
    pub potential: AnalyticPotential,
    pub synthetic_n: u64,
    layout: Arc<Layout>,
}

/// Adapt a potential to the loss-model interface.
pub fn as_loss_model(potential: AnalyticPotential, synthetic_n: u64) -> PotentialModel {
    let layout = Arc::new(Layout::new(vec![("w".into(), vec![potential.dim])]).unwrap());
    PotentialModel {
        potential,
        synthetic_n,
        layout,
    }
}

impl DifferentiableLoss for PotentialModel {
    type Batch = SyntheticBatch;

    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn eval_grad<S: Scalar>(
        &self,
        params: &[S],
        _batch: &SyntheticBatch,
        grad_out: &mut [S],
    ) -> Result<S> {
        if params.len() != self.potential.dim {
            return Err(CoreError::shape(format!(
                "potential `{}` has dim {}, got {} parameters",
                self.potential.name,
                self.potential.dim,
                params.len()
            )));
        }
        self.potential.grad(params, grad_out);
        let loss = self.potential.eval(params);
        if !loss.is_finite_value() {
            return Err(CoreError::NonFinite { location: "w".into() });
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{assert_close_rel, fd_grad};
    use crate::model::{hvp, value_and_grad};
    use crate::params::ParameterVector;
    use crate::rng::{standard_normal_vec, RngKey, Stream};

    #[test]
    fn known_llcs_match_published_values() {
        let ps = builtin_potentials();
        let get = |n: &str| ps.iter().find(|p| p.name == n).unwrap();
        assert_eq!(get("l1").known_llc.to_f64(), 1.0);
        assert_eq!(get("l2").known_llc.to_f64(), 0.5);
        assert_eq!(get("l3").known_llc.to_f64(), 0.25);
        assert_eq!(get("l4").known_llc.to_f64(), 0.25);
        assert_eq!(get("l5").known_llc.to_f64(), 1.5);
        assert_eq!(get("l6").known_llc.to_f64(), 1.0);
        // 1/2 + 1/4 + 1/4 = 1
        assert_eq!(get("l7").known_llc.to_f64(), 1.0);
        for p in &ps {
            assert_eq!(p.known_multiplicity, 1);
            assert!(p.known_llc.to_f64() <= p.dim as f64 / 2.0);
        }
    }

    #[test]
    fn reference_points_are_critical() {
        for p in builtin_potentials() {
            let w = p.reference_point.clone();
            let loss: f64 = p.eval(&w);
            assert_eq!(loss, 0.0, "{}: loss at reference point", p.name);
            let mut g = vec![0.0; p.dim];
            p.grad(&w, &mut g);
            assert!(g.iter().all(|&x| x == 0.0), "{}: grad at reference point", p.name);
        }
    }

    #[test]
    fn l5_llc_independent_of_curvatures() {
        let mut rng_vals = standard_normal_vec(RngKey::new(5, Stream::Fixture, 0, 0), 15);
        for chunk in rng_vals.chunks_mut(3) {
            let (a, b, c) = (chunk[0].abs() + 0.1, chunk[1].abs() + 0.1, chunk[2].abs() + 0.1);
            let p = anisotropic3(a, b, c);
            assert_eq!(p.known_llc, Rational::new(3, 2));
        }
    }

    #[test]
    fn adapter_matches_analytic_values() {
        // l1 at (0.3, 0.4): loss 0.25, grad (0.6, 0.8)
        let p = builtin_potentials().into_iter().find(|p| p.name == "l1").unwrap();
        let m = as_loss_model(p, 10_000);
        let params = ParameterVector::new(vec![0.3, 0.4], m.layout.clone()).unwrap();
        let r = value_and_grad(&m, &params, &SyntheticBatch { draw: 0 }).unwrap();
        assert!((r.loss - 0.25).abs() < 1e-15);
        assert_close_rel(&r.grad, &[0.6, 0.8], 1e-14, 1e-15, "l1 grad");
    }

    #[test]
    fn quartic_critical_point_at_origin() {
        let p = builtin_potentials().into_iter().find(|p| p.name == "l2").unwrap();
        let m = as_loss_model(p, 1);
        let params = ParameterVector::new(vec![0.0, 0.0], m.layout.clone()).unwrap();
        let r = value_and_grad(&m, &params, &SyntheticBatch::default()).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn evaluation_independent_of_batch_draw() {
        let p = builtin_potentials().into_iter().find(|p| p.name == "l3").unwrap();
        let m = as_loss_model(p, 100);
        let params = ParameterVector::new(vec![0.7, -0.2], m.layout.clone()).unwrap();
        let a = value_and_grad(&m, &params, &SyntheticBatch { draw: 1 }).unwrap();
        let b = value_and_grad(&m, &params, &SyntheticBatch { draw: 2 }).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 20 random points per potential, rel tol 1e-4 per coordinate.
        for p in builtin_potentials() {
            let m = as_loss_model(p.clone(), 1);
            for i in 0..20 {
                let w = standard_normal_vec(RngKey::new(11, Stream::Fixture, i, 0), p.dim);
                let got = value_and_grad_at(&m, &w);
                let want = fd_grad(&m, &w, &SyntheticBatch::default(), 1e-4);
                assert_close_rel(&got, &want, 1e-4, 1e-6, &format!("{} fd", p.name));
            }
        }
    }

    fn value_and_grad_at(m: &PotentialModel, w: &[f64]) -> Vec<f64> {
        crate::model::value_and_grad_flat(m, w, &SyntheticBatch::default())
            .unwrap()
            .grad
    }

    #[test]
    fn degenerate_hessians_vanish_at_origin() {
        // l2 and l3 have identically zero Hessians at the origin; checked via
        // hvp against the basis vectors.
        for name in ["l2", "l3"] {
            let p = builtin_potentials().into_iter().find(|p| p.name == name).unwrap();
            let m = as_loss_model(p, 1);
            let params = ParameterVector::zeros(m.layout.clone());
            for i in 0..2 {
                let mut e = vec![0.0; 2];
                e[i] = 1.0;
                let h = hvp(&m, &params, &SyntheticBatch::default(), &e).unwrap();
                assert_eq!(h, vec![0.0, 0.0], "{name} basis {i}");
            }
        }
    }

    #[test]
    fn hvp_diagonal_quadratic() {
        // l(w) = a·w1² + b·w2² + c·w3², v = e1 -> 2a·e1
        let m = as_loss_model(anisotropic3(1.7, 0.4, 2.2), 1);
        let params = ParameterVector::new(vec![0.3, -0.9, 0.1], m.layout.clone()).unwrap();
        let h = hvp(&m, &params, &SyntheticBatch::default(), &[1.0, 0.0, 0.0]).unwrap();
        assert_close_rel(&h, &[3.4, 0.0, 0.0], 1e-14, 1e-14, "hvp e1");
    }

    #[test]
    fn hvp_is_linear() {
        let p = builtin_potentials().into_iter().find(|p| p.name == "l7").unwrap();
        let m = as_loss_model(p, 1);
        let w = standard_normal_vec(RngKey::new(3, Stream::Fixture, 0, 0), 3);
        let u = standard_normal_vec(RngKey::new(3, Stream::Fixture, 1, 0), 3);
        let v = standard_normal_vec(RngKey::new(3, Stream::Fixture, 2, 0), 3);
        let (alpha, beta) = (0.7, -1.3);
        let b = SyntheticBatch::default();
        let comb: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = crate::model::hvp_flat(&m, &w, &b, &comb).unwrap();
        let hu = crate::model::hvp_flat(&m, &w, &b, &u).unwrap();
        let hv = crate::model::hvp_flat(&m, &w, &b, &v).unwrap();
        let rhs: Vec<f64> = hu.iter().zip(&hv).map(|(a, b)| alpha * a + beta * b).collect();
        assert_close_rel(&lhs, &rhs, 1e-12, 1e-8, "hvp linearity");
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(potential_by_name("l3").unwrap().name, "l3");
        assert_eq!(potential_by_name("quad100").unwrap().dim, 100);
        assert!(potential_by_name("l9").is_err());
    }
}
