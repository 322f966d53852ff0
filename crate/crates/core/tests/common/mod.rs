//! Independent numerical oracles shared by the integration suites.
//! Everything here is deliberately brute-force and never reuses the
//! implementation path it is checking.

use dgsc_core::model::DifferentiableLoss;

/// Central finite-difference gradient with step h.
pub fn fd_grad<M: DifferentiableLoss>(model: &M, params: &[f64], batch: &M::Batch, h: f64) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    let mut w = params.to_vec();
    for i in 0..params.len() {
        let p0 = w[i];
        w[i] = p0 + h;
        let up = model.eval_loss(&w, batch).unwrap();
        w[i] = p0 - h;
        let dn = model.eval_loss(&w, batch).unwrap();
        w[i] = p0;
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

/// Dense Hessian assembled column by column from double central finite
/// differences of the loss.
pub fn fd_dense_hessian<M: DifferentiableLoss>(
    model: &M,
    params: &[f64],
    batch: &M::Batch,
    h: f64,
) -> Vec<Vec<f64>> {
    let d = params.len();
    let mut hess = vec![vec![0.0; d]; d];
    let mut w = params.to_vec();
    let f0 = model.eval_loss(&w, batch).unwrap();
    for i in 0..d {
        for j in i..d {
            let (pi, pj) = (params[i], params[j]);
            let val = if i == j {
                w[i] = pi + h;
                let fp = model.eval_loss(&w, batch).unwrap();
                w[i] = pi - h;
                let fm = model.eval_loss(&w, batch).unwrap();
                w[i] = pi;
                (fp - 2.0 * f0 + fm) / (h * h)
            } else {
                w[i] = pi + h;
                w[j] = pj + h;
                let fpp = model.eval_loss(&w, batch).unwrap();
                w[j] = pj - h;
                let fpm = model.eval_loss(&w, batch).unwrap();
                w[i] = pi - h;
                w[j] = pj + h;
                let fmp = model.eval_loss(&w, batch).unwrap();
                w[j] = pj - h;
                let fmm = model.eval_loss(&w, batch).unwrap();
                w[i] = pi;
                w[j] = pj;
                (fpp - fpm - fmp + fmm) / (4.0 * h * h)
            };
            hess[i][j] = val;
            hess[j][i] = val;
        }
    }
    hess
}

pub fn assert_close(got: &[f64], want: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let tol = atol + rtol * w.abs().max(g.abs());
        assert!((g - w).abs() <= tol, "{what}[{i}]: {g} vs {w} (tol {tol})");
    }
}
