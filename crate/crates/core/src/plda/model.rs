//! Two-covariance PLDA, estimated in closed form: whiten the pooled
//! within-class covariance, rotate to diagonalize the whitened between-class
//! covariance. The latent map is `u' = Vt (u - m)`; in that space the
//! within-class covariance is the identity and the between-class covariance
//! is diag(psi). Scoring is the same-speaker versus independent-speakers
//! log-likelihood ratio, which factorizes per latent dimension.

use std::f64::consts::PI;

use super::linalg::{jacobi_eigen, mat_mul, mat_t_vec, mat_transpose, scatter_acc};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PldaModel {
    /// Global mean of the training embeddings.
    pub mean: Vec<f64>,
    /// Simultaneous diagonalizer (columns): `Vt phi_w V = I`,
    /// `Vt phi_b V = diag(psi)`.
    pub v: Vec<f64>,
    /// Feature-space transform `A = V^-T` (so `x = m + A u`).
    pub a: Vec<f64>,
    /// Between-class variances in the latent space, all non-negative.
    pub psi: Vec<f64>,
    pub dim: usize,
    /// Diagnostics: ridge applied to phi_w, negative psi clamped.
    pub regularized: bool,
    pub clamped: usize,
}

impl PldaModel {
    /// Latent coordinates of one embedding.
    pub fn to_latent(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "plda_to_latent",
                left: vec![self.dim],
                right: vec![u.len()],
            });
        }
        let centered: Vec<f64> = u.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(mat_t_vec(&self.v, self.dim, self.dim, &centered))
    }
}

/// Fit on labeled embeddings. Classes with one sample still shape the global
/// mean and the between-class covariance but are excluded from the pooled
/// within-class covariance.
pub fn fit_plda(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<PldaModel> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Config(format!(
            "need matching non-empty embeddings ({}) and labels ({})",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings[0].len();
    let n_classes = labels.iter().max().unwrap() + 1;
    let n = embeddings.len() as f64;

    let mut counts = vec![0usize; n_classes];
    let mut class_means = vec![vec![0.0; dim]; n_classes];
    let mut mean = vec![0.0; dim];
    for (x, &y) in embeddings.iter().zip(labels) {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "fit_plda",
                left: vec![dim],
                right: vec![x.len()],
            });
        }
        counts[y] += 1;
        for (m, v) in class_means[y].iter_mut().zip(x) {
            *m += v;
        }
        for (g, v) in mean.iter_mut().zip(x) {
            *g += v;
        }
    }
    let populated = counts.iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(Error::Config("PLDA needs at least 2 classes".into()));
    }
    for (m, &c) in class_means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);

    // Pooled within-class covariance over classes with >= 2 samples.
    let mut phi_w = vec![0.0; dim * dim];
    let mut n_within = 0.0;
    for (x, &y) in embeddings.iter().zip(labels) {
        if counts[y] >= 2 {
            scatter_acc(&mut phi_w, x, &class_means[y], 1.0);
            n_within += 1.0;
        }
    }
    if n_within == 0.0 {
        return Err(Error::Config(
            "PLDA needs at least one class with 2 or more samples".into(),
        ));
    }
    phi_w.iter_mut().for_each(|v| *v /= n_within);

    // Count-weighted covariance of class means, corrected by phi_w / mean
    // class size (the sample means carry 1/n_k of the within noise).
    let mut phi_b = vec![0.0; dim * dim];
    for (cm, &c) in class_means.iter().zip(&counts) {
        if c > 0 {
            scatter_acc(&mut phi_b, cm, &mean, c as f64 / n);
        }
    }
    let mean_class_size = n / populated as f64;
    for i in 0..dim * dim {
        phi_b[i] -= phi_w[i] / mean_class_size;
    }

    // Whiten phi_w, then diagonalize the whitened phi_b.
    let (w, regularized) = super::lda::whiten(&phi_w, dim)?;
    let wt_pb = mat_mul(&mat_transpose(&w, dim, dim), &phi_b, dim, dim, dim);
    let mut mmat = mat_mul(&wt_pb, &w, dim, dim, dim);
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (mmat[i * dim + j] + mmat[j * dim + i]);
            mmat[i * dim + j] = v;
            mmat[j * dim + i] = v;
        }
    }
    let eig = jacobi_eigen(&mmat, dim)?;

    let v = mat_mul(&w, &eig.vectors, dim, dim, dim);
    let mut clamped = 0;
    let psi: Vec<f64> = eig
        .values
        .iter()
        .map(|&x| {
            if x < 0.0 {
                clamped += 1;
                0.0
            } else {
                x
            }
        })
        .collect();

    // A = V^-T = U diag(l^1/2) R, where W = U diag(l^-1/2): recover from
    // the identity A = phi_w V (since Vt phi_w V = I).
    let a = mat_mul(
        &phi_w_plus_ridge(&phi_w, dim, regularized),
        &v,
        dim,
        dim,
        dim,
    );

    Ok(PldaModel {
        mean,
        v,
        a,
        psi,
        dim,
        regularized,
        clamped,
    })
}

fn phi_w_plus_ridge(phi_w: &[f64], dim: usize, regularized: bool) -> Vec<f64> {
    if !regularized {
        return phi_w.to_vec();
    }
    let trace: f64 = (0..dim).map(|i| phi_w[i * dim + i]).sum();
    let ridge = 1e-6 * trace / dim as f64;
    let mut out = phi_w.to_vec();
    for i in 0..dim {
        out[i * dim + i] += ridge;
    }
    out
}

fn log_normal_1d(x: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - x * x / (2.0 * var)
}

/// Log-likelihood ratio of "same class" against "independent classes" for a
/// pair of embeddings. Factorizes over latent dimensions; a dimension with
/// zero between-class variance carries no speaker information and
/// contributes exactly zero.
pub fn plda_llr(model: &PldaModel, u1: &[f64], u2: &[f64]) -> Result<f64> {
    let x = model.to_latent(u1)?;
    let y = model.to_latent(u2)?;
    let mut score = 0.0;
    for d in 0..model.dim {
        let psi = model.psi[d];
        if psi == 0.0 {
            continue;
        }
        let a = psi + 1.0;
        let b = psi;
        let det = a * a - b * b;
        let (xd, yd) = (x[d], y[d]);
        // Grouped so the arithmetic is symmetric in (x, y) down to the bit.
        let quad = (a * (xd * xd + yd * yd) - 2.0 * b * (xd * yd)) / det;
        let log_joint = -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad;
        let log_marginals = log_normal_1d(xd, a) + log_normal_1d(yd, a);
        score += log_joint - log_marginals;
    }
    if !score.is_finite() {
        return Err(Error::NonFinite("plda_llr"));
    }
    Ok(score)
}
