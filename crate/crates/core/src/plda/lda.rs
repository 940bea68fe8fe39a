//! Linear discriminant analysis via generalized eigendecomposition:
//! whiten the within-class scatter, then diagonalize the whitened
//! between-class scatter. Projection columns are ordered by descending
//! between/within discriminability.

use super::linalg::{jacobi_eigen, mat_mul, mat_t_vec, scatter_acc};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LdaTransform {
    pub mean: Vec<f64>,
    /// `emb_dim x lda_dim`, column j is the j-th discriminant direction.
    pub projection: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Discriminability (generalized eigenvalue) per kept direction.
    pub eigenvalues: Vec<f64>,
    /// Whether the within-class scatter needed ridge regularization.
    pub regularized: bool,
}

impl LdaTransform {
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "lda_project",
                left: vec![self.in_dim],
                right: vec![x.len()],
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(mat_t_vec(
            &self.projection,
            self.in_dim,
            self.out_dim,
            &centered,
        ))
    }
}

/// (within scatter, between scatter, global mean, dim).
pub(crate) type Scatters = (Vec<f64>, Vec<f64>, Vec<f64>, usize);

/// Scatter matrices around class means and the global mean.
pub(crate) fn scatter_matrices(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Scatters> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Config(format!(
            "need matching non-empty embeddings ({}) and labels ({})",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings[0].len();
    let n_classes = labels.iter().max().unwrap() + 1;
    let n = embeddings.len();

    let mut counts = vec![0usize; n_classes];
    let mut means = vec![vec![0.0; dim]; n_classes];
    let mut global = vec![0.0; dim];
    for (x, &y) in embeddings.iter().zip(labels) {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "scatter_matrices",
                left: vec![dim],
                right: vec![x.len()],
            });
        }
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(x) {
            *m += v;
        }
        for (g, v) in global.iter_mut().zip(x) {
            *g += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    global.iter_mut().for_each(|v| *v /= n as f64);

    let mut sw = vec![0.0; dim * dim];
    let mut sb = vec![0.0; dim * dim];
    for (x, &y) in embeddings.iter().zip(labels) {
        scatter_acc(&mut sw, x, &means[y], 1.0 / n as f64);
    }
    for (mean, &c) in means.iter().zip(&counts) {
        if c > 0 {
            scatter_acc(&mut sb, mean, &global, c as f64 / n as f64);
        }
    }
    Ok((sw, sb, global, dim))
}

/// Whitening transform for a symmetric PSD scatter: `W = U diag(l^-1/2)`.
/// Near-singular spectra get a ridge of `1e-6 * trace / dim` first.
pub(crate) fn whiten(scatter: &[f64], dim: usize) -> Result<(Vec<f64>, bool)> {
    let eig = jacobi_eigen(scatter, dim)?;
    let trace: f64 = eig.values.iter().sum();
    let floor = 1e-10 * trace.abs().max(1e-300) / dim as f64;
    let regularize = eig.values.iter().any(|&v| v <= floor);
    let ridge = if regularize {
        1e-6 * trace / dim as f64
    } else {
        0.0
    };
    let mut w = vec![0.0; dim * dim];
    for j in 0..dim {
        let lam = eig.values[j] + ridge;
        if lam <= 0.0 {
            return Err(Error::State(
                "within-class scatter is not positive definite even after regularization".into(),
            ));
        }
        let s = 1.0 / lam.sqrt();
        for i in 0..dim {
            w[i * dim + j] = eig.vectors[i * dim + j] * s;
        }
    }
    Ok((w, regularize))
}

/// Fit LDA maximizing the between/within scatter ratio.
pub fn fit_lda(embeddings: &[Vec<f64>], labels: &[usize], lda_dim: usize) -> Result<LdaTransform> {
    let (sw, sb, mean, dim) = scatter_matrices(embeddings, labels)?;
    let n_classes = labels
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if n_classes < 2 {
        return Err(Error::Config("LDA needs at least 2 classes".into()));
    }
    if lda_dim == 0 || lda_dim > dim.min(n_classes - 1) {
        return Err(Error::Config(format!(
            "lda_dim {lda_dim} outside 1..={} (dim {dim}, {n_classes} classes)",
            dim.min(n_classes - 1)
        )));
    }

    let (w, regularized) = whiten(&sw, dim)?;
    // Whitened between-class scatter, symmetrized against drift.
    let wt_sb = mat_mul(
        &super::linalg::mat_transpose(&w, dim, dim),
        &sb,
        dim,
        dim,
        dim,
    );
    let mut m = mat_mul(&wt_sb, &w, dim, dim, dim);
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (m[i * dim + j] + m[j * dim + i]);
            m[i * dim + j] = v;
            m[j * dim + i] = v;
        }
    }
    let eig = jacobi_eigen(&m, dim)?;
    let rotation = &eig.vectors;

    // P = W R, keep the top lda_dim columns.
    let full = mat_mul(&w, rotation, dim, dim, dim);
    let mut projection = vec![0.0; dim * lda_dim];
    for i in 0..dim {
        for j in 0..lda_dim {
            projection[i * lda_dim + j] = full[i * dim + j];
        }
    }
    Ok(LdaTransform {
        mean,
        projection,
        in_dim: dim,
        out_dim: lda_dim,
        eigenvalues: eig.values[..lda_dim].to_vec(),
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_separated_classes(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let class = i % 2;
            // Separation along axis 0 only; axis 1 is undiscriminative noise.
            let x0 = if class == 0 { -4.0 } else { 4.0 } + 0.1 * (rng.random::<f64>() - 0.5);
            let x1 = 2.0 * (rng.random::<f64>() - 0.5);
            xs.push(vec![x0, x1]);
            ys.push(class);
        }
        (xs, ys)
    }

    #[test]
    fn first_direction_follows_the_separating_axis() {
        let (xs, ys) = two_separated_classes(1);
        let lda = fit_lda(&xs, &ys, 1).unwrap();
        // Normalize the (whitening-scaled) direction and compare up to sign.
        let d = [lda.projection[0], lda.projection[1]];
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert!((d[0] / norm).abs() > 0.999, "direction {d:?}");
    }

    #[test]
    fn dimension_bound_is_enforced() {
        let (xs, ys) = two_separated_classes(2);
        // 2 classes: at most 1 direction.
        assert!(fit_lda(&xs, &ys, 2).is_err());
        assert!(fit_lda(&xs, &ys, 0).is_err());
        assert!(fit_lda(&xs, &ys, 1).is_ok());
    }

    #[test]
    fn accepts_250_dims_with_251_classes_at_width_512() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 512;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for class in 0..251usize {
            let center: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            for _ in 0..2 {
                xs.push(
                    center
                        .iter()
                        .map(|c| c + rng.random::<f64>() - 0.5)
                        .collect(),
                );
                ys.push(class);
            }
        }
        let lda = fit_lda(&xs, &ys, 250).unwrap();
        assert_eq!(lda.out_dim, 250);
        assert_eq!(lda.project(&xs[0]).unwrap().len(), 250);
    }

    #[test]
    fn projected_scatter_ratios_match_eigenvalues() {
        // Refit the scatters on projected data: each kept direction's
        // between/within ratio must equal the stored eigenvalue.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 6;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for class in 0..5usize {
            let center: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            for _ in 0..30 {
                xs.push(
                    center
                        .iter()
                        .map(|c| c + rng.random::<f64>() - 0.5)
                        .collect(),
                );
                ys.push(class);
            }
        }
        let k = 3;
        let lda = fit_lda(&xs, &ys, k).unwrap();
        let projected: Vec<Vec<f64>> = xs.iter().map(|x| lda.project(x).unwrap()).collect();
        let (sw, sb, _, _) = scatter_matrices(&projected, &ys).unwrap();
        for j in 0..k {
            let ratio = sb[j * k + j] / sw[j * k + j];
            let expect = lda.eigenvalues[j];
            assert!(
                (ratio - expect).abs() / expect.abs().max(1e-12) < 1e-8,
                "direction {j}: {ratio} vs {expect}"
            );
        }
        // Descending discriminability.
        for w in lda.eigenvalues.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn singular_within_scatter_is_regularized() {
        // A constant coordinate makes the within-class scatter singular.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            xs.push(vec![
                if class == 0 { -1.0 } else { 1.0 } + 0.01 * i as f64,
                7.0,
            ]);
            ys.push(class);
        }
        let lda = fit_lda(&xs, &ys, 1).unwrap();
        assert!(lda.regularized);
        assert!(lda.projection.iter().all(|v| v.is_finite()));
    }
}
