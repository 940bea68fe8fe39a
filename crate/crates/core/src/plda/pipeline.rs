//! Embedding post-processing pipeline and trial scoring: center, optional
//! length normalization, optional LDA down-projection, re-center, PLDA.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use super::lda::{fit_lda, LdaTransform};
use super::model::{fit_plda, plda_llr, PldaModel};
use crate::corpus::TrialPair;
use crate::error::{Error, Result};
use crate::io::kv::{kv_get, kv_usize, parse_kv};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::metrics::ScoreRecord;
use crate::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone)]
pub struct BackendConfig {
    /// LDA output dimension; `None` skips the projection.
    pub lda_dim: Option<usize>,
    /// Scale each centered embedding to unit L2 before LDA/PLDA.
    pub length_norm: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            lda_dim: Some(250),
            length_norm: true,
        }
    }
}

/// Fitted scoring back-end.
#[derive(Debug, Clone)]
pub struct Backend {
    pub config: BackendConfig,
    center: Vec<f64>,
    lda: Option<LdaTransform>,
    center2: Vec<f64>,
    pub plda: PldaModel,
}

fn length_normalize(x: &mut [f64]) {
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
}

fn mean_of(xs: &[Vec<f64>]) -> Vec<f64> {
    let dim = xs[0].len();
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= xs.len() as f64);
    mean
}

/// Fit center -> (length-norm) -> LDA -> center -> PLDA on labeled training
/// embeddings.
pub fn fit_backend(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    config: BackendConfig,
) -> Result<Backend> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Config(format!(
            "need matching non-empty embeddings ({}) and labels ({})",
            embeddings.len(),
            labels.len()
        )));
    }
    let center = mean_of(embeddings);
    let mut stage1: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|x| x.iter().zip(&center).map(|(v, m)| v - m).collect())
        .collect();
    if config.length_norm {
        stage1.iter_mut().for_each(|x| length_normalize(x));
    }

    let (lda, mut stage2) = match config.lda_dim {
        Some(dim) => {
            let lda = fit_lda(&stage1, labels, dim)?;
            let projected: Result<Vec<Vec<f64>>> = stage1.iter().map(|x| lda.project(x)).collect();
            (Some(lda), projected?)
        }
        None => (None, stage1),
    };

    let center2 = mean_of(&stage2);
    stage2
        .iter_mut()
        .for_each(|x| x.iter_mut().zip(&center2).for_each(|(v, m)| *v -= m));

    let plda = fit_plda(&stage2, labels)?;
    Ok(Backend {
        config,
        center,
        lda,
        center2,
        plda,
    })
}

impl Backend {
    /// Run one embedding through the pipeline into PLDA space.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.center.len() {
            return Err(Error::ShapeMismatch {
                op: "backend_transform",
                left: vec![self.center.len()],
                right: vec![x.len()],
            });
        }
        let mut v: Vec<f64> = x.iter().zip(&self.center).map(|(a, m)| a - m).collect();
        if self.config.length_norm {
            length_normalize(&mut v);
        }
        let mut v = match &self.lda {
            Some(lda) => lda.project(&v)?,
            None => v,
        };
        v.iter_mut().zip(&self.center2).for_each(|(a, m)| *a -= m);
        Ok(v)
    }

    /// PLDA log-likelihood-ratio score of two raw embeddings.
    pub fn score(&self, u1: &[f64], u2: &[f64]) -> Result<f64> {
        let t1 = self.transform(u1)?;
        let t2 = self.transform(u2)?;
        plda_llr(&self.plda, &t1, &t2)
    }

    /// Score a trial list against an utterance -> embedding table
    /// (parallel over trials, output in trial order).
    pub fn score_trials(
        &self,
        embeddings: &HashMap<String, Vec<f64>>,
        trials: &[TrialPair],
    ) -> Result<Vec<ScoreRecord>> {
        // Transform each distinct utterance once.
        let mut names: Vec<&String> = embeddings.keys().collect();
        names.sort();
        let transformed: Result<HashMap<&String, Vec<f64>>> = names
            .par_iter()
            .map(|name| Ok((*name, self.transform(&embeddings[*name])?)))
            .collect();
        let transformed = transformed?;
        trials
            .par_iter()
            .map(|t| {
                let e = transformed
                    .get(&t.enroll)
                    .ok_or_else(|| Error::State(format!("no embedding for {}", t.enroll)))?;
                let s = transformed
                    .get(&t.test)
                    .ok_or_else(|| Error::State(format!("no embedding for {}", t.test)))?;
                Ok(ScoreRecord {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                    target: t.target,
                    score: plda_llr(&self.plda, e, s)?,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = ParameterSet::new();
        let d = self.center.len();
        params.insert("center", Tensor::new(vec![d], self.center.clone())?)?;
        if let Some(lda) = &self.lda {
            params.insert("lda.mean", Tensor::new(vec![lda.in_dim], lda.mean.clone())?)?;
            params.insert(
                "lda.projection",
                Tensor::new(vec![lda.in_dim, lda.out_dim], lda.projection.clone())?,
            )?;
            params.insert(
                "lda.eigenvalues",
                Tensor::new(vec![lda.out_dim], lda.eigenvalues.clone())?,
            )?;
        }
        let pd = self.plda.dim;
        params.insert("center2", Tensor::new(vec![pd], self.center2.clone())?)?;
        params.insert("plda.mean", Tensor::new(vec![pd], self.plda.mean.clone())?)?;
        params.insert("plda.v", Tensor::new(vec![pd, pd], self.plda.v.clone())?)?;
        params.insert("plda.a", Tensor::new(vec![pd, pd], self.plda.a.clone())?)?;
        params.insert("plda.psi", Tensor::new(vec![pd], self.plda.psi.clone())?)?;
        let header = format!(
            "kind=backend\nlength_norm={}\nlda_dim={}\nregularized={}\nclamped={}\n",
            self.config.length_norm,
            self.config.lda_dim.map_or(0, |d| d),
            if self
                .lda
                .as_ref()
                .map_or(self.plda.regularized, |l| l.regularized
                    || self.plda.regularized)
            {
                1
            } else {
                0
            },
            self.plda.clamped
        );
        write_checkpoint(path, &header, &params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        let map = parse_kv(&header)?;
        if kv_get(&map, "kind")? != "backend" {
            return Err(Error::Config("checkpoint is not a scoring back-end".into()));
        }
        let length_norm = kv_get(&map, "length_norm")? == "true";
        let lda_dim = kv_usize(&map, "lda_dim")?;
        let center = params.get("center")?.data().to_vec();
        let lda = if lda_dim > 0 {
            let mean = params.get("lda.mean")?.data().to_vec();
            let proj = params.get("lda.projection")?;
            let (in_dim, out_dim) = (proj.shape()[0], proj.shape()[1]);
            Some(LdaTransform {
                mean,
                projection: proj.data().to_vec(),
                in_dim,
                out_dim,
                eigenvalues: params.get("lda.eigenvalues")?.data().to_vec(),
                regularized: false,
            })
        } else {
            None
        };
        let v = params.get("plda.v")?;
        let dim = v.shape()[0];
        let plda = PldaModel {
            mean: params.get("plda.mean")?.data().to_vec(),
            v: v.data().to_vec(),
            a: params.get("plda.a")?.data().to_vec(),
            psi: params.get("plda.psi")?.data().to_vec(),
            dim,
            regularized: false,
            clamped: 0,
        };
        Ok(Backend {
            config: BackendConfig {
                lda_dim: if lda_dim > 0 { Some(lda_dim) } else { None },
                length_norm,
            },
            center,
            lda,
            center2: params.get("center2")?.data().to_vec(),
            plda,
        })
    }
}

/// Concatenate two embeddings of the same utterance into one ensemble
/// vector (512 + 512 -> 1024 at full scale); the downstream pipeline then
/// down-projects with LDA before PLDA.
pub fn ensemble_concat(a: &[f64], b: &[f64], expect_each: Option<usize>) -> Result<Vec<f64>> {
    if let Some(d) = expect_each {
        if a.len() != d || b.len() != d {
            return Err(Error::ShapeMismatch {
                op: "ensemble_concat",
                left: vec![a.len()],
                right: vec![b.len()],
            });
        }
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    Ok(out)
}
