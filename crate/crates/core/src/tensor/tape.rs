//! Wengert tape: reverse-mode AD via operation recording.
//!
//! A fresh tape is built per forward pass (define-by-run, so variable-length
//! sequences need no graph caching). Nodes are appended in creation order;
//! parents of node k always have index < k, and one backward pass visits each
//! node exactly once in reverse creation order. A tape is single-threaded;
//! parallelism lives inside the matrix kernels (disjoint output rows, so
//! results are bit-identical regardless of worker count).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode. Training tapes carry an RNG for dropout and record
/// batch-norm running-stat updates; eval tapes are deterministic and
/// independent of batch composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    Train,
    Eval,
}

/// Valid sequence lengths for the elements of a padded rank-3 batch.
#[derive(Debug, Clone)]
pub struct SeqMask {
    lens: Vec<usize>,
}

impl SeqMask {
    pub fn new(lens: Vec<usize>) -> Self {
        SeqMask { lens }
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }
}

/// Batch-norm running statistics refreshed by a train-mode forward pass.
/// Collected on the tape and written back into the owning `ParameterSet`
/// after the step (the forward pass itself never mutates parameters).
#[derive(Debug, Clone)]
pub struct StatUpdate {
    /// Parameter-name prefix; `{prefix}.mean`, `{prefix}.var` and
    /// `{prefix}.steps` are updated.
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Arguments for a batch-norm application.
pub struct BatchNorm<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'a [f64],
    pub running_var: &'a [f64],
    /// Whether running statistics have been fitted (at least one train step).
    pub fitted: bool,
    pub eps: f64,
    pub momentum: f64,
    /// Stat-update key; `None` suppresses the running-stat update.
    pub update_prefix: Option<String>,
}

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Bmm {
        a: usize,
        b: usize,
    },
    TransposeLast {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    SoftmaxRows {
        x: usize,
    },
    Activation {
        x: usize,
        slope: f64,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        count: usize,
        mask: Option<SeqMask>,
        train: bool,
    },
    StatsPool {
        x: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    StackRows {
        parts: Vec<usize>,
    },
    StackPad {
        parts: Vec<usize>,
    },
    Splice {
        x: usize,
        offsets: Vec<i64>,
    },
    SelectRow {
        x: usize,
        row: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: TapeMode,
    rng: Option<ChaCha8Rng>,
    stat_updates: Vec<StatUpdate>,
}

// Work threshold below which matmul stays single-threaded.
const PAR_FLOPS: usize = 1 << 17;

/// C[m x n] += was zeroed; computes A[m x k] * B[k x n]. Rows of C are
/// independent, so the parallel path is bit-identical to the serial one.
fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

fn transpose_kernel(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// Interpret a rank-2 or rank-3 shape as (batch, rows, cols).
fn as_batched(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [r, c] => Ok((1, *r, *c)),
        [b, r, c] => Ok((*b, *r, *c)),
        _ => Err(Error::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "expected rank 2 or 3".into(),
        }),
    }
}

impl Tape {
    pub fn train(dropout_seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            mode: TapeMode::Train,
            rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            stat_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: TapeMode::Eval,
            rng: None,
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Clone a tape value out into a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are finite")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Put a tensor on the tape as a leaf. Gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
        )
    }

    /// Non-differentiable leaf from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn push_unchecked(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Push an op result, enforcing the all-finite invariant.
    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_unchecked(op, shape, data, requires_grad))
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Ops ─────────────────────────────────────────────────────────

    /// `a @ b`. `a` may be rank 1 (one row), rank 2, or rank 3 (leading
    /// batch dim); `b` is rank 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b).to_vec();
        let (rows, k, out_shape) = match (self.shape(a), bs.as_slice()) {
            ([k], [kb, n]) if k == kb => (1, *k, vec![*n]),
            ([m, k], [kb, n]) if k == kb => (*m, *k, vec![*m, *n]),
            ([bt, m, k], [kb, n]) if k == kb => (bt * m, *k, vec![*bt, *m, *n]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: self.shape(a).to_vec(),
                    right: bs,
                })
            }
        };
        let n = bs[1];
        let mut out = vec![0.0; rows * n];
        matmul_kernel(self.value(a), self.value(b), &mut out, rows, k, n);
        let rg = self.requires(&[a, b]);
        self.push("matmul", Op::Matmul { a: a.0, b: b.0 }, out_shape, out, rg)
    }

    /// Batched matmul: `[B,m,k] @ [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                left: sa,
                right: sb,
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let body = |i: usize, co: &mut [f64]| {
                matmul_kernel(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    co,
                    m,
                    k,
                    n,
                )
            };
            if bsz > 1 && bsz * m * k * n >= PAR_FLOPS {
                out.par_chunks_mut(m * n)
                    .enumerate()
                    .for_each(|(i, co)| body(i, co));
            } else {
                for (i, co) in out.chunks_mut(m * n).enumerate() {
                    body(i, co);
                }
            }
        }
        let rg = self.requires(&[a, b]);
        self.push("bmm", Op::Bmm { a: a.0, b: b.0 }, vec![bsz, m, n], out, rg)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let (batch, r, c) = as_batched(self.shape(x), "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            transpose_kernel(
                &xv[bi * r * c..(bi + 1) * r * c],
                r,
                c,
                &mut out[bi * r * c..(bi + 1) * r * c],
            );
        }
        let shape = if self.shape(x).len() == 3 {
            vec![batch, c, r]
        } else {
            vec![c, r]
        };
        let rg = self.requires(&[x]);
        self.push("transpose", Op::TransposeLast { x: x.0 }, shape, out, rg)
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a, b]);
        self.push("add", Op::Add { a: a.0, b: b.0 }, shape, out, rg)
    }

    /// Broadcast-add a rank-1 bias over the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias).to_vec();
        let out: Vec<f64> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, b)| x + b).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(&[x, bias]);
        self.push(
            "add_bias",
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
            shape,
            out,
            rg,
        )
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(&[a, b]);
        self.push("mul", Op::Mul { a: a.0, b: b.0 }, shape, out, rg)
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor"));
        }
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(&[x]);
        self.push("scale", Op::Scale { x: x.0, factor }, shape, out, rg)
    }

    /// Row-stochastic softmax over the trailing axis, stabilized by per-row
    /// max subtraction. With a mask, columns at or beyond the element's valid
    /// length get zero weight (their logits are treated as -inf).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&SeqMask>) -> Result<Var> {
        let (batch, rows, cols) = as_batched(self.shape(x), "softmax_rows")?;
        if let Some(m) = mask {
            if self.shape(x).len() != 3 || m.lens.len() != batch {
                return Err(Error::BadShape {
                    op: "softmax_rows",
                    shape: self.shape(x).to_vec(),
                    reason: format!(
                        "mask of {} lens needs a matching rank-3 input",
                        m.lens.len()
                    ),
                });
            }
            if m.lens.iter().any(|&l| l == 0 || l > cols) {
                return Err(Error::BadShape {
                    op: "softmax_rows",
                    shape: self.shape(x).to_vec(),
                    reason: "mask lengths must be in 1..=cols".into(),
                });
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            let valid = mask.map_or(cols, |m| m.lens[bi]);
            for r in 0..rows {
                let base = bi * rows * cols + r * cols;
                let row = &xv[base..base + valid];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    out[base + j] = e;
                    sum += e;
                }
                for v in &mut out[base..base + valid] {
                    *v /= sum;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(&[x]);
        self.push("softmax_rows", Op::SoftmaxRows { x: x.0 }, shape, out, rg)
    }

    /// Leaky rectifier: `max(x, slope * x)` elementwise, slope in [0, 1).
    pub fn activation(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Config(format!(
                "activation negative_slope {slope} outside [0, 1)"
            )));
        }
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(&[x]);
        self.push(
            "activation",
            Op::Activation { x: x.0, slope },
            shape,
            out,
            rg,
        )
    }

    /// Batch normalization over every (batch, time) position per trailing
    /// channel. Train mode uses batch statistics (population variance) and
    /// records a running-stat update; eval mode requires fitted running
    /// statistics. Masked positions are excluded from the statistics and
    /// zeroed in the output.
    pub fn batch_norm(
        &mut self,
        x: Var,
        args: BatchNorm<'_>,
        mask: Option<&SeqMask>,
    ) -> Result<Var> {
        let (batch, rows, cols) = as_batched(self.shape(x), "batch_norm")?;
        if self.shape(args.gamma) != [cols] || self.shape(args.beta) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(args.gamma).to_vec(),
            });
        }
        if args.running_mean.len() != cols || args.running_var.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: vec![cols],
                right: vec![args.running_mean.len(), args.running_var.len()],
            });
        }
        if let Some(m) = mask {
            if self.shape(x).len() != 3 || m.lens.len() != batch {
                return Err(Error::BadShape {
                    op: "batch_norm",
                    shape: self.shape(x).to_vec(),
                    reason: "mask lens must match the batch dimension".into(),
                });
            }
        }
        let train = self.mode == TapeMode::Train;
        if !train && !args.fitted {
            return Err(Error::State(
                "batch_norm in eval mode without fitted running statistics".into(),
            ));
        }

        let valid_len = |bi: usize| mask.map_or(rows, |m| m.lens[bi].min(rows));
        let (mean, var, count) = if train {
            let mut mean = vec![0.0; cols];
            let mut count = 0usize;
            let xv = self.value(x);
            for bi in 0..batch {
                for r in 0..valid_len(bi) {
                    count += 1;
                    let base = bi * rows * cols + r * cols;
                    for c in 0..cols {
                        mean[c] += xv[base + c];
                    }
                }
            }
            if count == 0 {
                return Err(Error::EmptyUtterance(
                    "batch_norm over zero positions".into(),
                ));
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; cols];
            for bi in 0..batch {
                for r in 0..valid_len(bi) {
                    let base = bi * rows * cols + r * cols;
                    for c in 0..cols {
                        let d = xv[base + c] - mean[c];
                        var[c] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var, count)
        } else {
            (args.running_mean.to_vec(), args.running_var.to_vec(), 0)
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + args.eps).sqrt()).collect();
        if !inv_std.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("batch_norm inv_std"));
        }

        let gv = self.value(args.gamma).to_vec();
        let bv = self.value(args.beta).to_vec();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            for r in 0..valid_len(bi) {
                let base = bi * rows * cols + r * cols;
                for c in 0..cols {
                    out[base + c] = gv[c] * (xv[base + c] - mean[c]) * inv_std[c] + bv[c];
                }
            }
        }

        if train {
            if let Some(prefix) = args.update_prefix {
                let m = args.momentum;
                let new_mean: Vec<f64> = args
                    .running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                let new_var: Vec<f64> = args
                    .running_var
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                self.stat_updates.push(StatUpdate {
                    prefix,
                    mean: new_mean,
                    var: new_var,
                });
            }
        }

        let shape = self.shape(x).to_vec();
        let rg = self.requires(&[x, args.gamma, args.beta]);
        self.push(
            "batch_norm",
            Op::BatchNorm {
                x: x.0,
                gamma: args.gamma.0,
                beta: args.beta.0,
                mean,
                inv_std,
                count,
                mask: mask.cloned(),
                train,
            },
            shape,
            out,
            rg,
        )
    }

    /// Statistics pooling over time: concatenated per-channel mean and
    /// standard deviation (population variance, `eps` inside the sqrt).
    /// `[T,C] -> [2C]`, `[B,T,C] -> [B,2C]`.
    pub fn stats_pool(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (batch, rows, cols) = as_batched(self.shape(x), "stats_pool")?;
        if rows == 0 {
            return Err(Error::EmptyUtterance("stats_pool over zero frames".into()));
        }
        let xv = self.value(x);
        let mut mean = vec![0.0; batch * cols];
        let mut std = vec![0.0; batch * cols];
        let mut out = vec![0.0; batch * 2 * cols];
        for bi in 0..batch {
            for c in 0..cols {
                let mut s = 0.0;
                for r in 0..rows {
                    s += xv[bi * rows * cols + r * cols + c];
                }
                let mu = s / rows as f64;
                let mut v = 0.0;
                for r in 0..rows {
                    let d = xv[bi * rows * cols + r * cols + c] - mu;
                    v += d * d;
                }
                let sd = (v / rows as f64 + eps).sqrt();
                mean[bi * cols + c] = mu;
                std[bi * cols + c] = sd;
                out[bi * 2 * cols + c] = mu;
                out[bi * 2 * cols + cols + c] = sd;
            }
        }
        let shape = if self.shape(x).len() == 3 {
            vec![batch, 2 * cols]
        } else {
            vec![2 * cols]
        };
        let rg = self.requires(&[x]);
        self.push(
            "stats_pool",
            Op::StatsPool { x: x.0, mean, std },
            shape,
            out,
            rg,
        )
    }

    /// Mean cross-entropy between logits and class indices, log-sum-exp
    /// stabilized. Logits are `[B,K]` (or `[K]` with a single label).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (batch, classes) = match shape.as_slice() {
            [k] => (1usize, *k),
            [b, k] => (*b, *k),
            _ => {
                return Err(Error::BadShape {
                    op: "cross_entropy",
                    shape,
                    reason: "expected rank 1 or 2 logits".into(),
                })
            }
        };
        if labels.len() != batch {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![batch],
                right: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "class label",
                    index: l,
                    len: classes,
                });
            }
        }
        let xv = self.value(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for b in 0..batch {
            let row = &xv[b * classes..(b + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in row {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[b * classes + j] = (v - lse).exp();
            }
            total += lse - row[labels[b]];
        }
        let loss = total / batch as f64;
        let rg = self.requires(&[logits]);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        )
    }

    /// Inverted dropout: in train mode zeros a Bernoulli(p) subset and scales
    /// survivors by 1/(1-p); in eval mode it is the identity.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p {p} outside [0, 1)")));
        }
        if self.mode == TapeMode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("train tape has rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(&[x]);
        self.push("dropout", Op::Dropout { x: x.0, mask }, shape, out, rg)
    }

    /// Concatenate along the trailing axis. All parts must share leading dims.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols of zero parts".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let nrows: usize = lead.iter().product();
        let mut out = vec![0.0; nrows * total];
        let mut col0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..nrows {
                out[r * total + col0..r * total + col0 + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            col0 += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.requires(parts);
        self.push(
            "concat_cols",
            Op::ConcatCols {
                parts: parts.iter().map(|v| v.0).collect(),
            },
            shape,
            out,
            rg,
        )
    }

    /// Stack rank-1 rows and rank-2 row blocks into one `[K,C]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("stack_rows of zero parts".into()));
        }
        let cols = *self.shape(parts[0]).last().unwrap();
        let mut total_rows = 0usize;
        for &p in parts {
            let s = self.shape(p);
            match s {
                [c] if *c == cols => total_rows += 1,
                [r, c] if *c == cols => total_rows += r,
                _ => {
                    return Err(Error::ShapeMismatch {
                        op: "stack_rows",
                        left: vec![cols],
                        right: s.to_vec(),
                    })
                }
            }
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.requires(parts);
        self.push(
            "stack_rows",
            Op::StackRows {
                parts: parts.iter().map(|v| v.0).collect(),
            },
            vec![total_rows, cols],
            out,
            rg,
        )
    }

    /// Stack rank-2 `[K_i,C]` parts into a zero-padded `[B,R,C]` batch.
    pub fn stack_pad(&mut self, parts: &[Var], rows: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("stack_pad of zero parts".into()));
        }
        let cols = *self.shape(parts[0]).last().unwrap();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "stack_pad",
                    left: vec![rows, cols],
                    right: s.to_vec(),
                });
            }
            if s[0] > rows {
                return Err(Error::BadShape {
                    op: "stack_pad",
                    shape: s.to_vec(),
                    reason: format!("part has {} rows > pad target {rows}", s[0]),
                });
            }
        }
        let batch = parts.len();
        let mut out = vec![0.0; batch * rows * cols];
        for (bi, &p) in parts.iter().enumerate() {
            let r = self.shape(p)[0];
            out[bi * rows * cols..bi * rows * cols + r * cols].copy_from_slice(self.value(p));
        }
        let rg = self.requires(parts);
        self.push(
            "stack_pad",
            Op::StackPad {
                parts: parts.iter().map(|v| v.0).collect(),
            },
            vec![batch, rows, cols],
            out,
            rg,
        )
    }

    /// Frame splicing with the given time offsets: output row `t` is the
    /// concatenation of input rows `t + (o - min_o)` for each offset `o`
    /// (valid positions only, so the time axis shrinks by `max_o - min_o`).
    pub fn splice(&mut self, x: Var, offsets: &[i64]) -> Result<Var> {
        if offsets.is_empty() {
            return Err(Error::Config("splice with zero offsets".into()));
        }
        let (batch, rows, cols) = as_batched(self.shape(x), "splice")?;
        let min_o = *offsets.iter().min().unwrap();
        let max_o = *offsets.iter().max().unwrap();
        let span = (max_o - min_o) as usize;
        if rows <= span {
            return Err(Error::TooShort(format!(
                "splice needs at least {} frames, got {rows}",
                span + 1
            )));
        }
        let out_rows = rows - span;
        let width = offsets.len() * cols;
        let xv = self.value(x);
        let mut out = vec![0.0; batch * out_rows * width];
        for bi in 0..batch {
            for t in 0..out_rows {
                for (j, &o) in offsets.iter().enumerate() {
                    let src = bi * rows * cols + (t + (o - min_o) as usize) * cols;
                    let dst = bi * out_rows * width + t * width + j * cols;
                    out[dst..dst + cols].copy_from_slice(&xv[src..src + cols]);
                }
            }
        }
        let shape = if self.shape(x).len() == 3 {
            vec![batch, out_rows, width]
        } else {
            vec![out_rows, width]
        };
        let rg = self.requires(&[x]);
        self.push(
            "splice",
            Op::Splice {
                x: x.0,
                offsets: offsets.to_vec(),
            },
            shape,
            out,
            rg,
        )
    }

    /// Pick one row: `[K,C] -> [C]`, or per batch element `[B,K,C] -> [B,C]`.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (batch, rows, cols) = as_batched(self.shape(x), "select_row")?;
        if row >= rows {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: row,
                len: rows,
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; batch * cols];
        for bi in 0..batch {
            let base = bi * rows * cols + row * cols;
            out[bi * cols..(bi + 1) * cols].copy_from_slice(&xv[base..base + cols]);
        }
        let shape = if self.shape(x).len() == 3 {
            vec![batch, cols]
        } else {
            vec![cols]
        };
        let rg = self.requires(&[x]);
        self.push("select_row", Op::SelectRow { x: x.0, row }, shape, out, rg)
    }

    /// Reinterpret the data with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape,
                reason: format!("element count differs from {}", self.value(x).len()),
            });
        }
        let data = self.value(x).to_vec();
        let rg = self.requires(&[x]);
        self.push("reshape", Op::Reshape { x: x.0 }, shape, data, rg)
    }

    /// Sum all elements into a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.requires(&[x]);
        self.push("sum", Op::Sum { x: x.0 }, vec![1], vec![s], rg)
    }

    /// Affine map: `x @ w (+ bias)`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// grad-requiring node reachable from `loss`; repeated calls accumulate
    /// (each sweep runs on its own working buffers, so a second backward
    /// adds the same gradient once more).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
                reason: "loss must be scalar".into(),
            });
        }
        let n = self.nodes.len();
        let mut work: Vec<Option<Vec<f64>>> = vec![None; n];
        work[loss.0] = Some(vec![1.0]);
        for k in (0..n).rev() {
            if !self.nodes[k].requires_grad {
                continue;
            }
            let Some(g) = work[k].take() else { continue };
            {
                let (head, tail) = self.nodes.split_at(k);
                let (work_head, _) = work.split_at_mut(k);
                backward_op(&tail[0], &g, head, work_head)?;
            }
            work[k] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(work) {
            if let Some(g) = g {
                let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                grad.iter_mut().zip(&g).for_each(|(x, d)| *x += d);
            }
        }
        Ok(())
    }
}

fn acc(head: &[Node], work: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !head[id].requires_grad {
        return;
    }
    let n = head[id].data.len();
    let g = work[id].get_or_insert_with(|| vec![0.0; n]);
    f(g);
}

fn backward_op(
    node: &Node,
    g: &[f64],
    head: &[Node],
    work: &mut [Option<Vec<f64>>],
) -> Result<()> {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            // dA = dC Bt, dB = At dC (lhs may be rank 1..3).
            let k = *head[*a].shape.last().unwrap();
            let m_total = head[*a].data.len() / k;
            let n = head[*b].shape[1];
            let bv = head[*b].data.clone();
            let av = head[*a].data.clone();
            if head[*a].requires_grad {
                let mut bt = vec![0.0; k * n];
                transpose_kernel(&bv, k, n, &mut bt);
                let mut da = vec![0.0; m_total * k];
                matmul_kernel(g, &bt, &mut da, m_total, n, k);
                acc(head, work, *a, |ga| {
                    ga.iter_mut().zip(&da).for_each(|(x, d)| *x += d)
                });
            }
            if head[*b].requires_grad {
                let mut at = vec![0.0; k * m_total];
                transpose_kernel(&av, m_total, k, &mut at);
                let mut db = vec![0.0; k * n];
                matmul_kernel(&at, g, &mut db, k, m_total, n);
                acc(head, work, *b, |gb| {
                    gb.iter_mut().zip(&db).for_each(|(x, d)| *x += d)
                });
            }
        }
        Op::Bmm { a, b } => {
            let (bsz, m, k) = (head[*a].shape[0], head[*a].shape[1], head[*a].shape[2]);
            let n = head[*b].shape[2];
            let av = head[*a].data.clone();
            let bv = head[*b].data.clone();
            if head[*a].requires_grad {
                let mut da = vec![0.0; bsz * m * k];
                for bi in 0..bsz {
                    let mut bt = vec![0.0; n * k];
                    transpose_kernel(&bv[bi * k * n..(bi + 1) * k * n], k, n, &mut bt);
                    matmul_kernel(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                acc(head, work, *a, |ga| {
                    ga.iter_mut().zip(&da).for_each(|(x, d)| *x += d)
                });
            }
            if head[*b].requires_grad {
                let mut db = vec![0.0; bsz * k * n];
                for bi in 0..bsz {
                    let mut at = vec![0.0; k * m];
                    transpose_kernel(&av[bi * m * k..(bi + 1) * m * k], m, k, &mut at);
                    matmul_kernel(
                        &at,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                acc(head, work, *b, |gb| {
                    gb.iter_mut().zip(&db).for_each(|(x, d)| *x += d)
                });
            }
        }
        Op::TransposeLast { x } => {
            let (batch, r, c) = as_batched(&head[*x].shape, "transpose")?;
            // node shape is [.., c, r]; transpose each block of g back.
            let mut dx = vec![0.0; g.len()];
            for bi in 0..batch {
                transpose_kernel(
                    &g[bi * r * c..(bi + 1) * r * c],
                    c,
                    r,
                    &mut dx[bi * r * c..(bi + 1) * r * c],
                );
            }
            acc(head, work, *x, |gx| {
                gx.iter_mut().zip(&dx).for_each(|(x, d)| *x += d)
            });
        }
        Op::Add { a, b } => {
            acc(head, work, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)
            });
            acc(head, work, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(x, d)| *x += d)
            });
        }
        Op::AddBias { x, bias } => {
            acc(head, work, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(v, d)| *v += d)
            });
            let c = head[*bias].data.len();
            acc(head, work, *bias, |gb| {
                for row in g.chunks(c) {
                    for (v, d) in gb.iter_mut().zip(row) {
                        *v += d;
                    }
                }
            });
        }
        Op::Mul { a, b } => {
            let av = head[*a].data.clone();
            let bv = head[*b].data.clone();
            acc(head, work, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            acc(head, work, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale { x, factor } => {
            let f = *factor;
            acc(head, work, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(v, d)| *v += f * d)
            });
        }
        Op::SoftmaxRows { x } => {
            // dX = Y .* (dY - rowsum(dY .* Y)); masked columns have Y = 0.
            let cols = *node.shape.last().unwrap();
            let y = &node.data;
            acc(head, work, *x, |gx| {
                for (r, grow) in g.chunks(cols).enumerate() {
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let dot: f64 = grow.iter().zip(yrow).map(|(d, v)| d * v).sum();
                    for j in 0..cols {
                        gx[r * cols + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::Activation { x, slope } => {
            let s = *slope;
            let xv = head[*x].data.clone();
            acc(head, work, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * if xv[i] >= 0.0 { 1.0 } else { s };
                }
            });
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            count,
            mask,
            train,
        } => {
            let (batch, rows, cols) = as_batched(&head[*x].shape, "batch_norm")?;
            let valid_len = |bi: usize| mask.as_ref().map_or(rows, |m| m.lens[bi].min(rows));
            let xv = head[*x].data.clone();
            let gv = head[*gamma].data.clone();
            // Per-channel reductions over valid positions.
            let mut sum_g = vec![0.0; cols];
            let mut sum_gx = vec![0.0; cols];
            for bi in 0..batch {
                for r in 0..valid_len(bi) {
                    let base = bi * rows * cols + r * cols;
                    for c in 0..cols {
                        let xh = (xv[base + c] - mean[c]) * inv_std[c];
                        sum_g[c] += g[base + c];
                        sum_gx[c] += g[base + c] * xh;
                    }
                }
            }
            acc(head, work, *beta, |gb| {
                gb.iter_mut().zip(&sum_g).for_each(|(v, d)| *v += d)
            });
            acc(head, work, *gamma, |gg| {
                gg.iter_mut().zip(&sum_gx).for_each(|(v, d)| *v += d)
            });
            if head[*x].requires_grad {
                let n = *count as f64;
                let mut dx = vec![0.0; xv.len()];
                for bi in 0..batch {
                    for r in 0..valid_len(bi) {
                        let base = bi * rows * cols + r * cols;
                        for c in 0..cols {
                            let d = if *train {
                                let xh = (xv[base + c] - mean[c]) * inv_std[c];
                                gv[c] * inv_std[c] / n
                                    * (n * g[base + c] - sum_g[c] - xh * sum_gx[c])
                            } else {
                                g[base + c] * gv[c] * inv_std[c]
                            };
                            dx[base + c] = d;
                        }
                    }
                }
                acc(head, work, *x, |gx| {
                    gx.iter_mut().zip(&dx).for_each(|(v, d)| *v += d)
                });
            }
        }
        Op::StatsPool { x, mean, std } => {
            let (batch, rows, cols) = as_batched(&head[*x].shape, "stats_pool")?;
            let xv = head[*x].data.clone();
            let t = rows as f64;
            acc(head, work, *x, |gx| {
                for bi in 0..batch {
                    for c in 0..cols {
                        let dmu = g[bi * 2 * cols + c];
                        let dsd = g[bi * 2 * cols + cols + c];
                        let mu = mean[bi * cols + c];
                        let sd = std[bi * cols + c];
                        for r in 0..rows {
                            let idx = bi * rows * cols + r * cols + c;
                            let mut d = dmu / t;
                            if sd > 0.0 {
                                d += dsd * (xv[idx] - mu) / (t * sd);
                            }
                            gx[idx] += d;
                        }
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let classes = *head[*logits].shape.last().unwrap();
            let batch = labels.len();
            let scale = g[0] / batch as f64;
            acc(head, work, *logits, |gl| {
                for (b, &y) in labels.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[b * classes + j] += scale * (probs[b * classes + j] - onehot);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            acc(head, work, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            });
        }
        Op::ConcatCols { parts } => {
            let total = *node.shape.last().unwrap();
            let nrows = node.data.len() / total;
            let mut col0 = 0;
            for &p in parts {
                let w = *head[p].shape.last().unwrap();
                acc(head, work, p, |gp| {
                    for r in 0..nrows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + col0 + j];
                        }
                    }
                });
                col0 += w;
            }
        }
        Op::StackRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = head[p].data.len();
                acc(head, work, p, |gp| {
                    gp.iter_mut()
                        .zip(&g[off..off + len])
                        .for_each(|(v, d)| *v += d);
                });
                off += len;
            }
        }
        Op::StackPad { parts } => {
            let rows = node.shape[1];
            let cols = node.shape[2];
            for (bi, &p) in parts.iter().enumerate() {
                let r = head[p].shape[0];
                let base = bi * rows * cols;
                acc(head, work, p, |gp| {
                    gp.iter_mut()
                        .zip(&g[base..base + r * cols])
                        .for_each(|(v, d)| *v += d);
                });
            }
        }
        Op::Splice { x, offsets } => {
            let (batch, rows, cols) = as_batched(&head[*x].shape, "splice")?;
            let min_o = *offsets.iter().min().unwrap();
            let span = (*offsets.iter().max().unwrap() - min_o) as usize;
            let out_rows = rows - span;
            let width = offsets.len() * cols;
            acc(head, work, *x, |gx| {
                for bi in 0..batch {
                    for t in 0..out_rows {
                        for (j, &o) in offsets.iter().enumerate() {
                            let src = bi * out_rows * width + t * width + j * cols;
                            let dst = bi * rows * cols + (t + (o - min_o) as usize) * cols;
                            for c in 0..cols {
                                gx[dst + c] += g[src + c];
                            }
                        }
                    }
                }
            });
        }
        Op::SelectRow { x, row } => {
            let (batch, rows, cols) = as_batched(&head[*x].shape, "select_row")?;
            acc(head, work, *x, |gx| {
                for bi in 0..batch {
                    let base = bi * rows * cols + row * cols;
                    for c in 0..cols {
                        gx[base + c] += g[bi * cols + c];
                    }
                }
            });
        }
        Op::Reshape { x } => {
            acc(head, work, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(v, d)| *v += d)
            });
        }
        Op::Sum { x } => {
            let d = g[0];
            acc(head, work, *x, |gx| gx.iter_mut().for_each(|v| *v += d));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_err};
    use rand::Rng;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>, grad: bool) -> Var {
        let mut t = Tensor::new(shape, data).unwrap();
        t.requires_grad = grad;
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::eval();
        let i2 = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_dot_product() {
        let mut tape = Tape::eval();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0], false);
        let b = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0], false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::eval();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6], false);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4], false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_ones_times_bt_and_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a0: Vec<f64> = (0..20).map(|_| rng.random::<f64>() - 0.5).collect();
        let b0: Vec<f64> = (0..15).map(|_| rng.random::<f64>() - 0.5).collect();

        let mut tape = Tape::eval();
        let a = leaf(&mut tape, vec![4, 5], a0.clone(), true);
        let b = leaf(&mut tape, vec![5, 3], b0.clone(), false);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(a).unwrap().to_vec();

        // Closed form: dA = ones(4x3) Bt.
        let mut expect = vec![0.0; 20];
        for i in 0..4 {
            for p in 0..5 {
                for j in 0..3 {
                    expect[i * 5 + p] += b0[p * 3 + j];
                }
            }
        }
        for (x, y) in analytic.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let numeric = finite_diff_grad(&a0, 1e-5, |xs| {
            let mut t = Tape::eval();
            let av = leaf(&mut t, vec![4, 5], xs.to_vec(), false);
            let bv = leaf(&mut t, vec![5, 3], b0.clone(), false);
            let cv = t.matmul(av, bv)?;
            let s = t.sum(cv)?;
            Ok(t.value(s)[0])
        })
        .unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0], false);
        let y = tape.softmax_rows(x, None).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let shifted: Vec<f64> = row.iter().map(|v| v + 13.25).collect();
        let a = leaf(&mut tape, vec![1, 6], row, false);
        let b = leaf(&mut tape, vec![1, 6], shifted, false);
        let ya = tape.softmax_rows(a, None).unwrap();
        let yb = tape.softmax_rows(b, None).unwrap();
        for (u, v) in tape.value(ya).iter().zip(tape.value(yb)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0, 2.0, 3.0], false);
        let y = tape.softmax_rows(x, None).unwrap();
        // Direct-formula oracle at f64, no max subtraction.
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expect: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
        for (u, v) in tape.value(y).iter().zip(&expect) {
            assert!((u - v).abs() <= 1e-12);
        }
        let s: f64 = tape.value(y).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_invalid_columns() {
        let mut tape = Tape::eval();
        let x = leaf(
            &mut tape,
            vec![2, 1, 3],
            vec![0.0, 0.0, 99.0, 1.0, 2.0, 3.0],
            false,
        );
        let mask = SeqMask::new(vec![2, 3]);
        let y = tape.softmax_rows(x, Some(&mask)).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[0..3], &[0.5, 0.5, 0.0]);
        assert!((v[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn activation_relu_and_leaky() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![2], vec![-1.0, 2.0], false);
        let y = tape.activation(x, 0.0).unwrap();
        assert_eq!(tape.value(y), &[0.0, 2.0]);
        let z = tape.activation(x, 0.01).unwrap();
        assert_eq!(tape.value(z), &[-0.01, 2.0]);
        assert!(tape.activation(x, 1.0).is_err());
    }

    #[test]
    fn activation_gradient_at_negative_input() {
        let x0 = vec![-3.0];
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![1], x0.clone(), true);
        let y = tape.activation(x, 0.01).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        assert!((analytic[0] - 0.01).abs() < 1e-15);

        let numeric = finite_diff_grad(&x0, 1e-5, |xs| {
            let mut t = Tape::eval();
            let xv = leaf(&mut t, vec![1], xs.to_vec(), false);
            let yv = t.activation(xv, 0.01)?;
            let s = t.sum(yv)?;
            Ok(t.value(s)[0])
        })
        .unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
    }

    fn bn_args<'a>(gamma: Var, beta: Var, rm: &'a [f64], rv: &'a [f64], eps: f64) -> BatchNorm<'a> {
        BatchNorm {
            gamma,
            beta,
            running_mean: rm,
            running_var: rv,
            fitted: false,
            eps,
            momentum: 0.1,
            update_prefix: None,
        }
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 5.0 - 1.0).collect();
        let mut tape = Tape::train(0);
        let x = leaf(&mut tape, vec![10, 4], data, false);
        let gamma = leaf(&mut tape, vec![4], vec![1.0; 4], false);
        let beta = leaf(&mut tape, vec![4], vec![0.0; 4], false);
        let rm = [0.0; 4];
        let rv = [1.0; 4];
        let y = tape
            .batch_norm(x, bn_args(gamma, beta, &rm, &rv, 0.0), None)
            .unwrap();
        let v = tape.value(y);
        for c in 0..4 {
            let col: Vec<f64> = (0..10).map(|r| v[r * 4 + c]).collect();
            let mu: f64 = col.iter().sum::<f64>() / 10.0;
            let var: f64 = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / 10.0;
            assert!(mu.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_constant_channel_is_zeroed() {
        let mut tape = Tape::train(0);
        let x = leaf(&mut tape, vec![5, 1], vec![3.0; 5], false);
        let gamma = leaf(&mut tape, vec![1], vec![1.0], false);
        let beta = leaf(&mut tape, vec![1], vec![0.0], false);
        let rm = [0.0];
        let rv = [1.0];
        let y = tape
            .batch_norm(x, bn_args(gamma, beta, &rm, &rv, 1e-5), None)
            .unwrap();
        for v in tape.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn batch_norm_two_sample_hand_case() {
        // Channel {1, 3} with eps = 0: mean 2, population std 1 -> {-1, +1}.
        let mut tape = Tape::train(0);
        let x = leaf(&mut tape, vec![2, 1], vec![1.0, 3.0], false);
        let gamma = leaf(&mut tape, vec![1], vec![1.0], false);
        let beta = leaf(&mut tape, vec![1], vec![0.0], false);
        let rm = [0.0];
        let rv = [1.0];
        let y = tape
            .batch_norm(x, bn_args(gamma, beta, &rm, &rv, 0.0), None)
            .unwrap();
        assert_eq!(tape.value(y), &[-1.0, 1.0]);
    }

    #[test]
    fn batch_norm_eval_without_fit_is_state_error() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![2, 1], vec![1.0, 3.0], false);
        let gamma = leaf(&mut tape, vec![1], vec![1.0], false);
        let beta = leaf(&mut tape, vec![1], vec![0.0], false);
        let rm = [0.0];
        let rv = [1.0];
        let err = tape
            .batch_norm(x, bn_args(gamma, beta, &rm, &rv, 1e-5), None)
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn stats_pool_shape_and_hand_case() {
        // 1500-channel input pools to a 3000-dim vector.
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![4, 1500], vec![0.5; 6000], false);
        let y = tape.stats_pool(x, 1e-10).unwrap();
        assert_eq!(tape.shape(y), &[3000]);

        // Channels [1,2,3] and [4,4,4] over three frames, eps = 0.
        let x = leaf(
            &mut tape,
            vec![3, 2],
            vec![1.0, 4.0, 2.0, 4.0, 3.0, 4.0],
            false,
        );
        let y = tape.stats_pool(x, 0.0).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 2.0).abs() < 1e-15);
        assert!((v[1] - 4.0).abs() < 1e-15);
        assert!((v[2] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn stats_pool_constant_sequence_std_is_sqrt_eps() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![7, 2], vec![2.5; 14], false);
        let eps = 1e-10;
        let y = tape.stats_pool(x, eps).unwrap();
        let v = tape.value(y);
        assert_eq!(v[2], eps.sqrt());
        assert_eq!(v[3], eps.sqrt());
    }

    #[test]
    fn stats_pool_rejects_empty() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![0, 2], vec![], false);
        assert!(matches!(
            tape.stats_pool(x, 0.0),
            Err(Error::EmptyUtterance(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![2, 5], vec![0.7; 10], false);
        let l = tape.cross_entropy(x, &[0, 3]).unwrap();
        assert!((tape.value(l)[0] - 5.0f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 4];
        logits[2] = 1000.0;
        let x = leaf(&mut tape, vec![4], logits, false);
        let l = tape.cross_entropy(x, &[2]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let labels = [3usize, 0, 2];
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![3, 4], logits.clone(), false);
        let l = tape.cross_entropy(x, &labels).unwrap();

        // Direct per-row formula: -log(exp(l_y) / sum exp(l_j)).
        let mut expect = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &logits[b * 4..(b + 1) * 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[y].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((tape.value(l)[0] - expect).abs() <= 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![1, 3], vec![0.0; 3], false);
        assert!(matches!(
            tape.cross_entropy(x, &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![1], vec![3.0], true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_linearly() {
        // A multi-node chain: a second sweep must add exactly the same
        // gradient again, not compound through intermediate buffers.
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![2], vec![1.5, -0.5], true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_disconnected_param_has_no_grad() {
        let mut tape = Tape::eval();
        let p = leaf(&mut tape, vec![2], vec![1.0, 2.0], true);
        let x = leaf(&mut tape, vec![2], vec![5.0, 6.0], true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(p).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0], true);
        assert!(matches!(tape.backward(x), Err(Error::BadShape { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::train(42);
            let x = leaf(
                &mut tape,
                vec![3, 4],
                (0..12).map(|i| i as f64 * 0.3 - 1.0).collect(),
                true,
            );
            let w = leaf(
                &mut tape,
                vec![4, 2],
                (0..8).map(|i| (i as f64).sin()).collect(),
                true,
            );
            let h = tape.matmul(x, w).unwrap();
            let h = tape.activation(h, 0.01).unwrap();
            let h = tape.dropout(h, 0.1).unwrap();
            let l = tape.cross_entropy(h, &[0, 1, 0]).unwrap();
            tape.backward(l).unwrap();
            (
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_expectation() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![4], vec![1.0, 2.0, 3.0, 4.0], false);
        let y = tape.dropout(x, 0.3).unwrap();
        assert_eq!(x, y);

        // n = 1e5 ones through dropout(p). Mean stays 1 within 3 sigma, where
        // sigma = sqrt(p/(1-p)/n) for inverted dropout.
        let n = 100_000;
        let p = 0.1;
        let mut tape = Tape::train(123);
        let x = leaf(&mut tape, vec![n], vec![1.0; n], false);
        let y = tape.dropout(x, p).unwrap();
        let mean = tape.value(y).iter().sum::<f64>() / n as f64;
        let sigma = (p / (1.0 - p) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn dropout_gradient_equals_mask() {
        let mut tape = Tape::train(9);
        let x = leaf(&mut tape, vec![64], vec![0.5; 64], true);
        let y = tape.dropout(x, 0.25).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let scale = 1.0 / 0.75;
        for (gv, yv) in g.iter().zip(tape.value(y)) {
            if *yv == 0.0 {
                assert_eq!(*gv, 0.0);
            } else {
                assert!((gv - scale).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn splice_arithmetic_and_gradient() {
        // Offsets {-2,0,2} over 7 frames -> 3 output frames of width 3C.
        let mut tape = Tape::eval();
        let x0: Vec<f64> = (0..14).map(|i| i as f64).collect();
        let x = leaf(&mut tape, vec![7, 2], x0.clone(), true);
        let y = tape.splice(x, &[-2, 0, 2]).unwrap();
        assert_eq!(tape.shape(y), &[3, 6]);
        // First output row = frames 0, 2, 4.
        assert_eq!(&tape.value(y)[0..6], &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0]);

        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let numeric = finite_diff_grad(&x0, 1e-5, |xs| {
            let mut t = Tape::eval();
            let xv = leaf(&mut t, vec![7, 2], xs.to_vec(), false);
            let yv = t.splice(xv, &[-2, 0, 2])?;
            let s = t.sum(yv)?;
            Ok(t.value(s)[0])
        })
        .unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
    }

    #[test]
    fn splice_too_short_names_minimum() {
        let mut tape = Tape::eval();
        let x = leaf(&mut tape, vec![4, 2], vec![0.0; 8], false);
        let err = tape.splice(x, &[-2, 0, 2]).unwrap_err();
        assert!(err.to_string().contains("at least 5"), "{err}");
    }

    #[test]
    fn composite_ops_pass_finite_difference_checks() {
        // One randomized chain through most remaining ops.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let x0: Vec<f64> = (0..24).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let forward = |xs: &[f64]| -> crate::error::Result<f64> {
            let mut t = Tape::train(77);
            let x = leaf(&mut t, vec![2, 3, 4], xs.to_vec(), true);
            let xt = t.transpose_last(x)?;
            let sc = t.bmm(x, xt)?;
            let sc = t.scale(sc, 0.5)?;
            let at = t.softmax_rows(sc, None)?;
            let mixed = t.bmm(at, x)?;
            let pooled = t.stats_pool(mixed, 1e-10)?;
            let s = t.sum(pooled)?;
            Ok(t.value(s)[0])
        };
        let mut t = Tape::train(77);
        let x = leaf(&mut t, vec![2, 3, 4], x0.clone(), true);
        let xt = t.transpose_last(x).unwrap();
        let sc = t.bmm(x, xt).unwrap();
        let sc = t.scale(sc, 0.5).unwrap();
        let at = t.softmax_rows(sc, None).unwrap();
        let mixed = t.bmm(at, x).unwrap();
        let pooled = t.stats_pool(mixed, 1e-10).unwrap();
        let s = t.sum(pooled).unwrap();
        t.backward(s).unwrap();
        let analytic = t.grad(x).unwrap().to_vec();
        let numeric = finite_diff_grad(&x0, 1e-5, forward).unwrap();
        assert!(
            max_rel_err(&analytic, &numeric) <= 1e-4,
            "rel err {}",
            max_rel_err(&analytic, &numeric)
        );
    }

    #[test]
    fn stat_updates_follow_momentum() {
        let mut tape = Tape::train(0);
        let x = leaf(&mut tape, vec![2, 1], vec![1.0, 3.0], false);
        let gamma = leaf(&mut tape, vec![1], vec![1.0], false);
        let beta = leaf(&mut tape, vec![1], vec![0.0], false);
        let rm = [0.0];
        let rv = [1.0];
        let args = BatchNorm {
            gamma,
            beta,
            running_mean: &rm,
            running_var: &rv,
            fitted: false,
            eps: 0.0,
            momentum: 0.1,
            update_prefix: Some("bn".into()),
        };
        tape.batch_norm(x, args, None).unwrap();
        let ups = tape.take_stat_updates();
        assert_eq!(ups.len(), 1);
        // batch mean 2, batch var 1; running (0,1) with momentum 0.1.
        assert!((ups[0].mean[0] - 0.2).abs() < 1e-15);
        assert!((ups[0].var[0] - 1.0).abs() < 1e-15);
    }
}
