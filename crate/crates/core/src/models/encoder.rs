//! Transformer encoder building blocks shared by the speaker classifier and
//! the pair verifier: sinusoidal position encoding, multihead self-attention,
//! and the encoder layer (self-attention and positionwise feed-forward
//! sublayers with residual adds and batch normalization).

use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, ParameterSet, SeqMask, Tape, TapeBindings, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

use super::config::NormPosition;

/// One forward pass worth of context: parameters, tape, and bindings.
pub struct Forward<'a> {
    pub params: &'a ParameterSet,
    pub tape: &'a mut Tape,
    pub binds: TapeBindings,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParameterSet, tape: &'a mut Tape) -> Self {
        Forward {
            params,
            tape,
            binds: TapeBindings::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.params.bind(name, self.tape, &mut self.binds)
    }

    pub fn affine(&mut self, x: Var, w_name: &str, b_name: Option<&str>) -> Result<Var> {
        let w = self.param(w_name)?;
        let b = match b_name {
            Some(n) => Some(self.param(n)?),
            None => None,
        };
        self.tape.affine(x, w, b)
    }

    /// Batch-norm stage rooted at `{prefix}`; records the running-stat
    /// update in train mode.
    pub fn batch_norm(&mut self, prefix: &str, x: Var, mask: Option<&SeqMask>) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean = self.params.get(&format!("{prefix}.mean"))?;
        let var = self.params.get(&format!("{prefix}.var"))?;
        let steps = self.params.get(&format!("{prefix}.steps"))?;
        let args = BatchNorm {
            gamma,
            beta,
            running_mean: mean.data(),
            running_var: var.data(),
            fitted: steps.data()[0] > 0.0,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            update_prefix: Some(prefix.to_string()),
        };
        self.tape.batch_norm(x, args, mask)
    }
}

/// Per-layer hyperparameters the encoder needs.
#[derive(Debug, Clone, Copy)]
pub struct EncoderSpec {
    pub adim: usize,
    pub n_heads: usize,
    pub norm_position: NormPosition,
    pub dropout: f64,
}

/// Sinusoidal position table: `pe[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `pe[pos, 2i+1] = cos` of the same argument.
pub fn sinusoidal_pe(n_frames: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "position encoding dimension {dim} must be even"
        )));
    }
    let mut data = vec![0.0; n_frames * dim];
    for pos in 0..n_frames {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let arg = pos as f64 * rate;
            data[pos * dim + 2 * i] = arg.sin();
            data[pos * dim + 2 * i + 1] = arg.cos();
        }
    }
    Tensor::new(vec![n_frames, dim], data)
}

fn matmul_any(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a).len() == 3 && tape.shape(b).len() == 3 {
        tape.bmm(a, b)
    } else {
        tape.matmul(a, b)
    }
}

/// Scaled dot-product multihead self-attention. Each head projects the
/// input with its own query/key/value matrices, attends with
/// `softmax(Q Kt / sqrt(d_k))`, and the concatenated head outputs go
/// through a learned square output projection. The scaling lives inside the
/// softmax argument so attention rows stay row-stochastic.
pub fn multihead_self_attention(
    fwd: &mut Forward<'_>,
    prefix: &str,
    x: Var,
    spec: &EncoderSpec,
    mask: Option<&SeqMask>,
) -> Result<Var> {
    let shape = fwd.tape.shape(x).to_vec();
    let adim = *shape.last().unwrap();
    if adim != spec.adim {
        return Err(Error::ShapeMismatch {
            op: "multihead_self_attention",
            left: shape,
            right: vec![spec.adim],
        });
    }
    let dk = spec.adim / spec.n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let wq = fwd.param(&format!("{prefix}.wq.{h}"))?;
        let wk = fwd.param(&format!("{prefix}.wk.{h}"))?;
        let wv = fwd.param(&format!("{prefix}.wv.{h}"))?;
        let q = fwd.tape.matmul(x, wq)?;
        let k = fwd.tape.matmul(x, wk)?;
        let v = fwd.tape.matmul(x, wv)?;
        let kt = fwd.tape.transpose_last(k)?;
        let scores = matmul_any(fwd.tape, q, kt)?;
        let scores = fwd.tape.scale(scores, scale)?;
        let weights = fwd.tape.softmax_rows(scores, mask)?;
        heads.push(matmul_any(fwd.tape, weights, v)?);
    }
    let concat = fwd.tape.concat_cols(&heads)?;
    let wo = fwd.param(&format!("{prefix}.wo"))?;
    fwd.tape.matmul(concat, wo)
}

fn positionwise_ffn(fwd: &mut Forward<'_>, prefix: &str, x: Var, dropout: f64) -> Result<Var> {
    let h = fwd.affine(x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?;
    let h = fwd.tape.activation(h, 0.0)?;
    let h = fwd.tape.dropout(h, dropout)?;
    fwd.affine(h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
}

/// One encoder layer rooted at `{prefix}`: self-attention sublayer, then the
/// two-FFNN positionwise sublayer, each with a residual add and batch
/// normalization (after the add for post-norm, before the sublayer for
/// pre-norm).
pub fn encoder_layer_forward(
    fwd: &mut Forward<'_>,
    prefix: &str,
    x: Var,
    spec: &EncoderSpec,
    mask: Option<&SeqMask>,
) -> Result<Var> {
    let attn_prefix = format!("{prefix}.attn");
    let ffn_prefix = format!("{prefix}.ffn");
    match spec.norm_position {
        NormPosition::Post => {
            let attn = multihead_self_attention(fwd, &attn_prefix, x, spec, mask)?;
            let attn = fwd.tape.dropout(attn, spec.dropout)?;
            let h = fwd.tape.add(x, attn)?;
            let h = fwd.batch_norm(&format!("{prefix}.bn1"), h, mask)?;
            let f = positionwise_ffn(fwd, &ffn_prefix, h, spec.dropout)?;
            let y = fwd.tape.add(h, f)?;
            fwd.batch_norm(&format!("{prefix}.bn2"), y, mask)
        }
        NormPosition::Pre => {
            let n1 = fwd.batch_norm(&format!("{prefix}.bn1"), x, mask)?;
            let attn = multihead_self_attention(fwd, &attn_prefix, n1, spec, mask)?;
            let attn = fwd.tape.dropout(attn, spec.dropout)?;
            let h = fwd.tape.add(x, attn)?;
            let n2 = fwd.batch_norm(&format!("{prefix}.bn2"), h, mask)?;
            let f = positionwise_ffn(fwd, &ffn_prefix, n2, spec.dropout)?;
            fwd.tape.add(h, f)
        }
    }
}

/// Stack of `n_layers` encoder layers rooted at `enc.{i}`.
pub fn encoder_stack(
    fwd: &mut Forward<'_>,
    x: Var,
    n_layers: usize,
    spec: &EncoderSpec,
    mask: Option<&SeqMask>,
) -> Result<Var> {
    let mut h = x;
    for i in 0..n_layers {
        h = encoder_layer_forward(fwd, &format!("enc.{i}"), h, spec, mask)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init::insert_encoder_layer;
    use crate::tensor::{finite_diff_grad, max_rel_err, Tape};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pe_first_row_alternates_zero_one() {
        let pe = sinusoidal_pe(3, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.at2(0, 2 * i), 0.0);
            assert_eq!(pe.at2(0, 2 * i + 1), 1.0);
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_pe(3, 5).is_err());
    }

    #[test]
    fn pe_matches_direct_evaluation() {
        let pe = sinusoidal_pe(2, 4).unwrap();
        let expect = [1.0f64.sin(), 1.0f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (i, e) in expect.iter().enumerate() {
            assert!((pe.at2(1, i) - e).abs() <= 1e-12);
        }
    }

    fn toy_params(seed: u64, adim: usize, heads: usize, units: usize) -> ParameterSet {
        let mut p = ParameterSet::new();
        insert_encoder_layer(&mut p, seed, "enc.0", adim, heads, units).unwrap();
        p
    }

    fn spec(adim: usize, heads: usize) -> EncoderSpec {
        EncoderSpec {
            adim,
            n_heads: heads,
            norm_position: NormPosition::Post,
            dropout: 0.0,
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn zero_query_keys_identity_values_average_frames() {
        // W_Q = W_K = 0 and W_V = I with an identity output projection makes
        // every output frame the mean over input frames.
        let mut p = ParameterSet::new();
        let adim = 3;
        p.insert("a.wq.0", Tensor::zeros(vec![adim, adim])).unwrap();
        p.insert("a.wk.0", Tensor::zeros(vec![adim, adim])).unwrap();
        let eye = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            Tensor::new(vec![n, n], d).unwrap()
        };
        p.insert("a.wv.0", eye(adim)).unwrap();
        p.insert("a.wo", eye(adim)).unwrap();

        let mut tape = Tape::eval();
        let x = tape
            .constant(
                vec![4, 3],
                vec![
                    1.0, 2.0, 3.0, //
                    5.0, 5.0, 5.0, //
                    -1.0, 0.0, 1.0, //
                    3.0, -3.0, 3.0,
                ],
            )
            .unwrap();
        let mut fwd = Forward::new(&p, &mut tape);
        let y = multihead_self_attention(&mut fwd, "a", x, &spec(adim, 1), None).unwrap();
        let mean = [2.0, 1.0, 3.0];
        for r in 0..4 {
            for c in 0..3 {
                assert!((tape.value(y)[r * 3 + c] - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let adim = 4;
        let p = toy_params(3, adim, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..adim).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let perm = [3usize, 0, 4, 2, 1];

        let run = |order: &[usize]| {
            let mut tape = Tape::eval();
            let data: Vec<f64> = order.iter().flat_map(|&r| rows[r].clone()).collect();
            let x = tape.constant(vec![5, adim], data).unwrap();
            let mut fwd = Forward::new(&p, &mut tape);
            let y =
                multihead_self_attention(&mut fwd, "enc.0.attn", x, &spec(adim, 2), None).unwrap();
            tape.value(y).to_vec()
        };
        let base = run(&[0, 1, 2, 3, 4]);
        let permuted = run(&perm);
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..adim {
                assert!((permuted[i * adim + c] - base[src * adim + c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn two_by_two_hand_attention() {
        // T = 2, Adim = 1-head with hand weights; brute-force evaluation.
        let mut p = ParameterSet::new();
        p.insert(
            "a.wq.0",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        p.insert(
            "a.wk.0",
            Tensor::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap(),
        )
        .unwrap();
        p.insert(
            "a.wv.0",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        p.insert(
            "a.wo",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let x_rows = [[1.0, 0.0], [0.0, 2.0]];

        // Brute force with plain loops.
        let q = [[1.0, 0.0], [0.0, 2.0]];
        let k = [[0.5, 0.0], [0.0, 1.0]];
        let v = [[1.0, 2.0], [0.0, 2.0]];
        let scale = 1.0 / 2f64.sqrt();
        let mut expect = [[0.0; 2]; 2];
        for t in 0..2 {
            let s0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) * scale;
            let s1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            let o = [a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]];
            // wo columns: out = o @ wo.
            expect[t][0] = o[0] * 1.0 + o[1] * 1.0;
            expect[t][1] = o[0] * 0.0 + o[1] * 1.0;
        }

        let mut tape = Tape::eval();
        let x = tape
            .constant(vec![2, 2], x_rows.iter().flatten().copied().collect())
            .unwrap();
        let mut fwd = Forward::new(&p, &mut tape);
        let y = multihead_self_attention(&mut fwd, "a", x, &spec(2, 1), None).unwrap();
        for t in 0..2 {
            for c in 0..2 {
                assert!(
                    (tape.value(y)[t * 2 + c] - expect[t][c]).abs() <= 1e-10,
                    "({t},{c})"
                );
            }
        }
    }

    #[test]
    fn degenerate_sublayers_reduce_to_batch_norm_of_input() {
        // Zero attention and FFN weights with unit gamma, zero beta: the
        // residual path alone feeds both norms, so the output is the
        // batch-normalized input (normalizing twice is idempotent up to eps).
        let adim = 3;
        let mut p = toy_params(1, adim, 1, 4);
        for h in [
            "enc.0.attn.wq.0",
            "enc.0.attn.wk.0",
            "enc.0.attn.wv.0",
            "enc.0.attn.wo",
            "enc.0.ffn.w1",
            "enc.0.ffn.w2",
        ] {
            let t = p.get_mut(h).unwrap();
            let n = t.numel();
            t.data_mut().copy_from_slice(&vec![0.0; n]);
        }
        let mut tape = Tape::train(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..6 * adim).map(|_| rng.random::<f64>() * 4.0).collect();
        let x = tape.constant(vec![6, adim], data.clone()).unwrap();
        let mut fwd = Forward::new(&p, &mut tape);
        let y = encoder_layer_forward(&mut fwd, "enc.0", x, &spec(adim, 1), None).unwrap();

        // Reference batch norm of the raw input.
        let mut expect = data.clone();
        for c in 0..adim {
            let col: Vec<f64> = (0..6).map(|r| data[r * adim + c]).collect();
            let mu = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 6.0;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            for r in 0..6 {
                expect[r * adim + c] = (data[r * adim + c] - mu) * istd;
            }
        }
        // Normalizing twice re-divides by sqrt(1 + eps'), so agreement is
        // O(eps), not exact.
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_layer_keeps_shape_for_any_length() {
        let adim = 4;
        let p = toy_params(7, adim, 2, 8);
        for t in [1usize, 2, 9] {
            let mut tape = Tape::train(0);
            let x = tape.constant(vec![t, adim], vec![0.3; t * adim]).unwrap();
            let mut fwd = Forward::new(&p, &mut tape);
            let y = encoder_layer_forward(&mut fwd, "enc.0", x, &spec(adim, 2), None).unwrap();
            assert_eq!(tape.shape(y), &[t, adim]);
        }
    }

    #[test]
    fn pre_norm_variant_runs_and_differs_from_post_norm() {
        let adim = 4;
        let p = toy_params(15, adim, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data: Vec<f64> = (0..6 * adim)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let run = |norm: NormPosition| {
            let mut tape = Tape::train(0);
            let x = tape.constant(vec![6, adim], data.clone()).unwrap();
            let mut fwd = Forward::new(&p, &mut tape);
            let spec = EncoderSpec {
                adim,
                n_heads: 2,
                norm_position: norm,
                dropout: 0.0,
            };
            let y = encoder_layer_forward(&mut fwd, "enc.0", x, &spec, None).unwrap();
            tape.value(y).to_vec()
        };
        let post = run(NormPosition::Post);
        let pre = run(NormPosition::Pre);
        assert_eq!(post.len(), pre.len());
        assert_ne!(post, pre);
        // Pre-norm keeps an un-normalized residual stream; gradients must
        // still agree with finite differences.
        let x0 = data.clone();
        let loss_fn = |xs: &[f64]| -> crate::error::Result<f64> {
            let mut tape = Tape::train(0);
            let x = tape.constant(vec![6, adim], xs.to_vec())?;
            let mut fwd = Forward::new(&p, &mut tape);
            let spec = EncoderSpec {
                adim,
                n_heads: 2,
                norm_position: NormPosition::Pre,
                dropout: 0.0,
            };
            let y = encoder_layer_forward(&mut fwd, "enc.0", x, &spec, None)?;
            let s = fwd.tape.sum(y)?;
            Ok(tape.value(s)[0])
        };
        let mut tape = Tape::train(0);
        let mut xt = Tensor::new(vec![6, adim], x0.clone()).unwrap();
        xt.requires_grad = true;
        let x = tape.leaf(&xt);
        let (loss, _binds) = {
            let mut fwd = Forward::new(&p, &mut tape);
            let spec = EncoderSpec {
                adim,
                n_heads: 2,
                norm_position: NormPosition::Pre,
                dropout: 0.0,
            };
            let y = encoder_layer_forward(&mut fwd, "enc.0", x, &spec, None).unwrap();
            let s = fwd.tape.sum(y).unwrap();
            (s, fwd.binds)
        };
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();
        let numeric = finite_diff_grad(&x0, 1e-5, loss_fn).unwrap();
        assert!(max_rel_err(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn encoder_layer_gradients_match_finite_differences() {
        let adim = 4;
        let params = toy_params(11, adim, 2, 6);
        let t = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0: Vec<f64> = (0..t * adim).map(|_| rng.random::<f64>() - 0.5).collect();

        // Gradients w.r.t. one attention weight and the input, both compared
        // against central differences through the whole layer.
        let loss_fn = |params: &ParameterSet, x: &[f64]| -> crate::error::Result<f64> {
            let mut tape = Tape::train(3);
            let xv = tape.constant(vec![t, adim], x.to_vec())?;
            let mut fwd = Forward::new(params, &mut tape);
            let y = encoder_layer_forward(&mut fwd, "enc.0", xv, &spec(adim, 2), None)?;
            let s = tape.sum(y)?;
            let sq = tape.mul(s, s)?;
            Ok(tape.value(sq)[0])
        };

        let name = "enc.0.attn.wq.0";
        let w0 = params.get(name).unwrap().data().to_vec();
        let analytic = {
            let mut tape = Tape::train(3);
            let xv = tape.constant(vec![t, adim], x0.clone()).unwrap();
            let (binds, loss) = {
                let mut fwd = Forward::new(&params, &mut tape);
                let y = encoder_layer_forward(&mut fwd, "enc.0", xv, &spec(adim, 2), None).unwrap();
                let s = fwd.tape.sum(y).unwrap();
                let sq = fwd.tape.mul(s, s).unwrap();
                (fwd.binds, sq)
            };
            tape.backward(loss).unwrap();
            let var = binds
                .entries()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .unwrap();
            tape.grad(var).unwrap().to_vec()
        };
        let numeric = finite_diff_grad(&w0, 1e-5, |w| {
            let mut p2 = params.clone();
            p2.get_mut(name).unwrap().data_mut().copy_from_slice(w);
            loss_fn(&p2, &x0)
        })
        .unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-4, "rel err {err}");
    }
}
