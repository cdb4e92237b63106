//! Layer parameter structs and their forward passes.
//!
//! Structs are generic over the tensor handle so the same shape definitions
//! serve both stored weights (`Matrix`) and tape-bound variables (`Var`).

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fully connected layer: y = x·Wᵀ + b, weight is out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// Multi-head projection weights for one attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub w_q: Linear<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
    pub w_o: Linear<T>,
    pub heads: usize,
}

/// Position-wise feed-forward sublayer (width 4·D, ReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
}

/// One transformer layer: attention sublayer + feed-forward sublayer, each
/// with residual connection and post-layer-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer<T> {
    pub attn: Attention<T>,
    pub ff: FeedForward<T>,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Attention<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            w_q: self.w_q.map(f),
            w_k: self.w_k.map(f),
            w_v: self.w_v.map(f),
            w_o: self.w_o.map(f),
            heads: self.heads,
        }
    }
}

impl<T> FeedForward<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FeedForward<U> {
        FeedForward {
            lin1: self.lin1.map(f),
            lin2: self.lin2.map(f),
        }
    }
}

impl<T> TransformerLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TransformerLayer<U> {
        TransformerLayer {
            attn: self.attn.map(f),
            ff: self.ff.map(f),
        }
    }
}

/// Uniform init in [−1/√fan_in, +1/√fan_in].
pub fn init_linear(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Linear<Matrix> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let mut weight = Matrix::zeros(out_dim, in_dim);
    for v in weight.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    let mut bias = Matrix::zeros(1, out_dim);
    for v in bias.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    Linear { weight, bias }
}

pub fn init_attention(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Attention<Matrix> {
    assert!(dim % heads == 0, "model dim must be divisible by head count");
    Attention {
        w_q: init_linear(dim, dim, rng),
        w_k: init_linear(dim, dim, rng),
        w_v: init_linear(dim, dim, rng),
        w_o: init_linear(dim, dim, rng),
        heads,
    }
}

pub fn init_transformer_layer(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> TransformerLayer<Matrix> {
    TransformerLayer {
        attn: init_attention(dim, heads, rng),
        ff: FeedForward {
            lin1: init_linear(4 * dim, dim, rng),
            lin2: init_linear(dim, 4 * dim, rng),
        },
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- tape-side forwards ----

pub fn linear_t(tape: &mut Tape, x: Var, p: &Linear<Var>) -> Result<Var> {
    let xw = tape.matmul_transpose_b(x, p.weight)?;
    tape.add_row_broadcast(xw, p.bias)
}

pub fn mlp_t(tape: &mut Tape, x: Var, layers: &[&Linear<Var>]) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = linear_t(tape, h, layer)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Scaled dot-product multi-head attention, pre-residual output.
pub fn multi_head_attention_t(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    p: &Attention<Var>,
) -> Result<Var> {
    let dim = tape.value(queries).cols();
    if tape.value(keys).cols() != dim || tape.value(values).cols() != dim {
        return Err(Error::dim("attention", "query/key/value widths differ"));
    }
    if tape.value(keys).rows() != tape.value(values).rows() {
        return Err(Error::dim("attention", "key/value row counts differ"));
    }
    if dim % p.heads != 0 {
        return Err(Error::dim("attention", "dim not divisible by head count"));
    }
    let head_dim = dim / p.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = linear_t(tape, queries, &p.w_q)?;
    let k = linear_t(tape, keys, &p.w_k)?;
    let v = linear_t(tape, values, &p.w_v)?;

    let mut head_outputs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let logits = tape.matmul_transpose_b(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    linear_t(tape, merged, &p.w_o)
}

/// Attention sublayer: layer_norm(q + MHA(q, k, v)). Empty key set returns
/// the queries unchanged so an empty history is a no-op rather than an error.
pub fn attention_block_t(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    p: &Attention<Var>,
) -> Result<Var> {
    if tape.value(keys).rows() == 0 {
        return Ok(queries);
    }
    let attended = multi_head_attention_t(tape, queries, keys, values, p)?;
    let residual = tape.add(queries, attended)?;
    Ok(tape.layer_norm_rows(residual))
}

fn feed_forward_block_t(tape: &mut Tape, x: Var, p: &FeedForward<Var>) -> Result<Var> {
    let h = linear_t(tape, x, &p.lin1)?;
    let h = tape.relu(h);
    let h = linear_t(tape, h, &p.lin2)?;
    let residual = tape.add(x, h)?;
    Ok(tape.layer_norm_rows(residual))
}

/// Full layer: attention sublayer then feed-forward sublayer. `kv` rows are
/// the attended set; pass `q == kv` for self-attention.
pub fn transformer_layer_t(
    tape: &mut Tape,
    q: Var,
    kv: Var,
    p: &TransformerLayer<Var>,
) -> Result<Var> {
    if tape.value(kv).rows() == 0 {
        return Ok(q);
    }
    let x = attention_block_t(tape, q, kv, kv, &p.attn)?;
    feed_forward_block_t(tape, x, &p.ff)
}

// ---- plain-matrix entry points ----

fn bind_linear(tape: &mut Tape, p: &Linear<Matrix>) -> Linear<Var> {
    Linear {
        weight: tape.leaf(p.weight.clone()),
        bias: tape.leaf(p.bias.clone()),
    }
}

fn bind_attention(tape: &mut Tape, p: &Attention<Matrix>) -> Attention<Var> {
    Attention {
        w_q: bind_linear(tape, &p.w_q),
        w_k: bind_linear(tape, &p.w_k),
        w_v: bind_linear(tape, &p.w_v),
        w_o: bind_linear(tape, &p.w_o),
        heads: p.heads,
    }
}

/// y = x·Wᵀ + b.
pub fn linear_forward(x: &Matrix, p: &Linear<Matrix>) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = bind_linear(&mut tape, p);
    let y = linear_t(&mut tape, xv, &pv)?;
    Ok(tape.value(y).clone())
}

/// Chain of linear layers with ReLU between them (none after the last).
pub fn mlp_forward(x: &Matrix, layers: &[Linear<Matrix>]) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bound: Vec<Linear<Var>> = layers.iter().map(|l| bind_linear(&mut tape, l)).collect();
    let refs: Vec<&Linear<Var>> = bound.iter().collect();
    let y = mlp_t(&mut tape, xv, &refs)?;
    Ok(tape.value(y).clone())
}

/// Attention sublayer on plain matrices (residual + post-norm).
pub fn attention_forward(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    p: &Attention<Matrix>,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let q = tape.leaf(queries.clone());
    let k = tape.leaf(keys.clone());
    let v = tape.leaf(values.clone());
    let pv = bind_attention(&mut tape, p);
    let out = attention_block_t(&mut tape, q, k, v, &pv)?;
    Ok(tape.value(out).clone())
}

/// Pre-residual multi-head attention output, exposed for tests of the raw
/// attention behaviour.
pub fn attention_core_forward(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    p: &Attention<Matrix>,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let q = tape.leaf(queries.clone());
    let k = tape.leaf(keys.clone());
    let v = tape.leaf(values.clone());
    let pv = bind_attention(&mut tape, p);
    let out = multi_head_attention_t(&mut tape, q, k, v, &pv)?;
    Ok(tape.value(out).clone())
}

/// Identity-projection attention params, useful in tests.
pub fn identity_attention(dim: usize, heads: usize) -> Attention<Matrix> {
    let id = || Linear {
        weight: Matrix::identity(dim),
        bias: Matrix::zeros(1, dim),
    };
    Attention {
        w_q: id(),
        w_k: id(),
        w_v: id(),
        w_o: id(),
        heads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_case() {
        let p = Linear {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(1, 2),
        };
        let y = linear_forward(&mat(&[vec![1.0, 2.0]]), &p).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_input_passes_bias() {
        let p = Linear {
            weight: mat(&[vec![0.7, -0.2], vec![1.5, 0.4]]),
            bias: Matrix::row_vector(&[3.0, 4.0]),
        };
        let y = linear_forward(&mat(&[vec![0.0, 0.0]]), &p).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_direct_matrix_evaluation() {
        let p = Linear {
            weight: mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            bias: Matrix::zeros(1, 2),
        };
        let y = linear_forward(&mat(&[vec![1.0, 1.0]]), &p).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn linear_dimension_error() {
        let p = Linear {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
        };
        assert!(linear_forward(&mat(&[vec![1.0, 2.0]]), &p).is_err());
    }

    #[test]
    fn mlp_identity_on_nonnegative() {
        let id = Linear {
            weight: Matrix::identity(3),
            bias: Matrix::zeros(1, 3),
        };
        let x = mat(&[vec![0.5, 0.0, 2.0]]);
        let y = mlp_forward(&x, &[id.clone(), id]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mlp_relu_clips_negative() {
        let one = Linear {
            weight: Matrix::identity(1),
            bias: Matrix::zeros(1, 1),
        };
        let y = mlp_forward(&mat(&[vec![-1.0]]), &[one.clone(), one]).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn mlp_shape_contract() {
        let mut rng = seeded_rng(7);
        let l1 = init_linear(16, 8, &mut rng);
        let l2 = init_linear(16, 16, &mut rng);
        let x = Matrix::zeros(5, 8);
        let y = mlp_forward(&x, &[l1, l2]).unwrap();
        assert_eq!((y.rows(), y.cols()), (5, 16));
    }

    #[test]
    fn attention_single_key_weight_one() {
        // one key row equal to the single query with identity projections:
        // softmax over one element is 1, so the pre-residual output is the value
        let p = identity_attention(4, 1);
        let q = mat(&[vec![0.3, -0.7, 1.1, 0.2]]);
        let out = attention_core_forward(&q, &q, &q, &p).unwrap();
        for (o, e) in out.data().iter().zip(q.data()) {
            assert_relative_eq!(o, e, max_relative = 1e-12);
        }
    }

    #[test]
    fn attention_identical_values_collapse() {
        // all value rows identical → every query's pre-residual output is that row
        let p = identity_attention(4, 2);
        let q = mat(&[vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.5, 0.0, 2.0]]);
        let k = mat(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.5, 0.5, 0.5, 0.5]]);
        let vrow = vec![0.9, -0.4, 0.6, 0.1];
        let v = mat(&[vrow.clone(), vrow.clone(), vrow.clone()]);
        let out = attention_core_forward(&q, &k, &v, &p).unwrap();
        for r in 0..out.rows() {
            for (o, e) in out.row(r).iter().zip(&vrow) {
                assert_relative_eq!(o, e, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn attention_key_value_permutation_invariant() {
        let mut rng = seeded_rng(42);
        let p = init_attention(8, 2, &mut rng);
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            let mut m = Matrix::zeros(r, c);
            for v in m.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            m
        };
        let q = rand_mat(&mut rng, 4, 8);
        let k = rand_mat(&mut rng, 4, 8);
        let v = rand_mat(&mut rng, 4, 8);
        let base = attention_forward(&q, &k, &v, &p).unwrap();

        let perm = [2usize, 0, 3, 1];
        let kp = Matrix::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let vp = Matrix::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let permuted = attention_forward(&q, &kp, &vp, &p).unwrap();
        for (a, b) in base.data().iter().zip(permuted.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_query_permutation_equivariant() {
        let mut rng = seeded_rng(43);
        let p = init_attention(8, 4, &mut rng);
        let mut q = Matrix::zeros(3, 8);
        for v in q.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut k = Matrix::zeros(5, 8);
        for v in k.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let base = attention_forward(&q, &k, &k, &p).unwrap();
        let perm = [1usize, 2, 0];
        let qp = Matrix::from_rows(&perm.iter().map(|&i| q.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let out = attention_forward(&qp, &k, &k, &p).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in out.row(r).iter().zip(base.row(src)) {
                assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_empty_keys_returns_queries() {
        let p = identity_attention(4, 1);
        let q = mat(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let k = Matrix::zeros(0, 4);
        let out = attention_forward(&q, &k, &k, &p).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_linear(8, 16, &mut seeded_rng(5));
        let b = init_linear(8, 16, &mut seeded_rng(5));
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.bias, b.bias);
        let bound = 1.0 / 4.0;
        assert!(a.weight.data().iter().all(|v| v.abs() <= bound));
    }
}
