//! Gradient audit: every layer and every loss term checked against central
//! finite differences. Backs the `gradcheck` CLI command.

use crate::error::Result;
use crate::geometry::{BBox, GtTrack};
use crate::matcher::{
    association_loss, association_loss_grad, ClipFrame, MatcherBranch, MatcherParams,
};
use crate::math::gradcheck::grad_check;
use crate::math::layers::{
    attention_block_t, init_attention, init_linear, init_transformer_layer, linear_t, mlp_t,
    seeded_rng, transformer_layer_t, Attention, Linear, TransformerLayer,
};
use crate::math::matrix::Matrix;
use crate::math::tape::{NllTerm, Tape, Var};
use crate::params::{ModelConfig, ModelParams};
use crate::rescoring::{rescoring_loss, Detection, FocalMatchConfig};
use crate::train::{total_loss, total_loss_grad, Clip, TrainConfig, TrainVideo};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One audited gradient with its worst relative error.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AuditCase {
    pub name: &'static str,
    pub max_rel_err: f64,
}

pub const AUDIT_TOLERANCE: f64 = 1e-4;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let mut m = Matrix::zeros(r, c);
    for v in m.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    m
}

/// Scalar readout Σ w ⊙ out, built from tape ops so it differentiates.
fn weighted_readout(tape: &mut Tape, out: Var, w: &Matrix) -> Var {
    let mut pieces = Vec::new();
    for r in 0..w.rows() {
        let row = tape.gather_rows(out, vec![r]);
        let wrow = tape.leaf(Matrix::row_vector(w.row(r)));
        let dot = tape.matmul_transpose_b(row, wrow).expect("readout dot");
        pieces.push((dot, 1.0));
    }
    tape.add_scaled(pieces)
}

/// Check the gradient of `build` (a tape program over one input leaf) with
/// respect to the input, under a fixed random readout.
fn check_input_gradient(
    input: &Matrix,
    readout: &Matrix,
    eps: f64,
    build: impl Fn(&mut Tape, Var) -> Var,
) -> Result<f64> {
    let (r, c) = (input.rows(), input.cols());
    let mut tape = Tape::new();
    let leaf = tape.leaf(input.clone());
    let out = build(&mut tape, leaf);
    let loss = weighted_readout(&mut tape, out, readout);
    let analytic = tape.gradients_for(loss, &[leaf])?.remove(0);

    let f = |theta: &[f64]| {
        let x = Matrix::from_vec(r, c, theta.to_vec()).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(x);
        let out = build(&mut tape, leaf);
        let loss = weighted_readout(&mut tape, out, readout);
        tape.scalar(loss)
    };
    grad_check(f, input.data(), analytic.data(), eps)
}

fn audit_linear(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let p = init_linear(4, 8, rng);
    let input = rand_mat(rng, 8, 8);
    let readout = rand_mat(rng, 8, 4);
    let err = check_input_gradient(&input, &readout, eps, |tape, leaf| {
        let w = tape.leaf(p.weight.clone());
        let b = tape.leaf(p.bias.clone());
        linear_t(tape, leaf, &Linear { weight: w, bias: b }).unwrap()
    })?;
    // and with respect to the weights
    let input2 = rand_mat(rng, 6, 8);
    let readout2 = rand_mat(rng, 6, 4);
    let werr = {
        let mut tape = Tape::new();
        let x = tape.leaf(input2.clone());
        let w = tape.leaf(p.weight.clone());
        let b = tape.leaf(p.bias.clone());
        let out = linear_t(&mut tape, x, &Linear { weight: w, bias: b })?;
        let loss = weighted_readout(&mut tape, out, &readout2);
        let grads = tape.gradients_for(loss, &[w, b])?;
        let mut theta = p.weight.data().to_vec();
        theta.extend_from_slice(p.bias.data());
        let mut analytic = grads[0].data().to_vec();
        analytic.extend_from_slice(grads[1].data());
        let f = |th: &[f64]| {
            let weight = Matrix::from_vec(4, 8, th[..32].to_vec()).unwrap();
            let bias = Matrix::from_vec(1, 4, th[32..].to_vec()).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(input2.clone());
            let w = tape.leaf(weight);
            let b = tape.leaf(bias);
            let out = linear_t(&mut tape, x, &Linear { weight: w, bias: b }).unwrap();
            let loss = weighted_readout(&mut tape, out, &readout2);
            tape.scalar(loss)
        };
        grad_check(f, &theta, &analytic, eps)?
    };
    Ok(AuditCase {
        name: "linear",
        max_rel_err: err.max(werr),
    })
}

fn audit_mlp(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let l1 = init_linear(6, 5, rng);
    let l2 = init_linear(4, 6, rng);
    let input = rand_mat(rng, 3, 5);
    let readout = rand_mat(rng, 3, 4);
    let err = check_input_gradient(&input, &readout, eps, |tape, leaf| {
        let b1 = Linear { weight: tape.leaf(l1.weight.clone()), bias: tape.leaf(l1.bias.clone()) };
        let b2 = Linear { weight: tape.leaf(l2.weight.clone()), bias: tape.leaf(l2.bias.clone()) };
        mlp_t(tape, leaf, &[&b1, &b2]).unwrap()
    })?;
    Ok(AuditCase { name: "mlp-relu", max_rel_err: err })
}

fn audit_softmax(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let input = rand_mat(rng, 4, 6);
    let readout = rand_mat(rng, 4, 6);
    let err = check_input_gradient(&input, &readout, eps, |tape, leaf| {
        tape.softmax_rows(leaf).unwrap()
    })?;
    Ok(AuditCase { name: "softmax-rows", max_rel_err: err })
}

fn audit_layer_norm(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let input = rand_mat(rng, 4, 8);
    let readout = rand_mat(rng, 4, 8);
    let err = check_input_gradient(&input, &readout, eps, |tape, leaf| {
        tape.layer_norm_rows(leaf)
    })?;
    Ok(AuditCase { name: "layer-norm", max_rel_err: err })
}

fn audit_attention(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let p = init_attention(8, 2, rng);
    let kv = rand_mat(rng, 5, 8);
    let input = rand_mat(rng, 3, 8);
    let readout = rand_mat(rng, 3, 8);
    let bind = |tape: &mut Tape, p: &Attention<Matrix>| -> Attention<Var> {
        Attention {
            w_q: Linear { weight: tape.leaf(p.w_q.weight.clone()), bias: tape.leaf(p.w_q.bias.clone()) },
            w_k: Linear { weight: tape.leaf(p.w_k.weight.clone()), bias: tape.leaf(p.w_k.bias.clone()) },
            w_v: Linear { weight: tape.leaf(p.w_v.weight.clone()), bias: tape.leaf(p.w_v.bias.clone()) },
            w_o: Linear { weight: tape.leaf(p.w_o.weight.clone()), bias: tape.leaf(p.w_o.bias.clone()) },
            heads: p.heads,
        }
    };
    let err = check_input_gradient(&input, &readout, eps, |tape, leaf| {
        let kvv = tape.leaf(kv.clone());
        let pv = bind(tape, &p);
        attention_block_t(tape, leaf, kvv, kvv, &pv).unwrap()
    })?;
    Ok(AuditCase { name: "attention-block", max_rel_err: err })
}

fn audit_transformer_layer(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let p = init_transformer_layer(8, 2, rng);
    let input = rand_mat(rng, 4, 8);
    let readout = rand_mat(rng, 4, 8);
    let err = check_input_gradient(&input, &readout, eps, |tape, leaf| {
        let mut leafify = |m: &Matrix| tape_leaf_helper(tape, m);
        let pv = p.map(&mut leafify);
        // self-attention form: q == kv
        transformer_layer_t(tape, leaf, leaf, &pv).unwrap()
    })?;
    Ok(AuditCase { name: "transformer-layer", max_rel_err: err })
}

fn tape_leaf_helper(tape: &mut Tape, m: &Matrix) -> Var {
    tape.leaf(m.clone())
}

fn audit_assoc_nll(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let input = rand_mat(rng, 4, 5);
    let terms = vec![
        NllTerm { row: 0, target: 2, weight: 1.0 },
        NllTerm { row: 1, target: 4, weight: 1.0 },
        NllTerm { row: 3, target: 0, weight: 2.0 },
        NllTerm { row: 0, target: 1, weight: 0.5 },
    ];
    let mut tape = Tape::new();
    let leaf = tape.leaf(input.clone());
    let loss = tape.assoc_nll(leaf, terms.clone());
    let analytic = tape.gradients_for(loss, &[leaf])?.remove(0);
    let f = |theta: &[f64]| {
        let x = Matrix::from_vec(4, 5, theta.to_vec()).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(x);
        let loss = tape.assoc_nll(leaf, terms.clone());
        tape.scalar(loss)
    };
    let err = grad_check(f, input.data(), analytic.data(), eps)?;
    Ok(AuditCase { name: "assoc-nll", max_rel_err: err })
}

fn audit_focal(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let logits = rand_mat(rng, 6, 1);
    let positive = vec![true, false, true, false, false, true];
    let mut tape = Tape::new();
    let leaf = tape.leaf(logits.clone());
    let loss = tape.focal_loss_sigmoid(leaf, positive.clone(), 0.25, 2.0)?;
    let analytic = tape.gradients_for(loss, &[leaf])?.remove(0);
    let f = |theta: &[f64]| {
        let x = Matrix::from_vec(6, 1, theta.to_vec()).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(x);
        let loss = tape.focal_loss_sigmoid(leaf, positive.clone(), 0.25, 2.0).unwrap();
        tape.scalar(loss)
    };
    let err = grad_check(f, logits.data(), analytic.data(), eps)?;
    Ok(AuditCase { name: "focal-loss", max_rel_err: err })
}

fn small_matcher(rng: &mut ChaCha8Rng) -> MatcherParams<Matrix> {
    let branch = |rng: &mut ChaCha8Rng| MatcherBranch {
        encoder: init_transformer_layer(8, 2, rng),
        decoder: init_transformer_layer(8, 2, rng),
        score_proj: init_linear(8, 8, rng),
    };
    MatcherParams {
        embedder: [init_linear(8, 6, rng), init_linear(8, 8, rng)],
        st: branch(rng),
        lt: branch(rng),
    }
}

fn toy_clip(rng: &mut ChaCha8Rng) -> (Vec<ClipFrame>, Vec<GtTrack>) {
    // kept small: the check's noise floor scales with the loss magnitude
    let b = |x: f64| BBox::new(x, 0.0, x + 10.0, 10.0);
    let mut q = || (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let frames = vec![
        ClipFrame { frame: 1, boxes: vec![b(0.0), b(50.0)], queries: vec![q(), q()] },
        ClipFrame { frame: 2, boxes: vec![b(2.0)], queries: vec![q()] },
    ];
    let gt = vec![
        GtTrack { id: 1, entries: vec![(1, b(0.0)), (2, b(2.0))], text: String::new() },
        GtTrack { id: 2, entries: vec![(1, b(50.0))], text: String::new() },
    ];
    (frames, gt)
}

fn audit_association(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let params = small_matcher(rng);
    let (frames, gt) = toy_clip(rng);
    let (_, grad) = association_loss_grad(&frames, &gt, &params, 6)?;
    let mut theta = Vec::new();
    params.map(&mut |m: &Matrix| theta.extend_from_slice(m.data()));
    let mut analytic = Vec::new();
    grad.map(&mut |m: &Matrix| analytic.extend_from_slice(m.data()));
    let f = |th: &[f64]| {
        let mut pos = 0usize;
        let candidate = params.map(&mut |m: &Matrix| {
            let n = m.rows() * m.cols();
            let out = Matrix::from_vec(m.rows(), m.cols(), th[pos..pos + n].to_vec()).unwrap();
            pos += n;
            out
        });
        association_loss(&frames, &gt, &candidate, 6).unwrap()
    };
    let err = grad_check(f, &theta, &analytic, eps)?;
    Ok(AuditCase { name: "association-loss", max_rel_err: err })
}

fn audit_rescoring(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let head = init_linear(1, 6, rng);
    let cfg = FocalMatchConfig::default();
    let b = |x: f64, y: f64| BBox::new(x, y, x + 0.2, y + 0.1);
    let mut q = || (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let dets: Vec<Detection> = [b(0.1, 0.1), b(0.5, 0.5), b(0.2, 0.7)]
        .into_iter()
        .map(|bbox| Detection { frame: 1, bbox, score_orig: 0.5, query: q(), text: String::new() })
        .collect();
    let gts = vec![b(0.11, 0.1), b(0.5, 0.52)];
    let (_, grad) = rescoring_loss(&dets, &gts, &head, &cfg)?;
    let mut theta = head.weight.data().to_vec();
    theta.extend_from_slice(head.bias.data());
    let mut analytic = grad.weight.data().to_vec();
    analytic.extend_from_slice(grad.bias.data());
    let f = |th: &[f64]| {
        let h = Linear {
            weight: Matrix::from_vec(1, 6, th[..6].to_vec()).unwrap(),
            bias: Matrix::from_vec(1, 1, th[6..].to_vec()).unwrap(),
        };
        rescoring_loss(&dets, &gts, &h, &cfg).unwrap().0
    };
    let err = grad_check(f, &theta, &analytic, eps)?;
    Ok(AuditCase { name: "rescoring-loss", max_rel_err: err })
}

fn audit_total(rng: &mut ChaCha8Rng, eps: f64) -> Result<AuditCase> {
    let model_cfg = ModelConfig { query_dim: 6, model_dim: 8, heads: 2, embed_hidden: 8 };
    let params = ModelParams::init(model_cfg, rng.random_range(0..1_000_000))?;
    let cfg = TrainConfig::default();
    let b = |x: f64| BBox::new(x, 0.0, x + 60.0, 40.0);
    let mut q = || (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let det = |frame: u64, bbox: BBox, q: Vec<f64>| Detection {
        frame,
        bbox,
        score_orig: 0.7,
        query: q,
        text: String::new(),
    };
    let frames = vec![
        (1u64, vec![det(1, b(0.0), q()), det(1, b(300.0), q())]),
        (2u64, vec![det(2, b(6.0), q())]),
    ];
    let gt = vec![
        GtTrack { id: 1, entries: vec![(1, b(1.0)), (2, b(7.0))], text: String::new() },
        GtTrack { id: 2, entries: vec![(1, b(301.0))], text: String::new() },
    ];
    let clip = Clip { frames: &frames, gt: &gt };
    let (_, grads) = total_loss_grad(clip, &params, &cfg)?;
    let theta = params.flatten();
    let analytic: Vec<f64> = grads
        .tensors
        .iter()
        .flat_map(|(_, m)| m.data().iter().cloned())
        .collect();
    let mut probe = params.clone();
    let f = move |th: &[f64]| {
        probe.assign_flat(th).unwrap();
        total_loss(clip, &probe, &cfg).unwrap()
    };
    let err = grad_check(f, &theta, &analytic, eps)?;
    Ok(AuditCase { name: "total-loss", max_rel_err: err })
}

/// Run the full audit. Every case must come in under [`AUDIT_TOLERANCE`].
///
/// Composite losses are checked at step size 1e-3 (the top of grad_check's
/// range): they sit around 5–20 in magnitude, so at smaller steps the f64
/// cancellation noise of the two loss evaluations exceeds 1e-4 relative on
/// coordinates whose true gradient is below ~1e-6.
pub fn run_audit(seed: u64, eps: f64) -> Result<Vec<AuditCase>> {
    let mut rng = seeded_rng(seed);
    let composite_eps = eps.max(1e-3);
    Ok(vec![
        audit_linear(&mut rng, eps)?,
        audit_mlp(&mut rng, eps)?,
        audit_softmax(&mut rng, eps)?,
        audit_layer_norm(&mut rng, eps)?,
        audit_attention(&mut rng, eps)?,
        audit_transformer_layer(&mut rng, eps)?,
        audit_assoc_nll(&mut rng, eps)?,
        audit_focal(&mut rng, eps)?,
        audit_rescoring(&mut rng, composite_eps)?,
        audit_association(&mut rng, composite_eps)?,
        audit_total(&mut rng, composite_eps)?,
    ])
}
