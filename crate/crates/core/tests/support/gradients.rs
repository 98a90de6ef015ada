//! Central-difference checks of every differentiable operation, the
//! reconstruction loss and the language-model losses. Each check panics on
//! failure; the `gradcheck` tests and the acceptance run share them.

#![allow(dead_code)]

use radvl_core::corpus::{render_report, tokenize, Task};
use radvl_core::lm::{
    assemble_sequence, default_vocab, stage1_loss, task_loss, LmConfig, LmModel, Prompting, SequenceParts,
    TokenSequence,
};
use radvl_core::seed;
use radvl_core::tensor::{finite_diff_check, PoolMode, Tape, Tensor, Var};
use radvl_core::tokenizer::{clinical_recon_loss, FeatureEncoder, LossWeights, TokenizerArch, VqTokenizer};
use rand::Rng;

type R = radvl_core::tensor::Result<Var>;

const POINTS: u64 = 5;
const POLY: f64 = 1e-8;
const SMOOTH: f64 = 1e-4;

fn randn(shape: &[usize], seed_value: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seed::rng(seed_value))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], seed_value: u64) -> Tensor {
    let mut rng = seed::rng(seed_value);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| {
        let m = rng.gen_range(0.2..2.0);
        if rng.gen::<bool>() { m } else { -m }
    });
    Tensor::new(shape.to_vec(), data.collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output coordinate contributes to the checked gradient.
fn project(tape: &mut Tape, y: Var, seed_value: u64) -> R {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.leaf(randn(&shape, seed_value ^ 0x5eed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, bound: f64, eps: f64, shape: &[usize], gen: fn(&[usize], u64) -> Tensor, f: impl Fn(&mut Tape, Var, u64) -> R) {
    for k in 0..POINTS {
        let x = gen(shape, 100 + k);
        let err = finite_diff_check(|t, v| f(t, v, k), &x, eps).unwrap();
        assert!(err < bound, "{name} point {k}: relative error {err:e} ≥ {bound:e}");
    }
}

fn unary(name: &str, bound: f64, gen: fn(&[usize], u64) -> Tensor, op: fn(&mut Tape, Var) -> R) {
    let eps = if bound == POLY { 1e-5 } else { 1e-6 };
    check(name, bound, eps, &[3, 4], gen, |t, x, k| {
        let y = op(t, x)?;
        project(t, y, k)
    });
}

/// Every check, in order.
pub const ALL: [(&str, fn()); 11] = [
    ("elementwise_ops", elementwise_ops),
    ("reductions_and_reshapes", reductions_and_reshapes),
    ("straight_through_passes_gradient_unchanged", straight_through_passes_gradient_unchanged),
    ("binary_ops_in_each_argument", binary_ops_in_each_argument),
    ("image_gradients", image_gradients),
    ("normalisation_and_attention", normalisation_and_attention),
    ("classification_losses", classification_losses),
    ("reconstruction_loss_wrt_reconstruction", reconstruction_loss_wrt_reconstruction),
    ("reconstruction_loss_wrt_decoder_parameters", reconstruction_loss_wrt_decoder_parameters),
    ("stage1_loss_on_small_model", stage1_loss_on_small_model),
    ("task_loss_on_small_model", task_loss_on_small_model),
];

pub fn elementwise_ops() {
    unary("scale", POLY, randn, |t, x| Ok(t.scale(x, -1.7)));
    unary("shift", POLY, randn, |t, x| Ok(t.shift(x, 0.3)));
    unary("square", POLY, randn, |t, x| Ok(t.square(x)));
    unary("relu", POLY, away_from_zero, |t, x| Ok(t.relu(x)));
    unary("abs", POLY, away_from_zero, |t, x| Ok(t.abs(x)));
    unary("gelu", SMOOTH, randn, |t, x| Ok(t.gelu(x)));
    unary("tanh", SMOOTH, randn, |t, x| Ok(t.tanh(x)));
    unary("sigmoid", SMOOTH, randn, |t, x| Ok(t.sigmoid(x)));
    unary("exp", SMOOTH, randn, |t, x| Ok(t.exp(x)));
    unary("softmax_rows", SMOOTH, randn, |t, x| t.softmax_rows(x));
}

pub fn reductions_and_reshapes() {
    unary("sum", POLY, randn, |t, x| Ok(t.sum(x)));
    unary("mean", POLY, randn, |t, x| t.mean(x));
    unary("reshape", POLY, randn, |t, x| t.reshape(x, &[2, 6]));
    unary("gather", POLY, randn, |t, x| t.gather(x, vec![0, 5, 5, 11, 2, 7], &[2, 3]));
    unary("gather_rows", POLY, randn, |t, x| t.gather_rows(x, vec![2, 0, 2]));
    unary("pool_mean", POLY, randn, |t, x| t.pool_rows(x, 3, PoolMode::Mean));
    // Random normal rows have no ties, so the max is differentiable.
    unary("pool_max", POLY, randn, |t, x| t.pool_rows(x, 3, PoolMode::Max));
    unary("concat_cols", POLY, randn, |t, x| {
        let c = t.leaf(randn(&[3, 2], 9));
        t.concat_cols(&[x, c, x])
    });
}

/// The estimator substitutes the identity for the (zero) true derivative.
pub fn straight_through_passes_gradient_unchanged() {
    let mut t = Tape::new();
    let x = t.param(randn(&[3, 4], 1));
    let y = t.square(x);
    let q = t.straight_through(y, randn(&[3, 4], 2)).unwrap();
    assert_eq!(t.value(q), &randn(&[3, 4], 2));
    let out = project(&mut t, q, 3).unwrap();
    t.backward(out).unwrap();
    let w = randn(&[3, 4], 3 ^ 0x5eed);
    let xs = randn(&[3, 4], 1);
    for ((g, w), x) in t.grad(x).unwrap().iter().zip(w.data()).zip(xs.data()) {
        assert!((g - 2.0 * x * w).abs() < 1e-12);
    }
}

pub fn binary_ops_in_each_argument() {
    for (name, op) in [
        ("add", Tape::add as fn(&mut Tape, Var, Var) -> R),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
    ] {
        check(name, POLY, 1e-5, &[3, 4], randn, |t, x, k| {
            let o = t.leaf(randn(&[3, 4], 50 + k));
            let y = op(t, x, o)?;
            let z = op(t, o, y)?;
            project(t, z, k)
        });
    }
    check("matmul.a", POLY, 1e-5, &[3, 4], randn, |t, x, k| {
        let b = t.leaf(randn(&[4, 2], 60 + k));
        let y = t.matmul(x, b)?;
        project(t, y, k)
    });
    check("matmul.b", POLY, 1e-5, &[4, 2], randn, |t, x, k| {
        let a = t.leaf(randn(&[3, 4], 70 + k));
        let y = t.matmul(a, x)?;
        project(t, y, k)
    });
    check("add_row.x", POLY, 1e-5, &[3, 4], randn, |t, x, k| {
        let b = t.leaf(randn(&[4], 80 + k));
        let y = t.add_row(x, b)?;
        project(t, y, k)
    });
    check("add_row.bias", POLY, 1e-5, &[4], randn, |t, b, k| {
        let x = t.leaf(randn(&[3, 4], 90 + k));
        let y = t.add_row(x, b)?;
        project(t, y, k)
    });
}

pub fn image_gradients() {
    check("image_grad_x", POLY, 1e-5, &[2, 3, 4], randn, |t, x, k| {
        let g = t.image_grad_x(x)?;
        project(t, g, k)
    });
    check("image_grad_y", POLY, 1e-5, &[3, 4], randn, |t, x, k| {
        let g = t.image_grad_y(x)?;
        project(t, g, k)
    });
}

pub fn normalisation_and_attention() {
    for arg in 0..3 {
        let shape: &[usize] = if arg == 0 { &[3, 6] } else { &[6] };
        check("layer_norm", SMOOTH, 1e-6, shape, randn, move |t, v, k| {
            let x = if arg == 0 { v } else { t.leaf(randn(&[3, 6], 20 + k)) };
            let g = if arg == 1 { v } else { t.leaf(randn(&[6], 30 + k)) };
            let b = if arg == 2 { v } else { t.leaf(randn(&[6], 40 + k)) };
            let y = t.layer_norm(x, g, b)?;
            project(t, y, k)
        });
    }
    check("causal_attention", SMOOTH, 1e-6, &[5, 12], randn, |t, qkv, k| {
        let y = t.causal_attention(qkv, &[(0, 3), (3, 2)], 2)?;
        project(t, y, k)
    });
}

pub fn classification_losses() {
    check("cross_entropy", SMOOTH, 1e-6, &[4, 5], randn, |t, x, _| t.cross_entropy(x, &[1, 0, 4, 2], &[0.5, 1.0, 0.0, 2.0]));
    check("softmax_cross_entropy", 1e-6, 1e-6, &[8], randn, |t, x, k| t.softmax_cross_entropy(x, k as usize % 8));
    check("bce_with_logits", SMOOTH, 1e-6, &[2, 3], randn, |t, x, _| t.bce_with_logits(x, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
}

fn images(seed_value: u64, n: usize) -> Tensor {
    let mut rng = seed::rng(seed_value);
    Tensor::new(vec![n, 8, 8], (0..n * 64).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
}

fn frozen_phi() -> FeatureEncoder {
    let mut phi = FeatureEncoder::init(8, 8, 11).unwrap();
    phi.frozen = true;
    phi
}

pub fn reconstruction_loss_wrt_reconstruction() {
    let phi = frozen_phi();
    let w = LossWeights::default();
    for k in 0..POINTS {
        let x = images(200 + k, 2);
        let x_hat = images(300 + k, 2);
        let err = finite_diff_check(
            |t, h| {
                let pv = phi.params.bind(t, false);
                let xv = t.leaf(x.clone());
                Ok(clinical_recon_loss(t, xv, h, &w, &phi, &pv).unwrap().total)
            },
            &x_hat,
            1e-6,
        )
        .unwrap();
        assert!(err < SMOOTH, "point {k}: {err:e}");
    }
}

pub fn reconstruction_loss_wrt_decoder_parameters() {
    let arch = TokenizerArch { height: 8, width: 8, patch: 4, hidden: 6, dim: 3, codebook_size: 4 };
    let tok = VqTokenizer::init(arch.clone(), 5).unwrap();
    let phi = frozen_phi();
    let w = LossWeights::default();
    let x = images(400, 1);
    let latents = randn(&[4, 3], 401);
    let decoder: Vec<usize> = (0..tok.params.len()).filter(|&i| tok.params.names()[i].starts_with("dec.")).collect();
    assert_eq!(decoder.len(), 8);
    for slot in decoder {
        let err = finite_diff_check(
            |t, p| {
                let mut vars = tok.params.bind(t, false);
                vars[slot] = p;
                let z = t.leaf(latents.clone());
                let rows = tok.decode_tape(t, &vars, z).unwrap();
                let pixels = t.gather(rows, arch.layout().unpatchify_index(1), &[1, 8, 8])?;
                let pv = phi.params.bind(t, false);
                let xv = t.leaf(x.clone());
                Ok(clinical_recon_loss(t, xv, pixels, &w, &phi, &pv).unwrap().total)
            },
            tok.params.get(slot),
            1e-6,
        )
        .unwrap();
        assert!(err < SMOOTH, "{}: {err:e}", tok.params.names()[slot]);
    }
}

fn small_lm() -> (LmModel, Vec<(TokenSequence, TokenSequence)>, Vec<TokenSequence>) {
    let vocab = default_vocab(8).unwrap();
    let cfg = LmConfig { vocab_size: vocab.len(), d_model: 8, heads: 2, layers: 1, ff: 16, context: 48 };
    let model = LmModel::init(cfg, 3).unwrap();
    let report = render_report(&[], 1).tokens;
    let codes = [1, 5, 2, 7];
    let parts = SequenceParts { image: Some(&codes), text: Some(&report), question: None };
    let pair = (
        assemble_sequence(&vocab, Task::CxrToReport, &Prompting::Bare, parts, 48).unwrap(),
        assemble_sequence(&vocab, Task::ReportToCxr, &Prompting::Bare, parts, 48).unwrap(),
    );
    let t = radvl_core::corpus::template(Task::Vqa, 1).unwrap();
    let q = tokenize("is there a nodule ?");
    let a = tokenize("yes");
    let vqa = SequenceParts { image: Some(&codes), text: Some(&a), question: Some(&q) };
    let task = vec![
        assemble_sequence(&vocab, Task::Vqa, &Prompting::Instructed(t), vqa, 48).unwrap(),
        pair.0.clone(),
    ];
    (model, vec![pair], task)
}

fn lm_check(name: &str, loss: impl Fn(&LmModel, &mut Tape, &[Var]) -> R) {
    let (model, _, _) = small_lm();
    for slot in 0..model.params.len() {
        let err = finite_diff_check(
            |t, p| {
                let mut vars = model.params.bind(t, false);
                vars[slot] = p;
                loss(&model, t, &vars)
            },
            model.params.get(slot),
            1e-6,
        )
        .unwrap();
        assert!(err < SMOOTH, "{name} wrt {}: {err:e}", model.params.names()[slot]);
    }
}

pub fn stage1_loss_on_small_model() {
    let (_, pairs, _) = small_lm();
    lm_check("stage1_loss", |m, t, v| Ok(stage1_loss(m, t, v, &pairs).unwrap()));
}

pub fn task_loss_on_small_model() {
    let (_, _, batch) = small_lm();
    lm_check("task_loss", |m, t, v| Ok(task_loss(m, t, v, &batch).unwrap()));
}
