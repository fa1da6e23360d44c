//! Finite-difference checks for every layer type, plus structural
//! properties of the encoders.

use avstage::nn::encoders::{positions_1d, ConformerEncoder, ConvSubsample, TransformerStack, VitEncoder};
use avstage::nn::gradcheck::{grad_check, GradReport};
use avstage::nn::layers::{
    Activation, ConformerBlock, ConvModule, EncoderConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention,
    SeqLayout, TransformerBlock,
};
use avstage::nn::{Graph, Init, ParamTree, Tensor, Var};
use avstage::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn jitter(tree: &ParamTree<f32>, seed: u64) -> ParamTree<f64> {
    let mut out = tree.cast::<f64>();
    let noise = Init::new(seed);
    let paths: Vec<String> = tree.paths().map(str::to_string).collect();
    for p in paths {
        let t = out.tensor(&p).unwrap();
        let u = noise.uniform(&p, t.shape(), 0.3);
        let v: Vec<f64> = t.data().iter().zip(u.data()).map(|(a, b)| a + *b as f64).collect();
        out.set_values(&p, &v).unwrap();
    }
    out
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Random linear functional of `y`, so that no output direction is
/// invisible to the check.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let w = g.constant(random(r, c, seed));
    let m = g.mul(y, w);
    g.sum(m)
}

fn check(params: &ParamTree<f64>, f: impl Fn(&mut Graph<f64>, &ParamTree<f64>) -> Result<Var>) -> GradReport {
    let r = grad_check(params, H, 32, 7, f).unwrap();
    assert!(!r.per_param.is_empty());
    assert!(r.max_rel_error() <= TOL, "worst {:?}", r.worst());
    r
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        dim: 8,
        conv_kernel: 3,
        ff_mult: 2,
    }
}

#[test]
fn linear_gradients() {
    let mut t = ParamTree::new();
    let l = Linear::new(&mut t, &Init::new(1), "lin", 5, 3).unwrap();
    let p = jitter(&t, 2);
    let r = check(&p, |g, p| {
        let x = g.constant(random(4, 5, 3));
        let y = l.forward(g, p, x)?;
        Ok(project(g, y, 4))
    });
    assert_eq!(r.per_param.len(), 2);
}

#[test]
fn layer_norm_gradients() {
    let mut t = ParamTree::new();
    let ln = LayerNorm::new(&mut t, &Init::new(1), "ln", 6).unwrap();
    let p = jitter(&t, 2);
    check(&p, |g, p| {
        let x = g.constant(random(3, 6, 5));
        let y = ln.forward(g, p, x)?;
        Ok(project(g, y, 6))
    });
}

#[test]
fn attention_gradients_self_causal_and_padded() {
    let mut t = ParamTree::new();
    let a = MultiHeadAttention::new(&mut t, &Init::new(1), "mha", 8, 2).unwrap();
    let p = jitter(&t, 2);
    for causal in [false, true] {
        let layout = SeqLayout::with_valid(2, 4, vec![4, 3]);
        check(&p, |g, p| {
            let x = g.constant(random(8, 8, 9));
            let y = a.self_attend(g, p, x, &layout, causal)?;
            Ok(project(g, y, 10))
        });
    }
}

#[test]
fn cross_attention_gradients() {
    let mut t = ParamTree::new();
    let a = MultiHeadAttention::new(&mut t, &Init::new(1), "x", 8, 2).unwrap();
    let p = jitter(&t, 3);
    let q = SeqLayout::new(2, 3);
    let kv = SeqLayout::with_valid(2, 5, vec![5, 2]);
    check(&p, |g, p| {
        let x = g.constant(random(6, 8, 1));
        let m = g.constant(random(10, 8, 2));
        let y = a.cross_attend(g, p, x, &q, m, &kv)?;
        Ok(project(g, y, 3))
    });
}

#[test]
fn feed_forward_gradients() {
    for act in [Activation::Swish, Activation::Gelu] {
        let mut t = ParamTree::new();
        let f = FeedForward::new(&mut t, &Init::new(1), "ff", 6, 2, act).unwrap();
        let p = jitter(&t, 4);
        check(&p, |g, p| {
            let x = g.constant(random(5, 6, 8));
            let y = f.forward(g, p, x)?;
            Ok(project(g, y, 9))
        });
    }
}

#[test]
fn conv_module_gradients() {
    let mut t = ParamTree::new();
    let c = ConvModule::new(&mut t, &Init::new(1), "conv", 6, 3).unwrap();
    let p = jitter(&t, 5);
    let layout = SeqLayout::new(2, 5);
    check(&p, |g, p| {
        let x = g.constant(random(10, 6, 11));
        let y = c.forward(g, p, x, &layout)?;
        Ok(project(g, y, 12))
    });
}

#[test]
fn conformer_block_gradients() {
    let mut t = ParamTree::new();
    let b = ConformerBlock::new(&mut t, &Init::new(1), "blk", &small_cfg()).unwrap();
    let p = jitter(&t, 6);
    let layout = SeqLayout::new(2, 4);
    let r = check(&p, |g, p| {
        let x = g.constant(random(8, 8, 13));
        let y = b.forward(g, p, x, &layout)?;
        Ok(project(g, y, 14))
    });
    assert_eq!(r.per_param.len(), t.len());
}

#[test]
fn transformer_block_with_cross_attention_gradients() {
    let mut t = ParamTree::new();
    let b = TransformerBlock::new(&mut t, &Init::new(1), "dec", &small_cfg(), true).unwrap();
    let p = jitter(&t, 7);
    let layout = SeqLayout::new(2, 3);
    let mem_layout = SeqLayout::new(2, 4);
    let r = check(&p, |g, p| {
        let x = g.constant(random(6, 8, 15));
        let m = g.constant(random(8, 8, 16));
        let y = b.forward(g, p, x, &layout, true, Some((m, &mem_layout)))?;
        Ok(project(g, y, 17))
    });
    assert_eq!(r.per_param.len(), t.len());
}

#[test]
fn conv_subsample_and_conformer_encoder_gradients() {
    let mut t = ParamTree::new();
    let init = Init::new(1);
    let sub = ConvSubsample::new(&mut t, &init, "sub", 5, 8, 4, 4).unwrap();
    let enc = ConformerEncoder::new(&mut t, &init, "enc", &small_cfg()).unwrap();
    let p = jitter(&t, 8);
    let r = check(&p, |g, p| {
        let x = g.constant(random(2 * 10, 5, 18));
        let h = sub.forward(g, p, x, 2, 10)?;
        let pos = g.constant(positions_1d(2, 3, 8)?);
        let h = g.add(h, pos);
        let y = enc.forward(g, p, h, &SeqLayout::new(2, 3))?;
        let m = g.mean(y);
        let s = project(g, y, 19);
        Ok(g.add(s, m))
    });
    assert_eq!(r.per_param.len(), t.len());
}

#[test]
fn vit_encoder_gradients() {
    let mut t = ParamTree::new();
    let v = VitEncoder::new(&mut t, &Init::new(1), "vit", 12, &small_cfg()).unwrap();
    let p = jitter(&t, 9);
    let r = check(&p, |g, p| {
        let x = g.constant(random(2 * 4, 12, 20));
        let y = v.forward(g, p, x, positions_1d(2, 4, 8)?, &SeqLayout::new(2, 4))?;
        Ok(project(g, y, 21))
    });
    assert_eq!(r.per_param.len(), t.len());
}

#[test]
fn pooling_and_normalization_ops_gradients() {
    let mut t = ParamTree::new();
    let l = Linear::new(&mut t, &Init::new(1), "lin", 4, 6).unwrap();
    let p = jitter(&t, 10);
    check(&p, |g, p| {
        let x = g.constant(random(6, 4, 22));
        let y = l.forward(g, p, x)?;
        let y = g.scale_rows(y, vec![1.0, 0.0, 2.0, 1.0, -1.0, 0.5]);
        let pooled = g.segment_mean(y, vec![(0, 2), (2, 4)]);
        let n = g.l2_normalize_rows(pooled);
        let both = g.concat_rows(&[n, pooled]);
        let r = g.reshape(both, 2, 12);
        Ok(project(g, r, 23))
    });
}

#[test]
fn length_one_conformer_is_finite() {
    let mut t = ParamTree::new();
    let enc = ConformerEncoder::new(&mut t, &Init::new(3), "enc", &EncoderConfig::desk_audio()).unwrap();
    let mut g = Graph::<f32>::inference();
    let x = g.constant(random(1, 64, 1).cast());
    let y = enc.forward(&mut g, &t, x, &SeqLayout::new(1, 1)).unwrap();
    assert_eq!(g.shape(y), (1, 64));
    assert!(g.value(y).is_finite());
}

#[test]
fn conformer_has_no_cross_example_leakage() {
    let mut t = ParamTree::new();
    let enc = ConformerEncoder::new(&mut t, &Init::new(4), "enc", &small_cfg()).unwrap();
    let p = jitter(&t, 11);
    let (batch, len, dim) = (3, 5, 8);
    let x = random(batch * len, dim, 24);
    let perm = [2usize, 0, 1];
    let mut xp = Vec::new();
    for &b in &perm {
        xp.extend_from_slice(&x.data()[b * len * dim..(b + 1) * len * dim]);
    }
    let run = |input: Tensor<f64>| {
        let mut g = Graph::inference();
        let v = g.constant(input);
        let y = enc.forward(&mut g, &p, v, &SeqLayout::new(batch, len)).unwrap();
        g.value(y).clone()
    };
    let y = run(x.clone());
    let yp = run(Tensor::from_vec(&[batch * len, dim], xp));
    for (i, &b) in perm.iter().enumerate() {
        let a = &yp.data()[i * len * dim..(i + 1) * len * dim];
        let e = &y.data()[b * len * dim..(b + 1) * len * dim];
        for (u, v) in a.iter().zip(e) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn vit_on_zero_tokens_ends_in_unit_variance_rows() {
    let mut t = ParamTree::new();
    let cfg = EncoderConfig::desk_video();
    let v = VitEncoder::new(&mut t, &Init::new(5), "vit", 384, &cfg).unwrap();
    let p = t.cast::<f64>();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[2 * 8, 384]));
    let y = v
        .forward(&mut g, &p, x, positions_1d(2, 8, 64).unwrap(), &SeqLayout::new(2, 8))
        .unwrap();
    let out = g.value(y);
    for r in 0..out.rows() {
        let row = out.row(r);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "row {r}: {mean} {var}");
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let mut t = ParamTree::new();
    let enc = TransformerStack::new(&mut t, &Init::new(6), "s", &small_cfg(), false).unwrap();
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(6, 8, 30).cast());
        let y = enc.forward(&mut g, &t, x, &SeqLayout::new(2, 3), false, None).unwrap();
        let l = g.mean(y);
        let gr = g.backward(l).into_params();
        (g.value(y).clone(), gr)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
