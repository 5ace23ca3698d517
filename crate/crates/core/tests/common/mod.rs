//! Independent reference implementations shared by the integration suites
//! and the acceptance run. Nothing here calls the kernels under test.
#![allow(dead_code)]

use lensformer::metrics::ScoredSample;
use lensformer::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` with a floor for
/// vanishing gradients.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub const FD_STEP: f64 = 1e-6;

/// Compares reverse-mode gradients of `sum(f(inputs) * R)` against central
/// finite differences, where `R` is a fixed random weighting of the output.
/// Returns one relative error per input.
pub fn gradient_errors<G>(seed: u64, inputs: &[Tensor<f64>], f: G) -> Vec<f64>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        let mut r = rng(seed ^ 0xA5A5);
        random_tensor(&mut r, &out.shape(), -1.0, 1.0)
    };
    let loss_of = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        let loss = out.mul(&tape.constant(weights.clone())).expect("weights").sum();
        let grads = tape.backward(loss).expect("backward");
        vars.iter().map(|v| grads.get(v).expect("gradient").to_f64_vec()).collect()
    };
    let mut errs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = input.data()[j] + FD_STEP;
            let up = loss_of(&xs);
            xs[i].data_mut()[j] = input.data()[j] - FD_STEP;
            let down = loss_of(&xs);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        errs.push(rel_err(&analytic[i], &numeric));
    }
    errs
}

/// Six-loop cross-correlation of `[ci,h,w]` with `[co,ci,kh,kw]`.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Triple-loop `[m,k] x [k,n]`.
pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating all pairs.
pub fn pairwise_auroc(samples: &[ScoredSample]) -> f64 {
    let pos: Vec<f64> = samples.iter().filter(|s| s.label == 1).map(|s| s.score).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| s.label == 0).map(|s| s.score).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Highest TPR over every candidate threshold (each distinct score and
/// +inf) whose false-positive count stays within `max_fp`.
pub fn brute_force_tpr(samples: &[ScoredSample], max_fp: usize) -> f64 {
    let positives = samples.iter().filter(|s| s.label == 1).count() as f64;
    let mut candidates: Vec<f64> = samples.iter().map(|s| s.score).collect();
    candidates.push(f64::INFINITY);
    let mut best = 0.0f64;
    for &t in &candidates {
        let fp = samples.iter().filter(|s| s.label == 0 && s.score >= t).count();
        if fp <= max_fp {
            let tp = samples.iter().filter(|s| s.label == 1 && s.score >= t).count() as f64;
            best = best.max(tp / positives);
        }
    }
    best
}

/// Random scored samples with both classes present and deliberate ties.
pub fn random_samples(rng: &mut impl Rng, n: usize) -> Vec<ScoredSample> {
    loop {
        let levels = rng.random_range(3..=40);
        let s: Vec<ScoredSample> = (0..n)
            .map(|i| {
                let label = u8::from(rng.random_bool(0.5));
                let shift = if label == 1 { 4 } else { 0 };
                let q = (rng.random_range(0..levels) + shift).min(levels) as f64 / levels as f64;
                ScoredSample::new(i.to_string(), q, label)
            })
            .collect();
        if s.iter().any(|x| x.label == 1) && s.iter().any(|x| x.label == 0) {
            return s;
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub type OpFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// One differentiable operation with its random inputs.
pub struct OpCase {
    pub name: &'static str,
    /// Elementwise ops are held to the tighter tolerance.
    pub elementwise: bool,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

fn case(name: &'static str, elementwise: bool, inputs: Vec<Tensor<f64>>, f: OpFn) -> OpCase {
    OpCase { name, elementwise, inputs, f }
}

/// Every differentiable tape operation, plus the attention building blocks,
/// with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use lensformer::params::ParamStore;
    use lensformer::transformer::{
        multi_head_attention, positional_encoding, scaled_dot_attention, AttentionConfig, AttentionWeights,
        EncoderLayer,
    };
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape, -1.0, 1.0);
    let (a34, b34, c34) = (t(&[3, 4]), t(&[3, 4]), t(&[3, 4]));
    let mut r2 = rng(seed ^ 0x5EED);
    let probs = random_tensor(&mut r2, &[6], 0.05, 0.95);
    let elu_in = random_tensor(&mut r2, &[4, 5], -2.0, 2.0);
    vec![
        case("matmul", false, vec![t(&[3, 4]), t(&[4, 5])], Box::new(|_, v| v[0].matmul(&v[1]))),
        case("matmul_batched", false, vec![t(&[2, 3, 4]), t(&[2, 4, 5])], Box::new(|_, v| v[0].matmul(&v[1]))),
        case("matmul_broadcast", false, vec![t(&[2, 3, 4]), t(&[4, 5])], Box::new(|_, v| v[0].matmul(&v[1]))),
        case("conv2d_same", false, vec![t(&[2, 6, 6]), t(&[3, 2, 3, 3])], Box::new(|_, v| v[0].conv2d(&v[1], 1, 1))),
        case("conv2d_strided", false, vec![t(&[2, 7, 7]), t(&[2, 2, 3, 3])], Box::new(|_, v| v[0].conv2d(&v[1], 2, 0))),
        case("max_pool", false, vec![t(&[2, 6, 6])], Box::new(|_, v| v[0].max_pool(2))),
        case("max_pool_odd", false, vec![t(&[1, 5, 5])], Box::new(|_, v| v[0].max_pool(2))),
        case("add", true, vec![a34.clone(), b34.clone()], Box::new(|_, v| v[0].add(&v[1]))),
        case("sub", true, vec![a34.clone(), c34.clone()], Box::new(|_, v| v[0].sub(&v[1]))),
        case("mul", true, vec![b34, c34], Box::new(|_, v| v[0].mul(&v[1]))),
        case("scale", true, vec![a34.clone()], Box::new(|_, v| Ok(v[0].scale(-1.75)))),
        case("elu", true, vec![elu_in], Box::new(|_, v| Ok(v[0].elu()))),
        case("sigmoid", true, vec![t(&[4, 5]).map(|x| 3.0 * x)], Box::new(|_, v| Ok(v[0].sigmoid()))),
        case("bias_add_axis0", false, vec![t(&[3, 4, 5]), t(&[3])], Box::new(|_, v| v[0].bias_add(&v[1], 0))),
        case("bias_add_last", false, vec![t(&[3, 4, 5]), t(&[5])], Box::new(|_, v| v[0].bias_add(&v[1], 2))),
        case("dense", false, vec![t(&[4, 6]), t(&[6, 3]), t(&[3])], Box::new(|_, v| v[0].dense(&v[1], &v[2]))),
        case("dense_vector", false, vec![t(&[6]), t(&[6, 3]), t(&[3])], Box::new(|_, v| v[0].dense(&v[1], &v[2]))),
        case("softmax_last", false, vec![t(&[3, 5])], Box::new(|_, v| v[0].softmax(1))),
        case("softmax_first", false, vec![t(&[3, 5])], Box::new(|_, v| v[0].softmax(0))),
        case(
            "layer_norm",
            false,
            vec![t(&[4, 6]), t(&[6]), t(&[6])],
            Box::new(|_, v| v[0].layer_norm(&v[1], &v[2])),
        ),
        case("reshape", false, vec![t(&[2, 3, 4])], Box::new(|_, v| v[0].reshape(&[4, 6]))),
        case("permute", false, vec![t(&[2, 3, 4])], Box::new(|_, v| v[0].permute(&[2, 0, 1]))),
        case("transpose", false, vec![t(&[2, 3, 4])], Box::new(|_, v| v[0].transpose())),
        case("concat_axis0", false, vec![t(&[2, 3]), t(&[1, 3])], Box::new(|_, v| Var::concat(&v[..2], 0))),
        case("concat_axis1", false, vec![t(&[2, 3]), t(&[2, 2])], Box::new(|_, v| Var::concat(&v[..2], 1))),
        case("sum", false, vec![t(&[3, 4])], Box::new(|_, v| Ok(v[0].sum()))),
        case("mean", false, vec![t(&[3, 4])], Box::new(|_, v| Ok(v[0].mean()))),
        case(
            "binary_cross_entropy",
            true,
            vec![probs],
            Box::new(|_, v| v[0].binary_cross_entropy(&Tensor::from_f64(&[6], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])?)),
        ),
        case(
            "scaled_dot_attention",
            false,
            vec![t(&[4, 6]), t(&[5, 6]), t(&[5, 3])],
            Box::new(|_, v| scaled_dot_attention(&v[0], &v[1], &v[2])),
        ),
        case(
            "scaled_dot_attention_batched",
            false,
            vec![t(&[2, 4, 3]), t(&[2, 4, 3]), t(&[2, 4, 2])],
            Box::new(|_, v| scaled_dot_attention(&v[0], &v[1], &v[2])),
        ),
        case("positional_encoding", false, vec![t(&[5, 8])], Box::new(|_, v| positional_encoding(8, 5)?.add_to(&v[0]))),
        case(
            "multi_head_attention",
            false,
            vec![t(&[5, 8])],
            Box::new(move |tape, v| {
                let mut store = ParamStore::<f64>::new();
                let w = AttentionWeights::new(&mut store, "mha", AttentionConfig::new(2, 4)?, &mut rng(seed));
                let p = store.bind(tape);
                multi_head_attention(&v[0], &w, &p)
            }),
        ),
        case(
            "encoder_layer",
            false,
            vec![t(&[5, 8])],
            Box::new(move |tape, v| {
                let mut store = ParamStore::<f64>::new();
                let layer = EncoderLayer::new(&mut store, "enc", AttentionConfig::new(2, 4)?, 12, &mut rng(seed));
                let p = store.bind(tape);
                layer.forward(&v[0], &p)
            }),
        ),
    ]
}

pub const OP_TOL: f64 = 1e-5;
pub const ELEMENTWISE_TOL: f64 = 1e-6;

/// Worst relative error of each op case over `seeds`, with its tolerance.
pub fn op_gradient_report(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64, f64)> {
    let mut worst: Vec<(&'static str, f64, f64)> = Vec::new();
    for seed in seeds {
        for (i, c) in op_cases(seed).into_iter().enumerate() {
            let e = gradient_errors(seed, &c.inputs, &*c.f).into_iter().fold(0.0, f64::max);
            let tol = if c.elementwise { ELEMENTWISE_TOL } else { OP_TOL };
            if worst.len() <= i {
                worst.push((c.name, e, tol));
            } else {
                worst[i].1 = worst[i].1.max(e);
            }
        }
    }
    worst
}

/// Directional finite-difference check of a detector's parameter gradient:
/// relative error between `g . d` and the central difference along `d`,
/// worst over `directions` random unit directions.
pub fn detector_gradient_error(cfg: &lensformer::detector::ModelConfig, seed: u64, directions: usize) -> f64 {
    use lensformer::detector::{build, DetectorModel};
    let model: DetectorModel<f64> = build(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xD1);
    let image = random_tensor(&mut r, &[cfg.input_bands, cfg.input_size, cfg.input_size], 0.0, 1.0);
    let label = (seed % 2) as f64;
    let (_, grads) = model.loss_and_grads(&image, label).unwrap();
    let loss = |m: &DetectorModel<f64>| {
        let p = m.predict_one(&image).unwrap();
        -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
    };
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dirs: Vec<Tensor<f64>> = grads.iter().map(|g| random_tensor(&mut r, g.shape(), -1.0, 1.0)).collect();
        let norm = dirs.iter().flat_map(|d| d.data()).map(|x| x * x).sum::<f64>().sqrt();
        let analytic: f64 =
            grads.iter().zip(&dirs).flat_map(|(g, d)| g.data().iter().zip(d.data())).map(|(a, b)| a * b).sum::<f64>()
                / norm;
        let shifted = |sign: f64| {
            let mut m = model.clone();
            for (p, d) in m.params_mut().tensors_mut().zip(&dirs) {
                for (x, dx) in p.data_mut().iter_mut().zip(d.data()) {
                    *x += sign * FD_STEP * dx / norm;
                }
            }
            loss(&m)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(&[analytic], &[numeric]));
    }
    worst
}

/// Largest deviation between `stack(P x)` and `P stack(x)` for a random
/// row permutation `P` of a `[len, 8]` sequence through a two-layer encoder
/// stack, optionally adding the positional encoding first.
pub fn equivariance_gap(seed: u64, len: usize, with_pe: bool) -> f64 {
    use lensformer::params::ParamStore;
    use lensformer::transformer::{encoder_stack_forward, positional_encoding, AttentionConfig, EncoderLayer};
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    let cfg = AttentionConfig::new(2, 4).unwrap();
    let mut store = ParamStore::<f64>::new();
    let layers: Vec<EncoderLayer> =
        (0..2).map(|i| EncoderLayer::new(&mut store, &format!("enc{i}"), cfg, 16, &mut r)).collect();
    let x = random_tensor(&mut r, &[len, 8], -1.0, 1.0);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut r);
    let permute_rows = |t: &Tensor<f64>| {
        let d: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * 8..(i + 1) * 8].to_vec()).collect();
        Tensor::new(vec![len, 8], d).unwrap()
    };
    let run = |input: Tensor<f64>| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mut h = tape.constant(input);
        if with_pe {
            h = positional_encoding(8, len).unwrap().add_to(&h).unwrap();
        }
        (*encoder_stack_forward(&h, &layers, &p).unwrap().value()).clone()
    };
    let a = run(permute_rows(&x));
    let b = permute_rows(&run(x));
    a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

/// Output of single-token attention and the value row it should equal.
pub fn single_token_attention(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    use lensformer::transformer::scaled_dot_attention;
    let mut r = rng(seed);
    let (q, k, v) = (
        random_tensor(&mut r, &[1, 6], -3.0, 3.0),
        random_tensor(&mut r, &[1, 6], -3.0, 3.0),
        random_tensor(&mut r, &[1, 4], -3.0, 3.0),
    );
    let tape = Tape::new();
    let out = scaled_dot_attention(&tape.constant(q), &tape.constant(k), &tape.constant(v.clone())).unwrap();
    ((*out.value()).clone(), v)
}

/// Attention weights of random `[len, d]` queries and keys, row-major.
pub fn attention_weight_rows(seed: u64, len: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let q = random_tensor(&mut r, &[len, d], -4.0, 4.0);
    let k = random_tensor(&mut r, &[len, d], -4.0, 4.0);
    let tape = Tape::new();
    let scores = tape.constant(q).matmul(&tape.constant(k).transpose().unwrap()).unwrap().scale(1.0 / (d as f64).sqrt());
    let w = scores.softmax(1).unwrap().value();
    w.data().chunks(len).map(<[f64]>::to_vec).collect()
}

/// Elliptical Sérsic radius written out independently of the renderer.
pub fn sersic_radius_oracle(p: &lensformer::lenssim::SersicParams, x: f64, y: f64) -> f64 {
    let (dx, dy) = (x - p.center[0], y - p.center[1]);
    let major = dx * p.orientation.cos() + dy * p.orientation.sin();
    let minor = dy * p.orientation.cos() - dx * p.orientation.sin();
    (p.axis_ratio * major.powi(2) + minor.powi(2) / p.axis_ratio).sqrt() / p.scale_radius
}

/// Largest relative deviation of rendered Sérsic pixels from
/// `I0 exp(-k R^(1/n))` over random profiles and sampled pixels.
pub fn sersic_closed_form_error(seed: u64, profiles: usize) -> f64 {
    use lensformer::lenssim::{half_light_constant, render_sersic, Grid, SersicParams};
    let mut r = rng(seed);
    let grid = Grid { size: 41, pixel_scale: 0.2 };
    let mut worst: f64 = 0.0;
    for _ in 0..profiles {
        let n_s = r.random_range(0.3..5.0);
        let p = SersicParams {
            i0: r.random_range(0.5..10.0),
            n_s,
            k: half_light_constant(n_s),
            scale_radius: r.random_range(0.3..2.0),
            axis_ratio: r.random_range(0.5..1.0),
            orientation: r.random_range(0.0..std::f64::consts::PI),
            center: [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)],
        };
        let img = render_sersic(&p, &grid);
        for _ in 0..5 {
            let (row, col) = (r.random_range(0..41), r.random_range(0..41));
            let (x, y) = grid.position(row, col);
            let expect = p.i0 * (-p.k * sersic_radius_oracle(&p, x, y).powf(1.0 / n_s)).exp();
            let got = img.at(&[row, col]);
            worst = worst.max((got - expect).abs() / expect.abs().max(f64::MIN_POSITIVE));
        }
    }
    worst
}

/// Fraction of a centred, compact source's lensed light landing within
/// `theta_E +- band_pixels` of the lens centre.
pub fn einstein_ring_fraction(theta_e: f64, band_pixels: f64) -> f64 {
    use lensformer::lenssim::{render_lensed_source, Grid, SourceParams};
    let grid = Grid { size: 61, pixel_scale: 0.2 };
    let src = SourceParams { offset: [0.0, 0.0], flux: 10.0, sigma: 0.05, axis_ratio: 1.0, orientation: 0.0 };
    let img = render_lensed_source(&src, theta_e, [0.0, 0.0], &grid, 7);
    let (mut inside, mut total) = (0.0, 0.0);
    for r in 0..grid.size {
        for c in 0..grid.size {
            let (x, y) = grid.position(r, c);
            let v = img.at(&[r, c]);
            total += v;
            if ((x * x + y * y).sqrt() - theta_e).abs() <= band_pixels * grid.pixel_scale {
                inside += v;
            }
        }
    }
    inside / total
}

/// `log10 n = 0.4 log10(max(B/T, 0.03)) + 0.1 x`, evaluated directly.
pub fn sersic_index_oracle(bulge_to_total: f64, x: f64) -> f64 {
    10f64.powf(0.4 * bulge_to_total.max(0.03).log10() + 0.1 * x)
}
