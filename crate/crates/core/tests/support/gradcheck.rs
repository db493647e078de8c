//! Central finite differences in f64, independent of the tape's backward pass.

use panther::tensor::{RowMask, Tape, Tensor, Var};
use panther::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;

pub type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(inputs: &[Tensor<f64>], build: &Builder) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("graph builds");
    tape.value(out).item()
}

/// Largest per-tensor relative error between tape gradients and central
/// differences: `max|a - n| / max(max|a|, max|n|, 1e-8)`.
pub fn max_relative_error(inputs: &[Tensor<f64>], build: &Builder) -> f64 {
    relative_errors(inputs, build).into_iter().fold(0.0, f64::max)
}

/// Relative error for each input tensor.
pub fn relative_errors(inputs: &[Tensor<f64>], build: &Builder) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("graph builds");
    tape.backward(out).expect("scalar output");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            *slot = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * EPS);
        }
        let a = analytic[i].data();
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(1e-8f64, |m, x| m.max(x.abs()));
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        errors.push(diff / scale);
    }
    errors
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Reduces any tensor to a scalar through a fixed random weighting so that
/// gradients are not trivially zero (e.g. after a softmax).
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(x).shape().to_vec();
    let w = random_tensor(&mut rng, &shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// One named single-op check: inputs plus the graph that uses them.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Builder<'static>>,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable op in the catalog, each on a small random instance.
pub fn op_catalog(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize], s: f64| random_tensor(&mut rng, shape, s);
    let positive = Tensor::from_fn(&[3, 4], |i| 0.5 + i as f64 * 0.1);
    let distinct = Tensor::from_fn(&[4, 3], |i| ((i * 7) % 12) as f64 * 0.3 - 1.0);
    vec![
        case("add", vec![r(&[3, 4], 1.0), r(&[3, 4], 1.0)], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        case("sub", vec![r(&[3, 4], 1.0), r(&[3, 4], 1.0)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }),
        case("mul", vec![r(&[3, 4], 1.0), r(&[3, 4], 1.0)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }),
        case("add_row", vec![r(&[3, 4], 1.0), r(&[4], 1.0)], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        case("mul_row", vec![r(&[3, 4], 1.0), r(&[4], 1.0)], |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }),
        case("scale", vec![r(&[3, 4], 1.0)], |t, v| {
            let y = t.scale(v[0], 0.7);
            weighted_sum(t, y, 6)
        }),
        case("add_scalar", vec![r(&[3, 4], 1.0)], |t, v| {
            let y = t.add_scalar(v[0], 0.7);
            weighted_sum(t, y, 7)
        }),
        case("matmul", vec![r(&[3, 5], 1.0), r(&[5, 4], 1.0)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 8)
        }),
        case("matmul_nt", vec![r(&[3, 5], 1.0), r(&[4, 5], 1.0)], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        case("transpose", vec![r(&[3, 5], 1.0)], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 10)
        }),
        case("gelu", vec![r(&[3, 4], 2.0)], |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, 11)
        }),
        case("sigmoid", vec![r(&[3, 4], 2.0)], |t, v| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, 12)
        }),
        case("tanh", vec![r(&[3, 4], 2.0)], |t, v| {
            let y = t.tanh(v[0]);
            weighted_sum(t, y, 13)
        }),
        case("exp", vec![r(&[3, 4], 1.0)], |t, v| {
            let y = t.exp(v[0]);
            weighted_sum(t, y, 14)
        }),
        case("log", vec![positive], |t, v| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, 15)
        }),
        case("softmax_rows", vec![r(&[3, 5], 2.0)], |t, v| {
            let y = t.softmax_rows(v[0], RowMask::None)?;
            weighted_sum(t, y, 16)
        }),
        case("softmax_rows_causal", vec![r(&[4, 4], 2.0)], |t, v| {
            let y = t.softmax_rows(v[0], RowMask::Causal)?;
            weighted_sum(t, y, 17)
        }),
        case("log_softmax_rows_masked", vec![r(&[3, 4], 2.0)], |t, v| {
            let mask: Vec<bool> = (0..12).map(|i| i % 4 != i / 4).collect();
            let y = t.log_softmax_rows(v[0], RowMask::Explicit(mask.into()))?;
            weighted_sum(t, y, 18)
        }),
        case("layer_norm_rows", vec![r(&[3, 6], 2.0)], |t, v| {
            let y = t.layer_norm_rows(v[0])?;
            weighted_sum(t, y, 19)
        }),
        case("gather_rows", vec![r(&[5, 3], 1.0)], |t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            weighted_sum(t, y, 20)
        }),
        case("depthwise_conv1d_causal", vec![r(&[9, 3], 1.0), r(&[3, 3], 1.0)], |t, v| {
            let y = t.depthwise_conv1d(v[0], v[1], 2, true)?;
            weighted_sum(t, y, 21)
        }),
        case("depthwise_conv1d_centered", vec![r(&[9, 3], 1.0), r(&[3, 3], 1.0)], |t, v| {
            let y = t.depthwise_conv1d(v[0], v[1], 3, false)?;
            weighted_sum(t, y, 22)
        }),
        case("concat_cols", vec![r(&[3, 2], 1.0), r(&[3, 4], 1.0)], |t, v| {
            let y = t.concat_cols(&[v[0], v[1], v[0]])?;
            weighted_sum(t, y, 23)
        }),
        case("concat_rows", vec![r(&[1, 4], 1.0), r(&[3, 4], 1.0)], |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            weighted_sum(t, y, 24)
        }),
        case("slice_cols", vec![r(&[3, 6], 1.0)], |t, v| {
            let y = t.slice_cols(v[0], 2, 3)?;
            weighted_sum(t, y, 25)
        }),
        case("slice_rows", vec![r(&[5, 3], 1.0)], |t, v| {
            let y = t.slice_rows(v[0], 1, 3)?;
            weighted_sum(t, y, 26)
        }),
        case("pairwise_distance", vec![r(&[4, 3], 1.0)], |t, v| {
            let y = t.pairwise_distance(v[0])?;
            weighted_sum(t, y, 27)
        }),
        case("sum", vec![r(&[3, 4], 1.0)], |t, v| {
            let y = t.sum(v[0]);
            Ok(t.scale(y, 1.3))
        }),
        case("mean", vec![r(&[3, 4], 1.0)], |t, v| {
            let y = t.exp(v[0]);
            Ok(t.mean(y))
        }),
        case("select", vec![r(&[3, 4], 1.0)], |t, v| {
            let y = t.select(v[0], &[0, 5, 5, 11])?;
            weighted_sum(t, y, 28)
        }),
        case("nll_sum", vec![r(&[4, 6], 2.0)], |t, v| {
            let mask: Vec<bool> = (0..6).map(|j| j != 0).collect();
            t.nll_sum(v[0], &[Some(1), None, Some(5), Some(3)], &RowMask::Columns(mask.into()))
        }),
        case("max_rows", vec![distinct], |t, v| {
            let y = t.max_rows(v[0])?;
            weighted_sum(t, y, 29)
        }),
        case("unfold_causal", vec![r(&[5, 2], 1.0)], |t, v| {
            let y = t.unfold_causal(v[0], 3)?;
            weighted_sum(t, y, 30)
        }),
        case("bce_with_logits_sum", vec![r(&[6], 3.0)], |t, v| {
            t.bce_with_logits_sum(v[0], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0], 2.5)
        }),
    ]
}

/// A random five-op graph over shape-preserving ops, reduced to a scalar.
pub fn random_composite(seed: u64) -> (Vec<Tensor<f64>>, Box<Builder<'static>>) {
    const N: usize = 4;
    const M: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random_tensor(&mut rng, &[N, M], 1.0),
        random_tensor(&mut rng, &[M, M], 0.6),
        random_tensor(&mut rng, &[N, M], 1.0),
        random_tensor(&mut rng, &[M], 0.5),
        random_tensor(&mut rng, &[3, M], 0.8),
        random_tensor(&mut rng, &[2 * M, M], 0.5),
    ];
    let ops: Vec<u32> = (0..5).map(|_| rng.gen_range(0..14)).collect();
    let dilation = rng.gen_range(1..3usize);
    let build = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let mut h = v[0];
        for &op in &ops {
            h = match op {
                0 => t.gelu(h),
                1 => t.tanh(h),
                2 => t.sigmoid(h),
                3 => t.softmax_rows(h, RowMask::None)?,
                4 => t.layer_norm_rows(h)?,
                5 => t.matmul(h, v[1])?,
                6 => t.mul(h, v[2])?,
                7 => t.add_row(h, v[3])?,
                8 => t.depthwise_conv1d(h, v[4], dilation, true)?,
                9 => t.log_softmax_rows(h, RowMask::None)?,
                10 => {
                    let s = t.scale(h, 0.3);
                    t.exp(s)
                }
                11 => {
                    let wide = t.unfold_causal(h, 2)?;
                    t.matmul(wide, v[5])?
                }
                12 => {
                    let both = t.concat_cols(&[h, v[2]])?;
                    let a = t.slice_cols(both, 1, M)?;
                    t.add(a, h)?
                }
                _ => t.mul_row(h, v[3])?,
            };
        }
        weighted_sum(t, h, seed ^ 0x5eed)
    };
    (inputs, Box::new(build))
}
