//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slicesr::attention::{
    positional_bias, scaled_cosine_attention, BiasMlp, BlockDims, BlockKind,
    RelativeCoordinateTable, Stl2Block,
};
use slicesr::model::{ModelConfig, Tvsrn, Variant};
use slicesr::nn::{
    depth_subpixel, window_partition, window_reverse, Bound, ParamBuilder, ParamStore, WindowSpec,
};
use slicesr::tensor::{grad_check_sampled, Graph, Result, Tensor, Var};

pub const EPSILON: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Uniform values in `[-1, 1]`.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Uniform values in `[lo, hi]`.
pub fn uniform_in(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in `[-1, -0.1] ∪ [0.1, 1]`, away from kinks at zero.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` to a scalar through fixed random weights so that no
/// gradient direction is trivially zero.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(g.shape(y), seed ^ 0x9e37);
    let w = g.constant(&w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

/// Parameters with every entry perturbed, so zero-initialized layers and
/// unit gains do not hide gradient paths.
pub fn jittered(store: ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut store = store;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    store
}

type Case = fn() -> Result<f64>;

fn check(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
) -> Result<f64> {
    Ok(grad_check_sampled(f, inputs, EPSILON, usize::MAX, 0)?.max_rel_error)
}

fn check_sampled(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    per_input: usize,
) -> Result<f64> {
    Ok(grad_check_sampled(f, inputs, EPSILON, per_input, 7)?.max_rel_error)
}

fn binary_cases() -> Result<f64> {
    let a = uniform(&[3, 5], 1);
    let b = uniform(&[1, 5], 2);
    let nz = away_from_zero(&[3, 1], 3);
    let mut worst = 0f64;
    worst = worst.max(check(
        |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 1)
        },
        &[a.clone(), b.clone()],
    )?);
    worst = worst.max(check(
        |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 2)
        },
        &[a.clone(), b.clone()],
    )?);
    worst = worst.max(check(
        |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 3)
        },
        &[a.clone(), b],
    )?);
    worst = worst.max(check(
        |g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 4)
        },
        &[a, nz],
    )?);
    Ok(worst)
}

fn unary_cases() -> Result<f64> {
    let x = uniform(&[2, 6], 5);
    let nz = away_from_zero(&[2, 6], 6);
    let pos = uniform_in(&[2, 6], 0.2, 2.0, 7);
    let mut worst = 0f64;
    let smooth: [fn(&mut Graph<f64>, Var) -> Result<Var>; 5] = [
        |g, x| g.neg(x),
        |g, x| g.exp(x),
        |g, x| g.gelu(x),
        |g, x| g.sigmoid(x),
        |g, x| g.square(x),
    ];
    for (i, op) in smooth.iter().enumerate() {
        worst = worst.max(check(
            |g, v| {
                let y = op(g, v[0])?;
                project(g, y, 10 + i as u64)
            },
            &[x.clone()],
        )?);
    }
    let kinked: [fn(&mut Graph<f64>, Var) -> Result<Var>; 3] =
        [|g, x| g.abs(x), |g, x| g.relu(x), |g, x| g.recip(x)];
    for (i, op) in kinked.iter().enumerate() {
        worst = worst.max(check(
            |g, v| {
                let y = op(g, v[0])?;
                project(g, y, 20 + i as u64)
            },
            &[nz.clone()],
        )?);
    }
    let positive: [fn(&mut Graph<f64>, Var) -> Result<Var>; 2] = [|g, x| g.ln(x), |g, x| g.sqrt(x)];
    for (i, op) in positive.iter().enumerate() {
        worst = worst.max(check(
            |g, v| {
                let y = op(g, v[0])?;
                project(g, y, 30 + i as u64)
            },
            &[pos.clone()],
        )?);
    }
    worst = worst.max(check(
        |g, v| {
            let y = g.scale(v[0], -1.7)?;
            project(g, y, 40)
        },
        &[x.clone()],
    )?);
    worst = worst.max(check(
        |g, v| {
            let y = g.add_scalar(v[0], 0.4)?;
            project(g, y, 41)
        },
        &[x],
    )?);
    worst = worst.max(check(
        |g, v| {
            let y = g.clamp_min(v[0], 0.0)?;
            project(g, y, 42)
        },
        &[nz],
    )?);
    Ok(worst)
}

fn matmul_cases() -> Result<f64> {
    let a = uniform(&[2, 4, 5], 8);
    let b = uniform(&[2, 5, 3], 9);
    let m = uniform(&[4, 5], 10);
    let n = uniform(&[5, 3], 29);
    let x = uniform(&[3, 4, 5], 11);
    let w = uniform(&[6, 5], 12);
    let bias = uniform(&[6], 13);
    let mut worst = check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 50)
        },
        &[a.clone(), b],
    )?;
    worst = worst.max(check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 51)
        },
        &[m, n],
    )?);
    worst = worst.max(check(
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, 52)
        },
        &[x, w, bias],
    )?);
    Ok(worst)
}

fn movement_cases() -> Result<f64> {
    let x = uniform(&[2, 3, 4], 14);
    let y = uniform(&[2, 2, 4], 15);
    let ops: [fn(&mut Graph<f64>, Var) -> Result<Var>; 8] = [
        |g, x| g.reshape(x, &[6, 4]),
        |g, x| g.permute(x, &[2, 0, 1]),
        |g, x| g.transpose_last(x),
        |g, x| g.slice(x, 1, 1, 2),
        |g, x| g.flip(x, 2),
        |g, x| g.pad_edge(x, 1, 2, 3),
        |g, x| g.roll(x, 2, -3),
        |g, x| g.roll(x, 1, 1),
    ];
    let mut worst = 0f64;
    for (i, op) in ops.iter().enumerate() {
        worst = worst.max(check(
            |g, v| {
                let o = op(g, v[0])?;
                project(g, o, 60 + i as u64)
            },
            &[x.clone()],
        )?);
    }
    worst = worst.max(check(
        |g, v| {
            let o = g.concat(&[v[0], v[1]], 1)?;
            project(g, o, 70)
        },
        &[x, y],
    )?);
    Ok(worst)
}

fn reduction_cases() -> Result<f64> {
    let x = uniform(&[3, 4, 5], 16);
    let ops: [fn(&mut Graph<f64>, Var) -> Result<Var>; 7] = [
        |g, x| g.sum(x, 1),
        |g, x| g.mean(x, 2),
        |g, x| g.max(x, 2),
        |g, x| g.l2_norm(x, 0),
        |g, x| g.sum_all(x),
        |g, x| g.mean_all(x),
        |g, x| g.softmax(x, 2),
    ];
    let mut worst = 0f64;
    for (i, op) in ops.iter().enumerate() {
        worst = worst.max(check(
            |g, v| {
                let o = op(g, v[0])?;
                project(g, o, 80 + i as u64)
            },
            &[x.clone()],
        )?);
    }
    let gain = uniform(&[5], 17);
    let offset = uniform(&[5], 18);
    worst = worst.max(check(
        |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 2, 1e-5)?;
            project(g, o, 90)
        },
        &[x, gain, offset],
    )?);
    Ok(worst)
}

fn layout_cases() -> Result<f64> {
    let seq = uniform(&[2, 7, 3], 19);
    let spec = WindowSpec::new(4, 2).expect("valid window");
    let mut worst = check(
        |g, v| {
            let (w, layout) = window_partition(g, v[0], &spec)?;
            let sq = g.square(w)?;
            let back = window_reverse(g, sq, &layout)?;
            project(g, back, 100)
        },
        &[seq],
    )?;
    let vol = uniform(&[1, 2, 2, 3, 8], 20);
    worst = worst.max(check(
        |g, v| {
            let o = depth_subpixel(g, v[0], 4)?;
            project(g, o, 101)
        },
        &[vol],
    )?);
    Ok(worst)
}

fn attention_cases() -> Result<f64> {
    let (n, h, t, hd) = (2, 2, 4, 3);
    let q = uniform(&[n, h, t, hd], 21);
    let k = uniform(&[n, h, t, hd], 22);
    let v = uniform(&[n, h, t, hd], 23);
    let log_tau = uniform_in(&[h], -1.0, 0.5, 24);
    let bias = uniform(&[1, h, t, t], 25);
    let mut worst = check(
        |g, x| {
            let o = scaled_cosine_attention(g, x[0], x[1], x[2], x[3], 0.01, Some(x[4]), None)?;
            project(g, o.out, 110)
        },
        &[q, k, v, log_tau, bias],
    )?;

    let mut pb = ParamBuilder::new();
    let mlp = BiasMlp::declare(&mut pb, "bias", 8, h);
    let params = jittered(pb.init::<f64>(3), 4);
    let table = RelativeCoordinateTable::new(t);
    worst = worst.max(check(
        |g, x| {
            let p = Bound::from_vars(x.to_vec());
            let b = positional_bias(g, &table, &mlp, &p)?;
            project(g, b, 111)
        },
        params.tensors(),
    )?);
    Ok(worst)
}

/// Post-norm STL2 block on `[4, 8, d]` tokens with a shifted window, input
/// and every parameter checked.
fn stl2_case() -> Result<f64> {
    let dims = BlockDims {
        bias_hidden: 8,
        ..BlockDims::new(6, 2)
    };
    let mut pb = ParamBuilder::new();
    let block = Stl2Block::declare(&mut pb, "blk", BlockKind::PostNormCosine, &dims);
    let params = jittered(pb.init::<f64>(5), 6);
    let spec = WindowSpec::new(4, 2).expect("valid window");
    let mut inputs = vec![uniform(&[4, 8, 6], 26)];
    inputs.extend(params.tensors().iter().cloned());
    check_sampled(
        |g, x| {
            let p = Bound::from_vars(x[1..].to_vec());
            let y = block.forward(g, &p, x[0], &spec)?;
            project(g, y, 120)
        },
        &inputs,
        12,
    )
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 6,
        heads: 2,
        encoder_depth: 2,
        n_fim: 1,
        window: 4,
        bias_hidden: 8,
        variant: Variant::Full,
        ..ModelConfig::default()
    }
}

/// TAB on a `[1, d, 4, 8, 8]` latent.
fn tab_case() -> Result<f64> {
    let cfg = tiny_config();
    let model = Tvsrn::new(cfg.clone()).expect("valid config");
    let params = jittered(model.init_params::<f64>(7), 8);
    let mut inputs = vec![uniform(&[1, cfg.embed_dim, 4, 8, 8], 27)];
    inputs.extend(params.tensors().iter().cloned());
    check_sampled(
        |g, x| {
            let p = Bound::from_vars(x[1..].to_vec());
            let y = model
                .tab_forward(g, &p, 0, x[0])
                .map_err(into_tensor_error)?;
            project(g, y, 130)
        },
        &inputs,
        4,
    )
}

/// Full model on a `[1, 1, 4, 8, 8]` input.
fn model_case() -> Result<f64> {
    let model = Tvsrn::new(tiny_config()).expect("valid config");
    let params = jittered(model.init_params::<f64>(9), 10);
    let mut inputs = vec![uniform_in(&[1, 1, 4, 8, 8], 0.0, 1.0, 28)];
    inputs.extend(params.tensors().iter().cloned());
    check_sampled(
        |g, x| {
            let p = Bound::from_vars(x[1..].to_vec());
            let y = model.forward(g, &p, x[0]).map_err(into_tensor_error)?;
            project(g, y, 140)
        },
        &inputs,
        3,
    )
}

fn into_tensor_error(e: slicesr::model::ModelError) -> slicesr::tensor::TensorError {
    match e {
        slicesr::model::ModelError::Tensor(t) => t,
        other => panic!("model error in gradient case: {other}"),
    }
}

/// Every gradient case: name and worst relative error.
pub const GRAD_CASES: [(&str, Case); 10] = [
    ("binary", binary_cases),
    ("unary", unary_cases),
    ("matmul", matmul_cases),
    ("movement", movement_cases),
    ("reduction", reduction_cases),
    ("layout", layout_cases),
    ("attention", attention_cases),
    ("stl2", stl2_case),
    ("tab", tab_case),
    ("model", model_case),
];
