//! Step-by-step reference compositions shared by the block and network
//! suites.
#![allow(dead_code)]

use mobilesal::blocks::Irb;
use mobilesal::params::Initializer;
use mobilesal::tensor::ops::{self, Activation, BinaryKind};
use mobilesal::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-6;

pub fn build(seed: u64, f: impl FnOnce(&mut Initializer<ChaCha8Rng, f64>) -> Result<()>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f(&mut Initializer { store: &mut store, rng: &mut rng }).unwrap();
    store
}

/// Non-trivial BN affine parameters, running statistics and biases.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        let range = match p.kind {
            ParamKind::Weight => continue,
            ParamKind::Bias => -0.1..0.1,
            ParamKind::BnWeight => 0.5..1.5,
            ParamKind::BnBias | ParamKind::RunningMean => -0.5..0.5,
            ParamKind::RunningVar => 0.5..2.0,
        };
        for v in p.value.data_mut() {
            *v = rng.gen_range(range.clone());
        }
    }
}

pub fn zero_weights(store: &mut ParamStore<f64>) {
    for (_, p) in store.iter_mut() {
        if matches!(p.kind, ParamKind::Weight | ParamKind::Bias) {
            p.value.data_mut().fill(0.0);
        }
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    &store.get(name).unwrap_or_else(|| panic!("missing {name}")).value
}

pub fn bn(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
    let p = |s: &str| param(store, &format!("{prefix}.{s}"));
    ops::batch_norm_eval(x, p("weight"), p("bias"), p("running_mean"), p("running_var"), BN_EPS)
        .unwrap()
        .0
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    ops::activation(x, Activation::Relu)
}

pub fn mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    ops::elementwise_binary(a, b, BinaryKind::Mul).unwrap()
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    ops::elementwise_binary(a, b, BinaryKind::Add).unwrap()
}

pub fn conv(store: &ParamStore<f64>, prefix: &str, spec: ConvSpec, x: &Tensor<f64>) -> Tensor<f64> {
    let b = spec.has_bias.then(|| param(store, &format!("{prefix}.conv.bias")));
    ops::conv2d(x, param(store, &format!("{prefix}.conv.weight")), b, &spec).unwrap()
}

pub fn conv_bn(store: &ParamStore<f64>, prefix: &str, spec: ConvSpec, x: &Tensor<f64>) -> Tensor<f64> {
    bn(store, &format!("{prefix}.bn"), &conv(store, prefix, spec, x))
}

pub fn irb_oracle(store: &ParamStore<f64>, b: &Irb, x: &Tensor<f64>) -> Tensor<f64> {
    let h = b.hidden();
    let p = &b.prefix;
    let e = if b.expansion == 1 {
        x.clone()
    } else {
        relu(&conv_bn(store, &format!("{p}.expand"), ConvSpec::pointwise(b.in_channels, h), x))
    };
    let d = relu(&conv_bn(store, &format!("{p}.dw"), ConvSpec::depthwise(h, b.stride, 1), &e));
    let y = conv_bn(store, &format!("{p}.project"), ConvSpec::pointwise(h, b.out_channels), &d);
    if b.stride == 1 && b.in_channels == b.out_channels {
        add(&y, x)
    } else {
        y
    }
}

pub fn attention_oracle(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
    let p = |s: &str| param(store, &format!("{prefix}.{s}"));
    let pooled = ops::global_avg_pool(x);
    let h = relu(&ops::fully_connected(&pooled, p("fc1.weight"), Some(p("fc1.bias"))).unwrap());
    let o = ops::fully_connected(&h, p("fc2.weight"), Some(p("fc2.bias"))).unwrap();
    ops::activation(&o, Activation::Sigmoid)
}

pub fn eval_block(store: &ParamStore<f64>, inputs: &[&Tensor<f64>], f: impl FnOnce(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Tensor<f64> {
    let mut g = Graph::new(store, Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input((*t).clone())).collect();
    let y = f(&mut g, &vars).unwrap();
    g.value(y).clone()
}

pub fn assert_close(what: &str, got: &Tensor<f64>, want: &Tensor<f64>) {
    assert_eq!(got.shape(), want.shape(), "{what}: shape");
    let d = got.max_abs_diff(want);
    assert!(d <= ORACLE_TOL, "{what}: max abs diff {d}");
}
