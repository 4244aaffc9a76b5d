//! Naive loop references for every tensor-core operator and randomized
//! sweeps comparing them with the optimised kernels. Shared by the operator
//! suite and the acceptance run.
#![allow(dead_code)]

use mobilesal::tensor::ops::{self, Activation, BinaryKind};
use mobilesal::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: usize = 120;
pub const ORACLE_TOL: f64 = 1e-6;

/// Outcome of one operator sweep.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub op: &'static str,
    pub cases: usize,
    pub max_abs_err: f64,
    /// First case whose output shape or length disagreed with the reference.
    pub shape_mismatch: Option<usize>,
}

impl Sweep {
    fn new(op: &'static str) -> Self {
        Sweep {
            op,
            cases: 0,
            max_abs_err: 0.0,
            shape_mismatch: None,
        }
    }

    fn record(&mut self, got: &Tensor<f64>, want: &[f64]) {
        if got.len() != want.len() {
            self.shape_mismatch.get_or_insert(self.cases);
        } else {
            for (&g, &w) in got.data().iter().zip(want) {
                let e = (g - w).abs();
                // NaN counts as infinitely wrong.
                self.max_abs_err = if e.is_nan() { f64::INFINITY } else { self.max_abs_err.max(e) };
            }
        }
        self.cases += 1;
    }

    fn shape(&mut self, got: Shape, want: Shape) {
        if got != want {
            self.shape_mismatch.get_or_insert(self.cases);
        }
    }

    pub fn passed(&self) -> bool {
        self.cases >= 100 && self.shape_mismatch.is_none() && self.max_abs_err <= ORACLE_TOL
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

pub fn rand_shape(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> Shape {
    Shape::new(
        rng.gen_range(1..=3),
        rng.gen_range(1..=max_c),
        rng.gen_range(1..=max_hw),
        rng.gen_range(1..=max_hw),
    )
}

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> (Shape, Vec<f64>) {
    let s = x.shape();
    let k = spec.kernel;
    let pad = (spec.dilation * (k - 1) / 2) as isize;
    let eff = spec.dilation * (k - 1) + 1;
    let oh = (s.h + 2 * pad as usize - eff) / spec.stride + 1;
    let ow = (s.w + 2 * pad as usize - eff) / spec.stride + 1;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let mut out = Vec::new();
    for n in 0..s.n {
        for co in 0..spec.out_channels {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - pad;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += x.at(n, g * cin_g + ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (Shape::new(s.n, spec.out_channels, oh, ow), out)
}

fn random_spec(rng: &mut ChaCha8Rng) -> ConvSpec {
    let stride = rng.gen_range(1..=2);
    match rng.gen_range(0..4) {
        0 => ConvSpec::pointwise(rng.gen_range(1..=5), rng.gen_range(1..=5)).with_bias(rng.gen_bool(0.5)),
        1 => ConvSpec::dense(rng.gen_range(1..=4), rng.gen_range(1..=4), 3, stride).with_bias(rng.gen_bool(0.5)),
        2 => ConvSpec::depthwise(rng.gen_range(1..=5), stride, rng.gen_range(1..=3)).with_bias(rng.gen_bool(0.5)),
        _ => {
            let mut s = ConvSpec::dense(1, 1, 1, stride);
            s.kernel = if rng.gen_bool(0.5) { 1 } else { 3 };
            s
        }
    }
}

pub fn conv2d() -> Sweep {
    let mut sw = Sweep::new("conv2d");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let spec = random_spec(&mut rng);
        let shape = Shape::new(
            rng.gen_range(1..=2),
            spec.in_channels,
            rng.gen_range(1..=9),
            rng.gen_range(1..=9),
        );
        let x = rand_tensor(&mut rng, shape, -2.0, 2.0);
        let w = rand_tensor(&mut rng, spec.weight_shape(), -2.0, 2.0);
        let b = spec
            .has_bias
            .then(|| rand_tensor(&mut rng, Shape::vector(spec.out_channels), -2.0, 2.0));
        let got = ops::conv2d(&x, &w, b.as_ref(), &spec).unwrap();
        let (shape, want) = naive_conv(&x, &w, b.as_ref(), &spec);
        sw.shape(got.shape(), shape);
        sw.record(&got, &want);
    }
    sw
}

/// Training-mode and eval-mode batch normalisation.
pub fn batch_norm() -> [Sweep; 2] {
    let (mut tr, mut ev) = (Sweep::new("batch_norm_train"), Sweep::new("batch_norm_eval"));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-5;
    for _ in 0..CASES {
        let s = rand_shape(&mut rng, 4, 6);
        let x = rand_tensor(&mut rng, s, -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, Shape::vector(s.c), -2.0, 2.0);
        let beta = rand_tensor(&mut rng, Shape::vector(s.c), -2.0, 2.0);
        let rm = rand_tensor(&mut rng, Shape::vector(s.c), -2.0, 2.0);
        let rv = rand_tensor(&mut rng, Shape::vector(s.c), 0.1, 2.0);

        let (train, _) = ops::batch_norm_train(&x, &gamma, &beta, eps).unwrap();
        let (eval, _) = ops::batch_norm_eval(&x, &gamma, &beta, &rm, &rv, eps).unwrap();
        let mut want_train = vec![0.0; s.numel()];
        let mut want_eval = vec![0.0; s.numel()];
        for c in 0..s.c {
            let vals: Vec<f64> = (0..s.n)
                .flat_map(|n| (0..s.h).flat_map(move |y| (0..s.w).map(move |xx| (n, y, xx))))
                .map(|(n, y, xx)| x.at(n, c, y, xx))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for n in 0..s.n {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let i = x.index(n, c, y, xx);
                        let v = x.data()[i];
                        want_train[i] = gamma.data()[c] * (v - mean) / (var + eps).sqrt() + beta.data()[c];
                        want_eval[i] = gamma.data()[c] * (v - rm.data()[c]) / (rv.data()[c] + eps).sqrt() + beta.data()[c];
                    }
                }
            }
        }
        tr.record(&train, &want_train);
        ev.record(&eval, &want_eval);
    }
    [tr, ev]
}

pub fn activations() -> [Sweep; 2] {
    let (mut r, mut sg) = (Sweep::new("relu"), Sweep::new("sigmoid"));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..CASES {
        let s = rand_shape(&mut rng, 4, 6);
        let x = rand_tensor(&mut rng, s, -2.0, 2.0);
        let relu: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let sig: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        r.record(&ops::activation(&x, Activation::Relu), &relu);
        sg.record(&ops::activation(&x, Activation::Sigmoid), &sig);
    }
    [r, sg]
}

/// Multiplication and addition, with and without per-channel broadcast.
pub fn elementwise() -> [Sweep; 2] {
    let (mut m, mut a_) = (Sweep::new("mul"), Sweep::new("add"));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let s = rand_shape(&mut rng, 4, 6);
        let a = rand_tensor(&mut rng, s, -2.0, 2.0);
        let broadcast = rng.gen_bool(0.5);
        let bs = if broadcast { Shape::new(s.n, s.c, 1, 1) } else { s };
        let b = rand_tensor(&mut rng, bs, -2.0, 2.0);
        let replicated: Vec<f64> = (0..s.numel())
            .map(|i| {
                let (n, c) = (i / (s.c * s.plane()), (i / s.plane()) % s.c);
                if broadcast {
                    b.at(n, c, 0, 0)
                } else {
                    b.data()[i]
                }
            })
            .collect();
        let mul: Vec<f64> = a.data().iter().zip(&replicated).map(|(x, y)| x * y).collect();
        let add: Vec<f64> = a.data().iter().zip(&replicated).map(|(x, y)| x + y).collect();
        m.record(&ops::elementwise_binary(&a, &b, BinaryKind::Mul).unwrap(), &mul);
        a_.record(&ops::elementwise_binary(&a, &b, BinaryKind::Add).unwrap(), &add);
    }
    [m, a_]
}

pub fn concat() -> Sweep {
    let mut sw = Sweep::new("concat_channels");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..CASES {
        let (n, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5));
        let parts: Vec<Tensor<f64>> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let c = rng.gen_range(1..=4);
                rand_tensor(&mut rng, Shape::new(n, c, h, w), -2.0, 2.0)
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let got = ops::concat_channels(&refs).unwrap();
        let total: usize = parts.iter().map(|p| p.shape().c).sum();
        let mut want = vec![0.0; n * total * h * w];
        for b in 0..n {
            let mut offset = 0;
            for p in &parts {
                for c in 0..p.shape().c {
                    for y in 0..h {
                        for x in 0..w {
                            want[((b * total + offset + c) * h + y) * w + x] = p.at(b, c, y, x);
                        }
                    }
                }
                offset += p.shape().c;
            }
        }
        sw.shape(got.shape(), Shape::new(n, total, h, w));
        sw.record(&got, &want);
    }
    sw
}

/// Separable triangle-kernel formulation of half-pixel bilinear sampling.
pub fn naive_bilinear(x: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let s = x.shape();
    let src = |o: usize, inp: usize, out: usize| {
        ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64)
    };
    let tri = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut out = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (sy, sx) = (src(oy, s.h, oh), src(ox, s.w, ow));
                    let mut acc = 0.0;
                    for iy in 0..s.h {
                        for ix in 0..s.w {
                            acc += x.at(n, c, iy, ix) * tri(sy - iy as f64) * tri(sx - ix as f64);
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn bilinear() -> Sweep {
    let mut sw = Sweep::new("bilinear_resize");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..CASES {
        let s = rand_shape(&mut rng, 3, 7);
        let x = rand_tensor(&mut rng, s, -2.0, 2.0);
        let (oh, ow) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let got = ops::bilinear_resize(&x, oh, ow).unwrap();
        sw.shape(got.shape(), Shape::new(s.n, s.c, oh, ow));
        sw.record(&got, &naive_bilinear(&x, oh, ow));
    }
    sw
}

pub fn pooling_and_linear() -> [Sweep; 2] {
    let (mut p, mut l) = (Sweep::new("global_avg_pool"), Sweep::new("fully_connected"));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..CASES {
        let s = rand_shape(&mut rng, 5, 6);
        let x = rand_tensor(&mut rng, s, -2.0, 2.0);
        let gap = ops::global_avg_pool(&x);
        let want: Vec<f64> = x.data().chunks(s.plane()).map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
        p.record(&gap, &want);

        let out = rng.gen_range(1..=5);
        let w = rand_tensor(&mut rng, Shape::new(out, s.c, 1, 1), -2.0, 2.0);
        let b = rand_tensor(&mut rng, Shape::vector(out), -2.0, 2.0);
        let got = ops::fully_connected(&gap, &w, Some(&b)).unwrap();
        let mut want = Vec::new();
        for n in 0..s.n {
            for o in 0..out {
                want.push(b.data()[o] + (0..s.c).map(|c| w.at(o, c, 0, 0) * gap.at(n, c, 0, 0)).sum::<f64>());
            }
        }
        l.record(&got, &want);
    }
    [p, l]
}

/// Flip, crop and nearest-neighbour resize.
pub fn image_utilities() -> [Sweep; 3] {
    let (mut f, mut c_, mut nr) = (Sweep::new("flip_horizontal"), Sweep::new("crop"), Sweep::new("resize_nearest"));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..CASES {
        let s = rand_shape(&mut rng, 3, 8);
        let x = rand_tensor(&mut rng, s, -2.0, 2.0);

        let flipped = ops::flip_horizontal(&x);
        let want: Vec<f64> = (0..s.numel())
            .map(|i| {
                let (row, col) = (i / s.w, i % s.w);
                x.data()[row * s.w + (s.w - 1 - col)]
            })
            .collect();
        f.record(&flipped, &want);

        let (h, w) = (rng.gen_range(1..=s.h), rng.gen_range(1..=s.w));
        let (top, left) = (rng.gen_range(0..=s.h - h), rng.gen_range(0..=s.w - w));
        let cropped = ops::crop(&x, top, left, h, w).unwrap();
        let mut want = Vec::new();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..h {
                    for xx in 0..w {
                        want.push(x.at(n, c, top + y, left + xx));
                    }
                }
            }
        }
        c_.record(&cropped, &want);

        let (oh, ow) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let near = ops::resize_nearest(&x, oh, ow);
        let mut want = Vec::new();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..oh {
                    for xx in 0..ow {
                        want.push(x.at(n, c, ((2 * y + 1) * s.h / (2 * oh)).min(s.h - 1), ((2 * xx + 1) * s.w / (2 * ow)).min(s.w - 1)));
                    }
                }
            }
        }
        nr.record(&near, &want);
    }
    [f, c_, nr]
}

/// Reflection padding against an explicit mirror index.
pub fn pad_reflect() -> Sweep {
    let mut sw = Sweep::new("pad_reflect");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    for _ in 0..CASES {
        let s = rand_shape(&mut rng, 3, 8);
        let s = Shape::new(s.n, s.c, s.h.max(2), s.w.max(2));
        let x = rand_tensor(&mut rng, s, -2.0, 2.0);
        let (ph, pw) = (rng.gen_range(s.h..=2 * s.h - 2), rng.gen_range(s.w..=2 * s.w - 2));
        let got = ops::pad_reflect(&x, ph, pw).unwrap();
        let mut want = Vec::new();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..ph {
                    for xx in 0..pw {
                        want.push(x.at(n, c, mirror(y, s.h), mirror(xx, s.w)));
                    }
                }
            }
        }
        sw.shape(got.shape(), Shape::new(s.n, s.c, ph, pw));
        sw.record(&got, &want);
    }
    sw
}

pub fn all() -> Vec<Sweep> {
    let mut out = vec![conv2d()];
    out.extend(batch_norm());
    out.extend(activations());
    out.extend(elementwise());
    out.push(concat());
    out.push(bilinear());
    out.extend(pooling_and_linear());
    out.extend(image_utilities());
    out.push(pad_reflect());
    out
}
