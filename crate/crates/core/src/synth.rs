//! Synthetic RGB-D scenes: one to three anti-aliased ellipses or
//! rectangles on a textured background, with depth that singles them out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const SUPERSAMPLE: usize = 4;
pub const DEPTH_NOISE: f32 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Primitive {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
}

impl Primitive {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Primitive::Ellipse { cx, cy, rx, ry } => ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0,
            Primitive::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }

    /// Fraction of the pixel's sub-samples inside the shape.
    fn coverage(&self, px: usize, py: usize) -> f32 {
        let step = 1.0 / SUPERSAMPLE as f32;
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f32 + (sx as f32 + 0.5) * step;
                let y = py as f32 + (sy as f32 + 0.5) * step;
                hits += self.contains(x, y) as usize;
            }
        }
        hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
    }
}

/// Ground-truth facts about one placed object.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub depth: f32,
    /// Flat indices of pixels fully covered by this object and untouched
    /// by any object drawn after it.
    pub interior: Vec<usize>,
}

fn random_primitive<R: Rng>(rng: &mut R, size: f32) -> Primitive {
    let rx = rng.gen_range(0.12..0.3) * size;
    let ry = rng.gen_range(0.12..0.3) * size;
    let cx = rng.gen_range(rx..size - rx);
    let cy = rng.gen_range(ry..size - ry);
    if rng.gen_bool(0.5) {
        Primitive::Ellipse { cx, cy, rx, ry }
    } else {
        Primitive::Rect {
            x0: cx - rx,
            y0: cy - ry,
            x1: cx + rx,
            y1: cy + ry,
        }
    }
}

fn distinct_colour<R: Rng>(rng: &mut R, from: [f32; 3]) -> [f32; 3] {
    loop {
        let c: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let dist: f32 = c.iter().zip(&from).map(|(a, b)| (a - b).abs()).sum();
        if dist >= 0.6 {
            return c;
        }
    }
}

/// One scene of `size × size` pixels and the objects placed in it.
pub fn synth_scene<R: Rng>(id: &str, size: usize, rng: &mut R) -> Result<(Sample, Vec<SynthObject>)> {
    if size == 0 {
        return Err(Error::Config("synthetic scene size must be positive".into()));
    }
    let s = size as f32;
    let plane = size * size;

    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
    let (fx, fy) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5));
    let (phx, phy) = (rng.gen_range(0.0..6.3f32), rng.gen_range(0.0..6.3f32));
    let mut rgb = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let tex = 0.08 * (fx * x as f32 + phx).sin() * (fy * y as f32 + phy).sin();
            for c in 0..3 {
                rgb[c * plane + y * size + x] = bg[c] + tex + rng.gen_range(-0.03..0.03);
            }
        }
    }
    let (near, far) = (rng.gen_range(0.1..0.25f32), rng.gen_range(0.3..0.45f32));
    let vertical = rng.gen_bool(0.5);
    let mut depth: Vec<f32> = (0..plane)
        .map(|i| {
            let t = if vertical { (i / size) as f32 } else { (i % size) as f32 } / s;
            near + (far - near) * t
        })
        .collect();

    let count = rng.gen_range(1..=3);
    let mut covers: Vec<Vec<f32>> = Vec::with_capacity(count);
    let mut depths = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = random_primitive(rng, s);
        let colour = distinct_colour(rng, bg);
        let d = rng.gen_range(0.6..0.95f32);
        let stripe = rng.gen_range(0.3..0.9f32);
        let cover: Vec<f32> = (0..plane).map(|i| shape.coverage(i % size, i / size)).collect();
        for (i, &a) in cover.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let tex = 0.05 * (stripe * (i % size + i / size) as f32).sin();
            for c in 0..3 {
                let px = &mut rgb[c * plane + i];
                *px = (1.0 - a) * *px + a * (colour[c] + tex);
            }
            depth[i] = (1.0 - a) * depth[i] + a * d;
        }
        covers.push(cover);
        depths.push(d);
    }

    for v in depth.iter_mut() {
        *v = (*v + rng.gen_range(-DEPTH_NOISE..DEPTH_NOISE)).clamp(0.0, 1.0);
    }
    rgb.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let gt: Vec<f32> = (0..plane)
        .map(|i| covers.iter().any(|c| c[i] >= 0.5) as u8 as f32)
        .collect();

    let objects = (0..count)
        .map(|k| SynthObject {
            depth: depths[k],
            interior: (0..plane)
                .filter(|&i| covers[k][i] == 1.0 && covers[k + 1..].iter().all(|c| c[i] == 0.0))
                .collect(),
        })
        .collect();
    let sample = Sample::new(
        id,
        Tensor::from_vec(Shape::new(1, 3, size, size), rgb)?,
        Tensor::from_vec(Shape::new(1, 1, size, size), depth)?,
        Tensor::from_vec(Shape::new(1, 1, size, size), gt)?,
    )?;
    Ok((sample, objects))
}

/// `n` scenes with ids `synth_000`, `synth_001`, ...; fully determined by
/// `seed`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synth_scene(&format!("synth_{i:03}"), size, &mut rng).map(|(s, _)| s))
        .collect()
}
