//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation applied on each side of a coordinate.
    pub epsilon: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub abs_floor: f64,
    /// Coordinates sampled per parameter tensor (all if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Kink handling for piecewise-smooth objectives. `None` always takes
    /// the plain central difference at `epsilon`.
    pub kinks: Option<KinkPolicy>,
}

/// A central difference is only meaningful when the objective is smooth on
/// `[θ−ε, θ+ε]`. A coordinate whose one-sided slopes, or whose central
/// differences at `ε` and `ε/2`, disagree by more than `smooth_tolerance` is
/// retried at `ε / 4` until `min_epsilon`; if no smooth interval is found it
/// is counted as non-smooth instead of compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinkPolicy {
    pub smooth_tolerance: f64,
    pub min_epsilon: f64,
    /// Largest accepted fraction of non-smooth coordinates.
    pub max_non_smooth: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            coords_per_param: 6,
            seed: 0,
            mode: Mode::Train,
            kinks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordError>,
    pub coords_checked: usize,
    /// Coordinates skipped because no kink-free interval was found.
    pub non_smooth: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(abs_floor);
    (analytic - numeric).abs() / scale
}

fn eval_loss<T: Element>(
    store: &ParamStore<T>,
    mode: Mode,
    build: &impl Fn(&mut Graph<T>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new(store, mode);
    let loss = build(&mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::State(format!("loss must be a scalar, got {}", v.shape())));
    }
    let out = v.data()[0].f64();
    if !out.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {out}")));
    }
    Ok(out)
}

/// Compares the analytic gradient of `build`'s scalar output against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for sampled coordinates of every trainable
/// parameter selected by `filter`.
pub fn grad_check<T: Element>(
    store: &ParamStore<T>,
    build: impl Fn(&mut Graph<T>) -> Result<Var>,
    filter: impl Fn(&str) -> bool,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(store, cfg.mode);
        let loss = build(&mut g)?;
        g.backward(loss)?.into_params()
    };
    let base = match cfg.kinks {
        Some(_) => Some(eval_loss(store, cfg.mode, &build)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: Option<CoordError> = None;
    let mut checked = 0;
    let mut non_smooth = 0;

    for (name, param) in store.iter() {
        if !param.kind.trainable() || !filter(name) {
            continue;
        }
        let len = param.value.len();
        let coords: Vec<usize> = if len <= cfg.coords_per_param {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, cfg.coords_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let grad = &analytic[name];
        for idx in coords {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut perturbed = store.clone();
                let p = perturbed.get_mut(name).expect("name from iteration");
                let slot = &mut p.value.data_mut()[idx];
                *slot = T::of(slot.f64() + delta);
                eval_loss(&perturbed, cfg.mode, &build)
            };
            let a = grad.data()[idx].f64();
            if !a.is_finite() {
                return Err(Error::Numeric(format!("analytic gradient of {name}[{idx}] is {a}")));
            }
            checked += 1;
            let mut eps = cfg.epsilon;
            let numeric = loop {
                let plus = eval_at(eps)?;
                let minus = eval_at(-eps)?;
                let central = (plus - minus) / (2.0 * eps);
                let (Some(policy), Some(f0)) = (cfg.kinks, base) else {
                    break Some(central);
                };
                let (right, left) = ((plus - f0) / eps, (f0 - minus) / eps);
                if relative_error(right, left, cfg.abs_floor) <= policy.smooth_tolerance {
                    // Kinks on both sides can bend the one-sided slopes alike.
                    let half = (eval_at(eps / 2.0)? - eval_at(-eps / 2.0)?) / eps;
                    if relative_error(central, half, cfg.abs_floor) <= policy.smooth_tolerance {
                        break Some(central);
                    }
                }
                eps /= 4.0;
                if eps < policy.min_epsilon {
                    break None;
                }
            };
            let Some(numeric) = numeric else {
                non_smooth += 1;
                continue;
            };
            let rel = relative_error(a, numeric, cfg.abs_floor);
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(CoordError {
                    param: name.to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }

    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    let smooth_enough = match cfg.kinks {
        Some(policy) => non_smooth as f64 <= policy.max_non_smooth * checked as f64,
        None => true,
    };
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coords_checked: checked,
        non_smooth,
        passed: max_rel_error < cfg.tolerance && smooth_enough,
    })
}
