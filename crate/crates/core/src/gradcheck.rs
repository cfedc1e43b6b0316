//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimizer::{FreeParams, Problem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Coordinates checked per block (all of them if the block is smaller).
    pub samples_per_block: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            samples_per_block: 200,
            seed: 0,
        }
    }
}

/// Outcome for one named block of coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates where only a one-sided difference agreed.
    pub kinks: usize,
    pub failures: usize,
    pub worst_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.failures == 0)
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.worst_rel_error).fold(0.0, f64::max)
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against differences of `f` around `x`.
///
/// The relative error is `|a − n| / max(|a|, |n|, floor)`, where the floor is
/// raised to the round-off resolution of the difference quotient,
/// `4 ε |f(x)| / (h · tolerance)`, so gradients below what the step can
/// resolve are compared at that resolution.
///
/// For the configured step and then steps ten and a hundred times smaller
/// (parameters that move many bilinear samples at once, such as pose twists,
/// cross interpolation-cell kinks at coarse steps), central differences are tried first, then their Richardson extrapolation (for
/// strongly curved regions), then second-order one-sided differences on both
/// sides, so an isolated kink of a piecewise-smooth loss near `x` does not
/// count as a failure. Coordinates accepted only by a one-sided difference
/// are counted as kinks.
pub fn gradcheck<F>(f: F, x: &[f64], analytic: &[f64], blocks: &[(String, std::ops::Range<usize>)], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::Config(format!("{} coordinates but {} gradient entries", x.len(), analytic.len())));
    }
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0 && cfg.floor > 0.0) {
        return Err(Error::Config("gradcheck step, tolerance and floor must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f0 = f(x)?;
    let mut xs = x.to_vec();
    let mut eval_at = |i: usize, delta: f64| -> Result<f64> {
        xs[i] = x[i] + delta;
        let v = f(&xs);
        xs[i] = x[i];
        v
    };
    let h = cfg.step;
    let mut reports = Vec::with_capacity(blocks.len());
    for (name, range) in blocks {
        if range.end > x.len() {
            return Err(Error::Config(format!("block {name} exceeds the coordinate count")));
        }
        let len = range.len();
        let mut idx: Vec<usize> = if len <= cfg.samples_per_block {
            range.clone().collect()
        } else {
            sample(&mut rng, len, cfg.samples_per_block).into_iter().map(|i| range.start + i).collect()
        };
        idx.sort_unstable();
        let mut rep = BlockReport {
            name: name.clone(),
            checked: idx.len(),
            kinks: 0,
            failures: 0,
            worst_rel_error: 0.0,
            worst_index: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in idx {
            let a = analytic[i];
            let mut best = (f64::INFINITY, 0.0);
            let mut verdict = None;
            for s in [h, h / 10.0, h / 100.0] {
                let floor = cfg.floor.max(4.0 * f64::EPSILON * f0.abs() / (s * cfg.tolerance));
                let fp = eval_at(i, s)?;
                let fm = eval_at(i, -s)?;
                let central = (fp - fm) / (2.0 * s);
                let e = rel_error(a, central, floor);
                if e < best.0 {
                    best = (e, central);
                }
                if e <= cfg.tolerance {
                    verdict = Some(false);
                    break;
                }
                let fp2 = eval_at(i, 2.0 * s)?;
                let fm2 = eval_at(i, -2.0 * s)?;
                let richardson = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * s);
                let e = rel_error(a, richardson, floor);
                if e < best.0 {
                    best = (e, richardson);
                }
                if e <= cfg.tolerance {
                    verdict = Some(false);
                    break;
                }
                let fwd = (-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * s);
                let bwd = (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * s);
                for n in [fwd, bwd] {
                    let e = rel_error(a, n, floor);
                    if e < best.0 {
                        best = (e, n);
                    }
                }
                if best.0 <= cfg.tolerance {
                    verdict = Some(true);
                    break;
                }
            }
            match verdict {
                Some(true) => {
                    rep.kinks += 1;
                    continue;
                }
                Some(false) => {}
                None => rep.failures += 1,
            }
            let (err, numeric) = best;
            if err > rep.worst_rel_error || rep.worst_index.is_none() {
                rep.worst_rel_error = err;
                rep.worst_index = Some(i);
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
        reports.push(rep);
    }
    Ok(GradcheckReport { blocks: reports })
}

/// Checks the total-loss gradient of `problem` at `params`, one block each
/// for log-depth, edge logits and pose twists.
pub fn gradcheck_total(problem: &Problem, params: &FreeParams, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let eval = problem.evaluate(params)?;
    let x = params.to_vec();
    gradcheck(
        |v| Ok(problem.value(&params.with_values(v))?.total),
        &x,
        &eval.grad.to_vec(),
        &params.blocks(),
        cfg,
    )
}
