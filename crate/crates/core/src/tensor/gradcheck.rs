//! Central finite-difference checks of tape gradients.
//!
//! Checks run in `f64`: the builder closure is evaluated once with gradients
//! and twice per sampled coordinate with that coordinate nudged by `±eps`.
//! Only forward values feed the numeric estimate, so it does not share code
//! with any backward rule.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;

pub const GRADCHECK_EPS: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `(f(x + eps) - f(x - eps)) / (2 eps)` for a scalar function.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }

    /// Check gradients of the scalar built by `build` with respect to `leaves`.
    ///
    /// At most `max_coords` coordinates are sampled (seeded) across all leaves.
    pub fn run<'a, F>(
        leaves: &[(Vec<usize>, Vec<f64>)],
        build: F,
        max_coords: usize,
        seed: u64,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
    {
        let eval = |perturb: Option<(usize, usize, f64)>| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = leaves
                .iter()
                .enumerate()
                .map(|(li, (shape, data))| {
                    let mut data = data.clone();
                    if let Some((pl, pi, delta)) = perturb {
                        if pl == li {
                            data[pi] += delta;
                        }
                    }
                    tape.leaf(shape.clone(), data, perturb.is_none())
                })
                .collect();
            let loss = build(&mut tape, &vars)?;
            let value = tape.scalar(loss);
            if perturb.is_some() {
                return Ok((value, None));
            }
            tape.backward(loss)?;
            let grads = vars
                .iter()
                .zip(leaves)
                .map(|(&v, (_, d))| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d.len()]))
                .collect();
            Ok((value, Some(grads)))
        };

        let (_, grads) = eval(None)?;
        let grads = grads.expect("unperturbed evaluation returns gradients");

        let offsets: Vec<usize> = leaves
            .iter()
            .scan(0, |acc, (_, d)| {
                let start = *acc;
                *acc += d.len();
                Some(start)
            })
            .collect();
        let total: usize = leaves.iter().map(|(_, d)| d.len()).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks: Vec<usize> = if total <= max_coords {
            (0..total).collect()
        } else {
            sample(&mut rng, total, max_coords).into_vec()
        };
        picks.sort_unstable();

        let mut report = GradCheckReport::default();
        for flat in picks {
            let leaf = offsets.partition_point(|&o| o <= flat) - 1;
            let index = flat - offsets[leaf];
            let plus = eval(Some((leaf, index, GRADCHECK_EPS)))?.0;
            let minus = eval(Some((leaf, index, -GRADCHECK_EPS)))?.0;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
            let analytic = grads[leaf][index];
            let rel_err = relative_error(analytic, numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err >= GRADCHECK_TOL {
                report.failures.push(CoordinateCheck {
                    leaf,
                    index,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
        Ok(report)
    }
}
