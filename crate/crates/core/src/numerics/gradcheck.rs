//! Central finite-difference gradient oracle.

use crate::numerics::mlp::MlpParams;
use crate::rng::SeededRng;

/// A flat, indexable parameter vector the oracle can perturb.
pub trait ParamVector {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    fn set(&mut self, i: usize, v: f64);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ParamVector for Vec<f64> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, i: usize) -> f64 {
        self[i]
    }
    fn set(&mut self, i: usize, v: f64) {
        self[i] = v;
    }
}

impl ParamVector for MlpParams {
    fn len(&self) -> usize {
        self.num_params()
    }
    fn get(&self, i: usize) -> f64 {
        MlpParams::get(self, i)
    }
    fn set(&mut self, i: usize, v: f64) {
        MlpParams::set(self, i, v)
    }
}

/// Several networks treated as one concatenated vector.
impl ParamVector for Vec<MlpParams> {
    fn len(&self) -> usize {
        self.iter().map(|p| p.num_params()).sum()
    }
    fn get(&self, mut i: usize) -> f64 {
        for p in self {
            if i < p.num_params() {
                return p.get(i);
            }
            i -= p.num_params();
        }
        panic!("index out of range")
    }
    fn set(&mut self, mut i: usize, v: f64) {
        for p in self.iter_mut() {
            if i < p.num_params() {
                p.set(i, v);
                return;
            }
            i -= p.num_params();
        }
        panic!("index out of range")
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Maximum relative error between `analytic` and the central difference
/// `(loss(p + h) - loss(p - h)) / 2h` over `probe_count` random coordinates
/// (every coordinate when `probe_count >= len`).
///
/// The denominator is floored at `1e-6` so coordinates whose true gradient
/// is zero are judged on absolute error.
pub fn grad_check<P, F>(
    mut loss_fn: F,
    params: &P,
    analytic: &P,
    probe_count: usize,
    h: f64,
    rng: &mut SeededRng,
) -> f64
where
    P: ParamVector + Clone,
    F: FnMut(&P) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let n = params.len();
    let probes: Vec<usize> = if probe_count >= n {
        (0..n).collect()
    } else {
        (0..probe_count).map(|_| rng.index(n)).collect()
    };
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for i in probes {
        let orig = work.get(i);
        work.set(i, orig + h);
        let up = loss_fn(&work);
        work.set(i, orig - h);
        let down = loss_fn(&work);
        work.set(i, orig);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.get(i), numeric, 1e-6));
    }
    worst
}
