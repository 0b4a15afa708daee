//! Central finite-difference checks of tape gradients.
//!
//! Both sides run the generic tape in `f64`: the analytic gradient from one
//! backward pass, the numeric one from re-evaluations. Training uses the same
//! code at `f32`, whose round-off alone sits near 1e-3 relative on projected
//! outputs and would hide real errors at that level.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A deterministic computation from parameters to an output tensor of any
/// shape. Non-scalar outputs are projected onto a fixed random direction.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step. Networks with many leaky-ReLU kinks need it
    /// small; `f64` evaluation keeps the differences accurate.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all of them if smaller).
    pub samples_per_param: usize,
    /// Coordinates whose numeric derivative is smaller than this are not scored.
    pub min_magnitude: f64,
    /// Skip coordinates where the two one-sided slopes disagree by more than
    /// this fraction, i.e. the step straddles a ReLU-style kink.
    pub kink_tolerance: f64,
    /// Also check frozen parameters.
    pub include_frozen: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            samples_per_param: 4,
            min_magnitude: 1e-3,
            kink_tolerance: 0.1,
            include_frozen: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max over scored coordinates of |analytic - numeric| / |numeric|
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_small: usize,
    pub skipped_kink: usize,
    pub worst: Option<Worst>,
}

fn projected<O: Objective>(obj: &O, store: &ParamStore<f64>, cot: &[f64]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let out = obj.eval(&mut tape, store)?;
    Ok(tape
        .value(out)
        .data()
        .iter()
        .zip(cot)
        .map(|(a, b)| a * b)
        .sum())
}

/// Compares the tape's gradient of `obj` against central differences on
/// sampled coordinates of every (trainable) parameter. `store` itself is only
/// read.
pub fn grad_check<O: Objective>(store: &ParamStore, cfg: &GradCheckConfig, obj: &O) -> Result<GradCheckReport> {
    let mut rng = Rng::new(cfg.seed);

    let mut wide: ParamStore<f64> = store.cast();
    wide.zero_grad();
    let mut tape = if cfg.include_frozen {
        Tape::<f64>::tracking_frozen()
    } else {
        Tape::<f64>::new()
    };
    let out = obj.eval(&mut tape, &wide)?;
    let out_shape = tape.shape(out).to_vec();
    let cot: Vec<f64> = if out_shape.iter().product::<usize>() == 1 {
        vec![1.0]
    } else {
        (0..out_shape.iter().product()).map(|_| rng.gaussian()).collect()
    };
    let c = tape.constant(Tensor::new(&out_shape, cot.clone())?);
    let prod = tape.mul(out, c)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss, &mut wide)?;

    let targets: Vec<ParamId> = wide
        .iter()
        .filter(|(_, p)| p.trainable || cfg.include_frozen)
        .map(|(id, _)| id)
        .collect();
    let analytic: Vec<Vec<f64>> = targets
        .iter()
        .map(|&id| wide.get(id).grad.data().to_vec())
        .collect();
    wide.zero_grad();

    let base = projected(obj, &wide, &cot)?;
    let h = cfg.step;
    let mut report = GradCheckReport::default();

    for (pi, &id) in targets.iter().enumerate() {
        let n = wide.get(id).value.len();
        let coords: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_param).map(|_| rng.below(n)).collect()
        };
        for idx in coords {
            let orig = wide.get(id).value.data()[idx];
            wide.get_mut(id).value.data_mut()[idx] = orig + h;
            let plus = projected(obj, &wide, &cot)?;
            wide.get_mut(id).value.data_mut()[idx] = orig - h;
            let minus = projected(obj, &wide, &cot)?;
            wide.get_mut(id).value.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let right = (plus - base) / h;
            let left = (base - minus) / h;
            if numeric.abs() < cfg.min_magnitude {
                report.skipped_small += 1;
                continue;
            }
            if (right - left).abs() > cfg.kink_tolerance * right.abs().max(left.abs()) {
                report.skipped_kink += 1;
                continue;
            }
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / numeric.abs();
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(Worst {
                    param: wide.get(id).name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Activation;

    struct Constant;

    impl Objective for Constant {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, _store: &ParamStore<T>) -> Result<Var> {
            Ok(tape.constant(Tensor::scalar(T::lit(1.5))))
        }
    }

    struct TanhOf(ParamId);

    impl Objective for TanhOf {
        fn eval<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
            let x = tape.param(store, self.0);
            tape.activation(x, Activation::Tanh)
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![0.3, -0.2]), true).unwrap();
        let report = grad_check(&store, &GradCheckConfig::default(), &Constant).unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn tanh_matches_central_differences() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::uniform(&[16], -2.0, 2.0, &mut rng), true).unwrap();
        let cfg = GradCheckConfig {
            samples_per_param: 16,
            ..Default::default()
        };
        let report = grad_check(&store, &cfg, &TanhOf(id)).unwrap();
        assert!(report.checked > 8);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }
}
