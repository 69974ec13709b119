//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::NamedTensors;
use crate::{Result, Scalar, Tape, TensorError, Var};

#[derive(Clone, Debug)]
pub struct FdConfig {
    /// Perturbation half-width.
    pub eps: f64,
    /// Coordinates checked per block; larger blocks are subsampled.
    pub max_coords: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl FdConfig {
    pub fn for_f64() -> Self {
        FdConfig { eps: 1e-5, max_coords: 24, floor: 1e-4, seed: 0 }
    }

    pub fn for_f32() -> Self {
        FdConfig { eps: 1e-2, max_coords: 24, floor: 1e-2, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < tolerance)
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares the tape gradient of the scalar `loss(tape, blocks)` with
/// central differences for every block in `inputs`.
///
/// `loss` must be deterministic; the base forward is evaluated twice and the
/// check aborts if the results differ.
pub fn finite_difference_check<T, F>(inputs: &NamedTensors<T>, cfg: &FdConfig, loss: F) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
{
    check(inputs, cfg, &loss, &loss)
}

/// Like [`finite_difference_check`], but the central differences are taken on
/// `reference`, the same function evaluated in `f64`. This checks a 32-bit
/// backward pass without 32-bit rounding noise swamping the difference
/// quotient.
pub fn finite_difference_check_with_reference<T, F, G>(
    inputs: &NamedTensors<T>,
    cfg: &FdConfig,
    loss: F,
    reference: G,
) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
    G: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    check(inputs, cfg, &loss, &reference)
}

fn eval<U: Scalar>(values: &NamedTensors<U>, f: &dyn Fn(&Tape<U>, &[Var<U>]) -> Result<Var<U>>) -> Result<f64> {
    let tape = Tape::inference();
    let vars = values.to_vars(&tape);
    Ok(f(&tape, &vars)?.value().item().as_f64())
}

fn check<T: Scalar, U: Scalar>(
    inputs: &NamedTensors<T>,
    cfg: &FdConfig,
    loss: &dyn Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>,
    reference: &dyn Fn(&Tape<U>, &[Var<U>]) -> Result<Var<U>>,
) -> Result<FdReport> {
    let tape = Tape::new();
    let vars = inputs.to_vars(&tape);
    let base = loss(&tape, &vars)?;
    let grads = tape.backward(&base)?;
    let analytic: Vec<Vec<T>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);
    drop(tape);

    let first = base.value().item().as_f64();
    let again = eval(inputs, loss)?;
    if again.to_bits() != first.to_bits() {
        return Err(TensorError::NonDeterministic(format!("loss {first:e} then {again:e}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: NamedTensors<U> = inputs.cast();
    let mut blocks = Vec::with_capacity(inputs.len());
    for (b, (name, t)) in inputs.iter().enumerate() {
        let n = t.numel();
        let mut coords: Vec<usize> =
            if n <= cfg.max_coords { (0..n).collect() } else { sample(&mut rng, n, cfg.max_coords).into_vec() };
        coords.sort_unstable();
        let mut report = BlockReport { name: name.to_string(), checked: coords.len(), max_rel_error: 0.0, max_abs_error: 0.0 };
        for &i in &coords {
            let x = work.get(b).data()[i];
            let (hi, lo) = (x + U::lit(cfg.eps), x - U::lit(cfg.eps));
            work.tensors_mut()[b].data_mut()[i] = hi;
            let lp = eval(&work, reference)?;
            work.tensors_mut()[b].data_mut()[i] = lo;
            let lm = eval(&work, reference)?;
            work.tensors_mut()[b].data_mut()[i] = x;
            let numeric = (lp - lm) / (hi - lo).as_f64();
            let a = analytic[b][i].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        blocks.push(report);
    }
    Ok(FdReport { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn catches_non_determinism() {
        let mut inputs = NamedTensors::<f64>::new();
        inputs.push("x", Tensor::full(&[2], 1.0)).unwrap();
        let calls = std::cell::Cell::new(0);
        let err = finite_difference_check(&inputs, &FdConfig::for_f64(), |tape, v| {
            calls.set(calls.get() + 1);
            Ok(tape.scale(&tape.sum(&v[0]), calls.get() as f64))
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic(_)));
    }

    #[test]
    fn quadratic_passes() {
        let mut inputs = NamedTensors::<f64>::new();
        inputs.push("x", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap()).unwrap();
        let r = finite_difference_check(&inputs, &FdConfig::for_f64(), |tape, v| {
            let sq = tape.mul(&v[0], &v[0])?;
            Ok(tape.sum(&sq))
        })
        .unwrap();
        assert!(r.passes(1e-8), "{r:?}");
        assert_eq!(r.blocks[0].checked, 3);
    }
}
