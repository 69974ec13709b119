//! A catalogue of small loss functions covering every tape primitive, for
//! finite-difference checks from tests and acceptance runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gradcheck::{finite_difference_check, FdConfig, FdReport};
use crate::nn::NamedTensors;
use crate::{BatchNormMode, Result, Scalar, Tape, Tensor, Var};

pub type LossFn<T> = Box<dyn Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>>>;

pub struct Case<T> {
    pub name: &'static str,
    pub inputs: Vec<(&'static str, Vec<usize>)>,
    /// Keep every input at least this far from zero (ReLU kinks).
    pub min_abs: f64,
    /// Inputs become distinct values on a coarse lattice (max-pool ties).
    pub spread: bool,
    pub loss: LossFn<T>,
}

pub fn normal_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| T::lit(d.sample(&mut rng)))
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element contributes
/// a distinct weight to the scalar loss.
pub fn project<T: Scalar>(tape: &Tape<T>, y: &Var<T>) -> Result<Var<T>> {
    let r = tape.constant(normal_tensor(y.shape(), 0xC0FFEE));
    Ok(tape.sum(&tape.mul(y, &r)?))
}

pub fn inputs_for<T: Scalar>(case: &Case<T>, seed: u64) -> NamedTensors<T> {
    let mut set = NamedTensors::new();
    for (i, (name, shape)) in case.inputs.iter().enumerate() {
        let mut t = normal_tensor::<f64>(shape, seed + i as u64);
        if case.spread {
            let n = t.numel();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| t.data()[a].total_cmp(&t.data()[b]));
            for (rank, &idx) in order.iter().enumerate() {
                t.data_mut()[idx] = (rank as f64 - n as f64 / 2.0) * 0.1;
            }
        }
        for v in t.data_mut() {
            if v.abs() < case.min_abs {
                *v = if *v < 0.0 { -case.min_abs } else { case.min_abs } * (1.0 + v.abs());
            }
        }
        set.push(*name, t.cast()).unwrap();
    }
    set
}

/// Every differentiable primitive, each reduced to a scalar loss.
pub fn cases<T: Scalar>() -> Vec<Case<T>> {
    fn case<T: Scalar>(
        name: &'static str,
        inputs: &[(&'static str, &[usize])],
        f: impl Fn(&Tape<T>, &[Var<T>]) -> Result<Var<T>> + 'static,
    ) -> Case<T> {
        Case {
            name,
            inputs: inputs.iter().map(|(n, s)| (*n, s.to_vec())).collect(),
            min_abs: 0.0,
            spread: false,
            loss: Box::new(move |t: &Tape<T>, v: &[Var<T>]| project(t, &f(t, v)?)),
        }
    }
    let mut out = vec![
        case("add", &[("a", &[3, 4]), ("b", &[3, 4])], |t, v| t.add(&v[0], &v[1])),
        case("mul", &[("a", &[3, 4]), ("b", &[3, 4])], |t, v| t.mul(&v[0], &v[1])),
        case("scale", &[("x", &[5])], |t, v| Ok(t.scale(&v[0], -1.7))),
        case("add_broadcast", &[("x", &[2, 3, 4]), ("b", &[4])], |t, v| t.add_broadcast(&v[0], &v[1])),
        case("sum", &[("x", &[2, 3])], |t, v| Ok(t.sum(&v[0]))),
        case("softmax", &[("x", &[3, 5])], |t, v| Ok(t.softmax(&v[0]))),
        case("reshape", &[("x", &[2, 6])], |t, v| t.reshape(&v[0], &[3, 4])),
        case("permute", &[("x", &[2, 3, 4])], |t, v| t.permute(&v[0], &[2, 0, 1])),
        case("concat", &[("a", &[2, 1, 3]), ("b", &[2, 2, 3])], |t, v| t.concat(&[v[0].clone(), v[1].clone()], 1)),
        case("mean_axis", &[("x", &[2, 3, 4])], |t, v| t.mean_axis(&v[0], 1)),
        case("matmul", &[("a", &[3, 4]), ("b", &[4, 2])], |t, v| t.matmul(&v[0], &v[1])),
        case("bmm", &[("a", &[2, 3, 4]), ("b", &[2, 4, 5])], |t, v| t.bmm(&v[0], &v[1])),
        case("conv2d", &[("x", &[1, 2, 5, 5]), ("w", &[3, 2, 3, 3])], |t, v| t.conv2d(&v[0], &v[1], 1, 0)),
        case("conv2d_stride_pad", &[("x", &[2, 2, 7, 6]), ("w", &[3, 2, 3, 3])], |t, v| t.conv2d(&v[0], &v[1], 2, 1)),
        case("conv2d_7x7", &[("x", &[1, 1, 9, 9]), ("w", &[2, 1, 7, 7])], |t, v| t.conv2d(&v[0], &v[1], 2, 3)),
        case("conv2d_1x1", &[("x", &[2, 3, 4, 4]), ("w", &[2, 3, 1, 1])], |t, v| t.conv2d(&v[0], &v[1], 1, 0)),
        case("avg_pool", &[("x", &[1, 2, 6, 6])], |t, v| t.avg_pool2d(&v[0], 3, 1, 1)),
        case("global_avg_pool", &[("x", &[2, 3, 3, 3])], |t, v| t.global_avg_pool(&v[0])),
        case("batch_norm_train", &[("x", &[3, 2, 2, 2]), ("g", &[2]), ("b", &[2])], |t, v| {
            Ok(t.batch_norm(&v[0], &v[1], &v[2], BatchNormMode::Train, 1e-5)?.0)
        }),
        case("batch_norm_train_2d", &[("x", &[4, 3]), ("g", &[3]), ("b", &[3])], |t, v| {
            Ok(t.batch_norm(&v[0], &v[1], &v[2], BatchNormMode::Train, 1e-5)?.0)
        }),
        case("batch_norm_eval", &[("x", &[2, 2, 2, 2]), ("g", &[2]), ("b", &[2])], |t, v| {
            let mean = [T::lit(0.3), T::lit(-0.2)];
            let var = [T::lit(1.5), T::lit(0.7)];
            Ok(t.batch_norm(&v[0], &v[1], &v[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
        }),
        case("layer_norm", &[("x", &[2, 3, 6]), ("g", &[6]), ("b", &[6])], |t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-5)),
        case("dropout", &[("x", &[4, 5])], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            t.dropout(&v[0], 0.4, &mut rng)
        }),
    ];
    let mut relu = case("relu", &[("x", &[4, 5])], |t, v| Ok(t.relu(&v[0])));
    relu.min_abs = 0.05;
    out.push(relu);
    let mut max_pool = case("max_pool", &[("x", &[1, 2, 7, 7])], |t, v| t.max_pool2d(&v[0], 3, 2, 1));
    max_pool.spread = true;
    out.push(max_pool);
    out.push(Case {
        name: "weighted_cross_entropy",
        inputs: vec![("logits", vec![4, 3])],
        min_abs: 0.0,
        spread: false,
        loss: Box::new(|t, v| t.weighted_cross_entropy(&v[0], &[0, 2, 1, 2], &[0.5, 1.25, 2.0])),
    });
    out
}


/// 64-bit reports for the whole catalogue.
pub fn check_all_f64(cfg: &FdConfig) -> Result<Vec<(&'static str, FdReport)>> {
    cases::<f64>()
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((c.name, finite_difference_check(&inputs_for(c, 100 + 10 * i as u64), cfg, &c.loss)?)))
        .collect()
}
