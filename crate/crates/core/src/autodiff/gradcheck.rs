use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// max |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `value_at` at the listed
/// coordinates of `point`.
pub fn finite_difference_report(
    mut value_at: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<GradReport> {
    let base = value_at(point)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient check base point".into()));
    }
    let mut x = point.to_vec();
    let mut report = GradReport { max_rel_error: 0.0, worst_coord: 0, coords_checked: 0 };
    for &c in coords {
        let orig = x[c];
        x[c] = orig + step;
        let up = value_at(&x)?;
        x[c] = orig - step;
        let down = value_at(&x)?;
        x[c] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[c] - numeric).abs() / numeric.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at coordinate {c}")));
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = c;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Central-difference check of a scalar tensor function over every coordinate.
pub fn check_gradients<F>(f: F, point: &Tensor<f64>) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    check_gradients_at(f, point, &coords, DEFAULT_STEP)
}

pub fn check_gradients_at<F>(f: F, point: &Tensor<f64>, coords: &[usize], step: f64) -> Result<GradReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let x = g.leaf(point, true);
    let y = f(&g, x)?;
    let value = g.value(y).to_vec();
    if value.len() != 1 {
        return Err(Error::validation("gradient check requires a scalar function"));
    }
    if !value[0].is_finite() {
        return Err(Error::NonFinite("gradient check base point".into()));
    }
    let grads = g.backward(y)?;
    let analytic = grads.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]);
    let shape = point.shape().to_vec();
    finite_difference_report(
        |p| {
            let g = Graph::new();
            let x = g.leaf(&Tensor::new(shape.clone(), p.to_vec())?, false);
            let y = f(&g, x)?;
            let v = g.value(y)[0];
            Ok(v)
        },
        point.data(),
        &analytic,
        coords,
        step,
    )
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Weighted sum with fixed pseudo-random coefficients: turns any tensor into a
/// scalar whose gradient exercises every output element.
pub fn probe(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(&random(&shape, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("shape matches data")
}

/// One entry per registered primitive; each maps a random input to a scalar.
pub type PrimitiveCase = (&'static str, Vec<usize>, fn(&Graph<f64>, Var, u64) -> Result<Var>);

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn side(g: &Graph<f64>, shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
        g.constant(&random(shape, &mut rng))
    }
    vec![
        ("add", vec![3, 4], |g, x, s| {
            let y = g.add(x, side(g, &[3, 4], s))?;
            probe(g, y, s)
        }),
        ("sub", vec![3, 4], |g, x, s| {
            let y = g.sub(side(g, &[3, 4], s), x)?;
            probe(g, y, s)
        }),
        ("mul", vec![3, 4], |g, x, s| {
            let y = g.mul(x, x)?;
            let y = g.mul(y, side(g, &[3, 4], s))?;
            probe(g, y, s)
        }),
        ("broadcast_add", vec![4], |g, x, s| {
            let y = g.add_broadcast(side(g, &[2, 3, 4], s), x)?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("scale", vec![5], |g, x, s| {
            let y = g.scale(x, -1.7)?;
            probe(g, y, s)
        }),
        ("matmul_lhs", vec![2, 3, 4], |g, x, s| {
            let y = g.matmul(x, side(g, &[4, 5], s))?;
            probe(g, y, s)
        }),
        ("matmul_rhs_shared", vec![4, 5], |g, x, s| {
            let y = g.matmul(side(g, &[2, 3, 4], s), x)?;
            probe(g, y, s)
        }),
        ("matmul_batched", vec![2, 4, 3], |g, x, s| {
            let y = g.matmul(side(g, &[2, 3, 4], s), x)?;
            let y = g.matmul_ext(y, x, true)?;
            probe(g, y, s)
        }),
        ("matmul_trans_b", vec![5, 4], |g, x, s| {
            let y = g.matmul_ext(side(g, &[2, 3, 4], s), x, true)?;
            probe(g, y, s)
        }),
        ("linear", vec![3, 4], |g, x, s| {
            let y = g.linear(x, side(g, &[6, 4], s), Some(side(g, &[6], s + 1)))?;
            probe(g, y, s)
        }),
        ("transpose", vec![2, 3, 4], |g, x, s| {
            let y = g.transpose(x)?;
            let y = g.mul(y, side(g, &[2, 4, 3], s))?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("permute", vec![2, 3, 4], |g, x, s| {
            let y = g.permute(x, &[2, 0, 1])?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("reshape", vec![2, 6], |g, x, s| {
            let y = g.reshape(x, &[3, 4])?;
            let y = g.matmul(y, side(g, &[4, 2], s))?;
            probe(g, y, s)
        }),
        ("narrow", vec![3, 5], |g, x, s| {
            let y = g.narrow(x, 1, 1, 3)?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("concat", vec![2, 3], |g, x, s| {
            let y = g.concat(&[x, side(g, &[2, 2], s), x], 1)?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("mean", vec![2, 3, 4], |g, x, s| {
            let y = g.mean(x, 1)?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("sum", vec![7], |g, x, _| {
            let y = g.mul(x, x)?;
            g.sum(y)
        }),
        ("softmax", vec![3, 5], |g, x, s| {
            let y = g.softmax(x)?;
            probe(g, y, s)
        }),
        ("gelu", vec![4, 3], |g, x, s| {
            let y = g.gelu(g.scale(x, 2.5)?)?;
            probe(g, y, s)
        }),
        ("log", vec![6], |g, x, s| {
            let y = g.softmax(x)?;
            let y = g.log(y)?;
            probe(g, y, s)
        }),
        ("layer_norm", vec![3, 6], |g, x, s| {
            let gain = g.add_broadcast(g.constant(&Tensor::full(vec![6], 1.0)), side(g, &[6], s))?;
            let y = g.layer_norm(x, gain, side(g, &[6], s + 3))?;
            probe(g, y, s)
        }),
        ("layer_norm_params", vec![6], |g, x, s| {
            let y = g.layer_norm(side(g, &[3, 6], s), x, x)?;
            probe(g, y, s)
        }),
        ("dropout", vec![4, 4], |g, x, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let y = g.dropout(x, 0.3, true, &mut rng)?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("gather", vec![2, 3], |g, x, s| {
            let index: std::rc::Rc<[usize]> = vec![5, 0, 0, 3, 2, 4, 1, 5].into();
            let y = g.gather(x, index, vec![2, 4])?;
            let y = g.mul(y, y)?;
            probe(g, y, s)
        }),
        ("cross_entropy", vec![4, 2], |g, x, _| g.cross_entropy(x, &[1, 0, 0, 1], &[0.8, 1.4])),
        ("attention", vec![1, 2, 3, 4], |g, x, s| {
            let k = g.scale(x, 0.7)?;
            let v = g.add(x, side(g, &[1, 2, 3, 4], s))?;
            let mut mask = vec![0.0; 9];
            mask[2] = -1e4;
            let mask = g.constant(&t64(&[3, 3], &mask));
            let y = g.attention(x, k, v, Some(mask))?;
            probe(g, y, s)
        }),
    ]
}

/// Worst relative error of every primitive case over `seeds`.
pub fn primitive_suite(seeds: std::ops::Range<u64>) -> Result<Vec<(&'static str, GradReport)>> {
    let mut out = Vec::new();
    for (name, shape, f) in primitive_cases() {
        let mut worst: Option<GradReport> = None;
        for seed in seeds.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = random(&shape, &mut rng);
            let report = check_gradients(|g, x| f(g, x, seed), &point)?;
            if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
                worst = Some(report);
            }
        }
        out.push((name, worst.ok_or_else(|| Error::validation("empty seed range"))?));
    }
    Ok(out)
}
