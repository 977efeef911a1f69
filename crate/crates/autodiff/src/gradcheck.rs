//! Central finite differences for checking gradients.
//!
//! The numeric side only ever evaluates function values on fresh graphs; the
//! backward sweep of the function under test is never consulted. The
//! [`standard_cases`] table covers every differentiable op.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`], so that entries whose true
/// gradient is essentially zero are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-3;

/// Default step, scaled by `max(1, |x|)` per coordinate.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, ABS_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_gradient(
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    which: usize,
    rel_step: f64,
) -> Result<Tensor> {
    let base = inputs[which].to_vec();
    let mut grad = vec![0.0; base.len()];
    let mut probe = inputs.to_vec();
    for i in 0..base.len() {
        let h = rel_step * base[i].abs().max(1.0);
        let mut shifted = base.clone();
        shifted[i] = base[i] + h;
        probe[which] = Tensor::new(inputs[which].shape().to_vec(), shifted.clone())?;
        let plus = f(&probe)?;
        shifted[i] = base[i] - h;
        probe[which] = Tensor::new(inputs[which].shape().to_vec(), shifted)?;
        let minus = f(&probe)?;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(inputs[which].shape().to_vec(), grad)
}

/// Pins a closure to the higher-ranked signature the checkers expect.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    f
}

/// Evaluates a graph-building scalar function.
///
/// Inputs are registered as leaves so that functions which internally take
/// gradients (for second-order checks) see the same structure as in the
/// analytic pass; only the returned value is used.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    f(&g, &vars)?.item()
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let refs: Vec<&Var<'_>> = vars.iter().collect();
    Ok(out
        .backward(&refs, false)?
        .into_iter()
        .map(Var::into_value)
        .collect())
}

/// Relative error of the analytic gradient against central differences,
/// one entry per input.
pub fn check_gradients<F>(f: &F, inputs: &[Tensor], rel_step: f64) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic = analytic_gradients(f, inputs)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (which, a) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(|probe| eval_scalar(f, probe), inputs, which, rel_step)?;
        errors.push(relative_error(a, &numeric));
    }
    Ok(errors)
}

/// Small deterministic generator for test inputs.
#[derive(Clone, Debug)]
pub struct CaseRng(u64);

impl CaseRng {
    pub fn new(seed: u64) -> Self {
        Self(seed ^ 0x9E37_79B9_7F4A_7C15)
    }

    pub fn next_u64(&mut self) -> u64 {
        // splitmix64
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| self.uniform(lo, hi))
    }

    /// Values with magnitude in `[gap, 1]` and random sign, keeping clear of
    /// the kink of piecewise-linear ops.
    pub fn away_from_zero(&mut self, shape: &[usize], gap: f64) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = self.uniform(gap, 1.0);
            if self.next_u64() & 1 == 0 {
                m
            } else {
                -m
            }
        })
    }
}

pub type CaseFn = for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>;

/// One differentiable op under test: a scalar function and an input sampler.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut CaseRng) -> Vec<Tensor>,
    pub f: CaseFn,
}

impl OpCase {
    /// Largest relative error over all inputs for one sampled point.
    pub fn max_error(&self, seed: u64) -> Result<f64> {
        let mut rng = CaseRng::new(seed);
        let inputs = (self.inputs)(&mut rng);
        let errors = check_gradients(&self.f, &inputs, DEFAULT_STEP)?;
        Ok(errors.into_iter().fold(0.0, f64::max))
    }
}

/// Scalarizes an op output with a fixed random projection: `sum(y * r)`.
fn project<'g>(y: Var<'g>, r: &Var<'g>) -> Result<Var<'g>> {
    Ok(y.mul(r)?.sum_all())
}

macro_rules! case {
    ($name:expr, |$rng:ident| $inputs:expr, |$v:ident| $body:expr) => {
        OpCase {
            name: $name,
            inputs: |$rng: &mut CaseRng| $inputs,
            f: |_g, $v| $body,
        }
    };
}

/// Every differentiable op, each scalarized by a random projection that is
/// itself the last input.
pub fn standard_cases() -> Vec<OpCase> {
    vec![
        case!("add", |r| vec![r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[3, 4], -1.0, 1.0)],
            |v| project(v[0].add(&v[1])?, &v[2])),
        case!("add_broadcast", |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[3, 1], -1.0, 1.0), r.tensor(&[2, 3, 4], -1.0, 1.0)],
            |v| project(v[0].add(&v[1])?, &v[2])),
        case!("sub", |r| vec![r.tensor(&[5], -1.0, 1.0), r.tensor(&[5], -1.0, 1.0), r.tensor(&[5], -1.0, 1.0)],
            |v| project(v[0].sub(&v[1])?, &v[2])),
        case!("mul", |r| vec![r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[3, 4], -1.0, 1.0)],
            |v| project(v[0].mul(&v[1])?, &v[2])),
        case!("mul_scalar_operand", |r| vec![r.tensor(&[2, 3], -1.0, 1.0), r.tensor(&[], -1.0, 1.0), r.tensor(&[2, 3], -1.0, 1.0)],
            |v| project(v[0].mul(&v[1])?, &v[2])),
        case!("div", |r| vec![r.tensor(&[6], -1.0, 1.0), r.tensor(&[6], 0.5, 2.0), r.tensor(&[6], -1.0, 1.0)],
            |v| project(v[0].div(&v[1])?, &v[2])),
        case!("neg", |r| vec![r.tensor(&[4], -1.0, 1.0), r.tensor(&[4], -1.0, 1.0)],
            |v| project(v[0].neg(), &v[1])),
        case!("scale_shift", |r| vec![r.tensor(&[4], -1.0, 1.0), r.tensor(&[4], -1.0, 1.0)],
            |v| project(v[0].scale(-1.7).add_scalar(0.3), &v[1])),
        case!("exp", |r| vec![r.tensor(&[5], -1.0, 1.0), r.tensor(&[5], -1.0, 1.0)],
            |v| project(v[0].exp(), &v[1])),
        case!("log", |r| vec![r.tensor(&[5], 0.5, 2.0), r.tensor(&[5], -1.0, 1.0)],
            |v| project(v[0].log()?, &v[1])),
        case!("sqrt", |r| vec![r.tensor(&[5], 0.5, 2.0), r.tensor(&[5], -1.0, 1.0)],
            |v| project(v[0].sqrt()?, &v[1])),
        case!("recip_or_zero", |r| vec![r.away_from_zero(&[5], 0.5), r.tensor(&[5], -1.0, 1.0)],
            |v| project(v[0].recip_or_zero(), &v[1])),
        case!("relu", |r| vec![r.away_from_zero(&[3, 4], 0.05), r.tensor(&[3, 4], -1.0, 1.0)],
            |v| project(v[0].relu(), &v[1])),
        case!("square", |r| vec![r.tensor(&[5], -1.0, 1.0), r.tensor(&[5], -1.0, 1.0)],
            |v| project(v[0].square(), &v[1])),
        case!("sum_axes", |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 4], -1.0, 1.0)],
            |v| project(v[0].sum(&[1], false)?, &v[1])),
        case!("mean_axes", |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[1, 3, 1], -1.0, 1.0)],
            |v| project(v[0].mean(&[0, 2], true)?, &v[1])),
        case!("max_axes", |r| vec![r.tensor(&[3, 5], -1.0, 1.0), r.tensor(&[3], -1.0, 1.0)],
            |v| project(v[0].max(&[1], false)?, &v[1])),
        case!("reshape", |r| vec![r.tensor(&[2, 6], -1.0, 1.0), r.tensor(&[3, 4], -1.0, 1.0)],
            |v| project(v[0].reshape(&[3, 4])?, &v[1])),
        case!("expand", |r| vec![r.tensor(&[1, 3, 1], -1.0, 1.0), r.tensor(&[2, 3, 4], -1.0, 1.0)],
            |v| project(v[0].expand_to(&[2, 3, 4])?, &v[1])),
        case!("transpose", |r| vec![r.tensor(&[2, 5], -1.0, 1.0), r.tensor(&[5, 2], -1.0, 1.0)],
            |v| project(v[0].t()?, &v[1])),
        case!("matmul", |r| vec![r.tensor(&[3, 4], -1.0, 1.0), r.tensor(&[4, 2], -1.0, 1.0), r.tensor(&[3, 2], -1.0, 1.0)],
            |v| project(v[0].matmul(&v[1])?, &v[2])),
        case!("conv2d_pad1", |r| vec![r.tensor(&[2, 2, 5, 5], -1.0, 1.0), r.tensor(&[3, 2, 3, 3], -1.0, 1.0), r.tensor(&[2, 3, 5, 5], -1.0, 1.0)],
            |v| project(v[0].conv2d(&v[1], 1, 1)?, &v[2])),
        case!("conv2d_stride2", |r| vec![r.tensor(&[1, 2, 6, 7], -1.0, 1.0), r.tensor(&[2, 2, 3, 2], -1.0, 1.0), r.tensor(&[1, 2, 2, 3], -1.0, 1.0)],
            |v| project(v[0].conv2d(&v[1], 2, 0)?, &v[2])),
        case!("avg_pool2d", |r| vec![r.tensor(&[2, 2, 4, 6], -1.0, 1.0), r.tensor(&[2, 2, 2, 3], -1.0, 1.0)],
            |v| project(v[0].avg_pool2d(2, 2)?, &v[1])),
        case!("max_pool2d", |r| vec![r.tensor(&[1, 2, 4, 4], -1.0, 1.0), r.tensor(&[1, 2, 2, 2], -1.0, 1.0)],
            |v| project(v[0].max_pool2d(2, 2)?, &v[1])),
        case!("bilinear_up", |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 7, 5], -1.0, 1.0)],
            |v| project(v[0].bilinear_resize(7, 5)?, &v[1])),
        case!("bilinear_down", |r| vec![r.tensor(&[1, 8, 9], -1.0, 1.0), r.tensor(&[1, 3, 4], -1.0, 1.0)],
            |v| project(v[0].bilinear_resize(3, 4)?, &v[1])),
        case!("crop", |r| vec![r.tensor(&[2, 5, 6], -1.0, 1.0), r.tensor(&[2, 3, 2], -1.0, 1.0)],
            |v| project(v[0].crop(crate::Rect { x: 3, y: 1, w: 2, h: 3 })?, &v[1])),
        case!("hflip", |r| vec![r.tensor(&[2, 3, 4], -1.0, 1.0), r.tensor(&[2, 3, 4], -1.0, 1.0)],
            |v| project(v[0].hflip()?, &v[1])),
        case!("stack_select", |r| vec![r.tensor(&[2, 3], -1.0, 1.0), r.tensor(&[2, 3], -1.0, 1.0), r.tensor(&[3, 2], -1.0, 1.0)],
            |v| {
                let s = Var::stack(&[v[0].clone(), v[1].exp()])?;
                project(s.select(1)?.sub(&s.select(0)?.square())?.t()?, &v[2])
            }),
        case!("conv_relu_mean", |r| vec![r.tensor(&[2, 1, 6, 6], -1.0, 1.0), r.tensor(&[3, 1, 3, 3], -1.0, 1.0)],
            |v| v[0].conv2d(&v[1], 1, 1)?.relu().mean_all()),
    ]
}
