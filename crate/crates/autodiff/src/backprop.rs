//! Vector-Jacobian products for every recorded op, written with `Var`
//! operations so they can be recorded in turn.

use crate::error::Result;
use crate::graph::{Op, Var};
use crate::ops::{apply_map_impl, conv_forward, conv_input_grad, conv_weight_grad};
use crate::tensor::Tensor;

pub(crate) fn vjp<'g>(
    op: &Op,
    inputs: &[Var<'g>],
    out: &Var<'g>,
    gy: &Var<'g>,
    want: &[bool],
) -> Result<Vec<Option<Var<'g>>>> {
    let need = |i: usize| want.get(i).copied().unwrap_or(false);
    let one = |v: Var<'g>| Ok(vec![Some(v)]);
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![
            need(0).then(|| gy.clone()),
            need(1).then(|| gy.clone()),
        ]),
        Op::Sub => Ok(vec![need(0).then(|| gy.clone()), need(1).then(|| gy.neg())]),
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if need(0) { Some(gy.mul(b)?) } else { None },
                if need(1) { Some(gy.mul(a)?) } else { None },
            ])
        }
        Op::Div => {
            let b = &inputs[1];
            let ga = if need(0) { Some(gy.div(b)?) } else { None };
            // d(a/b)/db = -(a/b)/b
            let gb = if need(1) {
                Some(gy.mul(out)?.div(b)?.neg())
            } else {
                None
            };
            Ok(vec![ga, gb])
        }
        Op::Neg => one(gy.neg()),
        Op::Scale(c) => one(gy.scale(*c)),
        Op::Shift => one(gy.clone()),
        Op::Exp => one(gy.mul(out)?),
        Op::Log => one(gy.div(&inputs[0])?),
        Op::Sqrt => one(gy.mul(&out.recip_or_zero())?.scale(0.5)),
        Op::RecipOrZero => one(gy.mul(&out.square())?.neg()),
        Op::Relu => {
            let mask = inputs[0].value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
            one(gy.mul(&gy.constant_like(mask))?)
        }
        Op::Sum => one(gy.expand_to(inputs[0].shape())?),
        Op::Expand => {
            let from = inputs[0].shape();
            let axes: Vec<usize> = from
                .iter()
                .zip(gy.shape())
                .enumerate()
                .filter(|(_, (&f, &t))| f == 1 && t != 1)
                .map(|(d, _)| d)
                .collect();
            one(gy.sum_keep(&axes))
        }
        Op::Reshape => one(gy.reshape(inputs[0].shape())?),
        Op::Transpose => one(gy.t()?),
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            Ok(vec![
                if need(0) { Some(gy.matmul(&b.t()?)?) } else { None },
                if need(1) { Some(a.t()?.matmul(gy)?) } else { None },
            ])
        }
        Op::Conv2d(geom) => {
            let (x, k) = (&inputs[0], &inputs[1]);
            Ok(vec![
                need(0).then(|| conv_input_grad(gy, k, *geom)),
                need(1).then(|| conv_weight_grad(x, gy, *geom)),
            ])
        }
        Op::Conv2dInputGrad(geom) => {
            // out = conv_input_grad(g, k); <u, out> = <conv(u, k), g>
            let (g, k) = (&inputs[0], &inputs[1]);
            let (n, c, f) = (gy.shape()[0], k.shape()[1], k.shape()[0]);
            Ok(vec![
                need(0).then(|| conv_forward(gy, k, n, c, f, *geom)),
                need(1).then(|| conv_weight_grad(gy, g, *geom)),
            ])
        }
        Op::Conv2dWeightGrad(geom) => {
            // out = conv_weight_grad(x, g); <u, out> = <conv(x, u), g>
            let (x, g) = (&inputs[0], &inputs[1]);
            let (n, c, f) = (x.shape()[0], x.shape()[1], gy.shape()[0]);
            Ok(vec![
                need(0).then(|| conv_input_grad(g, gy, *geom)),
                need(1).then(|| conv_forward(x, gy, n, c, f, *geom)),
            ])
        }
        Op::Stack => (0..inputs.len())
            .map(|i| if need(i) { gy.select(i).map(Some) } else { Ok(None) })
            .collect(),
        Op::Select { index, len } => {
            let zeros = gy.constant_like(Tensor::zeros(gy.shape().to_vec()));
            let parts: Vec<Var<'g>> = (0..*len)
                .map(|i| if i == *index { gy.clone() } else { zeros.clone() })
                .collect();
            one(Var::stack(&parts)?)
        }
        Op::Map { map, transposed } => {
            one(apply_map_impl(gy, map, !transposed, inputs[0].shape())?)
        }
    }
}
