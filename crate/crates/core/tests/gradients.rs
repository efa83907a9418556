mod common;

use std::rc::Rc;

use asyncflow::autodiff::{Graph, Var};
use asyncflow::numgrad::rel_err;
use asyncflow::params::normal_tensor;
use asyncflow::schedule::ScheduleKind;
use asyncflow::training::cfm_loss_graph;
use asyncflow::{Scalar, Tensor};
use common::{cfm_report, forward_report, random_dit, rng, CfmCase};

#[derive(Clone, Copy, Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    AddScalar,
    MatMul,
    BatchMatMul,
    Transpose,
    Permute,
    Reshape,
    Broadcast,
    Concat,
    Slice,
    SumAxis,
    Mean,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Silu,
    Square,
    Softmax,
    LogSoftmax,
    LayerNorm,
    MaskedFill,
    Clamp,
    Linear,
}

const OPS: [Op; 28] = [
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::Neg,
    Op::Scale,
    Op::AddScalar,
    Op::MatMul,
    Op::BatchMatMul,
    Op::Transpose,
    Op::Permute,
    Op::Reshape,
    Op::Broadcast,
    Op::Concat,
    Op::Slice,
    Op::SumAxis,
    Op::Mean,
    Op::Exp,
    Op::Log,
    Op::Tanh,
    Op::Sigmoid,
    Op::Silu,
    Op::Square,
    Op::Softmax,
    Op::LogSoftmax,
    Op::LayerNorm,
    Op::MaskedFill,
    Op::Clamp,
    Op::Linear,
];

/// Applies `op` to inputs `x` [2,3,4] and `y` [2,3,4] / `w` [4,3] / `bias` [3].
fn apply<T: Scalar>(op: Op, g: &mut Graph<T>, x: Var, y: Var, w: Var, bias: Var) -> Var {
    match op {
        Op::Add => g.add(x, y).unwrap(),
        Op::Sub => g.sub(x, y).unwrap(),
        Op::Mul => g.mul(x, y).unwrap(),
        Op::Neg => g.neg(x),
        Op::Scale => g.scale(x, T::of(-1.7)),
        Op::AddScalar => g.add_scalar(x, T::of(0.3)),
        Op::MatMul => g.matmul(x, w).unwrap(),
        Op::BatchMatMul => {
            let yt = g.permute(y, &[0, 2, 1]).unwrap();
            g.matmul(x, yt).unwrap()
        }
        Op::Transpose => g.transpose(x).unwrap(),
        Op::Permute => g.permute(x, &[2, 0, 1]).unwrap(),
        Op::Reshape => g.reshape(x, &[6, 4]).unwrap(),
        Op::Broadcast => {
            let b = g.reshape(bias, &[1, 3, 1]).unwrap();
            g.broadcast_to(b, &[2, 3, 4]).unwrap()
        }
        Op::Concat => g.concat(&[x, y], 1).unwrap(),
        Op::Slice => g.slice(x, 2, 1, 3).unwrap(),
        Op::SumAxis => g.sum_axis(x, 1).unwrap(),
        Op::Mean => g.mean(x),
        Op::Exp => g.exp(x),
        Op::Log => {
            let sq = g.square(x).unwrap();
            let pos = g.add_scalar(sq, T::of(0.5));
            g.log(pos)
        }
        Op::Tanh => g.tanh(x),
        Op::Sigmoid => g.sigmoid(x),
        Op::Silu => g.silu(x).unwrap(),
        Op::Square => g.square(x).unwrap(),
        Op::Softmax => g.softmax(x),
        Op::LogSoftmax => g.log_softmax(x),
        Op::LayerNorm => g.layer_norm(x, T::of(1e-6)),
        Op::MaskedFill => {
            let mask: Vec<bool> = (0..24).map(|i| i % 5 == 0).collect();
            g.masked_fill(x, Rc::new(mask), T::of(-2.0)).unwrap()
        }
        Op::Clamp => g.clamp(x, T::of(-0.6), T::of(0.8)),
        Op::Linear => {
            let xw = g.linear(x, w, None).unwrap();
            let b = g.reshape(bias, &[3]).unwrap();
            g.add(xw, b).unwrap()
        }
    }
}

struct Inputs {
    x: Tensor<f64>,
    y: Tensor<f64>,
    w: Tensor<f64>,
    bias: Tensor<f64>,
}

/// `Σ op(inputs) ⊙ R` for a fixed random `R`; returns the value and the
/// gradients with respect to all four inputs.
fn probe<T: Scalar>(op: Op, inp: &Inputs, seed: u64) -> (f64, Vec<Tensor<T>>) {
    let mut g = Graph::<T>::new();
    let x = g.input(inp.x.cast());
    let y = g.input(inp.y.cast());
    let w = g.input(inp.w.cast());
    let bias = g.input(inp.bias.cast());
    let out = apply(op, &mut g, x, y, w, bias);
    let r: Tensor<T> = normal_tensor(g.shape(out), &mut rng(seed));
    let rv = g.constant(r);
    let weighted = g.mul(out, rv).unwrap();
    let loss = g.sum(weighted);
    let grads = g.backward(loss).unwrap();
    (g.value(loss).item().f64(), [x, y, w, bias].iter().map(|&v| grads.wrt(v)).collect())
}

fn check_primitives<T: Scalar>(tol: f64) {
    for (k, &op) in OPS.iter().enumerate() {
        let mut r = rng(100 + k as u64);
        let inp = Inputs {
            x: normal_tensor(&[2, 3, 4], &mut r),
            y: normal_tensor(&[2, 3, 4], &mut r),
            w: normal_tensor(&[4, 3], &mut r),
            bias: normal_tensor(&[3], &mut r),
        };
        let (_, auto) = probe::<T>(op, &inp, 7);
        let h = 1e-6;
        for which in 0..4 {
            let len = auto[which].len();
            for j in 0..len {
                let bump = |delta: f64| {
                    let mut p = Inputs { x: inp.x.clone(), y: inp.y.clone(), w: inp.w.clone(), bias: inp.bias.clone() };
                    let t = match which {
                        0 => &mut p.x,
                        1 => &mut p.y,
                        2 => &mut p.w,
                        _ => &mut p.bias,
                    };
                    t.data_mut()[j] += delta;
                    probe::<f64>(op, &p, 7).0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let e = rel_err(auto[which].data()[j].f64(), fd, 1e-3);
                assert!(e < tol, "{op:?} input {which} coord {j}: autodiff {} vs fd {fd} (rel {e:e})", auto[which].data()[j]);
            }
        }
    }
}

#[test]
fn primitives_match_finite_differences_f64() {
    check_primitives::<f64>(1e-6);
}

#[test]
fn primitives_match_finite_differences_f32() {
    check_primitives::<f32>(1e-3);
}

#[test]
fn gradients_of_summed_losses_add_up() {
    let dit = random_dit::<f64>(5, 3, 0.3, 1);
    let case_a = CfmCase::<f64>::new(2, 5, 3, ScheduleKind::Async, 2);
    let case_b = CfmCase::<f64>::new(2, 5, 3, ScheduleKind::Disjoint, 3);
    let grads_of = |cases: &[&CfmCase<f64>]| {
        let mut g = Graph::new();
        let p = dit.params.register(&mut g);
        let mut total: Option<Var> = None;
        for c in cases {
            let l = cfm_loss_graph(&dit, &mut g, &p, &c.x0, &c.masks, &c.schedule, &c.draw, true).unwrap();
            total = Some(match total {
                Some(t) => g.add(t, l).unwrap(),
                None => l,
            });
        }
        dit.params.flatten_grads(&g.backward(total.unwrap()).unwrap().params(dit.params.len()))
    };
    let both = grads_of(&[&case_a, &case_b]);
    let a = grads_of(&[&case_a]);
    let b = grads_of(&[&case_b]);
    for i in 0..both.len() {
        assert!((both[i] - (a[i] + b[i])).abs() <= 1e-12 * (1.0 + both[i].abs()), "coord {i}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let dit = random_dit::<f32>(6, 4, 0.2, 9);
        let case = CfmCase::<f32>::new(3, 6, 4, ScheduleKind::Async, 4);
        let mut g = Graph::new();
        let p = dit.params.register(&mut g);
        let l = cfm_loss_graph(&dit, &mut g, &p, &case.x0, &case.masks, &case.schedule, &case.draw, true).unwrap();
        let grads = dit.params.flatten_grads(&g.backward(l).unwrap().params(dit.params.len()));
        grads.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn cfm_loss_gradient_f64() {
    let r = cfm_report::<f64>(1e-6);
    assert!(r.checked >= 100 && r.max_rel < 1e-5, "max rel {:e}", r.max_rel);
}

#[test]
fn cfm_loss_gradient_f32() {
    let r = cfm_report::<f32>(1e-3);
    assert!(r.checked >= 100 && r.max_rel < 1e-3, "max rel {:e}", r.max_rel);
}

#[test]
fn dit_forward_gradient_f64() {
    let r = forward_report::<f64>(1e-6);
    assert!(r.checked >= 100 && r.max_rel < 1e-5, "max rel {:e}", r.max_rel);
}

#[test]
fn dit_forward_gradient_f32() {
    let r = forward_report::<f32>(1e-3);
    assert!(r.checked >= 100 && r.max_rel < 1e-3, "max rel {:e}", r.max_rel);
}
