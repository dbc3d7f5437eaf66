//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly: values are computed when the op
//! is pushed, and a backward closure is stored alongside. [`Tape::backward`]
//! walks the tape in reverse and returns gradients for every leaf that
//! requires them. Nodes built from constants only are never differentiated.

mod conv;
mod ops;

pub use conv::ConvGeometry;

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Inputs handed to a backward closure.
pub struct BackCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which inputs need a gradient.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackCtx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that computes values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = self.record;
        self.push_node(value, Vec::new(), None, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(
        &mut self,
        mut value: Tensor,
        inputs: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        if !value.is_standard_layout() {
            value = value.as_standard_layout().into_owned();
        }
        self.nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op with output `value`, computed from `inputs`.
    pub fn push<F>(&mut self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&BackCtx) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let inputs: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, inputs, backward, requires_grad)
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Grads { grads };
        }
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let ctx = BackCtx {
                grad: &g,
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                output: &node.value,
                needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.shape(), self.nodes[j].value.shape(), "grad shape");
                match &mut grads[j] {
                    Some(acc) => *acc += &ig,
                    slot => *slot = Some(ig),
                }
            }
        }
        Grads { grads }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn zeros_like(t: &Tensor) -> Tensor {
    ArrayD::zeros(t.raw_dim())
}

pub(crate) fn scalar(x: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), x)
}

/// Central finite difference of `f` with respect to `x[index]`.
pub fn central_difference<F>(x: &mut Tensor, index: usize, eps: f64, mut f: F) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let orig = x.as_slice().expect("standard layout")[index];
    x.as_slice_mut().unwrap()[index] = orig + eps;
    let plus = f(x);
    x.as_slice_mut().unwrap()[index] = orig - eps;
    let minus = f(x);
    x.as_slice_mut().unwrap()[index] = orig;
    (plus - minus) / (2.0 * eps)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Boundary, GridSpec};
    use ndarray::Array1;
    use std::sync::Arc;

    fn det(shape: &[usize], seed: f64) -> Tensor {
        let mut k = 0.0;
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            k += 1.0;
            ((k * 0.7311 + seed) * 12.9898).sin() * 1.3
        })
    }

    /// Checks d(loss)/d(input) for every element of every input.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let loss_of = |vals: &[Tensor]| {
            let mut t = Tape::inference();
            let vs: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
            let out = build(&mut t, &vs);
            // Weighted sum makes every output element matter differently.
            let w = det(t.shape(out), 0.5);
            (t.value(out) * &w).sum()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &vars);
        let w = det(tape.shape(out), 0.5);
        let weighted = tape.mul_const(out, w);
        let loss = tape.sum_all(weighted);
        let grads = tape.backward(loss);
        let mut vals = inputs.clone();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).expect("gradient").clone();
            for j in 0..vals[i].len() {
                let mut x = vals[i].clone();
                let num = central_difference(&mut x, j, 1e-6, |x| {
                    vals[i] = x.clone();
                    let l = loss_of(&vals);
                    l
                });
                vals[i] = inputs[i].clone();
                let a = analytic.as_slice().unwrap()[j];
                assert!(
                    relative_error(a, num, 1e-3) < 1e-6,
                    "input {i} elem {j}: analytic {a} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        check(vec![det(&[2, 3], 0.1), det(&[2, 3], 0.2)], |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.linear_combination(&[(b, 0.5), (v[0], -2.0)]);
            let d = t.gelu(c);
            t.leaky_relu(d, 0.3)
        });
    }

    #[test]
    fn linear_and_layer_norm() {
        check(
            vec![det(&[2, 3, 4], 0.1), det(&[4, 5], 0.2), det(&[5], 0.3), det(&[5], 0.4), det(&[5], 0.5)],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                t.layer_norm(y, v[3], v[4], 1e-5)
            },
        );
    }

    #[test]
    fn attention_pieces() {
        check(vec![det(&[2, 3, 4], 0.1), det(&[2, 4, 5], 0.2)], |t, v| {
            let y = t.bmm(v[0], v[1]);
            let s = t.softmax_last(y);
            let p = t.permute(s, &[2, 0, 1]);
            t.reshape(p, &[5, 6])
        });
    }

    #[test]
    fn structural_ops() {
        check(vec![det(&[2, 4, 3], 0.1), det(&[2, 2, 3], 0.2), det(&[4, 3], 0.3)], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1);
            let s = t.slice_axis(c, 1, 1, 5);
            let a = t.add_trailing(s, v[2]);
            let (e, o) = t.deinterleave(a, 1);
            let st = t.stack(&[e, o]);
            let (e2, o2) = t.deinterleave(st, 2);
            t.interleave(o2, e2, 2)
        });
    }

    #[test]
    fn convolutions() {
        let geo = ConvGeometry::volumetric(3, 1, true);
        check(vec![det(&[1, 2, 3, 4, 5], 0.1), det(&[3, 2, 3, 3, 3], 0.2), det(&[3], 0.3)], move |t, v| {
            t.conv3d(v[0], v[1], Some(v[2]), geo)
        });
        let geo2 = ConvGeometry::planar(3, 1, false);
        check(vec![det(&[2, 2, 4, 5], 0.4), det(&[3, 2, 3, 3], 0.5)], move |t, v| {
            t.conv2d(v[0], v[1], None, geo2)
        });
    }

    #[test]
    fn stencil_ops_and_loss() {
        let grid = GridSpec::global(5, 6, Boundary::Clamp).unwrap();
        let ops = Arc::new(grid.diff_ops());
        let alpha = Array1::from_vec(vec![0.5, 1.0, 1.5, 1.0, 1.0]);
        let target = det(&[2, 5, 6], 0.9);
        check(vec![det(&[2, 5, 6], 0.1)], move |t, v| {
            let dx = t.d_dx(v[0], &ops);
            let dy = t.d_dy(v[0], &ops);
            let s = t.add(dx, dy);
            let l = t.weighted_mse(s, &target, &alpha);
            let m = t.mean_all(v[0]);
            t.add(l, m)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(det(&[3], 0.1));
        let c = t.constant(det(&[3], 0.2));
        let m = t.mul(a, c);
        let l = t.sum_all(m);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap(), &det(&[3], 0.2));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut t = Tape::inference();
        let a = t.leaf(det(&[3], 0.1));
        let l = t.sum_all(a);
        assert!(!t.requires_grad(l));
        assert!(t.backward(l).get(a).is_none());
    }
}
