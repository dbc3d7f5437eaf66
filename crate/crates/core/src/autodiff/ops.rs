use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

use super::{scalar, zeros_like, Tape, Tensor, Var};
use crate::grid::DiffOps;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn as_matrix(t: &Tensor, cols: usize) -> ArrayView2<'_, f64> {
    let rows = t.len() / cols;
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("standard layout tensor")
}

fn sum_to_trailing(g: &Tensor, trailing: &[usize]) -> Tensor {
    let n: usize = trailing.iter().product();
    let m = as_matrix(g, n);
    m.sum_axis(Axis(0))
        .into_shape_with_order(IxDyn(trailing))
        .expect("trailing shape")
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, &[a, b], |c| vec![Some(c.grad.clone()), Some(c.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.value(a) - self.value(b);
        self.push(out, &[a, b], |c| vec![Some(c.grad.clone()), Some(-c.grad)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(out, &[a, b], |c| {
            vec![
                c.needs[0].then(|| c.grad * c.inputs[1]),
                c.needs[1].then(|| c.grad * c.inputs[0]),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, &[a], move |c| vec![Some(c.grad * k)])
    }

    /// Sum of several same-shaped tensors, each scaled by its coefficient.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = self.value(terms[0].0) * terms[0].1;
        for &(v, k) in &terms[1..] {
            assert_eq!(self.shape(v), out.shape(), "linear_combination: shape");
            out.scaled_add(k, self.value(v));
        }
        let coeffs: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(out, &vars, move |c| {
            coeffs
                .iter()
                .zip(&c.needs)
                .map(|(&k, &need)| need.then(|| c.grad * k))
                .collect()
        })
    }

    /// Elementwise product with a constant tensor (masks, weights).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Var {
        assert_eq!(self.shape(a), k.shape(), "mul_const: shape mismatch");
        let out = self.value(a) * &k;
        self.push(out, &[a], move |c| vec![Some(c.grad * &k)])
    }

    /// `x + y` where `y`'s shape equals the trailing dims of `x`.
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        assert!(
            ys.len() <= xs.len() && xs[xs.len() - ys.len()..] == ys[..],
            "add_trailing: {ys:?} is not a suffix of {xs:?}"
        );
        let out = self.value(x) + self.value(y);
        self.push(out, &[x, y], move |c| {
            vec![
                Some(c.grad.clone()),
                c.needs[1].then(|| sum_to_trailing(c.grad, &ys)),
            ]
        })
    }

    /// `x · w + b` over the last axis; `w` is `(d_in, d_out)`, `b` is `(d_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2);
        let (din, dout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), din, "linear: input width");
        let xm = as_matrix(self.value(x), din);
        let wm = self.value(w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = xm.dot(&wm);
        if let Some(b) = b {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &bv;
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = dout;
        let out = y.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        self.push(out, &inputs, move |c| {
            let g = as_matrix(c.grad, dout);
            let wm: ArrayView2<f64> = c.inputs[1].view().into_dimensionality().unwrap();
            let mut res = Vec::with_capacity(3);
            res.push(c.needs[0].then(|| {
                g.dot(&wm.t())
                    .into_shape_with_order(IxDyn(&xs))
                    .unwrap()
            }));
            res.push(c.needs[1].then(|| {
                let xm = as_matrix(c.inputs[0], din);
                xm.t().dot(&g).into_dyn()
            }));
            if c.inputs.len() == 3 {
                res.push(c.needs[2].then(|| g.sum_axis(Axis(0)).into_dyn()));
            }
            res
        })
    }

    /// Batched matrix product `(G, M, K) × (G, K, N) → (G, M, N)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out = bmm_raw(self.value(a), self.value(b), false, false, (g, m, k, n));
        self.push(out, &[a, b], move |c| {
            // dA = dC · Bᵀ ; dB = Aᵀ · dC
            vec![
                c.needs[0].then(|| bmm_raw(c.grad, c.inputs[1], false, true, (g, m, n, k))),
                c.needs[1].then(|| bmm_raw(c.inputs[0], c.grad, true, false, (g, k, m, n))),
            ]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old = self.shape(x).to_vec();
        let out = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count");
        self.push(out, &[x], move |c| {
            vec![Some(
                c.grad
                    .clone()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap(),
            )]
        })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let out = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(out, &[x], move |c| {
            vec![Some(
                c.grad
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat: shapes");
        let sizes: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        self.push(out, xs, move |c| {
            let mut start = 0;
            sizes
                .iter()
                .zip(&c.needs)
                .map(|(&len, &need)| {
                    let g = need.then(|| {
                        c.grad
                            .slice_axis(Axis(axis), Slice::from(start..start + len))
                            .to_owned()
                    });
                    start += len;
                    g
                })
                .collect()
        })
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let out = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.push(out, &[x], move |c| {
            let mut g = zeros_like(c.inputs[0]);
            g.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(c.grad);
            vec![Some(g)]
        })
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(x));
            parts.push(self.reshape(x, &shape));
        }
        self.concat(&parts, 0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).mapv(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, &[x], move |c| {
            let mut g = c.grad.clone();
            ndarray::Zip::from(&mut g)
                .and(c.inputs[0])
                .for_each(|g, &x| {
                    if x < 0.0 {
                        *g *= slope
                    }
                });
            vec![Some(g)]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| {
            let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        self.push(out, &[x], |c| {
            let mut g = c.grad.clone();
            ndarray::Zip::from(&mut g)
                .and(c.inputs[0])
                .for_each(|g, &v| {
                    let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    *g *= d;
                });
            vec![Some(g)]
        })
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(x).clone();
        for mut row in out
            .view_mut()
            .into_shape_with_order((shape.iter().product::<usize>() / d, d))
            .unwrap()
            .rows_mut()
        {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out, &[x], move |c| {
            let y = as_matrix(c.output, d);
            let g = as_matrix(c.grad, d);
            let dot = (&g * &y).sum_axis(Axis(1)).insert_axis(Axis(1));
            let dx = &y * &(&g - &dot);
            vec![Some(dx.into_shape_with_order(IxDyn(&shape)).unwrap())]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xm = as_matrix(self.value(x), d);
        let (xhat, _) = normalize_rows(&xm, eps);
        let gv = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let bv = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let y = &xhat * &gv + &bv;
        let out = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(out, &[x, gamma, beta], move |c| {
            let xm = as_matrix(c.inputs[0], d);
            let (xhat, inv_std) = normalize_rows(&xm, eps);
            let g = as_matrix(c.grad, d);
            let gamma = c.inputs[1].view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let dgamma = c.needs[1].then(|| (&g * &xhat).sum_axis(Axis(0)).into_dyn());
            let dbeta = c.needs[2].then(|| g.sum_axis(Axis(0)).into_dyn());
            let dx = c.needs[0].then(|| {
                let dxhat = &g * &gamma;
                let mean_d = dxhat.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                let mean_dx = (&dxhat * &xhat)
                    .mean_axis(Axis(1))
                    .unwrap()
                    .insert_axis(Axis(1));
                let inv = inv_std.clone().insert_axis(Axis(1));
                let dx = (&dxhat - &mean_d - &(&xhat * &mean_dx)) * &inv;
                dx.into_shape_with_order(IxDyn(&shape)).unwrap()
            });
            vec![dx, dgamma, dbeta]
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = scalar(self.value(x).sum());
        self.push(out, &[x], |c| {
            let g = c.grad.first().copied().unwrap();
            vec![Some(ArrayD::from_elem(c.inputs[0].raw_dim(), g))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `mean(alpha(h) · (pred − target)²)` where `h` is the second-to-last axis.
    pub fn weighted_mse(&mut self, pred: Var, target: &Tensor, alpha: &Array1<f64>) -> Var {
        let shape = self.shape(pred).to_vec();
        assert_eq!(shape, target.shape(), "weighted_mse: shape mismatch");
        let h_axis = shape.len() - 2;
        assert_eq!(shape[h_axis], alpha.len(), "weighted_mse: weight length");
        let wfull = row_weights(&shape, alpha);
        let diff = self.value(pred) - target;
        let n = diff.len() as f64;
        let loss = (&diff * &diff * &wfull).sum() / n;
        self.push(scalar(loss), &[pred], move |c| {
            let g = c.grad.first().copied().unwrap();
            vec![Some(&diff * &wfull * (2.0 * g / n))]
        })
    }

    /// `∂/∂x` (last axis) with the grid's stencil.
    pub fn d_dx(&mut self, x: Var, ops: &Arc<DiffOps>) -> Var {
        let out = ops.d_dx(&self.value(x).view());
        let ops = Arc::clone(ops);
        self.push(out, &[x], move |c| vec![Some(ops.d_dx_adjoint(&c.grad.view()))])
    }

    /// `∂/∂y` (second-to-last axis) with the grid's stencil.
    pub fn d_dy(&mut self, x: Var, ops: &Arc<DiffOps>) -> Var {
        let out = ops.d_dy(&self.value(x).view());
        let ops = Arc::clone(ops);
        self.push(out, &[x], move |c| vec![Some(ops.d_dy_adjoint(&c.grad.view()))])
    }

    /// Channel axis `c` split into even and odd entries: `(..., 2K, ...)` →
    /// two `(..., K, ...)` tensors.
    pub fn deinterleave(&mut self, v: Var, axis: usize) -> (Var, Var) {
        let k2 = self.shape(v)[axis];
        assert!(k2 % 2 == 0, "deinterleave: odd channel count");
        let even = self.stride_select(v, axis, 0);
        let odd = self.stride_select(v, axis, 1);
        (even, odd)
    }

    fn stride_select(&mut self, v: Var, axis: usize, offset: usize) -> Var {
        let out = self
            .value(v)
            .slice_axis(Axis(axis), Slice::new(offset as isize, None, 2))
            .to_owned();
        self.push(out, &[v], move |c| {
            let mut g = zeros_like(c.inputs[0]);
            g.slice_axis_mut(Axis(axis), Slice::new(offset as isize, None, 2))
                .assign(c.grad);
            vec![Some(g)]
        })
    }

    /// Inverse of [`Tape::deinterleave`].
    pub fn interleave(&mut self, a: Var, b: Var, axis: usize) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let mut shape = self.shape(a).to_vec();
        shape[axis] *= 2;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::new(0, None, 2))
            .assign(self.value(a));
        out.slice_axis_mut(Axis(axis), Slice::new(1, None, 2))
            .assign(self.value(b));
        self.push(out, &[a, b], move |c| {
            vec![
                c.needs[0].then(|| {
                    c.grad
                        .slice_axis(Axis(axis), Slice::new(0, None, 2))
                        .to_owned()
                }),
                c.needs[1].then(|| {
                    c.grad
                        .slice_axis(Axis(axis), Slice::new(1, None, 2))
                        .to_owned()
                }),
            ]
        })
    }
}

pub(crate) fn row_weights(shape: &[usize], alpha: &Array1<f64>) -> Tensor {
    let h_axis = shape.len() - 2;
    let mut w = ArrayD::zeros(IxDyn(shape));
    for (h, mut lane) in w.axis_iter_mut(Axis(h_axis)).enumerate() {
        lane.fill(alpha[h]);
    }
    w
}

fn normalize_rows(x: &ArrayView2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(1)).unwrap();
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    (xhat, inv_std)
}

/// `op(A) · op(B)` for each of `g` batches. `dims = (g, m, k, n)` describe the
/// result `(g, m, n)` with contraction length `k`.
fn bmm_raw(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    dims: (usize, usize, usize, usize),
) -> Tensor {
    let (g, m, k, n) = dims;
    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((g, m, n));
    for i in 0..g {
        let ai = a3.slice(s![i, .., ..]);
        let bi = b3.slice(s![i, .., ..]);
        let ai = if ta { ai.reversed_axes() } else { ai };
        let bi = if tb { bi.reversed_axes() } else { bi };
        debug_assert_eq!(ai.dim(), (m, k));
        debug_assert_eq!(bi.dim(), (k, n));
        general_mat_mul(1.0, &ai, &bi, 0.0, &mut out.slice_mut(s![i, .., ..]));
    }
    out.into_dyn()
}
