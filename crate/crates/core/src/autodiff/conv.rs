//! Stride-1 convolutions via im2col + GEMM.
//!
//! Everything is expressed as a 3D convolution over `(B, C, T, H, W)`;
//! 2D convolutions use `T = 1` and a depth-1 kernel.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    /// Kernel extent along (T, H, W).
    pub kernel: [usize; 3],
    /// Padding along (T, H, W).
    pub padding: [usize; 3],
    /// Wrap the W axis instead of zero padding it.
    pub circular_w: bool,
}

impl ConvGeometry {
    pub fn planar(kernel: usize, padding: usize, circular_w: bool) -> Self {
        Self {
            kernel: [1, kernel, kernel],
            padding: [0, padding, padding],
            circular_w,
        }
    }

    pub fn volumetric(kernel: usize, padding: usize, circular_w: bool) -> Self {
        Self {
            kernel: [kernel, kernel, kernel],
            padding: [padding, padding, padding],
            circular_w,
        }
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn output_dims(&self, t: usize, h: usize, w: usize) -> [usize; 3] {
        let o = |n: usize, k: usize, p: usize| (n + 2 * p + 1).saturating_sub(k);
        [
            o(t, self.kernel[0], self.padding[0]),
            o(h, self.kernel[1], self.padding[1]),
            if self.circular_w {
                w + 2 * self.padding[2] + 1 - self.kernel[2]
            } else {
                o(w, self.kernel[2], self.padding[2])
            },
        ]
    }
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    out: [usize; 3],
}

impl Dims {
    fn out_len(&self) -> usize {
        self.out.iter().product()
    }
}

/// Contiguous runs `(dst, src, len)` along W for each kernel offset; cells
/// that fall in the zero padding are not covered.
fn w_segments(geo: &ConvGeometry, d: &Dims) -> Vec<Vec<(usize, usize, usize)>> {
    (0..geo.kernel[2])
        .map(|dw| {
            let mut runs: Vec<(usize, usize, usize)> = Vec::new();
            for ow in 0..d.out[2] {
                let src = ow as isize + dw as isize - geo.padding[2] as isize;
                let src = if geo.circular_w {
                    src.rem_euclid(d.w as isize) as usize
                } else if src >= 0 && (src as usize) < d.w {
                    src as usize
                } else {
                    continue;
                };
                match runs.last_mut() {
                    Some((o, s, n)) if *o + *n == ow && *s + *n == src => *n += 1,
                    _ => runs.push((ow, src, 1)),
                }
            }
            runs
        })
        .collect()
}

fn offset(n: usize, d: isize, lim: usize) -> Option<usize> {
    let v = n as isize + d;
    (v >= 0 && (v as usize) < lim).then_some(v as usize)
}

/// Calls `f(row, col_offset, src_offset, len)` for every contiguous copy
/// between the column matrix and the input.
fn for_each_run(geo: &ConvGeometry, d: &Dims, mut f: impl FnMut(usize, usize, usize, usize)) {
    let l = d.out_len();
    let segs = w_segments(geo, d);
    let [ot, oh, ow] = d.out;
    for c in 0..d.c {
        for dt in 0..geo.kernel[0] {
            for dh in 0..geo.kernel[1] {
                for (dw, runs) in segs.iter().enumerate() {
                    let row = ((c * geo.kernel[0] + dt) * geo.kernel[1] + dh) * geo.kernel[2] + dw;
                    for b in 0..d.b {
                        for t in 0..ot {
                            let Some(st) = offset(t, dt as isize - geo.padding[0] as isize, d.t) else {
                                continue;
                            };
                            for h in 0..oh {
                                let Some(sh) = offset(h, dh as isize - geo.padding[1] as isize, d.h) else {
                                    continue;
                                };
                                let src = (((b * d.c + c) * d.t + st) * d.h + sh) * d.w;
                                let dst = b * l + (t * oh + h) * ow;
                                for &(o, s, n) in runs {
                                    f(row, dst + o, src + s, n);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry, d: &Dims) -> Array2<f64> {
    let cols = d.b * d.out_len();
    let mut out = vec![0.0; d.c * geo.taps() * cols];
    for_each_run(geo, d, |row, dst, src, n| {
        out[row * cols + dst..][..n].copy_from_slice(&x[src..][..n]);
    });
    Array2::from_shape_vec((d.c * geo.taps(), cols), out).expect("im2col shape")
}

fn col2im(cols: &ArrayView2<f64>, geo: &ConvGeometry, d: &Dims) -> Vec<f64> {
    let ncols = d.b * d.out_len();
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    let mut x = vec![0.0; d.b * d.c * d.t * d.h * d.w];
    for_each_run(geo, d, |row, dst, src, n| {
        for (a, v) in x[src..][..n].iter_mut().zip(&cols[row * ncols + dst..][..n]) {
            *a += v;
        }
    });
    x
}

/// `(O, B·L)` → `(B, O, L)`.
fn unfold_batches(m: Array2<f64>, b: usize, l: usize) -> ArrayD<f64> {
    let o = m.nrows();
    m.into_shape_with_order((o, b, l))
        .unwrap()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// `(B, O, L)` → `(O, B·L)`.
fn fold_batches(g: &Tensor, b: usize, o: usize, l: usize) -> Array2<f64> {
    g.view()
        .into_shape_with_order((b, o, l))
        .unwrap()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, b * l))
        .unwrap()
}

impl Tape {
    /// 3D convolution: `x` is `(B, C, T, H, W)`, `weight` is
    /// `(O, C, kt, kh, kw)`, `bias` is `(O)`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be (B, C, T, H, W)");
        assert_eq!(ws.len(), 5, "conv3d weight must be (O, C, kt, kh, kw)");
        assert_eq!(ws[1], xs[1], "conv3d channel mismatch");
        assert_eq!(&ws[2..], &geo.kernel[..], "conv3d kernel mismatch");
        let d = Dims {
            b: xs[0],
            c: xs[1],
            t: xs[2],
            h: xs[3],
            w: xs[4],
            out: geo.output_dims(xs[2], xs[3], xs[4]),
        };
        let o = ws[0];
        let l = d.out_len();
        let cols = im2col(self.value(x).as_slice().unwrap(), &geo, &d);
        let wm = self
            .value(weight)
            .view()
            .into_shape_with_order((o, d.c * geo.taps()))
            .unwrap();
        let mut y = wm.dot(&cols);
        if let Some(b) = bias {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &bv.insert_axis(Axis(1));
        }
        let out = unfold_batches(y, d.b, l)
            .into_shape_with_order(IxDyn(&[d.b, o, d.out[0], d.out[1], d.out[2]]))
            .unwrap();
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push(out, &inputs, move |c| {
            let gm = fold_batches(c.grad, d.b, o, l);
            let wm = c.inputs[1]
                .view()
                .into_shape_with_order((o, d.c * geo.taps()))
                .unwrap();
            let dx = c.needs[0].then(|| {
                let dcols = wm.t().dot(&gm);
                let dx = col2im(&dcols.view(), &geo, &d);
                ArrayD::from_shape_vec(IxDyn(&[d.b, d.c, d.t, d.h, d.w]), dx).unwrap()
            });
            let dw = c.needs[1].then(|| {
                gm.dot(&cols.t())
                    .into_shape_with_order(IxDyn(&ws))
                    .unwrap()
            });
            let mut res = vec![dx, dw];
            if c.inputs.len() == 3 {
                res.push(c.needs[2].then(|| gm.sum_axis(Axis(1)).into_dyn()));
            }
            res
        })
    }

    /// 2D convolution: `x` is `(B, C, H, W)`, `weight` is `(O, C, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Var {
        assert_eq!(geo.kernel[0], 1, "conv2d needs a depth-1 kernel");
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be (B, C, H, W)");
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]]);
        let w5 = self.reshape(weight, &[ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = self.conv3d(x5, w5, bias, geo);
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }
}
