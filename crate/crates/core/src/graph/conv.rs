//! Convolution, audio framing, and the snake activation as tape ops.
//!
//! 1-d convolutions are lowered to GEMM through im2col; the column matrix is
//! captured for the backward pass (weight gradients are a single GEMM, input
//! gradients a col2im scatter). Transposed convolution reuses the same
//! geometry with the roles of input and output swapped.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix3, IxDyn};

use super::{BackFn, GradSink, Tape, Var};
use crate::scalar::{c, Scalar};

/// Output length of a strided convolution.
pub fn conv_out_len(input_len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input_len + 2 * pad >= kernel,
        "conv: input of length {input_len} (pad {pad}) shorter than kernel {kernel}"
    );
    (input_len + 2 * pad - kernel) / stride + 1
}

/// Output length of a transposed convolution.
pub fn conv_transpose_out_len(input_len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input_len > 0, "conv_transpose: empty input");
    (input_len - 1) * stride + kernel - 2 * pad
}

/// Builds the `[C*K, L_cols]` column matrix with
/// `cols[(ch*K + k), j] = x[ch, j*stride + k - pad]` (zero outside bounds).
fn im2col<T: Scalar>(
    x: &ArrayView2<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    l_cols: usize,
) -> Array2<T> {
    let (channels, len) = (x.nrows(), x.ncols());
    let mut cols = Array2::<T>::zeros((channels * kernel, l_cols));
    for ch in 0..channels {
        let row = x.row(ch);
        let row = row.as_slice().expect("im2col: contiguous row");
        for k in 0..kernel {
            let mut out = cols.row_mut(ch * kernel + k);
            let out = out.as_slice_mut().expect("im2col: contiguous out");
            for (j, o) in out.iter_mut().enumerate() {
                let pos = j * stride + k;
                *o = if pos >= pad && pos - pad < len {
                    row[pos - pad]
                } else {
                    T::zero()
                };
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds the column matrix back onto a
/// `[C, out_len]` signal.
fn col2im<T: Scalar>(
    cols: &ArrayView2<T>,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Array2<T> {
    let l_cols = cols.ncols();
    let mut out = Array2::<T>::zeros((channels, out_len));
    for ch in 0..channels {
        let mut target = out.row_mut(ch);
        let target = target.as_slice_mut().expect("col2im: contiguous row");
        for k in 0..kernel {
            let src = cols.row(ch * kernel + k);
            let src = src.as_slice().expect("col2im: contiguous row");
            for (j, &v) in src.iter().enumerate().take(l_cols) {
                let pos = j * stride + k;
                if pos >= pad && pos - pad < out_len {
                    target[pos - pad] += v;
                }
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// 1-d convolution: `x [C_in, L]` with `w [C_out, C_in, K]` and bias
    /// `b [C_out]`, producing `[C_out, L_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.values[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("conv1d: x must be [C_in, L]");
        let wv = self.values[w.0]
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv1d: w must be [C_out, C_in, K]");
        let bv = self.values[b.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv1d: b must be [C_out]");
        let (c_out, c_in, kernel) = wv.dim();
        assert_eq!(
            xv.nrows(),
            c_in,
            "conv1d: input channels {} != weight channels {c_in}",
            xv.nrows()
        );
        assert_eq!(bv.len(), c_out, "conv1d: bias length mismatch");
        assert!(stride > 0, "conv1d: stride must be positive");
        let l_out = conv_out_len(xv.ncols(), kernel, stride, pad);

        let cols = im2col(&xv, kernel, stride, pad, l_out);
        let w_mat = wv
            .to_shape((c_out, c_in * kernel))
            .expect("conv1d: weight reshape")
            .to_owned();
        let mut y = w_mat.dot(&cols);
        for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }

        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let in_len = xv.ncols();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = g
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("conv1d.back: grad");
                    if nb {
                        sink.add(b.0, g2.sum_axis(Axis(1)).into_dyn());
                    }
                    if nw {
                        let dw = g2.dot(&cols.t());
                        sink.add(
                            w.0,
                            dw.into_shape_with_order(IxDyn(&[c_out, c_in, kernel]))
                                .expect("conv1d.back: dw reshape"),
                        );
                    }
                    if nx {
                        let wv = vals[w.0]
                            .view()
                            .into_dimensionality::<Ix3>()
                            .expect("conv1d.back: w");
                        let w_mat = wv
                            .to_shape((c_out, c_in * kernel))
                            .expect("conv1d.back: w reshape");
                        let dcols = w_mat.t().dot(&g2);
                        let dx = col2im(&dcols.view(), c_in, kernel, stride, pad, in_len);
                        sink.add(x.0, dx.into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(y.into_dyn(), needs, back)
    }

    /// 1-d transposed convolution: `x [C_in, L]` with `w [C_in, C_out, K]`
    /// and bias `b [C_out]`, producing `[C_out, (L-1)*stride + K - 2*pad]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.values[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("conv_transpose1d: x must be [C_in, L]");
        let wv = self.values[w.0]
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv_transpose1d: w must be [C_in, C_out, K]");
        let bv = self.values[b.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv_transpose1d: b must be [C_out]");
        let (c_in, c_out, kernel) = wv.dim();
        assert_eq!(
            xv.nrows(),
            c_in,
            "conv_transpose1d: input channels {} != weight channels {c_in}",
            xv.nrows()
        );
        assert_eq!(bv.len(), c_out, "conv_transpose1d: bias length mismatch");
        assert!(stride > 0, "conv_transpose1d: stride must be positive");
        let l_in = xv.ncols();
        let l_out = conv_transpose_out_len(l_in, kernel, stride, pad);

        // cols[(c_out*K + k), j] contributes to y[c_out, j*stride + k - pad].
        let w_mat = wv
            .to_shape((c_in, c_out * kernel))
            .expect("conv_transpose1d: weight reshape");
        let cols = w_mat.t().dot(&xv);
        let mut y = col2im(&cols.view(), c_out, kernel, stride, pad, l_out);
        for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }

        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let (nx, nw, nb) = (self.needs(x), self.needs(w), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = g
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("conv_transpose1d.back: grad");
                    if nb {
                        sink.add(b.0, g2.sum_axis(Axis(1)).into_dyn());
                    }
                    // dcols is the im2col of the output gradient under the same
                    // geometry, mapping back onto the input grid.
                    let dcols = im2col(&g2, kernel, stride, pad, l_in);
                    if nw {
                        let xv = vals[x.0]
                            .view()
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("conv_transpose1d.back: x");
                        let dw = xv.dot(&dcols.t());
                        sink.add(
                            w.0,
                            dw.into_shape_with_order(IxDyn(&[c_in, c_out, kernel]))
                                .expect("conv_transpose1d.back: dw reshape"),
                        );
                    }
                    if nx {
                        let wv = vals[w.0]
                            .view()
                            .into_dimensionality::<Ix3>()
                            .expect("conv_transpose1d.back: w");
                        let w_mat = wv
                            .to_shape((c_in, c_out * kernel))
                            .expect("conv_transpose1d.back: w reshape");
                        let dx = w_mat.dot(&dcols);
                        sink.add(x.0, dx.into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(y.into_dyn(), needs, back)
    }

    /// Slices a 1-d signal into overlapping frames: `[L] -> [F, win]` with
    /// hop `hop` and no padding. The backward pass overlap-adds.
    pub fn frames(&mut self, x: Var, win: usize, hop: usize) -> Var {
        let xv = self.values[x.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("frames: x must be 1-d");
        let len = xv.len();
        assert!(win > 0 && hop > 0, "frames: win and hop must be positive");
        assert!(
            len >= win,
            "frames: signal length {len} shorter than window {win}"
        );
        let n_frames = (len - win) / hop + 1;
        let src = xv.as_slice().expect("frames: contiguous");
        let mut out = Array2::<T>::zeros((n_frames, win));
        for f in 0..n_frames {
            out.row_mut(f)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(&src[f * hop..f * hop + win]);
        }
        let needs = self.needs(x);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = g
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("frames.back: grad");
                    let mut dx = Array1::<T>::zeros(len);
                    let dxs = dx.as_slice_mut().unwrap();
                    for f in 0..g2.nrows() {
                        let row = g2.row(f);
                        let row = row.as_slice().expect("frames.back: contiguous");
                        for (i, &v) in row.iter().enumerate() {
                            dxs[f * hop + i] += v;
                        }
                    }
                    sink.add(x.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(out.into_dyn(), needs, back)
    }

    /// Snake activation with per-channel learnable frequency:
    /// `y = x + sin^2(alpha * x) / alpha`, `alpha = exp(log_alpha)`.
    ///
    /// `x` is `[C, L]`, `log_alpha` is `[C]`. The log parameterization keeps
    /// `alpha` strictly positive so the division is always safe.
    pub fn snake(&mut self, x: Var, log_alpha: Var) -> Var {
        let xv = self.values[x.0]
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("snake: x must be [C, L]");
        let lav = self.values[log_alpha.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("snake: log_alpha must be [C]");
        assert_eq!(
            xv.nrows(),
            lav.len(),
            "snake: channel count mismatch ({} vs {})",
            xv.nrows(),
            lav.len()
        );
        let mut y = xv.to_owned();
        for (mut row, &la) in y.rows_mut().into_iter().zip(lav.iter()) {
            let alpha = la.exp();
            row.mapv_inplace(|v| {
                let s = (alpha * v).sin();
                v + s * s / alpha
            });
        }
        let needs = self.needs(x) || self.needs(log_alpha);
        let (nx, na) = (self.needs(x), self.needs(log_alpha));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let xv = vals[x.0]
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("snake.back: x");
                    let lav = vals[log_alpha.0]
                        .view()
                        .into_dimensionality::<Ix1>()
                        .expect("snake.back: log_alpha");
                    let g2 = g
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("snake.back: grad");
                    if nx {
                        let mut dx = g2.to_owned();
                        for (mut row, (&la, xrow)) in
                            dx.rows_mut().into_iter().zip(lav.iter().zip(xv.rows()))
                        {
                            let alpha = la.exp();
                            for (d, &xval) in row.iter_mut().zip(xrow) {
                                // dy/dx = 1 + sin(2 alpha x)
                                *d = *d * (T::one() + (c::<T>(2.0) * alpha * xval).sin());
                            }
                        }
                        sink.add(x.0, dx.into_dyn());
                    }
                    if na {
                        let mut dla = Array1::<T>::zeros(lav.len());
                        for (ch, (&la, (xrow, grow))) in lav
                            .iter()
                            .zip(xv.rows().into_iter().zip(g2.rows()))
                            .enumerate()
                        {
                            let alpha = la.exp();
                            let mut acc = T::zero();
                            for (&xval, &gval) in xrow.iter().zip(grow) {
                                let s = (alpha * xval).sin();
                                let two_ax = (c::<T>(2.0) * alpha * xval).sin();
                                // dy/dalpha = x sin(2 alpha x)/alpha - sin^2/alpha^2
                                // dy/dlog_alpha = dy/dalpha * alpha
                                let dy_dla = xval * two_ax - s * s / alpha;
                                acc += gval * dy_dla;
                            }
                            dla[ch] = acc;
                        }
                        sink.add(log_alpha.0, dla.into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(y.into_dyn(), needs, back)
    }
}

/// Non-graph im2col used by tests and by inference helpers.
pub fn im2col_reference<T: Scalar>(
    x: &ArrayView2<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let l_out = conv_out_len(x.ncols(), kernel, stride, pad);
    im2col(x, kernel, stride, pad, l_out)
}

/// Direct (non-GEMM) convolution used as an independent oracle in tests.
pub fn conv1d_reference<T: Scalar>(
    x: &ArrayView2<T>,
    w: &ndarray::ArrayView3<T>,
    b: &ArrayView1<T>,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (c_out, c_in, kernel) = w.dim();
    assert_eq!(x.nrows(), c_in);
    let l_out = conv_out_len(x.ncols(), kernel, stride, pad);
    let mut y = Array2::<T>::zeros((c_out, l_out));
    for co in 0..c_out {
        for j in 0..l_out {
            let mut acc = b[co];
            for ci in 0..c_in {
                for k in 0..kernel {
                    let pos = j * stride + k;
                    if pos >= pad && pos - pad < x.ncols() {
                        acc += w[(co, ci, k)] * x[(ci, pos - pad)];
                    }
                }
            }
            y[(co, j)] = acc;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr1, arr2, Array3};
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn conv1d_matches_direct_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Array2::<f64>::from_shape_fn((3, 17), |_| rng.gen_range(-1.0..1.0));
        let w = Array3::<f64>::from_shape_fn((4, 3, 5), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::<f64>::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));

        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone().into_dyn());
        let wv = t.constant(w.clone().into_dyn());
        let bv = t.constant(b.clone().into_dyn());
        let y = t.conv1d(xv, wv, bv, 2, 2);
        let expect = conv1d_reference(&x.view(), &w.view(), &b.view(), 2, 2);
        for (&got, &want) in t.value(y).iter().zip(expect.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn conv_lengths_follow_the_strided_formulas() {
        assert_eq!(conv_out_len(8000, 4, 2, 1), 4000);
        assert_eq!(conv_out_len(1000, 20, 10, 5), 100);
        assert_eq!(conv_transpose_out_len(100, 20, 10, 5), 1000);
        assert_eq!(conv_transpose_out_len(4000, 4, 2, 1), 8000);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> must equal <x, conv_transpose(y)> when both use the
        // same weights, zero bias, and mirrored geometry.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Array2::<f64>::from_shape_fn((2, 24), |_| rng.gen_range(-1.0..1.0));
        let w = Array3::<f64>::from_shape_fn((3, 2, 6), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::<f64>::from_shape_fn((3, 12), |_| rng.gen_range(-1.0..1.0));
        let (stride, pad) = (2, 2);

        let mut t = Tape::<f64>::new();
        let xv = t.constant(x.clone().into_dyn());
        let wv = t.constant(w.clone().into_dyn());
        let zb3 = t.constant(Array1::<f64>::zeros(3).into_dyn());
        let conv_x = t.conv1d(xv, wv, zb3, stride, pad);
        assert_eq!(t.shape(conv_x), &[3, 12]);
        let lhs: f64 = t
            .value(conv_x)
            .iter()
            .zip(y.iter())
            .map(|(&a, &b)| a * b)
            .sum();

        // Transposed direction with w viewed as [C_in=3, C_out=2, K].
        let w_t = {
            let mut wt = Array3::<f64>::zeros((3, 2, 6));
            for i in 0..3 {
                for j in 0..2 {
                    for k in 0..6 {
                        wt[(i, j, k)] = w[(i, j, k)];
                    }
                }
            }
            wt
        };
        let yv = t.constant(y.into_dyn());
        let wtv = t.constant(w_t.into_dyn());
        let zb2 = t.constant(Array1::<f64>::zeros(2).into_dyn());
        let back = t.conv_transpose1d(yv, wtv, zb2, stride, pad);
        assert_eq!(t.shape(back), &[2, 24]);
        let rhs: f64 = t
            .value(back)
            .iter()
            .zip(x.iter())
            .map(|(&a, &b)| a * b)
            .sum();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn frames_overlap_add_backward() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr1(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).into_dyn());
        let f = t.frames(x, 4, 2);
        assert_eq!(t.shape(f), &[2, 4]);
        let loss = t.sum_all(f);
        let grads = t.backward(loss);
        // Positions 2 and 3 are covered by both frames.
        assert_eq!(
            grads.get(x).unwrap(),
            &arr1(&[1.0, 1.0, 2.0, 2.0, 1.0, 1.0]).into_dyn()
        );
    }

    #[test]
    fn snake_at_zero_alpha_log_is_x_plus_sin_squared() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr2(&[[0.0, 0.5, -1.2]]).into_dyn());
        let la = t.leaf(arr1(&[0.0]).into_dyn());
        let y = t.snake(x, la);
        for (&xv, &yv) in t.value(x).iter().zip(t.value(y).iter()) {
            assert_relative_eq!(yv, xv + xv.sin().powi(2), epsilon = 1e-12);
        }
    }
}
