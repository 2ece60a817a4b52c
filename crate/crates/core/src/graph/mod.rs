//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as an append-only list of nodes. Each op
//! pushes its result value plus a backward closure that, given the gradient
//! of the loss with respect to the op's output, accumulates gradients into
//! the op's parents. [`Tape::backward`] walks the list in reverse from a
//! scalar root.
//!
//! Design notes:
//! - Node values live in a flat `Vec<ArrayD<T>>`; backward closures read
//!   parent values by index instead of capturing copies, so memory stays
//!   proportional to the forward pass.
//! - Ops that only consume constants skip closure creation entirely, so
//!   data-preprocessing subgraphs cost nothing at backward time.
//! - Shape errors inside ops are programming errors and panic with the op
//!   name; public model APIs validate their inputs up front and return
//!   `Result` before any graph is built.

use ndarray::{concatenate, Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, Zip};

use crate::scalar::{c, Scalar};

mod conv;

pub use conv::{conv1d_reference, conv_out_len, conv_transpose_out_len, im2col_reference};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Raw node index (stable for the lifetime of the tape).
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient accumulator passed to backward closures.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<ArrayD<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// Adds `contribution` to the gradient of node `id`.
    pub fn add(&mut self, id: usize, contribution: ArrayD<T>) {
        match &mut self.grads[id] {
            Some(g) => *g += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

type BackFn<T> = Box<dyn Fn(&[ArrayD<T>], &ArrayD<T>, &mut GradSink<T>)>;

struct Meta<T: Scalar> {
    backward: Option<BackFn<T>>,
    needs_grad: bool,
}

/// Gradients returned by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the root with respect to `v`, if any path required it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Append-only computation tape.
pub struct Tape<T: Scalar> {
    values: Vec<ArrayD<T>>,
    metas: Vec<Meta<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<'a, T: Scalar>(a: &'a ArrayD<T>, op: &str) -> ArrayView2<'a, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("{op}: expected 2-d array, got shape {:?}", a.shape()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            metas: Vec::new(),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: ArrayD<T>, needs_grad: bool, backward: Option<BackFn<T>>) -> Var {
        debug_assert!(value.is_standard_layout());
        self.values.push(value);
        self.metas.push(Meta {
            backward,
            needs_grad,
        });
        Var(self.values.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.metas[v.0].needs_grad
    }

    /// Records an input that gradients do not flow into.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value.as_standard_layout().to_owned(), false, None)
    }

    /// Records a differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value.as_standard_layout().to_owned(), true, None)
    }

    /// Convenience: 1-d constant.
    pub fn constant1(&mut self, value: Array1<T>) -> Var {
        self.constant(value.into_dyn())
    }

    /// Convenience: 2-d constant.
    pub fn constant2(&mut self, value: Array2<T>) -> Var {
        self.constant(value.into_dyn())
    }

    // ---------------------------------------------------------------------
    // Elementwise ops (same shape)
    // ---------------------------------------------------------------------

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let value = &self.values[a.0] + &self.values[b.0];
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    if na {
                        sink.add(a.0, g.clone());
                    }
                    if nb {
                        sink.add(b.0, g.clone());
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let value = &self.values[a.0] - &self.values[b.0];
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    if na {
                        sink.add(a.0, g.clone());
                    }
                    if nb {
                        sink.add(b.0, g.mapv(|x| -x));
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let value = &self.values[a.0] * &self.values[b.0];
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    if na {
                        sink.add(a.0, g * &vals[b.0]);
                    }
                    if nb {
                        sink.add(b.0, g * &vals[a.0]);
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// Multiplies by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.values[a.0].mapv(|x| x * k);
        let needs = self.needs(a);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    sink.add(a.0, g.mapv(|x| x * k));
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Adds a constant scalar to every element.
    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let value = self.values[a.0].mapv(|x| x + k);
        let needs = self.needs(a);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    sink.add(a.0, g.clone());
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    fn unary<F, G>(&mut self, a: Var, f: F, dfdx_from_out_and_in: G) -> Var
    where
        F: Fn(T) -> T,
        G: Fn(T, T) -> T + 'static,
    {
        let value = self.values[a.0].mapv(&f);
        let needs = self.needs(a);
        let out_id = self.values.len();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let mut dx = g.clone();
                    Zip::from(&mut dx)
                        .and(&vals[out_id])
                        .and(&vals[a.0])
                        .for_each(|d, &y, &x| *d = *d * dfdx_from_out_and_in(y, x));
                    sink.add(a.0, dx);
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            |y, _x| y * (T::one() - y),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |y, _x| T::one() - y * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(T::zero()),
            |_y, x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// SiLU / swish: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x / (T::one() + (-x).exp()),
            |_y, x| {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |y, _x| y)
    }

    /// Natural log; the caller must keep inputs strictly positive.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |_y, x| T::one() / x)
    }

    /// Square root; the caller must keep inputs strictly positive (add an
    /// epsilon before calling when zeros are possible).
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |y, _x| T::one() / (c::<T>(2.0) * y))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |_y, x| c::<T>(2.0) * x)
    }

    // ---------------------------------------------------------------------
    // Row/column broadcasting over 2-d arrays
    // ---------------------------------------------------------------------

    fn check_row_broadcast(&self, a: Var, b: Var, op: &str) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(
            sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0],
            "{op}: want [N,H] with [H], got {sa:?} and {sb:?}"
        );
    }

    /// `[N,H] + [H]` (bias add broadcast over rows).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.check_row_broadcast(a, b, "add_row");
        let bv = self.values[b.0]
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut value = as2(&self.values[a.0], "add_row").to_owned();
        for mut row in value.rows_mut() {
            row += &bv;
        }
        let value = value.into_dyn();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    if na {
                        sink.add(a.0, g.clone());
                    }
                    if nb {
                        let g2 = as2(g, "add_row.back");
                        sink.add(b.0, g2.sum_axis(Axis(0)).into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// `[N,H] * [H]` (per-column scaling broadcast over rows).
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.check_row_broadcast(a, b, "mul_row");
        let bv = self.values[b.0]
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut value = as2(&self.values[a.0], "mul_row").to_owned();
        for mut row in value.rows_mut() {
            row *= &bv;
        }
        let value = value.into_dyn();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "mul_row.back");
                    if na {
                        let bv = vals[b.0].view().into_dimensionality::<Ix1>().unwrap();
                        let mut da = g2.to_owned();
                        for mut row in da.rows_mut() {
                            row *= &bv;
                        }
                        sink.add(a.0, da.into_dyn());
                    }
                    if nb {
                        let a2 = as2(&vals[a.0], "mul_row.back");
                        sink.add(b.0, (&g2 * &a2).sum_axis(Axis(0)).into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Repeats a `[H]` vector into `[n, H]`.
    pub fn repeat_row(&mut self, v: Var, n: usize) -> Var {
        let sv = self.shape(v);
        assert!(sv.len() == 1, "repeat_row: want 1-d input, got {sv:?}");
        let h = sv[0];
        let row = self.values[v.0]
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let value = Array2::from_shape_fn((n, h), |(_, j)| row[j]).into_dyn();
        let needs = self.needs(v);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "repeat_row.back");
                    sink.add(v.0, g2.sum_axis(Axis(0)).into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    // ---------------------------------------------------------------------
    // Matrix products
    // ---------------------------------------------------------------------

    /// `[M,K] . [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (a2, b2) = (
            as2(&self.values[a.0], "matmul"),
            as2(&self.values[b.0], "matmul"),
        );
        assert_eq!(
            a2.ncols(),
            b2.nrows(),
            "matmul: inner dims differ: {:?} . {:?}",
            a2.shape(),
            b2.shape()
        );
        let value = a2.dot(&b2).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "matmul.back");
                    if na {
                        let b2 = as2(&vals[b.0], "matmul.back");
                        sink.add(a.0, g2.dot(&b2.t()).into_dyn());
                    }
                    if nb {
                        let a2 = as2(&vals[a.0], "matmul.back");
                        sink.add(b.0, a2.t().dot(&g2).into_dyn());
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// `[M,K] . [N,K]^T -> [M,N]` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (a2, b2) = (
            as2(&self.values[a.0], "matmul_nt"),
            as2(&self.values[b.0], "matmul_nt"),
        );
        assert_eq!(
            a2.ncols(),
            b2.ncols(),
            "matmul_nt: inner dims differ: {:?} . {:?}^T",
            a2.shape(),
            b2.shape()
        );
        let value = a2.dot(&b2.t()).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "matmul_nt.back");
                    if na {
                        let b2 = as2(&vals[b.0], "matmul_nt.back");
                        sink.add(a.0, g2.dot(&b2).into_dyn());
                    }
                    if nb {
                        let a2 = as2(&vals[a.0], "matmul_nt.back");
                        sink.add(
                            b.0,
                            g2.t().dot(&a2).as_standard_layout().to_owned().into_dyn(),
                        );
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    // ---------------------------------------------------------------------
    // Shape plumbing
    // ---------------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let total: usize = shape.iter().product();
        assert_eq!(
            self.values[a.0].len(),
            total,
            "reshape: cannot view {:?} as {shape:?}",
            self.shape(a)
        );
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        let value = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: standard layout");
        let needs = self.needs(a);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    sink.add(
                        a.0,
                        g.clone()
                            .into_shape_with_order(IxDyn(&old_shape))
                            .expect("reshape.back"),
                    );
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Materialized 2-d transpose.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let value = as2(&self.values[a.0], "transpose2")
            .t()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let needs = self.needs(a);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "transpose2.back");
                    sink.add(a.0, g2.t().as_standard_layout().to_owned().into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Concatenates 2-d blocks along rows (axis 0).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<ArrayView2<T>> = parts
            .iter()
            .map(|&p| as2(&self.values[p.0], "concat_rows"))
            .collect();
        let value = concatenate(Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>())
            .expect("concat_rows: column counts must match")
            .into_dyn();
        let needs = parts.iter().any(|&p| self.needs(p));
        let spans: Vec<(usize, usize, bool)> = {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let rows = self.shape(p)[0];
                    let s = (offset, rows, self.needs(p));
                    offset += rows;
                    s
                })
                .collect()
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "concat_rows.back");
                    for (idx, &(offset, rows, needed)) in spans.iter().enumerate() {
                        if needed {
                            let piece = g2
                                .slice(ndarray::s![offset..offset + rows, ..])
                                .to_owned()
                                .into_dyn();
                            sink.add(ids[idx], piece);
                        }
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Concatenates 2-d blocks along columns (axis 1).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<ArrayView2<T>> = parts
            .iter()
            .map(|&p| as2(&self.values[p.0], "concat_cols"))
            .collect();
        let value = concatenate(Axis(1), &views.iter().map(|v| v.view()).collect::<Vec<_>>())
            .expect("concat_cols: row counts must match")
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let needs = parts.iter().any(|&p| self.needs(p));
        let spans: Vec<(usize, usize, bool)> = {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let cols = self.shape(p)[1];
                    let s = (offset, cols, self.needs(p));
                    offset += cols;
                    s
                })
                .collect()
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "concat_cols.back");
                    for (idx, &(offset, cols, needed)) in spans.iter().enumerate() {
                        if needed {
                            let piece = g2
                                .slice(ndarray::s![.., offset..offset + cols])
                                .as_standard_layout()
                                .to_owned()
                                .into_dyn();
                            sink.add(ids[idx], piece);
                        }
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Copies rows `range` of a 2-d array.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let a2 = as2(&self.values[a.0], "slice_rows");
        assert!(
            start < end && end <= a2.nrows(),
            "slice_rows: bad range {start}..{end} for {} rows",
            a2.nrows()
        );
        let (rows, cols) = (a2.nrows(), a2.ncols());
        let value = a2.slice(ndarray::s![start..end, ..]).to_owned().into_dyn();
        let needs = self.needs(a);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "slice_rows.back");
                    let mut dx = Array2::<T>::zeros((rows, cols));
                    dx.slice_mut(ndarray::s![start..end, ..]).assign(&g2);
                    sink.add(a.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Copies columns `range` of a 2-d array.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let a2 = as2(&self.values[a.0], "slice_cols");
        assert!(
            start < end && end <= a2.ncols(),
            "slice_cols: bad range {start}..{end} for {} cols",
            a2.ncols()
        );
        let (rows, cols) = (a2.nrows(), a2.ncols());
        let value = a2
            .slice(ndarray::s![.., start..end])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let needs = self.needs(a);
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "slice_cols.back");
                    let mut dx = Array2::<T>::zeros((rows, cols));
                    dx.slice_mut(ndarray::s![.., start..end]).assign(&g2);
                    sink.add(a.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Gathers rows of a 2-d array by index (repeats allowed). Gradients
    /// scatter-add back into the source rows.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let a2 = as2(&self.values[a.0], "gather_rows");
        let rows = a2.nrows();
        assert!(
            indices.iter().all(|&i| i < rows),
            "gather_rows: index out of range ({} rows)",
            rows
        );
        let cols = a2.ncols();
        let mut value = Array2::<T>::zeros((indices.len(), cols));
        for (out_row, &src) in indices.iter().enumerate() {
            value.row_mut(out_row).assign(&a2.row(src));
        }
        let needs = self.needs(a);
        let idx = indices.clone();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g2 = as2(g, "gather_rows.back");
                    let mut dx = Array2::<T>::zeros((rows, cols));
                    for (out_row, &src) in idx.iter().enumerate() {
                        let mut dst = dx.row_mut(src);
                        dst += &g2.row(out_row);
                    }
                    sink.add(a.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value.into_dyn(), needs, back)
    }

    // ---------------------------------------------------------------------
    // Normalization and attention primitives
    // ---------------------------------------------------------------------

    /// Row-wise layer normalization without affine parameters:
    /// `(x - mean) / sqrt(var + eps)` per row.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = as2(&self.values[a.0], "layer_norm_rows");
        let (n, h) = (x.nrows(), x.ncols());
        assert!(h > 0, "layer_norm_rows: empty rows");
        let mut normalized = Array2::<T>::zeros((n, h));
        let mut inv_std = Array1::<T>::zeros(n);
        let hf = c::<T>(h as f64);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / hf;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= hf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            let mut out = normalized.row_mut(i);
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let needs = self.needs(a);
        let out_id = self.values.len();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let y = as2(&vals[out_id], "layer_norm_rows.back");
                    let g2 = as2(g, "layer_norm_rows.back");
                    let hf = c::<T>(y.ncols() as f64);
                    let mut dx = Array2::<T>::zeros((y.nrows(), y.ncols()));
                    for i in 0..y.nrows() {
                        let gy = g2.row(i);
                        let yi = y.row(i);
                        let mean_g = gy.sum() / hf;
                        let mut mean_gy = T::zero();
                        for (&gv, &yv) in gy.iter().zip(yi) {
                            mean_gy += gv * yv;
                        }
                        mean_gy /= hf;
                        let is = inv_std[i];
                        let mut out = dx.row_mut(i);
                        for ((o, &gv), &yv) in out.iter_mut().zip(gy).zip(yi) {
                            *o = is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    sink.add(a.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(normalized.into_dyn(), needs, back)
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(&self.values[a.0], "softmax_rows");
        let mut value = Array2::<T>::zeros((x.nrows(), x.ncols()));
        for i in 0..x.nrows() {
            let row = x.row(i);
            let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let mut out = value.row_mut(i);
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp() / denom;
            }
        }
        let needs = self.needs(a);
        let out_id = self.values.len();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let y = as2(&vals[out_id], "softmax_rows.back");
                    let g2 = as2(g, "softmax_rows.back");
                    let mut dx = Array2::<T>::zeros((y.nrows(), y.ncols()));
                    for i in 0..y.nrows() {
                        let yi = y.row(i);
                        let gi = g2.row(i);
                        let mut dot = T::zero();
                        for (&yv, &gv) in yi.iter().zip(gi) {
                            dot += yv * gv;
                        }
                        let mut out = dx.row_mut(i);
                        for ((o, &yv), &gv) in out.iter_mut().zip(yi).zip(gi) {
                            *o = yv * (gv - dot);
                        }
                    }
                    sink.add(a.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value.into_dyn(), needs, back)
    }

    // ---------------------------------------------------------------------
    // Reductions and losses
    // ---------------------------------------------------------------------

    /// Mean over all elements, yielding a 0-d node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        assert!(n > 0, "mean_all: empty input");
        let nf = c::<T>(n as f64);
        let mean = self.values[a.0].iter().copied().sum::<T>() / nf;
        let value = ArrayD::from_elem(IxDyn(&[]), mean);
        let needs = self.needs(a);
        let shape: Vec<usize> = self.shape(a).to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let gv = *g.iter().next().expect("scalar grad") / nf;
                    sink.add(a.0, ArrayD::from_elem(IxDyn(&shape), gv));
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Sum over all elements, yielding a 0-d node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let sum = self.values[a.0].iter().copied().sum::<T>();
        let value = ArrayD::from_elem(IxDyn(&[]), sum);
        let needs = self.needs(a);
        let shape: Vec<usize> = self.shape(a).to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let gv = *g.iter().next().expect("scalar grad");
                    sink.add(a.0, ArrayD::from_elem(IxDyn(&shape), gv));
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Sums same-shaped nodes (n-ary add).
    pub fn add_many(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_many: no inputs");
        for &p in parts {
            assert_eq!(
                self.shape(parts[0]),
                self.shape(p),
                "add_many: shapes differ"
            );
        }
        let mut value = self.values[parts[0].0].clone();
        for &p in &parts[1..] {
            value += &self.values[p.0];
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let entries: Vec<(usize, bool)> = parts.iter().map(|&p| (p.0, self.needs(p))).collect();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    for &(id, needed) in &entries {
                        if needed {
                            sink.add(id, g.clone());
                        }
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Mean over rows of a 2-d array: `[N,H] -> [H]`.
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let a2 = as2(&self.values[a.0], "mean_axis0");
        let n = a2.nrows();
        assert!(n > 0, "mean_axis0: empty input");
        let nf = c::<T>(n as f64);
        let value = (a2.sum_axis(Axis(0)) / nf).into_dyn();
        let needs = self.needs(a);
        let cols = a2.ncols();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dx = Array2::<T>::zeros((n, cols));
                    for mut row in dx.rows_mut() {
                        row.assign(&g1);
                    }
                    dx /= nf;
                    sink.add(a.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Mean absolute error between same-shaped nodes (0-d output).
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "l1_loss");
        let n = self.values[a.0].len();
        let nf = c::<T>(n as f64);
        let mut acc = T::zero();
        Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .for_each(|&x, &y| acc += (x - y).abs());
        let value = ArrayD::from_elem(IxDyn(&[]), acc / nf);
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let gv = *g.iter().next().expect("scalar grad") / nf;
                    let mut signs = vals[a.0].clone();
                    Zip::from(&mut signs).and(&vals[b.0]).for_each(|s, &y| {
                        let d = *s - y;
                        *s = if d > T::zero() {
                            gv
                        } else if d < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        };
                    });
                    if na {
                        sink.add(a.0, signs.clone());
                    }
                    if nb {
                        sink.add(b.0, signs.mapv(|x| -x));
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Mean squared error between same-shaped nodes (0-d output).
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mse_loss");
        let n = self.values[a.0].len();
        let nf = c::<T>(n as f64);
        let mut acc = T::zero();
        Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .for_each(|&x, &y| acc += (x - y) * (x - y));
        let value = ArrayD::from_elem(IxDyn(&[]), acc / nf);
        let needs = self.needs(a) || self.needs(b);
        let (na, nb) = (self.needs(a), self.needs(b));
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let gv = *g.iter().next().expect("scalar grad") * c::<T>(2.0) / nf;
                    let diff = &vals[a.0] - &vals[b.0];
                    if na {
                        sink.add(a.0, diff.mapv(|d| d * gv));
                    }
                    if nb {
                        sink.add(b.0, diff.mapv(|d| -d * gv));
                    }
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    /// Mean cross-entropy of row logits against integer class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = as2(&self.values[logits.0], "cross_entropy");
        let (n, classes) = (x.nrows(), x.ncols());
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        assert!(
            targets.iter().all(|&t| t < classes),
            "cross_entropy: target class out of range"
        );
        let mut probs = Array2::<T>::zeros((n, classes));
        let mut loss = T::zero();
        for i in 0..n {
            let row = x.row(i);
            let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln() + max;
            loss += log_denom - row[targets[i]];
            let mut p = probs.row_mut(i);
            for (o, &v) in p.iter_mut().zip(row) {
                *o = (v - max).exp() / denom;
            }
        }
        let nf = c::<T>(n as f64);
        let value = ArrayD::from_elem(IxDyn(&[]), loss / nf);
        let needs = self.needs(logits);
        let targets: Vec<usize> = targets.to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(
                move |_vals: &[ArrayD<T>], g: &ArrayD<T>, sink: &mut GradSink<T>| {
                    let gv = *g.iter().next().expect("scalar grad") / nf;
                    let mut dx = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dx[(i, t)] -= T::one();
                    }
                    dx *= gv;
                    sink.add(logits.0, dx.into_dyn());
                },
            ) as BackFn<T>
        });
        self.push(value, needs, back)
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Runs reverse-mode accumulation from a scalar (0-d or length-1) root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert!(
            self.values[root.0].len() == 1,
            "backward: root must be scalar, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.values.len());
        grads.resize_with(self.values.len(), || None);
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), T::one()));
        for i in (0..=root.0).rev() {
            if !self.metas[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.metas[i].backward {
                let mut sink = GradSink { grads: &mut grads };
                back(&self.values, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}
