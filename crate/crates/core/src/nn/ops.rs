//! Differentiable primitives: elementwise arithmetic, reductions, matrix
//! products and a few structural ops.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{matmul_acc, matmul_tn_acc, transpose, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Raise to a constant power (the second operand is unused).
    Pow,
    Tanh,
    Sigmoid,
    Sin,
}

/// Dispatches one of the elementwise primitives. Binary ops take `b`;
/// `Pow` takes its exponent from `exponent`.
pub fn elementwise<'t, T: Real>(
    op: ElementwiseOp,
    a: Var<'t, T>,
    b: Option<Var<'t, T>>,
    exponent: T,
) -> Result<Var<'t, T>> {
    let need_b = || b.ok_or_else(|| Error::shape(format!("{op:?} needs a second operand")));
    match op {
        ElementwiseOp::Add => a.add(need_b()?),
        ElementwiseOp::Sub => a.sub(need_b()?),
        ElementwiseOp::Mul => a.mul(need_b()?),
        ElementwiseOp::Pow => Ok(a.powf(exponent)),
        ElementwiseOp::Tanh => Ok(a.tanh()),
        ElementwiseOp::Sigmoid => Ok(a.sigmoid()),
        ElementwiseOp::Sin => Ok(a.sin()),
    }
}

/// `b` broadcasts against `a` when its shape equals `a`'s or is a suffix of
/// it (leading-dimension expansion only).
fn broadcast_reps(a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(format!(
            "cannot broadcast {b:?} against {a:?}"
        )));
    }
    Ok(a[..a.len() - b.len()].iter().product())
}

fn reduce_reps<T: Real>(g: &Tensor<T>, shape: &[usize], reps: usize) -> Tensor<T> {
    if reps == 1 {
        return Tensor::new(shape, g.data().to_vec()).expect("same size");
    }
    let n = g.len() / reps;
    let mut out = vec![T::zero(); n];
    for chunk in g.data().chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape, out).expect("suffix shape")
}

fn unary<'t, T: Real>(
    x: Var<'t, T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let xv = x.value();
    let y = xv.map(f);
    let yv = Rc::new(y.clone());
    x.tape.op(
        y,
        &[x],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        }),
    )
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let reps = broadcast_reps(a.shape(), b.shape())?;
        let mut out = (*a).clone();
        let n = b.len();
        for chunk in out.data_mut().chunks_exact_mut(n.max(1)) {
            for (o, &v) in chunk.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        let b_shape = b.shape().to_vec();
        Ok(self.tape.op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| reduce_reps(g, &b_shape, reps)),
                ]
            }),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let neg = other.scale(-T::one());
        self.add(neg)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let reps = broadcast_reps(a.shape(), b.shape())?;
        let n = b.len().max(1);
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_exact_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(b.data()) {
                *o *= v;
            }
        }
        Ok(self.tape.op(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_exact_mut(n) {
                        for (o, &v) in chunk.iter_mut().zip(b.data()) {
                            *o *= v;
                        }
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let prod = g.zip_map(&a, |g, a| g * a);
                    reduce_reps(&prod, b.shape(), reps)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let y = self.value().map(|v| v * c);
        self.tape.op(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let y = self.value().map(|v| v + c);
        self.tape
            .op(y, &[self], Box::new(move |g, _| vec![Some(g.clone())]))
    }

    pub fn powf(self, p: T) -> Var<'t, T> {
        unary(self, |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn square(self) -> Var<'t, T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn tanh(self) -> Var<'t, T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn sin(self) -> Var<'t, T> {
        unary(self, |x| x.sin(), |x, _| x.cos())
    }

    pub fn abs(self) -> Var<'t, T> {
        unary(self, |x| x.abs(), |x, _| sign0(x))
    }

    /// Forward value unchanged; no gradient flows through.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::lit(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.tape.op(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).unwrap())]),
        ))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0) {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![T::zero(); m * n];
        matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.tape.op(
            Tensor::new(&[m, n], out)?,
            &[self, other],
            Box::new(move |g, needs| {
                // dA = G B^T, dB = A^T G
                let ga = needs[0].then(|| {
                    let bt = transpose(b.data(), k, n);
                    let mut ga = vec![T::zero(); m * k];
                    matmul_acc(g.data(), &bt, &mut ga, m, n, k);
                    Tensor::new(&[m, k], ga).unwrap()
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_tn_acc(a.data(), g.data(), &mut gb, m, k, n);
                    Tensor::new(&[k, n], gb).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map on the last axis of a `[rows, in]` input:
    /// `x W^T + b` with `W: [out, in]`, `b: [out]`.
    pub fn linear(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        if x.ndim() != 2 || wv.ndim() != 2 || x.dim(1) != wv.dim(1) || bv.shape() != [wv.dim(0)] {
            return Err(Error::shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                x.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (rows, nin, nout) = (x.dim(0), x.dim(1), wv.dim(0));
        let wt = transpose(wv.data(), nout, nin);
        let mut out = Vec::with_capacity(rows * nout);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        matmul_acc(x.data(), &wt, &mut out, rows, nin, nout);
        Ok(self.tape.op(
            Tensor::new(&[rows, nout], out)?,
            &[self, w, b],
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * nin];
                    matmul_acc(g.data(), wv.data(), &mut gx, rows, nout, nin);
                    Tensor::new(&[rows, nin], gx).unwrap()
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); nout * nin];
                    matmul_tn_acc(g.data(), x.data(), &mut gw, rows, nout, nin);
                    Tensor::new(&[nout, nin], gw).unwrap()
                });
                let gb = needs[2].then(|| reduce_reps(g, &[nout], rows));
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Mean squared error against `target`, with gradient flowing to `self`
    /// only.
    pub fn mse_to(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse: {:?} vs {:?}",
                x.shape(),
                target.shape()
            )));
        }
        let n = T::lit(x.len().max(1) as f64);
        let diff = x.zip_map(target, |a, b| a - b);
        let loss = diff.sq_norm() / n;
        Ok(self.tape.op(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, _| {
                let c = g.item() * T::lit(2.0) / n;
                vec![Some(diff.map(|d| d * c))]
            }),
        ))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn sign0<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Sum of scalar nodes.
pub fn sum_scalars<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let mut it = parts.iter().copied();
    let first = it.next().ok_or_else(|| Error::shape("sum of zero terms"))?;
    it.try_fold(first, |acc, v| acc.add(v))
}

/// Axis permutation of a 3-D array: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute3_raw<T: Real>(
    x: &[T],
    shape: [usize; 3],
    perm: [usize; 3],
) -> (Vec<T>, [usize; 3]) {
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let in_strides = [shape[1] * shape[2], shape[2], 1];
    let s = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
    ];
    let mut out = Vec::with_capacity(x.len());
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * s[0] + j * s[1];
            out.extend((0..out_shape[2]).map(|k| x[base + k * s[2]]));
        }
    }
    (out, out_shape)
}

impl<'t, T: Real> Var<'t, T> {
    /// Reorders the axes of a 3-D node.
    pub fn permute3(self, perm: [usize; 3]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.ndim() != 3 {
            return Err(Error::shape(format!("permute3 on {:?}", x.shape())));
        }
        let mut sorted = perm;
        sorted.sort_unstable();
        if sorted != [0, 1, 2] {
            return Err(Error::shape(format!("{perm:?} is not a permutation")));
        }
        let shape = [x.dim(0), x.dim(1), x.dim(2)];
        let (data, out_shape) = permute3_raw(x.data(), shape, perm);
        let mut inv = [0; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.tape.op(
            Tensor::new(&out_shape, data)?,
            &[self],
            Box::new(move |g, _| {
                let (d, s) = permute3_raw(g.data(), out_shape, inv);
                vec![Some(Tensor::new(&s, d).unwrap())]
            }),
        ))
    }
}
