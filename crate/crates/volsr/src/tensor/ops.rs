//! Elementwise, reduction, shape, and matmul operations with their vjps.
//!
//! Cotangents are built from the same public operations, so a reverse pass
//! run with `create_graph` records a differentiable graph of its own.

use super::{lit, no_grad, Element, Op, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

fn right_aligned_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    // strides in element units, 0 on broadcast dims, padded on the left
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1usize; rank];
    for d in 0..rank {
        let av = if d >= rank - a.len() { a[d - (rank - a.len())] } else { 1 };
        let bv = if d >= rank - b.len() { b[d - (rank - b.len())] } else { 1 };
        if av == bv || av == 1 || bv == 1 {
            out[d] = av.max(bv);
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        }
    }
    Ok(out)
}

fn is_reducible_to(src: &[usize], target: &[usize]) -> bool {
    if target.len() > src.len() {
        return false;
    }
    let offset = src.len() - target.len();
    target
        .iter()
        .enumerate()
        .all(|(d, &t)| t == src[offset + d] || t == 1)
}

fn binary_map<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E + Sync + Send,
) -> Result<(Vec<E>, Vec<usize>)> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    if a.shape() == b.shape() {
        let mut out = vec![E::zero(); n];
        if n >= PAR_THRESHOLD {
            out.par_iter_mut()
                .zip(ad.par_iter().zip(bd.par_iter()))
                .for_each(|(o, (&x, &y))| *o = f(x, y));
        } else {
            for i in 0..n {
                out[i] = f(ad[i], bd[i]);
            }
        }
        return Ok((out, out_shape));
    }
    let rank = out_shape.len();
    let astr = right_aligned_strides(a.shape(), rank);
    let bstr = right_aligned_strides(b.shape(), rank);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(ad[ao], bd[bo]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += astr[d];
            bo += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= astr[d] * out_shape[d];
            bo -= bstr[d] * out_shape[d];
        }
    }
    Ok((out, out_shape))
}

fn unary_map<E: Element>(x: &Tensor<E>, f: impl Fn(E) -> E + Sync + Send) -> Vec<E> {
    let xd = x.data();
    let n = xd.len();
    if n >= PAR_THRESHOLD {
        xd.par_iter().map(|&v| f(v)).collect()
    } else {
        xd.iter().map(|&v| f(v)).collect()
    }
}

fn sum_to_kernel<E: Element>(x: &Tensor<E>, target: &[usize]) -> Vec<E> {
    let src_shape = x.shape();
    let rank = src_shape.len();
    let tstr = right_aligned_strides(target, rank);
    let n: usize = src_shape.iter().product();
    let out_n: usize = target.iter().product();
    let mut out = vec![E::zero(); out_n];
    let xd = x.data();
    let mut idx = vec![0usize; rank];
    let mut to = 0usize;
    for i in 0..n {
        out[to] += xd[i];
        for d in (0..rank).rev() {
            idx[d] += 1;
            to += tstr[d];
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
            to -= tstr[d] * src_shape[d];
        }
    }
    out
}

fn broadcast_to_kernel<E: Element>(x: &Tensor<E>, target: &[usize]) -> Vec<E> {
    let rank = target.len();
    let xstr = right_aligned_strides(x.shape(), rank);
    let n: usize = target.iter().product();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut xo = 0usize;
    for _ in 0..n {
        out.push(xd[xo]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            xo += xstr[d];
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
            xo -= xstr[d] * target[d];
        }
    }
    out
}

fn reduce_like<E: Element>(g: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if g.shape() == shape {
        Ok(g.clone())
    } else {
        g.sum_to(shape)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinOp<E: Element> {
    kind: BinKind,
    a: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Element> Op<E> for BinOp<E> {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn vjp(&self, out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let (da, db) = match self.kind {
            BinKind::Add => (g.clone(), g.clone()),
            BinKind::Sub => (g.clone(), g.neg()),
            BinKind::Mul => (g.mul(&self.b)?, g.mul(&self.a)?),
            BinKind::Div => {
                // d(a/b)/da = 1/b, d(a/b)/db = -out/b
                let da = g.div(&self.b)?;
                let db = g.mul(out)?.div(&self.b)?.neg();
                (da, db)
            }
        };
        Ok(vec![
            Some(reduce_like(&da, self.a.shape())?),
            Some(reduce_like(&db, self.b.shape())?),
        ])
    }
}

#[derive(Clone, Copy)]
enum UnKind {
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Sqrt,
    Abs,
    Elu,
    LeakyRelu(f64),
    ClampMin(f64),
}

struct UnOp<E: Element> {
    kind: UnKind,
    x: Tensor<E>,
}

impl<E: Element> UnOp<E> {
    /// Piecewise-constant local derivative, built as a plain constant.
    fn factor(&self) -> Tensor<E> {
        let data = no_grad(|| {
            let xd = self.x.data();
            match self.kind {
                UnKind::Abs => xd
                    .iter()
                    .map(|&v| {
                        if v > E::zero() {
                            E::one()
                        } else if v < E::zero() {
                            -E::one()
                        } else {
                            E::zero()
                        }
                    })
                    .collect::<Vec<E>>(),
                UnKind::Elu => xd
                    .iter()
                    .map(|&v| if v > E::zero() { E::one() } else { v.exp() })
                    .collect(),
                UnKind::LeakyRelu(s) => {
                    let s = lit::<E>(s);
                    xd.iter()
                        .map(|&v| if v >= E::zero() { E::one() } else { s })
                        .collect()
                }
                UnKind::ClampMin(c) => {
                    let c = lit::<E>(c);
                    xd.iter()
                        .map(|&v| if v >= c { E::one() } else { E::zero() })
                        .collect()
                }
                _ => unreachable!("factor() on smooth op"),
            }
        });
        Tensor::from_vec(data, self.x.shape()).unwrap()
    }
}

impl<E: Element> Op<E> for UnOp<E> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnKind::Neg => "neg",
            UnKind::Scale(_) => "scale",
            UnKind::AddScalar => "add_scalar",
            UnKind::Exp => "exp",
            UnKind::Sqrt => "sqrt",
            UnKind::Abs => "abs",
            UnKind::Elu => "elu",
            UnKind::LeakyRelu(_) => "leaky_relu",
            UnKind::ClampMin(_) => "clamp_min",
        }
    }

    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }

    fn vjp(&self, out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let dx = match self.kind {
            UnKind::Neg => g.neg(),
            UnKind::Scale(c) => g.scale(c),
            UnKind::AddScalar => g.clone(),
            UnKind::Exp => g.mul(out)?,
            // guard the derivative at zero; sqrt'(0) is unbounded
            UnKind::Sqrt => g.div(&out.clamp_min(1e-12).scale(2.0))?,
            UnKind::Abs | UnKind::Elu | UnKind::LeakyRelu(_) | UnKind::ClampMin(_) => {
                g.mul(&self.factor())?
            }
        };
        Ok(vec![Some(dx)])
    }
}

struct SumToOp<E: Element> {
    x: Tensor<E>,
}

impl<E: Element> Op<E> for SumToOp<E> {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(g.broadcast_to(self.x.shape())?)])
    }
}

struct BroadcastToOp<E: Element> {
    x: Tensor<E>,
}

impl<E: Element> Op<E> for BroadcastToOp<E> {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(g.sum_to(self.x.shape())?)])
    }
}

struct ReshapeOp<E: Element> {
    x: Tensor<E>,
}

impl<E: Element> Op<E> for ReshapeOp<E> {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(g.reshape(self.x.shape())?)])
    }
}

struct ConcatOp<E: Element> {
    xs: Vec<Tensor<E>>,
}

impl<E: Element> Op<E> for ConcatOp<E> {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        self.xs.clone()
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let mut start = 0usize;
        let mut grads = Vec::with_capacity(self.xs.len());
        for x in &self.xs {
            let c = x.shape()[1];
            grads.push(Some(g.slice_channels(start, c)?));
            start += c;
        }
        Ok(grads)
    }
}

struct SliceChOp<E: Element> {
    x: Tensor<E>,
    start: usize,
}

impl<E: Element> Op<E> for SliceChOp<E> {
    fn name(&self) -> &'static str {
        "slice_channels"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(g.embed_channels(self.x.shape(), self.start)?)])
    }
}

struct EmbedChOp<E: Element> {
    x: Tensor<E>,
    start: usize,
}

impl<E: Element> Op<E> for EmbedChOp<E> {
    fn name(&self) -> &'static str {
        "embed_channels"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(g.slice_channels(self.start, self.x.shape()[1])?)])
    }
}

struct MatmulOp<E: Element> {
    a: Tensor<E>,
    b: Tensor<E>,
    ta: bool,
    tb: bool,
}

impl<E: Element> Op<E> for MatmulOp<E> {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        // C = A' B' with A' = ta ? A^T : A. Standard transpose algebra:
        let da = if self.ta {
            self.b.matmul(g, self.tb, true)?
        } else {
            g.matmul(&self.b, false, !self.tb)?
        };
        let db = if self.tb {
            g.matmul(&self.a, true, self.ta)?
        } else {
            self.a.matmul(g, !self.ta, false)?
        };
        Ok(vec![Some(da), Some(db)])
    }
}

fn transpose_copy<E: Element>(data: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

impl<E: Element> Tensor<E> {
    fn binary(&self, other: &Tensor<E>, kind: BinKind) -> Result<Tensor<E>> {
        let f = move |x: E, y: E| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (data, shape) = binary_map(self, other, f)?;
        let record = self.needs_grad() || other.needs_grad();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, shape, record, move || {
            Box::new(BinOp { kind, a, b })
        }))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Div)
    }

    fn unary(&self, kind: UnKind, f: impl Fn(E) -> E + Sync + Send) -> Tensor<E> {
        let data = unary_map(self, f);
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), self.needs_grad(), move || {
            Box::new(UnOp { kind, x })
        })
    }

    pub fn neg(&self) -> Tensor<E> {
        self.unary(UnKind::Neg, |v| -v)
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let cv = lit::<E>(c);
        self.unary(UnKind::Scale(c), move |v| v * cv)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        let cv = lit::<E>(c);
        self.unary(UnKind::AddScalar, move |v| v + cv)
    }

    pub fn exp(&self) -> Tensor<E> {
        self.unary(UnKind::Exp, |v| v.exp())
    }

    pub fn sqrt(&self) -> Tensor<E> {
        self.unary(UnKind::Sqrt, |v| v.sqrt())
    }

    pub fn abs(&self) -> Tensor<E> {
        self.unary(UnKind::Abs, |v| v.abs())
    }

    /// x if x > 0 else exp(x) - 1.
    pub fn elu(&self) -> Tensor<E> {
        self.unary(UnKind::Elu, |v| {
            if v > E::zero() {
                v
            } else {
                v.exp() - E::one()
            }
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<E> {
        let s = lit::<E>(slope);
        self.unary(UnKind::LeakyRelu(slope), move |v| {
            if v >= E::zero() {
                v
            } else {
                v * s
            }
        })
    }

    pub fn clamp_min(&self, c: f64) -> Tensor<E> {
        let cv = lit::<E>(c);
        self.unary(UnKind::ClampMin(c), move |v| if v < cv { cv } else { v })
    }

    /// Sums down to a broadcast-compatible target shape.
    pub fn sum_to(&self, target: &[usize]) -> Result<Tensor<E>> {
        if !is_reducible_to(self.shape(), target) {
            return Err(Error::shape(format!(
                "cannot reduce {:?} to {:?}",
                self.shape(),
                target
            )));
        }
        let data = sum_to_kernel(self, target);
        let x = self.clone();
        Ok(Tensor::from_op(
            data,
            target.to_vec(),
            self.needs_grad(),
            move || Box::new(SumToOp { x }),
        ))
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<E>> {
        if !is_reducible_to(target, self.shape()) {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape(),
                target
            )));
        }
        let data = broadcast_to_kernel(self, target);
        let x = self.clone();
        Ok(Tensor::from_op(
            data,
            target.to_vec(),
            self.needs_grad(),
            move || Box::new(BroadcastToOp { x }),
        ))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        self.sum_to(&[1]).expect("sum_to scalar always valid")
    }

    pub fn mean_all(&self) -> Tensor<E> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let data = self.to_vec();
        let x = self.clone();
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            self.needs_grad(),
            move || Box::new(ReshapeOp { x }),
        ))
    }

    /// Concatenates along the channel axis (dim 1).
    pub fn concat_channels(xs: &[Tensor<E>]) -> Result<Tensor<E>> {
        if xs.is_empty() {
            return Err(Error::shape("concat of zero tensors".to_string()));
        }
        let first = &xs[0];
        let rank = first.shape().len();
        if rank < 2 {
            return Err(Error::shape("concat_channels needs rank >= 2".to_string()));
        }
        let outer = first.shape()[0];
        let inner: usize = first.shape()[2..].iter().product();
        let mut channels = 0usize;
        for x in xs {
            if x.shape().len() != rank
                || x.shape()[0] != outer
                || x.shape()[2..] != first.shape()[2..]
            {
                return Err(Error::shape(format!(
                    "concat_channels mismatch: {:?} vs {:?}",
                    first.shape(),
                    x.shape()
                )));
            }
            channels += x.shape()[1];
        }
        let mut shape = first.shape().to_vec();
        shape[1] = channels;
        let mut data = Vec::with_capacity(outer * channels * inner);
        let guards: Vec<_> = xs.iter().map(|x| x.data()).collect();
        for o in 0..outer {
            for (x, d) in xs.iter().zip(&guards) {
                let c = x.shape()[1];
                let from = o * c * inner;
                data.extend_from_slice(&d[from..from + c * inner]);
            }
        }
        drop(guards);
        let record = xs.iter().any(|x| x.needs_grad());
        let xs = xs.to_vec();
        Ok(Tensor::from_op(data, shape, record, move || {
            Box::new(ConcatOp { xs })
        }))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(Error::shape(format!(
                "slice_channels {}..{} out of {:?}",
                start,
                start + len,
                shape
            )));
        }
        let outer = shape[0];
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[1] = len;
        let d = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * c + start) * inner;
            data.extend_from_slice(&d[from..from + len * inner]);
        }
        drop(d);
        let x = self.clone();
        Ok(Tensor::from_op(data, out_shape, self.needs_grad(), move || {
            Box::new(SliceChOp { x, start })
        }))
    }

    /// Writes this tensor into a zero tensor of `target` shape at channel
    /// offset `start`; adjoint of `slice_channels`.
    pub fn embed_channels(&self, target: &[usize], start: usize) -> Result<Tensor<E>> {
        let shape = self.shape();
        if target.len() != shape.len()
            || target[0] != shape[0]
            || target[2..] != shape[2..]
            || start + shape[1] > target[1]
        {
            return Err(Error::shape(format!(
                "embed_channels {:?} at {} into {:?}",
                shape, start, target
            )));
        }
        let outer = shape[0];
        let len = shape[1];
        let c = target[1];
        let inner: usize = shape[2..].iter().product();
        let d = self.data();
        let mut data = vec![E::zero(); target.iter().product()];
        for o in 0..outer {
            let to = (o * c + start) * inner;
            let from = o * len * inner;
            data[to..to + len * inner].copy_from_slice(&d[from..from + len * inner]);
        }
        drop(d);
        let x = self.clone();
        Ok(Tensor::from_op(data, target.to_vec(), self.needs_grad(), move || {
            Box::new(EmbedChOp { x, start })
        }))
    }

    /// 2-d matrix product with optional operand transposes.
    pub fn matmul(&self, other: &Tensor<E>, ta: bool, tb: bool) -> Result<Tensor<E>> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (ar, ac) = (self.shape()[0], self.shape()[1]);
        let (br, bc) = (other.shape()[0], other.shape()[1]);
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner dims: {:?}{} x {:?}{}",
                self.shape(),
                if ta { "^T" } else { "" },
                other.shape(),
                if tb { "^T" } else { "" }
            )));
        }
        let k = ka;
        let a_eff: Vec<E>;
        let b_eff: Vec<E>;
        {
            let ad = self.data();
            let bd = other.data();
            a_eff = if ta { transpose_copy(&ad, ar, ac) } else { ad.clone() };
            b_eff = if tb { transpose_copy(&bd, br, bc) } else { bd.clone() };
        }
        let mut out = vec![E::zero(); m * n];
        let do_row = |i: usize, row: &mut [E]| {
            for kk in 0..k {
                let av = a_eff[i * k + kk];
                let brow = &b_eff[kk * n..kk * n + n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        };
        if m * n * k >= PAR_THRESHOLD {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| do_row(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                do_row(i, row);
            }
        }
        let record = self.needs_grad() || other.needs_grad();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(out, vec![m, n], record, move || {
            Box::new(MatmulOp { a, b, ta, tb })
        }))
    }
}
