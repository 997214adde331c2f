//! Dense tensors and a small reverse-mode tape.
//!
//! The network half of the model (attention and offset MLP) is recorded on a
//! [`Graph`]; the rasterizer supplies hand-derived vector-Jacobian products and
//! hands its upstream gradient back to the tape through
//! [`Graph::backward_seeded`].

use std::fmt;
use std::sync::atomic::{AtomicU8, Ordering};

use crate::error::{Error, Result};

/// Global numeric mode.
///
/// Storage is always 64-bit. `Verification` additionally validates that every
/// recorded operation produces finite output and is required by the gradient
/// checker; `Fast` skips those scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Verification,
    Fast,
}

static PRECISION: AtomicU8 = AtomicU8::new(0);

pub fn set_precision(p: Precision) {
    PRECISION.store(
        match p {
            Precision::Verification => 0,
            Precision::Fast => 1,
        },
        Ordering::SeqCst,
    );
}

pub fn precision() -> Precision {
    match PRECISION.load(Ordering::SeqCst) {
        0 => Precision::Verification,
        _ => Precision::Fast,
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape_len(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                shape_len(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape_len(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape_len(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[m, n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape_len(shape) != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Trans {
    No,
    Yes,
}

/// `C = op(A) · op(B)` through `matrixmultiply`, with transposition expressed
/// as strides so no copies are made.
fn gemm(a: &Tensor, ta: Trans, b: &Tensor, tb: Trans) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k, rsa, csa) = match ta {
        Trans::No => (ar, ac, ac as isize, 1isize),
        Trans::Yes => (ac, ar, 1isize, ac as isize),
    };
    let (k2, n, rsb, csb) = match tb {
        Trans::No => (br, bc, bc as isize, 1isize),
        Trans::Yes => (bc, br, 1isize, bc as isize),
    };
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions disagree, {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the pointers cover m*k, k*n and m*n elements with the given
        // strides, all of which were derived from the tensors' own shapes.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(&[m, n], c)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Trans::No, b, Trans::No)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Trans::No, b, Trans::Yes)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Trans::Yes, b, Trans::No)
}

fn axis_strides(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    if n == 0 {
        return Err(Error::Dimension(format!(
            "softmax over empty axis {axis} of shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_strides(&x.shape, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(out[idx(j)]);
            }
            for j in 0..n {
                out[idx(j)] = (out[idx(j)] - max).exp();
            }
            // summing in sorted order makes the normalizer independent of
            // input order, so permuted inputs give exactly permuted outputs
            let mut terms: Vec<f64> = (0..n).map(|j| out[idx(j)]).collect();
            terms.sort_by(f64::total_cmp);
            let total: f64 = terms.iter().sum();
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

fn softmax_vjp(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_strides(&y.shape, axis)?;
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: f64 = (0..n).map(|j| y.data[idx(j)] * g.data[idx(j)]).sum();
            for j in 0..n {
                out[idx(j)] = y.data[idx(j)] * (g.data[idx(j)] - dot);
            }
        }
    }
    Tensor::new(&y.shape, out)
}

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of parameters. Order is part of the checkpoint format.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Softmax(Var, usize),
    Transpose(Var),
    RepeatRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations. Values are kept so `backward` can be called
/// any number of times; each call accumulates into the parameter store.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if precision() == Precision::Verification && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {op:?}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, name)?;
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(&x.shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |p, q| p + q)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |p, q| p - q)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |p, q| p * q)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = softmax(self.value(a), axis)?;
        self.push(v, Op::Softmax(a, axis))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a))
    }

    /// Stacks `n` copies of a `1×k` row into an `n×k` matrix.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, k) = x.dims2()?;
        if r != 1 {
            return Err(Error::Dimension(format!(
                "repeat_rows expects a single row, got {:?}",
                x.shape
            )));
        }
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend_from_slice(&x.data);
        }
        let v = Tensor::new(&[n, k], data)?;
        self.push(v, Op::RepeatRows(a, n))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.value(p).dims2()?.0,
            None => return Err(Error::Dimension("concat of zero tensors".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::Dimension(format!("concat_cols: row counts {m} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(&[m, total], data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2()?;
        if start > end || end > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} out of range for {:?}",
                x.shape
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x.data[i * n + start..i * n + end]);
        }
        let v = Tensor::new(&[m, w], data)?;
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Backpropagates from a scalar loss, accumulating into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let value = self.value(loss);
        if !value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape
            )));
        }
        self.backward_seeded(loss, Tensor::full(&value.shape.clone(), 1.0), store)
    }

    /// Backpropagates an externally computed upstream gradient for `out`.
    pub fn backward_seeded(&self, out: Var, seed: Tensor, store: &mut ParamStore) -> Result<()> {
        let grads = self.propagate(out, seed)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                let p = store.get_mut(*id);
                same_shape(&p.grad, &g, "parameter gradient")?;
                p.grad.add_assign(&g);
            }
        }
        Ok(())
    }

    /// Gradient of `out` (seeded with `seed`) with respect to an arbitrary node.
    pub fn gradient_of(&self, out: Var, seed: Tensor, wrt: Var) -> Result<Tensor> {
        let mut grads = self.propagate(out, seed)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(wrt).shape())))
    }

    fn propagate(&self, out: Var, seed: Tensor) -> Result<Vec<Option<Tensor>>> {
        same_shape(self.value(out), &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b))?;
                    let gb = matmul_tn(self.value(*a), &g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = Tensor::new(&g.shape, g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect())?;
                    let gb = Tensor::new(&g.shape, g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect())?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = Tensor::new(
                        &g.shape,
                        g.data
                            .iter()
                            .zip(&x.data)
                            .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                            .collect(),
                    )?;
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let ga = Tensor::new(&g.shape, g.data.iter().zip(&x.data).map(|(d, v)| 2.0 * v * d).collect())?;
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(*a).shape(), g.data[0]);
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a, axis) => {
                    let ga = softmax_vjp(&node.value, &g, *axis)?;
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()?),
                Op::RepeatRows(a, n) => {
                    let k = g.shape[1];
                    let mut ga = vec![0.0; k];
                    for i in 0..*n {
                        for (s, d) in ga.iter_mut().zip(&g.data[i * k..(i + 1) * k]) {
                            *s += d;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(&[1, k], ga)?);
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = g.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape[1];
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, Tensor::new(&[m, w], gp)?);
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (m, n) = self.value(*a).dims2()?;
                    let w = end - start;
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        ga[i * n + start..i * n + end].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                    }
                    acc(&mut grads, *a, Tensor::new(&[m, n], ga)?);
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let b = t(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let c = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = t(&[&[1.0, -2.0, 0.5], &[3.0, 0.25, -1.0]]);
        let b = t(&[&[2.0, 1.0, -1.0], &[0.0, 4.0, 2.0]]);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &b.transpose().unwrap()).unwrap());
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&a.transpose().unwrap(), &b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(&[3], vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new(&[1], vec![5.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[1.0]);

        // log-domain oracle: p_i = exp(x_i - logsumexp(x))
        let x = [1000.0, 1000.1];
        let m = 1000.1f64;
        let lse = m + ((x[0] - m).exp() + (x[1] - m).exp()).ln();
        let s = softmax(&Tensor::new(&[2], x.to_vec()).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.sum() - 1.0).abs() < 1e-12);
        for (p, xi) in s.data().iter().zip(x) {
            assert!((p - (xi - lse).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_axis_is_a_dimension_error() {
        let err = softmax(&Tensor::zeros(&[2, 0]), 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[&[1.0, 2.0], &[3.0, -1.0]]);
        let s = softmax(&x, 0).unwrap();
        for j in 0..2 {
            assert!((s.at2(0, j) + s.at2(1, j) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new();
        let v = g.param(&store, p).unwrap();
        let sq = g.square(v).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[2.0, 4.0, 6.0]);

        // a second pass accumulates
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[4.0, 8.0, 12.0]);

        store.zero_grad();
        assert!(store.get(p).grad.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let _ = g.param(&store, p).unwrap();
        let c = g.constant(Tensor::scalar(4.0)).unwrap();
        g.backward(c, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new();
        let v = g.param(&store, p).unwrap();
        let err = g.backward(v, &mut store).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn non_finite_outputs_are_errors_in_verification_mode() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1], vec![f64::MAX]).unwrap()).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn repeat_rows_requires_single_row() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(g.repeat_rows(a, 4).is_err());
    }
}
