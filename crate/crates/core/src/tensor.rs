//! Dense f64 tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] records every operation in creation order, so parent indices
//! always point backwards and a single reverse sweep computes all adjoints.
//! Trainable values live in a [`ParamStore`]; a graph only references them
//! through [`ParamId`]s and [`Graph::backward`] accumulates gradients back
//! into the store. The graph is consumed by `backward`.
//!
//! Broadcasting is limited to scalar-with-tensor. Anything wider (for
//! example adding a bias row to every sample) is done by explicit tiling,
//! typically `ones[N×1] · bias[1×out]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be a nonempty list of positive sizes, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Row-major `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) || shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn check_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::InvalidArgument(format!(
                "{op} expects a 2-d tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.check_2d("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_2d("matmul")?;
        let (k2, n) = other.check_2d("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out);
        Tensor::matrix(m, n, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// When a transpose flag is set the corresponding buffer is stored with the
/// transposed shape (`k×m` or `n×k`) in row-major order.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths match the dimensions and strides above, and
    // `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
}

/// Owner of trainable tensors and their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, value: Tensor) -> ParamId {
        self.params.push(Param { value, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Mutable value and shared gradient of one parameter.
    pub(crate) fn value_and_grad(&mut self, id: ParamId) -> (&mut Tensor, Option<&Tensor>) {
        let p = &mut self.params[id.0];
        (&mut p.value, p.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Overwrite all parameter values from a flat buffer laid out as by
    /// [`ParamStore::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ParamId, grad: Tensor) -> Result<()> {
        let p = self.params.get_mut(id.0).ok_or_else(|| {
            Error::InvalidArgument(format!("parameter {} is not in this store", id.0))
        })?;
        if p.value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: p.value.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(g) => g.add_assign(&grad),
            None => p.grad = Some(grad),
        }
        Ok(())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Sqrt,
    Softplus,
    AddScalar(f64),
    MulScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Sum(usize),
    Matmul(usize, usize),
    MatmulT(usize, usize),
    Transpose(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation tags accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Sqrt,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// A leaf bound to a trainable parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param(id), store.value(id).clone(), true)
    }

    /// Value of a parameter as a constant leaf (frozen for this graph).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseOp as E;
        match (op, b) {
            (E::Add, Some(b)) => self.add(a, b),
            (E::Sub, Some(b)) => self.sub(a, b),
            (E::Mul, Some(b)) => self.mul(a, b),
            (E::Add | E::Sub | E::Mul, None) => Err(Error::InvalidArgument(format!(
                "{op:?} needs two operands"
            ))),
            (_, Some(_)) => Err(Error::InvalidArgument(format!(
                "{op:?} takes a single operand"
            ))),
            (E::Neg, None) => Ok(self.neg(a)),
            (E::Exp, None) => Ok(self.exp(a)),
            (E::Log, None) => self.log(a),
            (E::Sigmoid, None) => Ok(self.sigmoid(a)),
            (E::Tanh, None) => Ok(self.tanh(a)),
            (E::Relu, None) => Ok(self.relu(a)),
            (E::Square, None) => Ok(self.square(a)),
            (E::Sqrt, None) => self.sqrt(a),
        }
    }

    fn unary(&mut self, op: Unary, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let value = match op {
            Unary::Neg => x.map(|v| -v),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => x.map(f64::ln),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Tanh => x.map(f64::tanh),
            Unary::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Square => x.map(|v| v * v),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Softplus => x.map(softplus),
            Unary::AddScalar(c) => x.map(|v| v + c),
            Unary::MulScalar(c) => x.map(|v| v * c),
            Unary::Clamp(lo, hi) => x.map(|v| v.clamp(lo, hi)),
        };
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Unary(op, a.0), value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v >= 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(Unary::Sqrt, a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::MulScalar(c), a)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = match op {
            Binary::Add => |p: f64, q: f64| p + q,
            Binary::Sub => |p: f64, q: f64| p - q,
            Binary::Mul => |p: f64, q: f64| p * q,
        };
        let value = if x.shape() == y.shape() {
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            }
        } else if y.is_scalar() {
            let q = y.data[0];
            x.map(|p| f(p, q))
        } else if x.is_scalar() {
            let p = x.data[0];
            y.map(|q| f(p, q))
        } else {
            return Err(Error::ShapeMismatch {
                op: match op {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                left: x.shape.clone(),
                right: y.shape.clone(),
            });
        };
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Binary(op, a.0, b.0), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sum(a.0), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Matmul(a.0, b.0), value, rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = x.check_2d("matmul_t")?;
        let (n, k2) = y.check_2d("matmul_t")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: x.shape.clone(),
                right: y.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &x.data, false, &y.data, true, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::MatmulT(a.0, b.0), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Transpose(a.0), value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Reshape(a.0), value, rg))
    }

    /// Propagate `∂loss/∂·` back through the tape and accumulate the
    /// gradients of every parameter leaf into `store`.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut nodes = self.nodes;
        nodes.truncate(loss.0 + 1);
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor {
            shape: nodes[loss.0].value.shape.clone(),
            data: vec![1.0],
        });

        for i in (0..nodes.len()).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            if !nodes[i].requires_grad {
                continue;
            }
            match nodes[i].op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate(id, dy)?,
                Op::Unary(op, a) => {
                    let x = &nodes[a].value;
                    let y = &nodes[i].value;
                    let dx = unary_backward(op, x, y, &dy);
                    push_grad(&mut grads, &nodes, a, dx);
                }
                Op::Binary(op, a, b) => {
                    let (x, y) = (&nodes[a].value, &nodes[b].value);
                    if nodes[a].requires_grad {
                        let da = match op {
                            Binary::Add | Binary::Sub => dy.clone(),
                            Binary::Mul => scaled_by(&dy, y),
                        };
                        push_grad(&mut grads, &nodes, a, reduce_to(da, x));
                    }
                    if nodes[b].requires_grad {
                        let db = match op {
                            Binary::Add => dy.clone(),
                            Binary::Sub => dy.map(|v| -v),
                            Binary::Mul => scaled_by(&dy, x),
                        };
                        push_grad(&mut grads, &nodes, b, reduce_to(db, y));
                    }
                }
                Op::Sum(a) => {
                    let g = dy.data[0];
                    let dx = Tensor::full(nodes[a].value.shape(), g);
                    push_grad(&mut grads, &nodes, a, dx);
                }
                Op::Matmul(a, b) => {
                    let (x, y) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (x.rows(), x.cols(), y.cols());
                    if nodes[a].requires_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &dy.data, false, &y.data, true, &mut da);
                        let da = Tensor {
                            shape: x.shape.clone(),
                            data: da,
                        };
                        push_grad(&mut grads, &nodes, a, da);
                    }
                    if nodes[b].requires_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &x.data, true, &dy.data, false, &mut db);
                        let db = Tensor {
                            shape: y.shape.clone(),
                            data: db,
                        };
                        push_grad(&mut grads, &nodes, b, db);
                    }
                }
                Op::MatmulT(a, b) => {
                    let (x, y) = (&nodes[a].value, &nodes[b].value);
                    let (m, k, n) = (x.rows(), x.cols(), y.rows());
                    if nodes[a].requires_grad {
                        // dA = dC · B
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &dy.data, false, &y.data, false, &mut da);
                        let da = Tensor {
                            shape: x.shape.clone(),
                            data: da,
                        };
                        push_grad(&mut grads, &nodes, a, da);
                    }
                    if nodes[b].requires_grad {
                        // dB = dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, &dy.data, true, &x.data, false, &mut db);
                        let db = Tensor {
                            shape: y.shape.clone(),
                            data: db,
                        };
                        push_grad(&mut grads, &nodes, b, db);
                    }
                }
                Op::Transpose(a) => {
                    let dx = dy.transpose()?;
                    push_grad(&mut grads, &nodes, a, dx);
                }
                Op::Reshape(a) => {
                    let shape = nodes[a].value.shape.clone();
                    push_grad(&mut grads, &nodes, a, dy.reshape(&shape)?);
                }
            }
        }
        Ok(())
    }
}

fn scaled_by(dy: &Tensor, other: &Tensor) -> Tensor {
    if other.is_scalar() {
        let c = other.data[0];
        dy.map(|v| v * c)
    } else {
        Tensor {
            shape: dy.shape.clone(),
            data: dy.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }
}

/// Sum a broadcast gradient back down when the operand was a scalar.
fn reduce_to(grad: Tensor, operand: &Tensor) -> Tensor {
    if operand.is_scalar() && !grad.is_scalar() {
        Tensor {
            shape: operand.shape.clone(),
            data: vec![grad.sum()],
        }
    } else {
        grad
    }
}

fn push_grad(grads: &mut [Option<Tensor>], nodes: &[Node], idx: usize, g: Tensor) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn unary_backward(op: Unary, x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
    let zip3 = |f: &dyn Fn(f64, f64, f64) -> f64| Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&y.data)
            .zip(&dy.data)
            .map(|((&xv, &yv), &g)| f(xv, yv, g))
            .collect(),
    };
    match op {
        Unary::Neg => dy.map(|g| -g),
        Unary::Exp => zip3(&|_, y, g| g * y),
        Unary::Log => zip3(&|x, _, g| g / x),
        Unary::Sigmoid => zip3(&|_, y, g| g * y * (1.0 - y)),
        Unary::Tanh => zip3(&|_, y, g| g * (1.0 - y * y)),
        Unary::Relu => zip3(&|x, _, g| if x > 0.0 { g } else { 0.0 }),
        Unary::Square => zip3(&|x, _, g| 2.0 * x * g),
        Unary::Sqrt => zip3(&|_, y, g| g / (2.0 * y)),
        Unary::Softplus => zip3(&|x, _, g| g * sigmoid(x)),
        Unary::AddScalar(_) => dy.clone(),
        Unary::MulScalar(c) => dy.map(|g| g * c),
        Unary::Clamp(lo, hi) => zip3(&|x, _, g| if x >= lo && x <= hi { g } else { 0.0 }),
    }
}

/// Compare analytic gradients against central differences.
///
/// `f` builds the scalar loss on a fresh graph from the current parameter
/// values. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`. Parameters that `f` never
/// touches count as having a zero analytic gradient.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.value(loss).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };

    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if !g.value(loss).item()?.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(loss, store)?;
    let analytic: Vec<Option<Tensor>> = store.ids().map(|id| store.grad(id).cloned()).collect();
    store.zero_grad();

    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[id.0].as_ref().map_or(0.0, |t| t.data()[j]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
