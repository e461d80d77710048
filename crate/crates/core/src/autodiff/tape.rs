use std::hash::{Hash, Hasher};
use std::sync::{Arc, OnceLock};

use rustc_hash::FxHasher;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const NO_NEIGHBOR: u32 = u32::MAX;

/// Neighbor table of a (sparse or dense) convolution: for every output row
/// and kernel tap, the input row feeding it or [`NO_NEIGHBOR`].
///
/// Every tap must map distinct outputs to distinct inputs, which holds for
/// all the stride-1, stride-2 and subdivision convolutions used here. The
/// transposed table used by the backward pass relies on it.
#[derive(Debug)]
pub struct Rulebook {
    n_in: usize,
    n_out: usize,
    taps: usize,
    nbr: Vec<u32>,
    transposed: OnceLock<Box<Rulebook>>,
}

impl Rulebook {
    pub fn new(n_in: usize, n_out: usize, taps: usize, nbr: Vec<u32>) -> Result<Self> {
        if nbr.len() != n_out * taps {
            return Err(Error::Shape(format!(
                "rulebook table of length {} for {} outputs x {} taps",
                nbr.len(),
                n_out,
                taps
            )));
        }
        if let Some(bad) = nbr.iter().find(|&&i| i != NO_NEIGHBOR && i as usize >= n_in) {
            return Err(Error::InvalidInput(format!("rulebook input index {bad} >= {n_in}")));
        }
        Ok(Rulebook { n_in, n_out, taps, nbr, transposed: OnceLock::new() })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    #[inline]
    pub fn neighbor(&self, out: usize, tap: usize) -> Option<usize> {
        let i = self.nbr[out * self.taps + tap];
        (i != NO_NEIGHBOR).then_some(i as usize)
    }

    /// Number of (output, tap) pairs with an input.
    pub fn pair_count(&self) -> usize {
        self.nbr.iter().filter(|&&i| i != NO_NEIGHBOR).count()
    }

    fn transposed(&self) -> &Rulebook {
        self.transposed.get_or_init(|| {
            let mut t = vec![NO_NEIGHBOR; self.n_in * self.taps];
            for q in 0..self.n_out {
                for k in 0..self.taps {
                    let p = self.nbr[q * self.taps + k];
                    if p != NO_NEIGHBOR {
                        let slot = &mut t[p as usize * self.taps + k];
                        assert_eq!(*slot, NO_NEIGHBOR, "rulebook tap {k} is not injective");
                        *slot = q as u32;
                    }
                }
            }
            Box::new(Rulebook {
                n_in: self.n_out,
                n_out: self.n_in,
                taps: self.taps,
                nbr: t,
                transposed: OnceLock::new(),
            })
        })
    }
}

const CONV_CHUNK: usize = 64;

/// `out[q] = sum_k x[nbr(q,k)] * w_k` where `w` stacks the per-tap
/// `cin x cout` blocks vertically.
fn conv_forward(x: &[f64], cin: usize, w: &[f64], cout: usize, rb: &Rulebook, out: &mut [f64]) {
    let taps = rb.taps;
    let kdim = taps * cin;
    let mut col = vec![0.0; CONV_CHUNK * kdim];
    let mut start = 0;
    while start < rb.n_out {
        let rows = CONV_CHUNK.min(rb.n_out - start);
        let mut any = false;
        for r in 0..rows {
            let q = start + r;
            let dst = &mut col[r * kdim..(r + 1) * kdim];
            for k in 0..taps {
                let seg = &mut dst[k * cin..(k + 1) * cin];
                match rb.neighbor(q, k) {
                    Some(p) => {
                        seg.copy_from_slice(&x[p * cin..(p + 1) * cin]);
                        any = true;
                    }
                    None => seg.iter_mut().for_each(|v| *v = 0.0),
                }
            }
        }
        let dst = &mut out[start * cout..(start + rows) * cout];
        if any {
            gemm(rows, kdim, cout, &col[..rows * kdim], false, w, false, 0.0, dst);
        } else {
            dst.iter_mut().for_each(|v| *v = 0.0);
        }
        start += rows;
    }
}

/// Accumulates `dw += sum_q col(q)^T dy[q]`.
fn conv_weight_grad(x: &[f64], cin: usize, dy: &[f64], cout: usize, rb: &Rulebook, dw: &mut [f64]) {
    let taps = rb.taps;
    let kdim = taps * cin;
    let mut col = vec![0.0; CONV_CHUNK * kdim];
    let mut start = 0;
    while start < rb.n_out {
        let rows = CONV_CHUNK.min(rb.n_out - start);
        for r in 0..rows {
            let q = start + r;
            let dst = &mut col[r * kdim..(r + 1) * kdim];
            for k in 0..taps {
                let seg = &mut dst[k * cin..(k + 1) * cin];
                match rb.neighbor(q, k) {
                    Some(p) => seg.copy_from_slice(&x[p * cin..(p + 1) * cin]),
                    None => seg.iter_mut().for_each(|v| *v = 0.0),
                }
            }
        }
        gemm(
            kdim,
            rows,
            cout,
            &col[..rows * kdim],
            true,
            &dy[start * cout..(start + rows) * cout],
            false,
            1.0,
            dw,
        );
        start += rows;
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug, Default)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    pub fn new(cols: usize) -> Self {
        Csr { rows: 0, cols, indptr: vec![0], indices: Vec::new(), values: Vec::new() }
    }

    /// Appends one row given as `(column, weight)` pairs.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (c, w) in entries {
            debug_assert!(c < self.cols);
            self.indices.push(c as u32);
            self.values.push(w);
        }
        self.indptr.push(self.indices.len());
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[a..b].iter().zip(&self.values[a..b]).map(|(&c, &w)| (c as usize, w))
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Arc<Vec<u32>>),
    ScatterAdd(Var, Arc<Vec<u32>>),
    SpMM(Arc<Csr>, Var),
    SegmentCumsumExclusive(Var, Arc<Vec<usize>>),
    Conv(Var, Var, Arc<Rulebook>),
    SelectRows(Arc<Vec<bool>>, Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so parents
/// always precede children and a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: operands {}x{} and {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf holding the current value of a stored parameter; its gradient
    /// is routed back to the store by [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = super::tensor::matmul(av, bv)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    /// `a[n,m] + b[1,m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.clone();
        let m = av.cols();
        if m > 0 {
            for row in out.data_mut().chunks_mut(m) {
                for (x, y) in row.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// `a[n,m] * b[n,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.cols() != 1 || bv.rows() != av.rows() {
            return Err(shape_err("mul_col", av, bv));
        }
        let mut out = av.clone();
        let m = av.cols();
        if m > 0 {
            for (row, s) in out.data_mut().chunks_mut(m).zip(bv.data()) {
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        Ok(self.push(out, Op::MulCol(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        Ok(self.push(t, Op::Mean(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::Empty("concat of zero operands".into())),
        };
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), v));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let c = v.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[off..off + c].copy_from_slice(v.row_slice(r));
            }
            off += c;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start > end || end > v.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} of {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        let mut out = Tensor::zeros(v.rows(), end - start);
        for r in 0..v.rows() {
            out.row_slice_mut(r).copy_from_slice(&v.row_slice(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Rows of `a` picked by `index`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<u32>>) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= v.rows()) {
            return Err(Error::Shape(format!("gather index {bad} into {} rows", v.rows())));
        }
        let c = v.cols();
        let mut out = Tensor::zeros(index.len(), c);
        for (r, &i) in index.iter().enumerate() {
            out.row_slice_mut(r).copy_from_slice(v.row_slice(i as usize));
        }
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// Row `i` of `a` is added into output row `index[i]`.
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<Vec<u32>>, out_rows: usize) -> Result<Var> {
        let v = self.value(a);
        if index.len() != v.rows() {
            return Err(Error::Shape(format!(
                "scatter index of length {} for {} rows",
                index.len(),
                v.rows()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= out_rows) {
            return Err(Error::Shape(format!("scatter index {bad} into {out_rows} rows")));
        }
        let c = v.cols();
        let mut out = Tensor::zeros(out_rows, c);
        for (r, &i) in index.iter().enumerate() {
            for (d, s) in out.row_slice_mut(i as usize).iter_mut().zip(v.row_slice(r)) {
                *d += s;
            }
        }
        Ok(self.push(out, Op::ScatterAdd(a, index)))
    }

    /// Constant sparse matrix times `a`.
    pub fn spmm(&mut self, s: Arc<Csr>, a: Var) -> Result<Var> {
        let v = self.value(a);
        if s.cols() != v.rows() {
            return Err(Error::Shape(format!(
                "spmm: sparse {}x{} times {}x{}",
                s.rows(),
                s.cols(),
                v.rows(),
                v.cols()
            )));
        }
        let c = v.cols();
        let mut out = Tensor::zeros(s.rows(), c);
        for r in 0..s.rows() {
            let dst = out.row_slice_mut(r);
            for (col, w) in s.row(r) {
                for (d, x) in dst.iter_mut().zip(v.row_slice(col)) {
                    *d += w * x;
                }
            }
        }
        Ok(self.push(out, Op::SpMM(s, a)))
    }

    /// Exclusive running sum of a column vector within contiguous segments;
    /// segment `s` spans rows `offsets[s]..offsets[s+1]`.
    pub fn segment_cumsum_exclusive(&mut self, a: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let v = self.value(a);
        if v.cols() != 1 || offsets.last().copied().unwrap_or(0) != v.rows() {
            return Err(Error::Shape(format!(
                "segment cumsum over {}x{} with {} segment offsets",
                v.rows(),
                v.cols(),
                offsets.len()
            )));
        }
        let mut out = Tensor::zeros(v.rows(), 1);
        for w in offsets.windows(2) {
            let mut acc = 0.0;
            for i in w[0]..w[1] {
                out.data_mut()[i] = acc;
                acc += v.data()[i];
            }
        }
        Ok(self.push(out, Op::SegmentCumsumExclusive(a, offsets)))
    }

    /// Convolution driven by a rulebook: `x` is `n_in x cin`, `w` is
    /// `(taps*cin) x cout`, result is `n_out x cout`.
    pub fn conv(&mut self, x: Var, w: Var, rb: Arc<Rulebook>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let cin = xv.cols();
        if xv.rows() != rb.n_in || wv.rows() != rb.taps * cin {
            return Err(Error::Shape(format!(
                "conv: input {}x{} and weights {}x{} for a rulebook with {} inputs and {} taps",
                xv.rows(),
                xv.cols(),
                wv.rows(),
                wv.cols(),
                rb.n_in,
                rb.taps
            )));
        }
        let cout = wv.cols();
        let mut out = Tensor::zeros(rb.n_out, cout);
        conv_forward(xv.data(), cin, wv.data(), cout, &rb, out.data_mut());
        Ok(self.push(out, Op::Conv(x, w, rb)))
    }

    /// Row `r` comes from `a` where `take_a[r]`, from `b` otherwise.
    pub fn select_rows(&mut self, take_a: Arc<Vec<bool>>, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || take_a.len() != av.rows() {
            return Err(shape_err("select_rows", av, bv));
        }
        let mut out = bv.clone();
        for (r, &t) in take_a.iter().enumerate() {
            if t {
                out.row_slice_mut(r).copy_from_slice(av.row_slice(r));
            }
        }
        Ok(self.push(out, Op::SelectRows(take_a, a, b)))
    }

    /// Fingerprint of the graph structure and of the branch taken by every
    /// non-smooth primitive. Two evaluations with equal signatures lie in the
    /// same differentiable piece, so central differences between them are
    /// meaningful.
    pub fn kink_signature(&self) -> u64 {
        let mut h = FxHasher::default();
        for node in &self.nodes {
            node.value.shape().hash(&mut h);
            std::mem::discriminant(&node.op).hash(&mut h);
            let input = match node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) => Some((a, None)),
                Op::Clamp(a, lo, hi) => Some((a, Some((lo, hi)))),
                _ => None,
            };
            if let Some((a, bounds)) = input {
                for &x in self.nodes[a.0].value.data() {
                    let code: u8 = match bounds {
                        None => (x > 0.0) as u8,
                        Some((lo, hi)) => (x < lo) as u8 | ((x > hi) as u8) << 1,
                    };
                    code.hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter gradient into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }
        fn acc_with(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize), f: impl FnOnce(&mut Tensor)) {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            f(slot);
        }
        let elementwise = |a: Var, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            // f(input, output) -> local derivative
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * f(xi, yi))
                .collect();
            Tensor::from_vec(x.rows(), x.cols(), data).expect("shape")
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc_with(grads, *a, av.shape(), |t| {
                    gemm(m, n, k, g.data(), false, bv.data(), true, 1.0, t.data_mut())
                });
                acc_with(grads, *b, bv.shape(), |t| {
                    gemm(k, m, n, av.data(), true, g.data(), false, 1.0, t.data_mut())
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(grads, *a, Tensor::from_vec(av.rows(), av.cols(), ga).unwrap());
                acc(grads, *b, Tensor::from_vec(bv.rows(), bv.cols(), gb).unwrap());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x / y).collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(x, (p, q))| -x * p / (q * q))
                    .collect();
                acc(grads, *a, Tensor::from_vec(av.rows(), av.cols(), ga).unwrap());
                acc(grads, *b, Tensor::from_vec(bv.rows(), bv.cols(), gb).unwrap());
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                let m = g.cols();
                acc_with(grads, *b, (1, m), |t| {
                    if m > 0 {
                        for row in g.data().chunks(m) {
                            for (d, s) in t.data_mut().iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = av.cols();
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(bv.rows(), 1);
                if m > 0 {
                    for (r, row) in ga.data_mut().chunks_mut(m).enumerate() {
                        let s = bv.data()[r];
                        let mut dot = 0.0;
                        for (gi, xi) in row.iter_mut().zip(av.row_slice(r)) {
                            dot += *gi * xi;
                            *gi *= s;
                        }
                        gb.data_mut()[r] = dot;
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let t = elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, t)
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let t = elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { s });
                acc(grads, *a, t)
            }
            Op::Sigmoid(a) => {
                let t = elementwise(*a, &|_, y| y * (1.0 - y));
                acc(grads, *a, t)
            }
            Op::Softplus(a) => {
                let t = elementwise(*a, &|x, _| sigmoid(x));
                acc(grads, *a, t)
            }
            Op::Exp(a) => {
                let t = elementwise(*a, &|_, y| y);
                acc(grads, *a, t)
            }
            Op::Log(a) => {
                let t = elementwise(*a, &|x, _| 1.0 / x);
                acc(grads, *a, t)
            }
            Op::Square(a) => {
                let t = elementwise(*a, &|x, _| 2.0 * x);
                acc(grads, *a, t)
            }
            Op::Abs(a) => {
                let t = elementwise(*a, &|x, _| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, t)
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let t = elementwise(*a, &|x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                acc(grads, *a, t)
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item()))
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64))
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut t = Tensor::zeros(r, c);
                    for row in 0..r {
                        t.row_slice_mut(row).copy_from_slice(&g.row_slice(row)[off..off + c]);
                    }
                    acc(grads, p, t);
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = val(*a).shape();
                let c = g.cols();
                acc_with(grads, *a, shape, |t| {
                    for row in 0..shape.0 {
                        let dst = &mut t.row_slice_mut(row)[*start..*start + c];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(row)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Gather(a, index) => {
                let shape = val(*a).shape();
                acc_with(grads, *a, shape, |t| {
                    for (r, &i) in index.iter().enumerate() {
                        for (d, s) in t.row_slice_mut(i as usize).iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::ScatterAdd(a, index) => {
                let (r, c) = val(*a).shape();
                let mut t = Tensor::zeros(r, c);
                for (row, &i) in index.iter().enumerate() {
                    t.row_slice_mut(row).copy_from_slice(g.row_slice(i as usize));
                }
                acc(grads, *a, t);
            }
            Op::SpMM(s, a) => {
                let shape = val(*a).shape();
                acc_with(grads, *a, shape, |t| {
                    for r in 0..s.rows() {
                        let gr = g.row_slice(r);
                        for (col, w) in s.row(r) {
                            for (d, x) in t.row_slice_mut(col).iter_mut().zip(gr) {
                                *d += w * x;
                            }
                        }
                    }
                });
            }
            Op::SegmentCumsumExclusive(a, offsets) => {
                let mut t = Tensor::zeros(g.rows(), 1);
                for w in offsets.windows(2) {
                    let mut acc_g = 0.0;
                    for i in (w[0]..w[1]).rev() {
                        t.data_mut()[i] = acc_g;
                        acc_g += g.data()[i];
                    }
                }
                acc(grads, *a, t);
            }
            Op::Conv(x, w, rb) => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, cout, taps) = (xv.cols(), wv.cols(), rb.taps);
                // dx = conv(dy, w^T per tap, transposed rulebook)
                let mut wt = vec![0.0; taps * cout * cin];
                for k in 0..taps {
                    for ci in 0..cin {
                        for co in 0..cout {
                            wt[(k * cout + co) * cin + ci] = wv.data()[(k * cin + ci) * cout + co];
                        }
                    }
                }
                let rbt = rb.transposed();
                let mut dx = Tensor::zeros(xv.rows(), cin);
                conv_forward(g.data(), cout, &wt, cin, rbt, dx.data_mut());
                acc(grads, *x, dx);
                acc_with(grads, *w, wv.shape(), |t| {
                    conv_weight_grad(xv.data(), cin, g.data(), cout, rb, t.data_mut())
                });
            }
            Op::SelectRows(take_a, a, b) => {
                let (r, c) = g.shape();
                let mut ga = Tensor::zeros(r, c);
                let mut gb = Tensor::zeros(r, c);
                for (row, &t) in take_a.iter().enumerate() {
                    let dst = if t { &mut ga } else { &mut gb };
                    dst.row_slice_mut(row).copy_from_slice(g.row_slice(row));
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
        }
    }
}
