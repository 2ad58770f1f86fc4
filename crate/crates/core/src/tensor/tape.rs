use std::borrow::Cow;
use std::sync::atomic::{AtomicU32, Ordering};

use super::{check_shape, Real, Tensor, TensorError, L2_NORM_EPS, SIGNED_SQRT_EPS};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Deliberately wrong backward rules, used to prove the gradient checker
/// actually catches broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    NegateTanh,
    NegateSigmoid,
    NegateMatVec,
}

impl std::str::FromStr for BackwardFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Self::NegateTanh),
            "sigmoid" => Ok(Self::NegateSigmoid),
            "matvec" => Ok(Self::NegateMatVec),
            other => Err(format!("unknown fault {other:?} (tanh|sigmoid|matvec)")),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        n: usize,
        p: usize,
    },
    MatVec {
        w: usize,
        x: usize,
        m: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        mat: usize,
        row: usize,
        cols: usize,
    },
    MulRow {
        mat: usize,
        row: usize,
        cols: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Softmax {
        a: usize,
        cols: usize,
    },
    Concat(Vec<usize>),
    SumPool {
        a: usize,
        window: usize,
    },
    SignedSqrt(usize),
    L2Normalize {
        a: usize,
        cols: usize,
    },
    SelectRow {
        table: usize,
        row: usize,
        cols: usize,
    },
    Sum(usize),
    Scale(usize, f64),
    Pick {
        a: usize,
        index: usize,
    },
    LnClamped {
        a: usize,
        floor: f64,
    },
}

struct Node<'a, F: Clone> {
    value: Cow<'a, [F]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Leaves created with [`Tape::leaf`] borrow their values, so parameters are
/// never copied onto the tape.
pub struct Tape<'a, F: Real> {
    id: u32,
    nodes: Vec<Node<'a, F>>,
    consumed: bool,
    fault: Option<BackwardFault>,
}

impl<'a, F: Real> Default for Tape<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

type Broadcast<F> = (Vec<F>, Vec<usize>, usize, usize, usize);

impl<'a, F: Real> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    /// Installs a broken backward rule. Only meaningful for verification tooling.
    pub fn with_fault(mut self, fault: Option<BackwardFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf without copying its values.
    pub fn leaf(&mut self, t: &'a Tensor<F>) -> Var {
        self.push_node(Cow::Borrowed(t.values()), t.shape().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Owned leaf that does not receive gradients.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<F>) -> Result<Var, TensorError> {
        check_shape(&shape, values.len())?;
        Ok(self.push_node(Cow::Owned(values), shape, Op::Leaf, false))
    }

    /// Owned leaf that receives gradients.
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<F>) -> Result<Var, TensorError> {
        check_shape(&shape, values.len())?;
        Ok(self.push_node(Cow::Owned(values), shape, Op::Leaf, true))
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push_node(Cow::Owned(vec![F::zero(); n]), vec![n], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index()].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let node = &self.nodes[v.index()];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("tape node shape")
    }

    fn push_node(&mut self, value: Cow<'a, [F]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index())
    }

    fn record(
        &mut self,
        name: &'static str,
        value: Vec<F>,
        shape: Vec<usize>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var, TensorError> {
        if value.iter().any(|x| !x.finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_node(Cow::Owned(value), shape, op, requires_grad))
    }

    fn rows_cols(&self, i: usize) -> (usize, usize) {
        let shape = &self.nodes[i].shape;
        let cols = *shape.last().unwrap();
        (self.nodes[i].value.len() / cols, cols)
    }

    fn matrix_dims(&self, op: &'static str, i: usize) -> Result<(usize, usize), TensorError> {
        match self.nodes[i].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                left: self.nodes[i].shape.clone(),
                right: vec![],
            }),
        }
    }

    /// `[m×n] · [n×p] -> [m×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, n) = self.matrix_dims("matmul", ai)?;
        let (n2, p) = self.matrix_dims("matmul", bi)?;
        if n != n2 {
            return Err(self.mismatch("matmul", ai, bi));
        }
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let mut out = vec![F::zero(); m * p];
        for i in 0..m {
            for j in 0..n {
                let aij = av[i * n + j];
                let brow = &bv[j * p..(j + 1) * p];
                for (o, &b) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                    *o += aij * b;
                }
            }
        }
        self.record("matmul", out, vec![m, p], Op::MatMul { a: ai, b: bi, m, n, p }, &[ai, bi])
    }

    /// `[m×n] · [n] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, TensorError> {
        let (wi, xi) = (self.check(w)?, self.check(x)?);
        let (m, n) = self.matrix_dims("matvec", wi)?;
        if self.nodes[xi].shape != [n] {
            return Err(self.mismatch("matvec", wi, xi));
        }
        let (wv, xv) = (&self.nodes[wi].value, &self.nodes[xi].value);
        let out = (0..m).map(|i| dot(&wv[i * n..(i + 1) * n], xv)).collect();
        self.record("matvec", out, vec![m], Op::MatVec { w: wi, x: xi, m, n }, &[wi, xi])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let (rows, cols) = self.matrix_dims("transpose", ai)?;
        let av = &self.nodes[ai].value;
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = av[r * cols + c];
            }
        }
        self.record("transpose", out, vec![cols, rows], Op::Transpose { a: ai, rows, cols }, &[ai])
    }

    fn ewise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(self.mismatch(name, ai, bi));
        }
        let out = self.nodes[ai]
            .value
            .iter()
            .zip(self.nodes[bi].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ai].shape.clone();
        self.record(name, out, shape, op(ai, bi), &[ai, bi])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ewise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ewise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ewise("hadamard", a, b, |x, y| x * y, Op::Mul)
    }

    /// Output values and shape, then the matrix index, row index and width.
    fn row_broadcast(
        &mut self,
        name: &'static str,
        mat: Var,
        row: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Broadcast<F>, TensorError> {
        let (mi, ri) = (self.check(mat)?, self.check(row)?);
        let (_, cols) = self.matrix_dims(name, mi)?;
        if self.nodes[ri].shape != [cols] {
            return Err(self.mismatch(name, mi, ri));
        }
        let rv = &self.nodes[ri].value;
        let out = self.nodes[mi]
            .value
            .chunks(cols)
            .flat_map(|r| r.iter().zip(rv.iter()).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((out, self.nodes[mi].shape.clone(), mi, ri, cols))
    }

    /// Adds `row` to every row of `mat`.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var, TensorError> {
        let (out, shape, mi, ri, cols) = self.row_broadcast("add_row", mat, row, |x, y| x + y)?;
        self.record("add_row", out, shape, Op::AddRow { mat: mi, row: ri, cols }, &[mi, ri])
    }

    /// Hadamard product of every row of `mat` with `row`.
    pub fn mul_row(&mut self, mat: Var, row: Var) -> Result<Var, TensorError> {
        let (out, shape, mi, ri, cols) = self.row_broadcast("mul_row", mat, row, |x, y| x * y)?;
        self.record("mul_row", out, shape, Op::MulRow { mat: mi, row: ri, cols }, &[mi, ri])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(F) -> F, op: Op) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let out = self.nodes[ai].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ai].shape.clone();
        self.record(name, out, shape, op, &[ai])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        self.unary("tanh", a, F::tanh, Op::Tanh(ai))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(ai))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let (_, cols) = self.rows_cols(ai);
        let mut out = Vec::with_capacity(self.nodes[ai].value.len());
        for row in self.nodes[ai].value.chunks(cols) {
            softmax_into(row, &mut out);
        }
        let shape = self.nodes[ai].shape.clone();
        self.record("softmax", out, shape, Op::Softmax { a: ai, cols }, &[ai])
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let mut idx = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for &p in parts {
            let pi = self.check(p)?;
            if self.nodes[pi].shape.len() != 1 {
                return Err(self.mismatch("concat", pi, pi));
            }
            out.extend_from_slice(&self.nodes[pi].value);
            idx.push(pi);
        }
        let n = out.len();
        let inputs = idx.clone();
        self.record("concat", out, vec![n], Op::Concat(idx), &inputs)
    }

    /// Sums consecutive windows of the last axis.
    pub fn sum_pool(&mut self, a: Var, window: usize) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let (_, cols) = self.rows_cols(ai);
        if window == 0 || cols % window != 0 {
            return Err(TensorError::NotDivisible {
                op: "sum_pool",
                len: cols,
                window,
            });
        }
        let out = self.nodes[ai]
            .value
            .chunks(window)
            .map(|w| F::total(w.iter().copied()))
            .collect();
        let mut shape = self.nodes[ai].shape.clone();
        *shape.last_mut().unwrap() = cols / window;
        self.record("sum_pool", out, shape, Op::SumPool { a: ai, window }, &[ai])
    }

    /// `sign(x)·sqrt(|x|)` elementwise.
    pub fn signed_sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        self.unary("signed_sqrt", a, signed_sqrt, Op::SignedSqrt(ai))
    }

    /// L2-normalizes each row of the last axis. Rows with norm below
    /// [`L2_NORM_EPS`] pass through unchanged.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let (_, cols) = self.rows_cols(ai);
        let eps = F::lit(L2_NORM_EPS);
        let mut out = Vec::with_capacity(self.nodes[ai].value.len());
        for row in self.nodes[ai].value.chunks(cols) {
            let norm = dot(row, row).sqrt();
            if norm < eps {
                out.extend_from_slice(row);
            } else {
                out.extend(row.iter().map(|&x| x / norm));
            }
        }
        let shape = self.nodes[ai].shape.clone();
        self.record("l2_normalize", out, shape, Op::L2Normalize { a: ai, cols }, &[ai])
    }

    /// Row `row` of a 2-D table. Used for embedding lookups.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var, TensorError> {
        let ti = self.check(table)?;
        let (rows, cols) = self.matrix_dims("select_row", ti)?;
        if row >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "select_row",
                index: row,
                size: rows,
            });
        }
        let out = self.nodes[ti].value[row * cols..(row + 1) * cols].to_vec();
        self.record("select_row", out, vec![cols], Op::SelectRow { table: ti, row, cols }, &[ti])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let s = F::total(self.nodes[ai].value.iter().copied());
        self.record("sum", vec![s], vec![1], Op::Sum(ai), &[ai])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let k = F::lit(c);
        self.unary("scale", a, move |x| x * k, Op::Scale(ai, c))
    }

    /// Element `index` of the flattened tensor, as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let size = self.nodes[ai].value.len();
        if index >= size {
            return Err(TensorError::IndexOutOfRange { op: "pick", index, size });
        }
        let v = self.nodes[ai].value[index];
        self.record("pick", vec![v], vec![1], Op::Pick { a: ai, index }, &[ai])
    }

    /// `ln(max(x, floor))` elementwise; zero derivative where clamped.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let ai = self.check(a)?;
        let fl = F::lit(floor);
        self.unary("ln", a, move |x| x.larger(fl).ln(), Op::LnClamped { a: ai, floor })
    }

    fn mismatch(&self, op: &'static str, a: usize, b: usize) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.nodes[a].shape.clone(),
            right: self.nodes[b].shape.clone(),
        }
    }

    /// Reverse sweep from a scalar loss. A tape supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let li = self.check(loss)?;
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![F::one()]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        Ok(Gradients {
            tape: self.id,
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.filter(|_| matches!(self.nodes[i].op, Op::Leaf)))
                .collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [F])| {
            if wants(j) {
                let buf = grads[j].get_or_insert_with(|| vec![F::zero(); nodes[j].value.len()]);
                f(buf);
            }
        };
        match nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, n, p } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += dot(&g[r * p..(r + 1) * p], &bv[c * p..(c + 1) * p]);
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..m {
                        for c in 0..n {
                            let a_rc = av[r * n + c];
                            for (d, &gg) in db[c * p..(c + 1) * p].iter_mut().zip(&g[r * p..(r + 1) * p]) {
                                *d += a_rc * gg;
                            }
                        }
                    }
                });
            }
            Op::MatVec { w, x, m, n } => {
                let sign = if self.fault == Some(BackwardFault::NegateMatVec) {
                    -F::one()
                } else {
                    F::one()
                };
                let (wv, xv) = (&nodes[w].value, &nodes[x].value);
                acc(w, &mut |dw| {
                    for r in 0..m {
                        let gr = g[r] * sign;
                        for (d, &xx) in dw[r * n..(r + 1) * n].iter_mut().zip(xv.iter()) {
                            *d += gr * xx;
                        }
                    }
                });
                acc(x, &mut |dx| {
                    for r in 0..m {
                        let gr = g[r] * sign;
                        for (d, &ww) in dx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                            *d += gr * ww;
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => acc(a, &mut |da| {
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &gg)| *d -= gg));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bv.iter()) {
                        *d += gg * y;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(av.iter()) {
                        *d += gg * x;
                    }
                });
            }
            Op::AddRow { mat, row, cols } => {
                acc(mat, &mut |dm| add_into(dm, g));
                acc(row, &mut |dr| {
                    for gr in g.chunks(cols) {
                        add_into(dr, gr);
                    }
                });
            }
            Op::MulRow { mat, row, cols } => {
                let (mv, rv) = (&nodes[mat].value, &nodes[row].value);
                acc(mat, &mut |dm| {
                    for (dmr, gr) in dm.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, &gg), &y) in dmr.iter_mut().zip(gr).zip(rv.iter()) {
                            *d += gg * y;
                        }
                    }
                });
                acc(row, &mut |dr| {
                    for (mr, gr) in mv.chunks(cols).zip(g.chunks(cols)) {
                        for ((d, &gg), &x) in dr.iter_mut().zip(gr).zip(mr) {
                            *d += gg * x;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let sign = if self.fault == Some(BackwardFault::NegateTanh) {
                    -F::one()
                } else {
                    F::one()
                };
                acc(a, &mut |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(out.iter()) {
                        *d += sign * gg * (F::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let sign = if self.fault == Some(BackwardFault::NegateSigmoid) {
                    -F::one()
                } else {
                    F::one()
                };
                acc(a, &mut |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(out.iter()) {
                        *d += sign * gg * y * (F::one() - y);
                    }
                });
            }
            Op::Softmax { a, cols } => acc(a, &mut |da| {
                for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let gy = dot(gr, yr);
                    for ((d, &gg), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gg - gy);
                    }
                }
            }),
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SumPool { a, window } => acc(a, &mut |da| {
                for (dw, &gg) in da.chunks_mut(window).zip(g) {
                    dw.iter_mut().for_each(|d| *d += gg);
                }
            }),
            Op::SignedSqrt(a) => {
                let eps = F::lit(SIGNED_SQRT_EPS);
                let two = F::lit(2.0);
                acc(a, &mut |da| {
                    for ((d, &gg), &x) in da.iter_mut().zip(g).zip(nodes[a].value.iter()) {
                        *d += gg / (two * x.abs().sqrt() + eps);
                    }
                });
            }
            Op::L2Normalize { a, cols } => {
                let eps = F::lit(L2_NORM_EPS);
                acc(a, &mut |da| {
                    let rows = nodes[a].value.chunks(cols).zip(out.chunks(cols)).zip(g.chunks(cols));
                    for (dr, ((xr, yr), gr)) in da.chunks_mut(cols).zip(rows) {
                        let norm = dot(xr, xr).sqrt();
                        if norm < eps {
                            add_into(dr, gr);
                        } else {
                            let gy = dot(gr, yr);
                            for ((d, &gg), &y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += (gg - y * gy) / norm;
                            }
                        }
                    }
                });
            }
            Op::SelectRow { table, row, cols } => acc(table, &mut |dt| add_into(&mut dt[row * cols..(row + 1) * cols], g)),
            Op::Sum(a) => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Scale(a, c) => {
                let k = F::lit(c);
                acc(a, &mut |da| {
                    for (d, &gg) in da.iter_mut().zip(g) {
                        *d += gg * k;
                    }
                });
            }
            Op::Pick { a, index } => acc(a, &mut |da| da[index] += g[0]),
            Op::LnClamped { a, floor } => {
                let fl = F::lit(floor);
                acc(a, &mut |da| {
                    for ((d, &gg), &x) in da.iter_mut().zip(g).zip(nodes[a].value.iter()) {
                        if x > fl {
                            *d += gg / x;
                        }
                    }
                });
            }
        }
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    tape: u32,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<F>) {
        if !t.requires_grad {
            return;
        }
        let len = t.len();
        let buf = t.grad.get_or_insert_with(|| vec![F::zero(); len]);
        if let Some(g) = self.get(v) {
            add_into(buf, g);
        }
    }
}

pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub(crate) fn signed_sqrt<F: Real>(x: F) -> F {
    if x < F::zero() {
        -(-x).sqrt()
    } else {
        x.sqrt()
    }
}

pub(crate) fn softmax_into<F: Real>(row: &[F], out: &mut Vec<F>) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::larger);
    let start = out.len();
    out.extend(row.iter().map(|&x| (x - max).exp()));
    let total = F::total(out[start..].iter().copied());
    out[start..].iter_mut().for_each(|e| *e = *e / total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(tape: &mut Tape<'_, f64>, xs: &[f64]) -> Var {
        tape.variable(vec![xs.len()], xs.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_forced_case() {
        let mut t = Tape::<f64>::new();
        let id = t.constant(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let m = t.constant(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let p = t.matmul(id, m).unwrap();
        assert_eq!(t.value(p), &[1., 2., 3., 4.]);
        let a = t.constant(vec![1, 2], vec![1., 2.]).unwrap();
        let b = t.constant(vec![2, 1], vec![3., 4.]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.]);
        assert_eq!(t.shape(c), &[1, 1]);
        assert!(matches!(t.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn ewise_examples() {
        let mut t = Tape::<f64>::new();
        let a = v(&mut t, &[1., 2., 3.]);
        let z = v(&mut t, &[0., 0., 0.]);
        let h = t.mul(a, z).unwrap();
        assert_eq!(t.value(h), &[0., 0., 0.]);
        let x = v(&mut t, &[1., 2.]);
        let y = v(&mut t, &[3., 4.]);
        let s = t.add(x, y).unwrap();
        assert_eq!(t.value(s), &[4., 6.]);
        assert!(t.add(a, x).is_err());
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::<f64>::new();
        let z = v(&mut t, &[0.0]);
        let th = t.tanh(z).unwrap();
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.value(th), &[0.0]);
        assert_eq!(t.value(sg), &[0.5]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        for c in [-7.0, 0.0, 3.5, 1e3] {
            let x = v(&mut t, &[c, c, c]);
            let s = t.softmax(x).unwrap();
            for &p in t.value(s) {
                assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
            }
        }
        let x = v(&mut t, &[1., 2., 3.]);
        let s = t.softmax(x).unwrap();
        for (p, want) in t.value(s).iter().zip([0.090031, 0.244728, 0.665241]) {
            assert_abs_diff_eq!(*p, want, epsilon = 1e-5);
        }
        let x = v(&mut t, &[1000., 0.]);
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s), &[1.0, 0.0]);
    }

    #[test]
    fn concat_and_sum_pool() {
        let mut t = Tape::<f64>::new();
        let a = v(&mut t, &[1., 2.]);
        let b = v(&mut t, &[3.]);
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1., 2., 3.]);
        let single = t.concat(&[a]).unwrap();
        assert_eq!(t.value(single), &[1., 2.]);
        assert_eq!(t.concat(&[]), Err(TensorError::EmptyConcat));

        let x = v(&mut t, &[1., 2., 3., 4., 5., 6.]);
        let p = t.sum_pool(x, 3).unwrap();
        assert_eq!(t.value(p), &[6., 15.]);
        let p1 = t.sum_pool(x, 1).unwrap();
        assert_eq!(t.value(p1), t.value(x));
        assert!(matches!(t.sum_pool(x, 4), Err(TensorError::NotDivisible { .. })));
    }

    #[test]
    fn signed_sqrt_and_l2() {
        let mut t = Tape::<f64>::new();
        let x = v(&mut t, &[-4., 0., 0.25]);
        let s = t.signed_sqrt(x).unwrap();
        assert_eq!(t.value(s), &[-2., 0., 0.5]);
        let a = v(&mut t, &[3., 4.]);
        let n = t.l2_normalize(a).unwrap();
        assert_abs_diff_eq!(t.value(n)[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(n)[1], 0.8, epsilon = 1e-15);
        let z = v(&mut t, &[0., 0.]);
        let nz = t.l2_normalize(z).unwrap();
        assert_eq!(t.value(nz), &[0., 0.]);
    }

    #[test]
    fn signed_sqrt_gradient_near_quarter() {
        let mut t = Tape::<f64>::new();
        let x = v(&mut t, &[0.25]);
        let s = t.signed_sqrt(x).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert_abs_diff_eq!(g.get(x).unwrap()[0], 1.0, epsilon = 1e-7);
    }

    #[test]
    fn select_row_accumulates() {
        let table = Tensor::<f64>::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap()
            .trainable();
        let mut t = Tape::new();
        let tv = t.leaf(&table);
        let r = t.select_row(tv, 1).unwrap();
        assert_eq!(t.value(r), &[0., 1., 0.]);
        let r2 = t.select_row(tv, 1).unwrap();
        let s = t.add(r, r2).unwrap();
        let up = t.constant(vec![3], vec![1., 2., 3.]).unwrap();
        let w = t.mul(s, up).unwrap();
        let l = t.sum(w).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(tv).unwrap(), &[0., 0., 0., 2., 4., 6., 0., 0., 0.]);
        let mut t2 = Tape::new();
        let tv2 = t2.leaf(&table);
        assert!(matches!(t2.select_row(tv2, 3), Err(TensorError::IndexOutOfRange { .. })));
    }

    #[test]
    fn backward_analytic_cases() {
        let mut t = Tape::<f64>::new();
        let x = v(&mut t, &[1., -2., 3.]);
        let l = t.sum(x).unwrap();
        assert_eq!(t.backward(l).unwrap().get(x).unwrap(), &[1., 1., 1.]);

        let mut t = Tape::<f64>::new();
        let x = v(&mut t, &[1., -2., 3.]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        assert_eq!(t.backward(l).unwrap().get(x).unwrap(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::<f64>::new();
        let x = v(&mut t, &[1., 2.]);
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.backward(l).unwrap_err(), TensorError::StaleTape);

        let mut other = Tape::<f64>::new();
        assert_eq!(other.sum(x).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut t = Tape::<f32>::new();
        let x = t.variable(vec![1], vec![3e38]).unwrap();
        let y = t.add(x, x);
        assert_eq!(y.unwrap_err(), TensorError::NonFinite { op: "add" });
    }

    #[test]
    fn fan_out_accumulates() {
        // l = sum(tanh(x)) + sum(3x): dl/dx = (1 - tanh^2) + 3
        let mut t = Tape::<f64>::new();
        let x = v(&mut t, &[0.3, -0.7]);
        let a = t.tanh(x).unwrap();
        let b = t.scale(x, 3.0).unwrap();
        let s = t.add(a, b).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        for (gi, xi) in g.get(x).unwrap().iter().zip([0.3f64, -0.7]) {
            assert_abs_diff_eq!(*gi, 1.0 - xi.tanh().powi(2) + 3.0, epsilon = 1e-14);
        }
    }
}
