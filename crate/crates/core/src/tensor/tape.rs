use super::params::{Grads, ParamId, ParamStore};
use super::{gemm, mismatch, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Block(Var),
    Row(Var, usize),
    GatherSum { table: Var, lists: Vec<Vec<usize>> },
    GatherElems { table: Var, idx: Vec<usize> },
    MseConst { a: Var, target: Tensor },
    LinComb(Vec<(Var, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Dropout(..) => "dropout",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::Block(_) => "block",
            Op::Row(..) => "row",
            Op::GatherSum { .. } => "gather_sum",
            Op::GatherElems { .. } => "gather_elems",
            Op::MseConst { .. } => "mse",
            Op::LinComb(_) => "lin_comb",
        }
    }
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy)]
struct DropoutState {
    seed: u64,
    p: f64,
    counter: u64,
}

/// Records operations for one forward pass and differentiates them.
///
/// A tape borrows the parameter store read-only, so many tapes can run
/// against one store concurrently.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<DropoutState>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Tape<'p> {
        Tape { params, nodes: Vec::with_capacity(256), param_vars: vec![None; params.len()], dropout: None }
    }

    /// Enables dropout with probability `p`; masks come from a counter-based
    /// generator keyed by `seed`. `p == 0` leaves dropout off.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Tape<'p> {
        if p > 0.0 {
            self.dropout = Some(DropoutState { seed, p, counter: 0 });
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().unwrap(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Const, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var, TensorError> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (br, bc) = tb.dims2();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ta.shape().len() != 2 || tb.shape().len() != 2 || k != kb {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor { shape: ta.shape().to_vec(), data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, c) = ta.dims2();
        if tr.len() != c {
            return Err(mismatch("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(tr.data()) {
                *x += y;
            }
        }
        let t = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant (e.g. a 0/1 mask).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("mul_const", ta.shape(), c.shape()));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a);
        self.push(t, Op::MulConst(a, c.clone()), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape().to_vec(), data: ta.data().iter().map(|x| x * s).collect() };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (_, c) = ta.dims2();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalisation followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = tx.dims2();
        if tg.len() != c || tb.len() != c {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor { shape: tx.shape().to_vec(), data: out };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let th: Vec<f64> = ta.data().iter().map(|&x| tanh(GELU_C * (x + GELU_A * x * x * x))).collect();
        let data = ta.data().iter().zip(&th).map(|(&x, t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a, th), rg)
    }

    /// Inverted dropout; the identity when the tape has dropout disabled.
    pub fn dropout(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        let Some(state) = self.dropout.as_mut() else {
            return Ok(a);
        };
        let keep = 1.0 / (1.0 - state.p);
        let mut mask = Vec::with_capacity(n);
        for _ in 0..n {
            let r = splitmix64(state.seed ^ state.counter.wrapping_mul(0xd1b54a32d192ed03));
            state.counter += 1;
            let u = (r >> 11) as f64 / (1u64 << 53) as f64;
            mask.push(if u < state.p { 0.0 } else { keep });
        }
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        let rg = self.rg(a);
        self.push(t, Op::Dropout(a, mask), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if start + len > c {
            return Err(mismatch("slice_cols", ta.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(mismatch("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor { shape: vec![r, total], data }, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = t.dims2();
            if pc != c {
                return Err(mismatch("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += pr;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor { shape: vec![rows, c], data }, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Top-left `rows x cols` block of a matrix.
    pub fn block(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if rows > r || cols > c {
            return Err(mismatch("block", ta.shape(), &[rows, cols]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(&ta.data()[i * c..i * c + cols]);
        }
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![rows, cols], data }, Op::Block(a), rg)
    }

    /// Row `i` as a `1 x cols` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if i >= r {
            return Err(mismatch("row", ta.shape(), &[i]));
        }
        let data = ta.data()[i * c..(i + 1) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape: vec![1, c], data }, Op::Row(a, i), rg)
    }

    /// Output row `r` is the sum of `table` rows listed in `lists[r]`; an
    /// empty list gives a zero row.
    pub fn gather_sum(&mut self, table: Var, lists: Vec<Vec<usize>>) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (tr, c) = tt.dims2();
        let mut data = vec![0.0; lists.len() * c];
        for (r, list) in lists.iter().enumerate() {
            let out = &mut data[r * c..(r + 1) * c];
            for &i in list {
                if i >= tr {
                    return Err(mismatch("gather_sum", tt.shape(), &[i]));
                }
                for (o, x) in out.iter_mut().zip(&tt.data()[i * c..(i + 1) * c]) {
                    *o += x;
                }
            }
        }
        let rg = self.rg(table);
        self.push(Tensor { shape: vec![lists.len(), c], data }, Op::GatherSum { table, lists }, rg)
    }

    /// `out[k] = table.flat[idx[k]]`, reshaped to `shape`.
    pub fn gather_elems(&mut self, table: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        if shape.iter().product::<usize>() != idx.len() {
            return Err(mismatch("gather_elems", shape, &[idx.len()]));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &i in &idx {
            match tt.data().get(i) {
                Some(x) => data.push(*x),
                None => return Err(mismatch("gather_elems", tt.shape(), &[i])),
            }
        }
        let rg = self.rg(table);
        self.push(Tensor { shape: shape.to_vec(), data }, Op::GatherElems { table, idx }, rg)
    }

    /// Mean squared difference against a constant target; a scalar.
    pub fn mse_const(&mut self, a: Var, target: &Tensor) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.len() != target.len() {
            return Err(mismatch("mse", ta.shape(), target.shape()));
        }
        let n = ta.len().max(1) as f64;
        let v = ta.data().iter().zip(target.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::MseConst { a, target: target.clone() }, rg)
    }

    /// `sum_i c_i * x_i` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut data = vec![0.0; self.value(terms[0].0).len()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(mismatch("lin_comb", &shape, t.shape()));
            }
            for (o, x) in data.iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor { shape, data }, Op::LinComb(terms.to_vec()), rg)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// parameter in the store (zeros for parameters the loss never touched).
    pub fn backward(&self, loss: Var) -> Grads {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0; self.value(loss).len()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(id) => match &mut out[id.0] {
                    Some(o) => add_into(o, &g),
                    slot => *slot = Some(g),
                },
                &Op::MatMul { a, b, trans_b } => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k) = ta.dims2();
                    let n = g.len() / m.max(1);
                    if let Some(ga) = self.slot(&mut grads, a) {
                        // dA = dC * op(B)^T
                        gemm(m, n, k, &g, false, tb.data(), !trans_b, ga, true);
                    }
                    if let Some(gb) = self.slot(&mut grads, b) {
                        if trans_b {
                            // B is n x k: dB = dC^T * A
                            gemm(n, m, k, &g, true, ta.data(), false, gb, true);
                        } else {
                            gemm(k, m, n, ta.data(), true, &g, false, gb, true);
                        }
                    }
                }
                &Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(gv) = self.slot(&mut grads, v) {
                            add_into(gv, &g);
                        }
                    }
                }
                &Op::AddRow(a, row) => {
                    if let Some(ga) = self.slot(&mut grads, a) {
                        add_into(ga, &g);
                    }
                    if let Some(gr) = self.slot(&mut grads, row) {
                        let c = gr.len();
                        for chunk in g.chunks(c) {
                            add_into(gr, chunk);
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(a).data(), self.value(b).data());
                    if let Some(ga) = self.slot(&mut grads, a) {
                        for ((o, x), y) in ga.iter_mut().zip(&g).zip(tb) {
                            *o += x * y;
                        }
                    }
                    if let Some(gb) = self.slot(&mut grads, b) {
                        for ((o, x), y) in gb.iter_mut().zip(&g).zip(ta) {
                            *o += x * y;
                        }
                    }
                }
                Op::MulConst(a, c) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for ((o, x), y) in ga.iter_mut().zip(&g).zip(c.data()) {
                            *o += x * y;
                        }
                    }
                }
                &Op::Scale(a, s) => {
                    if let Some(ga) = self.slot(&mut grads, a) {
                        for (o, x) in ga.iter_mut().zip(&g) {
                            *o += x * s;
                        }
                    }
                }
                &Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let (_, c) = y.dims2();
                    if let Some(ga) = self.slot(&mut grads, a) {
                        for ((go, gi), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                            let dot: f64 = gi.iter().zip(yr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                go[j] += yr[j] * (gi[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = self.value(*gamma).len();
                    let gam = self.value(*gamma).data();
                    if let Some(gg) = self.slot(&mut grads, *gamma) {
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gb) = self.slot(&mut grads, *beta) {
                        for gr in g.chunks(c) {
                            add_into(gb, gr);
                        }
                    }
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        let mut dh = vec![0.0; c];
                        for (r, ((gxr, gr), hr)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                dh[j] = gr[j] * gam[j];
                                m1 += dh[j];
                                m2 += dh[j] * hr[j];
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for j in 0..c {
                                gxr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                }
                Op::Gelu(a, th) => {
                    let xs = self.value(*a).data();
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for (((o, gi), &x), &t) in ga.iter_mut().zip(&g).zip(xs).zip(th) {
                            let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            *o += gi * d;
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for ((o, gi), m) in ga.iter_mut().zip(&g).zip(mask) {
                            *o += gi * m;
                        }
                    }
                }
                &Op::SliceCols { a, start } => {
                    let c = self.value(a).dims2().1;
                    let w = node.value.as_ref().unwrap().dims2().1;
                    if let Some(ga) = self.slot(&mut grads, a) {
                        for (gar, gr) in ga.chunks_mut(c).zip(g.chunks(w)) {
                            add_into(&mut gar[start..start + w], gr);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.as_ref().unwrap().dims2().1;
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).dims2().1;
                        if let Some(gp) = self.slot(&mut grads, p) {
                            for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(gpr, &gr[off..off + w]);
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if let Some(gp) = self.slot(&mut grads, p) {
                            add_into(gp, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                &Op::Reshape(a) => {
                    if let Some(ga) = self.slot(&mut grads, a) {
                        add_into(ga, &g);
                    }
                }
                &Op::Block(a) => {
                    let c = self.value(a).dims2().1;
                    let (rows, cols) = node.value.as_ref().unwrap().dims2();
                    if let Some(ga) = self.slot(&mut grads, a) {
                        for i in 0..rows {
                            add_into(&mut ga[i * c..i * c + cols], &g[i * cols..(i + 1) * cols]);
                        }
                    }
                }
                &Op::Row(a, i) => {
                    let c = g.len();
                    if let Some(ga) = self.slot(&mut grads, a) {
                        add_into(&mut ga[i * c..(i + 1) * c], &g);
                    }
                }
                Op::GatherSum { table, lists } => {
                    let c = self.value(*table).dims2().1;
                    if let Some(gt) = self.slot(&mut grads, *table) {
                        for (r, list) in lists.iter().enumerate() {
                            for &i in list {
                                add_into(&mut gt[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                            }
                        }
                    }
                }
                Op::GatherElems { table, idx } => {
                    if let Some(gt) = self.slot(&mut grads, *table) {
                        for (&i, gi) in idx.iter().zip(&g) {
                            gt[i] += gi;
                        }
                    }
                }
                Op::MseConst { a, target } => {
                    let xs = self.value(*a).data();
                    let s = 2.0 * g[0] / xs.len().max(1) as f64;
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for ((o, x), y) in ga.iter_mut().zip(xs).zip(target.data()) {
                            *o += s * (x - y);
                        }
                    }
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        if let Some(gv) = self.slot(&mut grads, v) {
                            for (o, x) in gv.iter_mut().zip(&g) {
                                *o += c * x;
                            }
                        }
                    }
                }
            }
        }
        Grads::from_parts(self.params, out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

/// `tanh` through a single `exp`; within a few ulp of the library version.
fn tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    let e = (2.0 * z).exp();
    (e - 1.0) / (e + 1.0)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let t = Tensor::from_fn(3, 7, |i, j| ((i * 7 + j) as f64 * 1.3).sin() * 5.0);
        let shifted = Tensor::from_fn(3, 7, |i, j| t.get(i, j) + 100.0 * i as f64);
        let a = tape.constant(t);
        let b = tape.constant(shifted);
        let (ya, yb) = (tape.softmax(a).unwrap(), tape.softmax(b).unwrap());
        for i in 0..3 {
            let s: f64 = tape.value(ya).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-12);
    }

    #[test]
    fn identity_matmul() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = Tensor::from_fn(4, 3, |i, j| (i + 2 * j) as f64);
        let i = tape.constant(Tensor::eye(4));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(&[2, 5], 3.0));
        let g = tape.constant(Tensor::filled(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::filled(&[1, 2], 1e308));
        assert!(matches!(tape.scale(a, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_fn(3, 4, |i, j| (i * j) as f64));
        let tape_loss = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let x = tape.param(id);
            let ones = tape.constant(Tensor::filled(&[4, 1], 1.0));
            let rows = tape.matmul(x, ones).unwrap();
            let col = tape.constant(Tensor::filled(&[1, 3], 1.0));
            let total = tape.matmul(col, rows).unwrap();
            tape.backward(total)
        };
        let grads = tape_loss(&store);
        assert!(grads.get(id).data().iter().all(|g| *g == 1.0));
    }

    #[test]
    fn quadratic_grad_check() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::filled(&[1, 1], 1.0));
        let report = grad_check(&mut store, 1e-4, None, |s| {
            let mut tape = Tape::new(s);
            let x = tape.param(id);
            let sq = tape.mul(x, x)?;
            let v = tape.value(sq).item();
            Ok((v, tape.backward(sq)))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-8);
        assert!((report.worst_analytic - 2.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::filled(&[1, 2], 0.5));
        let unused = store.add("unused", Tensor::filled(&[1, 2], 0.7));
        let f = |s: &ParamStore| -> Result<(f64, Grads), TensorError> {
            let mut tape = Tape::new(s);
            let x = tape.param(used);
            let l = tape.mse_const(x, &Tensor::zeros(&[1, 2]))?;
            Ok((tape.value(l).item(), tape.backward(l)))
        };
        let (_, g) = f(&store).unwrap();
        assert!(g.get(unused).data().iter().all(|v| *v == 0.0));
        // numeric side: perturbing `unused` leaves the loss bit-identical
        let base = f(&store).unwrap().0;
        store.get_mut(unused).data_mut()[0] += 1e-4;
        assert_eq!(f(&store).unwrap().0, base);
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.add_normal("a", &[4, 6], 0.5, &mut rng);
        let b = store.add_normal("b", &[6, 5], 0.5, &mut rng);
        let c = store.add_normal("c", &[4, 6], 0.5, &mut rng);
        let g = store.add_normal("g", &[5], 0.5, &mut rng);
        let be = store.add_normal("be", &[5], 0.5, &mut rng);
        let tab = store.add_normal("tab", &[3, 5], 0.5, &mut rng);
        let mask = Tensor::from_fn(4, 4, |i, j| ((i + j) % 2) as f64);
        let target = Tensor::from_fn(3, 3, |i, j| (i * 3 + j) as f64 / 9.0);
        let report = grad_check(&mut store, 1e-5, None, |s| {
            let mut t = Tape::new(s);
            let (va, vb, vc) = (t.param(a), t.param(b), t.param(c));
            let ab = t.matmul(va, vb)?;
            let prod = t.mul(va, vc)?;
            let nt = t.matmul_nt(va, prod)?;
            let nt = t.mul_const(nt, &mask)?;
            let sm = t.softmax(nt)?;
            let (vg, vbe) = (t.param(g), t.param(be));
            let ln = t.layer_norm(ab, vg, vbe, 1e-5)?;
            let ge = t.gelu(ln)?;
            let vt = t.param(tab);
            let gs = t.gather_sum(vt, vec![vec![0, 2], vec![], vec![1], vec![1, 1]])?;
            let sum = t.add(ge, gs)?;
            let sum = t.add_row(sum, vg)?;
            let left = t.slice_cols(sum, 1, 3)?;
            let right = t.slice_cols(sum, 0, 2)?;
            let cat = t.concat_cols(&[left, right])?;
            let mixed = t.matmul(sm, cat)?;
            let blk = t.block(mixed, 3, 3)?;
            let r0 = t.row(mixed, 3)?;
            let r0 = t.reshape(r0, &[5, 1])?;
            let r0 = t.slice_cols(r0, 0, 1)?;
            let r0 = t.reshape(r0, &[1, 5])?;
            let rows = t.concat_rows(&[blk, blk])?;
            let el = t.gather_elems(vt, vec![0, 4, 9], &[1, 3])?;
            let l1 = t.mse_const(rows, &Tensor::zeros(&[6, 3]))?;
            let l2 = t.mse_const(blk, &target)?;
            let l3 = t.mse_const(r0, &Tensor::filled(&[1, 5], 0.3))?;
            let l4 = t.mse_const(el, &Tensor::filled(&[1, 3], -0.2))?;
            let l5 = t.scale(l4, 3.0)?;
            let loss = t.lin_comb(&[(l1, 1.0), (l2, 0.5), (l3, 2.0), (l5, 1.0)])?;
            Ok((t.value(loss).item(), t.backward(loss)))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn dropout_is_seeded() {
        let store = ParamStore::new();
        let run = |seed| {
            let mut tape = Tape::new(&store).with_dropout(0.5, seed);
            let x = tape.constant(Tensor::filled(&[4, 8], 1.0));
            let y = tape.dropout(x).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert!(run(1).data().iter().all(|v| *v == 0.0 || *v == 2.0));
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::filled(&[2, 2], 1.0));
        assert_eq!(tape.dropout(x).unwrap(), x);
    }
}
