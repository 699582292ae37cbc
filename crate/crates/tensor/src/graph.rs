use crate::kernels::gemm;
use crate::{Array, ParamId, ParamStore};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A contiguous run of rows forming one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    HCat(Vec<Var>),
    Rope { x: Var, positions: Vec<usize>, head_dim: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Eagerly evaluated computation tape.
///
/// Parameter leaves borrow their values from a [`ParamStore`]; every other
/// node owns its value. [`Graph::backward`] walks the tape in reverse and
/// returns gradients for the parameters that were used.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Grads {
    params: Vec<Option<Array>>,
}

impl Grads {
    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Array>> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params: Some(params), nodes: Vec::new() }
    }

    /// A tape with no parameter store; only constants can be leaves.
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.expect("parameter node without store").get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("Graph::param on a detached graph");
        assert!(id < store.len(), "parameter id {id} out of range");
        self.nodes.push(Node { value: Array::zeros(&[0]), op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("sub");
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul");
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        let cols = av.cols();
        assert_eq!(rv.len(), cols, "add_row: row has {} values, matrix has {cols} columns", rv.len());
        let mut out = av.clone();
        for r in out.data_mut().chunks_mut(cols) {
            for (o, b) in r.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("matmul");
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in out.data_mut().chunks_mut(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * s;
            }
            rstd.push(s);
        }
        self.push(out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Selects rows of `table` by index; `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < tv.rows(), "gather_rows: index {i} out of {} rows", tv.rows());
            data.extend_from_slice(tv.row(i));
        }
        let out = Array::from_vec(&[idx.len(), cols], data).expect("gather_rows");
        self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, &[table])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "hcat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "hcat: row count mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let out = Array::from_vec(&[rows, total], data).expect("hcat");
        self.push(out, Op::HCat(parts.to_vec()), parts)
    }

    /// Rotary position embedding over interleaved pairs within each
    /// `head_dim`-wide column block; row `r` is rotated for `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(positions.len(), xv.rows(), "rope: one position per row");
        assert!(head_dim % 2 == 0 && xv.cols() % head_dim == 0, "rope: bad head_dim");
        let mut out = xv.clone();
        rotate(&mut out, positions, head_dim, base, 1.0);
        self.push(out, Op::Rope { x, positions: positions.to_vec(), head_dim, base }, &[x])
    }

    /// Bidirectional attention with `heads` query heads sharing a single key
    /// and value head. `q: [N, heads*d]`, `k, v: [N, d]`; attention never
    /// crosses segment boundaries.
    pub fn mqa_attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = kv.cols();
        let width = qv.cols();
        let n = qv.rows();
        assert_eq!(width, heads * d, "mqa_attention: query width must be heads * head_dim");
        assert_eq!(vv.cols(), d, "mqa_attention: value width must equal key width");
        assert!(kv.rows() == n && vv.rows() == n, "mqa_attention: row mismatch");
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; n * width];
        let total_probs: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![0.0; total_probs];
        let mut off = 0;
        for s in segments {
            assert!(s.start + s.len <= n, "mqa_attention: segment out of range");
            let l = s.len;
            for h in 0..heads {
                let p = &mut probs[off..off + l * l];
                gemm(
                    l, d, l, scale,
                    &qv.data()[s.start * width + h * d..], (width, 1),
                    &kv.data()[s.start * d..], (1, d),
                    0.0, p, (l, 1),
                );
                for row in p.chunks_mut(l) {
                    softmax_in_place(row);
                }
                gemm(
                    l, l, d, 1.0,
                    p, (l, 1),
                    &vv.data()[s.start * d..], (d, 1),
                    0.0, &mut out[s.start * width + h * d..], (width, 1),
                );
                off += l * l;
            }
        }
        let out = Array::from_vec(&[n, width], out).expect("attention");
        self.push(
            out,
            Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs },
            &[q, k, v],
        )
    }

    /// Attention weights recorded by an attention node, one `len x len`
    /// block per (segment, head) in that order.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut params: Vec<Option<Array>> = vec![None; n_params];
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |grads: &mut Vec<Option<Array>>, v: Var, delta: Array| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut params[*id] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("mul grad");
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("mul grad");
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let rv = self.value(*row);
                    let cols = rv.len();
                    let mut gr = vec![0.0; cols];
                    for r in g.data().chunks(cols) {
                        for (o, x) in gr.iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, Array::from_vec(rv.shape(), gr).expect("add_row grad"));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, g.data(), (n, 1), bv.data(), (1, n), 0.0, &mut da, (k, 1));
                        acc(&mut grads, *a, Array::from_vec(av.shape(), da).expect("matmul grad"));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, av.data(), (1, k), g.data(), (n, 1), 0.0, &mut db, (n, 1));
                        acc(&mut grads, *b, Array::from_vec(bv.shape(), db).expect("matmul grad"));
                    }
                }
                Op::Silu(a) => {
                    let ga = g
                        .zip_map(self.value(*a), |gx, x| {
                            let s = sigmoid(x);
                            gx * s * (1.0 + x * (1.0 - s))
                        })
                        .expect("silu grad");
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = s * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, Array::from_vec(y.shape(), dx).expect("ln grad"));
                }
                Op::GatherRows { table, idx } => {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    let mut dt = Array::zeros(tv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, x) in dt.row_mut(i).iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::HCat(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        if self.nodes[p.0].needs_grad {
                            let mut dp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                dp.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                            }
                            acc(&mut grads, p, Array::from_vec(pv.shape(), dp).expect("hcat grad"));
                        }
                        off += w;
                    }
                }
                Op::Rope { x, positions, head_dim, base } => {
                    let mut dx = g;
                    rotate(&mut dx, positions, *head_dim, *base, -1.0);
                    acc(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, segments, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = kv.cols();
                    let width = qv.cols();
                    let scale = 1.0 / (d as f64).sqrt();
                    let mut dq = vec![0.0; qv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    let mut dv = vec![0.0; vv.len()];
                    let mut off = 0;
                    for s in segments {
                        let l = s.len;
                        let mut ds = vec![0.0; l * l];
                        for h in 0..*heads {
                            let p = &probs[off..off + l * l];
                            let g_h = &g.data()[s.start * width + h * d..];
                            // dP = dO V^T
                            gemm(l, d, l, 1.0, g_h, (width, 1), &vv.data()[s.start * d..], (1, d), 0.0, &mut ds, (l, 1));
                            // dV += P^T dO
                            gemm(l, l, d, 1.0, p, (1, l), g_h, (width, 1), 1.0, &mut dv[s.start * d..], (d, 1));
                            for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                                for (dx, px) in drow.iter_mut().zip(prow) {
                                    *dx = px * (*dx - dot);
                                }
                            }
                            gemm(
                                l, l, d, scale,
                                &ds, (l, 1),
                                &kv.data()[s.start * d..], (d, 1),
                                0.0, &mut dq[s.start * width + h * d..], (width, 1),
                            );
                            gemm(
                                l, l, d, scale,
                                &ds, (1, l),
                                &qv.data()[s.start * width + h * d..], (width, 1),
                                1.0, &mut dk[s.start * d..], (d, 1),
                            );
                            off += l * l;
                        }
                    }
                    acc(&mut grads, *q, Array::from_vec(qv.shape(), dq).expect("attn grad"));
                    acc(&mut grads, *k, Array::from_vec(kv.shape(), dk).expect("attn grad"));
                    acc(&mut grads, *v, Array::from_vec(vv.shape(), dv).expect("attn grad"));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Array::full(av.shape(), g.data()[0]));
                }
            }
        }
        Grads { params }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Rotates interleaved pairs by `direction * position * base^(-2i/head_dim)`.
fn rotate(x: &mut Array, positions: &[usize], head_dim: usize, base: f64, direction: f64) {
    let cols = x.cols();
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-(2.0 * i as f64) / head_dim as f64)).collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let trig: Vec<(f64, f64)> =
            freqs.iter().map(|f| (direction * pos as f64 * f).sin_cos()).collect();
        let row = x.row_mut(r);
        for block in row.chunks_mut(head_dim).take(cols / head_dim) {
            for (i, &(s, c)) in trig.iter().enumerate() {
                let (a, b) = (block[2 * i], block[2 * i + 1]);
                block[2 * i] = a * c - b * s;
                block[2 * i + 1] = a * s + b * c;
            }
        }
    }
}
