//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so node indices are
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients into leaves created with
//! `requires_grad`. Gradients are skipped for subgraphs that do not reach a
//! trainable leaf, which keeps frozen base weights cheap.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row range `[start, start + len)` of one packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Options for [`Graph::attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec<'a> {
    pub segments: &'a [Segment],
    pub heads: usize,
    /// Learned key/value prefix slots `[p × d]`, visible to every position.
    pub prefix: Option<(Var, Var)>,
    /// Diagnostic: give prefix slots a score of −∞, which must reproduce the
    /// prefix-free output exactly.
    pub mask_prefix: bool,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a · bᵀ`
    MatMulT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    Tanh { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    KlSoft { student: Var, teacher_probs: Vec<T>, student_probs: Vec<T>, temperature: T },
    Hinge { a: Var, signs: Vec<T> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
        prefix_len: usize,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    /// Accumulated gradients, kept for leaves only.
    leaf_grads: Vec<Option<Vec<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as an input; it receives gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records `t` as an input with an explicit trainability flag.
    pub fn param(&mut self, t: &Tensor<T>, trainable: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, trainable)
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are validated on creation")
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]` (the layout of a `[d_out×d_in]` weight).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMulT { a, b, m, k, n }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, ng))
    }

    /// Adds a `[c]` row vector to every row of an `[r×c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims(a, "add_row")?;
        if numel(self.shape(row)) != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, s }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Tanh { a }, ng)
    }

    /// Row-wise layer normalization of `x: [r×c]` with `[c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "layer_norm")?;
        if numel(self.shape(gain)) != c || numel(self.shape(bias)) != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(LN_EPS);
        let cf = T::of(c as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(vec![r, c], out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = *self.shape(a).last().expect("shapes are non-empty");
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax { a }, ng))
    }

    /// Gathers rows of a `[vocab×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        let tv = self.value(table);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { what: "embedding table", index: id, bound: vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Concatenates along the first axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(*first), self.shape(p)));
            }
            rows += self.shape(p)[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// Rows `[start, start + len)` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.shape(a)[0];
        if len == 0 || start + len > rows {
            return Err(Error::Index { what: "slice_rows", index: start + len, bound: rows });
        }
        let c: usize = self.shape(a)[1..].iter().product();
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let mut shape = self.shape(a).to_vec();
        shape[0] = len;
        let ng = self.needs(a);
        Ok(self.push(shape, out, Op::SliceRows { a, start }, ng))
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::Index { what: "slice_cols", index: start + width, bound: c });
        }
        let v = self.value(a);
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + width].iter().copied()).collect();
        let ng = self.needs(a);
        Ok(self.push(vec![r, width], out, Op::SliceCols { a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.value(a).iter().copied().sum::<T>() / n;
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Mean { a }, ng)
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index { what: "vocabulary", index: bad, bound: vocab });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let lse = log_sum_exp(row);
            total = total + (lse - row[t]);
            softmax_in_place(row);
        }
        let loss = total / T::of(n as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// `T²·KL(softmax(teacher/T) ‖ softmax(student/T))`, averaged over rows.
    /// The teacher is treated as a constant.
    pub fn kl_divergence_soft(&mut self, teacher: Var, student: Var, temperature: T) -> Result<Var> {
        if self.shape(teacher) != self.shape(student) {
            return Err(Error::dim("kl_divergence_soft", self.shape(teacher), self.shape(student)));
        }
        if !(temperature > T::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature:?}")));
        }
        let c = *self.shape(student).last().expect("shapes are non-empty");
        let rows = self.value(student).len() / c;
        let mut tp: Vec<T> = self.value(teacher).iter().map(|&x| x / temperature).collect();
        let mut sp: Vec<T> = self.value(student).iter().map(|&x| x / temperature).collect();
        let mut total = T::zero();
        for (trow, srow) in tp.chunks_mut(c).zip(sp.chunks_mut(c)) {
            let tl = log_sum_exp(trow);
            let sl = log_sum_exp(srow);
            for j in 0..c {
                let log_p = trow[j] - tl;
                let log_q = srow[j] - sl;
                let p = log_p.exp();
                total = total + p * (log_p - log_q);
                trow[j] = p;
                srow[j] = log_q.exp();
            }
        }
        let loss = temperature * temperature * total / T::of(rows as f64);
        let ng = self.needs(student);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::KlSoft { student, teacher_probs: tp, student_probs: sp, temperature },
            ng,
        ))
    }

    /// `Σ_k max(0, 1 − s_k·a_k)` for a ±1 sign vector `s`.
    pub fn hinge(&mut self, a: Var, signs: &[T]) -> Result<Var> {
        if numel(self.shape(a)) != signs.len() {
            return Err(Error::dim("hinge", self.shape(a), &[signs.len()]));
        }
        let s = self
            .value(a)
            .iter()
            .zip(signs)
            .map(|(&x, &b)| (T::one() - b * x).max(T::zero()))
            .sum::<T>();
        let ng = self.needs(a);
        Ok(self.push(vec![1], vec![s], Op::Hinge { a, signs: signs.to_vec() }, ng))
    }

    /// Causal multi-head attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N×d]` with heads laid out as contiguous column
    /// blocks. Every position additionally attends to all prefix slots.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec<'_>) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!("{d} columns cannot split into {} heads", spec.heads)));
        }
        let mut covered = 0;
        for s in spec.segments {
            if s.start != covered || s.len == 0 {
                return Err(Error::Contract("segments must tile the rows in order".into()));
            }
            covered += s.len;
        }
        if covered != n {
            return Err(Error::dim("attention segments", &[covered], &[n]));
        }
        let prefix_len = match spec.prefix {
            Some((kp, vp)) => {
                let (p, dk) = self.matrix_dims(kp, "attention prefix")?;
                if dk != d || self.shape(vp) != [p, d] {
                    return Err(Error::dim("attention prefix", self.shape(kp), &[p, d]));
                }
                p
            }
            None => 0,
        };
        let heads = spec.heads;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (kp, vp): (&[T], &[T]) = match spec.prefix {
            Some((a, b)) => (self.value(a), self.value(b)),
            None => (&[], &[]),
        };
        let use_prefix = prefix_len > 0 && !spec.mask_prefix;
        let probs_len: usize = spec.segments.iter().map(|s| heads * s.len * (prefix_len + s.len)).sum();
        let mut probs = vec![T::zero(); probs_len];
        let mut out = vec![T::zero(); n * d];
        let mut offset = 0;
        for seg in spec.segments {
            let width = prefix_len + seg.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seg.len {
                    let qi = &qv[(seg.start + i) * d..][cols.clone()];
                    let row = &mut probs[offset + i * width..offset + (i + 1) * width];
                    let mut max = T::neg_infinity();
                    if use_prefix {
                        for j in 0..prefix_len {
                            let s = dot(qi, &kp[j * d..][cols.clone()]) * scale;
                            row[j] = s;
                            max = max.max(s);
                        }
                    }
                    for j in 0..=i {
                        let s = dot(qi, &kv[(seg.start + j) * d..][cols.clone()]) * scale;
                        row[prefix_len + j] = s;
                        max = max.max(s);
                    }
                    let mut z = T::zero();
                    let active = |j: usize| if j < prefix_len { use_prefix } else { j - prefix_len <= i };
                    for (j, x) in row.iter_mut().enumerate() {
                        if active(j) {
                            *x = (*x - max).exp();
                            z = z + *x;
                        } else {
                            *x = T::zero();
                        }
                    }
                    let o = &mut out[(seg.start + i) * d..][cols.clone()];
                    for (j, x) in row.iter_mut().enumerate() {
                        if !active(j) {
                            continue;
                        }
                        *x = *x / z;
                        let src = if j < prefix_len {
                            &vp[j * d..][cols.clone()]
                        } else {
                            &vv[(seg.start + j - prefix_len) * d..][cols.clone()]
                        };
                        for (oc, &s) in o.iter_mut().zip(src) {
                            *oc = *oc + *x * s;
                        }
                    }
                }
                offset += seg.len * width;
            }
        }
        let mut ng = self.needs(q) || self.needs(k) || self.needs(v);
        if let Some((a, b)) = spec.prefix {
            ng |= self.needs(a) || self.needs(b);
        }
        Ok(self.push(
            vec![n, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                prefix: spec.prefix,
                segments: spec.segments.to_vec(),
                heads,
                probs,
                prefix_len,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar node, adding into leaf gradients.
    /// Calling it again without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    gemm_nt(g, &nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    gemm_tn(&nodes[a.0].value, g, gb, k, m, n);
                }
            }
            &Op::MatMulT { a, b, m, k, n } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    gemm_nn(g, &nodes[b.0].value, ga, m, n, k);
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    gemm_tn(g, &nodes[a.0].value, gb, n, m, k);
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    add_into(gb, g);
                }
            }
            &Op::AddRow { a, row } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    add_into(ga, g);
                }
                if let Some(gr) = slot(grads, nodes, row) {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    for ((d, &gi), &bv) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d = *d + gi * bv;
                    }
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    for ((d, &gi), &av) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d = *d + gi * av;
                    }
                }
            }
            &Op::Scale { a, s } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    for (d, &gi) in ga.iter_mut().zip(g) {
                        *d = *d + gi * s;
                    }
                }
            }
            &Op::Gelu { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d = *d + gi * gelu_grad(x);
                    }
                }
            }
            &Op::Tanh { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d = *d + gi * (T::one() - y * y);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                if let Some(gx) = slot(grads, nodes, *x) {
                    let cf = T::of(c as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[j];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        let dst = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dst[j] = dst[j] + rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                }
            }
            &Op::Softmax { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    let c = *node.shape.last().expect("non-empty");
                    for ((dst, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dst[j] = dst[j] + yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot(grads, nodes, *table) {
                    let d = node.shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(grads, nodes, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            &Op::SliceRows { a, start } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    let c: usize = node.shape[1..].iter().product();
                    add_into(&mut ga[start * c..start * c + g.len()], g);
                }
            }
            &Op::SliceCols { a, start } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    let c = nodes[a.0].shape[1];
                    let w = node.shape[1];
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut ga[r * c + start..r * c + start + w], gr);
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    add_into(ga, g);
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    ga.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    let s = g[0] / T::of(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gl) = slot(grads, nodes, *logits) {
                    let vocab = nodes[logits.0].shape[1];
                    let s = g[0] / T::of(targets.len() as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        let dst = &mut gl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            dst[j] = dst[j] + s * pr[j];
                        }
                        dst[t] = dst[t] - s;
                    }
                }
            }
            Op::KlSoft { student, teacher_probs, student_probs, temperature } => {
                if let Some(gs) = slot(grads, nodes, *student) {
                    let c = *nodes[student.0].shape.last().expect("non-empty");
                    let rows = gs.len() / c;
                    let s = g[0] * *temperature / T::of(rows as f64);
                    for ((d, &q), &p) in gs.iter_mut().zip(student_probs).zip(teacher_probs) {
                        *d = *d + s * (q - p);
                    }
                }
            }
            Op::Hinge { a, signs } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((d, &x), &b) in ga.iter_mut().zip(&nodes[a.0].value).zip(signs) {
                        if T::one() - b * x > T::zero() {
                            *d = *d - g[0] * b;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, prefix, segments, heads, probs, prefix_len } => {
                let (q, k, v, heads, prefix_len) = (*q, *k, *v, *heads, *prefix_len);
                let d = node.shape[1];
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let qv = &nodes[q.0].value;
                let kv = &nodes[k.0].value;
                let vv = &nodes[v.0].value;
                let (kpv, vpv): (&[T], &[T]) = match prefix {
                    Some((a, b)) => (&nodes[a.0].value, &nodes[b.0].value),
                    None => (&[], &[]),
                };
                let n = node.shape[0];
                let mut gq = vec![T::zero(); n * d];
                let mut gk = vec![T::zero(); n * d];
                let mut gv = vec![T::zero(); n * d];
                let mut gkp = vec![T::zero(); prefix_len * d];
                let mut gvp = vec![T::zero(); prefix_len * d];
                let mut dp = Vec::new();
                let mut offset = 0;
                for seg in segments {
                    let width = prefix_len + seg.len;
                    dp.resize(width, T::zero());
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..seg.len {
                            let ri = seg.start + i;
                            let pr = &probs[offset + i * width..offset + (i + 1) * width];
                            let go = &g[ri * d..][cols.clone()];
                            let mut dot_sum = T::zero();
                            for j in 0..prefix_len + i + 1 {
                                if pr[j] == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                let src = if j < prefix_len {
                                    &vpv[j * d..][cols.clone()]
                                } else {
                                    &vv[(seg.start + j - prefix_len) * d..][cols.clone()]
                                };
                                dp[j] = dot(go, src);
                                dot_sum = dot_sum + pr[j] * dp[j];
                                let gdst = if j < prefix_len {
                                    &mut gvp[j * d..][cols.clone()]
                                } else {
                                    &mut gv[(seg.start + j - prefix_len) * d..][cols.clone()]
                                };
                                for (x, &o) in gdst.iter_mut().zip(go) {
                                    *x = *x + pr[j] * o;
                                }
                            }
                            let qi = &qv[ri * d..][cols.clone()];
                            for j in 0..prefix_len + i + 1 {
                                if pr[j] == T::zero() {
                                    continue;
                                }
                                let ds = pr[j] * (dp[j] - dot_sum) * scale;
                                let (ksrc, kdst) = if j < prefix_len {
                                    (&kpv[j * d..][cols.clone()], &mut gkp[j * d..][cols.clone()])
                                } else {
                                    let r = (seg.start + j - prefix_len) * d;
                                    (&kv[r..][cols.clone()], &mut gk[r..][cols.clone()])
                                };
                                let gqi = &mut gq[ri * d..][cols.clone()];
                                for c in 0..dh {
                                    gqi[c] = gqi[c] + ds * ksrc[c];
                                    kdst[c] = kdst[c] + ds * qi[c];
                                }
                            }
                        }
                        offset += seg.len * width;
                    }
                }
                for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                    if let Some(dst) = slot(grads, nodes, var) {
                        add_into(dst, &buf);
                    }
                }
                if let Some((kp, vp)) = *prefix {
                    if let Some(dst) = slot(grads, nodes, kp) {
                        add_into(dst, &gkp);
                    }
                    if let Some(dst) = slot(grads, nodes, vp) {
                        add_into(dst, &gvp);
                    }
                }
            }
        }
    }
}

/// Gradient buffer for an operand, or None when it is frozen.
fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut g = Graph::<f64>::new();
        let id = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.leaf(&t(&[2, 2], &[3.0, -1.0, 0.5, 2.0]));
        let y = g.matmul(id, x).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let a = g.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::<f64>::new();
        let data = [1.0, -2.0, 3.0];
        let x = g.leaf(&t(&[3], &data));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), &want[..]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::<f32>::new();
        let l = g.constant(&[1, 4], vec![0.3; 4]).unwrap();
        let loss = g.cross_entropy(l, &[2]).unwrap();
        assert!((g.item(loss) - 4f32.ln()).abs() < 1e-6);

        let mut logits = vec![0.0; 4];
        logits[1] = 1e4;
        let l = g.constant(&[1, 4], logits).unwrap();
        let loss = g.cross_entropy(l, &[1]).unwrap();
        assert!(g.item(loss).abs() < 1e-6);

        assert!(matches!(g.cross_entropy(l, &[4]), Err(Error::Index { .. })));
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.5, 3.0]).unwrap();
        let b = g.leaf(&Tensor::new(&[2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.5, 3.0]).unwrap().with_grad());
        let kl = g.kl_divergence_soft(a, b, 2.0).unwrap();
        assert!(g.item(kl).abs() <= 1e-6);
        g.backward(kl).unwrap();
        assert!(g.grad(b).unwrap().iter().all(|x| x.abs() < 1e-7));
        assert!(g.kl_divergence_soft(a, b, 0.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[3, 5], (0..15).map(|i| (i as f32 * 0.7).sin() * 5.0).collect()).unwrap();
        let s = g.softmax(a).unwrap();
        for row in g.value(s).chunks(5) {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn frozen_operands_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = g.leaf(&t(&[1, 2], &[1.0, 1.0]));
        let y = g.matmul_t(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn masked_prefix_matches_prefix_free_attention() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let q = g.constant(&[3, 8], vals.clone()).unwrap();
        let k = g.constant(&[3, 8], vals.iter().map(|v| v * 0.5).collect()).unwrap();
        let v = g.constant(&[3, 8], vals.iter().map(|v| v + 0.2).collect()).unwrap();
        let kp = g.constant(&[2, 8], vec![0.3; 16]).unwrap();
        let vp = g.constant(&[2, 8], vec![-0.4; 16]).unwrap();
        let segs = [Segment { start: 0, len: 3 }];
        let plain = g
            .attention(q, k, v, AttentionSpec { segments: &segs, heads: 2, prefix: None, mask_prefix: false })
            .unwrap();
        let masked = g
            .attention(q, k, v, AttentionSpec { segments: &segs, heads: 2, prefix: Some((kp, vp)), mask_prefix: true })
            .unwrap();
        assert_eq!(g.value(plain), g.value(masked));
        let live = g
            .attention(q, k, v, AttentionSpec { segments: &segs, heads: 2, prefix: Some((kp, vp)), mask_prefix: false })
            .unwrap();
        assert_ne!(g.value(plain), g.value(live));
        assert_eq!(g.shape(live), &[3, 8]);
    }
}
