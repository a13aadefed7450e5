use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { x: Var, factor: f64 },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Var },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Mean { x: Var },
    Nll { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<f64> },
}

/// Layout of a fused multi-head attention over `batch` sequences of `seq` rows each.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `seq × seq` row-major; `mask[i·seq + j]` lets query `i` see key `j`.
    pub mask: Vec<bool>,
    /// Optional `batch × seq` key validity, combined with `mask`.
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionSpec {
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        self.mask[i * self.seq + j] && self.key_valid.as_ref().is_none_or(|kv| kv[b * self.seq + j])
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Wengert list recording a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's inputs precede it.
/// Gradients of leaves accumulate across `backward` calls until [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after `backward` for every
    /// differentiable leaf (zero when the leaf did not participate).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize), AutodiffError> {
        let shape = self.value(v).shape();
        match shape {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::Shape(format!("expected a matrix, got shape {shape:?}"))),
        }
    }

    // ── Forward primitives ────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(AutodiffError::Shape(format!(
                "matmul inner extents differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Elementwise sum. `b` may also be a vector matching the trailing axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let broadcast = self.broadcast_kind(a, b, "add")?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + if broadcast { bv[i % cols] } else { bv[i] })
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b, broadcast }))
    }

    /// Elementwise product, with the same trailing-axis broadcast as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let broadcast = self.broadcast_kind(a, b, "mul")?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * if broadcast { bv[i % cols] } else { bv[i] })
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b, broadcast }))
    }

    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<bool, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(false)
        } else if sb.len() == 1 && sb[0] == self.value(a).cols() {
            Ok(true)
        } else {
            Err(AutodiffError::Shape(format!("{what}: incompatible shapes {sa:?} and {sb:?}")))
        }
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * factor).collect());
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale { x, factor })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims(x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), rg, Op::Transpose { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// Softmax over the trailing axis, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Softmax { x })
    }

    /// Layer normalization over the trailing axis followed by `gain`/`bias` affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gain).shape() != [cols] || self.value(bias).shape() != [cols] {
            return Err(AutodiffError::Shape(format!(
                "layer_norm affine parameters must have shape [{cols}]"
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, rg, Op::LayerNorm { x, gain, bias, normed, inv_std }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Gelu { x })
    }

    /// Selects rows of a `[n×d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (n, d) = self.matrix_dims(table)?;
        if ids.is_empty() {
            return Err(AutodiffError::Shape("gather with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::Index(format!("row {bad} out of range for table of {n}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            rg,
            Op::Gather { table, ids: ids.to_vec() },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims(x)?;
        if len == 0 || start + len > rows {
            return Err(AutodiffError::Shape(format!("row slice {start}+{len} of {rows}")));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![len, cols], data), rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix_dims(x)?;
        if len == 0 || start + len > cols {
            return Err(AutodiffError::Shape(format!("column slice {start}+{len} of {cols}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![rows, len], data), rg, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?;
        let (_, cols) = self.matrix_dims(*first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p)?;
            if c != cols {
                return Err(AutodiffError::Shape(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            rg,
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?;
        let (rows, _) = self.matrix_dims(*first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p)?;
            if r != rows {
                return Err(AutodiffError::Shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), rg, Op::Mean { x })
    }

    /// Sum of all elements (mean scaled by the element count).
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let m = self.mean(x);
        self.scale(m, n)
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`,
    /// over positions where `mask` is set.
    pub fn nll_loss(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, AutodiffError> {
        let (rows, vocab) = self.matrix_dims(logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(AutodiffError::Shape(format!(
                "nll_loss: {rows} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::DegenerateBatch);
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for t in (0..rows).filter(|&t| mask[t]) {
            let target = targets[t];
            if target >= vocab {
                return Err(AutodiffError::Index(format!(
                    "target {target} at position {t} out of range for vocabulary {vocab}"
                )));
            }
            let row = lv.row(t);
            total += log_sum_exp(row) - row[target];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            rg,
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Scaled dot-product attention, `softmax(q·kᵀ/√d_h)·v` per sequence and head,
    /// with masked keys receiving exactly zero weight. Inputs and output are
    /// `[batch·seq, d]`; head `h` owns columns `h·d_h..(h+1)·d_h`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var, AutodiffError> {
        let (rows, d) = self.matrix_dims(q)?;
        let (t, b, h) = (spec.seq, spec.batch, spec.heads);
        for other in [k, v] {
            if self.matrix_dims(other)? != (rows, d) {
                return Err(AutodiffError::Shape("attention q, k, v shapes differ".into()));
            }
        }
        if rows != b * t || h == 0 || d % h != 0 || spec.mask.len() != t * t {
            return Err(AutodiffError::Shape(format!(
                "attention over {rows}×{d} with batch {b}, seq {t}, heads {h}, mask {}",
                spec.mask.len()
            )));
        }
        if spec.key_valid.as_ref().is_some_and(|kv| kv.len() != b * t) {
            return Err(AutodiffError::Shape("key_valid length must be batch·seq".into()));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * h * t * t];
        let mut out = vec![0.0; rows * d];
        let (mut qh, mut kh, mut vh, mut oh) = (vec![0.0; t * dh], vec![0.0; t * dh], vec![0.0; t * dh], vec![0.0; t * dh]);
        for bi in 0..b {
            for hi in 0..h {
                head_slice(qv, d, bi * t, t, hi * dh, dh, &mut qh);
                head_slice(kv, d, bi * t, t, hi * dh, dh, &mut kh);
                head_slice(vv, d, bi * t, t, hi * dh, dh, &mut vh);
                let p = &mut probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                gemm(t, dh, t, &qh, false, &kh, true, p, false);
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    let mut finite = true;
                    for (j, s) in row.iter_mut().enumerate() {
                        if spec.visible(bi, i, j) {
                            *s *= scale;
                            finite &= s.is_finite();
                            max = max.max(*s);
                        }
                    }
                    if !finite {
                        return Err(AutodiffError::NonFinite(format!("attention scores of query {i} in sequence {bi}")));
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(AutodiffError::Contract(format!("attention query {i} of sequence {bi} sees no key")));
                    }
                    let mut total = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if spec.visible(bi, i, j) { (*s - max).exp() } else { 0.0 };
                        total += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= total);
                }
                gemm(t, t, dh, p, false, &vh, false, &mut oh, false);
                head_scatter(&oh, &mut out, d, bi * t, t, hi * dh, dh);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::from_parts(vec![rows, d], out), rg, Op::Attention { q, k, v, spec, probs }))
    }

    /// Cached attention weights `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ── Reverse pass ──────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) back to every differentiable leaf and adds it
    /// to that leaf's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut adj);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let contribution = adj.get_mut(i).and_then(Option::take);
            let grad = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            if let Some(c) = contribution {
                for (acc, v) in grad.data_mut().iter_mut().zip(c) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(da) = self.adj_buf(adj, *a) {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, da, true);
                }
                if let Some(db) = self.adj_buf(adj, *b) {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, db, true);
                }
            }
            Op::Add { a, b, broadcast } => {
                if let Some(da) = self.adj_buf(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.adj_buf(adj, *b) {
                    if *broadcast {
                        let cols = db.len();
                        for row in g.chunks(cols) {
                            add_into(db, row);
                        }
                    } else {
                        add_into(db, g);
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cols = self.value(*a).cols();
                let bidx = |i: usize| if *broadcast { i % cols } else { i };
                if let Some(da) = self.adj_buf(adj, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[bidx(i)];
                    }
                }
                if let Some(db) = self.adj_buf(adj, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        db[bidx(i)] += gi * av[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.adj_buf(adj, *x) {
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += factor * gi;
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(dx) = self.adj_buf(adj, *x) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.adj_buf(adj, *x) {
                    add_into(dx, g);
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                if let Some(dx) = self.adj_buf(adj, *x) {
                    for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let cols = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(db) = self.adj_buf(adj, *bias) {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
                if let Some(dg) = self.adj_buf(adj, *gain) {
                    for (row, nrow) in g.chunks(cols).zip(normed.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] += row[j] * nrow[j];
                        }
                    }
                }
                if let Some(dx) = self.adj_buf(adj, *x) {
                    let n = cols as f64;
                    let mut dn = vec![0.0; cols];
                    for (r, ((dxr, gr), nr)) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(normed.chunks(cols))
                        .enumerate()
                    {
                        for j in 0..cols {
                            dn[j] = gr[j] * gv[j];
                        }
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nr).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for j in 0..cols {
                            dxr[j] += inv / n * (n * dn[j] - sum_dn - nr[j] * sum_dn_n);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.adj_buf(adj, *x) {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let v = xv[i];
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(dt) = self.adj_buf(adj, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                if let Some(dx) = self.adj_buf(adj, *x) {
                    add_into(&mut dx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let cols = self.value(*x).cols();
                if let Some(dx) = self.adj_buf(adj, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut dx[r * cols + start..r * cols + start + len], gr);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.adj_buf(adj, p) {
                        add_into(dp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.adj_buf(adj, p) {
                        for (r, dr) in dp.chunks_mut(w).enumerate() {
                            add_into(dr, &g[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Mean { x } => {
                if let Some(dx) = self.adj_buf(adj, *x) {
                    let share = g[0] / dx.len() as f64;
                    for d in dx.iter_mut() {
                        *d += share;
                    }
                }
            }
            Op::Nll { logits, targets, mask, count } => {
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let scale = g[0] / *count as f64;
                if let Some(dl) = self.adj_buf(adj, *logits) {
                    for t in (0..targets.len()).filter(|&t| mask[t]) {
                        let mut p = lv.row(t).to_vec();
                        softmax_in_place(&mut p);
                        p[targets[t]] -= 1.0;
                        for (d, pj) in dl[t * vocab..(t + 1) * vocab].iter_mut().zip(p) {
                            *d += scale * pj;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (rows, d) = (node.value.rows(), node.value.cols());
                let (t, b, h) = (spec.seq, spec.batch, spec.heads);
                let dh = d / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (mut dq, mut dk, mut dv) = (vec![0.0; rows * d], vec![0.0; rows * d], vec![0.0; rows * d]);
                let mut bufs = [(); 7].map(|_| vec![0.0; t * dh]);
                let mut dp = vec![0.0; t * t];
                for bi in 0..b {
                    for hi in 0..h {
                        let [qh, kh, vh, gh, dqh, dkh, dvh] = &mut bufs;
                        head_slice(qv, d, bi * t, t, hi * dh, dh, qh);
                        head_slice(kv, d, bi * t, t, hi * dh, dh, kh);
                        head_slice(vv, d, bi * t, t, hi * dh, dh, vh);
                        head_slice(g, d, bi * t, t, hi * dh, dh, gh);
                        let p = &probs[(bi * h + hi) * t * t..(bi * h + hi + 1) * t * t];
                        gemm(t, t, dh, p, true, gh, false, dvh, false);
                        gemm(t, dh, t, gh, false, vh, true, &mut dp, false);
                        for i in 0..t {
                            let pr = &p[i * t..(i + 1) * t];
                            let dr = &mut dp[i * t..(i + 1) * t];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..t {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        gemm(t, t, dh, &dp, false, kh, false, dqh, false);
                        gemm(t, t, dh, &dp, true, qh, false, dkh, false);
                        head_scatter(dqh, &mut dq, d, bi * t, t, hi * dh, dh);
                        head_scatter(dkh, &mut dk, d, bi * t, t, hi * dh, dh);
                        head_scatter(dvh, &mut dv, d, bi * t, t, hi * dh, dh);
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(buf) = self.adj_buf(adj, var) {
                        add_into(buf, &grad);
                    }
                }
            }
        }
    }

    /// Adjoint buffer for `v`, allocated on first use; `None` when `v` is not differentiable.
    fn adj_buf<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }
}

/// Copies rows `row0..row0+rows`, columns `col0..col0+width` of a `[_, stride]` matrix.
fn head_slice(src: &[f64], stride: usize, row0: usize, rows: usize, col0: usize, width: usize, dst: &mut [f64]) {
    for r in 0..rows {
        let o = (row0 + r) * stride + col0;
        dst[r * width..(r + 1) * width].copy_from_slice(&src[o..o + width]);
    }
}

fn head_scatter(src: &[f64], dst: &mut [f64], stride: usize, row0: usize, rows: usize, col0: usize, width: usize) {
    for r in 0..rows {
        let o = (row0 + r) * stride + col0;
        dst[o..o + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
