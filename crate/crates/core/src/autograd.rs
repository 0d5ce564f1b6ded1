//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as borrowed leaves, so building a graph never copies model weights.
//! Calling [`Graph::backward`] on a `1x1` node walks the tape in reverse and
//! leaves a gradient on every node that transitively depends on a leaf
//! created with `requires_grad = true`.

use ndarray::{s, Array2, ArrayView2, Axis, CowArray, Ix2, Zip};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: NodeId,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    RowDot(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Mask(NodeId),
    MaskedMean {
        x: NodeId,
        mask: Vec<bool>,
    },
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        count: usize,
    },
    KlFromReference {
        logits: NodeId,
        reference: Array2<f64>,
        probs: Array2<f64>,
    },
}

struct Node<'a> {
    value: CowArray<'a, f64, Ix2>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax. `-inf` entries get probability zero.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: CowArray<'a, f64, Ix2>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Borrowed leaf; no copy of the underlying array.
    pub fn param(&mut self, value: &'a Array2<f64>, requires_grad: bool) -> NodeId {
        self.push(CowArray::from(value.view()), Op::Leaf, requires_grad)
    }

    /// Owned constant leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(CowArray::from(value), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id.0].value.view()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v.into(), Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(v.into(), Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v.into(), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) - &self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v.into(), Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) * &self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v.into(), Op::Mul(a, b), rg)
    }

    /// Inverted dropout: zeroes entries with probability `p`, rescales the rest.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut impl rand::Rng) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let dim = self.value(x).dim();
        let mask = Array2::from_shape_simple_fn(dim, || {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1);
        let v = &self.value(a) + &self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v.into(), Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(v.into(), Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + k);
        let rg = self.rg(&[a]);
        self.push(v.into(), Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v.into(), Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(v.into(), Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v.into(), Op::Sigmoid(a), rg)
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out.into(),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax; `-inf` entries (e.g. from [`Graph::mask`]) receive zero mass.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(v.into(), Op::Softmax { x }, rg)
    }

    /// Adds a constant mask (typically `0` / `-inf`) to `x`.
    pub fn mask(&mut self, x: NodeId, mask: &Array2<f64>) -> NodeId {
        let v = &self.value(x) + mask;
        let rg = self.rg(&[x]);
        self.push(v.into(), Op::Mask(x), rg)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            out.into(),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[x]);
        self.push(v.into(), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = self.rg(parts);
        self.push(v.into(), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Per-row dot product of two equally shaped matrices; `S x 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let prod = &self.value(a) * &self.value(b);
        let v = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a, b]);
        self.push(v.into(), Op::RowDot(a, b), rg)
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let v = &self.value(a) * &self.value(col);
        let rg = self.rg(&[a, col]);
        self.push(v.into(), Op::MulCol(a, col), rg)
    }

    /// Mean of the entries of an `S x 1` column over rows where `mask` is set.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xv = self.value(x);
        let count = mask.iter().filter(|m| **m).count().max(1) as f64;
        let sum: f64 = xv
            .column(0)
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .sum();
        let rg = self.rg(&[x]);
        self.push(
            Array2::from_elem((1, 1), sum / count).into(),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mean().unwrap_or(0.0);
        let rg = self.rg(&[x]);
        self.push(Array2::from_elem((1, 1), v).into(), Op::Mean(x), rg)
    }

    /// Mean of several `1 x 1` nodes.
    pub fn mean_of(&mut self, items: &[NodeId]) -> NodeId {
        assert!(!items.is_empty());
        let mut acc = items[0];
        for &it in &items[1..] {
            acc = self.add(acc, it);
        }
        self.scale(acc, 1.0 / items.len() as f64)
    }

    /// Mean negative log-likelihood over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let logp = log_softmax_rows(lv);
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total -= logp[[i, *t]];
                count += 1;
            }
        }
        let count = count.max(1);
        let probs = logp.mapv(f64::exp);
        let rg = self.rg(&[logits]);
        self.push(
            Array2::from_elem((1, 1), total / count as f64).into(),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Mean over rows of `KL(P_ref || softmax(logits))`, with `reference`
    /// holding log-probabilities of the fixed distribution `P_ref`.
    pub fn kl_from_reference(&mut self, logits: NodeId, reference: Array2<f64>) -> NodeId {
        let logq = log_softmax_rows(self.value(logits));
        assert_eq!(logq.dim(), reference.dim());
        let mut total = 0.0;
        Zip::from(&reference).and(&logq).for_each(|&lp, &lq| {
            if lp > f64::NEG_INFINITY {
                total += lp.exp() * (lp - lq);
            }
        });
        let rows = logq.nrows().max(1) as f64;
        let probs = logq.mapv(f64::exp);
        let rg = self.rg(&[logits]);
        self.push(
            Array2::from_elem((1, 1), total / rows).into(),
            Op::KlFromReference {
                logits,
                reference,
                probs,
            },
            rg,
        )
    }

    /// Gradient of the last `backward` root with respect to `id`, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a `1 x 1` root.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let nodes = &self.nodes;
            let want = |id: NodeId| nodes[id.0].requires_grad;
            let val = |id: NodeId| nodes[id.0].value.view();
            match &nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if want(*a) {
                        Self::acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if want(*b) {
                        Self::acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if want(*a) {
                        Self::acc(&mut grads, *a, g.dot(&val(*b)));
                    }
                    if want(*b) {
                        Self::acc(&mut grads, *b, g.t().dot(&val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        Self::acc(&mut grads, *a, g.clone());
                    }
                    if want(*b) {
                        Self::acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        Self::acc(&mut grads, *a, g.clone());
                    }
                    if want(*b) {
                        Self::acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        Self::acc(&mut grads, *a, &g * &val(*b));
                    }
                    if want(*b) {
                        Self::acc(&mut grads, *b, &g * &val(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if want(*row) {
                        Self::acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if want(*a) {
                        Self::acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    Self::acc(&mut grads, *a, g.mapv(|v| v * k));
                }
                Op::AddScalar(a) => Self::acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&val(*a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    Self::acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&val(*a))
                        .for_each(|gi, &x| *gi *= gelu_grad(x));
                    Self::acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&nodes[idx].value)
                        .for_each(|gi, &y| *gi *= y * (1.0 - y));
                    Self::acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if want(*bias) {
                        Self::acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if want(*gain) {
                        Self::acc(
                            &mut grads,
                            *gain,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if want(*x) {
                        let gy = &g * &val(*gain);
                        let n = gy.ncols() as f64;
                        let mut gx = Array2::zeros(gy.dim());
                        for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                            let gr = gy.row(i);
                            let xr = xhat.row(i);
                            let mean_g = gr.sum() / n;
                            let mean_gx = gr.dot(&xr) / n;
                            Zip::from(&mut row).and(&gr).and(&xr).for_each(|o, &gv, &xh| {
                                *o = inv_std[i] * (gv - mean_g - xh * mean_gx);
                            });
                        }
                        Self::acc(&mut grads, *x, gx);
                    }
                }
                Op::Softmax { x } => {
                    let y = &nodes[idx].value;
                    let gy = &g * y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = &gy - &(y * &dots);
                    Self::acc(&mut grads, *x, gx);
                }
                Op::Mask(x) => Self::acc(&mut grads, *x, g),
                Op::Gather { table, ids } => {
                    let mut gt = Array2::zeros(val(*table).dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut r = gt.row_mut(id);
                        r += &g.row(i);
                    }
                    Self::acc(&mut grads, *table, gt);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(val(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    Self::acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if want(*p) {
                            Self::acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::RowDot(a, b) => {
                    if want(*a) {
                        Self::acc(&mut grads, *a, &val(*b) * &g);
                    }
                    if want(*b) {
                        Self::acc(&mut grads, *b, &val(*a) * &g);
                    }
                }
                Op::MulCol(a, col) => {
                    if want(*a) {
                        Self::acc(&mut grads, *a, &g * &val(*col));
                    }
                    if want(*col) {
                        let gc = (&g * &val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        Self::acc(&mut grads, *col, gc);
                    }
                }
                Op::MaskedMean { x, mask } => {
                    let count = mask.iter().filter(|m| **m).count().max(1) as f64;
                    let gv = g[[0, 0]] / count;
                    let gx = Array2::from_shape_fn(val(*x).dim(), |(i, _)| {
                        if mask[i] {
                            gv
                        } else {
                            0.0
                        }
                    });
                    Self::acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let d = val(*x).dim();
                    let gv = g[[0, 0]] / (d.0 * d.1) as f64;
                    Self::acc(&mut grads, *x, Array2::from_elem(d, gv));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let scale = g[[0, 0]] / *count as f64;
                    let mut gl = Array2::zeros(probs.dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let mut row = gl.row_mut(i);
                            row.assign(&probs.row(i));
                            row[*t] -= 1.0;
                            row.mapv_inplace(|v| v * scale);
                        }
                    }
                    Self::acc(&mut grads, *logits, gl);
                }
                Op::KlFromReference {
                    logits,
                    reference,
                    probs,
                } => {
                    // d/dz Σ p (log p − log softmax z) = softmax(z) − p
                    let scale = g[[0, 0]] / probs.nrows().max(1) as f64;
                    let p = reference.mapv(f64::exp);
                    let gl = (probs - &p).mapv(|v| v * scale);
                    Self::acc(&mut grads, *logits, gl);
                }
            }
        }
        self.grads = grads;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        base: &Array2<f64>,
        f: impl Fn(&Array2<f64>) -> f64,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(base.dim());
        for idx in ndarray::indices(base.dim()) {
            let mut p = base.clone();
            p[idx] += h;
            let up = f(&p);
            p[idx] -= 2.0 * h;
            let down = f(&p);
            g[idx] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_layer_norm_softmax_chain_matches_finite_differences() {
        let w = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]];
        let x = array![[1.0, 2.0], [-0.5, 0.7], [0.2, 0.1]];
        let gain = array![[1.1, 0.9, 1.3]];
        let bias = array![[0.0, 0.1, -0.2]];
        let f = |w: &Array2<f64>| {
            let mut g = Graph::new();
            let xn = g.param(&x, false);
            let wn = g.param(w, true);
            let gn = g.param(&gain, false);
            let bn = g.param(&bias, false);
            let h = g.matmul(xn, wn);
            let h = g.layer_norm(h, gn, bn, 1e-5);
            let h = g.gelu(h);
            let p = g.softmax(h);
            let col = g.slice_cols(p, 1, 1);
            let m = g.mean(col);
            g.scalar(m)
        };
        let mut g = Graph::new();
        let xn = g.param(&x, false);
        let wn = g.param(&w, true);
        let gn = g.param(&gain, false);
        let bn = g.param(&bias, false);
        let h = g.matmul(xn, wn);
        let h = g.layer_norm(h, gn, bn, 1e-5);
        let h = g.gelu(h);
        let p = g.softmax(h);
        let col = g.slice_cols(p, 1, 1);
        let m = g.mean(col);
        g.backward(m);
        let analytic = g.grad(wn).unwrap().clone();
        assert_close(&analytic, &numeric_grad(&w, f, 1e-6), 1e-5);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let logits = Array2::zeros((3, 64));
        let mut g = Graph::new();
        let l = g.param(&logits, true);
        let ce = g.cross_entropy(l, &[Some(1), Some(5), None]);
        assert!((g.scalar(ce) - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let reference = log_softmax_rows(array![[0.2, -0.1, 0.4], [1.0, 0.0, -1.0]].view());
        let z = array![[0.0, 0.3, -0.2], [0.5, 0.5, 0.1]];
        let f = |z: &Array2<f64>| {
            let mut g = Graph::new();
            let n = g.param(z, true);
            let k = g.kl_from_reference(n, reference.clone());
            g.scalar(k)
        };
        let mut g = Graph::new();
        let n = g.param(&z, true);
        let k = g.kl_from_reference(n, reference.clone());
        g.backward(k);
        assert_close(g.grad(n).unwrap(), &numeric_grad(&z, f, 1e-6), 1e-5);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let x = array![[0.5, 2.0, -1.0], [0.1, 0.2, 0.3]];
        let mask = array![[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY], [0.0, 0.0, 0.0]];
        let mut g = Graph::new();
        let n = g.param(&x, false);
        let m = g.mask(n, &mask);
        let p = g.softmax(m);
        let v = g.value(p);
        assert_eq!(v[[0, 0]], 1.0);
        assert!((v.row(1).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0], [4.0]];
        let mut g = Graph::new();
        let an = g.param(&a, false);
        let bn = g.param(&b, true);
        let y = g.matmul(an, bn);
        g.backward(y);
        assert!(g.grad(an).is_none());
        assert_eq!(g.grad(bn).unwrap(), &array![[1.0], [2.0]]);
    }
}
