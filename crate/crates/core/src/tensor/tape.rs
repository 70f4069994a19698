use super::{ensure_finite, kernels, ops::mask_flags, ParamId, ParamSet, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
        deriv: Vec<f64>,
    },
    Tanh {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation for reverse-mode differentiation.
///
/// Parameters are borrowed, not copied; the tape is meant to live for a
/// single forward/backward pass.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to any recorded value.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        let c = s.last().copied().unwrap_or(1);
        let n: usize = s.iter().product();
        (if c == 0 { 0 } else { n / c }, c)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shape")
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        ensure_finite(op_name, &data)?;
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant or differentiable input. Gradients flow to it only
    /// when `tensor.requires_grad()` is set.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(tensor.into_data()),
            op: Op::Input,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, needs)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul_nt", vec![m, n], out, Op::MatMulNt { a, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a, b }, needs)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rows_cols(x);
        if self.value(bias).len() != c {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, out, Op::AddRow { x, bias }, needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, factor }, needs)
    }

    /// Columns `start .. start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if start + width > c {
            return Err(shape_err("slice_cols", self.shape(x), &[start, width]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for row in 0..r {
            out.extend_from_slice(&src[row * c + start..row * c + start + width]);
        }
        let needs = self.needs(x);
        self.push(
            "slice_cols",
            vec![r, width],
            out,
            Op::SliceCols { x, start },
            needs,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.rows_cols(p).0).unwrap_or(0);
        if let Some(&bad) = parts.iter().find(|&&p| self.rows_cols(p).0 != rows) {
            return Err(shape_err(
                "concat_cols",
                self.shape(parts[0]),
                self.shape(bad),
            ));
        }
        let total: usize = parts.iter().map(|&p| self.rows_cols(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.rows_cols(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_cols",
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.rows_cols(p).1).unwrap_or(0);
        if let Some(&bad) = parts.iter().find(|&&p| self.rows_cols(p).1 != cols) {
            return Err(shape_err(
                "concat_rows",
                self.shape(parts[0]),
                self.shape(bad),
            ));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols.max(1);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_rows",
            vec![rows, cols],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(table);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Vocabulary(format!(
                "row {bad} out of range for table of {r} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.needs(table);
        self.push(
            "gather_rows",
            vec![index.len(), c],
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            needs,
        )
    }

    /// `softmax(x + mask)` row-wise; `mask` holds 0 / -inf entries.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if self.shape(x) != mask.shape() || self.shape(x).len() != 2 {
            return Err(shape_err("masked_softmax", self.shape(x), mask.shape()));
        }
        let flags = mask_flags(mask)?;
        self.masked_softmax_flags(x, &flags)
    }

    pub(crate) fn masked_softmax_flags(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (r, c) = self.rows_cols(x);
        if allowed.len() != r * c {
            return Err(shape_err("masked_softmax", self.shape(x), &[allowed.len()]));
        }
        let out = kernels::masked_softmax_rows(self.value(x), allowed, r, c)?;
        let needs = self.needs(x);
        self.push(
            "masked_softmax",
            vec![r, c],
            out,
            Op::MaskedSoftmax { x },
            needs,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.rows_cols(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, xhat, rstd) =
            kernels::layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (out, deriv): (Vec<f64>, Vec<f64>) =
            self.value(x).iter().map(|&v| kernels::gelu(v)).unzip();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu { x, deriv }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push("tanh", shape, out, Op::Tanh { x }, needs)
    }

    /// Mean cross-entropy over rows whose target is not `ignore`; a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (r, c) = self.rows_cols(logits);
        if r != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let (loss, probs, count) =
            kernels::cross_entropy_rows(self.value(logits), targets, ignore, c)?;
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push("sum", Vec::new(), vec![s], Op::Sum { x }, needs)
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        let d = self.value(v);
        (d.len() == 1).then(|| d[0])
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backpropagates `weight · loss`; used to assemble weighted objectives
    /// from several independent tapes.
    pub fn backward_scaled(&self, loss: Var, weight: f64) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![weight]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }

        let mut params: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if self.nodes[v.0].needs_grad {
                    params[pid] = Some(
                        grads[v.0]
                            .clone()
                            .unwrap_or_else(|| vec![0.0; self.value(*v).len()]),
                    );
                }
            }
        }
        for p in params.iter().flatten() {
            ensure_finite("backward", p)?;
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                if let Some(ga) = self.buf(grads, *a) {
                    kernels::matmul_nt_acc(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).0;
                if let Some(ga) = self.buf(grads, *a) {
                    kernels::matmul_acc(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    kernels::matmul_tn_acc(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.buf(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let c = self.value(*bias).len();
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.rows_cols(*x);
                let w = node.shape[1];
                if let Some(gx) = self.buf(grads, *x) {
                    for row in 0..r {
                        let dst = &mut gx[row * c + start..row * c + start + w];
                        dst.iter_mut()
                            .zip(&g[row * w..(row + 1) * w])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.rows_cols(p).1;
                    if let Some(gp) = self.buf(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.buf(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, index } => {
                let c = self.rows_cols(*table).1;
                if let Some(gt) = self.buf(grads, *table) {
                    for (i, &row) in index.iter().enumerate() {
                        gt[row * c..(row + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let y = match &node.value {
                    Value::Owned(d) => d,
                    Value::Param(_) => unreachable!(),
                };
                let c = node.shape[1];
                if let Some(gx) = self.buf(grads, *x) {
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gamma = self.value(*gain);
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gamma[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gamma[c];
                            gx[r * d + c] += rs * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.buf(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *bias) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Gelu { x, deriv } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, d), gi) in gx.iter_mut().zip(deriv).zip(g) {
                        *o += d * gi;
                    }
                }
            }
            Op::Tanh { x } => {
                let y = match &node.value {
                    Value::Owned(d) => d,
                    Value::Param(_) => unreachable!(),
                };
                if let Some(gx) = self.buf(grads, *x) {
                    for ((o, yi), gi) in gx.iter_mut().zip(y).zip(g) {
                        *o += (1.0 - yi * yi) * gi;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let c = self.rows_cols(*logits).1;
                let scale = g[0] / *count as f64;
                if let Some(gl) = self.buf(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.buf(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central-difference check of every parameter entry of `f`.
    fn check(params: &ParamSet, f: impl Fn(&mut Tape) -> Result<Var>) {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for id in params.ids() {
            let analytic = grads
                .param(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; params.get(id).numel()]);
            for i in 0..params.get(id).numel() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.get_mut(id).data_mut()[i] += delta;
                    let mut t = Tape::new(&p);
                    let l = f(&mut t).unwrap();
                    t.scalar(l).unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{} [{i}]: analytic {a} numeric {numeric}",
                    params.name(id)
                );
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::zeros(&[2, 3]).with_requires_grad());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut params = ParamSet::new();
        let used = params.add("used", Tensor::filled(&[2], 1.0).with_requires_grad());
        let unused = params.add("unused", Tensor::filled(&[3], 1.0).with_requires_grad());
        let mut tape = Tape::new(&params);
        let u = tape.param(used);
        tape.param(unused);
        let s = tape.sum(u).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::filled(&[1, 1], 3.0).with_requires_grad());
        let mut tape = Tape::new(&params);
        let a = tape.param(w);
        let b = tape.param(w);
        let y = tape.matmul(a, b).unwrap(); // w²
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(w).unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = ParamSet::new();
        let a = params.add("a", random(&mut rng, &[3, 4]).with_requires_grad());
        let b = params.add("b", random(&mut rng, &[4, 2]).with_requires_grad());
        let c = params.add("c", random(&mut rng, &[5, 2]).with_requires_grad());
        let w = random(&mut rng, &[3, 5]);
        check(&params, |t| {
            let (a, b, c) = (t.param(a), t.param(b), t.param(c));
            let ab = t.matmul(a, b)?;
            let abc = t.matmul_nt(ab, c)?;
            let wv = t.input(w.clone());
            let prod = t.add(abc, wv)?;
            let sq = t.matmul_nt(prod, prod)?;
            t.sum(sq)
        });
    }

    #[test]
    fn softmax_layernorm_gelu_tanh_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let x = params.add("x", random(&mut rng, &[3, 3]).with_requires_grad());
        let gain = params.add("gain", random(&mut rng, &[3]).with_requires_grad());
        let bias = params.add("bias", random(&mut rng, &[3]).with_requires_grad());
        let proj = random(&mut rng, &[3, 3]);
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::new(
            vec![3, 3],
            vec![0.0, ninf, ninf, 0.0, 0.0, ninf, 0.0, 0.0, 0.0],
        )
        .unwrap();
        check(&params, |t| {
            let x = t.param(x);
            let (g, b) = (t.param(gain), t.param(bias));
            let p = t.masked_softmax(x, &mask)?;
            let n = t.layer_norm(p, g, b, 1e-5)?;
            let a = t.gelu(n)?;
            let th = t.tanh(a)?;
            let pr = t.input(proj.clone());
            let y = t.matmul(th, pr)?;
            let y = t.add_row(y, b)?;
            t.cross_entropy(y, &[2, 0, 1], None)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ParamSet::new();
        let table = params.add("table", random(&mut rng, &[5, 4]).with_requires_grad());
        let other = params.add("other", random(&mut rng, &[2, 4]).with_requires_grad());
        check(&params, |t| {
            let tb = t.param(table);
            let o = t.param(other);
            let g = t.gather_rows(tb, &[3, 1, 3])?;
            let left = t.slice_cols(g, 0, 2)?;
            let right = t.slice_cols(g, 2, 2)?;
            let swapped = t.concat_cols(&[right, left])?;
            let stacked = t.concat_rows(&[swapped, o])?;
            let sc = t.scale(stacked, 0.7)?;
            let sq = t.matmul_nt(sc, sc)?;
            let th = t.tanh(sq)?;
            t.cross_entropy(th, &[0, 1, 2, 3, 4], Some(2))
        });
    }

    #[test]
    fn masked_entries_receive_exact_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(random(&mut rng, &[2, 2]).with_requires_grad());
        let mask = Tensor::new(vec![2, 2], vec![0.0, f64::NEG_INFINITY, 0.0, 0.0]).unwrap();
        let p = tape.masked_softmax(x, &mask).unwrap();
        let w = tape.input(random(&mut rng, &[2, 2]));
        let y = tape.matmul(p, w).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap()[1], 0.0);
    }
}
