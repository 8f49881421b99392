use super::array::gemm;
use super::{DenseArray, DiffError};

/// Guard for the std-aggregation gradient denominator.
pub const STD_GRAD_EPS: f64 = 1e-8;
/// Guard for the complex-pair modulus in rotations.
pub const ROTATE_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Mul,
    Add,
    Sub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Relu,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Min,
    Std,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Elementwise {
        kind: ElementwiseKind,
        a: Var,
        b: Var,
    },
    Activation {
        kind: ActivationKind,
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SegmentReduce {
        kind: ReduceKind,
        x: Var,
        ids: Vec<usize>,
        counts: Vec<usize>,
        // max/min: winning row per output cell; std: per-cell segment mean
        aux: Vec<f64>,
        arg: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    ScaleShift {
        x: Var,
        scale: f64,
    },
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Rotate {
        h: Var,
        w: Var,
    },
}

struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

/// Straight-line record of array operations supporting one reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by the recorded [`Var`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&DenseArray> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<DenseArray> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, var: Var) -> &DenseArray {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: DenseArray, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::dimension("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let value = DenseArray::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Pointwise op; `b` either matches `a` or equals a trailing suffix of `a`'s shape.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(DiffError::dimension("elementwise", sa, sb));
        }
        let bl = vb.len();
        let bd = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % bl];
                match kind {
                    ElementwiseKind::Mul => x * y,
                    ElementwiseKind::Add => x + y,
                    ElementwiseKind::Sub => x - y,
                }
            })
            .collect();
        let value = DenseArray::new(sa.to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Elementwise { kind, a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(ElementwiseKind::Sub, a, b)
    }

    pub fn activation(&mut self, kind: ActivationKind, x: Var) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let data: Vec<f64> = match kind {
            ActivationKind::Sigmoid => vx.data().iter().map(|&v| sigmoid(v)).collect(),
            ActivationKind::Relu => vx.data().iter().map(|&v| v.max(0.0)).collect(),
            ActivationKind::Log => {
                if let Some(bad) = vx.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(DiffError::Domain(format!("log of non-positive value {bad}")));
                }
                vx.data().iter().map(|v| v.ln()).collect()
            }
        };
        let value = DenseArray::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Activation { kind, x }, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.activation(ActivationKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.activation(ActivationKind::Relu, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.activation(ActivationKind::Log, x)
    }

    /// Row-wise layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let d = vx.cols();
        let (sg, sb) = (self.value(gain).shape(), self.value(bias).shape());
        if sg != [d] || sb != [d] {
            return Err(DiffError::dimension("layer_norm", vx.shape(), sg));
        }
        if eps <= 0.0 {
            return Err(DiffError::Domain(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = vx.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = DenseArray::new(vx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// Reduces rows of `x` into `num_segments` output rows keyed by `segment_ids`.
    ///
    /// Empty segments yield zero rows. Max and min route gradient to the first
    /// attaining row; std uses the population definition.
    pub fn segment_reduce(
        &mut self,
        kind: ReduceKind,
        x: Var,
        segment_ids: &[usize],
        num_segments: usize,
    ) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let d = vx.cols();
        let rows = vx.rows();
        if segment_ids.len() != rows {
            return Err(DiffError::Shape(format!(
                "segment_reduce: {} ids for {rows} rows",
                segment_ids.len()
            )));
        }
        if let Some((pos, &id)) = segment_ids.iter().enumerate().find(|(_, &s)| s >= num_segments) {
            return Err(DiffError::Index(format!(
                "segment id {id} at position {pos} out of range for {num_segments} segments"
            )));
        }
        let xd = vx.data();
        let mut counts = vec![0usize; num_segments];
        for &s in segment_ids {
            counts[s] += 1;
        }
        let mut out = vec![0.0; num_segments * d];
        let mut aux = Vec::new();
        let mut arg = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean | ReduceKind::Std => {
                for (e, &s) in segment_ids.iter().enumerate() {
                    let src = &xd[e * d..(e + 1) * d];
                    let dst = &mut out[s * d..(s + 1) * d];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
                if kind != ReduceKind::Sum {
                    for (s, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            out[s * d..(s + 1) * d].iter_mut().for_each(|v| *v /= c as f64);
                        }
                    }
                }
                if kind == ReduceKind::Std {
                    let means = std::mem::replace(&mut out, vec![0.0; num_segments * d]);
                    for (e, &s) in segment_ids.iter().enumerate() {
                        for j in 0..d {
                            let diff = xd[e * d + j] - means[s * d + j];
                            out[s * d + j] += diff * diff;
                        }
                    }
                    for (s, &c) in counts.iter().enumerate() {
                        for v in &mut out[s * d..(s + 1) * d] {
                            *v = if c > 0 { (*v / c as f64).sqrt() } else { 0.0 };
                        }
                    }
                    aux = means;
                }
            }
            ReduceKind::Max | ReduceKind::Min => {
                arg = vec![usize::MAX; num_segments * d];
                for (e, &s) in segment_ids.iter().enumerate() {
                    for j in 0..d {
                        let v = xd[e * d + j];
                        let cell = s * d + j;
                        let better = arg[cell] == usize::MAX
                            || match kind {
                                ReduceKind::Max => v > out[cell],
                                _ => v < out[cell],
                            };
                        if better {
                            out[cell] = v;
                            arg[cell] = e;
                        }
                    }
                }
            }
        }
        let value = DenseArray::new(vec![num_segments, d], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::SegmentReduce {
                kind,
                x,
                ids: segment_ids.to_vec(),
                counts,
                aux,
                arg,
            },
            ng,
        ))
    }

    /// Selects rows of `x` (last axis as columns) by index, producing `[index.len() × cols]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(DiffError::Index(format!("gather index {bad} out of range for {rows} rows")));
        }
        if index.is_empty() {
            return Err(DiffError::Shape("gather with empty index".into()));
        }
        let xd = vx.data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let value = DenseArray::new(vec![index.len(), c], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Concatenates 2-D inputs with equal row counts along the column axis.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var, DiffError> {
        let first = inputs
            .first()
            .ok_or_else(|| DiffError::Shape("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let widths: Vec<usize> = inputs.iter().map(|&v| self.value(v).cols()).collect();
        for &v in inputs {
            if self.value(v).rows() != rows {
                return Err(DiffError::dimension(
                    "concat",
                    self.value(*first).shape(),
                    self.value(v).shape(),
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let value = DenseArray::new(vec![rows, total], out)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 2 {
            return Err(DiffError::Shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xd = vx.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let value = DenseArray::new(vec![n, m], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Transpose { x }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = DenseArray::scalar(self.value(x).sum());
        let ng = self.ng(x);
        Ok(self.push(value, Op::Sum { x }, ng))
    }

    /// Square root with a zero subgradient at exactly zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var, DiffError> {
        let vx = self.value(x);
        if let Some(bad) = vx.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(DiffError::Domain(format!("sqrt of negative value {bad}")));
        }
        let value = DenseArray::new(vx.shape().to_vec(), vx.data().iter().map(|v| v.sqrt()).collect())?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Sqrt { x }, ng))
    }

    /// `scale * x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let value = DenseArray::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| scale * v + shift).collect(),
        )?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::ScaleShift { x, scale }, ng))
    }

    /// Multiplies each row of `x` by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let c = vx.cols();
        if factors.len() != vx.rows() {
            return Err(DiffError::Shape(format!(
                "scale_rows: {} factors for {} rows",
                factors.len(),
                vx.rows()
            )));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / c])
            .collect();
        let value = DenseArray::new(vx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            ng,
        ))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let value = DenseArray::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        )?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Clamp { x, lo, hi }, ng))
    }

    /// Rotates consecutive pairs of `h` (as complex numbers) by the unit-modulus
    /// normalization of the matching pairs of `w`.
    pub fn rotate(&mut self, h: Var, w: Var) -> Result<Var, DiffError> {
        let (vh, vw) = (self.value(h), self.value(w));
        if vh.shape() != vw.shape() {
            return Err(DiffError::dimension("rotate", vh.shape(), vw.shape()));
        }
        if vh.cols() % 2 != 0 {
            return Err(DiffError::Shape(format!(
                "rotate needs an even last axis, got {:?}",
                vh.shape()
            )));
        }
        let (hd, wd) = (vh.data(), vw.data());
        let mut out = vec![0.0; hd.len()];
        for k in (0..hd.len()).step_by(2) {
            let (a, b) = (hd[k], hd[k + 1]);
            let (c, e) = (wd[k], wd[k + 1]);
            let n = (c * c + e * e).sqrt().max(ROTATE_EPS);
            let (u0, u1) = (c / n, e / n);
            out[k] = a * u0 - b * u1;
            out[k + 1] = a * u1 + b * u0;
        }
        let value = DenseArray::new(vh.shape().to_vec(), out)?;
        let ng = self.ng(h) || self.ng(w);
        Ok(self.push(value, Op::Rotate { h, w }, ng))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, DiffError> {
        if self.consumed {
            return Err(DiffError::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut kept: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                kept[i] = Some(DenseArray::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: kept })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n as isize, 1), self.value(*b).data(), (1, n as isize), 0.0, &mut ga);
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), (1, k as isize), g, (n as isize, 1), 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Elementwise { kind, a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let bl = vb.len();
                if self.ng(*a) {
                    let ga = match kind {
                        ElementwiseKind::Mul => g.iter().enumerate().map(|(j, gv)| gv * vb[j % bl]).collect(),
                        _ => g.to_vec(),
                    };
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; bl];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % bl] += match kind {
                            ElementwiseKind::Mul => gv * va[j],
                            ElementwiseKind::Add => *gv,
                            ElementwiseKind::Sub => -gv,
                        };
                    }
                    acc(*b, gb);
                }
            }
            Op::Activation { kind, x } => {
                let vx = self.value(*x).data();
                let out = node.value.data();
                let gx = match kind {
                    ActivationKind::Sigmoid => g
                        .iter()
                        .zip(out)
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect(),
                    ActivationKind::Relu => g
                        .iter()
                        .zip(vx)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    ActivationKind::Log => g.iter().zip(vx).map(|(gv, x)| gv / x).collect(),
                };
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gd = self.value(*gain).data();
                if self.ng(*x) {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let dxh: Vec<f64> = (0..d).map(|j| g[r * d + j] * gd[j]).collect();
                        let xh = &normalized[r * d..(r + 1) * d];
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = scale * (d as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    acc(*x, gx);
                }
                if self.ng(*gain) {
                    let mut gg = vec![0.0; d];
                    for (j, (gv, xh)) in g.iter().zip(normalized).enumerate() {
                        gg[j % d] += gv * xh;
                    }
                    acc(*gain, gg);
                }
                if self.ng(*bias) {
                    let mut gb = vec![0.0; d];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % d] += gv;
                    }
                    acc(*bias, gb);
                }
            }
            Op::SegmentReduce {
                kind,
                x,
                ids,
                counts,
                aux,
                arg,
            } => {
                let d = node.value.cols();
                let xd = self.value(*x).data();
                let mut gx = vec![0.0; xd.len()];
                match kind {
                    ReduceKind::Sum => {
                        for (e, &s) in ids.iter().enumerate() {
                            gx[e * d..(e + 1) * d].copy_from_slice(&g[s * d..(s + 1) * d]);
                        }
                    }
                    ReduceKind::Mean => {
                        for (e, &s) in ids.iter().enumerate() {
                            let c = counts[s] as f64;
                            for j in 0..d {
                                gx[e * d + j] = g[s * d + j] / c;
                            }
                        }
                    }
                    ReduceKind::Max | ReduceKind::Min => {
                        for (cell, &e) in arg.iter().enumerate() {
                            if e != usize::MAX {
                                gx[e * d + cell % d] += g[cell];
                            }
                        }
                    }
                    ReduceKind::Std => {
                        let std = node.value.data();
                        for (e, &s) in ids.iter().enumerate() {
                            let c = counts[s] as f64;
                            for j in 0..d {
                                let cell = s * d + j;
                                let denom = c * std[cell].max(STD_GRAD_EPS);
                                gx[e * d + j] = g[cell] * (xd[e * d + j] - aux[cell]) / denom;
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, index } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut gx = vec![0.0; vx.len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[r * c + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Concat { inputs } => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &v in inputs {
                    let w = self.value(v).cols();
                    if self.ng(v) {
                        let mut gv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(v, gv);
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Transpose { x } => {
                let s = self.value(*x).shape();
                let (m, n) = (s[0], s[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                acc(*x, gx);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Sqrt { x } => {
                let out = node.value.data();
                let gx = g
                    .iter()
                    .zip(out)
                    .map(|(gv, y)| if *y > 0.0 { gv * 0.5 / y } else { 0.0 })
                    .collect();
                acc(*x, gx);
            }
            Op::ScaleShift { x, scale } => acc(*x, g.iter().map(|gv| gv * scale).collect()),
            Op::ScaleRows { x, factors } => {
                let c = node.value.cols();
                acc(*x, g.iter().enumerate().map(|(i, gv)| gv * factors[i / c]).collect());
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(gv, v)| if *v >= *lo && *v <= *hi { *gv } else { 0.0 })
                    .collect();
                acc(*x, gx);
            }
            Op::Rotate { h, w } => {
                let (hd, wd) = (self.value(*h).data(), self.value(*w).data());
                let mut gh = vec![0.0; hd.len()];
                let mut gw = vec![0.0; wd.len()];
                for k in (0..hd.len()).step_by(2) {
                    let (a, b) = (hd[k], hd[k + 1]);
                    let (c, e) = (wd[k], wd[k + 1]);
                    let raw = (c * c + e * e).sqrt();
                    let n = raw.max(ROTATE_EPS);
                    let (u0, u1) = (c / n, e / n);
                    let (p, q) = (g[k], g[k + 1]);
                    gh[k] = p * u0 + q * u1;
                    gh[k + 1] = -p * u1 + q * u0;
                    let gu0 = p * a + q * b;
                    let gu1 = -p * b + q * a;
                    if raw > ROTATE_EPS {
                        let dot = u0 * gu0 + u1 * gu1;
                        gw[k] = (gu0 - u0 * dot) / n;
                        gw[k + 1] = (gu1 - u1 * dot) / n;
                    } else {
                        gw[k] = gu0 / n;
                        gw[k + 1] = gu1 / n;
                    }
                }
                acc(*h, gh);
                acc(*w, gw);
            }
        }
    }
}
