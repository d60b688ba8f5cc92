use std::borrow::Cow;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow {
        x: Var,
        b: Var,
    },
    MulRow {
        x: Var,
        s: Var,
    },
    Silu(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    ScaleByElem {
        x: Var,
        g: Var,
        idx: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    Sum(Var),
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        n_heads: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Silu(..) => "silu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Softmax { .. } => "softmax_rows",
            Op::ScaleByElem { .. } => "scale_by_elem",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy_masked",
            Op::Sum(..) => "sum",
            Op::Rope { .. } => "rope",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Silu(x) | Op::Sum(x) => vec![*x],
            Op::AddRow { x, b } => vec![*x, *b],
            Op::MulRow { x, s } => vec![*x, *s],
            Op::RmsNorm { x, w, .. } => vec![*x, *w],
            Op::Softmax { x, .. } | Op::Slice { x, .. } | Op::Rope { x, .. } => vec![*x],
            Op::ScaleByElem { x, g, .. } => vec![*x, *g],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Wengert tape: values are computed eagerly as operations are recorded;
/// [`Tape::backward`] walks the record in reverse.
///
/// Leaves bound from parameter tensors borrow their storage for `'w` when no
/// precision conversion is needed, so binding frozen weights is free.
pub struct Tape<'w, T: Real = f32> {
    values: Vec<Cow<'w, [T]>>,
    shapes: Vec<Vec<usize>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    needs_grad: &[bool],
    len: usize,
    v: Var,
) -> Option<&'a mut [T]> {
    if !needs_grad[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

impl<'w, T: Real> Tape<'w, T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            shapes: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Cow<'w, [T]>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !matches!(op, Op::Leaf) && value.iter().any(|x| !x.is_finite())
        {
            let inputs_finite = inputs
                .iter()
                .all(|v| self.values[v.0].iter().all(|x| x.is_finite()));
            assert!(
                !inputs_finite,
                "{} produced a non-finite value from finite inputs",
                op.name()
            );
        }
        let needs = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.needs_grad[v.0]),
        };
        self.values.push(value);
        self.shapes.push(shape);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    fn push_owned(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), shape, op)
    }

    /// Record an owned leaf value.
    pub fn leaf(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>, requires_grad: bool) -> Var {
        let shape = shape.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data does not match shape {shape:?}"
        );
        let v = self.push_owned(data, shape, Op::Leaf);
        self.needs_grad[v.0] = requires_grad;
        v
    }

    /// Bind a parameter tensor, honouring its `requires_grad` flag.
    pub fn param(&mut self, t: &'w Tensor) -> Var {
        self.bind(t, t.requires_grad())
    }

    /// Bind a tensor as a leaf with an explicit gradient flag.
    pub fn bind(&mut self, t: &'w Tensor, requires_grad: bool) -> Var {
        let v = self.push(T::lift(t.data()), t.shape().to_vec(), Op::Leaf);
        self.needs_grad[v.0] = requires_grad;
        v
    }

    /// A constant leaf from `f32` data.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: &[f32]) -> Var {
        let data = data.iter().map(|&x| T::from_f32(x)).collect();
        self.leaf(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    /// Mutable access to a recorded value. Only meaningful for leaves that
    /// have not been consumed yet (e.g. to perturb an input before use).
    pub fn value_mut(&mut self, v: Var) -> &mut [T] {
        self.values[v.0].to_mut()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Scalar value of a one-element var.
    pub fn scalar(&self, v: Var) -> T {
        assert_eq!(self.values[v.0].len(), 1, "scalar() on a non-scalar var");
        self.values[v.0][0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shapes[v.0].as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    /// Matrix product of `a` [m×k] and `b` [k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shapes[a.0], &self.shapes[b.0]));
        }
        let mut out = vec![T::zero(); m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.values[a.0].as_ptr(),
                k as isize,
                1,
                self.values[b.0].as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(self.push_owned(
            out,
            vec![m, n],
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: false,
            },
        ))
    }

    /// `a` [m×k] times the transpose of `b` [n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shapes[a.0], &self.shapes[b.0]));
        }
        let mut out = vec![T::zero(); m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.values[a.0].as_ptr(),
                k as isize,
                1,
                self.values[b.0].as_ptr(),
                1,
                k as isize,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(self.push_owned(
            out,
            vec![m, n],
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: true,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::shape(op, &self.shapes[a.0], &self.shapes[b.0]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push_owned(out, self.shapes[a.0].clone(), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.values[a.0]
            .iter()
            .zip(self.values[b.0].iter())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push_owned(out, self.shapes[a.0].clone(), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.values[x.0].iter().map(|&v| v * c).collect();
        self.push_owned(out, self.shapes[x.0].clone(), Op::Scale(x, c))
    }

    fn row_operand(&self, x: Var, r: Var, op: &'static str) -> Result<usize> {
        let d = *self.shapes[x.0].last().unwrap_or(&1);
        if self.shapes[x.0].is_empty() || self.values[r.0].len() != d {
            return Err(Error::shape(op, &self.shapes[x.0], &self.shapes[r.0]));
        }
        Ok(d)
    }

    /// `x[..., j] + b[j]`: explicit per-channel broadcast over leading dims.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_operand(x, b, "add_row")?;
        let bv = &self.values[b.0];
        let out = self.values[x.0]
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(bv.iter()).map(|(&v, &c)| v + c))
            .collect();
        Ok(self.push_owned(out, self.shapes[x.0].clone(), Op::AddRow { x, b }))
    }

    /// `x[..., j] * s[j]`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.row_operand(x, s, "mul_row")?;
        let sv = &self.values[s.0];
        let out = self.values[x.0]
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(sv.iter()).map(|(&v, &c)| v * c))
            .collect();
        Ok(self.push_owned(out, self.shapes[x.0].clone(), Op::MulRow { x, s }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.values[x.0]
            .iter()
            .map(|&v| v / (T::one() + (-v).exp()))
            .collect();
        self.push_owned(out, self.shapes[x.0].clone(), Op::Silu(x))
    }

    /// Root-mean-square normalisation of every trailing row, times `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let d = self.row_operand(x, w, "rms_norm")?;
        let eps = T::from_f64(eps);
        let dt = T::from_f64(d as f64);
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks_exact(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dt;
            let r = (ms + eps).sqrt().recip();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv.iter()).map(|(&v, &g)| v * r * g));
        }
        Ok(self.push_owned(out, self.shapes[x.0].clone(), Op::RmsNorm { x, w, inv_rms }))
    }

    fn softmax_impl(&mut self, x: Var, causal: Option<usize>) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax_rows", &shape, &[]))?;
        let xv = &self.values[x.0];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (row, o)) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let width = match causal {
                Some(offset) => (i + offset + 1).min(n),
                None => n,
            };
            let row = &row[..width];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (dst, &v) in o[..width].iter_mut().zip(row) {
                *dst = (v - max).exp();
                total += *dst;
            }
            for dst in &mut o[..width] {
                *dst = *dst / total;
            }
        }
        Ok(self.push_owned(out, shape, Op::Softmax { x }))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i + offset`;
    /// masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var, offset: usize) -> Result<Var> {
        self.softmax_impl(x, Some(offset))
    }

    /// Multiply every entry of `x` by the single element `g[idx]`.
    pub fn scale_by_elem(&mut self, x: Var, g: Var, idx: usize) -> Result<Var> {
        if idx >= self.values[g.0].len() {
            return Err(Error::shape("scale_by_elem", &self.shapes[g.0], &[idx]));
        }
        let c = self.values[g.0][idx];
        let out = self.values[x.0].iter().map(|&v| v * c).collect();
        Ok(self.push_owned(out, self.shapes[x.0].clone(), Op::ScaleByElem { x, g, idx }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let base = self.shapes[first.0].clone();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = &self.shapes[v.0];
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                let chunk = sz * inner;
                out.extend_from_slice(&self.values[v.0][o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_owned(
            out,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                sizes,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let xv = &self.values[x.0];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push_owned(
            out,
            out_shape,
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
        ))
    }

    /// Rows of `table` [V×d] selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let tv = &self.values[table.0];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::InvalidTensor("embedding of an empty id list".into()));
        }
        Ok(self.push_owned(
            out,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows whose mask is 1.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[f32]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy_masked")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "cross_entropy_masked",
                &[rows, vocab],
                &[targets.len(), mask.len()],
            ));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidTensor("loss mask must be 0/1".into()));
        }
        let selected: Vec<(usize, usize)> = (0..rows)
            .filter(|&r| mask[r] == 1.0)
            .map(|r| (r, targets[r]))
            .collect();
        if selected.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let lv = &self.values[logits.0];
        let mut probs = Vec::with_capacity(selected.len() * vocab);
        let mut total = T::zero();
        for &(r, t) in &selected {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[t];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let loss = total / T::from_f64(selected.len() as f64);
        Ok(self.push_owned(
            vec![loss],
            vec![],
            Op::CrossEntropy {
                logits,
                rows: selected,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].iter().copied().sum();
        self.push_owned(vec![s], vec![], Op::Sum(x))
    }

    /// Rotary position embedding over `[T × n_heads·head_dim]`, rotating
    /// adjacent channel pairs of each head by `pos · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, n_heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let (rows, d) = self.dims2(x, "rope")?;
        if positions.len() != rows || n_heads == 0 || d % n_heads != 0 || !(d / n_heads).is_multiple_of(2) {
            return Err(Error::shape("rope", &[rows, d], &[positions.len(), n_heads]));
        }
        let hd = d / n_heads;
        let half = hd / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / hd as f64);
                cos.push(T::from_f64(theta.cos()));
                sin.push(T::from_f64(theta.sin()));
            }
        }
        let xv = &self.values[x.0];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            for h in 0..n_heads {
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let j = r * d + h * hd + 2 * i;
                    let (x0, x1) = (xv[j], xv[j + 1]);
                    out[j] = x0 * c - x1 * s;
                    out[j + 1] = x0 * s + x1 * c;
                }
            }
        }
        Ok(self.push_owned(out, vec![rows, d], Op::Rope { x, cos, sin, n_heads }))
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients are kept and
    /// can be read with [`Tape::grad`]; intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarBackward(self.shapes[loss.0].clone()));
        }
        self.grads = (0..self.values.len()).map(|_| None).collect();
        if !self.needs_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) || !self.needs_grad[i] {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) {
        // The op is moved out so its saved buffers can be read while grads are mutated.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        let Self {
            values,
            shapes,
            needs_grad,
            grads,
            ..
        } = self;
        let values: &[Cow<'w, [T]>] = values;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                grad_slot(grads, needs_grad, values[v.0].len(), v)
            }};
        }
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if let Some(da) = slot!(a) {
                    // dA[m×k] += dY[m×n] · op(B)ᵀ
                    let (rsb, csb) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    unsafe {
                        T::gemm(
                            m, n, k, T::one(),
                            dy.as_ptr(), n as isize, 1,
                            values[b.0].as_ptr(), rsb, csb,
                            T::one(), da.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if let Some(db) = slot!(b) {
                    let ap = values[a.0].as_ptr();
                    unsafe {
                        if trans_b {
                            // dB[n×k] += dYᵀ[n×m] · A[m×k]
                            T::gemm(
                                n, m, k, T::one(),
                                dy.as_ptr(), 1, n as isize,
                                ap, k as isize, 1,
                                T::one(), db.as_mut_ptr(), k as isize, 1,
                            );
                        } else {
                            // dB[k×n] += Aᵀ[k×m] · dY[m×n]
                            T::gemm(
                                k, m, n, T::one(),
                                ap, 1, k as isize,
                                dy.as_ptr(), n as isize, 1,
                                T::one(), db.as_mut_ptr(), n as isize, 1,
                            );
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = slot!(v) {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if let Some(g) = slot!(v) {
                        for ((g, &d), &o) in g.iter_mut().zip(dy).zip(values[other.0].iter()) {
                            *g += d * o;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(g) = slot!(x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * c);
                }
            }
            &Op::AddRow { x, b } => {
                let d = values[b.0].len();
                if let Some(g) = slot!(x) {
                    g.iter_mut().zip(dy).for_each(|(g, &v)| *g += v);
                }
                if let Some(g) = slot!(b) {
                    for row in dy.chunks_exact(d) {
                        g.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                    }
                }
            }
            &Op::MulRow { x, s } => {
                let d = values[s.0].len();
                if let Some(g) = slot!(x) {
                    for (grow, drow) in g.chunks_exact_mut(d).zip(dy.chunks_exact(d)) {
                        for ((g, &dv), &sc) in grow.iter_mut().zip(drow).zip(values[s.0].iter()) {
                            *g += dv * sc;
                        }
                    }
                }
                if let Some(g) = slot!(s) {
                    for (xrow, drow) in values[x.0].chunks_exact(d).zip(dy.chunks_exact(d)) {
                        for ((g, &xv), &dv) in g.iter_mut().zip(xrow).zip(drow) {
                            *g += xv * dv;
                        }
                    }
                }
            }
            &Op::Silu(x) => {
                if let Some(g) = slot!(x) {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(values[x.0].iter()) {
                        let sig = T::one() / (T::one() + (-v).exp());
                        *g += d * sig * (T::one() + v * (T::one() - sig));
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let d = values[w.0].len();
                let dt = T::from_f64(d as f64);
                let (xv, wv) = (&values[x.0], &values[w.0]);
                if let Some(g) = slot!(x) {
                    for (r, ((grow, drow), xrow)) in g
                        .chunks_exact_mut(d)
                        .zip(dy.chunks_exact(d))
                        .zip(xv.chunks_exact(d))
                        .enumerate()
                    {
                        let inv = inv_rms[r];
                        let dot: T = drow
                            .iter()
                            .zip(wv.iter())
                            .zip(xrow)
                            .map(|((&dv, &wj), &xj)| dv * wj * xj)
                            .sum();
                        let coef = inv * inv * inv * dot / dt;
                        for j in 0..d {
                            grow[j] += inv * wv[j] * drow[j] - coef * xrow[j];
                        }
                    }
                }
                if let Some(g) = slot!(w) {
                    for (r, (xrow, drow)) in xv.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
                        let inv = inv_rms[r];
                        for ((g, &xj), &dv) in g.iter_mut().zip(xrow).zip(drow) {
                            *g += dv * xj * inv;
                        }
                    }
                }
            }
            &Op::Softmax { x, .. } => {
                let n = *shapes[i].last().unwrap();
                if let Some(g) = slot!(x) {
                    for ((grow, drow), yrow) in g
                        .chunks_exact_mut(n)
                        .zip(dy.chunks_exact(n))
                        .zip(values[i].chunks_exact(n))
                    {
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        for j in 0..n {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            &Op::ScaleByElem { x, g: gate, idx } => {
                if let Some(g) = slot!(x) {
                    let c = values[gate.0][idx];
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * c);
                }
                if let Some(g) = slot!(gate) {
                    let s: T = values[x.0].iter().zip(dy).map(|(&v, &d)| v * d).sum();
                    g[idx] += s;
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    if let Some(g) = slot!(v) {
                        let chunk = sz * inner;
                        for o in 0..*outer {
                            let src = &dy[(o * total + offset) * inner..][..chunk];
                            g[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += sz;
                }
            }
            &Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                if let Some(g) = slot!(x) {
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        g[base..base + len * inner]
                            .iter_mut()
                            .zip(&dy[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = shapes[table.0][1];
                if let Some(g) = slot!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        g[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&dy[r * d..(r + 1) * d])
                            .for_each(|(g, &v)| *g += v);
                    }
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let vocab = shapes[logits.0][1];
                let scale = dy[0] / T::from_f64(rows.len() as f64);
                if let Some(g) = slot!(*logits) {
                    for (p, &(r, t)) in probs.chunks_exact(vocab).zip(rows) {
                        let grow = &mut g[r * vocab..(r + 1) * vocab];
                        for (gj, &pj) in grow.iter_mut().zip(p) {
                            *gj += scale * pj;
                        }
                        grow[t] -= scale;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(g) = slot!(x) {
                    let d = dy[0];
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Rope { x, cos, sin, n_heads } => {
                let d = shapes[x.0][1];
                let hd = d / n_heads;
                let half = hd / 2;
                if let Some(g) = slot!(*x) {
                    let rows = g.len() / d;
                    for r in 0..rows {
                        for h in 0..*n_heads {
                            for k in 0..half {
                                let (c, s) = (cos[r * half + k], sin[r * half + k]);
                                let j = r * d + h * hd + 2 * k;
                                let (d0, d1) = (dy[j], dy[j + 1]);
                                g[j] += d0 * c + d1 * s;
                                g[j + 1] += d1 * c - d0 * s;
                            }
                        }
                    }
                }
            }
        }
        self.ops[i] = op;
    }

    /// Copy leaf gradients into `tensor` (zeros when the leaf was unused).
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) {
        match self.grad(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0f32; tensor.numel()]),
        }
    }
}
