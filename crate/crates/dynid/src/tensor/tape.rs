//! The recorded computation tape.
//!
//! Forward ops append nodes; `backward` walks the record in reverse and
//! accumulates vector-Jacobian products. A full forward/backward pass is
//! single-threaded and deterministic: identical inputs give bit-identical
//! gradients.

use super::{c, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, k: f64 },
    AddRow { mat: usize, row: usize },
    ConcatCols { a: usize, b: usize },
    SliceCols { a: usize, c0: usize },
    Reshape { a: usize },
    SoftmaxRows { a: usize },
    Gelu { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    EmbedRow { table: usize, row: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    RowSums { a: usize },
    VecMin { a: usize, arg: usize },
    VecMax { a: usize, arg: usize },
    SubBcast { v: usize, s: usize },
    DivBcast { v: usize, s: usize },
    Expand { w: usize },
    GatedResidual { z: usize, attn: usize, w: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    grad: Option<Vec<T>>,
}

/// Reverse-mode differentiation tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_major_matmul<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bkj;
            }
        }
    }
    out
}

fn gelu_val<T: Scalar>(x: T) -> T {
    let k: T = c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a: T = c(0.044715);
    let inner = k * (x + a * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k: T = c(0.797_884_560_802_865_4);
    let a: T = c(0.044715);
    let inner = k * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let d_inner = k * (T::one() + c::<T>(3.0) * a * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * sech2 * d_inner
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Leaf from raw parts, validating the tensor invariants.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<TensorId, TensorError> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn scalar_leaf(&mut self, x: T) -> TensorId {
        self.leaf(Tensor::scalar(x))
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Ok(self.push_unchecked(Tensor { shape, data }, op))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// `a[m,p] x b[p,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, p) = self.value(a).dims2("matmul")?;
        let (pb, n) = self.value(b).dims2("matmul")?;
        if p != pb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = row_major_matmul(self.value(a).data(), self.value(b).data(), m, p, n);
        self.push(
            "matmul",
            vec![m, n],
            data,
            Op::MatMul { a: a.0, b: b.0 },
        )
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], data, Op::Transpose { a: a.0 })
    }

    // ── Elementwise (exact-shape only) ─────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("add", shape, data, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("sub", shape, data, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("mul", shape, data, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn add_scalar(&mut self, a: TensorId, k: T) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| x + k).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar { a: a.0 })
    }

    pub fn mul_scalar(&mut self, a: TensorId, k: T) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| x * k).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(
            "mul_scalar",
            shape,
            data,
            Op::MulScalar {
                a: a.0,
                k: k.as_f64(),
            },
        )
    }

    /// `mat[m,n] + row[n]`, broadcasting the row over all rows (bias add).
    pub fn add_row(&mut self, mat: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(mat).dims2("add_row")?;
        if self.value(row).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.value(row).shape().to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let data: Vec<T> = self
            .value(mat)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x + r[idx % n])
            .collect();
        self.push(
            "add_row",
            vec![m, n],
            data,
            Op::AddRow {
                mat: mat.0,
                row: row.0,
            },
        )
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    /// `[m,p] ++ [m,q] -> [m,p+q]` along the feature axis.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ma, p) = self.value(a).dims2("concat_cols")?;
        let (mb, q) = self.value(b).dims2("concat_cols")?;
        if ma != mb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![ma, p],
                rhs: vec![mb, q],
            });
        }
        let mut data = Vec::with_capacity(ma * (p + q));
        for i in 0..ma {
            data.extend_from_slice(&self.value(a).data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&self.value(b).data()[i * q..(i + 1) * q]);
        }
        self.push(
            "concat_cols",
            vec![ma, p + q],
            data,
            Op::ConcatCols { a: a.0, b: b.0 },
        )
    }

    pub fn slice_cols(
        &mut self,
        a: TensorId,
        c0: usize,
        c1: usize,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if c0 >= c1 || c1 > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: c1,
                extent: n,
            });
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.value(a).data()[i * n + c0..i * n + c1]);
        }
        self.push(
            "slice_cols",
            vec![m, w],
            data,
            Op::SliceCols { a: a.0, c0 },
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || numel != self.value(a).numel() {
            return Err(TensorError::ShapeLenMismatch {
                op: "reshape",
                shape,
                len: self.value(a).numel(),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", shape, data, Op::Reshape { a: a.0 })
    }

    // ── Nonlinear ───────────────────────────────────────────────────────

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = T::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        self.push("softmax_rows", vec![m, n], data, Op::SoftmaxRows { a: a.0 })
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| gelu_val(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("gelu", shape, data, Op::Gelu { a: a.0 })
    }

    /// Per-row layer normalization of `x[m,n]` with per-column gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf: T = c(n as f64);
        let epst: T = c(eps);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + epst).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            vec![m, n],
            data,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Look up one row of an embedding table: `[v,d], i -> [1,d]`.
    pub fn embed_row(&mut self, table: TensorId, row: usize) -> Result<TensorId, TensorError> {
        let (v, d) = self.value(table).dims2("embed_row")?;
        if row >= v {
            return Err(TensorError::IndexOutOfRange {
                op: "embed_row",
                index: row,
                extent: v,
            });
        }
        let data = self.value(table).data()[row * d..(row + 1) * d].to_vec();
        self.push(
            "embed_row",
            vec![1, d],
            data,
            Op::EmbedRow { table: table.0, row },
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum_all", vec![1], vec![s], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let n = self.value(a).numel();
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(
            "mean_all",
            vec![1],
            vec![s / c(n as f64)],
            Op::MeanAll { a: a.0 },
        )
    }

    /// Row sums of `[m,n] -> [m]`; this is the `logits x ones` product used
    /// by the activation-weight computation.
    pub fn row_sums(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(a).dims2("row_sums")?;
        let src = self.value(a).data();
        let data: Vec<T> = (0..m)
            .map(|i| src[i * n..(i + 1) * n].iter().copied().sum())
            .collect();
        self.push("row_sums", vec![m], data, Op::RowSums { a: a.0 })
    }

    /// Minimum of a vector as a `[1]` tensor; subgradient goes to the first
    /// minimizing index.
    pub fn vec_min(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.value(a).shape();
        if shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "vec_min",
                shape: shape.to_vec(),
            });
        }
        let src = self.value(a).data();
        let mut arg = 0;
        for (i, &x) in src.iter().enumerate() {
            if x < src[arg] {
                arg = i;
            }
        }
        let v = src[arg];
        self.push("vec_min", vec![1], vec![v], Op::VecMin { a: a.0, arg })
    }

    /// Maximum of a vector as a `[1]` tensor; subgradient to the first
    /// maximizing index.
    pub fn vec_max(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.value(a).shape();
        if shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "vec_max",
                shape: shape.to_vec(),
            });
        }
        let src = self.value(a).data();
        let mut arg = 0;
        for (i, &x) in src.iter().enumerate() {
            if x > src[arg] {
                arg = i;
            }
        }
        let v = src[arg];
        self.push("vec_max", vec![1], vec![v], Op::VecMax { a: a.0, arg })
    }

    /// `v - s` with `s` a `[1]` tensor broadcast over the vector.
    pub fn sub_bcast(&mut self, v: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        let sv = self.value(s).item()?;
        let data: Vec<T> = self.value(v).data().iter().map(|&x| x - sv).collect();
        let shape = self.value(v).shape().to_vec();
        self.push("sub_bcast", shape, data, Op::SubBcast { v: v.0, s: s.0 })
    }

    /// `v / s` with `s` a `[1]` tensor broadcast over the vector.
    pub fn div_bcast(&mut self, v: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        let sv = self.value(s).item()?;
        let data: Vec<T> = self.value(v).data().iter().map(|&x| x / sv).collect();
        let shape = self.value(v).shape().to_vec();
        self.push("div_bcast", shape, data, Op::DivBcast { v: v.0, s: s.0 })
    }

    // ── Broadcast / gating ──────────────────────────────────────────────

    /// Broadcast a weight vector along the feature dimension:
    /// `expand(w)[i, j] == w[i]` for every `j`.
    pub fn expand(&mut self, w: TensorId, cols: usize) -> Result<TensorId, TensorError> {
        let shape = self.value(w).shape();
        if shape.len() != 1 || cols == 0 {
            return Err(TensorError::BadShape {
                op: "expand",
                shape: shape.to_vec(),
            });
        }
        let n = shape[0];
        let src = self.value(w).data();
        let mut data = Vec::with_capacity(n * cols);
        for &x in src {
            data.extend(std::iter::repeat(x).take(cols));
        }
        self.push("expand", vec![n, cols], data, Op::Expand { w: w.0 })
    }

    /// `out[i,:] = z[i,:] + w[i] * attn[i,:]`, with the guarantee that rows
    /// where `w[i] == 0` are copied from `z` bit-for-bit.
    pub fn gated_residual(
        &mut self,
        z: TensorId,
        attn: TensorId,
        w: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (m, n) = self.value(z).dims2("gated_residual")?;
        self.same_shape("gated_residual", z, attn)?;
        if self.value(w).shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "gated_residual",
                lhs: vec![m, n],
                rhs: self.value(w).shape().to_vec(),
            });
        }
        let zd = self.value(z).data();
        let ad = self.value(attn).data();
        let wd = self.value(w).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let wi = wd[i];
            let zi = &zd[i * n..(i + 1) * n];
            let oi = &mut data[i * n..(i + 1) * n];
            if wi == T::zero() {
                oi.copy_from_slice(zi);
            } else {
                let ai = &ad[i * n..(i + 1) * n];
                for j in 0..n {
                    oi[j] = zi[j] + wi * ai[j];
                }
            }
        }
        self.push(
            "gated_residual",
            vec![m, n],
            data,
            Op::GatedResidual {
                z: z.0,
                attn: attn.0,
                w: w.0,
            },
        )
    }

    // ── Composites ──────────────────────────────────────────────────────

    /// `x[m,p] x w[p,q] + bias[q]`.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, bias)
    }

    /// Two-layer MLP with a GELU between the linear maps.
    pub fn mlp2(
        &mut self,
        x: TensorId,
        w1: TensorId,
        b1: TensorId,
        w2: TensorId,
        b2: TensorId,
    ) -> Result<TensorId, TensorError> {
        let h = self.linear(x, w1, b1)?;
        let h = self.gelu(h)?;
        self.linear(h, w2, b2)
    }

    /// Mean squared error between same-shape tensors, as a `[1]` scalar.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Node gradients on this tape are
    /// reset at the start of each call; cross-call accumulation is handled
    /// by [`super::Binding::accumulate`] at the parameter-set level.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}

                Op::MatMul { a, b } => {
                    let (m, p) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let n = self.nodes[b].value.shape()[1];
                    // dA = G x B^T
                    let bd = self.nodes[b].value.data();
                    let mut bt = vec![T::zero(); n * p];
                    for r in 0..p {
                        for cidx in 0..n {
                            bt[cidx * p + r] = bd[r * n + cidx];
                        }
                    }
                    let da = row_major_matmul(&grad, &bt, m, n, p);
                    // dB = A^T x G
                    let ad = self.nodes[a].value.data();
                    let mut at = vec![T::zero(); p * m];
                    for r in 0..m {
                        for cidx in 0..p {
                            at[cidx * m + r] = ad[r * p + cidx];
                        }
                    }
                    let db = row_major_matmul(&at, &grad, p, m, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }

                Op::Transpose { a } => {
                    let (n, m) = (
                        self.nodes[i].value.shape()[0],
                        self.nodes[i].value.shape()[1],
                    );
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..n {
                        for cidx in 0..m {
                            da[cidx * n + r] = grad[r * m + cidx];
                        }
                    }
                    self.accumulate(a, &da);
                }

                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }

                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                    self.accumulate(b, &neg);
                }

                Op::Mul { a, b } => {
                    let da: Vec<T> = grad
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    let db: Vec<T> = grad
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }

                Op::AddScalar { a } => self.accumulate(a, &grad),

                Op::MulScalar { a, k } => {
                    let kt: T = c(k);
                    let da: Vec<T> = grad.iter().map(|&g| g * kt).collect();
                    self.accumulate(a, &da);
                }

                Op::AddRow { mat, row } => {
                    let n = self.nodes[row].value.numel();
                    self.accumulate(mat, &grad);
                    let mut dr = vec![T::zero(); n];
                    for (idx, &g) in grad.iter().enumerate() {
                        dr[idx % n] += g;
                    }
                    self.accumulate(row, &dr);
                }

                Op::ConcatCols { a, b } => {
                    let (m, p) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let q = self.nodes[b].value.shape()[1];
                    let mut da = vec![T::zero(); m * p];
                    let mut db = vec![T::zero(); m * q];
                    for r in 0..m {
                        da[r * p..(r + 1) * p]
                            .copy_from_slice(&grad[r * (p + q)..r * (p + q) + p]);
                        db[r * q..(r + 1) * q]
                            .copy_from_slice(&grad[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }

                Op::SliceCols { a, c0 } => {
                    let (m, n) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let w = self.nodes[i].value.shape()[1];
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..m {
                        for j in 0..w {
                            da[r * n + c0 + j] = grad[r * w + j];
                        }
                    }
                    self.accumulate(a, &da);
                }

                Op::Reshape { a } => self.accumulate(a, &grad),

                Op::SoftmaxRows { a } => {
                    let (m, n) = (
                        self.nodes[i].value.shape()[0],
                        self.nodes[i].value.shape()[1],
                    );
                    let out = self.nodes[i].value.data().to_vec();
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..m {
                        let s = &out[r * n..(r + 1) * n];
                        let g = &grad[r * n..(r + 1) * n];
                        let dot: T = s.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            da[r * n + j] = s[j] * (g[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }

                Op::Gelu { a } => {
                    let da: Vec<T> = grad
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&g, &x)| g * gelu_grad(x))
                        .collect();
                    self.accumulate(a, &da);
                }

                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, n) = (self.nodes[x].value.shape()[0], self.nodes[x].value.shape()[1]);
                    let xd = self.nodes[x].value.data().to_vec();
                    let gd = self.nodes[gamma].value.data().to_vec();
                    let nf: T = c(n as f64);
                    let epst: T = c(eps);
                    let mut dx = vec![T::zero(); m * n];
                    let mut dgamma = vec![T::zero(); n];
                    let mut dbeta = vec![T::zero(); n];
                    for r in 0..m {
                        let row = &xd[r * n..(r + 1) * n];
                        let g = &grad[r * n..(r + 1) * n];
                        let mean = row.iter().copied().sum::<T>() / nf;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                        let inv = T::one() / (var + epst).sqrt();
                        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let mut dxhat = vec![T::zero(); n];
                        for j in 0..n {
                            dgamma[j] += g[j] * xhat[j];
                            dbeta[j] += g[j];
                            dxhat[j] = g[j] * gd[j];
                        }
                        let sum_dxhat: T = dxhat.iter().copied().sum();
                        let sum_dxhat_xhat: T =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] = inv / nf
                                * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }

                Op::EmbedRow { table, row } => {
                    let d = self.nodes[i].value.numel();
                    let v = self.nodes[table].value.shape()[0];
                    let mut dt = vec![T::zero(); v * d];
                    dt[row * d..(row + 1) * d].copy_from_slice(&grad);
                    self.accumulate(table, &dt);
                }

                Op::SumAll { a } => {
                    let numel = self.nodes[a].value.numel();
                    let da = vec![grad[0]; numel];
                    self.accumulate(a, &da);
                }

                Op::MeanAll { a } => {
                    let numel = self.nodes[a].value.numel();
                    let g = grad[0] / c(numel as f64);
                    let da = vec![g; numel];
                    self.accumulate(a, &da);
                }

                Op::RowSums { a } => {
                    let (m, n) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let mut da = vec![T::zero(); m * n];
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] = grad[r];
                        }
                    }
                    self.accumulate(a, &da);
                }

                Op::VecMin { a, arg } | Op::VecMax { a, arg } => {
                    let numel = self.nodes[a].value.numel();
                    let mut da = vec![T::zero(); numel];
                    da[arg] = grad[0];
                    self.accumulate(a, &da);
                }

                Op::SubBcast { v, s } => {
                    self.accumulate(v, &grad);
                    let total: T = grad.iter().copied().sum();
                    self.accumulate(s, &[-total]);
                }

                Op::DivBcast { v, s } => {
                    let sv = self.nodes[s].value.data()[0];
                    let dv: Vec<T> = grad.iter().map(|&g| g / sv).collect();
                    let vd = self.nodes[v].value.data();
                    let ds: T = grad
                        .iter()
                        .zip(vd)
                        .map(|(&g, &x)| -g * x / (sv * sv))
                        .sum();
                    self.accumulate(v, &dv);
                    self.accumulate(s, &[ds]);
                }

                Op::Expand { w } => {
                    let n = self.nodes[w].value.numel();
                    let cols = self.nodes[i].value.shape()[1];
                    let mut dw = vec![T::zero(); n];
                    for r in 0..n {
                        dw[r] = grad[r * cols..(r + 1) * cols].iter().copied().sum();
                    }
                    self.accumulate(w, &dw);
                }

                Op::GatedResidual { z, attn, w } => {
                    let (m, n) = (self.nodes[z].value.shape()[0], self.nodes[z].value.shape()[1]);
                    let wd = self.nodes[w].value.data().to_vec();
                    let ad = self.nodes[attn].value.data().to_vec();
                    self.accumulate(z, &grad);
                    let mut dattn = vec![T::zero(); m * n];
                    let mut dw = vec![T::zero(); m];
                    for r in 0..m {
                        let g = &grad[r * n..(r + 1) * n];
                        let a_row = &ad[r * n..(r + 1) * n];
                        for j in 0..n {
                            dattn[r * n + j] = wd[r] * g[j];
                            dw[r] += a_row[j] * g[j];
                        }
                    }
                    self.accumulate(attn, &dattn);
                    self.accumulate(w, &dw);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, node: usize, contribution: &[T]) {
        let numel = self.nodes[node].value.numel();
        debug_assert_eq!(numel, contribution.len());
        let grad = self.nodes[node]
            .grad
            .get_or_insert_with(|| vec![T::zero(); numel]);
        for (g, &d) in grad.iter_mut().zip(contribution) {
            *g += d;
        }
    }
}
