use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// How a node was produced; replayed in reverse for gradients.
#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Minimum { a: Var, b: Var },
    Maximum { a: Var, b: Var },
    /// x: [r, c] plus bias row b: [c]
    AddRowBias { x: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// out = a × bᵀ with a: [m, k], b: [n, k]
    MatmulBT { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, r: usize, c: usize },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softplus { a: Var },
    /// ln(max(x, CLAMP))
    LogClamped { a: Var },
    PowConst { a: Var, e: f64 },
    /// Row-wise softmax over a [rows, cols] view.
    Softmax { a: Var, rows: usize, cols: usize },
    /// Same-length 1-D convolution; `cols` is the saved im2col matrix.
    Conv1d { x: Var, w: Var, b: Var, t: usize, c_in: usize, c_out: usize, width: usize, cols: Vec<f64> },
    /// mask entries are 0.0 or 1/(1-p)
    Dropout { a: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize, sizes: Vec<usize>, rows: usize, cols: usize },
    SliceRows { a: Var, start: usize, len: usize, rows: usize, cols: usize },
    /// x: [r, c] scaled per row by s: [r] (or [r, 1])
    ScaleRows { x: Var, s: Var },
    /// x: [r, c] scaled per column by s: [c]
    ScaleCols { x: Var, s: Var },
    /// Rows divided by their L2 norm; saved norms include the eps term.
    L2NormRows { x: Var, norms: Vec<f64> },
    /// Mean of the k largest entries of a 1-D tensor; saved winner indices.
    TopkMean { x: Var, k: usize, idx: Vec<usize> },
    /// Column-wise top-k mean over [t, c]; one index set per column.
    TopkMeanCols { x: Var, k: usize, idx: Vec<Vec<usize>> },
    Sum { a: Var },
    Mean { a: Var },
    /// out[r] = x[r, cols[r]]
    GatherPerRow { x: Var, cols: Vec<usize> },
    /// out[i] = x[at[i].0, at[i].1]
    GatherAt { x: Var, at: Vec<(usize, usize)> },
    /// Row-wise layer norm with learned gamma/beta; saves x̂ and 1/std.
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    /// Persistent gradient accumulator; allocated for requires-grad leaves only.
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Log-clamp floor shared by losses.
pub const LOG_CLAMP: f64 = 1e-12;

/// Reverse-mode tape over dense f64 tensors.
///
/// Nodes are appended in topological order during the forward pass and
/// replayed in reverse by [`Graph::backward`]. One graph per training phase;
/// graphs are cheap to build and dropped after the optimizer step.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant input; never receives gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input_owned(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar_input(&mut self, v: f64) -> Var {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    /// Trainable leaf; gradient is accumulated across backward calls until
    /// [`Graph::zero_grads`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].grad = Some(vec![0.0; t.numel()]);
        v
    }

    /// Stop-gradient copy: same values, no path back to the source.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.nodes[v.0].shape.clone();
        let value = self.nodes[v.0].value.clone();
        self.push(shape, value, Op::Leaf, false)
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node invariant")
    }

    /// Accumulated gradient of a requires-grad leaf.
    pub fn leaf_grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].grad.as_deref().expect("leaf_grad on non-leaf or non-grad node")
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected 2-D, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ── Element-wise binary ──────────────────────────────────────────

    fn map2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.map2(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.map2(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.map2(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        Ok(self.map2(a, b, |x, y| x / y, Op::Div { a, b }))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "minimum")?;
        Ok(self.map2(a, b, f64::min, Op::Minimum { a, b }))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "maximum")?;
        Ok(self.map2(a, b, f64::max, Op::Maximum { a, b }))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "add_row_bias")?;
        if self.shape(b) != [c] {
            return Err(Error::dim("add_row_bias", format!("bias {:?} vs cols {}", self.shape(b), c)));
        }
        let mut value = self.nodes[x.0].value.clone();
        for row in 0..r {
            for j in 0..c {
                value[row * c + j] += self.nodes[b.0].value[j];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(vec![r, c], value, Op::AddRowBias { x, b }, rg))
    }

    // ── Element-wise unary ───────────────────────────────────────────

    fn map1(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map1(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map1(a, |x| x + c, Op::AddConst { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map1(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map1(a, stable_sigmoid, Op::Sigmoid { a })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map1(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus { a })
    }

    /// ln(max(x, 1e-12)); gradient is zero on the clamped region.
    pub fn log_clamped(&mut self, a: Var) -> Var {
        self.map1(a, |x| x.max(LOG_CLAMP).ln(), Op::LogClamped { a })
    }

    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        self.map1(a, |x| x.powf(e), Op::PowConst { a, e })
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{}x{}] x [{}x{}]", m, k, k2, n)));
        }
        let mut value = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::Matmul { a, b, m, k, n }, rg))
    }

    /// a × bᵀ with a: [m, k], b: [n, k].
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul_bt")?;
        let (n, k2) = self.shape2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", format!("[{}x{}] x [{}x{}]ᵀ", m, k, n, k2)));
        }
        let mut value = vec![0.0; m * n];
        matmul_bt_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n, &mut value);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatmulBT { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape2(a, "transpose")?;
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], value, Op::Transpose { a, r, c }, rg))
    }

    /// matmul(x, w) + bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// Row-wise softmax. 1-D tensors are treated as a single row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (rows, cols) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(Error::dim("softmax", format!("expected 1-D or 2-D, got {:?}", s))),
        };
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                value[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                value[r * cols + j] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(s, value, Op::Softmax { a, rows, cols }, rg))
    }

    /// Same-length 1-D convolution over x: [t, c_in] with kernels
    /// w: [c_out, c_in, width] (odd width, zero padding) and bias b: [c_out].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, c_in) = self.shape2(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 {
            return Err(Error::dim("conv1d", format!("kernel must be 3-D, got {:?}", ws)));
        }
        let (c_out, kc_in, width) = (ws[0], ws[1], ws[2]);
        if kc_in != c_in {
            return Err(Error::dim("conv1d", format!("kernel c_in {} vs input {}", kc_in, c_in)));
        }
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {}", width)));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::dim("conv1d", format!("bias {:?} vs c_out {}", self.shape(b), c_out)));
        }
        let half = width / 2;
        let kw = c_in * width;
        let mut cols = vec![0.0; t * kw];
        {
            let xv = &self.nodes[x.0].value;
            for i in 0..t {
                for dk in 0..width {
                    let src = i as isize + dk as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    let dst = &mut cols[i * kw + dk * c_in..i * kw + (dk + 1) * c_in];
                    dst.copy_from_slice(&xv[src * c_in..(src + 1) * c_in]);
                }
            }
        }
        let w_flat = flatten_kernels(&self.nodes[w.0].value, c_out, c_in, width);
        let mut value = vec![0.0; t * c_out];
        matmul_bt_raw(&cols, &w_flat, t, kw, c_out, &mut value);
        for i in 0..t {
            for co in 0..c_out {
                value[i * c_out + co] += self.nodes[b.0].value[co];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![t, c_out], value, Op::Conv1d { x, w, b, t, c_in, c_out, width, cols }, rg))
    }

    /// Train-mode inverted dropout: entries dropped with probability p, the
    /// rest scaled by 1/(1-p). Eval mode is the identity (no node recorded).
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let n = self.numel(a);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit mask (entries 0 or 1/(1-p)); used by the
    /// gradient checker to pin the mask across re-evaluations.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        debug_assert_eq!(mask.len(), self.numel(a));
        let value: Vec<f64> =
            self.nodes[a.0].value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Dropout { a, mask }, rg)
    }

    /// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = stack cols).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat", "no parts"));
        }
        if axis > 1 {
            return Err(Error::arg("concat", format!("axis {} out of range", axis)));
        }
        let (r0, c0) = self.shape2(parts[0], "concat")?;
        let mut sizes = Vec::with_capacity(parts.len());
        let (mut rows, mut cols) = (r0, c0);
        sizes.push(if axis == 0 { r0 } else { c0 });
        for &p in &parts[1..] {
            let (r, c) = self.shape2(p, "concat")?;
            if axis == 0 {
                if c != c0 {
                    return Err(Error::dim("concat", format!("cols {} vs {}", c, c0)));
                }
                rows += r;
                sizes.push(r);
            } else {
                if r != r0 {
                    return Err(Error::dim("concat", format!("rows {} vs {}", r, r0)));
                }
                cols += c;
                sizes.push(c);
            }
        }
        let mut value = vec![0.0; rows * cols];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let v = &self.nodes[p.0].value;
                value[off..off + v.len()].copy_from_slice(v);
                off += v.len();
            }
        } else {
            let mut col_off = 0;
            for (&p, &w) in parts.iter().zip(&sizes) {
                let v = &self.nodes[p.0].value;
                for i in 0..rows {
                    value[i * cols + col_off..i * cols + col_off + w]
                        .copy_from_slice(&v[i * w..(i + 1) * w]);
                }
                col_off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], value, Op::Concat { parts: parts.to_vec(), axis, sizes, rows, cols }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(a, "slice_rows")?;
        if start + len > rows {
            return Err(Error::arg("slice_rows", format!("{}+{} > {}", start, len, rows)));
        }
        let value = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, cols], value, Op::SliceRows { a, start, len, rows, cols }, rg))
    }

    /// Scale row t of x: [r, c] by s[t]; s may be shaped [r] or [r, 1].
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "scale_rows")?;
        if self.numel(s) != r {
            return Err(Error::dim("scale_rows", format!("{} rows vs {} scales", r, self.numel(s))));
        }
        let mut value = self.nodes[x.0].value.clone();
        for i in 0..r {
            let f = self.nodes[s.0].value[i];
            for j in 0..c {
                value[i * c + j] *= f;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(vec![r, c], value, Op::ScaleRows { x, s }, rg))
    }

    /// Scale column j of x: [r, c] by s[j].
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "scale_cols")?;
        if self.numel(s) != c {
            return Err(Error::dim("scale_cols", format!("{} cols vs {} scales", c, self.numel(s))));
        }
        let mut value = self.nodes[x.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] *= self.nodes[s.0].value[j];
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(vec![r, c], value, Op::ScaleCols { x, s }, rg))
    }

    /// Divide each row by its L2 norm (with a 1e-12 floor inside the sqrt).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "l2_normalize_rows")?;
        let src = &self.nodes[x.0].value;
        let mut norms = Vec::with_capacity(r);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
            norms.push(norm);
            for j in 0..c {
                value[i * c + j] = row[j] / norm;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], value, Op::L2NormRows { x, norms }, rg))
    }

    /// Mean of the k largest entries of a 1-D tensor. Ties break toward the
    /// lowest index; the selected indices receive gradient 1/k.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(Error::dim("topk_mean", format!("expected 1-D, got {:?}", s)));
        }
        let t = s[0];
        if k == 0 || k > t {
            return Err(Error::arg("topk_mean", format!("k={} out of range 1..={}", k, t)));
        }
        let idx = topk_indices(&self.nodes[x.0].value, k);
        let mean = idx.iter().map(|&i| self.nodes[x.0].value[i]).sum::<f64>() / k as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![mean], Op::TopkMean { x, k, idx }, rg))
    }

    /// Column-wise top-k mean over x: [t, c] → [c].
    pub fn topk_mean_cols(&mut self, x: Var, k: usize) -> Result<Var> {
        let (t, c) = self.shape2(x, "topk_mean_cols")?;
        if k == 0 || k > t {
            return Err(Error::arg("topk_mean_cols", format!("k={} out of range 1..={}", k, t)));
        }
        let src = &self.nodes[x.0].value;
        let mut idx = Vec::with_capacity(c);
        let mut value = vec![0.0; c];
        for j in 0..c {
            let col: Vec<f64> = (0..t).map(|i| src[i * c + j]).collect();
            let sel = topk_indices(&col, k);
            value[j] = sel.iter().map(|&i| col[i]).sum::<f64>() / k as f64;
            idx.push(sel);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c], value, Op::TopkMeanCols { x, k, idx }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.numel(a) as f64;
        let s: f64 = self.nodes[a.0].value.iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    pub fn gather_per_row(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape2(x, "gather_per_row")?;
        if cols.len() != r {
            return Err(Error::dim("gather_per_row", format!("{} indices vs {} rows", cols.len(), r)));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::arg("gather_per_row", format!("column {} out of range {}", bad, c)));
        }
        let value: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| self.nodes[x.0].value[i * c + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![r], value, Op::GatherPerRow { x, cols }, rg))
    }

    pub fn gather_at(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let (r, c) = self.shape2(x, "gather_at")?;
        if let Some(&bad) = at.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::arg("gather_at", format!("index {:?} out of range [{}x{}]", bad, r, c)));
        }
        let value: Vec<f64> = at.iter().map(|&(i, j)| self.nodes[x.0].value[i * c + j]).collect();
        let n = value.len();
        let rg = self.rg(x);
        Ok(self.push(vec![n], value, Op::GatherAt { x, at }, rg))
    }

    /// Row-wise layer norm over x: [r, c] with learned gamma/beta: [c].
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", "gamma/beta must match columns"));
        }
        let src = &self.nodes[x.0].value;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[i * c + j] = xh;
                value[i * c + j] = xh * self.nodes[gamma.0].value[j] + self.nodes[beta.0].value[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(vec![r, c], value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    // ── Composites ───────────────────────────────────────────────────

    /// Mean squared difference of two same-shape tensors → scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Sum of several scalar vars.
    pub fn sum_vars(&mut self, vars: &[Var]) -> Result<Var> {
        let mut acc = *vars.first().ok_or_else(|| Error::arg("sum_vars", "empty"))?;
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Scaled dot-product attention with per-key weights multiplied into the
    /// score matrix before the row softmax: softmax(QKᵀ/√d ∘ w) V.
    pub fn masked_scaled_attention(&mut self, q: Var, k: Var, v: Var, weights: Var) -> Result<Var> {
        let (_, dq) = self.shape2(q, "masked_scaled_attention")?;
        let (bk, dk) = self.shape2(k, "masked_scaled_attention")?;
        let (bv, dv) = self.shape2(v, "masked_scaled_attention")?;
        if dq != dk || bk != bv {
            return Err(Error::dim(
                "masked_scaled_attention",
                format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if self.numel(weights) != bk {
            return Err(Error::dim(
                "masked_scaled_attention",
                format!("{} keys vs {} weights", bk, self.numel(weights)),
            ));
        }
        let _ = dv;
        let scores = self.matmul_bt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (dq as f64).sqrt());
        let modulated = self.scale_cols(scaled, weights)?;
        let attn = self.softmax(modulated)?;
        self.matmul(attn, v)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls; a second backward without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(acc) = &mut self.nodes[i].grad {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64], this: &Graph| {
            if !this.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; this.numel(v)]);
            for (a, b) in slot.iter_mut().zip(contrib) {
                *a += b;
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                add_to(grads, *a, g, self);
                add_to(grads, *b, g, self);
            }
            Op::Sub { a, b } => {
                add_to(grads, *a, g, self);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_to(grads, *b, &neg, self);
            }
            Op::Mul { a, b } => {
                let bv = &self.nodes[b.0].value;
                let av = &self.nodes[a.0].value;
                let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                add_to(grads, *a, &da, self);
                add_to(grads, *b, &db, self);
            }
            Op::Div { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x / y).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(x, (a, b))| -x * a / (b * b))
                    .collect();
                add_to(grads, *a, &da, self);
                add_to(grads, *b, &db, self);
            }
            Op::Minimum { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da: Vec<f64> = g.iter().enumerate().map(|(j, x)| if av[j] <= bv[j] { *x } else { 0.0 }).collect();
                let db: Vec<f64> = g.iter().enumerate().map(|(j, x)| if av[j] > bv[j] { *x } else { 0.0 }).collect();
                add_to(grads, *a, &da, self);
                add_to(grads, *b, &db, self);
            }
            Op::Maximum { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da: Vec<f64> = g.iter().enumerate().map(|(j, x)| if av[j] >= bv[j] { *x } else { 0.0 }).collect();
                let db: Vec<f64> = g.iter().enumerate().map(|(j, x)| if av[j] < bv[j] { *x } else { 0.0 }).collect();
                add_to(grads, *a, &da, self);
                add_to(grads, *b, &db, self);
            }
            Op::AddRowBias { x, b } => {
                add_to(grads, *x, g, self);
                let c = self.numel(*b);
                let r = self.numel(*x) / c;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                add_to(grads, *b, &db, self);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                add_to(grads, *a, &da, self);
            }
            Op::AddConst { a } => add_to(grads, *a, g, self),
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_raw(g, bv, m, n, k, &mut da);
                    add_to(grads, *a, &da, self);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_at_raw(av, g, m, k, n, &mut db);
                    add_to(grads, *b, &db, self);
                }
            }
            Op::MatmulBT { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_raw(g, bv, m, n, k, &mut da);
                    add_to(grads, *a, &da, self);
                }
                if self.nodes[b.0].requires_grad {
                    // db[j][p] = Σ_i g[i][j]·a[i][p]
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                let arow = &av[i * k..(i + 1) * k];
                                let drow = &mut db[j * k..(j + 1) * k];
                                for p in 0..k {
                                    drow[p] += gij * arow[p];
                                }
                            }
                        }
                    }
                    add_to(grads, *b, &db, self);
                }
            }
            Op::Transpose { a, r, c } => {
                let (r, c) = (*r, *c);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                add_to(grads, *a, &da, self);
            }
            Op::Relu { a } => {
                let av = &self.nodes[a.0].value;
                let da: Vec<f64> = g.iter().zip(av).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect();
                add_to(grads, *a, &da, self);
            }
            Op::Sigmoid { a } => {
                let yv = &self.nodes[i].value;
                let da: Vec<f64> = g.iter().zip(yv).map(|(x, y)| x * y * (1.0 - y)).collect();
                add_to(grads, *a, &da, self);
            }
            Op::Softplus { a } => {
                let av = &self.nodes[a.0].value;
                let da: Vec<f64> = g.iter().zip(av).map(|(x, v)| x * stable_sigmoid(*v)).collect();
                add_to(grads, *a, &da, self);
            }
            Op::LogClamped { a } => {
                let av = &self.nodes[a.0].value;
                let da: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .map(|(x, v)| if *v > LOG_CLAMP { x / v } else { 0.0 })
                    .collect();
                add_to(grads, *a, &da, self);
            }
            Op::PowConst { a, e } => {
                let av = &self.nodes[a.0].value;
                let da: Vec<f64> = g.iter().zip(av).map(|(x, v)| x * e * v.powf(e - 1.0)).collect();
                add_to(grads, *a, &da, self);
            }
            Op::Softmax { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let yv = &self.nodes[i].value;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = &yv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        da[r * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                add_to(grads, *a, &da, self);
            }
            Op::Conv1d { x, w, b, t, c_in, c_out, width, cols } => {
                let (t, c_in, c_out, width) = (*t, *c_in, *c_out, *width);
                let kw = c_in * width;
                let half = width / 2;
                if self.nodes[w.0].requires_grad {
                    // dW_flat = gᵀ·cols, reshaped back to [c_out, c_in, width]
                    let mut dw_flat = vec![0.0; c_out * kw];
                    for ti in 0..t {
                        for co in 0..c_out {
                            let gv = g[ti * c_out + co];
                            if gv != 0.0 {
                                let crow = &cols[ti * kw..(ti + 1) * kw];
                                let drow = &mut dw_flat[co * kw..(co + 1) * kw];
                                for q in 0..kw {
                                    drow[q] += gv * crow[q];
                                }
                            }
                        }
                    }
                    let mut dw = vec![0.0; c_out * c_in * width];
                    for co in 0..c_out {
                        for dk in 0..width {
                            for ci in 0..c_in {
                                dw[co * c_in * width + ci * width + dk] = dw_flat[co * kw + dk * c_in + ci];
                            }
                        }
                    }
                    add_to(grads, *w, &dw, self);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; c_out];
                    for ti in 0..t {
                        for co in 0..c_out {
                            db[co] += g[ti * c_out + co];
                        }
                    }
                    add_to(grads, *b, &db, self);
                }
                if self.nodes[x.0].requires_grad {
                    let w_flat = flatten_kernels(&self.nodes[w.0].value, c_out, c_in, width);
                    let mut dcols = vec![0.0; t * kw];
                    matmul_raw(g, &w_flat, t, c_out, kw, &mut dcols);
                    let mut dx = vec![0.0; t * c_in];
                    for ti in 0..t {
                        for dk in 0..width {
                            let src = ti as isize + dk as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ci in 0..c_in {
                                dx[src * c_in + ci] += dcols[ti * kw + dk * c_in + ci];
                            }
                        }
                    }
                    add_to(grads, *x, &dx, self);
                }
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                add_to(grads, *a, &da, self);
            }
            Op::Concat { parts, axis, sizes, rows, cols } => {
                if *axis == 0 {
                    let mut off = 0;
                    for (&p, &sz) in parts.iter().zip(sizes) {
                        let len = sz * cols;
                        add_to(grads, p, &g[off..off + len], self);
                        off += len;
                    }
                } else {
                    let mut col_off = 0;
                    for (&p, &w) in parts.iter().zip(sizes) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..*rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * cols + col_off..r * cols + col_off + w]);
                        }
                        add_to(grads, p, &dp, self);
                        col_off += w;
                    }
                }
            }
            Op::SliceRows { a, start, len, rows, cols } => {
                let mut da = vec![0.0; rows * cols];
                da[start * cols..(start + len) * cols].copy_from_slice(g);
                add_to(grads, *a, &da, self);
            }
            Op::ScaleRows { x, s } => {
                let c = self.shape(*x)[1];
                let r = self.shape(*x)[0];
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[i * c + j] * sv[i];
                        }
                    }
                    add_to(grads, *x, &dx, self);
                }
                if self.nodes[s.0].requires_grad {
                    let mut ds = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            ds[i] += g[i * c + j] * xv[i * c + j];
                        }
                    }
                    add_to(grads, *s, &ds, self);
                }
            }
            Op::ScaleCols { x, s } => {
                let c = self.shape(*x)[1];
                let r = self.shape(*x)[0];
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[i * c + j] * sv[j];
                        }
                    }
                    add_to(grads, *x, &dx, self);
                }
                if self.nodes[s.0].requires_grad {
                    let mut ds = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            ds[j] += g[i * c + j] * xv[i * c + j];
                        }
                    }
                    add_to(grads, *s, &ds, self);
                }
            }
            Op::L2NormRows { x, norms } => {
                let c = self.shape(*x)[1];
                let r = self.shape(*x)[0];
                let yv = &self.nodes[i].value;
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let y = &yv[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[row * c + j] = (gr[j] - y[j] * dot) / norms[row];
                    }
                }
                add_to(grads, *x, &dx, self);
            }
            Op::TopkMean { x, k, idx } => {
                let mut dx = vec![0.0; self.numel(*x)];
                let share = g[0] / *k as f64;
                for &j in idx {
                    dx[j] += share;
                }
                add_to(grads, *x, &dx, self);
            }
            Op::TopkMeanCols { x, k, idx } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.numel(*x)];
                for (j, sel) in idx.iter().enumerate() {
                    let share = g[j] / *k as f64;
                    for &row in sel {
                        dx[row * c + j] += share;
                    }
                }
                add_to(grads, *x, &dx, self);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.numel(*a)];
                add_to(grads, *a, &da, self);
            }
            Op::Mean { a } => {
                let n = self.numel(*a) as f64;
                let da = vec![g[0] / n; self.numel(*a)];
                add_to(grads, *a, &da, self);
            }
            Op::GatherPerRow { x, cols } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.numel(*x)];
                for (i, &j) in cols.iter().enumerate() {
                    dx[i * c + j] += g[i];
                }
                add_to(grads, *x, &dx, self);
            }
            Op::GatherAt { x, at } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.numel(*x)];
                for (n, &(i, j)) in at.iter().enumerate() {
                    dx[i * c + j] += g[n];
                }
                add_to(grads, *x, &dx, self);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.shape(*x)[1];
                let r = self.shape(*x)[0];
                let gv = &self.nodes[gamma.0].value;
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![0.0; c];
                    for row in 0..r {
                        for j in 0..c {
                            db[j] += g[row * c + j];
                        }
                    }
                    add_to(grads, *beta, &db, self);
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0; c];
                    for row in 0..r {
                        for j in 0..c {
                            dg[j] += g[row * c + j] * xhat[row * c + j];
                        }
                    }
                    add_to(grads, *gamma, &dg, self);
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = g[row * c + j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[row * c + j];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for j in 0..c {
                            let dxh = g[row * c + j] * gv[j];
                            dx[row * c + j] =
                                inv_std[row] * (dxh - mean_dxhat - xhat[row * c + j] * mean_dxhat_xhat);
                        }
                    }
                    add_to(grads, *x, &dx, self);
                }
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the k largest entries, ties broken toward the lowest index.
fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn flatten_kernels(w: &[f64], c_out: usize, c_in: usize, width: usize) -> Vec<f64> {
    let kw = c_in * width;
    let mut flat = vec![0.0; c_out * kw];
    for co in 0..c_out {
        for ci in 0..c_in {
            for dk in 0..width {
                flat[co * kw + dk * c_in + ci] = w[co * c_in * width + ci * width + dk];
            }
        }
    }
    flat
}

/// out += a × b with a: [m, k], b: [k, n].
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out += a × bᵀ with a: [m, k], b: [n, k].
pub fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] += s;
        }
    }
}

/// out += aᵀ × b with a: [m, k], b: [m, n].
pub fn matmul_at_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}
