//! Dense f64 arrays and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Operations are methods on the tape that take [`Var`] handles and append a
//! node; nodes are appended after their inputs, so walking the node list
//! backwards is a reverse topological order. All reductions run in a fixed
//! sequential order, which makes forward values bitwise reproducible.

use crate::error::{AlumError, Result};

/// Division guard: any denominator smaller than this in magnitude is an error.
pub const DIV_EPS: f64 = 1e-12;
/// Added under the square root of every standard deviation.
pub const VAR_EPS: f64 = 1e-12;
/// Added to the norm product in cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl DiffArray {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AlumError::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != values.len() {
            return Err(AlumError::shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                values.len()
            )));
        }
        Ok(DiffArray {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        DiffArray {
            shape: shape.to_vec(),
            values: vec![value; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        DiffArray {
            shape: Vec::new(),
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Same as [`DiffArray::new`] but marked as a gradient-requiring leaf.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Ok(Self::new(shape, values)?.with_requires_grad(true))
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernel: Var, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Expand(Var),
    SpatialMean(Var),
    SpatialStd(Var),
    BatchMean(Var),
    BatchStd(Var),
    Sum(Var),
    RowSum(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    L2Norm(Var),
    CosineSim(Var, Var),
    LogSumExp(Var),
    GatherRows { input: Var, index: Vec<usize> },
    Pick { input: Var, index: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | CosineSim(a, b) => {
                vec![*a, *b]
            }
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Transpose(a)
            | Relu(a)
            | Scale(a, _)
            | AddScalar(a)
            | Reshape(a)
            | Expand(a)
            | SpatialMean(a)
            | SpatialStd(a)
            | BatchMean(a)
            | BatchStd(a)
            | Sum(a)
            | RowSum(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Softplus(a)
            | L2Norm(a)
            | LogSumExp(a) => vec![*a],
            MaxPool2 { input, .. } | GatherRows { input, .. } | Pick { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DiffArray,
    op: Op,
    tracked: bool,
}

/// Recorded computation graph plus the gradients of the last backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &str, a: &DiffArray, b: &DiffArray) -> Result<()> {
    if a.shape != b.shape {
        return Err(AlumError::shape(format!("{op}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn rank(op: &str, a: &DiffArray, r: usize) -> Result<()> {
    if a.shape.len() != r {
        return Err(AlumError::shape(format!(
            "{op}: expected rank {r}, got shape {:?}",
            a.shape
        )));
    }
    Ok(())
}

/// Population mean and `sqrt(var + VAR_EPS)` of a strided run of values.
fn mean_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, (var + VAR_EPS).sqrt())
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

    /// Record a leaf. Gradients are tracked iff `array.requires_grad`.
    pub fn leaf(&mut self, mut array: DiffArray) -> Var {
        let tracked = array.requires_grad;
        array.grad = None;
        self.nodes.push(Node {
            value: array,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, array: DiffArray) -> Var {
        self.leaf(array.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value: DiffArray {
                shape,
                values,
                grad: None,
                requires_grad: tracked,
            },
            op: if tracked { op } else { Op::Leaf },
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &DiffArray {
        &self.nodes[v.0].value
    }

    // ---- linear algebra ----

    /// `(m×k) · (k×n) → m×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        rank("matmul", x, 2)?;
        rank("matmul", y, 2)?;
        let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
        if y.shape[0] != k {
            return Err(AlumError::shape(format!("matmul: {:?} · {:?}", x.shape, y.shape)));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x.values[i * k + p];
                let yrow = &y.values[p * n..(p + 1) * n];
                for (o, &yv) in row.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("transpose", x, 2)?;
        let (m, n) = (x.shape[0], x.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.values[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    /// Stride-1 convolution with symmetric zero padding.
    ///
    /// `input: B×Cin×H×W`, `kernel: Cout×Cin×K×K` (square) → `B×Cout×Ho×Wo`
    /// with `Ho = H + 2·pad − K + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (x, k) = (self.val(input), self.val(kernel));
        rank("conv2d input", x, 4)?;
        rank("conv2d kernel", k, 4)?;
        let [b, ci, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        let [co, kci, kh, kw] = [k.shape[0], k.shape[1], k.shape[2], k.shape[3]];
        if kh != kw {
            return Err(AlumError::shape(format!("conv2d: non-square kernel {kh}×{kw}")));
        }
        if kci != ci {
            return Err(AlumError::shape(format!(
                "conv2d: input has {ci} channels, kernel expects {kci}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(AlumError::shape("conv2d: kernel larger than padded input"));
        }
        let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                let iy = (y + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (xo + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.values[((bi * ci + c) * h + iy as usize) * w + ix as usize]
                                        * k.values[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * ho + y) * wo + xo] = acc;
                    }
                }
            }
        }
        Ok(self.push(vec![b, co, ho, wo], out, Op::Conv2d { input, kernel, pad }))
    }

    // ---- elementwise ----

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let out = x.values.iter().map(|&v| v.max(0.0)).collect();
        self.push(x.shape.clone(), out, Op::Relu(a))
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        same_shape(name, x, y)?;
        let out = x.values.iter().zip(&y.values).map(|(&p, &q)| f(p, q)).collect();
        Ok(self.push(x.shape.clone(), out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(&d) = self.val(b).values.iter().find(|d| d.abs() < DIV_EPS) {
            return Err(AlumError::DegenerateDenominator { value: d, eps: DIV_EPS });
        }
        self.zip("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.val(a);
        let out = x.values.iter().map(|&v| v * s).collect();
        self.push(x.shape.clone(), out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let x = self.val(a);
        let out = x.values.iter().map(|&v| v + s).collect();
        self.push(x.shape.clone(), out, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let out = x.values.iter().map(|v| v.exp()).collect();
        self.push(x.shape.clone(), out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        if let Some(&v) = x.values.iter().find(|&&v| v < DIV_EPS) {
            return Err(AlumError::DegenerateDenominator { value: v, eps: DIV_EPS });
        }
        let out = x.values.iter().map(|v| v.ln()).collect();
        Ok(self.push(x.shape.clone(), out, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        if let Some(&v) = x.values.iter().find(|&&v| v < 0.0) {
            return Err(AlumError::contract(format!("sqrt of negative value {v}")));
        }
        let out = x.values.iter().map(|v| v.sqrt()).collect();
        Ok(self.push(x.shape.clone(), out, Op::Sqrt(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let out = x.values.iter().map(|&v| softplus(v)).collect();
        self.push(x.shape.clone(), out, Op::Softplus(a))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.val(a);
        if numel(shape) != x.len() || shape.contains(&0) {
            return Err(AlumError::shape(format!("reshape: {:?} → {shape:?}", x.shape)));
        }
        let out = x.values.clone();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a)))
    }

    /// Broadcast size-1 dimensions of `a` up to `shape` (same rank required).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.val(a);
        if x.shape.len() != shape.len() || x.shape.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(AlumError::shape(format!("expand: {:?} → {shape:?}", x.shape)));
        }
        let map = broadcast_map(&x.shape, shape);
        let out = map.iter().map(|&i| x.values[i]).collect();
        Ok(self.push(shape.to_vec(), out, Op::Expand(a)))
    }

    // ---- reductions ----

    /// `B×C×H×W → B×C`, mean over the spatial map.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("spatial_mean", x, 4)?;
        let (bc, hw) = (x.shape[0] * x.shape[1], x.shape[2] * x.shape[3]);
        let out = (0..bc)
            .map(|i| x.values[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(vec![x.shape[0], x.shape[1]], out, Op::SpatialMean(a)))
    }

    /// `B×C×H×W → B×C`, population std over the spatial map, `sqrt(var + VAR_EPS)`.
    pub fn spatial_std(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("spatial_std", x, 4)?;
        let (bc, hw) = (x.shape[0] * x.shape[1], x.shape[2] * x.shape[3]);
        let out = (0..bc)
            .map(|i| mean_std(x.values[i * hw..(i + 1) * hw].iter().copied(), hw).1)
            .collect();
        Ok(self.push(vec![x.shape[0], x.shape[1]], out, Op::SpatialStd(a)))
    }

    /// `B×C → C`, mean over the batch axis.
    pub fn batch_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("batch_mean", x, 2)?;
        let (b, c) = (x.shape[0], x.shape[1]);
        let out = (0..c)
            .map(|j| (0..b).map(|i| x.values[i * c + j]).sum::<f64>() / b as f64)
            .collect();
        Ok(self.push(vec![c], out, Op::BatchMean(a)))
    }

    /// `B×C → C`, population std over the batch axis, `sqrt(var + VAR_EPS)`.
    pub fn batch_std(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("batch_std", x, 2)?;
        let (b, c) = (x.shape[0], x.shape[1]);
        let out = (0..c)
            .map(|j| mean_std((0..b).map(|i| x.values[i * c + j]), b).1)
            .collect();
        Ok(self.push(vec![c], out, Op::BatchStd(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).values.iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    /// `B×d → B`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("row_sum", x, 2)?;
        let (b, d) = (x.shape[0], x.shape[1]);
        let out = (0..b).map(|i| x.values[i * d..(i + 1) * d].iter().sum()).collect();
        Ok(self.push(vec![b], out, Op::RowSum(a)))
    }

    /// 2×2 max pooling with stride 2; ties go to the first element in row-major order.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("max_pool2", x, 4)?;
        let [b, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AlumError::shape(format!("max_pool2: odd spatial dims {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x.values[idx] > x.values[best] {
                            best = idx;
                        }
                    }
                    out.push(x.values[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![b, c, ho, wo], out, Op::MaxPool2 { input: a, argmax }))
    }

    /// Row-wise Euclidean norm, `B×d → B`.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("l2_norm", x, 2)?;
        let d = x.shape[1];
        let out = x
            .values
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(vec![x.shape[0]], out, Op::L2Norm(a)))
    }

    /// Row-wise `⟨a,b⟩ / (‖a‖‖b‖ + NORM_EPS)`, `B×d, B×d → B`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        rank("cosine_sim", x, 2)?;
        same_shape("cosine_sim", x, y)?;
        let d = x.shape[1];
        let out = x
            .values
            .chunks(d)
            .zip(y.values.chunks(d))
            .map(|(p, q)| cosine_similarity(p, q))
            .collect();
        Ok(self.push(vec![x.shape[0]], out, Op::CosineSim(a, b)))
    }

    /// Row-wise stable log-sum-exp, `B×K → B`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        rank("logsumexp", x, 2)?;
        let k = x.shape[1];
        let out = x.values.chunks(k).map(logsumexp_row).collect();
        Ok(self.push(vec![x.shape[0]], out, Op::LogSumExp(a)))
    }

    // ---- indexing ----

    /// `out[i] = a[index[i]]` for a 2-D `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.val(a);
        rank("gather_rows", x, 2)?;
        let (n, d) = (x.shape[0], x.shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(AlumError::shape(format!("gather_rows: index {bad} ≥ {n}")));
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&x.values[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![index.len(), d],
            out,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    /// `out[i] = a[i, index[i]]`, `B×K → B`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.val(a);
        rank("pick", x, 2)?;
        let (b, k) = (x.shape[0], x.shape[1]);
        if index.len() != b {
            return Err(AlumError::shape(format!("pick: {} indices for {b} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(AlumError::shape(format!("pick: column {bad} ≥ {k}")));
        }
        let out = index.iter().enumerate().map(|(i, &j)| x.values[i * k + j]).collect();
        Ok(self.push(
            vec![b],
            out,
            Op::Pick {
                input: a,
                index: index.to_vec(),
            },
        ))
    }

    // ---- backward ----

    /// Fill gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(AlumError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &node.value;
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].tracked;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].tracked {
                let n = nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                if tracked(*a) {
                    acc(*a, &mut |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let yrow = &y.values[p * n..(p + 1) * n];
                                let grow = &g[i * n..(i + 1) * n];
                                ga[i * k + p] += grow.iter().zip(yrow).map(|(u, v)| u * v).sum::<f64>();
                            }
                        }
                    });
                }
                if tracked(*b) {
                    acc(*b, &mut |gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let xv = x.values[i * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += xv * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.shape[0], out.shape[1]);
                acc(*a, &mut |ga| {
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, pad } => {
                let (x, k) = (self.val(*input), self.val(*kernel));
                let [b, ci, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
                let [co, _, kh, kw] = [k.shape[0], k.shape[1], k.shape[2], k.shape[3]];
                let (ho, wo) = (out.shape[2], out.shape[3]);
                let pad = *pad as isize;
                // (input flat index, kernel flat index, output flat index) triples
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for bi in 0..b {
                        for o in 0..co {
                            for y in 0..ho {
                                for xo in 0..wo {
                                    let oi = ((bi * co + o) * ho + y) * wo + xo;
                                    for c in 0..ci {
                                        for ky in 0..kh {
                                            let iy = (y + ky) as isize - pad;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (xo + kx) as isize - pad;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                f(
                                                    ((bi * ci + c) * h + iy as usize) * w + ix as usize,
                                                    ((o * ci + c) * kh + ky) * kw + kx,
                                                    oi,
                                                );
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                if tracked(*input) {
                    acc(*input, &mut |gx| {
                        visit(&mut |xi, ki, oi| gx[xi] += g[oi] * k.values[ki])
                    });
                }
                if tracked(*kernel) {
                    acc(*kernel, &mut |gk| {
                        visit(&mut |xi, ki, oi| gk[ki] += g[oi] * x.values[xi])
                    });
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                acc(*a, &mut |ga| {
                    for ((d, &v), &gi) in ga.iter_mut().zip(&x.values).zip(g) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y.values[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * x.values[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / y.values[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * x.values[i] / (y.values[i] * y.values[i]);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Expand(a) => {
                let map = broadcast_map(&self.val(*a).shape, &out.shape);
                acc(*a, &mut |ga| {
                    for (&src, gi) in map.iter().zip(g) {
                        ga[src] += gi;
                    }
                });
            }
            Op::SpatialMean(a) => {
                let x = self.val(*a);
                let hw = x.shape[2] * x.shape[3];
                acc(*a, &mut |ga| {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i / hw] / hw as f64;
                    }
                });
            }
            Op::SpatialStd(a) => {
                let x = self.val(*a);
                let hw = x.shape[2] * x.shape[3];
                acc(*a, &mut |ga| {
                    for (plane, chunk) in x.values.chunks(hw).enumerate() {
                        let mean = chunk.iter().sum::<f64>() / hw as f64;
                        let coef = g[plane] / (hw as f64 * out.values[plane]);
                        for (j, &v) in chunk.iter().enumerate() {
                            ga[plane * hw + j] += coef * (v - mean);
                        }
                    }
                });
            }
            Op::BatchMean(a) => {
                let x = self.val(*a);
                let (b, c) = (x.shape[0], x.shape[1]);
                acc(*a, &mut |ga| {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i % c] / b as f64;
                    }
                });
            }
            Op::BatchStd(a) => {
                let x = self.val(*a);
                let (b, c) = (x.shape[0], x.shape[1]);
                acc(*a, &mut |ga| {
                    for j in 0..c {
                        let mean = (0..b).map(|i| x.values[i * c + j]).sum::<f64>() / b as f64;
                        let coef = g[j] / (b as f64 * out.values[j]);
                        for i in 0..b {
                            ga[i * c + j] += coef * (x.values[i * c + j] - mean);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::RowSum(a) => {
                let d = self.val(*a).shape[1];
                acc(*a, &mut |ga| {
                    for (i, v) in ga.iter_mut().enumerate() {
                        *v += g[i / d];
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out.values[i];
                }
            }),
            Op::Log(a) => {
                let x = self.val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / x.values[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                if tracked(*a) {
                    if let Some(&v) = out.values.iter().find(|&&v| v < DIV_EPS) {
                        return Err(AlumError::DegenerateDenominator { value: v, eps: DIV_EPS });
                    }
                }
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / (2.0 * out.values[i]);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sigmoid(x.values[i]);
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => acc(*input, &mut |ga| {
                for (&src, gi) in argmax.iter().zip(g) {
                    ga[src] += gi;
                }
            }),
            Op::L2Norm(a) => {
                let x = self.val(*a);
                let d = x.shape[1];
                if tracked(*a) {
                    if let Some(&v) = out.values.iter().find(|&&v| v < DIV_EPS) {
                        return Err(AlumError::DegenerateDenominator { value: v, eps: DIV_EPS });
                    }
                }
                acc(*a, &mut |ga| {
                    for (i, v) in ga.iter_mut().enumerate() {
                        *v += g[i / d] * x.values[i] / out.values[i / d];
                    }
                });
            }
            Op::CosineSim(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let d = x.shape[1];
                let rows = x.shape[0];
                let norms = |m: &DiffArray| -> Vec<f64> {
                    m.values
                        .chunks(d)
                        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                        .collect()
                };
                let (nx, ny) = (norms(x), norms(y));
                for (flag, n) in [(tracked(*a), &nx), (tracked(*b), &ny)] {
                    if flag {
                        if let Some(&v) = n.iter().find(|&&v| v < DIV_EPS) {
                            return Err(AlumError::DegenerateDenominator { value: v, eps: DIV_EPS });
                        }
                    }
                }
                // d/dp [⟨p,q⟩ / (‖p‖‖q‖ + ε)] = q/den − ⟨p,q⟩·‖q‖·p / (‖p‖·den²)
                let side = |u: &DiffArray, v: &DiffArray, nu: &[f64], nv: &[f64], gu: &mut [f64]| {
                    for r in 0..rows {
                        let (pu, pv) = (&u.values[r * d..(r + 1) * d], &v.values[r * d..(r + 1) * d]);
                        let dot: f64 = pu.iter().zip(pv).map(|(s, t)| s * t).sum();
                        let den = nu[r] * nv[r] + NORM_EPS;
                        for j in 0..d {
                            gu[r * d + j] += g[r] * (pv[j] / den - dot * nv[r] * pu[j] / (nu[r] * den * den));
                        }
                    }
                };
                acc(*a, &mut |ga| side(x, y, &nx, &ny, ga));
                acc(*b, &mut |gb| side(y, x, &ny, &nx, gb));
            }
            Op::LogSumExp(a) => {
                let x = self.val(*a);
                let k = x.shape[1];
                acc(*a, &mut |ga| {
                    for (r, row) in x.values.chunks(k).enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            ga[r * k + j] += g[r] * (v - out.values[r]).exp();
                        }
                    }
                });
            }
            Op::GatherRows { input, index } => {
                let d = out.shape[1];
                acc(*input, &mut |ga| {
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..d {
                            ga[src * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Pick { input, index } => {
                let k = self.val(*input).shape[1];
                acc(*input, &mut |ga| {
                    for (r, &j) in index.iter().enumerate() {
                        ga[r * k + j] += g[r];
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// For each flat index of `target`, the flat index of the broadcast source.
fn broadcast_map(src: &[usize], target: &[usize]) -> Vec<usize> {
    let n = numel(target);
    let mut src_strides = vec![0usize; src.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        src_strides[i] = if src[i] == 1 { 0 } else { stride };
        stride *= src[i];
    }
    let mut out = Vec::with_capacity(n);
    let mut coord = vec![0usize; target.len()];
    for _ in 0..n {
        out.push(coord.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        for ax in (0..target.len()).rev() {
            coord[ax] += 1;
            if coord[ax] < target[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    out
}

/// `⟨a,b⟩ / (‖a‖‖b‖ + NORM_EPS)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb + NORM_EPS)
}

pub fn logsumexp_row(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> DiffArray {
        DiffArray::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[3], &[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a_vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let eye = t.constant(arr(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = t.constant(arr(&[3, 4], &a_vals));
        let y = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(y).values(), &a_vals[..]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(DiffArray::zeros(&[2, 3]));
        let b = t.constant(DiffArray::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(AlumError::Shape(_))));
        assert!(matches!(t.matmul(a, a), Err(AlumError::Shape(_))));
        assert!(DiffArray::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn division_by_tiny_denominator_raises() {
        let mut t = Tape::new();
        let a = t.constant(DiffArray::filled(&[2], 1.0));
        let b = t.constant(arr(&[2], &[1.0, 1e-13]));
        assert!(matches!(t.div(a, b), Err(AlumError::DegenerateDenominator { .. })));
    }

    #[test]
    fn backward_sum_is_all_ones() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::param(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 4]);
        assert_eq!(t.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_half_square_is_identity() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::param(&[2, 2], vals.clone()).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &vals[..]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::param(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(AlumError::Contract(_))));
    }

    #[test]
    fn untracked_ops_record_no_graph() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[1.0, 2.0]));
        let y = t.exp(x);
        assert!(!t.requires_grad(y));
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn expand_broadcasts_and_sums_back() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::param(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.expand(x, &[2, 3]).unwrap();
        assert_eq!(t.value(y).values(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(t.expand(x, &[2, 4]).is_err());
    }

    #[test]
    fn stds_use_population_convention() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 1, 1, 2], &[0.0, 2.0]));
        let s = t.spatial_std(x).unwrap();
        assert!((t.value(s).item() - 1.0).abs() < 1e-12);
        let u = t.constant(arr(&[2, 1], &[0.0, 2.0]));
        let s = t.batch_std(u).unwrap();
        assert!((t.value(s).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_picks_first_max() {
        let mut t = Tape::new();
        let x = t.leaf(DiffArray::param(&[1, 1, 2, 2], vec![3.0, 3.0, 1.0, 2.0]).unwrap());
        let y = t.max_pool2(x).unwrap();
        assert_eq!(t.value(y).values(), &[3.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp_row(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.constant(arr(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]));
            let b = t.constant(arr(&[3, 2], &[1.1, -1.2, 1.3, 1.4, -1.5, 1.6]));
            let c = t.matmul(a, b).unwrap();
            let l = t.logsumexp(c).unwrap();
            t.value(l).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
