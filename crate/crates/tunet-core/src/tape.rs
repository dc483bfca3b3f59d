//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation of one forward pass in
//! topological order; [`Tape::backward`] replays the records in reverse and
//! accumulates gradients. Tapes are rebuilt per forward pass — there is no
//! graph caching.
//!
//! The tape carries a [`Precision`]: in `F32` mode every operation's output
//! values are rounded through f32 so the stored activations are exact 32-bit
//! values (inner accumulations still run in double). `F64` mode is required
//! for finite-difference verification.

use crate::error::{Error, Result};
use crate::tensor::{validate_shape, Tensor};

/// Numeric mode of a tape: 64-bit for gradient checking, 32-bit for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Probability clamp used by the binary cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;

/// Operation tag, exposed for tape introspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Matmul,
    Conv2d,
    MaxPool2d,
    BilinearUp2x,
    LayerNorm,
    SoftmaxLast,
    Elu,
    Sigmoid,
    Add,
    Mul,
    Scale,
    AddRowBias,
    ConcatChannels,
    ConcatCols,
    SliceCols,
    Reshape,
    TransposeLast2,
    Patchify,
    Unpatchify,
    Sum,
    Bce,
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BilinearUp2x { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxLast { x: Var },
    Elu { x: Var, alpha: f64 },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddRowBias { x: Var, bias: Var },
    ConcatChannels { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { x: Var, start: usize, len: usize },
    Reshape { x: Var },
    TransposeLast2 { x: Var },
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize },
    Sum { x: Var },
    Bce { pred: Var, target: Var, eps: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::BilinearUp2x { .. } => OpKind::BilinearUp2x,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxLast { .. } => OpKind::SoftmaxLast,
            Op::Elu { .. } => OpKind::Elu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddRowBias { .. } => OpKind::AddRowBias,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::TransposeLast2 { .. } => OpKind::TransposeLast2,
            Op::Patchify { .. } => OpKind::Patchify,
            Op::Unpatchify { .. } => OpKind::Unpatchify,
            Op::Sum { .. } => OpKind::Sum,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` call, if the node participated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy a node out as a standalone tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape nodes always have consistent shapes")
    }

    /// Record an input that does not receive gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
            .expect("tensor invariants already hold")
    }

    /// Record a learnable input; `backward` will produce a gradient for it.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
            .expect("tensor invariants already hold")
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Dim(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut data: Vec<f64>, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Primitive operations ───────────────────────────────────────────

    /// 2-D matrix product `[m×k]·[k×p] -> [m×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, p);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, vec![m, p], out, rg))
    }

    /// Same-padding cross-correlation with per-channel bias; kernel 1×1 or 3×3.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d: expected x [C,H,W] and w [O,C,k,k], got {sx:?} and {sw:?}"
            )));
        }
        let k = sw[2];
        if sw[3] != k || (k != 1 && k != 3) {
            return Err(Error::Dim(format!(
                "conv2d: kernel must be 1x1 or 3x3, got {sw:?}"
            )));
        }
        if sw[1] != sx[0] {
            return Err(Error::Dim(format!(
                "conv2d: input channels {} do not match kernel channels {} (x {sx:?}, w {sw:?})",
                sx[0], sw[1]
            )));
        }
        if sb != [sw[0]] {
            return Err(Error::Dim(format!(
                "conv2d: bias shape {sb:?} does not match output channels {}",
                sw[0]
            )));
        }
        let (c_out, c_in, h, wd) = (sw[0], sx[0], sx[1], sx[2]);
        let out = conv2d_raw(self.data(x), self.data(w), self.data(b), c_in, h, wd, c_out, k);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, k }, vec![c_out, h, wd], out, rg))
    }

    /// 2×2 max pooling with stride 2. Gradient flows to the first maximal
    /// element of each window in row-major scan order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || !sx[1].is_multiple_of(2) || !sx[2].is_multiple_of(2) {
            return Err(Error::Dim(format!(
                "maxpool2d: expected [C,H,W] with even H and W, got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (out, argmax) = maxpool2d_raw(self.data(x), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::MaxPool2d { x, argmax }, vec![c, h / 2, w / 2], out, rg))
    }

    /// Bilinear ×2 upsampling with half-pixel centers, edge-clamped.
    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dim(format!(
                "bilinear_upsample2x: expected [C,H,W], got {sx:?}"
            )));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let out = bilinear_up2x_raw(self.data(x), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::BilinearUp2x { x }, vec![c, 2 * h, 2 * w], out, rg))
    }

    /// Per-row layer normalization over the last axis with affine gamma/beta.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (sx, sg, sb) = (
            self.shape(x).to_vec(),
            self.shape(gamma).to_vec(),
            self.shape(beta).to_vec(),
        );
        if sx.len() != 2 {
            return Err(Error::Dim(format!("layernorm: expected [L,d], got {sx:?}")));
        }
        let d = sx[1];
        if sg != [d] || sb != [d] {
            return Err(Error::Dim(format!(
                "layernorm: gamma {sg:?} / beta {sb:?} do not match feature dim {d}"
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm: eps must be > 0, got {eps}")));
        }
        let l = sx[0];
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; l * d];
        let mut mean = vec![0.0; l];
        let mut inv_std = vec![0.0; l];
        for r in 0..l {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            for j in 0..d {
                out[r * d + j] = gd[j] * (row[j] - mu) * is + bd[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, mean, inv_std },
            vec![l, d],
            out,
            rg,
        ))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("shapes are non-empty");
        let rows = self.data(x).len() / d;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                out[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[r * d + j] /= sum;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SoftmaxLast { x }, sx, out, rg))
    }

    /// ELU activation: `x` for `x ≥ 0`, `alpha·(eˣ−1)` otherwise.
    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { alpha * (v.exp() - 1.0) })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Elu { x, alpha }, sx, out, rg))
    }

    /// Logistic sigmoid, stable for large |x|.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sigmoid { x }, sx, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dim(format!("add: shape {sa:?} does not match {sb:?}")));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add { a, b }, sa, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dim(format!("mul: shape {sa:?} does not match {sb:?}")));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, sa, out, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Scale { x, factor }, sx, out, rg))
    }

    /// `[R×C] + [C]`, the bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::Dim(format!(
                "add_row_bias: x {sx:?} is incompatible with bias {sb:?}"
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let bd = self.data(bias);
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bd[j];
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddRowBias { x, bias }, sx, out, rg))
    }

    /// Channel-wise concatenation of two `[C,H,W]` maps with equal spatial dims.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::Dim(format!(
                "concat_channels: spatial dims differ: {sa:?} vs {sb:?}"
            )));
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::ConcatChannels { a, b }, shape, out, rg))
    }

    /// Column-wise concatenation of two `[R×C]` matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dim(format!(
                "concat_cols: row counts differ: {sa:?} vs {sb:?}"
            )));
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; r * (ca + cb)];
        for i in 0..r {
            out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&ad[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::ConcatCols { a, b }, vec![r, ca + cb], out, rg))
    }

    /// Contiguous column slice `[R×C] -> [R×len]` starting at `start`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || len == 0 || start + len > sx[1] {
            return Err(Error::Dim(format!(
                "slice_cols: columns {start}..{} out of range for {sx:?}",
                start + len
            )));
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceCols { x, start, len }, vec![r, len], out, rg))
    }

    /// Row-major reshape; pure layout change, gradient passes through.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        validate_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::Dim(format!(
                "reshape: {:?} has {} elements, target {shape:?} wants {n}",
                self.shape(x),
                self.data(x).len()
            )));
        }
        let out = self.data(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape { x }, shape, out, rg))
    }

    /// Transpose the last two axes of an N-D tensor (N ≥ 2).
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Dim(format!(
                "transpose_last2: need at least 2 axes, got {sx:?}"
            )));
        }
        let (r, c) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let batch = self.data(x).len() / (r * c);
        let out = transpose_last2_raw(self.data(x), batch, r, c);
        let mut shape = sx;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::TransposeLast2 { x }, shape, out, rg))
    }

    /// Flatten an image into a row-major sequence of n×n patch tokens,
    /// channel-major within each token: `[C,H,W] -> [HW/n², C·n²]`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Config(format!("patchify: expected [C,H,W], got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "patchify: {h}x{w} image is not divisible by patch size {patch}"
            )));
        }
        let out = patchify_raw(self.data(x), c, h, w, patch);
        let s = (h / patch) * (w / patch);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Patchify { x, patch }, vec![s, c * patch * patch], out, rg))
    }

    /// Inverse of [`Tape::patchify`]: `[S, C·n²] -> [C,H,W]`.
    pub fn unpatchify(&mut self, x: Var, patch: usize, height: usize, width: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || patch == 0 {
            return Err(Error::Config(format!(
                "unpatchify: expected [S, C*n*n] with n > 0, got {sx:?}"
            )));
        }
        let (s, d) = (sx[0], sx[1]);
        let pn = patch * patch;
        if !d.is_multiple_of(pn) || !height.is_multiple_of(patch) || !width.is_multiple_of(patch)
            || s != (height / patch) * (width / patch)
        {
            return Err(Error::Config(format!(
                "unpatchify: tokens {sx:?} do not tile a {height}x{width} image with patch {patch}"
            )));
        }
        let c = d / pn;
        let out = unpatchify_raw(self.data(x), c, height, width, patch);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Unpatchify { x, patch }, vec![c, height, width], out, rg))
    }

    /// Sum of all elements, as a `[1]`-shaped scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Sum { x }, vec![1], vec![total], rg))
    }

    /// Mean binary cross-entropy with probabilities clamped to `[BCE_EPS, 1−BCE_EPS]`.
    /// `target` must be binary and is treated as a constant.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(target).to_vec());
        if sp != st {
            return Err(Error::Dim(format!(
                "bce_loss: prediction {sp:?} does not match target {st:?}"
            )));
        }
        if self.data(target).iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Validation(
                "bce_loss: target mask must contain only 0 and 1".into(),
            ));
        }
        let eps = BCE_EPS;
        let n = self.data(pred).len() as f64;
        let mut acc = 0.0;
        for (&p, &y) in self.data(pred).iter().zip(self.data(target)) {
            let pc = p.clamp(eps, 1.0 - eps);
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(Op::Bce { pred, target, eps }, vec![1], vec![acc / n], rg))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Populate gradients of every grad-requiring node reachable from `loss`.
    /// Repeated calls recompute from scratch (per-tape, not accumulating);
    /// accumulation across passes happens when gradients are harvested into
    /// parameter tensors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let p = self.nodes[b.0].shape[1];
                // dA += G·Bᵀ
                if self.nodes[a.0].requires_grad {
                    let bd = self.nodes[b.0].data.clone();
                    let ga = self.grad_slot(a).expect("checked requires_grad");
                    for i in 0..m {
                        for j in 0..k {
                            let mut s = 0.0;
                            for q in 0..p {
                                s += g[i * p + q] * bd[j * p + q];
                            }
                            ga[i * k + j] += s;
                        }
                    }
                }
                // dB += Aᵀ·G
                if self.nodes[b.0].requires_grad {
                    let ad = self.nodes[a.0].data.clone();
                    let gb = self.grad_slot(b).expect("checked requires_grad");
                    for i in 0..m {
                        let grow = &g[i * p..(i + 1) * p];
                        for j in 0..k {
                            let av = ad[i * k + j];
                            if av == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[j * p..(j + 1) * p];
                            for (d, go) in gbrow.iter_mut().zip(grow) {
                                *d += av * go;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, k } => {
                let (x, w, b, k) = (*x, *w, *b, *k);
                let (c_in, h, wd) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let c_out = self.nodes[w.0].shape[0];
                let pad = (k / 2) as isize;
                let xd = self.nodes[x.0].data.clone();
                let wdat = self.nodes[w.0].data.clone();
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; wdat.len()] } else { Vec::new() };
                let mut gb = if need_b { vec![0.0; c_out] } else { Vec::new() };
                for o in 0..c_out {
                    if need_b {
                        gb[o] += g[o * h * wd..(o + 1) * h * wd].iter().sum::<f64>();
                    }
                    for c in 0..c_in {
                        for u in 0..k {
                            let di = u as isize - pad;
                            let (i0, i1) = conv_valid_range(di, h);
                            for v in 0..k {
                                let dj = v as isize - pad;
                                let (j0, j1) = conv_valid_range(dj, wd);
                                if j0 >= j1 {
                                    continue;
                                }
                                let wi = ((o * c_in + c) * k + u) * k + v;
                                let wv = wdat[wi];
                                let mut wacc = 0.0;
                                for i in i0..i1 {
                                    let xbase = (c * h + (i as isize + di) as usize) * wd;
                                    let s0 = (j0 as isize + dj) as usize;
                                    let grow = &g[(o * h + i) * wd + j0..(o * h + i) * wd + j1];
                                    if need_x {
                                        let gxrow = &mut gx[xbase + s0..xbase + s0 + (j1 - j0)];
                                        for (d, go) in gxrow.iter_mut().zip(grow) {
                                            *d += wv * go;
                                        }
                                    }
                                    if need_w {
                                        let xrow = &xd[xbase + s0..xbase + s0 + (j1 - j0)];
                                        for (xv, go) in xrow.iter().zip(grow) {
                                            wacc += xv * go;
                                        }
                                    }
                                }
                                if need_w {
                                    gw[wi] += wacc;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    add_assign(self.grad_slot(x).expect("checked"), &gx);
                }
                if need_w {
                    add_assign(self.grad_slot(w).expect("checked"), &gw);
                }
                if need_b {
                    add_assign(self.grad_slot(b).expect("checked"), &gb);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                if let Some(gx) = self.grad_slot(x) {
                    for (out_i, &src) in argmax.iter().enumerate() {
                        gx[src] += g[out_i];
                    }
                }
            }
            Op::BilinearUp2x { x } => {
                let x = *x;
                let (c, h, w) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2])
                };
                if let Some(gx) = self.grad_slot(x) {
                    let (oh, ow) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for oi in 0..oh {
                            let (i0, i1, wy) = bilinear_coords(oi, h);
                            for oj in 0..ow {
                                let (j0, j1, wx) = bilinear_coords(oj, w);
                                let go = g[(ch * oh + oi) * ow + oj];
                                gx[(ch * h + i0) * w + j0] += go * (1.0 - wy) * (1.0 - wx);
                                gx[(ch * h + i0) * w + j1] += go * (1.0 - wy) * wx;
                                gx[(ch * h + i1) * w + j0] += go * wy * (1.0 - wx);
                                gx[(ch * h + i1) * w + j1] += go * wy * wx;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (l, d) = {
                    let s = &self.nodes[idx].shape;
                    (s[0], s[1])
                };
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                if self.nodes[beta.0].requires_grad {
                    let gb = self.grad_slot(beta).expect("checked");
                    for r in 0..l {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    let gg = self.grad_slot(gamma).expect("checked");
                    for r in 0..l {
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            gg[j] += g[r * d + j] * xhat;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_slot(x).expect("checked");
                    let dn = d as f64;
                    for r in 0..l {
                        // dxhat = g ⊙ gamma; dx = inv_std·(dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            let dxhat = g[r * d + j] * gd[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d {
                            let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                            let dxhat = g[r * d + j] * gd[j];
                            gx[r * d + j] +=
                                inv_std[r] * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                        }
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                let x = *x;
                let y = self.nodes[idx].data.clone();
                let d = *self.nodes[idx].shape.last().expect("non-empty");
                if let Some(gx) = self.grad_slot(x) {
                    let rows = y.len() / d;
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += g[r * d + j] * y[r * d + j];
                        }
                        for j in 0..d {
                            gx[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
                        }
                    }
                }
            }
            Op::Elu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let xd = self.nodes[x.0].data.clone();
                if let Some(gx) = self.grad_slot(x) {
                    for (i, &v) in xd.iter().enumerate() {
                        let d = if v >= 0.0 { 1.0 } else { alpha * v.exp() };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let y = self.nodes[idx].data.clone();
                if let Some(gx) = self.grad_slot(x) {
                    for i in 0..y.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if let Some(ga) = self.grad_slot(a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = self.grad_slot(b) {
                    add_assign(gb, g);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bd = self.nodes[b.0].data.clone();
                    let ga = self.grad_slot(a).expect("checked");
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let ad = self.nodes[a.0].data.clone();
                    let gb = self.grad_slot(b).expect("checked");
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                if let Some(gx) = self.grad_slot(x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * factor;
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = self.nodes[bias.0].shape[0];
                if let Some(gx) = self.grad_slot(x) {
                    add_assign(gx, g);
                }
                if let Some(gb) = self.grad_slot(bias) {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % c] += gv;
                    }
                }
            }
            Op::ConcatChannels { a, b } | Op::ConcatCols { a, b } => {
                // ConcatChannels is contiguous; ConcatCols needs row interleaving.
                let (a, b) = (*a, *b);
                match &self.nodes[idx].op {
                    Op::ConcatChannels { .. } => {
                        let na = self.nodes[a.0].data.len();
                        if let Some(ga) = self.grad_slot(a) {
                            add_assign(ga, &g[..na]);
                        }
                        if let Some(gb) = self.grad_slot(b) {
                            add_assign(gb, &g[na..]);
                        }
                    }
                    _ => {
                        let r = self.nodes[a.0].shape[0];
                        let ca = self.nodes[a.0].shape[1];
                        let cb = self.nodes[b.0].shape[1];
                        let ct = ca + cb;
                        if let Some(ga) = self.grad_slot(a) {
                            for i in 0..r {
                                for j in 0..ca {
                                    ga[i * ca + j] += g[i * ct + j];
                                }
                            }
                        }
                        if let Some(gb) = self.grad_slot(b) {
                            for i in 0..r {
                                for j in 0..cb {
                                    gb[i * cb + j] += g[i * ct + ca + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let c = self.nodes[x.0].shape[1];
                if let Some(gx) = self.grad_slot(x) {
                    let r = gx.len() / c;
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if let Some(gx) = self.grad_slot(x) {
                    add_assign(gx, g);
                }
            }
            Op::TransposeLast2 { x } => {
                let x = *x;
                let s = &self.nodes[idx].shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (r * c);
                let gt = transpose_last2_raw(g, batch, r, c);
                if let Some(gx) = self.grad_slot(x) {
                    add_assign(gx, &gt);
                }
            }
            Op::Patchify { x, patch } => {
                let (x, patch) = (*x, *patch);
                let (c, h, w) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2])
                };
                let gt = unpatchify_raw(g, c, h, w, patch);
                if let Some(gx) = self.grad_slot(x) {
                    add_assign(gx, &gt);
                }
            }
            Op::Unpatchify { x, patch } => {
                let (x, patch) = (*x, *patch);
                let (c, h, w) = {
                    let s = &self.nodes[idx].shape;
                    (s[0], s[1], s[2])
                };
                let gt = patchify_raw(g, c, h, w, patch);
                if let Some(gx) = self.grad_slot(x) {
                    add_assign(gx, &gt);
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if let Some(gx) = self.grad_slot(x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Bce { pred, target, eps } => {
                let (pred, target, eps) = (*pred, *target, *eps);
                let pd = self.nodes[pred.0].data.clone();
                let td = self.nodes[target.0].data.clone();
                let n = pd.len() as f64;
                if let Some(gp) = self.grad_slot(pred) {
                    for i in 0..pd.len() {
                        let p = pd[i];
                        if p < eps || p > 1.0 - eps {
                            continue; // clamped region is flat
                        }
                        gp[i] += g[0] * (p - td[i]) / (p * (1.0 - p)) / n;
                    }
                }
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Raw kernels shared with the pure tensor-level wrappers ─────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for q in 0..k {
            let av = a[i * k + q];
            if av == 0.0 {
                continue;
            }
            let brow = &b[q * p..(q + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Valid output-row/column range for one kernel offset `d = u − pad`:
/// output index i maps to input index i + d, which must stay in [0, size).
fn conv_valid_range(d: isize, size: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((size as isize - d).max(0) as usize).min(size);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_raw(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c_out * h * wd];
    for o in 0..c_out {
        out[o * h * wd..(o + 1) * h * wd].fill(b[o]);
        for c in 0..c_in {
            for u in 0..k {
                let di = u as isize - pad;
                let (i0, i1) = conv_valid_range(di, h);
                for v in 0..k {
                    let wv = w[((o * c_in + c) * k + u) * k + v];
                    if wv == 0.0 {
                        continue;
                    }
                    let dj = v as isize - pad;
                    let (j0, j1) = conv_valid_range(dj, wd);
                    for i in i0..i1 {
                        let xbase = (c * h + (i as isize + di) as usize) * wd;
                        let s0 = (j0 as isize + dj) as usize; // ≥ 0 by construction of j0
                        let src = &x[xbase + s0..xbase + s0 + (j1 - j0)];
                        let dst = &mut out[(o * h + i) * wd + j0..(o * h + i) * wd + j1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn maxpool2d_raw(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..2 {
                    for dj in 0..2 {
                        let src = (ch * h + 2 * i + di) * w + 2 * j + dj;
                        if x[src] > best {
                            best = x[src];
                            best_idx = src;
                        }
                    }
                }
                let oi = (ch * oh + i) * ow + j;
                out[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    (out, argmax)
}

/// Source index pair and interpolation weight for one output coordinate:
/// src = (dst+0.5)/2 − 0.5, clamped to [0, size−1].
fn bilinear_coords(dst: usize, size: usize) -> (usize, usize, f64) {
    let f = ((dst as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (size - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, f - i0 as f64)
}

pub(crate) fn bilinear_up2x_raw(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oi in 0..oh {
            let (i0, i1, wy) = bilinear_coords(oi, h);
            for oj in 0..ow {
                let (j0, j1, wx) = bilinear_coords(oj, w);
                let top = (1.0 - wx) * x[(ch * h + i0) * w + j0] + wx * x[(ch * h + i0) * w + j1];
                let bot = (1.0 - wx) * x[(ch * h + i1) * w + j0] + wx * x[(ch * h + i1) * w + j1];
                out[(ch * oh + oi) * ow + oj] = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    out
}

pub(crate) fn patchify_raw(x: &[f64], c: usize, h: usize, w: usize, n: usize) -> Vec<f64> {
    let (ph, pw) = (h / n, w / n);
    let d = c * n * n;
    let mut out = vec![0.0; ph * pw * d];
    for pi in 0..ph {
        for pj in 0..pw {
            let s = pi * pw + pj;
            for ch in 0..c {
                for i in 0..n {
                    for j in 0..n {
                        out[s * d + (ch * n + i) * n + j] =
                            x[(ch * h + pi * n + i) * w + pj * n + j];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify_raw(tokens: &[f64], c: usize, h: usize, w: usize, n: usize) -> Vec<f64> {
    let (ph, pw) = (h / n, w / n);
    let d = c * n * n;
    let mut out = vec![0.0; c * h * w];
    for pi in 0..ph {
        for pj in 0..pw {
            let s = pi * pw + pj;
            for ch in 0..c {
                for i in 0..n {
                    for j in 0..n {
                        out[(ch * h + pi * n + i) * w + pj * n + j] =
                            tokens[s * d + (ch * n + i) * n + j];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn transpose_last2_raw(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}
