//! Dense row-major tensors and the primitive kernels the engine is built on.
//!
//! Every kernel here is a pure function. The tape in [`crate::autodiff`]
//! wraps them and supplies the matching vector-Jacobian products, which
//! also live in this module so that forward and reverse stay side by side.

use std::fmt;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("holds {} elements, data has {}", n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("valid shape");
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(
            &[n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Rows `[start, end)` along the leading (batch) axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    /// Gathers the given leading-axis rows into a new tensor.
    pub fn gather_batch(&self, rows: &[usize]) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or(TensorError::EmptyBatch("concat_batch"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(mismatch(
                    "concat_batch",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self { shape, data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64_lossy()))
                .collect(),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive and rank at least 1".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GEMM helpers on raw row-major slices.

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix product and dense (fully connected) layer.

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, &b.data, &mut out);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut ga = vec![T::zero(); m * k];
    gemm_nt(m, n, k, &g.data, &b.data, &mut ga);
    let mut gb = vec![T::zero(); k * n];
    gemm_tn(k, m, n, &a.data, &g.data, &mut gb);
    (
        Tensor {
            shape: a.shape.clone(),
            data: ga,
        },
        Tensor {
            shape: b.shape.clone(),
            data: gb,
        },
    )
}

/// `y = x·Wᵀ + b` with `x[N×in]`, `W[out×in]`, `b[out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[1] {
        return Err(mismatch(
            "linear",
            format!("input {:?}, weight {:?}", x.shape, w.shape),
        ));
    }
    let (n, fin, fout) = (x.shape[0], x.shape[1], w.shape[0]);
    let mut out = vec![T::zero(); n * fout];
    if let Some(b) = b {
        if b.shape != [fout] {
            return Err(mismatch(
                "linear",
                format!("bias {:?} for {} outputs", b.shape, fout),
            ));
        }
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(&b.data);
        }
    }
    gemm_nt(n, fin, fout, &x.data, &w.data, &mut out);
    Tensor::new(vec![n, fout], out)
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, fin, fout) = (x.shape[0], x.shape[1], w.shape[0]);
    let mut gx = vec![T::zero(); n * fin];
    gemm(n, fout, fin, &g.data, &w.data, &mut gx);
    let mut gw = vec![T::zero(); fout * fin];
    gemm_tn(fout, n, fin, &g.data, &x.data, &mut gw);
    let mut gb = vec![T::zero(); fout];
    for row in g.data.chunks(fout) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: gx,
        },
        Tensor {
            shape: w.shape.clone(),
            data: gw,
        },
        Tensor {
            shape: vec![fout],
            data: gb,
        },
    )
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation, no kernel flip) via im2col.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeometry {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(mismatch("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(TensorError::KernelTooLarge {
                kernel: (kh, kw),
                input: (ph, pw),
            });
        }
        Ok(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel index for (channel, kernel row, kernel col, out row, out col)
    /// or `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, c: usize, i: usize, j: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + i) as isize - self.padding as isize;
        let x = (ox * self.stride + j) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((c * self.h + y as usize) * self.w + x as usize)
        }
    }

    /// One sample `[Cin×H×W]` to columns `[Cin·kh·kw × OH·OW]`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(c, i, j, oy, ox) {
                                Some(s) => x[s],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let p = self.positions();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(s) = self.source(c, i, j, oy, ox) {
                                gx[s] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGeometry> {
    if x.rank() != 4 || w.rank() != 4 || x.shape[1] != w.shape[1] {
        return Err(mismatch(
            "conv2d",
            format!("input {:?}, weight {:?}", x.shape, w.shape),
        ));
    }
    Conv2dGeometry::new(
        x.shape[1], x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, padding,
    )
}

/// `x[N×Cin×H×W] ⋆ w[Cout×Cin×kh×kw] + b[Cout]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = conv_geometry(x, w, stride, padding)?;
    let (n, cout) = (x.shape[0], w.shape[0]);
    if let Some(b) = b {
        if b.shape != [cout] {
            return Err(mismatch(
                "conv2d",
                format!("bias {:?} for {} channels", b.shape, cout),
            ));
        }
    }
    let (kl, p) = (geo.patch_len(), geo.positions());
    let in_per = geo.cin * geo.h * geo.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = vec![T::zero(); kl * p];
    for s in 0..n {
        geo.im2col(&x.data[s * in_per..(s + 1) * in_per], &mut cols);
        let dst = &mut out[s * cout * p..(s + 1) * cout * p];
        if let Some(b) = b {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data[co]);
            }
        }
        gemm(cout, kl, p, &w.data, &cols, dst);
    }
    Tensor::new(vec![n, cout, geo.oh, geo.ow], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let geo = conv_geometry(x, w, stride, padding).expect("geometry validated in forward");
    let (n, cout) = (x.shape[0], w.shape[0]);
    let (kl, p) = (geo.patch_len(), geo.positions());
    let in_per = geo.cin * geo.h * geo.w;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = vec![T::zero(); cout];
    let mut cols = vec![T::zero(); kl * p];
    let mut gcols = vec![T::zero(); kl * p];
    for s in 0..n {
        let gs = &g.data[s * cout * p..(s + 1) * cout * p];
        geo.im2col(&x.data[s * in_per..(s + 1) * in_per], &mut cols);
        gemm_nt(cout, p, kl, gs, &cols, &mut gw);
        gcols.fill(T::zero());
        gemm_tn(kl, cout, p, &w.data, gs, &mut gcols);
        geo.col2im(&gcols, &mut gx[s * in_per..(s + 1) * in_per]);
        for (co, chunk) in gs.chunks(p).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: gx,
        },
        Tensor {
            shape: w.shape.clone(),
            data: gw,
        },
        Tensor {
            shape: vec![cout],
            data: gb,
        },
    )
}

// ---------------------------------------------------------------------------
// Batch normalization over [N×C×H×W].

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-channel mean and population variance over batch and spatial axes.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    if x.rank() != 4 {
        return Err(mismatch(
            "channel_stats",
            format!("expected NCHW, got {:?}", x.shape),
        ));
    }
    let (n, c) = (x.shape[0], x.shape[1]);
    let hw = x.shape[2] * x.shape[3];
    let count = T::from_usize_lossy(n * hw);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (s * c + ch) * hw;
            *m += x.data[base..base + hw].iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for &v in &x.data[base..base + hw] {
                let d = v - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= count;
    }
    Ok((mean, var))
}

/// Output of a batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnForward<T> {
    pub y: Tensor<T>,
    /// Normalized input, kept for the backward pass.
    pub xhat: Tensor<T>,
    /// `1/sqrt(var + eps)` per channel.
    pub inv_std: Vec<T>,
    /// Updated `(running_mean, running_var)` in training mode.
    pub running: Option<(Tensor<T>, Tensor<T>)>,
}

pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BnMode,
) -> Result<BnForward<T>> {
    if x.rank() != 4 {
        return Err(mismatch(
            "batchnorm2d",
            format!("expected NCHW, got {:?}", x.shape),
        ));
    }
    let c = x.shape[1];
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape != [c] {
            return Err(mismatch(
                "batchnorm2d",
                format!("{} {:?} for {} channels", name, t.shape, c),
            ));
        }
    }
    let eps = T::lit(BN_EPS);
    let (mean, var, running) = match mode {
        BnMode::Train => {
            if x.shape[0] == 0 {
                return Err(TensorError::EmptyBatch("batchnorm2d"));
            }
            let (mean, var) = channel_stats(x)?;
            let m = T::lit(BN_MOMENTUM);
            let count = x.shape[0] * x.shape[2] * x.shape[3];
            // running variance tracks the unbiased estimate, as in common frameworks
            let unbias = if count > 1 {
                T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
            } else {
                T::one()
            };
            let rm = Tensor::from_fn(&[c], |i| {
                (T::one() - m) * running_mean.data[i] + m * mean[i]
            });
            let rv = Tensor::from_fn(&[c], |i| {
                (T::one() - m) * running_var.data[i] + m * var[i] * unbias
            });
            (mean, var, Some((rm, rv)))
        }
        BnMode::Eval => (running_mean.data.clone(), running_var.data.clone(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let hw = x.shape[2] * x.shape[3];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for (idx, (&v, (xh, yv))) in x
        .data
        .iter()
        .zip(xhat.iter_mut().zip(y.iter_mut()))
        .enumerate()
    {
        let ch = (idx / hw) % c;
        *xh = (v - mean[ch]) * inv_std[ch];
        *yv = gamma.data[ch] * *xh + beta.data[ch];
    }
    Ok(BnForward {
        y: Tensor {
            shape: x.shape.clone(),
            data: y,
        },
        xhat: Tensor {
            shape: x.shape.clone(),
            data: xhat,
        },
        inv_std,
        running,
    })
}

/// Gradients `(gx, ggamma, gbeta)`.
pub(crate) fn batchnorm2d_backward<T: Scalar>(
    fwd_xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    mode: BnMode,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = &fwd_xhat.shape;
    let (n, c) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for (idx, (&gv, &xh)) in g.data.iter().zip(&fwd_xhat.data).enumerate() {
        let ch = (idx / hw) % c;
        ggamma[ch] += gv * xh;
        gbeta[ch] += gv;
    }
    let mut gx = vec![T::zero(); g.numel()];
    match mode {
        BnMode::Eval => {
            for (idx, (o, &gv)) in gx.iter_mut().zip(&g.data).enumerate() {
                let ch = (idx / hw) % c;
                *o = gv * gamma.data[ch] * inv_std[ch];
            }
        }
        BnMode::Train => {
            let m = T::from_usize_lossy(n * hw);
            for (idx, (o, (&gv, &xh))) in gx
                .iter_mut()
                .zip(g.data.iter().zip(&fwd_xhat.data))
                .enumerate()
            {
                let ch = (idx / hw) % c;
                *o = gamma.data[ch] * inv_std[ch] / m * (m * gv - gbeta[ch] - xh * ggamma[ch]);
            }
        }
    }
    (
        Tensor {
            shape: shape.clone(),
            data: gx,
        },
        Tensor {
            shape: vec![c],
            data: ggamma,
        },
        Tensor {
            shape: vec![c],
            data: gbeta,
        },
    )
}

// ---------------------------------------------------------------------------
// Elementwise, pooling, reshaping and losses.

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

/// Non-overlapping `k×k` average pooling (stride `k`, trailing rows/cols dropped).
pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 || k == 0 || x.shape[2] < k || x.shape[3] < k {
        return Err(mismatch(
            "avgpool2d",
            format!("input {:?}, kernel {}", x.shape, k),
        ));
    }
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::from_usize_lossy(k * k);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        acc += src[(oy * k + i) * w + ox * k + j];
                    }
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn avgpool2d_backward<T: Scalar>(
    x_shape: &[usize],
    k: usize,
    g: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::from_usize_lossy(k * k);
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &g.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * norm;
                for i in 0..k {
                    for j in 0..k {
                        dst[(oy * k + i) * w + ox * k + j] += v;
                    }
                }
            }
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: gx,
    }
}

/// `[N×…] → [N×rest]`.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape[0];
    let rest = x.numel() / n;
    Tensor {
        shape: vec![n, rest],
        data: x.data.clone(),
    }
}

/// Row-wise softmax of `logits[N×K]`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(mismatch(
            "softmax",
            format!("expected N×K, got {:?}", logits.shape),
        ));
    }
    let k = logits.shape[1];
    let mut out = logits.data.clone();
    for row in out.chunks_mut(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Mean cross-entropy of `logits[N×K]` against integer labels.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (loss, _) = softmax_xent_with_probs(logits, labels)?;
    Ok(loss)
}

pub(crate) fn softmax_xent_with_probs<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape[0] != labels.len() {
        return Err(mismatch(
            "softmax_xent",
            format!("logits {:?} with {} labels", logits.shape, labels.len()),
        ));
    }
    let k = logits.shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(mismatch(
            "softmax_xent",
            format!("label {} out of {} classes", bad, k),
        ));
    }
    let probs = softmax(logits)?;
    let n = labels.len();
    let mut loss = T::zero();
    for (row, &lab) in logits.data.chunks(k).zip(labels) {
        // log-sum-exp form for stability
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        loss += lse - row[lab];
    }
    Ok((loss / T::from_usize_lossy(n), probs))
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.numel() != target.numel() || pred.shape[0] != target.shape[0] {
        return Err(mismatch(
            "mse",
            format!("{:?} vs {:?}", pred.shape, target.shape),
        ));
    }
    let s: T = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / T::from_usize_lossy(pred.numel()))
}
