//! Layer kernels. Every kernel works on a single sample so that results do
//! not depend on how a batch is partitioned.

use matrixmultiply::sgemm;

/// Static description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Tanh,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: 0,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Weight shape and fan-in for parameterized layers.
    pub fn weight_shape(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
            )),
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], inputs)),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            LayerSpec::Dense { outputs, .. } => Some(outputs),
            _ => None,
        }
    }
}

/// Spatial output size of a convolution: `floor((n + 2 pad - k) / stride) + 1`.
pub fn conv_out_dim(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C k k, OH OW]` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and accumulates into `dx`.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// `c[m x n] = beta c + a[m x k] b[k x n]`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller-provided strides address only elements inside `a`,
    // `b` and `c`, which is asserted in debug builds by the slice lengths.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom, col: &mut [f32], y: &mut [f32]) {
    im2col(x, g, col);
    let (ck, p) = (g.col_rows(), g.col_cols());
    let cout = b.len();
    gemm(cout, ck, p, w, (ck as isize, 1), col, (p as isize, 1), 0.0, y);
    for (o, &bias) in b.iter().enumerate() {
        y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bias);
    }
}

/// Accumulates weight and bias gradients and writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    col: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
    dx: &mut [f32],
) {
    let (ck, p) = (g.col_rows(), g.col_cols());
    let cout = db.len();
    im2col(x, g, col);
    // dW += dY colᵀ
    gemm(cout, p, ck, dy, (p as isize, 1), col, (1, p as isize), 1.0, dw);
    for (o, d) in db.iter_mut().enumerate() {
        *d += dy[o * p..(o + 1) * p].iter().sum::<f32>();
    }
    // dcol = Wᵀ dY
    gemm(ck, cout, p, w, (1, ck as isize), dy, (p as isize, 1), 0.0, col);
    dx.iter_mut().for_each(|v| *v = 0.0);
    col2im(col, g, dx);
}

/// Batched `y[N, out] = x[N, in] Wᵀ + b`.
pub(crate) fn dense_forward(n: usize, x: &[f32], w: &[f32], b: &[f32], y: &mut [f32]) {
    let outs = b.len();
    let ins = x.len() / n.max(1);
    gemm(n, ins, outs, x, (ins as isize, 1), w, (1, ins as isize), 0.0, y);
    for row in y.chunks_exact_mut(outs) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
}

/// Accumulates `dW += dYᵀ X`, `db += Σ dY` and writes `dX = dY W`.
pub(crate) fn dense_backward(n: usize, x: &[f32], w: &[f32], dy: &[f32], dw: &mut [f32], db: &mut [f32], dx: &mut [f32]) {
    let outs = db.len();
    let ins = x.len() / n.max(1);
    gemm(outs, n, ins, dy, (1, outs as isize), x, (ins as isize, 1), 1.0, dw);
    for row in dy.chunks_exact(outs) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    gemm(n, outs, ins, dy, (outs as isize, 1), w, (ins as isize, 1), 0.0, dx);
}
