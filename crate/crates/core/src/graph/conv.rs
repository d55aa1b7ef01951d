//! im2col based 2-D convolution and transposed convolution kernels.
//!
//! Samples are processed in chunks so that a whole chunk shares one gemm call;
//! chunk size only bounds memory. Reductions over the batch always run in
//! sample order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound on the number of elements in one im2col buffer.
const COL_BUDGET: usize = 1 << 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self, n: usize) -> usize {
        let per = (self.col_rows() * self.out_pixels()).max(1);
        (COL_BUDGET / per).clamp(1, n.max(1))
    }
}

/// Writes the patches of one image into columns `col0..col0 + oh*ow` of a
/// `[c*kh*kw, ld]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, col0: usize) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + g.oh * g.ow];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize - p;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, ld: usize, col0: usize, x: &mut [T]) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ch in 0..g.c {
        let plane = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + g.oh * g.ow];
                for oy in 0..g.oh {
                    let iy = oy as isize * s + ki as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s + kj as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, hw]` slice of samples `n0..n0+nb` into a `[c, nb*hw]` matrix.
fn gather_cn<T: Scalar>(src: &[T], c: usize, hw: usize, n0: usize, nb: usize, dst: &mut [T]) {
    let ld = nb * hw;
    for k in 0..nb {
        let sample = &src[(n0 + k) * c * hw..(n0 + k + 1) * c * hw];
        for ch in 0..c {
            dst[ch * ld + k * hw..ch * ld + (k + 1) * hw]
                .copy_from_slice(&sample[ch * hw..(ch + 1) * hw]);
        }
    }
}

/// Inverse of [`gather_cn`], overwriting the destination samples.
fn scatter_cn<T: Scalar>(src: &[T], c: usize, hw: usize, n0: usize, nb: usize, dst: &mut [T]) {
    let ld = nb * hw;
    for k in 0..nb {
        let sample = &mut dst[(n0 + k) * c * hw..(n0 + k + 1) * c * hw];
        for ch in 0..c {
            sample[ch * hw..(ch + 1) * hw]
                .copy_from_slice(&src[ch * ld + k * hw..ch * ld + (k + 1) * hw]);
        }
    }
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], hw: usize) {
    let c = bias.len();
    for (i, chunk) in y.chunks_mut(hw).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sums of a `[n, c, ...]` tensor.
pub fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let n = t.batch();
    let c = t.shape().get(1).copied().unwrap_or(1);
    let hw = t.per_sample() / c.max(1);
    let mut out = vec![T::zero(); c];
    for i in 0..n {
        let s = t.sample(i);
        for (ch, o) in out.iter_mut().enumerate() {
            *o += s[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
        }
    }
    out
}

fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "conv weight expects {wc} input channels, input has {c}"
        )));
    }
    Ok((n, o, ConvGeom::new(c, h, wd, kh, kw, stride, pad)?))
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, o, g) = conv_geom(x, w, stride, pad)?;
    let (rows, hw) = (g.col_rows(), g.out_pixels());
    let mut y = Tensor::zeros(&[n, o, g.oh, g.ow]);
    let nb_max = g.chunk(n);
    let mut cols = vec![T::zero(); rows * nb_max * hw];
    let mut tmp = vec![T::zero(); o * nb_max * hw];
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * hw;
        for k in 0..nb {
            im2col(x.sample(n0 + k), &g, &mut cols, ld, k * hw);
        }
        T::gemm(
            false,
            false,
            o,
            ld,
            rows,
            T::one(),
            w.data(),
            &cols[..rows * ld],
            T::zero(),
            &mut tmp[..o * ld],
        );
        scatter_cn(&tmp[..o * ld], o, hw, n0, nb, y.data_mut());
        n0 += nb;
    }
    if let Some(b) = b {
        add_channel_bias(y.data_mut(), b.data(), hw);
    }
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, o, g) = conv_geom(x, w, stride, pad)?;
    let (rows, hw) = (g.col_rows(), g.out_pixels());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let nb_max = g.chunk(n);
    let mut cols = vec![T::zero(); rows * nb_max * hw];
    let mut dyt = vec![T::zero(); o * nb_max * hw];
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * hw;
        gather_cn(dy.data(), o, hw, n0, nb, &mut dyt);
        if let Some(dw) = dw.as_mut() {
            for k in 0..nb {
                im2col(x.sample(n0 + k), &g, &mut cols, ld, k * hw);
            }
            T::gemm(
                false,
                true,
                o,
                rows,
                ld,
                T::one(),
                &dyt[..o * ld],
                &cols[..rows * ld],
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                true,
                false,
                rows,
                ld,
                o,
                T::one(),
                w.data(),
                &dyt[..o * ld],
                T::zero(),
                &mut cols[..rows * ld],
            );
            let per = g.c * g.h * g.w;
            for k in 0..nb {
                let s = n0 + k;
                col2im(
                    &cols,
                    &g,
                    ld,
                    k * hw,
                    &mut dx.data_mut()[s * per..(s + 1) * per],
                );
            }
        }
        n0 += nb;
    }
    Ok((dx, dw))
}

/// Output geometry of a transposed convolution, expressed as the forward
/// convolution it is the adjoint of.
fn transpose_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4()?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "transposed conv weight expects {wcin} input channels, input has {cin}"
        )));
    }
    let oh = ((h - 1) * stride + kh)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0);
    let ow = ((wd - 1) * stride + kw)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0);
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(
                "transposed convolution output would be empty".into(),
            ))
        }
    };
    let g = ConvGeom::new(cout, oh, ow, kh, kw, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    Ok((n, cin, g))
}

pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, g) = transpose_geom(x, w, stride, pad)?;
    let (rows, hw) = (g.col_rows(), g.out_pixels());
    let mut y = Tensor::zeros(&[n, g.c, g.h, g.w]);
    let nb_max = g.chunk(n);
    let mut xt = vec![T::zero(); cin * nb_max * hw];
    let mut cols = vec![T::zero(); rows * nb_max * hw];
    let per = g.c * g.h * g.w;
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * hw;
        gather_cn(x.data(), cin, hw, n0, nb, &mut xt);
        T::gemm(
            true,
            false,
            rows,
            ld,
            cin,
            T::one(),
            w.data(),
            &xt[..cin * ld],
            T::zero(),
            &mut cols[..rows * ld],
        );
        for k in 0..nb {
            let s = n0 + k;
            col2im(
                &cols,
                &g,
                ld,
                k * hw,
                &mut y.data_mut()[s * per..(s + 1) * per],
            );
        }
        n0 += nb;
    }
    if let Some(b) = b {
        add_channel_bias(y.data_mut(), b.data(), g.h * g.w);
    }
    Ok(y)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cin, g) = transpose_geom(x, w, stride, pad)?;
    let (rows, hw) = (g.col_rows(), g.out_pixels());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let nb_max = g.chunk(n);
    let mut xt = vec![T::zero(); cin * nb_max * hw];
    let mut cols = vec![T::zero(); rows * nb_max * hw];
    let mut n0 = 0;
    while n0 < n {
        let nb = nb_max.min(n - n0);
        let ld = nb * hw;
        for k in 0..nb {
            im2col(dy.sample(n0 + k), &g, &mut cols, ld, k * hw);
        }
        if let Some(dw) = dw.as_mut() {
            gather_cn(x.data(), cin, hw, n0, nb, &mut xt);
            T::gemm(
                false,
                true,
                cin,
                rows,
                ld,
                T::one(),
                &xt[..cin * ld],
                &cols[..rows * ld],
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                false,
                false,
                cin,
                ld,
                rows,
                T::one(),
                w.data(),
                &cols[..rows * ld],
                T::zero(),
                &mut xt[..cin * ld],
            );
            scatter_cn(&xt[..cin * ld], cin, hw, n0, nb, dx.data_mut());
        }
        n0 += nb;
    }
    Ok((dx, dw))
}
