//! Raw convolution kernels over HWC slices.
//!
//! Convolutions use zero "same" padding: the output extent is `ceil(H / stride)`
//! and the total padding `max((out - 1) * stride + k - H, 0)` is split with the
//! smaller half on the top/left. The transposed convolution is defined as the
//! exact adjoint of that convolution, so its output extent is `stride * H`.

use crate::scalar::Scalar;

/// Geometry of a strided same-padded convolution over an `h × w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same(h: usize, w: usize, k: usize, stride: usize) -> Self {
        let out_h = h.div_ceil(stride);
        let out_w = w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + k).saturating_sub(h);
        let pad_w = ((out_w - 1) * stride + k).saturating_sub(w);
        Self {
            h,
            w,
            k,
            stride,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    /// Geometry with an explicit symmetric zero padding.
    pub fn padded(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (h + 2 * pad).saturating_sub(k) / stride + 1;
        let out_w = (w + 2 * pad).saturating_sub(k) / stride + 1;
        Self {
            h,
            w,
            k,
            stride,
            out_h,
            out_w,
            pad_top: pad,
            pad_left: pad,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row/column tapped by output `o` and kernel offset `kk`, if inside.
    #[inline]
    fn src(&self, o: usize, kk: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x` (`h × w × c`) into `[out_pixels, k*k*c]` patches.
pub fn im2col<T: Scalar>(x: &[T], c: usize, g: &ConvGeom) -> Vec<T> {
    let row = g.k * g.k * c;
    let mut cols = vec![T::zero(); g.out_pixels() * row];
    for oy in 0..g.out_h {
        for ky in 0..g.k {
            let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                continue;
            };
            for ox in 0..g.out_w {
                let dst = (oy * g.out_w + ox) * row + ky * g.k * c;
                for kx in 0..g.k {
                    if let Some(ix) = g.src(ox, kx, g.pad_left, g.w) {
                        let s = (iy * g.w + ix) * c;
                        cols[dst + kx * c..dst + (kx + 1) * c].copy_from_slice(&x[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patches back, accumulating into `out`.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, g: &ConvGeom, out: &mut [T]) {
    let row = g.k * g.k * c;
    for oy in 0..g.out_h {
        for ky in 0..g.k {
            let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                continue;
            };
            for ox in 0..g.out_w {
                let src = (oy * g.out_w + ox) * row + ky * g.k * c;
                for kx in 0..g.k {
                    if let Some(ix) = g.src(ox, kx, g.pad_left, g.w) {
                        let d = (iy * g.w + ix) * c;
                        for (o, &v) in out[d..d + c].iter_mut().zip(&cols[src + kx * c..]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for px in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in px.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], c: usize, db: &mut [T]) {
    for px in g.chunks_exact(c) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d += v;
        }
    }
}

/// `y = conv(x, w) + b` with `w` laid out `[k, k, cin, cout]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let kdim = g.k * g.k * cin;
    let m = g.out_pixels();
    let mut out = vec![T::zero(); m * cout];
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(x, cin, g);
        &owned
    };
    T::gemm(
        m,
        kdim,
        cout,
        T::one(),
        cols,
        kdim as isize,
        1,
        w,
        cout as isize,
        1,
        T::zero(),
        &mut out,
        cout as isize,
        1,
    );
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

/// Gradients of [`conv2d_forward`]; each destination is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    w: &[T],
    cout: usize,
    gy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kdim = g.k * g.k * cin;
    let m = g.out_pixels();
    let pointwise = g.is_pointwise();
    if let Some(dw) = dw {
        let owned;
        let cols: &[T] = if pointwise {
            x
        } else {
            owned = im2col(x, cin, g);
            &owned
        };
        // dw[kdim, cout] += colsᵀ · gy
        T::gemm(
            kdim,
            m,
            cout,
            T::one(),
            cols,
            1,
            kdim as isize,
            gy,
            cout as isize,
            1,
            T::one(),
            dw,
            cout as isize,
            1,
        );
    }
    if let Some(db) = db {
        bias_grad(gy, cout, db);
    }
    if let Some(dx) = dx {
        if pointwise {
            T::gemm(
                m,
                cout,
                kdim,
                T::one(),
                gy,
                cout as isize,
                1,
                w,
                1,
                cout as isize,
                T::one(),
                dx,
                kdim as isize,
                1,
            );
        } else {
            let mut dcols = vec![T::zero(); m * kdim];
            T::gemm(
                m,
                cout,
                kdim,
                T::one(),
                gy,
                cout as isize,
                1,
                w,
                1,
                cout as isize,
                T::zero(),
                &mut dcols,
                kdim as isize,
                1,
            );
            col2im(&dcols, cin, g, dx);
        }
    }
}

/// Transposed convolution: the adjoint of a `[k, k, cout, cin]` convolution
/// that maps the large `g.h × g.w × cout` grid onto the `g.out_h × g.out_w × cin`
/// input `x`.
pub fn deconv2d_forward<T: Scalar>(
    x: &[T],
    cin: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let kdim = g.k * g.k * cout;
    let m = g.out_pixels();
    let mut out = vec![T::zero(); g.h * g.w * cout];
    if g.is_pointwise() {
        T::gemm(
            m,
            cin,
            kdim,
            T::one(),
            x,
            cin as isize,
            1,
            w,
            1,
            cin as isize,
            T::zero(),
            &mut out,
            kdim as isize,
            1,
        );
    } else {
        let mut cols = vec![T::zero(); m * kdim];
        T::gemm(
            m,
            cin,
            kdim,
            T::one(),
            x,
            cin as isize,
            1,
            w,
            1,
            cin as isize,
            T::zero(),
            &mut cols,
            kdim as isize,
            1,
        );
        col2im(&cols, cout, g, &mut out);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

/// Gradients of [`deconv2d_forward`]; each destination is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    w: &[T],
    cout: usize,
    gy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kdim = g.k * g.k * cout;
    let m = g.out_pixels();
    if let Some(db) = db {
        bias_grad(gy, cout, db);
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        gy
    } else {
        owned = im2col(gy, cout, g);
        &owned
    };
    if let Some(dx) = dx {
        // dx[m, cin] += cols · w
        T::gemm(
            m,
            kdim,
            cin,
            T::one(),
            cols,
            kdim as isize,
            1,
            w,
            cin as isize,
            1,
            T::one(),
            dx,
            cin as isize,
            1,
        );
    }
    if let Some(dw) = dw {
        // dw[kdim, cin] += colsᵀ · x
        T::gemm(
            kdim,
            m,
            cin,
            T::one(),
            cols,
            1,
            kdim as isize,
            x,
            cin as isize,
            1,
            T::one(),
            dw,
            cin as isize,
            1,
        );
    }
}

/// Depthwise convolution, one `k × k` filter per channel, `w` laid out `[k, k, c]`.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    c: usize,
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_pixels() * c];
    for oy in 0..g.out_h {
        for ky in 0..g.k {
            let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                continue;
            };
            for ox in 0..g.out_w {
                let o = (oy * g.out_w + ox) * c;
                for kx in 0..g.k {
                    if let Some(ix) = g.src(ox, kx, g.pad_left, g.w) {
                        let s = (iy * g.w + ix) * c;
                        let wk = &w[(ky * g.k + kx) * c..(ky * g.k + kx + 1) * c];
                        for ((dst, &xv), &wv) in out[o..o + c].iter_mut().zip(&x[s..s + c]).zip(wk) {
                            *dst += xv * wv;
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    c: usize,
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(db) = db {
        bias_grad(gy, c, db);
    }
    for oy in 0..g.out_h {
        for ky in 0..g.k {
            let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                continue;
            };
            for ox in 0..g.out_w {
                let o = (oy * g.out_w + ox) * c;
                let go = &gy[o..o + c];
                for kx in 0..g.k {
                    if let Some(ix) = g.src(ox, kx, g.pad_left, g.w) {
                        let s = (iy * g.w + ix) * c;
                        let kw = (ky * g.k + kx) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            for ((d, &gv), &wv) in dx[s..s + c].iter_mut().zip(go).zip(&w[kw..kw + c]) {
                                *d += gv * wv;
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            for ((d, &gv), &xv) in dw[kw..kw + c].iter_mut().zip(go).zip(&x[s..s + c]) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}
