//! Raw forward/backward loops over flat buffers. Shapes are validated by the
//! callers in [`crate::tape`]; these functions only do arithmetic.

use crate::scalar::Scalar;

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

/// d/dx of x·Φ(x) = Φ(x) + x·φ(x).
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `dA += dC · Bᵀ`.
pub fn matmul_grad_a<T: Scalar>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in dcrow.iter().zip(brow) {
                s = s + x * y;
            }
            da[i * k + p] = da[i * k + p] + s;
        }
    }
}

/// `dB += Aᵀ · dC`.
pub fn matmul_grad_b<T: Scalar>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d = *d + av * g;
            }
        }
    }
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    pub fn macs(&self) -> u64 {
        (self.out_h() * self.out_w() * self.kh * self.kw * self.cin_per_group() * self.cout) as u64
    }

    /// Input coordinate for an output position and kernel tap, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Cross-correlation over `H×W×Cin` with weights `kh×kw×(Cin/g)×Cout`.
pub fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let mut out = vec![T::zero(); ho * wo * g.cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let orow = &mut out[(oy * wo + ox) * g.cout..(oy * wo + ox + 1) * g.cout];
            if let Some(b) = bias {
                orow.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xpix = &x[(iy * g.w + ix) * g.cin..(iy * g.w + ix + 1) * g.cin];
                    let wtap = &w[(ky * g.kw + kx) * cig * g.cout..(ky * g.kw + kx + 1) * cig * g.cout];
                    for grp in 0..g.groups {
                        let oslice = &mut orow[grp * cog..(grp + 1) * cog];
                        for ci in 0..cig {
                            let xv = xpix[grp * cig + ci];
                            let wrow = &wtap[ci * g.cout + grp * cog..ci * g.cout + (grp + 1) * cog];
                            for (o, &wv) in oslice.iter_mut().zip(wrow) {
                                *o = *o + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    if let Some(db) = db {
        for p in 0..ho * wo {
            for (d, &v) in db.iter_mut().zip(&dout[p * g.cout..(p + 1) * g.cout]) {
                *d = *d + v;
            }
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    for oy in 0..ho {
        for ox in 0..wo {
            let orow = &dout[(oy * wo + ox) * g.cout..(oy * wo + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xbase = (iy * g.w + ix) * g.cin;
                    let wbase = (ky * g.kw + kx) * cig * g.cout;
                    for grp in 0..g.groups {
                        let oslice = &orow[grp * cog..(grp + 1) * cog];
                        for ci in 0..cig {
                            let xi = xbase + grp * cig + ci;
                            let wi = wbase + ci * g.cout + grp * cog;
                            if let Some(dx) = dx.as_deref_mut() {
                                let mut s = T::zero();
                                for (&o, &wv) in oslice.iter().zip(&w[wi..wi + cog]) {
                                    s = s + o * wv;
                                }
                                dx[xi] = dx[xi] + s;
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                let xv = x[xi];
                                for (d, &o) in dw[wi..wi + cog].iter_mut().zip(oslice) {
                                    *d = *d + xv * o;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping `k×k` average pooling of `H×W×C`.
pub fn avgpool<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).expect("pool size");
    let mut out = vec![T::zero(); ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let orow = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for dy in 0..k {
                for dx in 0..k {
                    let (iy, ix) = (oy * k + dy, ox * k + dx);
                    for (o, &v) in orow.iter_mut().zip(&x[(iy * w + ix) * c..(iy * w + ix + 1) * c]) {
                        *o = *o + v;
                    }
                }
            }
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(dout: &[T], dx: &mut [T], h: usize, w: usize, c: usize, k: usize) {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).expect("pool size");
    for oy in 0..ho {
        for ox in 0..wo {
            let orow = &dout[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for dy in 0..k {
                for ddx in 0..k {
                    let (iy, ix) = (oy * k + dy, ox * k + ddx);
                    for (d, &g) in dx[(iy * w + ix) * c..(iy * w + ix + 1) * c].iter_mut().zip(orow) {
                        *d = *d + g * inv;
                    }
                }
            }
        }
    }
}

/// Layer norm over rows of length `c`. Returns `(y, xhat, rstd)`.
pub fn layernorm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], c: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let cn = T::from_usize(c).expect("channels");
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let xh = (row[j] - mean) * rs;
            xhat[r * c + j] = xh;
            y[r * c + j] = xh * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    c: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = dy.len() / c;
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..c {
                dg[j] = dg[j] + dy[r * c + j] * xhat[r * c + j];
            }
        }
    }
    if let Some(dbt) = dbeta {
        for r in 0..rows {
            for j in 0..c {
                dbt[j] = dbt[j] + dy[r * c + j];
            }
        }
    }
    if let Some(dx) = dx {
        let cn = T::from_usize(c).expect("channels");
        for r in 0..rows {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for j in 0..c {
                let gh = dy[r * c + j] * gamma[j];
                sum_g = sum_g + gh;
                sum_gx = sum_gx + gh * xhat[r * c + j];
            }
            for j in 0..c {
                let gh = dy[r * c + j] * gamma[j];
                let v = rstd[r] * (gh - sum_g / cn - xhat[r * c + j] * sum_gx / cn);
                dx[r * c + j] = dx[r * c + j] + v;
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            s = s + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / s;
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T], n: usize) {
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = *d + yv * (g - dot);
        }
    }
}

/// Source taps for one output coordinate of an align-corners-false resize.
#[derive(Debug, Clone, Copy)]
pub struct ResizeTap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub fn resize_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<ResizeTap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            ResizeTap {
                lo,
                hi,
                frac: T::from_f64_lossy(frac),
            }
        })
        .collect()
}

/// Bilinear resize in lerp form, so equal neighbours reproduce exactly.
pub fn bilinear_resize<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    let px = |y: usize, xx: usize, ch: usize| x[(y * w + xx) * c + ch];
    for (oy, vy) in ty.iter().enumerate() {
        for (ox, vx) in tx.iter().enumerate() {
            for ch in 0..c {
                let a = px(vy.lo, vx.lo, ch);
                let b = px(vy.lo, vx.hi, ch);
                let cc = px(vy.hi, vx.lo, ch);
                let d = px(vy.hi, vx.hi, ch);
                let top = a + vx.frac * (b - a);
                let bottom = cc + vx.frac * (d - cc);
                out[(oy * ow + ox) * c + ch] = top + vy.frac * (bottom - top);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_resize_backward<T: Scalar>(
    dout: &[T],
    dx: &mut [T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) {
    let ty = resize_taps::<T>(h, oh);
    let tx = resize_taps::<T>(w, ow);
    for (oy, vy) in ty.iter().enumerate() {
        for (ox, vx) in tx.iter().enumerate() {
            let wy = [(vy.lo, T::one() - vy.frac), (vy.hi, vy.frac)];
            let wx = [(vx.lo, T::one() - vx.frac), (vx.hi, vx.frac)];
            for ch in 0..c {
                let g = dout[(oy * ow + ox) * c + ch];
                for &(yy, fy) in &wy {
                    for &(xx, fx) in &wx {
                        let i = (yy * w + xx) * c + ch;
                        dx[i] = dx[i] + g * fy * fx;
                    }
                }
            }
        }
    }
}

/// `H×W×C → H/2×W/2×4C`, channel blocks ordered (0,0), (1,0), (0,1), (1,1).
pub fn space_to_depth<T: Scalar>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            for (blk, (dy, dx)) in MERGE_ORDER.iter().enumerate() {
                let src = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                let dst = (oy * wo + ox) * 4 * c + blk * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

pub fn space_to_depth_backward<T: Scalar>(dout: &[T], dx: &mut [T], h: usize, w: usize, c: usize) {
    let (ho, wo) = (h / 2, w / 2);
    for oy in 0..ho {
        for ox in 0..wo {
            for (blk, (dy, ddx)) in MERGE_ORDER.iter().enumerate() {
                let src = ((2 * oy + dy) * w + 2 * ox + ddx) * c;
                let dst = (oy * wo + ox) * 4 * c + blk * c;
                for k in 0..c {
                    dx[src + k] = dx[src + k] + dout[dst + k];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series of erf; converges for the moderate arguments used here.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_matches_series_erf() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let want = 0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
            assert!((gelu(x) - want).abs() < 1e-12, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for i in -30..=30 {
            let x = i as f64 * 0.13;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn small_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn conv_identity_kernel_and_padding() {
        let g = ConvGeom { h: 3, w: 3, cin: 1, kh: 3, kw: 3, cout: 1, stride: 1, padding: 1, groups: 1 };
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        assert_eq!(conv2d(&x, &k, None, &g), x);
        let ones = vec![1.0; 9];
        let y = conv2d(&x, &ones, Some(&[0.5]), &g);
        // Corner sees 1+2+4+5, centre sees everything.
        assert_eq!(y[0], 12.5);
        assert_eq!(y[4], 45.5);
        assert_eq!(g.macs(), 81);
    }

    #[test]
    fn strided_conv_geometry() {
        let g = ConvGeom { h: 224, w: 224, cin: 3, kh: 3, kw: 3, cout: 32, stride: 2, padding: 1, groups: 1 };
        assert_eq!((g.out_h(), g.out_w()), (112, 112));
    }

    #[test]
    fn avgpool_means_blocks() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(avgpool(&x, 4, 4, 1, 2), vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn layernorm_normalises_rows() {
        let x = [1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 8.0];
        let (y, _, _) = layernorm(&x, &[1.0; 4], &[0.0; 4], 4, 1e-12);
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_inputs() {
        let y = softmax(&[1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0], 3);
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let e: f64 = (0.0f64).exp() + 1.0f64.exp() + 2.0f64.exp();
        assert!((y[2] - 2.0f64.exp() / e).abs() < 1e-15);
    }

    #[test]
    fn resize_taps_half_pixel() {
        // 2 → 4: sources −0.25 (clamped), 0.25, 0.75, 1.25.
        let t = resize_taps::<f64>(2, 4);
        assert_eq!((t[0].lo, t[0].hi, t[0].frac), (0, 1, 0.0));
        assert_eq!((t[1].lo, t[1].frac), (0, 0.25));
        assert_eq!((t[2].lo, t[2].frac), (0, 0.75));
        assert_eq!((t[3].lo, t[3].hi, t[3].frac), (1, 1, 0.0));
        let y = bilinear_resize(&[0.0, 1.0], 1, 2, 1, 1, 4);
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.3).collect();
        assert_eq!(bilinear_resize(&x, 2, 3, 2, 2, 3), x);
    }

    #[test]
    fn space_to_depth_block_order() {
        // 2×2×1 map [[a, b], [c, d]] → channels a, c, b, d.
        assert_eq!(space_to_depth(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1), vec![1.0, 3.0, 2.0, 4.0]);
    }
}
