//! Raw NCHW kernels used by the graph ops. Everything here works on plain
//! slices; shape bookkeeping lives in `graph.rs`.

use crate::tensor::{matmul, Float};

/// Reflects an out-of-range index back into `0..n` (no edge repeat), the
/// way `ReflectionPad2d` does, generalized to pads wider than `n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Geometry of a reflection-padded convolution producing `ceil(in / stride)`
/// outputs per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let total_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let total_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        Self { kernel, stride, in_h, in_w, out_h, out_w, pad_top: total_h / 2, pad_left: total_w / 2 }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// `idx[k * out + o]` = input coordinate read by kernel tap `k` at output `o`.
    fn index_table(&self, out: usize, input: usize, pad: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.kernel * out);
        for k in 0..self.kernel {
            for o in 0..out {
                idx.push(reflect((o * self.stride + k) as isize - pad as isize, input));
            }
        }
        idx
    }

    fn tables(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.index_table(self.out_h, self.in_h, self.pad_top),
            self.index_table(self.out_w, self.in_w, self.pad_left),
        )
    }
}

/// Minimum GEMM width; images are stacked side by side until reached.
const MIN_COLUMNS: usize = 768;

fn chunk_size(n: usize, ohw: usize) -> usize {
    MIN_COLUMNS.div_ceil(ohw).clamp(1, n.max(1))
}

/// Writes the patches of one image into columns `offset..offset + oh*ow`
/// of a row-major matrix with rows of length `stride`.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Float>(x: &[F], c: usize, g: &ConvGeom, rows: &[usize], cols_t: &[usize], out: &mut [F], stride: usize, offset: usize) {
    let (k, oh, ow) = (g.kernel, g.out_h, g.out_w);
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let ry = &rows[ky * oh..(ky + 1) * oh];
            for kx in 0..k {
                let rx = &cols_t[kx * ow..(kx + 1) * ow];
                let mut dst = row * stride + offset;
                for &iy in ry {
                    let line = &src[iy * g.in_w..(iy + 1) * g.in_w];
                    for (o, &ix) in out[dst..dst + ow].iter_mut().zip(rx) {
                        *o = line[ix];
                    }
                    dst += ow;
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Float>(cols: &[F], c: usize, g: &ConvGeom, rows: &[usize], cols_t: &[usize], dx: &mut [F], stride: usize, offset: usize) {
    let (k, oh, ow) = (g.kernel, g.out_h, g.out_w);
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for ci in 0..c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let ry = &rows[ky * oh..(ky + 1) * oh];
            for kx in 0..k {
                let rx = &cols_t[kx * ow..(kx + 1) * ow];
                let mut src = row * stride + offset;
                for &iy in ry {
                    let line = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                    for (&v, &ix) in cols[src..src + ow].iter().zip(rx) {
                        line[ix] += v;
                    }
                    src += ow;
                }
                row += 1;
            }
        }
    }
}

/// `y[n] = W · im2col(x[n]) + b`. `w` is `(out_c, in_c * k * k)`.
pub fn conv2d_forward<F: Float>(
    x: &[F],
    n: usize,
    in_c: usize,
    w: &[F],
    bias: Option<&[F]>,
    out_c: usize,
    g: &ConvGeom,
) -> Vec<F> {
    let ckk = in_c * g.kernel * g.kernel;
    let ohw = g.out_h * g.out_w;
    let in_plane = in_c * g.in_h * g.in_w;
    let out_plane = out_c * ohw;
    let mut y = vec![F::zero(); n * out_plane];
    let nb = chunk_size(n, ohw);
    let (rows, cols_t) = g.tables();
    if nb == 1 {
        let pointwise = g.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![F::zero(); ckk * ohw] };
        for b in 0..n {
            let xb = &x[b * in_plane..(b + 1) * in_plane];
            let yb = &mut y[b * out_plane..(b + 1) * out_plane];
            let src: &[F] = if pointwise {
                xb
            } else {
                im2col(xb, in_c, g, &rows, &cols_t, &mut cols, ohw, 0);
                &cols
            };
            matmul(out_c, ckk, ohw, w, false, src, false, yb, false);
        }
    } else {
        let mut cols = vec![F::zero(); ckk * nb * ohw];
        let mut tmp = vec![F::zero(); out_c * nb * ohw];
        for start in (0..n).step_by(nb) {
            let cnt = nb.min(n - start);
            let width = cnt * ohw;
            for j in 0..cnt {
                let xb = &x[(start + j) * in_plane..(start + j + 1) * in_plane];
                im2col(xb, in_c, g, &rows, &cols_t, &mut cols, width, j * ohw);
            }
            matmul(out_c, ckk, width, w, false, &cols, false, &mut tmp, false);
            for j in 0..cnt {
                let yb = &mut y[(start + j) * out_plane..(start + j + 1) * out_plane];
                for o in 0..out_c {
                    let src = &tmp[o * width + j * ohw..o * width + (j + 1) * ohw];
                    yb[o * ohw..(o + 1) * ohw].copy_from_slice(src);
                }
            }
        }
    }
    if let Some(bias) = bias {
        for yb in y.chunks_mut(out_plane) {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut yb[o * ohw..(o + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Accumulates `dx`, `dw` and `db` for [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Float>(
    x: &[F],
    n: usize,
    in_c: usize,
    w: &[F],
    out_c: usize,
    g: &ConvGeom,
    dy: &[F],
    mut dx: Option<&mut [F]>,
    mut dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let ckk = in_c * g.kernel * g.kernel;
    let ohw = g.out_h * g.out_w;
    let in_plane = in_c * g.in_h * g.in_w;
    let out_plane = out_c * ohw;
    if let Some(db) = db {
        for dyb in dy.chunks(out_plane) {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyb[o * ohw..(o + 1) * ohw].iter().copied().sum::<F>();
            }
        }
    }
    let (rows, cols_t) = g.tables();
    let nb = chunk_size(n, ohw);
    if nb == 1 {
        let pointwise = g.is_pointwise();
        let mut cols = if pointwise || dw.is_none() { Vec::new() } else { vec![F::zero(); ckk * ohw] };
        let mut dcols = if pointwise || dx.is_none() { Vec::new() } else { vec![F::zero(); ckk * ohw] };
        for b in 0..n {
            let xb = &x[b * in_plane..(b + 1) * in_plane];
            let dyb = &dy[b * out_plane..(b + 1) * out_plane];
            if let Some(dw) = dw.as_deref_mut() {
                let src: &[F] = if pointwise {
                    xb
                } else {
                    im2col(xb, in_c, g, &rows, &cols_t, &mut cols, ohw, 0);
                    &cols
                };
                matmul(out_c, ohw, ckk, dyb, false, src, true, dw, true);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
                if pointwise {
                    matmul(ckk, out_c, ohw, w, true, dyb, false, dxb, true);
                } else {
                    matmul(ckk, out_c, ohw, w, true, dyb, false, &mut dcols, false);
                    col2im(&dcols, in_c, g, &rows, &cols_t, dxb, ohw, 0);
                }
            }
        }
        return;
    }
    let mut cols = if dw.is_some() { vec![F::zero(); ckk * nb * ohw] } else { Vec::new() };
    let mut dcols = if dx.is_some() { vec![F::zero(); ckk * nb * ohw] } else { Vec::new() };
    let mut dyc = vec![F::zero(); out_c * nb * ohw];
    for start in (0..n).step_by(nb) {
        let cnt = nb.min(n - start);
        let width = cnt * ohw;
        for j in 0..cnt {
            let dyb = &dy[(start + j) * out_plane..(start + j + 1) * out_plane];
            for o in 0..out_c {
                dyc[o * width + j * ohw..o * width + (j + 1) * ohw].copy_from_slice(&dyb[o * ohw..(o + 1) * ohw]);
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            for j in 0..cnt {
                let xb = &x[(start + j) * in_plane..(start + j + 1) * in_plane];
                im2col(xb, in_c, g, &rows, &cols_t, &mut cols, width, j * ohw);
            }
            matmul(out_c, width, ckk, &dyc, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            matmul(ckk, out_c, width, w, true, &dyc, false, &mut dcols, false);
            for j in 0..cnt {
                let dxb = &mut dx[(start + j) * in_plane..(start + j + 1) * in_plane];
                col2im(&dcols, in_c, g, &rows, &cols_t, dxb, width, j * ohw);
            }
        }
    }
}

pub fn upsample2_forward<F: Float>(x: &[F], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let line = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            y.extend((0..ow).map(|ox| line[ox / 2]));
        }
    }
    y
}

pub fn upsample2_backward<F: Float>(dy: &[F], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// 2×2 average pooling with stride 2 (floor on odd sizes).
pub fn avgpool2_forward<F: Float>(x: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::lit(0.25);
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                y.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter);
            }
        }
    }
    y
}

pub fn avgpool2_backward<F: Float>(dy: &[F], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::lit(0.25);
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[p * oh * ow + oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + w] += g;
                dst[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Normalizes each contiguous group of `size` elements to zero mean and
/// unit (biased) variance. Returns the output and per-group `1/sqrt(var+eps)`.
pub fn group_normalize<F: Float>(x: &[F], size: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let groups = x.len() / size;
    let inv = F::one() / F::lit(size as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for gi in 0..groups {
        let src = &x[gi * size..(gi + 1) * size];
        let mean = src.iter().copied().sum::<F>() * inv;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv;
        let r = F::one() / (var + eps).sqrt();
        for (o, &v) in y[gi * size..(gi + 1) * size].iter_mut().zip(src) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (y, rstd)
}

/// Backward of `group_normalize` given its output `y`.
pub fn group_normalize_backward<F: Float>(y: &[F], rstd: &[F], dy: &[F], size: usize) -> Vec<F> {
    let inv = F::one() / F::lit(size as f64);
    let mut dx = vec![F::zero(); y.len()];
    for (gi, &r) in rstd.iter().enumerate() {
        let range = gi * size..(gi + 1) * size;
        let (yg, dyg) = (&y[range.clone()], &dy[range.clone()]);
        let mean_dy = dyg.iter().copied().sum::<F>() * inv;
        let mean_dyy = yg.iter().zip(dyg).map(|(&a, &b)| a * b).sum::<F>() * inv;
        for ((o, &yv), &dv) in dx[range].iter_mut().zip(yg).zip(dyg) {
            *o = r * (dv - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_reflection_padding() {
        // pad 2 on [a b c d] -> c b | a b c d | c b
        let got: Vec<usize> = (-2..6).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(reflect(-3, 1), 0);
        // wider than the input: keeps bouncing
        assert_eq!(reflect(-3, 2), 1);
        assert_eq!(reflect(4, 2), 0);
    }

    #[test]
    fn same_geometry_ceil_halves() {
        for n in [2usize, 3, 7, 8, 15, 240, 120] {
            let g = ConvGeom::same(n, n, 3, 2);
            assert_eq!(g.out_h, n.div_ceil(2));
            let g = ConvGeom::same(n, n, 4, 2);
            assert_eq!(g.out_h, n.div_ceil(2));
            let g = ConvGeom::same(n, n, 5, 1);
            assert_eq!((g.out_h, g.pad_top), (n, 2));
        }
    }

    fn pattern(len: usize, mul: usize, m: usize, scale: f64, off: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * mul % m) as f64) * scale - off).collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        // covers single-image GEMMs (wide outputs) and stacked chunks with a remainder
        for (n, c, h, w, o, k, s) in [(2, 3, 5, 6, 4, 3, 2), (2, 2, 30, 29, 3, 3, 1), (17, 2, 8, 8, 3, 3, 1), (3, 2, 7, 5, 2, 4, 2)] {
            let x = pattern(n * c * h * w, 37, 11, 1.0, 5.0);
            let wt = pattern(o * c * k * k, 13, 7, 0.1, 0.3);
            let bias: Vec<f64> = (0..o).map(|i| i as f64).collect();
            let g = ConvGeom::same(h, w, k, s);
            let y = conv2d_forward(&x, n, c, &wt, Some(&bias), o, &g);
            for b in 0..n {
                for oc in 0..o {
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let mut acc = bias[oc];
                            for ic in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = reflect((oy * s + ky) as isize - g.pad_top as isize, h);
                                        let ix = reflect((ox * s + kx) as isize - g.pad_left as isize, w);
                                        acc += wt[((oc * c + ic) * k + ky) * k + kx] * x[((b * c + ic) * h + iy) * w + ix];
                                    }
                                }
                            }
                            let got = y[((b * o + oc) * g.out_h + oy) * g.out_w + ox];
                            assert!((got - acc).abs() < 1e-9, "{got} vs {acc}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stacked_backward_matches_per_image() {
        let (n, c, h, w, o, k) = (13, 3, 6, 5, 4, 3);
        let x = pattern(n * c * h * w, 29, 13, 0.5, 3.0);
        let wt = pattern(o * c * k * k, 17, 5, 0.2, 0.4);
        let dy_len = n * o * h * w;
        let dy = pattern(dy_len, 7, 9, 0.3, 1.2);
        let g = ConvGeom::same(h, w, k, 1);
        let (mut dx, mut dw, mut db) = (vec![0.0; x.len()], vec![0.0; wt.len()], vec![0.0; o]);
        conv2d_backward(&x, n, c, &wt, o, &g, &dy, Some(&mut dx), Some(&mut dw), Some(&mut db));
        let (mut dx1, mut dw1, mut db1) = (vec![0.0; x.len()], vec![0.0; wt.len()], vec![0.0; o]);
        let (ip, op) = (c * h * w, o * h * w);
        for b in 0..n {
            conv2d_backward(
                &x[b * ip..(b + 1) * ip],
                1,
                c,
                &wt,
                o,
                &g,
                &dy[b * op..(b + 1) * op],
                Some(&mut dx1[b * ip..(b + 1) * ip]),
                Some(&mut dw1),
                Some(&mut db1),
            );
        }
        for (a, b) in dx.iter().zip(&dx1).chain(dw.iter().zip(&dw1)).chain(db.iter().zip(&db1)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn upsample_crops_odd_targets() {
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let y = upsample2_forward(&x, 1, 2, 2, 3, 4);
        assert_eq!(y, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }
}
