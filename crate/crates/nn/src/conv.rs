//! Stride-1 2-D convolution kernels (im2col + GEMM).
//!
//! A convolution may be restricted to a [`PixelSet`]: only the listed output
//! pixels are computed and every other output is left at zero. Evaluating a
//! stack of convolutions on a set that is dilated by each layer's radius
//! yields exactly the dense values on the innermost set, which is how the
//! mixture-of-experts encoder avoids running every expert on every pixel.

use crate::tensor::{matmul, Scalar, Tensor};

/// Output pixels to evaluate, listed per batch item as row-major indices
/// into an `height x width` plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSet {
    height: usize,
    width: usize,
    items: Vec<Vec<u32>>,
}

impl PixelSet {
    pub fn new(height: usize, width: usize, items: Vec<Vec<u32>>) -> Self {
        let plane = (height * width) as u32;
        for item in &items {
            debug_assert!(item.windows(2).all(|w| w[0] < w[1]), "pixel list must be sorted");
            assert!(item.iter().all(|&p| p < plane), "pixel index out of range");
        }
        Self { height, width, items }
    }

    /// Every pixel of every batch item.
    pub fn full(batch: usize, height: usize, width: usize) -> Self {
        let all: Vec<u32> = (0..(height * width) as u32).collect();
        Self::new(height, width, vec![all; batch])
    }

    /// Pixels where `mask[n, channel, ..]` is non-zero.
    pub fn from_mask<T: Scalar>(mask: &Tensor<T>, channel: usize) -> Self {
        let items = (0..mask.batch())
            .map(|n| {
                mask.plane_slice(n, channel)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| !v.is_zero())
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        Self::new(mask.height(), mask.width(), items)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn batch(&self) -> usize {
        self.items.len()
    }

    pub fn item(&self, n: usize) -> &[u32] {
        &self.items[n]
    }

    pub fn total(&self) -> usize {
        self.items.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Chebyshev dilation by `radius` pixels, clipped to the plane.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let r = radius as isize;
        let items = self
            .items
            .iter()
            .map(|item| {
                let mut hit = vec![false; h * w];
                for &p in item {
                    let (py, px) = ((p as usize / w) as isize, (p as usize % w) as isize);
                    for y in (py - r).max(0)..=(py + r).min(h as isize - 1) {
                        let row = y as usize * w;
                        for x in (px - r).max(0)..=(px + r).min(w as isize - 1) {
                            hit[row + x as usize] = true;
                        }
                    }
                }
                hit.iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| i as u32)
                    .collect()
            })
            .collect();
        Self {
            height: h,
            width: w,
            items,
        }
    }
}

/// Shape bookkeeping for one stride-1 convolution.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: [usize; 4], w: [usize; 4], pad: usize) -> Self {
        assert_eq!(x[1], w[1], "conv input channels {} vs weight {}", x[1], w[1]);
        assert_eq!(w[2], w[3], "square kernels only");
        let k = w[2];
        assert!(x[2] + 2 * pad >= k && x[3] + 2 * pad >= k, "input smaller than kernel");
        Self {
            cin: x[1],
            cout: w[0],
            k,
            pad,
            ih: x[2],
            iw: x[3],
            oh: x[2] + 2 * pad - k + 1,
            ow: x[3] + 2 * pad - k + 1,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

/// Dense im2col for one batch item: `rows x (oh*ow)`.
fn im2col_dense<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let ncols = g.oh * g.ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                // valid output x range: 0 <= ox + kx - pad < iw
                let x_lo = g.pad.saturating_sub(kx).min(g.ow);
                let x_hi = (g.iw + g.pad).saturating_sub(kx).min(g.ow).max(x_lo);
                for oy in 0..g.oh {
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.ih as isize {
                        d.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    d[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                    d[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                    if x_hi > x_lo {
                        let src_start = iy as usize * g.iw + x_lo + kx - g.pad;
                        d[x_lo..x_hi].copy_from_slice(&plane[src_start..src_start + (x_hi - x_lo)]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// im2col restricted to the listed output pixels: `rows x pixels.len()`.
fn im2col_sparse<T: Scalar>(x: &[T], g: &Geometry, pixels: &[u32], col: &mut [T]) {
    let ncols = pixels.len();
    let taps = tap_offsets(g, pixels);
    let kk = g.k * g.k;
    for ci in 0..g.cin {
        let plane = &x[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for t in 0..kk {
            let row = ci * kk + t;
            let dst = &mut col[row * ncols..(row + 1) * ncols];
            let offs = &taps[t * ncols..(t + 1) * ncols];
            for (d, o) in dst.iter_mut().zip(offs) {
                *d = o.map_or(T::zero(), |o| plane[o as usize]);
            }
        }
    }
}

/// Adjoint of im2col: scatter-add `col` back into the input plane layout.
fn col2im_add<T: Scalar>(col: &[T], g: &Geometry, pixels: Option<&[u32]>, dx: &mut [T]) {
    match pixels {
        None => col2im_dense_add(col, g, dx),
        Some(px) => col2im_sparse_add(col, g, px, dx),
    }
}

fn col2im_dense_add<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let ncols = g.oh * g.ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * ncols..(row + 1) * ncols];
                let x_lo = g.pad.saturating_sub(kx).min(g.ow);
                let x_hi = (g.iw + g.pad).saturating_sub(kx).min(g.ow).max(x_lo);
                if x_hi > x_lo {
                    for oy in 0..g.oh {
                        let iy = oy as isize + ky as isize - g.pad as isize;
                        if iy < 0 || iy >= g.ih as isize {
                            continue;
                        }
                        let s = &src[oy * g.ow + x_lo..oy * g.ow + x_hi];
                        let start = iy as usize * g.iw + x_lo + kx - g.pad;
                        let d = &mut plane[start..start + (x_hi - x_lo)];
                        d.iter_mut().zip(s).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Input offset read by each (kernel tap, pixel) pair, or `None` for padding.
fn tap_offsets(g: &Geometry, pixels: &[u32]) -> Vec<Option<u32>> {
    let mut out = Vec::with_capacity(g.k * g.k * pixels.len());
    for ky in 0..g.k {
        for kx in 0..g.k {
            for &p in pixels {
                let (oy, ox) = (p as usize / g.ow, p as usize % g.ow);
                let iy = oy as isize + ky as isize - g.pad as isize;
                let ix = ox as isize + kx as isize - g.pad as isize;
                out.push(
                    (iy >= 0 && ix >= 0 && iy < g.ih as isize && ix < g.iw as isize)
                        .then(|| (iy as usize * g.iw + ix as usize) as u32),
                );
            }
        }
    }
    out
}

fn col2im_sparse_add<T: Scalar>(col: &[T], g: &Geometry, pixels: &[u32], dx: &mut [T]) {
    let ncols = pixels.len();
    let taps = tap_offsets(g, pixels);
    let kk = g.k * g.k;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for t in 0..kk {
            let row = ci * kk + t;
            let src = &col[row * ncols..(row + 1) * ncols];
            let offs = &taps[t * ncols..(t + 1) * ncols];
            for (&v, o) in src.iter().zip(offs) {
                if let Some(o) = o {
                    plane[*o as usize] = plane[*o as usize] + v;
                }
            }
        }
    }
}

fn check_pixels(pixels: Option<&PixelSet>, n: usize, g: &Geometry) {
    if let Some(s) = pixels {
        assert_eq!(s.batch(), n, "pixel set batch size");
        assert_eq!((s.height(), s.width()), (g.oh, g.ow), "pixel set plane size");
    }
}

/// Convolution forward pass. `bias`, when given, has shape `[1, cout, 1, 1]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
    pixels: Option<&PixelSet>,
) -> Tensor<T> {
    let g = Geometry::new(x.shape(), weight.shape(), pad);
    let n = x.batch();
    check_pixels(pixels, n, &g);
    if let Some(b) = bias {
        assert_eq!(b.shape(), [1, g.cout, 1, 1], "bias shape");
    }
    let in_per = g.cin * g.ih * g.iw;
    let out_plane = g.oh * g.ow;
    let mut out = Tensor::zeros([n, g.cout, g.oh, g.ow]);
    let mut col = Vec::new();
    let mut tmp = Vec::new();
    for b in 0..n {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let ob = &mut out.data_mut()[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
        match pixels {
            None => {
                let colref: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    col.resize(g.rows() * out_plane, T::zero());
                    im2col_dense(xb, &g, &mut col);
                    &col
                };
                matmul(
                    g.cout,
                    g.rows(),
                    out_plane,
                    weight.data(),
                    false,
                    colref,
                    false,
                    T::zero(),
                    ob,
                );
                if let Some(bias) = bias {
                    for (co, chunk) in ob.chunks_mut(out_plane).enumerate() {
                        let bv = bias.data()[co];
                        chunk.iter_mut().for_each(|v| *v = *v + bv);
                    }
                }
            }
            Some(set) => {
                let px = set.item(b);
                if px.is_empty() {
                    continue;
                }
                col.resize(g.rows() * px.len(), T::zero());
                im2col_sparse(xb, &g, px, &mut col);
                tmp.resize(g.cout * px.len(), T::zero());
                matmul(
                    g.cout,
                    g.rows(),
                    px.len(),
                    weight.data(),
                    false,
                    &col,
                    false,
                    T::zero(),
                    &mut tmp,
                );
                for co in 0..g.cout {
                    let bv = bias.map_or(T::zero(), |bb| bb.data()[co]);
                    let dst = &mut ob[co * out_plane..(co + 1) * out_plane];
                    for (j, &p) in px.iter().enumerate() {
                        dst[p as usize] = tmp[co * px.len() + j] + bv;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Convolution backward pass. Only the requested gradients are computed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: usize,
    pixels: Option<&PixelSet>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let g = Geometry::new(x.shape(), weight.shape(), pad);
    let n = x.batch();
    check_pixels(pixels, n, &g);
    assert_eq!(grad_out.shape(), [n, g.cout, g.oh, g.ow], "grad_out shape");
    let in_per = g.cin * g.ih * g.iw;
    let out_plane = g.oh * g.ow;
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut db = need_bias.then(|| Tensor::zeros([1, g.cout, 1, 1]));
    let mut col = Vec::new();
    let mut gathered = Vec::new();
    let mut dcol = Vec::new();
    for b in 0..n {
        let xb = &x.data()[b * in_per..(b + 1) * in_per];
        let gob = &grad_out.data()[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
        let px = pixels.map(|s| s.item(b));
        if px.is_some_and(<[u32]>::is_empty) {
            continue;
        }
        // grad_out restricted to the evaluated pixels, `cout x ncols`
        let go: &[T] = match px {
            None => gob,
            Some(px) => {
                gathered.clear();
                for co in 0..g.cout {
                    let src = &gob[co * out_plane..(co + 1) * out_plane];
                    gathered.extend(px.iter().map(|&p| src[p as usize]));
                }
                &gathered
            }
        };
        let ncols = px.map_or(out_plane, <[u32]>::len);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(ncols).enumerate() {
                let s: T = chunk.iter().copied().sum();
                db.data_mut()[co] = db.data()[co] + s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let colref: &[T] = match px {
                None if g.is_pointwise() => xb,
                None => {
                    col.resize(g.rows() * ncols, T::zero());
                    im2col_dense(xb, &g, &mut col);
                    &col
                }
                Some(px) => {
                    col.resize(g.rows() * ncols, T::zero());
                    im2col_sparse(xb, &g, px, &mut col);
                    &col
                }
            };
            matmul(
                g.cout,
                ncols,
                g.rows(),
                go,
                false,
                colref,
                true,
                T::one(),
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * in_per..(b + 1) * in_per];
            if px.is_none() && g.is_pointwise() {
                matmul(g.rows(), g.cout, ncols, weight.data(), true, go, false, T::zero(), dxb);
            } else {
                dcol.resize(g.rows() * ncols, T::zero());
                matmul(
                    g.rows(),
                    g.cout,
                    ncols,
                    weight.data(),
                    true,
                    go,
                    false,
                    T::zero(),
                    &mut dcol,
                );
                col2im_add(&dcol, &g, px, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
