//! Dense f64 tensors and the forward numeric kernels every layer is built from.
//!
//! All kernels are pure functions over immutable inputs: same inputs produce
//! bitwise-identical outputs, independent of the rayon thread count. Batch
//! parallelism only ever splits work along disjoint output slices, so no
//! floating-point reduction order depends on scheduling.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 in row-major (C) order.
///
/// Rank up to 4 is what the networks here need; shape `[N, C, H, W]` is the
/// layout used by every convolutional kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("Tensor::new", format!("zero dim in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} wants {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape("Tensor::item", format!("numel {}", self.numel())));
        }
        Ok(self.data[0])
    }

    /// Shape as `[N, C, H, W]`, padding leading dims with 1 for lower ranks.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok([n, c, h, w]),
            [c, h, w] => Ok([1, c, h, w]),
            _ => Err(Error::shape(
                "Tensor::dims4",
                format!("need rank 3 or 4, got {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [n, d] => Ok([n, d]),
            _ => Err(Error::shape(
                "Tensor::dims2",
                format!("need rank 2, got {:?}", self.shape),
            )),
        }
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Geometry of a 2-D convolution: `[out_channels, in_channels, kh, kw]`
/// weights applied with one stride/padding on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            has_bias: false,
        }
    }

    /// 1x1 convolution with stride 1 and no padding: mixes channels at each
    /// spatial position independently.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 1, 1, 0)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output spatial size for an input of `h x w`. Rejects geometries where
    /// the kernel does not fit the padded input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid("conv stride must be >= 1"));
        }
        if h + 2 * self.padding < self.kernel_h || w + 2 * self.padding < self.kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit {}x{} input with padding {}",
                    self.kernel_h, self.kernel_w, h, w, self.padding
                ),
            ));
        }
        let oh = (h + 2 * self.padding - self.kernel_h) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel_w) / self.stride + 1;
        Ok((oh, ow))
    }
}

// ---------------------------------------------------------------------------
// GEMM kernels (row-major). These are the only inner loops that matter for
// throughput; everything convolutional funnels through them.
// ---------------------------------------------------------------------------

/// c[m x n] += a[m x k] * b[k x n]
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m x n] += a[m x k] * b[n x k]^T
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m x n] += a[k x m]^T * b[k x n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and pooling kernels
// ---------------------------------------------------------------------------

/// Elementwise product of two same-shape tensors.
pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "elementwise_mul",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Mean over the spatial extent of each feature map: `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; n * c];
    for nc in 0..n * c {
        let plane = &x.data[nc * hw..(nc + 1) * hw];
        out[nc] = plane.iter().sum::<f64>() / hw as f64;
    }
    Tensor::new(vec![n, c, 1, 1], out)
}

/// Scales every spatial position of `x[n,c,:,:]` by the per-channel gate
/// `g[n,c,0,0]`.
pub fn broadcast_mul(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let [gn, gc, gh, gw] = g.dims4()?;
    if gn != n || gc != c || gh != 1 || gw != 1 {
        return Err(Error::shape(
            "broadcast_mul",
            format!("x {:?} vs gate {:?}", x.shape(), g.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.data.clone();
    for nc in 0..n * c {
        let gv = g.data[nc];
        for v in &mut out[nc * hw..(nc + 1) * hw] {
            *v *= gv;
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Fully connected layer: `out = x * w^T + b` with `x: [N,D]`, `w: [M,D]`,
/// `b: [M]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, d] = x.dims2()?;
    let [m, wd] = w.dims2()?;
    if wd != d || b.shape() != [m] {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; n * m];
    for (row, out_row) in out.chunks_mut(m).enumerate() {
        out_row.copy_from_slice(&b.data);
        let _ = row;
    }
    gemm_nt(n, d, m, &x.data, &w.data, &mut out);
    Tensor::new(vec![n, m], out)
}

/// im2col: gathers conv patches of one image `[C,H,W]` into a
/// `[C*kh*kw, oh*ow]` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let (kh, kw, stride, pad) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, out_v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *out_v = if jj < 0 || jj >= w as isize {
                            0.0
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a `[C*kh*kw, oh*ow]` column matrix back onto a `[C,H,W]`
/// image. Inverse access pattern of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let (kh, kw, stride, pad) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, sv) in src[oi * ow..(oi + 1) * ow].iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dst_row[jj as usize] += sv;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x: [N,C,H,W]` with `w: [K,C,kh,kw]`, optional
/// per-output-channel bias. Patch-gather + matrix multiply per image; images
/// are processed in parallel and written to disjoint output slices.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let [n, c, h, wdt] = x.dims4()?;
    let [k, wc, kh, kw] = x_weight_dims(w, spec)?;
    if c != wc {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {wc}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape("conv2d", format!("bias {:?} vs {k} outputs", b.shape())));
        }
    }
    let (oh, ow) = spec.output_hw(h, wdt)?;
    let (ckk, ohw) = (c * kh * kw, oh * ow);
    let mut out = vec![0.0; n * k * ohw];

    let run_image = |img: usize, out_img: &mut [f64]| {
        let x_img = &x.data[img * c * h * wdt..(img + 1) * c * h * wdt];
        if spec.is_pointwise() {
            gemm_nn(k, c, ohw, &w.data, x_img, out_img);
        } else {
            let mut cols = vec![0.0; ckk * ohw];
            im2col(x_img, c, h, wdt, spec, oh, ow, &mut cols);
            gemm_nn(k, ckk, ohw, &w.data, &cols, out_img);
        }
        if let Some(b) = bias {
            for (kc, chunk) in out_img.chunks_mut(ohw).enumerate() {
                let bv = b.data[kc];
                for v in chunk {
                    *v += bv;
                }
            }
        }
    };

    out.par_chunks_mut(k * ohw)
        .enumerate()
        .for_each(|(img, out_img)| run_image(img, out_img));
    Tensor::new(vec![n, k, oh, ow], out)
}

fn x_weight_dims(w: &Tensor, spec: &ConvSpec) -> Result<[usize; 4]> {
    let dims = w.dims4()?;
    if dims != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!("weight {:?} vs spec {:?}", dims, spec.weight_shape()),
        ));
    }
    Ok(dims)
}

/// Gradients of [`conv2d`] w.r.t. input, weights, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    dy: &Tensor,
    want_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let [n, c, h, wdt] = x.dims4()?;
    let [k, _, kh, kw] = x_weight_dims(w, spec)?;
    let (oh, ow) = spec.output_hw(h, wdt)?;
    let (ckk, ohw) = (c * kh * kw, oh * ow);
    if dy.shape() != [n, k, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("dy {:?} vs expected {:?}", dy.shape(), [n, k, oh, ow]),
        ));
    }

    // Per-image partials computed independently, then reduced in index order
    // so the result does not depend on the thread count.
    let per_image: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|img| {
            let x_img = &x.data[img * c * h * wdt..(img + 1) * c * h * wdt];
            let dy_img = &dy.data[img * k * ohw..(img + 1) * k * ohw];
            let mut dw_img = vec![0.0; k * ckk];
            let dx_img = if spec.is_pointwise() {
                gemm_nt(k, ohw, c, dy_img, x_img, &mut dw_img);
                want_dx.then(|| {
                    let mut dx = vec![0.0; c * h * wdt];
                    gemm_tn(c, k, ohw, &w.data, dy_img, &mut dx);
                    dx
                })
            } else {
                let mut cols = vec![0.0; ckk * ohw];
                im2col(x_img, c, h, wdt, spec, oh, ow, &mut cols);
                gemm_nt(k, ohw, ckk, dy_img, &cols, &mut dw_img);
                want_dx.then(|| {
                    let mut dcols = vec![0.0; ckk * ohw];
                    gemm_tn(ckk, k, ohw, &w.data, dy_img, &mut dcols);
                    let mut dx = vec![0.0; c * h * wdt];
                    col2im(&dcols, c, h, wdt, spec, oh, ow, &mut dx);
                    dx
                })
            };
            (dw_img, dx_img)
        })
        .collect();

    let mut dw = vec![0.0; k * ckk];
    let mut dx = want_dx.then(|| vec![0.0; n * c * h * wdt]);
    for (img, (dw_img, dx_img)) in per_image.into_iter().enumerate() {
        for (acc, v) in dw.iter_mut().zip(&dw_img) {
            *acc += v;
        }
        if let (Some(dx), Some(dx_img)) = (&mut dx, dx_img) {
            dx[img * c * h * wdt..(img + 1) * c * h * wdt].copy_from_slice(&dx_img);
        }
    }

    let db = if spec.has_bias {
        let mut db = vec![0.0; k];
        for img in 0..n {
            for kc in 0..k {
                let plane = &dy.data[(img * k + kc) * ohw..(img * k + kc + 1) * ohw];
                db[kc] += plane.iter().sum::<f64>();
            }
        }
        Some(Tensor::new(vec![k], db)?)
    } else {
        None
    };

    Ok((
        dx.map(|d| Tensor::new(vec![n, c, h, wdt], d)).transpose()?,
        Tensor::new(vec![k, c, kh, kw], dw)?,
        db,
    ))
}

/// Max pooling with argmax bookkeeping for the backward pass.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    let spec = ConvSpec::new(c, c, kernel, stride, padding);
    let (oh, ow) = spec.output_hw(h, w)?;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &x.data[nc * h * w..(nc + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ki in 0..kernel {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let idx = ii as usize * w + jj as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * oh * ow + oi * ow + oj;
                out[o] = best;
                argmax[o] = nc * h * w + best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
/// per-row max subtraction. Also returns the softmax probabilities, which
/// the backward rule reuses.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} logit rows vs {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for row in 0..n {
        let src = &logits.data[row * k..(row + 1) * k];
        let dst = &mut probs[row * k..(row + 1) * k];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            denom += *d;
        }
        for d in dst.iter_mut() {
            *d /= denom;
        }
        // -log p[label], computed from the stabilized logits directly.
        loss += denom.ln() - (src[labels[row]] - max);
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct six-loop convolution: the independent oracle the im2col path is
    /// checked against.
    fn conv2d_naive(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
        let [n, c, h, wd] = x.dims4().unwrap();
        let [k, _, kh, kw] = w.dims4().unwrap();
        let (oh, ow) = spec.output_hw(h, wd).unwrap();
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        for img in 0..n {
            for kc in 0..k {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b.data()[kc]);
                        for ch in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * spec.stride + ki) as isize - spec.padding as isize;
                                    let jj = (oj * spec.stride + kj) as isize - spec.padding as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((img * c + ch) * h + ii as usize) * wd + jj as usize];
                                    let wv = w.data()[((kc * c + ch) * kh + ki) * kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((img * k + kc) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn elementwise_mul_basics() {
        let zero = elementwise_mul(&t(&[2], &[1.0, 2.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        let ident = elementwise_mul(&t(&[2], &[2.0, 3.0]), &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(ident.data(), &[2.0, 3.0]);
        let v = elementwise_mul(&t(&[2], &[0.5, -2.0]), &t(&[2], &[4.0, 3.0])).unwrap();
        assert_eq!(v.data(), &[2.0, -6.0]);
        assert!(elementwise_mul(&t(&[2], &[1.0, 2.0]), &t(&[3], &[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn conv2d_all_ones_sums_patch() {
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let spec = ConvSpec::new(1, 1, 3, 1, 0);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_abs_diff_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv2d_zero_kernel_gives_zero() {
        let x = rng_tensor(&[2, 3, 5, 5], 1);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let spec = ConvSpec::new(3, 4, 3, 1, 1);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_pointwise_scales() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let spec = ConvSpec::pointwise(1, 1);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv2d_identity_with_unit_pointwise_kernel() {
        let x = rng_tensor(&[2, 1, 4, 4], 3);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &w, None, &ConvSpec::pointwise(1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_channel_mismatch_rejected() {
        let x = rng_tensor(&[1, 2, 4, 4], 4);
        let w = rng_tensor(&[1, 3, 3, 3], 5);
        let spec = ConvSpec::new(3, 1, 3, 1, 1);
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn conv2d_kernel_larger_than_input_rejected() {
        let x = rng_tensor(&[1, 1, 2, 2], 6);
        let w = rng_tensor(&[1, 1, 5, 5], 7);
        let spec = ConvSpec::new(1, 1, 5, 1, 0);
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        for (shape, k, kernel, stride, pad, seed) in [
            ([2, 3, 8, 8], 4, 3, 1, 1, 10),
            ([1, 4, 7, 9], 2, 3, 2, 1, 11),
            ([2, 2, 5, 5], 3, 1, 1, 0, 12),
            ([1, 3, 6, 6], 5, 5, 2, 2, 13),
        ] {
            let x = rng_tensor(&shape, seed);
            let mut spec = ConvSpec::new(shape[1], k, kernel, stride, pad);
            spec.has_bias = true;
            let w = rng_tensor(&spec.weight_shape(), seed + 100);
            let b = rng_tensor(&[k], seed + 200);
            let fast = conv2d(&x, &w, Some(&b), &spec).unwrap();
            let slow = conv2d_naive(&x, &w, Some(&b), &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_bitwise_deterministic_across_thread_counts() {
        let x = rng_tensor(&[4, 3, 9, 9], 21);
        let spec = ConvSpec::new(3, 5, 3, 2, 1);
        let w = rng_tensor(&spec.weight_shape(), 22);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| conv2d(&x, &w, None, &spec).unwrap());
        let multi = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| conv2d(&x, &w, None, &spec).unwrap());
        assert_eq!(single.data(), multi.data());
    }

    #[test]
    fn global_avg_pool_means() {
        let constant = Tensor::full(&[2, 3, 4, 4], 2.5);
        let y = global_avg_pool(&constant).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));

        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(global_avg_pool(&x).unwrap().data()[0], 2.5);

        let zero = global_avg_pool(&Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_mul_basics() {
        let x = rng_tensor(&[2, 3, 4, 4], 30);
        let ones = Tensor::full(&[2, 3, 1, 1], 1.0);
        assert_eq!(broadcast_mul(&x, &ones).unwrap().data(), x.data());

        let halves = Tensor::full(&[2, 3, 1, 1], 0.5);
        let halved = broadcast_mul(&x, &halves).unwrap();
        for (h, v) in halved.data().iter().zip(x.data()) {
            assert_abs_diff_eq!(*h, v * 0.5);
        }

        let x1 = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let g = t(&[1, 1, 1, 1], &[2.0]);
        assert_eq!(broadcast_mul(&x1, &g).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);

        let bad = Tensor::full(&[2, 4, 1, 1], 1.0);
        assert!(broadcast_mul(&x, &bad).is_err());
    }

    #[test]
    fn constancy_preservation() {
        // A spatially constant map gated by its own GAP equals squaring it.
        let x = Tensor::full(&[2, 3, 4, 4], 1.5);
        let gated = broadcast_mul(&x, &global_avg_pool(&x).unwrap()).unwrap();
        let squared = elementwise_mul(&x, &x).unwrap();
        assert_eq!(gated.data(), squared.data());
    }

    #[test]
    fn linear_identity_and_dot() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero_b = Tensor::zeros(&[2]);
        assert_eq!(linear(&x, &eye, &zero_b).unwrap().data(), x.data());

        let y = linear(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 2], &[3.0, 4.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[12.0]);

        let zeros = Tensor::zeros(&[2, 3]);
        let w = rng_tensor(&[4, 3], 40);
        let b = rng_tensor(&[4], 41);
        let out = linear(&zeros, &w, &b).unwrap();
        assert_eq!(&out.data()[..4], b.data());
        assert_eq!(&out.data()[4..], b.data());

        assert!(linear(&x, &rng_tensor(&[2, 3], 42), &zero_b).is_err());
    }

    #[test]
    fn softmax_ce_closed_forms() {
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);

        let (sat, _) = softmax_cross_entropy(&t(&[1, 2], &[1000.0, -1000.0]), &[0]).unwrap();
        assert_abs_diff_eq!(sat, 0.0, epsilon = 1e-12);

        for k in [3usize, 7, 10] {
            let (uniform, _) = softmax_cross_entropy(&Tensor::zeros(&[1, k]), &[0]).unwrap();
            assert_abs_diff_eq!(uniform, (k as f64).ln(), epsilon = 1e-12);
        }

        assert!(softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).is_err());
    }

    #[test]
    fn softmax_ce_shift_invariant() {
        let logits = rng_tensor(&[4, 6], 50);
        let labels = [0, 3, 5, 2];
        let (base, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let mut shifted = logits.clone();
        for row in 0..4 {
            for v in &mut shifted.data_mut()[row * 6..(row + 1) * 6] {
                *v += 100.0 + row as f64;
            }
        }
        let (moved, _) = softmax_cross_entropy(&shifted, &labels).unwrap();
        assert_abs_diff_eq!(base, moved, epsilon = 1e-9);
    }

    #[test]
    fn max_pool_tracks_argmax() {
        let x = t(&[1, 1, 4, 4], &[
            1.0, 2.0, 5.0, 3.0,
            4.0, 0.0, 1.0, 2.0,
            8.0, 1.0, 7.0, 0.0,
            2.0, 3.0, 1.0, 9.0,
        ]);
        let (y, argmax) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 8.0, 9.0]);
        assert_eq!(argmax, vec![4, 2, 8, 15]);
    }

    #[test]
    fn kernels_are_pure() {
        let x = rng_tensor(&[2, 3, 6, 6], 60);
        let spec = ConvSpec::new(3, 4, 3, 1, 1);
        let w = rng_tensor(&spec.weight_shape(), 61);
        let a = conv2d(&x, &w, None, &spec).unwrap();
        let b = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
