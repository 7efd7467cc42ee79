//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Feature maps are channel-major (`C x H x W`); parameters live in one flat
//! vector owned by the model and each layer only records its offset.

use rand::Rng;

use crate::scalar::{gemm, MatView, Scalar};

/// Channel-major feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// `H x W x C` to channel-major.
    pub fn from_hwc(height: usize, width: usize, channels: usize, hwc: &[T]) -> Self {
        let mut t = Self::zeros(channels, height, width);
        let plane = height * width;
        for (p, px) in hwc.chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                t.data[c * plane + p] = v;
            }
        }
        t
    }

    pub fn to_hwc(&self) -> Vec<T> {
        let plane = self.plane();
        let mut out = vec![T::zero(); self.data.len()];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = self.data[c * plane + p];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Hands out consecutive ranges of the flat parameter vector.
#[derive(Debug, Default)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn conv(&mut self, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Conv2d {
        let conv = Conv2d { in_ch, out_ch, kernel, stride, pad, offset: self.len };
        self.len += conv.param_len();
        conv
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// 2-D convolution (cross-correlation) with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

/// What backward needs from a convolution forward.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub col: Vec<T>,
    pub in_dims: (usize, usize, usize),
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_ch
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.pad - self.kernel) / self.stride + 1,
            (width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init<T: Scalar, R: Rng>(&self, params: &mut [T], rng: &mut R, gain: f64) {
        let bound = gain * (3.0 / self.patch_len() as f64).sqrt();
        let (w, b) = params[self.offset..self.offset + self.param_len()].split_at_mut(self.weight_len());
        for v in w {
            *v = T::of(rng.random_range(-bound..bound));
        }
        for v in b {
            *v = T::zero();
        }
    }

    fn im2col<T: Scalar>(&self, x: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let positions = ho * wo;
        let mut col = vec![T::zero(); self.patch_len() * positions];
        let plane = x.plane();
        for ci in 0..self.in_ch {
            let src = &x.data[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * positions..(row + 1) * positions];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, dcol: &[T], dims: (usize, usize, usize), ho: usize, wo: usize) -> Tensor<T> {
        let (c, h, w) = dims;
        let (k, s, pad) = (self.kernel, self.stride, self.pad as isize);
        let positions = ho * wo;
        let mut dx = Tensor::zeros(c, h, w);
        let plane = h * w;
        for ci in 0..c {
            let dst = &mut dx.data[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcol[row * positions..(row + 1) * positions];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(x.height, x.width);
        let col = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.data.clone()
        } else {
            self.im2col(x, ho, wo)
        };
        let positions = ho * wo;
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.param_len()];
        let mut out = Tensor::zeros(self.out_ch, ho, wo);
        for (o, chunk) in out.data.chunks_exact_mut(positions).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(
            T::one(),
            weights,
            MatView::row_major(self.out_ch, self.patch_len()),
            &col,
            MatView::row_major(self.patch_len(), positions),
            T::one(),
            &mut out.data,
            MatView::row_major(self.out_ch, positions),
        );
        (out, ConvCache { col, in_dims: x.dims() })
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient (when requested).
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dout: &Tensor<T>,
        grads: Option<&mut [T]>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let positions = dout.plane();
        let patch = self.patch_len();
        if let Some(grads) = grads {
            let (gw, gb) =
                grads[self.offset..self.offset + self.param_len()].split_at_mut(self.weight_len());
            gemm(
                T::one(),
                &dout.data,
                MatView::row_major(self.out_ch, positions),
                &cache.col,
                MatView::row_major(patch, positions).transposed(),
                T::one(),
                gw,
                MatView::row_major(self.out_ch, patch),
            );
            for (o, chunk) in dout.data.chunks_exact(positions).enumerate() {
                gb[o] += chunk.iter().fold(T::zero(), |a, &b| a + b);
            }
        }
        if !want_input {
            return None;
        }
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let mut dcol = vec![T::zero(); patch * positions];
        gemm(
            T::one(),
            weights,
            MatView::row_major(self.out_ch, patch).transposed(),
            &dout.data,
            MatView::row_major(self.out_ch, positions),
            T::zero(),
            &mut dcol,
            MatView::row_major(patch, positions),
        );
        if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            let (c, h, w) = cache.in_dims;
            return Some(Tensor { channels: c, height: h, width: w, data: dcol });
        }
        Some(self.col2im(&dcol, cache.in_dims, dout.height, dout.width))
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(x)`; smooth, so finite-difference checks see no kinks.
pub fn silu<T: Scalar>(pre: &Tensor<T>) -> Tensor<T> {
    Tensor {
        channels: pre.channels,
        height: pre.height,
        width: pre.width,
        data: pre.data.iter().map(|&x| x * sigmoid(x)).collect(),
    }
}

pub fn silu_backward<T: Scalar>(pre: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let data = pre
        .data
        .iter()
        .zip(&dout.data)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect();
    Tensor { channels: pre.channels, height: pre.height, width: pre.width, data }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h2, w2) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, h2, w2);
    for c in 0..x.channels {
        for y in 0..h2 {
            let src = &x.data[(c * x.height + y / 2) * x.width..][..x.width];
            let dst = &mut out.data[(c * h2 + y) * w2..][..w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dout.height / 2, dout.width / 2);
    let mut dx = Tensor::zeros(dout.channels, h, w);
    for c in 0..dout.channels {
        for y in 0..dout.height {
            let src = &dout.data[(c * dout.height + y) * dout.width..][..dout.width];
            let dst = &mut dx.data[(c * h + y / 2) * w..][..w];
            for (xx, &g) in src.iter().enumerate() {
                dst[xx / 2] += g;
            }
        }
    }
    dx
}

pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { channels: a.channels + b.channels, height: a.height, width: a.width, data }
}

pub fn split<T: Scalar>(x: &Tensor<T>, first_channels: usize) -> (Tensor<T>, Tensor<T>) {
    let cut = first_channels * x.plane();
    (
        Tensor { channels: first_channels, height: x.height, width: x.width, data: x.data[..cut].to_vec() },
        Tensor {
            channels: x.channels - first_channels,
            height: x.height,
            width: x.width,
            data: x.data[cut..].to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, params: &[f64], x: &Tensor<f64>) -> Tensor<f64> {
        let (ho, wo) = conv.out_size(x.height, x.width);
        let mut out = Tensor::zeros(conv.out_ch, ho, wo);
        let k = conv.kernel;
        for o in 0..conv.out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = params[conv.offset + conv.weight_len() + o];
                    for c in 0..conv.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wi = ((o * conv.in_ch + c) * k + ky) * k + kx;
                                acc += params[conv.offset + wi]
                                    * x.data[(c * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor { channels: c, height: h, width: w, data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn conv_forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0)] {
            let mut layout = ParamLayout::default();
            let conv = layout.conv(3, 5, k, s, p);
            let mut params = vec![0.0; layout.len()];
            conv.init(&mut params, &mut rng, 1.0);
            for b in &mut params[conv.weight_len()..] {
                *b = rng.random_range(-0.5..0.5);
            }
            let x = random_tensor(&mut rng, 3, 8, 6);
            let (y, _) = conv.forward(&params, &x);
            let expected = naive_conv(&conv, &params, &x);
            assert_eq!(y.dims(), expected.dims());
            for (a, b) in y.data.iter().zip(&expected.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dout, conv(x)> is linear in x and w, so its gradients must match
        // a perturbation of either.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut layout = ParamLayout::default();
        let conv = layout.conv(2, 3, 4, 2, 1);
        let mut params = vec![0.0; layout.len()];
        conv.init(&mut params, &mut rng, 1.0);
        let x = random_tensor(&mut rng, 2, 8, 8);
        let (y, cache) = conv.forward(&params, &x);
        let dout = random_tensor(&mut rng, y.channels, y.height, y.width);
        let mut grads = vec![0.0; params.len()];
        let dx = conv.backward(&params, &cache, &dout, Some(&mut grads), true).unwrap();
        let dot = |p: &[f64], x: &Tensor<f64>| {
            let (y, _) = conv.forward(p, x);
            y.data.iter().zip(&dout.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let base = dot(&params, &x);
        let mut x2 = x.clone();
        x2.data[17] += 1.0;
        assert!((dot(&params, &x2) - base - dx.data[17]).abs() < 1e-10);
        let mut p2 = params.clone();
        p2[5] += 1.0;
        assert!((dot(&p2, &x) - base - grads[5]).abs() < 1e-10);
        let bias0 = conv.weight_len();
        let mut p3 = params.clone();
        p3[bias0] += 1.0;
        assert!((dot(&p3, &x) - base - grads[bias0]).abs() < 1e-10);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor { channels: 1, height: 1, width: 2, data: vec![1.0f64, 2.0] };
        let up = upsample2(&x);
        assert_eq!(up.data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = upsample2_backward(&Tensor { channels: 1, height: 2, width: 4, data: vec![1.0; 8] });
        assert_eq!(g.data, vec![4.0, 4.0]);
    }

    #[test]
    fn hwc_round_trip() {
        let hwc: Vec<f64> = (0..24).map(f64::from).collect();
        let t = Tensor::from_hwc(2, 3, 4, &hwc);
        assert_eq!(t.data[1], 4.0);
        assert_eq!(t.to_hwc(), hwc);
    }
}
