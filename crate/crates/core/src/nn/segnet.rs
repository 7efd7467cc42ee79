//! Small U-shaped encoder/decoder segmentation network.
//!
//! Four stride-2 encoder blocks, four upsampling decoder blocks with skip
//! connections, a 1x1 classifier and an optional low-resolution auxiliary
//! head on the 1/4-scale decoder features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat, silu, silu_backward, split, upsample2, upsample2_backward, Conv2d, ConvCache, ParamLayout,
    Tensor,
};
use crate::data::{ProbMap, SegImage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before any softmax or sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetSpec {
    pub classes: usize,
    pub width: usize,
    pub seed: u64,
    #[serde(default)]
    pub aux_head: bool,
}

#[derive(Clone, Debug)]
struct Arch {
    enc: [Conv2d; 4],
    dec: [Conv2d; 4],
    head: Conv2d,
    aux: Option<Conv2d>,
}

impl Arch {
    fn new(spec: &SegNetSpec) -> (Self, usize) {
        let w = spec.width;
        let mut l = ParamLayout::default();
        let enc = [
            l.conv(3, w, 3, 2, 1),
            l.conv(w, 2 * w, 3, 2, 1),
            l.conv(2 * w, 2 * w, 3, 2, 1),
            l.conv(2 * w, 2 * w, 3, 2, 1),
        ];
        let dec = [
            l.conv(4 * w, 2 * w, 3, 1, 1),
            l.conv(4 * w, 2 * w, 3, 1, 1),
            l.conv(3 * w, w, 3, 1, 1),
            l.conv(w + 3, w, 3, 1, 1),
        ];
        let head = l.conv(w, spec.classes, 1, 1, 0);
        let aux = spec.aux_head.then(|| l.conv(2 * w, spec.classes, 1, 1, 0));
        (Self { enc, dec, head, aux }, l.len())
    }
}

#[derive(Clone, Debug)]
struct Block<T> {
    conv: ConvCache<T>,
    pre: Tensor<T>,
}

fn block_forward<T: Scalar>(conv: &Conv2d, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Block<T>) {
    let (pre, cache) = conv.forward(params, x);
    (silu(&pre), Block { conv: cache, pre })
}

fn block_backward<T: Scalar>(
    conv: &Conv2d,
    params: &[T],
    block: &Block<T>,
    dout: &Tensor<T>,
    grads: &mut [T],
    want_input: bool,
) -> Option<Tensor<T>> {
    let dpre = silu_backward(&block.pre, dout);
    conv.backward(params, &block.conv, &dpre, Some(grads), want_input)
}

fn clamp_logits<T: Scalar>(raw: &Tensor<T>) -> Tensor<T> {
    let lim = T::of(LOGIT_CLAMP);
    Tensor {
        channels: raw.channels,
        height: raw.height,
        width: raw.width,
        data: raw.data.iter().map(|&v| v.max(-lim).min(lim)).collect(),
    }
}

fn clamp_backward<T: Scalar>(raw: &Tensor<T>, d: &Tensor<T>) -> Tensor<T> {
    let lim = T::of(LOGIT_CLAMP);
    Tensor {
        channels: d.channels,
        height: d.height,
        width: d.width,
        data: raw
            .data
            .iter()
            .zip(&d.data)
            .map(|(&r, &g)| if r > lim || r < -lim { T::zero() } else { g })
            .collect(),
    }
}

/// Forward activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct SegForward<T> {
    /// Clamped logits, `C x H x W`.
    pub logits: Tensor<T>,
    /// Clamped auxiliary logits at 1/4 resolution, if the head exists.
    pub aux_logits: Option<Tensor<T>>,
    raw: Tensor<T>,
    aux_raw: Option<Tensor<T>>,
    enc: Vec<Block<T>>,
    dec: Vec<Block<T>>,
    head: ConvCache<T>,
    aux: Option<ConvCache<T>>,
}

/// Segmentation generator with a flat parameter vector.
#[derive(Clone, Debug)]
pub struct SegNet<T> {
    spec: SegNetSpec,
    arch: Arch,
    params: Vec<T>,
}

impl<T: Scalar> SegNet<T> {
    /// Deterministic initialization from `spec.seed`.
    pub fn new(spec: SegNetSpec) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", spec.classes)));
        }
        if spec.width < 1 {
            return Err(Error::InvalidArgument("network width must be positive".into()));
        }
        let (arch, len) = Arch::new(&spec);
        let mut params = vec![T::zero(); len];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for conv in arch.enc.iter().chain(&arch.dec) {
            conv.init(&mut params, &mut rng, 2f64.sqrt());
        }
        arch.head.init(&mut params, &mut rng, 1.0);
        if let Some(aux) = &arch.aux {
            aux.init(&mut params, &mut rng, 1.0);
        }
        Ok(Self { spec, arch, params })
    }

    pub fn with_params(spec: SegNetSpec, params: Vec<T>) -> Result<Self> {
        let (arch, len) = Arch::new(&spec);
        if params.len() != len {
            return Err(Error::Shape(format!("segnet expects {len} parameters, got {}", params.len())));
        }
        Ok(Self { spec, arch, params })
    }

    pub fn spec(&self) -> &SegNetSpec {
        &self.spec
    }
    pub fn params(&self) -> &[T] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter range of the auxiliary head, if present.
    pub fn aux_param_range(&self) -> Option<std::ops::Range<usize>> {
        self.arch.aux.map(|c| c.offset..c.offset + c.param_len())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if !height.is_multiple_of(16) || !width.is_multiple_of(16) || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "segnet input must be a positive multiple of 16 on each side, got {height}x{width}"
            )));
        }
        Ok(())
    }

    pub fn image_tensor(image: &SegImage) -> Tensor<T> {
        let hwc: Vec<T> = image.pixels().iter().map(|&v| T::of(v)).collect();
        Tensor::from_hwc(image.height(), image.width(), 3, &hwc)
    }

    pub fn forward(&self, x: &Tensor<T>) -> SegForward<T> {
        self.forward_with(&self.params, x)
    }

    pub fn forward_with(&self, params: &[T], x: &Tensor<T>) -> SegForward<T> {
        assert_eq!(x.channels, 3, "segnet expects RGB input");
        self.check_input(x.height, x.width).expect("input size");
        let a = &self.arch;
        let mut enc = Vec::with_capacity(4);
        let mut feats = Vec::with_capacity(4);
        let mut cur = x.clone();
        for conv in &a.enc {
            let (out, b) = block_forward(conv, params, &cur);
            enc.push(b);
            feats.push(out.clone());
            cur = out;
        }
        let skips = [&feats[2], &feats[1], &feats[0], x];
        let mut dec = Vec::with_capacity(4);
        let mut aux_raw = None;
        let mut aux_cache = None;
        for (i, (conv, skip)) in a.dec.iter().zip(skips).enumerate() {
            let input = concat(&upsample2(&cur), skip);
            let (out, b) = block_forward(conv, params, &input);
            dec.push(b);
            cur = out;
            if i == 1 {
                if let Some(aux) = &a.aux {
                    let (r, c) = aux.forward(params, &cur);
                    aux_raw = Some(r);
                    aux_cache = Some(c);
                }
            }
        }
        let (raw, head) = a.head.forward(params, &cur);
        SegForward {
            logits: clamp_logits(&raw),
            aux_logits: aux_raw.as_ref().map(clamp_logits),
            raw,
            aux_raw,
            enc,
            dec,
            head,
            aux: aux_cache,
        }
    }

    /// Accumulates `d loss / d params` into `grads` given the gradient with
    /// respect to the clamped logits (and optionally the auxiliary logits).
    pub fn backward_with(
        &self,
        params: &[T],
        fwd: &SegForward<T>,
        d_logits: &Tensor<T>,
        d_aux: Option<&Tensor<T>>,
        grads: &mut [T],
    ) {
        assert_eq!(grads.len(), params.len());
        let a = &self.arch;
        let w = self.spec.width;
        let d_raw = clamp_backward(&fwd.raw, d_logits);
        let mut d_cur = a.head.backward(params, &fwd.head, &d_raw, Some(&mut *grads), true).expect("input grad");

        // skip channel counts per decoder block (upsampled part first)
        let up_channels = [2 * w, 2 * w, 2 * w, w];
        let mut d_skip: [Option<Tensor<T>>; 3] = [None, None, None];
        for i in (0..4).rev() {
            if i == 1 {
                if let (Some(aux), Some(cache), Some(d_aux), Some(raw)) =
                    (&a.aux, &fwd.aux, d_aux, &fwd.aux_raw)
                {
                    let d_aux_raw = clamp_backward(raw, d_aux);
                    let d = aux.backward(params, cache, &d_aux_raw, Some(&mut *grads), true).expect("input grad");
                    d_cur.add_assign(&d);
                }
            }
            let d_in = block_backward(&a.dec[i], params, &fwd.dec[i], &d_cur, grads, true).expect("input grad");
            let (d_up, d_sk) = split(&d_in, up_channels[i]);
            if i < 3 {
                // decoder i consumed encoder feature 2 - i
                d_skip[2 - i] = Some(d_sk);
            }
            d_cur = upsample2_backward(&d_up);
        }
        for i in (0..4).rev() {
            if i < 3 {
                if let Some(s) = d_skip[i].take() {
                    d_cur.add_assign(&s);
                }
            }
            match block_backward(&a.enc[i], params, &fwd.enc[i], &d_cur, grads, i > 0) {
                Some(d) => d_cur = d,
                None => break,
            }
        }
    }

    pub fn backward(&self, fwd: &SegForward<T>, d_logits: &Tensor<T>, d_aux: Option<&Tensor<T>>, grads: &mut [T]) {
        self.backward_with(&self.params, fwd, d_logits, d_aux, grads);
    }

    pub fn predict(&self, image: &SegImage) -> Result<ProbMap<T>> {
        self.check_input(image.height(), image.width())?;
        let fwd = self.forward(&Self::image_tensor(image));
        Ok(softmax(&fwd.logits))
    }
}

/// Channel softmax of `C x H x W` logits into an `H x W x C` [`ProbMap`].
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> ProbMap<T> {
    let (c, h, w) = logits.dims();
    let plane = h * w;
    let mut probs = vec![T::zero(); c * plane];
    let mut buf = vec![T::zero(); c];
    for p in 0..plane {
        let mut max = logits.data[p];
        for k in 1..c {
            max = max.max(logits.data[k * plane + p]);
        }
        let mut sum = T::zero();
        for k in 0..c {
            let e = (logits.data[k * plane + p] - max).exp();
            buf[k] = e;
            sum += e;
        }
        for k in 0..c {
            probs[p * c + k] = buf[k] / sum;
        }
    }
    ProbMap::from_trusted(h, w, c, probs)
}

/// Pulls a gradient with respect to probabilities (`H x W x C`) back to the
/// logits (`C x H x W`).
pub fn softmax_backward<T: Scalar>(probs: &ProbMap<T>, d_probs: &[T]) -> Tensor<T> {
    let (h, w, c) = (probs.height(), probs.width(), probs.classes());
    let plane = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for (pix, (p, g)) in probs.as_slice().chunks_exact(c).zip(d_probs.chunks_exact(c)).enumerate() {
        let dot = p.iter().zip(g).fold(T::zero(), |a, (&pi, &gi)| a + pi * gi);
        for k in 0..c {
            out.data[k * plane + pix] = p[k] * (g[k] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;

    fn spec(width: usize, seed: u64) -> SegNetSpec {
        SegNetSpec { classes: 4, width, seed, aux_head: false }
    }

    #[test]
    fn forward_shape_and_normalization() {
        let net = SegNet::<f64>::new(spec(4, 1)).unwrap();
        let px: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 31) % 255) as f64 / 255.0).collect();
        let img = SegImage::new("a", 64, 64, px, Domain::Source).unwrap();
        let p = net.predict(&img).unwrap();
        assert_eq!((p.height(), p.width(), p.classes()), (64, 64, 4));
        for px in p.as_slice().chunks_exact(4) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SegNet::<f32>::new(spec(16, 5)).unwrap();
        let b = SegNet::<f32>::new(spec(16, 5)).unwrap();
        let c = SegNet::<f32>::new(spec(16, 6)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!((50_000..=80_000).contains(&a.num_params()), "{}", a.num_params());
    }

    #[test]
    fn zero_image_gives_finite_output() {
        let net = SegNet::<f32>::new(spec(8, 2)).unwrap();
        let img = SegImage::new("z", 64, 64, vec![0.0; 64 * 64 * 3], Domain::Target).unwrap();
        let p = net.predict(&img).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_16() {
        let net = SegNet::<f32>::new(spec(4, 2)).unwrap();
        let img = SegImage::new("z", 40, 32, vec![0.0; 40 * 32 * 3], Domain::Target).unwrap();
        assert!(net.predict(&img).is_err());
    }

    #[test]
    fn aux_head_emits_quarter_resolution() {
        let net = SegNet::<f64>::new(SegNetSpec { classes: 3, width: 2, seed: 0, aux_head: true }).unwrap();
        let fwd = net.forward(&Tensor::zeros(3, 32, 16));
        let aux = fwd.aux_logits.unwrap();
        assert_eq!(aux.dims(), (3, 8, 4));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = Tensor { channels: 3, height: 1, width: 2, data: vec![0.1f64, -2.0, 1.5, 0.3, 4.0, 0.0] };
        let mut shifted = logits.clone();
        for (i, v) in shifted.data.iter_mut().enumerate() {
            // per-pixel constant: pixel index is i % 2
            *v += if i % 2 == 0 { 7.25 } else { -3.5 };
        }
        let a = softmax(&logits);
        let b = softmax(&shifted);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let raw = Tensor { channels: 1, height: 1, width: 3, data: vec![-40.0f64, 0.0, 31.0] };
        let g = clamp_backward(&raw, &Tensor { channels: 1, height: 1, width: 3, data: vec![1.0; 3] });
        assert_eq!(g.data, vec![0.0, 1.0, 0.0]);
        assert_eq!(clamp_logits(&raw).data, vec![-30.0, 0.0, 30.0]);
    }
}
