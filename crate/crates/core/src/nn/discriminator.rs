//! Patch-wise domain discriminator over entropy maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, silu, silu_backward, Conv2d, ConvCache, ParamLayout, Tensor};
use super::segnet::LOGIT_CLAMP;
use crate::data::EntropyMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub classes: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DiscForward<T> {
    /// Clamped logits, one per output location.
    pub logits: Tensor<T>,
    raw: Tensor<T>,
    convs: Vec<ConvCache<T>>,
    pres: Vec<Tensor<T>>,
}

impl<T: Scalar> DiscForward<T> {
    /// Domain probability per location, strictly inside `(0, 1)`.
    pub fn probs(&self) -> Vec<T> {
        self.logits.data.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Four 4x4 stride-2 convolutions ending in a one-channel sigmoid map.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    convs: [Conv2d; 4],
    params: Vec<T>,
}

fn layers(spec: &DiscriminatorSpec) -> ([Conv2d; 4], usize) {
    let w = spec.width;
    let mut l = ParamLayout::default();
    let convs = [
        l.conv(spec.classes, w, 4, 2, 1),
        l.conv(w, 2 * w, 4, 2, 1),
        l.conv(2 * w, 2 * w, 4, 2, 1),
        l.conv(2 * w, 1, 4, 2, 1),
    ];
    (convs, l.len())
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec) -> Result<Self> {
        if spec.classes < 2 || spec.width < 1 {
            return Err(Error::InvalidArgument(format!("invalid discriminator spec {spec:?}")));
        }
        let (convs, len) = layers(&spec);
        let mut params = vec![T::zero(); len];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for (i, conv) in convs.iter().enumerate() {
            conv.init(&mut params, &mut rng, if i < 3 { 2f64.sqrt() } else { 1.0 });
        }
        Ok(Self { spec, convs, params })
    }

    pub fn with_params(spec: DiscriminatorSpec, params: Vec<T>) -> Result<Self> {
        let (convs, len) = layers(&spec);
        if params.len() != len {
            return Err(Error::Shape(format!("discriminator expects {len} parameters, got {}", params.len())));
        }
        Ok(Self { spec, convs, params })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }
    pub fn params(&self) -> &[T] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Range of the final layer (weights then bias).
    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        let c = self.convs[3];
        c.offset..c.offset + c.param_len()
    }

    pub fn entropy_tensor(map: &EntropyMap<T>) -> Tensor<T> {
        Tensor::from_hwc(map.height(), map.width(), map.classes(), map.as_slice())
    }

    pub fn forward(&self, x: &Tensor<T>) -> DiscForward<T> {
        self.forward_with(&self.params, x)
    }

    pub fn forward_with(&self, params: &[T], x: &Tensor<T>) -> DiscForward<T> {
        assert_eq!(x.channels, self.spec.classes, "discriminator input channels");
        let mut convs = Vec::with_capacity(4);
        let mut pres = Vec::with_capacity(3);
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (pre, cache) = conv.forward(params, &cur);
            convs.push(cache);
            if i < 3 {
                cur = silu(&pre);
                pres.push(pre);
            } else {
                cur = pre;
            }
        }
        let lim = T::of(LOGIT_CLAMP);
        let logits = Tensor {
            channels: cur.channels,
            height: cur.height,
            width: cur.width,
            data: cur.data.iter().map(|&v| v.max(-lim).min(lim)).collect(),
        };
        DiscForward { logits, raw: cur, convs, pres }
    }

    /// Returns the input gradient; parameter gradients are accumulated only
    /// when `grads` is given.
    pub fn backward_with(
        &self,
        params: &[T],
        fwd: &DiscForward<T>,
        d_logits: &Tensor<T>,
        mut grads: Option<&mut [T]>,
    ) -> Tensor<T> {
        let lim = T::of(LOGIT_CLAMP);
        let mut d = Tensor {
            channels: d_logits.channels,
            height: d_logits.height,
            width: d_logits.width,
            data: fwd
                .raw
                .data
                .iter()
                .zip(&d_logits.data)
                .map(|(&r, &g)| if r > lim || r < -lim { T::zero() } else { g })
                .collect(),
        };
        for i in (0..4).rev() {
            if i < 3 {
                d = silu_backward(&fwd.pres[i], &d);
            }
            d = self.convs[i]
                .backward(params, &fwd.convs[i], &d, grads.as_deref_mut(), true)
                .expect("input grad");
        }
        d
    }

    pub fn backward(&self, fwd: &DiscForward<T>, d_logits: &Tensor<T>, grads: Option<&mut [T]>) -> Tensor<T> {
        self.backward_with(&self.params, fwd, d_logits, grads)
    }
}
