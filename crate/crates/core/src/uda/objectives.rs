//! Training losses as functions of a flat parameter vector, for gradient
//! verification against finite differences.

use super::losses::{bce_with_logits, cross_entropy, entropy_map, DomainConvention};
use super::fool_logit_grad;
use crate::data::{DenseLabelMap, SegImage};
use crate::error::{Error, Result};
use crate::nn::{softmax, Discriminator, Objective, SegNet, Tensor};

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!("expected {expected} parameters, got {got}")));
    }
    Ok(())
}

/// Source cross-entropy as a function of the generator parameters.
pub struct SegLossObjective {
    pub net: SegNet<f64>,
    pub image: SegImage,
    pub labels: DenseLabelMap,
}

impl Objective for SegLossObjective {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        self.value_and_grad(params).map(|(v, _)| v)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(self.num_params(), params.len())?;
        let fwd = self.net.forward_with(params, &SegNet::image_tensor(&self.image));
        let p = softmax(&fwd.logits);
        let (loss, d) = cross_entropy(&p, self.labels.as_slice(), None, 1.0);
        let mut grads = vec![0.0; params.len()];
        self.net.backward_with(params, &fwd, &d, None, &mut grads);
        Ok((loss, grads))
    }
}

/// The generator-side fooling term `-mean ln D(E(G(x)))` on a target
/// image, differentiated through D, the entropy map and the softmax.
pub struct FoolObjective {
    pub net: SegNet<f64>,
    pub disc: Discriminator<f64>,
    pub image: SegImage,
    pub convention: DomainConvention,
}

impl Objective for FoolObjective {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        self.value_and_grad(params).map(|(v, _)| v)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(self.num_params(), params.len())?;
        let fwd = self.net.forward_with(params, &SegNet::image_tensor(&self.image));
        let p = softmax(&fwd.logits);
        let (value, d_logits, _) = fool_logit_grad(&self.disc, &p, 1.0, self.convention);
        let mut grads = vec![0.0; params.len()];
        self.net.backward_with(params, &fwd, &d_logits, None, &mut grads);
        Ok((value, grads))
    }
}

/// Discriminator loss over a fixed pair of entropy maps, as a function of
/// the discriminator parameters.
pub struct DiscLossObjective {
    pub disc: Discriminator<f64>,
    pub source_entropy: Tensor<f64>,
    pub target_entropy: Tensor<f64>,
}

impl DiscLossObjective {
    pub fn from_images(net: &SegNet<f64>, disc: Discriminator<f64>, source: &SegImage, target: &SegImage) -> Result<Self> {
        let e = |img: &SegImage| -> Result<Tensor<f64>> {
            Ok(Discriminator::entropy_tensor(&entropy_map(&net.predict(img)?)))
        };
        Ok(Self { source_entropy: e(source)?, target_entropy: e(target)?, disc })
    }
}

impl Objective for DiscLossObjective {
    fn num_params(&self) -> usize {
        self.disc.params().len()
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        self.value_and_grad(params).map(|(v, _)| v)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(self.num_params(), params.len())?;
        let mut grads = vec![0.0; params.len()];
        let mut total = 0.0;
        for (map, label_one) in [(&self.source_entropy, true), (&self.target_entropy, false)] {
            let fwd = self.disc.forward_with(params, map);
            let (l, d) = bce_with_logits(&fwd.logits, label_one, 1.0);
            total += l;
            self.disc.backward_with(params, &fwd, &d, Some(&mut grads));
        }
        Ok((total, grads))
    }
}
