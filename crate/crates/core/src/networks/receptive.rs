use super::{Discriminator, Scale};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Output whose receptive field is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeScale {
    /// Trunk features after the attention block (the features the pooled c0 logit sees).
    TrunkFeature,
    C1,
    C2,
}

/// Side length, in input pixels, of the input support of the central output
/// unit at `scale`, measured by gradient support on a zero image of
/// `image_size` with all-ones weights, zero biases and no spectral scaling.
pub fn probe_receptive_field(
    d: &Discriminator,
    store: &ParamStore,
    scale: ProbeScale,
    image_size: usize,
) -> Result<usize> {
    let mut store = store.clone();
    for (w, b) in d.conv_params() {
        let p = store.get_mut(w);
        p.value = Tensor::full(p.value.shape(), 1.0);
        let p = store.get_mut(b);
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut probe = d.clone();
    probe.spectral = false;

    let mut g = Graph::frozen(&store);
    let channels = d.in_channels();
    let x = g.input(Tensor::zeros(&[1, channels, image_size, image_size]));
    let out = match scale {
        ProbeScale::TrunkFeature => probe.trunk_features(&mut g, x, 3)?,
        ProbeScale::C1 | ProbeScale::C2 => {
            let s = if scale == ProbeScale::C1 { Scale::C1 } else { Scale::C2 };
            let o = probe.forward(&mut g, x)?;
            o.logits.get(s).ok_or_else(|| {
                Error::Configuration(format!("scale {} is not enabled on this discriminator", s.name()))
            })?
        }
    };
    let (_, c, oh, ow) = g.value(out).dims4()?;
    let mut mask = Tensor::zeros(&[1, c, oh, ow]);
    mask.data_mut()[(oh / 2) * ow + ow / 2] = 1.0;
    let sel = g.mul_const(out, mask)?;
    let loss = g.sum_all(sel);
    let grads = g.backward(loss);
    let grad = grads
        .wrt(x)
        .ok_or_else(|| Error::Numeric("probe produced no input gradient".into()))?;

    let hw = image_size * image_size;
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, _) in grad
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
    {
        let (r, col) = ((i % hw) / image_size, i % image_size);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(col);
        c1 = c1.max(col);
    }
    if r0 == usize::MAX {
        return Err(Error::Numeric("probe gradient is zero everywhere".into()));
    }
    if r0 == 0 || c0 == 0 || r1 + 1 == image_size || c1 + 1 == image_size {
        return Err(Error::Configuration(format!(
            "receptive field is clipped by the border of a {image_size}px probe; use a larger probe image"
        )));
    }
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    if h != w {
        return Err(Error::Numeric(format!("non-square receptive field {h}x{w}")));
    }
    Ok(h)
}
