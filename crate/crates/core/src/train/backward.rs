use crate::error::{Error, Result};
use crate::sunet::{Decoder, DecoderCache};
use crate::tensor::{block_sum, KernelBank, Real, Volume};

/// Gradients of every decoder stage, deepest first, head last.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGrads<T = f32> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Real> DecoderGrads<T> {
    /// Buffers in the order of [`Decoder::params_mut`].
    pub fn tensors(&self) -> Vec<&[T]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_zero()))
    }
}

struct StageGrads<T> {
    weights: Vec<T>,
    bias: Vec<T>,
    /// Gradient w.r.t. the upsampled part of the stage input.
    up: Option<Vec<f64>>,
}

/// Backward through one pointwise stage whose input is `x` and whose
/// pre-activation gradient is `g` (channel-major, `count x voxels`).
fn stage_backward<T: Real>(
    bank: &KernelBank<T>,
    x: &Volume<T>,
    g: &[f64],
    up_channels: usize,
    want_up: bool,
) -> StageGrads<T> {
    let n = x.voxels();
    let (out_ch, in_ch) = (bank.count(), bank.in_channels());
    let mut weights = Vec::with_capacity(out_ch * in_ch);
    let mut bias = Vec::with_capacity(out_ch);
    for o in 0..out_ch {
        let go = &g[o * n..(o + 1) * n];
        bias.push(T::of(go.iter().sum()));
        for i in 0..in_ch {
            let xi = x.channel(i);
            let dot: f64 = go.iter().zip(xi).map(|(a, b)| a * b.wide()).sum();
            weights.push(T::of(dot));
        }
    }
    let up = want_up.then(|| {
        let mut du = vec![0.0; up_channels * n];
        for i in 0..up_channels {
            let row = &mut du[i * n..(i + 1) * n];
            for o in 0..out_ch {
                let w = bank.weights()[o * in_ch + i].wide();
                if w == 0.0 {
                    continue;
                }
                for (d, &gv) in row.iter_mut().zip(&g[o * n..(o + 1) * n]) {
                    *d += w * gv;
                }
            }
        }
        du
    });
    StageGrads { weights, bias, up }
}

/// Reverse-mode gradients of every decoder weight given the gradient of
/// the loss with respect to the logits. Gradients flowing into skip
/// connections or the bottom features are dropped: the encoders are
/// frozen.
pub fn backward_decoder<T: Real>(
    decoder: &Decoder<T>,
    cache: &DecoderCache<T>,
    d_logits: &Volume<T>,
) -> Result<DecoderGrads<T>> {
    if cache.generation != decoder.generation() {
        return Err(Error::StaleCache {
            cache: cache.generation,
            decoder: decoder.generation(),
        });
    }
    let stages: Vec<&KernelBank<T>> = decoder.stages().collect();
    let levels = stages.len();
    let head_in = &cache.inputs[levels - 1];
    if d_logits.dims() != head_in.dims() || d_logits.channels() != decoder.head().count() {
        return Err(Error::Shape(
            "logit gradient does not match the cached forward pass".into(),
        ));
    }

    let mut weights = vec![Vec::new(); levels];
    let mut bias = vec![Vec::new(); levels];
    let mut g: Vec<f64> = d_logits.data().iter().map(|v| v.wide()).collect();
    for s in (0..levels).rev() {
        let x = &cache.inputs[s];
        let sg = stage_backward(stages[s], x, &g, cache.up_channels[s], s > 0);
        weights[s] = sg.weights;
        bias[s] = sg.bias;
        if let Some(du) = sg.up {
            // Through the upsampling (adjoint: block sums) into the
            // previous hidden stage, then through its ReLU.
            let nd = x.dims().len();
            let du = Volume::from_parts(x.dims().to_vec(), cache.up_channels[s], du);
            let dh = block_sum(&du, &vec![decoder.factors()[s]; nd])?;
            let h = &cache.hidden_out[s - 1];
            g = dh
                .data()
                .iter()
                .zip(h.data())
                .map(|(&d, &hv)| if hv > T::zero() { d } else { 0.0 })
                .collect();
        }
    }
    Ok(DecoderGrads { weights, bias })
}
