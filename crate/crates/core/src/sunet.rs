//! Dual-encoder U-shaped network: two frozen marker-learned encoders
//! (FLAIR and T1Gd), skips that concatenate both encoders' pre-pooling
//! activations, and a pointwise decoder ending in a four-class head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flim::{run_encoder, stable_hash, EncoderLayer, LayerSpec};
use crate::metrics::{LabelVolume, CLASS_COUNT};
use crate::tensor::{concat_channels, pointwise, upsample_nearest, KernelBank, Real, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub flair: Vec<LayerSpec>,
    pub t1gd: Vec<LayerSpec>,
    /// Widths of the hidden decoder stages, deepest first; one per level
    /// except the shallowest, where the class head sits.
    pub decoder_widths: Vec<usize>,
    pub classes: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            flair: LayerSpec::default_stack(),
            t1gd: LayerSpec::default_stack(),
            decoder_widths: vec![64, 32],
            classes: CLASS_COUNT,
        }
    }
}

impl ArchSpec {
    pub fn levels(&self) -> usize {
        self.flair.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.flair.is_empty() || self.flair.len() != self.t1gd.len() {
            return Err(Error::InvalidArgument(format!(
                "encoders need the same nonzero depth, got {} and {}",
                self.flair.len(),
                self.t1gd.len()
            )));
        }
        if self.decoder_widths.len() + 1 != self.levels() {
            return Err(Error::InvalidArgument(format!(
                "{} levels need {} decoder widths, got {}",
                self.levels(),
                self.levels() - 1,
                self.decoder_widths.len()
            )));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::InvalidArgument("decoder widths must be >= 1".into()));
        }
        if self.classes != CLASS_COUNT {
            return Err(Error::InvalidArgument(format!(
                "the network emits {CLASS_COUNT} classes, got {}",
                self.classes
            )));
        }
        for (a, b) in self.flair.iter().zip(&self.t1gd) {
            a.validate()?;
            b.validate()?;
            if a.pool != b.pool {
                return Err(Error::InvalidArgument(
                    "both encoders must share pooling geometry".into(),
                ));
            }
        }
        Ok(())
    }

    /// Smallest per-axis extent divisor the input must respect.
    pub fn total_stride(&self) -> usize {
        self.flair.iter().map(|l| l.pool.stride).product()
    }
}

/// Trainable part of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T = f32> {
    /// Hidden pointwise stages, deepest first.
    pub(crate) hidden: Vec<KernelBank<T>>,
    pub(crate) head: KernelBank<T>,
    /// Upsampling factor entering each stage, deepest first.
    pub(crate) factors: Vec<usize>,
    /// Bumped on every weight update; forward caches remember it.
    pub(crate) generation: u64,
}

impl<T: Real> Decoder<T> {
    pub fn new(
        hidden: Vec<KernelBank<T>>,
        head: KernelBank<T>,
        factors: Vec<usize>,
    ) -> Result<Self> {
        if factors.len() != hidden.len() + 1 {
            return Err(Error::InvalidArgument(
                "one upsampling factor per stage".into(),
            ));
        }
        if hidden.iter().chain(Some(&head)).any(|b| !b.is_pointwise()) {
            return Err(Error::InvalidArgument(
                "decoder stages are pointwise".into(),
            ));
        }
        Ok(Decoder {
            hidden,
            head,
            factors,
            generation: 0,
        })
    }

    pub fn stages(&self) -> impl Iterator<Item = &KernelBank<T>> {
        self.hidden.iter().chain(std::iter::once(&self.head))
    }

    pub fn hidden(&self) -> &[KernelBank<T>] {
        &self.hidden
    }

    pub fn head(&self) -> &KernelBank<T> {
        &self.head
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Weight and bias buffers of every stage, deepest first.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * (self.hidden.len() + 1));
        for bank in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
        {
            let (w, b) = bank.buffers_mut();
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.stages()
            .map(|b| b.weights().len() + b.bias().len())
            .sum()
    }

    pub(crate) fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn cast<U: Real>(&self) -> Decoder<U> {
        Decoder {
            hidden: self.hidden.iter().map(|b| b.cast()).collect(),
            head: self.head.cast(),
            factors: self.factors.clone(),
            generation: self.generation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SUNet {
    pub arch: ArchSpec,
    pub encoder_flair: Vec<EncoderLayer>,
    pub encoder_t1gd: Vec<EncoderLayer>,
    pub decoder: Decoder,
}

/// Frozen encoder outputs the decoder consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures<T = f32> {
    /// Concatenated FLAIR and T1Gd pre-pooling activations, shallow first.
    pub skips: Vec<Volume<T>>,
    /// Concatenated pooled outputs of the deepest layers.
    pub bottom: Volume<T>,
}

impl<T: Real> EncoderFeatures<T> {
    pub fn cast<U: Real>(&self) -> EncoderFeatures<U> {
        EncoderFeatures {
            skips: self.skips.iter().map(|v| v.cast()).collect(),
            bottom: self.bottom.cast(),
        }
    }
}

/// Activations saved by [`decoder_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct DecoderCache<T = f32> {
    pub(crate) generation: u64,
    /// Concatenated input of every stage, deepest first (head last).
    pub(crate) inputs: Vec<Volume<T>>,
    /// Rectified output of every hidden stage.
    pub(crate) hidden_out: Vec<Volume<T>>,
    /// Channels of each stage input that came from upsampling.
    pub(crate) up_channels: Vec<usize>,
}

fn glorot<T: Real>(
    rng: &mut ChaCha8Rng,
    out: usize,
    inp: usize,
    nd: usize,
) -> Result<KernelBank<T>> {
    let a = (6.0 / (inp + out) as f64).sqrt();
    let weights = (0..out * inp)
        .map(|_| T::of(rng.random_range(-a..=a)))
        .collect();
    KernelBank::new(out, inp, vec![1; nd], weights, vec![T::zero(); out])
}

/// Builds the network around two learned encoders with a seeded
/// Glorot-uniform decoder.
pub fn assemble(
    encoder_flair: Vec<EncoderLayer>,
    encoder_t1gd: Vec<EncoderLayer>,
    arch: ArchSpec,
    seed: u64,
) -> Result<SUNet> {
    arch.validate()?;
    let levels = arch.levels();
    if encoder_flair.len() != levels || encoder_t1gd.len() != levels {
        return Err(Error::InvalidArgument(format!(
            "expected {levels} layers per encoder, got {} and {}",
            encoder_flair.len(),
            encoder_t1gd.len()
        )));
    }
    for (i, (f, t)) in encoder_flair.iter().zip(&encoder_t1gd).enumerate() {
        if f.pool != t.pool {
            return Err(Error::InvalidArgument(format!(
                "pooling geometry differs at layer {}",
                i + 1
            )));
        }
        if f.bank.extent().len() != t.bank.extent().len() {
            return Err(Error::Shape("encoders differ in dimensionality".into()));
        }
    }
    let nd = encoder_flair[0].bank.extent().len();
    let skip: Vec<usize> = encoder_flair
        .iter()
        .zip(&encoder_t1gd)
        .map(|(f, t)| f.filter_count() + t.filter_count())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = Vec::with_capacity(levels - 1);
    let mut factors = Vec::with_capacity(levels);
    let mut incoming = skip[levels - 1];
    for s in 0..levels {
        let lvl = levels - 1 - s;
        factors.push(encoder_flair[lvl].pool.stride);
        let in_ch = incoming + skip[lvl];
        if s + 1 < levels {
            let width = arch.decoder_widths[s];
            hidden.push(glorot(&mut rng, width, in_ch, nd)?);
            incoming = width;
        } else {
            let head = glorot(&mut rng, arch.classes, in_ch, nd)?;
            return Ok(SUNet {
                arch,
                encoder_flair,
                encoder_t1gd,
                decoder: Decoder::new(hidden, head, factors)?,
            });
        }
    }
    unreachable!("levels >= 1")
}

impl SUNet {
    pub fn encode(&self, flair: &Volume, t1gd: &Volume) -> Result<EncoderFeatures> {
        if flair.dims() != t1gd.dims() {
            return Err(Error::Shape(format!(
                "FLAIR dims {:?} differ from T1Gd dims {:?}",
                flair.dims(),
                t1gd.dims()
            )));
        }
        if flair.channels() != 1 || t1gd.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                got: flair.channels().max(t1gd.channels()),
            });
        }
        let f = run_encoder(flair, &self.encoder_flair)?;
        let t = run_encoder(t1gd, &self.encoder_t1gd)?;
        let skips = f
            .pre_pools
            .iter()
            .zip(&t.pre_pools)
            .map(|(a, b)| concat_channels(a, b))
            .collect::<Result<Vec<_>>>()?;
        let bottom = concat_channels(&f.pooled, &t.pooled)?;
        Ok(EncoderFeatures { skips, bottom })
    }

    pub fn forward(&self, flair: &Volume, t1gd: &Volume) -> Result<(Volume, DecoderCache)> {
        let feats = self.encode(flair, t1gd)?;
        decoder_forward(&self.decoder, &feats)
    }

    pub fn predict(&self, flair: &Volume, t1gd: &Volume) -> Result<LabelVolume> {
        let (logits, _) = self.forward(flair, t1gd)?;
        predict_from_logits(&logits)
    }

    /// Hash of every encoder weight and normalization statistic.
    pub fn encoder_fingerprint(&self) -> u64 {
        encoder_fingerprint(&self.encoder_flair, &self.encoder_t1gd)
    }
}

pub fn encoder_fingerprint(flair: &[EncoderLayer], t1gd: &[EncoderLayer]) -> u64 {
    let mut bytes = Vec::new();
    for layer in flair.iter().chain(t1gd) {
        for v in layer.norm.mean.iter().chain(&layer.norm.stdev) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.bank.weights().iter().chain(layer.bank.bias()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(layer.pool.window as u64).to_le_bytes());
        bytes.extend_from_slice(&(layer.pool.stride as u64).to_le_bytes());
    }
    stable_hash(&[&bytes])
}

/// Runs the decoder from the deepest features up to full-resolution logits.
pub fn decoder_forward<T: Real>(
    decoder: &Decoder<T>,
    feats: &EncoderFeatures<T>,
) -> Result<(Volume<T>, DecoderCache<T>)> {
    let levels = decoder.factors.len();
    if feats.skips.len() != levels {
        return Err(Error::Shape(format!(
            "decoder has {levels} levels, features have {}",
            feats.skips.len()
        )));
    }
    let mut inputs = Vec::with_capacity(levels);
    let mut hidden_out = Vec::with_capacity(levels - 1);
    let mut up_channels = Vec::with_capacity(levels);
    let mut h = feats.bottom.clone();
    for (s, bank) in decoder.stages().enumerate() {
        let lvl = levels - 1 - s;
        let skip = &feats.skips[lvl];
        let factor = vec![decoder.factors[s]; h.dims().len()];
        let up = upsample_nearest(&h, &factor)?;
        if up.dims() != skip.dims() {
            return Err(Error::Shape(format!(
                "upsampled dims {:?} do not match skip dims {:?} at level {}; input extents must be divisible by the total stride",
                up.dims(),
                skip.dims(),
                lvl + 1
            )));
        }
        let x = concat_channels(&up, skip)?;
        if x.channels() != bank.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: bank.in_channels(),
                got: x.channels(),
            });
        }
        up_channels.push(up.channels());
        let mut z = Volume::from_parts(
            x.dims().to_vec(),
            bank.count(),
            pointwise(x.data(), x.channels(), x.voxels(), bank),
        );
        inputs.push(x);
        if s + 1 < levels {
            crate::tensor::relu_in_place(&mut z);
            hidden_out.push(z.clone());
            h = z;
        } else {
            return Ok((
                z,
                DecoderCache {
                    generation: decoder.generation,
                    inputs,
                    hidden_out,
                    up_channels,
                },
            ));
        }
    }
    unreachable!("decoder has at least one stage")
}

/// Per-voxel argmax over class channels; ties go to the lowest label.
pub fn predict_from_logits<T: Real>(logits: &Volume<T>) -> Result<LabelVolume> {
    let n = logits.voxels();
    let c = logits.channels();
    let mut labels = vec![0u8; n];
    for (v, label) in labels.iter_mut().enumerate() {
        let mut best = 0;
        for k in 1..c {
            if logits.data()[k * n + v] > logits.data()[best * n + v] {
                best = k;
            }
        }
        *label = best as u8;
    }
    LabelVolume::new(logits.dims().to_vec(), labels)
}
