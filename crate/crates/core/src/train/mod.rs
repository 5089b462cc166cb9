//! Decoder-only training: CE + soft Dice, hand-written backward pass,
//! Adam with a per-epoch linear learning-rate decay.

mod adam;
mod backward;
mod loss;

pub use adam::{adam_step, AdamParams, OptimizerState};
pub use backward::{backward_decoder, DecoderGrads};
pub use loss::{ce_loss, combined_loss, soft_dice_loss, LossGrad};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::sunet::{decoder_forward, Decoder, EncoderFeatures, SUNet};
use crate::tensor::{Real, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dice_smooth: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2.5e-3,
            epochs: 100,
            batch: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dice_smooth: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.batch != 1 {
            return Err(Error::InvalidArgument(
                "only batch size 1 is supported".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(
                "Adam betas must lie in [0, 1)".into(),
            ));
        }
        if !(self.adam_eps > 0.0) || !(self.dice_smooth > 0.0) {
            return Err(Error::InvalidArgument("epsilons must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Learning rate for `epoch`, decaying linearly from `lr0` toward zero.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            config.epochs
        )));
    }
    Ok(config.lr0 * (1.0 - epoch as f64 / config.epochs as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub epochs: Vec<EpochLog>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.mean_loss, e.lr);
        }
        s
    }
}

/// One sample with its frozen encoder features already computed.
#[derive(Clone, Debug)]
pub struct FeatureSample<T = f32> {
    pub features: EncoderFeatures<T>,
    pub gt: LabelVolume,
}

/// Forward, loss and backward for one sample, returning the loss.
pub fn sample_gradients<T: Real>(
    decoder: &Decoder<T>,
    sample: &FeatureSample<T>,
    smooth: f64,
) -> Result<(f64, DecoderGrads<T>)> {
    let (logits, cache) = decoder_forward(decoder, &sample.features)?;
    let lg = combined_loss(&logits, &sample.gt, smooth)?;
    let grads = backward_decoder(decoder, &cache, &lg.grad)?;
    Ok((lg.loss, grads))
}

/// Applies one gradient update and bumps the decoder generation.
pub fn apply_update<T: Real>(
    decoder: &mut Decoder<T>,
    grads: &DecoderGrads<T>,
    state: &mut OptimizerState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    let mut params = decoder.params_mut();
    adam_step(&mut params, &grads.tensors(), state, lr, hp)?;
    decoder.touch();
    Ok(())
}

/// Per-epoch callback; returning `false` stops training after that epoch.
pub type EpochHook<'a, T> = dyn FnMut(&EpochLog, &Decoder<T>) -> bool + 'a;

/// Trains the decoder on precomputed features. `state` is created when
/// absent and otherwise continues from where it left off.
pub fn train_on_features<T: Real>(
    decoder: &mut Decoder<T>,
    samples: &[FeatureSample<T>],
    config: &TrainConfig,
    state: &mut Option<OptimizerState>,
    hook: &mut EpochHook<'_, T>,
) -> Result<LossLog> {
    config.validate()?;
    let mut log = LossLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let st = state.get_or_insert_with(|| {
        let lens: Vec<usize> = decoder
            .stages()
            .flat_map(|b| [b.weights().len(), b.bias().len()])
            .collect();
        OptimizerState::for_shapes(&lens)
    });
    let hp = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = sample_gradients(decoder, &samples[i], config.dice_smooth)?;
            total += loss;
            apply_update(decoder, &grads, st, lr, hp)?;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: total / samples.len() as f64,
            lr,
        };
        log.epochs.push(entry);
        log::debug!("epoch {epoch}: loss {:.5} lr {lr:.3e}", entry.mean_loss);
        if !hook(&entry, decoder) {
            break;
        }
    }
    Ok(log)
}

/// Encodes each (flair, t1gd, gt) once with the frozen encoders.
pub fn encode_samples(
    net: &SUNet,
    data: &[(&Volume, &Volume, &LabelVolume)],
) -> Result<Vec<FeatureSample>> {
    data.iter()
        .map(|(f, t, gt)| {
            if f.dims() != gt.dims() {
                return Err(Error::Shape(format!(
                    "image dims {:?} differ from label dims {:?}",
                    f.dims(),
                    gt.dims()
                )));
            }
            Ok(FeatureSample {
                features: net.encode(f, t)?,
                gt: (*gt).clone(),
            })
        })
        .collect()
}

/// Trains the decoder of `net` on `(flair, t1gd, gt)` triples; the
/// encoders are only read.
pub fn train_decoder(
    net: &mut SUNet,
    data: &[(&Volume, &Volume, &LabelVolume)],
    config: &TrainConfig,
    state: &mut Option<OptimizerState>,
    hook: &mut EpochHook<'_, f32>,
) -> Result<LossLog> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(LossLog::default());
    }
    let samples = encode_samples(net, data)?;
    train_on_features(&mut net.decoder, &samples, config, state, hook)
}
