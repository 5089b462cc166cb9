//! JSON checkpoints. Float weights travel as base64 little-endian bytes so
//! a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codec::{f32_b64, f64_b64, vec_f64_b64};
use crate::criterion::FilterAnnotation;
use crate::error::{Error, Result};
use crate::flim::{EncoderLayer, FilterProvenance, MarkerSet, NormParams, PoolSpec};
use crate::sunet::{ArchSpec, Decoder, SUNet};
use crate::tensor::KernelBank;
use crate::train::OptimizerState;

pub const CHECKPOINT_FORMAT: &str = "flim-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume a session or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub encoder_flair: Vec<EncoderLayer>,
    pub encoder_t1gd: Vec<EncoderLayer>,
    pub annotations: FilterAnnotation,
    pub decoder: Option<Decoder>,
    pub optimizer: Option<OptimizerState>,
    pub selected: Vec<String>,
    pub markers: Vec<MarkerSet>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_net(net: &SUNet, annotations: FilterAnnotation, seed: u64) -> Self {
        Checkpoint {
            arch: net.arch.clone(),
            encoder_flair: net.encoder_flair.clone(),
            encoder_t1gd: net.encoder_t1gd.clone(),
            annotations,
            decoder: Some(net.decoder.clone()),
            optimizer: None,
            selected: Vec::new(),
            markers: Vec::new(),
            seed,
        }
    }

    /// The full network; fails when encoders are incomplete or no decoder
    /// was saved.
    pub fn to_net(&self) -> Result<SUNet> {
        let levels = self.arch.levels();
        if self.encoder_flair.len() != levels || self.encoder_t1gd.len() != levels {
            return Err(Error::NotReady(format!(
                "checkpoint holds {} / {} encoder layers, the architecture needs {levels}",
                self.encoder_flair.len(),
                self.encoder_t1gd.len()
            )));
        }
        let decoder = self
            .decoder
            .clone()
            .ok_or_else(|| Error::NotReady("checkpoint has no decoder".into()))?;
        Ok(SUNet {
            arch: self.arch.clone(),
            encoder_flair: self.encoder_flair.clone(),
            encoder_t1gd: self.encoder_t1gd.clone(),
            decoder,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankDto {
    count: usize,
    in_channels: usize,
    extent: Vec<usize>,
    #[serde(with = "f32_b64")]
    weights: Vec<f32>,
    #[serde(with = "f32_b64")]
    bias: Vec<f32>,
}

impl BankDto {
    fn from_bank(b: &KernelBank) -> Self {
        BankDto {
            count: b.count(),
            in_channels: b.in_channels(),
            extent: b.extent().to_vec(),
            weights: b.weights().to_vec(),
            bias: b.bias().to_vec(),
        }
    }

    fn into_bank(self) -> Result<KernelBank> {
        KernelBank::new(
            self.count,
            self.in_channels,
            self.extent,
            self.weights,
            self.bias,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormDto {
    #[serde(with = "f64_b64")]
    mean: Vec<f64>,
    #[serde(with = "f64_b64")]
    stdev: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDto {
    norm: NormDto,
    bank: BankDto,
    pool: PoolSpec,
    provenance: Vec<FilterProvenance>,
    #[serde(default)]
    warnings: Vec<String>,
}

impl LayerDto {
    fn from_layer(l: &EncoderLayer) -> Self {
        LayerDto {
            norm: NormDto {
                mean: l.norm.mean.clone(),
                stdev: l.norm.stdev.clone(),
            },
            bank: BankDto::from_bank(&l.bank),
            pool: l.pool,
            provenance: l.provenance.clone(),
            warnings: l.warnings.clone(),
        }
    }

    fn into_layer(self) -> Result<EncoderLayer> {
        let bank = self.bank.into_bank()?;
        if self.provenance.len() != bank.count() {
            return Err(Error::Header(format!(
                "{} provenance records for {} filters",
                self.provenance.len(),
                bank.count()
            )));
        }
        if self.norm.mean.len() != bank.in_channels() || self.norm.stdev.len() != bank.in_channels()
        {
            return Err(Error::Header(
                "normalization statistics do not match input channels".into(),
            ));
        }
        Ok(EncoderLayer {
            norm: NormParams {
                mean: self.norm.mean,
                stdev: self.norm.stdev,
            },
            bank,
            pool: self.pool,
            provenance: self.provenance,
            warnings: self.warnings,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecoderDto {
    hidden: Vec<BankDto>,
    head: BankDto,
    factors: Vec<usize>,
    generation: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerDto {
    #[serde(with = "vec_f64_b64")]
    m: Vec<Vec<f64>>,
    #[serde(with = "vec_f64_b64")]
    v: Vec<Vec<f64>>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDto {
    format: String,
    version: u32,
    arch: ArchSpec,
    encoder_flair: Vec<LayerDto>,
    encoder_t1gd: Vec<LayerDto>,
    annotations: FilterAnnotation,
    decoder: Option<DecoderDto>,
    optimizer: Option<OptimizerDto>,
    #[serde(default)]
    selected: Vec<String>,
    #[serde(default)]
    markers: Vec<MarkerSet>,
    seed: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> String {
    let dto = CheckpointDto {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: ck.arch.clone(),
        encoder_flair: ck.encoder_flair.iter().map(LayerDto::from_layer).collect(),
        encoder_t1gd: ck.encoder_t1gd.iter().map(LayerDto::from_layer).collect(),
        annotations: ck.annotations.clone(),
        decoder: ck.decoder.as_ref().map(|d| DecoderDto {
            hidden: d.hidden.iter().map(BankDto::from_bank).collect(),
            head: BankDto::from_bank(&d.head),
            factors: d.factors.clone(),
            generation: d.generation,
        }),
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerDto {
            m: o.m.clone(),
            v: o.v.clone(),
            step: o.step,
        }),
        selected: ck.selected.clone(),
        markers: ck.markers.clone(),
        seed: ck.seed,
    };
    serde_json::to_string_pretty(&dto).expect("checkpoint serializes")
}

pub fn decode_checkpoint(text: &str) -> Result<Checkpoint> {
    let dto: CheckpointDto = serde_json::from_str(text)?;
    if dto.format != CHECKPOINT_FORMAT {
        return Err(Error::BadMagic(format!(
            "checkpoint format {:?}",
            dto.format
        )));
    }
    if dto.version != CHECKPOINT_VERSION {
        return Err(Error::Header(format!(
            "unsupported checkpoint version {}",
            dto.version
        )));
    }
    dto.arch.validate()?;
    let decoder = match dto.decoder {
        Some(d) => {
            let mut dec = Decoder::new(
                d.hidden
                    .into_iter()
                    .map(BankDto::into_bank)
                    .collect::<Result<_>>()?,
                d.head.into_bank()?,
                d.factors,
            )?;
            dec.generation = d.generation;
            Some(dec)
        }
        None => None,
    };
    let optimizer = dto.optimizer.map(|o| OptimizerState {
        m: o.m,
        v: o.v,
        step: o.step,
    });
    Ok(Checkpoint {
        arch: dto.arch,
        encoder_flair: dto
            .encoder_flair
            .into_iter()
            .map(LayerDto::into_layer)
            .collect::<Result<_>>()?,
        encoder_t1gd: dto
            .encoder_t1gd
            .into_iter()
            .map(LayerDto::into_layer)
            .collect::<Result<_>>()?,
        annotations: dto.annotations,
        decoder,
        optimizer,
        selected: dto.selected,
        markers: dto.markers,
        seed: dto.seed,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text)
}
