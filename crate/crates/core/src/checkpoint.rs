//! Checkpoint container, magic `IBAC`.
//!
//! Frame layout is shared with the dataset format (see `container`): magic,
//! version u16, JSON metadata, little-endian f64 parameter payload, trailing
//! CRC32 of the payload. The metadata names the payload sections so a reader
//! can split the flat float block back into parameter vectors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Frame};
use crate::error::{Error, Result};
use crate::heads::{Codebook, DirectProjectionHead, QuantizedIndexHead};
use crate::mlp::MlpSpec;
use crate::models::{IdmModel, LossTerms, ModelKind, TrainConfig, TrainedModel, VibModel};
use crate::tensor::DenseMatrix;

const MAGIC: &[u8; 4] = b"IBAC";
const VERSION: u16 = 1;

/// What a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointPayload {
    Model(TrainedModel),
    Direct(DirectProjectionHead),
    Index(QuantizedIndexHead),
}

/// A checkpoint plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub payload: CheckpointPayload,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub final_losses: Option<LossTerms>,
    /// Epoch at which training was cut short, if it diverged.
    pub diverged_at: Option<usize>,
}

impl Checkpoint {
    pub fn for_model(
        model: TrainedModel,
        config: &TrainConfig,
        final_losses: Option<LossTerms>,
        diverged_at: Option<usize>,
    ) -> Checkpoint {
        Checkpoint {
            seed: config.seed,
            train_config: Some(config.clone()),
            payload: CheckpointPayload::Model(model),
            final_losses,
            diverged_at,
        }
    }

    pub fn kind_tag(&self) -> &'static str {
        match &self.payload {
            CheckpointPayload::Model(TrainedModel::Vib(_)) => "vib",
            CheckpointPayload::Model(TrainedModel::Idm(_)) => "idm",
            CheckpointPayload::Direct(_) => "direct",
            CheckpointPayload::Index(_) => "index",
        }
    }

    pub fn model(&self) -> Option<&TrainedModel> {
        match &self.payload {
            CheckpointPayload::Model(m) => Some(m),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum KindMeta {
    Vib {
        encoder_spec: MlpSpec,
        decoder_spec: MlpSpec,
        d_z: usize,
        lv_clamp: (f64, f64),
    },
    Idm {
        encoder_spec: MlpSpec,
        decoder_spec: MlpSpec,
        d_z: usize,
        lv_clamp: (f64, f64),
    },
    Direct {
        spec: MlpSpec,
    },
    Index {
        classifier_spec: MlpSpec,
        k: usize,
        d_latent: usize,
        d_action: usize,
        empty_codes: Vec<bool>,
        fallback_codes: Vec<bool>,
    },
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    #[serde(flatten)]
    kind: KindMeta,
    seed: u64,
    train_config: Option<TrainConfig>,
    final_losses: Option<LossTerms>,
    diverged_at: Option<usize>,
    /// Payload layout: (section name, f64 count), in payload order.
    sections: Vec<(String, usize)>,
}

fn sections_of(payload: &CheckpointPayload) -> Vec<(String, &[f64])> {
    match payload {
        CheckpointPayload::Model(TrainedModel::Vib(m)) => vec![
            ("encoder".into(), m.encoder_params.as_slice()),
            ("decoder".into(), m.decoder_params.as_slice()),
        ],
        CheckpointPayload::Model(TrainedModel::Idm(m)) => vec![
            ("encoder".into(), m.encoder_params.as_slice()),
            ("decoder".into(), m.decoder_params.as_slice()),
        ],
        CheckpointPayload::Direct(h) => vec![("params".into(), h.params.as_slice())],
        CheckpointPayload::Index(h) => vec![
            ("codebook".into(), h.codebook.centroids.data()),
            ("classifier".into(), h.classifier_params.as_slice()),
            ("action_table".into(), h.action_table.data()),
        ],
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let sections = sections_of(&ckpt.payload);
    let kind = match &ckpt.payload {
        CheckpointPayload::Model(TrainedModel::Vib(m)) => KindMeta::Vib {
            encoder_spec: m.encoder_spec.clone(),
            decoder_spec: m.decoder_spec.clone(),
            d_z: m.d_z,
            lv_clamp: m.lv_clamp,
        },
        CheckpointPayload::Model(TrainedModel::Idm(m)) => KindMeta::Idm {
            encoder_spec: m.encoder_spec.clone(),
            decoder_spec: m.decoder_spec.clone(),
            d_z: m.d_z,
            lv_clamp: m.lv_clamp,
        },
        CheckpointPayload::Direct(h) => KindMeta::Direct {
            spec: h.spec.clone(),
        },
        CheckpointPayload::Index(h) => KindMeta::Index {
            classifier_spec: h.classifier_spec.clone(),
            k: h.codebook.k(),
            d_latent: h.codebook.centroids.cols(),
            d_action: h.action_table.cols(),
            empty_codes: h.codebook.empty.clone(),
            fallback_codes: h.fallback.clone(),
        },
    };
    let meta = CheckpointMeta {
        kind,
        seed: ckpt.seed,
        train_config: ckpt.train_config.clone(),
        final_losses: ckpt.final_losses,
        diverged_at: ckpt.diverged_at,
        sections: sections.iter().map(|(n, s)| (n.clone(), s.len())).collect(),
    };
    let mut payload = Vec::new();
    for (_, s) in &sections {
        payload.extend(container::f64s_to_le_bytes(s));
    }
    let frame = Frame {
        version: VERSION,
        meta: serde_json::to_vec(&meta)?,
        payload,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    container::write_frame(&mut file, MAGIC, &frame)
}

fn take<'a>(
    map: &mut std::collections::HashMap<String, &'a [f64]>,
    name: &str,
) -> Result<&'a [f64]> {
    map.remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing section {name:?}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let frame = container::read_frame(&mut file, MAGIC, VERSION)?;
    let meta: CheckpointMeta = serde_json::from_slice(&frame.meta)?;
    let floats = container::le_bytes_to_f64s(&frame.payload)?;
    let total: usize = meta.sections.iter().map(|(_, n)| n).sum();
    if floats.len() != total {
        return Err(Error::Format(format!(
            "payload holds {} floats but sections sum to {total}",
            floats.len()
        )));
    }
    let mut map = std::collections::HashMap::new();
    let mut off = 0;
    for (name, n) in &meta.sections {
        map.insert(name.clone(), &floats[off..off + n]);
        off += n;
    }

    let payload = match meta.kind {
        KindMeta::Vib {
            encoder_spec,
            decoder_spec,
            d_z,
            lv_clamp,
        } => {
            let model = VibModel {
                encoder_params: take(&mut map, "encoder")?.to_vec(),
                decoder_params: take(&mut map, "decoder")?.to_vec(),
                encoder_spec,
                decoder_spec,
                d_z,
                lv_clamp,
            };
            check_param_len(&model.encoder_spec, &model.encoder_params)?;
            check_param_len(&model.decoder_spec, &model.decoder_params)?;
            CheckpointPayload::Model(TrainedModel::Vib(model))
        }
        KindMeta::Idm {
            encoder_spec,
            decoder_spec,
            d_z,
            lv_clamp,
        } => {
            let model = IdmModel {
                encoder_params: take(&mut map, "encoder")?.to_vec(),
                decoder_params: take(&mut map, "decoder")?.to_vec(),
                encoder_spec,
                decoder_spec,
                d_z,
                lv_clamp,
            };
            check_param_len(&model.encoder_spec, &model.encoder_params)?;
            check_param_len(&model.decoder_spec, &model.decoder_params)?;
            CheckpointPayload::Model(TrainedModel::Idm(model))
        }
        KindMeta::Direct { spec } => {
            let params = take(&mut map, "params")?.to_vec();
            check_param_len(&spec, &params)?;
            CheckpointPayload::Direct(DirectProjectionHead { spec, params })
        }
        KindMeta::Index {
            classifier_spec,
            k,
            d_latent,
            d_action,
            empty_codes,
            fallback_codes,
        } => {
            let centroids =
                DenseMatrix::from_vec(k, d_latent, take(&mut map, "codebook")?.to_vec())?;
            let classifier_params = take(&mut map, "classifier")?.to_vec();
            check_param_len(&classifier_spec, &classifier_params)?;
            let action_table =
                DenseMatrix::from_vec(k, d_action, take(&mut map, "action_table")?.to_vec())?;
            if empty_codes.len() != k || fallback_codes.len() != k {
                return Err(Error::Format("code flag lengths disagree with k".into()));
            }
            CheckpointPayload::Index(QuantizedIndexHead {
                codebook: Codebook {
                    centroids,
                    empty: empty_codes,
                },
                classifier_spec,
                classifier_params,
                action_table,
                fallback: fallback_codes,
            })
        }
    };
    Ok(Checkpoint {
        payload,
        seed: meta.seed,
        train_config: meta.train_config,
        final_losses: meta.final_losses,
        diverged_at: meta.diverged_at,
    })
}

fn check_param_len(spec: &MlpSpec, params: &[f64]) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::Format(format!(
            "section holds {} parameters, spec {:?} needs {}",
            params.len(),
            spec.widths,
            spec.param_count()
        )));
    }
    Ok(())
}

/// Expose the model kind without loading the full payload.
pub fn peek_kind(path: &Path) -> Result<ModelKind> {
    let ckpt = load_checkpoint(path)?;
    match ckpt.payload {
        CheckpointPayload::Model(m) => Ok(m.kind()),
        _ => Err(Error::Unsupported("checkpoint holds a head, not a model".into())),
    }
}
