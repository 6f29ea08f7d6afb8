use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderError, PairClassifier, ParamStore, TrainConfig};
use crate::corpus::Vocabulary;
use crate::persist::{self, Provenance};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"WIMPENC\0";

/// Everything needed to rebuild a trained pair classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub vocabulary: Vocabulary,
    pub params: ParamStore,
    pub valid_accuracy: Option<f64>,
    pub provenance: Option<Provenance>,
}

impl Checkpoint {
    pub fn new(
        model: PairClassifier,
        train: TrainConfig,
        vocabulary: Vocabulary,
        valid_accuracy: Option<f64>,
    ) -> Self {
        Self {
            encoder: model.config,
            train,
            vocabulary,
            params: model.params,
            valid_accuracy,
            provenance: None,
        }
    }

    pub fn model(&self) -> PairClassifier {
        PairClassifier::from_parts(self.encoder.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        persist::encode(MAGIC, CHECKPOINT_VERSION, self)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, EncoderError> {
        Ok(persist::decode(
            bytes,
            MAGIC,
            CHECKPOINT_VERSION,
            "encoder checkpoint",
            origin,
        )?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        persist::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        Ok(persist::write(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let bytes = persist::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
