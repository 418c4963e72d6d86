//! Versioned JSON checkpoints.
//!
//! A checkpoint is a single JSON object: format version, a kind tag, the
//! config needed to rebuild the module shapes, the vocabulary, and a
//! name-to-tensor map sorted by name so identical states serialize to
//! identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::Vocab;
use crate::error::{Error, Result};
use crate::model::{Detector, FastConfig};
use crate::nsp::NspScorer;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const DETECTOR_KIND: &str = "detector";
const NSP_KIND: &str = "nsp-scorer";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<FastConfig>,
    vocab: Vocab,
    params: BTreeMap<String, Tensor>,
}

fn write_file(path: &Path, file: &CheckpointFile) -> Result<()> {
    let json = serde_json::to_string(file)
        .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path, expected_kind: &str) -> Result<CheckpointFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {}, this build reads version {CHECKPOINT_VERSION}",
            path.display(),
            file.version
        )));
    }
    if file.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected {expected_kind:?}",
            path.display(),
            file.kind
        )));
    }
    Ok(file)
}

fn check_tensor(name: &str, tensor: &Tensor) -> Result<()> {
    if tensor.data().len() != tensor.rows() * tensor.cols() {
        return Err(Error::Checkpoint(format!(
            "parameter {name:?} declares {}x{} but holds {} values",
            tensor.rows(),
            tensor.cols(),
            tensor.data().len()
        )));
    }
    if !tensor.is_finite() {
        return Err(Error::Checkpoint(format!(
            "parameter {name:?} contains non-finite values"
        )));
    }
    Ok(())
}

fn fill_params(
    entries: Vec<(String, &mut Tensor)>,
    mut params: BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, slot) in entries {
        let stored = params
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
        check_tensor(&name, &stored)?;
        if stored.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        *slot = stored;
    }
    if let Some(name) = params.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter {name:?}")));
    }
    Ok(())
}

pub fn save_detector(path: impl AsRef<Path>, detector: &Detector) -> Result<()> {
    let params = detector
        .param_entries()
        .into_iter()
        .map(|(name, tensor)| (name, tensor.clone()))
        .collect();
    write_file(
        path.as_ref(),
        &CheckpointFile {
            version: CHECKPOINT_VERSION,
            kind: DETECTOR_KIND.to_string(),
            config: Some(*detector.config()),
            vocab: detector.embedding.vocab.clone(),
            params,
        },
    )
}

pub fn load_detector(path: impl AsRef<Path>) -> Result<Detector> {
    let file = read_file(path.as_ref(), DETECTOR_KIND)?;
    let config = file
        .config
        .ok_or_else(|| Error::Checkpoint("detector checkpoint is missing its config".into()))?;
    let mut detector = Detector::new(config, file.vocab, 0)?;
    fill_params(detector.param_entries_mut(), file.params)?;
    Ok(detector)
}

pub fn save_nsp(path: impl AsRef<Path>, scorer: &NspScorer) -> Result<()> {
    let params: BTreeMap<String, Tensor> = [
        ("table".to_string(), scorer.table.clone()),
        ("w_p".to_string(), scorer.w_p.clone()),
        ("u_p".to_string(), scorer.u_p.clone()),
        ("bias".to_string(), scorer.bias.clone()),
    ]
    .into();
    write_file(
        path.as_ref(),
        &CheckpointFile {
            version: CHECKPOINT_VERSION,
            kind: NSP_KIND.to_string(),
            config: None,
            vocab: scorer.vocab.clone(),
            params,
        },
    )
}

pub fn load_nsp(path: impl AsRef<Path>) -> Result<NspScorer> {
    let file = read_file(path.as_ref(), NSP_KIND)?;
    let take = |params: &mut BTreeMap<String, Tensor>, name: &str| {
        let tensor = params
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
        check_tensor(name, &tensor)?;
        Ok::<Tensor, Error>(tensor)
    };
    let mut params = file.params;
    let table = take(&mut params, "table")?;
    let w_p = take(&mut params, "w_p")?;
    let u_p = take(&mut params, "u_p")?;
    let bias = take(&mut params, "bias")?;
    if let Some(name) = params.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter {name:?}")));
    }
    if table.rows() != file.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "embedding table has {} rows for a vocabulary of {}",
            table.rows(),
            file.vocab.len()
        )));
    }
    if w_p.rows() != 2 * table.cols() || u_p.rows() != w_p.cols() || u_p.cols() != 1
        || bias.shape() != vec![1, 1]
    {
        return Err(Error::Checkpoint(
            "pair scorer parameter shapes are inconsistent".into(),
        ));
    }
    Ok(NspScorer {
        vocab: file.vocab,
        table,
        w_p,
        u_p,
        bias,
    })
}
