//! Field checkpoints: the build configuration plus the flat parameter
//! vector, stored as TOML. Floats round-trip exactly (shortest
//! representation that parses back to the same bits).

use super::{Field, FieldConfig};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("checkpoint could not be encoded: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error("checkpoint holds {found} parameters but the field expects {expected}")]
    ParamMismatch { expected: usize, found: usize },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointDoc {
    field: FieldConfig,
    params: Vec<f64>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &FieldConfig,
    field: &dyn Field,
) -> Result<(), CheckpointError> {
    let doc = CheckpointDoc { field: config.clone(), params: field.params().to_vec() };
    std::fs::write(path, toml::to_string(&doc)?)?;
    Ok(())
}

/// Rebuilds the stored field; the saved parameters replace the initial ones,
/// so the result does not depend on any initialization seed.
pub fn load_checkpoint(path: &Path) -> Result<(FieldConfig, Box<dyn Field>), CheckpointError> {
    let doc: CheckpointDoc = toml::from_str(&std::fs::read_to_string(path)?)?;
    let mut field = doc.field.build(0);
    if field.param_len() != doc.params.len() {
        return Err(CheckpointError::ParamMismatch {
            expected: field.param_len(),
            found: doc.params.len(),
        });
    }
    field.params_mut().copy_from_slice(&doc.params);
    Ok((doc.field, field))
}
