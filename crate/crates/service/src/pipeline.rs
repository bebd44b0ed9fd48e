//! Turning a request source into a loaded bundle.

use std::io::Cursor;
use std::path::Path;

use hiddenscope_core::tensor_store::{read_dump, TokenSidecar};
use hiddenscope_core::DumpBundle;

use crate::error::{Result, ServiceError};
use crate::report::{AnalysisRequest, Op};
use crate::sidecar::{SidecarClient, INCLUDE_ALL};

/// Loads a container and its `.tokens.json`, naming the file on failure.
pub fn load_dump(path: impl AsRef<Path>) -> Result<DumpBundle> {
    let path = path.as_ref();
    DumpBundle::load(path).map_err(|source| ServiceError::Dump {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a bundle from uploaded bytes.
pub fn load_upload(container: Vec<u8>, tokens: &[u8]) -> Result<DumpBundle> {
    let sidecar = TokenSidecar::from_json(tokens).map_err(|source| ServiceError::Dump {
        path: "tokens upload".into(),
        source,
    })?;
    read_dump(Cursor::new(container), sidecar).map_err(|source| ServiceError::Dump {
        path: "dump upload".into(),
        source,
    })
}

pub fn load_calibration(request: &AnalysisRequest) -> Result<Vec<DumpBundle>> {
    request.calibration.iter().map(load_dump).collect()
}

/// Tensor groups to ask the sidecar for.
pub fn include_for(ops: &[Op]) -> Vec<&'static str> {
    let wants_context = ops
        .iter()
        .any(|op| matches!(op, Op::Context | Op::Histograms | Op::Correlation));
    INCLUDE_ALL
        .into_iter()
        .filter(|name| *name != "context_scores" || wants_context)
        .collect()
}

/// Runs one extraction and loads the resulting container.
pub async fn extract_bundle(client: &SidecarClient, model: &str, text: &str, ops: &[Op]) -> Result<DumpBundle> {
    let path = client.extract(model, text, &include_for(ops)).await?;
    tokio::task::spawn_blocking(move || load_dump(path))
        .await
        .map_err(|e| ServiceError::Extraction(format!("loader task failed: {e}")))?
}
