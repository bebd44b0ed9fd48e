//! Reading, writing and validation of hidden-state dumps.
//!
//! A dump is two files sharing a basename:
//!
//! - the tensor container (`sample.lmd`): an 8-byte little-endian header
//!   length, a UTF-8 JSON header mapping tensor names to
//!   `{"dtype", "shape", "data_offsets"}`, then one contiguous data block.
//!   Offsets are relative to the start of the data block. An optional
//!   `__metadata__` entry holds string pairs (the final-norm kind and epsilon).
//! - the token sidecar (`sample.tokens.json`): original text, token table and
//!   free-form metadata.
//!
//! Tensor names: `hidden.{l}` for `l` in `0..=L`, `lm_head.weight`,
//! `final_norm.weight`, `final_norm.bias`, `context_scores`.
//!
//! F16 tensors are widened to F32 when loaded. Writing always emits F32.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";
/// Upper bound on the JSON header; anything larger is treated as corrupt.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;
const HEADER_ALIGN: usize = 8;

pub const LM_HEAD: &str = "lm_head.weight";
pub const FINAL_NORM_WEIGHT: &str = "final_norm.weight";
pub const FINAL_NORM_BIAS: &str = "final_norm.bias";
pub const CONTEXT_SCORES: &str = "context_scores";

pub fn hidden_name(layer: usize) -> String {
    format!("hidden.{layer}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            _ => None,
        }
    }
}

/// One entry of the container header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Half-open range relative to the start of the data block.
    pub byte_range: Range<u64>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
    None,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::RmsNorm => "rms_norm",
            NormKind::LayerNorm => "layer_norm",
            NormKind::None => "none",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "rms_norm" => Some(NormKind::RmsNorm),
            "layer_norm" => Some(NormKind::LayerNorm),
            "none" => Some(NormKind::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Byte offsets into the original UTF-8 text.
    pub span: [usize; 2],
    /// Index of the source word this token belongs to.
    pub word: usize,
    pub id: u32,
    /// Optional externally supplied tag (for example a POS tag).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenTable {
    pub text: String,
    pub tokens: Vec<Token>,
    /// Optional display strings for every vocabulary id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

impl TokenTable {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Display strings for the input tokens, in order.
    pub fn display_strings(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    /// Best-effort display string for a vocabulary id.
    pub fn id_to_string(&self, id: u32) -> Option<&str> {
        if let Some(vocab) = &self.vocab {
            return vocab.get(id as usize).map(String::as_str);
        }
        self.tokens
            .iter()
            .find(|t| t.id == id)
            .map(|t| t.text.as_str())
    }
}

/// Contents of the `.tokens.json` sidecar file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSidecar {
    pub text: String,
    pub tokens: Vec<Token>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

impl TokenSidecar {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn into_parts(self) -> (TokenTable, BTreeMap<String, String>) {
        (
            TokenTable {
                text: self.text,
                tokens: self.tokens,
                vocab: self.vocab,
            },
            self.metadata,
        )
    }
}

/// Everything the engine needs from one forward pass over one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpBundle {
    /// `L + 1` matrices of shape `T x d`.
    pub hidden: Vec<Array2<f32>>,
    /// `V x d`.
    pub lm_head: Array2<f32>,
    pub final_norm_weight: Array1<f32>,
    pub final_norm_bias: Option<Array1<f32>>,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
    pub tokens: TokenTable,
    pub context_scores: Option<Array1<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl DumpBundle {
    /// Number of block transitions (`L`).
    pub fn num_layers(&self) -> usize {
        self.hidden.len().saturating_sub(1)
    }

    pub fn seq_len(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.nrows())
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.ncols())
    }

    pub fn vocab_size(&self) -> usize {
        self.lm_head.nrows()
    }

    pub fn sidecar(&self) -> TokenSidecar {
        TokenSidecar {
            text: self.tokens.text.clone(),
            tokens: self.tokens.tokens.clone(),
            metadata: self.metadata.clone(),
            vocab: self.tokens.vocab.clone(),
        }
    }

    /// Writes the container to `path` and the token sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let path = path.as_ref();
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let written = write_dump(self, &mut file)?;
        file.flush()?;
        let sidecar = serde_json::to_vec_pretty(&self.sidecar())?;
        std::fs::write(sidecar_path(path), sidecar)?;
        Ok(written)
    }

    /// Loads a container and its `.tokens.json` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar_bytes = std::fs::read(sidecar_path(path))?;
        let sidecar = TokenSidecar::from_json(&sidecar_bytes)?;
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        read_dump(file, sidecar)
    }
}

/// `dir/sample.lmd` -> `dir/sample.tokens.json`.
pub fn sidecar_path(container: &Path) -> PathBuf {
    container.with_extension("tokens.json")
}

/// A single invariant violation reported by [`validate_dump`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub tensor: String,
    pub invariant: String,
    pub observed: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} (observed {})", self.tensor, self.invariant, self.observed)
    }
}

impl From<Finding> for Error {
    fn from(f: Finding) -> Self {
        Error::validation(f.tensor, format!("{} (observed {})", f.invariant, f.observed))
    }
}

fn finding(tensor: impl Into<String>, invariant: &str, observed: impl fmt::Display) -> Finding {
    Finding {
        tensor: tensor.into(),
        invariant: invariant.to_string(),
        observed: observed.to_string(),
    }
}

fn first_non_finite<'a>(values: impl IntoIterator<Item = &'a f32>) -> Option<(usize, f32)> {
    values
        .into_iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i, *v))
}

/// Checks every bundle invariant. An empty list means the bundle is valid.
pub fn validate_dump(bundle: &DumpBundle) -> Vec<Finding> {
    let mut out = Vec::new();

    if bundle.hidden.len() < 2 {
        out.push(finding(
            "hidden",
            "at least two hidden stacks (hidden.0 and hidden.1)",
            bundle.hidden.len(),
        ));
    }
    let (t, d) = bundle
        .hidden
        .first()
        .map_or((0, 0), |h| (h.nrows(), h.ncols()));
    if t == 0 || d == 0 {
        out.push(finding("hidden.0", "non-empty T x d matrix", format!("{t}x{d}")));
    }
    for (l, h) in bundle.hidden.iter().enumerate() {
        if h.dim() != (t, d) {
            out.push(finding(
                hidden_name(l),
                "all hidden stacks share T and d",
                format!("{}x{} (expected {t}x{d})", h.nrows(), h.ncols()),
            ));
        }
        if let Some((idx, v)) = first_non_finite(h.iter()) {
            out.push(finding(
                hidden_name(l),
                "non-finite value",
                format!("{v} at layer {l}, token {}, dim {}", idx / d.max(1), idx % d.max(1)),
            ));
        }
    }

    if bundle.lm_head.ncols() != d {
        out.push(finding(
            LM_HEAD,
            "column count equals d",
            format!("{} (d = {d})", bundle.lm_head.ncols()),
        ));
    }
    if bundle.lm_head.nrows() == 0 {
        out.push(finding(LM_HEAD, "vocabulary size V >= 1", 0));
    }
    if let Some((idx, v)) = first_non_finite(bundle.lm_head.iter()) {
        out.push(finding(LM_HEAD, "non-finite value", format!("{v} at flat index {idx}")));
    }

    if bundle.final_norm_weight.len() != d {
        out.push(finding(
            FINAL_NORM_WEIGHT,
            "length equals d",
            format!("{} (d = {d})", bundle.final_norm_weight.len()),
        ));
    }
    if let Some((idx, v)) = first_non_finite(bundle.final_norm_weight.iter()) {
        out.push(finding(FINAL_NORM_WEIGHT, "non-finite value", format!("{v} at {idx}")));
    }
    if let Some(bias) = &bundle.final_norm_bias {
        if bias.len() != d {
            out.push(finding(
                FINAL_NORM_BIAS,
                "length equals d",
                format!("{} (d = {d})", bias.len()),
            ));
        }
        if let Some((idx, v)) = first_non_finite(bias.iter()) {
            out.push(finding(FINAL_NORM_BIAS, "non-finite value", format!("{v} at {idx}")));
        }
    }
    if !(bundle.norm_eps.is_finite() && bundle.norm_eps > 0.0) {
        out.push(finding("norm_eps", "positive finite epsilon", bundle.norm_eps));
    }

    if let Some(scores) = &bundle.context_scores {
        if scores.len() != t {
            out.push(finding(
                CONTEXT_SCORES,
                "length equals T",
                format!("{} (T = {t})", scores.len()),
            ));
        }
        if let Some((idx, v)) = first_non_finite(scores.iter()) {
            out.push(finding(CONTEXT_SCORES, "non-finite value", format!("{v} at token {idx}")));
        } else if let Some((idx, v)) = scores.iter().enumerate().find(|(_, v)| **v < 0.0) {
            out.push(finding(CONTEXT_SCORES, "entries >= 0", format!("{v} at token {idx}")));
        }
    }

    let table = &bundle.tokens;
    if table.tokens.len() != t {
        out.push(finding(
            "tokens",
            "one token per hidden-state row",
            format!("{} tokens (T = {t})", table.tokens.len()),
        ));
    }
    let v = bundle.lm_head.nrows();
    let mut prev_end = 0usize;
    for (i, tok) in table.tokens.iter().enumerate() {
        if tok.id as usize >= v {
            out.push(finding(
                "tokens",
                "token_id in [0, V)",
                format!("id {} at token {i} (V = {v})", tok.id),
            ));
        }
        let [b0, b1] = tok.span;
        if b0 > b1 || b1 > table.text.len() {
            out.push(finding(
                "tokens",
                "byte span within text",
                format!("[{b0}, {b1}) at token {i} (text is {} bytes)", table.text.len()),
            ));
        } else if b0 < prev_end {
            out.push(finding(
                "tokens",
                "byte spans ordered and non-overlapping",
                format!("[{b0}, {b1}) at token {i} starts before {prev_end}"),
            ));
        }
        prev_end = prev_end.max(b1);
    }
    if let Some(vocab) = &table.vocab {
        if vocab.len() != v {
            out.push(finding("tokens", "vocab length equals V", format!("{} (V = {v})", vocab.len())));
        }
    }

    out
}

fn check_valid(bundle: &DumpBundle) -> Result<()> {
    match validate_dump(bundle).into_iter().next() {
        Some(f) => Err(f.into()),
        None => Ok(()),
    }
}

fn push_f32(data: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the tensor container. Returns the number of bytes written.
///
/// Header keys are emitted in sorted order and tensors are laid out in a
/// fixed order, so identical bundles produce identical bytes.
pub fn write_dump<W: Write>(bundle: &DumpBundle, mut dest: W) -> Result<u64> {
    check_valid(bundle)?;

    let mut header: BTreeMap<String, Value> = BTreeMap::new();
    let mut data: Vec<u8> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, values: &mut dyn Iterator<Item = f32>| {
        let begin = data.len();
        push_f32(&mut data, values);
        header.insert(
            name,
            serde_json::json!({
                "dtype": "F32",
                "shape": shape,
                "data_offsets": [begin, data.len()],
            }),
        );
    };

    for (l, h) in bundle.hidden.iter().enumerate() {
        add(hidden_name(l), vec![h.nrows(), h.ncols()], &mut h.iter().copied());
    }
    let head = &bundle.lm_head;
    add(LM_HEAD.into(), vec![head.nrows(), head.ncols()], &mut head.iter().copied());
    let w = &bundle.final_norm_weight;
    add(FINAL_NORM_WEIGHT.into(), vec![w.len()], &mut w.iter().copied());
    if let Some(b) = &bundle.final_norm_bias {
        add(FINAL_NORM_BIAS.into(), vec![b.len()], &mut b.iter().copied());
    }
    if let Some(c) = &bundle.context_scores {
        add(CONTEXT_SCORES.into(), vec![c.len()], &mut c.iter().copied());
    }

    header.insert(
        METADATA_KEY.into(),
        serde_json::json!({
            "norm_kind": bundle.norm_kind.as_str(),
            "norm_eps": format!("{:?}", bundle.norm_eps),
        }),
    );

    let mut header_bytes = serde_json::to_vec(&header)?;
    while header_bytes.len() % HEADER_ALIGN != 0 {
        header_bytes.push(b' ');
    }

    dest.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    dest.write_all(&header_bytes)?;
    dest.write_all(&data)?;
    Ok(8 + header_bytes.len() as u64 + data.len() as u64)
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// A decoded tensor, always widened to F32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parsed container header with lazy per-tensor access.
///
/// Opening reads only the header. Every declared range is checked against
/// the physical stream length before any tensor bytes are allocated.
pub struct DumpReader<R> {
    source: R,
    specs: BTreeMap<String, TensorSpec>,
    metadata: BTreeMap<String, String>,
    data_start: u64,
}

impl<R: Read + Seek> DumpReader<R> {
    pub fn open(mut source: R) -> Result<Self> {
        let stream_len = source.seek(SeekFrom::End(0))?;
        source.seek(SeekFrom::Start(0))?;
        if stream_len < 8 {
            return Err(Error::format(stream_len, "stream ends inside the header length field"));
        }
        let mut len_bytes = [0u8; 8];
        source.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_LEN {
            return Err(Error::format(0, format!("header length {header_len} exceeds limit")));
        }
        if 8 + header_len > stream_len {
            return Err(Error::format(
                0,
                format!("header length {header_len} exceeds stream size {stream_len}"),
            ));
        }
        let mut header_bytes = vec![0u8; header_len as usize];
        source.read_exact(&mut header_bytes)?;
        let data_start = 8 + header_len;
        let data_len = stream_len - data_start;

        let raw: BTreeMap<String, Value> = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::format(8, format!("header is not a JSON object: {e}")))?;

        let mut specs = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in raw {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value)
                    .map_err(|e| Error::format(8, format!("bad {METADATA_KEY}: {e}")))?;
                continue;
            }
            let entry: RawEntry = serde_json::from_value(value)
                .map_err(|e| Error::format(8, format!("bad header entry {name}: {e}")))?;
            let dtype = DType::parse(&entry.dtype).ok_or_else(|| {
                Error::format(8, format!("unknown dtype {} for tensor {name}", entry.dtype))
            })?;
            let [begin, end] = entry.data_offsets;
            if begin > end {
                return Err(Error::validation(&name, format!("inverted data_offsets [{begin}, {end})")));
            }
            let expected = entry
                .shape
                .iter()
                .try_fold(dtype.size() as u64, |acc, &s| acc.checked_mul(s as u64));
            if expected != Some(end - begin) {
                return Err(Error::validation(
                    &name,
                    format!(
                        "byte length {} does not match shape {:?} x {} bytes",
                        end - begin,
                        entry.shape,
                        dtype.size()
                    ),
                ));
            }
            if end > data_len {
                return Err(Error::format(
                    stream_len,
                    format!("tensor {name} ends at data offset {end} but stream holds {data_len} data bytes"),
                ));
            }
            specs.insert(
                name.clone(),
                TensorSpec {
                    name,
                    dtype,
                    shape: entry.shape,
                    byte_range: begin..end,
                },
            );
        }

        let mut ranges: Vec<&TensorSpec> = specs.values().filter(|s| !s.byte_range.is_empty()).collect();
        ranges.sort_by_key(|s| (s.byte_range.start, s.byte_range.end));
        for pair in ranges.windows(2) {
            if pair[1].byte_range.start < pair[0].byte_range.end {
                return Err(Error::validation(
                    &pair[1].name,
                    format!("byte range overlaps tensor {}", pair[0].name),
                ));
            }
        }

        Ok(Self {
            source,
            specs,
            metadata,
            data_start,
        })
    }

    pub fn specs(&self) -> impl Iterator<Item = &TensorSpec> {
        self.specs.values()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.get(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Loads one tensor, touching only its byte range.
    pub fn load(&mut self, name: &str) -> Result<Tensor> {
        let spec = self
            .specs
            .get(name)
            .ok_or_else(|| Error::validation(name, "tensor not present in container"))?;
        let start = self.data_start + spec.byte_range.start;
        let len = (spec.byte_range.end - spec.byte_range.start) as usize;
        self.source.seek(SeekFrom::Start(start))?;
        let mut bytes = vec![0u8; len];
        self.source.read_exact(&mut bytes).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(start, format!("stream truncated inside tensor {name}"))
            } else {
                e.into()
            }
        })?;
        let data = match spec.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        Ok(Tensor {
            shape: spec.shape.clone(),
            data,
        })
    }

    fn load_matrix(&mut self, name: &str) -> Result<Array2<f32>> {
        let t = self.load(name)?;
        match t.shape.as_slice() {
            &[rows, cols] => Ok(Array2::from_shape_vec((rows, cols), t.data)
                .expect("length checked against shape at open")),
            other => Err(Error::validation(name, format!("expected a matrix, found shape {other:?}"))),
        }
    }

    fn load_vector(&mut self, name: &str) -> Result<Array1<f32>> {
        let t = self.load(name)?;
        match t.shape.as_slice() {
            &[_] => Ok(Array1::from(t.data)),
            other => Err(Error::validation(name, format!("expected a vector, found shape {other:?}"))),
        }
    }
}

/// Reads a full bundle from a container stream plus its token sidecar.
pub fn read_dump<R: Read + Seek>(source: R, sidecar: TokenSidecar) -> Result<DumpBundle> {
    let mut reader = DumpReader::open(source)?;

    let mut layers = 0;
    while reader.spec(&hidden_name(layers)).is_some() {
        layers += 1;
    }
    let stray = reader
        .specs()
        .map(|s| s.name.clone())
        .find(|n| n.strip_prefix("hidden.").and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i >= layers));
    if let Some(name) = stray {
        return Err(Error::validation(name, "hidden stacks must be numbered contiguously from 0"));
    }

    let hidden = (0..layers)
        .map(|l| reader.load_matrix(&hidden_name(l)))
        .collect::<Result<Vec<_>>>()?;
    let lm_head = reader.load_matrix(LM_HEAD)?;
    let final_norm_weight = reader.load_vector(FINAL_NORM_WEIGHT)?;
    let final_norm_bias = match reader.spec(FINAL_NORM_BIAS) {
        Some(_) => Some(reader.load_vector(FINAL_NORM_BIAS)?),
        None => None,
    };
    let context_scores = match reader.spec(CONTEXT_SCORES) {
        Some(_) => Some(reader.load_vector(CONTEXT_SCORES)?),
        None => None,
    };

    let meta = reader.metadata();
    let norm_kind = match meta.get("norm_kind") {
        Some(s) => NormKind::parse(s)
            .ok_or_else(|| Error::validation("norm_kind", format!("unknown norm kind {s}")))?,
        None => NormKind::None,
    };
    let norm_eps = match meta.get("norm_eps") {
        Some(s) => s
            .parse::<f64>()
            .map_err(|_| Error::validation("norm_eps", format!("not a number: {s}")))?,
        None => 1e-5,
    };

    let (tokens, metadata) = sidecar.into_parts();
    let bundle = DumpBundle {
        hidden,
        lm_head,
        final_norm_weight,
        final_norm_bias,
        norm_kind,
        norm_eps,
        tokens,
        context_scores,
        metadata,
    };
    check_valid(&bundle)?;
    Ok(bundle)
}
