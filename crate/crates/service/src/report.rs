//! Analysis requests and the JSON report shared by the CLI and the HTTP API.
//!
//! Reports are built as `serde_json::Value` trees. Without the
//! `preserve_order` feature their objects are `BTreeMap`s, so keys come out
//! sorted, and floats are printed in shortest round-trip form. Rendering the
//! same bundle and request therefore yields the same bytes on every path.

use std::fmt;
use std::str::FromStr;

use hiddenscope_core::intrinsic_dim::{estimate_id_per_layer, DEFAULT_DISCARD_FRACTION};
use hiddenscope_core::lens::{build_lens_grid, LensConfig};
use hiddenscope_core::linearity::{analyze_linearity, NonlinearityMatrix, DEFAULT_LAMBDA};
use hiddenscope_core::token_analysis::{aggregate_by_class, linearity_context_correlation};
use hiddenscope_core::{DumpBundle, Error, ErrorKind};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::ServiceError;

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Nonlinearity,
    Lens,
    IntrinsicDim,
    Context,
    Histograms,
    Correlation,
}

impl Op {
    pub const ALL: [Op; 6] = [
        Op::Nonlinearity,
        Op::Lens,
        Op::IntrinsicDim,
        Op::Context,
        Op::Histograms,
        Op::Correlation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Nonlinearity => "nonlinearity",
            Op::Lens => "lens",
            Op::IntrinsicDim => "intrinsic_dim",
            Op::Context => "context",
            Op::Histograms => "histograms",
            Op::Correlation => "correlation",
        }
    }

    /// Key of the report section this op fills.
    pub fn section(self) -> &'static str {
        match self {
            Op::Histograms => "class_histograms",
            other => other.as_str(),
        }
    }

    pub fn valid_list() -> String {
        Op::ALL.map(Op::as_str).join(", ")
    }

    /// Comma-separated op names, deduplicated, in canonical order.
    pub fn parse_list(s: &str) -> Result<Vec<Op>, ServiceError> {
        let mut ops: Vec<Op> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        ops.sort();
        ops.dedup();
        if ops.is_empty() {
            return Err(ServiceError::Request(format!(
                "no ops requested; valid ops: {}",
                Op::valid_list()
            )));
        }
        Ok(ops)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Op {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Op::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| ServiceError::Request(format!("unknown op {s:?}; valid ops: {}", Op::valid_list())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Dump { dump_path: String },
    Text { model_id: String, text: String },
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_bins() -> usize {
    DEFAULT_HISTOGRAM_BINS
}

fn default_discard() -> f64 {
    DEFAULT_DISCARD_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisRequest {
    /// Absent only in multipart uploads, where the dump comes with the request.
    #[serde(default)]
    pub source: Option<Source>,
    pub ops: Vec<Op>,
    #[serde(default)]
    pub lens_config: LensConfig,
    #[serde(default = "default_lambda")]
    pub ridge_lambda: f64,
    /// Extra dumps pooled into the linear-map fits.
    #[serde(default)]
    pub calibration: Vec<String>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_discard")]
    pub discard_fraction: f64,
}

impl AnalysisRequest {
    pub fn new(source: Option<Source>, ops: Vec<Op>) -> Self {
        Self {
            source,
            ops,
            lens_config: LensConfig::default(),
            ridge_lambda: DEFAULT_LAMBDA,
            calibration: Vec::new(),
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            discard_fraction: DEFAULT_DISCARD_FRACTION,
        }
    }

    /// Sorts and deduplicates ops; rejects an empty list.
    pub fn normalized(mut self) -> Result<Self, ServiceError> {
        self.ops.sort();
        self.ops.dedup();
        if self.ops.is_empty() {
            return Err(ServiceError::Request(format!(
                "ops must not be empty; valid ops: {}",
                Op::valid_list()
            )));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpFailure {
    pub op: Op,
    pub kind: ErrorKind,
    pub message: String,
}

impl OpFailure {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Numerical => 3,
            ErrorKind::Invalid => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub body: Value,
    pub failures: Vec<OpFailure>,
}

impl AnalysisReport {
    /// Pretty-printed JSON with a trailing newline.
    pub fn render(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.body).expect("report values are plain JSON");
        s.push('\n');
        s
    }
}

fn matrix(a: &Array2<f64>) -> Value {
    Value::Array(a.outer_iter().map(|row| json!(row.to_vec())).collect())
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Invalid => "invalid",
        ErrorKind::Numerical => "numerical",
    }
}

fn context_scores(bundle: &DumpBundle) -> Result<Vec<f64>, Error> {
    bundle
        .context_scores
        .as_ref()
        .map(|c| c.iter().map(|&v| f64::from(v)).collect())
        .ok_or_else(|| Error::Config("context_scores missing from dump".into()))
}

/// Error carried out of an op: kind plus rendered message.
type OpError = (ErrorKind, String);

fn op_error(e: Error) -> OpError {
    (e.kind(), e.to_string())
}

struct Runner<'a> {
    bundle: &'a DumpBundle,
    request: &'a AnalysisRequest,
    calibration: &'a [DumpBundle],
    /// Shared by the nonlinearity and correlation ops.
    nonlinearity: Option<Result<NonlinearityMatrix, OpError>>,
}

impl Runner<'_> {
    fn nonlinearity(&mut self) -> Result<&NonlinearityMatrix, OpError> {
        let (bundle, lambda, calibration) = (self.bundle, self.request.ridge_lambda, self.calibration);
        self.nonlinearity
            .get_or_insert_with(|| analyze_linearity(bundle, lambda, calibration).map_err(op_error))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn run(&mut self, op: Op) -> Result<Value, OpError> {
        let bundle = self.bundle;
        match op {
            Op::Nonlinearity => {
                let nl = self.nonlinearity()?;
                Ok(json!({
                    "errors": matrix(&nl.errors),
                    "relative": matrix(&nl.relative_errors),
                    "profile": nl.linearity_profile,
                    "lambda": nl.ridge_lambda,
                    "mode": nl.mode.as_str(),
                    "pseudoinverse": nl.pseudoinverse,
                    "token_linearity": nl.token_linearity(),
                    "shape": [nl.errors.nrows(), nl.errors.ncols()],
                }))
            }
            Op::Lens => {
                let grid = build_lens_grid(bundle, &self.request.lens_config).map_err(op_error)?;
                let top: Vec<Vec<Vec<Value>>> = grid
                    .top_tokens
                    .iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|cell| cell.iter().map(|&(id, lp)| json!([id, lp.exp()])).collect())
                            .collect()
                    })
                    .collect();
                let top_text: Vec<Vec<Vec<Option<&str>>>> = grid
                    .top_tokens
                    .iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|cell| cell.iter().map(|&(id, _)| bundle.tokens.id_to_string(id)).collect())
                            .collect()
                    })
                    .collect();
                Ok(json!({
                    "top": top,
                    "top_text": top_text,
                    "error": matrix(&grid.next_token_error),
                    "contribution": matrix(&grid.contribution),
                    "config": grid.config,
                    "norm_applied": grid.norm_applied,
                    "shape": [grid.top_tokens.len(), bundle.seq_len()],
                }))
            }
            Op::IntrinsicDim => {
                let est = estimate_id_per_layer(bundle, self.request.discard_fraction).map_err(op_error)?;
                Ok(json!({
                    "per_layer": est.iter().map(|e| e.dimension).collect::<Vec<_>>(),
                    "points_used": est.iter().map(|e| e.points_used).collect::<Vec<_>>(),
                    "duplicates": est.iter().map(|e| e.points_discarded_duplicates).collect::<Vec<_>>(),
                    "fit_residual": est.iter().map(|e| e.fit_residual).collect::<Vec<_>>(),
                    "discard_fraction": self.request.discard_fraction,
                }))
            }
            Op::Context => {
                let scores = context_scores(bundle).map_err(op_error)?;
                Ok(json!({ "scores": scores, "shape": [scores.len()] }))
            }
            Op::Histograms => {
                let scores = context_scores(bundle).map_err(op_error)?;
                let hist = aggregate_by_class(&scores, &bundle.tokens, self.request.histogram_bins).map_err(op_error)?;
                Ok(serde_json::to_value(hist).expect("histograms serialize"))
            }
            Op::Correlation => {
                let scores = context_scores(bundle).map_err(op_error)?;
                let nl = self.nonlinearity()?;
                let res = linearity_context_correlation(nl, &scores).map_err(op_error)?;
                Ok(json!({ "r": res.r, "p": res.p_value, "n": res.n }))
            }
        }
    }
}

/// Runs the requested ops on a loaded bundle.
///
/// A failing op becomes an entry under `"errors"`; other ops still run.
pub fn analyze(bundle: &DumpBundle, request: &AnalysisRequest, calibration: &[DumpBundle]) -> AnalysisReport {
    let mut body = Map::new();
    let mut metadata: Map<String, Value> = bundle
        .metadata
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    metadata.insert("norm_kind".into(), json!(bundle.norm_kind.as_str()));
    metadata.insert("norm_eps".into(), json!(bundle.norm_eps));
    body.insert("metadata".into(), Value::Object(metadata));
    body.insert(
        "dims".into(),
        json!({
            "layers": bundle.num_layers(),
            "tokens": bundle.seq_len(),
            "hidden": bundle.hidden_dim(),
            "vocab": bundle.vocab_size(),
        }),
    );
    body.insert("tokens".into(), json!(bundle.tokens.display_strings()));
    body.insert("ops".into(), json!(request.ops));

    let mut runner = Runner {
        bundle,
        request,
        calibration,
        nonlinearity: None,
    };
    let mut failures = Vec::new();
    let mut errors = Map::new();
    for &op in &request.ops {
        match runner.run(op) {
            Ok(section) => {
                body.insert(op.section().into(), section);
            }
            Err((kind, message)) => {
                let failure = OpFailure { op, kind, message };
                errors.insert(
                    op.as_str().into(),
                    json!({ "kind": kind_name(failure.kind), "message": failure.message }),
                );
                failures.push(failure);
            }
        }
    }
    if !errors.is_empty() {
        body.insert("errors".into(), Value::Object(errors));
    }
    AnalysisReport {
        body: Value::Object(body),
        failures,
    }
}
