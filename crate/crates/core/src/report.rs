//! Report documents the CLI writes, the reproducibility stanza they all
//! embed, and a small JSON-schema checker that keeps emitted documents in
//! sync with the published schemas under `schemas/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alp::{AggregateReport, ErrorReference, ImpactRecord};
use crate::error::{Error, Result};
use crate::trainer::{EvalReport, FoldReport, LossCurves};
use crate::util::atomic_write;

/// SHA-256 of one input file consumed by a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command and reproduce its outputs
/// byte-identically: the resolved configuration, all seeds, and hashes of
/// every input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproStanza {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    pub tool_version: String,
}

/// Sidecar written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataReportFile {
    pub repro: ReproStanza,
    pub output_path: String,
    pub output_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReportFile {
    pub repro: ReproStanza,
    pub curves: LossCurves,
    pub checkpoint_path: String,
    pub checkpoint_sha256: String,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReportFile {
    pub repro: ReproStanza,
    pub folds: Vec<FoldReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReportFile {
    pub repro: ReproStanza,
    pub eval: EvalReport,
}

/// One latent dimension's attribution and sensitivity on the analyzed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlpDimRecord {
    pub dim: usize,
    pub region_count: usize,
    /// Region counts keyed by segmentation class name.
    pub class_counts: BTreeMap<String, usize>,
    pub impact: ImpactRecord<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlpReportFile {
    pub repro: ReproStanza,
    pub checkpoint_sha256: String,
    pub dataset_sha256: String,
    pub frame: usize,
    pub threshold_quantile: f64,
    pub dims: Vec<AlpDimRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReportFile {
    pub repro: ReproStanza,
    pub checkpoint_sha256: String,
    pub dataset_sha256: String,
    pub error_reference: ErrorReference,
    pub aggregate: AggregateReport,
}

/// Pretty-printed JSON with a trailing newline, written atomically.
pub fn write_json_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Published schemas, embedded so emitted reports can be checked at runtime
/// without locating the repository root.
pub mod schemas {
    pub const TRAIN: &str = include_str!("../../../schemas/train-report.schema.json");
    pub const CROSSVAL: &str = include_str!("../../../schemas/crossval-report.schema.json");
    pub const EVAL: &str = include_str!("../../../schemas/eval-report.schema.json");
    pub const ALP: &str = include_str!("../../../schemas/alp-report.schema.json");
    pub const IMPACT: &str = include_str!("../../../schemas/impact-report.schema.json");
    pub const GEN_DATA: &str = include_str!("../../../schemas/gen-data-repro.schema.json");
}

/// Validates `value` against the subset of JSON Schema the published schemas
/// use: `type`, `properties`, `required`, `additionalProperties`, `items`,
/// `enum`, `minimum`, and internal `$ref` into `$defs`. Violations carry the
/// JSON pointer of the offending node.
pub fn validate_json(value: &Value, schema: &Value) -> Result<()> {
    check_node(value, schema, schema, "$")
}

/// Parses `schema_text` and validates the serialization of `report` against
/// it; the single entry point for CLI emission checks.
pub fn check_against_schema<T: Serialize>(report: &T, schema_text: &str) -> Result<()> {
    let schema: Value = serde_json::from_str(schema_text)?;
    let value = serde_json::to_value(report)?;
    validate_json(&value, &schema)
}

fn schema_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::format(0, format!("{path}: {msg}"))
}

fn resolve<'a>(schema: &'a Value, root: &'a Value, path: &str) -> Result<&'a Value> {
    let Some(reference) = schema.get("$ref").and_then(Value::as_str) else {
        return Ok(schema);
    };
    let pointer = reference
        .strip_prefix('#')
        .ok_or_else(|| schema_err(path, format!("unsupported external $ref {reference}")))?;
    root.pointer(pointer)
        .ok_or_else(|| schema_err(path, format!("dangling $ref {reference}")))
}

fn type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_node(value: &Value, schema: &Value, root: &Value, path: &str) -> Result<()> {
    let schema = resolve(schema, root, path)?;

    if let Some(expected) = schema.get("type").and_then(Value::as_str) {
        let ok = match expected {
            "integer" => value.as_i64().is_some() || value.as_u64().is_some(),
            "number" => value.is_number(),
            other => type_name(value) == other,
        };
        if !ok {
            return Err(schema_err(
                path,
                format!("expected {expected}, found {}", type_name(value)),
            ));
        }
    }

    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            return Err(schema_err(path, format!("{value} is not one of {options:?}")));
        }
    }

    if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
        match value.as_f64() {
            Some(v) if v >= min => {}
            Some(v) => return Err(schema_err(path, format!("{v} is below the minimum {min}"))),
            None => return Err(schema_err(path, "minimum applied to a non-number")),
        }
    }

    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        let obj = value
            .as_object()
            .ok_or_else(|| schema_err(path, "properties applied to a non-object"))?;
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for key in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(key) {
                    return Err(schema_err(path, format!("missing required field {key}")));
                }
            }
        }
        let closed = schema
            .get("additionalProperties")
            .and_then(Value::as_bool)
            .map_or(false, |b| !b);
        for (key, field) in obj {
            match props.get(key) {
                Some(sub) => check_node(field, sub, root, &format!("{path}.{key}"))?,
                None if closed => {
                    return Err(schema_err(path, format!("unexpected field {key}")));
                }
                None => {}
            }
        }
    }

    if let Some(items) = schema.get("items") {
        let arr = value
            .as_array()
            .ok_or_else(|| schema_err(path, "items applied to a non-array"))?;
        for (i, item) in arr.iter().enumerate() {
            check_node(item, items, root, &format!("{path}[{i}]"))?;
        }
    }

    // Maps with uniform value schemas (class_counts and the like).
    if let Some(extra) = schema.get("additionalProperties") {
        if extra.is_object() {
            let obj = value
                .as_object()
                .ok_or_else(|| schema_err(path, "additionalProperties applied to a non-object"))?;
            let declared: Vec<&str> = schema
                .get("properties")
                .and_then(Value::as_object)
                .map(|p| p.keys().map(String::as_str).collect())
                .unwrap_or_default();
            for (key, field) in obj {
                if !declared.contains(&key.as_str()) {
                    check_node(field, extra, root, &format!("{path}.{key}"))?;
                }
            }
        }
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::BoxStats;
    use serde_json::json;

    fn stanza() -> ReproStanza {
        ReproStanza {
            command: "eval --data d.bin --ckpt m.ckpt".into(),
            seed: 42,
            config: json!({"seq_len": 16}),
            inputs: vec![InputHash {
                path: "d.bin".into(),
                sha256: "ab".repeat(32),
            }],
            tool_version: "0.1.0".into(),
        }
    }

    #[test]
    fn validator_accepts_matching_document() {
        let schema = json!({
            "type": "object",
            "required": ["n", "tags"],
            "additionalProperties": false,
            "properties": {
                "n": {"type": "integer", "minimum": 0},
                "tags": {"type": "array", "items": {"type": "string"}},
            }
        });
        let doc = json!({"n": 3, "tags": ["a", "b"]});
        validate_json(&doc, &schema).unwrap();
    }

    #[test]
    fn validator_reports_the_offending_path() {
        let schema = json!({
            "type": "object",
            "properties": {
                "tags": {"type": "array", "items": {"type": "string"}},
            }
        });
        let doc = json!({"tags": ["a", 7]});
        let err = validate_json(&doc, &schema).unwrap_err();
        assert!(err.to_string().contains("$.tags[1]"), "{err}");
    }

    #[test]
    fn validator_rejects_missing_required_and_unknown_fields() {
        let schema = json!({
            "type": "object",
            "required": ["a"],
            "additionalProperties": false,
            "properties": {"a": {"type": "number"}}
        });
        assert!(validate_json(&json!({}), &schema).is_err());
        assert!(validate_json(&json!({"a": 1, "b": 2}), &schema).is_err());
        validate_json(&json!({"a": 1.5}), &schema).unwrap();
    }

    #[test]
    fn validator_follows_internal_refs() {
        let schema = json!({
            "$defs": {"pair": {"type": "array", "items": {"type": "number"}}},
            "type": "object",
            "properties": {"p": {"$ref": "#/$defs/pair"}}
        });
        validate_json(&json!({"p": [1.0, 2.0]}), &schema).unwrap();
        let err = validate_json(&json!({"p": ["x"]}), &schema).unwrap_err();
        assert!(err.to_string().contains("$.p[0]"), "{err}");
    }

    #[test]
    fn validator_checks_enums_and_uniform_maps() {
        let schema = json!({
            "type": "object",
            "properties": {
                "kind": {"enum": ["ground_truth", "unperturbed"]},
                "counts": {"type": "object", "additionalProperties": {"type": "integer"}},
            }
        });
        validate_json(&json!({"kind": "ground_truth", "counts": {"road": 2}}), &schema).unwrap();
        assert!(validate_json(&json!({"kind": "other"}), &schema).is_err());
        assert!(validate_json(&json!({"counts": {"road": 1.5}}), &schema).is_err());
    }

    #[test]
    fn eval_report_matches_published_schema() {
        let report = EvalReportFile {
            repro: stanza(),
            eval: EvalReport {
                mean: 0.01,
                std: 0.002,
                n_steps: 160,
                per_sequence: vec![0.01, 0.011],
            },
        };
        check_against_schema(&report, schemas::EVAL).unwrap();
    }

    #[test]
    fn crossval_report_matches_published_schema() {
        let report = CrossvalReportFile {
            repro: stanza(),
            folds: vec![FoldReport {
                fold: 0,
                train_mean: 0.1,
                train_std: 0.01,
                test_mean: 0.2,
                test_std: 0.02,
            }],
        };
        check_against_schema(&report, schemas::CROSSVAL).unwrap();
    }

    #[test]
    fn train_report_matches_published_schema() {
        let report = TrainReportFile {
            repro: stanza(),
            curves: LossCurves {
                combined: vec![1.0, 0.9],
                recon: vec![9.0, 8.0],
                kl: vec![0.1, 0.2],
                pred: vec![0.5, 0.4],
            },
            checkpoint_path: "m.ckpt".into(),
            checkpoint_sha256: "cd".repeat(32),
            blob_sha256: "ef".repeat(32),
        };
        check_against_schema(&report, schemas::TRAIN).unwrap();
    }

    #[test]
    fn alp_report_matches_published_schema() {
        let report = AlpReportFile {
            repro: stanza(),
            checkpoint_sha256: "cd".repeat(32),
            dataset_sha256: "ab".repeat(32),
            frame: 12,
            threshold_quantile: 0.9,
            dims: vec![AlpDimRecord {
                dim: 1,
                region_count: 2,
                class_counts: BTreeMap::from([("road".to_string(), 1), ("sky".to_string(), 1)]),
                impact: ImpactRecord {
                    dim: 1,
                    y0: 0.1,
                    y_plus: 0.2,
                    y_minus: 0.0,
                    d_minus: 0.1,
                    d_plus: 0.1,
                    d_per: 0.2,
                    impact: 0.4 / 3.0,
                },
            }],
        };
        check_against_schema(&report, schemas::ALP).unwrap();
    }

    #[test]
    fn impact_report_matches_published_schema() {
        let b = BoxStats {
            min: 0.0,
            q1: 0.25,
            median: 0.5,
            q3: 0.75,
            max: 1.0,
        };
        let report = ImpactReportFile {
            repro: stanza(),
            checkpoint_sha256: "cd".repeat(32),
            dataset_sha256: "ab".repeat(32),
            error_reference: ErrorReference::GroundTruth,
            aggregate: AggregateReport {
                sample_size: 100,
                decile: 0.1,
                per_dim_error: vec![crate::alp::DimErrorStats {
                    mean_minus: 0.1,
                    std_minus: 0.01,
                    mean_plus: 0.1,
                    std_plus: 0.01,
                }],
                error_box: b.clone(),
                decile_frames: 10,
                top_decile: vec![b.clone()],
                bottom_decile: vec![b],
            },
        };
        check_against_schema(&report, schemas::IMPACT).unwrap();
    }

    #[test]
    fn schema_violation_is_caught_not_silently_passed() {
        let report = json!({"repro": stanza(), "eval": {"mean": "oops"}});
        let schema: Value = serde_json::from_str(schemas::EVAL).unwrap();
        let err = validate_json(&report, &schema).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
