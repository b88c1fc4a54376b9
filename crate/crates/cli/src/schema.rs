//! Report JSON schema: the document ships with the crate and the
//! validator enforces it structurally (required keys, types, enums).

use serde_json::Value;

pub const REPORT_SCHEMA_VERSION: u64 = 1;

/// The published schema document (draft-07).
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

fn require<'a>(doc: &'a Value, key: &str, path: &str) -> Result<&'a Value, String> {
    doc.get(key)
        .ok_or_else(|| format!("missing required field {path}.{key}"))
}

fn expect_u64(v: &Value, path: &str) -> Result<u64, String> {
    v.as_u64().ok_or_else(|| format!("{path} must be a non-negative integer"))
}

fn expect_f64(v: &Value, path: &str) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{path} must be a number"))
}

fn expect_str<'a>(v: &'a Value, path: &str) -> Result<&'a str, String> {
    v.as_str().ok_or_else(|| format!("{path} must be a string"))
}

/// Structural validation of a report document against the published
/// schema's requirements.
pub fn validate_report(doc: &Value) -> Result<(), String> {
    if !doc.is_object() {
        return Err("report must be a JSON object".into());
    }
    let version = expect_u64(require(doc, "schema_version", "$")?, "$.schema_version")?;
    if version != REPORT_SCHEMA_VERSION {
        return Err(format!("unsupported schema_version {version}"));
    }
    expect_str(require(doc, "strategy", "$")?, "$.strategy")?;
    expect_u64(require(doc, "seed", "$")?, "$.seed")?;
    let hash = expect_str(require(doc, "config_hash", "$")?, "$.config_hash")?;
    if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err("$.config_hash must be a 64-char hex digest".into());
    }
    expect_str(require(doc, "base_checkpoint", "$")?, "$.base_checkpoint")?;
    expect_str(require(doc, "expert_checkpoint", "$")?, "$.expert_checkpoint")?;
    expect_u64(require(doc, "train_steps", "$")?, "$.train_steps")?;
    expect_u64(require(doc, "trainable_params", "$")?, "$.trainable_params")?;

    let report = require(doc, "report", "$")?;
    for field in [
        "target_base_avg",
        "target_expert_avg",
        "source_base_avg",
        "source_expert_avg",
        "delta_target",
        "delta_source",
    ] {
        expect_f64(require(report, field, "$.report")?, &format!("$.report.{field}"))?;
    }
    let benchmarks = require(report, "benchmarks", "$.report")?
        .as_array()
        .ok_or("$.report.benchmarks must be an array")?;
    for (i, b) in benchmarks.iter().enumerate() {
        let path = format!("$.report.benchmarks[{i}]");
        expect_str(require(b, "benchmark", &path)?, &format!("{path}.benchmark"))?;
        let split = expect_str(require(b, "split", &path)?, &format!("{path}.split"))?;
        if split != "target" && split != "source" {
            return Err(format!("{path}.split must be \"target\" or \"source\""));
        }
        expect_f64(require(b, "base_acc", &path)?, &format!("{path}.base_acc"))?;
        expect_f64(require(b, "expert_acc", &path)?, &format!("{path}.expert_acc"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_document_is_valid_json() {
        let doc: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        assert_eq!(doc["properties"]["schema_version"]["const"], 1);
    }

    #[test]
    fn validator_accepts_wellformed_and_rejects_broken() {
        let good = serde_json::json!({
            "schema_version": 1,
            "strategy": "viscop",
            "seed": 0,
            "config_hash": "0".repeat(64),
            "base_checkpoint": "base/base.ckpt",
            "expert_checkpoint": "adapt-viscop/expert.ckpt",
            "train_steps": 10,
            "trainable_params": 123,
            "report": {
                "benchmarks": [
                    {"benchmark": "target/actor-color", "split": "target", "base_acc": 25.0, "expert_acc": 50.0}
                ],
                "target_base_avg": 25.0,
                "target_expert_avg": 50.0,
                "source_base_avg": 60.0,
                "source_expert_avg": 59.0,
                "delta_target": 25.0,
                "delta_source": -1.0
            }
        });
        validate_report(&good).unwrap();

        let mut missing = good.clone();
        missing.as_object_mut().unwrap().remove("config_hash");
        assert!(validate_report(&missing).unwrap_err().contains("config_hash"));

        let mut bad_split = good.clone();
        bad_split["report"]["benchmarks"][0]["split"] = "weird".into();
        assert!(validate_report(&bad_split).is_err());
    }
}
