use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::scenarios::{MetricsTable, ACCURACY_THRESHOLD};
use super::EvalError;
use crate::cohort::Scenario;

#[derive(Serialize)]
struct ReportRow<'a> {
    model: &'a str,
    scenario: String,
    acc: f64,
    auroc_macro: f64,
    aupr_macro: f64,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    metadata: ReportMetadata,
    rows: Vec<ReportRow<'a>>,
}

/// The metric conventions backing the numbers, recorded so reports are
/// self-describing.
#[derive(Serialize)]
struct ReportMetadata {
    accuracy_threshold: f64,
    multilabel_reduction: &'static str,
    aupr_definition: &'static str,
    tie_handling: &'static str,
}

fn rows(tables: &[MetricsTable]) -> Vec<ReportRow<'_>> {
    let mut out = Vec::with_capacity(tables.len() * 2);
    for table in tables {
        for scenario in [Scenario::Basic, Scenario::Full] {
            let s = table.scenario(scenario);
            out.push(ReportRow {
                model: &table.model,
                scenario: scenario.to_string(),
                acc: s.acc,
                auroc_macro: s.auroc_macro,
                aupr_macro: s.aupr_macro,
                seed: table.seed,
                config_hash: &table.config_hash,
            });
        }
    }
    out
}

/// Writes `report.csv` and its value-for-value JSON mirror `report.json`
/// into `dir`. Emission is deterministic: identical inputs produce
/// byte-identical files.
pub fn emit_report(tables: &[MetricsTable], dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    assert!(!tables.is_empty(), "emit_report needs at least one table");
    fs::create_dir_all(dir)?;
    let rows = rows(tables);

    let mut csv = String::from("model,scenario,acc,auroc_macro,aupr_macro,seed,config_hash\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.model, r.scenario, r.acc, r.auroc_macro, r.aupr_macro, r.seed, r.config_hash
        ));
    }
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, csv)?;

    let json = ReportJson {
        metadata: ReportMetadata {
            accuracy_threshold: ACCURACY_THRESHOLD,
            multilabel_reduction: "macro",
            aupr_definition: "average_precision",
            tie_handling: "auroc: ties count half; aupr: stable index order",
        },
        rows,
    };
    let json_path = dir.join("report.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&json).expect("report serializes"),
    )?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::scenarios::ScenarioMetrics;

    fn table(model: &str, acc: f64) -> MetricsTable {
        let scenario = ScenarioMetrics {
            acc,
            auroc_macro: 0.75,
            aupr_macro: 1.0 / 3.0,
            skipped_columns: vec![],
        };
        MetricsTable {
            model: model.into(),
            seed: 7,
            config_hash: "cafe".into(),
            basic: scenario.clone(),
            full: scenario,
        }
    }

    #[test]
    fn two_models_yield_four_rows_and_mirrors_agree() {
        let dir = tempfile::tempdir().unwrap();
        let tables = vec![table("a", 0.5), table("b", 0.625)];
        let (csv_path, json_path) = emit_report(&tables, dir.path()).unwrap();

        let csv = fs::read_to_string(&csv_path).unwrap();
        let data_rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(data_rows.len(), 4);

        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
        let rows = json["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 4);
        // Value-for-value agreement: the CSV text parses back to the JSON number.
        for (line, row) in data_rows.iter().zip(rows) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], row["model"].as_str().unwrap());
            let csv_acc: f64 = fields[2].parse().unwrap();
            assert_eq!(csv_acc.to_bits(), row["acc"].as_f64().unwrap().to_bits());
            let csv_aupr: f64 = fields[4].parse().unwrap();
            assert_eq!(csv_aupr.to_bits(), row["aupr_macro"].as_f64().unwrap().to_bits());
        }
    }

    #[test]
    fn re_emission_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let tables = vec![table("m", 0.123456789)];
        emit_report(&tables, dir.path()).unwrap();
        let first_csv = fs::read(dir.path().join("report.csv")).unwrap();
        let first_json = fs::read(dir.path().join("report.json")).unwrap();
        emit_report(&tables, dir.path()).unwrap();
        assert_eq!(first_csv, fs::read(dir.path().join("report.csv")).unwrap());
        assert_eq!(first_json, fs::read(dir.path().join("report.json")).unwrap());
    }
}
