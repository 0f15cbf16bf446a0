//! The listening page and the Rust side agree on the wire format.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde_json::Value;

use earballs_core::testgen::{grade_responses, AnswerKey, ResponseRecord, UiManifest};

fn ui(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../listening-ui")
        .join(rel)
}

fn json(rel: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(ui(rel)).unwrap()).unwrap()
}

fn schema_properties(schema: &Value) -> BTreeSet<String> {
    schema["properties"]
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect()
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn manifest_fixture_is_what_make_test_writes() {
    let fixture: UiManifest = serde_json::from_value(json("fixtures/manifest.json")).unwrap();
    assert_eq!(fixture, UiManifest::for_package("pkg-000"));
    let written = serde_json::to_value(UiManifest::for_package("x")).unwrap();
    assert_eq!(
        keys(&written),
        schema_properties(&json("schema/ui-manifest.schema.json"))
    );
}

#[test]
fn response_fixture_round_trips_field_for_field() {
    let raw = json("fixtures/response.json");
    let r: ResponseRecord = serde_json::from_value(raw.clone()).unwrap();
    assert!(r.incompleteness().is_none());
    assert_eq!(serde_json::to_value(&r).unwrap(), raw);
    assert_eq!(
        keys(&raw),
        schema_properties(&json("schema/response.schema.json"))
    );
}

#[test]
fn key_schema_matches_answer_key() {
    let raw = json("fixtures/key.json");
    let k: AnswerKey = serde_json::from_value(raw.clone()).unwrap();
    assert_eq!(serde_json::to_value(&k).unwrap(), raw);
    assert_eq!(
        keys(&raw),
        schema_properties(&json("schema/key.schema.json"))
    );
}

#[test]
fn exported_response_grades_against_its_key() {
    let r: ResponseRecord = serde_json::from_value(json("fixtures/response.json")).unwrap();
    let k: AnswerKey = serde_json::from_value(json("fixtures/key.json")).unwrap();
    let g = grade_responses(&[r], &[k]).unwrap();
    assert!(g.excluded.is_empty());
    assert_eq!(g.models[0].mean_hsa, 7.0 / 8.0);
    assert_eq!(g.models[0].mean_hsm, 1.0);
}

#[test]
fn forbidden_manifest_fields_are_rejected() {
    let mut raw = json("fixtures/manifest.json");
    raw["key"] = serde_json::json!({"0": "A"});
    assert!(serde_json::from_value::<UiManifest>(raw).is_err());
}
