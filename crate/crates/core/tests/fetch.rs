mod common;

use summary_repair::dataset::{fetch, Benchmark, DatasetError};
use summary_repair::synthetic;

fn jsonl(records: &[serde_json::Value]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

#[test]
fn downloads_once_then_hits_the_cache() {
    let server = common::serve(vec![(200, jsonl(&synthetic::humanevalpack_records()))]);
    let cache = tempfile::tempdir().unwrap();
    let url = format!("{}/humanevalpack.jsonl", server.url);
    let first = fetch(Benchmark::HumanEvalPack, cache.path(), Some(&url)).unwrap();
    assert!(!first.cache_hit);
    assert_eq!(first.records, 164);
    assert_eq!(first.path, cache.path().join("humanevalpack.jsonl"));

    let second = fetch(Benchmark::HumanEvalPack, cache.path(), Some(&url)).unwrap();
    assert!(second.cache_hit);
    assert_eq!(server.requests.lock().unwrap().len(), 1);
}

#[test]
fn full_mbpp_file_is_filtered_to_the_test_split() {
    let server = common::serve(vec![(200, jsonl(&synthetic::mbpp_records(true)))]);
    let cache = tempfile::tempdir().unwrap();
    let out = fetch(Benchmark::Mbpp, cache.path(), Some(&server.url)).unwrap();
    assert_eq!(out.records, 500);
}

#[test]
fn bad_download_leaves_no_cache_file() {
    let truncated: Vec<_> = synthetic::humanevalpack_records().into_iter().take(10).collect();
    let server = common::serve(vec![(200, jsonl(&truncated))]);
    let cache = tempfile::tempdir().unwrap();
    let err = fetch(Benchmark::HumanEvalPack, cache.path(), Some(&server.url)).unwrap_err();
    assert!(matches!(err, DatasetError::Count { expected: 164, found: 10 }), "{err}");
    assert!(!cache.path().join("humanevalpack.jsonl").exists());
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 0, "staging file left behind");
}

#[test]
fn http_errors_are_reported() {
    let server = common::serve(vec![(404, "not found".into())]);
    let cache = tempfile::tempdir().unwrap();
    let err = fetch(Benchmark::Mbpp, cache.path(), Some(&server.url)).unwrap_err();
    assert!(matches!(err, DatasetError::Fetch(_)), "{err}");
}
