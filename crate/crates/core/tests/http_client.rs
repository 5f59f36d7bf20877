mod common;

use std::time::Duration;

use summary_repair::llm::RetryPolicy;
use summary_repair::{ChatProvider, HttpProvider, LlmConfig, LlmError};

fn fast() -> RetryPolicy {
    RetryPolicy { base: Duration::from_millis(5), cap: Duration::from_millis(20) }
}

fn config(url: &str) -> LlmConfig {
    let mut cfg = LlmConfig::new("stub-model", format!("{url}/v1"));
    cfg.api_key_env = Some("SMREPAIR_TEST_KEY".into());
    cfg
}

fn provider(cfg: &LlmConfig) -> HttpProvider {
    std::env::set_var("SMREPAIR_TEST_KEY", "sk-test");
    HttpProvider::new(std::slice::from_ref(cfg)).unwrap().with_retry_policy(fast())
}

#[test]
fn retries_rate_limits_then_succeeds() {
    let server = common::serve(vec![
        (429, "{}".into()),
        (429, "{}".into()),
        (200, common::completion("def f():\n    return 1")),
    ]);
    let cfg = config(&server.url);
    let ex = provider(&cfg).complete(&cfg, "Repair the following python code: x").unwrap();
    assert_eq!(ex.retry_count, 2);
    assert_eq!(ex.response_text, "def f():\n    return 1");
    assert_eq!(ex.prompt_tokens, Some(12));
    assert!(ex.is_single_turn());

    let requests = server.requests.lock().unwrap();
    assert_eq!(requests.len(), 3);
    let req = &requests[2];
    assert_eq!(req.request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(req.header("authorization"), Some("Bearer sk-test"));
    let body: serde_json::Value = serde_json::from_slice(&req.body).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.2);
    assert_eq!(body["top_p"], 1.0);
    assert_eq!(body["max_tokens"], 2048);
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages.len(), 1);
    assert_eq!(messages[0]["role"], "user");
    assert_eq!(messages[0]["content"], "Repair the following python code: x");
}

#[test]
fn server_errors_exhaust_retries() {
    let server = common::serve(vec![(503, "{}".into())]);
    let mut cfg = config(&server.url);
    cfg.max_retries = 2;
    let err = provider(&cfg).complete(&cfg, "hello").unwrap_err();
    assert!(matches!(err, LlmError::Provider(_)), "{err}");
    assert!(!err.is_fatal());
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}

#[test]
fn unauthorised_is_a_configuration_error() {
    let server = common::serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let cfg = config(&server.url);
    let err = provider(&cfg).complete(&cfg, "hello").unwrap_err();
    assert!(err.is_fatal(), "{err}");
    assert_eq!(server.requests.lock().unwrap().len(), 1);
}

#[test]
fn missing_content_is_a_provider_error() {
    let server = common::serve(vec![(200, r#"{"choices":[]}"#.into())]);
    let cfg = config(&server.url);
    let err = provider(&cfg).complete(&cfg, "hello").unwrap_err();
    assert!(matches!(err, LlmError::Provider(_)), "{err}");
}

#[test]
fn unreachable_endpoint_is_retried_then_reported() {
    let mut cfg = LlmConfig::new("stub-model", "http://127.0.0.1:9");
    cfg.max_retries = 1;
    let p = HttpProvider::new(std::slice::from_ref(&cfg)).unwrap().with_retry_policy(fast());
    let err = p.complete(&cfg, "hello").unwrap_err();
    assert!(err.to_string().contains("after 1 retries"), "{err}");
}

#[test]
fn missing_key_variable_fails_up_front() {
    let mut cfg = LlmConfig::new("m", "http://127.0.0.1:9");
    cfg.api_key_env = Some("SMREPAIR_SURELY_UNSET_VARIABLE".into());
    assert!(HttpProvider::new(&[cfg]).is_err());
}
