//! The remote backend against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use graphrecon_core::predictor::{predict_batch, BackendKind, RemoteBackend};
use graphrecon_core::{CompletionBackend, NodeTask, PredictorConfig, PromptPair, TransportError, SYSTEM_PROMPT};
use serde_json::Value;

#[derive(Clone)]
enum Reply {
    Content(&'static str),
    Status(u16),
    Raw(&'static str),
    Sleep(Duration),
}

struct Request {
    path: String,
    headers: Vec<(String, String)>,
    body: Value,
}

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<Request>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    let len: usize = headers
        .iter()
        .find(|(k, _)| k == "content-length")
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        path,
        headers,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    })
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
}

/// Serves `script` in order, repeating the last reply.
fn stub(script: Vec<Reply>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&requests);
    thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let Some(req) = read_request(&mut stream) else { continue };
            log.lock().unwrap().push(req);
            match script[i.min(script.len() - 1)].clone() {
                Reply::Content(c) => {
                    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": c}}]});
                    respond(&mut stream, 200, &body.to_string());
                }
                Reply::Status(s) => respond(&mut stream, s, r#"{"error": "scripted"}"#),
                Reply::Raw(b) => respond(&mut stream, 200, b),
                Reply::Sleep(d) => {
                    thread::sleep(d);
                    respond(&mut stream, 200, "{}");
                }
            }
        }
    });
    Stub { url, requests }
}

fn config(url: &str) -> PredictorConfig {
    PredictorConfig {
        backend: BackendKind::Remote,
        endpoint_url: Some(url.to_string()),
        model_name: "test-model".into(),
        max_retries: 2,
        retry_backoff_ms: 1,
        request_timeout_secs: 0.5,
        ..Default::default()
    }
}

fn backend(cfg: &PredictorConfig) -> RemoteBackend {
    RemoteBackend::from_config(cfg, |k| (k == "OPENAI_API_KEY").then(|| "sk-test".to_string())).unwrap()
}

fn task() -> NodeTask {
    NodeTask {
        node: 322,
        t: 1439,
        previous: 61.5,
        earlier: vec![],
        neighbor_values: vec![63.9, 57.4],
        precision: 1,
    }
}

#[test]
fn sends_chat_completion_request() {
    let s = stub(vec![Reply::Content("42.0")]);
    let cfg = config(&s.url);
    let out = predict_batch(&[task()], &cfg, &backend(&cfg)).unwrap();
    assert_eq!(out[0].value, 42.0);
    assert_eq!(out[0].attempts, 1);
    assert!(!out[0].flagged);

    let reqs = s.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1);
    let req = &reqs[0];
    assert_eq!(req.path, "/v1/chat/completions");
    assert!(req.headers.contains(&("authorization".into(), "Bearer sk-test".into())));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][0]["content"], SYSTEM_PROMPT);
    assert_eq!(req.body["messages"][1]["role"], "user");
    let user = req.body["messages"][1]["content"].as_str().unwrap();
    assert!(user.ends_with("Time 1439, Entity index: 322. Previous: 61.5, Neighbors: [63.9, 57.4]."));
}

#[test]
fn rate_limit_is_a_transport_error_and_retried_upstream() {
    let s = stub(vec![Reply::Status(429), Reply::Content("7.3")]);
    let cfg = config(&s.url);
    let b = backend(&cfg);
    let prompt = PromptPair::render(&[task()]).unwrap();
    match b.complete(&prompt, &[task()]) {
        Err(TransportError::Http { status: 429, .. }) => {}
        other => panic!("expected HTTP 429, got {other:?}"),
    }
    assert_eq!(s.requests.lock().unwrap().len(), 1, "no retry inside the backend");

    let out = predict_batch(&[task()], &cfg, &b).unwrap();
    assert_eq!(out[0].value, 7.3);
    assert_eq!(out[0].attempts, 1);

    let again = stub(vec![Reply::Status(503), Reply::Status(429), Reply::Content("7.3")]);
    let cfg = config(&again.url);
    let out = predict_batch(&[task()], &cfg, &backend(&cfg)).unwrap();
    assert_eq!((out[0].value, out[0].attempts, out[0].flagged), (7.3, 3, false));
}

#[test]
fn timeout_exhausts_retries_and_falls_back() {
    let s = stub(vec![Reply::Sleep(Duration::from_millis(1500))]);
    let cfg = PredictorConfig {
        max_retries: 1,
        request_timeout_secs: 0.2,
        ..config(&s.url)
    };
    let b = backend(&cfg);
    let prompt = PromptPair::render(&[task()]).unwrap();
    assert!(matches!(b.complete(&prompt, &[task()]), Err(TransportError::Timeout)));

    let out = predict_batch(&[task()], &cfg, &b).unwrap();
    assert!(out[0].flagged);
    assert_eq!(out[0].attempts, 2);
    assert_eq!(out[0].value, 61.5);
    assert!(out[0].error.as_deref().unwrap().contains("timed out"));
}

#[test]
fn malformed_and_non_numeric_replies() {
    let s = stub(vec![
        Reply::Raw("not json"),
        Reply::Raw(r#"{"choices": []}"#),
        Reply::Content("I think about 60"),
    ]);
    let cfg = config(&s.url);
    let b = backend(&cfg);
    let prompt = PromptPair::render(&[task()]).unwrap();
    assert!(matches!(
        b.complete(&prompt, &[task()]),
        Err(TransportError::MalformedResponse(_))
    ));
    assert!(matches!(
        b.complete(&prompt, &[task()]),
        Err(TransportError::MalformedResponse(_))
    ));
    // a single number embedded in prose is still one prediction
    let out = predict_batch(&[task()], &cfg, &b).unwrap();
    assert_eq!(out[0].value, 60.0);

    let words = stub(vec![Reply::Content("no idea")]);
    let cfg = config(&words.url);
    let out = predict_batch(&[task()], &cfg, &backend(&cfg)).unwrap();
    assert!(out[0].flagged);
    assert_eq!(out[0].attempts, 3);
    assert_eq!(words.requests.lock().unwrap().len(), 3);
}

#[test]
fn concurrent_batch_keeps_order() {
    let s = stub(vec![Reply::Content("1.0")]);
    let cfg = PredictorConfig {
        max_concurrency: 4,
        ..config(&s.url)
    };
    let tasks: Vec<NodeTask> = (0..10).map(|node| NodeTask { node, ..task() }).collect();
    let out = predict_batch(&tasks, &cfg, &backend(&cfg)).unwrap();
    assert_eq!(
        out.iter().map(|r| r.node).collect::<Vec<_>>(),
        (0..10).collect::<Vec<_>>()
    );
    assert_eq!(s.requests.lock().unwrap().len(), 10);
}
