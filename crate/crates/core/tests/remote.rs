//! HTTP clients against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

use hopqa::llm::{
    ChatBackend, ChatMessage, GatewayError, RemoteBackend, RemoteConfig, RetryPolicy,
    SamplingParams,
};
use hopqa::retriever::Document;
use hopqa::scorer::{RelevanceModel, RemoteRelevance, RemoteRelevanceConfig, ScorerError};

struct Request {
    head: String,
    body: serde_json::Value,
}

/// Answers one connection per canned response, then returns what it saw.
fn serve(responses: Vec<(u16, String)>) -> (String, JoinHandle<Vec<Request>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut raw = vec![0u8; length];
            reader.read_exact(&mut raw).unwrap();
            seen.push(Request {
                head,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            reader.get_mut().write_all(reply.as_bytes()).unwrap();
        }
        seen
    });
    (url, handle)
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay_ms: 1,
    }
}

fn docs() -> Vec<Document> {
    vec![
        Document::new("a", "Paris", "Capital of France.").unwrap(),
        Document::new("b", "Lyon", "A city.").unwrap(),
    ]
}

#[test]
fn relevance_round_trip() {
    let (url, server) = serve(vec![(200, r#"{"scores": [0.9, 0.1]}"#.into())]);
    let model = RemoteRelevance::new(RemoteRelevanceConfig {
        url,
        timeout_secs: 5,
        retry: fast(),
    });
    let scores = model.relevance_batch("capital of France", &docs()).unwrap();
    assert_eq!(scores, vec![0.9, 0.1]);
    let seen = server.join().unwrap();
    assert_eq!(seen[0].body["query"], "capital of France");
    assert_eq!(seen[0].body["documents"][0], "Paris: Capital of France.");
}

#[test]
fn relevance_retries_server_errors() {
    let (url, server) = serve(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        (200, r#"{"scores": [1.0, 0.0]}"#.into()),
    ]);
    let model = RemoteRelevance::new(RemoteRelevanceConfig {
        url,
        timeout_secs: 5,
        retry: fast(),
    });
    assert_eq!(model.relevance_batch("q", &docs()).unwrap(), vec![1.0, 0.0]);
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn relevance_rejects_bad_shapes() {
    let (url, server) = serve(vec![
        (200, r#"{"scores": [0.5]}"#.into()),
        (200, r#"{"scores": [1.5, 0.0]}"#.into()),
        (400, r#"{"error": "empty documents"}"#.into()),
    ]);
    let model = RemoteRelevance::new(RemoteRelevanceConfig {
        url,
        timeout_secs: 5,
        retry: fast(),
    });
    for _ in 0..3 {
        let err = model.relevance_batch("q", &docs()).unwrap_err();
        assert!(matches!(err, ScorerError::RelevanceFailure(_)), "{err}");
    }
    // the 400 is not retried
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn unreachable_relevance_service_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let model = RemoteRelevance::new(RemoteRelevanceConfig {
        url: format!("http://127.0.0.1:{port}/score"),
        timeout_secs: 2,
        retry: fast(),
    });
    let err = model.relevance_batch("q", &docs()).unwrap_err().to_string();
    assert!(err.contains("after 3 attempt"), "{err}");
}

#[test]
fn chat_completions_round_trip() {
    let body = r#"{"choices": [{"message": {"content": "[Answer] Paris"}},
                               {"message": {"content": "[Search] capital city"}}],
                   "usage": {"prompt_tokens": 40, "completion_tokens": 5}}"#;
    let (url, server) = serve(vec![(200, body.into())]);
    let mut backend = RemoteBackend::with_key(
        RemoteConfig {
            endpoint: url,
            timeout_secs: 5,
            retry: fast(),
            ..Default::default()
        },
        "sk-test".into(),
    );
    let messages = [ChatMessage::system("sys"), ChatMessage::user("question")];
    let out = backend
        .complete(&messages, &SamplingParams::new(0.2, 2).unwrap())
        .unwrap();
    assert_eq!(out[0].text, "[Answer] Paris");
    assert_eq!(out.iter().map(|c| c.prompt_tokens).sum::<u64>(), 40);
    assert_eq!(out.iter().map(|c| c.completion_tokens).sum::<u64>(), 5);

    let seen = server.join().unwrap();
    let req = &seen[0];
    assert!(req
        .head
        .to_ascii_lowercase()
        .contains("authorization: bearer sk-test"));
    assert_eq!(req.body["n"], 2);
    assert_eq!(req.body["temperature"], 0.2);
    assert_eq!(req.body["messages"][1]["role"], "user");
}

#[test]
fn unreachable_chat_endpoint_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut backend = RemoteBackend::with_key(
        RemoteConfig {
            endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"),
            timeout_secs: 2,
            retry: fast(),
            ..Default::default()
        },
        "k".into(),
    );
    let err = backend
        .complete(
            &[ChatMessage::system("s")],
            &SamplingParams::new(0.2, 1).unwrap(),
        )
        .unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { attempts: 3, .. }),
        "{err}"
    );
}
