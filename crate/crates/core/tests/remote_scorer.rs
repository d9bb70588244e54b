use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use textguard::scorer::{remote_score, RemotePayload, RemoteScorer, RemoteScorerConfig, ScorerError, SequenceScorer};
use textguard::tokenizer::train_bpe;

struct Request {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves one request per entry of `replies` and reports what it received.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Request>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let (mut len, mut authorization) = (0, None);
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let header = line.trim_end();
                if header.is_empty() {
                    break;
                }
                let (name, value) = header.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            tx.send(Request { path, authorization, body: serde_json::from_slice(&body).unwrap() }).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}"), rx)
}

#[test]
fn token_ids_round_trip() {
    let (url, rx) = serve(vec![(200, json!({"logprobs": [-0.5, -1.5, -2.5]}).to_string())]);
    let mut cfg = RemoteScorerConfig::new(url);
    cfg.auth_token = Some("secret".into());
    let scorer = RemoteScorer::new(cfg, None).unwrap();
    let scores = scorer.score_ids(&[4, 7, 1]).unwrap();
    assert_eq!(scores.logprobs, vec![-0.5, -1.5, -2.5]);
    let req = rx.recv().unwrap();
    assert_eq!(req.path, "/v1/score");
    assert_eq!(req.authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(req.body, json!({"token_ids": [4, 7, 1]}));
}

#[test]
fn text_mode_sends_decoded_text() {
    let vocab = train_bpe(&["hello world"], 5).unwrap();
    let ids = vocab.encode("hello world").unwrap().ids;
    let reply = json!({ "logprobs": vec![-1.0; ids.len()] }).to_string();
    let (url, rx) = serve(vec![(200, reply)]);
    let cfg = RemoteScorerConfig { send_text: true, ..RemoteScorerConfig::new(url) };
    assert!(RemoteScorer::new(cfg.clone(), None).is_err());
    let scorer = RemoteScorer::new(cfg, Some(vocab)).unwrap();
    assert_eq!(scorer.score_ids(&ids).unwrap().len(), ids.len());
    assert_eq!(rx.recv().unwrap().body, json!({"text": "hello world"}));
}

#[test]
fn server_errors_are_classified() {
    let (url, _rx) = serve(vec![
        (503, "overloaded".into()),
        (200, json!({"logprobs": [-1.0]}).to_string()),
        (200, json!({"logprobs": [0.5, -1.0]}).to_string()),
        (200, "not json".into()),
    ]);
    let cfg = RemoteScorerConfig::new(url);
    let payload = RemotePayload::TokenIds { token_ids: vec![1, 2] };
    match remote_score(&cfg, &payload) {
        Err(ScorerError::Http { status: 503, body }) => assert_eq!(body, "overloaded"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(remote_score(&cfg, &payload), Err(ScorerError::Protocol(_))));
    assert!(remote_score(&cfg, &payload).is_err());
    assert!(matches!(remote_score(&cfg, &payload), Err(ScorerError::Protocol(_))));
}

#[test]
fn unreachable_endpoint_is_a_connection_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = RemoteScorerConfig { timeout: Duration::from_secs(2), ..RemoteScorerConfig::new(format!("http://127.0.0.1:{port}")) };
    let err = remote_score(&cfg, &RemotePayload::TokenIds { token_ids: vec![1] }).unwrap_err();
    assert!(matches!(err, ScorerError::Connection(_)), "{err:?}");
}
