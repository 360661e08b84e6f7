use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use navmem::llm::{ChatClient, ChatConfig, ChatError, ChatMessage, HttpChatClient};
use serde_json::Value;

#[derive(Debug, Clone)]
struct Request {
    path: String,
    authorization: Option<String>,
    body: Value,
}

fn read_request(stream: &mut TcpStream) -> Request {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
    let mut length = 0;
    let mut authorization = None;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    Request {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap(),
    }
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reply = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(reply.as_bytes()).unwrap();
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and records every request.
fn stub_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Request>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let req = read_request(&mut stream);
            log.lock().unwrap().push(req);
            respond(&mut stream, status, &body);
        }
    });
    (base, seen)
}

fn config(base: String) -> ChatConfig {
    ChatConfig {
        base_url: base,
        model: "test-model".into(),
        base_delay_ms: 1,
        max_delay_ms: 4,
        timeout_secs: 10,
        ..ChatConfig::default()
    }
}

#[test]
fn posts_chat_completion_with_bearer_token() {
    let (base, seen) = stub_server(vec![(200, completion("Action: A"))]);
    let client = HttpChatClient::with_api_key(config(base), Some("secret".into()));
    let reply = client
        .complete(&[ChatMessage::system("sys"), ChatMessage::user("hello")])
        .unwrap();
    assert_eq!(reply, "Action: A");
    let req = seen.lock().unwrap()[0].clone();
    assert_eq!(req.path, "/v1/chat/completions");
    assert_eq!(req.authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][1]["content"], "hello");
}

#[test]
fn retries_rate_limits_and_server_errors() {
    let (base, seen) = stub_server(vec![(429, "{}".into()), (503, "{}".into()), (200, completion("ok"))]);
    let client = HttpChatClient::with_api_key(config(base), None);
    assert_eq!(client.complete(&[ChatMessage::user("x")]).unwrap(), "ok");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[0].authorization.is_none());
}

#[test]
fn gives_up_after_max_retries() {
    let (base, seen) = stub_server(vec![(500, "boom".into()); 3]);
    let client = HttpChatClient::with_api_key(
        ChatConfig {
            max_retries: 2,
            ..config(base)
        },
        None,
    );
    let err = client.complete(&[ChatMessage::user("x")]).unwrap_err();
    assert_eq!(
        err,
        ChatError::Status {
            status: 500,
            body: "boom".into()
        }
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, seen) = stub_server(vec![(401, "denied".into()), (200, completion("late"))]);
    let client = HttpChatClient::with_api_key(config(base), None);
    let err = client.complete(&[ChatMessage::user("x")]).unwrap_err();
    assert!(matches!(err, ChatError::Status { status: 401, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_a_decode_error() {
    let (base, _) = stub_server(vec![(200, "{\"choices\": []}".into())]);
    let client = HttpChatClient::with_api_key(config(base), None);
    assert!(matches!(
        client.complete(&[ChatMessage::user("x")]),
        Err(ChatError::Decode(_))
    ));
}

#[test]
fn in_flight_requests_are_capped() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    {
        let (active, peak) = (Arc::clone(&active), Arc::clone(&peak));
        thread::spawn(move || {
            for stream in listener.incoming().take(6) {
                let mut stream = stream.unwrap();
                let (active, peak) = (Arc::clone(&active), Arc::clone(&peak));
                thread::spawn(move || {
                    read_request(&mut stream);
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(60));
                    active.fetch_sub(1, Ordering::SeqCst);
                    respond(&mut stream, 200, &completion("ok"));
                });
            }
        });
    }
    let client = Arc::new(HttpChatClient::with_api_key(
        ChatConfig {
            max_in_flight: 2,
            ..config(base)
        },
        None,
    ));
    let workers: Vec<_> = (0..6)
        .map(|_| {
            let client = Arc::clone(&client);
            thread::spawn(move || client.complete(&[ChatMessage::user("x")]).unwrap())
        })
        .collect();
    for w in workers {
        assert_eq!(w.join().unwrap(), "ok");
    }
    let peak = peak.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak concurrency {peak}");
}
