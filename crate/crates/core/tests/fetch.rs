use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use wordimp::corpus::{FetchError, ParseClient};

/// Serves `responses` in order, one per connection, and reports each
/// request's start line and body.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut start = String::new();
            reader.read_line(&mut start).unwrap();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send((start.trim().to_string(), String::from_utf8(buf).unwrap()));
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/process"), rx)
}

const TWO: &str = "# sent_id = 1\n1\tHi\thi\tINTJ\t_\t_\t0\troot\t_\t_\n\n\
                   # sent_id = 2\n1\tGo\tgo\tVERB\t_\t_\t0\troot\t_\t_\n2\tnow\tnow\tADV\t_\t_\t1\tadvmod\t_\t_\n\n";

fn client(endpoint: &str) -> ParseClient {
    ParseClient {
        backoff: Duration::from_millis(1),
        timeout: Duration::from_secs(5),
        ..ParseClient::new(endpoint)
    }
}

#[test]
fn parses_a_batch() {
    let (url, rx) = serve(vec![(200, TWO.to_string())]);
    let trees = client(&url).parse(&["Hi".into(), "Go now".into()]).unwrap();
    assert_eq!(trees.len(), 2);
    assert_eq!(trees[1].tokens, vec!["Go", "now"]);
    assert_eq!(trees[1].head, vec![None, Some(0)]);
    let (start, body) = rx.recv().unwrap();
    assert!(start.starts_with("POST /process?"));
    assert!(start.contains("tokenizer=presegmented"));
    assert_eq!(body, "Hi\nGo now");
}

#[test]
fn json_envelope_and_retry() {
    let envelope = serde_json::json!({ "result": TWO }).to_string();
    let (url, _rx) = serve(vec![(503, "busy".into()), (200, envelope)]);
    let trees = client(&url).parse(&["Hi".into(), "Go now".into()]).unwrap();
    assert_eq!(trees.len(), 2);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, _rx) = serve(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let err = client(&url).parse(&["Hi".into()]).unwrap_err();
    assert!(err.is_retriable());
    assert!(matches!(err, FetchError::Retriable { attempts: 3, .. }));
}

#[test]
fn sentence_count_mismatch_is_a_format_error() {
    let (url, _rx) = serve(vec![(200, TWO.to_string())]);
    let err = client(&url).parse(&["Hi".into()]).unwrap_err();
    assert!(matches!(err, FetchError::Format(_)));
}
