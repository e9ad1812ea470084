//! In-process mock of the SMS gateway, used by the test harness and the
//! bundled end-to-end fixtures. Binds a loopback port and speaks just enough
//! HTTP/1.1 to serve the messaging endpoint with scripted behavior.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Every request is accepted.
    Succeed,
    /// The first `failures` requests get HTTP 500, then success.
    FailHttpThenSucceed { failures: u32 },
    /// Accepted transport, but the recipient is rejected with this status.
    RejectRecipient { status: String },
}

/// One decoded messaging request, for assertions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRequest {
    pub username: String,
    pub to: String,
    pub message: String,
    pub api_key: String,
    pub idempotency_key: String,
}

pub struct MockGateway {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockGateway {
    pub fn spawn(behavior: MockBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests: Arc<Mutex<Vec<RecordedRequest>>> = Arc::default();
        let shutdown = Arc::new(AtomicBool::new(false));

        let thread_requests = Arc::clone(&requests);
        let thread_shutdown = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            let remaining_failures = AtomicUsize::new(match &behavior {
                MockBehavior::FailHttpThenSucceed { failures } => *failures as usize,
                _ => 0,
            });
            let counter = AtomicUsize::new(0);
            for stream in listener.incoming() {
                if thread_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let _ = handle_connection(
                    stream,
                    &behavior,
                    &remaining_failures,
                    &counter,
                    &thread_requests,
                );
            }
        });

        Ok(Self {
            addr,
            requests,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().expect("mock lock poisoned").clone()
    }
}

impl Drop for MockGateway {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // poke the listener so the accept loop observes the flag
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(
    mut stream: TcpStream,
    behavior: &MockBehavior,
    remaining_failures: &AtomicUsize,
    counter: &AtomicUsize,
    requests: &Mutex<Vec<RecordedRequest>>,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;

    // read until the end of the header block
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(()); // shutdown poke or client hangup
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_subsequence(&buf, b"\r\n\r\n") {
            break pos + 4;
        }
        if buf.len() > 64 * 1024 {
            return Ok(());
        }
    };

    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = header_value(&head, "content-length")
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    while buf.len() < header_end + content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body = String::from_utf8_lossy(
        &buf[header_end..header_end + content_length.min(buf.len() - header_end)],
    )
    .to_string();

    let form = parse_form(&body);
    requests
        .lock()
        .expect("mock lock poisoned")
        .push(RecordedRequest {
            username: form_value(&form, "username"),
            to: form_value(&form, "to"),
            message: form_value(&form, "message"),
            api_key: header_value(&head, "apikey").unwrap_or_default(),
            idempotency_key: header_value(&head, "idempotency-key").unwrap_or_default(),
        });

    let fail_now = matches!(behavior, MockBehavior::FailHttpThenSucceed { .. })
        && remaining_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1))
            .is_ok();
    if fail_now {
        return write_response(
            &mut stream,
            "500 Internal Server Error",
            "{\"error\":\"try again\"}",
        );
    }

    let (status, status_code) = match behavior {
        MockBehavior::RejectRecipient { status } => (status.as_str(), 403),
        _ => ("Success", 101),
    };
    let n = counter.fetch_add(1, Ordering::SeqCst) + 1;
    let body = format!(
        concat!(
            "{{\"SMSMessageData\":{{\"Message\":\"Sent to 1/1 Total Cost: UGX 50.0000\",",
            "\"Recipients\":[{{\"number\":\"{}\",\"status\":\"{}\",\"statusCode\":{},",
            "\"cost\":\"UGX 50.0000\",\"messageId\":\"ATXid_mock{:04}\"}}]}}}}"
        ),
        form_value(&form, "to"),
        status,
        status_code,
        n
    );
    write_response(&mut stream, "201 Created", &body)
}

fn write_response(stream: &mut TcpStream, status: &str, body: &str) -> std::io::Result<()> {
    let response = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn header_value(head: &str, name: &str) -> Option<String> {
    head.lines().skip(1).find_map(|line| {
        let (k, v) = line.split_once(':')?;
        (k.trim().eq_ignore_ascii_case(name)).then(|| v.trim().to_string())
    })
}

fn parse_form(body: &str) -> Vec<(String, String)> {
    body.split('&')
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
            (url_decode(k), url_decode(v))
        })
        .collect()
}

fn form_value(form: &[(String, String)], key: &str) -> String {
    form.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.clone())
        .unwrap_or_default()
}

fn url_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => {
                out.push(b' ');
                i += 1;
            }
            b'%' if i + 2 < bytes.len() => {
                let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).ok();
                match hex.and_then(|h| u8::from_str_radix(h, 16).ok()) {
                    Some(b) => {
                        out.push(b);
                        i += 3;
                    }
                    None => {
                        out.push(bytes[i]);
                        i += 1;
                    }
                }
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}
