#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use digitalshadow::agent::{ReportContext, Thresholds};
use digitalshadow::analytics::{ChangeTestConfig, RiskSample};
use digitalshadow::records::{context_from_samples, Sex, SubjectProfile};
use digitalshadow::stream::{RiskProcess, SynthSpec, SynthSubject};

/// One scripted reply of the mock chat-completion server.
#[derive(Debug, Clone)]
pub enum Reply {
    Status(u16, String),
    /// Sleep before answering 200 with the given body.
    Delay(Duration, String),
}

impl Reply {
    pub fn completion(text: &str) -> Reply {
        Reply::Status(200, completion_body(text))
    }
}

pub fn completion_body(text: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
    })
    .to_string()
}

#[derive(Debug, Clone)]
pub struct Recorded {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }
}

/// Minimal HTTP/1.1 server on 127.0.0.1 that answers requests from a script.
/// Once the script runs out the last reply repeats.
pub struct MockServer {
    pub url: String,
    requests: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    pub fn start(script: Vec<Reply>) -> MockServer {
        assert!(!script.is_empty());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { continue };
                let reply = script[i.min(script.len() - 1)].clone();
                let log = Arc::clone(&log);
                thread::spawn(move || serve(stream, reply, &log));
            }
        });
        MockServer { url, requests }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, reply: Reply, log: &Mutex<Vec<Recorded>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let len = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    log.lock().unwrap().push(Recorded {
        request_line: request_line.trim_end().to_string(),
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    });
    let (status, body) = match reply {
        Reply::Status(s, b) => (s, b),
        Reply::Delay(d, b) => {
            thread::sleep(d);
            (200, b)
        }
    };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

pub fn subject(label: &str, process: RiskProcess, enrolled: bool) -> SynthSubject {
    SynthSubject {
        label: label.into(),
        process,
        visibility: 1.0,
        embedding: None,
        enrolled,
    }
}

pub fn synth_spec(subjects: Vec<SynthSubject>, duration_s: f64, fps: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        stream_id: "cam0".into(),
        subjects,
        duration_s,
        fps,
        seed,
        dimension: 16,
        embedding_jitter: 0.02,
        start_ms: 0,
    }
}

/// Step from `before` to `after` at `at_ms`, constant on each side.
pub fn step(before: f64, after: f64, at_ms: i64) -> RiskProcess {
    RiskProcess::Step {
        before: Box::new(RiskProcess::Constant { value: before }),
        after: Box::new(RiskProcess::Constant { value: after }),
        at_ms,
    }
}

pub fn profile_fixture() -> SubjectProfile {
    let mut p = SubjectProfile::minimal("S-001", "alice", 0);
    p.health_record.age_years = Some(67);
    p.health_record.sex = Some(Sex::Female);
    p.health_record.chief_complaint = "exertional chest tightness".into();
    p
}

/// Ten samples per window around the given levels.
pub fn context_fixture(prev_level: f64, level: f64) -> ReportContext {
    let previous: Vec<RiskSample> = (0..10)
        .map(|i| RiskSample::new("S-001", i * 100, prev_level + 0.001 * i as f64).unwrap())
        .collect();
    let current: Vec<RiskSample> = (0..10)
        .map(|i| RiskSample::new("S-001", 1000 + i * 100, level - 0.001 * i as f64).unwrap())
        .collect();
    let inputs = context_from_samples(
        profile_fixture(),
        &previous,
        &current,
        (0, 1000, 2000),
        &ChangeTestConfig::default(),
    )
    .unwrap();
    ReportContext::from_inputs(inputs, Thresholds::default()).unwrap()
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
