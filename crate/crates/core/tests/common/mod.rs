#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use heatlevel::clustering::{assign_level, HeatLevelScheme};
use heatlevel::corpus::{Event, EventCorpus, SourceMeta};

type Handler = dyn Fn(usize, &str, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server on localhost. The handler gets the global
/// request number (0-based), the path and the body.
pub struct StubServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start(handler: impl Fn(usize, &str, &str) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                let counter = Arc::clone(&counter);
                thread::spawn(move || serve(stream, &*handler, &counter));
            }
        });
        Self { url, requests }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, handler: &Handler, counter: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut out = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
        let mut content_length = 0;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                if name.eq_ignore_ascii_case("content-length") {
                    content_length = value.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; content_length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let n = counter.fetch_add(1, Ordering::SeqCst);
        let (status, payload) = handler(n, &path, &String::from_utf8_lossy(&body));
        let response = format!(
            "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if out.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

/// Chat-completions body with one choice.
pub fn chat_response(text: &str) -> String {
    serde_json::json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 2, "total_tokens": 12}
    })
    .to_string()
}

const TOPICS: [&str; 8] = [
    "subway fare increase in the capital",
    "flood relief for river towns",
    "university entrance exam results",
    "food safety inspection at school canteens",
    "national football team wins the cup",
    "power outage after the winter storm",
    "new rules for ride hailing drivers",
    "price cap on heating gas",
];

/// `per_level` labeled events in each level of the reference scheme, with
/// heat indices spread inside every interval.
pub fn balanced_corpus(per_level: usize) -> EventCorpus {
    let scheme = HeatLevelScheme::reference();
    let spans = [(0.5, 8.0), (9.0, 21.0), (22.0, 42.0), (43.0, 90.0)];
    let mut events = Vec::new();
    for (li, (lo, hi)) in spans.iter().enumerate() {
        for i in 0..per_level {
            let heat = lo + (hi - lo) * (i as f64 + 0.5) / per_level as f64;
            let topic = TOPICS[(i + li) % TOPICS.len()];
            events.push(Event {
                id: format!("L{}-{i:04}", li + 1),
                title: format!("report {i}"),
                content: format!("{topic}: report {i}"),
                category: Some(format!("cat{}", i % 5)),
                heat_index: heat,
                level: Some(assign_level(&scheme, heat).unwrap()),
            });
        }
    }
    EventCorpus {
        source_meta: SourceMeta {
            raw: events.len(),
            ..Default::default()
        },
        events,
    }
}

pub fn golden_event() -> Event {
    Event {
        id: "golden-1".into(),
        title: "Subway fares".into(),
        content: "The city announced that subway fares will rise from 3 to 4 yuan next month.".into(),
        category: Some("Society and Livelihood".into()),
        heat_index: 12.5,
        level: None,
    }
}

pub fn golden_cases() -> heatlevel::retrieval::CaseSet {
    use heatlevel::clustering::HeatLevel;
    use heatlevel::retrieval::{Case, CaseSet, Provenance};
    let rows = [
        ("c1", "Bus fares rise by one yuan in the provincial capital.", 9.81, 2),
        ("c2", "Metro line 5 opens\nwith free rides for a week.", 3.2, 1),
        ("c3", "Taxi drivers protest the new fare rules.", 27.045, 3),
    ];
    CaseSet {
        cases: rows
            .iter()
            .map(|&(id, content, heat, level)| Case {
                id: id.into(),
                content: content.into(),
                heat_index: heat,
                level: HeatLevel::new(level).unwrap(),
            })
            .collect(),
        provenance: Provenance::Recalled,
    }
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}
