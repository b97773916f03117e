#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use medcorr_core::corpus::{ClinicalNote, GoldLabel, Record, Source};

pub fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn note_from_fixture(id: &str, name: &str) -> ClinicalNote {
    ClinicalNote::new(id, Source::MS, fixture(name).lines().map(str::to_string)).unwrap()
}

/// The stroke note with its imaging error in sentence 4.
pub fn stroke_record() -> Record {
    let note = note_from_fixture("ms-stroke", "c1_note.txt");
    let gold = GoldLabel::error(
        4,
        "CT of the head is obtained after neurologic exam reveals right upper and lower extremity weakness and an asymmetric smile.",
        Some("CTA of the head".into()),
    );
    Record { note, gold: Some(gold) }
}

/// The wheezing-child note with its diagnosis error in the last sentence.
pub fn asthma_record() -> Record {
    let note = note_from_fixture("ms-asthma", "mcq_note.txt");
    let gold = GoldLabel::error(8, "Suspected of asthma.", Some("primary ciliary dyskinesia".into()));
    Record { note, gold: Some(gold) }
}

pub fn simple_record(id: &str, source: Source, texts: &[&str], gold: GoldLabel) -> Record {
    Record { note: ClinicalNote::new(id, source, texts.iter().copied()).unwrap(), gold: Some(gold) }
}

/// A canned HTTP reply.
#[derive(Clone)]
pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn new(status: u16, body: impl Into<String>) -> Self {
        Self { status, body: body.into() }
    }
}

pub struct Captured {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

/// Minimal HTTP/1.1 server answering each request with the next scripted
/// reply (the last one repeats). Every request is recorded.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Captured>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Captured> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).ok()? == 0 {
        return None;
    }
    let mut headers = Vec::new();
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.eq_ignore_ascii_case("content-length") {
                length = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    Some(Captured { request_line: request_line.trim_end().to_string(), headers, body: String::from_utf8_lossy(&body).into() })
}

impl StubServer {
    pub fn start(replies: Vec<Reply>) -> Self {
        Self::start_with(move |i, _| replies[i.min(replies.len() - 1)].clone())
    }

    /// Replies computed from the request index and body.
    pub fn start_with(respond: impl Fn(usize, &str) -> Reply + Send + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests: Arc<Mutex<Vec<Captured>>> = Arc::default();
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let Some(req) = read_request(&mut stream) else { continue };
                let index = {
                    let mut l = log.lock().unwrap();
                    l.push(Captured { request_line: req.request_line.clone(), headers: req.headers.clone(), body: req.body.clone() });
                    l.len() - 1
                };
                let reply = respond(index, &req.body);
                let text = format!(
                    "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    reply.status,
                    reply.body.len(),
                    reply.body
                );
                let _ = stream.write_all(text.as_bytes());
                let _ = stream.flush();
            }
        });
        Self { url, requests }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

/// An OpenAI-style completion body carrying `content`.
pub fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Brute-force BM25 ranking computed straight from token lists.
pub fn brute_force_top_k(docs: &[(String, String)], query: &str, k: usize, k1: f64, b: f64) -> Vec<(String, f64)> {
    use medcorr_core::retrieval::tokenize;
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| tokenize(t)).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let q = tokenize(query);
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .zip(&toks)
        .map(|((id, _), doc)| {
            let mut s = 0.0;
            for term in &q {
                let tf = doc.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let df = toks.iter().filter(|d| d.contains(term)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let norm = k1 * (1.0 - b + b * doc.len() as f64 / avgdl);
                s += idf * tf * (k1 + 1.0) / (tf + norm);
            }
            (id.clone(), s)
        })
        .collect();
    scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
    scored.truncate(k);
    scored
}

/// A random corpus over a small vocabulary so that ties and shared terms are common.
pub fn synthetic_corpus<R: rand::Rng>(rng: &mut R, max_docs: usize) -> (Vec<(String, String)>, Vec<String>) {
    const VOCAB: [&str; 12] =
        ["fever", "cough", "rash", "sepsis", "asthma", "stroke", "ct", "mri", "pain", "renal", "acute", "chronic"];
    let word = |rng: &mut R| VOCAB[rng.random_range(0..VOCAB.len())];
    let n = rng.random_range(1..=max_docs);
    let mut ids: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
    let docs = ids
        .into_iter()
        .map(|i| {
            let len = rng.random_range(0..15);
            let text: Vec<&str> = (0..len).map(|_| word(rng)).collect();
            (format!("doc-{i:03}"), text.join(" "))
        })
        .collect();
    let queries = (0..5)
        .map(|_| {
            let len = rng.random_range(1..6);
            (0..len).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
        })
        .collect();
    (docs, queries)
}
