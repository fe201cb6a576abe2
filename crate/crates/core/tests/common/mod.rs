//! Shared fixtures: a scripted HTTP endpoint and small model/stream builders.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teg::model::{init_params, TeGConfig, TeGParams};
use teg::serve::StreamRecord;

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
    pub status: u16,
}

/// Answers each request with the next scripted status, then `fallback`.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: Vec<u16>, fallback: u16) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub");
        listener.set_nonblocking(true).expect("nonblocking");
        let url = format!("http://{}/events", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let (requests, stop) = (Arc::clone(&requests), Arc::clone(&stop));
            std::thread::spawn(move || {
                let mut script = script.into_iter();
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let status = script.next().unwrap_or(fallback);
                            handle_one(stream, status, &requests);
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(_) => break,
                    }
                }
            })
        };
        Self {
            url,
            requests,
            stop,
            handle: Some(handle),
        }
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_one(stream: TcpStream, status: u16, log: &Mutex<Vec<Recorded>>) -> Option<()> {
    stream.set_nonblocking(false).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut length = 0usize;
    let mut authorization = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        match name.trim().to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().ok()?,
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    log.lock().unwrap().push(Recorded {
        method,
        path,
        authorization,
        body: String::from_utf8(body).ok()?,
        status,
    });
    let reason = if status < 400 { "OK" } else { "Error" };
    let mut out = stream;
    write!(out, "HTTP/1.1 {status} {reason}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n").ok()?;
    out.flush().ok()
}

pub fn tiny_model() -> TeGConfig {
    TeGConfig {
        dim: 8,
        heads: 2,
        fcn_hidden: (16, 8),
        ..TeGConfig::default()
    }
}

pub fn tiny_params(seed: u64) -> (TeGConfig, TeGParams) {
    let cfg = tiny_model();
    let params = init_params(&cfg, seed).unwrap();
    (cfg, params)
}

/// Camera stream alternating quiet stretches with 7-segment bursts.
pub fn synthetic_stream(cameras: &[&str], segments: usize, dim: usize, seed: u64) -> Vec<StreamRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in 0..segments {
        for cam in cameras {
            let burst = (t / 7) % 3 == 1;
            let scale = if burst { 4.0 } else { 0.3 };
            let mut row = || (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            out.push(StreamRecord {
                camera_id: cam.to_string(),
                timestamp_ms: 1_000 + 2_133 * t as u64,
                short: row(),
                medium: row(),
                long: row(),
            });
        }
    }
    out
}
