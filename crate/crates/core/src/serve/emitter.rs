//! Packet delivery over HTTP with retries and a dead-letter spool.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use reqwest::Url;
use serde::{Deserialize, Serialize};

use super::packet::AnomalyPacket;
use crate::error::{Error, Result};

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "TEG_ENDPOINT_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub url: String,
    pub token: Option<String>,
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff_base: Duration,
    pub timeout: Duration,
    pub spool_path: PathBuf,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, spool_path: impl Into<PathBuf>) -> Self {
        Self {
            url: url.into(),
            token: None,
            max_attempts: 3,
            backoff_base: Duration::from_millis(200),
            timeout: Duration::from_secs(5),
            spool_path: spool_path.into(),
        }
    }

    /// Same as [`EndpointConfig::new`] with the token read from the environment.
    pub fn from_env(url: impl Into<String>, spool_path: impl Into<PathBuf>) -> Self {
        Self {
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            ..Self::new(url, spool_path)
        }
    }

    pub fn backoff(&self, failed_attempts: u32) -> Duration {
        self.backoff_base * 2u32.saturating_pow(failed_attempts.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum Delivery {
    Delivered { attempts: u32, status: u16 },
    Spooled { attempts: u32, last_status: Option<u16>, error: String },
}

/// One line of the spool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoolEntry {
    pub packet: AnomalyPacket,
    pub attempts: u32,
    pub last_status: Option<u16>,
    pub error: String,
}

pub struct Emitter {
    config: EndpointConfig,
    url: Url,
    client: Client,
}

impl Emitter {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        let url = Url::parse(&config.url)
            .map_err(|e| Error::config(format!("endpoint URL {:?}: {e}", config.url)))?;
        if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
            return Err(Error::config(format!("endpoint URL {:?} is not http(s)", config.url)));
        }
        if config.max_attempts == 0 {
            return Err(Error::config("at least one delivery attempt is required"));
        }
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::config(format!("HTTP client: {e}")))?;
        Ok(Self { config, url, client })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn attempt(&self, body: &str) -> std::result::Result<u16, (Option<u16>, String)> {
        let mut req = self
            .client
            .post(self.url.clone())
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(t) = &self.config.token {
            req = req.header(AUTHORIZATION, format!("Bearer {t}"));
        }
        match req.send() {
            Ok(resp) if resp.status().is_success() => Ok(resp.status().as_u16()),
            Ok(resp) => Err((Some(resp.status().as_u16()), format!("HTTP {}", resp.status()))),
            Err(e) => Err((None, e.to_string())),
        }
    }

    /// Posts a packet, retrying with exponential backoff, and spools it
    /// when every attempt fails. Errors only if the spool cannot be written.
    pub fn emit(&self, packet: &AnomalyPacket) -> Result<Delivery> {
        let body = packet.to_json();
        let mut last_status = None;
        let mut error = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(&body) {
                Ok(status) => return Ok(Delivery::Delivered { attempts: attempt, status }),
                Err((status, e)) => {
                    log::warn!("delivery attempt {attempt} for {} failed: {e}", packet.clip_ref);
                    last_status = status;
                    error = e;
                }
            }
            if attempt < self.config.max_attempts {
                std::thread::sleep(self.config.backoff(attempt));
            }
        }
        let entry = SpoolEntry {
            packet: packet.clone(),
            attempts: self.config.max_attempts,
            last_status,
            error: error.clone(),
        };
        self.spool(&entry)?;
        Ok(Delivery::Spooled {
            attempts: self.config.max_attempts,
            last_status,
            error,
        })
    }

    fn spool(&self, entry: &SpoolEntry) -> Result<()> {
        let path = &self.config.spool_path;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn read_spool(path: &std::path::Path) -> Result<Vec<SpoolEntry>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_urls_are_config_errors() {
        for url in ["not a url", "ftp://host/x", "http://"] {
            let err = Emitter::new(EndpointConfig::new(url, "spool.jsonl")).err().unwrap();
            assert!(matches!(err, Error::Config(_)), "{url}");
        }
        assert!(Emitter::new(EndpointConfig::new("http://127.0.0.1:9/x", "s.jsonl")).is_ok());
    }

    #[test]
    fn backoff_doubles() {
        let c = EndpointConfig {
            backoff_base: Duration::from_millis(10),
            ..EndpointConfig::new("http://h/", "s")
        };
        assert_eq!(c.backoff(1), Duration::from_millis(10));
        assert_eq!(c.backoff(2), Duration::from_millis(20));
        assert_eq!(c.backoff(3), Duration::from_millis(40));
    }

    #[test]
    fn unreachable_endpoint_spools() {
        let dir = tempfile::tempdir().unwrap();
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let cfg = EndpointConfig {
            backoff_base: Duration::from_millis(1),
            timeout: Duration::from_millis(500),
            ..EndpointConfig::new(format!("http://127.0.0.1:{port}/events"), dir.path().join("spool.jsonl"))
        };
        let e = Emitter::new(cfg).unwrap();
        let p = AnomalyPacket::new("anomaly", "cam", 0, 10, 0.7).unwrap();
        let d = e.emit(&p).unwrap();
        assert!(matches!(d, Delivery::Spooled { attempts: 3, last_status: None, .. }));
        let spool = read_spool(&dir.path().join("spool.jsonl")).unwrap();
        assert_eq!(spool.len(), 1);
        assert_eq!(spool[0].packet, p);
    }
}
