//! Minimal blocking HTTP/1.1 JSON client for the detector and reasoner
//! endpoints. Plain `http://` only; one request per connection.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
    pub path: String,
}

impl Endpoint {
    /// Parses `http://host[:port][/base]` and appends `route` to the path.
    pub fn parse(base: &str, route: &str) -> Result<Self, String> {
        let rest = base
            .strip_prefix("http://")
            .ok_or_else(|| format!("unsupported endpoint {base:?}: only http:// is supported"))?;
        let (authority, base_path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].trim_end_matches('/')),
            None => (rest, ""),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (h, p.parse::<u16>().map_err(|e| format!("bad port in {base:?}: {e}"))?),
            None => (authority, 80),
        };
        if host.is_empty() {
            return Err(format!("missing host in {base:?}"));
        }
        Ok(Self {
            host: host.to_string(),
            port,
            path: format!("{base_path}{route}"),
        })
    }
}

#[derive(Debug)]
pub enum HttpError {
    /// Connection or I/O failure.
    Transport(String),
    /// Non-2xx status.
    Status(u16, String),
    /// Body did not decode.
    Decode(String),
}

impl std::fmt::Display for HttpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpError::Transport(m) => write!(f, "transport error: {m}"),
            HttpError::Status(code, body) => write!(f, "HTTP {code}: {body}"),
            HttpError::Decode(m) => write!(f, "decode error: {m}"),
        }
    }
}

pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    endpoint: &Endpoint,
    body: &Req,
    timeout: Duration,
) -> Result<Resp, HttpError> {
    let payload = serde_json::to_vec(body).map_err(|e| HttpError::Decode(e.to_string()))?;
    decode(send(endpoint, "POST", Some(&payload), timeout)?)
}

pub fn get_json<Resp: DeserializeOwned>(endpoint: &Endpoint, timeout: Duration) -> Result<Resp, HttpError> {
    decode(send(endpoint, "GET", None, timeout)?)
}

fn decode<Resp: DeserializeOwned>((status, text): (u16, Vec<u8>)) -> Result<Resp, HttpError> {
    if !(200..300).contains(&status) {
        return Err(HttpError::Status(status, String::from_utf8_lossy(&text).into_owned()));
    }
    serde_json::from_slice(&text).map_err(|e| HttpError::Decode(e.to_string()))
}

fn send(endpoint: &Endpoint, method: &str, payload: Option<&[u8]>, timeout: Duration) -> Result<(u16, Vec<u8>), HttpError> {
    let transport = |e: std::io::Error| HttpError::Transport(e.to_string());
    let addr = (endpoint.host.as_str(), endpoint.port)
        .to_socket_addrs()
        .map_err(transport)?
        .next()
        .ok_or_else(|| HttpError::Transport(format!("cannot resolve {}", endpoint.host)))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(transport)?;
    stream.set_read_timeout(Some(timeout)).map_err(transport)?;
    stream.set_write_timeout(Some(timeout)).map_err(transport)?;

    let body_headers = match payload {
        Some(p) => format!("Content-Type: application/json\r\nContent-Length: {}\r\n", p.len()),
        None => String::new(),
    };
    let head = format!(
        "{method} {} HTTP/1.1\r\nHost: {}:{}\r\nAccept: application/json\r\n{body_headers}Connection: close\r\n\r\n",
        endpoint.path, endpoint.host, endpoint.port,
    );
    stream.write_all(head.as_bytes()).map_err(transport)?;
    if let Some(p) = payload {
        stream.write_all(p).map_err(transport)?;
    }
    stream.flush().map_err(transport)?;

    let mut reader = BufReader::new(stream);
    let mut status_line = String::new();
    reader.read_line(&mut status_line).map_err(transport)?;
    let status = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse::<u16>().ok())
        .ok_or_else(|| HttpError::Transport(format!("bad status line {status_line:?}")))?;

    let mut content_length = None;
    let mut chunked = false;
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(transport)?;
        let line = line.trim_end();
        if n == 0 || line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            let value = value.trim();
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.parse::<usize>().ok(),
                "transfer-encoding" => chunked = value.eq_ignore_ascii_case("chunked"),
                _ => {}
            }
        }
    }

    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size_line = String::new();
            reader.read_line(&mut size_line).map_err(transport)?;
            let size = usize::from_str_radix(size_line.trim().split(';').next().unwrap_or(""), 16)
                .map_err(|e| HttpError::Transport(format!("bad chunk size: {e}")))?;
            if size == 0 {
                break;
            }
            let mut chunk = vec![0u8; size];
            reader.read_exact(&mut chunk).map_err(transport)?;
            body.extend_from_slice(&chunk);
            let mut crlf = [0u8; 2];
            reader.read_exact(&mut crlf).map_err(transport)?;
        }
    } else if let Some(len) = content_length {
        body.resize(len, 0);
        reader.read_exact(&mut body).map_err(transport)?;
    } else {
        reader.read_to_end(&mut body).map_err(transport)?;
    }
    Ok((status, body))
}

/// `GET /health` body of the model bridge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub backends: HealthBackends,
}

/// Backend identifiers as reported by the bridge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthBackends {
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "B")]
    pub b: String,
    pub reasoner: String,
}

impl Health {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Queries `<base>/health`. A reply whose status is not `ok` is an error.
pub fn check_health(base_url: &str, timeout: Duration) -> Result<Health, HttpError> {
    let ep = Endpoint::parse(base_url, "/health").map_err(HttpError::Transport)?;
    let h: Health = get_json(&ep, timeout)?;
    if h.is_ok() {
        Ok(h)
    } else {
        Err(HttpError::Status(200, format!("bridge reports status {:?}", h.status)))
    }
}
