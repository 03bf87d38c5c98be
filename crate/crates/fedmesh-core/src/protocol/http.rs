//! The HTTP/1.1 subset this testbed speaks: request line, headers, and a
//! Content-Length body. No chunked encoding, no keep-alive; every exchange
//! is one connection. Enough for lightweight config and metric endpoints,
//! small enough to test exhaustively.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;
use thiserror::Error;

const MAX_HEADER_BYTES: usize = 16 * 1024;
const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("malformed request line: {0}")]
    BadRequestLine(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("header section exceeds {MAX_HEADER_BYTES} bytes")]
    HeaderTooLarge,
    #[error("body of {0} bytes exceeds cap")]
    BodyTooLarge(usize),
    #[error("connection closed mid-message")]
    Truncated,
    #[error("bad url '{0}'")]
    BadUrl(String),
    #[error("malformed status line: {0}")]
    BadStatusLine(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Reads one request from the stream. The caller owns timeouts via
/// `TcpStream::set_read_timeout`.
pub fn read_request(stream: &mut TcpStream) -> Result<HttpRequest, HttpError> {
    let mut reader = BufReader::new(stream);
    let request_line = read_line(&mut reader)?;
    let mut parts = request_line.split(' ');
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    let version = parts.next().unwrap_or("");
    if method.is_empty() || path.is_empty() || !version.starts_with("HTTP/1.") || parts.next().is_some() {
        return Err(HttpError::BadRequestLine(request_line));
    }

    let mut headers = Vec::new();
    let mut header_bytes = 0usize;
    loop {
        let line = read_line(&mut reader)?;
        if line.is_empty() {
            break;
        }
        header_bytes += line.len();
        if header_bytes > MAX_HEADER_BYTES {
            return Err(HttpError::HeaderTooLarge);
        }
        let (name, value) = line
            .split_once(':')
            .ok_or_else(|| HttpError::BadHeader(line.clone()))?;
        headers.push((name.trim().to_string(), value.trim().to_string()));
    }

    let content_length = headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case("content-length"))
        .map(|(_, v)| v.parse::<usize>())
        .transpose()
        .map_err(|e| HttpError::BadHeader(format!("content-length: {e}")))?
        .unwrap_or(0);
    if content_length > MAX_BODY_BYTES {
        return Err(HttpError::BodyTooLarge(content_length));
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            HttpError::Truncated
        } else {
            HttpError::Io(e)
        }
    })?;
    Ok(HttpRequest {
        method,
        path,
        headers,
        body,
    })
}

fn read_line<R: BufRead>(reader: &mut R) -> Result<String, HttpError> {
    let mut line = String::new();
    let n = reader.read_line(&mut line)?;
    if n == 0 {
        return Err(HttpError::Truncated);
    }
    while line.ends_with('\n') || line.ends_with('\r') {
        line.pop();
    }
    Ok(line)
}

pub fn status_reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        500 => "Internal Server Error",
        _ => "Unknown",
    }
}

/// Writes a complete response and flushes. Connections always close after
/// one exchange.
pub fn write_response(
    stream: &mut TcpStream,
    status: u16,
    content_type: &str,
    body: &[u8],
) -> std::io::Result<()> {
    let head = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        status,
        status_reason(status),
        content_type,
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    stream.flush()
}

/// Parsed `http://host:port[/base]` endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpTarget {
    pub host: String,
    pub port: u16,
    pub base_path: String,
}

impl HttpTarget {
    pub fn parse(url: &str) -> Result<Self, HttpError> {
        let rest = url
            .strip_prefix("http://")
            .ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].trim_end_matches('/')),
            None => (rest, ""),
        };
        let (host, port) = authority
            .rsplit_once(':')
            .ok_or_else(|| HttpError::BadUrl(url.to_string()))?;
        let port: u16 = port.parse().map_err(|_| HttpError::BadUrl(url.to_string()))?;
        if host.is_empty() || port == 0 {
            return Err(HttpError::BadUrl(url.to_string()));
        }
        Ok(HttpTarget {
            host: host.to_string(),
            port,
            base_path: path.to_string(),
        })
    }

    fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// One-shot JSON POST: connect, send, read the full response, close.
pub fn post_json(
    target: &HttpTarget,
    path: &str,
    body: &[u8],
    timeout: Duration,
) -> Result<HttpResponse, HttpError> {
    let addr = target
        .addr()
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| HttpError::BadUrl(target.addr()))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let full_path = format!("{}{}", target.base_path, path);
    let head = format!(
        "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        full_path,
        target.addr(),
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    stream.flush()?;
    read_response(&mut stream)
}

/// One-shot GET; used for `/health`.
pub fn get(target: &HttpTarget, path: &str, timeout: Duration) -> Result<HttpResponse, HttpError> {
    let addr = target
        .addr()
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| HttpError::BadUrl(target.addr()))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let head = format!(
        "GET {}{} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\n\r\n",
        target.base_path,
        path,
        target.addr()
    );
    stream.write_all(head.as_bytes())?;
    stream.flush()?;
    read_response(&mut stream)
}

fn read_response(stream: &mut TcpStream) -> Result<HttpResponse, HttpError> {
    let mut reader = BufReader::new(stream);
    let status_line = read_line(&mut reader)?;
    let mut parts = status_line.split(' ');
    let version = parts.next().unwrap_or("");
    let status: u16 = parts
        .next()
        .unwrap_or("")
        .parse()
        .map_err(|_| HttpError::BadStatusLine(status_line.clone()))?;
    if !version.starts_with("HTTP/1.") {
        return Err(HttpError::BadStatusLine(status_line));
    }
    let mut content_length: Option<usize> = None;
    loop {
        let line = read_line(&mut reader)?;
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.trim().eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().ok();
            }
        }
    }
    let body = match content_length {
        Some(n) => {
            if n > MAX_BODY_BYTES {
                return Err(HttpError::BodyTooLarge(n));
            }
            let mut buf = vec![0u8; n];
            reader.read_exact(&mut buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    HttpError::Truncated
                } else {
                    HttpError::Io(e)
                }
            })?;
            buf
        }
        None => {
            let mut buf = Vec::new();
            reader.read_to_end(&mut buf)?;
            buf
        }
    };
    Ok(HttpResponse { status, body })
}
