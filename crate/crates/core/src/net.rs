//! Minimal HTTP/1.1 plumbing over std TCP: a blocking client and a threaded
//! server. Requests and responses carry JSON bodies with explicit
//! Content-Length; chunked transfer encoding is decoded on receive for
//! compatibility with remote model endpoints. Plain http only.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed http message: {0}")]
    Malformed(String),
    #[error("unsupported url {0:?}: expected http://host:port/path")]
    BadUrl(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        201 => "Created",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        422 => "Unprocessable Entity",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

/// Start line plus (name, value) header pairs in arrival order.
type Head = (String, Vec<(String, String)>);

/// Reads a request or status line plus headers. Returns None on clean EOF
/// before any byte of a new message.
fn read_head<R: BufRead>(reader: &mut R) -> Result<Option<Head>, NetError> {
    let mut first = String::new();
    if reader.read_line(&mut first)? == 0 {
        return Ok(None);
    }
    let first = first.trim_end().to_string();
    if first.is_empty() {
        return Err(NetError::Malformed("empty start line".into()));
    }
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(NetError::Malformed("eof inside headers".into()));
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        match line.split_once(':') {
            Some((k, v)) => headers.push((k.trim().to_ascii_lowercase(), v.trim().to_string())),
            None => return Err(NetError::Malformed(format!("bad header line {line:?}"))),
        }
    }
    Ok(Some((first, headers)))
}

fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
}

/// Reads a message body per Content-Length or chunked transfer encoding;
/// absent both, the body is empty.
fn read_body<R: BufRead>(reader: &mut R, headers: &[(String, String)]) -> Result<Vec<u8>, NetError> {
    if let Some(te) = header(headers, "transfer-encoding") {
        if te.eq_ignore_ascii_case("chunked") {
            let mut body = Vec::new();
            loop {
                let mut size_line = String::new();
                if reader.read_line(&mut size_line)? == 0 {
                    return Err(NetError::Malformed("eof inside chunked body".into()));
                }
                let size_str = size_line.trim().split(';').next().unwrap_or("").trim();
                let size = usize::from_str_radix(size_str, 16)
                    .map_err(|_| NetError::Malformed(format!("bad chunk size {size_str:?}")))?;
                if size == 0 {
                    // Trailer section: consume lines through the blank one.
                    loop {
                        let mut t = String::new();
                        if reader.read_line(&mut t)? == 0 || t.trim_end().is_empty() {
                            break;
                        }
                    }
                    return Ok(body);
                }
                let mut chunk = vec![0u8; size];
                reader.read_exact(&mut chunk)?;
                body.extend_from_slice(&chunk);
                let mut crlf = [0u8; 2];
                reader.read_exact(&mut crlf)?;
            }
        }
        return Err(NetError::Malformed(format!("unsupported transfer-encoding {te:?}")));
    }
    let len = match header(headers, "content-length") {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| NetError::Malformed(format!("bad content-length {v:?}")))?,
        None => 0,
    };
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok(body)
}

/// Pure request handler: (method, path, body) to (status, body). Keeping the
/// surface byte-oriented lets the wire protocol be tested against recorded
/// fixtures without sockets.
pub trait Handler: Send + Sync + 'static {
    fn handle(&self, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>);
}

impl<F> Handler for F
where
    F: Fn(&str, &str, &[u8]) -> (u16, Vec<u8>) + Send + Sync + 'static,
{
    fn handle(&self, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
        self(method, path, body)
    }
}

/// Threaded HTTP server: one accept loop, one thread per connection,
/// keep-alive until the peer closes.
pub struct HttpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl HttpServer {
    pub fn serve(listen: &str, handler: Arc<dyn Handler>) -> Result<HttpServer, NetError> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept_thread = std::thread::Builder::new()
            .name("http-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let handler = handler.clone();
                    let _ = std::thread::Builder::new().name("http-conn".into()).spawn(move || {
                        let _ = serve_connection(stream, handler);
                    });
                }
            })
            .expect("spawn http accept thread");
        Ok(HttpServer { addr, stop, accept_thread: Some(accept_thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and joins the accept loop. Connections already being
    /// served finish on their own threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        if self.accept_thread.is_some() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            if let Some(t) = self.accept_thread.take() {
                let _ = t.join();
            }
        }
    }
}

fn serve_connection(stream: TcpStream, handler: Arc<dyn Handler>) -> Result<(), NetError> {
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let Some((request_line, headers)) = read_head(&mut reader)? else {
            return Ok(());
        };
        let mut parts = request_line.split_whitespace();
        let (Some(method), Some(path)) = (parts.next(), parts.next()) else {
            return Err(NetError::Malformed(format!("bad request line {request_line:?}")));
        };
        let body = read_body(&mut reader, &headers)?;
        let (status, resp_body) = handler.handle(method, path, &body);
        write!(
            writer,
            "HTTP/1.1 {status} {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
            reason(status),
            resp_body.len()
        )?;
        writer.write_all(&resp_body)?;
        writer.flush()?;
        let close = header(&headers, "connection").is_some_and(|v| v.eq_ignore_ascii_case("close"));
        if close {
            return Ok(());
        }
    }
}

/// Blocking single-request client. Opens a fresh connection per request and
/// closes it after the response.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub timeout: Duration,
}

impl Default for HttpClient {
    fn default() -> Self {
        HttpClient { timeout: Duration::from_secs(10) }
    }
}

fn split_url(url: &str) -> Result<(&str, &str), NetError> {
    let rest = url.strip_prefix("http://").ok_or_else(|| NetError::BadUrl(url.to_string()))?;
    match rest.find('/') {
        Some(i) => Ok((&rest[..i], &rest[i..])),
        None => Ok((rest, "/")),
    }
}

impl HttpClient {
    pub fn request(
        &self,
        method: &str,
        url: &str,
        extra_headers: &[(String, String)],
        body: &[u8],
    ) -> Result<HttpResponse, NetError> {
        let (authority, path) = split_url(url)?;
        let addr = authority
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| NetError::BadUrl(url.to_string()))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;

        let mut writer = stream.try_clone()?;
        write!(
            writer,
            "{method} {path} HTTP/1.1\r\nhost: {authority}\r\nconnection: close\r\ncontent-length: {}\r\n",
            body.len()
        )?;
        for (k, v) in extra_headers {
            write!(writer, "{k}: {v}\r\n")?;
        }
        writer.write_all(b"\r\n")?;
        writer.write_all(body)?;
        writer.flush()?;

        let mut reader = BufReader::new(stream);
        let (status_line, headers) = read_head(&mut reader)?
            .ok_or_else(|| NetError::Malformed("empty response".into()))?;
        let status = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse::<u16>().ok())
            .ok_or_else(|| NetError::Malformed(format!("bad status line {status_line:?}")))?;
        let body = read_body(&mut reader, &headers)?;
        Ok(HttpResponse { status, body })
    }
}

/// Where a request goes. Client code is written against this trait so the
/// same logic drives a live TCP server and an in-process service; tests and
/// experiments swap the transport, never the code path.
pub trait Transport: Send + Sync {
    fn send(
        &self,
        endpoint: &str,
        method: &str,
        path: &str,
        body: &[u8],
    ) -> Result<(u16, Vec<u8>), NetError>;
}

/// Transport over real TCP. The endpoint is `host:port`; an `http://`
/// prefix is accepted and ignored.
#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    pub client: HttpClient,
}

impl Transport for HttpTransport {
    fn send(
        &self,
        endpoint: &str,
        method: &str,
        path: &str,
        body: &[u8],
    ) -> Result<(u16, Vec<u8>), NetError> {
        let authority = endpoint.strip_prefix("http://").unwrap_or(endpoint);
        let url = format!("http://{authority}{path}");
        let resp = self.client.request(method, &url, &[], body)?;
        Ok((resp.status, resp.body))
    }
}
