//! Length-prefixed binary protocol between clients and servers.
//!
//! Every frame is `len: u32 | type: u8 | query_id: u64 | body`, with `len`
//! counting the body only and all integers little-endian. Bodies:
//!
//! | type | message   | body                                   |
//! |------|-----------|----------------------------------------|
//! | 1    | HELLO     | version u16                            |
//! | 2    | HELLO_ACK | version u16, n_items u64, record_len u32 |
//! | 3    | QUERY     | serialized [`DpfKey`]                  |
//! | 4    | RESPONSE  | the server's `record_len`-byte subresult |
//! | 5    | ERROR     | code u16, UTF-8 message                |
//!
//! A connection may carry many QUERY frames before any RESPONSE is read;
//! responses come back in completion order tagged with the query's id.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{never, select, unbounded, Receiver};

use crate::dpf::DpfKey;
use crate::error::{Error, Result};
use crate::server::{Completion, Request, Server};

pub const PROTOCOL_VERSION: u16 = 1;
/// Largest accepted body.
pub const FRAME_CAP: u32 = 64 << 20;
pub const FRAME_HEADER_LEN: usize = 13;

pub const MSG_HELLO: u8 = 1;
pub const MSG_HELLO_ACK: u8 = 2;
pub const MSG_QUERY: u8 = 3;
pub const MSG_RESPONSE: u8 = 4;
pub const MSG_ERROR: u8 = 5;

pub const ERR_MALFORMED: u16 = 1;
pub const ERR_DOMAIN_MISMATCH: u16 = 2;
pub const ERR_INTERNAL: u16 = 3;
pub const ERR_UNSUPPORTED_VERSION: u16 = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Hello {
        version: u16,
    },
    HelloAck {
        version: u16,
        n_items: u64,
        record_len: u32,
    },
    Query {
        key: Vec<u8>,
    },
    Response {
        subresult: Vec<u8>,
    },
    Error {
        code: u16,
        message: String,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello { .. } => MSG_HELLO,
            Message::HelloAck { .. } => MSG_HELLO_ACK,
            Message::Query { .. } => MSG_QUERY,
            Message::Response { .. } => MSG_RESPONSE,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    fn body(&self) -> Vec<u8> {
        match self {
            Message::Hello { version } => version.to_le_bytes().to_vec(),
            Message::HelloAck {
                version,
                n_items,
                record_len,
            } => {
                let mut b = Vec::with_capacity(14);
                b.extend_from_slice(&version.to_le_bytes());
                b.extend_from_slice(&n_items.to_le_bytes());
                b.extend_from_slice(&record_len.to_le_bytes());
                b
            }
            Message::Query { key } => key.clone(),
            Message::Response { subresult } => subresult.clone(),
            Message::Error { code, message } => {
                let mut b = code.to_le_bytes().to_vec();
                b.extend_from_slice(message.as_bytes());
                b
            }
        }
    }

    fn from_body(msg_type: u8, body: Vec<u8>) -> Result<Self> {
        let at = FRAME_HEADER_LEN as u64;
        let exact = |want: usize| {
            if body.len() == want {
                Ok(())
            } else {
                Err(Error::format(
                    at,
                    format!("type {msg_type} body must be {want} bytes, got {}", body.len()),
                ))
            }
        };
        Ok(match msg_type {
            MSG_HELLO => {
                exact(2)?;
                Message::Hello {
                    version: u16::from_le_bytes([body[0], body[1]]),
                }
            }
            MSG_HELLO_ACK => {
                exact(14)?;
                Message::HelloAck {
                    version: u16::from_le_bytes([body[0], body[1]]),
                    n_items: u64::from_le_bytes(body[2..10].try_into().unwrap()),
                    record_len: u32::from_le_bytes(body[10..14].try_into().unwrap()),
                }
            }
            MSG_QUERY => Message::Query { key: body },
            MSG_RESPONSE => Message::Response { subresult: body },
            MSG_ERROR => {
                if body.len() < 2 {
                    return Err(Error::format(at, "ERROR body shorter than its code"));
                }
                let message = String::from_utf8(body[2..].to_vec())
                    .map_err(|_| Error::format(at + 2, "ERROR message is not UTF-8"))?;
                Message::Error {
                    code: u16::from_le_bytes([body[0], body[1]]),
                    message,
                }
            }
            other => return Err(Error::format(4, format!("unknown message type {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub query_id: u64,
    pub message: Message,
}

struct Header {
    len: u32,
    msg_type: u8,
    query_id: u64,
}

fn parse_header(h: &[u8; FRAME_HEADER_LEN]) -> Result<Header> {
    let len = u32::from_le_bytes(h[0..4].try_into().unwrap());
    if len > FRAME_CAP {
        return Err(Error::format(
            0,
            format!("frame body of {len} bytes exceeds the {FRAME_CAP}-byte cap"),
        ));
    }
    Ok(Header {
        len,
        msg_type: h[4],
        query_id: u64::from_le_bytes(h[5..13].try_into().unwrap()),
    })
}

impl Frame {
    pub fn new(query_id: u64, message: Message) -> Self {
        Frame { query_id, message }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let body = self.message.body();
        if body.len() > FRAME_CAP as usize {
            return Err(Error::Protocol(format!(
                "frame body of {} bytes exceeds the {FRAME_CAP}-byte cap",
                body.len()
            )));
        }
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.push(self.message.msg_type());
        out.extend_from_slice(&self.query_id.to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let header: &[u8; FRAME_HEADER_LEN] = bytes
            .get(..FRAME_HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| Error::format(bytes.len() as u64, "truncated frame header"))?;
        let h = parse_header(header)?;
        let body = &bytes[FRAME_HEADER_LEN..];
        if body.len() != h.len as usize {
            return Err(Error::format(
                FRAME_HEADER_LEN as u64,
                format!("header announces {} body bytes, {} present", h.len, body.len()),
            ));
        }
        Ok(Frame {
            query_id: h.query_id,
            message: Message::from_body(h.msg_type, body.to_vec())?,
        })
    }

    /// Reads one frame. `Ok(None)` means the peer closed the stream cleanly
    /// between frames.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        let mut got = 0;
        while got < FRAME_HEADER_LEN {
            match r.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(Error::format(got as u64, "stream ended inside a frame header")),
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        // The cap is checked before the body buffer is allocated.
        let h = parse_header(&header)?;
        let mut body = vec![0u8; h.len as usize];
        r.read_exact(&mut body).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::format(FRAME_HEADER_LEN as u64, "stream ended inside a frame body"),
            _ => e.into(),
        })?;
        Ok(Some(Frame {
            query_id: h.query_id,
            message: Message::from_body(h.msg_type, body)?,
        }))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode()?)?;
        Ok(())
    }
}

/// Wire error code for a failure while answering a query.
pub fn error_code(e: &Error) -> u16 {
    match e {
        Error::Protocol(_) | Error::Domain(_) => ERR_DOMAIN_MISMATCH,
        Error::Format { .. } => ERR_MALFORMED,
        _ => ERR_INTERNAL,
    }
}

fn error_frame(query_id: u64, code: u16, message: impl Into<String>) -> Frame {
    Frame::new(
        query_id,
        Message::Error {
            code,
            message: message.into(),
        },
    )
}

/// A running accept loop. Dropping it stops accepting new connections;
/// open connections finish on their own.
pub struct ServeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServeHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds `addr` and serves `server` on a background accept thread, one
/// handler thread per connection.
pub fn serve(server: Arc<Server>, addr: impl ToSocketAddrs) -> Result<ServeHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = thread::Builder::new().name("accept".into()).spawn(move || {
        for stream in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let server = Arc::clone(&server);
            let _ = thread::Builder::new().name("conn".into()).spawn(move || {
                // A panicking handler takes down only its own connection.
                let _ = catch_unwind(AssertUnwindSafe(|| handle_connection(&server, stream)));
            });
        }
    })?;
    Ok(ServeHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn handle_connection(server: &Server, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else { return };
    let (direct_tx, direct_rx) = unbounded::<Frame>();
    let (done_tx, done_rx) = unbounded::<Completion>();
    let writer = thread::spawn(move || write_loop(write_half, direct_rx, done_rx));

    let mut reader = BufReader::new(&stream);
    loop {
        let frame = match Frame::read_from(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(Error::Transport(_)) => break,
            Err(e) => {
                let _ = direct_tx.send(error_frame(0, ERR_MALFORMED, e.to_string()));
                break;
            }
        };
        let id = frame.query_id;
        let reply = match frame.message {
            Message::Hello { version } if version == PROTOCOL_VERSION => Frame::new(
                id,
                Message::HelloAck {
                    version: PROTOCOL_VERSION,
                    n_items: server.db().n_items(),
                    record_len: server.db().record_len() as u32,
                },
            ),
            Message::Hello { version } => error_frame(
                id,
                ERR_UNSUPPORTED_VERSION,
                format!("protocol version {version} is not supported, expected {PROTOCOL_VERSION}"),
            ),
            Message::Query { key } => match DpfKey::from_bytes(&key) {
                Err(e) => error_frame(id, ERR_MALFORMED, e.to_string()),
                Ok(key) => match server.submit(Request::Key(key), id, &done_tx) {
                    Ok(_) => continue,
                    Err(e) => error_frame(id, error_code(&e), e.to_string()),
                },
            },
            other => {
                let _ = direct_tx.send(error_frame(
                    id,
                    ERR_MALFORMED,
                    format!("clients may not send message type {}", other.msg_type()),
                ));
                break;
            }
        };
        if direct_tx.send(reply).is_err() {
            break;
        }
    }
    drop(direct_tx);
    drop(done_tx);
    // Pending queries still hold reply senders; the writer exits once they
    // have all been answered.
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
}

fn completion_frame(c: Completion) -> Frame {
    match c.result {
        Ok(s) => Frame::new(
            c.tag,
            Message::Response {
                subresult: s.into_bytes(),
            },
        ),
        Err(e) => error_frame(c.tag, error_code(&e), e.to_string()),
    }
}

enum Outgoing {
    Frame(Frame),
    DirectClosed,
    DoneClosed,
}

fn write_loop(stream: TcpStream, mut direct: Receiver<Frame>, mut done: Receiver<Completion>) {
    let mut w = BufWriter::new(stream);
    let mut open = 2;
    while open > 0 {
        let next = select! {
            recv(direct) -> f => f.map_or(Outgoing::DirectClosed, Outgoing::Frame),
            recv(done) -> c => c.map_or(Outgoing::DoneClosed, |c| Outgoing::Frame(completion_frame(c))),
        };
        match next {
            Outgoing::DirectClosed => {
                direct = never();
                open -= 1;
            }
            Outgoing::DoneClosed => {
                done = never();
                open -= 1;
            }
            Outgoing::Frame(frame) => {
                if frame.write_to(&mut w).is_err() {
                    return;
                }
                // Batch writes while more answers are already waiting.
                if direct.is_empty() && done.is_empty() && w.flush().is_err() {
                    return;
                }
            }
        }
    }
    let _ = w.flush();
}

/// What a server announced in its HELLO_ACK.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ServerInfo {
    pub version: u16,
    pub n_items: u64,
    pub record_len: u32,
}

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_IO_TIMEOUT: Duration = Duration::from_secs(600);

/// A client connection that has completed the HELLO exchange.
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    info: ServerInfo,
}

fn remote(code: u16, message: String) -> Error {
    Error::Remote { code, msg: message }
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        Connection::connect_timeout(addr, DEFAULT_CONNECT_TIMEOUT, DEFAULT_IO_TIMEOUT)
    }

    pub fn connect_timeout(addr: impl ToSocketAddrs, connect: Duration, io_timeout: Duration) -> Result<Self> {
        let mut last = None;
        let mut stream = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, connect) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let stream = stream.ok_or_else(|| {
            Error::Transport(
                last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing")),
            )
        })?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(io_timeout))?;
        stream.set_write_timeout(Some(io_timeout))?;
        let mut conn = Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            info: ServerInfo {
                version: 0,
                n_items: 0,
                record_len: 0,
            },
        };
        conn.send(&Frame::new(
            0,
            Message::Hello {
                version: PROTOCOL_VERSION,
            },
        ))?;
        conn.flush()?;
        conn.info = match conn.recv()?.message {
            Message::HelloAck {
                version,
                n_items,
                record_len,
            } => ServerInfo {
                version,
                n_items,
                record_len,
            },
            Message::Error { code, message } => return Err(remote(code, message)),
            other => {
                return Err(Error::Protocol(format!(
                    "expected HELLO_ACK, got message type {}",
                    other.msg_type()
                )))
            }
        };
        Ok(conn)
    }

    pub fn info(&self) -> ServerInfo {
        self.info
    }

    /// Buffers a frame; call [`flush`](Self::flush) to put it on the wire.
    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        frame.write_to(&mut self.writer)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }

    pub fn send_query(&mut self, query_id: u64, key: &DpfKey) -> Result<()> {
        self.send(&Frame::new(query_id, Message::Query { key: key.to_bytes() }))
    }

    pub fn recv(&mut self) -> Result<Frame> {
        Frame::read_from(&mut self.reader)?.ok_or_else(|| {
            Error::Transport(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            ))
        })
    }

    /// Reads the next answer: `(query_id, subresult bytes)`. ERROR frames
    /// become [`Error::Remote`].
    pub fn recv_response(&mut self) -> Result<(u64, Vec<u8>)> {
        let frame = self.recv()?;
        match frame.message {
            Message::Response { subresult } => Ok((frame.query_id, subresult)),
            Message::Error { code, message } => Err(remote(code, message)),
            other => Err(Error::Protocol(format!(
                "expected RESPONSE, got message type {}",
                other.msg_type()
            ))),
        }
    }
}

/// Opens a connection, sends one frame and returns the first reply.
pub fn request(addr: impl ToSocketAddrs, frame: &Frame) -> Result<Frame> {
    let mut conn = Connection::connect(addr)?;
    conn.send(frame)?;
    conn.flush()?;
    conn.recv()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dpf::{gen, DomainParams, PointFunction};

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            any::<u16>().prop_map(|version| Message::Hello { version }),
            (any::<u16>(), any::<u64>(), any::<u32>()).prop_map(|(version, n_items, record_len)| Message::HelloAck {
                version,
                n_items,
                record_len
            }),
            proptest::collection::vec(any::<u8>(), 0..300).prop_map(|key| Message::Query { key }),
            proptest::collection::vec(any::<u8>(), 0..300).prop_map(|subresult| Message::Response { subresult }),
            (any::<u16>(), ".{0,40}").prop_map(|(code, message)| Message::Error { code, message }),
        ]
    }

    proptest! {
        #[test]
        fn frame_round_trip(id in any::<u64>(), m in arb_message()) {
            let f = Frame::new(id, m);
            let bytes = f.encode().unwrap();
            prop_assert_eq!(&Frame::decode(&bytes).unwrap(), &f);
            prop_assert_eq!(Frame::read_from(&mut &bytes[..]).unwrap().unwrap(), f);
        }
    }

    #[test]
    fn hello_layout() {
        let bytes = Frame::new(7, Message::Hello { version: 1 }).encode().unwrap();
        assert_eq!(bytes, [2, 0, 0, 0, 1, 7, 0, 0, 0, 0, 0, 0, 0, 1, 0]);
    }

    #[test]
    fn query_body_is_key_blob() {
        let (k, _) = gen(DomainParams::new(4).unwrap(), PointFunction::indicator(1), [0; 32]).unwrap();
        let bytes = Frame::new(1, Message::Query { key: k.to_bytes() }).encode().unwrap();
        assert_eq!(bytes.len() - FRAME_HEADER_LEN, DpfKey::serialized_len(2));
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()), 82);
    }

    #[test]
    fn oversize_rejected_before_allocation() {
        let mut header = vec![0u8; FRAME_HEADER_LEN];
        header[..4].copy_from_slice(&u32::MAX.to_le_bytes());
        header[4] = MSG_QUERY;
        // No body follows: a reader that trusted the length would block or
        // try to allocate 4 GiB.
        assert!(matches!(
            Frame::read_from(&mut &header[..]),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(Frame::decode(&header).is_err());
    }

    #[test]
    fn decode_errors() {
        let good = Frame::new(1, Message::Hello { version: 1 }).encode().unwrap();
        assert!(Frame::decode(&good[..10]).is_err());
        assert!(Frame::decode(&good[..14]).is_err());
        assert!(matches!(Frame::read_from(&mut &good[..14]), Err(Error::Format { .. })));
        assert!(matches!(Frame::read_from(&mut &good[..5]), Err(Error::Format { .. })));
        assert!(Frame::read_from(&mut &[][..]).unwrap().is_none());
        let mut unknown = good.clone();
        unknown[4] = 9;
        assert!(Frame::decode(&unknown).is_err());
        let mut bad_hello = good.clone();
        bad_hello[0] = 3;
        bad_hello.push(0);
        assert!(Frame::decode(&bad_hello).is_err());
        let bad_utf8 = [3, 0, 0, 0, MSG_ERROR, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0xff];
        assert!(Frame::decode(&bad_utf8).is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(error_code(&Error::Protocol("x".into())), ERR_DOMAIN_MISMATCH);
        assert_eq!(error_code(&Error::format(0, "x")), ERR_MALFORMED);
        assert_eq!(error_code(&Error::Internal("x".into())), ERR_INTERNAL);
    }
}
