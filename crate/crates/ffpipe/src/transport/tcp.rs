//! TCP mesh: one connection per pair of endpoints, a reader thread per
//! connection feeding the endpoint's inbox.
//!
//! Endpoint `k` dials every higher endpoint and accepts from every lower
//! one. The dialing side opens with a `Hello` control frame naming itself.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ffpipe_core::wire::{Control, ControlKind, Frame, Message, HEADER_LEN, TRAILER_LEN};

use super::{Delivery, Endpoint, Link, TransportOptions, WireStats};
use crate::error::{PipeError, Result};

struct StreamLink(TcpStream);

impl Link for StreamLink {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)
    }
}

impl Drop for StreamLink {
    fn drop(&mut self) {
        // lets the peer's reader see end-of-stream once our data is out
        let _ = self.0.shutdown(Shutdown::Write);
    }
}

/// Reads one whole frame; `Ok(None)` on a clean end-of-stream.
fn read_frame(stream: &mut TcpStream) -> io::Result<Option<Vec<u8>>> {
    let mut buf = vec![0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match stream.read(&mut buf[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            k => got += k,
        }
    }
    let (_, len) = Frame::parse_header(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    buf.resize(HEADER_LEN + len + TRAILER_LEN, 0);
    stream.read_exact(&mut buf[HEADER_LEN..])?;
    Ok(Some(buf))
}

fn spawn_reader(mut stream: TcpStream, from: usize, tx: Sender<Delivery>) {
    thread::spawn(move || loop {
        match read_frame(&mut stream) {
            Ok(Some(bytes)) => {
                if tx.send(Delivery::Frame { from, bytes }).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) => {
                let _ = tx.send(Delivery::Broken {
                    from,
                    reason: e.to_string(),
                });
                return;
            }
        }
    });
}

fn dial(me: usize, to: usize, addr: SocketAddr, deadline: Instant, started: Instant) -> Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                return Err(PipeError::Timeout {
                    node: me,
                    secs: started.elapsed().as_secs_f64(),
                    what: format!("node {to} at {addr} to accept a connection (last error: {e})"),
                })
            }
        }
    }
}

fn hello_from(me: usize, stream: &mut TcpStream, timeout: Duration) -> Result<usize> {
    let bad = |msg: String| PipeError::Protocol { node: me, msg };
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| bad(e.to_string()))?;
    let bytes = read_frame(stream)
        .map_err(|e| bad(format!("reading hello: {e}")))?
        .ok_or_else(|| bad("connection closed before hello".into()))?;
    stream.set_read_timeout(None).map_err(|e| bad(e.to_string()))?;
    match Message::<f32>::decode(&bytes)? {
        Message::Control(Control {
            kind: ControlKind::Hello,
            node,
            ..
        }) => Ok(node as usize),
        other => Err(bad(format!("expected hello, got {:?}", other.msg_type()))),
    }
}

/// Joins the mesh as endpoint `me`. `listener` must already be bound to
/// `addrs[me]`; the other addresses are dialed with retries until the
/// transport timeout.
pub fn connect_mesh(
    me: usize,
    addrs: &[SocketAddr],
    listener: TcpListener,
    stats: Arc<WireStats>,
    opts: &TransportOptions,
) -> Result<Endpoint> {
    let n = addrs.len();
    let started = Instant::now();
    let deadline = started + opts.timeout;
    let tio = |e: io::Error| PipeError::Transport {
        node: me,
        msg: e.to_string(),
    };
    let (tx, rx) = channel();
    let mut streams: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();

    let hello = Message::<f32>::Control(Control {
        kind: ControlKind::Hello,
        node: me as u16,
        text: String::new(),
    })
    .encode()?;
    for (to, &addr) in addrs.iter().enumerate().skip(me + 1) {
        let mut s = dial(me, to, addr, deadline, started)?;
        s.set_nodelay(true).map_err(tio)?;
        s.write_all(&hello).map_err(tio)?;
        streams[to] = Some(s);
    }

    listener.set_nonblocking(true).map_err(tio)?;
    while streams[..me].iter().any(Option::is_none) {
        match listener.accept() {
            Ok((mut s, _)) => {
                s.set_nonblocking(false).map_err(tio)?;
                s.set_nodelay(true).map_err(tio)?;
                let from = hello_from(me, &mut s, opts.timeout)?;
                if from >= me || streams[from].is_some() {
                    return Err(PipeError::Protocol {
                        node: me,
                        msg: format!("unexpected hello from node {from}"),
                    });
                }
                streams[from] = Some(s);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing: Vec<usize> = (0..me).filter(|&j| streams[j].is_none()).collect();
                    return Err(PipeError::Timeout {
                        node: me,
                        secs: started.elapsed().as_secs_f64(),
                        what: format!("connections from nodes {missing:?}"),
                    });
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(tio(e)),
        }
    }

    let mut links: Vec<Option<Box<dyn Link>>> = Vec::with_capacity(n);
    for (from, s) in streams.into_iter().enumerate() {
        match s {
            Some(s) => {
                spawn_reader(s.try_clone().map_err(tio)?, from, tx.clone());
                links.push(Some(Box::new(StreamLink(s))));
            }
            None => links.push(None),
        }
    }
    Ok(Endpoint::new(me, links, rx, tx, stats, opts.clone()))
}

/// Binds `n` listeners on ephemeral loopback ports.
pub fn loopback_listeners(n: usize) -> Result<(Vec<TcpListener>, Vec<SocketAddr>)> {
    let mut ls = Vec::with_capacity(n);
    let mut addrs = Vec::with_capacity(n);
    for _ in 0..n {
        let l = TcpListener::bind("127.0.0.1:0").map_err(|e| PipeError::Transport {
            node: 0,
            msg: format!("binding loopback listener: {e}"),
        })?;
        addrs.push(l.local_addr().map_err(|e| PipeError::Transport {
            node: 0,
            msg: e.to_string(),
        })?);
        ls.push(l);
    }
    Ok((ls, addrs))
}

/// A loopback mesh of `n` endpoints, each joined from its own thread.
pub fn loopback_mesh(n: usize, opts: &TransportOptions) -> Result<Vec<Endpoint>> {
    let (listeners, addrs) = loopback_listeners(n)?;
    let stats = Arc::new(WireStats::default());
    let handles: Vec<_> = listeners
        .into_iter()
        .enumerate()
        .map(|(me, l)| {
            let (addrs, stats, opts) = (addrs.clone(), stats.clone(), opts.clone());
            thread::spawn(move || connect_mesh(me, &addrs, l, stats, &opts))
        })
        .collect();
    handles
        .into_iter()
        .map(|h| h.join().expect("mesh thread panicked"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ffpipe_core::wire::{MsgType, NegLabels};

    #[test]
    fn loopback_delivers_and_counts() {
        let mut eps = loopback_mesh(3, &TransportOptions::default()).unwrap();
        let msg = |chapter| {
            Message::<f64>::Neg(NegLabels {
                chapter,
                num_classes: 10,
                labels: vec![3; 100],
            })
        };
        eps[0].send(2, &msg(5)).unwrap();
        eps[1].send(2, &msg(6)).unwrap();
        assert_eq!(eps[2].get_negatives(6, 1).unwrap().labels, vec![3; 100]);
        assert_eq!(eps[2].get_negatives(5, 0).unwrap().chapter, 5);
        assert_eq!(eps[2].stats().frames(MsgType::NegLabels), 2);
    }

    #[test]
    fn missing_peer_times_out_naming_it() {
        let (mut ls, addrs) = loopback_listeners(2).unwrap();
        drop(ls.pop());
        let opts = TransportOptions {
            timeout: Duration::from_millis(300),
            jitter: None,
        };
        let err = connect_mesh(0, &addrs, ls.pop().unwrap(), Arc::default(), &opts).err().unwrap();
        assert!(err.to_string().contains("node 1"), "{err}");
    }
}
