//! Channels between threads of one process, carrying encoded frames.

use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;

use super::{Delivery, Endpoint, Link, TransportOptions, WireStats};

struct ChannelLink {
    from: usize,
    tx: Sender<Delivery>,
}

impl Link for ChannelLink {
    fn send(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.tx
            .send(Delivery::Frame {
                from: self.from,
                bytes: bytes.to_vec(),
            })
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "peer endpoint dropped"))
    }
}

/// A fully connected set of `n` endpoints sharing one stats counter.
pub fn mesh(n: usize, opts: &TransportOptions) -> Vec<Endpoint> {
    let stats = Arc::new(WireStats::default());
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| channel()).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(me, rx)| {
            let links = (0..n)
                .map(|to| {
                    (to != me).then(|| {
                        Box::new(ChannelLink {
                            from: me,
                            tx: txs[to].clone(),
                        }) as Box<dyn Link>
                    })
                })
                .collect();
            Endpoint::new(me, links, rx, txs[me].clone(), stats.clone(), opts.clone())
        })
        .collect()
}
