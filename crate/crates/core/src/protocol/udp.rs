use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};

use super::{Datagram, SenderId, Transport};
use crate::geometry::Timestamp;

/// Plain datagram socket behind the [`Transport`] interface. Sender ids are
/// assigned to source addresses in order of first contact. The simulation
/// clock argument is ignored; the socket delivers whatever has arrived.
#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    peer: Option<SocketAddr>,
    senders: HashMap<SocketAddr, SenderId>,
    buf: Vec<u8>,
}

impl UdpTransport {
    pub fn bind(local: impl ToSocketAddrs, peer: Option<SocketAddr>) -> io::Result<Self> {
        let socket = UdpSocket::bind(local)?;
        socket.set_nonblocking(true)?;
        Ok(UdpTransport {
            socket,
            peer,
            senders: HashMap::new(),
            buf: vec![0u8; 2048],
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    fn sender_id(&mut self, addr: SocketAddr) -> SenderId {
        let next = self.senders.len() as SenderId;
        *self.senders.entry(addr).or_insert(next)
    }
}

impl Transport for UdpTransport {
    fn send(&mut self, _now: Timestamp, datagram: Datagram) -> io::Result<()> {
        let peer = self
            .peer
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "no peer address configured"))?;
        self.socket.send_to(&datagram.bytes, peer)?;
        Ok(())
    }

    fn poll(&mut self, _now: Timestamp) -> io::Result<Vec<Datagram>> {
        let mut out = Vec::new();
        loop {
            match self.socket.recv_from(&mut self.buf) {
                Ok((n, addr)) => {
                    let bytes = self.buf[..n].to_vec();
                    let sender = self.sender_id(addr);
                    out.push(Datagram { sender, bytes });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}
