//! Reliable, ordered point-to-point delivery between the server (node 0) and
//! hospitals (nodes `1..=K`). Every message crosses the transport in its wire
//! encoding, so both implementations exercise the same byte format.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

use super::wire::{MessageType, RoundMessage};

pub type NodeId = u16;
pub const SERVER: NodeId = 0;

/// Largest frame accepted from a socket.
pub const MAX_FRAME: u64 = 1 << 32;

pub trait Transport: Send {
    fn id(&self) -> NodeId;
    fn send(&mut self, to: NodeId, msg: &RoundMessage) -> Result<()>;
    /// Next inbound message, or a protocol error once `timeout` elapses.
    fn recv(&mut self, timeout: Duration) -> Result<RoundMessage>;
}

fn timed_out(id: NodeId, timeout: Duration) -> Error {
    Error::Protocol(format!("node {id}: no message within {timeout:?}"))
}

fn recv_from(rx: &Receiver<Vec<u8>>, id: NodeId, timeout: Duration) -> Result<RoundMessage> {
    match rx.recv_timeout(timeout) {
        Ok(bytes) => RoundMessage::from_bytes(&bytes),
        Err(RecvTimeoutError::Timeout) => Err(timed_out(id, timeout)),
        Err(RecvTimeoutError::Disconnected) => Err(Error::Protocol(format!(
            "node {id}: all peers disconnected"
        ))),
    }
}

/// In-process endpoint backed by channels.
pub struct LoopbackEndpoint {
    id: NodeId,
    inbox: Receiver<Vec<u8>>,
    peers: HashMap<NodeId, Sender<Vec<u8>>>,
}

/// Endpoints for the server (index 0) and `hospitals` hospitals, fully
/// connected.
pub fn loopback_network(hospitals: u16) -> Vec<LoopbackEndpoint> {
    let (senders, inboxes): (Vec<_>, Vec<_>) = (0..=hospitals).map(|_| mpsc::channel()).unzip();
    inboxes
        .into_iter()
        .enumerate()
        .map(|(id, inbox)| LoopbackEndpoint {
            id: id as NodeId,
            inbox,
            peers: senders
                .iter()
                .enumerate()
                .map(|(j, tx)| (j as NodeId, tx.clone()))
                .collect(),
        })
        .collect()
}

impl Transport for LoopbackEndpoint {
    fn id(&self) -> NodeId {
        self.id
    }

    fn send(&mut self, to: NodeId, msg: &RoundMessage) -> Result<()> {
        let tx = self
            .peers
            .get(&to)
            .ok_or_else(|| Error::Protocol(format!("unknown destination {to}")))?;
        tx.send(msg.to_bytes())
            .map_err(|_| Error::Protocol(format!("node {to} has gone away")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<RoundMessage> {
        recv_from(&self.inbox, self.id, timeout)
    }
}

fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Drains a socket into a channel so that senders never block on a peer
/// that is not currently reading.
fn spawn_reader(stream: TcpStream, tx: Sender<Vec<u8>>) {
    thread::spawn(move || {
        let mut r = BufReader::new(stream);
        while let Ok(frame) = read_frame(&mut r) {
            if tx.send(frame).is_err() {
                break;
            }
        }
    });
}

/// Server side of the star topology over TCP.
pub struct TcpServerEndpoint {
    inbox: Receiver<Vec<u8>>,
    writers: HashMap<NodeId, BufWriter<TcpStream>>,
}

/// Hospital side of the star topology over TCP; can only talk to the server.
pub struct TcpHospitalEndpoint {
    id: NodeId,
    inbox: Receiver<Vec<u8>>,
    writer: BufWriter<TcpStream>,
}

/// Accepts `hospitals` connections. Each hospital introduces itself with an
/// empty `PublicKey` message carrying its node id.
pub fn tcp_accept(
    listener: &TcpListener,
    hospitals: u16,
    timeout: Duration,
) -> Result<TcpServerEndpoint> {
    let deadline = Instant::now() + timeout;
    listener.set_nonblocking(true)?;
    let (tx, inbox) = mpsc::channel();
    let mut writers = HashMap::new();
    while writers.len() < hospitals as usize {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                let remaining = deadline.saturating_duration_since(Instant::now());
                stream.set_read_timeout(Some(remaining.max(Duration::from_millis(1))))?;
                // unbuffered, so no bytes past the hello are consumed here
                let hello = RoundMessage::from_bytes(&read_frame(&mut &stream)?)?;
                if hello.msg_type != MessageType::PublicKey || !hello.payload.is_empty() {
                    return Err(Error::Protocol("expected an empty hello message".into()));
                }
                let id = hello.sender;
                if id == SERVER || id > hospitals || writers.contains_key(&id) {
                    return Err(Error::Protocol(format!("unexpected hospital id {id}")));
                }
                stream.set_read_timeout(None)?;
                spawn_reader(stream.try_clone()?, tx.clone());
                writers.insert(id, BufWriter::new(stream));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Protocol(format!(
                        "only {} of {hospitals} hospitals connected",
                        writers.len()
                    )));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TcpServerEndpoint { inbox, writers })
}

impl TcpHospitalEndpoint {
    pub fn connect(addr: SocketAddr, id: NodeId) -> Result<Self> {
        if id == SERVER {
            return Err(Error::InvalidArgument("hospital ids start at 1".into()));
        }
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut writer = BufWriter::new(stream.try_clone()?);
        write_frame(
            &mut writer,
            &RoundMessage::new(MessageType::PublicKey, 0, id, Vec::new()).to_bytes(),
        )?;
        let (tx, inbox) = mpsc::channel();
        spawn_reader(stream, tx);
        Ok(Self { id, inbox, writer })
    }
}

impl Transport for TcpServerEndpoint {
    fn id(&self) -> NodeId {
        SERVER
    }

    fn send(&mut self, to: NodeId, msg: &RoundMessage) -> Result<()> {
        let w = self
            .writers
            .get_mut(&to)
            .ok_or_else(|| Error::Protocol(format!("hospital {to} is not connected")))?;
        Ok(write_frame(w, &msg.to_bytes())?)
    }

    fn recv(&mut self, timeout: Duration) -> Result<RoundMessage> {
        recv_from(&self.inbox, SERVER, timeout)
    }
}

impl Transport for TcpHospitalEndpoint {
    fn id(&self) -> NodeId {
        self.id
    }

    fn send(&mut self, to: NodeId, msg: &RoundMessage) -> Result<()> {
        if to != SERVER {
            return Err(Error::Protocol(format!(
                "hospital {} can only reach the server, not node {to}",
                self.id
            )));
        }
        Ok(write_frame(&mut self.writer, &msg.to_bytes())?)
    }

    fn recv(&mut self, timeout: Duration) -> Result<RoundMessage> {
        recv_from(&self.inbox, self.id, timeout)
    }
}

/// Server endpoint plus `hospitals` connected hospital endpoints on an
/// ephemeral localhost port.
pub fn tcp_network(
    hospitals: u16,
    timeout: Duration,
) -> Result<(TcpServerEndpoint, Vec<TcpHospitalEndpoint>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let connector = thread::spawn(move || -> Result<Vec<TcpHospitalEndpoint>> {
        (1..=hospitals)
            .map(|id| TcpHospitalEndpoint::connect(addr, id))
            .collect()
    });
    let server = tcp_accept(&listener, hospitals, timeout)?;
    let clients = connector
        .join()
        .map_err(|_| Error::Protocol("connector thread panicked".into()))??;
    Ok((server, clients))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(t: MessageType, round: u32, sender: u16, n: usize) -> RoundMessage {
        RoundMessage::new(
            t,
            round,
            sender,
            (0..n).map(|i| (i * 7 + round as usize) as u8).collect(),
        )
    }

    #[test]
    fn loopback_delivers_in_order() {
        let mut net = loopback_network(2);
        let mut h2 = net.pop().unwrap();
        let mut h1 = net.pop().unwrap();
        let mut server = net.pop().unwrap();
        for r in 0..5 {
            h1.send(SERVER, &msg(MessageType::EncryptedUpdate, r, 1, 100))
                .unwrap();
        }
        h2.send(SERVER, &msg(MessageType::EncryptedUpdate, 0, 2, 3))
            .unwrap();
        let mut from1 = Vec::new();
        for _ in 0..6 {
            let m = server.recv(Duration::from_secs(1)).unwrap();
            if m.sender == 1 {
                from1.push(m.round);
            }
        }
        assert_eq!(from1, vec![0, 1, 2, 3, 4]);
        assert!(server.recv(Duration::from_millis(10)).is_err());
        server
            .send(2, &msg(MessageType::ModelBroadcast, 1, 0, 4))
            .unwrap();
        assert_eq!(
            h2.recv(Duration::from_secs(1)).unwrap(),
            msg(MessageType::ModelBroadcast, 1, 0, 4)
        );
        assert!(h1.send(9, &msg(MessageType::PublicKey, 0, 1, 0)).is_err());
    }

    #[test]
    fn tcp_round_trip_large_frames() {
        let (mut server, mut hospitals) = tcp_network(3, Duration::from_secs(10)).unwrap();
        for h in hospitals.iter_mut() {
            let m = msg(MessageType::EncryptedUpdate, 4, h.id(), 200_000);
            h.send(SERVER, &m).unwrap();
        }
        let mut seen: Vec<u16> = (0..3)
            .map(|_| {
                let m = server.recv(Duration::from_secs(10)).unwrap();
                assert_eq!(m, msg(MessageType::EncryptedUpdate, 4, m.sender, 200_000));
                m.sender
            })
            .collect();
        seen.sort();
        assert_eq!(seen, vec![1, 2, 3]);
        for id in 1..=3 {
            server
                .send(id, &msg(MessageType::EncryptedAggregate, 4, 0, 77))
                .unwrap();
        }
        for h in hospitals.iter_mut() {
            assert_eq!(
                h.recv(Duration::from_secs(10)).unwrap(),
                msg(MessageType::EncryptedAggregate, 4, 0, 77)
            );
            assert!(h.send(2, &msg(MessageType::PublicKey, 0, 1, 0)).is_err());
        }
    }

    #[test]
    fn tcp_accept_times_out_when_hospitals_are_missing() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let _one = thread::spawn(move || TcpHospitalEndpoint::connect(addr, 1));
        let err = tcp_accept(&listener, 2, Duration::from_millis(300));
        assert!(matches!(err, Err(Error::Protocol(_))));
    }
}
