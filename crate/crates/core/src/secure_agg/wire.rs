//! Byte-exact envelope for protocol messages and the payload codecs for
//! public keys, models and chunked ciphertext updates.
//!
//! Envelope layout (all integers little-endian):
//!
//! | offset | size | field         |
//! |--------|------|---------------|
//! | 0      | 4    | magic `DOPM`  |
//! | 4      | 1    | version       |
//! | 5      | 1    | message type  |
//! | 6      | 4    | round         |
//! | 10     | 2    | sender        |
//! | 12     | 8    | payload length|
//! | 20     | n    | payload       |

use dpfed_he::{Bfv, Ciphertext, PublicKey};

use crate::error::{Error, Result};
use crate::model::{LayerShape, ModelParams};

use super::ChunkedUpdate;

pub const MAGIC: [u8; 4] = *b"DOPM";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    PublicKey = 0,
    ModelBroadcast = 1,
    EncryptedUpdate = 2,
    EncryptedAggregate = 3,
    FinalPlainUpdate = 4,
}

impl MessageType {
    pub const ALL: [MessageType; 5] = [
        MessageType::PublicKey,
        MessageType::ModelBroadcast,
        MessageType::EncryptedUpdate,
        MessageType::EncryptedAggregate,
        MessageType::FinalPlainUpdate,
    ];

    pub fn from_u8(b: u8) -> Result<Self> {
        Self::ALL
            .get(b as usize)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("unknown message type {b}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundMessage {
    pub msg_type: MessageType,
    pub round: u32,
    pub sender: u16,
    pub payload: Vec<u8>,
}

impl RoundMessage {
    pub fn new(msg_type: MessageType, round: u32, sender: u16, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            round,
            sender,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(WIRE_VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol(format!(
                "message of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Protocol("bad magic".into()));
        }
        if bytes[4] != WIRE_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported wire version {}",
                bytes[4]
            )));
        }
        let msg_type = MessageType::from_u8(bytes[5])?;
        let round = u32::from_le_bytes(bytes[6..10].try_into().expect("sized"));
        let sender = u16::from_le_bytes(bytes[10..12].try_into().expect("sized"));
        let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("sized"));
        if payload_len != (bytes.len() - HEADER_LEN) as u64 {
            return Err(Error::Protocol(format!(
                "payload length field {payload_len} does not match {} payload bytes",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Self {
            msg_type,
            round,
            sender,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Protocol("truncated payload".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("sized")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("sized")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Protocol(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Layer count (`u32`), then per layer: name length (`u16`), UTF-8 name,
/// rank (`u32`), dims (`u64` each); then weight count (`u64`) and weights as
/// `f64` bit patterns.
pub fn encode_model(model: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * model.len());
    out.extend_from_slice(&(model.shape().len() as u32).to_le_bytes());
    for layer in model.shape() {
        out.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
        out.extend_from_slice(layer.name.as_bytes());
        out.extend_from_slice(&(layer.dims.len() as u32).to_le_bytes());
        for &d in &layer.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.len() as u64).to_le_bytes());
    for v in model.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    let layers = r.u32()? as usize;
    let mut shape = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Protocol("layer name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        shape.push(LayerShape { name, dims });
    }
    let n = r.u64()? as usize;
    let raw = r.take(
        n.checked_mul(8)
            .ok_or_else(|| Error::Protocol("weight count overflows".into()))?,
    )?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("sized")))
        .collect();
    r.finish()?;
    ModelParams::new(values, shape).map_err(|e| Error::Protocol(format!("bad model payload: {e}")))
}

pub fn encode_public_key(pk: &PublicKey) -> Vec<u8> {
    pk.to_bytes()
}

pub fn decode_public_key(bytes: &[u8], bfv: &Bfv) -> Result<PublicKey> {
    bfv.public_key_from_bytes(bytes)
        .map_err(|e| Error::Protocol(format!("bad public key payload: {e}")))
}

/// Original length (`u64`), chunk count (`u32`), then each ciphertext in its
/// own serialized form.
pub fn encode_update(update: &ChunkedUpdate) -> Vec<u8> {
    let per = update
        .chunks
        .first()
        .map_or(0, |c| Ciphertext::serialized_len(c.c0().len()));
    let mut out = Vec::with_capacity(12 + per * update.chunks.len());
    out.extend_from_slice(&(update.original_len as u64).to_le_bytes());
    out.extend_from_slice(&(update.num_chunks as u32).to_le_bytes());
    for ct in &update.chunks {
        ct.write_to(&mut out);
    }
    out
}

pub fn decode_update(bytes: &[u8], bfv: &Bfv) -> Result<ChunkedUpdate> {
    let params = bfv.params();
    let mut r = Reader::new(bytes);
    let original_len = r.u64()? as usize;
    let num_chunks = r.u32()? as usize;
    let per = Ciphertext::serialized_len(params.degree());
    let mut chunks = Vec::with_capacity(num_chunks.min(1 << 16));
    for _ in 0..num_chunks {
        let ct = Ciphertext::from_bytes(r.take(per)?, params)
            .map_err(|e| Error::Protocol(format!("bad ciphertext: {e}")))?;
        chunks.push(ct);
    }
    r.finish()?;
    ChunkedUpdate::new(original_len, chunks, params.degree())
}
