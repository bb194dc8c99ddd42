//! Secure aggregation of hospital models under BFV.
//!
//! Each round, hospitals fixed-point encode their flattened model, pack it
//! into `d`-slot chunks and encrypt under a shared public key. The server
//! adds the ciphertexts it receives without ever holding the secret key and
//! returns the encrypted sum; hospitals decrypt it and divide by the number of
//! contributors.
//!
//! Key distribution follows a star topology for the public key (hospital 1
//! generates the pair and sends `pk` to the server, which forwards it) while
//! the secret key travels over a hospital-only side channel that the server
//! is not part of.

pub mod transport;
pub mod wire;

use std::collections::BTreeMap;
use std::time::Duration;

use dpfed_he::{Bfv, Ciphertext, EncryptionParams, FixedPoint, HeError, PublicKey, SecretKey};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::{LayerShape, ModelParams};
use crate::rng::{stream, Stream};

use transport::{loopback_network, tcp_network, NodeId, Transport, SERVER};
use wire::{MessageType, RoundMessage};

/// One hospital's encrypted, chunked model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedUpdate {
    pub original_len: usize,
    pub num_chunks: usize,
    pub chunks: Vec<Ciphertext>,
}

impl ChunkedUpdate {
    pub fn new(original_len: usize, chunks: Vec<Ciphertext>, degree: usize) -> Result<Self> {
        let expected = original_len.div_ceil(degree);
        if chunks.len() != expected {
            return Err(Error::Protocol(format!(
                "{} chunks for {original_len} values, expected {expected}",
                chunks.len()
            )));
        }
        Ok(Self {
            original_len,
            num_chunks: chunks.len(),
            chunks,
        })
    }
}

/// Fixed-point codec sized for `parties` contributors.
pub fn fixed_point(params: &EncryptionParams, parties: usize) -> FixedPoint {
    FixedPoint::new(params, parties.min(u32::MAX as usize) as u32)
}

/// Element-wise fixed-point encoding, keeping the layout for the inverse.
pub fn flatten(model: &ModelParams, fp: &FixedPoint) -> Result<(Vec<i64>, Vec<LayerShape>)> {
    let ints = model
        .values()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            fp.encode(w).map_err(|_| Error::Range {
                coordinate: i,
                value: w,
                limit: fp.max_abs_weight(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ints, model.shape().to_vec()))
}

pub fn unflatten(ints: &[i64], shape: Vec<LayerShape>, fp: &FixedPoint) -> Result<ModelParams> {
    ModelParams::new(ints.iter().map(|&v| fp.decode(v)).collect(), shape)
}

/// Batch-encodes and encrypts `flat` in chunks of `d` slots, zero-padding the
/// last one.
pub fn encrypt_update<R: Rng + ?Sized>(
    flat: &[i64],
    pk: &PublicKey,
    bfv: &Bfv,
    rng: &mut R,
) -> Result<ChunkedUpdate> {
    let d = bfv.params().degree();
    let bound = bfv.params().slot_bound();
    if let Some(i) = flat.iter().position(|v| v.abs() > bound) {
        return Err(Error::Range {
            coordinate: i,
            value: flat[i] as f64,
            limit: bound as f64,
        });
    }
    let chunks = flat
        .chunks(d)
        .map(|slice| {
            let pt = bfv.encoder().encode(slice)?;
            Ok(bfv.encrypt(&pt, pk, rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    ChunkedUpdate::new(flat.len(), chunks, d)
}

/// Chunk-wise homomorphic sum in the given order. Needs no key material.
pub fn aggregate_at_server(updates: &[ChunkedUpdate], bfv: &Bfv) -> Result<ChunkedUpdate> {
    let (first, rest) = updates
        .split_first()
        .ok_or_else(|| Error::Protocol("no updates to aggregate".into()))?;
    let mut acc = first.clone();
    for (i, u) in rest.iter().enumerate() {
        if u.original_len != acc.original_len || u.num_chunks != acc.num_chunks {
            return Err(Error::Protocol(format!(
                "update {} has shape ({}, {} chunks), expected ({}, {} chunks)",
                i + 1,
                u.original_len,
                u.num_chunks,
                acc.original_len,
                acc.num_chunks
            )));
        }
        for (a, b) in acc.chunks.iter_mut().zip(&u.chunks) {
            *a = bfv.add(a, b).map_err(|e| match e {
                HeError::InvalidArgument(m) => Error::Protocol(m),
                other => other.into(),
            })?;
        }
    }
    Ok(acc)
}

/// Decrypted slot sums, truncated to the original length.
pub fn decrypt_sum(agg: &ChunkedUpdate, sk: &SecretKey, bfv: &Bfv) -> Result<Vec<i64>> {
    let mut out = Vec::with_capacity(agg.num_chunks * bfv.params().degree());
    for ct in &agg.chunks {
        out.extend(bfv.encoder().decode(&bfv.decrypt(ct, sk)?));
    }
    out.truncate(agg.original_len);
    Ok(out)
}

/// Decrypt, decode, drop padding, rescale and divide by `active_count`.
pub fn decrypt_aggregate(
    agg: &ChunkedUpdate,
    sk: &SecretKey,
    bfv: &Bfv,
    active_count: usize,
    shape: Vec<LayerShape>,
    fp: &FixedPoint,
) -> Result<ModelParams> {
    if active_count == 0 {
        return Err(Error::InvalidArgument("active_count must be ≥ 1".into()));
    }
    let sums = decrypt_sum(agg, sk, bfv)?;
    let k = active_count as f64;
    ModelParams::new(sums.iter().map(|&s| fp.decode(s) / k).collect(), shape)
}

/// Everything the server holds. It has no field that could carry a secret
/// key.
#[derive(Clone, Debug, Default)]
pub struct ServerState {
    pub public_key: Option<PublicKey>,
    pub round: u32,
    pub received: BTreeMap<NodeId, ChunkedUpdate>,
    pub aggregate: Option<ChunkedUpdate>,
    pub broadcast: Option<ModelParams>,
    pub final_models: BTreeMap<NodeId, ModelParams>,
    pub inbound_bytes: Vec<Vec<u8>>,
}

impl ServerState {
    /// Every byte of state, concatenated, for leak audits.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(pk) = &self.public_key {
            out.extend(pk.to_bytes());
        }
        out.extend(self.round.to_le_bytes());
        for u in self.received.values().chain(&self.aggregate) {
            out.extend(wire::encode_update(u));
        }
        for m in self.broadcast.iter().chain(self.final_models.values()) {
            out.extend(wire::encode_model(m));
        }
        for b in &self.inbound_bytes {
            out.extend_from_slice(b);
        }
        out
    }
}

/// True if any encoding of `sk` appears verbatim in `haystack`.
pub fn contains_secret_key(haystack: &[u8], sk: &SecretKey, params: &EncryptionParams) -> bool {
    let lifted = sk.to_bytes(params);
    let signed: Vec<u8> = sk.coeffs().iter().flat_map(|c| c.to_le_bytes()).collect();
    let narrow: Vec<u8> = sk.coeffs().iter().map(|&c| c as i8 as u8).collect();
    [lifted, signed, narrow].iter().any(|needle| {
        haystack
            .windows(needle.len())
            .any(|w| w == needle.as_slice())
    })
}

type AuditHook = Box<dyn FnMut(&str, &ServerState) + Send>;

pub struct Server<T: Transport> {
    transport: T,
    bfv: Bfv,
    hospitals: u16,
    timeout: Duration,
    state: ServerState,
    keep_inbound: bool,
    audit: Option<AuditHook>,
}

impl<T: Transport> Server<T> {
    pub fn new(transport: T, bfv: Bfv, hospitals: u16, timeout: Duration) -> Self {
        Self {
            transport,
            bfv,
            hospitals,
            timeout,
            state: ServerState::default(),
            keep_inbound: false,
            audit: None,
        }
    }

    /// Calls `hook` with the full server state after every protocol step;
    /// raw inbound messages are retained for the hook to inspect.
    pub fn set_audit(&mut self, hook: AuditHook) {
        self.keep_inbound = true;
        self.audit = Some(hook);
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    fn checkpoint(&mut self, step: &str) {
        if let Some(hook) = self.audit.as_mut() {
            hook(step, &self.state);
        }
    }

    fn recv(&mut self) -> Result<RoundMessage> {
        let m = self.transport.recv(self.timeout)?;
        if self.keep_inbound {
            self.state.inbound_bytes.push(m.to_bytes());
        }
        Ok(m)
    }

    /// Waits for hospital 1's public key and forwards it to every hospital.
    pub fn distribute_public_key(&mut self) -> Result<()> {
        let m = self.recv()?;
        if m.msg_type != MessageType::PublicKey || m.sender != 1 || m.payload.is_empty() {
            return Err(Error::Protocol(format!(
                "expected a public key from hospital 1, got {:?} from {}",
                m.msg_type, m.sender
            )));
        }
        let pk = wire::decode_public_key(&m.payload, &self.bfv)?;
        self.state.public_key = Some(pk);
        self.checkpoint("public key stored");
        let fwd = RoundMessage::new(MessageType::PublicKey, 0, SERVER, m.payload);
        for h in 1..=self.hospitals {
            self.transport.send(h, &fwd)?;
        }
        self.checkpoint("public key forwarded");
        Ok(())
    }

    pub fn broadcast(&mut self, round: u32, model: &ModelParams, to: &[NodeId]) -> Result<()> {
        let msg = RoundMessage::new(
            MessageType::ModelBroadcast,
            round,
            SERVER,
            wire::encode_model(model),
        );
        for &h in to {
            self.transport.send(h, &msg)?;
        }
        self.state.broadcast = Some(model.clone());
        self.checkpoint("model broadcast");
        Ok(())
    }

    /// Round barrier: collects one encrypted update from each of `expected`,
    /// sums them in ascending sender order and returns the sum to each.
    pub fn aggregate_round(&mut self, round: u32, expected: &[NodeId]) -> Result<()> {
        if round < self.state.round {
            return Err(Error::Protocol(format!(
                "round {round} is behind {}",
                self.state.round
            )));
        }
        self.state.round = round;
        self.state.received.clear();
        self.state.aggregate = None;
        while self.state.received.len() < expected.len() {
            let m = self.recv()?;
            if m.msg_type != MessageType::EncryptedUpdate || m.round != round {
                return Err(Error::Protocol(format!(
                    "round {round}: unexpected {:?} for round {} from {}",
                    m.msg_type, m.round, m.sender
                )));
            }
            if !expected.contains(&m.sender) || self.state.received.contains_key(&m.sender) {
                return Err(Error::Protocol(format!(
                    "round {round}: unexpected update from {}",
                    m.sender
                )));
            }
            let update = wire::decode_update(&m.payload, &self.bfv)?;
            self.state.received.insert(m.sender, update);
            self.checkpoint("update received");
        }
        let ordered: Vec<ChunkedUpdate> = self.state.received.values().cloned().collect();
        let agg = aggregate_at_server(&ordered, &self.bfv)?;
        let msg = RoundMessage::new(
            MessageType::EncryptedAggregate,
            round,
            SERVER,
            wire::encode_update(&agg),
        );
        self.state.aggregate = Some(agg);
        self.checkpoint("aggregate computed");
        for &h in expected {
            self.transport.send(h, &msg)?;
        }
        self.checkpoint("aggregate sent");
        Ok(())
    }

    /// Receives the final plaintext models (only used when that step is
    /// enabled).
    pub fn collect_final(&mut self, round: u32, expected: &[NodeId]) -> Result<Vec<ModelParams>> {
        self.state.final_models.clear();
        while self.state.final_models.len() < expected.len() {
            let m = self.recv()?;
            if m.msg_type != MessageType::FinalPlainUpdate
                || m.round != round
                || !expected.contains(&m.sender)
            {
                return Err(Error::Protocol(format!(
                    "expected a final update for round {round}, got {:?} from {}",
                    m.msg_type, m.sender
                )));
            }
            self.state
                .final_models
                .insert(m.sender, wire::decode_model(&m.payload)?);
            self.checkpoint("final model received");
        }
        Ok(self.state.final_models.values().cloned().collect())
    }
}

pub struct Hospital<T: Transport> {
    transport: T,
    bfv: Bfv,
    fp: FixedPoint,
    timeout: Duration,
    rng: ChaCha20Rng,
    public_key: Option<PublicKey>,
    secret_key: Option<SecretKey>,
    last_round: Option<u32>,
}

impl<T: Transport> Hospital<T> {
    /// `parties` sizes the fixed-point headroom; `seed` drives this
    /// hospital's encryption randomness.
    pub fn new(transport: T, bfv: Bfv, parties: usize, seed: u64, timeout: Duration) -> Self {
        let fp = fixed_point(bfv.params(), parties);
        let rng = stream(seed, Stream::Encryption(transport.id() as usize));
        Self {
            transport,
            bfv,
            fp,
            timeout,
            rng,
            public_key: None,
            secret_key: None,
            last_round: None,
        }
    }

    pub fn id(&self) -> NodeId {
        self.transport.id()
    }

    pub fn fixed_point(&self) -> &FixedPoint {
        &self.fp
    }

    pub fn public_key(&self) -> Option<&PublicKey> {
        self.public_key.as_ref()
    }

    pub fn secret_key(&self) -> Option<&SecretKey> {
        self.secret_key.as_ref()
    }

    fn expect(&mut self, t: MessageType, round: u32) -> Result<RoundMessage> {
        let m = self.transport.recv(self.timeout)?;
        if m.msg_type != t || m.round != round || m.sender != SERVER {
            return Err(Error::Protocol(format!(
                "hospital {}: expected {t:?} for round {round} from the server, got {:?} for round {} from {}",
                self.id(),
                m.msg_type,
                m.round,
                m.sender
            )));
        }
        Ok(m)
    }

    fn send(&mut self, t: MessageType, round: u32, payload: Vec<u8>) -> Result<()> {
        if self.last_round.is_some_and(|r| round < r) {
            return Err(Error::Protocol(format!(
                "hospital {}: round {round} went backwards",
                self.id()
            )));
        }
        self.last_round = Some(round);
        let msg = RoundMessage::new(t, round, self.id(), payload);
        self.transport.send(SERVER, &msg)
    }

    fn keys(&self) -> Result<(&PublicKey, &SecretKey)> {
        match (&self.public_key, &self.secret_key) {
            (Some(pk), Some(sk)) => Ok((pk, sk)),
            _ => Err(Error::Protocol(format!(
                "hospital {} has no keys",
                self.id()
            ))),
        }
    }

    pub fn receive_broadcast(&mut self, round: u32) -> Result<ModelParams> {
        let m = self.expect(MessageType::ModelBroadcast, round)?;
        wire::decode_model(&m.payload)
    }

    pub fn submit(&mut self, round: u32, model: &ModelParams) -> Result<()> {
        let (flat, _) = flatten(model, &self.fp)?;
        let pk = self.keys()?.0.clone();
        let update = encrypt_update(&flat, &pk, &self.bfv, &mut self.rng)?;
        self.send(
            MessageType::EncryptedUpdate,
            round,
            wire::encode_update(&update),
        )
    }

    pub fn receive_aggregate(
        &mut self,
        round: u32,
        active_count: usize,
        shape: Vec<LayerShape>,
    ) -> Result<ModelParams> {
        let m = self.expect(MessageType::EncryptedAggregate, round)?;
        let agg = wire::decode_update(&m.payload, &self.bfv)?;
        let sk = self.keys()?.1;
        decrypt_aggregate(&agg, sk, &self.bfv, active_count, shape, &self.fp)
    }

    pub fn send_final(&mut self, round: u32, model: &ModelParams) -> Result<()> {
        self.send(
            MessageType::FinalPlainUpdate,
            round,
            wire::encode_model(model),
        )
    }
}

/// Hospital 1 generates the key pair from `seed`; the public key reaches the
/// server and, through it, every hospital; the secret key is copied to the
/// other hospitals directly.
pub fn run_key_ceremony<S: Transport, H: Transport>(
    server: &mut Server<S>,
    hospitals: &mut [Hospital<H>],
    seed: u64,
) -> Result<()> {
    let first = hospitals
        .iter()
        .position(|h| h.id() == 1)
        .ok_or_else(|| Error::Protocol("hospital 1 is not online".into()))?;
    if hospitals.len() != server.hospitals as usize {
        return Err(Error::Protocol(format!(
            "{} of {} hospitals present for the key ceremony",
            hospitals.len(),
            server.hospitals
        )));
    }
    let (sk, pk) = hospitals[first]
        .bfv
        .keygen(&mut stream(seed, Stream::KeyGen));
    hospitals[first].send(MessageType::PublicKey, 0, wire::encode_public_key(&pk))?;
    server.distribute_public_key()?;
    for h in hospitals.iter_mut() {
        let m = h.expect(MessageType::PublicKey, 0)?;
        h.public_key = Some(wire::decode_public_key(&m.payload, &h.bfv)?);
        h.secret_key = Some(sk.clone());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Loopback,
    Tcp,
}

#[derive(Clone, Debug)]
pub struct SecureAggConfig {
    pub params: EncryptionParams,
    pub transport: TransportKind,
    pub timeout: Duration,
    /// Hospitals send the final decrypted model to the server in the clear.
    pub send_final_plain: bool,
}

impl Default for SecureAggConfig {
    fn default() -> Self {
        Self {
            params: EncryptionParams::default(),
            transport: TransportKind::Loopback,
            timeout: Duration::from_secs(60),
            send_final_plain: false,
        }
    }
}

impl Transport for Box<dyn Transport> {
    fn id(&self) -> NodeId {
        (**self).id()
    }

    fn send(&mut self, to: NodeId, msg: &RoundMessage) -> Result<()> {
        (**self).send(to, msg)
    }

    fn recv(&mut self, timeout: Duration) -> Result<RoundMessage> {
        (**self).recv(timeout)
    }
}

/// A server and `K` hospitals wired over a transport, driven round by round
/// from one thread.
pub struct SecureAggregator {
    server: Server<Box<dyn Transport>>,
    hospitals: Vec<Hospital<Box<dyn Transport>>>,
    config: SecureAggConfig,
    round: u32,
}

impl SecureAggregator {
    pub fn new(hospitals: usize, config: SecureAggConfig, seed: u64) -> Result<Self> {
        let k = u16::try_from(hospitals)
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("cannot run with {hospitals} hospitals"))
            })?;
        let bfv = Bfv::new(config.params.clone())?;
        let (server_t, hospital_ts): (Box<dyn Transport>, Vec<Box<dyn Transport>>) =
            match config.transport {
                TransportKind::Loopback => {
                    let mut net = loopback_network(k).into_iter();
                    let server = net.next().expect("server endpoint");
                    (
                        Box::new(server),
                        net.map(|e| Box::new(e) as Box<dyn Transport>).collect(),
                    )
                }
                TransportKind::Tcp => {
                    let (server, clients) = tcp_network(k, config.timeout)?;
                    (
                        Box::new(server),
                        clients
                            .into_iter()
                            .map(|e| Box::new(e) as Box<dyn Transport>)
                            .collect(),
                    )
                }
            };
        let mut server = Server::new(server_t, bfv.clone(), k, config.timeout);
        let mut hs: Vec<_> = hospital_ts
            .into_iter()
            .map(|t| Hospital::new(t, bfv.clone(), hospitals, seed, config.timeout))
            .collect();
        run_key_ceremony(&mut server, &mut hs, seed)?;
        Ok(Self {
            server,
            hospitals: hs,
            config,
            round: 0,
        })
    }

    pub fn set_audit(&mut self, hook: AuditHook) {
        self.server.set_audit(hook);
    }

    pub fn server_state(&self) -> &ServerState {
        self.server.state()
    }

    pub fn hospital_secret_key(&self, k: usize) -> Option<&SecretKey> {
        self.hospitals.get(k).and_then(|h| h.secret_key())
    }

    pub fn fixed_point(&self) -> FixedPoint {
        *self.hospitals[0].fixed_point()
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Server broadcasts the initial global model; returns what hospital 1
    /// received.
    pub fn broadcast_initial(&mut self, model: &ModelParams) -> Result<ModelParams> {
        let ids: Vec<NodeId> = self.hospitals.iter().map(|h| h.id()).collect();
        self.server.broadcast(0, model, &ids)?;
        let mut received = Vec::with_capacity(ids.len());
        for h in &mut self.hospitals {
            received.push(h.receive_broadcast(0)?);
        }
        Ok(received.swap_remove(0))
    }

    /// One protocol round over `(hospital index, local model)` pairs
    /// (0-based indices). Every contributor decrypts the same average;
    /// the first contributor's copy is returned.
    pub fn aggregate(&mut self, local: &[(usize, &ModelParams)]) -> Result<ModelParams> {
        let (_, first) = local
            .first()
            .ok_or_else(|| Error::Protocol("no contributors this round".into()))?;
        let shape = first.shape().to_vec();
        let round = self.round + 1;
        let mut ids = Vec::with_capacity(local.len());
        for &(k, model) in local {
            let h = self
                .hospitals
                .get_mut(k)
                .ok_or_else(|| Error::InvalidArgument(format!("no hospital {k}")))?;
            h.submit(round, model)?;
            ids.push(h.id());
        }
        self.server.aggregate_round(round, &ids)?;
        let mut result: Option<ModelParams> = None;
        for &(k, _) in local {
            let m = self.hospitals[k].receive_aggregate(round, local.len(), shape.clone())?;
            match &result {
                None => result = Some(m),
                Some(r) if *r != m => {
                    return Err(Error::Protocol(format!(
                        "hospital {} decrypted a different average",
                        k + 1
                    )))
                }
                Some(_) => {}
            }
        }
        self.round = round;
        Ok(result.expect("at least one contributor"))
    }

    /// Optional last protocol step: hospitals hand the final global model to
    /// the server unencrypted. A no-op unless enabled in the config.
    pub fn finish(&mut self, model: &ModelParams) -> Result<Option<ModelParams>> {
        if !self.config.send_final_plain {
            return Ok(None);
        }
        let round = self.round;
        let ids: Vec<NodeId> = self.hospitals.iter().map(|h| h.id()).collect();
        for h in &mut self.hospitals {
            h.send_final(round, model)?;
        }
        let models = self.server.collect_final(round, &ids)?;
        Ok(models.into_iter().next())
    }
}
