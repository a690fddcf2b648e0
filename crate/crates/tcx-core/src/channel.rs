//! Authenticated channel between two role-certified endpoints: an
//! ephemeral X25519 exchange signed by both parties' certificate keys,
//! then AEAD-protected records with monotone sequence numbers.
//!
//! Handshake (three frames, in the clear on the carrier):
//!   ClientHello  = tag ∥ client_random ∥ client_eph_pub ∥ client_cert?
//!   ServerHello  = tag ∥ server_random ∥ server_eph_pub ∥ server_cert ∥ sig
//!   ClientFinish = tag ∥ sig?
//! Each signature covers the exact bytes of all preceding frames, so a
//! mixed-and-matched transcript never verifies. Record keys are derived
//! from the ephemeral shared secret and the transcript hash, one key per
//! direction.
//!
//! Records carry an explicit sequence number that doubles as the AEAD
//! nonce. A record whose sequence is not strictly greater than the last
//! accepted one is reported as a replay and discarded — the channel stays
//! usable, since the attacker added nothing. A record that fails AEAD
//! verification is a forgery or corruption: the channel breaks and
//! refuses further use.
//!
//! The image-upload path runs the same handshake with an anonymous
//! client: the client omits its certificate and the server must opt in to
//! accepting that.

use thiserror::Error;

use crate::crypto::{
    aead_open, aead_seal, hkdf_derive, sha256_parts, verify_sig, DhKeypair, Entropy, SigKeypair,
    LABEL_CHANNEL,
};
use crate::net::{BoxConn, NetError};
use crate::pki::{verify_chain, ChainReject, Role, RoleCertificate};
use crate::wire::{Reader, Wire, WireError, Writer};

pub const TAG_CLIENT_HELLO: u8 = 0x10;
pub const TAG_SERVER_HELLO: u8 = 0x11;
pub const TAG_CLIENT_FINISH: u8 = 0x12;
pub const TAG_RECORD: u8 = 0x13;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("handshake failed: {0}")]
    HandshakeFailure(String),
    #[error("peer certificate rejected: {0}")]
    PeerRejected(ChainReject),
    #[error("record failed authentication")]
    DecryptFailure,
    #[error("replayed record (sequence {seq})")]
    ReplayedRecord { seq: u64 },
    #[error("channel closed by peer")]
    Closed,
    #[error("channel is broken after a fatal error")]
    Broken,
    #[error(transparent)]
    Net(NetError),
}

impl From<NetError> for ChannelError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Closed => ChannelError::Closed,
            other => ChannelError::Net(other),
        }
    }
}

impl From<WireError> for ChannelError {
    fn from(e: WireError) -> Self {
        ChannelError::HandshakeFailure(format!("malformed handshake message: {e}"))
    }
}

/// Identity and policy one side brings to a handshake.
pub struct ChannelConfig<'a> {
    /// Our certificate; `None` dials anonymously (client side only).
    pub cert: Option<&'a RoleCertificate>,
    pub key: Option<&'a SigKeypair>,
    /// Root CA the peer's chain must anchor to.
    pub trust_root: &'a RoleCertificate,
    /// Require this role on the peer's leaf certificate.
    pub expected_peer_role: Option<Role>,
    /// Time at which chain validity is evaluated.
    pub at_time: u64,
    /// Server side: accept clients that present no certificate.
    pub allow_anonymous_peer: bool,
}

pub struct Channel {
    conn: BoxConn,
    send_key: [u8; 32],
    recv_key: [u8; 32],
    send_seq: u64,
    recv_last: u64,
    peer_cert: Option<RoleCertificate>,
    broken: bool,
}

fn hello_frame(tag: u8, random: &[u8; 32], eph_pub: &[u8; 32], cert: Option<&RoleCertificate>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8_field(tag).field(random).field(eph_pub);
    match cert {
        Some(c) => w.field(&c.encode()),
        None => w.field(&[]),
    };
    w.finish()
}

struct Hello {
    // Bound into key derivation through the raw frame bytes, never read
    // directly after decoding.
    #[allow(dead_code)]
    random: [u8; 32],
    eph_pub: [u8; 32],
    cert: Option<RoleCertificate>,
}

fn parse_hello(frame: &[u8], want_tag: u8) -> Result<Hello, ChannelError> {
    let mut r = Reader::new(frame);
    let tag = r.u8_field()?;
    if tag != want_tag {
        return Err(ChannelError::HandshakeFailure(format!(
            "expected message tag {want_tag:#04x}, got {tag:#04x}"
        )));
    }
    let random = r.fixed()?;
    let eph_pub = r.fixed()?;
    let cert_bytes = r.field()?;
    let cert = if cert_bytes.is_empty() {
        None
    } else {
        Some(RoleCertificate::decode(cert_bytes)?)
    };
    r.done()?;
    Ok(Hello {
        random,
        eph_pub,
        cert,
    })
}

fn check_peer(
    cert: &RoleCertificate,
    cfg: &ChannelConfig<'_>,
) -> Result<(), ChannelError> {
    let expected = cfg.expected_peer_role.unwrap_or(cert.role);
    verify_chain(cert, cfg.trust_root, cfg.at_time, expected).map_err(ChannelError::PeerRejected)
}

/// Key schedule: one write key per direction, bound to the whole
/// handshake transcript.
fn derive_keys(shared: &[u8; 32], transcript_hash: &[u8; 32]) -> ([u8; 32], [u8; 32]) {
    let okm: [u8; 64] = hkdf_derive(shared, LABEL_CHANNEL, transcript_hash);
    let mut client = [0u8; 32];
    let mut server = [0u8; 32];
    client.copy_from_slice(&okm[..32]);
    server.copy_from_slice(&okm[32..]);
    (client, server)
}

pub fn client_handshake(
    conn: BoxConn,
    cfg: &ChannelConfig<'_>,
    entropy: &mut Entropy,
) -> Result<Channel, ChannelError> {
    let random: [u8; 32] = entropy.bytes();
    let eph = DhKeypair::generate(entropy);
    let hello_c = hello_frame(TAG_CLIENT_HELLO, &random, &eph.public(), cfg.cert);
    conn.send(&hello_c)?;

    let hello_s_frame = conn.recv()?;
    let mut r = Reader::new(&hello_s_frame);
    let tag = r.u8_field()?;
    if tag != TAG_SERVER_HELLO {
        return Err(ChannelError::HandshakeFailure(format!(
            "expected server hello, got tag {tag:#04x}"
        )));
    }
    let server_random: [u8; 32] = r.fixed()?;
    let server_eph: [u8; 32] = r.fixed()?;
    let server_cert = RoleCertificate::decode(r.field()?)?;
    let server_sig: [u8; 64] = r.fixed()?;
    r.done()?;

    // The server signed everything before its signature.
    let hello_s_tbs = {
        let mut w = Writer::new();
        w.u8_field(TAG_SERVER_HELLO)
            .field(&server_random)
            .field(&server_eph)
            .field(&server_cert.encode());
        w.finish()
    };
    check_peer(&server_cert, cfg)?;
    let server_tbs = sha256_parts(&[b"tcx-hs-server", &hello_c, &hello_s_tbs]);
    verify_sig(&server_cert.public_key, &server_tbs, &server_sig)
        .map_err(|_| ChannelError::HandshakeFailure("server signature invalid".into()))?;

    // Finish: prove our key over the full transcript, or stay anonymous.
    let client_tbs = sha256_parts(&[b"tcx-hs-client", &hello_c, &hello_s_frame]);
    let finish = {
        let mut w = Writer::new();
        w.u8_field(TAG_CLIENT_FINISH);
        match (cfg.cert, cfg.key) {
            (Some(_), Some(key)) => w.field(&key.sign(&client_tbs)),
            _ => w.field(&[]),
        };
        w.finish()
    };
    conn.send(&finish)?;

    let shared = eph.agree(&server_eph);
    let transcript_hash = sha256_parts(&[&hello_c, &hello_s_frame]);
    let (client_key, server_key) = derive_keys(&shared, &transcript_hash);
    Ok(Channel {
        conn,
        send_key: client_key,
        recv_key: server_key,
        send_seq: 1,
        recv_last: 0,
        peer_cert: Some(server_cert),
        broken: false,
    })
}

pub fn server_handshake(
    conn: BoxConn,
    cfg: &ChannelConfig<'_>,
    entropy: &mut Entropy,
) -> Result<Channel, ChannelError> {
    let hello_c_frame = conn.recv()?;
    server_handshake_after(conn, cfg, entropy, hello_c_frame)
}

/// Variant for dispatchers that already consumed the first frame to
/// decide how to handle the connection.
pub fn server_handshake_after(
    conn: BoxConn,
    cfg: &ChannelConfig<'_>,
    entropy: &mut Entropy,
    hello_c_frame: Vec<u8>,
) -> Result<Channel, ChannelError> {
    let hello_c = parse_hello(&hello_c_frame, TAG_CLIENT_HELLO)?;
    match &hello_c.cert {
        Some(cert) => check_peer(cert, cfg)?,
        None if cfg.allow_anonymous_peer => {}
        None => {
            return Err(ChannelError::HandshakeFailure(
                "anonymous client not allowed here".into(),
            ))
        }
    }

    let (cert, key) = match (cfg.cert, cfg.key) {
        (Some(c), Some(k)) => (c, k),
        _ => {
            return Err(ChannelError::HandshakeFailure(
                "server requires a certificate".into(),
            ))
        }
    };
    let random: [u8; 32] = entropy.bytes();
    let eph = DhKeypair::generate(entropy);
    let hello_s_tbs = {
        let mut w = Writer::new();
        w.u8_field(TAG_SERVER_HELLO)
            .field(&random)
            .field(&eph.public())
            .field(&cert.encode());
        w.finish()
    };
    let server_tbs = sha256_parts(&[b"tcx-hs-server", &hello_c_frame, &hello_s_tbs]);
    let sig = key.sign(&server_tbs);
    let hello_s_frame = {
        let mut w = Writer::new();
        w.u8_field(TAG_SERVER_HELLO)
            .field(&random)
            .field(&eph.public())
            .field(&cert.encode())
            .field(&sig);
        w.finish()
    };
    conn.send(&hello_s_frame)?;

    let finish_frame = conn.recv()?;
    let mut r = Reader::new(&finish_frame);
    let tag = r.u8_field()?;
    if tag != TAG_CLIENT_FINISH {
        return Err(ChannelError::HandshakeFailure(format!(
            "expected client finish, got tag {tag:#04x}"
        )));
    }
    let finish_sig = r.field()?.to_vec();
    r.done()?;

    let client_tbs = sha256_parts(&[b"tcx-hs-client", &hello_c_frame, &hello_s_frame]);
    match &hello_c.cert {
        Some(cert) => {
            let sig: [u8; 64] = finish_sig.as_slice().try_into().map_err(|_| {
                ChannelError::HandshakeFailure("client signature malformed".into())
            })?;
            verify_sig(&cert.public_key, &client_tbs, &sig)
                .map_err(|_| ChannelError::HandshakeFailure("client signature invalid".into()))?;
        }
        None => {
            if !finish_sig.is_empty() {
                return Err(ChannelError::HandshakeFailure(
                    "anonymous client sent a signature".into(),
                ));
            }
        }
    }

    let shared = eph.agree(&hello_c.eph_pub);
    let transcript_hash = sha256_parts(&[&hello_c_frame, &hello_s_frame]);
    let (client_key, server_key) = derive_keys(&shared, &transcript_hash);
    Ok(Channel {
        conn,
        send_key: server_key,
        recv_key: client_key,
        send_seq: 1,
        recv_last: 0,
        peer_cert: hello_c.cert,
        broken: false,
    })
}

fn record_nonce(seq: u64) -> [u8; 12] {
    let mut nonce = [0u8; 12];
    nonce[4..].copy_from_slice(&seq.to_be_bytes());
    nonce
}

impl Channel {
    /// Peer's leaf certificate; `None` only for anonymous clients.
    pub fn peer_cert(&self) -> Option<&RoleCertificate> {
        self.peer_cert.as_ref()
    }

    pub fn send(&mut self, plaintext: &[u8]) -> Result<(), ChannelError> {
        if self.broken {
            return Err(ChannelError::Broken);
        }
        let seq = self.send_seq;
        self.send_seq += 1;
        let ct = aead_seal(&self.send_key, &record_nonce(seq), &seq.to_be_bytes(), plaintext);
        let mut w = Writer::new();
        w.u8_field(TAG_RECORD).u64_field(seq).field(&ct);
        self.conn.send(&w.finish())?;
        Ok(())
    }

    /// Receives one record. `ReplayedRecord` leaves the channel usable;
    /// `DecryptFailure` breaks it permanently.
    pub fn recv(&mut self) -> Result<Vec<u8>, ChannelError> {
        if self.broken {
            return Err(ChannelError::Broken);
        }
        let frame = self.conn.recv()?;
        let mut r = Reader::new(&frame);
        let tag = r.u8_field().map_err(|_| self.break_channel())?;
        if tag != TAG_RECORD {
            return Err(self.break_channel());
        }
        let seq = r.u64_field().map_err(|_| self.break_channel())?;
        let ct = r.field().map_err(|_| self.break_channel())?;
        r.done().map_err(|_| self.break_channel())?;
        if seq <= self.recv_last {
            return Err(ChannelError::ReplayedRecord { seq });
        }
        let plaintext = aead_open(&self.recv_key, &record_nonce(seq), &seq.to_be_bytes(), ct)
            .map_err(|_| self.break_channel())?;
        self.recv_last = seq;
        Ok(plaintext)
    }

    fn break_channel(&mut self) -> ChannelError {
        self.broken = true;
        ChannelError::DecryptFailure
    }

    pub fn close(&self) {
        self.conn.close();
    }
}
