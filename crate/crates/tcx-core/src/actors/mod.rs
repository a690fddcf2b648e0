//! The five parties of the control plane and the plumbing they share.
//!
//! - `deploy`: the trusted operator service; owns the certificate
//!   hierarchy, endorses platforms' brokers, publishes the valid-broker
//!   list and enrolls container owners.
//! - `host`: the untrusted machine operator; stores sealed images, routes
//!   carrier connections, and drives the TEE platform on request. Several
//!   dishonest variants exist for adversarial runs.
//! - `rootvm`: the per-host broker guest; attests sibling guests, issues
//!   their certificates from its own instance CA and runs the service
//!   registry.
//! - `agent`: the in-guest supervisor of one confidential workload VM.
//! - `owner`: the container owner's client; verifies all evidence locally
//!   before any secret leaves its hands.
//!
//! Guests talk to their own host over plain in-process pipes (the
//! hypercall surface); everything that crosses the network is either a
//! routing preamble or an authenticated channel.

pub mod agent;
pub mod deploy;
pub mod host;
pub mod owner;
pub mod rootvm;

use thiserror::Error;

use crate::channel::{Channel, ChannelError};
use crate::crypto::SigKeypair;
use crate::net::{BoxConn, Conn, NetError};
use crate::pki::{ChainReject, RoleCertificate};
use crate::proto::{ErrorCode, Message};
use crate::tee::ReportReject;
use crate::wire::{Reader, Wire, WireError, Writer};

/// The fixed instant every simulated run happens at. Certificate validity
/// and list freshness are all evaluated against an explicit time, so the
/// clock never needs to tick.
pub const SIM_TIME: u64 = 1_700_000_000;

#[derive(Debug, Error)]
pub enum ActorError {
    #[error("{code}: {message}")]
    Refused { code: ErrorCode, message: String },
    #[error("attestation report rejected: {0:?}")]
    Report(ReportReject),
    #[error("certificate rejected: {0}")]
    Chain(ChainReject),
    #[error("broker identity is not on the current valid list")]
    Revoked,
    #[error("unexpected message {got} (expected {expected})")]
    Unexpected { got: &'static str, expected: &'static str },
    #[error("malformed message: {0}")]
    Wire(#[from] WireError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Net(#[from] NetError),
}

impl ActorError {
    pub fn refused(code: ErrorCode, message: impl Into<String>) -> Self {
        ActorError::Refused { code, message: message.into() }
    }

    /// The stable error token for this failure, as a CLI or test sees it.
    pub fn token(&self) -> String {
        match self {
            ActorError::Refused { code, .. } => code.to_string(),
            ActorError::Report(r) => format!("{r:?}"),
            ActorError::Chain(c) => c.to_string(),
            ActorError::Revoked => "revoked-identity".into(),
            ActorError::Channel(ChannelError::PeerRejected(r)) => r.to_string(),
            other => other.to_string(),
        }
    }
}

/// Maps an internal failure to the refusal message sent back to a caller.
pub fn refusal(err: &ActorError) -> Message {
    let (code, message) = match err {
        ActorError::Refused { code, message } => (*code, message.clone()),
        ActorError::Report(ReportReject::BadSignature) => {
            (ErrorCode::BadSignature, "attestation report rejected: BadSignature".into())
        }
        ActorError::Report(ReportReject::WrongMeasurement) => (
            ErrorCode::WrongMeasurement,
            "attestation report rejected: WrongMeasurement".into(),
        ),
        ActorError::Report(ReportReject::StaleNonce) => {
            (ErrorCode::StaleNonce, "attestation report rejected: StaleNonce".into())
        }
        ActorError::Chain(c) => (ErrorCode::Rejected, format!("certificate rejected: {c}")),
        ActorError::Revoked => {
            (ErrorCode::RevokedIdentity, "broker is not on the valid list".into())
        }
        other => (ErrorCode::Internal, other.to_string()),
    };
    Message::ErrorReply { code, message }
}

/// Sends one message on an authenticated channel.
pub fn send_msg(chan: &mut Channel, msg: &Message) -> Result<(), ChannelError> {
    chan.send(&msg.encode())
}

/// Receives the next message on an authenticated channel, skipping
/// replayed records (they carry nothing new).
pub fn recv_msg(chan: &mut Channel) -> Result<Message, ActorError> {
    loop {
        match chan.recv() {
            Ok(frame) => return Ok(Message::decode(&frame)?),
            Err(ChannelError::ReplayedRecord { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

/// Like `recv_msg`, but treats transport timeouts as "still waiting".
/// Server loops sit in this between requests: an idle client is not a
/// dead one. Request/reply callers use `recv_msg`, where a missing
/// reply after the transport's grace period IS a failure.
pub fn recv_msg_wait(chan: &mut Channel) -> Result<Message, ActorError> {
    loop {
        match recv_msg(chan) {
            Err(ActorError::Channel(ChannelError::Net(NetError::Timeout))) => continue,
            other => return other,
        }
    }
}

/// One request/reply exchange; refusals become typed errors.
pub fn request(chan: &mut Channel, msg: &Message) -> Result<Message, ActorError> {
    send_msg(chan, msg)?;
    match recv_msg(chan)? {
        Message::ErrorReply { code, message } => Err(ActorError::Refused { code, message }),
        other => Ok(other),
    }
}

/// Sends one message on a plain (unauthenticated) carrier connection.
pub fn send_plain(conn: &dyn Conn, msg: &Message) -> Result<(), NetError> {
    conn.send(&msg.encode())
}

/// Receives one message from a plain carrier connection.
pub fn recv_plain(conn: &dyn Conn) -> Result<Message, ActorError> {
    let frame = conn.recv()?;
    Ok(Message::decode(&frame)?)
}

/// `recv_plain` for server loops: waits out transport timeouts.
pub fn recv_plain_wait(conn: &dyn Conn) -> Result<Message, ActorError> {
    loop {
        match conn.recv() {
            Ok(frame) => return Ok(Message::decode(&frame)?),
            Err(NetError::Timeout) => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

/// One request/reply exchange over a plain carrier connection.
pub fn request_plain(conn: &dyn Conn, msg: &Message) -> Result<Message, ActorError> {
    send_plain(conn, msg)?;
    match recv_plain(conn)? {
        Message::ErrorReply { code, message } => Err(ActorError::Refused { code, message }),
        other => Ok(other),
    }
}

/// How a guest reaches the rest of the world: the host opens an internal
/// carrier connection to the named destination. Destinations are
/// "host" (the hypercall surface), "broker" (the per-host broker VM) and
/// "vm:<hex id>" (a sibling guest).
pub trait SeatRouter: Send + Sync {
    fn open(&self, destination: &str) -> Result<BoxConn, NetError>;
}

/// What the deploy service injects into a freshly attested broker VM:
/// its certified identity, signing key, and the trust material it needs
/// to attest and certify workload guests in turn.
#[derive(Clone)]
pub struct RootVmIdentity {
    pub cert: RoleCertificate,
    pub key_secret: [u8; 32],
    pub trust_root: RoleCertificate,
    pub vendor_public: [u8; 32],
    pub scvm_measurement: [u8; 32],
}

impl RootVmIdentity {
    pub fn keypair(&self) -> SigKeypair {
        SigKeypair::from_secret_bytes(self.key_secret)
    }
}

impl std::fmt::Debug for RootVmIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RootVmIdentity")
            .field("cert", &self.cert.subject_name)
            .finish()
    }
}

impl Wire for RootVmIdentity {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.cert.encode())
            .field(&self.key_secret)
            .field(&self.trust_root.encode())
            .field(&self.vendor_public)
            .field(&self.scvm_measurement);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let cert = RoleCertificate::decode(r.field()?)?;
        let key_secret = r.fixed()?;
        let trust_root = RoleCertificate::decode(r.field()?)?;
        let vendor_public = r.fixed()?;
        let scvm_measurement = r.fixed()?;
        r.done()?;
        Ok(RootVmIdentity { cert, key_secret, trust_root, vendor_public, scvm_measurement })
    }
}

/// What the broker injects into a freshly attested workload guest: the
/// guest's certified identity and key, the owner it answers to, and the
/// trust root for verifying peers.
#[derive(Clone)]
pub struct ScVmIdentity {
    pub cert_vm: RoleCertificate,
    pub key_secret: [u8; 32],
    pub cert_owner: RoleCertificate,
    pub trust_root: RoleCertificate,
}

impl ScVmIdentity {
    pub fn keypair(&self) -> SigKeypair {
        SigKeypair::from_secret_bytes(self.key_secret)
    }
}

impl std::fmt::Debug for ScVmIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScVmIdentity")
            .field("cert_vm", &self.cert_vm.subject_name)
            .field("cert_owner", &self.cert_owner.subject_name)
            .finish()
    }
}

impl Wire for ScVmIdentity {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.cert_vm.encode())
            .field(&self.key_secret)
            .field(&self.cert_owner.encode())
            .field(&self.trust_root.encode());
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let cert_vm = RoleCertificate::decode(r.field()?)?;
        let key_secret = r.fixed()?;
        let cert_owner = RoleCertificate::decode(r.field()?)?;
        let trust_root = RoleCertificate::decode(r.field()?)?;
        r.done()?;
        Ok(ScVmIdentity { cert_vm, key_secret, cert_owner, trust_root })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Entropy;
    use crate::pki::{build_hierarchy_at, issue_certificate, Role};

    #[test]
    fn identity_bundles_round_trip() {
        let h = build_hierarchy_at([1u8; 32], 0);
        let mut e = Entropy::from_seed([2u8; 32]);
        let k1 = SigKeypair::generate(&mut e);
        let broker =
            issue_certificate(&h.rootvm_ca, "broker", Role::RootVm, k1.public(), 0, 1000).unwrap();
        let k2 = SigKeypair::generate(&mut e);
        let owner =
            issue_certificate(&h.owner_ca, "alice", Role::ContainerOwner, k2.public(), 0, 1000)
                .unwrap();

        let rid = RootVmIdentity {
            cert: broker.clone(),
            key_secret: k1.secret_bytes(),
            trust_root: h.root_ca.certificate.clone(),
            vendor_public: [3u8; 32],
            scvm_measurement: [4u8; 32],
        };
        let back = RootVmIdentity::decode(&rid.encode()).unwrap();
        assert_eq!(back.cert, rid.cert);
        assert_eq!(back.key_secret, rid.key_secret);
        assert_eq!(back.vendor_public, rid.vendor_public);
        assert_eq!(back.scvm_measurement, rid.scvm_measurement);
        assert_eq!(back.keypair().public(), k1.public());

        let sid = ScVmIdentity {
            cert_vm: broker,
            key_secret: k2.secret_bytes(),
            cert_owner: owner,
            trust_root: h.root_ca.certificate.clone(),
        };
        let back = ScVmIdentity::decode(&sid.encode()).unwrap();
        assert_eq!(back.cert_vm, sid.cert_vm);
        assert_eq!(back.cert_owner, sid.cert_owner);
        assert_eq!(back.keypair().public(), k2.public());
    }

    #[test]
    fn debug_never_prints_key_material() {
        let h = build_hierarchy_at([1u8; 32], 0);
        let mut e = Entropy::from_seed([2u8; 32]);
        let k = SigKeypair::generate(&mut e);
        let cert =
            issue_certificate(&h.rootvm_ca, "broker", Role::RootVm, k.public(), 0, 1000).unwrap();
        let rid = RootVmIdentity {
            cert: cert.clone(),
            key_secret: [0xAB; 32],
            trust_root: h.root_ca.certificate.clone(),
            vendor_public: [3u8; 32],
            scvm_measurement: [4u8; 32],
        };
        let shown = format!("{rid:?}");
        assert!(!shown.contains("ab, ab"));
        assert!(!shown.to_lowercase().contains("abab"));
        let sid = ScVmIdentity {
            cert_vm: cert.clone(),
            key_secret: [0xCD; 32],
            cert_owner: cert,
            trust_root: h.root_ca.certificate.clone(),
        };
        let shown = format!("{sid:?}");
        assert!(!shown.to_lowercase().contains("cdcd"));
    }
}
