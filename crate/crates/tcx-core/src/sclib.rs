//! In-guest library for confidential workloads: register a service name,
//! discover peers, and open owner-filtered secure streams to them.
//!
//! Every operation runs over two primitives the agent wires up at start:
//! a registry channel to the per-host broker VM, and a dialer that can
//! reach another guest by VM id (the host routes the carrier connection
//! but never terminates the channel inside it).
//!
//! Dialing pins the peer to its registry entry: after the handshake the
//! presented certificate must be byte-identical to the one the registry
//! returned, so a host that answers in the broker's place with any other
//! credential is caught either by the role check or by the pin.

use std::collections::VecDeque;
use std::sync::mpsc::Receiver;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::channel::{client_handshake, Channel, ChannelConfig, ChannelError};
use crate::crypto::{Entropy, SigKeypair};
use crate::net::{BoxConn, NetError};
use crate::pki::{verify_chain, ChainReject, Role, RoleCertificate};
use crate::proto::{ErrorCode, Message};
use crate::tee::VmId;
use crate::wire::Wire;

#[derive(Debug, Error)]
pub enum ScError {
    #[error("not registered; call register first")]
    NotRegistered,
    #[error("no registered VM named {0:?}")]
    UnknownName(String),
    #[error("peer's owner is not in the accepted owner list")]
    OwnerRejected,
    #[error("peer certificate failed verification: {0}")]
    BadPeerCertificate(ChainReject),
    #[error("peer presented a different certificate than the registry holds")]
    CertMismatch,
    #[error("peer refused the stream: {0}")]
    PeerRejected(String),
    #[error("stream is closed")]
    StreamClosed,
    #[error("registry refused: {0}")]
    Registry(ErrorCode),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Transport(#[from] NetError),
}

/// Reaches another guest by VM id. The agent's implementation asks the
/// host to route a carrier connection; tests substitute direct pipes.
pub trait VmDialer: Send {
    fn dial_vm(&self, vm_id: VmId) -> Result<BoxConn, NetError>;
}

/// An accepted peer connection as the agent's dispatcher delivers it:
/// intro already verified against the registry, accept already sent.
pub struct PeerStream {
    pub peer_name: String,
    pub channel: Channel,
}

pub struct ScContext {
    name: Option<String>,
    cert_vm: RoleCertificate,
    key_vm: SigKeypair,
    cert_owner: RoleCertificate,
    trust_root: RoleCertificate,
    registry: Channel,
    dialer: Box<dyn VmDialer>,
    incoming: Receiver<PeerStream>,
    entropy: Entropy,
    at_time: u64,
    // Guests come up in parallel; a dial placed while the peer is still
    // registering should wait, not fail. Bounded so a truly absent name
    // still errors out.
    lookup_patience: Duration,
}

/// Sends one request on an established channel and decodes the reply,
/// mapping refusals to a typed error.
pub fn call(chan: &mut Channel, msg: &Message) -> Result<Message, ScError> {
    chan.send(&msg.encode())?;
    let reply = loop {
        match chan.recv() {
            Ok(bytes) => break bytes,
            // A replayed record is noise an adversary added; skip it.
            Err(ChannelError::ReplayedRecord { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    };
    let reply = Message::decode(&reply).map_err(|e| ScError::Protocol(e.to_string()))?;
    match reply {
        Message::ErrorReply { code, .. } => Err(ScError::Registry(code)),
        other => Ok(other),
    }
}

impl ScContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cert_vm: RoleCertificate,
        key_vm: SigKeypair,
        cert_owner: RoleCertificate,
        trust_root: RoleCertificate,
        registry: Channel,
        dialer: Box<dyn VmDialer>,
        incoming: Receiver<PeerStream>,
        entropy: Entropy,
        at_time: u64,
    ) -> Self {
        ScContext {
            name: None,
            cert_vm,
            key_vm,
            cert_owner,
            trust_root,
            registry,
            dialer,
            incoming,
            entropy,
            at_time,
            lookup_patience: Duration::from_secs(2),
        }
    }

    /// Adjusts how long `dial` waits for a name to appear in the
    /// registry before giving up.
    pub fn set_lookup_patience(&mut self, patience: Duration) {
        self.lookup_patience = patience;
    }

    /// Claims a service name in the per-host registry.
    pub fn register(&mut self, name: &str) -> Result<(), ScError> {
        let reply = call(
            &mut self.registry,
            &Message::Register { name: name.to_string() },
        )?;
        match reply {
            Message::RegisterOk => {
                self.name = Some(name.to_string());
                Ok(())
            }
            other => Err(ScError::Protocol(format!(
                "unexpected reply to register: {}",
                other.name()
            ))),
        }
    }

    /// Lists the service names currently registered on this host.
    pub fn get_registered_vms(&mut self) -> Result<Vec<String>, ScError> {
        match call(&mut self.registry, &Message::ListNames)? {
            Message::NamesOk { names } => Ok(names),
            other => Err(ScError::Protocol(format!(
                "unexpected reply to list-names: {}",
                other.name()
            ))),
        }
    }

    /// The certificate of the owner this VM belongs to.
    pub fn get_self_owner(&self) -> Result<&RoleCertificate, ScError> {
        Ok(&self.cert_owner)
    }

    pub fn registered_name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    /// Opens a stream to the named peer. If `valid_owners` is non-empty,
    /// the peer's owner certificate must be one of them — checked against
    /// the registry's answer before any connection is made.
    pub fn dial(
        &mut self,
        name: &str,
        valid_owners: &[&RoleCertificate],
    ) -> Result<Stream, ScError> {
        let self_name = self.name.clone().ok_or(ScError::NotRegistered)?;

        let deadline = Instant::now() + self.lookup_patience;
        let reply = loop {
            match call(&mut self.registry, &Message::Lookup { name: name.to_string() }) {
                Err(ScError::Registry(ErrorCode::UnknownName)) => {
                    if Instant::now() >= deadline {
                        return Err(ScError::UnknownName(name.to_string()));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                other => break other?,
            }
        };
        let (vm_id, cert_vm, cert_owner) = match reply {
            Message::LookupOk { vm_id, cert_vm, cert_owner, .. } => (vm_id, cert_vm, cert_owner),
            other => {
                return Err(ScError::Protocol(format!(
                    "unexpected reply to lookup: {}",
                    other.name()
                )))
            }
        };

        if !valid_owners.is_empty() {
            let fp = cert_owner.fingerprint();
            if !valid_owners.iter().any(|c| c.fingerprint() == fp) {
                return Err(ScError::OwnerRejected);
            }
        }
        verify_chain(&cert_vm, &self.trust_root, self.at_time, Role::ScVm)
            .map_err(ScError::BadPeerCertificate)?;

        let conn = self.dialer.dial_vm(vm_id)?;
        let mut chan = client_handshake(
            conn,
            &ChannelConfig {
                cert: Some(&self.cert_vm),
                key: Some(&self.key_vm),
                trust_root: &self.trust_root,
                expected_peer_role: Some(Role::ScVm),
                at_time: self.at_time,
                allow_anonymous_peer: false,
            },
            &mut self.entropy,
        )?;
        // Pin: the endpoint answering must hold exactly the registered
        // certificate, not merely some valid one.
        let presented = chan
            .peer_cert()
            .ok_or_else(|| ScError::Protocol("peer sent no certificate".into()))?;
        if presented.encode() != cert_vm.encode() {
            return Err(ScError::CertMismatch);
        }

        match call(&mut chan, &Message::PeerIntro { name: self_name })? {
            Message::PeerAccept => {}
            Message::PeerReject { reason } => return Err(ScError::PeerRejected(reason)),
            other => {
                return Err(ScError::Protocol(format!(
                    "unexpected reply to intro: {}",
                    other.name()
                )))
            }
        }
        Ok(Stream::new(name.to_string(), chan))
    }

    /// Returns the accept side for incoming streams. Registration is
    /// required so peers can verify the intro we already answered.
    pub fn listen(&mut self) -> Result<ScListener<'_>, ScError> {
        if self.name.is_none() {
            return Err(ScError::NotRegistered);
        }
        Ok(ScListener { incoming: &self.incoming })
    }
}

pub struct ScListener<'a> {
    incoming: &'a Receiver<PeerStream>,
}

impl ScListener<'_> {
    /// Blocks until a verified peer stream arrives.
    pub fn accept(&mut self) -> Result<Stream, ScError> {
        let peer = self
            .incoming
            .recv()
            .map_err(|_| ScError::Transport(NetError::Closed))?;
        Ok(Stream::new(peer.peer_name, peer.channel))
    }
}

/// Checks a peer's intro against the registry: the name must resolve and
/// the registered certificate must be the one on this channel. Returns
/// the rejection reason if not.
pub fn verify_peer_intro(
    registry: &mut Channel,
    intro_name: &str,
    presented: &RoleCertificate,
) -> Result<(), String> {
    match call(registry, &Message::Lookup { name: intro_name.to_string() }) {
        Ok(Message::LookupOk { cert_vm, .. }) => {
            if cert_vm.encode() == presented.encode() {
                Ok(())
            } else {
                Err("certificate does not match registration".into())
            }
        }
        Ok(other) => Err(format!("registry gave unexpected answer {}", other.name())),
        Err(ScError::Registry(ErrorCode::UnknownName)) => Err("peer is not registered".into()),
        Err(e) => Err(format!("registry lookup failed: {e}")),
    }
}

/// Byte stream over an established peer channel. Reads are buffered:
/// one data message may satisfy several short reads.
pub struct Stream {
    peer_name: String,
    chan: Channel,
    rbuf: VecDeque<u8>,
    peer_closed: bool,
    closed: bool,
}

impl std::fmt::Debug for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stream")
            .field("peer_name", &self.peer_name)
            .field("buffered", &self.rbuf.len())
            .field("closed", &self.closed)
            .finish()
    }
}

impl Stream {
    pub fn new(peer_name: String, chan: Channel) -> Self {
        Stream {
            peer_name,
            chan,
            rbuf: VecDeque::new(),
            peer_closed: false,
            closed: false,
        }
    }

    pub fn peer_name(&self) -> &str {
        &self.peer_name
    }

    pub fn write(&mut self, data: &[u8]) -> Result<(), ScError> {
        if self.closed {
            return Err(ScError::StreamClosed);
        }
        self.chan
            .send(&Message::StreamData { data: data.to_vec() }.encode())?;
        Ok(())
    }

    /// Reads up to `buf.len()` bytes; returns 0 only at end of stream.
    pub fn read(&mut self, buf: &mut [u8]) -> Result<usize, ScError> {
        while self.rbuf.is_empty() && !self.peer_closed {
            let frame = match self.chan.recv() {
                Ok(f) => f,
                Err(ChannelError::ReplayedRecord { .. }) => continue,
                Err(ChannelError::Closed) => {
                    self.peer_closed = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            match Message::decode(&frame).map_err(|e| ScError::Protocol(e.to_string()))? {
                Message::StreamData { data } => self.rbuf.extend(data),
                Message::StreamClose => self.peer_closed = true,
                other => {
                    return Err(ScError::Protocol(format!(
                        "unexpected message on stream: {}",
                        other.name()
                    )))
                }
            }
        }
        if self.rbuf.is_empty() {
            return Ok(0);
        }
        let n = buf.len().min(self.rbuf.len());
        for slot in buf.iter_mut().take(n) {
            *slot = self.rbuf.pop_front().expect("checked non-empty");
        }
        Ok(n)
    }

    /// Announces end of stream and releases the carrier. Reads may still
    /// drain data the peer sent before seeing the close.
    pub fn close(&mut self) {
        if !self.closed {
            self.closed = true;
            let _ = self.chan.send(&Message::StreamClose.encode());
            self.chan.close();
        }
    }
}

impl Drop for Stream {
    fn drop(&mut self) {
        self.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::server_handshake;
    use crate::net::{pipe_pair, PipeConn};
    use crate::pki::{build_hierarchy_at, ca_handle, issue_certificate, CaHandle, Hierarchy};
    use crate::proto::TAG_LOOKUP;
    use std::sync::mpsc;
    use std::sync::{Arc, Mutex};

    const T: u64 = 1_000;

    struct TestPki {
        h: Hierarchy,
        instance_ca: CaHandle,
        owner_a: (RoleCertificate, SigKeypair),
        owner_b: (RoleCertificate, SigKeypair),
    }

    fn test_pki() -> TestPki {
        let h = build_hierarchy_at([3u8; 32], 0);
        let mut e = Entropy::from_seed([4u8; 32]);
        let rk = SigKeypair::generate(&mut e);
        let rc = issue_certificate(&h.rootvm_ca, "broker", Role::RootVm, rk.public(), 0, 100_000)
            .unwrap();
        let instance_ca = ca_handle(rc, rk);
        let ka = SigKeypair::generate(&mut e);
        let owner_a = (
            issue_certificate(&h.owner_ca, "alice", Role::ContainerOwner, ka.public(), 0, 100_000)
                .unwrap(),
            ka,
        );
        let kb = SigKeypair::generate(&mut e);
        let owner_b = (
            issue_certificate(&h.owner_ca, "bob", Role::ContainerOwner, kb.public(), 0, 100_000)
                .unwrap(),
            kb,
        );
        TestPki { h, instance_ca, owner_a, owner_b }
    }

    fn vm_identity(pki: &TestPki, n: u8) -> (VmId, RoleCertificate, SigKeypair) {
        let mut e = Entropy::from_seed([0x40 + n; 32]);
        let key = SigKeypair::generate(&mut e);
        let vm_id = VmId([n; 16]);
        let cert = issue_certificate(
            &pki.instance_ca,
            &vm_id.to_hex(),
            Role::ScVm,
            key.public(),
            0,
            100_000,
        )
        .unwrap();
        (vm_id, cert, key)
    }

    /// A scripted registry endpoint: answers register/list/lookup from a
    /// fixed table over a real channel.
    struct FakeRegistry {
        entries: Vec<(String, VmId, RoleCertificate, RoleCertificate)>,
    }

    fn spawn_registry(
        pki: &TestPki,
        as_vm: u8,
        entries: Vec<(String, VmId, RoleCertificate, RoleCertificate)>,
    ) -> Channel {
        let (client_end, server_end) = pipe_pair();
        let broker_cert = pki.instance_ca.certificate.clone();
        let broker_key = SigKeypair::from_secret_bytes(pki.instance_ca.keypair().secret_bytes());
        let root = pki.h.root_ca.certificate.clone();
        std::thread::spawn(move || {
            let mut chan = server_handshake(
                Box::new(server_end),
                &ChannelConfig {
                    cert: Some(&broker_cert),
                    key: Some(&broker_key),
                    trust_root: &root,
                    expected_peer_role: Some(Role::ScVm),
                    at_time: T,
                    allow_anonymous_peer: false,
                },
                &mut Entropy::from_seed([0x77; 32]),
            )
            .unwrap();
            let reg = FakeRegistry { entries };
            let mut names: Vec<String> = Vec::new();
            while let Ok(frame) = chan.recv() {
                let reply = match Message::decode(&frame).unwrap() {
                    Message::Register { name } => {
                        names.push(name);
                        Message::RegisterOk
                    }
                    Message::ListNames => Message::NamesOk { names: names.clone() },
                    Message::Lookup { name } => {
                        match reg.entries.iter().find(|(n, ..)| *n == name) {
                            Some((n, vm_id, cv, co)) => Message::LookupOk {
                                name: n.clone(),
                                vm_id: *vm_id,
                                cert_vm: cv.clone(),
                                cert_owner: co.clone(),
                            },
                            None => Message::ErrorReply {
                                code: ErrorCode::UnknownName,
                                message: name,
                            },
                        }
                    }
                    other => panic!("registry got {}", other.name()),
                };
                chan.send(&reply.encode()).unwrap();
            }
        });
        // Client side of the registry channel, as the agent would set it up:
        // authenticated with the VM's own certificate.
        let (_, vcert, vkey) = vm_identity(pki, as_vm);
        client_handshake(
            Box::new(client_end),
            &ChannelConfig {
                cert: Some(&vcert),
                key: Some(&vkey),
                trust_root: &pki.h.root_ca.certificate,
                expected_peer_role: Some(Role::RootVm),
                at_time: T,
                allow_anonymous_peer: false,
            },
            &mut Entropy::from_seed([0x78; 32]),
        )
        .unwrap()
    }

    /// Dialer handing out pre-arranged pipe ends, recording each use.
    struct ScriptedDialer {
        conns: Mutex<Vec<(VmId, PipeConn)>>,
        dialed: Arc<Mutex<Vec<VmId>>>,
    }

    impl VmDialer for ScriptedDialer {
        fn dial_vm(&self, vm_id: VmId) -> Result<BoxConn, NetError> {
            self.dialed.lock().unwrap().push(vm_id);
            let mut conns = self.conns.lock().unwrap();
            let pos = conns
                .iter()
                .position(|(id, _)| *id == vm_id)
                .ok_or(NetError::Refused("no such vm".into()))?;
            Ok(Box::new(conns.remove(pos).1))
        }
    }

    fn make_ctx(
        pki: &TestPki,
        n: u8,
        owner: &RoleCertificate,
        registry: Channel,
        dialer: Box<dyn VmDialer>,
    ) -> (ScContext, mpsc::Sender<PeerStream>) {
        let (_, cert, key) = vm_identity(pki, n);
        let (tx, rx) = mpsc::channel();
        let ctx = ScContext::new(
            cert,
            key,
            owner.clone(),
            pki.h.root_ca.certificate.clone(),
            registry,
            dialer,
            rx,
            Entropy::from_seed([0x60 + n; 32]),
            T,
        );
        (ctx, tx)
    }

    fn no_dialer() -> Box<dyn VmDialer> {
        Box::new(ScriptedDialer {
            conns: Mutex::new(Vec::new()),
            dialed: Arc::new(Mutex::new(Vec::new())),
        })
    }

    /// Spawns a peer that accepts one stream and echoes until close.
    fn spawn_echo_peer(
        pki: &TestPki,
        cert: RoleCertificate,
        key: SigKeypair,
        conn: PipeConn,
        accept: bool,
    ) -> std::thread::JoinHandle<()> {
        let root = pki.h.root_ca.certificate.clone();
        std::thread::spawn(move || {
            let mut chan = server_handshake(
                Box::new(conn),
                &ChannelConfig {
                    cert: Some(&cert),
                    key: Some(&key),
                    trust_root: &root,
                    expected_peer_role: Some(Role::ScVm),
                    at_time: T,
                    allow_anonymous_peer: false,
                },
                &mut Entropy::from_seed([0x79; 32]),
            )
            .unwrap();
            let intro = chan.recv().unwrap();
            assert!(matches!(
                Message::decode(&intro).unwrap(),
                Message::PeerIntro { .. }
            ));
            if !accept {
                chan.send(
                    &Message::PeerReject { reason: "peer is not registered".into() }.encode(),
                )
                .unwrap();
                return;
            }
            chan.send(&Message::PeerAccept.encode()).unwrap();
            loop {
                let frame = match chan.recv() {
                    Ok(f) => f,
                    Err(_) => break,
                };
                match Message::decode(&frame).unwrap() {
                    Message::StreamData { data } => {
                        chan.send(&Message::StreamData { data }.encode()).unwrap()
                    }
                    Message::StreamClose => break,
                    other => panic!("echo peer got {}", other.name()),
                }
            }
        })
    }

    #[test]
    fn register_and_list() {
        let pki = test_pki();
        let registry = spawn_registry(&pki, 1, Vec::new());
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, no_dialer());
        assert!(ctx.registered_name().is_none());
        ctx.register("web").unwrap();
        assert_eq!(ctx.registered_name(), Some("web"));
        assert_eq!(ctx.get_registered_vms().unwrap(), vec!["web".to_string()]);
        assert_eq!(ctx.get_self_owner().unwrap().subject_name, "alice");
    }

    #[test]
    fn dial_requires_registration() {
        let pki = test_pki();
        let registry = spawn_registry(&pki, 1, Vec::new());
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, no_dialer());
        assert!(matches!(ctx.dial("web", &[]), Err(ScError::NotRegistered)));
    }

    #[test]
    fn dial_unknown_name() {
        let pki = test_pki();
        let registry = spawn_registry(&pki, 1, Vec::new());
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, no_dialer());
        ctx.register("client").unwrap();
        ctx.set_lookup_patience(Duration::ZERO);
        match ctx.dial("nobody", &[]) {
            Err(ScError::UnknownName(n)) => assert_eq!(n, "nobody"),
            other => panic!("expected unknown name, got {other:?}"),
        }
    }

    #[test]
    fn dial_and_echo() {
        let pki = test_pki();
        let (svm, scert, skey) = vm_identity(&pki, 2);
        let registry = spawn_registry(
            &pki,
            1,
            vec![("server".into(), svm, scert.clone(), pki.owner_a.0.clone())],
        );
        let (client_end, server_end) = pipe_pair();
        let peer = spawn_echo_peer(&pki, scert, skey, server_end, true);
        let dialer = Box::new(ScriptedDialer {
            conns: Mutex::new(vec![(svm, client_end)]),
            dialed: Arc::new(Mutex::new(Vec::new())),
        });
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, dialer);
        ctx.register("client").unwrap();
        let mut stream = ctx.dial("server", &[]).unwrap();
        assert_eq!(stream.peer_name(), "server");
        stream.write(b"Hello from client").unwrap();
        let mut buf = [0u8; 32];
        let n = stream.read(&mut buf).unwrap();
        assert_eq!(&buf[..n], b"Hello from client");
        stream.close();
        assert!(matches!(stream.write(b"x"), Err(ScError::StreamClosed)));
        peer.join().unwrap();
    }

    #[test]
    fn owner_filter_blocks_before_connecting() {
        let pki = test_pki();
        let (svm, scert, _) = vm_identity(&pki, 2);
        // Server belongs to bob; client only accepts alice.
        let registry =
            spawn_registry(&pki, 1, vec![("server".into(), svm, scert, pki.owner_b.0.clone())]);
        let dialed = Arc::new(Mutex::new(Vec::new()));
        let dialer = Box::new(ScriptedDialer {
            conns: Mutex::new(Vec::new()),
            dialed: dialed.clone(),
        });
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, dialer);
        ctx.register("client").unwrap();
        let owner_a = pki.owner_a.0.clone();
        assert!(matches!(
            ctx.dial("server", &[&owner_a]),
            Err(ScError::OwnerRejected)
        ));
        // Refused before any carrier connection was made.
        assert!(dialed.lock().unwrap().is_empty());
    }

    #[test]
    fn peer_cert_pin_detects_substitution() {
        let pki = test_pki();
        let (svm, scert, _) = vm_identity(&pki, 2);
        // The endpoint actually answering holds a different (valid) identity.
        let (_, icert, ikey) = vm_identity(&pki, 3);
        let registry = spawn_registry(
            &pki,
            1,
            vec![("server".into(), svm, scert, pki.owner_a.0.clone())],
        );
        let (client_end, server_end) = pipe_pair();
        let _peer = spawn_echo_peer(&pki, icert, ikey, server_end, true);
        let dialer = Box::new(ScriptedDialer {
            conns: Mutex::new(vec![(svm, client_end)]),
            dialed: Arc::new(Mutex::new(Vec::new())),
        });
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, dialer);
        ctx.register("client").unwrap();
        assert!(matches!(
            ctx.dial("server", &[]),
            Err(ScError::CertMismatch)
        ));
    }

    #[test]
    fn peer_rejection_reported() {
        let pki = test_pki();
        let (svm, scert, skey) = vm_identity(&pki, 2);
        let registry = spawn_registry(
            &pki,
            1,
            vec![("server".into(), svm, scert.clone(), pki.owner_a.0.clone())],
        );
        let (client_end, server_end) = pipe_pair();
        let _peer = spawn_echo_peer(&pki, scert, skey, server_end, false);
        let dialer = Box::new(ScriptedDialer {
            conns: Mutex::new(vec![(svm, client_end)]),
            dialed: Arc::new(Mutex::new(Vec::new())),
        });
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, dialer);
        ctx.register("client").unwrap();
        match ctx.dial("server", &[]) {
            Err(ScError::PeerRejected(reason)) => {
                assert_eq!(reason, "peer is not registered")
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn accept_delivers_queued_streams() {
        let pki = test_pki();
        let registry = spawn_registry(&pki, 1, Vec::new());
        let (mut ctx, tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, no_dialer());
        ctx.register("server").unwrap();

        // Build a real channel pair and queue the server end as the
        // dispatcher would.
        let (a, b) = pipe_pair();
        let (_, ccert, ckey) = vm_identity(&pki, 2);
        let (scert2, skey2) = {
            let (_, c, k) = vm_identity(&pki, 4);
            (c, k)
        };
        let root = pki.h.root_ca.certificate.clone();
        let client = std::thread::spawn(move || {
            let mut chan = client_handshake(
                Box::new(a),
                &ChannelConfig {
                    cert: Some(&ccert),
                    key: Some(&ckey),
                    trust_root: &root,
                    expected_peer_role: Some(Role::ScVm),
                    at_time: T,
                    allow_anonymous_peer: false,
                },
                &mut Entropy::from_seed([0x7A; 32]),
            )
            .unwrap();
            chan.send(&Message::StreamData { data: b"hi".to_vec() }.encode())
                .unwrap();
            chan.send(&Message::StreamClose.encode()).unwrap();
        });
        let root2 = pki.h.root_ca.certificate.clone();
        let server_chan = server_handshake(
            Box::new(b),
            &ChannelConfig {
                cert: Some(&scert2),
                key: Some(&skey2),
                trust_root: &root2,
                expected_peer_role: Some(Role::ScVm),
                at_time: T,
                allow_anonymous_peer: false,
            },
            &mut Entropy::from_seed([0x7B; 32]),
        )
        .unwrap();
        tx.send(PeerStream { peer_name: "dialer".into(), channel: server_chan })
            .unwrap();

        let mut listener = ctx.listen().unwrap();
        let mut stream = listener.accept().unwrap();
        assert_eq!(stream.peer_name(), "dialer");
        let mut buf = [0u8; 8];
        let n = stream.read(&mut buf).unwrap();
        assert_eq!(&buf[..n], b"hi");
        assert_eq!(stream.read(&mut buf).unwrap(), 0);
        client.join().unwrap();
    }

    #[test]
    fn verify_peer_intro_checks_registry() {
        let pki = test_pki();
        let (svm, scert, _) = vm_identity(&pki, 2);
        let (_, other_cert, _) = vm_identity(&pki, 3);
        let mut registry = spawn_registry(
            &pki,
            9,
            vec![("client".into(), svm, scert.clone(), pki.owner_a.0.clone())],
        );
        assert!(verify_peer_intro(&mut registry, "client", &scert).is_ok());
        assert_eq!(
            verify_peer_intro(&mut registry, "client", &other_cert).unwrap_err(),
            "certificate does not match registration"
        );
        assert_eq!(
            verify_peer_intro(&mut registry, "ghost", &scert).unwrap_err(),
            "peer is not registered"
        );
    }

    #[test]
    fn stream_survives_many_random_frames() {
        // A client stream and a raw echo peer push 10,000 random-sized
        // writes through; every byte must come back in order through
        // randomly sized reads.
        let pki = test_pki();
        let (svm, scert, skey) = vm_identity(&pki, 2);
        let registry = spawn_registry(
            &pki,
            1,
            vec![("server".into(), svm, scert.clone(), pki.owner_a.0.clone())],
        );
        let (client_end, server_end) = pipe_pair();
        let peer = spawn_echo_peer(&pki, scert, skey, server_end, true);
        let dialer = Box::new(ScriptedDialer {
            conns: Mutex::new(vec![(svm, client_end)]),
            dialed: Arc::new(Mutex::new(Vec::new())),
        });
        let (mut ctx, _tx) = make_ctx(&pki, 1, &pki.owner_a.0, registry, dialer);
        ctx.register("client").unwrap();
        let mut stream = ctx.dial("server", &[]).unwrap();

        let mut entropy = Entropy::from_seed([0x55; 32]);
        let mut sent = Vec::new();
        let mut received = Vec::new();
        let mut outstanding = 0usize;
        for i in 0..10_000 {
            let len = (u16::from_be_bytes(entropy.bytes()) % 700) as usize;
            let mut data = vec![0u8; len];
            entropy.fill(&mut data);
            stream.write(&data).unwrap();
            sent.extend_from_slice(&data);
            outstanding += len;
            // Drain periodically so neither side buffers unboundedly.
            if i % 7 == 0 {
                while outstanding > 0 {
                    let want = 1 + (u16::from_be_bytes(entropy.bytes()) % 900) as usize;
                    let mut buf = vec![0u8; want.min(outstanding)];
                    let n = stream.read(&mut buf).unwrap();
                    assert!(n > 0);
                    received.extend_from_slice(&buf[..n]);
                    outstanding -= n;
                }
            }
        }
        while outstanding > 0 {
            let mut buf = vec![0u8; outstanding];
            let n = stream.read(&mut buf).unwrap();
            received.extend_from_slice(&buf[..n]);
            outstanding -= n;
        }
        assert_eq!(crate::crypto::sha256(&sent), crate::crypto::sha256(&received));
        assert_eq!(sent.len(), received.len());
        stream.close();
        peer.join().unwrap();
    }

    #[test]
    fn lookup_tag_is_what_the_registry_dispatches_on() {
        // The broker dispatches on the first message byte; freeze it.
        let msg = Message::Lookup { name: "x".into() };
        assert_eq!(msg.encode()[4], TAG_LOOKUP);
    }
}
