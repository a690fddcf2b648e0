//! The per-host broker guest. Until its identity arrives it is inert;
//! after the deploy service attests it and injects its certified identity
//! it starts serving channels: owners ask it to create workload VMs,
//! agents register service names and look peers up.
//!
//! Creating a workload VM is the trust-critical path: the broker launches
//! it through the host, challenges the platform with the caller's nonce,
//! verifies the report against the expected runtime measurement, and only
//! then issues the VM a certificate from its instance CA and injects the
//! key — sealed to exactly that VM instance. The reply to the owner is
//! held until the new agent's channels are up, so a successful creation
//! is immediately usable.

use std::collections::HashMap;
use std::sync::mpsc::{Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};

use crate::actors::{
    recv_msg_wait, refusal, request_plain, send_msg, ActorError, RootVmIdentity, ScVmIdentity,
    SeatRouter,
};
use crate::channel::{server_handshake_after, Channel, ChannelConfig};
use crate::crypto::{DhKeypair, Entropy, SigKeypair};
use crate::net::{frame_tag, BoxConn};
use crate::pki::{ca_handle, issue_certificate, Role, RoleCertificate, DEFAULT_SCVM_LIFETIME_SECS};
use crate::proto::{ErrorCode, Message};
use crate::tee::{inject_secret, verify_report, AttestationReport, MockTee, SealedInjection, VmId};
use crate::wire::Wire;

/// Host-side handle to a broker guest: where routed connections go, and
/// the control surface the host drives directly.
pub struct BrokerHandle {
    pub vm_id: VmId,
    pub conn_tx: Sender<BoxConn>,
    pub control: Arc<BrokerControl>,
}

pub struct BrokerControl {
    tee: Arc<MockTee>,
    vm_id: VmId,
    router: Arc<dyn SeatRouter>,
    at_time: u64,
    entropy: Mutex<Entropy>,
    conn_rx: Mutex<Option<Receiver<BoxConn>>>,
    host_pipe: Mutex<Option<BoxConn>>,
    state: Mutex<BrokerState>,
    ready_cv: Condvar,
}

struct RegEntry {
    vm_id: VmId,
    cert_vm: RoleCertificate,
    cert_owner: RoleCertificate,
}

struct VmRecord {
    cert_vm: RoleCertificate,
    cert_owner: RoleCertificate,
    ready: bool,
}

#[derive(Default)]
struct BrokerState {
    identity: Option<RootVmIdentity>,
    registry: HashMap<String, RegEntry>,
    vms: HashMap<VmId, VmRecord>,
}

impl BrokerHandle {
    /// Creates the seat for a launched broker VM. It does nothing until
    /// `receive_identity` succeeds.
    pub fn start(
        tee: Arc<MockTee>,
        vm_id: VmId,
        router: Arc<dyn SeatRouter>,
        at_time: u64,
        entropy: Entropy,
    ) -> BrokerHandle {
        let (conn_tx, conn_rx) = std::sync::mpsc::channel();
        let control = Arc::new(BrokerControl {
            tee,
            vm_id,
            router,
            at_time,
            entropy: Mutex::new(entropy),
            conn_rx: Mutex::new(Some(conn_rx)),
            host_pipe: Mutex::new(None),
            state: Mutex::new(BrokerState::default()),
            ready_cv: Condvar::new(),
        });
        BrokerHandle { vm_id, conn_tx, control }
    }
}

impl BrokerControl {
    /// Decrypts the injected identity bundle inside the guest and brings
    /// the broker's services up. Called by the host when the deploy
    /// service delivers the sealed secret.
    pub fn receive_identity(self: &Arc<Self>, sealed: &SealedInjection) -> Result<(), String> {
        let plaintext = self
            .tee
            .receive_secret(self.vm_id, sealed)
            .map_err(|e| format!("secret rejected: {e}"))?;
        let identity =
            RootVmIdentity::decode(&plaintext).map_err(|e| format!("bad identity bundle: {e}"))?;
        {
            let mut state = self.state.lock().unwrap();
            if state.identity.is_some() {
                return Err("identity already installed".into());
            }
            state.identity = Some(identity);
        }
        let control = Arc::clone(self);
        std::thread::spawn(move || control.accept_loop());
        Ok(())
    }

    pub fn is_identified(&self) -> bool {
        self.state.lock().unwrap().identity.is_some()
    }

    fn identity(&self) -> RootVmIdentity {
        self.state
            .lock()
            .unwrap()
            .identity
            .clone()
            .expect("broker serves only after identification")
    }

    fn accept_loop(self: Arc<Self>) {
        let rx = self
            .conn_rx
            .lock()
            .unwrap()
            .take()
            .expect("accept loop starts once");
        for conn in rx {
            let control = Arc::clone(&self);
            std::thread::spawn(move || control.handle_conn(conn));
        }
    }

    fn handle_conn(self: Arc<Self>, conn: BoxConn) {
        let first = match conn.recv() {
            Ok(f) => f,
            Err(_) => return,
        };
        if frame_tag(&first) != Some(0x10) {
            return;
        }
        let identity = self.identity();
        let key = identity.keypair();
        let mut entropy = {
            let mut e = self.entropy.lock().unwrap();
            Entropy::from_seed(e.bytes())
        };
        let chan = server_handshake_after(
            conn,
            &ChannelConfig {
                cert: Some(&identity.cert),
                key: Some(&key),
                trust_root: &identity.trust_root,
                expected_peer_role: None,
                at_time: self.at_time,
                allow_anonymous_peer: false,
            },
            &mut entropy,
            first,
        );
        let mut chan = match chan {
            Ok(c) => c,
            Err(_) => return,
        };
        let peer = chan.peer_cert().expect("mutual handshake").clone();
        match peer.role {
            Role::ContainerOwner => self.owner_session(&mut chan, &peer),
            Role::ScVm => self.agent_session(&mut chan, &peer),
            _ => chan.close(),
        }
    }

    /// Serves one container owner: VM creation and registry queries.
    fn owner_session(self: &Arc<Self>, chan: &mut Channel, owner: &RoleCertificate) {
        loop {
            let msg = match recv_msg_wait(chan) {
                Ok(m) => m,
                Err(_) => return,
            };
            let reply = match msg {
                Message::CreateScvm { image_id, nonce } => {
                    match self.create_scvm(owner, image_id, nonce) {
                        Ok((vm_id, cert_vm, report)) => {
                            Message::CreateScvmOk { vm_id, cert_vm, report }
                        }
                        Err(e) => refusal(&e),
                    }
                }
                Message::ListNames => self.list_names(),
                Message::Lookup { name } => self.lookup(&name),
                other => Message::ErrorReply {
                    code: ErrorCode::BadRequest,
                    message: format!("not an owner operation: {}", other.name()),
                },
            };
            if send_msg(chan, &reply).is_err() {
                return;
            }
        }
    }

    /// Serves one workload guest: registration, lookup, readiness.
    /// Names registered on this channel vanish when it closes.
    fn agent_session(self: &Arc<Self>, chan: &mut Channel, agent: &RoleCertificate) {
        let vm_id = match VmId::from_hex(&agent.subject_name) {
            Some(id) => id,
            None => return,
        };
        // Only guests this broker created may use its registry.
        {
            let state = self.state.lock().unwrap();
            match state.vms.get(&vm_id) {
                Some(rec) if rec.cert_vm == *agent => {}
                _ => return,
            }
        }
        let mut owned_names: Vec<String> = Vec::new();
        loop {
            let msg = match recv_msg_wait(chan) {
                Ok(m) => m,
                Err(_) => break,
            };
            let reply = match msg {
                Message::Register { name } => {
                    let mut state = self.state.lock().unwrap();
                    if state.registry.contains_key(&name) {
                        Message::ErrorReply {
                            code: ErrorCode::NameTaken,
                            message: format!("{name:?} is already registered"),
                        }
                    } else {
                        let cert_owner = state
                            .vms
                            .get(&vm_id)
                            .expect("checked at session start")
                            .cert_owner
                            .clone();
                        state.registry.insert(
                            name.clone(),
                            RegEntry { vm_id, cert_vm: agent.clone(), cert_owner },
                        );
                        owned_names.push(name);
                        Message::RegisterOk
                    }
                }
                Message::Lookup { name } => self.lookup(&name),
                Message::ListNames => self.list_names(),
                Message::AgentReady => {
                    let mut state = self.state.lock().unwrap();
                    if let Some(rec) = state.vms.get_mut(&vm_id) {
                        rec.ready = true;
                    }
                    self.ready_cv.notify_all();
                    Message::ReadyAck
                }
                other => Message::ErrorReply {
                    code: ErrorCode::BadRequest,
                    message: format!("not an agent operation: {}", other.name()),
                },
            };
            if send_msg(chan, &reply).is_err() {
                break;
            }
        }
        if !owned_names.is_empty() {
            let mut state = self.state.lock().unwrap();
            for name in owned_names {
                state.registry.remove(&name);
            }
        }
    }

    fn lookup(&self, name: &str) -> Message {
        let state = self.state.lock().unwrap();
        match state.registry.get(name) {
            Some(entry) => Message::LookupOk {
                name: name.to_string(),
                vm_id: entry.vm_id,
                cert_vm: entry.cert_vm.clone(),
                cert_owner: entry.cert_owner.clone(),
            },
            None => Message::ErrorReply {
                code: ErrorCode::UnknownName,
                message: name.to_string(),
            },
        }
    }

    fn list_names(&self) -> Message {
        let state = self.state.lock().unwrap();
        let mut names: Vec<String> = state.registry.keys().cloned().collect();
        names.sort();
        Message::NamesOk { names }
    }

    /// Runs one exchange on the persistent hypercall pipe to the host.
    fn host_request(&self, msg: &Message) -> Result<Message, ActorError> {
        let mut pipe = self.host_pipe.lock().unwrap();
        if pipe.is_none() {
            *pipe = Some(self.router.open("host")?);
        }
        let conn = pipe.as_ref().expect("just opened");
        request_plain(conn.as_ref(), msg)
    }

    /// Launch, attest, certify, inject — the whole creation flow for one
    /// workload VM on behalf of `owner`.
    fn create_scvm(
        self: &Arc<Self>,
        owner: &RoleCertificate,
        _image_id: [u8; 32],
        nonce: [u8; 16],
    ) -> Result<(VmId, RoleCertificate, AttestationReport), ActorError> {
        let identity = self.identity();

        let vm_id = match self.host_request(&Message::LaunchScVm)? {
            Message::LaunchOk { vm_id } => vm_id,
            other => {
                return Err(ActorError::Unexpected { got: other.name(), expected: "launch-ok" })
            }
        };

        let report = match self.host_request(&Message::AttestVm { vm_id, nonce })? {
            Message::AttestOk { report } => report,
            other => {
                return Err(ActorError::Unexpected { got: other.name(), expected: "attest-ok" })
            }
        };
        verify_report(&report, &identity.scvm_measurement, &nonce, &identity.vendor_public)
            .map_err(ActorError::Report)?;
        if report.measurement.vm_id != vm_id {
            return Err(ActorError::refused(
                ErrorCode::WrongMeasurement,
                "report names a different vm instance",
            ));
        }

        let (keypair, cert_vm) = {
            let mut entropy = self.entropy.lock().unwrap();
            let keypair = SigKeypair::generate(&mut entropy);
            let ca = ca_handle(identity.cert.clone(), identity.keypair());
            let cert_vm = issue_certificate(
                &ca,
                &vm_id.to_hex(),
                Role::ScVm,
                keypair.public(),
                self.at_time,
                self.at_time + DEFAULT_SCVM_LIFETIME_SECS,
            )
            .map_err(|e| ActorError::refused(ErrorCode::Internal, e.to_string()))?;
            (keypair, cert_vm)
        };

        // Record the VM before the secret lands so its agent's channels
        // find it no matter how fast they come up.
        {
            let mut state = self.state.lock().unwrap();
            state.vms.insert(
                vm_id,
                VmRecord {
                    cert_vm: cert_vm.clone(),
                    cert_owner: owner.clone(),
                    ready: false,
                },
            );
        }

        let bundle = ScVmIdentity {
            cert_vm: cert_vm.clone(),
            key_secret: keypair.secret_bytes(),
            cert_owner: owner.clone(),
            trust_root: identity.trust_root.clone(),
        };
        let injection = {
            let mut entropy = self.entropy.lock().unwrap();
            let dh = DhKeypair::generate(&mut entropy);
            inject_secret(&report, &bundle.encode(), &dh, &mut entropy)
        };
        match self.host_request(&Message::DeliverSecret { vm_id, injection })? {
            Message::DeliverOk => {}
            other => {
                return Err(ActorError::Unexpected { got: other.name(), expected: "deliver-ok" })
            }
        }

        // Hold the reply until the agent's service channels are up, so the
        // owner can dial it the moment creation returns.
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
        let mut state = self.state.lock().unwrap();
        while !state.vms.get(&vm_id).map(|r| r.ready).unwrap_or(false) {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return Err(ActorError::refused(
                    ErrorCode::Internal,
                    "vm never announced readiness",
                ));
            }
            state = self.ready_cv.wait_timeout(state, left).unwrap().0;
        }
        Ok((vm_id, cert_vm, report))
    }
}
