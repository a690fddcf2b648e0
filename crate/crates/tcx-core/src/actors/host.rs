//! The machine operator. Stores sealed images, launches guests on its
//! TEE platform, routes carrier connections between guests and the
//! network — and is trusted with none of it.
//!
//! Every protection claim is exercised by a dishonest variant of this
//! actor: [`HostConduct`] selects one misbehavior per host instance, from
//! flipping ciphertext bits to answering in the broker's place. The
//! honest code path and the dishonest ones share all plumbing, so a
//! conduct can only change what an attacker in that position could
//! actually change.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, Weak};

use crate::actors::agent::AgentHandle;
use crate::actors::rootvm::BrokerHandle;
use crate::actors::{recv_msg_wait, send_msg, send_plain, SeatRouter};
use crate::boot::boot;
use crate::channel::{server_handshake_after, Channel, ChannelConfig};
use crate::crypto::{Entropy, SigKeypair};
use crate::fixtures::{rootvm_boot, scvm_boot, BootFixture};
use crate::image::SealedImage;
use crate::net::{frame_tag, BoxConn, Conn, Net, NetError};
use crate::pki::RoleCertificate;
use crate::proto::{ErrorCode, Message, TAG_ROUTE_REQUEST};
use crate::tee::{AttestationReport, MockTee, SealedInjection, TeeError, VendorRoot, VmId};
use crate::wire::Wire;

/// How this host behaves. Exactly one misbehavior per instance, so every
/// adversarial run isolates one claim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostConduct {
    Honest,
    /// Flip one ciphertext byte of the given block before handing the
    /// image to a guest.
    TamperImageBlock { block: u64 },
    /// Substitute a modified kernel when starting a workload guest.
    TamperKernel,
    /// Substitute modified kernel parameters.
    TamperParams,
    /// Substitute a modified root filesystem.
    TamperFs,
    /// Run guests on a platform whose endorsement is not from the real
    /// vendor.
    FakePlatform,
    /// Answer attestation requests with a previously captured report.
    ReplayReport,
    /// Re-deliver a previously captured secret injection to a different
    /// guest.
    ReplaySecret,
    /// Answer network connections addressed to the broker itself, with
    /// its own (host) credential.
    ImpersonateBroker,
}

pub struct HostService {
    inner: Arc<HostInner>,
}

struct HostInner {
    name: String,
    cert: RoleCertificate,
    key: SigKeypair,
    trust_root: RoleCertificate,
    tee: Arc<MockTee>,
    conduct: HostConduct,
    at_time: u64,
    rootvm_fix: BootFixture,
    scvm_fix: BootFixture,
    entropy: Mutex<Entropy>,
    state: Mutex<HostState>,
}

#[derive(Default)]
struct HostState {
    images: HashMap<[u8; 32], Vec<u8>>,
    broker: Option<BrokerHandle>,
    agents: HashMap<VmId, AgentHandle>,
    /// Most recent workload-guest report, kept for the replay conduct.
    last_workload_report: Option<AttestationReport>,
    /// Most recent secret injection seen, kept for the replay conduct.
    last_injection: Option<SealedInjection>,
}

/// The internal router guests reach the world through. Holds the host
/// weakly so a retired host's guest threads wind down instead of keeping
/// it alive.
struct HostRouter {
    inner: Weak<HostInner>,
}

impl SeatRouter for HostRouter {
    fn open(&self, destination: &str) -> Result<BoxConn, NetError> {
        let inner = self.inner.upgrade().ok_or(NetError::Closed)?;
        inner.open_internal(destination)
    }
}

impl HostService {
    pub fn new(
        name: &str,
        cert: RoleCertificate,
        key: SigKeypair,
        trust_root: RoleCertificate,
        vendor: &VendorRoot,
        conduct: HostConduct,
        at_time: u64,
        mut entropy: Entropy,
    ) -> HostService {
        let tee = if conduct == HostConduct::FakePlatform {
            // A knock-off platform: structurally identical, but its chip
            // key is endorsed by nobody the deploy service trusts.
            let fake_vendor = VendorRoot::new(&mut entropy);
            MockTee::create_unendorsed_platform(entropy.bytes(), &fake_vendor)
        } else {
            MockTee::create_platform(entropy.bytes(), vendor)
        };
        HostService {
            inner: Arc::new(HostInner {
                name: name.to_string(),
                cert,
                key,
                trust_root,
                tee: Arc::new(tee),
                conduct,
                at_time,
                rootvm_fix: rootvm_boot(),
                scvm_fix: scvm_boot(),
                entropy: Mutex::new(entropy),
                state: Mutex::new(HostState::default()),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Starts accepting connections from the network on this host's name.
    /// Returns once the listener is registered; serving happens on its
    /// own threads until the carrier shuts down.
    pub fn spawn_serve(&self, net: Arc<dyn Net>) -> Result<(), NetError> {
        let listener = net.listen(&self.inner.name)?;
        let inner = Arc::clone(&self.inner);
        std::thread::spawn(move || {
            while let Ok(conn) = listener.accept() {
                let inner = Arc::clone(&inner);
                std::thread::spawn(move || inner.handle_conn(conn));
            }
        });
        Ok(())
    }
}

impl HostInner {
    fn child_entropy(&self) -> Entropy {
        let mut e = self.entropy.lock().unwrap();
        Entropy::from_seed(e.bytes())
    }

    fn router(self: &Arc<Self>) -> Arc<dyn SeatRouter> {
        Arc::new(HostRouter { inner: Arc::downgrade(self) })
    }

    /// First frame decides what a connection is: a routing preamble gets
    /// forwarded to a guest, a channel hello starts the host's own API.
    fn handle_conn(self: Arc<Self>, conn: BoxConn) {
        let first = match conn.recv() {
            Ok(f) => f,
            Err(_) => return,
        };
        match frame_tag(&first) {
            Some(TAG_ROUTE_REQUEST) => {
                let destination = match Message::decode(&first) {
                    Ok(Message::RouteRequest { destination }) => destination,
                    _ => return,
                };
                self.route(conn, &destination);
            }
            Some(0x10) => self.api_channel(conn, first),
            _ => conn.close(),
        }
    }

    /// Connects a network carrier to the named guest seat and pumps
    /// frames both ways. The host never interprets what flows inside.
    fn route(self: &Arc<Self>, conn: BoxConn, destination: &str) {
        if destination == "broker" && self.conduct == HostConduct::ImpersonateBroker {
            // Grant the route, then answer the channel handshake in the
            // broker's place with the host's own credential.
            if send_plain(conn.as_ref(), &Message::RouteGranted).is_err() {
                return;
            }
            let first = match conn.recv() {
                Ok(f) => f,
                Err(_) => return,
            };
            if frame_tag(&first) == Some(0x10) {
                let _ = server_handshake_after(
                    conn,
                    &ChannelConfig {
                        cert: Some(&self.cert),
                        key: Some(&self.key),
                        trust_root: &self.trust_root,
                        expected_peer_role: None,
                        at_time: self.at_time,
                        allow_anonymous_peer: true,
                    },
                    &mut self.child_entropy(),
                    first,
                );
            }
            return;
        }
        match self.open_internal(destination) {
            Ok(seat) => {
                if send_plain(conn.as_ref(), &Message::RouteGranted).is_err() {
                    return;
                }
                pump(conn, seat);
            }
            Err(e) => {
                let _ = send_plain(
                    conn.as_ref(),
                    &Message::RouteError { reason: e.to_string() },
                );
                conn.close();
            }
        }
    }

    /// Opens an internal carrier to a guest seat (or the hypercall
    /// surface). Shared by network routing and the guests' own router.
    fn open_internal(self: &Arc<Self>, destination: &str) -> Result<BoxConn, NetError> {
        match destination {
            "host" => {
                let (guest_end, host_end) = crate::net::pipe_pair();
                let inner = Arc::clone(self);
                std::thread::spawn(move || inner.control_serve(host_end));
                Ok(Box::new(guest_end))
            }
            "broker" => {
                let state = self.state.lock().unwrap();
                let broker = state
                    .broker
                    .as_ref()
                    .ok_or_else(|| NetError::Refused("broker".into()))?;
                let (a, b) = crate::net::pipe_pair();
                broker
                    .conn_tx
                    .send(Box::new(b))
                    .map_err(|_| NetError::Closed)?;
                Ok(Box::new(a))
            }
            other => {
                let hex = other
                    .strip_prefix("vm:")
                    .ok_or_else(|| NetError::Refused(other.to_string()))?;
                let vm_id =
                    VmId::from_hex(hex).ok_or_else(|| NetError::Refused(other.to_string()))?;
                let state = self.state.lock().unwrap();
                let agent = state
                    .agents
                    .get(&vm_id)
                    .ok_or_else(|| NetError::Refused(other.to_string()))?;
                let (a, b) = crate::net::pipe_pair();
                agent
                    .conn_tx
                    .send(Box::new(b))
                    .map_err(|_| NetError::Closed)?;
                Ok(Box::new(a))
            }
        }
    }

    /// The hypercall surface: plaintext request/reply with a guest that
    /// needs the host to act (the broker launching siblings).
    fn control_serve(self: Arc<Self>, conn: crate::net::PipeConn) {
        loop {
            let frame = match conn.recv() {
                Ok(f) => f,
                // The broker holds this pipe for its lifetime; idle gaps
                // between hypercalls are normal.
                Err(NetError::Timeout) => continue,
                Err(_) => return,
            };
            let msg = match Message::decode(&frame) {
                Ok(m) => m,
                Err(_) => return,
            };
            let reply = match msg {
                Message::LaunchScVm => self.launch_scvm(),
                Message::AttestVm { vm_id, nonce } => self.attest_vm(vm_id, nonce),
                Message::DeliverSecret { vm_id, injection } => {
                    self.deliver_secret(vm_id, injection)
                }
                other => Message::ErrorReply {
                    code: ErrorCode::BadRequest,
                    message: format!("not a hypercall: {}", other.name()),
                },
            };
            if send_plain(&conn, &reply).is_err() {
                return;
            }
        }
    }

    /// The host's network API: image upload/fetch and VM lifecycle, used
    /// by the deploy service and container owners. Callers need not
    /// authenticate — nothing here is trusted anyway.
    fn api_channel(self: &Arc<Self>, conn: BoxConn, first: Vec<u8>) {
        let chan = server_handshake_after(
            conn,
            &ChannelConfig {
                cert: Some(&self.cert),
                key: Some(&self.key),
                trust_root: &self.trust_root,
                expected_peer_role: None,
                at_time: self.at_time,
                allow_anonymous_peer: true,
            },
            &mut self.child_entropy(),
            first,
        );
        let mut chan: Channel = match chan {
            Ok(c) => c,
            Err(_) => return,
        };
        loop {
            let msg = match recv_msg_wait(&mut chan) {
                Ok(m) => m,
                Err(_) => return,
            };
            let reply = match msg {
                Message::UploadImage { bytes } => self.upload_image(bytes),
                Message::FetchImage { image_id } => {
                    match self.state.lock().unwrap().images.get(&image_id) {
                        Some(bytes) => Message::FetchOk { bytes: bytes.clone() },
                        None => Message::ErrorReply {
                            code: ErrorCode::NoSuchImage,
                            message: format!("no image {}", hex::encode(image_id)),
                        },
                    }
                }
                Message::LaunchRootVm => self.launch_rootvm(),
                Message::LaunchScVm => self.launch_scvm(),
                Message::AttestVm { vm_id, nonce } => self.attest_vm(vm_id, nonce),
                Message::DeliverSecret { vm_id, injection } => {
                    self.deliver_secret(vm_id, injection)
                }
                Message::LoadImageIntoVm { vm_id, image_id } => {
                    self.load_image_into_vm(vm_id, image_id)
                }
                other => Message::ErrorReply {
                    code: ErrorCode::BadRequest,
                    message: format!("not a host operation: {}", other.name()),
                },
            };
            if send_msg(&mut chan, &reply).is_err() {
                return;
            }
        }
    }

    fn upload_image(&self, bytes: Vec<u8>) -> Message {
        let image = match SealedImage::from_bytes(&bytes) {
            Ok(i) => i,
            Err(e) => {
                return Message::ErrorReply {
                    code: ErrorCode::BadRequest,
                    message: format!("unusable image: {e}"),
                }
            }
        };
        let image_id = image.header.image_id;
        self.state.lock().unwrap().images.insert(image_id, bytes);
        Message::UploadOk { image_id }
    }

    /// Boots the broker guest from the canned broker build. One per host.
    fn launch_rootvm(self: &Arc<Self>) -> Message {
        {
            let state = self.state.lock().unwrap();
            if state.broker.is_some() {
                return Message::ErrorReply {
                    code: ErrorCode::BadRequest,
                    message: "broker vm is already running".into(),
                };
            }
        }
        let fix = &self.rootvm_fix;
        if let Err(reject) = boot(&fix.blob, &fix.kernel, &fix.params, &fix.fs_image) {
            return Message::ErrorReply {
                code: ErrorCode::BootRejected,
                message: format!("boot rejected: {reject}"),
            };
        }
        let (vm_id, _) = match self.tee.launch_vm(&fix.payload) {
            Ok(v) => v,
            Err(e) => {
                return Message::ErrorReply {
                    code: ErrorCode::Internal,
                    message: e.to_string(),
                }
            }
        };
        let handle = BrokerHandle::start(
            Arc::clone(&self.tee),
            vm_id,
            self.router(),
            self.at_time,
            self.child_entropy(),
        );
        self.state.lock().unwrap().broker = Some(handle);
        Message::LaunchOk { vm_id }
    }

    /// Boots one workload guest. The tampering conducts act here, on the
    /// inputs the host hands the booting guest; the guest's firmware
    /// checks them against what the measured payload pinned.
    fn launch_scvm(self: &Arc<Self>) -> Message {
        let fix = &self.scvm_fix;
        let mut kernel = fix.kernel.clone();
        let mut params = fix.params.clone();
        let mut fs_image = fix.fs_image.clone();
        match self.conduct {
            HostConduct::TamperKernel => kernel[0] ^= 1,
            HostConduct::TamperParams => params[0] ^= 1,
            HostConduct::TamperFs => fs_image[0] ^= 1,
            _ => {}
        }
        if let Err(reject) = boot(&fix.blob, &kernel, &params, &fs_image) {
            return Message::ErrorReply {
                code: ErrorCode::BootRejected,
                message: format!("boot rejected: {reject}"),
            };
        }
        let (vm_id, _) = match self.tee.launch_vm(&fix.payload) {
            Ok(v) => v,
            Err(e) => {
                return Message::ErrorReply {
                    code: ErrorCode::Internal,
                    message: e.to_string(),
                }
            }
        };
        let handle = AgentHandle::start(
            Arc::clone(&self.tee),
            vm_id,
            self.router(),
            self.at_time,
            self.child_entropy(),
        );
        self.state.lock().unwrap().agents.insert(vm_id, handle);
        Message::LaunchOk { vm_id }
    }

    fn attest_vm(&self, vm_id: VmId, nonce: [u8; 16]) -> Message {
        if self.conduct == HostConduct::ReplayReport {
            let replayed = self.state.lock().unwrap().last_workload_report.clone();
            if let Some(report) = replayed {
                return Message::AttestOk { report };
            }
        }
        match self.tee.attest(vm_id, nonce) {
            Ok(report) => {
                let mut state = self.state.lock().unwrap();
                if state.agents.contains_key(&vm_id) {
                    state.last_workload_report = Some(report.clone());
                }
                Message::AttestOk { report }
            }
            Err(TeeError::NoSuchVm) => Message::ErrorReply {
                code: ErrorCode::NoSuchVm,
                message: format!("no vm {}", vm_id.to_hex()),
            },
            Err(e) => Message::ErrorReply {
                code: ErrorCode::Internal,
                message: e.to_string(),
            },
        }
    }

    /// Passes a sealed secret into a guest. The host holds only
    /// ciphertext; the guest's platform decides whether it opens.
    fn deliver_secret(&self, vm_id: VmId, injection: SealedInjection) -> Message {
        let injection = {
            let mut state = self.state.lock().unwrap();
            let substituted = if self.conduct == HostConduct::ReplaySecret {
                state
                    .last_injection
                    .clone()
                    .filter(|old| old.target_vm_id != injection.target_vm_id)
            } else {
                None
            };
            match substituted {
                Some(old) => old,
                None => {
                    state.last_injection = Some(injection.clone());
                    injection
                }
            }
        };
        let receiver = {
            let state = self.state.lock().unwrap();
            if let Some(broker) = state.broker.as_ref().filter(|b| b.vm_id == vm_id) {
                Some(SecretReceiver::Broker(Arc::clone(&broker.control)))
            } else {
                state
                    .agents
                    .get(&vm_id)
                    .map(|a| SecretReceiver::Agent(Arc::clone(&a.control)))
            }
        };
        let result = match receiver {
            Some(SecretReceiver::Broker(c)) => c.receive_identity(&injection),
            Some(SecretReceiver::Agent(c)) => c.receive_identity(&injection),
            None => {
                return Message::ErrorReply {
                    code: ErrorCode::NoSuchVm,
                    message: format!("no vm {}", vm_id.to_hex()),
                }
            }
        };
        match result {
            Ok(()) => Message::DeliverOk,
            Err(message) => Message::ErrorReply {
                code: ErrorCode::DecryptFailure,
                message,
            },
        }
    }

    /// Hands stored image bytes to a guest's staging area. The tampering
    /// conduct flips one ciphertext byte on the way.
    fn load_image_into_vm(&self, vm_id: VmId, image_id: [u8; 32]) -> Message {
        let bytes = match self.state.lock().unwrap().images.get(&image_id) {
            Some(b) => b.clone(),
            None => {
                return Message::ErrorReply {
                    code: ErrorCode::NoSuchImage,
                    message: format!("no image {}", hex::encode(image_id)),
                }
            }
        };
        let bytes = match self.conduct {
            HostConduct::TamperImageBlock { block } => tamper_block(bytes, block),
            _ => bytes,
        };
        let state = self.state.lock().unwrap();
        match state.agents.get(&vm_id) {
            Some(agent) => {
                agent.control.deliver_image(image_id, bytes);
                Message::LoadTriggerOk
            }
            None => Message::ErrorReply {
                code: ErrorCode::NoSuchVm,
                message: format!("no vm {}", vm_id.to_hex()),
            },
        }
    }
}

enum SecretReceiver {
    Broker(Arc<crate::actors::rootvm::BrokerControl>),
    Agent(Arc<crate::actors::agent::AgentControl>),
}

/// Flips one byte in the ciphertext of the given block, re-serializing
/// the image otherwise untouched.
fn tamper_block(bytes: Vec<u8>, block: u64) -> Vec<u8> {
    let mut image = match SealedImage::from_bytes(&bytes) {
        Ok(i) => i,
        Err(_) => return bytes,
    };
    match image.blocks.get_mut(block as usize) {
        Some(b) => b[0] ^= 1,
        None => return bytes,
    }
    image.to_bytes()
}

/// Copies frames between a network carrier and an internal seat, both
/// ways, until either side closes.
fn pump_leg(from: &dyn Conn, to: &dyn Conn) {
    loop {
        match from.recv() {
            Ok(frame) => {
                if to.send(&frame).is_err() {
                    return;
                }
            }
            // An idle connection is not a finished one.
            Err(NetError::Timeout) => continue,
            Err(_) => return,
        }
    }
}

fn pump(outer: BoxConn, inner: BoxConn) {
    let outer: Arc<dyn Conn> = Arc::from(outer);
    let inner: Arc<dyn Conn> = Arc::from(inner);
    {
        let outer = Arc::clone(&outer);
        let inner = Arc::clone(&inner);
        std::thread::spawn(move || {
            pump_leg(inner.as_ref(), outer.as_ref());
            outer.close();
        });
    }
    pump_leg(outer.as_ref(), inner.as_ref());
    inner.close();
}
