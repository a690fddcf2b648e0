//! The in-guest supervisor of one confidential workload VM.
//!
//! The agent is inert until the broker's sealed identity arrives through
//! the platform. It then opens authenticated channels to the broker —
//! pinned to the exact certificate that issued its own — announces
//! readiness, and starts dispatching routed connections: its owner gets a
//! command surface (load image, exec, wait, status, stop), sibling guests
//! get peer streams, but only after their intro matches the registry.
//!
//! Image ciphertext is pushed in by the host; nothing about it is trusted
//! until the owner's key arrives over the owner channel and every block
//! authenticates.

use std::collections::HashMap;
use std::sync::mpsc::{Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};

use crate::actors::{recv_msg, recv_msg_wait, send_msg, ScVmIdentity, SeatRouter};
use crate::channel::{client_handshake, server_handshake_after, Channel, ChannelConfig};
use crate::crypto::Entropy;
use crate::fixtures::{native_workload, workload_layer};
use crate::image::{open_image, snapshot_write, verify_image, ImageError, ImageKey, OverlayFile, SealedImage};
use crate::net::{frame_tag, BoxConn, NetError};
use crate::pki::Role;
use crate::proto::{CommandBody, ErrorCode, Message, ResponseBody};
use crate::sclib::{verify_peer_intro, PeerStream, ScContext, Stream, VmDialer};
use crate::tee::{MockTee, SealedInjection, VmId};
use crate::wire::Wire;

/// Lifecycle of the guest as its owner sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Booted,
    Identified,
    ImageLoaded,
    Running,
    Stopped,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Booted => "booted",
            Phase::Identified => "identified",
            Phase::ImageLoaded => "image-loaded",
            Phase::Running => "running",
            Phase::Stopped => "stopped",
        }
    }
}

/// Host-side handle to a workload guest: where routed connections go, and
/// the control surface the host drives directly.
pub struct AgentHandle {
    pub vm_id: VmId,
    pub conn_tx: Sender<BoxConn>,
    pub control: Arc<AgentControl>,
}

pub struct AgentControl {
    tee: Arc<MockTee>,
    vm_id: VmId,
    router: Arc<dyn SeatRouter>,
    at_time: u64,
    entropy: Mutex<Entropy>,
    conn_rx: Mutex<Option<Receiver<BoxConn>>>,
    shared: Mutex<AgentShared>,
    cond: Condvar,
}

struct LoadedWork {
    sealed: SealedImage,
    overlay: OverlayFile,
    key: ImageKey,
}

#[derive(Default)]
struct AgentShared {
    identity: Option<ScVmIdentity>,
    /// Ciphertext staged by the host, untrusted until the key authenticates it.
    images: HashMap<[u8; 32], Vec<u8>>,
    work: Option<LoadedWork>,
    phase: Option<Phase>,
    last_seq: u64,
    /// The guest context, parked here between workload runs.
    ctx: Option<ScContext>,
    /// Registry channel the dispatcher uses for intro checks and status.
    disp_registry: Option<Channel>,
    peer_tx: Option<Sender<PeerStream>>,
    output: Option<Result<Vec<u8>, String>>,
}

/// Reaches sibling guests through the host's internal router.
struct RouterDialer {
    router: Arc<dyn SeatRouter>,
}

impl VmDialer for RouterDialer {
    fn dial_vm(&self, vm_id: VmId) -> Result<BoxConn, NetError> {
        self.router.open(&format!("vm:{}", vm_id.to_hex()))
    }
}

impl AgentHandle {
    /// Creates the seat for a launched workload VM. It does nothing until
    /// `receive_identity` succeeds.
    pub fn start(
        tee: Arc<MockTee>,
        vm_id: VmId,
        router: Arc<dyn SeatRouter>,
        at_time: u64,
        entropy: Entropy,
    ) -> AgentHandle {
        let (conn_tx, conn_rx) = std::sync::mpsc::channel();
        let control = Arc::new(AgentControl {
            tee,
            vm_id,
            router,
            at_time,
            entropy: Mutex::new(entropy),
            conn_rx: Mutex::new(Some(conn_rx)),
            shared: Mutex::new(AgentShared {
                phase: Some(Phase::Booted),
                ..AgentShared::default()
            }),
            cond: Condvar::new(),
        });
        AgentHandle { vm_id, conn_tx, control }
    }
}

impl AgentControl {
    /// Decrypts the injected identity bundle inside the guest, connects to
    /// the broker and brings the dispatcher up. Called by the host when
    /// the broker delivers the sealed secret.
    pub fn receive_identity(self: &Arc<Self>, sealed: &SealedInjection) -> Result<(), String> {
        let plaintext = self
            .tee
            .receive_secret(self.vm_id, sealed)
            .map_err(|e| format!("secret rejected: {e}"))?;
        let identity =
            ScVmIdentity::decode(&plaintext).map_err(|e| format!("bad identity bundle: {e}"))?;
        if identity.cert_vm.subject_name != self.vm_id.to_hex() {
            return Err("identity certificate names a different vm".into());
        }
        {
            let mut shared = self.shared.lock().unwrap();
            if shared.identity.is_some() {
                return Err("identity already installed".into());
            }
            shared.identity = Some(identity);
            shared.phase = Some(Phase::Identified);
        }
        let control = Arc::clone(self);
        std::thread::spawn(move || control.startup());
        Ok(())
    }

    /// Stages image ciphertext inside the guest. It stays opaque until the
    /// owner supplies the key.
    pub fn deliver_image(&self, image_id: [u8; 32], bytes: Vec<u8>) {
        self.shared.lock().unwrap().images.insert(image_id, bytes);
    }

    pub fn phase(&self) -> &'static str {
        self.shared
            .lock()
            .unwrap()
            .phase
            .expect("phase is always set")
            .as_str()
    }

    fn identity(&self) -> ScVmIdentity {
        self.shared
            .lock()
            .unwrap()
            .identity
            .clone()
            .expect("dispatcher runs only after identification")
    }

    fn child_entropy(&self) -> Entropy {
        let mut e = self.entropy.lock().unwrap();
        Entropy::from_seed(e.bytes())
    }

    /// Opens an authenticated channel to this guest's broker. The peer
    /// must present exactly the certificate that issued ours — a host
    /// routing us anywhere else is caught here.
    fn open_broker_channel(&self, identity: &ScVmIdentity) -> Result<Channel, String> {
        let conn = self
            .router
            .open("broker")
            .map_err(|e| format!("broker unreachable: {e}"))?;
        let key = identity.keypair();
        let chan = client_handshake(
            conn,
            &ChannelConfig {
                cert: Some(&identity.cert_vm),
                key: Some(&key),
                trust_root: &identity.trust_root,
                expected_peer_role: Some(Role::RootVm),
                at_time: self.at_time,
                allow_anonymous_peer: false,
            },
            &mut self.child_entropy(),
        )
        .map_err(|e| format!("broker handshake failed: {e}"))?;
        let issuer = identity
            .cert_vm
            .issuer_chain
            .first()
            .ok_or("own certificate has no issuer")?;
        let presented = chan.peer_cert().ok_or("broker sent no certificate")?;
        if presented.encode() != issuer.encode() {
            return Err("endpoint is not the broker that issued this vm".into());
        }
        Ok(chan)
    }

    /// Connects both broker channels, announces readiness, and starts the
    /// connection dispatcher. Runs once, right after identification.
    fn startup(self: Arc<Self>) {
        let identity = self.identity();
        let result = (|| -> Result<(), String> {
            let ctx_registry = self.open_broker_channel(&identity)?;
            let mut disp_registry = self.open_broker_channel(&identity)?;

            let (peer_tx, peer_rx) = std::sync::mpsc::channel();
            let ctx = ScContext::new(
                identity.cert_vm.clone(),
                identity.keypair(),
                identity.cert_owner.clone(),
                identity.trust_root.clone(),
                ctx_registry,
                Box::new(RouterDialer { router: Arc::clone(&self.router) }),
                peer_rx,
                self.child_entropy(),
                self.at_time,
            );

            send_msg(&mut disp_registry, &Message::AgentReady)
                .map_err(|e| format!("readiness announcement failed: {e}"))?;
            match recv_msg(&mut disp_registry) {
                Ok(Message::ReadyAck) => {}
                Ok(other) => return Err(format!("broker answered readiness with {}", other.name())),
                Err(e) => return Err(format!("readiness announcement failed: {e}")),
            }

            let mut shared = self.shared.lock().unwrap();
            shared.ctx = Some(ctx);
            shared.disp_registry = Some(disp_registry);
            shared.peer_tx = Some(peer_tx);
            Ok(())
        })();
        if let Err(msg) = result {
            let mut shared = self.shared.lock().unwrap();
            shared.output = Some(Err(msg));
            shared.phase = Some(Phase::Stopped);
            self.cond.notify_all();
            return;
        }
        self.dispatch_loop();
    }

    fn dispatch_loop(self: Arc<Self>) {
        let rx = self
            .conn_rx
            .lock()
            .unwrap()
            .take()
            .expect("dispatcher starts once");
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
        let chan = server_handshake_after(
            conn,
            &ChannelConfig {
                cert: Some(&identity.cert_vm),
                key: Some(&key),
                trust_root: &identity.trust_root,
                expected_peer_role: None,
                at_time: self.at_time,
                allow_anonymous_peer: false,
            },
            &mut self.child_entropy(),
            first,
        );
        let mut chan = match chan {
            Ok(c) => c,
            Err(_) => return,
        };
        let peer = chan.peer_cert().expect("mutual handshake").clone();
        match peer.role {
            Role::ContainerOwner => self.command_loop(&mut chan, &peer),
            Role::ScVm => self.peer_session(chan, &peer.clone()),
            _ => chan.close(),
        }
    }

    /// Admits (or refuses) one incoming peer stream: the intro name must
    /// resolve in the registry to exactly the certificate on the channel.
    fn peer_session(&self, mut chan: Channel, peer: &crate::pki::RoleCertificate) {
        let name = match recv_msg(&mut chan) {
            Ok(Message::PeerIntro { name }) => name,
            _ => return,
        };
        let mut registry = match self.shared.lock().unwrap().disp_registry.take() {
            Some(r) => r,
            None => return,
        };
        let verdict = verify_peer_intro(&mut registry, &name, peer);
        self.shared.lock().unwrap().disp_registry = Some(registry);
        match verdict {
            Ok(()) => {
                if send_msg(&mut chan, &Message::PeerAccept).is_err() {
                    return;
                }
                let tx = self.shared.lock().unwrap().peer_tx.clone();
                if let Some(tx) = tx {
                    let _ = tx.send(PeerStream { peer_name: name, channel: chan });
                }
            }
            Err(reason) => {
                let _ = send_msg(&mut chan, &Message::PeerReject { reason });
                chan.close();
            }
        }
    }

    /// Serves one owner channel. Commands from anyone but the owner this
    /// VM was created for are refused without execution.
    fn command_loop(self: &Arc<Self>, chan: &mut Channel, peer: &crate::pki::RoleCertificate) {
        let identity = self.identity();
        let is_owner = peer.fingerprint() == identity.cert_owner.fingerprint();
        loop {
            let (sequence, body) = match recv_msg_wait(chan) {
                Ok(Message::OwnerCommand { sequence, body }) => (sequence, body),
                Ok(_) => {
                    let reply = Message::ErrorReply {
                        code: ErrorCode::BadRequest,
                        message: "expected an owner command".into(),
                    };
                    if send_msg(chan, &reply).is_err() {
                        return;
                    }
                    continue;
                }
                Err(_) => return,
            };
            let reply = if !is_owner {
                Err((
                    ErrorCode::OwnerMismatch,
                    "this vm belongs to a different owner".to_string(),
                ))
            } else {
                self.admit_sequence(sequence)
                    .and_then(|()| self.run_command(body))
            };
            let reply = match reply {
                Ok(body) => Message::AgentResponse { sequence, body },
                Err((code, message)) => Message::ErrorReply { code, message },
            };
            if send_msg(chan, &reply).is_err() {
                return;
            }
        }
    }

    /// Owner commands carry a strictly increasing sequence; anything at or
    /// below the high-water mark is a replay and is never executed.
    fn admit_sequence(&self, sequence: u64) -> Result<(), (ErrorCode, String)> {
        let mut shared = self.shared.lock().unwrap();
        if sequence <= shared.last_seq {
            return Err((
                ErrorCode::ReplayedCommand,
                format!("command sequence {sequence} was already used"),
            ));
        }
        shared.last_seq = sequence;
        Ok(())
    }

    fn run_command(self: &Arc<Self>, body: CommandBody) -> Result<ResponseBody, (ErrorCode, String)> {
        match body {
            CommandBody::LoadImage { image_key } => self.load_image(image_key),
            CommandBody::Exec { entry } => self.exec(&entry),
            CommandBody::Wait => self.wait_output(),
            CommandBody::Status => self.status(),
            CommandBody::Stop => self.stop(),
        }
    }

    /// Authenticates the staged ciphertext under the owner's key and makes
    /// it this guest's filesystem. Every block is checked up front, so a
    /// tampered image never becomes readable at all.
    fn load_image(&self, key: ImageKey) -> Result<ResponseBody, (ErrorCode, String)> {
        let mut shared = self.shared.lock().unwrap();
        if shared.phase == Some(Phase::Running) {
            return Err((ErrorCode::WrongPhase, "a workload is running".into()));
        }
        let bytes = shared.images.get(&key.image_id).ok_or((
            ErrorCode::NoSuchImage,
            format!("image {} was never delivered to this vm", hex::encode(key.image_id)),
        ))?;
        let sealed = SealedImage::from_bytes(bytes).map_err(image_refusal)?;
        verify_image(&sealed, &key).map_err(image_refusal)?;
        let overlay = OverlayFile::new(&sealed);
        shared.work = Some(LoadedWork { sealed, overlay, key });
        shared.phase = Some(Phase::ImageLoaded);
        shared.output = None;
        Ok(ResponseBody::Done)
    }

    /// Starts the named workload from the loaded image on its own thread.
    fn exec(self: &Arc<Self>, entry: &str) -> Result<ResponseBody, (ErrorCode, String)> {
        let (ctx, script) = {
            let mut shared = self.shared.lock().unwrap();
            match shared.phase {
                Some(Phase::ImageLoaded) | Some(Phase::Stopped) if shared.work.is_some() => {}
                Some(Phase::Running) => {
                    return Err((ErrorCode::WrongPhase, "a workload is running".into()))
                }
                _ => return Err((ErrorCode::WrongPhase, "no image is loaded".into())),
            }
            let work = shared.work.as_ref().expect("checked above");
            let open = open_image(&work.sealed, Some(&work.overlay), &work.key)
                .map_err(image_refusal)?;
            let script = match open.read_layer(&workload_layer(entry)) {
                Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
                Err(ImageError::NoSuchLayer(_)) => {
                    return Err((ErrorCode::BadRequest, format!("no workload named {entry:?}")))
                }
                Err(e) => return Err(image_refusal(e)),
            };
            let ctx = shared.ctx.take().ok_or((
                ErrorCode::Internal,
                "guest context is unavailable".to_string(),
            ))?;
            shared.phase = Some(Phase::Running);
            shared.output = None;
            (ctx, script)
        };
        let control = Arc::clone(self);
        std::thread::spawn(move || control.run_workload(ctx, &script));
        Ok(ResponseBody::ExecStarted)
    }

    fn run_workload(self: Arc<Self>, mut ctx: ScContext, script: &str) {
        let result = self.interpret(&mut ctx, script);
        let mut shared = self.shared.lock().unwrap();
        shared.ctx = Some(ctx);
        shared.output = Some(result);
        shared.phase = Some(Phase::Stopped);
        self.cond.notify_all();
    }

    /// Blocks until the running workload finishes, then returns its output.
    fn wait_output(&self) -> Result<ResponseBody, (ErrorCode, String)> {
        let mut shared = self.shared.lock().unwrap();
        while shared.phase == Some(Phase::Running) {
            shared = self.cond.wait(shared).unwrap();
        }
        match &shared.output {
            Some(Ok(bytes)) => Ok(ResponseBody::Output { bytes: bytes.clone() }),
            Some(Err(msg)) => Err((ErrorCode::Internal, format!("workload failed: {msg}"))),
            None => Err((ErrorCode::WrongPhase, "nothing has been executed".into())),
        }
    }

    fn status(&self) -> Result<ResponseBody, (ErrorCode, String)> {
        let phase = self
            .shared
            .lock()
            .unwrap()
            .phase
            .expect("phase is always set");
        // Bind before matching: a guard inside a match scrutinee would
        // stay held across the arms.
        let taken = self.shared.lock().unwrap().disp_registry.take();
        let names = match taken {
            Some(mut registry) => {
                let names = match crate::actors::request(&mut registry, &Message::ListNames) {
                    Ok(Message::NamesOk { names }) => names,
                    _ => Vec::new(),
                };
                self.shared.lock().unwrap().disp_registry = Some(registry);
                names
            }
            None => Vec::new(),
        };
        Ok(ResponseBody::Status { phase: phase.as_str().to_string(), names })
    }

    fn stop(&self) -> Result<ResponseBody, (ErrorCode, String)> {
        let mut shared = self.shared.lock().unwrap();
        if shared.phase == Some(Phase::Running) {
            return Err((ErrorCode::WrongPhase, "workload is still running".into()));
        }
        shared.phase = Some(Phase::Stopped);
        Ok(ResponseBody::Done)
    }

    // --- the workload script interpreter ---

    fn read_block_line(&self, index: u64) -> Result<String, String> {
        let shared = self.shared.lock().unwrap();
        let work = shared.work.as_ref().ok_or("no image loaded")?;
        let open = open_image(&work.sealed, Some(&work.overlay), &work.key)
            .map_err(|e| e.to_string())?;
        let block = open.read_block(index).map_err(|e| e.to_string())?;
        Ok(format!("block {index} {}", hex::encode(&block[..16])))
    }

    fn write_overlay_block(&self, index: u64, text: &str) -> Result<String, String> {
        let mut shared = self.shared.lock().unwrap();
        let work = shared.work.as_mut().ok_or("no image loaded")?;
        snapshot_write(&mut work.overlay, &work.sealed, index, text.as_bytes(), &work.key)
            .map_err(|e| e.to_string())?;
        Ok(format!("wrote block {index}"))
    }

    /// Runs one plain-text workload script against the guest context and
    /// the loaded image, producing its output log.
    fn interpret(&self, ctx: &mut ScContext, script: &str) -> Result<Vec<u8>, String> {
        let mut lines = script.lines().map(str::trim).filter(|l| !l.is_empty());
        let first = lines.clone().next().unwrap_or("");
        if let Some(name) = first.strip_prefix("native ") {
            let workload =
                native_workload(name.trim()).ok_or(format!("no native workload named {name:?}"))?;
            return workload(ctx).map_err(|e| e.to_string());
        }

        let mut out = String::new();
        let mut stream: Option<Stream> = None;
        let fail = |verb: &str, e: &dyn std::fmt::Display| format!("{verb}: {e}");
        for line in &mut lines {
            let (verb, rest) = line.split_once(' ').unwrap_or((line, ""));
            let appended = match verb {
                "echo" => rest.to_string(),
                "read-block" => {
                    let idx: u64 = rest.parse().map_err(|e| fail(verb, &e))?;
                    self.read_block_line(idx).map_err(|e| fail(verb, &e))?
                }
                "write-overlay" => {
                    let (idx, text) = rest
                        .split_once(' ')
                        .ok_or("write-overlay needs an index and text")?;
                    let idx: u64 = idx.parse().map_err(|e| fail(verb, &e))?;
                    self.write_overlay_block(idx, text).map_err(|e| fail(verb, &e))?
                }
                "register" => {
                    ctx.register(rest).map_err(|e| fail(verb, &e))?;
                    format!("registered {rest}")
                }
                "peers" => {
                    let names = ctx.get_registered_vms().map_err(|e| fail(verb, &e))?;
                    format!("peers {}", names.join(","))
                }
                "listen" => {
                    // Streams queue from the moment the guest is up;
                    // `accept` takes the next one.
                    if ctx.registered_name().is_none() {
                        return Err("listen: not registered".into());
                    }
                    continue;
                }
                "accept" => {
                    let s = ctx
                        .listen()
                        .and_then(|mut l| l.accept())
                        .map_err(|e| fail(verb, &e))?;
                    let line = format!("accepted {}", s.peer_name());
                    stream = Some(s);
                    line
                }
                "dial" => {
                    let owner = ctx.get_self_owner().map_err(|e| fail(verb, &e))?.clone();
                    let s = ctx.dial(rest, &[&owner]).map_err(|e| fail(verb, &e))?;
                    stream = Some(s);
                    format!("dialed {rest}")
                }
                "send" => {
                    let s = stream.as_mut().ok_or("send: no open stream")?;
                    s.write(rest.as_bytes()).map_err(|e| fail(verb, &e))?;
                    continue;
                }
                "recv" => {
                    let s = stream.as_mut().ok_or("recv: no open stream")?;
                    let mut buf = [0u8; 1024];
                    let n = s.read(&mut buf).map_err(|e| fail(verb, &e))?;
                    format!("got {}", String::from_utf8_lossy(&buf[..n]))
                }
                "close" => {
                    if let Some(mut s) = stream.take() {
                        s.close();
                    }
                    continue;
                }
                other => return Err(format!("unknown workload verb {other:?}")),
            };
            out.push_str(&appended);
            out.push('\n');
        }
        Ok(out.into_bytes())
    }
}

fn image_refusal(e: ImageError) -> (ErrorCode, String) {
    let code = match e {
        ImageError::IntegrityFailure { .. } => ErrorCode::IntegrityFailure,
        ImageError::WrongKey => ErrorCode::Rejected,
        _ => ErrorCode::BadRequest,
    };
    (code, e.to_string())
}
