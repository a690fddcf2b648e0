//! Message vocabulary for everything the actors say to each other, with a
//! stable one-byte tag per message. Routing requests travel in the clear
//! on the carrier; everything else rides inside an authenticated channel.
//!
//! Tag blocks:
//!   0x0x  carrier-level routing
//!   0x1x  channel handshake and records (owned by `channel`)
//!   0x2x  host service API and host-to-guest delivery
//!   0x3x  root VM and deploy service APIs
//!   0x6x  owner-to-agent command loop
//!   0x7x  guest-to-guest streams, generic error reply

use thiserror::Error;

use crate::image::ImageKey;
use crate::pki::{RoleCertificate, ValidRootVmList};
use crate::tee::{AttestationReport, SealedInjection, VmId};
use crate::wire::{Reader, Wire, WireError, Writer};

pub const TAG_ROUTE_REQUEST: u8 = 0x01;
pub const TAG_ROUTE_GRANTED: u8 = 0x02;
pub const TAG_ROUTE_ERROR: u8 = 0x03;

pub const TAG_UPLOAD_IMAGE: u8 = 0x20;
pub const TAG_UPLOAD_OK: u8 = 0x21;
pub const TAG_FETCH_IMAGE: u8 = 0x22;
pub const TAG_FETCH_OK: u8 = 0x23;
pub const TAG_LAUNCH_ROOT_VM: u8 = 0x24;
pub const TAG_LAUNCH_OK: u8 = 0x25;
pub const TAG_LAUNCH_SC_VM: u8 = 0x26;
pub const TAG_ATTEST_VM: u8 = 0x27;
pub const TAG_ATTEST_OK: u8 = 0x28;
pub const TAG_DELIVER_SECRET: u8 = 0x29;
pub const TAG_DELIVER_OK: u8 = 0x2A;
pub const TAG_LOAD_IMAGE_INTO_VM: u8 = 0x2B;
pub const TAG_LOAD_TRIGGER_OK: u8 = 0x2C;
pub const TAG_DELIVER_IMAGE: u8 = 0x2D;

pub const TAG_CREATE_SCVM: u8 = 0x30;
pub const TAG_CREATE_SCVM_OK: u8 = 0x31;
pub const TAG_REGISTER: u8 = 0x32;
pub const TAG_REGISTER_OK: u8 = 0x33;
pub const TAG_LOOKUP: u8 = 0x34;
pub const TAG_LOOKUP_OK: u8 = 0x35;
pub const TAG_LIST_NAMES: u8 = 0x36;
pub const TAG_NAMES_OK: u8 = 0x37;
pub const TAG_OWNER_ENROLL: u8 = 0x38;
pub const TAG_ENROLL_OK: u8 = 0x39;
pub const TAG_GET_TRUST_BUNDLE: u8 = 0x3A;
pub const TAG_TRUST_BUNDLE_OK: u8 = 0x3B;
pub const TAG_GET_VALID_LIST: u8 = 0x3C;
pub const TAG_VALID_LIST_OK: u8 = 0x3D;
pub const TAG_DEPLOY_ROOT_VM: u8 = 0x3E;
pub const TAG_DEPLOY_OK: u8 = 0x3F;

pub const TAG_OWNER_COMMAND: u8 = 0x60;
pub const TAG_AGENT_RESPONSE: u8 = 0x61;
pub const TAG_AGENT_READY: u8 = 0x62;
pub const TAG_READY_ACK: u8 = 0x63;

pub const TAG_STREAM_DATA: u8 = 0x70;
pub const TAG_STREAM_CLOSE: u8 = 0x71;
pub const TAG_PEER_INTRO: u8 = 0x72;
pub const TAG_PEER_ACCEPT: u8 = 0x73;
pub const TAG_PEER_REJECT: u8 = 0x74;
pub const TAG_ERROR_REPLY: u8 = 0x7F;

/// Human-readable name for a message tag, used in transcripts and logs.
pub fn tag_name(tag: u8) -> &'static str {
    match tag {
        TAG_ROUTE_REQUEST => "route-request",
        TAG_ROUTE_GRANTED => "route-granted",
        TAG_ROUTE_ERROR => "route-error",
        0x10 => "client-hello",
        0x11 => "server-hello",
        0x12 => "client-finish",
        0x13 => "record",
        TAG_UPLOAD_IMAGE => "upload-image",
        TAG_UPLOAD_OK => "upload-ok",
        TAG_FETCH_IMAGE => "fetch-image",
        TAG_FETCH_OK => "fetch-ok",
        TAG_LAUNCH_ROOT_VM => "launch-root-vm",
        TAG_LAUNCH_OK => "launch-ok",
        TAG_LAUNCH_SC_VM => "launch-sc-vm",
        TAG_ATTEST_VM => "attest-vm",
        TAG_ATTEST_OK => "attest-ok",
        TAG_DELIVER_SECRET => "deliver-secret",
        TAG_DELIVER_OK => "deliver-ok",
        TAG_LOAD_IMAGE_INTO_VM => "load-image-into-vm",
        TAG_LOAD_TRIGGER_OK => "load-trigger-ok",
        TAG_DELIVER_IMAGE => "deliver-image",
        TAG_CREATE_SCVM => "create-scvm",
        TAG_CREATE_SCVM_OK => "create-scvm-ok",
        TAG_REGISTER => "register",
        TAG_REGISTER_OK => "register-ok",
        TAG_LOOKUP => "lookup",
        TAG_LOOKUP_OK => "lookup-ok",
        TAG_LIST_NAMES => "list-names",
        TAG_NAMES_OK => "names-ok",
        TAG_OWNER_ENROLL => "owner-enroll",
        TAG_ENROLL_OK => "enroll-ok",
        TAG_GET_TRUST_BUNDLE => "get-trust-bundle",
        TAG_TRUST_BUNDLE_OK => "trust-bundle-ok",
        TAG_GET_VALID_LIST => "get-valid-list",
        TAG_VALID_LIST_OK => "valid-list-ok",
        TAG_DEPLOY_ROOT_VM => "deploy-root-vm",
        TAG_DEPLOY_OK => "deploy-ok",
        TAG_OWNER_COMMAND => "owner-command",
        TAG_AGENT_RESPONSE => "agent-response",
        TAG_AGENT_READY => "agent-ready",
        TAG_READY_ACK => "ready-ack",
        TAG_STREAM_DATA => "stream-data",
        TAG_STREAM_CLOSE => "stream-close",
        TAG_PEER_INTRO => "peer-intro",
        TAG_PEER_ACCEPT => "peer-accept",
        TAG_PEER_REJECT => "peer-reject",
        TAG_ERROR_REPLY => "error-reply",
        _ => "unknown",
    }
}

/// Why a request was refused. The numeric value is the wire form; the
/// display form is the stable token surfaced to operators and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ErrorCode {
    #[error("bad-request")]
    BadRequest = 1,
    #[error("route-failed")]
    RouteFailed = 2,
    #[error("no-such-vm")]
    NoSuchVm = 3,
    #[error("no-such-image")]
    NoSuchImage = 4,
    #[error("bad-signature")]
    BadSignature = 5,
    #[error("stale-nonce")]
    StaleNonce = 6,
    #[error("wrong-measurement")]
    WrongMeasurement = 7,
    #[error("owner-mismatch")]
    OwnerMismatch = 8,
    #[error("not-registered")]
    NotRegistered = 9,
    #[error("name-taken")]
    NameTaken = 10,
    #[error("wrong-phase")]
    WrongPhase = 11,
    #[error("replayed-command")]
    ReplayedCommand = 12,
    #[error("rejected")]
    Rejected = 13,
    #[error("revoked-identity")]
    RevokedIdentity = 14,
    #[error("unknown-name")]
    UnknownName = 15,
    #[error("internal")]
    Internal = 16,
    #[error("integrity-failure")]
    IntegrityFailure = 17,
    #[error("boot-rejected")]
    BootRejected = 18,
    #[error("decrypt-failure")]
    DecryptFailure = 19,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => ErrorCode::BadRequest,
            2 => ErrorCode::RouteFailed,
            3 => ErrorCode::NoSuchVm,
            4 => ErrorCode::NoSuchImage,
            5 => ErrorCode::BadSignature,
            6 => ErrorCode::StaleNonce,
            7 => ErrorCode::WrongMeasurement,
            8 => ErrorCode::OwnerMismatch,
            9 => ErrorCode::NotRegistered,
            10 => ErrorCode::NameTaken,
            11 => ErrorCode::WrongPhase,
            12 => ErrorCode::ReplayedCommand,
            13 => ErrorCode::Rejected,
            14 => ErrorCode::RevokedIdentity,
            15 => ErrorCode::UnknownName,
            16 => ErrorCode::Internal,
            17 => ErrorCode::IntegrityFailure,
            18 => ErrorCode::BootRejected,
            19 => ErrorCode::DecryptFailure,
            other => {
                return Err(WireError::Invalid {
                    what: "error code",
                    detail: format!("unknown value {other}"),
                })
            }
        })
    }
}

/// Everything a container owner needs to verify guests later: the
/// certificate root, the platform vendor key, and the two launch digests
/// considered good.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustBundle {
    pub root_cert: RoleCertificate,
    pub vendor_public: [u8; 32],
    pub rootvm_measurement: [u8; 32],
    pub scvm_measurement: [u8; 32],
}

impl Wire for TrustBundle {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.root_cert.encode())
            .field(&self.vendor_public)
            .field(&self.rootvm_measurement)
            .field(&self.scvm_measurement);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let root_cert = RoleCertificate::decode(r.field()?)?;
        let vendor_public = r.fixed()?;
        let rootvm_measurement = r.fixed()?;
        let scvm_measurement = r.fixed()?;
        r.done()?;
        Ok(TrustBundle {
            root_cert,
            vendor_public,
            rootvm_measurement,
            scvm_measurement,
        })
    }
}

/// Commands an owner issues to its agent over the command channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandBody {
    /// Hand over the image key so the agent can open its delivered image.
    LoadImage { image_key: ImageKey },
    /// Start the named workload section from the image manifest.
    Exec { entry: String },
    Stop,
    Status,
    /// Block until the running workload finishes; returns its output.
    Wait,
}

impl CommandBody {
    fn kind(&self) -> u8 {
        match self {
            CommandBody::LoadImage { .. } => 1,
            CommandBody::Exec { .. } => 2,
            CommandBody::Stop => 3,
            CommandBody::Status => 4,
            CommandBody::Wait => 5,
        }
    }
}

/// What the agent says back; always echoes the command sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseBody {
    Done,
    ExecStarted,
    Output { bytes: Vec<u8> },
    Status { phase: String, names: Vec<String> },
}

impl ResponseBody {
    fn kind(&self) -> u8 {
        match self {
            ResponseBody::Done => 1,
            ResponseBody::ExecStarted => 2,
            ResponseBody::Output { .. } => 3,
            ResponseBody::Status { .. } => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ResponseBody::Done => "done",
            ResponseBody::ExecStarted => "exec-started",
            ResponseBody::Output { .. } => "output",
            ResponseBody::Status { .. } => "status",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    RouteRequest { destination: String },
    RouteGranted,
    RouteError { reason: String },

    UploadImage { bytes: Vec<u8> },
    UploadOk { image_id: [u8; 32] },
    FetchImage { image_id: [u8; 32] },
    FetchOk { bytes: Vec<u8> },
    LaunchRootVm,
    LaunchOk { vm_id: VmId },
    LaunchScVm,
    AttestVm { vm_id: VmId, nonce: [u8; 16] },
    AttestOk { report: AttestationReport },
    DeliverSecret { vm_id: VmId, injection: SealedInjection },
    DeliverOk,
    LoadImageIntoVm { vm_id: VmId, image_id: [u8; 32] },
    LoadTriggerOk,
    DeliverImage { image_id: [u8; 32], bytes: Vec<u8> },

    CreateScvm { image_id: [u8; 32], nonce: [u8; 16] },
    CreateScvmOk {
        vm_id: VmId,
        cert_vm: RoleCertificate,
        report: AttestationReport,
    },
    Register { name: String },
    RegisterOk,
    Lookup { name: String },
    LookupOk {
        name: String,
        vm_id: VmId,
        cert_vm: RoleCertificate,
        cert_owner: RoleCertificate,
    },
    ListNames,
    NamesOk { names: Vec<String> },
    OwnerEnroll { name: String, public_key: [u8; 32] },
    EnrollOk { cert: RoleCertificate },
    GetTrustBundle,
    TrustBundleOk { bundle: TrustBundle },
    GetValidList,
    ValidListOk { list: ValidRootVmList },
    DeployRootVm { host: String },
    DeployOk { rootvm_cert: RoleCertificate },

    OwnerCommand { sequence: u64, body: CommandBody },
    AgentResponse { sequence: u64, body: ResponseBody },
    /// Sent by a guest agent once its service channels are up; creation
    /// replies are held back until this arrives.
    AgentReady,
    ReadyAck,

    StreamData { data: Vec<u8> },
    StreamClose,
    PeerIntro { name: String },
    PeerAccept,
    PeerReject { reason: String },
    ErrorReply { code: ErrorCode, message: String },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::RouteRequest { .. } => TAG_ROUTE_REQUEST,
            Message::RouteGranted => TAG_ROUTE_GRANTED,
            Message::RouteError { .. } => TAG_ROUTE_ERROR,
            Message::UploadImage { .. } => TAG_UPLOAD_IMAGE,
            Message::UploadOk { .. } => TAG_UPLOAD_OK,
            Message::FetchImage { .. } => TAG_FETCH_IMAGE,
            Message::FetchOk { .. } => TAG_FETCH_OK,
            Message::LaunchRootVm => TAG_LAUNCH_ROOT_VM,
            Message::LaunchOk { .. } => TAG_LAUNCH_OK,
            Message::LaunchScVm => TAG_LAUNCH_SC_VM,
            Message::AttestVm { .. } => TAG_ATTEST_VM,
            Message::AttestOk { .. } => TAG_ATTEST_OK,
            Message::DeliverSecret { .. } => TAG_DELIVER_SECRET,
            Message::DeliverOk => TAG_DELIVER_OK,
            Message::LoadImageIntoVm { .. } => TAG_LOAD_IMAGE_INTO_VM,
            Message::LoadTriggerOk => TAG_LOAD_TRIGGER_OK,
            Message::DeliverImage { .. } => TAG_DELIVER_IMAGE,
            Message::CreateScvm { .. } => TAG_CREATE_SCVM,
            Message::CreateScvmOk { .. } => TAG_CREATE_SCVM_OK,
            Message::Register { .. } => TAG_REGISTER,
            Message::RegisterOk => TAG_REGISTER_OK,
            Message::Lookup { .. } => TAG_LOOKUP,
            Message::LookupOk { .. } => TAG_LOOKUP_OK,
            Message::ListNames => TAG_LIST_NAMES,
            Message::NamesOk { .. } => TAG_NAMES_OK,
            Message::OwnerEnroll { .. } => TAG_OWNER_ENROLL,
            Message::EnrollOk { .. } => TAG_ENROLL_OK,
            Message::GetTrustBundle => TAG_GET_TRUST_BUNDLE,
            Message::TrustBundleOk { .. } => TAG_TRUST_BUNDLE_OK,
            Message::GetValidList => TAG_GET_VALID_LIST,
            Message::ValidListOk { .. } => TAG_VALID_LIST_OK,
            Message::DeployRootVm { .. } => TAG_DEPLOY_ROOT_VM,
            Message::DeployOk { .. } => TAG_DEPLOY_OK,
            Message::OwnerCommand { .. } => TAG_OWNER_COMMAND,
            Message::AgentResponse { .. } => TAG_AGENT_RESPONSE,
            Message::AgentReady => TAG_AGENT_READY,
            Message::ReadyAck => TAG_READY_ACK,
            Message::StreamData { .. } => TAG_STREAM_DATA,
            Message::StreamClose => TAG_STREAM_CLOSE,
            Message::PeerIntro { .. } => TAG_PEER_INTRO,
            Message::PeerAccept => TAG_PEER_ACCEPT,
            Message::PeerReject { .. } => TAG_PEER_REJECT,
            Message::ErrorReply { .. } => TAG_ERROR_REPLY,
        }
    }

    pub fn name(&self) -> &'static str {
        tag_name(self.tag())
    }
}

impl Wire for Message {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8_field(self.tag());
        match self {
            Message::RouteRequest { destination } => {
                w.str_field(destination);
            }
            Message::RouteGranted => {}
            Message::RouteError { reason } => {
                w.str_field(reason);
            }
            Message::UploadImage { bytes } => {
                w.field(bytes);
            }
            Message::UploadOk { image_id } => {
                w.field(image_id);
            }
            Message::FetchImage { image_id } => {
                w.field(image_id);
            }
            Message::FetchOk { bytes } => {
                w.field(bytes);
            }
            Message::LaunchRootVm => {}
            Message::LaunchOk { vm_id } => {
                w.field(&vm_id.0);
            }
            Message::LaunchScVm => {}
            Message::AttestVm { vm_id, nonce } => {
                w.field(&vm_id.0).field(nonce);
            }
            Message::AttestOk { report } => {
                w.field(&report.encode());
            }
            Message::DeliverSecret { vm_id, injection } => {
                w.field(&vm_id.0).field(&injection.encode());
            }
            Message::DeliverOk => {}
            Message::LoadImageIntoVm { vm_id, image_id } => {
                w.field(&vm_id.0).field(image_id);
            }
            Message::LoadTriggerOk => {}
            Message::DeliverImage { image_id, bytes } => {
                w.field(image_id).field(bytes);
            }
            Message::CreateScvm { image_id, nonce } => {
                w.field(image_id).field(nonce);
            }
            Message::CreateScvmOk {
                vm_id,
                cert_vm,
                report,
            } => {
                w.field(&vm_id.0)
                    .field(&cert_vm.encode())
                    .field(&report.encode());
            }
            Message::Register { name } => {
                w.str_field(name);
            }
            Message::RegisterOk => {}
            Message::Lookup { name } => {
                w.str_field(name);
            }
            Message::LookupOk {
                name,
                vm_id,
                cert_vm,
                cert_owner,
            } => {
                w.str_field(name)
                    .field(&vm_id.0)
                    .field(&cert_vm.encode())
                    .field(&cert_owner.encode());
            }
            Message::ListNames => {}
            Message::NamesOk { names } => {
                let items: Vec<Vec<u8>> = names.iter().map(|n| n.as_bytes().to_vec()).collect();
                w.list_field(&items);
            }
            Message::OwnerEnroll { name, public_key } => {
                w.str_field(name).field(public_key);
            }
            Message::EnrollOk { cert } => {
                w.field(&cert.encode());
            }
            Message::GetTrustBundle => {}
            Message::TrustBundleOk { bundle } => {
                w.field(&bundle.encode());
            }
            Message::GetValidList => {}
            Message::ValidListOk { list } => {
                w.field(&list.encode());
            }
            Message::DeployRootVm { host } => {
                w.str_field(host);
            }
            Message::DeployOk { rootvm_cert } => {
                w.field(&rootvm_cert.encode());
            }
            Message::OwnerCommand { sequence, body } => {
                w.u64_field(*sequence).u8_field(body.kind());
                match body {
                    CommandBody::LoadImage { image_key } => {
                        w.field(&image_key.encode());
                    }
                    CommandBody::Exec { entry } => {
                        w.str_field(entry);
                    }
                    CommandBody::Stop | CommandBody::Status | CommandBody::Wait => {}
                }
            }
            Message::AgentResponse { sequence, body } => {
                w.u64_field(*sequence).u8_field(body.kind());
                match body {
                    ResponseBody::Done | ResponseBody::ExecStarted => {}
                    ResponseBody::Output { bytes } => {
                        w.field(bytes);
                    }
                    ResponseBody::Status { phase, names } => {
                        w.str_field(phase);
                        let items: Vec<Vec<u8>> =
                            names.iter().map(|n| n.as_bytes().to_vec()).collect();
                        w.list_field(&items);
                    }
                }
            }
            Message::AgentReady | Message::ReadyAck => {}
            Message::StreamData { data } => {
                w.field(data);
            }
            Message::StreamClose => {}
            Message::PeerIntro { name } => {
                w.str_field(name);
            }
            Message::PeerAccept => {}
            Message::PeerReject { reason } => {
                w.str_field(reason);
            }
            Message::ErrorReply { code, message } => {
                w.u8_field(*code as u8).str_field(message);
            }
        }
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8_field()?;
        let msg = match tag {
            TAG_ROUTE_REQUEST => Message::RouteRequest {
                destination: r.str_field()?,
            },
            TAG_ROUTE_GRANTED => Message::RouteGranted,
            TAG_ROUTE_ERROR => Message::RouteError {
                reason: r.str_field()?,
            },
            TAG_UPLOAD_IMAGE => Message::UploadImage {
                bytes: r.field()?.to_vec(),
            },
            TAG_UPLOAD_OK => Message::UploadOk { image_id: r.fixed()? },
            TAG_FETCH_IMAGE => Message::FetchImage { image_id: r.fixed()? },
            TAG_FETCH_OK => Message::FetchOk {
                bytes: r.field()?.to_vec(),
            },
            TAG_LAUNCH_ROOT_VM => Message::LaunchRootVm,
            TAG_LAUNCH_OK => Message::LaunchOk {
                vm_id: VmId(r.fixed()?),
            },
            TAG_LAUNCH_SC_VM => Message::LaunchScVm,
            TAG_ATTEST_VM => Message::AttestVm {
                vm_id: VmId(r.fixed()?),
                nonce: r.fixed()?,
            },
            TAG_ATTEST_OK => Message::AttestOk {
                report: AttestationReport::decode(r.field()?)?,
            },
            TAG_DELIVER_SECRET => Message::DeliverSecret {
                vm_id: VmId(r.fixed()?),
                injection: SealedInjection::decode(r.field()?)?,
            },
            TAG_DELIVER_OK => Message::DeliverOk,
            TAG_LOAD_IMAGE_INTO_VM => Message::LoadImageIntoVm {
                vm_id: VmId(r.fixed()?),
                image_id: r.fixed()?,
            },
            TAG_LOAD_TRIGGER_OK => Message::LoadTriggerOk,
            TAG_DELIVER_IMAGE => Message::DeliverImage {
                image_id: r.fixed()?,
                bytes: r.field()?.to_vec(),
            },
            TAG_CREATE_SCVM => Message::CreateScvm {
                image_id: r.fixed()?,
                nonce: r.fixed()?,
            },
            TAG_CREATE_SCVM_OK => Message::CreateScvmOk {
                vm_id: VmId(r.fixed()?),
                cert_vm: RoleCertificate::decode(r.field()?)?,
                report: AttestationReport::decode(r.field()?)?,
            },
            TAG_REGISTER => Message::Register {
                name: r.str_field()?,
            },
            TAG_REGISTER_OK => Message::RegisterOk,
            TAG_LOOKUP => Message::Lookup {
                name: r.str_field()?,
            },
            TAG_LOOKUP_OK => Message::LookupOk {
                name: r.str_field()?,
                vm_id: VmId(r.fixed()?),
                cert_vm: RoleCertificate::decode(r.field()?)?,
                cert_owner: RoleCertificate::decode(r.field()?)?,
            },
            TAG_LIST_NAMES => Message::ListNames,
            TAG_NAMES_OK => {
                let items = r.list_field()?;
                let mut names = Vec::with_capacity(items.len());
                for item in items {
                    names.push(String::from_utf8(item).map_err(|_| WireError::Invalid {
                        what: "name list",
                        detail: "entry is not utf-8".into(),
                    })?);
                }
                Message::NamesOk { names }
            }
            TAG_OWNER_ENROLL => Message::OwnerEnroll {
                name: r.str_field()?,
                public_key: r.fixed()?,
            },
            TAG_ENROLL_OK => Message::EnrollOk {
                cert: RoleCertificate::decode(r.field()?)?,
            },
            TAG_GET_TRUST_BUNDLE => Message::GetTrustBundle,
            TAG_TRUST_BUNDLE_OK => Message::TrustBundleOk {
                bundle: TrustBundle::decode(r.field()?)?,
            },
            TAG_GET_VALID_LIST => Message::GetValidList,
            TAG_VALID_LIST_OK => Message::ValidListOk {
                list: ValidRootVmList::decode(r.field()?)?,
            },
            TAG_DEPLOY_ROOT_VM => Message::DeployRootVm {
                host: r.str_field()?,
            },
            TAG_DEPLOY_OK => Message::DeployOk {
                rootvm_cert: RoleCertificate::decode(r.field()?)?,
            },
            TAG_OWNER_COMMAND => {
                let sequence = r.u64_field()?;
                let kind = r.u8_field()?;
                let body = match kind {
                    1 => CommandBody::LoadImage {
                        image_key: ImageKey::decode(r.field()?)?,
                    },
                    2 => CommandBody::Exec {
                        entry: r.str_field()?,
                    },
                    3 => CommandBody::Stop,
                    4 => CommandBody::Status,
                    5 => CommandBody::Wait,
                    other => {
                        return Err(WireError::Invalid {
                            what: "owner command",
                            detail: format!("unknown kind {other}"),
                        })
                    }
                };
                Message::OwnerCommand { sequence, body }
            }
            TAG_AGENT_RESPONSE => {
                let sequence = r.u64_field()?;
                let kind = r.u8_field()?;
                let body = match kind {
                    1 => ResponseBody::Done,
                    2 => ResponseBody::ExecStarted,
                    3 => ResponseBody::Output {
                        bytes: r.field()?.to_vec(),
                    },
                    4 => {
                        let phase = r.str_field()?;
                        let items = r.list_field()?;
                        let mut names = Vec::with_capacity(items.len());
                        for item in items {
                            names.push(String::from_utf8(item).map_err(|_| {
                                WireError::Invalid {
                                    what: "status names",
                                    detail: "entry is not utf-8".into(),
                                }
                            })?);
                        }
                        ResponseBody::Status { phase, names }
                    }
                    other => {
                        return Err(WireError::Invalid {
                            what: "agent response",
                            detail: format!("unknown kind {other}"),
                        })
                    }
                };
                Message::AgentResponse { sequence, body }
            }
            TAG_AGENT_READY => Message::AgentReady,
            TAG_READY_ACK => Message::ReadyAck,
            TAG_STREAM_DATA => Message::StreamData {
                data: r.field()?.to_vec(),
            },
            TAG_STREAM_CLOSE => Message::StreamClose,
            TAG_PEER_INTRO => Message::PeerIntro {
                name: r.str_field()?,
            },
            TAG_PEER_ACCEPT => Message::PeerAccept,
            TAG_PEER_REJECT => Message::PeerReject {
                reason: r.str_field()?,
            },
            TAG_ERROR_REPLY => Message::ErrorReply {
                code: ErrorCode::from_u8(r.u8_field()?)?,
                message: r.str_field()?,
            },
            other => {
                return Err(WireError::Invalid {
                    what: "message tag",
                    detail: format!("unknown tag {other:#04x}"),
                })
            }
        };
        r.done()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Entropy, SigKeypair};
    use crate::pki::{build_hierarchy_at, issue_certificate, publish_valid_list, Role};
    use crate::tee::{MockTee, VendorRoot};

    fn sample_cert() -> RoleCertificate {
        let h = build_hierarchy_at([7u8; 32], 0);
        let key = SigKeypair::generate(&mut Entropy::from_seed([8u8; 32]));
        issue_certificate(&h.owner_ca, "alice", Role::ContainerOwner, key.public(), 0, 1000)
            .unwrap()
    }

    fn sample_report() -> AttestationReport {
        let mut e = Entropy::from_seed([9u8; 32]);
        let vendor = VendorRoot::new(&mut e);
        let tee = MockTee::create_platform([10u8; 32], &vendor);
        let (vm_id, _) = tee.launch_vm(b"payload").unwrap();
        tee.attest(vm_id, [11u8; 16]).unwrap()
    }

    fn all_samples() -> Vec<Message> {
        let cert = sample_cert();
        let report = sample_report();
        let h = build_hierarchy_at([7u8; 32], 0);
        let list = publish_valid_list(
            &h.deploy_ca.certificate,
            &h.deploy_ca.keypair(),
            [[1u8; 32]],
            500,
        );
        let injection = SealedInjection {
            sender_public: [1u8; 32],
            target_vm_id: VmId([2u8; 16]),
            nonce: [3u8; 12],
            ciphertext: vec![4, 5, 6],
        };
        let bundle = TrustBundle {
            root_cert: h.root_ca.certificate.clone(),
            vendor_public: [12u8; 32],
            rootvm_measurement: [13u8; 32],
            scvm_measurement: [14u8; 32],
        };
        vec![
            Message::RouteRequest { destination: "vm:web".into() },
            Message::RouteGranted,
            Message::RouteError { reason: "no such destination".into() },
            Message::UploadImage { bytes: vec![1, 2, 3] },
            Message::UploadOk { image_id: [5u8; 32] },
            Message::FetchImage { image_id: [5u8; 32] },
            Message::FetchOk { bytes: vec![9; 100] },
            Message::LaunchRootVm,
            Message::LaunchOk { vm_id: VmId([6u8; 16]) },
            Message::LaunchScVm,
            Message::AttestVm { vm_id: VmId([6u8; 16]), nonce: [7u8; 16] },
            Message::AttestOk { report: report.clone() },
            Message::DeliverSecret { vm_id: VmId([6u8; 16]), injection },
            Message::DeliverOk,
            Message::LoadImageIntoVm { vm_id: VmId([6u8; 16]), image_id: [5u8; 32] },
            Message::LoadTriggerOk,
            Message::DeliverImage { image_id: [5u8; 32], bytes: vec![1; 64] },
            Message::CreateScvm { image_id: [5u8; 32], nonce: [8u8; 16] },
            Message::CreateScvmOk {
                vm_id: VmId([6u8; 16]),
                cert_vm: cert.clone(),
                report,
            },
            Message::Register { name: "web".into() },
            Message::RegisterOk,
            Message::Lookup { name: "web".into() },
            Message::LookupOk {
                name: "web".into(),
                vm_id: VmId([6u8; 16]),
                cert_vm: cert.clone(),
                cert_owner: cert.clone(),
            },
            Message::ListNames,
            Message::NamesOk { names: vec!["web".into(), "db".into()] },
            Message::OwnerEnroll { name: "alice".into(), public_key: [9u8; 32] },
            Message::EnrollOk { cert: cert.clone() },
            Message::GetTrustBundle,
            Message::TrustBundleOk { bundle },
            Message::GetValidList,
            Message::ValidListOk { list },
            Message::DeployRootVm { host: "host-a".into() },
            Message::DeployOk { rootvm_cert: cert },
            Message::OwnerCommand {
                sequence: 3,
                body: CommandBody::LoadImage { image_key: ImageKey::new([5u8; 32], [6u8; 32]) },
            },
            Message::OwnerCommand { sequence: 4, body: CommandBody::Exec { entry: "main".into() } },
            Message::OwnerCommand { sequence: 5, body: CommandBody::Stop },
            Message::OwnerCommand { sequence: 6, body: CommandBody::Status },
            Message::OwnerCommand { sequence: 7, body: CommandBody::Wait },
            Message::AgentResponse { sequence: 3, body: ResponseBody::Done },
            Message::AgentResponse { sequence: 4, body: ResponseBody::ExecStarted },
            Message::AgentResponse {
                sequence: 7,
                body: ResponseBody::Output { bytes: b"hello".to_vec() },
            },
            Message::AgentResponse {
                sequence: 6,
                body: ResponseBody::Status { phase: "running".into(), names: vec!["web".into()] },
            },
            Message::AgentReady,
            Message::ReadyAck,
            Message::StreamData { data: vec![0; 10] },
            Message::StreamClose,
            Message::PeerIntro { name: "client".into() },
            Message::PeerAccept,
            Message::PeerReject { reason: "not expected".into() },
            Message::ErrorReply { code: ErrorCode::OwnerMismatch, message: "not your vm".into() },
        ]
    }

    #[test]
    fn every_message_round_trips() {
        for msg in all_samples() {
            let bytes = msg.encode();
            let back = Message::decode(&bytes).unwrap();
            assert_eq!(back, msg, "round trip failed for {}", msg.name());
            // And re-encoding is byte-identical.
            assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn tags_are_stable() {
        // Frozen wire tags: changing any of these breaks every deployed peer.
        let expect: &[(u8, &str)] = &[
            (0x01, "route-request"),
            (0x02, "route-granted"),
            (0x03, "route-error"),
            (0x20, "upload-image"),
            (0x25, "launch-ok"),
            (0x27, "attest-vm"),
            (0x29, "deliver-secret"),
            (0x2D, "deliver-image"),
            (0x30, "create-scvm"),
            (0x34, "lookup"),
            (0x38, "owner-enroll"),
            (0x3E, "deploy-root-vm"),
            (0x60, "owner-command"),
            (0x61, "agent-response"),
            (0x70, "stream-data"),
            (0x72, "peer-intro"),
            (0x7F, "error-reply"),
        ];
        for (tag, name) in expect {
            assert_eq!(tag_name(*tag), *name);
        }
        for msg in all_samples() {
            assert_eq!(msg.encode()[4], msg.tag(), "tag must be the first field");
        }
    }

    #[test]
    fn unknown_tag_rejected() {
        let mut w = Writer::new();
        w.u8_field(0xEE);
        assert!(Message::decode(&w.finish()).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = Message::RouteGranted.encode();
        bytes.extend_from_slice(&[0, 0, 0, 1, 7]);
        assert_eq!(Message::decode(&bytes), Err(WireError::TrailingBytes(5)));
    }

    #[test]
    fn error_codes_round_trip() {
        for code in [
            ErrorCode::BadRequest,
            ErrorCode::RouteFailed,
            ErrorCode::NoSuchVm,
            ErrorCode::NoSuchImage,
            ErrorCode::BadSignature,
            ErrorCode::StaleNonce,
            ErrorCode::WrongMeasurement,
            ErrorCode::OwnerMismatch,
            ErrorCode::NotRegistered,
            ErrorCode::NameTaken,
            ErrorCode::WrongPhase,
            ErrorCode::ReplayedCommand,
            ErrorCode::Rejected,
            ErrorCode::RevokedIdentity,
            ErrorCode::UnknownName,
            ErrorCode::Internal,
            ErrorCode::IntegrityFailure,
            ErrorCode::BootRejected,
            ErrorCode::DecryptFailure,
        ] {
            assert_eq!(ErrorCode::from_u8(code as u8).unwrap(), code);
        }
        assert!(ErrorCode::from_u8(0).is_err());
        assert!(ErrorCode::from_u8(200).is_err());
    }
}
