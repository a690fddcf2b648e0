//! Software stand-in for the platform security processor.
//!
//! A `MockTee` owns a vendor-endorsed platform identity, measures VM boot
//! payloads, signs attestation reports and handles secret injection. Secrets
//! travel under a Diffie-Hellman transport key bound to this platform's PDH
//! and are re-sealed under the per-VM sealing key before delivery, so a
//! ciphertext made for one VM is useless on any other VM or platform.

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

use crate::crypto::{
    self, aead_open, aead_seal, sha256, verify_sig, CryptoError, DhKeypair, Entropy, SigKeypair,
    LABEL_SEAL, LABEL_TRANSPORT,
};
use crate::wire::{Reader, Wire, WireError, Writer};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TeeError {
    #[error("boot payload must not be empty")]
    InvalidBootPayload,
    #[error("no VM with this id on the platform")]
    NoSuchVm,
    #[error("sealed injection could not be decrypted")]
    DecryptFailure,
    #[error("malformed wire bytes: {0}")]
    Wire(#[from] WireError),
}

/// Why a report was rejected. `verify_report` returns these instead of
/// panicking or conflating the causes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportReject {
    BadSignature,
    WrongMeasurement,
    StaleNonce,
}

impl std::fmt::Display for ReportReject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ReportReject::BadSignature => "BadSignature",
            ReportReject::WrongMeasurement => "WrongMeasurement",
            ReportReject::StaleNonce => "StaleNonce",
        };
        f.write_str(s)
    }
}

/// Opaque per-VM-instance identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VmId(pub [u8; 16]);

impl VmId {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(VmId(bytes.try_into().ok()?))
    }
}

/// The simulated vendor root of trust that endorses platform CEKs.
pub struct VendorRoot {
    keypair: SigKeypair,
}

impl VendorRoot {
    pub fn new(entropy: &mut Entropy) -> Self {
        VendorRoot {
            keypair: SigKeypair::generate(entropy),
        }
    }

    pub fn public(&self) -> [u8; 32] {
        self.keypair.public()
    }

    fn endorse(&self, platform_id: [u8; 16], cek_public: [u8; 32]) -> [u8; 64] {
        self.keypair.sign(&endorsement_bytes(platform_id, cek_public))
    }
}

fn endorsement_bytes(platform_id: [u8; 16], cek_public: [u8; 32]) -> Vec<u8> {
    let mut w = Writer::new();
    w.field(&platform_id).field(&cek_public);
    w.finish()
}

/// Public half of a platform identity, carried in attestation reports so a
/// verifier only needs the vendor root key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformCert {
    pub platform_id: [u8; 16],
    pub cek_public: [u8; 32],
    pub pdh_public: [u8; 32],
    pub vendor_signature: [u8; 64],
}

impl Wire for PlatformCert {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.platform_id)
            .field(&self.cek_public)
            .field(&self.pdh_public)
            .field(&self.vendor_signature);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let cert = PlatformCert {
            platform_id: r.fixed()?,
            cek_public: r.fixed()?,
            pdh_public: r.fixed()?,
            vendor_signature: r.fixed()?,
        };
        r.done()?;
        Ok(cert)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchMeasurement {
    pub digest: [u8; 32],
    pub vm_id: VmId,
}

/// Symmetric key binding injected secrets to one VM instance.
///
/// Deliberately has no `Wire` impl: no message type anywhere in the system
/// can carry a sealing key, it exists only inside the platform and the VM
/// process it belongs to.
pub struct SealingKey {
    pub vm_id: VmId,
    key: [u8; 32],
}

impl SealingKey {
    fn aead_key(&self) -> [u8; 32] {
        crypto::hkdf_derive(&self.key, LABEL_SEAL, &self.vm_id.0)
    }
}

impl std::fmt::Debug for SealingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Key bytes intentionally not printed.
        write!(f, "SealingKey(vm {})", self.vm_id.to_hex())
    }
}

/// Both endpoints of a secret injection derive this from complementary
/// keypairs; the transport key is byte-identical on both sides.
pub struct TransportContext {
    pub transport_key: [u8; 32],
}

impl TransportContext {
    pub fn derive(own: &DhKeypair, peer_public: &[u8; 32]) -> Self {
        let shared = own.agree(peer_public);
        TransportContext {
            transport_key: crypto::hkdf_derive(&shared, LABEL_TRANSPORT, b""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub measurement: LaunchMeasurement,
    pub nonce: [u8; 16],
    pub platform_id: [u8; 16],
    pub pdh_public: [u8; 32],
    /// Vendor endorsement of the signing CEK, so verification is
    /// self-contained given the vendor root key.
    pub cek_public: [u8; 32],
    pub vendor_signature: [u8; 64],
    /// CEK signature over the fields above the endorsement, in declaration
    /// order, each length-prefixed.
    pub signature: [u8; 64],
}

impl AttestationReport {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.measurement.digest)
            .field(&self.measurement.vm_id.0)
            .field(&self.nonce)
            .field(&self.platform_id)
            .field(&self.pdh_public);
        w.finish()
    }
}

impl Wire for AttestationReport {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.measurement.digest)
            .field(&self.measurement.vm_id.0)
            .field(&self.nonce)
            .field(&self.platform_id)
            .field(&self.pdh_public)
            .field(&self.cek_public)
            .field(&self.vendor_signature)
            .field(&self.signature);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let report = AttestationReport {
            measurement: LaunchMeasurement {
                digest: r.fixed()?,
                vm_id: VmId(r.fixed()?),
            },
            nonce: r.fixed()?,
            platform_id: r.fixed()?,
            pdh_public: r.fixed()?,
            cek_public: r.fixed()?,
            vendor_signature: r.fixed()?,
            signature: r.fixed()?,
        };
        r.done()?;
        Ok(report)
    }
}

/// AEAD ciphertext bound to one platform's PDH and one target VM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedInjection {
    pub sender_public: [u8; 32],
    pub target_vm_id: VmId,
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

impl Wire for SealedInjection {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.field(&self.sender_public)
            .field(&self.target_vm_id.0)
            .field(&self.nonce)
            .field(&self.ciphertext);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let sealed = SealedInjection {
            sender_public: r.fixed()?,
            target_vm_id: VmId(r.fixed()?),
            nonce: r.fixed()?,
            ciphertext: r.field()?.to_vec(),
        };
        r.done()?;
        Ok(sealed)
    }
}

struct VmSlot {
    measurement: LaunchMeasurement,
    sealing_key: SealingKey,
}

/// The platform: one instance is shared by all local actors. All operations
/// are internally synchronized and none blocks on I/O.
pub struct MockTee {
    platform_id: [u8; 16],
    cek: SigKeypair,
    pdh: DhKeypair,
    vendor_signature: [u8; 64],
    state: Mutex<TeeState>,
}

struct TeeState {
    vms: HashMap<VmId, VmSlot>,
    entropy: Entropy,
}

impl MockTee {
    /// Creates a platform identity endorsed by `vendor`. Deterministic for a
    /// given seed: keys, platform id and subsequent VM ids all derive from it.
    pub fn create_platform(seed: [u8; 32], vendor: &VendorRoot) -> Self {
        let mut entropy = Entropy::from_seed(seed);
        let cek = SigKeypair::generate(&mut entropy);
        let pdh = DhKeypair::generate(&mut entropy);
        let platform_id: [u8; 16] = entropy.bytes();
        let vendor_signature = vendor.endorse(platform_id, cek.public());
        MockTee {
            platform_id,
            cek,
            pdh,
            vendor_signature,
            state: Mutex::new(TeeState {
                vms: HashMap::new(),
                entropy,
            }),
        }
    }

    /// Like `create_platform` but endorsed by an arbitrary key that is not
    /// the vendor root. Exists for fake-TEE adversary scenarios.
    pub fn create_unendorsed_platform(seed: [u8; 32], fake_vendor: &VendorRoot) -> Self {
        Self::create_platform(seed, fake_vendor)
    }

    pub fn identity(&self) -> PlatformCert {
        PlatformCert {
            platform_id: self.platform_id,
            cek_public: self.cek.public(),
            pdh_public: self.pdh.public(),
            vendor_signature: self.vendor_signature,
        }
    }

    /// Measures a boot payload and assigns the new VM instance a fresh
    /// sealing key. The measurement is content-addressed; the id and key
    /// are per-instance.
    pub fn launch_vm(&self, boot_payload: &[u8]) -> Result<(VmId, LaunchMeasurement), TeeError> {
        if boot_payload.is_empty() {
            return Err(TeeError::InvalidBootPayload);
        }
        let mut state = self.state.lock().unwrap();
        let vm_id = VmId(state.entropy.bytes());
        let measurement = LaunchMeasurement {
            digest: sha256(boot_payload),
            vm_id,
        };
        let sealing_key = SealingKey {
            vm_id,
            key: state.entropy.bytes(),
        };
        state.vms.insert(
            vm_id,
            VmSlot {
                measurement: measurement.clone(),
                sealing_key,
            },
        );
        Ok((vm_id, measurement))
    }

    pub fn attest(&self, vm_id: VmId, nonce: [u8; 16]) -> Result<AttestationReport, TeeError> {
        let state = self.state.lock().unwrap();
        let slot = state.vms.get(&vm_id).ok_or(TeeError::NoSuchVm)?;
        let mut report = AttestationReport {
            measurement: slot.measurement.clone(),
            nonce,
            platform_id: self.platform_id,
            pdh_public: self.pdh.public(),
            cek_public: self.cek.public(),
            vendor_signature: self.vendor_signature,
            signature: [0u8; 64],
        };
        report.signature = self.cek.sign(&report.signed_bytes());
        Ok(report)
    }

    /// Decrypts a sealed injection for the named VM. Internally the
    /// transport layer is opened with the platform PDH and the plaintext is
    /// re-sealed under the VM's sealing key before delivery, mirroring the
    /// PSP -> VEK handoff.
    pub fn receive_secret(&self, vm_id: VmId, sealed: &SealedInjection) -> Result<Vec<u8>, TeeError> {
        let state = self.state.lock().unwrap();
        let slot = state.vms.get(&vm_id).ok_or(TeeError::NoSuchVm)?;
        if sealed.target_vm_id != vm_id {
            return Err(TeeError::DecryptFailure);
        }
        let transport = TransportContext::derive(&self.pdh, &sealed.sender_public);
        let plaintext = aead_open(
            &transport.transport_key,
            &sealed.nonce,
            &sealed.target_vm_id.0,
            &sealed.ciphertext,
        )
        .map_err(|_| TeeError::DecryptFailure)?;

        let vek = slot.sealing_key.aead_key();
        let resealed = aead_seal(&vek, &[0u8; 12], &vm_id.0, &plaintext);
        aead_open(&vek, &[0u8; 12], &vm_id.0, &resealed).map_err(|_| TeeError::DecryptFailure)
    }

    pub fn has_vm(&self, vm_id: VmId) -> bool {
        self.state.lock().unwrap().vms.contains_key(&vm_id)
    }
}

/// Encrypts `plaintext` to the platform and VM named in an already verified
/// report. Verifying the report first is the caller's duty; this layer adds
/// no checks, matching the injection flow where trust was established by the
/// preceding attestation.
pub fn inject_secret(
    report: &AttestationReport,
    plaintext: &[u8],
    sender_dh: &DhKeypair,
    entropy: &mut Entropy,
) -> SealedInjection {
    let transport = TransportContext::derive(sender_dh, &report.pdh_public);
    let nonce: [u8; 12] = entropy.bytes();
    let ciphertext = aead_seal(
        &transport.transport_key,
        &nonce,
        &report.measurement.vm_id.0,
        plaintext,
    );
    SealedInjection {
        sender_public: sender_dh.public(),
        target_vm_id: report.measurement.vm_id,
        nonce,
        ciphertext,
    }
}

/// Checks the vendor endorsement, the CEK signature, the measurement and the
/// challenge nonce, in that order. Never panics; every failure maps to a
/// `ReportReject` reason.
pub fn verify_report(
    report: &AttestationReport,
    expected_measurement: &[u8; 32],
    nonce: &[u8; 16],
    vendor_root: &[u8; 32],
) -> Result<(), ReportReject> {
    let endorsed = endorsement_bytes(report.platform_id, report.cek_public);
    if verify_sig(vendor_root, &endorsed, &report.vendor_signature).is_err() {
        return Err(ReportReject::BadSignature);
    }
    if verify_sig(&report.cek_public, &report.signed_bytes(), &report.signature).is_err() {
        return Err(ReportReject::BadSignature);
    }
    if &report.measurement.digest != expected_measurement {
        return Err(ReportReject::WrongMeasurement);
    }
    if &report.nonce != nonce {
        return Err(ReportReject::StaleNonce);
    }
    Ok(())
}

impl From<CryptoError> for TeeError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::DecryptFailure => TeeError::DecryptFailure,
            _ => TeeError::DecryptFailure,
        }
    }
}
