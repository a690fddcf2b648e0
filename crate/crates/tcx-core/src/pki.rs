//! Certificate-authority hierarchy encoding system roles.
//!
//! The Root CA signs three intermediates, one per role family. The Root VM
//! intermediate signs per-instance Root VM CAs; each of those is both the
//! Root VM's own identity and the issuer of its SC-VM certificates. Host
//! Service credentials live under the Deploy intermediate. Revocation is an
//! allow-list: the Deploy System publishes the set of currently valid Root
//! VM certificate fingerprints.
//!
//! Certificates use the canonical length-prefixed binary form, not X.509;
//! a fingerprint is the SHA-256 of the canonical bytes. All validity checks
//! take the evaluation time explicitly.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::crypto::{sha256, verify_sig, Entropy, SigKeypair};
use crate::wire::{Reader, Wire, WireError, Writer};

/// Default Root VM certificate lifetime: 24 hours.
pub const DEFAULT_ROOTVM_LIFETIME_SECS: u64 = 24 * 3600;
/// Default SC-VM certificate lifetime: 1 hour.
pub const DEFAULT_SCVM_LIFETIME_SECS: u64 = 3600;
/// Lifetime used for the root and intermediate CAs.
pub const DEFAULT_CA_LIFETIME_SECS: u64 = 10 * 365 * 24 * 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    RootCa,
    DeploySystem,
    HostSystem,
    RootVm,
    ContainerOwner,
    ScVm,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::RootCa => 0,
            Role::DeploySystem => 1,
            Role::HostSystem => 2,
            Role::RootVm => 3,
            Role::ContainerOwner => 4,
            Role::ScVm => 5,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, WireError> {
        Ok(match tag {
            0 => Role::RootCa,
            1 => Role::DeploySystem,
            2 => Role::HostSystem,
            3 => Role::RootVm,
            4 => Role::ContainerOwner,
            5 => Role::ScVm,
            other => {
                return Err(WireError::Invalid {
                    what: "role tag",
                    detail: format!("unknown tag {other}"),
                })
            }
        })
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::RootCa => "root-ca",
            Role::DeploySystem => "deploy-system",
            Role::HostSystem => "host-system",
            Role::RootVm => "root-vm",
            Role::ContainerOwner => "container-owner",
            Role::ScVm => "sc-vm",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PkiError {
    #[error("issuer with role {issuer} may not issue a {requested} certificate")]
    RoleViolation { issuer: Role, requested: Role },
    #[error("certificate lifetime is empty or inverted")]
    InvalidLifetime,
    #[error("malformed wire bytes: {0}")]
    Wire(#[from] WireError),
}

/// Why chain verification rejected a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainReject {
    Expired,
    BadSignature,
    WrongRole,
    UntrustedRoot,
}

impl std::fmt::Display for ChainReject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ChainReject::Expired => "Expired",
            ChainReject::BadSignature => "BadSignature",
            ChainReject::WrongRole => "WrongRole",
            ChainReject::UntrustedRoot => "UntrustedRoot",
        };
        f.write_str(s)
    }
}

pub type Fingerprint = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleCertificate {
    pub subject_name: String,
    pub role: Role,
    pub is_ca: bool,
    pub public_key: [u8; 32],
    pub not_before: u64,
    pub not_after: u64,
    /// Immediate issuer first, Root CA last. Empty for the self-signed root.
    pub issuer_chain: Vec<RoleCertificate>,
    pub signature: [u8; 64],
}

impl RoleCertificate {
    /// Bytes covered by the issuer's signature. Binds the issuer fingerprint
    /// so a certificate cannot be spliced onto a different chain.
    fn tbs_bytes(&self, issuer_fp: &Fingerprint) -> Vec<u8> {
        let mut w = Writer::new();
        w.str_field(&self.subject_name)
            .u8_field(self.role.tag())
            .u8_field(self.is_ca as u8)
            .field(&self.public_key)
            .u64_field(self.not_before)
            .u64_field(self.not_after)
            .field(issuer_fp);
        w.finish()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        sha256(&self.encode())
    }

    fn issuer_fingerprint(&self) -> Fingerprint {
        match self.issuer_chain.first() {
            Some(issuer) => issuer.fingerprint(),
            None => [0u8; 32], // self-signed root
        }
    }

    /// Depth in the hierarchy: 0 for the root, 1 for intermediates, ...
    fn depth(&self) -> usize {
        self.issuer_chain.len()
    }

    pub fn valid_at(&self, at_time: u64) -> bool {
        self.not_before <= at_time && at_time < self.not_after
    }
}

impl Wire for RoleCertificate {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str_field(&self.subject_name)
            .u8_field(self.role.tag())
            .u8_field(self.is_ca as u8)
            .field(&self.public_key)
            .u64_field(self.not_before)
            .u64_field(self.not_after);
        let chain: Vec<Vec<u8>> = self.issuer_chain.iter().map(|c| c.encode()).collect();
        w.list_field(&chain);
        w.field(&self.signature);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let subject_name = r.str_field()?;
        let role = Role::from_tag(r.u8_field()?)?;
        let is_ca = match r.u8_field()? {
            0 => false,
            1 => true,
            other => {
                return Err(WireError::Invalid {
                    what: "is_ca flag",
                    detail: format!("expected 0 or 1, got {other}"),
                })
            }
        };
        let public_key = r.fixed()?;
        let not_before = r.u64_field()?;
        let not_after = r.u64_field()?;
        let chain_bytes = r.list_field()?;
        if chain_bytes.len() > 8 {
            return Err(WireError::Invalid {
                what: "issuer chain",
                detail: "chain longer than any valid hierarchy".into(),
            });
        }
        let mut issuer_chain = Vec::with_capacity(chain_bytes.len());
        for cb in &chain_bytes {
            issuer_chain.push(RoleCertificate::decode(cb)?);
        }
        let signature = r.fixed()?;
        r.done()?;
        Ok(RoleCertificate {
            subject_name,
            role,
            is_ca,
            public_key,
            not_before,
            not_after,
            issuer_chain,
            signature,
        })
    }
}

/// A certificate together with its signing key: the only thing that can
/// issue. Issuance is pure, so a handle may be shared freely.
pub struct CaHandle {
    pub certificate: RoleCertificate,
    signing: SigKeypair,
}

impl CaHandle {
    pub fn keypair(&self) -> &SigKeypair {
        &self.signing
    }
}

/// What a CA at the given position may issue. Mirrors the hierarchy:
/// root -> intermediates; deploy -> deploy/host leaves; owner -> owner
/// leaves; rootvm intermediate -> per-instance CAs; per-instance -> SC-VM
/// leaves.
fn permitted(issuer: &RoleCertificate, role: Role) -> Option<bool> {
    if !issuer.is_ca {
        return None;
    }
    let subject_is_ca = match (issuer.role, issuer.depth()) {
        (Role::RootCa, 0) => {
            if matches!(role, Role::DeploySystem | Role::RootVm | Role::ContainerOwner) {
                true
            } else {
                return None;
            }
        }
        (Role::DeploySystem, 1) => {
            if matches!(role, Role::DeploySystem | Role::HostSystem) {
                false
            } else {
                return None;
            }
        }
        (Role::ContainerOwner, 1) => {
            if role == Role::ContainerOwner {
                false
            } else {
                return None;
            }
        }
        (Role::RootVm, 1) => {
            if role == Role::RootVm {
                true
            } else {
                return None;
            }
        }
        (Role::RootVm, 2) => {
            if role == Role::ScVm {
                false
            } else {
                return None;
            }
        }
        _ => return None,
    };
    Some(subject_is_ca)
}

/// Issues a certificate for `public_key` if this CA's role family permits
/// the requested role. Whether the subject is itself a CA follows from the
/// issuer's position in the hierarchy.
pub fn issue_certificate(
    ca: &CaHandle,
    subject_name: &str,
    role: Role,
    public_key: [u8; 32],
    not_before: u64,
    not_after: u64,
) -> Result<RoleCertificate, PkiError> {
    let is_ca = permitted(&ca.certificate, role).ok_or(PkiError::RoleViolation {
        issuer: ca.certificate.role,
        requested: role,
    })?;
    if not_before >= not_after {
        return Err(PkiError::InvalidLifetime);
    }
    let mut issuer_chain = Vec::with_capacity(ca.certificate.issuer_chain.len() + 1);
    issuer_chain.push(ca.certificate.clone());
    issuer_chain.extend(ca.certificate.issuer_chain.iter().cloned());

    let mut cert = RoleCertificate {
        subject_name: subject_name.to_string(),
        role,
        is_ca,
        public_key,
        not_before,
        not_after,
        issuer_chain,
        signature: [0u8; 64],
    };
    let issuer_fp = ca.certificate.fingerprint();
    cert.signature = ca.signing.sign(&cert.tbs_bytes(&issuer_fp));
    Ok(cert)
}

pub struct Hierarchy {
    pub root_ca: CaHandle,
    pub deploy_ca: CaHandle,
    pub rootvm_ca: CaHandle,
    pub owner_ca: CaHandle,
}

/// Builds the Root CA and its three intermediates. Deterministic for a
/// given seed; validity starts at `issued_at`.
pub fn build_hierarchy_at(seed: [u8; 32], issued_at: u64) -> Hierarchy {
    let mut entropy = Entropy::from_seed(seed);
    let not_after = issued_at + DEFAULT_CA_LIFETIME_SECS;

    let root_key = SigKeypair::generate(&mut entropy);
    let mut root_cert = RoleCertificate {
        subject_name: "tcx-root-ca".into(),
        role: Role::RootCa,
        is_ca: true,
        public_key: root_key.public(),
        not_before: issued_at,
        not_after,
        issuer_chain: Vec::new(),
        signature: [0u8; 64],
    };
    root_cert.signature = root_key.sign(&root_cert.tbs_bytes(&[0u8; 32]));
    let root_ca = CaHandle {
        certificate: root_cert,
        signing: root_key,
    };

    let mut intermediate = |name: &str, role: Role| {
        let key = SigKeypair::generate(&mut entropy);
        let cert = issue_certificate(&root_ca, name, role, key.public(), issued_at, not_after)
            .expect("root may issue intermediates");
        CaHandle {
            certificate: cert,
            signing: key,
        }
    };

    let deploy_ca = intermediate("tcx-deploy-ca", Role::DeploySystem);
    let rootvm_ca = intermediate("tcx-rootvm-ca", Role::RootVm);
    let owner_ca = intermediate("tcx-owner-ca", Role::ContainerOwner);

    Hierarchy {
        root_ca,
        deploy_ca,
        rootvm_ca,
        owner_ca,
    }
}

pub fn build_hierarchy(seed: [u8; 32]) -> Hierarchy {
    build_hierarchy_at(seed, 0)
}

/// Wraps a freshly issued CA certificate and its key into a handle, e.g.
/// for the per-instance Root VM CA.
pub fn ca_handle(certificate: RoleCertificate, signing: SigKeypair) -> CaHandle {
    CaHandle {
        certificate,
        signing,
    }
}

/// Verifies signature chain, validity windows and the leaf role. `trust_root`
/// is the Root CA certificate the verifier already holds.
pub fn verify_chain(
    cert: &RoleCertificate,
    trust_root: &RoleCertificate,
    at_time: u64,
    expected_role: Role,
) -> Result<(), ChainReject> {
    let anchor = cert.issuer_chain.last().unwrap_or(cert);
    if anchor.encode() != trust_root.encode() {
        return Err(ChainReject::UntrustedRoot);
    }

    // Walk leaf -> root. Every link: issuer is a CA whose position permits
    // the child's role, the signature binds child to that exact issuer, and
    // the validity window contains `at_time`.
    let mut child = cert;
    loop {
        if !child.valid_at(at_time) {
            return Err(ChainReject::Expired);
        }
        match child.issuer_chain.first() {
            Some(issuer) => {
                if permitted(issuer, child.role) != Some(child.is_ca) {
                    return Err(ChainReject::WrongRole);
                }
                if child.issuer_chain[1..] != issuer.issuer_chain[..] {
                    return Err(ChainReject::BadSignature);
                }
                let tbs = child.tbs_bytes(&child.issuer_fingerprint());
                if verify_sig(&issuer.public_key, &tbs, &child.signature).is_err() {
                    return Err(ChainReject::BadSignature);
                }
                child = issuer;
            }
            None => {
                // Self-signed anchor.
                if !child.is_ca || child.role != Role::RootCa {
                    return Err(ChainReject::WrongRole);
                }
                let tbs = child.tbs_bytes(&[0u8; 32]);
                if verify_sig(&child.public_key, &tbs, &child.signature).is_err() {
                    return Err(ChainReject::BadSignature);
                }
                break;
            }
        }
    }

    if cert.role != expected_role {
        return Err(ChainReject::WrongRole);
    }
    Ok(())
}

/// Allow-list of currently valid Root VM certificates, signed by the Deploy
/// System. Absence from the newest list is the revocation mechanism.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidRootVmList {
    pub entries: BTreeSet<Fingerprint>,
    pub issued_at: u64,
    pub signer: RoleCertificate,
    pub signature: [u8; 64],
}

impl ValidRootVmList {
    fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let entries: Vec<Vec<u8>> = self.entries.iter().map(|fp| fp.to_vec()).collect();
        w.list_field(&entries);
        w.u64_field(self.issued_at);
        w.field(&self.signer.encode());
        w.finish()
    }
}

impl Wire for ValidRootVmList {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        let entries: Vec<Vec<u8>> = self.entries.iter().map(|fp| fp.to_vec()).collect();
        w.list_field(&entries);
        w.u64_field(self.issued_at);
        w.field(&self.signer.encode());
        w.field(&self.signature);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let raw_entries = r.list_field()?;
        let mut entries = BTreeSet::new();
        for e in raw_entries {
            let fp: Fingerprint = e.try_into().map_err(|_| WireError::Invalid {
                what: "fingerprint",
                detail: "not 32 bytes".into(),
            })?;
            entries.insert(fp);
        }
        let issued_at = r.u64_field()?;
        let signer = RoleCertificate::decode(r.field()?)?;
        let signature = r.fixed()?;
        r.done()?;
        Ok(ValidRootVmList {
            entries,
            issued_at,
            signer,
            signature,
        })
    }
}

/// Signs the allow-list with the Deploy System's identity.
pub fn publish_valid_list(
    deploy_cert: &RoleCertificate,
    deploy_key: &SigKeypair,
    fingerprints: impl IntoIterator<Item = Fingerprint>,
    issued_at: u64,
) -> ValidRootVmList {
    let mut list = ValidRootVmList {
        entries: fingerprints.into_iter().collect(),
        issued_at,
        signer: deploy_cert.clone(),
        signature: [0u8; 64],
    };
    list.signature = deploy_key.sign(&list.tbs_bytes());
    list
}

/// True iff the Root VM certificate chain verifies and its fingerprint is on
/// the list. A list not signed by a valid DeploySystem credential is an
/// error regardless of contents.
pub fn check_rootvm_valid(
    cert: &RoleCertificate,
    list: &ValidRootVmList,
    trust_root: &RoleCertificate,
    at_time: u64,
) -> Result<bool, ChainReject> {
    verify_chain(&list.signer, trust_root, at_time, Role::DeploySystem)?;
    if verify_sig(&list.signer.public_key, &list.tbs_bytes(), &list.signature).is_err() {
        return Err(ChainReject::BadSignature);
    }
    if verify_chain(cert, trust_root, at_time, Role::RootVm).is_err() {
        return Ok(false);
    }
    Ok(list.entries.contains(&cert.fingerprint()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Entropy;

    const T0: u64 = 1_000;
    const T1: u64 = 2_000;

    fn leaf_key(tag: u8) -> SigKeypair {
        SigKeypair::generate(&mut Entropy::from_seed([tag; 32]))
    }

    fn hierarchy() -> Hierarchy {
        build_hierarchy_at([1u8; 32], 0)
    }

    #[test]
    fn intermediates_verify_to_root() {
        let h = hierarchy();
        for (ca, role) in [
            (&h.deploy_ca, Role::DeploySystem),
            (&h.rootvm_ca, Role::RootVm),
            (&h.owner_ca, Role::ContainerOwner),
        ] {
            verify_chain(&ca.certificate, &h.root_ca.certificate, T0, role).unwrap();
        }
    }

    #[test]
    fn same_seed_identical_fingerprints() {
        let a = build_hierarchy([7u8; 32]);
        let b = build_hierarchy([7u8; 32]);
        assert_eq!(
            a.root_ca.certificate.fingerprint(),
            b.root_ca.certificate.fingerprint()
        );
        assert_eq!(
            a.rootvm_ca.certificate.fingerprint(),
            b.rootvm_ca.certificate.fingerprint()
        );
    }

    #[test]
    fn owner_ca_cannot_issue_rootvm() {
        let h = hierarchy();
        let err = issue_certificate(&h.owner_ca, "evil", Role::RootVm, leaf_key(1).public(), T0, T1)
            .unwrap_err();
        assert_eq!(
            err,
            PkiError::RoleViolation {
                issuer: Role::ContainerOwner,
                requested: Role::RootVm
            }
        );
    }

    #[test]
    fn inverted_lifetime_rejected() {
        let h = hierarchy();
        let err = issue_certificate(
            &h.owner_ca,
            "o",
            Role::ContainerOwner,
            leaf_key(1).public(),
            T1,
            T1,
        )
        .unwrap_err();
        assert_eq!(err, PkiError::InvalidLifetime);
    }

    fn scvm_chain(h: &Hierarchy) -> (CaHandle, RoleCertificate) {
        let instance_key = leaf_key(10);
        let instance_cert = issue_certificate(
            &h.rootvm_ca,
            "rootvm-1",
            Role::RootVm,
            instance_key.public(),
            0,
            T1 + DEFAULT_ROOTVM_LIFETIME_SECS,
        )
        .unwrap();
        let instance_ca = ca_handle(instance_cert, instance_key);
        let vm_key = leaf_key(11);
        let vm_cert = issue_certificate(
            &instance_ca,
            "VM-7",
            Role::ScVm,
            vm_key.public(),
            0,
            T1 + DEFAULT_SCVM_LIFETIME_SECS,
        )
        .unwrap();
        (instance_ca, vm_cert)
    }

    #[test]
    fn per_instance_ca_issues_scvm_chain_of_four() {
        let h = hierarchy();
        let (_, vm_cert) = scvm_chain(&h);
        assert_eq!(vm_cert.issuer_chain.len(), 3); // chain incl. leaf = 4
        verify_chain(&vm_cert, &h.root_ca.certificate, T0, Role::ScVm).unwrap();
    }

    #[test]
    fn per_instance_ca_only_issues_scvm() {
        let h = hierarchy();
        let (instance_ca, _) = scvm_chain(&h);
        for role in [Role::RootVm, Role::ContainerOwner, Role::HostSystem] {
            assert!(issue_certificate(&instance_ca, "x", role, leaf_key(3).public(), T0, T1).is_err());
        }
    }

    #[test]
    fn scvm_leaf_cannot_issue() {
        let h = hierarchy();
        let (_, vm_cert) = scvm_chain(&h);
        let fake_ca = ca_handle(vm_cert, leaf_key(11));
        assert!(issue_certificate(&fake_ca, "x", Role::ScVm, leaf_key(4).public(), T0, T1).is_err());
    }

    #[test]
    fn wrong_role_rejected() {
        let h = hierarchy();
        let owner_cert = issue_certificate(
            &h.owner_ca,
            "owner-1",
            Role::ContainerOwner,
            leaf_key(5).public(),
            0,
            T1,
        )
        .unwrap();
        assert_eq!(
            verify_chain(&owner_cert, &h.root_ca.certificate, T0, Role::RootVm),
            Err(ChainReject::WrongRole)
        );
    }

    #[test]
    fn host_credential_never_verifies_as_rootvm() {
        let h = hierarchy();
        let host_cert = issue_certificate(
            &h.deploy_ca,
            "host-1",
            Role::HostSystem,
            leaf_key(6).public(),
            0,
            T1,
        )
        .unwrap();
        assert_eq!(
            verify_chain(&host_cert, &h.root_ca.certificate, T0, Role::RootVm),
            Err(ChainReject::WrongRole)
        );
        verify_chain(&host_cert, &h.root_ca.certificate, T0, Role::HostSystem).unwrap();
    }

    #[test]
    fn expiry_enforced() {
        let h = hierarchy();
        let cert = issue_certificate(
            &h.owner_ca,
            "o",
            Role::ContainerOwner,
            leaf_key(7).public(),
            T0,
            T1,
        )
        .unwrap();
        assert_eq!(
            verify_chain(&cert, &h.root_ca.certificate, T1, Role::ContainerOwner),
            Err(ChainReject::Expired)
        );
        assert_eq!(
            verify_chain(&cert, &h.root_ca.certificate, T0 - 1, Role::ContainerOwner),
            Err(ChainReject::Expired)
        );
        verify_chain(&cert, &h.root_ca.certificate, T0, Role::ContainerOwner).unwrap();
    }

    #[test]
    fn removing_any_intermediate_breaks_verification() {
        let h = hierarchy();
        let (_, vm_cert) = scvm_chain(&h);
        for skip in 0..vm_cert.issuer_chain.len() {
            let mut stripped = vm_cert.clone();
            stripped.issuer_chain.remove(skip);
            assert!(
                verify_chain(&stripped, &h.root_ca.certificate, T0, Role::ScVm).is_err(),
                "chain verified with issuer {skip} removed"
            );
        }
    }

    #[test]
    fn foreign_root_rejected() {
        let h = hierarchy();
        let other = build_hierarchy([2u8; 32]);
        let (_, vm_cert) = scvm_chain(&h);
        assert_eq!(
            verify_chain(&vm_cert, &other.root_ca.certificate, T0, Role::ScVm),
            Err(ChainReject::UntrustedRoot)
        );
    }

    fn deploy_identity(h: &Hierarchy, tag: u8) -> (RoleCertificate, SigKeypair) {
        let key = leaf_key(tag);
        let cert = issue_certificate(
            &h.deploy_ca,
            "deploy-svc",
            Role::DeploySystem,
            key.public(),
            0,
            T1 + DEFAULT_CA_LIFETIME_SECS,
        )
        .unwrap();
        (cert, key)
    }

    #[test]
    fn valid_list_controls_liveness() {
        let h = hierarchy();
        let (dc, dk) = deploy_identity(&h, 20);
        let (_, rootvm_cert) = rootvm_identity(&h, 21);

        let fp = rootvm_cert.fingerprint();
        let l1 = publish_valid_list(&dc, &dk, [fp], T0);
        assert!(check_rootvm_valid(&rootvm_cert, &l1, &h.root_ca.certificate, T0).unwrap());

        let l2 = publish_valid_list(&dc, &dk, [], T0 + 10);
        assert!(!check_rootvm_valid(&rootvm_cert, &l2, &h.root_ca.certificate, T0).unwrap());
        // Chain itself still verifies; only the list dropped it.
        verify_chain(&rootvm_cert, &h.root_ca.certificate, T0, Role::RootVm).unwrap();
    }

    fn rootvm_identity(h: &Hierarchy, tag: u8) -> (SigKeypair, RoleCertificate) {
        let key = leaf_key(tag);
        let cert = issue_certificate(
            &h.rootvm_ca,
            "rootvm-1",
            Role::RootVm,
            key.public(),
            0,
            T1 + DEFAULT_ROOTVM_LIFETIME_SECS,
        )
        .unwrap();
        (key, cert)
    }

    #[test]
    fn empty_list_rejects_everything() {
        let h = hierarchy();
        let (dc, dk) = deploy_identity(&h, 20);
        let (_, rootvm_cert) = rootvm_identity(&h, 21);
        let list = publish_valid_list(&dc, &dk, [], T0);
        assert!(!check_rootvm_valid(&rootvm_cert, &list, &h.root_ca.certificate, T0).unwrap());
    }

    #[test]
    fn owner_signed_list_rejected() {
        let h = hierarchy();
        let owner_key = leaf_key(30);
        let owner_cert = issue_certificate(
            &h.owner_ca,
            "owner-1",
            Role::ContainerOwner,
            owner_key.public(),
            0,
            T1 + DEFAULT_CA_LIFETIME_SECS,
        )
        .unwrap();
        let (_, rootvm_cert) = rootvm_identity(&h, 21);
        let list = publish_valid_list(&owner_cert, &owner_key, [rootvm_cert.fingerprint()], T0);
        assert_eq!(
            check_rootvm_valid(&rootvm_cert, &list, &h.root_ca.certificate, T0),
            Err(ChainReject::WrongRole)
        );
    }

    #[test]
    fn tampered_list_signature_rejected() {
        let h = hierarchy();
        let (dc, dk) = deploy_identity(&h, 20);
        let (_, rootvm_cert) = rootvm_identity(&h, 21);
        let mut list = publish_valid_list(&dc, &dk, [rootvm_cert.fingerprint()], T0);
        list.signature[0] ^= 1;
        assert_eq!(
            check_rootvm_valid(&rootvm_cert, &list, &h.root_ca.certificate, T0),
            Err(ChainReject::BadSignature)
        );
    }

    #[test]
    fn certificate_encoding_idempotent() {
        let h = hierarchy();
        let (_, vm_cert) = scvm_chain(&h);
        let bytes = vm_cert.encode();
        let decoded = RoleCertificate::decode(&bytes).unwrap();
        assert_eq!(decoded.encode(), bytes);
        assert_eq!(decoded.fingerprint(), vm_cert.fingerprint());
    }
}
