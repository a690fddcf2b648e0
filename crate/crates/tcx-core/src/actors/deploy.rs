//! The trusted operator service. Owns the certificate hierarchy and the
//! expected launch digests, endorses each host's broker VM after
//! attesting it, publishes the signed list of currently valid brokers,
//! and enrolls container owners.
//!
//! Deploying a broker is the root of each host's trust: launch through
//! the (untrusted) host, challenge the platform with a fresh nonce,
//! verify the signed report against the expected broker build digest, and
//! only then inject the broker's certified identity — sealed to exactly
//! that VM instance.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use crate::actors::{recv_msg_wait, refusal, request, send_msg, ActorError, RootVmIdentity};
use crate::channel::{client_handshake, server_handshake_after, ChannelConfig};
use crate::crypto::{DhKeypair, Entropy, SigKeypair};
use crate::fixtures::{rootvm_boot, scvm_boot};
use crate::net::{frame_tag, BoxConn, Net, NetError};
use crate::pki::{
    build_hierarchy_at, issue_certificate, publish_valid_list, Fingerprint, Hierarchy, Role,
    RoleCertificate, ValidRootVmList, DEFAULT_ROOTVM_LIFETIME_SECS,
};
use crate::proto::{ErrorCode, Message, TrustBundle};
use crate::tee::{inject_secret, verify_report, VendorRoot};
use crate::wire::Wire;

/// Leaf and host credentials outlive any simulated run comfortably.
const SERVICE_CERT_LIFETIME_SECS: u64 = 30 * 24 * 3600;

pub struct DeployService {
    inner: Arc<DeployInner>,
}

struct DeployInner {
    name: String,
    hierarchy: Hierarchy,
    vendor: VendorRoot,
    cert: RoleCertificate,
    key: SigKeypair,
    rootvm_measurement: [u8; 32],
    scvm_measurement: [u8; 32],
    net: Arc<dyn Net>,
    at_time: u64,
    entropy: Mutex<Entropy>,
    state: Mutex<DeployState>,
}

struct DeployState {
    valid: BTreeSet<Fingerprint>,
    list: ValidRootVmList,
    owners: HashMap<String, RoleCertificate>,
    /// Broker certificate per host name, for revocation by host.
    brokers: HashMap<String, RoleCertificate>,
}

impl DeployService {
    pub fn new(name: &str, net: Arc<dyn Net>, seed: [u8; 32], at_time: u64) -> DeployService {
        let mut entropy = Entropy::from_seed(seed);
        let hierarchy = build_hierarchy_at(entropy.bytes(), at_time);
        let vendor = VendorRoot::new(&mut entropy);
        let key = SigKeypair::generate(&mut entropy);
        let cert = issue_certificate(
            &hierarchy.deploy_ca,
            "deploy-service",
            Role::DeploySystem,
            key.public(),
            at_time,
            at_time + SERVICE_CERT_LIFETIME_SECS,
        )
        .expect("deploy ca issues deploy leaves");
        let list = publish_valid_list(&cert, &key, [], at_time);
        DeployService {
            inner: Arc::new(DeployInner {
                name: name.to_string(),
                hierarchy,
                vendor,
                cert,
                key,
                rootvm_measurement: rootvm_boot().measurement,
                scvm_measurement: scvm_boot().measurement,
                net,
                at_time,
                entropy: Mutex::new(entropy),
                state: Mutex::new(DeployState {
                    valid: BTreeSet::new(),
                    list,
                    owners: HashMap::new(),
                    brokers: HashMap::new(),
                }),
            }),
        }
    }

    /// The platform vendor whose endorsements this deployment trusts.
    /// Hosts are provisioned with platforms endorsed under it.
    pub fn vendor(&self) -> &VendorRoot {
        &self.inner.vendor
    }

    pub fn root_cert(&self) -> &RoleCertificate {
        &self.inner.hierarchy.root_ca.certificate
    }

    /// What a container owner needs before trusting anything: the root
    /// certificate, the vendor key, and the expected launch digests.
    pub fn trust_bundle(&self) -> TrustBundle {
        TrustBundle {
            root_cert: self.root_cert().clone(),
            vendor_public: self.inner.vendor.public(),
            rootvm_measurement: self.inner.rootvm_measurement,
            scvm_measurement: self.inner.scvm_measurement,
        }
    }

    pub fn valid_list(&self) -> ValidRootVmList {
        self.inner.state.lock().unwrap().list.clone()
    }

    /// Provisions a host machine's service credential (done out of band
    /// when the machine is racked).
    pub fn issue_host_identity(&self, name: &str) -> (RoleCertificate, SigKeypair) {
        let mut entropy = self.inner.entropy.lock().unwrap();
        let key = SigKeypair::generate(&mut entropy);
        let cert = issue_certificate(
            &self.inner.hierarchy.deploy_ca,
            name,
            Role::HostSystem,
            key.public(),
            self.inner.at_time,
            self.inner.at_time + SERVICE_CERT_LIFETIME_SECS,
        )
        .expect("deploy ca issues host leaves");
        (cert, key)
    }

    /// Launches, attests and endorses the broker VM on the named host,
    /// then adds it to the published valid list.
    pub fn deploy_rootvm(&self, host: &str) -> Result<RoleCertificate, ActorError> {
        self.inner.deploy_rootvm(host)
    }

    /// Drops the named host's broker from the valid list and republishes.
    /// Returns false if no broker was ever deployed there.
    pub fn revoke_host_broker(&self, host: &str) -> bool {
        let inner = &self.inner;
        let mut state = inner.state.lock().unwrap();
        let Some(cert) = state.brokers.get(host).cloned() else {
            return false;
        };
        state.valid.remove(&cert.fingerprint());
        state.list = publish_valid_list(
            &inner.cert,
            &inner.key,
            state.valid.iter().copied(),
            inner.at_time,
        );
        true
    }

    /// Starts answering enrollment and trust queries on this service's
    /// name. Returns once the listener is registered.
    pub fn spawn_serve(&self) -> Result<(), NetError> {
        let listener = self.inner.net.listen(&self.inner.name)?;
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

impl DeployInner {
    fn child_entropy(&self) -> Entropy {
        let mut e = self.entropy.lock().unwrap();
        Entropy::from_seed(e.bytes())
    }

    /// Serves one caller. Enrollment and trust distribution accept
    /// anonymous clients: they exist to bootstrap identity. A bare
    /// trust-bundle request is answered in plaintext — the bundle is
    /// public material, and a first-time owner has no root to verify a
    /// channel against yet (trust on first use).
    fn handle_conn(self: Arc<Self>, conn: BoxConn) {
        let first = match conn.recv() {
            Ok(f) => f,
            Err(_) => return,
        };
        if frame_tag(&first) == Some(crate::proto::TAG_GET_TRUST_BUNDLE) {
            let reply = Message::TrustBundleOk {
                bundle: TrustBundle {
                    root_cert: self.hierarchy.root_ca.certificate.clone(),
                    vendor_public: self.vendor.public(),
                    rootvm_measurement: self.rootvm_measurement,
                    scvm_measurement: self.scvm_measurement,
                },
            };
            let _ = crate::actors::send_plain(conn.as_ref(), &reply);
            conn.close();
            return;
        }
        if frame_tag(&first) != Some(0x10) {
            return;
        }
        let chan = server_handshake_after(
            conn,
            &ChannelConfig {
                cert: Some(&self.cert),
                key: Some(&self.key),
                trust_root: &self.hierarchy.root_ca.certificate,
                expected_peer_role: None,
                at_time: self.at_time,
                allow_anonymous_peer: true,
            },
            &mut self.child_entropy(),
            first,
        );
        let mut chan = match chan {
            Ok(c) => c,
            Err(_) => return,
        };
        loop {
            let msg = match recv_msg_wait(&mut chan) {
                Ok(m) => m,
                Err(_) => return,
            };
            let reply = match msg {
                Message::OwnerEnroll { name, public_key } => {
                    match self.enroll_owner(&name, public_key) {
                        Ok(cert) => Message::EnrollOk { cert },
                        Err((code, message)) => Message::ErrorReply { code, message },
                    }
                }
                Message::GetTrustBundle => Message::TrustBundleOk {
                    bundle: TrustBundle {
                        root_cert: self.hierarchy.root_ca.certificate.clone(),
                        vendor_public: self.vendor.public(),
                        rootvm_measurement: self.rootvm_measurement,
                        scvm_measurement: self.scvm_measurement,
                    },
                },
                Message::GetValidList => Message::ValidListOk {
                    list: self.state.lock().unwrap().list.clone(),
                },
                Message::DeployRootVm { host } => match self.deploy_rootvm(&host) {
                    Ok(rootvm_cert) => Message::DeployOk { rootvm_cert },
                    Err(e) => refusal(&e),
                },
                other => Message::ErrorReply {
                    code: ErrorCode::BadRequest,
                    message: format!("not a deploy operation: {}", other.name()),
                },
            };
            if send_msg(&mut chan, &reply).is_err() {
                return;
            }
        }
    }

    /// First-come claim of an owner name; the certificate binds the name
    /// to the key the owner generated locally.
    fn enroll_owner(
        &self,
        name: &str,
        public_key: [u8; 32],
    ) -> Result<RoleCertificate, (ErrorCode, String)> {
        let mut state = self.state.lock().unwrap();
        if state.owners.contains_key(name) {
            return Err((
                ErrorCode::NameTaken,
                format!("owner name {name:?} is already enrolled"),
            ));
        }
        let cert = issue_certificate(
            &self.hierarchy.owner_ca,
            name,
            Role::ContainerOwner,
            public_key,
            self.at_time,
            self.at_time + SERVICE_CERT_LIFETIME_SECS,
        )
        .map_err(|e| (ErrorCode::Internal, e.to_string()))?;
        state.owners.insert(name.to_string(), cert.clone());
        Ok(cert)
    }

    fn deploy_rootvm(&self, host: &str) -> Result<RoleCertificate, ActorError> {
        let conn = self.net.dial(&self.name, host)?;
        let mut chan = client_handshake(
            conn,
            &ChannelConfig {
                cert: Some(&self.cert),
                key: Some(&self.key),
                trust_root: &self.hierarchy.root_ca.certificate,
                expected_peer_role: Some(Role::HostSystem),
                at_time: self.at_time,
                allow_anonymous_peer: false,
            },
            &mut self.child_entropy(),
        )?;

        let vm_id = match request(&mut chan, &Message::LaunchRootVm)? {
            Message::LaunchOk { vm_id } => vm_id,
            other => {
                return Err(ActorError::Unexpected { got: other.name(), expected: "launch-ok" })
            }
        };

        let nonce: [u8; 16] = self.entropy.lock().unwrap().bytes();
        let report = match request(&mut chan, &Message::AttestVm { vm_id, nonce })? {
            Message::AttestOk { report } => report,
            other => {
                return Err(ActorError::Unexpected { got: other.name(), expected: "attest-ok" })
            }
        };
        verify_report(&report, &self.rootvm_measurement, &nonce, &self.vendor.public())
            .map_err(ActorError::Report)?;
        if report.measurement.vm_id != vm_id {
            return Err(ActorError::refused(
                ErrorCode::WrongMeasurement,
                "report names a different vm instance",
            ));
        }

        let (broker_key, broker_cert) = {
            let mut entropy = self.entropy.lock().unwrap();
            let key = SigKeypair::generate(&mut entropy);
            let cert = issue_certificate(
                &self.hierarchy.rootvm_ca,
                &format!("broker-{host}"),
                Role::RootVm,
                key.public(),
                self.at_time,
                self.at_time + DEFAULT_ROOTVM_LIFETIME_SECS,
            )
            .map_err(|e| ActorError::refused(ErrorCode::Internal, e.to_string()))?;
            (key, cert)
        };
        let identity = RootVmIdentity {
            cert: broker_cert.clone(),
            key_secret: broker_key.secret_bytes(),
            trust_root: self.hierarchy.root_ca.certificate.clone(),
            vendor_public: self.vendor.public(),
            scvm_measurement: self.scvm_measurement,
        };
        let injection = {
            let mut entropy = self.entropy.lock().unwrap();
            let dh = DhKeypair::generate(&mut entropy);
            inject_secret(&report, &identity.encode(), &dh, &mut entropy)
        };
        match request(&mut chan, &Message::DeliverSecret { vm_id, injection })? {
            Message::DeliverOk => {}
            other => {
                return Err(ActorError::Unexpected { got: other.name(), expected: "deliver-ok" })
            }
        }

        let mut state = self.state.lock().unwrap();
        state.valid.insert(broker_cert.fingerprint());
        state.brokers.insert(host.to_string(), broker_cert.clone());
        state.list =
            publish_valid_list(&self.cert, &self.key, state.valid.iter().copied(), self.at_time);
        Ok(broker_cert)
    }
}
