//! The container owner's client. Everything security-relevant happens
//! here, on the owner's own machine: sealing images, verifying every
//! certificate chain and attestation report, checking the broker against
//! the freshly fetched valid list, and releasing image keys only over a
//! channel pinned to the exact VM certificate that attestation vouched
//! for.
//!
//! The first contact fetches the operator's trust bundle in plaintext
//! (trust on first use); every later exchange is verified against the
//! root certificate in that bundle.

use std::collections::HashMap;

use crate::actors::{recv_plain, request, send_plain, ActorError, SIM_TIME};
use crate::channel::{client_handshake, Channel, ChannelConfig};
use crate::crypto::{Entropy, SigKeypair};
use crate::fixtures::layer_set_id;
use crate::image::{seal_image, ImageKey, SealedImage};
use crate::net::{Net, NetError};
use crate::pki::{check_rootvm_valid, verify_chain, Role, RoleCertificate, ValidRootVmList};
use crate::proto::{CommandBody, ErrorCode, Message, ResponseBody, TrustBundle};
use crate::tee::{verify_report, VmId};
use crate::wire::{Reader, Wire, WireError, Writer};

/// One VM this owner created, and where it runs.
#[derive(Debug, Clone)]
pub struct OwnedVm {
    pub cert_vm: RoleCertificate,
    pub host: String,
}

pub struct Owner {
    name: String,
    key: SigKeypair,
    cert: Option<RoleCertificate>,
    trust: Option<TrustBundle>,
    valid_list: Option<ValidRootVmList>,
    net: std::sync::Arc<dyn Net>,
    deploy_name: String,
    deploy_chan: Option<Channel>,
    host_chans: HashMap<String, Channel>,
    broker_chans: HashMap<String, Channel>,
    agent_chans: HashMap<VmId, Channel>,
    cmd_seq: u64,
    vms: HashMap<VmId, OwnedVm>,
    image_keys: HashMap<[u8; 32], ImageKey>,
    at_time: u64,
    entropy: Entropy,
}

impl Owner {
    pub fn new(
        name: &str,
        net: std::sync::Arc<dyn Net>,
        deploy_name: &str,
        seed: [u8; 32],
    ) -> Owner {
        let mut entropy = Entropy::from_seed(seed);
        let key = SigKeypair::generate(&mut entropy);
        Owner {
            name: name.to_string(),
            key,
            cert: None,
            trust: None,
            valid_list: None,
            net,
            deploy_name: deploy_name.to_string(),
            deploy_chan: None,
            host_chans: HashMap::new(),
            broker_chans: HashMap::new(),
            agent_chans: HashMap::new(),
            cmd_seq: 0,
            vms: HashMap::new(),
            image_keys: HashMap::new(),
            at_time: SIM_TIME,
            entropy,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn certificate(&self) -> Option<&RoleCertificate> {
        self.cert.as_ref()
    }

    pub fn trust(&self) -> Option<&TrustBundle> {
        self.trust.as_ref()
    }

    pub fn vm(&self, vm_id: VmId) -> Option<&OwnedVm> {
        self.vms.get(&vm_id)
    }

    pub fn image_key(&self, image_id: &[u8; 32]) -> Option<&ImageKey> {
        self.image_keys.get(image_id)
    }

    /// For resuming from saved state: adopt a previously generated image
    /// key instead of minting a new one.
    pub fn adopt_image_key(&mut self, key: ImageKey) {
        self.image_keys.insert(key.image_id, key);
    }

    fn trust_ref(&self) -> Result<&TrustBundle, ActorError> {
        self.trust.as_ref().ok_or_else(|| {
            ActorError::refused(ErrorCode::WrongPhase, "trust bundle not fetched yet")
        })
    }

    /// First contact: fetch the operator's public trust material over a
    /// bare connection. Everything afterwards verifies against it.
    pub fn fetch_trust(&mut self) -> Result<&TrustBundle, ActorError> {
        if self.trust.is_none() {
            let conn = self.net.dial(&self.name, &self.deploy_name)?;
            send_plain(conn.as_ref(), &Message::GetTrustBundle)?;
            let bundle = match recv_plain(conn.as_ref())? {
                Message::TrustBundleOk { bundle } => bundle,
                other => {
                    return Err(ActorError::Unexpected {
                        got: other.name(),
                        expected: "trust-bundle-ok",
                    })
                }
            };
            conn.close();
            self.trust = Some(bundle);
        }
        Ok(self.trust.as_ref().expect("just fetched"))
    }

    /// Opens (or reuses) the verified channel to the deploy service.
    /// Enrollment has not happened yet on first use, so the client side
    /// stays anonymous; the server side must prove it is the deploy
    /// system under the fetched root.
    fn with_deploy<T>(
        &mut self,
        f: impl FnOnce(&mut Channel) -> Result<T, ActorError>,
    ) -> Result<T, ActorError> {
        self.fetch_trust()?;
        let trust = self.trust.clone().expect("fetched above");
        let mut chan = match self.deploy_chan.take() {
            Some(c) => c,
            None => {
                let conn = self.net.dial(&self.name, &self.deploy_name)?;
                client_handshake(
                    conn,
                    &ChannelConfig {
                        cert: None,
                        key: None,
                        trust_root: &trust.root_cert,
                        expected_peer_role: Some(Role::DeploySystem),
                        at_time: self.at_time,
                        allow_anonymous_peer: false,
                    },
                    &mut self.entropy,
                )?
            }
        };
        let out = f(&mut chan);
        self.deploy_chan = Some(chan);
        out
    }

    /// Claims this owner's name with the deploy service and receives the
    /// certificate for the locally generated key.
    pub fn enroll(&mut self) -> Result<&RoleCertificate, ActorError> {
        if self.cert.is_some() {
            return Ok(self.cert.as_ref().expect("checked"));
        }
        let name = self.name.clone();
        let public_key = self.key.public();
        let cert = self.with_deploy(|chan| {
            match request(chan, &Message::OwnerEnroll { name, public_key })? {
                Message::EnrollOk { cert } => Ok(cert),
                other => Err(ActorError::Unexpected { got: other.name(), expected: "enroll-ok" }),
            }
        })?;
        let trust = self.trust_ref()?;
        verify_chain(&cert, &trust.root_cert, self.at_time, Role::ContainerOwner)
            .map_err(ActorError::Chain)?;
        if cert.public_key != self.key.public() {
            return Err(ActorError::refused(
                ErrorCode::Rejected,
                "enrollment certificate names a different key",
            ));
        }
        self.cert = Some(cert);
        Ok(self.cert.as_ref().expect("just set"))
    }

    /// Fetches the current signed list of valid brokers.
    pub fn fetch_valid_list(&mut self) -> Result<ValidRootVmList, ActorError> {
        let list = self.with_deploy(|chan| match request(chan, &Message::GetValidList)? {
            Message::ValidListOk { list } => Ok(list),
            other => Err(ActorError::Unexpected { got: other.name(), expected: "valid-list-ok" }),
        })?;
        self.valid_list = Some(list.clone());
        Ok(list)
    }

    fn own_cert(&self) -> Result<RoleCertificate, ActorError> {
        self.cert
            .clone()
            .ok_or_else(|| ActorError::refused(ErrorCode::WrongPhase, "owner is not enrolled"))
    }

    /// Opens (or reuses) the host's API channel.
    fn with_host<T>(
        &mut self,
        host: &str,
        f: impl FnOnce(&mut Channel) -> Result<T, ActorError>,
    ) -> Result<T, ActorError> {
        let trust = self.trust_ref()?.clone();
        let cert = self.own_cert()?;
        let mut chan = match self.host_chans.remove(host) {
            Some(c) => c,
            None => {
                let conn = self.net.dial(&self.name, host)?;
                client_handshake(
                    conn,
                    &ChannelConfig {
                        cert: Some(&cert),
                        key: Some(&self.key),
                        trust_root: &trust.root_cert,
                        expected_peer_role: Some(Role::HostSystem),
                        at_time: self.at_time,
                        allow_anonymous_peer: false,
                    },
                    &mut self.entropy,
                )?
            }
        };
        let out = f(&mut chan);
        self.host_chans.insert(host.to_string(), chan);
        out
    }

    /// Dials a guest seat on `host` through the routing preamble and
    /// completes a mutually authenticated channel with whatever answers.
    fn dial_routed(
        &mut self,
        host: &str,
        destination: &str,
        expected_role: Role,
    ) -> Result<Channel, ActorError> {
        let trust = self.trust_ref()?.clone();
        let cert = self.own_cert()?;
        let conn = self.net.dial(&self.name, host)?;
        send_plain(
            conn.as_ref(),
            &Message::RouteRequest { destination: destination.to_string() },
        )?;
        match recv_plain(conn.as_ref())? {
            Message::RouteGranted => {}
            Message::RouteError { reason } => return Err(NetError::Refused(reason).into()),
            other => {
                return Err(ActorError::Unexpected { got: other.name(), expected: "route-granted" })
            }
        }
        Ok(client_handshake(
            conn,
            &ChannelConfig {
                cert: Some(&cert),
                key: Some(&self.key),
                trust_root: &trust.root_cert,
                expected_peer_role: Some(expected_role),
                at_time: self.at_time,
                allow_anonymous_peer: false,
            },
            &mut self.entropy,
        )?)
    }

    fn with_broker<T>(
        &mut self,
        host: &str,
        f: impl FnOnce(&mut Channel) -> Result<T, ActorError>,
    ) -> Result<T, ActorError> {
        let mut chan = match self.broker_chans.remove(host) {
            Some(c) => c,
            None => self.dial_routed(host, "broker", Role::RootVm)?,
        };
        let out = f(&mut chan);
        self.broker_chans.insert(host.to_string(), chan);
        out
    }

    /// Seals the layers under a fresh (or previously minted) key and
    /// uploads the ciphertext to the host. Returns the image id.
    pub fn seal_and_upload(
        &mut self,
        host: &str,
        layers: &[(String, Vec<u8>)],
    ) -> Result<[u8; 32], ActorError> {
        let image_id = layer_set_id(layers);
        if !self.image_keys.contains_key(&image_id) {
            let key = ImageKey::generate(&mut self.entropy, image_id);
            self.image_keys.insert(image_id, key);
        }
        let key = self.image_keys.get(&image_id).expect("just inserted");
        let sealed = seal_image(layers, key)
            .map_err(|e| ActorError::refused(ErrorCode::BadRequest, e.to_string()))?;
        self.upload_image(host, &sealed)
    }

    /// Uploads an image sealed earlier (the key must already be held,
    /// see [`Owner::adopt_image_key`]). Returns the image id.
    pub fn upload_image(
        &mut self,
        host: &str,
        sealed: &SealedImage,
    ) -> Result<[u8; 32], ActorError> {
        let image_id = sealed.header.image_id;
        let bytes = sealed.to_bytes();
        let echoed = self.with_host(host, |chan| {
            match request(chan, &Message::UploadImage { bytes })? {
                Message::UploadOk { image_id } => Ok(image_id),
                other => Err(ActorError::Unexpected { got: other.name(), expected: "upload-ok" }),
            }
        })?;
        if echoed != image_id {
            return Err(ActorError::refused(
                ErrorCode::Rejected,
                "host acknowledged a different image id",
            ));
        }
        Ok(image_id)
    }

    /// Creates one confidential VM on `host` and verifies every piece of
    /// evidence before trusting it: the broker must be on a freshly
    /// fetched valid list, the report must be fresh, genuine and carry
    /// the expected runtime digest, and the VM certificate must chain
    /// through that same broker.
    pub fn create_vm(&mut self, host: &str, image_id: [u8; 32]) -> Result<VmId, ActorError> {
        let trust = self.trust_ref()?.clone();
        let list = self.fetch_valid_list()?;

        let broker_cert = self.with_broker(host, |chan| {
            Ok(chan.peer_cert().expect("mutual handshake").clone())
        })?;
        match check_rootvm_valid(&broker_cert, &list, &trust.root_cert, self.at_time) {
            Ok(true) => {}
            Ok(false) => return Err(ActorError::Revoked),
            Err(c) => return Err(ActorError::Chain(c)),
        }

        let nonce: [u8; 16] = self.entropy.bytes();
        let (vm_id, cert_vm, report) = self.with_broker(host, |chan| {
            match request(chan, &Message::CreateScvm { image_id, nonce })? {
                Message::CreateScvmOk { vm_id, cert_vm, report } => Ok((vm_id, cert_vm, report)),
                other => {
                    Err(ActorError::Unexpected { got: other.name(), expected: "create-scvm-ok" })
                }
            }
        })?;

        verify_report(&report, &trust.scvm_measurement, &nonce, &trust.vendor_public)
            .map_err(ActorError::Report)?;
        if report.measurement.vm_id != vm_id {
            return Err(ActorError::refused(
                ErrorCode::WrongMeasurement,
                "report names a different vm instance",
            ));
        }
        verify_chain(&cert_vm, &trust.root_cert, self.at_time, Role::ScVm)
            .map_err(ActorError::Chain)?;
        if cert_vm.subject_name != vm_id.to_hex() {
            return Err(ActorError::refused(
                ErrorCode::Rejected,
                "vm certificate names a different instance",
            ));
        }
        if cert_vm.issuer_chain.first().map(|c| c.encode()) != Some(broker_cert.encode()) {
            return Err(ActorError::refused(
                ErrorCode::Rejected,
                "vm certificate was not issued by this host's broker",
            ));
        }

        self.vms.insert(vm_id, OwnedVm { cert_vm, host: host.to_string() });
        Ok(vm_id)
    }

    /// Opens (or reuses) the command channel to one of our VMs, pinned to
    /// the exact certificate that attestation vouched for.
    fn with_agent<T>(
        &mut self,
        vm_id: VmId,
        f: impl FnOnce(&mut Channel) -> Result<T, ActorError>,
    ) -> Result<T, ActorError> {
        let info = self.vms.get(&vm_id).cloned().ok_or_else(|| {
            ActorError::refused(ErrorCode::NoSuchVm, format!("no vm {}", vm_id.to_hex()))
        })?;
        let mut chan = match self.agent_chans.remove(&vm_id) {
            Some(c) => c,
            None => {
                let chan =
                    self.dial_routed(&info.host, &format!("vm:{}", vm_id.to_hex()), Role::ScVm)?;
                let presented = chan.peer_cert().expect("mutual handshake");
                if presented.encode() != info.cert_vm.encode() {
                    return Err(ActorError::refused(
                        ErrorCode::Rejected,
                        "vm presented a certificate other than the attested one",
                    ));
                }
                chan
            }
        };
        let out = f(&mut chan);
        self.agent_chans.insert(vm_id, chan);
        out
    }

    fn next_sequence(&mut self) -> u64 {
        self.cmd_seq += 1;
        self.cmd_seq
    }

    fn exchange_command(
        chan: &mut Channel,
        sequence: u64,
        body: CommandBody,
    ) -> Result<ResponseBody, ActorError> {
        match request(chan, &Message::OwnerCommand { sequence, body })? {
            Message::AgentResponse { sequence: echoed, body } if echoed == sequence => Ok(body),
            Message::AgentResponse { .. } => Err(ActorError::Unexpected {
                got: "agent-response",
                expected: "matching sequence",
            }),
            other => {
                Err(ActorError::Unexpected { got: other.name(), expected: "agent-response" })
            }
        }
    }

    /// Sends one command to one of our VMs.
    pub fn command(&mut self, vm_id: VmId, body: CommandBody) -> Result<ResponseBody, ActorError> {
        let sequence = self.next_sequence();
        self.with_agent(vm_id, |chan| Self::exchange_command(chan, sequence, body))
    }

    /// Sends a command to a VM this owner did not create (no certificate
    /// pin — we have no attested certificate to pin to). The agent is
    /// expected to refuse it; this exists so runs can demonstrate that.
    pub fn command_other(
        &mut self,
        host: &str,
        vm_id: VmId,
        body: CommandBody,
    ) -> Result<ResponseBody, ActorError> {
        let sequence = self.next_sequence();
        let mut chan = self.dial_routed(host, &format!("vm:{}", vm_id.to_hex()), Role::ScVm)?;
        let out = Self::exchange_command(&mut chan, sequence, body);
        chan.close();
        out
    }

    /// Triggers the host to stage the image ciphertext in the VM, then
    /// releases the image key to the VM over the pinned channel.
    pub fn load_image(&mut self, vm_id: VmId, image_id: [u8; 32]) -> Result<(), ActorError> {
        let host = self
            .vms
            .get(&vm_id)
            .ok_or_else(|| {
                ActorError::refused(ErrorCode::NoSuchVm, format!("no vm {}", vm_id.to_hex()))
            })?
            .host
            .clone();
        let key = self
            .image_keys
            .get(&image_id)
            .cloned()
            .ok_or_else(|| {
                ActorError::refused(
                    ErrorCode::NoSuchImage,
                    format!("no key for image {}", hex::encode(image_id)),
                )
            })?;
        self.with_host(&host, |chan| {
            match request(chan, &Message::LoadImageIntoVm { vm_id, image_id })? {
                Message::LoadTriggerOk => Ok(()),
                other => {
                    Err(ActorError::Unexpected { got: other.name(), expected: "load-trigger-ok" })
                }
            }
        })?;
        match self.command(vm_id, CommandBody::LoadImage { image_key: key })? {
            ResponseBody::Done => Ok(()),
            other => Err(ActorError::Unexpected { got: other.name(), expected: "done" }),
        }
    }

    /// Starts the named workload in the VM.
    pub fn exec(&mut self, vm_id: VmId, entry: &str) -> Result<(), ActorError> {
        match self.command(vm_id, CommandBody::Exec { entry: entry.to_string() })? {
            ResponseBody::ExecStarted => Ok(()),
            other => Err(ActorError::Unexpected { got: other.name(), expected: "exec-started" }),
        }
    }

    /// Blocks until the VM's workload finishes and returns its output.
    pub fn wait(&mut self, vm_id: VmId) -> Result<Vec<u8>, ActorError> {
        match self.command(vm_id, CommandBody::Wait)? {
            ResponseBody::Output { bytes } => Ok(bytes),
            other => Err(ActorError::Unexpected { got: other.name(), expected: "output" }),
        }
    }

    pub fn status(&mut self, vm_id: VmId) -> Result<(String, Vec<String>), ActorError> {
        match self.command(vm_id, CommandBody::Status)? {
            ResponseBody::Status { phase, names } => Ok((phase, names)),
            other => Err(ActorError::Unexpected { got: other.name(), expected: "status" }),
        }
    }

    pub fn stop(&mut self, vm_id: VmId) -> Result<(), ActorError> {
        match self.command(vm_id, CommandBody::Stop)? {
            ResponseBody::Done => Ok(()),
            other => Err(ActorError::Unexpected { got: other.name(), expected: "done" }),
        }
    }

    /// Drops every cached channel, closing them. Later operations redial.
    pub fn disconnect(&mut self) {
        if let Some(chan) = self.deploy_chan.take() {
            chan.close();
        }
        for (_, chan) in self.host_chans.drain() {
            chan.close();
        }
        for (_, chan) in self.broker_chans.drain() {
            chan.close();
        }
        for (_, chan) in self.agent_chans.drain() {
            chan.close();
        }
    }

    /// Captures everything that must survive the process: identity,
    /// enrollment, trust material, image keys and created VMs. Live
    /// channels are deliberately absent; a restored owner redials.
    pub fn snapshot(&self) -> OwnerState {
        OwnerState {
            name: self.name.clone(),
            deploy_name: self.deploy_name.clone(),
            secret_key: self.key.secret_bytes(),
            cmd_seq: self.cmd_seq,
            cert: self.cert.clone(),
            trust: self.trust.clone(),
            image_keys: self.image_keys.values().cloned().collect(),
            vms: self
                .vms
                .iter()
                .map(|(id, vm)| (*id, vm.host.clone(), vm.cert_vm.clone()))
                .collect(),
        }
    }

    /// Rebuilds an owner from a saved snapshot. `entropy` supplies the
    /// nonces and handshake randomness for this session.
    pub fn restore(state: OwnerState, net: std::sync::Arc<dyn Net>, entropy: Entropy) -> Owner {
        let mut owner = Owner {
            name: state.name,
            key: SigKeypair::from_secret_bytes(state.secret_key),
            cert: state.cert,
            trust: state.trust,
            valid_list: None,
            net,
            deploy_name: state.deploy_name,
            deploy_chan: None,
            host_chans: HashMap::new(),
            broker_chans: HashMap::new(),
            agent_chans: HashMap::new(),
            cmd_seq: state.cmd_seq,
            vms: HashMap::new(),
            image_keys: HashMap::new(),
            at_time: SIM_TIME,
            entropy,
        };
        for key in state.image_keys {
            owner.image_keys.insert(key.image_id, key);
        }
        for (id, host, cert_vm) in state.vms {
            owner.vms.insert(id, OwnedVm { cert_vm, host });
        }
        owner
    }
}

/// The owner's durable state, in its on-disk form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerState {
    pub name: String,
    pub deploy_name: String,
    pub secret_key: [u8; 32],
    /// Command sequence high-water mark. Agents refuse anything at or
    /// below what they have seen, so a resumed owner must carry on
    /// counting where it stopped.
    pub cmd_seq: u64,
    pub cert: Option<RoleCertificate>,
    pub trust: Option<TrustBundle>,
    pub image_keys: Vec<ImageKey>,
    /// (vm id, host it runs on, the attested VM certificate).
    pub vms: Vec<(VmId, String, RoleCertificate)>,
}

impl Wire for OwnerState {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.str_field(&self.name)
            .str_field(&self.deploy_name)
            .field(&self.secret_key)
            .u64_field(self.cmd_seq);
        let opt = |item: &Option<Vec<u8>>| -> Vec<Vec<u8>> {
            item.iter().cloned().collect()
        };
        w.list_field(&opt(&self.cert.as_ref().map(|c| c.encode())));
        w.list_field(&opt(&self.trust.as_ref().map(|t| t.encode())));
        let keys: Vec<Vec<u8>> = self.image_keys.iter().map(|k| k.encode()).collect();
        w.list_field(&keys);
        let vms: Vec<Vec<u8>> = self
            .vms
            .iter()
            .map(|(id, host, cert)| {
                let mut vw = Writer::new();
                vw.field(&id.0).str_field(host).field(&cert.encode());
                vw.finish()
            })
            .collect();
        w.list_field(&vms);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let name = r.str_field()?;
        let deploy_name = r.str_field()?;
        let secret_key = r.fixed()?;
        let cmd_seq = r.u64_field()?;
        let one = |items: Vec<Vec<u8>>| -> Result<Option<Vec<u8>>, WireError> {
            match items.len() {
                0 => Ok(None),
                1 => Ok(items.into_iter().next()),
                n => Err(WireError::Invalid {
                    what: "optional field",
                    detail: format!("repeated {n} times"),
                }),
            }
        };
        let cert = one(r.list_field()?)?.map(|b| RoleCertificate::decode(&b)).transpose()?;
        let trust = one(r.list_field()?)?.map(|b| TrustBundle::decode(&b)).transpose()?;
        let image_keys = r
            .list_field()?
            .iter()
            .map(|b| ImageKey::decode(b))
            .collect::<Result<Vec<_>, _>>()?;
        let vms = r
            .list_field()?
            .iter()
            .map(|b| {
                let mut vr = Reader::new(b);
                let id = VmId(vr.fixed()?);
                let host = vr.str_field()?;
                let cert = RoleCertificate::decode(vr.field()?)?;
                vr.done()?;
                Ok((id, host, cert))
            })
            .collect::<Result<Vec<_>, WireError>>()?;
        r.done()?;
        Ok(OwnerState { name, deploy_name, secret_key, cmd_seq, cert, trust, image_keys, vms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actors::SIM_TIME;
    use crate::pki::build_hierarchy_at;

    #[test]
    fn owner_state_round_trips() {
        let h = build_hierarchy_at([5u8; 32], SIM_TIME);
        let mut entropy = Entropy::from_seed([6u8; 32]);
        let fresh = OwnerState {
            name: "alice".into(),
            deploy_name: "deploy".into(),
            secret_key: [9u8; 32],
            cmd_seq: 4,
            cert: None,
            trust: None,
            image_keys: Vec::new(),
            vms: Vec::new(),
        };
        assert_eq!(OwnerState::decode(&fresh.encode()).unwrap(), fresh);

        let populated = OwnerState {
            cert: Some(h.owner_ca.certificate.clone()),
            trust: None,
            image_keys: vec![ImageKey::generate(&mut entropy, [3u8; 32])],
            vms: vec![(
                VmId([7u8; 16]),
                "host-a".into(),
                h.rootvm_ca.certificate.clone(),
            )],
            ..fresh
        };
        let decoded = OwnerState::decode(&populated.encode()).unwrap();
        assert_eq!(decoded, populated);
        // The decoded form re-encodes to the identical bytes.
        assert_eq!(decoded.encode(), populated.encode());
    }

    #[test]
    fn restored_owner_keeps_identity_and_keys() {
        let net = std::sync::Arc::new(crate::net::SimNet::new());
        let mut owner = Owner::new("alice", net.clone(), "deploy", [1u8; 32]);
        let key = ImageKey::generate(&mut Entropy::from_seed([2u8; 32]), [8u8; 32]);
        owner.adopt_image_key(key.clone());

        let snap = owner.snapshot();
        let restored = Owner::restore(snap, net, Entropy::from_seed([3u8; 32]));
        assert_eq!(restored.name(), "alice");
        assert_eq!(restored.key.public(), owner.key.public());
        assert_eq!(restored.image_key(&[8u8; 32]), Some(&key));
    }
}
