//! Scripted end-to-end runs over the in-process network, each fully
//! determined by one seed: replaying a seed reproduces the same run down
//! to the hash of every frame on the wire.
//!
//! A scenario drives one deploy service, one host (sometimes with a
//! second owner), through a complete story — bring-up, image upload,
//! VM creation, workload execution — or through one specific way the
//! carrier host can misbehave, ending in the refusal that misconduct
//! earns. The outcome carries a human-readable log and the canonical
//! transcript hash used to check that runs are reproducible.

use std::sync::Arc;

use thiserror::Error;

use crate::actors::deploy::DeployService;
use crate::actors::host::{HostConduct, HostService};
use crate::actors::owner::Owner;
use crate::actors::{ActorError, SIM_TIME};
use crate::crypto::{sha256, Entropy};
use crate::fixtures::{
    demo_layers, workload_layer, MAIN_ENTRY, PING_CLIENT_ENTRY, PING_SERVER_ENTRY,
    TEST_CLIENT_ENTRY, TEST_SERVER_ENTRY,
};
use crate::net::{EventKind, NetEvent, SimNet};
use crate::proto::CommandBody;
use crate::tee::VmId;

const HOST_A: &str = "host-a";

/// Every scenario the harness knows, in a stable order.
pub const SCENARIOS: &[&str] = &[
    "full-lifecycle",
    "secure-channel",
    "native-pair",
    "tamper-image",
    "tamper-kernel",
    "tamper-params",
    "tamper-fs",
    "fake-tee",
    "replay-report",
    "replay-secret",
    "host-impersonation",
    "revoked-rootvm",
    "wrong-owner-command",
    "wrong-owner-dial",
];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no scenario named {0:?}")]
    UnknownScenario(String),
    #[error("{0}")]
    Step(String),
}

/// What one run produced: the step log (including full workload output)
/// and the canonical hash of everything that crossed the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub seed: u64,
    pub log: Vec<String>,
    pub transcript_hash: [u8; 32],
}

pub fn run_scenario(name: &str, seed: u64) -> Result<ScenarioOutcome, SimError> {
    let f = match name {
        "full-lifecycle" => full_lifecycle,
        "secure-channel" => secure_channel,
        "native-pair" => native_pair,
        "tamper-image" => tamper_image,
        "tamper-kernel" => |s: &mut World| boot_tamper(s, HostConduct::TamperKernel),
        "tamper-params" => |s: &mut World| boot_tamper(s, HostConduct::TamperParams),
        "tamper-fs" => |s: &mut World| boot_tamper(s, HostConduct::TamperFs),
        "fake-tee" => fake_tee,
        "replay-report" => replay_report,
        "replay-secret" => replay_secret,
        "host-impersonation" => host_impersonation,
        "revoked-rootvm" => revoked_rootvm,
        "wrong-owner-command" => wrong_owner_command,
        "wrong-owner-dial" => wrong_owner_dial,
        _ => return Err(SimError::UnknownScenario(name.to_string())),
    };
    let mut world = World::new(name, seed);
    f(&mut world)?;
    Ok(world.finish())
}

/// Canonical digest of a run's network transcript. Events are sorted by
/// (connection, per-direction sequence, sender), which is a total order
/// independent of scheduling: each direction of each connection numbers
/// its own frames.
pub fn transcript_hash(events: &[NetEvent]) -> [u8; 32] {
    let mut evs: Vec<&NetEvent> = events.iter().collect();
    evs.sort_by(|a, b| {
        (a.conn_id, a.seq, &a.actor, &a.label).cmp(&(b.conn_id, b.seq, &b.actor, &b.label))
    });
    let mut bytes = Vec::new();
    for e in evs {
        bytes.extend_from_slice(&e.conn_id.to_be_bytes());
        bytes.extend_from_slice(&e.seq.to_be_bytes());
        bytes.push(match e.kind {
            EventKind::Open => 0,
            EventKind::Frame => 1,
        });
        bytes.extend_from_slice(&(e.actor.len() as u32).to_be_bytes());
        bytes.extend_from_slice(e.actor.as_bytes());
        bytes.extend_from_slice(&(e.label.len() as u32).to_be_bytes());
        bytes.extend_from_slice(e.label.as_bytes());
        match e.tag {
            Some(t) => bytes.extend_from_slice(&[1, t]),
            None => bytes.push(0),
        }
        bytes.extend_from_slice(&e.digest);
    }
    sha256(&bytes)
}

fn actor_seed(seed: u64, label: &str) -> [u8; 32] {
    let mut input = Vec::with_capacity(label.len() + 8);
    input.extend_from_slice(label.as_bytes());
    input.extend_from_slice(&seed.to_le_bytes());
    sha256(&input)
}

struct World {
    name: String,
    seed: u64,
    net: Arc<SimNet>,
    deploy: DeployService,
    hosts: Vec<HostService>,
    log: Vec<String>,
}

impl World {
    fn new(name: &str, seed: u64) -> World {
        let net = Arc::new(SimNet::new());
        let deploy =
            DeployService::new("deploy", net.clone(), actor_seed(seed, "deploy"), SIM_TIME);
        deploy.spawn_serve().expect("fresh switch has no listener yet");
        World {
            name: name.to_string(),
            seed,
            net,
            deploy,
            hosts: Vec::new(),
            log: Vec::new(),
        }
    }

    fn add_host(&mut self, conduct: HostConduct) {
        let (cert, key) = self.deploy.issue_host_identity(HOST_A);
        let host = HostService::new(
            HOST_A,
            cert,
            key,
            self.deploy.root_cert().clone(),
            self.deploy.vendor(),
            conduct,
            SIM_TIME,
            Entropy::from_seed(actor_seed(self.seed, HOST_A)),
        );
        host.spawn_serve(self.net.clone()).expect("host name is free");
        self.hosts.push(host);
    }

    fn owner(&self, name: &str) -> Owner {
        Owner::new(name, self.net.clone(), "deploy", actor_seed(self.seed, name))
    }

    fn note(&mut self, line: String) {
        self.log.push(line);
    }

    fn finish(self) -> ScenarioOutcome {
        self.net.shutdown();
        let hash = transcript_hash(&self.net.events());
        ScenarioOutcome {
            name: self.name,
            seed: self.seed,
            log: self.log,
            transcript_hash: hash,
        }
    }
}

/// A step the scenario needs to succeed; failure means the scenario (or
/// the stack under it) is broken, not that a refusal was demonstrated.
fn step<T>(what: &str, result: Result<T, ActorError>) -> Result<T, SimError> {
    result.map_err(|e| SimError::Step(format!("{what}: {e}")))
}

/// A step the scenario needs to FAIL; returns the log line describing
/// the refusal.
fn expect_refusal<T: std::fmt::Debug>(
    what: &str,
    result: Result<T, ActorError>,
) -> Result<String, SimError> {
    match result {
        Err(e) => {
            let detail = match &e {
                ActorError::Refused { message, .. } => message.clone(),
                other => other.to_string(),
            };
            Ok(format!("{what} refused [{}]: {detail}", e.token()))
        }
        Ok(v) => Err(SimError::Step(format!(
            "{what}: expected a refusal, finished with {v:?}"
        ))),
    }
}

fn short(bytes: &[u8]) -> String {
    hex::encode(&bytes[..6])
}

fn short_vm(vm: VmId) -> String {
    let hex = vm.to_hex();
    hex[..12].to_string()
}

/// Deploy the broker, enroll the owner, upload the demo image.
fn bring_up(w: &mut World, owner_name: &str) -> Result<(Owner, [u8; 32]), SimError> {
    step("deploy-rootvm", w.deploy.deploy_rootvm(HOST_A))?;
    w.note(format!("deploy: broker on {HOST_A} attested, certified, listed"));
    let mut owner = w.owner(owner_name);
    step("enroll", owner.enroll())?;
    w.note(format!("{owner_name}: enrolled with the deploy service"));
    let image_id = step("upload", owner.seal_and_upload(HOST_A, &demo_layers()))?;
    w.note(format!("{owner_name}: sealed and uploaded image {}", short(&image_id)));
    Ok((owner, image_id))
}

fn create_loaded_vm(
    w: &mut World,
    owner: &mut Owner,
    owner_name: &str,
    image_id: [u8; 32],
) -> Result<VmId, SimError> {
    let vm = step("create-vm", owner.create_vm(HOST_A, image_id))?;
    w.note(format!("{owner_name}: created and attested vm {}", short_vm(vm)));
    step("load-image", owner.load_image(vm, image_id))?;
    w.note(format!("{owner_name}: released image key to vm {}", short_vm(vm)));
    Ok(vm)
}

fn run_workload(
    w: &mut World,
    owner: &mut Owner,
    owner_name: &str,
    vm: VmId,
    entry: &str,
) -> Result<String, SimError> {
    step("exec", owner.exec(vm, entry))?;
    let out = step("wait", owner.wait(vm))?;
    let text = String::from_utf8_lossy(&out).into_owned();
    w.note(format!("{owner_name}: workload {entry} finished:\n{text}"));
    Ok(text)
}

fn full_lifecycle(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::Honest);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let vm = create_loaded_vm(w, &mut alice, "alice", image_id)?;

    let (phase, _) = step("status", alice.status(vm))?;
    w.note(format!("alice: vm reports phase {phase}"));

    run_workload(w, &mut alice, "alice", vm, MAIN_ENTRY)?;

    let (phase, _) = step("status", alice.status(vm))?;
    w.note(format!("alice: vm reports phase {phase}"));
    step("stop", alice.stop(vm))?;
    w.note("alice: vm stopped".to_string());
    Ok(())
}

fn secure_channel(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::Honest);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let server = create_loaded_vm(w, &mut alice, "alice", image_id)?;
    let client = create_loaded_vm(w, &mut alice, "alice", image_id)?;

    step("exec", alice.exec(server, PING_SERVER_ENTRY))?;
    step("exec", alice.exec(client, PING_CLIENT_ENTRY))?;

    let out = step("wait", alice.wait(client))?;
    w.note(format!(
        "alice: workload {PING_CLIENT_ENTRY} finished:\n{}",
        String::from_utf8_lossy(&out)
    ));
    let out = step("wait", alice.wait(server))?;
    w.note(format!(
        "alice: workload {PING_SERVER_ENTRY} finished:\n{}",
        String::from_utf8_lossy(&out)
    ));
    Ok(())
}

fn native_pair(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::Honest);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let server = create_loaded_vm(w, &mut alice, "alice", image_id)?;
    let client = create_loaded_vm(w, &mut alice, "alice", image_id)?;

    step("exec", alice.exec(server, TEST_SERVER_ENTRY))?;
    step("exec", alice.exec(client, TEST_CLIENT_ENTRY))?;

    let out = step("wait", alice.wait(client))?;
    w.note(format!(
        "alice: workload {TEST_CLIENT_ENTRY} finished:\n{}",
        String::from_utf8_lossy(&out)
    ));
    let out = step("wait", alice.wait(server))?;
    w.note(format!(
        "alice: workload {TEST_SERVER_ENTRY} finished:\n{}",
        String::from_utf8_lossy(&out)
    ));
    Ok(())
}

fn tamper_image(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::TamperImageBlock { block: 1 });
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let vm = step("create-vm", alice.create_vm(HOST_A, image_id))?;
    w.note(format!("alice: created and attested vm {}", short_vm(vm)));
    let line = expect_refusal("load-image", alice.load_image(vm, image_id))?;
    w.note(format!("alice: {line}"));
    Ok(())
}

fn boot_tamper(w: &mut World, conduct: HostConduct) -> Result<(), SimError> {
    w.add_host(conduct);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let line = expect_refusal("create-vm", alice.create_vm(HOST_A, image_id))?;
    w.note(format!("alice: {line}"));
    Ok(())
}

fn fake_tee(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::FakePlatform);
    let line = expect_refusal("deploy-rootvm", w.deploy.deploy_rootvm(HOST_A))?;
    w.note(format!("deploy: {line}"));
    Ok(())
}

fn replay_report(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::ReplayReport);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let vm = step("create-vm", alice.create_vm(HOST_A, image_id))?;
    w.note(format!("alice: created and attested vm {}", short_vm(vm)));
    let line = expect_refusal("create-vm", alice.create_vm(HOST_A, image_id))?;
    w.note(format!("alice: {line}"));
    Ok(())
}

fn replay_secret(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::ReplaySecret);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let line = expect_refusal("create-vm", alice.create_vm(HOST_A, image_id))?;
    w.note(format!("alice: {line}"));
    Ok(())
}

fn host_impersonation(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::ImpersonateBroker);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let line = expect_refusal("create-vm", alice.create_vm(HOST_A, image_id))?;
    w.note(format!("alice: {line}"));
    Ok(())
}

fn revoked_rootvm(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::Honest);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let vm = create_loaded_vm(w, &mut alice, "alice", image_id)?;
    let _ = vm;

    if !w.deploy.revoke_host_broker(HOST_A) {
        return Err(SimError::Step("revoke: broker was not on the list".into()));
    }
    w.note(format!("deploy: broker on {HOST_A} taken off the valid list"));

    let line = expect_refusal("create-vm", alice.create_vm(HOST_A, image_id))?;
    w.note(format!("alice: {line}"));
    Ok(())
}

fn wrong_owner_command(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::Honest);
    let (mut alice, image_id) = bring_up(w, "alice")?;
    let vm = create_loaded_vm(w, &mut alice, "alice", image_id)?;

    let mut bob = w.owner("bob");
    step("enroll", bob.enroll())?;
    w.note("bob: enrolled with the deploy service".to_string());

    let line = expect_refusal(
        "command",
        bob.command_other(HOST_A, vm, CommandBody::Status),
    )?;
    w.note(format!("bob: {line}"));

    let (phase, _) = step("status", alice.status(vm))?;
    w.note(format!("alice: vm still answers its owner, phase {phase}"));
    Ok(())
}

fn wrong_owner_dial(w: &mut World) -> Result<(), SimError> {
    w.add_host(HostConduct::Honest);
    step("deploy-rootvm", w.deploy.deploy_rootvm(HOST_A))?;
    w.note(format!("deploy: broker on {HOST_A} attested, certified, listed"));

    let mut alice = w.owner("alice");
    step("enroll", alice.enroll())?;
    w.note("alice: enrolled with the deploy service".to_string());
    let service = vec![(workload_layer("svc"), b"register alice-svc\n".to_vec())];
    let alice_image = step("upload", alice.seal_and_upload(HOST_A, &service))?;
    let vm_a = create_loaded_vm(w, &mut alice, "alice", alice_image)?;
    let out = run_workload(w, &mut alice, "alice", vm_a, "svc")?;
    if out != "registered alice-svc\n" {
        return Err(SimError::Step(format!("service registration produced {out:?}")));
    }

    let mut bob = w.owner("bob");
    step("enroll", bob.enroll())?;
    w.note("bob: enrolled with the deploy service".to_string());
    let probe = vec![(
        workload_layer("probe"),
        b"register bob-probe\ndial alice-svc\n".to_vec(),
    )];
    let bob_image = step("upload", bob.seal_and_upload(HOST_A, &probe))?;
    let vm_b = create_loaded_vm(w, &mut bob, "bob", bob_image)?;

    // Bob's guest restricts dials to peers owned by bob; alice's service
    // is rejected before any stream is opened.
    step("exec", bob.exec(vm_b, "probe"))?;
    let line = expect_refusal("wait", bob.wait(vm_b))?;
    w.note(format!("bob: {line}"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_runs() {
        for name in SCENARIOS {
            let outcome = run_scenario(name, 1).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!outcome.log.is_empty(), "{name} logged nothing");
        }
    }

    #[test]
    fn unknown_scenario_is_refused() {
        match run_scenario("no-such-story", 1) {
            Err(SimError::UnknownScenario(n)) => assert_eq!(n, "no-such-story"),
            other => panic!("expected unknown-scenario, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_reproduces_the_run() {
        for name in ["full-lifecycle", "secure-channel", "replay-report"] {
            let a = run_scenario(name, 42).unwrap();
            let b = run_scenario(name, 42).unwrap();
            assert_eq!(a, b, "{name} diverged between identical runs");
        }
    }

    #[test]
    fn different_seeds_produce_different_transcripts() {
        let a = run_scenario("full-lifecycle", 1).unwrap();
        let b = run_scenario("full-lifecycle", 2).unwrap();
        assert_ne!(a.transcript_hash, b.transcript_hash);
    }
}
