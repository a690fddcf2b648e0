//! Brings up a live fabric on loopback TCP: the deploy service plus one
//! or more hosts, each with its broker VM already deployed. Listeners
//! are bound to OS-assigned ports before anything is published, so the
//! endpoint table is valid the moment it appears — parallel testbeds
//! never fight over ports.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use tcx_core::actors::deploy::DeployService;
use tcx_core::actors::host::{HostConduct, HostService};
use tcx_core::actors::SIM_TIME;
use tcx_core::crypto::{sha256, Entropy};
use tcx_core::net::TcpNet;

use crate::config::Settings;
use crate::store;
use crate::Failure;

/// Key material for one actor, pinned by its name and the fabric seed.
fn actor_seed(label: &str, seed: u64) -> [u8; 32] {
    let mut bytes = label.as_bytes().to_vec();
    bytes.extend_from_slice(&seed.to_le_bytes());
    sha256(&bytes)
}

fn host_name(index: u32) -> String {
    match (b'a' + (index % 26) as u8) as char {
        c if index < 26 => format!("host-{c}"),
        _ => format!("host-{}", index + 1),
    }
}

pub fn up(settings: &Settings, hosts: u32, seed: u64) -> Result<(), Failure> {
    if hosts == 0 {
        return Err(Failure::Usage("--hosts must be at least 1".into()));
    }
    let net = Arc::new(TcpNet::new(HashMap::new()));
    let mut rows = Vec::new();

    let deploy_addr = net.bind_ephemeral(&settings.deploy)?;
    rows.push((settings.deploy.clone(), deploy_addr));
    let deploy = DeployService::new(
        &settings.deploy,
        net.clone(),
        actor_seed("operator", seed),
        SIM_TIME,
    );
    deploy.spawn_serve()?;

    for index in 0..hosts {
        let name = host_name(index);
        let addr = net.bind_ephemeral(&name)?;
        let (cert, key) = deploy.issue_host_identity(&name);
        let host = HostService::new(
            &name,
            cert,
            key,
            deploy.root_cert().clone(),
            deploy.vendor(),
            HostConduct::Honest,
            SIM_TIME,
            Entropy::from_seed(actor_seed(&name, seed)),
        );
        host.spawn_serve(net.clone())?;
        deploy.deploy_rootvm(&name)?;
        rows.push((name, addr));
    }

    store::write_endpoints(&settings.endpoints, &rows)?;
    for (name, addr) in &rows {
        println!("{name} {addr}");
    }
    eprintln!(
        "testbed ready: {} host(s), brokers deployed; endpoint table at {}",
        hosts,
        settings.endpoints.display()
    );
    eprintln!("serving until killed");
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

pub fn endpoints(settings: &Settings) -> Result<(), Failure> {
    let map = store::read_endpoints(&settings.endpoints)?;
    let mut rows: Vec<_> = map.into_iter().collect();
    rows.sort();
    for (name, addr) in rows {
        println!("{name} {addr}");
    }
    Ok(())
}
