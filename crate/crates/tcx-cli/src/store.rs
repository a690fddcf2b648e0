//! On-disk state under the state directory: the owner's durable record
//! (`owner.tcxo`, wire-encoded) and the endpoint table the testbed
//! publishes (`endpoints.net`, one `name address` pair per line).

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use tcx_core::actors::owner::OwnerState;
use tcx_core::tee::VmId;
use tcx_core::wire::Wire;

use crate::Failure;

const OWNER_FILE: &str = "owner.tcxo";

pub fn owner_path(state_dir: &Path) -> PathBuf {
    state_dir.join(OWNER_FILE)
}

pub fn load_owner_state(state_dir: &Path) -> Result<OwnerState, Failure> {
    let path = owner_path(state_dir);
    let bytes = std::fs::read(&path).map_err(|_| {
        Failure::Usage(format!(
            "no owner identity at {}; run `tcx owner init --name <name>` first",
            path.display()
        ))
    })?;
    OwnerState::decode(&bytes)
        .map_err(|e| Failure::Usage(format!("owner state {} is damaged: {e}", path.display())))
}

pub fn save_owner_state(state_dir: &Path, state: &OwnerState) -> Result<(), Failure> {
    write_atomic(&owner_path(state_dir), &state.encode())
}

/// Writes through a temporary file in the same directory so a crash
/// never leaves a half-written record behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Failure::Usage(format!("cannot replace {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn write_endpoints(path: &Path, rows: &[(String, SocketAddr)]) -> Result<(), Failure> {
    let mut text = String::from("# written by `tcx testbed up`\n");
    for (name, addr) in rows {
        text.push_str(&format!("{name} {addr}\n"));
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_endpoints(path: &Path) -> Result<HashMap<String, SocketAddr>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        Failure::Transport(format!(
            "no endpoint table at {}; is `tcx testbed up` running?",
            path.display()
        ))
    })?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, addr) = line.split_once(' ').ok_or_else(|| {
            Failure::Usage(format!("{}:{}: expected `name address`", path.display(), n + 1))
        })?;
        let addr: SocketAddr = addr.trim().parse().map_err(|e| {
            Failure::Usage(format!("{}:{}: bad address: {e}", path.display(), n + 1))
        })?;
        map.insert(name.to_string(), addr);
    }
    if map.is_empty() {
        return Err(Failure::Usage(format!(
            "endpoint table {} lists no endpoints",
            path.display()
        )));
    }
    Ok(map)
}

pub fn parse_image_id(s: &str) -> Result<[u8; 32], Failure> {
    let bytes = hex::decode(s)
        .map_err(|_| Failure::Usage(format!("image id {s:?} is not hex")))?;
    bytes
        .try_into()
        .map_err(|_| Failure::Usage(format!("image id {s:?} must be 64 hex digits")))
}

pub fn parse_vm_id(s: &str) -> Result<VmId, Failure> {
    VmId::from_hex(s)
        .ok_or_else(|| Failure::Usage(format!("vm id {s:?} must be 32 hex digits")))
}
