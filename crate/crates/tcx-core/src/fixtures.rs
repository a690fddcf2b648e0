//! Canned inputs shared by the harness, the CLI testbed and the tests:
//! the boot payloads for the two guest kinds, and a small demo container
//! image whose layers carry scripted workloads.
//!
//! Workload scripts are plain text, one verb per line:
//!
//! ```text
//! echo <text>                  append <text> to the output
//! read-block <idx>             append "block <idx> <hex of first 16 bytes>"
//! write-overlay <idx> <text>   write <text> into block <idx> of the overlay
//! register <name>              claim a service name
//! peers                        append "peers <comma-separated names>"
//! listen                       start accepting peer streams
//! accept                       append "accepted <peer name>"
//! dial <name>                  append "dialed <name>"
//! send <text>                  write <text> to the current stream
//! recv                         append "got <text read from the stream>"
//! close                        close the current stream
//! ```
//!
//! A script whose first line is `native <name>` instead runs the built-in
//! workload of that name; the built-ins exercise the in-guest library the
//! way external code would.

use crate::boot::{assemble, build_verity, FirmwareBlob};
use crate::crypto::sha256;
use crate::sclib::{ScContext, ScError};
use crate::wire::Writer;

/// Everything the host needs to start one guest of a given kind, plus the
/// launch digest a verifier should expect for it.
#[derive(Debug, Clone)]
pub struct BootFixture {
    pub blob: FirmwareBlob,
    /// The exact bytes the platform measures at launch.
    pub payload: Vec<u8>,
    pub kernel: Vec<u8>,
    pub params: Vec<u8>,
    pub fs_image: Vec<u8>,
    pub measurement: [u8; 32],
}

fn make_boot(firmware: &[u8], kernel: &[u8], params: &[u8], fs_image: Vec<u8>) -> BootFixture {
    let verity = build_verity(&fs_image).expect("fixture filesystem is never empty");
    let (blob, payload) = assemble(firmware, kernel, params, verity.root());
    let measurement = sha256(&payload);
    BootFixture {
        blob,
        payload,
        kernel: kernel.to_vec(),
        params: params.to_vec(),
        fs_image,
        measurement,
    }
}

/// Deterministic filler so fixture filesystems have stable content.
fn patterned(len: usize, salt: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_add(salt)).collect()
}

/// Boot inputs for the per-host broker VM.
pub fn rootvm_boot() -> BootFixture {
    make_boot(
        b"broker firmware build 1",
        b"broker kernel build 1",
        b"console=none root=/dev/vda quiet",
        patterned(2 * 4096, 0x11),
    )
}

/// Boot inputs for the confidential workload runtime.
pub fn scvm_boot() -> BootFixture {
    make_boot(
        b"guest runtime firmware build 1",
        b"guest runtime kernel build 1",
        b"console=none root=/dev/vda ro quiet",
        patterned(3 * 4096, 0x22),
    )
}

pub const MAIN_ENTRY: &str = "main";
pub const PING_CLIENT_ENTRY: &str = "ping-client";
pub const PING_SERVER_ENTRY: &str = "ping-server";
pub const TEST_CLIENT_ENTRY: &str = "test-client";
pub const TEST_SERVER_ENTRY: &str = "test-server";

/// Layer name that holds the script for a given entry point.
pub fn workload_layer(entry: &str) -> String {
    format!("workload/{entry}")
}

/// The demo application image: a manifest, five workload scripts, and a
/// three-block data layer. Blocks 6..9 are the data layer; `main` reads
/// block 6 and snapshots into block 7.
pub fn demo_layers() -> Vec<(String, Vec<u8>)> {
    vec![
        (
            "app.manifest".to_string(),
            b"demo-app 1.0\nentries: main, ping-client, ping-server, test-client, test-server\n"
                .to_vec(),
        ),
        (
            workload_layer(MAIN_ENTRY),
            b"echo service starting\n\
              read-block 6\n\
              write-overlay 7 journal entry one\n\
              read-block 7\n\
              echo service done\n"
                .to_vec(),
        ),
        (
            workload_layer(PING_CLIENT_ENTRY),
            b"register ping-client\n\
              dial ping-server\n\
              send ping over secure channel\n\
              recv\n\
              close\n"
                .to_vec(),
        ),
        (
            workload_layer(PING_SERVER_ENTRY),
            b"register ping-server\n\
              listen\n\
              accept\n\
              recv\n\
              send pong over secure channel\n\
              close\n"
                .to_vec(),
        ),
        (workload_layer(TEST_CLIENT_ENTRY), b"native test-client\n".to_vec()),
        (workload_layer(TEST_SERVER_ENTRY), b"native test-server\n".to_vec()),
        ("data".to_string(), patterned(3 * 4096, 0x00)),
    ]
}

/// Content address for a layer set: the hash of a canonical encoding of
/// every name and payload, in order. Two identical layer sets always get
/// the same image id.
pub fn layer_set_id(layers: &[(String, Vec<u8>)]) -> [u8; 32] {
    let mut w = Writer::new();
    for (name, data) in layers {
        w.str_field(name).field(data);
    }
    sha256(&w.finish())
}

pub type NativeWorkload = fn(&mut ScContext) -> Result<Vec<u8>, ScError>;

/// Built-in workloads runnable via a `native <name>` script line.
pub fn native_workload(name: &str) -> Option<NativeWorkload> {
    match name {
        "test-client" => Some(test_client),
        "test-server" => Some(test_server),
        _ => None,
    }
}

/// Dials TEST_SERVER, restricted to its own owner, and echoes what comes
/// back — the canonical client-side usage of the in-guest library.
fn test_client(ctx: &mut ScContext) -> Result<Vec<u8>, ScError> {
    let mut log = Vec::new();

    ctx.register("TEST_CLIENT")?;

    ctx.get_registered_vms()?;

    let owner = ctx.get_self_owner()?.clone();

    let valid_owners = [&owner];
    let mut conn = ctx.dial("TEST_SERVER", &valid_owners)?;

    conn.write(b"Hello from client")?;
    let mut buf = [0u8; 32];
    let n = conn.read(&mut buf)?;
    let buf = &buf[..n];
    log.extend_from_slice(b"Got from server: ");
    log.extend_from_slice(buf);
    log.push(b'\n');

    conn.close();
    Ok(log)
}

/// Accepts one stream, logs what the client sent, and answers — the
/// canonical server-side usage of the in-guest library.
fn test_server(ctx: &mut ScContext) -> Result<Vec<u8>, ScError> {
    let mut log = Vec::new();

    ctx.register("TEST_SERVER")?;
    ctx.get_registered_vms()?;

    let mut l = ctx.listen()?;

    let mut conn = l.accept()?;

    let mut buf = [0u8; 32];
    let n = conn.read(&mut buf)?;
    let buf = &buf[..n];
    log.extend_from_slice(b"Got from client: ");
    log.extend_from_slice(buf);
    log.push(b'\n');

    conn.write(b"Hello from server")?;

    conn.close();
    Ok(log)
}
