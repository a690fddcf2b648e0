//! The bodies of the owner-facing subcommands. Informational text goes
//! to stderr; stdout carries only machine-usable results (ids, digests,
//! workload output), so runs compose in scripts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tcx_core::actors::owner::{Owner, OwnerState};
use tcx_core::boot::{assemble, build_verity};
use tcx_core::crypto::{sha256, Entropy, SigKeypair};
use tcx_core::fixtures::{layer_set_id, rootvm_boot, scvm_boot};
use tcx_core::image::{seal_image, verify_image, ImageKey, SealedImage};
use tcx_core::net::TcpNet;
use tcx_core::sim::{run_scenario, SimError, SCENARIOS};
use tcx_core::wire::Wire;

use crate::config::Settings;
use crate::store;
use crate::Failure;

/// Restores the owner from disk and points it at the running testbed.
fn open_session(settings: &Settings) -> Result<Owner, Failure> {
    let state = store::load_owner_state(&settings.state_dir)?;
    let map = store::read_endpoints(&settings.endpoints)?;
    let net = Arc::new(TcpNet::new(map));
    Ok(Owner::restore(state, net, Entropy::system()))
}

/// Persists what the session learned and hangs up.
fn close_session(settings: &Settings, mut owner: Owner) -> Result<(), Failure> {
    let snapshot = owner.snapshot();
    owner.disconnect();
    store::save_owner_state(&settings.state_dir, &snapshot)
}

pub fn owner_init(settings: &Settings, name: &str, force: bool) -> Result<(), Failure> {
    let path = store::owner_path(&settings.state_dir);
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "owner identity already exists at {} (--force replaces it)",
            path.display()
        )));
    }
    let key = SigKeypair::generate(&mut Entropy::system());
    let state = OwnerState {
        name: name.to_string(),
        deploy_name: settings.deploy.clone(),
        secret_key: key.secret_bytes(),
        cmd_seq: 0,
        cert: None,
        trust: None,
        image_keys: Vec::new(),
        vms: Vec::new(),
    };
    store::save_owner_state(&settings.state_dir, &state)?;
    eprintln!("owner {name:?} initialised in {}", settings.state_dir.display());
    println!("{}", hex::encode(key.public()));
    Ok(())
}

pub fn owner_enroll(settings: &Settings) -> Result<(), Failure> {
    let mut owner = open_session(settings)?;
    owner.fetch_trust()?;
    let cert = owner.enroll()?.clone();
    eprintln!("enrolled {:?} with {:?}", owner.name(), cert.subject_name);
    close_session(settings, owner)?;
    println!("{}", hex::encode(cert.fingerprint()));
    Ok(())
}

pub fn owner_show(settings: &Settings) -> Result<(), Failure> {
    let state = store::load_owner_state(&settings.state_dir)?;
    let public = SigKeypair::from_secret_bytes(state.secret_key).public();
    println!("name {}", state.name);
    println!("public-key {}", hex::encode(public));
    match &state.cert {
        Some(cert) => println!("certificate {}", hex::encode(cert.fingerprint())),
        None => println!("certificate none (run `tcx owner enroll`)"),
    }
    if let Some(trust) = &state.trust {
        println!("trust-root {}", hex::encode(trust.root_cert.fingerprint()));
    }
    println!("image-keys {}", state.image_keys.len());
    for (vm, host, _) in &state.vms {
        println!("vm {} host {}", vm.to_hex(), host);
    }
    Ok(())
}

/// `NAME=PATH`, or a bare path whose file name becomes the layer name.
fn parse_layer(spec: &str) -> Result<(String, Vec<u8>), Failure> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let n = p
                .file_name()
                .ok_or_else(|| Failure::Usage(format!("layer path {spec:?} has no file name")))?
                .to_string_lossy()
                .into_owned();
            (n, p)
        }
    };
    if name.is_empty() {
        return Err(Failure::Usage(format!("layer spec {spec:?} has an empty name")));
    }
    Ok((name, store::read_file(&path)?))
}

pub fn image_seal(
    settings: &Settings,
    specs: &[String],
    out: Option<&Path>,
    key_out: Option<&Path>,
) -> Result<(), Failure> {
    let mut state = store::load_owner_state(&settings.state_dir)?;
    let layers = specs.iter().map(|s| parse_layer(s)).collect::<Result<Vec<_>, _>>()?;
    let image_id = layer_set_id(&layers);

    // Same layers, same key: re-sealing is reproducible and the host's
    // store stays content-addressed.
    let key = match state.image_keys.iter().find(|k| k.image_id == image_id) {
        Some(k) => k.clone(),
        None => {
            let k = ImageKey::generate(&mut Entropy::system(), image_id);
            state.image_keys.push(k.clone());
            store::save_owner_state(&settings.state_dir, &state)?;
            k
        }
    };

    let sealed = seal_image(&layers, &key)?;
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(format!("{}.tcximg", &hex::encode(image_id)[..16])),
    };
    store::write_atomic(&out_path, &sealed.to_bytes())?;
    if let Some(kp) = key_out {
        store::write_atomic(kp, &key.encode())?;
    }
    eprintln!(
        "sealed {} layers into {} blocks at {}",
        layers.len(),
        sealed.block_count(),
        out_path.display()
    );
    println!("{}", hex::encode(image_id));
    Ok(())
}

pub fn image_inspect(file: &Path) -> Result<(), Failure> {
    let image = SealedImage::from_bytes(&store::read_file(file)?)?;
    println!("image {}", hex::encode(image.header.image_id));
    println!("block-size {}", image.header.block_size);
    println!("blocks {}", image.header.block_count);
    for e in &image.header.layer_table {
        println!(
            "layer {} blocks {}..{} bytes {}",
            e.layer_id,
            e.first_block,
            e.first_block + e.block_count,
            e.byte_len
        );
    }
    eprintln!("header read without the key; `tcx image verify` checks it");
    Ok(())
}

pub fn image_verify(
    settings: &Settings,
    file: &Path,
    key_file: Option<&Path>,
) -> Result<(), Failure> {
    let image = SealedImage::from_bytes(&store::read_file(file)?)?;
    let key = match key_file {
        Some(p) => ImageKey::decode(&store::read_file(p)?)
            .map_err(|e| Failure::Usage(format!("key file {}: {e}", p.display())))?,
        None => {
            let state = store::load_owner_state(&settings.state_dir)?;
            state
                .image_keys
                .iter()
                .find(|k| k.image_id == image.header.image_id)
                .cloned()
                .ok_or_else(|| {
                    Failure::Usage(format!(
                        "no key held for image {}; pass --key-file",
                        hex::encode(image.header.image_id)
                    ))
                })?
        }
    };
    verify_image(&image, &key)?;
    println!(
        "ok {} ({} blocks, {} layers)",
        hex::encode(image.header.image_id),
        image.header.block_count,
        image.header.layer_table.len()
    );
    Ok(())
}

pub fn image_upload(settings: &Settings, file: &Path) -> Result<(), Failure> {
    let image = SealedImage::from_bytes(&store::read_file(file)?)?;
    let mut owner = open_session(settings)?;
    let image_id = owner.upload_image(&settings.host, &image)?;
    close_session(settings, owner)?;
    eprintln!("uploaded to {} ({} blocks)", settings.host, image.header.block_count);
    println!("{}", hex::encode(image_id));
    Ok(())
}

pub fn boot_measure(
    preset: Option<&str>,
    firmware: Option<&Path>,
    kernel: Option<&Path>,
    params: Option<&Path>,
    fs: Option<&Path>,
) -> Result<(), Failure> {
    let (blob, payload) = match preset {
        Some("rootvm") => {
            let f = rootvm_boot();
            (f.blob, f.payload)
        }
        Some("scvm") => {
            let f = scvm_boot();
            (f.blob, f.payload)
        }
        Some(other) => {
            return Err(Failure::Usage(format!(
                "unknown preset {other:?} (expected rootvm or scvm)"
            )))
        }
        None => {
            let (Some(fw), Some(k), Some(p), Some(f)) = (firmware, kernel, params, fs) else {
                return Err(Failure::Usage(
                    "pass --preset, or all of --firmware --kernel --params --fs".into(),
                ));
            };
            let fs_bytes = store::read_file(f)?;
            let verity = build_verity(&fs_bytes)
                .map_err(|e| Failure::Verify(format!("filesystem image: {e}")))?;
            assemble(
                &store::read_file(fw)?,
                &store::read_file(k)?,
                &store::read_file(p)?,
                verity.root(),
            )
        }
    };
    eprintln!("kernel-hash {}", hex::encode(blob.embedded_kernel_hash));
    eprintln!("param-hash {}", hex::encode(blob.embedded_param_hash));
    eprintln!("verity-root {}", hex::encode(blob.embedded_verity_root));
    println!("{}", hex::encode(sha256(&payload)));
    Ok(())
}

pub fn vm_create(settings: &Settings, image: &str) -> Result<(), Failure> {
    let image_id = store::parse_image_id(image)?;
    let mut owner = open_session(settings)?;
    let vm_id = owner.create_vm(&settings.host, image_id)?;
    close_session(settings, owner)?;
    eprintln!("vm attested and recorded (host {})", settings.host);
    println!("{}", vm_id.to_hex());
    Ok(())
}

pub fn vm_load_key(settings: &Settings, vm: &str, image: &str) -> Result<(), Failure> {
    let vm_id = store::parse_vm_id(vm)?;
    let image_id = store::parse_image_id(image)?;
    let mut owner = open_session(settings)?;
    owner.load_image(vm_id, image_id)?;
    close_session(settings, owner)?;
    eprintln!("image staged and key released to vm {}", vm_id.to_hex());
    Ok(())
}

pub fn vm_exec(settings: &Settings, vm: &str, entry: &str, wait: bool) -> Result<(), Failure> {
    let vm_id = store::parse_vm_id(vm)?;
    let mut owner = open_session(settings)?;
    owner.exec(vm_id, entry)?;
    eprintln!("workload {entry:?} started in vm {}", vm_id.to_hex());
    if wait {
        let output = owner.wait(vm_id)?;
        let mut stdout = std::io::stdout().lock();
        stdout
            .write_all(&output)
            .and_then(|_| stdout.flush())
            .map_err(|e| Failure::Usage(format!("writing output: {e}")))?;
    }
    close_session(settings, owner)
}

pub fn vm_wait(settings: &Settings, vm: &str) -> Result<(), Failure> {
    let vm_id = store::parse_vm_id(vm)?;
    let mut owner = open_session(settings)?;
    let output = owner.wait(vm_id)?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(&output)
        .and_then(|_| stdout.flush())
        .map_err(|e| Failure::Usage(format!("writing output: {e}")))?;
    close_session(settings, owner)
}

pub fn vm_status(settings: &Settings, vm: &str) -> Result<(), Failure> {
    let vm_id = store::parse_vm_id(vm)?;
    let mut owner = open_session(settings)?;
    let (phase, names) = owner.status(vm_id)?;
    close_session(settings, owner)?;
    println!("phase {phase}");
    for name in names {
        println!("service {name}");
    }
    Ok(())
}

pub fn vm_stop(settings: &Settings, vm: &str) -> Result<(), Failure> {
    let vm_id = store::parse_vm_id(vm)?;
    let mut owner = open_session(settings)?;
    owner.stop(vm_id)?;
    close_session(settings, owner)?;
    eprintln!("vm {} stopped", vm_id.to_hex());
    Ok(())
}

pub fn sim_list() -> Result<(), Failure> {
    for name in SCENARIOS {
        println!("{name}");
    }
    Ok(())
}

pub fn sim_run(scenario: &str, seed: u64, runs: u64) -> Result<(), Failure> {
    for s in seed..seed.saturating_add(runs) {
        let outcome = run_scenario(scenario, s).map_err(|e| match e {
            SimError::UnknownScenario(n) => {
                Failure::Usage(format!("unknown scenario {n:?}; `tcx sim list` shows them"))
            }
            SimError::Step(m) => Failure::Verify(m),
        })?;
        for line in &outcome.log {
            println!("{line}");
        }
        println!("transcript {}", hex::encode(outcome.transcript_hash));
    }
    Ok(())
}

pub fn trust_show(settings: &Settings) -> Result<(), Failure> {
    let state = store::load_owner_state(&settings.state_dir)?;
    let trust = state.trust.ok_or_else(|| {
        Failure::Usage("no trust bundle stored; run `tcx owner enroll` first".into())
    })?;
    println!(
        "root {} {}",
        trust.root_cert.subject_name,
        hex::encode(trust.root_cert.fingerprint())
    );
    println!("vendor {}", hex::encode(trust.vendor_public));
    println!("rootvm-measurement {}", hex::encode(trust.rootvm_measurement));
    println!("scvm-measurement {}", hex::encode(trust.scvm_measurement));
    Ok(())
}
