//! Command-line front end for the simulated confidential-container
//! control plane. Offline subcommands (`image seal`, `image verify`,
//! `boot measure`, `sim run`) work purely on local files; online ones
//! talk to a fabric started with `tcx testbed up` over loopback TCP.
//!
//! Exit codes: 0 success, 2 a security verification failed, 3 the peer
//! was unreachable or hung up, 4 the invocation was wrong.

mod config;
mod ops;
mod store;
mod testbed;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use tcx_core::actors::ActorError;
use tcx_core::channel::ChannelError;
use tcx_core::image::ImageError;
use tcx_core::net::NetError;
use tcx_core::proto::ErrorCode;

pub const EXIT_VERIFY: u8 = 2;
pub const EXIT_TRANSPORT: u8 = 3;
pub const EXIT_USAGE: u8 = 4;

/// Failure classes, keyed to the exit codes the shell sees.
#[derive(Debug)]
pub enum Failure {
    /// The invocation itself was wrong (exit 4).
    Usage(String),
    /// A security check said no (exit 2).
    Verify(String),
    /// Could not reach the peer or it went away (exit 3).
    Transport(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Verify(_) => EXIT_VERIFY,
            Failure::Transport(_) => EXIT_TRANSPORT,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Verify(m) | Failure::Transport(m) => m,
        }
    }
}

impl From<ActorError> for Failure {
    fn from(e: ActorError) -> Failure {
        match &e {
            // The wire went away or never answered: not a protocol verdict.
            ActorError::Net(_)
            | ActorError::Channel(ChannelError::Net(_))
            | ActorError::Channel(ChannelError::Closed)
            | ActorError::Channel(ChannelError::Broken) => Failure::Transport(e.to_string()),
            // Naming a VM or image we never created is the caller's slip.
            ActorError::Refused { code: ErrorCode::NoSuchVm | ErrorCode::NoSuchImage, .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Verify(e.to_string()),
        }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Failure {
        Failure::Transport(e.to_string())
    }
}

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Failure {
        Failure::Verify(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "tcx",
    version,
    about = "Confidential container control plane, simulated at desk scale"
)]
pub struct Cli {
    /// Directory for identities, keys and testbed endpoints.
    #[arg(long, global = true, env = "TCX_STATE_DIR", value_name = "DIR")]
    state_dir: Option<PathBuf>,

    /// Config file with defaults for these options (default: ./tcx.toml).
    #[arg(long, global = true, env = "TCX_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,

    /// Endpoint table written by `tcx testbed up`.
    #[arg(long, global = true, env = "TCX_ENDPOINTS", value_name = "FILE")]
    endpoints: Option<PathBuf>,

    /// Host to address for image and VM operations.
    #[arg(long, global = true, env = "TCX_HOST", value_name = "NAME")]
    host: Option<String>,

    /// Name the deploy service goes by on the carrier.
    #[arg(long, global = true, env = "TCX_DEPLOY", value_name = "NAME")]
    deploy: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Owner identity and enrollment.
    Owner {
        #[command(subcommand)]
        cmd: OwnerCmd,
    },
    /// Seal, inspect, verify and upload container images.
    Image {
        #[command(subcommand)]
        cmd: ImageCmd,
    },
    /// Launch-measurement helpers.
    Boot {
        #[command(subcommand)]
        cmd: BootCmd,
    },
    /// Create and drive confidential VMs.
    Vm {
        #[command(subcommand)]
        cmd: VmCmd,
    },
    /// Run the local deploy-plus-hosts fabric.
    Testbed {
        #[command(subcommand)]
        cmd: TestbedCmd,
    },
    /// Scripted lifecycle and adversarial scenarios, run in-process.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
    /// Show the trust material fetched at enrollment.
    Trust {
        #[command(subcommand)]
        cmd: TrustCmd,
    },
}

#[derive(Subcommand)]
enum OwnerCmd {
    /// Create a fresh owner identity in the state directory.
    Init {
        /// Name to enroll under.
        #[arg(long)]
        name: String,
        /// Replace an existing identity.
        #[arg(long)]
        force: bool,
    },
    /// Fetch the operator's trust bundle and enroll this owner's key.
    Enroll,
    /// Print the stored identity, enrollment and inventory.
    Show,
}

#[derive(Subcommand)]
enum ImageCmd {
    /// Encrypt and integrity-protect a set of layer files.
    Seal {
        /// Layer as NAME=PATH (or bare PATH; the file name becomes the
        /// layer name). Order matters: it fixes the image id.
        #[arg(long = "layer", value_name = "NAME=PATH", required = true)]
        layers: Vec<String>,
        /// Where to write the sealed image (default: <image-id>.tcximg).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Also write the image key to this file.
        #[arg(long, value_name = "FILE")]
        key_out: Option<PathBuf>,
    },
    /// Print a sealed image's header without needing the key.
    Inspect { file: PathBuf },
    /// Check every block and the layer table against the key.
    Verify {
        file: PathBuf,
        /// Key file from `image seal --key-out` (default: the key held
        /// in owner state for this image id).
        #[arg(long, value_name = "FILE")]
        key_file: Option<PathBuf>,
    },
    /// Push a sealed image to the selected host's store.
    Upload { file: PathBuf },
}

#[derive(Subcommand)]
enum BootCmd {
    /// Compute the launch measurement for a guest boot payload.
    Measure {
        /// Use a built-in payload: "rootvm" or "scvm".
        #[arg(long, value_name = "KIND", conflicts_with_all = ["firmware", "kernel", "params", "fs"])]
        preset: Option<String>,
        #[arg(long, value_name = "FILE", requires_all = ["kernel", "params", "fs"])]
        firmware: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        kernel: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        params: Option<PathBuf>,
        /// Root filesystem image (hashed into the verity tree).
        #[arg(long, value_name = "FILE")]
        fs: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VmCmd {
    /// Create and attest a confidential VM for a stored image.
    Create {
        /// Image id (64 hex digits) printed by `image seal`.
        #[arg(long, value_name = "IMAGE_ID")]
        image: String,
    },
    /// Stage the image in the VM and release its key over the pinned
    /// channel.
    LoadKey {
        #[arg(long, value_name = "VM_ID")]
        vm: String,
        #[arg(long, value_name = "IMAGE_ID")]
        image: String,
    },
    /// Start a workload entry point inside the VM.
    Exec {
        #[arg(long, value_name = "VM_ID")]
        vm: String,
        /// Entry name from the image manifest (e.g. "main").
        #[arg(long)]
        entry: String,
        /// Block until it finishes and print its output.
        #[arg(long)]
        wait: bool,
    },
    /// Block until the running workload finishes and print its output.
    Wait {
        #[arg(long, value_name = "VM_ID")]
        vm: String,
    },
    /// Print the VM phase and its registered service names.
    Status {
        #[arg(long, value_name = "VM_ID")]
        vm: String,
    },
    /// Tear the VM down.
    Stop {
        #[arg(long, value_name = "VM_ID")]
        vm: String,
    },
}

#[derive(Subcommand)]
enum TestbedCmd {
    /// Start the deploy service and hosts on loopback TCP and serve
    /// until killed. Writes the endpoint table, then prints it.
    Up {
        /// How many hosts to run (named host-a, host-b, ...).
        #[arg(long, default_value_t = 1)]
        hosts: u32,
        /// Seed for the fabric's key material; same seed, same identities.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the endpoint table of the running testbed.
    Endpoints,
}

#[derive(Subcommand)]
enum SimCmd {
    /// List the scenario names.
    List,
    /// Run a scenario and print its log and transcript hash.
    Run {
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Run this many times, at consecutive seeds.
        #[arg(long, default_value_t = 1)]
        runs: u64,
    },
}

#[derive(Subcommand)]
enum TrustCmd {
    /// Print the trust bundle stored for this owner.
    Show,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let settings = config::resolve(&cli)?;
    match cli.cmd {
        Cmd::Owner { cmd } => match cmd {
            OwnerCmd::Init { name, force } => ops::owner_init(&settings, &name, force),
            OwnerCmd::Enroll => ops::owner_enroll(&settings),
            OwnerCmd::Show => ops::owner_show(&settings),
        },
        Cmd::Image { cmd } => match cmd {
            ImageCmd::Seal { layers, out, key_out } => {
                ops::image_seal(&settings, &layers, out.as_deref(), key_out.as_deref())
            }
            ImageCmd::Inspect { file } => ops::image_inspect(&file),
            ImageCmd::Verify { file, key_file } => {
                ops::image_verify(&settings, &file, key_file.as_deref())
            }
            ImageCmd::Upload { file } => ops::image_upload(&settings, &file),
        },
        Cmd::Boot { cmd } => match cmd {
            BootCmd::Measure { preset, firmware, kernel, params, fs } => ops::boot_measure(
                preset.as_deref(),
                firmware.as_deref(),
                kernel.as_deref(),
                params.as_deref(),
                fs.as_deref(),
            ),
        },
        Cmd::Vm { cmd } => match cmd {
            VmCmd::Create { image } => ops::vm_create(&settings, &image),
            VmCmd::LoadKey { vm, image } => ops::vm_load_key(&settings, &vm, &image),
            VmCmd::Exec { vm, entry, wait } => ops::vm_exec(&settings, &vm, &entry, wait),
            VmCmd::Wait { vm } => ops::vm_wait(&settings, &vm),
            VmCmd::Status { vm } => ops::vm_status(&settings, &vm),
            VmCmd::Stop { vm } => ops::vm_stop(&settings, &vm),
        },
        Cmd::Testbed { cmd } => match cmd {
            TestbedCmd::Up { hosts, seed } => testbed::up(&settings, hosts, seed),
            TestbedCmd::Endpoints => testbed::endpoints(&settings),
        },
        Cmd::Sim { cmd } => match cmd {
            SimCmd::List => ops::sim_list(),
            SimCmd::Run { scenario, seed, runs } => ops::sim_run(&scenario, seed, runs),
        },
        Cmd::Trust { cmd } => match cmd {
            TrustCmd::Show => ops::trust_show(&settings),
        },
    }
}

fn main() -> ExitCode {
    // Die quietly when the read end of a pipe goes away (`tcx ... | head`),
    // like any other line-printing tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            // clap renders help to stdout and errors to stderr itself.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tcx: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
