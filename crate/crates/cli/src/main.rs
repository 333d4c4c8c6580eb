// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use teeinfer_cli::live::{self, clients, LiveConfig};
use teeinfer_cli::{experiment, report};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "teeinfer", version, about = "Confidential serverless inference: simulator and live services")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Sim,
    Live,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Keyservice,
    Worker,
    Fnpacker,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every policy/deployment variant of an experiment config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sim")]
        mode: Mode,
    },
    /// Compare simulation results: prints a table and writes a CSV.
    Report {
        /// Result directories or summary.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the workload of a config as a replayable trace CSV.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a live service until interrupted.
    Serve {
        #[arg(value_enum)]
        role: Role,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the bind address from the config.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Print the key service and worker measurements for a live config.
    Measure {
        #[arg(long)]
        config: PathBuf,
    },
    /// Model-owner commands.
    Owner {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "owner.wallet.json")]
        wallet: PathBuf,
        #[command(subcommand)]
        cmd: OwnerCmd,
    },
    /// User commands.
    User {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "user.wallet.json")]
        wallet: PathBuf,
        #[command(subcommand)]
        cmd: UserCmd,
    },
}

#[derive(Subcommand)]
enum OwnerCmd {
    Register,
    /// Encrypt a JSON model into the model directory and deposit its key.
    EncryptModel {
        #[arg(long)]
        model: PathBuf,
    },
    Grant {
        #[arg(long)]
        model: String,
        /// Enclave measurement, hex.
        #[arg(long)]
        enclave: String,
        /// User id, hex.
        #[arg(long)]
        user: String,
    },
}

#[derive(Subcommand)]
enum UserCmd {
    Register,
    Enroll {
        #[arg(long)]
        model: String,
        #[arg(long)]
        enclave: String,
    },
    Infer {
        #[arg(long)]
        model: String,
        #[arg(long)]
        enclave: String,
        /// Comma-separated input vector.
        #[arg(long, allow_hyphen_values = true)]
        input: String,
        /// Router or worker URL; defaults to the config's gateway.
        #[arg(long)]
        gateway: Option<String>,
    },
}

fn serve(role: Role, config: PathBuf, bind: Option<String>) -> Result<()> {
    let mut cfg = LiveConfig::load(&config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = bind.unwrap_or_else(|| match role {
            Role::Keyservice => cfg.keyservice.bind.clone(),
            Role::Worker => cfg.worker.bind.clone(),
            Role::Fnpacker => cfg.fnpacker.bind.clone(),
        });
        let (listener, _) = live::bind(&addr).await?;
        match role {
            Role::Keyservice => {
                cfg.keyservice.bind = addr;
                live::keyservice::run(&cfg, listener, live::shutdown_signal()).await
            }
            Role::Worker => live::worker::run_service(&cfg, listener, live::shutdown_signal()).await,
            Role::Fnpacker => live::fnpacker::run_service(&cfg, listener, live::shutdown_signal()).await,
        }
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, seed, out, mode } => {
            if mode == Mode::Live {
                bail!("simulate runs the simulator only; start live services with `teeinfer serve`");
            }
            let results = experiment::simulate(&config, seed, Some(&out))?;
            for r in &results {
                let l = &r.summary.overall.latency;
                println!(
                    "{:<24} requests {:>6}  mean {:>10.3} ms  p95 {:>10.3} ms  gb_s {:.3}",
                    r.name, r.summary.requests, l.mean_ms, l.p95_ms, r.summary.gb_s
                );
            }
            println!("results written to {}", out.display());
        }
        Cmd::Report { inputs, csv } => print!("{}", report::report(&inputs, csv.as_deref())?),
        Cmd::GenTrace { config, seed, out } => {
            let n = experiment::gen_trace(&config, seed, &out)?;
            println!("{n} requests written to {}", out.display());
        }
        Cmd::Serve { role, config, bind } => serve(role, config, bind)?,
        Cmd::Measure { config } => {
            let cfg = LiveConfig::load(&config)?;
            println!("keyservice {}", cfg.expected_keyservice()?.to_hex());
            println!("worker     {}", cfg.worker_measurement()?.to_hex());
        }
        Cmd::Owner { config, wallet, cmd } => {
            let cfg = LiveConfig::load(&config)?;
            match cmd {
                OwnerCmd::Register => println!("{}", clients::owner_register(&cfg, &wallet)?.to_hex()),
                OwnerCmd::EncryptModel { model } => {
                    let (id, path) = clients::owner_encrypt_model(&cfg, &wallet, &model)?;
                    println!("{id} -> {}", path.display());
                }
                OwnerCmd::Grant { model, enclave, user } => {
                    clients::owner_grant(&cfg, &wallet, &model, &enclave, &user)?;
                    println!("granted");
                }
            }
        }
        Cmd::User { config, wallet, cmd } => {
            let cfg = LiveConfig::load(&config)?;
            match cmd {
                UserCmd::Register => println!("{}", clients::user_register(&cfg, &wallet)?.to_hex()),
                UserCmd::Enroll { model, enclave } => {
                    clients::user_enroll(&cfg, &wallet, &model, &enclave)?;
                    println!("enrolled");
                }
                UserCmd::Infer { model, enclave, input, gateway } => {
                    let x = clients::parse_input(&input)?;
                    let gw = gateway.unwrap_or_else(|| cfg.client.gateway.clone());
                    let (out, path) = clients::user_infer(&cfg, &wallet, &gw, &model, &enclave, &x)?;
                    let scores: Vec<String> = out.scores.iter().map(|s| format!("{s:.6}")).collect();
                    println!("argmax {}  path {}  scores [{}]", out.argmax, path, scores.join(", "));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
