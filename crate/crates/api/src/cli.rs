// SPDX-License-Identifier: Apache-2.0

//! `qslice` command line. Slice, key and topology commands talk to a running
//! service; `topo load`, `pce whatif` and `timing run` work on local files.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qslice_core::orchestrator::timing::{timing_report, write_csv, TimingTable};
use qslice_core::pce::{compute_path, ConnectionRequest, Policy, Role};
use qslice_core::topology::{load_topology_file, SecurityMethod};
use qslice_core::{scenarios, Orchestrator, SimConfig, Topology};
use serde_json::Value;

use crate::config::{ServiceConfig, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "qslice", version, about = "Security-aware network slicing testbed")]
pub struct Cli {
    /// Base URL of a running service.
    #[arg(long, env = "QSLICE_SERVER", default_value = "http://127.0.0.1:8080", global = true)]
    pub server: String,
    /// Bearer token for the service.
    #[arg(long, env = "QSLICE_TOKEN", global = true)]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        /// Service config file; defaults to $QSLICE_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    #[command(subcommand)]
    Topo(TopoCommand),
    #[command(subcommand)]
    Slice(SliceCommand),
    #[command(subcommand)]
    Pce(PceCommand),
    #[command(subcommand)]
    Timing(TimingCommand),
    #[command(subcommand)]
    Kms(KmsCommand),
}

#[derive(Debug, Subcommand)]
pub enum TopoCommand {
    /// Validate a topology file and print a summary.
    Load { file: PathBuf },
    /// Print the service's live topology.
    Show,
}

#[derive(Debug, Subcommand)]
pub enum SliceCommand {
    /// Submit a descriptor file; prints the validated record.
    Submit {
        file: PathBuf,
        /// Provision right after validation and wait for the result.
        #[arg(long)]
        provision: bool,
    },
    /// Provision a validated slice and wait for the result.
    Provision { id: String },
    Deprovision { id: String },
    /// One slice, or all slices without an id.
    Status { id: Option<String> },
    Audit { id: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Exact,
    Upgrade,
}

#[derive(Debug, Args)]
pub struct WhatIfArgs {
    #[arg(long)]
    pub src: String,
    #[arg(long)]
    pub dst: String,
    /// none, dh_aes, qra_aes or qkd_aes.
    #[arg(long, value_parser = parse_security)]
    pub security: SecurityMethod,
    #[arg(long, default_value_t = 1.0)]
    pub bandwidth: f64,
    #[arg(long)]
    pub max_latency_us: Option<f64>,
    #[arg(long, value_enum, default_value = "upgrade")]
    pub policy: PolicyArg,
    /// Topology file; the shipped testbed when absent.
    #[arg(long)]
    pub topology: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum PceCommand {
    /// Compute a path without reserving anything.
    Whatif(WhatIfArgs),
}

#[derive(Debug, Args)]
pub struct TimingArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub use_case: u8,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Wall seconds per simulated second; the config value when absent.
    #[arg(long)]
    pub time_scale: Option<f64>,
    /// Simulation config file; the calibrated default when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// CSV output path.
    #[arg(long, default_value = "timings.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TimingCommand {
    /// Provision and tear down a use case N times and write the timing CSV.
    Run(TimingArgs),
}

#[derive(Debug, Subcommand)]
pub enum KmsCommand {
    /// Whole-KMS status, or one channel's key status.
    Status {
        #[arg(long)]
        channel: Option<String>,
    },
}

fn parse_security(s: &str) -> Result<SecurityMethod, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown security level {s}"))
}

struct Client {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

impl Client {
    fn new(base: &str, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client { agent, base: base.trim_end_matches('/').to_string(), token }
    }

    fn auth(&self) -> Option<String> {
        self.token.as_ref().map(|t| format!("Bearer {t}"))
    }

    fn finish(&self, what: &str, resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> anyhow::Result<Value> {
        let mut resp = resp.with_context(|| format!("{what}: cannot reach {}", self.base))?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string()?;
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::String(text));
        if !status.is_success() {
            let msg = body.get("error").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| body.to_string());
            bail!("{what}: {} {msg}", status.as_u16());
        }
        Ok(body)
    }

    fn get(&self, path: &str) -> anyhow::Result<Value> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        self.finish(&format!("GET {path}"), req.call())
    }

    fn delete(&self, path: &str) -> anyhow::Result<Value> {
        let mut req = self.agent.delete(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        self.finish(&format!("DELETE {path}"), req.call())
    }

    fn post(&self, path: &str, body: &str) -> anyhow::Result<Value> {
        let mut req = self.agent.post(format!("{}{path}", self.base)).header("Content-Type", "application/json");
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        self.finish(&format!("POST {path}"), req.send(body))
    }
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn load_topology(path: &Option<PathBuf>) -> anyhow::Result<Topology> {
    Ok(match path {
        Some(p) => load_topology_file(p)?,
        None => scenarios::testbed_topology(),
    })
}

/// Fails when a provision or deprovision did not reach its target state.
fn expect_state(rec: &Value, want: &str) -> anyhow::Result<()> {
    let state = rec.get("state").and_then(Value::as_str).unwrap_or("?");
    if state != want {
        let msg = rec.pointer("/failure/message").and_then(Value::as_str).unwrap_or("");
        bail!("slice ended {state}, expected {want}: {msg}");
    }
    Ok(())
}

fn print_timing_table(out: &mut dyn Write, table: &TimingTable) -> anyhow::Result<()> {
    for s in &table.summaries {
        writeln!(
            out,
            "{} {}: n={} mean={:.2}s min={:.2}s max={:.2}s outside[0,180]={}",
            s.use_case, s.operation, s.count, s.mean_s, s.min_s, s.max_s, s.out_of_range
        )?;
    }
    Ok(())
}

/// Runs `timing run` and returns the summary table.
pub fn run_timing(args: &TimingArgs) -> anyhow::Result<TimingTable> {
    let mut config = match &args.config {
        Some(p) => SimConfig::from_file(p)?,
        None => SimConfig::calibrated_default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(ts) = args.time_scale {
        config.time_scale = ts;
    }
    let orch = Orchestrator::new(load_topology(&args.topology)?, config)?;
    let template = scenarios::usecase(args.use_case).context("use case must be 1 or 2")?;
    let records = orch.run_cycles(&template, args.runs)?;
    let file = std::fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_csv(&records, std::io::BufWriter::new(file))?;
    Ok(timing_report(&records)?)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let client = Client::new(&cli.server, cli.token.clone());
    match cli.command {
        Command::Serve { config, listen } => {
            let mut cfg = match config {
                Some(p) => ServiceConfig::from_file(p)?,
                None => ServiceConfig::from_env().with_context(|| format!("loading ${CONFIG_ENV}"))?,
            };
            if let Some(l) = listen {
                cfg.listen = l;
            }
            tokio::runtime::Runtime::new()?.block_on(crate::http::serve(&cfg))?;
        }
        Command::Topo(TopoCommand::Load { file }) => {
            let t = load_topology_file(&file)?;
            writeln!(
                out,
                "{}: {} sites, {} devices, {} channels, {} access links, {} client ports",
                file.display(),
                t.sites.len(),
                t.devices.len(),
                t.channels.len(),
                t.access_links.len(),
                t.total_client_ports()
            )?;
        }
        Command::Topo(TopoCommand::Show) => print_json(out, &client.get("/topology")?)?,
        Command::Slice(cmd) => match cmd {
            SliceCommand::Submit { file, provision } => {
                let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                let rec = client.post("/slices", &text)?;
                if provision {
                    let id = rec["descriptor"]["slice_id"].as_str().context("record without slice_id")?;
                    let rec = client.post(&format!("/slices/{id}/provision?wait=true"), "")?;
                    print_json(out, &rec)?;
                    expect_state(&rec, "active")?;
                } else {
                    print_json(out, &rec)?;
                }
            }
            SliceCommand::Provision { id } => {
                let rec = client.post(&format!("/slices/{id}/provision?wait=true"), "")?;
                print_json(out, &rec)?;
                expect_state(&rec, "active")?;
            }
            SliceCommand::Deprovision { id } => {
                let rec = client.delete(&format!("/slices/{id}"))?;
                print_json(out, &rec)?;
                expect_state(&rec, "deleted")?;
            }
            SliceCommand::Status { id: Some(id) } => print_json(out, &client.get(&format!("/slices/{id}"))?)?,
            SliceCommand::Status { id: None } => {
                for rec in client.get("/slices")?.as_array().into_iter().flatten() {
                    writeln!(out, "{}\t{}", rec["descriptor"]["slice_id"].as_str().unwrap_or("?"), rec["state"].as_str().unwrap_or("?"))?;
                }
            }
            SliceCommand::Audit { id } => {
                let report = client.get(&format!("/slices/{id}/audit"))?;
                print_json(out, &report)?;
                let ok = report["per_connection"].as_array().is_some_and(|cs| cs.iter().all(|c| c["ok"] == true));
                if !ok {
                    bail!("audit of {id} found connections below their required security");
                }
            }
        },
        Command::Pce(PceCommand::Whatif(a)) => {
            let topo = load_topology(&a.topology)?;
            let req = ConnectionRequest {
                role: Role::Backhaul,
                src_site: a.src,
                dst_site: a.dst,
                bandwidth_gbps: a.bandwidth,
                max_latency_us: a.max_latency_us,
                required_security: a.security,
            };
            let policy = match a.policy {
                PolicyArg::Exact => Policy::Exact,
                PolicyArg::Upgrade => Policy::UpgradeAllowed,
            };
            let path = compute_path(&topo, &req, policy)?;
            writeln!(out, "hops: {}", path.hops.join(" -> "))?;
            writeln!(out, "sites: {}", path.sites.join(" -> "))?;
            writeln!(out, "latency: {} us", path.total_latency_us)?;
            writeln!(out, "min security: {}", path.min_security_on_path.as_str())?;
        }
        Command::Timing(TimingCommand::Run(args)) => {
            let table = run_timing(&args)?;
            print_timing_table(out, &table)?;
            writeln!(out, "wrote {}", args.out.display())?;
        }
        Command::Kms(KmsCommand::Status { channel }) => match channel {
            Some(ch) => print_json(out, &client.get(&format!("/keys/channel/{ch}/status"))?)?,
            None => print_json(out, &client.get("/kms/status")?)?,
        },
    }
    Ok(())
}
