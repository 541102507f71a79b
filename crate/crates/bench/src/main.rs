use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use asyncrma::{Config, ProgressMode};
use asyncrma_bench::avail::{self, AvailOptions, Locality};
use asyncrma_bench::heat3d::{self, Grid, HeatConfig, HeatRow};
use asyncrma_bench::work::Calibration;
use asyncrma_bench::{BenchError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bench", about = "Progress-agent benchmarks on the simulated machine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Host overhead and application availability of non-blocking gets.
    Avail(AvailArgs),
    /// 3D heat conduction with halo exchange.
    Heat3d(HeatArgs),
}

/// Machine shape; flags override values read from `--config`.
#[derive(Args)]
struct MachineArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    units_per_node: Option<usize>,
    #[arg(long)]
    agents_per_node: Option<usize>,
    #[arg(long)]
    threshold: Option<usize>,
    #[arg(long)]
    net_latency_us: Option<f64>,
    #[arg(long)]
    net_bandwidth_gbps: Option<f64>,
    #[arg(long)]
    time_dilation: Option<f64>,
}

impl MachineArgs {
    fn build(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::from_kv_file(p)?,
            None => Config::default(),
        };
        if let Some(v) = self.nodes {
            c.nodes = v;
        }
        if let Some(v) = self.units_per_node {
            c.units_per_node = v;
        }
        if let Some(v) = self.agents_per_node {
            c.agents_per_node = v;
        }
        if let Some(v) = self.threshold {
            c.threshold_bytes = v;
        }
        if let Some(v) = self.net_latency_us {
            c.net_latency = Duration::from_secs_f64(v * 1e-6);
        }
        if let Some(v) = self.net_bandwidth_gbps {
            c.net_bandwidth = v * 1e9 / 8.0;
        }
        if let Some(v) = self.time_dilation {
            c.time_dilation = v;
        }
        c.transcript = false;
        Ok(c)
    }
}

#[derive(Args)]
struct AvailArgs {
    /// Comma list of sizes and power-of-two ranges, e.g. `1K..1M` or `8K,64K`
    #[arg(long, default_value = "1K..1M")]
    sizes: String,
    #[arg(long, value_delimiter = ',', default_value = "agent,deferred,eager")]
    modes: Vec<ProgressMode>,
    #[arg(long, value_delimiter = ',', default_value = "inter")]
    locality: Vec<Locality>,
    /// Repetitions per measurement (median reported)
    #[arg(long, default_value_t = 15)]
    reps: usize,
    #[arg(long, default_value_t = 1 << 24)]
    max_iters: u64,
    /// Output file; standard output when absent
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    machine: MachineArgs,
}

#[derive(Args)]
struct HeatArgs {
    #[arg(long, default_value = "32x32x64")]
    grid: Grid,
    /// Application units (blocks of the decomposition)
    #[arg(long, default_value_t = 8)]
    units: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// One or more progress modes; the checksum must agree across them
    #[arg(long, value_delimiter = ',', default_value = "agent")]
    mode: Vec<ProgressMode>,
    /// Time step; 90 % of the stability bound when absent
    #[arg(long)]
    dt: Option<f64>,
    /// Also run the serial reference and report the largest deviation
    #[arg(long)]
    check: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    machine: MachineArgs,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn machine_metadata(c: &Config) -> Vec<(String, String)> {
    [
        ("nodes", c.nodes.to_string()),
        ("units_per_node", c.units_per_node.to_string()),
        ("agents_per_node", c.agents_per_node.to_string()),
        ("threshold_bytes", c.threshold_bytes.to_string()),
        ("net_latency_us", (c.net_latency.as_secs_f64() * 1e6).to_string()),
        ("net_bandwidth_bytes_per_sec", c.net_bandwidth.to_string()),
        ("time_dilation", c.time_dilation.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn run_avail(a: &AvailArgs) -> Result<()> {
    let config = a.machine.build()?;
    config.validate()?;
    let sizes = avail::parse_sizes(&a.sizes).map_err(BenchError::Setup)?;
    let calibration = Calibration::measure();
    let opts = AvailOptions {
        reps: a.reps,
        max_iters: a.max_iters,
        calibration,
    };
    let runs = avail::sweep_availability(&config, &sizes, &a.modes, &a.locality, &opts)?;

    let mut meta = machine_metadata(&config);
    meta.push(("calibration_ns_per_iter".into(), calibration.ns_per_iter.to_string()));
    meta.push(("reps".into(), a.reps.to_string()));
    meta.push(("max_iters".into(), a.max_iters.to_string()));
    for r in &runs {
        let s = &r.sample;
        let label = format!("agents after {} {} {}", s.mode, s.locality, s.msg_size);
        meta.extend(avail::metrics_metadata(&label, &r.agent_metrics));
    }
    let samples: Vec<_> = runs.into_iter().map(|r| r.sample).collect();
    avail::write_samples(output(&a.csv)?, &meta, &samples)
}

fn run_heat(a: &HeatArgs) -> Result<()> {
    let mut config = a.machine.build()?;
    if a.machine.units_per_node.is_none() {
        if a.units % config.nodes != 0 {
            return Err(BenchError::Setup(format!(
                "{} units do not spread evenly over {} nodes",
                a.units, config.nodes
            )));
        }
        config.units_per_node = a.units / config.nodes + config.agents_per_node;
        config.validate()?;
    }
    let mut hc = HeatConfig::new(a.grid.0, a.units, a.iters)?;
    if let Some(dt) = a.dt {
        hc.dt = dt;
    }
    let reference = if a.check {
        Some(heat3d::serial_oracle(&hc)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    for &mode in &a.mode {
        let r = heat3d::heat3d(&config, &hc, mode)?;
        if let Some(field) = &reference {
            let dev = r
                .field
                .iter()
                .zip(field)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            eprintln!("{mode}: max |field - serial| = {dev:e}");
        }
        rows.push(HeatRow::new(&hc, mode, &r));
        metrics.push((format!("phases {mode}"), format!("{:?}", r.phases)));
        metrics.extend(avail::metrics_metadata(&format!("agents after {mode}"), &r.agent_metrics));
    }
    if rows.windows(2).any(|w| w[0].checksum != w[1].checksum) {
        return Err(BenchError::Numeric(
            "field checksum differs between progress modes".into(),
        ));
    }

    let mut meta = machine_metadata(&config);
    meta.push(("decomposition".into(), Grid(hc.decomp).to_string()));
    meta.push(("dt".into(), hc.dt.to_string()));
    meta.push(("dx".into(), hc.dx.to_string()));
    meta.push(("kappa".into(), format!("{:?}", hc.kappa)));
    meta.extend(metrics);
    let mut w = output(&a.csv)?;
    for (k, v) in &meta {
        writeln!(w, "# {k}={v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Avail(a) => run_avail(a),
        Cmd::Heat3d(a) => run_heat(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(2)
        }
    }
}
