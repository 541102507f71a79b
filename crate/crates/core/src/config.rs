use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};

/// How non-blocking operations make progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProgressMode {
    /// Weak progress: the transfer is issued only when the origin waits.
    Deferred,
    /// The origin issues every transfer itself, at call time.
    EagerDirect,
    /// Transfers above the threshold are handed to the node's progress agent.
    Agent,
}

impl ProgressMode {
    pub const ALL: [ProgressMode; 3] = [
        ProgressMode::Deferred,
        ProgressMode::EagerDirect,
        ProgressMode::Agent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProgressMode::Deferred => "deferred",
            ProgressMode::EagerDirect => "eager-direct",
            ProgressMode::Agent => "agent",
        }
    }
}

impl fmt::Display for ProgressMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProgressMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "deferred" => Ok(ProgressMode::Deferred),
            "eager-direct" | "eager" | "direct" => Ok(ProgressMode::EagerDirect),
            "agent" => Ok(ProgressMode::Agent),
            other => Err(Error::Config(format!("unknown progress mode `{other}`"))),
        }
    }
}

/// Shape of the simulated machine plus the knobs of the cost model.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub nodes: usize,
    /// Units per node, application units and agents together.
    pub units_per_node: usize,
    pub agents_per_node: usize,
    /// Non-blocking transfers strictly larger than this are routed to the agent.
    pub threshold_bytes: usize,
    /// One-way latency of an inter-node message.
    pub net_latency: Duration,
    /// Inter-node payload bandwidth in bytes per second.
    pub net_bandwidth: f64,
    pub seed: u64,
    pub mode: ProgressMode,
    /// Size of each application unit's non-collective reserved region.
    pub region_bytes: usize,
    /// Multiplier applied to every modeled network delay.
    pub time_dilation: f64,
    pub collective_timeout: Duration,
    /// Upper bound on how long an idle agent parks before re-probing.
    pub idle_park: Duration,
    /// Record the transport transcript.
    pub transcript: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            nodes: 2,
            units_per_node: 4,
            agents_per_node: 1,
            threshold_bytes: 4096,
            net_latency: Duration::from_micros(100),
            net_bandwidth: 1e9,
            seed: 0,
            mode: ProgressMode::Agent,
            region_bytes: 4 << 20,
            time_dilation: 1.0,
            collective_timeout: Duration::from_secs(30),
            idle_park: Duration::from_millis(1),
            transcript: true,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Config("nodes must be at least 1".into()));
        }
        if self.agents_per_node == 0 {
            return Err(Error::Config("agents_per_node must be at least 1".into()));
        }
        if self.agents_per_node >= self.units_per_node {
            return Err(Error::Config(format!(
                "agents_per_node ({}) must be smaller than units_per_node ({})",
                self.agents_per_node, self.units_per_node
            )));
        }
        if !(self.net_bandwidth.is_finite() && self.net_bandwidth > 0.0) {
            return Err(Error::Config("net_bandwidth must be positive".into()));
        }
        if !(self.time_dilation.is_finite() && self.time_dilation >= 0.0) {
            return Err(Error::Config("time_dilation must be non-negative".into()));
        }
        if self.region_bytes % 8 != 0 {
            return Err(Error::Config("region_bytes must be a multiple of 8".into()));
        }
        let total = self.nodes.checked_mul(self.units_per_node);
        if total.map_or(true, |t| t > u32::MAX as usize) {
            return Err(Error::Config("too many units".into()));
        }
        Ok(())
    }

    pub fn app_units_per_node(&self) -> usize {
        self.units_per_node - self.agents_per_node
    }

    pub fn total_units(&self) -> usize {
        self.nodes * self.units_per_node
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// keys not present keep their default.
    pub fn from_kv_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Config::from_kv_str(&text)
    }

    /// Sets one field by its key-file name.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            match v {
                "1" | "true" | "yes" | "on" => Ok(true),
                "0" | "false" | "no" | "off" => Ok(false),
                _ => Err(format!("cannot parse `{v}` as a boolean")),
            }
        }
        match key {
            "nodes" => self.nodes = num(value)?,
            "units_per_node" => self.units_per_node = num(value)?,
            "agents_per_node" => self.agents_per_node = num(value)?,
            "threshold_bytes" | "threshold" => self.threshold_bytes = num(value)?,
            "net_latency_us" => self.net_latency = Duration::from_secs_f64(num::<f64>(value)? * 1e-6),
            "net_bandwidth" | "net_bandwidth_bytes_per_sec" => self.net_bandwidth = num(value)?,
            "net_bandwidth_gbps" => self.net_bandwidth = num::<f64>(value)? * 1e9 / 8.0,
            "seed" => self.seed = num(value)?,
            "mode" => self.mode = value.parse().map_err(|e: Error| e.to_string())?,
            "region_bytes" => self.region_bytes = num(value)?,
            "time_dilation" => self.time_dilation = num(value)?,
            "collective_timeout_ms" => {
                self.collective_timeout = Duration::from_millis(num(value)?)
            }
            "idle_park_us" => self.idle_park = Duration::from_micros(num(value)?),
            "transcript" => self.transcript = flag(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}
