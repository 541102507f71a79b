//! Host overhead and application availability of non-blocking gets.
//!
//! For one message size the origin first measures `base_t`, a non-blocking
//! get followed immediately by its wait. It then repeats get / work loop /
//! wait with the work loop doubling from one iteration, until the whole
//! iteration takes more than 1.5 x `base_t`. At that point
//! `overhead = iter_t - work_t` is the time the origin itself spent on the
//! transfer and `availability = 1 - overhead / base_t` the share of the
//! transfer time left over for computation.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::Instant;

use asyncrma::{AgentMetrics, Config, GlobalPtr, ProgressMode, Runtime, Unit, UnitId};
use serde::{Deserialize, Serialize};

use crate::work::{spin, Calibration};
use crate::{median, BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    Intra,
    Inter,
}

impl Locality {
    pub fn as_str(self) -> &'static str {
        match self {
            Locality::Intra => "intra",
            Locality::Inter => "inter",
        }
    }
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Locality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "intra" => Ok(Locality::Intra),
            "inter" => Ok(Locality::Inter),
            other => Err(format!("unknown locality `{other}` (intra, inter)")),
        }
    }
}

mod mode_str {
    use asyncrma::ProgressMode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &ProgressMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(m.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ProgressMode, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One row of the availability CSV. Times are in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub msg_size: usize,
    #[serde(with = "mode_str")]
    pub mode: ProgressMode,
    pub locality: Locality,
    pub work_iters: u64,
    pub iter_t_us: f64,
    pub work_t_us: f64,
    pub base_t_us: f64,
    pub overhead_us: f64,
    pub availability: f64,
}

impl BenchSample {
    /// Fills in overhead and availability from the three measured times.
    pub fn from_times(
        msg_size: usize,
        mode: ProgressMode,
        locality: Locality,
        work_iters: u64,
        iter_t_us: f64,
        work_t_us: f64,
        base_t_us: f64,
    ) -> BenchSample {
        let overhead_us = iter_t_us - work_t_us;
        BenchSample {
            msg_size,
            mode,
            locality,
            work_iters,
            iter_t_us,
            work_t_us,
            base_t_us,
            overhead_us,
            availability: 1.0 - overhead_us / base_t_us,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AvailOptions {
    /// Repetitions per measurement; the median is reported.
    pub reps: usize,
    pub max_iters: u64,
    pub calibration: Calibration,
}

impl AvailOptions {
    pub fn new(calibration: Calibration) -> AvailOptions {
        AvailOptions {
            reps: 15,
            max_iters: 1 << 24,
            calibration,
        }
    }
}

/// A sample plus the state of every agent after the measurement.
#[derive(Debug, Clone)]
pub struct AvailRun {
    pub sample: BenchSample,
    pub agent_metrics: BTreeMap<UnitId, AgentMetrics>,
}

/// Runs the availability loop for one message size on a fresh runtime.
pub fn measure_availability(
    base: &Config,
    msg_size: usize,
    mode: ProgressMode,
    locality: Locality,
    opts: &AvailOptions,
) -> Result<AvailRun> {
    if msg_size == 0 || opts.reps == 0 {
        return Err(BenchError::Setup("message size and repetitions must be positive".into()));
    }
    let config = Config {
        mode,
        transcript: false,
        ..base.clone()
    };
    let mut rt = Runtime::init(config)?;
    let all = rt.team_all();
    let origin = all.members()[0];
    let target = match locality {
        Locality::Inter => all.members().iter().find(|m| m.node() != origin.node()),
        Locality::Intra => all.members()[1..].iter().find(|m| m.node() == origin.node()),
    }
    .copied()
    .ok_or_else(|| {
        BenchError::Setup(format!(
            "{locality} measurement needs a second application unit {} node",
            if locality == Locality::Inter { "on another" } else { "on the same" }
        ))
    })?;

    let results = rt.run(|u| -> Result<Option<BenchSample>> {
        let team = u.team_all();
        let seg = u.team_alloc_aligned(&team, msg_size)?;
        u.barrier(&team)?;
        let sample = (u.id() == origin)
            .then(|| origin_loop(u, seg.on(target), seg, msg_size, locality, opts));
        u.barrier(&team)?;
        u.team_free(seg)?;
        sample.transpose()
    });
    let mut sample = None;
    for r in results {
        if let Some(s) = r? {
            sample = Some(s);
        }
    }
    let report = rt.finalize()?;
    Ok(AvailRun {
        sample: sample.expect("origin produced a sample"),
        agent_metrics: report.agent_metrics,
    })
}

fn origin_loop(
    u: &mut Unit,
    src: GlobalPtr,
    dst: GlobalPtr,
    n: usize,
    locality: Locality,
    opts: &AvailOptions,
) -> Result<BenchSample> {
    let mode = u.mode();
    let trial = |u: &mut Unit, iters: Option<u64>| -> Result<f64> {
        let t = Instant::now();
        let mut h = u.get_nb(src, dst, n)?;
        if let Some(i) = iters {
            spin(i);
        }
        u.wait(&mut h)?;
        Ok(t.elapsed().as_secs_f64() * 1e6)
    };
    for _ in 0..3 {
        trial(u, None)?;
    }
    let reps = |f: &mut dyn FnMut() -> Result<f64>| -> Result<f64> {
        let mut xs = (0..opts.reps).map(|_| f()).collect::<Result<Vec<_>>>()?;
        Ok(median(&mut xs))
    };
    let base_t = reps(&mut || trial(u, None))?;
    let mut iters = 1u64;
    while iters <= opts.max_iters {
        let work_t = reps(&mut || {
            let t = Instant::now();
            spin(iters);
            Ok(t.elapsed().as_secs_f64() * 1e6)
        })?;
        let iter_t = reps(&mut || trial(u, Some(iters)))?;
        if iter_t > 1.5 * base_t {
            return Ok(BenchSample::from_times(
                n, mode, locality, iters, iter_t, work_t, base_t,
            ));
        }
        iters *= 2;
    }
    Err(BenchError::NonConvergence {
        msg_size: n,
        mode,
        locality,
        max_iters: opts.max_iters,
    })
}

/// Every size x mode x locality combination, each on a fresh runtime.
pub fn sweep_availability(
    base: &Config,
    sizes: &[usize],
    modes: &[ProgressMode],
    localities: &[Locality],
    opts: &AvailOptions,
) -> Result<Vec<AvailRun>> {
    let mut out = Vec::with_capacity(sizes.len() * modes.len() * localities.len());
    for &size in sizes {
        for &mode in modes {
            for &loc in localities {
                out.push(measure_availability(base, size, mode, loc, opts)?);
            }
        }
    }
    Ok(out)
}

/// Writes `# key=value` metadata lines followed by the CSV table.
pub fn write_samples<W: io::Write>(mut w: W, metadata: &[(String, String)], samples: &[BenchSample]) -> Result<()> {
    for (k, v) in metadata {
        writeln!(w, "# {k}={v}")?;
    }
    let mut csv = csv::Writer::from_writer(w);
    for s in samples {
        csv.serialize(s)?;
    }
    if samples.is_empty() {
        csv.write_record([
            "msg_size",
            "mode",
            "locality",
            "work_iters",
            "iter_t_us",
            "work_t_us",
            "base_t_us",
            "overhead_us",
            "availability",
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a table written by [`write_samples`], skipping metadata lines.
pub fn read_samples<R: io::Read>(r: R) -> Result<Vec<BenchSample>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    Ok(rdr.deserialize().collect::<Result<Vec<BenchSample>, _>>()?)
}

/// Metadata lines describing the agents after a run.
pub fn metrics_metadata(label: &str, metrics: &BTreeMap<UnitId, AgentMetrics>) -> Vec<(String, String)> {
    metrics
        .iter()
        .map(|(a, m)| {
            (
                format!("{label} {a}"),
                format!(
                    "requests={} flushes={} batches={} idle_drains={} wait_drains={} protocol_errors={} queue_peak={}",
                    m.requests, m.flushes, m.batches, m.idle_drains, m.wait_drains, m.protocol_errors, m.queue_peak
                ),
            )
        })
        .collect()
}

/// Parses sizes such as `4096`, `8K`, `1M`.
pub fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let (digits, mult) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 1 << 10),
        Some('M' | 'm') => (&s[..s.len() - 1], 1 << 20),
        Some('G' | 'g') => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    let n: usize = digits.parse().map_err(|_| format!("bad size `{s}`"))?;
    n.checked_mul(mult).ok_or_else(|| format!("size `{s}` overflows"))
}

/// Parses a comma list of sizes and `A..B` power-of-two ranges.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (mut a, b) = (parse_size(a)?, parse_size(b)?);
            if a == 0 || a > b {
                return Err(format!("bad size range `{part}`"));
            }
            while a <= b {
                out.push(a);
                a *= 2;
            }
        } else {
            out.push(parse_size(part)?);
        }
    }
    if out.is_empty() {
        return Err("no sizes given".into());
    }
    Ok(out)
}
