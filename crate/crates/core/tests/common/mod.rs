#![allow(dead_code)]

pub mod oracle;

use std::time::Duration;

use asyncrma::{Config, LogEntry, ProgressMode, Tag};

/// Two nodes, `apps` application units and one agent per node.
pub fn config(apps: usize, mode: ProgressMode) -> Config {
    Config {
        nodes: 2,
        units_per_node: apps + 1,
        agents_per_node: 1,
        mode,
        net_latency: Duration::from_micros(50),
        ..Config::default()
    }
}

pub fn count_ctrl(log: &[LogEntry], tag: Tag) -> usize {
    log.iter().filter(|e| e.is_ctrl(tag)).count()
}
