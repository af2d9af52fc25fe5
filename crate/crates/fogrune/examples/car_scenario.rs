//! The headline experiment: 100 cars streaming sensor frames once a
//! second into a per-car speed watcher, simulated for a virtual minute on
//! four metro edges plus a cloud. The same device trace runs three times,
//! differing only in where tasks may go:
//!
//!   cloud  every task in the datacenter, every frame crosses the WAN
//!   edge   tasks pinned to edges, frames still forwarded between nodes
//!   fog    tasks placed next to their producers and migrated when they move
//!
//! Placement is the only variable; the computed results are identical,
//! which the matching result fingerprints at the bottom confirm.

use fogrune::sim::{Cluster, MetricsReport, Mode, SimConfig};

fn run(mode: Mode, payload: usize, mobile: bool) -> MetricsReport {
    let cfg = SimConfig::fleet(mode, payload, mobile, 7);
    let mut cluster = Cluster::new(cfg).unwrap();
    cluster.run();
    cluster.report()
}

fn row(label: &str, r: &MetricsReport) {
    let svc = r.service_latency.as_ref();
    println!(
        "{label:<18} {:>12} {:>10} {:>10} {:>11} {:>10}",
        r.traffic.total_bytes,
        r.tasks_launched,
        r.migrations_completed,
        svc.map(|s| format!("{}us", s.mean_us)).unwrap_or_else(|| "-".into()),
        svc.map(|s| format!("{}us", s.p95_us)).unwrap_or_else(|| "-".into()),
    );
}

fn main() {
    println!("-- static cars, small frames (126 B payload) --");
    println!(
        "{:<18} {:>12} {:>10} {:>10} {:>11} {:>10}",
        "placement", "bytes", "tasks", "migrations", "svc mean", "svc p95"
    );
    let cloud_small = run(Mode::Cloud, 126, false);
    let edge_small = run(Mode::Edge, 126, false);
    let fog_small = run(Mode::Fog, 126, false);
    row("cloud", &cloud_small);
    row("edge", &edge_small);
    row("fog", &fog_small);
    println!(
        "fog moves {:.1}% of the cloud bytes\n",
        100.0 * fog_small.traffic.total_bytes as f64 / cloud_small.traffic.total_bytes as f64
    );

    println!("-- static cars, camera frames (1682 B payload) --");
    let cloud_big = run(Mode::Cloud, 1682, false);
    let fog_big = run(Mode::Fog, 1682, false);
    row("cloud", &cloud_big);
    row("fog", &fog_big);
    println!(
        "fog moves {:.1}% of the cloud bytes; bigger frames widen the gap\n",
        100.0 * fog_big.traffic.total_bytes as f64 / cloud_big.traffic.total_bytes as f64
    );

    println!("-- roaming cars, camera frames: tasks chase their producers --");
    let edge_mobile = run(Mode::Edge, 1682, true);
    let fog_mobile = run(Mode::Fog, 1682, true);
    row("edge", &edge_mobile);
    row("fog", &fog_mobile);
    let (f, e) = (
        fog_mobile.service_latency.as_ref().unwrap(),
        edge_mobile.service_latency.as_ref().unwrap(),
    );
    println!(
        "mean service latency: fog {}us vs edge {}us ({} migrations kept results local)\n",
        f.mean_us, e.mean_us, fog_mobile.migrations_completed
    );

    println!("result fingerprints (same inputs, same outputs, any placement):");
    for (label, r) in [("cloud", &cloud_small), ("edge", &edge_small), ("fog", &fog_small)] {
        println!("  {label:<6} {}", r.result_fingerprint);
    }
}
