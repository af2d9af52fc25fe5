//! Micro-measurements of the deployment machinery itself: how task
//! startup decomposes, what a live migration costs end to end, how launch
//! throughput scales with workers, and how fast placement decisions are.

use fogrune::sim::bench::{decision_bench, migration_bench, scaling_row, startup_bench};

fn main() {
    println!("-- task startup decomposition (virtual time) --");
    for r in startup_bench() {
        println!(
            "  {:<16} fetch={}ms launch={}ms cached={} -> measured {}ms (model says {}ms)",
            r.case, r.fetch_delay_ms, r.launch_delay_ms, r.operator_cached, r.measured_ms, r.expected_ms
        );
    }

    println!("\n-- live migration (launch 2000ms, terminate 300ms) --");
    let m = migration_bench();
    println!(
        "  replacement launch and original teardown overlap:\n  measured {}ms, slower phase {}ms, naive sequential sum {}ms",
        m.measured_ms, m.max_phase_ms, m.sum_phases_ms
    );

    println!("\n-- launch throughput vs workers (40 tasks, 500ms launch each) --");
    let base = scaling_row(1, 40, 500);
    for w in [1u32, 2, 4, 8] {
        let r = if w == 1 { base.clone() } else { scaling_row(w, 40, 500) };
        println!(
            "  {:>2} workers: makespan {:>6}ms, {:>6.2} tasks/s ({:.2}x the single worker)",
            r.workers,
            r.makespan_ms,
            r.throughput_per_s,
            r.throughput_per_s / base.throughput_per_s
        );
    }

    println!("\n-- placement decision latency (wall clock, 1000 entities x 10 functions) --");
    let stats = decision_bench(1000, 10).expect("samples");
    println!(
        "  {} events: mean {}us, p50 {}us, p95 {}us, max {}us",
        stats.count, stats.mean_us, stats.p50_us, stats.p95_us, stats.max_us
    );
}
