//! Real-time arithmetic on the published stage budget: 7 + 106 + 71 = 184ms
//! per 200ms chunk, so one second of 25 fps output costs 0.92s of compute.
//!
//! Run with `cargo run --example latency_budget`.

use teller::pipeline::{simulate_schedule, StageBudget};

fn main() -> teller::Result<()> {
    let budget = StageBudget::reference();
    println!(
        "budget: audio {} + stage1 {} + stage2 {} = {} ms per chunk",
        budget.audio_encoder_ms,
        budget.stage1_total_ms,
        budget.stage2_total_ms,
        budget.per_chunk_ms()
    );
    let report = simulate_schedule(&budget, 5)?;
    println!("{}", report.to_json());

    // push stage 1 over the line and the verdict flips
    let slow = StageBudget { stage1_total_ms: 150.0, ..budget };
    let report = simulate_schedule(&slow, 5)?;
    println!(
        "with stage1 at 150 ms: {} ms per chunk, realtime: {}",
        report.max_chunk_latency_ms, report.verdict
    );
    Ok(())
}
