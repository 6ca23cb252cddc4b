//! Temporal refinement: train the attention pass to undo masked-region
//! degradation using clean context frames.
//!
//! Run with `cargo run --release --example refine_features`.

use teller::etm::{
    mean_refined_loss, synthetic_sequence, train_etm, ETMConfig, ETMParams,
};
use teller::train::TrainConfig;

fn main() -> teller::Result<()> {
    let mut params = ETMParams::seeded(ETMConfig::default(), 9)?;
    let samples: teller::Result<Vec<_>> =
        (0..32).map(|i| synthetic_sequence(&params, 16, 500 + i)).collect();
    let samples = samples?;

    let initial = mean_refined_loss(&params, &samples)?;
    println!("masked loss before training (identity refiner): {initial:.4}");

    let report = train_etm(
        &mut params,
        &samples,
        &TrainConfig {
            lr_start: 3e-2,
            lr_end: 1e-3,
            epochs: 40,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        },
    )?;
    let trained = mean_refined_loss(&params, &samples)?;
    println!(
        "after {} epochs: {trained:.4} ({:.1}% of initial)",
        report.history.len(),
        100.0 * trained / initial
    );
    Ok(())
}
