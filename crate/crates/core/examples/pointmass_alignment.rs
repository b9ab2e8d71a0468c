//! Train both model wirings on a pointmass dataset and print how much of the
//! hidden action each one captures.
//!
//! Run with `cargo run --release -p ibac-core --example pointmass_alignment`.

use ibac_core::env::{generate, ActionMode, EnvConfig};
use ibac_core::metrics::{alignment_report, BinningConfig};
use ibac_core::models::{extract_latents, train, ModelKind, TrainConfig};

fn main() {
    let env = EnvConfig {
        action_mode: ActionMode::PiecewiseConstant,
        segment_len: 99,
        ..EnvConfig::default()
    };
    let dataset = generate(&env).expect("generation");
    println!(
        "dataset: {} transitions, {} obs dims, {} action dims",
        dataset.len(),
        dataset.d_obs(),
        dataset.d_action()
    );

    let binning = BinningConfig::default();
    for kind in [ModelKind::Vib, ModelKind::Idm] {
        let start = std::time::Instant::now();
        let cfg = TrainConfig {
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train(kind, dataset.observations(), &cfg).expect("training");
        let z = extract_latents(&out.model, dataset.observations()).expect("latents");
        let report = alignment_report(&z, dataset.actions_for_eval(), &binning).expect("report");
        let last = out.curve.last().unwrap();
        println!(
            "{kind}: rec {:.4} kl {:.3} | mean max ratio {:.4} | mean max |r| {:.4} ({:.1?})",
            last.rec,
            last.kl,
            report.mean_max_ratio(),
            report.mean_max_pearson(),
            start.elapsed(),
        );
    }
}
