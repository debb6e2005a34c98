//! Train a classifier on encoded records and compare with plain training on
//! the same minibatch schedule.
//!
//! cargo run --release --example ml_training

use imcode::casestudy::ml::{self, Architecture, DataSource, MlConfig, Optimizer};

fn main() -> imcode::Result<()> {
    let runs = [
        ("logistic, SGD, blobs", Architecture::Logistic, Optimizer::sgd(0.05), DataSource::Blobs { n: 600, classes: 3, dim: 2, spread: 0.05 }),
        ("MLP(8), Adam, blobs", Architecture::Mlp { hidden: 8 }, Optimizer::adam(0.01), DataSource::Blobs { n: 600, classes: 3, dim: 2, spread: 0.05 }),
        ("MLP(8), SGD, digits", Architecture::Mlp { hidden: 8 }, Optimizer::sgd(0.05), DataSource::Digits { n: 500 }),
    ];
    for (label, arch, optimizer, data) in runs {
        let cfg = MlConfig {
            data,
            arch,
            optimizer,
            batches_per_epoch: 7,
            ..MlConfig::default()
        };
        let b = ml::benchmark(&cfg)?;
        println!(
            "{label}: plain acc {:.3}, encoded acc {:.3}, max param gap {:.1e}, time x{:.1}",
            b.plain.accuracy.last().copied().unwrap_or(f64::NAN),
            b.siml.accuracy.last().copied().unwrap_or(f64::NAN),
            b.max_param_gap(),
            b.time_ratio()
        );
    }
    Ok(())
}
