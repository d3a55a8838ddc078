//! The hidden-Markov-chain task: one good path classifies, the others sit
//! near chance in the infinite-width limit.

use apk::data::{build_hmc_heads, gen_hmc_dataset, HmcTaskConfig};
use apk::kernel::compute_features;
use apk::model::ReadoutMode;
use apk::predictor::evaluate_predictor;
use nalgebra::DMatrix;

fn main() -> apk::Result<()> {
    let cfg = HmcTaskConfig::default();
    let split = gen_hmc_dataset(&cfg)?;
    println!(
        "{} train / {} test sequences of {} tokens, width {}",
        split.train.len(),
        split.test.len(),
        split.train.token_count(),
        split.train.token_width()
    );
    let heads = build_hmc_heads(&cfg, 1000)?;
    let mode = ReadoutMode::SingleToken(1);
    let train = compute_features(&split.train.examples, &heads, mode, true)?;
    let test = compute_features(&split.test.examples, &heads, mode, true)?;
    let (y, yt) = (split.train.labels_vector(), split.test.labels_vector());
    for (k, path) in train.paths().iter().enumerate() {
        let mut tr = train.select_paths(&[k])?;
        let mut te = test.select_paths(&[k])?;
        tr.set_normalization(1.0);
        te.set_normalization(1.0);
        let r = evaluate_predictor(&DMatrix::identity(1, 1), &tr, &y, &te, Some(&yt), 0.01)?;
        println!("path {}: accuracy {:.3}", path.label(), r.accuracy.unwrap_or(f64::NAN));
    }
    Ok(())
}
