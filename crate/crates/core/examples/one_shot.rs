//! One-shot episodes: two labelled context images and a query, read out by
//! average pooling through query-key heads.

use apk::data::{build_one_shot_sequences, random_query_key_heads, synthetic_episodes, OneShotConfig, SyntheticEpisodeConfig};
use apk::kernel::compute_features;
use apk::model::ReadoutMode;
use apk::predictor::evaluate_predictor;
use apk::solver::OrderParameterSet;

fn main() -> apk::Result<()> {
    let shot = OneShotConfig {
        patches: 2,
        token_width: 32,
        seed: 0,
    };
    let source = SyntheticEpisodeConfig {
        classes: 10,
        episodes: 300,
        noise: 0.3,
        seed: 1,
    };
    let data = build_one_shot_sequences(&synthetic_episodes(&source, &shot)?, &shot)?;
    let (train, test) = (data.subset(0..200), data.subset(200..300));
    let heads = random_query_key_heads(2, 2, shot.token_width, 8, 2)?;
    let mode = ReadoutMode::AveragePool;
    let ftr = compute_features(&train.examples, &heads, mode, true)?;
    let fte = compute_features(&test.examples, &heads, mode, true)?;
    let gp = OrderParameterSet::gp_point(2, 2, 1.0)?;
    let r = evaluate_predictor(gp.u1(), &ftr, &train.labels_vector(), &fte, Some(&test.labels_vector()), 0.01)?;
    println!(
        "{} tokens per episode; GP accuracy with untrained heads {:.3}",
        train.token_count(),
        r.accuracy.unwrap_or(f64::NAN)
    );
    Ok(())
}
