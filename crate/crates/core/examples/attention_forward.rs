//! The same network output computed layer by layer and as a sum over paths.

use apk::model::{
    attentioned_inputs, layerwise_output, network_output, AttentionHeads, AttentionLogitSpec, NetworkDims,
    NetworkWeights, ReadoutMode, TokenSequence,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> apk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n0, t, g) = (6, 5, 4);
    let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let heads = AttentionHeads::new(vec![
        vec![
            AttentionLogitSpec::query_key(gauss(g, n0), gauss(g, n0))?,
            AttentionLogitSpec::direct(gauss(n0, n0), 2.0)?,
        ],
        vec![
            AttentionLogitSpec::query_key(gauss(g, n0), gauss(g, n0))?,
            AttentionLogitSpec::direct(gauss(n0, n0), 0.5)?,
        ],
    ])?;
    let x = TokenSequence::new(gauss(n0, t))?;
    let att = heads.attend(&x)?;
    let dims = NetworkDims {
        width: 8,
        input_width: n0,
        heads: 2,
        depth: 2,
    };
    let w = NetworkWeights::sample_prior(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    for mode in [ReadoutMode::SingleToken(0), ReadoutMode::AveragePool] {
        let a = layerwise_output(&x, &w, &att, mode)?;
        let b = network_output(&x, &w, &att, mode)?;
        println!("{mode:?}: layerwise {a:.12}, path sum {b:.12}");
    }
    let xi = attentioned_inputs(&x, &att, ReadoutMode::AveragePool)?;
    println!("attentioned inputs: {} x {} (width x paths)", xi.nrows(), xi.ncols());
    Ok(())
}
