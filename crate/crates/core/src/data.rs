//! Synthetic hidden-Markov-chain task, its attention head recipes, and
//! one-shot episode assembly.
//!
//! Chain tokens are `v_q + eta` where `q` is the hidden state, with
//! `eta = sigma_perp z + (sigma_par - sigma_perp) P z` and `P` the projector
//! onto `span(v+, v-)`. Every sequence gets a beginning-of-sequence token at
//! position 0 and a one-hot position code of size `T + 1` appended below the
//! feature coordinates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionHeads, AttentionLogitSpec, TokenSequence};

/// Hardness of every head in the task.
pub const TASK_BETA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcTaskConfig {
    pub chain_length: usize,
    pub feature_width: usize,
    /// Switching probability of the `+1` class.
    pub p_plus: f64,
    /// Switching probability of the `-1` class.
    pub p_minus: f64,
    pub sigma_par: f64,
    pub sigma_perp: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for HmcTaskConfig {
    fn default() -> Self {
        Self {
            chain_length: 30,
            feature_width: 200,
            p_plus: 0.3,
            p_minus: 0.7,
            sigma_par: 1.0,
            sigma_perp: 1.0,
            train_count: 100,
            test_count: 1000,
            seed: 0,
        }
    }
}

impl HmcTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| p > 0.0 && p < 1.0;
        if !(prob(self.p_plus) && prob(self.p_minus)) {
            return Err(Error::Config("transition probabilities must lie in (0, 1)".into()));
        }
        if !(self.sigma_par >= 0.0 && self.sigma_perp >= 0.0)
            || !(self.sigma_par.is_finite() && self.sigma_perp.is_finite())
        {
            return Err(Error::Config(format!(
                "noise scales must be finite and >= 0, got sigma_par={} sigma_perp={}",
                self.sigma_par, self.sigma_perp
            )));
        }
        if self.chain_length == 0 {
            return Err(Error::Config("chain_length must be >= 1".into()));
        }
        if self.feature_width < 2 || !self.feature_width.is_multiple_of(2) {
            return Err(Error::Config("feature_width must be even and >= 2".into()));
        }
        Ok(())
    }

    /// `T + 1`, bos included.
    pub fn token_count(&self) -> usize {
        self.chain_length + 1
    }

    /// `N_0 + T + 1`.
    pub fn token_width(&self) -> usize {
        self.feature_width + self.token_count()
    }

    /// `(v+, v-)`: `sqrt 2` on the first and second half of the coordinates.
    pub fn state_vectors(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.feature_width;
        let s = 2f64.sqrt();
        (
            DVector::from_fn(n, |i, _| if i < n / 2 { s } else { 0.0 }),
            DVector::from_fn(n, |i, _| if i >= n / 2 { s } else { 0.0 }),
        )
    }
}

/// Labeled sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub examples: Vec<TokenSequence>,
    pub labels: Vec<f64>,
    pub seed: u64,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.labels)
    }

    pub fn token_width(&self) -> usize {
        self.examples.first().map_or(0, |x| x.width())
    }

    pub fn token_count(&self) -> usize {
        self.examples.first().map_or(0, |x| x.token_count())
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            examples: self.examples[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            seed: self.seed,
        }
    }
}

/// Train and test halves of the task.
#[derive(Debug, Clone, PartialEq)]
pub struct HmcSplit {
    pub train: SequenceDataset,
    pub test: SequenceDataset,
}

/// Hidden states (`true` for `v+`) of a symmetric two-state chain with
/// switching probability `p` and a uniform initial state.
pub fn hidden_chain<R: Rng + ?Sized>(rng: &mut R, length: usize, p: f64) -> Vec<bool> {
    let mut state: bool = rng.random();
    (0..length)
        .map(|i| {
            if i > 0 && rng.random::<f64>() < p {
                state = !state;
            }
            state
        })
        .collect()
}

/// One noise draw `sigma_perp z + (sigma_par - sigma_perp) P z`.
pub fn noise_draw<R: Rng + ?Sized>(rng: &mut R, cfg: &HmcTaskConfig) -> DVector<f64> {
    let n = cfg.feature_width;
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let (vp, vm) = cfg.state_vectors();
    let nf = n as f64;
    let par = &vp * (vp.dot(&z) / nf) + &vm * (vm.dot(&z) / nf);
    &z * cfg.sigma_perp + par * (cfg.sigma_par - cfg.sigma_perp)
}

/// Bos token plus one-hot positions around raw chain tokens (`N_0 x T`).
pub fn encode_chain(raw: &DMatrix<f64>) -> Result<TokenSequence> {
    let (n, t) = raw.shape();
    let tt = t + 1;
    let mut x = DMatrix::zeros(n + tt, tt);
    x.view_mut((0, 1), (n, t)).copy_from(raw);
    for s in 0..tt {
        x[(n + s, s)] = 1.0;
    }
    TokenSequence::new(x)
}

/// Raw chain tokens of an encoded sequence.
pub fn strip_encoding(x: &TokenSequence, feature_width: usize) -> DMatrix<f64> {
    x.values()
        .view((0, 1), (feature_width, x.token_count() - 1))
        .into_owned()
}

fn draw_sequence(rng: &mut ChaCha8Rng, cfg: &HmcTaskConfig, p: f64) -> Result<TokenSequence> {
    let (vp, vm) = cfg.state_vectors();
    let states = hidden_chain(rng, cfg.chain_length, p);
    let mut raw = DMatrix::zeros(cfg.feature_width, cfg.chain_length);
    for (t, &plus) in states.iter().enumerate() {
        let eta = noise_draw(rng, cfg);
        let v = if plus { &vp } else { &vm };
        raw.set_column(t, &(v + eta));
    }
    encode_chain(&raw)
}

fn draw_split(cfg: &HmcTaskConfig, count: usize, stream: u64) -> Result<SequenceDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let plus = count.div_ceil(2);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let (p, y) = if i < plus { (cfg.p_plus, 1.0) } else { (cfg.p_minus, -1.0) };
        items.push((draw_sequence(&mut rng, cfg, p)?, y));
    }
    items.shuffle(&mut rng);
    let (examples, labels) = items.into_iter().unzip();
    Ok(SequenceDataset {
        examples,
        labels,
        seed: cfg.seed,
    })
}

/// Balanced train and test sets; label `+1` for chains switching with
/// `p_plus`, `-1` for `p_minus`.
pub fn gen_hmc_dataset(cfg: &HmcTaskConfig) -> Result<HmcSplit> {
    cfg.validate()?;
    Ok(HmcSplit {
        train: draw_split(cfg, cfg.train_count, 0)?,
        test: draw_split(cfg, cfg.test_count, 1)?,
    })
}

/// The two hand-built heads: layer 1 lets each token look one position
/// ahead when the two tokens share a hidden state and otherwise falls back to
/// bos; layer 2 attends uniformly.
pub fn build_good_heads(cfg: &HmcTaskConfig) -> Result<(AttentionLogitSpec, AttentionLogitSpec)> {
    let n = cfg.feature_width;
    let tt = cfg.token_count();
    let d = n + tt;
    let (vp, vm) = cfg.state_vectors();
    let diff = vp - vm;
    let mut w1 = DMatrix::zeros(d, d);
    // Extra 1/N_0 keeps the feature logit O(beta) rather than O(beta N_0).
    let nf = n as f64;
    w1.view_mut((0, 0), (n, n))
        .copy_from(&(&diff * diff.transpose() / (nf * nf)));
    for s in 0..tt {
        for t in 0..tt {
            let mut v = 0.0;
            if s == 0 {
                v += 1.5;
            }
            if s == t + 1 {
                v += 1.0;
            }
            w1[(n + s, n + t)] = v;
        }
    }
    let mut w2 = DMatrix::zeros(d, d);
    w2.view_mut((n, n), (tt, tt)).fill(1.0);
    Ok((
        AttentionLogitSpec::direct(w1, TASK_BETA)?,
        AttentionLogitSpec::direct(w2, TASK_BETA)?,
    ))
}

/// Gaussian logit matrix with per-block standard deviations `1/N_0` (feature
/// block), `1` (position block) and `1/sqrt N_0` (mixed blocks).
pub fn build_random_heads(cfg: &HmcTaskConfig, seed: u64) -> Result<AttentionLogitSpec> {
    let n = cfg.feature_width;
    let d = cfg.token_width();
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DMatrix::from_fn(d, d, |i, j| {
        let sd = match (i < n, j < n) {
            (true, true) => 1.0 / nf,
            (false, false) => 1.0,
            _ => 1.0 / nf.sqrt(),
        };
        sd * rng.sample::<f64, _>(StandardNormal)
    });
    AttentionLogitSpec::direct(w, TASK_BETA)
}

/// Two layers of two heads: head 0 is the good head, head 1 a random head
/// (seeds `seed` and `seed + 1` for layers 1 and 2).
pub fn build_hmc_heads(cfg: &HmcTaskConfig, seed: u64) -> Result<AttentionHeads> {
    let (g1, g2) = build_good_heads(cfg)?;
    AttentionHeads::new(vec![
        vec![g1, build_random_heads(cfg, seed)?],
        vec![g2, build_random_heads(cfg, seed.wrapping_add(1))?],
    ])
}

/// Standard Gaussian query and key matrices (`G x N_0`) for every head,
/// a stand-in for trained weights.
pub fn random_query_key_heads(
    head_count: usize,
    depth: usize,
    width: usize,
    query_dim: usize,
    seed: u64,
) -> Result<AttentionHeads> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || DMatrix::from_fn(query_dim, width, |_, _| rng.sample::<f64, _>(StandardNormal));
    let layers = (0..depth)
        .map(|_| {
            (0..head_count)
                .map(|_| AttentionLogitSpec::query_key(draw(), draw()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionHeads::new(layers)
}

/// Load heads written by [`crate::io::write_attention_spec`].
pub fn import_attention_spec(path: &Path) -> Result<AttentionHeads> {
    crate::io::read_attention_spec(path)
}

pub fn export_attention_spec(path: &Path, heads: &AttentionHeads, digest: &[u8; 32]) -> Result<()> {
    crate::io::write_attention_spec(path, heads, digest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneShotConfig {
    /// Patches per image.
    pub patches: usize,
    /// Token width `N_0`.
    pub token_width: usize,
    /// Seed of the three label vectors.
    pub seed: u64,
}

impl Default for OneShotConfig {
    fn default() -> Self {
        Self {
            patches: 4,
            token_width: 64,
            seed: 0,
        }
    }
}

/// Three pre-extracted images (`N_0 x p` patch grids) with their classes.
/// `plus_first` assigns `v+` to the first context image and `v-` to the
/// second; otherwise the other way round.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub images: [DMatrix<f64>; 3],
    pub classes: [usize; 3],
    pub plus_first: bool,
}

/// `(v+, v-, v?)`, standard Gaussian.
pub fn one_shot_label_vectors(cfg: &OneShotConfig) -> [DVector<f64>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = || DVector::from_fn(cfg.token_width, |_, _| rng.sample::<f64, _>(StandardNormal));
    [draw(), draw(), draw()]
}

/// `PE[2i, t] = sin(t / 10000^(2i/N_0))`, `PE[2i+1, t] = cos(...)`.
pub fn sinusoidal_positions(width: usize, tokens: usize) -> DMatrix<f64> {
    DMatrix::from_fn(width, tokens, |r, t| {
        let i = (r / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / width as f64);
        if r % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Episodes as sequences of `3p` tokens with label vectors and positions added.
pub fn build_one_shot_sequences(episodes: &[Episode], cfg: &OneShotConfig) -> Result<SequenceDataset> {
    let p = cfg.patches;
    let n = cfg.token_width;
    if p == 0 || n == 0 {
        return Err(Error::Config("patches and token_width must be >= 1".into()));
    }
    let [vp, vm, vq] = one_shot_label_vectors(cfg);
    let pe = sinusoidal_positions(n, 3 * p);
    let mut examples = Vec::with_capacity(episodes.len());
    let mut labels = Vec::with_capacity(episodes.len());
    for (e, ep) in episodes.iter().enumerate() {
        if ep.images.iter().any(|im| im.shape() != (n, p)) {
            return Err(Error::Config(format!(
                "episode {e}: every image must be {n}x{p} (width x patches)"
            )));
        }
        let [c1, c2, c3] = ep.classes;
        if c1 == c2 || (c3 != c1 && c3 != c2) {
            return Err(Error::Config(format!(
                "episode {e}: context classes must differ and the query must match one"
            )));
        }
        let (l1, l2) = if ep.plus_first { (&vp, &vm) } else { (&vm, &vp) };
        let mut x = pe.clone();
        for (a, (img, lab)) in ep.images.iter().zip([l1, l2, &vq]).enumerate() {
            for i in 0..p {
                let mut col = x.column_mut(a * p + i);
                col += img.column(i);
                col += lab;
            }
        }
        examples.push(TokenSequence::new(x)?);
        let matches_first = c3 == c1;
        labels.push(if matches_first == ep.plus_first { 1.0 } else { -1.0 });
    }
    Ok(SequenceDataset {
        examples,
        labels,
        seed: cfg.seed,
    })
}

/// Stand-in image source: class prototypes with Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticEpisodeConfig {
    pub classes: usize,
    pub episodes: usize,
    /// Noise std relative to the unit-variance prototypes.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticEpisodeConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            episodes: 200,
            noise: 0.5,
            seed: 0,
        }
    }
}

pub fn synthetic_episodes(cfg: &SyntheticEpisodeConfig, shot: &OneShotConfig) -> Result<Vec<Episode>> {
    if cfg.classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(Error::Config("noise must be >= 0".into()));
    }
    let (n, p) = (shot.token_width, shot.patches);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos: Vec<DMatrix<f64>> = (0..cfg.classes)
        .map(|_| DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let c1 = rng.random_range(0..cfg.classes);
        let c2 = (c1 + rng.random_range(1..cfg.classes)) % cfg.classes;
        let c3 = if rng.random::<bool>() { c1 } else { c2 };
        let mut img = |c: usize| {
            DMatrix::from_fn(n, p, |i, j| protos[c][(i, j)] + cfg.noise * rng.sample::<f64, _>(StandardNormal))
        };
        let images = [img(c1), img(c2), img(c3)];
        episodes.push(Episode {
            images,
            classes: [c1, c2, c3],
            plus_first: rng.random(),
        });
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::attention_matrix;

    fn small() -> HmcTaskConfig {
        HmcTaskConfig {
            chain_length: 6,
            feature_width: 10,
            train_count: 6,
            test_count: 4,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_tokens_are_state_vectors() {
        let cfg = HmcTaskConfig {
            sigma_par: 0.0,
            sigma_perp: 0.0,
            ..small()
        };
        let data = gen_hmc_dataset(&cfg).unwrap();
        let (vp, vm) = cfg.state_vectors();
        for x in &data.train.examples {
            let raw = strip_encoding(x, cfg.feature_width);
            for t in 0..cfg.chain_length {
                let c = raw.column(t);
                assert!(c == vp.column(0) || c == vm.column(0));
            }
        }
    }

    #[test]
    fn state_vectors_orthogonal_with_norm_n0() {
        let cfg = HmcTaskConfig::default();
        let (vp, vm) = cfg.state_vectors();
        assert_eq!(vp.dot(&vm), 0.0);
        assert!((vp.norm_squared() - 200.0).abs() < 1e-12);
        assert!((vm.norm_squared() - 200.0).abs() < 1e-12);
    }

    #[test]
    fn transition_frequency_and_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chain = hidden_chain(&mut rng, 100_001, 0.3);
        let switches = chain.windows(2).filter(|w| w[0] != w[1]).count();
        assert!((switches as f64 / 100_000.0 - 0.3).abs() < 0.005);
        let plus = chain.iter().filter(|&&s| s).count() as f64 / chain.len() as f64;
        assert!((plus - 0.5).abs() < 0.01);
    }

    #[test]
    fn noise_decomposes_onto_subspaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let base = small();
        let (vp, vm) = base.state_vectors();
        let perp_only = HmcTaskConfig { sigma_par: 0.0, ..base.clone() };
        let par_only = HmcTaskConfig { sigma_perp: 0.0, ..base.clone() };
        for _ in 0..20 {
            let e = noise_draw(&mut rng, &perp_only);
            assert!(e.dot(&vp).abs() < 1e-10 && e.dot(&vm).abs() < 1e-10);
            let e = noise_draw(&mut rng, &par_only);
            let proj = &vp * (vp.dot(&e) / 10.0) + &vm * (vm.dot(&e) / 10.0);
            assert!((e - proj).amax() < 1e-10);
        }
    }

    #[test]
    fn layout_balance_and_reproducibility() {
        let cfg = small();
        let a = gen_hmc_dataset(&cfg).unwrap();
        let b = gen_hmc_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 6);
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.train.labels.iter().filter(|&&y| y == 1.0).count(), 3);
        let x = &a.train.examples[0];
        assert_eq!(x.width(), 10 + 7);
        assert_eq!(x.token_count(), 7);
        let bos = x.token(0);
        assert!(bos.rows(0, 10).iter().all(|&v| v == 0.0));
        assert_eq!(bos[10], 1.0);
        assert_eq!(x.values()[(10 + 3, 3)], 1.0);
        let raw = strip_encoding(x, 10);
        assert_eq!(encode_chain(&raw).unwrap(), *x);
        assert_ne!(a.train, gen_hmc_dataset(&HmcTaskConfig { seed: 4, ..cfg }).unwrap().train);
    }

    #[test]
    fn negative_noise_is_config_error() {
        let cfg = HmcTaskConfig { sigma_par: -1.0, ..small() };
        assert!(matches!(gen_hmc_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn good_head_structure() {
        let cfg = small();
        let (g1, g2) = build_good_heads(&cfg).unwrap();
        let data = gen_hmc_dataset(&cfg).unwrap();
        let omega = attention_matrix(&data.train.examples[0], &g2).unwrap();
        assert!(omega.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-14));
        let AttentionLogitSpec::Direct { w, beta } = &g1 else { panic!() };
        assert_eq!(*beta, 10.0);
        let n = 10;
        for s in 0..7 {
            for t in 0..7 {
                let expect = if s == 0 { 1.5 } else { 0.0 } + if s == t + 1 { 1.0 } else { 0.0 };
                assert_eq!(w[(n + s, n + t)], expect);
            }
        }
        assert!(w.view((0, n), (n, 7)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_head_statistics() {
        let cfg = HmcTaskConfig {
            feature_width: 1000,
            chain_length: 9,
            ..Default::default()
        };
        let spec = build_random_heads(&cfg, 5).unwrap();
        let AttentionLogitSpec::Direct { w, beta } = &spec else { panic!() };
        assert_eq!(*beta, 10.0);
        let ff = w.view((0, 0), (1000, 1000));
        let sd = (ff.iter().map(|v| v * v).sum::<f64>() / 1e6).sqrt();
        assert!((sd * 1000.0 - 1.0).abs() < 0.02);
        let pp = w.view((1000, 1000), (10, 10));
        let sd_pp = (pp.iter().map(|v| v * v).sum::<f64>() / 100.0).sqrt();
        assert!((sd_pp - 1.0).abs() < 0.3);
        assert_eq!(build_random_heads(&cfg, 5).unwrap(), spec);
    }

    fn episode(plus_first: bool, query_class: usize, n: usize, p: usize) -> Episode {
        Episode {
            images: [
                DMatrix::from_element(n, p, 0.1),
                DMatrix::from_element(n, p, -0.2),
                DMatrix::from_element(n, p, 0.3),
            ],
            classes: [4, 9, query_class],
            plus_first,
        }
    }

    #[test]
    fn zero_images_give_labels_plus_positions() {
        let cfg = OneShotConfig {
            patches: 1,
            token_width: 6,
            seed: 2,
        };
        let ep = Episode {
            images: [DMatrix::zeros(6, 1), DMatrix::zeros(6, 1), DMatrix::zeros(6, 1)],
            classes: [0, 1, 0],
            plus_first: true,
        };
        let d = build_one_shot_sequences(&[ep], &cfg).unwrap();
        let [vp, vm, vq] = one_shot_label_vectors(&cfg);
        let pe = sinusoidal_positions(6, 3);
        let x = d.examples[0].values();
        assert_eq!(x.column(0), (&vp + pe.column(0)).column(0));
        assert_eq!(x.column(1), (&vm + pe.column(1)).column(0));
        assert_eq!(x.column(2), (&vq + pe.column(2)).column(0));
        assert_eq!(d.labels, vec![1.0]);
    }

    #[test]
    fn one_shot_token_count_and_label_flip() {
        let cfg = OneShotConfig {
            patches: 3,
            token_width: 8,
            seed: 1,
        };
        let d = build_one_shot_sequences(&[episode(true, 4, 8, 3), episode(false, 4, 8, 3)], &cfg)
            .unwrap();
        assert_eq!(d.token_count(), 9);
        assert_eq!(d.labels, vec![1.0, -1.0]);
        let d = build_one_shot_sequences(&[episode(true, 9, 8, 3)], &cfg).unwrap();
        assert_eq!(d.labels, vec![-1.0]);
        assert!(build_one_shot_sequences(&[episode(true, 4, 8, 2)], &cfg).is_err());
        assert!(build_one_shot_sequences(&[episode(true, 5, 8, 3)], &cfg).is_err());
    }

    #[test]
    fn synthetic_episodes_are_valid_and_seeded() {
        let shot = OneShotConfig {
            patches: 2,
            token_width: 5,
            seed: 0,
        };
        let cfg = SyntheticEpisodeConfig {
            classes: 3,
            episodes: 40,
            noise: 0.0,
            seed: 4,
        };
        let eps = synthetic_episodes(&cfg, &shot).unwrap();
        assert_eq!(eps, synthetic_episodes(&cfg, &shot).unwrap());
        for e in &eps {
            let [c1, c2, c3] = e.classes;
            assert!(c1 != c2 && (c3 == c1 || c3 == c2));
            let q = if c3 == c1 { &e.images[0] } else { &e.images[1] };
            assert_eq!(q, &e.images[2]);
        }
        let d = build_one_shot_sequences(&eps, &shot).unwrap();
        assert!(d.labels.contains(&1.0) && d.labels.contains(&-1.0));
    }
}
