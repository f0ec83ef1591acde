//! Stand-in training objective, Adam, and the training loop.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{gt_correspondences, target_inlier_flags, CorrespondenceSet, PointCloud, RigidTransform};
use crate::model::{forward, AblationConfig, PipelineWeights, PreparedCloud, WarpMode};
use crate::synth::{synth_pair, SynthParams};
use crate::weights::ModelWeights;

/// Stabilizer inside `log(S + ε)`.
pub const LOSS_EPS: f64 = 1e-9;
/// Weight of the matchability cross-entropy.
pub const BCE_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Pairs per step.
    pub batch: usize,
    pub precision: Precision,
    /// Reposition with the ground-truth motion while training.
    pub gt_warp: bool,
    /// Multiplicative learning-rate decay applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
    /// Directory for periodic checkpoints, if any.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            batch: 1,
            precision: Precision::F32,
            gt_warp: true,
            decay: 0.95,
            decay_every: 100,
            checkpoint_dir: None,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr = {} must be finite and non-negative", self.lr)));
        }
        if self.steps == 0 || self.batch == 0 || self.decay_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("steps, batch and intervals must be at least 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay = {} outside (0, 1]", self.decay)));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * self.decay.powi((step / self.decay_every) as i32)
    }
}

/// A pair with everything the loss needs precomputed.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x: PreparedCloud,
    pub y: PreparedCloud,
    pub t_gt: RigidTransform,
    pub gt: CorrespondenceSet,
    pub flags_x: Vec<bool>,
    pub flags_y: Vec<bool>,
}

impl TrainingPair {
    pub fn new(x: PointCloud, y: PointCloud, t_gt: RigidTransform, k_local: usize, beta: f64) -> Result<Self> {
        let (gt, flags_x) = gt_correspondences(&x, &y, &t_gt, beta)?;
        let flags_y = target_inlier_flags(&x, &y, &t_gt, beta)?;
        Ok(TrainingPair {
            x: PreparedCloud::new(x, k_local)?,
            y: PreparedCloud::new(y, k_local)?,
            t_gt,
            gt,
            flags_x,
            flags_y,
        })
    }
}

fn flags_as<T: Real>(f: &[bool]) -> Vec<T> {
    f.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
}

/// `-mean log(S_ij + ε)` over ground-truth pairs plus
/// `λ · BCE([τX, τY], [flagsX, flagsY])` when matchability is present.
pub fn matching_loss<T: Real>(
    tape: &mut Tape<T>,
    s: Var,
    gt: &CorrespondenceSet,
    tau: Option<(Var, Var)>,
    flags_x: &[bool],
    flags_y: &[bool],
) -> Result<Var> {
    if gt.is_empty() {
        return Err(Error::InvalidInput("matching loss needs at least one ground-truth pair".into()));
    }
    let picked = tape.gather_elems(s, &gt.index_pairs())?;
    let logs = tape.log(picked, T::of(LOSS_EPS))?;
    let mean = tape.mean_all(logs)?;
    let nll = tape.neg(mean)?;
    let Some((tx, ty)) = tau else {
        return Ok(nll);
    };
    let both = tape.concat(&[tx, ty], 0)?;
    let targets: Vec<T> = flags_as(flags_x).into_iter().chain(flags_as(flags_y)).collect();
    let bce = tape.binary_cross_entropy(both, &targets, T::of(LOSS_EPS))?;
    let bce = tape.scale(bce, T::of(BCE_WEIGHT))?;
    tape.add(nll, bce)
}

/// Forward the pipeline and the loss on `tape`.
pub fn pair_loss<T: Real>(
    tape: &mut Tape<T>,
    pw: &PipelineWeights,
    weights: &ModelWeights<T>,
    ablation: &AblationConfig,
    pair: &TrainingPair,
    gt_warp: bool,
) -> Result<Var> {
    let mode = if gt_warp {
        WarpMode::GroundTruth(pair.t_gt)
    } else {
        WarpMode::Estimate
    };
    let out = forward(tape, pw, weights.config(), ablation, &pair.x, &pair.y, &mode)?;
    let tau = out.tau_x.zip(out.tau_y);
    matching_loss(tape, out.scores, &pair.gt, tau, &pair.flags_x, &pair.flags_y)
}

/// Loss value and gradient of every parameter for a batch (mean over pairs).
pub fn loss_and_gradients<T: Real>(
    weights: &ModelWeights<T>,
    ablation: &AblationConfig,
    pairs: &[TrainingPair],
    gt_warp: bool,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape);
    let pw = PipelineWeights::bind(&bound)?;
    let mut losses = Vec::with_capacity(pairs.len());
    for p in pairs {
        losses.push(pair_loss(&mut tape, &pw, weights, ablation, p, gt_warp)?);
    }
    let stacked = tape.concat(&losses, 0)?;
    let loss = tape.mean_all(stacked)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item().to_f64_lossy();
    let mut out = BTreeMap::new();
    for (name, var) in bound.iter() {
        let g = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(*var)));
        out.insert(name.clone(), g);
    }
    Ok((value, out))
}

/// Adam with the usual defaults (0.9, 0.999, 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn update(&mut self, weights: &mut ModelWeights<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (name, p) in weights.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingParameter(format!("gradient of {}", name)))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); p.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One optimizer step on a batch. Returns the batch loss before the update.
pub fn train_step<T: Real>(
    weights: &mut ModelWeights<T>,
    adam: &mut Adam<T>,
    pairs: &[TrainingPair],
    ablation: &AblationConfig,
    gt_warp: bool,
    lr: f64,
) -> Result<f64> {
    let step = adam.steps_taken() as usize;
    let diverged = |detail: String| Error::Diverged { step, detail };
    let (loss, grads) = match loss_and_gradients(weights, ablation, pairs, gt_warp) {
        Ok(v) => v,
        Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in {}", op))),
        Err(e) => return Err(e),
    };
    if !loss.is_finite() {
        return Err(diverged(format!("loss = {}", loss)));
    }
    adam.update(weights, &grads, lr)?;
    if let Some((name, _)) = weights.iter().find(|(_, t)| !t.is_finite()) {
        return Err(diverged(format!("parameter {} became non-finite", name)));
    }
    Ok(loss)
}

/// Supplies training pairs by global index.
pub trait PairSource {
    fn pair(&mut self, index: usize) -> Result<TrainingPair>;
}

/// SplitMix64 finalizer, used to derive per-pair seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps the training stream disjoint from datasets generated with the same seed.
const STREAM_SALT: u64 = 0x7472_6169_6e00_0000;

/// Fresh synthetic pairs with seeds derived from `(seed, index)`.
#[derive(Debug, Clone)]
pub struct SynthStream {
    pub params: SynthParams,
    pub seed: u64,
    pub k_local: usize,
    pub beta: f64,
}

impl PairSource for SynthStream {
    fn pair(&mut self, index: usize) -> Result<TrainingPair> {
        let p = SynthParams {
            seed: mix_seed(self.seed ^ STREAM_SALT, index as u64),
            ..self.params
        };
        let s = synth_pair(&p)?;
        TrainingPair::new(s.x, s.y, s.t_gt, self.k_local, self.beta)
    }
}

/// A fixed list of pairs visited cyclically.
#[derive(Debug, Clone)]
pub struct PairCycle {
    pub pairs: Vec<TrainingPair>,
}

impl PairSource for PairCycle {
    fn pair(&mut self, index: usize) -> Result<TrainingPair> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidInput("no training pairs".into()));
        }
        Ok(self.pairs[index % self.pairs.len()].clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub weights: ModelWeights<T>,
    /// One loss per step.
    pub losses: Vec<f64>,
}

/// Train for `cfg.steps` steps. `on_step(step, loss)` is called after every
/// update; checkpoints go to `cfg.checkpoint_dir` every `checkpoint_every`
/// steps and after the last one.
pub fn train_loop<T: Real>(
    init: ModelWeights<T>,
    ablation: &AblationConfig,
    cfg: &TrainConfig,
    source: &mut dyn PairSource,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut weights = init;
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for step in 0..cfg.steps {
        let batch: Vec<TrainingPair> = (0..cfg.batch)
            .map(|b| source.pair(step * cfg.batch + b))
            .collect::<Result<_>>()?;
        let loss = train_step(&mut weights, &mut adam, &batch, ablation, cfg.gt_warp, cfg.lr_at(step))?;
        losses.push(loss);
        on_step(step, loss);
        if let Some(dir) = &cfg.checkpoint_dir {
            if (step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps {
                crate::io::save_weights(&weights, &dir.join(format!("checkpoint_{:06}.json", step + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { weights, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Shape;
    use crate::weights::ModelConfig;

    fn stream(n: usize) -> SynthStream {
        SynthStream {
            params: SynthParams {
                num_points: n,
                shape: Shape::GaussianBlobs,
                ..SynthParams::standard(0)
            },
            seed: 5,
            k_local: 8,
            beta: 0.05,
        }
    }

    #[test]
    fn loss_minimum_and_eps_term() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(Tensor::from_fn(&[2, 2], |k| if k % 3 == 0 { 1.0 } else { 0.0 }));
        let gt = CorrespondenceSet::from_pairs(&[(0, 0), (1, 1)], 2, 2).unwrap();
        let tx = t.constant(Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let ty = t.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        let l = matching_loss(&mut t, s, &gt, Some((tx, ty)), &[true, true], &[true, false]).unwrap();
        assert!(t.value(l).item().abs() < 1e-8);

        let s = t.constant(Tensor::zeros(&[1, 1]));
        let gt = CorrespondenceSet::from_pairs(&[(0, 0)], 1, 1).unwrap();
        let l = matching_loss(&mut t, s, &gt, None, &[], &[]).unwrap();
        assert!((t.value(l).item() - 20.723).abs() < 1e-3);
        assert!(matching_loss(&mut t, s, &CorrespondenceSet::default(), None, &[], &[]).is_err());
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let cfg = ModelConfig::new(16, 4, 8).unwrap();
        let init = ModelWeights::<f64>::init(cfg, 1).unwrap();
        let mut w = init.clone();
        let pair = stream(40).pair(0).unwrap();
        let mut adam = Adam::default();
        train_step(&mut w, &mut adam, &[pair], &AblationConfig::FULL, true, 0.0).unwrap();
        assert_eq!(w, init);
    }

    #[test]
    fn training_is_bit_deterministic_in_f64() {
        let cfg = ModelConfig::new(16, 4, 8).unwrap();
        let tc = TrainConfig {
            steps: 3,
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        let run = || {
            let init = ModelWeights::<f64>::init(cfg, 2).unwrap();
            train_loop(init, &AblationConfig::FULL, &tc, &mut stream(40), |_, _| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 3);
    }

    #[test]
    fn one_step_one_record_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::new(16, 4, 8).unwrap();
        let tc = TrainConfig {
            steps: 1,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let out = train_loop(
            ModelWeights::<f32>::init(cfg, 0).unwrap(),
            &AblationConfig::FULL,
            &tc,
            &mut stream(40),
            |s, l| seen.push((s, l)),
        )
        .unwrap();
        assert_eq!(out.losses.len(), 1);
        assert_eq!(seen.len(), 1);
        assert!(dir.path().join("checkpoint_000001.json").exists());
    }

    #[test]
    fn lr_schedule() {
        let tc = TrainConfig { lr: 1.0, ..TrainConfig::default() };
        assert_eq!(tc.lr_at(0), 1.0);
        assert_eq!(tc.lr_at(99), 1.0);
        assert!((tc.lr_at(100) - 0.95).abs() < 1e-15);
        assert!((tc.lr_at(250) - 0.9025).abs() < 1e-15);
    }

    #[test]
    fn vanilla_loss_is_nll_only() {
        let cfg = ModelConfig::new(16, 4, 8).unwrap();
        let w = ModelWeights::<f64>::init(cfg, 3).unwrap();
        let pair = stream(40).pair(1).unwrap();
        let (loss, grads) = loss_and_gradients(&w, &AblationConfig::VANILLA, &[pair], true).unwrap();
        assert!(loss.is_finite());
        assert!(grads["gcnn.h1.0.weight"].data().iter().all(|&g| g == 0.0));
        assert!(grads["proj.weight"].data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn pipeline_loss_gradient_matches_finite_differences() {
        let cfg = ModelConfig::new(16, 3, 4).unwrap();
        let w = ModelWeights::<f64>::init(cfg, 4).unwrap();
        let mut s = stream(12);
        s.k_local = 4;
        s.beta = 0.1;
        let pair = (0..).map(|i| s.pair(i).unwrap()).find(|p| !p.gt.is_empty()).unwrap();
        let pairs = [pair];
        let (_, grads) = loss_and_gradients(&w, &AblationConfig::FULL, &pairs, true).unwrap();
        let h = 1e-6;
        for name in ["proj.weight", "gcnn.h1.1.weight", "consistency.log_sigma", "matchability_y.h3.3.bias"] {
            for k in [0usize, 5] {
                let k = k % w.get(name).unwrap().numel();
                let eval = |delta: f64| {
                    let mut v = w.clone();
                    v.get_mut(name).unwrap().data_mut()[k] += delta;
                    loss_and_gradients(&v, &AblationConfig::FULL, &pairs, true).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[name].data()[k];
                assert!((fd - an).abs() <= 1e-4 * (1.0 + fd.abs()), "{name}[{k}]: {fd} vs {an}");
            }
        }
    }
}
