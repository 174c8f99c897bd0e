//! Adam, MSE and the epoch loop that synthesizes pairs on the fly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::HdrImage;
use crate::neuralnet::checkpoint::save_checkpoint;
use crate::neuralnet::tensor::stack_images;
use crate::neuralnet::{build_network, ArchitectureConfig, Mode, Network, Param, Tensor};
use crate::rng::{derive_seed, SeededRng};
use crate::synthpipe::{generate_pair, sample_seed, SamplePair, TRAIN_PATCH_SIZE};

pub const ADAM_LEARNING_RATE: f64 = 0.002;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

pub const LOSS_LOG: &str = "loss.csv";
pub const CONFIG_ECHO: &str = "train_config.json";

// Independent random streams derived from the master seed.
const INIT_STREAM: u64 = 0x1D17;
const SHUFFLE_STREAM: u64 = 0x5AFF;
const PAIR_STREAM: u64 = 0x9A12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: ADAM_LEARNING_RATE,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// First and second moment estimates mirroring the parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Param], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step(params: &mut [Param], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() || params.iter().zip(&state.m).any(|(p, m)| p.value.len() != m.len()) {
        return Err(Error::Input("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.value.len() {
            let g = p.grad[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = learning_rate * (mi / c1) / ((vi / c2).sqrt() + epsilon);
            p.value[i] = (p.value[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Mean squared error and its gradient `2 (pred - target) / count`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Input(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0f64;
    let grad: Vec<f32> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            sum += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(pred.shape(), grad)?))
}

/// Network plus optimizer; one call to [`Trainer::step`] is one iteration.
pub struct Trainer {
    pub network: Network,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(network: Network, config: AdamConfig) -> Self {
        let adam = AdamState::new(network.params(), config);
        Self { network, adam }
    }

    /// Forward in training mode, MSE, backward, Adam. Returns the loss
    /// before the update.
    pub fn step(&mut self, input: &Tensor, target: &Tensor) -> Result<f64> {
        let pred = self.network.forward(input, Mode::Train)?;
        let (loss, grad) = mse_loss(&pred, target)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss became {loss} at step {}", self.adam.step + 1)));
        }
        self.network.zero_grad();
        self.network.backward(&grad)?;
        adam_step(self.network.params_mut(), &mut self.adam)?;
        Ok(loss)
    }
}

/// Batches `(input, target)` pairs as float tensors in `[0, 1]`.
pub fn pairs_to_tensors(pairs: &[&SamplePair]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<_> = pairs.iter().map(|p| p.input.to_float()).collect();
    let targets: Vec<_> = pairs.iter().map(|p| p.target.to_float()).collect();
    Ok((
        stack_images(&inputs.iter().collect::<Vec<_>>())?,
        stack_images(&targets.iter().collect::<Vec<_>>())?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub width_scale: f64,
    pub use_global_encoder: bool,
    /// Save a checkpoint every this many epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
    pub patch_size: usize,
    /// Synthesize one fixed pair per image up front instead of fresh pairs
    /// every epoch.
    pub precompute: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            iterations_per_epoch: 51,
            batch_size: 16,
            seed: 0,
            width_scale: 1.0,
            use_global_encoder: true,
            checkpoint_every: 50,
            patch_size: TRAIN_PATCH_SIZE,
            precompute: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self) -> ArchitectureConfig {
        ArchitectureConfig {
            use_global_encoder: self.use_global_encoder,
            width_scale: self.width_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().local_widths()?;
        if self.epochs == 0 || self.iterations_per_epoch == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "epochs, iterations, batch size and checkpoint cadence must be positive".into(),
            ));
        }
        if self.patch_size < 16 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of 16",
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based.
    pub epoch: usize,
    /// 1-based within the epoch.
    pub iter: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub network: Network,
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Corpus indices for each iteration of an epoch: a fresh permutation cut
/// into consecutive batches, so no image appears twice in one epoch.
pub fn epoch_batches(corpus_len: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus_len).collect();
    SeededRng::from_seed(derive_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64)).shuffle(&mut order);
    order
        .chunks(cfg.batch_size)
        .take(cfg.iterations_per_epoch)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains from scratch. When `out_dir` is given, the loss log, the config
/// echo and checkpoints named `ckpt_epoch{N}.nncp` are written there.
/// `on_step` sees every logged loss.
pub fn train(
    corpus: &[(String, HdrImage)],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if corpus.len() < cfg.batch_size {
        log::warn!(
            "corpus has {} images, fewer than the batch size {}; using smaller batches",
            corpus.len(),
            cfg.batch_size
        );
    }
    let mut init_rng = SeededRng::from_seed(derive_seed(cfg.seed, INIT_STREAM));
    let network = build_network(cfg.architecture(), &mut init_rng)?;
    let mut trainer = Trainer::new(network, cfg.adam);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_ECHO), serde_json::to_string_pretty(cfg)? + "\n")?;
    }
    let fixed: Option<Vec<SamplePair>> = if cfg.precompute {
        let pairs: Result<Vec<_>> = corpus
            .iter()
            .enumerate()
            .map(|(i, (name, img))| generate_pair(img, name, sample_seed(cfg.seed ^ PAIR_STREAM, i as u64), cfg.patch_size))
            .collect();
        Some(pairs?)
    } else {
        None
    };

    let mut log = String::from("epoch,iter,loss\n");
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut sample_counter = 0u64;
    for epoch in 1..=cfg.epochs {
        for (it, batch) in epoch_batches(corpus.len(), cfg, epoch).iter().enumerate() {
            let fresh;
            let pairs: Vec<&SamplePair> = match &fixed {
                Some(all) => batch.iter().map(|&i| &all[i]).collect(),
                None => {
                    let first = sample_counter;
                    sample_counter += batch.len() as u64;
                    fresh = synthesize_batch(corpus, batch, cfg, first)?;
                    fresh.iter().collect()
                }
            };
            let (x, y) = pairs_to_tensors(&pairs)?;
            let loss = trainer.step(&x, &y)?;
            let record = LossRecord {
                epoch,
                iter: it + 1,
                loss,
            };
            writeln!(log, "{},{},{}", record.epoch, record.iter, record.loss).expect("string write");
            on_step(&record);
            losses.push(record);
        }
        if let Some(dir) = out_dir {
            std::fs::write(dir.join(LOSS_LOG), &log)?;
            if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
                let meta = serde_json::json!({
                    "epoch": epoch,
                    "seed": cfg.seed,
                    "steps": trainer.adam.step,
                });
                let path = dir.join(format!("ckpt_epoch{epoch}.nncp"));
                std::fs::write(&path, save_checkpoint(&trainer.network, meta)?)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        network: trainer.network,
        losses,
        checkpoints,
    })
}

/// One pair per selected image, seeded by its position in the overall
/// sample sequence.
fn synthesize_batch(
    corpus: &[(String, HdrImage)],
    batch: &[usize],
    cfg: &TrainConfig,
    first_sample: u64,
) -> Result<Vec<SamplePair>> {
    let job = |(k, &i): (usize, &usize)| {
        let (name, img) = &corpus[i];
        let seed = sample_seed(cfg.seed ^ PAIR_STREAM, first_sample + k as u64);
        generate_pair(img, name, seed, cfg.patch_size)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().enumerate().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().enumerate().map(job).collect()
    }
}
