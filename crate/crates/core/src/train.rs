//! Alternating adversarial training and evaluation of a detector.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{discriminator_loss, generator_adversarial_loss, local_adaptation, Discriminator, DiscriminatorConfig};
use crate::bev::{cell_range_band, GridSpec, RangeMask};
use crate::detector::{assign_targets, decode_and_nms, detection_loss, CellTargets, Detector, DetectorTrace, NetworkConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_scenes, Band, EvalResult, SceneResult};
use crate::geometry::LabeledObject;
use crate::nn::{Adam, AdamConfig, Tensor};

/// One encoded scene with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub objects: Vec<LabeledObject>,
    pub targets: CellTargets,
}

impl Sample {
    pub fn new(image: Tensor, objects: Vec<LabeledObject>, grid: &GridSpec, network: &NetworkConfig) -> Result<Self> {
        let targets = assign_targets(&objects, grid, network)?;
        Ok(Sample { image, objects, targets })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lambda_adv: f64,
    pub lambda_local: f64,
    /// Discriminator updates per detector update.
    pub d_updates: usize,
    /// Near/far boundary, meters.
    pub threshold: f64,
    /// Cells closer than this are left out of the adversarial losses.
    pub exclusion: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 3000,
            lambda_adv: 0.01,
            lambda_local: 0.01,
            d_updates: 1,
            threshold: 40.0,
            exclusion: 3.0,
            seed: 0,
            optimizer: AdamConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.d_updates == 0 {
            return Err(Error::Config("batch_size and d_updates must be >= 1".into()));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_local >= 0.0) || !self.lambda_adv.is_finite() || !self.lambda_local.is_finite() {
            return Err(Error::Config("lambda_adv and lambda_local must be finite and >= 0".into()));
        }
        if !(self.threshold > 0.0) || !(self.exclusion >= 0.0) || self.exclusion >= self.threshold {
            return Err(Error::Config("need 0 <= exclusion < threshold".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("optimizer.lr must be > 0".into()));
        }
        Ok(())
    }

    /// Turns off the global and/or local term, as the ablation flags do.
    pub fn ablate(mut self, no_global: bool, no_local: bool) -> Self {
        if no_global {
            self.lambda_adv = 0.0;
        }
        if no_local {
            self.lambda_local = 0.0;
        }
        self
    }
}

/// Seed streams derived from the run seed. Batches and detector initialization
/// do not depend on whether adaptation is enabled.
pub fn detector_seed(seed: u64) -> u64 {
    seed
}

pub fn batch_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_ba7c_0000_0001
}

pub fn discriminator_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_d15c_0000_0002
}

/// Epoch-wise shuffled batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Usage("cannot sample batches from an empty training set".into()));
        }
        Ok(BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch_size,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub l_d: f64,
    pub l_c: f64,
    pub l_adv: f64,
    pub l_l: f64,
    pub total: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,L_D,L_C,L_adv,L_l,total";

pub fn train_log_csv(rows: &[StepLosses]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e},{:e}", r.step, r.l_d, r.l_c, r.l_adv, r.l_l, r.total);
    }
    s
}

fn check_finite(v: f64, what: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            step,
        })
    }
}

/// Mixing weights of the adaptation terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_local: f64,
    pub threshold: f64,
}

/// Accumulates into `detector` the gradient of
/// `L_D + lambda_adv * L_adv + lambda_local * L_l`, each averaged over the batch,
/// and returns `(L_D, L_adv, L_l)`. The discriminator is only read.
/// A zero weight skips its term entirely.
pub fn accumulate_detector_gradients(
    detector: &mut Detector,
    traces: &[DetectorTrace],
    samples: &[&Sample],
    discriminator: Option<&Discriminator>,
    mask: &RangeMask,
    grid: &GridSpec,
    w: &LossWeights,
) -> Result<(f64, f64, f64)> {
    if traces.len() != samples.len() || traces.is_empty() {
        return Err(Error::Usage("one trace per sample required".into()));
    }
    let b = traces.len() as f64;
    let mut extra: Vec<Option<Tensor>> = vec![None; traces.len()];
    let mut l_adv = 0.0;
    if w.lambda_adv > 0.0 {
        let disc = discriminator.ok_or_else(|| Error::Usage("global term enabled without a discriminator".into()))?;
        let scale = w.lambda_adv / b;
        for (t, e) in traces.iter().zip(extra.iter_mut()) {
            let (probs, dtrace) = disc.forward_traced(&t.aligned)?;
            let (l, g) = generator_adversarial_loss(&probs, mask)?;
            let mut ga = disc.backward_input(&dtrace, &g)?;
            ga.data_mut().iter_mut().for_each(|v| *v *= scale);
            *e = Some(ga);
            l_adv += l / b;
        }
    }
    let mut l_l = 0.0;
    if w.lambda_local > 0.0 {
        let aligned: Vec<&Tensor> = traces.iter().map(|t| &t.aligned).collect();
        let objects: Vec<&[LabeledObject]> = samples.iter().map(|s| s.objects.as_slice()).collect();
        let (l, grads) = local_adaptation(&aligned, &objects, grid, detector.stride(), w.threshold)?;
        l_l = l;
        for (e, mut g) in extra.iter_mut().zip(grads) {
            match e {
                Some(t) => t.add_scaled(&g, w.lambda_local)?,
                None => {
                    g.data_mut().iter_mut().for_each(|v| *v *= w.lambda_local);
                    *e = Some(g);
                }
            }
        }
    }
    let mut l_d = 0.0;
    for ((t, s), e) in traces.iter().zip(samples).zip(&extra) {
        let (l, mut gh) = detection_loss(&t.head, &s.targets, detector.config.regression_weight)?;
        gh.data_mut().iter_mut().for_each(|v| *v /= b);
        detector.backward(t, &gh, e.as_ref())?;
        l_d += l.total / b;
    }
    Ok((l_d, l_adv, l_l))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub grid: GridSpec,
    pub detector: Detector,
    /// Present only when the global term is enabled.
    pub discriminator: Option<Discriminator>,
    mask: RangeMask,
    sampler: BatchSampler,
    det_opt: Adam,
    disc_opt: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, network: NetworkConfig, grid: GridSpec, n_train: usize) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let detector = Detector::new(network, detector_seed(config.seed))?;
        let stride = detector.stride();
        let mask = cell_range_band(&grid, stride, config.threshold, config.exclusion)?;
        let discriminator = if config.lambda_adv > 0.0 {
            Some(Discriminator::new(
                detector.config.aligned_channels(),
                config.discriminator.clone(),
                discriminator_seed(config.seed),
            )?)
        } else {
            None
        };
        Ok(Trainer {
            sampler: BatchSampler::new(n_train, config.batch_size, batch_seed(config.seed))?,
            det_opt: Adam::new(config.optimizer),
            disc_opt: Adam::new(config.optimizer),
            config,
            grid,
            detector,
            discriminator,
            mask,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn mask(&self) -> &RangeMask {
        &self.mask
    }

    /// Draws the next batch and performs one discriminator phase and one detector phase.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepLosses> {
        let batch = self.sampler.next_batch();
        let step = self.step + 1;
        let b = batch.len() as f64;
        let traces = batch
            .iter()
            .map(|&i| self.detector.forward(&data[i].image))
            .collect::<Result<Vec<_>>>()?;

        let mut l_c = 0.0;
        if let Some(disc) = self.discriminator.as_mut() {
            for _ in 0..self.config.d_updates {
                disc.zero_grad();
                l_c = 0.0;
                for t in &traces {
                    let (probs, dtrace) = disc.forward_traced(&t.aligned)?;
                    let (l, mut g) = discriminator_loss(&probs, &self.mask)?;
                    g.data_mut().iter_mut().for_each(|v| *v /= b);
                    disc.backward(&dtrace, &g)?;
                    l_c += l / b;
                }
                check_finite(l_c, "L_C", step)?;
                self.disc_opt.step(disc.params_mut())?;
            }
        }

        let samples: Vec<&Sample> = batch.iter().map(|&i| &data[i]).collect();
        let weights = LossWeights {
            lambda_adv: self.config.lambda_adv,
            lambda_local: self.config.lambda_local,
            threshold: self.config.threshold,
        };
        self.detector.zero_grad();
        let (l_d, l_adv, l_l) = accumulate_detector_gradients(
            &mut self.detector,
            &traces,
            &samples,
            self.discriminator.as_ref(),
            &self.mask,
            &self.grid,
            &weights,
        )?;
        let total = l_d + self.config.lambda_adv * l_adv + self.config.lambda_local * l_l;
        for (v, what) in [(l_d, "L_D"), (l_adv, "L_adv"), (l_l, "L_l"), (total, "total")] {
            check_finite(v, what, step)?;
        }
        self.det_opt.step(self.detector.params_mut())?;
        self.step = step;
        let losses = StepLosses {
            step,
            l_d,
            l_c,
            l_adv,
            l_l,
            total,
        };
        debug!("{losses:?}");
        Ok(losses)
    }

    /// Runs `config.steps` steps, logging every `log_every` steps (0 = never).
    pub fn run(&mut self, data: &[Sample], log_every: usize) -> Result<Vec<StepLosses>> {
        let mut rows = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let r = self.train_step(data)?;
            if log_every > 0 && r.step % log_every == 0 {
                info!(
                    "step {} L_D {:.4} L_C {:.4} L_adv {:.4} L_l {:.4}",
                    r.step, r.l_d, r.l_c, r.l_adv, r.l_l
                );
            }
            rows.push(r);
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bands: Vec<Band>,
    pub ious: Vec<f64>,
    /// Detections at or below this score are discarded before NMS.
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bands: Band::defaults(),
            ious: vec![0.5, 0.7],
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() || self.ious.is_empty() {
            return Err(Error::Config("eval needs at least one band and one IoU threshold".into()));
        }
        if self.ious.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("IoU thresholds must lie in (0, 1]".into()));
        }
        for b in &self.bands {
            if !(b.lo >= 0.0 && b.hi > b.lo) {
                return Err(Error::Config(format!("band {} has an empty range", b.name)));
            }
        }
        Ok(())
    }
}

/// Runs the detector over a split and scores it by band.
pub fn evaluate_detector(det: &Detector, data: &[Sample], grid: &GridSpec, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let scenes = data
        .iter()
        .map(|s| {
            let head = det.predict(&s.image)?;
            Ok(SceneResult {
                detections: decode_and_nms(&head, grid, &det.config, cfg.score_threshold, cfg.nms_iou)?,
                ground_truth: s.objects.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_scenes(&scenes, &cfg.bands, &cfg.ious)
}
