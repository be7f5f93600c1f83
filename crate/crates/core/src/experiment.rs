//! Synthetic benchmarks held in memory, paired-seed runs and the feature probe.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapt::{discriminator_loss, Discriminator, DiscriminatorConfig};
use crate::bev::{cell_range_band, encode, GridSpec, RangeBand};
use crate::detector::{Detector, NetworkConfig};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::lidar_sim::{generate_scene, ray_cast, LidarSpec, PointCloud, SceneConfig, SceneSpec};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::train::{evaluate_detector, train_log_csv, EvalConfig, Sample, StepLosses, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub lidar: LidarSpec,
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub data_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            lidar: LidarSpec::dense_64ch(),
            scene: SceneConfig::default(),
            train_scenes: 300,
            eval_scenes: 100,
            data_seed: 0,
        }
    }
}

/// Seed of scene `index` in a split; train and eval draw from disjoint streams.
pub fn scene_seed(data_seed: u64, split: &str, index: usize) -> u64 {
    let stream: u64 = match split {
        "train" => 1,
        "eval" => 2,
        _ => 3,
    };
    data_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream << 40)
        .wrapping_add(index as u64)
}

pub fn simulate(seed: u64, scene: &SceneConfig, lidar: &LidarSpec) -> Result<(SceneSpec, PointCloud)> {
    let spec = generate_scene(seed, scene)?;
    let pc = ray_cast(&spec, lidar, seed)?;
    Ok((spec, pc))
}

/// Simulates and encodes `n` scenes of a split.
pub fn build_split(
    bench: &BenchmarkConfig,
    split: &str,
    n: usize,
    grid: &GridSpec,
    network: &NetworkConfig,
) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let (spec, pc) = simulate(scene_seed(bench.data_seed, split, i), &bench.scene, &bench.lidar)?;
            Sample::new(encode(&pc, grid)?, spec.objects, grid, network)
        })
        .collect()
}

/// Baseline and the three ablations of the adaptation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Local,
    Global,
    LocalGlobal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Local, Variant::Global, Variant::LocalGlobal];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Local => "w L",
            Variant::Global => "w G",
            Variant::LocalGlobal => "w L+G",
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let (no_global, no_local) = match self {
            Variant::Baseline => (true, true),
            Variant::Local => (true, false),
            Variant::Global => (false, true),
            Variant::LocalGlobal => (false, false),
        };
        cfg.clone().ablate(no_global, no_local)
    }
}

pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub detector: Detector,
    pub log: Vec<StepLosses>,
    pub eval: EvalResult,
}

impl RunOutcome {
    pub fn log_csv(&self) -> String {
        train_log_csv(&self.log)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    variant: Variant,
    seed: u64,
    train_cfg: &TrainConfig,
    network: &NetworkConfig,
    grid: &GridSpec,
    eval_cfg: &EvalConfig,
    train: &[Sample],
    eval: &[Sample],
) -> Result<RunOutcome> {
    let cfg = TrainConfig {
        seed,
        ..variant.apply(train_cfg)
    };
    let mut trainer = Trainer::new(cfg, network.clone(), *grid, train.len())?;
    let log_every = (train_cfg.steps / 10).max(1);
    info!("training {} seed {seed}", variant.name());
    let log = trainer.run(train, log_every)?;
    let eval = evaluate_detector(&trainer.detector, eval, grid, eval_cfg)?;
    Ok(RunOutcome {
        variant,
        seed,
        detector: trainer.detector,
        log,
        eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub threshold: f64,
    pub exclusion: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 600,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            threshold: 40.0,
            exclusion: 3.0,
        }
    }
}

/// Near/far accuracy of a probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub near_recall: f64,
    pub far_recall: f64,
}

impl ProbeResult {
    /// Mean of per-class recall; 0.5 is chance whatever the class balance.
    pub fn balanced_accuracy(&self) -> f64 {
        0.5 * (self.near_recall + self.far_recall)
    }
}

/// Trains a fresh discriminator on the frozen aligned features of `train` and
/// scores it on the features of `eval` with a 0.5 decision threshold.
pub fn probe_features(detector: &Detector, grid: &GridSpec, train: &[Sample], eval: &[Sample], cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() || eval.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Usage("probe needs non-empty splits and batch size".into()));
    }
    let mask = cell_range_band(grid, detector.stride(), cfg.threshold, cfg.exclusion)?;
    let feats = |s: &[Sample]| s.iter().map(|x| detector.aligned_features(&x.image)).collect::<Result<Vec<Tensor>>>();
    let train_f = feats(train)?;
    let eval_f = feats(eval)?;
    let mut probe = Discriminator::new(detector.config.aligned_channels(), DiscriminatorConfig::default(), cfg.seed)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut sampler = crate::train::BatchSampler::new(train_f.len(), cfg.batch_size, cfg.seed ^ 0x9b0b)?;
    let b = cfg.batch_size as f64;
    for _ in 0..cfg.steps {
        probe.zero_grad();
        for i in sampler.next_batch() {
            let (p, tr) = probe.forward_traced(&train_f[i])?;
            let (_, mut g) = discriminator_loss(&p, &mask)?;
            g.data_mut().iter_mut().for_each(|v| *v /= b);
            probe.backward(&tr, &g)?;
        }
        opt.step(probe.params_mut())?;
    }
    let (mut near_ok, mut near_n, mut far_ok, mut far_n) = (0usize, 0usize, 0usize, 0usize);
    for f in &eval_f {
        let p = probe.forward(f)?;
        for (v, band) in p.data().iter().zip(&mask.bands) {
            match band {
                RangeBand::Near => {
                    near_n += 1;
                    near_ok += usize::from(*v > 0.5);
                }
                RangeBand::Far => {
                    far_n += 1;
                    far_ok += usize::from(*v <= 0.5);
                }
                RangeBand::ExcludedNear => {}
            }
        }
    }
    if near_n == 0 || far_n == 0 {
        return Err(Error::Usage("probe grid lacks near or far cells".into()));
    }
    Ok(ProbeResult {
        near_recall: near_ok as f64 / near_n as f64,
        far_recall: far_ok as f64 / far_n as f64,
    })
}

/// AP of every (variant, seed) pair for a fixed band and IoU.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonTable {
    /// (variant, band, iou) -> AP per seed, in seed order; `None` = no ground truth.
    pub ap: BTreeMap<(Variant, String, u64), Vec<Option<f64>>>,
    pub seeds: Vec<u64>,
}

fn iou_key(iou: f64) -> u64 {
    (iou * 1000.0).round() as u64
}

impl ComparisonTable {
    pub fn record(&mut self, outcome: &RunOutcome) {
        if !self.seeds.contains(&outcome.seed) {
            self.seeds.push(outcome.seed);
        }
        for m in &outcome.eval.metrics {
            self.ap
                .entry((outcome.variant, m.band.clone(), iou_key(m.iou)))
                .or_default()
                .push(m.ap);
        }
    }

    pub fn values(&self, variant: Variant, band: &str, iou: f64) -> Vec<Option<f64>> {
        self.ap.get(&(variant, band.to_string(), iou_key(iou))).cloned().unwrap_or_default()
    }

    /// Per-seed differences `a - b`, skipping seeds where either AP is undefined.
    pub fn paired_differences(&self, a: Variant, b: Variant, band: &str, iou: f64) -> Vec<f64> {
        self.values(a, band, iou)
            .into_iter()
            .zip(self.values(b, band, iou))
            .filter_map(|(x, y)| Some(x? - y?))
            .collect()
    }

    pub fn mean(&self, variant: Variant, band: &str, iou: f64) -> Option<f64> {
        let v: Vec<f64> = self.values(variant, band, iou).into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// CSV with one row per (variant, band, iou): mean AP and per-seed values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,band,iou,mean_ap");
        for seed in &self.seeds {
            s.push_str(&format!(",seed_{seed}"));
        }
        s.push('\n');
        for ((variant, band, iou), vals) in &self.ap {
            let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
            s.push_str(&format!(
                "{},{},{},{}",
                variant.name(),
                band,
                *iou as f64 / 1000.0,
                fmt(self.mean(*variant, band, *iou as f64 / 1000.0))
            ));
            for v in vals {
                s.push_str(&format!(",{}", fmt(*v)));
            }
            s.push('\n');
        }
        s
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
