//! Finite-difference checks of every analytic gradient in the pipeline.
//!
//! Each check compares the analytic derivative of a scalar loss with a central
//! difference (`h = 1e-5`). Probes whose perturbation flips the sign of any
//! leaky-ReLU input, or moves a smooth-L1 residual across its transition, are
//! redrawn: the derivative is undefined there.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{
    discriminator_loss, generator_adversarial_loss, local_adaptation, local_weights, partition_by_range,
    pool_object_feature, target_feature, Discriminator, DiscriminatorConfig, ObjectDescriptor,
};
use crate::bev::{cell_range_band, encode, GridSpec, RangeMask};
use crate::detector::{detection_loss, CellLabel, CellTargets, Detector, NetworkConfig, HEAD_CHANNELS};
use crate::error::Result;
use crate::experiment::simulate;
use crate::geometry::{Box3D, LabeledObject};
use crate::lidar_sim::{LidarSpec, SceneConfig};
use crate::nn::{
    bce_loss, central_difference, relative_error, smooth_l1, ConvSpec, Layer, LayerSpec, PadMode, Tensor,
};
use crate::train::{accumulate_detector_gradients, LossWeights, Sample};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const END_TO_END_PROBES: usize = 20;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_err <= TOLERANCE
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} probes {:>4} skipped {:>3} max rel err {:.3e}",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.probes,
            self.skipped,
            self.max_rel_err
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

/// Loss and the "regime" signature at a point; probes that change the
/// signature are discarded.
type Probe<'a> = dyn FnMut(&Tensor) -> Result<(f64, Vec<bool>)> + 'a;

/// Checks `analytic` against central differences at `count` coordinates of `x`
/// (all coordinates when `count` is `None`).
fn check(
    name: &str,
    f: &mut Probe<'_>,
    x: &Tensor,
    analytic: &Tensor,
    count: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    let (_, base_sig) = f(x)?;
    let mut probe = x.clone();
    let mut result = CheckResult {
        name: name.to_string(),
        probes: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    let indices: Vec<usize> = match count {
        None => (0..x.len()).collect(),
        Some(n) => (0..n).map(|_| rng.gen_range(0..x.len())).collect(),
    };
    let mut err: Option<crate::Error> = None;
    let mut eval = |t: &Tensor| -> (f64, Vec<bool>) {
        match f(t) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                (f64::NAN, Vec::new())
            }
        }
    };
    let mut queue = indices.into_iter();
    let mut redraws = 0;
    while let Some(i) = queue.next() {
        let orig = probe.data()[i];
        let mut crossed = false;
        for d in [STEP, -STEP] {
            probe.data_mut()[i] = orig + d;
            crossed |= eval(&probe).1 != base_sig;
        }
        probe.data_mut()[i] = orig;
        if crossed {
            result.skipped += 1;
            if count.is_some() && redraws < MAX_REDRAWS {
                redraws += 1;
                let j = rng.gen_range(0..x.len());
                queue = std::iter::once(j).chain(queue).collect::<Vec<_>>().into_iter();
            }
            continue;
        }
        let mut scalar = |t: &Tensor| eval(t).0;
        let numeric = central_difference(&mut scalar, &mut probe, i, STEP);
        result.max_rel_err = result.max_rel_err.max(relative_error(analytic.data()[i], numeric));
        if !numeric.is_finite() {
            result.max_rel_err = f64::INFINITY;
        }
        result.probes += 1;
    }
    if let Some(e) = err {
        return Err(e);
    }
    Ok(result)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so no leaky-ReLU probe sits on the kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let m: f64 = rng.gen_range(0.1..1.0);
        *v = if rng.gen_bool(0.5) { m } else { -m };
    }
    t
}

fn leaky_signature(x: &Tensor) -> Vec<bool> {
    x.data().iter().map(|v| *v >= 0.0).collect()
}

/// Input, weight and bias gradients of one layer under a random linear readout.
fn layer_checks(name: &str, spec: LayerSpec, x: &Tensor, rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut layer = Layer::new(spec, rng)?;
    if let Some(b) = layer.bias.as_mut() {
        b.value = random_tensor(b.value.shape(), rng);
    }
    let y = layer.forward(x)?;
    let r = random_tensor(y.shape(), rng);
    let readout = |y: &Tensor| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
    let gx = layer
        .backward(x, &r, true)?
        .expect("input gradient requested");
    let is_leaky = matches!(spec, LayerSpec::LeakyRelu { .. });
    {
        let l = layer.clone();
        let mut f = |t: &Tensor| -> Result<(f64, Vec<bool>)> {
            let sig = if is_leaky { leaky_signature(t) } else { Vec::new() };
            Ok((readout(&l.forward(t)?), sig))
        };
        out.push(check(&format!("{name} input"), &mut f, x, &gx, None, rng)?);
    }
    if let (Some(w), Some(b)) = (layer.weights.clone(), layer.bias.clone()) {
        let mut f = |t: &Tensor| -> Result<(f64, Vec<bool>)> {
            let mut l = layer.clone();
            l.weights.as_mut().unwrap().value = t.clone();
            Ok((readout(&l.forward(x)?), Vec::new()))
        };
        out.push(check(&format!("{name} weights"), &mut f, &w.value, &w.grad, None, rng)?);
        let mut f = |t: &Tensor| -> Result<(f64, Vec<bool>)> {
            let mut l = layer.clone();
            l.bias.as_mut().unwrap().value = t.clone();
            Ok((readout(&l.forward(x)?), Vec::new()))
        };
        out.push(check(&format!("{name} bias"), &mut f, &b.value, &b.grad, None, rng)?);
    }
    Ok(())
}

fn all_layer_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    for pad in [PadMode::Zero, PadMode::Replicate] {
        for stride in [1, 2] {
            let spec = LayerSpec::Conv2d(ConvSpec::new(3, 4, 3, stride).with_pad_mode(pad));
            let x = random_tensor(&[3, 7, 6], rng);
            layer_checks(&format!("conv3x3 {pad:?} stride {stride}"), spec, &x, rng, out)?;
        }
    }
    let x = random_tensor(&[5, 4, 3], rng);
    layer_checks("conv1x1", LayerSpec::Conv2d(ConvSpec::new(5, 7, 1, 1)), &x, rng, out)?;
    let x = off_kink(&[2, 5, 4], rng);
    layer_checks("leaky relu", LayerSpec::leaky_relu(), &x, rng, out)?;
    let x = random_tensor(&[2, 5, 4], rng).map(|v| 3.0 * v);
    layer_checks("sigmoid", LayerSpec::Sigmoid, &x, rng, out)?;
    layer_checks("tanh", LayerSpec::Tanh, &x, rng, out)?;
    let x = random_tensor(&[6], rng);
    layer_checks(
        "linear",
        LayerSpec::Linear {
            in_features: 6,
            out_features: 4,
        },
        &x,
        rng,
        out,
    )?;
    Ok(())
}

fn loss_checks(rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let p = Tensor::uniform(&[12], 0.05, 0.95, rng);
    let labels = Tensor::from_vec(&[12], (0..12).map(|i| (i % 2) as f64).collect())?;
    let (_, g) = bce_loss(&p, &labels)?;
    let mut f = |t: &Tensor| Ok((bce_loss(t, &labels)?.0, Vec::new()));
    out.push(check("bce", &mut f, &p, &g, None, rng)?);

    let target = random_tensor(&[12], rng);
    let mut pred = target.clone();
    for (v, k) in pred.data_mut().iter_mut().zip(0..) {
        let m: f64 = rng.gen_range(0.05..0.8) + if k % 2 == 0 { 0.0 } else { 0.6 };
        *v += if rng.gen_bool(0.5) { m } else { -m };
    }
    let (_, g) = smooth_l1(&pred, &target)?;
    let mut f = |t: &Tensor| {
        let sig = t.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs() < 1.0).collect();
        Ok((smooth_l1(t, &target)?.0, sig))
    };
    out.push(check("smooth l1", &mut f, &pred, &g, None, rng)?);
    Ok(())
}

/// Residual-regime signature of the regression channels at positive cells.
fn regression_signature(head: &Tensor, targets: &CellTargets) -> Vec<bool> {
    let plane = targets.rows * targets.cols;
    let mut sig = Vec::new();
    for (cell, label) in targets.labels.iter().enumerate() {
        if *label == CellLabel::Positive {
            for ch in 0..6 {
                sig.push((head.data()[(1 + ch) * plane + cell] - targets.regression[cell][ch]).abs() < 1.0);
            }
        }
    }
    sig
}

fn small_grid() -> GridSpec {
    GridSpec {
        x_extent: [0.0, 70.4],
        y_extent: [-17.6, 17.6],
        cell_size: 2.2,
        ..GridSpec::default()
    }
}

fn small_scene_config() -> SceneConfig {
    SceneConfig {
        car_count: [3, 5],
        y_extent: [-17.6, 17.6],
        ..SceneConfig::default()
    }
}

/// Two simulated scenes on a coarse grid, with at least one near and one far car.
fn small_batch(seed: u64, grid: &GridSpec, net: &NetworkConfig) -> Result<Vec<Sample>> {
    let lidar = LidarSpec::sparse_32ch();
    let mut out = Vec::new();
    let mut k = 0u64;
    while out.len() < 2 {
        let (spec, pc) = simulate(seed.wrapping_mul(1000).wrapping_add(k), &small_scene_config(), &lidar)?;
        k += 1;
        let (far, near) = partition_by_range(&spec.objects, 40.0);
        if far.is_empty() || near.is_empty() {
            continue;
        }
        out.push(Sample::new(encode(&pc, grid)?, spec.objects, grid, net)?);
    }
    Ok(out)
}

fn detection_loss_check(samples: &[Sample], rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let t = &samples[0].targets;
    let head = random_tensor(&[HEAD_CHANNELS, t.rows, t.cols], rng).map(|v| 0.8 * v);
    let (_, g) = detection_loss(&head, t, 2.0)?;
    let mut f = |x: &Tensor| Ok((detection_loss(x, t, 2.0)?.0.total, regression_signature(x, t)));
    out.push(check("detection loss", &mut f, &head, &g, None, rng)?);
    Ok(())
}

fn discriminator_checks(mask: &RangeMask, rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let c = 6;
    let x = random_tensor(&[c, mask.rows, mask.cols], rng);
    let cfg = DiscriminatorConfig {
        hidden: 5,
        ..DiscriminatorConfig::default()
    };
    let mut disc = Discriminator::new(c, cfg, rng.gen())?;
    for p in disc.params_mut() {
        if p.value.shape().len() == 1 {
            p.value = random_tensor(p.value.shape(), rng).map(|v| 0.3 * v);
        }
    }
    type LossFn = fn(&Tensor, &RangeMask) -> Result<(f64, Tensor)>;
    for (name, loss) in [
        ("discriminator loss", discriminator_loss as LossFn),
        ("generator adversarial loss", generator_adversarial_loss as LossFn),
    ] {
        let (p, trace) = disc.forward_traced(&x)?;
        let (_, gp) = loss(&p, mask)?;
        let gx = disc.backward_input(&trace, &gp)?;
        let d = disc.clone();
        let mut f = |t: &Tensor| {
            let (p, tr) = d.forward_traced(t)?;
            Ok((loss(&p, mask)?.0, d.stack.kink_signature(&tr)))
        };
        out.push(check(&format!("{name} wrt feature"), &mut f, &x, &gx, None, rng)?);
    }

    disc.zero_grad();
    let (p, trace) = disc.forward_traced(&x)?;
    let (_, gp) = discriminator_loss(&p, mask)?;
    disc.backward(&trace, &gp)?;
    let n_params = disc.stack.params().count();
    for k in 0..n_params {
        let param = disc.stack.params().nth(k).expect("in range").clone();
        let mut f = |t: &Tensor| {
            let mut d = disc.clone();
            d.stack.params_mut().nth(k).expect("in range").value = t.clone();
            let (p, tr) = d.forward_traced(&x)?;
            Ok((discriminator_loss(&p, mask)?.0, d.stack.kink_signature(&tr)))
        };
        out.push(check(&format!("discriminator param {k}"), &mut f, &param.value, &param.grad, Some(20), rng)?);
    }
    Ok(())
}

/// Far objects with their targets computed once at `aligned`, as the gradient stop prescribes.
struct FrozenTargets {
    far: Vec<(usize, Box3D, Vec<f64>)>,
}

impl FrozenTargets {
    fn new(aligned: &[&Tensor], samples: &[Sample], grid: &GridSpec, stride: usize, threshold: f64) -> Result<Self> {
        let mut near_desc = Vec::new();
        let mut near_feat = Vec::new();
        let mut far_boxes = Vec::new();
        for (s, (a, sample)) in aligned.iter().zip(samples).enumerate() {
            let (f_idx, n_idx) = partition_by_range(&sample.objects, threshold);
            for i in n_idx {
                let b = &sample.objects[i].bbox;
                near_desc.push(ObjectDescriptor::of(b));
                near_feat.push(pool_object_feature(a, b, grid, stride)?.feature);
            }
            far_boxes.extend(f_idx.into_iter().map(|i| (s, sample.objects[i].bbox)));
        }
        let mut far = Vec::new();
        for (s, b) in far_boxes {
            if let Some(w) = local_weights(&ObjectDescriptor::of(&b), &near_desc) {
                far.push((s, b, target_feature(&w, &near_feat)?));
            }
        }
        Ok(FrozenTargets { far })
    }

    /// Local loss (averaged over scenes) against the frozen targets.
    fn loss(&self, aligned: &[&Tensor], grid: &GridSpec, stride: usize) -> Result<f64> {
        let mut l = 0.0;
        for (s, b, t) in &self.far {
            let f = pool_object_feature(aligned[*s], b, grid, stride)?.feature;
            l += f.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(l / aligned.len() as f64)
    }
}

fn local_checks(samples: &[Sample], grid: &GridSpec, rng: &mut ChaCha8Rng, out: &mut Vec<CheckResult>) -> Result<()> {
    let stride = 4;
    let (rows, cols) = grid.strided_dims(stride)?;
    let aligned: Vec<Tensor> = (0..samples.len()).map(|_| random_tensor(&[6, rows, cols], rng)).collect();
    let refs: Vec<&Tensor> = aligned.iter().collect();
    let objects: Vec<&[LabeledObject]> = samples.iter().map(|s| s.objects.as_slice()).collect();
    let (_, grads) = local_adaptation(&refs, &objects, grid, stride, 40.0)?;
    let frozen = FrozenTargets::new(&refs, samples, grid, stride, 40.0)?;
    for s in 0..samples.len() {
        let mut f = |t: &Tensor| {
            let mut a: Vec<&Tensor> = refs.clone();
            a[s] = t;
            Ok((frozen.loss(&a, grid, stride)?, Vec::new()))
        };
        out.push(check(&format!("local loss wrt scene {s} feature"), &mut f, &aligned[s], &grads[s], None, rng)?);
    }
    Ok(())
}

/// Central differences of the full training objective on randomly drawn detector parameters.
fn end_to_end(samples: &[Sample], grid: &GridSpec, net: &NetworkConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut det = Detector::new(net.clone(), seed)?;
    for (_, p) in det.named_params_mut() {
        if p.value.shape().len() == 1 {
            p.value = random_tensor(p.value.shape(), rng).map(|v| 0.1 * v);
        }
    }
    let mask = cell_range_band(grid, det.stride(), 40.0, 3.0)?;
    let disc = Discriminator::new(det.config.aligned_channels(), DiscriminatorConfig::default(), rng.gen())?;
    let w = LossWeights {
        lambda_adv: 0.1,
        lambda_local: 0.5,
        threshold: 40.0,
    };
    let refs: Vec<&Sample> = samples.iter().collect();

    let traces = samples.iter().map(|s| det.forward(&s.image)).collect::<Result<Vec<_>>>()?;
    det.zero_grad();
    accumulate_detector_gradients(&mut det, &traces, &refs, Some(&disc), &mask, grid, &w)?;
    let aligned: Vec<&Tensor> = traces.iter().map(|t| &t.aligned).collect();
    let frozen = FrozenTargets::new(&aligned, samples, grid, det.stride(), w.threshold)?;

    let objective = |d: &Detector| -> Result<(f64, Vec<bool>)> {
        let mut total = 0.0;
        let mut sig = Vec::new();
        let traces = samples.iter().map(|s| d.forward(&s.image)).collect::<Result<Vec<_>>>()?;
        let b = samples.len() as f64;
        for (t, s) in traces.iter().zip(samples) {
            total += detection_loss(&t.head, &s.targets, d.config.regression_weight)?.0.total / b;
            let (p, dtr) = disc.forward_traced(&t.aligned)?;
            total += w.lambda_adv * generator_adversarial_loss(&p, &mask)?.0 / b;
            sig.extend(d.kink_signature(t));
            sig.extend(disc.stack.kink_signature(&dtr));
            sig.extend(regression_signature(&t.head, &s.targets));
        }
        let aligned: Vec<&Tensor> = traces.iter().map(|t| &t.aligned).collect();
        total += w.lambda_local * frozen.loss(&aligned, grid, d.stride())?;
        Ok((total, sig))
    };

    // Flatten every parameter into one vector so probes are drawn uniformly.
    let named = det.named_params();
    let sizes: Vec<usize> = named.iter().map(|(_, p)| p.len()).collect();
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for (_, p) in &named {
        values.extend_from_slice(p.value.data());
        grads.extend_from_slice(p.grad.data());
    }
    let n = values.len();
    let x = Tensor::from_vec(&[n], values)?;
    let g = Tensor::from_vec(&[n], grads)?;
    let mut f = |t: &Tensor| {
        let mut d = det.clone();
        let mut off = 0;
        for ((_, p), len) in d.named_params_mut().into_iter().zip(&sizes) {
            p.value.data_mut().copy_from_slice(&t.data()[off..off + len]);
            off += len;
        }
        objective(&d)
    };
    check("end-to-end detector parameters", &mut f, &x, &g, Some(END_TO_END_PROBES), rng)
}

/// Runs every check for one seed.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    all_layer_checks(&mut rng, &mut checks)?;
    loss_checks(&mut rng, &mut checks)?;

    let grid = small_grid();
    let net = NetworkConfig::default();
    let samples = small_batch(seed, &grid, &net)?;
    let mask = cell_range_band(&grid, net.stride(), 40.0, 3.0)?;
    detection_loss_check(&samples, &mut rng, &mut checks)?;
    discriminator_checks(&mask, &mut rng, &mut checks)?;
    local_checks(&samples, &grid, &mut rng, &mut checks)?;
    checks.push(end_to_end(&samples, &grid, &net, seed, &mut rng)?);
    Ok(SuiteReport { seed, checks })
}
