//! Cross-range adaptation at the aligned layer.
//!
//! Global: a fully-convolutional patch discriminator tells near cells (label 1)
//! from far cells (label 0); the adapted layers are trained to make far cells
//! look near. Local: each far object's pooled feature is pulled toward a
//! similarity-weighted average of near object features, which are held fixed.

use std::f64::consts::PI;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{box_to_cells, GridSpec, RangeBand, RangeMask};
use crate::checkpoint::{load_into, Checkpoint};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D, LabeledObject};
use crate::nn::{bce_loss_subset, ConvSpec, LayerSpec, PadMode, Parameter, Stack, StackTrace, Tensor};

/// Splits object indices into (far, near); ties at the threshold go to near.
pub fn partition_by_range(objects: &[LabeledObject], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    (0..objects.len()).partition(|&i| objects[i].range() > threshold)
}

/// Width, height and yaw of an object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectDescriptor {
    pub w: f64,
    pub h: f64,
    pub r: f64,
}

impl ObjectDescriptor {
    pub fn of(b: &Box3D) -> Self {
        ObjectDescriptor {
            w: b.width(),
            h: b.height(),
            r: b.yaw,
        }
    }

    /// L1 distance with the yaw difference wrapped into [0, pi].
    pub fn distance(&self, other: &ObjectDescriptor) -> f64 {
        (self.w - other.w).abs() + (self.h - other.h).abs() + wrap_angle(self.r - other.r).abs().min(PI)
    }
}

/// Softmin of descriptor distances from `target` to each of `near`.
/// `None` when `near` is empty.
pub fn local_weights(target: &ObjectDescriptor, near: &[ObjectDescriptor]) -> Option<Vec<f64>> {
    if near.is_empty() {
        return None;
    }
    let d: Vec<f64> = near.iter().map(|o| target.distance(o)).collect();
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|v| (dmin - v).exp()).collect();
    let z: f64 = e.iter().sum();
    Some(e.into_iter().map(|v| v / z).collect())
}

/// Weighted average of near-object features. The result is a plain vector and
/// carries no gradient path back to its inputs.
pub fn target_feature(weights: &[f64], features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != features.len() || features.is_empty() {
        return Err(Error::Usage(format!(
            "{} weights for {} features",
            weights.len(),
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Usage("features differ in length".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("weights sum to {wsum}, not 1")));
    }
    let mut out = vec![0.0; dim];
    for (w, f) in weights.iter().zip(features) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Channelwise mean of the aligned feature over an object's footprint cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub feature: Vec<f64>,
    pub cells: Vec<usize>,
}

pub fn pool_object_feature(aligned: &Tensor, b: &Box3D, grid: &GridSpec, stride: usize) -> Result<PooledFeature> {
    let (c, h, w) = aligned.dims3()?;
    if grid.strided_dims(stride)? != (h, w) {
        return Err(Error::Config(format!(
            "aligned feature {:?} does not match grid at stride {stride}",
            aligned.shape()
        )));
    }
    let cells = box_to_cells(b, grid, stride)?;
    let n = cells.len() as f64;
    let feature = (0..c)
        .map(|ch| {
            let plane = aligned.channel(ch);
            cells.iter().map(|&k| plane[k]).sum::<f64>() / n
        })
        .collect();
    Ok(PooledFeature { feature, cells })
}

/// Adds the gradient of a pooled feature back onto its cells, split evenly.
pub fn scatter_pooled_grad(grad_aligned: &mut Tensor, cells: &[usize], grad: &[f64]) -> Result<()> {
    let (c, _, _) = grad_aligned.dims3()?;
    if grad.len() != c || cells.is_empty() {
        return Err(Error::Usage("pooled gradient does not match the feature map".into()));
    }
    let n = cells.len() as f64;
    for (ch, g) in grad.iter().enumerate() {
        let plane = grad_aligned.channel_mut(ch);
        for &k in cells {
            plane[k] += g / n;
        }
    }
    Ok(())
}

/// Sum over far objects of the squared distance to their targets, with the
/// gradient on each far feature. Targets are constants.
pub fn local_loss(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (f, t) in pairs {
        if f.len() != t.len() {
            return Err(Error::Usage("feature and target differ in length".into()));
        }
        let g: Vec<f64> = f.iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect();
        loss += f.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Local adaptation over a batch: near objects from every scene form the
/// reference set. Returns the loss averaged over scenes and the gradient with
/// respect to each scene's aligned feature.
pub fn local_adaptation(
    aligned: &[&Tensor],
    objects: &[&[LabeledObject]],
    grid: &GridSpec,
    stride: usize,
    threshold: f64,
) -> Result<(f64, Vec<Tensor>)> {
    if aligned.len() != objects.len() {
        return Err(Error::Usage("one object list per feature map required".into()));
    }
    let mut grads: Vec<Tensor> = aligned.iter().map(|a| Tensor::zeros(a.shape())).collect();
    if aligned.is_empty() {
        return Ok((0.0, grads));
    }
    let mut near_desc = Vec::new();
    let mut near_feat = Vec::new();
    let mut far = Vec::new();
    for (s, (feat, objs)) in aligned.iter().zip(objects).enumerate() {
        let (f_idx, n_idx) = partition_by_range(objs, threshold);
        for i in n_idx {
            match pool_object_feature(feat, &objs[i].bbox, grid, stride) {
                Ok(p) => {
                    near_desc.push(ObjectDescriptor::of(&objs[i].bbox));
                    near_feat.push(p.feature);
                }
                Err(Error::EmptyRegion) => warn!("near object outside the grid skipped"),
                Err(e) => return Err(e),
            }
        }
        for i in f_idx {
            match pool_object_feature(feat, &objs[i].bbox, grid, stride) {
                Ok(p) => far.push((s, ObjectDescriptor::of(&objs[i].bbox), p)),
                Err(Error::EmptyRegion) => warn!("far object outside the grid skipped"),
                Err(e) => return Err(e),
            }
        }
    }
    let mut pairs = Vec::with_capacity(far.len());
    let mut owners = Vec::with_capacity(far.len());
    for (s, desc, pooled) in far {
        let Some(w) = local_weights(&desc, &near_desc) else {
            continue;
        };
        let target = target_feature(&w, &near_feat)?;
        pairs.push((pooled.feature, target));
        owners.push((s, pooled.cells));
    }
    let (loss, pooled_grads) = local_loss(&pairs)?;
    let scale = 1.0 / aligned.len() as f64;
    for ((s, cells), g) in owners.iter().zip(pooled_grads) {
        let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
        scatter_pooled_grad(&mut grads[*s], cells, &g)?;
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    pub layers: usize,
    pub leaky_slope: f64,
    pub pad_mode: PadMode,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            hidden: 32,
            layers: 3,
            leaky_slope: 0.1,
            pad_mode: PadMode::Replicate,
        }
    }
}

/// Patch discriminator: 3x3 convolutions at stride 1 ending in a per-cell probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub in_channels: usize,
    pub stack: Stack,
}

impl Discriminator {
    pub fn new(in_channels: usize, config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || in_channels == 0 {
            return Err(Error::Config("discriminator needs at least one layer and channel".into()));
        }
        let mut specs = Vec::new();
        let mut c = in_channels;
        for k in 0..config.layers {
            let out = if k + 1 == config.layers { 1 } else { config.hidden };
            specs.push(LayerSpec::Conv2d(ConvSpec::new(c, out, 3, 1).with_pad_mode(config.pad_mode)));
            specs.push(if k + 1 == config.layers {
                LayerSpec::Sigmoid
            } else {
                LayerSpec::LeakyRelu {
                    slope: config.leaky_slope,
                }
            });
            c = out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Discriminator {
            stack: Stack::new(&specs, &mut rng)?,
            config,
            in_channels,
        })
    }

    pub fn forward(&self, aligned: &Tensor) -> Result<Tensor> {
        self.stack.forward(aligned)
    }

    pub fn forward_traced(&self, aligned: &Tensor) -> Result<(Tensor, StackTrace)> {
        self.stack.forward_traced(aligned)
    }

    /// Accumulates discriminator gradients; the input gradient is not computed.
    pub fn backward(&mut self, trace: &StackTrace, grad_probs: &Tensor) -> Result<()> {
        self.stack.backward(trace, grad_probs, false)?;
        Ok(())
    }

    /// Gradient with respect to the input feature, discriminator held fixed.
    pub fn backward_input(&self, trace: &StackTrace, grad_probs: &Tensor) -> Result<Tensor> {
        self.stack.backward_input(trace, grad_probs)
    }

    pub fn zero_grad(&mut self) {
        self.stack.zero_grad();
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.stack.params_mut()
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        crate::detector::named_stack_params("disc", &self.stack, &mut out);
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let metadata = serde_json::to_string(&(self.in_channels, &self.config)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            metadata,
            entries: self.named_params().into_iter().map(|(n, p)| (n, p.value.clone())).collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (in_channels, config): (usize, DiscriminatorConfig) = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("discriminator config: {e}")))?;
        let mut d = Discriminator::new(in_channels, config, 0)?;
        let mut named = Vec::new();
        for (i, layer) in d.stack.layers.iter_mut().enumerate() {
            if let Some(w) = layer.weights.as_mut() {
                named.push((format!("disc.{i}.weight"), w));
            }
            if let Some(b) = layer.bias.as_mut() {
                named.push((format!("disc.{i}.bias"), b));
            }
        }
        load_into(ckpt, named)?;
        Ok(d)
    }
}

fn check_mask(probs: &Tensor, mask: &RangeMask) -> Result<()> {
    let (c, h, w) = probs.dims3()?;
    if c != 1 || h != mask.rows || w != mask.cols {
        return Err(Error::Config(format!(
            "probability map {:?} does not match mask {}x{}",
            probs.shape(),
            mask.rows,
            mask.cols
        )));
    }
    Ok(())
}

/// BCE of the discriminator: near cells labelled 1, far cells 0, excluded cells
/// left out. Mean over included cells; gradient with respect to `probs`.
pub fn discriminator_loss(probs: &Tensor, mask: &RangeMask) -> Result<(f64, Tensor)> {
    check_mask(probs, mask)?;
    let labels: Vec<Option<f64>> = mask
        .bands
        .iter()
        .map(|b| match b {
            RangeBand::Near => Some(1.0),
            RangeBand::Far => Some(0.0),
            RangeBand::ExcludedNear => None,
        })
        .collect();
    bce_loss_subset(probs, &labels)
}

/// Flipped-label BCE on far cells only: far features should be scored as near.
pub fn generator_adversarial_loss(probs: &Tensor, mask: &RangeMask) -> Result<(f64, Tensor)> {
    check_mask(probs, mask)?;
    let labels: Vec<Option<f64>> = mask
        .bands
        .iter()
        .map(|b| (*b == RangeBand::Far).then_some(1.0))
        .collect();
    bce_loss_subset(probs, &labels)
}
