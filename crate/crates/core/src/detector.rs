//! Single-class BEV detector split at the aligned layer.
//!
//! ```text
//! pseudo-image -> [adapted stack] -> aligned feature -> [shared stack] -> [head] -> 7 x H' x W'
//! ```
//!
//! Adaptation losses act on the aligned feature, so their gradients can only
//! reach the adapted stack. The detection loss reaches every parameter.

use std::f64::consts::PI;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{GridSpec, PSEUDO_IMAGE_CHANNELS};
use crate::checkpoint::{load_into, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{nms, Detection};
use crate::geometry::{wrap_angle, Box3D, LabeledObject};
use crate::lidar_sim::{NOMINAL_CAR_SIZE, SENSOR_HEIGHT};
use crate::nn::{
    bce_loss_subset, sigmoid, smooth_l1, ConvSpec, LayerSpec, PadMode, Parameter, Stack, StackTrace, Tensor,
};

/// Head channel layout.
pub const HEAD_CHANNELS: usize = 7;
pub const CH_OBJ: usize = 0;
pub const CH_DX: usize = 1;
pub const CH_DY: usize = 2;
pub const CH_DL: usize = 3;
pub const CH_DW: usize = 4;
pub const CH_SIN: usize = 5;
pub const CH_COS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Output channels of the adapted convolutions; the last is the aligned width.
    pub adapted_channels: Vec<usize>,
    /// Stride of each adapted convolution; their product is the aligned stride.
    pub adapted_strides: Vec<usize>,
    pub shared_layers: usize,
    pub leaky_slope: f64,
    /// Tanh instead of leaky ReLU after the last adapted convolution, so the
    /// aligned features are bounded.
    pub bounded_aligned: bool,
    pub pad_mode: PadMode,
    /// Anchor (length, width), meters.
    pub anchor: [f64; 2],
    pub regression_weight: f64,
    /// Ground height used to place decoded boxes vertically.
    pub ground_z: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            adapted_channels: vec![16, 32, 32],
            adapted_strides: vec![1, 2, 2],
            shared_layers: 2,
            leaky_slope: 0.1,
            bounded_aligned: true,
            pad_mode: PadMode::Replicate,
            anchor: [NOMINAL_CAR_SIZE[0], NOMINAL_CAR_SIZE[1]],
            regression_weight: 2.0,
            ground_z: -SENSOR_HEIGHT,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapted_channels.is_empty() || self.adapted_channels.len() != self.adapted_strides.len() {
            return Err(Error::Config("adapted_channels and adapted_strides must be non-empty and equal length".into()));
        }
        if self.adapted_channels.contains(&0) || self.adapted_strides.contains(&0) {
            return Err(Error::Config("channels and strides must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.anchor.iter().any(|a| !(*a > 0.0)) || self.regression_weight < 0.0 {
            return Err(Error::Config(format!("invalid network config {self:?}")));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.adapted_strides.iter().product()
    }

    pub fn aligned_channels(&self) -> usize {
        *self.adapted_channels.last().expect("validated non-empty")
    }

    fn act(&self) -> LayerSpec {
        LayerSpec::LeakyRelu { slope: self.leaky_slope }
    }

    pub fn adapted_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut c_in = PSEUDO_IMAGE_CHANNELS;
        for (&c, &s) in self.adapted_channels.iter().zip(&self.adapted_strides) {
            specs.push(LayerSpec::Conv2d(ConvSpec::new(c_in, c, 3, s).with_pad_mode(self.pad_mode)));
            specs.push(self.act());
            c_in = c;
        }
        if self.bounded_aligned {
            *specs.last_mut().expect("at least one adapted layer") = LayerSpec::Tanh;
        }
        specs
    }

    pub fn shared_specs(&self) -> Vec<LayerSpec> {
        let c = self.aligned_channels();
        (0..self.shared_layers)
            .flat_map(|_| [LayerSpec::Conv2d(ConvSpec::new(c, c, 3, 1).with_pad_mode(self.pad_mode)), self.act()])
            .collect()
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::Conv2d(ConvSpec::new(self.aligned_channels(), HEAD_CHANNELS, 1, 1))]
    }
}

/// Everything a forward pass leaves behind for the losses and backward.
#[derive(Debug, Clone)]
pub struct DetectorTrace {
    pub aligned: Tensor,
    pub head: Tensor,
    adapted: StackTrace,
    shared: StackTrace,
    head_trace: StackTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: NetworkConfig,
    pub adapted: Stack,
    pub shared: Stack,
    pub head: Stack,
}

impl Detector {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapted = Stack::new(&config.adapted_specs(), &mut rng)?;
        let shared = Stack::new(&config.shared_specs(), &mut rng)?;
        let head = Stack::new(&config.head_specs(), &mut rng)?;
        Ok(Detector {
            config,
            adapted,
            shared,
            head,
        })
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    fn check_input(&self, img: &Tensor) -> Result<()> {
        let (c, h, w) = img.dims3()?;
        let s = self.stride();
        if c != PSEUDO_IMAGE_CHANNELS || h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "pseudo-image {:?} incompatible with {PSEUDO_IMAGE_CHANNELS} channels and stride {s}",
                img.shape()
            )));
        }
        Ok(())
    }

    /// Aligned feature only, without caches.
    pub fn aligned_features(&self, img: &Tensor) -> Result<Tensor> {
        self.check_input(img)?;
        self.adapted.forward(img)
    }

    pub fn forward_adapted(&self, img: &Tensor) -> Result<(Tensor, StackTrace)> {
        self.check_input(img)?;
        self.adapted.forward_traced(img)
    }

    pub fn forward(&self, img: &Tensor) -> Result<DetectorTrace> {
        self.check_input(img)?;
        let (aligned, adapted) = self.adapted.forward_traced(img)?;
        let (shared_out, shared) = self.shared.forward_traced(&aligned)?;
        let (head, head_trace) = self.head.forward_traced(&shared_out)?;
        Ok(DetectorTrace {
            aligned,
            head,
            adapted,
            shared,
            head_trace,
        })
    }

    /// Inference-only forward returning the head output.
    pub fn predict(&self, img: &Tensor) -> Result<Tensor> {
        self.check_input(img)?;
        let aligned = self.adapted.forward(img)?;
        let shared = self.shared.forward(&aligned)?;
        self.head.forward(&shared)
    }

    /// Accumulates gradients for `grad_head` at the head output plus an optional
    /// extra gradient injected at the aligned layer.
    pub fn backward(&mut self, trace: &DetectorTrace, grad_head: &Tensor, grad_aligned_extra: Option<&Tensor>) -> Result<()> {
        let g_shared = self
            .head
            .backward(&trace.head_trace, grad_head, true)?
            .ok_or_else(|| Error::Usage("head produced no input gradient".into()))?;
        let mut g_aligned = self
            .shared
            .backward(&trace.shared, &g_shared, true)?
            .ok_or_else(|| Error::Usage("shared stack produced no input gradient".into()))?;
        if let Some(extra) = grad_aligned_extra {
            g_aligned.add_scaled(extra, 1.0)?;
        }
        self.adapted.backward(&trace.adapted, &g_aligned, false)?;
        Ok(())
    }

    /// Backpropagates a gradient given at the aligned layer into the adapted stack only.
    pub fn backward_adapted(&mut self, trace: &StackTrace, grad_aligned: &Tensor) -> Result<()> {
        self.adapted.backward(trace, grad_aligned, false)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.adapted.zero_grad();
        self.shared.zero_grad();
        self.head.zero_grad();
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.adapted
            .params_mut()
            .chain(self.shared.params_mut())
            .chain(self.head.params_mut())
    }

    /// `(name, parameter)` pairs in a stable order, e.g. `adapted.0.weight`.
    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (prefix, stack) in [("adapted", &self.adapted), ("shared", &self.shared), ("head", &self.head)] {
            named_stack_params(prefix, stack, &mut out);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out = Vec::new();
        for (prefix, stack) in [
            ("adapted", &mut self.adapted),
            ("shared", &mut self.shared),
            ("head", &mut self.head),
        ] {
            for (i, layer) in stack.layers.iter_mut().enumerate() {
                if let Some(w) = layer.weights.as_mut() {
                    out.push((format!("{prefix}.{i}.weight"), w));
                }
                if let Some(b) = layer.bias.as_mut() {
                    out.push((format!("{prefix}.{i}.bias"), b));
                }
            }
        }
        out
    }

    /// Parameters plus the network config as checkpoint metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let metadata = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            metadata,
            entries: self.named_params().into_iter().map(|(n, p)| (n, p.value.clone())).collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: NetworkConfig = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("network config: {e}")))?;
        let mut det = Detector::new(config, 0)?;
        load_into(ckpt, det.named_params_mut())?;
        Ok(det)
    }

    /// Pre-activation sign pattern of the last traced forward pass.
    pub fn kink_signature(&self, trace: &DetectorTrace) -> Vec<bool> {
        let mut s = self.adapted.kink_signature(&trace.adapted);
        s.extend(self.shared.kink_signature(&trace.shared));
        s
    }
}

pub(crate) fn named_stack_params<'a>(prefix: &str, stack: &'a Stack, out: &mut Vec<(String, &'a Parameter)>) {
    for (i, layer) in stack.layers.iter().enumerate() {
        if let Some(w) = layer.weights.as_ref() {
            out.push((format!("{prefix}.{i}.weight"), w));
        }
        if let Some(b) = layer.bias.as_ref() {
            out.push((format!("{prefix}.{i}.bias"), b));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLabel {
    Negative,
    Ignore,
    Positive,
}

/// Per aligned-cell training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<CellLabel>,
    /// `(dx, dy, dl, dw, sin, cos)` for positive cells, zero elsewhere.
    pub regression: Vec<[f64; 6]>,
    /// Ground-truth objects that found no free cell.
    pub dropped: usize,
}

impl CellTargets {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, l)| **l == CellLabel::Positive).map(|(i, _)| i)
    }
}

/// Heading is encoded modulo pi: a box and its 180-degree turn are the same footprint.
pub fn encode_heading(yaw: f64) -> (f64, f64) {
    (2.0 * yaw).sin_cos()
}

pub fn decode_heading(sin: f64, cos: f64) -> f64 {
    wrap_angle(0.5 * sin.atan2(cos))
}

/// Regression target of `b` relative to strided cell `(i, j)`.
pub fn encode_box(b: &Box3D, grid: &GridSpec, stride: usize, i: usize, j: usize, anchor: [f64; 2]) -> [f64; 6] {
    let cs = grid.cell_size * stride as f64;
    let (cx, cy) = grid.cell_center(i, j, stride);
    let (s, c) = encode_heading(b.yaw);
    [
        (b.center[0] - cx) / cs,
        (b.center[1] - cy) / cs,
        (b.length() / anchor[0]).ln(),
        (b.width() / anchor[1]).ln(),
        s,
        c,
    ]
}

/// Marks the cell holding each ground-truth BEV center positive; cells next to
/// a center (8-neighborhood) that are not positive are ignored; the rest are negative.
///
/// When two centers share a cell the one nearer the cell center keeps it and
/// the other moves to its nearest free neighbor, or is dropped with a warning.
pub fn assign_targets(gt: &[LabeledObject], grid: &GridSpec, config: &NetworkConfig) -> Result<CellTargets> {
    let stride = config.stride();
    let (rows, cols) = grid.strided_dims(stride)?;
    let mut labels = vec![CellLabel::Negative; rows * cols];
    let mut regression = vec![[0.0; 6]; rows * cols];
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; rows * cols];
    let mut home: Vec<Option<(usize, usize)>> = Vec::with_capacity(gt.len());

    for (k, o) in gt.iter().enumerate() {
        let (x, y) = (o.bbox.center[0], o.bbox.center[1]);
        let cell = grid.locate(x, y, stride);
        home.push(cell);
        if let Some((i, j)) = cell {
            let (cx, cy) = grid.cell_center(i, j, stride);
            let d = (x - cx).hypot(y - cy);
            let idx = i * cols + j;
            if owner[idx].is_none_or(|(_, od)| d < od) {
                owner[idx] = Some((k, d));
            }
        }
    }
    for (idx, own) in owner.iter().enumerate() {
        if let Some((k, _)) = own {
            labels[idx] = CellLabel::Positive;
            regression[idx] = encode_box(&gt[*k].bbox, grid, stride, idx / cols, idx % cols, config.anchor);
        }
    }
    let mut dropped = 0;
    for (k, o) in gt.iter().enumerate() {
        let Some((i, j)) = home[k] else {
            warn!("ground-truth center ({:.2}, {:.2}) lies outside the grid", o.bbox.center[0], o.bbox.center[1]);
            dropped += 1;
            continue;
        };
        if owner[i * cols + j].is_some_and(|(owner_k, _)| owner_k == k) {
            continue;
        }
        let (x, y) = (o.bbox.center[0], o.bbox.center[1]);
        let mut best: Option<(usize, f64)> = None;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                    continue;
                }
                let idx = ni as usize * cols + nj as usize;
                if labels[idx] == CellLabel::Positive {
                    continue;
                }
                let (cx, cy) = grid.cell_center(ni as usize, nj as usize, stride);
                let d = (x - cx).hypot(y - cy);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((idx, d));
                }
            }
        }
        match best {
            Some((idx, _)) => {
                labels[idx] = CellLabel::Positive;
                regression[idx] = encode_box(&o.bbox, grid, stride, idx / cols, idx % cols, config.anchor);
            }
            None => {
                warn!("no free cell for ground-truth object at ({x:.2}, {y:.2}); dropped");
                dropped += 1;
            }
        }
    }
    for &(i, j) in home.iter().flatten() {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                    continue;
                }
                let idx = ni as usize * cols + nj as usize;
                if labels[idx] == CellLabel::Negative {
                    labels[idx] = CellLabel::Ignore;
                }
            }
        }
    }
    Ok(CellTargets {
        rows,
        cols,
        labels,
        regression,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLoss {
    pub total: f64,
    pub objectness: f64,
    pub regression: f64,
}

/// Objectness BCE over positive and negative cells plus `regression_weight` times
/// the mean smooth-L1 of the six regression channels over positive cells.
/// Returns the loss and its gradient with respect to the head output.
pub fn detection_loss(head: &Tensor, targets: &CellTargets, regression_weight: f64) -> Result<(DetectionLoss, Tensor)> {
    let (c, h, w) = head.dims3()?;
    if c != HEAD_CHANNELS || h != targets.rows || w != targets.cols {
        return Err(Error::Config(format!(
            "head shape {:?} does not match targets {}x{}",
            head.shape(),
            targets.rows,
            targets.cols
        )));
    }
    let plane = h * w;
    let logits = &head.data()[..plane];
    let probs = Tensor::from_vec(&[plane], logits.iter().map(|&z| sigmoid(z)).collect())?;
    let labels: Vec<Option<f64>> = targets
        .labels
        .iter()
        .map(|l| match l {
            CellLabel::Positive => Some(1.0),
            CellLabel::Negative => Some(0.0),
            CellLabel::Ignore => None,
        })
        .collect();
    let (obj_loss, grad_p) = bce_loss_subset(&probs, &labels)?;

    let mut grad = Tensor::zeros(head.shape());
    {
        let g = grad.data_mut();
        for (k, (gp, p)) in grad_p.data().iter().zip(probs.data()).enumerate() {
            g[k] = gp * p * (1.0 - p);
        }
    }

    let pos: Vec<usize> = targets.positives().collect();
    let mut reg_loss = 0.0;
    if !pos.is_empty() {
        let mut pred = Vec::with_capacity(pos.len() * 6);
        let mut tgt = Vec::with_capacity(pos.len() * 6);
        for &cell in &pos {
            for ch in 0..6 {
                pred.push(head.data()[(1 + ch) * plane + cell]);
                tgt.push(targets.regression[cell][ch]);
            }
        }
        let n = pred.len();
        let (l, gr) = smooth_l1(&Tensor::from_vec(&[n], pred)?, &Tensor::from_vec(&[n], tgt)?)?;
        reg_loss = l;
        let g = grad.data_mut();
        for (pi, &cell) in pos.iter().enumerate() {
            for ch in 0..6 {
                g[(1 + ch) * plane + cell] = regression_weight * gr.data()[pi * 6 + ch];
            }
        }
    }
    Ok((
        DetectionLoss {
            total: obj_loss + regression_weight * reg_loss,
            objectness: obj_loss,
            regression: reg_loss,
        },
        grad,
    ))
}

/// Decodes every cell scoring above `score_thresh` and applies rotated-IoU NMS.
pub fn decode_and_nms(
    head: &Tensor,
    grid: &GridSpec,
    config: &NetworkConfig,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&score_thresh) || !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Input("score and IoU thresholds must lie in (0, 1)".into()));
    }
    let stride = config.stride();
    let (rows, cols) = grid.strided_dims(stride)?;
    if head.shape() != [HEAD_CHANNELS, rows, cols] {
        return Err(Error::Config(format!("head shape {:?} does not match grid", head.shape())));
    }
    let plane = rows * cols;
    let d = head.data();
    let cs = grid.cell_size * stride as f64;
    let [_, _, nominal_h] = NOMINAL_CAR_SIZE;
    let mut dets = Vec::new();
    for cell in 0..plane {
        let score = sigmoid(d[cell]);
        if score <= score_thresh {
            continue;
        }
        let (i, j) = (cell / cols, cell % cols);
        let (cx, cy) = grid.cell_center(i, j, stride);
        let x = (cx + d[CH_DX * plane + cell] * cs).clamp(grid.x_min(), grid.x_max());
        let y = (cy + d[CH_DY * plane + cell] * cs).clamp(grid.y_min(), grid.y_max());
        let l = config.anchor[0] * d[CH_DL * plane + cell].clamp(-3.0, 3.0).exp();
        let w = config.anchor[1] * d[CH_DW * plane + cell].clamp(-3.0, 3.0).exp();
        let yaw = decode_heading(d[CH_SIN * plane + cell], d[CH_COS * plane + cell]);
        let bbox = Box3D::new([x, y, config.ground_z + nominal_h / 2.0], [l, w, nominal_h], yaw)?;
        dets.push(Detection { bbox, score });
    }
    Ok(nms(dets, iou_thresh))
}

/// A head output that reproduces `targets` exactly (logits at the BCE clamp).
pub fn perfect_head(targets: &CellTargets) -> Tensor {
    let plane = targets.rows * targets.cols;
    let mut head = Tensor::zeros(&[HEAD_CHANNELS, targets.rows, targets.cols]);
    let logit = ((1.0 - 1e-7) / 1e-7f64).ln() + 1.0;
    let d = head.data_mut();
    for cell in 0..plane {
        d[cell] = if targets.labels[cell] == CellLabel::Positive { logit } else { -logit };
        if targets.labels[cell] == CellLabel::Positive {
            for ch in 0..6 {
                d[(1 + ch) * plane + cell] = targets.regression[cell][ch];
            }
        }
    }
    head
}

/// Shortest angular distance between two headings modulo pi.
pub fn heading_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec {
            cell_size: 0.8,
            ..GridSpec::default()
        }
    }

    fn car(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> LabeledObject {
        LabeledObject::car(Box3D::new([x, y, -0.93], [l, w, 1.6], yaw).unwrap())
    }

    #[test]
    fn default_architecture_shapes() {
        let det = Detector::new(NetworkConfig::default(), 0).unwrap();
        assert_eq!(det.stride(), 4);
        let img = Tensor::zeros(&[3, 128, 144]);
        let t = det.forward(&img).unwrap();
        assert_eq!(t.aligned.shape(), &[32, 32, 36]);
        assert_eq!(t.head.shape(), &[7, 32, 36]);
        // zero image and zero biases
        assert_eq!(t.aligned.max_abs(), 0.0);
    }

    #[test]
    fn wrong_input_is_config_error() {
        let det = Detector::new(NetworkConfig::default(), 0).unwrap();
        assert!(matches!(det.forward(&Tensor::zeros(&[2, 128, 144])), Err(Error::Config(_))));
        assert!(matches!(det.forward(&Tensor::zeros(&[3, 130, 144])), Err(Error::Config(_))));
    }

    #[test]
    fn no_ground_truth_all_negative() {
        let t = assign_targets(&[], &small_grid(), &NetworkConfig::default()).unwrap();
        assert!(t.labels.iter().all(|l| *l == CellLabel::Negative));
    }

    #[test]
    fn centered_anchor_sized_target() {
        let g = small_grid();
        let (cx, cy) = g.cell_center(6, 11, 4);
        let t = assign_targets(&[car(cx, cy, 4.0, 1.8, 0.0)], &g, &NetworkConfig::default()).unwrap();
        let idx = 6 * t.cols + 11;
        assert_eq!(t.labels[idx], CellLabel::Positive);
        let r = t.regression[idx];
        for (v, e) in r.iter().zip([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]) {
            assert!((v - e).abs() < 1e-12, "{r:?}");
        }
        assert_eq!(t.labels[idx + 1], CellLabel::Ignore);
        assert_eq!(t.labels[idx + t.cols + 1], CellLabel::Ignore);
        assert_eq!(t.labels[idx + 2], CellLabel::Negative);
    }

    #[test]
    fn offset_target_in_cell_units() {
        // 0.8 m grid at stride 4: 3.2 m cells; 1.6 m off center is half a cell.
        let g = small_grid();
        let b = Box3D::new([0.0, 0.0, 0.0], [4.0, 1.8, 1.6], 0.0).unwrap();
        let (cx, cy) = g.cell_center(3, 3, 4);
        let shifted = Box3D { center: [cx + 1.6, cy, 0.0], ..b };
        assert!((encode_box(&shifted, &g, 4, 3, 3, [4.0, 1.8])[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn collisions_spill_to_free_cell() {
        let g = small_grid();
        let (cx, cy) = g.cell_center(5, 5, 4);
        let gt = [car(cx + 0.2, cy, 4.0, 1.8, 0.0), car(cx + 1.0, cy + 0.9, 4.0, 1.8, 0.0)];
        let t = assign_targets(&gt, &g, &NetworkConfig::default()).unwrap();
        assert_eq!(t.positives().count(), 2);
        assert_eq!(t.dropped, 0);
        // nearest keeps the home cell
        let home = 5 * t.cols + 5;
        assert_eq!(t.labels[home], CellLabel::Positive);
        assert!((t.regression[home][0] - 0.2 / 3.2).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_reference_values() {
        let g = small_grid();
        let cfg = NetworkConfig::default();
        let (cx, cy) = g.cell_center(6, 11, 4);
        let gt = [car(cx + 0.5, cy - 0.3, 4.3, 1.7, 0.4)];
        let t = assign_targets(&gt, &g, &cfg).unwrap();
        let (l, _) = detection_loss(&perfect_head(&t), &t, 2.0).unwrap();
        assert!(l.total <= 1e-3, "{l:?}");

        let none = assign_targets(&[], &g, &cfg).unwrap();
        let (l, _) = detection_loss(&Tensor::zeros(&[7, none.rows, none.cols]), &none, 2.0).unwrap();
        assert!((l.total - std::f64::consts::LN_2).abs() < 1e-12);

        let mut head = perfect_head(&t);
        let plane = t.rows * t.cols;
        let pos = t.positives().next().unwrap();
        for ch in 1..7 {
            head.data_mut()[ch * plane + pos] += 0.5;
        }
        let (l, _) = detection_loss(&head, &t, 2.0).unwrap();
        assert!((l.regression - 0.125).abs() < 1e-12);
        assert!((l.total - l.objectness - 2.0 * 0.125).abs() < 1e-12);
    }

    #[test]
    fn decode_recovers_ground_truth() {
        let g = GridSpec::default();
        let cfg = NetworkConfig::default();
        let gt = [car(12.3, -4.1, 4.4, 1.9, 2.5), car(45.0, 10.0, 3.7, 1.6, -0.7), car(63.1, -20.2, 4.1, 1.8, 1.2)];
        let t = assign_targets(&gt, &g, &cfg).unwrap();
        let dets = decode_and_nms(&perfect_head(&t), &g, &cfg, 0.5, 0.5).unwrap();
        assert_eq!(dets.len(), 3);
        for o in &gt {
            let d = dets
                .iter()
                .min_by(|a, b| {
                    let da = (a.bbox.center[0] - o.bbox.center[0]).hypot(a.bbox.center[1] - o.bbox.center[1]);
                    let db = (b.bbox.center[0] - o.bbox.center[0]).hypot(b.bbox.center[1] - o.bbox.center[1]);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert!((d.bbox.center[0] - o.bbox.center[0]).abs() < 1e-9);
            assert!((d.bbox.center[1] - o.bbox.center[1]).abs() < 1e-9);
            assert!((d.bbox.length() - o.bbox.length()).abs() < 1e-6);
            assert!((d.bbox.width() - o.bbox.width()).abs() < 1e-6);
            assert!(heading_distance(d.bbox.yaw, o.bbox.yaw) < 1e-6);
            assert!(d.bbox.yaw > -PI && d.bbox.yaw <= PI);
        }
    }

    #[test]
    fn checkpoint_reload_is_bit_exact() {
        let det = Detector::new(NetworkConfig::default(), 7).unwrap();
        let bytes = det.to_checkpoint().unwrap().to_bytes();
        let back = Detector::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, det);
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), bytes);
        let other = Detector::new(NetworkConfig { shared_layers: 1, ..NetworkConfig::default() }, 7).unwrap();
        let mut ck = other.to_checkpoint().unwrap();
        ck.metadata = serde_json::to_string(&NetworkConfig::default()).unwrap();
        assert!(matches!(Detector::from_checkpoint(&ck), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn decode_thresholds() {
        let g = GridSpec::default();
        let cfg = NetworkConfig::default();
        let head = Tensor::filled(&[7, 32, 36], -5.0);
        assert!(decode_and_nms(&head, &g, &cfg, 0.5, 0.5).unwrap().is_empty());
        assert!(decode_and_nms(&head, &g, &cfg, 1.5, 0.5).is_err());
    }
}
