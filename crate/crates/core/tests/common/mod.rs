//! Checks shared by the acceptance run and the focused test files. Each check
//! returns a one-line summary on success and a description of the first
//! violation on failure.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rangeadapt::adapt::{
    discriminator_loss, generator_adversarial_loss, local_adaptation, local_weights, partition_by_range, target_feature,
    Discriminator, DiscriminatorConfig, ObjectDescriptor,
};
use rangeadapt::bev::{box_to_cells, cell_range_band, encode, GridSpec, RangeBand, RangeMask};
use rangeadapt::checkpoint::Checkpoint;
use rangeadapt::data_io::{decode_points, encode_points, parse_label_line, write_label_line, DatasetManifest, LabelRecord};
use rangeadapt::detector::{detection_loss, Detector, NetworkConfig};
use rangeadapt::eval::{average_precision, rotated_bev_iou, Band, Detection, SceneResult};
use rangeadapt::experiment::{scene_seed, simulate, BenchmarkConfig};
use rangeadapt::geometry::{Box3D, LabeledObject};
use rangeadapt::gradsuite::{run_suite, END_TO_END_PROBES, STEP, TOLERANCE};
use rangeadapt::lidar_sim::{points_in_box, ray_cast, LidarSpec, Point, PointCloud, SceneSpec, NOMINAL_CAR_SIZE, SENSOR_HEIGHT};
use rangeadapt::nn::{Adam, Tensor};
use rangeadapt::train::{batch_seed, detector_seed, BatchSampler, Sample, TrainConfig, Trainer};
use rangeadapt::Error;

pub type Check = Result<String, String>;

fn run_props<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- gradients

pub fn gradient_correctness() -> Check {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for seed in 0..5 {
        let r = run_suite(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        if let Some(f) = r.failures().first() {
            return Err(format!("seed {seed}: {f}"));
        }
        let names: Vec<&str> = r.checks.iter().map(|c| c.name.as_str()).collect();
        for needed in ["conv3x3", "conv1x1", "leaky relu", "sigmoid", "linear", "bce", "smooth l1", "detection loss"] {
            ensure(names.iter().any(|n| n.starts_with(needed)), || format!("no {needed} check"))?;
        }
        for needed in ["discriminator loss", "generator adversarial loss", "discriminator param", "local loss"] {
            ensure(names.iter().any(|n| n.starts_with(needed)), || format!("no {needed} check"))?;
        }
        let e2e = r
            .checks
            .iter()
            .find(|c| c.name.starts_with("end-to-end"))
            .ok_or("no end-to-end check")?;
        ensure(e2e.probes == END_TO_END_PROBES, || format!("end-to-end used {} probes", e2e.probes))?;
        worst = r.checks.iter().fold(worst, |m, c| m.max(c.max_rel_err));
        checks += r.checks.len();
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("suite took {secs:.1} s"))?;
    ensure(STEP == 1e-5 && TOLERANCE == 1e-4, || "suite step or tolerance changed".into())?;
    Ok(format!("{checks} checks over 5 seeds, max rel err {worst:.2e}, {secs:.1} s"))
}

// ------------------------------------------------------------ local algebra

fn descriptor() -> impl Strategy<Value = ObjectDescriptor> + Clone {
    (1.2..2.4f64, 1.2..2.0f64, -PI..PI).prop_map(|(w, h, r)| ObjectDescriptor { w, h, r })
}

fn car(x: f64, y: f64, yaw: f64, w: f64, h: f64) -> LabeledObject {
    LabeledObject::car(Box3D::new([x, y, -SENSOR_HEIGHT + h / 2.0], [4.0, w, h], yaw).unwrap())
}

pub fn local_algebra() -> Check {
    // reference example
    let target = ObjectDescriptor { w: 1.6, h: 1.5, r: 0.0 };
    let near = [target, ObjectDescriptor { w: 2.0, h: 1.8, r: 0.5 }];
    let w = local_weights(&target, &near).ok_or("no weights")?;
    // distances 0 and 0.4 + 0.3 + 0.5; softmin gives 1 : e^-1.2
    let e = (-1.2f64).exp();
    let want = [1.0 / (1.0 + e), e / (1.0 + e)];
    ensure((w[0] - want[0]).abs() < 1e-12 && (w[1] - want[1]).abs() < 1e-12, || format!("example weights {w:?}"))?;
    ensure((w[0] - 0.7685).abs() < 5e-5 && (w[1] - 0.2315).abs() < 5e-5, || format!("example weights {w:?}"))?;

    let sets = (descriptor(), prop::collection::vec(descriptor(), 1..12));

    // simplex
    run_props(256, sets.clone(), |(t, near)| {
        let w = local_weights(&t, &near).unwrap();
        prop_assert_eq!(w.len(), near.len());
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        Ok(())
    })
    .map_err(|e| format!("simplex: {e}"))?;

    // permutation equivariance
    run_props(256, (sets.clone(), any::<u64>()), |((t, near), seed)| {
        let mut idx: Vec<usize> = (0..near.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<_> = idx.iter().map(|&i| near[i]).collect();
        let w = local_weights(&t, &near).unwrap();
        let wp = local_weights(&t, &permuted).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            prop_assert!((wp[k] - w[i]).abs() < 1e-12);
        }
        Ok(())
    })
    .map_err(|e| format!("permutation: {e}"))?;

    // an exact copy of the target gets the largest weight
    run_props(256, (sets.clone(), any::<prop::sample::Index>()), |((t, mut near), at)| {
        let k = at.index(near.len() + 1);
        near.insert(k, t);
        let w = local_weights(&t, &near).unwrap();
        prop_assert!(w.iter().all(|&v| v <= w[k]));
        Ok(())
    })
    .map_err(|e| format!("self weight: {e}"))?;

    // target feature is a convex combination
    let feats = (1usize..6, 1usize..8).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n),
            prop::collection::vec(0.01..1.0f64, n),
        )
    });
    run_props(256, feats, |(features, raw)| {
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let t = target_feature(&w, &features).unwrap();
        for c in 0..t.len() {
            let lo = features.iter().map(|f| f[c]).fold(f64::INFINITY, f64::min);
            let hi = features.iter().map(|f| f[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(t[c] >= lo - 1e-12 && t[c] <= hi + 1e-12);
        }
        Ok(())
    })
    .map_err(|e| format!("convexity: {e}"))?;

    gradient_stop().map_err(|e| format!("gradient stop: {e}"))?;
    Ok("example weights (0.7685, 0.2315); simplex, permutation, self-weight, convexity, gradient stop".into())
}

/// Near-object cells get exactly zero gradient from the local term, while the
/// far-object cells get some.
fn gradient_stop() -> Result<(), String> {
    let grid = GridSpec::default();
    let stride = NetworkConfig::default().stride();
    let (h, w) = grid.strided_dims(stride).unwrap();
    let scenes = (any::<u64>(), prop::collection::vec((8.0..36.0f64, -0.6..0.6f64, -PI..PI), 1..4), prop::collection::vec((44.0..66.0f64, -0.5..0.5f64, -PI..PI), 1..4));
    run_props(48, scenes, |(seed, near, far)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut objects = Vec::new();
        for &(r, b, yaw) in near.iter().chain(&far) {
            objects.push(car(r * b.cos(), r * b.sin(), yaw, rng.gen_range(1.6..2.0), rng.gen_range(1.4..1.8)));
        }
        let cells: Vec<Vec<usize>> = objects.iter().map(|o| box_to_cells(&o.bbox, &grid, stride).unwrap()).collect();
        let (far_idx, near_idx) = partition_by_range(&objects, 40.0);
        let far_cells: Vec<usize> = far_idx.iter().flat_map(|&i| cells[i].clone()).collect();
        let feat = Tensor::uniform(&[32, h, w], -1.0, 1.0, &mut rng);
        let (loss, grads) = local_adaptation(&[&feat], &[&objects], &grid, stride, 40.0).unwrap();
        prop_assert!(loss >= 0.0);
        let g = &grads[0];
        let plane = h * w;
        prop_assert!(!near_idx.is_empty());
        // near footprints and everything else outside the far footprints stay untouched
        for k in 0..plane {
            if !far_cells.contains(&k) {
                for c in 0..32 {
                    prop_assert_eq!(g.data()[c * plane + k], 0.0);
                }
            }
        }
        prop_assert!(g.data().iter().any(|&v| v != 0.0));
        Ok(())
    })
}

// ------------------------------------------------- separation and masking

fn sample_scene(seed: u64, grid: &GridSpec, net: &NetworkConfig) -> Sample {
    let bench = BenchmarkConfig::default();
    let (spec, pc) = simulate(scene_seed(seed, "check", 0), &bench.scene, &LidarSpec::sparse_32ch()).unwrap();
    Sample::new(encode(&pc, grid).unwrap(), spec.objects, grid, net).unwrap()
}

fn grads_where(det: &Detector, pred: impl Fn(&str) -> bool) -> (usize, usize) {
    let mut nonzero = 0;
    let mut total = 0;
    for (name, p) in det.named_params() {
        if pred(&name) {
            total += 1;
            nonzero += usize::from(p.grad.data().iter().any(|&v| v != 0.0));
        }
    }
    (nonzero, total)
}

fn disc_grads_nonzero(d: &Discriminator) -> usize {
    d.named_params().iter().filter(|(_, p)| p.grad.data().iter().any(|&v| v != 0.0)).count()
}

pub fn separation_and_masking() -> Check {
    let grid = GridSpec::default();
    let net = NetworkConfig::default();
    let sample = sample_scene(11, &grid, &net);
    let mut det = Detector::new(net.clone(), 3).map_err(|e| e.to_string())?;
    let mut disc = Discriminator::new(net.aligned_channels(), DiscriminatorConfig::default(), 4).map_err(|e| e.to_string())?;
    let mask = cell_range_band(&grid, det.stride(), 40.0, 3.0).map_err(|e| e.to_string())?;
    let trace = det.forward(&sample.image).map_err(|e| e.to_string())?;
    let n_disc = disc.named_params().len();

    // discriminator phase
    det.zero_grad();
    disc.zero_grad();
    let (probs, dtrace) = disc.forward_traced(&trace.aligned).map_err(|e| e.to_string())?;
    let (_, g) = discriminator_loss(&probs, &mask).map_err(|e| e.to_string())?;
    disc.backward(&dtrace, &g).map_err(|e| e.to_string())?;
    let (nz, _) = grads_where(&det, |_| true);
    ensure(nz == 0, || format!("discriminator loss touched {nz} detector parameters"))?;
    ensure(disc_grads_nonzero(&disc) == n_disc, || "discriminator loss missed discriminator parameters".into())?;

    // generator phase
    det.zero_grad();
    disc.zero_grad();
    let (_, g) = generator_adversarial_loss(&probs, &mask).map_err(|e| e.to_string())?;
    let ga = disc.backward_input(&dtrace, &g).map_err(|e| e.to_string())?;
    let zero_head = Tensor::zeros(trace.head.shape());
    det.backward(&trace, &zero_head, Some(&ga)).map_err(|e| e.to_string())?;
    let (nz_adapted, n_adapted) = grads_where(&det, |n| n.starts_with("adapted."));
    let (nz_other, _) = grads_where(&det, |n| !n.starts_with("adapted."));
    ensure(nz_adapted == n_adapted && n_adapted > 0, || format!("generator loss reached {nz_adapted}/{n_adapted} adapted parameters"))?;
    ensure(nz_other == 0, || format!("generator loss touched {nz_other} shared or head parameters"))?;
    ensure(disc_grads_nonzero(&disc) == 0, || "generator loss touched discriminator parameters".into())?;

    // detection loss alone reaches every detector parameter, as a control
    det.zero_grad();
    let (_, gh) = detection_loss(&trace.head, &sample.targets, net.regression_weight).map_err(|e| e.to_string())?;
    det.backward(&trace, &gh, None).map_err(|e| e.to_string())?;
    let (nz_all, n_all) = grads_where(&det, |_| true);
    ensure(nz_all == n_all, || format!("detection loss reached {nz_all}/{n_all} parameters"))?;

    // masking: excluded cells get no gradient and do not move either loss
    let excluded: Vec<usize> = (0..mask.len()).filter(|&k| mask.bands[k] == RangeBand::ExcludedNear).collect();
    ensure(!excluded.is_empty(), || "default grid has no excluded cells".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = Tensor::uniform(&[1, mask.rows, mask.cols], 0.05, 0.95, &mut rng);
    let mut p2 = p.clone();
    for &k in &excluded {
        p2.data_mut()[k] = rng.gen_range(0.05..0.95);
    }
    type LossFn = fn(&Tensor, &RangeMask) -> rangeadapt::Result<(f64, Tensor)>;
    for (name, f) in [
        ("discriminator", discriminator_loss as LossFn),
        ("generator", generator_adversarial_loss as LossFn),
    ] {
        let (l, g) = f(&p, &mask).map_err(|e| e.to_string())?;
        let (l2, _) = f(&p2, &mask).map_err(|e| e.to_string())?;
        ensure(excluded.iter().all(|&k| g.data()[k] == 0.0), || format!("{name} loss has gradient on excluded cells"))?;
        ensure(l == l2, || format!("{name} loss depends on excluded cells"))?;
    }
    let (_, g) = generator_adversarial_loss(&p, &mask).map_err(|e| e.to_string())?;
    ensure(
        (0..mask.len()).all(|k| (mask.bands[k] == RangeBand::Far) || g.data()[k] == 0.0),
        || "generator loss has gradient outside far cells".into(),
    )?;
    Ok(format!(
        "discriminator grads on {n_disc}/{n_disc} own params, generator on {n_adapted}/{n_adapted} adapted params, {} excluded cells masked",
        excluded.len()
    ))
}

// --------------------------------------------------------------- AP oracle

/// Convex polygon intersection by collecting inside vertices and edge
/// crossings, ordered by angle about their centroid.
pub fn intersection_area_oracle(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    fn inside(p: [f64; 2], poly: &[[f64; 2]; 4]) -> bool {
        let mut sign = 0.0;
        for i in 0..4 {
            let (u, v) = (poly[i], poly[(i + 1) % 4]);
            let c = (v[0] - u[0]) * (p[1] - u[1]) - (v[1] - u[1]) * (p[0] - u[0]);
            if c.abs() < 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = c.signum();
            } else if c.signum() != sign {
                return false;
            }
        }
        true
    }
    let mut pts: Vec<[f64; 2]> = Vec::new();
    pts.extend(a.iter().filter(|p| inside(**p, b)));
    pts.extend(b.iter().filter(|p| inside(**p, a)));
    for i in 0..4 {
        let (p, p2) = (a[i], a[(i + 1) % 4]);
        for j in 0..4 {
            let (q, q2) = (b[j], b[(j + 1) % 4]);
            let r = [p2[0] - p[0], p2[1] - p[1]];
            let s = [q2[0] - q[0], q2[1] - q[1]];
            let den = r[0] * s[1] - r[1] * s[0];
            if den.abs() < 1e-15 {
                continue;
            }
            let t = ((q[0] - p[0]) * s[1] - (q[1] - p[1]) * s[0]) / den;
            let u = ((q[0] - p[0]) * r[1] - (q[1] - p[1]) * r[0]) / den;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                pts.push([p[0] + t * r[0], p[1] + t * r[1]]);
            }
        }
    }
    if pts.len() < 3 {
        return 0.0;
    }
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
    pts.sort_by(|p, q| (p[1] - cy).atan2(p[0] - cx).total_cmp(&(q[1] - cy).atan2(q[0] - cx)));
    let mut area = 0.0;
    for i in 0..pts.len() {
        let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
        area += p[0] * q[1] - q[0] * p[1];
    }
    area.abs() / 2.0
}

pub fn iou_oracle(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_area_oracle(&a.bev_corners(), &b.bev_corners());
    inter / (a.bev_area() + b.bev_area() - inter)
}

/// AP by sweeping every score threshold and re-matching from scratch.
pub fn ap_oracle(scenes: &[SceneResult], iou_thresh: f64, band: Option<&Band>) -> Option<f64> {
    let keep = |r: f64| band.is_none_or(|b| b.contains(r));
    let n_gt: usize = scenes.iter().map(|s| s.ground_truth.iter().filter(|g| keep(g.range())).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.detections.iter().filter(|d| keep(d.range())).map(|d| d.score))
        .collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    // (precision, recall) of every operating point
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut n_det = 0usize;
        for s in scenes {
            let gts: Vec<&LabeledObject> = s.ground_truth.iter().filter(|g| keep(g.range())).collect();
            let mut dets: Vec<&Detection> = s.detections.iter().filter(|d| keep(d.range()) && d.score >= t).collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut used = vec![false; gts.len()];
            for d in dets {
                n_det += 1;
                let mut best = None;
                let mut best_iou = iou_thresh;
                for (gi, g) in gts.iter().enumerate() {
                    let iou = rotated_bev_iou(&d.bbox, &g.bbox);
                    if !used[gi] && iou >= best_iou && best.is_none_or(|_| iou > best_iou) {
                        best = Some(gi);
                        best_iou = iou;
                    }
                }
                if let Some(gi) = best {
                    used[gi] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / n_det as f64, tp as f64 / n_gt as f64));
    }
    let mut sum = 0.0;
    for k in 1..=40 {
        let r = k as f64 / 40.0;
        let best = points
            .iter()
            .filter(|(_, rec)| *rec >= r - 1e-12)
            .map(|(p, _)| *p)
            .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
        sum += best.unwrap_or(0.0);
    }
    Some(sum / 40.0)
}

fn random_box(rng: &mut ChaCha8Rng, center: [f64; 2]) -> Box3D {
    Box3D::new(
        [center[0], center[1], -0.9],
        [rng.gen_range(3.0..5.0), rng.gen_range(1.4..2.2), 1.5],
        rng.gen_range(-PI..PI),
    )
    .unwrap()
}

/// Scenes of up to 10 detections in total, jittered around the ground truth
/// so that both hits and misses occur.
pub fn random_instance(seed: u64) -> Vec<SceneResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_scenes = rng.gen_range(1..=3);
    let mut budget = rng.gen_range(0..=10usize);
    let mut scenes = Vec::new();
    for _ in 0..n_scenes {
        let n_gt = rng.gen_range(0..=4);
        let gts: Vec<LabeledObject> = (0..n_gt)
            .map(|_| {
                let r: f64 = rng.gen_range(5.0..70.0);
                let a: f64 = rng.gen_range(-1.0..1.0);
                LabeledObject::car(random_box(&mut rng, [r * a.cos(), r * a.sin()]))
            })
            .collect();
        let n_det = rng.gen_range(0..=budget);
        budget -= n_det;
        let detections = (0..n_det)
            .map(|_| {
                let bbox = if !gts.is_empty() && rng.gen_bool(0.7) {
                    let g = &gts[rng.gen_range(0..gts.len())].bbox;
                    let c = [g.center[0] + rng.gen_range(-0.8..0.8), g.center[1] + rng.gen_range(-0.8..0.8)];
                    Box3D::new([c[0], c[1], g.center[2]], g.size, g.yaw + rng.gen_range(-0.3..0.3)).unwrap()
                } else {
                    let r: f64 = rng.gen_range(5.0..70.0);
                    let a: f64 = rng.gen_range(-1.0..1.0);
                    random_box(&mut rng, [r * a.cos(), r * a.sin()])
                };
                Detection {
                    bbox,
                    score: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        scenes.push(SceneResult {
            detections,
            ground_truth: gts,
        });
    }
    scenes
}

pub fn ap_oracle_equivalence() -> Check {
    let bands: Vec<Option<Band>> = std::iter::once(None).chain(Band::defaults().into_iter().map(Some)).collect();
    let mut compared = 0;
    for seed in 0..2000u64 {
        let scenes = random_instance(seed);
        for band in &bands {
            for iou in [0.3, 0.5, 0.7] {
                let got = average_precision(&scenes, iou, band.as_ref());
                let want = ap_oracle(&scenes, iou, band.as_ref());
                ensure(got == want, || format!("instance {seed} band {band:?} iou {iou}: {got:?} vs oracle {want:?}"))?;
                compared += usize::from(want.is_some());
            }
        }
    }

    // the worked example: scores .9 hit, .8 miss, .7 hit on two ground truths
    let g1 = Box3D::new([10.0, 0.0, -0.9], [4.0, 1.8, 1.5], 0.0).unwrap();
    let g2 = Box3D::new([20.0, 5.0, -0.9], [4.0, 1.8, 1.5], 0.3).unwrap();
    let miss = Box3D::new([30.0, -5.0, -0.9], [4.0, 1.8, 1.5], 0.0).unwrap();
    let scenes = [SceneResult {
        detections: vec![
            Detection { bbox: g1, score: 0.9 },
            Detection { bbox: miss, score: 0.8 },
            Detection { bbox: g2, score: 0.7 },
        ],
        ground_truth: vec![LabeledObject::car(g1), LabeledObject::car(g2)],
    }];
    // envelope: precision 1 up to recall 1/2, then 2/3 up to recall 1
    let want = (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0;
    let got = average_precision(&scenes, 0.7, None).ok_or("no AP")?;
    ensure((got - want).abs() < 1e-15, || format!("worked example {got} vs {want}"))?;
    ensure(ap_oracle(&scenes, 0.7, None) == Some(got), || "worked example differs from oracle".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_oracle = 0.0f64;
    let mut worst_rot = 0.0f64;
    for _ in 0..5000 {
        let ca = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let cb = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let a = random_box(&mut rng, ca);
        let b = random_box(&mut rng, cb);
        let iou = rotated_bev_iou(&a, &b);
        worst_oracle = worst_oracle.max((iou - iou_oracle(&a, &b)).abs());
        let theta = rng.gen_range(-PI..PI);
        let (s, c) = theta.sin_cos();
        let rot = |x: &Box3D| {
            Box3D::new(
                [c * x.center[0] - s * x.center[1], s * x.center[0] + c * x.center[1], x.center[2]],
                x.size,
                x.yaw + theta,
            )
            .unwrap()
        };
        worst_rot = worst_rot.max((iou - rotated_bev_iou(&rot(&a), &rot(&b))).abs());
    }
    ensure(worst_oracle <= 1e-9, || format!("IoU differs from the clipping oracle by {worst_oracle:e}"))?;
    ensure(worst_rot <= 1e-9, || format!("IoU changes by {worst_rot:e} under rotation"))?;
    let sq = |x0: f64| Box3D::new([x0 + 1.0, 1.0, 0.0], [2.0, 2.0, 1.0], 0.0).unwrap();
    let third = rotated_bev_iou(&sq(0.0), &sq(1.0));
    ensure((third - 1.0 / 3.0).abs() < 1e-12, || format!("square overlap IoU {third}"))?;
    Ok(format!(
        "{compared} AP comparisons exact; IoU vs oracle {worst_oracle:.1e}, rotation drift {worst_rot:.1e}"
    ))
}

// ------------------------------------------------------- simulator density

pub fn density_by_range(seeds: u64) -> Result<Vec<(f64, f64)>, String> {
    let lidar = LidarSpec::dense_64ch();
    let mut out = Vec::new();
    for r in [10.0, 20.0, 40.0, 60.0] {
        let mut total = 0usize;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bearing: f64 = rng.gen_range(-0.5..0.5);
            let [l, w, h] = NOMINAL_CAR_SIZE;
            let b = Box3D::new([r * bearing.cos(), r * bearing.sin(), -SENSOR_HEIGHT + h / 2.0], [l, w, h], rng.gen_range(-PI..PI))
                .map_err(|e| e.to_string())?;
            let scene = SceneSpec {
                objects: vec![LabeledObject::car(b)],
                ground_z: Some(-SENSOR_HEIGHT),
            };
            let pc = ray_cast(&scene, &lidar, seed).map_err(|e| e.to_string())?;
            total += points_in_box(&pc, &b);
        }
        out.push((r, total as f64 / seeds as f64));
    }
    Ok(out)
}

pub fn simulator_density() -> Check {
    let means = density_by_range(20)?;
    let summary = means.iter().map(|(r, m)| format!("{r:.0} m: {m:.0}")).collect::<Vec<_>>().join(", ");
    ensure(means.windows(2).all(|w| w[1].1 < w[0].1), || format!("not strictly decreasing: {summary}"))?;
    Ok(format!("mean points per car {summary}"))
}

// ------------------------------------------------------------ file formats

fn f32_point() -> impl Strategy<Value = Point> {
    let v = -200.0f32..200.0f32;
    (v.clone(), v.clone(), v, 0.0f32..1.0f32).prop_map(|(x, y, z, i)| Point {
        x: x as f64,
        y: y as f64,
        z: z as f64,
        reflectance: i as f64,
    })
}

fn hundredths(lo: i64, hi: i64) -> impl Strategy<Value = f64> {
    (lo..hi).prop_map(|k| k as f64 / 100.0)
}

fn label_record() -> impl Strategy<Value = LabelRecord> {
    (
        prop::sample::select(vec!["Car", "Van", "Pedestrian", "Cyclist", "Truck"]),
        hundredths(0, 100),
        0i32..4,
        hundredths(-314, 314),
        prop::array::uniform4(hundredths(0, 150_000)),
        prop::array::uniform3(hundredths(1, 1_000)),
        prop::array::uniform3(hundredths(-10_000, 10_000)),
        hundredths(-314, 314),
    )
        .prop_map(|(class, truncation, occlusion, alpha, bbox2d, dims, location, rotation_y)| LabelRecord {
            class: class.to_string(),
            truncation,
            occlusion,
            alpha,
            bbox2d,
            dims,
            location,
            rotation_y,
        })
}

pub fn format_fidelity() -> Check {
    run_props(128, prop::collection::vec(f32_point(), 0..300), |points| {
        let pc = PointCloud { points };
        let bytes = encode_points(&pc);
        prop_assert_eq!(bytes.len(), 16 * pc.len());
        let back = decode_points(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, pc);
        Ok(())
    })
    .map_err(|e| format!("point round trip: {e}"))?;

    // a 1000-point file
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pc = PointCloud {
        points: (0..1000)
            .map(|_| Point {
                x: rng.gen_range(-80.0f32..80.0) as f64,
                y: rng.gen_range(-80.0f32..80.0) as f64,
                z: rng.gen_range(-3.0f32..3.0) as f64,
                reflectance: rng.gen_range(0.0f32..1.0) as f64,
            })
            .collect(),
    };
    let path = dir.path().join("000000.bin");
    rangeadapt::data_io::write_point_bin(&pc, &path).map_err(|e| e.to_string())?;
    ensure(std::fs::metadata(&path).map_err(|e| e.to_string())?.len() == 16_000, || "1000 points are not 16000 bytes".into())?;
    let back = rangeadapt::data_io::read_point_bin(&path).map_err(|e| e.to_string())?;
    ensure(back == pc, || "1000-point file does not round-trip".into())?;

    run_props(256, label_record(), |rec| {
        let line = write_label_line(&rec);
        prop_assert_eq!(line.split_whitespace().count(), 15);
        prop_assert_eq!(parse_label_line(&line).unwrap(), rec);
        Ok(())
    })
    .map_err(|e| format!("label round trip: {e}"))?;

    // malformed inputs give typed errors
    for n in [1usize, 15, 17, 31] {
        let bytes = vec![0u8; n];
        match decode_points(&bytes, std::path::Path::new("x.bin")) {
            Err(Error::BinaryFormat { offset, .. }) => ensure(offset == (n - n % 16) as u64, || format!("offset {offset} for {n} bytes"))?,
            other => return Err(format!("{n} bytes: {other:?}")),
        }
    }
    let good = "Car 0.00 0 -1.57 0.00 0.00 50.00 50.00 1.50 1.60 3.90 1.00 1.60 20.00 0.00";
    parse_label_line(good).map_err(|e| e.to_string())?;
    let cases = [
        ("Car 0.00 0 -1.57", 5),
        (&format!("{good} 1.0")[..], 16),
        ("Car x 0 -1.57 0.00 0.00 50.00 50.00 1.50 1.60 3.90 1.00 1.60 20.00 0.00", 2),
        ("Car 0.00 0.5 -1.57 0.00 0.00 50.00 50.00 1.50 1.60 3.90 1.00 1.60 20.00 0.00", 3),
        ("Car 0.00 0 -1.57 0.00 0.00 50.00 50.00 1.50 NaN 3.90 1.00 1.60 20.00 0.00", 10),
        ("Car 0.00 0 -1.57 0.00 0.00 50.00 50.00 1.50 1.60 -3.90 1.00 1.60 20.00 0.00", 11),
        ("Car 0.00 0 -1.57 0.00 0.00 50.00 50.00 1.50 1.60 3.90 1.00 1.60 inf 0.00", 14),
    ];
    for (line, field) in cases {
        match parse_label_line(line) {
            Err(Error::LabelFormat { field: f, .. }) => ensure(f == field, || format!("{line:?}: field {f}, expected {field}"))?,
            other => return Err(format!("{line:?}: {other:?}")),
        }
    }
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, format!("{good}\n\nCar 1 2\n")).map_err(|e| e.to_string())?;
    match rangeadapt::data_io::read_labels(&bad) {
        Err(Error::AtLine { line: 3, .. }) => {}
        other => return Err(format!("bad label file: {other:?}")),
    }
    match rangeadapt::data_io::read_point_bin(dir.path().join("missing.bin")) {
        Err(Error::Io { .. }) => {}
        other => return Err(format!("missing file: {other:?}")),
    }

    // arbitrary garbage never panics
    run_props(512, ".{0,200}", |s| {
        let _ = parse_label_line(&s);
        let _ = DatasetManifest::parse(&s, std::path::Path::new("."));
        Ok(())
    })
    .map_err(|e| format!("garbage text: {e}"))?;
    run_props(512, prop::collection::vec(any::<u8>(), 0..200), |b| {
        let _ = decode_points(&b, std::path::Path::new("g.bin"));
        let _ = Checkpoint::from_bytes(&b);
        Ok(())
    })
    .map_err(|e| format!("garbage bytes: {e}"))?;
    Ok("point and label round trips lossless; malformed inputs give typed errors".into())
}

// ------------------------------------------------------ baseline equivalence

/// A trainer with no adaptation code at all: detection loss and Adam.
pub fn plain_training(cfg: &TrainConfig, net: &NetworkConfig, data: &[Sample]) -> rangeadapt::Result<(Detector, Vec<f64>)> {
    let mut det = Detector::new(net.clone(), detector_seed(cfg.seed))?;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, batch_seed(cfg.seed))?;
    let mut opt = Adam::new(cfg.optimizer);
    let mut losses = Vec::new();
    for _ in 0..cfg.steps {
        let batch = sampler.next_batch();
        let b = batch.len() as f64;
        det.zero_grad();
        let mut total = 0.0;
        for i in batch {
            let trace = det.forward(&data[i].image)?;
            let (l, mut g) = detection_loss(&trace.head, &data[i].targets, net.regression_weight)?;
            g.data_mut().iter_mut().for_each(|v| *v /= b);
            det.backward(&trace, &g, None)?;
            total += l.total / b;
        }
        opt.step(det.params_mut())?;
        losses.push(total);
    }
    Ok((det, losses))
}

pub fn baseline_equivalence() -> Check {
    let grid = GridSpec::default();
    let net = NetworkConfig::default();
    let bench = BenchmarkConfig::default();
    let data: Vec<Sample> = (0..6)
        .map(|i| {
            let (spec, pc) = simulate(scene_seed(bench.data_seed, "equiv", i), &bench.scene, &bench.lidar).unwrap();
            Sample::new(encode(&pc, &grid).unwrap(), spec.objects, &grid, &net).unwrap()
        })
        .collect();
    let mut steps = 0;
    for seed in [0u64, 17] {
        let cfg = TrainConfig {
            batch_size: 2,
            steps: 6,
            seed,
            lambda_adv: 0.0,
            lambda_local: 0.0,
            ..TrainConfig::default()
        };
        let (oracle, oracle_losses) = plain_training(&cfg, &net, &data).map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(cfg.clone(), net.clone(), grid, data.len()).map_err(|e| e.to_string())?;
        let log = trainer.run(&data, 0).map_err(|e| e.to_string())?;
        ensure(trainer.discriminator.is_none(), || "a discriminator was built with the global term off".into())?;
        for (r, l) in log.iter().zip(&oracle_losses) {
            ensure(r.l_d.to_bits() == l.to_bits() && r.total.to_bits() == l.to_bits(), || format!("seed {seed} step {}: {} vs {l}", r.step, r.l_d))?;
            ensure(r.l_c == 0.0 && r.l_adv == 0.0 && r.l_l == 0.0, || format!("seed {seed} step {}: adaptation losses logged", r.step))?;
        }
        for ((name, a), (_, b)) in trainer.detector.named_params().iter().zip(oracle.named_params()) {
            let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("seed {seed}: {name} differs"))?;
        }
        let ta = trainer.detector.to_checkpoint().map_err(|e| e.to_string())?.to_bytes();
        let tb = oracle.to_checkpoint().map_err(|e| e.to_string())?.to_bytes();
        ensure(ta == tb, || format!("seed {seed}: checkpoints differ"))?;
        steps += log.len();

        // the adapted run starts from the same weights and sees the same batches
        let adapted = TrainConfig {
            lambda_adv: 0.1,
            lambda_local: 0.5,
            ..cfg
        };
        let t = Trainer::new(adapted, net.clone(), grid, data.len()).map_err(|e| e.to_string())?;
        let fresh = Detector::new(net.clone(), detector_seed(seed)).map_err(|e| e.to_string())?;
        ensure(t.detector == fresh, || "adapted run starts from different weights".into())?;
        let mut s1 = BatchSampler::new(data.len(), 2, batch_seed(seed)).map_err(|e| e.to_string())?;
        let mut s2 = BatchSampler::new(data.len(), 2, batch_seed(seed)).map_err(|e| e.to_string())?;
        ensure((0..20).all(|_| s1.next_batch() == s2.next_batch()), || "batch streams differ".into())?;
    }
    Ok(format!("{steps} steps over 2 seeds bitwise identical to a detection-only trainer"))
}
