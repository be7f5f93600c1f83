//! KITTI-style scene directories: `velodyne/NNNNNN.bin`, `label_2/NNNNNN.txt`
//! and a manifest listing them by split.

use std::fs;
use std::path::Path;

use crate::bev::{encode, GridSpec};
use crate::data_io::{
    labels_to_objects, lidar_box_to_label, read_labels, read_point_bin, write_labels, write_point_bin, DatasetManifest,
    ManifestEntry,
};
use crate::detector::NetworkConfig;
use crate::error::{Error, Result};
use crate::experiment::{scene_seed, simulate};
use crate::geometry::{LabeledObject, ObjectClass};
use crate::lidar_sim::{LidarSpec, PointCloud, SceneConfig};
use crate::train::Sample;

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes one scene and returns its manifest entry.
pub fn write_scene(dir: &Path, name: &str, split: &str, objects: &[LabeledObject], pc: &PointCloud) -> Result<ManifestEntry> {
    let points = dir.join("velodyne").join(format!("{name}.bin"));
    let labels = dir.join("label_2").join(format!("{name}.txt"));
    for p in [&points, &labels] {
        let parent = p.parent().expect("joined path has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_point_bin(pc, &points)?;
    let records: Vec<_> = objects.iter().map(|o| lidar_box_to_label(&o.bbox, ObjectClass::Car)).collect();
    write_labels(&records, &labels)?;
    Ok(ManifestEntry {
        points,
        labels,
        split: split.to_string(),
    })
}

/// Simulates `counts` scenes per split into `dir` and writes the manifest.
pub fn simulate_to_dir(
    dir: &Path,
    counts: &[(&str, usize)],
    seed: u64,
    scene: &SceneConfig,
    lidar: &LidarSpec,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest::default();
    let mut k = 0;
    for &(split, n) in counts {
        for i in 0..n {
            let (spec, pc) = simulate(scene_seed(seed, split, i), scene, lidar)?;
            manifest.entries.push(write_scene(dir, &format!("{k:06}"), split, &spec.objects, &pc)?);
            k += 1;
        }
    }
    manifest.write(dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// Reads the point cloud and car labels of one entry.
pub fn load_entry(entry: &ManifestEntry) -> Result<(PointCloud, Vec<LabeledObject>)> {
    let pc = read_point_bin(&entry.points)?;
    let objects = labels_to_objects(&read_labels(&entry.labels)?)?;
    Ok((pc, objects))
}

/// Loads and encodes every scene of `split`.
pub fn load_split(manifest: &DatasetManifest, split: &str, grid: &GridSpec, network: &NetworkConfig) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| {
            let (pc, objects) = load_entry(e)?;
            Sample::new(encode(&pc, grid)?, objects, grid, network)
        })
        .collect()
}
