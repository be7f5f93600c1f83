//! KITTI-style files: velodyne `.bin` point clouds, 15-field label text, and a
//! tab-separated dataset manifest.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D, LabeledObject, ObjectClass};
use crate::lidar_sim::{Point, PointCloud};

const RECORD_BYTES: usize = 16;

/// Decodes consecutive little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn decode_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = (bytes.len() - bytes.len() % RECORD_BYTES) as u64;
        return Err(Error::BinaryFormat {
            path: path.to_path_buf(),
            offset,
            msg: format!(
                "truncated record: {} trailing bytes, records are {RECORD_BYTES} bytes",
                bytes.len() % RECORD_BYTES
            ),
        });
    }
    let points = bytes
        .chunks_exact(RECORD_BYTES)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4-byte slice")) as f64;
            Point {
                x: f(0),
                y: f(1),
                z: f(2),
                reflectance: f(3),
            }
        })
        .collect();
    Ok(PointCloud { points })
}

pub fn encode_points(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * RECORD_BYTES);
    for p in &pc.points {
        for v in [p.x, p.y, p.z, p.reflectance] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_point_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_points(&bytes, path)
}

pub fn write_point_bin(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_points(pc)).map_err(|e| Error::io(path, e))
}

/// One line of a KITTI label file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// Image-plane box; carried through, never used.
    pub bbox2d: [f64; 4],
    /// (height, width, length), meters.
    pub dims: [f64; 3],
    /// Bottom-center of the box in camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

const LABEL_FIELDS: usize = 15;

fn parse_real(tok: &str, field: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::LabelFormat {
        field,
        msg: format!("expected a number, got {tok:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::LabelFormat {
            field,
            msg: format!("non-finite value {tok:?}"),
        });
    }
    Ok(v)
}

/// Parses one label line. Field indices in errors are 1-based.
pub fn parse_label_line(line: &str) -> Result<LabelRecord> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() < LABEL_FIELDS {
        return Err(Error::LabelFormat {
            field: toks.len() + 1,
            msg: format!("expected {LABEL_FIELDS} fields, found {}", toks.len()),
        });
    }
    if toks.len() > LABEL_FIELDS {
        return Err(Error::LabelFormat {
            field: LABEL_FIELDS + 1,
            msg: format!("expected {LABEL_FIELDS} fields, found {}", toks.len()),
        });
    }
    let r = |i: usize| parse_real(toks[i], i + 1);
    let occlusion = toks[2].parse::<i32>().map_err(|_| Error::LabelFormat {
        field: 3,
        msg: format!("expected an integer occlusion flag, got {:?}", toks[2]),
    })?;
    let rec = LabelRecord {
        class: toks[0].to_string(),
        truncation: r(1)?,
        occlusion,
        alpha: r(3)?,
        bbox2d: [r(4)?, r(5)?, r(6)?, r(7)?],
        dims: [r(8)?, r(9)?, r(10)?],
        location: [r(11)?, r(12)?, r(13)?],
        rotation_y: r(14)?,
    };
    if rec.class != ObjectClass::DontCare.as_str() {
        if let Some(i) = rec.dims.iter().position(|&d| d <= 0.0) {
            return Err(Error::LabelFormat {
                field: 9 + i,
                msg: format!("dimension must be positive, got {}", rec.dims[i]),
            });
        }
    }
    Ok(rec)
}

/// Formats a record with two decimals per real field.
pub fn write_label_line(rec: &LabelRecord) -> String {
    let mut s = format!("{} {:.2} {} {:.2}", rec.class, rec.truncation, rec.occlusion, rec.alpha);
    for v in rec.bbox2d.iter().chain(&rec.dims).chain(&rec.location) {
        let _ = write!(s, " {v:.2}");
    }
    let _ = write!(s, " {:.2}", rec.rotation_y);
    s
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_label_line(l).map_err(|e| Error::AtLine {
                path: path.to_path_buf(),
                line: i + 1,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn write_labels(records: &[LabelRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&write_label_line(r));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Camera-frame label to sensor-frame box under the fixed nominal extrinsic
/// (camera x -> -y, camera y -> -z, camera z -> x). KITTI locations are
/// bottom centers, so the box center sits half a height above.
pub fn camera_to_lidar_box(rec: &LabelRecord) -> Result<Box3D> {
    let [h, w, l] = rec.dims;
    let [cx, cy, cz] = rec.location;
    Box3D::new([cz, -cx, -cy + h / 2.0], [l, w, h], wrap_angle(-rec.rotation_y - FRAC_PI_2))
}

/// Inverse of [`camera_to_lidar_box`]; image-plane fields are emitted as zero.
pub fn lidar_box_to_label(b: &Box3D, class: ObjectClass) -> LabelRecord {
    let [l, w, h] = b.size;
    let location = [-b.center[1], -(b.center[2] - h / 2.0), b.center[0]];
    let rotation_y = wrap_angle(-b.yaw - FRAC_PI_2);
    LabelRecord {
        class: class.as_str().to_string(),
        truncation: 0.0,
        occlusion: 0,
        alpha: wrap_angle(rotation_y - location[0].atan2(location[2])),
        bbox2d: [0.0; 4],
        dims: [h, w, l],
        location,
        rotation_y,
    }
}

/// Cars from a label file in the sensor frame; other classes are skipped.
pub fn labels_to_objects(records: &[LabelRecord]) -> Result<Vec<LabeledObject>> {
    records
        .iter()
        .filter(|r| r.class == ObjectClass::Car.as_str())
        .map(|r| Ok(LabeledObject::car(camera_to_lidar_box(r)?)))
        .collect()
}

/// Object counts per right-open range bin over `[0, max_range)`.
pub fn range_histogram(objects: &[LabeledObject], bin_width: f64, max_range: f64) -> Result<Vec<usize>> {
    if !(bin_width > 0.0) || !(max_range > 0.0) {
        return Err(Error::Input("bin width and max range must be positive".into()));
    }
    let bins = (max_range / bin_width - 1e-9).ceil().max(1.0) as usize;
    let mut counts = vec![0; bins];
    for o in objects {
        let r = o.range();
        if r < max_range {
            counts[((r / bin_width) as usize).min(bins - 1)] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub points: PathBuf,
    pub labels: PathBuf,
    pub split: String,
}

/// Dataset listing: `point_path<TAB>label_path<TAB>split` per line.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::AtLine {
                    path: base.to_path_buf(),
                    line: i + 1,
                    source: Box::new(Error::LabelFormat {
                        field: cols.len().min(3) + 1,
                        msg: format!("manifest lines need 3 tab-separated fields, found {}", cols.len()),
                    }),
                });
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                points: resolve(cols[0]),
                labels: resolve(cols[1]),
                split: cols[2].trim().to_string(),
            });
        }
        let m = DatasetManifest { entries };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Writes paths relative to the manifest's directory when possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut text = String::new();
        for e in &self.entries {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
            let _ = writeln!(text, "{}\t{}\t{}", rel(&e.points), rel(&e.labels), e.split);
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.points, &e.split) {
                if *prev != e.split {
                    return Err(Error::Input(format!(
                        "{} appears in both split {prev:?} and {:?}",
                        e.points.display(),
                        e.split
                    )));
                }
            }
        }
        Ok(())
    }

    /// Confirms every referenced file exists.
    pub fn validate_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.points, &e.labels] {
                if !p.is_file() {
                    return Err(Error::io(
                        p.clone(),
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == name).collect()
    }
}
