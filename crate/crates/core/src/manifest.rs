//! Pose-manifest ingestion.
//!
//! Two layouts are accepted:
//!
//! * line-delimited JSON, one [`SceneBundle`] per line
//!   (`{"scene_id": .., "source": .., "poses": [PoseRecord, ..]}`),
//! * a COLMAP text model directory holding `cameras.txt` and `images.txt`;
//!   COLMAP stores camera-from-world quaternions (`QW QX QY QZ`) and
//!   translations, converted here to world-from-camera poses.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SceneBundle;
use crate::pose::{CameraPose, ImageSize, Intrinsics, PoseError, PoseRecord};

#[derive(Error, Debug)]
pub enum ManifestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Pose { line: usize, source: PoseError },
    #[error("duplicate scene_id `{0}`")]
    DuplicateScene(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleRecord {
    scene_id: String,
    #[serde(default)]
    source: String,
    poses: Vec<PoseRecord>,
}

/// Result of streaming a manifest: good scenes plus per-line failures.
#[derive(Debug, Default)]
pub struct ManifestRead {
    pub scenes: Vec<SceneBundle>,
    pub failures: Vec<ManifestError>,
}

pub fn parse_bundle_line(line: &str, line_no: usize) -> Result<SceneBundle, ManifestError> {
    let rec: BundleRecord = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let poses = rec
        .poses
        .into_iter()
        .map(CameraPose::try_from)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| ManifestError::Pose {
            line: line_no,
            source,
        })?;
    Ok(SceneBundle::new(rec.scene_id, rec.source, poses))
}

/// Streams a JSON-lines manifest. Bad lines and duplicate ids are recorded as
/// failures and skipped; blank lines are ignored.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<ManifestRead, ManifestError> {
    let mut out = ManifestRead::default();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_bundle_line(&line, i + 1) {
            Ok(b) => {
                if seen.insert(b.scene_id.clone()) {
                    out.scenes.push(b);
                } else {
                    out.failures.push(ManifestError::DuplicateScene(b.scene_id));
                }
            }
            Err(e) => out.failures.push(e),
        }
    }
    Ok(out)
}

pub fn bundle_to_line(bundle: &SceneBundle) -> String {
    let rec = BundleRecord {
        scene_id: bundle.scene_id.clone(),
        source: bundle.source.clone(),
        poses: bundle.poses.iter().map(PoseRecord::from).collect(),
    };
    serde_json::to_string(&rec).expect("bundle serializes")
}

pub fn write_jsonl<W: Write>(mut w: W, bundles: &[SceneBundle]) -> std::io::Result<()> {
    for b in bundles {
        writeln!(w, "{}", bundle_to_line(b))?;
    }
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> ManifestError {
    ManifestError::Parse {
        line,
        message: message.into(),
    }
}

/// Parses COLMAP `cameras.txt`. Only focal length and principal point are
/// kept; distortion parameters are ignored.
pub fn parse_colmap_cameras(
    text: &str,
) -> Result<HashMap<u32, (Intrinsics, ImageSize)>, ManifestError> {
    let mut cams = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 5 {
            return Err(parse_err(
                i + 1,
                "camera line needs ID MODEL WIDTH HEIGHT PARAMS",
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| parse_err(i + 1, e.to_string()))
        };
        let id: u32 = tok[0]
            .parse()
            .map_err(|_| parse_err(i + 1, "bad camera id"))?;
        let width: u32 = tok[2].parse().map_err(|_| parse_err(i + 1, "bad width"))?;
        let height: u32 = tok[3].parse().map_err(|_| parse_err(i + 1, "bad height"))?;
        let params = tok[4..]
            .iter()
            .map(|s| num(s))
            .collect::<Result<Vec<_>, _>>()?;
        let k = match tok[1] {
            "SIMPLE_PINHOLE"
            | "SIMPLE_RADIAL"
            | "RADIAL"
            | "SIMPLE_RADIAL_FISHEYE"
            | "RADIAL_FISHEYE" => {
                if params.len() < 3 {
                    return Err(parse_err(i + 1, "expected f cx cy"));
                }
                Intrinsics {
                    fx: params[0],
                    fy: params[0],
                    cx: params[1],
                    cy: params[2],
                }
            }
            "PINHOLE" | "OPENCV" | "OPENCV_FISHEYE" | "FULL_OPENCV" | "FOV"
            | "THIN_PRISM_FISHEYE" => {
                if params.len() < 4 {
                    return Err(parse_err(i + 1, "expected fx fy cx cy"));
                }
                Intrinsics {
                    fx: params[0],
                    fy: params[1],
                    cx: params[2],
                    cy: params[3],
                }
            }
            other => {
                return Err(parse_err(
                    i + 1,
                    format!("unsupported camera model {other}"),
                ))
            }
        };
        cams.insert(id, (k, ImageSize { width, height }));
    }
    Ok(cams)
}

/// Parses COLMAP `images.txt` into poses sorted by image name.
pub fn parse_colmap_images(
    text: &str,
    cameras: &HashMap<u32, (Intrinsics, ImageSize)>,
) -> Result<Vec<(String, CameraPose)>, ManifestError> {
    let mut out = Vec::new();
    let mut expect_points = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('#') {
            continue;
        }
        if expect_points {
            // The 2D-point line that follows every image line; may be empty.
            expect_points = false;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(parse_err(
                i + 1,
                "image line needs ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
            ));
        }
        let v = tok[1..8]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| parse_err(i + 1, e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let cam_id: u32 = tok[8]
            .parse()
            .map_err(|_| parse_err(i + 1, "bad camera id"))?;
        let (intrinsics, image_size) = *cameras
            .get(&cam_id)
            .ok_or_else(|| parse_err(i + 1, format!("unknown camera id {cam_id}")))?;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
        let r_cw = q.to_rotation_matrix().into_inner();
        let t = Vector3::new(v[4], v[5], v[6]);
        let rotation = r_cw.transpose();
        let position = -(rotation * t);
        let pose =
            CameraPose::new(rotation, position, intrinsics, image_size).map_err(|source| {
                ManifestError::Pose {
                    line: i + 1,
                    source,
                }
            })?;
        out.push((tok[9..].join(" "), pose));
        expect_points = true;
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Loads a COLMAP text model directory as one scene named after the directory.
pub fn read_colmap_dir(dir: &Path) -> Result<SceneBundle, ManifestError> {
    let cameras = parse_colmap_cameras(&std::fs::read_to_string(dir.join("cameras.txt"))?)?;
    let images = parse_colmap_images(&std::fs::read_to_string(dir.join("images.txt"))?, &cameras)?;
    let scene_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "colmap".into());
    Ok(SceneBundle::new(
        scene_id,
        "colmap",
        images.into_iter().map(|(_, p)| p).collect(),
    ))
}
