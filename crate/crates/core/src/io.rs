//! File formats: point clouds (XYZ, ASCII PLY), weights (JSON), 4×4
//! transforms, dataset manifests and metric/loss CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Real, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::registration::MetricsReport;
use crate::weights::{ModelConfig, ModelWeights};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const REPORT_HEADER: &str = "pair_id,rre_deg,rte,rr,ir,fmr_flag,overlap,num_corr,runtime_s";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_xyz_line(path: &Path, lineno: usize, fields: &[&str]) -> Result<Point3> {
    let mut v = [0.0; 3];
    for (k, slot) in v.iter_mut().enumerate() {
        let tok = fields
            .get(k)
            .ok_or_else(|| parse_err(path, lineno, format!("expected 3 coordinates, found {}", fields.len())))?;
        *slot = tok
            .parse::<f64>()
            .map_err(|e| parse_err(path, lineno, format!("{:?}: {}", tok, e)))?;
        if !slot.is_finite() {
            return Err(parse_err(path, lineno, format!("non-finite coordinate {:?}", tok)));
        }
    }
    Ok(Point3::new(v[0], v[1], v[2]))
}

fn read_xyz(path: &Path, text: &str) -> Result<Vec<Point3>> {
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        pts.push(parse_xyz_line(path, i + 1, &fields)?);
    }
    Ok(pts)
}

fn read_ply(path: &Path, text: &str) -> Result<Vec<Point3>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    // Elements declared before `vertex` whose rows precede the vertex rows.
    let mut skip_rows = 0usize;
    let mut seen_vertex = false;
    let mut body_start = None;
    for (i, line) in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(Error::InvalidInput(format!(
                        "{}: PLY format {:?} is not supported, only ascii",
                        path.display(),
                        fmt
                    )));
                }
            }
            ["element", name, count] => {
                let n: usize = count
                    .parse()
                    .map_err(|_| parse_err(path, i + 1, format!("bad element count {:?}", count)))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(n);
                    seen_vertex = true;
                } else if !seen_vertex {
                    skip_rows += n;
                }
            }
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => {
                body_start = Some(i + 1);
                break;
            }
            _ => {}
        }
    }
    let start = body_start.ok_or_else(|| parse_err(path, 0, "missing end_header"))?;
    let n = vertex_count.ok_or_else(|| parse_err(path, start, "no vertex element"))?;
    let col = |c: &str| {
        props
            .iter()
            .position(|p| p == c)
            .ok_or_else(|| parse_err(path, start, format!("vertex has no {} property", c)))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let mut pts = Vec::with_capacity(n);
    for (i, line) in lines.skip(skip_rows).take(n) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < props.len() {
            return Err(parse_err(path, i + 1, format!("expected {} values, found {}", props.len(), f.len())));
        }
        pts.push(parse_xyz_line(path, i + 1, &[f[cx], f[cy], f[cz]])?);
    }
    if pts.len() != n {
        return Err(parse_err(path, start, format!("header declares {} vertices, found {}", n, pts.len())));
    }
    Ok(pts)
}

fn is_ply(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Load `.ply` (ASCII) or whitespace/comma separated XYZ text.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| {
        Error::InvalidInput(format!("{}: not a text point cloud (binary PLY is not supported)", path.display()))
    })?;
    let pts = if is_ply(path) || text.starts_with("ply") {
        read_ply(path, &text)?
    } else {
        read_xyz(path, &text)?
    };
    let cloud = PointCloud::new(pts)?;
    cloud.ensure_pipeline_ready(&path.display().to_string())?;
    Ok(cloud)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut s = String::new();
    if is_ply(path) {
        let _ = write!(
            s,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
            cloud.len()
        );
    }
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    format_version: u32,
    precision: Precision,
    config: ModelConfig,
    entries: BTreeMap<String, WeightEntry>,
}

/// Save as JSON. Values round-trip exactly in either precision.
pub fn save_weights<T: Real>(w: &ModelWeights<T>, path: &Path) -> Result<()> {
    let entries = w
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                WeightEntry {
                    shape: t.shape().to_vec(),
                    values: t.to_f64_vec(),
                },
            )
        })
        .collect();
    let file = WeightsFile {
        format_version: WEIGHTS_FORMAT_VERSION,
        precision: T::PRECISION,
        config: *w.config(),
        entries,
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

fn read_weights_file(path: &Path) -> Result<WeightsFile> {
    let file: WeightsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: file.format_version,
            expected: WEIGHTS_FORMAT_VERSION,
        });
    }
    Ok(file)
}

/// Precision recorded in a weights file.
pub fn weights_precision(path: &Path) -> Result<Precision> {
    Ok(read_weights_file(path)?.precision)
}

/// Load weights, converting to `T` if the file was written in another precision.
pub fn load_weights<T: Real>(path: &Path) -> Result<ModelWeights<T>> {
    let file = read_weights_file(path)?;
    let mut map = BTreeMap::new();
    for (name, e) in file.entries {
        let t = Tensor::<T>::from_f64(&e.shape, &e.values).map_err(|_| Error::ParameterShape {
            name: name.clone(),
            found: vec![e.values.len()],
            expected: e.shape.clone(),
        })?;
        map.insert(name, t);
    }
    ModelWeights::from_map(file.config, map)
}

/// Four rows of four numbers.
pub fn save_transform(t: &RigidTransform, path: &Path) -> Result<()> {
    let m = t.to_homogeneous();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| m[(r, c)].to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path)?;
    let mut vals = Vec::with_capacity(16);
    for (i, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            vals.push(
                tok.parse::<f64>()
                    .map_err(|e| parse_err(path, i + 1, format!("{:?}: {}", tok, e)))?,
            );
        }
    }
    if vals.len() != 16 {
        return Err(parse_err(path, 0, format!("expected 16 numbers, found {}", vals.len())));
    }
    RigidTransform::from_homogeneous(&Matrix4::from_row_slice(&vals))
}

/// One pair of a dataset directory; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub transform: PathBuf,
    /// Generator seed, for synthetic pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub pairs: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn save_manifest(m: &Manifest, dir: &Path) -> Result<()> {
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: m.format_version,
            expected: MANIFEST_FORMAT_VERSION,
        });
    }
    Ok(m)
}

/// A loaded dataset pair.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub id: String,
    pub x: PointCloud,
    pub y: PointCloud,
    pub t_gt: RigidTransform,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetPair>> {
    load_manifest(dir)?
        .pairs
        .into_iter()
        .map(|e| {
            Ok(DatasetPair {
                x: load_cloud(&dir.join(&e.source))?,
                y: load_cloud(&dir.join(&e.target))?,
                t_gt: load_transform(&dir.join(&e.transform))?,
                id: e.id,
            })
        })
        .collect()
}

fn f6(v: f64) -> String {
    format!("{:.6}", v)
}

/// Render per-pair metrics as CSV with six-decimal floats.
pub fn report_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for (id, r) in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            id,
            f6(r.rre),
            f6(r.rte),
            u8::from(r.rr),
            f6(r.ir),
            u8::from(r.fmr),
            f6(r.overlap),
            r.num_corr,
            f6(r.runtime)
        );
    }
    s
}

/// Summary line: means of the numeric columns, with the `rr` and
/// `fmr_flag` columns holding registration recall and feature matching recall.
pub fn aggregate_csv_line(id: &str, rows: &[(String, MetricsReport)]) -> String {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
    format!(
        "{},{},{},{},{},{},{},{},{}\n",
        id,
        f6(mean(&|r| r.rre)),
        f6(mean(&|r| r.rte)),
        f6(mean(&|r| f64::from(u8::from(r.rr)))),
        f6(mean(&|r| r.ir)),
        f6(mean(&|r| f64::from(u8::from(r.fmr)))),
        f6(mean(&|r| r.overlap)),
        f6(mean(&|r| r.num_corr as f64)),
        f6(mean(&|r| r.runtime))
    )
}

pub fn write_report(rows: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    fs::write(path, report_csv(rows))?;
    Ok(())
}

pub fn write_loss_curve(losses: &[f64], path: &Path) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i, l);
    }
    fs::write(path, s)?;
    Ok(())
}
