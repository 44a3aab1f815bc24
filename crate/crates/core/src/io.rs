//! File formats: point clouds, images, intrinsics, run configuration and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::calibrate::{residual, CalibrationConfig, CalibrationResult, SceneQuality};
use crate::correspondence::{Correspondence, LineFit2D};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::image_edge::{rgb_to_gray, CannyParams, EdgePixelSet, GrayImage};
use crate::lidar_edge::{EdgeExtractionConfig, PointCloud};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn parse_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

// ---------------------------------------------------------------------------
// Point clouds

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCloud {
    pub cloud: PointCloud,
    /// Points dropped because a coordinate was NaN.
    pub nan_dropped: usize,
}

/// Reads `.pcd` (v0.7 ASCII or binary) or whitespace separated `x y z [intensity]`
/// text (`.xyz`, `.xyzi`, `.txt`).
pub fn load_point_cloud(path: &Path) -> Result<LoadedCloud> {
    match extension(path).as_str() {
        "pcd" => parse_pcd(&fs::read(path)?, path),
        "xyz" | "xyzi" | "txt" => parse_xyz(&fs::read_to_string(path)?, path),
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            message: format!("unknown point cloud extension `{other}`"),
        }),
    }
}

fn finish_cloud(points: Vec<Vector3<f64>>, intensity: Option<Vec<f64>>) -> Result<LoadedCloud> {
    let mut kept = Vec::with_capacity(points.len());
    let mut kept_i = intensity.as_ref().map(|_| Vec::with_capacity(points.len()));
    let mut nan_dropped = 0;
    for (i, p) in points.into_iter().enumerate() {
        if p.iter().any(|v| v.is_nan()) {
            nan_dropped += 1;
            continue;
        }
        kept.push(p);
        if let (Some(out), Some(src)) = (kept_i.as_mut(), intensity.as_ref()) {
            out.push(src[i]);
        }
    }
    let cloud = match kept_i {
        Some(i) => PointCloud::with_intensity(kept, i)?,
        None => PointCloud::new(kept),
    };
    Ok(LoadedCloud { cloud, nan_dropped })
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<LoadedCloud> {
    let mut points = Vec::new();
    let mut intensity: Vec<f64> = Vec::new();
    let mut columns = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, format!("line {}", ln + 1), e.to_string()))?;
        if vals.len() != 3 && vals.len() != 4 {
            return Err(parse_err(path, format!("line {}", ln + 1), "expected 3 or 4 columns"));
        }
        match columns {
            None => columns = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(parse_err(path, format!("line {}", ln + 1), "column count changed"))
            }
            _ => {}
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 4 {
            intensity.push(vals[3]);
        }
    }
    finish_cloud(points, (columns == Some(4)).then_some(intensity))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcdEncoding {
    Ascii,
    Binary,
}

struct PcdField {
    name: String,
    size: usize,
    kind: u8,
    count: usize,
}

fn read_binary_value(bytes: &[u8], kind: u8, size: usize) -> Option<f64> {
    let b = bytes.get(..size)?;
    Some(match (kind, size) {
        (b'F', 4) => f32::from_le_bytes(b.try_into().ok()?) as f64,
        (b'F', 8) => f64::from_le_bytes(b.try_into().ok()?),
        (b'U', 1) => b[0] as f64,
        (b'U', 2) => u16::from_le_bytes(b.try_into().ok()?) as f64,
        (b'U', 4) => u32::from_le_bytes(b.try_into().ok()?) as f64,
        (b'I', 1) => b[0] as i8 as f64,
        (b'I', 2) => i16::from_le_bytes(b.try_into().ok()?) as f64,
        (b'I', 4) => i32::from_le_bytes(b.try_into().ok()?) as f64,
        _ => return None,
    })
}

pub fn parse_pcd(bytes: &[u8], path: &Path) -> Result<LoadedCloud> {
    let mut header: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut offset = 0;
    let mut data_kind = None;
    let mut line_no = 0;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| offset + p + 1);
        line_no += 1;
        let line = std::str::from_utf8(&bytes[offset..end])
            .map_err(|_| parse_err(path, format!("header line {line_no}"), "not UTF-8"))?
            .trim();
        offset = end;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default().to_ascii_uppercase();
        let vals: Vec<String> = parts.map(str::to_string).collect();
        if key == "DATA" {
            data_kind = vals.first().cloned();
            break;
        }
        header.insert(key, vals);
    }
    let data_kind =
        data_kind.ok_or_else(|| parse_err(path, "header", "missing DATA line"))?;
    let get = |k: &str| {
        header
            .get(k)
            .ok_or_else(|| parse_err(path, "header", format!("missing {k}")))
    };
    let names = get("FIELDS")?.clone();
    let sizes = get("SIZE")?;
    let types = get("TYPE")?;
    let counts: Vec<String> = header
        .get("COUNT")
        .cloned()
        .unwrap_or_else(|| vec!["1".into(); names.len()]);
    if sizes.len() != names.len() || types.len() != names.len() || counts.len() != names.len() {
        return Err(parse_err(path, "header", "FIELDS/SIZE/TYPE/COUNT lengths differ"));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(path, "header", format!("bad {what} `{s}`")))
    };
    let mut fields = Vec::new();
    for i in 0..names.len() {
        fields.push(PcdField {
            name: names[i].to_ascii_lowercase(),
            size: num(&sizes[i], "SIZE")?,
            kind: types[i].bytes().next().unwrap_or(b'?').to_ascii_uppercase(),
            count: num(&counts[i], "COUNT")?,
        });
    }
    let n_points = match header.get("POINTS").and_then(|v| v.first()) {
        Some(v) => num(v, "POINTS")?,
        None => {
            let w = num(get("WIDTH")?.first().map_or("", |s| s), "WIDTH")?;
            let h = num(get("HEIGHT")?.first().map_or("1", |s| s), "HEIGHT")?;
            w * h
        }
    };
    let column = |name: &str| {
        let mut col = 0;
        for f in &fields {
            if f.name == name {
                return Some(col);
            }
            col += f.count;
        }
        None
    };
    let (cx, cy, cz) = match (column("x"), column("y"), column("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(path, "header", "FIELDS must include x y z")),
    };
    let ci = column("intensity");
    let width: usize = fields.iter().map(|f| f.count).sum();
    let mut points = Vec::with_capacity(n_points);
    let mut intensity = ci.map(|_| Vec::with_capacity(n_points));
    let mut push = |row: &[f64]| {
        points.push(Vector3::new(row[cx], row[cy], row[cz]));
        if let (Some(out), Some(c)) = (intensity.as_mut(), ci) {
            out.push(row[c]);
        }
    };
    match data_kind.to_ascii_lowercase().as_str() {
        "ascii" => {
            let text = std::str::from_utf8(&bytes[offset..])
                .map_err(|_| parse_err(path, "data", "ASCII data is not UTF-8"))?;
            let mut read = 0;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                if read == n_points {
                    break;
                }
                let loc = || format!("line {}", line_no + i + 1);
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(path, loc(), e.to_string()))?;
                if row.len() != width {
                    return Err(parse_err(path, loc(), format!("expected {width} values")));
                }
                push(&row);
                read += 1;
            }
            if read != n_points {
                return Err(parse_err(path, "data", format!("{read} of {n_points} points present")));
            }
        }
        "binary" => {
            let stride: usize = fields.iter().map(|f| f.size * f.count).sum();
            let data = &bytes[offset..];
            if data.len() < stride * n_points {
                return Err(parse_err(
                    path,
                    format!("byte {}", offset + data.len()),
                    format!("binary data truncated ({} of {} bytes)", data.len(), stride * n_points),
                ));
            }
            let mut row = vec![0.0; width];
            for p in 0..n_points {
                let mut at = p * stride;
                let mut col = 0;
                for f in &fields {
                    for _ in 0..f.count {
                        row[col] = read_binary_value(&data[at..], f.kind, f.size).ok_or_else(|| {
                            Error::UnsupportedFormat {
                                path: path.to_path_buf(),
                                message: format!("field type {}{}", f.kind as char, f.size),
                            }
                        })?;
                        at += f.size;
                        col += 1;
                    }
                }
                push(&row);
            }
        }
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                message: format!("PCD DATA `{other}`"),
            })
        }
    }
    finish_cloud(points, intensity)
}

/// Writes x y z [intensity] as 8-byte floats so a read-back is bit-exact.
pub fn write_pcd(path: &Path, cloud: &PointCloud, encoding: PcdEncoding) -> Result<()> {
    let has_i = cloud.intensity.is_some();
    let n = cloud.len();
    let mut out = String::new();
    out.push_str("# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\n");
    if has_i {
        out.push_str("FIELDS x y z intensity\nSIZE 8 8 8 8\nTYPE F F F F\nCOUNT 1 1 1 1\n");
    } else {
        out.push_str("FIELDS x y z\nSIZE 8 8 8\nTYPE F F F\nCOUNT 1 1 1\n");
    }
    let _ = write!(out, "WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\n");
    let mut bytes;
    match encoding {
        PcdEncoding::Ascii => {
            out.push_str("DATA ascii\n");
            for (i, p) in cloud.points.iter().enumerate() {
                let _ = write!(out, "{:?} {:?} {:?}", p.x, p.y, p.z);
                if let Some(v) = &cloud.intensity {
                    let _ = write!(out, " {:?}", v[i]);
                }
                out.push('\n');
            }
            bytes = out.into_bytes();
        }
        PcdEncoding::Binary => {
            out.push_str("DATA binary\n");
            bytes = out.into_bytes();
            for (i, p) in cloud.points.iter().enumerate() {
                for v in p.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(v) = &cloud.intensity {
                    bytes.extend_from_slice(&v[i].to_le_bytes());
                }
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Images

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let ext = extension(path);
    if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            message: format!("unknown image extension `{ext}`"),
        });
    }
    let reader = image::ImageReader::open(path)?
        .with_guessed_format()
        .map_err(Error::Io)?;
    reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            message: u.to_string(),
        },
        other => parse_err(path, "image data", other.to_string()),
    })
}

/// PNG or JPEG; color is converted with the BT.601 luma weights, gray passes through.
pub fn load_image(path: &Path) -> Result<GrayImage> {
    let img = decode(path)?;
    let (w, h) = (img.width(), img.height());
    let pixels = match img {
        image::DynamicImage::ImageLuma8(g) => g.into_raw(),
        image::DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0]).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| rgb_to_gray(p.0[0], p.0[1], p.0[2]))
            .collect(),
    };
    GrayImage::new(w, h, pixels)
}

/// Edge map image: pixels at or above 128 are edges.
pub fn load_edge_map(path: &Path) -> Result<EdgePixelSet> {
    let g = load_image(path)?;
    let mut pts = Vec::new();
    for y in 0..g.height {
        for x in 0..g.width {
            if g.get(x, y) >= 128 {
                pts.push(Vector2::new(x as f64, y as f64));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyImage);
    }
    EdgePixelSet::new(pts, g.width, g.height)
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    image::GrayImage::from_raw(img.width, img.height, img.pixels.clone())
        .ok_or_else(|| Error::InvalidParameter("image buffer size mismatch".into()))?
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Renders an edge pixel set as a white-on-black PNG.
pub fn save_edge_map(path: &Path, set: &EdgePixelSet, width: u32, height: u32) -> Result<()> {
    let mut img = GrayImage::filled(width, height, 0);
    for p in set.pixels() {
        let (x, y) = (p.x.round(), p.y.round());
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            img.pixels[y as usize * width as usize + x as usize] = 255;
        }
    }
    save_gray_png(path, &img)
}

pub fn save_rgb_png(path: &Path, width: u32, height: u32, rgb: Vec<u8>) -> Result<()> {
    image::RgbImage::from_raw(width, height, rgb)
        .ok_or_else(|| Error::InvalidParameter("image buffer size mismatch".into()))?
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Key/value text

/// `key = value` lines; `#` starts a comment. Returns (line number, key, value).
fn key_values(text: &str) -> Vec<(usize, String, String)> {
    text.lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                return None;
            }
            let (k, v) = l.split_once('=').or_else(|| l.split_once(':'))?;
            Some((i + 1, k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Text intrinsics: `fx fy cx cy width height` are required; `k1 k2 k3 p1 p2`
/// default to zero.
pub fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let mut map = BTreeMap::new();
    for (line, k, v) in key_values(text) {
        let value: f64 = v
            .parse()
            .map_err(|_| parse_err(path, format!("line {line}"), format!("bad value for `{k}`")))?;
        map.insert(k.to_ascii_lowercase(), (line, value));
    }
    let need = |k: &str| {
        map.get(k).map(|v| v.1).ok_or_else(|| Error::MissingKey {
            path: path.to_path_buf(),
            key: k.to_string(),
        })
    };
    let size = |k: &str| -> Result<u32> {
        let v = need(k)?;
        if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
            return Err(parse_err(path, format!("line {}", map[k].0), format!("`{k}` must be a pixel count")));
        }
        Ok(v as u32)
    };
    let opt = |k: &str| map.get(k).map_or(0.0, |v| v.1);
    let k = CameraIntrinsics {
        fx: need("fx")?,
        fy: need("fy")?,
        cx: need("cx")?,
        cy: need("cy")?,
        k1: opt("k1"),
        k2: opt("k2"),
        k3: opt("k3"),
        p1: opt("p1"),
        p2: opt("p2"),
        width: size("width")?,
        height: size("height")?,
    };
    k.validate()?;
    Ok(k)
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    parse_intrinsics(&fs::read_to_string(path)?, path)
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "fx = {:?}\nfy = {:?}\ncx = {:?}\ncy = {:?}\nk1 = {:?}\nk2 = {:?}\nk3 = {:?}\np1 = {:?}\np2 = {:?}\nwidth = {}\nheight = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.k1, k.k2, k.k3, k.p1, k.p2, k.width, k.height
    )
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSourceKind {
    /// Run Canny on the photo.
    #[default]
    Canny,
    /// The image is already a binary edge map.
    EdgeMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub name: String,
    pub cloud: PathBuf,
    pub image: PathBuf,
    /// Falls back to the top-level intrinsics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<PathBuf>,
    /// Photo drawn under the overlay when `image` is an edge map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialExtrinsic {
    /// Yaw, pitch, roll (degrees) of the LiDAR-to-camera rotation.
    pub euler_zyx_deg: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for InitialExtrinsic {
    fn default() -> Self {
        let t = crate::sim::nominal_extrinsic();
        Self {
            euler_zyx_deg: t.euler_zyx_degrees(),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl InitialExtrinsic {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_euler_zyx_degrees(self.euler_zyx_deg, self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub intrinsics: Option<PathBuf>,
    #[serde(rename = "scene")]
    pub scenes: Vec<SceneConfig>,
    /// Voxel size (meters) for edge extraction; overrides `edges.voxel_size`.
    pub voxel_size: Option<f64>,
    pub initial_extrinsic: InitialExtrinsic,
    /// Run the grid search before the fine optimization.
    pub rough: bool,
    pub edge_source: EdgeSourceKind,
    pub write_overlay: bool,
    pub edges: EdgeExtractionConfig,
    pub canny: CannyParams,
    pub calibration: CalibrationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("edgecal-out"),
            intrinsics: None,
            scenes: Vec::new(),
            voxel_size: None,
            initial_extrinsic: InitialExtrinsic::default(),
            rough: true,
            edge_source: EdgeSourceKind::Canny,
            write_overlay: true,
            edges: EdgeExtractionConfig::default(),
            canny: CannyParams::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

/// Sets `a.b.c = value` in a TOML table; the value is parsed as TOML and taken as a
/// bare string if that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidParameter(format!("override `{assignment}` needs key=value")))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidParameter(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let path = base.join("<config>");
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| parse_err(&path, "toml", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(&path, "toml", e.to_string()))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides).map_err(|e| match e {
            Error::Parse { location, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                location,
                message,
            },
            other => other,
        })
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.intrinsics.as_mut() {
            fix(p);
        }
        for s in &mut self.scenes {
            fix(&mut s.cloud);
            fix(&mut s.image);
            if let Some(p) = s.intrinsics.as_mut() {
                fix(p);
            }
            if let Some(p) = s.photo.as_mut() {
                fix(p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Edge extraction parameters with `voxel_size` applied.
    pub fn edge_config(&self) -> EdgeExtractionConfig {
        let mut e = self.edges;
        if let Some(v) = self.voxel_size {
            e.voxel_size = v;
        }
        e
    }

    pub fn intrinsics_path<'a>(&'a self, scene: &'a SceneConfig) -> Option<&'a Path> {
        scene.intrinsics.as_deref().or(self.intrinsics.as_deref())
    }

    /// Parameter ranges and file presence.
    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::InvalidParameter("at least one scene is required".into()));
        }
        if !(self.edge_config().voxel_size > 0.0) {
            return Err(Error::InvalidParameter("voxel_size must be positive".into()));
        }
        self.calibration.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for s in &self.scenes {
            if !names.insert(&s.name) {
                return Err(Error::InvalidParameter(format!("duplicate scene name `{}`", s.name)));
            }
            let k = self.intrinsics_path(s).ok_or_else(|| {
                Error::InvalidParameter(format!("scene `{}` has no intrinsics file", s.name))
            })?;
            for p in [s.cloud.as_path(), s.image.as_path(), k].into_iter().chain(s.photo.as_deref()) {
                if !p.is_file() {
                    return Err(Error::InvalidParameter(format!(
                        "scene `{}`: file {} not found",
                        s.name,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Report

/// Statistics of |r| after dropping the largest 20 %.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualStats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Fraction of the largest absolute residuals treated as outliers.
pub const OUTLIER_FRACTION: f64 = 0.2;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ResidualStats {
    pub fn from_residuals(residuals: &[f64]) -> Self {
        let mut a: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
        a.sort_by(f64::total_cmp);
        let keep = a.len() - (a.len() as f64 * OUTLIER_FRACTION).floor() as usize;
        let a = &a[..keep];
        if a.is_empty() {
            return Self::default();
        }
        Self {
            count: a.len(),
            min: a[0],
            q1: quantile(a, 0.25),
            median: quantile(a, 0.5),
            q3: quantile(a, 0.75),
            max: a[a.len() - 1],
            mean: a.iter().sum::<f64>() / a.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Converged,
    RankDeficient,
    NotConverged,
}

impl ReportStatus {
    fn as_str(&self) -> &'static str {
        match self {
            ReportStatus::Converged => "converged",
            ReportStatus::RankDeficient => "rank_deficient",
            ReportStatus::NotConverged => "not_converged",
        }
    }
}

/// One stored correspondence with its residual at the reported extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRecord {
    pub lidar_point: Vector3<f64>,
    pub q: Vector2<f64>,
    pub n: Vector2<f64>,
    pub residual: f64,
}

impl ResidualRecord {
    pub fn from_correspondence(c: &Correspondence, r: f64) -> Self {
        Self {
            lidar_point: c.lidar_point,
            q: c.line.q,
            n: c.line.n,
            residual: r,
        }
    }

    /// Recomputes the residual under `t`.
    pub fn reproject(&self, t: &RigidTransform, k: &CameraIntrinsics) -> Result<f64> {
        let line = LineFit2D {
            q: self.q,
            n: self.n,
            d: Vector2::new(self.n.y, -self.n.x),
            eigen_ratio: 0.0,
        };
        let c = Correspondence::new(self.lidar_point, line, Vector3::x())?;
        residual(&c, t, k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneReport {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub lidar_points: usize,
    pub nan_dropped: usize,
    pub lidar_edges: usize,
    pub edge_pixels: usize,
    pub correspondences: usize,
    pub stats: ResidualStats,
    pub quality: Option<SceneQuality>,
    pub records: Vec<ResidualRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub version: String,
    pub status: ReportStatus,
    /// Error message when the status is not `converged`.
    pub message: Option<String>,
    pub initial_extrinsic: RigidTransform,
    /// Result of the grid search, if it ran.
    pub rough_extrinsic: Option<RigidTransform>,
    pub result: Option<CalibrationResult>,
    pub scenes: Vec<SceneReport>,
    /// Echo of the run configuration (TOML text).
    pub config: String,
}

fn fmt_list<'a>(v: impl IntoIterator<Item = &'a f64>) -> String {
    let items: Vec<String> = v.into_iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_transform(out: &mut String, prefix: &str, t: &RigidTransform) {
    let r: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| t.rotation[(i, j)]).collect();
    let _ = writeln!(out, "{prefix}.rotation = {}", fmt_list(&r));
    let _ = writeln!(out, "{prefix}.translation = {}", fmt_list(t.translation.as_slice()));
}

impl CalibrationReport {
    pub fn residuals(&self) -> Vec<f64> {
        self.scenes
            .iter()
            .flat_map(|s| s.records.iter().map(|r| r.residual))
            .collect()
    }

    /// Extrinsic the stored residuals refer to.
    pub fn final_extrinsic(&self) -> RigidTransform {
        self.result
            .as_ref()
            .map(|r| r.extrinsic)
            .or(self.rough_extrinsic)
            .unwrap_or(self.initial_extrinsic)
    }

    pub fn serialize(&self) -> String {
        let mut o = String::new();
        o.push_str("# edgecal calibration report\n");
        let _ = writeln!(o, "version = {}", self.version);
        let _ = writeln!(o, "status = {}", self.status.as_str());
        if let Some(m) = &self.message {
            let _ = writeln!(o, "message = {}", m.replace('\n', " "));
        }
        fmt_transform(&mut o, "initial", &self.initial_extrinsic);
        if let Some(t) = &self.rough_extrinsic {
            fmt_transform(&mut o, "rough", t);
        }
        if let Some(r) = &self.result {
            o.push_str("\n[result]\n");
            fmt_transform(&mut o, "extrinsic", &r.extrinsic);
            let e = r.extrinsic.euler_zyx_degrees();
            let _ = writeln!(o, "# euler_zyx_deg = [{:.6}, {:.6}, {:.6}]", e[0], e[1], e[2]);
            let _ = writeln!(o, "covariance = {}", fmt_list(r.covariance.as_slice()));
            let _ = writeln!(o, "sigma = {}", fmt_list(r.sigma.as_slice()));
            let _ = writeln!(o, "normalized_cost = {:?}", r.normalized_cost);
            let _ = writeln!(o, "iterations = {}", r.iterations);
            let _ = writeln!(o, "correspondences = {}", r.correspondences);
            let _ = writeln!(o, "pc_before = {:?}", r.pc_before);
            let _ = writeln!(o, "pc_after = {:?}", r.pc_after);
            let _ = writeln!(o, "cost_history = {}", fmt_list(&r.cost_history));
            let _ = writeln!(o, "residuals = {}", fmt_list(&r.residuals));
        }
        for s in &self.scenes {
            o.push_str("\n[scene]\n");
            let _ = writeln!(o, "name = {}", s.name);
            let k = &s.intrinsics;
            let _ = writeln!(
                o,
                "intrinsics = {}",
                fmt_list(&[k.fx, k.fy, k.cx, k.cy, k.k1, k.k2, k.k3, k.p1, k.p2, k.width as f64, k.height as f64])
            );
            let _ = writeln!(o, "lidar_points = {}", s.lidar_points);
            let _ = writeln!(o, "nan_dropped = {}", s.nan_dropped);
            let _ = writeln!(o, "lidar_edges = {}", s.lidar_edges);
            let _ = writeln!(o, "edge_pixels = {}", s.edge_pixels);
            let _ = writeln!(o, "correspondences = {}", s.correspondences);
            let st = &s.stats;
            let _ = writeln!(o, "residual.count = {}", st.count);
            for (k, v) in [("min", st.min), ("q1", st.q1), ("median", st.median), ("q3", st.q3), ("max", st.max), ("mean", st.mean)] {
                let _ = writeln!(o, "residual.{k} = {v:?}");
            }
            if let Some(q) = &s.quality {
                let _ = writeln!(o, "quality.condition_number = {:?}", q.condition_number);
                let _ = writeln!(o, "quality.structural_condition = {:?}", q.structural_condition);
                let _ = writeln!(o, "quality.eigenvalues = {}", fmt_list(q.eigenvalues.as_slice()));
                let h: Vec<f64> = q.histogram.iter().flatten().map(|&c| c as f64).collect();
                let _ = writeln!(o, "quality.histogram = {}", fmt_list(&h));
                let _ = writeln!(o, "quality.information = {}", fmt_list(q.information.as_slice()));
                let _ = writeln!(o, "quality.uneven_distribution = {}", q.uneven_distribution);
                let _ = writeln!(o, "quality.rank_deficient = {}", q.rank_deficient);
            }
            for r in &s.records {
                let _ = writeln!(
                    o,
                    "match = {}",
                    fmt_list(&[r.lidar_point.x, r.lidar_point.y, r.lidar_point.z, r.q.x, r.q.y, r.n.x, r.n.y, r.residual])
                );
            }
        }
        o.push_str("\n[config]\n");
        for line in self.config.lines() {
            let _ = writeln!(o, "line = {line}");
        }
        o
    }

    pub fn parse(text: &str) -> Result<Self> {
        ReportParser::default().run(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Parse { location, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                location,
                message,
            },
            other => other,
        })
    }
}

#[derive(Default)]
struct ReportParser {
    version: Option<String>,
    status: Option<ReportStatus>,
    message: Option<String>,
    initial: [Option<Vec<f64>>; 2],
    rough: [Option<Vec<f64>>; 2],
    result: Option<BTreeMap<String, String>>,
    scenes: Vec<BTreeMap<String, Vec<String>>>,
    config: Vec<String>,
}

fn report_err(line: usize, msg: impl Into<String>) -> Error {
    parse_err(Path::new("<report>"), format!("line {line}"), msg)
}

fn parse_list(v: &str, line: usize) -> Result<Vec<f64>> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| report_err(line, "expected [..] list"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| report_err(line, e.to_string())))
        .collect()
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| report_err(line, e.to_string()))
}

fn transform_from(r: &[f64], t: &[f64], line: usize) -> Result<RigidTransform> {
    if r.len() != 9 || t.len() != 3 {
        return Err(report_err(line, "transform needs 9 rotation and 3 translation values"));
    }
    Ok(RigidTransform {
        rotation: Matrix3::from_row_slice(r),
        translation: Vector3::new(t[0], t[1], t[2]),
    })
}

impl ReportParser {
    fn run(mut self, text: &str) -> Result<CalibrationReport> {
        #[derive(PartialEq)]
        enum Section {
            Top,
            Result,
            Scene,
            Config,
        }
        let mut section = Section::Top;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.trim_end();
            if section == Section::Config {
                if let Some(rest) = line.strip_prefix("line =") {
                    self.config.push(rest.strip_prefix(' ').unwrap_or(rest).to_string());
                    continue;
                }
            }
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            match t {
                "[result]" => {
                    section = Section::Result;
                    self.result = Some(BTreeMap::new());
                    continue;
                }
                "[scene]" => {
                    section = Section::Scene;
                    self.scenes.push(BTreeMap::new());
                    continue;
                }
                "[config]" => {
                    section = Section::Config;
                    continue;
                }
                _ => {}
            }
            let (k, v) = t
                .split_once(" = ")
                .or_else(|| t.split_once('=').map(|(a, b)| (a.trim(), b.trim())))
                .ok_or_else(|| report_err(ln, "expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            match section {
                Section::Top => match k {
                    "version" => self.version = Some(v.to_string()),
                    "status" => {
                        self.status = Some(match v {
                            "converged" => ReportStatus::Converged,
                            "rank_deficient" => ReportStatus::RankDeficient,
                            "not_converged" => ReportStatus::NotConverged,
                            _ => return Err(report_err(ln, format!("unknown status `{v}`"))),
                        })
                    }
                    "message" => self.message = Some(v.to_string()),
                    "initial.rotation" => self.initial[0] = Some(parse_list(v, ln)?),
                    "initial.translation" => self.initial[1] = Some(parse_list(v, ln)?),
                    "rough.rotation" => self.rough[0] = Some(parse_list(v, ln)?),
                    "rough.translation" => self.rough[1] = Some(parse_list(v, ln)?),
                    _ => return Err(report_err(ln, format!("unknown key `{k}`"))),
                },
                Section::Result => {
                    self.result
                        .as_mut()
                        .expect("result section open")
                        .insert(k.to_string(), format!("{ln}\u{1}{v}"));
                }
                Section::Scene => {
                    self.scenes
                        .last_mut()
                        .expect("scene section open")
                        .entry(k.to_string())
                        .or_default()
                        .push(format!("{ln}\u{1}{v}"));
                }
                Section::Config => return Err(report_err(ln, "config lines must start with `line =`")),
            }
        }
        self.finish()
    }

    fn finish(self) -> Result<CalibrationReport> {
        let version = self.version.ok_or_else(|| report_err(0, "missing version"))?;
        let status = self.status.ok_or_else(|| report_err(0, "missing status"))?;
        let initial = match &self.initial {
            [Some(r), Some(t)] => transform_from(r, t, 0)?,
            _ => return Err(report_err(0, "missing initial extrinsic")),
        };
        let rough_extrinsic = match &self.rough {
            [Some(r), Some(t)] => Some(transform_from(r, t, 0)?),
            [None, None] => None,
            _ => return Err(report_err(0, "incomplete rough extrinsic")),
        };
        let split = |s: &str| -> (usize, String) {
            let (a, b) = s.split_once('\u{1}').unwrap_or(("0", s));
            (a.parse().unwrap_or(0), b.to_string())
        };
        let result = match &self.result {
            None => None,
            Some(m) => {
                let get = |k: &str| -> Result<(usize, String)> {
                    m.get(k).map(|s| split(s)).ok_or_else(|| report_err(0, format!("result is missing `{k}`")))
                };
                let list = |k: &str| -> Result<Vec<f64>> {
                    let (ln, v) = get(k)?;
                    parse_list(&v, ln)
                };
                let (ln, _) = get("extrinsic.rotation")?;
                let extrinsic = transform_from(&list("extrinsic.rotation")?, &list("extrinsic.translation")?, ln)?;
                let cov = list("covariance")?;
                let sigma = list("sigma")?;
                if cov.len() != 36 || sigma.len() != 6 {
                    return Err(report_err(ln, "covariance needs 36 and sigma 6 values"));
                }
                let num_f = |k: &str| -> Result<f64> {
                    let (ln, v) = get(k)?;
                    parse_num(&v, ln)
                };
                let num_u = |k: &str| -> Result<usize> {
                    let (ln, v) = get(k)?;
                    parse_num(&v, ln)
                };
                Some(CalibrationResult {
                    extrinsic,
                    covariance: Matrix6::from_column_slice(&cov),
                    sigma: Vector6::from_column_slice(&sigma),
                    residuals: list("residuals")?,
                    normalized_cost: num_f("normalized_cost")?,
                    iterations: num_u("iterations")?,
                    correspondences: num_u("correspondences")?,
                    pc_before: num_f("pc_before")?,
                    pc_after: num_f("pc_after")?,
                    cost_history: list("cost_history")?,
                })
            }
        };
        let mut scenes = Vec::new();
        for m in &self.scenes {
            let one = |k: &str| -> Result<(usize, String)> {
                m.get(k)
                    .and_then(|v| v.first())
                    .map(|s| split(s))
                    .ok_or_else(|| report_err(0, format!("scene is missing `{k}`")))
            };
            let f = |k: &str| -> Result<f64> {
                let (ln, v) = one(k)?;
                parse_num(&v, ln)
            };
            let u = |k: &str| -> Result<usize> {
                let (ln, v) = one(k)?;
                parse_num(&v, ln)
            };
            let list = |k: &str| -> Result<Vec<f64>> {
                let (ln, v) = one(k)?;
                parse_list(&v, ln)
            };
            let b = |k: &str| -> Result<bool> {
                let (ln, v) = one(k)?;
                parse_num(&v, ln)
            };
            let kv = list("intrinsics")?;
            if kv.len() != 11 {
                return Err(report_err(one("intrinsics")?.0, "intrinsics needs 11 values"));
            }
            let intrinsics = CameraIntrinsics {
                fx: kv[0],
                fy: kv[1],
                cx: kv[2],
                cy: kv[3],
                k1: kv[4],
                k2: kv[5],
                k3: kv[6],
                p1: kv[7],
                p2: kv[8],
                width: kv[9] as u32,
                height: kv[10] as u32,
            };
            let quality = if m.contains_key("quality.condition_number") {
                let hist = list("quality.histogram")?;
                let info = list("quality.information")?;
                let eig = list("quality.eigenvalues")?;
                if hist.len() != 9 || info.len() != 36 || eig.len() != 6 {
                    return Err(report_err(one("quality.histogram")?.0, "bad quality block sizes"));
                }
                let mut histogram = [[0usize; 3]; 3];
                for (i, v) in hist.iter().enumerate() {
                    histogram[i / 3][i % 3] = *v as usize;
                }
                Some(SceneQuality {
                    information: Matrix6::from_column_slice(&info),
                    eigenvalues: Vector6::from_column_slice(&eig),
                    condition_number: f("quality.condition_number")?,
                    histogram,
                    uneven_distribution: b("quality.uneven_distribution")?,
                    structural_condition: f("quality.structural_condition")?,
                    rank_deficient: b("quality.rank_deficient")?,
                })
            } else {
                None
            };
            let mut records = Vec::new();
            for s in m.get("match").map(Vec::as_slice).unwrap_or_default() {
                let (ln, v) = split(s);
                let x = parse_list(&v, ln)?;
                if x.len() != 8 {
                    return Err(report_err(ln, "match needs 8 values"));
                }
                records.push(ResidualRecord {
                    lidar_point: Vector3::new(x[0], x[1], x[2]),
                    q: Vector2::new(x[3], x[4]),
                    n: Vector2::new(x[5], x[6]),
                    residual: x[7],
                });
            }
            scenes.push(SceneReport {
                name: one("name")?.1,
                intrinsics,
                lidar_points: u("lidar_points")?,
                nan_dropped: u("nan_dropped")?,
                lidar_edges: u("lidar_edges")?,
                edge_pixels: u("edge_pixels")?,
                correspondences: u("correspondences")?,
                stats: ResidualStats {
                    count: u("residual.count")?,
                    min: f("residual.min")?,
                    q1: f("residual.q1")?,
                    median: f("residual.median")?,
                    q3: f("residual.q3")?,
                    max: f("residual.max")?,
                    mean: f("residual.mean")?,
                },
                quality,
                records,
            });
        }
        let mut config = self.config.join("\n");
        if !self.config.is_empty() {
            config.push('\n');
        }
        Ok(CalibrationReport {
            version,
            status,
            message: self.message,
            initial_extrinsic: initial,
            rough_extrinsic,
            result,
            scenes,
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn ascii_pcd_is_bit_exact() {
        let text = "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\nWIDTH 3\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS 3\nDATA ascii\n0.1 0.2 0.3\n1e-7 -2.5 3\n4 5 6.125\n";
        let c = parse_pcd(text.as_bytes(), Path::new("a.pcd")).unwrap();
        assert_eq!(c.cloud.len(), 3);
        assert_eq!(c.cloud.points[0], Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(c.cloud.points[1], Vector3::new(1e-7, -2.5, 3.0));
        assert_eq!(c.nan_dropped, 0);
    }

    #[test]
    fn binary_pcd_round_trip() {
        let d = tmp();
        let pts: Vec<_> = (0..50).map(|i| Vector3::new(i as f64 * 0.137, -(i as f64).sqrt(), 1.0 / (i as f64 + 3.0))).collect();
        let inten: Vec<f64> = (0..50).map(|i| i as f64 * 0.5).collect();
        let cloud = PointCloud::with_intensity(pts, inten).unwrap();
        for enc in [PcdEncoding::Binary, PcdEncoding::Ascii] {
            let p = d.path().join("c.pcd");
            write_pcd(&p, &cloud, enc).unwrap();
            assert_eq!(load_point_cloud(&p).unwrap().cloud, cloud);
        }
    }

    #[test]
    fn binary_pcd_with_float32_fields() {
        let mut bytes = b"VERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 1\nTYPE F F F U\nCOUNT 1 1 1 1\nWIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA binary\n".to_vec();
        for (p, i) in [([1.5f32, -2.0, 0.25], 7u8), ([3.0, 4.0, 5.0], 200)] {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(i);
        }
        let c = parse_pcd(&bytes, Path::new("b.pcd")).unwrap();
        assert_eq!(c.cloud.points[0], Vector3::new(1.5, -2.0, 0.25));
        assert_eq!(c.cloud.intensity.unwrap(), vec![7.0, 200.0]);
        let err = parse_pcd(&bytes[..bytes.len() - 3], Path::new("b.pcd")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn compressed_pcd_is_unsupported() {
        let text = "FIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nPOINTS 1\nDATA binary_compressed\n";
        let err = parse_pcd(text.as_bytes(), Path::new("c.pcd")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }));
    }

    #[test]
    fn xyz_drops_nan_rows() {
        let mut text = String::from("# x y z i\n");
        for i in 0..10 {
            if i % 2 == 0 {
                text.push_str(&format!("{i} nan 1 0.5\n"));
            } else {
                text.push_str(&format!("{i} 2 3 0.5\n"));
            }
        }
        let c = parse_xyz(&text, Path::new("p.xyz")).unwrap();
        assert_eq!(c.nan_dropped, 5);
        assert_eq!(c.cloud.len(), 5);
        assert_eq!(c.cloud.intensity.as_ref().unwrap().len(), 5);
        let err = parse_xyz("1 2 3\n1 2 x\n", Path::new("p.xyz")).unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 2"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_cloud_extension() {
        let err = load_point_cloud(Path::new("cloud.las")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }));
    }

    #[test]
    fn png_color_to_gray() {
        let d = tmp();
        let p = d.path().join("c.png");
        let px = [[255u8, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30]];
        let raw: Vec<u8> = px.iter().flatten().copied().collect();
        image::RgbImage::from_raw(2, 2, raw).unwrap().save(&p).unwrap();
        let g = load_image(&p).unwrap();
        // 0.299 R + 0.587 G + 0.114 B, rounded.
        assert_eq!(g.pixels, vec![76, 150, 29, 18]);
    }

    #[test]
    fn gray_png_passes_through_and_truncation_fails() {
        let d = tmp();
        let p = d.path().join("g.png");
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 250, 251, 252]).unwrap();
        save_gray_png(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
        let bytes = fs::read(&p).unwrap();
        let q = d.path().join("t.png");
        fs::write(&q, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&q).unwrap_err(), Error::Parse { .. }));
    }

    #[test]
    fn intrinsics_file() {
        let full = "fx = 500\nfy = 501\ncx = 320\ncy = 240\nk1 = -0.1\nk2 = 0.01\nk3 = 0.002\np1 = 0.001\np2 = -0.001\nwidth = 640\nheight = 480\n";
        let k = parse_intrinsics(full, Path::new("k.txt")).unwrap();
        assert_eq!((k.fx, k.fy, k.k3, k.p2, k.width), (500.0, 501.0, 0.002, -0.001, 640));
        assert_eq!(parse_intrinsics(&format_intrinsics(&k), Path::new("k.txt")).unwrap(), k);
        let no_k3 = full.replace("k3 = 0.002\n", "");
        assert_eq!(parse_intrinsics(&no_k3, Path::new("k.txt")).unwrap().k3, 0.0);
        let no_fy = full.replace("fy = 501\n", "");
        match parse_intrinsics(&no_fy, Path::new("k.txt")).unwrap_err() {
            Error::MissingKey { key, .. } => assert_eq!(key, "fy"),
            e => panic!("{e}"),
        }
        let neg = full.replace("fx = 500", "fx = -1");
        assert!(matches!(parse_intrinsics(&neg, Path::new("k.txt")).unwrap_err(), Error::InvalidParameter(_)));
        let bad = full.replace("cx = 320", "cx = abc");
        assert!(matches!(parse_intrinsics(&bad, Path::new("k.txt")).unwrap_err(), Error::Parse { .. }));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let base = Path::new("/data");
        let text = "output_dir = \"out\"\nintrinsics = \"k.txt\"\n[[scene]]\nname = \"a\"\ncloud = \"a.pcd\"\nimage = \"a.png\"\n";
        let cfg = RunConfig::from_toml(
            text,
            base,
            &["calibration.fine_gates.max_pixel_dist=4.0".into(), "rough=false".into(), "voxel_size=0.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.calibration.fine_gates.max_pixel_dist, 4.0);
        assert!(!cfg.rough);
        assert_eq!(cfg.edge_config().voxel_size, 0.5);
        assert_eq!(cfg.scenes[0].cloud, PathBuf::from("/data/a.pcd"));
        assert_eq!(cfg.output_dir, PathBuf::from("/data/out"));
        let again = RunConfig::from_toml(&cfg.to_toml(), base, &[]).unwrap();
        assert_eq!(again, cfg);
        assert!(RunConfig::from_toml("rough = 3", base, &[]).is_err());
    }

    #[test]
    fn residual_stats_drop_largest_fifth() {
        let r: Vec<f64> = (1..=10).map(|i| if i % 2 == 0 { i as f64 } else { -(i as f64) }).collect();
        let s = ResidualStats::from_residuals(&r);
        assert_eq!(s.count, 8);
        assert_eq!((s.min, s.max), (1.0, 8.0));
        assert_eq!(s.median, 4.5);
        assert_eq!(s.q1, 2.75);
        assert_eq!(s.mean, 4.5);
    }
}
