//! Dataset ingestion and map export.
//!
//! Two on-disk scene layouts are understood:
//!
//! * HCI folders: `input_Cam000.png … input_Cam{MN−1}.png` in row-major
//!   order with `v` fastest, an optional `parameters.cfg` carrying
//!   `disp_min`/`disp_max` (and `num_cams_x`/`num_cams_y`), and an optional
//!   `gt_disp_lowres.pfm`.
//! * Manifest folders: a `manifest.json` of the form
//!   `{"angular": [M, N], "views": [...], "gt": "...", "disp_range": [lo, hi]}`
//!   with paths relative to the folder. `occlusion` (a PFM mask) and `name`
//!   are optional extras written by the synthetic generator.
//!
//! PFM rasters are stored bottom-up on disk; every map in memory is
//! top-down.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lf::{check_angular, synth_scene, LightField, SceneConfig, SceneLayout, SyntheticScene};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HCI_PARAMETERS_FILE: &str = "parameters.cfg";
pub const HCI_GT_FILE: &str = "gt_disp_lowres.pfm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLayout {
    HciFolder,
    SaiGrid,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub lf: LightField,
    pub gt_disparity: Option<Array2<f64>>,
    pub gt_occlusion: Option<Array2<bool>>,
    pub scene_name: String,
    pub source_layout: SourceLayout,
}

impl DatasetEntry {
    pub fn new(
        lf: LightField,
        gt_disparity: Option<Array2<f64>>,
        scene_name: impl Into<String>,
        source_layout: SourceLayout,
    ) -> Result<Self> {
        if let Some(gt) = &gt_disparity {
            if gt.dim() != lf.spatial() {
                return Err(Error::mismatch(
                    "ground-truth disparity extent",
                    format!("{:?}", lf.spatial()),
                    format!("{:?}", gt.dim()),
                ));
            }
        }
        Ok(Self {
            lf,
            gt_disparity,
            gt_occlusion: None,
            scene_name: scene_name.into(),
            source_layout,
        })
    }

    pub fn from_synthetic(scene: SyntheticScene, name: impl Into<String>) -> Self {
        Self {
            lf: scene.lf,
            gt_disparity: Some(scene.gt_disparity),
            gt_occlusion: Some(scene.gt_occlusion),
            scene_name: name.into(),
            source_layout: SourceLayout::Synthetic,
        }
    }
}

// ---------------------------------------------------------------------------
// PFM

/// A portable float map. `pixels` are row-major and top-down with
/// interleaved channels, regardless of the on-disk row order.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Negative means little-endian payload.
    pub scale: f32,
    pub pixels: Vec<f32>,
}

impl PfmImage {
    /// Single-channel little-endian map.
    pub fn from_map(map: &Array2<f64>) -> Self {
        let (height, width) = map.dim();
        Self {
            width,
            height,
            channels: 1,
            scale: -1.0,
            pixels: map.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_mask(mask: &Array2<bool>) -> Self {
        Self::from_map(&mask.mapv(|b| if b { 1.0 } else { 0.0 }))
    }

    pub fn to_map(&self) -> Result<Array2<f64>> {
        if self.channels != 1 {
            return Err(Error::malformed(
                "PFM",
                format!("expected a single-channel map, found {} channels", self.channels),
            ));
        }
        Ok(Array2::from_shape_vec(
            (self.height, self.width),
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
        .expect("pixel count checked at construction"))
    }

    pub fn to_mask(&self) -> Result<Array2<bool>> {
        Ok(self.to_map()?.mapv(|v| v >= 0.5))
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::malformed("PFM", "zero extent"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::malformed(
                "PFM",
                format!("{} channels", self.channels),
            ));
        }
        if self.scale == 0.0 || !self.scale.is_finite() {
            return Err(Error::malformed("PFM", format!("scale {}", self.scale)));
        }
        if self.pixels.len() != self.width * self.height * self.channels {
            return Err(Error::malformed(
                "PFM",
                format!(
                    "{} pixels for {}x{}x{}",
                    self.pixels.len(),
                    self.width,
                    self.height,
                    self.channels
                ),
            ));
        }
        if let Some(bad) = self.pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("PFM pixel {bad}")));
        }
        Ok(())
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::malformed("PFM", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::malformed("PFM", format!("bad magic {other:?}"))),
    };
    let parse_dim = |t: String| -> Result<usize> {
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::malformed("PFM", format!("bad dimension {t:?}")))
    };
    let width = parse_dim(token()?)?;
    let height = parse_dim(token()?)?;
    let scale_tok = token()?;
    let scale: f32 = scale_tok
        .parse()
        .map_err(|_| Error::malformed("PFM", format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::malformed("PFM", format!("scale {scale_tok}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let body_start = pos + 1;
    let count = width * height * channels;
    let needed = count * 4;
    if bytes.len() < body_start + needed {
        return Err(Error::malformed(
            "PFM",
            format!(
                "truncated payload: {} of {needed} bytes",
                bytes.len().saturating_sub(body_start)
            ),
        ));
    }
    let body = &bytes[body_start..body_start + needed];
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut pixels = vec![0.0f32; count];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // file row 0 is the bottom of the image
        let (file_row, within) = (i / row_len, i % row_len);
        pixels[(height - 1 - file_row) * row_len + within] = v;
    }
    let img = PfmImage {
        width,
        height,
        channels,
        scale,
        pixels,
    };
    img.validate()?;
    Ok(img)
}

pub fn encode_pfm(img: &PfmImage) -> Result<Vec<u8>> {
    img.validate()?;
    let magic = if img.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n{:?}\n", img.width, img.height, img.scale).into_bytes();
    let row_len = img.width * img.channels;
    out.reserve(img.pixels.len() * 4);
    for file_row in 0..img.height {
        let row = img.height - 1 - file_row;
        for &v in &img.pixels[row * row_len..(row + 1) * row_len] {
            if img.scale < 0.0 {
                out.extend_from_slice(&v.to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &PfmImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_pfm(path)?.to_map()
}

pub fn write_map(path: impl AsRef<Path>, map: &Array2<f64>) -> Result<()> {
    write_pfm(path, &PfmImage::from_map(map))
}

// ---------------------------------------------------------------------------
// Views

/// Loads an 8- or 16-bit PNG (or any format the decoder knows) as
/// `H × W × C` in [0, 1]; grayscale images keep one channel.
pub fn read_view(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let buf = img.to_rgb32f();
        Ok(Array3::from_shape_fn((h, w, 3), |(r, c, k)| {
            buf.get_pixel(c as u32, r as u32)[k] as f64
        }))
    } else {
        let buf = img.to_luma32f();
        Ok(Array3::from_shape_fn((h, w, 1), |(r, c, _)| {
            buf.get_pixel(c as u32, r as u32)[0] as f64
        }))
    }
}

/// Writes a view as a 16-bit PNG.
pub fn write_view(path: impl AsRef<Path>, view: &Array3<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = view.dim();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let result = if c == 1 {
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            Luma([q(view[[y as usize, x as usize, 0]])])
        })
        .save(path)
    } else {
        ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
            let (r, cc) = (y as usize, x as usize);
            Rgb([q(view[[r, cc, 0]]), q(view[[r, cc, 1]]), q(view[[r, cc, 2]])])
        })
        .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn hci_view_name(index: usize) -> String {
    format!("input_Cam{index:03}.png")
}

// ---------------------------------------------------------------------------
// Scene folders

#[derive(Debug, Clone, Default, PartialEq)]
struct HciParameters {
    disp_range: Option<(f64, f64)>,
    cams: Option<(usize, usize)>,
}

fn read_hci_parameters(path: &Path) -> Result<HciParameters> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lo = None;
    let mut hi = None;
    let mut cams_x = None;
    let mut cams_y = None;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "disp_min" => lo = value.parse::<f64>().ok(),
            "disp_max" => hi = value.parse::<f64>().ok(),
            "num_cams_x" => cams_x = value.parse::<usize>().ok(),
            "num_cams_y" => cams_y = value.parse::<usize>().ok(),
            _ => {}
        }
    }
    Ok(HciParameters {
        disp_range: lo.zip(hi),
        // num_cams_y counts angular rows (u), num_cams_x columns (v)
        cams: cams_y.zip(cams_x),
    })
}

fn scene_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Reads an HCI-layout scene folder.
pub fn read_hci_scene(dir: impl AsRef<Path>) -> Result<DatasetEntry> {
    let dir = dir.as_ref();
    let params_path = dir.join(HCI_PARAMETERS_FILE);
    let params = if params_path.exists() {
        read_hci_parameters(&params_path)?
    } else {
        HciParameters::default()
    };
    let mut present = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name
            .strip_prefix("input_Cam")
            .and_then(|rest| rest.strip_suffix(".png"))
            .and_then(|digits| digits.parse::<usize>().ok())
        {
            present.push(idx);
        }
    }
    present.sort_unstable();
    let Some(&max_idx) = present.last() else {
        return Err(Error::MissingViews(vec![hci_view_name(0)]));
    };
    let (m, n) = match params.cams {
        Some(cams) => cams,
        None => {
            let side = ((max_idx + 1) as f64).sqrt().round() as usize;
            if side * side != max_idx + 1 {
                // the largest view index does not close a square grid
                let side = side + 1;
                (side, side)
            } else {
                (side, side)
            }
        }
    };
    check_angular(m, n)?;
    let missing: Vec<String> = (0..m * n)
        .filter(|i| present.binary_search(i).is_err())
        .map(hci_view_name)
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingViews(missing));
    }
    let views = (0..m * n)
        .map(|i| read_view(dir.join(hci_view_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let lf = LightField::from_views(&views, (m, n))?.with_disparity_range(params.disp_range);
    let gt_path = dir.join(HCI_GT_FILE);
    let gt = if gt_path.exists() {
        Some(read_map(&gt_path)?)
    } else {
        None
    };
    DatasetEntry::new(lf, gt, scene_name(dir), SourceLayout::HciFolder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub angular: [usize; 2],
    pub views: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disp_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

pub fn read_manifest_scene(dir: impl AsRef<Path>) -> Result<DatasetEntry> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let [m, n] = manifest.angular;
    check_angular(m, n)?;
    let missing: Vec<String> = manifest
        .views
        .iter()
        .filter(|v| !dir.join(v).exists())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingViews(missing));
    }
    let views = manifest
        .views
        .iter()
        .map(|v| read_view(dir.join(v)))
        .collect::<Result<Vec<_>>>()?;
    let lf = LightField::from_views(&views, (m, n))?
        .with_disparity_range(manifest.disp_range.map(|[lo, hi]| (lo, hi)));
    let gt = manifest
        .gt
        .as_ref()
        .map(|g| read_map(dir.join(g)))
        .transpose()?;
    let mut entry = DatasetEntry::new(
        lf,
        gt,
        manifest.name.clone().unwrap_or_else(|| scene_name(dir)),
        if manifest.occlusion.is_some() {
            SourceLayout::Synthetic
        } else {
            SourceLayout::SaiGrid
        },
    )?;
    if let Some(occ) = &manifest.occlusion {
        let mask = read_pfm(dir.join(occ))?.to_mask()?;
        if mask.dim() != entry.lf.spatial() {
            return Err(Error::mismatch(
                "occlusion mask extent",
                format!("{:?}", entry.lf.spatial()),
                format!("{:?}", mask.dim()),
            ));
        }
        entry.gt_occlusion = Some(mask);
    }
    Ok(entry)
}

/// Reads a scene folder in either layout; a manifest takes precedence.
pub fn read_scene(dir: impl AsRef<Path>) -> Result<DatasetEntry> {
    let dir = dir.as_ref();
    if dir.join(MANIFEST_FILE).exists() {
        read_manifest_scene(dir)
    } else {
        read_hci_scene(dir)
    }
}

/// Reads every scene folder directly under `root`, sorted by name. A
/// `root` that is itself a scene yields a single entry.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let root = root.as_ref();
    if is_scene_dir(root) {
        return Ok(vec![read_scene(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_scene_dir(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no scene folders under {}",
            root.display()
        )));
    }
    dirs.iter().map(read_scene).collect()
}

fn is_scene_dir(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).exists() || dir.join(hci_view_name(0)).exists()
}

/// Writes a scene in manifest layout: 16-bit PNG views named like HCI
/// cameras, `gt_disparity.pfm`, `gt_occlusion.pfm` and `manifest.json`.
pub fn write_manifest_scene(dir: impl AsRef<Path>, entry: &DatasetEntry) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (m, n) = entry.lf.angular();
    let mut views = Vec::with_capacity(m * n);
    for u in 0..m {
        for v in 0..n {
            let name = hci_view_name(u * n + v);
            write_view(dir.join(&name), &entry.lf.view(u, v).to_owned())?;
            views.push(name);
        }
    }
    let gt = match &entry.gt_disparity {
        Some(map) => {
            write_map(dir.join("gt_disparity.pfm"), map)?;
            Some("gt_disparity.pfm".to_string())
        }
        None => None,
    };
    let occlusion = match &entry.gt_occlusion {
        Some(mask) => {
            write_pfm(dir.join("gt_occlusion.pfm"), &PfmImage::from_mask(mask))?;
            Some("gt_occlusion.pfm".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        angular: [m, n],
        views,
        gt,
        disp_range: entry.lf.disparity_range().map(|(lo, hi)| [lo, hi]),
        occlusion,
        name: Some(entry.scene_name.clone()),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Writes random occluder scenes `scene_NNN` for every index in `indices`
/// under `root`, using `base` for everything but the layout. Scene `i`
/// depends only on `(seed, i)`, so disjoint index ranges give disjoint,
/// reproducible splits.
pub fn write_synthetic_dataset(
    root: impl AsRef<Path>,
    indices: std::ops::Range<usize>,
    seed: u64,
    base: &SceneConfig,
) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::with_capacity(indices.len());
    for i in indices {
        let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let cfg = SceneConfig {
            layout: SceneLayout::random_occluder(base.height, base.width, base.max_disparity, scene_seed),
            ..base.clone()
        };
        let name = format!("scene_{i:03}");
        let scene = synth_scene(&cfg, scene_seed)?;
        let dir = root.join(&name);
        write_manifest_scene(&dir, &DatasetEntry::from_synthetic(scene, name))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

// ---------------------------------------------------------------------------
// Angular crop and visual export

/// Keeps the central `M' × N'` views.
pub fn crop_angular(lf: &LightField, target: (usize, usize)) -> Result<LightField> {
    let (m, n) = lf.angular();
    let (tm, tn) = target;
    check_angular(tm, tn)?;
    if tm > m || tn > n {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {m}x{n} views to {tm}x{tn}"
        )));
    }
    let (ou, ov) = ((m - tm) / 2, (n - tn) / 2);
    let data = lf
        .data()
        .slice(s![ou..ou + tm, ov..ov + tn, .., .., ..])
        .to_owned();
    Ok(LightField::new(data)?.with_disparity_range(lf.disparity_range()))
}

/// 11-step viridis; entries are evenly spaced on [0, 1].
const VIRIDIS: [[u8; 3]; 11] = [
    [68, 1, 84],
    [72, 36, 117],
    [65, 68, 135],
    [53, 95, 141],
    [42, 120, 142],
    [33, 145, 140],
    [34, 168, 132],
    [68, 191, 112],
    [122, 209, 81],
    [189, 223, 38],
    [253, 231, 37],
];

fn viridis(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    std::array::from_fn(|k| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8)
}

/// Linear normalisation of `map` from `[lo, hi]` to [0, 1] (clipped),
/// colored with viridis.
pub fn export_depth_visual(map: &Array2<f64>, (lo, hi): (f64, f64)) -> Result<RgbImage> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "visual range [{lo}, {hi}] is empty"
        )));
    }
    if let Some(bad) = map.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("map value {bad}")));
    }
    let (h, w) = map.dim();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(viridis((map[[y as usize, x as usize]] - lo) / (hi - lo)))
    }))
}

pub fn save_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
