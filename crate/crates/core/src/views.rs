//! Four-view image sets with depth and coverage, and their on-disk layout:
//! `view_{i}.png` (8-bit RGB preview), `rgb_{i}.raw`, `depth_{i}.raw` and
//! `alpha_{i}.raw` (NPY f32), plus `views.json` for the azimuths.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;

/// One rendered or edited view. Depth is camera-space z with `+inf` for
/// background.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub alpha: Array2<f64>,
}

impl ViewImage {
    pub fn resolution(&self) -> usize {
        self.rgb.dim().0
    }

    pub fn blank(resolution: usize, background: f64) -> Self {
        Self {
            rgb: Array3::from_elem((resolution, resolution, 3), background),
            depth: Array2::from_elem((resolution, resolution), f64::INFINITY),
            alpha: Array2::zeros((resolution, resolution)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewImageSet {
    pub azimuths: [f64; 4],
    pub views: Vec<ViewImage>,
}

#[derive(Serialize, Deserialize)]
struct ViewsMeta {
    azimuths: [f64; 4],
    resolution: usize,
}

impl MultiViewImageSet {
    pub fn new(azimuths: [f64; 4], views: Vec<ViewImage>) -> Result<Self> {
        let set = Self { azimuths, views };
        set.validate()?;
        Ok(set)
    }

    pub fn resolution(&self) -> usize {
        self.views[0].resolution()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.len() != 4 {
            return Err(Error::Validation(format!("expected 4 views, got {}", self.views.len())));
        }
        for k in 0..4 {
            let gap = (self.azimuths[(k + 1) % 4] - self.azimuths[k]).rem_euclid(360.0);
            if (gap - 90.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("views are not in 90-degree azimuth order: {:?}", self.azimuths)));
            }
        }
        let r = self.views[0].resolution();
        for (i, v) in self.views.iter().enumerate() {
            if v.rgb.dim() != (r, r, 3) || v.depth.dim() != (r, r) || v.alpha.dim() != (r, r) {
                return Err(Error::Validation(format!("view {i} does not match resolution {r}")));
            }
        }
        Ok(())
    }

    /// Box-filters every view by an integer `factor`. Color and coverage
    /// are block means; depth is the mean of the block's finite samples
    /// (`+inf` when the block is all background).
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let r = self.resolution();
        if factor == 0 || !r.is_multiple_of(factor) {
            return Err(Error::Validation(format!("cannot downsample {r}px views by {factor}")));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let n = r / factor;
        let area = (factor * factor) as f64;
        let views = self
            .views
            .iter()
            .map(|v| {
                let block = |y: usize, x: usize| (y * factor..(y + 1) * factor).flat_map(move |yy| (x * factor..(x + 1) * factor).map(move |xx| (yy, xx)));
                let rgb = Array3::from_shape_fn((n, n, 3), |(y, x, c)| block(y, x).map(|(yy, xx)| v.rgb[[yy, xx, c]]).sum::<f64>() / area);
                let alpha = Array2::from_shape_fn((n, n), |(y, x)| block(y, x).map(|p| v.alpha[p]).sum::<f64>() / area);
                let depth = Array2::from_shape_fn((n, n), |(y, x)| {
                    let (sum, count) = block(y, x).map(|p| v.depth[p]).filter(|d| d.is_finite()).fold((0.0, 0), |(s, c), d| (s + d, c + 1));
                    if count == 0 {
                        f64::INFINITY
                    } else {
                        sum / count as f64
                    }
                });
                ViewImage { rgb, depth, alpha }
            })
            .collect();
        Self::new(self.azimuths, views)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let r = self.resolution();
        for (i, v) in self.views.iter().enumerate() {
            save_png(&v.rgb, dir.join(format!("view_{i}.png")))?;
            let rgb: Vec<f32> = v.rgb.iter().map(|&x| x as f32).collect();
            npy::write_f32(dir.join(format!("rgb_{i}.raw")), &[r, r, 3], &rgb)?;
            let depth: Vec<f32> = v.depth.iter().map(|&x| x as f32).collect();
            npy::write_f32(dir.join(format!("depth_{i}.raw")), &[r, r], &depth)?;
            let alpha: Vec<f32> = v.alpha.iter().map(|&x| x as f32).collect();
            npy::write_f32(dir.join(format!("alpha_{i}.raw")), &[r, r], &alpha)?;
        }
        let meta = ViewsMeta {
            azimuths: self.azimuths,
            resolution: r,
        };
        let path = dir.join("views.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a view directory. Float RGB is preferred over the PNG preview
    /// when both exist; missing depth/alpha default to background.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("views.json");
        let azimuths = match fs::read(&meta_path) {
            Ok(bytes) => serde_json::from_slice::<ViewsMeta>(&bytes)?.azimuths,
            Err(_) => [0.0, 90.0, 180.0, 270.0],
        };
        let mut views = Vec::with_capacity(4);
        for i in 0..4 {
            let raw = dir.join(format!("rgb_{i}.raw"));
            let rgb = if raw.exists() {
                let (shape, data) = npy::read_f32(&raw)?;
                to_array3(&shape, &data)?
            } else {
                load_png(dir.join(format!("view_{i}.png")))?
            };
            let r = rgb.dim().0;
            let plane = |name: &str, default: f64| -> Result<Array2<f64>> {
                let path = dir.join(format!("{name}_{i}.raw"));
                if !path.exists() {
                    return Ok(Array2::from_elem((r, r), default));
                }
                let (shape, data) = npy::read_f32(&path)?;
                if shape != [r, r] {
                    return Err(Error::Format(format!("{} has shape {shape:?}, expected [{r}, {r}]", path.display())));
                }
                Ok(Array2::from_shape_vec((r, r), data.into_iter().map(f64::from).collect()).unwrap())
            };
            let depth = plane("depth", f64::INFINITY)?;
            let alpha = plane("alpha", 0.0)?;
            views.push(ViewImage { rgb, depth, alpha });
        }
        Self::new(azimuths, views)
    }
}

fn to_array3(shape: &[usize], data: &[f32]) -> Result<Array3<f64>> {
    match shape {
        [h, w, 3] if h == w => Ok(Array3::from_shape_vec((*h, *w, 3), data.iter().map(|&x| f64::from(x)).collect()).unwrap()),
        _ => Err(Error::Format(format!("rgb array has shape {shape:?}, expected [r, r, 3]"))),
    }
}

pub fn save_png(rgb: &Array3<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(rgb)?).map_err(|e| Error::io(path, e))
}

pub fn encode_png(rgb: &Array3<f64>) -> Result<Vec<u8>> {
    let (h, w, _) = rgb.dim();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (rgb[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::Format(format!("{} is {w}x{h}; views must be square", path.as_ref().display())));
    }
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    }))
}
