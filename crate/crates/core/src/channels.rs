//! Channel feature maps: the ICF family (LUV, gradient magnitude, oriented
//! gradient histograms), heatmap blurring and input standardization.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of orientation bins in the ICF stack.
pub const ICF_HOG_BINS: usize = 6;
/// Side length of the square HOG aggregation cell.
pub const HOG_CELL: usize = 4;
/// Standard deviation floor used by [`standardize`].
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    Binary,
    Multiclass { class_count: usize },
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelName {
    Icf,
    Edge,
    Segmentation,
    Heatmap,
    Disparity,
    Flow,
    RawImage,
}

impl ChannelName {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelName::Icf => "icf",
            ChannelName::Edge => "edge",
            ChannelName::Segmentation => "segmentation",
            ChannelName::Heatmap => "heatmap",
            ChannelName::Disparity => "disparity",
            ChannelName::Flow => "flow",
            ChannelName::RawImage => "raw-image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ChannelName::Icf,
            ChannelName::Edge,
            ChannelName::Segmentation,
            ChannelName::Heatmap,
            ChannelName::Disparity,
            ChannelName::Flow,
            ChannelName::RawImage,
        ]
        .into_iter()
        .find(|n| n.as_str() == s)
    }
}

/// A C×H×W image-aligned map with the kind that selects its pixel loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMap {
    pub data: Tensor,
    pub kind: ChannelKind,
    pub name: ChannelName,
}

impl ChannelMap {
    pub fn new(data: Tensor, kind: ChannelKind, name: ChannelName) -> Result<Self> {
        let map = ChannelMap { data, kind, name };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.data.dims3()?;
        if !self.data.is_finite() {
            return Err(Error::Shape(format!("{} map has non-finite values", self.name.as_str())));
        }
        match self.kind {
            ChannelKind::Binary => {
                if c != 1 {
                    return Err(Error::Shape(format!("binary map must have 1 channel, got {}", c)));
                }
                if self.data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Shape("binary map values must lie in [0,1]".into()));
                }
            }
            ChannelKind::Multiclass { class_count } => {
                if class_count < 2 {
                    return Err(Error::Config("multiclass map needs ≥ 2 classes".into()));
                }
                if c == 1 {
                    for &v in self.data.data() {
                        if v.fract() != 0.0 || v < 0.0 {
                            return Err(Error::Shape(format!("non-integer class code {}", v)));
                        }
                        if v as usize >= class_count {
                            return Err(Error::LabelOutOfRange {
                                label: v as usize,
                                class_count,
                            });
                        }
                    }
                } else if c == class_count {
                    let d = self.data.data();
                    for p in 0..h * w {
                        let s: f64 = (0..c).map(|k| d[k * h * w + p]).sum();
                        if (s - 1.0).abs() > 1e-5 {
                            return Err(Error::Shape(format!(
                                "class distribution at pixel {} sums to {}",
                                p, s
                            )));
                        }
                    }
                } else {
                    return Err(Error::Shape(format!(
                        "multiclass map has {} channels for {} classes",
                        c, class_count
                    )));
                }
            }
            ChannelKind::Regression => {}
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Channel count after expanding integer class codes to one-hot planes.
    pub fn input_channels(&self) -> usize {
        match self.kind {
            ChannelKind::Multiclass { class_count } => class_count,
            _ => self.data.shape()[0],
        }
    }

    /// Standardized tensor suitable as network input; integer-coded
    /// multiclass maps are expanded to one-hot planes first.
    pub fn network_input(&self) -> Tensor {
        let (c, h, w) = self.data.dims3().expect("validated rank");
        let raw = match self.kind {
            ChannelKind::Multiclass { class_count } if c == 1 => {
                let mut t = Tensor::zeros(&[class_count, h, w]);
                for (p, &v) in self.data.data().iter().enumerate() {
                    t.data_mut()[v as usize * h * w + p] = 1.0;
                }
                t
            }
            _ => self.data.clone(),
        };
        standardize(&raw)
    }
}

/// Per-channel zero-mean / unit-variance normalization with σ floored at
/// [`STD_FLOOR`].
pub fn standardize(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("rank-3 tensor");
    let n = h * w;
    let mut out = t.clone();
    for k in 0..c {
        let plane = &mut out.data_mut()[k * n..(k + 1) * n];
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(STD_FLOOR);
        for v in plane.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    out
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

fn xyz(rgb: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(RGB_TO_XYZ.iter()) {
        *o = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    out
}

fn chromaticity(x: [f64; 3]) -> (f64, f64) {
    let d = x[0] + 15.0 * x[1] + 3.0 * x[2];
    if d == 0.0 {
        (0.0, 0.0)
    } else {
        (4.0 * x[0] / d, 9.0 * x[1] / d)
    }
}

/// sRGB in [0,1] to CIE L*u*v* relative to the D65 white of the sRGB primaries.
pub fn rgb_to_luv(image: &Tensor) -> Result<ChannelMap> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("LUV needs 3 channels, got {}", c)));
    }
    let white = xyz([1.0, 1.0, 1.0]);
    let (un, vn) = chromaticity(white);
    let n = h * w;
    let d = image.data();
    let mut out = Tensor::zeros(&[3, h, w]);
    let o = out.data_mut();
    let eps = (6.0f64 / 29.0).powi(3);
    for p in 0..n {
        let rgb = [
            srgb_to_linear(d[p]),
            srgb_to_linear(d[n + p]),
            srgb_to_linear(d[2 * n + p]),
        ];
        let x = xyz(rgb);
        let yr = x[1] / white[1];
        let l = if yr > eps {
            116.0 * yr.cbrt() - 16.0
        } else {
            (29.0f64 / 3.0).powi(3) * yr
        };
        let (u, v) = chromaticity(x);
        let (us, vs) = if x == [0.0; 3] {
            (0.0, 0.0)
        } else {
            (13.0 * l * (u - un), 13.0 * l * (v - vn))
        };
        o[p] = l;
        o[n + p] = us;
        o[2 * n + p] = vs;
    }
    ChannelMap::new(out, ChannelKind::Regression, ChannelName::Icf)
}

/// Central-difference derivatives of one plane; one-sided at the borders.
fn plane_gradients(p: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if w == 1 {
                0.0
            } else if x == 0 {
                p[i + 1] - p[i]
            } else if x == w - 1 {
                p[i] - p[i - 1]
            } else {
                0.5 * (p[i + 1] - p[i - 1])
            };
            gy[i] = if h == 1 {
                0.0
            } else if y == 0 {
                p[i + w] - p[i]
            } else if y == h - 1 {
                p[i] - p[i - w]
            } else {
                0.5 * (p[i + w] - p[i - w])
            };
        }
    }
    (gx, gy)
}

/// Per-pixel magnitude and unsigned orientation in [0, π); for multi-channel
/// images the channel with the largest magnitude wins.
fn magnitude_orientation(image: &Tensor) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let (c, h, w) = image.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("gradient needs 1 or 3 channels, got {}", c)));
    }
    let n = h * w;
    let mut mag = vec![0.0; n];
    let mut ori = vec![0.0; n];
    for k in 0..c {
        let (gx, gy) = plane_gradients(image.plane(k), h, w);
        for i in 0..n {
            let m = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
            if k == 0 || m > mag[i] {
                mag[i] = m;
                let mut t = gy[i].atan2(gx[i]);
                if t < 0.0 {
                    t += PI;
                }
                if t >= PI {
                    t -= PI;
                }
                ori[i] = t;
            }
        }
    }
    Ok((h, w, mag, ori))
}

pub fn gradient_magnitude(image: &Tensor) -> Result<ChannelMap> {
    let (h, w, mag, _) = magnitude_orientation(image)?;
    ChannelMap::new(Tensor::new(&[1, h, w], mag)?, ChannelKind::Regression, ChannelName::Icf)
}

/// Per-pixel soft orientation histograms before cell aggregation.
pub fn hog_pixel_histograms(image: &Tensor, bin_count: usize) -> Result<Tensor> {
    if bin_count < 2 {
        return Err(Error::Config("HOG needs at least 2 bins".into()));
    }
    let (h, w, mag, ori) = magnitude_orientation(image)?;
    let n = h * w;
    let width = PI / bin_count as f64;
    let mut out = Tensor::zeros(&[bin_count, h, w]);
    let o = out.data_mut();
    for i in 0..n {
        let pos = ori[i] / width;
        let k0 = (pos.floor() as usize).min(bin_count - 1);
        let frac = pos - k0 as f64;
        let k1 = (k0 + 1) % bin_count;
        o[k0 * n + i] += (1.0 - frac) * mag[i];
        o[k1 * n + i] += frac * mag[i];
    }
    Ok(out)
}

/// Oriented gradient histograms summed over [`HOG_CELL`]-sized cells and
/// written back at full resolution.
pub fn hog_channels(image: &Tensor, bin_count: usize) -> Result<ChannelMap> {
    let hist = hog_pixel_histograms(image, bin_count)?;
    let (_, h, w) = hist.dims3()?;
    let n = h * w;
    let mut out = Tensor::zeros(&[bin_count, h, w]);
    for k in 0..bin_count {
        let src = &hist.data()[k * n..(k + 1) * n];
        let dst = &mut out.data_mut()[k * n..(k + 1) * n];
        for cy in (0..h).step_by(HOG_CELL) {
            for cx in (0..w).step_by(HOG_CELL) {
                let (ye, xe) = ((cy + HOG_CELL).min(h), (cx + HOG_CELL).min(w));
                let mut s = 0.0;
                for y in cy..ye {
                    s += src[y * w + cx..y * w + xe].iter().sum::<f64>();
                }
                for y in cy..ye {
                    dst[y * w + cx..y * w + xe].fill(s);
                }
            }
        }
    }
    ChannelMap::new(out, ChannelKind::Regression, ChannelName::Icf)
}

/// The 10-channel ICF stack: standardized LUV, gradient magnitude and
/// 6-bin HOG.
pub fn compute_icf(image: &Tensor) -> Result<ChannelMap> {
    let luv = standardize(&rgb_to_luv(image)?.data);
    let gm = standardize(&gradient_magnitude(image)?.data);
    let hog = standardize(&hog_channels(image, ICF_HOG_BINS)?.data);
    let data = Tensor::concat_channels(&[&luv, &gm, &hog])?;
    ChannelMap::new(data, ChannelKind::Regression, ChannelName::Icf)
}

pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with kernel radius ⌈3σ⌉ and reflect padding.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("blur sigma must be positive, got {}", sigma)));
    }
    let (c, h, w) = t.dims3()?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let n = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![0.0; n];
    for ch in 0..c {
        let src = t.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    s += kv * src[y * w + reflect(x as isize + j as isize - r, w)];
                }
                tmp[y * w + x] = s;
            }
        }
        let dst = &mut out.data_mut()[ch * n..(ch + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    s += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
                }
                dst[y * w + x] = s;
            }
        }
    }
    Ok(out)
}

/// Blur a person-probability plane into a heatmap.
pub fn blur_heatmap(plane: &ChannelMap, sigma: f64) -> Result<ChannelMap> {
    let (c, _, _) = plane.data.dims3()?;
    if c != 1 {
        return Err(Error::Shape(format!("heatmap source must have 1 channel, got {}", c)));
    }
    let blurred = gaussian_blur(&plane.data, sigma)?.map(|v| v.clamp(0.0, 1.0));
    ChannelMap::new(blurred, ChannelKind::Binary, ChannelName::Heatmap)
}
