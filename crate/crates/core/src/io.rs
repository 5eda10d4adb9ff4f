//! On-disk formats: tensor files, checkpoints, label and detection files,
//! PNG images and the dataset directory layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::Box;
use crate::channels::{ChannelKind, ChannelMap, ChannelName};
use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::evalkit::{GroundTruth, GtClass};
use crate::heads::{Detection, CLASS_CYCLIST, CLASS_PEDESTRIAN};
use crate::model::{channel_layout, ModelConfig};
use crate::params::ParamStore;
use crate::synthworld::SceneConfig;
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, Cursor, LogEntry, RngState, StageSpec, TrainOptions};

pub const TENSOR_MAGIC: &[u8; 5] = b"PTEN1";
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PCKP1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::I32(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// A typed, row-major, little-endian tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(shape: &[usize], data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(TensorFile {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        TensorFile {
            shape: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.data.to_f64())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.data.code());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decode one tensor from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> std::result::Result<(Self, usize), String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != TENSOR_MAGIC {
            return Err("bad magic".into());
        }
        let code = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| "dimension overflows usize")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("element count overflows")?;
        let size = match code {
            1 | 3 => 4,
            2 => 8,
            c => return Err(format!("unknown dtype code {}", c)),
        };
        let payload = n.checked_mul(size).ok_or("payload size overflows")?;
        if bytes.len() - r.pos < payload {
            return Err(format!(
                "payload holds {} bytes, shape {:?} needs {}",
                bytes.len() - r.pos,
                shape,
                payload
            ));
        }
        let p = r.take(payload)?;
        let data = match code {
            1 => TensorData::F32(p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => TensorData::F64(p.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => TensorData::I32(p.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok((TensorFile { shape, data }, r.pos))
    }

    /// Decode a complete tensor file; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(format!("{} trailing bytes after payload", bytes.len() - used));
        }
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err("unexpected end of data".into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor_file(path: &Path, t: &TensorFile) -> Result<()> {
    write_bytes(path, &t.encode())
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    let bytes = read_bytes(path)?;
    TensorFile::decode(&bytes).map_err(|r| Error::format(path, r))
}

/// Channel maps are stored as i32 codes (multiclass) or f32 values.
pub fn channel_to_file(map: &ChannelMap) -> TensorFile {
    let shape = map.data.shape().to_vec();
    let data = match map.kind {
        ChannelKind::Multiclass { .. } => TensorData::I32(map.data.data().iter().map(|&v| v as i32).collect()),
        _ => TensorData::F32(map.data.data().iter().map(|&v| v as f32).collect()),
    };
    TensorFile { shape, data }
}

pub fn channel_from_file(name: ChannelName, file: &TensorFile) -> Result<ChannelMap> {
    let (kind, _) = channel_layout(name)?;
    ChannelMap::new(file.to_tensor()?, kind, name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    options: TrainOptions,
    plan: Vec<StageSpec>,
    fingerprint: String,
    rng: RngState,
    cursor: Cursor,
    log: Vec<LogEntry>,
}

/// Container: magic, u64 manifest length, manifest JSON, u32 tensor count,
/// then per tensor a u32 name length, the UTF-8 name and a tensor file.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let manifest = CheckpointManifest {
        config: ck.config.clone(),
        options: ck.options.clone(),
        plan: ck.plan.clone(),
        fingerprint: ck.fingerprint.clone(),
        rng: ck.rng.clone(),
        cursor: ck.cursor,
        log: ck.log.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("plain data serializes");
    let mut tensors: Vec<(String, &Tensor)> = ck.params.iter().map(|p| (format!("param/{}", p.name), &p.value)).collect();
    tensors.extend(ck.velocity.iter().map(|(n, t)| (format!("velocity/{}", n), t)));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&TensorFile::from_tensor(t).encode());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != CHECKPOINT_MAGIC {
        return Err("bad checkpoint magic".into());
    }
    let len = usize::try_from(r.u64()?).map_err(|_| "manifest too large")?;
    let m: CheckpointManifest = serde_json::from_slice(r.take(len)?).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    let mut velocity = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|e| e.to_string())?.to_string();
        let (tf, used) = TensorFile::decode_prefix(&bytes[r.pos..])?;
        r.pos += used;
        let t = tf.to_tensor().map_err(|e| e.to_string())?;
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p, t).map_err(|e| e.to_string())?;
        } else if let Some(v) = name.strip_prefix("velocity/") {
            velocity.insert(v.to_string(), t);
        } else {
            return Err(format!("unexpected tensor `{}`", name));
        }
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after checkpoint".into());
    }
    Ok(Checkpoint {
        config: m.config,
        options: m.options,
        plan: m.plan,
        fingerprint: m.fingerprint,
        params,
        velocity,
        rng: m.rng,
        cursor: m.cursor,
        log: m.log,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_bytes(path)?;
    decode_checkpoint(&bytes).map_err(|r| Error::format(path, r))
}

fn class_name(c: GtClass) -> &'static str {
    match c {
        GtClass::Pedestrian => "Pedestrian",
        GtClass::Cyclist => "Cyclist",
        GtClass::DontCare => "DontCare",
    }
}

fn parse_class(s: &str) -> Option<GtClass> {
    match s {
        "Pedestrian" => Some(GtClass::Pedestrian),
        "Cyclist" => Some(GtClass::Cyclist),
        "DontCare" => Some(GtClass::DontCare),
        _ => None,
    }
}

/// One `class truncation occlusion x1 y1 x2 y2` line per object.
pub fn format_labels<'a>(gts: impl IntoIterator<Item = &'a GroundTruth>) -> String {
    gts.into_iter()
        .map(|g| {
            let [x1, y1, x2, y2] = g.bbox.to_array();
            format!(
                "{} {} {} {} {} {} {}\n",
                class_name(g.class),
                g.truncation,
                g.occlusion_level,
                x1,
                y1,
                x2,
                y2
            )
        })
        .collect()
}

/// Parse a label file; `annotated` marks the objects as labelled or not.
pub fn parse_labels(text: &str, annotated: bool, path: &Path) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format(path, format!("line {}: {}", n + 1, why));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let class = parse_class(f[0]).ok_or_else(|| bad("unknown class"))?;
        let truncation: f64 = f[1].parse().map_err(|_| bad("bad truncation"))?;
        let occlusion_level: u8 = f[2].parse().map_err(|_| bad("bad occlusion level"))?;
        let mut c = [0.0; 4];
        for (k, v) in f[3..].iter().enumerate() {
            c[k] = v.parse().map_err(|_| bad("bad coordinate"))?;
        }
        let bbox = Box::checked(c[0], c[1], c[2], c[3]).map_err(|_| bad("invalid box"))?;
        out.push(GroundTruth {
            bbox,
            class,
            truncation,
            occlusion_level,
            annotated,
        });
    }
    Ok(out)
}

fn detection_class_name(class_id: usize) -> Result<&'static str> {
    match class_id {
        CLASS_PEDESTRIAN => Ok("Pedestrian"),
        CLASS_CYCLIST => Ok("Cyclist"),
        c => Err(Error::LabelOutOfRange {
            label: c,
            class_count: 3,
        }),
    }
}

/// One `class score x1 y1 x2 y2` line per detection.
pub fn format_detections(dets: &[Detection]) -> Result<String> {
    let mut s = String::new();
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox.to_array();
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            detection_class_name(d.class_id)?,
            d.score,
            x1,
            y1,
            x2,
            y2
        ));
    }
    Ok(s)
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format(path, format!("line {}: {}", n + 1, why));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let class_id = match f[0] {
            "Pedestrian" => CLASS_PEDESTRIAN,
            "Cyclist" => CLASS_CYCLIST,
            _ => return Err(bad("unknown class")),
        };
        let mut v = [0.0; 5];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad("bad number"))?;
        }
        let bbox = Box::checked(v[1], v[2], v[3], v[4]).map_err(|_| bad("invalid box"))?;
        out.push(Detection {
            bbox,
            score: v[0],
            class_id,
        });
    }
    Ok(out)
}

/// Write a 3×H×W image in [0,1] as 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("PNG output needs 3 channels, got {}", c)));
    }
    let d = image.data();
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            buf.push((d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Read an RGB PNG into a 3×H×W tensor with values k/255.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = h * w;
    Tensor::new(
        &[3, h, w],
        (0..3 * plane).map(|k| raw[(k % plane) * 3 + k / plane] as f64 / 255.0).collect(),
    )
}

/// Contents of `manifest.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub scene: SceneConfig,
    pub channels: Vec<ChannelName>,
    /// SHA-256 over the per-image files, in index order.
    pub digest: String,
}

pub fn image_stem(index: usize) -> String {
    format!("{:06}", index)
}

/// Files making up record `index` under `root`, relative to `root`.
pub fn record_paths(index: usize, channels: &[ChannelName], second_frame: bool) -> Vec<PathBuf> {
    let stem = image_stem(index);
    let mut v = vec![
        PathBuf::from(format!("images/{}.png", stem)),
        PathBuf::from(format!("labels/{}.txt", stem)),
        PathBuf::from(format!("hidden/{}.txt", stem)),
    ];
    if second_frame {
        v.push(PathBuf::from(format!("images2/{}.png", stem)));
    }
    for c in channels {
        v.push(PathBuf::from(format!("channels/{}/{}.ten", c.as_str(), stem)));
    }
    v
}

/// Write one record in the dataset layout. Unannotated objects go to
/// `hidden/`, which evaluation reads for the annotation-error category.
pub fn write_record(root: &Path, index: usize, rec: &Record) -> Result<()> {
    let stem = image_stem(index);
    write_png(&root.join(format!("images/{}.png", stem)), &rec.image)?;
    if let Some(second) = &rec.second_image {
        write_png(&root.join(format!("images2/{}.png", stem)), second)?;
    }
    let labelled = format_labels(rec.ground_truth.iter().filter(|g| g.annotated));
    let hidden = format_labels(rec.ground_truth.iter().filter(|g| !g.annotated));
    write_bytes(&root.join(format!("labels/{}.txt", stem)), labelled.as_bytes())?;
    write_bytes(&root.join(format!("hidden/{}.txt", stem)), hidden.as_bytes())?;
    for (name, map) in &rec.channels {
        write_tensor_file(
            &root.join(format!("channels/{}/{}.ten", name.as_str(), stem)),
            &channel_to_file(map),
        )?;
    }
    Ok(())
}

/// Read record `index`, loading the listed channels.
pub fn read_record(root: &Path, index: usize, channels: &[ChannelName]) -> Result<Record> {
    let stem = image_stem(index);
    let image = read_png(&root.join(format!("images/{}.png", stem)))?;
    let second_path = root.join(format!("images2/{}.png", stem));
    let second_image = if second_path.exists() {
        Some(read_png(&second_path)?)
    } else {
        None
    };
    let label_path = root.join(format!("labels/{}.txt", stem));
    let mut ground_truth = parse_labels(
        &String::from_utf8_lossy(&read_bytes(&label_path)?),
        true,
        &label_path,
    )?;
    let hidden_path = root.join(format!("hidden/{}.txt", stem));
    if hidden_path.exists() {
        ground_truth.extend(parse_labels(
            &String::from_utf8_lossy(&read_bytes(&hidden_path)?),
            false,
            &hidden_path,
        )?);
    }
    let mut maps = BTreeMap::new();
    for &name in channels {
        let p = root.join(format!("channels/{}/{}.ten", name.as_str(), stem));
        maps.insert(name, channel_from_file(name, &read_tensor_file(&p)?)?);
    }
    Ok(Record {
        image,
        second_image,
        ground_truth,
        channels: maps,
    })
}

pub fn write_manifest(root: &Path, m: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(m).expect("plain data serializes");
    write_bytes(&root.join("manifest.json"), json.as_bytes())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let p = root.join("manifest.json");
    let bytes = read_bytes(&p)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&p, e.to_string()))
}

/// SHA-256 over the contents of the given files (relative to `root`).
pub fn digest_files(root: &Path, files: &[PathBuf]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for f in files {
        let p = root.join(f);
        if !p.exists() {
            continue;
        }
        h.update(f.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(read_bytes(&p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{:02x}", b)).collect())
}

/// Load all records of a dataset written by [`write_record`].
pub fn read_dataset(root: &Path, channels: &[ChannelName]) -> Result<(DatasetManifest, Vec<Record>)> {
    let m = read_manifest(root)?;
    for c in channels {
        if !m.channels.contains(c) && *c != ChannelName::Icf {
            return Err(Error::Config(format!(
                "dataset at {} has no {} channel",
                root.display(),
                c.as_str()
            )));
        }
    }
    let stored: Vec<ChannelName> = channels.iter().copied().filter(|c| m.channels.contains(c)).collect();
    let recs = (0..m.count)
        .map(|i| read_record(root, i, &stored))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, recs))
}
