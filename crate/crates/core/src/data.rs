//! Datasets and checkpoint persistence.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SplitClassifier};
use crate::nn::{ParamRegistry, Tensor};
use crate::policy::{TdNet, TdNnConfig, TD};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.shape().len() != 4 || inputs.shape()[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples `[start, end)` as inputs plus a one-hot target matrix.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        let x = self.inputs.gather_outer(indices)?;
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, one_hot(&labels, self.num_classes), labels))
    }
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len().max(1), num_classes]);
    for (n, &l) in labels.iter().enumerate() {
        t.data_mut()[n * num_classes + l] = 1.0;
    }
    t
}

/// Parameters of the synthetic class-template generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub geometry: [usize; 3],
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub difficulty: f64,
    /// Largest translation in pixels along each axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            geometry: [1, 16, 16],
            train_per_class: 300,
            test_per_class: 100,
            difficulty: 1.5,
            max_shift: 2,
            seed: 7,
        }
    }
}

fn box_blur(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += plane[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = s / n;
        }
    }
    out
}

/// One smooth, zero-mean, unit-variance template per class.
pub fn class_templates(num_classes: usize, geometry: [usize; 3], seed: u64) -> Vec<Vec<f64>> {
    let [c, h, w] = geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    (0..num_classes)
        .map(|_| {
            let mut t = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                let raw: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
                let smooth = box_blur(&box_blur(&raw, h, w), h, w);
                let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
                let std = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64).sqrt();
                t.extend(smooth.iter().map(|v| (v - mean) / std));
            }
            t
        })
        .collect()
}

/// Copies `src` translated by `(dy, dx)` with zero fill.
pub fn translate(src: &[f64], geometry: [usize; 3], dy: isize, dx: isize) -> Vec<f64> {
    let [c, h, w] = geometry;
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y - dy, x - dx);
                if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                    out[ch * h * w + (y as usize) * w + x as usize] =
                        src[ch * h * w + (sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Template + random translation + `difficulty` * N(0, 1), shuffled.
/// Templates depend only on `cfg.seed`, so train and test share them.
pub fn synth_generate(cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    if cfg.num_classes < 2 {
        return Err(Error::Config("data.num_classes must be >= 2".into()));
    }
    let per_class = match split {
        Split::Train => cfg.train_per_class,
        Split::Test => cfg.test_per_class,
    };
    if per_class == 0 {
        return Err(Error::Config("data: samples per class must be positive".into()));
    }
    let templates = class_templates(cfg.num_classes, cfg.geometry, cfg.seed);
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
    let mut order: Vec<usize> = (0..cfg.num_classes * per_class).map(|i| i % cfg.num_classes).collect();
    order.shuffle(&mut rng);

    let shift = cfg.max_shift as i64;
    let numel: usize = cfg.geometry.iter().product();
    let mut data = Vec::with_capacity(order.len() * numel);
    for &label in &order {
        let dy = rng.random_range(-shift..=shift) as isize;
        let dx = rng.random_range(-shift..=shift) as isize;
        let shifted = translate(&templates[label], cfg.geometry, dy, dx);
        data.extend(shifted.into_iter().map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + cfg.difficulty * z
        }));
    }
    let [c, h, w] = cfg.geometry;
    let inputs = Tensor::new(vec![order.len(), c, h, w], data)?;
    Dataset::new(inputs, order, cfg.num_classes, split)
}

/// Reads rows of `label, v1, ..., v_{C*H*W}` with values in `[0, 1]`.
pub fn load_csv_dataset(
    path: &Path,
    geometry: [usize; 3],
    num_classes: usize,
    split: Split,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    let numel: usize = geometry.iter().product();
    let (mut labels, mut data) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != numel + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", numel + 1, record.len()),
            });
        }
        let label: usize = record[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("label `{}` is not a non-negative integer", &record[0]),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                line,
                message: format!("label {label} outside [0, {num_classes})"),
            });
        }
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("value `{field}` is not numeric"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parse {
                    line,
                    message: format!("value {v} outside [0, 1]"),
                });
            }
            data.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse { line: 0, message: "dataset file has no rows".into() });
    }
    let [c, h, w] = geometry;
    let inputs = Tensor::new(vec![labels.len(), c, h, w], data)?;
    Dataset::new(inputs, labels, num_classes, split)
}

/// Writes a dataset in the format read by [`load_csv_dataset`], values
/// rounded to `f32`.
pub fn save_csv_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    for (label, row) in dataset.labels.iter().zip(dataset.inputs.rows()) {
        let mut fields = vec![label.to_string()];
        fields.extend(row.iter().map(|&v| (v as f32).to_string()));
        writer
            .write_record(&fields)
            .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointModelConfig {
    pub model: ModelConfig,
    pub channel: ChannelConfig,
    pub td: Option<TdNnConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: CheckpointModelConfig,
    pub stage_completed: u8,
    pub seed: u64,
    pub param_manifest: Vec<ManifestEntry>,
}

/// A classifier, optionally with its trained decision network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SplitClassifier,
    pub td: Option<TdNet>,
    pub stage_completed: u8,
    pub seed: u64,
}

impl Checkpoint {
    fn registries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.model
            .params
            .iter()
            .chain(self.td.iter().flat_map(|td| td.params.iter()))
    }

    /// Serialized bytes: u64 LE header length, JSON header, f32 LE payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.registries() {
            let offset = payload.len() as u64;
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_len: payload.len() as u64 - offset,
            });
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            model_config: CheckpointModelConfig {
                model: self.model.config.clone(),
                channel: self.model.channel.clone(),
                td: self.td.as_ref().map(|td| td.config.clone()),
            },
            stage_completed: self.stage_completed,
            seed: self.seed,
            param_manifest: manifest,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 8 {
            return Err(fmt("file shorter than the 8-byte header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[8..];
        if header_len > body.len() {
            return Err(fmt(format!("header length {header_len} exceeds file size")));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len])
            .map_err(|e| fmt(format!("bad header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(fmt(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let payload = &body[header_len..];
        let mut expected_offset = 0u64;
        let mut stored = ParamRegistry::new();
        for entry in &header.param_manifest {
            let numel: usize = entry.shape.iter().product();
            if entry.byte_offset != expected_offset || entry.byte_len != 4 * numel as u64 {
                return Err(fmt(format!("manifest entry `{}` is inconsistent", entry.name)));
            }
            let end = (entry.byte_offset + entry.byte_len) as usize;
            if end > payload.len() {
                return Err(fmt(format!("payload truncated inside `{}`", entry.name)));
            }
            let data = payload[entry.byte_offset as usize..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| fmt(e.to_string()))?;
            stored.insert(entry.name.clone(), t).map_err(|e| fmt(e.to_string()))?;
            expected_offset = end as u64;
        }
        if expected_offset != payload.len() as u64 {
            return Err(fmt(format!(
                "payload is {} bytes but manifest covers {expected_offset}",
                payload.len()
            )));
        }

        let cfg = header.model_config;
        let mut model = SplitClassifier::new(cfg.model, cfg.channel, 0).map_err(|e| fmt(e.to_string()))?;
        let mut used = 0;
        for (name, t) in model.params.iter_mut() {
            let s = stored
                .get(name)
                .map_err(|_| fmt(format!("parameter `{name}` missing from checkpoint")))?;
            if s.shape() != t.shape() {
                return Err(fmt(format!("parameter `{name}` has shape {:?}", s.shape())));
            }
            t.data_mut().copy_from_slice(s.data());
            used += 1;
        }
        let td = match cfg.td {
            Some(td_cfg) => {
                let td_params = stored.partition(TD);
                used += td_params.len();
                Some(
                    TdNet::from_params(td_cfg, model.config.num_classes, td_params)
                        .map_err(|e| fmt(e.to_string()))?,
                )
            }
            None => None,
        };
        if used != stored.len() {
            return Err(fmt("checkpoint holds parameters the model does not define".into()));
        }
        Ok(Checkpoint {
            model,
            td,
            stage_completed: header.stage_completed,
            seed: header.seed,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_per_class: 100,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthetic_size_and_determinism() {
        let a = synth_generate(&small(), Split::Train).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a.inputs.shape(), &[1000, 1, 16, 16]);
        let b = synth_generate(&small(), Split::Train).unwrap();
        assert_eq!(a, b);
        let t = synth_generate(&small(), Split::Test).unwrap();
        assert_ne!(a.inputs.data()[..10], t.inputs.data()[..10]);
        for k in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 100);
        }
    }

    #[test]
    fn noiseless_data_is_template_separable() {
        let cfg = SynthConfig {
            difficulty: 0.0,
            ..small()
        };
        let data = synth_generate(&cfg, Split::Train).unwrap();
        let templates = class_templates(cfg.num_classes, cfg.geometry, cfg.seed);
        let s = cfg.max_shift as isize;
        for (row, &label) in data.inputs.rows().zip(&data.labels) {
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, t) in templates.iter().enumerate() {
                for dy in -s..=s {
                    for dx in -s..=s {
                        let shifted = translate(t, cfg.geometry, dy, dx);
                        let d: f64 = shifted.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
                        if d < best.0 {
                            best = (d, k);
                        }
                    }
                }
            }
            assert_eq!(best.1, label);
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "0,0.0,0.5,1.0,0.25\n1,1,1,0,0\n").unwrap();
        let d = load_csv_dataset(&path, [1, 2, 2], 2, Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![0, 1]);

        let out = dir.path().join("o.csv");
        let data: Vec<f64> = (0..2 * 4).map(|i| (i as f64 * 0.1234567891).fract()).collect();
        let orig = Dataset::new(Tensor::new(vec![2, 1, 2, 2], data).unwrap(), vec![1, 0], 2, Split::Test).unwrap();
        save_csv_dataset(&orig, &out).unwrap();
        let back = load_csv_dataset(&out, [1, 2, 2], 2, Split::Test).unwrap();
        assert_eq!(back.labels, orig.labels);
        for (a, b) in back.inputs.data().iter().zip(orig.inputs.data()) {
            assert!((a - b).abs() < 1e-7);
        }

        std::fs::write(&path, "0,0.0,0.5,1.0\n").unwrap();
        let err = load_csv_dataset(&path, [1, 2, 2], 2, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        std::fs::write(&path, "0,0,0,0,0\n0,0,x,0,0\n").unwrap();
        assert!(matches!(
            load_csv_dataset(&path, [1, 2, 2], 2, Split::Train),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&path, "5,0,0,0,0\n").unwrap();
        assert!(matches!(
            load_csv_dataset(&path, [1, 2, 2], 2, Split::Train),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    fn checkpoint(with_td: bool) -> Checkpoint {
        let model = SplitClassifier::new(ModelConfig::default(), ChannelConfig::default(), 3).unwrap();
        let td = with_td.then(|| {
            let mut td = TdNet::new(TdNnConfig::default(), 10, 4).unwrap();
            td.trained = true;
            td
        });
        Checkpoint {
            model,
            td,
            stage_completed: if with_td { 3 } else { 2 },
            seed: 11,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for with_td in [false, true] {
            let ck = checkpoint(with_td);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.stage_completed, ck.stage_completed);
            assert_eq!(back.seed, 11);
            let names: Vec<_> = back.model.params.names().collect();
            assert_eq!(names, ck.model.params.names().collect::<Vec<_>>());
            let mut worst = 0.0f64;
            for ((_, a), (_, b)) in back.registries().zip(ck.registries()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    worst = worst.max((x - y).abs());
                }
            }
            assert!(worst < 1e-6, "{worst}");
            assert_eq!(back.td.is_some(), with_td);
            // Byte-stable.
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn checkpoint_format_errors() {
        let bytes = checkpoint(false).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(Error::Format(_))));

        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        header["format_version"] = 2.into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut patched = (json.len() as u64).to_le_bytes().to_vec();
        patched.extend_from_slice(&json);
        patched.extend_from_slice(&bytes[8 + header_len..]);
        let err = Checkpoint::from_bytes(&patched).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
