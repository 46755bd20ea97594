//! Dataset plumbing: label spaces, manifests, train/test splitting, LR/HR
//! pair generation and a synthetic texture corpus.
//!
//! The synthetic corpus stands in for a proprietary leaf-disease set. Each
//! class is an oriented stripe texture whose stripe width is about 4 px at
//! the 224 px reference size, sitting just inside what 4x downsampling can
//! represent: bicubic degradation attenuates the stripes to roughly half
//! contrast and erases their sharp edges, while a faithful restorer can still
//! recover them from the surviving fundamental. Class-independent nuisance
//! structure (brightness gradients, smooth blobs, noise, channel tint) keeps
//! low-frequency shortcuts uninformative.

use crate::imaging::{bicubic_resize, read_png, write_png, ImageTensor};
use crate::rng::Seeder;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Ordered, closed vocabulary of class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate label {n}")));
            }
        }
        Ok(LabelSpace { names, index })
    }

    /// The 25-class reference task: 11 single diseases, 13 combination
    /// labels and healthy. The combination list is illustrative; the source
    /// data's actual co-infection inventory is not public.
    pub fn leaf_disease_preset() -> Self {
        const SINGLES: [&str; 11] = [
            "anthracnose",
            "bacterial_spot",
            "brown_spot",
            "cgmmv",
            "downy_mildew",
            "fusarium_wilt",
            "gray_mold",
            "gummy_stem_blight",
            "mosaic_virus",
            "powdery_mildew",
            "target_leaf_spot",
        ];
        const COMBOS: [&str; 13] = [
            "anthracnose+downy_mildew",
            "anthracnose+powdery_mildew",
            "bacterial_spot+brown_spot",
            "bacterial_spot+mosaic_virus",
            "brown_spot+target_leaf_spot",
            "cgmmv+mosaic_virus",
            "downy_mildew+gray_mold",
            "downy_mildew+powdery_mildew",
            "fusarium_wilt+gummy_stem_blight",
            "gray_mold+gummy_stem_blight",
            "mosaic_virus+powdery_mildew",
            "powdery_mildew+target_leaf_spot",
            "anthracnose+downy_mildew+powdery_mildew",
        ];
        let mut names = vec!["healthy".to_string()];
        names.extend(SINGLES.iter().map(|s| s.to_string()));
        names.extend(COMBOS.iter().map(|s| s.to_string()));
        LabelSpace::new(names).expect("preset names are unique")
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// One dataset record: an image path and its non-empty label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labels: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    path: String,
    labels: Vec<String>,
}

fn read_records(path: &Path) -> Result<Vec<(usize, ManifestRecord)>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::config(format!("cannot open manifest {}: {e}", path.display()))
    })?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };

    let (hline, header) = match lines.next() {
        Some((i, l)) => (i, l?),
        None => return Err(parse_err(0, "empty file, expected a version header".into())),
    };
    let header: ManifestHeader = serde_json::from_str(&header)
        .map_err(|e| parse_err(hline, format!("bad version header ({e})")))?;
    if header.version != 1 {
        return Err(parse_err(
            hline,
            format!("unsupported manifest version {}", header.version),
        ));
    }

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(i, format!("bad record ({e})")))?;
        if rec.labels.is_empty() {
            return Err(parse_err(i, format!("entry {} has no labels", rec.path)));
        }
        if !seen.insert(rec.path.clone()) {
            return Err(parse_err(i, format!("duplicate path {}", rec.path)));
        }
        records.push((i, rec));
    }
    Ok(records)
}

/// Reads a manifest: one JSON record per line, first line a version header.
/// Paths are resolved relative to the manifest's directory. Every label must
/// belong to `space`.
pub fn load_manifest(path: &Path, space: &LabelSpace) -> Result<Vec<ManifestEntry>> {
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (i, rec) in read_records(path)? {
        for l in &rec.labels {
            if space.index_of(l).is_none() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown label {l}"),
                });
            }
        }
        entries.push(ManifestEntry {
            path: root.join(&rec.path),
            labels: rec.labels.into_iter().collect(),
        });
    }
    Ok(entries)
}

/// Distinct labels appearing in a manifest, sorted; builds a label space when
/// one is not supplied externally.
pub fn manifest_label_names(path: &Path) -> Result<Vec<String>> {
    let mut names = BTreeSet::new();
    for (_, rec) in read_records(path)? {
        names.extend(rec.labels);
    }
    Ok(names.into_iter().collect())
}

/// Writes a manifest with paths made relative to its directory.
pub fn save_manifest(path: &Path, entries: &[(String, Vec<String>)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string(&ManifestHeader { version: 1 })?)?;
    for (rel, labels) in entries {
        let rec = ManifestRecord {
            path: rel.clone(),
            labels: labels.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::load(format!("json: {e}"))
    }
}

/// Deterministic shuffle split. Train takes round(fraction * N) entries.
pub fn split(
    entries: &[ManifestEntry],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must be inside (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    let mut rng = Seeder::new(seed).stream("split");
    idx.shuffle(&mut rng);
    let n_train = (train_fraction * entries.len() as f64).round() as usize;
    let train = idx[..n_train].iter().map(|&i| entries[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| entries[i].clone()).collect();
    Ok((train, test))
}

/// Aligned LR/HR training pair at an integer scale factor.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub scale: usize,
}

/// Degrades an HR image by bicubic downsampling at `scale`.
pub fn make_pair(hr: ImageTensor, scale: usize) -> Result<SamplePair> {
    if scale == 0 || hr.height % scale != 0 || hr.width % scale != 0 {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible by scale {scale}",
            hr.height, hr.width
        )));
    }
    let lr = bicubic_resize(&hr, hr.height / scale, hr.width / scale)?;
    Ok(SamplePair { lr, hr, scale })
}

/// Multi-hot encoding over the label space.
pub fn encode_labels(labels: &BTreeSet<String>, space: &LabelSpace) -> Result<Vec<f32>> {
    if labels.is_empty() {
        return Err(Error::invalid("label sets must be non-empty"));
    }
    let mut v = vec![0.0f32; space.size()];
    for l in labels {
        match space.index_of(l) {
            Some(i) => v[i] = 1.0,
            None => return Err(Error::invalid(format!("unknown label {l}"))),
        }
    }
    Ok(v)
}

/// Inverse of [`encode_labels`] at a fixed 0.5 threshold.
pub fn decode_labels(vector: &[f32], space: &LabelSpace) -> BTreeSet<String> {
    vector
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 0.5)
        .map(|(i, _)| space.names()[i].clone())
        .collect()
}

/// Texture parameters for [`synth_corpus`]. Defaults are tuned so that class
/// identity survives in the downsampled signal but degrades hard under
/// bicubic restoration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Stripe period in pixels at the reference 224 px size.
    pub period: f64,
    /// Edge sharpening applied to the stripe wave (tanh gain).
    pub sharpness: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    /// Peak strength of the nuisance brightness gradient.
    pub gradient_max: f64,
    pub noise_std: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            period: 8.6,
            sharpness: 3.0,
            amp_min: 0.22,
            amp_max: 0.32,
            gradient_max: 0.16,
            noise_std: 0.015,
        }
    }
}

pub fn synth_class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|k| format!("stripe_{:03}", k * 180 / classes))
        .collect()
}

fn box_muller(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

fn synth_image(
    n: usize,
    class: usize,
    classes: usize,
    p: &SynthParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> ImageTensor {
    let theta = std::f64::consts::PI * class as f64 / classes as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let amp = rng.gen_range(p.amp_min..p.amp_max);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let grad = rng.gen_range(p.gradient_max * 0.4..p.gradient_max);
    let psi = rng.gen_range(0.0..std::f64::consts::PI);
    let (cp, sp) = (psi.cos(), psi.sin());
    let blobs: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.0..n as f64),
                rng.gen_range(0.11..0.31) * n as f64,
                rng.gen_range(-0.09..0.09),
            )
        })
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(0.92..1.08)).collect();
    let tanh_norm = p.sharpness.tanh();
    let mut img = ImageTensor::constant(n, n, 3, 0.0);
    for y in 0..n {
        for x in 0..n {
            let t = x as f64 * ct + y as f64 * st;
            let wave =
                (p.sharpness * (std::f64::consts::TAU * t / p.period + phase).sin()).tanh()
                    / tanh_norm;
            let g = (x as f64 * cp + y as f64 * sp) / n as f64 - 0.5;
            let mut v = 0.5 + amp * wave + grad * g;
            for &(bx, by, s, a) in &blobs {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
            v += box_muller(rng) * p.noise_std;
            for ch in 0..3 {
                *img.at_mut(y, x, ch) = (v * tint[ch]).clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Generates `classes * n_per_class` images under `root` with layout
/// `<root>/<class>/<index>.png` plus a `manifest.jsonl`, and returns the
/// manifest path. Deterministic under `seed`, byte for byte.
pub fn synth_corpus(
    root: &Path,
    classes: usize,
    n_per_class: usize,
    hr_size: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<PathBuf> {
    if classes < 2 {
        return Err(Error::invalid("corpus needs at least 2 classes"));
    }
    if n_per_class == 0 || hr_size < 16 {
        return Err(Error::invalid("corpus needs images and a sane size"));
    }
    let names = synth_class_names(classes);
    let mut rng = Seeder::new(seed).stream("synth");
    let mut records = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir)?;
        for i in 0..n_per_class {
            let img = synth_image(hr_size, k, classes, params, &mut rng);
            let rel = format!("{name}/{i:04}.png");
            write_png(&img, &root.join(&rel))?;
            records.push((rel, vec![name.clone()]));
        }
    }
    let manifest = root.join("manifest.jsonl");
    save_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Decoded-image cache keyed by path; stores 8-bit data to stay small.
#[derive(Default)]
pub struct ImageCache {
    map: HashMap<PathBuf, ImageTensor>,
}

impl ImageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, path: &Path) -> Result<&ImageTensor> {
        if !self.map.contains_key(path) {
            let img = read_png(path)?;
            self.map.insert(path.to_path_buf(), img);
        }
        Ok(&self.map[path])
    }
}
