//! Pipeline comparison harness: degrade a labeled test set to low resolution
//! once, restore it along each candidate route, classify every variant with
//! the same model and thresholds, and report exact-match accuracy beside
//! restoration fidelity.

use crate::datasets::{LabelSpace, ManifestEntry};
use crate::diagnosis::{predict_batch, subset_accuracy, Classifier};
use crate::imaging::{bicubic_resize, ensure_rgb, psnr, read_png, write_png, ImageTensor};
use crate::sr_models::{generator_forward, Generator};
use crate::{Error, Result};
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// One restoration route under comparison. The original route passes the
/// source image through untouched; the others upscale its degraded copy.
pub enum PipelineVariant<'a> {
    Bicubic,
    GPix(&'a Generator<f32>),
    GFeat(&'a Generator<f32>),
    Original,
}

impl PipelineVariant<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineVariant::Bicubic => "bicubic",
            PipelineVariant::GPix(_) => "g_pix",
            PipelineVariant::GFeat(_) => "g_feat",
            PipelineVariant::Original => "original",
        }
    }
}

/// A degraded sample: the low-resolution input every restorer sees, the
/// source it was made from, and its truth labels.
pub struct EvalSample {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub labels: BTreeSet<String>,
}

pub struct DegradedSet {
    pub samples: Vec<EvalSample>,
    /// Items that could not be prepared, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub lr_size: usize,
}

/// Bicubic-downscales every readable test image to lr_size x lr_size.
/// Unreadable or undersized items are recorded and skipped rather than
/// aborting the run. Deterministic for a given entry list.
pub fn degrade_testset(entries: &[ManifestEntry], lr_size: usize) -> Result<DegradedSet> {
    if lr_size == 0 {
        return Err(Error::invalid("low-resolution edge must be nonzero"));
    }
    let results: Vec<Result<EvalSample>> = entries
        .par_iter()
        .map(|e| {
            let img = ensure_rgb(read_png(&e.path)?);
            if img.height < lr_size || img.width < lr_size {
                return Err(Error::invalid(format!(
                    "{}x{} image is smaller than the {lr_size}px target",
                    img.height, img.width
                )));
            }
            let lr = bicubic_resize(&img, lr_size, lr_size)?;
            Ok(EvalSample {
                lr,
                hr: img,
                labels: e.labels.clone(),
            })
        })
        .collect();
    let mut samples = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(s) => samples.push(s),
            Err(err) => skipped.push((e.path.clone(), err.to_string())),
        }
    }
    Ok(DegradedSet {
        samples,
        skipped,
        lr_size,
    })
}

/// Upscales one degraded image along the given route (4x in the supported
/// configuration) and clamps the result to [0, 1].
pub fn restore(variant: &PipelineVariant, lr: &ImageTensor) -> Result<ImageTensor> {
    let mut out = match variant {
        PipelineVariant::Original => {
            return Err(Error::invalid("the original route has nothing to restore"))
        }
        PipelineVariant::Bicubic => bicubic_resize(lr, 4 * lr.height, 4 * lr.width)?,
        PipelineVariant::GPix(g) | PipelineVariant::GFeat(g) => {
            generator_forward(g, std::slice::from_ref(lr))?
                .pop()
                .expect("one image in, one out")
        }
    };
    out.clamp01();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantMetrics {
    pub variant: String,
    /// Exact-match label accuracy over the evaluated items.
    pub accuracy: f64,
    /// Mean PSNR of the restored images against their sources; absent for
    /// the original route.
    pub mean_psnr: Option<f64>,
    /// Items that survived restoration and classification.
    pub n: usize,
}

pub struct MetricsTable {
    pub rows: Vec<VariantMetrics>,
    /// Restored images kept for the contact sheet, aligned with rows; inner
    /// lists hold the first samples of each route in test-set order.
    pub previews: Vec<Vec<ImageTensor>>,
}

/// Runs every route over the same degraded samples and scores them with one
/// classifier and one threshold vector. Restoration and fidelity run in
/// parallel per item; classification and aggregation are single-threaded.
/// Per-item failures are logged and shrink that route's count. An empty test
/// set yields an empty table.
pub fn compare_pipelines(
    clf: &mut Classifier<f32>,
    space: &LabelSpace,
    thresholds: &[f64],
    variants: &[PipelineVariant],
    set: &DegradedSet,
    previews: usize,
) -> Result<MetricsTable> {
    if clf.cfg.input_size != 4 * set.lr_size {
        return Err(Error::config(format!(
            "classifier input {} does not match 4x the {}px low-resolution edge",
            clf.cfg.input_size, set.lr_size
        )));
    }
    let mut table = MetricsTable {
        rows: Vec::new(),
        previews: Vec::new(),
    };
    if set.samples.is_empty() {
        return Ok(table);
    }
    for v in variants {
        let restored: Vec<Result<(ImageTensor, Option<f64>)>> = set
            .samples
            .par_iter()
            .map(|s| match v {
                PipelineVariant::Original => Ok((s.hr.clone(), None)),
                _ => {
                    let img = restore(v, &s.lr)?;
                    let quality = psnr(&img, &s.hr)?;
                    Ok((img, Some(quality)))
                }
            })
            .collect();

        let mut images = Vec::with_capacity(set.samples.len());
        let mut qualities = Vec::new();
        let mut truths = Vec::with_capacity(set.samples.len());
        for (s, r) in set.samples.iter().zip(restored) {
            let (img, quality) = match r {
                Ok(pair) => pair,
                Err(e) => {
                    log::warn!("{} route skipped an item: {e}", v.name());
                    continue;
                }
            };
            if let Err(e) = clf.check_input(&img) {
                log::warn!("{} route skipped an item: {e}", v.name());
                continue;
            }
            images.push(img);
            qualities.extend(quality);
            truths.push(s.labels.clone());
        }

        let mut predictions = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            predictions.extend(predict_batch(clf, space, chunk, thresholds)?);
        }
        let n = predictions.len();
        let accuracy = if n == 0 {
            0.0
        } else {
            subset_accuracy(&predictions, &truths)?
        };
        let mean_psnr = if qualities.is_empty() {
            None
        } else {
            Some(qualities.iter().sum::<f64>() / qualities.len() as f64)
        };
        table.rows.push(VariantMetrics {
            variant: v.name().to_string(),
            accuracy,
            mean_psnr,
            n,
        });
        images.truncate(previews);
        table.previews.push(images);
    }
    Ok(table)
}

const REPORT_HEADER: &str = "variant,accuracy,mean_psnr,n";

/// Writes report.csv (and contact_sheet.png when previews exist) into dir.
/// Floats use the shortest representation that parses back exactly.
pub fn export_report(table: &MetricsTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for r in &table.rows {
        let p = r.mean_psnr.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{}\n", r.variant, r.accuracy, p, r.n));
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    if let Some(sheet) = contact_sheet(&table.previews) {
        write_png(&sheet, &dir.join("contact_sheet.png"))?;
    }
    Ok(())
}

/// Reads report.csv back into rows.
pub fn parse_report(path: &Path) -> Result<Vec<VariantMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {REPORT_HEADER}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse(format!("expected 4 fields, got {}", fields.len())));
        }
        let accuracy: f64 = fields[1]
            .parse()
            .map_err(|_| parse(format!("bad accuracy {}", fields[1])))?;
        let mean_psnr = if fields[2].is_empty() {
            None
        } else {
            Some(
                fields[2]
                    .parse()
                    .map_err(|_| parse(format!("bad psnr {}", fields[2])))?,
            )
        };
        let n: usize = fields[3]
            .parse()
            .map_err(|_| parse(format!("bad count {}", fields[3])))?;
        rows.push(VariantMetrics {
            variant: fields[0].to_string(),
            accuracy,
            mean_psnr,
            n,
        });
    }
    Ok(rows)
}

fn center_crop(img: &ImageTensor, edge: usize) -> ImageTensor {
    let y0 = (img.height - edge) / 2;
    let x0 = (img.width - edge) / 2;
    let mut out = ImageTensor::constant(edge, edge, img.channels, 0.0);
    for y in 0..edge {
        for x in 0..edge {
            for c in 0..img.channels {
                *out.at_mut(y, x, c) = img.at(y0 + y, x0 + x, c);
            }
        }
    }
    out
}

/// Tiles center crops into a grid of sample rows by route columns, separated
/// by a two-pixel white gutter. Returns None when there is nothing to show.
pub fn contact_sheet(previews: &[Vec<ImageTensor>]) -> Option<ImageTensor> {
    let cols = previews.len();
    let k = previews.iter().map(|v| v.len()).min().unwrap_or(0);
    if cols == 0 || k == 0 {
        return None;
    }
    let edge = previews
        .iter()
        .flat_map(|v| v[..k].iter())
        .map(|im| im.height.min(im.width))
        .min()
        .expect("nonempty previews")
        / 2;
    let edge = edge.max(1);
    let gutter = 2;
    let h = k * edge + (k - 1) * gutter;
    let w = cols * edge + (cols - 1) * gutter;
    let mut sheet = ImageTensor::constant(h, w, 3, 1.0);
    for (col, route) in previews.iter().enumerate() {
        for (row, img) in route[..k].iter().enumerate() {
            let cell = center_crop(img, edge);
            let (oy, ox) = (row * (edge + gutter), col * (edge + gutter));
            for y in 0..edge {
                for x in 0..edge {
                    for c in 0..3 {
                        *sheet.at_mut(oy + y, ox + x, c) = cell.at(y, x, c);
                    }
                }
            }
        }
    }
    Some(sheet)
}
