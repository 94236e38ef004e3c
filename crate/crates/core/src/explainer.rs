//! Visual explanations: upsampled activations, percentile key regions,
//! prototype visualisations and per-class local explanations.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde_json::{json, Value};

use crate::data::{resize_bilinear, Sample};
use crate::error::{Error, Result};
use crate::model::{nearest_target, similarity_from_distance, Aggregation, ComparisonMode, FeatureStack, Model};
use crate::tensor::{argmin_slice, sq_l2, Tensor};

pub const DEFAULT_KAPPA: f64 = 95.0;

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.bottom - self.top + 1) * (self.right - self.left + 1)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }

    /// Fraction of the box covered by a `[S,S]` binary mask.
    pub fn precision(&self, mask: &Tensor) -> f64 {
        let s = mask.shape()[1];
        let mut hit = 0usize;
        for r in self.top..=self.bottom {
            for c in self.left..=self.right {
                if mask.data()[r * s + c] > 0.0 {
                    hit += 1;
                }
            }
        }
        hit as f64 / self.area() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationOverlay {
    pub source_id: String,
    /// `[S,S]` upsampled activation.
    pub activation: Tensor,
    pub threshold: f64,
    /// `[S,S]` key region, 1 where `activation >= threshold`.
    pub mask: Tensor,
    pub bbox: BoundingBox,
}

/// Align-corners bilinear upsampling of an `[H,W]` map to `[size,size]`.
pub fn bilinear_upsample(map: &Tensor, size: usize) -> Result<Tensor> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape(format!("upsampling needs a 2-d map, got {:?}", map.shape())));
    };
    if size < h || size < w {
        return Err(Error::invalid(format!("cannot upsample a {h}x{w} map to {size}x{size}")));
    }
    Tensor::new(vec![size, size], resize_bilinear(map.data(), h, w, size, size))
}

/// Nearest-rank percentile of `values` (`0 < kappa < 100`).
pub fn nearest_rank(values: &[f64], kappa: f64) -> Result<f64> {
    if !(kappa > 0.0 && kappa < 100.0) {
        return Err(Error::invalid(format!("percentile must lie in (0,100), got {kappa}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((kappa * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Key region at the `kappa`-th percentile and its minimal bounding box.
pub fn threshold_region(activation: &Tensor, kappa: f64) -> Result<ActivationOverlay> {
    let &[h, w] = activation.shape() else {
        return Err(Error::shape(format!("activation must be 2-d, got {:?}", activation.shape())));
    };
    let threshold = nearest_rank(activation.data(), kappa)?;
    let mut bbox = BoundingBox {
        top: h,
        left: w,
        bottom: 0,
        right: 0,
    };
    let mask: Vec<f64> = activation
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= threshold {
                let (r, c) = (i / w, i % w);
                bbox.top = bbox.top.min(r);
                bbox.bottom = bbox.bottom.max(r);
                bbox.left = bbox.left.min(c);
                bbox.right = bbox.right.max(c);
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(ActivationOverlay {
        source_id: String::new(),
        activation: activation.clone(),
        threshold,
        mask: Tensor::new(vec![h, w], mask)?,
        bbox,
    })
}

fn overlay_from_grid(grid: Vec<f64>, model: &Model, size: usize, id: &str, kappa: f64) -> Result<ActivationOverlay> {
    let cfg = &model.config;
    let map = Tensor::new(vec![cfg.feature_height, cfg.feature_width], grid)?;
    let mut o = threshold_region(&bilinear_upsample(&map, size)?, kappa)?;
    o.source_id = id.to_string();
    Ok(o)
}

/// Activation grid a prototype induces on one image: the matched channel map
/// in feature-map mode, the per-position similarity in feature-vector mode.
fn prototype_grid(model: &Model, features: &FeatureStack, prototype: &[f64], target: usize) -> Vec<f64> {
    match model.config.comparison {
        ComparisonMode::FeatureMap => features.channel(target).to_vec(),
        ComparisonMode::FeatureVector => (0..features.map_len())
            .map(|p| similarity_from_distance(sq_l2(&features.position(p), prototype), model.config.epsilon))
            .collect(),
    }
}

/// Overlay for channel `c` of the sample's feature stack.
pub fn explain_feature_map(sample: &Sample, channel: usize, model: &Model, kappa: f64) -> Result<ActivationOverlay> {
    if channel >= model.config.feature_channels {
        return Err(Error::invalid(format!(
            "channel {channel} out of range for {} channels",
            model.config.feature_channels
        )));
    }
    let fs = model.extract(&sample.image)?;
    overlay_from_grid(fs.channel(channel).to_vec(), model, sample.size(), &sample.id, kappa)
}

/// Extracted features of a labelled sample set, computed once and shared by
/// explanations and metrics.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub features: Vec<FeatureStack>,
    pub labels: Vec<usize>,
}

impl FeatureBank {
    pub fn build(model: &Model, samples: &[Sample]) -> Result<Self> {
        Ok(FeatureBank {
            features: samples.iter().map(|s| model.extract(&s.image)).collect::<Result<_>>()?,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeExplanation {
    pub class: usize,
    pub index: usize,
    /// Position of the source image in the searched sample list.
    pub sample: usize,
    /// Channel (feature-map mode) or flat position (feature-vector mode).
    pub target: usize,
    pub sq_distance: f64,
    pub overlay: ActivationOverlay,
}

/// Nearest same-class training feature for `p^k_u` and its overlay.
pub fn explain_prototype(model: &Model, train: &[Sample], k: usize, u: usize, kappa: f64) -> Result<PrototypeExplanation> {
    let bank = FeatureBank::build(model, train)?;
    explain_prototype_in(model, &bank, train, k, u, kappa)
}

pub fn explain_prototype_in(
    model: &Model,
    bank: &FeatureBank,
    train: &[Sample],
    k: usize,
    u: usize,
    kappa: f64,
) -> Result<PrototypeExplanation> {
    let cfg = &model.config;
    if k >= cfg.num_classes || u >= cfg.prototypes_per_class {
        return Err(Error::invalid(format!("no prototype ({k}, {u}) in a {}x{} layer", cfg.num_classes, cfg.prototypes_per_class)));
    }
    let p = model.params.prototype(cfg, k, u);
    let hit = nearest_target(&bank.features, &bank.labels, k, p, cfg.comparison)
        .ok_or_else(|| Error::Data(format!("class {k} has no training samples")))?;
    let src = &train[hit.sample];
    let grid = prototype_grid(model, &bank.features[hit.sample], p, hit.target);
    Ok(PrototypeExplanation {
        class: k,
        index: u,
        sample: hit.sample,
        target: hit.target,
        sq_distance: hit.sq_distance,
        overlay: overlay_from_grid(grid, model, src.size(), &src.id, kappa)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassExplanation {
    pub class: usize,
    /// `u`: the class's most similar prototype.
    pub key_prototype: usize,
    /// Channel (or position) of the input closest to the key prototype.
    pub key_target: usize,
    pub similarity: f64,
    pub weight: f64,
    pub logit: f64,
    pub input_overlay: ActivationOverlay,
    pub prototype: PrototypeExplanation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationRecord {
    pub input_id: String,
    pub predicted: usize,
    pub entries: Vec<ClassExplanation>,
}

/// Classes ordered by descending logit (ties to the lower index), first `n`.
pub fn top_classes(logits: &Tensor, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits.data()[b].total_cmp(&logits.data()[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

pub fn explain_decision(
    sample: &Sample,
    model: &Model,
    classes: &[usize],
    bank: &FeatureBank,
    train: &[Sample],
    kappa: f64,
) -> Result<ExplanationRecord> {
    let cfg = &model.config;
    let inf = model.forward(&sample.image)?;
    let mut entries = Vec::with_capacity(classes.len());
    for &k in classes {
        if k >= cfg.num_classes {
            return Err(Error::invalid(format!("class {k} out of range for {} classes", cfg.num_classes)));
        }
        let u = inf.scores.class_argmax[k];
        let p = model.params.prototype(cfg, k, u);
        let dists: Vec<f64> = inf.features.targets(cfg.comparison).iter().map(|t| sq_l2(t, p)).collect();
        let (_, c) = argmin_slice(&dists).expect("at least one target");
        let column = match cfg.aggregation {
            Aggregation::SingleActivation => k,
            Aggregation::DenseSum => k * cfg.prototypes_per_class + u,
        };
        let grid = prototype_grid(model, &inf.features, p, c);
        entries.push(ClassExplanation {
            class: k,
            key_prototype: u,
            key_target: c,
            similarity: inf.scores.class_max.data()[k],
            weight: model.params.fc.at(&[k, column]),
            logit: inf.logits.data()[k],
            input_overlay: overlay_from_grid(grid, model, sample.size(), &sample.id, kappa)?,
            prototype: explain_prototype_in(model, bank, train, k, u, kappa)?,
        });
    }
    Ok(ExplanationRecord {
        input_id: sample.id.clone(),
        predicted: inf.predicted(),
        entries,
    })
}

fn bbox_json(b: &BoundingBox) -> Value {
    json!({ "top": b.top, "left": b.left, "bottom": b.bottom, "right": b.right })
}

impl ExplanationRecord {
    pub fn to_json(&self, train: &[Sample]) -> Value {
        let entries: Vec<Value> = self
            .entries
            .iter()
            .map(|e| {
                json!({
                    "class": e.class,
                    "key_prototype": e.key_prototype,
                    "key_channel": e.key_target,
                    "similarity": e.similarity,
                    "weight": e.weight,
                    "logit": e.logit,
                    "input_threshold": e.input_overlay.threshold,
                    "input_box": bbox_json(&e.input_overlay.bbox),
                    "prototype_source": train.get(e.prototype.sample).map(|s| s.id.clone()),
                    "prototype_channel": e.prototype.target,
                    "prototype_sq_distance": e.prototype.sq_distance,
                    "prototype_box": bbox_json(&e.prototype.overlay.bbox),
                })
            })
            .collect();
        json!({
            "input_id": self.input_id,
            "predicted_class": self.predicted,
            "classes": entries,
        })
    }

    /// Write `<id>_class<k>_{input,prototype}[_heatmap].png` and
    /// `<id>.explain.json` into `dir`.
    pub fn export(&self, dir: &Path, input: &Sample, train: &[Sample]) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = self.input_id.replace(['/', '\\'], "_");
        let mut written = Vec::new();
        for e in &self.entries {
            let src = &train[e.prototype.sample];
            for (tag, sample, overlay) in [("input", input, &e.input_overlay), ("prototype", src, &e.prototype.overlay)] {
                let base = format!("{stem}_class{}_{tag}", e.class);
                let boxed = dir.join(format!("{base}.png"));
                let heat = dir.join(format!("{base}_heatmap.png"));
                save_png(&render_box(&sample.image, &overlay.bbox), &boxed)?;
                save_png(&render_heatmap(&sample.image, &overlay.activation), &heat)?;
                written.push(boxed);
                written.push(heat);
            }
        }
        let path = dir.join(format!("{stem}.explain.json"));
        let text = serde_json::to_string_pretty(&self.to_json(train)).expect("json value serialises");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(written)
    }
}

fn to_rgb(image: &Tensor) -> RgbImage {
    let s = image.shape()[1];
    let d = image.data();
    RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let i = y as usize * s + x as usize;
        let px = |c: usize| (d[c * s * s + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Image with a one-pixel yellow rectangle drawn along `bbox`.
pub fn render_box(image: &Tensor, bbox: &BoundingBox) -> RgbImage {
    let mut img = to_rgb(image);
    let yellow = Rgb([255, 230, 0]);
    for c in bbox.left..=bbox.right {
        img.put_pixel(c as u32, bbox.top as u32, yellow);
        img.put_pixel(c as u32, bbox.bottom as u32, yellow);
    }
    for r in bbox.top..=bbox.bottom {
        img.put_pixel(bbox.left as u32, r as u32, yellow);
        img.put_pixel(bbox.right as u32, r as u32, yellow);
    }
    img
}

/// Image blended half-and-half with a red-to-yellow ramp of the min-max
/// normalised activation.
pub fn render_heatmap(image: &Tensor, activation: &Tensor) -> RgbImage {
    let mut img = to_rgb(image);
    let (lo, hi) = activation
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let s = activation.shape()[1];
    for (x, y, px) in img.enumerate_pixels_mut() {
        let t = (activation.data()[y as usize * s + x as usize] - lo) / span;
        let heat = [255.0 * t.min(0.5) * 2.0, 255.0 * (t - 0.5).max(0.0) * 2.0, 0.0];
        for c in 0..3 {
            px[c] = (0.5 * px[c] as f64 + 0.5 * heat[c]).round() as u8;
        }
    }
    img
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
