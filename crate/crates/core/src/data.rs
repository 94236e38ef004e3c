//! Synthetic fine-grained dataset, image-folder ingestion and augmentation.
//!
//! Every synthetic class shares one body shape (an ellipse at a random
//! position and scale) and carries a single class-unique part glyph
//! attached to the body boundary. Foreground masks cover body and part.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_IMAGE_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 4,
            per_class: 60,
            image_size: 64,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > GLYPHS.len() * PALETTE.len() {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={}, got {}",
                GLYPHS.len() * PALETTE.len(),
                self.num_classes
            )));
        }
        if self.per_class < 2 {
            return Err(Error::Config(format!("per_class must be at least 2, got {}", self.per_class)));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size {} is below the minimum of {MIN_IMAGE_SIZE}",
                self.image_size
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Per-class training count, keeping both splits non-empty.
    pub fn train_per_class(&self) -> usize {
        let n = (self.per_class as f64 * self.train_fraction).round() as usize;
        n.clamp(1, self.per_class - 1)
    }

    /// `key = value` echo, one field per line.
    pub fn to_text(&self) -> String {
        format!(
            "num_classes = {}\nper_class = {}\nimage_size = {}\nseed = {}\ntrain_fraction = {}\n",
            self.num_classes, self.per_class, self.image_size, self.seed, self.train_fraction
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// `[S, S]`, 1 on foreground.
    pub mask: Tensor,
    pub id: String,
    /// Set when the mask is an all-ones stand-in for a missing file.
    pub mask_missing: bool,
    /// Discriminative-part pixels, known only for synthetic samples.
    pub part_mask: Option<Tensor>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Glyph {
    Disc,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Bar,
    Chevron,
}

const GLYPHS: [Glyph; 8] = [
    Glyph::Disc,
    Glyph::Square,
    Glyph::Triangle,
    Glyph::Cross,
    Glyph::Diamond,
    Glyph::Ring,
    Glyph::Bar,
    Glyph::Chevron,
];

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.45, 0.85],
    [0.95, 0.80, 0.10],
    [0.20, 0.70, 0.25],
    [0.70, 0.20, 0.75],
    [0.95, 0.50, 0.10],
    [0.10, 0.75, 0.75],
    [0.95, 0.95, 0.95],
];

const BODY_COLOR: [f64; 3] = [0.50, 0.40, 0.32];

/// The class-unique discriminative part: glyph shape plus colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartDescriptor {
    pub glyph: Glyph,
    pub color: [f64; 3],
}

pub fn part_descriptor(class: usize) -> PartDescriptor {
    let n = GLYPHS.len();
    PartDescriptor {
        glyph: GLYPHS[class % n],
        color: PALETTE[(class + class / n) % PALETTE.len()],
    }
}

/// Geometry of one synthetic object, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layout {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// Angle (radians, image coordinates with y down) of the part on the body boundary.
    pub part_angle: f64,
    pub part_radius: f64,
}

impl Layout {
    pub fn random(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let a = s * rng.gen_range(0.18..0.24);
        let b = a * rng.gen_range(0.6..0.8);
        let part_radius = s * rng.gen_range(0.075..0.095);
        let part_angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let margin = a + 2.0 * part_radius + 2.0;
        let cx = rng.gen_range(margin..(s - margin).max(margin + 1e-9));
        let cy = rng.gen_range(margin..(s - margin).max(margin + 1e-9));
        Layout {
            center: (cx, cy),
            semi_axes: (a, b),
            part_angle,
            part_radius,
        }
    }

    pub fn part_center(&self) -> (f64, f64) {
        let (a, b) = self.semi_axes;
        (
            self.center.0 + a * self.part_angle.cos(),
            self.center.1 + b * self.part_angle.sin(),
        )
    }

    fn in_body(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center.0) / self.semi_axes.0;
        let dy = (y - self.center.1) / self.semi_axes.1;
        dx * dx + dy * dy <= 1.0
    }
}

fn in_glyph(glyph: Glyph, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match glyph {
        Glyph::Disc => dx * dx + dy * dy <= r * r,
        Glyph::Square => ax <= 0.8 * r && ay <= 0.8 * r,
        Glyph::Triangle => dy <= 0.7 * r && dy >= -r && ax <= (dy + r) * 0.6,
        Glyph::Cross => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
        Glyph::Diamond => ax + ay <= r,
        Glyph::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        Glyph::Bar => ax <= r && ay <= 0.35 * r,
        Glyph::Chevron => ax <= r && dy >= ax * 0.9 - 0.7 * r && dy <= ax * 0.9 - 0.1 * r,
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw one synthetic image of `class` with the given object geometry.
pub fn render(class: usize, layout: &Layout, size: usize, id: String, rng: &mut impl Rng) -> Sample {
    let s = size;
    let part = part_descriptor(class);

    // low-frequency value noise plus per-pixel grain
    let grid = 9;
    let coarse: Vec<f64> = (0..3 * grid * grid).map(|_| rng.gen_range(0.2..0.7)).collect();
    let body_jitter: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.08..0.08)).collect();
    let part_jitter: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();

    let mut image = vec![0.0; 3 * s * s];
    let mut mask = vec![0.0; s * s];
    let mut part_mask = vec![0.0; s * s];
    let (pcx, pcy) = layout.part_center();
    let scale = (grid - 1) as f64 / (s - 1) as f64;
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let in_part = in_glyph(part.glyph, fx - pcx, fy - pcy, layout.part_radius);
            let in_body = layout.in_body(fx, fy);
            let grain: f64 = rng.gen_range(-0.06..0.06);
            for c in 0..3 {
                let v = if in_part {
                    part.color[c] + part_jitter[c] + 0.5 * grain
                } else if in_body {
                    let shade = 0.12 * ((fy - layout.center.1) / layout.semi_axes.1);
                    BODY_COLOR[c] + body_jitter[c] - shade + grain
                } else {
                    bilinear_at(&coarse[c * grid * grid..(c + 1) * grid * grid], grid, grid, x as f64 * scale, y as f64 * scale)
                        + grain
                };
                image[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
            if in_part || in_body {
                mask[y * s + x] = 1.0;
            }
            if in_part {
                part_mask[y * s + x] = 1.0;
            }
        }
    }
    Sample {
        image: Tensor::new(vec![3, s, s], image).expect("image shape"),
        label: class,
        mask: Tensor::new(vec![s, s], mask).expect("mask shape"),
        id,
        mask_missing: false,
        part_mask: Some(Tensor::new(vec![s, s], part_mask).expect("mask shape")),
    }
}

pub fn class_name(class: usize) -> String {
    format!("class_{class:02}")
}

/// Deterministic stratified train/test split. Each sample owns a
/// counter-derived RNG stream, so the output is a pure function of `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let n_train = spec.train_per_class();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.num_classes {
        for i in 0..spec.per_class {
            let mut rng = sample_rng(spec.seed, (class * spec.per_class + i) as u64);
            let layout = Layout::random(spec.image_size, &mut rng);
            let id = format!("{}-{i:04}", class_name(class));
            let sample = render(class, &layout, spec.image_size, id, &mut rng);
            if i < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    Ok((train, test))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn image_to_rgb(image: &Tensor) -> image::RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|c| to_u8(d[(c * h + y) * w + x])))
    })
}

fn write_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Write samples in the image-folder layout: `root/<class>/<stem>.png` and
/// `root/masks/<class>/<stem>.png`.
pub fn save_folder(samples: &[Sample], root: &Path) -> Result<()> {
    for sample in samples {
        let class = class_name(sample.label);
        let stem = file_stem_for(sample);
        let dir = root.join(&class);
        let mdir = root.join("masks").join(&class);
        for d in [&dir, &mdir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        write_png(&image::DynamicImage::ImageRgb8(image_to_rgb(&sample.image)), &dir.join(format!("{stem}.png")))?;
        let s = sample.size();
        let m = sample.mask.data();
        let gray = image::GrayImage::from_fn(s as u32, s as u32, |x, y| {
            image::Luma([if m[y as usize * s + x as usize] > 0.5 { 255 } else { 0 }])
        });
        write_png(&image::DynamicImage::ImageLuma8(gray), &mdir.join(format!("{stem}.png")))?;
    }
    Ok(())
}

fn file_stem_for(sample: &Sample) -> String {
    let prefix = format!("{}-", class_name(sample.label));
    sample.id.strip_prefix(&prefix).unwrap_or(&sample.id).to_string()
}

/// Generate a dataset and write it under `root/train`, `root/test`, plus a
/// `root/spec.txt` echo.
pub fn write_dataset(spec: &DatasetSpec, root: &Path) -> Result<()> {
    let (train, test) = generate(spec)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    save_folder(&train, &root.join("train"))?;
    save_folder(&test, &root.join("test"))?;
    let spec_path = root.join("spec.txt");
    fs::write(&spec_path, spec.to_text()).map_err(|e| Error::io(&spec_path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decode one image file into a `[3, size, size]` tensor in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    if size < 2 {
        return Err(Error::invalid("target image size must be at least 2"));
    }
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut chw = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            chw[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    let planes: Vec<f64> = (0..3)
        .flat_map(|c| resize_bilinear(&chw[c * h * w..(c + 1) * h * w], h, w, size, size))
        .collect();
    Tensor::new(vec![3, size, size], planes)
}

/// Load `root/<class>/*.png` in lexicographic class and file order,
/// resizing to `size`×`size` with bilinear resampling.
pub fn load_folder(root: &Path, size: usize) -> Result<Vec<Sample>> {
    if size < 2 {
        return Err(Error::invalid("target image size must be at least 2"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "masks"))
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} contains no class directories", root.display())));
    }
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class = dir.file_name().unwrap().to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} is empty", dir.display())));
        }
        for file in files {
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            let image = load_image(&file, size)?;
            let mask_path = root.join("masks").join(&class).join(format!("{stem}.png"));
            let (mask, missing) = if mask_path.is_file() {
                let g = decode(&mask_path)?.to_luma8();
                let (mw, mh) = (g.width() as usize, g.height() as usize);
                let raw: Vec<f64> = g.pixels().map(|p| if p[0] > 0 { 1.0 } else { 0.0 }).collect();
                let resized = resize_bilinear(&raw, mh, mw, size, size);
                (resized.into_iter().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(), false)
            } else {
                (vec![1.0; size * size], true)
            };
            samples.push(Sample {
                image,
                label,
                mask: Tensor::new(vec![size, size], mask)?,
                id: format!("{class}-{stem}"),
                mask_missing: missing,
                part_mask: None,
            });
        }
    }
    Ok(samples)
}

/// Train and test samples from a data directory. A directory with `train/`
/// and `test/` children is used as-is; otherwise the single folder is split
/// per class, the first `train_fraction` of each class going to training.
pub fn load_split(root: &Path, size: usize, train_fraction: f64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (tr, te) = (root.join("train"), root.join("test"));
    if tr.is_dir() && te.is_dir() {
        return Ok((load_folder(&tr, size)?, load_folder(&te, size)?));
    }
    let all = load_folder(root, size)?;
    let classes = all.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..classes {
        let members: Vec<&Sample> = all.iter().filter(|s| s.label == k).collect();
        if members.len() < 2 {
            return Err(Error::Data(format!("class {k} needs at least 2 images to split")));
        }
        let n = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        for (i, s) in members.into_iter().enumerate() {
            if i < n {
                train.push(s.clone());
            } else {
                test.push(s.clone());
            }
        }
    }
    Ok((train, test))
}

/// Bilinear sample of a row-major `h×w` plane at fractional `(x, y)`,
/// clamping to the border.
pub(crate) fn bilinear_at(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Align-corners bilinear resize of a row-major plane.
pub fn resize_bilinear(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    // multiply before dividing so the last sample lands exactly on the last source pixel
    let coord = |i: usize, src: usize, dst: usize| {
        if dst > 1 {
            (i * (src - 1)) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let fy = coord(y, h, out_h);
        for x in 0..out_w {
            out.push(bilinear_at(plane, h, w, coord(x, w, out_w), fy));
        }
    }
    out
}

/// One draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    /// Horizontal shear angle.
    pub shear_deg: f64,
    /// Vertical shear angle.
    pub skew_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        rotation_deg: 0.0,
        shear_deg: 0.0,
        skew_deg: 0.0,
    };
    pub const MAX_ROTATION_DEG: f64 = 15.0;
    pub const MAX_SHEAR_DEG: f64 = 10.0;

    pub fn draw(rng: &mut impl Rng) -> Self {
        AugmentParams {
            flip: rng.gen_bool(0.5),
            rotation_deg: rng.gen_range(-Self::MAX_ROTATION_DEG..=Self::MAX_ROTATION_DEG),
            shear_deg: rng.gen_range(-Self::MAX_SHEAR_DEG..=Self::MAX_SHEAR_DEG),
            skew_deg: rng.gen_range(-Self::MAX_SHEAR_DEG..=Self::MAX_SHEAR_DEG),
        }
    }

    /// Inverse of the forward map (flip after rotation after shears), as a
    /// 2×2 matrix acting on centred coordinates.
    fn inverse_matrix(&self) -> [[f64; 2]; 2] {
        let (sn, cs) = self.rotation_deg.to_radians().sin_cos();
        let shx = self.shear_deg.to_radians().tan();
        let shy = self.skew_deg.to_radians().tan();
        // forward = F * R * Sy * Sx
        let f = if self.flip { -1.0 } else { 1.0 };
        let r = [[cs, -sn], [sn, cs]];
        let sy = [[1.0, 0.0], [shy, 1.0]];
        let sx = [[1.0, shx], [0.0, 1.0]];
        let fwd = matmul(&[[f, 0.0], [0.0, 1.0]], &matmul(&r, &matmul(&sy, &sx)));
        let det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
        [
            [fwd[1][1] / det, -fwd[0][1] / det],
            [-fwd[1][0] / det, fwd[0][0] / det],
        ]
    }
}

fn matmul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Apply one geometric transform to image (bilinear, border-clamped) and
/// masks (nearest, zero outside).
pub fn apply_augment(sample: &Sample, params: &AugmentParams) -> Sample {
    if *params == AugmentParams::IDENTITY {
        return sample.clone();
    }
    let s = sample.size();
    let c = (s - 1) as f64 / 2.0;
    let inv = params.inverse_matrix();
    let mut image = vec![0.0; 3 * s * s];
    let mut mask = vec![0.0; s * s];
    let mut part = sample.part_mask.as_ref().map(|_| vec![0.0; s * s]);
    let src = sample.image.data();
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = inv[0][0] * dx + inv[0][1] * dy + c;
            let sy = inv[1][0] * dx + inv[1][1] * dy + c;
            for ch in 0..3 {
                let v = bilinear_at(&src[ch * s * s..(ch + 1) * s * s], s, s, sx, sy);
                image[(ch * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && nx < s as f64 && ny < s as f64 {
                let o = ny as usize * s + nx as usize;
                mask[y * s + x] = sample.mask.data()[o];
                if let (Some(p), Some(src_p)) = (part.as_mut(), sample.part_mask.as_ref()) {
                    p[y * s + x] = src_p.data()[o];
                }
            }
        }
    }
    Sample {
        image: Tensor::new(vec![3, s, s], image).expect("image shape"),
        label: sample.label,
        mask: Tensor::new(vec![s, s], mask).expect("mask shape"),
        id: sample.id.clone(),
        mask_missing: sample.mask_missing,
        part_mask: part.map(|p| Tensor::new(vec![s, s], p).expect("mask shape")),
    }
}

pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let params = AugmentParams::draw(rng);
    apply_augment(sample, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 4,
            per_class: 50,
            image_size: 64,
            seed: 7,
            train_fraction: 0.8,
        }
    }

    fn area(t: &Tensor) -> f64 {
        t.data().iter().sum()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_is_stratified() {
        let spec = small_spec();
        let (train, test) = generate(&spec).unwrap();
        for k in 0..spec.num_classes {
            let tr = train.iter().filter(|s| s.label == k).count();
            let te = test.iter().filter(|s| s.label == k).count();
            assert!(tr > 0 && te > 0);
            assert!((tr as f64 - spec.per_class as f64 * spec.train_fraction).abs() <= 1.0);
            assert_eq!(tr + te, spec.per_class);
        }
    }

    #[test]
    fn mask_area_bounds_over_many_samples() {
        let spec = DatasetSpec {
            num_classes: 8,
            per_class: 125,
            image_size: 64,
            seed: 3,
            train_fraction: 0.5,
        };
        let (train, test) = generate(&spec).unwrap();
        assert_eq!(train.len() + test.len(), 1000);
        for s in train.iter().chain(&test) {
            let frac = area(&s.mask) / (64.0 * 64.0);
            assert!(frac > 0.05 && frac < 0.60, "{} has mask fraction {frac}", s.id);
            assert!(area(s.part_mask.as_ref().unwrap()) > 0.0);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn part_descriptors_are_class_unique() {
        for a in 0..64 {
            for b in 0..a {
                assert_ne!(part_descriptor(a), part_descriptor(b), "classes {a} and {b}");
            }
        }
    }

    #[test]
    fn rejects_small_images_and_single_sample_classes() {
        let spec = DatasetSpec { image_size: 16, ..small_spec() };
        assert!(generate(&spec).is_err());
        let spec = DatasetSpec { per_class: 1, ..small_spec() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let (train, _) = generate(&small_spec()).unwrap();
        assert_eq!(apply_augment(&train[0], &AugmentParams::IDENTITY), train[0]);
    }

    #[test]
    fn double_flip_restores_image() {
        let (train, _) = generate(&small_spec()).unwrap();
        let flip = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
        let once = apply_augment(&train[3], &flip);
        assert_ne!(once.image, train[3].image);
        let twice = apply_augment(&once, &flip);
        assert_eq!(twice.image, train[3].image);
        assert_eq!(twice.mask, train[3].mask);
    }

    #[test]
    fn augmentation_keeps_label_registration_and_area() {
        let spec = DatasetSpec {
            num_classes: 4,
            per_class: 250,
            image_size: 64,
            seed: 11,
            train_fraction: 0.5,
        };
        let (train, test) = generate(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for s in train.iter().chain(&test) {
            let a = augment(s, &mut rng);
            assert_eq!(a.label, s.label);
            let part = a.part_mask.as_ref().unwrap();
            for (p, m) in part.data().iter().zip(a.mask.data()) {
                assert!(*p <= *m, "part pixel outside mask");
            }
            assert!(area(part) > 0.0, "part left the frame");
            let rel = (area(&a.mask) - area(&s.mask)).abs() / area(&s.mask);
            worst = worst.max(rel);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(worst < 0.25, "worst relative mask-area change {worst}");
    }

    #[test]
    fn folder_round_trip_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            num_classes: 2,
            per_class: 4,
            image_size: 32,
            seed: 1,
            train_fraction: 0.75,
        };
        write_dataset(&spec, dir.path()).unwrap();
        let train = load_folder(&dir.path().join("train"), 32).unwrap();
        assert_eq!(train.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
        assert!(train.iter().all(|s| !s.mask_missing));
        let (orig, _) = generate(&spec).unwrap();
        for (a, b) in orig.iter().zip(&train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
        let again = load_folder(&dir.path().join("train"), 32).unwrap();
        assert_eq!(train, again);
        let text = std::fs::read_to_string(dir.path().join("spec.txt")).unwrap();
        assert!(text.contains("num_classes = 2"));
    }

    #[test]
    fn folder_without_masks_flags_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            num_classes: 2,
            per_class: 3,
            image_size: 32,
            seed: 1,
            train_fraction: 0.5,
        };
        let (train, _) = generate(&spec).unwrap();
        save_folder(&train, dir.path()).unwrap();
        std::fs::remove_dir_all(dir.path().join("masks")).unwrap();
        let loaded = load_folder(dir.path(), 40).unwrap();
        assert!(loaded.iter().all(|s| s.mask_missing && s.mask.data().iter().all(|&v| v == 1.0)));
        assert_eq!(loaded[0].image.shape(), &[3, 40, 40]);
    }

    #[test]
    fn folder_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        let err = load_folder(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
        std::fs::write(dir.path().join("a").join("bad.png"), b"not a png").unwrap();
        let err = load_folder(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("bad.png"), "{err}");
    }
}
