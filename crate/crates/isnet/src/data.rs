//! Synthetic segmentation data with controllable class co-occurrence, the
//! training augmentations, batching and the ISEG on-disk format.
//!
//! Every sample is a pure function of (spec seed, index): an event draw
//! picks which object classes appear (singles and pairs from the
//! co-occurrence table), each chosen class paints one rectangle or ellipse
//! in its fixed base color with later classes occluding earlier ones, and
//! Gaussian noise is added to the image only. Shape half-extents are capped
//! at a third of each image extent so background always survives.

use crate::error::{IsnetError, Result};
use crate::loss::{LabelMap, IGNORE};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMap,
    pub k: u16,
}

/// Co-occurrence entries address object classes only (1..K); background is
/// class 0 everywhere a shape does not cover.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub sigma: f64,
    /// upper triangle incl. diagonal over classes 1..K; co[i][j] with i<j is
    /// the probability classes i and j both appear, co[i][i] the probability
    /// class i appears alone
    pub co: Vec<Vec<f64>>,
}

impl DatasetSpec {
    pub fn new(
        seed: u64,
        count: usize,
        height: usize,
        width: usize,
        k: usize,
        sigma: f64,
        co: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if k < 2 {
            return Err(IsnetError::usage(format!("need at least 2 classes, got {k}")));
        }
        if co.len() != k || co.iter().any(|row| row.len() != k) {
            return Err(IsnetError::usage(format!("co-occurrence table must be {k}x{k}")));
        }
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let p = co[i][j];
                if !(0.0..=1.0).contains(&p) {
                    return Err(IsnetError::usage(format!(
                        "co-occurrence entry [{i}][{j}] = {p} outside [0,1]"
                    )));
                }
                if (i == 0 || j == 0 || j < i) && p != 0.0 {
                    return Err(IsnetError::usage(format!(
                        "co-occurrence entry [{i}][{j}] must be 0 (background row/column \
                         and lower triangle are unused)"
                    )));
                }
                if i >= 1 && j >= i {
                    total += p;
                }
            }
        }
        if total > 1.0 + 1e-12 {
            return Err(IsnetError::usage(format!(
                "co-occurrence probabilities sum to {total}, above 1"
            )));
        }
        Ok(DatasetSpec { seed, count, height, width, k, sigma, co })
    }

    /// Desk defaults: 64x64, 5 classes, two strongly and two weakly
    /// co-occurring pairs plus singles, 20% background-only images.
    pub fn desk(seed: u64, count: usize) -> Self {
        let mut co = vec![vec![0.0; 5]; 5];
        co[1][2] = 0.15;
        co[3][4] = 0.15;
        co[1][3] = 0.05;
        co[2][4] = 0.05;
        for i in 1..5 {
            co[i][i] = 0.1;
        }
        DatasetSpec::new(seed, count, 64, 64, 5, 0.05, co).unwrap()
    }

    /// Events in deterministic order: (classes, probability).
    fn events(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        for i in 1..self.k {
            for j in i..self.k {
                if self.co[i][j] > 0.0 {
                    let classes = if i == j { vec![i] } else { vec![i, j] };
                    out.push((classes, self.co[i][j]));
                }
            }
        }
        out
    }
}

/// Fixed distinctive base color per class; background is dark gray.
pub fn class_color(class: usize) -> [f32; 3] {
    if class == 0 {
        return [0.2, 0.2, 0.2];
    }
    // golden-ratio hue cycling keeps moderate class counts well separated
    let h = (class as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let sector = h.floor() as usize % 6;
    let f = (h - h.floor()) as f32;
    let (v, p, q, t) = (0.85f32, 0.25f32, 0.85 - (0.85 - 0.25) * f, 0.25 + (0.85 - 0.25) * f);
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

enum ShapeKind {
    Rect,
    Ellipse,
}

/// Fully determined by (spec.seed, index).
pub fn generate(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    if index >= spec.count {
        return Err(IsnetError::usage(format!(
            "index {index} out of range for a {}-sample dataset",
            spec.count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let (h, w) = (spec.height, spec.width);

    let mut classes: Vec<usize> = Vec::new();
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (event_classes, p) in spec.events() {
        acc += p;
        if draw < acc {
            classes = event_classes;
            break;
        }
    }

    let mut label = vec![0u8; h * w];
    let mut image = Tensor::<f32>::zeros(&[3, h, w]);
    let bg = class_color(0);
    for ch in 0..3 {
        for v in image.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut() {
            *v = bg[ch];
        }
    }

    // ascending class order; later shapes occlude earlier ones
    for &class in &classes {
        let kind = if rng.gen::<bool>() { ShapeKind::Rect } else { ShapeKind::Ellipse };
        let ry = rng.gen_range(1..=(h / 3).max(1));
        let rx = rng.gen_range(1..=(w / 3).max(1));
        let cy = rng.gen_range(0..h);
        let cx = rng.gen_range(0..w);
        let color = class_color(class);
        for y in cy.saturating_sub(ry)..(cy + ry + 1).min(h) {
            for x in cx.saturating_sub(rx)..(cx + rx + 1).min(w) {
                let inside = match kind {
                    ShapeKind::Rect => true,
                    ShapeKind::Ellipse => {
                        let dy = (y as f64 - cy as f64) / ry as f64;
                        let dx = (x as f64 - cx as f64) / rx as f64;
                        dy * dy + dx * dx <= 1.0
                    }
                };
                if inside {
                    label[y * w + x] = class as u8;
                    for ch in 0..3 {
                        image.data_mut()[ch * h * w + y * w + x] = color[ch];
                    }
                }
            }
        }
    }

    if spec.sigma > 0.0 {
        // Box-Muller; one fresh pair per pixel keeps the draw order simple
        for v in image.data_mut().iter_mut() {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v = (*v + (spec.sigma * z) as f32).clamp(0.0, 1.0);
        }
    }

    Ok(Sample {
        image,
        label: LabelMap::new(label, h, w)?,
        k: spec.k as u16,
    })
}

/// Bilinear resize of a `[3,h,w]` image (align-corners disabled).
pub fn resize_image(image: &Tensor<f32>, ho: usize, wo: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let ys = crate::tape::axis_lerp_table(h, ho);
    let xs = crate::tape::axis_lerp_table(w, wo);
    let mut out = Tensor::<f32>::zeros(&[3, ho, wo]);
    for ch in 0..3 {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, dy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, dx)) in xs.iter().enumerate() {
                let a = plane[y0 * w + x0] + dx as f32 * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                let b = plane[y1 * w + x0] + dx as f32 * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                out.data_mut()[ch * ho * wo + oy * wo + ox] = a + dy as f32 * (b - a);
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a label map.
pub fn resize_label(label: &LabelMap, ho: usize, wo: usize) -> LabelMap {
    let mut out = vec![0u8; ho * wo];
    for oy in 0..ho {
        let sy = (((oy as f64 + 0.5) * label.h as f64 / ho as f64) as usize).min(label.h - 1);
        for ox in 0..wo {
            let sx = (((ox as f64 + 0.5) * label.w as f64 / wo as f64) as usize).min(label.w - 1);
            out[oy * wo + ox] = label.labels[sy * label.w + sx];
        }
    }
    LabelMap { labels: out, h: ho, w: wo }
}

/// Deterministic augmentation core: scale, pad (image 0 / label ignore),
/// crop at the given offsets, optional horizontal flip.
pub fn augment_with(
    sample: &Sample,
    scale: f64,
    crop: usize,
    crop_y: usize,
    crop_x: usize,
    flip: bool,
) -> Result<Sample> {
    let nh = ((sample.label.h as f64 * scale).round() as usize).max(1);
    let nw = ((sample.label.w as f64 * scale).round() as usize).max(1);
    let image = resize_image(&sample.image, nh, nw);
    let label = resize_label(&sample.label, nh, nw);

    let (ph, pw) = (nh.max(crop), nw.max(crop));
    if crop_y + crop > ph || crop_x + crop > pw {
        return Err(IsnetError::usage(format!(
            "crop offset ({crop_y},{crop_x}) out of range for padded {ph}x{pw}"
        )));
    }
    let mut out_img = Tensor::<f32>::zeros(&[3, crop, crop]);
    let mut out_lab = vec![IGNORE; crop * crop];
    for y in 0..crop {
        let sy = crop_y + y;
        for x in 0..crop {
            let sx = crop_x + x;
            let ox = if flip { crop - 1 - x } else { x };
            if sy < nh && sx < nw {
                out_lab[y * crop + ox] = label.labels[sy * nw + sx];
                for ch in 0..3 {
                    out_img.data_mut()[ch * crop * crop + y * crop + ox] =
                        image.data()[ch * nh * nw + sy * nw + sx];
                }
            }
        }
    }
    Ok(Sample {
        image: out_img,
        label: LabelMap::new(out_lab, crop, crop)?,
        k: sample.k,
    })
}

/// Training augmentation: random scale in [0.5,2], random crop, flip with
/// probability one half.
pub fn augment_train(sample: &Sample, crop: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let scale = rng.gen_range(0.5..=2.0);
    let nh = ((sample.label.h as f64 * scale).round() as usize).max(1);
    let nw = ((sample.label.w as f64 * scale).round() as usize).max(1);
    let crop_y = rng.gen_range(0..=nh.max(crop) - crop);
    let crop_x = rng.gen_range(0..=nw.max(crop) - crop);
    let flip = rng.gen::<bool>();
    augment_with(sample, scale, crop, crop_y, crop_x, flip)
}

/// Stack samples of uniform extents into `[B,3,h,w]` plus per-sample labels.
pub fn batch(samples: &[Sample]) -> Result<(Tensor<f32>, Vec<LabelMap>)> {
    if samples.is_empty() {
        return Err(IsnetError::usage("cannot batch zero samples"));
    }
    let (h, w) = (samples[0].label.h, samples[0].label.w);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.label.h != h || s.label.w != w {
            return Err(IsnetError::dim(format!(
                "cannot batch {}x{} with {h}x{w}",
                s.label.h, s.label.w
            )));
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label.clone());
    }
    Ok((Tensor::from_vec(vec![samples.len(), 3, h, w], data)?, labels))
}

/// Inverse of `batch`.
pub fn unbatch(images: &Tensor<f32>, labels: &[LabelMap], k: u16) -> Result<Vec<Sample>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(IsnetError::dim(format!(
            "batch shape {shape:?} does not match {} label maps",
            labels.len()
        )));
    }
    let per = shape[1] * shape[2] * shape[3];
    let mut out = Vec::with_capacity(labels.len());
    for (b, label) in labels.iter().enumerate() {
        out.push(Sample {
            image: Tensor::from_vec(
                shape[1..].to_vec(),
                images.data()[b * per..(b + 1) * per].to_vec(),
            )?,
            label: label.clone(),
            k,
        });
    }
    Ok(out)
}

const ISEG_MAGIC: &[u8; 4] = b"ISEG";
const ISEG_VERSION: u8 = 1;

pub fn save_sample(path: &Path, sample: &Sample) -> Result<()> {
    let (h, w) = (sample.label.h, sample.label.w);
    let mut buf = Vec::with_capacity(15 + 13 * h * w);
    buf.extend_from_slice(ISEG_MAGIC);
    buf.push(ISEG_VERSION);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&sample.k.to_le_bytes());
    for &v in sample.image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&sample.label.labels);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct OffsetReader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> OffsetReader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len();
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(IsnetError::Format {
                offset: self.offset as u64,
                message: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    let file = std::fs::File::open(path)?;
    let mut r = OffsetReader { inner: std::io::BufReader::new(file), offset: 0 };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != ISEG_MAGIC {
        return Err(IsnetError::Format { offset: 0, message: format!("bad magic {magic:?}") });
    }
    let mut byte = [0u8; 1];
    r.take(&mut byte, "version")?;
    if byte[0] != ISEG_VERSION {
        return Err(IsnetError::Format {
            offset: 4,
            message: format!("unsupported version {}", byte[0]),
        });
    }
    let mut quad = [0u8; 4];
    r.take(&mut quad, "height")?;
    let h = u32::from_le_bytes(quad) as usize;
    r.take(&mut quad, "width")?;
    let w = u32::from_le_bytes(quad) as usize;
    let mut pair = [0u8; 2];
    r.take(&mut pair, "class count")?;
    let k = u16::from_le_bytes(pair);
    if h == 0 || w == 0 {
        return Err(IsnetError::Format {
            offset: 5,
            message: format!("degenerate extents {h}x{w}"),
        });
    }
    let mut image = Vec::with_capacity(3 * h * w);
    for _ in 0..3 * h * w {
        r.take(&mut quad, "image payload")?;
        image.push(f32::from_le_bytes(quad));
    }
    let mut labels = vec![0u8; h * w];
    r.take(&mut labels, "label payload")?;
    Ok(Sample {
        image: Tensor::from_vec(vec![3, h, w], image)?,
        label: LabelMap::new(labels, h, w)?,
        k,
    })
}

/// Index parity split: even indices train, odd validate.
pub fn split_of_index(index: usize) -> &'static str {
    if index % 2 == 0 {
        "train"
    } else {
        "val"
    }
}

pub fn sample_path(root: &Path, split: &str, index: usize) -> PathBuf {
    root.join(split).join(format!("{index:06}.iseg"))
}

/// Writes every sample under `{root}/{train|val}/{index:06}.iseg`.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root.join("train"))?;
    std::fs::create_dir_all(root.join("val"))?;
    for index in 0..spec.count {
        let sample = generate(spec, index)?;
        save_sample(&sample_path(root, split_of_index(index), index), &sample)?;
    }
    Ok(())
}

/// All samples of one split, ascending by filename.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(IsnetError::data(format!("dataset split directory {dir:?} not found")));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "iseg"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(IsnetError::data(format!("no .iseg samples under {dir:?}")));
    }
    paths.iter().map(|p| load_sample(p)).collect()
}
