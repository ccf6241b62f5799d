//! Synthetic shapes dataset, the labelled/unlabelled partition protocol, and
//! the on-disk layout:
//!
//! ```text
//! <dir>/manifest.json     spec, class count, sample ids
//! <dir>/images/<id>.f64   3×H×W little-endian f64, row-major
//! <dir>/labels/<id>.u8    H×W bytes, one class index per pixel (IGNORE = 255)
//! ```
//!
//! Unlabelled samples have no label file.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridTensor, LabelMap, IGNORE};
use crate::rng::{seeded, stream, SeededRng};

pub const IMAGE_CHANNELS: usize = 3;

/// Class 0 is background; classes 1.. are rectangle, disk, triangle.
pub const MAX_CLASSES: usize = 4;

const BACKGROUND_COLOR: [f64; 3] = [0.40, 0.40, 0.40];
const SHAPE_COLORS: [[f64; 3]; 3] = [
    [0.70, 0.40, 0.30], // rectangle
    [0.30, 0.70, 0.40], // disk
    [0.40, 0.30, 0.70], // triangle
];
/// Per-shape uniform colour jitter, per channel.
const COLOR_JITTER: f64 = 0.05;
/// Amplitude of the background's sinusoidal brightness texture.
const TEXTURE_AMPLITUDE: f64 = 0.05;
/// Per-image illumination: every pixel is scaled by 1 ± this, uniformly drawn.
const ILLUMINATION_GAIN: f64 = 0.4;
/// Per-image, per-channel additive colour cast, uniform in ± this.
const COLOR_CAST: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    /// Background plus up to three shape classes.
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_samples: 200,
            height: 32,
            width: 32,
            num_classes: 4,
            noise_sigma: 0.15,
            rng_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("dataset.num_samples must be positive"));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "dataset.num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "dataset images must be at least 8×8, got {}×{}",
                self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "dataset.noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `3×H×W` in `[0, 1]`.
    pub image: GridTensor,
    pub label: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

impl ShapeKind {
    fn for_class(class: usize) -> Self {
        match class {
            1 => ShapeKind::Rectangle,
            2 => ShapeKind::Disk,
            _ => ShapeKind::Triangle,
        }
    }
}

/// Generates `spec.num_samples` images, each holding 1–4 shapes over a
/// textured background. Later shapes occlude earlier ones in both image and
/// label; noise is added to the image only.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut master = seeded(spec.rng_seed, stream::DATASET);
    let samples = (0..spec.num_samples)
        .map(|i| {
            let sample_seed: u64 = master.gen();
            generate_sample(spec, format!("s{i:05}"), &mut seeded(sample_seed, stream::DATASET))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

fn generate_sample(spec: &DatasetSpec, id: String, rng: &mut SeededRng) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let mut image = vec![0.0; IMAGE_CHANNELS * hw];
    let mut labels = vec![0u8; hw];

    let freq_y = rng.gen_range(0.2..0.8);
    let freq_x = rng.gen_range(0.2..0.8);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let t = TEXTURE_AMPLITUDE * (freq_y * y as f64 + freq_x * x as f64 + phase).sin();
            for (c, base) in BACKGROUND_COLOR.iter().enumerate() {
                image[c * hw + y * w + x] = base + t;
            }
        }
    }

    let num_shapes = rng.gen_range(1..=4);
    for _ in 0..num_shapes {
        let class = rng.gen_range(1..spec.num_classes);
        let color: Vec<f64> = SHAPE_COLORS[class - 1]
            .iter()
            .map(|v| v + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER))
            .collect();
        let inside = shape_region(ShapeKind::for_class(class), h, w, rng);
        for (p, _) in inside.iter().enumerate().filter(|(_, &b)| b) {
            labels[p] = class as u8;
            for (c, v) in color.iter().enumerate() {
                image[c * hw + p] = *v;
            }
        }
    }

    // Lighting varies between images, so colour alone does not transfer
    // across the dataset and spatial context has to be learned.
    let gain = 1.0 + rng.gen_range(-ILLUMINATION_GAIN..=ILLUMINATION_GAIN);
    for c in 0..IMAGE_CHANNELS {
        let cast = rng.gen_range(-COLOR_CAST..=COLOR_CAST);
        for v in &mut image[c * hw..(c + 1) * hw] {
            *v = *v * gain + cast;
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
        for v in &mut image {
            *v += normal.sample(rng);
        }
    }
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(Sample {
        id,
        image: GridTensor::new(vec![IMAGE_CHANNELS, h, w], image)?,
        label: Some(LabelMap::new(h, w, labels)?),
    })
}

/// Pixel membership for one randomly placed shape.
fn shape_region(kind: ShapeKind, h: usize, w: usize, rng: &mut SeededRng) -> Vec<bool> {
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);
    let mut inside = vec![false; h * w];
    match kind {
        ShapeKind::Rectangle => {
            let rh = rng.gen_range((h / 5).max(2)..=(h / 2).max(2));
            let rw = rng.gen_range((w / 5).max(2)..=(w / 2).max(2));
            let top = rng.gen_range(0..=h - rh);
            let left = rng.gen_range(0..=w - rw);
            for y in top..top + rh {
                inside[y * w + left..y * w + left + rw].fill(true);
            }
        }
        ShapeKind::Disk => {
            let r = rng.gen_range(side / 8.0..=side / 4.0);
            let cy = rng.gen_range(r..=hf - r);
            let cx = rng.gen_range(r..=wf - r);
            for y in 0..h {
                for x in 0..w {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    inside[y * w + x] = dy * dy + dx * dx <= r * r;
                }
            }
        }
        ShapeKind::Triangle => {
            let r = rng.gen_range(side / 5.0..=side / 3.0);
            let cy = rng.gen_range(r * 0.5..=hf - r * 0.5);
            let cx = rng.gen_range(r * 0.5..=wf - r * 0.5);
            let base = rng.gen_range(0.0..std::f64::consts::TAU);
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = base + k as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.3..0.3);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    inside[y * w + x] = in_triangle((x as f64 + 0.5, y as f64 + 0.5), &verts);
                }
            }
        }
    }
    inside
}

fn in_triangle(p: (f64, f64), v: &[(f64, f64)]) -> bool {
    let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
    let neg = d.iter().any(|&x| x < 0.0);
    let pos = d.iter().any(|&x| x > 0.0);
    !(neg && pos)
}

/// Fraction of labelled pixels belonging to each class.
pub fn class_coverage(samples: &[Sample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for label in samples.iter().filter_map(|s| s.label.as_ref()) {
        for &v in label.data() {
            if (v as usize) < num_classes {
                counts[v as usize] += 1;
                total += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Labelled fraction of the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Fraction {
    Half,
    Quarter,
    Eighth,
    Sixteenth,
}

impl Fraction {
    pub const ALL: [Fraction; 4] = [
        Fraction::Half,
        Fraction::Quarter,
        Fraction::Eighth,
        Fraction::Sixteenth,
    ];

    pub fn denominator(self) -> usize {
        match self {
            Fraction::Half => 2,
            Fraction::Quarter => 4,
            Fraction::Eighth => 8,
            Fraction::Sixteenth => 16,
        }
    }

    /// `floor(n / denominator)`.
    pub fn labeled_count(self, n: usize) -> usize {
        n / self.denominator()
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.denominator())
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fraction::ALL
            .into_iter()
            .find(|f| f.to_string() == s.trim())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "fraction must be one of 1/2, 1/4, 1/8, 1/16, got '{s}'"
                ))
            })
    }
}

impl TryFrom<String> for Fraction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

/// Randomly reserves `floor(fraction·N)` samples as labelled; the rest lose
/// their labels. Both subsets keep the original sample order.
pub fn partition(samples: &[Sample], fraction: Fraction, rng_seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n_labeled = fraction.labeled_count(samples.len());
    if n_labeled == 0 {
        return Err(Error::invalid(format!(
            "fraction {fraction} of {} samples leaves no labelled data",
            samples.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::invalid(format!("sample {} has no label to partition", s.id)));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seeded(rng_seed, stream::PARTITION));
    let mut is_labeled = vec![false; samples.len()];
    for &i in &order[..n_labeled] {
        is_labeled[i] = true;
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(samples.len() - n_labeled);
    for (s, keep) in samples.iter().zip(is_labeled) {
        if keep {
            labeled.push(s.clone());
        } else {
            unlabeled.push(Sample {
                label: None,
                ..s.clone()
            });
        }
    }
    Ok((labeled, unlabeled))
}

const DATASET_FORMAT: &str = "cpcl-dataset";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    spec: DatasetSpec,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    labeled: bool,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let spec = &dataset.spec;
    for s in &dataset.samples {
        if s.image.shape() != [IMAGE_CHANNELS, spec.height, spec.width] {
            return Err(Error::invalid(format!(
                "sample {} has shape {:?}, expected {:?}",
                s.id,
                s.image.shape(),
                [IMAGE_CHANNELS, spec.height, spec.width]
            )));
        }
        let bytes: Vec<u8> = s.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = images.join(format!("{}.f64", s.id));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        if let Some(label) = &s.label {
            let path = labels.join(format!("{}.u8", s.id));
            fs::write(&path, label.data()).map_err(|e| Error::io(&path, e))?;
        }
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.to_string(),
        version: 1,
        spec: spec.clone(),
        num_classes: spec.num_classes,
        channels: IMAGE_CHANNELS,
        height: spec.height,
        width: spec.width,
        samples: dataset
            .samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                labeled: s.label.is_some(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if m.format != DATASET_FORMAT || m.version != 1 {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported dataset format {} v{}", m.format, m.version),
        ));
    }
    if m.channels != IMAGE_CHANNELS
        || m.num_classes != m.spec.num_classes
        || (m.height, m.width) != (m.spec.height, m.spec.width)
        || !(2..=u8::MAX as usize).contains(&m.num_classes)
    {
        return Err(Error::format(&manifest_path, "manifest header is inconsistent"));
    }
    let (h, w) = (m.height, m.width);
    let mut samples = Vec::with_capacity(m.samples.len());
    for entry in &m.samples {
        let image_path = dir.join("images").join(format!("{}.f64", entry.id));
        let bytes = fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
        let expected = 8 * IMAGE_CHANNELS * h * w;
        if bytes.len() != expected {
            return Err(Error::format(
                &image_path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let image = GridTensor::new(vec![IMAGE_CHANNELS, h, w], values)
            .map_err(|e| Error::format(&image_path, e.to_string()))?;

        let label = if entry.labeled {
            let label_path = dir.join("labels").join(format!("{}.u8", entry.id));
            let bytes = fs::read(&label_path).map_err(|e| Error::io(&label_path, e))?;
            if bytes.len() != h * w {
                return Err(Error::format(
                    &label_path,
                    format!("expected {} bytes, found {}", h * w, bytes.len()),
                ));
            }
            if let Some(&bad) = bytes.iter().find(|&&v| v == IGNORE || v as usize >= m.num_classes) {
                return Err(Error::format(
                    &label_path,
                    format!(
                        "label value {bad} is not a class of the declared {} classes",
                        m.num_classes
                    ),
                ));
            }
            Some(LabelMap::new(h, w, bytes).map_err(|e| Error::format(&label_path, e.to_string()))?)
        } else {
            None
        };
        samples.push(Sample {
            id: entry.id.clone(),
            image,
            label,
        });
    }
    Ok(Dataset { spec: m.spec, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_samples: 12,
            height: 16,
            width: 16,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetSpec {
            rng_seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn images_in_unit_range_and_labels_total() {
        let d = generate_dataset(&small_spec()).unwrap();
        for s in &d.samples {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let l = s.label.as_ref().unwrap();
            assert!(!l.has_ignore());
            l.check_classes(4).unwrap();
        }
    }

    fn clean_spec(num_samples: usize) -> DatasetSpec {
        DatasetSpec {
            num_samples,
            noise_sigma: 0.0,
            ..small_spec()
        }
    }

    #[test]
    fn noiseless_shapes_have_constant_colour() {
        let d = generate_dataset(&clean_spec(40)).unwrap();
        let hw = 256;
        for s in &d.samples {
            let label = s.label.as_ref().unwrap();
            for class in 1..4u8 {
                let mut colours: Vec<[u64; 3]> = (0..hw)
                    .filter(|&p| label.data()[p] == class)
                    .map(|p| std::array::from_fn(|c| s.image.data()[c * hw + p].to_bits()))
                    .collect();
                colours.sort_unstable();
                colours.dedup();
                // One colour per shape of this class; at most four shapes.
                assert!(colours.len() <= 4, "{} colours for class {class}", colours.len());
            }
        }
    }

    #[test]
    fn noiseless_pixels_are_nearest_mean_separable_per_image() {
        let d = generate_dataset(&clean_spec(300)).unwrap();
        let hw = 256;
        for s in &d.samples {
            let label = s.label.as_ref().unwrap();
            let pixel = |p: usize| -> [f64; 3] { std::array::from_fn(|c| s.image.data()[c * hw + p]) };
            let mut sums = [[0.0; 3]; 4];
            let mut counts = [0usize; 4];
            for p in 0..hw {
                let k = label.data()[p] as usize;
                counts[k] += 1;
                for c in 0..3 {
                    sums[k][c] += pixel(p)[c];
                }
            }
            let means: Vec<(usize, [f64; 3])> = (0..4)
                .filter(|&k| counts[k] > 0)
                .map(|k| (k, std::array::from_fn(|c| sums[k][c] / counts[k] as f64)))
                .collect();
            for p in 0..hw {
                let x = pixel(p);
                let dist = |m: &[f64; 3]| (0..3).map(|c| (x[c] - m[c]).powi(2)).sum::<f64>();
                let nearest = means
                    .iter()
                    .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
                    .unwrap()
                    .0;
                assert_eq!(nearest, label.data()[p] as usize, "sample {} pixel {p}", s.id);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        for bad in [
            DatasetSpec { num_classes: 1, ..small_spec() },
            DatasetSpec { num_classes: 5, ..small_spec() },
            DatasetSpec { num_samples: 0, ..small_spec() },
            DatasetSpec { height: 4, ..small_spec() },
            DatasetSpec { noise_sigma: -0.1, ..small_spec() },
        ] {
            assert!(generate_dataset(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!("1/8".parse::<Fraction>().unwrap(), Fraction::Eighth);
        assert_eq!(Fraction::Sixteenth.to_string(), "1/16");
        assert!("1/3".parse::<Fraction>().is_err());
        assert!("eighth".parse::<Fraction>().is_err());
    }

    #[test]
    fn partition_counts_and_errors() {
        let d = generate_dataset(&DatasetSpec {
            num_samples: 20,
            height: 8,
            width: 8,
            ..DatasetSpec::default()
        })
        .unwrap();
        let (l, u) = partition(&d.samples, Fraction::Quarter, 3).unwrap();
        assert_eq!((l.len(), u.len()), (5, 15));
        assert!(u.iter().all(|s| s.label.is_none()));
        assert!(partition(&d.samples[..10], Fraction::Sixteenth, 3).is_err());
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = generate_dataset(&small_spec()).unwrap();
        d.samples[3].label = None;
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);

        let blob = dir.path().join("images").join("s00002.f64");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..100]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("s00002.f64"));
    }

    #[test]
    fn class_count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&small_spec()).unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m["num_classes"] = 2.into();
        m["spec"]["num_classes"] = 2.into();
        fs::write(&path, m.to_string()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains(".u8"));
    }
}
