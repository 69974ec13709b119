//! Occlusion sensitivity: slide a patch over the model's image, replace it
//! with a baseline and record the drop in the target class probability.

use std::fs;
use std::io::Write;
use std::path::Path;

use adbench_tensor::nn::Mode;
use serde::{Deserialize, Serialize};

use crate::data::{batch_inputs, full_planes, AxialStack};
use crate::error::{Error, IoContext, Result};
use crate::metrics::argmax;
use crate::models::Model;
use crate::volume::{Montage, MONTAGE_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Zero,
    /// Mean over every pixel of the image being explained.
    ImageMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Predicted,
    Class(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
    pub baseline: Baseline,
    pub target: Target,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig { patch: 16, stride: 8, baseline: Baseline::Zero, target: Target::Predicted }
    }
}

/// `planes` images of `height × width`, plane-major. A patch covers the same
/// window in every plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(planes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != planes * height * width || data.is_empty() {
            return Err(Error::Invalid(format!("image of {planes}x{height}x{width} needs {} values, got {}", planes * height * width, data.len())));
        }
        Ok(Image { planes, height, width, data })
    }

    fn fill(&mut self, y0: usize, x0: usize, patch: usize, v: f32) {
        let plane = self.height * self.width;
        for p in 0..self.planes {
            for y in y0..(y0 + patch).min(self.height) {
                let row = p * plane + y * self.width;
                self.data[row + x0..row + (x0 + patch).min(self.width)].fill(v);
            }
        }
    }
}

pub trait Classifier {
    fn mode(&self) -> Mode;
    /// Class probabilities per image.
    fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub height: usize,
    pub width: usize,
    pub target: usize,
    pub base_probability: f64,
    /// Probability drop per patch position, row-major over the patch grid.
    pub grid: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Mean drop over the patches covering each pixel; 0 where none do.
    pub pixels: Vec<f64>,
}

fn positions(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..=len - patch).step_by(stride).collect()
}

pub fn occlusion_map(clf: &impl Classifier, image: &Image, cfg: &OcclusionConfig) -> Result<RelevanceMap> {
    if clf.mode() != Mode::Eval {
        return Err(Error::Config("occlusion needs a classifier in eval mode".into()));
    }
    if cfg.patch == 0 || cfg.stride == 0 {
        return Err(Error::Config("patch and stride must be positive".into()));
    }
    if cfg.patch > image.height || cfg.patch > image.width {
        return Err(Error::Config(format!("patch {} exceeds image {}x{}", cfg.patch, image.height, image.width)));
    }
    let base = clf.predict(std::slice::from_ref(image))?.pop().ok_or_else(|| Error::Invalid("classifier returned no rows".into()))?;
    let target = match cfg.target {
        Target::Predicted => argmax(&base),
        Target::Class(c) if c < base.len() => c,
        Target::Class(c) => return Err(Error::LabelSpace(format!("target class {c} but the classifier has {} classes", base.len()))),
    };
    let fill = match cfg.baseline {
        Baseline::Zero => 0.0,
        Baseline::ImageMean => (image.data.iter().map(|v| *v as f64).sum::<f64>() / image.data.len() as f64) as f32,
    };
    let ys = positions(image.height, cfg.patch, cfg.stride);
    let xs = positions(image.width, cfg.patch, cfg.stride);
    let spots: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let mut grid = Vec::with_capacity(spots.len());
    for chunk in spots.chunks(16) {
        let batch: Vec<Image> = chunk
            .iter()
            .map(|&(y, x)| {
                let mut im = image.clone();
                im.fill(y, x, cfg.patch, fill);
                im
            })
            .collect();
        grid.extend(clf.predict(&batch)?.iter().map(|p| base[target] - p[target]));
    }
    let (h, w) = (image.height, image.width);
    let mut sum = vec![0.0; h * w];
    let mut hits = vec![0u32; h * w];
    for (&(y0, x0), &r) in spots.iter().zip(&grid) {
        for y in y0..y0 + cfg.patch {
            for x in x0..x0 + cfg.patch {
                sum[y * w + x] += r;
                hits[y * w + x] += 1;
            }
        }
    }
    let pixels = sum.iter().zip(&hits).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    Ok(RelevanceMap {
        height: h,
        width: w,
        target,
        base_probability: base[target],
        grid,
        grid_rows: ys.len(),
        grid_cols: xs.len(),
        pixels,
    })
}

/// Writes `<stem>.csv` (one row per image row) and `<stem>.pgm`, an 8-bit
/// binary greyscale rendering min-max scaled; a constant map renders black.
pub fn export_heatmap(map: &RelevanceMap, stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let csv_path = stem.with_extension("csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
    for row in map.pixels.chunks(map.width) {
        w.write_record(row.iter().map(|v| format!("{v:.6e}")))?;
    }
    w.flush().at(&csv_path)?;

    let (lo, hi) = map.pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let bytes: Vec<u8> = map
        .pixels
        .iter()
        .map(|v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
        .collect();
    let pgm = stem.with_extension("pgm");
    let mut f = fs::File::create(&pgm).at(&pgm)?;
    write!(f, "P5\n{} {}\n255\n", map.width, map.height).at(&pgm)?;
    f.write_all(&bytes).at(&pgm)
}

/// A trained model seen through the occlusion image layout: the 4×4 montage
/// for 16-slice models, or the stack of axial planes in full-plane mode.
pub struct ModelClassifier<'a> {
    pub model: &'a Model,
    pub mode: Mode,
}

impl<'a> ModelClassifier<'a> {
    pub fn new(model: &'a Model) -> Self {
        ModelClassifier { model, mode: Mode::Eval }
    }

    pub fn image(&self, stack: &AxialStack) -> Result<Image> {
        if full_planes(self.model.config()) {
            Image::new(stack.k, stack.side, stack.side, stack.data.clone())
        } else {
            let m = stack.montage()?;
            Image::new(1, m.height(), m.width(), m.pixels)
        }
    }

    fn stack(&self, im: &Image) -> Result<AxialStack> {
        if full_planes(self.model.config()) {
            Ok(AxialStack { k: im.planes, side: im.width, data: im.data.clone() })
        } else {
            let cell = im.width / MONTAGE_SIDE;
            AxialStack::from_montage(&Montage { cell_height: cell, cell_width: cell, pixels: im.data.clone() })
        }
    }
}

impl Classifier for ModelClassifier<'_> {
    fn mode(&self) -> Mode {
        self.mode
    }

    fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let stacks = images.iter().map(|im| self.stack(im)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&AxialStack> = stacks.iter().collect();
        self.model.predict(&batch_inputs(self.model.config(), &refs)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Probability of class 1 grows with the mean of a fixed window.
    struct Window {
        y: std::ops::Range<usize>,
        x: std::ops::Range<usize>,
        mode: Mode,
    }

    impl Classifier for Window {
        fn mode(&self) -> Mode {
            self.mode
        }
        fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
            Ok(images
                .iter()
                .map(|im| {
                    let mut s = 0.0;
                    for y in self.y.clone() {
                        for x in self.x.clone() {
                            s += im.data[y * im.width + x] as f64;
                        }
                    }
                    let p = 1.0 / (1.0 + (-s / 10.0).exp());
                    vec![1.0 - p, p]
                })
                .collect())
        }
    }

    fn ones(h: usize, w: usize) -> Image {
        Image::new(1, h, w, vec![1.0; h * w]).unwrap()
    }

    #[test]
    fn relevance_lands_on_the_window() {
        let clf = Window { y: 8..12, x: 20..24, mode: Mode::Eval };
        let cfg = OcclusionConfig { patch: 4, stride: 4, ..Default::default() };
        let map = occlusion_map(&clf, &ones(32, 32), &cfg).unwrap();
        assert_eq!(map.target, 1);
        assert_eq!((map.grid_rows, map.grid_cols), (8, 8));
        let best = map.grid.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 2 * 8 + 5);
        assert_eq!(map.grid.iter().filter(|r| r.abs() > 0.0).count(), 1);
        assert!(map.pixels[9 * 32 + 21] > 0.0 && map.pixels[0] == 0.0);
    }

    #[test]
    fn uncovered_pixels_are_zero_and_overlaps_average() {
        let clf = Window { y: 0..2, x: 0..2, mode: Mode::Eval };
        let cfg = OcclusionConfig { patch: 4, stride: 3, ..Default::default() };
        let map = occlusion_map(&clf, &ones(9, 9), &cfg).unwrap();
        // Positions 0 and 3 along each axis; the last column is never covered.
        assert_eq!((map.grid_rows, map.grid_cols), (2, 2));
        assert_eq!(map.pixels[8], 0.0);
        assert!((map.pixels[3] - map.grid[0] / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mean_baseline_of_constant_image_changes_nothing() {
        let clf = Window { y: 0..4, x: 0..4, mode: Mode::Eval };
        let cfg = OcclusionConfig { patch: 4, stride: 4, baseline: Baseline::ImageMean, target: Target::Class(0) };
        let map = occlusion_map(&clf, &ones(8, 8), &cfg).unwrap();
        assert_eq!(map.target, 0);
        assert!(map.pixels.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn refuses_train_mode_and_bad_targets() {
        let cfg = OcclusionConfig { patch: 2, stride: 2, ..Default::default() };
        let train = Window { y: 0..1, x: 0..1, mode: Mode::Train };
        assert!(occlusion_map(&train, &ones(4, 4), &cfg).is_err());
        let eval = Window { mode: Mode::Eval, ..train };
        let bad = OcclusionConfig { target: Target::Class(5), ..cfg };
        assert!(matches!(occlusion_map(&eval, &ones(4, 4), &bad), Err(Error::LabelSpace(_))));
        let big = OcclusionConfig { patch: 5, ..cfg };
        assert!(occlusion_map(&eval, &ones(4, 4), &big).is_err());
    }

    #[test]
    fn heatmap_files() {
        let dir = tempfile::tempdir().unwrap();
        let clf = Window { y: 0..2, x: 0..2, mode: Mode::Eval };
        let cfg = OcclusionConfig { patch: 2, stride: 2, ..Default::default() };
        let map = occlusion_map(&clf, &ones(4, 6), &cfg).unwrap();
        let stem = dir.path().join("out/map");
        export_heatmap(&map, &stem).unwrap();
        let pgm = fs::read(stem.with_extension("pgm")).unwrap();
        let header = b"P5\n6 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 24);
        assert_eq!(pgm[header.len()], 255);
        let csv = fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 6);

        let flat = RelevanceMap { pixels: vec![0.3; 24], ..map };
        export_heatmap(&flat, &stem).unwrap();
        assert!(fs::read(stem.with_extension("pgm")).unwrap()[header.len()..].iter().all(|b| *b == 0));
    }
}
