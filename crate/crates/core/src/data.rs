//! Synthetic shape scenes whose object count is the class label, plus PNG
//! ingestion and export.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::Resolution;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, tag};

/// Minimum gap between objects, in base-resolution pixels.
pub const MARGIN_PX: f64 = 2.0;
/// Minimum gap to the image border, in base-resolution pixels.
pub const BORDER_PX: f64 = 1.0;
/// Triangle circumradius per unit size, so its area is comparable to a disk's.
const TRIANGLE_SCALE: f64 = 4.0 / 3.0;
/// Supersampling grid per pixel axis.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    /// Radius of the circumscribed circle relative to `size`.
    fn circumradius(self, size: f64) -> f64 {
        match self {
            ShapeKind::Disk => size,
            ShapeKind::Square => size * std::f64::consts::SQRT_2,
            ShapeKind::Triangle => size * TRIANGLE_SCALE,
        }
    }

    /// Point-in-shape test in coordinates relative to the center.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= size * size,
            ShapeKind::Square => dx.abs() <= size && dy.abs() <= size,
            ShapeKind::Triangle => {
                // upright equilateral triangle with circumradius `r`
                let r = size * TRIANGLE_SCALE;
                dy <= r / 2.0 && dy >= -r + 3f64.sqrt() * dx.abs()
            }
        }
    }
}

/// One object in unit coordinates: `(0, 0)` is the top-left corner,
/// `(1, 1)` the bottom-right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Disk radius, square half-side, or 3/4 of the triangle circumradius.
    pub size: f64,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Resolution at which the pixel margin is enforced.
    pub base_resolution: usize,
    pub background: [f32; 3],
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn empty(base_resolution: usize, background: [f32; 3]) -> Self {
        Self {
            base_resolution,
            background,
            objects: Vec::new(),
        }
    }

    pub fn label(&self) -> usize {
        self.objects.len()
    }

    fn margin(&self) -> f64 {
        MARGIN_PX / self.base_resolution as f64
    }

    fn border(&self) -> f64 {
        BORDER_PX / self.base_resolution as f64
    }

    /// Bounding circles stay `MARGIN_PX` apart and `BORDER_PX` inside the frame.
    pub fn validate(&self) -> Result<()> {
        if self.base_resolution == 0 {
            return Err(Error::invalid("scene base resolution must be positive"));
        }
        let (m, b) = (self.margin(), self.border());
        for (i, o) in self.objects.iter().enumerate() {
            let r = o.kind.circumradius(o.size);
            if o.size <= 0.0 || o.cx - r < b || o.cy - r < b || o.cx + r > 1.0 - b || o.cy + r > 1.0 - b {
                return Err(Error::invalid(format!("object {i} violates the {BORDER_PX}px border margin")));
            }
            for (j, p) in self.objects.iter().enumerate().take(i) {
                let d = ((o.cx - p.cx).powi(2) + (o.cy - p.cy).powi(2)).sqrt();
                if d < r + p.kind.circumradius(p.size) + m {
                    return Err(Error::invalid(format!(
                        "objects {j} and {i} overlap or are closer than {MARGIN_PX}px"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Content hash of the serialized spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Anti-aliased render to a `[1, 3, res.h, res.w]` tensor in `[-1, 1]`.
pub fn render(spec: &SceneSpec, res: Resolution) -> Result<Tensor<f32>> {
    if res.h < 8 || res.w < 8 {
        return Err(Error::invalid(format!("render resolution {res} is below 8")));
    }
    spec.validate()?;
    let (h, w) = (res.h, res.w);
    let mut out = vec![0f32; 3 * h * w];
    let ss = SUPERSAMPLE as f64;
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x as f64 + (sx as f64 + 0.5) / ss) / w as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / ss) / h as f64;
                    let color = spec
                        .objects
                        .iter()
                        .find(|o| o.kind.contains(u - o.cx, v - o.cy, o.size))
                        .map_or(spec.background, |o| o.color);
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for c in 0..3 {
                out[c * h * w + y * w + x] = acc[c] * inv;
            }
        }
    }
    Tensor::new(&[1, 3, h, w], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object size range in unit coordinates.
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 4,
            min_size: 0.10,
            max_size: 0.14,
        }
    }
}

fn object_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    let mut c = [0f32; 3];
    for v in &mut c {
        *v = rng.gen_range(-0.2..1.0);
    }
    let bright = rng.gen_range(0..3);
    c[bright] = rng.gen_range(0.6..1.0);
    c
}

const MAX_SCENE_ATTEMPTS: usize = 1000;

/// Random non-overlapping scene; placement is retried until it fits.
pub fn random_scene<R: Rng + ?Sized>(cfg: &SceneConfig, base_resolution: usize, rng: &mut R) -> Result<SceneSpec> {
    let k = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut background = [0f32; 3];
    for v in &mut background {
        *v = rng.gen_range(-1.0..-0.6);
    }
    'scene: for _ in 0..MAX_SCENE_ATTEMPTS {
        let mut spec = SceneSpec::empty(base_resolution, background);
        for _ in 0..k {
            let mut placed = false;
            for _ in 0..200 {
                let kind = ShapeKind::ALL[rng.gen_range(0..3)];
                let size = rng.gen_range(cfg.min_size..=cfg.max_size);
                let r = kind.circumradius(size) + spec.border();
                if r >= 0.5 {
                    continue;
                }
                spec.objects.push(SceneObject {
                    kind,
                    cx: rng.gen_range(r..1.0 - r),
                    cy: rng.gen_range(r..1.0 - r),
                    size,
                    color: object_color(rng),
                });
                if spec.validate().is_ok() {
                    placed = true;
                    break;
                }
                spec.objects.pop();
            }
            if !placed {
                continue 'scene;
            }
        }
        return Ok(spec);
    }
    Err(Error::Config {
        field: "data.scene".into(),
        reason: format!("cannot place {k} objects at base resolution {base_resolution} in {MAX_SCENE_ATTEMPTS} attempts"),
    })
}

/// Images `[N, C, H, W]` in `[-1, 1]` with one label per image.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> Resolution {
        let s = self.images.shape();
        Resolution { h: s[2], w: s[3] }
    }

    pub fn subset(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let items = (0..n).map(|i| self.images.batch_item(i)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images: Tensor::stack_batch(&items)?,
            labels: self.labels[..n].to_vec(),
        })
    }
}

fn render_all(specs: &[&SceneSpec], res: Resolution) -> Result<Tensor<f32>> {
    use rayon::prelude::*;
    let items = specs.par_iter().map(|s| render(s, res)).collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub base: Resolution,
    pub target: Resolution,
    pub scene: SceneConfig,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub specs: Vec<SceneSpec>,
    /// Relative PNG paths per sample: `[base, target]`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub images: BTreeMap<usize, [String; 2]>,
}

/// A corpus with every sample rendered at both resolutions.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub train_base: Dataset,
    pub train_target: Dataset,
    pub eval_base: Dataset,
    pub eval_target: Dataset,
}

/// Deterministic scene list for `seed`; sample `i` depends only on
/// `(seed, i)`.
pub fn corpus_specs(seed: u64, n: usize, base: usize, cfg: &SceneConfig) -> Result<Vec<SceneSpec>> {
    let mut seen = HashSet::new();
    let mut specs = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut salt = 0u64;
        loop {
            let spec = random_scene(cfg, base, &mut stream(seed, &[tag::CORPUS, i, salt]))?;
            if seen.insert(spec.hash()) {
                specs.push(spec);
                break;
            }
            salt += 1;
            if salt as usize >= MAX_SCENE_ATTEMPTS {
                return Err(Error::Config {
                    field: "data.scene".into(),
                    reason: format!("fewer than {n} distinct scenes at base resolution {base}"),
                });
            }
        }
    }
    Ok(specs)
}

pub fn make_corpus(seed: u64, n_train: usize, n_eval: usize, base: Resolution, target: Resolution, scene: &SceneConfig) -> Result<Corpus> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::invalid("corpus needs n_train >= 1 and n_eval >= 1"));
    }
    if scene.min_objects == 0 || scene.min_objects > scene.max_objects || scene.min_size <= 0.0 || scene.min_size > scene.max_size {
        return Err(Error::Config {
            field: "data.scene".into(),
            reason: format!("invalid scene ranges {scene:?}"),
        });
    }
    let specs = corpus_specs(seed, n_train + n_eval, base.h.min(base.w), scene)?;
    let train: Vec<usize> = (0..n_train).collect();
    let eval: Vec<usize> = (n_train..n_train + n_eval).collect();
    let split = |idx: &[usize], res| -> Result<Dataset> {
        let s: Vec<&SceneSpec> = idx.iter().map(|&i| &specs[i]).collect();
        Ok(Dataset {
            images: render_all(&s, res)?,
            labels: s.iter().map(|s| s.label()).collect(),
        })
    };
    let corpus = Corpus {
        train_base: split(&train, base)?,
        train_target: split(&train, target)?,
        eval_base: split(&eval, base)?,
        eval_target: split(&eval, target)?,
        manifest: CorpusManifest {
            seed,
            base,
            target,
            scene: scene.clone(),
            train,
            eval,
            specs,
            images: BTreeMap::new(),
        },
    };
    Ok(corpus)
}

impl Corpus {
    /// Write `manifest.json` and content-addressed PNGs under `dir/images`.
    pub fn export(&mut self, dir: &Path) -> Result<PathBuf> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut images = BTreeMap::new();
        let splits = [
            (&self.manifest.train, &self.train_base, &self.train_target),
            (&self.manifest.eval, &self.eval_base, &self.eval_target),
        ];
        for (idx, lo, hi) in splits {
            for (j, &i) in idx.iter().enumerate() {
                let mut names = [String::new(), String::new()];
                for (slot, set) in [lo, hi].into_iter().enumerate() {
                    let bytes = png_bytes(&set.images.batch_item(j)?)?;
                    let name = format!("images/{}.png", hex::encode(Sha256::digest(&bytes)));
                    let path = dir.join(&name);
                    if !path.exists() {
                        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                    }
                    names[slot] = name;
                }
                images.insert(i, names);
            }
        }
        self.manifest.images = images;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `[-1, 1]` to 8-bit with round-half-even.
pub fn quantize(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round_ties_even() as u8
}

/// Encode a `[1, C, H, W]` or `[C, H, W]` image (C = 1 or 3) as PNG.
pub fn png_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    png_bytes_tagged(image, &[])
}

/// As [`png_bytes`], with `tEXt` chunks for each `(keyword, text)`.
pub fn png_bytes_tagged(image: &Tensor<f32>, text: &[(&str, &str)]) -> Result<Vec<u8>> {
    let s = image.shape();
    let (c, h, w) = match s {
        [1, c, h, w] | [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::invalid(format!("cannot encode tensor of shape {s:?} as PNG"))),
    };
    let d = image.data();
    let plane = h * w;
    let (color, pixels) = match c {
        1 => (png::ColorType::Grayscale, d.iter().map(|&v| quantize(v)).collect::<Vec<u8>>()),
        3 => (
            png::ColorType::Rgb,
            (0..plane).flat_map(|p| (0..3).map(move |ch| quantize(d[ch * plane + p]))).collect(),
        ),
        _ => return Err(Error::invalid(format!("PNG export supports 1 or 3 channels, got {c}"))),
    };
    let encode_err = |e: png::EncodingError| Error::Image {
        path: "<memory>".into(),
        reason: e.to_string(),
    };
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(Cursor::new(&mut out), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(encode_err)?;
    }
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&pixels).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(out)
}

pub fn write_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = png_bytes(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Box-filter resample of one `h x w` plane to `oh x ow`, weighting each
/// source pixel by its fractional overlap with the target footprint.
pub fn area_resample(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let weights = |n: usize, on: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n as f64 / on as f64;
        (0..on)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let (wy, wx) = (weights(h, oh), weights(w, ow));
    let mut out = vec![0f32; oh * ow];
    for (oy, ty) in wy.iter().enumerate() {
        for (ox, tx) in wx.iter().enumerate() {
            let mut acc = 0f64;
            for &(y, a) in ty {
                for &(x, b) in tx {
                    acc += a * b * src[y * w + x] as f64;
                }
            }
            out[oy * ow + ox] = acc as f32;
        }
    }
    out
}

/// Decode, center-crop to a square, area-resample to `res`, scale to
/// `[-1, 1]`. Output is `[1, 3, res.h, res.w]`.
pub fn load_png(path: &Path, res: Resolution) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let mut out = Vec::with_capacity(3 * res.h * res.w);
    for c in 0..3 {
        let plane: Vec<f32> = (0..side * side)
            .map(|p| img.get_pixel((x0 + p % side) as u32, (y0 + p / side) as u32)[c] as f32 / 255.0 * 2.0 - 1.0)
            .collect();
        out.extend(area_resample(&plane, side, side, res.h, res.w));
    }
    Tensor::new(&[1, 3, res.h, res.w], out)
}

/// Every readable `*.png` in `dir` (sorted by name); unreadable files are
/// skipped with a warning. Labels are all zero.
pub fn ingest_png(dir: &Path, res: Resolution) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut items = Vec::new();
    for p in &paths {
        match load_png(p, res) {
            Ok(t) => items.push(t),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if items.is_empty() {
        return Err(Error::invalid(format!("no readable PNG images in {}", dir.display())));
    }
    Ok(Dataset {
        labels: vec![0; items.len()],
        images: Tensor::stack_batch(&items)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(cx: f64, cy: f64, size: f64) -> SceneObject {
        SceneObject {
            kind: ShapeKind::Disk,
            cx,
            cy,
            size,
            color: [1.0, 1.0, 1.0],
        }
    }

    #[test]
    fn empty_scene_is_uniform_background() {
        let img = render(&SceneSpec::empty(16, [-0.5, 0.1, 0.3]), Resolution::square(16)).unwrap();
        for c in 0..3 {
            let want = [-0.5, 0.1, 0.3][c];
            assert!(img.data()[c * 256..(c + 1) * 256].iter().all(|&v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn disk_area_matches_analytic_fraction() {
        let mut spec = SceneSpec::empty(32, [-1.0; 3]);
        spec.objects.push(disk(0.5, 0.5, 0.25));
        let img = render(&spec, Resolution::square(64)).unwrap();
        let inside = img.data()[..64 * 64].iter().filter(|&&v| v > 0.0).count() as f64 / 4096.0;
        let want = std::f64::consts::PI * 0.0625;
        assert!((inside - want).abs() / want < 0.02, "{inside} vs {want}");
    }

    #[test]
    fn cross_resolution_renders_agree() {
        let spec = random_scene(&SceneConfig::default(), 32, &mut stream(3, &[])).unwrap();
        let lo = render(&spec, Resolution::square(32)).unwrap();
        let hi = render(&spec, Resolution::square(64)).unwrap();
        let up = crate::numerics::bilinear_upsample(&lo, 2).unwrap();
        let mad = up.sub(&hi).unwrap().map(f32::abs).mean();
        assert!(mad < 0.1, "{mad}");
    }

    #[test]
    fn overlap_is_rejected() {
        let mut spec = SceneSpec::empty(32, [-1.0; 3]);
        spec.objects.push(disk(0.3, 0.3, 0.1));
        spec.objects.push(disk(0.45, 0.3, 0.1));
        assert!(render(&spec, Resolution::square(32)).is_err());
        let mut spec = SceneSpec::empty(32, [-1.0; 3]);
        spec.objects.push(disk(0.12, 0.5, 0.1));
        assert!(spec.validate().is_err());
    }

    #[test]
    fn infeasible_scenes_are_a_config_error() {
        let cfg = SceneConfig {
            min_objects: 4,
            max_objects: 4,
            ..SceneConfig::default()
        };
        let err = random_scene(&cfg, 4, &mut stream(5, &[])).unwrap_err();
        assert!(err.to_string().contains("data.scene"), "{err}");
    }

    #[test]
    fn corpus_is_deterministic_and_split() {
        let cfg = SceneConfig {
            max_objects: 2,
            ..Default::default()
        };
        let a = make_corpus(7, 20, 10, Resolution::square(8), Resolution::square(16), &cfg).unwrap();
        let b = make_corpus(7, 20, 10, Resolution::square(8), Resolution::square(16), &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.manifest).unwrap(),
            serde_json::to_string(&b.manifest).unwrap()
        );
        assert_eq!(a.train_target.images, b.train_target.images);
        let train: HashSet<String> = a.manifest.train.iter().map(|&i| a.manifest.specs[i].hash()).collect();
        assert!(a.manifest.eval.iter().all(|&i| !train.contains(&a.manifest.specs[i].hash())));
        assert_eq!(a.eval_base.images.shape(), &[10, 3, 8, 8]);
        assert_eq!(a.train_target.labels.len(), 20);
        assert!(make_corpus(7, 0, 10, Resolution::square(8), Resolution::square(16), &cfg).is_err());
    }

    #[test]
    fn label_histogram_is_uniform() {
        let specs = corpus_specs(11, 10_000, 32, &SceneConfig::default()).unwrap();
        let mut hist = [0usize; 5];
        for s in &specs {
            hist[s.label()] += 1;
        }
        assert_eq!(hist[0], 0);
        for &n in &hist[1..] {
            assert!((n as f64 - 2500.0).abs() / 2500.0 < 0.05, "{hist:?}");
        }
    }

    #[test]
    fn quantization_is_round_half_even() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        // (x + 1) / 2 * 255 = 127.5 exactly -> 128; 0.5 -> 0
        assert_eq!(quantize(0.0), 128);
        assert_eq!(quantize(1.0 / 255.0 - 1.0), 0);
    }

    #[test]
    fn area_resample_preserves_mean_and_identity() {
        let src: Vec<f32> = (0..36).map(|i| i as f32).collect();
        assert_eq!(area_resample(&src, 6, 6, 6, 6), src);
        let half = area_resample(&src, 6, 6, 3, 3);
        assert!((half[0] - (0.0 + 1.0 + 6.0 + 7.0) / 4.0).abs() < 1e-5);
        let odd = area_resample(&src, 6, 6, 4, 4);
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
        assert!((mean(&odd) - mean(&src)).abs() < 1e-4);
    }

    #[test]
    fn png_ingest_laws() {
        let dir = tempfile::tempdir().unwrap();
        let white = image::RgbImage::from_pixel(20, 20, image::Rgb([255, 255, 255]));
        white.save(dir.path().join("a_white.png")).unwrap();
        let mut wide = image::RgbImage::from_pixel(100, 60, image::Rgb([0, 0, 0]));
        for y in 0..60 {
            for x in 20..80 {
                wide.put_pixel(x, y, image::Rgb([255, 255, 255]));
            }
        }
        wide.save(dir.path().join("b_wide.png")).unwrap();
        fs::write(dir.path().join("c_broken.png"), b"not a png").unwrap();
        let spec = random_scene(&SceneConfig::default(), 16, &mut stream(4, &[])).unwrap();
        let scene = render(&spec, Resolution::square(16)).unwrap();
        write_png(&dir.path().join("d_scene.png"), &scene).unwrap();

        let ds = ingest_png(dir.path(), Resolution::square(16)).unwrap();
        assert_eq!(ds.len(), 3);
        let item = |i| ds.images.batch_item(i).unwrap();
        assert!(item(0).data().iter().all(|&v| v == 1.0));
        // the centered 60x60 crop of the wide image is entirely white
        assert!(item(1).data().iter().all(|&v| v == 1.0));
        assert!(item(2).max_abs_diff(&scene).unwrap() <= 1.0 / 255.0 + 1e-6);

        let empty = tempfile::tempdir().unwrap();
        assert!(ingest_png(empty.path(), Resolution::square(16)).is_err());
    }

    #[test]
    fn tagged_png_keeps_pixels_and_text() {
        let img = Tensor::from_fn(&[1, 3, 4, 5], |i| (i as f32 / 30.0) - 1.0);
        let bytes = png_bytes_tagged(&img, &[("config_hash", "abc")]).unwrap();
        let decoder = png::Decoder::new(Cursor::new(&bytes));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!(info.uncompressed_latin1_text[0].text, "abc");
        let plain = image::load_from_memory(&png_bytes(&img).unwrap()).unwrap().to_rgb8();
        let tagged = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(plain.as_raw(), tagged.as_raw());
        assert_eq!(plain.get_pixel(1, 0)[0], quantize(img.data()[1]));
    }

    #[test]
    fn export_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = make_corpus(
            3,
            4,
            2,
            Resolution::square(8),
            Resolution::square(16),
            &SceneConfig {
                max_objects: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let manifest = c.export(dir.path()).unwrap();
        let back: CorpusManifest = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
        assert_eq!(back.images.len(), 6);
        for [lo, hi] in back.images.values() {
            let bytes = fs::read(dir.path().join(hi)).unwrap();
            assert!(hi.contains(&hex::encode(Sha256::digest(&bytes))));
            assert!(dir.path().join(lo).exists());
        }
    }
}
