//! Proxy metrics: random-feature Fréchet and kernel distances, patch
//! variants, base/target consistency, and an object counter.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{avg_pool, conv2d, Tensor};
use crate::rng::{stream, tag};

/// Feature matrix, one row per sample.
pub type Features = DMatrix<f64>;

pub const FEATURE_DIM: usize = 64;
const WIDTHS: [usize; 3] = [16, 32, FEATURE_DIM];

/// Three fixed random 3x3 conv layers (strides 1, 2, 2) with ReLU,
/// followed by a global average pool.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    in_channels: usize,
    layers: Vec<(Tensor<f32>, Tensor<f32>, usize)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut rng = stream(seed, &[tag::EXTRACTOR]);
        let mut cin = in_channels;
        let layers = WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let std = (2.0 / (cin * 9) as f32).sqrt();
                let w = Tensor::randn(&[cout, cin, 3, 3], &mut rng).scale(std);
                let b = Tensor::randn(&[cout], &mut rng).scale(0.1);
                cin = cout;
                (w, b, if i == 0 { 1 } else { 2 })
            })
            .collect();
        Self { seed, in_channels, layers }
    }

    /// Features of a `[N, C, H, W]` batch.
    pub fn features(&self, images: &Tensor<f32>) -> Result<Features> {
        let (n, c, _, _) = images.dims4()?;
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "feature extractor expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut out = Features::zeros(n, FEATURE_DIM);
        const CHUNK: usize = 64;
        for start in (0..n).step_by(CHUNK) {
            let items = (start..(start + CHUNK).min(n))
                .map(|i| images.batch_item(i))
                .collect::<Result<Vec<_>>>()?;
            let mut x = Tensor::stack_batch(&items)?;
            for (w, b, stride) in &self.layers {
                x = conv2d(&x, w, Some(b), *stride, 1)?.map(|v| v.max(0.0));
            }
            let (bn, d, h, wd) = x.dims4()?;
            let plane = h * wd;
            for i in 0..bn {
                for j in 0..d {
                    let s: f64 = x.data()[(i * d + j) * plane..(i * d + j + 1) * plane]
                        .iter()
                        .map(|&v| v as f64)
                        .sum();
                    out[(start + i, j)] = s / plane as f64;
                }
            }
        }
        Ok(out)
    }
}

fn check_pair(a: &Features, b: &Features) -> Result<()> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid(format!(
            "distance needs at least 2 samples per side, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::invalid(format!("feature dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    Ok(())
}

fn mean_cov(x: &Features) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, the trace term
/// evaluated as `tr sqrt(S_a^(1/2) S_b S_a^(1/2))` in both orders and
/// averaged so the result is exactly symmetric.
pub fn frechet_distance(a: &Features, b: &Features) -> Result<f64> {
    check_pair(a, b)?;
    let (mu_a, s_a) = mean_cov(a);
    let (mu_b, s_b) = mean_cov(b);
    let tr_cross = 0.5 * (trace_sqrt_product(&s_a, &s_b) + trace_sqrt_product(&s_b, &s_a));
    let d = (mu_a - mu_b).norm_squared() + (s_a.trace() + s_b.trace()) - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

fn trace_sqrt_product(s_a: &DMatrix<f64>, s_b: &DMatrix<f64>) -> f64 {
    let root_a = sym_sqrt(s_a);
    let inner = &root_a * s_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

fn poly_kernel(x: &Features, i: usize, y: &Features, j: usize) -> f64 {
    let d = x.ncols() as f64;
    let dot: f64 = x.row(i).iter().zip(y.row(j).iter()).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD^2 with kernel `(x.y / d + 1)^3`. Equal set sizes use the
/// paired U-statistic (exactly zero for identical sets); unequal sizes use
/// the two-sample unbiased estimator.
pub fn kernel_distance(a: &Features, b: &Features) -> Result<f64> {
    check_pair(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    let kxx = DMatrix::from_fn(m, m, |i, j| poly_kernel(a, i, a, j));
    let kyy = DMatrix::from_fn(n, n, |i, j| poly_kernel(b, i, b, j));
    let kxy = DMatrix::from_fn(m, n, |i, j| poly_kernel(a, i, b, j));
    let off = |k: &DMatrix<f64>| k.sum() - k.trace();
    if m == n {
        let h = off(&kxx) + off(&kyy) - (off(&kxy) + off(&kxy.transpose()));
        return Ok(h / (m * (m - 1)) as f64);
    }
    Ok(off(&kxx) / (m * (m - 1)) as f64 + off(&kyy) / (n * (n - 1)) as f64 - 2.0 * kxy.sum() / (m * n) as f64)
}

/// Seeded square crops; a crop as large as the image has one position, so
/// it yields exactly one crop per image.
pub fn random_patches(images: &Tensor<f32>, patch: usize, n_patches: usize, seed: u64) -> Result<Tensor<f32>> {
    let (n, c, h, w) = images.dims4()?;
    if patch == 0 || patch > h.min(w) {
        return Err(Error::invalid(format!("patch {patch} does not fit images of {h}x{w}")));
    }
    if n_patches == 0 {
        return Err(Error::invalid("n_patches must be at least 1"));
    }
    let per = if patch == h && patch == w { 1 } else { n_patches };
    let mut rng = stream(seed, &[tag::PATCHES]);
    let mut out = Vec::with_capacity(n * per * c * patch * patch);
    let d = images.data();
    for i in 0..n {
        for _ in 0..per {
            let (y0, x0) = (rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch));
            for ch in 0..c {
                for y in 0..patch {
                    let row = ((i * c + ch) * h + y0 + y) * w + x0;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(&[n * per, c, patch, patch], out)
}

/// `(pFID, pKID)` over seeded random crops of both sets.
pub fn patch_metrics(
    extractor: &FeatureExtractor,
    images_a: &Tensor<f32>,
    images_b: &Tensor<f32>,
    patch: usize,
    n_patches: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let fa = extractor.features(&random_patches(images_a, patch, n_patches, seed)?)?;
    let fb = extractor.features(&random_patches(images_b, patch, n_patches, seed ^ 0x5bd1_e995)?)?;
    Ok((frechet_distance(&fa, &fb)?, kernel_distance(&fa, &fb)?))
}

/// Area-downsample `gen_high` to the resolution of `gen_base`, then compare.
pub fn base_consistency(extractor: &FeatureExtractor, gen_base: &Tensor<f32>, gen_high: &Tensor<f32>) -> Result<f64> {
    let (_, _, hb, wb) = gen_base.dims4()?;
    let (_, _, hh, wh) = gen_high.dims4()?;
    if hb == 0 || hh % hb != 0 || wh % wb != 0 || hh / hb != wh / wb {
        return Err(Error::invalid(format!(
            "cannot area-downsample {hh}x{wh} to {hb}x{wb} by an integer factor"
        )));
    }
    let down = avg_pool(gen_high, hh / hb)?;
    frechet_distance(&extractor.features(gen_base)?, &extractor.features(&down)?)
}

/// Per-pixel foreground threshold on the max-channel distance from the
/// background color.
pub const COUNT_THRESHOLD: f32 = 0.5;

/// Connected components (8-neighborhood) of pixels that differ from the
/// border-median background, ignoring components smaller than
/// `4 * (H / base)^2` pixels.
pub fn count_objects(image: &Tensor<f32>, base_resolution: usize) -> Result<usize> {
    let s = image.shape();
    let (c, h, w) = match s {
        [1, c, h, w] | [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::invalid(format!("count_objects expects one image, got shape {s:?}"))),
    };
    let d = image.data();
    let plane = h * w;
    let border: Vec<usize> = (0..plane)
        .filter(|&p| p / w == 0 || p / w == h - 1 || p % w == 0 || p % w == w - 1)
        .collect();
    let bg: Vec<f32> = (0..c)
        .map(|ch| {
            let mut v: Vec<f32> = border.iter().map(|&p| d[ch * plane + p]).collect();
            v.sort_by(f32::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let fg: Vec<bool> = (0..plane)
        .map(|p| (0..c).map(|ch| (d[ch * plane + p] - bg[ch]).abs()).fold(0.0, f32::max) > COUNT_THRESHOLD)
        .collect();
    let scale = h as f64 / base_resolution.max(1) as f64;
    let min_area = (4.0 * scale * scale).round() as usize;
    let mut seen = vec![false; plane];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..plane {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut area = 0;
        while let Some(p) = queue.pop_front() {
            area += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if fg[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if area >= min_area {
            count += 1;
        }
    }
    Ok(count)
}

/// Mean per-sample Pearson correlation between each pivot and the
/// area-downsampled image of the next stage.
pub fn pivot_correlation(pivots: &Tensor<f32>, next: &Tensor<f32>) -> Result<f64> {
    let (ph, nh) = (pivots.shape()[2], next.shape()[2]);
    if ph == 0 || nh % ph != 0 {
        return Err(Error::invalid(format!("pivot height {ph} does not divide {nh}")));
    }
    let down = avg_pool(next, nh / ph)?;
    if down.shape() != pivots.shape() {
        return Err(Error::ShapeMismatch {
            op: "pivot_correlation",
            lhs: pivots.shape().to_vec(),
            rhs: down.shape().to_vec(),
        });
    }
    let n = pivots.shape()[0];
    let per = pivots.numel() / n.max(1);
    let mut total = 0.0;
    for i in 0..n {
        let a = &pivots.data()[i * per..(i + 1) * per];
        let b = &down.data()[i * per..(i + 1) * per];
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        total += if saa > 0.0 && sbb > 0.0 { sab / (saa * sbb).sqrt() } else { 0.0 };
    }
    Ok(total / n.max(1) as f64)
}

/// `(accuracy, mean absolute error)` of counts against labels.
pub fn count_statistics(images: &Tensor<f32>, labels: &[usize], base_resolution: usize) -> Result<(f64, f64)> {
    let n = images.shape()[0];
    if n != labels.len() || n == 0 {
        return Err(Error::invalid(format!("{} labels for {n} images", labels.len())));
    }
    let (mut hits, mut err) = (0usize, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        let k = count_objects(&images.batch_item(i)?, base_resolution)?;
        hits += (k == l) as usize;
        err += k.abs_diff(l);
    }
    Ok((hits as f64 / n as f64, err as f64 / n as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub arm: String,
    pub proxy_fid_r: f64,
    pub proxy_kid_r: f64,
    pub proxy_pfid_r: f64,
    pub proxy_pkid_r: f64,
    pub proxy_fid_b: f64,
    pub count_accuracy: f64,
    pub count_mae: f64,
    pub n_samples: usize,
    pub n_reference: usize,
    pub extractor_seed: u64,
    pub sample_seed: u64,
    pub runtime_secs: f64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

/// Wall-clock runtime stays in the JSON report so CSV rows are reproducible.
const CSV_FIELDS: [&str; 14] = [
    "arm",
    "proxy_fid_r",
    "proxy_kid_r",
    "proxy_pfid_r",
    "proxy_pkid_r",
    "proxy_fid_b",
    "count_accuracy",
    "count_mae",
    "n_samples",
    "n_reference",
    "extractor_seed",
    "sample_seed",
    "config_hash",
    "checkpoint_hash",
];

impl MetricReport {
    pub fn csv_header() -> String {
        CSV_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        [
            self.arm.clone(),
            self.proxy_fid_r.to_string(),
            self.proxy_kid_r.to_string(),
            self.proxy_pfid_r.to_string(),
            self.proxy_pkid_r.to_string(),
            self.proxy_fid_b.to_string(),
            self.count_accuracy.to_string(),
            self.count_mae.to_string(),
            self.n_samples.to_string(),
            self.n_reference.to_string(),
            self.extractor_seed.to_string(),
            self.sample_seed.to_string(),
            self.config_hash.clone(),
            self.checkpoint_hash.clone(),
        ]
        .join(",")
    }

    /// Hash of every field except wall-clock runtime.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut r = self.clone();
        r.runtime_secs = 0.0;
        hex::encode(Sha256::digest(serde_json::to_vec(&r).expect("report serializes")))
    }
}

/// Minimal SVG line chart of named `(x, y)` series.
pub fn svg_line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (xs, ys) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let px = |x: f64| PAD + (x - x0) / xs * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / ys * (H - 2.0 * PAD);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{PAD}\" y=\"{}\">{x0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.3}</text>\n\
         <text x=\"5\" y=\"{}\">{y0:.3}</text><text x=\"5\" y=\"{}\">{y1:.3}</text>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        H - PAD + 15.0,
        W - PAD,
        H - PAD + 15.0,
        H - PAD,
        PAD + 4.0,
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            path.join(" "),
            W - PAD - 120.0,
            PAD + 15.0 * i as f64,
            escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
