//! Full-reference metrics, dataset evaluation tables and expert-usage
//! summaries with heatmap export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{load_image, save_image, PairSet, PairedDataset};
use crate::error::{Error, Result};
use crate::losses::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::moe::Granularity;
use crate::network::{ModelParams, RoutingTrace};
use crate::tensor::Tensor;

/// PSNR of identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;
pub const METRICS_HEADER: &str = "dataset,count,psnr_db,ssim";
pub const USAGE_HEADER: &str = "dataset,slot,level,expert,mean_weight,images";
pub const USAGE_FILE: &str = "usage.csv";

/// Heatmap color ramp: weight 0, 0.25, 0.5, 0.75, 1 map to these RGB stops,
/// linearly interpolated in between.
pub const RAMP: [[u8; 3]; 5] = [[0, 0, 4], [87, 16, 110], [188, 55, 84], [249, 142, 9], [252, 255, 164]];

/// `"inf"` for the identical-image sentinel, otherwise four decimals.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10·log10(1/MSE)` with peak 1; [`PSNR_IDENTICAL`] when MSE is zero.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    Ok(if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * mse.log10()
    })
}

/// Separable Gaussian blur with valid windows over one plane.
fn blur_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean local SSIM on the channel-mean grayscale (Gaussian window 11,
/// σ = 1.5, valid windows), averaged over the batch.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (bs, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let gray = |t: &Tensor<f32>, bi: usize| -> Vec<f64> {
        (0..h * w)
            .map(|p| (0..c).map(|ch| t.data()[(bi * c + ch) * h * w + p] as f64).sum::<f64>() / c as f64)
            .collect()
    };
    let mut total = 0.0;
    for bi in 0..bs {
        let (x, y) = (gray(a, bi), gray(b, bi));
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (mx, my) = (blur_valid(&x, h, w, &g), blur_valid(&y, h, w, &g));
        let (xx, yy, xy) = (
            blur_valid(&prod(&x, &x), h, w, &g),
            blur_valid(&prod(&y, &y), h, w, &g),
            blur_valid(&prod(&x, &y), h, w, &g),
        );
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (vx, vy, cxy) = (xx[i] - mx[i] * mx[i], yy[i] - my[i] * my[i], xy[i] - mx[i] * my[i]);
                ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / bs as f64)
}

/// Anything mapping a degraded `1×3×H×W` image to a restored one.
pub trait Restorer {
    fn restore(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Returns its input.
pub struct Identity;

impl Restorer for Identity {
    fn restore(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }
}

impl Restorer for ModelParams {
    fn restore(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(restore_any_size(self, x)?.0)
    }
}

/// Mirror index for out-of-range coordinates (period `2n − 2`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * n - 2;
    let r = i % p;
    if r < n {
        r
    } else {
        p - r
    }
}

/// Reflect-pads the bottom/right edges of every plane to `ho×wo`.
pub fn pad_reflect_to(x: &Tensor<f32>, ho: usize, wo: usize) -> Result<Tensor<f32>> {
    let (b, c, h, w) = x.dims4()?;
    if ho < h || wo < w {
        return Err(Error::shape("pad_reflect_to", format!("{h}×{w} → {ho}×{wo}")));
    }
    let d = x.data();
    Ok(Tensor::from_fn(&[b, c, ho, wo], |i| {
        let (p, y, xx) = (i / (ho * wo), (i / wo) % ho, i % wo);
        d[p * h * w + reflect(y, h) * w + reflect(xx, w)]
    }))
}

/// Smallest `(H', W') ≥ (H, W)` the model accepts.
pub fn valid_size(m: &ModelParams, h: usize, w: usize) -> Result<(usize, usize)> {
    let cfg = &m.config;
    let mut step = crate::network::SIZE_MULTIPLE;
    for (i, &level) in cfg.order.iter().enumerate() {
        if level == Granularity::Patch {
            let s = crate::network::ModelConfig::slot_stride(i);
            step = lcm(step, lcm(s * cfg.patch_grid.gh, s * cfg.patch_grid.gw));
        }
    }
    let up = |v: usize| v.div_ceil(step).max(1) * step;
    let (ho, wo) = (up(h), up(w));
    cfg.check_input(ho, wo)?;
    Ok((ho, wo))
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Restores an image of any size: reflect-pad to the nearest accepted size,
/// run the model, crop back. The trace refers to the padded input.
pub fn restore_any_size(m: &ModelParams, x: &Tensor<f32>) -> Result<(Tensor<f32>, RoutingTrace<f32>)> {
    let (_, _, h, w) = x.dims4()?;
    let (ho, wo) = valid_size(m, h, w)?;
    if (ho, wo) == (h, w) {
        return m.restore(x);
    }
    let (y, trace) = m.restore(&pad_reflect_to(x, ho, wo)?)?;
    Ok((crate::data::crop(&y, 0, 0, h, w)?, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub dataset: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    /// `(file, reason)` for pairs that could not be scored.
    pub failures: Vec<(PathBuf, String)>,
}

impl MetricsTable {
    /// Columns `dataset,count,psnr_db,ssim`; failures follow as `# failed,` comment lines.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            s += &format!("{},{},{},{:.6}\n", r.dataset, r.count, format_psnr(r.psnr), r.ssim);
        }
        for (p, why) in &self.failures {
            s += &format!("# failed,{},{}\n", p.display(), why.replace(['\n', ','], " "));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Mean of per-image scores in a fixed (filename) order, so shuffled inputs
/// give bit-identical means.
fn ordered_mean(mut scores: Vec<(PathBuf, f64)>) -> f64 {
    scores.sort_by(|a, b| a.0.cmp(&b.0));
    scores.iter().map(|s| s.1).sum::<f64>() / scores.len().max(1) as f64
}

/// Restores and scores every pair. Unreadable or unscorable pairs are listed
/// in the failures and skipped.
pub fn evaluate(model: &dyn Restorer, ds: &PairedDataset) -> (MetricsRow, Vec<(PathBuf, String)>) {
    let (mut ps, mut ss, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (dp, _)) in ds.pairs.iter().enumerate() {
        let scored = ds.load(i).and_then(|(d, c)| {
            let y = model.restore(&d)?;
            Ok((psnr(&y, &c)?, ssim(&y, &c)?))
        });
        match scored {
            Ok((p, s)) => {
                ps.push((dp.clone(), p));
                ss.push((dp.clone(), s));
            }
            Err(e) => failures.push((dp.clone(), e.to_string())),
        }
    }
    let row = MetricsRow {
        dataset: ds.name.clone(),
        count: ps.len(),
        psnr: ordered_mean(ps),
        ssim: ordered_mean(ss),
    };
    (row, failures)
}

/// Scores in-memory pairs (means in pair order).
pub fn evaluate_set(model: &dyn Restorer, set: &PairSet) -> Result<MetricsRow> {
    let (mut p, mut s) = (0.0, 0.0);
    for (d, c) in &set.pairs {
        let y = model.restore(d)?;
        p += psnr(&y, c)?;
        s += ssim(&y, c)?;
    }
    let n = set.pairs.len().max(1) as f64;
    Ok(MetricsRow {
        dataset: set.name.clone(),
        count: set.pairs.len(),
        psnr: p / n,
        ssim: s / n,
    })
}

pub fn evaluate_all(model: &dyn Restorer, sets: &[PairedDataset]) -> MetricsTable {
    let mut t = MetricsTable::default();
    for ds in sets {
        let (row, f) = evaluate(model, ds);
        t.rows.push(row);
        t.failures.extend(f);
    }
    t
}

/// Mean routing weight per dataset, slot and expert.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpertUsageSummary {
    /// `(dataset, slot, level, mean weights, images)`.
    pub rows: Vec<(String, usize, Granularity, Vec<f64>, usize)>,
}

impl ExpertUsageSummary {
    pub fn mean(&self, dataset: &str, level: Granularity) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|r| r.0 == dataset && r.2 == level)
            .map(|r| r.3.as_slice())
    }

    /// Long format, one line per expert: `dataset,slot,level,expert,mean_weight,images`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{USAGE_HEADER}\n");
        for (ds, slot, level, w, n) in &self.rows {
            for (k, v) in w.iter().enumerate() {
                s += &format!("{ds},{slot},{},{k},{v:.6},{n}\n", level.name());
            }
        }
        s
    }
}

/// Mean over batch and spatial units of a `B×n×h×w` weight tensor.
fn unit_mean(w: &Tensor<f32>) -> Result<(Vec<f64>, usize)> {
    let (b, n, h, ww) = w.dims4()?;
    let mut m = vec![0.0; n];
    for bi in 0..b {
        for (k, mk) in m.iter_mut().enumerate() {
            let base = (bi * n + k) * h * ww;
            *mk += w.data()[base..base + h * ww].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let units = (b * h * ww) as f64;
    m.iter_mut().for_each(|v| *v /= units);
    Ok((m, b))
}

/// Color-ramped heatmap of a `h×w` weight plane in `[0, 1]`.
pub fn heatmap(plane: &[f32], h: usize, w: usize) -> image::RgbImage {
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = plane[y as usize * w + x as usize].clamp(0.0, 1.0) * 4.0;
        let i = (v.floor() as usize).min(3);
        let f = v - i as f32;
        let (a, b) = (RAMP[i], RAMP[i + 1]);
        image::Rgb(std::array::from_fn(|c| {
            (a[c] as f32 + f * (b[c] as f32 - a[c] as f32)).round() as u8
        }))
    })
}

/// Writes a little-endian `float32` NPY (format 1.0) array.
pub fn write_npy(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!(
            "({})",
            shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 4 * data.len());
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour upsampling of a `gh×gw` plane to `h×w`.
fn upsample_nearest(plane: &[f32], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f32> {
    (0..h * w)
        .map(|i| plane[(i / w) * gh / h * gw + (i % w) * gw / w])
        .collect()
}

/// Writes heatmaps and raw arrays for one routed image into `dir`:
/// `slot{i}_{level}.npy` holds the `n×h×w` weights, and
/// `slot{i}_{level}_expert{k}.png` each expert's map at input resolution
/// (patch grids upsampled nearest-neighbour). Image-level slots are skipped.
pub fn export_trace(dir: &Path, trace: &RoutingTrace<f32>, h: usize, w: usize) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (i, (level, t)) in trace.slots.iter().enumerate() {
        if *level == Granularity::Image {
            continue;
        }
        let (_, n, gh, gw) = t.dims4()?;
        let stem = format!("slot{i}_{}", level.name());
        let npy = dir.join(format!("{stem}.npy"));
        write_npy(&npy, &[n, gh, gw], &t.data()[..n * gh * gw])?;
        written.push(npy);
        for k in 0..n {
            let plane = &t.data()[k * gh * gw..(k + 1) * gh * gw];
            let full = if (gh, gw) == (h, w) {
                plane.to_vec()
            } else {
                upsample_nearest(plane, gh, gw, h, w)
            };
            let p = dir.join(format!("{stem}_expert{k}.png"));
            heatmap(&full, h, w).save(&p).map_err(|source| Error::Image {
                path: p.clone(),
                source,
            })?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Routes every degraded image of each dataset, averages the weights per
/// slot and, for the first `heatmaps` images of each dataset, exports
/// heatmaps under `out/<dataset>/<image stem>/`.
pub fn summarize_experts(
    model: &ModelParams,
    sets: &[(String, Vec<Tensor<f32>>)],
    heatmaps: Option<(&Path, usize, &[String])>,
) -> Result<ExpertUsageSummary> {
    let mut summary = ExpertUsageSummary::default();
    for (si, (name, images)) in sets.iter().enumerate() {
        let mut acc: BTreeMap<usize, (Granularity, Vec<f64>)> = BTreeMap::new();
        for (ii, x) in images.iter().enumerate() {
            let (_, _, h, w) = x.dims4()?;
            let (_, trace) = restore_any_size(model, x)?;
            for (slot, (level, t)) in trace.slots.iter().enumerate() {
                let (m, _) = unit_mean(t)?;
                let e = acc.entry(slot).or_insert_with(|| (*level, vec![0.0; m.len()]));
                e.1.iter_mut().zip(&m).for_each(|(a, v)| *a += v);
            }
            if let Some((out, count, stems)) = heatmaps {
                if ii < count {
                    let stem = stems.get(ii).cloned().unwrap_or_else(|| format!("{ii:04}"));
                    let dir = out.join(sanitize(name)).join(stem);
                    export_trace(&dir, &trace, h, w)?;
                    save_image(&dir.join("input.png"), x)?;
                }
            }
        }
        let n = images.len().max(1) as f64;
        for (slot, (level, m)) in acc {
            summary.rows.push((
                name.clone(),
                slot,
                level,
                m.iter().map(|v| v / n).collect(),
                images.len(),
            ));
        }
        log::debug!("summarized dataset {si} ({name})");
    }
    Ok(summary)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Loads the degraded side of a dataset with file stems for naming.
pub fn load_degraded(ds: &PairedDataset) -> Result<(Vec<Tensor<f32>>, Vec<String>)> {
    let mut imgs = Vec::new();
    let mut stems = Vec::new();
    for (d, _) in &ds.pairs {
        imgs.push(load_image(d)?);
        stems.push(d.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string());
    }
    Ok((imgs, stems))
}
