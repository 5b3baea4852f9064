//! Synthetic degradations, paired-dataset I/O and mixed-task batching.
//!
//! Images are `1×3×H×W` `f32` tensors in `[0, 1]`. On disk a dataset split is
//! `<root>/<split>/degraded/*.png` + `<root>/<split>/clear/*.png` with matching
//! filenames; an optional `<root>/<split>/manifest.csv` overrides the pairing
//! and records how each pair was synthesized.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::resize_bilinear_tensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Haze,
    Lowlight,
    Nighthaze,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Haze, Task::Lowlight, Task::Nighthaze];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Haze => "haze",
            Task::Lowlight => "lowlight",
            Task::Nighthaze => "nighthaze",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haze" => Ok(Task::Haze),
            "lowlight" => Ok(Task::Lowlight),
            "nighthaze" => Ok(Task::Nighthaze),
            _ => Err(Error::validation(format!(
                "unknown task `{s}` (haze|lowlight|nighthaze)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: Task,
    /// Transmission.
    pub t: f64,
    /// Atmospheric light.
    pub a: f64,
    pub gamma: f64,
    pub scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationSpec {
    /// Parameters under which every generator is the identity.
    pub fn neutral(kind: Task) -> Self {
        Self {
            kind,
            t: 1.0,
            a: 1.0,
            gamma: 1.0,
            scale: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// Random parameters in moderate ranges; fields unused by `kind` stay neutral.
    pub fn sample<R: Rng + ?Sized>(kind: Task, rng: &mut R) -> Self {
        let mut s = Self::neutral(kind);
        s.seed = rng.gen();
        if kind != Task::Lowlight {
            s.t = rng.gen_range(0.35..0.8);
            s.a = rng.gen_range(0.6..0.95);
        }
        if kind != Task::Haze {
            s.gamma = rng.gen_range(1.5..2.5);
            s.scale = rng.gen_range(0.35..0.7);
            s.noise_sigma = rng.gen_range(0.0..0.02);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        check_unit("t", self.t)?;
        check_unit("A", self.a)?;
        check_unit("scale", self.scale)?;
        if !(self.gamma.is_finite() && self.gamma >= 1.0) {
            return Err(Error::validation(format!("gamma must be ≥ 1, got {}", self.gamma)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation(format!(
                "noise_sigma must be ≥ 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("{name} must be in (0, 1], got {v}")))
    }
}

/// `I = J·t + A·(1 − t)`, clipped to `[0, 1]`. `t = 0` is allowed here.
pub fn synthesize_haze(clear: &Tensor<f32>, t: f64, a: f64) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("t must be in [0, 1], got {t}")));
    }
    check_unit("A", a)?;
    let (t, a) = (t as f32, a as f32);
    Ok(clear.map(|j| (j * t + a * (1.0 - t)).clamp(0.0, 1.0)))
}

/// `I = clip(scale·J^γ + n)`, `n ~ N(0, σ²)` drawn from `seed`.
pub fn synthesize_lowlight(
    clear: &Tensor<f32>,
    gamma: f64,
    scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Tensor<f32>> {
    DegradationSpec {
        gamma,
        scale,
        noise_sigma,
        seed,
        ..DegradationSpec::neutral(Task::Lowlight)
    }
    .validate()?;
    let mut out = clear.map(|j| (scale * (j as f64).powf(gamma)) as f32);
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, noise_sigma).expect("validated sigma");
        for v in out.data_mut() {
            *v += n.sample(&mut rng) as f32;
        }
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Darkening first, then haze over the dim scene.
pub fn synthesize_nighthaze(clear: &Tensor<f32>, spec: &DegradationSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let dark = synthesize_lowlight(clear, spec.gamma, spec.scale, spec.noise_sigma, spec.seed)?;
    synthesize_haze(&dark, spec.t, spec.a)
}

/// Dispatches on `spec.kind`.
pub fn synthesize(clear: &Tensor<f32>, spec: &DegradationSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    match spec.kind {
        Task::Haze => synthesize_haze(clear, spec.t, spec.a),
        Task::Lowlight => synthesize_lowlight(clear, spec.gamma, spec.scale, spec.noise_sigma, spec.seed),
        Task::Nighthaze => synthesize_nighthaze(clear, spec),
    }
}

/// Procedural RGB scene (sky gradient, blocks, discs, stripes) in `[0, 1]`.
pub fn synthetic_scene(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![[0f32; 3]; h * w];
    let top: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.9));
    let bottom: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
    for y in 0..h {
        let s = y as f32 / (h.max(2) - 1) as f32;
        for x in 0..w {
            img[y * w + x] = std::array::from_fn(|c| top[c] * (1.0 - s) + bottom[c] * s);
        }
    }
    let (hf, wf) = (h as f32, w as f32);
    for _ in 0..rng.gen_range(3..7) {
        let col: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.05..1.0));
        let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
        let (ry, rx) = (rng.gen_range(0.08..0.3) * hf, rng.gen_range(0.08..0.3) * wf);
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 - cy) / ry, (x as f32 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    img[y * w + x] = col;
                }
            }
        }
    }
    let period = rng.gen_range(3.0..8.0f32);
    let band = (rng.gen_range(0.0..hf * 0.6), rng.gen_range(0.1..0.25) * hf);
    for y in 0..h {
        if (y as f32) < band.0 || (y as f32) > band.0 + band.1 {
            continue;
        }
        for x in 0..w {
            if ((x as f32 / period) as usize).is_multiple_of(2) {
                for v in &mut img[y * w + x] {
                    *v *= 0.6;
                }
            }
        }
    }
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        img[p][c]
    })
}

/// Loads an 8-bit image as a `1×3×H×W` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Quantizes a `1×3×H×W` (or `1×1×H×W`) tensor to 8 bits and writes a PNG.
pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (b, c, h, w) = t.dims4()?;
    if b != 1 || !(c == 1 || c == 3) {
        return Err(Error::shape(
            "save_image",
            format!("expected 1×{{1,3}}×H×W, got {:?}", t.shape()),
        ));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = t.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            buf.push(q(d[(ch % c) * h * w + p]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Spatial crop of every plane.
pub fn crop(t: &Tensor<f32>, y: usize, x: usize, ch: usize, cw: usize) -> Result<Tensor<f32>> {
    let (b, c, h, w) = t.dims4()?;
    if y + ch > h || x + cw > w || ch == 0 || cw == 0 {
        return Err(Error::shape(
            "crop",
            format!("window {ch}×{cw} at ({y},{x}) in {h}×{w}"),
        ));
    }
    let d = t.data();
    Ok(Tensor::from_fn(&[b, c, ch, cw], |i| {
        let (p, yy, xx) = (i / (ch * cw), (i / cw) % ch, i % cw);
        d[p * h * w + (y + yy) * w + x + xx]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub side: usize,
    /// Whether the pair was first upscaled to reach `size` per side.
    pub upscaled: bool,
}

/// Picks a random square window whose side is a multiple of `size`, applies
/// it to both images and resizes the crop to `size×size`.
pub fn crop_resize(
    degraded: &Tensor<f32>,
    clear: &Tensor<f32>,
    size: usize,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>, CropWindow)> {
    if degraded.shape() != clear.shape() {
        return Err(Error::shape(
            "crop_resize",
            format!("{:?} vs {:?}", degraded.shape(), clear.shape()),
        ));
    }
    let (_, _, h, w) = degraded.dims4()?;
    if size == 0 || h < 2 || w < 2 {
        return Err(Error::validation(format!(
            "crop_resize: degenerate {h}×{w} image or size {size}"
        )));
    }
    let (mut deg, mut cl, mut upscaled) = (degraded.clone(), clear.clone(), false);
    let (mut h, mut w) = (h, w);
    if h.min(w) < size {
        let s = size as f64 / h.min(w) as f64;
        let (nh, nw) = (
            ((h as f64 * s).round() as usize).max(size),
            ((w as f64 * s).round() as usize).max(size),
        );
        deg = resize_bilinear_tensor(&deg, nh, nw)?;
        cl = resize_bilinear_tensor(&cl, nh, nw)?;
        (h, w, upscaled) = (nh, nw, true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = size * rng.gen_range(1..=h.min(w) / size);
    let (y, x) = (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side));
    let window = CropWindow { y, x, side, upscaled };
    let fit = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let c = crop(t, y, x, side, side)?;
        if side == size {
            Ok(c)
        } else {
            resize_bilinear_tensor(&c, size, size)
        }
    };
    Ok((fit(&deg)?, fit(&cl)?, window))
}

/// One manifest row: pairing plus the degradation that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub degraded: String,
    pub clear: String,
    pub spec: Option<DegradationSpec>,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "degraded",
        "clear",
        "kind",
        "t",
        "a",
        "gamma",
        "scale",
        "noise_sigma",
        "seed",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![r.degraded.clone(), r.clear.clone()];
        match &r.spec {
            Some(s) => rec.extend([
                s.kind.to_string(),
                s.t.to_string(),
                s.a.to_string(),
                s.gamma.to_string(),
                s.scale.to_string(),
                s.noise_sigma.to_string(),
                s.seed.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 7)),
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        if field(0).is_empty() || field(1).is_empty() {
            return Err(Error::format(path, "manifest row without degraded/clear names"));
        }
        let spec = if field(2).is_empty() {
            None
        } else {
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad number `{}`", field(i))))
            };
            Some(DegradationSpec {
                kind: field(2).parse()?,
                t: num(3)?,
                a: num(4)?,
                gamma: num(5)?,
                scale: num(6)?,
                noise_sigma: num(7)?,
                seed: field(8)
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad seed `{}`", field(8))))?,
            })
        };
        rows.push(ManifestRow {
            degraded: field(0).to_string(),
            clear: field(1).to_string(),
            spec,
        });
    }
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                names.insert(n.to_string());
            }
        }
    }
    Ok(names)
}

/// Aligned degraded/clear file lists of one dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub name: String,
    pub root: PathBuf,
    pub task: Option<Task>,
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub specs: Vec<Option<DegradationSpec>>,
}

impl PairedDataset {
    /// Opens `<root>/<split>`. Mismatched file lists are refused.
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let dir = root.join(split);
        let (ddir, cdir) = (dir.join("degraded"), dir.join("clear"));
        let manifest = dir.join(MANIFEST);
        let rows = if manifest.is_file() {
            read_manifest(&manifest)?
        } else {
            let (d, c) = (png_names(&ddir)?, png_names(&cdir)?);
            if d != c {
                let only_d: Vec<_> = d.difference(&c).take(5).cloned().collect();
                let only_c: Vec<_> = c.difference(&d).take(5).cloned().collect();
                return Err(Error::validation(format!(
                    "{}: degraded and clear lists differ (only degraded: {only_d:?}; only clear: {only_c:?})",
                    dir.display()
                )));
            }
            d.into_iter()
                .map(|n| ManifestRow {
                    degraded: n.clone(),
                    clear: n,
                    spec: None,
                })
                .collect()
        };
        if rows.is_empty() {
            return Err(Error::validation(format!("{}: dataset is empty", dir.display())));
        }
        let kinds: BTreeSet<Task> = rows.iter().filter_map(|r| r.spec.map(|s| s.kind)).collect();
        let task = (kinds.len() == 1 && rows.iter().all(|r| r.spec.is_some())).then(|| *kinds.first().unwrap());
        let name = root
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| format!("{n}/{split}"))
            .unwrap_or_else(|| split.to_string());
        Ok(Self {
            name,
            root: dir,
            task,
            specs: rows.iter().map(|r| r.spec).collect(),
            pairs: rows
                .into_iter()
                .map(|r| (ddir.join(r.degraded), cdir.join(r.clear)))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (d, c) = &self.pairs[i];
        let (d, c) = (load_image(d)?, load_image(c)?);
        if d.shape() != c.shape() {
            return Err(Error::format(
                &self.pairs[i].0,
                format!("pair sizes differ: {:?} vs {:?}", d.shape(), c.shape()),
            ));
        }
        Ok((d, c))
    }

    /// Loads every pair, optionally cropping/resizing to `size` with per-item seeds.
    pub fn load_all(&self, size: Option<usize>, seed: u64) -> Result<PairSet> {
        let mut pairs = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let (d, c) = self.load(i)?;
            pairs.push(match size {
                Some(s) => {
                    let (d, c, _) = crop_resize(&d, &c, s, seed.wrapping_add(i as u64))?;
                    (d, c)
                }
                None => (d, c),
            });
        }
        Ok(PairSet {
            name: self.name.clone(),
            task: self.task,
            pairs,
        })
    }
}

/// Where `synthesize_split` takes its clear images from.
#[derive(Clone, Debug, PartialEq)]
pub enum ClearSource {
    /// Every PNG in a directory, in filename order.
    Dir(PathBuf),
    /// `count` procedural scenes of `size`×`size`.
    Procedural { count: usize, size: usize },
}

/// Deferred load of one clear image.
type LoadClear = Box<dyn Fn() -> Result<Tensor<f32>>>;

/// Degrades each clear image and writes `<out>/<split>/{degraded,clear}/`
/// plus a manifest recording every spec. `neutral` uses the identity spec.
pub fn synthesize_split(
    source: &ClearSource,
    out: &Path,
    split: &str,
    kind: Task,
    neutral: bool,
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<(String, LoadClear)> = match source {
        ClearSource::Dir(dir) => {
            if !dir.is_dir() {
                return Err(Error::validation(format!(
                    "source directory {} does not exist",
                    dir.display()
                )));
            }
            let names = png_names(dir)?;
            if names.is_empty() {
                return Err(Error::validation(format!("no PNG images in {}", dir.display())));
            }
            names
                .into_iter()
                .map(|n| {
                    let p = dir.join(&n);
                    (
                        n,
                        Box::new(move || load_image(&p)) as Box<dyn Fn() -> Result<Tensor<f32>>>,
                    )
                })
                .collect()
        }
        &ClearSource::Procedural { count, size } => {
            if count == 0 || size == 0 {
                return Err(Error::validation("procedural source needs count ≥ 1 and size ≥ 1"));
            }
            (0..count)
                .map(|i| {
                    let s: u64 = rng.gen();
                    // 8-bit quantized so the clear file decodes to exactly this tensor
                    let f = move || Ok(synthetic_scene(size, size, s).map(|v| (v * 255.0).round() / 255.0));
                    (
                        format!("{i:05}.png"),
                        Box::new(f) as Box<dyn Fn() -> Result<Tensor<f32>>>,
                    )
                })
                .collect()
        }
    };
    let dir = out.join(split);
    let mut rows = Vec::with_capacity(items.len());
    for (name, load) in items {
        let clear = load()?;
        let spec = if neutral {
            DegradationSpec::neutral(kind)
        } else {
            DegradationSpec::sample(kind, &mut rng)
        };
        save_image(&dir.join("degraded").join(&name), &synthesize(&clear, &spec)?)?;
        save_image(&dir.join("clear").join(&name), &clear)?;
        rows.push(ManifestRow {
            degraded: name.clone(),
            clear: name,
            spec: Some(spec),
        });
    }
    write_manifest(&dir.join(MANIFEST), &rows)?;
    Ok(rows)
}

/// In-memory pairs of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub name: String,
    pub task: Option<Task>,
    pub pairs: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl PairSet {
    /// `n` procedural scenes degraded by randomly drawn specs of `kind`.
    pub fn synthetic(kind: Task, n: usize, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..n)
            .map(|_| {
                let clear = synthetic_scene(size, size, rng.gen());
                let spec = DegradationSpec::sample(kind, &mut rng);
                Ok((synthesize(&clear, &spec)?, clear))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: format!("synthetic-{kind}"),
            task: Some(kind),
            pairs,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub degraded: Tensor<f32>,
    pub clear: Tensor<f32>,
    pub tasks: Vec<Option<Task>>,
    /// `(dataset, item)` per slot.
    pub sources: Vec<(usize, usize)>,
}

/// Per slot: a dataset uniformly, then an item of it uniformly.
pub fn sample_sources<R: Rng + ?Sized>(sizes: &[usize], batch_size: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if sizes.is_empty() {
        return Err(Error::validation("mixed batch needs at least one dataset"));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::validation(format!("dataset {i} is empty")));
    }
    Ok((0..batch_size)
        .map(|_| {
            let d = rng.gen_range(0..sizes.len());
            (d, rng.gen_range(0..sizes[d]))
        })
        .collect())
}

pub fn mixed_batch<R: Rng + ?Sized>(sets: &[PairSet], batch_size: usize, rng: &mut R) -> Result<Batch> {
    let sizes: Vec<usize> = sets.iter().map(|s| s.pairs.len()).collect();
    let sources = sample_sources(&sizes, batch_size, rng)?;
    let (deg, clear): (Vec<_>, Vec<_>) = sources
        .iter()
        .map(|&(d, i)| (sets[d].pairs[i].0.clone(), sets[d].pairs[i].1.clone()))
        .unzip();
    Ok(Batch {
        degraded: Tensor::stack_batch(&deg)?,
        clear: Tensor::stack_batch(&clear)?,
        tasks: sources.iter().map(|&(d, _)| sets[d].task).collect(),
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Tensor<f32> {
        Tensor::full(&[1, 3, 4, 4], v)
    }

    #[test]
    fn haze_examples() {
        let j = synthetic_scene(8, 8, 1);
        assert_eq!(synthesize_haze(&j, 1.0, 0.7).unwrap(), j);
        assert!(synthesize_haze(&j, 0.0, 0.7).unwrap().data().iter().all(|&v| v == 0.7));
        assert_eq!(synthesize_haze(&img(0.5), 0.5, 1.0).unwrap().data()[0], 0.75);
        assert!(synthesize_haze(&j, 1.5, 0.7).unwrap_err().is_validation());
        assert!(synthesize_haze(&j, 0.5, 0.0).unwrap_err().is_validation());
    }

    #[test]
    fn haze_monotone_in_a() {
        let j = synthetic_scene(16, 16, 2);
        let lo = synthesize_haze(&j, 0.4, 0.5).unwrap();
        let hi = synthesize_haze(&j, 0.4, 0.9).unwrap();
        assert!(lo.data().iter().zip(hi.data()).all(|(a, b)| a <= b));
    }

    #[test]
    fn lowlight_examples() {
        let j = synthetic_scene(8, 8, 3);
        assert_eq!(synthesize_lowlight(&j, 1.0, 1.0, 0.0, 9).unwrap(), j);
        let v = synthesize_lowlight(&img(0.81), 2.0, 1.0, 0.0, 0).unwrap().data()[0];
        assert!((v - 0.6561).abs() < 1e-6);
        let a = synthesize_lowlight(&j, 2.0, 0.5, 0.05, 42).unwrap();
        assert_eq!(a, synthesize_lowlight(&j, 2.0, 0.5, 0.05, 42).unwrap());
        assert_ne!(a, synthesize_lowlight(&j, 2.0, 0.5, 0.05, 43).unwrap());
        assert!(synthesize_lowlight(&j, 0.5, 1.0, 0.0, 0).unwrap_err().is_validation());
    }

    #[test]
    fn nighthaze_examples() {
        let j = synthetic_scene(8, 8, 4);
        assert_eq!(
            synthesize_nighthaze(&j, &DegradationSpec::neutral(Task::Nighthaze)).unwrap(),
            j
        );
        let spec = DegradationSpec {
            gamma: 2.0,
            scale: 0.5,
            t: 0.5,
            a: 0.8,
            ..DegradationSpec::neutral(Task::Nighthaze)
        };
        let v = synthesize_nighthaze(&img(1.0), &spec).unwrap().data()[0];
        assert!((v - 0.65).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = DegradationSpec {
                noise_sigma: 0.3,
                ..DegradationSpec::sample(Task::Nighthaze, &mut rng)
            };
            let out = synthesize(&j, &s).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_resize_whole_image_is_identity() {
        let d = synthetic_scene(32, 32, 6);
        let c = synthetic_scene(32, 32, 7);
        let (d2, c2, win) = crop_resize(&d, &c, 32, 1).unwrap();
        assert_eq!((d2, c2), (d, c));
        assert_eq!((win.y, win.x, win.side, win.upscaled), (0, 0, 32, false));
    }

    #[test]
    fn crop_windows_align_across_pair() {
        // coordinate-encoding probe: channel 0 = y, channel 1 = x
        let (h, w) = (70, 90);
        let coords = Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            [y as f32, x as f32, 0.0][c]
        });
        let shifted = coords.map(|v| v + 1000.0);
        for seed in 0..10 {
            let (a, b, win) = crop_resize(&coords, &shifted, 32, seed).unwrap();
            assert_eq!(win.side % 32, 0);
            let expect = |t: &Tensor<f32>| {
                resize_bilinear_tensor(&crop(t, win.y, win.x, win.side, win.side).unwrap(), 32, 32).unwrap()
            };
            assert_eq!(a, expect(&coords), "seed {seed}");
            assert_eq!(b, expect(&shifted), "seed {seed}");
            let (a0, b0) = (a.at4(0, 0, 0, 0), b.at4(0, 0, 0, 0));
            assert!((b0 - a0 - 1000.0).abs() < 1e-3);
        }
        let first = crop_resize(&coords, &shifted, 16, 3).unwrap();
        assert_eq!(first, crop_resize(&coords, &shifted, 16, 3).unwrap());
    }

    #[test]
    fn crop_resize_upscales_small_inputs() {
        let d = synthetic_scene(20, 24, 8);
        let (d2, _, win) = crop_resize(&d, &d, 32, 0).unwrap();
        assert_eq!(d2.shape(), &[1, 3, 32, 32]);
        assert!(win.upscaled);
    }

    #[test]
    fn mixed_batch_sampling() {
        let sets: Vec<PairSet> = Task::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| PairSet::synthetic(k, 2, 8, i as u64).unwrap())
            .collect();
        let b = mixed_batch(&sets[..1], 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.sources.iter().all(|s| s.0 == 0));
        assert_eq!(b.degraded.shape(), &[4, 3, 8, 8]);
        assert_eq!(b.tasks, vec![Some(Task::Haze); 4]);
        let again = |s| mixed_batch(&sets, 4, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(again(9), again(9));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = sample_sources(&[5, 5, 5], 10_000, &mut rng).unwrap();
        for d in 0..3 {
            let f = draws.iter().filter(|s| s.0 == d).count() as f64 / 10_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "dataset {d}: {f}");
        }
        assert!(sample_sources(&[], 4, &mut rng).unwrap_err().is_validation());
        assert!(sample_sources(&[3, 0], 4, &mut rng).unwrap_err().is_validation());
    }

    #[test]
    fn dataset_roundtrip_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("train");
        let j = synthetic_scene(8, 8, 10);
        for n in ["a.png", "b.png"] {
            save_image(&split.join("degraded").join(n), &j).unwrap();
            save_image(&split.join("clear").join(n), &j).unwrap();
        }
        let ds = PairedDataset::open(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 2);
        let (d, c) = ds.load(0).unwrap();
        assert!(d.max_abs_diff(&j) <= 0.5 / 255.0 + 1e-6);
        assert_eq!(d, c);

        save_image(&split.join("clear").join("c.png"), &j).unwrap();
        let err = PairedDataset::open(dir.path(), "train").unwrap_err();
        assert!(err.to_string().contains("c.png"));

        let spec = DegradationSpec::neutral(Task::Haze);
        let rows = vec![
            ManifestRow {
                degraded: "a.png".into(),
                clear: "b.png".into(),
                spec: Some(spec),
            },
            ManifestRow {
                degraded: "b.png".into(),
                clear: "a.png".into(),
                spec: Some(spec),
            },
        ];
        write_manifest(&split.join(MANIFEST), &rows).unwrap();
        assert_eq!(read_manifest(&split.join(MANIFEST)).unwrap(), rows);
        let ds = PairedDataset::open(dir.path(), "train").unwrap();
        assert_eq!(ds.task, Some(Task::Haze));
        assert!(ds.pairs[0].1.ends_with("b.png"));
    }

    #[test]
    fn eight_bit_roundtrip_is_exact_for_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let q = synthetic_scene(8, 8, 11).map(|v| (v * 255.0).round() / 255.0);
        let p = dir.path().join("q.png");
        save_image(&p, &q).unwrap();
        let back = load_image(&p).unwrap();
        save_image(&dir.path().join("r.png"), &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("r.png")).unwrap());
        assert!(back.max_abs_diff(&q) < 1e-6);
    }

    #[test]
    fn synthesized_split_opens_as_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let src = ClearSource::Procedural { count: 3, size: 16 };
        let rows = synthesize_split(&src, dir.path(), "train", Task::Haze, false, 5).unwrap();
        assert_eq!(rows.len(), 3);
        let ds = PairedDataset::open(dir.path(), "train").unwrap();
        assert_eq!((ds.len(), ds.task), (3, Some(Task::Haze)));
        assert_eq!(ds.specs[1], rows[1].spec);
        let neutral = tempfile::tempdir().unwrap();
        synthesize_split(&src, neutral.path(), "test", Task::Nighthaze, true, 5).unwrap();
        let ds = PairedDataset::open(neutral.path(), "test").unwrap();
        for (d, c) in &ds.pairs {
            assert_eq!(fs::read(d).unwrap(), fs::read(c).unwrap());
        }
        let missing = ClearSource::Dir(dir.path().join("nope"));
        assert!(synthesize_split(&missing, dir.path(), "x", Task::Haze, false, 0)
            .unwrap_err()
            .is_validation());
    }
}
