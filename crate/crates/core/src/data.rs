//! Point cloud files, normalization, synthetic primitives with view crops,
//! manifests and batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointops::{fps, PointCloud};

const BINARY_MAGIC: &[u8; 4] = b"PCXY";

/// On-disk encodings of a point cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    /// One `x y z` line per point; `#` lines are comments.
    XyzText,
    /// `PCXY`, a little-endian u32 count, then `count * 3` little-endian f32.
    XyzBinary,
}

impl CloudFormat {
    /// `.pcxy` and `.bin` files are binary, everything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pcxy" | "bin") => CloudFormat::XyzBinary,
            _ => CloudFormat::XyzText,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::XyzText => "xyz",
            CloudFormat::XyzBinary => "pcxy",
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz-text" | "text" => Ok(CloudFormat::XyzText),
            "xyz-binary" | "binary" => Ok(CloudFormat::XyzBinary),
            other => Err(Error::config(format!(
                "unknown cloud format {other:?} (expected xyz-text or xyz-binary)"
            ))),
        }
    }
}

pub fn parse_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cloud_bytes(&bytes, format, path)
}

/// Parses an in-memory file; `path` only labels errors. Coordinates are
/// read at 32-bit precision in both formats.
pub fn parse_cloud_bytes(bytes: &[u8], format: CloudFormat, path: &Path) -> Result<PointCloud> {
    let parse_err = |location: String, detail: String| Error::Parse {
        path: path.to_path_buf(),
        location,
        detail,
    };
    let points = match format {
        CloudFormat::XyzText => {
            let text = std::str::from_utf8(bytes)
                .map_err(|e| parse_err(format!("byte {}", e.valid_up_to()), "invalid UTF-8".into()))?;
            let mut points = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let at = || format!("line {}", i + 1);
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 3 {
                    return Err(parse_err(at(), format!("expected 3 values, found {}", fields.len())));
                }
                let mut p = [0.0; 3];
                for (slot, field) in p.iter_mut().zip(&fields) {
                    *slot = field
                        .parse::<f32>()
                        .map_err(|_| parse_err(at(), format!("not a number: {field:?}")))?
                        as f64;
                }
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(parse_err(at(), "non-finite coordinate".into()));
                }
                points.push(p);
            }
            points
        }
        CloudFormat::XyzBinary => {
            if bytes.len() < 8 {
                return Err(parse_err(
                    format!("byte {}", bytes.len()),
                    "file shorter than its 8-byte header".into(),
                ));
            }
            if &bytes[..4] != BINARY_MAGIC {
                return Err(parse_err("byte 0".into(), "missing PCXY magic".into()));
            }
            let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
            let need = 8 + count * 12;
            if bytes.len() != need {
                return Err(parse_err(
                    format!("byte {}", bytes.len().min(need)),
                    format!("{count} points need {need} bytes, file has {}", bytes.len()),
                ));
            }
            let mut points = Vec::with_capacity(count);
            for (i, chunk) in bytes[8..].chunks_exact(12).enumerate() {
                let mut p = [0.0; 3];
                for (k, slot) in p.iter_mut().enumerate() {
                    let raw = chunk[k * 4..k * 4 + 4].try_into().expect("4 bytes");
                    *slot = f32::from_le_bytes(raw) as f64;
                }
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(parse_err(format!("byte {}", 8 + i * 12), "non-finite coordinate".into()));
                }
                points.push(p);
            }
            points
        }
    };
    if points.is_empty() {
        return Err(Error::EmptyInput("parse_cloud"));
    }
    Ok(PointCloud::new(points))
}

/// Serializes at 32-bit precision; text uses the shortest representation
/// that reads back to the same `f32`.
pub fn cloud_bytes(cloud: &PointCloud, format: CloudFormat) -> Vec<u8> {
    match format {
        CloudFormat::XyzText => {
            let mut out = String::with_capacity(cloud.len() * 30);
            for p in &cloud.points {
                out.push_str(&format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32));
            }
            out.into_bytes()
        }
        CloudFormat::XyzBinary => {
            let mut out = Vec::with_capacity(8 + cloud.len() * 12);
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
            for v in cloud.points.iter().flatten() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out
        }
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    fs::write(path, cloud_bytes(cloud, format)).map_err(|e| Error::io(path, e))
}

/// Affine map applied by [`normalize`]: `x' = (x - center) / extent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    /// Largest bounding-box side; 1 for a degenerate cloud.
    pub extent: f64,
}

impl Normalization {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let c = self.center;
        PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| (p[k] - c[k]) / self.extent))
                .collect(),
        )
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        let c = self.center;
        PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| p[k] * self.extent + c[k]))
                .collect(),
        )
    }
}

/// Transform centering the bounding box at the origin with its largest
/// side scaled to 1. A cloud whose points all coincide keeps scale 1.
pub fn normalization_of(cloud: &PointCloud) -> Result<Normalization> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("normalize"));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    Ok(Normalization {
        center,
        extent: if extent > 0.0 { extent } else { 1.0 },
    })
}

/// Fits the cloud into `[-0.5, 0.5]³`; returns the transform so callers can
/// map results back.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let t = normalization_of(cloud)?;
    Ok((t.apply(cloud), t))
}

/// Synthetic shape families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Sphere,
    Box,
    Cylinder,
    Torus,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::Sphere,
        Primitive::Box,
        Primitive::Cylinder,
        Primitive::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cylinder => "cylinder",
            Primitive::Torus => "torus",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown shape {s:?}")))
    }
}

/// Uniform surface samples of a primitive centered at the origin, already
/// inside `[-0.5, 0.5]³` with its largest side exactly 1.
///
/// Spheres have radius 0.5. Boxes, cylinders and tori draw their
/// proportions from `rng`; boxes are axis aligned, cylinders run along y and
/// tori lie in the x-y plane, so every shape is symmetric under z → -z.
pub fn synth_sample(shape: Primitive, n_complete: usize, rng: &mut impl Rng) -> PointCloud {
    let points = match shape {
        Primitive::Sphere => (0..n_complete).map(|_| scale3(unit_vector(rng), 0.5)).collect(),
        Primitive::Box => {
            let h = box_half_extents(rng);
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            (0..n_complete)
                .map(|_| {
                    let mut pick = rng.gen_range(0.0..total);
                    let mut axis = 0;
                    while axis < 2 && pick >= areas[axis] {
                        pick -= areas[axis];
                        axis += 1;
                    }
                    let mut p = [0.0; 3];
                    for (k, slot) in p.iter_mut().enumerate() {
                        *slot = if k == axis {
                            if rng.gen_bool(0.5) {
                                h[k]
                            } else {
                                -h[k]
                            }
                        } else {
                            rng.gen_range(-h[k]..h[k])
                        };
                    }
                    p
                })
                .collect()
        }
        Primitive::Cylinder => {
            let (radius, half) = {
                let r = rng.gen_range(0.5..1.0);
                let h = rng.gen_range(0.5..1.0);
                let s = 0.5 / f64::max(r, h);
                (r * s, h * s)
            };
            let side = 2.0 * std::f64::consts::PI * radius * 2.0 * half;
            let cap = std::f64::consts::PI * radius * radius;
            (0..n_complete)
                .map(|_| {
                    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                    let pick = rng.gen_range(0.0..side + 2.0 * cap);
                    if pick < side {
                        let y = rng.gen_range(-half..half);
                        [radius * phi.cos(), y, radius * phi.sin()]
                    } else {
                        // uniform on the disc
                        let rho = radius * rng.gen::<f64>().sqrt();
                        let y = if pick < side + cap { half } else { -half };
                        [rho * phi.cos(), y, rho * phi.sin()]
                    }
                })
                .collect()
        }
        Primitive::Torus => {
            let minor = rng.gen_range(0.1..0.2);
            let major = 0.5 - minor;
            (0..n_complete)
                .map(|_| loop {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                    // area element is proportional to major + minor cos θ
                    let accept = (major + minor * theta.cos()) / (major + minor);
                    if rng.gen::<f64>() < accept {
                        let ring = major + minor * theta.cos();
                        break [ring * phi.cos(), ring * phi.sin(), minor * theta.sin()];
                    }
                })
                .collect()
        }
    };
    PointCloud::new(points)
}

/// Half side lengths of a synthetic box: the longest is 0.5.
pub fn box_half_extents(rng: &mut impl Rng) -> [f64; 3] {
    let mut h = [0.5, rng.gen_range(0.25..0.5), rng.gen_range(0.25..0.5)];
    h.shuffle(rng);
    h
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-6 && n2 <= 1.0 {
            return scale3(v, 1.0 / n2.sqrt());
        }
    }
}

fn scale3(v: [f64; 3], s: f64) -> [f64; 3] {
    v.map(|x| x * s)
}

/// Percentile of the view projection below which points are cut away.
pub const CROP_PERCENTILE: f64 = 40.0;
const CROP_ATTEMPTS: usize = 8;

/// Emulates a single-view scan: picks a random view direction, keeps the
/// points whose projection on it exceeds the 40th percentile, and reduces
/// them to `n_partial` by farthest point sampling.
pub fn view_crop(complete: &PointCloud, n_partial: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if complete.is_empty() {
        return Err(Error::EmptyInput("view_crop"));
    }
    let mut kept = Vec::new();
    for _ in 0..CROP_ATTEMPTS {
        let dir = unit_vector(rng);
        let proj: Vec<f64> = complete
            .points
            .iter()
            .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
            .collect();
        let mut sorted = proj.clone();
        sorted.sort_by(f64::total_cmp);
        let cut = (CROP_PERCENTILE / 100.0 * sorted.len() as f64).floor() as usize;
        let threshold = sorted[cut.min(sorted.len() - 1)];
        kept = (0..proj.len()).filter(|&i| proj[i] > threshold).collect();
        if kept.len() >= n_partial {
            let retained = complete.select(&kept);
            let start = rng.gen_range(0..retained.len().max(1));
            let idx = fps(&retained, n_partial, start.min(retained.len().saturating_sub(1)))?;
            return Ok(retained.select(&idx));
        }
    }
    Err(Error::contract(
        "view_crop",
        format!(
            "crop kept {} points, fewer than the {n_partial} requested, after {CROP_ATTEMPTS} views",
            kept.len()
        ),
    ))
}

/// Brings a cloud to exactly `n` points: farthest point sampling when it has
/// more, seeded duplication of random points when it has fewer.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("resample"));
    }
    if cloud.len() >= n {
        let idx = fps(cloud, n, rng.gen_range(0..cloud.len()))?;
        return Ok(cloud.select(&idx));
    }
    let mut points = cloud.points.clone();
    while points.len() < n {
        points.push(cloud.points[rng.gen_range(0..cloud.len())]);
    }
    Ok(PointCloud::new(points))
}

/// One training or evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub partial: PointCloud,
    pub complete: PointCloud,
    pub category: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Settings of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub shapes: Vec<Primitive>,
    pub count: usize,
    pub n_partial: usize,
    pub n_complete: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::config("synthetic dataset needs at least one shape"));
        }
        if self.n_complete == 0 || self.n_partial == 0 {
            return Err(Error::config("point counts must be positive"));
        }
        if self.n_partial > self.n_complete / 2 {
            return Err(Error::config(format!(
                "n_partial {} exceeds the points a crop of {} keeps",
                self.n_partial, self.n_complete
            )));
        }
        Ok(())
    }
}

/// Generates `count` samples cycling through the shapes. Sample `i` draws
/// from its own stream of the seeded generator, so any sample can be
/// regenerated alone.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.count)
        .map(|i| {
            let shape = cfg.shapes[i % cfg.shapes.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let complete = synth_sample(shape, cfg.n_complete, &mut rng);
            let partial = view_crop(&complete, cfg.n_partial, &mut rng)?;
            Ok(Sample {
                partial,
                complete,
                category: shape.name().to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Categories in first-appearance order.
    pub fn categories(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for s in &self.samples {
            if !seen.contains(&s.category) {
                seen.push(s.category.clone());
            }
        }
        seen
    }

    /// Splits off `fraction` of the samples (at least one when there are two
    /// or more) as a validation set chosen by `seed`. Both parts keep the
    /// original relative order.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let n = self.len();
        let mut n_val = (fraction * n as f64).round() as usize;
        if n >= 2 && fraction > 0.0 {
            n_val = n_val.clamp(1, n - 1);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut is_val = vec![false; n];
        for &i in &order[..n_val] {
            is_val[i] = true;
        }
        let (mut train, mut val) = (Dataset::default(), Dataset::default());
        for (i, s) in self.samples.iter().enumerate() {
            if is_val[i] {
                val.samples.push(s.clone());
            } else {
                train.samples.push(s.clone());
            }
        }
        (train, val)
    }

    pub fn batches(&self, batch_size: usize, order: BatchOrder) -> Batches<'_> {
        Batches {
            data: self,
            plan: batch_plan(self.len(), batch_size, order).into_iter(),
        }
    }
}

/// How samples are grouped into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchOrder {
    /// Shuffled by `(seed, epoch)`; the final short batch is dropped.
    Train { seed: u64, epoch: u64 },
    /// Dataset order, short final batch kept.
    Eval,
}

/// Sample indices of each batch.
pub fn batch_plan(n: usize, batch_size: usize, order: BatchOrder) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    match order {
        BatchOrder::Train { seed, epoch } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            idx.shuffle(&mut rng);
            idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
        }
        BatchOrder::Eval => idx.chunks(batch_size).map(<[usize]>::to_vec).collect(),
    }
}

/// A batch borrowed from a dataset.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub indices: Vec<usize>,
    pub partial: Vec<&'a PointCloud>,
    pub complete: Vec<&'a PointCloud>,
    pub categories: Vec<&'a str>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        let indices = self.plan.next()?;
        let pick = |i: &usize| &self.data.samples[*i];
        Some(Batch {
            partial: indices.iter().map(|i| &pick(i).partial).collect(),
            complete: indices.iter().map(|i| &pick(i).complete).collect(),
            categories: indices.iter().map(|i| pick(i).category.as_str()).collect(),
            indices,
        })
    }
}

/// One line of a manifest; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub partial: PathBuf,
    pub complete: PathBuf,
    pub category: String,
}

/// A tab-separated list of `partial<TAB>complete<TAB>category` records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", i + 1),
                detail,
            };
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            if fields[2].trim().is_empty() {
                return Err(err("empty category".into()));
            }
            records.push(ManifestRecord {
                partial: PathBuf::from(fields[0]),
                complete: PathBuf::from(fields[1]),
                category: fields[2].trim().to_string(),
            });
        }
        Ok(Manifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                r.partial.display(),
                r.complete.display(),
                r.category
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads every record. Both clouds are normalized with the transform of
    /// the complete cloud, so they stay aligned, then resampled to the
    /// requested sizes (when given) with a generator seeded per record.
    pub fn load(&self, n_partial: Option<usize>, n_complete: Option<usize>, seed: u64) -> Result<Dataset> {
        self.load_with(n_partial, n_complete, seed, true)
    }

    /// Reads every cloud as stored, without normalization or resampling.
    pub fn load_raw(&self) -> Result<Dataset> {
        self.load_with(None, None, 0, false)
    }

    fn load_with(
        &self,
        n_partial: Option<usize>,
        n_complete: Option<usize>,
        seed: u64,
        normalized: bool,
    ) -> Result<Dataset> {
        let samples = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let read = |rel: &Path| {
                    let p = self.root.join(rel);
                    parse_cloud(&p, CloudFormat::from_path(&p))
                };
                let complete = read(&r.complete)?;
                let partial = read(&r.partial)?;
                let (mut complete, mut partial) = if normalized {
                    let t = normalization_of(&complete)?;
                    (t.apply(&complete), t.apply(&partial))
                } else {
                    (complete, partial)
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                if let Some(n) = n_complete {
                    complete = resample(&complete, n, &mut rng)?;
                }
                if let Some(n) = n_partial {
                    partial = resample(&partial, n, &mut rng)?;
                }
                Ok(Sample {
                    partial,
                    complete,
                    category: r.category.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }
}

/// Writes a dataset under `dir` as `partial/NNNNN.<ext>`,
/// `complete/NNNNN.<ext>` and `manifest.tsv`; returns the manifest path.
pub fn write_dataset(dir: &Path, data: &Dataset, format: CloudFormat) -> Result<PathBuf> {
    for sub in ["partial", "complete"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let name = format!("{i:05}.{}", format.extension());
        let partial = Path::new("partial").join(&name);
        let complete = Path::new("complete").join(&name);
        write_cloud(&dir.join(&partial), &s.partial, format)?;
        write_cloud(&dir.join(&complete), &s.complete, format)?;
        records.push(ManifestRecord {
            partial,
            complete,
            category: s.category.clone(),
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    let path = dir.join("manifest.tsv");
    manifest.write(&path)?;
    Ok(path)
}
