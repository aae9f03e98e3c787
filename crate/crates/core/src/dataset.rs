//! Labelled image datasets and the `VVBD` file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VVBD" | version u32 | count u32 | resolution u32 | channels u32 (=4)
//!        | task u8 | class count u16
//! per image: label u16 | [θ f64, φ f64 when the task carries angles]
//!            | s1, s2, s3, intensity planes as f32, row-major
//! trailer:   length u32 | UTF-8 key=value provenance lines
//! ```
//!
//! Images are held at `f32` precision in memory as well, so a save/load
//! round trip is bit-exact.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{self, NoiseConfig};
use crate::optics::{GridSpec, StokesImage, VvbState};
use crate::rng::{mix, stream, Stage};
use crate::sphere::{self, SECTOR_COUNT};

pub const MAGIC: [u8; 4] = *b"VVBD";
pub const FORMAT_VERSION: u32 = 1;
pub const CHANNELS: u32 = 4;

/// OAM values reachable by the five-step walk.
pub const OAM_VALUES: [i32; 6] = [-5, -3, -1, 1, 3, 5];
/// OAM pair of the sphere used for sector and regression tasks.
pub const SPHERE_PAIR: (i32, i32) = (-1, 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Class15,
    Sector26,
    Regression,
}

impl Task {
    pub fn tag(self) -> u8 {
        match self {
            Task::Class15 => 0,
            Task::Sector26 => 1,
            Task::Regression => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Task::Class15),
            1 => Ok(Task::Sector26),
            2 => Ok(Task::Regression),
            t => Err(Error::Format(format!("unknown task tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Class15 => "class15",
            Task::Sector26 => "sector26",
            Task::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "class15" => Some(Task::Class15),
            "sector26" => Some(Task::Sector26),
            "regression" => Some(Task::Regression),
            _ => None,
        }
    }

    /// Whether samples carry their true `(θ, φ)`.
    pub fn has_angles(self) -> bool {
        !matches!(self, Task::Class15)
    }
}

/// The 15 unordered pairs from [`OAM_VALUES`], each as `(m1, m2)` with
/// `m1 < m2`, in lexicographic order.
pub fn class15_pairs() -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(15);
    for (i, &a) in OAM_VALUES.iter().enumerate() {
        for &b in &OAM_VALUES[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpec {
    task: Task,
    class_list: Vec<(i32, i32)>,
}

impl LabelSpec {
    pub fn class15() -> Self {
        Self {
            task: Task::Class15,
            class_list: class15_pairs(),
        }
    }

    pub fn sector26() -> Self {
        Self {
            task: Task::Sector26,
            class_list: Vec::new(),
        }
    }

    pub fn regression() -> Self {
        Self {
            task: Task::Regression,
            class_list: Vec::new(),
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Class15 => Self::class15(),
            Task::Sector26 => Self::sector26(),
            Task::Regression => Self::regression(),
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn class_list(&self) -> &[(i32, i32)] {
        &self.class_list
    }

    /// Zero for regression.
    pub fn class_count(&self) -> usize {
        match self.task {
            Task::Class15 => self.class_list.len(),
            Task::Sector26 => SECTOR_COUNT,
            Task::Regression => 0,
        }
    }

    pub fn class_name(&self, class: usize) -> String {
        match self.task {
            Task::Class15 => {
                let (a, b) = self.class_list[class];
                format!("({a},{b})")
            }
            _ => format!("{class}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "all" => Some(Split::All),
            _ => None,
        }
    }
}

/// How a dataset was produced. Sample `k` was generated with sample index
/// `index_offset + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub grid: GridSpec,
    pub noise: NoiseConfig,
    pub seed: u64,
    pub split: Split,
    pub per_class: usize,
    pub index_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: StokesImage,
    pub label: u16,
    pub angles: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    label_spec: LabelSpec,
    provenance: Provenance,
}

impl Dataset {
    /// Images are rounded to `f32` precision.
    pub fn new(samples: Vec<Sample>, label_spec: LabelSpec, provenance: Provenance) -> Result<Self> {
        let res = provenance.grid.resolution();
        let classes = label_spec.class_count();
        let has_angles = label_spec.task().has_angles();
        for (k, s) in samples.iter().enumerate() {
            if s.image.resolution() != res {
                return Err(Error::shape(
                    format!("resolution {res}"),
                    format!("sample {k} at {}", s.image.resolution()),
                ));
            }
            if classes > 0 && s.label as usize >= classes {
                return Err(Error::domain(format!(
                    "sample {k} label {} >= class count {classes}",
                    s.label
                )));
            }
            if s.angles.is_some() != has_angles {
                return Err(Error::domain(format!(
                    "sample {k}: angle labels do not match task {}",
                    label_spec.task().name()
                )));
            }
        }
        let samples = samples
            .into_iter()
            .map(|s| Sample {
                image: s.image.quantized(),
                ..s
            })
            .collect();
        Ok(Self {
            samples,
            label_spec,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn images(&self) -> impl Iterator<Item = &StokesImage> {
        self.samples.iter().map(|s| &s.image)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label as usize).collect()
    }

    pub fn label_spec(&self) -> &LabelSpec {
        &self.label_spec
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn resolution(&self) -> usize {
        self.provenance.grid.resolution()
    }

    pub fn class_count(&self) -> usize {
        self.label_spec.class_count()
    }

    /// Sample index each record was generated with.
    pub fn sample_index(&self, k: usize) -> u64 {
        self.provenance.index_offset + k as u64
    }

    /// Subset with the given record positions, in that order.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        Dataset {
            samples: positions.iter().map(|&k| self.samples[k].clone()).collect(),
            label_spec: self.label_spec.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Deterministic stratified halving: within each class, a seeded
    /// permutation sends the first half to the first split.
    pub fn split_half(&self, seed: u64) -> (Dataset, Dataset) {
        let classes = self.class_count().max(1);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for c in 0..classes {
            let mut members: Vec<usize> = (0..self.len())
                .filter(|&k| self.class_count() == 0 || self.samples[k].label as usize == c)
                .collect();
            let mut rng = stream(seed, c as u64, Stage::Split);
            for i in (1..members.len()).rev() {
                let j = rng.gen_range(0..=i);
                members.swap(i, j);
            }
            let half = members.len() / 2;
            let (a, b) = members.split_at(half);
            let mut a = a.to_vec();
            let mut b = b.to_vec();
            a.sort_unstable();
            b.sort_unstable();
            first.extend(a);
            second.extend(b);
        }
        first.sort_unstable();
        second.sort_unstable();
        (self.subset(&first), self.subset(&second))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("vvbd.tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let task = self.label_spec.task();
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.resolution() as u32).to_le_bytes())?;
        w.write_all(&CHANNELS.to_le_bytes())?;
        w.write_all(&[task.tag()])?;
        w.write_all(&(self.class_count() as u16).to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * 4 * self.resolution() * self.resolution());
        for s in &self.samples {
            w.write_all(&s.label.to_le_bytes())?;
            if let Some((theta, phi)) = s.angles {
                w.write_all(&theta.to_le_bytes())?;
                w.write_all(&phi.to_le_bytes())?;
            }
            buf.clear();
            for plane in s.image.planes() {
                for &v in plane {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        let meta = self.provenance_text();
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::Magic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = read_u32(r, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let count = read_u32(r, "image count")? as usize;
        let res = read_u32(r, "resolution")? as usize;
        let channels = read_u32(r, "channel count")?;
        if channels != CHANNELS {
            return Err(Error::Format(format!("{channels} channels, expected {CHANNELS}")));
        }
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag, "task tag")?;
        let task = Task::from_tag(tag[0])?;
        let mut cc = [0u8; 2];
        read_exact(r, &mut cc, "class count")?;
        let class_count = u16::from_le_bytes(cc) as usize;

        let npix = res * res;
        let mut plane_bytes = vec![0u8; 4 * npix * CHANNELS as usize];
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            let mut lb = [0u8; 2];
            read_exact(r, &mut lb, "label")?;
            let label = u16::from_le_bytes(lb);
            let angles = if task.has_angles() {
                Some((read_f64(r, "theta")?, read_f64(r, "phi")?))
            } else {
                None
            };
            read_exact(r, &mut plane_bytes, &format!("pixels of image {k}"))?;
            let mut planes = plane_bytes
                .chunks_exact(4 * npix)
                .map(|chunk| {
                    chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                        .collect::<Vec<f64>>()
                });
            let (s1, s2, s3, i) = (
                planes.next().unwrap(),
                planes.next().unwrap(),
                planes.next().unwrap(),
                planes.next().unwrap(),
            );
            samples.push(Sample {
                image: StokesImage::new(res, s1, s2, s3, i)?,
                label,
                angles,
            });
        }
        let meta_len = read_u32(r, "provenance length")? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta, "provenance")?;
        let mut rest = [0u8; 1];
        match r.read(&mut rest) {
            Ok(0) => {}
            Ok(_) => return Err(Error::Format("trailing bytes after provenance".into())),
            Err(e) => return Err(Error::Format(e.to_string())),
        }
        let meta =
            String::from_utf8(meta).map_err(|_| Error::Format("provenance is not UTF-8".into()))?;
        let (label_spec, provenance) = parse_provenance(&meta, task)?;
        if provenance.grid.resolution() != res {
            return Err(Error::Format(format!(
                "provenance resolution {} disagrees with header {res}",
                provenance.grid.resolution()
            )));
        }
        if label_spec.class_count() != class_count {
            return Err(Error::Format(format!(
                "header class count {class_count} disagrees with task {}",
                task.name()
            )));
        }
        Dataset::new(samples, label_spec, provenance)
    }

    fn provenance_text(&self) -> String {
        let p = &self.provenance;
        let n = &p.noise;
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.label_spec.task().name());
        if !self.label_spec.class_list.is_empty() {
            let classes: Vec<String> = self
                .label_spec
                .class_list
                .iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect();
            let _ = writeln!(s, "classes={}", classes.join(","));
        }
        let _ = writeln!(s, "grid.resolution={}", p.grid.resolution());
        let _ = writeln!(s, "grid.half_extent={:?}", p.grid.half_extent());
        let _ = writeln!(s, "grid.waist={:?}", p.grid.waist());
        let _ = writeln!(s, "noise.seed={}", n.seed);
        let _ = writeln!(s, "noise.center_jitter_sigma={:?}", n.center_jitter_sigma);
        let _ = writeln!(s, "noise.waist_jitter_rel={:?}", n.waist_jitter_rel);
        let _ = writeln!(s, "noise.impurity_eps={:?}", n.impurity_eps);
        let _ = writeln!(s, "noise.pol_crosstalk_rad={:?}", n.pol_crosstalk_rad);
        let _ = writeln!(s, "noise.intensity_noise_rel={:?}", n.intensity_noise_rel);
        let _ = writeln!(s, "noise.background_rel={:?}", n.background_rel);
        let _ = writeln!(s, "seed={}", p.seed);
        let _ = writeln!(s, "split={}", p.split.name());
        let _ = writeln!(s, "per_class={}", p.per_class);
        let _ = writeln!(s, "index_offset={}", p.index_offset);
        s
    }
}

fn parse_provenance(text: &str, task: Task) -> Result<(LabelSpec, Provenance)> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad provenance line {line:?}")))?;
        map.insert(k.trim(), v.trim());
    }
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("provenance lacks {k}")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Format(format!("provenance {k}={v:?} does not parse")))
    }
    let f = |k: &str| -> Result<f64> { num(k, get(k)?) };
    let u = |k: &str| -> Result<u64> { num(k, get(k)?) };

    if get("task")? != task.name() {
        return Err(Error::Format("provenance task disagrees with header".into()));
    }
    let mut label_spec = LabelSpec::for_task(task);
    if task == Task::Class15 {
        let classes = get("classes")?
            .split(',')
            .map(|pair| {
                let (a, b) = pair
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("bad class {pair:?}")))?;
                Ok((num("classes", a)?, num("classes", b)?))
            })
            .collect::<Result<Vec<(i32, i32)>>>()?;
        label_spec.class_list = classes;
    }
    let grid = GridSpec::new(
        u("grid.resolution")? as usize,
        f("grid.half_extent")?,
        f("grid.waist")?,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    let noise = NoiseConfig {
        seed: u("noise.seed")?,
        center_jitter_sigma: f("noise.center_jitter_sigma")?,
        waist_jitter_rel: f("noise.waist_jitter_rel")?,
        impurity_eps: f("noise.impurity_eps")?,
        pol_crosstalk_rad: f("noise.pol_crosstalk_rad")?,
        intensity_noise_rel: f("noise.intensity_noise_rel")?,
        background_rel: f("noise.background_rel")?,
    };
    let split = Split::parse(get("split")?)
        .ok_or_else(|| Error::Format("unknown split in provenance".into()))?;
    Ok((
        label_spec,
        Provenance {
            grid,
            noise,
            seed: u("seed")?,
            split,
            per_class: u("per_class")? as usize,
            index_offset: u("index_offset")?,
        },
    ))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("file ends inside {what}")),
        _ => Error::Format(format!("reading {what}: {e}")),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// Noise configuration actually applied to a dataset drawn with `seed`.
fn dataset_noise(cfg: &NoiseConfig, seed: u64) -> NoiseConfig {
    NoiseConfig {
        seed: mix(cfg.seed, seed),
        ..*cfg
    }
}

struct Job {
    label: u16,
    state: VvbState,
    angles: Option<(f64, f64)>,
    index: u64,
}

fn render_jobs(
    jobs: Vec<Job>,
    spec: LabelSpec,
    cfg: &NoiseConfig,
    grid: &GridSpec,
    provenance: Provenance,
) -> Result<Dataset> {
    let samples = jobs
        .par_iter()
        .map(|job| {
            let image = noise::observe(&job.state, grid, cfg, job.index)?;
            Ok(Sample {
                image,
                label: job.label,
                angles: job.angles,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, spec, provenance)
}

fn check_counts(n_train: usize, n_val: usize) -> Result<()> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::domain("per-class counts must be >= 1"));
    }
    Ok(())
}

/// Fifteen `(m1, m2)` classes at θ = π/2 with φ uniform in `[0, 2π)`.
/// Returns `(train, val)`; samples are ordered by class.
pub fn generate_class15(
    n_train_per_class: usize,
    n_val_per_class: usize,
    cfg: &NoiseConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_counts(n_train_per_class, n_val_per_class)?;
    cfg.validate()?;
    let noise_cfg = dataset_noise(cfg, seed);
    let pairs = class15_pairs();
    let val_offset = (pairs.len() * n_train_per_class) as u64;
    let split = |per_class: usize, offset: u64, split: Split| -> Result<Dataset> {
        let mut jobs = Vec::with_capacity(pairs.len() * per_class);
        for (c, &(m1, m2)) in pairs.iter().enumerate() {
            for i in 0..per_class {
                let index = offset + (c * per_class + i) as u64;
                let phi = stream(seed, index, Stage::State).gen_range(0.0..TAU);
                jobs.push(Job {
                    label: c as u16,
                    state: VvbState::new(m1, m2, FRAC_PI_2, phi)?,
                    angles: None,
                    index,
                });
            }
        }
        let provenance = Provenance {
            grid: *grid,
            noise: noise_cfg,
            seed,
            split,
            per_class,
            index_offset: offset,
        };
        render_jobs(jobs, LabelSpec::class15(), &noise_cfg, grid, provenance)
    };
    Ok((
        split(n_train_per_class, 0, Split::Train)?,
        split(n_val_per_class, val_offset, Split::Val)?,
    ))
}

/// `(θ, φ)` uniform in solid angle over one sector.
pub fn sample_in_sector<R: Rng>(rng: &mut R, sector: usize) -> (f64, f64) {
    let (tl, th, pl, ph) = sphere::sector_bounds(sector).expect("valid sector");
    loop {
        let u = rng.gen_range(th.cos()..=tl.cos());
        let theta = u.clamp(-1.0, 1.0).acos();
        let phi = rng.gen_range(pl..ph);
        if sphere::sector_index(theta, phi).ok() == Some(sector) {
            return (theta, phi);
        }
    }
}

/// States of the `m2 = -m1 = 1` sphere, uniform within each of the 26 sectors.
pub fn generate_sector26(
    n_train_per_class: usize,
    n_val_per_class: usize,
    cfg: &NoiseConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    check_counts(n_train_per_class, n_val_per_class)?;
    cfg.validate()?;
    let noise_cfg = dataset_noise(cfg, seed);
    let val_offset = (SECTOR_COUNT * n_train_per_class) as u64;
    let split = |per_class: usize, offset: u64, split: Split| -> Result<Dataset> {
        let mut jobs = Vec::with_capacity(SECTOR_COUNT * per_class);
        for c in 0..SECTOR_COUNT {
            for i in 0..per_class {
                let index = offset + (c * per_class + i) as u64;
                let (theta, phi) = sample_in_sector(&mut stream(seed, index, Stage::State), c);
                jobs.push(Job {
                    label: c as u16,
                    state: VvbState::new(SPHERE_PAIR.0, SPHERE_PAIR.1, theta, phi)?,
                    angles: Some((theta, phi)),
                    index,
                });
            }
        }
        let provenance = Provenance {
            grid: *grid,
            noise: noise_cfg,
            seed,
            split,
            per_class,
            index_offset: offset,
        };
        render_jobs(jobs, LabelSpec::sector26(), &noise_cfg, grid, provenance)
    };
    Ok((
        split(n_train_per_class, 0, Split::Train)?,
        split(n_val_per_class, val_offset, Split::Val)?,
    ))
}

/// `count` states of the `m2 = -m1 = 1` sphere drawn uniformly over the whole
/// sphere, labelled with their true angles.
pub fn generate_sphere(
    count: usize,
    cfg: &NoiseConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::domain("count must be >= 1"));
    }
    cfg.validate()?;
    let noise_cfg = dataset_noise(cfg, seed);
    let jobs = (0..count as u64)
        .map(|index| {
            let mut rng = stream(seed, index, Stage::State);
            let theta = rng.gen_range(-1.0f64..=1.0).acos();
            let phi = rng.gen_range(0.0..TAU);
            Ok(Job {
                label: 0,
                state: VvbState::new(SPHERE_PAIR.0, SPHERE_PAIR.1, theta.min(PI), phi)?,
                angles: Some((theta.min(PI), phi)),
                index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let provenance = Provenance {
        grid: *grid,
        noise: noise_cfg,
        seed,
        split: Split::All,
        per_class: count,
        index_offset: 0,
    };
    render_jobs(jobs, LabelSpec::regression(), &noise_cfg, grid, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{render, stokes};
    use std::collections::HashSet;
    use std::f64::consts::FRAC_PI_8;

    fn small_grid() -> GridSpec {
        GridSpec::new(16, 4.0, 1.0).unwrap()
    }

    #[test]
    fn class_list_is_canonical() {
        let pairs = class15_pairs();
        assert_eq!(pairs.len(), 15);
        assert_eq!(pairs[0], (-5, -3));
        assert_eq!(pairs[14], (3, 5));
        assert!(pairs.iter().all(|(a, b)| a < b));
        let unique: HashSet<_> = pairs.iter().collect();
        assert_eq!(unique.len(), 15);
        assert_eq!(LabelSpec::sector26().class_count(), 26);
    }

    #[test]
    fn class15_sizes_balance_and_disjointness() {
        let (train, val) =
            generate_class15(3, 2, &NoiseConfig::none(0), &small_grid(), 5).unwrap();
        assert_eq!(train.len(), 45);
        assert_eq!(val.len(), 30);
        for c in 0..15 {
            assert_eq!(train.labels().iter().filter(|&&l| l == c).count(), 3);
            assert_eq!(val.labels().iter().filter(|&&l| l == c).count(), 2);
        }
        let a: HashSet<u64> = (0..train.len()).map(|k| train.sample_index(k)).collect();
        let b: HashSet<u64> = (0..val.len()).map(|k| val.sample_index(k)).collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn class15_clean_samples_match_templates() {
        // φ rotates the pattern, so each class contributes templates on a
        // fine φ grid and the nearest one over all φ decides
        let grid = small_grid();
        let (train, _) = generate_class15(1, 1, &NoiseConfig::none(0), &grid, 9).unwrap();
        let steps = 720;
        let templates: Vec<(usize, StokesImage)> = class15_pairs()
            .iter()
            .enumerate()
            .flat_map(|(c, &(a, b))| {
                (0..steps).map(move |t| {
                    let phi = TAU * t as f64 / steps as f64;
                    let st = VvbState::new(a, b, FRAC_PI_2, phi).unwrap();
                    (c, stokes(&render(&st, &grid)))
                })
            })
            .collect();
        assert_eq!(train.len(), 15);
        for s in train.samples() {
            let dist = |t: &StokesImage| -> f64 {
                t.planes()
                    .iter()
                    .zip(s.image.planes().iter())
                    .flat_map(|(a, b)| a.iter().zip(b.iter()))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let best = templates
                .iter()
                .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
                .unwrap();
            assert_eq!(best.0, s.label as usize);
        }
    }

    #[test]
    fn sector26_labels_match_geometry() {
        let (train, val) =
            generate_sector26(4, 2, &NoiseConfig::none(0), &small_grid(), 1).unwrap();
        assert_eq!(train.len(), 104);
        assert_eq!(val.len(), 52);
        for s in train.samples().iter().chain(val.samples()) {
            let (t, p) = s.angles.unwrap();
            assert_eq!(sphere::sector_index(t, p).unwrap(), s.label as usize);
            if s.label == 0 {
                assert!(t <= FRAC_PI_8);
            }
            if s.label == 25 {
                assert!(t >= 7.0 * FRAC_PI_8);
            }
        }
    }

    #[test]
    fn sector_sampling_is_uniform_in_solid_angle() {
        let mut rng = stream(3, 0, Stage::State);
        let n = 20_000;
        let (tl, th, _, _) = sphere::sector_bounds(9).unwrap();
        let mid = ((tl.cos() + th.cos()) / 2.0).acos();
        let upper = (0..n)
            .filter(|_| sample_in_sector(&mut rng, 9).0 < mid)
            .count();
        let frac = upper as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = NoiseConfig::labproxy(2);
        let (a, _) = generate_class15(1, 1, &cfg, &small_grid(), 3).unwrap();
        let (b, _) = generate_class15(1, 1, &cfg, &small_grid(), 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let (c, _) = generate_class15(1, 1, &cfg, &small_grid(), 4).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (ds, _) = generate_sector26(1, 1, &NoiseConfig::labproxy(1), &small_grid(), 2).unwrap();
        let ds = ds.subset(&(0..10).collect::<Vec<_>>());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.vvbd");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.images().zip(ds.images()) {
            for (pa, pb) in a.planes().iter().zip(b.planes().iter()) {
                assert!(pa.iter().zip(pb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_distinct_errors() {
        let (ds, _) = generate_class15(1, 1, &NoiseConfig::none(0), &small_grid(), 0).unwrap();
        let bytes = ds.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::read_from(&mut bad.as_slice()),
            Err(Error::Magic { .. })
        ));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&7u32.to_le_bytes());
        match Dataset::read_from(&mut future.as_slice()) {
            Err(e @ Error::Version { found: 7, supported: 1 }) => {
                let msg = e.to_string();
                assert!(msg.contains('7') && msg.contains('1'));
            }
            other => panic!("expected version error, got {other:?}"),
        }

        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            Dataset::read_from(&mut &cut[..]),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn header_layout() {
        let (ds, _) = generate_sector26(1, 1, &NoiseConfig::none(0), &small_grid(), 0).unwrap();
        let b = ds.to_bytes();
        assert_eq!(&b[0..4], b"VVBD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 26);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 4);
        assert_eq!(b[20], 1);
        assert_eq!(u16::from_le_bytes(b[21..23].try_into().unwrap()), 26);
        // first record: label 0, θ, φ, then 4 f32 planes
        assert_eq!(u16::from_le_bytes(b[23..25].try_into().unwrap()), 0);
        let theta = f64::from_le_bytes(b[25..33].try_into().unwrap());
        assert_eq!(theta, ds.samples()[0].angles.unwrap().0);
    }

    #[test]
    fn split_half_is_stratified() {
        let (ds, _) = generate_class15(4, 1, &NoiseConfig::none(0), &small_grid(), 0).unwrap();
        let (a, b) = ds.split_half(1);
        assert_eq!(a.len(), 30);
        assert_eq!(b.len(), 30);
        for c in 0..15 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 2);
        }
    }

    #[test]
    fn sphere_dataset_has_angles() {
        let ds = generate_sphere(5, &NoiseConfig::none(0), &small_grid(), 0).unwrap();
        assert_eq!(ds.len(), 5);
        assert!(ds.samples().iter().all(|s| s.angles.is_some()));
        assert_eq!(ds.class_count(), 0);
    }
}
