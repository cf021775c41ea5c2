//! Synthetic few-shot classification tasks with base/new class splits.
//!
//! A class prototype is rendered from the class code through the fixed world
//! map, plus class-specific visual detail and a task-wide offset:
//!
//! ```text
//! μ_y = scale · (A·c_y + detail·ξ_y) + offset·η
//! x   = μ_y + σ_w · ε
//! ```
//!
//! `ξ_y` is invisible to the text side, so fitting it from base-class shots
//! does not transfer to new classes; `η` is shared by every class of a task
//! and does transfer.
//!
//! On disk a dataset is a directory holding `manifest.json` and
//! `samples.csv` (`id,split,class,x0,..,x{d_x-1}`, decimal text).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::ClassSet;
use crate::error::{ModelError, TaskError};
use crate::params::{format_f64, hex, parse_f64};
use crate::rng::{SeedStreams, StreamRng};
use crate::tensor::Tensor;
use crate::world;

pub const DATASET_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";
const SEPARATION_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum ShiftDescriptor {
    #[default]
    None,
    Noise(f64),
    Rotate(f64),
}

impl fmt::Display for ShiftDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Noise(s) => write!(f, "noise:{}", format_f64(*s)),
            Self::Rotate(a) => write!(f, "rotate:{}", format_f64(*a)),
        }
    }
}

impl FromStr for ShiftDescriptor {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TaskError::ShiftDescriptor(s.to_owned());
        let s = s.trim();
        if s == "none" {
            return Ok(Self::None);
        }
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value = parse_f64(value).map_err(|_| bad())?;
        match kind {
            "noise" if value >= 0.0 => Ok(Self::Noise(value)),
            "rotate" => Ok(Self::Rotate(value)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ShiftDescriptor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ShiftDescriptor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub d_x: usize,
    /// Class-code width; must match the encoder's `d_c`.
    pub d_c: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub prototype_scale: f64,
    /// Std of the class-specific, text-invisible prototype component.
    pub class_detail: f64,
    /// Std of the task-wide prototype offset.
    pub task_offset: f64,
    /// Within-class noise per coordinate. When unset it is
    /// `noise_ratio · (min prototype distance) / sqrt(d_x)`.
    pub noise_std: Option<f64>,
    pub noise_ratio: f64,
    pub min_separation: f64,
    pub base_fraction: f64,
    pub shift: ShiftDescriptor,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            d_x: 16,
            d_c: 8,
            shots: 16,
            test_per_class: 50,
            prototype_scale: 1.0,
            class_detail: 0.5,
            task_offset: 1.0,
            noise_std: None,
            noise_ratio: 0.6,
            min_separation: 1.0,
            base_fraction: 0.5,
            shift: ShiftDescriptor::None,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::InvalidSpec(m));
        if self.num_classes < 4 {
            return bad(format!("num_classes must be >= 4, got {}", self.num_classes));
        }
        if self.shots < 1 {
            return bad("shots must be >= 1".into());
        }
        if self.test_per_class < 1 {
            return bad("test_per_class must be >= 1".into());
        }
        if self.d_x < 2 || self.d_c < 1 {
            return bad(format!("need d_x >= 2 and d_c >= 1, got d_x={} d_c={}", self.d_x, self.d_c));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return bad(format!("base_fraction must be in (0, 1), got {}", self.base_fraction));
        }
        let n_base = self.base_count();
        if n_base < 2 || self.num_classes - n_base < 2 {
            return bad(format!(
                "base_fraction {} leaves {} base and {} new classes; need at least 2 of each",
                self.base_fraction,
                n_base,
                self.num_classes - n_base
            ));
        }
        for (name, v) in [
            ("prototype_scale", self.prototype_scale),
            ("class_detail", self.class_detail),
            ("task_offset", self.task_offset),
            ("noise_ratio", self.noise_ratio),
            ("min_separation", self.min_separation),
            ("noise_std", self.noise_std.unwrap_or(0.0)),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.prototype_scale == 0.0 {
            return bad("prototype_scale must be > 0".into());
        }
        Ok(())
    }

    pub fn base_count(&self) -> usize {
        (self.base_fraction * self.num_classes as f64).ceil() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    BaseTrain,
    BaseTest,
    NewTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::BaseTrain, Split::BaseTest, Split::NewTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::BaseTrain => "base-train",
            Split::BaseTest => "base-test",
            Split::NewTest => "new-test",
        }
    }

    pub fn is_test(self) -> bool {
        self != Split::BaseTrain
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub split: Split,
    pub class: usize,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    /// Class codes, ids `0..num_classes`.
    pub classes: ClassSet,
    /// `[num_classes, d_x]`
    pub prototypes: Tensor,
    pub noise_std: f64,
    pub base: Vec<usize>,
    pub new: Vec<usize>,
    pub samples: Vec<Sample>,
    /// Shifts applied after generation, in order.
    pub shifts: Vec<ShiftDescriptor>,
}

fn gaussian_vec(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn min_distance(rows: &Tensor) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..rows.rows() {
        for j in i + 1..rows.rows() {
            let d = rows
                .row_slice(i)
                .iter()
                .zip(rows.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    min
}

pub fn generate(spec: &TaskSpec) -> Result<Dataset, TaskError> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let (n, d_x, d_c) = (spec.num_classes, spec.d_x, spec.d_c);
    let render = world::rendering(d_x, d_c);

    let mut proto_rng = streams.stream("data/prototypes");
    let offset: Vec<f64> = gaussian_vec(&mut proto_rng, d_x).iter().map(|v| v * spec.task_offset).collect();
    let mut best = 0.0f64;
    let mut drawn = None;
    for _ in 0..SEPARATION_ATTEMPTS {
        let codes = Tensor::matrix(n, d_c, gaussian_vec(&mut proto_rng, n * d_c));
        let detail = gaussian_vec(&mut proto_rng, n * d_x);
        let rendered = crate::autodiff::matmul(&codes, &render, false, true);
        let mut protos = rendered.clone();
        for (i, v) in protos.data_mut().iter_mut().enumerate() {
            *v = spec.prototype_scale * (*v + spec.class_detail * detail[i]) + offset[i % d_x];
        }
        let d = min_distance(&protos);
        best = best.max(d);
        if d >= spec.min_separation {
            match ClassSet::new((0..n).collect(), codes.clone()) {
                Ok(classes) => {
                    drawn = Some((classes, protos, d));
                    break;
                }
                Err(ModelError::DegenerateClasses(_)) => continue,
                Err(e) => return Err(TaskError::InvalidSpec(e.to_string())),
            }
        }
    }
    let Some((classes, prototypes, d_min)) = drawn else {
        return Err(TaskError::Separation {
            attempts: SEPARATION_ATTEMPTS,
            min_distance: best,
        });
    };
    let noise_std = spec.noise_std.unwrap_or(spec.noise_ratio * d_min / (d_x as f64).sqrt());

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.stream("data/class-split"));
    let n_base = spec.base_count();
    let mut base = order[..n_base].to_vec();
    let mut new = order[n_base..].to_vec();
    base.sort_unstable();
    new.sort_unstable();

    let mut sample_rng = streams.stream("data/samples");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::new();
    let plan = [
        (Split::BaseTrain, &base, spec.shots),
        (Split::BaseTest, &base, spec.test_per_class),
        (Split::NewTest, &new, spec.test_per_class),
    ];
    for (split, class_list, count) in plan {
        for &class in class_list.iter() {
            for _ in 0..count {
                let features = prototypes
                    .row_slice(class)
                    .iter()
                    .map(|m| m + noise_std * normal.sample(&mut sample_rng))
                    .collect();
                samples.push(Sample {
                    id: samples.len() as u64,
                    split,
                    class,
                    features,
                });
            }
        }
    }

    let ds = Dataset {
        spec: spec.clone(),
        classes,
        prototypes,
        noise_std,
        base,
        new,
        samples,
        shifts: Vec::new(),
    };
    Ok(match spec.shift {
        ShiftDescriptor::None => ds,
        shift => domain_shift(&ds, shift),
    })
}

/// Applies `shift` to every test-split feature vector. Noise shifts reuse one
/// fixed draw scaled by `σ_s`, so shifts of different strength are directly
/// comparable.
pub fn domain_shift(dataset: &Dataset, shift: ShiftDescriptor) -> Dataset {
    let mut out = dataset.clone();
    out.shifts.push(shift);
    let stage = dataset.shifts.len();
    let streams = SeedStreams::new(dataset.spec.seed);
    let d_x = dataset.spec.d_x;
    match shift {
        ShiftDescriptor::None | ShiftDescriptor::Noise(0.0) | ShiftDescriptor::Rotate(0.0) => {}
        ShiftDescriptor::Noise(sigma) => {
            let mut rng = streams.stream(&format!("shift/{stage}/noise"));
            for s in out.samples.iter_mut().filter(|s| s.split.is_test()) {
                for v in s.features.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * e;
                }
            }
        }
        ShiftDescriptor::Rotate(angle) => {
            let mut rng = streams.stream(&format!("shift/{stage}/rotate"));
            let (u, v) = random_plane(&mut rng, d_x);
            let (c, s) = (angle.cos(), angle.sin());
            for sample in out.samples.iter_mut().filter(|s| s.split.is_test()) {
                let x = &mut sample.features;
                let a: f64 = x.iter().zip(&u).map(|(x, u)| x * u).sum();
                let b: f64 = x.iter().zip(&v).map(|(x, v)| x * v).sum();
                let (a2, b2) = (c * a - s * b, s * a + c * b);
                for k in 0..d_x {
                    x[k] += (a2 - a) * u[k] + (b2 - b) * v[k];
                }
            }
        }
    }
    out
}

fn random_plane(rng: &mut StreamRng, d: usize) -> (Vec<f64>, Vec<f64>) {
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut u = gaussian_vec(rng, d);
    normalize(&mut u);
    let mut v = gaussian_vec(rng, d);
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    normalize(&mut v);
    (u, v)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u64,
    spec: TaskSpec,
    noise_std: String,
    classes: ClassLists,
    counts: BTreeMap<String, usize>,
    shifts: Vec<ShiftDescriptor>,
    class_meta: Vec<ClassMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassLists {
    base: Vec<usize>,
    new: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassMeta {
    id: usize,
    embedding: Vec<String>,
    prototype: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Features `[n, d_x]` and dataset-wide class ids of one split.
    pub fn split_arrays(&self, split: Split) -> (Tensor, Vec<usize>) {
        let rows: Vec<&[f64]> = self.split(split).map(|s| s.features.as_slice()).collect();
        let labels = self.split(split).map(|s| s.class).collect();
        (Tensor::from_rows(&rows).expect("non-empty split of uniform width"), labels)
    }

    pub fn base_classes(&self) -> ClassSet {
        self.classes.subset(&self.base).expect("base classes are known")
    }

    pub fn new_classes(&self) -> ClassSet {
        self.classes.subset(&self.new).expect("new classes are known")
    }

    fn manifest_text(&self) -> String {
        let counts = Split::ALL
            .iter()
            .map(|s| (s.as_str().to_owned(), self.count(*s)))
            .collect();
        let class_meta = (0..self.classes.len())
            .map(|i| ClassMeta {
                id: self.classes.ids()[i],
                embedding: self.classes.embeddings().row_slice(i).iter().map(|v| format_f64(*v)).collect(),
                prototype: self.prototypes.row_slice(i).iter().map(|v| format_f64(*v)).collect(),
            })
            .collect();
        let m = Manifest {
            version: DATASET_VERSION,
            spec: self.spec.clone(),
            noise_std: format_f64(self.noise_std),
            classes: ClassLists {
                base: self.base.clone(),
                new: self.new.clone(),
            },
            counts,
            shifts: self.shifts.clone(),
            class_meta,
        };
        let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
        s.push('\n');
        s
    }

    fn samples_text(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_owned(), "split".to_owned(), "class".to_owned()];
        header.extend((0..self.spec.d_x).map(|k| format!("x{k}")));
        w.write_record(&header).expect("in-memory write");
        for s in &self.samples {
            let mut rec = vec![s.id.to_string(), s.split.as_str().to_owned(), s.class.to_string()];
            rec.extend(s.features.iter().map(|v| format_f64(*v)));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// SHA-256 of the on-disk representation.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest_text().as_bytes());
        h.update(self.samples_text().as_bytes());
        hex(&h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), TaskError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TaskError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let m = dir.join(MANIFEST_FILE);
        fs::write(&m, self.manifest_text()).map_err(io(&m))?;
        let s = dir.join(SAMPLES_FILE);
        fs::write(&s, self.samples_text()).map_err(io(&s))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TaskError> {
        let mpath = dir.join(MANIFEST_FILE);
        let spath = dir.join(SAMPLES_FILE);
        let text = fs::read_to_string(&mpath).map_err(|source| TaskError::Io {
            path: mpath.clone(),
            source,
        })?;
        let perr = |path: &Path, line: usize, message: String| TaskError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let m: Manifest = serde_json::from_str(&text).map_err(|e| perr(&mpath, e.line(), e.to_string()))?;
        if m.version != DATASET_VERSION {
            return Err(perr(&mpath, 1, format!("unsupported version {}", m.version)));
        }
        m.spec.validate().map_err(|e| perr(&mpath, 1, e.to_string()))?;
        let spec = m.spec;
        let n = spec.num_classes;
        if m.class_meta.len() != n {
            return Err(perr(&mpath, 1, format!("{} class entries for {n} classes", m.class_meta.len())));
        }
        let mut emb = Vec::with_capacity(n * spec.d_c);
        let mut protos = Vec::with_capacity(n * spec.d_x);
        for (i, c) in m.class_meta.iter().enumerate() {
            if c.id != i || c.embedding.len() != spec.d_c || c.prototype.len() != spec.d_x {
                return Err(perr(&mpath, 1, format!("class entry {i} is malformed")));
            }
            for (src, dst) in [(&c.embedding, &mut emb), (&c.prototype, &mut protos)] {
                for v in src {
                    dst.push(parse_f64(v).map_err(|e| perr(&mpath, 1, format!("class {i}: {e}")))?);
                }
            }
        }
        let classes = ClassSet::new((0..n).collect(), Tensor::matrix(n, spec.d_c, emb))
            .map_err(|e| perr(&mpath, 1, e.to_string()))?;
        let noise_std = parse_f64(&m.noise_std).map_err(|e| perr(&mpath, 1, e))?;
        let base_set: BTreeSet<usize> = m.classes.base.iter().copied().collect();
        let new_set: BTreeSet<usize> = m.classes.new.iter().copied().collect();
        if base_set.len() != m.classes.base.len()
            || new_set.len() != m.classes.new.len()
            || !base_set.is_disjoint(&new_set)
            || base_set.union(&new_set).count() != n
            || base_set.iter().chain(&new_set).any(|&c| c >= n)
        {
            return Err(perr(&mpath, 1, "base/new class lists must partition the classes".into()));
        }

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&spath)
            .map_err(|e| perr(&spath, 1, e.to_string()))?;
        let width = 3 + spec.d_x;
        let header = reader.headers().map_err(|e| perr(&spath, 1, e.to_string()))?;
        if header.len() != width || &header[0] != "id" || &header[1] != "split" || &header[2] != "class" {
            return Err(perr(&spath, 1, format!("expected header id,split,class,x0..x{}", spec.d_x - 1)));
        }
        let mut samples = Vec::new();
        let mut seen = BTreeSet::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                perr(&spath, line, e.to_string())
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != width {
                return Err(perr(&spath, line, format!("expected {width} fields, found {}", rec.len())));
            }
            let id: u64 = rec[0].parse().map_err(|e| perr(&spath, line, format!("id `{}`: {e}", &rec[0])))?;
            if !seen.insert(id) {
                return Err(perr(&spath, line, format!("duplicate sample id {id}")));
            }
            let split: Split = rec[1].parse().map_err(|e| perr(&spath, line, e))?;
            let class: usize = rec[2]
                .parse()
                .map_err(|e| perr(&spath, line, format!("class `{}`: {e}", &rec[2])))?;
            let allowed = match split {
                Split::NewTest => new_set.contains(&class),
                _ => base_set.contains(&class),
            };
            if !allowed {
                return Err(perr(&spath, line, format!("class {class} is not valid for split {}", split.as_str())));
            }
            let features = (3..width)
                .map(|k| parse_f64(&rec[k]))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| perr(&spath, line, e))?;
            samples.push(Sample {
                id,
                split,
                class,
                features,
            });
        }

        let ds = Dataset {
            prototypes: Tensor::matrix(n, spec.d_x, protos),
            spec,
            classes,
            noise_std,
            base: m.classes.base,
            new: m.classes.new,
            samples,
            shifts: m.shifts,
        };
        for split in Split::ALL {
            let expected = m.counts.get(split.as_str()).copied().unwrap_or(0);
            if ds.count(split) != expected {
                return Err(perr(
                    &mpath,
                    1,
                    format!("manifest lists {expected} {} samples, file has {}", split.as_str(), ds.count(split)),
                ));
            }
        }
        for &c in &ds.base {
            let shots = ds.split(Split::BaseTrain).filter(|s| s.class == c).count();
            if shots != ds.spec.shots {
                return Err(perr(&spath, 0, format!("base class {c} has {shots} training samples, expected {}", ds.spec.shots)));
            }
        }
        Ok(ds)
    }

    /// Accuracy (%) of classifying a split by the nearest true prototype.
    pub fn nearest_prototype_accuracy(&self, split: Split) -> f64 {
        let candidates: &[usize] = if split == Split::NewTest { &self.new } else { &self.base };
        let (mut hit, mut total) = (0usize, 0usize);
        for s in self.split(split) {
            let best = candidates
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da: f64 = self.prototypes.row_slice(a).iter().zip(&s.features).map(|(p, x)| (p - x).powi(2)).sum();
                    let db: f64 = self.prototypes.row_slice(b).iter().zip(&s.features).map(|(p, x)| (p - x).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .expect("non-empty candidates");
            hit += (best == s.class) as usize;
            total += 1;
        }
        100.0 * hit as f64 / total as f64
    }
}
