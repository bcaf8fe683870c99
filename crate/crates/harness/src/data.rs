//! Synthetic datasets: Gaussian-blob classification and blob denoising.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use postprune::io::{format_shape, parse_shape, FormatError};
use postprune::metrics::Orientation;
use postprune::rng::{rng, sub_seed};
use postprune::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HarnessError, Result};

pub const DATA_MAGIC: &str = "PTSD";
pub const DATA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Classification; top-1 accuracy, higher is better.
    Cls,
    /// Denoising; reconstruction MSE, lower is better.
    Den,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Cls, Task::Den];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Den => "den",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            Task::Cls => Orientation::HigherBetter,
            Task::Den => Orientation::LowerBetter,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cls" => Ok(Task::Cls),
            "den" => Ok(Task::Den),
            other => Err(format!("unknown task {other:?} (expected cls or den)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub task: Task,
    /// Number of classes (classification only).
    pub classes: usize,
    /// Square image side; images are single-channel.
    pub side: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl DataSpec {
    pub fn cls() -> Self {
        Self {
            task: Task::Cls,
            classes: 4,
            side: 8,
            train: 512,
            test: 256,
            noise: 0.9,
        }
    }

    pub fn den() -> Self {
        Self {
            task: Task::Den,
            classes: 0,
            side: 8,
            train: 512,
            test: 256,
            noise: 0.3,
        }
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Cls => Self::cls(),
            Task::Den => Self::den(),
        }
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [1, self.side, self.side]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Usage(format!("invalid dataset spec: {m}")));
        if self.side < 4 {
            return bad("image side must be at least 4");
        }
        if self.train == 0 || self.test == 0 {
            return bad("train and test counts must be positive");
        }
        if self.task == Task::Cls && self.classes < 2 {
            return bad("classification needs at least 2 classes");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Images(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of inputs and targets.
    pub fn gather(&self, idx: &[usize]) -> Split {
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Images(t) => Targets::Images(t.gather_batch(idx)),
        };
        Split {
            inputs: self.inputs.gather_batch(idx),
            targets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub seed: u64,
    pub train: Split,
    pub test: Split,
}

fn blob(side: usize, cy: f64, cx: f64, sigma: f64, amp: f64, out: &mut [f64]) {
    for y in 0..side {
        for x in 0..side {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            out[y * side + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Class prototypes: one blob per class at centers spread around a ring.
fn prototypes(spec: &DataSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(sub_seed(seed, "prototypes"));
    let s = spec.side as f64;
    let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
    (0..spec.classes)
        .map(|c| {
            let a = phase + std::f64::consts::TAU * c as f64 / spec.classes as f64;
            let (cy, cx) = (
                (s - 1.0) / 2.0 + 0.3 * s * a.sin(),
                (s - 1.0) / 2.0 + 0.3 * s * a.cos(),
            );
            let mut img = vec![0.0; spec.side * spec.side];
            blob(spec.side, cy, cx, s / 6.0, 1.0, &mut img);
            img
        })
        .collect()
}

fn noise(r: &mut impl Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(r);
    sd * z
}

fn gen_split(spec: &DataSpec, protos: &[Vec<f64>], n: usize, seed: u64) -> Split {
    let mut r = rng(seed);
    let px = spec.side * spec.side;
    let mut x = Vec::with_capacity(n * px);
    match spec.task {
        Task::Cls => {
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = (i + r.random_range(0..spec.classes)) % spec.classes;
                labels.push(c);
                x.extend(protos[c].iter().map(|&v| v + noise(&mut r, spec.noise)));
            }
            let inputs = Tensor::new(vec![n, 1, spec.side, spec.side], x).expect("shape");
            Split {
                inputs,
                targets: Targets::Labels(labels),
            }
        }
        Task::Den => {
            let mut clean = Vec::with_capacity(n * px);
            let s = spec.side as f64;
            for _ in 0..n {
                let mut img = vec![0.0; px];
                for _ in 0..r.random_range(1..=2) {
                    let (cy, cx) = (r.random_range(0.0..s - 1.0), r.random_range(0.0..s - 1.0));
                    let amp = r.random_range(0.5..1.5);
                    blob(spec.side, cy, cx, r.random_range(0.8..2.0), amp, &mut img);
                }
                x.extend(img.iter().map(|&v| v + noise(&mut r, spec.noise)));
                clean.extend(img);
            }
            let shape = vec![n, 1, spec.side, spec.side];
            Split {
                inputs: Tensor::new(shape.clone(), x).expect("shape"),
                targets: Targets::Images(Tensor::new(shape, clean).expect("shape")),
            }
        }
    }
}

/// Deterministic dataset for `spec` and `seed`.
pub fn gen_dataset(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let protos = if spec.task == Task::Cls {
        prototypes(spec, seed)
    } else {
        Vec::new()
    };
    let train = gen_split(spec, &protos, spec.train, sub_seed(seed, "train"));
    let test = gen_split(spec, &protos, spec.test, sub_seed(seed, "test"));
    // stored as f32, so round now to keep in-memory and on-disk data identical
    let round = |s: Split| Split {
        inputs: s.inputs.cast::<f32>().cast(),
        targets: match s.targets {
            Targets::Images(t) => Targets::Images(t.cast::<f32>().cast()),
            l => l,
        },
    };
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train: round(train),
        test: round(test),
    })
}

// ---------------------------------------------------------------------------
// File format: text header, blank line, little-endian blob.

fn put_f32(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_split(out: &mut Vec<u8>, s: &Split) {
    put_f32(out, &s.inputs);
    match &s.targets {
        Targets::Labels(l) => {
            for &c in l {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
        }
        Targets::Images(t) => put_f32(out, t),
    }
}

pub fn write_dataset(d: &Dataset, w: &mut impl Write) -> Result<()> {
    let s = &d.spec;
    let mut out = format!(
        "{DATA_MAGIC} {DATA_VERSION}\ntask {}\nclasses {}\nshape {}\ntrain {}\ntest {}\nnoise {}\nseed {}\n\n",
        s.task,
        s.classes,
        format_shape(&s.sample_shape()),
        s.train,
        s.test,
        s.noise,
        d.seed
    )
    .into_bytes();
    put_split(&mut out, &d.train);
    put_split(&mut out, &d.test);
    w.write_all(&out).map_err(FormatError::Io)?;
    Ok(())
}

fn malformed(line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(FormatError::Malformed {
        line,
        msg: msg.into(),
    })
}

struct Blob<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Blob<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(HarnessError::Format(FormatError::BlobLength {
                expected: end,
                actual: self.bytes.len(),
            }));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Tensor::new(shape, data).expect("shape"))
    }

    fn labels(&mut self, n: usize, classes: usize) -> Result<Vec<usize>> {
        let raw = self.take(4 * n)?;
        raw.chunks_exact(4)
            .map(|b| {
                let c = u32::from_le_bytes(b.try_into().unwrap()) as usize;
                if c < classes {
                    Ok(c)
                } else {
                    Err(malformed(
                        0,
                        format!("label {c} out of range for {classes} classes"),
                    ))
                }
            })
            .collect()
    }
}

pub fn read_dataset(r: &mut impl Read) -> Result<Dataset> {
    let mut reader = BufReader::new(r);
    let mut header = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(FormatError::Io)?;
        if n == 0 {
            return Err(malformed(
                header.len() + 1,
                "missing blank line after header",
            ));
        }
        let t = line.trim_end().to_string();
        if t.is_empty() {
            break;
        }
        header.push(t);
    }
    let first = header.first().ok_or_else(|| malformed(1, "empty header"))?;
    match first.split_once(' ') {
        Some((DATA_MAGIC, v)) if v == DATA_VERSION.to_string() => {}
        Some((DATA_MAGIC, v)) => {
            return Err(HarnessError::Format(FormatError::Version {
                found: v.to_string(),
            }))
        }
        _ => {
            return Err(HarnessError::Format(FormatError::Magic {
                expected: DATA_MAGIC,
                found: first.clone(),
            }))
        }
    }
    let field = |key: &str| -> Result<(usize, &str)> {
        header
            .iter()
            .enumerate()
            .find_map(|(i, l)| {
                l.strip_prefix(key)
                    .and_then(|r| r.strip_prefix(' '))
                    .map(|v| (i + 1, v))
            })
            .ok_or_else(|| malformed(0, format!("missing header field {key:?}")))
    };
    let num = |key: &str| -> Result<usize> {
        let (ln, v) = field(key)?;
        v.parse()
            .map_err(|_| malformed(ln, format!("bad {key} {v:?}")))
    };
    let task: Task = field("task")?
        .1
        .parse()
        .map_err(|e: String| malformed(2, e))?;
    let (ln, shape) = field("shape")?;
    let shape = parse_shape(shape).filter(|s| s.len() == 3 && s[0] == 1 && s[1] == s[2]);
    let side = shape.ok_or_else(|| malformed(ln, "expected shape 1xSxS"))?[1];
    let (ln, noise) = field("noise")?;
    let noise: f64 = noise.parse().map_err(|_| malformed(ln, "bad noise"))?;
    let (ln, seed) = field("seed")?;
    let seed: u64 = seed.parse().map_err(|_| malformed(ln, "bad seed"))?;
    let spec = DataSpec {
        task,
        classes: num("classes")?,
        side,
        train: num("train")?,
        test: num("test")?,
        noise,
    };
    spec.validate().map_err(|e| malformed(0, e.to_string()))?;

    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(FormatError::Io)?;
    let mut blob = Blob {
        bytes: &bytes,
        pos: 0,
    };
    let mut split = |n: usize| -> Result<Split> {
        let inputs = blob.f32s(vec![n, 1, side, side])?;
        let targets = match task {
            Task::Cls => Targets::Labels(blob.labels(n, spec.classes)?),
            Task::Den => Targets::Images(blob.f32s(vec![n, 1, side, side])?),
        };
        Ok(Split { inputs, targets })
    };
    let train = split(spec.train)?;
    let test = split(spec.test)?;
    if blob.pos != bytes.len() {
        return Err(HarnessError::Format(FormatError::BlobLength {
            expected: blob.pos,
            actual: bytes.len(),
        }));
    }
    Ok(Dataset {
        spec,
        seed,
        train,
        test,
    })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf)?;
    fs::write(path, buf).map_err(|e| HarnessError::Format(FormatError::Io(e)))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut f = fs::File::open(path).map_err(|e| HarnessError::Format(FormatError::Io(e)))?;
    read_dataset(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        for spec in [
            DataSpec {
                train: 20,
                test: 10,
                ..DataSpec::cls()
            },
            DataSpec {
                train: 6,
                test: 4,
                ..DataSpec::den()
            },
        ] {
            let d = gen_dataset(&spec, 3).unwrap();
            let mut buf = Vec::new();
            write_dataset(&d, &mut buf).unwrap();
            assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), d);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let d = gen_dataset(
            &DataSpec {
                train: 5,
                test: 5,
                ..DataSpec::cls()
            },
            1,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_dataset(&mut buf.as_slice()),
            Err(HarnessError::Format(FormatError::BlobLength { .. }))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(DataSpec {
            classes: 1,
            ..DataSpec::cls()
        }
        .validate()
        .is_err());
        assert!(DataSpec {
            test: 0,
            ..DataSpec::den()
        }
        .validate()
        .is_err());
        assert!(DataSpec {
            noise: -1.0,
            ..DataSpec::den()
        }
        .validate()
        .is_err());
    }
}
