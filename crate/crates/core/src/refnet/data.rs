//! Synthetic binary classification tasks sharing one input space.
//!
//! Every task draws a two-dimensional pattern and writes it into its own
//! pair of input coordinates; the remaining coordinates carry isotropic
//! background noise. Tasks therefore share input width and class count but
//! depend on different features, so a network fine-tuned on one task is
//! near chance on another.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_SIZE: usize = 600;
pub const VAL_SIZE: usize = 200;
pub const TEST_SIZE: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Moons,
    Blobs,
    Rings,
    XorGrid,
    /// Moons rotated counter-clockwise by the given angle in degrees.
    RotatedMoons(f64),
}

impl TaskKind {
    /// Index of the coordinate pair holding this task's signal.
    fn slot(self) -> usize {
        match self {
            Self::Moons | Self::RotatedMoons(_) => 0,
            Self::Blobs => 1,
            Self::Rings => 2,
            Self::XorGrid => 3,
        }
    }

    fn sample(self, class: usize, rng: &mut ChaCha8Rng) -> [f64; 2] {
        match self {
            Self::Moons => moon_point(class, rng),
            Self::RotatedMoons(deg) => {
                let [x, y] = moon_point(class, rng);
                let (s, c) = deg.to_radians().sin_cos();
                [c * x - s * y, s * x + c * y]
            }
            Self::Blobs => {
                let centre = if class == 0 { -0.9 } else { 0.9 };
                let noise = Normal::new(0.0, 0.35).expect("valid");
                [centre + noise.sample(rng), centre + noise.sample(rng)]
            }
            Self::Rings => {
                let radius = if class == 0 { 0.5 } else { 1.5 };
                let r = radius + Normal::new(0.0, 0.12).expect("valid").sample(rng);
                let t = rng.random_range(0.0..2.0 * PI);
                [r * t.cos(), r * t.sin()]
            }
            Self::XorGrid => {
                // class 0 in quadrants I/III, class 1 in II/IV, away from the axes
                let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let sy = if class == 0 { sx } else { -sx };
                let mag = |rng: &mut ChaCha8Rng| rng.random_range(0.15..1.2);
                [sx * mag(rng), sy * mag(rng)]
            }
        }
    }
}

fn moon_point(class: usize, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let t = rng.random_range(0.0..PI);
    let noise = Normal::new(0.0, 0.1).expect("valid");
    let (x, y) = if class == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    // centre the pair of moons on the origin
    [x - 0.5 + noise.sample(rng), y - 0.25 + noise.sample(rng)]
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Moons => f.write_str("moons"),
            Self::Blobs => f.write_str("blobs"),
            Self::Rings => f.write_str("rings"),
            Self::XorGrid => f.write_str("xor-grid"),
            Self::RotatedMoons(a) => write!(f, "rotated-moons({a})"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "moons" => Ok(Self::Moons),
            "blobs" => Ok(Self::Blobs),
            "rings" => Ok(Self::Rings),
            "xor-grid" => Ok(Self::XorGrid),
            _ => s
                .strip_prefix("rotated-moons(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|a| a.trim().parse::<f64>().ok())
                .filter(|a| a.is_finite())
                .map(Self::RotatedMoons)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown task kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Labeled samples of one split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub split: Split,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        task_id: impl Into<String>,
        split: Split,
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self {
            task_id: task_id.into(),
            split,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                counts[y] += 1;
            }
        }
        counts
    }
}

/// The three splits of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes all three splits as `task_id,split,label,f0,...` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let dim = self.train.input_dim().unwrap_or(0);
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["task_id".to_string(), "split".into(), "label".into()];
        header.extend((0..dim).map(|i| format!("f{i}")));
        out.write_record(&header)?;
        for ds in [&self.train, &self.val, &self.test] {
            for (x, y) in ds.inputs.iter().zip(&ds.labels) {
                let mut row = vec![ds.task_id.clone(), ds.split.to_string(), y.to_string()];
                row.extend(x.iter().map(|v| format!("{v:.16e}")));
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() < 4 || &header[0] != "task_id" || &header[1] != "split" || &header[2] != "label" {
            return Err(Error::Format("expected header task_id,split,label,f0,...".into()));
        }
        for (i, h) in header.iter().skip(3).enumerate() {
            if h != format!("f{i}") {
                return Err(Error::Format(format!("feature column {i} is named `{h}`")));
            }
        }
        let mut task_id: Option<String> = None;
        let mut splits: [(Vec<Vec<f64>>, Vec<usize>); 3] = Default::default();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = &rec[0];
            match &task_id {
                None => task_id = Some(id.to_string()),
                Some(t) if t != id => {
                    return Err(Error::Format(format!(
                        "row {}: mixed task ids `{t}` and `{id}`",
                        line + 2
                    )))
                }
                _ => {}
            }
            let idx = match rec[1].parse::<Split>()? {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            let label = rec[2]
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("row {}: bad label `{}`", line + 2, &rec[2])))?;
            let x = rec
                .iter()
                .skip(3)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {}: bad feature `{v}`", line + 2)))
                })
                .collect::<Result<Vec<f64>>>()?;
            splits[idx].0.push(x);
            splits[idx].1.push(label);
        }
        let task_id = task_id.ok_or_else(|| Error::Format("no samples".into()))?;
        let [train, val, test] = splits;
        Ok(Self {
            train: Dataset::new(&task_id, Split::Train, train.0, train.1)?,
            val: Dataset::new(&task_id, Split::Val, val.0, val.1)?,
            test: Dataset::new(&task_id, Split::Test, test.0, test.1)?,
            task_id,
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = File::create(path)?;
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }
}

/// Shared input space for a family of tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpace {
    /// Input width, between 2 and 8.
    pub input_dim: usize,
    /// Standard deviation of the coordinates outside a task's own pair.
    pub background: f64,
}

impl Default for TaskSpace {
    fn default() -> Self {
        Self {
            input_dim: 8,
            background: 0.1,
        }
    }
}

/// Generates a task in the default eight-dimensional space.
pub fn make_task(kind: TaskKind, seed: u64) -> Result<TaskData> {
    make_task_in(kind, seed, &TaskSpace::default())
}

pub fn make_task_in(kind: TaskKind, seed: u64, space: &TaskSpace) -> Result<TaskData> {
    if !(2..=8).contains(&space.input_dim) {
        return Err(Error::InvalidArgument(format!(
            "input_dim must be in 2..=8, got {}",
            space.input_dim
        )));
    }
    if !(space.background >= 0.0 && space.background.is_finite()) {
        return Err(Error::InvalidArgument("background noise must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task_id = kind.to_string();
    let d = space.input_dim;
    let first = (2 * kind.slot()) % d;
    let second = (2 * kind.slot() + 1) % d;
    let background = Normal::new(0.0, space.background).expect("checked");
    let mut split = |split: Split, n: usize| {
        let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        labels.shuffle(&mut rng);
        let inputs = labels
            .iter()
            .map(|&y| {
                let mut x: Vec<f64> = (0..d).map(|_| background.sample(&mut rng)).collect();
                let [a, b] = kind.sample(y, &mut rng);
                x[first] = a;
                x[second] = b;
                x
            })
            .collect();
        Dataset::new(task_id.clone(), split, inputs, labels)
    };
    Ok(TaskData {
        train: split(Split::Train, TRAIN_SIZE)?,
        val: split(Split::Val, VAL_SIZE)?,
        test: split(Split::Test, TEST_SIZE)?,
        task_id,
    })
}
