//! Deterministic dataset generation.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::synth::grid::{answer_for, GridWorld, Object, QuestionKind};
use crate::synth::vocab::{COLORS, NUMBERS, SHAPES};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Vqa,
    Caption,
    FrameVqa,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    pub n_train: usize,
    pub n_val: usize,
    pub rows: usize,
    pub cols: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub max_objects: usize,
    /// Every object in a scene shares one shape and one color.
    pub homogeneous: bool,
    pub n_frames: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::reference()
    }
}

impl DatasetSpec {
    /// The reference VQA task: 4×4 homogeneous scenes of 1 to 3 objects.
    pub fn reference() -> Self {
        DatasetSpec {
            task: Task::Vqa,
            n_train: 5000,
            n_val: 1000,
            rows: 4,
            cols: 4,
            n_shapes: 4,
            n_colors: 4,
            max_objects: 3,
            homogeneous: true,
            n_frames: 4,
            seed: 0,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn feature_dim(&self) -> usize {
        self.n_shapes + self.n_colors + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Dataset(m.to_string()));
        if self.n_train == 0 || self.n_val == 0 {
            return bad("n_train and n_val must be at least 1");
        }
        if !(1..=SHAPES.len()).contains(&self.n_shapes) || !(1..=COLORS.len()).contains(&self.n_colors) {
            return bad("attribute set sizes out of range");
        }
        if self.rows == 0 || self.cols == 0 || self.rows > NUMBERS.len() || self.cols > NUMBERS.len() {
            return bad("grid extents must be in 1..=9");
        }
        if self.max_objects == 0 || self.max_objects > self.rows * self.cols || self.max_objects > NUMBERS.len() {
            return bad("max_objects must be in 1..=min(cells, 9)");
        }
        if self.task == Task::FrameVqa && !(1..=NUMBERS.len()).contains(&self.n_frames) {
            return bad("n_frames must be in 1..=9");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    /// `[n_patches][feature_dim]`; empty when `frames` is set.
    pub perception: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<Vec<Vec<f64>>>>,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

fn to_tensor<T: Float>(rows: &[Vec<f64>]) -> Result<Tensor<T>> {
    let n = rows.len();
    let f = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flatten().map(|&x| T::from_f64_lossy(x)).collect();
    Tensor::new(vec![n, f], data)
}

impl SyntheticExample {
    pub fn perception_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        match &self.frames {
            Some(f) => to_tensor(f.first().ok_or(Error::Empty("frames"))?),
            None => to_tensor(&self.perception),
        }
    }

    pub fn frame_tensors<T: Float>(&self) -> Result<Vec<Tensor<T>>> {
        match &self.frames {
            Some(f) => f.iter().map(|fr| to_tensor(fr)).collect(),
            None => Ok(vec![to_tensor(&self.perception)?]),
        }
    }

    pub fn serialized(&self) -> String {
        serde_json::to_string(self).expect("examples always serialize")
    }
}

fn sample_cells(rng: &mut RngState, n_cells: usize, k: usize) -> Vec<usize> {
    let mut cells: Vec<usize> = (0..n_cells).collect();
    for i in 0..k {
        let j = i + rng.below(n_cells - i);
        cells.swap(i, j);
    }
    let mut out = cells[..k].to_vec();
    out.sort_unstable();
    out
}

fn sample_grid(spec: &DatasetSpec, rng: &mut RngState, k: usize) -> GridWorld {
    let mut g = GridWorld::empty(spec.rows, spec.cols, spec.n_shapes, spec.n_colors);
    let base = Object {
        shape: rng.below(spec.n_shapes),
        color: rng.below(spec.n_colors),
    };
    for c in sample_cells(rng, spec.rows * spec.cols, k) {
        g.cells[c] = Some(if spec.homogeneous {
            base
        } else {
            Object {
                shape: rng.below(spec.n_shapes),
                color: rng.below(spec.n_colors),
            }
        });
    }
    g
}

/// One candidate example; `None` when the draw is rejected as ambiguous.
fn draw(spec: &DatasetSpec, rng: &mut RngState) -> Option<SyntheticExample> {
    match spec.task {
        Task::Vqa | Task::Caption => {
            let k = 1 + rng.below(spec.max_objects);
            let g = sample_grid(spec, rng, k);
            let objs: Vec<Object> = g.objects().map(|(_, o)| o).collect();
            let pick = &objs[rng.below(objs.len())];
            let q = match rng.below(3) {
                0 => QuestionKind::ColorOf(pick.shape),
                1 => QuestionKind::ShapeOf(pick.color),
                _ => QuestionKind::Count,
            };
            let answer = answer_for(&g, q)?;
            Some(SyntheticExample {
                perception: g.features(),
                frames: None,
                question: q.render(),
                answer,
                caption: Some(g.caption()),
            })
        }
        Task::FrameVqa => {
            let grids: Vec<GridWorld> = (0..spec.n_frames).map(|_| sample_grid(spec, rng, 1)).collect();
            let t = rng.below(spec.n_frames);
            let (_, obj) = grids[t].objects().next().expect("frame holds one object");
            Some(SyntheticExample {
                perception: Vec::new(),
                frames: Some(grids.iter().map(GridWorld::features).collect()),
                question: format!("what appears in frame {} </a>", NUMBERS[t]),
                answer: SHAPES[obj.shape].to_string(),
                caption: Some(grids[t].caption()),
            })
        }
    }
}

fn draw_split(spec: &DatasetSpec, rng: &mut RngState, n: usize, exclude: &HashSet<String>) -> Result<Vec<SyntheticExample>> {
    let budget = 1000 * n + 10_000;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Dataset(format!(
                "attribute sets too small: only {} distinct examples after {budget} draws",
                out.len()
            )));
        }
        if let Some(ex) = draw(spec, rng) {
            if !exclude.contains(&ex.serialized()) {
                out.push(ex);
            }
        }
    }
    Ok(out)
}

/// Train and val come from separate streams of the seed, and val drops any
/// example whose serialization also occurs in train.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Vec<SyntheticExample>, Vec<SyntheticExample>)> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let train = draw_split(spec, &mut root.split(1), spec.n_train, &HashSet::new())?;
    let seen: HashSet<String> = train.iter().map(SyntheticExample::serialized).collect();
    let val = draw_split(spec, &mut root.split(2), spec.n_val, &seen)?;
    Ok((train, val))
}

/// Best accuracy achievable from the question alone: majority answer per
/// question string, counted on `examples` themselves.
pub fn prior_ceiling(examples: &[SyntheticExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for e in examples {
        *counts.entry(&e.question).or_default().entry(&e.answer).or_default() += 1;
    }
    let hits: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / examples.len() as f64
}

pub fn write_jsonl(path: &Path, examples: &[SyntheticExample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        w.write_all(e.serialized().as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticExample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
