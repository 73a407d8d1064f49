//! Grid scenes and their one-hot patch features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::vocab::{COLORS, NUMBERS, SHAPES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: usize,
    pub color: usize,
}

/// At most one object per cell, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorld {
    pub rows: usize,
    pub cols: usize,
    pub n_shapes: usize,
    pub n_colors: usize,
    pub cells: Vec<Option<Object>>,
}

impl GridWorld {
    pub fn empty(rows: usize, cols: usize, n_shapes: usize, n_colors: usize) -> Self {
        GridWorld {
            rows,
            cols,
            n_shapes,
            n_colors,
            cells: vec![None; rows * cols],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.n_shapes + self.n_colors + 2
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, Object)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|o| (i, o)))
    }

    pub fn count(&self) -> usize {
        self.objects().count()
    }

    /// One row per cell: one-hot shape, one-hot color, then (row, col) scaled to [0, 1].
    pub fn features(&self) -> Vec<Vec<f64>> {
        let scale = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        (0..self.rows * self.cols)
            .map(|i| {
                let mut f = vec![0.0; self.feature_dim()];
                if let Some(o) = self.cells[i] {
                    f[o.shape] = 1.0;
                    f[self.n_shapes + o.color] = 1.0;
                }
                f[self.n_shapes + self.n_colors] = scale(i / self.cols, self.rows);
                f[self.n_shapes + self.n_colors + 1] = scale(i % self.cols, self.cols);
                f
            })
            .collect()
    }

    pub fn from_features(rows: usize, cols: usize, n_shapes: usize, n_colors: usize, feats: &[Vec<f64>]) -> Result<Self> {
        if feats.len() != rows * cols {
            return Err(Error::Dataset(format!("expected {} cells, got {}", rows * cols, feats.len())));
        }
        let hot = |xs: &[f64]| xs.iter().position(|&x| x > 0.5);
        let mut g = GridWorld::empty(rows, cols, n_shapes, n_colors);
        for (i, f) in feats.iter().enumerate() {
            if f.len() != n_shapes + n_colors + 2 {
                return Err(Error::Dataset(format!("cell {i} has {} features", f.len())));
            }
            g.cells[i] = match (hot(&f[..n_shapes]), hot(&f[n_shapes..n_shapes + n_colors])) {
                (Some(shape), Some(color)) => Some(Object { shape, color }),
                (None, None) => None,
                _ => return Err(Error::Dataset(format!("cell {i} has a partial object"))),
            };
        }
        Ok(g)
    }

    /// "two objects : red circle and blue star", objects in row-major order.
    pub fn caption(&self) -> String {
        let n = self.count();
        let mut s = format!("{} {} :", NUMBERS[n - 1], if n == 1 { "object" } else { "objects" });
        for (k, (_, o)) in self.objects().enumerate() {
            if k > 0 {
                s.push_str(" and");
            }
            s.push_str(&format!(" {} {}", COLORS[o.color], SHAPES[o.shape]));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionKind {
    ColorOf(usize),
    ShapeOf(usize),
    Count,
}

impl QuestionKind {
    pub fn render(self) -> String {
        match self {
            QuestionKind::ColorOf(s) => format!("what color is the {} </a>", SHAPES[s]),
            QuestionKind::ShapeOf(c) => format!("what shape is {} </a>", COLORS[c]),
            QuestionKind::Count => "how many objects </a>".to_string(),
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        let w: Vec<&str> = text.split_whitespace().collect();
        match w.as_slice() {
            ["what", "color", "is", "the", s, "</a>"] => SHAPES.iter().position(|x| x == s).map(QuestionKind::ColorOf),
            ["what", "shape", "is", c, "</a>"] => COLORS.iter().position(|x| x == c).map(QuestionKind::ShapeOf),
            ["how", "many", "objects", "</a>"] => Some(QuestionKind::Count),
            _ => None,
        }
    }
}

/// The unique answer, or `None` when the question is ambiguous or vacuous.
pub fn answer_for(grid: &GridWorld, q: QuestionKind) -> Option<String> {
    let unique = |mut xs: Vec<usize>| {
        xs.sort_unstable();
        xs.dedup();
        (xs.len() == 1).then(|| xs[0])
    };
    match q {
        QuestionKind::ColorOf(s) => {
            unique(grid.objects().filter(|(_, o)| o.shape == s).map(|(_, o)| o.color).collect()).map(|c| COLORS[c].to_string())
        }
        QuestionKind::ShapeOf(c) => {
            unique(grid.objects().filter(|(_, o)| o.color == c).map(|(_, o)| o.shape).collect()).map(|s| SHAPES[s].to_string())
        }
        QuestionKind::Count => {
            let n = grid.count();
            (n >= 1).then(|| NUMBERS[n - 1].to_string())
        }
    }
}
