use serde::{Deserialize, Serialize};

use crate::document::{reading_order, Document, NormBBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Above,
    Below,
}

impl Direction {
    /// Direction of `to` as seen from `from`: the axis with the larger center
    /// displacement wins, ties go to the horizontal axis. Page y grows downward.
    pub fn between(from: (f64, f64), to: (f64, f64)) -> Direction {
        let dx = to.0 - from.0;
        let dy = to.1 - from.1;
        if dx.abs() >= dy.abs() {
            if dx < 0.0 {
                Direction::Left
            } else {
                Direction::Right
            }
        } else if dy < 0.0 {
            Direction::Above
        } else {
            Direction::Below
        }
    }
}

/// How much surrounding layout an LF may look at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextParams {
    /// Reading-order neighbors taken on each side.
    pub window: usize,
    /// Spatial neighbors within this normalized center distance; 0 disables them.
    pub radius: f64,
}

impl Default for ContextParams {
    fn default() -> Self {
        ContextParams {
            window: 2,
            radius: 0.1,
        }
    }
}

impl ContextParams {
    pub fn new(window: usize, radius: f64) -> Result<Self> {
        if !(0.0..=std::f64::consts::SQRT_2).contains(&radius) {
            return Err(Error::Config(format!("context radius {radius} outside [0, sqrt 2]")));
        }
        Ok(ContextParams { window, radius })
    }
}

/// One member of a token's context set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextToken {
    pub index: usize,
    pub direction: Direction,
    pub distance: f64,
}

/// A document with its normalized geometry and reading order precomputed.
#[derive(Debug, Clone)]
pub struct PageLayout<'a> {
    pub doc: &'a Document,
    pub norm: Vec<NormBBox>,
    /// Token indices in reading order.
    pub order: Vec<usize>,
    /// Inverse of `order`.
    pub rank: Vec<usize>,
}

impl<'a> PageLayout<'a> {
    pub fn new(doc: &'a Document) -> Result<Self> {
        let norm = doc.normalized_boxes()?;
        let order = reading_order(doc);
        let mut rank = vec![0; order.len()];
        for (r, &t) in order.iter().enumerate() {
            rank[t] = r;
        }
        Ok(PageLayout { doc, norm, order, rank })
    }

    pub fn len(&self) -> usize {
        self.norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm.is_empty()
    }
}

/// Reading-order neighbors within `window` on each side plus every token whose
/// center lies within `radius`, deduplicated and sorted by (distance, index).
pub fn context_of(page: &PageLayout<'_>, token: usize, params: &ContextParams) -> Vec<ContextToken> {
    let n = page.len();
    let mut members: Vec<usize> = Vec::new();
    let r = page.rank[token];
    let lo = r.saturating_sub(params.window);
    let hi = (r + params.window).min(n.saturating_sub(1));
    for rr in lo..=hi {
        if rr != r {
            members.push(page.order[rr]);
        }
    }
    let here = page.norm[token].center();
    if params.radius > 0.0 {
        for other in 0..n {
            if other != token && dist(here, page.norm[other].center()) <= params.radius {
                members.push(other);
            }
        }
    }
    members.sort_unstable();
    members.dedup();

    let mut out: Vec<ContextToken> = members
        .into_iter()
        .map(|i| {
            let there = page.norm[i].center();
            ContextToken {
                index: i,
                direction: Direction::between(here, there),
                distance: dist(here, there),
            }
        })
        .collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    out
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}
