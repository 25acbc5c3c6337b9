//! Original/new region bookkeeping for expanded parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::InitRegime;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionTag {
    Original,
    New,
}

/// Where the values of a segment came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Origin {
    Original,
    /// Element `i` of the segment copies index `donor_start + i − start`.
    Copy { donor_start: usize },
    Random,
    Zero,
}

impl Origin {
    pub(crate) fn for_regime(regime: InitRegime, donor_start: usize) -> Self {
        match regime {
            InitRegime::Copy => Origin::Copy { donor_start },
            InitRegime::Random => Origin::Random,
            InitRegime::Zero => Origin::Zero,
        }
    }
}

/// Half-open index range `[start, end)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub origin: Origin,
}

impl Segment {
    pub fn tag(&self) -> RegionTag {
        match self.origin {
            Origin::Original => RegionTag::Original,
            _ => RegionTag::New,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// A copied slice and its donor along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyPair {
    pub axis: usize,
    pub start: usize,
    pub end: usize,
    pub donor_start: usize,
}

/// Regions of one parameter: per axis, segments partitioning the extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRegions {
    pub shape: Vec<usize>,
    pub axes: Vec<Vec<Segment>>,
    /// Factor applied to the original weights by the last expansion.
    pub scale: f64,
}

impl ParamRegions {
    pub fn original(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            axes: shape
                .iter()
                .map(|&n| {
                    vec![Segment {
                        start: 0,
                        end: n,
                        origin: Origin::Original,
                    }]
                })
                .collect(),
            scale: 1.0,
        }
    }

    /// Pre-expansion extent along `axis`.
    pub fn original_len(&self, axis: usize) -> usize {
        self.axes[axis]
            .iter()
            .filter(|s| s.tag() == RegionTag::Original)
            .map(Segment::len)
            .sum()
    }

    pub fn original_shape(&self) -> Vec<usize> {
        (0..self.axes.len()).map(|a| self.original_len(a)).collect()
    }

    pub fn is_all_original(&self) -> bool {
        self.axes
            .iter()
            .all(|segs| segs.iter().all(|s| s.tag() == RegionTag::Original))
    }

    /// Row-major mask, `true` for elements in a new region, or `None` when
    /// the whole parameter is original.
    pub fn new_mask(&self) -> Option<Vec<bool>> {
        if self.is_all_original() {
            return None;
        }
        let per_axis: Vec<Vec<bool>> = self
            .axes
            .iter()
            .zip(&self.shape)
            .map(|(segs, &n)| {
                let mut m = vec![false; n];
                for s in segs.iter().filter(|s| s.tag() == RegionTag::New) {
                    m[s.start..s.end].iter_mut().for_each(|v| *v = true);
                }
                m
            })
            .collect();
        let total: usize = self.shape.iter().product();
        let mut mask = Vec::with_capacity(total);
        match per_axis.as_slice() {
            [a] => mask.extend_from_slice(a),
            [rows, cols] => {
                for &r in rows {
                    mask.extend(cols.iter().map(|&c| r || c));
                }
            }
            _ => unreachable!("parameters are 1-D or 2-D"),
        }
        Some(mask)
    }

    /// For each index along `axis`, the pre-expansion index it derives
    /// from: itself when original, otherwise the cyclic donor.
    pub fn source_indices(&self, axis: usize) -> Vec<usize> {
        let orig = self.original_len(axis);
        (0..self.shape[axis])
            .map(|j| if j < orig { j } else { j % orig })
            .collect()
    }

    pub fn copy_pairs(&self) -> Vec<CopyPair> {
        let mut out = Vec::new();
        for (axis, segs) in self.axes.iter().enumerate() {
            for s in segs {
                if let Origin::Copy { donor_start } = s.origin {
                    out.push(CopyPair {
                        axis,
                        start: s.start,
                        end: s.end,
                        donor_start,
                    });
                }
            }
        }
        out
    }

    fn check(&self, name: &str, shape: &[usize]) -> Result<()> {
        if self.shape != shape || self.axes.len() != shape.len() {
            return Err(Error::shape(format!(
                "region map for `{name}` has shape {:?}, parameter has {shape:?}",
                self.shape
            )));
        }
        for (axis, segs) in self.axes.iter().enumerate() {
            let mut pos = 0;
            for s in segs {
                if s.start != pos || s.end < s.start {
                    return Err(Error::config(format!(
                        "region map for `{name}` axis {axis} does not partition the extent"
                    )));
                }
                pos = s.end;
            }
            if pos != shape[axis] {
                return Err(Error::config(format!(
                    "region map for `{name}` axis {axis} covers {pos} of {}",
                    shape[axis]
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter regions for a whole model.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionMap {
    params: BTreeMap<String, ParamRegions>,
}

impl RegionMap {
    /// All-original map for a fresh (or freshly expanded-over) model.
    pub fn fresh(model: &Model) -> Self {
        Self {
            params: model
                .params()
                .iter()
                .map(|(k, v)| (k.clone(), ParamRegions::original(v.shape())))
                .collect(),
        }
    }

    pub(crate) fn from_params(params: BTreeMap<String, ParamRegions>) -> Self {
        Self { params }
    }

    pub fn get(&self, name: &str) -> Result<&ParamRegions> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("region map has no entry for `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamRegions)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_all_original(&self) -> bool {
        self.params.values().all(ParamRegions::is_all_original)
    }

    /// Verifies the map partitions every parameter of `model` exactly.
    pub fn check_covers(&self, model: &Model) -> Result<()> {
        if self.params.len() != model.params().len() {
            return Err(Error::config(format!(
                "region map has {} entries, model has {} parameters",
                self.params.len(),
                model.params().len()
            )));
        }
        for (name, p) in model.params().iter() {
            self.get(name)?.check(name, p.shape())?;
        }
        Ok(())
    }

    /// Number of elements in original regions.
    pub fn original_volume(&self) -> usize {
        self.params
            .values()
            .map(|p| p.original_shape().iter().product::<usize>())
            .sum()
    }

    pub fn has_copy_pairs(&self) -> bool {
        self.params.values().any(|p| !p.copy_pairs().is_empty())
    }
}
