//! Geometric edge ground truth from semantic label maps.
//!
//! Categories that share geometry (road and sidewalk, fence and wall, ...) are
//! merged first, so only boundaries between geometrically distinct surfaces
//! remain. Instance boundaries survive the merge.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::Pnm;
use crate::maps::{BoolMap, Grid};

/// Default merge table for the Cityscapes label palette (ids 0 to 33).
pub const CITYSCAPES_MERGE_CSV: &str = include_str!("../data/cityscapes_merge.csv");

/// Per-pixel category ids with optional instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub labels: Grid<u16>,
    pub instances: Option<Grid<u16>>,
}

impl LabelMap {
    pub fn new(labels: Grid<u16>, instances: Option<Grid<u16>>) -> Result<Self> {
        if let Some(inst) = &instances {
            if inst.dims() != labels.dims() {
                return Err(Error::Size(format!(
                    "instance map {:?} does not match label map {:?}",
                    inst.dims(),
                    labels.dims()
                )));
            }
        }
        Ok(LabelMap { labels, instances })
    }

    /// Builds a label map from single-channel PGM images.
    pub fn from_pnm(labels: &Pnm, instances: Option<&Pnm>) -> Result<Self> {
        let grid = |p: &Pnm, what: &str| -> Result<Grid<u16>> {
            if p.channels != 1 {
                return Err(Error::Validation(format!("{what} map must be single-channel")));
            }
            Grid::from_vec(p.width, p.height, p.data.clone())
        };
        LabelMap::new(grid(labels, "label")?, instances.map(|i| grid(i, "instance")).transpose()?)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }
}

#[derive(Debug, serde::Deserialize)]
struct MergeRow {
    raw_id: u16,
    raw_name: String,
    merged_name: String,
}

/// Mapping from raw category id to merged category id.
///
/// Every merged category is itself a palette entry that maps to itself, so
/// applying the table twice equals applying it once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    map: BTreeMap<u16, u16>,
    names: BTreeMap<u16, String>,
}

impl MergeTable {
    /// Parses a CSV with header `raw_id,raw_name,merged_name`. Each merged
    /// name must be the raw name of some palette entry; the merged id is that
    /// entry's id.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<MergeRow>() {
            rows.push(rec.map_err(|e| Error::Validation(format!("merge table: {e}")))?);
        }
        let mut by_name = BTreeMap::new();
        let mut names = BTreeMap::new();
        for r in &rows {
            if names.insert(r.raw_id, r.raw_name.clone()).is_some() {
                return Err(Error::Validation(format!("merge table lists id {} twice", r.raw_id)));
            }
            if by_name.insert(r.raw_name.clone(), r.raw_id).is_some() {
                return Err(Error::Validation(format!("merge table lists name '{}' twice", r.raw_name)));
            }
        }
        let mut map = BTreeMap::new();
        for r in &rows {
            let target = by_name.get(&r.merged_name).ok_or_else(|| {
                Error::Validation(format!(
                    "merged name '{}' for id {} is not a palette entry",
                    r.merged_name, r.raw_id
                ))
            })?;
            map.insert(r.raw_id, *target);
        }
        for (id, target) in &map {
            if map[target] != *target {
                return Err(Error::Validation(format!(
                    "id {id} merges into {target}, which itself merges into {}",
                    map[target]
                )));
            }
        }
        if map.is_empty() {
            return Err(Error::Validation("merge table is empty".into()));
        }
        Ok(MergeTable { map, names })
    }

    /// The shipped Cityscapes merge table.
    pub fn cityscapes() -> Self {
        MergeTable::from_csv(CITYSCAPES_MERGE_CSV).expect("shipped merge table is valid")
    }

    /// Table mapping every id of `palette` to itself.
    pub fn identity(palette: impl IntoIterator<Item = u16>) -> Self {
        let map: BTreeMap<u16, u16> = palette.into_iter().map(|i| (i, i)).collect();
        let names = map.keys().map(|i| (*i, i.to_string())).collect();
        MergeTable { map, names }
    }

    pub fn get(&self, id: u16) -> Result<u16> {
        self.map.get(&id).copied().ok_or(Error::UnknownLabel { id })
    }

    pub fn palette(&self) -> impl Iterator<Item = u16> + '_ {
        self.map.keys().copied()
    }

    /// Ids that are the image of some palette entry.
    pub fn merged_ids(&self) -> Vec<u16> {
        let mut v: Vec<u16> = self.map.values().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }
}

/// Applies `table` pixel-wise; instance ids pass through unchanged.
pub fn merge_labels(labels: &LabelMap, table: &MergeTable) -> Result<LabelMap> {
    let (w, h) = labels.dims();
    let mut out = Vec::with_capacity(w * h);
    for &id in labels.labels.data() {
        out.push(table.get(id)?);
    }
    LabelMap::new(Grid::from_vec(w, h, out)?, labels.instances.clone())
}

/// Flags every pixel whose 4-neighbor has a different category, or a
/// different instance id when instance ids are present. Both sides of a
/// boundary are flagged.
pub fn extract_edges(merged: &LabelMap) -> BoolMap {
    let (w, h) = merged.dims();
    let differs = |a: (usize, usize), b: (usize, usize)| {
        merged.labels.get(a.0, a.1) != merged.labels.get(b.0, b.1)
            || merged.instances.as_ref().is_some_and(|i| i.get(a.0, a.1) != i.get(b.0, b.1))
    };
    Grid::from_fn(w, h, |x, y| {
        (x > 0 && differs((x, y), (x - 1, y)))
            || (x + 1 < w && differs((x, y), (x + 1, y)))
            || (y > 0 && differs((x, y), (x, y - 1)))
            || (y + 1 < h && differs((x, y), (x, y + 1)))
    })
}

/// Merge followed by boundary extraction.
pub fn edge_ground_truth(labels: &LabelMap, table: &MergeTable) -> Result<BoolMap> {
    Ok(extract_edges(&merge_labels(labels, table)?))
}

/// Encodes an edge map as an 8-bit PGM with values 0 and 255.
pub fn edges_to_pnm(edges: &BoolMap) -> Pnm {
    let (width, height) = edges.dims();
    Pnm {
        width,
        height,
        channels: 1,
        maxval: 255,
        data: edges.data().iter().map(|e| if *e { 255 } else { 0 }).collect(),
    }
}
