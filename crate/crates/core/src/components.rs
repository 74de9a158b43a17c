//! Connected components of a label map and the two post-processing steps
//! applied before segment-level evaluation: removal of small components
//! and merging of same-class components that lie close together.
//!
//! Segments store their pixels as sorted row runs. A run `[row, c0, c1]`
//! covers columns `c0..=c1` (inclusive) of `row`.
//!
//! "Close together" is measured in Chebyshev (chessboard) distance: two
//! segments merge when the number of pixels strictly between their
//! nearest pixels, i.e. the minimum Chebyshev distance minus one, is
//! below `max_gap`. Merging is transitive.

use serde::{Deserialize, Serialize};

use crate::tensor::LabelMap;

/// Neighborhood used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Which post-processing stages a component set has been through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Raw,
    Filtered,
    Merged,
}

/// Inclusive row run of pixels: columns `col_start..=col_end` of `row`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32, u32)", into = "(u32, u32, u32)")]
pub struct Run {
    pub row: u32,
    pub col_start: u32,
    pub col_end: u32,
}

impl From<(u32, u32, u32)> for Run {
    fn from((row, col_start, col_end): (u32, u32, u32)) -> Self {
        Run {
            row,
            col_start,
            col_end,
        }
    }
}

impl From<Run> for (u32, u32, u32) {
    fn from(r: Run) -> Self {
        (r.row, r.col_start, r.col_end)
    }
}

impl Run {
    fn len(&self) -> usize {
        (self.col_end - self.col_start + 1) as usize
    }
}

/// One connected component (after merging, possibly a union of several).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(rename = "class")]
    pub class_id: u8,
    pub size: usize,
    /// (min_row, min_col, max_row, max_col), all inclusive.
    pub bbox: (u32, u32, u32, u32),
    pub runs: Vec<Run>,
}

impl Segment {
    /// Builds a segment from runs, sorting and coalescing them and
    /// recomputing size and bounding box.
    fn from_runs(class_id: u8, mut runs: Vec<Run>) -> Self {
        runs.sort_unstable_by_key(|r| (r.row, r.col_start));
        let mut coalesced: Vec<Run> = Vec::with_capacity(runs.len());
        for run in runs {
            match coalesced.last_mut() {
                Some(last)
                    if last.row == run.row
                        && u64::from(run.col_start) <= u64::from(last.col_end) + 1 =>
                {
                    last.col_end = last.col_end.max(run.col_end);
                }
                _ => coalesced.push(run),
            }
        }
        let size = coalesced.iter().map(Run::len).sum();
        let mut bbox = (u32::MAX, u32::MAX, 0u32, 0u32);
        for run in &coalesced {
            bbox.0 = bbox.0.min(run.row);
            bbox.1 = bbox.1.min(run.col_start);
            bbox.2 = bbox.2.max(run.row);
            bbox.3 = bbox.3.max(run.col_end);
        }
        Segment {
            class_id,
            size,
            bbox,
            runs: coalesced,
        }
    }

    /// Iterates all (row, col) pixels of the segment.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.runs.iter().flat_map(|r| {
            (r.col_start..=r.col_end).map(move |c| (r.row as usize, c as usize))
        })
    }
}

/// Components of one image, possibly post-processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub connectivity: Connectivity,
    pub provenance: Provenance,
    pub segments: Vec<Segment>,
}

impl ComponentSet {
    pub fn with_image_id(mut self, id: impl Into<String>) -> Self {
        self.image_id = id.into();
        self
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

/// Labels maximal connected same-class pixel sets. Every pixel belongs to
/// exactly one segment; all classes are labeled, there is no background
/// exclusion.
pub fn label_components(labels: &LabelMap, connectivity: Connectivity) -> ComponentSet {
    let (h, w) = (labels.height(), labels.width());
    let data = labels.data();
    let mut uf = UnionFind::new(h * w);

    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            let class = data[idx];
            if col > 0 && data[idx - 1] == class {
                uf.union(idx as u32, (idx - 1) as u32);
            }
            if row > 0 {
                let up = idx - w;
                if data[up] == class {
                    uf.union(idx as u32, up as u32);
                }
                if connectivity == Connectivity::Eight {
                    if col > 0 && data[up - 1] == class {
                        uf.union(idx as u32, (up - 1) as u32);
                    }
                    if col + 1 < w && data[up + 1] == class {
                        uf.union(idx as u32, (up + 1) as u32);
                    }
                }
            }
        }
    }

    // Gather runs per root; adjacent same-root pixels in a row always form
    // one run because horizontal same-class neighbors are unioned.
    const NONE: u32 = u32::MAX;
    let mut slot_of_root = vec![NONE; h * w];
    let mut run_lists: Vec<(u8, Vec<Run>)> = Vec::new();
    for row in 0..h {
        let mut col = 0usize;
        while col < w {
            let idx = row * w + col;
            let root = uf.find(idx as u32);
            let mut end = col;
            while end + 1 < w && uf.find((row * w + end + 1) as u32) == root {
                end += 1;
            }
            let slot = if slot_of_root[root as usize] == NONE {
                slot_of_root[root as usize] = run_lists.len() as u32;
                run_lists.push((data[idx], Vec::new()));
                run_lists.len() - 1
            } else {
                slot_of_root[root as usize] as usize
            };
            run_lists[slot].1.push(Run {
                row: row as u32,
                col_start: col as u32,
                col_end: end as u32,
            });
            col = end + 1;
        }
    }

    let segments = run_lists
        .into_iter()
        .map(|(class_id, runs)| Segment::from_runs(class_id, runs))
        .collect();
    ComponentSet {
        image_id: String::new(),
        height: h,
        width: w,
        connectivity,
        provenance: Provenance::Raw,
        segments,
    }
}

/// Drops segments with fewer than `min_size` pixels.
pub fn filter_small_components(set: &ComponentSet, min_size: usize) -> ComponentSet {
    ComponentSet {
        image_id: set.image_id.clone(),
        height: set.height,
        width: set.width,
        connectivity: set.connectivity,
        provenance: Provenance::Filtered,
        segments: set
            .segments
            .iter()
            .filter(|s| s.size >= min_size)
            .cloned()
            .collect(),
    }
}

/// Unions same-class segments whose minimum Chebyshev distance `d`
/// satisfies `d - 1 < max_gap` (fewer than `max_gap` pixels strictly
/// in-between), transitively.
///
/// The pairwise relation is computed with a per-class Chebyshev distance
/// transform carrying nearest-segment ownership: for every 8-adjacent
/// pixel pair (p, q) owned by different segments, the segments are at
/// distance at most `dt(p) + dt(q) + 1`, and along a shortest path
/// between two segments every ownership change yields such a witness, so
/// the transitive closure equals the closure of the true pairwise
/// relation in O(pixels) per class.
pub fn merge_nearby_components(set: &ComponentSet, max_gap: usize) -> ComponentSet {
    let n_segs = set.segments.len();
    let mut uf = UnionFind::new(n_segs);
    let (h, w) = (set.height, set.width);

    if max_gap > 0 && n_segs > 1 {
        let mut by_class: Vec<(u8, Vec<usize>)> = Vec::new();
        for (idx, seg) in set.segments.iter().enumerate() {
            match by_class.iter_mut().find(|(c, _)| *c == seg.class_id) {
                Some((_, list)) => list.push(idx),
                None => by_class.push((seg.class_id, vec![idx])),
            }
        }

        const FAR: u32 = u32::MAX - 1;
        const NOBODY: u32 = u32::MAX;
        let mut dt = vec![FAR; h * w];
        let mut owner = vec![NOBODY; h * w];
        let max_gap = max_gap as u64;

        for (_, seg_indices) in by_class.iter().filter(|(_, l)| l.len() > 1) {
            dt.fill(FAR);
            owner.fill(NOBODY);
            for &si in seg_indices {
                for (row, col) in set.segments[si].pixels() {
                    let idx = row * w + col;
                    dt[idx] = 0;
                    owner[idx] = si as u32;
                }
            }

            // Chamfer passes with unit weights give exact Chebyshev
            // distances; ownership propagates along the realizing path.
            let relax = |idx: usize, n_idx: usize, dt: &mut [u32], owner: &mut [u32]| {
                if dt[n_idx] != FAR && dt[n_idx] + 1 < dt[idx] {
                    dt[idx] = dt[n_idx] + 1;
                    owner[idx] = owner[n_idx];
                }
            };
            for row in 0..h {
                for col in 0..w {
                    let idx = row * w + col;
                    if col > 0 {
                        relax(idx, idx - 1, &mut dt, &mut owner);
                    }
                    if row > 0 {
                        relax(idx, idx - w, &mut dt, &mut owner);
                        if col > 0 {
                            relax(idx, idx - w - 1, &mut dt, &mut owner);
                        }
                        if col + 1 < w {
                            relax(idx, idx - w + 1, &mut dt, &mut owner);
                        }
                    }
                }
            }
            for row in (0..h).rev() {
                for col in (0..w).rev() {
                    let idx = row * w + col;
                    if col + 1 < w {
                        relax(idx, idx + 1, &mut dt, &mut owner);
                    }
                    if row + 1 < h {
                        relax(idx, idx + w, &mut dt, &mut owner);
                        if col + 1 < w {
                            relax(idx, idx + w + 1, &mut dt, &mut owner);
                        }
                        if col > 0 {
                            relax(idx, idx + w - 1, &mut dt, &mut owner);
                        }
                    }
                }
            }

            // Union across every 8-adjacency where owners differ and the
            // witnessed distance is within the gap.
            let consider = |a: usize, b: usize, uf: &mut UnionFind| {
                let (oa, ob) = (owner[a], owner[b]);
                if oa != NOBODY && ob != NOBODY && oa != ob {
                    let d = u64::from(dt[a]) + u64::from(dt[b]) + 1;
                    if d <= max_gap {
                        uf.union(oa, ob);
                    }
                }
            };
            for row in 0..h {
                for col in 0..w {
                    let idx = row * w + col;
                    if col + 1 < w {
                        consider(idx, idx + 1, &mut uf);
                    }
                    if row + 1 < h {
                        consider(idx, idx + w, &mut uf);
                        if col + 1 < w {
                            consider(idx, idx + w + 1, &mut uf);
                        }
                        if col > 0 {
                            consider(idx, idx + w - 1, &mut uf);
                        }
                    }
                }
            }
        }
    }

    // Rebuild segments per union-find group, keeping first-seen order.
    const UNSET: usize = usize::MAX;
    let mut slot_of_root = vec![UNSET; n_segs.max(1)];
    let mut groups: Vec<(u8, Vec<Run>)> = Vec::new();
    for (idx, seg) in set.segments.iter().enumerate() {
        let root = uf.find(idx as u32) as usize;
        let slot = if slot_of_root[root] == UNSET {
            slot_of_root[root] = groups.len();
            groups.push((seg.class_id, Vec::new()));
            groups.len() - 1
        } else {
            slot_of_root[root]
        };
        groups[slot].1.extend_from_slice(&seg.runs);
    }

    ComponentSet {
        image_id: set.image_id.clone(),
        height: set.height,
        width: set.width,
        connectivity: set.connectivity,
        provenance: Provenance::Merged,
        segments: groups
            .into_iter()
            .map(|(class_id, runs)| Segment::from_runs(class_id, runs))
            .collect(),
    }
}

/// Parameters of the post-processing pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessParams {
    #[serde(default = "default_connectivity")]
    pub connectivity: Connectivity,
    #[serde(default = "default_min_size")]
    pub min_size: usize,
    #[serde(default = "default_max_gap")]
    pub max_gap: usize,
}

fn default_connectivity() -> Connectivity {
    Connectivity::Eight
}

fn default_min_size() -> usize {
    10
}

fn default_max_gap() -> usize {
    10
}

impl Default for PostprocessParams {
    fn default() -> Self {
        Self {
            connectivity: default_connectivity(),
            min_size: default_min_size(),
            max_gap: default_max_gap(),
        }
    }
}

/// Full pipeline: label, drop small components, merge nearby ones.
pub fn postprocess(labels: &LabelMap, params: &PostprocessParams) -> ComponentSet {
    let raw = label_components(labels, params.connectivity);
    let filtered = filter_small_components(&raw, params.min_size);
    merge_nearby_components(&filtered, params.max_gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, n: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, n, data).unwrap()
    }

    /// Recursive flood-fill reference labeling.
    fn flood_fill_oracle(labels: &LabelMap, connectivity: Connectivity) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = (labels.height(), labels.width());
        let mut seen = vec![false; h * w];
        let mut comps = Vec::new();
        let neighbors: &[(i64, i64)] = match connectivity {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        };
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            let class = labels.data()[start];
            let mut stack = vec![start];
            let mut pixels = Vec::new();
            seen[start] = true;
            while let Some(idx) = stack.pop() {
                pixels.push((idx / w, idx % w));
                let (r, c) = ((idx / w) as i64, (idx % w) as i64);
                for &(dr, dc) in neighbors {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if !seen[nidx] && labels.data()[nidx] == class {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
            pixels.sort_unstable();
            comps.push(pixels);
        }
        comps.sort_unstable();
        comps
    }

    fn sorted_pixel_sets(set: &ComponentSet) -> Vec<Vec<(usize, usize)>> {
        let mut out: Vec<Vec<(usize, usize)>> = set
            .segments
            .iter()
            .map(|s| {
                let mut px: Vec<_> = s.pixels().collect();
                px.sort_unstable();
                px
            })
            .collect();
        out.sort_unstable();
        out
    }

    #[test]
    fn single_class_is_one_segment() {
        let labels = map(4, 5, 2, vec![1; 20]);
        let set = label_components(&labels, Connectivity::Eight);
        assert_eq!(set.segments.len(), 1);
        assert_eq!(set.segments[0].size, 20);
        assert_eq!(set.segments[0].class_id, 1);
        assert_eq!(set.segments[0].bbox, (0, 0, 3, 4));
    }

    #[test]
    fn checkerboard_with_four_connectivity_is_all_singletons() {
        let data: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let labels = map(4, 4, 2, data);
        let set = label_components(&labels, Connectivity::Four);
        assert_eq!(set.segments.len(), 16);
        assert!(set.segments.iter().all(|s| s.size == 1));
        // With 8-connectivity the two colors each form one component.
        let set8 = label_components(&labels, Connectivity::Eight);
        assert_eq!(set8.segments.len(), 2);
    }

    #[test]
    fn labeling_matches_flood_fill_oracle() {
        let mut state = 0xdeadbeefu64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        for trial in 0..50 {
            let data: Vec<u8> = (0..16 * 16).map(|_| (next() % 3) as u8).collect();
            let labels = map(16, 16, 3, data);
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let set = label_components(&labels, conn);
                assert_eq!(
                    sorted_pixel_sets(&set),
                    flood_fill_oracle(&labels, conn),
                    "trial {trial}"
                );
                // Pixel conservation.
                let total: usize = set.segments.iter().map(|s| s.size).sum();
                assert_eq!(total, 256);
            }
        }
    }

    #[test]
    fn filter_uses_strict_threshold() {
        // 3x3 block of class 1 (size 9) and a 2x5 block (size 10).
        let mut data = vec![0u8; 8 * 8];
        for r in 0..3 {
            for c in 0..3 {
                data[r * 8 + c] = 1;
            }
        }
        for r in 6..8 {
            for c in 3..8 {
                data[r * 8 + c] = 1;
            }
        }
        let labels = map(8, 8, 2, data);
        let raw = label_components(&labels, Connectivity::Eight);
        let filtered = filter_small_components(&raw, 10);
        let class1: Vec<_> = filtered
            .segments
            .iter()
            .filter(|s| s.class_id == 1)
            .collect();
        assert_eq!(class1.len(), 1);
        assert_eq!(class1[0].size, 10);
    }

    #[test]
    fn filter_on_empty_set_is_empty() {
        let labels = map(3, 3, 2, vec![0; 9]);
        let raw = label_components(&labels, Connectivity::Eight);
        let only_background = filter_small_components(&raw, 100);
        assert!(only_background.segments.is_empty());
        let again = filter_small_components(&only_background, 100);
        assert!(again.segments.is_empty());
    }

    #[test]
    fn filter_matches_predicate_oracle_and_is_idempotent() {
        let mut state = 123u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        let data: Vec<u8> = (0..20 * 20).map(|_| (next() % 4) as u8).collect();
        let labels = map(20, 20, 4, data);
        let raw = label_components(&labels, Connectivity::Four);
        let filtered = filter_small_components(&raw, 5);
        let expected: Vec<&Segment> = raw.segments.iter().filter(|s| s.size >= 5).collect();
        assert_eq!(filtered.segments.len(), expected.len());
        for (got, want) in filtered.segments.iter().zip(expected) {
            assert_eq!(got, want);
        }
        let twice = filter_small_components(&filtered, 5);
        assert_eq!(twice.segments, filtered.segments);
    }

    fn two_blobs_with_gap(gap: usize) -> LabelMap {
        // Two 2x3 blobs of class 1 in one row band, `gap` background
        // columns between them.
        let w = 3 + gap + 3 + 2;
        let mut data = vec![0u8; 4 * w];
        for r in 1..3 {
            for c in 0..3 {
                data[r * w + c + 1] = 1;
            }
            for c in 0..3 {
                data[r * w + 4 + gap + c] = 1;
            }
        }
        map(4, w, 2, data)
    }

    #[test]
    fn merge_joins_within_gap() {
        let labels = two_blobs_with_gap(5);
        let raw = label_components(&labels, Connectivity::Eight);
        let merged = merge_nearby_components(&raw, 10);
        let class1: Vec<_> = merged.segments.iter().filter(|s| s.class_id == 1).collect();
        assert_eq!(class1.len(), 1);
        assert_eq!(class1[0].size, 12);
    }

    #[test]
    fn merge_keeps_separated_blobs_apart() {
        let labels = two_blobs_with_gap(15);
        let raw = label_components(&labels, Connectivity::Eight);
        let merged = merge_nearby_components(&raw, 10);
        let class1: Vec<_> = merged.segments.iter().filter(|s| s.class_id == 1).collect();
        assert_eq!(class1.len(), 2);
    }

    #[test]
    fn gap_boundary_is_strict() {
        // Exactly max_gap pixels in-between must stay separate,
        // max_gap - 1 must merge.
        let labels_eq = two_blobs_with_gap(10);
        let merged_eq =
            merge_nearby_components(&label_components(&labels_eq, Connectivity::Eight), 10);
        assert_eq!(
            merged_eq.segments.iter().filter(|s| s.class_id == 1).count(),
            2
        );
        let labels_lt = two_blobs_with_gap(9);
        let merged_lt =
            merge_nearby_components(&label_components(&labels_lt, Connectivity::Eight), 10);
        assert_eq!(
            merged_lt.segments.iter().filter(|s| s.class_id == 1).count(),
            1
        );
    }

    #[test]
    fn merge_is_transitive_along_chains() {
        // A at cols 0..2, B at 8..10, C at 16..18: A-B and B-C gaps are 5,
        // A-C gap is 13. All three must merge.
        let mut data = vec![0u8; 3 * 24];
        for r in 0..3 {
            for c in [0, 1, 2, 8, 9, 10, 16, 17, 18] {
                data[r * 24 + c] = 1;
            }
        }
        let labels = map(3, 24, 2, data);
        let raw = label_components(&labels, Connectivity::Eight);
        assert_eq!(raw.segments.iter().filter(|s| s.class_id == 1).count(), 3);
        let merged = merge_nearby_components(&raw, 10);
        let class1: Vec<_> = merged.segments.iter().filter(|s| s.class_id == 1).collect();
        assert_eq!(class1.len(), 1);
        assert_eq!(class1[0].size, 27);
    }

    /// All-pairs Chebyshev merge oracle: distance between every segment
    /// pair by brute force, then transitive closure.
    fn merge_oracle_groups(set: &ComponentSet, max_gap: usize) -> Vec<Vec<usize>> {
        let n = set.segments.len();
        let mut adj = vec![vec![false; n]; n];
        for a in 0..n {
            for b in a + 1..n {
                if set.segments[a].class_id != set.segments[b].class_id {
                    continue;
                }
                let mut min_d = u64::MAX;
                for (ra, ca) in set.segments[a].pixels() {
                    for (rb, cb) in set.segments[b].pixels() {
                        let d = (ra as i64 - rb as i64)
                            .unsigned_abs()
                            .max((ca as i64 - cb as i64).unsigned_abs());
                        min_d = min_d.min(d);
                    }
                }
                if min_d <= max_gap as u64 {
                    adj[a][b] = true;
                    adj[b][a] = true;
                }
            }
        }
        let mut group = vec![usize::MAX; n];
        let mut next_group = 0usize;
        for start in 0..n {
            if group[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            group[start] = next_group;
            while let Some(x) = stack.pop() {
                for y in 0..n {
                    if adj[x][y] && group[y] == usize::MAX {
                        group[y] = next_group;
                        stack.push(y);
                    }
                }
            }
            next_group += 1;
        }
        let mut groups = vec![Vec::new(); next_group];
        for (seg, &g) in group.iter().enumerate() {
            groups[g].push(seg);
        }
        groups.sort();
        groups
    }

    fn groups_as_pixel_sets(
        set: &ComponentSet,
        groups: &[Vec<usize>],
    ) -> Vec<Vec<(usize, usize)>> {
        let mut out: Vec<Vec<(usize, usize)>> = groups
            .iter()
            .map(|g| {
                let mut px: Vec<(usize, usize)> = g
                    .iter()
                    .flat_map(|&si| set.segments[si].pixels())
                    .collect();
                px.sort_unstable();
                px
            })
            .collect();
        out.sort_unstable();
        out
    }

    #[test]
    fn merge_matches_all_pairs_oracle() {
        let mut state = 777u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        for trial in 0..40 {
            // Sparse maps so distinct blobs with varied gaps appear.
            let data: Vec<u8> = (0..14 * 14)
                .map(|_| {
                    let r = next() % 10;
                    if r < 7 {
                        0
                    } else {
                        (1 + r % 2) as u8
                    }
                })
                .collect();
            let labels = map(14, 14, 3, data);
            let raw = label_components(&labels, Connectivity::Eight);
            for max_gap in [0usize, 1, 2, 3, 5] {
                let merged = merge_nearby_components(&raw, max_gap);
                let oracle = merge_oracle_groups(&raw, max_gap);
                assert_eq!(
                    sorted_pixel_sets(&merged),
                    groups_as_pixel_sets(&raw, &oracle),
                    "trial {trial} max_gap {max_gap}"
                );
            }
        }
    }

    #[test]
    fn merge_is_idempotent_and_preserves_pixels() {
        let mut state = 31337u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        let data: Vec<u8> = (0..16 * 16)
            .map(|_| if next() % 5 < 3 { 0 } else { 1 })
            .collect();
        let labels = map(16, 16, 2, data);
        let raw = label_components(&labels, Connectivity::Four);
        let merged = merge_nearby_components(&raw, 3);
        let twice = merge_nearby_components(&merged, 3);
        assert_eq!(sorted_pixel_sets(&twice), sorted_pixel_sets(&merged));

        // Per-class pixel unions unchanged by merging.
        for class in 0..2u8 {
            let mut before: Vec<(usize, usize)> = raw
                .segments
                .iter()
                .filter(|s| s.class_id == class)
                .flat_map(|s| s.pixels())
                .collect();
            let mut after: Vec<(usize, usize)> = merged
                .segments
                .iter()
                .filter(|s| s.class_id == class)
                .flat_map(|s| s.pixels())
                .collect();
            before.sort_unstable();
            after.sort_unstable();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn postprocess_discards_small_before_merging() {
        // A 3x3 blob (size 9) and a 5x10 blob (size 50) of the same class,
        // 4 columns apart: the small blob must vanish, not merge.
        let mut data = vec![0u8; 12 * 24];
        for r in 2..5 {
            for c in 2..5 {
                data[r * 24 + c] = 1;
            }
        }
        for r in 2..7 {
            for c in 9..19 {
                data[r * 24 + c] = 1;
            }
        }
        let labels = map(12, 24, 2, data);
        let set = postprocess(&labels, &PostprocessParams::default());
        let class1: Vec<_> = set.segments.iter().filter(|s| s.class_id == 1).collect();
        assert_eq!(class1.len(), 1);
        assert_eq!(class1[0].size, 50);
    }

    #[test]
    fn postprocess_absent_class_has_no_segments() {
        let labels = map(6, 6, 3, vec![0; 36]);
        let set = postprocess(&labels, &PostprocessParams::default());
        assert!(set.segments.iter().all(|s| s.class_id != 2));
    }

    #[test]
    fn neutral_parameters_reduce_to_plain_labeling() {
        let mut state = 9u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        let data: Vec<u8> = (0..10 * 10).map(|_| (next() % 3) as u8).collect();
        let labels = map(10, 10, 3, data);
        let params = PostprocessParams {
            connectivity: Connectivity::Eight,
            min_size: 1,
            max_gap: 0,
        };
        let set = postprocess(&labels, &params);
        let raw = label_components(&labels, Connectivity::Eight);
        assert_eq!(sorted_pixel_sets(&set), sorted_pixel_sets(&raw));
    }

    #[test]
    fn component_set_json_schema() {
        let labels = map(2, 3, 2, vec![0, 0, 1, 0, 1, 1]);
        let set = label_components(&labels, Connectivity::Eight).with_image_id("img0");
        let json = serde_json::to_value(&set).unwrap();
        assert_eq!(json["image_id"], "img0");
        assert_eq!(json["connectivity"], 8);
        assert_eq!(json["provenance"], "raw");
        assert!(json["segments"][0]["runs"][0].is_array());
        assert!(json["segments"][0]["class"].is_number());
        let back: ComponentSet = serde_json::from_value(json).unwrap();
        assert_eq!(back, set);
    }
}
