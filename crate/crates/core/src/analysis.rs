//! Post-hoc analysis of trained allocation matrices: routing profiles,
//! agglomerative task clustering, agreement with a reference grouping, and
//! heatmap exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::LayerSlot;
use crate::composer::ComposedAdapter;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::routing::RoutingMode;

/// A task's eval-mode normalized common-skill weights, concatenated over
/// every adapted matrix in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRoutingProfile {
    pub task: usize,
    pub values: Vec<f64>,
}

pub fn routing_profiles(model: &TransformerModel) -> Result<Vec<TaskRoutingProfile>> {
    (0..model.config().tasks)
        .map(|task| {
            let mut values = Vec::new();
            for a in model.adapters() {
                let w = a
                    .allocation()
                    .routing_weights(task, a.slot().index(), RoutingMode::Eval)?;
                values.extend(w.common);
            }
            Ok(TaskRoutingProfile { task, values })
        })
        .collect()
}

/// One agglomeration step. Leaves are `0..n`; the cluster formed by merge
/// `i` gets id `n + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

/// Relative tolerance under which two linkage distances count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
        .sqrt()
}

/// Whether `candidate` beats `best` given their tie-break keys.
pub(crate) fn better(candidate: (f64, (usize, usize)), best: (f64, (usize, usize))) -> bool {
    let scale = candidate.0.abs().max(best.0.abs()).max(f64::MIN_POSITIVE);
    if (candidate.0 - best.0).abs() <= TIE_TOLERANCE * scale {
        candidate.1 < best.1
    } else {
        candidate.0 < best.0
    }
}

/// Average-linkage agglomerative clustering under Euclidean distance.
/// Ties go to the pair whose lowest member task ids are smallest.
pub fn cluster_tasks(profiles: &[Vec<f64>]) -> Result<Dendrogram> {
    let n = profiles.len();
    if n < 2 {
        return Err(Error::Contract(format!("clustering needs at least 2 tasks, got {n}")));
    }
    let width = profiles[0].len();
    if let Some(p) = profiles.iter().find(|p| p.len() != width) {
        return Err(Error::shape("cluster_tasks", &[width], &[p.len()]));
    }
    // Sum of member-pair distances between live clusters; average linkage
    // divides by the product of sizes.
    let mut sums = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sums[i][j] = euclidean(&profiles[i], &profiles[j]);
        }
    }
    // Per slot: cluster id, size, lowest leaf.
    let mut live: Vec<Option<(usize, usize, usize)>> = (0..n).map(|i| Some((i, 1, i))).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..n {
            let Some((_, sa, la)) = live[a] else { continue };
            for b in a + 1..n {
                let Some((_, sb, lb)) = live[b] else { continue };
                let d = sums[a][b] / (sa * sb) as f64;
                let key = (la.min(lb), la.max(lb));
                if best.map_or(true, |(bd, bk, _, _)| better((d, key), (bd, bk))) {
                    best = Some((d, key, a, b));
                }
            }
        }
        let (distance, _, a, b) = best.expect("two live clusters");
        let (ida, sa, la) = live[a].expect("live");
        let (idb, sb, lb) = live[b].expect("live");
        let (left, right) = if la < lb { (ida, idb) } else { (idb, ida) };
        merges.push(Merge {
            left,
            right,
            distance,
            size: sa + sb,
        });
        for k in 0..n {
            let s = sums[a][k] + sums[b][k];
            sums[a][k] = s;
            sums[k][a] = s;
        }
        live[a] = Some((n + step, sa + sb, la.min(lb)));
        live[b] = None;
    }
    Ok(Dendrogram { leaves: n, merges })
}

impl Dendrogram {
    /// Leaf members of every cluster id.
    fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = (0..self.leaves).map(|i| vec![i]).collect();
        for m in &self.merges {
            let mut joined = out[m.left].clone();
            joined.extend(&out[m.right]);
            joined.sort_unstable();
            out.push(joined);
        }
        out
    }

    /// Group labels after stopping with `k` clusters. Labels are numbered
    /// in order of each group's lowest task id.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.leaves {
            return Err(Error::OutOfRange {
                what: "cluster count",
                index: k,
                limit: self.leaves + 1,
            });
        }
        let members = self.members();
        let mut owner: Vec<usize> = (0..self.leaves).collect();
        for id in self.leaves..2 * self.leaves - k {
            for &leaf in &members[id] {
                owner[leaf] = id;
            }
        }
        let mut seen: Vec<usize> = Vec::new();
        Ok(owner
            .iter()
            .map(|o| match seen.iter().position(|s| s == o) {
                Some(g) => g,
                None => {
                    seen.push(*o);
                    seen.len() - 1
                }
            })
            .collect())
    }

    /// Newick string with branch lengths equal to height differences.
    pub fn to_newick(&self, names: &[String]) -> String {
        fn node(d: &Dendrogram, id: usize, names: &[String], parent: f64, out: &mut String) {
            let height = if id < d.leaves {
                out.push_str(&names[id]);
                0.0
            } else {
                let m = &d.merges[id - d.leaves];
                out.push('(');
                node(d, m.left, names, m.distance, out);
                out.push(',');
                node(d, m.right, names, m.distance, out);
                out.push(')');
                m.distance
            };
            let _ = write!(out, ":{}", parent - height);
        }
        let mut out = String::new();
        match self.merges.last() {
            Some(root) => {
                out.push('(');
                node(self, root.left, names, root.distance, &mut out);
                out.push(',');
                node(self, root.right, names, root.distance, &mut out);
                out.push(')');
            }
            None => out.push_str(names.first().map_or("", String::as_str)),
        }
        out.push(';');
        out
    }
}

fn choose2(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("partition without items".into()));
    }
    if a.len() != b.len() {
        return Err(Error::shape("adjusted_rand_index", &[a.len()], &[b.len()]));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(a.len());
    let expected = if total == 0.0 { 0.0 } else { rows * cols / total };
    let max = (rows + cols) / 2.0;
    if max == expected {
        // Both partitions trivial (all singletons or one block).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Allocation matrix of one adapted projection as CSV rows.
/// Columns are `task,skill_0..,specific_0..`; common weights are eval-mode
/// normalized, specific weights are the raw `W_B` entries.
pub fn heatmap_rows(adapter: &ComposedAdapter) -> Result<Vec<Vec<f64>>> {
    let alloc = adapter.allocation();
    (0..alloc.tasks())
        .map(|t| {
            let w = alloc.routing_weights(t, adapter.slot().index(), RoutingMode::Eval)?;
            let mut row = w.common;
            row.extend(w.specific);
            Ok(row)
        })
        .collect()
}

pub fn heatmap_header(common: usize, specific: usize) -> String {
    let mut h = String::from("task");
    for i in 0..common {
        let _ = write!(h, ",skill_{i}");
    }
    for i in 0..specific {
        let _ = write!(h, ",specific_{i}");
    }
    h
}

fn render(rows: &[Vec<f64>], common: usize) -> String {
    let specific = rows.first().map_or(0, |r| r.len() - common);
    let mut out = heatmap_header(common, specific);
    out.push('\n');
    for (t, row) in rows.iter().enumerate() {
        let _ = write!(out, "{t}");
        for x in row {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

/// Rescales `cols` of every row to `[0, 1]` by the block's min and max; a
/// constant block maps to zeros.
fn min_max(rows: &mut [Vec<f64>], cols: std::ops::Range<usize>) {
    let values = rows.iter().flat_map(|r| r[cols.clone()].iter().copied());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    for r in rows.iter_mut() {
        for x in &mut r[cols.clone()] {
            *x = if hi > lo { (*x - lo) / (hi - lo) } else { 0.0 };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFiles {
    pub raw: PathBuf,
    pub normalized: PathBuf,
}

/// Writes `alloc_<slot>.csv` and `alloc_<slot>_minmax.csv` for every
/// adapted matrix. The common and specific blocks are normalized separately.
pub fn export_heatmaps(model: &TransformerModel, dir: &Path) -> Result<Vec<HeatmapFiles>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for a in model.adapters() {
        let common = a.allocation().common_count().max(1);
        let mut rows = heatmap_rows(a)?;
        let name = file_stem(a.slot());
        let raw = dir.join(format!("{name}.csv"));
        fs::write(&raw, render(&rows, common)).map_err(|e| Error::io(&raw, e))?;
        let width = rows.first().map_or(0, Vec::len);
        min_max(&mut rows, 0..common);
        min_max(&mut rows, common..width);
        let normalized = dir.join(format!("{name}_minmax.csv"));
        fs::write(&normalized, render(&rows, common)).map_err(|e| Error::io(&normalized, e))?;
        files.push(HeatmapFiles { raw, normalized });
    }
    Ok(files)
}

fn file_stem(slot: LayerSlot) -> String {
    format!("alloc_{}", slot.name().replace('.', "_"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_profiles_merge_first_at_zero() {
        let p = vec![vec![0.0, 1.0], vec![0.3, 0.2], vec![0.3, 0.2], vec![5.0, 5.0]];
        let d = cluster_tasks(&p).unwrap();
        assert_eq!((d.merges[0].left, d.merges[0].right), (1, 2));
        assert_eq!(d.merges[0].distance, 0.0);
        assert_eq!(d.merges.len(), 3);
    }

    #[test]
    fn simplex_corners_tie_break_to_lowest_pair() {
        let p: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let d = cluster_tasks(&p).unwrap();
        assert_eq!((d.merges[0].left, d.merges[0].right), (0, 1));
        assert!(d.merges.windows(2).all(|w| w[0].distance <= w[1].distance * (1.0 + 1e-12)));
    }

    #[test]
    fn cut_gives_k_groups() {
        let p = vec![vec![0.0], vec![0.1], vec![5.0], vec![5.2], vec![9.0]];
        let d = cluster_tasks(&p).unwrap();
        assert_eq!(d.cut(3).unwrap(), vec![0, 0, 1, 1, 2]);
        assert_eq!(d.cut(1).unwrap(), vec![0; 5]);
        assert_eq!(d.cut(5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(d.cut(0).is_err() && d.cut(6).is_err());
        let names: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
        let nw = d.to_newick(&names);
        assert!(nw.starts_with('(') && nw.ends_with(");"), "{nw}");
        for n in &names {
            assert_eq!(nw.matches(n.as_str()).count(), 1);
        }
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 1, 2, 3], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert!(adjusted_rand_index(&[], &[]).is_err());
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn mismatched_profiles_are_rejected() {
        assert!(cluster_tasks(&[vec![0.0, 1.0], vec![1.0]]).is_err());
        assert!(cluster_tasks(&[vec![0.0]]).is_err());
    }
}
