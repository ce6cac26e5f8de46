use std::collections::BTreeSet;

use serde::Serialize;

use crate::guest::Line;

/// Correspondence between the lines of two texts (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LineMapping {
    pub pairs: Vec<(Line, Line)>,
    pub unmatched_a: BTreeSet<Line>,
    pub unmatched_b: BTreeSet<Line>,
}

impl LineMapping {
    pub fn map_a_to_b(&self, line: Line) -> Option<Line> {
        self.pairs.binary_search_by_key(&line, |p| p.0).ok().map(|i| self.pairs[i].1)
    }

    pub fn map_b_to_a(&self, line: Line) -> Option<Line> {
        self.pairs.binary_search_by_key(&line, |p| p.1).ok().map(|i| self.pairs[i].0)
    }

    pub fn is_identity(&self) -> bool {
        self.unmatched_a.is_empty() && self.unmatched_b.is_empty() && self.pairs.iter().all(|(x, y)| x == y)
    }

    /// The same mapping seen from the other side.
    pub fn swapped(&self) -> LineMapping {
        LineMapping {
            pairs: self.pairs.iter().map(|(x, y)| (*y, *x)).collect(),
            unmatched_a: self.unmatched_b.clone(),
            unmatched_b: self.unmatched_a.clone(),
        }
    }
}

/// Longest common subsequence over exact line texts. Among equally long
/// subsequences the walk takes each match as early as possible, preferring
/// to skip a line of `a` when both skips keep the optimum.
pub fn diff_code(a: &str, b: &str) -> LineMapping {
    let la: Vec<&str> = a.lines().collect();
    let lb: Vec<&str> = b.lines().collect();
    let (n, m) = (la.len(), lb.len());
    // suffix[i][j] = LCS length of la[i..] and lb[j..]
    let w = m + 1;
    let mut suffix = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i * w + j] = if la[i] == lb[j] {
                suffix[(i + 1) * w + j + 1] + 1
            } else {
                suffix[(i + 1) * w + j].max(suffix[i * w + j + 1])
            };
        }
    }
    let mut out = LineMapping::default();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if la[i] == lb[j] {
            out.pairs.push((i as Line + 1, j as Line + 1));
            i += 1;
            j += 1;
        } else if suffix[(i + 1) * w + j] >= suffix[i * w + j + 1] {
            out.unmatched_a.insert(i as Line + 1);
            i += 1;
        } else {
            out.unmatched_b.insert(j as Line + 1);
            j += 1;
        }
    }
    out.unmatched_a.extend((i..n).map(|x| x as Line + 1));
    out.unmatched_b.extend((j..m).map(|x| x as Line + 1));
    out
}
