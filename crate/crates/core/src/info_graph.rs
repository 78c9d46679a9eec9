//! Information graph of the delayed-sharing pattern.
//!
//! Node `s_k^j` is the set of DMs that know DM `j`'s local state with a lag of
//! at most `k` steps. Each node has a unique successor `s_{k+1}^j`, and chains
//! end in self-loops once the reachable set stops growing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::team_model::{DelayMatrix, ValidationReport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfoGraph {
    /// Sorted 0-based DM index sets, ordered by size then lexicographically.
    pub nodes: Vec<Vec<usize>>,
    /// `successor[r]` is the node index `s` with edge `r → s`.
    pub successor: Vec<usize>,
    /// `root[i]` is the node `s_0^i` where DM `i`'s primitives enter.
    pub root: Vec<usize>,
}

impl InfoGraph {
    pub fn n_dm(&self) -> usize {
        self.root.len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.successor.iter().enumerate().map(|(r, &s)| (r, s)).collect()
    }

    pub fn predecessors(&self, s: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&r| self.successor[r] == s).collect()
    }

    pub fn is_self_loop(&self, r: usize) -> bool {
        self.successor[r] == r
    }

    /// DMs whose primitives are injected at node `s`.
    pub fn injected(&self, s: usize) -> Vec<usize> {
        (0..self.n_dm()).filter(|&i| self.root[i] == s).collect()
    }

    /// Node indices containing DM `i`.
    pub fn nodes_containing(&self, i: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&r| self.nodes[r].binary_search(&i).is_ok())
            .collect()
    }

    /// Position of DM `i` inside node `r`.
    pub fn position(&self, r: usize, i: usize) -> Option<usize> {
        self.nodes[r].binary_search(&i).ok()
    }

    /// 1-based label such as `{1,2}`.
    pub fn label(&self, r: usize) -> String {
        subset_label(&self.nodes[r])
    }

    /// Adjacency listing, one `{..} -> {..}` line per node.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for (r, s) in self.edges() {
            let _ = writeln!(out, "{} -> {}", self.label(r), self.label(s));
        }
        out
    }
}

pub fn subset_label(set: &[usize]) -> String {
    let inner: Vec<String> = set.iter().map(|i| (i + 1).to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

fn is_linked(d: Option<u32>, max: u32) -> bool {
    d.is_some_and(|d| d <= max)
}

fn check_delays(delays: &DelayMatrix) -> Result<()> {
    let nd = delays.n_dm();
    for i in 0..nd {
        if delays.entries[i].len() != nd {
            return Err(Error::Dimension(format!("delay matrix must be {nd}x{nd}")));
        }
        if delays.get(i, i) != Some(0) {
            return Err(Error::Unsupported(format!(
                "delay D[{0}][{0}] must be zero",
                i + 1
            )));
        }
        for j in 0..nd {
            if let Some(d) = delays.get(i, j) {
                if d > 1 {
                    return Err(Error::Unsupported(format!(
                        "delay D[{}][{}] = {d} exceeds one step",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
    }
    if let Some(cycle) = zero_delay_cycle(delays) {
        return Err(Error::Unsupported(format!(
            "zero-delay cycle through {}",
            subset_label(&cycle)
        )));
    }
    Ok(())
}

/// Adds every DM that learns a member's state with zero delay.
fn zero_closure(set: &mut [bool], delays: &DelayMatrix) {
    let nd = set.len();
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..nd {
            if set[i] {
                continue;
            }
            if (0..nd).any(|l| set[l] && l != i && is_linked(delays.get(i, l), 0)) {
                set[i] = true;
                changed = true;
            }
        }
    }
}

fn successor_set(set: &[bool], delays: &DelayMatrix) -> Vec<bool> {
    let nd = set.len();
    let mut next: Vec<bool> = (0..nd)
        .map(|i| set[i] || (0..nd).any(|l| set[l] && is_linked(delays.get(i, l), 1)))
        .collect();
    zero_closure(&mut next, delays);
    next
}

fn to_indices(set: &[bool]) -> Vec<usize> {
    set.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// Build the node set and successor map from a delay matrix.
pub fn build_info_graph(delays: &DelayMatrix) -> Result<InfoGraph> {
    check_delays(delays)?;
    let nd = delays.n_dm();
    if nd == 0 {
        return Err(Error::Dimension("delay matrix is empty".into()));
    }
    let mut succ_of: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    let mut roots = Vec::with_capacity(nd);
    for j in 0..nd {
        let mut set = vec![false; nd];
        set[j] = true;
        zero_closure(&mut set, delays);
        roots.push(to_indices(&set));
        loop {
            let key = to_indices(&set);
            if succ_of.contains_key(&key) {
                break;
            }
            let next = successor_set(&set, delays);
            succ_of.insert(key, to_indices(&next));
            set = next;
        }
    }
    let mut nodes: Vec<Vec<usize>> = succ_of.keys().cloned().collect();
    nodes.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let index: BTreeMap<&Vec<usize>, usize> = nodes.iter().enumerate().map(|(k, v)| (v, k)).collect();
    let successor = nodes.iter().map(|r| index[&succ_of[r]]).collect();
    let root = roots.iter().map(|r| index[r]).collect();
    Ok(InfoGraph {
        nodes,
        successor,
        root,
    })
}

/// All-pairs shortest total delay; `dist[i][j]` is the delay from `j` to `i`.
pub fn shortest_delays(delays: &DelayMatrix) -> Vec<Vec<Option<u64>>> {
    let nd = delays.n_dm();
    let mut dist: Vec<Vec<Option<u64>>> = (0..nd)
        .map(|i| (0..nd).map(|j| delays.get(i, j).map(u64::from)).collect())
        .collect();
    for l in 0..nd {
        for i in 0..nd {
            for j in 0..nd {
                if let (Some(a), Some(b)) = (dist[i][l], dist[l][j]) {
                    if dist[i][j].is_none_or(|d| a + b < d) {
                        dist[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    dist
}

/// A directed cycle of distinct DMs joined by zero-delay links, if any.
fn zero_delay_cycle(delays: &DelayMatrix) -> Option<Vec<usize>> {
    let nd = delays.n_dm();
    // reach[i][j]: j reaches i through zero-delay links of distinct DMs.
    let mut reach: Vec<Vec<bool>> = (0..nd)
        .map(|i| (0..nd).map(|j| i != j && is_linked(delays.get(i, j), 0)).collect())
        .collect();
    for l in 0..nd {
        for i in 0..nd {
            for j in 0..nd {
                if reach[i][l] && reach[l][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let members: Vec<usize> = (0..nd).filter(|&i| reach[i][i]).collect();
    (!members.is_empty()).then_some(members)
}

/// Structural checks on delays and the sparsity of the coupling blocks.
pub fn validate_sparsity(
    delays: &DelayMatrix,
    a_blocks: &[Vec<DMatrix<f64>>],
    b_blocks: &[Vec<DMatrix<f64>>],
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nd = delays.n_dm();

    let bad_diag: Vec<usize> = (0..nd).filter(|&i| delays.get(i, i) != Some(0)).collect();
    report.push(
        "delay diagonal zero",
        bad_diag.is_empty(),
        if bad_diag.is_empty() {
            String::new()
        } else {
            format!("nonzero self-delay for DMs {}", subset_label(&bad_diag))
        },
    );

    let mut long = Vec::new();
    for i in 0..nd {
        for j in 0..nd {
            if let Some(d) = delays.get(i, j) {
                if d > 1 {
                    long.push(format!("D[{}][{}] = {d}", i + 1, j + 1));
                }
            }
        }
    }
    report.push(
        "finite delays at most one",
        long.is_empty(),
        long.join(", "),
    );

    let cycle = zero_delay_cycle(delays);
    report.push(
        "zero-delay cycle",
        cycle.is_none(),
        cycle.map_or(String::new(), |c| format!("DMs {} form a zero-delay cycle", subset_label(&c))),
    );

    let dist = shortest_delays(delays);
    for i in 0..nd {
        for j in 0..nd {
            if i == j || dist[i][j].is_some_and(|d| d <= 1) {
                continue;
            }
            for (name, blocks) in [("A", a_blocks), ("B", b_blocks)] {
                if !linalg::is_zero(&blocks[i][j]) {
                    report.push(
                        format!("sparsity: {name}^{{{}{}}} must be zero", i + 1, j + 1),
                        false,
                        format!(
                            "DM {} learns DM {}'s state with delay {}",
                            i + 1,
                            j + 1,
                            dist[i][j].map_or("infinite".to_string(), |d| d.to_string())
                        ),
                    );
                }
            }
        }
    }
    if report.checks.iter().all(|c| !c.name.starts_with("sparsity")) {
        report.push("sparsity pattern", true, "");
    }
    report
}

/// Stack the `(row_block × col_block)` blocks of `m` indexed by the given DM sets.
pub fn partition(
    m: &DMatrix<f64>,
    rows: &[usize],
    cols: &[usize],
    row_block: usize,
    col_block: usize,
) -> Result<DMatrix<f64>> {
    let max_row = rows.iter().max().map_or(0, |r| (r + 1) * row_block);
    let max_col = cols.iter().max().map_or(0, |c| (c + 1) * col_block);
    if max_row > m.nrows() || max_col > m.ncols() {
        return Err(Error::Dimension(format!(
            "partition {} x {} is out of range for a {}x{} matrix",
            subset_label(rows),
            subset_label(cols),
            m.nrows(),
            m.ncols()
        )));
    }
    let mut out = DMatrix::zeros(rows.len() * row_block, cols.len() * col_block);
    for (bi, &i) in rows.iter().enumerate() {
        for (bj, &j) in cols.iter().enumerate() {
            out.view_mut((bi * row_block, bj * col_block), (row_block, col_block))
                .copy_from(&m.view((i * row_block, j * col_block), (row_block, col_block)));
        }
    }
    Ok(out)
}
