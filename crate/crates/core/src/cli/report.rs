//! Machine-readable reports and policy files.
//!
//! Floats are written in shortest round-trip form, so a policy read back from
//! a report is bitwise identical to the one that was written.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::delayed_solver::{GraphModel, GraphPolicy};
use crate::error::{Error, Result};
use crate::simulator::{AffineMap, FeedbackSet, JointModel, LinearPolicySet, SimPolicy};
use crate::team_model::TeamSpec;
use crate::tree_solver::TreePolicy;

use super::spec_file::{matrix, rows, Rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForeignFile {
    /// 0-based index of the DM whose primitives are read.
    pub dm: usize,
    pub coef: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFile {
    pub own: Rows,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub foreign: Vec<ForeignFile>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PolicyFile {
    /// `u_t^i = K_t x_t^i + κ L_t Σ x_0^i` for every DM.
    Tree {
        mode: String,
        kappa: f64,
        horizon: usize,
        #[serde(rename = "K")]
        k: Vec<Rows>,
        #[serde(rename = "L")]
        l: Vec<Rows>,
        sigma: Rows,
        #[serde(rename = "P", default, skip_serializing_if = "Vec::is_empty")]
        p: Vec<Rows>,
    },
    /// Node gains `gains[t][r]` of the information-graph controller.
    Graph {
        horizon: usize,
        nodes: Vec<String>,
        gains: Vec<Vec<Rows>>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        values: Vec<Vec<Rows>>,
    },
    /// Affine maps on primitives, `maps[i][t]`.
    Linear {
        n_dm: usize,
        horizon: usize,
        n: usize,
        m: usize,
        maps: Vec<Vec<MapFile>>,
    },
}

fn mats(list: &[DMatrix<f64>]) -> Vec<Rows> {
    list.iter().map(rows).collect()
}

fn parse_mats(list: &[Rows], what: &str) -> Result<Vec<DMatrix<f64>>> {
    list.iter()
        .enumerate()
        .map(|(t, m)| matrix(m, &format!("{what}[{t}]")))
        .collect()
}

impl PolicyFile {
    pub fn from_tree(policy: &TreePolicy) -> Self {
        PolicyFile::Tree {
            mode: policy.mode.to_string(),
            kappa: policy.mode.kappa(),
            horizon: policy.horizon,
            k: mats(&policy.k),
            l: mats(&policy.l),
            sigma: rows(&policy.sigma),
            p: mats(&policy.p),
        }
    }

    pub fn from_graph(policy: &GraphPolicy) -> Self {
        let graph = &policy.model.graph;
        PolicyFile::Graph {
            horizon: policy.horizon,
            nodes: (0..graph.nodes.len()).map(|r| graph.label(r)).collect(),
            gains: policy.gains.iter().map(|g| mats(g)).collect(),
            values: policy.values.iter().map(|v| mats(v)).collect(),
        }
    }

    pub fn from_linear(set: &LinearPolicySet) -> Self {
        PolicyFile::Linear {
            n_dm: set.n_dm,
            horizon: set.horizon,
            n: set.n,
            m: set.m,
            maps: set
                .maps
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|map| MapFile {
                            own: rows(&map.own),
                            foreign: map
                                .foreign
                                .iter()
                                .map(|(j, f)| ForeignFile { dm: *j, coef: rows(f) })
                                .collect(),
                            offset: map.offset.iter().copied().collect(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Rebuild a runnable policy for `spec`; rejects shape and information
    /// mismatches.
    pub fn to_sim(&self, spec: &TeamSpec, model: &JointModel) -> Result<SimPolicy> {
        let policy = match self {
            PolicyFile::Tree {
                kappa,
                horizon,
                k,
                l,
                sigma,
                ..
            } => {
                if *horizon != model.horizon || k.len() != *horizon || l.len() != *horizon {
                    return Err(Error::Dimension(format!(
                        "tree policy horizon {horizon} does not fit spec horizon {}",
                        model.horizon
                    )));
                }
                let k = parse_mats(k, "policy.K")?;
                let l = parse_mats(l, "policy.L")?;
                let sigma = matrix(sigma, "policy.sigma")?;
                if l.iter().any(|lt| lt.ncols() != sigma.nrows()) {
                    return Err(Error::Dimension("policy.L does not fit policy.sigma".into()));
                }
                let c: Vec<DMatrix<f64>> = l.iter().map(|lt| lt * &sigma * *kappa).collect();
                SimPolicy::Feedback(FeedbackSet {
                    k: vec![k; model.n_dm],
                    c: vec![c; model.n_dm],
                })
            }
            PolicyFile::Graph {
                horizon,
                nodes,
                gains,
                values,
            } => {
                let graph_model = GraphModel::from_spec(spec)?;
                let labels: Vec<String> = (0..graph_model.node_count())
                    .map(|r| graph_model.graph.label(r))
                    .collect();
                if &labels != nodes {
                    return Err(Error::Dimension(format!(
                        "policy nodes {nodes:?} differ from the spec's information graph {labels:?}"
                    )));
                }
                if *horizon != model.horizon || gains.len() != *horizon {
                    return Err(Error::Dimension("graph policy horizon does not fit the spec".into()));
                }
                if gains.iter().any(|g| g.len() != labels.len()) {
                    return Err(Error::Dimension("graph policy needs one gain per node".into()));
                }
                let gains = gains
                    .iter()
                    .map(|g| parse_mats(g, "policy.gains"))
                    .collect::<Result<Vec<_>>>()?;
                for g in &gains {
                    for (r, kr) in g.iter().enumerate() {
                        let size = graph_model.graph.nodes[r].len();
                        if kr.shape() != (size * graph_model.m, size * graph_model.n) {
                            return Err(Error::Dimension("graph gain has the wrong shape".into()));
                        }
                    }
                }
                let values = values
                    .iter()
                    .map(|v| parse_mats(v, "policy.values"))
                    .collect::<Result<Vec<_>>>()?;
                let policy = GraphPolicy {
                    model: graph_model,
                    horizon: *horizon,
                    gains,
                    values,
                };
                SimPolicy::from_graph(&policy, model)?
            }
            PolicyFile::Linear {
                n_dm,
                horizon,
                n,
                m,
                maps,
            } => {
                let mut set = LinearPolicySet::zero(*n_dm, *horizon, *n, *m);
                if maps.len() != *n_dm || maps.iter().any(|row| row.len() != *horizon) {
                    return Err(Error::Dimension("linear policy map grid has the wrong size".into()));
                }
                for (i, row) in maps.iter().enumerate() {
                    for (t, map) in row.iter().enumerate() {
                        set.maps[i][t] = AffineMap {
                            own: matrix(&map.own, "policy.maps.own")?,
                            foreign: map
                                .foreign
                                .iter()
                                .map(|f| Ok((f.dm, matrix(&f.coef, "policy.maps.foreign")?)))
                                .collect::<Result<_>>()?,
                            offset: DVector::from_vec(map.offset.clone()),
                        };
                    }
                }
                SimPolicy::Linear(set)
            }
        };
        policy.check(model)?;
        Ok(policy)
    }
}

/// Read a policy from a report (its `policy` member) or a bare policy file.
pub fn load_policy(path: &Path) -> Result<PolicyFile> {
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let policy = match value {
        Value::Object(mut obj) if obj.contains_key("policy") => obj.remove("policy").expect("checked"),
        other => other,
    };
    Ok(serde_json::from_value(policy)?)
}

pub fn matrix_value(m: &DMatrix<f64>) -> Value {
    serde_json::to_value(rows(m)).expect("finite matrices serialize")
}

pub fn matrices_value(list: &[DMatrix<f64>]) -> Value {
    Value::Array(list.iter().map(matrix_value).collect())
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Delimiter-separated table with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Table cell for an optional number (empty when absent).
pub fn cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}
