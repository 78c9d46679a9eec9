//! JSON spec files: row-major nested arrays, unknown keys rejected.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::team_model::{
    CostSpec, DelayMatrix, Dynamics, InfoStructure, NoiseFamily, NoiseSpec, TeamSpec,
};

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub n_dm: usize,
    pub horizon: usize,
    pub model: ModelFile,
    pub cost: CostFile,
    pub noise: NoiseFile,
    pub info: InfoFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
    #[serde(rename = "A_blocks", default, skip_serializing_if = "Option::is_none")]
    pub a_blocks: Option<Vec<Vec<Rows>>>,
    #[serde(rename = "B_blocks", default, skip_serializing_if = "Option::is_none")]
    pub b_blocks: Option<Vec<Vec<Rows>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFile {
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "R")]
    pub r: Rows,
    #[serde(rename = "R_tilde", default, skip_serializing_if = "Option::is_none")]
    pub r_tilde: Option<Rows>,
    #[serde(rename = "Q_tilde", default, skip_serializing_if = "Option::is_none")]
    pub q_tilde: Option<Rows>,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Rows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseFile {
    pub sigma_w: Rows,
    pub init_diag: Rows,
    pub init_offdiag: Rows,
    #[serde(default)]
    pub family: FamilyName,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    #[default]
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoKind {
    Tree,
    Meanfield,
    Delayed,
}

/// A delay entry: a nonnegative integer, or `null` / `"inf"` for never.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DelayEntry {
    Steps(u32),
    Never(Option<InfinityTag>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InfinityTag {
    #[serde(rename = "inf")]
    Inf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoFile {
    pub kind: InfoKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delays: Option<Vec<Vec<DelayEntry>>>,
}

pub fn matrix(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Input(format!("{what}: matrix must be nonempty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Input(format!("{what}: rows have different lengths")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what}: entries must be finite")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn blocks(grid: &[Vec<Rows>], what: &str) -> Result<Vec<Vec<DMatrix<f64>>>> {
    grid.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, m)| matrix(m, &format!("{what}[{i}][{j}]")))
                .collect()
        })
        .collect()
}

fn optional(rows: &Option<Rows>, what: &str) -> Result<Option<DMatrix<f64>>> {
    rows.as_ref().map(|r| matrix(r, what)).transpose()
}

impl SpecFile {
    pub fn to_spec(&self) -> Result<TeamSpec> {
        let m = &self.model;
        let dynamics = match (&m.a, &m.b, &m.a_blocks, &m.b_blocks) {
            (Some(a), Some(b), None, None) => Dynamics::Homogeneous {
                a: matrix(a, "model.A")?,
                b: matrix(b, "model.B")?,
            },
            (None, None, Some(a), Some(b)) => Dynamics::Blocked {
                a_blocks: blocks(a, "model.A_blocks")?,
                b_blocks: blocks(b, "model.B_blocks")?,
            },
            _ => {
                return Err(Error::Input(
                    "model needs either A and B, or A_blocks and B_blocks".into(),
                ))
            }
        };
        let cost = CostSpec {
            q: matrix(&self.cost.q, "cost.Q")?,
            r: matrix(&self.cost.r, "cost.R")?,
            r_tilde: optional(&self.cost.r_tilde, "cost.R_tilde")?,
            q_tilde: optional(&self.cost.q_tilde, "cost.Q_tilde")?,
            s: optional(&self.cost.s, "cost.S")?,
        };
        let noise = NoiseSpec {
            sigma_w: matrix(&self.noise.sigma_w, "noise.sigma_w")?,
            init_diag: matrix(&self.noise.init_diag, "noise.init_diag")?,
            init_offdiag: matrix(&self.noise.init_offdiag, "noise.init_offdiag")?,
            family: match self.noise.family {
                FamilyName::Gaussian => NoiseFamily::Gaussian,
                FamilyName::Uniform => NoiseFamily::Uniform,
            },
        };
        let info = match (self.info.kind, &self.info.delays) {
            (InfoKind::Tree, None) => InfoStructure::Tree,
            (InfoKind::Meanfield, None) => InfoStructure::MeanFieldTree,
            (InfoKind::Delayed, Some(d)) => {
                if d.len() != self.n_dm || d.iter().any(|row| row.len() != self.n_dm) {
                    return Err(Error::Input(format!(
                        "info.delays must be {0}×{0}",
                        self.n_dm
                    )));
                }
                let entries = d
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|e| match e {
                                DelayEntry::Steps(k) => Some(*k),
                                DelayEntry::Never(_) => None,
                            })
                            .collect()
                    })
                    .collect();
                InfoStructure::Delayed {
                    delays: DelayMatrix::new(entries),
                }
            }
            (InfoKind::Delayed, None) => {
                return Err(Error::Input("delayed info needs a delays matrix".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Input("delays are only allowed for delayed info".into()))
            }
        };
        Ok(TeamSpec {
            n_dm: self.n_dm,
            horizon: self.horizon,
            dynamics,
            cost,
            noise,
            info,
        })
    }

    pub fn from_spec(spec: &TeamSpec) -> Self {
        let model = match &spec.dynamics {
            Dynamics::Homogeneous { a, b } => ModelFile {
                a: Some(rows(a)),
                b: Some(rows(b)),
                a_blocks: None,
                b_blocks: None,
            },
            Dynamics::Blocked { a_blocks, b_blocks } => {
                let grid = |g: &Vec<Vec<DMatrix<f64>>>| -> Vec<Vec<Rows>> {
                    g.iter().map(|row| row.iter().map(rows).collect()).collect()
                };
                ModelFile {
                    a: None,
                    b: None,
                    a_blocks: Some(grid(a_blocks)),
                    b_blocks: Some(grid(b_blocks)),
                }
            }
        };
        let (kind, delays) = match &spec.info {
            InfoStructure::Tree => (InfoKind::Tree, None),
            InfoStructure::MeanFieldTree => (InfoKind::Meanfield, None),
            InfoStructure::Delayed { delays } => (
                InfoKind::Delayed,
                Some(
                    delays
                        .entries
                        .iter()
                        .map(|row| {
                            row.iter()
                                .map(|e| match e {
                                    Some(k) => DelayEntry::Steps(*k),
                                    None => DelayEntry::Never(Some(InfinityTag::Inf)),
                                })
                                .collect()
                        })
                        .collect(),
                ),
            ),
        };
        SpecFile {
            n_dm: spec.n_dm,
            horizon: spec.horizon,
            model,
            cost: CostFile {
                q: rows(&spec.cost.q),
                r: rows(&spec.cost.r),
                r_tilde: spec.cost.r_tilde.as_ref().map(rows),
                q_tilde: spec.cost.q_tilde.as_ref().map(rows),
                s: spec.cost.s.as_ref().map(rows),
            },
            noise: NoiseFile {
                sigma_w: rows(&spec.noise.sigma_w),
                init_diag: rows(&spec.noise.init_diag),
                init_offdiag: rows(&spec.noise.init_offdiag),
                family: match spec.noise.family {
                    NoiseFamily::Gaussian => FamilyName::Gaussian,
                    NoiseFamily::Uniform => FamilyName::Uniform,
                },
            },
            info: InfoFile { kind, delays },
        }
    }
}

pub fn parse_spec(text: &str) -> Result<TeamSpec> {
    serde_json::from_str::<SpecFile>(text)?.to_spec()
}

pub fn load_spec(path: &Path) -> Result<TeamSpec> {
    parse_spec(&std::fs::read_to_string(path)?)
}

pub fn spec_to_json(spec: &TeamSpec) -> String {
    serde_json::to_string_pretty(&SpecFile::from_spec(spec)).expect("spec files always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: &str = r#"{
        "n_dm": 2, "horizon": 3,
        "model": {"A": [[1.0]], "B": [[1.0]]},
        "cost": {"Q": [[1.0]], "R": [[1.0]], "R_tilde": [[0.5]]},
        "noise": {"sigma_w": [[1.0]], "init_diag": [[1.0]], "init_offdiag": [[0.5]]},
        "info": {"kind": "tree"}
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let spec = parse_spec(GOLDEN).unwrap();
        assert_eq!(spec.noise.family, NoiseFamily::Gaussian);
        assert_eq!(spec.cost.r_tilde.as_ref().unwrap()[(0, 0)], 0.5);
        assert_eq!(parse_spec(&spec_to_json(&spec)).unwrap(), spec);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = GOLDEN.replace("\"horizon\": 3", "\"horizon\": 3, \"extra\": 1");
        assert!(matches!(parse_spec(&bad), Err(Error::Parse(_))));
        let bad = GOLDEN.replace("\"R_tilde\"", "\"Rtilde\"");
        assert!(matches!(parse_spec(&bad), Err(Error::Parse(_))));
    }

    #[test]
    fn ragged_and_mixed_models_rejected() {
        let ragged = GOLDEN.replace("\"Q\": [[1.0]]", "\"Q\": [[1.0, 2.0], [1.0]]");
        assert!(matches!(parse_spec(&ragged), Err(Error::Input(_))));
        let mixed = GOLDEN.replace("\"B\": [[1.0]]", "\"B_blocks\": [[[[1.0]]]]");
        assert!(matches!(parse_spec(&mixed), Err(Error::Input(_))));
    }

    #[test]
    fn delays_accept_integers_null_and_inf() {
        let text = GOLDEN.replace(
            "{\"kind\": \"tree\"}",
            "{\"kind\": \"delayed\", \"delays\": [[0, \"inf\"], [null, 0]]}",
        );
        let spec = parse_spec(&text).unwrap();
        let InfoStructure::Delayed { delays } = &spec.info else { panic!() };
        assert_eq!(delays.get(0, 0), Some(0));
        assert_eq!(delays.get(0, 1), None);
        assert_eq!(delays.get(1, 0), None);
        assert_eq!(parse_spec(&spec_to_json(&spec)).unwrap(), spec);
        let bad = text.replace("\"inf\"", "\"never\"");
        assert!(parse_spec(&bad).is_err());
    }
}
