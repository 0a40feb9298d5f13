//! JSON problem files.
//!
//! ```json
//! {
//!   "A": [[...]], "B": [[...]], "C": [[...]], "D": [[...]],
//!   "Q": [[...]], "R": [[...]], "T": [[...]], "S": [[...]],
//!   "N": 15, "rho": 1.2, "eps_p": 1e-4, "eps_d": 1e-4, "max_iter": 5000,
//!   "bounds": {
//!     "x": {"lower": [...], "upper": [...]},
//!     "u": {...}, "y": {...}, "xs": {...}, "us": {...}, "ys": {...}
//!   },
//!   "stage_bounds": [{"stage": 3, "x": {...}}],
//!   "mode": "soft", "beta": 10,
//!   "reference": {"x": [...], "u": [...]},
//!   "x0": [...], "initial_box": {"lower": [...], "upper": [...]}, "steps": 60
//! }
//! ```
//!
//! Matrices are arrays of rows. A `null` limit is infinite. Missing bound
//! groups are unbounded, and `xs`, `us`, `ys` default to `x`, `u`, `y`.
//! `beta` is a scalar or one weight per component of `v_t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{
    BoundMode, BoxBounds, PlantModel, ProblemData, ReferencePair, StageBounds, Weights,
    DEFAULT_MAX_ITERATIONS,
};
use crate::sim::{Formulation, StateBox};

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITERATIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    pub t: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub rho: f64,
    pub eps_p: f64,
    pub eps_d: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub bounds: BoundsSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_bounds: Vec<StageOverride>,
    #[serde(default)]
    pub mode: FileMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<BetaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_box: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Uniform(f64),
    PerComponent(Vec<f64>),
}

/// Lower and upper limits; `None` is infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSpec {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xs: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub us: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ys: Option<LimitSpec>,
}

/// Replaces the limits of one prediction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<LimitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<LimitSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// A parsed and checked problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProblem {
    /// Bounds carry the modes requested by the file.
    pub problem: ProblemData,
    pub mode: FileMode,
    pub beta: Option<BetaSpec>,
    /// Zeros when the file has no reference.
    pub reference: ReferencePair,
    pub x0: Option<DVector<f64>>,
    pub initial_box: Option<StateBox>,
    pub steps: Option<usize>,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::ProblemFile(format!("{field}: {msg}"))
}

fn matrix(field: &str, rows: &[Vec<f64>], shape: Option<(usize, usize)>) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(field_err(field, "matrix must be non-empty"));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != nc {
            return Err(field_err(
                &format!("{field}[{i}]"),
                format!("row has {} entries, expected {nc}", row.len()),
            ));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(field_err(
                &format!("{field}[{i}][{j}]"),
                "entry must be finite",
            ));
        }
    }
    if let Some((er, ec)) = shape {
        if (nr, nc) != (er, ec) {
            return Err(field_err(
                field,
                format!("expected {er}x{ec}, found {nr}x{nc}"),
            ));
        }
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn vector(field: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(field_err(
            field,
            format!("expected {len} entries, found {}", v.len()),
        ));
    }
    if let Some(j) = v.iter().position(|x| !x.is_finite()) {
        return Err(field_err(&format!("{field}[{j}]"), "entry must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn limits(field: &str, spec: Option<&LimitSpec>, len: usize) -> Result<BoxBounds> {
    let Some(spec) = spec else {
        return Ok(BoxBounds::unbounded(len));
    };
    for (name, side) in [("lower", &spec.lower), ("upper", &spec.upper)] {
        if side.len() != len {
            return Err(field_err(
                &format!("{field}.{name}"),
                format!("expected {len} entries, found {}", side.len()),
            ));
        }
    }
    let lower: Vec<f64> = spec
        .lower
        .iter()
        .map(|v| v.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let upper: Vec<f64> = spec
        .upper
        .iter()
        .map(|v| v.unwrap_or(f64::INFINITY))
        .collect();
    for j in 0..len {
        if lower[j].is_nan() || upper[j].is_nan() || !(lower[j] < upper[j]) {
            return Err(field_err(
                &format!("{field}[{j}]"),
                format!("lower {} must be below upper {}", lower[j], upper[j]),
            ));
        }
    }
    Ok(BoxBounds::new(lower, upper, BoundMode::Hard))
}

fn to_limit_spec(b: &BoxBounds) -> LimitSpec {
    let fin = |v: f64| v.is_finite().then_some(v);
    LimitSpec {
        lower: b.lower.iter().copied().map(fin).collect(),
        upper: b.upper.iter().copied().map(fin).collect(),
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path.is_empty() || path == "." {
                Error::ProblemFile(inner.to_string())
            } else {
                field_err(&path, inner)
            }
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem file serializes")
    }

    /// Writes `p` as a file; bounds are taken from stage 1 (stage 0 for `u`
    /// and `y`) with overrides for every stage that differs.
    pub fn from_problem(p: &ProblemData, reference: &ReferencePair) -> Result<Self> {
        let w = &p.weights;
        let b = &p.bounds;
        let n = p.horizon;
        let template = if n > 1 { 1 } else { 0 };

        let modes: Vec<BoundMode> = {
            let mut v = Vec::new();
            v.extend(&b.y[0].modes);
            for i in 1..n {
                v.extend(&b.x[i].modes);
                v.extend(&b.u[i].modes);
                v.extend(&b.y[i].modes);
            }
            v.extend(&b.xs.modes);
            v.extend(&b.us.modes);
            v.extend(&b.ys.modes);
            v
        };
        let (mode, beta) = if modes.iter().all(|m| *m == BoundMode::Hard) {
            (FileMode::Hard, None)
        } else {
            let betas: Vec<f64> = modes
                .iter()
                .map(|m| match m {
                    BoundMode::Soft(beta) => Ok(*beta),
                    _ => Err(Error::InvalidParameter(
                        "problem files cannot mix hard and soft components".into(),
                    )),
                })
                .collect::<Result<_>>()?;
            let beta = if betas.windows(2).all(|w| w[0] == w[1]) {
                BetaSpec::Uniform(betas[0])
            } else {
                BetaSpec::PerComponent(betas)
            };
            (FileMode::Soft, Some(beta))
        };

        let mut stage_bounds = Vec::new();
        for i in 0..n {
            let diff = |v: &[BoxBounds], t: usize| {
                let (a, c) = (&v[i], &v[t]);
                (a.lower != c.lower || a.upper != c.upper).then(|| to_limit_spec(a))
            };
            let x = if i == 0 { None } else { diff(&b.x, template) };
            let o = StageOverride {
                stage: i,
                x,
                u: diff(&b.u, 0),
                y: diff(&b.y, 0),
            };
            if o.x.is_some() || o.u.is_some() || o.y.is_some() {
                stage_bounds.push(o);
            }
        }

        Ok(Self {
            a: matrix_rows(&p.model.a),
            b: matrix_rows(&p.model.b),
            c: matrix_rows(&p.model.c),
            d: matrix_rows(&p.model.d),
            q: matrix_rows(&w.q),
            r: matrix_rows(&w.r),
            t: matrix_rows(&w.t),
            s: matrix_rows(&w.s),
            horizon: n,
            rho: p.rho,
            eps_p: p.eps_p,
            eps_d: p.eps_d,
            max_iter: p.max_iterations,
            bounds: BoundsSpec {
                x: Some(to_limit_spec(&b.x[template])),
                u: Some(to_limit_spec(&b.u[0])),
                y: Some(to_limit_spec(&b.y[0])),
                xs: Some(to_limit_spec(&b.xs)),
                us: Some(to_limit_spec(&b.us)),
                ys: Some(to_limit_spec(&b.ys)),
            },
            stage_bounds,
            mode,
            beta,
            reference: Some(ReferenceSpec {
                x: reference.x.iter().copied().collect(),
                u: reference.u.iter().copied().collect(),
            }),
            x0: None,
            initial_box: None,
            steps: None,
        })
    }

    pub fn load(&self) -> Result<LoadedProblem> {
        let a = matrix("A", &self.a, None)?;
        let nx = a.nrows();
        if a.ncols() != nx {
            return Err(field_err("A", "must be square"));
        }
        let b = matrix("B", &self.b, None)?;
        if b.nrows() != nx {
            return Err(field_err(
                "B",
                format!("expected {nx} rows, found {}", b.nrows()),
            ));
        }
        let nu = b.ncols();
        let c = matrix("C", &self.c, None)?;
        if c.ncols() != nx {
            return Err(field_err(
                "C",
                format!("expected {nx} columns, found {}", c.ncols()),
            ));
        }
        let ny = c.nrows();
        let d = matrix("D", &self.d, Some((ny, nu)))?;
        let model = PlantModel::new(a, b, c, d)?;
        let weights = Weights {
            q: matrix("Q", &self.q, Some((nx, nx)))?,
            r: matrix("R", &self.r, Some((nu, nu)))?,
            t: matrix("T", &self.t, Some((nx, nx)))?,
            s: matrix("S", &self.s, Some((nu, nu)))?,
        };

        let n = self.horizon;
        if n < 2 {
            return Err(field_err("N", "horizon must be at least 2"));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("eps_p", self.eps_p),
            ("eps_d", self.eps_d),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(field_err(name, "must be positive and finite"));
            }
        }
        if self.max_iter == 0 {
            return Err(field_err("max_iter", "must be positive"));
        }

        let bs = &self.bounds;
        let x = limits("bounds.x", bs.x.as_ref(), nx)?;
        let u = limits("bounds.u", bs.u.as_ref(), nu)?;
        let y = limits("bounds.y", bs.y.as_ref(), ny)?;
        let mut stages = StageBounds {
            x: vec![x.clone(); n],
            u: vec![u.clone(); n],
            y: vec![y.clone(); n],
            xs: limits("bounds.xs", bs.xs.as_ref().or(bs.x.as_ref()), nx)?,
            us: limits("bounds.us", bs.us.as_ref().or(bs.u.as_ref()), nu)?,
            ys: limits("bounds.ys", bs.ys.as_ref().or(bs.y.as_ref()), ny)?,
        };
        for (k, o) in self.stage_bounds.iter().enumerate() {
            let f = format!("stage_bounds[{k}]");
            if o.stage >= n {
                return Err(field_err(
                    &format!("{f}.stage"),
                    format!("must be below N = {n}"),
                ));
            }
            if let Some(s) = &o.x {
                stages.x[o.stage] = limits(&format!("{f}.x"), Some(s), nx)?;
            }
            if let Some(s) = &o.u {
                stages.u[o.stage] = limits(&format!("{f}.u"), Some(s), nu)?;
            }
            if let Some(s) = &o.y {
                stages.y[o.stage] = limits(&format!("{f}.y"), Some(s), ny)?;
            }
        }

        if let Some(beta) = &self.beta {
            let bad = match beta {
                BetaSpec::Uniform(v) => (!(v.is_finite() && *v >= 0.0)).then_some(None),
                BetaSpec::PerComponent(v) => v
                    .iter()
                    .position(|b| !(b.is_finite() && *b >= 0.0))
                    .map(Some),
            };
            if let Some(j) = bad {
                let f = j.map_or("beta".to_string(), |j| format!("beta[{j}]"));
                return Err(field_err(&f, "weights must be finite and non-negative"));
            }
        }
        let bounds = match self.mode {
            FileMode::Hard => stages,
            FileMode::Soft => soften(stages, self.beta.as_ref())?,
        };

        let reference = match &self.reference {
            Some(r) => ReferencePair {
                x: vector("reference.x", &r.x, nx)?,
                u: vector("reference.u", &r.u, nu)?,
            },
            None => ReferencePair::zeros(nx, nu),
        };
        let x0 = self.x0.as_ref().map(|v| vector("x0", v, nx)).transpose()?;
        let initial_box = match &self.initial_box {
            Some(spec) => {
                let lb = limits("initial_box", Some(spec), nx)?;
                if lb.lower.iter().chain(&lb.upper).any(|v| !v.is_finite()) {
                    return Err(field_err("initial_box", "limits must be finite"));
                }
                Some(StateBox {
                    lower: DVector::from_vec(lb.lower),
                    upper: DVector::from_vec(lb.upper),
                })
            }
            None => None,
        };

        Ok(LoadedProblem {
            problem: ProblemData {
                model,
                weights,
                horizon: n,
                bounds,
                rho: self.rho,
                eps_p: self.eps_p,
                eps_d: self.eps_d,
                max_iterations: self.max_iter,
            },
            mode: self.mode,
            beta: self.beta.clone(),
            reference,
            x0,
            initial_box,
            steps: self.steps,
        })
    }
}

fn soften(stages: StageBounds, beta: Option<&BetaSpec>) -> Result<StageBounds> {
    match beta {
        None => Err(field_err("beta", "required when mode is soft")),
        Some(BetaSpec::Uniform(b)) => Ok(stages.softened(*b)),
        Some(BetaSpec::PerComponent(b)) => stages
            .softened_per_component(b)
            .map_err(|e| field_err("beta", e)),
    }
}

impl LoadedProblem {
    /// The problem under `formulation`: `Hard` enforces every bound, `Soft`
    /// softens them with the file's `beta`.
    pub fn formulated(&self, formulation: Formulation) -> Result<ProblemData> {
        match formulation {
            Formulation::Hard => Ok(self
                .problem
                .with_bounds(self.problem.bounds.clone().hardened())),
            Formulation::Soft => match self.mode {
                FileMode::Soft => Ok(self.problem.clone()),
                FileMode::Hard => Ok(self
                    .problem
                    .with_bounds(soften(self.problem.bounds.clone(), self.beta.as_ref())?)),
            },
        }
    }
}

pub fn load_problem_str(text: &str) -> Result<LoadedProblem> {
    ProblemFile::from_json(text)?.load()
}

pub fn load_problem_file(path: &std::path::Path) -> Result<LoadedProblem> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ProblemFile(format!("{}: {e}", path.display())))?;
    load_problem_str(&text)
}
