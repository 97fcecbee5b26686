//! Certificate queries read from TOML.
//!
//! ```toml
//! [system]            # or [sine] with a, b, c, d, alpha
//! a = [[0.5]]
//! b = [[1.0]]
//! c = [[1.0]]
//! d = [[0.2]]
//!
//! [supply]
//! kind = "passive"    # "bounded_gain" with gamma, or "qsr" with q, s, r
//! ```
//!
//! A memoryless system leaves `a`, `b` and `c` empty; its input and output
//! sizes come from `d`.

use serde::{Deserialize, Serialize};

use crate::dissipativity::{certify_nonlinear, kyp_passivity, kyp_qsr, Certificate, QsrSupply};
use crate::error::{Error, Result};
use crate::numlin::Matrix;
use crate::plant::{DiscreteStateSpace, SinePlant};

type Rows = Vec<Vec<f64>>;

fn matrix(rows: &Rows, fallback: (usize, usize), what: &str) -> Result<Matrix> {
    if rows.is_empty() || rows.iter().all(|r| r.is_empty()) {
        return Ok(Matrix::zeros(fallback.0, fallback.1));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse(format!("matrix '{what}' has ragged rows")));
    }
    Matrix::from_vec(rows.len(), cols, rows.concat())
}

/// Row-list form of a matrix, as used in query and result files.
pub fn matrix_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row_slice(i).to_vec()).collect()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(default)]
    pub a: Rows,
    #[serde(default)]
    pub b: Rows,
    #[serde(default)]
    pub c: Rows,
    pub d: Rows,
}

impl SystemSpec {
    pub fn build(&self) -> Result<DiscreteStateSpace> {
        let d = matrix(&self.d, (0, 0), "d")?;
        let (p, m) = d.shape();
        let a = matrix(&self.a, (0, 0), "a")?;
        let n = a.rows();
        DiscreteStateSpace::new(
            a,
            matrix(&self.b, (n, m), "b")?,
            matrix(&self.c, (p, n), "c")?,
            d,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupplySpec {
    Passive,
    BoundedGain { gamma: f64 },
    Qsr { q: Rows, s: Rows, r: Rows },
}

impl SupplySpec {
    pub fn build(&self, outputs: usize, inputs: usize) -> Result<QsrSupply> {
        match self {
            SupplySpec::Passive => {
                if outputs != inputs {
                    return Err(Error::Precondition("passivity needs as many inputs as outputs".into()));
                }
                Ok(QsrSupply::passive(inputs))
            }
            SupplySpec::BoundedGain { gamma } => {
                if outputs != inputs {
                    return Err(Error::Precondition("the gain supply is built for square systems".into()));
                }
                Ok(QsrSupply::bounded_gain(*gamma, inputs))
            }
            SupplySpec::Qsr { q, s, r } => QsrSupply::new(
                matrix(q, (outputs, outputs), "q")?,
                matrix(s, (outputs, inputs), "s")?,
                matrix(r, (inputs, inputs), "r")?,
            ),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertifyQuery {
    #[serde(default)]
    pub system: Option<SystemSpec>,
    #[serde(default)]
    pub sine: Option<SinePlant>,
    pub supply: SupplySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyOutcome {
    pub certified: bool,
    pub p: Option<Rows>,
    pub residual: Option<f64>,
}

impl CertifyOutcome {
    fn from_cert(c: Option<Certificate>) -> Self {
        match c {
            Some(c) => CertifyOutcome {
                certified: true,
                p: Some(matrix_rows(&c.p)),
                residual: Some(c.residual),
            },
            None => CertifyOutcome {
                certified: false,
                p: None,
                residual: None,
            },
        }
    }
}

impl CertifyQuery {
    pub fn from_toml(text: &str) -> Result<Self> {
        let q: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if q.system.is_some() == q.sine.is_some() {
            return Err(Error::Config("give exactly one of [system] or [sine]".into()));
        }
        Ok(q)
    }

    pub fn run(&self) -> Result<CertifyOutcome> {
        if let Some(plant) = &self.sine {
            let qsr = self.supply.build(1, 1)?;
            return Ok(CertifyOutcome::from_cert(certify_nonlinear(plant, &qsr)?));
        }
        let sys = self.system.as_ref().expect("checked when parsed").build()?;
        let cert = match self.supply {
            SupplySpec::Passive if sys.is_square() => kyp_passivity(&sys)?,
            _ => kyp_qsr(&sys, &self.supply.build(sys.n_outputs(), sys.n_inputs())?)?,
        };
        Ok(CertifyOutcome::from_cert(cert))
    }
}
