//! QSR supply rates, KYP-type certificates, the convexified dissipativity
//! constraint, the two-system interconnection test and the certificate for
//! the scalar sine plant.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lmi::{self, AdmmSettings, AffMat, LmiBlock, SdpProblem, VarMat, VarRegistry};
use crate::numlin::{
    inverse, is_negative_definite, is_positive_definite, max_eigenvalue, min_eigenvalue, sym_eig, Matrix, EPS_DEF,
};
use crate::plant::{DiscreteStateSpace, SinePlant};

/// Shift used to encode strict LMIs.
pub const LMI_MARGIN: f64 = 1e-8;
/// Lower bound imposed on certificate matrices, `P ⪰ P_FLOOR·I`.
pub const P_FLOOR: f64 = 1e-6;
/// A certificate is accepted when the LMI's largest eigenvalue is below this.
pub const CERT_TOL: f64 = 1e-6;

/// Supply rate `w(u, y) = yᵀQy + 2yᵀSu + uᵀRu` for a system with `m` inputs
/// and `p` outputs (`Q` is p×p, `S` p×m, `R` m×m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QsrSupply {
    pub q: Matrix,
    pub s: Matrix,
    pub r: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum SupplyCase {
    Passive,
    BoundedGain { gamma: f64 },
    InteriorConic { a: f64, b: f64 },
}

impl QsrSupply {
    pub fn new(q: Matrix, s: Matrix, r: Matrix) -> Result<Self> {
        if !q.is_square() || !r.is_square() || s.rows() != q.rows() || s.cols() != r.rows() {
            return Err(dim_err(format!(
                "supply needs Q p×p, S p×m, R m×m; got {:?}, {:?}, {:?}",
                q.shape(),
                s.shape(),
                r.shape()
            )));
        }
        let q = q.symmetrize()?;
        let r = r.symmetrize()?;
        s.ensure_finite("S")?;
        Ok(QsrSupply { q, s, r })
    }

    pub fn scalar(q: f64, s: f64, r: f64) -> Self {
        QsrSupply {
            q: Matrix::scalar(q),
            s: Matrix::scalar(s),
            r: Matrix::scalar(r),
        }
    }

    pub fn passive(m: usize) -> Self {
        QsrSupply {
            q: Matrix::zeros(m, m),
            s: Matrix::identity(m).scale(0.5),
            r: Matrix::zeros(m, m),
        }
    }

    pub fn bounded_gain(gamma: f64, m: usize) -> Self {
        QsrSupply {
            q: Matrix::identity(m).scale(-1.0),
            s: Matrix::zeros(m, m),
            r: Matrix::identity(m).scale(gamma * gamma),
        }
    }

    /// Cone `[a, b]`: `Q = −I`, `S = (a+b)/2·I`, `R = −ab·I`.
    pub fn interior_conic(a: f64, b: f64, m: usize) -> Self {
        QsrSupply {
            q: Matrix::identity(m).scale(-1.0),
            s: Matrix::identity(m).scale(0.5 * (a + b)),
            r: Matrix::identity(m).scale(-a * b),
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.q.rows()
    }

    pub fn n_inputs(&self) -> usize {
        self.r.rows()
    }

    pub fn rate(&self, y: &[f64], u: &[f64]) -> f64 {
        let qy = self.q.matvec(y).expect("supply/output size");
        let su = self.s.matvec(u).expect("supply/input size");
        let ru = self.r.matvec(u).expect("supply/input size");
        crate::numlin::dot(y, &qy) + 2.0 * crate::numlin::dot(y, &su) + crate::numlin::dot(u, &ru)
    }

    /// Scalar interior-conic radius `√(S² + R)` for `Q = −1`.
    pub fn conic_radius(&self) -> Option<f64> {
        if self.q.shape() != (1, 1) || self.q.get(0, 0) != -1.0 {
            return None;
        }
        let s = self.s.get(0, 0);
        let v = s * s + self.r.get(0, 0);
        (v >= 0.0).then(|| v.sqrt())
    }
}

pub fn supply_case(case: SupplyCase, dim: usize) -> QsrSupply {
    match case {
        SupplyCase::Passive => QsrSupply::passive(dim),
        SupplyCase::BoundedGain { gamma } => QsrSupply::bounded_gain(gamma, dim),
        SupplyCase::InteriorConic { a, b } => QsrSupply::interior_conic(a, b, dim),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub p: Matrix,
    /// Largest eigenvalue of the certified LMI (in `⪯ 0` form) at `p`.
    pub residual: f64,
}

impl Certificate {
    pub fn is_valid(&self) -> bool {
        self.residual <= CERT_TOL && (self.p.rows() == 0 || is_positive_definite(&self.p).unwrap_or(false))
    }
}

fn check_supply_dims(sys: &DiscreteStateSpace, qsr: &QsrSupply) -> Result<()> {
    if qsr.n_outputs() != sys.n_outputs() || qsr.n_inputs() != sys.n_inputs() {
        return Err(dim_err(format!(
            "supply is for {}→{} but the system is {}→{}",
            qsr.n_inputs(),
            qsr.n_outputs(),
            sys.n_inputs(),
            sys.n_outputs()
        )));
    }
    Ok(())
}

/// The dissipation inequality matrix, affine in `P`:
/// `[[AᵀPA − P − CᵀQC, AᵀPB − CᵀS − CᵀQD], [∗, BᵀPB − DᵀQD − DᵀS − SᵀD − R]]`.
pub fn qsr_matrix(sys: &DiscreteStateSpace, qsr: &QsrSupply, p: &AffMat) -> Result<AffMat> {
    check_supply_dims(sys, qsr)?;
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let at = a.transpose();
    let bt = b.transpose();
    let ct = c.transpose();
    let dt = d.transpose();
    let apa = p.left_mul(&at)?.right_mul(a)?;
    let apb = p.left_mul(&at)?.right_mul(b)?;
    let bpb = p.left_mul(&bt)?.right_mul(b)?;
    let cqc = &(&ct * &qsr.q) * c;
    let cs_cqd = &(&ct * &qsr.s) + &(&(&ct * &qsr.q) * d);
    let lower = &(&(&(&dt * &qsr.q) * d) + &(&dt * &qsr.s)) + &(&qsr.s.transpose() * d);
    let lower = &lower + &qsr.r;
    let b11 = apa.sub(p)?.add_constant(&cqc.scale(-1.0))?;
    let b12 = apb.add_constant(&cs_cqd.scale(-1.0))?;
    let b22 = bpb.add_constant(&lower.scale(-1.0))?;
    AffMat::sym_from_upper(&[vec![Some(b11), Some(b12)], vec![None, Some(b22)]])
}

/// Solves an LMI feasibility problem in a symmetric `n×n` matrix `P` with the
/// floor `P ⪰ P_FLOOR·I`; `residual` is recomputed from `lmi` at the answer.
fn certify_in_p(
    n: usize,
    build: impl Fn(&AffMat) -> Result<AffMat>,
    check: impl Fn(&Matrix) -> Result<f64>,
) -> Result<Option<Certificate>> {
    if n == 0 {
        let r = check(&Matrix::zeros(0, 0))?;
        return Ok((r <= CERT_TOL).then(|| Certificate {
            p: Matrix::zeros(0, 0),
            residual: r,
        }));
    }
    let mut reg = VarRegistry::new();
    let pv = reg.symmetric(n);
    let main = build(&pv.aff())?.to_block()?.with_label("dissipation");
    let floor = p_floor_block(&pv, P_FLOOR)?;
    let prob = SdpProblem::feasibility(reg.n_vars(), vec![main, floor], LMI_MARGIN);
    let mut x0 = vec![0.0; reg.n_vars()];
    pv.write(&mut x0, &Matrix::identity(n));
    let sol = lmi::solve(&prob, Some(&x0))?;
    if !sol.is_feasible() {
        return Ok(None);
    }
    let p = pv.read(&sol.x);
    let residual = check(&p)?;
    let cert = Certificate { p, residual };
    Ok(cert.is_valid().then_some(cert))
}

/// `−P + floor·I ⪯ 0`.
pub fn p_floor_block(pv: &VarMat, floor: f64) -> Result<LmiBlock> {
    let n = pv.rows;
    Ok(pv
        .aff()
        .scale(-1.0)
        .add_constant(&Matrix::identity(n).scale(floor))?
        .to_block()?
        .with_label("p-floor"))
}

/// Passivity of a square system: `[[AᵀPA − P, AᵀPB − Cᵀ], [∗, BᵀPB − D − Dᵀ]] ⪯ 0`.
pub fn kyp_passivity(sys: &DiscreteStateSpace) -> Result<Option<Certificate>> {
    if !sys.is_square() {
        return Err(Error::Precondition("passivity needs as many inputs as outputs".into()));
    }
    let m = sys.n_inputs();
    let unit = QsrSupply {
        q: Matrix::zeros(m, m),
        s: Matrix::identity(m),
        r: Matrix::zeros(m, m),
    };
    kyp_qsr(sys, &unit)
}

pub fn kyp_qsr(sys: &DiscreteStateSpace, qsr: &QsrSupply) -> Result<Option<Certificate>> {
    check_supply_dims(sys, qsr)?;
    certify_in_p(
        sys.n_states(),
        |p| qsr_matrix(sys, qsr, p),
        |p| kyp_residual(sys, qsr, p),
    )
}

/// Largest eigenvalue of the dissipation inequality matrix at a fixed `P`.
pub fn kyp_residual(sys: &DiscreteStateSpace, qsr: &QsrSupply, p: &Matrix) -> Result<f64> {
    let m = qsr_matrix(sys, qsr, &AffMat::constant(p))?.eval(&[]);
    max_eigenvalue(&m)
}

/// How the `Q` row of the four-block inequality is represented.
#[derive(Clone, Debug)]
pub(crate) enum QForm {
    /// `Q ≺ 0`: the block `Q⁻¹` with columns `Cᵀ`, `Dᵀ`.
    Inverse(Matrix),
    /// `Q ⪯ 0` singular: `−Q = LLᵀ`, block `−I` with columns `CᵀL`, `DᵀL`.
    Factor(Matrix),
    /// `Q = 0`: the row is absent.
    Absent,
}

pub(crate) fn q_form(q: &Matrix) -> Result<QForm> {
    let n = q.rows();
    if n == 0 || q.max_abs() == 0.0 {
        return Ok(QForm::Absent);
    }
    let eig = sym_eig(q)?;
    let scale = q.max_abs().max(1.0);
    if eig.max() > EPS_DEF * scale {
        return Err(Error::Precondition(
            "the four-block dissipativity inequality needs Q ⪯ 0".into(),
        ));
    }
    if is_negative_definite(q)? {
        return Ok(QForm::Inverse(inverse(q)?));
    }
    let vals = &eig.eigenvalues;
    let keep: Vec<usize> = (0..n).filter(|&i| -vals[i] > EPS_DEF * scale).collect();
    let l = Matrix::from_fn(n, keep.len(), |i, k| {
        eig.eigenvectors.get(i, keep[k]) * (-vals[keep[k]]).sqrt()
    });
    Ok(QForm::Factor(l))
}

/// The four-block Schur form of the dissipation inequality with the last
/// diagonal block supplied by the caller (`−P⁻¹` or its overbound).
fn four_block(
    a: &AffMat,
    b: &AffMat,
    c: &AffMat,
    d: &AffMat,
    p: &AffMat,
    qsr: &QsrSupply,
    last: AffMat,
) -> Result<AffMat> {
    let s = &qsr.s;
    let st = s.transpose();
    let b11 = p.scale(-1.0);
    let b12 = c.transpose().right_mul(s)?.scale(-1.0);
    let b22 = d
        .transpose()
        .right_mul(s)?
        .add(&d.left_mul(&st)?)?
        .scale(-1.0)
        .add_constant(&qsr.r.scale(-1.0))?;
    let at = a.transpose();
    let bt = b.transpose();
    let grid = match q_form(&qsr.q)? {
        QForm::Absent => vec![
            vec![Some(b11), Some(b12), Some(at)],
            vec![None, Some(b22), Some(bt)],
            vec![None, None, Some(last)],
        ],
        QForm::Inverse(qi) => vec![
            vec![Some(b11), Some(b12), Some(c.transpose()), Some(at)],
            vec![None, Some(b22), Some(d.transpose()), Some(bt)],
            vec![None, None, Some(AffMat::constant(&qi)), Some(AffMat::zeros(qi.rows(), p.rows()))],
            vec![None, None, None, Some(last)],
        ],
        QForm::Factor(l) => {
            let k = l.cols();
            vec![
                vec![Some(b11), Some(b12), Some(c.transpose().right_mul(&l)?), Some(at)],
                vec![None, Some(b22), Some(d.transpose().right_mul(&l)?), Some(bt)],
                vec![
                    None,
                    None,
                    Some(AffMat::constant(&Matrix::identity(k).scale(-1.0))),
                    Some(AffMat::zeros(k, p.rows())),
                ],
                vec![None, None, None, Some(last)],
            ]
        }
    };
    AffMat::sym_from_upper(&grid)
}

/// Largest eigenvalue of the four-block inequality assembled with `P` and
/// `P⁻¹`; `≤ 0` certifies `(Q,S,R)`-dissipativity.
pub fn check_corollary1(sys: &DiscreteStateSpace, qsr: &QsrSupply, p: &Matrix) -> Result<f64> {
    check_supply_dims(sys, qsr)?;
    if sys.n_states() > 0 && !is_positive_definite(p)? {
        return Err(Error::Precondition("P must be positive definite".into()));
    }
    let n = sys.n_states();
    let pinv = if n > 0 { inverse(p)? } else { Matrix::zeros(0, 0) };
    let k = |m: &Matrix| AffMat::constant(m);
    let m = four_block(
        &k(&sys.a),
        &k(&sys.b),
        &k(&sys.c),
        &k(&sys.d),
        &k(p),
        qsr,
        k(&pinv.scale(-1.0)),
    )?
    .eval(&[]);
    max_eigenvalue(&m)
}

/// Decision variables of an LTI system plus a certificate matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemVars {
    pub a: VarMat,
    pub b: VarMat,
    pub c: VarMat,
    pub d: VarMat,
    pub p: VarMat,
}

impl SystemVars {
    /// Allocates `(A, B, C, D, P)` for `n` states, `m` inputs, `p` outputs.
    pub fn allocate(reg: &mut VarRegistry, n: usize, m: usize, p: usize) -> SystemVars {
        SystemVars {
            a: reg.full(n, n),
            b: reg.full(n, m),
            c: reg.full(p, n),
            d: reg.full(p, m),
            p: reg.symmetric(n),
        }
    }

    pub fn read_system(&self, x: &[f64]) -> DiscreteStateSpace {
        DiscreteStateSpace {
            a: self.a.read(x),
            b: self.b.read(x),
            c: self.c.read(x),
            d: self.d.read(x),
        }
    }

    pub fn write_system(&self, x: &mut [f64], sys: &DiscreteStateSpace) {
        self.a.write(x, &sys.a);
        self.b.write(x, &sys.b);
        self.c.write(x, &sys.c);
        self.d.write(x, &sys.d);
    }
}

/// `P⁻¹ ⪰ 2P̃⁻¹ − P̃⁻¹PP̃⁻¹`, so `−P⁻¹` is replaced by `−2G + GPG`, `G = P̃⁻¹`.
pub fn inverse_overbound(p: &AffMat, p_tilde: &Matrix) -> Result<AffMat> {
    let g = inverse(p_tilde)?;
    p.left_mul(&g)?.right_mul(&g)?.add_constant(&g.scale(-2.0))
}

/// Convexified dissipativity inequality for affine `(A, B, C, D, P)`.
pub fn convexified_matrix(
    a: &AffMat,
    b: &AffMat,
    c: &AffMat,
    d: &AffMat,
    p: &AffMat,
    qsr: &QsrSupply,
    p_tilde: &Matrix,
) -> Result<AffMat> {
    let n = a.rows();
    if p_tilde.shape() != (n, n) || b.rows() != n || c.cols() != n || p.rows() != n {
        return Err(dim_err("convexified inequality dimensions"));
    }
    if d.rows() != qsr.n_outputs() || d.cols() != qsr.n_inputs() {
        return Err(dim_err("supply does not match the system's input/output sizes"));
    }
    if n > 0 && !is_positive_definite(p_tilde)? {
        return Err(Error::Precondition("linearization point P̃ must be positive definite".into()));
    }
    let last = if n > 0 {
        inverse_overbound(p, p_tilde)?
    } else {
        AffMat::zeros(0, 0)
    };
    four_block(a, b, c, d, p, qsr, last)
}

/// Convexified inequality as an LMI block over freshly allocated
/// `(A, B, C, D, P)` variables.
pub fn convexified_block(
    n: usize,
    qsr: &QsrSupply,
    p_tilde: &Matrix,
) -> Result<(LmiBlock, SystemVars, usize)> {
    let mut reg = VarRegistry::new();
    let v = SystemVars::allocate(&mut reg, n, qsr.n_inputs(), qsr.n_outputs());
    let m = convexified_matrix(&v.a.aff(), &v.b.aff(), &v.c.aff(), &v.d.aff(), &v.p.aff(), qsr, p_tilde)?;
    Ok((m.to_block()?.with_label("convexified"), v, reg.n_vars()))
}

fn interconnection_matrix(qsr1: &QsrSupply, qsr2: &QsrSupply, alpha: f64) -> Result<Matrix> {
    if qsr2.n_inputs() != qsr1.n_outputs() || qsr2.n_outputs() != qsr1.n_inputs() {
        return Err(dim_err("supplies do not describe a feedback pair"));
    }
    let b11 = &qsr1.q + &qsr2.r.scale(alpha);
    let b12 = &qsr1.s.scale(-1.0) + &qsr2.s.transpose().scale(alpha);
    let b22 = &qsr1.r + &qsr2.q.scale(alpha);
    let b21 = b12.transpose();
    Matrix::from_blocks(&[vec![Some(&b11), Some(&b12)], vec![Some(&b21), Some(&b22)]])
}

/// Smallest eigenvalue of `[[Q₁+αR₂, −S₁+αS₂ᵀ], [∗, R₁+αQ₂]]`.
pub fn interconnection_mineig(qsr1: &QsrSupply, qsr2: &QsrSupply, alpha: f64) -> Result<f64> {
    min_eigenvalue(&interconnection_matrix(qsr1, qsr2, alpha)?)
}

/// Largest eigenvalue of the same matrix; negative iff the matrix is
/// negative definite, which is what the stability test requires.
pub fn interconnection_maxeig(qsr1: &QsrSupply, qsr2: &QsrSupply, alpha: f64) -> Result<f64> {
    max_eigenvalue(&interconnection_matrix(qsr1, qsr2, alpha)?)
}

/// Searches `α > 0` making the interconnection matrix negative definite.
/// `α = 1` is preferred when it works; otherwise the most negative point of
/// a log-spaced scan over `[1e-4, 1e4]`, refined by golden section.
pub fn find_alpha(qsr1: &QsrSupply, qsr2: &QsrSupply) -> Result<Option<f64>> {
    let f = |la: f64| interconnection_maxeig(qsr1, qsr2, 10f64.powf(la));
    if f(0.0)? < -EPS_DEF {
        return Ok(Some(1.0));
    }
    let n = 200;
    let grid: Vec<f64> = (0..n).map(|i| -4.0 + 8.0 * i as f64 / (n - 1) as f64).collect();
    let mut best = (f64::INFINITY, 0usize);
    for (i, &la) in grid.iter().enumerate() {
        let v = f(la)?;
        if v < best.0 {
            best = (v, i);
        }
    }
    let lo = grid[best.1.saturating_sub(1)];
    let hi = grid[(best.1 + 1).min(n - 1)];
    let (la, v) = golden_min(|t| f(t), lo, hi, 60)?;
    let (la, v) = if v < best.0 { (la, v) } else { (grid[best.1], best.0) };
    Ok((v < -EPS_DEF).then(|| 10f64.powf(la)))
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub(crate) fn golden_min(mut f: impl FnMut(f64) -> Result<f64>, lo: f64, hi: f64, iters: usize) -> Result<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}

/// A supply with `Q ≺ 0` implies IO stability.
pub fn io_stable(qsr: &QsrSupply) -> bool {
    qsr.q.rows() > 0 && is_negative_definite(&qsr.q).unwrap_or(false)
}

fn check_scalar_supply(qsr: &QsrSupply) -> Result<(f64, f64, f64)> {
    if qsr.q.shape() != (1, 1) || qsr.s.shape() != (1, 1) || qsr.r.shape() != (1, 1) {
        return Err(dim_err("the sine plant needs a scalar supply"));
    }
    Ok((qsr.q.get(0, 0), qsr.s.get(0, 0), qsr.r.get(0, 0)))
}

/// The matrix that must be `⪰ 0` for the sine plant:
/// `[[c²Q − 2a²P + P − 2α²P, cQd + cS − 2abP], [∗, d²Q + 2Sd + R − 2b²P]]`.
pub fn nonlinear_matrix(plant: &SinePlant, qsr: &QsrSupply, p: f64) -> Result<Matrix> {
    let (q, s, r) = check_scalar_supply(qsr)?;
    let SinePlant { a, b, c, d, alpha } = *plant;
    let m11 = c * q * c - 2.0 * a * p * a + p - 2.0 * alpha * alpha * p;
    let m12 = c * q * d + c * s - 2.0 * a * p * b;
    let m22 = d * q * d + 2.0 * s * d + r - 2.0 * b * p * b;
    Ok(Matrix::from_rows(&[&[m11, m12], &[m12, m22]]))
}

/// Best scalar `P > 0` for the sine-plant inequality and its residual
/// `−max_P λ_min`. The inequality is affine in `P`, so `λ_min` is concave.
fn best_nonlinear_p(plant: &SinePlant, qsr: &QsrSupply) -> Result<(f64, f64)> {
    let f = |p: f64| -> Result<f64> { Ok(-min_eigenvalue(&nonlinear_matrix(plant, qsr, p)?)?) };
    // bracket the maximizer of λ_min by doubling
    let mut hi = 1.0;
    let mut prev = f(hi)?;
    for _ in 0..60 {
        let v = f(2.0 * hi)?;
        if v > prev {
            break;
        }
        hi *= 2.0;
        prev = v;
    }
    let (p, v) = golden_min(f, P_FLOOR, 2.0 * hi, 200)?;
    Ok((p, v))
}

/// Certificate for the sine plant, with the inequality shown in
/// [`nonlinear_matrix`] checked non-strictly: accepted when
/// `max_P λ_min ≥ −CERT_TOL` for some `P > 0`.
pub fn certify_nonlinear(plant: &SinePlant, qsr: &QsrSupply) -> Result<Option<Certificate>> {
    let (p, residual) = best_nonlinear_p(plant, qsr)?;
    Ok((residual <= CERT_TOL && p > 0.0).then(|| Certificate {
        p: Matrix::scalar(p),
        residual,
    }))
}

/// Interior-conic supply `(−1, c, ρ² − c²)` of centre `c` and radius `ρ`.
fn conic_supply(center: f64, radius: f64) -> QsrSupply {
    QsrSupply::scalar(-1.0, center, radius * radius - center * center)
}

fn conic_slack(plant: &SinePlant, center: f64, radius: f64) -> Result<f64> {
    Ok(-best_nonlinear_p(plant, &conic_supply(center, radius))?.1)
}

/// Best centre for a given radius; the slack is jointly concave in
/// `(centre, P)`, so golden section over the centre is exact.
fn best_center(plant: &SinePlant, radius: f64, box_half: f64) -> Result<(f64, f64)> {
    let (c, v) = golden_min(|c| Ok(-conic_slack(plant, c, radius)?), -box_half, box_half, 80)?;
    Ok((c, -v))
}

/// Smallest interior cone certified for the sine plant: bisection on the
/// radius with an inner search on the centre.
pub fn minimize_conic_radius(plant: &SinePlant) -> Result<QsrSupply> {
    const BOX: f64 = 100.0;
    const R_MAX: f64 = 1e3;
    let (c_hi, v_hi) = best_center(plant, R_MAX, BOX)?;
    if v_hi < -CERT_TOL {
        return Err(Error::NoSolution(format!(
            "no certified cone with radius ≤ {R_MAX} and centre in [−{BOX}, {BOX}] (best slack {v_hi:.3e})"
        )));
    }
    let (mut lo, mut hi) = (0.0_f64, R_MAX);
    let mut best = (c_hi, R_MAX);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let (c, v) = best_center(plant, mid, BOX)?;
        if v >= 0.0 {
            hi = mid;
            best = (c, mid);
        } else {
            lo = mid;
        }
        if hi - lo < 1e-9 * hi.max(1.0) {
            break;
        }
    }
    Ok(conic_supply(best.0, best.1))
}

/// Controller supply making the interconnection matrix negative definite
/// with margin `μ`: `S_c = S_pᵀ/α`, `R_c = −(Q_p + μI)/α`,
/// `Q_c = −(R_p⁺ + μI)/α` where `R_p⁺` is the PSD part of `R_p`.
pub fn required_controller_qsr(plant: &QsrSupply, alpha: f64) -> Result<QsrSupply> {
    required_controller_qsr_with_margin(plant, alpha, 0.4)
}

pub fn required_controller_qsr_with_margin(plant: &QsrSupply, alpha: f64, mu: f64) -> Result<QsrSupply> {
    if !(alpha > 0.0) || !(mu > 0.0) {
        return Err(Error::Precondition("α and the margin must be positive".into()));
    }
    let m = plant.n_inputs();
    let p = plant.n_outputs();
    let r_plus = crate::numlin::psd_project(&plant.r)?;
    let q_c = (&r_plus + &Matrix::identity(m).scale(mu)).scale(-1.0 / alpha);
    let s_c = plant.s.transpose().scale(1.0 / alpha);
    let r_c = (&plant.q + &Matrix::identity(p).scale(mu)).scale(-1.0 / alpha);
    let out = QsrSupply::new(q_c, s_c, r_c)?;
    debug_assert!(interconnection_maxeig(plant, &out, alpha)? < 0.0);
    Ok(out)
}

/// Settings used for every certificate solve; exposed for benchmarks.
pub fn certificate_settings() -> AdmmSettings {
    AdmmSettings::default()
}
