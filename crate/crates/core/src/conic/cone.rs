//! Product cones built from zero, free, nonnegative-orthant, and
//! second-order factors: projections, their Jacobian selections, and the
//! Moreau decomposition check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::tape::SelectionPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConeFactor {
    Zero { dim: usize },
    Free { dim: usize },
    Nonneg { dim: usize },
    /// { (t, u) : t >= ||u|| }, scalar t stored first.
    SecondOrder { dim: usize },
}

impl ConeFactor {
    pub fn dim(&self) -> usize {
        match self {
            ConeFactor::Zero { dim }
            | ConeFactor::Free { dim }
            | ConeFactor::Nonneg { dim }
            | ConeFactor::SecondOrder { dim } => *dim,
        }
    }

    fn dual(&self) -> ConeFactor {
        match self {
            ConeFactor::Zero { dim } => ConeFactor::Free { dim: *dim },
            ConeFactor::Free { dim } => ConeFactor::Zero { dim: *dim },
            other => *other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cone {
    pub factors: Vec<ConeFactor>,
}

impl Cone {
    pub fn new(factors: Vec<ConeFactor>) -> Result<Self> {
        if factors.iter().any(|f| f.dim() == 0) {
            return Err(Error::InvalidConfig("cone factor of dimension 0".into()));
        }
        if let Some(f) = factors
            .iter()
            .find(|f| matches!(f, ConeFactor::SecondOrder { dim } if *dim < 2))
        {
            return Err(Error::InvalidConfig(format!(
                "second-order factor needs dimension >= 2, got {}",
                f.dim()
            )));
        }
        Ok(Cone { factors })
    }

    pub fn zero(dim: usize) -> Self {
        Cone { factors: vec![ConeFactor::Zero { dim }] }
    }

    pub fn free(dim: usize) -> Self {
        Cone { factors: vec![ConeFactor::Free { dim }] }
    }

    pub fn nonneg(dim: usize) -> Self {
        Cone { factors: vec![ConeFactor::Nonneg { dim }] }
    }

    pub fn second_order(dim: usize) -> Result<Self> {
        Cone::new(vec![ConeFactor::SecondOrder { dim }])
    }

    pub fn dim(&self) -> usize {
        self.factors.iter().map(|f| f.dim()).sum()
    }

    pub fn dual(&self) -> Cone {
        Cone { factors: self.factors.iter().map(|f| f.dual()).collect() }
    }

    /// Polar cone K° = -K*.
    pub fn project_polar(&self, v: &Vector) -> Result<Vector> {
        // Moreau: P_{K°}(v) = -P_{K*}(-v)
        Ok(-self.dual().project(&-v)?)
    }

    fn check_dim(&self, v: &Vector) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "cone has dimension {} but vector has {}",
                self.dim(),
                v.len()
            )));
        }
        Ok(())
    }

    /// Euclidean projection onto the cone, factor by factor.
    pub fn project(&self, v: &Vector) -> Result<Vector> {
        self.check_dim(v)?;
        let mut out = Vector::zeros(v.len());
        let mut off = 0;
        for f in &self.factors {
            let d = f.dim();
            let block = v.rows(off, d).into_owned();
            let p = match f {
                ConeFactor::Zero { .. } => Vector::zeros(d),
                ConeFactor::Free { .. } => block,
                ConeFactor::Nonneg { .. } => block.map(|x| x.max(0.0)),
                ConeFactor::SecondOrder { .. } => project_soc(&block),
            };
            out.rows_mut(off, d).copy_from(&p);
            off += d;
        }
        Ok(out)
    }

    /// Block-diagonal selection in the generalized Jacobian of the
    /// projection. On the nondifferentiability sets (orthant coordinates at
    /// 0, second-order boundary) the policy decides.
    pub fn projection_jacobian_selection(
        &self,
        v: &Vector,
        policy: &SelectionPolicy,
    ) -> Result<Matrix> {
        self.check_dim(v)?;
        let n = self.dim();
        let mut jac = Matrix::zeros(n, n);
        let mut off = 0;
        for f in &self.factors {
            let d = f.dim();
            let block = v.rows(off, d).into_owned();
            let j = match f {
                ConeFactor::Zero { .. } => Matrix::zeros(d, d),
                ConeFactor::Free { .. } => Matrix::identity(d, d),
                ConeFactor::Nonneg { .. } => {
                    // same kink family as relu, reuse its policy value
                    Matrix::from_diagonal(&block.map(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            0.0
                        } else {
                            policy.relu_at_zero
                        }
                    }))
                }
                ConeFactor::SecondOrder { .. } => soc_projection_jacobian(&block),
            };
            jac.view_mut((off, off), (d, d)).copy_from(&j);
            off += d;
        }
        Ok(jac)
    }

    pub fn contains(&self, v: &Vector, tol: f64) -> Result<bool> {
        self.check_dim(v)?;
        let mut off = 0;
        for f in &self.factors {
            let d = f.dim();
            let block = v.rows(off, d).into_owned();
            let ok = match f {
                ConeFactor::Zero { .. } => block.amax() <= tol,
                ConeFactor::Free { .. } => true,
                ConeFactor::Nonneg { .. } => block.iter().all(|x| *x >= -tol),
                ConeFactor::SecondOrder { .. } => {
                    block[0] + tol >= block.rows(1, d - 1).norm()
                }
            };
            if !ok {
                return Ok(false);
            }
            off += d;
        }
        Ok(true)
    }
}

/// Projection onto { (t, u) : t >= ||u|| }.
fn project_soc(v: &Vector) -> Vector {
    let d = v.len();
    let t = v[0];
    let u = v.rows(1, d - 1).into_owned();
    let nu = u.norm();
    if t >= nu {
        return v.clone();
    }
    if t <= -nu {
        return Vector::zeros(d);
    }
    // boundary of neither cone: scale onto the surface
    let alpha = (t + nu) / 2.0;
    let mut out = Vector::zeros(d);
    out[0] = alpha;
    if nu > 0.0 {
        out.rows_mut(1, d - 1).copy_from(&(u * (alpha / nu)));
    }
    out
}

/// Jacobian selection of the second-order cone projection.
///
/// On the two boundary surfaces t = ||u|| and t = -||u|| (and at the apex)
/// the limit-from-the-interior element is used: identity on the cone side,
/// zero on the polar side.
fn soc_projection_jacobian(v: &Vector) -> Matrix {
    let d = v.len();
    let t = v[0];
    let u = v.rows(1, d - 1).into_owned();
    let nu = u.norm();
    if t >= nu {
        return Matrix::identity(d, d);
    }
    if t <= -nu {
        return Matrix::zeros(d, d);
    }
    // strict middle region: smooth closed form
    let w = &u / nu;
    let alpha = (t + nu) / 2.0;
    let mut jac = Matrix::zeros(d, d);
    jac[(0, 0)] = 0.5;
    for j in 0..d - 1 {
        jac[(0, 1 + j)] = 0.5 * w[j];
        jac[(1 + j, 0)] = 0.5 * w[j];
    }
    let eye = Matrix::identity(d - 1, d - 1);
    let wwt = &w * w.transpose();
    // d(alpha w)/du = (1/2) w w^T + (alpha/nu)(I - w w^T)
    let block = &eye * (alpha / nu) + &wwt * (0.5 - alpha / nu);
    jac.view_mut((1, 1), (d - 1, d - 1)).copy_from(&block);
    jac
}

/// Outcome of the Moreau decomposition identity test at one point.
#[derive(Debug, Clone)]
pub struct MoreauReport {
    pub decomposition_error: f64,
    pub orthogonality_error: f64,
    pub passes: bool,
}

/// Checks v = P_K(v) + P_{K°}(v) with orthogonal parts, to `tol`.
pub fn moreau_check(cone: &Cone, v: &Vector, tol: f64) -> Result<MoreauReport> {
    let pk = cone.project(v)?;
    let pp = cone.project_polar(v)?;
    let decomposition_error = (v - (&pk + &pp)).amax();
    let orthogonality_error = pk.dot(&pp).abs();
    Ok(MoreauReport {
        decomposition_error,
        orthogonality_error,
        passes: decomposition_error <= tol && orthogonality_error <= tol,
    })
}
