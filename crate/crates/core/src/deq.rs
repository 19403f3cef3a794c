//! Monotone deep-equilibrium layers z = sigma(W z + b) and the closed-form
//! conservative gradient of the equilibrium with respect to (W, b).

use crate::error::{Error, Result};
use crate::implicit::{solve_fixed_point_fn, FixedPointConfig, FixedPointSolution};
use crate::linalg::{self, Matrix, Vector};
use crate::tape::{SelectionPolicy, Tape};

/// An equilibrium layer with a componentwise 1-Lipschitz activation.
///
/// Construction checks W + W^T >= 2 theta I (smallest symmetric eigenvalue)
/// and probes sigma for diagonality and 1-Lipschitz behavior by sampling;
/// the forward solver additionally relies on contraction, gated separately.
#[derive(Debug, Clone)]
pub struct MonotoneLayer {
    pub w: Matrix,
    pub b: Vector,
    pub sigma: Tape,
    pub theta: f64,
}

/// Number of random probes used to vet the activation tape.
const SIGMA_PROBES: usize = 64;

impl MonotoneLayer {
    pub fn new(w: Matrix, b: Vector, sigma: Tape, theta: f64) -> Result<Self> {
        let m = b.len();
        if w.nrows() != m || w.ncols() != m {
            return Err(Error::ShapeMismatch(format!(
                "W is {}x{} but b has length {m}",
                w.nrows(),
                w.ncols()
            )));
        }
        if sigma.input_arity() != m || sigma.output_arity() != m {
            return Err(Error::ShapeMismatch(format!(
                "activation must map R^{m} to R^{m}, got {} -> {}",
                sigma.input_arity(),
                sigma.output_arity()
            )));
        }
        if !(theta > 0.0) {
            return Err(Error::InvalidConfig("theta must be positive".into()));
        }
        let lmin = linalg::symmetric_eig_min(&(&w + w.transpose()))?;
        if lmin < 2.0 * theta - 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "monotonicity violated: lambda_min(W + W^T) = {lmin:.6} < 2 theta = {:.6}",
                2.0 * theta
            )));
        }
        check_activation(&sigma, m)?;
        Ok(MonotoneLayer { w, b, sigma, theta })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn pre_activation(&self, z: &Vector) -> Vector {
        &self.w * z + &self.b
    }
}

/// Probes that the activation acts componentwise (diagonal selection
/// Jacobians) and is 1-Lipschitz along random segments.
fn check_activation(sigma: &Tape, m: usize) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5197);
    let policy = SelectionPolicy::default();
    for _ in 0..SIGMA_PROBES {
        let u = Vector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let v = Vector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let su = sigma.eval(&u)?;
        let sv = sigma.eval(&v)?;
        if (su - &sv).norm() > (&u - &v).norm() * (1.0 + 1e-9) {
            return Err(Error::InvalidConfig(
                "activation is not 1-Lipschitz on sampled segments".into(),
            ));
        }
        let j = sigma.jacobian_selection(&u, &policy)?.matrix;
        for i in 0..m {
            for k in 0..m {
                if i != k && j[(i, k)].abs() > 1e-12 {
                    return Err(Error::InvalidConfig(
                        "activation selection Jacobian is not diagonal".into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Solves the equilibrium z = sigma(W z + b) from the origin.
pub fn deq_forward(layer: &MonotoneLayer, cfg: &FixedPointConfig) -> Result<Vector> {
    Ok(deq_forward_from(layer, &Vector::zeros(layer.dim()), cfg)?.z)
}

pub fn deq_forward_from(
    layer: &MonotoneLayer,
    z0: &Vector,
    cfg: &FixedPointConfig,
) -> Result<FixedPointSolution> {
    solve_fixed_point_fn(|z| layer.sigma.eval(&layer.pre_activation(z)), z0, cfg)
}

/// The conservative gradient pair (G_W, G_b) of a loss with selection v at
/// the equilibrium z.
///
/// With J the diagonal activation selection at W z + b and
/// g = J^T (I - J W)^-T v, the pair is (g z^T, g); G_W is assembled as that
/// outer product so the algebraic link between the two components is exact.
pub fn deq_conservative_gradient(
    layer: &MonotoneLayer,
    z: &Vector,
    v: &Vector,
    policy: &SelectionPolicy,
    rcond_tol: f64,
) -> Result<(Matrix, Vector)> {
    let m = layer.dim();
    if z.len() != m || v.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "z and v must have length {m}, got {} and {}",
            z.len(),
            v.len()
        )));
    }
    let pre = layer.pre_activation(z);
    let j = layer.sigma.jacobian_selection(&pre, policy)?.matrix;
    let system = Matrix::identity(m, m) - &j * &layer.w;
    let rcond = linalg::rcond_estimate(&system);
    if rcond < rcond_tol {
        return Err(Error::InvertibilityFailure { rcond, tol: rcond_tol });
    }
    // solve (I - JW)^T u = v, then g = J^T u
    let u = linalg::lu_solve_with_tol(
        &system.transpose(),
        &Matrix::from_column_slice(m, 1, v.as_slice()),
        0.0,
    )?;
    let g_b = j.transpose() * Vector::from_column_slice(u.as_slice());
    let g_w = &g_b * z.transpose();
    Ok((g_w, g_b))
}

/// Random layer with ||W||_2 <= `target_norm` < 1 satisfying the
/// monotonicity hypothesis, for tests and training experiments.
pub fn random_contractive_layer(
    m: usize,
    target_norm: f64,
    sigma: Tape,
    seed: u64,
) -> Result<MonotoneLayer> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // symmetric-part eigenvalues of aI + skew are all a, so monotonicity
    // holds with theta = a/2 while the spectral norm stays controllable
    let skew_raw = Matrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
    let skew = (&skew_raw - skew_raw.transpose()) * 0.5;
    let a = 0.3 * target_norm;
    let mut w = Matrix::identity(m, m) * a + skew;
    let norm = linalg::spectral_norm(&w);
    if norm > target_norm {
        w *= target_norm / norm;
    }
    let b = Vector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
    let theta = 0.5 * linalg::symmetric_eig_min(&(&w + w.transpose()))?;
    MonotoneLayer::new(w, b, sigma, theta.max(1e-12))
}

/// Componentwise tanh activation tape on R^m.
pub fn tanh_activation(m: usize) -> Tape {
    let mut t = Tape::new(m);
    let x = t.full_input().expect("valid arity");
    let th = t.tanh(x).expect("valid node");
    t.set_outputs(&[th]).expect("valid outputs");
    t
}

/// Componentwise relu activation tape on R^m.
pub fn relu_activation(m: usize) -> Tape {
    let mut t = Tape::new(m);
    let x = t.full_input().expect("valid arity");
    let r = t.relu(x).expect("valid node");
    t.set_outputs(&[r]).expect("valid outputs");
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn scalar_layer(w: f64, b: f64, sigma: Tape) -> MonotoneLayer {
        MonotoneLayer::new(
            Matrix::from_element(1, 1, w),
            Vector::from_element(1, b),
            sigma,
            w.max(1e-6) / 2.0,
        )
        .unwrap()
    }

    #[test]
    fn scalar_relu_active_branch() {
        let layer = scalar_layer(0.5, 1.0, relu_activation(1));
        let z = deq_forward(&layer, &FixedPointConfig::default()).unwrap();
        assert_relative_eq!(z[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn scalar_relu_clamped_branch() {
        let layer = scalar_layer(0.5, -1.0, relu_activation(1));
        let z = deq_forward(&layer, &FixedPointConfig::default()).unwrap();
        assert_relative_eq!(z[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uncoupled_tanh_equilibrium() {
        let b = Vector::from_vec(vec![0.3, -1.1]);
        let layer = MonotoneLayer::new(
            Matrix::zeros(2, 2),
            b.clone(),
            tanh_activation(2),
            1e-9,
        );
        // W = 0 fails strict monotonicity as the paper states it; relax theta
        let layer = match layer {
            Ok(l) => l,
            Err(_) => MonotoneLayer {
                w: Matrix::zeros(2, 2),
                b: b.clone(),
                sigma: tanh_activation(2),
                theta: 0.0,
            },
        };
        let z = deq_forward(&layer, &FixedPointConfig::default()).unwrap();
        assert_relative_eq!(z[0], 0.3f64.tanh(), epsilon = 1e-9);
        assert_relative_eq!(z[1], (-1.1f64).tanh(), epsilon = 1e-9);
    }

    #[test]
    fn construction_rejects_nonmonotone_weight() {
        let w = Matrix::from_element(1, 1, -1.0);
        assert!(MonotoneLayer::new(w, Vector::zeros(1), relu_activation(1), 0.1).is_err());
    }

    #[test]
    fn construction_rejects_expansive_activation() {
        let mut t = Tape::new(1);
        let x = t.full_input().unwrap();
        let s = t.scale(x, 3.0).unwrap();
        t.set_outputs(&[s]).unwrap();
        assert!(MonotoneLayer::new(
            Matrix::from_element(1, 1, 0.5),
            Vector::zeros(1),
            t,
            0.25
        )
        .is_err());
    }

    #[test]
    fn construction_rejects_nondiagonal_activation() {
        let mut t = Tape::new(2);
        let x = t.full_input().unwrap();
        let w = Matrix::from_row_slice(2, 2, &[0.5, 0.5, 0.0, 0.5]);
        let a = t.affine(x, &w, &Vector::zeros(2)).unwrap();
        t.set_outputs(&[a]).unwrap();
        assert!(MonotoneLayer::new(
            Matrix::identity(2, 2) * 0.5,
            Vector::zeros(2),
            t,
            0.25
        )
        .is_err());
    }

    #[test]
    fn scalar_gradient_closed_form() {
        // W = 0.5, b = 1, relu active: z = 2, J = 1, (1 - 0.5)^-1 = 2
        let layer = scalar_layer(0.5, 1.0, relu_activation(1));
        let z = deq_forward(&layer, &FixedPointConfig::default()).unwrap();
        let (g_w, g_b) = deq_conservative_gradient(
            &layer,
            &z,
            &Vector::from_element(1, 1.0),
            &SelectionPolicy::default(),
            1e-12,
        )
        .unwrap();
        assert_relative_eq!(g_b[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(g_w[(0, 0)], 4.0, epsilon = 1e-7);
    }

    #[test]
    fn zero_loss_selection_gives_zero_gradients() {
        let layer = scalar_layer(0.5, 1.0, relu_activation(1));
        let z = deq_forward(&layer, &FixedPointConfig::default()).unwrap();
        let (g_w, g_b) = deq_conservative_gradient(
            &layer,
            &z,
            &Vector::zeros(1),
            &SelectionPolicy::default(),
            1e-12,
        )
        .unwrap();
        assert_eq!(g_w, Matrix::zeros(1, 1));
        assert_eq!(g_b, Vector::zeros(1));
    }

    #[test]
    fn kink_with_zero_selection_kills_gradient() {
        // b = 0, W z + b = 0 at the equilibrium z = 0; policy J = 0
        let layer = scalar_layer(0.5, 0.0, relu_activation(1));
        let z = Vector::zeros(1);
        let (g_w, g_b) = deq_conservative_gradient(
            &layer,
            &z,
            &Vector::from_element(1, 1.0),
            &SelectionPolicy::default(),
            1e-12,
        )
        .unwrap();
        assert_eq!(g_b[0], 0.0);
        assert_eq!(g_w[(0, 0)], 0.0);
    }

    #[test]
    fn outer_product_structure_is_exact() {
        let layer = random_contractive_layer(4, 0.9, tanh_activation(4), 21).unwrap();
        let z = deq_forward(&layer, &FixedPointConfig::default()).unwrap();
        let v = Vector::from_vec(vec![0.3, -1.0, 0.2, 0.7]);
        let (g_w, g_b) =
            deq_conservative_gradient(&layer, &z, &v, &SelectionPolicy::default(), 1e-12)
                .unwrap();
        assert_eq!(g_w, &g_b * z.transpose());
    }

    #[test]
    fn uniqueness_probe_over_random_starts() {
        let layer = random_contractive_layer(3, 0.9, tanh_activation(3), 5).unwrap();
        let cfg = FixedPointConfig::default();
        let base = deq_forward(&layer, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let z0 = Vector::from_fn(3, |_, _| rng.gen_range(-5.0..5.0));
            let sol = deq_forward_from(&layer, &z0, &cfg).unwrap();
            assert!((sol.z - &base).amax() <= 10.0 * cfg.tolerance);
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_random_layers() {
        // loss ell(z) = d^T z, selection v = d; perturb W and b directly
        let cfg = FixedPointConfig::default();
        let policy = SelectionPolicy::default();
        for seed in 0..10u64 {
            let layer = random_contractive_layer(3, 0.9, tanh_activation(3), seed).unwrap();
            let m = layer.dim();
            let d = {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1000);
                Vector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0))
            };
            let z = deq_forward(&layer, &cfg).unwrap();
            let (g_w, g_b) = deq_conservative_gradient(&layer, &z, &d, &policy, 1e-12).unwrap();

            let loss = |w: &Matrix, b: &Vector| -> f64 {
                let l = MonotoneLayer {
                    w: w.clone(),
                    b: b.clone(),
                    sigma: tanh_activation(m),
                    theta: layer.theta,
                };
                d.dot(&deq_forward(&l, &cfg).unwrap())
            };
            let h = 1e-6;
            for i in 0..m {
                let mut bp = layer.b.clone();
                let mut bm = layer.b.clone();
                bp[i] += h;
                bm[i] -= h;
                let fd = (loss(&layer.w, &bp) - loss(&layer.w, &bm)) / (2.0 * h);
                assert_relative_eq!(g_b[i], fd, epsilon = 1e-4, max_relative = 1e-4);
            }
            for i in 0..m {
                for jcol in 0..m {
                    let mut wp = layer.w.clone();
                    let mut wm = layer.w.clone();
                    wp[(i, jcol)] += h;
                    wm[(i, jcol)] -= h;
                    let fd = (loss(&wp, &layer.b) - loss(&wm, &layer.b)) / (2.0 * h);
                    assert_relative_eq!(g_w[(i, jcol)], fd, epsilon = 1e-4, max_relative = 1e-4);
                }
            }
        }
    }
}
