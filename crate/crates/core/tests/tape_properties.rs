//! Property tests of the reverse-mode tape: structural invariants that must
//! hold for arbitrary inputs, not just hand-picked examples.

use proptest::prelude::*;

use pathgrad::linalg::{Matrix, Vector};
use pathgrad::tape::{finite_difference_jacobian, SelectionPolicy, Tape};

/// Smooth chain x -> tanh(M1 x + b1) -> M2 . + b2, fully determined by the
/// flat parameter list so proptest can shrink it.
fn smooth_tape(params: &[f64]) -> Tape {
    let m1 = Matrix::from_row_slice(3, 3, &params[0..9]);
    let b1 = Vector::from_vec(params[9..12].to_vec());
    let m2 = Matrix::from_row_slice(2, 3, &params[12..18]);
    let b2 = Vector::from_vec(params[18..20].to_vec());
    let mut t = Tape::new(3);
    let x = t.full_input().unwrap();
    let h = t.affine(x, &m1, &b1).unwrap();
    let a = t.tanh(h).unwrap();
    let out = t.affine(a, &m2, &b2).unwrap();
    t.set_outputs(&[out]).unwrap();
    t
}

/// Nonsmooth chain with relu and abs kinks, same parameterization.
fn kinky_tape(params: &[f64]) -> Tape {
    let m1 = Matrix::from_row_slice(3, 3, &params[0..9]);
    let b1 = Vector::from_vec(params[9..12].to_vec());
    let mut t = Tape::new(3);
    let x = t.full_input().unwrap();
    let h = t.affine(x, &m1, &b1).unwrap();
    let r = t.relu(h).unwrap();
    let a = t.abs(x).unwrap();
    let s = t.add(r, a).unwrap();
    let out = t.sum(s).unwrap();
    t.set_outputs(&[out]).unwrap();
    t
}

fn small(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_is_finite_on_finite_inputs(params in small(20), x in small(3)) {
        let t = smooth_tape(&params);
        let y = t.eval(&Vector::from_vec(x)).unwrap();
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn jacobian_has_output_by_input_shape(params in small(20), x in small(3)) {
        let t = smooth_tape(&params);
        let j = t
            .jacobian_selection(&Vector::from_vec(x), &SelectionPolicy::default())
            .unwrap();
        prop_assert_eq!(j.matrix.nrows(), t.output_arity());
        prop_assert_eq!(j.matrix.ncols(), t.input_arity());
    }

    #[test]
    fn json_round_trip_preserves_values_and_selections(params in small(20), x in small(3)) {
        let t = kinky_tape(&params);
        let back = Tape::from_json(&t.to_json().unwrap()).unwrap();
        let x = Vector::from_vec(x);
        let policy = SelectionPolicy::default();
        let y0 = t.eval(&x).unwrap();
        let y1 = back.eval(&x).unwrap();
        prop_assert!(y0.iter().zip(y1.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let j0 = t.jacobian_selection(&x, &policy).unwrap().matrix;
        let j1 = back.jacobian_selection(&x, &policy).unwrap().matrix;
        prop_assert!(j0.iter().zip(j1.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn composition_satisfies_the_chain_rule(
        params_outer in small(20),
        params_inner in small(20),
        x in small(3),
    ) {
        // outer arity 3 requires an inner with 3 outputs: reuse the smooth
        // chain with a 3 x 3 second layer
        let inner = {
            let m1 = Matrix::from_row_slice(3, 3, &params_inner[0..9]);
            let b1 = Vector::from_vec(params_inner[9..12].to_vec());
            let m2 = Matrix::from_row_slice(3, 3, &params_inner[9..18]);
            let mut t = Tape::new(3);
            let xin = t.full_input().unwrap();
            let h = t.affine(xin, &m1, &b1).unwrap();
            let a = t.tanh(h).unwrap();
            let out = t.affine(a, &m2, &Vector::zeros(3)).unwrap();
            t.set_outputs(&[out]).unwrap();
            t
        };
        let outer = smooth_tape(&params_outer);
        let composed = Tape::compose(&outer, &inner).unwrap();
        let x = Vector::from_vec(x);
        let policy = SelectionPolicy::default();

        let y_inner = inner.eval(&x).unwrap();
        prop_assert_eq!(composed.eval(&x).unwrap(), outer.eval(&y_inner).unwrap());

        let j_composed = composed.jacobian_selection(&x, &policy).unwrap().matrix;
        let j_chain = outer.jacobian_selection(&y_inner, &policy).unwrap().matrix
            * inner.jacobian_selection(&x, &policy).unwrap().matrix;
        let scale = 1.0 + j_chain.amax();
        prop_assert!(
            (&j_composed - &j_chain).amax() <= 1e-12 * scale,
            "composed {:?} vs chained {:?}",
            j_composed,
            j_chain
        );
    }

    #[test]
    fn selections_agree_across_policies_away_from_kinks(
        params in small(12),
        x in small(3),
    ) {
        let t = kinky_tape(&params);
        let x = Vector::from_vec(x);
        // keep a margin from every kink: preactivations and inputs nonzero
        let m1 = Matrix::from_row_slice(3, 3, &params[0..9]);
        let b1 = Vector::from_vec(params[9..12].to_vec());
        let pre = m1 * &x + b1;
        prop_assume!(pre.iter().all(|v| v.abs() > 1e-6));
        prop_assume!(x.iter().all(|v| v.abs() > 1e-6));

        let reference = t
            .jacobian_selection(&x, &SelectionPolicy::default())
            .unwrap()
            .matrix;
        for policy in SelectionPolicy::kink_endpoint_variants(6) {
            let j = t.jacobian_selection(&x, &policy).unwrap().matrix;
            prop_assert!(
                j.iter().zip(reference.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "policy {} disagrees off the kink set",
                policy.id
            );
        }
    }

    #[test]
    fn selections_match_finite_differences_on_smooth_tapes(
        params in small(20),
        x in small(3),
    ) {
        let t = smooth_tape(&params);
        let x = Vector::from_vec(x);
        let j = t
            .jacobian_selection(&x, &SelectionPolicy::default())
            .unwrap()
            .matrix;
        let fd = finite_difference_jacobian(&t, &x, 1e-6).unwrap();
        prop_assert!(
            (&j - &fd).amax() <= 1e-5 * (1.0 + j.amax()),
            "selection {:?} vs finite differences {:?}",
            j,
            fd
        );
    }
}
