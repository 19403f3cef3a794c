use super::*;
use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};

fn vec1(v: f64) -> Vector {
    Vector::from_vec(vec![v])
}

/// f(z) = tanh z + relu(-z) + z - relu(z), identically tanh z but with relu
/// kinks at the origin.
fn tanh_with_redundant_relus() -> Tape {
    let mut t = Tape::new(1);
    let z = t.full_input().unwrap();
    let th = t.tanh(z).unwrap();
    let nz = t.neg(z).unwrap();
    let rn = t.relu(nz).unwrap();
    let rp = t.relu(z).unwrap();
    let s1 = t.add(th, rn).unwrap();
    let s2 = t.add(s1, z).unwrap();
    let out = t.sub(s2, rp).unwrap();
    t.set_outputs(&[out]).unwrap();
    t
}

#[test]
fn redundant_relu_tape_evaluates_to_tanh() {
    let t = tanh_with_redundant_relus();
    let y = t.eval(&vec1(0.5)).unwrap();
    assert_relative_eq!(y[0], 0.5f64.tanh(), epsilon = 1e-15);
    let y = t.eval(&vec1(-1.3)).unwrap();
    assert_relative_eq!(y[0], (-1.3f64).tanh(), epsilon = 1e-15);
}

#[test]
fn identity_tape_returns_input() {
    let mut t = Tape::new(3);
    let x = t.full_input().unwrap();
    t.set_outputs(&[x]).unwrap();
    let v = Vector::from_vec(vec![1.0, -2.0, 0.25]);
    assert_eq!(t.eval(&v).unwrap(), v);
    let j = t.jacobian_selection(&v, &SelectionPolicy::default()).unwrap();
    assert_eq!(j.matrix, Matrix::identity(3, 3));
}

#[test]
fn soft_threshold_forward() {
    let mut t = Tape::new(1);
    let u = t.full_input().unwrap();
    let s = t.soft_threshold(u, 1.0).unwrap();
    t.set_outputs(&[s]).unwrap();
    assert_eq!(t.eval(&vec1(2.0)).unwrap()[0], 1.0);
    assert_eq!(t.eval(&vec1(-2.0)).unwrap()[0], -1.0);
    assert_eq!(t.eval(&vec1(0.5)).unwrap()[0], 0.0);
}

#[test]
fn relu_kink_policy_endpoints() {
    let mut t = Tape::new(1);
    let x = t.full_input().unwrap();
    let r = t.relu(x).unwrap();
    t.set_outputs(&[r]).unwrap();

    let zero = SelectionPolicy::default();
    assert_eq!(t.jacobian_selection(&vec1(0.0), &zero).unwrap().matrix[(0, 0)], 0.0);

    let one = SelectionPolicy { relu_at_zero: 1.0, ..SelectionPolicy::default() };
    assert_eq!(t.jacobian_selection(&vec1(0.0), &one).unwrap().matrix[(0, 0)], 1.0);
}

#[test]
fn redundant_relu_selection_at_origin_is_two() {
    // tanh' = 1, relu'(0)=0 on both relu terms, plus the bare z term:
    // 1 - 0 + 1 - 0 = 2
    let t = tanh_with_redundant_relus();
    let j = t.jacobian_selection(&vec1(0.0), &SelectionPolicy::default()).unwrap();
    assert_relative_eq!(j.matrix[(0, 0)], 2.0, epsilon = 1e-15);
    // away from the kink the selection is the true derivative
    let j = t.jacobian_selection(&vec1(0.8), &SelectionPolicy::default()).unwrap();
    let th = 0.8f64.tanh();
    assert_relative_eq!(j.matrix[(0, 0)], 1.0 - th * th, epsilon = 1e-12);
}

#[test]
fn smooth_tape_matches_finite_differences() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let w = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
    let b = Vector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
    let mut t = Tape::new(4);
    let x = t.full_input().unwrap();
    let a = t.affine(x, &w, &b).unwrap();
    let y = t.tanh(a).unwrap();
    t.set_outputs(&[y]).unwrap();

    for _ in 0..20 {
        let p = Vector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        let j = t.jacobian_selection(&p, &SelectionPolicy::default()).unwrap().matrix;
        let fd = finite_difference_jacobian(&t, &p, 1e-6).unwrap();
        assert!((j - fd).amax() < 1e-6);
    }
}

#[test]
fn all_primitives_match_finite_differences_off_kinks() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let policy = SelectionPolicy::default();

    // one tape exercising every differentiable-region primitive
    let mut t = Tape::new(4);
    let x = t.full_input().unwrap();
    let a = t.slice(x, 0, 2).unwrap();
    let b = t.slice(x, 2, 2).unwrap();
    let sum = t.add(a, b).unwrap();
    let dif = t.sub(a, b).unwrap();
    let prd = t.mul(sum, dif).unwrap();
    let shift = t.constant(vec![5.0, 5.0]).unwrap();
    let pos = t.add(prd, shift).unwrap();
    let quo = t.div(a, pos).unwrap();
    let lg = t.log(pos).unwrap();
    let pw = t.power(pos, 1.7).unwrap();
    let ex = t.exp(quo).unwrap();
    let th = t.tanh(prd).unwrap();
    let re = t.relu(dif).unwrap();
    let ab = t.abs(sum).unwrap();
    let mx = t.max(a, b).unwrap();
    let mn = t.min(a, b).unwrap();
    let cl = t.clamp(prd, vec![-0.7, -0.7], vec![0.7, 0.7]).unwrap();
    let st = t.soft_threshold(dif, 0.05).unwrap();
    let nm = t.euclidean_norm(sum).unwrap();
    let sq = t.squared_norm(dif).unwrap();
    let dt = t.dot(a, b).unwrap();
    let sm = t.sum(prd).unwrap();
    let ng = t.neg(lg).unwrap();
    let sc = t.scale(pw, 0.3).unwrap();
    let cat = t
        .concat(vec![quo, ex, th, re, ab, mx, mn, cl, st, nm, sq, dt, sm, ng, sc])
        .unwrap();
    t.set_outputs(&[cat]).unwrap();

    let mut checked = 0;
    while checked < 200 {
        let p = Vector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        // stay clear of every kink so central differences are valid
        let margin = 1e-2;
        let a = [p[0], p[1]];
        let b = [p[2], p[3]];
        let prd: Vec<f64> =
            (0..2).map(|k| (a[k] + b[k]) * (a[k] - b[k])).collect();
        let clear = (0..2).all(|k| {
            (a[k] - b[k]).abs() > margin
                && (a[k] + b[k]).abs() > margin
                && ((a[k] - b[k]).abs() - 0.05).abs() > margin
                && (prd[k].abs() - 0.7).abs() > margin
        });
        if !clear {
            continue;
        }
        checked += 1;
        let j = t.jacobian_selection(&p, &policy).unwrap().matrix;
        let fd = finite_difference_jacobian(&t, &p, 1e-6).unwrap();
        let scale = 1.0 + fd.amax();
        assert!(
            ((&j - &fd).amax()) / scale < 1e-5,
            "selection/FD mismatch at {p:?}"
        );
    }
}

#[test]
fn randomized_policy_stays_in_clarke_sets_and_is_reproducible() {
    let mut t = Tape::new(1);
    let x = t.full_input().unwrap();
    let r = t.relu(x).unwrap();
    let a = t.abs(x).unwrap();
    let s = t.sign(x).unwrap();
    let c1 = t.add(r, a).unwrap();
    let out = t.add(c1, s).unwrap();
    t.set_outputs(&[out]).unwrap();

    for seed in 0..20u64 {
        let policy = SelectionPolicy::randomized(seed);
        let j1 = t.jacobian_selection(&vec1(0.0), &policy).unwrap().matrix;
        let j2 = t.jacobian_selection(&vec1(0.0), &policy).unwrap().matrix;
        assert_eq!(j1, j2);
        // relu'(0) in [0,1], abs'(0) in [-1,1], sign'(0) in [-1,1]
        assert!(j1[(0, 0)] >= 0.0 + -1.0 + -1.0 && j1[(0, 0)] <= 1.0 + 1.0 + 1.0);
    }
}

#[test]
fn line_check_smooth_tape_full_agreement() {
    let mut t = Tape::new(2);
    let x = t.full_input().unwrap();
    let th = t.tanh(x).unwrap();
    let n = t.squared_norm(th).unwrap();
    t.set_outputs(&[n]).unwrap();
    let report = t
        .residual_line_check(
            &Vector::from_vec(vec![0.3, -0.4]),
            &Vector::from_vec(vec![1.0, 0.5]),
            100,
            &SelectionPolicy::default(),
            42,
        )
        .unwrap();
    assert_eq!(report.num_agreeing, report.num_samples);
}

#[test]
fn line_check_relu_across_kink() {
    let mut t = Tape::new(1);
    let x = t.full_input().unwrap();
    let r = t.relu(x).unwrap();
    t.set_outputs(&[r]).unwrap();
    // from -0.5 along v=1 the kink sits at t=0.5, a measure-zero event
    let report = t
        .residual_line_check(&vec1(-0.5), &vec1(1.0), 200, &SelectionPolicy::default(), 3)
        .unwrap();
    assert!(report.num_agreeing >= report.num_samples - 1);
}

#[test]
fn line_check_survives_corrupted_selection_at_measure_zero_kink() {
    let mut t = Tape::new(1);
    let x = t.full_input().unwrap();
    let a = t.abs(x).unwrap();
    t.set_outputs(&[a]).unwrap();
    // a wildly inadmissible derivative at 0 only matters on a null set
    let corrupted = SelectionPolicy {
        abs_at_zero: 5.0,
        id: "corrupted".into(),
        ..SelectionPolicy::default()
    };
    let report = t
        .residual_line_check(&vec1(-0.5), &vec1(1.0), 500, &corrupted, 9)
        .unwrap();
    assert!(report.num_agreeing >= report.num_samples - 1);
    assert!(report.agreement_fraction() > 0.99);
}

#[test]
fn composition_matches_product_of_selections() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut inner = Tape::new(2);
    let x = inner.full_input().unwrap();
    let r = inner.relu(x).unwrap();
    let a = inner.abs(x).unwrap();
    let cat = inner.concat(vec![r, a]).unwrap();
    inner.set_outputs(&[cat]).unwrap();

    let w = Matrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
    let b = Vector::zeros(2);
    let mut outer = Tape::new(4);
    let y = outer.full_input().unwrap();
    let af = outer.affine(y, &w, &b).unwrap();
    let th = outer.tanh(af).unwrap();
    outer.set_outputs(&[th]).unwrap();

    let composed = Tape::compose(&outer, &inner).unwrap();
    let policy = SelectionPolicy { relu_at_zero: 0.3, abs_at_zero: -0.5, ..Default::default() };
    for p in [
        Vector::from_vec(vec![0.7, -1.2]),
        Vector::from_vec(vec![0.0, 0.0]),
        Vector::from_vec(vec![-0.3, 0.0]),
    ] {
        let jc = composed.jacobian_selection(&p, &policy).unwrap().matrix;
        let ji = inner.jacobian_selection(&p, &policy).unwrap().matrix;
        let mid = inner.eval(&p).unwrap();
        let jo = outer.jacobian_selection(&mid, &policy).unwrap().matrix;
        assert!((jc - jo * ji).amax() < 1e-14);
        assert_eq!(composed.eval(&p).unwrap(), outer.eval(&mid).unwrap());
    }
}

#[test]
fn json_round_trip_preserves_behavior() {
    let t = tanh_with_redundant_relus();
    let json = t.to_json().unwrap();
    let back = Tape::from_json(&json).unwrap();
    for v in [-1.0, 0.0, 0.5, 2.0] {
        assert_eq!(t.eval(&vec1(v)).unwrap(), back.eval(&vec1(v)).unwrap());
        let p = SelectionPolicy::default();
        assert_eq!(
            t.jacobian_selection(&vec1(v), &p).unwrap().matrix,
            back.jacobian_selection(&vec1(v), &p).unwrap().matrix
        );
    }
}

#[test]
fn from_json_rejects_forward_references() {
    let bad = r#"{
        "input_arity": 1,
        "nodes": [{"kind": "neg", "a": 1}, {"kind": "input", "start": 0, "len": 1}],
        "outputs": [0]
    }"#;
    assert!(Tape::from_json(bad).is_err());
}

#[test]
fn domain_errors_are_reported() {
    let mut t = Tape::new(1);
    let x = t.full_input().unwrap();
    let l = t.log(x).unwrap();
    t.set_outputs(&[l]).unwrap();
    assert!(matches!(t.eval(&vec1(-1.0)), Err(Error::DomainError(_))));
    assert!(matches!(t.eval(&vec1(0.0)), Err(Error::DomainError(_))));

    let mut t = Tape::new(1);
    let x = t.full_input().unwrap();
    let p = t.power(x, 0.5).unwrap();
    t.set_outputs(&[p]).unwrap();
    assert!(matches!(t.eval(&vec1(-2.0)), Err(Error::DomainError(_))));
}

#[test]
fn shape_errors_at_construction() {
    let mut t = Tape::new(2);
    let a = t.input(0, 1).unwrap();
    let b = t.input(0, 2).unwrap();
    assert!(t.add(a, b).is_err());
    assert!(t.input(1, 2).is_err());
    assert!(t.slice(b, 1, 2).is_err());
}

#[test]
fn multiple_outputs_concatenate() {
    let mut t = Tape::new(2);
    let x = t.full_input().unwrap();
    let n = t.euclidean_norm(x).unwrap();
    let s = t.sum(x).unwrap();
    t.set_outputs(&[n, s, x]).unwrap();
    let y = t.eval(&Vector::from_vec(vec![3.0, 4.0])).unwrap();
    assert_eq!(y.len(), 4);
    assert_relative_eq!(y[0], 5.0);
    assert_relative_eq!(y[1], 7.0);
    assert_eq!(t.output_arity(), 4);
    let j = t
        .jacobian_selection(&Vector::from_vec(vec![3.0, 4.0]), &SelectionPolicy::default())
        .unwrap()
        .matrix;
    let fd =
        finite_difference_jacobian(&t, &Vector::from_vec(vec![3.0, 4.0]), 1e-6).unwrap();
    assert!((j - fd).amax() < 1e-6);
}

#[test]
fn norm_at_origin_uses_zero_subgradient() {
    let mut t = Tape::new(2);
    let x = t.full_input().unwrap();
    let n = t.euclidean_norm(x).unwrap();
    t.set_outputs(&[n]).unwrap();
    let j = t
        .jacobian_selection(&Vector::zeros(2), &SelectionPolicy::default())
        .unwrap()
        .matrix;
    assert_eq!(j, Matrix::zeros(1, 2));
}
