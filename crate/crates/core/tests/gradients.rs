mod common;

use nlgr::diffcore::RngStream;

#[test]
fn primitives_match_finite_differences() {
    let mut rng = RngStream::new(11);
    for _ in 0..5 {
        for (name, err) in common::primitive_errors(&mut rng).unwrap() {
            assert!(err < common::TOL, "{name}: {err}");
        }
    }
}

#[test]
fn evaluator_loss_matches_finite_differences() {
    let mut rng = RngStream::new(12);
    for _ in 0..3 {
        let err = common::evaluator_loss_error(&mut rng).unwrap();
        assert!(err < common::TOL, "{err}");
    }
}

#[test]
fn generator_loss_matches_finite_differences() {
    let mut rng = RngStream::new(13);
    for _ in 0..3 {
        let err = common::generator_loss_error(&mut rng).unwrap();
        assert!(err < common::TOL, "{err}");
    }
}
