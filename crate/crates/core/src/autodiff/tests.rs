use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;
use crate::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, for relu/abs checks.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

/// Contracts an arbitrary output with fixed random weights so every output
/// coordinate contributes a distinct sensitivity.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> crate::Result<Var> {
    let w = random(tape.shape(out), seed);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

const TOL: f64 = 1e-6;

fn check(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) {
    let report = grad_check(f, params, 1e-6).unwrap();
    assert!(
        report.max_rel_error < TOL,
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn relu_example() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 2.0]));
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn segment_sum_example() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let y = t
        .segment_reduce(x, Arc::from(vec![0, 0, 1]), 2, SegmentReduce::Sum)
        .unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 3.0]);
}

#[test]
fn reshape_round_trip_on_tape() {
    let mut t = Tape::new();
    let x = t.constant(random(&[3, 8], 1));
    let y = t.reshape(x, &[3, 4, 2]).unwrap();
    let z = t.reshape(y, &[3, 8]).unwrap();
    assert_eq!(t.value(x), t.value(z));
}

#[test]
fn sum_gradient_is_ones() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.3, -2.0, 5.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn quadratic_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Shape(_))));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(t.log(x), Err(Error::NonFinite(_))));
}

#[test]
fn fan_out_adjoints_add() {
    // d(f+g)/dx with f = sum(x²), g = sum(3x)
    let x0 = random(&[4], 2);
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let f = t.sum(sq).unwrap();
    let three = t.scale(x, 3.0).unwrap();
    let g = t.sum(three).unwrap();
    let total = t.add(f, g).unwrap();
    let grads = t.backward(total).unwrap();
    let expect = x0.map(|v| 2.0 * v + 3.0);
    assert_eq!(grads.get(x).unwrap(), &expect);
}

#[test]
fn sum_of_squares_passes_gradcheck() {
    let report = grad_check(
        |t, p| {
            let sq = t.mul(p[0], p[0])?;
            t.sum(sq)
        },
        &[random(&[10], 3)],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
}

#[test]
fn matmul_and_transpose_adjoints() {
    check(&[random(&[3, 4], 1), random(&[4, 5], 2)], |t, p| {
        let y = t.matmul(p[0], p[1])?;
        let y = t.transpose(y)?;
        probe(t, y, 9)
    });
}

#[test]
fn kron_adjoint() {
    check(&[random(&[2, 3], 4), random(&[3, 2], 5)], |t, p| {
        let y = t.kron(p[0], p[1])?;
        probe(t, y, 10)
    });
}

#[test]
fn elementwise_adjoints() {
    let a = random(&[3, 3], 6);
    let b = away_from_zero(&[3, 3], 7);
    check(&[a.clone(), b.clone()], |t, p| {
        let s = t.add(p[0], p[1])?;
        let d = t.sub(s, p[1])?;
        let m = t.mul(d, p[1])?;
        let q = t.div(m, p[1])?;
        let q = t.scale(q, -1.5)?;
        probe(t, q, 11)
    });
}

#[test]
fn scale_by_and_row_vec_adjoints() {
    check(
        &[random(&[4, 3], 8), random(&[1], 9), random(&[3], 10), random(&[3], 11)],
        |t, p| {
            let y = t.scale_by(p[0], p[1])?;
            let y = t.add_row_vec(y, p[2])?;
            let y = t.mul_row_vec(y, p[3])?;
            probe(t, y, 12)
        },
    );
}

#[test]
fn unary_adjoints() {
    let x = away_from_zero(&[2, 5], 13);
    check(&[x.clone()], |t, p| {
        let r = t.relu(p[0])?;
        probe(t, r, 14)
    });
    check(&[x.clone()], |t, p| {
        let s = t.sigmoid(p[0])?;
        probe(t, s, 15)
    });
    check(&[x.clone()], |t, p| {
        let e = t.exp(p[0])?;
        probe(t, e, 16)
    });
    check(&[x.clone()], |t, p| {
        let a = t.abs(p[0])?;
        let l = t.log(a)?;
        probe(t, l, 17)
    });
    check(&[x], |t, p| {
        let m = t.mean(p[0])?;
        let s = t.sum(p[0])?;
        let both = t.mul(m, s)?;
        t.sum(both)
    });
}

#[test]
fn shape_op_adjoints() {
    check(&[random(&[3, 2, 4], 18), random(&[2, 2, 4], 19)], |t, p| {
        let a = t.select(p[0], 1)?;
        let c = t.concat(&[p[0], p[1]])?;
        let c = t.reshape(c, &[5, 8])?;
        let tiled = t.tile_cols(a, 3)?;
        let s1 = probe(t, c, 20)?;
        let s2 = probe(t, tiled, 21)?;
        t.add(s1, s2)
    });
}

#[test]
fn gather_adjoint_accumulates_repeats() {
    let idx: Arc<[usize]> = Arc::from(vec![2, 0, 2, 1, 2]);
    check(&[random(&[3, 4], 22)], move |t, p| {
        let g = t.gather(p[0], idx.clone())?;
        probe(t, g, 23)
    });
}

#[test]
fn gather_rejects_out_of_range() {
    let mut t = Tape::new();
    let table = t.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(t.gather(table, Arc::from(vec![3])), Err(Error::OutOfBounds(_))));
}

#[test]
fn segment_adjoints() {
    let seg: Arc<[usize]> = Arc::from(vec![1, 0, 1, 3, 1, 0]);
    // distinct values keep min/max away from ties
    let x = Tensor::new(&[6, 2], (0..12).map(|i| ((i * 7) % 12) as f64 * 0.37 - 2.0).collect()).unwrap();
    for kind in [SegmentReduce::Sum, SegmentReduce::Mean, SegmentReduce::Min, SegmentReduce::Max] {
        let seg = seg.clone();
        check(&[x.clone()], move |t, p| {
            let y = t.segment_reduce(p[0], seg.clone(), 4, kind)?;
            probe(t, y, 24)
        });
    }
    let seg2 = seg.clone();
    check(&[random(&[6, 2], 25)], move |t, p| {
        let y = t.segment_softmax(p[0], seg2.clone(), 4)?;
        probe(t, y, 26)
    });
}

#[test]
fn empty_segments_are_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[2, 1], vec![-4.0, -5.0]).unwrap());
    for kind in [SegmentReduce::Sum, SegmentReduce::Mean, SegmentReduce::Min, SegmentReduce::Max] {
        let y = t.segment_reduce(x, Arc::from(vec![2, 2]), 3, kind).unwrap();
        assert_eq!(&t.value(y).data()[..2], &[0.0, 0.0]);
    }
}

#[test]
fn max_ties_route_to_lowest_index() {
    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[3, 1], vec![2.0, 5.0, 5.0]).unwrap());
    let y = t.segment_reduce(x, Arc::from(vec![0, 0, 0]), 1, SegmentReduce::Max).unwrap();
    let s = t.sum(y).unwrap();
    assert_eq!(t.kink_margin(), 0.0);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::new(&[3, 1], vec![1.0, 1.0, 3.0]).unwrap());
    let y = t.segment_reduce(x, Arc::from(vec![0, 0, 0]), 1, SegmentReduce::Min).unwrap();
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn batch_norm_adjoint() {
    check(&[random(&[5, 3], 27), away_from_zero(&[3], 28), random(&[3], 29)], |t, p| {
        let (y, _) = t.batch_norm(p[0], p[1], p[2], 1e-5)?;
        probe(t, y, 30)
    });
}

#[test]
fn group_norm_adjoint() {
    for p in [1.0, 2.0, 3.0] {
        check(&[away_from_zero(&[4, 5], 31)], move |t, v| {
            let y = t.group_lp_norm(v[0], p)?;
            probe(t, y, 32)
        });
    }
}

#[test]
fn loss_adjoints() {
    let mut targets = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, f64::NAN, 1.0]).unwrap();
    targets.data_mut()[1] = 0.0;
    let tg = targets.clone();
    check(&[random(&[3, 2], 33).scale(3.0)], move |t, p| t.sigmoid_bce(p[0], &tg));
    check(&[random(&[4, 5], 34).scale(3.0)], |t, p| t.softmax_ce(p[0], &[0, 4, 2, 2]));
}

#[test]
fn bce_masks_nan_targets() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::vector(vec![0.0, 7.0]));
    let loss = t.sigmoid_bce(z, &Tensor::vector(vec![1.0, f64::NAN])).unwrap();
    assert!((t.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let all_masked = t.sigmoid_bce(z, &Tensor::vector(vec![f64::NAN, f64::NAN]));
    assert!(matches!(all_masked, Err(Error::InvalidArgument(_))));
}

#[test]
fn batch_norm_needs_two_rows() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2]));
    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));
    assert!(t.batch_norm(x, g, b, 1e-5).is_err());
}

#[test]
fn random_composite_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for round in 0..5 {
        let a = random(&[4, 3], 100 + round);
        let b = random(&[3, 3], 200 + round);
        let scale = rng.random_range(0.5..2.0);
        check(&[a, b], move |t, p| {
            let y = t.matmul(p[0], p[1])?;
            let y = t.scale(y, scale)?;
            let y = t.sigmoid(y)?;
            let y = t.exp(y)?;
            probe(t, y, 300)
        });
    }
}
