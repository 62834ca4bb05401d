//! Every tape op against central differences, on random shapes and values.

use nvrm::autodiff::{finite_diff_grad, max_relative_error, Tape, Var};
use nvrm::model::{Fcn, FcnConfig};
use nvrm::tensor::{ParameterSet, Tensor};
use nvrm::train::rng_for;
use nvrm::{Real, Result};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn gaussian(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, stream);
    (0..n).map(|_| f64::standard_normal(&mut rng)).collect()
}

fn params(shapes: &[&[usize]], seed: u64) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    for (i, s) in shapes.iter().enumerate() {
        let n = s.iter().product();
        let t = Tensor::new(s.to_vec(), gaussian(n, seed, i as u64)).unwrap();
        p.push(format!("p{i}"), t.with_requires_grad(true)).unwrap();
    }
    p
}

/// Max relative error of the tape gradient of `build` against differences.
fn check(p: &ParameterSet<f64>, build: impl for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars = tape.parameters(p);
    let loss = build(&mut tape, &vars).unwrap();
    let analytic = tape.backward(loss).unwrap();
    let numeric = finite_diff_grad(
        |q| {
            let mut tape = Tape::new();
            let vars = tape.parameters(q);
            let loss = build(&mut tape, &vars)?;
            tape.scalar(loss)
        },
        p,
        H,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric)
}

/// Random constant weights turn any tensor into a generic scalar.
fn project(tape: &mut Tape<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n = shape.iter().product();
    let w = tape.input("w", Tensor::new(shape, gaussian(n, seed, 99))?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let p = params(&[&[m, k], &[k, n]], seed);
        let err = check(&p, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn add_bias(m in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let p = params(&[&[m, n], &[n]], seed);
        let err = check(&p, |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            project(t, y, seed)
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn relu_away_from_the_kink(m in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let p = params(&[&[m, n]], seed);
        prop_assume!(p.tensor(0).data().iter().all(|v| v.abs() > 1e-3));
        let err = check(&p, |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn softmax_cross_entropy(m in 1usize..6, c in 2usize..6, seed in any::<u64>(), shift in -50.0f64..50.0) {
        // Unit-scale logits keep every probability well above what central
        // differences can resolve; large common offsets exercise the
        // max-subtraction.
        let mut p = params(&[&[m, c]], seed);
        p.tensor_mut(0).data_mut().iter_mut().for_each(|v| *v += shift);
        let mut rng = rng_for(seed, 5);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let err = check(&p, |t, v| t.softmax_cross_entropy(v[0], &labels));
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn softmax_cross_entropy_closed_form_at_extreme_logits(
        m in 1usize..6, c in 2usize..6, seed in any::<u64>(), spread in 1.0f64..300.0, shift in -1e4f64..1e4
    ) {
        let mut p = params(&[&[m, c]], seed);
        p.tensor_mut(0).data_mut().iter_mut().for_each(|v| *v = spread * *v + shift);
        let mut rng = rng_for(seed, 5);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let mut tape = Tape::new();
        let v = tape.parameters(&p);
        let loss = tape.softmax_cross_entropy(v[0], &labels).unwrap();
        prop_assert!(tape.scalar(loss).unwrap().is_finite());
        let g = tape.backward(loss).unwrap();
        let g = g.get(0).unwrap().data();
        for (i, row) in p.tensor(0).data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            for j in 0..c {
                let expected = ((row[j] - max).exp() / z - f64::from(u8::from(j == labels[i]))) / m as f64;
                prop_assert!((g[i * c + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sum_norm_add_mul_scale(n in 1usize..8, seed in any::<u64>(), factor in -3.0f64..3.0) {
        let p = params(&[&[n], &[n]], seed);
        let err = check(&p, |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[1])?;
            let c = t.scale(b, factor);
            let d = t.half_squared_norm(c);
            let e = t.sum(v[0]);
            t.add(d, e)
        });
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn weighted_squared_distance(n in 1usize..8, seed in any::<u64>(), scale in 0.0f64..500.0) {
        let p = params(&[&[n]], seed);
        let anchor: &'static [f64] = Vec::leak(gaussian(n, seed, 50));
        let weights: &'static [f64] = Vec::leak(gaussian(n, seed, 51).into_iter().map(f64::abs).collect());
        let err = check(&p, |t, v| t.weighted_squared_distance(v[0], anchor, weights, scale));
        prop_assert!(err < TOL, "{err:e}");
    }

    #[test]
    fn forward_loss_is_pure(seed in any::<u64>(), batch in 1usize..9) {
        let model = Fcn::new(FcnConfig::new(vec![6, 5, 4, 3], 2)).unwrap();
        let p: ParameterSet<f64> = model.init(&mut rng_for(seed, 0));
        let x = Tensor::matrix(batch, 6, gaussian(batch * 6, seed, 1)).unwrap();
        let mut rng = rng_for(seed, 2);
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
        let a = model.forward_loss(&p, &x, &y, 1).unwrap().loss;
        let b = model.forward_loss(&p, &x, &y, 1).unwrap().loss;
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn full_network_on_a_hundred_random_instances() {
    let cases = nvrm::gradcheck::check_random_fcns(100, H, &mut rng_for(77, 0)).unwrap();
    let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    assert!(worst < TOL, "{worst:e}");
}

