//! Dense `f64` tensors, a define-by-run graph with reverse-mode gradients,
//! a finite-difference gradient checker and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, rel_error, GradCheckReport, GradChecker, DEFAULT_EPS};
pub use graph::{Graph, Mode, Var};
pub use params::{Param, ParamId, ParameterSet};
pub use tensor::{Result, Tensor, TensorError};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut seeded(seed))
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2();
        let n = b.dims2().1;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    /// Weighted sum with fixed random weights, so every output coordinate
    /// contributes a distinct amount to the checked scalar.
    fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let w = g.constant(rand_t(g.value(y).shape(), seed));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);

        let a = rand_t(&[3, 4], 1);
        let av = g.constant(a.clone());
        let i = g.constant(Tensor::identity(4));
        let ai = g.matmul(av, i).unwrap();
        assert_eq!(g.value(ai), &a);

        let (a, b) = (rand_t(&[2, 3], 2), rand_t(&[3, 2], 3));
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!(matches!(g.matmul(av, av), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let s = g.softmax_rows(z).unwrap();
        assert!(g.value(s).data().iter().all(|&p| p == 0.25));

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax_rows(x).unwrap();
        let denom: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, p) in g.value(s).data().iter().enumerate() {
            assert!((p - ((k + 1) as f64).exp() / denom).abs() <= 1e-15);
        }

        let bad = g.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert_eq!(g.softmax_rows(bad), Err(TensorError::NonFiniteInput("softmax_rows")));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant_and_normalized(
            row in proptest::collection::vec(-30.0f64..30.0, 1..8),
            c in -50.0f64..50.0,
        ) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(row.clone()));
            let shifted = g.constant(Tensor::vector(row.iter().map(|v| v + c).collect()));
            let a = g.softmax_rows(x).unwrap();
            let b = g.softmax_rows(shifted).unwrap();
            let sum: f64 = g.value(a).data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(g.value(a).data().iter().all(|&p| p >= 0.0));
            prop_assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-12);
        }
    }

    #[test]
    fn embedding_examples() {
        let table = rand_t(&[5, 3], 4);
        let mut g = Graph::new();
        let t = g.leaf(table.clone(), true);
        let one = g.embedding(t, &[2]).unwrap();
        assert_eq!(g.value(one).data(), table.row(2));

        let dup = g.embedding(t, &[2, 2]).unwrap();
        let loss = g.sum(dup);
        g.backward(loss).unwrap();
        let grad = g.grad(t).unwrap();
        for r in 0..5 {
            let want = if r == 2 { 2.0 } else { 0.0 };
            assert!(grad.row(r).iter().all(|&v| v == want));
        }

        let idx = [4, 0, 3, 0, 1];
        let out = g.embedding(t, &idx).unwrap();
        let mut oracle = Vec::new();
        for &i in &idx {
            for d in 0..3 {
                oracle.push(table.data()[i * 3 + d]);
            }
        }
        assert_eq!(g.value(out).data(), oracle.as_slice());
        assert_eq!(g.embedding(t, &[5]), Err(TensorError::IndexOutOfRange { index: 5, len: 5 }));
    }

    #[test]
    fn conv_text_examples() {
        let mut g = Graph::new();
        let seq = rand_t(&[5, 3], 5);
        let s = g.constant(seq.clone());
        let bias = g.constant(Tensor::scalar(0.25));

        let full = rand_t(&[5, 3], 6);
        let f = g.constant(full.clone());
        let out = g.conv_text(s, f, bias).unwrap();
        let dot: f64 = seq.data().iter().zip(full.data()).map(|(a, b)| a * b).sum();
        assert_eq!(g.value(out).shape(), &[1]);
        assert!((g.value(out).item() - (0.25 + dot)).abs() < 1e-12);

        let zero = g.constant(Tensor::zeros(&[2, 3]));
        let out = g.conv_text(s, zero, bias).unwrap();
        assert_eq!(g.value(out).data(), &[0.25; 4]);

        let filt = rand_t(&[2, 3], 7);
        let f = g.constant(filt.clone());
        let out = g.conv_text(s, f, bias).unwrap();
        for t in 0..4 {
            let mut acc = 0.25;
            for u in 0..2 {
                for d in 0..3 {
                    acc += seq.at(t + u, d) * filt.at(u, d);
                }
            }
            assert!((g.value(out).data()[t] - acc).abs() < 1e-12);
        }

        let wide = g.constant(Tensor::zeros(&[6, 3]));
        assert_eq!(g.conv_text(s, wide, bias), Err(TensorError::WindowTooLarge { window: 6, len: 5 }));
    }

    #[test]
    fn max_over_time_examples() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::filled(&[4], 1.5), true);
        let m = g.max_over_time(c).unwrap();
        assert_eq!(g.value(m).item(), 1.5);
        g.backward(m).unwrap();
        assert_eq!(g.grad(c).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let one = g.constant(Tensor::scalar(-3.0));
        let m = g.max_over_time(one).unwrap();
        assert_eq!(g.value(m).item(), -3.0);

        let v = rand_t(&[9], 8);
        let x = g.constant(v.clone());
        let m = g.max_over_time(x).unwrap();
        let scan = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(g.value(m).item(), scan);
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(0.0), true);
        let t = g.tanh(z);
        assert_eq!(g.value(t).item(), 0.0);
        g.backward(t).unwrap();
        assert_eq!(g.grad(z).unwrap().item(), 1.0);

        let neg = g.constant(Tensor::vector(vec![-0.5, -2.0]));
        let r = g.relu(neg);
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);

        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn dropout_examples() {
        let mut rng = seeded(9);
        let mut g = Graph::new();
        let x = g.constant(rand_t(&[10], 10));
        for mode in [Mode::Train, Mode::Eval] {
            let y = g.dropout(x, 0.0, mode, &mut rng).unwrap();
            assert_eq!(g.value(y), g.value(x));
        }
        let y = g.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.dropout(x, 1.0, Mode::Train, &mut rng), Err(TensorError::InvalidRate(1.0)));

        let ones = g.constant(Tensor::filled(&[100_000], 1.0));
        let d = g.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = g.value(d).data().iter().sum::<f64>() / 100_000.0;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let same = g.mse_loss(t, t).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let p = g.constant(Tensor::filled(&[5], 3.0));
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.value(l).item(), 2.0);

        let (a, b) = (rand_t(&[7], 11), rand_t(&[7], 12));
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = g.mse_loss(av, bv).unwrap();
        let mut oracle = 0.0;
        for i in 0..7 {
            oracle += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((g.value(l).item() - oracle / 7.0).abs() < 1e-15);
        let short = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.mse_loss(av, short), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.leaf(Tensor::scalar(-2.0), true);
        let xy = g.mul(x, y).unwrap();
        g.backward(xy).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), -2.0);
        assert_eq!(g.grad(y).unwrap().item(), 3.0);

        let v = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert_eq!(g.backward(v), Err(TensorError::NotScalarLoss(vec![2])));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut params = ParameterSet::new();
        let used = params.insert("used", Tensor::vector(vec![1.0, 2.0]));
        let unused = params.insert("unused", Tensor::vector(vec![5.0]));
        params.zero_grads();
        let mut g = Graph::new();
        let u = g.param(&params, used);
        let _ = g.param(&params, unused);
        let s = g.sum(u);
        g.backward(s).unwrap();
        g.accumulate_into(&mut params);
        assert_eq!(params.grad(used).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(params.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn two_passes_accumulate_and_zero_grads_resets() {
        let mut params = ParameterSet::new();
        let w = params.insert("w", rand_t(&[3], 13));
        params.zero_grads();
        let pass = |params: &mut ParameterSet| {
            let mut g = Graph::new();
            let v = g.param(params, w);
            let sq = g.mul(v, v).unwrap();
            let s = g.sum(sq);
            g.backward(s).unwrap();
            g.accumulate_into(params);
        };
        pass(&mut params);
        let once = params.grad(w).unwrap().clone();
        pass(&mut params);
        let twice = params.grad(w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        params.zero_grads();
        assert!(params.grad(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_on_one_graph_accumulates_leaves() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 8.0);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn grad_check_square() {
        let r = grad_check(|g, x| g.mul(x, x).map(|y| g.sum(y)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn grad_check_flags_kinks() {
        let f = |g: &mut Graph, x: Var| {
            let y = g.relu(x);
            Ok(g.sum(y))
        };
        let at_kink = grad_check(f, &Tensor::vector(vec![0.0, 2e-6, 0.5]), 1e-5).unwrap();
        assert_eq!(at_kink.kinks, 2);
        let smooth = grad_check(f, &Tensor::vector(vec![-0.5, 0.5]), 1e-5).unwrap();
        assert_eq!(smooth.kinks, 0);
        assert!(smooth.max_rel_error <= 1e-8, "{smooth:?}");
    }

    #[test]
    fn grad_check_softmax_mse_pipeline() {
        let target = rand_t(&[3, 4], 14);
        let f = |g: &mut Graph, x: Var| {
            let s = g.softmax_rows(x)?;
            let t = g.constant(target.clone());
            g.mse_loss(s, t)
        };
        let r = grad_check(f, &rand_t(&[3, 4], 15), 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_every_op() {
        let eps = DEFAULT_EPS;
        let tol = 1e-4;
        let check = |name: &str, f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: Tensor| {
            let r = grad_check(f, &x, eps).unwrap();
            assert!(r.max_rel_error <= tol, "{name}: {r:?}");
        };
        let b = rand_t(&[4, 2], 20);
        check("matmul lhs", &|g, x| { let c = g.constant(b.clone()); let y = g.matmul(x, c)?; weighted(g, y, 21) }, rand_t(&[3, 4], 22));
        let a = rand_t(&[2, 3], 23);
        check("matmul rhs", &|g, x| { let c = g.constant(a.clone()); let y = g.matmul(c, x)?; weighted(g, y, 24) }, rand_t(&[3, 5], 25));
        check("transpose", &|g, x| { let y = g.transpose(x)?; weighted(g, y, 26) }, rand_t(&[2, 3], 27));
        check("tanh", &|g, x| { let y = g.tanh(x); weighted(g, y, 28) }, rand_t(&[6], 29));
        // Inputs bounded away from zero keep relu off its kink.
        let relu_in = Tensor::vector(vec![-0.8, -0.3, 0.4, 0.9, 0.2, -0.6]);
        check("relu", &|g, x| { let y = g.relu(x); weighted(g, y, 30) }, relu_in);
        check("scale", &|g, x| { let y = g.scale(x, -1.7); weighted(g, y, 31) }, rand_t(&[5], 32));
        let other = rand_t(&[2, 3], 33);
        check("mul", &|g, x| { let c = g.constant(other.clone()); let y = g.mul(x, c)?; weighted(g, y, 34) }, rand_t(&[2, 3], 35));
        check("sub", &|g, x| { let c = g.constant(other.clone()); let y = g.sub(c, x)?; weighted(g, y, 36) }, rand_t(&[2, 3], 37));
        check("add_row", &|g, x| { let c = g.constant(other.clone()); let y = g.add_row(c, x)?; weighted(g, y, 38) }, rand_t(&[3], 39));
        check("concat", &|g, x| { let c = g.constant(other.clone()); let y = g.concat(&[c, x, c])?; weighted(g, y, 40) }, rand_t(&[2, 2], 41));
        check("concat_rows", &|g, x| { let c = g.constant(other.clone()); let y = g.concat_rows(&[x, c])?; weighted(g, y, 42) }, rand_t(&[1, 3], 43));
        check("softmax", &|g, x| { let y = g.softmax_rows(x)?; weighted(g, y, 44) }, rand_t(&[3, 4], 45));
        check("embedding", &|g, x| { let y = g.embedding(x, &[1, 3, 1, 0])?; weighted(g, y, 46) }, rand_t(&[4, 3], 47));
        check("segment_sum", &|g, x| { let y = g.segment_sum(x, 3)?; weighted(g, y, 48) }, rand_t(&[6, 2], 49));
        let filters = rand_t(&[2, 3, 4], 50);
        let bias = rand_t(&[2], 51);
        check("conv seq", &|g, x| {
            let f = g.constant(filters.clone());
            let b = g.constant(bias.clone());
            let y = g.conv_text_bank(x, f, b)?;
            weighted(g, y, 52)
        }, rand_t(&[2, 5, 4], 53));
        let seq = rand_t(&[2, 5, 4], 54);
        check("conv filters", &|g, x| {
            let s = g.constant(seq.clone());
            let b = g.constant(bias.clone());
            let y = g.conv_text_bank(s, x, b)?;
            weighted(g, y, 55)
        }, rand_t(&[2, 3, 4], 56));
        check("conv bias", &|g, x| {
            let s = g.constant(seq.clone());
            let f = g.constant(filters.clone());
            let y = g.conv_text_bank(s, f, x)?;
            weighted(g, y, 57)
        }, rand_t(&[2], 58));
        check("max_over_time", &|g, x| { let y = g.max_over_time_bank(x)?; weighted(g, y, 59) }, rand_t(&[2, 4, 3], 60));
        check("dropout", &|g, x| {
            let y = g.dropout(x, 0.5, Mode::Train, &mut seeded(61))?;
            weighted(g, y, 62)
        }, rand_t(&[8], 63));
        let partner = rand_t(&[3, 4], 64);
        check("row_dot", &|g, x| { let c = g.constant(partner.clone()); let y = g.row_dot(x, c)?; weighted(g, y, 65) }, rand_t(&[3, 4], 66));
        let target = rand_t(&[5], 67);
        check("mse", &|g, x| { let t = g.constant(target.clone()); g.mse_loss(x, t) }, rand_t(&[5], 68));
        check("gather_cols", &|g, x| { let y = g.gather_cols(x, &[0, 2, 2, 1, 1, 0], 3)?; weighted(g, y, 69) }, rand_t(&[2, 3], 70));
        check("reshape", &|g, x| { let y = g.reshape(x, &[3, 2])?; weighted(g, y, 71) }, rand_t(&[2, 3], 72));
    }

    #[test]
    fn fault_injection_is_detected() {
        let checker = GradChecker { analytic_scale: 1.01, ..Default::default() };
        let r = checker.check(|g, x| Ok(g.tanh(x)).map(|y| g.sum(y)), &rand_t(&[3], 73)).unwrap();
        assert!(r.max_rel_error > 1e-3);
    }

    #[test]
    fn adam_examples() {
        let mut params = ParameterSet::new();
        let x = params.insert("x", Tensor::vector(vec![0.5, -1.0]));
        params.zero_grads();
        let mut adam = Adam::new(&params, 1e-3);
        let before = params.value(x).clone();
        adam.step(&mut params).unwrap();
        assert_eq!(params.value(x), &before);

        params.get_mut(x).grad = Some(Tensor::vector(vec![1.0, 1.0]));
        let mut adam = Adam::new(&params, 1e-3);
        adam.step(&mut params).unwrap();
        for (a, b) in params.value(x).data().iter().zip(before.data()) {
            assert!((b - a - 1e-3).abs() < 1e-10);
        }

        let mut fresh = ParameterSet::new();
        fresh.insert("y", Tensor::scalar(0.0));
        assert!(matches!(Adam::new(&fresh, 1e-3).step(&mut fresh), Err(TensorError::MissingGradient(_))));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParameterSet::new();
        let x = params.insert("x", Tensor::scalar(0.0));
        // lr 0.05: at the default 1e-3 Adam moves at most ~lr per step and
        // cannot travel a distance of 2 in 200 steps.
        let mut adam = Adam::new(&params, 0.05);
        for _ in 0..200 {
            params.zero_grads();
            let mut g = Graph::new();
            let v = g.param(&params, x);
            let two = g.constant(Tensor::scalar(2.0));
            let d = g.sub(v, two).unwrap();
            let sq = g.mul(d, d).unwrap();
            g.backward(sq).unwrap();
            g.accumulate_into(&mut params);
            adam.step(&mut params).unwrap();
        }
        let xv = params.value(x).item();
        assert!((xv - 2.0).abs() < 0.05, "x = {xv}");
    }

    #[test]
    fn adam_skips_frozen_rows() {
        let mut params = ParameterSet::new();
        let t = params.insert("t", Tensor::filled(&[3, 2], 1.0));
        params.freeze_row(t, 0);
        params.get_mut(t).grad = Some(Tensor::filled(&[3, 2], 1.0));
        Adam::new(&params, 0.1).step(&mut params).unwrap();
        assert_eq!(params.value(t).row(0), &[0.0, 0.0]);
        assert!(params.value(t).row(1)[0] < 1.0);
    }
}
