//! Dense `f64` tensors, a reverse-mode tape, Adam and the `ASCR1`
//! checkpoint format.

mod adam;
mod backend;
mod graph;
pub mod gradcheck;
pub mod init;
pub mod nn;
pub(crate) mod kernels;
mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use backend::{Backend, Eager};
pub use graph::{Graph, Var};
pub use kernels::BilinearTap;
pub use ops::Reduction;
pub use params::{read_checkpoint, ParamId, ParamStore, Parameter, CHECKPOINT_MAGIC};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("backward needs a single-element loss, got {0} elements")]
    NotScalar(usize),
    #[error("parameter '{0}' has no gradient")]
    MissingGradient(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParameter(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("loss mask selects no entries")]
    EmptyMask,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Total element count of a parameter set.
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Contracts the output with fixed random weights so every output element
    /// contributes a distinct amount to the scalar loss.
    fn contract(g: &mut Graph, out: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.value(out).shape().to_vec();
        let w = g.input(random(&shape, &mut rng));
        let prod = g.mul(&out, &w).unwrap();
        g.sum(&prod)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5], &mut rng);
        let mut e = Eager::new();
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = e.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_nine_ones() {
        let mut e = Eager::new();
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let y = e
            .conv2d(&x, &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), 1, 0)
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_output_size_and_channel_check() {
        let mut e = Eager::new();
        let x = Tensor::zeros(&[2, 9, 7]);
        let y = e
            .conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3]), 2, 1)
            .unwrap();
        assert_eq!(y.shape(), &[3, 5, 4]);
        let err = e.conv2d(&x, &Tensor::zeros(&[3, 4, 3, 3]), &Tensor::zeros(&[3]), 1, 1);
        assert!(matches!(err, Err(NumericsError::ShapeMismatch { .. })));
        let even = e.conv2d(&x, &Tensor::zeros(&[3, 2, 2, 2]), &Tensor::zeros(&[3]), 1, 1);
        assert!(even.is_err());
    }

    #[test]
    fn softmax_and_relu_examples() {
        let mut e = Eager::new();
        let s = e.softmax(&Tensor::full(&[4], 0.3), 0).unwrap();
        assert!(s.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let r = e.relu(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert!(matches!(
            e.softmax(&Tensor::zeros(&[2, 2]), 2),
            Err(NumericsError::AxisOutOfRange { .. })
        ));
        assert!(e.concat(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 2]), 3).is_err());
    }

    #[test]
    fn concat_and_narrow_along_columns() {
        let mut e = Eager::new();
        let a = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = e.concat(&a, &b, 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let n = e.narrow(&c, 1, 1, 2).unwrap();
        assert_eq!(n.data(), b.data());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let loss = g.sum(&v);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).tensor().grad().unwrap(), &[1.0, 1.0]);

        store.get_mut(p).tensor_mut().clear_grad();
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let sq = g.mul(&v, &v).unwrap();
        let loss = g.sum(&sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).tensor().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let sq = g.mul(&v, &v).unwrap();
        let loss = g.sum(&sq);
        g.backward(loss, &mut store).unwrap();
        let once = store.get(p).tensor().grad().unwrap().to_vec();
        g.backward(loss, &mut store).unwrap();
        let twice = store.get(p).tensor().grad().unwrap().to_vec();
        assert_eq!(twice, once.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        store.zero_grad();
        assert_eq!(store.get(p).tensor().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros(&[3]));
        let y = g.relu(&x);
        assert!(matches!(
            g.backward(y, &mut ParamStore::new()),
            Err(NumericsError::NotScalar(3))
        ));
    }

    #[test]
    fn linear_parameter_count() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[512, 256])).unwrap();
        store.add("b", Tensor::zeros(&[512])).unwrap();
        assert_eq!(count_parameters(&store), 131_584);
    }

    #[test]
    fn graph_and_eager_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 6, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut g = Graph::new();
        let (gx, gw, gb) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let gy = g.conv2d(&gx, &gw, &gb, 1, 1).unwrap();
        let gp = g.maxpool2x2(&gy).unwrap();
        let mut e = Eager::new();
        let ey = e.conv2d(&x, &w, &b, 1, 1).unwrap();
        let ep = e.maxpool2x2(&ey).unwrap();
        assert_eq!(g.value(gp).data(), ep.data());
    }

    #[test]
    fn gradcheck_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("w", random(&[3, 2, 3, 3], &mut rng)).unwrap();
        store.add("b", random(&[3], &mut rng)).unwrap();
        let x = random(&[2, 5, 5], &mut rng);
        let report = check_gradients(&mut store, &[x], 1e-5, |g, s, xs| {
            let (w, b) = (g.param(s, s.id("w").unwrap()), g.param(s, s.id("b").unwrap()));
            let y = g.conv2d(&xs[0], &w, &b, 1, 1)?;
            Ok(contract(g, y, 11))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gradcheck_strided_pool_and_matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [random(&[2, 6, 7], &mut rng), random(&[3, 4], &mut rng), random(&[5, 4], &mut rng)];
        let mut store = ParamStore::new();
        store.add("w", random(&[2, 2, 3, 3], &mut rng)).unwrap();
        store.add("b", random(&[2], &mut rng)).unwrap();
        let report = check_gradients(&mut store, &inputs, 1e-5, |g, s, xs| {
            let (w, b) = (g.param(s, s.id("w").unwrap()), g.param(s, s.id("b").unwrap()));
            let y = g.conv2d(&xs[0], &w, &b, 2, 1)?;
            let y = g.maxpool2x2(&y)?;
            let l1 = contract(g, y, 5);
            let ab = g.matmul_nt(&xs[1], &xs[2])?; // 3×5
            let t = g.transpose(&ab)?; // 5×3
            let back = g.matmul(&t, &xs[1])?; // 5×4
            let sm = g.softmax(&back, 1)?;
            let l2 = contract(g, sm, 6);
            g.add(&l1, &l2)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gradcheck_linear_relu_concat_narrow() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [random(&[4, 3], &mut rng), random(&[4, 2], &mut rng)];
        let mut store = ParamStore::new();
        store.add("w", random(&[6, 5], &mut rng)).unwrap();
        store.add("b", random(&[6], &mut rng)).unwrap();
        store.add("w2", random(&[3, 6], &mut rng)).unwrap();
        store.add_frozen("k", random(&[3], &mut rng)).unwrap();
        let report = check_gradients(&mut store, &inputs, 1e-5, |g, s, xs| {
            let w = g.param(s, s.id("w").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let w2 = g.param(s, s.id("w2").unwrap());
            let k = g.param(s, s.id("k").unwrap());
            let cat = g.concat(&xs[0], &xs[1], 1)?;
            let y = g.linear(&cat, &w, &b)?;
            let y = g.relu(&y);
            let y = g.linear(&y, &w2, &k)?;
            let m = g.narrow(&cat, 1, 2, 3)?;
            let m = g.scale(&m, 0.5);
            let d = g.sub(&y, &m)?;
            let r = g.reshape(&d, &[6, 2])?;
            Ok(contract(g, r, 12))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gradcheck_gather_and_l2_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let map = random(&[3, 6], &mut rng);
        let taps = Arc::new(vec![
            BilinearTap { cells: [0, 1, 2, 3], weights: [0.1, 0.2, 0.3, 0.4] },
            BilinearTap { cells: [5, 5, 4, 0], weights: [0.5, 0.25, 0.25, 0.0] },
            BilinearTap { cells: [2, 2, 2, 2], weights: [1.0, 0.0, 0.0, 0.0] },
        ]);
        let target = random(&[3, 3], &mut rng);
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let taps = taps.clone();
            let target = target.clone();
            let report = check_gradients(&mut ParamStore::new(), &[map.clone()], 1e-5, move |g, _, xs| {
                let rows = g.gather(&xs[0], taps.clone())?;
                g.l2_loss(&rows, &target, &[true, false, true], reduction)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
            assert_eq!(report.checked, 18);
        }
    }

    #[test]
    fn l2_loss_reductions() {
        let mut e = Eager::new();
        let pred = Tensor::new(&[2, 3], vec![1.0, 2.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let target = Tensor::zeros(&[2, 3]);
        let sum = e.l2_loss(&pred, &target, &[true, true], Reduction::Sum).unwrap();
        assert_eq!(sum.data(), &[9.0]);
        let mean = e.l2_loss(&pred, &target, &[true, true], Reduction::Mean).unwrap();
        assert_eq!(mean.data(), &[4.5]);
        let masked = e.l2_loss(&pred, &target, &[false, true], Reduction::Mean).unwrap();
        assert_eq!(masked.data(), &[0.0]);
        assert!(matches!(
            e.l2_loss(&pred, &target, &[false, false], Reduction::Mean),
            Err(NumericsError::EmptyMask)
        ));
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Tensor::new(&[3, 4], values).unwrap();
            let s = Eager::new().softmax(&x, 1).unwrap();
            for row in s.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn relu_is_idempotent(values in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            let n = values.len();
            let x = Tensor::new(&[n], values).unwrap();
            let mut e = Eager::new();
            let once = e.relu(&x);
            let twice = e.relu(&once);
            prop_assert_eq!(twice.data(), once.data());
        }

        #[test]
        fn conv_is_linear_in_input(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 5, 4], &mut rng);
            let y = random(&[2, 5, 4], &mut rng);
            let w = random(&[3, 2, 3, 3], &mut rng);
            let b = Tensor::zeros(&[3]);
            let mut e = Eager::new();
            let combo = Tensor::from_fn(&[2, 5, 4], |i| x.data()[i] + alpha * y.data()[i]);
            let lhs = e.conv2d(&combo, &w, &b, 1, 1).unwrap();
            let cx = e.conv2d(&x, &w, &b, 1, 1).unwrap();
            let cy = e.conv2d(&y, &w, &b, 1, 1).unwrap();
            for i in 0..lhs.numel() {
                prop_assert!((lhs.data()[i] - cx.data()[i] - alpha * cy.data()[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn checkpoint_round_trip(values in proptest::collection::vec(proptest::num::f64::ANY, 1..20)) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.add("a.b", Tensor::new(&[n], values).unwrap()).unwrap();
            let mut bytes = Vec::new();
            store.write_checkpoint(&mut bytes).unwrap();
            let entries = read_checkpoint(bytes.as_slice()).unwrap();
            let original = store.by_name("a.b").unwrap().tensor().data();
            let restored = entries[0].1.data();
            prop_assert!(original.iter().zip(restored).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
