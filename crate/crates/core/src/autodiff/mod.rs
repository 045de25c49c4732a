//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Single-threaded by contract: one tape per training step, parameters
//! registered as leaves, gradients read back after `backward`.

mod check;
mod loss;
mod tape;
mod tensor;

pub use check::{finite_difference_check, FdReport};
pub use tape::{dropout_mask, log_softmax_into, softmax_into, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let id = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let b = tape.leaf(
            Tensor::new(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap(),
            false,
        );
        let c = tape.matmul(id, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), false);
        let v = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap(), false);
        let out = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = rand_tensor(&[3, 3], 11);
        let b = rand_tensor(&[3, 3], 12);
        let report = finite_difference_check(&[a, b], 1e-4, |tape, vars| {
            let c = tape.matmul(vars[0], vars[1]).unwrap();
            tape.sum(c)
        });
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4]), false);
        let loss = tape
            .softmax_cross_entropy(logits, &[2], &[true])
            .unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);

        let mut hot = Tensor::zeros(&[1, 4]);
        hot.data_mut()[1] = 1e4;
        let logits = tape.leaf(hot, false);
        let loss = tape
            .softmax_cross_entropy(logits, &[1], &[true])
            .unwrap();
        assert!(tape.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_brute_force() {
        let logits = rand_tensor(&[5, 16], 3);
        let mut rng = rng_from_seed(4);
        let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(0..16)).collect();
        let mask = vec![true, true, false, true, true];

        // direct summation oracle
        let mut expect = 0.0;
        let mut count = 0.0;
        for i in 0..5 {
            if !mask[i] {
                continue;
            }
            let row = logits.row(i);
            let z: f64 = row.iter().map(|&x| x.exp()).sum();
            expect += z.ln() - row[targets[i]];
            count += 1.0;
        }
        expect /= count;

        let tape = Tape::new();
        let lv = tape.leaf(logits, false);
        let loss = tape.softmax_cross_entropy(lv, &targets, &mask).unwrap();
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_all_masked_is_zero_with_zero_grad() {
        let tape = Tape::new();
        let logits = tape.leaf(rand_tensor(&[3, 4], 9), true);
        let loss = tape
            .softmax_cross_entropy(logits, &[0, 1, 2], &[false, false, false])
            .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        // combine with a live term so backward has a path
        let live = tape.sum(logits);
        let total = tape.add(loss, live).unwrap();
        tape.backward(total).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn focal_degenerates_to_cross_entropy() {
        let logits = rand_tensor(&[4, 8], 21);
        let targets = [1, 3, 0, 7];
        let mask = [true; 4];
        let tape = Tape::new();
        let lv = tape.leaf(logits, false);
        let ce = tape
            .softmax_cross_entropy(lv, &targets, &mask)
            .unwrap();
        let fl = tape.focal_loss(lv, &targets, &mask, 1.0, 0.0).unwrap();
        assert_eq!(tape.value(ce).item(), tape.value(fl).item());
    }

    #[test]
    fn focal_closed_form_half_probability() {
        // two classes, equal logits: p_t = 0.5; alpha 2, gamma 3
        // per-position loss = 2 * 0.5^3 * ln 2
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 2]), false);
        let loss = tape.focal_loss(logits, &[0], &[true], 2.0, 3.0).unwrap();
        let expect = 2.0 * 0.125 * 2.0f64.ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn focal_saturated_is_zero() {
        let mut hot = Tensor::zeros(&[1, 3]);
        hot.data_mut()[0] = 50.0;
        let tape = Tape::new();
        let lv = tape.leaf(hot, true);
        let loss = tape.focal_loss(lv, &[0], &[true], 2.0, 3.0).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
        tape.backward(loss).unwrap();
        assert!(tape
            .grad(lv)
            .unwrap()
            .data()
            .iter()
            .all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let logits = rand_tensor(&[3, 6], 31);
        let tape = Tape::new();
        let a = tape.leaf(logits.clone(), false);
        let b = tape.leaf(logits, false);
        let kl = tape.kl_masked(a, b, &[true, true, true], 1.0).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_summation() {
        // teacher favors class 0 with weight 2 of 4; student uniform over 3
        let tape = Tape::new();
        let t = tape.leaf(
            Tensor::new(vec![1, 3], vec![2.0f64.ln(), 0.0, 0.0]).unwrap(),
            false,
        );
        let s = tape.leaf(Tensor::zeros(&[1, 3]), false);
        let kl = tape.kl_masked(t, s, &[true], 1.0).unwrap();
        // P = [1/2, 1/4, 1/4], Q = [1/3, 1/3, 1/3]
        let p = [0.5f64, 0.25, 0.25];
        let expect: f64 = p.iter().map(|&pi| pi * (pi / (1.0 / 3.0)).ln()).sum();
        assert!((tape.value(kl).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn kl_detached_teacher_gets_no_gradient() {
        let tape = Tape::new();
        let teacher = tape.leaf(rand_tensor(&[2, 5], 41), true);
        let student = tape.leaf(rand_tensor(&[2, 5], 42), true);
        let frozen = tape.detach(teacher);
        let kl = tape.kl_masked(frozen, student, &[true, true], 2.0).unwrap();
        tape.backward(kl).unwrap();
        assert!(tape.grad(teacher).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(tape
            .grad(student)
            .unwrap()
            .data()
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn losses_match_finite_differences() {
        for seed in [1u64, 2, 3] {
            let logits = rand_tensor(&[4, 7], seed);
            let mut rng = rng_from_seed(seed + 100);
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
            let mask = [true, false, true, true];

            let t = targets.clone();
            let report = finite_difference_check(&[logits.clone()], 1e-4, |tape, vars| {
                tape.focal_loss(vars[0], &t, &mask, 2.0, 3.0).unwrap()
            });
            assert!(report.max_rel_err < 1e-3, "focal {}", report.max_rel_err);

            let other = rand_tensor(&[4, 7], seed + 7);
            let report =
                finite_difference_check(&[logits.clone(), other.clone()], 1e-4, |tape, vars| {
                    tape.kl_masked(vars[0], vars[1], &mask, 1.7).unwrap()
                });
            assert!(report.max_rel_err < 1e-3, "kl {}", report.max_rel_err);

            let report = finite_difference_check(&[logits, other], 1e-4, |tape, vars| {
                tape.symmetric_kl(vars[0], vars[1], &mask).unwrap()
            });
            assert!(report.max_rel_err < 1e-3, "rdrop {}", report.max_rel_err);
        }
    }

    #[test]
    fn layer_norm_and_structure_ops_match_finite_differences() {
        let x = rand_tensor(&[3, 6], 51);
        let gain = rand_tensor(&[6], 52);
        let bias = rand_tensor(&[6], 53);
        let report = finite_difference_check(&[x, gain, bias], 1e-4, |tape, vars| {
            let ln = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5).unwrap();
            let sq = tape.mul(ln, ln).unwrap();
            tape.sum(sq)
        });
        assert!(report.max_rel_err < 1e-3, "ln {}", report.max_rel_err);

        let table = rand_tensor(&[5, 4], 54);
        let report = finite_difference_check(&[table], 1e-4, |tape, vars| {
            let rows = tape.gather_rows(vars[0], &[0, 2, 2, 4]).unwrap();
            let soft = tape.softmax_rows(rows).unwrap();
            let picked = tape
                .gather_elements(soft, &[(0, 1), (1, 3), (2, 0), (3, 2)])
                .unwrap();
            tape.sum(picked)
        });
        assert!(report.max_rel_err < 1e-3, "gather {}", report.max_rel_err);

        let a = rand_tensor(&[2, 3], 55);
        let b = rand_tensor(&[4, 3], 56);
        let report = finite_difference_check(&[a, b], 1e-4, |tape, vars| {
            let stacked = tape.row_stack(&[vars[0], vars[1]]).unwrap();
            let picked = tape.select_rows(stacked, &[1, 3, 5]).unwrap();
            let lsm = tape.log_softmax_rows(picked).unwrap();
            let g = tape.gelu(lsm);
            tape.mean(g)
        });
        assert!(report.max_rel_err < 1e-3, "stack {}", report.max_rel_err);
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let a = dropout_mask(77, 0.4, 256);
        let b = dropout_mask(77, 0.4, 256);
        assert_eq!(a, b);
        let c = dropout_mask(78, 0.4, 256);
        assert_ne!(a, c);
    }

    #[test]
    fn double_backward_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gradient_accumulates_through_shared_operand() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap(); // x^2, dy/dx = 2x = 6
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }
}
