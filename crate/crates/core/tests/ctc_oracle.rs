use dsr_core::autograd::{gradcheck, Mat, Tape};
use dsr_core::content::{ctc_loss, ctc_nll, ctc_on_tape, log_posteriors, PhonemePosteriorgram};
use dsr_core::synthcorpus::PhonemeInventory;
use proptest::prelude::*;

fn inventory(classes: usize) -> PhonemeInventory {
    PhonemeInventory::new((0..classes - 1).map(|i| format!("p{i}")).collect()).unwrap()
}

/// Sum over every frame-level path whose collapse equals `target`.
fn brute_force_log_prob(probs: &Mat, target: &[usize], blank: usize) -> f64 {
    let (t_len, v) = probs.dim();
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    for code in 0..v.pow(t_len as u32) {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % v;
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != blank && prev != Some(k) {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &k)| probs[[t, k]]).product::<f64>();
        }
    }
    total.ln()
}

fn softmax(logits: &Mat) -> Mat {
    log_posteriors(logits).mapv(f64::exp)
}

fn instance() -> impl Strategy<Value = (Mat, Vec<usize>, usize)> {
    (1usize..=6, 2usize..=4).prop_flat_map(|(t, v)| {
        (
            proptest::collection::vec(-3.0f64..3.0, t * v),
            proptest::collection::vec(0..v - 1, 0..=3),
        )
            .prop_map(move |(l, target)| (Mat::from_shape_vec((t, v), l).unwrap(), target, v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn forward_algorithm_matches_path_enumeration((logits, target, v) in instance()) {
        let probs = softmax(&logits);
        let oracle = brute_force_log_prob(&probs, &target, v - 1);
        // Inventories need two phonemes; a single-phoneme alphabet goes
        // through the raw forward algorithm.
        let loss = if v >= 3 {
            let post = PhonemePosteriorgram::new(probs.clone(), inventory(v)).unwrap();
            ctc_loss(&post, &target)
        } else {
            ctc_nll(&probs.mapv(f64::ln), &target, v - 1).map(|r| r.0)
        };
        match loss {
            Ok(loss) => prop_assert!((-loss - oracle).abs() < 1e-6, "{} vs {}", -loss, oracle),
            Err(_) => prop_assert_eq!(oracle, f64::NEG_INFINITY),
        }
    }
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let logits = Mat::from_shape_fn((6, 4), |(t, k)| ((t * 7 + k * 3) % 5) as f64 * 0.4 - 0.8);
    let target = [0usize, 2, 2];
    let err = gradcheck::max_rel_error(&logits, |t: &mut Tape, x| {
        let lp = t.log_softmax_rows(x);
        ctc_on_tape(t, lp, &target, 3).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}
