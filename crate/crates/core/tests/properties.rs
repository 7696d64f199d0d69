use proptest::prelude::*;

use codistill::data::{Batch, Provenance};
use codistill::losses::{cross_entropy, feature_l2, kl_distill};
use codistill::perturb::{apply, sample_params};
use codistill::rng::{stream, Stream};
use codistill::tensor::softmax_rows;
use codistill::{elect_teacher, LabelDist, PerturbConfig, PerturbKind, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-8.0f64..8.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn logits() -> impl Strategy<Value = Tensor> {
    (1usize..6, 2usize..8).prop_flat_map(|(b, k)| matrix(b, k))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(z in logits()) {
        let p = softmax_rows(&z).unwrap();
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(z in logits(), c in -50.0f64..50.0) {
        let a = softmax_rows(&z).unwrap();
        let b = softmax_rows(&z.map(|v| v + c)).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self((zt, zs) in (1usize..5, 2usize..7).prop_flat_map(|(b, k)| (matrix(b, k), matrix(b, k)))) {
        let pt = softmax_rows(&zt).unwrap();
        let ps = softmax_rows(&zs).unwrap();
        prop_assert!(kl_distill(&pt, &ps).unwrap().value >= -1e-12);
        prop_assert!(kl_distill(&pt, &pt).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn losses_are_invariant_to_batch_duplication(z in logits(), f in matrix(3, 4)) {
        // Batch means: stacking a batch on itself leaves every loss unchanged.
        let k = z.row_len();
        let p = softmax_rows(&z).unwrap();
        let labels: Vec<usize> = (0..p.rows()).map(|i| i % k).collect();
        let twice = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..2 * t.rows()).map(|r| t.row(r % t.rows()).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let y = LabelDist::one_hot(&labels, k).unwrap();
        let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let y2 = LabelDist::one_hot(&labels2, k).unwrap();
        let ce = cross_entropy(&p, &y).unwrap().value;
        let ce2 = cross_entropy(&twice(&p), &y2).unwrap().value;
        prop_assert!((ce - ce2).abs() < 1e-12);
        let q = softmax_rows(&z.map(|v| 0.5 * v)).unwrap();
        let kl = kl_distill(&q, &p).unwrap().value;
        let kl2 = kl_distill(&twice(&q), &twice(&p)).unwrap().value;
        prop_assert!((kl - kl2).abs() < 1e-12);
        let g = f.map(|v| v * 0.3 - 1.0);
        let l = feature_l2(&f, &g).unwrap().value;
        let l2 = feature_l2(&twice(&f), &twice(&g)).unwrap().value;
        prop_assert!((l - l2).abs() < 1e-9 * l.max(1.0));
    }

    #[test]
    fn feature_loss_is_homogeneous(f in matrix(2, 5), c in 0.1f64..4.0) {
        let g = f.map(|v| (v * 1.7).sin());
        let base = feature_l2(&f, &g).unwrap().value;
        let scaled = feature_l2(&f.scale(c), &g.scale(c)).unwrap().value;
        prop_assert!((scaled - c * c * base).abs() <= 1e-9 * scaled.max(1.0));
    }

    #[test]
    fn election_picks_lowest_index_minimum(losses in prop::collection::vec(0u8..4, 2..9)) {
        let l: Vec<f64> = losses.iter().map(|&v| v as f64 * 0.25).collect();
        let t = elect_teacher(&l).unwrap();
        prop_assert!(l.iter().all(|&v| l[t] <= v));
        prop_assert!(l[..t].iter().all(|&v| v > l[t]));
    }

    #[test]
    fn perturbation_keeps_shapes_and_label_rows(
        seed in any::<u64>(),
        kind in 0usize..5,
        b in 1usize..6,
        c in 1usize..4,
        h in 1usize..7,
        w in 1usize..7,
    ) {
        let mut rng = stream(Stream::PerturbParams, seed, 0);
        let x = Tensor::new(vec![b, c, h, w], (0..b * c * h * w).map(|i| (i as f64).cos()).collect()).unwrap();
        let y = LabelDist::one_hot(&(0..b).map(|i| i % 3).collect::<Vec<_>>(), 3).unwrap();
        let params = sample_params(PerturbKind::ALL[kind], &[c, h, w], b, &PerturbConfig::default(), &mut rng);
        let (x2, y2) = apply(&x, &y, &params).unwrap();
        prop_assert_eq!(x2.shape(), x.shape());
        prop_assert!(x2.is_finite());
        for r in 0..b {
            let row = y2.tensor().row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        let batch = Batch { inputs: x2, labels: y2, indices: (0..b).collect(), provenance: Provenance::Perturbed };
        prop_assert_eq!(batch.len(), b);
    }
}
