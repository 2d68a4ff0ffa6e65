use avseg::inference::{binary_inference, semantic_inference, SemanticMap};
use avseg::metrics::{fscore, interframe_similarity, jaccard, MetricAccumulator};
use avseg::tensor::Tensor;
use proptest::prelude::*;

fn map(frames: usize, w: usize, classes: usize, labels: &[u8]) -> SemanticMap {
    SemanticMap::new(frames, 1, w, classes, labels.to_vec()).unwrap()
}

#[test]
fn one_confident_query_labels_the_frame() {
    let cls = Tensor::new([1, 1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let got = semantic_inference(&cls, &Tensor::ones([1, 1, 3, 3]), 1e-4).unwrap();
    assert_eq!(got.labels, vec![3; 9]);
}

#[test]
fn no_object_queries_leave_background() {
    let cls = Tensor::from_fn([2, 3, 3], |i| (i % 3 == 2) as u8 as f64);
    let got = semantic_inference(&cls, &Tensor::ones([2, 3, 2, 2]), 1e-4).unwrap();
    assert!(got.labels.iter().all(|&l| l == 0));
}

#[test]
fn two_query_two_class_hand_instance() {
    // Rows: query posteriors over (class 1, class 2, no-object).
    let c = [[0.6, 0.3, 0.1], [0.2, 0.7, 0.1]];
    let m = [[0.9, 0.2, 0.5, 0.0], [0.1, 0.8, 0.5, 0.05]];
    let cls = Tensor::new([1, 2, 3], c.concat()).unwrap();
    let mask = Tensor::new([1, 2, 1, 4], m.concat()).unwrap();
    let got = semantic_inference(&cls, &mask, 0.1).unwrap();
    let mut want = Vec::new();
    for px in 0..4 {
        let o1 = c[0][0] * m[0][px] + c[1][0] * m[1][px];
        let o2 = c[0][1] * m[0][px] + c[1][1] * m[1][px];
        let (best, score) = if o2 > o1 { (2, o2) } else { (1, o1) };
        want.push(if score >= 0.1 { best } else { 0 });
    }
    // O = (0.56, 0.34, 0.40, 0.01) for class 1 and (0.34, 0.62, 0.50, 0.035) for class 2.
    assert_eq!(want, vec![1, 2, 2, 0]);
    assert_eq!(got.labels, want);
}

#[test]
fn ties_go_to_the_lower_class() {
    let cls = Tensor::new([1, 1, 3], vec![0.4, 0.4, 0.2]).unwrap();
    let got = semantic_inference(&cls, &Tensor::ones([1, 1, 1, 2]), 0.0).unwrap();
    assert_eq!(got.labels, vec![1, 1]);
}

#[test]
fn binary_path_matches_semantic_path() {
    let cls = Tensor::new([2, 3, 2], vec![0.9, 0.1, 0.3, 0.7, 0.5, 0.5, 0.2, 0.8, 0.6, 0.4, 0.95, 0.05]).unwrap();
    let mask = Tensor::from_fn([2, 3, 4, 4], |i| ((i * 37) % 11) as f64 / 10.0);
    for tau in [0.0, 0.3, 0.6] {
        let b = binary_inference(&cls, &mask, tau).unwrap();
        assert_eq!(b, semantic_inference(&cls, &mask, tau).unwrap());
        assert_eq!(b.classes, 1);
    }
    let empty = binary_inference(&cls, &Tensor::zeros([2, 3, 4, 4]), 0.1).unwrap();
    assert!(empty.labels.iter().all(|&l| l == 0));
    assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
    assert!(binary_inference(&Tensor::zeros([2, 3, 3]), &mask, 0.1).is_err());
}

#[test]
fn jaccard_fixtures() {
    let gt = map(1, 8, 1, &[1, 1, 1, 1, 0, 0, 0, 0]);
    assert_eq!(jaccard(&gt, &gt).unwrap(), 1.0);
    let half = map(1, 8, 1, &[0, 0, 1, 1, 1, 1, 0, 0]);
    assert!((jaccard(&half, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    let disjoint = map(1, 8, 1, &[0, 0, 0, 0, 1, 1, 1, 1]);
    assert_eq!(jaccard(&disjoint, &gt).unwrap(), 0.0);
    let short = map(1, 4, 1, &[1, 1, 1, 1]);
    assert_eq!(jaccard(&short, &gt).unwrap_err().kind(), "dimension");
}

#[test]
fn fscore_fixtures() {
    let gt = map(1, 8, 1, &[1, 1, 0, 0, 0, 0, 0, 0]);
    assert_eq!(fscore(&gt, &gt).unwrap(), 1.0);
    let loose = map(1, 8, 1, &[1, 1, 1, 1, 0, 0, 0, 0]);
    assert!((fscore(&loose, &gt).unwrap() - 0.565217).abs() < 1e-6);
    assert!((fscore(&loose, &gt).unwrap() - 1.3 * 0.5 / 1.15).abs() < 1e-15);
    let empty = map(1, 8, 1, &[0; 8]);
    assert_eq!(fscore(&empty, &gt).unwrap(), 0.0);
    assert_eq!(fscore(&empty, &empty).unwrap(), 1.0);
}

#[test]
fn classes_are_averaged_before_clips() {
    // Class 1 perfect, class 2 missed entirely: clip J = (1 + 0) / 2.
    let gt = map(1, 4, 2, &[1, 1, 2, 2]);
    let pred = map(1, 4, 2, &[1, 1, 0, 0]);
    let mut acc = MetricAccumulator::new();
    acc.add("a", &pred, &gt).unwrap();
    acc.add("b", &gt, &gt).unwrap();
    let r = acc.report();
    assert_eq!(r.per_clip[0].miou, 0.5);
    assert_eq!(r.miou, 0.75);
    assert_eq!(r.per_class["2"].miou, 0.5);
    assert_eq!(r.per_class["1"].clips, 2);
}

#[test]
fn interframe_similarity_fixtures() {
    let still = map(3, 4, 1, &[1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0]);
    assert_eq!(interframe_similarity(&still), Some(1.0));
    let flip = map(3, 4, 1, &[1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0]);
    assert_eq!(interframe_similarity(&flip), Some(0.0));
    let shift = map(2, 6, 1, &[1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1]);
    assert!((interframe_similarity(&shift).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(interframe_similarity(&map(1, 4, 1, &[1, 0, 0, 1])), None);
}

fn labels(n: usize, k: u8) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0..=k, n)
}

proptest! {
    #[test]
    fn scores_stay_in_the_unit_interval(p in labels(24, 3), g in labels(24, 3)) {
        let (p, g) = (map(2, 12, 3, &p), map(2, 12, 3, &g));
        for v in [jaccard(&p, &g).unwrap(), fscore(&p, &g).unwrap(), interframe_similarity(&p).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn argmax_ignores_common_rescaling(
        classes in proptest::collection::vec(0usize..3, 4),
        m in proptest::collection::vec(0.01f64..1.0, 4 * 6),
        scale in proptest::collection::vec(0.1f64..10.0, 6),
    ) {
        let cls = Tensor::from_fn([1, 4, 4], |i| (classes[i / 4] == i % 4) as u8 as f64);
        let mask = Tensor::new([1, 4, 2, 3], m.clone()).unwrap();
        let scaled = Tensor::from_fn([1, 4, 2, 3], |i| m[i] * scale[i % 6]);
        prop_assert_eq!(
            semantic_inference(&cls, &mask, 0.0).unwrap(),
            semantic_inference(&cls, &scaled, 0.0).unwrap()
        );
    }

    #[test]
    fn binary_equals_semantic_at_one_class(
        p in proptest::collection::vec(0.0f64..1.0, 2 * 3),
        m in proptest::collection::vec(0.0f64..1.0, 2 * 3 * 9),
        tau in 0.0f64..1.0,
    ) {
        let cls = Tensor::from_fn([2, 3, 2], |i| if i % 2 == 0 { p[i / 2] } else { 1.0 - p[i / 2] });
        let mask = Tensor::new([2, 3, 3, 3], m).unwrap();
        prop_assert_eq!(binary_inference(&cls, &mask, tau).unwrap(), semantic_inference(&cls, &mask, tau).unwrap());
    }
}
