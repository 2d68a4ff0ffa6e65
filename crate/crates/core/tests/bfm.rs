use avseg::bfm::{sine_positional_encoding, sine_tokens, Bilateral};
use avseg::config::FusionMode;
use avseg::params::ParamStore;
use avseg::tensor::{Tape, Tensor};

fn scalar_weights(store: &mut ParamStore, w: &[(&str, f64)]) {
    for (name, v) in w {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.set(name, Tensor::full(shape, *v)).unwrap();
    }
}

const HAND: [(&str, f64); 9] = [
    ("bfm.query.weight", 0.7),
    ("bfm.key.weight", -1.3),
    ("bfm.value_audio.weight", 0.9),
    ("bfm.value_visual.weight", -0.4),
    ("bfm.residual_visual.weight", 1.1),
    ("bfm.residual_visual.bias", 0.05),
    ("bfm.residual_audio.weight", 0.6),
    ("bfm.residual_audio.bias", -0.2),
    ("bfm.audio_position", 0.0),
];

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn two_by_two_attention_matches_hand_chain() {
    let mut store = ParamStore::new(0);
    let bfm = Bilateral::new(&mut store, 1, 1, 1, 2, FusionMode::Bilateral, false).unwrap();
    scalar_weights(&mut store, &HAND);
    let w = |n: &str| HAND.iter().find(|(k, _)| *k == n).unwrap().1;
    let (xs, fs) = ([0.8, -1.5], [0.3, 2.0]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(Tensor::new([2, 1], xs.to_vec()).unwrap());
    let f = tape.constant(Tensor::new([2, 1], fs.to_vec()).unwrap());
    let (px, fa) = bfm.attend(&p, x, f, &[0, 1]).unwrap();

    let s = |i: usize, j: usize| xs[i] * w("bfm.query.weight") * fs[j] * w("bfm.key.weight");
    for i in 0..2 {
        let a = softmax(&[s(i, 0), s(i, 1)]);
        let want = a[0] * fs[0] * w("bfm.value_audio.weight")
            + a[1] * fs[1] * w("bfm.value_audio.weight")
            + xs[i] * w("bfm.residual_visual.weight")
            + w("bfm.residual_visual.bias");
        assert!((px.to_tensor().data()[i] - want).abs() < 1e-12);
    }
    for j in 0..2 {
        let a = softmax(&[s(0, j), s(1, j)]);
        let want = a[0] * xs[0] * w("bfm.value_visual.weight")
            + a[1] * xs[1] * w("bfm.value_visual.weight")
            + fs[j] * w("bfm.residual_audio.weight")
            + w("bfm.residual_audio.bias");
        assert!((fa.to_tensor().data()[j] - want).abs() < 1e-12);
    }
    assert_eq!(bfm.similarity_evaluations(), 1);
}

#[test]
fn single_audio_token_broadcasts_its_value() {
    let mut store = ParamStore::new(3);
    let bfm = Bilateral::new(&mut store, 4, 3, 4, 1, FusionMode::Bilateral, false).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(Tensor::from_fn([5, 4], |i| (i as f64).sin()));
    let f = tape.constant(Tensor::from_fn([1, 3], |i| i as f64 - 1.0));
    let a = bfm.attend_detailed(&p, x, f, &[0; 5]).unwrap();
    assert!(a.pixel_attention.unwrap().to_tensor().data().iter().all(|&v| v == 1.0));
    let va = bfm.weights.value_audio.forward(&p, f).unwrap().to_tensor();
    let res = bfm.weights.residual_visual.forward(&p, x).unwrap().to_tensor();
    let got = a.pixels.to_tensor();
    for n in 0..5 {
        for c in 0..4 {
            let want = va.data()[c] + res.data()[n * 4 + c];
            assert!((got.data()[n * 4 + c] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_values_leave_pure_residuals() {
    let mut store = ParamStore::new(5);
    let bfm = Bilateral::new(&mut store, 4, 3, 4, 2, FusionMode::Bilateral, false).unwrap();
    for name in ["bfm.value_audio.weight", "bfm.value_visual.weight"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        store.set(name, Tensor::zeros(shape)).unwrap();
    }
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(Tensor::from_fn([6, 4], |i| (i as f64 * 0.4).cos()));
    let f = tape.constant(Tensor::from_fn([2, 3], |i| i as f64 * 0.5));
    let (px, fa) = bfm.attend(&p, x, f, &[0, 0, 0, 1, 1, 1]).unwrap();
    assert_eq!(px.to_tensor(), bfm.weights.residual_visual.forward(&p, x).unwrap().to_tensor());
    assert_eq!(fa.to_tensor(), bfm.weights.residual_audio.forward(&p, f).unwrap().to_tensor());
}

#[test]
fn fusion_modes() {
    let run = |mode: FusionMode| {
        let mut store = ParamStore::new(9);
        let bfm = Bilateral::new(&mut store, 4, 3, 4, 2, mode, false).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::from_fn([6, 4], |i| (i as f64 * 0.4).cos()));
        let f = tape.constant(Tensor::from_fn([2, 3], |i| i as f64 * 0.5));
        let (px, fa) = bfm.attend(&p, x, f, &[0, 0, 0, 1, 1, 1]).unwrap();
        let rv = bfm.weights.residual_visual.forward(&p, x).unwrap().to_tensor();
        let ra = bfm.weights.residual_audio.forward(&p, f).unwrap().to_tensor();
        (px.to_tensor(), fa.to_tensor(), rv, ra, bfm.similarity_evaluations())
    };
    let (px, fa, rv, ra, n) = run(FusionMode::None);
    assert_eq!((px, fa, n), (rv, ra, 0));
    let (px, fa, rv, ra, _) = run(FusionMode::VisualOnly);
    assert_ne!(px, rv);
    assert_eq!(fa, ra);
    let (px, fa, rv, ra, _) = run(FusionMode::AudioOnly);
    assert_eq!(px, rv);
    assert_ne!(fa, ra);
    let (bp, ba, ..) = run(FusionMode::Bilateral);
    let (vp, ..) = run(FusionMode::VisualOnly);
    let (_, af, ..) = run(FusionMode::AudioOnly);
    assert_eq!((bp, ba), (vp, af));
}

#[test]
fn per_frame_attention_stays_within_the_frame() {
    let mut store = ParamStore::new(1);
    let bfm = Bilateral::new(&mut store, 4, 3, 4, 2, FusionMode::Bilateral, true).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(Tensor::from_fn([4, 4], |i| (i as f64 * 0.4).cos()));
    let f = tape.constant(Tensor::from_fn([2, 3], |i| i as f64 * 0.5));
    let frame_of = [0, 0, 1, 1];
    let a = bfm.attend_detailed(&p, x, f, &frame_of).unwrap();
    let pa = a.pixel_attention.unwrap().to_tensor();
    for n in 0..4 {
        assert_eq!(pa.data()[n * 2 + frame_of[n]], 1.0);
    }
    let aa = a.audio_attention.unwrap().to_tensor();
    for t in 0..2 {
        for n in 0..4 {
            assert_eq!(aa.data()[t * 4 + n] == 0.0, frame_of[n] != t);
        }
    }
}

#[test]
fn positional_encoding_examples() {
    let a = sine_positional_encoding(7, 7, 16).unwrap();
    assert_eq!(a, sine_positional_encoding(7, 7, 16).unwrap());
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let tok = sine_tokens(7, 7, 16).unwrap();
    for i in 0..49 {
        for j in i + 1..49 {
            let (u, v) = (&tok.data()[i * 16..i * 16 + 16], &tok.data()[j * 16..j * 16 + 16]);
            assert!(u != v, "positions {i} and {j} collide");
        }
    }
}
