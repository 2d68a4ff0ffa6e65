use avseg::bfm::sine_tokens;
use avseg::config::QueryMode;
use avseg::params::ParamStore;
use avseg::query_decoder::{attention_keep, upsample_masks, QueryDecoder};
use avseg::tensor::{Tape, Tensor};

fn decoder(mode: QueryMode, seed: u64) -> (ParamStore, QueryDecoder) {
    let mut store = ParamStore::new(seed);
    let dec = QueryDecoder::new(&mut store, 4, 4, 2, 1, 3, mode).unwrap();
    (store, dec)
}

#[test]
fn zero_audio_in_add_mode_gives_the_learnable_queries() {
    let (store, dec) = decoder(QueryMode::Add, 0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let learn = p.p(dec.queries);
    let q = dec.build_queries(&p, tape.constant(Tensor::zeros([3, 4])), learn).unwrap().to_tensor();
    let l = learn.to_tensor();
    for t in 0..3 {
        assert_eq!(&q.data()[t * 8..t * 8 + 8], l.data());
    }
}

#[test]
fn all_mode_replicates_and_frames_differ() {
    let audio = Tensor::from_fn([2, 4], |i| (i as f64 * 0.9).sin());
    let (store, dec) = decoder(QueryMode::All, 1);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let q = dec.build_queries(&p, tape.constant(audio.clone()), p.p(dec.queries)).unwrap().to_tensor();
    for t in 0..2 {
        assert_eq!(q.data()[t * 8..t * 8 + 4], q.data()[t * 8 + 4..t * 8 + 8]);
    }
    let (store, dec) = decoder(QueryMode::Add, 1);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let q = dec.build_queries(&p, tape.constant(audio), p.p(dec.queries)).unwrap().to_tensor();
    assert_ne!(q.data()[0..8], q.data()[8..16]);
}

#[test]
fn zero_classifier_gives_uniform_posteriors() {
    let (mut store, dec) = decoder(QueryMode::Add, 2);
    store.set("qdec.class.weight", Tensor::zeros([4, 4])).unwrap();
    store.set("qdec.class.bias", Tensor::zeros([4])).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let q = tape.constant(Tensor::from_fn([1, 2, 4], |i| i as f64));
    let pixels = tape.constant(Tensor::from_fn([1, 4, 2, 2], |i| (i as f64).cos()));
    let probs = dec.predict(&p, q, pixels).unwrap().class_logits.softmax(2).unwrap().to_tensor();
    assert!(probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn pixel_equal_to_the_mask_embedding_attains_the_row_max() {
    let (store, dec) = decoder(QueryMode::Add, 3);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let q = tape.constant(Tensor::from_fn([1, 2, 4], |i| (i as f64 * 1.7).sin()));
    // Pixels forming the standard basis read the mask embedding out of the logits.
    let basis = Tensor::from_fn([1, 4, 1, 4], |i| (i / 4 == i % 4) as u8 as f64);
    let e = dec.predict(&p, q, tape.constant(basis)).unwrap().mask_logits.to_tensor();
    let e0 = &e.data()[0..4];
    let orth = [-e0[1], e0[0], -e0[3], e0[2]];
    let mut pix = vec![0.0; 4 * 9];
    for c in 0..4 {
        for k in 0..9 {
            pix[c * 9 + k] = if k == 5 { e0[c] } else { orth[c] * (k as f64 + 1.0) };
        }
    }
    let m = dec
        .predict(&p, q, tape.constant(Tensor::new([1, 4, 3, 3], pix).unwrap()))
        .unwrap()
        .mask_logits
        .to_tensor();
    let row = &m.data()[0..9];
    let best = (0..9).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(best, 5);
}

#[test]
fn upsampling_examples() {
    let tape = Tape::new();
    let c = upsample_masks(tape.constant(Tensor::full([1, 2, 2, 2], -0.7)), 8, 8).unwrap().to_tensor();
    assert!(c.data().iter().all(|&v| (v + 0.7).abs() < 1e-15));
    // Half-pixel centres: output pixel i samples input coordinate (i + 0.5)/2 − 0.5, clamped.
    let ramp = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let up = upsample_masks(tape.constant(ramp), 4, 4).unwrap().to_tensor();
    let axis = [0.0, 0.25, 0.75, 1.0];
    for y in 0..4 {
        for x in 0..4 {
            let want = axis[x] + 2.0 * axis[y];
            assert!((up.data()[y * 4 + x] - want).abs() < 1e-15);
        }
    }
    let up = upsample_masks(tape.constant(Tensor::full([1, 1, 3, 3], 2.5)), 12, 12).unwrap().to_tensor();
    for by in 0..3 {
        for bx in 0..3 {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    s += up.data()[(by * 4 + y) * 12 + bx * 4 + x];
                }
            }
            assert_eq!(s / 16.0, 2.5);
        }
    }
}

// Plain-float reference for one decoder layer and the heads.

struct Ref<'a> {
    store: &'a ParamStore,
}

impl Ref<'_> {
    fn w(&self, name: &str) -> &[f64] {
        self.store.get(name).unwrap_or_else(|| panic!("{name}")).data()
    }

    fn linear(&self, x: &[f64], name: &str, fin: usize, fout: usize) -> Vec<f64> {
        let (w, b) = (self.w(&format!("{name}.weight")), self.store.get(&format!("{name}.bias")));
        let rows = x.len() / fin;
        let mut y = vec![0.0; rows * fout];
        for r in 0..rows {
            for o in 0..fout {
                let mut acc = b.map_or(0.0, |b| b.data()[o]);
                for i in 0..fin {
                    acc += x[r * fin + i] * w[i * fout + o];
                }
                y[r * fout + o] = acc;
            }
        }
        y
    }

    fn norm(&self, x: &[f64], name: &str, d: usize) -> Vec<f64> {
        let (g, b) = (self.w(&format!("{name}.gamma")), self.w(&format!("{name}.beta")));
        x.chunks(d)
            .flat_map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                (0..d).map(move |i| (row[i] - mean) * inv * g[i] + b[i]).collect::<Vec<_>>()
            })
            .collect()
    }

    fn attention(&self, q: &[f64], kv: (&[f64], &[f64]), keep: Option<&[bool]>, name: &str, d: usize) -> Vec<f64> {
        let qp = self.linear(q, &format!("{name}.query"), d, d);
        let kp = self.linear(kv.0, &format!("{name}.key"), d, d);
        let vp = self.linear(kv.1, &format!("{name}.value"), d, d);
        let (n, m) = (q.len() / d, kv.0.len() / d);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut s: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| qp[i * d + c] * kp[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let kept = |j: usize| keep.is_none_or(|k| k[i * m + j]);
            let mx = (0..m).filter(|&j| kept(j)).map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max);
            for (j, v) in s.iter_mut().enumerate() {
                *v = if kept(j) { (*v - mx).exp() } else { 0.0 };
            }
            let z: f64 = s.iter().sum();
            for j in 0..m {
                for c in 0..d {
                    out[i * d + c] += s[j] / z * vp[j * d + c];
                }
            }
        }
        self.linear(&out, &format!("{name}.out"), d, d)
    }

    fn heads(&self, q: &[f64], pixels: &[f64], d: usize, classes: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.norm(q, "qdec.norm", d);
        let cls = self.linear(&n, "qdec.class", d, classes + 1);
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let e = relu(self.linear(&n, "qdec.mask0", d, d));
        let e = relu(self.linear(&e, "qdec.mask1", d, d));
        let e = self.linear(&e, "qdec.mask2", d, d);
        let hw = pixels.len() / d;
        let masks = (0..q.len() / d)
            .flat_map(|i| (0..hw).map(move |p| (i, p)))
            .map(|(i, p)| (0..d).map(|c| e[i * d + c] * pixels[c * hw + p]).sum())
            .collect();
        (cls, masks)
    }
}

#[test]
fn first_layer_matches_a_hand_trace() {
    let (d, nq, classes) = (4, 2, 3);
    let mut store = ParamStore::new(11);
    let dec = QueryDecoder::new(&mut store, d, d, nq, 1, classes, QueryMode::Add).unwrap();
    let mut k = 0u32;
    for v in store.values_mut() {
        for x in v.data_mut() {
            k += 1;
            *x += 0.1 * (k as f64 * 0.618).sin();
        }
    }
    let audio = Tensor::from_fn([1, d], |i| 0.3 * i as f64 - 0.4);
    let pixels = Tensor::from_fn([1, d, 2, 2], |i| (i as f64 * 0.77).cos());
    let p4 = Tensor::from_fn([1, d, 1, 2], |i| (i as f64 * 0.41).sin());
    let filler = Tensor::from_fn([1, d, 2, 2], |i| i as f64 * 0.01);

    let tape = Tape::new();
    let p = store.bind(&tape);
    let levels = [pixels.clone(), filler.clone(), filler, p4.clone()].map(|t| tape.constant(t));
    let out = dec.forward(&p, tape.constant(audio.clone()), &levels, levels[0], None).unwrap();
    assert_eq!(out.predictions.len(), 3);
    let (cls, masks) = (out.predictions[0].class_logits.to_tensor(), out.predictions[0].mask_logits.to_tensor());

    let r = Ref { store: &store };
    let expanded = r.linear(audio.data(), "qdec.expand", d, d);
    let learn = r.w("qdec.queries");
    let q0: Vec<f64> = (0..nq * d).map(|i| expanded[i % d] + learn[i]).collect();
    let (_, m0) = r.heads(&q0, pixels.data(), d, classes);
    let (keep, _) = attention_keep(&Tensor::new([1, nq, 2, 2], m0).unwrap(), 1, 2).unwrap();
    // Level tokens: P_4 laid out as [H·W, C], keys with the sine encoding added.
    let mem: Vec<f64> = (0..2 * d).map(|i| p4.data()[(i % d) * 2 + i / d]).collect();
    let pe = sine_tokens(1, 2, d).unwrap();
    let keys: Vec<f64> = mem.iter().zip(pe.data()).map(|(a, b)| a + b).collect();
    let l = "qdec.layer0";
    let n = r.norm(&q0, &format!("{l}.cross_norm"), d);
    let a = r.attention(&n, (&keys, &mem), Some(&keep), &format!("{l}.cross"), d);
    let q1: Vec<f64> = q0.iter().zip(&a).map(|(x, y)| x + y).collect();
    let n = r.norm(&q1, &format!("{l}.self_norm"), d);
    let a = r.attention(&n, (&n, &n), None, &format!("{l}.self"), d);
    let q2: Vec<f64> = q1.iter().zip(&a).map(|(x, y)| x + y).collect();
    let n = r.norm(&q2, &format!("{l}.ffn_norm"), d);
    let h: Vec<f64> = r.linear(&n, &format!("{l}.ffn_in"), d, 2 * d).into_iter().map(|x| x.max(0.0)).collect();
    let f = r.linear(&h, &format!("{l}.ffn_out"), 2 * d, d);
    let q3: Vec<f64> = q2.iter().zip(&f).map(|(x, y)| x + y).collect();
    let (want_cls, want_masks) = r.heads(&q3, pixels.data(), d, classes);

    for (g, w) in cls.data().iter().zip(&want_cls) {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
    for (g, w) in masks.data().iter().zip(&want_masks) {
        assert!((g - w).abs() < 1e-10, "{g} vs {w}");
    }
}
