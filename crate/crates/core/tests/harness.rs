use std::path::{Path, PathBuf};
use std::process::Command;

use avseg::checkpoint;
use avseg::config::RunConfig;
use avseg::dataset::{write_dataset, Dataset, Split};
use avseg::eval;
use avseg::maskige::{decode_nearest, pad_masks, Maskige, MaskStack, Palette};
use avseg::model::Model;
use avseg::synth::{generate_clip, ClassBank, SynthSpec};
use avseg::train::train;

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_config(iterations: usize, seed: u64) -> RunConfig {
    RunConfig { iterations, seed, log_every: 50, ..RunConfig::default() }
}

#[test]
fn generation_is_byte_identical_for_a_seed() {
    let spec = SynthSpec { seed: 3, ..SynthSpec::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(a.path(), &spec, 6).unwrap();
    write_dataset(b.path(), &spec, 6).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() > 6);
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    write_dataset(c.path(), &SynthSpec { seed: 4, ..spec }, 6).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn noiseless_single_class_audio_is_the_signature() {
    let spec = SynthSpec { classes: 1, noise: 0.0, ..SynthSpec::default() };
    let bank = ClassBank::new(&spec).unwrap();
    let d = spec.audio_dim;
    let mut seen = 0;
    for i in 0..10 {
        let clip = generate_clip(&spec, &bank, i).unwrap();
        for (t, s) in clip.sounding.iter().enumerate() {
            let row = &clip.audio.data()[t * d..(t + 1) * d];
            if s.is_empty() {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(row, bank.signature(1));
                seen += 1;
            }
        }
    }
    assert!(seen > 0);
}

#[test]
fn silent_frames_are_background() {
    let spec = SynthSpec::default();
    let bank = ClassBank::new(&spec).unwrap();
    let hw = spec.height * spec.width;
    let mut silent = 0;
    for i in 0..30 {
        let clip = generate_clip(&spec, &bank, i).unwrap();
        for (t, s) in clip.sounding.iter().enumerate() {
            let frame = &clip.semantic[t * hw..(t + 1) * hw];
            for &l in frame.iter().filter(|&&l| l > 0) {
                assert!(s.contains(&(l as usize)), "clip {i} frame {t}: class {l} is not sounding");
            }
            if s.is_empty() {
                assert!(frame.iter().all(|&l| l == 0));
                silent += 1;
            }
        }
    }
    assert!(silent > 0, "no silent frame in 30 clips");
}

#[test]
fn zero_iterations_save_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SynthSpec::default(), 5).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    let config = small_config(0, 7);
    let out = train(&config, &data.split(Split::Train), |_| {}).unwrap();
    assert!(out.log.is_empty());
    let ck = dir.path().join("ck");
    checkpoint::save(&out.model, &ck).unwrap();
    let loaded = checkpoint::load(&ck).unwrap();
    let init = Model::new(&config).unwrap();
    assert_eq!(loaded.store.names(), init.store.names());
    assert_eq!(loaded.store.values(), init.store.values());
    assert_eq!(loaded.config, config);
}

#[test]
fn consistency_component_follows_its_weight() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SynthSpec::default(), 6).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    let clips = data.split(Split::Train);
    let on = train(&RunConfig { lambda_ada: 10.0, log_every: 1, ..small_config(3, 0) }, &clips, |_| {}).unwrap();
    assert!(on.log.iter().all(|l| l.ada > 0.0), "{:?}", on.log);
    let off = train(&RunConfig { lambda_ada: 0.0, log_every: 1, ..small_config(3, 0) }, &clips, |_| {}).unwrap();
    assert!(off.log.iter().all(|l| l.ada == 0.0), "{:?}", off.log);
}

#[test]
fn loss_falls_within_two_hundred_iterations() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SynthSpec::default(), 40).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    let clips = data.split(Split::Train);
    let mut drops: Vec<f64> = (0..3)
        .map(|seed| {
            let log = train(&small_config(201, seed), &clips, |_| {}).unwrap().log;
            let at = |i: usize| log.iter().find(|l| l.iteration == i).unwrap().total;
            at(200) - at(0)
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] < 0.0, "{drops:?}");
}

#[test]
fn ground_truth_scores_one_and_untrained_scores_stay_in_range() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &SynthSpec::default(), 10).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    let val = data.split(Split::Val);
    let gt: Vec<_> = val.iter().map(|c| c.semantic.clone()).collect();
    let r = eval::score(&val, &gt).unwrap();
    assert_eq!((r.miou, r.fscore), (1.0, 1.0));

    let (r, maps) = eval::evaluate(&Model::new(&small_config(0, 0)).unwrap(), &val).unwrap();
    assert_eq!(maps.len(), val.len());
    let parsed: serde_json::Value = serde_json::from_str(&eval::report_json(&r)).unwrap();
    for key in ["miou", "fscore", "interframe_similarity"] {
        let v = parsed[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    for c in r.per_clip {
        assert!((0.0..=1.0).contains(&c.miou) && (0.0..=1.0).contains(&c.fscore));
    }
}

fn avseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_avseg"))
}

#[test]
fn cli_gradcheck_bfm_passes() {
    let out = avseg().args(["gradcheck", "--module", "bfm", "--seed", "1"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    let last = text.lines().last().unwrap();
    let err: f64 = last
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("max_rel_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{last}");
}

#[test]
fn cli_maskige_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("masks");
    std::fs::create_dir(&masks).unwrap();
    let (h, w) = (6, 8);
    let planes: Vec<Vec<bool>> = (0..3)
        .map(|n| (0..h * w).map(|i| (i % w) / 3 == n).collect())
        .collect();
    let stack = MaskStack::from_planes(h, w, &planes).unwrap();
    for n in 0..3 {
        std::fs::write(masks.join(format!("{n:02}.pgm")), stack.plane_pgm(n)).unwrap();
    }
    let palette = Palette::generate(10, 5).unwrap();
    let pfile = dir.path().join("palette.txt");
    palette.write(&pfile).unwrap();
    let out_file = dir.path().join("m.ppm");
    let status = avseg()
        .args(["maskige", "--masks"])
        .arg(&masks)
        .arg("--palette")
        .arg(&pfile)
        .arg("--out")
        .arg(&out_file)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let m = Maskige::from_ppm(&std::fs::read(&out_file).unwrap()).unwrap();
    assert_eq!(decode_nearest(&m, &palette).unwrap(), pad_masks(&stack, 10).unwrap());
}

#[test]
fn cli_flag_contract() {
    let out = avseg().args(["eval", "--data", "d", "--out", "r.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    let out = avseg().args(["gen", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = avseg()
        .args(["eval", "--data"])
        .arg(dir.path().join("missing"))
        .args(["--checkpoint", "c", "--out", "r.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind="), "{err}");
}
