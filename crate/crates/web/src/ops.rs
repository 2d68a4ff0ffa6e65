use avseg::config::{AdaGranularity, AdaSource};
use avseg::losses::{adaptive_consistency_loss, ada_term};
use avseg::maskige::{decode_nearest, encode_proposals, pad_masks, MaskStack, Palette};
use avseg::synth::{generate_clip, ClassBank, SynthSpec};
use avseg::tensor::{Tape, Tensor};
use avseg::{rng, Error, Result};
use rand::Rng as _;
use serde_json::{json, Value};

/// Palette rows available to the maskige view.
pub const PALETTE_SIZE: usize = 32;

pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
    pub info: Value,
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Up to `k` rectangles painted in order; later ones win, so planes never overlap.
pub fn random_rectangles(seed: u64, k: usize, h: usize, w: usize) -> Result<MaskStack> {
    if h == 0 || w == 0 {
        return Err(Error::Parameter("image must be at least 1x1".into()));
    }
    let mut r = rng::stream(seed, "web.rectangles");
    let mut owner = vec![usize::MAX; h * w];
    for n in 0..k {
        let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
        let (y1, x1) = (r.random_range(y0 + 1..=h), r.random_range(x0 + 1..=w));
        for y in y0..y1 {
            owner[y * w + x0..y * w + x1].fill(n);
        }
    }
    let planes: Vec<Vec<bool>> = (0..k).map(|n| owner.iter().map(|&o| o == n).collect()).collect();
    MaskStack::from_planes(h, w, &planes)
}

pub fn render_maskige(seed: u64, masks: usize, width: usize, height: usize) -> Result<Image> {
    if masks > PALETTE_SIZE {
        return Err(Error::Capacity { k: masks, n: PALETTE_SIZE });
    }
    let stack = random_rectangles(seed, masks, height, width)?;
    let palette = Palette::generate(PALETTE_SIZE, seed)?;
    let m = encode_proposals(&stack, &palette)?;
    let recovered = decode_nearest(&m, &palette)? == pad_masks(&stack, PALETTE_SIZE)?;
    let hw = width * height;
    let d = m.image.data();
    let mut rgba = Vec::with_capacity(4 * hw);
    for p in 0..hw {
        rgba.extend([quantize(d[p]), quantize(d[hw + p]), quantize(d[2 * hw + p]), 255]);
    }
    let visible = (0..masks).filter(|&n| stack.plane(n).contains(&1)).count();
    Ok(Image {
        width,
        height,
        rgba,
        info: json!({
            "masks": masks,
            "visible": visible,
            "round_trip": recovered,
            "colors": palette.rows()[..masks].to_vec(),
        }),
    })
}

fn disc(size: usize, cx: f64, cy: f64, radius: f64) -> Vec<f64> {
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            (((x - cx).powi(2) + (y - cy).powi(2)) <= radius * radius) as u8 as f64
        })
        .collect()
}

pub fn consistency_pair(shift: usize, radius: f64, size: usize) -> Result<Image> {
    if size == 0 || !(radius > 0.0) {
        return Err(Error::Parameter("size and radius must be positive".into()));
    }
    let c = size as f64 / 2.0;
    let a = disc(size, c - shift as f64 / 2.0, c, radius);
    let b = disc(size, c + shift as f64 / 2.0, c, radius);
    let tape = Tape::new();
    let masks = tape.constant(Tensor::new([2, 1, size, size], [a.clone(), b.clone()].concat())?);
    let loss = adaptive_consistency_loss(masks, AdaSource::Logits, AdaGranularity::Flattened)?.item();
    let s = tape.constant(Tensor::new([a.len()], a.clone())?).cosine_similarity(tape.constant(Tensor::new([b.len()], b.clone())?))?.item();
    let mut rgba = Vec::with_capacity(4 * a.len());
    for (&u, &v) in a.iter().zip(&b) {
        rgba.extend([(u * 230.0) as u8, 40, (v * 230.0) as u8, 255]);
    }
    Ok(Image {
        width: size,
        height: size,
        rgba,
        info: json!({ "similarity": s, "loss": loss, "term": ada_term(s) }),
    })
}

pub fn synthetic_frame(seed: u64, index: usize, frame: usize) -> Result<Image> {
    let spec = SynthSpec { seed, ..SynthSpec::default() };
    if frame >= spec.frames {
        return Err(Error::Parameter(format!("frame {frame} out of 0..{}", spec.frames)));
    }
    let bank = ClassBank::new(&spec)?;
    let clip = generate_clip(&spec, &bank, index)?;
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let pixels = &clip.frames.data()[frame * 3 * hw..(frame + 1) * 3 * hw];
    let labels = &clip.semantic[frame * hw..(frame + 1) * hw];
    let mut rgba = Vec::with_capacity(4 * 2 * hw);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            rgba.extend([quantize(pixels[p]), quantize(pixels[hw + p]), quantize(pixels[2 * hw + p]), 255]);
        }
        for x in 0..w {
            let l = labels[y * w + x] as usize;
            let c = if l == 0 { [0.0; 3] } else { bank.colors[l - 1] };
            rgba.extend([quantize(c[0]), quantize(c[1]), quantize(c[2]), 255]);
        }
    }
    let d = spec.audio_dim;
    Ok(Image {
        width: 2 * w,
        height: h,
        rgba,
        info: json!({
            "frames": spec.frames,
            "sounding": clip.sounding[frame],
            "audio": clip.audio.data()[frame * d..(frame + 1) * d].to_vec(),
            "proposals": clip.proposals[frame].planes(),
        }),
    })
}
