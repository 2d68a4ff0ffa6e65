//! WebAssembly bindings for the browser demo. Every operation returns an RGBA image plus a
//! JSON summary; the plain functions in [`ops`] do the work and are tested natively.

use wasm_bindgen::prelude::*;

pub mod ops;

/// An RGBA image with a JSON description.
#[wasm_bindgen]
pub struct Rendered {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    info: String,
}

#[wasm_bindgen]
impl Rendered {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn info(&self) -> String {
        self.info.clone()
    }
}

impl From<ops::Image> for Rendered {
    fn from(i: ops::Image) -> Self {
        Rendered {
            width: i.width,
            height: i.height,
            rgba: i.rgba,
            info: i.info.to_string(),
        }
    }
}

fn wrap(r: avseg::Result<ops::Image>) -> Result<Rendered, String> {
    r.map(Rendered::from).map_err(|e| format!("{} error: {e}", e.kind()))
}

/// Random disjoint rectangles encoded as a maskige, then decoded back.
#[wasm_bindgen]
pub fn render_maskige(seed: u64, masks: usize, width: usize, height: usize) -> Result<Rendered, String> {
    wrap(ops::render_maskige(seed, masks, width, height))
}

/// Two discs `shift` pixels apart, as adjacent frames of one query.
#[wasm_bindgen]
pub fn consistency_pair(shift: usize, radius: f64, size: usize) -> Result<Rendered, String> {
    wrap(ops::consistency_pair(shift, radius, size))
}

/// `exp(S−1)(1−S)`.
#[wasm_bindgen]
pub fn consistency_term(similarity: f64) -> f64 {
    avseg::losses::ada_term(similarity)
}

/// Frame `frame` of synthetic clip `index` beside its ground truth.
#[wasm_bindgen]
pub fn synthetic_frame(seed: u64, index: usize, frame: usize) -> Result<Rendered, String> {
    wrap(ops::synthetic_frame(seed, index, frame))
}
