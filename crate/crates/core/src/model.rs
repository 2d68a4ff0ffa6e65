//! The full network: siam encoder, pixel decoder, bilateral fusion and query decoder.

use crate::bfm::{Bilateral, Fused};
use crate::config::RunConfig;
use crate::encoder::SiamEncoder;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::pixel_decoder::{PixelDecoder, PixelEmbeddings};
use crate::query_decoder::{DecoderOutput, QueryDecoder};
use crate::tensor::Tensor;

/// One clip as the network consumes it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput {
    /// `[T, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[T, 3, H, W]` maskige priors; ignored without the siam branch.
    pub maskiges: Tensor,
    /// `[T, D]`.
    pub audio: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<'t> {
    pub stage_shapes: [Vec<usize>; 4],
    pub levels: PixelEmbeddings<'t>,
    pub fused: Fused<'t>,
    pub decoder: DecoderOutput<'t>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub encoder: SiamEncoder,
    pub pixel_decoder: PixelDecoder,
    pub bfm: Bilateral,
    pub decoder: QueryDecoder,
}

impl Model {
    /// Every parameter is drawn from a stream keyed by `(config.seed, name)`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new(c.seed);
        let encoder = SiamEncoder::new(&mut store, c.stage_channels, c.siam, c.shared_weights)?;
        let pixel_decoder = PixelDecoder::new(&mut store, c.stage_channels, c.pixel_dim)?;
        let bfm = Bilateral::new(
            &mut store,
            c.pixel_dim,
            c.audio_dim,
            c.embed_dim,
            c.frames,
            c.fusion,
            c.per_frame_attention,
        )?;
        let decoder = QueryDecoder::new(
            &mut store,
            c.pixel_dim,
            c.embed_dim,
            c.queries,
            c.rounds,
            c.classes,
            c.query_mode,
        )?;
        Ok(Model {
            config: config.clone(),
            store,
            encoder,
            pixel_decoder,
            bfm,
            decoder,
        })
    }

    pub fn check_input(&self, input: &ClipInput) -> Result<()> {
        let c = &self.config;
        let want = [c.frames, 3, c.height, c.width];
        if input.frames.shape() != want {
            return Err(Error::dim("model.frames", input.frames.shape(), &want));
        }
        if self.encoder.has_siam() && input.maskiges.shape() != want {
            return Err(Error::dim("model.maskiges", input.maskiges.shape(), &want));
        }
        if input.audio.shape() != [c.frames, c.audio_dim] {
            return Err(Error::dim("model.audio", input.audio.shape(), &[c.frames, c.audio_dim]));
        }
        Ok(())
    }

    /// `frozen` pins the decoder's attention masks (used when differencing the loss).
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        input: &ClipInput,
        frozen: Option<&[Vec<bool>]>,
    ) -> Result<ForwardOutput<'t>> {
        self.check_input(input)?;
        let frames = p.constant(input.frames.clone());
        let maskiges = self
            .encoder
            .has_siam()
            .then(|| p.constant(input.maskiges.clone()));
        let pyramid = self.encoder.forward(p, frames, maskiges)?;
        let stage_shapes = pyramid.map(|v| v.shape());
        let levels = self.pixel_decoder.forward(p, &pyramid)?;
        let audio = p.constant(input.audio.clone());
        let fused = self.bfm.forward(p, levels[0], audio)?;
        let decoder = self.decoder.forward(p, fused.audio, &levels, fused.pixels, frozen)?;
        Ok(ForwardOutput {
            stage_shapes,
            levels,
            fused,
            decoder,
        })
    }
}
