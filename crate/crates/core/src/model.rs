//! A complete codec: configuration plus named parameters, with inference
//! entry points from waveform to code indices and back.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vnsc_tensor::{Graph, ParamStore, Session, Tensor};

use crate::codec::{decoder_forward, encoder_forward, init_codec};
use crate::config::{ModelConfig, Scenario};
use crate::dsp::Mdct;
use crate::error::{Result, VnscError};
use crate::fusion::{init_fusion, Fusion, VISUAL_REGION};
use crate::layers::Init;
use crate::rvq::{rvq_dequantize, rvq_quantize, CodeIndices, Quantized, RvqCodebooks, RVQ_INITIALIZED};
use crate::vision::{align_video, image_analyzer, init_vision, LipClip};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Codes for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedUtterance {
    pub indices: CodeIndices,
    /// Latent frames (columns of every index stage).
    pub n_latent_frames: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        {
            let mut init = Init {
                store: &mut params,
                rng: &mut rng,
            };
            init_codec(&mut init, &cfg)?;
            if cfg.scenario.uses_vision() {
                init_vision(&mut init, &cfg.vision)?;
                init_fusion(&mut init, cfg.codec.d_s, cfg.d_v())?;
            }
        }
        RvqCodebooks::random(&cfg.rvq, cfg.codec.d_code, &mut rng)?.insert_into(&mut params)?;
        Ok(Self { cfg, params })
    }

    /// Loads parameter values saved by [`Model::save`] into a model built
    /// from `cfg`; names and shapes must match exactly.
    pub fn load(cfg: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.params.load_values_from(path)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn codebooks(&self) -> Result<RvqCodebooks> {
        RvqCodebooks::from_store(&self.params, self.cfg.rvq.stages)
    }

    pub fn set_codebooks(&mut self, books: &RvqCodebooks) -> Result<()> {
        books.write_to(&mut self.params)
    }

    pub fn rvq_initialized(&self) -> bool {
        self.params
            .tensor(RVQ_INITIALIZED)
            .map(|t| t.data()[0] != 0.0)
            .unwrap_or(false)
    }

    pub fn mark_rvq_initialized(&mut self) -> Result<()> {
        Ok(self.params.set(RVQ_INITIALIZED, Tensor::ones(&[1]))?)
    }

    /// Copies every speech-path parameter (encoder, decoder, codebooks)
    /// from `other`.
    pub fn copy_speech_path(&mut self, other: &Model) -> Result<()> {
        for p in other.params.iter() {
            let speech = p.name.starts_with("encoder.") || p.name.starts_with("decoder.") || p.name.starts_with("rvq.");
            if speech {
                self.params.set(&p.name, p.tensor.clone())?;
            }
        }
        Ok(())
    }

    /// Samples per latent frame.
    pub fn hop_samples(&self) -> usize {
        self.cfg.codec.frame_shift * self.cfg.codec.downsample
    }

    /// Zero-pads `samples` to a whole number of latent frames.
    pub fn pad_waveform(&self, samples: &[f32]) -> Vec<f32> {
        let hop = self.hop_samples();
        let len = samples.len().max(2 * self.cfg.codec.frame_shift).div_ceil(hop) * hop;
        let mut out = samples.to_vec();
        out.resize(len, 0.0);
        out
    }

    fn check_lips(&self, lips_present: bool) -> Result<()> {
        match (self.cfg.scenario, lips_present) {
            (Scenario::Va, false) => Err(VnscError::Usage("VA mode requires a lip video".into())),
            (Scenario::Va, true) | (_, false) => Ok(()),
            (s, true) => Err(VnscError::Usage(format!("{s} mode does not take a lip video"))),
        }
    }

    /// Encodes a `[M, N]` spectrum (N a multiple of the downsampling
    /// factor) on `graph`, which collects op counts per region.
    pub fn encode_spectrum_on(
        &self,
        graph: &Graph<f32>,
        spec: &Tensor<f32>,
        lips: Option<&Tensor<f32>>,
    ) -> Result<Quantized> {
        self.check_lips(lips.is_some())?;
        let s = Session::new(graph, &self.params, false);
        let fusion = match lips {
            Some(l) => {
                let _region = graph.enter_region(VISUAL_REGION);
                let v = image_analyzer(&s, &self.cfg.vision, &graph.constant(l.clone()))?;
                Fusion::Va(v)
            }
            None if self.cfg.scenario == Scenario::Vua => Fusion::VuaInference,
            None => Fusion::AudioOnly,
        };
        let out = encoder_forward(&s, &self.cfg, &graph.constant(spec.clone()), fusion)?;
        let latent = out.latent.value().clone();
        drop(out);
        rvq_quantize(&latent, &self.codebooks()?)
    }

    pub fn encode_spectrum(&self, spec: &Tensor<f32>, lips: Option<&Tensor<f32>>) -> Result<Quantized> {
        self.encode_spectrum_on(&Graph::inference(), spec, lips)
    }

    /// Spectrum and (optionally) aligned lip sequence of a waveform, padded
    /// to whole latent frames.
    pub fn prepare(&self, samples: &[f32], lips: Option<&LipClip>) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let padded = self.pad_waveform(samples);
        let spec = Mdct::new(self.cfg.codec.frame_shift)?.analyze(&padded)?;
        let n = spec.dim(1);
        let aligned = match lips {
            Some(clip) => {
                let (h, w) = (clip.frames.dim(1), clip.frames.dim(2));
                let size = self.cfg.vision.image_size;
                if h != size || w != size {
                    return Err(VnscError::Format(format!(
                        "lip frames are {h}x{w}, model expects {size}x{size}"
                    )));
                }
                Some(align_video(&clip.frames, clip.fps_num, clip.fps_den, n)?)
            }
            None => None,
        };
        Ok((spec, aligned))
    }

    pub fn encode_waveform(&self, samples: &[f32], lips: Option<&LipClip>) -> Result<EncodedUtterance> {
        self.check_lips(lips.is_some())?;
        let (spec, aligned) = self.prepare(samples, lips)?;
        let q = self.encode_spectrum(&spec, aligned.as_ref())?;
        let n_latent_frames = q.indices[0].len();
        Ok(EncodedUtterance {
            indices: q.indices,
            n_latent_frames,
        })
    }

    /// `[M, T·downsample]` spectrum from code indices.
    pub fn decode_indices(&self, indices: &CodeIndices) -> Result<Tensor<f32>> {
        let latent = rvq_dequantize(indices, &self.codebooks()?)?;
        self.decode_latent(&latent)
    }

    pub fn decode_latent(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::<f32>::inference();
        let s = Session::new(&g, &self.params, false);
        let spec = decoder_forward(&s, &self.cfg, &g.constant(latent.clone()))?;
        Ok(spec.value().clone())
    }

    /// Waveform of `T·downsample·frame_shift` samples.
    pub fn decode_waveform(&self, indices: &CodeIndices) -> Result<Vec<f32>> {
        let spec = self.decode_indices(indices)?;
        Mdct::new(self.cfg.codec.frame_shift)?.synthesize(&spec)
    }
}
