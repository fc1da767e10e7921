//! The seven composable modules: prosody, speaker and content encoders,
//! the audio decoder (content + merge decoders), the text encoder (unit
//! encoder, duration predictor, length regulator), the text decoder (CTC and
//! attention heads) and the prosody predictor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::mel::FEATURE_DIM;
use crate::features::text::EOS_ID;
use crate::graph::{Graph, Mat, Var};
use crate::nn::{self, fit_rows, Ctx, Net};
use crate::params::{materialize, ParamSpec, ParameterSet};

/// Largest frame count a single token may expand to at inference.
pub const MAX_TOKEN_FRAMES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub content_enc: usize,
    pub speaker_enc: usize,
    pub content_dec: usize,
    pub merge_dec: usize,
    pub unit_enc: usize,
    pub s2s_dec: usize,
    pub prosody_enc: usize,
    pub prosody_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub unit_heads: usize,
    pub layers: LayerCounts,
    pub dropout: f64,
    pub duration_dropout: f64,
    pub downsample_rate: usize,
    pub sampler_blocks: usize,
    pub conv_kernel: usize,
    /// Rows an up-sampled sequence may be trimmed or padded by.
    pub length_tolerance: usize,
    pub bpe_vocab: usize,
    pub phoneme_vocab: usize,
    pub n_speakers: usize,
}

impl ModelConfig {
    /// Full-size hyperparameters.
    pub fn paper(bpe_vocab: usize, phoneme_vocab: usize, n_speakers: usize) -> Self {
        Self {
            d_model: 256,
            d_ff: 1024,
            heads: 4,
            unit_heads: 2,
            layers: LayerCounts {
                content_enc: 6,
                speaker_enc: 3,
                content_dec: 3,
                merge_dec: 3,
                unit_enc: 4,
                s2s_dec: 4,
                prosody_enc: 3,
                prosody_pred: 3,
            },
            dropout: 0.1,
            duration_dropout: 0.5,
            downsample_rate: 4,
            sampler_blocks: 2,
            conv_kernel: 15,
            length_tolerance: 3,
            bpe_vocab,
            phoneme_vocab,
            n_speakers,
        }
    }

    /// Desk-scale preset for the toy corpus.
    pub fn toy(bpe_vocab: usize, phoneme_vocab: usize, n_speakers: usize) -> Self {
        Self {
            d_model: 96,
            d_ff: 192,
            heads: 4,
            unit_heads: 2,
            layers: LayerCounts {
                content_enc: 2,
                speaker_enc: 1,
                content_dec: 1,
                merge_dec: 1,
                unit_enc: 1,
                s2s_dec: 1,
                prosody_enc: 1,
                prosody_pred: 1,
            },
            dropout: 0.0,
            duration_dropout: 0.0,
            downsample_rate: 4,
            sampler_blocks: 2,
            conv_kernel: 7,
            length_tolerance: 3,
            bpe_vocab,
            phoneme_vocab,
            n_speakers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.layers;
        let counts = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("unit_heads", self.unit_heads),
            ("layers.content_enc", l.content_enc),
            ("layers.speaker_enc", l.speaker_enc),
            ("layers.content_dec", l.content_dec),
            ("layers.merge_dec", l.merge_dec),
            ("layers.unit_enc", l.unit_enc),
            ("layers.s2s_dec", l.s2s_dec),
            ("layers.prosody_enc", l.prosody_enc),
            ("layers.prosody_pred", l.prosody_pred),
            ("sampler_blocks", self.sampler_blocks),
            ("conv_kernel", self.conv_kernel),
            ("bpe_vocab", self.bpe_vocab),
            ("phoneme_vocab", self.phoneme_vocab),
            ("n_speakers", self.n_speakers),
        ];
        let mut problems: Vec<String> = counts
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| format!("model.{k} must be at least 1"))
            .collect();
        if self.heads > 0 && self.d_model % self.heads != 0 {
            problems.push("model.d_model must be divisible by model.heads".into());
        }
        if self.unit_heads > 0 && self.d_model % self.unit_heads != 0 {
            problems.push("model.d_model must be divisible by model.unit_heads".into());
        }
        let stride = 1usize << self.sampler_blocks.min(16);
        if self.downsample_rate == 0 || stride % self.downsample_rate != 0 {
            problems.push(format!(
                "model.downsample_rate {} must divide the sampler stride product {stride}",
                self.downsample_rate
            ));
        }
        if self.conv_kernel % 2 == 0 {
            problems.push("model.conv_kernel must be odd".into());
        }
        for (k, p) in [("dropout", self.dropout), ("duration_dropout", self.duration_dropout)] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("model.{k} must lie in [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Content-rate length of a `t`-frame utterance.
    pub fn content_len(&self, t: usize) -> usize {
        nn::downsampled_len(t, self.sampler_blocks)
    }

    pub fn upsample_factor(&self) -> usize {
        1 << self.sampler_blocks
    }
}

/// Parameter specs of every module; the order fixes the initialization stream.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let k = cfg.conv_kernel;
    let b = cfg.sampler_blocks;
    let l = &cfg.layers;
    let mut v = Vec::new();
    v.extend(nn::linear_specs("prosody_enc.input", FEATURE_DIM, d));
    v.extend(nn::conformer_stack_specs("prosody_enc.encoder", l.prosody_enc, d, f, k));
    v.extend(nn::transformer_stack_specs("speaker_enc.encoder", l.speaker_enc, d, f));
    v.extend(nn::linear_specs("speaker_enc.pool.w1", d, d));
    v.push(ParamSpec::new(
        "speaker_enc.pool.w2.weight",
        (d, 1),
        crate::params::Init::FanIn(d),
    ));
    v.extend(nn::downsampler_specs("content_enc.subsample", b, FEATURE_DIM, d));
    v.extend(nn::conformer_stack_specs("content_enc.encoder", l.content_enc, d, f, k));
    v.extend(nn::conformer_stack_specs("content_dec.decoder", l.content_dec, d, f, k));
    v.extend(nn::upsampler_specs("content_dec.upsample", b, d));
    v.extend(nn::linear_specs("merge_dec.input", 2 * d, d));
    v.extend(nn::conformer_stack_specs("merge_dec.decoder", l.merge_dec, d, f, k));
    v.extend(nn::linear_specs("merge_dec.output", d, FEATURE_DIM));
    v.extend(nn::embedding_specs("unit_enc.embed", cfg.phoneme_vocab, d));
    v.extend(nn::transformer_stack_specs("unit_enc.encoder", l.unit_enc, d, f));
    v.extend(nn::linear_specs("duration_pred.conv.0", 3 * 2 * d, d));
    v.extend(nn::norm_specs("duration_pred.norm.0", d));
    v.extend(nn::linear_specs("duration_pred.conv.1", 3 * d, d));
    v.extend(nn::norm_specs("duration_pred.norm.1", d));
    v.extend(nn::linear_specs("duration_pred.output", d, 1));
    v.extend(nn::downsampler_specs("text_enc.subsample", b, d, d));
    v.extend(nn::linear_specs("text_dec.ctc", d, cfg.bpe_vocab + 1));
    v.extend(nn::embedding_specs("text_dec.embed", cfg.bpe_vocab, d));
    v.extend(nn::decoder_stack_specs("text_dec.decoder", l.s2s_dec, d, f));
    v.extend(nn::linear_specs("text_dec.output", d, cfg.bpe_vocab));
    v.extend(nn::linear_specs("prosody_pred.input", 2 * d, d));
    v.extend(nn::conformer_stack_specs("prosody_pred.encoder", l.prosody_pred, d, f, k));
    v.extend(nn::upsampler_specs("prosody_pred.upsample", b, d));
    v.extend(nn::linear_specs("sc.classifier", d, cfg.n_speakers));
    v.extend(nn::embedding_specs("tts.speaker_table", cfg.n_speakers, d));
    v
}

pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    Ok(materialize(&parameter_specs(cfg), seed))
}

#[derive(Debug, Clone, Copy)]
pub struct ProsodyEmbedding<'g> {
    pub vectors: Var<'g>,
    pub predicted: bool,
}

/// `1 × d_model` utterance-level vector.
#[derive(Debug, Clone, Copy)]
pub struct SpeakerEmbedding<'g> {
    pub vector: Var<'g>,
}

#[derive(Debug, Clone, Copy)]
pub struct ContentEmbedding<'g> {
    pub vectors: Var<'g>,
}

#[derive(Debug, Clone, Copy)]
pub struct UnitEmbedding<'g> {
    pub vectors: Var<'g>,
}

#[derive(Debug, Clone)]
pub struct TextEncoding<'g> {
    pub content: ContentEmbedding<'g>,
    /// `L × 1` predicted log-durations at frame rate.
    pub log_durations: Var<'g>,
    /// Frame-rate durations used for length regulation.
    pub durations: Vec<usize>,
    pub units: UnitEmbedding<'g>,
}

#[derive(Debug, Clone, Copy)]
pub struct TextDecoding<'g> {
    /// `T′ × (V+1)` log-posteriors, blank in the last column.
    pub ctc_log_probs: Var<'g>,
    /// `(L+1) × V` teacher-forced log-posteriors ending in EOS.
    pub s2s_log_probs: Option<Var<'g>>,
}

/// Inference-time duration rule: `round(exp(·))`, at least one frame.
pub fn durations_from_log(log_d: &[f64]) -> Vec<usize> {
    log_d
        .iter()
        .map(|&x| {
            let v = x.exp().round();
            if v.is_nan() || v < 1.0 {
                1
            } else {
                (v.min(MAX_TOKEN_FRAMES as f64)) as usize
            }
        })
        .collect()
}

/// Row-level length regulation on plain matrices.
pub fn length_regulate_mat(vu: &Mat, d: &[usize]) -> Result<Mat> {
    check_durations(vu.nrows(), d)?;
    let idx = nn::regulate_indices(d);
    let mut out = Mat::zeros((idx.len(), vu.ncols()));
    for (i, &src) in idx.iter().enumerate() {
        out.row_mut(i).assign(&vu.row(src));
    }
    Ok(out)
}

fn check_durations(l: usize, d: &[usize]) -> Result<()> {
    if d.len() != l {
        return Err(Error::LengthMismatch {
            what: "durations vs tokens",
            left: d.len(),
            right: l,
        });
    }
    if let Some(i) = d.iter().position(|&x| x == 0) {
        return Err(Error::InvalidDuration(format!("token {i} has zero frames")));
    }
    Ok(())
}

/// A parameter set and config bound to one graph.
pub struct Model<'a, 'g> {
    pub net: Net<'a, 'g>,
    pub cfg: &'a ModelConfig,
}

impl<'a, 'g> Model<'a, 'g> {
    pub fn new(g: &'g Graph, p: &'a ParameterSet, ctx: &'a Ctx, cfg: &'a ModelConfig) -> Self {
        Self {
            net: Net::new(g, p, ctx),
            cfg,
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.net.g
    }

    pub fn input(&self, x: &Mat) -> Var<'g> {
        self.net.g.constant(x.clone())
    }

    pub fn prosody_encode(&self, x: Var<'g>) -> ProsodyEmbedding<'g> {
        let h = self.net.linear("prosody_enc.input", x);
        let vectors = self.net.conformer_stack(
            "prosody_enc.encoder",
            self.cfg.layers.prosody_enc,
            h,
            self.cfg.heads,
            self.cfg.dropout,
        );
        ProsodyEmbedding {
            vectors,
            predicted: false,
        }
    }

    /// Transformer layers followed by attentive pooling over time.
    pub fn speaker_encode(&self, vp: ProsodyEmbedding<'g>) -> SpeakerEmbedding<'g> {
        let h = self.net.transformer_stack(
            "speaker_enc.encoder",
            self.cfg.layers.speaker_enc,
            vp.vectors,
            self.cfg.heads,
            self.cfg.dropout,
        );
        let scores = self
            .net
            .linear("speaker_enc.pool.w1", h)
            .tanh()
            .matmul(self.net.param("speaker_enc.pool.w2.weight"));
        let weights = scores.t().softmax_rows();
        SpeakerEmbedding {
            vector: weights.matmul(h),
        }
    }

    pub fn content_encode(&self, x: Var<'g>) -> Result<ContentEmbedding<'g>> {
        let t = x.rows();
        let needed = self.cfg.downsample_rate;
        if t < needed {
            return Err(Error::TooShort {
                what: "content encoder frames",
                needed,
                got: t,
            });
        }
        let h = self
            .net
            .downsample("content_enc.subsample", self.cfg.sampler_blocks, x);
        let vectors = self.net.conformer_stack(
            "content_enc.encoder",
            self.cfg.layers.content_enc,
            h,
            self.cfg.heads,
            self.cfg.dropout,
        );
        Ok(ContentEmbedding { vectors })
    }

    /// Features with as many rows as `vp`.
    pub fn audio_decode(&self, vp: ProsodyEmbedding<'g>, vc: ContentEmbedding<'g>) -> Result<Var<'g>> {
        let t = vp.vectors.rows();
        let h = self.net.conformer_stack(
            "content_dec.decoder",
            self.cfg.layers.content_dec,
            vc.vectors,
            self.cfg.heads,
            self.cfg.dropout,
        );
        let up = self
            .net
            .upsample("content_dec.upsample", self.cfg.sampler_blocks, h);
        let up = fit_rows(up, t, self.cfg.length_tolerance)?;
        let merged = self.net.g.concat_cols(&[vp.vectors, up]);
        let h = self.net.linear("merge_dec.input", merged);
        let h = self.net.conformer_stack(
            "merge_dec.decoder",
            self.cfg.layers.merge_dec,
            h,
            self.cfg.heads,
            self.cfg.dropout,
        );
        Ok(self.net.linear("merge_dec.output", h))
    }

    pub fn unit_encode(&self, tokens: &[usize]) -> Result<UnitEmbedding<'g>> {
        if tokens.is_empty() {
            return Err(Error::InvalidBatch("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.phoneme_vocab) {
            return Err(Error::OutOfVocabulary(format!("phoneme id {bad}")));
        }
        let emb = self.net.param("unit_enc.embed.weight").gather_rows(tokens);
        let vectors = self.net.transformer_stack(
            "unit_enc.encoder",
            self.cfg.layers.unit_enc,
            emb,
            self.cfg.unit_heads,
            self.cfg.dropout,
        );
        Ok(UnitEmbedding { vectors })
    }

    /// `L × 1` log-durations from unit vectors and the speaker vector.
    pub fn predict_durations(&self, vu: UnitEmbedding<'g>, vs: SpeakerEmbedding<'g>) -> Var<'g> {
        let l = vu.vectors.rows();
        let mut h = self
            .net
            .g
            .concat_cols(&[vu.vectors, vs.vector.broadcast_rows(l)]);
        for i in 0..2 {
            h = self
                .net
                .linear(&format!("duration_pred.conv.{i}"), h.unfold_rows(3, 1, 1))
                .swish();
            h = self.net.norm(&format!("duration_pred.norm.{i}"), h);
            h = self.net.dropout(h, self.cfg.duration_dropout);
        }
        self.net.linear("duration_pred.output", h)
    }

    pub fn length_regulate(&self, vu: UnitEmbedding<'g>, d: &[usize]) -> Result<Var<'g>> {
        check_durations(vu.vectors.rows(), d)?;
        Ok(vu.vectors.gather_rows(&nn::regulate_indices(d)))
    }

    /// Teacher durations (frame rate) when given, otherwise predicted ones.
    pub fn text_encode(
        &self,
        tokens: &[usize],
        vs: SpeakerEmbedding<'g>,
        teacher_durations: Option<&[usize]>,
    ) -> Result<TextEncoding<'g>> {
        let units = self.unit_encode(tokens)?;
        let log_durations = self.predict_durations(units, vs);
        let durations = match teacher_durations {
            Some(d) => {
                check_durations(tokens.len(), d)?;
                d.to_vec()
            }
            None => {
                let v = log_durations.value();
                durations_from_log(v.as_slice().expect("column vector is contiguous"))
            }
        };
        self.text_encode_with(units, log_durations, durations)
    }

    /// Length regulation and down-sampling with explicit frame durations.
    pub fn text_encode_with(
        &self,
        units: UnitEmbedding<'g>,
        log_durations: Var<'g>,
        durations: Vec<usize>,
    ) -> Result<TextEncoding<'g>> {
        let frames = self.length_regulate(units, &durations)?;
        let vectors = self
            .net
            .downsample("text_enc.subsample", self.cfg.sampler_blocks, frames);
        Ok(TextEncoding {
            content: ContentEmbedding { vectors },
            log_durations,
            durations,
            units,
        })
    }

    pub fn text_decode(&self, vc: ContentEmbedding<'g>, teacher: Option<&[usize]>) -> Result<TextDecoding<'g>> {
        let ctc_log_probs = self
            .net
            .linear("text_dec.ctc", vc.vectors)
            .log_softmax_rows();
        let s2s_log_probs = match teacher {
            Some(y) => Some(self.s2s_logits(vc, y)?.log_softmax_rows()),
            None if self.net.ctx.train => {
                return Err(Error::InvalidBatch(
                    "attention decoder needs teacher tokens in training mode".into(),
                ))
            }
            None => None,
        };
        Ok(TextDecoding {
            ctc_log_probs,
            s2s_log_probs,
        })
    }

    /// Logits for every position after the prefix `[EOS] ++ prefix`.
    pub fn s2s_logits(&self, vc: ContentEmbedding<'g>, prefix: &[usize]) -> Result<Var<'g>> {
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.cfg.bpe_vocab) {
            return Err(Error::OutOfVocabulary(format!("token id {bad}")));
        }
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(EOS_ID);
        ids.extend_from_slice(prefix);
        let emb = self.net.param("text_dec.embed.weight").gather_rows(&ids);
        let h = self.net.decoder_stack(
            "text_dec.decoder",
            self.cfg.layers.s2s_dec,
            emb,
            vc.vectors,
            self.cfg.heads,
            self.cfg.dropout,
        );
        Ok(self.net.linear("text_dec.output", h))
    }

    /// Content-rate prediction up-sampled to `4·T′` frames.
    pub fn prosody_predict(&self, vc: ContentEmbedding<'g>, vs: SpeakerEmbedding<'g>) -> ProsodyEmbedding<'g> {
        let t = vc.vectors.rows();
        let h = self
            .net
            .g
            .concat_cols(&[vc.vectors, vs.vector.broadcast_rows(t)]);
        let h = self.net.linear("prosody_pred.input", h);
        let h = self.net.conformer_stack(
            "prosody_pred.encoder",
            self.cfg.layers.prosody_pred,
            h,
            self.cfg.heads,
            self.cfg.dropout,
        );
        let vectors = self
            .net
            .upsample("prosody_pred.upsample", self.cfg.sampler_blocks, h);
        ProsodyEmbedding {
            vectors,
            predicted: true,
        }
    }

    pub fn speaker_logits(&self, vs: SpeakerEmbedding<'g>) -> Var<'g> {
        self.net.linear("sc.classifier", vs.vector)
    }

    pub fn speaker_table(&self, speaker: usize) -> Result<SpeakerEmbedding<'g>> {
        if speaker >= self.cfg.n_speakers {
            return Err(Error::UnknownSpeaker {
                id: speaker,
                n: self.cfg.n_speakers,
            });
        }
        Ok(SpeakerEmbedding {
            vector: self
                .net
                .param("tts.speaker_table.weight")
                .slice_rows(speaker, 1),
        })
    }
}
