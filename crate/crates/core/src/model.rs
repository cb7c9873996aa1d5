//! Model configuration and the assembled network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderCell, Fusion};
use crate::encoders::{SpeakerTable, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Linear, ParamStore, Var};
use crate::text::CharacterSequence;
use crate::tva::Tva;

/// Layer widths of every trainable component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub mel_bins: usize,
    pub frames_per_step: usize,
    pub char_embed: usize,
    pub enc_prenet: [usize; 2],
    pub bank_kernels: usize,
    pub bank_channels: usize,
    pub enc_projection: usize,
    pub highway_layers: usize,
    pub enc_lstm: usize,
    pub visual_dim: usize,
    pub tva_heads: usize,
    pub tva_head_dim: usize,
    pub tva_out: usize,
    pub speaker_dim: usize,
    pub speaker_proj: usize,
    pub dec_prenet: [usize; 2],
    pub fusion_dim: usize,
    pub attn_rnn: usize,
    pub attn_dim: usize,
    pub dec_lstm: usize,
    pub zoneout: f64,
    pub prenet_dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            mel_bins: crate::data::NUM_MELS,
            frames_per_step: 2,
            char_embed: 128,
            enc_prenet: [256, 128],
            bank_kernels: 16,
            bank_channels: 128,
            enc_projection: 256,
            highway_layers: 4,
            enc_lstm: 256,
            visual_dim: 512,
            tva_heads: 2,
            tva_head_dim: 256,
            tva_out: 64,
            speaker_dim: 256,
            speaker_proj: 64,
            dec_prenet: [256, 128],
            fusion_dim: 256,
            attn_rnn: 256,
            attn_dim: 128,
            dec_lstm: 256,
            zoneout: 0.1,
            prenet_dropout: 0.5,
        }
    }
}

impl ModelDims {
    /// Every width divided by eight; mel bins, step size, head count and
    /// layer counts are kept.
    pub fn tiny() -> Self {
        let d = Self::default();
        let s = |x: usize| (x / 8).max(1);
        Self {
            char_embed: s(d.char_embed),
            enc_prenet: [s(d.enc_prenet[0]), s(d.enc_prenet[1])],
            bank_kernels: s(d.bank_kernels),
            bank_channels: s(d.bank_channels),
            enc_projection: s(d.enc_projection),
            enc_lstm: s(d.enc_lstm),
            visual_dim: s(d.visual_dim),
            tva_head_dim: s(d.tva_head_dim),
            tva_out: s(d.tva_out),
            speaker_dim: s(d.speaker_dim),
            speaker_proj: s(d.speaker_proj),
            dec_prenet: [s(d.dec_prenet[0]), s(d.dec_prenet[1])],
            fusion_dim: s(d.fusion_dim),
            attn_rnn: s(d.attn_rnn),
            attn_dim: s(d.attn_dim),
            dec_lstm: s(d.dec_lstm),
            ..d
        }
    }

    pub fn text_dim(&self) -> usize {
        2 * self.enc_lstm
    }

    pub fn memory_dim(&self) -> usize {
        self.tva_out + self.speaker_proj
    }

    pub fn step_width(&self) -> usize {
        self.frames_per_step * self.mel_bins
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.mel_bins,
            self.frames_per_step,
            self.char_embed,
            self.enc_prenet[0],
            self.enc_prenet[1],
            self.bank_kernels,
            self.bank_channels,
            self.enc_projection,
            self.enc_lstm,
            self.visual_dim,
            self.tva_heads,
            self.tva_head_dim,
            self.tva_out,
            self.speaker_dim,
            self.speaker_proj,
            self.dec_prenet[0],
            self.dec_prenet[1],
            self.fusion_dim,
            self.attn_rnn,
            self.attn_dim,
            self.dec_lstm,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !crate::data::FRAME_RATIO.is_multiple_of(self.frames_per_step) {
            return Err(Error::Config(format!(
                "frames_per_step {} must divide the frame ratio {}",
                self.frames_per_step,
                crate::data::FRAME_RATIO
            )));
        }
        for (name, p) in [("zoneout", self.zoneout), ("prenet_dropout", self.prenet_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// Which of the compared systems to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Textual-visual attention, visual fusion and the video-length stop rule.
    Visualtts,
    /// Textual-visual attention without visual fusion; learned stop gate.
    TacotronTva,
    /// Text-only Tacotron with a learned stop gate.
    Tacotron,
}

impl Variant {
    pub fn uses_tva(self) -> bool {
        !matches!(self, Variant::Tacotron)
    }

    pub fn uses_visual_fusion(self) -> bool {
        matches!(self, Variant::Visualtts)
    }

    pub fn uses_video(self) -> bool {
        self.uses_tva() || self.uses_visual_fusion()
    }

    /// Whether decoding length is locked to the video instead of a stop gate.
    pub fn length_locked(self) -> bool {
        matches!(self, Variant::Visualtts)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Visualtts => "visualtts",
            Variant::TacotronTva => "tacotron_tva",
            Variant::Tacotron => "tacotron",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visualtts" => Ok(Variant::Visualtts),
            "tacotron_tva" => Ok(Variant::TacotronTva),
            "tacotron" => Ok(Variant::Tacotron),
            other => Err(Error::Config(format!("unknown model variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dims: ModelDims,
    pub num_speakers: usize,
    /// Decoder step cap for the gate-stopped baselines.
    pub max_decoder_steps: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, dims: ModelDims, num_speakers: usize) -> Self {
        Self {
            variant,
            dims,
            num_speakers,
            max_decoder_steps: 250,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.num_speakers == 0 {
            return Err(Error::Config("num_speakers must be at least 1".into()));
        }
        if self.max_decoder_steps == 0 {
            return Err(Error::Config("max_decoder_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Text projection standing in for attention in the text-only baseline.
#[derive(Debug, Clone)]
pub enum TextContext {
    Tva(Tva),
    Projection(Linear),
}

/// All trainable components except the frozen visual encoder.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub speaker: SpeakerTable,
    pub context: TextContext,
    pub fusion: Fusion,
    pub cell: DecoderCell,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = {
            let mut init = Init::new(&mut store, seed);
            let d = &config.dims;
            let text = TextEncoder::new(&mut init, d);
            let speaker = SpeakerTable::new(&mut init, config.num_speakers, d.speaker_dim, d.speaker_proj);
            let context = if config.variant.uses_tva() {
                TextContext::Tva(Tva::new(
                    &mut init,
                    d.tva_heads,
                    d.tva_head_dim,
                    d.text_dim(),
                    d.visual_dim,
                    d.tva_out,
                ))
            } else {
                TextContext::Projection(Linear::new(&mut init, "text_proj", d.text_dim(), d.tva_out))
            };
            let fusion = Fusion::new(&mut init, d, config.variant.uses_visual_fusion());
            let cell = DecoderCell::new(&mut init, d, !config.variant.length_locked());
            Self {
                config,
                text,
                speaker,
                context,
                fusion,
                cell,
            }
        };
        Ok((net, store))
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn dims(&self) -> &ModelDims {
        &self.config.dims
    }

    pub fn tva(&self) -> Option<&Tva> {
        match &self.context {
            TextContext::Tva(t) => Some(t),
            TextContext::Projection(_) => None,
        }
    }

    /// Text-side context `[T_t x tva_out]` plus per-head attention weights.
    pub fn text_context(&self, g: &mut Graph, beta: Var, alpha: Option<Var>) -> Result<(Var, Vec<Var>)> {
        match (&self.context, alpha) {
            (TextContext::Tva(tva), Some(a)) => Ok(tva.forward(g, beta, a)),
            (TextContext::Tva(_), None) => Err(Error::Config(format!(
                "variant {} needs visual embeddings",
                self.variant()
            ))),
            (TextContext::Projection(p), _) => Ok((p.forward(g, beta), Vec::new())),
        }
    }

    /// Decoder memory `[T_t x memory_dim]` for one utterance: text context
    /// with the projected speaker vector (row `speaker_row` of
    /// `speaker_projected`) broadcast over every text step.
    pub fn memory_from_text(
        &self,
        g: &mut Graph,
        beta: Var,
        alpha: Option<Var>,
        speaker_projected: Var,
        speaker_row: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let t_t = g.shape(beta).0;
        let (ctx, weights) = self.text_context(g, beta, alpha)?;
        let spk = g.gather_rows(speaker_projected, &vec![speaker_row; t_t]);
        Ok((g.concat_cols(&[ctx, spk]), weights))
    }

    pub fn memory(
        &self,
        g: &mut Graph,
        tokens: &CharacterSequence,
        alpha: Option<Var>,
        speaker_projected: Var,
        speaker_row: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let beta = self.text.forward(g, tokens);
        self.memory_from_text(g, beta, alpha, speaker_projected, speaker_row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_is_eighth_width() {
        let full = ModelDims::default();
        let tiny = ModelDims::tiny();
        assert_eq!(full.text_dim(), 512);
        assert_eq!(full.memory_dim(), 128);
        assert_eq!(tiny.text_dim(), 64);
        assert_eq!(tiny.attn_rnn * 8, full.attn_rnn);
        assert_eq!(tiny.mel_bins, full.mel_bins);
        assert_eq!(tiny.tva_heads, full.tva_heads);
        tiny.validate().unwrap();
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Visualtts, Variant::TacotronTva, Variant::Tacotron] {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{v}\""));
        }
        assert!("wavenet".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_capabilities() {
        assert!(Variant::Visualtts.uses_visual_fusion() && Variant::Visualtts.length_locked());
        assert!(Variant::TacotronTva.uses_tva() && !Variant::TacotronTva.uses_visual_fusion());
        assert!(!Variant::Tacotron.uses_video());
    }

    #[test]
    fn rejects_bad_config() {
        let mut dims = ModelDims::tiny();
        dims.frames_per_step = 3;
        assert!(Network::new(ModelConfig::new(Variant::Visualtts, dims, 2), 0).is_err());
        let mut dims = ModelDims::tiny();
        dims.zoneout = 1.5;
        assert!(dims.validate().is_err());
        assert!(Network::new(ModelConfig::new(Variant::Visualtts, ModelDims::tiny(), 0), 0).is_err());
    }

    #[test]
    fn baseline_has_no_attention_parameters() {
        let (_, tac) = Network::new(ModelConfig::new(Variant::Tacotron, ModelDims::tiny(), 2), 0).unwrap();
        let (_, vt) = Network::new(ModelConfig::new(Variant::Visualtts, ModelDims::tiny(), 2), 0).unwrap();
        assert!(tac.id("text_proj.weight").is_some() && tac.id("tva.head0.query.weight").is_none());
        assert!(vt.id("tva.head1.key.weight").is_some() && vt.id("decoder.gate.weight").is_none());
        assert!(tac.id("decoder.gate.weight").is_some());
    }
}
