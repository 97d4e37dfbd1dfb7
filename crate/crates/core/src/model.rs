//! Model configuration and assembly of the three branches and the classifier.

use serde::{Deserialize, Serialize};

use crate::audio::{AssembledSequence, AudioEncoder};
use crate::error::{Error, Result};
use crate::fusion::{DialectFusion, ScaleMode};
use crate::heads::{audio_to_fusion, TextHead, VisualHead};
use crate::numerics::layers::Linear;
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::train::contrastive::{ContrastiveHead, ContrastiveVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    SingleLabel,
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_a: usize,
    pub l_max: usize,
    pub d_f: usize,
    pub latent: [usize; 3],
    pub cnn_channels: [usize; 3],
    pub d_text: usize,
    pub classes: usize,
    pub task: TaskKind,
    pub scale_mode: ScaleMode,
    pub contrastive: ContrastiveVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            layers: 3,
            d_a: 88,
            l_max: 64,
            d_f: 256,
            latent: [4, 64, 64],
            cnn_channels: [16, 32, 64],
            d_text: 768,
            classes: 5,
            task: TaskKind::SingleLabel,
            scale_mode: ScaleMode::DivideByD,
            contrastive: ContrastiveVariant::PairwiseBinary,
        }
    }
}

impl ModelConfig {
    /// Hidden size and head count of the published model.
    pub fn with_paper_dims(mut self) -> Self {
        self.d = 768;
        self.heads = 8;
        self
    }

    /// The small configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            heads: 2,
            layers: 1,
            d_a: 6,
            l_max: 8,
            d_f: 8,
            latent: [2, 8, 8],
            cnn_channels: [2, 3, 4],
            d_text: 5,
            classes: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_a", self.d_a),
            ("l_max", self.l_max),
            ("d_f", self.d_f),
            ("d_text", self.d_text),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d={} is not divisible by {} heads", self.d, self.heads)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.cnn_channels.contains(&0) {
            return Err(Error::Config("CNN channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Which branches participate. A disabled modality contributes a zero vector
/// at the classifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_text: bool,
    pub use_audio: bool,
    pub use_vision: bool,
    pub use_dialect: bool,
    pub use_translation_channel: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_text: true,
            use_audio: true,
            use_vision: true,
            use_dialect: true,
            use_translation_channel: true,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_text || self.use_audio || self.use_vision) {
            return Err(Error::Config("at least one modality must be enabled".into()));
        }
        Ok(())
    }

    pub fn enabled_modalities(&self) -> usize {
        [self.use_text, self.use_audio, self.use_vision].iter().filter(|b| **b).count()
    }

    /// Short tag such as `text+audio+vision+dialect`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if self.use_text {
            parts.push(if self.use_translation_channel { "text" } else { "text(plain)" });
        }
        if self.use_audio {
            parts.push("audio");
        }
        if self.use_vision {
            parts.push("vision");
        }
        if self.use_audio && self.use_dialect {
            parts.push("dialect");
        }
        parts.join("+")
    }
}

/// One batch of model inputs. Only the inputs of enabled branches are read.
#[derive(Debug, Clone, Default)]
pub struct ModelInput {
    /// Sequences in the primary (Mandarin) dialect.
    pub primary: Vec<AssembledSequence>,
    /// The same sentences in the second dialect.
    pub secondary: Option<Vec<AssembledSequence>>,
    /// `[B×C×H×W]`
    pub latents: Option<Tensor>,
    /// `[B×d_text]`
    pub text: Option<Tensor>,
}

/// Per-modality `[B×d_f]` features; `None` for disabled branches.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub text: Option<Var>,
    pub audio: Option<Var>,
    pub vision: Option<Var>,
    pub batch: usize,
}

impl Features {
    pub fn present(&self) -> Vec<Var> {
        [self.text, self.audio, self.vision].into_iter().flatten().collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: AudioEncoder,
    pub fusion: DialectFusion,
    pub visual: VisualHead,
    pub text: TextHead,
    pub audio_proj: Linear,
    pub classifier: Linear,
    pub contrastive: ContrastiveHead,
}

impl Model {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = AudioEncoder::new(&mut store, &mut rng.fork(), "audio", c.d_a, c.d, c.heads, c.layers, c.l_max)?;
        let fusion = DialectFusion::new(&mut store, &mut rng.fork(), "fusion", c.d, c.scale_mode)?;
        let visual = VisualHead::new(&mut store, &mut rng.fork(), "visual", c.latent, c.cnn_channels, c.d_f)?;
        let text = TextHead::new(&mut store, &mut rng.fork(), "text", c.d_text, c.d_f)?;
        let audio_proj = Linear::new(&mut store, &mut rng.fork(), "audio_proj", c.d, c.d_f)?;
        let classifier = Linear::new(&mut store, &mut rng.fork(), "classifier", 3 * c.d_f, c.classes)?;
        let contrastive = ContrastiveHead::new(&mut store, "contrastive", c.contrastive)?;
        Ok((
            Self {
                config,
                encoder,
                fusion,
                visual,
                text,
                audio_proj,
                classifier,
                contrastive,
            },
            store,
        ))
    }

    /// Runs every enabled branch.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, input: &ModelInput, flags: &AblationFlags) -> Result<Features> {
        flags.validate()?;
        let mut batch = None;
        let mut agree = |what: &str, n: usize| -> Result<()> {
            match batch {
                Some(b) if b != n => Err(Error::Data(format!("{what} has {n} samples, expected {b}"))),
                _ => {
                    batch = Some(n);
                    Ok(())
                }
            }
        };

        let text = if flags.use_text {
            let emb = input
                .text
                .as_ref()
                .ok_or_else(|| Error::Data("text branch enabled but no text embeddings given".into()))?;
            agree("text batch", emb.shape()[0])?;
            let e = g.constant(emb.clone());
            Some(self.text.forward(g, store, e)?)
        } else {
            None
        };

        let vision = if flags.use_vision {
            let lat = input
                .latents
                .as_ref()
                .ok_or_else(|| Error::Data("vision branch enabled but no latents given".into()))?;
            agree("latent batch", lat.shape()[0])?;
            let l = g.constant(lat.clone());
            Some(self.visual.forward(g, store, l)?)
        } else {
            None
        };

        let audio = if flags.use_audio {
            agree("audio batch", input.primary.len())?;
            let primary = self.encoder.forward(g, store, &input.primary)?;
            let fused = if flags.use_dialect {
                let secondary = input
                    .secondary
                    .as_ref()
                    .ok_or_else(|| Error::Data("dialect fusion enabled but no second dialect given".into()))?;
                agree("second-dialect batch", secondary.len())?;
                let secondary = self.encoder.forward(g, store, secondary)?;
                self.fusion.forward(g, store, &primary, &secondary)?
            } else {
                primary.pooled
            };
            Some(audio_to_fusion(g, store, &self.audio_proj, fused)?)
        } else {
            None
        };

        let batch = batch.ok_or_else(|| Error::Data("empty batch".into()))?;
        Ok(Features {
            text,
            audio,
            vision,
            batch,
        })
    }

    /// Classifier logits over `[F_text ⊕ F_audio ⊕ F_vision]`, with zero
    /// vectors standing in for disabled branches.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, f: &Features) -> Result<Var> {
        let d_f = self.config.d_f;
        let mut parts = Vec::with_capacity(3);
        for v in [f.text, f.audio, f.vision] {
            parts.push(match v {
                Some(v) => v,
                None => g.constant(Tensor::zeros(vec![f.batch, d_f])),
            });
        }
        let cat = g.concat_last(&parts)?;
        self.classifier.forward(g, store, cat)
    }

    /// Class probabilities: softmax for single-label, per-class sigmoid for
    /// multi-label.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, f: &Features) -> Result<Var> {
        let z = self.logits(g, store, f)?;
        match self.config.task {
            TaskKind::SingleLabel => g.softmax(z, None),
            TaskKind::MultiLabel => g.sigmoid(z),
        }
    }
}
