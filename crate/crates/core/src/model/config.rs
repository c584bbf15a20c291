use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::DEFAULT_DROPOUT;

/// Where the participant and visual embeddings join the audio path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fusion {
    /// Stacked into the feature augmentation block.
    #[serde(rename = "ef")]
    Early,
    /// Concatenated to the attention output before the output block.
    #[serde(rename = "mf")]
    Mid,
    /// Fed with the audio-only prediction into a post-hoc output adapter.
    #[serde(rename = "lf")]
    Late,
}

impl Fusion {
    pub fn code(self) -> &'static str {
        match self {
            Fusion::Early => "ef",
            Fusion::Mid => "mf",
            Fusion::Late => "lf",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ef" | "early" => Ok(Fusion::Early),
            "mf" | "mid" => Ok(Fusion::Mid),
            "lf" | "late" => Ok(Fusion::Late),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Fusion mode plus the two modality switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub fusion: Fusion,
    pub include_participant: bool,
    pub include_visual: bool,
}

impl Variant {
    /// The audio-only model: no participant or visual embeddings. Mid-level
    /// fusion with both embeddings zeroed computes exactly the audio-only
    /// network.
    pub const BASELINE: Variant = Variant {
        fusion: Fusion::Mid,
        include_participant: false,
        include_visual: false,
    };

    pub fn is_baseline(&self) -> bool {
        *self == Self::BASELINE
    }

    /// The baseline followed by the nine fusion variants, in table order.
    pub fn table() -> Vec<Variant> {
        let mut out = vec![Self::BASELINE];
        for (ip, iv) in [(true, false), (false, true), (true, true)] {
            for fusion in [Fusion::Early, Fusion::Mid, Fusion::Late] {
                out.push(Variant {
                    fusion,
                    include_participant: ip,
                    include_visual: iv,
                });
            }
        }
        out
    }

    pub fn piq_code(&self) -> &'static str {
        if self.include_participant {
            "ip"
        } else {
            "ep"
        }
    }

    pub fn visual_code(&self) -> &'static str {
        if self.include_visual {
            "iv"
        } else {
            "ev"
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_baseline() {
            f.write_str("baseline")
        } else {
            write!(f, "{}-{}-{}", self.piq_code(), self.visual_code(), self.fusion)
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "baseline" {
            return Ok(Self::BASELINE);
        }
        let parts: Vec<&str> = s.split('-').collect();
        let bad = || Error::Config(format!("unknown configuration label {s:?}"));
        let [piq, vis, fusion] = parts[..] else {
            return Err(bad());
        };
        let include_participant = match piq {
            "ip" => true,
            "ep" => false,
            _ => return Err(bad()),
        };
        let include_visual = match vis {
            "iv" => true,
            "ev" => false,
            _ => return Err(bad()),
        };
        Ok(Variant {
            fusion: fusion.parse().map_err(|_| bad())?,
            include_participant,
            include_visual,
        })
    }
}

/// Complete structural description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: Fusion,
    pub include_participant: bool,
    pub include_visual: bool,
    /// `(T, F, C_s)` of the soundscape spectrogram.
    pub audio_shape: [usize; 3],
    pub masker_channels: usize,
    /// `(H, W, C_v)` of the environment image.
    pub image_shape: [usize; 3],
    pub participant_dim: usize,
    pub embed_dim: usize,
    pub audio_filters: Vec<usize>,
    pub audio_pools: Vec<[usize; 2]>,
    pub visual_filters: Vec<usize>,
    pub visual_pools: Vec<[usize; 2]>,
    pub output_hidden: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: Fusion::Mid,
            include_participant: false,
            include_visual: false,
            audio_shape: [644, 64, 2],
            masker_channels: 1,
            image_shape: [240, 135, 3],
            participant_dim: 5,
            embed_dim: 128,
            audio_filters: vec![16, 32, 48, 64, 64],
            audio_pools: vec![[2, 2]; 5],
            visual_filters: vec![16, 32, 48, 64, 64],
            visual_pools: vec![[2, 2], [2, 2], [2, 2], [3, 3], [5, 5]],
            output_hidden: 128,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }
}

fn pooled(mut h: usize, mut w: usize, pools: &[[usize; 2]], what: &str) -> Result<(usize, usize)> {
    for (i, &[ph, pw]) in pools.iter().enumerate() {
        if ph == 0 || pw == 0 || h < ph || w < pw {
            return Err(Error::dim(format!(
                "{what}: block {i} pool {ph}x{pw} does not fit {h}x{w}"
            )));
        }
        h /= ph;
        w /= pw;
    }
    Ok((h, w))
}

impl ModelConfig {
    /// Desk-scale configuration: 64×8 spectrograms, 48×27 images, D = 8.
    pub fn miniature() -> Self {
        Self {
            audio_shape: [64, 8, 2],
            image_shape: [48, 27, 3],
            embed_dim: 8,
            audio_filters: vec![4, 4, 4, 4, 4],
            audio_pools: vec![[2, 2], [2, 2], [2, 1], [2, 1], [1, 1]],
            visual_filters: vec![4, 4, 4, 4, 4],
            visual_pools: vec![[2, 2], [2, 2], [2, 2], [3, 3], [1, 1]],
            output_hidden: 16,
            dropout_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn variant(&self) -> Variant {
        Variant {
            fusion: self.fusion,
            include_participant: self.include_participant,
            include_visual: self.include_visual,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.fusion = v.fusion;
        self.include_participant = v.include_participant;
        self.include_visual = v.include_visual;
        self
    }

    /// Hidden width of the late-fusion adapter: `2^(⌊log₂ M⌋ + 1)`.
    pub fn adapter_hidden(&self) -> usize {
        let m = self.participant_dim.max(1);
        1 << (m.ilog2() + 1)
    }

    /// `(N, D)` produced by the audio extractors.
    pub fn audio_embedding_shape(&self) -> Result<(usize, usize)> {
        let [t, f, _] = self.audio_shape;
        let (n, f5) = pooled(t, f, &self.audio_pools, "audio extractor")?;
        let c = *self
            .audio_filters
            .last()
            .ok_or_else(|| Error::Config("audio extractor has no blocks".into()))?;
        Ok((n, f5 * c))
    }

    pub fn visual_embedding_len(&self) -> Result<usize> {
        let [h, w, _] = self.image_shape;
        let (h5, w5) = pooled(h, w, &self.visual_pools, "visual extractor")?;
        let c = *self
            .visual_filters
            .last()
            .ok_or_else(|| Error::Config("visual extractor has no blocks".into()))?;
        Ok(h5 * w5 * c)
    }

    /// Input width of the output block.
    pub fn output_input_dim(&self) -> usize {
        match self.fusion {
            Fusion::Mid => 3 * self.embed_dim,
            Fusion::Early | Fusion::Late => self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_filters.len() != self.audio_pools.len() {
            return Err(Error::Config("audio_filters and audio_pools differ in length".into()));
        }
        if self.visual_filters.len() != self.visual_pools.len() {
            return Err(Error::Config("visual_filters and visual_pools differ in length".into()));
        }
        if self.audio_shape.contains(&0)
            || self.image_shape.contains(&0)
            || self.masker_channels == 0
            || self.participant_dim == 0
            || self.embed_dim == 0
            || self.output_hidden == 0
            || self.audio_filters.contains(&0)
            || self.visual_filters.contains(&0)
        {
            return Err(Error::Config("all sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let (_, d) = self.audio_embedding_shape()?;
        if d != self.embed_dim {
            return Err(Error::Config(format!(
                "audio extractor yields width {d}, expected embed_dim {}",
                self.embed_dim
            )));
        }
        let r = self.visual_embedding_len()?;
        if r != self.embed_dim {
            return Err(Error::Config(format!(
                "visual extractor yields length {r}, expected embed_dim {}",
                self.embed_dim
            )));
        }
        Ok(())
    }
}
