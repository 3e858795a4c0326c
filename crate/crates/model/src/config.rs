//! Network configuration and named variants.

use std::fmt;
use std::str::FromStr;

use audiocap_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Full model: MHSA keyword heads, meta keywords, attention decoder.
    Model1,
    /// Keyword heads use an FC layer instead of MHSA.
    Model2,
    /// No meta keyword block and no decoder attention.
    Model3,
    /// No text mix-up.
    Model4,
    /// Single CNN block followed by a shared Transformer block with time sub-sampling.
    Model5,
    /// One BLSTM layer, D = 160.
    Model6,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Model1,
        Variant::Model2,
        Variant::Model3,
        Variant::Model4,
        Variant::Model5,
        Variant::Model6,
    ];

    pub fn uses_meta(self) -> bool {
        self != Variant::Model3
    }

    pub fn uses_attention(self) -> bool {
        self != Variant::Model3
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A variant with its `single` / `param2` suffixes, e.g. `Model5single`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VariantName {
    pub variant: Variant,
    pub single: bool,
    pub param2: bool,
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.variant)?;
        if self.single {
            write!(f, "single")?;
        }
        if self.param2 {
            write!(f, "param2")?;
        }
        Ok(())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown variant name {s:?}"));
        let rest = s.strip_prefix("Model").ok_or_else(bad)?;
        let mut chars = rest.chars();
        let digit = chars.next().ok_or_else(bad)?;
        let variant = match digit {
            '1' => Variant::Model1,
            '2' => Variant::Model2,
            '3' => Variant::Model3,
            '4' => Variant::Model4,
            '5' => Variant::Model5,
            '6' => Variant::Model6,
            _ => return Err(bad()),
        };
        let mut tail = chars.as_str();
        let mut single = false;
        let mut param2 = false;
        while !tail.is_empty() {
            if let Some(t) = tail.strip_prefix("single") {
                if single {
                    return Err(bad());
                }
                single = true;
                tail = t;
            } else if let Some(t) = tail.strip_prefix("param2") {
                if param2 {
                    return Err(bad());
                }
                param2 = true;
                tail = t;
            } else {
                return Err(bad());
            }
        }
        Ok(Self {
            variant,
            single,
            param2,
        })
    }
}

impl TryFrom<String> for VariantName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<VariantName> for String {
    fn from(v: VariantName) -> String {
        v.to_string()
    }
}

/// Architecture hyper-parameters. Vocabulary sizes are filled in from the
/// built vocabularies before the network is created.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Use the log-mel channel in place of the HPSS channels.
    pub single: bool,
    /// Uniform caption selection and 0.8 meta keyword loss weight.
    pub param2: bool,
    pub d: usize,
    pub d_l: usize,
    pub k_m: usize,
    pub l_max: usize,
    pub mhsa_heads: usize,
    pub blstm_layers: usize,
    pub text_mixup: bool,
    pub cnn_channels: usize,
    pub n_mels: usize,
    /// Input frames T after crop/pad.
    pub frames: usize,
    /// Decoder steps N.
    pub n_steps: usize,
    pub c_cap: usize,
    pub c_key: usize,
}

impl ModelConfig {
    /// Full-size settings (D = 120, K_m = 15, T = 216).
    pub fn paper(name: VariantName) -> Self {
        let mut cfg = Self {
            variant: name.variant,
            single: name.single,
            param2: name.param2,
            d: 120,
            d_l: 16,
            k_m: 15,
            l_max: 20,
            mhsa_heads: 4,
            blstm_layers: 2,
            text_mixup: true,
            cnn_channels: 64,
            n_mels: 64,
            frames: 216,
            n_steps: 20,
            c_cap: 0,
            c_key: 0,
        };
        cfg.apply_variant();
        cfg
    }

    /// CPU-friendly profile: D = 32, T = 64.
    pub fn desk(name: VariantName) -> Self {
        let mut cfg = Self::paper(name);
        cfg.d = 32;
        cfg.d_l = 8;
        cfg.k_m = 4;
        cfg.cnn_channels = 16;
        cfg.frames = 64;
        cfg.apply_variant();
        if name.variant == Variant::Model6 {
            cfg.d = 40;
        }
        cfg
    }

    /// Tiny profile for finite-difference checks.
    pub fn miniature(name: VariantName) -> Self {
        let mut cfg = Self::paper(name);
        cfg.d = 8;
        cfg.d_l = 4;
        cfg.k_m = 2;
        cfg.l_max = 6;
        cfg.mhsa_heads = 2;
        cfg.cnn_channels = 2;
        cfg.n_mels = 16;
        cfg.frames = 16;
        cfg.n_steps = 6;
        cfg.c_cap = 12;
        cfg.c_key = 6;
        cfg.apply_variant();
        if name.variant == Variant::Model6 {
            cfg.d = 12;
        }
        cfg
    }

    fn apply_variant(&mut self) {
        match self.variant {
            Variant::Model4 => self.text_mixup = false,
            Variant::Model6 => {
                self.blstm_layers = 1;
                self.d = 160;
            }
            _ => {}
        }
    }

    pub fn name(&self) -> VariantName {
        VariantName {
            variant: self.variant,
            single: self.single,
            param2: self.param2,
        }
    }

    pub fn with_vocab(mut self, c_cap: usize, c_key: usize) -> Self {
        self.c_cap = c_cap;
        self.c_key = c_key;
        self
    }

    /// Number of meta keywords actually embedded (cannot exceed the keyword count).
    pub fn meta_slots(&self) -> usize {
        if self.variant.uses_meta() {
            self.k_m.min(self.c_key)
        } else {
            0
        }
    }

    /// Decoder width D + D_l.
    pub fn decoder_width(&self) -> usize {
        self.d + self.d_l
    }

    pub fn freq_after_cnn(&self) -> usize {
        match self.variant {
            Variant::Model5 => self.n_mels / 2,
            _ => self.n_mels / 8,
        }
    }

    /// T_a, the length of the audio embedding sequence.
    pub fn audio_steps(&self) -> usize {
        match self.variant {
            Variant::Model5 => {
                let t = self.frames / 2;
                t.div_ceil(2).div_ceil(2)
            }
            _ => self.frames / 8,
        }
    }

    /// Sequence length seen by the BLSTM encoder.
    pub fn encoder_steps(&self) -> usize {
        self.audio_steps() + 2 * self.meta_slots()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_l == 0 || self.l_max == 0 || self.n_steps < 2 || self.cnn_channels == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d % 2 != 0 {
            return bad(format!("D = {} must be even (BLSTM halves)", self.d));
        }
        if self.d % self.mhsa_heads != 0 {
            return bad(format!("D = {} not divisible by {} heads", self.d, self.mhsa_heads));
        }
        if self.n_mels % 8 != 0 || self.frames % 8 != 0 {
            return bad(format!("mel bins {} and frames {} must be divisible by 8", self.n_mels, self.frames));
        }
        if self.c_cap <= 4 || self.c_key == 0 {
            return bad(format!("vocabulary sizes not set (C_cap {}, C_key {})", self.c_cap, self.c_key));
        }
        if self.variant == Variant::Model6 && self.blstm_layers != 1 {
            return bad("Model6 uses exactly one BLSTM layer".into());
        }
        if self.blstm_layers == 0 {
            return bad("at least one BLSTM layer".into());
        }
        Ok(())
    }
}
