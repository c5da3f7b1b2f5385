use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineNoAux,
    BaselineAux,
    World,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaselineNoAux,
        Variant::BaselineAux,
        Variant::World,
        Variant::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BaselineNoAux => "baseline_no_aux",
            Variant::BaselineAux => "baseline_aux",
            Variant::World => "world",
            Variant::Both => "both",
        }
    }

    pub fn has_aux(self) -> bool {
        self != Variant::BaselineNoAux
    }

    /// Whether target scores are computed before decoding and can reweight
    /// the world features the decoder sees.
    pub fn predicts_first(self) -> bool {
        matches!(self, Variant::World | Variant::Both)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    On,
    Ablated,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::On => "on",
            Weighting::Ablated => "ablated",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(Weighting::On),
            "ablated" => Ok(Weighting::Ablated),
            _ => Err(ModelError::Config(format!("unknown weighting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub encoder: f64,
    pub decoder: f64,
    pub cnn: f64,
}

impl Dropout {
    pub const NONE: Dropout = Dropout {
        encoder: 0.0,
        decoder: 0.0,
        cnn: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub command_vocab: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    /// Feature maps per kernel size.
    pub c_out: usize,
    pub kernel_sizes: [usize; 3],
    pub dropout: Dropout,
    pub variant: Variant,
    pub weighting: Weighting,
    pub aux_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Micro,
    Full,
}

impl FromStr for Profile {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro" => Ok(Profile::Micro),
            "full" => Ok(Profile::Full),
            _ => Err(ModelError::Config(format!("unknown profile {s:?}"))),
        }
    }
}

impl ModelConfig {
    /// Full-size defaults: embedding 25, hidden 100/100, 50 maps per kernel.
    pub fn full(d: usize, command_vocab: usize, variant: Variant, weighting: Weighting) -> Self {
        Self {
            d,
            command_vocab,
            embedding_dim: 25,
            encoder_hidden: 100,
            decoder_hidden: 100,
            c_out: 50,
            kernel_sizes: [1, 5, 7],
            dropout: Dropout::NONE,
            variant,
            weighting,
            aux_weight: 0.3,
        }
    }

    /// Every width of [`ModelConfig::full`] divided by four (rounded down).
    pub fn micro(d: usize, command_vocab: usize, variant: Variant, weighting: Weighting) -> Self {
        Self {
            embedding_dim: 6,
            encoder_hidden: 25,
            decoder_hidden: 25,
            c_out: 12,
            ..Self::full(d, command_vocab, variant, weighting)
        }
    }

    pub fn for_profile(
        profile: Profile,
        d: usize,
        command_vocab: usize,
        variant: Variant,
        weighting: Weighting,
    ) -> Self {
        match profile {
            Profile::Micro => Self::micro(d, command_vocab, variant, weighting),
            Profile::Full => Self::full(d, command_vocab, variant, weighting),
        }
    }

    /// Width of one world-feature row.
    pub fn cell_features(&self) -> usize {
        3 * self.c_out
    }

    pub fn cells(&self) -> usize {
        self.d * self.d
    }

    /// Length of the vector fed to the target-prediction layer:
    /// every weighted cell row plus the command summary.
    pub fn aux_input_len(&self) -> usize {
        self.cells() * self.cell_features() + self.encoder_hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.weighting == Weighting::On && !self.variant.predicts_first() {
            return bad(format!(
                "weighting=on requires variant world or both, got {}",
                self.variant
            ));
        }
        if !(0.0..=1.0).contains(&self.aux_weight) {
            return bad(format!("aux_weight {} outside [0, 1]", self.aux_weight));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| *k % 2 == 0) {
            return bad(format!("kernel size {k} is even"));
        }
        for (name, rate) in [
            ("encoder", self.dropout.encoder),
            ("decoder", self.dropout.decoder),
            ("cnn", self.dropout.cnn),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("{name} dropout {rate} outside [0, 1)"));
            }
        }
        if self.d == 0
            || self.command_vocab == 0
            || self.embedding_dim == 0
            || self.encoder_hidden == 0
        {
            return bad("dimensions must be positive".into());
        }
        if self.decoder_hidden == 0 || self.c_out == 0 {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }
}
