use crate::error::{Error, Result};
use crate::query::QueryConfig;
use std::fmt;
use std::str::FromStr;

macro_rules! flag_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($name).to_lowercase()
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }
    };
}

flag_enum!(
    /// How reference points are produced.
    Strategy { Fixed => "fixed", GlobalLearnable => "global_learnable", PolygonPredict => "polygon_predict" }
);
flag_enum!(
    Stream { Single => "single", Dual => "dual" }
);
flag_enum!(
    /// Query update between decoder layers.
    Fusion { None => "none", Partial => "partial", Full => "full" }
);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub query: QueryConfig,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// FFN hidden width as a multiple of its input width.
    pub ffn_mult: usize,
    pub patch: usize,
    pub canvas: usize,
    pub n_classes: usize,
    /// Frequencies `π·2^k`, `k < n_freqs`, for sinusoidal encodings.
    pub n_freqs: usize,
    pub strategy: Strategy,
    pub stream: Stream,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            query: QueryConfig::default(),
            heads: 4,
            enc_layers: 2,
            dec_layers: 6,
            ffn_mult: 4,
            patch: 8,
            canvas: 64,
            n_classes: 5,
            n_freqs: 6,
            strategy: Strategy::PolygonPredict,
            stream: Stream::Dual,
            fusion: Fusion::Full,
        }
    }
}

impl ModelConfig {
    /// Smallest useful dimensions: d=8, 16 tokens, 4 queries.
    pub fn toy() -> Self {
        Self {
            query: QueryConfig {
                d_f: 4,
                d_app: 4,
                d_pos: 4,
                cap_app: 1,
                cap_pos: 1,
                n_random: 2,
                vertices: 4,
                ..QueryConfig::default()
            },
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            ffn_mult: 2,
            patch: 4,
            canvas: 16,
            n_classes: 2,
            n_freqs: 2,
            ..Self::default()
        }
    }

    pub fn d(&self) -> usize {
        self.query.d()
    }

    /// Channels of the stub image grid: class one-hot plus boundary flag.
    pub fn in_channels(&self) -> usize {
        self.n_classes + 1
    }

    pub fn tokens(&self) -> usize {
        (self.canvas / self.patch).pow(2)
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.n_freqs).map(|k| std::f64::consts::PI * 2f64.powi(k as i32)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let q = &self.query;
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || q.d_app % self.heads != 0 || q.d_pos % self.heads != 0 {
            return bad(format!(
                "d_app ({}) and d_pos ({}) must both be divisible by heads ({})",
                q.d_app, q.d_pos, self.heads
            ));
        }
        if self.patch == 0 || self.canvas % self.patch != 0 {
            return bad(format!("canvas {} not divisible by patch {}", self.canvas, self.patch));
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be positive".into());
        }
        if q.n_queries() == 0 {
            return bad("at least one query type must be enabled".into());
        }
        if q.vertices < 3 {
            return bad("vertices must be at least 3".into());
        }
        if self.n_freqs == 0 || self.n_classes == 0 {
            return bad("n_freqs and n_classes must be positive".into());
        }
        Ok(())
    }
}
