//! Model, sampler and training configuration, plus the flat key=value
//! config-file format. Unknown keys are hard errors: silent config drift
//! breaks reproducibility.

use std::collections::BTreeMap;

use crate::error::{CoreError, CoreResult};
use crate::vocab;

/// Selectable compute precision. 64-bit is the default for all tests and
/// gradient checks; 32-bit is an opt-in for training speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> CoreResult<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(CoreError::InvalidConfig {
                detail: format!("precision must be f32 or f64, got '{s}'"),
            }),
        }
    }
}

/// Structural hyperparameters of the model.
///
/// The reference scale is 4 encoder / 8 decoder / 4 song layers with hidden
/// size 1024, 16 heads, feed-forward 4096 and contexts 256/1500; the desk
/// defaults keep the 4:8:4 depth ratio at half depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DslmConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub song_layers: usize,
    pub d_h: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Max lyrics context (tokens).
    pub ctx_lyrics: usize,
    /// Max decoder context (tokens), shared by vocal/accomp/song streams.
    pub ctx_dec: usize,
    pub vocab_lyrics: usize,
    pub vocab_vocal: usize,
    pub vocab_accomp: usize,
    pub vocab_song: usize,
}

impl Default for DslmConfig {
    fn default() -> Self {
        DslmConfig {
            enc_layers: 2,
            dec_layers: 4,
            song_layers: 2,
            d_h: 64,
            heads: 4,
            d_ff: 256,
            ctx_lyrics: 64,
            ctx_dec: 256,
            vocab_lyrics: vocab::VOCAB_LYRICS,
            vocab_vocal: vocab::VOCAB_VOCAL,
            vocab_accomp: vocab::VOCAB_ACCOMP,
            vocab_song: vocab::VOCAB_SONG,
        }
    }
}

impl DslmConfig {
    /// 2-layer, d_h=16 model used by gradient checks and leakage tests.
    pub fn tiny() -> Self {
        DslmConfig {
            enc_layers: 1,
            dec_layers: 2,
            song_layers: 1,
            d_h: 16,
            heads: 2,
            d_ff: 32,
            ctx_lyrics: 32,
            ctx_dec: 96,
            ..DslmConfig::default()
        }
    }

    /// Per-head attention size.
    pub fn d_k(&self) -> usize {
        self.d_h / self.heads
    }

    /// Decoder output embedding size fed to the song decoder.
    pub fn d_e(&self) -> usize {
        self.d_h
    }

    pub fn validate(&self) -> CoreResult<()> {
        if self.d_h == 0 || self.heads == 0 || self.d_h % self.heads != 0 {
            return Err(CoreError::InvalidConfig {
                detail: format!("d_h {} must be divisible by heads {}", self.d_h, self.heads),
            });
        }
        for (name, v) in [
            ("vocab_lyrics", self.vocab_lyrics),
            ("vocab_vocal", self.vocab_vocal),
            ("vocab_accomp", self.vocab_accomp),
            ("vocab_song", self.vocab_song),
        ] {
            if v < vocab::NUM_SPECIALS {
                return Err(CoreError::InvalidConfig {
                    detail: format!("{name} {} smaller than the special-token count", v),
                });
            }
        }
        if self.dec_layers == 0 || self.enc_layers == 0 {
            return Err(CoreError::InvalidConfig {
                detail: "enc_layers and dec_layers must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Top-k sampling configuration. Defaults follow the reference inference
/// settings: k = 50, temperature = 0.9.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k: 50,
            temperature: 0.9,
            seed: 0,
        }
    }
}

/// Training configuration. Adam runs with beta1 = 0.9, beta2 = 0.98,
/// eps = 1e-9 and the warmup learning-rate schedule
/// lr = d_h^-0.5 * min(step^-0.5, step * warmup^-1.5).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: DslmConfig,
    /// Mixture weights over the three training tasks; the pre-determined
    /// task's weight is split equally between its accomp/vocal variants.
    pub w_song_from_lyrics: f64,
    pub w_predetermined: f64,
    pub w_editing: f64,
    pub steps: u64,
    pub batch: usize,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub ckpt_every: u64,
    pub precision: Precision,
    /// P(BR) within the song-from-lyrics task; None otherwise.
    pub br_prob: f64,
    /// P(lyrics replaced by the null-lyric token).
    pub lyric_dropout: f64,
    /// Input-token masking rate for the non-causal pre-determined stream.
    pub mask_rate: f64,
    /// Prompt prefixes are carved uniformly in [0, prompt_max_frac * T].
    pub prompt_max_frac: f64,
    /// Editing suffix spans are uniform in [edit_min_frac, edit_max_frac] * T.
    pub edit_min_frac: f64,
    pub edit_max_frac: f64,
    /// Optional global gradient-norm clip; 0 disables.
    pub clip_grad: f64,
    /// Sampling defaults recorded with the run.
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: DslmConfig::default(),
            w_song_from_lyrics: 1.0 / 3.0,
            w_predetermined: 1.0 / 3.0,
            w_editing: 1.0 / 3.0,
            steps: 2000,
            batch: 8,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            seed: 0,
            ckpt_every: 500,
            precision: Precision::F64,
            br_prob: 0.8,
            lyric_dropout: 0.2,
            mask_rate: 0.2,
            prompt_max_frac: 0.25,
            edit_min_frac: 0.10,
            edit_max_frac: 0.40,
            clip_grad: 0.0,
            top_k: 50,
            temperature: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> CoreResult<()> {
        self.model.validate()?;
        let ws = [self.w_song_from_lyrics, self.w_predetermined, self.w_editing];
        if ws.iter().any(|&w| w < 0.0) {
            return Err(CoreError::InvalidConfig {
                detail: "task mixture weights must be non-negative".into(),
            });
        }
        if ws.iter().sum::<f64>() <= 0.0 {
            return Err(CoreError::InvalidConfig {
                detail: "task mixture weights must not all be zero".into(),
            });
        }
        if self.warmup < 1 {
            return Err(CoreError::InvalidConfig {
                detail: "warmup must be at least 1".into(),
            });
        }
        for (name, v) in [
            ("br_prob", self.br_prob),
            ("lyric_dropout", self.lyric_dropout),
            ("mask_rate", self.mask_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::InvalidConfig {
                    detail: format!("{name} must be within [0, 1], got {v}"),
                });
            }
        }
        if self.batch == 0 {
            return Err(CoreError::InvalidConfig {
                detail: "batch must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Normalized task mixture (sums to 1).
    pub fn mixture(&self) -> [f64; 3] {
        let sum = self.w_song_from_lyrics + self.w_predetermined + self.w_editing;
        [
            self.w_song_from_lyrics / sum,
            self.w_predetermined / sum,
            self.w_editing / sum,
        ]
    }

    /// Render as the flat key=value config-file format.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("enc_layers", m.enc_layers.to_string());
        kv("dec_layers", m.dec_layers.to_string());
        kv("song_layers", m.song_layers.to_string());
        kv("d_h", m.d_h.to_string());
        kv("heads", m.heads.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("ctx_lyrics", m.ctx_lyrics.to_string());
        kv("ctx_dec", m.ctx_dec.to_string());
        kv("w_song_from_lyrics", fmt_f64(self.w_song_from_lyrics));
        kv("w_predetermined", fmt_f64(self.w_predetermined));
        kv("w_editing", fmt_f64(self.w_editing));
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("warmup", self.warmup.to_string());
        kv("beta1", fmt_f64(self.beta1));
        kv("beta2", fmt_f64(self.beta2));
        kv("eps", fmt_f64(self.eps));
        kv("seed", self.seed.to_string());
        kv("ckpt_every", self.ckpt_every.to_string());
        kv("precision", self.precision.name().to_string());
        kv("br_prob", fmt_f64(self.br_prob));
        kv("lyric_dropout", fmt_f64(self.lyric_dropout));
        kv("mask_rate", fmt_f64(self.mask_rate));
        kv("prompt_max_frac", fmt_f64(self.prompt_max_frac));
        kv("edit_min_frac", fmt_f64(self.edit_min_frac));
        kv("edit_max_frac", fmt_f64(self.edit_max_frac));
        kv("clip_grad", fmt_f64(self.clip_grad));
        kv("top_k", self.top_k.to_string());
        kv("temperature", fmt_f64(self.temperature));
        s
    }

    /// Parse the flat key=value format; unknown keys are rejected by name.
    pub fn from_kv(text: &str) -> CoreResult<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv_lines(text)? {
            let bad = |detail: String| CoreError::InvalidConfig { detail };
            macro_rules! num {
                ($t:ty) => {
                    v.parse::<$t>()
                        .map_err(|e| bad(format!("key '{k}': {e}")))?
                };
            }
            match k.as_str() {
                "enc_layers" => cfg.model.enc_layers = num!(usize),
                "dec_layers" => cfg.model.dec_layers = num!(usize),
                "song_layers" => cfg.model.song_layers = num!(usize),
                "d_h" => cfg.model.d_h = num!(usize),
                "heads" => cfg.model.heads = num!(usize),
                "d_ff" => cfg.model.d_ff = num!(usize),
                "ctx_lyrics" => cfg.model.ctx_lyrics = num!(usize),
                "ctx_dec" => cfg.model.ctx_dec = num!(usize),
                "w_song_from_lyrics" => cfg.w_song_from_lyrics = num!(f64),
                "w_predetermined" => cfg.w_predetermined = num!(f64),
                "w_editing" => cfg.w_editing = num!(f64),
                "steps" => cfg.steps = num!(u64),
                "batch" => cfg.batch = num!(usize),
                "warmup" => cfg.warmup = num!(u64),
                "beta1" => cfg.beta1 = num!(f64),
                "beta2" => cfg.beta2 = num!(f64),
                "eps" => cfg.eps = num!(f64),
                "seed" => cfg.seed = num!(u64),
                "ckpt_every" => cfg.ckpt_every = num!(u64),
                "precision" => cfg.precision = Precision::parse(&v)?,
                "br_prob" => cfg.br_prob = num!(f64),
                "lyric_dropout" => cfg.lyric_dropout = num!(f64),
                "mask_rate" => cfg.mask_rate = num!(f64),
                "prompt_max_frac" => cfg.prompt_max_frac = num!(f64),
                "edit_min_frac" => cfg.edit_min_frac = num!(f64),
                "edit_max_frac" => cfg.edit_max_frac = num!(f64),
                "clip_grad" => cfg.clip_grad = num!(f64),
                "top_k" => cfg.top_k = num!(usize),
                "temperature" => cfg.temperature = num!(f64),
                _ => return Err(CoreError::UnknownConfigKey { key: k }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v}")
}

/// Parse `key=value` lines; '#' starts a comment, blank lines are skipped.
pub fn parse_kv_lines(text: &str) -> CoreResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CoreError::Malformed {
                path: "<config>".into(),
                line: i + 1,
                detail: format!("expected key=value, got '{raw}'"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Ordered key=value map rendering used by run logs and reports.
pub fn render_kv(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Parse a report/manifest body into a map (later duplicates win).
pub fn parse_kv_map(text: &str) -> CoreResult<BTreeMap<String, String>> {
    Ok(parse_kv_lines(text)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_kv() {
        let cfg = TrainConfig::default();
        let text = cfg.to_kv();
        let back = TrainConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.top_k, 50);
        assert_eq!(back.temperature, 0.9);
        assert_eq!(back.beta1, 0.9);
        assert_eq!(back.beta2, 0.98);
        assert_eq!(back.eps, 1e-9);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_kv("bogus_key=3\n").unwrap_err();
        assert_eq!(
            err,
            CoreError::UnknownConfigKey {
                key: "bogus_key".into()
            }
        );
    }

    #[test]
    fn negative_mixture_weight_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.w_editing = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sampler_defaults() {
        let s = SamplerConfig::default();
        assert_eq!((s.k, s.temperature), (50, 0.9));
    }
}
