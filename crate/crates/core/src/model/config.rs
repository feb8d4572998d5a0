use std::fmt;
use std::str::FromStr;

use crate::autodiff::DEFAULT_GN_EPSILON;
use crate::error::{config, Error, Result};

/// Exact positive rational multiplier applied to every layer width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelScale {
    num: u64,
    den: u64,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl ChannelScale {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return config(format!("channel scale {num}/{den} must be positive"));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn one() -> Self {
        Self { num: 1, den: 1 }
    }

    /// Scaled width, or `None` when it is not a positive integer.
    pub fn apply(self, width: usize) -> Option<usize> {
        let scaled = width as u64 * self.num;
        (scaled % self.den == 0 && scaled / self.den > 0).then(|| (scaled / self.den) as usize)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for ChannelScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for ChannelScale {
    type Err = Error;

    /// Accepts `a/b`, an integer, or a finite decimal such as `0.125`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid channel scale `{s}`"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Self::new(int * den + frac_val, den)
    }
}

/// Architecture hyperparameters of the counting network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Multiplier on the reference widths (VGG stem 64/128/256/512).
    pub channel_scale: ChannelScale,
    /// 3 for RGB input, 1 for grayscale.
    pub input_channels: usize,
    /// Dilation of the 3×3 convolution in each of the three branches.
    pub dilations: [usize; 3],
    pub gn_epsilon: f64,
    /// Standard deviation of the Gaussian initialization outside the stem.
    pub init_scale: f64,
    /// Largest `H·W` accepted by a self-attention block.
    pub attention_cap: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channel_scale: ChannelScale::one(),
            input_channels: 3,
            dilations: [1, 2, 3],
            gn_epsilon: DEFAULT_GN_EPSILON,
            init_scale: 0.01,
            attention_cap: 4096,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration with widths shrunk by `1/divisor`.
    pub fn scaled(divisor: u64) -> Self {
        Self {
            channel_scale: ChannelScale::new(1, divisor).expect("positive divisor"),
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Parses the `key = value` text form; `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line_no = i as u64 + 1;
            let parse_err = |msg: String| Error::Parse { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad_value = || parse_err(format!("invalid value `{value}` for `{key}`"));
            match key {
                "channel_scale" => cfg.channel_scale = value.parse().map_err(|e: Error| parse_err(e.to_string()))?,
                "input_channels" => cfg.input_channels = value.parse().map_err(|_| bad_value())?,
                "dilations" => {
                    let parts: Vec<usize> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad_value())?;
                    cfg.dilations = parts
                        .try_into()
                        .map_err(|_| parse_err("dilations needs exactly three values".into()))?;
                }
                "gn_epsilon" => cfg.gn_epsilon = value.parse().map_err(|_| bad_value())?,
                "init_scale" => cfg.init_scale = value.parse().map_err(|_| bad_value())?,
                "attention_cap" => cfg.attention_cap = value.parse().map_err(|_| bad_value())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad_value())?,
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "channel_scale = {}\ninput_channels = {}\ndilations = {},{},{}\ngn_epsilon = {:e}\ninit_scale = {}\nattention_cap = {}\nseed = {}\n",
            self.channel_scale,
            self.input_channels,
            self.dilations[0],
            self.dilations[1],
            self.dilations[2],
            self.gn_epsilon,
            self.init_scale,
            self.attention_cap,
            self.seed
        )
    }
}
