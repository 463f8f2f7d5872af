use std::sync::Arc;

use rand::Rng;

use crate::env::{DYNAMIC_FEATURES, STATIC_FEATURES};
use crate::error::{Error, Result};

/// Architecture hyperparameters of the attention policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Logit clipping constant applied through `tanh`.
    pub clip: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            heads: 4,
            layers: 2,
            clip: 10.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument("embed_dim and heads must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "heads ({}) must divide embed_dim ({})",
                self.heads, self.embed_dim
            )));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::InvalidArgument("clip must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Width of the decoder context: graph mean, current node, dynamic features.
    pub fn context_dim(&self) -> usize {
        2 * self.embed_dim + DYNAMIC_FEATURES
    }

    pub fn layout(&self) -> Layout {
        let d = self.embed_dim;
        let mut entries = vec![
            ("embed.weight".to_string(), vec![STATIC_FEATURES, d]),
            ("embed.bias".to_string(), vec![d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("encoder.{l}.{s}");
            entries.extend([
                (p("attn.query"), vec![d, d]),
                (p("attn.key"), vec![d, d]),
                (p("attn.value"), vec![d, d]),
                (p("attn.out"), vec![d, d]),
                (p("norm1.scale"), vec![d]),
                (p("norm1.shift"), vec![d]),
                (p("ff1.weight"), vec![d, 2 * d]),
                (p("ff1.bias"), vec![2 * d]),
                (p("ff2.weight"), vec![2 * d, d]),
                (p("ff2.bias"), vec![d]),
                (p("norm2.scale"), vec![d]),
                (p("norm2.shift"), vec![d]),
            ]);
        }
        entries.push(("decoder.context".to_string(), vec![self.context_dim(), d]));
        entries.push(("decoder.key".to_string(), vec![d, d]));
        Layout::new(entries).expect("generated names are unique")
    }
}

/// Ordered named tensors over one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<(String, Vec<usize>)>,
    offsets: Vec<usize>,
    total_len: usize,
}

impl Layout {
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for (i, (name, shape)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(other, _)| other == name) {
                return Err(Error::InvalidArgument(format!("duplicate tensor name `{name}`")));
            }
            offsets.push(total);
            total += shape.iter().product::<usize>();
        }
        Ok(Self {
            entries,
            offsets,
            total_len: total,
        })
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Flat range of the named tensor.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let i = self.entries.iter().position(|(n, _)| n == name)?;
        let len: usize = self.entries[i].1.iter().product();
        Some(self.offsets[i]..self.offsets[i] + len)
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.entries
            .iter()
            .zip(&self.offsets)
            .map(|((_, s), &o)| o..o + s.iter().product::<usize>())
    }
}

/// Flat policy parameters; the unit exchanged between clients and server.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub arch: ArchConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let layout = Arc::new(arch.layout());
        let data = vec![0.0; layout.total_len()];
        Ok(Self { arch, layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            layout: Arc::clone(&self.layout),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                data.len(),
                self.data.len()
            )));
        }
        Ok(Self {
            arch: self.arch,
            layout: Arc::clone(&self.layout),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.arch != other.arch
            || !(Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout)
        {
            return Err(Error::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Uniform initialization in `[-1/sqrt(d), 1/sqrt(d)]`.
pub fn init_params<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<ParamVector> {
    let mut p = ParamVector::zeros(arch)?;
    let bound = 1.0 / (arch.embed_dim as f64).sqrt();
    for x in &mut p.data {
        *x = rng.gen_range(-bound..=bound);
    }
    Ok(p)
}

/// Start offsets of one encoder layer's tensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub n1_scale: usize,
    pub n1_shift: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub n2_scale: usize,
    pub n2_shift: usize,
}

/// Start offsets of every tensor, in the same order as [`ArchConfig::layout`].
#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub embed_w: usize,
    pub embed_b: usize,
    pub layers: Vec<LayerOffsets>,
    pub ctx_w: usize,
    pub key_w: usize,
}

impl Offsets {
    pub fn new(arch: &ArchConfig) -> Self {
        let d = arch.embed_dim;
        let mut at = 0;
        let mut take = |len: usize| {
            let o = at;
            at += len;
            o
        };
        let embed_w = take(STATIC_FEATURES * d);
        let embed_b = take(d);
        let layers = (0..arch.layers)
            .map(|_| LayerOffsets {
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                n1_scale: take(d),
                n1_shift: take(d),
                ff1_w: take(2 * d * d),
                ff1_b: take(2 * d),
                ff2_w: take(2 * d * d),
                ff2_b: take(d),
                n2_scale: take(d),
                n2_shift: take(d),
            })
            .collect();
        let ctx_w = take(arch.context_dim() * d);
        let key_w = take(d * d);
        Self {
            embed_w,
            embed_b,
            layers,
            ctx_w,
            key_w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Parameter count written out layer by layer.
    fn hand_count(d: usize, layers: usize) -> usize {
        let embed = 8 * d + d;
        let attention = 4 * d * d;
        let norms = 2 * (d + d);
        let ff = (d * 2 * d + 2 * d) + (2 * d * d + d);
        let decoder = (2 * d + 4) * d + d * d;
        embed + layers * (attention + norms + ff) + decoder
    }

    #[test]
    fn layout_matches_hand_count() {
        for (d, h, l) in [(32, 4, 2), (16, 2, 1), (8, 1, 3)] {
            let arch = ArchConfig {
                embed_dim: d,
                heads: h,
                layers: l,
                clip: 10.0,
            };
            let layout = arch.layout();
            assert_eq!(layout.total_len(), hand_count(d, l));
            let sum: usize = layout.entries().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(sum, layout.total_len());
            let off = Offsets::new(&arch);
            assert_eq!(layout.range("decoder.key").unwrap().start, off.key_w);
            assert_eq!(layout.range("encoder.0.ff2.bias").unwrap().start, off.layers[0].ff2_b);
        }
        assert_eq!(hand_count(32, 2), 20320);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = ArchConfig::default();
        let a = init_params(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_params(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / 32f64.sqrt();
        assert!(a.data.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn invalid_heads_rejected() {
        let arch = ArchConfig {
            embed_dim: 30,
            heads: 4,
            ..ArchConfig::default()
        };
        assert!(init_params(arch, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let e = vec![("a".to_string(), vec![2]), ("a".to_string(), vec![3])];
        assert!(Layout::new(e).is_err());
    }
}
