//! Model configuration and the flat, name-indexed parameter store.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::linalg::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    /// Width of the `x_t` and `x_ctx` projections.
    pub pitch_embed: usize,
    pub note_embed: usize,
    pub unvoiced_embed: usize,
    /// 72 pitched classes + REST.
    pub n_note_classes: usize,
    pub max_len: usize,
    pub rope_base: f64,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal flow-time encoding.
    pub time_freq_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-size configuration: 8 layers, 8 heads, 512 hidden, 1024 frames.
    pub fn full() -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            hidden: 512,
            pitch_embed: 512,
            note_embed: 256,
            unvoiced_embed: 64,
            n_note_classes: 73,
            max_len: 1024,
            rope_base: 10_000.0,
            mlp_ratio: 4,
            time_freq_dim: 256,
        }
    }

    /// Desk-scale model used for the style-following experiments.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            hidden: 128,
            pitch_embed: 128,
            note_embed: 64,
            unvoiced_embed: 16,
            max_len: 256,
            time_freq_dim: 64,
            ..Self::full()
        }
    }

    /// Smallest configuration, used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            hidden: 32,
            pitch_embed: 16,
            note_embed: 8,
            unvoiced_embed: 4,
            max_len: 64,
            time_freq_dim: 16,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden", self.hidden),
            ("pitch_embed", self.pitch_embed),
            ("note_embed", self.note_embed),
            ("unvoiced_embed", self.unvoiced_embed),
            ("n_note_classes", self.n_note_classes),
            ("max_len", self.max_len),
            ("mlp_ratio", self.mlp_ratio),
            ("time_freq_dim", self.time_freq_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model.{name} must be positive")));
        }
        if self.hidden % self.n_heads != 0 || (self.hidden / self.n_heads) % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} must split into {} heads of even width",
                self.hidden, self.n_heads
            )));
        }
        if self.time_freq_dim % 2 != 0 {
            return Err(Error::InvalidArgument("model.time_freq_dim must be even".into()));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::InvalidArgument("model.rope_base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    /// Width of the concatenated per-frame embedding.
    pub fn input_width(&self) -> usize {
        2 * self.pitch_embed + self.note_embed + self.unvoiced_embed
    }

    /// Row of the note table used when `y` is dropped.
    pub fn null_note(&self) -> usize {
        self.n_note_classes
    }
}

/// Name and shape of every parameter array, in storage order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden;
    let mut shapes: Vec<(String, Vec<usize>)> = vec![
        ("embed.xt.weight".into(), vec![1, cfg.pitch_embed]),
        ("embed.xt.bias".into(), vec![cfg.pitch_embed]),
        ("embed.ctx.weight".into(), vec![1, cfg.pitch_embed]),
        ("embed.ctx.bias".into(), vec![cfg.pitch_embed]),
        ("embed.ctx.null".into(), vec![cfg.pitch_embed]),
        // Last row is the null (dropped) note embedding.
        ("embed.note.table".into(), vec![cfg.n_note_classes + 1, cfg.note_embed]),
        // Rows: voiced, unvoiced, null.
        ("embed.unvoiced.table".into(), vec![3, cfg.unvoiced_embed]),
        ("embed.proj.weight".into(), vec![cfg.input_width(), h]),
        ("embed.proj.bias".into(), vec![h]),
        ("time.fc1.weight".into(), vec![cfg.time_freq_dim, h]),
        ("time.fc1.bias".into(), vec![h]),
        ("time.fc2.weight".into(), vec![h, h]),
        ("time.fc2.bias".into(), vec![h]),
        ("final.ada.weight".into(), vec![h, 2 * h]),
        ("final.ada.bias".into(), vec![2 * h]),
        ("final.head.weight".into(), vec![h, 1]),
        ("final.head.bias".into(), vec![1]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l:02}.{s}");
        shapes.extend([
            (p("ada.weight"), vec![h, 6 * h]),
            (p("ada.bias"), vec![6 * h]),
            (p("attn.qkv.weight"), vec![h, 3 * h]),
            (p("attn.qkv.bias"), vec![3 * h]),
            (p("attn.out.weight"), vec![h, h]),
            (p("attn.out.bias"), vec![h]),
            (p("mlp.fc1.weight"), vec![h, cfg.mlp_hidden()]),
            (p("mlp.fc1.bias"), vec![cfg.mlp_hidden()]),
            (p("mlp.fc2.weight"), vec![cfg.mlp_hidden(), h]),
            (p("mlp.fc2.bias"), vec![h]),
        ]);
    }
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    shapes
}

/// One named array inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct BlockOffsets {
    pub ada_w: Range<usize>,
    pub ada_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Offsets {
    pub xt_w: Range<usize>,
    pub xt_b: Range<usize>,
    pub ctx_w: Range<usize>,
    pub ctx_b: Range<usize>,
    pub ctx_null: Range<usize>,
    pub note_table: Range<usize>,
    pub unvoiced_table: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub time1_w: Range<usize>,
    pub time1_b: Range<usize>,
    pub time2_w: Range<usize>,
    pub time2_b: Range<usize>,
    pub blocks: Vec<BlockOffsets>,
    pub final_ada_w: Range<usize>,
    pub final_ada_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub off: Offsets,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let tensors: Vec<TensorSpec> = parameter_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let spec = TensorSpec {
                    name,
                    shape,
                    offset,
                    len,
                };
                offset += len;
                spec
            })
            .collect();
        let find = |name: &str| -> Range<usize> {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .unwrap_or_else(|| panic!("missing parameter {name}"));
            t.offset..t.offset + t.len
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let f = |s: &str| find(&format!("blocks.{l:02}.{s}"));
                BlockOffsets {
                    ada_w: f("ada.weight"),
                    ada_b: f("ada.bias"),
                    qkv_w: f("attn.qkv.weight"),
                    qkv_b: f("attn.qkv.bias"),
                    out_w: f("attn.out.weight"),
                    out_b: f("attn.out.bias"),
                    fc1_w: f("mlp.fc1.weight"),
                    fc1_b: f("mlp.fc1.bias"),
                    fc2_w: f("mlp.fc2.weight"),
                    fc2_b: f("mlp.fc2.bias"),
                }
            })
            .collect();
        let off = Offsets {
            xt_w: find("embed.xt.weight"),
            xt_b: find("embed.xt.bias"),
            ctx_w: find("embed.ctx.weight"),
            ctx_b: find("embed.ctx.bias"),
            ctx_null: find("embed.ctx.null"),
            note_table: find("embed.note.table"),
            unvoiced_table: find("embed.unvoiced.table"),
            proj_w: find("embed.proj.weight"),
            proj_b: find("embed.proj.bias"),
            time1_w: find("time.fc1.weight"),
            time1_b: find("time.fc1.bias"),
            time2_w: find("time.fc2.weight"),
            time2_b: find("time.fc2.bias"),
            blocks,
            final_ada_w: find("final.ada.weight"),
            final_ada_b: find("final.ada.bias"),
            head_w: find("final.head.weight"),
            head_b: find("final.head.bias"),
        };
        Self {
            tensors,
            off,
            total: offset,
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Exact number of scalar parameters.
pub fn param_count(cfg: &ModelConfig) -> usize {
    parameter_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// All network weights in one flat buffer addressed through [`Layout`].
#[derive(Debug, Clone)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let data = vec![T::zero(); layout.total];
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    /// Truncated-normal (σ = 0.02, cut at 2σ) weights and embeddings, zero
    /// biases, zero modulation projections.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let tensors = p.layout.tensors.clone();
        for t in &tensors {
            let zero = t.name.ends_with(".bias") || t.name.contains("ada.");
            if zero {
                continue;
            }
            for v in &mut p.data[t.offset..t.offset + t.len] {
                *v = T::lit(0.02 * truncated_normal(rng));
            }
        }
        Ok(p)
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .get(name)
            .map(|t| &self.data[t.offset..t.offset + t.len])
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    /// Closed-form count, written out term by term.
    fn analytic_count(c: &ModelConfig) -> usize {
        let (h, h1, h2, hu, f) = (c.hidden, c.pitch_embed, c.note_embed, c.unvoiced_embed, c.time_freq_dim);
        let r = c.mlp_ratio * h;
        let embed = 2 * (h1 + h1) + h1 + (c.n_note_classes + 1) * h2 + 3 * hu;
        let proj = (2 * h1 + h2 + hu) * h + h;
        let time = f * h + h + h * h + h;
        let block = (h * 6 * h + 6 * h) + (h * 3 * h + 3 * h) + (h * h + h) + (h * r + r) + (r * h + h);
        let fin = h * 2 * h + 2 * h + h + 1;
        embed + proj + time + c.n_layers * block + fin
    }

    #[test]
    fn count_matches_closed_form() {
        for cfg in [ModelConfig::tiny(), ModelConfig::toy(), ModelConfig::full()] {
            assert_eq!(param_count(&cfg), analytic_count(&cfg));
            assert_eq!(Layout::new(&cfg).total, param_count(&cfg));
        }
    }

    #[test]
    fn tiny_count_by_hand() {
        // h=32, h1=16, h2=8, hu=4, f=16, r=128, 2 layers:
        // embed 2*32 + 16 + 74*8 + 12 = 684; proj 44*32 + 32 = 1440;
        // time 16*32+32 + 32*32+32 = 1600; block 6336+3168+1056+4224+4128 = 18912;
        // final 2048+64+32+1 = 2145.
        assert_eq!(param_count(&ModelConfig::tiny()), 684 + 1440 + 1600 + 2 * 18912 + 2145);
    }

    #[test]
    fn doubling_layers_adds_blocks() {
        let base = ModelConfig::toy();
        let double = ModelConfig {
            n_layers: 2 * base.n_layers,
            ..base
        };
        let one_more = ModelConfig {
            n_layers: base.n_layers + 1,
            ..base
        };
        let block = param_count(&one_more) - param_count(&base);
        assert_eq!(param_count(&double) - param_count(&base), base.n_layers * block);
    }

    #[test]
    fn full_config_count_is_logged() {
        let n = param_count(&ModelConfig::full());
        println!("full-size configuration: {n} parameters ({:.1}M)", n as f64 / 1e6);
        assert!(n > 20_000_000 && n < 60_000_000);
    }

    #[test]
    fn init_is_deterministic_with_zero_modulation() {
        let a = Parameters::<f32>::init(ModelConfig::tiny(), &mut rng_from(1, &[])).unwrap();
        let b = Parameters::<f32>::init(ModelConfig::tiny(), &mut rng_from(1, &[])).unwrap();
        assert_eq!(a.data, b.data);
        for t in &a.layout.tensors {
            let vals = a.tensor(&t.name).unwrap();
            if t.name.contains("ada.") || t.name.ends_with(".bias") {
                assert!(vals.iter().all(|&v| v == 0.0), "{}", t.name);
            } else {
                assert!(vals.iter().all(|v| v.abs() <= 0.04), "{}", t.name);
                assert!(vals.iter().any(|&v| v != 0.0), "{}", t.name);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { hidden: 30, ..ModelConfig::tiny() }.validate().is_err());
        assert!(ModelConfig { n_layers: 0, ..ModelConfig::tiny() }.validate().is_err());
        ModelConfig::full().validate().unwrap();
    }
}
