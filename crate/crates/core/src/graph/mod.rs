//! Operator-graph IR for the original and lowered dialects, the DeiT
//! builder, and the FP32 reference interpreter.

mod deit;
mod init;
mod interp;
mod ir;
mod validate;

pub use deit::{build_deit, build_deit_batched, param_count};
pub use init::random_checkpoint;
pub(crate) use interp::run_graph;
pub use interp::{eval_float_node, execute, execute_observed, execute_with_stats, ExecStats};
pub use ir::{Arity, Dialect, Edge, Graph, GraphBuilder, Layout, Op, OpNode};
pub use validate::{validate, Diagnostic, DiagnosticKind};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Custom,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Custom => "custom",
        }
    }
}

/// DeiT hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch: usize,
    pub img_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub mlp_ratio: f32,
    pub distilled: bool,
    pub num_classes: usize,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_in_channels() -> usize {
    3
}

fn default_eps() -> f32 {
    1e-6
}

impl ModelConfig {
    fn standard(variant: Variant, embed_dim: usize, heads: usize) -> Self {
        ModelConfig {
            variant,
            embed_dim,
            heads,
            depth: 12,
            patch: 16,
            img_size: 224,
            in_channels: 3,
            mlp_ratio: 4.0,
            distilled: false,
            num_classes: 1000,
            eps: default_eps(),
        }
    }

    pub fn tiny() -> Self {
        Self::standard(Variant::Tiny, 192, 3)
    }

    pub fn small() -> Self {
        Self::standard(Variant::Small, 384, 6)
    }

    pub fn base() -> Self {
        Self::standard(Variant::Base, 768, 12)
    }

    /// Desk-scale model: embed 64, 2 heads, depth 2, 4×4 patches on 8×8
    /// images, 10 classes.
    pub fn toy() -> Self {
        ModelConfig {
            variant: Variant::Custom,
            embed_dim: 64,
            heads: 2,
            depth: 2,
            patch: 4,
            img_size: 8,
            in_channels: 3,
            mlp_ratio: 4.0,
            distilled: false,
            num_classes: 10,
            eps: default_eps(),
        }
    }

    pub fn distilled(mut self) -> Self {
        self.distilled = true;
        self
    }

    /// `toy`, `tiny`, `small`, `base`, optionally suffixed `-distilled`.
    pub fn preset(name: &str) -> Result<Self> {
        let (base, distilled) = match name.strip_suffix("-distilled") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let mut cfg = match base {
            "toy" => Self::toy(),
            "tiny" => Self::tiny(),
            "small" => Self::small(),
            "base" => Self::base(),
            other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
        };
        cfg.distilled = distilled;
        Ok(cfg)
    }

    /// A preset name, or a path to a JSON-encoded config.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Ok(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let path = Path::new(spec);
        if path.exists() {
            let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            cfg.check()?;
            return Ok(cfg);
        }
        Err(Error::Config(format!(
            "`{spec}` is neither a preset (toy, tiny, small, base) nor a config file"
        )))
    }

    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if [
            self.embed_dim,
            self.heads,
            self.depth,
            self.patch,
            self.img_size,
            self.in_channels,
        ]
        .contains(&0)
            || self.num_classes == 0
        {
            return fail(format!("config has a zero dimension: {self:?}"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !self.img_size.is_multiple_of(self.patch) {
            return fail(format!(
                "img_size {} not divisible by patch {}",
                self.img_size, self.patch
            ));
        }
        let hidden = self.embed_dim as f64 * self.mlp_ratio as f64;
        if !(hidden >= 1.0) || hidden.fract() != 0.0 {
            return fail(format!(
                "mlp_ratio {} gives a non-integer hidden width",
                self.mlp_ratio
            ));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Learned tokens prepended to the patch tokens.
    pub fn extra_tokens(&self) -> usize {
        1 + usize::from(self.distilled)
    }

    /// Sequence length N.
    pub fn tokens(&self) -> usize {
        self.patches() + self.extra_tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio as f64) as usize
    }

    /// Short display name, e.g. `tiny-distilled`.
    pub fn label(&self) -> String {
        let mut plain = self.clone();
        plain.distilled = false;
        let base = if plain == Self::toy() {
            "toy"
        } else {
            self.variant.name()
        };
        if self.distilled {
            format!("{base}-distilled")
        } else {
            base.to_string()
        }
    }
}
