//! Image encoders: single-view (SV), aligned multi-view (AMV) and
//! unaligned multi-view (UMV).
//!
//! SV and AMV share one pipeline: an input projection to width d followed by
//! L self-attention blocks. AMV only differs in feeding the column
//! concatenation of the aligned views. UMV projects every view separately,
//! then each block lets the primary view query every other view and sums
//! the attended results into the primary features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    add_norm, ffn, multi_head, AttentionConfig, AttentionRole, FfnParams, LayerNormParams,
    Linear, MhaParams,
};
use crate::error::{Error, Result};
use crate::features::{key_mask, FeatureViews};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Sv,
    Amv,
    Umv,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sv" => Ok(EncoderKind::Sv),
            "amv" => Ok(EncoderKind::Amv),
            "umv" => Ok(EncoderKind::Umv),
            other => Err(Error::Config(format!("unknown encoder variant `{other}`"))),
        }
    }
}

/// Attended object features `X^L` (m × d) plus the object mask of the
/// primary view.
pub struct EncoderOutput {
    pub features: Var,
    pub mask: Option<Vec<bool>>,
}

/// Self-attention block: AddNorm(MHA(X, X, X)) then AddNorm(FFN).
#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionBlock {
    pub attn: MhaParams,
    pub ln_attn: LayerNormParams,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

impl SelfAttentionBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        Ok(SelfAttentionBlock {
            attn: MhaParams::new(store, rng, &format!("{name}.sa"), d, cfg.heads, cfg.use_bias)?,
            ln_attn: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            ffn: FfnParams::new(store, rng, &format!("{name}.ffn"), d, d_ff, cfg.use_bias)?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln2"), d),
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &AttentionConfig,
        x: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let a = multi_head(tape, &self.attn, cfg, x, x, x, mask)?;
        let x = add_norm(tape, &self.ln_attn, cfg, x, a)?;
        let f = ffn(tape, &self.ffn, cfg, x)?;
        add_norm(tape, &self.ln_ffn, cfg, x, f)
    }
}

/// One fusion block of the unaligned multi-view encoder.
#[derive(Clone, Debug)]
pub struct UmvBlock {
    /// One guided-attention module per secondary view.
    pub guided: Vec<MhaParams>,
    pub ln_sum: LayerNormParams,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
}

impl UmvBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        secondary: usize,
        d: usize,
        d_ff: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let guided = (0..secondary)
            .map(|i| MhaParams::new(store, rng, &format!("{name}.ga{i}"), d, cfg.heads, cfg.use_bias))
            .collect::<Result<Vec<_>>>()?;
        Ok(UmvBlock {
            guided,
            ln_sum: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            ffn: FfnParams::new(store, rng, &format!("{name}.ffn"), d, d_ff, cfg.use_bias)?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln2"), d),
        })
    }

    /// `F̃₁ = F₁ + Σᵢ MHAᵢ(F₁, Fᵢ, Fᵢ)`, layer-normalised, then an add-norm
    /// wrapped FFN. `others[i]` pairs a secondary view's features with its
    /// optional object mask.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &AttentionConfig,
        block: usize,
        primary: Var,
        others: &[(Var, Option<&[bool]>)],
    ) -> Result<Var> {
        if others.len() != self.guided.len() {
            return Err(Error::Config(format!(
                "UMV block has {} guided modules but received {} secondary views",
                self.guided.len(),
                others.len()
            )));
        }
        let m1 = tape.shape(primary)[0];
        let mut fused = primary;
        for (i, ((f, mask), p)) in others.iter().zip(&self.guided).enumerate() {
            let km = mask.map(|m| key_mask::<T>(m1, m));
            tape.set_view_attention_context(AttentionRole::MultiViewGuided, block, i + 1);
            let attended = multi_head(tape, p, cfg, primary, *f, *f, km.as_ref())?;
            fused = tape.add(fused, attended)?;
        }
        let x = self.ln_sum.forward(tape, fused, cfg.ln_eps)?;
        let f = ffn(tape, &self.ffn, cfg, x)?;
        add_norm(tape, &self.ln_ffn, cfg, x, f)
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBlocks {
    SelfAttention(Vec<SelfAttentionBlock>),
    MultiView(Vec<UmvBlock>),
}

/// Encoder parameters for any variant.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub kind: EncoderKind,
    /// SV/AMV: a single projection; UMV: one per view, in view order.
    pub input_proj: Vec<Linear>,
    pub blocks: EncoderBlocks,
    pub view_dims: Vec<usize>,
    pub primary_view: usize,
}

impl ImageEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        kind: EncoderKind,
        view_dims: &[usize],
        primary_view: usize,
        d: usize,
        d_ff: usize,
        layers: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if view_dims.is_empty() || view_dims.contains(&0) {
            return Err(Error::Config(format!("invalid view widths {view_dims:?}")));
        }
        if primary_view >= view_dims.len() {
            return Err(Error::Config(format!(
                "primary view {primary_view} out of range for {} views",
                view_dims.len()
            )));
        }
        let (input_proj, blocks) = match kind {
            EncoderKind::Sv | EncoderKind::Amv => {
                if kind == EncoderKind::Sv && view_dims.len() != 1 {
                    return Err(Error::Config(format!(
                        "single-view encoder takes one view, got {}",
                        view_dims.len()
                    )));
                }
                let d_x: usize = view_dims.iter().sum();
                let proj = Linear::new(store, rng, "enc.proj", d_x, d, cfg.use_bias);
                let blocks = (0..layers)
                    .map(|l| SelfAttentionBlock::new(store, rng, &format!("enc.block{l}"), d, d_ff, cfg))
                    .collect::<Result<Vec<_>>>()?;
                (vec![proj], EncoderBlocks::SelfAttention(blocks))
            }
            EncoderKind::Umv => {
                let projs = view_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &di)| Linear::new(store, rng, &format!("enc.proj{i}"), di, d, cfg.use_bias))
                    .collect();
                let blocks = (0..layers)
                    .map(|l| {
                        UmvBlock::new(store, rng, &format!("enc.umv{l}"), view_dims.len() - 1, d, d_ff, cfg)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (projs, EncoderBlocks::MultiView(blocks))
            }
        };
        Ok(ImageEncoder {
            kind,
            input_proj,
            blocks,
            view_dims: view_dims.to_vec(),
            primary_view,
        })
    }

    pub fn num_blocks(&self) -> usize {
        match &self.blocks {
            EncoderBlocks::SelfAttention(b) => b.len(),
            EncoderBlocks::MultiView(b) => b.len(),
        }
    }

    fn check_widths<T: Real>(&self, views: &FeatureViews<T>) -> Result<()> {
        if views.num_views() != self.view_dims.len() {
            return Err(Error::Config(format!(
                "encoder expects {} views, got {}",
                self.view_dims.len(),
                views.num_views()
            )));
        }
        for (i, (&want, got)) in self.view_dims.iter().zip(views.widths()).enumerate() {
            if want != got {
                return Err(Error::Config(format!(
                    "view {i} has feature width {got}, model expects {want}"
                )));
            }
        }
        Ok(())
    }

    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &AttentionConfig,
        views: &FeatureViews<T>,
    ) -> Result<EncoderOutput> {
        self.check_widths(views)?;
        match &self.blocks {
            EncoderBlocks::SelfAttention(blocks) => {
                let (x, mask) = match self.kind {
                    EncoderKind::Amv => (amv_concat(views)?, views.mask(0).map(<[bool]>::to_vec)),
                    _ => (views.view(0).clone(), views.mask(0).map(<[bool]>::to_vec)),
                };
                let x = tape.constant(x);
                let x0 = self.input_proj[0].forward(tape, x)?;
                let features = sv_encode(tape, cfg, blocks, x0, mask.as_deref())?;
                Ok(EncoderOutput { features, mask })
            }
            EncoderBlocks::MultiView(blocks) => {
                let projected = views
                    .views()
                    .iter()
                    .zip(&self.input_proj)
                    .map(|(v, proj)| {
                        let x = tape.constant(v.clone());
                        proj.forward(tape, x)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let p = self.primary_view;
                let others: Vec<(Var, Option<&[bool]>)> = (0..views.num_views())
                    .filter(|&i| i != p)
                    .map(|i| (projected[i], views.mask(i)))
                    .collect();
                let features = umv_encode(tape, cfg, blocks, projected[p], &others)?;
                Ok(EncoderOutput {
                    features,
                    mask: views.mask(p).map(<[bool]>::to_vec),
                })
            }
        }
    }
}

/// Column concatenation of aligned views, in view order.
pub fn amv_concat<T: Real>(views: &FeatureViews<T>) -> Result<Tensor<T>> {
    if !views.aligned() {
        return Err(Error::UnalignedViews);
    }
    let parts: Vec<&Tensor<T>> = views.views().iter().collect();
    Tensor::concat_cols(&parts)
}

/// L self-attention blocks applied recursively to X^(0).
pub fn sv_encode<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &AttentionConfig,
    blocks: &[SelfAttentionBlock],
    x0: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::Config("encoder needs at least one block".into()));
    }
    let m = tape.shape(x0)[0];
    let km = mask.map(|mk| key_mask::<T>(m, mk));
    let mut x = x0;
    for (l, block) in blocks.iter().enumerate() {
        tape.set_attention_context(AttentionRole::EncoderSelf, l);
        x = block.forward(tape, cfg, x, km.as_ref())?;
    }
    Ok(x)
}

/// Stacked UMV blocks; secondary views stay fixed while the primary view's
/// features are refined block by block.
pub fn umv_encode<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &AttentionConfig,
    blocks: &[UmvBlock],
    primary: Var,
    others: &[(Var, Option<&[bool]>)],
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::Config("encoder needs at least one block".into()));
    }
    let mut x = primary;
    for (l, block) in blocks.iter().enumerate() {
        x = block.forward(tape, cfg, l, x, others)?;
    }
    Ok(x)
}
