//! Structure-electron fusion: descriptor masking, the Mamba-Transformer
//! stack over concatenated descriptor and fragment tokens, the masked
//! reconstruction head, and the downstream prediction head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gssm::{mamba_inner, MambaBlockParams};
use crate::params::{visit_fields, visit_fields_mut, ParamGroup};
use crate::tensor::{ParamInit, Result, Tensor, TensorError};

/// Which descriptor rows are hidden during E-semantic pretraining.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub alpha_pct: f64,
}

impl MaskPlan {
    pub fn none(m: usize) -> MaskPlan {
        MaskPlan { mask: vec![false; m], alpha_pct: 0.0 }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Uniform subset mask of exactly round(alpha * m / 100) rows.
pub fn make_mask(alpha_pct: f64, m: usize, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    let k = (alpha_pct * m as f64 / 100.0).round() as usize;
    if k == 0 || k > m {
        return Err(TensorError::Invalid {
            op: "make_mask",
            msg: format!("mask ratio {alpha_pct}% of {m} rows yields {k} masked rows"),
        });
    }
    // partial Fisher-Yates: first k slots of a shuffled index array
    let mut idx: Vec<usize> = (0..m).collect();
    for i in 0..k {
        let j = rng.random_range(i..m);
        idx.swap(i, j);
    }
    let mut mask = vec![false; m];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    Ok(MaskPlan { mask, alpha_pct })
}

// ── Mamba-Transformer block ─────────────────────────────────────────────

pub struct AttnParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl ParamGroup for AttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; wq, bq, wk, bk, wv, bv, wo, bo);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; wq, bq, wk, bk, wv, bv, wo, bo);
    }
}

pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ParamGroup for FfnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; w1, b1, w2, b2);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; w1, b1, w2, b2);
    }
}

/// One fusion block: serial Mamba -> attention -> feed-forward, each
/// residual with pre-layernorm. The Mamba sub-block runs with a zero
/// graph gate (token sequences carry no molecular graph).
pub struct MtBlockParams {
    pub mamba: MambaBlockParams,
    pub attn: AttnParams,
    pub ffn: FfnParams,
    pub heads: usize,
}

impl MtBlockParams {
    pub fn new(
        init: &mut ParamInit,
        d: usize,
        d_hidden: usize,
        n_state: usize,
        conv_kernel: usize,
        heads: usize,
    ) -> Result<Self> {
        assert!(d % heads == 0, "model width must divide into heads");
        Ok(MtBlockParams {
            mamba: MambaBlockParams::new(init, d, d_hidden, n_state, conv_kernel)?,
            attn: AttnParams {
                wq: init.fan_in_uniform(&[d, d], d)?,
                bq: init.zeros(&[d])?,
                wk: init.fan_in_uniform(&[d, d], d)?,
                bk: init.zeros(&[d])?,
                wv: init.fan_in_uniform(&[d, d], d)?,
                bv: init.zeros(&[d])?,
                wo: init.fan_in_uniform(&[d, d], d)?,
                bo: init.zeros(&[d])?,
            },
            ffn: FfnParams {
                w1: init.fan_in_uniform(&[d, 4 * d], d)?,
                b1: init.zeros(&[4 * d])?,
                w2: init.fan_in_uniform(&[4 * d, d], 4 * d)?,
                b2: init.zeros(&[d])?,
            },
            heads,
        })
    }
}

impl ParamGroup for MtBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mamba.visit(&format!("{prefix}.mamba"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mamba.visit_mut(&format!("{prefix}.mamba"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

/// Full (non-causal) multi-head self-attention. Returns the output and
/// the per-head attention matrices (each row-stochastic).
pub fn attention(params: &AttnParams, heads: usize, u: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let d = u.shape()[1];
    let dk = d / heads;
    let q = u.matmul(&params.wq)?.add_row(&params.bq)?;
    let k = u.matmul(&params.wk)?.add_row(&params.bk)?;
    let v = u.matmul(&params.wv)?.add_row(&params.bv)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    let mut attn_matrices = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        let weights = scores.softmax_rows()?;
        head_outputs.push(weights.matmul(&vh)?);
        attn_matrices.push(weights);
    }
    let merged = Tensor::concat_cols(&head_outputs)?;
    let out = merged.matmul(&params.wo)?.add_row(&params.bo)?;
    Ok((out, attn_matrices))
}

/// One MT block: u += Mamba(LN(u)); u += Attn(LN(u)); u += FFN(LN(u)).
pub fn mt_block(params: &MtBlockParams, u: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let l = u.shape()[0];
    let zero_gate = vec![0.0; l];
    let u1 = u.add(&mamba_inner(&params.mamba, &u.layernorm_rows()?, &zero_gate)?)?;
    let (attn_out, attn_mats) = attention(&params.attn, params.heads, &u1.layernorm_rows()?)?;
    let u2 = u1.add(&attn_out)?;
    let ffn_in = u2.layernorm_rows()?;
    let ffn_out = ffn_in
        .matmul(&params.ffn.w1)?
        .add_row(&params.ffn.b1)?
        .silu()?
        .matmul(&params.ffn.w2)?
        .add_row(&params.ffn.b2)?;
    let u3 = u2.add(&ffn_out)?;
    Ok((u3, attn_mats))
}

/// Fuse descriptor tokens with fragment tokens: rows concatenate with
/// descriptors first, then the MT blocks run. `frag_tokens` may be absent
/// (descriptor-only path, unit tests).
pub fn mt_forward(
    blocks: &[MtBlockParams],
    descriptor_tokens: &Tensor,
    frag_tokens: Option<&Tensor>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut u = match frag_tokens {
        Some(ft) => Tensor::concat_rows(&[descriptor_tokens.clone(), ft.clone()])?,
        None => descriptor_tokens.clone(),
    };
    let mut all_attn = Vec::new();
    for block in blocks {
        let (next, mats) = mt_block(block, &u)?;
        u = next;
        all_attn.extend(mats);
    }
    Ok((u, all_attn))
}

// ── heads ────────────────────────────────────────────────────────────────

pub struct MlpHeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpHeadParams {
    pub fn new(init: &mut ParamInit, d: usize, out: usize) -> Result<Self> {
        Ok(MlpHeadParams {
            w1: init.fan_in_uniform(&[d, d], d)?,
            b1: init.zeros(&[d])?,
            w2: init.fan_in_uniform(&[d, out], d)?,
            b2: init.zeros(&[out])?,
        })
    }
}

impl ParamGroup for MlpHeadParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; w1, b1, w2, b2);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; w1, b1, w2, b2);
    }
}

/// Reconstruct descriptor tokens from the first M fused rows.
pub fn mask_head(params: &MlpHeadParams, fused: &Tensor, m: usize) -> Result<Tensor> {
    let desc_rows = fused.slice_rows(0, m)?;
    desc_rows
        .matmul(&params.w1)?
        .add_row(&params.b1)?
        .silu()?
        .matmul(&params.w2)?
        .add_row(&params.b2)
}

/// Masked reconstruction loss: mean over masked rows of the mean squared
/// channel error. Unmasked rows contribute nothing, exactly.
pub fn mask_reconstruction_loss(
    reconstruction: &Tensor,
    target: &Tensor,
    plan: &MaskPlan,
) -> Result<Tensor> {
    if plan.masked_count() == 0 {
        return Err(TensorError::Invalid {
            op: "mask_reconstruction_loss",
            msg: "mask selects no rows".into(),
        });
    }
    let diff = reconstruction.sub(target)?;
    let row_err = diff.mul(&diff)?.mean_axis1()?;
    let masked = row_err.gather_rows(&plan.masked_indices())?;
    masked.mean_all()
}

/// Downstream prediction head: mean-pool all fused rows, then a two-layer
/// MLP to one logit (or value) per task.
pub fn downstream_head(params: &MlpHeadParams, fused: &Tensor) -> Result<Tensor> {
    let pooled = fused.mean_axis0()?;
    pooled
        .matmul(&params.w1)?
        .add_row(&params.b1)?
        .silu()?
        .matmul(&params.w2)?
        .add_row(&params.b2)
}
