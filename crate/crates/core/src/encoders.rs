//! The three input encoders: fragment-graph GIN, atom-level
//! continuous-filter encoder, and the descriptor (electronic) encoder.

use crate::fragmenter::FragmentGraph;
use crate::molgraph::{EDescriptorVector, GraphMatrices, Molecule, DESCRIPTOR_COUNT};
use crate::params::{visit_fields, visit_fields_mut, ParamGroup};
use crate::tensor::{ParamInit, Result, Tensor, TensorError};

/// Outputs consumed by the structure and fusion stages: per-fragment
/// features (h x d), per-atom features (l x d), descriptor tokens (M x d).
pub struct EncoderOutputs {
    pub frag_features: Tensor,
    pub atom_features: Tensor,
    pub descriptor_tokens: Tensor,
}

// ── fragment-level GIN ──────────────────────────────────────────────────

pub struct GinLayer {
    pub eps: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ParamGroup for GinLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; eps, w1, b1, w2, b2);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; eps, w1, b1, w2, b2);
    }
}

pub struct GnnFParams {
    pub embed: Tensor,
    pub layers: Vec<GinLayer>,
}

impl GnnFParams {
    pub fn new(init: &mut ParamInit, vocab_size: usize, d: usize, depth: usize) -> Result<Self> {
        let embed = init.fan_in_uniform(&[vocab_size, d], d)?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            layers.push(GinLayer {
                eps: init.zeros(&[1])?,
                w1: init.fan_in_uniform(&[d, d], d)?,
                b1: init.zeros(&[d])?,
                w2: init.fan_in_uniform(&[d, d], d)?,
                b2: init.zeros(&[d])?,
            });
        }
        Ok(GnnFParams { embed, layers })
    }
}

impl ParamGroup for GnnFParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; embed);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layers.{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layers.{i}"), f);
        }
    }
}

/// Fragment encoder: embedded vocabulary ids, layer norm, then GIN layers
/// h_i <- MLP((1 + eps) h_i + sum of neighbor features).
pub fn gnn_f_forward(
    params: &GnnFParams,
    frag_graph: &FragmentGraph,
    vocab_ids: &[usize],
) -> Result<Tensor> {
    let rows = params.embed.shape()[0];
    if let Some(&bad) = vocab_ids.iter().find(|&&id| id >= rows) {
        return Err(TensorError::Invalid {
            op: "gnn_f_forward",
            msg: format!("vocabulary id {bad} outside embedding table of {rows} rows"),
        });
    }
    let h = frag_graph.h;
    let mut adj = vec![0.0; h * h];
    for &(i, j) in &frag_graph.edges {
        adj[i * h + j] = 1.0;
        adj[j * h + i] = 1.0;
    }
    let adj = Tensor::constant(&[h, h], adj)?;
    let mut x = params.embed.gather_rows(vocab_ids)?.layernorm_rows()?;
    for layer in &params.layers {
        let neighbor_sum = adj.matmul(&x)?;
        let scaled_self = x.mul_scalar_t(&layer.eps.add_const(1.0)?)?;
        let agg = scaled_self.add(&neighbor_sum)?;
        let hidden = agg.matmul(&layer.w1)?.add_row(&layer.b1)?.silu()?;
        x = hidden.matmul(&layer.w2)?.add_row(&layer.b2)?;
    }
    Ok(x)
}

// ── atom-level continuous-filter encoder ───────────────────────────────

pub struct SchnetLayer {
    pub filt_w1: Tensor,
    pub filt_b1: Tensor,
    pub filt_w2: Tensor,
    pub filt_b2: Tensor,
    pub upd_w1: Tensor,
    pub upd_b1: Tensor,
    pub upd_w2: Tensor,
    pub upd_b2: Tensor,
}

impl ParamGroup for SchnetLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; filt_w1, filt_b1, filt_w2, filt_b2, upd_w1, upd_b1, upd_w2, upd_b2);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; filt_w1, filt_b1, filt_w2, filt_b2, upd_w1, upd_b1, upd_w2, upd_b2);
    }
}

pub struct GnnAParams {
    pub embed: Tensor,
    pub layers: Vec<SchnetLayer>,
    pub rbf_count: usize,
    pub rbf_cutoff: f64,
}

impl GnnAParams {
    pub fn new(
        init: &mut ParamInit,
        d: usize,
        depth: usize,
        rbf_count: usize,
        rbf_cutoff: f64,
    ) -> Result<Self> {
        // element table indexed directly by element number, 1..=118
        let embed = init.fan_in_uniform(&[119, d], d)?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            layers.push(SchnetLayer {
                filt_w1: init.fan_in_uniform(&[rbf_count, d], rbf_count)?,
                filt_b1: init.zeros(&[d])?,
                filt_w2: init.fan_in_uniform(&[d, d], d)?,
                filt_b2: init.zeros(&[d])?,
                upd_w1: init.fan_in_uniform(&[d, d], d)?,
                upd_b1: init.zeros(&[d])?,
                upd_w2: init.fan_in_uniform(&[d, d], d)?,
                upd_b2: init.zeros(&[d])?,
            });
        }
        Ok(GnnAParams { embed, layers, rbf_count, rbf_cutoff })
    }
}

impl ParamGroup for GnnAParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; embed);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.layers.{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; embed);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.layers.{i}"), f);
        }
    }
}

/// Gaussian radial basis expansion: `count` centers evenly spaced on
/// [0, cutoff], width equal to the center spacing.
pub fn rbf_expand(distance: f64, count: usize, cutoff: f64) -> Vec<f64> {
    let spacing = cutoff / (count - 1) as f64;
    (0..count)
        .map(|k| {
            let c = k as f64 * spacing;
            (-(distance - c) * (distance - c) / (2.0 * spacing * spacing)).exp()
        })
        .collect()
}

/// Atom encoder: element embeddings, layer norm, then continuous-filter
/// message layers m_i = sum_j h_j (*) W(rbf(d_ij)) with a residual MLP
/// update.
pub fn gnn_a_forward(
    params: &GnnAParams,
    mol: &Molecule,
    matrices: &GraphMatrices,
) -> Result<Tensor> {
    let l = mol.len();
    let d = params.embed.shape()[1];
    let z_idx: Vec<usize> = mol.atoms.iter().map(|a| a.z as usize).collect();
    let mut h = params.embed.gather_rows(&z_idx)?.layernorm_rows()?;

    // directed edge lists and their (constant) rbf features
    let mut srcs = Vec::with_capacity(2 * mol.bonds.len());
    let mut dsts = Vec::with_capacity(2 * mol.bonds.len());
    let mut rbf_rows = Vec::with_capacity(2 * mol.bonds.len() * params.rbf_count);
    for b in &mol.bonds {
        for (dst, src) in [(b.i, b.j), (b.j, b.i)] {
            dsts.push(dst);
            srcs.push(src);
            rbf_rows.extend(rbf_expand(matrices.dist(dst, src), params.rbf_count, params.rbf_cutoff));
        }
    }
    let num_edges = srcs.len();
    let rbf = if num_edges > 0 {
        Some(Tensor::constant(&[num_edges, params.rbf_count], rbf_rows)?)
    } else {
        None
    };

    for layer in &params.layers {
        let messages = match &rbf {
            Some(rbf) => {
                let filt = rbf
                    .matmul(&layer.filt_w1)?
                    .add_row(&layer.filt_b1)?
                    .silu()?
                    .matmul(&layer.filt_w2)?
                    .add_row(&layer.filt_b2)?;
                let neighbor = h.gather_rows(&srcs)?;
                neighbor.mul(&filt)?.segment_sum(&dsts, l)?
            }
            None => Tensor::zeros(&[l, d]),
        };
        let update = messages
            .matmul(&layer.upd_w1)?
            .add_row(&layer.upd_b1)?
            .silu()?
            .matmul(&layer.upd_w2)?
            .add_row(&layer.upd_b2)?;
        h = h.add(&update)?;
    }
    Ok(h)
}

// ── descriptor encoder ──────────────────────────────────────────────────

/// Per-row input width: raw, normalized, mask flag, segment one-hot.
pub const E_INPUT_WIDTH: usize = 7;

pub struct EEncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EEncoderParams {
    pub fn new(init: &mut ParamInit, d: usize) -> Result<Self> {
        Ok(EEncoderParams {
            w1: init.fan_in_uniform(&[E_INPUT_WIDTH, d], E_INPUT_WIDTH)?,
            b1: init.zeros(&[d])?,
            w2: init.fan_in_uniform(&[d, d], d)?,
            b2: init.zeros(&[d])?,
        })
    }
}

impl ParamGroup for EEncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; w1, b1, w2, b2);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; w1, b1, w2, b2);
    }
}

/// Encode descriptor rows into d-wide tokens. Masked rows have both value
/// channels zeroed before encoding, so the token carries only the mask
/// flag and segment identity.
pub fn e_encoder_forward(
    params: &EEncoderParams,
    descriptors: &EDescriptorVector,
    mask: &[bool],
) -> Result<Tensor> {
    if mask.len() != DESCRIPTOR_COUNT {
        return Err(TensorError::Invalid {
            op: "e_encoder_forward",
            msg: format!("mask has {} entries, expected {}", mask.len(), DESCRIPTOR_COUNT),
        });
    }
    if mask.iter().all(|&m| m) {
        return Err(TensorError::Invalid {
            op: "e_encoder_forward",
            msg: "all descriptor rows masked".into(),
        });
    }
    let mut rows = Vec::with_capacity(DESCRIPTOR_COUNT * E_INPUT_WIDTH);
    for i in 0..DESCRIPTOR_COUNT {
        let masked = mask[i];
        let (raw, norm) = if masked {
            (0.0, 0.0)
        } else {
            (descriptors.raw()[i], descriptors.normalized()[i])
        };
        rows.push(raw);
        rows.push(norm);
        rows.push(if masked { 1.0 } else { 0.0 });
        let seg = EDescriptorVector::segment_of(i);
        for s in 0..4 {
            rows.push(if s == seg { 1.0 } else { 0.0 });
        }
    }
    let input = Tensor::constant(&[DESCRIPTOR_COUNT, E_INPUT_WIDTH], rows)?;
    input
        .matmul(&params.w1)?
        .add_row(&params.b1)?
        .silu()?
        .matmul(&params.w2)?
        .add_row(&params.b2)
}
