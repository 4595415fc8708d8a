//! Model assembly: every learnable parameter, checkpoint round trips,
//! per-molecule preparation, and the end-to-end forward passes that the
//! training loops drive.

use std::collections::HashMap;
use std::path::Path;

use crate::encoders::{
    e_encoder_forward, gnn_a_forward, gnn_f_forward, EEncoderParams, GnnAParams, GnnFParams,
};
use crate::fragmenter::{
    fragment_graph, fragment_molecule, sort_nodes, FragError, FragmentGraph, FragmentVocab,
    Fragmentation, NodeOrdering,
};
use crate::fuser::{
    downstream_head, mask_head, mt_forward, MaskPlan, MlpHeadParams, MtBlockParams,
};
use crate::gssm::{mg_forward, structure_targets, MgAblation, MgOutput, MgParams};
use crate::molgraph::{graph_matrices, GraphMatrices, Molecule, DESCRIPTOR_COUNT};
use crate::params::ParamGroup;
use crate::tensor::{
    load_checkpoint, no_grad, save_checkpoint, ParamInit, Result, Tensor, TensorError,
};

/// Width and depth settings shared by every sub-module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub d: usize,
    pub d_hidden: usize,
    pub n_state: usize,
    pub conv_kernel: usize,
    pub gin_layers: usize,
    pub schnet_layers: usize,
    pub mamba_layers: usize,
    pub mt_layers: usize,
    pub attn_heads: usize,
    pub rbf_count: usize,
    pub rbf_cutoff: f64,
    pub pe_frag_slots: usize,
    pub pe_intra_slots: usize,
    pub pe_width: usize,
    pub num_tasks: usize,
}

/// All learnable parameters. Seed plus construction order pin every bit.
pub struct ModelState {
    pub dims: ModelDims,
    pub vocab_size: usize,
    pub gnn_f: GnnFParams,
    pub gnn_a: GnnAParams,
    pub e_encoder: EEncoderParams,
    pub mg: MgParams,
    pub mt: Vec<MtBlockParams>,
    pub mask_head: MlpHeadParams,
    pub head: MlpHeadParams,
}

impl ModelState {
    pub fn new(dims: &ModelDims, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut init = ParamInit::new(seed);
        let gnn_f = GnnFParams::new(&mut init, vocab_size, dims.d, dims.gin_layers)?;
        let gnn_a = GnnAParams::new(
            &mut init,
            dims.d,
            dims.schnet_layers,
            dims.rbf_count,
            dims.rbf_cutoff,
        )?;
        let e_encoder = EEncoderParams::new(&mut init, dims.d)?;
        let mg = MgParams::new(
            &mut init,
            dims.d,
            dims.d_hidden,
            dims.n_state,
            dims.conv_kernel,
            dims.mamba_layers,
            vocab_size,
            dims.pe_frag_slots,
            dims.pe_intra_slots,
            dims.pe_width,
        )?;
        let mut mt = Vec::with_capacity(dims.mt_layers);
        for _ in 0..dims.mt_layers {
            mt.push(MtBlockParams::new(
                &mut init,
                dims.d,
                dims.d_hidden,
                dims.n_state,
                dims.conv_kernel,
                dims.attn_heads,
            )?);
        }
        let mask_head = MlpHeadParams::new(&mut init, dims.d, dims.d)?;
        let head = MlpHeadParams::new(&mut init, dims.d, dims.num_tasks)?;
        let state = ModelState {
            dims: dims.clone(),
            vocab_size,
            gnn_f,
            gnn_a,
            e_encoder,
            mg,
            mt,
            mask_head,
            head,
        };
        state.assert_unique_names();
        Ok(state)
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.gnn_f.visit("gnn_f", f);
        self.gnn_a.visit("gnn_a", f);
        self.e_encoder.visit("e_encoder", f);
        self.mg.visit("mg", f);
        for (i, block) in self.mt.iter().enumerate() {
            block.visit(&format!("mt.{i}"), f);
        }
        self.mask_head.visit("mask_head", f);
        self.head.visit("head", f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gnn_f.visit_mut("gnn_f", f);
        self.gnn_a.visit_mut("gnn_a", f);
        self.e_encoder.visit_mut("e_encoder", f);
        self.mg.visit_mut("mg", f);
        for (i, block) in self.mt.iter_mut().enumerate() {
            block.visit_mut(&format!("mt.{i}"), f);
        }
        self.mask_head.visit_mut("mask_head", f);
        self.head.visit_mut("head", f);
    }

    fn assert_unique_names(&self) {
        let mut names = std::collections::HashSet::new();
        self.for_each_param(&mut |name, _| {
            assert!(names.insert(name.to_string()), "duplicate parameter name {name}");
        });
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    pub fn zero_grads(&self) {
        self.for_each_param(&mut |_, t| t.zero_grad());
    }

    /// Copy of every parameter's raw values.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.named_params()
            .into_iter()
            .map(|(name, t)| (name, t.data().to_vec()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(String, Vec<f64>)]) {
        let by_name: HashMap<&str, &Vec<f64>> =
            snapshot.iter().map(|(n, d)| (n.as_str(), d)).collect();
        self.for_each_param_mut(&mut |name, t| {
            let data = by_name.get(name).unwrap_or_else(|| panic!("snapshot missing {name}"));
            *t = Tensor::param(t.shape(), (*data).clone()).expect("snapshot restore");
        });
    }

    /// Write all parameters, sorted by name, to a checkpoint file.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut entries = self.named_params();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        save_checkpoint(path, &entries)
    }

    /// Rebuild a model from a checkpoint; dims and vocabulary size must
    /// reproduce the saved parameter shapes exactly.
    pub fn load(path: &Path, dims: &ModelDims, vocab_size: usize) -> Result<Self> {
        let entries = load_checkpoint(path).map_err(|e| TensorError::Invalid {
            op: "checkpoint",
            msg: e.to_string(),
        })?;
        let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> =
            entries.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        let mut state = ModelState::new(dims, vocab_size, 0)?;
        let mut error: Option<String> = None;
        state.for_each_param_mut(&mut |name, t| {
            if error.is_some() {
                return;
            }
            match by_name.remove(name) {
                Some((shape, data)) if shape == t.shape() => {
                    *t = Tensor::param(&shape, data).expect("checkpoint tensor");
                }
                Some((shape, _)) => {
                    error = Some(format!(
                        "parameter {name}: checkpoint shape {shape:?} vs model {:?}",
                        t.shape()
                    ));
                }
                None => error = Some(format!("checkpoint missing parameter {name}")),
            }
        });
        if let Some(msg) = error {
            return Err(TensorError::Invalid { op: "checkpoint", msg });
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(TensorError::Invalid {
                op: "checkpoint",
                msg: format!("checkpoint has unknown parameter {extra}"),
            });
        }
        Ok(state)
    }
}

// ── per-molecule preparation ─────────────────────────────────────────────

/// Everything derivable from a molecule and vocabulary once, before
/// training: matrices, fragmentation, ordering, and structure targets.
pub struct Prepared {
    pub molecule: Molecule,
    pub matrices: GraphMatrices,
    pub frag: Fragmentation,
    pub frag_graph: FragmentGraph,
    pub ordering: NodeOrdering,
}

pub fn prepare(molecule: Molecule, vocab: &FragmentVocab) -> std::result::Result<Prepared, FragError> {
    molecule.validate()?;
    let matrices = graph_matrices(&molecule);
    let frag = fragment_molecule(&molecule, vocab)?;
    let frag_graph = fragment_graph(&molecule, &frag);
    let ordering = sort_nodes(&molecule, &frag);
    Ok(Prepared { molecule, matrices, frag, frag_graph, ordering })
}

impl Prepared {
    /// Multi-hot structure targets over the vocabulary.
    pub fn targets(&self, vocab_size: usize) -> (Vec<f64>, Vec<f64>) {
        structure_targets(&self.frag_graph, &self.frag, vocab_size)
    }

    /// Seeded random node order for the "w/o SORT" ablation; fragment and
    /// intra positions follow the shuffled order.
    pub fn random_ordering(&self, seed: u64) -> NodeOrdering {
        use rand::seq::SliceRandom;
        let mut salt = 0xcbf29ce484222325u64; // FNV-1a over the molecule id
        for b in self.molecule.id.as_bytes() {
            salt ^= *b as u64;
            salt = salt.wrapping_mul(0x100000001b3);
        }
        let mut rng = crate::tensor::seeded_rng(seed ^ salt);
        let mut perm: Vec<usize> = (0..self.molecule.len()).collect();
        perm.shuffle(&mut rng);
        let mut intra_counter = vec![0usize; self.frag.h];
        let mut frag_pos = Vec::with_capacity(perm.len());
        let mut intra_pos = Vec::with_capacity(perm.len());
        for &atom in &perm {
            let f = self.frag.assignment[atom];
            frag_pos.push(f);
            intra_pos.push(intra_counter[f]);
            intra_counter[f] += 1;
        }
        NodeOrdering { perm, frag_pos, intra_pos }
    }
}

// ── pipeline forwards ────────────────────────────────────────────────────

pub struct StructureOutputs {
    /// GNN_F fragment features, h x d.
    pub frag_features: Tensor,
    /// GNN_A atom features in original order, l x d.
    pub atom_features: Tensor,
    pub mg: MgOutput,
}

/// Fragment encoder, atom encoder, and the MG module.
pub fn structure_forward(
    state: &ModelState,
    prep: &Prepared,
    ablation: MgAblation,
    ablation_seed: u64,
) -> Result<StructureOutputs> {
    let frag_features =
        gnn_f_forward(&state.gnn_f, &prep.frag_graph, &prep.frag.frag_vocab_ids)?;
    let atom_features = gnn_a_forward(&state.gnn_a, &prep.molecule, &prep.matrices)?;
    let shuffled;
    let ordering = if ablation.no_sort {
        shuffled = prep.random_ordering(ablation_seed);
        &shuffled
    } else {
        &prep.ordering
    };
    let mg = mg_forward(
        &state.mg,
        &atom_features,
        ordering,
        &prep.matrices,
        &prep.frag,
        ablation,
    )?;
    Ok(StructureOutputs { frag_features, atom_features, mg })
}

pub struct FusionOutputs {
    /// Fused token matrix, (M + h) x d.
    pub fused: Tensor,
    /// Reconstructed descriptor tokens, M x d.
    pub reconstruction: Tensor,
    /// Detached unmasked encoding of the true descriptor rows.
    pub target_tokens: Tensor,
    /// Attention matrices from every block and head.
    pub attention: Vec<Tensor>,
}

/// Descriptor encoding under a mask, fusion with pooled fragment
/// features, and the reconstruction head.
pub fn fusion_forward(
    state: &ModelState,
    prep: &Prepared,
    pooled: &Tensor,
    mask: &MaskPlan,
) -> Result<FusionOutputs> {
    let descriptors = prep.molecule.descriptors.as_ref().ok_or_else(|| {
        TensorError::Invalid {
            op: "fusion_forward",
            msg: format!("molecule {} carries no descriptors", prep.molecule.id),
        }
    })?;
    let tokens = e_encoder_forward(&state.e_encoder, descriptors, &mask.mask)?;
    let (fused, attention) = mt_forward(&state.mt, &tokens, Some(pooled))?;
    let reconstruction = mask_head(&state.mask_head, &fused, DESCRIPTOR_COUNT)?;
    let target_tokens = no_grad(|| {
        e_encoder_forward(&state.e_encoder, descriptors, &vec![false; DESCRIPTOR_COUNT])
    })?
    .detach();
    Ok(FusionOutputs { fused, reconstruction, target_tokens, attention })
}

/// Downstream prediction: structure encoders, unmasked descriptor tokens,
/// fusion, then the two-layer head. Returns 1 x num_tasks logits (or
/// regression values).
pub fn predict(
    state: &ModelState,
    prep: &Prepared,
    ablation: MgAblation,
    ablation_seed: u64,
) -> Result<Tensor> {
    let structure = structure_forward(state, prep, ablation, ablation_seed)?;
    let fusion =
        fusion_forward(state, prep, &structure.mg.pooled, &MaskPlan::none(DESCRIPTOR_COUNT))?;
    downstream_head(&state.head, &fusion.fused)
}

/// Per-atom row sums of the MG sequence output, reported in the original
/// atom order (the interpretability quantity).
pub fn node_weights(state: &ModelState, prep: &Prepared) -> Result<Vec<f64>> {
    let structure = no_grad(|| structure_forward(state, prep, MgAblation::default(), 0))?;
    let y = structure.mg.y;
    let d = y.shape()[1];
    let mut weights = vec![0.0; prep.molecule.len()];
    for (slot, &atom) in prep.ordering.perm.iter().enumerate() {
        weights[atom] = y.data()[slot * d..(slot + 1) * d].iter().sum();
    }
    Ok(weights)
}
