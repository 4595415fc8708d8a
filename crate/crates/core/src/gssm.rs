//! The Mamba-Graph (MG) module: fragment-aware positional encoding, the
//! selective state-space block with graph-modulated step sizes, FragPool,
//! and the two fragment-structure prediction targets.


use crate::fragmenter::{FragmentGraph, Fragmentation, NodeOrdering};
use crate::molgraph::GraphMatrices;
use crate::params::{visit_fields, visit_fields_mut, ParamGroup};
use crate::tensor::{ParamInit, Result, Tensor, TensorError};

/// Positional-encoding tables and the projection back to model width.
pub struct PositionalParams {
    pub frag_table: Tensor,
    pub intra_table: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl PositionalParams {
    pub fn new(
        init: &mut ParamInit,
        d: usize,
        frag_slots: usize,
        intra_slots: usize,
        pe_width: usize,
    ) -> Result<Self> {
        let in_width = d + 2 * pe_width;
        Ok(PositionalParams {
            frag_table: init.uniform(&[frag_slots, pe_width], 0.5)?,
            intra_table: init.uniform(&[intra_slots, pe_width], 0.5)?,
            proj_w: init.fan_in_uniform(&[in_width, d], in_width)?,
            proj_b: init.zeros(&[d])?,
        })
    }
}

impl ParamGroup for PositionalParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; frag_table, intra_table, proj_w, proj_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; frag_table, intra_table, proj_w, proj_b);
    }
}

/// Sort atom features, append fragment and intra-fragment positional
/// embeddings, and project back to width d.
///
/// With `zero_pe` the embedding channels are zeroed (the "w/o PE"
/// ablation) while the projection stays in place.
pub fn assemble_sequence(
    atom_features: &Tensor,
    ordering: &NodeOrdering,
    params: &PositionalParams,
    zero_pe: bool,
) -> Result<Tensor> {
    let frag_slots = params.frag_table.shape()[0];
    let intra_slots = params.intra_table.shape()[0];
    let pe_width = params.frag_table.shape()[1];
    if let Some(&f) = ordering.frag_pos.iter().find(|&&f| f >= frag_slots) {
        return Err(TensorError::Invalid {
            op: "assemble_sequence",
            msg: format!("fragment ordinal {f} exceeds table of {frag_slots} slots"),
        });
    }
    if let Some(&p) = ordering.intra_pos.iter().find(|&&p| p >= intra_slots) {
        return Err(TensorError::Invalid {
            op: "assemble_sequence",
            msg: format!("intra-fragment rank {p} exceeds table of {intra_slots} slots"),
        });
    }
    let l = ordering.perm.len();
    let sorted = atom_features.gather_rows(&ordering.perm)?;
    let (frag_pe, intra_pe) = if zero_pe {
        (Tensor::zeros(&[l, pe_width]), Tensor::zeros(&[l, pe_width]))
    } else {
        (
            params.frag_table.gather_rows(&ordering.frag_pos)?,
            params.intra_table.gather_rows(&ordering.intra_pos)?,
        )
    };
    let stacked = Tensor::concat_cols(&[sorted, frag_pe, intra_pe])?;
    stacked.matmul(&params.proj_w)?.add_row(&params.proj_b)
}

/// Parameters of one Mamba block with graph-modulated selection.
pub struct MambaBlockParams {
    pub x_proj_w: Tensor,
    pub x_proj_b: Tensor,
    pub z_proj_w: Tensor,
    pub z_proj_b: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    /// Log-magnitudes of the state matrix; A = -exp(a_log) stays strictly
    /// negative under any update.
    pub a_log: Tensor,
    pub b_proj_w: Tensor,
    pub b_proj_b: Tensor,
    pub c_proj_w: Tensor,
    pub c_proj_b: Tensor,
    pub dt_proj_w: Tensor,
    pub dt_proj_b: Tensor,
    pub out_proj_w: Tensor,
    pub out_proj_b: Tensor,
}

impl MambaBlockParams {
    pub fn new(
        init: &mut ParamInit,
        d: usize,
        d_hidden: usize,
        n_state: usize,
        conv_kernel: usize,
    ) -> Result<Self> {
        Ok(MambaBlockParams {
            x_proj_w: init.fan_in_uniform(&[d, d_hidden], d)?,
            x_proj_b: init.zeros(&[d_hidden])?,
            z_proj_w: init.fan_in_uniform(&[d, d_hidden], d)?,
            z_proj_b: init.zeros(&[d_hidden])?,
            conv_w: init.fan_in_uniform(&[d_hidden, conv_kernel], conv_kernel)?,
            conv_b: init.zeros(&[d_hidden])?,
            a_log: init.state_log_magnitudes(d_hidden, n_state)?,
            b_proj_w: init.fan_in_uniform(&[d_hidden, n_state], d_hidden)?,
            b_proj_b: init.zeros(&[n_state])?,
            c_proj_w: init.fan_in_uniform(&[d_hidden, n_state], d_hidden)?,
            c_proj_b: init.zeros(&[n_state])?,
            dt_proj_w: init.fan_in_uniform(&[d_hidden, d_hidden], d_hidden)?,
            dt_proj_b: init.zeros(&[d_hidden])?,
            out_proj_w: init.fan_in_uniform(&[d_hidden, d], d_hidden)?,
            out_proj_b: init.zeros(&[d])?,
        })
    }
}

impl ParamGroup for MambaBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_fields!(self, prefix, f; x_proj_w, x_proj_b, z_proj_w, z_proj_b, conv_w, conv_b,
            a_log, b_proj_w, b_proj_b, c_proj_w, c_proj_b, dt_proj_w, dt_proj_b,
            out_proj_w, out_proj_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f; x_proj_w, x_proj_b, z_proj_w, z_proj_b, conv_w, conv_b,
            a_log, b_proj_w, b_proj_b, c_proj_w, c_proj_b, dt_proj_w, dt_proj_b,
            out_proj_w, out_proj_b);
    }
}

/// Per-token graph gate in sorted order: the neighbor mean of
/// exp(-distance), zero for isolated atoms.
///
/// The gate multiplies the selective step size as delta * (1 + g), so an
/// edgeless graph reduces the block to a vanilla Mamba block.
pub fn graph_gate(matrices: &GraphMatrices, ordering: &NodeOrdering) -> Vec<f64> {
    ordering
        .perm
        .iter()
        .map(|&atom| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for other in 0..matrices.len() {
                if matrices.adj(atom, other) {
                    acc += (-matrices.dist(atom, other)).exp();
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                acc / count as f64
            }
        })
        .collect()
}

/// The Mamba transformation without its residual: projections, causal
/// depthwise convolution, graph-modulated discretization, the sequential
/// state scan, gating, and the output projection.
pub fn mamba_inner(params: &MambaBlockParams, x: &Tensor, gate: &[f64]) -> Result<Tensor> {
    let l = x.shape()[0];
    if gate.len() != l {
        return Err(TensorError::Invalid {
            op: "mamba_inner",
            msg: format!("gate has {} entries for {} tokens", gate.len(), l),
        });
    }
    let xp = x.matmul(&params.x_proj_w)?.add_row(&params.x_proj_b)?;
    let z = x.matmul(&params.z_proj_w)?.add_row(&params.z_proj_b)?;
    let xc = xp.conv1d_causal(&params.conv_w, &params.conv_b)?.silu()?;

    let b = xc.matmul(&params.b_proj_w)?.add_row(&params.b_proj_b)?;
    let c = xc.matmul(&params.c_proj_w)?.add_row(&params.c_proj_b)?;
    let delta = xc.matmul(&params.dt_proj_w)?.add_row(&params.dt_proj_b)?.softplus()?;

    // graph modulation: delta'[t, ch] = delta[t, ch] * (1 + g_t)
    let gate_plus = Tensor::constant(&[l], gate.iter().map(|g| 1.0 + g).collect())?;
    let delta_mod = delta.mul_col(&gate_plus)?;

    let a = params.a_log.exp()?.neg()?;
    let abar = delta_mod.mul_cs(&a)?.exp()?;
    let bx = delta_mod.mul(&xc)?.mul_ts(&b)?;
    let y = Tensor::ssm_scan(&abar, &bx, &c)?;

    let gated = y.mul(&z.silu()?)?;
    gated.matmul(&params.out_proj_w)?.add_row(&params.out_proj_b)
}

/// Full block: inner transformation plus the residual connection.
pub fn mamba_block(params: &MambaBlockParams, x: &Tensor, gate: &[f64]) -> Result<Tensor> {
    mamba_inner(params, x, gate)?.add(x)
}

/// Elementwise max over each fragment's sorted rows.
pub fn frag_pool(y: &Tensor, frag: &Fragmentation, ordering: &NodeOrdering) -> Result<Tensor> {
    y.segment_max(&ordering.frag_pos, frag.h)
}

/// MG parameters: positional encoding, the stacked Mamba blocks, and the
/// two structure-prediction heads.
pub struct MgParams {
    pub pe: PositionalParams,
    pub blocks: Vec<MambaBlockParams>,
    pub trunk_w: Tensor,
    pub trunk_b: Tensor,
    pub frag_w: Tensor,
    pub frag_b: Tensor,
}

impl MgParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut ParamInit,
        d: usize,
        d_hidden: usize,
        n_state: usize,
        conv_kernel: usize,
        depth: usize,
        vocab_size: usize,
        frag_slots: usize,
        intra_slots: usize,
        pe_width: usize,
    ) -> Result<Self> {
        let pe = PositionalParams::new(init, d, frag_slots, intra_slots, pe_width)?;
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(MambaBlockParams::new(init, d, d_hidden, n_state, conv_kernel)?);
        }
        Ok(MgParams {
            pe,
            blocks,
            trunk_w: init.fan_in_uniform(&[d, vocab_size], d)?,
            trunk_b: init.zeros(&[vocab_size])?,
            frag_w: init.fan_in_uniform(&[d, vocab_size], d)?,
            frag_b: init.zeros(&[vocab_size])?,
        })
    }
}

impl ParamGroup for MgParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.pe.visit(&format!("{prefix}.pe"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.mamba.{i}"), f);
        }
        visit_fields!(self, prefix, f; trunk_w, trunk_b, frag_w, frag_b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.pe.visit_mut(&format!("{prefix}.pe"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.mamba.{i}"), f);
        }
        visit_fields_mut!(self, prefix, f; trunk_w, trunk_b, frag_w, frag_b);
    }
}

/// Which MG mechanisms to disable (ablation studies).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MgAblation {
    /// Replace the canonical sort with a seeded random order.
    pub no_sort: bool,
    /// Zero both positional-encoding tables.
    pub no_pe: bool,
    /// Force the graph gate to zero (plain selective SSM).
    pub no_gssm: bool,
}

pub struct MgOutput {
    /// Per-token sequence output, sorted order (l x d).
    pub y: Tensor,
    /// FragPool result, fragment ordinal order (h x d).
    pub pooled: Tensor,
    /// Multi-label logits over the vocabulary (1 x vocab_size).
    pub trunk_logits: Tensor,
    pub frag_logits: Tensor,
}

/// Run the MG module on pre-sorted atom features.
pub fn mg_forward(
    params: &MgParams,
    atom_features: &Tensor,
    ordering: &NodeOrdering,
    matrices: &GraphMatrices,
    frag: &Fragmentation,
    ablation: MgAblation,
) -> Result<MgOutput> {
    let gate = if ablation.no_gssm {
        vec![0.0; ordering.perm.len()]
    } else {
        graph_gate(matrices, ordering)
    };
    let mut x = assemble_sequence(atom_features, ordering, &params.pe, ablation.no_pe)?;
    for block in &params.blocks {
        x = mamba_block(block, &x, &gate)?;
    }
    let pooled = frag_pool(&x, frag, ordering)?;
    let summary = x.mean_axis0()?;
    let trunk_logits = summary.matmul(&params.trunk_w)?.add_row(&params.trunk_b)?;
    let frag_logits = summary.matmul(&params.frag_w)?.add_row(&params.frag_b)?;
    Ok(MgOutput { y: x, pooled, trunk_logits, frag_logits })
}

// ── structure targets ────────────────────────────────────────────────────

/// Multi-hot targets over the vocabulary for the two structure losses:
/// the trunk (a diameter path of the fragment graph) and the full set of
/// fragment ids.
pub fn structure_targets(
    frag_graph: &FragmentGraph,
    frag: &Fragmentation,
    vocab_size: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut frag_hot = vec![0.0; vocab_size];
    for &id in &frag.frag_vocab_ids {
        frag_hot[id] = 1.0;
    }
    let mut trunk_hot = vec![0.0; vocab_size];
    for ordinal in trunk_path(frag_graph) {
        trunk_hot[frag.frag_vocab_ids[ordinal]] = 1.0;
    }
    (trunk_hot, frag_hot)
}

/// A diameter path of the fragment graph: the longest shortest path, ties
/// broken by the lexicographically smallest fragment-ordinal sequence.
/// For a disconnected graph the longest finite path wins.
pub fn trunk_path(frag_graph: &FragmentGraph) -> Vec<usize> {
    let h = frag_graph.h;
    if h == 0 {
        return Vec::new();
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); h];
    for &(i, j) in &frag_graph.edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    for nb in adj.iter_mut() {
        nb.sort_unstable();
    }
    // all-pairs BFS distances
    const INF: usize = usize::MAX;
    let mut dist = vec![vec![INF; h]; h];
    for (start, row) in dist.iter_mut().enumerate() {
        row[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if row[v] == INF {
                    row[v] = row[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    let diameter = dist
        .iter()
        .flat_map(|row| row.iter().copied().filter(|&d| d != INF))
        .max()
        .unwrap_or(0);
    // smallest path sequence among all endpoint pairs at diameter distance
    let mut best: Option<Vec<usize>> = None;
    for u in 0..h {
        for v in 0..h {
            if dist[u][v] == diameter {
                let path = lex_smallest_shortest_path(u, v, &adj, &dist);
                match &best {
                    Some(b) if *b <= path => {}
                    _ => best = Some(path),
                }
            }
        }
    }
    best.unwrap_or_default()
}

/// Walk from u to v along BFS layers, always taking the smallest next
/// ordinal; yields the lexicographically smallest shortest u-v path.
fn lex_smallest_shortest_path(
    u: usize,
    v: usize,
    adj: &[Vec<usize>],
    dist: &[Vec<usize>],
) -> Vec<usize> {
    let mut path = vec![u];
    let mut cur = u;
    while cur != v {
        let next = adj[cur]
            .iter()
            .copied()
            .filter(|&w| dist[w][v] + 1 == dist[cur][v])
            .min()
            .expect("shortest-path wavefront");
        path.push(next);
        cur = next;
    }
    path
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragmenter::{build_vocabulary, fragment_molecule, sort_nodes};
    use crate::molgraph::{graph_matrices, AtomRecord, Bond, Molecule};
    use crate::tensor::{gradcheck_with, seeded_rng};
    use rand::Rng;

    fn chain(zs: &[u32]) -> Molecule {
        let mol = Molecule {
            id: "c".into(),
            atoms: zs.iter().map(|&z| AtomRecord { z, charge: 0 }).collect(),
            positions: (0..zs.len()).map(|i| [i as f64 * 1.5, 0.0, 0.0]).collect(),
            bonds: (1..zs.len()).map(|i| Bond { i: i - 1, j: i, order: 1 }).collect(),
            labels: None,
            descriptors: None,
        };
        mol.validate().unwrap();
        mol
    }

    fn params_for(d: usize, dh: usize, n: usize, seed: u64) -> MambaBlockParams {
        let mut init = ParamInit::new(seed);
        MambaBlockParams::new(&mut init, d, dh, n, 4).unwrap()
    }

    #[test]
    fn residual_identity_with_zero_out_projection() {
        let d = 6;
        let mut p = params_for(d, 8, 4, 1);
        p.out_proj_w = Tensor::param(&[8, d], vec![0.0; 8 * d]).unwrap();
        p.out_proj_b = Tensor::param(&[d], vec![0.0; d]).unwrap();
        let mut rng = seeded_rng(2);
        let x =
            Tensor::param(&[5, d], (0..5 * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .unwrap();
        let y = mamba_block(&p, &x, &[0.3, 0.0, 1.0, 0.2, 0.9]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn single_token_recurrence_collapses() {
        // l = 1: y[0,c] = sum_s C[0,s] * delta'[0,c] * B[0,s] * xc[0,c]
        let d = 4;
        let dh = 3;
        let n = 2;
        let p = params_for(d, dh, n, 3);
        let x = Tensor::param(&[1, d], vec![0.37, -0.8, 0.11, 0.52]).unwrap();
        let g = 0.4;
        let y = mamba_inner(&p, &x, &[g]).unwrap();

        // independent scalar replication
        let dot = |row: &[f64], w: &Tensor, col: usize, width: usize| -> f64 {
            (0..row.len()).map(|k| row[k] * w.data()[k * width + col]).sum()
        };
        let xr = x.data();
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
        let mut xp = vec![0.0; dh];
        let mut zv = vec![0.0; dh];
        for c in 0..dh {
            xp[c] = dot(xr, &p.x_proj_w, c, dh) + p.x_proj_b.data()[c];
            zv[c] = dot(xr, &p.z_proj_w, c, dh) + p.z_proj_b.data()[c];
        }
        // causal conv at t=0 sees only tap k-1
        let k = p.conv_w.shape()[1];
        let xc: Vec<f64> = (0..dh)
            .map(|c| silu(p.conv_w.data()[c * k + (k - 1)] * xp[c] + p.conv_b.data()[c]))
            .collect();
        let bv: Vec<f64> =
            (0..n).map(|s| dot(&xc, &p.b_proj_w, s, n) + p.b_proj_b.data()[s]).collect();
        let cv: Vec<f64> =
            (0..n).map(|s| dot(&xc, &p.c_proj_w, s, n) + p.c_proj_b.data()[s]).collect();
        let delta: Vec<f64> = (0..dh)
            .map(|c| softplus(dot(&xc, &p.dt_proj_w, c, dh) + p.dt_proj_b.data()[c]) * (1.0 + g))
            .collect();
        let mut yv = vec![0.0; dh];
        for c in 0..dh {
            for s in 0..n {
                // first step: h = abar * 0 + delta * B * xc
                yv[c] += cv[s] * delta[c] * bv[s] * xc[c];
            }
            yv[c] *= silu(zv[c]);
        }
        for c in 0..d {
            let want = (0..dh).map(|j| yv[j] * p.out_proj_w.data()[j * d + c]).sum::<f64>()
                + p.out_proj_b.data()[c];
            assert!((y.data()[c] - want).abs() < 1e-12, "channel {c}");
        }
    }

    #[test]
    fn scan_matches_naive_double_loop() {
        let mut rng = seeded_rng(4);
        for case in 0..20 {
            let l = rng.random_range(1..9usize);
            let c = rng.random_range(1..5usize);
            let n = rng.random_range(1..4usize);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, k: usize| -> Vec<f64> {
                (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
            };
            let abar = draw(&mut rng, l * c * n);
            let bx = draw(&mut rng, l * c * n);
            let cm = draw(&mut rng, l * n);
            let y = Tensor::ssm_scan(
                &Tensor::constant(&[l, c, n], abar.clone()).unwrap(),
                &Tensor::constant(&[l, c, n], bx.clone()).unwrap(),
                &Tensor::constant(&[l, n], cm.clone()).unwrap(),
            )
            .unwrap();
            // naive recurrence
            let mut h = vec![0.0; c * n];
            for t in 0..l {
                for cc in 0..c {
                    let mut acc = 0.0;
                    for s in 0..n {
                        let idx = (t * c + cc) * n + s;
                        h[cc * n + s] = abar[idx] * h[cc * n + s] + bx[idx];
                        acc += cm[t * n + s] * h[cc * n + s];
                    }
                    let got = y.data()[t * c + cc];
                    assert!((got - acc).abs() <= 1e-12, "case {case} t={t} c={cc}");
                }
            }
        }
    }

    #[test]
    fn graph_gate_hand_computed_path() {
        // 4-atom path with spacing 1.5: ends have one neighbor, middles two
        let mol = chain(&[6, 6, 6, 6]);
        let m = graph_matrices(&mol);
        let vocab = build_vocabulary(std::slice::from_ref(&mol), 1).unwrap();
        let frag = fragment_molecule(&mol, &vocab).unwrap();
        let ord = sort_nodes(&mol, &frag);
        let g = graph_gate(&m, &ord);
        let e = (-1.5f64).exp();
        let expect = [e, e, e, e]; // all neighbor distances are 1.5
        for (got, want) in g.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        // unequal spacing changes the means
        let mut mol2 = chain(&[6, 6, 6]);
        mol2.positions[2] = [4.0, 0.0, 0.0]; // second bond stretched to 2.5
        let m2 = graph_matrices(&mol2);
        let vocab2 = build_vocabulary(std::slice::from_ref(&mol2), 1).unwrap();
        let frag2 = fragment_molecule(&mol2, &vocab2).unwrap();
        let ord2 = sort_nodes(&mol2, &frag2);
        let g2 = graph_gate(&m2, &ord2);
        let (e15, e25) = ((-1.5f64).exp(), (-2.5f64).exp());
        // sorted order: atom0 (deg1), atom1 (deg2), atom2 (deg1) -> perm [0,1,2]
        let expect2 = [e15, (e15 + e25) / 2.0, e25];
        for (slot, want) in expect2.iter().enumerate() {
            let atom = ord2.perm[slot];
            let got = g2[slot];
            assert!((got - want).abs() < 1e-12, "slot {slot} atom {atom}");
        }
    }

    #[test]
    fn isolated_atom_gate_is_zero() {
        let mol = Molecule {
            id: "iso".into(),
            atoms: vec![AtomRecord { z: 6, charge: 0 }],
            positions: vec![[0.0; 3]],
            bonds: vec![],
            labels: None,
            descriptors: None,
        };
        let m = graph_matrices(&mol);
        let ord = NodeOrdering { perm: vec![0], frag_pos: vec![0], intra_pos: vec![0] };
        assert_eq!(graph_gate(&m, &ord), vec![0.0]);
        // delta' == delta: distance-zero neighbor doubles delta instead
        let p = params_for(4, 3, 2, 5);
        let x = Tensor::param(&[1, 4], vec![0.2, -0.4, 0.6, 0.1]).unwrap();
        let no_gate = mamba_inner(&p, &x, &[0.0]).unwrap();
        let with_gate = mamba_inner(&p, &x, &[1.0]).unwrap(); // exp(0) = 1 per neighbor
        assert_ne!(no_gate.data(), with_gate.data());
    }

    #[test]
    fn assemble_sequence_single_atom() {
        let d = 6;
        let mut init = ParamInit::new(6);
        let pe = PositionalParams::new(&mut init, d, 8, 8, 3).unwrap();
        let feats = Tensor::param(&[1, d], vec![0.5; 6]).unwrap();
        let ord = NodeOrdering { perm: vec![0], frag_pos: vec![0], intra_pos: vec![0] };
        let out = assemble_sequence(&feats, &ord, &pe, false).unwrap();
        // replicate: row = (feats || frag_table[0] || intra_table[0]) @ W + b
        let mut row = feats.data().to_vec();
        row.extend_from_slice(&pe.frag_table.data()[0..3]);
        row.extend_from_slice(&pe.intra_table.data()[0..3]);
        for c in 0..d {
            let want: f64 = (0..row.len())
                .map(|k| row[k] * pe.proj_w.data()[k * d + c])
                .sum::<f64>()
                + pe.proj_b.data()[c];
            assert!((out.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_sequence_pe_rows() {
        let d = 4;
        let mut init = ParamInit::new(7);
        let pe = PositionalParams::new(&mut init, d, 8, 8, 3).unwrap();
        let feats = Tensor::param(&[2, d], vec![0.0; 8]).unwrap();
        // two atoms in one fragment: same frag_pos, different intra_pos
        let ord = NodeOrdering { perm: vec![0, 1], frag_pos: vec![0, 0], intra_pos: vec![0, 1] };
        let with_pe = assemble_sequence(&feats, &ord, &pe, false).unwrap();
        assert_ne!(&with_pe.data()[0..d], &with_pe.data()[d..2 * d]);
        // zeroed tables: identical rows (features are identical)
        let no_pe = assemble_sequence(&feats, &ord, &pe, true).unwrap();
        assert_eq!(&no_pe.data()[0..d], &no_pe.data()[d..2 * d]);
        assert_ne!(with_pe.data(), no_pe.data());
    }

    #[test]
    fn assemble_sequence_rejects_overflow_ordinal() {
        let mut init = ParamInit::new(8);
        let pe = PositionalParams::new(&mut init, 4, 2, 2, 3).unwrap();
        let feats = Tensor::param(&[1, 4], vec![0.0; 4]).unwrap();
        let ord = NodeOrdering { perm: vec![0], frag_pos: vec![5], intra_pos: vec![0] };
        assert!(assemble_sequence(&feats, &ord, &pe, false).is_err());
    }

    #[test]
    fn frag_pool_examples() {
        let mut rng = seeded_rng(9);
        let y = Tensor::param(&[5, 3], (0..15).map(|_| rng.random::<f64>()).collect()).unwrap();
        // singleton fragments: pooled equals y
        let ord =
            NodeOrdering { perm: (0..5).collect(), frag_pos: (0..5).collect(), intra_pos: vec![0; 5] };
        let frag = Fragmentation {
            assignment: (0..5).collect(),
            frag_vocab_ids: vec![0; 5],
            h: 5,
        };
        let pooled = frag_pool(&y, &frag, &ord).unwrap();
        assert_eq!(pooled.data(), y.data());
        // one fragment: global columnwise max
        let ord1 =
            NodeOrdering { perm: (0..5).collect(), frag_pos: vec![0; 5], intra_pos: (0..5).collect() };
        let frag1 = Fragmentation { assignment: vec![0; 5], frag_vocab_ids: vec![0], h: 1 };
        let pooled1 = frag_pool(&y, &frag1, &ord1).unwrap();
        for j in 0..3 {
            let want =
                (0..5).map(|i| y.data()[i * 3 + j]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(pooled1.data()[j], want);
        }
        // sizes 2,3: brute-force enumeration
        let ord2 = NodeOrdering {
            perm: (0..5).collect(),
            frag_pos: vec![0, 0, 1, 1, 1],
            intra_pos: vec![0, 1, 0, 1, 2],
        };
        let frag2 = Fragmentation {
            assignment: vec![0, 0, 1, 1, 1],
            frag_vocab_ids: vec![0, 0],
            h: 2,
        };
        let pooled2 = frag_pool(&y, &frag2, &ord2).unwrap();
        for j in 0..3 {
            let a = y.data()[j].max(y.data()[3 + j]);
            let b = y.data()[6 + j].max(y.data()[9 + j]).max(y.data()[12 + j]);
            assert_eq!(pooled2.data()[j], a);
            assert_eq!(pooled2.data()[3 + j], b);
        }
    }

    #[test]
    fn frag_pool_monotone_in_inputs() {
        let y = vec![0.1, 0.9, 0.5, 0.2];
        let base = Tensor::param(&[2, 2], y.clone()).unwrap();
        let ord =
            NodeOrdering { perm: vec![0, 1], frag_pos: vec![0, 0], intra_pos: vec![0, 1] };
        let frag = Fragmentation { assignment: vec![0, 0], frag_vocab_ids: vec![0], h: 1 };
        let p0 = frag_pool(&base, &frag, &ord).unwrap();
        for k in 0..4 {
            let mut bumped = y.clone();
            bumped[k] += 0.7;
            let p1 =
                frag_pool(&Tensor::param(&[2, 2], bumped).unwrap(), &frag, &ord).unwrap();
            for j in 0..2 {
                assert!(p1.data()[j] >= p0.data()[j]);
            }
        }
    }

    #[test]
    fn trunk_single_fragment() {
        let fg = FragmentGraph { h: 1, edges: vec![] };
        assert_eq!(trunk_path(&fg), vec![0]);
        let frag = Fragmentation { assignment: vec![0, 0], frag_vocab_ids: vec![3], h: 1 };
        let (trunk, frags) = structure_targets(&fg, &frag, 5);
        assert_eq!(trunk, frags);
        assert_eq!(trunk[3], 1.0);
        assert_eq!(trunk.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn trunk_path_graph_covers_all() {
        let fg = FragmentGraph { h: 4, edges: vec![(0, 1), (1, 2), (2, 3)] };
        assert_eq!(trunk_path(&fg), vec![0, 1, 2, 3]);
    }

    #[test]
    fn trunk_star_matches_floyd_warshall_oracle() {
        // star: center 0, leaves 1..=4
        let fg = FragmentGraph { h: 5, edges: vec![(0, 1), (0, 2), (0, 3), (0, 4)] };
        let path = trunk_path(&fg);
        // oracle: Floyd-Warshall all-pairs distances
        let mut d = vec![vec![99usize; 5]; 5];
        for i in 0..5 {
            d[i][i] = 0;
        }
        for &(i, j) in &fg.edges {
            d[i][j] = 1;
            d[j][i] = 1;
        }
        for k in 0..5 {
            for i in 0..5 {
                for j in 0..5 {
                    d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
                }
            }
        }
        let diameter = (0..5).flat_map(|i| (0..5).map(move |it| (i, it)))
            .map(|(i, j)| d[i][j]).max().unwrap();
        assert_eq!(diameter, 2);
        assert_eq!(path.len(), diameter + 1);
        // smallest ordinal sequence with leaf-center-leaf shape
        assert_eq!(path, vec![1, 0, 2]);
    }

    #[test]
    fn mg_forward_canonical_shapes_and_gradcheck() {
        let mol = chain(&[6, 6, 8, 7]);
        let vocab = build_vocabulary(std::slice::from_ref(&mol), 4).unwrap();
        let frag = fragment_molecule(&mol, &vocab).unwrap();
        let ord = sort_nodes(&mol, &frag);
        let m = graph_matrices(&mol);
        let d = 5;
        let mut init = ParamInit::new(11);
        let params = MgParams::new(&mut init, d, 6, 3, 4, 2, vocab.size(), 8, 8, 2).unwrap();
        let feats = Tensor::param(&[4, d], (0..4 * d).map(|k| (k as f64) * 0.05 - 0.4).collect())
            .unwrap();
        let out = mg_forward(&params, &feats, &ord, &m, &frag, MgAblation::default()).unwrap();
        assert_eq!(out.y.shape(), &[4, d]);
        assert_eq!(out.pooled.shape(), &[frag.h, d]);
        assert_eq!(out.trunk_logits.shape(), &[1, vocab.size()]);
        assert_eq!(out.frag_logits.shape(), &[1, vocab.size()]);

        // finite-difference check through the whole MG stack w.r.t. the
        // input features
        let check = move |xs: &[Tensor]| -> crate::tensor::Result<Tensor> {
            let out = mg_forward(&params, &xs[0], &ord, &m, &frag, MgAblation::default())?;
            out.pooled.sum_all()?.add(&out.trunk_logits.sum_all()?)
        };
        gradcheck_with(
            "mg_forward",
            &check,
            &[(vec![4, d], (0..4 * d).map(|k| (k as f64) * 0.05 - 0.4).collect())],
            1e-5,
            1e-4,
        )
        .unwrap();
    }
}
