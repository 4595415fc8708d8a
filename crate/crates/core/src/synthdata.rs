//! Deterministic synthetic molecule generator for tests and pipeline
//! sanity runs.
//!
//! Molecules are random spanning trees (plus a few extra edges) over 4-24
//! atoms drawn from {C, N, O, S, F}, laid out with ~1.5 A bond lengths.
//! Half the molecules get an O-S-F path spliced in; the binary "planted"
//! label is recomputed from an explicit containment check, so it stays
//! truthful even when the motif appears by chance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::molgraph::{synth_descriptors, AtomRecord, Bond, Molecule};
use crate::tensor::seeded_rng;

/// The planted motif: an O-S-F path.
pub const MOTIF: [u32; 3] = [8, 16, 9];

pub const MIN_ATOMS: usize = 4;
pub const MAX_ATOMS: usize = 24;

const ELEMENTS: [u32; 5] = [6, 7, 8, 16, 9];
/// Label key carried by every generated molecule.
pub const PLANTED_TASK: &str = "planted";

fn splitmix(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// True iff the molecule contains the O-S-F path as a subgraph.
pub fn contains_motif(mol: &Molecule) -> bool {
    let neighbors = |atom: usize| -> Vec<usize> {
        mol.bonds
            .iter()
            .filter_map(|b| {
                if b.i == atom {
                    Some(b.j)
                } else if b.j == atom {
                    Some(b.i)
                } else {
                    None
                }
            })
            .collect()
    };
    for center in 0..mol.len() {
        if mol.atoms[center].z != MOTIF[1] {
            continue;
        }
        let nb = neighbors(center);
        let has_o = nb.iter().any(|&a| mol.atoms[a].z == MOTIF[0]);
        let has_f = nb.iter().any(|&a| mol.atoms[a].z == MOTIF[2]);
        if has_o && has_f {
            return true;
        }
    }
    false
}

fn place_atom(rng: &mut ChaCha8Rng, anchor: [f64; 3], taken: &[[f64; 3]]) -> [f64; 3] {
    for _ in 0..32 {
        // random direction, ~1.5 A bond length with slight jitter
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let cos_phi = rng.random::<f64>() * 2.0 - 1.0;
        let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
        let r = 1.5 + (rng.random::<f64>() - 0.5) * 0.2;
        let candidate = [
            anchor[0] + r * sin_phi * theta.cos(),
            anchor[1] + r * sin_phi * theta.sin(),
            anchor[2] + r * cos_phi,
        ];
        let clear = taken.iter().all(|p| {
            let d2 = (p[0] - candidate[0]).powi(2)
                + (p[1] - candidate[1]).powi(2)
                + (p[2] - candidate[2]).powi(2);
            d2 > 0.81
        });
        if clear {
            return candidate;
        }
    }
    // crowded neighborhoods settle for a long displaced bond
    [anchor[0] + 1.5, anchor[1] + rng.random::<f64>(), anchor[2] + rng.random::<f64>()]
}

fn generate_one(index: usize, seed: u64) -> Molecule {
    let mut rng = seeded_rng(splitmix(seed, index as u64));
    let plant = rng.random::<f64>() < 0.5;
    let l = rng.random_range(MIN_ATOMS..=MAX_ATOMS);

    let mut atoms: Vec<AtomRecord> = (0..l)
        .map(|_| AtomRecord { z: ELEMENTS[rng.random_range(0..ELEMENTS.len())], charge: 0 })
        .collect();
    // spanning tree: each atom after the first bonds to an earlier one
    let mut bonds: Vec<Bond> = Vec::with_capacity(l + 2);
    for i in 1..l {
        let j = rng.random_range(0..i);
        let order = if rng.random::<f64>() < 0.15 { 2 } else { 1 };
        bonds.push(Bond { i, j, order });
    }
    // up to 3 extra edges
    for _ in 0..rng.random_range(0..=3usize) {
        let i = rng.random_range(0..l);
        let j = rng.random_range(0..l);
        let dup = i == j
            || bonds.iter().any(|b| (b.i == i && b.j == j) || (b.i == j && b.j == i));
        if !dup {
            bonds.push(Bond { i, j, order: 1 });
        }
    }
    if plant {
        // overwrite the last three atoms with the motif path, attached to
        // the existing tree through atom l-3's spanning-tree bond
        let base = l - 3;
        for (offset, &z) in MOTIF.iter().enumerate() {
            atoms[base + offset].z = z;
        }
        let motif_bonds = [(base, base + 1), (base + 1, base + 2)];
        for (i, j) in motif_bonds {
            let exists =
                bonds.iter().any(|b| (b.i == i && b.j == j) || (b.i == j && b.j == i));
            if !exists {
                bonds.push(Bond { i, j, order: 1 });
            }
        }
    }

    // breadth-first layout along the bond graph
    let mut positions = vec![[f64::NAN; 3]; l];
    positions[0] = [0.0, 0.0, 0.0];
    let mut placed = vec![false; l];
    placed[0] = true;
    let mut frontier = std::collections::VecDeque::from([0usize]);
    let mut taken = vec![positions[0]];
    while let Some(u) = frontier.pop_front() {
        let neighbors: Vec<usize> = bonds
            .iter()
            .filter_map(|b| {
                if b.i == u {
                    Some(b.j)
                } else if b.j == u {
                    Some(b.i)
                } else {
                    None
                }
            })
            .collect();
        for v in neighbors {
            if !placed[v] {
                positions[v] = place_atom(&mut rng, positions[u], &taken);
                taken.push(positions[v]);
                placed[v] = true;
                frontier.push_back(v);
            }
        }
    }

    let mut mol = Molecule {
        id: format!("synth-{index:05}"),
        atoms,
        positions,
        bonds,
        labels: None,
        descriptors: None,
    };
    let label = if contains_motif(&mol) { 1.0 } else { 0.0 };
    mol.labels = Some([(PLANTED_TASK.to_string(), label)].into_iter().collect());
    mol.descriptors = Some(synth_descriptors(&mol, seed));
    mol.validate().expect("generated molecule must satisfy every invariant");
    mol
}

/// Generate `n` deterministic molecules for a seed.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<Molecule> {
    (0..n).map(|k| generate_one(k, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::graph_matrices;

    #[test]
    fn single_molecule_is_valid() {
        let mols = synth_corpus(1, 0);
        assert_eq!(mols.len(), 1);
        mols[0].validate().unwrap();
        assert!(mols[0].descriptors.is_some());
        assert!(mols[0].labels.as_ref().unwrap().contains_key(PLANTED_TASK));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_corpus(16, 7);
        let b = synth_corpus(16, 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(crate::molgraph::serialize_molecule(x), crate::molgraph::serialize_molecule(y));
        }
        let c = synth_corpus(16, 8);
        assert!(a.iter().zip(&c).any(|(x, y)| {
            crate::molgraph::serialize_molecule(x) != crate::molgraph::serialize_molecule(y)
        }));
    }

    #[test]
    fn label_agrees_with_exhaustive_subgraph_search() {
        // independent oracle: enumerate all ordered atom triples
        let brute = |mol: &Molecule| -> bool {
            let m = graph_matrices(mol);
            let l = mol.len();
            for a in 0..l {
                for b in 0..l {
                    for c in 0..l {
                        if a == b || b == c || a == c {
                            continue;
                        }
                        if mol.atoms[a].z == MOTIF[0]
                            && mol.atoms[b].z == MOTIF[1]
                            && mol.atoms[c].z == MOTIF[2]
                            && m.adj(a, b)
                            && m.adj(b, c)
                        {
                            return true;
                        }
                    }
                }
            }
            false
        };
        let mols = synth_corpus(200, 3);
        let mut positives = 0;
        for mol in &mols {
            let label = mol.labels.as_ref().unwrap()[PLANTED_TASK] >= 0.5;
            assert_eq!(label, brute(mol), "molecule {}", mol.id);
            if label {
                positives += 1;
            }
        }
        // roughly half the corpus should be positive
        assert!(positives > 60 && positives < 140, "positives = {positives}");
    }

    #[test]
    fn atom_counts_are_uniform() {
        let mols = synth_corpus(1000, 11);
        let mut hist = vec![0usize; MAX_ATOMS + 1];
        for mol in &mols {
            assert!(mol.len() >= MIN_ATOMS && mol.len() <= MAX_ATOMS);
            hist[mol.len()] += 1;
        }
        let expect = 1000.0 / (MAX_ATOMS - MIN_ATOMS + 1) as f64;
        for l in MIN_ATOMS..=MAX_ATOMS {
            let got = hist[l] as f64;
            // ~4.8% per bucket; allow generous statistical tolerance
            assert!(
                (got - expect).abs() < 4.0 * expect.sqrt() + 10.0,
                "count {got} at {l} atoms vs expected {expect}"
            );
        }
    }

    #[test]
    fn positions_are_distinct_and_bond_lengths_sane() {
        let mols = synth_corpus(50, 13);
        for mol in &mols {
            let m = graph_matrices(mol);
            for i in 0..mol.len() {
                for j in (i + 1)..mol.len() {
                    assert!(m.dist(i, j) > 1e-6, "coincident atoms in {}", mol.id);
                }
            }
            // every atom sits ~1.5 A from at least one bonded neighbor
            // (its layout anchor); cross-edges may stretch further but
            // stay well inside the rbf cutoff
            for atom in 0..mol.len() {
                let neighbor_dists: Vec<f64> = mol
                    .bonds
                    .iter()
                    .filter(|b| b.i == atom || b.j == atom)
                    .map(|b| m.dist(b.i, b.j))
                    .collect();
                let closest =
                    neighbor_dists.iter().cloned().fold(f64::INFINITY, f64::min);
                assert!(closest < 2.0, "atom {atom} of {} floats at {closest}", mol.id);
            }
            for b in &mol.bonds {
                assert!(m.dist(b.i, b.j) < 8.0, "bond beyond rbf cutoff in {}", mol.id);
            }
        }
    }
}
