//! Molecule data model, JSONL ingestion, and derived graph matrices.
//!
//! A molecule is an atom-level graph with 3-D positions plus optional task
//! labels and a 112-row electrochemical descriptor vector. The on-disk
//! format is UTF-8 JSONL, one molecule per line, with exactly the keys
//! "id", "atoms", "pos", "bonds" and optionally "labels", "desc".

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::seeded_rng;

/// Descriptor segment widths: E-state, molecular property, quantum
/// chemical, charge.
pub const DESCRIPTOR_SEGMENTS: [usize; 4] = [25, 55, 7, 25];
/// Total descriptor rows (sum of the four segments).
pub const DESCRIPTOR_COUNT: usize = 112;

#[derive(Debug, thiserror::Error)]
pub enum MolError {
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error{}: {msg}", id.as_deref().map(|i| format!(" ({i})")).unwrap_or_default())]
    Validation { id: Option<String>, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MolError {
    fn invalid(id: Option<&str>, msg: impl Into<String>) -> MolError {
        MolError::Validation { id: id.map(str::to_string), msg: msg.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomRecord {
    /// Element number, 1..=118.
    pub z: u32,
    /// Formal charge.
    pub charge: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// 1, 2, 3, or 4 (aromatic).
    pub order: u8,
}

/// Two-column electrochemical descriptor block: raw values from the file,
/// normalized values filled by corpus z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EDescriptorVector {
    raw: Vec<f64>,
    norm: Vec<f64>,
}

impl EDescriptorVector {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self, MolError> {
        let total: usize = DESCRIPTOR_SEGMENTS.iter().sum();
        assert_eq!(total, DESCRIPTOR_COUNT);
        if raw.len() != DESCRIPTOR_COUNT {
            return Err(MolError::invalid(
                None,
                format!("descriptor vector has {} rows, expected {}", raw.len(), DESCRIPTOR_COUNT),
            ));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(MolError::invalid(None, "descriptor vector contains non-finite values"));
        }
        let norm = vec![0.0; DESCRIPTOR_COUNT];
        Ok(EDescriptorVector { raw, norm })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.norm
    }

    pub(crate) fn set_normalized(&mut self, norm: Vec<f64>) {
        assert_eq!(norm.len(), DESCRIPTOR_COUNT);
        self.norm = norm;
    }

    /// Segment index (0..4) of a descriptor row.
    pub fn segment_of(row: usize) -> usize {
        let mut acc = 0;
        for (s, &w) in DESCRIPTOR_SEGMENTS.iter().enumerate() {
            acc += w;
            if row < acc {
                return s;
            }
        }
        panic!("descriptor row {row} out of range");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub id: String,
    pub atoms: Vec<AtomRecord>,
    pub positions: Vec<[f64; 3]>,
    pub bonds: Vec<Bond>,
    pub labels: Option<BTreeMap<String, f64>>,
    pub descriptors: Option<EDescriptorVector>,
}

impl Molecule {
    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Check every structural invariant, naming the molecule on failure.
    pub fn validate(&self) -> Result<(), MolError> {
        let id = Some(self.id.as_str());
        let l = self.atoms.len();
        if l == 0 {
            return Err(MolError::invalid(id, "molecule has no atoms"));
        }
        if self.positions.len() != l {
            return Err(MolError::invalid(
                id,
                format!("{} positions for {} atoms", self.positions.len(), l),
            ));
        }
        for a in &self.atoms {
            if a.z == 0 || a.z > 118 {
                return Err(MolError::invalid(id, format!("element number {} out of range", a.z)));
            }
        }
        for p in &self.positions {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(MolError::invalid(id, "non-finite position"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for b in &self.bonds {
            if b.i >= l || b.j >= l {
                return Err(MolError::invalid(
                    id,
                    format!("bond ({},{}) index out of range for {} atoms", b.i, b.j, l),
                ));
            }
            if b.i == b.j {
                return Err(MolError::invalid(id, format!("self-bond on atom {}", b.i)));
            }
            if !(1..=4).contains(&b.order) {
                return Err(MolError::invalid(id, format!("bond order {} invalid", b.order)));
            }
            let key = (b.i.min(b.j), b.i.max(b.j));
            if !seen.insert(key) {
                return Err(MolError::invalid(
                    id,
                    format!("duplicate bond ({},{})", key.0, key.1),
                ));
            }
        }
        if let Some(labels) = &self.labels {
            for (k, v) in labels {
                if !v.is_finite() {
                    return Err(MolError::invalid(id, format!("label {k} is non-finite")));
                }
            }
        }
        Ok(())
    }
}

/// Adjacency, Euclidean distance, and degree data derived from a molecule.
#[derive(Debug, Clone)]
pub struct GraphMatrices {
    n: usize,
    adjacency: Vec<u8>,
    distance: Vec<f64>,
    degrees: Vec<usize>,
}

impl GraphMatrices {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn adj(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j] != 0
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.distance[i * self.n + j]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }
}

/// Build adjacency/distance/degree matrices. Total on a valid molecule.
pub fn graph_matrices(mol: &Molecule) -> GraphMatrices {
    let n = mol.len();
    let mut adjacency = vec![0u8; n * n];
    let mut degrees = vec![0usize; n];
    for b in &mol.bonds {
        adjacency[b.i * n + b.j] = 1;
        adjacency[b.j * n + b.i] = 1;
        degrees[b.i] += 1;
        degrees[b.j] += 1;
    }
    let mut distance = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&mol.positions[i], &mol.positions[j]);
            distance[i * n + j] = d;
            distance[j * n + i] = d;
        }
    }
    GraphMatrices { n, adjacency, distance, degrees }
}

fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

// ── JSONL wire format ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct WireMolecule {
    id: String,
    atoms: Vec<AtomRecord>,
    pos: Vec<[f64; 3]>,
    bonds: Vec<[i64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    desc: Option<Vec<f64>>,
}

const KNOWN_KEYS: [&str; 6] = ["id", "atoms", "pos", "bonds", "labels", "desc"];

/// Parse one JSONL record. `line` is used only for error reporting.
///
/// In strict mode unknown keys are validation errors; in lenient mode they
/// are returned as warnings.
pub fn parse_molecule(
    record: &str,
    line: usize,
    strict: bool,
) -> Result<(Molecule, Vec<String>), MolError> {
    let value: serde_json::Value = serde_json::from_str(record)
        .map_err(|e| MolError::Parse { line, msg: e.to_string() })?;
    let obj = value
        .as_object()
        .ok_or_else(|| MolError::Parse { line, msg: "record is not a JSON object".into() })?;
    let mut warnings = Vec::new();
    for key in obj.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            if strict {
                return Err(MolError::invalid(
                    obj.get("id").and_then(|v| v.as_str()),
                    format!("unknown key \"{key}\" (line {line})"),
                ));
            }
            warnings.push(format!("line {line}: ignoring unknown key \"{key}\""));
        }
    }
    let wire: WireMolecule = serde_json::from_value(value)
        .map_err(|e| MolError::Parse { line, msg: e.to_string() })?;
    let mut bonds = Vec::with_capacity(wire.bonds.len());
    for b in &wire.bonds {
        if b[0] < 0 || b[1] < 0 || !(1..=4).contains(&b[2]) {
            return Err(MolError::invalid(
                Some(&wire.id),
                format!("bond triple {:?} invalid (line {line})", b),
            ));
        }
        bonds.push(Bond { i: b[0] as usize, j: b[1] as usize, order: b[2] as u8 });
    }
    let descriptors = wire.desc.map(EDescriptorVector::from_raw).transpose().map_err(|e| {
        match e {
            MolError::Validation { msg, .. } => MolError::invalid(Some(&wire.id), msg),
            other => other,
        }
    })?;
    let mol = Molecule {
        id: wire.id,
        atoms: wire.atoms,
        positions: wire.pos,
        bonds,
        labels: wire.labels,
        descriptors,
    };
    mol.validate()?;
    Ok((mol, warnings))
}

/// Serialize a molecule to its JSONL line (no trailing newline).
///
/// parse -> serialize -> parse round-trips bit-identically; only the raw
/// descriptor column is written.
pub fn serialize_molecule(mol: &Molecule) -> String {
    let wire = WireMolecule {
        id: mol.id.clone(),
        atoms: mol.atoms.clone(),
        pos: mol.positions.clone(),
        bonds: mol
            .bonds
            .iter()
            .map(|b| [b.i as i64, b.j as i64, b.order as i64])
            .collect(),
        labels: mol.labels.clone(),
        desc: mol.descriptors.as_ref().map(|d| d.raw.clone()),
    };
    serde_json::to_string(&wire).expect("molecule serialization")
}

/// Load a JSONL corpus; lines parse in parallel, order is preserved.
pub fn read_corpus(path: &Path, strict: bool) -> Result<(Vec<Molecule>, Vec<String>), MolError> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let parsed: Vec<Result<(Molecule, Vec<String>), MolError>> = lines
        .par_iter()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| parse_molecule(line, idx + 1, strict))
        .collect();
    let mut molecules = Vec::with_capacity(parsed.len());
    let mut warnings = Vec::new();
    for item in parsed {
        let (mol, mut w) = item?;
        molecules.push(mol);
        warnings.append(&mut w);
    }
    Ok((molecules, warnings))
}

pub fn write_corpus(path: &Path, molecules: &[Molecule]) -> Result<(), MolError> {
    let mut w = BufWriter::new(File::create(path)?);
    for mol in molecules {
        writeln!(w, "{}", serialize_molecule(mol))?;
    }
    w.flush()?;
    Ok(())
}

// ── descriptor normalization ─────────────────────────────────────────────

/// Corpus z-scoring of the raw descriptor column.
///
/// Per descriptor row: population mean/stdev over the corpus, normalized
/// value clamped to [-10, 10]; constant rows map to 0.
pub fn normalize_descriptors(corpus: &mut [Molecule]) -> Result<(), MolError> {
    if corpus.is_empty() {
        return Err(MolError::invalid(None, "empty corpus"));
    }
    for mol in corpus.iter() {
        if mol.descriptors.is_none() {
            return Err(MolError::invalid(
                Some(&mol.id),
                "missing descriptor rows for normalization",
            ));
        }
    }
    let n = corpus.len() as f64;
    let mut mean = vec![0.0; DESCRIPTOR_COUNT];
    for mol in corpus.iter() {
        let raw = mol.descriptors.as_ref().unwrap().raw();
        for (m, v) in mean.iter_mut().zip(raw) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; DESCRIPTOR_COUNT];
    for mol in corpus.iter() {
        let raw = mol.descriptors.as_ref().unwrap().raw();
        for (k, v) in raw.iter().enumerate() {
            let d = v - mean[k];
            var[k] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    corpus.par_iter_mut().for_each(|mol| {
        let desc = mol.descriptors.as_mut().unwrap();
        let norm: Vec<f64> = desc
            .raw()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                if std[k] == 0.0 {
                    0.0
                } else {
                    ((v - mean[k]) / std[k]).clamp(-10.0, 10.0)
                }
            })
            .collect();
        desc.set_normalized(norm);
    });
    Ok(())
}

// ── synthetic descriptors ────────────────────────────────────────────────

/// Deterministic stand-in for externally computed descriptors.
///
/// Channels are seeded random projections of permutation-invariant
/// molecule statistics; channel families cycle through element counts,
/// degree histogram, bond/charge counts, and pairwise-distance moments
/// (channel index mod 4). Distance-moment channels are exactly zero for a
/// single-atom molecule.
pub fn synth_descriptors(mol: &Molecule, seed: u64) -> EDescriptorVector {
    let matrices = graph_matrices(mol);
    let l = mol.len();

    // family 0: element counts for H,C,N,O,F,S plus other and total
    let mut elem = [0.0; 8];
    for a in &mol.atoms {
        match a.z {
            1 => elem[0] += 1.0,
            6 => elem[1] += 1.0,
            7 => elem[2] += 1.0,
            8 => elem[3] += 1.0,
            9 => elem[4] += 1.0,
            16 => elem[5] += 1.0,
            _ => elem[6] += 1.0,
        }
    }
    elem[7] = l as f64;

    // family 1: degree histogram, degrees above 6 share the last bucket
    let mut deg = [0.0; 8];
    for &d in matrices.degrees() {
        deg[d.min(7)] += 1.0;
    }

    // family 2: bond-order counts, bond total, charge sums
    let mut bond = [0.0; 7];
    for b in &mol.bonds {
        bond[(b.order - 1) as usize] += 1.0;
    }
    bond[4] = mol.bonds.len() as f64;
    bond[5] = mol.atoms.iter().map(|a| a.charge.unsigned_abs() as f64).sum();
    bond[6] = mol.atoms.iter().map(|a| a.charge as f64).sum();

    // family 3: pairwise-distance moments over sorted distances so the
    // result is identical under atom relabeling
    let mut dists: Vec<f64> = Vec::with_capacity(l * (l - 1) / 2);
    for i in 0..l {
        for j in (i + 1)..l {
            dists.push(matrices.dist(i, j));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let moments = if dists.is_empty() {
        [0.0; 5]
    } else {
        let n = dists.len() as f64;
        let sum: f64 = dists.iter().sum();
        let sq: f64 = dists.iter().map(|d| d * d).sum();
        let mean = sum / n;
        let rms = (sq / n).sqrt();
        let var = (sq / n - mean * mean).max(0.0);
        [mean, rms, dists[0], dists[dists.len() - 1], var.sqrt()]
    };

    let families: [&[f64]; 4] = [&elem, &deg, &bond, &moments];
    let mut raw = Vec::with_capacity(DESCRIPTOR_COUNT);
    for channel in 0..DESCRIPTOR_COUNT {
        let stats = families[channel % 4];
        let mut rng =
            seeded_rng(seed ^ (channel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut acc = 0.0;
        for &s in stats {
            let w = rng.random::<f64>() * 2.0 - 1.0;
            acc += w * s;
        }
        raw.push(acc);
    }
    EDescriptorVector::from_raw(raw).expect("synthetic descriptor layout")
}

/// Relabel atoms by `perm`: new index k holds old atom perm[k].
///
/// Labels and descriptors carry over unchanged; bond endpoints are
/// remapped accordingly.
pub fn permute_molecule(mol: &Molecule, perm: &[usize]) -> Molecule {
    assert_eq!(perm.len(), mol.len());
    let mut inverse = vec![0usize; perm.len()];
    for (new_idx, &old_idx) in perm.iter().enumerate() {
        inverse[old_idx] = new_idx;
    }
    Molecule {
        id: mol.id.clone(),
        atoms: perm.iter().map(|&o| mol.atoms[o]).collect(),
        positions: perm.iter().map(|&o| mol.positions[o]).collect(),
        bonds: mol
            .bonds
            .iter()
            .map(|b| Bond { i: inverse[b.i], j: inverse[b.j], order: b.order })
            .collect(),
        labels: mol.labels.clone(),
        descriptors: mol.descriptors.clone(),
    }
}
