//! Functional-connectivity data model and network-pair patching.
//!
//! An [`FcMatrix`] is split into connectivity blocks, one per unordered pair of
//! networks `(l, m)` with `l <= m`. Inter-network blocks are always taken in the
//! upper orientation (rows from network `l`, columns from network `m`); the lower
//! mirror is never stored. Within a network, regions keep the order in which the
//! parcellation lists them.

pub mod io;

use rand::seq::SliceRandom;

use crate::error::{shape_err, Error, Result};
use crate::rng;

const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric `R x R` correlation matrix with unit diagonal, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FcMatrix {
    size: usize,
    values: Vec<f64>,
}

impl FcMatrix {
    /// Builds a matrix from row-major values, enforcing symmetry, unit diagonal
    /// and the `[-1, 1]` range.
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(Error::Data("FC matrix must have at least one region".into()));
        }
        if values.len() != size * size {
            return Err(shape_err!(
                "FC matrix of size {size} needs {} values, got {}",
                size * size,
                values.len()
            ));
        }
        let m = Self { size, values };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let size = rows.len();
        let mut values = Vec::with_capacity(size * size);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(shape_err!("row {i} has {} columns, expected {size}", row.len()));
            }
            values.extend_from_slice(row);
        }
        Self::new(size, values)
    }

    pub fn identity(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
        }
        Self { size, values }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.size;
        for i in 0..r {
            let d = self.values[i * r + i];
            if (d - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::Data(format!("diagonal entry {i} is {d}, expected 1")));
            }
            for j in 0..r {
                let v = self.values[i * r + j];
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Data(format!("entry ({i},{j}) = {v} outside [-1, 1]")));
                }
                if j > i && (v - self.values[j * r + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::Data(format!("matrix is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    /// Region count `R`.
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    /// Relabels regions: entry `(p[i], p[j])` of the result is entry `(i, j)` of `self`.
    pub fn permuted(&self, perm: &RegionPermutation) -> Result<Self> {
        let r = self.size;
        if perm.len() != r {
            return Err(shape_err!("permutation of {} regions applied to size {r}", perm.len()));
        }
        let mut values = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                values[perm.map(i) * r + perm.map(j)] = self.values[i * r + j];
            }
        }
        Ok(Self { size: r, values })
    }
}

/// Assignment of regions to functional networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parcellation {
    assignment: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Parcellation {
    /// `assignment[region] = network id`; ids must cover `0..N_n` with no gaps.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Data("parcellation has no regions".into()));
        }
        let n_net = assignment.iter().max().copied().unwrap_or(0) + 1;
        let mut members = vec![Vec::new(); n_net];
        for (region, &net) in assignment.iter().enumerate() {
            members[net].push(region);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("network {empty} has no regions")));
        }
        Ok(Self { assignment, members })
    }

    /// Contiguous networks of the given sizes, in order.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let assignment = sizes
            .iter()
            .enumerate()
            .flat_map(|(net, &n)| std::iter::repeat(net).take(n))
            .collect();
        Self::new(assignment)
    }

    pub fn region_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn network_count(&self) -> usize {
        self.members.len()
    }

    pub fn network_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn network_of(&self, region: usize) -> usize {
        self.assignment[region]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Regions of network `l` in parcellation order.
    pub fn members(&self, l: usize) -> &[usize] {
        &self.members[l]
    }

    /// Merges networks through `mapping[old_id] = new_id`.
    pub fn merge_networks(&self, mapping: &[usize]) -> Result<Self> {
        if mapping.len() != self.network_count() {
            return Err(shape_err!(
                "merge mapping has {} entries for {} networks",
                mapping.len(),
                self.network_count()
            ));
        }
        Self::new(self.assignment.iter().map(|&n| mapping[n]).collect())
    }

    /// Groups every `factor` consecutive networks into one coarser network.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("coarsening factor must be >= 1".into()));
        }
        let mapping: Vec<usize> = (0..self.network_count()).map(|l| l / factor).collect();
        self.merge_networks(&mapping)
    }
}

/// Ordered network pairs `(l, m)`, `l <= m`, and their block shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    pairs: Vec<(usize, usize)>,
    shapes: Vec<(usize, usize)>,
    network_sizes: Vec<usize>,
}

impl PatchLayout {
    pub fn from_parcellation(parc: &Parcellation) -> Self {
        build_layout(parc)
    }

    pub fn n_patch(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn network_sizes(&self) -> &[usize] {
        &self.network_sizes
    }

    pub fn network_count(&self) -> usize {
        self.network_sizes.len()
    }

    pub fn region_count(&self) -> usize {
        self.network_sizes.iter().sum()
    }

    /// Largest flattened block size `S_max`.
    pub fn s_max(&self) -> usize {
        self.shapes.iter().map(|&(a, b)| a * b).max().unwrap_or(0)
    }

    /// Sum of all flattened block sizes.
    pub fn total_patch_len(&self) -> usize {
        self.shapes.iter().map(|&(a, b)| a * b).sum()
    }

    pub fn index_of(&self, l: usize, m: usize) -> Option<usize> {
        self.pairs.binary_search(&(l, m)).ok()
    }
}

/// Upper-triangle pair layout for a parcellation: `N_n (N_n + 1) / 2` patches.
pub fn build_layout(parc: &Parcellation) -> PatchLayout {
    let sizes = parc.network_sizes();
    let n = sizes.len();
    let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
    let mut shapes = Vec::with_capacity(pairs.capacity());
    for l in 0..n {
        for m in l..n {
            pairs.push((l, m));
            shapes.push((sizes[l], sizes[m]));
        }
    }
    PatchLayout {
        pairs,
        shapes,
        network_sizes: sizes,
    }
}

/// A connectivity block between networks `pair.0` (rows) and `pair.1` (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pair: (usize, usize),
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Patch {
    /// Inverse of [`Patch::vec`]: rebuilds a block from its row-major flattening.
    pub fn from_vec(pair: (usize, usize), rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "patch {pair:?} of shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { pair, rows, cols, data })
    }

    pub fn zeros(pair: (usize, usize), rows: usize, cols: usize) -> Self {
        Self {
            pair,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn pair(&self) -> (usize, usize) {
        self.pair
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Row-major flattening: entry `(i, j)` lands at `i * cols + j`, with `i`
    /// indexing regions of network `l` and `j` regions of network `m`.
    pub fn vec(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Mean of all block entries.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Cuts `fc` into one block per layout pair.
pub fn extract_patches(fc: &FcMatrix, parc: &Parcellation, layout: &PatchLayout) -> Result<Vec<Patch>> {
    if fc.size() != parc.region_count() {
        return Err(shape_err!(
            "FC matrix has {} regions but parcellation has {}",
            fc.size(),
            parc.region_count()
        ));
    }
    if layout.network_sizes() != parc.network_sizes().as_slice() {
        return Err(shape_err!("layout does not belong to this parcellation"));
    }
    let patches = layout
        .pairs()
        .iter()
        .map(|&(l, m)| {
            let rows = parc.members(l);
            let cols = parc.members(m);
            let mut data = Vec::with_capacity(rows.len() * cols.len());
            for &i in rows {
                let row = fc.row(i);
                data.extend(cols.iter().map(|&j| row[j]));
            }
            Patch {
                pair: (l, m),
                rows: rows.len(),
                cols: cols.len(),
                data,
            }
        })
        .collect();
    Ok(patches)
}

/// Writes blocks back into an `R x R` matrix, mirroring upper blocks to the
/// lower triangle. Patches may come in any order but every layout pair must
/// appear exactly once.
pub fn reassemble_values(patches: &[Patch], layout: &PatchLayout, parc: &Parcellation) -> Result<Vec<f64>> {
    if layout.network_sizes() != parc.network_sizes().as_slice() {
        return Err(shape_err!("layout does not belong to this parcellation"));
    }
    let r = parc.region_count();
    let mut seen = vec![false; layout.n_patch()];
    let mut values = vec![0.0; r * r];
    for p in patches {
        let (l, m) = p.pair;
        let idx = layout
            .index_of(l, m)
            .ok_or_else(|| Error::Data(format!("patch pair {:?} not in layout", p.pair)))?;
        if seen[idx] {
            return Err(Error::Data(format!("duplicate patch for pair {:?}", p.pair)));
        }
        seen[idx] = true;
        if p.shape() != layout.shapes()[idx] {
            return Err(shape_err!(
                "patch {:?} has shape {:?}, layout expects {:?}",
                p.pair,
                p.shape(),
                layout.shapes()[idx]
            ));
        }
        for (a, &i) in parc.members(l).iter().enumerate() {
            for (b, &j) in parc.members(m).iter().enumerate() {
                let v = p.get(a, b);
                values[i * r + j] = v;
                values[j * r + i] = v;
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("missing patch for pair {:?}", layout.pairs()[missing])));
    }
    Ok(values)
}

/// Inverse of [`extract_patches`].
pub fn reassemble(patches: &[Patch], layout: &PatchLayout, parc: &Parcellation) -> Result<FcMatrix> {
    let values = reassemble_values(patches, layout, parc)?;
    FcMatrix::new(parc.region_count(), values)
}

/// A bijection on region indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPermutation {
    forward: Vec<usize>,
}

impl RegionPermutation {
    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n).collect(),
        }
    }

    pub fn from_vec(forward: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; forward.len()];
        for &p in &forward {
            if p >= forward.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
        }
        Ok(Self { forward })
    }

    /// Uniformly random permutation, deterministic per seed.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut forward: Vec<usize> = (0..n).collect();
        forward.shuffle(&mut rng::stream(seed, rng::domain::PERMUTE, 0));
        Self { forward }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    #[inline]
    pub fn map(&self, i: usize) -> usize {
        self.forward[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.forward.len()];
        for (i, &p) in self.forward.iter().enumerate() {
            inv[p] = i;
        }
        Self { forward: inv }
    }

    /// Moves the network label of region `i` to region `map(i)`.
    pub fn apply(&self, parc: &Parcellation) -> Result<Parcellation> {
        if self.len() != parc.region_count() {
            return Err(shape_err!(
                "permutation of {} regions applied to {} regions",
                self.len(),
                parc.region_count()
            ));
        }
        let mut assignment = vec![0; self.len()];
        for (i, &net) in parc.assignment().iter().enumerate() {
            assignment[self.forward[i]] = net;
        }
        Parcellation::new(assignment)
    }
}

/// Randomly reassigns regions to networks while preserving network sizes.
pub fn permute_regions(parc: &Parcellation, seed: u64) -> Parcellation {
    RegionPermutation::random(parc.region_count(), seed)
        .apply(parc)
        .expect("permutation has the parcellation's length")
}

/// Contiguous `side x side` tiling expressed as a pseudo-parcellation, with the
/// upper-triangle block layout over it.
pub fn square_layout(regions: usize, side: usize) -> Result<(Parcellation, PatchLayout)> {
    if side == 0 || regions == 0 || regions % side != 0 {
        return Err(Error::InvalidArgument(format!(
            "square patch side {side} does not divide region count {regions}"
        )));
    }
    let parc = Parcellation::contiguous(&vec![side; regions / side])?;
    let layout = build_layout(&parc);
    Ok((parc, layout))
}

/// Age (years) and sex code (0/1) for one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confounds {
    pub age: f64,
    pub sex: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub fc: FcMatrix,
    pub confounds: Confounds,
    /// Scores aligned with [`Cohort::target_names`].
    pub targets: Vec<f64>,
}

/// Subjects sharing one region count and one set of named targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    target_names: Vec<String>,
    subjects: Vec<Subject>,
}

impl Cohort {
    pub fn new(target_names: Vec<String>, subjects: Vec<Subject>) -> Result<Self> {
        if let Some(first) = subjects.first() {
            let r = first.fc.size();
            for s in &subjects {
                if s.fc.size() != r {
                    return Err(Error::Data(format!(
                        "subject {} has {} regions, expected {r}",
                        s.id,
                        s.fc.size()
                    )));
                }
                if s.targets.len() != target_names.len() {
                    return Err(Error::Data(format!(
                        "subject {} has {} targets, expected {}",
                        s.id,
                        s.targets.len(),
                        target_names.len()
                    )));
                }
                if s.confounds.sex > 1 {
                    return Err(Error::Data(format!("subject {} has sex code {}", s.id, s.confounds.sex)));
                }
            }
        }
        Ok(Self { target_names, subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn region_count(&self) -> Option<usize> {
        self.subjects.first().map(|s| s.fc.size())
    }

    /// Column of target `t` across subjects.
    pub fn target_column(&self, t: usize) -> Vec<f64> {
        self.subjects.iter().map(|s| s.targets[t]).collect()
    }

    pub fn confounds(&self) -> Vec<Confounds> {
        self.subjects.iter().map(|s| s.confounds).collect()
    }
}
