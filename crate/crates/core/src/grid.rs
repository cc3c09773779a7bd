//! Triadic lattice geometry, cell-wise constant coefficient fields, and the
//! seeded random ensembles that populate them.
//!
//! Cubes are anchored at their lower corner: the ambient cube of a field at
//! level `m` is `[0, 3^m)^d`, and a subcube of level `k` has an offset whose
//! components are multiples of `3^k`. Cells and nodes are numbered
//! row-major, the first coordinate varying slowest.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::{Mat, SpdMatrix, MAX_DIM};

pub const MAX_AMBIENT_LEVEL: u32 = 8;

/// Upper bound on stored matrix entries (cells times `d^2`).
pub const MAX_FIELD_ENTRIES: usize = 1 << 28;

#[inline]
pub fn pow3(k: u32) -> usize {
    3usize.pow(k)
}

fn check_dim(dim: usize) -> Result<()> {
    if !(1..=MAX_DIM).contains(&dim) {
        return Err(Error::param(format!("dimension {dim} not in 1..=3")));
    }
    Ok(())
}

/// Row-major multi-index iteration over `[0, side)^dim`.
pub(crate) fn for_each_index(dim: usize, side: usize, mut f: impl FnMut(usize, &[usize])) {
    let total = side.pow(dim as u32);
    let mut idx = [0usize; MAX_DIM];
    for linear in 0..total {
        f(linear, &idx[..dim]);
        for axis in (0..dim).rev() {
            idx[axis] += 1;
            if idx[axis] < side {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[inline]
pub(crate) fn linear_index(coords: &[usize], side: usize) -> usize {
    coords.iter().fold(0, |acc, &c| acc * side + c)
}

/// An addressable cube `z + [0, 3^level)^d` inside an ambient lattice cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TriadicCube {
    dim: usize,
    level: u32,
    offset: [usize; MAX_DIM],
}

impl TriadicCube {
    pub fn new(dim: usize, level: u32, offset: &[usize]) -> Result<Self> {
        check_dim(dim)?;
        if offset.len() != dim {
            return Err(Error::param(format!(
                "offset {offset:?} does not have {dim} components"
            )));
        }
        let side = pow3(level);
        if let Some(c) = offset.iter().find(|&&c| c % side != 0) {
            return Err(Error::param(format!(
                "offset component {c} is not a multiple of 3^{level}"
            )));
        }
        let mut o = [0; MAX_DIM];
        o[..dim].copy_from_slice(offset);
        Ok(TriadicCube { dim, level, offset: o })
    }

    /// The cube `[0, 3^level)^d`.
    pub fn origin(dim: usize, level: u32) -> Self {
        Self::new(dim, level, &vec![0; dim]).expect("origin cube is valid")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn level(&self) -> u32 {
        self.level
    }

    #[inline]
    pub fn offset(&self) -> &[usize] {
        &self.offset[..self.dim]
    }

    /// Side length in unit cells.
    #[inline]
    pub fn side(&self) -> usize {
        pow3(self.level)
    }

    pub fn cell_count(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    /// Lebesgue measure (equal to the cell count).
    pub fn volume(&self) -> f64 {
        self.cell_count() as f64
    }

    pub fn contains(&self, other: &TriadicCube) -> bool {
        self.dim == other.dim
            && other.level <= self.level
            && (0..self.dim).all(|i| {
                other.offset[i] >= self.offset[i]
                    && other.offset[i] + other.side() <= self.offset[i] + self.side()
            })
    }
}

impl Serialize for TriadicCube {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            level: u32,
            offset: &'a [usize],
        }
        Repr { level: self.level, offset: self.offset() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TriadicCube {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Repr {
            level: u32,
            offset: Vec<usize>,
        }
        let r = Repr::deserialize(d)?;
        TriadicCube::new(r.offset.len(), r.level, &r.offset).map_err(serde::de::Error::custom)
    }
}

/// All subcubes of `ambient` at `level`, in lexicographic offset order.
pub fn subcubes(ambient: &TriadicCube, level: u32) -> Result<Vec<TriadicCube>> {
    if level > ambient.level {
        return Err(Error::param(format!(
            "subcube level {level} exceeds ambient level {}",
            ambient.level
        )));
    }
    let per_axis = pow3(ambient.level - level);
    let side = pow3(level);
    let dim = ambient.dim;
    let mut out = Vec::with_capacity(per_axis.pow(dim as u32));
    for_each_index(dim, per_axis, |_, idx| {
        let mut offset = [0; MAX_DIM];
        for i in 0..dim {
            offset[i] = ambient.offset[i] + idx[i] * side;
        }
        out.push(TriadicCube { dim, level, offset });
    });
    Ok(out)
}

/// Law of a random coefficient field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleKind {
    /// Every cell equals `value * I`.
    Constant { value: f64 },
    /// Layered medium: cell `x` carries `diag(alpha(x_1), 1, ..)` with
    /// `alpha` drawn per layer from the two-phase law.
    Laminate1d { p: f64, sigma_hi: f64, sigma_lo: f64 },
    /// Each cell independently `sigma_hi * I` with probability `p`, else
    /// `sigma_lo * I`.
    TwoPhaseIid { p: f64, sigma_hi: f64, sigma_lo: f64 },
    /// Each cell independently `exp(mu + sigma Z) * I`.
    LognormalIid { mu: f64, sigma: f64 },
    /// Fixed cell data: one scalar per cell or `d^2` row-major entries per
    /// cell, covering exactly the ambient cube.
    Explicit { cells: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn new(kind: EnsembleKind, seed: u64) -> Self {
        EnsembleSpec { kind, seed }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(EnsembleKind::Constant { value }, 0)
    }

    pub fn two_phase(p: f64, sigma_hi: f64, sigma_lo: f64, seed: u64) -> Self {
        Self::new(EnsembleKind::TwoPhaseIid { p, sigma_hi, sigma_lo }, seed)
    }

    /// Symmetric two-phase law with cell contrast `theta`: phases
    /// `sqrt(theta)` and `1/sqrt(theta)`, each with probability one half.
    pub fn two_phase_contrast(theta: f64, seed: u64) -> Self {
        let r = theta.sqrt();
        Self::two_phase(0.5, r, 1.0 / r, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EnsembleSpec { kind: self.kind.clone(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let two_phase = |p: f64, hi: f64, lo: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("phase probability {p} not in [0, 1]")));
            }
            positive("sigma_lo", lo)?;
            positive("sigma_hi", hi)?;
            if lo > hi {
                return Err(Error::param(format!("sigma_lo {lo} exceeds sigma_hi {hi}")));
            }
            Ok(())
        };
        match &self.kind {
            EnsembleKind::Constant { value } => positive("value", *value),
            EnsembleKind::Laminate1d { p, sigma_hi, sigma_lo }
            | EnsembleKind::TwoPhaseIid { p, sigma_hi, sigma_lo } => {
                two_phase(*p, *sigma_hi, *sigma_lo)
            }
            EnsembleKind::LognormalIid { mu, sigma } => {
                if !mu.is_finite() || !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::param(format!("bad lognormal parameters ({mu}, {sigma})")));
                }
                Ok(())
            }
            EnsembleKind::Explicit { cells } => {
                if cells.is_empty() {
                    return Err(Error::param("explicit field has no cells"));
                }
                Ok(())
            }
        }
    }

    /// True when the law is invariant under signed axis permutations.
    pub fn is_isotropic(&self) -> bool {
        matches!(
            self.kind,
            EnsembleKind::Constant { .. }
                | EnsembleKind::TwoPhaseIid { .. }
                | EnsembleKind::LognormalIid { .. }
        )
    }
}

/// Stream key for a cell: coordinates are below `3^8 < 2^16`.
fn cell_key(coords: &[usize]) -> u64 {
    coords
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &c)| acc | ((c as u64) << (16 * i)))
}

const LAYER_TAG: u64 = 1 << 63;

fn cell_rng(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Cell-wise constant SPD coefficient field on `[0, 3^m)^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    dim: usize,
    ambient_level: u32,
    side: usize,
    entries: Vec<f64>,
    descriptor: Option<EnsembleSpec>,
}

impl CoefficientField {
    /// Draws a field from `spec`. Each cell reads its own random stream,
    /// keyed by the seed and the cell coordinates, so a larger ambient
    /// level extends a smaller field rather than reshuffling it.
    pub fn generate(spec: &EnsembleSpec, dim: usize, ambient_level: u32) -> Result<Self> {
        check_dim(dim)?;
        spec.validate()?;
        let side = Self::check_capacity(dim, ambient_level)?;
        let n_cells = side.pow(dim as u32);
        let dd = dim * dim;

        let entries = match &spec.kind {
            EnsembleKind::Explicit { cells } => {
                if cells.len() == n_cells {
                    let mut e = vec![0.0; n_cells * dd];
                    for (c, &v) in cells.iter().enumerate() {
                        for i in 0..dim {
                            e[c * dd + i * dim + i] = v;
                        }
                    }
                    e
                } else if cells.len() == n_cells * dd {
                    cells.clone()
                } else {
                    return Err(Error::param(format!(
                        "explicit field has {} values, expected {n_cells} or {}",
                        cells.len(),
                        n_cells * dd
                    )));
                }
            }
            kind => {
                let mut e = vec![0.0; n_cells * dd];
                e.par_chunks_mut(dd).enumerate().for_each(|(c, out)| {
                    let mut coords = [0usize; MAX_DIM];
                    let mut rem = c;
                    for axis in (0..dim).rev() {
                        coords[axis] = rem % side;
                        rem /= side;
                    }
                    let diag = draw_cell(kind, spec.seed, &coords[..dim]);
                    for i in 0..dim {
                        out[i * dim + i] = diag[i];
                    }
                });
                e
            }
        };
        let field = CoefficientField {
            dim,
            ambient_level,
            side,
            entries,
            descriptor: Some(spec.clone()),
        };
        field.validate_cells()?;
        Ok(field)
    }

    /// Builds a field from explicit cell matrices in row-major cell order.
    pub fn from_cells(dim: usize, ambient_level: u32, cells: &[SpdMatrix]) -> Result<Self> {
        check_dim(dim)?;
        let side = Self::check_capacity(dim, ambient_level)?;
        if cells.len() != side.pow(dim as u32) {
            return Err(Error::param(format!(
                "{} cells supplied for a level-{ambient_level} field in d={dim}",
                cells.len()
            )));
        }
        let mut entries = Vec::with_capacity(cells.len() * dim * dim);
        for c in cells {
            if c.dim() != dim {
                return Err(Error::param("cell matrix dimension mismatch"));
            }
            entries.extend(c.row_major());
        }
        Ok(CoefficientField { dim, ambient_level, side, entries, descriptor: None })
    }

    /// Convenience for fields whose cells are scalar multiples of the identity.
    pub fn from_scalars(dim: usize, ambient_level: u32, values: &[f64]) -> Result<Self> {
        let cells = values
            .iter()
            .map(|&v| SpdMatrix::scalar(dim, v))
            .collect::<Result<Vec<_>>>()?;
        Self::from_cells(dim, ambient_level, &cells)
    }

    fn check_capacity(dim: usize, ambient_level: u32) -> Result<usize> {
        if ambient_level > MAX_AMBIENT_LEVEL {
            return Err(Error::Capacity(format!(
                "ambient level {ambient_level} exceeds {MAX_AMBIENT_LEVEL}"
            )));
        }
        let side = pow3(ambient_level);
        let entries = side.pow(dim as u32) * dim * dim;
        if entries > MAX_FIELD_ENTRIES {
            return Err(Error::Capacity(format!(
                "a level-{ambient_level} field in d={dim} needs {entries} matrix entries"
            )));
        }
        Ok(side)
    }

    fn validate_cells(&self) -> Result<()> {
        for c in 0..self.cell_count() {
            SpdMatrix::new(self.cell_mat(c)).map_err(|e| {
                Error::param(format!("cell {c}: {e}"))
            })?;
        }
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn ambient_level(&self) -> u32 {
        self.ambient_level
    }

    /// Cells per axis, `3^m`.
    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cell_count(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn descriptor(&self) -> Option<&EnsembleSpec> {
        self.descriptor.as_ref()
    }

    pub fn ambient(&self) -> TriadicCube {
        TriadicCube::origin(self.dim, self.ambient_level)
    }

    pub fn contains(&self, cube: &TriadicCube) -> bool {
        self.ambient().contains(cube)
    }

    pub(crate) fn check_cube(&self, cube: &TriadicCube) -> Result<()> {
        if !self.contains(cube) {
            return Err(Error::param(format!(
                "cube {cube:?} is not inside the level-{} ambient cube",
                self.ambient_level
            )));
        }
        Ok(())
    }

    /// Row-major entries of every cell matrix, cell after cell.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn cell_index(&self, coords: &[usize]) -> usize {
        linear_index(coords, self.side)
    }

    #[inline]
    pub fn cell_mat(&self, index: usize) -> Mat {
        let dd = self.dim * self.dim;
        let s = &self.entries[index * dd..(index + 1) * dd];
        let mut m = Mat::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.set(i, j, s[i * self.dim + j]);
            }
        }
        m
    }

    /// Cell matrix at integer coordinates in `[0, 3^m)^d`.
    pub fn cell(&self, coords: &[usize]) -> SpdMatrix {
        SpdMatrix::new(self.cell_mat(self.cell_index(coords))).expect("cells are validated at construction")
    }

    /// Cell matrices of `cube`, in the cube's row-major cell order.
    pub fn cube_cells(&self, cube: &TriadicCube) -> Vec<Mat> {
        let mut out = Vec::with_capacity(cube.cell_count());
        let mut coords = [0usize; MAX_DIM];
        for_each_index(self.dim, cube.side(), |_, local| {
            for i in 0..self.dim {
                coords[i] = cube.offset()[i] + local[i];
            }
            out.push(self.cell_mat(self.cell_index(&coords[..self.dim])));
        });
        out
    }

    /// Returns a copy with every cell replaced by `f(coords, old)`.
    pub fn map_cells(
        &self,
        mut f: impl FnMut(&[usize], SpdMatrix) -> SpdMatrix,
    ) -> CoefficientField {
        let mut out = self.clone();
        out.descriptor = None;
        let dd = self.dim * self.dim;
        for_each_index(self.dim, self.side, |c, coords| {
            let new = f(coords, self.cell(coords));
            out.entries[c * dd..(c + 1) * dd].copy_from_slice(&new.row_major());
        });
        out
    }

    /// Restriction to the lower-corner cube of `level`.
    pub fn restrict(&self, level: u32) -> Result<CoefficientField> {
        if level > self.ambient_level {
            return Err(Error::param("restriction level exceeds ambient level"));
        }
        let cube = TriadicCube::origin(self.dim, level);
        let entries = self
            .cube_cells(&cube)
            .iter()
            .flat_map(|m| m.row_major())
            .collect();
        Ok(CoefficientField {
            dim: self.dim,
            ambient_level: level,
            side: pow3(level),
            entries,
            descriptor: self.descriptor.clone(),
        })
    }
}

fn draw_cell(kind: &EnsembleKind, seed: u64, coords: &[usize]) -> [f64; MAX_DIM] {
    let dim = coords.len();
    let mut diag = [1.0; MAX_DIM];
    match *kind {
        EnsembleKind::Constant { value } => diag[..dim].fill(value),
        EnsembleKind::TwoPhaseIid { p, sigma_hi, sigma_lo } => {
            let u: f64 = cell_rng(seed, cell_key(coords)).random();
            diag[..dim].fill(if u < p { sigma_hi } else { sigma_lo });
        }
        EnsembleKind::Laminate1d { p, sigma_hi, sigma_lo } => {
            let u: f64 = cell_rng(seed, LAYER_TAG | coords[0] as u64).random();
            diag[0] = if u < p { sigma_hi } else { sigma_lo };
        }
        EnsembleKind::LognormalIid { mu, sigma } => {
            let law = LogNormal::new(mu, sigma).expect("validated lognormal parameters");
            diag[..dim].fill(law.sample(&mut cell_rng(seed, cell_key(coords))));
        }
        EnsembleKind::Explicit { .. } => unreachable!("explicit cells are copied"),
    }
    diag
}

/// Signed permutation of the coordinate axes: axis `i` of the image is axis
/// `perm[i]` of the source, reversed when `flips[i]` is set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxisMap {
    perm: Vec<usize>,
    flips: Vec<bool>,
}

impl AxisMap {
    pub fn new(perm: Vec<usize>, flips: Vec<bool>) -> Result<Self> {
        let d = perm.len();
        check_dim(d)?;
        if flips.len() != d {
            return Err(Error::param("flip vector length differs from permutation length"));
        }
        let mut seen = [false; MAX_DIM];
        for &p in &perm {
            if p >= d || seen[p] {
                return Err(Error::param(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(AxisMap { perm, flips })
    }

    pub fn permutation(perm: Vec<usize>) -> Result<Self> {
        let d = perm.len();
        Self::new(perm, vec![false; d])
    }

    pub fn identity(dim: usize) -> Self {
        AxisMap { perm: (0..dim).collect(), flips: vec![false; dim] }
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn inverse(&self) -> Self {
        let d = self.dim();
        let mut perm = vec![0; d];
        let mut flips = vec![false; d];
        for i in 0..d {
            perm[self.perm[i]] = i;
            flips[self.perm[i]] = self.flips[i];
        }
        AxisMap { perm, flips }
    }

    /// All `2^d d!` signed permutations, identity first.
    pub fn group(dim: usize) -> Vec<AxisMap> {
        let mut perms: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..dim {
            let mut next = Vec::new();
            for p in &perms {
                for a in 0..dim {
                    if !p.contains(&a) {
                        let mut q = p.clone();
                        q.push(a);
                        next.push(q);
                    }
                }
            }
            perms = next;
        }
        let mut out = Vec::new();
        for p in perms {
            for mask in 0..(1u32 << dim) {
                let flips = (0..dim).map(|i| mask & (1 << i) != 0).collect();
                out.push(AxisMap { perm: p.clone(), flips });
            }
        }
        out
    }

    /// `R^t A R`: entry `(i, j)` is `s_i s_j A[perm i][perm j]`.
    pub fn conjugate(&self, a: &Mat) -> Mat {
        let d = self.dim();
        let mut out = Mat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                let s = if self.flips[i] != self.flips[j] { -1.0 } else { 1.0 };
                out.set(i, j, s * a.get(self.perm[i], self.perm[j]));
            }
        }
        out
    }

    /// Source cell coordinates for image coordinates `y` on a lattice of
    /// `side` cells per axis.
    fn source_cell(&self, y: &[usize], side: usize, out: &mut [usize]) {
        for i in 0..self.dim() {
            out[self.perm[i]] = if self.flips[i] { side - 1 - y[i] } else { y[i] };
        }
    }

    /// Image of a cube under the map, inside an ambient lattice of `side` cells.
    pub fn map_cube(&self, cube: &TriadicCube, side: usize) -> TriadicCube {
        let d = self.dim();
        let mut offset = vec![0; d];
        for i in 0..d {
            let x = cube.offset()[self.perm[i]];
            offset[i] = if self.flips[i] { side - cube.side() - x } else { x };
        }
        TriadicCube::new(d, cube.level(), &offset).expect("signed permutations preserve the triadic grid")
    }
}

/// The conjugated field `R^t a(R .) R` on the same ambient cube.
pub fn dihedral_conjugate(field: &CoefficientField, map: &AxisMap) -> Result<CoefficientField> {
    if map.dim() != field.dim {
        return Err(Error::param("axis map dimension differs from field dimension"));
    }
    let d = field.dim;
    let dd = d * d;
    let mut entries = vec![0.0; field.entries.len()];
    let mut src = [0usize; MAX_DIM];
    for_each_index(d, field.side, |c, y| {
        map.source_cell(y, field.side, &mut src[..d]);
        let a = field.cell_mat(field.cell_index(&src[..d]));
        entries[c * dd..(c + 1) * dd].copy_from_slice(&map.conjugate(&a).row_major());
    });
    Ok(CoefficientField {
        dim: d,
        ambient_level: field.ambient_level,
        side: field.side,
        entries,
        descriptor: None,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldJson {
    dimension: usize,
    ambient_level: u32,
    ensemble: Option<EnsembleSpec>,
    cells: Vec<f64>,
}

const BINARY_MAGIC: &[u8; 4] = b"CGF1";

impl CoefficientField {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FieldJson {
            dimension: self.dim,
            ambient_level: self.ambient_level,
            ensemble: self.descriptor.clone(),
            cells: self.entries.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: FieldJson = serde_json::from_str(s)?;
        Self::from_parts(f.dimension, f.ambient_level, f.ensemble, f.cells)
    }

    fn from_parts(
        dim: usize,
        ambient_level: u32,
        descriptor: Option<EnsembleSpec>,
        entries: Vec<f64>,
    ) -> Result<Self> {
        check_dim(dim)?;
        let side = Self::check_capacity(dim, ambient_level)?;
        if entries.len() != side.pow(dim as u32) * dim * dim {
            return Err(Error::Format(format!(
                "{} entries do not match a level-{ambient_level} field in d={dim}",
                entries.len()
            )));
        }
        let field = CoefficientField { dim, ambient_level, side, entries, descriptor };
        field.validate_cells()?;
        Ok(field)
    }

    /// Binary layout: `CGF1`, `u32` dimension, `u32` ambient level, `u64`
    /// seed, `u32` length plus UTF-8 JSON ensemble descriptor (empty when
    /// absent), then every cell matrix row-major as little-endian `f64`.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.ambient_level.to_le_bytes())?;
        let seed = self.descriptor.as_ref().map_or(0, |s| s.seed);
        w.write_all(&seed.to_le_bytes())?;
        let desc = match &self.descriptor {
            Some(s) => serde_json::to_vec(s)?,
            None => Vec::new(),
        };
        w.write_all(&(desc.len() as u32).to_le_bytes())?;
        w.write_all(&desc)?;
        for x in &self.entries {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("bad field file magic".into()));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b)?;
        let dim = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u32b)?;
        let level = u32::from_le_bytes(u32b);
        r.read_exact(&mut u64b)?;
        let seed = u64::from_le_bytes(u64b);
        r.read_exact(&mut u32b)?;
        let mut desc = vec![0u8; u32::from_le_bytes(u32b) as usize];
        r.read_exact(&mut desc)?;
        let descriptor: Option<EnsembleSpec> = if desc.is_empty() {
            None
        } else {
            Some(serde_json::from_slice(&desc)?)
        };
        if descriptor.as_ref().is_some_and(|d| d.seed != seed) {
            return Err(Error::Format("header seed disagrees with descriptor".into()));
        }
        check_dim(dim)?;
        let side = Self::check_capacity(dim, level)?;
        let n = side.pow(dim as u32) * dim * dim;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64b)?;
            entries.push(f64::from_le_bytes(u64b));
        }
        Self::from_parts(dim, level, descriptor, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field() {
        let f = CoefficientField::generate(&EnsembleSpec::constant(2.0), 2, 1).unwrap();
        assert_eq!(f.cell_count(), 9);
        for c in 0..9 {
            assert_eq!(f.cell_mat(c), Mat::scalar(2, 2.0));
        }
    }

    #[test]
    fn degenerate_two_phase() {
        let spec = EnsembleSpec::two_phase(1.0, 10.0, 0.1, 7);
        let f = CoefficientField::generate(&spec, 2, 2).unwrap();
        assert_eq!(f.cell_count(), 81);
        assert!((0..81).all(|c| f.cell_mat(c) == Mat::scalar(2, 10.0)));
    }

    #[test]
    fn two_phase_fraction_within_three_standard_errors() {
        let spec = EnsembleSpec::two_phase(0.5, 10.0, 0.1, 42);
        let f = CoefficientField::generate(&spec, 2, 3).unwrap();
        let n = f.cell_count() as f64;
        let hi = (0..f.cell_count()).filter(|&c| f.cell_mat(c).get(0, 0) == 10.0).count() as f64;
        let se = (0.25 / n).sqrt();
        assert!((hi / n - 0.5).abs() <= 3.0 * se, "fraction {}", hi / n);
    }

    #[test]
    fn invalid_specs() {
        for kind in [
            EnsembleKind::TwoPhaseIid { p: 1.5, sigma_hi: 1.0, sigma_lo: 0.5 },
            EnsembleKind::TwoPhaseIid { p: 0.5, sigma_hi: 1.0, sigma_lo: 2.0 },
            EnsembleKind::TwoPhaseIid { p: 0.5, sigma_hi: 1.0, sigma_lo: 0.0 },
            EnsembleKind::Constant { value: -1.0 },
        ] {
            let r = CoefficientField::generate(&EnsembleSpec::new(kind, 0), 2, 1);
            assert!(matches!(r, Err(Error::Parameter(_))));
        }
        let r = CoefficientField::generate(&EnsembleSpec::constant(1.0), 2, 9);
        assert!(matches!(r, Err(Error::Capacity(_))));
        assert!(CoefficientField::generate(&EnsembleSpec::constant(1.0), 4, 1).is_err());
    }

    #[test]
    fn subcube_counts_and_order() {
        let two = TriadicCube::origin(2, 1);
        assert_eq!(subcubes(&two, 0).unwrap().len(), 9);
        let s = subcubes(&TriadicCube::origin(2, 2), 1).unwrap();
        assert_eq!(s.len(), 9);
        assert!(s.iter().all(|c| c.side() == 3));
        assert_eq!(s[1].offset(), &[0, 3]);
        assert_eq!(s[3].offset(), &[3, 0]);
        assert_eq!(subcubes(&TriadicCube::origin(3, 3), 0).unwrap().len(), 19683);
        assert!(subcubes(&two, 2).is_err());
    }

    #[test]
    fn partition_covers_once() {
        for (d, m, n) in [(1, 3, 1), (2, 3, 1), (2, 2, 0), (3, 2, 1)] {
            let amb = TriadicCube::origin(d, m);
            let mut hits = vec![0u8; amb.cell_count()];
            for cube in subcubes(&amb, n).unwrap() {
                assert!(amb.contains(&cube));
                for_each_index(d, cube.side(), |_, local| {
                    let g: Vec<usize> = (0..d).map(|i| cube.offset()[i] + local[i]).collect();
                    hits[linear_index(&g, amb.side())] += 1;
                });
            }
            assert!(hits.iter().all(|&h| h == 1));
        }
    }

    #[test]
    fn cube_validation() {
        assert!(TriadicCube::new(2, 1, &[3, 1]).is_err());
        assert!(TriadicCube::new(2, 1, &[3]).is_err());
        let f = CoefficientField::generate(&EnsembleSpec::constant(1.0), 2, 2).unwrap();
        assert!(f.contains(&TriadicCube::new(2, 1, &[6, 3]).unwrap()));
        assert!(!f.contains(&TriadicCube::new(2, 1, &[9, 3]).unwrap()));
    }

    #[test]
    fn laminate_swap_axes() {
        let spec = EnsembleSpec::new(
            EnsembleKind::Laminate1d { p: 0.5, sigma_hi: 5.0, sigma_lo: 0.2 },
            3,
        );
        let f = CoefficientField::generate(&spec, 2, 2).unwrap();
        let swap = AxisMap::permutation(vec![1, 0]).unwrap();
        let g = dihedral_conjugate(&f, &swap).unwrap();
        for x in 0..9 {
            for y in 0..9 {
                let src = f.cell(&[x, y]);
                let alpha = src.get(0, 0);
                assert_eq!(src.get(1, 1), 1.0);
                let img = g.cell(&[y, x]);
                assert_eq!(img.row_major(), vec![1.0, 0.0, 0.0, alpha]);
            }
        }
    }

    #[test]
    fn dihedral_inverse_round_trip() {
        let cells: Vec<SpdMatrix> = (0..27)
            .map(|c| {
                let x = c as f64;
                SpdMatrix::new(Mat::from_row_major(3, &[
                    3.0 + x, 0.1, 0.2, 0.1, 2.0, -0.3, 0.2, -0.3, 1.0 + 0.1 * x,
                ]).unwrap())
                .unwrap()
            })
            .collect();
        let f = CoefficientField::from_cells(3, 1, &cells).unwrap();
        for map in AxisMap::group(3) {
            let g = dihedral_conjugate(&f, &map).unwrap();
            let back = dihedral_conjugate(&g, &map.inverse()).unwrap();
            assert_eq!(back.entries(), f.entries());
        }
        assert_eq!(AxisMap::group(3).len(), 48);
        let id = dihedral_conjugate(&f, &AxisMap::identity(3)).unwrap();
        assert_eq!(id.entries(), f.entries());
    }

    #[test]
    fn constant_field_is_dihedral_invariant() {
        let f = CoefficientField::generate(&EnsembleSpec::constant(3.0), 2, 2).unwrap();
        for map in AxisMap::group(2) {
            assert_eq!(dihedral_conjugate(&f, &map).unwrap().entries(), f.entries());
        }
    }

    #[test]
    fn extension_consistency() {
        for spec in [
            EnsembleSpec::two_phase(0.3, 4.0, 0.25, 11),
            EnsembleSpec::new(EnsembleKind::LognormalIid { mu: 0.0, sigma: 1.0 }, 5),
            EnsembleSpec::new(EnsembleKind::Laminate1d { p: 0.5, sigma_hi: 2.0, sigma_lo: 1.0 }, 5),
        ] {
            let big = CoefficientField::generate(&spec, 2, 3).unwrap();
            let small = CoefficientField::generate(&spec, 2, 1).unwrap();
            assert_eq!(big.restrict(1).unwrap().entries(), small.entries());
            let again = CoefficientField::generate(&spec, 2, 3).unwrap();
            assert_eq!(again, big);
        }
    }

    #[test]
    fn serialization_round_trips_bit_exactly() {
        let spec = EnsembleSpec::new(EnsembleKind::LognormalIid { mu: 0.1, sigma: 0.7 }, 99);
        let f = CoefficientField::generate(&spec, 2, 2).unwrap();
        let back = CoefficientField::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        let back = CoefficientField::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, f);
        assert!(back.entries().iter().zip(f.entries()).all(|(a, b)| a.to_bits() == b.to_bits()));
        buf[0] = b'X';
        assert!(CoefficientField::read_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn spec_json_is_strict() {
        let s = r#"{"kind":{"type":"two_phase_iid","p":0.5,"sigma_hi":10,"sigma_lo":0.1},"seed":42}"#;
        let spec: EnsembleSpec = serde_json::from_str(s).unwrap();
        assert_eq!(spec, EnsembleSpec::two_phase(0.5, 10.0, 0.1, 42));
        let bad = r#"{"kind":{"type":"two_phase_iid","p":0.5,"sigma_hi":10,"sigma_lo":0.1,"q":1},"seed":42}"#;
        assert!(serde_json::from_str::<EnsembleSpec>(bad).is_err());
    }
}
