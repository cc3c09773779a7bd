//! Multilinear (Q1) energy form on a lattice cube, one element per unit
//! cell, integrated exactly for cell-constant coefficients.

use nalgebra::DMatrix;

use crate::grid::{for_each_index, linear_index, CoefficientField, TriadicCube};
use crate::spd::{Mat, MAX_DIM};

/// `G[i][j][a][b] = ∫_{[0,1]^d} ∂_i φ_a ∂_j φ_b` for the `2^d` corner basis
/// functions, so an element matrix is `Σ_ij A_ij G[i][j]`.
struct ReferenceGradients {
    dim: usize,
    table: Vec<f64>,
}

impl ReferenceGradients {
    fn new(dim: usize) -> Self {
        let nc = 1 << dim;
        let bit = |a: usize, k: usize| (a >> (dim - 1 - k)) & 1;
        let sign = |x: usize| if x == 1 { 1.0 } else { -1.0 };
        let mass = |x: usize, y: usize| if x == y { 1.0 / 3.0 } else { 1.0 / 6.0 };
        let mut table = vec![0.0; dim * dim * nc * nc];
        for i in 0..dim {
            for j in 0..dim {
                for a in 0..nc {
                    for b in 0..nc {
                        let mut v = if i == j {
                            sign(bit(a, i)) * sign(bit(b, i))
                        } else {
                            0.25 * sign(bit(a, i)) * sign(bit(b, j))
                        };
                        for k in 0..dim {
                            if k != i && k != j {
                                v *= mass(bit(a, k), bit(b, k));
                            }
                        }
                        table[((i * dim + j) * nc + a) * nc + b] = v;
                    }
                }
            }
        }
        ReferenceGradients { dim, table }
    }

    fn element(&self, a: &Mat, out: &mut [f64]) {
        let nc = 1 << self.dim;
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..self.dim {
            for j in 0..self.dim {
                let aij = a.get(i, j);
                if aij == 0.0 {
                    continue;
                }
                let g = &self.table[(i * self.dim + j) * nc * nc..(i * self.dim + j + 1) * nc * nc];
                for (o, gv) in out.iter_mut().zip(g) {
                    *o += aij * gv;
                }
            }
        }
    }
}

/// Assembled stiffness form of a cube: for every node, the couplings to its
/// `3^d` lattice neighbours.
pub struct Stiffness {
    cube: TriadicCube,
    nodes_per_axis: usize,
    node_count: usize,
    stencil: Vec<f64>,
    deltas: Vec<isize>,
    cells: Vec<Mat>,
    corner_deltas: Vec<usize>,
}

impl Stiffness {
    pub fn assemble(field: &CoefficientField, cube: &TriadicCube) -> Self {
        let dim = cube.dim();
        let npa = cube.side() + 1;
        let node_count = npa.pow(dim as u32);
        let width = 3usize.pow(dim as u32);
        let nc = 1 << dim;

        let mut deltas = vec![0isize; width];
        for_each_index(dim, 3, |s, o| {
            deltas[s] = o.iter().fold(0isize, |acc, &x| acc * npa as isize + x as isize - 1);
        });
        let mut corner_deltas = vec![0usize; nc];
        for (a, cd) in corner_deltas.iter_mut().enumerate() {
            *cd = (0..dim).fold(0, |acc, k| acc * npa + ((a >> (dim - 1 - k)) & 1));
        }
        // stencil slot of corner b seen from corner a
        let mut slot = vec![0usize; nc * nc];
        for a in 0..nc {
            for b in 0..nc {
                slot[a * nc + b] = (0..dim).fold(0, |acc, k| {
                    let ak = (a >> (dim - 1 - k)) & 1;
                    let bk = (b >> (dim - 1 - k)) & 1;
                    acc * 3 + (1 + bk) - ak
                });
            }
        }

        let cells = field.cube_cells(cube);
        let reference = ReferenceGradients::new(dim);
        let mut stencil = vec![0.0; node_count * width];
        let mut ke = vec![0.0; nc * nc];
        for_each_index(dim, cube.side(), |c, coords| {
            reference.element(&cells[c], &mut ke);
            let base = linear_index(coords, npa);
            for a in 0..nc {
                let node = base + corner_deltas[a];
                for b in 0..nc {
                    stencil[node * width + slot[a * nc + b]] += ke[a * nc + b];
                }
            }
        });

        Stiffness { cube: *cube, nodes_per_axis: npa, node_count, stencil, deltas, cells, corner_deltas }
    }

    pub fn cube(&self) -> &TriadicCube {
        &self.cube
    }

    pub fn dim(&self) -> usize {
        self.cube.dim()
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    pub fn cells(&self) -> &[Mat] {
        &self.cells
    }

    /// `y = K x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let width = self.deltas.len();
        for (n, yn) in y.iter_mut().enumerate() {
            let row = &self.stencil[n * width..(n + 1) * width];
            let mut acc = 0.0;
            for (k, &delta) in row.iter().zip(&self.deltas) {
                if *k != 0.0 {
                    acc += k * x[(n as isize + delta) as usize];
                }
            }
            *yn = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let width = self.deltas.len();
        let centre = width / 2;
        (0..self.node_count).map(|n| self.stencil[n * width + centre]).collect()
    }

    /// `K[x, y]`.
    pub fn form(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut ky = vec![0.0; self.node_count];
        self.apply(y, &mut ky);
        x.iter().zip(&ky).map(|(a, b)| a * b).sum()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let npa = self.nodes_per_axis;
        let mut rem = node;
        for _ in 0..self.dim() {
            let c = rem % npa;
            if c == 0 || c == npa - 1 {
                return true;
            }
            rem /= npa;
        }
        false
    }

    /// Local integer coordinates of a node.
    pub fn node_coords(&self, node: usize) -> [usize; MAX_DIM] {
        let d = self.dim();
        let mut out = [0; MAX_DIM];
        let mut rem = node;
        for axis in (0..d).rev() {
            out[axis] = rem % self.nodes_per_axis;
            rem /= self.nodes_per_axis;
        }
        out
    }

    /// Nodal interpolant of `x -> p . x` in local coordinates.
    pub fn affine(&self, p: &[f64]) -> Vec<f64> {
        (0..self.node_count)
            .map(|n| {
                let c = self.node_coords(n);
                (0..self.dim()).map(|i| p[i] * c[i] as f64).sum()
            })
            .collect()
    }

    /// `∫_cell ∇w` for every cell, flattened `d` entries per cell.
    pub fn cell_gradient_integrals(&self, w: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let nc = 1 << dim;
        let weight = 0.5f64.powi(dim as i32 - 1);
        let mut out = vec![0.0; self.cells.len() * dim];
        for_each_index(dim, self.cube.side(), |c, coords| {
            let base = linear_index(coords, self.nodes_per_axis);
            for a in 0..nc {
                let wa = w[base + self.corner_deltas[a]];
                for k in 0..dim {
                    let s = if (a >> (dim - 1 - k)) & 1 == 1 { 1.0 } else { -1.0 };
                    out[c * dim + k] += s * weight * wa;
                }
            }
        });
        out
    }

    /// Load vector `b_i = ∫ q . ∇φ_i`.
    pub fn flux_load(&self, q: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let nc = 1 << dim;
        let weight = 0.5f64.powi(dim as i32 - 1);
        let mut contrib = vec![0.0; nc];
        for (a, c) in contrib.iter_mut().enumerate() {
            *c = (0..dim)
                .map(|k| {
                    let s = if (a >> (dim - 1 - k)) & 1 == 1 { 1.0 } else { -1.0 };
                    s * weight * q[k]
                })
                .sum();
        }
        let mut b = vec![0.0; self.node_count];
        for_each_index(dim, self.cube.side(), |_, coords| {
            let base = linear_index(coords, self.nodes_per_axis);
            for a in 0..nc {
                b[base + self.corner_deltas[a]] += contrib[a];
            }
        });
        b
    }

    /// Dense copy of the rows and columns listed in `nodes`.
    pub fn dense_block(&self, nodes: &[usize]) -> DMatrix<f64> {
        let width = self.deltas.len();
        let mut position = vec![usize::MAX; self.node_count];
        for (k, &n) in nodes.iter().enumerate() {
            position[n] = k;
        }
        let mut m = DMatrix::zeros(nodes.len(), nodes.len());
        for (r, &n) in nodes.iter().enumerate() {
            for s in 0..width {
                let k = self.stencil[n * width + s];
                if k == 0.0 {
                    continue;
                }
                let col = position[(n as isize + self.deltas[s]) as usize];
                if col != usize::MAX {
                    m[(r, col)] += k;
                }
            }
        }
        m
    }
}
