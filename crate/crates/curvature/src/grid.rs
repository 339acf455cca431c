//! Discrete model manifolds: flat periodic tori and cylinders whose first axis
//! is bounded, together with a summation-by-parts calculus.
//!
//! Nodes are stored row-major with the first axis slowest. On a cylinder the
//! first axis carries `N₁` vertices from `x₁ = 0` to `x₁ = L₁` inclusive, so
//! its spacing is `L₁/(N₁−1)`; both end slices are boundary nodes and carry
//! half trapezoid weight. Periodic axes use spacing `L/N`.
//!
//! The stiffness form `Σ_edges w_e (u_j − u_i)(w_j − w_i)` is the discrete
//! Dirichlet energy. The Laplacian is defined from it so that
//!
//! ```text
//! Σ_i W_i (Δu)_i w_i = −⟨Mu, w⟩ + Σ_b T (∂_ν u)_b w_b
//! ```
//!
//! holds exactly, where `∂_ν` is the second-order one-sided outward derivative.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PAR_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("field kind mismatch: expected {expected:?} field with {expected_len} values, got {found:?} with {found_len}")]
    KindMismatch {
        expected: FieldKind,
        expected_len: usize,
        found: FieldKind,
        found_len: usize,
    },
    #[error("operation needs a boundary but the manifold is a torus")]
    NoBoundary,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("field dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Torus,
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Interior,
    Boundary,
}

/// Node values on a grid, either on every node or on the boundary nodes only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    kind: FieldKind,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn interior(values: Vec<f64>) -> Self {
        Self {
            kind: FieldKind::Interior,
            values,
        }
    }

    pub fn boundary(values: Vec<f64>) -> Self {
        Self {
            kind: FieldKind::Boundary,
            values,
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            kind: self.kind,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination; both fields must have the same length.
    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.len(), other.len(), "zip_map on fields of different length");
        Self {
            kind: self.kind,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, &v)| (i, v))
    }
}

/// Fixed-order pairwise summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[derive(Clone, Debug)]
pub struct GridManifold {
    dim: usize,
    shape: Vec<usize>,
    lengths: Vec<f64>,
    spacing: Vec<f64>,
    topology: Topology,
    strides: Vec<usize>,
    volume_weights: Vec<f64>,
    boundary_nodes: Vec<usize>,
    boundary_slot: Vec<usize>,
    coeff_r: ScalarField,
    coeff_h: ScalarField,
    coeff_k: ScalarField,
    coeff_sigma: ScalarField,
}

const NOT_BOUNDARY: usize = usize::MAX;

impl GridManifold {
    pub fn build_torus(n: usize, shape: &[usize], lengths: &[f64]) -> Result<Self, GridError> {
        Self::build(Topology::Torus, n, shape, lengths)
    }

    pub fn build_cylinder(n: usize, shape: &[usize], lengths: &[f64]) -> Result<Self, GridError> {
        Self::build(Topology::Cylinder, n, shape, lengths)
    }

    pub fn build(
        topology: Topology,
        n: usize,
        shape: &[usize],
        lengths: &[f64],
    ) -> Result<Self, GridError> {
        if !(2..=5).contains(&n) {
            return Err(GridError::InvalidShape(format!("dimension {n} outside 2..=5")));
        }
        if shape.len() != n || lengths.len() != n {
            return Err(GridError::InvalidShape(format!(
                "dimension {n} needs {n} axis sizes and lengths, got {} and {}",
                shape.len(),
                lengths.len()
            )));
        }
        if let Some(k) = shape.iter().position(|&s| s < 4) {
            return Err(GridError::InvalidShape(format!(
                "axis {} has {} nodes, at least 4 required",
                k + 1,
                shape[k]
            )));
        }
        if let Some(k) = lengths.iter().position(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(GridError::InvalidShape(format!(
                "axis {} has non-positive length {}",
                k + 1,
                lengths[k]
            )));
        }

        let spacing: Vec<f64> = (0..n)
            .map(|k| {
                if k == 0 && topology == Topology::Cylinder {
                    lengths[0] / (shape[0] - 1) as f64
                } else {
                    lengths[k] / shape[k] as f64
                }
            })
            .collect();
        let mut strides = vec![1usize; n];
        for k in (0..n - 1).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        let count = strides[0] * shape[0];
        let cell: f64 = spacing.iter().product();

        let mut volume_weights = vec![cell; count];
        let mut boundary_nodes = Vec::new();
        let mut boundary_slot = vec![NOT_BOUNDARY; count];
        if topology == Topology::Cylinder {
            let slice = strides[0];
            let last = (shape[0] - 1) * slice;
            for offset in [0, last] {
                for node in offset..offset + slice {
                    volume_weights[node] = 0.5 * cell;
                    boundary_slot[node] = boundary_nodes.len();
                    boundary_nodes.push(node);
                }
            }
        }

        let nb = boundary_nodes.len();
        Ok(Self {
            dim: n,
            shape: shape.to_vec(),
            lengths: lengths.to_vec(),
            spacing,
            topology,
            strides,
            volume_weights,
            boundary_nodes,
            boundary_slot,
            coeff_r: ScalarField::interior(vec![0.0; count]),
            coeff_h: ScalarField::boundary(vec![0.0; nb]),
            coeff_k: ScalarField::interior(vec![0.0; count]),
            coeff_sigma: ScalarField::boundary(vec![0.0; nb]),
        })
    }

    /// Replace the background scalar curvature field.
    pub fn with_coeff_r(mut self, r: ScalarField) -> Result<Self, GridError> {
        self.check_interior(&r)?;
        self.check_finite(&r)?;
        self.coeff_r = r;
        Ok(self)
    }

    /// Replace the background boundary mean curvature field.
    pub fn with_coeff_h(mut self, h: ScalarField) -> Result<Self, GridError> {
        self.check_boundary(&h)?;
        self.check_finite(&h)?;
        self.coeff_h = h;
        Ok(self)
    }

    /// Replace the background Gauss curvature (2D runs).
    pub fn with_coeff_k(mut self, k: ScalarField) -> Result<Self, GridError> {
        self.check_interior(&k)?;
        self.check_finite(&k)?;
        self.coeff_k = k;
        Ok(self)
    }

    /// Replace the background geodesic curvature (2D runs).
    pub fn with_coeff_sigma(mut self, s: ScalarField) -> Result<Self, GridError> {
        self.check_boundary(&s)?;
        self.check_finite(&s)?;
        self.coeff_sigma = s;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn has_boundary(&self) -> bool {
        self.topology == Topology::Cylinder
    }

    pub fn node_count(&self) -> usize {
        self.volume_weights.len()
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary_nodes.len()
    }

    pub fn coeff_r(&self) -> &ScalarField {
        &self.coeff_r
    }

    pub fn coeff_h(&self) -> &ScalarField {
        &self.coeff_h
    }

    pub fn coeff_k(&self) -> &ScalarField {
        &self.coeff_k
    }

    pub fn coeff_sigma(&self) -> &ScalarField {
        &self.coeff_sigma
    }

    /// Product of all spacings.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn volume_weights(&self) -> &[f64] {
        &self.volume_weights
    }

    /// Product of the transverse spacings, the area element of a boundary node.
    pub fn boundary_weight(&self) -> f64 {
        self.spacing[1..].iter().product()
    }

    pub fn volume(&self) -> f64 {
        pairwise_sum(&self.volume_weights)
    }

    pub fn boundary_area(&self) -> f64 {
        self.boundary_weight() * self.boundary_count() as f64
    }

    /// Boundary index → node index, first slice (`i₁ = 0`) then last slice.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn boundary_index(&self, node: usize) -> Option<usize> {
        match self.boundary_slot[node] {
            NOT_BOUNDARY => None,
            b => Some(b),
        }
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_slot[node] != NOT_BOUNDARY
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        (0..self.dim)
            .map(|k| (node / self.strides[k]) % self.shape[k])
            .collect()
    }

    pub fn node_of(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.strides)
            .map(|(&i, &s)| i * s)
            .sum()
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|k| ((node / self.strides[k]) % self.shape[k]) as f64 * self.spacing[k])
            .collect()
    }

    /// Node reached from `node` by `offset` steps along `axis`; wraps on
    /// periodic axes and returns `None` past a cylinder end.
    pub fn neighbor(&self, node: usize, axis: usize, offset: isize) -> Option<usize> {
        let n = self.shape[axis] as isize;
        let i = ((node / self.strides[axis]) % self.shape[axis]) as isize;
        let j = i + offset;
        let j = if axis == 0 && self.topology == Topology::Cylinder {
            if j < 0 || j >= n {
                return None;
            }
            j
        } else {
            j.rem_euclid(n)
        };
        Some((node as isize + (j - i) * self.strides[axis] as isize) as usize)
    }

    pub fn field_from(&self, f: impl Fn(&[f64]) -> f64) -> ScalarField {
        ScalarField::interior((0..self.node_count()).map(|i| f(&self.coords(i))).collect())
    }

    pub fn boundary_field_from(&self, f: impl Fn(&[f64]) -> f64) -> ScalarField {
        ScalarField::boundary(
            self.boundary_nodes
                .iter()
                .map(|&i| f(&self.coords(i)))
                .collect(),
        )
    }

    pub fn constant(&self, c: f64) -> ScalarField {
        ScalarField::interior(vec![c; self.node_count()])
    }

    pub fn boundary_constant(&self, c: f64) -> ScalarField {
        ScalarField::boundary(vec![c; self.boundary_count()])
    }

    pub fn check_interior(&self, f: &ScalarField) -> Result<(), GridError> {
        if f.kind() != FieldKind::Interior || f.len() != self.node_count() {
            return Err(GridError::KindMismatch {
                expected: FieldKind::Interior,
                expected_len: self.node_count(),
                found: f.kind(),
                found_len: f.len(),
            });
        }
        Ok(())
    }

    pub fn check_boundary(&self, f: &ScalarField) -> Result<(), GridError> {
        if f.kind() != FieldKind::Boundary || f.len() != self.boundary_count() {
            return Err(GridError::KindMismatch {
                expected: FieldKind::Boundary,
                expected_len: self.boundary_count(),
                found: f.kind(),
                found_len: f.len(),
            });
        }
        Ok(())
    }

    fn check_finite(&self, f: &ScalarField) -> Result<(), GridError> {
        match f.first_non_finite() {
            Some((index, value)) => Err(GridError::NonFinite { index, value }),
            None => Ok(()),
        }
    }

    fn require_boundary(&self) -> Result<(), GridError> {
        if self.has_boundary() {
            Ok(())
        } else {
            Err(GridError::NoBoundary)
        }
    }

    pub fn integrate(&self, f: &ScalarField) -> Result<f64, GridError> {
        self.check_interior(f)?;
        let prod: Vec<f64> = f
            .values()
            .iter()
            .zip(&self.volume_weights)
            .map(|(v, w)| v * w)
            .collect();
        Ok(pairwise_sum(&prod))
    }

    pub fn integrate_boundary(&self, f: &ScalarField) -> Result<f64, GridError> {
        self.check_boundary(f)?;
        Ok(self.boundary_weight() * pairwise_sum(f.values()))
    }

    /// Volume average.
    pub fn mean(&self, f: &ScalarField) -> Result<f64, GridError> {
        Ok(self.integrate(f)? / self.volume())
    }

    /// Weighted L² inner product of two interior fields.
    pub fn inner(&self, f: &ScalarField, g: &ScalarField) -> Result<f64, GridError> {
        self.check_interior(f)?;
        self.check_interior(g)?;
        let prod: Vec<f64> = f
            .values()
            .iter()
            .zip(g.values())
            .zip(&self.volume_weights)
            .map(|((a, b), w)| a * b * w)
            .collect();
        Ok(pairwise_sum(&prod))
    }

    pub fn restrict_to_boundary(&self, u: &ScalarField) -> Result<ScalarField, GridError> {
        self.check_interior(u)?;
        Ok(ScalarField::boundary(
            self.boundary_nodes.iter().map(|&i| u.values()[i]).collect(),
        ))
    }

    /// Weight of the edge leaving `node` along `axis`.
    fn edge_weight(&self, node: usize, axis: usize) -> f64 {
        let h = self.spacing[axis];
        let w = self.cell_volume() / (h * h);
        if axis != 0 && self.is_boundary(node) {
            0.5 * w
        } else {
            w
        }
    }

    fn stiffness_at(&self, u: &[f64], node: usize) -> f64 {
        let ui = u[node];
        let mut acc = 0.0;
        for axis in 0..self.dim {
            let w = self.edge_weight(node, axis);
            for off in [-1isize, 1] {
                if let Some(j) = self.neighbor(node, axis, off) {
                    acc += w * (ui - u[j]);
                }
            }
        }
        acc
    }

    /// Raw stiffness product `out = M u`.
    pub fn apply_stiffness(&self, u: &[f64], out: &mut [f64]) {
        out.par_chunks_mut(PAR_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                let base = c * PAR_CHUNK;
                for (k, o) in chunk.iter_mut().enumerate() {
                    *o = self.stiffness_at(u, base + k);
                }
            });
    }

    /// Diagonal of the stiffness matrix.
    pub fn stiffness_diagonal(&self) -> Vec<f64> {
        (0..self.node_count())
            .map(|node| {
                (0..self.dim)
                    .map(|axis| {
                        let count = [-1isize, 1]
                            .iter()
                            .filter(|&&o| self.neighbor(node, axis, o).is_some())
                            .count();
                        count as f64 * self.edge_weight(node, axis)
                    })
                    .sum()
            })
            .collect()
    }

    /// `Σ_edges w_e (u_j − u_i)(v_j − v_i)`.
    pub fn dirichlet_form(&self, u: &ScalarField, v: &ScalarField) -> Result<f64, GridError> {
        self.check_interior(u)?;
        self.check_interior(v)?;
        let mut mu = vec![0.0; self.node_count()];
        self.apply_stiffness(u.values(), &mut mu);
        let prod: Vec<f64> = mu.iter().zip(v.values()).map(|(a, b)| a * b).collect();
        Ok(pairwise_sum(&prod))
    }

    fn one_sided_derivative(&self, u: &[f64], bidx: usize) -> f64 {
        let node = self.boundary_nodes[bidx];
        let dir: isize = if bidx < self.boundary_count() / 2 { 1 } else { -1 };
        let n1 = self.neighbor(node, 0, dir).expect("cylinder has ≥ 4 layers");
        let n2 = self.neighbor(node, 0, 2 * dir).expect("cylinder has ≥ 4 layers");
        (3.0 * u[node] - 4.0 * u[n1] + u[n2]) / (2.0 * self.spacing[0])
    }

    pub fn laplacian(&self, u: &ScalarField) -> Result<ScalarField, GridError> {
        self.check_interior(u)?;
        let mut out = vec![0.0; self.node_count()];
        self.apply_stiffness(u.values(), &mut out);
        let t = if self.has_boundary() { self.boundary_weight() } else { 0.0 };
        for (node, o) in out.iter_mut().enumerate() {
            let mut v = -*o;
            if let Some(b) = self.boundary_index(node) {
                v += t * self.one_sided_derivative(u.values(), b);
            }
            *o = v / self.volume_weights[node];
        }
        Ok(ScalarField::interior(out))
    }

    /// `|∇u|²` per node from the forward-difference gradient, averaged over the
    /// edges meeting at the node; integrates exactly to the stiffness energy.
    pub fn gradient_sq(&self, u: &ScalarField) -> Result<ScalarField, GridError> {
        self.check_interior(u)?;
        let uv = u.values();
        let out = (0..self.node_count())
            .map(|node| {
                let mut acc = 0.0;
                for axis in 0..self.dim {
                    let h = self.spacing[axis];
                    let fwd = self.neighbor(node, axis, 1).map(|j| (uv[j] - uv[node]) / h);
                    let bwd = self.neighbor(node, axis, -1).map(|j| (uv[node] - uv[j]) / h);
                    acc += match (fwd, bwd) {
                        (Some(a), Some(b)) => 0.5 * (a * a + b * b),
                        (Some(a), None) | (None, Some(a)) => a * a,
                        (None, None) => 0.0,
                    };
                }
                acc
            })
            .collect();
        Ok(ScalarField::interior(out))
    }

    /// Second-order derivative along `axis`: centered inside, one-sided at
    /// cylinder ends.
    pub fn centered_derivative(&self, u: &ScalarField, axis: usize) -> Result<ScalarField, GridError> {
        self.check_interior(u)?;
        let uv = u.values();
        let h = self.spacing[axis];
        let out = (0..self.node_count())
            .map(|i| {
                match (self.neighbor(i, axis, -1), self.neighbor(i, axis, 1)) {
                    (Some(m), Some(p)) => (uv[p] - uv[m]) / (2.0 * h),
                    (None, Some(p)) => {
                        let p2 = self.neighbor(i, axis, 2).expect("≥ 4 layers");
                        (-3.0 * uv[i] + 4.0 * uv[p] - uv[p2]) / (2.0 * h)
                    }
                    (Some(m), None) => {
                        let m2 = self.neighbor(i, axis, -2).expect("≥ 4 layers");
                        (3.0 * uv[i] - 4.0 * uv[m] + uv[m2]) / (2.0 * h)
                    }
                    (None, None) => 0.0,
                }
            })
            .collect();
        Ok(ScalarField::interior(out))
    }

    /// Outward normal derivative by the second-order one-sided stencil.
    pub fn normal_derivative(&self, u: &ScalarField) -> Result<ScalarField, GridError> {
        self.check_interior(u)?;
        self.require_boundary()?;
        Ok(ScalarField::boundary(
            (0..self.boundary_count())
                .map(|b| self.one_sided_derivative(u.values(), b))
                .collect(),
        ))
    }

    /// Boundary flux of the stiffness form, `(Mu)_b / T`. It equals
    /// `(u_b − u_inner)/h₁ − (h₁/2) Δ_∥ u`, the normal derivative seen by the
    /// half cell at the boundary before any interior source is accounted for.
    pub fn boundary_flux(&self, u: &ScalarField) -> Result<ScalarField, GridError> {
        self.check_interior(u)?;
        self.require_boundary()?;
        let t = self.boundary_weight();
        Ok(ScalarField::boundary(
            self.boundary_nodes
                .iter()
                .map(|&node| self.stiffness_at(u.values(), node) / t)
                .collect(),
        ))
    }

    /// Normal derivative balanced against the half boundary cell:
    /// `boundary_flux(u) + (h₁/2)·lap_target`, where `lap_target` is the
    /// Laplacian the governing equation prescribes at each boundary node.
    /// Second-order accurate whenever the equation holds up to the boundary.
    pub fn balanced_normal_derivative(
        &self,
        u: &ScalarField,
        lap_target: &ScalarField,
    ) -> Result<ScalarField, GridError> {
        self.check_boundary(lap_target)?;
        let flux = self.boundary_flux(u)?;
        let half = 0.5 * self.spacing[0];
        Ok(flux.zip_map(lap_target, |f, l| f + half * l))
    }

    pub fn write_field<W: Write>(&self, out: &mut W, f: &ScalarField) -> Result<(), GridError> {
        let nodes: Vec<usize> = match f.kind() {
            FieldKind::Interior => {
                self.check_interior(f)?;
                (0..self.node_count()).collect()
            }
            FieldKind::Boundary => {
                self.check_boundary(f)?;
                self.boundary_nodes.clone()
            }
        };
        let join = |v: Vec<String>| v.join(",");
        writeln!(
            out,
            "# dims={} shape={} spacing={}",
            self.dim,
            join(self.shape.iter().map(|s| s.to_string()).collect()),
            join(self.spacing.iter().map(|s| format!("{s:e}")).collect())
        )?;
        for (node, v) in nodes.iter().zip(f.values()) {
            let idx = self.multi_index(*node);
            writeln!(
                out,
                "{},{v:e}",
                join(idx.iter().map(|i| i.to_string()).collect())
            )?;
        }
        Ok(())
    }

    pub fn read_field<R: BufRead>(&self, input: R, kind: FieldKind) -> Result<ScalarField, GridError> {
        let expected = match kind {
            FieldKind::Interior => self.node_count(),
            FieldKind::Boundary => self.boundary_count(),
        };
        let mut values = vec![f64::NAN; expected];
        let mut seen = vec![false; expected];
        let mut header_ok = false;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                header_ok = self.header_matches(rest)?;
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != self.dim + 1 {
                return Err(GridError::Dump(format!(
                    "line {}: expected {} columns, got {}",
                    lineno + 1,
                    self.dim + 1,
                    parts.len()
                )));
            }
            let mut idx = Vec::with_capacity(self.dim);
            for (k, p) in parts[..self.dim].iter().enumerate() {
                let i: usize = p
                    .trim()
                    .parse()
                    .map_err(|_| GridError::Dump(format!("line {}: bad index {p:?}", lineno + 1)))?;
                if i >= self.shape[k] {
                    return Err(GridError::Dump(format!("line {}: index out of range", lineno + 1)));
                }
                idx.push(i);
            }
            let value: f64 = parts[self.dim]
                .trim()
                .parse()
                .map_err(|_| GridError::Dump(format!("line {}: bad value", lineno + 1)))?;
            let node = self.node_of(&idx);
            let slot = match kind {
                FieldKind::Interior => node,
                FieldKind::Boundary => self.boundary_index(node).ok_or_else(|| {
                    GridError::Dump(format!("line {}: node is not on the boundary", lineno + 1))
                })?,
            };
            values[slot] = value;
            seen[slot] = true;
        }
        if !header_ok {
            return Err(GridError::Dump("missing or mismatched header".into()));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GridError::Dump(format!("no value for entry {missing}")));
        }
        Ok(match kind {
            FieldKind::Interior => ScalarField::interior(values),
            FieldKind::Boundary => ScalarField::boundary(values),
        })
    }

    fn header_matches(&self, header: &str) -> Result<bool, GridError> {
        let mut dims = None;
        let mut shape = None;
        for token in header.split_whitespace() {
            if let Some(v) = token.strip_prefix("dims=") {
                dims = v.parse::<usize>().ok();
            } else if let Some(v) = token.strip_prefix("shape=") {
                shape = v
                    .split(',')
                    .map(|s| s.parse::<usize>().ok())
                    .collect::<Option<Vec<_>>>();
            }
        }
        match (dims, shape) {
            (Some(d), Some(s)) if d == self.dim && s == self.shape => Ok(true),
            (Some(_), Some(_)) => Err(GridError::Dump(format!(
                "header {header:?} does not match the manifold"
            ))),
            _ => Err(GridError::Dump(format!("unreadable header {header:?}"))),
        }
    }
}
