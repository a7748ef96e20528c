//! Uniform-grid box domains, the augmented domain with its exterior slab, node
//! classification, and chains of subdomains marching inward from the accessible window.
//!
//! Geometry is exact: every box coordinate must be commensurate with the grid spacing,
//! and all membership tests are carried out in integer lattice steps. A domain is a box
//! Ω partitioned into box subdomains D_1..D_N. The accessible window Σ is a rectangle
//! inside one face of Ω. The augmented domain glues a slab D_0 of prescribed thickness
//! to the outside of Σ; the far face of that slab is the control face, where the
//! impedance condition lives. Interface nodes always carry the lower subdomain index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Subdomain label of the exterior slab D_0.
pub const SUB_SLAB: u8 = 0;
/// Subdomain label for nodes outside the domain.
pub const SUB_NONE: u8 = u8::MAX;

const ACTIVE_NONE: u32 = u32::MAX;

/// Grid spacing, given either as a float or as an exact fraction `"1/12"`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Spacing {
    /// Literal spacing value.
    Value(f64),
    /// Exact fraction, e.g. `"1/12"`; preferred in config files.
    Fraction(String),
}

impl Spacing {
    /// Numeric value of the spacing.
    pub fn value(&self) -> Result<f64, GeometryError> {
        match self {
            Spacing::Value(h) => Ok(*h),
            Spacing::Fraction(s) => {
                let parts: Vec<&str> = s.split('/').collect();
                let bad = || GeometryError::Spec(format!("bad spacing fraction {s:?}"));
                match parts.as_slice() {
                    [num, den] => {
                        let num: f64 = num.trim().parse().map_err(|_| bad())?;
                        let den: f64 = den.trim().parse().map_err(|_| bad())?;
                        if den <= 0.0 || num <= 0.0 {
                            return Err(bad());
                        }
                        Ok(num / den)
                    }
                    [v] => v.trim().parse().map_err(|_| bad()),
                    _ => Err(bad()),
                }
            }
        }
    }
}

/// Axis-aligned box given by per-axis `[lo, hi]` pairs (one pair per dimension).
pub type BoxSpec = Vec<[f64; 2]>;

/// Which side of the window axis the accessible window sits on.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FaceSide {
    /// Window on the low face of its axis (outward normal points down the axis).
    Lo,
    /// Window on the high face.
    Hi,
}

/// Accessible window: a rectangle inside a single face of Ω.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Axis perpendicular to the window face.
    pub axis: usize,
    /// Side of that axis the window sits on.
    pub side: FaceSide,
    /// Tangential extent; `None` means the full face.
    #[serde(default)]
    pub rect: Option<BoxSpec>,
}

/// Full description of a grid domain fixture.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Space dimension, 2 or 3. Dimension 2 is a fast smoke-test regime and is
    /// flagged as such in all artifacts.
    pub dim: usize,
    /// The body Ω.
    pub omega: BoxSpec,
    /// Box subdomains partitioning Ω, labeled 1..=N in order.
    pub subdomains: Vec<BoxSpec>,
    /// Accessible window Σ on ∂Ω.
    pub window: WindowSpec,
    /// Geometric scale r0: interfaces along a chain must contain a flat disc of
    /// radius r0/3.
    pub r0: f64,
    /// Grid spacing.
    pub h: Spacing,
    /// Thickness of the exterior slab D_0; defaults to r0/2.
    #[serde(default)]
    pub slab_thickness: Option<f64>,
}

/// Role a node plays in the discrete boundary value problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    /// Unknown of the PDE.
    Interior,
    /// Homogeneous (or lifted) Dirichlet node; eliminated from the system.
    Dirichlet,
    /// Node on the control face carrying the impedance condition.
    Impedance,
    /// Node of the accessible window in the physical (non-augmented) domain;
    /// carries the impedance generation condition.
    Accessible,
    /// Node of the bounding lattice that lies outside the domain.
    Exterior,
}

/// Errors raised while building domains or validating chains.
#[derive(Debug, Error)]
pub enum GeometryError {
    /// A coordinate is not an integer multiple of the grid spacing.
    #[error("coordinate {coordinate} on axis {axis} is not commensurate with h = {h}")]
    Incommensurate {
        /// Offending axis.
        axis: usize,
        /// Offending coordinate value.
        coordinate: f64,
        /// Spacing in use.
        h: f64,
    },
    /// The subdomains fail to partition Ω.
    #[error("subdomain partition invalid: {0}")]
    Partition(String),
    /// The accessible window is not a valid rectangle inside a single face.
    #[error("accessible window invalid: {0}")]
    Window(String),
    /// A chain failed validation.
    #[error("chain invalid: {0}")]
    Chain(String),
    /// Any other malformed specification.
    #[error("domain spec invalid: {0}")]
    Spec(String),
}

/// Reference to a lattice plane orthogonal to `axis` at node coordinate `step`,
/// with `outward` the sign of the exterior normal of Ω there.
#[derive(Clone, Copy, Debug)]
pub struct PlaneRef {
    /// Axis perpendicular to the plane.
    pub axis: usize,
    /// Node coordinate of the plane in lattice steps.
    pub step: i64,
    /// Sign (±1) of the exterior normal of Ω along `axis`.
    pub outward: i8,
}

/// A box in integer lattice steps; node ranges are inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct IBox {
    lo: [i64; 3],
    hi: [i64; 3],
}

impl IBox {
    fn contains_node(&self, p: &[i64; 3], dim: usize) -> bool {
        (0..dim).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }
    fn contains_cell(&self, c: &[i64; 3], dim: usize) -> bool {
        (0..dim).all(|a| self.lo[a] <= c[a] && c[a] + 1 <= self.hi[a])
    }
}

/// Uniform-grid realization of a domain (physical Ω or augmented Ω ∪ D_0).
#[derive(Clone, Debug)]
pub struct GridDomain {
    /// Specification this domain was built from.
    pub spec: DomainSpec,
    /// Space dimension.
    pub dim: usize,
    /// Grid spacing.
    pub h: f64,
    /// Whether the exterior slab is part of the domain.
    pub augmented: bool,
    /// True in dimension 2, which is outside the regime the estimates target.
    pub out_of_paper_regime: bool,
    origin: [i64; 3],
    /// Node counts per axis (unused axes have count 1).
    pub shape: [usize; 3],
    /// Node classification, lattice order (axis 0 fastest).
    pub class: Vec<NodeClass>,
    /// Subdomain label per node, interface ties resolved to the lower index.
    pub subdomain: Vec<u8>,
    /// Lattice ids of active nodes (interior + impedance + accessible), lattice order.
    pub active: Vec<u32>,
    active_index: Vec<u32>,
    /// Lattice ids of the accessible-window trace nodes (strict interior of Σ).
    pub sigma: Vec<u32>,
    /// Tangential axes of the window, ascending.
    pub sigma_axes: [usize; 2],
    /// Interior node counts of the window per tangential axis.
    pub sigma_inner: [usize; 2],
    /// The window plane Σ.
    pub window_plane: PlaneRef,
    /// The control plane (far slab face), present only in the augmented domain.
    pub control_plane: Option<PlaneRef>,
    cells_shape: [usize; 3],
    cell_label: Vec<u8>,
    /// Slab thickness actually used.
    pub slab_thickness: f64,
}

fn to_steps(x: f64, h: f64, axis: usize) -> Result<i64, GeometryError> {
    let t = x / h;
    let r = t.round();
    if (t - r).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(GeometryError::Incommensurate {
            axis,
            coordinate: x,
            h,
        });
    }
    Ok(r as i64)
}

fn box_to_steps(b: &BoxSpec, h: f64, dim: usize, what: &str) -> Result<IBox, GeometryError> {
    if b.len() != dim {
        return Err(GeometryError::Spec(format!(
            "{what}: expected {dim} axis ranges, got {}",
            b.len()
        )));
    }
    let mut lo = [0i64; 3];
    let mut hi = [0i64; 3];
    for (a, r) in b.iter().enumerate() {
        lo[a] = to_steps(r[0], h, a)?;
        hi[a] = to_steps(r[1], h, a)?;
        if lo[a] >= hi[a] {
            return Err(GeometryError::Spec(format!(
                "{what}: axis {a} range [{}, {}] is empty",
                r[0], r[1]
            )));
        }
    }
    Ok(IBox { lo, hi })
}

impl GridDomain {
    /// Builds the augmented domain Ω ∪ D_0 with the slab attached across the window.
    pub fn build_augmented(spec: &DomainSpec) -> Result<Self, GeometryError> {
        Self::build(spec, true)
    }

    /// Builds the physical domain Ω alone; window nodes become `Accessible`.
    pub fn build_physical(spec: &DomainSpec) -> Result<Self, GeometryError> {
        Self::build(spec, false)
    }

    fn build(spec: &DomainSpec, augmented: bool) -> Result<Self, GeometryError> {
        let dim = spec.dim;
        if !(dim == 2 || dim == 3) {
            return Err(GeometryError::Spec(format!("dim must be 2 or 3, got {dim}")));
        }
        let h = spec.h.value()?;
        if !(h > 0.0) || !h.is_finite() {
            return Err(GeometryError::Spec(format!("spacing must be positive, got {h}")));
        }
        if spec.r0 <= 0.0 {
            return Err(GeometryError::Spec("r0 must be positive".into()));
        }
        if spec.subdomains.is_empty() || spec.subdomains.len() > 200 {
            return Err(GeometryError::Spec(format!(
                "need between 1 and 200 subdomains, got {}",
                spec.subdomains.len()
            )));
        }
        let omega = box_to_steps(&spec.omega, h, dim, "omega")?;
        let subs: Vec<IBox> = spec
            .subdomains
            .iter()
            .enumerate()
            .map(|(j, b)| box_to_steps(b, h, dim, &format!("subdomain {}", j + 1)))
            .collect::<Result<_, _>>()?;

        // Window: a rectangle in one face of omega.
        let w = &spec.window;
        if w.axis >= dim {
            return Err(GeometryError::Window(format!(
                "window axis {} out of range for dim {dim}",
                w.axis
            )));
        }
        let wstep = match w.side {
            FaceSide::Lo => omega.lo[w.axis],
            FaceSide::Hi => omega.hi[w.axis],
        };
        let outward: i8 = match w.side {
            FaceSide::Lo => -1,
            FaceSide::Hi => 1,
        };
        let tang: Vec<usize> = (0..dim).filter(|a| *a != w.axis).collect();
        let mut wrect = IBox {
            lo: omega.lo,
            hi: omega.hi,
        };
        if let Some(rect) = &w.rect {
            if rect.len() != dim - 1 {
                return Err(GeometryError::Window(format!(
                    "window rect needs {} tangential ranges, got {}",
                    dim - 1,
                    rect.len()
                )));
            }
            for (k, &a) in tang.iter().enumerate() {
                wrect.lo[a] = to_steps(rect[k][0], h, a)?;
                wrect.hi[a] = to_steps(rect[k][1], h, a)?;
                if wrect.lo[a] < omega.lo[a] || wrect.hi[a] > omega.hi[a] {
                    return Err(GeometryError::Window(format!(
                        "window rect leaves the face on axis {a}"
                    )));
                }
            }
        }
        wrect.lo[w.axis] = wstep;
        wrect.hi[w.axis] = wstep;
        for &a in &tang {
            if wrect.hi[a] - wrect.lo[a] < 2 {
                return Err(GeometryError::Window(format!(
                    "window needs at least 2 cells of tangential extent on axis {a}"
                )));
            }
        }

        let slab_thickness = spec.slab_thickness.unwrap_or(spec.r0 / 2.0);
        let th_steps = to_steps(slab_thickness, h, w.axis)?;
        if th_steps < 2 {
            return Err(GeometryError::Spec(format!(
                "slab thickness {slab_thickness} is below 2h"
            )));
        }
        let slab = {
            let mut s = wrect;
            match w.side {
                FaceSide::Lo => {
                    s.lo[w.axis] = wstep - th_steps;
                    s.hi[w.axis] = wstep;
                }
                FaceSide::Hi => {
                    s.lo[w.axis] = wstep;
                    s.hi[w.axis] = wstep + th_steps;
                }
            }
            s
        };

        // Lattice bounds.
        let mut lat = omega;
        if augmented {
            for a in 0..dim {
                lat.lo[a] = lat.lo[a].min(slab.lo[a]);
                lat.hi[a] = lat.hi[a].max(slab.hi[a]);
            }
        }
        let mut shape = [1usize; 3];
        for a in 0..dim {
            let n = lat.hi[a] - lat.lo[a] + 1;
            if n > 20_000 {
                return Err(GeometryError::Spec(format!("axis {a}: {n} nodes is too many")));
            }
            shape[a] = n as usize;
        }
        let n_nodes = shape[0] * shape[1] * shape[2];

        // Cell labels. Cells are unit lattice cubes addressed by their low corner.
        let mut cells_shape = [1usize; 3];
        for a in 0..dim {
            cells_shape[a] = shape[a] - 1;
        }
        let n_cells = cells_shape[0] * cells_shape[1] * cells_shape[2];
        let mut cell_label = vec![SUB_NONE; n_cells];
        let mut gaps = 0usize;
        let mut overlaps = 0usize;
        for cz in 0..cells_shape[2] {
            for cy in 0..cells_shape[1] {
                for cx in 0..cells_shape[0] {
                    let c = [
                        lat.lo[0] + cx as i64,
                        lat.lo[1] + cy as i64,
                        lat.lo[2] + cz as i64,
                    ];
                    let id = (cz * cells_shape[1] + cy) * cells_shape[0] + cx;
                    if augmented && slab.contains_cell(&c, dim) {
                        cell_label[id] = SUB_SLAB;
                        continue;
                    }
                    if omega.contains_cell(&c, dim) {
                        let mut hits = 0u32;
                        let mut label = SUB_NONE;
                        for (j, s) in subs.iter().enumerate() {
                            if s.contains_cell(&c, dim) {
                                hits += 1;
                                if label == SUB_NONE {
                                    label = (j + 1) as u8;
                                }
                            }
                        }
                        match hits {
                            0 => gaps += 1,
                            1 => cell_label[id] = label,
                            _ => overlaps += 1,
                        }
                    }
                }
            }
        }
        if overlaps > 0 {
            return Err(GeometryError::Partition(format!(
                "{overlaps} cells covered by more than one subdomain"
            )));
        }
        if gaps > 0 {
            return Err(GeometryError::Partition(format!(
                "{gaps} cells of omega not covered by any subdomain"
            )));
        }
        for (j, s) in subs.iter().enumerate() {
            for a in 0..dim {
                if s.lo[a] < omega.lo[a] || s.hi[a] > omega.hi[a] {
                    return Err(GeometryError::Partition(format!(
                        "subdomain {} leaves omega on axis {a}",
                        j + 1
                    )));
                }
            }
        }

        // Node classification from incident-cell membership.
        let control_step = match w.side {
            FaceSide::Lo => wstep - th_steps,
            FaceSide::Hi => wstep + th_steps,
        };
        let mut class = vec![NodeClass::Exterior; n_nodes];
        let mut subdomain = vec![SUB_NONE; n_nodes];
        let mut active = Vec::new();
        let mut active_index = vec![ACTIVE_NONE; n_nodes];
        let mut sigma = Vec::new();

        let cell_at = |p: &[i64; 3]| -> Option<usize> {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let rel = p[a] - lat.lo[a];
                if a < dim {
                    if rel < 0 || rel >= cells_shape[a] as i64 {
                        return None;
                    }
                    idx[a] = rel as usize;
                } else {
                    idx[a] = 0;
                }
            }
            Some((idx[2] * cells_shape[1] + idx[1]) * cells_shape[0] + idx[0])
        };

        for iz in 0..shape[2] {
            for iy in 0..shape[1] {
                for ix in 0..shape[0] {
                    let p = [
                        lat.lo[0] + ix as i64,
                        lat.lo[1] + iy as i64,
                        lat.lo[2] + iz as i64,
                    ];
                    let id = (iz * shape[1] + iy) * shape[0] + ix;
                    // Count member cells among the up-to-2^dim incident cells.
                    let mut member = 0u32;
                    let total = 1u32 << dim;
                    let mut corner = [0i64; 3];
                    for mask in 0..total {
                        for a in 0..dim {
                            corner[a] = p[a] - ((mask >> a) & 1) as i64;
                        }
                        for a in dim..3 {
                            corner[a] = lat.lo[a];
                        }
                        if let Some(cid) = cell_at(&corner) {
                            if cell_label[cid] != SUB_NONE {
                                member += 1;
                            }
                        }
                    }
                    if member == 0 {
                        continue; // exterior
                    }
                    // Subdomain label: slab first, then lowest subdomain whose
                    // closure contains the node.
                    let mut lbl = SUB_NONE;
                    if augmented && slab.contains_node(&p, dim) {
                        lbl = SUB_SLAB;
                    } else {
                        for (j, s) in subs.iter().enumerate() {
                            if s.contains_node(&p, dim) {
                                lbl = (j + 1) as u8;
                                break;
                            }
                        }
                    }
                    subdomain[id] = lbl;

                    let on_window_plane = p[w.axis] == wstep;
                    let strictly_in_rect = tang
                        .iter()
                        .all(|&a| wrect.lo[a] < p[a] && p[a] < wrect.hi[a]);

                    let cls = if member == total {
                        NodeClass::Interior
                    } else if augmented && p[w.axis] == control_step && strictly_in_rect {
                        NodeClass::Impedance
                    } else if !augmented && on_window_plane && strictly_in_rect {
                        NodeClass::Accessible
                    } else {
                        NodeClass::Dirichlet
                    };
                    class[id] = cls;
                    if matches!(
                        cls,
                        NodeClass::Interior | NodeClass::Impedance | NodeClass::Accessible
                    ) {
                        active_index[id] = active.len() as u32;
                        active.push(id as u32);
                    }
                    if on_window_plane && strictly_in_rect {
                        sigma.push(id as u32);
                    }
                }
            }
        }

        let mut sigma_axes = [0usize; 2];
        let mut sigma_inner = [1usize; 2];
        for (k, &a) in tang.iter().enumerate() {
            sigma_axes[k] = a;
            sigma_inner[k] = (wrect.hi[a] - wrect.lo[a] - 1) as usize;
        }

        Ok(GridDomain {
            spec: spec.clone(),
            dim,
            h,
            augmented,
            out_of_paper_regime: dim == 2,
            origin: lat.lo,
            shape,
            class,
            subdomain,
            active,
            active_index,
            sigma,
            sigma_axes,
            sigma_inner,
            window_plane: PlaneRef {
                axis: w.axis,
                step: wstep,
                outward,
            },
            control_plane: if augmented {
                Some(PlaneRef {
                    axis: w.axis,
                    step: control_step,
                    outward,
                })
            } else {
                None
            },
            cells_shape,
            cell_label,
            slab_thickness,
        })
    }

    /// Total lattice node count (including exterior nodes).
    pub fn n_nodes(&self) -> usize {
        self.class.len()
    }

    /// Number of unknowns of the discrete operator.
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Integer lattice coordinates of a node.
    pub fn node_step(&self, id: usize) -> [i64; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        let ix = id % nx;
        let iy = (id / nx) % ny;
        let iz = id / (nx * ny);
        [
            self.origin[0] + ix as i64,
            self.origin[1] + iy as i64,
            self.origin[2] + iz as i64,
        ]
    }

    /// Lattice id at integer coordinates, if inside the bounding lattice.
    pub fn step_id(&self, p: &[i64; 3]) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = p[a] - self.origin[a];
            if rel < 0 || rel >= self.shape[a] as i64 {
                return None;
            }
            idx[a] = rel as usize;
        }
        Some((idx[2] * self.shape[1] + idx[1]) * self.shape[0] + idx[0])
    }

    /// Physical coordinates of a node.
    pub fn coords(&self, id: usize) -> [f64; 3] {
        let p = self.node_step(id);
        [
            p[0] as f64 * self.h,
            p[1] as f64 * self.h,
            p[2] as f64 * self.h,
        ]
    }

    /// Rank of a node among the active nodes, if active.
    pub fn active_rank(&self, id: usize) -> Option<usize> {
        let r = self.active_index[id];
        (r != ACTIVE_NONE).then_some(r as usize)
    }

    /// Whether the node belongs to the closed domain.
    pub fn is_member(&self, id: usize) -> bool {
        self.class[id] != NodeClass::Exterior
    }

    /// Volume of Ω measured by cell count; exact for box partitions.
    pub fn volume_omega(&self) -> f64 {
        let mut cells = 0usize;
        for &l in &self.cell_label {
            if l != SUB_NONE && l != SUB_SLAB {
                cells += 1;
            }
        }
        cells as f64 * self.h.powi(self.dim as i32)
    }

    /// The constant B in |Ω| ≤ B·r0^dim realized by this fixture.
    pub fn volume_constant(&self) -> f64 {
        self.volume_omega() / self.spec.r0.powi(self.dim as i32)
    }

    /// True when every node within Chebyshev distance `k` is interior.
    pub fn has_interior_ball(&self, id: usize, k: i64) -> bool {
        let p = self.node_step(id);
        let mut q = [0i64; 3];
        let rng = |a: usize| if a < self.dim { -k..=k } else { 0..=0 };
        for dz in rng(2) {
            for dy in rng(1) {
                for dx in rng(0) {
                    q[0] = p[0] + dx;
                    q[1] = p[1] + dy;
                    q[2] = p[2] + dz;
                    match self.step_id(&q) {
                        Some(nid) if self.class[nid] == NodeClass::Interior => {}
                        _ => return false,
                    }
                }
            }
        }
        true
    }

    /// Active nodes within Euclidean distance `r` of `center`, in lattice order.
    pub fn nodes_in_ball(&self, center: [f64; 3], r: f64) -> Vec<u32> {
        let mut out = Vec::new();
        let r2 = r * r * (1.0 + 1e-12);
        for &id in &self.active {
            let x = self.coords(id as usize);
            let mut d2 = 0.0;
            for a in 0..self.dim {
                d2 += (x[a] - center[a]) * (x[a] - center[a]);
            }
            if d2 <= r2 {
                out.push(id);
            }
        }
        out
    }

    /// Active nodes carrying subdomain label `j`, in lattice order.
    pub fn subdomain_nodes(&self, j: u8) -> Vec<u32> {
        self.active
            .iter()
            .copied()
            .filter(|&id| self.subdomain[id as usize] == j)
            .collect()
    }

    /// Number of subdomains N (slab excluded).
    pub fn n_subdomains(&self) -> usize {
        self.spec.subdomains.len()
    }

    /// One-line summary used in artifact provenance headers.
    pub fn summary(&self) -> String {
        format!(
            "dim={} h={:.6e} shape={}x{}x{} active={} augmented={} r0={} B={:.3}{}",
            self.dim,
            self.h,
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.n_active(),
            self.augmented,
            self.spec.r0,
            self.volume_constant(),
            if self.out_of_paper_regime {
                " out_of_paper_regime"
            } else {
                ""
            }
        )
    }
}

/// One link of a chain: the flat interface crossed when stepping from subdomain
/// `from` into subdomain `to`.
#[derive(Clone, Debug)]
pub struct ChainLink {
    /// Label on the near side (slab = 0 for the first link).
    pub from: u8,
    /// Label on the far side.
    pub to: u8,
    /// Axis perpendicular to the interface.
    pub axis: usize,
    /// Node-plane coordinate of the interface in lattice steps.
    pub plane_step: i64,
    /// Unit normal pointing from `from` into `to` (axis-aligned).
    pub nu: [i8; 3],
    /// Interface center snapped to the nearest node (physical coordinates).
    pub p: [f64; 3],
    /// Interface center in lattice steps.
    pub p_step: [i64; 3],
    /// Radius of the largest flat disc inside the interface rectangle.
    pub flat_radius: f64,
    /// Inclusive node rectangle of the interface (lattice steps).
    pub node_lo: [i64; 3],
    /// Inclusive node rectangle of the interface (lattice steps).
    pub node_hi: [i64; 3],
}

/// Validated chain of subdomains marching inward from the accessible window.
#[derive(Clone, Debug)]
pub struct Chain {
    /// Subdomain labels in visiting order.
    pub order: Vec<u8>,
    /// Links; `links[0]` crosses the window, `links[k]` enters `order[k]`.
    pub links: Vec<ChainLink>,
    /// Geometric scale the flat-radius requirement was checked against.
    pub r0: f64,
}

/// Validates a visiting order of subdomains against the augmented domain: consecutive
/// entries must share a flat axis-aligned interface containing a disc of radius r0/3,
/// and the first entry must touch the accessible window.
pub fn validate_chain(dom: &GridDomain, order: &[u8]) -> Result<Chain, GeometryError> {
    if !dom.augmented {
        return Err(GeometryError::Chain(
            "chains are validated on the augmented domain".into(),
        ));
    }
    if order.is_empty() {
        return Err(GeometryError::Chain("empty chain".into()));
    }
    let n = dom.n_subdomains() as u8;
    for &j in order {
        if j == 0 || j > n {
            return Err(GeometryError::Chain(format!("label {j} out of range 1..={n}")));
        }
    }
    let mut seen = vec![false; n as usize + 1];
    for &j in order {
        if seen[j as usize] {
            return Err(GeometryError::Chain(format!("label {j} repeated")));
        }
        seen[j as usize] = true;
    }

    let mut links = Vec::with_capacity(order.len());
    let mut prev = SUB_SLAB;
    for &next in order {
        links.push(find_interface(dom, prev, next)?);
        prev = next;
    }
    let need = dom.spec.r0 / 3.0 - 1e-9 * dom.spec.r0;
    for l in &links {
        if l.flat_radius < need {
            return Err(GeometryError::Chain(format!(
                "interface {} -> {} has flat radius {:.6} < r0/3 = {:.6}",
                l.from,
                l.to,
                l.flat_radius,
                dom.spec.r0 / 3.0
            )));
        }
    }
    Ok(Chain {
        order: order.to_vec(),
        links,
        r0: dom.spec.r0,
    })
}

fn find_interface(dom: &GridDomain, a: u8, b: u8) -> Result<ChainLink, GeometryError> {
    let dim = dom.dim;
    let cs = dom.cells_shape;
    let cell_lbl = |c: &[i64; 3]| -> u8 {
        let mut idx = [0usize; 3];
        for ax in 0..3 {
            let rel = c[ax] - dom.origin[ax];
            if ax < dim {
                if rel < 0 || rel >= cs[ax] as i64 {
                    return SUB_NONE;
                }
                idx[ax] = rel as usize;
            }
        }
        dom.cell_label[(idx[2] * cs[1] + idx[1]) * cs[0] + idx[0]]
    };

    // Scan all cell faces separating labels a and b.
    let mut axis: Option<usize> = None;
    let mut plane: i64 = 0;
    let mut orient: Option<i8> = None;
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    let mut count = 0usize;
    for cz in 0..cs[2].max(1) {
        for cy in 0..cs[1] {
            for cx in 0..cs[0] {
                let c = [
                    dom.origin[0] + cx as i64,
                    dom.origin[1] + cy as i64,
                    dom.origin[2] + cz as i64,
                ];
                let lc = cell_lbl(&c);
                if lc == SUB_NONE {
                    continue;
                }
                for ax in 0..dim {
                    let mut cn = c;
                    cn[ax] += 1;
                    let ln = cell_lbl(&cn);
                    let pair = (lc, ln);
                    let (matches, sign) = if pair == (a, b) {
                        (true, 1i8)
                    } else if pair == (b, a) {
                        (true, -1i8)
                    } else {
                        (false, 0)
                    };
                    if !matches {
                        continue;
                    }
                    let pc = c[ax] + 1;
                    match axis {
                        None => {
                            axis = Some(ax);
                            plane = pc;
                            orient = Some(sign);
                        }
                        Some(prev_ax) => {
                            if prev_ax != ax || plane != pc || orient != Some(sign) {
                                return Err(GeometryError::Chain(format!(
                                    "interface {a} -> {b} is not a single flat plane"
                                )));
                            }
                        }
                    }
                    count += 1;
                    for t in 0..dim {
                        if t != ax {
                            lo[t] = lo[t].min(c[t]);
                            hi[t] = hi[t].max(c[t]);
                        }
                    }
                }
            }
        }
    }
    let axis = axis.ok_or_else(|| {
        GeometryError::Chain(format!("subdomains {a} and {b} share no interface"))
    })?;
    let orient = orient.unwrap();
    // The faces must fill their bounding rectangle.
    let mut area = 1usize;
    for t in 0..dim {
        if t != axis {
            area *= (hi[t] - lo[t] + 1) as usize;
        }
    }
    if area != count {
        return Err(GeometryError::Chain(format!(
            "interface {a} -> {b} is not a full rectangle ({count} faces, bounding {area})"
        )));
    }

    let mut node_lo = [0i64; 3];
    let mut node_hi = [0i64; 3];
    let mut p_step = [0i64; 3];
    let mut min_extent = i64::MAX;
    for t in 0..dim {
        if t == axis {
            node_lo[t] = plane;
            node_hi[t] = plane;
            p_step[t] = plane;
        } else {
            node_lo[t] = lo[t];
            node_hi[t] = hi[t] + 1;
            p_step[t] = (node_lo[t] + node_hi[t]).div_euclid(2);
            min_extent = min_extent.min(node_hi[t] - node_lo[t]);
        }
    }
    let mut nu = [0i8; 3];
    nu[axis] = orient;
    Ok(ChainLink {
        from: a,
        to: b,
        axis,
        plane_step: plane,
        nu,
        p: [
            p_step[0] as f64 * dom.h,
            p_step[1] as f64 * dom.h,
            p_step[2] as f64 * dom.h,
        ],
        p_step,
        flat_radius: min_extent as f64 * dom.h / 2.0,
        node_lo,
        node_hi,
    })
}

/// Canonical fixtures used by tests and examples.
pub mod fixtures {
    use super::*;

    /// Unit cube split into a lower and an upper half along the last axis, window on
    /// the bottom face. The midplane interface holds a flat disc of radius 1/2, so the
    /// scale r0 = 1.5 saturates the flat-portion requirement.
    pub fn two_half_cube(h: Spacing) -> DomainSpec {
        DomainSpec {
            dim: 3,
            omega: vec![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
            subdomains: vec![
                vec![[0.0, 1.0], [0.0, 1.0], [0.0, 0.5]],
                vec![[0.0, 1.0], [0.0, 1.0], [0.5, 1.0]],
            ],
            window: WindowSpec {
                axis: 2,
                side: FaceSide::Lo,
                rect: None,
            },
            r0: 1.5,
            h,
            slab_thickness: None,
        }
    }

    /// Two-dimensional analogue of `two_half_cube`; fast smoke-test regime.
    pub fn two_half_square(h: Spacing) -> DomainSpec {
        DomainSpec {
            dim: 2,
            omega: vec![[0.0, 1.0], [0.0, 1.0]],
            subdomains: vec![
                vec![[0.0, 1.0], [0.0, 0.5]],
                vec![[0.0, 1.0], [0.5, 1.0]],
            ],
            window: WindowSpec {
                axis: 1,
                side: FaceSide::Lo,
                rect: None,
            },
            r0: 1.5,
            h,
            slab_thickness: None,
        }
    }

    /// Unit square split into a 2×2 grid of squares, window on the bottom edge.
    /// Every interface is a segment of length 1/2 (flat radius 1/4).
    pub fn four_square(h: Spacing) -> DomainSpec {
        DomainSpec {
            dim: 2,
            omega: vec![[0.0, 1.0], [0.0, 1.0]],
            subdomains: vec![
                vec![[0.0, 0.5], [0.0, 0.5]],
                vec![[0.5, 1.0], [0.0, 0.5]],
                vec![[0.0, 0.5], [0.5, 1.0]],
                vec![[0.5, 1.0], [0.5, 1.0]],
            ],
            window: WindowSpec {
                axis: 1,
                side: FaceSide::Lo,
                rect: None,
            },
            r0: 0.75,
            h,
            slab_thickness: None,
        }
    }

    /// Unit cube with a single subdomain; used for Green-function asymptotics.
    pub fn single_cube(h: Spacing) -> DomainSpec {
        DomainSpec {
            dim: 3,
            omega: vec![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]],
            subdomains: vec![vec![[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]],
            window: WindowSpec {
                axis: 2,
                side: FaceSide::Lo,
                rect: None,
            },
            r0: 1.5,
            h,
            slab_thickness: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(v: f64) -> Spacing {
        Spacing::Value(v)
    }

    #[test]
    fn two_half_cube_classification_counts() {
        let spec = fixtures::two_half_cube(h(0.25));
        let dom = GridDomain::build_augmented(&spec).unwrap();
        // Lattice: 5 x 5 x (5 + 3) nodes, slab thickness 0.75 = 3 cells.
        assert_eq!(dom.shape, [5, 5, 8]);
        // Control face z = -0.75: interior 3x3 nodes are impedance.
        let imp = dom
            .class
            .iter()
            .filter(|c| **c == NodeClass::Impedance)
            .count();
        assert_eq!(imp, 9);
        // Window trace nodes: 3x3 strict interior of the bottom face of omega.
        assert_eq!(dom.sigma.len(), 9);
        for &id in &dom.sigma {
            assert_eq!(dom.class[id as usize], NodeClass::Interior);
            assert_eq!(dom.node_step(id as usize)[2], 0);
        }
        // No exterior nodes: the augmented domain is itself a box here.
        assert!(dom.class.iter().all(|c| *c != NodeClass::Exterior));
        // Active = interior + impedance.
        let interior = dom
            .class
            .iter()
            .filter(|c| **c == NodeClass::Interior)
            .count();
        assert_eq!(dom.n_active(), interior + imp);
    }

    #[test]
    fn physical_domain_window_nodes_are_accessible() {
        let spec = fixtures::two_half_cube(h(0.25));
        let dom = GridDomain::build_physical(&spec).unwrap();
        assert_eq!(dom.shape, [5, 5, 5]);
        let acc: Vec<_> = dom
            .active
            .iter()
            .filter(|&&id| dom.class[id as usize] == NodeClass::Accessible)
            .collect();
        assert_eq!(acc.len(), 9);
        assert_eq!(dom.sigma.len(), 9);
        // Window rim nodes are Dirichlet.
        let rim = dom.step_id(&[0, 0, 0]).unwrap();
        assert_eq!(dom.class[rim], NodeClass::Dirichlet);
    }

    #[test]
    fn interface_nodes_carry_lower_label() {
        let spec = fixtures::two_half_cube(h(0.25));
        let dom = GridDomain::build_augmented(&spec).unwrap();
        // Midplane z = 0.5 belongs to subdomain 1; window plane z = 0 to the slab.
        let mid = dom.step_id(&[2, 2, 2]).unwrap();
        assert_eq!(dom.subdomain[mid], 1);
        let win = dom.step_id(&[2, 2, 0]).unwrap();
        assert_eq!(dom.subdomain[win], SUB_SLAB);
    }

    #[test]
    fn incommensurate_coordinate_names_axis() {
        let mut spec = fixtures::two_half_cube(h(0.25));
        spec.subdomains[0][2][1] = 0.4;
        spec.subdomains[1][2][0] = 0.4;
        let err = GridDomain::build_augmented(&spec).unwrap_err();
        match err {
            GeometryError::Incommensurate { axis, coordinate, .. } => {
                assert_eq!(axis, 2);
                assert!((coordinate - 0.4).abs() < 1e-12);
            }
            other => panic!("expected incommensurate error, got {other:?}"),
        }
    }

    #[test]
    fn partition_gap_and_overlap_rejected() {
        let mut spec = fixtures::two_half_cube(h(0.25));
        spec.subdomains[1][2][0] = 0.75; // gap (0.5, 0.75)
        assert!(matches!(
            GridDomain::build_augmented(&spec),
            Err(GeometryError::Partition(_))
        ));
        let mut spec = fixtures::two_half_cube(h(0.25));
        spec.subdomains[1][2][0] = 0.25; // overlap (0.25, 0.5)
        assert!(matches!(
            GridDomain::build_augmented(&spec),
            Err(GeometryError::Partition(_))
        ));
    }

    #[test]
    fn volume_bound_constant() {
        let spec = fixtures::two_half_cube(h(0.25));
        let dom = GridDomain::build_augmented(&spec).unwrap();
        assert!((dom.volume_omega() - 1.0).abs() < 1e-12);
        // |Ω| = 1 ≤ B r0^3 with B = 1/1.5^3.
        assert!((dom.volume_constant() - 1.0 / 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn refinement_preserves_classification() {
        let coarse = GridDomain::build_augmented(&fixtures::two_half_cube(h(0.25))).unwrap();
        let fine = GridDomain::build_augmented(&fixtures::two_half_cube(h(0.125))).unwrap();
        for id in 0..coarse.n_nodes() {
            let p = coarse.node_step(id);
            let q = [p[0] * 2, p[1] * 2, p[2] * 2];
            let fid = fine.step_id(&q).unwrap();
            assert_eq!(coarse.class[id], fine.class[fid], "node {p:?}");
            assert_eq!(coarse.subdomain[id], fine.subdomain[fid]);
        }
    }

    #[test]
    fn two_half_cube_chain_validates() {
        let dom = GridDomain::build_augmented(&fixtures::two_half_cube(h(0.25))).unwrap();
        let chain = validate_chain(&dom, &[1, 2]).unwrap();
        assert_eq!(chain.links.len(), 2);
        // Window link: slab -> 1 across z = 0, normal +z.
        assert_eq!(chain.links[0].from, SUB_SLAB);
        assert_eq!(chain.links[0].nu, [0, 0, 1]);
        assert_eq!(chain.links[0].plane_step, 0);
        assert!((chain.links[0].flat_radius - 0.5).abs() < 1e-12);
        // Midplane link center snaps to the node (0.5, 0.5, 0.5).
        assert_eq!(chain.links[1].p_step, [2, 2, 2]);
        assert!((chain.links[1].p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn four_square_chain_flat_radii() {
        let dom = GridDomain::build_augmented(&fixtures::four_square(h(0.125))).unwrap();
        let chain = validate_chain(&dom, &[1, 2, 4, 3]).unwrap();
        assert_eq!(chain.links.len(), 4);
        for link in &chain.links[1..] {
            // Every internal interface is a segment of length 1/2: flat radius 1/4,
            // half the subdomain side.
            assert!((link.flat_radius - 0.25).abs() < 1e-12, "{link:?}");
        }
        // Window link spans the bottom edge of D1 only.
        assert!((chain.links[0].flat_radius - 0.25).abs() < 1e-12);
        // The vertical interface D1 -> D3 also attains exactly r0/3.
        assert!(validate_chain(&dom, &[1, 3]).is_ok());
    }

    #[test]
    fn chain_rejects_non_adjacent_and_repeats() {
        let dom = GridDomain::build_augmented(&fixtures::four_square(h(0.125))).unwrap();
        // D1 and D4 touch only at a corner: no shared cell faces.
        assert!(validate_chain(&dom, &[1, 4]).is_err());
        assert!(validate_chain(&dom, &[1, 2, 1]).is_err());
        // D3 sits on the top half and never touches the window.
        assert!(validate_chain(&dom, &[3]).is_err());
    }

    #[test]
    fn interior_ball_and_ball_nodes() {
        let dom = GridDomain::build_augmented(&fixtures::two_half_cube(h(0.25))).unwrap();
        let center = dom.step_id(&[2, 2, 2]).unwrap();
        assert!(dom.has_interior_ball(center, 1));
        assert!(!dom.has_interior_ball(center, 2)); // lattice is only 5 wide
        let ball = dom.nodes_in_ball([0.5, 0.5, 0.5], 0.25);
        // Exactly the center and its 6 axis neighbors at distance h.
        assert_eq!(ball.len(), 7);
    }
}
