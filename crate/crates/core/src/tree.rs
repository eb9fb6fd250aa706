//! Uniform-depth `2^D`-ary tree over the cube `center + (-L/2, L/2)^D`.
//!
//! Boxes at level `k` form a `2^k`-per-axis grid of cells with half width
//! `l_k = L / 2^(k+1)`. Cells are half-open per axis; points sitting on the
//! upper domain face are clamped into the last cell.

use crate::error::{EifmmError, Result};
use crate::points::PointSet;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TreeConfig {
    pub dim: usize,
    pub side: f64,
    pub depth: usize,
    pub center: [f64; MAX_DIM],
}

impl TreeConfig {
    pub fn new(dim: usize, side: f64, depth: usize) -> Result<Self> {
        let config = Self {
            dim,
            side,
            depth,
            center: [0.0; MAX_DIM],
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_center(mut self, center: &[f64]) -> Result<Self> {
        if center.len() != self.dim {
            return Err(EifmmError::DimensionMismatch {
                expected: self.dim,
                actual: center.len(),
            });
        }
        self.center = [0.0; MAX_DIM];
        self.center[..self.dim].copy_from_slice(center);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(EifmmError::InvalidConfig(format!(
                "dimension must be 1, 2 or 3 (got {})",
                self.dim
            )));
        }
        if !(self.side.is_finite() && self.side > 0.0) {
            return Err(EifmmError::InvalidConfig(format!(
                "domain side must be positive (got {})",
                self.side
            )));
        }
        if self.depth < 2 {
            return Err(EifmmError::InvalidConfig(format!(
                "tree depth must be at least 2 (got {})",
                self.depth
            )));
        }
        // keeps per-level box counts addressable
        if self.depth * self.dim > 48 {
            return Err(EifmmError::InvalidConfig(format!(
                "tree depth {} is too large for dimension {}",
                self.depth, self.dim
            )));
        }
        Ok(())
    }

    /// `l_k = L / 2^(k+1)`.
    pub fn half_width(&self, level: usize) -> f64 {
        self.side / (1u64 << (level + 1)) as f64
    }

    pub fn boxes_per_side(&self, level: usize) -> usize {
        1 << level
    }

    pub fn n_boxes(&self, level: usize) -> usize {
        1 << (level * self.dim)
    }

    pub fn n_children(&self) -> usize {
        1 << self.dim
    }

    pub fn center(&self) -> &[f64] {
        &self.center[..self.dim]
    }

    pub fn box_center(&self, id: &BoxId) -> [f64; MAX_DIM] {
        let l = self.half_width(id.level);
        let mut c = [0.0; MAX_DIM];
        for d in 0..self.dim {
            c[d] = self.center[d] - 0.5 * self.side + (2 * id.index[d] + 1) as f64 * l;
        }
        c
    }

    /// Row-major linear index of a box within its level (axis 0 fastest).
    pub fn linear_index(&self, id: &BoxId) -> usize {
        let n = self.boxes_per_side(id.level);
        (0..self.dim).rev().fold(0, |acc, d| acc * n + id.index[d])
    }

    pub fn box_from_linear(&self, level: usize, mut linear: usize) -> BoxId {
        let n = self.boxes_per_side(level);
        let mut index = [0; MAX_DIM];
        for slot in index.iter_mut().take(self.dim) {
            *slot = linear % n;
            linear /= n;
        }
        BoxId { level, index }
    }

    /// Offset `c_child - c_parent` for the child in slot `slot` at `child_level`.
    pub fn child_offset(&self, child_level: usize, slot: usize) -> [f64; MAX_DIM] {
        let l = self.half_width(child_level);
        let mut off = [0.0; MAX_DIM];
        for (d, o) in off.iter_mut().enumerate().take(self.dim) {
            *o = if (slot >> d) & 1 == 1 { l } else { -l };
        }
        off
    }

    /// All boxes at the same level whose index differs by at most one per axis,
    /// the box itself included.
    pub fn neighbor_list(&self, id: &BoxId) -> Vec<BoxId> {
        let n = self.boxes_per_side(id.level) as i64;
        let mut out = Vec::with_capacity(3usize.pow(self.dim as u32));
        for_each_offset(self.dim, 1, |delta| {
            if let Some(nb) = id.shifted(self.dim, delta, n) {
                out.push(nb);
            }
        });
        out
    }

    /// Children of the parent's neighbours that are well separated from `id`,
    /// each tagged with the canonical index of its transfer offset.
    pub fn interaction_list(&self, id: &BoxId, table: &TransferTable) -> Vec<(BoxId, usize)> {
        if id.level < 2 {
            return Vec::new();
        }
        let n = self.boxes_per_side(id.level) as i64;
        let parent = id.parent();
        let mut out = Vec::new();
        for pn in self.neighbor_list(&parent) {
            for slot in 0..self.n_children() {
                let child = pn.child(self.dim, slot);
                let mut delta = [0i64; MAX_DIM];
                let mut sep = 0;
                for d in 0..self.dim {
                    delta[d] = child.index[d] as i64 - id.index[d] as i64;
                    sep = sep.max(delta[d].abs());
                }
                if sep >= 2 {
                    let t = table
                        .index_of(&delta)
                        .expect("interaction offsets lie in [-3, 3]^D");
                    debug_assert!(child.index[..self.dim].iter().all(|&i| (i as i64) < n));
                    out.push((child, t));
                }
            }
        }
        out
    }

    pub fn level_geometry(&self, level: usize) -> LevelGeometry {
        LevelGeometry {
            dim: self.dim,
            level,
            side: self.side,
            half_width: self.half_width(level),
        }
    }
}

fn for_each_offset(dim: usize, radius: i64, mut f: impl FnMut(&[i64; MAX_DIM])) {
    let span = (2 * radius + 1) as usize;
    let total = span.pow(dim as u32);
    for mut code in 0..total {
        let mut delta = [0i64; MAX_DIM];
        for slot in delta.iter_mut().take(dim) {
            *slot = (code % span) as i64 - radius;
            code /= span;
        }
        f(&delta);
    }
}

/// A box of the tree: its level and per-axis cell index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoxId {
    pub level: usize,
    pub index: [usize; MAX_DIM],
}

impl BoxId {
    pub fn new(level: usize, index: &[usize]) -> Self {
        let mut idx = [0; MAX_DIM];
        idx[..index.len()].copy_from_slice(index);
        Self { level, index: idx }
    }

    pub fn parent(&self) -> BoxId {
        assert!(self.level > 0, "the root has no parent");
        let mut index = self.index;
        for i in index.iter_mut() {
            *i >>= 1;
        }
        BoxId {
            level: self.level - 1,
            index,
        }
    }

    pub fn child(&self, dim: usize, slot: usize) -> BoxId {
        let mut index = [0; MAX_DIM];
        for d in 0..dim {
            index[d] = 2 * self.index[d] + ((slot >> d) & 1);
        }
        BoxId {
            level: self.level + 1,
            index,
        }
    }

    /// Position of this box among its parent's children.
    pub fn child_slot(&self, dim: usize) -> usize {
        (0..dim).fold(0, |acc, d| acc | ((self.index[d] & 1) << d))
    }

    fn shifted(&self, dim: usize, delta: &[i64; MAX_DIM], n: i64) -> Option<BoxId> {
        let mut index = [0; MAX_DIM];
        for d in 0..dim {
            let v = self.index[d] as i64 + delta[d];
            if v < 0 || v >= n {
                return None;
            }
            index[d] = v as usize;
        }
        Some(BoxId {
            level: self.level,
            index,
        })
    }
}

/// Enumeration of the `7^D - 3^D` integer transfer offsets with components in
/// `[-3, 3]` and max-norm at least 2, in lexicographic order (last axis slowest).
#[derive(Clone, Debug)]
pub struct TransferTable {
    dim: usize,
    offsets: Vec<[i64; MAX_DIM]>,
    lookup: Vec<usize>,
}

impl TransferTable {
    pub fn new(dim: usize) -> Self {
        let mut offsets = Vec::new();
        let mut lookup = vec![usize::MAX; 7usize.pow(dim as u32)];
        let mut code = 0;
        for_each_offset(dim, 3, |delta| {
            if delta[..dim].iter().any(|v| v.abs() >= 2) {
                lookup[code] = offsets.len();
                offsets.push(*delta);
            }
            code += 1;
        });
        Self {
            dim,
            offsets,
            lookup,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[[i64; MAX_DIM]] {
        &self.offsets
    }

    pub fn index_of(&self, delta: &[i64; MAX_DIM]) -> Option<usize> {
        let mut code = 0usize;
        for d in (0..self.dim).rev() {
            let v = delta[d];
            if !(-3..=3).contains(&v) {
                return None;
            }
            code = code * 7 + (v + 3) as usize;
        }
        match self.lookup[code] {
            usize::MAX => None,
            t => Some(t),
        }
    }

    /// Physical displacement `c_J - c_I` for offset `t` at half width `l`.
    pub fn physical(&self, t: usize, half_width: f64) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for d in 0..self.dim {
            out[d] = 2.0 * half_width * self.offsets[t][d] as f64;
        }
        out
    }
}

/// Translated reference domains of one level.
///
/// `J0 = [-l, l]^D` is a source box moved to the origin; `I0` is the union of
/// every target box position that is well separated from it,
/// `[-L+l, L-l]^D` minus the open cube `(-3l, 3l)^D`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeometry {
    pub dim: usize,
    pub level: usize,
    pub side: f64,
    pub half_width: f64,
}

impl LevelGeometry {
    fn slack(&self) -> f64 {
        1e-12 * self.side
    }

    pub fn in_j0(&self, p: &[f64]) -> bool {
        let lim = self.half_width + self.slack();
        p.iter().all(|v| v.abs() <= lim)
    }

    pub fn in_i0(&self, p: &[f64]) -> bool {
        let outer = self.side - self.half_width + self.slack();
        let inner = 3.0 * self.half_width - self.slack();
        p.iter().all(|v| v.abs() <= outer) && p.iter().any(|v| v.abs() >= inner)
    }
}

/// How the `I0` training candidates are reduced when the matched-spacing
/// tensor grid exceeds the point budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XGridLayout {
    /// Tensor grid over `[-L+l, L-l]^D` with the `J0` spacing, thinned by
    /// coarsening the spacing uniformly until the budget is met.
    Uniform,
    /// Nested max-norm shells around the excluded cube, with geometric radial
    /// spacing and a fixed number of samples per shell face. Self-similar
    /// across levels, so deep levels keep the near shell resolved.
    Shells,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Points per axis of the `J0` grid.
    pub resolution: usize,
    /// Cap on the number of `I0` candidates.
    pub x_budget: usize,
    pub layout: XGridLayout,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            resolution: 7,
            x_budget: 4096,
            layout: XGridLayout::Shells,
        }
    }
}

/// Candidate point sets for the greedy searches of one EIM.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub points_x: PointSet,
    pub points_y: PointSet,
}

impl TrainingSet {
    /// Swaps the roles of the two candidate sets.
    pub fn transposed(&self) -> TrainingSet {
        TrainingSet {
            points_x: self.points_y.clone(),
            points_y: self.points_x.clone(),
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n)
        .map(|i| {
            if i + 1 == n {
                b
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn tensor_grid(dim: usize, axis: &[f64], mut keep: impl FnMut(&[f64]) -> bool) -> PointSet {
    let n = axis.len();
    let mut out = PointSet::new(dim);
    let mut p = [0.0; MAX_DIM];
    for mut code in 0..n.pow(dim as u32) {
        for slot in p.iter_mut().take(dim) {
            *slot = axis[code % n];
            code /= n;
        }
        if keep(&p[..dim]) {
            out.push(&p[..dim]);
        }
    }
    out
}

/// 1D coordinates of the `I0` tensor grid: the three segments
/// `[-L+l, -3l]`, `[-3l, 3l]`, `[3l, L-l]`, each at spacing close to `h`.
fn i0_axis(geometry: &LevelGeometry, h: f64) -> Vec<f64> {
    let l = geometry.half_width;
    let outer = geometry.side - l;
    let breaks = [-outer, -3.0 * l, 3.0 * l, outer];
    let mut axis = vec![-outer];
    for w in breaks.windows(2) {
        let n = ((w[1] - w[0]) / h).round().max(1.0) as usize;
        axis.extend(linspace(w[0], w[1], n + 1).into_iter().skip(1));
    }
    axis
}

fn count_outside_core(axis: &[f64], dim: usize, inner: f64) -> usize {
    let core = axis.iter().filter(|v| v.abs() < inner).count();
    axis.len().pow(dim as u32) - core.pow(dim as u32)
}

fn uniform_x_grid(geometry: &LevelGeometry, h: f64, budget: usize) -> PointSet {
    let dim = geometry.dim;
    let inner = 3.0 * geometry.half_width * (1.0 - 1e-12);
    let mut spacing = h;
    let mut axis = i0_axis(geometry, spacing);
    while count_outside_core(&axis, dim, inner) > budget && axis.len() > 4 {
        spacing *= 1.05;
        axis = i0_axis(geometry, spacing);
    }
    tensor_grid(dim, &axis, |p| p.iter().any(|v| v.abs() >= inner))
}

/// Samples on the surface of the max-norm sphere of radius `radius`, using
/// `per_edge` points along each face edge.
fn shell_points(dim: usize, radius: f64, per_edge: usize, out: &mut PointSet) {
    let axis = linspace(-radius, radius, per_edge);
    let on_surface = radius * (1.0 - 1e-12);
    let grid = tensor_grid(dim, &axis, |p| p.iter().any(|v| v.abs() >= on_surface));
    for p in grid.iter() {
        out.push(p);
    }
}

fn shell_count(dim: usize, per_edge: usize) -> usize {
    let inner = per_edge.saturating_sub(2);
    per_edge.pow(dim as u32) - inner.pow(dim as u32)
}

/// Largest per-edge count (capped by the matched-spacing value) whose shell
/// set at `reference` fits the budget.
fn shell_edge_points(reference: &LevelGeometry, resolution: usize, budget: usize) -> usize {
    let l = reference.half_width;
    let mut per_edge = 3 * (resolution - 1) + 1;
    while per_edge > 3 {
        let radii = shell_radii(3.0 * l, reference.side - l, 2.0 / (per_edge - 1) as f64);
        if radii.len() * shell_count(reference.dim, per_edge) <= budget {
            break;
        }
        per_edge -= 1;
    }
    per_edge
}

fn shells_x_grid(geometry: &LevelGeometry, per_edge: usize) -> PointSet {
    let dim = geometry.dim;
    let l = geometry.half_width;
    let radii = shell_radii(3.0 * l, geometry.side - l, 2.0 / (per_edge - 1) as f64);
    let mut out = PointSet::with_capacity(dim, radii.len() * shell_count(dim, per_edge));
    for r in radii {
        shell_points(dim, r, per_edge, &mut out);
    }
    out
}

/// Radii `r_0 = inner`, `r_{i+1} = r_i (1 + growth)`, with the last shell
/// placed exactly on `outer`.
fn shell_radii(inner: f64, outer: f64, growth: f64) -> Vec<f64> {
    let mut radii = vec![inner];
    let mut r = inner;
    while r < outer {
        r *= 1.0 + growth;
        radii.push(r.min(outer));
    }
    if radii.len() > 1 {
        let n = radii.len();
        if n >= 3 && outer - radii[n - 2] < 0.5 * growth * radii[n - 2] {
            radii.remove(n - 2);
        }
    }
    radii
}

/// Candidate sets for the EIM over `(I0, J0)` at one level.
///
/// The `J0` grid is the uniform tensor grid with `resolution` points per
/// axis. The `I0` candidates follow [`TrainingConfig::layout`] and never
/// exceed `x_budget` points (except for degenerate budgets, where one shell or
/// a four-point axis is kept).
pub fn training_grids(geometry: &LevelGeometry, training: &TrainingConfig) -> TrainingSet {
    training_grids_with_reference(geometry, geometry, training)
}

/// As [`training_grids`], but for the shell layout the per-face sampling is
/// sized so that the set built at `reference` (normally the deepest level of
/// the tree, whose `I0` has the largest relative extent) fits the budget.
/// Every level of a tree then sees the same near-shell sampling in units of
/// its own half width.
pub fn training_grids_with_reference(
    geometry: &LevelGeometry,
    reference: &LevelGeometry,
    training: &TrainingConfig,
) -> TrainingSet {
    let res = training.resolution.max(2);
    let l = geometry.half_width;
    let axis_y = linspace(-l, l, res);
    let points_y = tensor_grid(geometry.dim, &axis_y, |_| true);
    let h = 2.0 * l / (res - 1) as f64;
    let points_x = match training.layout {
        XGridLayout::Uniform => uniform_x_grid(geometry, h, training.x_budget),
        XGridLayout::Shells => {
            let reference = if reference.level >= geometry.level {
                reference
            } else {
                geometry
            };
            shells_x_grid(
                geometry,
                shell_edge_points(reference, res, training.x_budget),
            )
        }
    };
    TrainingSet { points_x, points_y }
}

/// Training sets for `level` of a tree described by `config`.
pub fn training_grids_for_tree(
    config: &TreeConfig,
    level: usize,
    training: &TrainingConfig,
) -> TrainingSet {
    training_grids_with_reference(
        &config.level_geometry(level),
        &config.level_geometry(config.depth),
        training,
    )
}

/// Points binned into the leaves of a uniform tree.
#[derive(Clone, Debug)]
pub struct Tree {
    config: TreeConfig,
    leaf_of_point: Vec<usize>,
    leaf_start: Vec<usize>,
    leaf_points: Vec<usize>,
    /// Number of points per box, per level.
    occupancy: Vec<Vec<usize>>,
}

impl Tree {
    pub fn build(points: &PointSet, config: &TreeConfig) -> Result<Tree> {
        config.validate()?;
        if points.dim() != config.dim && !points.is_empty() {
            return Err(EifmmError::DimensionMismatch {
                expected: config.dim,
                actual: points.dim(),
            });
        }
        let depth = config.depth;
        let n_side = config.boxes_per_side(depth);
        let cell = 2.0 * config.half_width(depth);
        let half = 0.5 * config.side;
        let mut leaf_of_point = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let mut index = [0usize; MAX_DIM];
            for d in 0..config.dim {
                let u = p[d] - config.center[d] + half;
                if !(u >= 0.0 && u <= config.side) {
                    return Err(EifmmError::PointOutsideDomain {
                        index: i,
                        coords: p.to_vec(),
                    });
                }
                index[d] = ((u / cell).floor() as usize).min(n_side - 1);
            }
            leaf_of_point.push(config.linear_index(&BoxId {
                level: depth,
                index,
            }));
        }

        let n_leaves = config.n_boxes(depth);
        let mut counts = vec![0usize; n_leaves];
        for &leaf in &leaf_of_point {
            counts[leaf] += 1;
        }
        let mut leaf_start = Vec::with_capacity(n_leaves + 1);
        leaf_start.push(0);
        for c in &counts {
            leaf_start.push(leaf_start.last().unwrap() + c);
        }
        let mut cursor = leaf_start[..n_leaves].to_vec();
        let mut leaf_points = vec![0; leaf_of_point.len()];
        for (i, &leaf) in leaf_of_point.iter().enumerate() {
            leaf_points[cursor[leaf]] = i;
            cursor[leaf] += 1;
        }

        let mut occupancy = vec![Vec::new(); depth + 1];
        occupancy[depth] = counts;
        for level in (0..depth).rev() {
            let mut up = vec![0usize; config.n_boxes(level)];
            for (linear, &c) in occupancy[level + 1].iter().enumerate() {
                if c > 0 {
                    let parent = config.box_from_linear(level + 1, linear).parent();
                    up[config.linear_index(&parent)] += c;
                }
            }
            occupancy[level] = up;
        }

        Ok(Tree {
            config: config.clone(),
            leaf_of_point,
            leaf_start,
            leaf_points,
            occupancy,
        })
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn n_points(&self) -> usize {
        self.leaf_of_point.len()
    }

    /// Linear leaf index of point `i`.
    pub fn leaf_of(&self, i: usize) -> usize {
        self.leaf_of_point[i]
    }

    pub fn leaf_box_of(&self, i: usize) -> BoxId {
        self.config
            .box_from_linear(self.config.depth, self.leaf_of_point[i])
    }

    /// Indices of the points in leaf `linear`.
    pub fn points_in_leaf(&self, linear: usize) -> &[usize] {
        &self.leaf_points[self.leaf_start[linear]..self.leaf_start[linear + 1]]
    }

    pub fn occupancy(&self, level: usize) -> &[usize] {
        &self.occupancy[level]
    }

    pub fn is_occupied(&self, level: usize, linear: usize) -> bool {
        self.occupancy[level][linear] > 0
    }

    /// Linear indices of the non-empty boxes at `level`.
    pub fn occupied_boxes(&self, level: usize) -> Vec<usize> {
        self.occupancy[level]
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c > 0).then_some(i))
            .collect()
    }

    pub fn neighbor_list(&self, id: &BoxId) -> Vec<BoxId> {
        self.config.neighbor_list(id)
    }

    pub fn interaction_list(&self, id: &BoxId, table: &TransferTable) -> Vec<(BoxId, usize)> {
        self.config.interaction_list(id, table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dim: usize, depth: usize) -> TreeConfig {
        TreeConfig::new(dim, 1.0, depth).unwrap()
    }

    #[test]
    fn origin_lands_past_the_midpoint() {
        let config = cfg(3, 2);
        let tree = Tree::build(&PointSet::from_rows(&[[0.0, 0.0, 0.0]]), &config).unwrap();
        assert_eq!(tree.leaf_box_of(0).index, [2, 2, 2]);
        let occupied: Vec<_> = tree.occupied_boxes(2);
        assert_eq!(occupied.len(), 1);
    }

    #[test]
    fn rejects_outside_points_and_bad_configs() {
        let config = cfg(2, 3);
        let err = Tree::build(&PointSet::from_rows(&[[0.1, 0.2], [0.7, 0.0]]), &config).unwrap_err();
        match err {
            EifmmError::PointOutsideDomain { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other}"),
        }
        assert!(TreeConfig::new(3, 1.0, 1).is_err());
        assert!(TreeConfig::new(4, 1.0, 3).is_err());
        assert!(TreeConfig::new(3, -1.0, 3).is_err());
    }

    #[test]
    fn upper_face_is_clamped() {
        let config = cfg(1, 3);
        let tree = Tree::build(&PointSet::from_rows(&[[0.5], [-0.5]]), &config).unwrap();
        assert_eq!(tree.leaf_box_of(0).index[0], 7);
        assert_eq!(tree.leaf_box_of(1).index[0], 0);
    }

    #[test]
    fn neighbor_counts() {
        let config = cfg(3, 3);
        assert_eq!(config.neighbor_list(&BoxId::new(3, &[3, 4, 2])).len(), 27);
        assert_eq!(config.neighbor_list(&BoxId::new(3, &[0, 0, 0])).len(), 8);
        assert_eq!(config.neighbor_list(&BoxId::new(3, &[7, 7, 7])).len(), 8);
        let line = cfg(1, 4);
        assert_eq!(line.neighbor_list(&BoxId::new(4, &[5])).len(), 3);
    }

    #[test]
    fn transfer_offset_counts() {
        assert_eq!(TransferTable::new(3).len(), 316);
        assert_eq!(TransferTable::new(2).len(), 40);
        assert_eq!(TransferTable::new(1).len(), 4);
        let table = TransferTable::new(3);
        for (t, off) in table.offsets().iter().enumerate() {
            assert_eq!(table.index_of(off), Some(t));
        }
        assert_eq!(table.index_of(&[1, 0, -1]), None);
        assert_eq!(table.index_of(&[4, 0, 0]), None);
    }

    #[test]
    fn interaction_lists() {
        let line = cfg(1, 5);
        let t1 = TransferTable::new(1);
        assert_eq!(line.interaction_list(&BoxId::new(5, &[13]), &t1).len(), 3);
        assert_eq!(line.interaction_list(&BoxId::new(5, &[12]), &t1).len(), 3);
        // four distinct offsets appear across the level even though any one
        // deep-interior box only has three entries
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..32 {
            for (_, t) in line.interaction_list(&BoxId::new(5, &[i]), &t1) {
                seen.insert(t);
            }
        }
        assert_eq!(seen.len(), 4);
        let cube = cfg(3, 4);
        let t3 = TransferTable::new(3);
        assert_eq!(cube.interaction_list(&BoxId::new(4, &[7, 8, 6]), &t3).len(), 189);
        assert!(cube.interaction_list(&BoxId::new(1, &[1, 0, 1]), &t3).is_empty());
        assert!(cube.interaction_list(&BoxId::new(0, &[0, 0, 0]), &t3).is_empty());
    }

    #[test]
    fn level_geometry_values() {
        let config = cfg(1, 3);
        let g = config.level_geometry(3);
        assert_eq!(g.half_width, 1.0 / 16.0);
        // J0 = (-l, l), I0 = (-L+l, -3l) u (3l, L-l)
        assert!(g.in_j0(&[0.0625]) && !g.in_j0(&[0.07]));
        assert!(g.in_i0(&[3.0 / 16.0]) && g.in_i0(&[-15.0 / 16.0]));
        assert!(!g.in_i0(&[0.1]) && !g.in_i0(&[0.95]));
        let g2 = config.level_geometry(2);
        assert_eq!(g2.half_width, 2.0 * g.half_width);
    }

    #[test]
    fn training_grid_shapes() {
        let config = cfg(1, 3);
        let g = config.level_geometry(3);
        let training = TrainingConfig {
            resolution: 10,
            x_budget: 1 << 20,
            layout: XGridLayout::Uniform,
        };
        let set = training_grids(&g, &training);
        assert_eq!(set.points_y.len(), 10);
        assert!(set.points_y.iter().all(|p| p[0].abs() <= g.half_width));
        assert!(set.points_x.iter().all(|p| p[0].abs() >= 3.0 * g.half_width * (1.0 - 1e-12)));
        let hy = 2.0 * g.half_width / 9.0;
        let mut xs: Vec<f64> = set.points_x.iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        for w in xs.windows(2) {
            let gap = w[1] - w[0];
            if gap < 2.0 * g.half_width {
                assert!((gap - hy).abs() <= 1e-3 * hy, "gap {gap} vs {hy}");
            }
        }
    }

    #[test]
    fn training_grids_respect_budget_and_exclusion() {
        let config = cfg(3, 5);
        for layout in [XGridLayout::Uniform, XGridLayout::Shells] {
            for level in 2..=5 {
                let g = config.level_geometry(level);
                let training = TrainingConfig {
                    resolution: 7,
                    x_budget: 4096,
                    layout,
                };
                let set = training_grids(&g, &training);
                assert_eq!(set.points_y.len(), 343);
                assert!(set.points_x.len() <= 4096, "{layout:?} {}", set.points_x.len());
                assert!(set.points_x.iter().all(|p| g.in_i0(p)));
                assert!(set.points_y.iter().all(|p| g.in_j0(p)));
            }
        }
    }

    #[test]
    fn child_centers_are_offset_by_child_half_width() {
        let config = cfg(3, 4);
        let parent = BoxId::new(2, &[1, 3, 2]);
        let cp = config.box_center(&parent);
        for slot in 0..8 {
            let child = parent.child(3, slot);
            assert_eq!(child.parent(), parent);
            assert_eq!(child.child_slot(3), slot);
            let cc = config.box_center(&child);
            let off = config.child_offset(3, slot);
            for d in 0..3 {
                assert!((cc[d] - cp[d] - off[d]).abs() < 1e-15);
                assert!(((cp[d] - cc[d]).abs() - config.half_width(3)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_index_round_trip() {
        let config = cfg(3, 3);
        for linear in 0..config.n_boxes(3) {
            let id = config.box_from_linear(3, linear);
            assert_eq!(config.linear_index(&id), linear);
        }
    }
}
