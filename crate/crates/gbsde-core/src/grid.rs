//! Tensor-product space grids, time grids and discrete value fields.
//!
//! Fields are interpolated multilinearly inside the domain and continued
//! linearly outside it, with the boundary gradient clamped to the field's
//! global Lipschitz estimate.

use crate::error::{Error, Result};

/// One spatial axis: uniform nodes on [min, max].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    /// Number of nodes (not cells).
    pub count: usize,
}

impl AxisSpec {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self> {
        if !(max > min) {
            return Err(Error::Config(format!("axis bounds must satisfy min < max, got [{min}, {max}]")));
        }
        if count < 8 {
            return Err(Error::Config(format!("axis needs at least 8 nodes, got {count}")));
        }
        Ok(AxisSpec { min, max, count })
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.min + self.spacing() * i as f64
    }
}

/// Row-major tensor grid over k axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    axes: Vec<AxisSpec>,
    node_count: usize,
}

impl SpatialGrid {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("spatial grid needs at least one axis".into()));
        }
        let node_count = axes.iter().map(|a| a.count).product();
        Ok(SpatialGrid { axes, node_count })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }

    pub fn axis(&self, a: usize) -> &AxisSpec {
        &self.axes[a]
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing()).fold(0.0, f64::max)
    }

    /// Multi-index of a flat node index (row-major, axis 0 slowest).
    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.axes.len()).rev() {
            out[a] = idx % self.axes[a].count;
            idx /= self.axes[a].count;
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for (a, &i) in multi.iter().enumerate() {
            idx = idx * self.axes[a].count + i;
        }
        idx
    }

    /// Coordinates of a flat node index.
    pub fn coords(&self, idx: usize, out: &mut [f64]) {
        let mut rem = idx;
        for a in (0..self.axes.len()).rev() {
            let i = rem % self.axes[a].count;
            rem /= self.axes[a].count;
            out[a] = self.axes[a].node(i);
        }
    }

    /// Step of the flat index when the multi-index moves one node along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.axes[axis + 1..].iter().map(|a| a.count).product()
    }

    /// Is the node on the boundary of any axis?
    pub fn is_boundary(&self, idx: usize) -> bool {
        let mut rem = idx;
        for a in (0..self.axes.len()).rev() {
            let i = rem % self.axes[a].count;
            rem /= self.axes[a].count;
            if i == 0 || i == self.axes[a].count - 1 {
                return true;
            }
        }
        false
    }

    /// Largest |Δv|/Δx over adjacent node pairs: the field's global
    /// Lipschitz estimate used to clamp boundary extrapolation.
    pub fn max_adjacent_slope(&self, values: &[f64]) -> f64 {
        let mut best = 0.0f64;
        for axis in 0..self.dim() {
            let stride = self.stride(axis);
            let n = self.axes[axis].count;
            let dx = self.axes[axis].spacing();
            let mut multi = vec![0usize; self.dim()];
            for idx in 0..self.node_count {
                self.multi_index(idx, &mut multi);
                if multi[axis] + 1 < n {
                    let d = (values[idx + stride] - values[idx]).abs() / dx;
                    best = best.max(d);
                }
            }
        }
        best
    }

    /// Multilinear interpolation with gradient-clamped linear continuation
    /// outside the box. `lip` bounds the extrapolation slope.
    pub fn interpolate(&self, values: &[f64], x: &[f64], lip: f64) -> f64 {
        debug_assert_eq!(values.len(), self.node_count);
        debug_assert_eq!(x.len(), self.dim());
        let k = self.dim();
        let mut clamped = [0.0f64; 4];
        let mut overshoot = [0.0f64; 4];
        let mut outside = false;
        for a in 0..k {
            let axis = &self.axes[a];
            if x[a] < axis.min {
                clamped[a] = axis.min;
                overshoot[a] = x[a] - axis.min;
                outside = true;
            } else if x[a] > axis.max {
                clamped[a] = axis.max;
                overshoot[a] = x[a] - axis.max;
                outside = true;
            } else {
                clamped[a] = x[a];
                overshoot[a] = 0.0;
            }
        }
        let base = self.interp_inside(values, &clamped[..k]);
        if !outside {
            return base;
        }
        let mut value = base;
        for a in 0..k {
            if overshoot[a] == 0.0 {
                continue;
            }
            let axis = &self.axes[a];
            let dx = axis.spacing();
            let mut inner = [0.0f64; 4];
            inner[..k].copy_from_slice(&clamped[..k]);
            let grad = if overshoot[a] > 0.0 {
                inner[a] = axis.max - dx;
                (base - self.interp_inside(values, &inner[..k])) / dx
            } else {
                inner[a] = axis.min + dx;
                (self.interp_inside(values, &inner[..k]) - base) / dx
            };
            let grad = grad.clamp(-lip, lip);
            value += grad * overshoot[a];
        }
        value
    }

    fn interp_inside(&self, values: &[f64], x: &[f64]) -> f64 {
        let k = self.dim();
        let mut cell = [0usize; 4];
        let mut frac = [0.0f64; 4];
        for a in 0..k {
            let axis = &self.axes[a];
            let u = (x[a] - axis.min) / axis.spacing();
            let i = (u.floor() as usize).min(axis.count - 2);
            cell[a] = i;
            frac[a] = (u - i as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        for corner in 0..1usize << k {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..k {
                let hi = corner >> a & 1 == 1;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                idx = idx * self.axes[a].count + cell[a] + usize::from(hi);
            }
            if w != 0.0 {
                acc += w * values[idx];
            }
        }
        acc
    }
}

/// Uniform time grid t_0 < ... < t_N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::Config(format!("time grid needs t_start < t_end, got [{t_start}, {t_end}]")));
        }
        if steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        Ok(TimeGrid { t_start, t_end, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    pub fn node(&self, m: usize) -> f64 {
        if m == self.steps {
            self.t_end
        } else {
            self.t_start + self.dt() * m as f64
        }
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }
}

/// Discretization of one backward solve: spatial box, node counts and time
/// steps. Interpolation is multilinear; extrapolation continues the clamped
/// boundary gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub space: SpatialGrid,
    pub time: TimeGrid,
}

impl GridSpec {
    pub fn new(space: SpatialGrid, time: TimeGrid) -> Self {
        GridSpec { space, time }
    }

    /// Uniform 1-d helper.
    pub fn uniform_1d(min: f64, max: f64, nodes: usize, t_start: f64, t_end: f64, steps: usize) -> Result<Self> {
        Ok(GridSpec {
            space: SpatialGrid::new(vec![AxisSpec::new(min, max, nodes)?])?,
            time: TimeGrid::new(t_start, t_end, steps)?,
        })
    }

    pub fn dt(&self) -> f64 {
        self.time.dt()
    }

    /// Δt + max Δx, the slack scale used by comparison and K tolerances.
    pub fn slack_scale(&self) -> f64 {
        self.dt() + self.space.max_spacing()
    }
}

/// A vector-valued function of (time node, spatial node): the discrete
/// solution fields. Stored slice-major, channel-minor. Each written slice
/// carries its own adjacent-slope bound for extrapolation clamping.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub time: TimeGrid,
    pub space: SpatialGrid,
    channels: usize,
    data: Vec<f64>,
    lip: Vec<f64>,
}

impl ValueField {
    pub fn zeros(time: TimeGrid, space: SpatialGrid, channels: usize) -> Self {
        let slices = time.nodes();
        let nodes = space.node_count();
        ValueField {
            time,
            space,
            channels,
            data: vec![0.0; slices * channels * nodes],
            lip: vec![0.0; slices * channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn offset(&self, m: usize, c: usize) -> usize {
        debug_assert!(c < self.channels && m < self.time.nodes());
        (m * self.channels + c) * self.space.node_count()
    }

    pub fn slice(&self, m: usize, c: usize) -> &[f64] {
        let o = self.offset(m, c);
        &self.data[o..o + self.space.node_count()]
    }

    /// Overwrites a slice and refreshes its Lipschitz estimate.
    pub fn set_slice(&mut self, m: usize, c: usize, values: &[f64]) {
        let o = self.offset(m, c);
        self.data[o..o + self.space.node_count()].copy_from_slice(values);
        self.lip[m * self.channels + c] = self.space.max_adjacent_slope(values);
    }

    pub fn value(&self, m: usize, c: usize, node: usize) -> f64 {
        self.data[self.offset(m, c) + node]
    }

    pub fn slice_lipschitz(&self, m: usize, c: usize) -> f64 {
        self.lip[m * self.channels + c]
    }

    /// Interpolates channel `c` of slice `m` at a spatial point.
    pub fn interpolate(&self, m: usize, c: usize, x: &[f64]) -> f64 {
        self.space.interpolate(self.slice(m, c), x, self.slice_lipschitz(m, c))
    }

    /// Interpolates linearly in time between bracketing slices, multilinear
    /// in space; t is clamped to the grid's span.
    pub fn interpolate_tx(&self, t: f64, c: usize, x: &[f64]) -> f64 {
        let dt = self.time.dt();
        let u = ((t - self.time.t_start) / dt).clamp(0.0, self.time.steps as f64);
        let m = (u.floor() as usize).min(self.time.steps - 1);
        let w = u - m as f64;
        let lo = self.interpolate(m, c, x);
        if w == 0.0 {
            return lo;
        }
        let hi = self.interpolate(m + 1, c, x);
        lo * (1.0 - w) + hi * w
    }

    /// Sup over slices, channels and nodes of |self - other|.
    pub fn sup_distance(&self, other: &ValueField) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest slice Lipschitz estimate over the whole field.
    pub fn lipschitz_bound(&self) -> f64 {
        self.lip.iter().fold(0.0f64, |m, v| m.max(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_1d() -> SpatialGrid {
        SpatialGrid::new(vec![AxisSpec::new(-2.0, 2.0, 9).unwrap()]).unwrap()
    }

    #[test]
    fn interpolation_exact_on_linear() {
        let g = grid_1d();
        let values: Vec<f64> = (0..9).map(|i| 3.0 * g.axis(0).node(i) + 1.0).collect();
        for &x in &[-2.0, -1.3, 0.0, 0.57, 2.0] {
            assert_relative_eq!(g.interpolate(&values, &[x], f64::INFINITY), 3.0 * x + 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn extrapolation_continues_boundary_gradient() {
        let g = grid_1d();
        let values: Vec<f64> = (0..9).map(|i| 3.0 * g.axis(0).node(i) + 1.0).collect();
        // unclamped: continues the slope 3
        assert_relative_eq!(g.interpolate(&values, &[3.0], 10.0), 10.0, epsilon = 1e-12);
        // clamped to slope 1: value at boundary + 1 * overshoot
        assert_relative_eq!(g.interpolate(&values, &[3.0], 1.0), 8.0, epsilon = 1e-12);
        assert_relative_eq!(g.interpolate(&values, &[-2.5], 10.0), -6.5, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_interpolation() {
        let g = SpatialGrid::new(vec![
            AxisSpec::new(0.0, 1.0, 9).unwrap(),
            AxisSpec::new(0.0, 1.0, 9).unwrap(),
        ])
        .unwrap();
        // f(x, y) = 2x + 3y + xy is reproduced at cell corners; bilinear in between
        let mut values = vec![0.0; g.node_count()];
        let mut c = [0.0; 2];
        for idx in 0..g.node_count() {
            g.coords(idx, &mut c);
            values[idx] = 2.0 * c[0] + 3.0 * c[1] + c[0] * c[1];
        }
        for &(x, y) in &[(0.5, 0.5), (0.125, 0.875), (1.0, 0.0)] {
            assert_relative_eq!(
                g.interpolate(&values, &[x, y], f64::INFINITY),
                2.0 * x + 3.0 * y + x * y,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn adjacent_slope_bound() {
        let g = grid_1d();
        let values: Vec<f64> = (0..9).map(|i| g.axis(0).node(i).powi(2)).collect();
        // steepest adjacent slope of x^2 on [-2,2] with dx=0.5: ((2)^2-(1.5)^2)/0.5 = 3.5
        assert_relative_eq!(g.max_adjacent_slope(&values), 3.5, epsilon = 1e-13);
    }

    #[test]
    fn time_grid_nodes_hit_endpoints() {
        let t = TimeGrid::new(0.0, 1.0, 7).unwrap();
        assert_eq!(t.node(0), 0.0);
        assert_eq!(t.node(7), 1.0);
        assert!(t.dt() > 0.0);
    }

    #[test]
    fn axis_validation() {
        assert!(AxisSpec::new(0.0, 0.0, 9).is_err());
        assert!(AxisSpec::new(0.0, 1.0, 7).is_err());
    }

    #[test]
    fn value_field_slices() {
        let time = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let space = grid_1d();
        let mut f = ValueField::zeros(time, space, 2);
        let values: Vec<f64> = (0..9).map(|i| i as f64).collect();
        f.set_slice(1, 1, &values);
        assert_eq!(f.value(1, 1, 3), 3.0);
        assert_eq!(f.value(1, 0, 3), 0.0);
        assert!(f.slice_lipschitz(1, 1) > 0.0);
    }
}
