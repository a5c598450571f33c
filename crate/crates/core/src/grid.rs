//! Tensor-product grids over the slab `[x-box] x [delta, t_max]`, with
//! second-order finite-difference stencils and a deterministic CSV format.
//!
//! Axis layout: tangential axes first (`x1` fastest-varying in memory), the
//! height axis `t` last (slowest). All file output prints floats with 17
//! significant digits so that values round-trip bit-exactly.

use crate::error::{CmcError, Result};
use std::io::{BufRead, Write};

/// One coordinate axis: `count` equally spaced nodes on `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    /// Validated constructor.
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(CmcError::Shape(format!(
                "axis range [{min}, {max}] is not a finite nonempty interval"
            )));
        }
        if count < 2 {
            return Err(CmcError::Shape(format!("axis needs at least 2 nodes, got {count}")));
        }
        Ok(Axis { min, max, count })
    }

    /// Node spacing.
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    /// Coordinate of node `i` (exact at both endpoints).
    pub fn coord(&self, i: usize) -> f64 {
        if i == self.count - 1 {
            self.max
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }
}

/// A scalar field sampled on a tensor grid. The last axis is the height `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    values: Vec<f64>,
}

impl GridField {
    /// All-zero field on the given axes (tangential axes first, `t` last).
    pub fn zeros(axes: Vec<Axis>) -> Result<Self> {
        if axes.len() < 2 {
            return Err(CmcError::Shape(format!(
                "a grid needs at least one tangential axis plus the t axis, got {} axes",
                axes.len()
            )));
        }
        let mut strides = Vec::with_capacity(axes.len());
        let mut stride = 1usize;
        for axis in &axes {
            strides.push(stride);
            stride = stride.checked_mul(axis.count).ok_or_else(|| {
                CmcError::Shape("grid size overflows the address space".to_string())
            })?;
        }
        Ok(GridField { axes, strides, values: vec![0.0; stride] })
    }

    /// Field filled by evaluating `f` at every node's coordinates
    /// (`x1, ..., x_{n-1}, t`).
    pub fn from_fn(
        axes: Vec<Axis>,
        mut f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<Self> {
        let mut field = Self::zeros(axes)?;
        let n = field.n();
        let mut idx = vec![0usize; n];
        let mut coords = vec![0.0f64; n];
        for flat in 0..field.values.len() {
            field.unflat(flat, &mut idx);
            field.coords(&idx, &mut coords);
            field.values[flat] = f(&coords)?;
        }
        Ok(field)
    }

    /// Number of axes (tangential count + 1).
    pub fn n(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    /// The height axis (always last).
    pub fn t_axis(&self) -> &Axis {
        self.axes.last().expect("grids always have a t axis")
    }

    /// Bottom edge of the height axis.
    pub fn delta(&self) -> f64 {
        self.t_axis().min
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Flatten a multi-index (axis order, `x1` fastest).
    pub fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.axes.len());
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Inverse of [`GridField::flat`], writing into `out`.
    pub fn unflat(&self, mut flat: usize, out: &mut [usize]) {
        for (axis_i, axis) in self.axes.iter().enumerate() {
            out[axis_i] = flat % axis.count;
            flat /= axis.count;
        }
    }

    /// Node coordinates for a multi-index, written into `out`.
    pub fn coords(&self, idx: &[usize], out: &mut [f64]) {
        for (a, axis) in self.axes.iter().enumerate() {
            out[a] = axis.coord(idx[a]);
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.flat(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let flat = self.flat(idx);
        self.values[flat] = v;
    }

    /// True when any component sits on a face of the box.
    pub fn is_boundary(&self, idx: &[usize]) -> bool {
        idx.iter().zip(&self.axes).any(|(&i, axis)| i == 0 || i == axis.count - 1)
    }

    /// Visit every node in flat (memory) order.
    pub fn for_each_node(&self, mut visit: impl FnMut(usize, &[usize])) {
        let mut idx = vec![0usize; self.n()];
        for flat in 0..self.values.len() {
            self.unflat(flat, &mut idx);
            visit(flat, &idx);
        }
    }

    /// Number of tangential columns (product of tangential axis counts).
    pub fn tangential_len(&self) -> usize {
        self.axes[..self.n() - 1].iter().map(|a| a.count).product()
    }

    /// Flat index of a node's tangential column, consistent with iterating
    /// the tangential axes in the same order and strides as the grid.
    pub fn tangential_flat(&self, idx: &[usize]) -> usize {
        let mut stride = 1usize;
        let mut out = 0usize;
        for (a, axis) in self.axes[..self.n() - 1].iter().enumerate() {
            out += idx[a] * stride;
            stride *= axis.count;
        }
        out
    }

    /// Largest absolute nodal value.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Node-wise difference (shapes must match).
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.axes != other.axes {
            return Err(CmcError::Shape("grid difference: axes differ".to_string()));
        }
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
        Ok(out)
    }

    /// Write the deterministic CSV format: a `#` metadata line, a column
    /// header, then one `x1,...,x_{n-1},t,u` row per node in flat order,
    /// all floats with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n();
        writeln!(
            w,
            "# n={}, h_prime={:.16e}, h_t={:.16e}, delta={:.16e}",
            n,
            self.axes[0].spacing(),
            self.t_axis().spacing(),
            self.delta()
        )?;
        let mut header: Vec<String> = (1..n).map(|k| format!("x{k}")).collect();
        header.push("t".to_string());
        header.push("u".to_string());
        writeln!(w, "{}", header.join(","))?;
        let mut idx = vec![0usize; n];
        let mut coords = vec![0.0f64; n];
        for flat in 0..self.values.len() {
            self.unflat(flat, &mut idx);
            self.coords(&idx, &mut coords);
            let mut row = String::new();
            for c in &coords {
                row.push_str(&format!("{c:.16e},"));
            }
            row.push_str(&format!("{:.16e}", self.values[flat]));
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Read the CSV format back. Axes are reconstructed from the coordinate
    /// columns, so the file is self-describing.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut width = None;
        for (line_no, line) in r.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields[0].parse::<f64>().is_err() {
                continue; // column-name header
            }
            let row: Vec<f64> = fields
                .iter()
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        CmcError::Shape(format!(
                            "csv line {}: cannot parse '{f}' as a number",
                            line_no + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(CmcError::Shape(format!(
                        "csv line {}: expected {w} fields, got {}",
                        line_no + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            rows.push(row);
        }
        let width = width.ok_or_else(|| CmcError::Shape("csv contains no data rows".to_string()))?;
        if width < 3 {
            return Err(CmcError::Shape(
                "csv rows need at least x1, t and u columns".to_string(),
            ));
        }
        let n = width - 1;
        // Reconstruct each axis from the distinct coordinate values.
        let mut axes = Vec::with_capacity(n);
        let mut maps: Vec<std::collections::HashMap<u64, usize>> = Vec::with_capacity(n);
        for a in 0..n {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[a]).collect();
            vals.sort_by(|x, y| x.partial_cmp(y).expect("finite coordinates"));
            vals.dedup();
            let axis = Axis::new(vals[0], *vals.last().expect("nonempty"), vals.len())?;
            let map = vals
                .iter()
                .enumerate()
                .map(|(i, v)| (v.to_bits(), i))
                .collect::<std::collections::HashMap<_, _>>();
            axes.push(axis);
            maps.push(map);
        }
        let mut field = GridField::zeros(axes)?;
        if rows.len() != field.len() {
            return Err(CmcError::Shape(format!(
                "csv has {} rows but the reconstructed grid has {} nodes (incomplete tensor grid)",
                rows.len(),
                field.len()
            )));
        }
        let mut seen = vec![false; field.len()];
        let mut idx = vec![0usize; n];
        for row in &rows {
            for a in 0..n {
                idx[a] = *maps[a].get(&row[a].to_bits()).expect("value came from this column");
            }
            let flat = field.flat(&idx);
            if seen[flat] {
                return Err(CmcError::Shape("csv repeats a grid node".to_string()));
            }
            seen[flat] = true;
            field.values[flat] = row[n];
        }
        Ok(field)
    }
}

/// Dirichlet data on the boundary nodes of a grid.
#[derive(Debug, Clone)]
pub struct BoundarySpec {
    axes: Vec<Axis>,
    /// `(flat node index, value)`, sorted by index.
    values: Vec<(usize, f64)>,
}

impl BoundarySpec {
    /// Evaluate `f` at every boundary node of a grid with these axes.
    pub fn from_fn(
        axes: &[Axis],
        mut f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<Self> {
        let probe = GridField::zeros(axes.to_vec())?;
        let mut values = Vec::new();
        let mut coords = vec![0.0f64; probe.n()];
        let mut err = None;
        probe.for_each_node(|flat, idx| {
            if err.is_some() || !probe.is_boundary(idx) {
                return;
            }
            probe.coords(idx, &mut coords);
            match f(&coords) {
                Ok(v) => values.push((flat, v)),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(BoundarySpec { axes: axes.to_vec(), values })
    }

    /// Axes of the grid this data belongs to.
    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    /// Number of boundary nodes covered.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Overwrite the boundary nodes of `field` with this data.
    pub fn apply_to(&self, field: &mut GridField) -> Result<()> {
        if field.axes() != self.axes {
            return Err(CmcError::Shape(
                "boundary data was built for a different grid".to_string(),
            ));
        }
        for &(flat, v) in &self.values {
            field.values_mut()[flat] = v;
        }
        Ok(())
    }

    /// Iterate `(flat index, value)` pairs.
    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().copied()
    }
}

// ---------------------------------------------------------------------------
// Finite-difference stencils (all second-order accurate)
// ---------------------------------------------------------------------------

/// Offsets and weights (times `1/h`) for a first derivative at position
/// `pos` of an axis with `count` nodes: centered inside, one-sided at the
/// faces.
fn d1_stencil(pos: usize, count: usize) -> (&'static [isize], &'static [f64]) {
    if pos == 0 {
        (&[0, 1, 2], &[-1.5, 2.0, -0.5])
    } else if pos == count - 1 {
        (&[-2, -1, 0], &[0.5, -2.0, 1.5])
    } else {
        (&[-1, 1], &[-0.5, 0.5])
    }
}

/// Offsets and weights (times `1/h^2`) for a second derivative; one-sided
/// variants are used on the faces (requires 4 nodes along the axis there).
fn d2_stencil(pos: usize, count: usize) -> Result<(&'static [isize], &'static [f64])> {
    if pos == 0 || pos == count - 1 {
        if count < 4 {
            return Err(CmcError::Shape(format!(
                "one-sided second derivative needs at least 4 nodes along the axis, got {count}"
            )));
        }
        if pos == 0 {
            Ok((&[0, 1, 2, 3], &[2.0, -5.0, 4.0, -1.0]))
        } else {
            Ok((&[-3, -2, -1, 0], &[-1.0, 4.0, -5.0, 2.0]))
        }
    } else {
        Ok((&[-1, 0, 1], &[1.0, -2.0, 1.0]))
    }
}

fn shifted(field: &GridField, idx: &[usize], axis: usize, offset: isize) -> f64 {
    let mut shifted_idx = idx.to_vec();
    let pos = idx[axis] as isize + offset;
    debug_assert!(pos >= 0 && (pos as usize) < field.axes()[axis].count);
    shifted_idx[axis] = pos as usize;
    field.get(&shifted_idx)
}

/// First derivative along `axis` at node `idx` (second-order accurate,
/// one-sided on faces).
pub fn d1(field: &GridField, idx: &[usize], axis: usize) -> f64 {
    let ax = field.axes()[axis];
    let (offsets, weights) = d1_stencil(idx[axis], ax.count);
    let mut acc = 0.0;
    for (&o, &w) in offsets.iter().zip(weights) {
        acc += w * shifted(field, idx, axis, o);
    }
    acc / ax.spacing()
}

/// Second derivative along `axis` at node `idx`.
pub fn d2(field: &GridField, idx: &[usize], axis: usize) -> Result<f64> {
    let ax = field.axes()[axis];
    let (offsets, weights) = d2_stencil(idx[axis], ax.count)?;
    let mut acc = 0.0;
    for (&o, &w) in offsets.iter().zip(weights) {
        acc += w * shifted(field, idx, axis, o);
    }
    Ok(acc / (ax.spacing() * ax.spacing()))
}

/// Mixed second derivative along two distinct axes: the first-derivative
/// stencil along `axis_a` applied to first derivatives along `axis_b`
/// (reduces to the 4-point cross in the interior).
pub fn d_mixed(field: &GridField, idx: &[usize], axis_a: usize, axis_b: usize) -> f64 {
    debug_assert_ne!(axis_a, axis_b);
    let ax = field.axes()[axis_a];
    let (offsets, weights) = d1_stencil(idx[axis_a], ax.count);
    let mut acc = 0.0;
    let mut shifted_idx = idx.to_vec();
    for (&o, &w) in offsets.iter().zip(weights) {
        shifted_idx[axis_a] = (idx[axis_a] as isize + o) as usize;
        acc += w * d1(field, &shifted_idx, axis_b);
    }
    acc / ax.spacing()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_axes() -> Vec<Axis> {
        vec![Axis::new(-0.4, 0.4, 9).unwrap(), Axis::new(0.1, 0.9, 17).unwrap()]
    }

    #[test]
    fn axis_coords_hit_endpoints_exactly() {
        let ax = Axis::new(-0.3, 0.7, 11).unwrap();
        assert_eq!(ax.coord(0), -0.3);
        assert_eq!(ax.coord(10), 0.7);
        assert_abs_diff_eq!(ax.spacing(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn flat_and_unflat_are_inverse() {
        let f = GridField::zeros(test_axes()).unwrap();
        let mut idx = vec![0usize; 2];
        for flat in 0..f.len() {
            f.unflat(flat, &mut idx);
            assert_eq!(f.flat(&idx), flat);
        }
        // x1 is the fastest index.
        assert_eq!(f.flat(&[1, 0]), 1);
        assert_eq!(f.flat(&[0, 1]), 9);
    }

    #[test]
    fn boundary_detection() {
        let f = GridField::zeros(test_axes()).unwrap();
        assert!(f.is_boundary(&[0, 5]));
        assert!(f.is_boundary(&[8, 5]));
        assert!(f.is_boundary(&[4, 0]));
        assert!(f.is_boundary(&[4, 16]));
        assert!(!f.is_boundary(&[4, 5]));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let field = GridField::from_fn(test_axes(), |c| {
            Ok((1.7 * c[0]).sin() * (0.9 + c[1]).ln() + c[0] * c[1])
        })
        .unwrap();
        let mut buf = Vec::new();
        field.write_csv(&mut buf).unwrap();
        let back = GridField::read_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(field, back);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# n=2, h_prime="));
        assert!(text.lines().nth(1).unwrap().starts_with("x1,t,u"));
    }

    #[test]
    fn boundary_spec_applies_only_to_faces() {
        let axes = test_axes();
        let spec = BoundarySpec::from_fn(&axes, |c| Ok(c[0] + 10.0 * c[1])).unwrap();
        let mut field = GridField::zeros(axes).unwrap();
        spec.apply_to(&mut field).unwrap();
        let mut coords = vec![0.0f64; 2];
        field.for_each_node(|flat, idx| {
            field.coords(idx, &mut coords);
            let expect = if field.is_boundary(idx) { coords[0] + 10.0 * coords[1] } else { 0.0 };
            assert_eq!(field.values()[flat], expect);
        });
        // 2 * (9 + 17) - 4 corners counted once.
        assert_eq!(spec.len(), 2 * 9 + 2 * 17 - 4);
    }

    #[test]
    fn stencils_are_second_order() {
        // u(x, t) = sin(1.3 x) * exp(0.7 t): compare FD derivatives on two
        // resolutions and check the observed convergence order.
        let u = |x: f64, t: f64| (1.3 * x).sin() * (0.7 * t).exp();
        let ux = |x: f64, t: f64| 1.3 * (1.3 * x).cos() * (0.7 * t).exp();
        let uxx = |x: f64, t: f64| -1.69 * (1.3 * x).sin() * (0.7 * t).exp();
        let uxt = |x: f64, t: f64| 0.7 * 1.3 * (1.3 * x).cos() * (0.7 * t).exp();

        let build = |m: usize| {
            GridField::from_fn(
                vec![Axis::new(0.0, 1.0, m).unwrap(), Axis::new(0.2, 1.2, m).unwrap()],
                |c| Ok(u(c[0], c[1])),
            )
            .unwrap()
        };
        let errs: Vec<f64> = [17usize, 33]
            .iter()
            .map(|&m| {
                let f = build(m);
                let mut worst: f64 = 0.0;
                let mut coords = vec![0.0f64; 2];
                // Probe a boundary node, an edge-adjacent node, and the middle.
                for idx in [[0usize, 0usize], [1, m / 2], [m / 2, m / 2], [m - 1, m - 1]] {
                    f.coords(&idx, &mut coords);
                    let (x, t) = (coords[0], coords[1]);
                    worst = worst.max((d1(&f, &idx, 0) - ux(x, t)).abs());
                    worst = worst.max((d2(&f, &idx, 0).unwrap() - uxx(x, t)).abs());
                    worst = worst.max((d_mixed(&f, &idx, 0, 1) - uxt(x, t)).abs());
                }
                worst
            })
            .collect();
        let order = (errs[0] / errs[1]).ln() / 2.0f64.ln();
        assert!(
            order > 1.7,
            "observed order {order:.2} (errors {errs:?}) is below second order"
        );
    }

    #[test]
    fn csv_rejects_incomplete_grids() {
        let field = GridField::from_fn(test_axes(), |c| Ok(c[0] + c[1])).unwrap();
        let mut buf = Vec::new();
        field.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(text.lines().count() - 3).collect::<Vec<_>>().join("\n");
        assert!(GridField::read_csv(std::io::BufReader::new(truncated.as_bytes())).is_err());
    }
}
