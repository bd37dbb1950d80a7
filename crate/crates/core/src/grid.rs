//! Uniform box grids, nodal fields, Dirichlet layer masks and pair enumeration.
//!
//! Truncated boxes carry `L/h + 1` nodes per axis (both faces included);
//! periodic boxes carry `L/h` nodes and wrap.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    Truncated,
    Periodic,
}

impl BoundaryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryMode::Truncated => "truncated",
            BoundaryMode::Periodic => "periodic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "truncated" => Ok(BoundaryMode::Truncated),
            "periodic" => Ok(BoundaryMode::Periodic),
            other => Err(Error::Parse(format!("unknown boundary mode '{other}'"))),
        }
    }
}

/// Ratio `a / b` as an integer, when it is one up to rounding noise.
pub fn integer_ratio(a: f64, b: f64) -> Option<i64> {
    if !(a.is_finite() && b.is_finite()) || b == 0.0 {
        return None;
    }
    let q = a / b;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * q.abs().max(1.0) {
        Some(r as i64)
    } else {
        None
    }
}

/// An axis-aligned box `[0, L_1] x ... x [0, L_d]` with uniform spacing `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    lengths: Vec<f64>,
    h: f64,
    mode: BoundaryMode,
    counts: Vec<usize>,
    strides: Vec<usize>,
}

impl Domain {
    pub fn new(lengths: &[f64], h: f64, mode: BoundaryMode) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidArgument("domain needs at least one axis".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {h}")));
        }
        let mut counts = Vec::with_capacity(lengths.len());
        for &l in lengths {
            let cells = integer_ratio(l, h)
                .filter(|&c| c >= 1)
                .ok_or_else(|| Error::InvalidArgument(format!("spacing {h} does not divide length {l}")))?;
            let n = match mode {
                BoundaryMode::Truncated => cells as usize + 1,
                BoundaryMode::Periodic => cells as usize,
            };
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "axis of length {l} has {n} node(s); at least 2 required"
                )));
            }
            counts.push(n);
        }
        let mut strides = vec![1; counts.len()];
        for k in (0..counts.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * counts[k + 1];
        }
        Ok(Domain {
            lengths: lengths.to_vec(),
            h,
            mode,
            counts,
            strides,
        })
    }

    /// Unit cube `[0,1]^d`.
    pub fn unit(dim: usize, h: f64, mode: BoundaryMode) -> Result<Self> {
        Self::new(&vec![1.0; dim], h, mode)
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    pub fn is_periodic(&self) -> bool {
        self.mode == BoundaryMode::Periodic
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn num_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    /// Quadrature weight `h^d` of a node.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim() as i32)
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn min_length(&self) -> f64 {
        self.lengths.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn diameter(&self) -> f64 {
        self.lengths.iter().map(|l| l * l).sum::<f64>().sqrt()
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rest = node;
        self.strides
            .iter()
            .map(|&s| {
                let i = rest / s;
                rest %= s;
                i
            })
            .collect()
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.coords_into(node, &mut out);
        out
    }

    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        let mut rest = node;
        for (o, &s) in out.iter_mut().zip(&self.strides) {
            *o = (rest / s) as f64 * self.h;
            rest %= s;
        }
    }

    /// Partner of `node` under an integer shift, if the pair is admissible.
    pub fn shifted(&self, node: usize, shift: &[i64]) -> Option<usize> {
        let mut rest = node;
        let mut target = 0;
        for ((&s, &n), &k) in self.strides.iter().zip(&self.counts).zip(shift) {
            let i = (rest / s) as i64;
            rest %= s;
            let j = i + k;
            let j = match self.mode {
                BoundaryMode::Periodic => j.rem_euclid(n as i64),
                BoundaryMode::Truncated => {
                    if j < 0 || j >= n as i64 {
                        return None;
                    }
                    j
                }
            };
            target += j as usize * s;
        }
        Some(target)
    }

    /// Enumerates `(i, i + shift)` for every admissible node `i`.
    pub fn pairs(&self, shift: &[i64]) -> PairIter {
        PairIter::new(self, shift)
    }

    /// Same as [`Domain::pairs`] for a shift given in node units, which must be integral.
    pub fn admissible_pairs(&self, shift: &[f64]) -> Result<PairIter> {
        if shift.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "shift has {} components for a {}-d domain",
                shift.len(),
                self.dim()
            )));
        }
        let mut ints = Vec::with_capacity(shift.len());
        for &s in shift {
            let r = s.round();
            if (s - r).abs() > 1e-9 * s.abs().max(1.0) {
                return Err(Error::OffLatticeShift(format!("{shift:?}")));
            }
            ints.push(r as i64);
        }
        Ok(self.pairs(&ints))
    }

    /// Number of admissible pairs for a shift.
    pub fn pair_count(&self, shift: &[i64]) -> usize {
        match self.mode {
            BoundaryMode::Periodic => self.num_nodes(),
            BoundaryMode::Truncated => self
                .counts
                .iter()
                .zip(shift)
                .map(|(&n, &k)| (n as i64 - k.abs()).max(0) as usize)
                .product(),
        }
    }

    pub fn same_grid(&self, other: &Domain) -> bool {
        self.mode == other.mode
            && self.counts == other.counts
            && (self.h - other.h).abs() <= 1e-12 * self.h
    }
}

/// Iterator over admissible pairs for a fixed shift.
#[derive(Debug, Clone)]
pub struct PairIter {
    lo: Vec<usize>,
    hi: Vec<usize>,
    cur: Vec<usize>,
    counts: Vec<usize>,
    strides: Vec<usize>,
    shift: Vec<i64>,
    periodic: bool,
    done: bool,
}

impl PairIter {
    fn new(dom: &Domain, shift: &[i64]) -> Self {
        let periodic = dom.is_periodic();
        let mut lo = Vec::with_capacity(dom.dim());
        let mut hi = Vec::with_capacity(dom.dim());
        let mut done = false;
        for (&n, &k) in dom.counts.iter().zip(shift) {
            let (a, b) = if periodic {
                (0, n as i64)
            } else {
                ((-k).max(0), (n as i64 - k).min(n as i64))
            };
            if a >= b {
                done = true;
            }
            lo.push(a.max(0) as usize);
            hi.push(b.max(0) as usize);
        }
        PairIter {
            cur: lo.clone(),
            lo,
            hi,
            counts: dom.counts.clone(),
            strides: dom.strides.clone(),
            shift: shift.to_vec(),
            periodic,
            done,
        }
    }
}

impl Iterator for PairIter {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.done {
            return None;
        }
        let mut src = 0;
        let mut dst = 0;
        for axis in 0..self.cur.len() {
            let i = self.cur[axis];
            let mut j = i as i64 + self.shift[axis];
            if self.periodic {
                j = j.rem_euclid(self.counts[axis] as i64);
            }
            src += i * self.strides[axis];
            dst += j as usize * self.strides[axis];
        }
        let mut axis = self.cur.len();
        loop {
            if axis == 0 {
                self.done = true;
                break;
            }
            axis -= 1;
            self.cur[axis] += 1;
            if self.cur[axis] < self.hi[axis] {
                break;
            }
            self.cur[axis] = self.lo[axis];
        }
        Some((src, dst))
    }
}

/// Nodes within sup-norm distance `< width` of the box complement.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    width: f64,
    layers: usize,
    selected: Vec<bool>,
}

impl LayerMask {
    pub fn width(&self) -> f64 {
        self.width
    }

    /// Layer thickness in nodes.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn contains(&self, node: usize) -> bool {
        self.selected[node]
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Complement of the mask: the nodes left free by a Dirichlet constraint.
    pub fn free(&self) -> Vec<bool> {
        self.selected.iter().map(|s| !s).collect()
    }
}

pub fn build_layer_mask(dom: &Domain, width: f64) -> Result<LayerMask> {
    if dom.is_periodic() {
        return Err(Error::MaskUndefinedForPeriodic);
    }
    if !(width >= 0.0) {
        return Err(Error::InvalidArgument(format!("layer width must be >= 0, got {width}")));
    }
    let ratio = width / dom.h();
    let layers = if ratio.is_finite() {
        (ratio - 1e-9).ceil().max(0.0) as usize
    } else {
        usize::MAX
    };
    let selected = (0..dom.num_nodes())
        .map(|node| {
            let multi = dom.multi_index(node);
            let dist = multi
                .iter()
                .zip(dom.counts())
                .map(|(&i, &n)| i.min(n - 1 - i))
                .min()
                .unwrap_or(0);
            dist < layers
        })
        .collect();
    Ok(LayerMask {
        width,
        layers,
        selected,
    })
}

/// Vector-valued samples on a grid, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    domain: Domain,
    codim: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn zeros(domain: &Domain, codim: usize) -> Self {
        GridField {
            values: vec![0.0; domain.num_nodes() * codim],
            domain: domain.clone(),
            codim,
        }
    }

    pub fn from_values(domain: &Domain, codim: usize, values: Vec<f64>) -> Result<Self> {
        if codim == 0 || values.len() != domain.num_nodes() * codim {
            return Err(Error::Dimension(format!(
                "{} values for {} nodes with codimension {codim}",
                values.len(),
                domain.num_nodes()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field values must be finite".into()));
        }
        Ok(GridField {
            domain: domain.clone(),
            codim,
            values,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn codim(&self) -> usize {
        self.codim
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

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.codim..(i + 1) * self.codim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `sqrt(sum_x h^d |u(x)|^2)`.
    pub fn l2_norm(&self) -> f64 {
        (self.domain.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// `sum_x h^d |u(x)|^p`.
    pub fn lp_power(&self, p: f64) -> f64 {
        let m = self.codim;
        self.domain.cell_volume()
            * self
                .values
                .chunks(m)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p))
                .sum::<f64>()
    }

    /// `sum_x h^d u(x)`, per component.
    pub fn integral(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.codim];
        for chunk in self.values.chunks(self.codim) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let w = self.domain.cell_volume();
        out.iter_mut().for_each(|o| *o *= w);
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.domain.num_nodes() as f64;
        let mut out = vec![0.0; self.codim];
        for chunk in self.values.chunks(self.codim) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn add_constant(&mut self, c: &[f64]) {
        for chunk in self.values.chunks_mut(self.codim) {
            for (v, k) in chunk.iter_mut().zip(c) {
                *v += k;
            }
        }
    }

    pub fn scaled(&self, lambda: f64) -> GridField {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= lambda);
        out
    }

    /// `sqrt(sum h^d |u - v|^2)`.
    pub fn l2_distance(&self, other: &GridField) -> Result<f64> {
        self.check_compatible(other)?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok((self.domain.cell_volume() * s).sqrt())
    }

    pub fn sup_distance(&self, other: &GridField) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |a, (x, y)| a.max((x - y).abs())))
    }

    pub fn check_compatible(&self, other: &GridField) -> Result<()> {
        if !self.domain.same_grid(&other.domain) || self.codim != other.codim {
            return Err(Error::MismatchedDomains(format!(
                "{:?}x{} vs {:?}x{}",
                self.domain.counts(),
                self.codim,
                other.domain.counts(),
                other.codim
            )));
        }
        Ok(())
    }

    /// Writes the field as CSV: one header row `d,m,h,mode,n_1..n_d`, then one row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dom = &self.domain;
        let counts: Vec<String> = dom.counts().iter().map(|c| c.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            dom.dim(),
            self.codim,
            dom.h(),
            dom.mode().as_str(),
            counts.join(",")
        )?;
        for chunk in self.values.chunks(self.codim) {
            let row: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<GridField> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty field file".into()))??;
        let fields: Vec<&str> = header.trim().split(',').collect();
        if fields.len() < 5 {
            return Err(Error::Parse(format!("bad field header '{header}'")));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("'{s}': {e}")))
        };
        let d = num(fields[0])? as usize;
        let m = num(fields[1])? as usize;
        let h = num(fields[2])?;
        let mode = BoundaryMode::parse(fields[3].trim())?;
        if fields.len() != 4 + d {
            return Err(Error::Parse(format!("header declares d = {d} but lists {} counts", fields.len() - 4)));
        }
        let lengths = fields[4..]
            .iter()
            .map(|s| {
                let n = num(s)?;
                Ok(match mode {
                    BoundaryMode::Truncated => (n - 1.0) * h,
                    BoundaryMode::Periodic => n * h,
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let domain = Domain::new(&lengths, h, mode)?;
        let mut values = Vec::with_capacity(domain.num_nodes() * m);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            for s in line.split(',') {
                values.push(num(s).map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?);
            }
        }
        GridField::from_values(&domain, m, values)
    }
}

/// Samples `phi` at every node.
pub fn sample_function<F>(dom: &Domain, codim: usize, phi: F) -> GridField
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut field = GridField::zeros(dom, codim);
    let mut x = vec![0.0; dom.dim()];
    for node in 0..dom.num_nodes() {
        dom.coords_into(node, &mut x);
        phi(&x, &mut field.values[node * codim..(node + 1) * codim]);
    }
    field
}

/// Per-node Jacobians stored as `m x d` row-major blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalGradient {
    pub codim: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl NodalGradient {
    pub fn at(&self, node: usize) -> &[f64] {
        let b = self.codim * self.dim;
        &self.data[node * b..(node + 1) * b]
    }
}

/// Central differences inside, one-sided at truncated faces, wrapped when periodic.
pub fn fd_gradient(u: &GridField) -> NodalGradient {
    let dom = u.domain();
    let (d, m) = (dom.dim(), u.codim());
    let h = dom.h();
    let mut data = vec![0.0; dom.num_nodes() * m * d];
    for node in 0..dom.num_nodes() {
        let multi = dom.multi_index(node);
        for axis in 0..d {
            let n = dom.counts()[axis];
            let i = multi[axis];
            let stride = dom.strides()[axis];
            let base = node - i * stride;
            let (lo, hi, span) = if dom.is_periodic() {
                ((i + n - 1) % n, (i + 1) % n, 2.0 * h)
            } else if i == 0 {
                (0, 1, h)
            } else if i == n - 1 {
                (n - 2, n - 1, h)
            } else {
                (i - 1, i + 1, 2.0 * h)
            };
            let (a, b) = (base + lo * stride, base + hi * stride);
            for c in 0..m {
                data[node * m * d + c * d + axis] = (u.values[b * m + c] - u.values[a * m + c]) / span;
            }
        }
    }
    NodalGradient { codim: m, dim: d, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_counts_by_mode() {
        let t = Domain::unit(1, 0.1, BoundaryMode::Truncated).unwrap();
        assert_eq!(t.counts(), &[11]);
        let p = Domain::unit(1, 0.25, BoundaryMode::Periodic).unwrap();
        assert_eq!(p.counts(), &[4]);
        assert!(Domain::unit(1, 0.3, BoundaryMode::Truncated).is_err());
        assert!(Domain::unit(1, 1.0, BoundaryMode::Periodic).is_err());
    }

    #[test]
    fn layer_mask_examples() {
        let dom = Domain::unit(1, 0.1, BoundaryMode::Truncated).unwrap();
        assert_eq!(build_layer_mask(&dom, 0.0).unwrap().count(), 0);
        let mask = build_layer_mask(&dom, 0.15).unwrap();
        let nodes: Vec<usize> = (0..11).filter(|&i| mask.contains(i)).collect();
        assert_eq!(nodes, vec![0, 1, 9, 10]);
        assert_eq!(mask.layers(), 2);
        assert_eq!(build_layer_mask(&dom, 1.0).unwrap().count(), 11);
        let periodic = Domain::unit(1, 0.1, BoundaryMode::Periodic).unwrap();
        assert_eq!(build_layer_mask(&periodic, 0.1), Err(Error::MaskUndefinedForPeriodic));
    }

    #[test]
    fn pair_counts() {
        let dom = Domain::unit(1, 0.1, BoundaryMode::Truncated).unwrap();
        assert_eq!(dom.pairs(&[0]).count(), 11);
        assert_eq!(dom.pairs(&[3]).count(), 8);
        assert_eq!(dom.pairs(&[-3]).count(), 8);
        assert_eq!(dom.pairs(&[11]).count(), 0);
        let per = Domain::unit(2, 0.1, BoundaryMode::Periodic).unwrap();
        assert_eq!(per.pairs(&[3, -7]).count(), 100);
        assert_eq!(per.pairs(&[13, 0]).count(), 100);
        assert!(matches!(dom.admissible_pairs(&[0.5]), Err(Error::OffLatticeShift(_))));
        assert_eq!(dom.admissible_pairs(&[2.0]).unwrap().count(), 9);
    }

    #[test]
    fn pairs_agree_with_shifted() {
        let dom = Domain::new(&[1.0, 0.5], 0.125, BoundaryMode::Truncated).unwrap();
        let shift = [2, -1];
        let via_iter: Vec<_> = dom.pairs(&shift).collect();
        let via_lookup: Vec<_> = (0..dom.num_nodes())
            .filter_map(|i| dom.shifted(i, &shift).map(|j| (i, j)))
            .collect();
        assert_eq!(via_iter, via_lookup);
        assert_eq!(via_iter.len(), dom.pair_count(&shift));
    }

    #[test]
    fn sample_examples() {
        let dom = Domain::unit(1, 0.5, BoundaryMode::Truncated).unwrap();
        let f = sample_function(&dom, 1, |x, out| out[0] = 2.0 * x[0]);
        assert_eq!(f.values(), &[0.0, 1.0, 2.0]);
        let zero = sample_function(&dom, 2, |_, out| out.fill(0.0));
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let per = Domain::unit(1, 0.25, BoundaryMode::Periodic).unwrap();
        let s = sample_function(&per, 1, |x, out| out[0] = (2.0 * std::f64::consts::PI * x[0]).sin());
        let expected = [0.0, 1.0, 0.0, -1.0];
        for (a, b) in s.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fd_gradient_examples() {
        let dom = Domain::unit(1, 0.1, BoundaryMode::Truncated).unwrap();
        let c = sample_function(&dom, 1, |_, o| o[0] = 3.0);
        assert!(fd_gradient(&c).data.iter().all(|&g| g == 0.0));
        let q = sample_function(&dom, 1, |x, o| o[0] = x[0] * x[0]);
        let g = fd_gradient(&q);
        assert!((g.at(5)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dom = Domain::new(&[1.0, 0.5], 0.25, BoundaryMode::Periodic).unwrap();
        let f = sample_function(&dom, 2, |x, o| {
            o[0] = x[0].sin();
            o[1] = 0.1 + x[1];
        });
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = GridField::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, f);
    }
}
