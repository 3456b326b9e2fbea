//! Space-time states on a uniform node-centered grid over `[0, T] x [x_min, x_max]`.
//!
//! Derivatives use fourth-order finite differences (central in the interior,
//! one-sided five-point stencils at the two nodes nearest each boundary) and
//! fall back to second order on lines with fewer than five nodes. Norms use
//! the trapezoidal rule in both directions.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t_max: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_t: usize,
    pub n_x: usize,
}

impl Default for Grid {
    /// 80 time nodes over `[0, 3]`, 100 space nodes over `[0, 4]`.
    fn default() -> Self {
        Self { t_max: 3.0, x_min: 0.0, x_max: 4.0, n_t: 80, n_x: 100 }
    }
}

impl Grid {
    pub fn new(t_max: f64, x_min: f64, x_max: f64, n_t: usize, n_x: usize) -> Result<Self> {
        let g = Self { t_max, x_min, x_max, n_t, n_x };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t < 3 || self.n_x < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 nodes per direction, got n_t={} n_x={}",
                self.n_t, self.n_x
            )));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(Error::InvalidGrid(format!("t_max must be positive, got {}", self.t_max)));
        }
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_max > self.x_min) {
            return Err(Error::InvalidGrid(format!(
                "need x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_max / (self.n_t - 1) as f64
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        self.t_max * j as f64 / (self.n_t - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (self.x_max - self.x_min) * i as f64 / (self.n_x - 1) as f64
    }

    pub fn omega_length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trapezoidal weights on a line of `n` nodes with spacing `h`.
    pub fn trapezoid(n: usize, h: f64) -> Vec<f64> {
        let mut w = vec![h; n];
        w[0] = 0.5 * h;
        w[n - 1] = 0.5 * h;
        w
    }

    /// Space-time quadrature weights, row-major `(t, x)`.
    pub fn weights(&self) -> Vec<f64> {
        let wt = Self::trapezoid(self.n_t, self.dt());
        let wx = Self::trapezoid(self.n_x, self.dx());
        let mut w = Vec::with_capacity(self.len());
        for a in &wt {
            w.extend(wx.iter().map(|b| a * b));
        }
        w
    }
}

/// Grid values `values[j * n_x + i] = u(t_j, x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateField {
    grid: Grid,
    values: Vec<f64>,
}

impl StateField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                t_index: k / grid.n_x,
                x_index: k % grid.n_x,
                value: values[k],
            });
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
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

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.grid.n_x + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.grid.n_x;
        &self.values[j * n..(j + 1) * n]
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| c * v).collect() }
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &StateField) -> Self {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        Self { grid: self.grid, values }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
        let g = &self.grid;
        out.write_record([
            "lawforge-field-v1".to_string(),
            format!("t_max={}", g.t_max),
            format!("x_min={}", g.x_min),
            format!("x_max={}", g.x_max),
            format!("n_t={}", g.n_t),
            format!("n_x={}", g.n_x),
        ])?;
        for j in 0..g.n_t {
            out.write_record(self.row(j).iter().map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
        let mut records = rdr.records();
        let header = records.next().ok_or_else(|| Error::Parse("empty field file".into()))??;
        if header.get(0) != Some("lawforge-field-v1") {
            return Err(Error::Parse("missing lawforge-field-v1 header".into()));
        }
        let key = |name: &str| -> Result<&str> {
            header
                .iter()
                .skip(1)
                .find_map(|f| f.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Parse(format!("field header lacks `{name}`")))
        };
        let num = |name: &str| -> Result<f64> {
            key(name)?.parse().map_err(|_| Error::Parse(format!("bad `{name}` in field header")))
        };
        let int = |name: &str| -> Result<usize> {
            key(name)?.parse().map_err(|_| Error::Parse(format!("bad `{name}` in field header")))
        };
        let grid = Grid::new(num("t_max")?, num("x_min")?, num("x_max")?, int("n_t")?, int("n_x")?)?;
        let mut values = Vec::with_capacity(grid.len());
        for rec in records {
            let rec = rec?;
            if rec.len() != grid.n_x {
                return Err(Error::DimensionMismatch { expected: grid.n_x, got: rec.len() });
            }
            for f in rec.iter() {
                values.push(f.trim().parse().map_err(|_| Error::Parse(format!("bad value `{f}`")))?);
            }
        }
        Self::from_values(grid, values)
    }
}

/// Samples `f(t, x)` at every node.
pub fn sample<F: Fn(f64, f64) -> f64>(grid: &Grid, f: F) -> Result<StateField> {
    grid.validate()?;
    let mut values = Vec::with_capacity(grid.len());
    for j in 0..grid.n_t {
        let t = grid.t(j);
        for i in 0..grid.n_x {
            let v = f(t, grid.x(i));
            if !v.is_finite() {
                return Err(Error::NonFiniteSample { t_index: j, x_index: i, value: v });
            }
            values.push(v);
        }
    }
    Ok(StateField { grid: *grid, values })
}

/// Sparse first-derivative matrix on a line, rows as `(column, weight)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Stencil {
    pub fn first_derivative(n: usize, h: f64) -> Self {
        let mut rows = Vec::with_capacity(n);
        if n >= 5 {
            let c = 1.0 / (12.0 * h);
            let left = [
                [-25.0, 48.0, -36.0, 16.0, -3.0],
                [-3.0, -10.0, 18.0, -6.0, 1.0],
            ];
            for w in &left {
                rows.push((0..5).map(|k| (k, w[k] * c)).collect());
            }
            for i in 2..n - 2 {
                rows.push(vec![(i - 2, c), (i - 1, -8.0 * c), (i + 1, 8.0 * c), (i + 2, -c)]);
            }
            for w in left.iter().rev() {
                rows.push((0..5).map(|k| (n - 1 - k, -w[k] * c)).collect());
            }
        } else {
            let c = 1.0 / (2.0 * h);
            rows.push(vec![(0, -3.0 * c), (1, 4.0 * c), (2, -c)]);
            for i in 1..n - 1 {
                rows.push(vec![(i - 1, -c), (i + 1, c)]);
            }
            rows.push(vec![(n - 3, c), (n - 2, -4.0 * c), (n - 1, 3.0 * c)]);
        }
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Applies the stencil to the line `src[offset + k * stride]`.
    #[inline]
    fn apply_strided(&self, src: &[f64], offset: usize, stride: usize, dst: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(k, w) in row {
                acc += w * src[offset + k * stride];
            }
            dst[offset + r * stride] = acc;
        }
    }

    #[inline]
    fn apply_transpose_strided(&self, src: &[f64], offset: usize, stride: usize, dst: &mut [f64]) {
        for r in 0..self.rows.len() {
            dst[offset + r * stride] = 0.0;
        }
        for (r, row) in self.rows.iter().enumerate() {
            let g = src[offset + r * stride];
            for &(k, w) in row {
                dst[offset + k * stride] += w * g;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Axis {
    T,
    X,
}

fn along(u: &StateField, axis: Axis, transpose: bool) -> StateField {
    let g = u.grid;
    let mut out = vec![0.0; g.len()];
    match axis {
        Axis::X => {
            let s = Stencil::first_derivative(g.n_x, g.dx());
            for j in 0..g.n_t {
                if transpose {
                    s.apply_transpose_strided(&u.values, j * g.n_x, 1, &mut out);
                } else {
                    s.apply_strided(&u.values, j * g.n_x, 1, &mut out);
                }
            }
        }
        Axis::T => {
            let s = Stencil::first_derivative(g.n_t, g.dt());
            for i in 0..g.n_x {
                if transpose {
                    s.apply_transpose_strided(&u.values, i, g.n_x, &mut out);
                } else {
                    s.apply_strided(&u.values, i, g.n_x, &mut out);
                }
            }
        }
    }
    StateField { grid: g, values: out }
}

pub fn ddx(u: &StateField) -> StateField {
    along(u, Axis::X, false)
}

pub fn ddt(u: &StateField) -> StateField {
    along(u, Axis::T, false)
}

/// Adjoint (matrix transpose) of [`ddx`] on the flat node vector.
pub fn ddx_adjoint(g: &StateField) -> StateField {
    along(g, Axis::X, true)
}

pub fn ddt_adjoint(g: &StateField) -> StateField {
    along(g, Axis::T, true)
}

/// Trapezoidal `sum w * a * b` over the grid.
pub fn inner_spacetime(a: &StateField, b: &StateField) -> f64 {
    let g = a.grid;
    let wt = Grid::trapezoid(g.n_t, g.dt());
    let wx = Grid::trapezoid(g.n_x, g.dx());
    let mut total = 0.0;
    for (j, wtj) in wt.iter().enumerate() {
        let ra = a.row(j);
        let rb = b.row(j);
        let mut s = 0.0;
        for i in 0..g.n_x {
            s += wx[i] * ra[i] * rb[i];
        }
        total += wtj * s;
    }
    total
}

pub fn l2_spacetime(u: &StateField) -> f64 {
    inner_spacetime(u, u).sqrt()
}

/// Squared discrete `L2(0,T; H2) + L2(0,T; L2)`-of-`u_t` norm and its
/// derivative components `(u_x, u_xx, u_t)`.
pub(crate) struct SobolevParts {
    pub ux: StateField,
    pub uxx: StateField,
    pub ut: StateField,
    pub squared: f64,
}

pub(crate) fn sobolev_parts(u: &StateField) -> SobolevParts {
    let ux = ddx(u);
    let uxx = ddx(&ux);
    let ut = ddt(u);
    let squared = inner_spacetime(u, u)
        + inner_spacetime(&ux, &ux)
        + inner_spacetime(&uxx, &uxx)
        + inner_spacetime(&ut, &ut);
    SobolevParts { ux, uxx, ut, squared }
}

/// Discrete norm of `u`: quadrature of `u^2 + u_x^2 + u_xx^2 + u_t^2`, square
/// root taken.
pub fn sobolev_h2_norm(u: &StateField) -> f64 {
    sobolev_parts(u).squared.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid3() -> Grid {
        Grid::new(1.0, 0.0, 1.0, 3, 3).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(3.0, 0.0, 4.0, 2, 100).is_err());
        assert!(Grid::new(3.0, 4.0, 4.0, 80, 100).is_err());
        assert!(Grid::new(0.0, 0.0, 4.0, 80, 100).is_err());
        let g = Grid::default();
        assert_eq!((g.n_t, g.n_x), (80, 100));
        assert_eq!(g.x(99), 4.0);
        assert_eq!(g.t(79), 3.0);
    }

    #[test]
    fn sample_examples() {
        let z = sample(&Grid::default(), |_, _| 0.0).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
        let u = sample(&grid3(), |_, x| x).unwrap();
        for j in 0..3 {
            assert_eq!(u.row(j), &[0.0, 0.5, 1.0]);
        }
        let g = Grid::new(2.0, 0.0, 2.0, 3, 3).unwrap();
        let u = sample(&g, |t, x| (x + 2.0 * t) * t.exp()).unwrap();
        assert!((u.get(1, 1) - 3.0 * 1f64.exp()).abs() < 1e-12);
        assert!((u.get(1, 1) - 8.1548).abs() < 1e-4);
    }

    #[test]
    fn non_finite_sample_names_node() {
        let err = sample(&Grid::default(), |t, x| if t > 1.0 && x > 2.0 { f64::NAN } else { 0.0 })
            .unwrap_err();
        match err {
            Error::NonFiniteSample { t_index, x_index, .. } => {
                assert!(Grid::default().t(t_index) > 1.0);
                assert!(Grid::default().x(x_index) > 2.0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn derivative_exactness() {
        let g = Grid::default();
        for (n_t, n_x) in [(80, 100), (3, 3), (4, 4), (5, 6)] {
            let g = Grid { n_t, n_x, ..g };
            let ux = ddx(&sample(&g, |_, x| x).unwrap());
            assert!(ux.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
            let c = sample(&g, |_, _| 3.5).unwrap();
            assert!(ddx(&c).max_abs() < 1e-12 && ddt(&c).max_abs() < 1e-12);
            let ut = ddt(&sample(&g, |t, _| t).unwrap());
            assert!(ut.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
            let q = ddx(&sample(&g, |_, x| 3.0 * x * x - x).unwrap());
            let want = sample(&g, |_, x| 6.0 * x - 1.0).unwrap();
            assert!(q.axpy(-1.0, &want).max_abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_accuracy() {
        let g = Grid::default();
        let err = ddx(&sample(&g, |_, x| x.sin()).unwrap())
            .axpy(-1.0, &sample(&g, |_, x| x.cos()).unwrap())
            .max_abs();
        assert!(err < 1e-3, "{err}");
        let ut = ddt(&sample(&g, |t, _| t.exp()).unwrap());
        let mut worst = 0.0f64;
        for j in 0..g.n_t {
            let e = g.t(j).exp();
            worst = worst.max((ut.get(j, 0) - e).abs() / e);
        }
        assert!(worst < 2e-3, "{worst}");
    }

    #[test]
    fn refinement_rate() {
        let err = |n_x: usize| {
            let g = Grid { n_x, ..Grid::default() };
            ddx(&sample(&g, |_, x| (1.3 * x).sin()).unwrap())
                .axpy(-1.0, &sample(&g, |_, x| 1.3 * (1.3 * x).cos()).unwrap())
                .max_abs()
        };
        for n in [25, 50, 100] {
            let ratio = err(n) / err(2 * n - 1);
            assert!(ratio >= 3.5, "n={n} ratio={ratio}");
        }
    }

    #[test]
    fn adjoints_are_transposes() {
        let g = Grid { n_t: 7, n_x: 9, ..Grid::default() };
        let a = sample(&g, |t, x| (t * 1.7 + x).sin() + t * x).unwrap();
        let b = sample(&g, |t, x| (x * x - t).cos()).unwrap();
        let dot = |p: &StateField, q: &StateField| -> f64 {
            p.values().iter().zip(q.values()).map(|(x, y)| x * y).sum()
        };
        assert!((dot(&ddx(&a), &b) - dot(&a, &ddx_adjoint(&b))).abs() < 1e-10);
        assert!((dot(&ddt(&a), &b) - dot(&a, &ddt_adjoint(&b))).abs() < 1e-10);
    }

    #[test]
    fn norm_examples() {
        let g = Grid::default();
        assert_eq!(l2_spacetime(&StateField::zeros(g)), 0.0);
        assert!((l2_spacetime(&sample(&g, |_, _| 1.0).unwrap()) - 12f64.sqrt()).abs() < 1e-12);
        // Trapezoid on x^2 overestimates by T * h^2 * |Omega| * 2 / 12.
        let v = l2_spacetime(&sample(&g, |_, x| x).unwrap());
        let h = g.dx();
        let exact_trap = (3.0 * (64.0 / 3.0 + h * h * 4.0 * 2.0 / 12.0)).sqrt();
        assert!((v - exact_trap).abs() < 1e-10);
        assert!((v - 8.0).abs() < 1e-3);
    }

    #[test]
    fn sobolev_examples() {
        let g = Grid::default();
        assert_eq!(sobolev_h2_norm(&StateField::zeros(g)), 0.0);
        assert!((sobolev_h2_norm(&sample(&g, |_, _| 2.5).unwrap()) - 2.5 * 12f64.sqrt()).abs() < 1e-10);
        // T * int_0^4 (x^4 + 4x^2 + 4) dx = 3 * (1024/5 + 256/3 + 16)
        let exact = 3.0 * (1024.0 / 5.0 + 256.0 / 3.0 + 16.0);
        let got = sobolev_h2_norm(&sample(&g, |_, x| x * x).unwrap()).powi(2);
        assert!((got - exact).abs() / exact < 1e-2, "{got} vs {exact}");
    }

    #[test]
    fn csv_round_trip() {
        let g = Grid { n_t: 4, n_x: 5, ..Grid::default() };
        let u = sample(&g, |t, x| (t - x).exp() / 3.0).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        assert_eq!(StateField::read_csv(buf.as_slice()).unwrap(), u);
        assert!(StateField::read_csv("foo\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn derivatives_are_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, k in 0.1f64..2.0) {
            let g = Grid { n_t: 10, n_x: 12, ..Grid::default() };
            let u = sample(&g, |t, x| (k * x + t).sin()).unwrap();
            let v = sample(&g, |t, x| (t * x).exp() / 50.0).unwrap();
            let lhs = ddx(&u.scale(a).axpy(b, &v));
            let rhs = ddx(&u).scale(a).axpy(b, &ddx(&v));
            prop_assert!(lhs.axpy(-1.0, &rhs).max_abs() <= 1e-10 * (1.0 + rhs.max_abs()));
            let lhs = ddt(&u.scale(a).axpy(b, &v));
            let rhs = ddt(&u).scale(a).axpy(b, &ddt(&v));
            prop_assert!(lhs.axpy(-1.0, &rhs).max_abs() <= 1e-10 * (1.0 + rhs.max_abs()));
        }

        #[test]
        fn norms_are_homogeneous(c in -50.0f64..50.0) {
            let g = Grid { n_t: 10, n_x: 12, ..Grid::default() };
            let u = sample(&g, |t, x| (x - t).cos() + 0.1 * x).unwrap();
            let cu = u.scale(c);
            let tol = 1e-12 * c.abs().max(1e-300);
            prop_assert!((l2_spacetime(&cu) - c.abs() * l2_spacetime(&u)).abs() <= tol * l2_spacetime(&u) * 10.0);
            prop_assert!((sobolev_h2_norm(&cu) - c.abs() * sobolev_h2_norm(&u)).abs() <= tol * sobolev_h2_norm(&u) * 10.0);
        }
    }
}
