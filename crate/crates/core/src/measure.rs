//! Measurement operators built on the normalized cosine basis of `L2(Omega)`.
//!
//! The full operator projects each time slice onto the leading cosine modes.
//! The reduced operator additionally averages the coefficients over `m`
//! equal time cells. Per-node coefficients are treated as the piecewise-linear
//! interpolant in time, so the cell average is an exact integral of that
//! interpolant even when cells do not align with time nodes.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{Grid, StateField};

/// `e_0 = 1/sqrt(L)`, `e_i = sqrt(2/L) cos(i pi x / L)` on `[0, L]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineBasis {
    omega_length: f64,
    n_modes: usize,
}

impl CosineBasis {
    pub fn new(omega_length: f64, n_modes: usize) -> Result<Self> {
        if !(omega_length.is_finite() && omega_length > 0.0) {
            return Err(Error::InvalidMeasurement("domain length must be positive".into()));
        }
        if n_modes == 0 {
            return Err(Error::InvalidMeasurement("need at least one mode".into()));
        }
        Ok(Self { omega_length, n_modes })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn omega_length(&self) -> f64 {
        self.omega_length
    }

    /// Mode `i` at offset `s = x - x_min`.
    pub fn eval(&self, i: usize, s: f64) -> f64 {
        let l = self.omega_length;
        if i == 0 {
            1.0 / l.sqrt()
        } else {
            (2.0 / l).sqrt() * (i as f64 * PI * s / l).cos()
        }
    }

    /// Mode values at the spatial nodes, row-major `(mode, node)`.
    pub fn table(&self, grid: &Grid) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.n_modes * grid.n_x);
        for i in 0..self.n_modes {
            t.extend((0..grid.n_x).map(|k| self.eval(i, grid.x(k) - grid.x_min)));
        }
        t
    }
}

fn check_modes(n_modes: usize, grid: &Grid) -> Result<()> {
    if n_modes == 0 {
        return Err(Error::InvalidMeasurement("need at least one mode".into()));
    }
    if n_modes > grid.n_x {
        return Err(Error::UnresolvableModes { n_modes, n_x: grid.n_x });
    }
    Ok(())
}

/// Spatial projection weights `w_k e_i(x_k)`, row-major `(mode, node)`.
fn projection_table(basis: &CosineBasis, grid: &Grid) -> Vec<f64> {
    let wx = Grid::trapezoid(grid.n_x, grid.dx());
    let mut t = basis.table(grid);
    for row in t.chunks_mut(grid.n_x) {
        for (v, w) in row.iter_mut().zip(&wx) {
            *v *= w;
        }
    }
    t
}

fn project_row(proj: &[f64], n_x: usize, row: &[f64], out: &mut [f64]) {
    for (o, p) in out.iter_mut().zip(proj.chunks(n_x)) {
        *o = p.iter().zip(row).map(|(a, b)| a * b).sum();
    }
}

fn synthesize_row(table: &[f64], n_x: usize, coeffs: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (c, e) in coeffs.iter().zip(table.chunks(n_x)) {
        for (o, v) in out.iter_mut().zip(e) {
            *o += c * v;
        }
    }
}

/// Per-time-node spatial coefficients, `n_t` rows of `n_modes` entries.
pub fn analyze_full(u: &StateField, n_modes: usize) -> Result<Vec<Vec<f64>>> {
    let grid = *u.grid();
    check_modes(n_modes, &grid)?;
    let basis = CosineBasis::new(grid.omega_length(), n_modes)?;
    let proj = projection_table(&basis, &grid);
    Ok((0..grid.n_t)
        .map(|j| {
            let mut c = vec![0.0; n_modes];
            project_row(&proj, grid.n_x, u.row(j), &mut c);
            c
        })
        .collect())
}

/// Field `sum_i c_i(t_j) e_i(x)` from per-node coefficients.
pub fn synthesize_full(grid: &Grid, coeffs: &[Vec<f64>]) -> Result<StateField> {
    if coeffs.len() != grid.n_t {
        return Err(Error::DimensionMismatch { expected: grid.n_t, got: coeffs.len() });
    }
    let n_modes = coeffs.first().map_or(0, Vec::len);
    if coeffs.iter().any(|c| c.len() != n_modes) {
        return Err(Error::InvalidMeasurement("ragged coefficient rows".into()));
    }
    check_modes(n_modes, grid)?;
    let table = CosineBasis::new(grid.omega_length(), n_modes)?.table(grid);
    let mut values = vec![0.0; grid.len()];
    for (c, row) in coeffs.iter().zip(values.chunks_mut(grid.n_x)) {
        synthesize_row(&table, grid.n_x, c, row);
    }
    StateField::from_values(*grid, values)
}

/// Cell-averaged spectral coefficients of a state.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    grid: Grid,
    n_cells: usize,
    n_modes: usize,
    coeffs: Vec<f64>,
}

impl MeasurementRecord {
    pub fn new(grid: Grid, n_cells: usize, n_modes: usize, coeffs: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if n_cells == 0 {
            return Err(Error::InvalidMeasurement("need at least one time cell".into()));
        }
        check_modes(n_modes, &grid)?;
        if coeffs.len() != n_cells * n_modes {
            return Err(Error::DimensionMismatch { expected: n_cells * n_modes, got: coeffs.len() });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMeasurement("non-finite coefficient".into()));
        }
        Ok(Self { grid, n_cells, n_modes, coeffs })
    }

    pub fn zeros(grid: Grid, n_cells: usize, n_modes: usize) -> Result<Self> {
        Self::new(grid, n_cells, n_modes, vec![0.0; n_cells * n_modes])
    }

    /// Number of time cells.
    pub fn m(&self) -> usize {
        self.n_cells
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn cell(&self, c: usize) -> &[f64] {
        &self.coeffs[c * self.n_modes..(c + 1) * self.n_modes]
    }

    pub fn get(&self, cell: usize, mode: usize) -> f64 {
        self.coeffs[cell * self.n_modes + mode]
    }

    pub fn cell_width(&self) -> f64 {
        self.grid.t_max / self.n_cells as f64
    }

    pub fn basis(&self) -> CosineBasis {
        CosineBasis { omega_length: self.grid.omega_length(), n_modes: self.n_modes }
    }

    /// Measurement-space norm `sqrt(sum_c Delta_m sum_i c_ci^2)`, the
    /// `L2(0,T; L2(Omega))` norm of the cell-constant band-limited function.
    pub fn norm(&self) -> f64 {
        (self.cell_width() * self.coeffs.iter().map(|c| c * c).sum::<f64>()).sqrt()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
        let g = &self.grid;
        out.write_record([
            "lawforge-record-v1".to_string(),
            format!("m={}", self.n_cells),
            format!("n_modes={}", self.n_modes),
            format!("T={}", g.t_max),
            format!("omega={}", g.omega_length()),
            format!("x_min={}", g.x_min),
            format!("n_t={}", g.n_t),
            format!("n_x={}", g.n_x),
        ])?;
        out.write_record(["cell", "mode", "coefficient"])?;
        for c in 0..self.n_cells {
            for i in 0..self.n_modes {
                out.write_record([c.to_string(), i.to_string(), self.get(c, i).to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
        let mut records = rdr.records();
        let header = records.next().ok_or_else(|| Error::Parse("empty record file".into()))??;
        if header.get(0) != Some("lawforge-record-v1") {
            return Err(Error::Parse("missing lawforge-record-v1 header".into()));
        }
        let key = |name: &str| -> Result<&str> {
            header
                .iter()
                .skip(1)
                .find_map(|f| f.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Parse(format!("record header lacks `{name}`")))
        };
        let num = |name: &str| -> Result<f64> {
            key(name)?.parse().map_err(|_| Error::Parse(format!("bad `{name}` in record header")))
        };
        let int = |name: &str| -> Result<usize> {
            key(name)?.parse().map_err(|_| Error::Parse(format!("bad `{name}` in record header")))
        };
        let x_min = num("x_min")?;
        let grid = Grid::new(num("T")?, x_min, x_min + num("omega")?, int("n_t")?, int("n_x")?)?;
        let (n_cells, n_modes) = (int("m")?, int("n_modes")?);
        let mut coeffs = vec![f64::NAN; n_cells * n_modes];
        for rec in records {
            let rec = rec?;
            if rec.get(0) == Some("cell") {
                continue;
            }
            let field = |k: usize| rec.get(k).ok_or_else(|| Error::Parse("short record row".into()));
            let c: usize = field(0)?.parse().map_err(|_| Error::Parse("bad cell index".into()))?;
            let i: usize = field(1)?.parse().map_err(|_| Error::Parse("bad mode index".into()))?;
            let v: f64 = field(2)?.parse().map_err(|_| Error::Parse("bad coefficient".into()))?;
            if c >= n_cells || i >= n_modes {
                return Err(Error::Parse(format!("entry ({c}, {i}) out of range")));
            }
            coeffs[c * n_modes + i] = v;
        }
        Self::new(grid, n_cells, n_modes, coeffs)
    }
}

/// Time-cell averaging weights: `avg_c = sum_j W[c][j] f(t_j)` is the exact
/// mean over cell `c` of the piecewise-linear interpolant of `f`.
fn cell_weights(grid: &Grid, n_cells: usize) -> Vec<f64> {
    let n_t = grid.n_t;
    let dt = grid.dt();
    let width = grid.t_max / n_cells as f64;
    let mut w = vec![0.0; n_cells * n_t];
    for c in 0..n_cells {
        let a = c as f64 * width;
        let b = if c + 1 == n_cells { grid.t_max } else { (c + 1) as f64 * width };
        let row = &mut w[c * n_t..(c + 1) * n_t];
        for j in 0..n_t - 1 {
            let (t0, t1) = (grid.t(j), grid.t(j + 1));
            let lo = a.max(t0);
            let hi = b.min(t1);
            if hi <= lo {
                continue;
            }
            let th_lo = (lo - t0) / dt;
            let th_hi = (hi - t0) / dt;
            let half = 0.5 * (hi - lo) / width;
            row[j] += half * ((1.0 - th_lo) + (1.0 - th_hi));
            row[j + 1] += half * (th_lo + th_hi);
        }
    }
    w
}

/// The reduced operator as a precomputed linear map together with its
/// adjoint.
#[derive(Clone, Debug)]
pub struct ReducedOperator {
    grid: Grid,
    n_cells: usize,
    n_modes: usize,
    proj: Vec<f64>,
    cells: Vec<f64>,
}

impl ReducedOperator {
    pub fn new(grid: &Grid, n_cells: usize, n_modes: usize) -> Result<Self> {
        grid.validate()?;
        if n_cells == 0 {
            return Err(Error::InvalidMeasurement("need at least one time cell".into()));
        }
        check_modes(n_modes, grid)?;
        let basis = CosineBasis::new(grid.omega_length(), n_modes)?;
        Ok(Self {
            grid: *grid,
            n_cells,
            n_modes,
            proj: projection_table(&basis, grid),
            cells: cell_weights(grid, n_cells),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn apply(&self, u: &StateField) -> Result<MeasurementRecord> {
        if u.grid() != &self.grid {
            return Err(Error::InvalidMeasurement("state grid differs from operator grid".into()));
        }
        let (n_t, n_x, nm) = (self.grid.n_t, self.grid.n_x, self.n_modes);
        let mut spatial = vec![0.0; n_t * nm];
        for j in 0..n_t {
            project_row(&self.proj, n_x, u.row(j), &mut spatial[j * nm..(j + 1) * nm]);
        }
        let mut coeffs = vec![0.0; self.n_cells * nm];
        for c in 0..self.n_cells {
            let out = &mut coeffs[c * nm..(c + 1) * nm];
            for (j, w) in self.cells[c * n_t..(c + 1) * n_t].iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for (o, s) in out.iter_mut().zip(&spatial[j * nm..(j + 1) * nm]) {
                    *o += w * s;
                }
            }
        }
        MeasurementRecord::new(self.grid, self.n_cells, nm, coeffs)
    }

    /// Transpose of [`ReducedOperator::apply`]: maps a coefficient array
    /// (`n_cells * n_modes`) to grid values.
    pub fn adjoint(&self, r: &[f64]) -> StateField {
        let (n_t, n_x, nm) = (self.grid.n_t, self.grid.n_x, self.n_modes);
        let mut spatial = vec![0.0; n_t * nm];
        for c in 0..self.n_cells {
            let rc = &r[c * nm..(c + 1) * nm];
            for (j, w) in self.cells[c * n_t..(c + 1) * n_t].iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for (s, v) in spatial[j * nm..(j + 1) * nm].iter_mut().zip(rc) {
                    *s += w * v;
                }
            }
        }
        let mut values = vec![0.0; n_t * n_x];
        for j in 0..n_t {
            synthesize_row(&self.proj, n_x, &spatial[j * nm..(j + 1) * nm], &mut values[j * n_x..(j + 1) * n_x]);
        }
        StateField::from_values(self.grid, values).expect("finite adjoint")
    }
}

/// `m` time cells and `m` modes (constant mode included).
pub fn analyze_reduced(u: &StateField, m: usize) -> Result<MeasurementRecord> {
    analyze_reduced_modes(u, m, m)
}

pub fn analyze_reduced_modes(u: &StateField, n_cells: usize, n_modes: usize) -> Result<MeasurementRecord> {
    ReducedOperator::new(u.grid(), n_cells, n_modes)?.apply(u)
}

fn cell_of(grid: &Grid, n_cells: usize, j: usize) -> usize {
    let c = (grid.t(j) / grid.t_max * n_cells as f64).floor() as usize;
    c.min(n_cells - 1)
}

/// Piecewise-constant in time: node `t_j` takes the coefficients of the cell
/// containing it (the last cell is closed on the right).
pub fn synthesize(rec: &MeasurementRecord) -> StateField {
    let g = rec.grid;
    let table = rec.basis().table(&g);
    let mut values = vec![0.0; g.len()];
    for (j, row) in values.chunks_mut(g.n_x).enumerate() {
        synthesize_row(&table, g.n_x, rec.cell(cell_of(&g, rec.n_cells, j)), row);
    }
    StateField::from_values(g, values).expect("finite synthesis")
}

/// Continuous-in-time reconstruction: cell coefficients placed at cell
/// midpoints and linearly interpolated (and extrapolated at both ends).
pub fn reconstruct(rec: &MeasurementRecord) -> StateField {
    let g = rec.grid;
    let table = rec.basis().table(&g);
    let nm = rec.n_modes;
    let width = rec.cell_width();
    let mut values = vec![0.0; g.len()];
    let mut c = vec![0.0; nm];
    for (j, row) in values.chunks_mut(g.n_x).enumerate() {
        if rec.n_cells == 1 {
            c.copy_from_slice(rec.cell(0));
        } else {
            let s = g.t(j) / width - 0.5;
            let k = (s.floor().max(0.0) as usize).min(rec.n_cells - 2);
            let th = s - k as f64;
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = (1.0 - th) * rec.get(k, i) + th * rec.get(k + 1, i);
            }
        }
        synthesize_row(&table, g.n_x, &c, row);
    }
    StateField::from_values(g, values).expect("finite reconstruction")
}

/// The multiplicative factors `eps^delta`, `eps ~ U(0.5, 1.5)`, drawn in
/// order from a ChaCha8 stream seeded with `seed`.
pub fn noise_factors(count: usize, delta: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let eps: f64 = rng.random_range(0.5..1.5);
            if delta == 0.0 {
                1.0
            } else {
                eps.powf(delta)
            }
        })
        .collect()
}

/// Multiplies every value of the cell-constant synthesized field (one value
/// per cell and spatial node) by a fresh `eps^delta` and projects back onto
/// the retained modes.
pub fn add_noise(rec: &MeasurementRecord, delta: f64, seed: u64) -> Result<MeasurementRecord> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::InvalidMeasurement(format!("noise exponent must be nonnegative, got {delta}")));
    }
    let g = rec.grid;
    let table = rec.basis().table(&g);
    let proj = projection_table(&rec.basis(), &g);
    let factors = noise_factors(rec.n_cells * g.n_x, delta, seed);
    let mut row = vec![0.0; g.n_x];
    let mut coeffs = vec![0.0; rec.coeffs.len()];
    for c in 0..rec.n_cells {
        synthesize_row(&table, g.n_x, rec.cell(c), &mut row);
        for (v, f) in row.iter_mut().zip(&factors[c * g.n_x..(c + 1) * g.n_x]) {
            *v *= f;
        }
        project_row(&proj, g.n_x, &row, &mut coeffs[c * rec.n_modes..(c + 1) * rec.n_modes]);
    }
    MeasurementRecord::new(g, rec.n_cells, rec.n_modes, coeffs)
}

/// Space-time distance between the reduced and the full measurement of `u`,
/// both synthesized on the grid. The full operator keeps `n_x - 1` modes.
pub fn operator_gap(u: &StateField, m: usize) -> Result<f64> {
    let grid = *u.grid();
    let reduced = synthesize(&analyze_reduced(u, m)?);
    let full = synthesize_full(&grid, &analyze_full(u, grid.n_x - 1)?)?;
    Ok(crate::field::l2_spacetime(&reduced.axpy(-1.0, &full)))
}
