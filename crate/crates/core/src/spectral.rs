//! Periodic grids on the unit cell, discrete Fourier transforms, frequency
//! lattices and the norms used everywhere else.
//!
//! Nodes sit at `j/M` per axis; by periodicity this enumerates the unit cell
//! `Q` regardless of where its fundamental domain is anchored. The frequency
//! lattice uses the half-open convention `[-M/2, M/2)`, so the Nyquist mode
//! `-M/2` is retained.

use crate::error::Error;
use crate::Result;
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex, OnceLock};

/// Uniform periodic grid over the unit cell, up to three axes, even sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    dims: Vec<usize>,
}

impl Grid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || dims.iter().any(|&m| m < 4 || m % 2 != 0) {
            return Err(Error::InvalidGrid {
                dims: dims.to_vec(),
            });
        }
        Ok(Grid {
            dims: dims.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_axes(&self) -> usize {
        self.dims.len()
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frequency of index `idx` on `axis`: integer in `[-M/2, M/2)`.
    #[inline]
    pub fn freq(&self, axis: usize, idx: usize) -> i64 {
        wrap_freq_index(self.dims[axis], idx)
    }

    /// Node coordinate of index `idx` on `axis`, in `[0,1)`.
    #[inline]
    pub fn coord(&self, axis: usize, idx: usize) -> f64 {
        idx as f64 / self.dims[axis] as f64
    }

    /// Decompose a linear node index (last axis fastest).
    #[inline]
    pub fn multi_index(&self, lin: usize, out: &mut [usize]) {
        let mut rem = lin;
        for a in (0..self.dims.len()).rev() {
            out[a] = rem % self.dims[a];
            rem /= self.dims[a];
        }
    }

    #[inline]
    pub fn lin_index(&self, multi: &[usize]) -> usize {
        let mut lin = 0;
        for (a, &i) in multi.iter().enumerate() {
            lin = lin * self.dims[a] + i;
        }
        lin
    }

    /// Node coordinates of a linear index.
    pub fn node_coords(&self, lin: usize, out: &mut [f64]) {
        let mut rem = lin;
        for a in (0..self.dims.len()).rev() {
            out[a] = (rem % self.dims[a]) as f64 / self.dims[a] as f64;
            rem /= self.dims[a];
        }
    }

    /// Frequency vector of a linear mode index.
    pub fn node_freqs(&self, lin: usize, out: &mut [i64]) {
        let mut rem = lin;
        for a in (0..self.dims.len()).rev() {
            out[a] = wrap_freq_index(self.dims[a], rem % self.dims[a]);
            rem /= self.dims[a];
        }
    }

    /// Linear index of an integer frequency vector (reduced mod M per axis).
    pub fn index_of_freqs(&self, freqs: &[i64]) -> usize {
        let mut lin = 0;
        for (a, &f) in freqs.iter().enumerate() {
            let m = self.dims[a] as i64;
            lin = lin * self.dims[a] + f.rem_euclid(m) as usize;
        }
        lin
    }
}

#[inline]
pub fn wrap_freq_index(m: usize, idx: usize) -> i64 {
    if idx < m / 2 {
        idx as i64
    } else {
        idx as i64 - m as i64
    }
}

/// A `d`-component real field sampled on a [`Grid`], with a lazily cached
/// spectrum. Values are node-major (last axis fastest) with the component
/// index fastest within a node.
#[derive(Debug, Clone)]
pub struct PeriodicField {
    grid: Grid,
    components: usize,
    values: Vec<f64>,
    cache: OnceLock<Arc<Spectrum>>,
}

impl PeriodicField {
    pub fn zeros(grid: Grid, components: usize) -> Self {
        let n = grid.len() * components;
        PeriodicField {
            grid,
            components,
            values: vec![0.0; n],
            cache: OnceLock::new(),
        }
    }

    pub fn from_values(grid: Grid, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * components {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "expected {} values, got {}",
                    grid.len() * components,
                    values.len()
                ),
            });
        }
        Ok(PeriodicField {
            grid,
            components,
            values,
            cache: OnceLock::new(),
        })
    }

    /// Build a field by evaluating `f(coords, out_components)` at every node.
    pub fn from_fn(grid: Grid, components: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let n_axes = grid.n_axes();
        let mut values = vec![0.0; grid.len() * components];
        let mut coords = [0.0f64; 3];
        for node in 0..grid.len() {
            grid.node_coords(node, &mut coords[..n_axes]);
            let sl = &mut values[node * components..(node + 1) * components];
            f(&coords[..n_axes], sl);
        }
        PeriodicField {
            grid,
            components,
            values,
            cache: OnceLock::new(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn node(&self, lin: usize) -> &[f64] {
        &self.values[lin * self.components..(lin + 1) * self.components]
    }

    /// Componentwise mean over the grid (the zero Fourier mode).
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.components];
        for node in 0..self.grid.len() {
            for c in 0..self.components {
                m[c] += self.values[node * self.components + c];
            }
        }
        let n = self.grid.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Cached forward transform.
    pub fn spectrum(&self) -> &Spectrum {
        self.cache.get_or_init(|| Arc::new(forward_transform(self)))
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &PeriodicField, s: f64) -> Result<PeriodicField> {
        if self.grid != other.grid || self.components != other.components {
            return Err(Error::ShapeMismatch {
                context: "add_scaled operands differ".into(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + s * b)
            .collect();
        Ok(PeriodicField {
            grid: self.grid.clone(),
            components: self.components,
            values,
            cache: OnceLock::new(),
        })
    }

    pub fn scale(&self, s: f64) -> PeriodicField {
        PeriodicField {
            grid: self.grid.clone(),
            components: self.components,
            values: self.values.iter().map(|v| v * s).collect(),
            cache: OnceLock::new(),
        }
    }

    /// Mean inner product `(1/#nodes) sum_nodes a . b`.
    pub fn dot_mean(&self, other: &PeriodicField) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        s / self.grid.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Complex Fourier coefficients of a field; same layout as the field with
/// mode index in place of node index.
#[derive(Debug, Clone)]
pub struct Spectrum {
    grid: Grid,
    components: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(grid: Grid, components: usize) -> Self {
        let n = grid.len() * components;
        Spectrum {
            grid,
            components,
            coeffs: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    #[inline]
    pub fn coeff(&self, mode: usize, c: usize) -> Complex64 {
        self.coeffs[mode * self.components + c]
    }

    /// Energy `sum_modes |coef|^2` (all components).
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

// ---------------------------------------------------------------------------
// FFT plumbing
// ---------------------------------------------------------------------------

static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();

fn plan(len: usize, inverse: bool) -> Arc<dyn rustfft::Fft<f64>> {
    let mut planner = PLANNER
        .get_or_init(|| Mutex::new(FftPlanner::new()))
        .lock()
        .unwrap();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

/// In-place N-dimensional FFT over a C-ordered (last axis fastest) buffer.
/// Unnormalized, like the underlying 1-D transforms.
pub fn fft_nd(buf: &mut [Complex64], dims: &[usize], inverse: bool) {
    let total: usize = dims.iter().product();
    debug_assert_eq!(buf.len(), total);
    let mut line: Vec<Complex64> = Vec::new();
    for axis in 0..dims.len() {
        let m = dims[axis];
        let fft = plan(m, inverse);
        line.resize(m, Complex64::new(0.0, 0.0));
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            let block = o * m * stride;
            for s in 0..stride {
                let base = block + s;
                for k in 0..m {
                    line[k] = buf[base + k * stride];
                }
                fft.process(&mut line);
                for k in 0..m {
                    buf[base + k * stride] = line[k];
                }
            }
        }
    }
}

/// Discrete Fourier coefficients `(1/prod M) sum_nodes w(y) e^{-2 pi i y.lambda}`.
pub fn forward_transform(field: &PeriodicField) -> Spectrum {
    let grid = field.grid.clone();
    let d = field.components;
    let n = grid.len();
    let mut coeffs = vec![Complex64::new(0.0, 0.0); n * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..d {
        for node in 0..n {
            buf[node] = Complex64::new(field.values[node * d + c], 0.0);
        }
        fft_nd(&mut buf, grid.dims(), false);
        let scale = 1.0 / n as f64;
        for mode in 0..n {
            coeffs[mode * d + c] = buf[mode] * scale;
        }
    }
    Spectrum {
        grid,
        components: d,
        coeffs,
    }
}

/// Exact inverse of [`forward_transform`]; errors if the reconstruction has
/// an imaginary residue above `1e-9` of the field norm.
pub fn inverse_transform(spec: &Spectrum) -> Result<PeriodicField> {
    let (field, imag_ratio) = inverse_transform_unchecked(spec);
    if imag_ratio > 1e-9 {
        return Err(Error::NonSymmetricSpectrum { imag_ratio });
    }
    Ok(field)
}

/// Inverse transform returning the real part plus the relative imaginary
/// residue, for callers that tolerate slight asymmetry by construction.
pub fn inverse_transform_unchecked(spec: &Spectrum) -> (PeriodicField, f64) {
    let grid = spec.grid.clone();
    let d = spec.components;
    let n = grid.len();
    let mut values = vec![0.0; n * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut imag2 = 0.0f64;
    let mut total2 = 0.0f64;
    for c in 0..d {
        for mode in 0..n {
            buf[mode] = spec.coeffs[mode * d + c];
        }
        fft_nd(&mut buf, grid.dims(), true);
        for node in 0..n {
            values[node * d + c] = buf[node].re;
            imag2 += buf[node].im * buf[node].im;
            total2 += buf[node].norm_sqr();
        }
    }
    let imag_ratio = if total2 > 0.0 {
        (imag2 / total2).sqrt()
    } else {
        0.0
    };
    (
        PeriodicField {
            grid,
            components: d,
            values,
            cache: OnceLock::new(),
        },
        imag_ratio,
    )
}

/// Evaluate the trigonometric interpolant of `spec` on its own grid shifted
/// by `offset` (coordinates, not indices). Nyquist modes are evaluated in the
/// real cosine convention so real fields stay real.
pub fn sample_with_offset(spec: &Spectrum, offset: &[f64]) -> PeriodicField {
    let grid = spec.grid.clone();
    let d = spec.components;
    let n = grid.len();
    let mut shifted = Spectrum::zeros(grid.clone(), d);
    let n_axes = grid.n_axes();
    let mut freqs = [0i64; 6];
    for mode in 0..n {
        grid.node_freqs(mode, &mut freqs[..n_axes]);
        let mut phase = Complex64::new(1.0, 0.0);
        for a in 0..n_axes {
            let m = grid.dims()[a] as i64;
            if freqs[a] == -m / 2 {
                // self-conjugate mode: real interpolant uses cos(pi M (y+delta))
                phase *= (2.0 * std::f64::consts::PI * (m as f64 / 2.0) * offset[a]).cos();
            } else {
                let th = 2.0 * std::f64::consts::PI * freqs[a] as f64 * offset[a];
                phase *= Complex64::new(th.cos(), th.sin());
            }
        }
        for c in 0..d {
            shifted.coeffs[mode * d + c] = spec.coeffs[mode * d + c] * phase;
        }
    }
    inverse_transform_unchecked(&shifted).0
}

/// Exact resampling of a field onto `new_dims`: zero padding (with Nyquist
/// splitting) when refining, alias folding when coarsening. Sampling the
/// trigonometric interpolant at the new nodes gives the same values.
pub fn resample(field: &PeriodicField, new_dims: &[usize]) -> Result<PeriodicField> {
    if new_dims == field.grid.dims() {
        return Ok(field.clone());
    }
    let new_grid = Grid::new(new_dims)?;
    let spec = field.spectrum();
    let d = field.components;
    let mut out = Spectrum::zeros(new_grid.clone(), d);
    let n_axes = field.grid.n_axes();
    let mut freqs = [0i64; 3];
    // per-axis targets: (frequency, weight), at most 2 per axis
    let mut targets: [[(i64, f64); 2]; 3] = [[(0, 0.0); 2]; 3];
    let mut counts = [0usize; 3];
    for mode in 0..field.grid.len() {
        field.grid.node_freqs(mode, &mut freqs[..n_axes]);
        for a in 0..n_axes {
            let m_old = field.grid.dims()[a] as i64;
            let m_new = new_dims[a] as i64;
            let f = freqs[a];
            if f == -m_old / 2 && m_new > m_old {
                targets[a][0] = (-m_old / 2, 0.5);
                targets[a][1] = (m_old / 2, 0.5);
                counts[a] = 2;
            } else {
                // fold into the new band
                let half = m_new / 2;
                let folded = (f + half).rem_euclid(m_new) - half;
                targets[a][0] = (folded, 1.0);
                counts[a] = 1;
            }
        }
        // scatter over the product of per-axis targets
        let mut sel = [0usize; 3];
        loop {
            let mut w = 1.0;
            let mut tf = [0i64; 3];
            for a in 0..n_axes {
                let (f, wa) = targets[a][sel[a]];
                tf[a] = f;
                w *= wa;
            }
            let idx = out.grid.index_of_freqs(&tf[..n_axes]);
            for c in 0..d {
                out.coeffs[idx * d + c] += spec.coeffs[mode * d + c] * w;
            }
            // advance selector
            let mut a = 0;
            loop {
                if a == n_axes {
                    break;
                }
                sel[a] += 1;
                if sel[a] < counts[a] {
                    break;
                }
                sel[a] = 0;
                a += 1;
            }
            if a == n_axes {
                break;
            }
        }
    }
    Ok(inverse_transform_unchecked(&out).0)
}

/// Periodic tiling: the values of `w(k y)` on the `k`-times finer grid are
/// the original array repeated `k` times per axis.
pub fn tile(field: &PeriodicField, factor: usize) -> Result<PeriodicField> {
    if factor == 1 {
        return Ok(field.clone());
    }
    let old = field.grid();
    let new_dims: Vec<usize> = old.dims().iter().map(|&m| m * factor).collect();
    let grid = Grid::new(&new_dims)?;
    let d = field.components();
    let n_axes = grid.n_axes();
    let mut values = vec![0.0f64; grid.len() * d];
    let mut idx = [0usize; 3];
    let mut src_idx = [0usize; 3];
    for node in 0..grid.len() {
        grid.multi_index(node, &mut idx[..n_axes]);
        for a in 0..n_axes {
            src_idx[a] = idx[a] % old.dims()[a];
        }
        let src = old.lin_index(&src_idx[..n_axes]);
        values[node * d..(node + 1) * d].copy_from_slice(field.node(src));
    }
    PeriodicField::from_values(grid, d, values)
}

// ---------------------------------------------------------------------------
// Norms
// ---------------------------------------------------------------------------

/// `L^p` norm with the uniform-grid quadrature; `p` must lie in `(1, inf)`.
pub fn lp_norm(field: &PeriodicField, p: f64) -> Result<f64> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::InvalidExponent { p });
    }
    let d = field.components;
    let mut acc = 0.0f64;
    for node in 0..field.grid.len() {
        let mut mag2 = 0.0;
        for c in 0..d {
            let v = field.values[node * d + c];
            mag2 += v * v;
        }
        if p == 2.0 {
            acc += mag2;
        } else {
            acc += mag2.sqrt().powf(p);
        }
    }
    acc /= field.grid.len() as f64;
    Ok(if p == 2.0 { acc.sqrt() } else { acc.powf(1.0 / p) })
}

/// Periodic `H^{-1}` multiplier norm `(sum_l |g^(l)|^2 / (1+4 pi^2 |l|^2))^{1/2}`,
/// the discrete stand-in for the `W^{-1,p}` norms.
pub fn hneg_norm(field: &PeriodicField) -> f64 {
    let spec = field.spectrum();
    hneg_norm_of_spectrum(spec)
}

pub fn hneg_norm_of_spectrum(spec: &Spectrum) -> f64 {
    let d = spec.components;
    let grid = spec.grid();
    let n_axes = grid.n_axes();
    let mut freqs = [0i64; 3];
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    let mut acc = 0.0;
    for mode in 0..grid.len() {
        grid.node_freqs(mode, &mut freqs[..n_axes]);
        let l2: f64 = freqs[..n_axes].iter().map(|&f| (f * f) as f64).sum();
        let mult = 1.0 / (1.0 + four_pi2 * l2);
        let mut e = 0.0;
        for c in 0..d {
            e += spec.coeffs[mode * d + c].norm_sqr();
        }
        acc += mult * e;
    }
    acc.sqrt()
}

/// Random band-limited field: independent Gaussian spectral coefficients for
/// `|lambda|_inf <= band`, scaled by `sigma / (1 + |lambda|^2)`, zero mean,
/// Nyquist modes left empty. Conjugate symmetry is enforced so the field is
/// real; the draw order is fixed, so results depend only on the rng state.
pub fn random_band_limited(
    grid: &Grid,
    components: usize,
    band: i64,
    sigma: f64,
    rng: &mut impl rand::Rng,
) -> PeriodicField {
    let mut spec = Spectrum::zeros(grid.clone(), components);
    let n_axes = grid.n_axes();
    let mut freqs = [0i64; 3];
    let mut neg = [0i64; 3];
    let mut normal = || -> f64 {
        // Box-Muller from two uniforms keeps us off extra dependencies
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for mode in 1..grid.len() {
        grid.node_freqs(mode, &mut freqs[..n_axes]);
        let mut ok = true;
        for a in 0..n_axes {
            let m = grid.dims()[a] as i64;
            if freqs[a].abs() > band || freqs[a] == -m / 2 {
                ok = false;
            }
            neg[a] = -freqs[a];
        }
        if !ok {
            continue;
        }
        let partner = grid.index_of_freqs(&neg[..n_axes]);
        if partner < mode {
            continue; // filled from its conjugate below
        }
        let l2: f64 = freqs[..n_axes].iter().map(|&f| (f * f) as f64).sum();
        let scale = sigma / (1.0 + l2);
        for c in 0..components {
            let re = normal() * scale;
            let im = if partner == mode { 0.0 } else { normal() * scale };
            spec.coeffs_mut()[mode * components + c] = Complex64::new(re, im);
            spec.coeffs_mut()[partner * components + c] = Complex64::new(re, -im);
        }
    }
    inverse_transform_unchecked(&spec).0
}

/// Subtract the componentwise mean, leaving the zero mode at zero.
pub fn remove_mean(field: &PeriodicField) -> PeriodicField {
    let m = field.mean();
    let d = field.components;
    let mut values = field.values.clone();
    for node in 0..field.grid.len() {
        for c in 0..d {
            values[node * d + c] -= m[c];
        }
    }
    PeriodicField {
        grid: field.grid.clone(),
        components: d,
        values,
        cache: OnceLock::new(),
    }
}

// ---------------------------------------------------------------------------
// AQXF v1 binary field format
// ---------------------------------------------------------------------------

/// The `AQXF v1` on-disk field format: magic `AQXF`, then little-endian
/// `u32` version=1, N, d, dims, then IEEE-754 binary64 little-endian values,
/// node-major (last axis fastest) with the component index fastest.
pub mod aqxf {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"AQXF";
    pub const VERSION: u32 = 1;

    pub fn write_raw(
        mut w: impl Write,
        dims: &[usize],
        components: usize,
        values: &[f64],
    ) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, dims.len() as u32, components as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &m in dims {
            w.write_all(&(m as u32).to_le_bytes())?;
        }
        for &v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw(mut r: impl Read) -> Result<(Vec<usize>, usize, Vec<f64>)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut u = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u)?;
            Ok(u32::from_le_bytes(u))
        };
        let version = next(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = next(&mut r)? as usize;
        let d = next(&mut r)? as usize;
        if n == 0 || n > 6 || d == 0 {
            return Err(Error::Format(format!("bad axis/component counts {n}/{d}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            dims.push(next(&mut r)? as usize);
        }
        let count: usize = dims.iter().product::<usize>() * d;
        let mut values = vec![0.0f64; count];
        let mut b = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok((dims, d, values))
    }

    pub fn write_field(path: &std::path::Path, field: &PeriodicField) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_raw(
            std::io::BufWriter::new(f),
            field.grid().dims(),
            field.components(),
            field.values(),
        )
    }

    pub fn read_field(path: &std::path::Path) -> Result<PeriodicField> {
        let f = std::fs::File::open(path)?;
        let (dims, d, values) = read_raw(std::io::BufReader::new(f))?;
        let grid = Grid::new(&dims)?;
        PeriodicField::from_values(grid, d, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn sin_field(m: usize, k: f64) -> PeriodicField {
        let grid = Grid::new(&[m]).unwrap();
        PeriodicField::from_fn(grid, 1, |y, out| out[0] = (2.0 * PI * k * y[0]).sin())
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(&[8, 16]).is_ok());
        assert!(Grid::new(&[]).is_err());
        assert!(Grid::new(&[7]).is_err());
        assert!(Grid::new(&[2]).is_err());
        assert!(Grid::new(&[4, 4, 4, 4]).is_err());
    }

    #[test]
    fn constant_field_transforms_to_mean() {
        let grid = Grid::new(&[8, 6]).unwrap();
        let f = PeriodicField::from_fn(grid, 1, |_, out| out[0] = 3.25);
        let spec = f.spectrum();
        assert_relative_eq!(spec.coeff(0, 0).re, 3.25, epsilon = 1e-14);
        let rest: f64 = spec.coeffs()[1..].iter().map(|c| c.norm()).sum();
        assert!(rest < 1e-13);
    }

    #[test]
    fn cosine_coefficients() {
        let grid = Grid::new(&[8]).unwrap();
        let f = PeriodicField::from_fn(grid, 1, |y, out| out[0] = (2.0 * PI * y[0]).cos());
        let spec = f.spectrum();
        // modes +1 and -1 are 1/2, everything else 0
        for mode in 0..8 {
            let l = spec.grid().freq(0, mode);
            let c = spec.coeff(mode, 0);
            if l == 1 || l == -1 {
                assert_relative_eq!(c.re, 0.5, epsilon = 1e-14);
                assert!(c.im.abs() < 1e-14);
            } else {
                assert!(c.norm() < 1e-14, "mode {l} = {c}");
            }
        }
    }

    #[test]
    fn sine_coefficients() {
        let f = sin_field(8, 1.0);
        let spec = f.spectrum();
        for mode in 0..8 {
            let l = spec.grid().freq(0, mode);
            let c = spec.coeff(mode, 0);
            if l == 1 {
                assert_relative_eq!(c.im, -0.5, epsilon = 1e-14);
            } else if l == -1 {
                assert_relative_eq!(c.im, 0.5, epsilon = 1e-14);
            } else {
                assert!(c.norm() < 1e-14);
            }
            if l == 1 || l == -1 {
                assert!(c.re.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inverse_of_cosine_spectrum() {
        let grid = Grid::new(&[8]).unwrap();
        let mut spec = Spectrum::zeros(grid.clone(), 1);
        let i_plus = grid.index_of_freqs(&[1]);
        let i_minus = grid.index_of_freqs(&[-1]);
        spec.coeffs_mut()[i_plus] = Complex64::new(0.5, 0.0);
        spec.coeffs_mut()[i_minus] = Complex64::new(0.5, 0.0);
        let f = inverse_transform(&spec).unwrap();
        for node in 0..8 {
            let y = grid.coord(0, node);
            assert_relative_eq!(f.values()[node], (2.0 * PI * y).cos(), epsilon = 1e-13);
        }
    }

    #[test]
    fn non_symmetric_spectrum_is_rejected() {
        let grid = Grid::new(&[8]).unwrap();
        let mut spec = Spectrum::zeros(grid.clone(), 1);
        let i_plus = grid.index_of_freqs(&[1]);
        spec.coeffs_mut()[i_plus] = Complex64::new(0.0, 1.0);
        assert!(matches!(
            inverse_transform(&spec),
            Err(Error::NonSymmetricSpectrum { .. })
        ));
    }

    #[test]
    fn round_trip_random_field() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let grid = Grid::new(&[12, 8]).unwrap();
        let f = PeriodicField::from_fn(grid, 3, |_, out| {
            out.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        });
        let back = inverse_transform(f.spectrum()).unwrap();
        let err: f64 = f
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12 * f.max_abs().max(1.0));
    }

    #[test]
    fn lp_norm_examples() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let two = PeriodicField::from_fn(grid.clone(), 1, |_, out| out[0] = 2.0);
        assert_relative_eq!(lp_norm(&two, 3.7).unwrap(), 2.0, epsilon = 1e-14);
        let s = sin_field(16, 1.0);
        assert_relative_eq!(
            lp_norm(&s, 2.0).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-13
        );
        assert_relative_eq!(
            lp_norm(&s, 4.0).unwrap(),
            (3.0f64 / 8.0).powf(0.25),
            epsilon = 1e-13
        );
        assert!(lp_norm(&s, 1.0).is_err());
        assert!(lp_norm(&s, f64::INFINITY).is_err());
    }

    #[test]
    fn hneg_norm_examples() {
        let grid = Grid::new(&[32]).unwrap();
        let zero = PeriodicField::zeros(grid, 1);
        assert_eq!(hneg_norm(&zero), 0.0);
        let s = sin_field(32, 1.0);
        let expect = (1.0 / (2.0 * (1.0 + 4.0 * PI * PI))).sqrt();
        assert_relative_eq!(hneg_norm(&s), expect, epsilon = 1e-12);
        // monotone decreasing in the oscillation frequency
        let mut prev = hneg_norm(&sin_field(64, 1.0));
        for k in [2.0, 4.0, 8.0] {
            let cur = hneg_norm(&sin_field(64, k));
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn remove_mean_examples() {
        let grid = Grid::new(&[16]).unwrap();
        let c = PeriodicField::from_fn(grid.clone(), 1, |_, out| out[0] = 5.0);
        assert!(remove_mean(&c).max_abs() < 1e-14);
        let s = sin_field(16, 1.0);
        let r = remove_mean(&s);
        assert!(r
            .values()
            .iter()
            .zip(s.values())
            .all(|(a, b)| (a - b).abs() < 1e-14));
        let shifted = PeriodicField::from_fn(grid, 1, |y, out| {
            out[0] = 1.0 + (2.0 * PI * y[0]).sin()
        });
        let r = remove_mean(&shifted);
        for node in 0..16 {
            let y = node as f64 / 16.0;
            assert_relative_eq!(r.values()[node], (2.0 * PI * y).sin(), epsilon = 1e-13);
        }
        assert!(r.mean()[0].abs() <= 1e-14);
    }

    #[test]
    fn resample_round_trip_band_limited() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let f = PeriodicField::from_fn(grid, 2, |y, out| {
            out[0] = (2.0 * PI * y[0]).sin() + 0.3 * (2.0 * PI * 3.0 * y[1]).cos();
            out[1] = (2.0 * PI * (y[0] + 2.0 * y[1])).cos();
        });
        let up = resample(&f, &[32, 48]).unwrap();
        // values at shared nodes agree (every original node is a refined node)
        for i in (0..32).step_by(2) {
            for j in (0..48).step_by(3) {
                let orig = f.node(f.grid().lin_index(&[i / 2, j / 3]));
                let fine = up.node(up.grid().lin_index(&[i, j]));
                for c in 0..2 {
                    assert_relative_eq!(orig[c], fine[c], epsilon = 1e-12);
                }
            }
        }
        let back = resample(&up, &[16, 16]).unwrap();
        for (a, b) in back.values().iter().zip(f.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn offset_sampling_matches_analytic_shift() {
        let grid = Grid::new(&[16]).unwrap();
        let f = PeriodicField::from_fn(grid.clone(), 1, |y, out| {
            out[0] = (2.0 * PI * 3.0 * y[0]).sin()
        });
        let shifted = sample_with_offset(f.spectrum(), &[0.01]);
        for node in 0..16 {
            let y = grid.coord(0, node) + 0.01;
            assert_relative_eq!(
                shifted.values()[node],
                (2.0 * PI * 3.0 * y).sin(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn aqxf_round_trip_and_layout() {
        let grid = Grid::new(&[4, 6]).unwrap();
        let f = PeriodicField::from_fn(grid, 2, |y, out| {
            out[0] = y[0] + 10.0 * y[1];
            out[1] = -y[0];
        });
        let mut buf = Vec::new();
        aqxf::write_raw(&mut buf, f.grid().dims(), 2, f.values()).unwrap();
        assert_eq!(&buf[..4], b"AQXF");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2); // N
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2); // d
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(buf[20..24].try_into().unwrap()), 6);
        let (dims, d, values) = aqxf::read_raw(buf.as_slice()).unwrap();
        assert_eq!(dims, vec![4, 6]);
        assert_eq!(d, 2);
        assert_eq!(values, f.values());
    }
}
