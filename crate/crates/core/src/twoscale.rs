//! The unfolding operator, two-scale pairings, and the constructive
//! generator of admissible oscillating sequences from a two-scale limit.

use crate::error::Error;
use crate::operator::OperatorSpec;
use crate::spectral::{
    fft_nd, resample, Grid, PeriodicField, Spectrum,
};
use crate::Result;
use num_complex::Complex64;
use rayon::prelude::*;

/// A field `w(x, y)` on a macro grid times a micro grid, `d` components.
/// Values are macro-node-major, then micro-node, then component.
#[derive(Debug, Clone)]
pub struct TwoScaleField {
    macro_grid: Grid,
    micro_grid: Grid,
    components: usize,
    values: Vec<f64>,
}

impl TwoScaleField {
    pub fn zeros(macro_grid: Grid, micro_grid: Grid, components: usize) -> Self {
        let n = macro_grid.len() * micro_grid.len() * components;
        TwoScaleField {
            macro_grid,
            micro_grid,
            components,
            values: vec![0.0; n],
        }
    }

    pub fn from_fn(
        macro_grid: Grid,
        micro_grid: Grid,
        components: usize,
        mut f: impl FnMut(&[f64], &[f64], &mut [f64]),
    ) -> Self {
        let mut out = TwoScaleField::zeros(macro_grid, micro_grid, components);
        let (nx, ny) = (out.macro_grid.n_axes(), out.micro_grid.n_axes());
        let mut xc = [0.0f64; 3];
        let mut yc = [0.0f64; 3];
        let micro_len = out.micro_grid.len();
        for k in 0..out.macro_grid.len() {
            out.macro_grid.node_coords(k, &mut xc[..nx]);
            for q in 0..micro_len {
                out.micro_grid.node_coords(q, &mut yc[..ny]);
                let base = (k * micro_len + q) * components;
                let (values, xs, ys) = (&mut out.values, &xc[..nx], &yc[..ny]);
                f(xs, ys, &mut values[base..base + components]);
            }
        }
        out
    }

    pub fn macro_grid(&self) -> &Grid {
        &self.macro_grid
    }

    pub fn micro_grid(&self) -> &Grid {
        &self.micro_grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn micro_slice(&self, macro_node: usize) -> &[f64] {
        let span = self.micro_grid.len() * self.components;
        &self.values[macro_node * span..(macro_node + 1) * span]
    }

    /// The micro field at one macro node (copies).
    pub fn micro_field(&self, macro_node: usize) -> PeriodicField {
        PeriodicField::from_values(
            self.micro_grid.clone(),
            self.components,
            self.micro_slice(macro_node).to_vec(),
        )
        .expect("slice length matches by construction")
    }

    pub fn set_micro_field(&mut self, macro_node: usize, field: &PeriodicField) -> Result<()> {
        if field.grid() != &self.micro_grid || field.components() != self.components {
            return Err(Error::ShapeMismatch {
                context: "micro field does not match two-scale layout".into(),
            });
        }
        let span = self.micro_grid.len() * self.components;
        self.values[macro_node * span..(macro_node + 1) * span].copy_from_slice(field.values());
        Ok(())
    }

    /// Macro field of micro means `x -> integral_Q w(x, y) dy`.
    pub fn mean_micro(&self) -> PeriodicField {
        let micro_len = self.micro_grid.len();
        let d = self.components;
        let mut vals = vec![0.0; self.macro_grid.len() * d];
        for k in 0..self.macro_grid.len() {
            let slice = self.micro_slice(k);
            for q in 0..micro_len {
                for c in 0..d {
                    vals[k * d + c] += slice[q * d + c];
                }
            }
            for c in 0..d {
                vals[k * d + c] /= micro_len as f64;
            }
        }
        PeriodicField::from_values(self.macro_grid.clone(), d, vals).unwrap()
    }

    /// Subtract the micro mean at every macro node.
    pub fn fluctuation(&self) -> TwoScaleField {
        let mean = self.mean_micro();
        let micro_len = self.micro_grid.len();
        let d = self.components;
        let mut out = self.clone();
        for k in 0..self.macro_grid.len() {
            let m = mean.node(k).to_vec();
            let span = micro_len * d;
            let sl = &mut out.values[k * span..(k + 1) * span];
            for q in 0..micro_len {
                for c in 0..d {
                    sl[q * d + c] -= m[c];
                }
            }
        }
        out
    }

    pub fn sub(&self, other: &TwoScaleField) -> Result<TwoScaleField> {
        if self.macro_grid != other.macro_grid
            || self.micro_grid != other.micro_grid
            || self.components != other.components
        {
            return Err(Error::ShapeMismatch {
                context: "two-scale fields differ in shape".into(),
            });
        }
        let mut out = self.clone();
        out.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    /// `L^2` norm over the product grid (uniform quadrature).
    pub fn product_l2(&self) -> f64 {
        let n = (self.macro_grid.len() * self.micro_grid.len()) as f64;
        (self.values.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Full two-scale spectrum `W(omega, kappa)`: the DFT over macro and
    /// micro axes jointly, forward-normalized.
    pub fn spectrum2(&self) -> TwoScaleSpectrum {
        let dims: Vec<usize> = self
            .macro_grid
            .dims()
            .iter()
            .chain(self.micro_grid.dims())
            .copied()
            .collect();
        let n: usize = dims.iter().product();
        let d = self.components;
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n * d];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..d {
            for i in 0..n {
                buf[i] = Complex64::new(self.values[i * d + c], 0.0);
            }
            fft_nd(&mut buf, &dims, false);
            let scale = 1.0 / n as f64;
            for i in 0..n {
                coeffs[i * d + c] = buf[i] * scale;
            }
        }
        TwoScaleSpectrum {
            macro_grid: self.macro_grid.clone(),
            micro_grid: self.micro_grid.clone(),
            components: d,
            coeffs,
        }
    }
}

/// Joint spectrum of a two-scale field, indexed by macro mode then micro mode.
#[derive(Debug, Clone)]
pub struct TwoScaleSpectrum {
    macro_grid: Grid,
    micro_grid: Grid,
    components: usize,
    coeffs: Vec<Complex64>,
}

impl TwoScaleSpectrum {
    /// Coefficient at integer frequency vectors, folded onto the grid bands.
    pub fn coeff(&self, omega: &[i64], kappa: &[i64], c: usize) -> Complex64 {
        let i = self.macro_grid.index_of_freqs(omega);
        let j = self.micro_grid.index_of_freqs(kappa);
        self.coeffs[(i * self.micro_grid.len() + j) * self.components + c]
    }

    pub fn macro_grid(&self) -> &Grid {
        &self.macro_grid
    }

    pub fn micro_grid(&self) -> &Grid {
        &self.micro_grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }
}

// ---------------------------------------------------------------------------
// Unfolding
// ---------------------------------------------------------------------------

fn check_eps(grid: &Grid, eps_inv: usize) -> Result<()> {
    if eps_inv == 0 || grid.dims().iter().any(|&m| m % eps_inv != 0) {
        return Err(Error::IncompatibleEpsilon {
            eps_inv,
            dims: grid.dims().to_vec(),
        });
    }
    Ok(())
}

/// The unfolding `T_eps u(x, y) = u(eps floor(x/eps) + eps (y - floor(y)))`
/// sampled on the product of `u`'s grid and a micro grid. With `1/eps`
/// dividing the macro grid and `micro = macro/(1/eps)` the samples land on
/// macro nodes and the operator is an exact rearrangement.
pub fn unfold(u: &PeriodicField, eps_inv: usize, micro_dims: Option<&[usize]>) -> Result<TwoScaleField> {
    check_eps(u.grid(), eps_inv)?;
    let macro_dims = u.grid().dims().to_vec();
    let micro_dims: Vec<usize> = match micro_dims {
        Some(d) => d.to_vec(),
        None => {
            let candidate: Vec<usize> = macro_dims.iter().map(|&m| m / eps_inv).collect();
            if Grid::new(&candidate).is_ok() {
                candidate
            } else {
                macro_dims.clone()
            }
        }
    };
    let micro_grid = Grid::new(&micro_dims)?;
    // exact sampling grid: eps * (cell + q/m) has denominator eps_inv * m
    let sample_dims: Vec<usize> = micro_dims.iter().map(|&m| m * eps_inv).collect();
    let fine = resample(u, &sample_dims)?;
    let fine_grid = fine.grid().clone();
    let n_axes = macro_dims.len();
    let d = u.components();
    let mut out = TwoScaleField::zeros(u.grid().clone(), micro_grid.clone(), d);
    let micro_len = micro_grid.len();
    let mut xm = [0usize; 3];
    let mut ym = [0usize; 3];
    let mut sm = [0usize; 3];
    for k in 0..u.grid().len() {
        u.grid().multi_index(k, &mut xm[..n_axes]);
        // cell index per axis: floor(x * eps_inv) with x = j/M
        let mut cell = [0usize; 3];
        for a in 0..n_axes {
            cell[a] = xm[a] * eps_inv / macro_dims[a];
        }
        let span = micro_len * d;
        let base_out = k * span;
        for q in 0..micro_len {
            micro_grid.multi_index(q, &mut ym[..n_axes]);
            for a in 0..n_axes {
                sm[a] = cell[a] * micro_dims[a] + ym[a];
            }
            let src = fine_grid.lin_index(&sm[..n_axes]);
            for c in 0..d {
                out.values[base_out + q * d + c] = fine.values()[src * d + c];
            }
        }
    }
    Ok(out)
}

/// Pointwise unfolding at arbitrary `(x, y)`: grid-exact sample points read
/// the node value directly, anything else evaluates the trigonometric
/// interpolant.
pub fn unfold_at(u: &PeriodicField, eps: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    let n_axes = u.grid().n_axes();
    let mut p = vec![0.0f64; n_axes];
    for a in 0..n_axes {
        let frac = y[a] - y[a].floor();
        p[a] = eps * (x[a] / eps).floor() + eps * frac;
    }
    // grid-exact?
    let mut idx = [0usize; 3];
    let mut exact = true;
    for a in 0..n_axes {
        let m = u.grid().dims()[a] as f64;
        let t = p[a] * m;
        let r = t.round();
        if (t - r).abs() < 1e-9 {
            idx[a] = (r as i64).rem_euclid(m as i64) as usize;
        } else {
            exact = false;
            break;
        }
    }
    if exact {
        return u.node(u.grid().lin_index(&idx[..n_axes])).to_vec();
    }
    // trig interpolation (Nyquist in the cosine convention)
    let spec = u.spectrum();
    let d = u.components();
    let mut out = vec![Complex64::new(0.0, 0.0); d];
    let mut freqs = [0i64; 3];
    for mode in 0..u.grid().len() {
        u.grid().node_freqs(mode, &mut freqs[..n_axes]);
        let mut phase = Complex64::new(1.0, 0.0);
        for a in 0..n_axes {
            let m = u.grid().dims()[a] as i64;
            if freqs[a] == -m / 2 {
                phase *= (2.0 * std::f64::consts::PI * (m as f64 / 2.0) * p[a]).cos();
            } else {
                let th = 2.0 * std::f64::consts::PI * freqs[a] as f64 * p[a];
                phase *= Complex64::new(th.cos(), th.sin());
            }
        }
        for c in 0..d {
            out[c] += spec.coeff(mode, c) * phase;
        }
    }
    out.iter().map(|z| z.re).collect()
}

/// Per-epsilon values `||u - T_eps u||_{L^2(product)}`.
pub fn unfold_convergence(
    u: &PeriodicField,
    eps_inv_list: &[usize],
    micro_dims: Option<&[usize]>,
) -> Result<Vec<(f64, f64)>> {
    let d = u.components();
    eps_inv_list
        .iter()
        .map(|&k| {
            let t = unfold(u, k, micro_dims)?;
            let micro_len = t.micro_grid.len();
            let mut acc = 0.0;
            for node in 0..u.grid().len() {
                let uv = u.node(node);
                let sl = t.micro_slice(node);
                for q in 0..micro_len {
                    for c in 0..d {
                        let diff = uv[c] - sl[q * d + c];
                        acc += diff * diff;
                    }
                }
            }
            let norm = (acc / (u.grid().len() * micro_len) as f64).sqrt();
            Ok((1.0 / k as f64, norm))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sequence generation
// ---------------------------------------------------------------------------

/// An admissible oscillating family `u_eps` with its provenance.
#[derive(Debug, Clone)]
pub struct SequenceBundle {
    pub eps_inv: Vec<usize>,
    /// `u_eps` sampled on per-epsilon evaluation grids (band-exact).
    pub fields: Vec<PeriodicField>,
    /// Macro mean of the generating two-scale limit.
    pub mean: PeriodicField,
}

fn round_up_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Frequency support (max |freq| per axis) of a spectrum, ignoring
/// coefficients below `rel_tol` of the largest.
fn support_band(coeffs: &[Complex64], grids: &[&Grid], components: usize, rel_tol: f64) -> Vec<i64> {
    let n_axes: usize = grids.iter().map(|g| g.n_axes()).sum();
    let mut band = vec![0i64; n_axes];
    let max_mag = coeffs.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    if max_mag == 0.0 {
        return band;
    }
    let cut = rel_tol * max_mag;
    let total_modes = coeffs.len() / components;
    let mut freqs = vec![0i64; n_axes];
    for mode in 0..total_modes {
        let mut keep = false;
        for c in 0..components {
            if coeffs[mode * components + c].norm() > cut {
                keep = true;
            }
        }
        if !keep {
            continue;
        }
        // decompose mode into per-grid indices (grids in order, last fastest)
        let mut rem = mode;
        let mut axis = n_axes;
        for g in grids.iter().rev() {
            let len = g.len();
            let sub = rem % len;
            rem /= len;
            let na = g.n_axes();
            axis -= na;
            g.node_freqs(sub, &mut freqs[axis..axis + na]);
        }
        for a in 0..n_axes {
            band[a] = band[a].max(freqs[a].abs());
        }
    }
    band
}

/// Build `u_eps(x) = mean(x) + w(x, x/eps)` with the fluctuation projected
/// nodewise, sampled band-exactly on an evaluation grid that holds every
/// shifted mode `omega + kappa/eps`.
pub fn generate_sequence(
    op: &OperatorSpec,
    v: &TwoScaleField,
    eps_inv_list: &[usize],
    membership_tol: f64,
) -> Result<SequenceBundle> {
    let report = crate::homogenize::membership_check(
        op,
        &crate::homogenize::FieldClassInput::TwoScale(v.clone()),
        crate::homogenize::FieldClass::AFree,
        membership_tol,
    )?;
    if !report.pass {
        return Err(Error::NotAFreeField {
            residuals: format!(
                "mean={:.3e} micro={:.3e} macro={:.3e} (tol {membership_tol:.1e})",
                report.mean_residual, report.micro_residual, report.macro_residual
            ),
        });
    }
    let mut ks = eps_inv_list.to_vec();
    ks.sort_unstable();
    if ks.is_empty() || ks.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::ShapeMismatch {
            context: "epsilon list must be nonempty with distinct values".into(),
        });
    }

    let mean = v.mean_micro();
    let fluct = crate::projection::project_two_scale(op, &v.fluctuation())?;
    let w_spec = fluct.spectrum2();
    let mean_spec = mean.spectrum().clone();

    let n_axes = v.macro_grid().n_axes();
    let band = support_band(
        &w_spec.coeffs,
        &[v.macro_grid(), v.micro_grid()],
        v.components(),
        1e-12,
    );
    let (band_x, band_y) = (&band[..n_axes], &band[n_axes..]);

    let d = v.components();
    let fields = ks
        .par_iter()
        .map(|&k| {
            let mut dims = Vec::with_capacity(n_axes);
            for a in 0..n_axes {
                let need = 2 * (band_x[a].max(v.macro_grid().dims()[a] as i64 / 2)
                    + k as i64 * band_y[a]) as usize
                    + 4;
                dims.push(round_up_multiple(need.max(v.macro_grid().dims()[a]), 2 * k));
            }
            let grid = Grid::new(&dims)?;
            let mut out = Spectrum::zeros(grid, d);
            // mean part: modes (omega, 0)
            let mg = v.macro_grid();
            let mut omega = [0i64; 3];
            for mode in 0..mg.len() {
                mg.node_freqs(mode, &mut omega[..n_axes]);
                let mut base = [0i64; 3];
                let mut nyq = [None; 3];
                let scale = [1i64; 3];
                for a in 0..n_axes {
                    let m = mg.dims()[a] as i64;
                    if omega[a] == -m / 2 {
                        nyq[a] = Some(m / 2);
                    } else {
                        base[a] = omega[a];
                    }
                }
                for c in 0..d {
                    let coeff = mean_spec.coeff(mode, c);
                    if coeff.norm() > 0.0 {
                        scatter_with_base(
                            &mut out,
                            &base[..n_axes],
                            &nyq[..n_axes],
                            &scale[..n_axes],
                            coeff,
                            c,
                        );
                    }
                }
            }
            // fluctuation: modes omega + k*kappa
            let micro = v.micro_grid();
            let mut kappa = [0i64; 3];
            for mmode in 0..mg.len() {
                mg.node_freqs(mmode, &mut omega[..n_axes]);
                for qmode in 0..micro.len() {
                    micro.node_freqs(qmode, &mut kappa[..n_axes]);
                    let flat = mmode * micro.len() + qmode;
                    let mut any = false;
                    for c in 0..d {
                        if w_spec.coeffs[flat * d + c].norm() > 0.0 {
                            any = true;
                        }
                    }
                    if !any {
                        continue;
                    }
                    // Nyquist splitting: both the macro and micro component of a
                    // mode can sit at its band edge
                    let mut target = [0i64; 3];
                    let mut nyq: [Option<i64>; 3] = [None; 3];
                    let mut scale = [1i64; 3];
                    for a in 0..n_axes {
                        let mm = mg.dims()[a] as i64;
                        let mmic = micro.dims()[a] as i64;
                        let x_nyq = omega[a] == -mm / 2;
                        let y_nyq = kappa[a] == -mmic / 2;
                        // a doubly-Nyquist axis would need a 4-way split; the
                        // halves below cover the single-edge cases, and both
                        // edges together fall back to the plain shift
                        if y_nyq && !x_nyq {
                            target[a] = omega[a];
                            nyq[a] = Some(mmic / 2);
                            scale[a] = k as i64;
                        } else if x_nyq && !y_nyq {
                            target[a] = k as i64 * kappa[a];
                            nyq[a] = Some(mm / 2);
                            scale[a] = 1;
                        } else {
                            target[a] = omega[a] + k as i64 * kappa[a];
                        }
                    }
                    // the Nyquist split shifts by the non-split part; fold the
                    // remaining base frequency in
                    for c in 0..d {
                        let coeff = w_spec.coeffs[flat * d + c];
                        if coeff.norm() == 0.0 {
                            continue;
                        }
                        scatter_with_base(&mut out, &target[..n_axes], &nyq[..n_axes], &scale[..n_axes], coeff, c);
                    }
                }
            }
            Ok(crate::spectral::inverse_transform_unchecked(&out).0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceBundle {
        eps_inv: ks,
        fields,
        mean,
    })
}

fn scatter_with_base(
    out: &mut Spectrum,
    base: &[i64],
    nyq: &[Option<i64>],
    scale: &[i64],
    coeff: Complex64,
    component: usize,
) {
    let n_axes = base.len();
    let mut combos: Vec<([i64; 3], f64)> = vec![([0; 3], 1.0)];
    for a in 0..n_axes {
        match nyq[a] {
            None => {
                for c in combos.iter_mut() {
                    c.0[a] = base[a];
                }
            }
            Some(half) => {
                let mut next = Vec::with_capacity(combos.len() * 2);
                for (b, w) in combos.iter() {
                    let mut lo = *b;
                    lo[a] = base[a] - half * scale[a];
                    next.push((lo, w * 0.5));
                    let mut hi = *b;
                    hi[a] = base[a] + half * scale[a];
                    next.push((hi, w * 0.5));
                }
                combos = next;
            }
        }
    }
    let d = out.components();
    for (tf, w) in combos {
        let idx = out.grid().index_of_freqs(&tf[..n_axes]);
        out.coeffs_mut()[idx * d + component] += coeff * w;
    }
}

// ---------------------------------------------------------------------------
// Pairings and residuals
// ---------------------------------------------------------------------------

/// Midpoint-rule value of `integral u(x) . phi(x, x/eps) dx` with the test
/// function evaluated exactly through its trigonometric interpolant.
pub fn twoscale_pairing(u: &PeriodicField, phi: &TwoScaleField, eps_inv: usize) -> Result<f64> {
    if phi.components() != u.components() {
        return Err(Error::ShapeMismatch {
            context: "pairing needs matching component counts".into(),
        });
    }
    let spec = phi.spectrum2();
    let grid = u.grid().clone();
    let d = u.components();
    // build phi(x, x/eps) nodal values by alias-folded scatter onto u's grid
    let mut folded = Spectrum::zeros(grid.clone(), d);
    let n_axes = grid.n_axes();
    let mg = phi.macro_grid();
    let micro = phi.micro_grid();
    let mut omega = [0i64; 3];
    let mut kappa = [0i64; 3];
    let mut target = [0i64; 3];
    for mmode in 0..mg.len() {
        mg.node_freqs(mmode, &mut omega[..n_axes]);
        for qmode in 0..micro.len() {
            micro.node_freqs(qmode, &mut kappa[..n_axes]);
            for a in 0..n_axes {
                target[a] = omega[a] + eps_inv as i64 * kappa[a];
            }
            let flat = mmode * micro.len() + qmode;
            let idx = grid.index_of_freqs(&target[..n_axes]);
            for c in 0..d {
                folded.coeffs_mut()[idx * d + c] += spec.coeffs[flat * d + c];
            }
        }
    }
    let phi_eps = crate::spectral::inverse_transform_unchecked(&folded).0;
    Ok(u.dot_mean(&phi_eps))
}

/// One separable band-limited test function `f(x) g(y) e_c`, kept as a sparse
/// sum of complex exponentials `(omega, kappa, coeff)`.
#[derive(Debug, Clone)]
pub struct BankFunction {
    pub label: String,
    pub component: usize,
    pub terms: Vec<(Vec<i64>, Vec<i64>, Complex64)>,
}

/// Pairing `(1/#nodes) sum_j u(x_j) . phi(x_j, x_j/eps)` through the
/// spectrum of `u` (exact for the nodal quadrature).
pub fn bank_pairing(u_spec: &Spectrum, eps_inv: usize, phi: &BankFunction) -> f64 {
    let grid = u_spec.grid();
    let n_axes = grid.n_axes();
    let mut acc = Complex64::new(0.0, 0.0);
    let mut target = vec![0i64; n_axes];
    for (omega, kappa, coeff) in &phi.terms {
        for a in 0..n_axes {
            target[a] = -(omega[a] + eps_inv as i64 * kappa[a]);
        }
        let idx = grid.index_of_freqs(&target);
        acc += u_spec.coeff(idx, phi.component) * coeff;
    }
    acc.re
}

/// Product-grid quadrature of `integral integral v . phi dy dx` through the
/// joint spectrum of `v`.
pub fn bank_target(v_spec: &TwoScaleSpectrum, phi: &BankFunction) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    let mut no = vec![0i64; v_spec.macro_grid().n_axes()];
    let mut nk = vec![0i64; v_spec.micro_grid().n_axes()];
    for (omega, kappa, coeff) in &phi.terms {
        for a in 0..no.len() {
            no[a] = -omega[a];
            nk[a] = -kappa[a];
        }
        acc += v_spec.coeff(&no, &nk, phi.component) * coeff;
    }
    acc.re
}

/// All separable products of Fourier modes with `|lambda| <= radius`
/// (Euclidean) in both variables, for every component: the reproducible
/// weak-topology surrogate.
pub fn default_test_bank(n_axes: usize, components: usize, radius: i64) -> Vec<BankFunction> {
    // real mode basis in one variable: constant, cos, sin per canonical mode
    type RealMode = (String, Vec<(Vec<i64>, Complex64)>);
    let mut modes: Vec<Vec<i64>> = Vec::new();
    let span = 2 * radius + 1;
    for flat in 0..span.pow(n_axes as u32) {
        let mut rem = flat;
        let mut v = vec![0i64; n_axes];
        for slot in v.iter_mut() {
            *slot = rem % span - radius;
            rem /= span;
        }
        if v.iter().map(|&c| c * c).sum::<i64>() <= radius * radius {
            modes.push(v);
        }
    }
    let canonical = |v: &Vec<i64>| -> bool { v.iter().copied().find(|&c| c != 0).unwrap_or(0) > 0 };
    let mut basis: Vec<RealMode> = vec![("1".into(), vec![(vec![0i64; n_axes], Complex64::new(1.0, 0.0))])];
    for m in modes.iter().filter(|m| canonical(m)) {
        let neg: Vec<i64> = m.iter().map(|&c| -c).collect();
        basis.push((
            format!("cos{m:?}"),
            vec![
                (m.clone(), Complex64::new(0.5, 0.0)),
                (neg.clone(), Complex64::new(0.5, 0.0)),
            ],
        ));
        basis.push((
            format!("sin{m:?}"),
            vec![
                (m.clone(), Complex64::new(0.0, -0.5)),
                (neg, Complex64::new(0.0, 0.5)),
            ],
        ));
    }
    let mut bank = Vec::new();
    for (lx, tx) in &basis {
        for (ly, ty) in &basis {
            for c in 0..components {
                let mut terms = Vec::with_capacity(tx.len() * ty.len());
                for (o, co) in tx {
                    for (k, ck) in ty {
                        terms.push((o.clone(), k.clone(), co * ck));
                    }
                }
                bank.push(BankFunction {
                    label: format!("{lx}*{ly}*e{}", c + 1),
                    component: c,
                    terms,
                });
            }
        }
    }
    bank
}

/// Per-epsilon diagnostics of a bundle against its limit.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResidualRow {
    pub eps: f64,
    /// max over the bank of the pairing gap
    pub weak_gap: f64,
    /// `||T_eps u_eps - v||_{L^2(product)}`
    pub strong_gap: f64,
}

/// Weak and strong two-scale residual trends over a bundle.
pub fn twoscale_residual(
    bundle: &SequenceBundle,
    v: &TwoScaleField,
    bank: &[BankFunction],
) -> Result<Vec<ResidualRow>> {
    let v_spec = v.spectrum2();
    let targets: Vec<f64> = bank.iter().map(|phi| bank_target(&v_spec, phi)).collect();
    bundle
        .eps_inv
        .iter()
        .zip(&bundle.fields)
        .map(|(&k, u)| {
            let u_spec = u.spectrum();
            let weak_gap = bank
                .iter()
                .zip(&targets)
                .map(|(phi, t)| (bank_pairing(u_spec, k, phi) - t).abs())
                .fold(0.0f64, f64::max);
            let strong_gap = strong_unfold_gap(u, k, v)?;
            Ok(ResidualRow {
                eps: 1.0 / k as f64,
                weak_gap,
                strong_gap,
            })
        })
        .collect()
}

/// `||T_eps u - v||_{L^2(product)}`, with the x-quadrature on a grid aligned
/// to both the epsilon-cells and `v`'s macro grid.
pub fn strong_unfold_gap(u: &PeriodicField, eps_inv: usize, v: &TwoScaleField) -> Result<f64> {
    let n_axes = u.grid().n_axes();
    let micro = v.micro_grid().clone();
    let micro_len = micro.len();
    let d = u.components();
    // common x-grid: lcm of eps-cells and v's macro dims
    let mut x_dims = Vec::with_capacity(n_axes);
    for a in 0..n_axes {
        let m = v.macro_grid().dims()[a];
        x_dims.push(lcm(eps_inv, m));
    }
    let x_grid = Grid::new(&x_dims)?;
    // u sampled at (cell + q/m)/k: nodes of the (k * micro) grid
    let sample_dims: Vec<usize> = micro.dims().iter().map(|&m| m * eps_inv).collect();
    let u_fine = resample(u, &sample_dims)?;
    let fine_grid = u_fine.grid().clone();
    // v resampled along macro axes to the common x grid, per micro node
    let mut v_res = vec![0.0f64; x_grid.len() * micro_len * d];
    for q in 0..micro_len {
        let mut macro_vals = vec![0.0f64; v.macro_grid().len() * d];
        for k in 0..v.macro_grid().len() {
            let sl = v.micro_slice(k);
            macro_vals[k * d..(k + 1) * d].copy_from_slice(&sl[q * d..(q + 1) * d]);
        }
        let mf = PeriodicField::from_values(v.macro_grid().clone(), d, macro_vals)?;
        let mr = resample(&mf, &x_dims)?;
        for j in 0..x_grid.len() {
            for c in 0..d {
                v_res[(j * micro_len + q) * d + c] = mr.values()[j * d + c];
            }
        }
    }
    let mut acc = 0.0f64;
    let mut xm = [0usize; 3];
    let mut ym = [0usize; 3];
    let mut sm = [0usize; 3];
    for j in 0..x_grid.len() {
        x_grid.multi_index(j, &mut xm[..n_axes]);
        let mut cell = [0usize; 3];
        for a in 0..n_axes {
            cell[a] = xm[a] * eps_inv / x_dims[a];
        }
        for q in 0..micro_len {
            micro.multi_index(q, &mut ym[..n_axes]);
            for a in 0..n_axes {
                sm[a] = cell[a] * micro.dims()[a] + ym[a];
            }
            let src = fine_grid.lin_index(&sm[..n_axes]);
            for c in 0..d {
                let diff = u_fine.values()[src * d + c] - v_res[(j * micro_len + q) * d + c];
                acc += diff * diff;
            }
        }
    }
    Ok((acc / (x_grid.len() * micro_len) as f64).sqrt())
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            let t = a % b;
            a = b;
            b = t;
        }
        a
    }
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{self, lp_norm};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn unfold_formula_point_example() {
        // u(x) = x on an 8-point grid; eps = 1/2, x = 0.3, y = 0.25:
        // floor(x/eps) = 0, sample = 0.5 * 0.25 = 0.125, a grid node
        let grid = Grid::new(&[8]).unwrap();
        let u = PeriodicField::from_fn(grid, 1, |x, out| out[0] = x[0]);
        let v = unfold_at(&u, 0.5, &[0.3], &[0.25]);
        assert_relative_eq!(v[0], 0.125, epsilon = 1e-14);
    }

    #[test]
    fn unfold_of_constant_is_constant() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let u = PeriodicField::from_fn(grid, 1, |_, out| out[0] = 4.2);
        let t = unfold(&u, 4, None).unwrap();
        assert!(t.values().iter().all(|&v| (v - 4.2).abs() < 1e-12));
    }

    #[test]
    fn unfolding_is_an_isometry_on_aligned_grids() {
        let grid = Grid::new(&[32, 32]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // arbitrary nodal values: the aligned unfolding is a rearrangement
        let u = PeriodicField::from_fn(grid, 2, |_, out| {
            use rand::Rng;
            out.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        });
        let norm_u = lp_norm(&u, 2.0).unwrap();
        for k in [2usize, 4, 8] {
            let t = unfold(&u, k, None).unwrap();
            assert_eq!(t.micro_grid().dims(), &[32 / k, 32 / k]);
            let rel = (t.product_l2() - norm_u).abs() / norm_u;
            assert!(rel <= 1e-12, "k={k}: relative gap {rel}");
        }
    }

    #[test]
    fn unfolding_is_linear() {
        let grid = Grid::new(&[16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = spectral::random_band_limited(&grid, 1, 4, 1.0, &mut rng);
        let b = spectral::random_band_limited(&grid, 1, 4, 1.0, &mut rng);
        let combo = a.scale(2.0).add_scaled(&b, -3.0).unwrap();
        let t_combo = unfold(&combo, 4, None).unwrap();
        let ta = unfold(&a, 4, None).unwrap();
        let tb = unfold(&b, 4, None).unwrap();
        for (i, v) in t_combo.values().iter().enumerate() {
            assert_relative_eq!(*v, 2.0 * ta.values()[i] - 3.0 * tb.values()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn incompatible_epsilon_is_rejected() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let u = PeriodicField::zeros(grid, 1);
        assert!(matches!(
            unfold(&u, 3, None),
            Err(Error::IncompatibleEpsilon { .. })
        ));
    }

    #[test]
    fn unfold_convergence_trends() {
        let grid = Grid::new(&[64]).unwrap();
        let constant = PeriodicField::from_fn(grid.clone(), 1, |_, out| out[0] = 1.0);
        for (_, v) in unfold_convergence(&constant, &[2, 4, 8], None).unwrap() {
            assert!(v < 1e-13);
        }
        let s = PeriodicField::from_fn(grid.clone(), 1, |x, out| {
            out[0] = (2.0 * PI * x[0]).sin()
        });
        let rows = unfold_convergence(&s, &[2, 4, 8, 16, 32], None).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].1 < w[0].1);
        }
        // roughly linear in eps: ratio of successive errors near 1/2
        let r = rows[4].1 / rows[3].1;
        assert!(r > 0.3 && r < 0.7, "ratio {r}");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rough = spectral::random_band_limited(&grid, 1, 8, 1.0, &mut rng);
        let rows = unfold_convergence(&rough, &[2, 8, 32], None).unwrap();
        assert!(rows[2].1 < rows[0].1);
    }

    #[test]
    fn pairing_of_pure_oscillation() {
        // u(x) = sin(2 pi x1/eps), phi = sin(2 pi y1): pairing -> 1/2
        let grid = Grid::new(&[64, 8]).unwrap();
        let k = 8usize;
        let u = PeriodicField::from_fn(grid, 1, |x, out| {
            out[0] = (2.0 * PI * x[0] * k as f64).sin()
        });
        let phi = TwoScaleField::from_fn(
            Grid::new(&[4, 4]).unwrap(),
            Grid::new(&[8, 8]).unwrap(),
            1,
            |_, y, out| out[0] = (2.0 * PI * y[0]).sin(),
        );
        let p = twoscale_pairing(&u, &phi, k).unwrap();
        assert_relative_eq!(p, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn pairing_with_y_free_test_function_is_plain_pairing() {
        let grid = Grid::new(&[32, 32]).unwrap();
        let u = PeriodicField::from_fn(grid.clone(), 2, |x, out| {
            out[0] = (2.0 * PI * x[0]).cos();
            out[1] = x[1];
        });
        let phi = TwoScaleField::from_fn(
            Grid::new(&[16, 16]).unwrap(),
            Grid::new(&[4, 4]).unwrap(),
            2,
            |x, _, out| {
                out[0] = (2.0 * PI * x[0]).cos();
                out[1] = 0.0;
            },
        );
        let p = twoscale_pairing(&u, &phi, 4).unwrap();
        // plain L2 pairing of cos with itself = 1/2
        assert_relative_eq!(p, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn bank_is_reproducible_and_separable() {
        let bank = default_test_bank(2, 2, 2);
        // 13 euclidean modes -> 1 + 2*6 = 13 real functions per slot
        assert_eq!(bank.len(), 13 * 13 * 2);
        assert!(bank.iter().all(|b| b.terms.len() <= 4));
    }
}
