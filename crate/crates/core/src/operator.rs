//! The variable-coefficient first-order operator: symbol evaluation,
//! constant-rank verification, and the pointwise projector pair onto and
//! against the symbol kernel.

use crate::error::Error;
use crate::expr::{parse, Bindings, Expr, Program};
use crate::spectral::{
    forward_transform, inverse_transform_unchecked, Grid, PeriodicField, Spectrum,
};
use crate::Result;
use nalgebra::DMatrix;
use std::sync::OnceLock;

/// Relative singular-value cutoff for the numerical rank.
pub const RANK_CUTOFF: f64 = 1e-8;

/// One coefficient matrix `A^i(x)` given entrywise as expressions in `x`.
#[derive(Debug, Clone)]
pub struct CoeffMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
    programs: Vec<Program>,
}

impl CoeffMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<Expr>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "coefficient matrix needs {} entries, got {}",
                    rows * cols,
                    entries.len()
                ),
            });
        }
        let programs = entries.iter().map(Expr::compile).collect();
        Ok(CoeffMatrix {
            rows,
            cols,
            entries,
            programs,
        })
    }

    pub fn from_texts(rows: usize, cols: usize, texts: &[&str]) -> Result<Self> {
        let entries = texts.iter().map(|t| parse(t)).collect::<Result<Vec<_>>>()?;
        Self::new(rows, cols, entries)
    }

    pub fn constant(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&v| Expr::Num(v)).collect())
    }

    pub fn entries(&self) -> &[Expr] {
        &self.entries
    }

    /// Evaluate at `x` (coordinates reduced to `[0,1)` per axis, which makes
    /// every coefficient map periodic by construction).
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut xw = [0.0f64; 3];
        for (i, &v) in x.iter().enumerate() {
            xw[i] = v.rem_euclid(1.0);
        }
        let env = Bindings {
            x: &xw[..x.len()],
            y: &[],
            xi: &[],
        };
        DMatrix::from_fn(self.rows, self.cols, |r, c| {
            self.programs[r * self.cols + c].eval_fast(env)
        })
    }
}

/// The operator `sum_i A^i(x) d/dx_i` acting on `d`-component fields with
/// values in `R^l`.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    n_space: usize,
    d: usize,
    l: usize,
    coeffs: Vec<CoeffMatrix>,
    declared_rank: Option<usize>,
    reference_rank: OnceLock<usize>,
}

/// Outcome of a constant-rank sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankReport {
    pub rank: usize,
    pub declared_rank: Option<usize>,
    pub declared_mismatch: bool,
    pub x_samples: usize,
    pub lambda_samples: usize,
}

struct UnitDecomposition {
    projector: DMatrix<f64>,
    pseudo: DMatrix<f64>,
    rank: usize,
    pseudo_norm: f64,
}

fn decompose_unit_symbol(a: &DMatrix<f64>) -> UnitDecomposition {
    let d = a.ncols();
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let sigma = &svd.singular_values;
    let smax = sigma.iter().cloned().fold(0.0f64, f64::max);
    let cut = RANK_CUTOFF * smax;
    let rank = sigma.iter().filter(|&&s| s > cut).count();
    let mut projector = DMatrix::identity(d, d);
    let mut pseudo = DMatrix::zeros(d, a.nrows());
    let mut pseudo_norm = 0.0f64;
    for i in 0..rank {
        let vi = v_t.row(i).transpose(); // d-vector
        let ui = u.column(i);
        projector -= &vi * vi.transpose();
        pseudo += &vi * ui.transpose() / sigma[i];
        pseudo_norm = pseudo_norm.max(1.0 / sigma[i]);
    }
    UnitDecomposition {
        projector,
        pseudo,
        rank,
        pseudo_norm,
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl OperatorSpec {
    pub fn new(
        n_space: usize,
        d: usize,
        l: usize,
        coeffs: Vec<CoeffMatrix>,
        declared_rank: Option<usize>,
    ) -> Result<Self> {
        if coeffs.len() != n_space {
            return Err(Error::ShapeMismatch {
                context: format!("need {} coefficient matrices, got {}", n_space, coeffs.len()),
            });
        }
        for m in &coeffs {
            if m.rows != l || m.cols != d {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "coefficient matrix is {}x{}, operator wants {}x{}",
                        m.rows, m.cols, l, d
                    ),
                });
            }
        }
        Ok(OperatorSpec {
            n_space,
            d,
            l,
            coeffs,
            declared_rank,
            reference_rank: OnceLock::new(),
        })
    }

    /// Smooth perturbation of the divergence on `R^2`: `a(x) d1 u1 + d2 u2`.
    pub fn divergence_perturbed(a: &str) -> Result<Self> {
        let a1 = CoeffMatrix::from_texts(1, 2, &[a, "0"])?;
        let a2 = CoeffMatrix::from_texts(1, 2, &["0", "1"])?;
        OperatorSpec::new(2, 2, 1, vec![a1, a2], Some(1))
    }

    /// Smooth perturbation of the curl on `R^2` with `a2 == 1`:
    /// `A^i_{(j,k),q} = a_i delta_{ij} delta_{qk} - a_i delta_{ik} delta_{qj}`,
    /// rows ordered `(1,1),(1,2),(2,1),(2,2)`.
    pub fn curl_perturbed(a1: &str, declared_rank: Option<usize>) -> Result<Self> {
        let zero = "0";
        let neg_a1 = format!("-({a1})");
        let m1 = CoeffMatrix::from_texts(4, 2, &[zero, zero, zero, a1, zero, &neg_a1, zero, zero])?;
        let m2 = CoeffMatrix::from_texts(4, 2, &[zero, zero, "-1", zero, "1", zero, zero, zero])?;
        OperatorSpec::new(2, 2, 4, vec![m1, m2], declared_rank)
    }

    /// `M(x) A_c` with a scalar multiplier `m(x)` and constant base matrices.
    pub fn scaled_constant(
        n_space: usize,
        d: usize,
        l: usize,
        multiplier: &str,
        base: &[Vec<f64>],
    ) -> Result<Self> {
        let m_expr = parse(multiplier)?;
        let mut coeffs = Vec::with_capacity(n_space);
        for mat in base {
            let entries = mat
                .iter()
                .map(|&v| {
                    if v == 0.0 {
                        Expr::Num(0.0)
                    } else {
                        Expr::Bin(
                            crate::expr::BinOp::Mul,
                            Box::new(m_expr.clone()),
                            Box::new(Expr::Num(v)),
                        )
                    }
                })
                .collect();
            coeffs.push(CoeffMatrix::new(l, d, entries)?);
        }
        OperatorSpec::new(n_space, d, l, coeffs, None)
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn declared_rank(&self) -> Option<usize> {
        self.declared_rank
    }

    /// Coefficient matrices evaluated at `x`.
    pub fn coeff_at(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        self.coeffs.iter().map(|c| c.eval(x)).collect()
    }

    /// The symbol `A(x, lambda) = sum_i A^i(x) lambda_i`; exact linear
    /// combination, errors on `lambda = 0`.
    pub fn symbol(&self, x: &[f64], lambda: &[f64]) -> Result<DMatrix<f64>> {
        if norm2(lambda) == 0.0 {
            return Err(Error::ZeroFrequency);
        }
        let mats = self.coeff_at(x);
        let mut sym = DMatrix::zeros(self.l, self.d);
        for (i, m) in mats.iter().enumerate() {
            sym += m * lambda[i];
        }
        Ok(sym)
    }

    /// Reference rank, established on the first decomposition and enforced
    /// afterwards.
    pub fn reference_rank(&self) -> Option<usize> {
        self.reference_rank.get().copied()
    }

    fn decompose_checked(&self, x: &[f64], lambda: &[f64]) -> Result<UnitDecomposition> {
        let n = norm2(lambda);
        if n == 0.0 {
            return Err(Error::ZeroFrequency);
        }
        let unit: Vec<f64> = lambda.iter().map(|&v| v / n).collect();
        let sym = self.symbol(x, &unit)?;
        let dec = decompose_unit_symbol(&sym);
        let reference = *self.reference_rank.get_or_init(|| dec.rank);
        if dec.rank != reference {
            return Err(Error::RankDeficiencyDrift {
                x: x.to_vec(),
                lambda: lambda.to_vec(),
                observed: dec.rank,
                reference,
            });
        }
        Ok(dec)
    }

    /// Orthogonal projector onto `ker A(x, lambda)`; 0-homogeneous in
    /// `lambda` by construction (the direction is normalized first).
    pub fn kernel_projector(&self, x: &[f64], lambda: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.decompose_checked(x, lambda)?.projector)
    }

    /// Moore-Penrose style inverse `Q(x, lambda)` with `Q A = I - P` and
    /// `Q = 0` on the orthogonal complement of the range; (-1)-homogeneous.
    pub fn pseudo_q(&self, x: &[f64], lambda: &[f64]) -> Result<DMatrix<f64>> {
        let n = norm2(lambda);
        let dec = self.decompose_checked(x, lambda)?;
        Ok(dec.pseudo / n)
    }

    /// Verify the constant-rank condition over the given samples. Returns the
    /// common rank or the offending sample.
    pub fn check_constant_rank(
        &self,
        x_samples: &[Vec<f64>],
        lambda_samples: &[Vec<f64>],
    ) -> Result<RankReport> {
        assert!(!x_samples.is_empty() && !lambda_samples.is_empty());
        let mut reference = self.reference_rank.get().copied();
        for x in x_samples {
            for lam in lambda_samples {
                let n = norm2(lam);
                if n == 0.0 {
                    continue;
                }
                let unit: Vec<f64> = lam.iter().map(|&v| v / n).collect();
                let sym = self.symbol(x, &unit)?;
                let rank = decompose_unit_symbol(&sym).rank;
                match reference {
                    None => reference = Some(rank),
                    Some(r) if r != rank => {
                        return Err(Error::ConstantRankViolation {
                            x: x.clone(),
                            lambda: lam.clone(),
                            observed: rank,
                            reference: r,
                        });
                    }
                    _ => {}
                }
            }
        }
        let rank = reference.unwrap();
        let _ = self.reference_rank.set(rank);
        Ok(RankReport {
            rank,
            declared_rank: self.declared_rank,
            declared_mismatch: self.declared_rank.is_some_and(|r| r != rank),
            x_samples: x_samples.len(),
            lambda_samples: lambda_samples.len(),
        })
    }

    /// Projector tables over every nonzero mode of `grid`, frozen at `x`.
    pub fn projector_table(&self, x: &[f64], grid: &Grid) -> Result<ProjectorTable> {
        let d = self.d;
        let l = self.l;
        let n_modes = grid.len();
        let n_axes = grid.n_axes();
        let mats = self.coeff_at(x);
        let mut p = vec![0.0f64; n_modes * d * d];
        let mut q = vec![0.0f64; n_modes * d * l];
        let mut deficiency = 0.0f64;
        let mut freqs = [0i64; 3];
        let mut neg = [0i64; 3];
        let mut sym = DMatrix::zeros(l, d);
        for mode in 1..n_modes {
            grid.node_freqs(mode, &mut freqs[..n_axes]);
            // Modes with a Nyquist axis component have no representable
            // conjugate partner: the projection removes them (zero tables),
            // which keeps the projected field real and exactly feasible.
            let mut nyquist = false;
            for a in 0..n_axes {
                if freqs[a] == -(grid.dims()[a] as i64) / 2 {
                    nyquist = true;
                }
                neg[a] = -freqs[a];
            }
            if nyquist {
                continue;
            }
            // conjugate partner -lambda was filled first when it precedes us
            let partner = grid.index_of_freqs(&neg[..n_axes]);
            if partner != 0 && partner < mode {
                // P(x,-l) = P(x,l); Q(x,-l) = -Q(x,l)
                let (pa, pb) = (partner * d * d, mode * d * d);
                for k in 0..d * d {
                    p[pb + k] = p[pa + k];
                }
                let (qa, qb) = (partner * d * l, mode * d * l);
                for k in 0..d * l {
                    q[qb + k] = -q[qa + k];
                }
                continue;
            }
            let norm: f64 = freqs[..n_axes]
                .iter()
                .map(|&f| (f * f) as f64)
                .sum::<f64>()
                .sqrt();
            sym.fill(0.0);
            for (i, m) in mats.iter().enumerate() {
                sym += m * (freqs[i] as f64 / norm);
            }
            let dec = decompose_unit_symbol(&sym);
            let reference = *self.reference_rank.get_or_init(|| dec.rank);
            if dec.rank != reference {
                return Err(Error::RankDeficiencyDrift {
                    x: x.to_vec(),
                    lambda: freqs[..n_axes].iter().map(|&f| f as f64).collect(),
                    observed: dec.rank,
                    reference,
                });
            }
            deficiency = deficiency.max(dec.pseudo_norm);
            let pb = mode * d * d;
            for r in 0..d {
                for c in 0..d {
                    p[pb + r * d + c] = dec.projector[(r, c)];
                }
            }
            let qb = mode * d * l;
            for r in 0..d {
                for c in 0..l {
                    q[qb + r * l + c] = dec.pseudo[(r, c)] / norm;
                }
            }
        }
        Ok(ProjectorTable {
            grid: grid.clone(),
            x: x.to_vec(),
            d,
            l,
            p,
            q,
            rank: self.reference_rank.get().copied().unwrap_or(0),
            deficiency,
        })
    }

    /// `A_y(x) w`: frozen-`x` operator applied in the micro variable by
    /// spectral differentiation, `2 pi i A(x, lambda) w^(lambda)` per mode.
    pub fn apply_ay(&self, x: &[f64], w: &PeriodicField) -> Result<PeriodicField> {
        if w.components() != self.d {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "field has {} components, operator wants {}",
                    w.components(),
                    self.d
                ),
            });
        }
        let grid = w.grid().clone();
        let n_axes = grid.n_axes();
        let mats = self.coeff_at(x);
        let spec = w.spectrum();
        let mut out = Spectrum::zeros(grid.clone(), self.l);
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut freqs = [0i64; 3];
        for mode in 1..grid.len() {
            grid.node_freqs(mode, &mut freqs[..n_axes]);
            for r in 0..self.l {
                let mut acc = num_complex::Complex64::new(0.0, 0.0);
                for c in 0..self.d {
                    let mut a_rc = 0.0;
                    for (i, m) in mats.iter().enumerate() {
                        a_rc += m[(r, c)] * freqs[i] as f64;
                    }
                    acc += spec.coeff(mode, c) * a_rc;
                }
                // multiply by 2 pi i
                out.coeffs_mut()[mode * self.l + r] =
                    num_complex::Complex64::new(-two_pi * acc.im, two_pi * acc.re);
            }
        }
        Ok(inverse_transform_unchecked(&out).0)
    }

    /// `A u` on the macro grid: derivatives spectrally, coefficients
    /// pointwise in physical space.
    pub fn apply_a_macro(&self, u: &PeriodicField) -> Result<PeriodicField> {
        let table = self.coefficient_table(u.grid());
        self.apply_a_macro_with(&table, u)
    }

    /// Coefficient samples on a grid: per node, `N` matrices of size `l x d`,
    /// stored node-major.
    pub fn coefficient_table(&self, grid: &Grid) -> CoeffTable {
        let n_axes = grid.n_axes();
        let stride = self.n_space * self.l * self.d;
        let mut values = vec![0.0f64; grid.len() * stride];
        let mut coords = [0.0f64; 3];
        for node in 0..grid.len() {
            grid.node_coords(node, &mut coords[..n_axes]);
            let env = Bindings {
                x: &coords[..n_axes],
                y: &[],
                xi: &[],
            };
            let base = node * stride;
            for (i, cm) in self.coeffs.iter().enumerate() {
                for k in 0..self.l * self.d {
                    values[base + i * self.l * self.d + k] = cm.programs[k].eval_fast(env);
                }
            }
        }
        CoeffTable {
            n_space: self.n_space,
            d: self.d,
            l: self.l,
            values,
        }
    }

    /// As [`apply_a_macro`](Self::apply_a_macro) with a precomputed
    /// coefficient table (hot loops over the same grid).
    pub fn apply_a_macro_with(
        &self,
        table: &CoeffTable,
        u: &PeriodicField,
    ) -> Result<PeriodicField> {
        if u.components() != self.d {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "field has {} components, operator wants {}",
                    u.components(),
                    self.d
                ),
            });
        }
        let grid = u.grid().clone();
        let n_axes = grid.n_axes();
        let n = grid.len();
        let spec = forward_transform(u);
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut out_values = vec![0.0f64; n * self.l];
        let mut freqs = [0i64; 3];
        let stride = self.n_space * self.l * self.d;
        for axis in 0..n_axes {
            // spectral d/dx_axis
            let mut der = Spectrum::zeros(grid.clone(), self.d);
            for mode in 0..n {
                grid.node_freqs(mode, &mut freqs[..n_axes]);
                let f = two_pi * freqs[axis] as f64;
                for c in 0..self.d {
                    let v = spec.coeff(mode, c);
                    der.coeffs_mut()[mode * self.d + c] =
                        num_complex::Complex64::new(-f * v.im, f * v.re);
                }
            }
            let der_field = inverse_transform_unchecked(&der).0;
            for node in 0..n {
                let base = node * stride + axis * self.l * self.d;
                let dv = der_field.node(node);
                for r in 0..self.l {
                    let mut acc = 0.0;
                    for c in 0..self.d {
                        acc += table.values[base + r * self.d + c] * dv[c];
                    }
                    out_values[node * self.l + r] += acc;
                }
            }
        }
        PeriodicField::from_values(grid, self.l, out_values)
    }

    /// Deterministic default sample sets for rank sweeps: quasi-random
    /// interior points, and normalized lattice directions padded with
    /// quasi-random unit vectors.
    pub fn default_rank_samples(
        &self,
        n_x: usize,
        n_lambda: usize,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.n_space;
        let mut xs = Vec::with_capacity(n_x);
        for k in 0..n_x {
            let mut x = vec![0.0; n];
            for (a, slot) in x.iter_mut().enumerate() {
                *slot = ((k as f64 + 1.0) * (0.381966 + 0.236068 * a as f64)).rem_euclid(1.0);
            }
            xs.push(x);
        }
        let mut lams: Vec<Vec<f64>> = Vec::with_capacity(n_lambda);
        'outer: for radius in 1..=3i64 {
            for mode in 0..(2 * radius + 1).pow(n as u32) {
                let mut rem = mode;
                let mut v = vec![0.0; n];
                let mut nonzero = false;
                for slot in v.iter_mut() {
                    let c = (rem % (2 * radius + 1)) - radius;
                    rem /= 2 * radius + 1;
                    *slot = c as f64;
                    nonzero |= c != 0;
                }
                if nonzero {
                    let nn = norm2(&v);
                    v.iter_mut().for_each(|c| *c /= nn);
                    if !lams
                        .iter()
                        .any(|w| w.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12))
                    {
                        lams.push(v);
                        if lams.len() >= n_lambda {
                            break 'outer;
                        }
                    }
                }
            }
        }
        let mut k = 0u64;
        while lams.len() < n_lambda {
            let mut v = vec![0.0; n];
            for (a, slot) in v.iter_mut().enumerate() {
                let t = ((k as f64 + 1.0) * (0.754877 + 0.569840 * a as f64)).rem_euclid(1.0);
                *slot = (2.0 * std::f64::consts::PI * t).sin();
            }
            let nn = norm2(&v);
            if nn > 1e-6 {
                v.iter_mut().for_each(|c| *c /= nn);
                lams.push(v);
            }
            k += 1;
        }
        (xs, lams)
    }
}

/// Coefficient matrices sampled on a grid.
#[derive(Debug, Clone)]
pub struct CoeffTable {
    pub n_space: usize,
    pub d: usize,
    pub l: usize,
    values: Vec<f64>,
}

/// Per-mode kernel projector and pseudo-inverse tables at a frozen `x`.
#[derive(Debug, Clone)]
pub struct ProjectorTable {
    grid: Grid,
    x: Vec<f64>,
    d: usize,
    l: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    rank: usize,
    deficiency: f64,
}

impl ProjectorTable {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn components(&self) -> usize {
        self.d
    }

    /// `sup` over lattice directions of `||Q(x, lambda/|lambda|)||`.
    pub fn deficiency(&self) -> f64 {
        self.deficiency
    }

    /// `P(x, lambda)` for the mode at linear index `mode` (zero matrix at 0),
    /// row-major `d x d`.
    pub fn p_at(&self, mode: usize) -> &[f64] {
        &self.p[mode * self.d * self.d..(mode + 1) * self.d * self.d]
    }

    /// `Q(x, lambda)` for the mode at linear index `mode`, row-major `d x l`.
    pub fn q_at(&self, mode: usize) -> &[f64] {
        &self.q[mode * self.d * self.l..(mode + 1) * self.d * self.l]
    }

    /// Apply `P(x, .)` modewise in place, removing the zero mode.
    pub fn apply_p(&self, spec: &mut Spectrum) {
        let d = self.d;
        debug_assert_eq!(spec.components(), d);
        debug_assert_eq!(spec.grid(), &self.grid);
        let n_modes = self.grid.len();
        let coeffs = spec.coeffs_mut();
        let mut tmp = [num_complex::Complex64::new(0.0, 0.0); 8];
        for c in coeffs[..d].iter_mut() {
            *c = num_complex::Complex64::new(0.0, 0.0);
        }
        for mode in 1..n_modes {
            let pm = &self.p[mode * d * d..(mode + 1) * d * d];
            let block = &mut coeffs[mode * d..(mode + 1) * d];
            for (r, slot) in tmp[..d].iter_mut().enumerate() {
                let mut acc = num_complex::Complex64::new(0.0, 0.0);
                for c in 0..d {
                    acc += block[c] * pm[r * d + c];
                }
                *slot = acc;
            }
            block.copy_from_slice(&tmp[..d]);
        }
    }
}
