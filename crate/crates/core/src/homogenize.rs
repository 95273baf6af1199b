//! Cell problems at oscillation scale `n`, the homogenized density and
//! functional, membership tests for the two-scale limit classes, and the
//! empirical relaxation diagnostic.

use crate::envelope::{minimize_over_constraint, EnvelopeResult, IntegrandSpec, SolverOptions};
use crate::error::Error;
use crate::operator::OperatorSpec;
use crate::spectral::{hneg_norm, sample_with_offset, tile, Grid, PeriodicField};
use crate::twoscale::{generate_sequence, TwoScaleField};
use crate::Result;
use rayon::prelude::*;

/// Per-scale cell infima along the dyadic chain.
#[derive(Debug, Clone)]
pub struct CellTrace {
    pub n_list: Vec<usize>,
    pub values: Vec<f64>,
    pub fhom_estimate: f64,
    pub minimizers: Vec<PeriodicField>,
}

/// Two-scale limit classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldClass {
    /// macro fields with vanishing constraint (`A u = 0`)
    MacroFree,
    /// mean-zero micro fluctuations with `A_y(x) w = 0` per macro node
    MicroFluctuation,
    /// admissible two-scale limits: mean in the macro class, fluctuation in
    /// the micro class
    AFree,
}

impl FieldClass {
    pub fn tag(self) -> &'static str {
        match self {
            FieldClass::MacroFree => "U",
            FieldClass::MicroFluctuation => "W",
            FieldClass::AFree => "F",
        }
    }
}

/// Field being classified.
#[derive(Debug, Clone)]
pub enum FieldClassInput {
    Macro(PeriodicField),
    TwoScale(TwoScaleField),
}

/// Residuals of a membership test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FieldClassReport {
    pub class: String,
    /// worst per-node micro mean modulus
    pub mean_residual: f64,
    /// worst per-node `H^{-1}` proxy of the frozen-`x` constraint
    pub micro_residual: f64,
    /// `H^{-1}` proxy of the macro constraint on the mean
    pub macro_residual: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Residuals of the given field against a limit class, all in the `H^{-1}`
/// proxy (means in plain modulus). Aggregation over macro nodes is by max.
pub fn membership_check(
    op: &OperatorSpec,
    input: &FieldClassInput,
    class: FieldClass,
    tol: f64,
) -> Result<FieldClassReport> {
    let mut mean_residual = 0.0f64;
    let mut micro_residual = 0.0f64;
    let mut macro_residual = 0.0f64;
    match (class, input) {
        (FieldClass::MacroFree, FieldClassInput::Macro(u)) => {
            macro_residual = hneg_norm(&op.apply_a_macro(u)?);
        }
        (FieldClass::MicroFluctuation, FieldClassInput::TwoScale(w))
        | (FieldClass::AFree, FieldClassInput::TwoScale(w)) => {
            let (field, check_macro) = if class == FieldClass::AFree {
                (w.fluctuation(), true)
            } else {
                (w.clone(), false)
            };
            let macro_grid = field.macro_grid().clone();
            let n_axes = macro_grid.n_axes();
            let rows: Vec<(f64, f64)> = (0..macro_grid.len())
                .into_par_iter()
                .map(|k| {
                    let mut x = [0.0f64; 3];
                    macro_grid.node_coords(k, &mut x[..n_axes]);
                    let slice = field.micro_field(k);
                    let mean: f64 = slice.mean().iter().map(|m| m * m).sum::<f64>().sqrt();
                    let res = hneg_norm(&op.apply_ay(&x[..n_axes], &slice)?);
                    Ok((mean, res))
                })
                .collect::<Result<Vec<_>>>()?;
            for (m, r) in rows {
                mean_residual = mean_residual.max(m);
                micro_residual = micro_residual.max(r);
            }
            if check_macro {
                macro_residual = hneg_norm(&op.apply_a_macro(&w.mean_micro())?);
            }
        }
        _ => {
            return Err(Error::ShapeMismatch {
                context: format!("class {} expects a different field kind", class.tag()),
            })
        }
    }
    let pass = mean_residual <= tol && micro_residual <= tol && macro_residual <= tol;
    Ok(FieldClassReport {
        class: class.tag().into(),
        mean_residual,
        micro_residual,
        macro_residual,
        tol,
        pass,
    })
}

/// One cell problem: minimize the cell average of
/// `f(x, (n y) mod 1, xi + w(y))` over the constraint class at frozen `x`.
/// `n` must divide the micro grid.
pub fn cell_problem(
    op: &OperatorSpec,
    f: &IntegrandSpec,
    x: &[f64],
    xi: &[f64],
    n: usize,
    micro_dims: &[usize],
    warm_starts: &[PeriodicField],
    opts: &SolverOptions,
) -> Result<EnvelopeResult> {
    if n == 0 || micro_dims.iter().any(|&m| m % n != 0) {
        return Err(Error::GridIncompatible {
            n,
            dims: micro_dims.to_vec(),
        });
    }
    let grid = Grid::new(micro_dims)?;
    let table = op.projector_table(x, &grid)?;
    minimize_over_constraint(&table, f, xi, n, warm_starts, opts)
}

/// The homogenized density estimate: cell infima along `n = 1, 2, 4, ...`.
///
/// For `y`-dependent integrands the micro grid is refined proportionally to
/// `n`, which keeps the replicated minimizer of every divisor scale an
/// admissible start at the next scale (values can then never increase along
/// the chain); `y`-free integrands reuse the identical scale-1 computation.
pub fn fhom(
    op: &OperatorSpec,
    f: &IntegrandSpec,
    x: &[f64],
    xi: &[f64],
    n_max: usize,
    base_micro_dims: &[usize],
    opts: &SolverOptions,
) -> Result<CellTrace> {
    assert!(n_max.is_power_of_two(), "n_max must be a power of two");
    let mut n_list = Vec::new();
    let mut n = 1usize;
    while n <= n_max {
        n_list.push(n);
        n *= 2;
    }
    let mut values = Vec::with_capacity(n_list.len());
    let mut minimizers: Vec<PeriodicField> = Vec::with_capacity(n_list.len());
    for (i, &scale) in n_list.iter().enumerate() {
        let result = if !f.uses_y() {
            cell_problem(op, f, x, xi, 1, base_micro_dims, &[], opts)?
        } else {
            let dims: Vec<usize> = base_micro_dims.iter().map(|&m| m * scale).collect();
            let mut warm = Vec::new();
            if i > 0 {
                // previous scale minimizer replicated onto the finer grid
                warm.push(tile(&minimizers[i - 1], 2)?);
            }
            cell_problem(op, f, x, xi, scale, &dims, &warm, opts)?
        };
        values.push(result.value);
        minimizers.push(result.minimizer);
    }
    let fhom_estimate = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CellTrace {
        n_list,
        values,
        fhom_estimate,
        minimizers,
    })
}

/// Outcome of the homogenized functional.
#[derive(Debug, Clone)]
pub enum EhomOutcome {
    /// the macro field violates its constraint (the `+infinity` branch)
    Infeasible(FieldClassReport),
    Value {
        value: f64,
        /// nodewise homogenized density estimates on the macro grid
        nodewise: PeriodicField,
    },
}

/// The homogenized functional: infeasible off the constraint class, else the
/// macro integral of the nodewise homogenized density.
pub fn ehom(
    op: &OperatorSpec,
    f: &IntegrandSpec,
    u: &PeriodicField,
    n_max: usize,
    base_micro_dims: &[usize],
    membership_tol: f64,
    opts: &SolverOptions,
) -> Result<EhomOutcome> {
    let report = membership_check(
        op,
        &FieldClassInput::Macro(u.clone()),
        FieldClass::MacroFree,
        membership_tol,
    )?;
    if !report.pass {
        return Ok(EhomOutcome::Infeasible(report));
    }
    let macro_grid = u.grid().clone();
    let n_axes = macro_grid.n_axes();
    let values: Vec<f64> = (0..macro_grid.len())
        .into_par_iter()
        .map(|k| {
            let mut x = [0.0f64; 3];
            macro_grid.node_coords(k, &mut x[..n_axes]);
            Ok(fhom(op, f, &x[..n_axes], u.node(k), n_max, base_micro_dims, opts)?.fhom_estimate)
        })
        .collect::<Result<Vec<_>>>()?;
    let value = values.iter().sum::<f64>() / values.len() as f64;
    Ok(EhomOutcome::Value {
        value,
        nodewise: PeriodicField::from_values(macro_grid, 1, values)?,
    })
}

/// Per-epsilon entries of the relaxation diagnostic.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RelaxRow {
    pub eps: f64,
    pub energy: f64,
    pub residual: f64,
    /// largest integrand sample seen at this epsilon
    pub max_sample: f64,
}

/// Empirical check of the relaxation identity: nodewise envelope integral on
/// the left, energies of a generated admissible sequence on the right.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RelaxReport {
    pub envelope_integral: f64,
    pub rows: Vec<RelaxRow>,
    /// largest integrand sample over every epsilon
    pub max_sample: f64,
}

/// Build the minimizer two-scale field nodewise (warm-started along the
/// macro sweep so neighboring nodes select coherent minimizers), generate
/// `u_eps = u + w*(x, x/eps)`, and report per-epsilon energies and
/// constraint residuals against the envelope integral.
pub fn relaxation_check(
    op: &OperatorSpec,
    f: &IntegrandSpec,
    u: &PeriodicField,
    eps_inv_list: &[usize],
    micro_dims: &[usize],
    membership_tol: f64,
    opts: &SolverOptions,
) -> Result<RelaxReport> {
    let report = membership_check(
        op,
        &FieldClassInput::Macro(u.clone()),
        FieldClass::MacroFree,
        membership_tol,
    )?;
    if !report.pass {
        return Err(Error::Infeasible {
            residual: report.macro_residual,
            tol: membership_tol,
        });
    }
    let macro_grid = u.grid().clone();
    let micro_grid = Grid::new(micro_dims)?;
    let n_axes = macro_grid.n_axes();
    let d = u.components();

    // nodewise envelope minimizers, chained for macro coherence
    let mut values = Vec::with_capacity(macro_grid.len());
    let mut w_star = TwoScaleField::zeros(macro_grid.clone(), micro_grid.clone(), d);
    let mut prev: Option<PeriodicField> = None;
    for k in 0..macro_grid.len() {
        let mut x = [0.0f64; 3];
        macro_grid.node_coords(k, &mut x[..n_axes]);
        let table = op.projector_table(&x[..n_axes], &micro_grid)?;
        let warm: Vec<PeriodicField> = prev.iter().cloned().collect();
        // random starts seed the first node; afterwards the chain carries the
        // pattern so neighboring minimizers stay close
        let node_opts = if k == 0 {
            opts.clone()
        } else {
            SolverOptions {
                random_starts: 0,
                ..opts.clone()
            }
        };
        let res = minimize_over_constraint(&table, f, u.node(k), 1, &warm, &node_opts)?;
        values.push(res.value);
        w_star.set_micro_field(k, &res.minimizer)?;
        prev = Some(res.minimizer);
    }
    let envelope_integral = values.iter().sum::<f64>() / values.len() as f64;

    // admissible sequence from the two-scale limit u + w*
    let mut v = w_star.clone();
    for k in 0..macro_grid.len() {
        let shifted = v.micro_field(k).add_scaled(
            &PeriodicField::from_values(
                micro_grid.clone(),
                d,
                u.node(k)
                    .iter()
                    .cycle()
                    .take(micro_grid.len() * d)
                    .copied()
                    .collect::<Vec<f64>>(),
            )?,
            1.0,
        )?;
        v.set_micro_field(k, &shifted)?;
    }
    let bundle = generate_sequence(op, &v, eps_inv_list, membership_tol)?;

    let rows: Vec<RelaxRow> = bundle
        .eps_inv
        .par_iter()
        .zip(&bundle.fields)
        .map(|(&k, u_eps)| {
            let grid = u_eps.grid().clone();
            let na = grid.n_axes();
            // energy on the evaluation grid plus a half-node offset grid: the
            // union doubles the sampling rate of the oscillating integrand
            let offset: Vec<f64> = grid.dims().iter().map(|&m| 0.5 / m as f64).collect();
            let shifted = sample_with_offset(u_eps.spectrum(), &offset);
            let mut acc = 0.0f64;
            let mut max_sample = 0.0f64;
            let mut coords = [0.0f64; 3];
            for (field, delta) in [(u_eps, 0.0f64), (&shifted, 1.0)] {
                for node in 0..grid.len() {
                    grid.node_coords(node, &mut coords[..na]);
                    for (a, c) in coords[..na].iter_mut().enumerate() {
                        *c += delta * offset[a];
                    }
                    let val = f.eval(&coords[..na], &[], field.node(node));
                    acc += val;
                    max_sample = max_sample.max(val);
                }
            }
            let energy = acc / (2 * grid.len()) as f64;
            let residual = hneg_norm(&op.apply_a_macro(u_eps)?);
            Ok(RelaxRow {
                eps: 1.0 / k as f64,
                energy,
                residual,
                max_sample,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_sample = rows.iter().map(|r| r.max_sample).fold(0.0f64, f64::max);
    Ok(RelaxReport {
        envelope_integral,
        rows,
        max_sample,
    })
}

/// Dense minimization of a weighted-quadratic cell problem over a coarse
/// constrained spectral basis: kernel directions of the symbol at every mode
/// `|lambda|_inf <= band` (Nyquist excluded), assembled into normal
/// equations. Serves as the brute-force oracle for the descent path.
pub fn cell_problem_dense_oracle(
    op: &OperatorSpec,
    weight: impl Fn(&[f64]) -> f64,
    x: &[f64],
    xi: &[f64],
    n: usize,
    micro_dims: &[usize],
    band: i64,
) -> Result<f64> {
    use nalgebra::{DMatrix, DVector};
    let grid = Grid::new(micro_dims)?;
    let n_axes = grid.n_axes();
    let d = op.d();
    // weight samples at the oscillated micro argument
    let mut wvals = vec![0.0f64; grid.len()];
    let mut idx = [0usize; 3];
    let mut yarg = [0.0f64; 3];
    for node in 0..grid.len() {
        grid.multi_index(node, &mut idx[..n_axes]);
        for a in 0..n_axes {
            let m = grid.dims()[a];
            yarg[a] = ((n * idx[a]) % m) as f64 / m as f64;
        }
        wvals[node] = weight(&yarg[..n_axes]);
    }
    // basis fields: kernel directions of the symbol times cos/sin per
    // canonical mode pair
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut freqs = [0i64; 3];
    for mode in 1..grid.len() {
        grid.node_freqs(mode, &mut freqs[..n_axes]);
        let mut fine = true;
        for a in 0..n_axes {
            let m = grid.dims()[a] as i64;
            if freqs[a].abs() > band || freqs[a] == -m / 2 {
                fine = false;
            }
        }
        // canonical representative: first nonzero frequency positive
        if !fine
            || freqs[..n_axes]
                .iter()
                .copied()
                .find(|&f| f != 0)
                .unwrap_or(0)
                < 0
        {
            continue;
        }
        let lam: Vec<f64> = freqs[..n_axes].iter().map(|&f| f as f64).collect();
        let sym = op.symbol(x, &lam)?;
        let svd = sym.svd(false, true);
        let v_t = svd.v_t.as_ref().unwrap();
        let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > crate::operator::RANK_CUTOFF * smax)
            .count();
        // orthonormal kernel basis: complement of the row-space vectors
        let mut kernel: Vec<DVector<f64>> = Vec::with_capacity(d - rank);
        for j in 0..d {
            let mut v = DVector::<f64>::zeros(d);
            v[j] = 1.0;
            for i in 0..rank {
                let row = v_t.row(i).transpose();
                let proj = row.dot(&v);
                v -= row * proj;
            }
            for b in &kernel {
                let proj = b.dot(&v);
                v -= b * proj;
            }
            let nn = v.norm();
            if nn > 1e-6 {
                kernel.push(v / nn);
            }
        }
        for kb in &kernel {
            // cos and sin profiles along this mode
            for phase in 0..2 {
                let mut field = vec![0.0f64; grid.len() * d];
                for node in 0..grid.len() {
                    grid.multi_index(node, &mut idx[..n_axes]);
                    let mut theta = 0.0;
                    for a in 0..n_axes {
                        theta += freqs[a] as f64 * idx[a] as f64 / grid.dims()[a] as f64;
                    }
                    theta *= 2.0 * std::f64::consts::PI;
                    let profile = if phase == 0 { theta.cos() } else { theta.sin() };
                    for c in 0..d {
                        field[node * d + c] = kb[c] * profile;
                    }
                }
                basis.push(field);
            }
        }
    }
    let nb = basis.len();
    let glen = grid.len() as f64;
    let mut h = DMatrix::<f64>::zeros(nb, nb);
    let mut rhs = DVector::<f64>::zeros(nb);
    for a in 0..nb {
        for b in a..nb {
            let mut acc = 0.0;
            for node in 0..grid.len() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += basis[a][node * d + c] * basis[b][node * d + c];
                }
                acc += wvals[node] * dot;
            }
            h[(a, b)] = acc / glen;
            h[(b, a)] = acc / glen;
        }
        let mut acc = 0.0;
        for node in 0..grid.len() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += xi[c] * basis[a][node * d + c];
            }
            acc += wvals[node] * dot;
        }
        rhs[a] = acc / glen;
    }
    let coeffs = h
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&(-&rhs)))
        .unwrap_or_else(|| {
            h.lu().solve(&(-&rhs)).expect("normal equations solvable")
        });
    // evaluate the quadratic at the minimizer
    let mut value = 0.0;
    for node in 0..grid.len() {
        let mut mag2 = 0.0;
        for c in 0..d {
            let mut wv = xi[c];
            for (b, cb) in coeffs.iter().enumerate() {
                wv += cb * basis[b][node * d + c];
            }
            mag2 += wv * wv;
        }
        value += wvals[node] * mag2;
    }
    Ok(value / glen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::IntegrandSpec;
    use crate::projection::project_two_scale;
    use crate::spectral::random_band_limited;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn div_op(a: &str) -> OperatorSpec {
        OperatorSpec::divergence_perturbed(a).unwrap()
    }

    fn quick_opts() -> SolverOptions {
        SolverOptions {
            random_starts: 2,
            ..Default::default()
        }
    }

    #[test]
    fn y_free_integrand_gives_flat_trace_equal_to_envelope() {
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let f = IntegrandSpec::from_text("xi1^2+xi2^2", 2, 2.0, 2.0).unwrap();
        let opts = quick_opts();
        let x = [0.3, 0.6];
        let xi = [0.7, -0.2];
        let trace = fhom(&op, &f, &x, &xi, 8, &[16, 16], &opts).unwrap();
        let env = crate::envelope::qa_envelope(&op, &f, &x, &xi, &[16, 16], &opts).unwrap();
        for v in &trace.values {
            assert_relative_eq!(*v, env.value, epsilon = 1e-12);
        }
        assert_relative_eq!(trace.fhom_estimate, env.value, epsilon = 1e-12);
    }

    #[test]
    fn oscillating_weight_cell_problem() {
        // f = (2 + sin 2 pi y1)|xi|^2 under the frozen divergence constraint
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let f = IntegrandSpec::from_text(
            "(2+sin(2*pi*y1))*(xi1^2+xi2^2)",
            2,
            2.0,
            6.0,
        )
        .unwrap();
        let opts = quick_opts();
        let x = [0.3, 0.6];
        // xi = e1: no admissible first-order correction, value = 2 exactly
        let r = cell_problem(&op, &f, &x, &[1.0, 0.0], 1, &[32, 32], &[], &opts).unwrap();
        assert!(r.value <= 2.0 + 1e-10);
        assert!(r.value >= 2.0 - 1e-7);

        // xi = e2: optimal w2(y1) gives the harmonic mean of the weight
        let r = cell_problem(&op, &f, &x, &[0.0, 1.0], 1, &[32, 32], &[], &opts).unwrap();
        let grid = Grid::new(&[32, 32]).unwrap();
        let mut hm = 0.0;
        for node in 0..grid.len() {
            let mut c = [0.0; 2];
            grid.node_coords(node, &mut c);
            hm += 1.0 / (2.0 + (2.0 * PI * c[0]).sin());
        }
        let harmonic = grid.len() as f64 / hm;
        assert_relative_eq!(harmonic, 3.0f64.sqrt(), epsilon = 1e-10);
        assert!(
            (r.value - harmonic).abs() <= 2e-4 * harmonic,
            "value {} vs harmonic mean {harmonic}",
            r.value
        );
    }

    #[test]
    fn dense_oracle_agrees_with_descent() {
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let f = IntegrandSpec::from_text(
            "(2+sin(2*pi*y1))*(xi1^2+xi2^2)",
            2,
            2.0,
            6.0,
        )
        .unwrap();
        let x = [0.3, 0.6];
        let xi = [0.0, 1.0];
        let oracle = cell_problem_dense_oracle(
            &op,
            |y| 2.0 + (2.0 * PI * y[0]).sin(),
            &x,
            &xi,
            1,
            &[8, 8],
            3,
        )
        .unwrap();
        let r = cell_problem(&op, &f, &x, &xi, 1, &[8, 8], &[], &quick_opts()).unwrap();
        assert!(
            (r.value - oracle).abs() <= 0.02 * oracle.abs().max(1e-12),
            "descent {} vs oracle {oracle}",
            r.value
        );
        // and the oracle itself sits near the closed form
        assert!((oracle - 3.0f64.sqrt()).abs() < 5e-3);
    }

    #[test]
    fn dyadic_trace_is_monotone() {
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let f = IntegrandSpec::from_text(
            "(2+sin(2*pi*y1))*(xi1^2+xi2^2)",
            2,
            2.0,
            6.0,
        )
        .unwrap();
        let trace = fhom(&op, &f, &[0.3, 0.6], &[0.0, 1.0], 4, &[16, 16], &quick_opts()).unwrap();
        assert_eq!(trace.n_list, vec![1, 2, 4]);
        for w in trace.values.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trace not monotone: {:?}", trace.values);
        }
        assert_relative_eq!(trace.fhom_estimate, *trace.values.last().unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn membership_examples() {
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let macro_grid = Grid::new(&[4, 4]).unwrap();
        let micro_grid = Grid::new(&[16, 16]).unwrap();

        // projected random fluctuation lies in the micro class
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut w = TwoScaleField::zeros(macro_grid.clone(), micro_grid.clone(), 2);
        for k in 0..macro_grid.len() {
            let f = random_band_limited(&micro_grid, 2, 4, 1.0, &mut rng);
            w.set_micro_field(k, &f).unwrap();
        }
        let w = project_two_scale(&op, &w.fluctuation()).unwrap();
        let report = membership_check(
            &op,
            &FieldClassInput::TwoScale(w.clone()),
            FieldClass::MicroFluctuation,
            1e-9,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");

        // u + w with a constraint-free macro part is admissible
        let mut v = w.clone();
        for k in 0..macro_grid.len() {
            let mut x = [0.0; 2];
            macro_grid.node_coords(k, &mut x);
            let shift = PeriodicField::from_fn(micro_grid.clone(), 2, |_, out| {
                out[0] = (2.0 * PI * x[1]).sin();
                out[1] = 0.25;
            });
            let s = v.micro_field(k).add_scaled(&shift, 1.0).unwrap();
            v.set_micro_field(k, &s).unwrap();
        }
        let report = membership_check(
            &op,
            &FieldClassInput::TwoScale(v),
            FieldClass::AFree,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");

        // v(x, y) = (y1, 0) has nonzero micro mean: fails the fluctuation class
        let bad = TwoScaleField::from_fn(macro_grid, micro_grid, 2, |_, y, out| {
            out[0] = y[0];
            out[1] = 0.0;
        });
        let report = membership_check(
            &op,
            &FieldClassInput::TwoScale(bad),
            FieldClass::MicroFluctuation,
            1e-7,
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.mean_residual > 0.1);
    }

    #[test]
    fn ehom_branches() {
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let macro_grid = Grid::new(&[8, 8]).unwrap();
        // u = (sin 2 pi x1, 0) violates the constraint
        let bad = PeriodicField::from_fn(macro_grid.clone(), 2, |x, out| {
            out[0] = (2.0 * PI * x[0]).sin();
            out[1] = 0.0;
        });
        let f = IntegrandSpec::from_text("xi1^2+xi2^2", 2, 2.0, 2.0).unwrap();
        match ehom(&op, &f, &bad, 2, &[8, 8], 1e-7, &quick_opts()).unwrap() {
            EhomOutcome::Infeasible(report) => assert!(report.macro_residual > 1e-3),
            EhomOutcome::Value { .. } => panic!("expected infeasible"),
        }

        // constant field, convex y-free integrand: integral of f(., xi0)
        let u = PeriodicField::from_fn(macro_grid, 2, |_, out| {
            out[0] = 0.5;
            out[1] = -1.0;
        });
        match ehom(&op, &f, &u, 2, &[8, 8], 1e-7, &quick_opts()).unwrap() {
            EhomOutcome::Value { value, .. } => {
                assert_relative_eq!(value, 0.25 + 1.0, epsilon = 1e-6);
            }
            EhomOutcome::Infeasible(_) => panic!("expected feasible"),
        }
    }

    #[test]
    fn relaxation_of_convex_integrand_has_no_gap() {
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let f = IntegrandSpec::from_text("xi1^2+xi2^2", 2, 2.0, 2.0).unwrap();
        // divergence-free macro field: u = (sin 2 pi x2, 0)
        let macro_grid = Grid::new(&[8, 8]).unwrap();
        let u = PeriodicField::from_fn(macro_grid, 2, |x, out| {
            out[0] = (2.0 * PI * x[1]).sin();
            out[1] = 0.0;
        });
        let report =
            relaxation_check(&op, &f, &u, &[2, 4, 8], &[8, 8], 1e-7, &quick_opts()).unwrap();
        // convex integrand: w* = 0, energies equal the envelope integral
        for row in &report.rows {
            assert!(
                (row.energy - report.envelope_integral).abs() <= 1e-6,
                "row {row:?} vs {}",
                report.envelope_integral
            );
            assert!(row.energy >= report.envelope_integral - 1e-6);
        }
    }
}
