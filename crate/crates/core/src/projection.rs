//! Field-level projection: the Fourier multiplier applying the kernel
//! projector modewise with the zero mode removed, together with the
//! quantitative deficiency bound that controls `psi - Pi psi` by the
//! constraint residual.

use crate::operator::{OperatorSpec, ProjectorTable};
use crate::spectral::{hneg_norm, lp_norm, PeriodicField};
use crate::twoscale::TwoScaleField;
use crate::Result;
use rayon::prelude::*;

/// Checkable projection diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ProjectionReport {
    /// Modulus of the input mean vector.
    pub input_mean: f64,
    /// `H^{-1}` proxy norm of `A_y(x)(Pi psi)`.
    pub ay_residual: f64,
    /// `||Pi(Pi psi) - Pi psi||_2`.
    pub idempotency_gap: f64,
    /// `sup` over lattice directions of `||Q(x, lambda/|lambda|)||`.
    pub deficiency_constant: f64,
    /// Conversion of the deficiency constant to the proxy-norm bound at p=2.
    pub effective_constant: f64,
}

/// Apply the projection through a prebuilt table; exact orthogonal projection
/// onto the discretized constraint set.
pub fn project_with(table: &ProjectorTable, psi: &PeriodicField) -> PeriodicField {
    let mut spec = psi.spectrum().clone();
    table.apply_p(&mut spec);
    crate::spectral::inverse_transform_unchecked(&spec).0
}

/// `Pi(x) psi`: kernel projector applied modewise, zero mode removed.
pub fn project(op: &OperatorSpec, x: &[f64], psi: &PeriodicField) -> Result<PeriodicField> {
    let table = op.projector_table(x, psi.grid())?;
    Ok(project_with(&table, psi))
}

/// The constant of the projection deficiency bound: the supremum over the
/// grid's lattice directions of the pseudo-inverse operator norm.
pub fn deficiency_bound(op: &OperatorSpec, x: &[f64], grid: &crate::spectral::Grid) -> Result<f64> {
    Ok(op.projector_table(x, grid)?.deficiency())
}

/// Conversion factor from the deficiency constant to the `H^{-1}`-proxy bound
/// at `p = 2`: the lattice multiplier comparison is sharpest at `|lambda| = 1`.
pub fn effective_p3_constant(deficiency: f64) -> f64 {
    let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    deficiency * (1.0 + four_pi2).sqrt() / four_pi2.sqrt()
}

/// Project and report the (P1)-(P3) diagnostics.
pub fn project_with_report(
    op: &OperatorSpec,
    x: &[f64],
    psi: &PeriodicField,
) -> Result<(PeriodicField, ProjectionReport)> {
    let table = op.projector_table(x, psi.grid())?;
    let proj = project_with(&table, psi);
    let again = project_with(&table, &proj);
    let gap = again.add_scaled(&proj, -1.0)?;
    let ay = op.apply_ay(x, &proj)?;
    let mean = psi.mean();
    let report = ProjectionReport {
        input_mean: mean.iter().map(|m| m * m).sum::<f64>().sqrt(),
        ay_residual: hneg_norm(&ay),
        idempotency_gap: lp_norm(&gap, 2.0)?,
        deficiency_constant: table.deficiency(),
        effective_constant: effective_p3_constant(table.deficiency()),
    };
    Ok((proj, report))
}

/// Nodewise projection of a two-scale field: `Pi(x_k)` applied to every macro
/// slice. Macro nodes are independent and run in parallel.
pub fn project_two_scale(op: &OperatorSpec, w: &TwoScaleField) -> Result<TwoScaleField> {
    let macro_grid = w.macro_grid().clone();
    let n_axes = macro_grid.n_axes();
    let slices: Vec<PeriodicField> = (0..macro_grid.len())
        .into_par_iter()
        .map(|k| {
            let mut x = [0.0f64; 3];
            macro_grid.node_coords(k, &mut x[..n_axes]);
            let table = op.projector_table(&x[..n_axes], w.micro_grid())?;
            Ok(project_with(&table, &w.micro_field(k)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = TwoScaleField::zeros(
        macro_grid,
        w.micro_grid().clone(),
        w.components(),
    );
    for (k, f) in slices.into_iter().enumerate() {
        out.set_micro_field(k, &f)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::OperatorSpec;
    use crate::spectral::{random_band_limited, remove_mean, Grid, PeriodicField};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn div_op(a: &str) -> OperatorSpec {
        OperatorSpec::divergence_perturbed(a).unwrap()
    }

    #[test]
    fn constant_fields_project_to_zero() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let c = PeriodicField::from_fn(grid, 2, |_, out| {
            out[0] = 2.0;
            out[1] = -3.0;
        });
        let p = project(&op, &[0.3, 0.4], &c).unwrap();
        assert!(p.max_abs() < 1e-12);
    }

    #[test]
    fn projection_is_linear() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let table = op.projector_table(&[0.3, 0.4], &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_band_limited(&grid, 2, 4, 1.0, &mut rng);
        let g = random_band_limited(&grid, 2, 4, 1.0, &mut rng);
        let combo = f.scale(1.7).add_scaled(&g, -0.4).unwrap();
        let left = project_with(&table, &combo);
        let right = project_with(&table, &f)
            .scale(1.7)
            .add_scaled(&project_with(&table, &g), -0.4)
            .unwrap();
        let diff = left.add_scaled(&right, -1.0).unwrap();
        assert!(diff.max_abs() <= 1e-12 * combo.max_abs().max(1.0));
    }

    #[test]
    fn single_mode_projection_by_hand() {
        // psi = (sin 2 pi y1, 0), divergence with a = 1: P at (±1, 0) kills e1
        let grid = Grid::new(&[16, 16]).unwrap();
        let op = div_op("1");
        let psi = PeriodicField::from_fn(grid, 2, |y, out| {
            out[0] = (2.0 * PI * y[0]).sin();
            out[1] = 0.0;
        });
        let p = project(&op, &[0.5, 0.5], &psi).unwrap();
        assert!(p.max_abs() < 1e-12);
    }

    #[test]
    fn idempotence_and_kernel_property() {
        let grid = Grid::new(&[32, 32]).unwrap();
        let op = div_op("min(3/4 + sin(2*pi*x1)/4, 1 - 1e-9)");
        let x = [0.37, 0.81];
        let table = op.projector_table(&x, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let psi = random_band_limited(&grid, 2, 8, 1.0, &mut rng);
            let norm = lp_norm(&psi, 2.0).unwrap();
            let proj = project_with(&table, &psi);
            let again = project_with(&table, &proj);
            let gap = lp_norm(&again.add_scaled(&proj, -1.0).unwrap(), 2.0).unwrap();
            assert!(gap <= 1e-10 * norm.max(1.0));
            let residual = hneg_norm(&op.apply_ay(&x, &proj).unwrap());
            assert!(residual <= 1e-10 * norm.max(1.0));
        }
    }

    #[test]
    fn deficiency_bound_controls_projection_gap() {
        let grid = Grid::new(&[32, 32]).unwrap();
        let op = div_op("min(3/4 + sin(2*pi*x1)/4, 1 - 1e-9)");
        for (i, x) in [[0.1, 0.6], [0.35, 0.2], [0.77, 0.9]].iter().enumerate() {
            let table = op.projector_table(x, &grid).unwrap();
            let c_eff = effective_p3_constant(table.deficiency());
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            for _ in 0..40 {
                let psi = remove_mean(&random_band_limited(&grid, 2, 8, 1.0, &mut rng));
                let proj = project_with(&table, &psi);
                let lhs = lp_norm(&psi.add_scaled(&proj, -1.0).unwrap(), 2.0).unwrap();
                let rhs = c_eff * hneg_norm(&op.apply_ay(x, &psi).unwrap());
                assert!(lhs <= rhs, "x={x:?}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn high_pass_energy_is_contracted() {
        // modewise contraction: high-pass spectral energy of Pi psi never
        // exceeds that of psi
        let grid = Grid::new(&[32, 32]).unwrap();
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let table = op.projector_table(&[0.21, 0.43], &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = random_band_limited(&grid, 2, 12, 1.0, &mut rng);
        let proj = project_with(&table, &psi);
        let spec_in = psi.spectrum();
        let spec_out = proj.spectrum();
        let mut freqs = [0i64; 2];
        for threshold in [2i64, 4, 8] {
            let mut high_in = 0.0;
            let mut high_out = 0.0;
            for mode in 0..grid.len() {
                grid.node_freqs(mode, &mut freqs);
                let l2 = freqs.iter().map(|&f| (f * f) as f64).sum::<f64>();
                if l2 >= (threshold * threshold) as f64 {
                    for c in 0..2 {
                        high_in += spec_in.coeff(mode, c).norm_sqr();
                        high_out += spec_out.coeff(mode, c).norm_sqr();
                    }
                }
            }
            assert!(high_out <= high_in + 1e-15);
        }
    }

    #[test]
    fn two_scale_projection_nodewise_properties() {
        let macro_grid = Grid::new(&[8, 8]).unwrap();
        let micro_grid = Grid::new(&[16, 16]).unwrap();
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        // y-independent -> zero nodewise
        let w = TwoScaleField::from_fn(
            macro_grid.clone(),
            micro_grid.clone(),
            2,
            |x, _y, out| {
                out[0] = x[0];
                out[1] = 1.0 - x[1];
            },
        );
        let p = project_two_scale(&op, &w).unwrap();
        assert!(p.max_abs() < 1e-12);

        // already projected -> unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_band_limited(&micro_grid, 2, 4, 1.0, &mut rng);
        let w = TwoScaleField::from_fn(macro_grid, micro_grid, 2, |x, y, out| {
            let idx = base.grid().lin_index(&[
                (y[0] * 16.0).round() as usize % 16,
                (y[1] * 16.0).round() as usize % 16,
            ]);
            let v = base.node(idx);
            let s = 1.0 + 0.5 * (2.0 * PI * x[0]).sin();
            out[0] = s * v[0];
            out[1] = s * v[1];
        });
        let once = project_two_scale(&op, &w).unwrap();
        let twice = project_two_scale(&op, &once).unwrap();
        let gap = twice.sub(&once).unwrap().product_l2();
        assert!(gap <= 1e-10 * once.product_l2().max(1.0));
    }

    #[test]
    fn macro_refinement_commutes_with_projection() {
        // project on a 2x refined macro grid, restrict to the shared nodes,
        // and compare with projecting on the coarse grid directly
        let coarse = Grid::new(&[4, 4]).unwrap();
        let fine = Grid::new(&[8, 8]).unwrap();
        let micro = Grid::new(&[16, 16]).unwrap();
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let smooth = |x: &[f64], y: &[f64], out: &mut [f64]| {
            let s = 1.0 + 0.3 * (2.0 * PI * x[0]).cos() - 0.2 * (2.0 * PI * x[1]).sin();
            out[0] = s * (2.0 * PI * y[0]).sin();
            out[1] = s * (2.0 * PI * (y[0] + y[1])).cos();
        };
        let w_coarse = TwoScaleField::from_fn(coarse.clone(), micro.clone(), 2, smooth);
        let w_fine = TwoScaleField::from_fn(fine.clone(), micro.clone(), 2, smooth);
        let p_coarse = project_two_scale(&op, &w_coarse).unwrap();
        let p_fine = project_two_scale(&op, &w_fine).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let kc = coarse.lin_index(&[i, j]);
                let kf = fine.lin_index(&[2 * i, 2 * j]);
                let a = p_coarse.micro_slice(kc);
                let b = p_fine.micro_slice(kf);
                let diff = a
                    .iter()
                    .zip(b)
                    .map(|(u, v)| (u - v).abs())
                    .fold(0.0f64, f64::max);
                assert!(diff <= 1e-9, "node ({i},{j}): {diff}");
            }
        }
    }

    #[test]
    fn macro_lipschitz_audit() {
        // finite differences of Pi w stay controlled by those of w and of the
        // projector tables on a smooth 2-D instance
        let macro_grid = Grid::new(&[8, 8]).unwrap();
        let micro = Grid::new(&[16, 16]).unwrap();
        let op = div_op("0.75+0.25*sin(2*pi*x1)");
        let w = TwoScaleField::from_fn(macro_grid.clone(), micro.clone(), 2, |x, y, out| {
            let s = (2.0 * PI * x[0]).sin();
            out[0] = s * (2.0 * PI * y[1]).cos();
            out[1] = s * (2.0 * PI * y[0]).sin();
        });
        let pw = project_two_scale(&op, &w).unwrap();
        let fd = |f: &TwoScaleField| -> f64 {
            let mut worst = 0.0f64;
            for i in 0..8 {
                for j in 0..8 {
                    let k = macro_grid.lin_index(&[i, j]);
                    for (ni, nj) in [((i + 1) % 8, j), (i, (j + 1) % 8)] {
                        let kn = macro_grid.lin_index(&[ni, nj]);
                        let d: f64 = f
                            .micro_slice(k)
                            .iter()
                            .zip(f.micro_slice(kn))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>();
                        worst = worst.max((d / micro.len() as f64).sqrt());
                    }
                }
            }
            worst
        };
        // max finite difference of the projector tables over adjacent nodes
        let mut fd_p = 0.0f64;
        let tables: Vec<_> = (0..macro_grid.len())
            .map(|k| {
                let mut x = [0.0; 2];
                macro_grid.node_coords(k, &mut x);
                op.projector_table(&x, &micro).unwrap()
            })
            .collect();
        for i in 0..8 {
            for j in 0..8 {
                let k = macro_grid.lin_index(&[i, j]);
                for (ni, nj) in [((i + 1) % 8, j), (i, (j + 1) % 8)] {
                    let kn = macro_grid.lin_index(&[ni, nj]);
                    for mode in 1..micro.len() {
                        let a = tables[k].p_at(mode);
                        let b = tables[kn].p_at(mode);
                        let d: f64 = a
                            .iter()
                            .zip(b)
                            .map(|(u, v)| (u - v) * (u - v))
                            .sum::<f64>();
                        fd_p = fd_p.max(d.sqrt());
                    }
                }
            }
        }
        let lhs = fd(&pw);
        let rhs = fd(&w) * (1.0 + fd_p);
        assert!(lhs <= rhs + 1e-12, "{lhs} > {rhs}");
    }

    #[test]
    fn report_entries_are_finite_and_consistent() {
        let grid = Grid::new(&[16, 16]).unwrap();
        let op = div_op("0.5");
        let psi = PeriodicField::from_fn(grid, 2, |y, out| {
            out[0] = 1.0 + (2.0 * PI * y[0]).sin();
            out[1] = (2.0 * PI * y[1]).cos();
        });
        let (_, report) = project_with_report(&op, &[0.2, 0.2], &psi).unwrap();
        assert_relative_eq!(report.input_mean, 1.0, epsilon = 1e-12);
        assert!(report.ay_residual < 1e-10);
        assert!(report.idempotency_gap < 1e-10);
        assert_relative_eq!(report.deficiency_constant, 2.0, epsilon = 1e-12);
        assert!(report.effective_constant > report.deficiency_constant);
    }
}
