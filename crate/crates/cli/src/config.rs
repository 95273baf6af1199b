//! Run configuration: a TOML file declaring the operator, integrand, grids,
//! solver options and reproducibility seed.

use anyhow::{bail, Context, Result};
use aqx_core::envelope::{IntegrandSpec, SolverOptions};
use aqx_core::expr;
use aqx_core::operator::{CoeffMatrix, OperatorSpec};
use aqx_core::spectral::{Grid, PeriodicField};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub dimensions: Dimensions,
    pub operator: OperatorConfig,
    pub integrand: Option<IntegrandConfig>,
    pub grids: GridsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub homogenize: HomogenizeConfig,
    #[serde(default)]
    pub twoscale: TwoScaleConfig,
    #[serde(default)]
    pub fields: FieldsConfig,
    #[serde(default)]
    pub rank: RankConfig,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub n: usize,
    pub d: usize,
    pub l: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub kind: String,
    /// `divergence_perturbed`: the coefficient `a(x)`
    pub a: Option<String>,
    /// `curl_perturbed`: the coefficient `a1(x)` (`a2` is 1)
    pub a1: Option<String>,
    /// `scaled_constant`: scalar multiplier `m(x)` and constant base matrices
    pub multiplier: Option<String>,
    pub base: Option<Vec<Vec<Vec<f64>>>>,
    /// `custom`: N matrices of l x d entry expressions
    pub coeffs: Option<Vec<Vec<Vec<String>>>>,
    pub declared_rank: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrandConfig {
    pub f: String,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    /// highest micro frequency appearing in `f`; the dyadic chain refuses to
    /// oscillate past what the micro grid resolves
    #[serde(default)]
    pub y_band: usize,
}

fn default_p() -> f64 {
    2.0
}

fn default_c() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsConfig {
    #[serde(rename = "macro")]
    pub macro_dims: Vec<usize>,
    #[serde(rename = "micro")]
    pub micro_dims: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub random_starts: usize,
    pub sigmas: Vec<f64>,
    pub start_band: i64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        SolverConfig {
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            random_starts: o.random_starts,
            sigmas: o.sigmas,
            start_band: o.start_band,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomogenizeConfig {
    pub n_max: usize,
    pub membership_tol: f64,
}

impl Default for HomogenizeConfig {
    fn default() -> Self {
        HomogenizeConfig {
            n_max: 8,
            membership_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoScaleConfig {
    /// comma-separated reciprocals, e.g. "1/4,1/8,1/16"
    pub eps: String,
    pub bank_radius: i64,
    #[serde(rename = "micro")]
    pub micro_dims: Option<Vec<usize>>,
    /// bands of the generated random fluctuation
    pub x_band: i64,
    pub y_band: i64,
    pub amplitude: f64,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        TwoScaleConfig {
            eps: "1/4,1/8,1/16".into(),
            bank_radius: 2,
            micro_dims: None,
            x_band: 5,
            y_band: 2,
            amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsConfig {
    /// macro field expressions (one per component, variables `x1..xN`)
    pub u: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankConfig {
    pub x_samples: usize,
    pub lambda_samples: usize,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            x_samples: 32,
            lambda_samples: 64,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        Grid::new(&self.grids.macro_dims).context("macro grid")?;
        Grid::new(&self.grids.micro_dims).context("micro grid")?;
        if self.grids.macro_dims.len() != self.dimensions.n
            || self.grids.micro_dims.len() != self.dimensions.n
        {
            bail!("grids must have {} axes", self.dimensions.n);
        }
        if let Some(ig) = &self.integrand {
            if !(ig.p > 1.0 && ig.p.is_finite()) {
                bail!("growth exponent p must lie in (1, inf), got {}", ig.p);
            }
            let min_m = *self.grids.micro_dims.iter().min().unwrap();
            if ig.y_band >= min_m / 2 {
                bail!(
                    "integrand oscillates at micro frequency {} which the micro grid {:?} cannot resolve",
                    ig.y_band,
                    self.grids.micro_dims
                );
            }
            if !self.homogenize.n_max.is_power_of_two() {
                bail!("n_max must be a power of two, got {}", self.homogenize.n_max);
            }
        }
        Ok(())
    }

    pub fn operator(&self) -> Result<OperatorSpec> {
        let dims = &self.dimensions;
        let op = &self.operator;
        let spec = match op.kind.as_str() {
            "divergence_perturbed" => {
                if (dims.n, dims.d, dims.l) != (2, 2, 1) {
                    bail!("divergence_perturbed needs N=2, d=2, l=1");
                }
                let a = op.a.as_deref().context("operator.a required")?;
                OperatorSpec::divergence_perturbed(a)?
            }
            "curl_perturbed" => {
                if (dims.n, dims.d, dims.l) != (2, 2, 4) {
                    bail!("curl_perturbed needs N=2, d=2, l=4");
                }
                let a1 = op.a1.as_deref().context("operator.a1 required")?;
                OperatorSpec::curl_perturbed(a1, op.declared_rank)?
            }
            "scaled_constant" => {
                let m = op.multiplier.as_deref().context("operator.multiplier required")?;
                let base = op.base.as_ref().context("operator.base required")?;
                if base.len() != dims.n {
                    bail!("operator.base needs {} matrices", dims.n);
                }
                let flat: Vec<Vec<f64>> = base
                    .iter()
                    .map(|mat| {
                        if mat.len() != dims.l || mat.iter().any(|row| row.len() != dims.d) {
                            bail!("operator.base matrices must be {} x {}", dims.l, dims.d);
                        }
                        Ok(mat.iter().flatten().copied().collect())
                    })
                    .collect::<Result<_>>()?;
                OperatorSpec::scaled_constant(dims.n, dims.d, dims.l, m, &flat)?
            }
            "custom" => {
                let coeffs = op.coeffs.as_ref().context("operator.coeffs required")?;
                if coeffs.len() != dims.n {
                    bail!("operator.coeffs needs {} matrices", dims.n);
                }
                let mats = coeffs
                    .iter()
                    .map(|mat| {
                        if mat.len() != dims.l || mat.iter().any(|row| row.len() != dims.d) {
                            bail!("operator.coeffs matrices must be {} x {}", dims.l, dims.d);
                        }
                        let entries = mat
                            .iter()
                            .flatten()
                            .map(|t| expr::parse(t))
                            .collect::<aqx_core::Result<Vec<_>>>()?;
                        Ok(CoeffMatrix::new(dims.l, dims.d, entries)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                OperatorSpec::new(dims.n, dims.d, dims.l, mats, op.declared_rank)?
            }
            other => bail!("unknown operator kind `{other}`"),
        };
        Ok(spec)
    }

    pub fn integrand(&self) -> Result<IntegrandSpec> {
        let ig = self.integrand.as_ref().context("config has no [integrand]")?;
        Ok(IntegrandSpec::from_text(
            &ig.f,
            self.dimensions.d,
            ig.p,
            ig.c,
        )?)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iters: self.solver.max_iters,
            grad_tol: self.solver.grad_tol,
            random_starts: self.solver.random_starts,
            sigmas: self.solver.sigmas.clone(),
            start_band: self.solver.start_band,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn macro_grid(&self) -> Grid {
        Grid::new(&self.grids.macro_dims).expect("validated")
    }

    pub fn micro_grid(&self) -> Grid {
        Grid::new(&self.grids.micro_dims).expect("validated")
    }

    /// The macro field declared under `[fields] u = [...]`.
    pub fn macro_field_u(&self) -> Result<PeriodicField> {
        let exprs = self
            .fields
            .u
            .as_ref()
            .context("config has no [fields] u declaration")?;
        if exprs.len() != self.dimensions.d {
            bail!("fields.u needs {} component expressions", self.dimensions.d);
        }
        let programs = exprs
            .iter()
            .map(|t| Ok(expr::parse(t)?.compile()))
            .collect::<Result<Vec<_>>>()?;
        let grid = self.macro_grid();
        Ok(PeriodicField::from_fn(
            grid,
            self.dimensions.d,
            |x, out| {
                for (c, p) in programs.iter().enumerate() {
                    out[c] = p.eval_fast(expr::Bindings {
                        x,
                        y: &[],
                        xi: &[],
                    });
                }
            },
        ))
    }

    pub fn eps_list(&self) -> Result<Vec<usize>> {
        parse_eps_list(&self.twoscale.eps)
    }
}

/// Parse `"1/4,1/8,1/16"` into the reciprocals `[4, 8, 16]`.
pub fn parse_eps_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for tok in text.split(',') {
        let tok = tok.trim();
        let k = match tok.strip_prefix("1/") {
            Some(den) => den
                .trim()
                .parse::<usize>()
                .with_context(|| format!("bad epsilon `{tok}`"))?,
            None => bail!("epsilon `{tok}` must have the form 1/k"),
        };
        if k == 0 {
            bail!("epsilon 1/0 is not a scale");
        }
        out.push(k);
    }
    if out.is_empty() {
        bail!("empty epsilon list");
    }
    Ok(out)
}

/// Parse `"0.25,0.5"` into a coordinate vector.
pub fn parse_vector(text: &str, expect_len: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number `{t}`")))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != expect_len {
        bail!("expected {} comma-separated values, got {}", expect_len, v.len());
    }
    Ok(v)
}

/// Parse a sweep declaration `"lo:hi:n,lo:hi:n"` into per-axis linspaces.
pub fn parse_sweep(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(',')
        .map(|axis| {
            let parts: Vec<&str> = axis.split(':').collect();
            if parts.len() != 3 {
                bail!("sweep axis `{axis}` must be lo:hi:n");
            }
            let lo: f64 = parts[0].trim().parse()?;
            let hi: f64 = parts[1].trim().parse()?;
            let n: usize = parts[2].trim().parse()?;
            if n < 2 {
                bail!("sweep axis needs at least 2 points");
            }
            Ok((0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect())
        })
        .collect()
}
