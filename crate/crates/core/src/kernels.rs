//! Composable stationary covariance functions over (location, time) pairs.
//!
//! A [`KernelSpec`] is a small tree of base kernels combined by sums and
//! products. Presets mirror the three model families used throughout the
//! pipeline: a product of squared exponentials, the same plus a diurnal
//! periodic component, and a sum of rational-quadratic products.
//!
//! Free hyperparameters are always optimized in log space; gradients returned
//! by [`KernelSpec::eval_grad`] and [`KernelSpec::grad_hyper`] are with
//! respect to the log of each parameter. Spatial variances and the station
//! mean variance are fixed constants, not free parameters: the former is not
//! identifiable next to the temporal variance, the latter is a prior scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom_time::{Location, TimeStamp};

pub const HOURS_PER_DAY: f64 = 24.0;

/// Covariance-function tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Squared-exponential decay with distance; variance is a fixed constant
    /// (1 in all presets).
    SeSpace { lengthscale_km: f64, variance: f64 },
    /// Squared-exponential decay with time lag.
    SeTime { lengthscale_hr: f64, variance: f64 },
    /// 24-hour periodic squared exponential; `lengthscale` divides the sine
    /// directly and is dimensionless. The period is not a free parameter.
    Periodic24 { lengthscale: f64, variance: f64 },
    /// Rational quadratic in time lag; approaches SeTime as `alpha` grows.
    RqTime {
        lengthscale_hr: f64,
        variance: f64,
        alpha: f64,
    },
    /// Adds `variance` between observations of the same station, absorbing
    /// per-station offsets. Keys on station id, not coordinates.
    StationMean { variance: f64 },
    Product { children: Vec<KernelSpec> },
    Sum { children: Vec<KernelSpec> },
}

/// One free hyperparameter of a kernel tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParam {
    pub name: String,
    pub value: f64,
    pub log_scale: bool,
}

/// Ordered list of the free hyperparameters of a [`KernelSpec`].
pub type HyperVector = Vec<HyperParam>;

/// Tags used to build stable hyperparameter names. Repeated node kinds get an
/// ordinal suffix in pre-order, e.g. `rq_time`, `rq_time2`, `rq_time3`.
fn kind_tag(k: &KernelSpec) -> &'static str {
    match k {
        KernelSpec::SeSpace { .. } => "se_space",
        KernelSpec::SeTime { .. } => "se_time",
        KernelSpec::Periodic24 { .. } => "periodic24",
        KernelSpec::RqTime { .. } => "rq_time",
        KernelSpec::StationMean { .. } => "station_mean",
        KernelSpec::Product { .. } => "product",
        KernelSpec::Sum { .. } => "sum",
    }
}

impl KernelSpec {
    /// Check positivity of all hyperparameters and structural invariants.
    pub fn validate(&self) -> Result<()> {
        self.validate_node(0, false)?;
        let hv = self.hyper_vector();
        let mut names: Vec<&str> = hv.iter().map(|h| h.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != hv.len() {
            return Err(Error::invalid("duplicate hyperparameter names"));
        }
        Ok(())
    }

    fn validate_node(&self, depth: usize, parent_is_root_sum: bool) -> Result<()> {
        let pos = |v: f64, what: &str| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be positive, got {v}")))
            }
        };
        match self {
            KernelSpec::SeSpace {
                lengthscale_km,
                variance,
            } => {
                pos(*lengthscale_km, "se_space lengthscale")?;
                pos(*variance, "se_space variance")
            }
            KernelSpec::SeTime {
                lengthscale_hr,
                variance,
            } => {
                pos(*lengthscale_hr, "se_time lengthscale")?;
                pos(*variance, "se_time variance")
            }
            KernelSpec::Periodic24 {
                lengthscale,
                variance,
            } => {
                pos(*lengthscale, "periodic24 lengthscale")?;
                pos(*variance, "periodic24 variance")
            }
            KernelSpec::RqTime {
                lengthscale_hr,
                variance,
                alpha,
            } => {
                pos(*lengthscale_hr, "rq_time lengthscale")?;
                pos(*variance, "rq_time variance")?;
                pos(*alpha, "rq_time alpha")
            }
            KernelSpec::StationMean { variance } => {
                if !parent_is_root_sum {
                    return Err(Error::invalid(
                        "station_mean may only appear as a top-level sum term",
                    ));
                }
                pos(*variance, "station_mean variance")
            }
            KernelSpec::Product { children } | KernelSpec::Sum { children } => {
                if children.is_empty() {
                    return Err(Error::invalid("sum/product must have children"));
                }
                let is_root_sum = depth == 0 && matches!(self, KernelSpec::Sum { .. });
                for c in children {
                    c.validate_node(depth + 1, is_root_sum)?;
                }
                Ok(())
            }
        }
    }

    /// True if any node in the tree is a `StationMean`.
    pub fn contains_station_mean(&self) -> bool {
        match self {
            KernelSpec::StationMean { .. } => true,
            KernelSpec::Product { children } | KernelSpec::Sum { children } => {
                children.iter().any(|c| c.contains_station_mean())
            }
            _ => false,
        }
    }

    /// A copy of the tree with all `StationMean` terms removed. Returns None
    /// if nothing remains.
    pub fn without_station_mean(&self) -> Option<KernelSpec> {
        match self {
            KernelSpec::StationMean { .. } => None,
            KernelSpec::Sum { children } => {
                let kept: Vec<KernelSpec> = children
                    .iter()
                    .filter_map(|c| c.without_station_mean())
                    .collect();
                match kept.len() {
                    0 => None,
                    1 => Some(kept.into_iter().next().unwrap()),
                    _ => Some(KernelSpec::Sum { children: kept }),
                }
            }
            KernelSpec::Product { children } => {
                // StationMean is never valid inside a product; keep as-is.
                Some(KernelSpec::Product {
                    children: children.clone(),
                })
            }
            other => Some(other.clone()),
        }
    }

    /// Number of free hyperparameters.
    pub fn n_free_params(&self) -> usize {
        self.hyper_vector().len()
    }

    /// Free hyperparameters in pre-order traversal.
    pub fn hyper_vector(&self) -> HyperVector {
        let mut out = Vec::new();
        let mut counts: std::collections::HashMap<&'static str, usize> =
            std::collections::HashMap::new();
        self.collect_params(&mut out, &mut counts);
        out
    }

    fn collect_params(
        &self,
        out: &mut HyperVector,
        counts: &mut std::collections::HashMap<&'static str, usize>,
    ) {
        let mut tagged = |tag: &'static str, parts: &[(&str, f64)], out: &mut HyperVector| {
            let n = counts.entry(tag).or_insert(0);
            *n += 1;
            let prefix = if *n == 1 {
                tag.to_string()
            } else {
                format!("{tag}{n}")
            };
            for (p, v) in parts {
                out.push(HyperParam {
                    name: format!("{prefix}.{p}"),
                    value: *v,
                    log_scale: true,
                });
            }
        };
        match self {
            KernelSpec::SeSpace { lengthscale_km, .. } => {
                tagged("se_space", &[("ell", *lengthscale_km)], out)
            }
            KernelSpec::SeTime {
                lengthscale_hr,
                variance,
            } => tagged("se_time", &[("var", *variance), ("ell", *lengthscale_hr)], out),
            KernelSpec::Periodic24 {
                lengthscale,
                variance,
            } => tagged(
                "periodic24",
                &[("var", *variance), ("ell", *lengthscale)],
                out,
            ),
            KernelSpec::RqTime {
                lengthscale_hr,
                variance,
                alpha,
            } => tagged(
                "rq_time",
                &[("var", *variance), ("ell", *lengthscale_hr), ("alpha", *alpha)],
                out,
            ),
            KernelSpec::StationMean { .. } => {}
            KernelSpec::Product { children } | KernelSpec::Sum { children } => {
                for c in children {
                    c.collect_params(out, counts);
                }
            }
        }
    }

    /// Overwrite the free hyperparameters from `values`, in the same order as
    /// [`KernelSpec::hyper_vector`]. Values are in natural (not log) space.
    pub fn set_free_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.n_free_params();
        if values.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} hyperparameter values, got {}",
                values.len()
            )));
        }
        let mut cursor = 0usize;
        self.assign_params(values, &mut cursor);
        debug_assert_eq!(cursor, n);
        self.validate()
    }

    fn assign_params(&mut self, values: &[f64], cursor: &mut usize) {
        let mut take = || {
            let v = values[*cursor];
            *cursor += 1;
            v
        };
        match self {
            KernelSpec::SeSpace { lengthscale_km, .. } => *lengthscale_km = take(),
            KernelSpec::SeTime {
                lengthscale_hr,
                variance,
            } => {
                *variance = take();
                *lengthscale_hr = take();
            }
            KernelSpec::Periodic24 {
                lengthscale,
                variance,
            } => {
                *variance = take();
                *lengthscale = take();
            }
            KernelSpec::RqTime {
                lengthscale_hr,
                variance,
                alpha,
            } => {
                *variance = take();
                *lengthscale_hr = take();
                *alpha = take();
            }
            KernelSpec::StationMean { .. } => {}
            KernelSpec::Product { children } | KernelSpec::Sum { children } => {
                for c in children {
                    c.assign_params(values, cursor);
                }
            }
        }
    }

    /// Covariance between two (location, time) points.
    ///
    /// Assumes a validated tree; presets and deserialized kernels are
    /// validated at construction.
    pub fn eval(&self, a: &Location, b: &Location, t: TimeStamp, u: TimeStamp) -> f64 {
        match self {
            KernelSpec::SeSpace {
                lengthscale_km,
                variance,
            } => {
                let de = a.east_km - b.east_km;
                let dn = a.north_km - b.north_km;
                let d2 = de * de + dn * dn;
                variance * (-d2 / (2.0 * lengthscale_km * lengthscale_km)).exp()
            }
            KernelSpec::SeTime {
                lengthscale_hr,
                variance,
            } => {
                let dt = t.0 - u.0;
                variance * (-dt * dt / (2.0 * lengthscale_hr * lengthscale_hr)).exp()
            }
            KernelSpec::Periodic24 {
                lengthscale,
                variance,
            } => {
                let s = (std::f64::consts::PI * (t.0 - u.0) / HOURS_PER_DAY).sin();
                variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
            KernelSpec::RqTime {
                lengthscale_hr,
                variance,
                alpha,
            } => {
                let dt = t.0 - u.0;
                let base = 1.0 + dt * dt / (2.0 * alpha * lengthscale_hr * lengthscale_hr);
                variance * base.powf(-alpha)
            }
            KernelSpec::StationMean { variance } => {
                if a.station_id == b.station_id {
                    *variance
                } else {
                    0.0
                }
            }
            KernelSpec::Product { children } => {
                children.iter().map(|c| c.eval(a, b, t, u)).product()
            }
            KernelSpec::Sum { children } => children.iter().map(|c| c.eval(a, b, t, u)).sum(),
        }
    }

    /// Covariance and its gradient with respect to the log of every free
    /// hyperparameter, written into `grad` (same order as `hyper_vector`).
    pub fn eval_grad(
        &self,
        a: &Location,
        b: &Location,
        t: TimeStamp,
        u: TimeStamp,
        grad: &mut [f64],
    ) -> f64 {
        debug_assert_eq!(grad.len(), self.n_free_params());
        self.eval_grad_walk(a, b, t, u, grad)
    }

    fn eval_grad_walk(
        &self,
        a: &Location,
        b: &Location,
        t: TimeStamp,
        u: TimeStamp,
        grad: &mut [f64],
    ) -> f64 {
        match self {
            KernelSpec::SeSpace { lengthscale_km, .. } => {
                let val = self.eval(a, b, t, u);
                let de = a.east_km - b.east_km;
                let dn = a.north_km - b.north_km;
                let d2 = de * de + dn * dn;
                grad[0] = val * d2 / (lengthscale_km * lengthscale_km);
                val
            }
            KernelSpec::SeTime { lengthscale_hr, .. } => {
                let val = self.eval(a, b, t, u);
                let dt = t.0 - u.0;
                grad[0] = val;
                grad[1] = val * dt * dt / (lengthscale_hr * lengthscale_hr);
                val
            }
            KernelSpec::Periodic24 { lengthscale, .. } => {
                let val = self.eval(a, b, t, u);
                let s = (std::f64::consts::PI * (t.0 - u.0) / HOURS_PER_DAY).sin();
                grad[0] = val;
                grad[1] = val * 4.0 * s * s / (lengthscale * lengthscale);
                val
            }
            KernelSpec::RqTime {
                lengthscale_hr,
                variance,
                alpha,
            } => {
                let dt = t.0 - u.0;
                let ell2 = lengthscale_hr * lengthscale_hr;
                let base = 1.0 + dt * dt / (2.0 * alpha * ell2);
                let val = variance * base.powf(-alpha);
                grad[0] = val;
                grad[1] = val * dt * dt / (base * ell2);
                grad[2] = val * (-alpha * base.ln() + dt * dt / (2.0 * ell2 * base));
                val
            }
            KernelSpec::StationMean { .. } => self.eval(a, b, t, u),
            KernelSpec::Sum { children } => {
                let mut total = 0.0;
                let mut offset = 0usize;
                for c in children {
                    let n = c.n_free_params();
                    total += c.eval_grad_walk(a, b, t, u, &mut grad[offset..offset + n]);
                    offset += n;
                }
                total
            }
            KernelSpec::Product { children } => {
                let mut vals = [0.0f64; 8];
                let mut offsets = [0usize; 9];
                assert!(children.len() <= 8, "product fan-out limited to 8");
                let mut offset = 0usize;
                for (i, c) in children.iter().enumerate() {
                    let n = c.n_free_params();
                    offsets[i] = offset;
                    vals[i] = c.eval_grad_walk(a, b, t, u, &mut grad[offset..offset + n]);
                    offset += n;
                }
                offsets[children.len()] = offset;
                // Scale each child's gradient by the product of the others.
                for i in 0..children.len() {
                    let mut others = 1.0;
                    for (j, v) in vals[..children.len()].iter().enumerate() {
                        if j != i {
                            others *= v;
                        }
                    }
                    for g in &mut grad[offsets[i]..offsets[i + 1]] {
                        *g *= others;
                    }
                }
                vals[..children.len()].iter().product()
            }
        }
    }

    /// Named log-space partials at one pair of points.
    pub fn grad_hyper(
        &self,
        a: &Location,
        b: &Location,
        t: TimeStamp,
        u: TimeStamp,
    ) -> Result<Vec<(String, f64)>> {
        self.validate()?;
        let hv = self.hyper_vector();
        let mut grad = vec![0.0; hv.len()];
        self.eval_grad(a, b, t, u, &mut grad);
        Ok(hv
            .into_iter()
            .zip(grad)
            .map(|(h, g)| (h.name, g))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<KernelSpec> {
        let k: KernelSpec = serde_json::from_str(s)?;
        k.validate()?;
        Ok(k)
    }
}

/// Gram matrix of a kernel over a point set, optionally with measurement
/// noise added to the diagonal.
pub fn gram(
    k: &KernelSpec,
    points: &[(Location, TimeStamp)],
    noise_var: f64,
    add_noise: bool,
) -> Result<DMatrix<f64>> {
    k.validate()?;
    if points.is_empty() {
        return Err(Error::invalid("gram of an empty point set"));
    }
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::invalid("noise variance must be finite and >= 0"));
    }
    let n = points.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let (loc_i, t_i) = &points[i];
        for j in 0..=i {
            let (loc_j, t_j) = &points[j];
            let v = k.eval(loc_i, loc_j, *t_i, *t_j);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        if add_noise {
            m[(i, i)] += noise_var;
        }
    }
    Ok(m)
}

/// Model semi-variogram `sigma_eps^2 + k(0,0) - k(h,r)`.
///
/// The kernel must not contain a station-mean term; strip it first, since
/// the variogram is defined net of per-station offsets.
pub fn model_variogram(k: &KernelSpec, noise_var: f64, h_km: f64, r_hr: f64) -> Result<f64> {
    k.validate()?;
    if k.contains_station_mean() {
        return Err(Error::invalid(
            "model_variogram requires the station_mean term to be stripped",
        ));
    }
    let a = Location::new("a", 0.0, 0.0)?;
    let b = Location::new("b", h_km, 0.0)?;
    let t0 = TimeStamp(0.0);
    let t1 = TimeStamp(r_hr);
    let k00 = k.eval(&a, &a, t0, t0);
    let khr = k.eval(&a, &b, t0, t1);
    Ok(noise_var + k00 - khr)
}

/// Preset model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    SeXSe,
    Diurnal,
    SumProd,
}

impl std::str::FromStr for PresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se_x_se" => Ok(PresetName::SeXSe),
            "diurnal" => Ok(PresetName::Diurnal),
            "sumprod" => Ok(PresetName::SumProd),
            other => Err(Error::invalid(format!(
                "unknown preset '{other}' (expected se_x_se, diurnal or sumprod)"
            ))),
        }
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PresetName::SeXSe => "se_x_se",
            PresetName::Diurnal => "diurnal",
            PresetName::SumProd => "sumprod",
        })
    }
}

const STATION_MEAN_SD: f64 = 10.0;

fn prod(children: Vec<KernelSpec>) -> KernelSpec {
    KernelSpec::Product { children }
}

fn se_time(var: f64, ell: f64) -> KernelSpec {
    KernelSpec::SeTime {
        lengthscale_hr: ell,
        variance: var,
    }
}

fn se_space(ell: f64) -> KernelSpec {
    KernelSpec::SeSpace {
        lengthscale_km: ell,
        variance: 1.0,
    }
}

fn rq_time(sigma: f64, ell: f64, alpha: f64) -> KernelSpec {
    KernelSpec::RqTime {
        lengthscale_hr: ell,
        variance: sigma * sigma,
        alpha,
    }
}

fn periodic24(sigma: f64, ell: f64) -> KernelSpec {
    KernelSpec::Periodic24 {
        lengthscale: ell,
        variance: sigma * sigma,
    }
}

fn station_mean() -> KernelSpec {
    KernelSpec::StationMean {
        variance: STATION_MEAN_SD * STATION_MEAN_SD,
    }
}

/// Build a preset kernel. Hyperparameter values default to the reference
/// fitted values for the Iowa-like setting; fitting will move them.
pub fn preset(name: PresetName) -> KernelSpec {
    let k = match name {
        PresetName::SeXSe => KernelSpec::Sum {
            children: vec![
                prod(vec![se_time(3.7 * 3.7, 2.7), se_space(176.0)]),
                station_mean(),
            ],
        },
        PresetName::Diurnal => KernelSpec::Sum {
            children: vec![
                prod(vec![se_time(3.1 * 3.1, 2.8), se_space(154.0)]),
                prod(vec![periodic24(2.4, 0.7), se_space(1414.0)]),
                station_mean(),
            ],
        },
        PresetName::SumProd => KernelSpec::Sum {
            children: vec![
                prod(vec![rq_time(0.5, 0.3, 0.3), se_space(10.0)]),
                prod(vec![rq_time(0.9, 1.9, 1.1), se_space(59.0)]),
                prod(vec![rq_time(4.4, 8.9, 0.3), se_space(370.0)]),
                prod(vec![periodic24(2.7, 0.8), se_space(785.0)]),
                station_mean(),
            ],
        },
    };
    debug_assert!(k.validate().is_ok());
    k
}

/// Reference measurement-noise standard deviation per preset.
pub fn preset_noise_sd(name: PresetName) -> f64 {
    match name {
        PresetName::SeXSe | PresetName::Diurnal => 0.4,
        PresetName::SumProd => 0.2,
    }
}
