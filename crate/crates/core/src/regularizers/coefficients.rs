use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distribution of one scaling coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coefficient {
    Fixed(f64),
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl Coefficient {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        let c = Coefficient::Uniform { lo, hi };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Coefficient::Fixed(v) if !v.is_finite() => {
                Err(Error::Invalid(format!("coefficient {v} is not finite")))
            }
            Coefficient::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                Err(Error::Invalid(format!("coefficient range [{lo}, {hi}] is empty or not finite")))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Coefficient::Fixed(v) => v,
            Coefficient::Uniform { lo, hi } => (lo + hi) / 2.0,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Coefficient::Fixed(v) => v,
            Coefficient::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
        }
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Fixed(v) => write!(f, "{v}"),
            Coefficient::Uniform { lo, hi } => write!(f, "[{lo},{hi}]"),
        }
    }
}

impl FromStr for Coefficient {
    type Err = Error;

    /// `0.5` or `[-1,1]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number {t:?} in coefficient {s:?}")))
        };
        let c = if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let (lo, hi) = inner
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("range {s:?} must look like [lo,hi]")))?;
            Coefficient::Uniform {
                lo: num(lo)?,
                hi: num(hi)?,
            }
        } else {
            Coefficient::Fixed(num(s)?)
        };
        c.validate()?;
        Ok(c)
    }
}

/// How the forward coefficient `alpha` and backward coefficient `beta` are
/// drawn. A non-empty `pool` of `(alpha, beta)` pairs replaces the
/// independent draws: one pair is picked uniformly per granularity cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSpec {
    pub alpha: Coefficient,
    pub beta: Coefficient,
    pub pool: Option<Vec<(f64, f64)>>,
}

impl CoefficientSpec {
    pub fn new(alpha: Coefficient, beta: Coefficient) -> Result<Self> {
        let spec = Self {
            alpha,
            beta,
            pool: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self {
            alpha: Coefficient::Fixed(alpha),
            beta: Coefficient::Fixed(beta),
            pool: None,
        }
    }

    pub fn with_pool(pool: Vec<(f64, f64)>) -> Result<Self> {
        let spec = Self {
            alpha: Coefficient::Fixed(0.0),
            beta: Coefficient::Fixed(0.0),
            pool: Some(pool),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `alpha = 0`, `beta ~ U[0, 1]`; the setting for networks whose
    /// blocks keep the trailing ReLU.
    pub fn shakedrop_original() -> Self {
        Self {
            alpha: Coefficient::Fixed(0.0),
            beta: Coefficient::Uniform { lo: 0.0, hi: 1.0 },
            pool: None,
        }
    }

    /// `alpha ~ U[-1, 1]`, `beta ~ U[0, 1]`; the setting for branches that
    /// end in BN (EraseReLU, PyramidNet, Wide ResNet with BN).
    pub fn shakedrop_bn_end() -> Self {
        Self {
            alpha: Coefficient::Uniform { lo: -1.0, hi: 1.0 },
            beta: Coefficient::Uniform { lo: 0.0, hi: 1.0 },
            pool: None,
        }
    }

    /// `alpha, beta ~ U[0, 1]` as in Shake-Shake.
    pub fn shake_shake() -> Self {
        Self {
            alpha: Coefficient::Uniform { lo: 0.0, hi: 1.0 },
            beta: Coefficient::Uniform { lo: 0.0, hi: 1.0 },
            pool: None,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "shakedrop-original" => Ok(Self::shakedrop_original()),
            "shakedrop-bn-end" => Ok(Self::shakedrop_bn_end()),
            "shake-shake" => Ok(Self::shake_shake()),
            other => Err(Error::Config(format!("unknown coefficient preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        self.beta.validate()?;
        if let Some(pool) = &self.pool {
            if pool.is_empty() {
                return Err(Error::Invalid("coefficient pool is empty".into()));
            }
            if pool.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
                return Err(Error::Invalid("coefficient pool holds a non-finite value".into()));
            }
        }
        Ok(())
    }

    /// Closed-form `E[alpha]`.
    pub fn expected_alpha(&self) -> f64 {
        match &self.pool {
            Some(pool) => pool.iter().map(|p| p.0).sum::<f64>() / pool.len() as f64,
            None => self.alpha.mean(),
        }
    }
}

/// Tensor scope at which coefficients are drawn independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    Batch,
    Image,
    Channel,
    Pixel,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Batch,
        Granularity::Image,
        Granularity::Channel,
        Granularity::Pixel,
    ];

    /// Shape of the independent draws for a target of shape `target`; the
    /// result broadcasts onto `target`.
    pub fn draw_shape(self, target: &[usize]) -> Vec<usize> {
        let keep = match self {
            Granularity::Batch => 0,
            Granularity::Image => 1,
            Granularity::Channel => 2,
            Granularity::Pixel => target.len(),
        };
        target
            .iter()
            .enumerate()
            .map(|(i, &d)| if i < keep { d } else { 1 })
            .collect()
    }

    pub fn draw_count(self, target: &[usize]) -> usize {
        self.draw_shape(target).iter().product()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Batch => "batch",
            Granularity::Image => "image",
            Granularity::Channel => "channel",
            Granularity::Pixel => "pixel",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "batch" => Ok(Granularity::Batch),
            "image" => Ok(Granularity::Image),
            "channel" => Ok(Granularity::Channel),
            "pixel" => Ok(Granularity::Pixel),
            other => Err(Error::Parse(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Alpha,
    Beta,
}

/// Independent draws of one coefficient at granularity `gran` for a target
/// of shape `target`. In pool mode one pool index is drawn per cell and the
/// requested component of that pair returned.
pub fn draw_coefficients(
    spec: &CoefficientSpec,
    gran: Granularity,
    target: &[usize],
    which: Which,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if let Some(pool) = &spec.pool {
        let pairs = draw_pool_pairs(pool, gran, target, rng)?;
        return Ok(match which {
            Which::Alpha => pairs.alpha,
            Which::Beta => pairs.beta,
        });
    }
    let coef = match which {
        Which::Alpha => spec.alpha,
        Which::Beta => spec.beta,
    };
    Ok(sample_tensor(coef, gran, target, rng))
}

pub(crate) fn sample_tensor(
    coef: Coefficient,
    gran: Granularity,
    target: &[usize],
    rng: &mut impl Rng,
) -> Tensor {
    Tensor::from_fn(&gran.draw_shape(target), |_| coef.sample(rng))
}

/// Jointly drawn `(alpha, beta)` pairs from a pool, cell by cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolDraw {
    pub indices: Vec<usize>,
    pub alpha: Tensor,
    pub beta: Tensor,
}

pub fn draw_pool_pairs(
    pool: &[(f64, f64)],
    gran: Granularity,
    target: &[usize],
    rng: &mut impl Rng,
) -> Result<PoolDraw> {
    if pool.is_empty() {
        return Err(Error::Invalid("coefficient pool is empty".into()));
    }
    let shape = gran.draw_shape(target);
    let count: usize = shape.iter().product();
    let indices: Vec<usize> = (0..count).map(|_| rng.gen_range(0..pool.len())).collect();
    let alpha = Tensor::new(&shape, indices.iter().map(|&i| pool[i].0).collect())?;
    let beta = Tensor::new(&shape, indices.iter().map(|&i| pool[i].1).collect())?;
    Ok(PoolDraw {
        indices,
        alpha,
        beta,
    })
}
