use super::{Graph, RngState, Scalar, Var};
use crate::error::Result;

/// Dropout rates plus a key prefix that makes every mask site unique.
///
/// Masks are drawn from `rng.stream("<prefix>/<site>")`, so the same run seed,
/// step and example always reproduce the same masks.
#[derive(Debug, Clone)]
pub struct Dropout<'a> {
    rng: &'a RngState,
    prefix: String,
    pub attn: f64,
    pub hidden: f64,
    pub residual: f64,
}

impl<'a> Dropout<'a> {
    pub fn new(rng: &'a RngState, prefix: impl Into<String>, attn: f64, hidden: f64, residual: f64) -> Self {
        Dropout {
            rng,
            prefix: prefix.into(),
            attn,
            hidden,
            residual,
        }
    }

    pub fn child(&self, name: &str) -> Self {
        Dropout {
            prefix: format!("{}/{name}", self.prefix),
            ..self.clone()
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var, rate: f64, site: &str) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(v);
        }
        let key = format!("{}/{site}", self.prefix);
        g.dropout(v, rate, self.rng, &key)
    }
}
