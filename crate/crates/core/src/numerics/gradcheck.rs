//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{LunaError, Result};

/// Where the worst disagreement was found.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub location: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<GradMismatch>,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    /// Multiplies analytic gradients before comparison; anything but 1.0 is a
    /// deliberate fault used to prove the checker can fail.
    pub analytic_scale: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-6,
            analytic_scale: 1.0,
        }
    }
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        GradCheck {
            eps,
            ..Self::default()
        }
    }

    /// Checks gradients with respect to every input and, when given, every
    /// parameter in `store`. `loss` must build a single-element tensor.
    pub fn run<F>(
        &self,
        inputs: &[Tensor<f64>],
        store: Option<&ParamStore<f64>>,
        loss: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    {
        let empty = ParamStore::new();
        let store = store.unwrap_or(&empty);

        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(LunaError::Contract(format!(
                "gradient check needs a scalar loss, got shape {:?}",
                g.shape(out)
            )));
        }
        let grads = g.backward(out)?;

        let eval = |inputs: &[Tensor<f64>], store: &ParamStore<f64>| -> Result<f64> {
            let mut g = Graph::with_params(store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = loss(&mut g, &vars)?;
            Ok(g.value(out).data()[0])
        };

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
        };
        let mut record = |location: String, index: usize, analytic: f64, numeric: f64| {
            let analytic = analytic * self.analytic_scale;
            let err = rel_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(GradMismatch {
                    location,
                    index,
                    analytic,
                    numeric,
                    rel_error: err,
                });
            }
        };

        let mut work = inputs.to_vec();
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.get(v).map(|t| t.data().to_vec());
            for k in 0..inputs[i].len() {
                let orig = work[i].data()[k];
                work[i].data_mut()[k] = orig + self.eps;
                let plus = eval(&work, store)?;
                work[i].data_mut()[k] = orig - self.eps;
                let minus = eval(&work, store)?;
                work[i].data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic.as_ref().map_or(0.0, |a| a[k]);
                record(format!("input[{i}]"), k, a, numeric);
            }
        }

        let mut work_store = store.clone();
        for id in store.ids() {
            let analytic = grads.param(id).map(|t| t.data().to_vec());
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                work_store.get_mut(id).data_mut()[k] = orig + self.eps;
                let plus = eval(inputs, &work_store)?;
                work_store.get_mut(id).data_mut()[k] = orig - self.eps;
                let minus = eval(inputs, &work_store)?;
                work_store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic.as_ref().map_or(0.0, |a| a[k]);
                record(store.name(id).to_string(), k, a, numeric);
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of `loss` with respect to each of `inputs`.
pub fn grad_check<F>(loss: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(eps)
        .run(inputs, None, loss)
        .map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    #[test]
    fn linear_loss_is_exact() {
        let rng = RngState::new(11);
        let w: Tensor<f64> = rng.normal("w", &[3, 4], 1.0);
        let x: Tensor<f64> = rng.normal("x", &[4, 1], 1.0);
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(g.sum(y))
            },
            &[w, x],
            // linear loss: no truncation error, so a wide step only reduces roundoff
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_row() {
        let logits = Tensor::from_rows(&[&[0.3, -1.2, 2.0]]).unwrap();
        let err = grad_check(|g, v| g.cross_entropy(v[0], &[Some(1)]), &[logits], 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let res = grad_check(|g, v| Ok(g.relu(v[0])), &[x], 1e-6);
        assert!(matches!(res, Err(LunaError::Contract(_))));
    }

    #[test]
    fn injected_fault_is_detected() {
        let x: Tensor<f64> = RngState::new(2).normal("x", &[2, 3], 1.0);
        let checker = GradCheck {
            eps: 1e-6,
            analytic_scale: 1.01,
        };
        let report = checker
            .run(&[x], None, |g, v| {
                let y = g.softplus(v[0]);
                Ok(g.sum(y))
            })
            .unwrap();
        assert!(report.max_rel_error > 1e-3);
        assert_eq!(report.checked, 6);
    }
}
