//! Binary classification loss and the weighted composite objective.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::Session;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub adv: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `ce + lambda · adv`.
pub fn combine(ce: f64, adv: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be ≥ 0, got {lambda}")));
    }
    Ok(LossBreakdown {
        ce,
        adv,
        total: ce + lambda * adv,
        lambda,
    })
}

fn check_binary(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
        Some(y) => Err(Error::InvalidArgument(format!("binary label expected, got {y}"))),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy from logits, `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn ce_loss(s: &mut Session, logits: Var, labels: &[f64]) -> Result<Var> {
    check_binary(labels)?;
    if s.value(logits).len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            s.value(logits).len(),
            labels.len()
        )));
    }
    Ok(s.graph.bce_with_logits(logits, labels))
}

pub fn ce_loss_value(logits: &[f64], labels: &[f64]) -> Result<f64> {
    let store = crate::params::ParamStore::new();
    let mut s = Session::new(&store, false);
    let l = s.constant(crate::tensor::Tensor::from_vec(&[logits.len()], logits.to_vec())?);
    let loss = ce_loss(&mut s, l, labels)?;
    Ok(s.value(loss).item())
}

/// The objective as a graph node. With `adv = None` the adversarial term is
/// absent from the objective altogether (it may still be logged by the caller).
pub fn total_loss(s: &mut Session, ce: Var, adv: Option<Var>, lambda: f64) -> Result<(Var, LossBreakdown)> {
    let ce_v = s.value(ce).item();
    let adv_v = adv.map(|a| s.value(a).item()).unwrap_or(0.0);
    let breakdown = combine(ce_v, adv_v, lambda)?;
    let total = match adv {
        Some(a) => {
            let weighted = s.graph.scale(a, lambda);
            s.graph.add(ce, weighted)
        }
        None => ce,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indifferent_logit() {
        for y in [0.0, 1.0] {
            let l = ce_loss_value(&[0.0], &[y]).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logit() {
        assert!(ce_loss_value(&[20.0], &[1.0]).unwrap() < 1e-8);
        assert!(ce_loss_value(&[0.3], &[0.5]).is_err());
    }

    #[test]
    fn combine_examples() {
        let b = combine(0.5, 0.3, 1.0).unwrap();
        assert!((b.total - 0.8).abs() < 1e-15);
        assert_eq!(combine(0.5, 0.3, 0.0).unwrap().total, 0.5);
        assert!(combine(0.5, 0.3, -0.1).is_err());
    }

    #[test]
    fn lambda_derivative_is_adv() {
        let (ce, adv, lam, h) = (0.4, 0.9, 1.3, 1e-6);
        let d = (combine(ce, adv, lam + h).unwrap().total - combine(ce, adv, lam - h).unwrap().total) / (2.0 * h);
        assert!((d - adv).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn monotone_and_consistent(ce in 0.0f64..5.0, adv in 0.0f64..5.0, lam in 0.0f64..5.0, d in 0.0f64..1.0) {
            let base = combine(ce, adv, lam).unwrap();
            prop_assert!((base.total - (base.ce + base.lambda * base.adv)).abs() < 1e-12);
            prop_assert!(combine(ce + d, adv, lam).unwrap().total >= base.total);
            prop_assert!(combine(ce, adv + d, lam).unwrap().total >= base.total);
            prop_assert!(combine(ce, adv, lam + d).unwrap().total >= base.total);
        }
    }
}
