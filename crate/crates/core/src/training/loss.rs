//! Classification, regression and soft-threshold losses with their
//! derivatives with respect to the logit (or the regression output).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verifier::sigmoid;

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside logs.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLoss {
    Focal,
    /// Unweighted binary cross-entropy, used for the ablation arm.
    CrossEntropy,
}

impl ClsLoss {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "focal" => Some(ClsLoss::Focal),
            "cross_entropy" | "bce" => Some(ClsLoss::CrossEntropy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClsLoss::Focal => "focal",
            ClsLoss::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub lambda_reg: f64,
    pub lambda_soft: f64,
    pub tau_a: f64,
    pub tau_temp: f64,
    pub cls_loss: ClsLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_beta: 2.0,
            lambda_reg: 0.05,
            lambda_soft: 0.2,
            tau_a: -0.21,
            tau_temp: 0.25,
            cls_loss: ClsLoss::Focal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.focal_alpha,
            self.focal_beta,
            self.lambda_reg,
            self.lambda_soft,
            self.tau_a,
            self.tau_temp,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!(
                "focal_alpha {} not in [0,1]",
                self.focal_alpha
            )));
        }
        if self.focal_beta < 0.0 || self.lambda_reg < 0.0 || self.lambda_soft < 0.0 {
            return Err(Error::Config(
                "focal_beta, lambda_reg, lambda_soft must be >= 0".into(),
            ));
        }
        if self.tau_temp <= 0.0 {
            return Err(Error::Config(format!(
                "tau_temp {} must be > 0",
                self.tau_temp
            )));
        }
        Ok(())
    }
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

pub fn focal_loss(p: f64, y: u8, alpha: f64, beta: f64) -> f64 {
    let p = clamp_p(p);
    if y == 1 {
        -alpha * (1.0 - p).powf(beta) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(beta) * (1.0 - p).ln()
    }
}

/// d focal / d logit.
pub fn focal_grad_logit(p: f64, y: u8, alpha: f64, beta: f64) -> f64 {
    let p = clamp_p(p);
    if y == 1 {
        alpha * (1.0 - p).powf(beta) * (beta * p * p.ln() - (1.0 - p))
    } else {
        (1.0 - alpha) * p.powf(beta) * (p - beta * (1.0 - p) * (1.0 - p).ln())
    }
}

/// Binary cross-entropy against a (possibly soft) target.
pub fn bce(p: f64, target: f64) -> f64 {
    let p = clamp_p(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

pub fn reg_loss(a_hat: f64, y_cont: f64) -> f64 {
    0.5 * (a_hat - y_cont).powi(2)
}

pub fn soft_target(y_cont: f64, tau_a: f64, tau_temp: f64) -> f64 {
    sigmoid((y_cont - tau_a) / tau_temp)
}

pub fn soft_threshold_loss(p: f64, y_cont: f64, tau_a: f64, tau_temp: f64) -> f64 {
    bce(p, soft_target(y_cont, tau_a, tau_temp))
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub soft: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.cls.is_finite()
            && self.soft.is_finite()
            && self.reg.is_finite()
    }
}

/// Per-example loss terms and their derivatives with respect to the logit
/// and the regression output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleLoss {
    pub cls: f64,
    pub soft: f64,
    pub reg: f64,
    pub d_logit: f64,
    pub d_a_hat: f64,
}

pub fn example_loss(logit: f64, a_hat: f64, y: u8, y_cont: f64, cfg: &LossConfig) -> ExampleLoss {
    let p = sigmoid(logit);
    let (cls, d_cls) = match cfg.cls_loss {
        ClsLoss::Focal => (
            focal_loss(p, y, cfg.focal_alpha, cfg.focal_beta),
            focal_grad_logit(p, y, cfg.focal_alpha, cfg.focal_beta),
        ),
        ClsLoss::CrossEntropy => (bce(p, f64::from(y)), p - f64::from(y)),
    };
    let s = soft_target(y_cont, cfg.tau_a, cfg.tau_temp);
    ExampleLoss {
        cls,
        soft: bce(p, s),
        reg: reg_loss(a_hat, y_cont),
        d_logit: d_cls + cfg.lambda_soft * (p - s),
        d_a_hat: cfg.lambda_reg * (a_hat - y_cont),
    }
}

/// `L_cls + λ_soft L_soft + λ_reg L_reg` averaged over the batch.
pub fn joint_loss(
    outputs: &[(f64, f64)],
    targets: &[(u8, f64)],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if outputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Ok(LossBreakdown::default());
    }
    let mut sum = LossBreakdown::default();
    for (&(logit, a_hat), &(y, y_cont)) in outputs.iter().zip(targets) {
        let e = example_loss(logit, a_hat, y, y_cont, cfg);
        sum.cls += e.cls;
        sum.soft += e.soft;
        sum.reg += e.reg;
    }
    let n = outputs.len() as f64;
    Ok(finish(sum, n, cfg))
}

pub(crate) fn finish(sum: LossBreakdown, n: f64, cfg: &LossConfig) -> LossBreakdown {
    let cls = sum.cls / n;
    let soft = sum.soft / n;
    let reg = sum.reg / n;
    LossBreakdown {
        total: cls + cfg.lambda_soft * soft + cfg.lambda_reg * reg,
        cls,
        soft,
        reg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn focal_values() {
        // y = 1, p = 0.5: 0.25 * 0.25 * ln 2
        let v = focal_loss(0.5, 1, 0.25, 2.0);
        assert!((v - 0.0625 * 2f64.ln()).abs() < 1e-15);
        let v = focal_loss(0.5, 0, 0.25, 2.0);
        assert!((v - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-15);
        // beta = 0, alpha = 0.5 is half of BCE
        for &p in &[0.01, 0.3, 0.9] {
            assert!((focal_loss(p, 1, 0.5, 0.0) - 0.5 * bce(p, 1.0)).abs() < 1e-14);
            assert!((focal_loss(p, 0, 0.5, 0.0) - 0.5 * bce(p, 0.0)).abs() < 1e-14);
        }
        assert!(focal_loss(0.0, 1, 0.25, 2.0).is_finite());
        assert!(focal_loss(1.0, 0, 0.25, 2.0).is_finite());
    }

    #[test]
    fn soft_target_at_threshold_is_half() {
        assert_eq!(soft_target(-0.21, -0.21, 0.25), 0.5);
        assert!(soft_target(1.0, -0.21, 0.25) > 0.99);
        assert!(soft_target(-2.0, -0.21, 0.25) < 0.001);
    }

    #[test]
    fn zero_lambdas_reduce_to_classification() {
        let cfg = LossConfig {
            lambda_reg: 0.0,
            lambda_soft: 0.0,
            ..LossConfig::default()
        };
        let outs = [(0.3, 1.0), (-2.0, -0.5), (4.0, 0.1)];
        let tg = [(1u8, 0.4), (0u8, -1.0), (1u8, 2.0)];
        let l = joint_loss(&outs, &tg, &cfg).unwrap();
        assert_eq!(l.total, l.cls);
        assert!(l.reg > 0.0 && l.soft > 0.0);
        assert!(joint_loss(&outs, &tg[..2], &cfg).is_err());
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let h = 1e-6;
        for &cls_loss in &[ClsLoss::Focal, ClsLoss::CrossEntropy] {
            let cfg = LossConfig {
                cls_loss,
                ..LossConfig::default()
            };
            for &p in &[0.03, 0.2, 0.5, 0.77, 0.98] {
                for &(y, yc) in &[(1u8, 0.3), (0u8, -0.9)] {
                    let x = logit(p);
                    let total = |x: f64| {
                        let e = example_loss(x, 0.1, y, yc, &cfg);
                        e.cls + cfg.lambda_soft * e.soft
                    };
                    let num = (total(x + h) - total(x - h)) / (2.0 * h);
                    let ana = example_loss(x, 0.1, y, yc, &cfg).d_logit;
                    assert!(
                        (num - ana).abs() < 1e-7,
                        "{cls_loss:?} p={p} y={y}: {num} vs {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau_temp: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ClsLoss::parse("bce"), Some(ClsLoss::CrossEntropy));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn losses_nonnegative_and_finite(p in 0.0f64..=1.0, y in 0u8..=1, yc in -10.0f64..10.0, a in -10.0f64..10.0) {
                let f = focal_loss(p, y, 0.25, 2.0);
                prop_assert!(f.is_finite() && f >= 0.0);
                let s = soft_threshold_loss(p, yc, -0.21, 0.25);
                prop_assert!(s.is_finite() && s >= 0.0);
                prop_assert!(reg_loss(a, yc) >= 0.0);
            }

            #[test]
            fn focal_is_bounded_by_weighted_bce(p in 0.001f64..0.999, y in 0u8..=1) {
                let w = if y == 1 { 0.25 } else { 0.75 };
                prop_assert!(focal_loss(p, y, 0.25, 2.0) <= w * bce(p, f64::from(y)) + 1e-15);
            }
        }
    }
}
