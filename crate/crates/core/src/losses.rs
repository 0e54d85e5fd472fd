//! Training objectives. Every loss is a node on the graph so the same code
//! serves training, reporting and gradient checks.
//!
//! Hinge terms use `max(0, ·)`, whose subgradient at the kink is taken as 0.

use serde::{Deserialize, Serialize};
use segtrans_autograd::{Float, Graph, Var};

use crate::error::{Error, Result};
use crate::translation::{AbsenceBundle, PresenceBundle};

/// Smoothing added to both sides of the Dice ratio.
pub const DICE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    pub rec: f64,
    pub lat: f64,
    pub cyc: f64,
    pub seg: f64,
    pub cycle_enabled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 3.0, rec: 50.0, lat: 1.0, cyc: 50.0, seg: 0.01, cycle_enabled: true }
    }
}

impl LossWeights {
    pub fn ae_baseline() -> Self {
        Self { adv: 0.0, rec: 1.0, lat: 0.0, cyc: 0.0, seg: 1.0, cycle_enabled: false }
    }

    pub fn seg_only() -> Self {
        Self { adv: 0.0, rec: 0.0, lat: 0.0, cyc: 0.0, seg: 1.0, cycle_enabled: false }
    }

    pub fn zero() -> Self {
        Self { adv: 0.0, rec: 0.0, lat: 0.0, cyc: 0.0, seg: 0.0, cycle_enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("adv", self.adv), ("rec", self.rec), ("lat", self.lat), ("cyc", self.cyc), ("seg", self.seg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one step. `total` is the generator objective;
/// `adv_d` is reported alongside for the discriminator step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg: f64,
    pub rec: f64,
    pub lat: f64,
    pub cyc: f64,
    pub adv_g: f64,
    pub adv_d: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.total, self.seg, self.rec, self.lat, self.cyc, self.adv_g, self.adv_d].iter().all(|v| v.is_finite())
    }
}

fn scalar<F: Float>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

fn one_minus<F: Float>(g: &mut Graph<F>, x: Var) -> Var {
    let neg = g.scale(x, -F::one());
    g.add_scalar(neg, F::one())
}

/// `1 − (2Σpt + ε) / (Σp + Σt + ε)` pooled over every element.
pub fn dice_loss<F: Float>(g: &mut Graph<F>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Input(format!("dice: prediction {:?} vs target {:?}", g.shape(pred), g.shape(target))));
    }
    let eps = F::lit(DICE_EPS);
    let prod = g.mul(pred, target)?;
    let inter = g.sum_all(prod);
    let num = g.scale(inter, F::lit(2.0));
    let num = g.add_scalar(num, eps);
    let sp = g.sum_all(pred);
    let st = g.sum_all(target);
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den)?;
    Ok(one_minus(g, ratio))
}

/// Mean absolute difference.
pub fn l1_loss<F: Float>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Input(format!("l1: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

fn sum_vars<F: Float>(g: &mut Graph<F>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `|x_P − x_PP| + |x_A − x_AA|`.
pub fn reconstruction_loss<F: Float>(g: &mut Graph<F>, p: &PresenceBundle, a: &AbsenceBundle) -> Result<Var> {
    let lp = l1_loss(g, p.x_p, p.x_pp)?;
    let la = l1_loss(g, a.x_a, a.x_aa)?;
    Ok(g.add(lp, la)?)
}

/// Six code-matching terms: the common code survives translation and
/// reconstruction in both directions, and the unique code survives
/// presence reconstruction and sampling.
pub fn latent_loss<F: Float>(g: &mut Graph<F>, p: &PresenceBundle, a: &AbsenceBundle) -> Result<Var> {
    let pairs = [
        (p.common_p, p.common_pa),
        (a.common_a, a.common_ap),
        (a.common_a, a.common_aa),
        (p.common_p, p.common_pp),
        (p.unique_p, p.unique_pp),
        (a.u_sampled, a.unique_ap),
    ];
    let terms = pairs.iter().map(|&(x, y)| l1_loss(g, x, y)).collect::<Result<Vec<_>>>()?;
    sum_vars(g, &terms)
}

/// `|x_A − x_APA|`, or `None` when the cycle is disabled or was not computed.
pub fn cycle_loss<F: Float>(g: &mut Graph<F>, a: &AbsenceBundle, enabled: bool) -> Result<Option<Var>> {
    if !enabled {
        return Ok(None);
    }
    let x_apa = a.x_apa.ok_or(Error::Variant { variant: "absence bundle", what: "cycle reconstruction" })?;
    Ok(Some(l1_loss(g, a.x_a, x_apa)?))
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn hinge_discriminator_loss<F: Float>(g: &mut Graph<F>, real: Var, fake: Var) -> Result<Var> {
    let r = one_minus(g, real);
    let r = g.relu(r);
    let r = g.mean_all(r);
    let f = g.add_scalar(fake, F::one());
    let f = g.relu(f);
    let f = g.mean_all(f);
    Ok(g.add(r, f)?)
}

/// `−mean(fake)`.
pub fn hinge_generator_loss<F: Float>(g: &mut Graph<F>, fake: Var) -> Var {
    let m = g.mean_all(fake);
    g.scale(m, -F::one())
}

/// Unweighted terms of the generator objective; `None` terms are absent
/// from the step and contribute 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct GeneratorTerms {
    pub seg: Option<Var>,
    pub rec: Option<Var>,
    pub lat: Option<Var>,
    pub cyc: Option<Var>,
    pub adv: Option<Var>,
}

/// `Σ λ_i · term_i`. Terms with zero weight are left out of the graph so
/// they contribute no gradient.
pub fn weighted_total<F: Float>(g: &mut Graph<F>, terms: &GeneratorTerms, weights: &LossWeights) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let value = |g: &Graph<F>, v: Option<Var>| v.map_or(0.0, |v| scalar(g, v));
    let mut report = LossReport {
        seg: value(g, terms.seg),
        rec: value(g, terms.rec),
        lat: value(g, terms.lat),
        cyc: value(g, terms.cyc),
        adv_g: value(g, terms.adv),
        ..LossReport::default()
    };
    let weighted = [
        (terms.seg, weights.seg),
        (terms.rec, weights.rec),
        (terms.lat, weights.lat),
        (terms.cyc, weights.cyc),
        (terms.adv, weights.adv),
    ];
    let mut parts = Vec::new();
    for (term, w) in weighted {
        if let Some(t) = term {
            if w != 0.0 {
                parts.push(g.scale(t, F::lit(w)));
            }
        }
    }
    let total = if parts.is_empty() { g.constant(segtrans_autograd::Tensor::scalar(F::zero())) } else { sum_vars(g, &parts)? };
    report.total = scalar(g, total);
    Ok((total, report))
}

/// The full translation-assisted objective for one step.
///
/// `seg_target` holds masks for the rows of `p.y_seg`; with no labeled
/// rows the segmentation term is 0. `fake_scores` are the discriminator
/// scores of `(x_PA, x_AP)`.
pub fn total_generator_loss<F: Float>(
    g: &mut Graph<F>,
    p: &PresenceBundle,
    a: &AbsenceBundle,
    fake_scores: Option<(Var, Var)>,
    seg_target: Option<Var>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let seg = match (p.y_seg, seg_target) {
        (Some(y), Some(t)) => Some(dice_loss(g, y, t)?),
        (None, None) => None,
        _ => return Err(Error::Input("segmentation output and targets must both be present or both absent".into())),
    };
    let rec = Some(reconstruction_loss(g, p, a)?);
    let lat = Some(latent_loss(g, p, a)?);
    let cyc = cycle_loss(g, a, weights.cycle_enabled)?;
    let adv = match fake_scores {
        Some((s_pa, s_ap)) => {
            let la = hinge_generator_loss(g, s_pa);
            let lp = hinge_generator_loss(g, s_ap);
            Some(g.add(la, lp)?)
        }
        None => None,
    };
    weighted_total(g, &GeneratorTerms { seg, rec, lat, cyc, adv }, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use segtrans_autograd::Tensor;

    fn eval(build: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = build(&mut g);
        g.value(v).data()[0]
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let ones = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        assert!(eval(|g| {
            let p = g.constant(ones.clone());
            let q = g.constant(ones.clone());
            dice_loss(g, p, q).unwrap()
        })
        .abs()
            < 1e-12);
        let v = eval(|g| {
            let p = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
            let q = g.constant(ones.clone());
            dice_loss(g, p, q).unwrap()
        });
        assert!((v - 1.0).abs() < 1e-8);
        let pred: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        let target: Vec<f64> = (0..16).map(|i| if (4..12).contains(&i) { 1.0 } else { 0.0 }).collect();
        let v = eval(|g| {
            let p = g.constant(t(&[1, 1, 4, 4], &pred));
            let q = g.constant(t(&[1, 1, 4, 4], &target));
            dice_loss(g, p, q).unwrap()
        });
        assert!((v - 0.5).abs() < 1e-8);
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let q = g.constant(Tensor::zeros(&[1, 1, 4, 3]));
        assert!(dice_loss(&mut g, p, q).is_err());
    }

    #[test]
    fn empty_vs_empty_dice_is_zero() {
        let v = eval(|g| {
            let p = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
            let q = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
            dice_loss(g, p, q).unwrap()
        });
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let v = eval(|g| {
            let a = g.constant(t(&[3], &[1.0, -1.0, 3.0]));
            let b = g.constant(Tensor::zeros(&[3]));
            l1_loss(g, a, b).unwrap()
        });
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
        let v = eval(|g| {
            let a = g.constant(Tensor::ones(&[2, 2]));
            let b = g.constant(Tensor::zeros(&[2, 2]));
            l1_loss(g, a, b).unwrap()
        });
        assert_eq!(v, 1.0);
    }

    #[test]
    fn hinge_examples() {
        let d = |real: &[f64], fake: &[f64]| {
            eval(|g| {
                let r = g.constant(t(&[real.len()], real));
                let f = g.constant(t(&[fake.len()], fake));
                hinge_discriminator_loss(g, r, f).unwrap()
            })
        };
        assert_eq!(d(&[1.0, 1.0], &[-1.0, -1.0]), 0.0);
        assert_eq!(d(&[0.0, 0.0], &[0.0, 0.0]), 2.0);
        assert_eq!(d(&[2.0, 2.0], &[-3.0, -3.0]), 0.0);
        let gl = |fake: &[f64]| {
            eval(|g| {
                let f = g.constant(t(&[fake.len()], fake));
                hinge_generator_loss(g, f)
            })
        };
        assert_eq!(gl(&[0.5, 0.5]), -0.5);
        assert_eq!(gl(&[0.0, 0.0]), 0.0);
        assert_eq!(gl(&[1.0, -1.0]), 0.0);
    }

    #[test]
    fn weights_validate_and_presets() {
        assert!(LossWeights { rec: -1.0, ..LossWeights::default() }.validate().is_err());
        let d = LossWeights::default();
        assert_eq!((d.adv, d.rec, d.lat, d.cyc, d.seg), (3.0, 50.0, 1.0, 50.0, 0.01));
        let ae = LossWeights::ae_baseline();
        assert_eq!((ae.rec, ae.seg, ae.adv, ae.lat, ae.cyc), (1.0, 1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::scalar(1.5));
        let terms = GeneratorTerms { seg: Some(a), rec: Some(a), lat: Some(a), cyc: Some(a), adv: Some(a) };
        let (total, report) = weighted_total(&mut g, &terms, &LossWeights::zero()).unwrap();
        assert_eq!(report.total, 0.0);
        assert_eq!(report.rec, 1.5);
        assert_eq!(g.value(total).data(), &[0.0]);
        assert!(g.backward(total).unwrap().grad(a).is_none());
    }
}
