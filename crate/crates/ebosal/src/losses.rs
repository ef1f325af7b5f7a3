//! Training objectives for the separator and the scorer.
//!
//! The separator objective pushes labeled (known) samples below an energy
//! margin and pseudo-unknown samples above another, widens the gap between
//! the two groups' mean energies, and discourages confident predictions on
//! pseudo-unknowns via complementary labels. The scorer objective is plain
//! cross entropy plus a hinge keeping head energies below a margin.
//!
//! Normalization is part of each definition: hinge terms are per-batch
//! sums, the gap and complementary-label terms are means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

/// Probability floor inside the complementary-label log.
pub const NL_PROB_FLOOR: f64 = 1e-12;

/// Energy margins and term weights.
///
/// Defaults suit the bundled low-dimensional synthetic tasks, where free
/// energies land in single digits. [`MarginConfig::wide_range`] is a preset
/// for models whose energies span tens of units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    /// Known samples are pushed below this free energy.
    pub delta_k: f64,
    /// Pseudo-unknown samples are pushed above this free energy.
    pub delta_u: f64,
    /// Scorer head energies are pushed below this value.
    pub delta_s: f64,
    /// Weight of the mean-energy gap term.
    pub lambda: f64,
    /// Weight of the complementary-label term.
    pub gamma: f64,
    /// Weight of the scorer energy regularizer.
    pub alpha: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            delta_k: -4.0,
            delta_u: -1.0,
            delta_s: -3.0,
            lambda: 0.2,
            gamma: 0.2,
            alpha: 0.1,
        }
    }
}

impl MarginConfig {
    /// Margins for models whose free energies span a much wider range than
    /// the desk-scale tasks (deep image backbones and the like).
    pub fn wide_range() -> Self {
        MarginConfig {
            delta_k: -23.0,
            delta_u: -5.0,
            delta_s: -20.0,
            ..MarginConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("margins.delta_k", self.delta_k),
            ("margins.delta_u", self.delta_u),
            ("margins.delta_s", self.delta_s),
            ("margins.lambda", self.lambda),
            ("margins.gamma", self.gamma),
            ("margins.alpha", self.alpha),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{} must be finite, got {}", name, v)));
            }
        }
        if self.delta_k >= self.delta_u {
            return Err(Error::Config(format!(
                "margins.delta_k ({}) must be strictly below margins.delta_u ({})",
                self.delta_k, self.delta_u
            )));
        }
        for (name, v) in [
            ("margins.lambda", self.lambda),
            ("margins.gamma", self.gamma),
            ("margins.alpha", self.alpha),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!(
                    "{} must be non-negative, got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

/// sum relu(e - margin)^2 over one energy vector.
fn squared_hinge_above(tape: &mut Tape, e: NodeId, margin: f64) -> Result<NodeId> {
    let shifted = tape.add_scalar(e, -margin)?;
    let r = tape.relu(shifted)?;
    let sq = tape.mul(r, r)?;
    tape.sum(sq)
}

/// sum relu(margin - e)^2 over one energy vector.
fn squared_hinge_below(tape: &mut Tape, e: NodeId, margin: f64) -> Result<NodeId> {
    let neg = tape.scale(e, -1.0)?;
    let shifted = tape.add_scalar(neg, margin)?;
    let r = tape.relu(shifted)?;
    let sq = tape.mul(r, r)?;
    tape.sum(sq)
}

/// Two-sided squared hinge on free energies: labeled samples above
/// `delta_k` and pseudo-unknowns below `delta_u` are penalized. Either side
/// may be absent, not both.
pub fn hinge_separation_loss(
    tape: &mut Tape,
    e_known: Option<NodeId>,
    e_pseudo: Option<NodeId>,
    delta_k: f64,
    delta_u: f64,
) -> Result<NodeId> {
    let known = e_known.map(|e| squared_hinge_above(tape, e, delta_k)).transpose()?;
    let pseudo = e_pseudo.map(|e| squared_hinge_below(tape, e, delta_u)).transpose()?;
    match (known, pseudo) {
        (Some(k), Some(p)) => tape.add(k, p),
        (Some(k), None) => Ok(k),
        (None, Some(p)) => Ok(p),
        (None, None) => Err(Error::Contract(
            "separation hinge needs at least one energy group".into(),
        )),
    }
}

/// mean(e_known) - mean(e_pseudo); negative once the groups separate the
/// right way around.
pub fn contrastive_energy_gap(tape: &mut Tape, e_known: NodeId, e_pseudo: NodeId) -> Result<NodeId> {
    let mk = tape.mean(e_known)?;
    let mp = tape.mean(e_pseudo)?;
    tape.sub(mk, mp)
}

/// Complementary-label loss: mean of -log(1 - p[label]) over rows of a
/// probability matrix. The log argument is floored at [`NL_PROB_FLOOR`], so
/// a row that puts all mass on its complementary label contributes a large
/// finite penalty instead of an infinity.
pub fn negative_learning_loss(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::Contract("complementary-label loss over zero rows".into()));
    }
    let picked = tape.gather_cols(probs, labels)?;
    let neg = tape.scale(picked, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let ln = tape.ln_clamped(one_minus, NL_PROB_FLOOR)?;
    let nll = tape.scale(ln, -1.0)?;
    tape.mean(nll)
}

/// Which optional separator terms were actually present in a batch.
#[derive(Debug, Clone, Copy)]
pub struct EkusLossTerms {
    pub total: NodeId,
    /// True when the gap term was configured but a group was missing.
    pub contrastive_skipped: bool,
    /// True when the complementary-label term was configured but no rows
    /// were available.
    pub negative_skipped: bool,
}

/// Full separator objective: hinge + lambda * gap + gamma * complementary.
///
/// Terms with zero weight are not built at all, so with lambda = gamma = 0
/// the result is bit-identical to the bare hinge.
pub fn ekus_loss(
    tape: &mut Tape,
    e_known: Option<NodeId>,
    e_pseudo: Option<NodeId>,
    nl: Option<(NodeId, &[usize])>,
    margins: &MarginConfig,
) -> Result<EkusLossTerms> {
    let mut total = hinge_separation_loss(tape, e_known, e_pseudo, margins.delta_k, margins.delta_u)?;
    let mut contrastive_skipped = false;
    let mut negative_skipped = false;

    if margins.lambda != 0.0 {
        if let (Some(k), Some(p)) = (e_known, e_pseudo) {
            let gap = contrastive_energy_gap(tape, k, p)?;
            let weighted = tape.scale(gap, margins.lambda)?;
            total = tape.add(total, weighted)?;
        } else {
            contrastive_skipped = true;
        }
    }

    if margins.gamma != 0.0 {
        match nl {
            Some((probs, labels)) if !labels.is_empty() => {
                let nll = negative_learning_loss(tape, probs, labels)?;
                let weighted = tape.scale(nll, margins.gamma)?;
                total = tape.add(total, weighted)?;
            }
            _ => negative_skipped = true,
        }
    }

    Ok(EkusLossTerms {
        total,
        contrastive_skipped,
        negative_skipped,
    })
}

/// sum relu(e - delta_s)^2: keeps scorer head energies below the margin.
pub fn ess_regularizer(tape: &mut Tape, e_ess: NodeId, delta_s: f64) -> Result<NodeId> {
    squared_hinge_above(tape, e_ess, delta_s)
}

/// Scorer objective: cross entropy + alpha * energy regularizer. With
/// alpha = 0 the returned node is exactly the cross-entropy node.
pub fn ess_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    e_ess: NodeId,
    alpha: f64,
    delta_s: f64,
) -> Result<NodeId> {
    let ce = tape.softmax_cross_entropy(logits, targets)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    if alpha < 0.0 {
        return Err(Error::Config(format!(
            "margins.alpha must be non-negative, got {}",
            alpha
        )));
    }
    let reg = ess_regularizer(tape, e_ess, delta_s)?;
    let weighted = tape.scale(reg, alpha)?;
    tape.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn vecnode(tape: &mut Tape, v: &[f64]) -> NodeId {
        tape.leaf(Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    fn scalar(tape: &Tape, id: NodeId) -> f64 {
        tape.value(id).item().unwrap()
    }

    /// Direct-summation oracle for the two-sided hinge.
    fn hinge_oracle(known: &[f64], pseudo: &[f64], dk: f64, du: f64) -> f64 {
        let k: f64 = known.iter().map(|e| (e - dk).max(0.0).powi(2)).sum();
        let p: f64 = pseudo.iter().map(|e| (du - e).max(0.0).powi(2)).sum();
        k + p
    }

    #[test]
    fn hinge_matches_direct_summation() {
        let known = [-2.0, -5.0];
        let pseudo = [1.0, -3.0];
        let (dk, du) = (-4.0, -1.0);
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &known);
        let ep = vecnode(&mut t, &pseudo);
        let h = hinge_separation_loss(&mut t, Some(ek), Some(ep), dk, du).unwrap();
        let expect = hinge_oracle(&known, &pseudo, dk, du);
        assert!((scalar(&t, h) - expect).abs() < 1e-12);
        // Violations on exactly one side each: (-2+4)^2 + (-1+3)^2.
        assert_eq!(expect, 8.0);
    }

    #[test]
    fn hinge_zero_inside_margins() {
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &[-6.0, -4.5]);
        let ep = vecnode(&mut t, &[-0.5, 2.0]);
        let h = hinge_separation_loss(&mut t, Some(ek), Some(ep), -4.0, -1.0).unwrap();
        assert_eq!(scalar(&t, h), 0.0);
    }

    #[test]
    fn hinge_single_sided_and_empty() {
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &[-2.0]);
        let h = hinge_separation_loss(&mut t, Some(ek), None, -4.0, -1.0).unwrap();
        assert_eq!(scalar(&t, h), 4.0);
        assert!(matches!(
            hinge_separation_loss(&mut t, None, None, -4.0, -1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hinge_grows_with_violation() {
        let loss_at = |e: f64| {
            let mut t = Tape::new();
            let ek = vecnode(&mut t, &[e]);
            let h = hinge_separation_loss(&mut t, Some(ek), None, -4.0, -1.0).unwrap();
            scalar(&t, h)
        };
        assert!(loss_at(-3.0) < loss_at(-2.0));
        assert!(loss_at(-2.0) < loss_at(0.0));
    }

    #[test]
    fn contrastive_gap_reference() {
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &[-10.0, -8.0]);
        let ep = vecnode(&mut t, &[0.0]);
        let g = contrastive_energy_gap(&mut t, ek, ep).unwrap();
        assert!((scalar(&t, g) + 9.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gap_zero_for_identical_groups() {
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &[-3.0]);
        let ep = vecnode(&mut t, &[-3.0]);
        let g = contrastive_energy_gap(&mut t, ek, ep).unwrap();
        assert_eq!(scalar(&t, g), 0.0);
    }

    #[test]
    fn negative_learning_reference_and_clamp() {
        let mut t = Tape::new();
        let probs = t.leaf(Tensor::from_rows(&[vec![0.25, 0.75]]).unwrap());
        let l = negative_learning_loss(&mut t, probs, &[0]).unwrap();
        assert!((scalar(&t, l) + 0.75f64.ln()).abs() < 1e-12);

        // Complementary label holds all mass: clamp keeps the loss finite.
        let mut t = Tape::new();
        let probs = t.leaf(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap());
        let l = negative_learning_loss(&mut t, probs, &[1]).unwrap();
        let expect = -NL_PROB_FLOOR.ln();
        assert!((scalar(&t, l) - expect).abs() < 1e-9);
        assert!(scalar(&t, l).is_finite());

        // Zero mass on the complementary label costs nothing.
        let mut t = Tape::new();
        let probs = t.leaf(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap());
        let l = negative_learning_loss(&mut t, probs, &[0]).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
    }

    #[test]
    fn ekus_loss_matches_term_oracle() {
        let known = [-2.0, -5.0];
        let pseudo = [1.0, -3.0];
        let margins = MarginConfig::default();
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &known);
        let ep = vecnode(&mut t, &pseudo);
        let probs = t.leaf(Tensor::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap());
        let out = ekus_loss(&mut t, Some(ek), Some(ep), Some((probs, &[0, 1])), &margins).unwrap();
        assert!(!out.contrastive_skipped);
        assert!(!out.negative_skipped);

        let hinge = hinge_oracle(&known, &pseudo, margins.delta_k, margins.delta_u);
        let gap = (-2.0 + -5.0) / 2.0 - (1.0 + -3.0) / 2.0;
        let nl = (-(0.75f64.ln()) + -(0.5f64.ln())) / 2.0;
        let expect = hinge + margins.lambda * gap + margins.gamma * nl;
        assert!((scalar(&t, out.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn ekus_loss_zero_weights_is_exactly_hinge() {
        let margins = MarginConfig {
            lambda: 0.0,
            gamma: 0.0,
            ..MarginConfig::default()
        };
        let build = |with_extras: bool| -> (f64, usize) {
            let mut t = Tape::new();
            let ek = vecnode(&mut t, &[-2.0, -5.0]);
            let ep = vecnode(&mut t, &[1.0, -3.0]);
            let probs = t.leaf(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
            let total = if with_extras {
                ekus_loss(&mut t, Some(ek), Some(ep), Some((probs, &[0])), &margins)
                    .unwrap()
                    .total
            } else {
                hinge_separation_loss(&mut t, Some(ek), Some(ep), margins.delta_k, margins.delta_u)
                    .unwrap()
            };
            (scalar(&t, total), t.len())
        };
        let (full, full_nodes) = build(true);
        let (hinge, hinge_nodes) = build(false);
        assert_eq!(full.to_bits(), hinge.to_bits());
        // Zero-weight terms must not even appear on the tape.
        assert_eq!(full_nodes, hinge_nodes);
    }

    #[test]
    fn ekus_loss_skips_missing_groups() {
        let margins = MarginConfig::default();
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &[-2.0]);
        let out = ekus_loss(&mut t, Some(ek), None, None, &margins).unwrap();
        assert!(out.contrastive_skipped);
        assert!(out.negative_skipped);
        assert!((scalar(&t, out.total) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ess_regularizer_reference() {
        let mut t = Tape::new();
        let e = vecnode(&mut t, &[2.0]);
        let r = ess_regularizer(&mut t, e, -3.0).unwrap();
        assert_eq!(scalar(&t, r), 25.0);

        let mut t = Tape::new();
        let e = vecnode(&mut t, &[-4.0, -3.0]);
        let r = ess_regularizer(&mut t, e, -3.0).unwrap();
        assert_eq!(scalar(&t, r), 0.0);
    }

    #[test]
    fn ess_loss_reference_and_alpha_zero() {
        // Uniform 4-class logits plus one violating energy.
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::from_rows(&[vec![0.0; 4]]).unwrap());
        let e = vecnode(&mut t, &[2.0]);
        let l = ess_loss(&mut t, logits, &[1], e, 0.1, -3.0).unwrap();
        let expect = 4.0f64.ln() + 0.1 * 25.0;
        assert!((scalar(&t, l) - expect).abs() < 1e-12);

        // alpha = 0 returns the cross-entropy node itself.
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::from_rows(&[vec![0.0; 4]]).unwrap());
        let e = vecnode(&mut t, &[2.0]);
        let ce = t.softmax_cross_entropy(logits, &[1]).unwrap();
        let nodes_before = t.len();
        let l = ess_loss(&mut t, logits, &[1], e, 0.0, -3.0).unwrap();
        assert_eq!(scalar(&t, l).to_bits(), scalar(&t, ce).to_bits());
        assert_eq!(t.len(), nodes_before + 1);
    }

    #[test]
    fn margin_validation_names_offending_key() {
        let bad = MarginConfig {
            delta_k: -1.0,
            delta_u: -2.0,
            ..MarginConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("margins.delta_k"), "message was: {}", err);

        let bad = MarginConfig {
            lambda: -0.5,
            ..MarginConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("margins.lambda"), "message was: {}", err);

        assert!(MarginConfig::default().validate().is_ok());
        assert!(MarginConfig::wide_range().validate().is_ok());
    }

    /// Central differences on the full separator objective.
    #[test]
    fn fd_ekus_loss_gradients() {
        let margins = MarginConfig::default();
        // Energies kept clear of hinge corners and probabilities well inside
        // (0, 1) so the objective is smooth around the evaluation point.
        let known0 = vec![-2.0, -5.5, -3.4];
        let pseudo0 = vec![0.8, -2.6];
        let h = 1e-5;
        let eval = |known: &[f64], pseudo: &[f64]| -> f64 {
            let mut t = Tape::new();
            let ek = vecnode(&mut t, known);
            let ep = vecnode(&mut t, pseudo);
            let probs = t.leaf(Tensor::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap());
            let out = ekus_loss(&mut t, Some(ek), Some(ep), Some((probs, &[0, 1])), &margins).unwrap();
            scalar(&t, out.total)
        };
        let mut t = Tape::new();
        let ek = vecnode(&mut t, &known0);
        let ep = vecnode(&mut t, &pseudo0);
        let probs = t.leaf(Tensor::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap());
        let out = ekus_loss(&mut t, Some(ek), Some(ep), Some((probs, &[0, 1])), &margins).unwrap();
        t.backward(out.total).unwrap();

        for i in 0..known0.len() {
            let mut plus = known0.clone();
            let mut minus = known0.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (eval(&plus, &pseudo0) - eval(&minus, &pseudo0)) / (2.0 * h);
            let a = t.grad(ek).data()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-6);
        }
        for i in 0..pseudo0.len() {
            let mut plus = pseudo0.clone();
            let mut minus = pseudo0.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (eval(&known0, &plus) - eval(&known0, &minus)) / (2.0 * h);
            let a = t.grad(ep).data()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-6);
        }
    }
}
