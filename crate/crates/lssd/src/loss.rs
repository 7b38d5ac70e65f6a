//! Loss and weighting mathematics: MLE loss with label smoothing,
//! distillation cross-entropy, sentence probability, sample-level weights
//! for the Whole/Selective/Adaptive variants, and the combined objective.

use crate::data::IdMatrix;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Baseline,
    LssdWhole,
    LssdSelective,
    LssdAdaptive,
    Stsd,
}

impl LossMode {
    pub fn distills(&self) -> bool {
        !matches!(self, LossMode::Baseline)
    }

    pub fn weight_rule(&self) -> WeightRule {
        match self {
            LossMode::LssdSelective => WeightRule::Selective,
            LossMode::LssdAdaptive => WeightRule::Adaptive,
            _ => WeightRule::Whole,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Baseline => "baseline",
            LossMode::LssdWhole => "lssd_whole",
            LossMode::LssdSelective => "lssd_selective",
            LossMode::LssdAdaptive => "lssd_adaptive",
            LossMode::Stsd => "stsd",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(LossMode::Baseline),
            "lssd_whole" => Ok(LossMode::LssdWhole),
            "lssd_selective" => Ok(LossMode::LssdSelective),
            "lssd_adaptive" => Ok(LossMode::LssdAdaptive),
            "stsd" => Ok(LossMode::Stsd),
            other => Err(Error::InvalidArgument(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRule {
    Whole,
    Selective,
    Adaptive,
}

/// How sentence probability aggregates per-token probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SentenceProb {
    #[default]
    Arithmetic,
    Geometric,
}

impl std::str::FromStr for SentenceProb {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arith" => Ok(SentenceProb::Arithmetic),
            "geom" => Ok(SentenceProb::Geometric),
            other => Err(Error::InvalidArgument(format!("unknown sentence_prob {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub label_smoothing: f64,
    pub mode: LossMode,
    pub sentence_prob: SentenceProb,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 2.0,
            sigma: 2.0,
            label_smoothing: 0.1,
            mode: LossMode::Baseline,
            sentence_prob: SentenceProb::Arithmetic,
        }
    }
}

/// Scalar components of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub nmt_loss: f64,
    /// Token-mean distillation loss, pre-alpha, post-G. Zero when the
    /// switch was off.
    pub distill_loss: f64,
    pub g_values: Vec<f64>,
    pub combined: f64,
}

fn mask_total(mask: &[f32]) -> Result<f64> {
    let total: f64 = mask.iter().map(|&m| m as f64).sum();
    if total == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(total)
}

/// Token-mean label-smoothed cross entropy over masked positions:
/// -sum_w q_w log p_w with q = (1-eps) onehot(target) + eps/|V|.
pub fn nmt_loss(
    tape: &mut Tape,
    distributions: NodeId,
    targets: &IdMatrix,
    mask: &[f32],
    label_smoothing: f64,
) -> Result<NodeId> {
    let shape = tape.shape(distributions).to_vec();
    if shape.len() != 3 || shape[0] != targets.rows || shape[1] != targets.cols {
        return Err(Error::ShapeMismatch {
            op: "nmt_loss",
            lhs: shape,
            rhs: vec![targets.rows, targets.cols],
        });
    }
    if mask.len() != targets.rows * targets.cols {
        return Err(Error::ShapeMismatch {
            op: "nmt_loss",
            lhs: vec![mask.len()],
            rhs: vec![targets.rows * targets.cols],
        });
    }
    let v = shape[2];
    let total = mask_total(mask)?;
    let eps = label_smoothing;
    let mut q = vec![eps / v as f64; targets.rows * targets.cols * v];
    for (i, &t) in targets.data.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        q[i * v + t as usize] += 1.0 - eps;
    }
    let q = tape.constant(vec![targets.rows, targets.cols, v], q)?;
    let w: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
    let w = tape.constant(vec![targets.rows, targets.cols, 1], w)?;

    let logp = tape.log_clamped(distributions)?;
    let prod = tape.mul(q, logp)?;
    let per_tok = tape.sum_last(prod)?;
    let masked = tape.mul(per_tok, w)?;
    let s = tape.sum_all(masked)?;
    tape.scale(s, -1.0 / total)
}

/// Token-mean distillation cross-entropy between a constant teacher and the
/// student, rescaled per sample by `g`. Gradient flows into the student only.
pub fn distill_loss(
    tape: &mut Tape,
    teacher: &Tensor,
    student: NodeId,
    mask: &[f32],
    g: &[f64],
) -> Result<NodeId> {
    let shape = tape.shape(student).to_vec();
    if teacher.shape != shape {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: teacher.shape.clone(),
            rhs: shape,
        });
    }
    if shape.len() != 3 || g.len() != shape[0] || mask.len() != shape[0] * shape[1] {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: vec![g.len(), mask.len()],
            rhs: shape,
        });
    }
    if let Some(&bad) = g.iter().find(|&&x| x < 0.0) {
        return Err(Error::InvalidArgument(format!("negative sample weight {bad}")));
    }
    let (b, t) = (shape[0], shape[1]);
    let total = mask_total(mask)?;

    // Teacher distributions enter as a constant leaf: no gradient path.
    let teacher_node = tape.leaf(teacher)?;
    // Per-position weight: mask * per-sample g.
    let w: Vec<f64> =
        (0..b * t).map(|i| mask[i] as f64 * g[i / t]).collect();
    let w = tape.constant(vec![b, t, 1], w)?;

    let logp = tape.log_clamped(student)?;
    let prod = tape.mul(teacher_node, logp)?;
    let per_tok = tape.sum_last(prod)?;
    let weighted = tape.mul(per_tok, w)?;
    let s = tape.sum_all(weighted)?;
    tape.scale(s, -1.0 / total)
}

/// Sentence probability P(y|x): mean over masked positions of the
/// probability assigned to the target token.
pub fn sentence_probability(
    distributions: &Tensor,
    targets: &[u32],
    mask: &[f32],
    kind: SentenceProb,
) -> Result<f64> {
    if distributions.shape.len() != 2 || distributions.shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "sentence_probability",
            lhs: distributions.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    if mask.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "sentence_probability",
            lhs: vec![mask.len()],
            rhs: vec![targets.len()],
        });
    }
    let v = distributions.shape[1];
    let mut count = 0.0;
    let mut acc = 0.0;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m == 0.0 {
            continue;
        }
        let p = (distributions.values[i * v + t as usize] as f64).max(1e-9);
        match kind {
            SentenceProb::Arithmetic => acc += p,
            SentenceProb::Geometric => acc += p.ln(),
        }
        count += 1.0;
    }
    if count == 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(match kind {
        SentenceProb::Arithmetic => acc / count,
        SentenceProb::Geometric => (acc / count).exp(),
    })
}

/// Sample-level distillation weight G.
pub fn sample_weight(rule: WeightRule, p_teacher: f64, p_student: f64, sigma: f64) -> Result<f64> {
    if !(p_teacher > 0.0 && p_teacher <= 1.0 && p_student > 0.0 && p_student <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sentence probabilities must lie in (0,1]: teacher {p_teacher}, student {p_student}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(match rule {
        WeightRule::Whole => 1.0,
        WeightRule::Selective => {
            if p_teacher >= p_student {
                1.0
            } else {
                0.0
            }
        }
        WeightRule::Adaptive => (p_teacher / p_student).min(sigma),
    })
}

/// L = L_NMT + alpha * L_LSSD when the switch is on; L_NMT otherwise.
pub fn combined_loss(
    tape: &mut Tape,
    nmt: NodeId,
    distill: Option<NodeId>,
    alpha: f64,
    switch_on: bool,
) -> Result<NodeId> {
    match distill {
        Some(d) if switch_on => {
            let scaled = tape.scale(d, alpha)?;
            tape.add(nmt, scaled)
        }
        _ => Ok(nmt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist_leaf(tape: &mut Tape, b: usize, t: usize, rows: &[Vec<f64>], grad: bool) -> NodeId {
        let v = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(r);
        }
        assert_eq!(data.len(), b * t * v);
        tape.leaf_f64(vec![b, t, v], data, grad).unwrap()
    }

    #[test]
    fn nmt_loss_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let d = dist_leaf(&mut tape, 1, 1, &[vec![0.25; 4]], false);
        let targets = IdMatrix::new(1, 1, vec![2]);
        let l = nmt_loss(&mut tape, d, &targets, &[1.0], 0.0).unwrap();
        assert!((tape.value(l)[0] - 4.0f64.ln()).abs() < 1e-9);
        // Smoothing has no effect on a uniform distribution.
        let l2 = nmt_loss(&mut tape, d, &targets, &[1.0], 0.1).unwrap();
        assert!((tape.value(l2)[0] - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn nmt_loss_hand_checked_value() {
        let mut tape = Tape::new();
        let d = dist_leaf(&mut tape, 1, 1, &[vec![0.7, 0.1, 0.1, 0.1]], false);
        let targets = IdMatrix::new(1, 1, vec![0]);
        let l = nmt_loss(&mut tape, d, &targets, &[1.0], 0.0).unwrap();
        assert!((tape.value(l)[0] - 0.356675).abs() < 1e-6);
    }

    #[test]
    fn nmt_loss_rejects_all_zero_mask() {
        let mut tape = Tape::new();
        let d = dist_leaf(&mut tape, 1, 1, &[vec![0.25; 4]], false);
        let targets = IdMatrix::new(1, 1, vec![0]);
        assert!(matches!(
            nmt_loss(&mut tape, d, &targets, &[0.0], 0.0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn nmt_loss_masks_padding() {
        // Two positions; second is padding with a wild distribution. Loss
        // must equal the single-position loss.
        let mut tape = Tape::new();
        let d = dist_leaf(
            &mut tape,
            1,
            2,
            &[vec![0.7, 0.1, 0.1, 0.1], vec![0.97, 0.01, 0.01, 0.01]],
            false,
        );
        let targets = IdMatrix::new(1, 2, vec![0, 3]);
        let l = nmt_loss(&mut tape, d, &targets, &[1.0, 0.0], 0.0).unwrap();
        assert!((tape.value(l)[0] - (-(0.7f64.ln()))).abs() < 1e-9);
    }

    #[test]
    fn distill_self_ce_is_entropy() {
        let mut tape = Tape::new();
        let u = vec![0.25; 4];
        let teacher = Tensor::new(vec![1, 1, 4], u.iter().map(|&x| x as f32).collect()).unwrap();
        let s = dist_leaf(&mut tape, 1, 1, &[u], false);
        let l = distill_loss(&mut tape, &teacher, s, &[1.0], &[1.0]).unwrap();
        assert!((tape.value(l)[0] - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn distill_hand_checked_value() {
        // teacher [0.5,0.5,0,0], student [0.7,0.1,0.1,0.1]:
        // 0.5(-ln 0.7 - ln 0.1) = 1.329630
        let mut tape = Tape::new();
        let teacher = Tensor::new(vec![1, 1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let s = dist_leaf(&mut tape, 1, 1, &[vec![0.7, 0.1, 0.1, 0.1]], false);
        let l = distill_loss(&mut tape, &teacher, s, &[1.0], &[1.0]).unwrap();
        assert!((tape.value(l)[0] - 1.329630).abs() < 1e-5);
    }

    #[test]
    fn distill_zero_weight_annihilates_value_and_gradient() {
        let mut tape = Tape::new();
        let teacher = Tensor::new(vec![1, 1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let s = dist_leaf(&mut tape, 1, 1, &[vec![0.7, 0.1, 0.1, 0.1]], true);
        let l = distill_loss(&mut tape, &teacher, s, &[1.0], &[0.0]).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(s).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn distill_no_gradient_into_teacher() {
        let mut tape = Tape::new();
        let teacher = Tensor::new(vec![1, 1, 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let s = dist_leaf(&mut tape, 1, 1, &[vec![0.7, 0.1, 0.1, 0.1]], true);
        let l = distill_loss(&mut tape, &teacher, s, &[1.0], &[1.0]).unwrap();
        tape.backward(l).unwrap();
        // The teacher leaf is the node recorded right after `s`.
        let teacher_node = s + 1;
        assert!(tape.grad(teacher_node).is_empty());
        assert!(tape.grad(s).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn distill_rejects_negative_g_and_shape_mismatch() {
        let mut tape = Tape::new();
        let teacher = Tensor::new(vec![1, 1, 4], vec![0.25; 4]).unwrap();
        let s = dist_leaf(&mut tape, 1, 1, &[vec![0.25; 4]], false);
        assert!(distill_loss(&mut tape, &teacher, s, &[1.0], &[-0.5]).is_err());
        let bad = Tensor::new(vec![1, 1, 5], vec![0.2; 5]).unwrap();
        assert!(distill_loss(&mut tape, &bad, s, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn nmt_equals_distill_with_one_hot_teacher() {
        // Cross-check between the two loss paths at eps=0.
        let mut tape = Tape::new();
        let rows = vec![vec![0.6, 0.2, 0.1, 0.1], vec![0.3, 0.3, 0.2, 0.2]];
        let targets = IdMatrix::new(1, 2, vec![1, 3]);
        let d = dist_leaf(&mut tape, 1, 2, &rows, false);
        let nmt = nmt_loss(&mut tape, d, &targets, &[1.0, 1.0], 0.0).unwrap();
        let mut onehot = vec![0.0f32; 8];
        onehot[1] = 1.0;
        onehot[4 + 3] = 1.0;
        let teacher = Tensor::new(vec![1, 2, 4], onehot).unwrap();
        let dl = distill_loss(&mut tape, &teacher, d, &[1.0, 1.0], &[1.0]).unwrap();
        assert!((tape.value(nmt)[0] - tape.value(dl)[0]).abs() < 1e-6);
    }

    #[test]
    fn sentence_probability_cases() {
        let d = Tensor::new(vec![1, 2], vec![0.7, 0.3]).unwrap();
        let p = sentence_probability(&d, &[1], &[1.0], SentenceProb::Arithmetic).unwrap();
        assert!((p - 0.3).abs() < 1e-7);

        let d3 = Tensor::new(
            vec![3, 2],
            vec![0.2, 0.8, 0.4, 0.6, 0.6, 0.4],
        )
        .unwrap();
        let p = sentence_probability(&d3, &[0, 0, 0], &[1.0; 3], SentenceProb::Arithmetic).unwrap();
        assert!((p - 0.4).abs() < 1e-7);

        // One-hot correct model attains the upper bound 1.0.
        let hot = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = sentence_probability(&hot, &[0, 1], &[1.0; 2], SentenceProb::Arithmetic).unwrap();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sentence_probability_geometric() {
        let d = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.9, 0.1]).unwrap();
        let p = sentence_probability(&d, &[0, 0], &[1.0; 2], SentenceProb::Geometric).unwrap();
        assert!((p - (0.5f64 * 0.9).sqrt()).abs() < 1e-7);
    }

    #[test]
    fn sentence_probability_rejects_empty_mask() {
        let d = Tensor::new(vec![1, 2], vec![0.7, 0.3]).unwrap();
        assert!(sentence_probability(&d, &[0], &[0.0], SentenceProb::Arithmetic).is_err());
    }

    #[test]
    fn sample_weight_rules() {
        // adaptive truncation at sigma=2
        assert_eq!(sample_weight(WeightRule::Adaptive, 0.06, 0.02, 2.0).unwrap(), 2.0);
        // selective tie is inclusive
        assert_eq!(sample_weight(WeightRule::Selective, 0.05, 0.05, 2.0).unwrap(), 1.0);
        // adaptive ratio of equals
        assert_eq!(sample_weight(WeightRule::Adaptive, 0.3, 0.3, 2.0).unwrap(), 1.0);
        assert_eq!(sample_weight(WeightRule::Whole, 0.01, 0.99, 2.0).unwrap(), 1.0);
        assert_eq!(sample_weight(WeightRule::Selective, 0.04, 0.05, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn sample_weight_rejects_non_positive_probabilities() {
        assert!(sample_weight(WeightRule::Whole, 0.0, 0.5, 2.0).is_err());
        assert!(sample_weight(WeightRule::Whole, 0.5, -0.1, 2.0).is_err());
        assert!(sample_weight(WeightRule::Adaptive, 0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn combined_loss_switch_semantics() {
        let mut tape = Tape::new();
        let nmt = tape.leaf_f64(vec![1], vec![1.0], false).unwrap();
        let d = tape.leaf_f64(vec![1], vec![0.5], false).unwrap();
        let off = combined_loss(&mut tape, nmt, Some(d), 2.0, false).unwrap();
        assert_eq!(tape.value(off)[0], 1.0);
        let on = combined_loss(&mut tape, nmt, Some(d), 2.0, true).unwrap();
        assert_eq!(tape.value(on)[0], 2.0);
        let zero_alpha = combined_loss(&mut tape, nmt, Some(d), 0.0, true).unwrap();
        assert_eq!(tape.value(zero_alpha)[0], 1.0);
    }

    fn random_distribution(v: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut p: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
        let z: f64 = p.iter().sum();
        for x in &mut p {
            *x /= z;
        }
        p
    }

    #[test]
    fn gibbs_inequality_and_entropy_identity() {
        use rand::Rng as _;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let v = rng.gen_range(2..=64);
            let p = random_distribution(v, &mut rng);
            let q = random_distribution(v, &mut rng);
            let entropy: f64 = -p.iter().map(|&x| x * x.ln()).sum::<f64>();
            let mut tape = Tape::new();
            let teacher =
                Tensor::new(vec![1, 1, v], p.iter().map(|&x| x as f32).collect()).unwrap();
            let ps = dist_leaf(&mut tape, 1, 1, &[p.clone()], false);
            let qs = dist_leaf(&mut tape, 1, 1, &[q], false);
            let self_ce = distill_loss(&mut tape, &teacher, ps, &[1.0], &[1.0]).unwrap();
            let cross_ce = distill_loss(&mut tape, &teacher, qs, &[1.0], &[1.0]).unwrap();
            let self_v = tape.value(self_ce)[0];
            let cross_v = tape.value(cross_ce)[0];
            assert!((self_v - entropy).abs() < 1e-6);
            assert!(cross_v >= self_v - 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sample_weight_ranges(p_t in 1e-6f64..1.0, p_s in 1e-6f64..1.0) {
            let g = sample_weight(WeightRule::Adaptive, p_t, p_s, 2.0).unwrap();
            prop_assert!(g > 0.0 && g <= 2.0);
            let s = sample_weight(WeightRule::Selective, p_t, p_s, 2.0).unwrap();
            prop_assert!(s == 0.0 || s == 1.0);
            prop_assert_eq!(s == 1.0, p_t >= p_s);
            prop_assert_eq!(sample_weight(WeightRule::Whole, p_t, p_s, 2.0).unwrap(), 1.0);
        }
    }
}
