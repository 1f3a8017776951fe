//! Attention mask, feature and attention-weight distillation losses, and
//! the weighted objective with its two-stage schedule.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// A (teacher layer, student layer) pair, both 0-based.
pub type LayerPair = (usize, usize);

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("teacher has {teacher} heads and student {student}, but no head projection is configured")]
    MissingHeadProjection { teacher: usize, student: usize },
    #[error("no loss term supplied for layer pair {0:?}")]
    MissingTerm(LayerPair),
    #[error("student layer {q} in pair {pair:?} is not a biased layer")]
    NotBiasedLayer { q: usize, pair: LayerPair },
    #[error("teacher layer {p} in pair {pair:?} is out of range")]
    TeacherLayerOutOfRange { p: usize, pair: LayerPair },
    #[error("loss weights must be non-negative")]
    NegativeWeight,
}

/// `M[i][j] = 1` iff `1 <= i <= n` and `0 <= j <= n`, over `l = n+m+1`.
pub fn build_mask(n: usize, m: usize) -> Tensor {
    let l = n + m + 1;
    Tensor::from_fn(l, l, |i, j| if (1..=n).contains(&i) && j <= n { 1.0 } else { 0.0 })
}

/// `MSE(x0_p, h0_q * W_feat)`; `w_feat = None` means identity.
pub fn feat_loss(tape: &mut Tape, x0_p: &[f64], h0_q: Var, w_feat: Option<Var>) -> Result<Var, DistillError> {
    let student = match w_feat {
        Some(w) => tape.matmul(h0_q, w)?,
        None => h0_q,
    };
    let target = Tensor::new(vec![1, x0_p.len()], x0_p.to_vec())?;
    let pred = tape.value(student);
    if pred.len() != target.len() {
        return Err(TensorError::ShapeMismatch { op: "feat_loss", left: pred.shape().to_vec(), right: vec![x0_p.len()] }.into());
    }
    Ok(tape.mse_const(student, &target)?)
}

/// Attention-weight distillation for one layer pair.
///
/// `a_p` is the teacher tensor laid out `h' x l_G x l_G` (shape
/// `[h', l_G, l_G]`), `b_q` holds the student's per-head `l_S x l_S` bias
/// matrices. The student's masked biases are cut to the teacher's size,
/// optionally mixed across heads by `w_attn` (`h' x h`), softmaxed per row
/// and compared by mean squared error against the masked teacher weights.
pub fn attn_loss(
    tape: &mut Tape,
    a_p: &Tensor,
    b_q: &[Var],
    mask: &Tensor,
    w_attn: Option<Var>,
) -> Result<Var, DistillError> {
    let [h_t, l_g, l_g2] = *a_p.shape() else {
        return Err(TensorError::ShapeMismatch { op: "attn_loss", left: a_p.shape().to_vec(), right: vec![] }.into());
    };
    let h_s = b_q.len();
    let (l_s, _) = mask.dims2();
    if l_g != l_g2 || l_g > l_s {
        return Err(TensorError::ShapeMismatch { op: "attn_loss", left: a_p.shape().to_vec(), right: vec![h_s, l_s, l_s] }.into());
    }
    let w_attn = match w_attn {
        Some(w) => Some(w),
        None if h_t == h_s => None,
        None => return Err(DistillError::MissingHeadProjection { teacher: h_t, student: h_s }),
    };

    let mut flat = Vec::with_capacity(h_s);
    for &b in b_q {
        let masked = tape.mul_const(b, mask)?;
        let cut = tape.block(masked, l_g, l_g)?;
        flat.push(tape.reshape(cut, &[1, l_g * l_g])?);
    }
    let stacked = tape.concat_rows(&flat)?;
    let mixed = match w_attn {
        Some(w) => tape.matmul(w, stacked)?,
        None => stacked,
    };
    let logits = tape.reshape(mixed, &[h_t * l_g, l_g])?;
    let pred = tape.softmax(logits)?;

    let mut target = a_p.data().to_vec();
    for (k, t) in target.iter_mut().enumerate() {
        let (i, j) = ((k / l_g) % l_g, k % l_g);
        *t *= mask.get(i, j);
    }
    let target = Tensor::new(vec![h_t * l_g, l_g], target)?;
    Ok(tape.mse_const(pred, &target)?)
}

/// Value of [`attn_loss`] contributed by the virtual-token rows alone when
/// all other rows match: each of the `h'` virtual rows predicts a uniform
/// distribution against an all-zero target, giving `1 / l_G^3` under mean
/// reduction.
pub fn attn_row0_constant(l_graph: usize) -> f64 {
    1.0 / (l_graph as f64).powi(3)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub task: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl StageWeights {
    pub const MAIN: StageWeights = StageWeights { task: 1.0, alpha: 0.5, beta: 2.0 };
    pub const INITIAL: StageWeights = StageWeights { task: 0.0, alpha: 1.0, beta: 4.0 };
    pub const TASK_ONLY: StageWeights = StageWeights { task: 1.0, alpha: 0.0, beta: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Main,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub feat_pairs: Vec<LayerPair>,
    pub attn_pairs: Vec<LayerPair>,
    pub initial_epochs: usize,
    pub initial: StageWeights,
    pub main: StageWeights,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig::desk()
    }
}

impl DistillConfig {
    pub fn desk() -> DistillConfig {
        DistillConfig {
            feat_pairs: vec![(2, 2), (3, 3)],
            attn_pairs: vec![(2, 2), (3, 3)],
            initial_epochs: 2,
            initial: StageWeights::INITIAL,
            main: StageWeights::MAIN,
        }
    }

    pub fn paper() -> DistillConfig {
        let pairs = vec![(9, 3), (10, 4), (11, 5)];
        DistillConfig { feat_pairs: pairs.clone(), attn_pairs: pairs, ..DistillConfig::desk() }
    }

    /// True when at least one distillation loss can carry weight.
    pub fn is_active(&self) -> bool {
        let feat = !self.feat_pairs.is_empty() && (self.initial.alpha > 0.0 || self.main.alpha > 0.0);
        let attn = !self.attn_pairs.is_empty() && (self.initial.beta > 0.0 || self.main.beta > 0.0);
        feat || attn
    }

    pub fn stage(&self, epoch: usize) -> Stage {
        if self.is_active() && epoch < self.initial_epochs {
            Stage::Initial
        } else {
            Stage::Main
        }
    }

    pub fn weights(&self, stage: Stage) -> StageWeights {
        match stage {
            Stage::Initial => self.initial,
            Stage::Main => self.main,
        }
    }

    /// Teacher layers any pair reads from, sorted and deduplicated.
    pub fn teacher_layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.feat_pairs.iter().chain(&self.attn_pairs).map(|p| p.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self, biased: std::ops::Range<usize>, teacher_layers: usize) -> Result<(), DistillError> {
        for &pair in self.feat_pairs.iter().chain(&self.attn_pairs) {
            if !biased.contains(&pair.1) {
                return Err(DistillError::NotBiasedLayer { q: pair.1, pair });
            }
            if pair.0 >= teacher_layers {
                return Err(DistillError::TeacherLayerOutOfRange { p: pair.0, pair });
            }
        }
        for w in [self.initial, self.main] {
            if w.task < 0.0 || w.alpha < 0.0 || w.beta < 0.0 {
                return Err(DistillError::NegativeWeight);
            }
        }
        Ok(())
    }
}

/// Learnable projections between student and teacher spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistillParams {
    pub w_feat: Option<ParamId>,
    pub w_attn: Option<ParamId>,
}

impl DistillParams {
    /// `W_feat` (`d x d_V`) exists only when `d != d_V`; `W_attn`
    /// (`h' x h`) only when head counts differ or `force_attn` is set.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        d_v: usize,
        h: usize,
        h_teacher: usize,
        force_attn: bool,
        rng: &mut R,
    ) -> DistillParams {
        let noise = Normal::new(0.0, 0.02).unwrap();
        let w_feat = (d != d_v).then(|| {
            let scale = (d_v as f64 / d as f64).sqrt();
            let t = Tensor::from_fn(d, d_v, |i, j| if i == j { scale } else { 0.0 } + noise.sample(rng));
            store.add("distill.w_feat", t)
        });
        let w_attn = (h != h_teacher || force_attn).then(|| {
            let t = Tensor::from_fn(h_teacher, h, |t, i| {
                let base = if h == h_teacher { (t == i) as u8 as f64 } else { 1.0 / h as f64 };
                base + noise.sample(rng)
            });
            store.add("distill.w_attn", t)
        });
        DistillParams { w_feat, w_attn }
    }

    pub fn from_store(store: &ParamStore) -> DistillParams {
        DistillParams { w_feat: store.id("distill.w_feat").ok(), w_attn: store.id("distill.w_attn").ok() }
    }
}

/// Combined loss with per-term values for logging.
#[derive(Clone, Debug)]
pub struct LossBundle {
    pub total: Var,
    pub total_value: f64,
    pub task: f64,
    pub feat: Vec<(LayerPair, f64)>,
    pub attn: Vec<(LayerPair, f64)>,
    pub weights: StageWeights,
}

/// `w_task * task + alpha * sum(feat) + beta * sum(attn)`. Terms whose
/// weight is zero are left out of the graph entirely.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    feat_terms: &[(LayerPair, Var)],
    attn_terms: &[(LayerPair, Var)],
    cfg: &DistillConfig,
    weights: StageWeights,
) -> Result<LossBundle, DistillError> {
    let lookup = |terms: &[(LayerPair, Var)], pair: LayerPair| {
        terms.iter().find(|(p, _)| *p == pair).map(|(_, v)| *v).ok_or(DistillError::MissingTerm(pair))
    };
    let mut combo = Vec::new();
    if weights.task != 0.0 {
        combo.push((task, weights.task));
    }
    let mut feat = Vec::new();
    for &pair in &cfg.feat_pairs {
        let v = lookup(feat_terms, pair)?;
        feat.push((pair, tape.value(v).item()));
        if weights.alpha != 0.0 {
            combo.push((v, weights.alpha));
        }
    }
    let mut attn = Vec::new();
    for &pair in &cfg.attn_pairs {
        let v = lookup(attn_terms, pair)?;
        attn.push((pair, tape.value(v).item()));
        if weights.beta != 0.0 {
            combo.push((v, weights.beta));
        }
    }
    let total = if combo.is_empty() { tape.scale(task, 0.0)? } else { tape.lin_comb(&combo)? };
    Ok(LossBundle {
        total,
        total_value: tape.value(total).item(),
        task: tape.value(task).item(),
        feat,
        attn,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_masks() {
        let m = build_mask(2, 1);
        assert_eq!(m.shape(), &[4, 4]);
        assert_eq!(m.data().iter().sum::<f64>(), 6.0);
        for i in 1..=2 {
            for j in 0..=2 {
                assert_eq!(m.get(i, j), 1.0);
            }
        }
        let m = build_mask(1, 0);
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(build_mask(4, 5).row(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feat_loss_constant_case() {
        let mut store = ParamStore::new();
        let h = store.add_filled("h", &[1, 3], 1.0);
        let mut tape = Tape::new(&store);
        let hv = tape.param(h);
        let l = feat_loss(&mut tape, &[0.0; 3], hv, None).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = feat_loss(&mut tape, &[1.0; 3], hv, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(feat_loss(&mut tape, &[1.0; 4], hv, None).is_err());
    }

    #[test]
    fn missing_head_projection() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        let a = Tensor::filled(&[2, 2, 2], 0.5);
        let err = attn_loss(&mut tape, &a, &[b], &build_mask(1, 1), None).unwrap_err();
        assert!(matches!(err, DistillError::MissingHeadProjection { teacher: 2, student: 1 }));
    }

    #[test]
    fn stage_schedule() {
        let cfg = DistillConfig { initial_epochs: 5, ..DistillConfig::desk() };
        assert_eq!(cfg.stage(0), Stage::Initial);
        assert_eq!(cfg.stage(4), Stage::Initial);
        assert_eq!(cfg.stage(5), Stage::Main);
        let off = DistillConfig { feat_pairs: vec![], attn_pairs: vec![], ..DistillConfig::desk() };
        assert!(!off.is_active());
        assert_eq!(off.stage(0), Stage::Main);
        assert!(cfg.validate(2..4, 4).is_ok());
        assert!(DistillConfig::paper().validate(3..6, 12).is_ok());
        assert!(cfg.validate(0..2, 4).is_err());
    }

    #[test]
    fn total_requires_every_pair() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let task = tape.constant(Tensor::scalar(1.0));
        let f = tape.constant(Tensor::scalar(2.0));
        let cfg = DistillConfig::desk();
        let err = total_loss(&mut tape, task, &[((2, 2), f)], &[], &cfg, StageWeights::MAIN).unwrap_err();
        assert!(matches!(err, DistillError::MissingTerm((3, 3))));
    }
}
