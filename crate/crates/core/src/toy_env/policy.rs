//! Linear softmax policy over slot tokens.
//!
//! A generation is a fixed sequence of slots: one layout token (tag order),
//! sixteen caption tokens (one per cell, naming its content), four box
//! coordinate tokens and one answer token. Each slot family has its own
//! weight block; logits are sums of weights over active one-hot features.
//!
//! Box slots see a map of the cells whose object matches the question's
//! attribute. The answer slot sees only the content
//! of the cell under the emitted box's center crossed with the question, so
//! answering correctly requires grounding first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    caption_from_states, cell_box, Object, Question, Task, ANSWER_WORDS, CELL_PX, CELL_STATES, EMPTY_STATE, GRID,
    NUM_CELLS, NUM_QUESTIONS,
};
use crate::error::{Error, Result};
use crate::grpo::DifferentiablePolicy;
use crate::reward_engine::{Field, OutputMode};
use crate::scalar::Scalar;

pub const CAPTION_VOCAB: usize = CELL_STATES;
/// Box coordinates snap to cell edges: four choices per coordinate.
pub const BOX_VOCAB: usize = GRID;
pub const ANSWER_VOCAB: usize = ANSWER_WORDS.len();
const LAYOUT_VOCAB: usize = 2;

/// Own-cell state one-hot plus bias.
pub const CAPTION_FEATURES: usize = CELL_STATES + 1;
/// Map of cells whose object matches the question's attribute, plus bias.
pub const OBS_FEATURES: usize = NUM_CELLS + 1;
/// Glimpsed state crossed with question, plus bias.
pub const ANSWER_FEATURES: usize = CELL_STATES * NUM_QUESTIONS + 1;

const MATCH_OFFSET: usize = 0;
const OBS_BIAS: usize = MATCH_OFFSET + NUM_CELLS;

const LAYOUT_BLOCK: usize = 0;
const CAPTION_BLOCK: usize = LAYOUT_BLOCK + LAYOUT_VOCAB;
const BOX_BLOCK: usize = CAPTION_BLOCK + CAPTION_FEATURES * CAPTION_VOCAB;
const BOX_BLOCK_LEN: usize = OBS_FEATURES * BOX_VOCAB;
const ANSWER_BLOCK: usize = BOX_BLOCK + 4 * BOX_BLOCK_LEN;
const NUM_PARAMS: usize = ANSWER_BLOCK + ANSWER_FEATURES * ANSWER_VOCAB;

/// Position in the generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    /// 0 emits the tagged regions in canonical order, 1 swaps the first two.
    Layout,
    Caption(u8),
    /// Coordinate index: 0 = x1, 1 = y1, 2 = x2, 3 = y2.
    Box(u8),
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotToken {
    pub slot: Slot,
    pub token: u8,
}

/// The conditioning and the emitted tokens of one rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTrajectory {
    pub cell_states: [u8; NUM_CELLS],
    pub question: u8,
    pub tokens: Vec<SlotToken>,
}

impl ToyTrajectory {
    fn for_task(task: &Task) -> Self {
        let mut cell_states = [0u8; NUM_CELLS];
        for (c, s) in cell_states.iter_mut().enumerate() {
            *s = task.scene.cell_state(c) as u8;
        }
        ToyTrajectory {
            cell_states,
            question: task.question.index() as u8,
            tokens: Vec::new(),
        }
    }

    fn question(&self) -> Question {
        use super::{Color, Shape};
        let q = self.question as usize;
        if q < 3 {
            Question::ColorOf(Shape::ALL[q])
        } else {
            Question::ShapeOf(Color::ALL[q - 3])
        }
    }

    fn token(&self, slot: Slot) -> Option<u8> {
        self.tokens.iter().find(|t| t.slot == slot).map(|t| t.token)
    }

    /// Pixel box `[x1, y1, x2, y2]` as emitted (not normalized).
    pub fn emitted_box(&self) -> Option<[u32; 4]> {
        let mut out = [0u32; 4];
        for (k, v) in out.iter_mut().enumerate() {
            let idx = self.token(Slot::Box(k as u8))? as u32;
            // x1, y1 take left/top edges; x2, y2 take right/bottom edges
            *v = if k < 2 { idx * CELL_PX } else { (idx + 1) * CELL_PX };
        }
        Some(out)
    }

    /// Cell containing the center of the emitted box.
    pub fn glimpse_cell(&self) -> Option<usize> {
        let [x1, y1, x2, y2] = self.emitted_box()?;
        let col = ((x1 + x2) / (2 * CELL_PX)).min(GRID as u32 - 1) as usize;
        let row = ((y1 + y2) / (2 * CELL_PX)).min(GRID as u32 - 1) as usize;
        Some(row * GRID + col)
    }

    pub fn answer(&self) -> Option<&'static str> {
        self.token(Slot::Answer).map(|a| ANSWER_WORDS[a as usize])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tagged text of the generation.
    pub fn render(&self, mode: OutputMode) -> String {
        let mut fields: Vec<Field> = mode
            .canonical_order()
            .into_iter()
            .filter(|f| match f {
                Field::Caption => self.tokens.iter().any(|t| matches!(t.slot, Slot::Caption(_))),
                Field::Bbox => self.emitted_box().is_some(),
                Field::Answer => self.answer().is_some(),
            })
            .collect();
        if self.token(Slot::Layout) == Some(1) && fields.len() >= 2 {
            fields.swap(0, 1);
        }
        let mut out = String::new();
        for f in fields {
            let body = match f {
                Field::Caption => {
                    let mut states = [EMPTY_STATE; NUM_CELLS];
                    for t in &self.tokens {
                        if let Slot::Caption(c) = t.slot {
                            states[c as usize] = t.token as usize;
                        }
                    }
                    caption_from_states(states)
                }
                Field::Bbox => {
                    let [x1, y1, x2, y2] = self.emitted_box().expect("filtered above");
                    format!("[[{x1},{y1},{x2},{y2}]]")
                }
                Field::Answer => self.answer().expect("filtered above").to_owned(),
            };
            out.push_str(&format!("<{0}>{1}</{0}>", f.tag(), body));
        }
        out
    }
}

/// Slot sequence for an output mode. Early stopping drops the trailing
/// caption of the box-first layout.
pub fn slot_order(mode: OutputMode, early_stop: bool) -> Vec<Slot> {
    let caption = (0..NUM_CELLS as u8).map(Slot::Caption);
    let boxes = (0..4u8).map(Slot::Box);
    let mut out = vec![Slot::Layout];
    match mode {
        OutputMode::CaptionBoxAnswer => {
            out.extend(caption);
            out.extend(boxes);
            out.push(Slot::Answer);
        }
        OutputMode::BoxAnswerCaption => {
            out.extend(boxes);
            out.push(Slot::Answer);
            if !early_stop {
                out.extend(caption);
            }
        }
    }
    out
}

/// Sampling knobs. `top_k` and `top_p` only restrict which token is drawn;
/// reported log-probabilities always come from the full tempered softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_k: None,
            top_p: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidConfig("top_k must be >= 1".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidConfig(format!("top_p must lie in (0,1], got {p}")));
            }
        }
        Ok(())
    }

    /// Draws an index from `probs` after top-k / nucleus truncation.
    fn draw<R: Rng + ?Sized>(&self, probs: &[f64], rng: &mut R) -> usize {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut keep = self.top_k.unwrap_or(order.len()).min(order.len());
        if let Some(p) = self.top_p {
            let mut acc = 0.0;
            for (i, &idx) in order.iter().enumerate().take(keep) {
                acc += probs[idx];
                if acc >= p {
                    keep = i + 1;
                    break;
                }
            }
        }
        let kept = &order[..keep];
        let total: f64 = kept.iter().map(|&i| probs[i]).sum();
        let mut u = rng.random::<f64>() * total;
        for &i in kept {
            u -= probs[i];
            if u < 0.0 {
                return i;
            }
        }
        kept[kept.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    /// Draw from the tempered (and optionally truncated) softmax.
    #[default]
    Sample,
    /// Highest-probability token, lowest index on ties.
    Greedy,
}

/// One sampled generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyRollout<T> {
    pub trajectory: ToyTrajectory,
    pub raw: String,
    /// Per-token log-probabilities under the sampling policy.
    pub logp: Vec<T>,
}

/// Parameter block, active features and vocabulary of one slot.
struct SlotView {
    offset: usize,
    vocab: usize,
    features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy<T> {
    params: Vec<T>,
    pub sampler: SamplerConfig,
}

impl<T: Scalar> Default for ToyPolicy<T> {
    fn default() -> Self {
        Self::uniform()
    }
}

impl<T: Scalar> ToyPolicy<T> {
    /// All-zero weights: every slot is uniform.
    pub fn uniform() -> Self {
        ToyPolicy {
            params: vec![T::zero(); NUM_PARAMS],
            sampler: SamplerConfig::default(),
        }
    }

    pub fn from_params(params: Vec<T>) -> Result<Self> {
        if params.len() != NUM_PARAMS {
            return Err(Error::DimensionMismatch(format!(
                "toy policy has {NUM_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        Ok(ToyPolicy {
            params,
            sampler: SamplerConfig::default(),
        })
    }

    pub fn num_params() -> usize {
        NUM_PARAMS
    }

    /// Hand-set weights that put logit `scale` on the correct token of
    /// every slot.
    pub fn oracle(scale: T) -> Self {
        let mut p = Self::uniform();
        p.params[LAYOUT_BLOCK] = scale;
        for s in 0..CELL_STATES {
            p.params[CAPTION_BLOCK + s * CAPTION_VOCAB + s] = scale;
        }
        for k in 0..4 {
            for cell in 0..NUM_CELLS {
                let idx = if k % 2 == 0 { cell % GRID } else { cell / GRID };
                p.params[BOX_BLOCK + k * BOX_BLOCK_LEN + (MATCH_OFFSET + cell) * BOX_VOCAB + idx] = scale;
            }
        }
        for s in 0..EMPTY_STATE {
            let o = Object::from_state(s).expect("object state");
            for q in 0..NUM_QUESTIONS {
                let traj = ToyTrajectory {
                    cell_states: [0; NUM_CELLS],
                    question: q as u8,
                    tokens: Vec::new(),
                };
                let a = traj.question().answer_index(o);
                p.params[ANSWER_BLOCK + (s * NUM_QUESTIONS + q) * ANSWER_VOCAB + a] = scale;
            }
        }
        p
    }

    fn view(&self, traj: &ToyTrajectory, slot: Slot) -> Result<SlotView> {
        Ok(match slot {
            Slot::Layout => SlotView {
                offset: LAYOUT_BLOCK,
                vocab: LAYOUT_VOCAB,
                features: vec![0],
            },
            Slot::Caption(c) => SlotView {
                offset: CAPTION_BLOCK,
                vocab: CAPTION_VOCAB,
                features: vec![traj.cell_states[c as usize] as usize, CELL_STATES],
            },
            Slot::Box(k) => {
                let q = traj.question();
                let mut features: Vec<usize> = (0..NUM_CELLS)
                    .filter(|&c| Object::from_state(traj.cell_states[c] as usize).is_some_and(|o| q.matches(o)))
                    .map(|c| MATCH_OFFSET + c)
                    .collect();
                features.push(OBS_BIAS);
                SlotView {
                    offset: BOX_BLOCK + k as usize * BOX_BLOCK_LEN,
                    vocab: BOX_VOCAB,
                    features,
                }
            }
            Slot::Answer => {
                let cell = traj
                    .glimpse_cell()
                    .ok_or_else(|| Error::Policy("answer slot needs all four box tokens first".into()))?;
                let g = traj.cell_states[cell] as usize;
                SlotView {
                    offset: ANSWER_BLOCK,
                    vocab: ANSWER_VOCAB,
                    features: vec![g * NUM_QUESTIONS + traj.question as usize, ANSWER_FEATURES - 1],
                }
            }
        })
    }

    /// Tempered log-softmax over the slot's vocabulary.
    fn log_softmax(&self, v: &SlotView) -> Vec<T> {
        let inv_t = T::one() / T::lit(self.sampler.temperature);
        let logits: Vec<T> = (0..v.vocab)
            .map(|o| v.features.iter().map(|&f| self.params[v.offset + f * v.vocab + o]).sum::<T>() * inv_t)
            .collect();
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<T>().ln();
        logits.into_iter().map(|l| l - lse).collect()
    }

    /// Samples or greedily decodes one generation for `task`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        task: &Task,
        mode: OutputMode,
        early_stop: bool,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<ToyRollout<T>> {
        if early_stop && mode != OutputMode::BoxAnswerCaption {
            return Err(Error::InvalidConfig("early stopping requires the bbox-first layout".into()));
        }
        let mut traj = ToyTrajectory::for_task(task);
        let slots = slot_order(mode, early_stop);
        let mut logp = Vec::with_capacity(slots.len());
        for slot in slots {
            let lp = self.log_softmax(&self.view(&traj, slot)?);
            let token = match decoding {
                Decoding::Greedy => {
                    let mut best = 0;
                    for (i, v) in lp.iter().enumerate() {
                        if *v > lp[best] {
                            best = i;
                        }
                    }
                    best
                }
                Decoding::Sample => {
                    let probs: Vec<f64> = lp.iter().map(|l| l.to_f64_lossy().exp()).collect();
                    self.sampler.draw(&probs, rng)
                }
            };
            logp.push(lp[token]);
            traj.tokens.push(SlotToken {
                slot,
                token: token as u8,
            });
        }
        Ok(ToyRollout {
            raw: traj.render(mode),
            trajectory: traj,
            logp,
        })
    }
}

/// The token sequence that reproduces the gold annotation of `task`.
pub fn gold_trajectory(task: &Task, mode: OutputMode, early_stop: bool) -> ToyTrajectory {
    let mut traj = ToyTrajectory::for_task(task);
    let [x1, y1, x2, y2] = cell_box(task.target_cell).map(|v| (v / CELL_PX) as u8);
    for slot in slot_order(mode, early_stop) {
        let token = match slot {
            Slot::Layout => 0,
            Slot::Caption(c) => traj.cell_states[c as usize],
            Slot::Box(0) => x1,
            Slot::Box(1) => y1,
            Slot::Box(2) => x2 - 1,
            Slot::Box(_) => y2 - 1,
            Slot::Answer => task.gold_answer as u8,
        };
        traj.tokens.push(SlotToken { slot, token });
    }
    traj
}

impl<T: Scalar> DifferentiablePolicy<T> for ToyPolicy<T> {
    type Trajectory = ToyTrajectory;

    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn token_log_probs(&self, traj: &ToyTrajectory) -> Result<Vec<T>> {
        traj.tokens
            .iter()
            .map(|t| {
                let v = self.view(traj, t.slot)?;
                let lp = self.log_softmax(&v);
                lp.get(t.token as usize)
                    .copied()
                    .ok_or_else(|| Error::Policy(format!("token {} outside vocabulary of {:?}", t.token, t.slot)))
            })
            .collect()
    }

    fn accumulate_log_prob_grad(&self, traj: &ToyTrajectory, coefs: &[T], grad: &mut [T]) -> Result<()> {
        if coefs.len() != traj.tokens.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} tokens",
                coefs.len(),
                traj.tokens.len()
            )));
        }
        if grad.len() != NUM_PARAMS {
            return Err(Error::DimensionMismatch(format!("gradient buffer has {} entries", grad.len())));
        }
        let inv_t = T::one() / T::lit(self.sampler.temperature);
        for (t, &c) in traj.tokens.iter().zip(coefs) {
            if c == T::zero() {
                continue;
            }
            let v = self.view(traj, t.slot)?;
            let lp = self.log_softmax(&v);
            for (o, l) in lp.iter().enumerate() {
                let indicator = if o == t.token as usize { T::one() } else { T::zero() };
                let d = c * (indicator - l.exp()) * inv_t;
                for &f in &v.features {
                    grad[v.offset + f * v.vocab + o] += d;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_engine::{score_raw, RewardWeights};
    use crate::toy_env::generate_task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gold_trajectory_scores_perfectly() {
        for seed in 0..50 {
            let task = generate_task(seed);
            for mode in [OutputMode::CaptionBoxAnswer, OutputMode::BoxAnswerCaption] {
                let raw = gold_trajectory(&task, mode, false).render(mode);
                let r = score_raw(&raw, &task.gold::<f64>(), RewardWeights::equal(), mode);
                assert_eq!([r.r_caption, r.r_acc, r.r_format], [1.0; 3], "{raw}");
                assert!((r.r_bbox - 1.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn uniform_log_probs() {
        let task = generate_task(3);
        let p = ToyPolicy::<f64>::uniform();
        let traj = gold_trajectory(&task, OutputMode::CaptionBoxAnswer, false);
        let lp = p.token_log_probs(&traj).unwrap();
        assert_eq!(lp.len(), 22);
        assert!((lp[0] + 2f64.ln()).abs() < 1e-12);
        assert!((lp[1] + 10f64.ln()).abs() < 1e-12);
        assert!((lp[21] + 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn oracle_greedy_is_gold() {
        let p = ToyPolicy::<f64>::oracle(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..100 {
            let task = generate_task(seed);
            for mode in [OutputMode::CaptionBoxAnswer, OutputMode::BoxAnswerCaption] {
                let r = p.rollout(&task, mode, false, Decoding::Greedy, &mut rng).unwrap();
                assert_eq!(r.trajectory, gold_trajectory(&task, mode, false));
                let lp = p.token_log_probs(&r.trajectory).unwrap();
                assert_eq!(lp, r.logp);
            }
        }
    }

    #[test]
    fn early_stop_is_short() {
        assert_eq!(slot_order(OutputMode::CaptionBoxAnswer, false).len(), 22);
        assert_eq!(slot_order(OutputMode::BoxAnswerCaption, false).len(), 22);
        assert_eq!(slot_order(OutputMode::BoxAnswerCaption, true).len(), 6);
        let task = generate_task(1);
        let p = ToyPolicy::<f64>::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p
            .rollout(&task, OutputMode::CaptionBoxAnswer, true, Decoding::Sample, &mut rng)
            .is_err());
        let r = p
            .rollout(&task, OutputMode::BoxAnswerCaption, true, Decoding::Sample, &mut rng)
            .unwrap();
        assert!(!r.raw.contains("<caption>"));
    }

    #[test]
    fn swapped_layout_breaks_format_only() {
        let task = generate_task(9);
        let mode = OutputMode::CaptionBoxAnswer;
        let mut traj = gold_trajectory(&task, mode, false);
        traj.tokens[0].token = 1;
        let r = score_raw(&traj.render(mode), &task.gold::<f64>(), RewardWeights::equal(), mode);
        assert_eq!(r.r_format, 0.0);
        assert_eq!(r.r_acc, 1.0);
        assert_eq!(r.r_caption, 1.0);
    }

    #[test]
    fn truncated_sampling_respects_support() {
        let cfg = SamplerConfig {
            temperature: 1.0,
            top_k: Some(2),
            top_p: None,
        };
        let probs = [0.1, 0.5, 0.3, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let i = cfg.draw(&probs, &mut rng);
            assert!(i == 1 || i == 2);
        }
        let cfg = SamplerConfig {
            top_k: None,
            top_p: Some(0.5),
            ..cfg
        };
        for _ in 0..50 {
            assert_eq!(cfg.draw(&probs, &mut rng), 1);
        }
    }
}
