//! A synthetic grounded-VQA task with a linear categorical policy.
//!
//! A scene is a 4×4 grid of 8-pixel cells, each optionally holding a colored
//! shape. A question asks for the color of a uniquely-shaped object or the
//! shape of a uniquely-colored one. The gold annotation mirrors a grounded
//! VQA record: a caption listing the objects in reading order, the pixel box
//! of the queried object's cell, and a one-word answer.

mod policy;
mod train;

pub use policy::{
    gold_trajectory, slot_order, Decoding, SamplerConfig, Slot, SlotToken, ToyPolicy, ToyRollout, ToyTrajectory,
    ANSWER_FEATURES, ANSWER_VOCAB, BOX_VOCAB, CAPTION_FEATURES, CAPTION_VOCAB, OBS_FEATURES,
};
pub use train::{
    eval_task_seed, evaluate, train, train_task_seed, train_with, EvalPoint, EvalReport, StepRecord, TrainConfig,
    TrainingLog, DEFAULT_TOY_LR,
};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::box_geometry::{BoxSet, Rect};
use crate::reward_engine::GoldTarget;
use crate::scalar::Scalar;

/// Cells per side.
pub const GRID: usize = 4;
/// Pixels per cell side.
pub const CELL_PX: u32 = 8;
/// Image side in pixels.
pub const IMAGE_PX: u32 = GRID as u32 * CELL_PX;
pub const NUM_CELLS: usize = GRID * GRID;
pub const MAX_OBJECTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

/// Index of "empty" in the per-cell state vocabulary.
pub const EMPTY_STATE: usize = 9;
/// Nine object states plus empty.
pub const CELL_STATES: usize = 10;

impl Object {
    /// State index in `0..9`.
    pub fn state(self) -> usize {
        self.color as usize * 3 + self.shape as usize
    }

    pub fn from_state(s: usize) -> Option<Object> {
        (s < EMPTY_STATE).then(|| Object {
            color: Color::ALL[s / 3],
            shape: Shape::ALL[s % 3],
        })
    }

    pub fn describe(self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

/// Cell contents of one scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub cells: [Option<Object>; NUM_CELLS],
    pub seed: u64,
}

impl Scene {
    pub fn cell_state(&self, cell: usize) -> usize {
        self.cells[cell].map(Object::state).unwrap_or(EMPTY_STATE)
    }

    pub fn objects(&self) -> impl Iterator<Item = (usize, Object)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.map(|o| (i, o)))
    }

    /// Objects in reading order, comma separated.
    pub fn caption(&self) -> String {
        caption_from_states((0..NUM_CELLS).map(|c| self.cell_state(c)))
    }
}

/// Renders a caption from per-cell states, skipping empty cells.
pub fn caption_from_states(states: impl IntoIterator<Item = usize>) -> String {
    states
        .into_iter()
        .filter_map(Object::from_state)
        .map(Object::describe)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Question {
    ColorOf(Shape),
    ShapeOf(Color),
}

/// Answer vocabulary: three colors then three shapes.
pub const ANSWER_WORDS: [&str; 6] = ["red", "green", "blue", "circle", "square", "triangle"];
pub const NUM_QUESTIONS: usize = 6;

impl Question {
    pub fn index(self) -> usize {
        match self {
            Question::ColorOf(s) => s as usize,
            Question::ShapeOf(c) => 3 + c as usize,
        }
    }

    pub fn text(self) -> String {
        match self {
            Question::ColorOf(s) => format!("what color is the {}?", s.word()),
            Question::ShapeOf(c) => format!("what shape is the {} object?", c.word()),
        }
    }

    pub fn matches(self, o: Object) -> bool {
        match self {
            Question::ColorOf(s) => o.shape == s,
            Question::ShapeOf(c) => o.color == c,
        }
    }

    /// Index into [`ANSWER_WORDS`] of the answer for object `o`.
    pub fn answer_index(self, o: Object) -> usize {
        match self {
            Question::ColorOf(_) => o.color as usize,
            Question::ShapeOf(_) => 3 + o.shape as usize,
        }
    }
}

/// One generated question with gold annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub scene: Scene,
    pub question: Question,
    pub target_cell: usize,
    pub gold_caption: String,
    /// Pixel box `[x1, y1, x2, y2]` of the target cell.
    pub gold_box: [u32; 4],
    pub gold_answer: usize,
}

impl Task {
    pub fn gold_answer_word(&self) -> &'static str {
        ANSWER_WORDS[self.gold_answer]
    }

    pub fn gold<T: Scalar>(&self) -> GoldTarget<T> {
        let [x1, y1, x2, y2] = self.gold_box.map(|v| T::lit(v as f64));
        GoldTarget {
            caption: self.gold_caption.clone(),
            boxes: BoxSet::new(vec![Rect { x1, y1, x2, y2 }]),
            answer: self.gold_answer_word().to_owned(),
        }
    }
}

/// Pixel rectangle of a cell.
pub fn cell_box(cell: usize) -> [u32; 4] {
    let (row, col) = ((cell / GRID) as u32, (cell % GRID) as u32);
    [col * CELL_PX, row * CELL_PX, (col + 1) * CELL_PX, (row + 1) * CELL_PX]
}

/// Deterministic task for a seed. Scenes hold 1 to 5 objects in distinct
/// cells; the question always has a unique answer.
pub fn generate_task(seed: u64) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(1..=MAX_OBJECTS);
        let mut cells = [None; NUM_CELLS];
        for cell in sample(&mut rng, NUM_CELLS, n).into_iter() {
            cells[cell] = Some(Object {
                color: Color::ALL[rng.random_range(0..3)],
                shape: Shape::ALL[rng.random_range(0..3)],
            });
        }
        let scene = Scene { cells, seed };
        let ask_color = rng.random_bool(0.5);
        let candidates: Vec<Question> = if ask_color {
            Shape::ALL.iter().map(|&s| Question::ColorOf(s)).collect()
        } else {
            Color::ALL.iter().map(|&c| Question::ShapeOf(c)).collect()
        };
        let unique: Vec<(Question, usize)> = candidates
            .into_iter()
            .filter_map(|q| {
                let mut hits = scene.objects().filter(|(_, o)| q.matches(*o));
                match (hits.next(), hits.next()) {
                    (Some((cell, _)), None) => Some((q, cell)),
                    _ => None,
                }
            })
            .collect();
        if unique.is_empty() {
            continue;
        }
        let (question, target_cell) = unique[rng.random_range(0..unique.len())];
        let target = scene.cells[target_cell].expect("target cell holds an object");
        return Task {
            gold_caption: scene.caption(),
            gold_box: cell_box(target_cell),
            gold_answer: question.answer_index(target),
            scene,
            question,
            target_cell,
        };
    }
}
