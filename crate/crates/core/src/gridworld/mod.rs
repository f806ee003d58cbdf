//! Deterministic gridworld used to manufacture expert demonstrations.
//!
//! The world is an H x W cell grid plus a gripper that moves continuously
//! (per-axis deltas are clamped to [-1, 1] per step) while objects snap to
//! cells. Three scripted task families (press, stack, sort) come with a
//! greedy expert that reaches success within `step_budget` steps from any
//! `reset` layout, which is what makes dataset generation and evaluation
//! reproducible end to end.

pub mod data;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::vocab::PaletteImage;

/// Palette entry for empty cells.
pub const BACKGROUND: u8 = 0;
/// Palette entry for the gripper while open.
pub const GRIPPER_OPEN: u8 = 1;
/// Palette entry for the gripper while closed.
pub const GRIPPER_CLOSED: u8 = 2;
/// Palette entries objects can take, paired with [`COLOR_NAMES`].
pub const OBJECT_COLORS: [u8; 5] = [3, 4, 5, 6, 7];
/// Human-readable names for [`OBJECT_COLORS`], used in instructions.
pub const COLOR_NAMES: [&str; 5] = ["blue", "red", "green", "yellow", "purple"];
/// A goal marker renders as the object's color plus this offset.
pub const GOAL_OFFSET: u8 = 8;
/// Smallest palette that can represent every renderable cell value.
pub const PALETTE_MIN: u8 = 16;

/// Gripper action dimensions: row delta, column delta, gripper command.
pub const ACTION_DIMS: usize = 3;
/// Proprioceptive state dimensions: row, column, closed flag.
pub const STATE_DIMS: usize = 3;

/// Number of objects (and goals) in a sort layout. Fixed so the expert's
/// step budget guarantee stays valid on every grid size we accept.
pub const SORT_OBJECTS: usize = 2;

/// Grid dimensions. Everything else about an episode is derived from the
/// reset seed and the task kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub height: u32,
    pub width: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            height: 16,
            width: 16,
        }
    }
}

/// Task families the scripted expert knows how to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Close the gripper on top of the button.
    Press,
    /// Carry the first block onto the second and let go.
    Stack,
    /// Carry each item to its own goal marker.
    Sort,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Press, TaskKind::Stack, TaskKind::Sort];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Press => "press",
            TaskKind::Stack => "stack",
            TaskKind::Sort => "sort",
        }
    }

    pub fn from_name(name: &str) -> Result<TaskKind> {
        match name {
            "press" => Ok(TaskKind::Press),
            "stack" => Ok(TaskKind::Stack),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::Config(format!("unknown task kind '{other}'"))),
        }
    }
}

/// One object on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub row: u32,
    pub col: u32,
    pub color: u8,
}

/// Full simulator state. `objects[i]` is scored against `goals[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub grip_row: f32,
    pub grip_col: f32,
    pub closed: bool,
    pub held: Option<usize>,
    pub objects: Vec<Object>,
    pub goals: Vec<(u32, u32)>,
}

impl WorldState {
    /// The cell the gripper currently occupies for grasp/placement checks.
    pub fn grip_cell(&self) -> (u32, u32) {
        (self.grip_row.round() as u32, self.grip_col.round() as u32)
    }

    /// Proprioceptive vector fed to the model: row, column, closed flag.
    pub fn proprio(&self) -> [f32; STATE_DIMS] {
        [
            self.grip_row,
            self.grip_col,
            if self.closed { 1.0 } else { -1.0 },
        ]
    }

    fn at_cell(&self, index: usize, cell: (u32, u32)) -> bool {
        let o = &self.objects[index];
        (o.row, o.col) == cell
    }

    /// Object `i` counts as delivered when it sits on its goal and is not
    /// in the gripper.
    pub fn delivered(&self, index: usize) -> bool {
        self.at_cell(index, self.goals[index]) && self.held != Some(index)
    }
}

/// An instance of a task: what to do, phrased for the annotation stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub instruction: String,
    pub subtasks: Vec<String>,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "grid {}x{} too small, need at least 4x4",
                self.height, self.width
            )));
        }
        if self.height > 64 || self.width > 64 {
            return Err(Error::Config(format!(
                "grid {}x{} too large, max 64x64",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Upper bound on expert steps to success from any reset layout.
    pub fn step_budget(&self) -> usize {
        4 * (self.height + self.width) as usize
    }

    /// Deterministically lay out a new episode. Object cells, goal cells
    /// and the gripper start are pairwise distinct; the gripper starts
    /// open and on integer coordinates.
    pub fn reset(&self, seed: u64, kind: TaskKind) -> Result<(WorldState, TaskSpec)> {
        self.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut used: Vec<(u32, u32)> = Vec::new();
        let sample_cell = |rng: &mut rand_chacha::ChaCha8Rng, used: &mut Vec<(u32, u32)>| {
            loop {
                let cell = (
                    rng.random_range(0..self.height),
                    rng.random_range(0..self.width),
                );
                if !used.contains(&cell) {
                    used.push(cell);
                    return cell;
                }
            }
        };

        let (objects, goals, start, spec) = match kind {
            TaskKind::Press => {
                let button = sample_cell(&mut rng, &mut used);
                let start = sample_cell(&mut rng, &mut used);
                let color_ix = rng.random_range(0..OBJECT_COLORS.len());
                let objects = vec![Object {
                    row: button.0,
                    col: button.1,
                    color: OBJECT_COLORS[color_ix],
                }];
                let spec = TaskSpec {
                    kind,
                    instruction: format!("press the {} button.", COLOR_NAMES[color_ix]),
                    subtasks: vec!["reach the button".into(), "press the button".into()],
                };
                (objects, vec![button], start, spec)
            }
            TaskKind::Stack => {
                let mover = sample_cell(&mut rng, &mut used);
                let base = sample_cell(&mut rng, &mut used);
                let start = sample_cell(&mut rng, &mut used);
                let ca = rng.random_range(0..OBJECT_COLORS.len());
                let cb = loop {
                    let c = rng.random_range(0..OBJECT_COLORS.len());
                    if c != ca {
                        break c;
                    }
                };
                let objects = vec![
                    Object {
                        row: mover.0,
                        col: mover.1,
                        color: OBJECT_COLORS[ca],
                    },
                    Object {
                        row: base.0,
                        col: base.1,
                        color: OBJECT_COLORS[cb],
                    },
                ];
                let spec = TaskSpec {
                    kind,
                    instruction: format!(
                        "stack the {} block on the {} block.",
                        COLOR_NAMES[ca], COLOR_NAMES[cb]
                    ),
                    subtasks: vec![
                        format!("pick the {} block", COLOR_NAMES[ca]),
                        format!("stack it on the {} block", COLOR_NAMES[cb]),
                    ],
                };
                // The mover's goal is the base cell; the base is already home.
                (objects, vec![base, base], start, spec)
            }
            TaskKind::Sort => {
                let items = [("apple", OBJECT_COLORS[1]), ("carrot", OBJECT_COLORS[3])];
                let mut objects = Vec::new();
                let mut goals = Vec::new();
                for (_, color) in items.iter().take(SORT_OBJECTS) {
                    let cell = sample_cell(&mut rng, &mut used);
                    objects.push(Object {
                        row: cell.0,
                        col: cell.1,
                        color: *color,
                    });
                }
                for _ in 0..SORT_OBJECTS {
                    goals.push(sample_cell(&mut rng, &mut used));
                }
                let start = sample_cell(&mut rng, &mut used);
                let spec = TaskSpec {
                    kind,
                    instruction: "sort the produce.".into(),
                    subtasks: items
                        .iter()
                        .take(SORT_OBJECTS)
                        .map(|(name, _)| format!("place the {name}"))
                        .collect(),
                };
                (objects, goals, start, spec)
            }
        };

        let state = WorldState {
            grip_row: start.0 as f32,
            grip_col: start.1 as f32,
            closed: false,
            held: None,
            objects,
            goals,
        };
        Ok((state, spec))
    }

    /// Advance the world by one gripper action. Deltas are clamped to
    /// [-1, 1] per axis, the position is clamped to the grid, a held
    /// object tracks the gripper cell, then the gripper command applies:
    /// above 0.5 closes (grasping any object at the cell), below -0.5
    /// opens (releasing a held object in place).
    pub fn step(&self, state: &WorldState, action: &[f32]) -> Result<WorldState> {
        if action.len() != ACTION_DIMS {
            return Err(Error::Shape(format!(
                "action has {} dims, expected {ACTION_DIMS}",
                action.len()
            )));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite action {action:?}")));
        }

        let mut next = state.clone();
        next.grip_row =
            (next.grip_row + action[0].clamp(-1.0, 1.0)).clamp(0.0, (self.height - 1) as f32);
        next.grip_col =
            (next.grip_col + action[1].clamp(-1.0, 1.0)).clamp(0.0, (self.width - 1) as f32);

        let cell = next.grip_cell();
        if let Some(i) = next.held {
            next.objects[i].row = cell.0;
            next.objects[i].col = cell.1;
        }

        let g = action[2];
        if g > 0.5 && !next.closed {
            next.closed = true;
            if next.held.is_none() {
                // Lowest index wins when objects share the cell; that is
                // also the object rendered on top.
                next.held = next
                    .objects
                    .iter()
                    .position(|o| (o.row, o.col) == cell);
            }
        } else if g < -0.5 && next.closed {
            next.closed = false;
            next.held = None;
        }
        Ok(next)
    }

    /// Render one view of the state. View 0 is the full scene (goal
    /// markers under objects under the gripper, index 0 on top of object
    /// stacks); view 1 shows goal markers alone.
    pub fn render(&self, state: &WorldState, view: usize) -> Result<PaletteImage> {
        if view > 1 {
            return Err(Error::Domain(format!("view {view} out of range, have 2")));
        }
        let mut img = PaletteImage::filled(self.height, self.width);
        for (i, &(r, c)) in state.goals.iter().enumerate() {
            img.set(r, c, state.objects[i].color + GOAL_OFFSET);
        }
        if view == 1 {
            return Ok(img);
        }
        for o in state.objects.iter().rev() {
            img.set(o.row, o.col, o.color);
        }
        let (gr, gc) = state.grip_cell();
        img.set(
            gr,
            gc,
            if state.closed {
                GRIPPER_CLOSED
            } else {
                GRIPPER_OPEN
            },
        );
        Ok(img)
    }

    /// Greedy scripted policy. Returns an error once the task is already
    /// solved, which callers use as the episode terminator.
    pub fn expert_action(&self, state: &WorldState, task: &TaskSpec) -> Result<[f32; ACTION_DIMS]> {
        if is_success(state, task) {
            return Err(Error::State("task already complete".into()));
        }
        match task.kind {
            TaskKind::Press => {
                let b = &state.objects[0];
                if state.grip_cell() == (b.row, b.col) {
                    Ok([0.0, 0.0, 1.0])
                } else {
                    Ok(move_toward(state, (b.row, b.col)))
                }
            }
            TaskKind::Stack | TaskKind::Sort => {
                let i = (0..state.objects.len())
                    .find(|&i| !state.delivered(i))
                    .expect("no pending object in an unsolved task");
                if state.held == Some(i) {
                    if state.grip_cell() == state.goals[i] {
                        Ok([0.0, 0.0, -1.0])
                    } else {
                        Ok(move_toward(state, state.goals[i]))
                    }
                } else {
                    let o = &state.objects[i];
                    if state.grip_cell() == (o.row, o.col) {
                        Ok([0.0, 0.0, 1.0])
                    } else {
                        Ok(move_toward(state, (o.row, o.col)))
                    }
                }
            }
        }
    }
}

fn move_toward(state: &WorldState, target: (u32, u32)) -> [f32; ACTION_DIMS] {
    [
        (target.0 as f32 - state.grip_row).clamp(-1.0, 1.0),
        (target.1 as f32 - state.grip_col).clamp(-1.0, 1.0),
        0.0,
    ]
}

/// Whether the task's terminal condition holds.
pub fn is_success(state: &WorldState, task: &TaskSpec) -> bool {
    match task.kind {
        TaskKind::Press => {
            let b = &state.objects[0];
            state.closed && state.grip_cell() == (b.row, b.col)
        }
        TaskKind::Stack => state.delivered(0),
        TaskKind::Sort => (0..state.objects.len()).all(|i| state.delivered(i)),
    }
}

/// Partial credit in [0, 1]. Press and stack are all-or-nothing; sort
/// scores the fraction of objects delivered.
pub fn success_score(state: &WorldState, task: &TaskSpec) -> f64 {
    match task.kind {
        TaskKind::Press | TaskKind::Stack => {
            if is_success(state, task) {
                1.0
            } else {
                0.0
            }
        }
        TaskKind::Sort => {
            let done = (0..state.objects.len())
                .filter(|&i| state.delivered(i))
                .count();
            done as f64 / state.objects.len() as f64
        }
    }
}

/// How many subtasks the expert's phase machine has finished, counted as
/// the longest completed prefix so annotation history grows in order.
pub fn completed_subtasks(state: &WorldState, task: &TaskSpec) -> usize {
    match task.kind {
        TaskKind::Press => {
            let b = &state.objects[0];
            if is_success(state, task) {
                2
            } else if state.grip_cell() == (b.row, b.col) {
                1
            } else {
                0
            }
        }
        TaskKind::Stack => {
            if state.delivered(0) {
                2
            } else if state.held == Some(0) {
                1
            } else {
                0
            }
        }
        TaskKind::Sort => (0..state.objects.len())
            .take_while(|&i| state.delivered(i))
            .count(),
    }
}

/// Roll the expert to completion. Returns the visited states (one more
/// than actions) and the action sequence.
pub fn expert_rollout(
    env: &EnvConfig,
    state: WorldState,
    task: &TaskSpec,
) -> Result<(Vec<WorldState>, Vec<[f32; ACTION_DIMS]>)> {
    let mut states = vec![state];
    let mut actions = Vec::new();
    while !is_success(states.last().unwrap(), task) {
        if actions.len() >= env.step_budget() {
            return Err(Error::State(format!(
                "expert exceeded step budget {} on {} task",
                env.step_budget(),
                task.kind.name()
            )));
        }
        let a = env.expert_action(states.last().unwrap(), task)?;
        let next = env.step(states.last().unwrap(), &a)?;
        states.push(next);
        actions.push(a);
    }
    Ok((states, actions))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> EnvConfig {
        EnvConfig {
            height: 10,
            width: 10,
        }
    }

    #[test]
    fn reset_is_deterministic_and_distinct() {
        for kind in TaskKind::ALL {
            for seed in 0..200 {
                let (a, spec_a) = env().reset(seed, kind).unwrap();
                let (b, spec_b) = env().reset(seed, kind).unwrap();
                assert_eq!(a, b);
                assert_eq!(spec_a, spec_b);

                let mut cells: Vec<(u32, u32)> =
                    a.objects.iter().map(|o| (o.row, o.col)).collect();
                cells.push(a.grip_cell());
                if kind == TaskKind::Sort {
                    cells.extend(a.goals.iter().copied());
                }
                let mut dedup = cells.clone();
                dedup.sort_unstable();
                dedup.dedup();
                assert_eq!(dedup.len(), cells.len(), "overlap with seed {seed}");

                assert!(!a.closed);
                assert_eq!(a.held, None);
                assert_eq!(a.grip_row.fract(), 0.0);
                assert_eq!(spec_a.subtasks.len(), 2);
            }
        }
    }

    #[test]
    fn reset_layouts_vary_with_seed() {
        let (a, _) = env().reset(1, TaskKind::Stack).unwrap();
        let (b, _) = env().reset(2, TaskKind::Stack).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_action_is_identity() {
        let (s, _) = env().reset(3, TaskKind::Sort).unwrap();
        let next = env().step(&s, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, next);
    }

    #[test]
    fn deltas_clamp_to_unit_and_walls() {
        let (mut s, _) = env().reset(4, TaskKind::Press).unwrap();
        s.grip_row = 0.0;
        s.grip_col = 9.0;
        let next = env().step(&s, &[-5.0, 5.0, 0.0]).unwrap();
        // A huge delta still moves at most one cell, and the wall stops it.
        assert_eq!(next.grip_row, 0.0);
        assert_eq!(next.grip_col, 9.0);
        let next = env().step(&s, &[0.8, -0.25, 0.0]).unwrap();
        assert_eq!(next.grip_row, 0.8);
        assert_eq!(next.grip_col, 8.75);
    }

    #[test]
    fn grasp_carries_and_release_drops() {
        let (mut s, _) = env().reset(5, TaskKind::Stack).unwrap();
        let o = s.objects[0];
        s.grip_row = o.row as f32;
        s.grip_col = o.col as f32;

        let grasped = env().step(&s, &[0.0, 0.0, 1.0]).unwrap();
        assert!(grasped.closed);
        assert_eq!(grasped.held, Some(0));

        let moved = env().step(&grasped, &[1.0, 1.0, 0.0]).unwrap();
        let carried = moved.objects[0];
        assert_eq!(
            (carried.row, carried.col),
            moved.grip_cell(),
            "held object rides the gripper"
        );

        let dropped = env().step(&moved, &[0.0, 0.0, -1.0]).unwrap();
        assert!(!dropped.closed);
        assert_eq!(dropped.held, None);
        assert_eq!(dropped.objects[0], moved.objects[0]);
    }

    #[test]
    fn grasp_on_empty_cell_just_closes() {
        let (s, _) = env().reset(6, TaskKind::Press).unwrap();
        // The start cell is distinct from the button, so nothing is there.
        let next = env().step(&s, &[0.0, 0.0, 1.0]).unwrap();
        assert!(next.closed);
        assert_eq!(next.held, None);
    }

    #[test]
    fn step_rejects_bad_actions() {
        let (s, _) = env().reset(7, TaskKind::Press).unwrap();
        assert!(matches!(
            env().step(&s, &[0.0, 0.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            env().step(&s, &[f32::NAN, 0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn render_layers_and_views() {
        let (s, _) = env().reset(8, TaskKind::Sort).unwrap();
        let full = env().render(&s, 0).unwrap();
        let goals = env().render(&s, 1).unwrap();

        let (gr, gc) = s.grip_cell();
        assert_eq!(full.cell(gr, gc), GRIPPER_OPEN);
        for (i, o) in s.objects.iter().enumerate() {
            assert_eq!(full.cell(o.row, o.col), o.color);
            let (r, c) = s.goals[i];
            assert_eq!(full.cell(r, c), o.color + GOAL_OFFSET);
            assert_eq!(goals.cell(r, c), o.color + GOAL_OFFSET);
            assert_eq!(goals.cell(o.row, o.col), BACKGROUND);
        }
        assert!(full.cells.iter().all(|&v| v < PALETTE_MIN));
        assert!(matches!(env().render(&s, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn render_object_move_touches_two_cells() {
        let (s, _) = env().reset(9, TaskKind::Sort).unwrap();
        let before = env().render(&s, 0).unwrap();
        let mut moved = s.clone();
        // Walk object 1 to the gripper-free cell next to it if possible;
        // otherwise just swap its row with a guaranteed-free scan.
        let free = (0..10u32)
            .flat_map(|r| (0..10u32).map(move |c| (r, c)))
            .find(|&cell| {
                cell != s.grip_cell()
                    && s.objects.iter().all(|o| (o.row, o.col) != cell)
                    && !s.goals.contains(&cell)
            })
            .unwrap();
        moved.objects[1].row = free.0;
        moved.objects[1].col = free.1;
        let after = env().render(&moved, 0).unwrap();
        let diff: Vec<usize> = before
            .cells
            .iter()
            .zip(after.cells.iter())
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(diff.len(), 2, "old cell cleared, new cell painted");
    }

    #[test]
    fn stacked_objects_render_mover_on_top() {
        let (mut s, _) = env().reset(10, TaskKind::Stack).unwrap();
        s.objects[0].row = s.objects[1].row;
        s.objects[0].col = s.objects[1].col;
        let img = env().render(&s, 0).unwrap();
        assert_eq!(img.cell(s.objects[0].row, s.objects[0].col), s.objects[0].color);
    }

    #[test]
    fn expert_solves_every_task_within_budget() {
        for size in [6u32, 10, 16] {
            let env = EnvConfig {
                height: size,
                width: size,
            };
            for kind in TaskKind::ALL {
                for seed in 0..100 {
                    let (s, task) = env.reset(seed, kind).unwrap();
                    let (states, actions) = expert_rollout(&env, s, &task).unwrap();
                    assert!(is_success(states.last().unwrap(), &task));
                    assert!(
                        actions.len() <= env.step_budget(),
                        "{} steps on {}x{} {}",
                        actions.len(),
                        size,
                        size,
                        kind.name()
                    );
                }
            }
        }
    }

    #[test]
    fn expert_rejects_completed_task() {
        let (s, task) = env().reset(11, TaskKind::Press).unwrap();
        let (states, _) = expert_rollout(&env(), s, &task).unwrap();
        assert!(matches!(
            env().expert_action(states.last().unwrap(), &task),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn completed_subtasks_is_monotonic_and_ends_full() {
        for kind in TaskKind::ALL {
            for seed in 20..40 {
                let (s, task) = env().reset(seed, kind).unwrap();
                let (states, _) = expert_rollout(&env(), s, &task).unwrap();
                let mut prev = 0;
                for st in &states {
                    let done = completed_subtasks(st, &task);
                    assert!(done >= prev, "history shrank on {}", kind.name());
                    prev = done;
                }
                assert_eq!(prev, task.subtasks.len());
            }
        }
    }

    #[test]
    fn sort_score_counts_delivered_fraction() {
        // Hand-built 5-object sort state with 3 delivered, one of them held
        // (held objects do not count), so 3 of 5 scores 0.6.
        let objects: Vec<Object> = (0..5)
            .map(|i| Object {
                row: i,
                col: 0,
                color: OBJECT_COLORS[i as usize % OBJECT_COLORS.len()],
            })
            .collect();
        let goals: Vec<(u32, u32)> = (0..5)
            .map(|i| if i < 4 { (i, 0) } else { (i, 5) })
            .collect();
        let state = WorldState {
            grip_row: 3.0,
            grip_col: 0.0,
            closed: true,
            held: Some(3),
            objects,
            goals,
        };
        let task = TaskSpec {
            kind: TaskKind::Sort,
            instruction: "sort the produce.".into(),
            subtasks: vec!["a".into(); 5],
        };
        assert_eq!(success_score(&state, &task), 0.6);
        assert!(!is_success(&state, &task));
    }

    #[test]
    fn press_success_needs_closure_on_button() {
        let (s, task) = env().reset(12, TaskKind::Press).unwrap();
        let b = s.objects[0];
        let mut on_button = s.clone();
        on_button.grip_row = b.row as f32;
        on_button.grip_col = b.col as f32;
        assert!(!is_success(&on_button, &task));
        assert_eq!(completed_subtasks(&on_button, &task), 1);
        let pressed = env().step(&on_button, &[0.0, 0.0, 1.0]).unwrap();
        assert!(is_success(&pressed, &task));
        assert_eq!(success_score(&pressed, &task), 1.0);
    }
}
