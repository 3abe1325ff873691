//! KeyDoor: a tiny text world with a scripted optimal teacher.
//!
//! The agent must carry an item to a fixture. Higher difficulties add rooms,
//! and from difficulty 3 the item sits behind a locked door whose key lies in
//! another room. Rooms are mutually reachable; a locked room can only be
//! entered once opened. Every observation restates the full task status in a
//! fixed slot layout, naming anything in the agent's room as `here`:
//!
//! ```text
//! Observation: in hall, item apple pantry, goal table here, key study, locked pantry.
//! ```

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::RawTrajectory;

mod eval;

pub use eval::{evaluate_policy, evaluate_with, reason_token_ids, StudentPolicy};

pub const ENV_NAME: &str = "keydoor";

pub const ROOM_NAMES: [&str; 8] = [
    "kitchen", "pantry", "hall", "study", "garden", "cellar", "attic", "bedroom",
];
pub const ITEM_NAMES: [&str; 6] = ["apple", "book", "cup", "lamp", "coin", "vase"];
pub const FIXTURE_NAMES: [&str; 4] = ["table", "shelf", "box", "desk"];
pub const KEY: &str = "key";

pub const MIN_DIFFICULTY: u8 = 1;
pub const MAX_DIFFICULTY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemLoc {
    Room(usize),
    Held,
    Placed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    /// Names of the rooms in this world; indices below refer to this list.
    pub rooms: Vec<&'static str>,
    pub agent: usize,
    pub item: &'static str,
    pub item_loc: ItemLoc,
    pub fixture: &'static str,
    pub fixture_room: usize,
    /// `None` when the world has no key.
    pub key_loc: Option<ItemLoc>,
    /// Room behind a door, if any, and whether it is still locked.
    pub lock: Option<(usize, bool)>,
    pub difficulty: u8,
    pub steps: usize,
    pub max_steps: usize,
    pub success: bool,
}

/// Planner-level action over room indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Goto(usize),
    TakeItem,
    TakeKey,
    Open(usize),
    Place,
}

impl WorldState {
    pub fn is_done(&self) -> bool {
        self.success || self.steps >= self.max_steps
    }

    fn is_locked(&self, room: usize) -> bool {
        matches!(self.lock, Some((r, true)) if r == room)
    }

    fn room_index(&self, name: &str) -> Option<usize> {
        self.rooms.iter().position(|r| *r == name)
    }

    pub fn goal_line(&self) -> String {
        format!("Goal: put the {} on the {}.", self.item, self.fixture)
    }

    fn status(&self) -> String {
        let loc = |l: Option<ItemLoc>| match l {
            None => "none",
            Some(ItemLoc::Held) => "held",
            Some(ItemLoc::Placed) => "placed",
            Some(ItemLoc::Room(r)) if r == self.agent => "here",
            Some(ItemLoc::Room(r)) => self.rooms[r],
        };
        let fixture_room = if self.fixture_room == self.agent {
            "here"
        } else {
            self.rooms[self.fixture_room]
        };
        let locked = match self.lock {
            Some((r, true)) => self.rooms[r],
            _ => "none",
        };
        format!(
            "in {}, item {} {}, goal {} {}, key {}, locked {}.",
            self.rooms[self.agent],
            self.item,
            loc(Some(self.item_loc)),
            self.fixture,
            fixture_room,
            loc(self.key_loc),
            locked
        )
    }

    pub fn observation(&self) -> String {
        if self.success {
            format!("Observation: the {} is on the {}. task complete.", self.item, self.fixture)
        } else {
            format!("Observation: {}", self.status())
        }
    }

    fn invalid_observation(&self) -> String {
        format!("Observation: nothing happens. {}", self.status())
    }

    /// Apply a planner action without touching the step counter.
    fn apply(&mut self, action: Action) -> bool {
        match action {
            Action::Goto(r) if r < self.rooms.len() && r != self.agent && !self.is_locked(r) => {
                self.agent = r;
            }
            Action::TakeItem if self.item_loc == ItemLoc::Room(self.agent) => {
                self.item_loc = ItemLoc::Held;
            }
            Action::TakeKey if self.key_loc == Some(ItemLoc::Room(self.agent)) => {
                self.key_loc = Some(ItemLoc::Held);
            }
            Action::Open(r) if self.is_locked(r) && self.key_loc == Some(ItemLoc::Held) => {
                self.lock = Some((r, false));
            }
            Action::Place if self.item_loc == ItemLoc::Held && self.agent == self.fixture_room => {
                self.item_loc = ItemLoc::Placed;
                self.success = true;
            }
            _ => return false,
        }
        true
    }

    fn candidate_actions(&self) -> Vec<Action> {
        let n = self.rooms.len();
        (0..n)
            .map(Action::Goto)
            .chain([Action::TakeItem, Action::TakeKey, Action::Place])
            .chain((0..n).map(Action::Open))
            .collect()
    }

    /// Parse an action line body such as `goto pantry` or `place apple table`.
    pub fn parse_action(&self, text: &str) -> Option<Action> {
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["goto", room] => self.room_index(room).map(Action::Goto),
            ["take", KEY] => Some(Action::TakeKey),
            ["take", obj] if *obj == self.item => Some(Action::TakeItem),
            ["open", room] => self.room_index(room).map(Action::Open),
            ["place", obj, fix] if *obj == self.item && *fix == self.fixture => Some(Action::Place),
            _ => None,
        }
    }

    pub fn action_text(&self, action: Action) -> String {
        match action {
            Action::Goto(r) => format!("goto {}", self.rooms[r]),
            Action::TakeItem => format!("take {}", self.item),
            Action::TakeKey => format!("take {KEY}"),
            Action::Open(r) => format!("open {}", self.rooms[r]),
            Action::Place => format!("place {} {}", self.item, self.fixture),
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub observation: String,
    pub done: bool,
    pub success: bool,
    pub valid: bool,
}

/// Execute an action line body. Invalid actions are no-ops that still consume a step.
pub fn step(state: &mut WorldState, action_text: &str) -> StepOutcome {
    let valid = !state.is_done()
        && state
            .parse_action(action_text)
            .is_some_and(|a| state.apply(a));
    state.steps += 1;
    StepOutcome {
        observation: if valid { state.observation() } else { state.invalid_observation() },
        done: state.is_done(),
        success: state.success,
        valid,
    }
}

fn sample_rooms(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    let mut names = ROOM_NAMES.to_vec();
    names.shuffle(rng);
    names.truncate(n);
    names
}

/// A fresh solvable world. Difficulty is clamped into `1..=5`.
pub fn reset(seed: u64, difficulty: u8) -> WorldState {
    let difficulty = difficulty.clamp(MIN_DIFFICULTY, MAX_DIFFICULTY);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_795f_646f_6f72);
    let n_rooms = difficulty as usize;
    let rooms = sample_rooms(&mut rng, n_rooms);
    let item = *ITEM_NAMES.choose(&mut rng).unwrap();
    let fixture = *FIXTURE_NAMES.choose(&mut rng).unwrap();

    let mut idx: Vec<usize> = (0..n_rooms).collect();
    idx.shuffle(&mut rng);
    let (agent, item_room, fixture_room, key_loc, lock) = match difficulty {
        1 => (0, 0, 0, None, None),
        2 => {
            let fixture_room = idx[rng.gen_range(0..2)];
            (idx[0], idx[1], fixture_room, None, None)
        }
        3 => {
            // idx[0] locked item room; key in idx[1]; agent anywhere unlocked
            let agent = idx[rng.gen_range(1..3)];
            let fixture_room = idx[rng.gen_range(1..3)];
            (agent, idx[0], fixture_room, Some(ItemLoc::Room(idx[1])), Some((idx[0], true)))
        }
        _ => {
            // agent, key room, locked room and fixture room all distinct
            let fixture_room = idx[rng.gen_range(3..n_rooms)];
            (idx[2], idx[0], fixture_room, Some(ItemLoc::Room(idx[1])), Some((idx[0], true)))
        }
    };
    let mut state = WorldState {
        rooms,
        agent,
        item,
        item_loc: ItemLoc::Room(item_room),
        fixture,
        fixture_room,
        key_loc,
        lock,
        difficulty,
        steps: 0,
        max_steps: 0,
        success: false,
    };
    let optimal = shortest_plan(&state).expect("generated worlds are solvable").len();
    state.max_steps = optimal + 4;
    state
}

fn search_key(s: &WorldState) -> (usize, ItemLoc, Option<ItemLoc>, Option<(usize, bool)>, bool) {
    (s.agent, s.item_loc, s.key_loc, s.lock, s.success)
}

/// Breadth-first search for a shortest action sequence reaching success.
pub fn shortest_plan(start: &WorldState) -> Option<Vec<Action>> {
    if start.success {
        return Some(Vec::new());
    }
    let mut seen = HashSet::new();
    let mut parent: HashMap<_, (_, Action)> = HashMap::new();
    let mut queue = VecDeque::new();
    seen.insert(search_key(start));
    queue.push_back(start.clone());
    while let Some(s) = queue.pop_front() {
        for a in s.candidate_actions() {
            let mut next = s.clone();
            if !next.apply(a) {
                continue;
            }
            let k = search_key(&next);
            if !seen.insert(k) {
                continue;
            }
            parent.insert(k, (search_key(&s), a));
            if next.success {
                let mut plan = vec![];
                let mut cur = k;
                let root = search_key(start);
                while cur != root {
                    let (p, a) = parent[&cur];
                    plan.push(a);
                    cur = p;
                }
                plan.reverse();
                return Some(plan);
            }
            queue.push_back(next);
        }
    }
    None
}

/// The teacher's next subgoal, chosen greedily from the task status.
pub fn teacher_action(state: &WorldState) -> Result<Action> {
    if state.success || state.item_loc == ItemLoc::Placed {
        return Err(Error::Unsolvable);
    }
    if state.item_loc == ItemLoc::Held {
        return Ok(if state.agent == state.fixture_room {
            Action::Place
        } else {
            Action::Goto(state.fixture_room)
        });
    }
    let ItemLoc::Room(item_room) = state.item_loc else {
        unreachable!()
    };
    if state.is_locked(item_room) {
        return match state.key_loc {
            Some(ItemLoc::Held) => Ok(Action::Open(item_room)),
            Some(ItemLoc::Room(r)) if r == state.agent => Ok(Action::TakeKey),
            Some(ItemLoc::Room(r)) => Ok(Action::Goto(r)),
            _ => Err(Error::Unsolvable),
        };
    }
    Ok(if state.agent == item_room {
        Action::TakeItem
    } else {
        Action::Goto(item_room)
    })
}

/// One reasoning line and one action line explaining the teacher's next move.
pub fn scripted_teacher(state: &WorldState) -> Result<(String, String)> {
    let action = teacher_action(state)?;
    let room = |r: usize| state.rooms[r];
    let locked = || state.lock.map(|(r, _)| room(r)).unwrap_or("door");
    let reason = match action {
        Action::Goto(r) if state.item_loc == ItemLoc::Held => format!(
            "I hold the {} and the {} is in the {}, so I should go there.",
            state.item,
            state.fixture,
            room(r)
        ),
        Action::Goto(r) if state.item_loc == ItemLoc::Room(r) => {
            format!("the {} is in the {}, so I should go there.", state.item, room(r))
        }
        Action::Goto(r) => format!(
            "the {} is locked and the key is in the {}, so I should go there.",
            locked(),
            room(r)
        ),
        Action::TakeItem => format!("the {} is here, so I should take it.", state.item),
        Action::TakeKey => format!("the {} is locked and the key is here, so I should take it.", locked()),
        Action::Open(_) => format!("the {} is locked and I hold the key, so I should open it.", locked()),
        Action::Place => format!(
            "I hold the {} and the {} is here, so I should place it.",
            state.item, state.fixture
        ),
    };
    Ok((format!("Reasoning: {reason}"), format!("Action: {}", state.action_text(action))))
}

/// Number of turns (reasoning + action pairs) in an episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub raw: RawTrajectory,
    pub success: bool,
    pub steps: usize,
}

/// Anything that can produce a reasoning line and an action line for the current turn.
pub trait Policy {
    fn turn(&mut self, state: &WorldState, transcript: &[String]) -> Result<(String, String)>;
}

pub struct TeacherPolicy;

impl Policy for TeacherPolicy {
    fn turn(&mut self, state: &WorldState, _transcript: &[String]) -> Result<(String, String)> {
        scripted_teacher(state)
    }
}

/// Per-turn hook observing the state before the policy acts.
pub type TurnHook<'a> = dyn FnMut(&WorldState) + 'a;

/// Roll out a policy until success or the step limit.
pub fn run_episode(
    mut state: WorldState,
    task_id: String,
    policy: &mut dyn Policy,
    on_turn: &mut TurnHook<'_>,
) -> Result<Episode> {
    let mut lines = vec![state.goal_line(), state.observation()];
    let mut turns = 0;
    while !state.is_done() {
        on_turn(&state);
        let (reason, action) = policy.turn(&state, &lines)?;
        let body = action.strip_prefix("Action:").unwrap_or(&action).trim().to_string();
        lines.push(reason);
        lines.push(action);
        let out = step(&mut state, &body);
        turns += 1;
        lines.push(out.observation);
    }
    Ok(Episode {
        raw: RawTrajectory {
            env_name: ENV_NAME.into(),
            task_id,
            goal: state.goal_line().trim_start_matches("Goal: ").to_string(),
            lines,
            final_success: state.success,
        },
        success: state.success,
        steps: turns,
    })
}

/// Requested share of each difficulty level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMix(pub Vec<(u8, f64)>);

impl Default for DifficultyMix {
    fn default() -> Self {
        Self(vec![(1, 0.2), (2, 0.4), (3, 0.4)])
    }
}

impl DifficultyMix {
    /// Parse `"1:0.2,2:0.5,3:0.3"`. Weights are normalized.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (d, w) = part
                .split_once(':')
                .ok_or_else(|| format!("expected <level>:<weight>, got {part:?}"))?;
            let d: u8 = d.trim().parse().map_err(|e| format!("bad level {d:?}: {e}"))?;
            let w: f64 = w.trim().parse().map_err(|e| format!("bad weight {w:?}: {e}"))?;
            if !(MIN_DIFFICULTY..=MAX_DIFFICULTY).contains(&d) {
                return Err(format!("difficulty {d} outside 1..=5"));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("weight for level {d} must be non-negative"));
            }
            out.push((d, w));
        }
        let total: f64 = out.iter().map(|p| p.1).sum();
        if out.is_empty() || total <= 0.0 {
            return Err("difficulty mix is empty".into());
        }
        Ok(Self(out.into_iter().map(|(d, w)| (d, w / total)).collect()))
    }

    /// Difficulty of each of `n` episodes: exact largest-remainder quotas in a seeded shuffle.
    pub fn assign(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let total: f64 = self.0.iter().map(|p| p.1).sum();
        let exact: Vec<f64> = self.0.iter().map(|p| p.1 / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        let mut out: Vec<u8> = self
            .0
            .iter()
            .zip(&counts)
            .flat_map(|(&(d, _), &c)| std::iter::repeat_n(d, c))
            .collect();
        out.shuffle(rng);
        out
    }
}

impl std::fmt::Display for DifficultyMix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(d, w)| format!("{d}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Seeds and difficulties for `n` task instances.
pub fn task_instances(n: usize, seed: u64, mix: &DifficultyMix) -> Vec<(String, u64, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = mix.assign(n, &mut rng);
    levels
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("kd-{seed}-{i:06}"), rng.gen::<u64>(), d))
        .collect()
}

/// `n` successful teacher episodes.
pub fn generate_corpus(n: usize, seed: u64, mix: &DifficultyMix) -> Result<Vec<RawTrajectory>> {
    task_instances(n, seed, mix)
        .into_iter()
        .map(|(id, s, d)| {
            run_episode(reset(s, d), id, &mut TeacherPolicy, &mut |_| {}).map(|e| e.raw)
        })
        .collect()
}
