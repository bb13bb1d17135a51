//! Synthetic page-graph navigation environment.
//!
//! Reproduces the structural hazards of long-horizon web tasks — deep paths,
//! distractor branches, loop traps, wrong-page termination — while staying
//! fully deterministic and seedable. The environment hands out a sparse
//! binary reward: 1 exactly when the agent calls `Exit` in a state satisfying
//! the task's goal predicate, 0 everywhere else.
//!
//! Three graph families are provided:
//! - `chain`: a linear path of pages with dead distractor elements;
//! - `tree`: a main path with distractor leaf children reachable by click and
//!   escapable with `Back`, plus a goal flag that must be set on the last page;
//! - `loop_trap`: a chain with a 3-page cycle hanging off a mid page, there to
//!   elicit stuck-in-loop behavior.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct PageId(pub u32);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ElementId(pub u32);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct FlagId(pub u32);

/// Discrete agent action. `Click` on an element without an outgoing edge is a
/// no-op self-loop rather than an error, so policies can exhibit stagnation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Click { element: ElementId },
    SetFlag { flag: FlagId },
    Back,
    Scroll,
    Wait,
    Exit { message: String },
}

impl Action {
    pub fn is_exit(&self) -> bool {
        matches!(self, Action::Exit { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphFamily {
    Chain,
    Tree,
    LoopTrap,
}

impl GraphFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            GraphFamily::Chain => "chain",
            GraphFamily::Tree => "tree",
            GraphFamily::LoopTrap => "loop_trap",
        }
    }
}

/// Generation parameters for one environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub family: GraphFamily,
    /// Total page budget for the generated graph.
    pub pages: u32,
    /// Elements per page (forward link plus distractors).
    pub branching: u32,
    /// Number of subgoals K.
    pub subgoals: u32,
    /// Episode horizon H in steps.
    pub horizon: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalPredicate {
    pub page: PageId,
    pub flags: BTreeSet<FlagId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubgoalPredicate {
    VisitedPage { page: PageId },
    FlagSet { flag: FlagId },
    ActionPerformed { page: PageId, action: Action },
}

impl SubgoalPredicate {
    /// Template label used for task-similarity features.
    pub fn kind(&self) -> &'static str {
        match self {
            SubgoalPredicate::VisitedPage { .. } => "visited_page",
            SubgoalPredicate::FlagSet { .. } => "flag_set",
            SubgoalPredicate::ActionPerformed { .. } => "action_performed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalSpec {
    pub subgoal_id: String,
    pub predicate: SubgoalPredicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub instruction: String,
    pub family: GraphFamily,
    pub start_page: PageId,
    pub goal: GoalPredicate,
    pub subgoals: Vec<SubgoalSpec>,
    pub horizon: u32,
}

impl TaskSpec {
    pub fn subgoal_count(&self) -> usize {
        self.subgoals.len()
    }
}

/// Static page graph. Edges are click transitions keyed by (page, element);
/// flags are settable only on their designated site page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageGraph {
    pub pages: Vec<PageId>,
    pub elements: BTreeMap<PageId, Vec<ElementId>>,
    pub edges: BTreeMap<(PageId, ElementId), PageId>,
    pub flag_sites: BTreeMap<FlagId, PageId>,
    pub seed: u64,
}

impl PageGraph {
    pub fn contains_page(&self, page: PageId) -> bool {
        self.pages.contains(&page)
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn elements_of(&self, page: PageId) -> &[ElementId] {
        self.elements.get(&page).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub page: PageId,
    pub visible_elements: Vec<ElementId>,
    pub flags_visible: BTreeSet<FlagId>,
}

/// A generated environment instance: graph, task, and a constructive success
/// path used for build-time reachability verification and warm-up data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub graph: PageGraph,
    pub task: TaskSpec,
    pub golden_path: Vec<Action>,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("infeasible environment config: {0}")]
    InfeasibleConfig(String),
    #[error("task {0} does not belong to this graph")]
    TaskMismatch(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
}

pub const EXIT_MESSAGE: &str = "done";

/// Build a graph for (config, seed). Identical inputs yield identical graphs.
pub fn build_graph(config: &EnvConfig, seed: u64) -> Result<PageGraph, EnvError> {
    build_instance(config, seed).map(|i| i.graph)
}

/// Build a full instance (graph + task + golden path) for (config, seed).
pub fn build_instance(config: &EnvConfig, seed: u64) -> Result<Instance, EnvError> {
    let k = config.subgoals;
    if k == 0 {
        return Err(EnvError::InfeasibleConfig("subgoals must be >= 1".into()));
    }
    if config.pages == 0 {
        return Err(EnvError::InfeasibleConfig("page count must be >= 1".into()));
    }
    if k > config.pages {
        return Err(EnvError::InfeasibleConfig(format!(
            "subgoals ({k}) exceed page count ({})",
            config.pages
        )));
    }
    if config.horizon < k {
        return Err(EnvError::InfeasibleConfig(format!(
            "horizon ({}) below subgoal count ({k})",
            config.horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ config.seed);
    let instance = match config.family {
        GraphFamily::Chain => build_chain(config, seed, &mut rng)?,
        GraphFamily::Tree => build_tree(config, seed, &mut rng)?,
        GraphFamily::LoopTrap => build_loop_trap(config, seed, &mut rng)?,
    };
    verify_golden_path(&instance)?;
    Ok(instance)
}

/// Evenly spaced milestone positions along a path of `depth` pages (indices
/// 1..depth-1 plus the final page). Positions are strictly increasing.
fn milestone_positions(depth: u32, k: u32) -> Result<Vec<u32>, EnvError> {
    if depth == 1 {
        // Degenerate single-page path: the only milestone is the start page.
        return if k == 1 {
            Ok(vec![0])
        } else {
            Err(EnvError::InfeasibleConfig(
                "single-page path supports exactly one subgoal".into(),
            ))
        };
    }
    if k > depth - 1 {
        return Err(EnvError::InfeasibleConfig(format!(
            "path depth {depth} too short for {k} milestones"
        )));
    }
    let last = depth - 1;
    let mut out = Vec::with_capacity(k as usize);
    for i in 1..=k {
        let pos = (i as u64 * last as u64).div_ceil(k as u64) as u32;
        out.push(pos);
    }
    out.dedup();
    if out.len() != k as usize {
        return Err(EnvError::InfeasibleConfig(format!(
            "milestones collapse on a depth-{depth} path with K={k}"
        )));
    }
    Ok(out)
}

fn visited_milestones(main_path: &[PageId], positions: &[u32]) -> Vec<SubgoalSpec> {
    positions
        .iter()
        .enumerate()
        .map(|(i, &pos)| SubgoalSpec {
            subgoal_id: format!("sg{}", i),
            predicate: SubgoalPredicate::VisitedPage {
                page: main_path[pos as usize],
            },
        })
        .collect()
}

/// Linear chain with dead distractor elements on every page.
fn build_chain(config: &EnvConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Instance, EnvError> {
    let n = config.pages;
    let pages: Vec<PageId> = (0..n).map(PageId).collect();
    let mut elements = BTreeMap::new();
    let mut edges = BTreeMap::new();
    let extra = config.branching.max(2) - 1;
    for i in 0..n {
        let page = PageId(i);
        let mut els = vec![ElementId(0)];
        // Distractor count varies with the seed so siblings differ.
        let n_distractors = 1 + rng.gen_range(0..extra.max(1));
        for d in 0..n_distractors {
            els.push(ElementId(d + 1));
        }
        elements.insert(page, els);
        if i + 1 < n {
            edges.insert((page, ElementId(0)), PageId(i + 1));
        }
    }
    let positions = milestone_positions(n, config.subgoals)?;
    let subgoals = visited_milestones(&pages, &positions);
    let goal_page = PageId(n - 1);
    let task = TaskSpec {
        task_id: format!("chain-p{n}-k{}-s{seed}", config.subgoals),
        instruction: format!("Navigate the {n}-page chain to its final page and exit."),
        family: GraphFamily::Chain,
        start_page: PageId(0),
        goal: GoalPredicate {
            page: goal_page,
            flags: BTreeSet::new(),
        },
        subgoals,
        horizon: config.horizon,
    };
    let mut golden_path: Vec<Action> = (1..n)
        .map(|_| Action::Click {
            element: ElementId(0),
        })
        .collect();
    golden_path.push(Action::Exit {
        message: EXIT_MESSAGE.into(),
    });
    Ok(Instance {
        graph: PageGraph {
            pages,
            elements,
            edges,
            flag_sites: BTreeMap::new(),
            seed,
        },
        task,
        golden_path,
    })
}

/// Main path with distractor leaf children and a goal flag on the last page.
fn build_tree(config: &EnvConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Instance, EnvError> {
    let n = config.pages;
    let b = config.branching.max(2);
    let depth = (n / b).max(config.subgoals.max(2)).min(n);
    let main_path: Vec<PageId> = (0..depth).map(PageId).collect();
    let mut pages = main_path.clone();
    let mut elements = BTreeMap::new();
    let mut edges = BTreeMap::new();
    let mut next_page = depth;
    for i in 0..depth {
        let page = PageId(i);
        let mut els = vec![ElementId(0)];
        if i + 1 < depth {
            edges.insert((page, ElementId(0)), PageId(i + 1));
        }
        let n_children = rng.gen_range(1..b);
        for c in 0..n_children {
            if next_page >= n {
                break;
            }
            let leaf = PageId(next_page);
            next_page += 1;
            pages.push(leaf);
            els.push(ElementId(c + 1));
            edges.insert((page, ElementId(c + 1)), leaf);
            // Leaves expose only a dead distractor; escape is via Back.
            elements.insert(leaf, vec![ElementId(1)]);
        }
        elements.insert(page, els);
    }
    let goal_page = main_path[depth as usize - 1];
    let goal_flag = FlagId(0);
    let flag_sites = BTreeMap::from([(goal_flag, goal_page)]);
    let k = config.subgoals;
    let mut subgoals = if k > 1 {
        let positions = milestone_positions(depth, k - 1)?;
        visited_milestones(&main_path, &positions)
    } else {
        Vec::new()
    };
    subgoals.push(SubgoalSpec {
        subgoal_id: format!("sg{}", subgoals.len()),
        predicate: SubgoalPredicate::FlagSet { flag: goal_flag },
    });
    for (i, sg) in subgoals.iter_mut().enumerate() {
        sg.subgoal_id = format!("sg{i}");
    }
    let task = TaskSpec {
        task_id: format!("tree-p{n}-k{k}-s{seed}"),
        instruction: format!(
            "Follow the main path of the depth-{depth} tree, confirm on the final page, and exit."
        ),
        family: GraphFamily::Tree,
        start_page: PageId(0),
        goal: GoalPredicate {
            page: goal_page,
            flags: BTreeSet::from([goal_flag]),
        },
        subgoals,
        horizon: config.horizon,
    };
    let mut golden_path: Vec<Action> = (1..depth)
        .map(|_| Action::Click {
            element: ElementId(0),
        })
        .collect();
    golden_path.push(Action::SetFlag { flag: goal_flag });
    golden_path.push(Action::Exit {
        message: EXIT_MESSAGE.into(),
    });
    Ok(Instance {
        graph: PageGraph {
            pages,
            elements,
            edges,
            flag_sites,
            seed,
        },
        task,
        golden_path,
    })
}

/// Chain with a 3-page cycle reachable from a mid page. The cycle pages link
/// only to each other, so an agent that wanders in must `Back` out; this
/// family exists to elicit stuck-in-loop failures.
fn build_loop_trap(
    config: &EnvConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Instance, EnvError> {
    let n = config.pages;
    if n < 5 {
        return Err(EnvError::InfeasibleConfig(
            "loop_trap needs at least 5 pages".into(),
        ));
    }
    let depth = n - 3;
    if depth < config.subgoals.max(2) {
        return Err(EnvError::InfeasibleConfig(format!(
            "loop_trap main path of depth {depth} too short for K={}",
            config.subgoals
        )));
    }
    let main_path: Vec<PageId> = (0..depth).map(PageId).collect();
    let cycle: Vec<PageId> = (depth..depth + 3).map(PageId).collect();
    let mut pages = main_path.clone();
    pages.extend(cycle.iter().copied());
    let mut elements = BTreeMap::new();
    let mut edges = BTreeMap::new();
    for i in 0..depth {
        let page = PageId(i);
        elements.insert(page, vec![ElementId(0), ElementId(1)]);
        if i + 1 < depth {
            edges.insert((page, ElementId(0)), PageId(i + 1));
        }
    }
    // Trap entry sits somewhere in the middle of the path.
    let trap_at = rng.gen_range(1..depth - 1);
    edges.insert((PageId(trap_at), ElementId(1)), cycle[0]);
    for (i, &cp) in cycle.iter().enumerate() {
        elements.insert(cp, vec![ElementId(0), ElementId(1)]);
        edges.insert((cp, ElementId(0)), cycle[(i + 1) % 3]);
    }
    let positions = milestone_positions(depth, config.subgoals)?;
    let subgoals = visited_milestones(&main_path, &positions);
    let goal_page = main_path[depth as usize - 1];
    let task = TaskSpec {
        task_id: format!("loop_trap-p{n}-k{}-s{seed}", config.subgoals),
        instruction: format!(
            "Reach the final page of the {depth}-page path without getting caught in the side loop, then exit."
        ),
        family: GraphFamily::LoopTrap,
        start_page: PageId(0),
        goal: GoalPredicate {
            page: goal_page,
            flags: BTreeSet::new(),
        },
        subgoals,
        horizon: config.horizon,
    };
    let mut golden_path: Vec<Action> = (1..depth)
        .map(|_| Action::Click {
            element: ElementId(0),
        })
        .collect();
    golden_path.push(Action::Exit {
        message: EXIT_MESSAGE.into(),
    });
    Ok(Instance {
        graph: PageGraph {
            pages,
            elements,
            edges,
            flag_sites: BTreeMap::new(),
            seed,
        },
        task,
        golden_path,
    })
}

fn verify_golden_path(instance: &Instance) -> Result<(), EnvError> {
    if instance.golden_path.len() as u32 > instance.task.horizon {
        return Err(EnvError::InfeasibleConfig(format!(
            "success path of length {} exceeds horizon {}",
            instance.golden_path.len(),
            instance.task.horizon
        )));
    }
    let mut episode = Episode::reset(&instance.graph, &instance.task)?;
    let mut reward = 0;
    for action in &instance.golden_path {
        let outcome = episode.step(action.clone())?;
        reward = outcome.reward;
    }
    if reward != 1 {
        return Err(EnvError::InfeasibleConfig(
            "constructed success path does not reach the goal".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: u8,
    pub done: bool,
}

/// A single in-progress episode. Stepping is fully deterministic; all
/// randomness lives in the policy.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    graph: &'a PageGraph,
    task: &'a TaskSpec,
    page: PageId,
    back_stack: Vec<PageId>,
    flags: BTreeSet<FlagId>,
    history: Vec<Action>,
    done: bool,
    exited: bool,
}

impl<'a> Episode<'a> {
    /// Start an episode at the task's start page with flags cleared.
    pub fn reset(graph: &'a PageGraph, task: &'a TaskSpec) -> Result<Self, EnvError> {
        if !graph.contains_page(task.start_page) || !graph.contains_page(task.goal.page) {
            return Err(EnvError::TaskMismatch(task.task_id.clone()));
        }
        Ok(Episode {
            graph,
            task,
            page: task.start_page,
            back_stack: Vec::new(),
            flags: BTreeSet::new(),
            history: Vec::new(),
            done: false,
            exited: false,
        })
    }

    pub fn observation(&self) -> Observation {
        Observation {
            page: self.page,
            visible_elements: self.graph.elements_of(self.page).to_vec(),
            flags_visible: self.flags.clone(),
        }
    }

    pub fn current_page(&self) -> PageId {
        self.page
    }

    pub fn flags(&self) -> &BTreeSet<FlagId> {
        &self.flags
    }

    pub fn history(&self) -> &[Action] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn exited(&self) -> bool {
        self.exited
    }

    pub fn goal_satisfied(&self) -> bool {
        self.page == self.task.goal.page && self.task.goal.flags.is_subset(&self.flags)
    }

    /// Advance one step. Reward is 1 iff the action is `Exit` and the goal
    /// predicate holds in the current state; the episode also ends when the
    /// step count reaches the horizon.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let mut reward = 0;
        match &action {
            Action::Click { element } => {
                if let Some(&target) = self.graph.edges.get(&(self.page, *element)) {
                    self.back_stack.push(self.page);
                    self.page = target;
                }
                // No edge: self-loop, the page does not change.
            }
            Action::SetFlag { flag } => {
                if self.graph.flag_sites.get(flag) == Some(&self.page) {
                    self.flags.insert(*flag);
                }
            }
            Action::Back => {
                if let Some(prev) = self.back_stack.pop() {
                    self.page = prev;
                }
            }
            Action::Scroll | Action::Wait => {}
            Action::Exit { .. } => {
                if self.goal_satisfied() {
                    reward = 1;
                }
                self.done = true;
                self.exited = true;
            }
        }
        self.history.push(action);
        if self.history.len() as u32 >= self.task.horizon {
            self.done = true;
        }
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done: self.done,
        })
    }
}

/// Incremental subgoal checker. Completion is absorbing: once a predicate is
/// observed true along the prefix it stays set.
#[derive(Debug, Clone)]
pub struct SubgoalTracker {
    visited: BTreeSet<PageId>,
    flags_seen: BTreeSet<FlagId>,
    performed: BTreeSet<(PageId, Action)>,
    z: Vec<u8>,
}

impl SubgoalTracker {
    pub fn new(task: &TaskSpec) -> Self {
        let mut tracker = SubgoalTracker {
            visited: BTreeSet::from([task.start_page]),
            flags_seen: BTreeSet::new(),
            performed: BTreeSet::new(),
            z: vec![0; task.subgoals.len()],
        };
        tracker.refresh(task);
        tracker
    }

    /// Record an action taken on `page` that transitioned to `next` with the
    /// given post-action flag set.
    pub fn observe(
        &mut self,
        task: &TaskSpec,
        page: PageId,
        action: &Action,
        next: PageId,
        flags: &BTreeSet<FlagId>,
    ) {
        self.visited.insert(next);
        self.flags_seen.extend(flags.iter().copied());
        self.performed.insert((page, action.clone()));
        self.refresh(task);
    }

    fn refresh(&mut self, task: &TaskSpec) {
        for (k, sg) in task.subgoals.iter().enumerate() {
            if self.z[k] == 1 {
                continue;
            }
            let holds = match &sg.predicate {
                SubgoalPredicate::VisitedPage { page } => self.visited.contains(page),
                SubgoalPredicate::FlagSet { flag } => self.flags_seen.contains(flag),
                SubgoalPredicate::ActionPerformed { page, action } => {
                    self.performed.contains(&(*page, action.clone()))
                }
            };
            if holds {
                self.z[k] = 1;
            }
        }
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }
}

/// Subgoal completion vector after executing `history` from the task start.
/// Total function: inconsistent histories simply fail to complete subgoals.
pub fn check_subgoals(graph: &PageGraph, task: &TaskSpec, history: &[Action]) -> Vec<u8> {
    subgoal_trace(graph, task, history)
        .last()
        .cloned()
        .unwrap_or_else(|| vec![0; task.subgoals.len()])
}

/// Per-step subgoal completion rows: row t is z after executing history[..=t].
/// Rows are monotone componentwise by construction.
pub fn subgoal_trace(graph: &PageGraph, task: &TaskSpec, history: &[Action]) -> Vec<Vec<u8>> {
    let mut episode = match Episode::reset(graph, task) {
        Ok(e) => e,
        Err(_) => return vec![vec![0; task.subgoals.len()]; history.len()],
    };
    let mut tracker = SubgoalTracker::new(task);
    let mut rows = Vec::with_capacity(history.len());
    for action in history {
        let page = episode.current_page();
        if episode.is_done() {
            rows.push(tracker.z().to_vec());
            continue;
        }
        let _ = episode.step(action.clone());
        tracker.observe(task, page, action, episode.current_page(), episode.flags());
        rows.push(tracker.z().to_vec());
    }
    rows
}
