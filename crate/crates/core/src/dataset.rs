//! Synthetic scenes and expert episodes, corpus splits, and the modality
//! masks used by the ablation rows.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Observation, TokenVocab};
use crate::error::{Error, Result};
use crate::heads::{Action, SubGoal};
use crate::history::VisualHistory;
use crate::model::ModelInputs;
use crate::tensor::Tensor;
use crate::world::{
    class_index, class_name, is_openable, is_portable, is_sliceable, receptacle_object, Cell, Outcome, Task,
    TaskKind, WorldState, PORTABLE_OBJECTS, RECEPTACLES,
};

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Object-vocabulary class.
    pub class: usize,
    pub cell: Cell,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    /// Pixels per grid cell in rendered frames.
    pub cell_size: usize,
    /// Receptacles first, then portable objects.
    pub items: Vec<Placement>,
    /// Colour per object class (index 0 unused).
    pub palette: Vec<[u8; 3]>,
    pub floor: [u8; 3],
    pub agent_start: Cell,
}

impl Scene {
    pub fn count(&self, class: usize) -> usize {
        self.items.iter().filter(|p| p.class == class).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::with_capacity(self.items.len() + 1);
        for p in &self.items {
            if p.cell.0 >= self.width || p.cell.1 >= self.height {
                return Err(Error::Validation(format!("scene {}: item outside the grid", self.id)));
            }
            if seen.contains(&p.cell) {
                return Err(Error::Validation(format!("scene {}: two items share cell {:?}", self.id, p.cell)));
            }
            if p.class == 0 || p.class >= self.palette.len() {
                return Err(Error::Validation(format!("scene {}: bad class {}", self.id, p.class)));
            }
            seen.push(p.cell);
        }
        if seen.contains(&self.agent_start) {
            return Err(Error::Validation(format!("scene {}: agent starts on an item", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub cell_size: usize,
    /// Portable object instances to place.
    pub objects: usize,
    /// Make the last object a second instance of the first class.
    pub duplicate: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            cell_size: 4,
            objects: 5,
            duplicate: false,
        }
    }
}

const BASE_COLORS: [[u8; 3]; 20] = [
    [200, 30, 30],
    [190, 140, 70],
    [230, 230, 230],
    [240, 220, 170],
    [150, 150, 170],
    [60, 200, 60],
    [40, 90, 200],
    [240, 200, 0],
    [200, 200, 120],
    [140, 100, 50],
    [255, 80, 60],
    [120, 40, 160],
    [120, 120, 120],
    [110, 60, 20],
    [170, 110, 60],
    [90, 160, 210],
    [80, 80, 90],
    [210, 240, 250],
    [100, 60, 40],
    [180, 120, 180],
];

/// Places every receptacle plus `objects` portable items on distinct cells,
/// with every item reachable from the agent start.
pub fn generate_scene(id: u32, seed: u64, config: &SceneConfig) -> Result<Scene> {
    let cells = config.width * config.height;
    let needed = RECEPTACLES.len() + config.objects + 1;
    if config.width == 0 || config.height == 0 || needed > cells {
        return Err(Error::Generation(format!(
            "a {}x{} grid cannot hold {needed} items and the agent",
            config.width, config.height
        )));
    }
    if config.objects > PORTABLE_OBJECTS.len() + usize::from(config.duplicate) {
        return Err(Error::Generation(format!("{} distinct objects requested", config.objects)));
    }
    if config.cell_size < 4 || config.cell_size % 4 != 0 {
        return Err(Error::Generation("cell size must be a positive multiple of 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut palette = vec![[0u8; 3]; PORTABLE_OBJECTS.len() + RECEPTACLES.len() + 1];
    for (c, base) in BASE_COLORS.iter().enumerate() {
        palette[c + 1] = base.map(|v| (v as i32 + rng.gen_range(-28..=28)).clamp(0, 255) as u8);
    }
    let floor = [45u8, 45, 45].map(|v| (v as i32 + rng.gen_range(-10..=10)) as u8);

    let mut classes: Vec<usize> = (1..=RECEPTACLES.len()).map(receptacle_object).collect();
    let mut portable: Vec<usize> = (1..=PORTABLE_OBJECTS.len()).collect();
    portable.shuffle(&mut rng);
    let distinct = if config.duplicate && config.objects >= 2 {
        config.objects - 1
    } else {
        config.objects
    };
    classes.extend_from_slice(&portable[..distinct]);
    if distinct < config.objects {
        classes.push(portable[0]);
    }

    let mut all: Vec<Cell> = (0..cells).map(|j| (j % config.width, j / config.width)).collect();
    for _ in 0..200 {
        all.shuffle(&mut rng);
        let scene = Scene {
            id,
            width: config.width,
            height: config.height,
            cell_size: config.cell_size,
            items: classes
                .iter()
                .zip(&all)
                .map(|(&class, &cell)| Placement { class, cell })
                .collect(),
            palette: palette.clone(),
            floor,
            agent_start: all[classes.len()],
        };
        if all_reachable(&scene) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(format!("scene {id}: no layout with every item reachable")))
}

fn all_reachable(scene: &Scene) -> bool {
    let state = WorldState::new(scene);
    let reach = state.reachable_cells();
    scene.items.iter().all(|p| {
        reach
            .iter()
            .any(|c| c.0.abs_diff(p.cell.0) + c.1.abs_diff(p.cell.1) == 1)
    })
}

/// Expert sub-goal sequence for a task.
pub fn expand_task(task: &Task) -> Vec<SubGoal> {
    let o = task.object;
    let r = task.receptacle;
    let rc = receptacle_object(r);
    let nav = |c| SubGoal::new(Action::Navigate, c, 0);
    let pick = |c| SubGoal::new(Action::PickUp, c, 0);
    let put = |c, r| SubGoal::new(Action::Put, c, r);
    let on = |a, c| SubGoal::new(a, c, 0);
    let place = |out: &mut Vec<SubGoal>| {
        out.push(nav(rc));
        if is_openable(rc) {
            out.push(on(Action::Open, rc));
            out.push(put(o, r));
            out.push(on(Action::Close, rc));
        } else {
            out.push(put(o, r));
        }
    };
    let mut out = Vec::with_capacity(14);
    match task.kind {
        TaskKind::PickPlace => {
            out.extend([nav(o), pick(o)]);
            place(&mut out);
        }
        TaskKind::PickTwo => {
            for _ in 0..2 {
                out.extend([nav(o), pick(o)]);
                place(&mut out);
            }
        }
        TaskKind::CleanPlace => {
            let sink = class_index("Sink").expect("sink");
            let sink_r = sink - PORTABLE_OBJECTS.len();
            out.extend([
                nav(o),
                pick(o),
                nav(sink),
                put(o, sink_r),
                on(Action::ToggleOn, sink),
                on(Action::ToggleOff, sink),
                pick(o),
            ]);
            place(&mut out);
        }
        TaskKind::HeatPlace => {
            let mw = class_index("Microwave").expect("microwave");
            let mw_r = mw - PORTABLE_OBJECTS.len();
            out.extend([
                nav(o),
                pick(o),
                nav(mw),
                on(Action::Open, mw),
                put(o, mw_r),
                on(Action::Close, mw),
                on(Action::ToggleOn, mw),
                on(Action::ToggleOff, mw),
                on(Action::Open, mw),
                pick(o),
                on(Action::Close, mw),
            ]);
            place(&mut out);
        }
        TaskKind::SlicePlace => {
            let knife = class_index("Knife").expect("knife");
            let counter = class_index("CounterTop").expect("countertop");
            out.extend([
                nav(knife),
                pick(knife),
                nav(o),
                on(Action::Slice, o),
                nav(counter),
                put(knife, counter - PORTABLE_OBJECTS.len()),
                nav(o),
                pick(o),
            ]);
            place(&mut out);
        }
    }
    out.push(SubGoal::stop());
    out
}

/// Checks that a scene has what a task refers to.
pub fn check_task(scene: &Scene, task: &Task) -> Result<()> {
    let fail = |why: &str| {
        Err(Error::Validation(format!(
            "{} {} -> {} in scene {}: {why}",
            task.kind.name(),
            class_name(task.object),
            class_name(receptacle_object(task.receptacle)),
            scene.id
        )))
    };
    if !is_portable(task.object) {
        return fail("object is not portable");
    }
    if task.receptacle == 0 || task.receptacle > RECEPTACLES.len() {
        return fail("no such receptacle");
    }
    let rc = receptacle_object(task.receptacle);
    if scene.count(rc) != 1 {
        return fail("receptacle missing");
    }
    let want = if task.kind == TaskKind::PickTwo { 2 } else { 1 };
    if scene.count(task.object) != want {
        return fail("object count does not fit the template");
    }
    let fixed_target = matches!(task.kind, TaskKind::CleanPlace | TaskKind::HeatPlace | TaskKind::SlicePlace);
    if fixed_target && is_openable(rc) {
        return fail("target receptacle must stay open to view");
    }
    match task.kind {
        TaskKind::CleanPlace if class_name(rc) == "Sink" => fail("target is the sink"),
        TaskKind::SlicePlace => {
            let knife = class_index("Knife").expect("knife");
            if !is_sliceable(task.object) {
                fail("object cannot be sliced")
            } else if scene.count(knife) != 1 {
                fail("needs exactly one knife")
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

/// Surface forms per template; `{o}` and `{r}` are the object and
/// receptacle words.
pub const INSTRUCTION_TEMPLATES: [(TaskKind, [&str; 4]); 5] = [
    (
        TaskKind::PickPlace,
        [
            "put the {o} on the {r}",
            "place a {o} in the {r}",
            "move the {o} to the {r}",
            "take the {o} and leave it at the {r}",
        ],
    ),
    (
        TaskKind::PickTwo,
        [
            "put two {o} on the {r}",
            "place both {o} in the {r}",
            "move a pair of {o} to the {r}",
            "take two {o} and leave them at the {r}",
        ],
    ),
    (
        TaskKind::CleanPlace,
        [
            "put a clean {o} on the {r}",
            "rinse the {o} and place it in the {r}",
            "wash the {o} then move it to the {r}",
            "clean a {o} and leave it at the {r}",
        ],
    ),
    (
        TaskKind::HeatPlace,
        [
            "put a heated {o} on the {r}",
            "warm the {o} and place it in the {r}",
            "heat up the {o} then move it to the {r}",
            "cook a {o} and leave it at the {r}",
        ],
    ),
    (
        TaskKind::SlicePlace,
        [
            "put a sliced {o} on the {r}",
            "cut the {o} and place it in the {r}",
            "slice the {o} then move it to the {r}",
            "chop a {o} and leave it at the {r}",
        ],
    ),
];

fn lower(s: &str) -> String {
    s.to_lowercase()
}

pub fn instruction_for(task: &Task, variant: usize) -> String {
    let forms = INSTRUCTION_TEMPLATES
        .iter()
        .find(|(k, _)| *k == task.kind)
        .map(|(_, f)| f)
        .expect("every kind has templates");
    forms[variant % forms.len()]
        .replace("{o}", &lower(class_name(task.object)))
        .replace("{r}", &lower(class_name(receptacle_object(task.receptacle))))
}

/// Every word the generator can emit: template words, class names and the
/// history words of the actions.
pub fn corpus_token_vocab() -> TokenVocab {
    let mut words: Vec<String> = Vec::new();
    for (_, forms) in INSTRUCTION_TEMPLATES {
        for f in forms {
            words.push(f.replace("{o}", " ").replace("{r}", " "));
        }
    }
    for a in Action::ALL {
        words.push(a.history_word().into());
    }
    for c in PORTABLE_OBJECTS.iter().chain(RECEPTACLES.iter()) {
        words.push((*c).into());
    }
    TokenVocab::from_words(words)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    ValidSeen,
    ValidUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValidSeen, Split::ValidUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValidSeen => "valid_seen",
            Split::ValidUnseen => "valid_unseen",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Observation,
    pub subgoal: SubGoal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u32,
    pub instruction: String,
    pub scene_id: u32,
    pub split: Split,
    pub task: Task,
    pub agent_start: Cell,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn observations(&self) -> Vec<Observation> {
        self.steps.iter().map(|s| s.observation.clone()).collect()
    }

    pub fn subgoals(&self) -> Vec<SubGoal> {
        self.steps.iter().map(|s| s.subgoal).collect()
    }

    pub fn initial_state(&self, scene: &Scene) -> WorldState {
        let mut s = WorldState::new(scene);
        s.agent = self.agent_start;
        s
    }
}

/// Expands `task` in `scene`, starting the agent at a seeded reachable cell,
/// and records the frame seen before every expert sub-goal.
pub fn generate_episode(scene: &Scene, task: &Task, seed: u64) -> Result<Episode> {
    check_task(scene, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = WorldState::new(scene);
    let starts = state.reachable_cells();
    state.agent = starts[rng.gen_range(0..starts.len())];
    let agent_start = state.agent;
    let instruction = instruction_for(task, rng.gen_range(0..4));
    let mut steps = Vec::new();
    for g in expand_task(task) {
        let observation = state.render();
        if state.step(&g, Some(task)) != Outcome::Success {
            return Err(Error::Generation(format!(
                "scene {}: expert step {:?} failed for {}",
                scene.id,
                g,
                task.kind.name()
            )));
        }
        steps.push(Step { observation, subgoal: g });
    }
    Ok(Episode {
        id: 0,
        instruction,
        scene_id: scene.id,
        split: Split::Train,
        task: *task,
        agent_start,
        steps,
    })
}

/// Random task that fits `scene`, or `None` if nothing fits.
pub fn sample_task(scene: &Scene, rng: &mut ChaCha8Rng) -> Option<Task> {
    let mut options = Vec::new();
    for kind in TaskKind::ALL {
        for o in 1..=PORTABLE_OBJECTS.len() {
            for r in 1..=RECEPTACLES.len() {
                let t = Task {
                    kind,
                    object: o,
                    receptacle: r,
                };
                if check_task(scene, &t).is_ok() {
                    options.push(t);
                }
            }
        }
    }
    // Pick the template first so every feasible kind is equally likely.
    let kinds: Vec<TaskKind> = TaskKind::ALL
        .into_iter()
        .filter(|k| options.iter().any(|t| t.kind == *k))
        .collect();
    let kind = *kinds.choose(rng)?;
    let of_kind: Vec<&Task> = options.iter().filter(|t| t.kind == kind).collect();
    of_kind.choose(rng).map(|t| **t)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub scenes: usize,
    /// The last `unseen_scenes` scenes only appear in `valid_unseen`.
    pub unseen_scenes: usize,
    pub train_episodes: usize,
    pub valid_seen_episodes: usize,
    pub valid_unseen_episodes: usize,
    pub grid: usize,
    pub cell_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 24,
            unseen_scenes: 6,
            train_episodes: 450,
            valid_seen_episodes: 75,
            valid_unseen_episodes: 75,
            grid: 8,
            cell_size: 4,
            min_objects: 4,
            max_objects: 6,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unseen_scenes >= self.scenes {
            return Err(Error::Config("at least one seen scene is required".into()));
        }
        if self.valid_unseen_episodes > 0 && self.unseen_scenes == 0 {
            return Err(Error::Config("unseen episodes need unseen scenes".into()));
        }
        if self.min_objects > self.max_objects || self.max_objects < 2 {
            return Err(Error::Config("object count range is empty or too small".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.grid * self.cell_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub scenes: Vec<Scene>,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    pub fn scene(&self, id: u32) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    /// Split hygiene and per-episode consistency.
    pub fn validate(&self) -> Result<()> {
        let scenes_of = |s: Split| -> Vec<u32> {
            let mut v: Vec<u32> = self.split(s).map(|e| e.scene_id).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let train = scenes_of(Split::Train);
        if scenes_of(Split::ValidUnseen).iter().any(|s| train.contains(s)) {
            return Err(Error::Validation("an unseen scene appears in train".into()));
        }
        if scenes_of(Split::ValidSeen).iter().any(|s| !train.contains(s)) {
            return Err(Error::Validation("a valid_seen scene never appears in train".into()));
        }
        for e in &self.episodes {
            let scene = self
                .scene(e.scene_id)
                .ok_or_else(|| Error::Validation(format!("episode {} names unknown scene {}", e.id, e.scene_id)))?;
            check_task(scene, &e.task)?;
            if e.steps.last().map(|s| s.subgoal.action) != Some(Action::Stop) {
                return Err(Error::Validation(format!("episode {} does not end with Stop", e.id)));
            }
        }
        Ok(())
    }
}

/// Deterministic corpus: scenes, then train, valid_seen and valid_unseen
/// episodes, each from its own derived seed.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut scenes = Vec::with_capacity(config.scenes);
    for i in 0..config.scenes {
        let sc = SceneConfig {
            width: config.grid,
            height: config.grid,
            cell_size: config.cell_size,
            objects: rng.gen_range(config.min_objects..=config.max_objects),
            duplicate: rng.gen_bool(0.5),
        };
        scenes.push(generate_scene(i as u32, derive_seed(seed, 1 + i as u64), &sc)?);
    }
    let seen = config.scenes - config.unseen_scenes;
    let plan = [
        (Split::Train, config.train_episodes, 0..seen),
        (Split::ValidSeen, config.valid_seen_episodes, 0..seen),
        (Split::ValidUnseen, config.valid_unseen_episodes, seen..config.scenes),
    ];
    let mut episodes = Vec::new();
    let mut stream = 1_000_000u64;
    for (split, count, range) in plan {
        for k in 0..count {
            // Round-robin over the split's scenes keeps them balanced.
            let scene = &scenes[range.start + k % range.len()];
            let mut attempt = 0;
            loop {
                stream += 1;
                attempt += 1;
                let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
                let Some(task) = sample_task(scene, &mut trng) else {
                    return Err(Error::Generation(format!("scene {} fits no task", scene.id)));
                };
                match generate_episode(scene, &task, trng.gen()) {
                    Ok(mut e) => {
                        e.id = episodes.len() as u32;
                        e.split = split;
                        episodes.push(e);
                        break;
                    }
                    Err(err) if attempt >= 50 => return Err(err),
                    Err(_) => {}
                }
            }
        }
    }
    let corpus = Corpus {
        config: config.clone(),
        seed,
        scenes,
        episodes,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Which inputs a model sees. The instruction is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub use_rgb: bool,
    pub use_bbox: bool,
    pub use_rgb_history: bool,
    pub use_bbox_history: bool,
    pub use_subgoal_history: bool,
    pub use_instruction: bool,
}

impl ModalityMask {
    pub const ROWS: [&'static str; 4] = ["full", "no_vision", "no_history", "no_bbox"];

    pub fn full() -> Self {
        Self {
            use_rgb: true,
            use_bbox: true,
            use_rgb_history: true,
            use_bbox_history: true,
            use_subgoal_history: true,
            use_instruction: true,
        }
    }

    /// Sub-goal history and instruction only.
    pub fn no_vision() -> Self {
        Self {
            use_rgb: false,
            use_bbox: false,
            use_rgb_history: false,
            use_bbox_history: false,
            ..Self::full()
        }
    }

    /// Current frame and instruction only.
    pub fn no_history() -> Self {
        Self {
            use_rgb_history: false,
            use_bbox_history: false,
            use_subgoal_history: false,
            ..Self::full()
        }
    }

    /// Everything except the box masks.
    pub fn no_bbox() -> Self {
        Self {
            use_bbox: false,
            use_bbox_history: false,
            ..Self::full()
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "no_vision" => Ok(Self::no_vision()),
            "no_history" => Ok(Self::no_history()),
            "no_bbox" => Ok(Self::no_bbox()),
            other => Err(Error::Config(format!("unknown modality row {other}"))),
        }
    }

    pub fn flags(&self) -> [(&'static str, bool); 6] {
        [
            ("rgb", self.use_rgb),
            ("bbox", self.use_bbox),
            ("rgb_history", self.use_rgb_history),
            ("bbox_history", self.use_bbox_history),
            ("subgoal_history", self.use_subgoal_history),
            ("instruction", self.use_instruction),
        ]
    }
}

fn zeroed(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape().to_vec())
}

/// Replaces every disabled modality by zeros of the same shape.
pub fn apply_modality_mask(inputs: ModelInputs, mask: &ModalityMask) -> ModelInputs {
    let mut out = inputs;
    if !mask.use_rgb {
        out.current_rgb = zeroed(&out.current_rgb);
    }
    if !mask.use_bbox {
        out.current_bbox = zeroed(&out.current_bbox);
    }
    if !mask.use_rgb_history || !mask.use_bbox_history {
        let mut h = VisualHistory::new(out.history.window());
        for (o, b) in out.history.frames() {
            let o = if mask.use_rgb_history { o.clone() } else { zeroed(o) };
            let b = if mask.use_bbox_history { b.clone() } else { zeroed(b) };
            h.push(o, b);
        }
        out.history = h;
    }
    if !mask.use_subgoal_history {
        out.subgoals = zeroed(&out.subgoals);
        out.subgoal_valid.iter_mut().for_each(|v| *v = false);
    }
    if !mask.use_instruction {
        out.instruction = zeroed(&out.instruction);
    }
    out
}
