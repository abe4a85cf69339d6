//! Grid-world dynamics and the block renderer.
//!
//! A scene is a grid of cells. Receptacles and free-standing objects each
//! occupy one cell; the agent walks on the remaining cells. Objects can be
//! held, placed inside receptacles, sliced, heated (in a running microwave)
//! and cleaned (in a running sink). Every action checks its preconditions;
//! an illegal action leaves the state untouched and reports a failure.

use alloc::collections::VecDeque;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Scene;
use crate::encoders::{build_bbox_mask, BoundingBox, ClassMask, Observation, RgbImage};
use crate::error::{Error, Result};
use crate::heads::{Action, SubGoal, Vocabularies};

pub const PORTABLE_OBJECTS: [&str; 12] = [
    "Apple", "Bread", "Cup", "Egg", "Knife", "Lettuce", "Mug", "Pencil", "Plate", "Potato", "Tomato", "Book",
];
pub const RECEPTACLES: [&str; 8] = [
    "CounterTop",
    "Table",
    "SideTable",
    "Sink",
    "Microwave",
    "Fridge",
    "Cabinet",
    "Shelf",
];
const OPENABLE: [&str; 3] = ["Microwave", "Fridge", "Cabinet"];
const TOGGLEABLE: [&str; 2] = ["Microwave", "Sink"];
const SLICEABLE: [&str; 5] = ["Apple", "Bread", "Lettuce", "Potato", "Tomato"];

/// Object head classes are `None`, the portable objects, then the
/// receptacles (so navigation can target either); the receptacle head is
/// `empty` plus the receptacles. Object index = box-mask class id.
pub fn world_vocabularies() -> Vocabularies {
    let mut objects: Vec<&str> = PORTABLE_OBJECTS.to_vec();
    objects.extend_from_slice(&RECEPTACLES);
    Vocabularies::new(&objects, &RECEPTACLES).expect("static vocabularies are valid")
}

/// Object-vocabulary index of receptacle-vocabulary index `r` (`r ≥ 1`).
pub fn receptacle_object(r: usize) -> usize {
    PORTABLE_OBJECTS.len() + r
}

/// Receptacle-vocabulary index of an object class, if it is a receptacle.
pub fn object_receptacle(class: usize) -> Option<usize> {
    (class > PORTABLE_OBJECTS.len() && class <= PORTABLE_OBJECTS.len() + RECEPTACLES.len())
        .then(|| class - PORTABLE_OBJECTS.len())
}

pub fn class_name(class: usize) -> &'static str {
    match class {
        0 => "None",
        c if c <= PORTABLE_OBJECTS.len() => PORTABLE_OBJECTS[c - 1],
        c => RECEPTACLES.get(c - PORTABLE_OBJECTS.len() - 1).copied().unwrap_or("?"),
    }
}

pub fn class_index(name: &str) -> Option<usize> {
    (1..=PORTABLE_OBJECTS.len() + RECEPTACLES.len()).find(|&c| class_name(c) == name)
}

pub fn is_portable(class: usize) -> bool {
    (1..=PORTABLE_OBJECTS.len()).contains(&class)
}

pub fn is_openable(class: usize) -> bool {
    OPENABLE.contains(&class_name(class))
}

pub fn is_toggleable(class: usize) -> bool {
    TOGGLEABLE.contains(&class_name(class))
}

pub fn is_sliceable(class: usize) -> bool {
    SLICEABLE.contains(&class_name(class))
}

pub type Cell = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    PickPlace,
    PickTwo,
    CleanPlace,
    HeatPlace,
    SlicePlace,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::PickPlace,
        TaskKind::PickTwo,
        TaskKind::CleanPlace,
        TaskKind::HeatPlace,
        TaskKind::SlicePlace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "pick-place",
            TaskKind::PickTwo => "pick-two-place",
            TaskKind::CleanPlace => "clean-place",
            TaskKind::HeatPlace => "heat-place",
            TaskKind::SlicePlace => "slice-place",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(alloc::format!("unknown task template {s}")))
    }
}

/// A goal: a kind, an object class and a receptacle (receptacle-vocabulary
/// index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub object: usize,
    pub receptacle: usize,
}

impl Task {
    pub fn is_satisfied(&self, state: &WorldState) -> bool {
        let Some(container) = state.receptacle_item(self.receptacle) else {
            return false;
        };
        let done = state
            .items
            .iter()
            .filter(|it| it.class == self.object && it.location == Location::Inside(container))
            .filter(|it| match self.kind {
                TaskKind::PickPlace | TaskKind::PickTwo => true,
                TaskKind::CleanPlace => it.cleaned,
                TaskKind::HeatPlace => it.heated,
                TaskKind::SlicePlace => it.sliced,
            })
            .count();
        let need = if self.kind == TaskKind::PickTwo { 2 } else { 1 };
        done >= need
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Location {
    Floor(Cell),
    /// Inside the receptacle with this item index.
    Inside(usize),
    Held,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemState {
    pub class: usize,
    pub location: Location,
    pub open: bool,
    pub on: bool,
    pub sliced: bool,
    pub heated: bool,
    pub cleaned: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Facing {
    North,
    East,
    South,
    West,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Failed,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Success => "success",
            Outcome::Failed => "failed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorldState {
    pub scene: Scene,
    pub agent: Cell,
    pub facing: Facing,
    pub held: Option<usize>,
    pub items: Vec<ItemState>,
    pub steps: usize,
}

const FLOOR_DARK: [u8; 3] = [20, 20, 20];
const AGENT: [u8; 3] = [255, 0, 255];
const SWITCHED_ON: [u8; 3] = [255, 230, 0];
const SLICED: [u8; 3] = [255, 255, 255];
const HEATED: [u8; 3] = [255, 110, 0];
const CLEANED: [u8; 3] = [0, 220, 255];

fn adjacent(a: Cell, b: Cell) -> bool {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
}

impl WorldState {
    pub fn new(scene: &Scene) -> Self {
        let items = scene
            .items
            .iter()
            .map(|p| ItemState {
                class: p.class,
                location: Location::Floor(p.cell),
                open: false,
                on: false,
                sliced: false,
                heated: false,
                cleaned: false,
            })
            .collect();
        Self {
            scene: scene.clone(),
            agent: scene.agent_start,
            facing: Facing::North,
            held: None,
            items,
            steps: 0,
        }
    }

    /// Item index of the (single) receptacle of receptacle-vocabulary class `r`.
    pub fn receptacle_item(&self, r: usize) -> Option<usize> {
        if r == 0 {
            return None;
        }
        let class = receptacle_object(r);
        self.items.iter().position(|it| it.class == class)
    }

    /// Cell an item is at, or `None` while held.
    pub fn item_cell(&self, i: usize) -> Option<Cell> {
        match self.items[i].location {
            Location::Floor(c) => Some(c),
            Location::Inside(r) => self.item_cell(r),
            Location::Held => None,
        }
    }

    fn occupied(&self) -> Vec<bool> {
        let (w, h) = (self.scene.width, self.scene.height);
        let mut occ = vec![false; w * h];
        for it in &self.items {
            if let Location::Floor((x, y)) = it.location {
                occ[y * w + x] = true;
            }
        }
        occ
    }

    /// Breadth-first distances over walkable cells from the agent
    /// (`usize::MAX` where unreachable).
    fn distances(&self) -> Vec<usize> {
        let (w, h) = (self.scene.width, self.scene.height);
        let occ = self.occupied();
        let mut dist = vec![usize::MAX; w * h];
        let mut queue = VecDeque::new();
        dist[self.agent.1 * w + self.agent.0] = 0;
        queue.push_back(self.agent);
        while let Some((x, y)) = queue.pop_front() {
            let d = dist[y * w + x];
            for (nx, ny) in neighbours((x, y), w, h) {
                let j = ny * w + nx;
                if !occ[j] && dist[j] == usize::MAX {
                    dist[j] = d + 1;
                    queue.push_back((nx, ny));
                }
            }
        }
        dist
    }

    /// Closest walkable cell next to `target` and its distance.
    fn approach(&self, target: Cell, dist: &[usize]) -> Option<(usize, Cell)> {
        let w = self.scene.width;
        neighbours(target, w, self.scene.height)
            .filter(|&(x, y)| dist[y * w + x] != usize::MAX)
            .map(|(x, y)| (dist[y * w + x], (x, y)))
            .min_by_key(|&(d, (x, y))| (d, y, x))
    }

    /// Free floor cells reachable from the agent, in breadth-first order.
    pub fn reachable_cells(&self) -> Vec<Cell> {
        let w = self.scene.width;
        let dist = self.distances();
        let mut cells: Vec<(usize, Cell)> = (0..dist.len())
            .filter(|&j| dist[j] != usize::MAX)
            .map(|j| (dist[j], (j % w, j / w)))
            .collect();
        cells.sort_by_key(|&(d, (x, y))| (d, y, x));
        cells.into_iter().map(|(_, c)| c).collect()
    }

    /// Whether a contained item can be reached (its receptacle is not a
    /// closed door).
    fn accessible(&self, i: usize) -> bool {
        match self.items[i].location {
            Location::Floor(_) => true,
            Location::Inside(r) => !is_openable(self.items[r].class) || self.items[r].open,
            Location::Held => false,
        }
    }

    /// Instance of `class` next to the agent that can be handled, preferring
    /// free-standing ones.
    fn reachable_instance(&self, class: usize) -> Option<usize> {
        let mut best: Option<(bool, usize)> = None;
        for (i, it) in self.items.iter().enumerate() {
            if it.class != class || !self.accessible(i) {
                continue;
            }
            let Some(cell) = self.item_cell(i) else { continue };
            if !adjacent(self.agent, cell) {
                continue;
            }
            let key = (matches!(it.location, Location::Inside(_)), i);
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
        best.map(|(_, i)| i)
    }

    /// Target cell a `Navigate` to `class` would walk next to.
    pub fn navigation_target(&self, class: usize) -> Option<(usize, Cell)> {
        let dist = self.distances();
        let mut best: Option<((bool, usize, usize), Cell)> = None;
        for (i, it) in self.items.iter().enumerate() {
            if it.class != class {
                continue;
            }
            let Some(cell) = self.item_cell(i) else { continue };
            let (d, stand) = if adjacent(self.agent, cell) {
                (0, self.agent)
            } else {
                match self.approach(cell, &dist) {
                    Some(a) => a,
                    None => continue,
                }
            };
            let key = (matches!(it.location, Location::Inside(_)), d, i);
            if best.map_or(true, |b| key < b.0) {
                best = Some((key, stand));
            }
        }
        best.map(|(k, stand)| (k.2, stand))
    }

    /// Applies one sub-goal. Illegal sub-goals fail without changing
    /// anything except the step counter.
    pub fn step(&mut self, g: &SubGoal, task: Option<&Task>) -> Outcome {
        self.steps += 1;
        let ok = match g.action {
            Action::Navigate => self.navigate(g.object),
            Action::PickUp => self.pick_up(g.object),
            Action::Put => self.put(g.object, g.receptacle),
            Action::Open => self.set_open(g.object, true),
            Action::Close => self.set_open(g.object, false),
            Action::ToggleOn => self.toggle(g.object, true),
            Action::ToggleOff => self.toggle(g.object, false),
            Action::Slice => self.slice(g.object),
            Action::Stop => task.map_or(false, |t| t.is_satisfied(self)),
        };
        if ok {
            Outcome::Success
        } else {
            Outcome::Failed
        }
    }

    fn navigate(&mut self, class: usize) -> bool {
        if class == 0 {
            return false;
        }
        let Some((i, stand)) = self.navigation_target(class) else {
            return false;
        };
        let cell = self.item_cell(i).expect("navigation target is on the grid");
        self.agent = stand;
        self.facing = facing_towards(stand, cell);
        true
    }

    fn pick_up(&mut self, class: usize) -> bool {
        if self.held.is_some() || !is_portable(class) {
            return false;
        }
        let Some(i) = self.reachable_instance(class) else {
            return false;
        };
        self.items[i].location = Location::Held;
        self.held = Some(i);
        true
    }

    fn put(&mut self, class: usize, receptacle: usize) -> bool {
        let Some(h) = self.held else { return false };
        if self.items[h].class != class {
            return false;
        }
        let Some(r) = self.receptacle_item(receptacle) else {
            return false;
        };
        let Some(cell) = self.item_cell(r) else { return false };
        if !adjacent(self.agent, cell) || (is_openable(self.items[r].class) && !self.items[r].open) {
            return false;
        }
        self.items[h].location = Location::Inside(r);
        self.held = None;
        true
    }

    fn adjacent_receptacle(&self, class: usize) -> Option<usize> {
        object_receptacle(class)?;
        let i = self.items.iter().position(|it| it.class == class)?;
        adjacent(self.agent, self.item_cell(i)?).then_some(i)
    }

    fn set_open(&mut self, class: usize, open: bool) -> bool {
        let Some(i) = self.adjacent_receptacle(class) else {
            return false;
        };
        let it = &mut self.items[i];
        if !is_openable(it.class) || it.open == open || it.on {
            return false;
        }
        it.open = open;
        true
    }

    fn toggle(&mut self, class: usize, on: bool) -> bool {
        let Some(i) = self.adjacent_receptacle(class) else {
            return false;
        };
        let it = self.items[i];
        if !is_toggleable(it.class) || it.on == on || (is_openable(it.class) && it.open) {
            return false;
        }
        self.items[i].on = on;
        if on {
            let heats = class_name(it.class) == "Microwave";
            for other in self.items.iter_mut() {
                if other.location == Location::Inside(i) {
                    if heats {
                        other.heated = true;
                    } else {
                        other.cleaned = true;
                    }
                }
            }
        }
        true
    }

    fn slice(&mut self, class: usize) -> bool {
        let Some(h) = self.held else { return false };
        if class_name(self.items[h].class) != "Knife" || !is_sliceable(class) {
            return false;
        }
        let Some(i) = self.reachable_instance(class) else {
            return false;
        };
        if self.items[i].sliced {
            return false;
        }
        self.items[i].sliced = true;
        true
    }

    /// Moves the agent to a reachable cell that is not next to `avoid`,
    /// chosen by `pick` from the candidates in breadth-first order.
    pub fn teleport_away(&mut self, avoid: Cell, pick: impl FnOnce(usize) -> usize) -> bool {
        let options: Vec<Cell> = self
            .reachable_cells()
            .into_iter()
            .filter(|&c| c != self.agent && !adjacent(c, avoid))
            .collect();
        if options.is_empty() {
            return false;
        }
        let c = options[pick(options.len()) % options.len()];
        self.facing = facing_towards(self.agent, c);
        self.agent = c;
        true
    }

    /// Drops the held object on the closest free cell to the agent.
    pub fn drop_held(&mut self) -> bool {
        let Some(h) = self.held else { return false };
        let Some(&cell) = self.reachable_cells().iter().find(|&&c| c != self.agent) else {
            return false;
        };
        self.items[h].location = Location::Floor(cell);
        self.held = None;
        true
    }

    pub fn held_class(&self) -> Option<usize> {
        self.held.map(|h| self.items[h].class)
    }

    /// Draws the state and returns the observation with the boxes it used.
    pub fn render_with_boxes(&self) -> (Observation, Vec<BoundingBox>) {
        let s = &self.scene;
        let cs = s.cell_size;
        let (hpx, wpx) = (s.height * cs, s.width * cs);
        let mut rgb = RgbImage::new(hpx, wpx);
        for y in 0..hpx {
            for x in 0..wpx {
                rgb.set_pixel(y, x, s.floor);
            }
        }
        let inner = cs / 4..cs - cs / 4;
        let mut boxes = Vec::new();
        let full_box = |class: usize, (cx, cy): Cell| BoundingBox {
            class_id: class as u8,
            x0: cx * cs,
            y0: cy * cs,
            x1: cx * cs + cs - 1,
            y1: cy * cs + cs - 1,
        };
        let inner_box = |class: usize, (cx, cy): Cell| BoundingBox {
            class_id: class as u8,
            x0: cx * cs + inner.start,
            y0: cy * cs + inner.start,
            x1: cx * cs + inner.end - 1,
            y1: cy * cs + inner.end - 1,
        };
        let paint = |rgb: &mut RgbImage, b: &BoundingBox, color: [u8; 3]| {
            for y in b.y0..=b.y1 {
                for x in b.x0..=b.x1 {
                    rgb.set_pixel(y, x, color);
                }
            }
        };

        let receptacles = self.items.iter().enumerate().filter(|(_, it)| object_receptacle(it.class).is_some());
        for (_, it) in receptacles {
            let Location::Floor(cell) = it.location else { continue };
            let b = full_box(it.class, cell);
            paint(&mut rgb, &b, s.palette[it.class]);
            if it.open {
                paint(&mut rgb, &inner_box(0, cell), FLOOR_DARK);
            }
            if it.on {
                for x in b.x0..=b.x1 {
                    rgb.set_pixel(b.y0, x, SWITCHED_ON);
                }
            }
            boxes.push(b);
        }
        for (i, it) in self.items.iter().enumerate() {
            if let Location::Inside(r) = it.location {
                if !self.accessible(i) {
                    continue;
                }
                let Some(cell) = self.item_cell(r) else { continue };
                let b = inner_box(it.class, cell);
                paint(&mut rgb, &b, s.palette[it.class]);
                boxes.push(b);
            }
        }
        for it in &self.items {
            if object_receptacle(it.class).is_some() {
                continue;
            }
            let Location::Floor(cell) = it.location else { continue };
            let b = full_box(it.class, cell);
            paint(&mut rgb, &b, s.palette[it.class]);
            if it.sliced {
                paint(&mut rgb, &inner_box(0, cell), SLICED);
            }
            if it.heated {
                rgb.set_pixel(b.y0, b.x0, HEATED);
            }
            if it.cleaned {
                rgb.set_pixel(b.y0, b.x1, CLEANED);
            }
            boxes.push(b);
        }
        paint(&mut rgb, &full_box(0, self.agent), AGENT);
        if let Some(h) = self.held {
            let b = inner_box(self.items[h].class, self.agent);
            paint(&mut rgb, &b, s.palette[self.items[h].class]);
            boxes.push(b);
        }
        let bbox_mask = build_bbox_mask(&boxes, hpx, wpx).unwrap_or_else(|_| ClassMask::new(hpx, wpx));
        (Observation { rgb, bbox_mask }, boxes)
    }

    pub fn render(&self) -> Observation {
        self.render_with_boxes().0
    }

    /// One line per item, for logs.
    pub fn describe(&self) -> String {
        let mut out = alloc::format!("agent {:?} facing {:?}", self.agent, self.facing);
        for it in &self.items {
            out.push_str(&alloc::format!("\n{} {:?}", class_name(it.class), it.location));
        }
        out.to_string()
    }
}

fn neighbours((x, y): Cell, w: usize, h: usize) -> impl Iterator<Item = Cell> {
    let mut out = [(usize::MAX, usize::MAX); 4];
    if y > 0 {
        out[0] = (x, y - 1);
    }
    if x + 1 < w {
        out[1] = (x + 1, y);
    }
    if y + 1 < h {
        out[2] = (x, y + 1);
    }
    if x > 0 {
        out[3] = (x - 1, y);
    }
    out.into_iter().filter(|c| c.0 != usize::MAX)
}

fn facing_towards(from: Cell, to: Cell) -> Facing {
    if to.1 < from.1 {
        Facing::North
    } else if to.1 > from.1 {
        Facing::South
    } else if to.0 > from.0 {
        Facing::East
    } else {
        Facing::West
    }
}
