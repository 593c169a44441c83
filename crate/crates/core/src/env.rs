//! Gridworld RTS harvest environment.
//!
//! Player 1 controls the units in the top-left corner and is rewarded +1 each
//! time a worker finishes harvesting and +1 each time it returns the resource
//! to a base. Player 2 sits in the bottom-left corner and never acts.
//!
//! Actions are durative: issuing one makes the unit busy until it resolves.
//! Every agent step advances the engine `1 + frame_skip` ticks, so with the
//! default frame skip of 9 a 10-tick move/harvest/return completes before the
//! next observation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskdist::{head_sizes, ValidityMask, NUM_HEADS};
use crate::numerics::Tensor;

/// Feature planes per cell: hp 5, resources 5, owner 3, unit type 8, action 6.
pub const NUM_PLANES: usize = 27;
pub const SUPPORTED_MAP_SIZES: [usize; 4] = [4, 10, 16, 24];

const HP_OFFSET: usize = 0;
const RES_OFFSET: usize = 5;
const OWNER_OFFSET: usize = 10;
const TYPE_OFFSET: usize = 13;
const ACTION_OFFSET: usize = 21;

const MOVE_TICKS: u32 = 10;
const HARVEST_TICKS: u32 = 10;
const RETURN_TICKS: u32 = 10;
const ATTACK_TICKS: u32 = 10;
const ATTACK_DAMAGE: u32 = 1;
const ATTACK_RANGE: usize = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("unsupported map size {0} (expected one of 4, 10, 16, 24)")]
    UnsupportedMapSize(usize),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("action component {component} = {value} out of range")]
    ComponentOutOfRange { component: &'static str, value: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Resource,
    Base,
    Barrack,
    Worker,
    Light,
    Heavy,
    Ranged,
}

/// Static properties of a unit kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitType {
    pub kind: UnitKind,
    pub max_hp: u32,
    pub cost: u32,
    pub production_time: u32,
}

impl UnitKind {
    /// Same order as the unit-type planes (after "none") and the produce-type component.
    pub const ALL: [UnitKind; 7] = [
        UnitKind::Resource,
        UnitKind::Base,
        UnitKind::Barrack,
        UnitKind::Worker,
        UnitKind::Light,
        UnitKind::Heavy,
        UnitKind::Ranged,
    ];

    pub fn unit_type(self) -> UnitType {
        let (max_hp, cost, production_time) = match self {
            UnitKind::Resource => (1, 0, 0),
            UnitKind::Base => (4, 10, 20),
            UnitKind::Barrack => (4, 5, 20),
            UnitKind::Worker => (1, 1, 20),
            UnitKind::Light => (1, 2, 20),
            UnitKind::Heavy => (4, 3, 20),
            UnitKind::Ranged => (4, 2, 20),
        };
        UnitType {
            kind: self,
            max_hp,
            cost,
            production_time,
        }
    }

    fn type_plane(self) -> usize {
        1 + UnitKind::ALL.iter().position(|&k| k == self).expect("listed")
    }

    pub fn is_mobile(self) -> bool {
        matches!(self, UnitKind::Worker | UnitKind::Light | UnitKind::Heavy | UnitKind::Ranged)
    }

    fn can_produce(self, product: UnitKind) -> bool {
        match self {
            UnitKind::Base => product == UnitKind::Worker,
            UnitKind::Barrack => matches!(product, UnitKind::Light | UnitKind::Heavy | UnitKind::Ranged),
            UnitKind::Worker => matches!(product, UnitKind::Base | UnitKind::Barrack),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Player1,
    Player2,
    Neutral,
}

impl Owner {
    fn plane(self) -> usize {
        match self {
            Owner::Player1 => 0,
            Owner::Neutral => 1,
            Owner::Player2 => 2,
        }
    }

    fn opponent(self) -> Option<Owner> {
        match self {
            Owner::Player1 => Some(Owner::Player2),
            Owner::Player2 => Some(Owner::Player1),
            Owner::Neutral => None,
        }
    }

    fn stockpile_index(self) -> Option<usize> {
        match self {
            Owner::Player1 => Some(0),
            Owner::Player2 => Some(1),
            Owner::Neutral => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Noop,
    Move,
    Harvest,
    Return,
    Produce,
    Attack,
}

impl ActionType {
    pub const ALL: [ActionType; 6] = [
        ActionType::Noop,
        ActionType::Move,
        ActionType::Harvest,
        ActionType::Return,
        ActionType::Produce,
        ActionType::Attack,
    ];

    pub fn index(self) -> usize {
        ActionType::ALL.iter().position(|&a| a == self).expect("listed")
    }
}

/// North, east, south, west.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::North, Direction::East, Direction::South, Direction::West];

    pub fn index(self) -> usize {
        Direction::ALL.iter().position(|&d| d == self).expect("listed")
    }
}

/// A durative action in progress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingAction {
    pub action: ActionType,
    /// Cell the action applies to.
    pub target: usize,
    pub produce: Option<UnitKind>,
    pub ticks_remaining: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitState {
    pub id: u32,
    pub kind: UnitKind,
    pub owner: Owner,
    pub hp: u32,
    /// Resources held by a worker, or the remaining stock of a mine.
    pub carried: u32,
    pub pos: (usize, usize),
    pub pending: Option<PendingAction>,
}

impl UnitState {
    pub fn is_busy(&self) -> bool {
        self.pending.is_some()
    }
}

/// Full environment state. At most one unit per cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    pub height: usize,
    pub width: usize,
    pub tick: u64,
    pub agent_step: u64,
    pub cells: Vec<Option<UnitState>>,
    pub stockpiles: [u32; 2],
    pub next_id: u32,
}

impl GameState {
    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn unit_at(&self, cell: usize) -> Option<&UnitState> {
        self.cells.get(cell).and_then(Option::as_ref)
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitState> {
        self.cells.iter().flatten()
    }

    fn neighbor(&self, pos: (usize, usize), dir: Direction) -> Option<usize> {
        let (r, c) = pos;
        let (nr, nc) = match dir {
            Direction::North => (r.checked_sub(1)?, c),
            Direction::East => (r, c + 1),
            Direction::South => (r + 1, c),
            Direction::West => (r, c.checked_sub(1)?),
        };
        (nr < self.height && nc < self.width).then(|| self.cell_index(nr, nc))
    }

    fn position(&self, cell: usize) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }

    /// Stock left in all mines on the map.
    pub fn remaining_resources(&self) -> u32 {
        self.units()
            .filter(|u| u.kind == UnitKind::Resource)
            .map(|u| u.carried)
            .sum()
    }

    fn has_selectable_unit(&self, player: Owner) -> bool {
        self.units().any(|u| u.owner == player && !u.is_busy())
    }

    fn find_unit(&self, id: u32) -> Option<usize> {
        self.cells.iter().position(|c| c.as_ref().is_some_and(|u| u.id == id))
    }
}

/// The 8 action components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositeAction {
    pub source_unit: usize,
    pub action_type: usize,
    pub move_dir: usize,
    pub harvest_dir: usize,
    pub return_dir: usize,
    pub produce_dir: usize,
    pub produce_type: usize,
    pub attack_target: usize,
}

impl CompositeAction {
    pub fn from_components(c: [usize; NUM_HEADS]) -> Self {
        Self {
            source_unit: c[0],
            action_type: c[1],
            move_dir: c[2],
            harvest_dir: c[3],
            return_dir: c[4],
            produce_dir: c[5],
            produce_type: c[6],
            attack_target: c[7],
        }
    }

    pub fn components(&self) -> [usize; NUM_HEADS] {
        [
            self.source_unit,
            self.action_type,
            self.move_dir,
            self.harvest_dir,
            self.return_dir,
            self.produce_dir,
            self.produce_type,
            self.attack_target,
        ]
    }

    /// Rejects components outside their ranges for an `h×w` map.
    pub fn check_ranges(&self, height: usize, width: usize) -> Result<(), EnvError> {
        const NAMES: [&str; NUM_HEADS] = [
            "source_unit",
            "action_type",
            "move_dir",
            "harvest_dir",
            "return_dir",
            "produce_dir",
            "produce_type",
            "attack_target",
        ];
        for ((value, size), component) in self.components().into_iter().zip(head_sizes(height, width)).zip(NAMES) {
            if value >= size {
                return Err(EnvError::ComponentOutOfRange { component, value });
            }
        }
        Ok(())
    }

    /// Convenience constructor for scripted play.
    pub fn new(source_unit: usize, action: ActionType) -> Self {
        Self {
            source_unit,
            action_type: action.index(),
            ..Self::default()
        }
    }

    pub fn with_move(mut self, d: Direction) -> Self {
        self.move_dir = d.index();
        self
    }

    pub fn with_harvest(mut self, d: Direction) -> Self {
        self.harvest_dir = d.index();
        self
    }

    pub fn with_return(mut self, d: Direction) -> Self {
        self.return_dir = d.index();
        self
    }

    pub fn with_produce(mut self, d: Direction, kind: UnitKind) -> Self {
        self.produce_dir = d.index();
        self.produce_type = UnitKind::ALL.iter().position(|&k| k == kind).expect("listed");
        self
    }

    pub fn with_attack(mut self, target: usize) -> Self {
        self.attack_target = target;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidClass {
    Valid,
    NullSource,
    BusySource,
    WrongOwner,
    BadParameter,
}

impl InvalidClass {
    pub fn is_valid(self) -> bool {
        self == InvalidClass::Valid
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Tensor<f32>,
    pub masks: ValidityMask,
    /// Environment reward before any strategy shaping.
    pub reward: f32,
    pub done: bool,
    pub invalid_class: InvalidClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPlacement {
    pub kind: UnitKind,
    pub owner: Owner,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub map_size: usize,
    pub max_agent_steps: u64,
    pub frame_skip: u32,
    pub resources_per_mine: u32,
    /// Initial units; `None` selects the standard layout for `map_size`.
    pub layout: Option<Vec<UnitPlacement>>,
}

impl EnvConfig {
    pub fn new(map_size: usize) -> Self {
        Self {
            map_size,
            max_agent_steps: 200,
            frame_skip: 9,
            resources_per_mine: 20,
            layout: None,
        }
    }

    /// Player 1 top-left, player 2 bottom-left; each worker touches its mine
    /// and its base.
    pub fn standard_layout(&self) -> Vec<UnitPlacement> {
        let n = self.map_size;
        let p = |kind, owner, row, col| UnitPlacement { kind, owner, row, col };
        vec![
            p(UnitKind::Resource, Owner::Neutral, 0, 0),
            p(UnitKind::Worker, Owner::Player1, 0, 1),
            p(UnitKind::Base, Owner::Player1, 1, 1),
            p(UnitKind::Resource, Owner::Neutral, n - 1, 0),
            p(UnitKind::Worker, Owner::Player2, n - 1, 1),
            p(UnitKind::Base, Owner::Player2, n - 2, 1),
        ]
    }

    pub fn placements(&self) -> Vec<UnitPlacement> {
        self.layout.clone().unwrap_or_else(|| self.standard_layout())
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !SUPPORTED_MAP_SIZES.contains(&self.map_size) {
            return Err(EnvError::UnsupportedMapSize(self.map_size));
        }
        let n = self.map_size;
        let units = self.placements();
        let mut seen = vec![false; n * n];
        for u in &units {
            if u.row >= n || u.col >= n {
                return Err(EnvError::InvalidLayout(format!("{:?} at ({}, {}) is off the map", u.kind, u.row, u.col)));
            }
            let cell = u.row * n + u.col;
            if std::mem::replace(&mut seen[cell], true) {
                return Err(EnvError::InvalidLayout(format!("two units share ({}, {})", u.row, u.col)));
            }
            if (u.kind == UnitKind::Resource) != (u.owner == Owner::Neutral) {
                return Err(EnvError::InvalidLayout("only resources are neutral".into()));
            }
        }
        for player in [Owner::Player1, Owner::Player2] {
            for kind in [UnitKind::Base, UnitKind::Worker] {
                let count = units.iter().filter(|u| u.owner == player && u.kind == kind).count();
                if count != 1 {
                    return Err(EnvError::InvalidLayout(format!("{player:?} needs exactly one {kind:?}, has {count}")));
                }
            }
            let worker = units
                .iter()
                .find(|u| u.owner == player && u.kind == UnitKind::Worker)
                .expect("checked above");
            let near_mine = units
                .iter()
                .any(|m| m.kind == UnitKind::Resource && m.row.abs_diff(worker.row) + m.col.abs_diff(worker.col) == 1);
            if !near_mine {
                return Err(EnvError::InvalidLayout(format!("{player:?} worker is not next to a mine")));
            }
        }
        Ok(())
    }
}

/// Builds the initial state for `config`.
pub fn reset(config: &EnvConfig) -> Result<(GameState, Tensor<f32>, ValidityMask), EnvError> {
    config.validate()?;
    let n = config.map_size;
    let mut state = GameState {
        height: n,
        width: n,
        tick: 0,
        agent_step: 0,
        cells: vec![None; n * n],
        stockpiles: [0, 0],
        next_id: 0,
    };
    for p in config.placements() {
        let cell = state.cell_index(p.row, p.col);
        let carried = if p.kind == UnitKind::Resource {
            config.resources_per_mine
        } else {
            0
        };
        state.cells[cell] = Some(UnitState {
            id: state.next_id,
            kind: p.kind,
            owner: p.owner,
            hp: p.kind.unit_type().max_hp,
            carried,
            pos: (p.row, p.col),
            pending: None,
        });
        state.next_id += 1;
    }
    let obs = encode_observation(&state);
    let masks = compute_masks(&state, Owner::Player1);
    Ok((state, obs, masks))
}

/// One-hot feature planes, `[h, w, 27]`.
pub fn encode_observation(state: &GameState) -> Tensor<f32> {
    let mut values = vec![0.0f32; state.cell_count() * NUM_PLANES];
    encode_observation_into(state, &mut values);
    Tensor::new(vec![state.height, state.width, NUM_PLANES], values).expect("sized by construction")
}

pub fn encode_observation_into(state: &GameState, out: &mut [f32]) {
    assert_eq!(out.len(), state.cell_count() * NUM_PLANES);
    for (cell, planes) in state.cells.iter().zip(out.chunks_exact_mut(NUM_PLANES)) {
        planes.fill(0.0);
        match cell {
            None => {
                planes[HP_OFFSET] = 1.0;
                planes[RES_OFFSET] = 1.0;
                planes[OWNER_OFFSET + 1] = 1.0;
                planes[TYPE_OFFSET] = 1.0;
                planes[ACTION_OFFSET] = 1.0;
            }
            Some(u) => {
                planes[HP_OFFSET + (u.hp.min(4) as usize)] = 1.0;
                planes[RES_OFFSET + (u.carried.min(4) as usize)] = 1.0;
                planes[OWNER_OFFSET + u.owner.plane()] = 1.0;
                planes[TYPE_OFFSET + u.kind.type_plane()] = 1.0;
                let action = u.pending.map_or(0, |p| p.action.index());
                planes[ACTION_OFFSET + action] = 1.0;
            }
        }
    }
}

/// Source-unit and attack-target masks for `player`; the other heads are
/// all valid. A head with nothing selectable falls back to index 0 alone.
pub fn compute_masks(state: &GameState, player: Owner) -> ValidityMask {
    let sizes = head_sizes(state.height, state.width);
    let mut source: Vec<bool> = state
        .cells
        .iter()
        .map(|c| c.as_ref().is_some_and(|u| u.owner == player && !u.is_busy()))
        .collect();
    let enemy = player.opponent();
    let mut target: Vec<bool> = state
        .cells
        .iter()
        .map(|c| c.as_ref().is_some_and(|u| Some(u.owner) == enemy))
        .collect();
    for head in [&mut source, &mut target] {
        if !head.iter().any(|&v| v) {
            head[0] = true;
        }
    }
    let mut heads = Vec::with_capacity(NUM_HEADS);
    heads.push(source);
    for &n in &sizes[1..NUM_HEADS - 1] {
        heads.push(vec![true; n]);
    }
    heads.push(target);
    ValidityMask::new(heads).expect("every head keeps an entry")
}

/// Classifies `action` for `player`, checking in order: empty source cell,
/// busy source, foreign source, inapplicable parameters.
///
/// When the player has no selectable unit at all, every action is a forced
/// no-op and counts as valid.
pub fn classify_action(state: &GameState, action: &CompositeAction, player: Owner) -> InvalidClass {
    if !state.has_selectable_unit(player) {
        return InvalidClass::Valid;
    }
    let Some(unit) = state.unit_at(action.source_unit) else {
        return InvalidClass::NullSource;
    };
    if unit.is_busy() {
        return InvalidClass::BusySource;
    }
    if unit.owner != player {
        return InvalidClass::WrongOwner;
    }
    if action.action_type == ActionType::Noop.index() || plan_action(state, unit, action).is_some() {
        InvalidClass::Valid
    } else {
        InvalidClass::BadParameter
    }
}

/// The pending action `action` would start for `unit`, if applicable.
fn plan_action(state: &GameState, unit: &UnitState, action: &CompositeAction) -> Option<PendingAction> {
    let kind = *ActionType::ALL.get(action.action_type)?;
    let dir = |i: usize| Direction::ALL.get(i).copied();
    let empty = |cell: usize| state.unit_at(cell).is_none();
    let pending = |action, target, produce, ticks| {
        Some(PendingAction {
            action,
            target,
            produce,
            ticks_remaining: ticks,
        })
    };
    match kind {
        ActionType::Noop => None,
        ActionType::Move => {
            let target = state.neighbor(unit.pos, dir(action.move_dir)?)?;
            (unit.kind.is_mobile() && empty(target)).then_some(())?;
            pending(kind, target, None, MOVE_TICKS)
        }
        ActionType::Harvest => {
            let target = state.neighbor(unit.pos, dir(action.harvest_dir)?)?;
            let mine = state.unit_at(target)?;
            (unit.kind == UnitKind::Worker && unit.carried == 0 && mine.kind == UnitKind::Resource && mine.carried > 0)
                .then_some(())?;
            pending(kind, target, None, HARVEST_TICKS)
        }
        ActionType::Return => {
            let target = state.neighbor(unit.pos, dir(action.return_dir)?)?;
            let base = state.unit_at(target)?;
            (unit.kind == UnitKind::Worker && unit.carried > 0 && base.kind == UnitKind::Base && base.owner == unit.owner)
                .then_some(())?;
            pending(kind, target, None, RETURN_TICKS)
        }
        ActionType::Produce => {
            let target = state.neighbor(unit.pos, dir(action.produce_dir)?)?;
            let product = *UnitKind::ALL.get(action.produce_type)?;
            let stock = state.stockpiles[unit.owner.stockpile_index()?];
            let ut = product.unit_type();
            (empty(target) && unit.kind.can_produce(product) && stock >= ut.cost).then_some(())?;
            pending(kind, target, Some(product), ut.production_time)
        }
        ActionType::Attack => {
            let target = action.attack_target;
            let victim = state.unit_at(target)?;
            let (tr, tc) = state.position(target);
            let dist = tr.abs_diff(unit.pos.0) + tc.abs_diff(unit.pos.1);
            (unit.kind.is_mobile() && Some(victim.owner) == unit.owner.opponent() && dist <= ATTACK_RANGE)
                .then_some(())?;
            pending(kind, target, None, ATTACK_TICKS)
        }
    }
}

/// A single environment instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    config: EnvConfig,
    state: GameState,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        let (state, _, _) = reset(&config)?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &GameState {
        &self.state
    }

    /// Replaces the state, e.g. when restoring a checkpoint.
    pub fn set_state(&mut self, state: GameState) {
        self.state = state;
    }

    pub fn reset(&mut self) -> (Tensor<f32>, ValidityMask) {
        let (state, obs, masks) = reset(&self.config).expect("config validated at construction");
        self.state = state;
        (obs, masks)
    }

    pub fn observation(&self) -> Tensor<f32> {
        encode_observation(&self.state)
    }

    pub fn masks(&self) -> ValidityMask {
        compute_masks(&self.state, Owner::Player1)
    }

    pub fn is_done(&self) -> bool {
        self.state.agent_step >= self.config.max_agent_steps || self.state.remaining_resources() == 0
    }

    /// Applies a player-1 action and advances `1 + frame_skip` ticks.
    /// Invalid actions are no-ops; panics if a component is out of range.
    pub fn step(&mut self, action: &CompositeAction) -> StepResult {
        action
            .check_ranges(self.state.height, self.state.width)
            .expect("action components in range");
        let invalid_class = classify_action(&self.state, action, Owner::Player1);
        if invalid_class.is_valid() {
            self.issue(action);
        }
        let mut reward = 0.0f32;
        for _ in 0..=self.config.frame_skip {
            reward += self.advance_tick();
        }
        self.state.agent_step += 1;
        StepResult {
            observation: self.observation(),
            masks: self.masks(),
            reward,
            done: self.is_done(),
            invalid_class,
        }
    }

    fn issue(&mut self, action: &CompositeAction) {
        let Some(unit) = self.state.unit_at(action.source_unit) else {
            return;
        };
        let Some(plan) = plan_action(&self.state, unit, action) else {
            return;
        };
        if let (Some(product), Some(idx)) = (plan.produce, unit.owner.stockpile_index()) {
            self.state.stockpiles[idx] -= product.unit_type().cost;
        }
        if let Some(u) = self.state.cells[action.source_unit].as_mut() {
            u.pending = Some(plan);
        }
    }

    /// One engine tick; returns player-1 reward earned during it.
    fn advance_tick(&mut self) -> f32 {
        self.state.tick += 1;
        let mut busy: Vec<u32> = self.state.units().filter(|u| u.is_busy()).map(|u| u.id).collect();
        busy.sort_unstable();
        let mut reward = 0.0;
        for id in busy {
            let Some(cell) = self.state.find_unit(id) else {
                continue;
            };
            let unit = self.state.cells[cell].as_mut().expect("found above");
            let Some(p) = unit.pending.as_mut() else {
                continue;
            };
            p.ticks_remaining = p.ticks_remaining.saturating_sub(1);
            if p.ticks_remaining == 0 {
                let done = *p;
                unit.pending = None;
                reward += self.resolve(cell, done);
            }
        }
        reward
    }

    fn resolve(&mut self, cell: usize, action: PendingAction) -> f32 {
        let st = &mut self.state;
        let target = action.target;
        let owner = st.cells[cell].as_ref().map(|u| u.owner).expect("actor present");
        let gain = if owner == Owner::Player1 { 1.0 } else { 0.0 };
        match action.action {
            ActionType::Noop => 0.0,
            ActionType::Move => {
                if st.cells[target].is_none() {
                    let mut u = st.cells[cell].take().expect("actor present");
                    u.pos = (target / st.width, target % st.width);
                    st.cells[target] = Some(u);
                }
                0.0
            }
            ActionType::Harvest => {
                let ok = st.cells[target]
                    .as_ref()
                    .is_some_and(|m| m.kind == UnitKind::Resource && m.carried > 0)
                    && st.cells[cell].as_ref().is_some_and(|w| w.carried == 0);
                if !ok {
                    return 0.0;
                }
                let mine = st.cells[target].as_mut().expect("checked");
                mine.carried -= 1;
                if mine.carried == 0 {
                    st.cells[target] = None;
                }
                st.cells[cell].as_mut().expect("actor present").carried = 1;
                gain
            }
            ActionType::Return => {
                let ok = st.cells[target]
                    .as_ref()
                    .is_some_and(|b| b.kind == UnitKind::Base && b.owner == owner);
                let worker = st.cells[cell].as_mut().expect("actor present");
                if !ok || worker.carried == 0 {
                    return 0.0;
                }
                let amount = std::mem::take(&mut worker.carried);
                if let Some(idx) = owner.stockpile_index() {
                    st.stockpiles[idx] += amount;
                }
                gain
            }
            ActionType::Produce => {
                if let (None, Some(kind)) = (&st.cells[target], action.produce) {
                    st.cells[target] = Some(UnitState {
                        id: st.next_id,
                        kind,
                        owner,
                        hp: kind.unit_type().max_hp,
                        carried: 0,
                        pos: (target / st.width, target % st.width),
                        pending: None,
                    });
                    st.next_id += 1;
                }
                0.0
            }
            ActionType::Attack => {
                if let Some(victim) = st.cells[target].as_mut() {
                    if Some(victim.owner) == owner.opponent() {
                        victim.hp = victim.hp.saturating_sub(ATTACK_DAMAGE);
                        if victim.hp == 0 {
                            st.cells[target] = None;
                        }
                    }
                }
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(size: usize) -> Env {
        Env::new(EnvConfig::new(size)).unwrap()
    }

    const WORKER: usize = 1; // (0, 1)

    #[test]
    fn small_map_initial_units() {
        let e = env(4);
        let s = e.state();
        let count = |o: Owner| s.units().filter(|u| u.owner == o).count();
        assert_eq!(count(Owner::Player1), 2);
        assert_eq!(count(Owner::Player2), 2);
        assert_eq!(s.units().filter(|u| u.kind == UnitKind::Resource).count(), 2);
        let m = e.masks();
        assert_eq!(m.valid_count(0), 2);
        assert_eq!(m.valid_count(0) as f64 / 16.0, 0.125);
        assert_eq!(m.valid_count(7), 2);
        for d in 1..7 {
            assert!(m.head(d).iter().all(|&v| v));
        }
    }

    #[test]
    fn large_map_valid_source_fraction() {
        let m = env(24).masks();
        assert_eq!(m.valid_count(0), 2);
        assert!((m.valid_count(0) as f64 / 576.0 - 0.0034).abs() < 1e-4);
    }

    #[test]
    fn unsupported_size_rejected() {
        assert_eq!(Env::new(EnvConfig::new(5)).unwrap_err(), EnvError::UnsupportedMapSize(5));
    }

    #[test]
    fn harvest_then_return() {
        let mut e = env(4);
        let r = e.step(&CompositeAction::new(WORKER, ActionType::Harvest).with_harvest(Direction::West));
        assert_eq!(r.invalid_class, InvalidClass::Valid);
        assert_eq!(r.reward, 1.0);
        assert_eq!(e.state().unit_at(WORKER).unwrap().carried, 1);
        assert_eq!(e.state().unit_at(0).unwrap().carried, 19);
        assert_eq!(e.state().tick, 10);
        // the 10-tick action finished inside the frame skip
        assert_eq!(r.masks.valid_count(0), 2);

        let r = e.step(&CompositeAction::new(WORKER, ActionType::Return).with_return(Direction::South));
        assert_eq!(r.reward, 1.0);
        assert_eq!(e.state().unit_at(WORKER).unwrap().carried, 0);
        assert_eq!(e.state().stockpiles[0], 1);
        assert_eq!(e.state().tick, 20);
        assert_eq!(e.state().agent_step, 2);
    }

    #[test]
    fn empty_source_is_a_noop() {
        let mut e = env(4);
        let before = e.state().clone();
        let r = e.step(&CompositeAction::new(6, ActionType::Move));
        assert_eq!(r.invalid_class, InvalidClass::NullSource);
        assert_eq!(r.reward, 0.0);
        let after = e.state();
        assert_eq!(after.cells, before.cells);
        assert_eq!(after.tick, before.tick + 10);
    }

    #[test]
    fn classification_order_and_cases() {
        let mut e = env(4);
        let s = e.state().clone();
        let p1 = Owner::Player1;
        assert_eq!(classify_action(&s, &CompositeAction::new(2, ActionType::Noop), p1), InvalidClass::NullSource);
        // player-2 worker at (3, 1)
        assert_eq!(classify_action(&s, &CompositeAction::new(13, ActionType::Noop), p1), InvalidClass::WrongOwner);
        // mine is neutral
        assert_eq!(classify_action(&s, &CompositeAction::new(0, ActionType::Noop), p1), InvalidClass::WrongOwner);
        // harvest facing east: empty cell
        let bad = CompositeAction::new(WORKER, ActionType::Harvest).with_harvest(Direction::East);
        assert_eq!(classify_action(&s, &bad, p1), InvalidClass::BadParameter);
        // move into the base
        let bump = CompositeAction::new(WORKER, ActionType::Move).with_move(Direction::South);
        assert_eq!(classify_action(&s, &bump, p1), InvalidClass::BadParameter);
        // return without cargo
        let ret = CompositeAction::new(WORKER, ActionType::Return).with_return(Direction::South);
        assert_eq!(classify_action(&s, &ret, p1), InvalidClass::BadParameter);
        assert_eq!(classify_action(&s, &CompositeAction::new(WORKER, ActionType::Noop), p1), InvalidClass::Valid);

        // base producing a worker stays busy past the frame skip
        for _ in 0..2 {
            e.step(&CompositeAction::new(WORKER, ActionType::Harvest).with_harvest(Direction::West));
            e.step(&CompositeAction::new(WORKER, ActionType::Return).with_return(Direction::South));
        }
        let produce = CompositeAction::new(5, ActionType::Produce).with_produce(Direction::East, UnitKind::Worker);
        let r = e.step(&produce);
        assert_eq!(r.invalid_class, InvalidClass::Valid);
        assert!(e.state().unit_at(5).unwrap().is_busy());
        assert!(!r.masks.head(0)[5]);
        assert_eq!(
            classify_action(e.state(), &CompositeAction::new(5, ActionType::Noop), p1),
            InvalidClass::BusySource
        );
        e.step(&CompositeAction::new(WORKER, ActionType::Noop));
        let s = e.state();
        assert!(!s.unit_at(5).unwrap().is_busy());
        let new_worker = s.unit_at(6).unwrap();
        assert_eq!((new_worker.kind, new_worker.owner), (UnitKind::Worker, Owner::Player1));
        assert_eq!(s.stockpiles[0], 1);
    }

    #[test]
    fn worker_observation_planes() {
        let s = env(4).state().clone();
        let obs = encode_observation(&s);
        let cell = &obs.values()[WORKER * NUM_PLANES..(WORKER + 1) * NUM_PLANES];
        let want: Vec<f32> = [
            &[0., 1., 0., 0., 0.][..],
            &[1., 0., 0., 0., 0.],
            &[1., 0., 0.],
            &[0., 0., 0., 0., 1., 0., 0., 0.],
            &[1., 0., 0., 0., 0., 0.],
        ]
        .concat();
        assert_eq!(cell, &want[..]);
        let mine = &obs.values()[..NUM_PLANES];
        assert_eq!(mine[RES_OFFSET + 4], 1.0);
        for planes in obs.values().chunks(NUM_PLANES) {
            assert_eq!(planes.iter().filter(|&&v| v == 1.0).count(), 5);
            assert_eq!(planes.iter().sum::<f32>(), 5.0);
        }
    }

    #[test]
    fn attack_fallback_without_enemies() {
        let mut s = env(4).state().clone();
        for c in s.cells.iter_mut() {
            if c.as_ref().is_some_and(|u| u.owner == Owner::Player2) {
                *c = None;
            }
        }
        let m = compute_masks(&s, Owner::Player1);
        assert_eq!(m.valid_count(7), 1);
        assert!(m.head(7)[0]);
    }

    #[test]
    fn all_units_busy_forces_noop() {
        let mut s = env(4).state().clone();
        for c in s.cells.iter_mut().flatten() {
            if c.owner == Owner::Player1 {
                c.pending = Some(PendingAction {
                    action: ActionType::Produce,
                    target: 0,
                    produce: None,
                    ticks_remaining: 5,
                });
            }
        }
        let m = compute_masks(&s, Owner::Player1);
        assert_eq!(m.valid_count(0), 1);
        assert!(m.head(0)[0]);
        assert_eq!(
            classify_action(&s, &CompositeAction::new(0, ActionType::Noop), Owner::Player1),
            InvalidClass::Valid
        );
    }

    #[test]
    fn depleted_mine_disappears() {
        let cfg = EnvConfig {
            resources_per_mine: 1,
            ..EnvConfig::new(4)
        };
        let mut e = Env::new(cfg).unwrap();
        let r = e.step(&CompositeAction::new(WORKER, ActionType::Harvest).with_harvest(Direction::West));
        assert_eq!(r.reward, 1.0);
        assert!(e.state().unit_at(0).is_none());
        assert!(!r.done);
    }

    #[test]
    fn episode_ends_at_step_limit() {
        let mut e = env(4);
        let mut steps = 0;
        loop {
            steps += 1;
            if e.step(&CompositeAction::new(WORKER, ActionType::Noop)).done {
                break;
            }
        }
        assert_eq!(steps, 200);
        assert_eq!(e.state().tick, 2000);
    }

    #[test]
    fn out_of_range_component_detected() {
        let a = CompositeAction {
            produce_type: 7,
            ..Default::default()
        };
        assert!(a.check_ranges(4, 4).is_err());
        assert!(CompositeAction::default().check_ranges(4, 4).is_ok());
    }
}
