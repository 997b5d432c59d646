//! Deterministic two-arm kitchen.
//!
//! The scene holds ingredients and containers in an ingredient area, a cutting
//! board and a bowl (both fixtures), a gripper arm (gripper + camera) and a
//! tool arm (knife). Every operation is a pure transition: it reads a
//! [`WorldState`] and returns a new one, or an [`ActionError`] leaving the
//! input untouched.
//!
//! Semantics of the motion API:
//!
//! | call | arm | effect |
//! |------|-----|--------|
//! | `open_gripper` | gripper | opens; a held object drops at the current target (board, bowl, or the table under the TCP) |
//! | `move_to_object` | any | TCP above the object, then down onto it; remembers the target |
//! | `grasp` | gripper | picks up the object the arm moved to |
//! | `cut` | tool | cuts the whole object on the board |
//! | `put` | any | held object into the bowl, or (tool) the object on the board swept into the bowl |
//! | `pour` | gripper | empties the held container into the bowl |
//! | `toss` | any free effector | mixes the bowl |
//! | `cut_and_put_in` | tool | `cut` followed by `put` |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_lang::{ActionProgram, ApiCall};
use crate::geometry::{BoundingBox, CameraModel, GeometryError, WorldPoint};

pub const CUTTING_BOARD: &str = "cutting_board";
pub const BOWL: &str = "bowl";
/// Accepted as another name for the bowl.
pub const PLATE_ALIAS: &str = "plate";
/// Height above an object at which an approach starts, meters.
pub const APPROACH_HEIGHT: f64 = 0.10;

const INGREDIENT_BOX_HALF: (f64, f64) = (40.0, 40.0);
const CONTAINER_BOX_HALF: (f64, f64) = (50.0, 70.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ManipulatorId {
    /// Carries the two-finger gripper and the camera.
    #[serde(rename = "gripper")]
    GripperArm,
    /// Carries the knife.
    #[serde(rename = "tool")]
    ToolArm,
}

impl ManipulatorId {
    pub const ALL: [ManipulatorId; 2] = [ManipulatorId::GripperArm, ManipulatorId::ToolArm];

    pub fn as_str(self) -> &'static str {
        match self {
            ManipulatorId::GripperArm => "gripper",
            ManipulatorId::ToolArm => "tool",
        }
    }

    /// Accepts `gripper` / `tool`, case-insensitively.
    pub fn from_literal(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gripper" => Some(ManipulatorId::GripperArm),
            "tool" => Some(ManipulatorId::ToolArm),
            _ => None,
        }
    }
}

impl fmt::Display for ManipulatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Ingredient,
    Container,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectState {
    Whole,
    Cut,
    /// Tossed in the bowl; remembers whether it had been cut.
    Mixed {
        cut: bool,
    },
    Emptied,
}

impl ObjectState {
    pub fn is_cut(self) -> bool {
        matches!(self, ObjectState::Cut | ObjectState::Mixed { cut: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    IngredientArea(WorldPoint),
    CuttingBoard,
    Bowl,
    Held(ManipulatorId),
    /// Fixture pose; never changes.
    Fixed(WorldPoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub name: String,
    pub kind: ObjectKind,
    pub state: ObjectState,
    pub location: Location,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pourable_contents: Option<String>,
}

impl SimObject {
    pub fn ingredient(name: impl Into<String>, position: WorldPoint) -> Self {
        Self {
            name: name.into(),
            kind: ObjectKind::Ingredient,
            state: ObjectState::Whole,
            location: Location::IngredientArea(position),
            pourable_contents: None,
        }
    }

    pub fn container(name: impl Into<String>, position: WorldPoint, contents: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ObjectKind::Container,
            state: ObjectState::Whole,
            location: Location::IngredientArea(position),
            pourable_contents: Some(contents.into()),
        }
    }

    fn fixture(name: &str, pose: WorldPoint) -> Self {
        Self {
            name: name.to_string(),
            kind: ObjectKind::Fixture,
            state: ObjectState::Whole,
            location: Location::Fixed(pose),
            pourable_contents: None,
        }
    }

    pub fn is_fixture(&self) -> bool {
        self.kind == ObjectKind::Fixture
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub id: ManipulatorId,
    pub tcp_position: WorldPoint,
    /// Always `false` for the tool arm.
    pub gripper_open: bool,
    pub held_object: Option<String>,
    pub at_target: Option<String>,
}

impl ArmState {
    pub fn at_home(id: ManipulatorId, home: WorldPoint) -> Self {
        Self {
            id,
            tcp_position: home,
            gripper_open: id == ManipulatorId::GripperArm,
            held_object: None,
            at_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: BTreeMap<String, SimObject>,
    pub gripper_arm: ArmState,
    pub tool_arm: ArmState,
    /// Poured contents, in pour order.
    pub bowl_contents: Vec<String>,
    pub bowl_mixed: bool,
    /// Calls applied by [`execute_program`].
    pub history: Vec<ApiCall>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("duplicate object name `{0}`")]
    DuplicateObject(String),
    #[error("object name `{0}` is reserved for a fixture")]
    ReservedName(String),
    #[error("object `{name}` is invalid: {reason}")]
    InvalidObject { name: String, reason: String },
}

impl WorldState {
    pub fn new(
        board_pose: WorldPoint,
        bowl_pose: WorldPoint,
        gripper_home: WorldPoint,
        tool_home: WorldPoint,
        objects: impl IntoIterator<Item = SimObject>,
    ) -> Result<Self, SceneError> {
        let mut map = BTreeMap::new();
        map.insert(CUTTING_BOARD.to_string(), SimObject::fixture(CUTTING_BOARD, board_pose));
        map.insert(BOWL.to_string(), SimObject::fixture(BOWL, bowl_pose));
        let mut on_board = 0;
        for obj in objects {
            if [CUTTING_BOARD, BOWL, PLATE_ALIAS].contains(&obj.name.as_str()) {
                return Err(SceneError::ReservedName(obj.name));
            }
            let invalid = |reason: &str| SceneError::InvalidObject { name: obj.name.clone(), reason: reason.into() };
            if obj.is_fixture() {
                return Err(invalid("only the cutting board and bowl are fixtures"));
            }
            if matches!(obj.location, Location::Held(_) | Location::Fixed(_)) {
                return Err(invalid("scenes start with objects on the table, board or bowl"));
            }
            if obj.kind == ObjectKind::Container && obj.pourable_contents.is_none() && obj.state != ObjectState::Emptied
            {
                return Err(invalid("containers need pourable contents"));
            }
            if obj.location == Location::CuttingBoard {
                on_board += 1;
                if on_board > 1 {
                    return Err(invalid("only one object fits on the cutting board"));
                }
            }
            if map.contains_key(&obj.name) {
                return Err(SceneError::DuplicateObject(obj.name));
            }
            map.insert(obj.name.clone(), obj);
        }
        Ok(Self {
            objects: map,
            gripper_arm: ArmState::at_home(ManipulatorId::GripperArm, gripper_home),
            tool_arm: ArmState::at_home(ManipulatorId::ToolArm, tool_home),
            bowl_contents: Vec::new(),
            bowl_mixed: false,
            history: Vec::new(),
        })
    }

    pub fn arm(&self, id: ManipulatorId) -> &ArmState {
        match id {
            ManipulatorId::GripperArm => &self.gripper_arm,
            ManipulatorId::ToolArm => &self.tool_arm,
        }
    }

    fn arm_mut(&mut self, id: ManipulatorId) -> &mut ArmState {
        match id {
            ManipulatorId::GripperArm => &mut self.gripper_arm,
            ManipulatorId::ToolArm => &mut self.tool_arm,
        }
    }

    pub fn object(&self, name: &str) -> Option<&SimObject> {
        self.objects.get(resolve_alias(name))
    }

    /// Current position of an object (fixture poses for board and bowl).
    pub fn position_of(&self, name: &str) -> Option<WorldPoint> {
        let obj = self.object(name)?;
        Some(match obj.location {
            Location::IngredientArea(p) | Location::Fixed(p) => p,
            Location::CuttingBoard => self.fixture_pose(CUTTING_BOARD),
            Location::Bowl => self.fixture_pose(BOWL),
            Location::Held(arm) => self.arm(arm).tcp_position,
        })
    }

    fn fixture_pose(&self, name: &str) -> WorldPoint {
        match self.objects[name].location {
            Location::Fixed(p) => p,
            _ => unreachable!("fixtures are always fixed"),
        }
    }

    /// Non-fixture object currently on the cutting board.
    pub fn board_occupant(&self) -> Option<&str> {
        self.objects.values().find(|o| o.location == Location::CuttingBoard).map(|o| o.name.as_str())
    }

    pub fn bowl_objects(&self) -> Vec<&str> {
        self.objects.values().filter(|o| o.location == Location::Bowl).map(|o| o.name.as_str()).collect()
    }

    /// Multiset of object names; identical across every reachable state.
    pub fn object_names(&self) -> BTreeSet<&str> {
        self.objects.keys().map(String::as_str).collect()
    }

    /// Checks the structural invariants every reachable state must satisfy.
    pub fn check_invariants(&self) -> Result<(), String> {
        let on_board = self.objects.values().filter(|o| o.location == Location::CuttingBoard).count();
        if on_board > 1 {
            return Err(format!("{on_board} objects on the cutting board"));
        }
        for obj in self.objects.values() {
            if obj.is_fixture() != matches!(obj.location, Location::Fixed(_)) {
                return Err(format!("`{}` fixture/location mismatch", obj.name));
            }
            if let Location::Held(a) = obj.location {
                if self.arm(a).held_object.as_deref() != Some(obj.name.as_str()) {
                    return Err(format!("`{}` is Held({a}) but the arm does not hold it", obj.name));
                }
            }
        }
        for arm in [&self.gripper_arm, &self.tool_arm] {
            if let Some(h) = &arm.held_object {
                match self.objects.get(h) {
                    Some(o) if o.location == Location::Held(arm.id) => {}
                    _ => return Err(format!("{} holds `{h}` which is not Held by it", arm.id)),
                }
                if arm.gripper_open {
                    return Err(format!("{} holds `{h}` with an open gripper", arm.id));
                }
            }
        }
        if self.tool_arm.held_object.is_some() || self.tool_arm.gripper_open {
            return Err("tool arm has no gripper".into());
        }
        Ok(())
    }

    pub fn summary(&self) -> StateSummary {
        let arm = |a: &ArmState| ArmSummary {
            tcp: a.tcp_position,
            gripper_open: a.gripper_open,
            held: a.held_object.clone(),
            at_target: a.at_target.clone(),
        };
        StateSummary {
            gripper: arm(&self.gripper_arm),
            tool: arm(&self.tool_arm),
            board: self.board_occupant().map(str::to_string),
            bowl_objects: self.bowl_objects().into_iter().map(str::to_string).collect(),
            bowl_contents: self.bowl_contents.clone(),
            bowl_mixed: self.bowl_mixed,
        }
    }
}

fn resolve_alias(name: &str) -> &str {
    if name == PLATE_ALIAS {
        BOWL
    } else {
        name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub tcp: WorldPoint,
    pub gripper_open: bool,
    pub held: Option<String>,
    pub at_target: Option<String>,
}

/// Compact view of a state recorded before and after each trace event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub gripper: ArmSummary,
    pub tool: ArmSummary,
    pub board: Option<String>,
    pub bowl_objects: Vec<String>,
    pub bowl_contents: Vec<String>,
    pub bowl_mixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionErrorCode {
    UnknownObject,
    WrongArm,
    GripperBusy,
    GripperEmpty,
    NotAtTarget,
    NotOnBoard,
    BoardOccupied,
    AlreadyCut,
    NotPourable,
    EmptyBowl,
    FixtureImmovable,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{offending_call}: {code:?}: {message}")]
pub struct ActionError {
    pub code: ActionErrorCode,
    pub message: String,
    pub offending_call: ApiCall,
}

struct Transition<'a> {
    state: WorldState,
    call: &'a ApiCall,
}

impl<'a> Transition<'a> {
    fn new(w: &WorldState, call: &'a ApiCall) -> Self {
        Self { state: w.clone(), call }
    }

    fn fail<T>(&self, code: ActionErrorCode, message: impl Into<String>) -> Result<T, ActionError> {
        Err(ActionError { code, message: message.into(), offending_call: self.call.clone() })
    }

    fn require_gripper(&self, arm: ManipulatorId) -> Result<(), ActionError> {
        if arm == ManipulatorId::ToolArm {
            return self.fail(ActionErrorCode::WrongArm, format!("{} needs the gripper arm", self.call.function()));
        }
        Ok(())
    }

    fn require_tool(&self, arm: ManipulatorId) -> Result<(), ActionError> {
        if arm == ManipulatorId::GripperArm {
            return self
                .fail(ActionErrorCode::WrongArm, format!("{} needs the tool arm (knife)", self.call.function()));
        }
        Ok(())
    }

    fn object(&self, name: &str) -> Result<&SimObject, ActionError> {
        match self.state.object(name) {
            Some(o) => Ok(o),
            None => self.fail(ActionErrorCode::UnknownObject, format!("no object named `{name}` in the scene")),
        }
    }

    fn object_mut(&mut self, name: &str) -> &mut SimObject {
        self.state.objects.get_mut(resolve_alias(name)).expect("object checked before mutation")
    }

    fn add_to_bowl(&mut self, name: &str) {
        self.object_mut(name).location = Location::Bowl;
        self.state.bowl_mixed = false;
    }
}

pub fn open_gripper(w: &WorldState, arm: ManipulatorId) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::OpenGripper { arm })
}

pub fn move_to_object(w: &WorldState, arm: ManipulatorId, object: &str) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::MoveToObject { arm, object: object.into() })
}

pub fn grasp(w: &WorldState, arm: ManipulatorId, object: &str) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::Grasp { arm, object: object.into() })
}

pub fn cut(w: &WorldState, arm: ManipulatorId, object: &str) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::Cut { arm, object: object.into() })
}

pub fn put(w: &WorldState, arm: ManipulatorId, object: &str) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::Put { arm, object: object.into() })
}

pub fn pour(w: &WorldState, arm: ManipulatorId, object: &str) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::Pour { arm, object: object.into() })
}

pub fn toss(w: &WorldState, arm: ManipulatorId, object: &str) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::Toss { arm, object: object.into() })
}

pub fn cut_and_put_in(w: &WorldState, arm: ManipulatorId, object: &str) -> Result<WorldState, ActionError> {
    apply(w, &ApiCall::CutAndPutIn { arm, object: object.into() })
}

/// Applies one call. Perception calls leave the state unchanged.
pub fn apply(w: &WorldState, call: &ApiCall) -> Result<WorldState, ActionError> {
    Ok(apply_phased(w, call)?.pop().expect("at least one phase").1)
}

/// Motion phase of a single trace event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// TCP brought to the approach height above the target.
    Approach,
    /// TCP lowered onto the target.
    Descend,
    /// Single-step effector action.
    Act,
    /// Perception call; no state change.
    Skip,
}

/// Applies a call, returning each intermediate state with its phase.
fn apply_phased(w: &WorldState, call: &ApiCall) -> Result<Vec<(Phase, WorldState)>, ActionError> {
    let mut t = Transition::new(w, call);
    match call {
        ApiCall::MoveToObject { arm, object } => {
            let target = t.object(object)?.name.clone();
            let pos = t.state.position_of(&target).expect("object exists");
            let mut above = t.state.clone();
            above.arm_mut(*arm).tcp_position = WorldPoint::new(pos.x, pos.y, pos.z + APPROACH_HEIGHT);
            let mut down = above.clone();
            let a = down.arm_mut(*arm);
            a.tcp_position = pos;
            a.at_target = Some(target);
            return Ok(vec![(Phase::Approach, above), (Phase::Descend, down)]);
        }
        ApiCall::GetListOfObjects | ApiCall::GetBoundingBoxes { .. } => return Ok(vec![(Phase::Skip, t.state)]),
        ApiCall::OpenGripper { arm } => open_gripper_in(&mut t, *arm)?,
        ApiCall::Grasp { arm, object } => grasp_in(&mut t, *arm, object)?,
        ApiCall::Cut { arm, object } => cut_in(&mut t, *arm, object)?,
        ApiCall::Put { arm, object } => put_in(&mut t, *arm, object)?,
        ApiCall::Pour { arm, object } => pour_in(&mut t, *arm, object)?,
        ApiCall::Toss { arm, object } => toss_in(&mut t, *arm, object)?,
        ApiCall::CutAndPutIn { arm, object } => cut_and_put_in_in(&mut t, *arm, object)?,
    }
    Ok(vec![(Phase::Act, t.state)])
}

fn open_gripper_in(t: &mut Transition<'_>, arm: ManipulatorId) -> Result<(), ActionError> {
    t.require_gripper(arm)?;
    let a = t.state.arm(arm).clone();
    if let Some(held) = a.held_object {
        let destination = match a.at_target.as_deref() {
            Some(CUTTING_BOARD) => {
                if let Some(other) = t.state.board_occupant() {
                    return t
                        .fail(ActionErrorCode::BoardOccupied, format!("`{other}` is already on the cutting board"));
                }
                Location::CuttingBoard
            }
            Some(BOWL) => Location::Bowl,
            _ => Location::IngredientArea(a.tcp_position),
        };
        if destination == Location::Bowl {
            t.add_to_bowl(&held);
        } else {
            t.object_mut(&held).location = destination;
        }
    }
    let a = t.state.arm_mut(arm);
    a.held_object = None;
    a.gripper_open = true;
    Ok(())
}

fn grasp_in(t: &mut Transition<'_>, arm: ManipulatorId, object: &str) -> Result<(), ActionError> {
    t.require_gripper(arm)?;
    let obj = t.object(object)?;
    if obj.is_fixture() {
        return t.fail(ActionErrorCode::FixtureImmovable, format!("`{}` is a fixture", obj.name));
    }
    let name = obj.name.clone();
    let a = t.state.arm(arm);
    if !a.gripper_open || a.held_object.is_some() {
        let holding = a.held_object.as_deref().unwrap_or("nothing");
        return t.fail(ActionErrorCode::GripperBusy, format!("gripper is closed (holding {holding})"));
    }
    if a.at_target.as_deref() != Some(name.as_str()) {
        return t.fail(
            ActionErrorCode::NotAtTarget,
            format!("gripper arm is at {:?}, not at `{name}`", a.at_target.as_deref().unwrap_or("home")),
        );
    }
    t.object_mut(&name).location = Location::Held(arm);
    let a = t.state.arm_mut(arm);
    a.held_object = Some(name);
    a.gripper_open = false;
    Ok(())
}

fn cut_in(t: &mut Transition<'_>, arm: ManipulatorId, object: &str) -> Result<(), ActionError> {
    t.require_tool(arm)?;
    let obj = t.object(object)?;
    if obj.location != Location::CuttingBoard {
        return t.fail(ActionErrorCode::NotOnBoard, format!("`{}` is not on the cutting board", obj.name));
    }
    if obj.state != ObjectState::Whole {
        return t.fail(ActionErrorCode::AlreadyCut, format!("`{}` is {:?}, not whole", obj.name, obj.state));
    }
    t.object_mut(object).state = ObjectState::Cut;
    Ok(())
}

fn put_in(t: &mut Transition<'_>, arm: ManipulatorId, object: &str) -> Result<(), ActionError> {
    let obj = t.object(object)?;
    let name = obj.name.clone();
    if obj.location == Location::Held(arm) {
        t.add_to_bowl(&name);
        let a = t.state.arm_mut(arm);
        a.held_object = None;
        a.gripper_open = true;
        return Ok(());
    }
    if arm == ManipulatorId::ToolArm && obj.location == Location::CuttingBoard {
        t.add_to_bowl(&name);
        return Ok(());
    }
    t.fail(
        ActionErrorCode::NotAtTarget,
        format!("`{name}` is neither held by the {arm} arm nor reachable on the cutting board"),
    )
}

fn pour_in(t: &mut Transition<'_>, arm: ManipulatorId, object: &str) -> Result<(), ActionError> {
    t.require_gripper(arm)?;
    let obj = t.object(object)?;
    let name = obj.name.clone();
    let contents = match (&obj.kind, &obj.pourable_contents, obj.state) {
        (ObjectKind::Container, Some(c), s) if s != ObjectState::Emptied => c.clone(),
        (ObjectKind::Container, _, _) => return t.fail(ActionErrorCode::NotPourable, format!("`{name}` is empty")),
        _ => return t.fail(ActionErrorCode::NotPourable, format!("`{name}` is not a container")),
    };
    match t.state.arm(arm).held_object.as_deref() {
        None => return t.fail(ActionErrorCode::GripperEmpty, "gripper is not holding anything"),
        Some(h) if h != name => {
            return t.fail(ActionErrorCode::NotAtTarget, format!("gripper holds `{h}`, not `{name}`"));
        }
        Some(_) => {}
    }
    t.state.bowl_contents.push(contents);
    t.state.bowl_mixed = false;
    t.object_mut(&name).state = ObjectState::Emptied;
    Ok(())
}

fn toss_in(t: &mut Transition<'_>, arm: ManipulatorId, object: &str) -> Result<(), ActionError> {
    if resolve_alias(object) != BOWL {
        return t.fail(ActionErrorCode::UnknownObject, format!("toss mixes the bowl, got `{object}`"));
    }
    if let Some(h) = &t.state.arm(arm).held_object {
        return t.fail(ActionErrorCode::GripperBusy, format!("{arm} arm is holding `{h}`"));
    }
    let in_bowl: Vec<String> = t.state.bowl_objects().into_iter().map(str::to_string).collect();
    if in_bowl.is_empty() && t.state.bowl_contents.is_empty() {
        return t.fail(ActionErrorCode::EmptyBowl, "nothing in the bowl to mix");
    }
    for name in in_bowl {
        let obj = t.object_mut(&name);
        if obj.kind == ObjectKind::Ingredient {
            obj.state = ObjectState::Mixed { cut: obj.state.is_cut() };
        }
    }
    t.state.bowl_mixed = true;
    Ok(())
}

fn cut_and_put_in_in(t: &mut Transition<'_>, arm: ManipulatorId, object: &str) -> Result<(), ActionError> {
    t.require_tool(arm)?;
    let obj = t.object(object)?;
    if obj.location != Location::CuttingBoard {
        return t.fail(ActionErrorCode::NotOnBoard, format!("`{}` is not on the cutting board", obj.name));
    }
    if obj.state != ObjectState::Whole {
        return t.fail(ActionErrorCode::AlreadyCut, format!("`{}` is {:?}, not whole", obj.name, obj.state));
    }
    let name = obj.name.clone();
    t.object_mut(&name).state = ObjectState::Cut;
    t.add_to_bowl(&name);
    Ok(())
}

/// Names of non-fixture objects lying in the ingredient area, sorted.
pub fn sim_list_objects(w: &WorldState) -> Vec<String> {
    // BTreeMap iteration is already sorted by name
    w.objects
        .values()
        .filter(|o| !o.is_fixture() && matches!(o.location, Location::IngredientArea(_)))
        .map(|o| o.name.clone())
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("`{0}` is not visible in the ingredient area")]
    UnknownObject(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Ground-truth boxes centered on the raw-pixel projection of each object.
pub fn sim_bounding_boxes(
    w: &WorldState,
    names: &[String],
    camera: &CameraModel,
) -> Result<BTreeMap<String, BoundingBox>, BoxError> {
    let mut out = BTreeMap::new();
    for name in names {
        let obj = w.objects.get(name.as_str()).ok_or_else(|| BoxError::UnknownObject(name.clone()))?;
        let Location::IngredientArea(pos) = obj.location else {
            return Err(BoxError::UnknownObject(name.clone()));
        };
        if obj.is_fixture() {
            return Err(BoxError::UnknownObject(name.clone()));
        }
        let center = camera.project_raw(pos)?;
        let (hw, hh) = match obj.kind {
            ObjectKind::Container => CONTAINER_BOX_HALF,
            _ => INGREDIENT_BOX_HALF,
        };
        let bbox = BoundingBox::centered(center, hw, hh).expect("fixed extents are positive");
        out.insert(name.clone(), bbox);
    }
    Ok(out)
}

/// One state delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// 1-based position of the call in the program.
    pub call_index: usize,
    pub call: String,
    pub phase: Phase,
    pub pre: StateSummary,
    pub post: StateSummary,
}

pub type ExecutionTrace = Vec<TraceEvent>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionFailure {
    /// 1-based index of the failing call.
    pub call_index: usize,
    pub error: ActionError,
}

/// Result of running a program: the state after the last successful call.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub state: WorldState,
    pub trace: ExecutionTrace,
    pub failure: Option<ExecutionFailure>,
}

impl Execution {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Applies calls in order, stopping at the first failure.
pub fn execute_program(w: &WorldState, program: &ActionProgram) -> Execution {
    execute_calls(w, program.calls())
}

pub fn execute_calls(w: &WorldState, calls: &[ApiCall]) -> Execution {
    let mut state = w.clone();
    let mut trace = Vec::new();
    for (i, call) in calls.iter().enumerate() {
        match apply_phased(&state, call) {
            Ok(phases) => {
                let text = call.to_string();
                for (phase, next) in phases {
                    trace.push(TraceEvent {
                        call_index: i + 1,
                        call: text.clone(),
                        phase,
                        pre: state.summary(),
                        post: next.summary(),
                    });
                    state = next;
                }
                state.history.push(call.clone());
            }
            Err(error) => {
                return Execution { state, trace, failure: Some(ExecutionFailure { call_index: i + 1, error }) };
            }
        }
    }
    Execution { state, trace, failure: None }
}
