//! Scene documents: camera, fixtures, arm homes and table objects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{load_calibration, CalibrationDocument, CameraModel, GeometryError, WorldPoint};
use crate::kitchen::{Location, ObjectKind, ObjectState, SceneError, SimObject, WorldState, BOWL, CUTTING_BOARD};
use crate::rag::{Preparation, Recipe};

const FIXTURE_CAMERA: &str = include_str!("../assets/camera.toml");

pub const DEFAULT_BOARD: WorldPoint = WorldPoint::new(0.0, 0.32, 0.0);
pub const DEFAULT_BOWL: WorldPoint = WorldPoint::new(0.25, 0.32, 0.0);
pub const DEFAULT_GRIPPER_HOME: WorldPoint = WorldPoint::new(-0.3, 0.2, 0.3);
pub const DEFAULT_TOOL_HOME: WorldPoint = WorldPoint::new(0.3, 0.2, 0.3);

#[derive(Debug, Error)]
pub enum SceneLoadError {
    #[error("scene parse error: {0}")]
    Parse(String),
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("camera: {0}")]
    Camera(#[from] GeometryError),
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
}

/// A loaded scene: what the camera sees and what the simulator holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub camera: CameraModel,
    pub world: WorldState,
    /// Photo of the table, for remote vision models.
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    IngredientArea,
    CuttingBoard,
    Bowl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: ObjectKind,
    #[serde(default = "default_state")]
    pub state: ObjectState,
    pub position: [f64; 3],
    #[serde(default)]
    pub placement: Placement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pourable_contents: Option<String>,
}

fn default_kind() -> ObjectKind {
    ObjectKind::Ingredient
}

fn default_state() -> ObjectState {
    ObjectState::Whole
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixtures {
    pub cutting_board: [f64; 3],
    pub bowl: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmHomes {
    pub gripper: [f64; 3],
    pub tool: [f64; 3],
}

/// On-disk scene. The camera is either a path (relative to the scene file)
/// or an inline calibration table; with neither, the fixture camera is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CalibrationDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    pub fixtures: Fixtures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<ArmHomes>,
    #[serde(default)]
    pub objects: Vec<ObjectEntry>,
}

fn point(p: [f64; 3]) -> WorldPoint {
    WorldPoint::new(p[0], p[1], p[2])
}

fn array(p: WorldPoint) -> [f64; 3] {
    [p.x, p.y, p.z]
}

pub fn fixture_camera() -> CameraModel {
    load_calibration(FIXTURE_CAMERA).expect("fixture camera is valid")
}

impl SceneDocument {
    pub fn into_scene(self, base_dir: Option<&Path>) -> Result<Scene, SceneLoadError> {
        let camera = match (self.calibration, self.camera) {
            (Some(_), Some(_)) => {
                return Err(SceneLoadError::Parse("give either `calibration` or `[camera]`, not both".into()))
            }
            (Some(rel), None) => {
                let path = base_dir.map_or(rel.clone(), |d| d.join(&rel));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| SceneLoadError::Io { path: path.display().to_string(), reason: e.to_string() })?;
                load_calibration(&text)?
            }
            (None, Some(doc)) => doc.into_model()?,
            (None, None) => fixture_camera(),
        };
        let homes =
            self.arms.unwrap_or(ArmHomes { gripper: array(DEFAULT_GRIPPER_HOME), tool: array(DEFAULT_TOOL_HOME) });
        let objects = self.objects.into_iter().map(|o| SimObject {
            location: match o.placement {
                Placement::IngredientArea => Location::IngredientArea(point(o.position)),
                Placement::CuttingBoard => Location::CuttingBoard,
                Placement::Bowl => Location::Bowl,
            },
            name: o.name,
            kind: o.kind,
            state: o.state,
            pourable_contents: o.pourable_contents,
        });
        let world = WorldState::new(
            point(self.fixtures.cutting_board),
            point(self.fixtures.bowl),
            point(homes.gripper),
            point(homes.tool),
            objects,
        )?;
        let image = self.image.map(|p| base_dir.map_or(p.clone(), |d| d.join(&p)));
        Ok(Scene { id: self.id, camera, world, image })
    }
}

impl Scene {
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self, SceneLoadError> {
        let doc: SceneDocument = toml::from_str(text).map_err(|e| SceneLoadError::Parse(e.message().to_string()))?;
        doc.into_scene(base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, SceneLoadError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneLoadError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_toml(&text, path.parent())
    }

    /// Document with the camera inlined.
    pub fn to_document(&self) -> SceneDocument {
        let w = &self.world;
        let fixture_pose = |name: &str| array(w.position_of(name).expect("fixture exists"));
        let objects = w
            .objects
            .values()
            .filter(|o| !o.is_fixture())
            .map(|o| {
                let (placement, position) = match o.location {
                    Location::IngredientArea(p) => (Placement::IngredientArea, array(p)),
                    Location::CuttingBoard => (Placement::CuttingBoard, fixture_pose(CUTTING_BOARD)),
                    // held objects cannot be written; callers only save table scenes
                    _ => (Placement::Bowl, fixture_pose(BOWL)),
                };
                ObjectEntry {
                    name: o.name.clone(),
                    kind: o.kind,
                    state: o.state,
                    position,
                    placement,
                    pourable_contents: o.pourable_contents.clone(),
                }
            })
            .collect();
        SceneDocument {
            id: self.id.clone(),
            calibration: None,
            camera: Some(CalibrationDocument::from_model(&self.camera)),
            image: self.image.clone(),
            fixtures: Fixtures { cutting_board: fixture_pose(CUTTING_BOARD), bowl: fixture_pose(BOWL) },
            arms: Some(ArmHomes { gripper: array(w.gripper_arm.tcp_position), tool: array(w.tool_arm.tcp_position) }),
            objects,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("scene serializes")
    }

    /// Ground-truth names of the objects on the table.
    pub fn ground_truth(&self) -> Vec<String> {
        crate::kitchen::sim_list_objects(&self.world)
    }
}

/// Table slot `i`: two rows of eight along the near edge, all in view of the
/// fixture camera.
pub fn slot(i: usize) -> WorldPoint {
    let (row, col) = (i / 8, i % 8);
    WorldPoint::new(-0.35 + 0.1 * col as f64, 0.04 + 0.11 * (row % 2) as f64, 0.0)
}

/// The table objects a recipe needs: cut and whole items as ingredients,
/// poured items as a container of the same name.
pub fn recipe_objects(recipe: &Recipe) -> Vec<(String, Preparation)> {
    recipe.ingredients.iter().map(|i| (i.clone(), recipe.preparation_of(i))).collect()
}

/// Builds a fixture-camera scene holding the recipe's ingredients except
/// `omit`, followed by `extras` as whole distractor ingredients.
pub fn scene_for_recipe(id: impl Into<String>, recipe: &Recipe, omit: &[&str], extras: &[&str]) -> Scene {
    let mut objects = Vec::new();
    let names = recipe_objects(recipe)
        .into_iter()
        .filter(|(n, _)| !omit.contains(&n.as_str()))
        .chain(extras.iter().map(|e| (e.to_string(), Preparation::Cut)));
    for (i, (name, prep)) in names.enumerate() {
        let pos = slot(i);
        objects.push(match prep {
            Preparation::Pour => SimObject::container(name.clone(), pos, name),
            _ => SimObject::ingredient(name, pos),
        });
    }
    let world = WorldState::new(DEFAULT_BOARD, DEFAULT_BOWL, DEFAULT_GRIPPER_HOME, DEFAULT_TOOL_HOME, objects)
        .expect("generated scenes are valid");
    Scene { id: id.into(), camera: fixture_camera(), world, image: None }
}
