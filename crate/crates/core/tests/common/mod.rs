#![allow(dead_code)]

use std::path::PathBuf;

use bimanual_core::eval::{eval_vision, group_metrics, ManifestEntry};
use bimanual_core::geometry::{CameraPoint, DistortionCoefficients, Extrinsics, Intrinsics};
use bimanual_core::kitchen::{self, ActionErrorCode, Location, ObjectKind, ObjectState, SimObject};
use bimanual_core::perception::VisionMetrics;
use bimanual_core::scene::scene_for_recipe;
use bimanual_core::scene::{slot, DEFAULT_BOARD, DEFAULT_BOWL, DEFAULT_GRIPPER_HOME, DEFAULT_TOOL_HOME};
use bimanual_core::{ActionProgram, ApiCall, ApiFunction, CameraModel, ManipulatorId, WorldPoint, WorldState};
use bimanual_core::{Pipeline, PipelineConfig, Recipe};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(rel)
}

/// Correction polynomial evaluated term by term, standard tangential form.
pub fn correction_oracle(k1: f64, k2: f64, k3: f64, p1: f64, p2: f64, x: f64, y: f64) -> (f64, f64) {
    let r = (x * x + y * y).sqrt();
    let radial = 1.0 + k1 * r.powi(2) + k2 * r.powi(4) + k3 * r.powi(6);
    let xu = x * radial + 2.0 * p1 * x * y + p2 * (r.powi(2) + 2.0 * x.powi(2));
    let yu = y * radial + p1 * (r.powi(2) + 2.0 * y.powi(2)) + 2.0 * p2 * x * y;
    (xu, yu)
}

/// Camera with focal lengths in [500, 2000], bounded distortion, a random
/// rotation and the table 0.4 to 2 m in front of the lens.
pub fn random_model<R: Rng>(rng: &mut R) -> CameraModel {
    let fx = rng.random_range(500.0..=2000.0);
    let fy = rng.random_range(500.0..=2000.0);
    let k = Intrinsics::from_focal(fx, fy, rng.random_range(300.0..=900.0), rng.random_range(200.0..=600.0)).unwrap();
    let d = DistortionCoefficients::new(
        rng.random_range(-0.2..=0.2),
        rng.random_range(-0.05..=0.05),
        rng.random_range(-0.01..=0.01),
        rng.random_range(-0.01..=0.01),
        0.0,
    )
    .unwrap();
    let r = Rotation3::from_euler_angles(
        rng.random_range(-3.1..=3.1),
        rng.random_range(-1.5..=1.5),
        rng.random_range(-3.1..=3.1),
    );
    let t = Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    let e = Extrinsics::new(*r.matrix(), t).unwrap();
    CameraModel::new(k, d, e, rng.random_range(0.4..=2.0)).unwrap()
}

/// A world point on the table plane whose ray leaves the lens at normalized
/// coordinates inside `[-0.6, 0.6] × [-0.45, 0.45]`.
pub fn table_point<R: Rng>(rng: &mut R, m: &CameraModel) -> WorldPoint {
    let z = m.table_z_camera;
    let (nx, ny) = (rng.random_range(-0.6..=0.6), rng.random_range(-0.45..=0.45));
    m.extrinsics.camera_to_world(CameraPoint::new(nx * z, ny * z, z))
}

fn fixture_world(objects: Vec<SimObject>) -> WorldState {
    WorldState::new(DEFAULT_BOARD, DEFAULT_BOWL, DEFAULT_GRIPPER_HOME, DEFAULT_TOOL_HOME, objects).unwrap()
}

const STATES: [ObjectState; 4] =
    [ObjectState::Whole, ObjectState::Cut, ObjectState::Mixed { cut: false }, ObjectState::Mixed { cut: true }];

fn placements(i: usize) -> [Location; 4] {
    [
        Location::IngredientArea(slot(i)),
        Location::CuttingBoard,
        Location::Bowl,
        Location::Held(ManipulatorId::GripperArm),
    ]
}

/// Every variant of one object: ingredients in each state and placement; the
/// first object also appears as a full or emptied container.
fn object_variants(i: usize, name: &str) -> Vec<SimObject> {
    let mut out = Vec::new();
    for loc in placements(i) {
        for state in STATES {
            out.push(SimObject {
                name: name.into(),
                kind: ObjectKind::Ingredient,
                state,
                location: loc,
                pourable_contents: None,
            });
        }
        if i == 0 {
            for state in [ObjectState::Whole, ObjectState::Emptied] {
                out.push(SimObject {
                    name: name.into(),
                    kind: ObjectKind::Container,
                    state,
                    location: loc,
                    pourable_contents: Some("oil".into()),
                });
            }
        }
    }
    out
}

/// Structurally valid states with up to three objects in every placement,
/// crossed with the tool arm's target and the bowl's mixed flag.
pub fn enumerate_states() -> Vec<WorldState> {
    const NAMES: [&str; 3] = ["apple", "bean", "carrot"];
    let mut combos: Vec<Vec<SimObject>> = vec![Vec::new()];
    let mut out = Vec::new();
    for n in 0..=NAMES.len() {
        if n > 0 {
            combos = combos
                .into_iter()
                .filter(|c| c.len() == n - 1)
                .flat_map(|c| {
                    object_variants(n - 1, NAMES[n - 1]).into_iter().map(move |o| {
                        let mut next = c.clone();
                        next.push(o);
                        next
                    })
                })
                .collect();
        }
        for objects in &combos {
            let on_board = objects.iter().filter(|o| o.location == Location::CuttingBoard).count();
            let held: Vec<&SimObject> = objects.iter().filter(|o| matches!(o.location, Location::Held(_))).collect();
            if on_board > 1 || held.len() > 1 {
                continue;
            }
            let mut base = fixture_world(Vec::new());
            for o in objects {
                base.objects.insert(o.name.clone(), o.clone());
            }
            if let Some(h) = held.first() {
                base.gripper_arm.held_object = Some(h.name.clone());
                base.gripper_arm.gripper_open = false;
            }
            for tool_target in [None, Some(kitchen::CUTTING_BOARD.to_string())] {
                for mixed in [false, true] {
                    let mut w = base.clone();
                    w.tool_arm.at_target = tool_target.clone();
                    w.bowl_mixed = mixed;
                    out.push(w);
                }
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct CompositionReport {
    pub states: usize,
    pub comparisons: usize,
    pub discrepancies: Vec<String>,
}

fn outcome(r: Result<WorldState, kitchen::ActionError>) -> Result<WorldState, ActionErrorCode> {
    r.map_err(|e| e.code)
}

/// Compares `cut_and_put_in` against `cut` followed by `put` on every
/// enumerated state, arm and object argument.
pub fn composition_law() -> CompositionReport {
    let states = enumerate_states();
    let mut comparisons = 0;
    let mut discrepancies = Vec::new();
    for w in &states {
        w.check_invariants().unwrap();
        let mut targets: Vec<String> = w.objects.keys().cloned().collect();
        targets.push("ghost".into());
        for arm in [ManipulatorId::GripperArm, ManipulatorId::ToolArm] {
            for obj in &targets {
                comparisons += 1;
                let fused = outcome(kitchen::cut_and_put_in(w, arm, obj));
                let split = outcome(kitchen::cut(w, arm, obj).and_then(|s| kitchen::put(&s, arm, obj)));
                if fused != split {
                    discrepancies.push(format!(
                        "{arm} {obj}: fused {:?} vs split {:?} on {:?}",
                        fused.as_ref().err(),
                        split.as_ref().err(),
                        w.summary()
                    ));
                }
            }
        }
    }
    CompositionReport { states: states.len(), comparisons, discrepancies }
}

const WORDS: [&str; 8] = ["pepper", "cutting_board", "bowl", "tomato", "oil_jar", "x1", "plate", "green_apple"];

fn random_name<R: Rng>(rng: &mut R) -> String {
    if rng.random_bool(0.7) {
        WORDS[rng.random_range(0..WORDS.len())].to_string()
    } else {
        let len = rng.random_range(1..8);
        let mut s = String::from(char::from(b'a' + rng.random_range(0..26u8)));
        for _ in 1..len {
            let pool = b"abcdefghijklmnopqrstuvwxyz0123456789_";
            s.push(char::from(pool[rng.random_range(0..pool.len())]));
        }
        s
    }
}

/// A well-formed program of 1 to 12 calls over all ten functions.
pub fn random_program<R: Rng>(rng: &mut R) -> ActionProgram {
    let n = rng.random_range(1..=12);
    let calls = (0..n)
        .map(|_| {
            let arm = if rng.random_bool(0.5) { ManipulatorId::GripperArm } else { ManipulatorId::ToolArm };
            match ApiFunction::ALL[rng.random_range(0..ApiFunction::ALL.len())] {
                ApiFunction::OpenGripper => ApiCall::OpenGripper { arm },
                ApiFunction::GetListOfObjects => ApiCall::GetListOfObjects,
                ApiFunction::GetBoundingBoxes => ApiCall::GetBoundingBoxes {
                    objects: (0..rng.random_range(1..4)).map(|_| random_name(rng)).collect(),
                },
                f => ApiCall::manipulation(f, arm, random_name(rng)).unwrap(),
            }
        })
        .collect();
    ActionProgram::new(calls).unwrap()
}

/// Flips, inserts, deletes or duplicates a few bytes, keeping valid UTF-8.
pub fn mutate<R: Rng>(rng: &mut R, text: &str) -> String {
    let mut bytes = text.as_bytes().to_vec();
    const NOISE: &[u8] = b"()'\",_ \n\t#:=abcxyz019\\[]{}";
    for _ in 0..rng.random_range(1..=4) {
        let at = rng.random_range(0..=bytes.len());
        match rng.random_range(0..4) {
            0 if at < bytes.len() => bytes[at] = NOISE[rng.random_range(0..NOISE.len())],
            1 => bytes.insert(at, NOISE[rng.random_range(0..NOISE.len())]),
            2 if at < bytes.len() => {
                bytes.remove(at);
            }
            _ => {
                let end = (at + rng.random_range(0..16)).min(bytes.len());
                let chunk = bytes[at..end].to_vec();
                bytes.splice(at..at, chunk);
            }
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Arbitrary bytes read as (lossy) text.
pub fn random_bytes<R: Rng>(rng: &mut R) -> String {
    let len = rng.random_range(0..256);
    let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Runs the vision campaign on `n` scenes cycling through the fixture
/// recipes, all complete or all missing one seeded ingredient; scene `i`
/// uses fault seed `seed + i` either way.
pub fn vision_campaign(miss_rate: f64, mislabel_rate: f64, n: usize, complete: bool, seed: u64) -> VisionMetrics {
    let mut config = PipelineConfig { seed, ..PipelineConfig::default() };
    config.vision.miss_rate = miss_rate;
    config.vision.mislabel_rate = mislabel_rate;
    let pipeline = Pipeline::new(config).unwrap();
    let recipes: Vec<Recipe> = pipeline.store().recipes().cloned().collect();
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let scenes: Vec<_> = (0..n)
        .map(|i| {
            let r = &recipes[i % recipes.len()];
            let removed = (!complete).then(|| r.ingredients[pick.random_range(0..r.ingredients.len())].clone());
            let omit: Vec<&str> = removed.iter().map(String::as_str).collect();
            let entry = ManifestEntry {
                id: format!("s{i}"),
                recipe: r.name.clone(),
                complete,
                removed: removed.clone(),
                path: None,
            };
            let scene = scene_for_recipe(entry.id.clone(), r, &omit, &[]);
            (entry, r, scene)
        })
        .collect();
    let report = eval_vision(&pipeline, &scenes);
    let group = if complete { "complete" } else { "missing" };
    group_metrics(&report, group).unwrap()
}
