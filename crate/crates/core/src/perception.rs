//! Object listing, grounding, availability and the two vision metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_lang::canonical_object;
use crate::gateway::{ChatMessage, ChatRequest, Gateway, GatewayError, ImageRef, Transcript};
use crate::geometry::{pixel_to_world, BoundingBox, CameraModel, GeometryError, WorldPoint};
use crate::kitchen::{sim_bounding_boxes, sim_list_objects, BoxError};
use crate::scene::Scene;

pub const GROUNDING_PROMPT: &str = "\
List every object lying on the table in this image, one per line, in exactly this form:
name: x_min, y_min, x_max, y_max
Coordinates are pixel positions of the object's bounding box. Use lowercase singular names with \
underscores instead of spaces, and do not list the cutting board or the bowl. If the table holds \
nothing, answer `none`.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    /// The caption.
    pub name: String,
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_position: Option<WorldPoint>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("vision response line {line}: {reason}")]
    ResponseParse { line: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error("invalid error injection: {0}")]
    InvalidInjection(String),
}

/// Simulated detector faults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorInjection {
    /// Probability that an object is dropped.
    pub miss_rate: f64,
    /// Probability that a truly absent required ingredient's caption is put
    /// on some detected object.
    pub mislabel_rate: f64,
    pub seed: u64,
}

impl Default for ErrorInjection {
    fn default() -> Self {
        Self { miss_rate: 0.0, mislabel_rate: 0.0, seed: 0 }
    }
}

impl ErrorInjection {
    pub fn new(miss_rate: f64, mislabel_rate: f64, seed: u64) -> Result<Self, PerceptionError> {
        for (name, r) in [("miss_rate", miss_rate), ("mislabel_rate", mislabel_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(PerceptionError::InvalidInjection(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        Ok(Self { miss_rate, mislabel_rate, seed })
    }

    /// RNG for the scene at `index` in a batch.
    pub fn scene_rng(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index))
    }
}

/// Ground-truth detections with injected faults.
///
/// Draw order is fixed: one uniform draw per table object in name order
/// (dropped when below `miss_rate`), then for each truly absent required
/// ingredient in sorted order one uniform draw and, if it fires, one index
/// draw choosing among detections that still carry their true caption.
pub fn detect_objects_sim<R: Rng>(
    scene: &Scene,
    required: &[String],
    injection: &ErrorInjection,
    rng: &mut R,
) -> Result<Vec<DetectedObject>, PerceptionError> {
    let names = sim_list_objects(&scene.world);
    let boxes = sim_bounding_boxes(&scene.world, &names, &scene.camera)?;
    let mut detections: Vec<DetectedObject> = Vec::with_capacity(names.len());
    for name in &names {
        let keep = rng.random::<f64>() >= injection.miss_rate;
        if keep {
            detections.push(DetectedObject { name: name.clone(), bbox: boxes[name], world_position: None });
        }
    }
    let present: BTreeSet<String> = names.iter().map(|n| match_key(n)).collect();
    let absent: BTreeSet<&String> = required.iter().filter(|r| !present.contains(&match_key(r))).collect();
    let mut relabeled = vec![false; detections.len()];
    for missing in absent {
        if rng.random::<f64>() >= injection.mislabel_rate {
            continue;
        }
        let candidates: Vec<usize> = (0..detections.len()).filter(|&i| !relabeled[i]).collect();
        if candidates.is_empty() {
            continue;
        }
        let pick = candidates[rng.random_range(0..candidates.len())];
        detections[pick].name = missing.clone();
        relabeled[pick] = true;
    }
    Ok(detections)
}

/// Asks a vision model for the table contents.
pub fn detect_objects_remote(
    gateway: &Gateway,
    model: &str,
    image: ImageRef,
    transcript: &mut Transcript,
) -> Result<Vec<DetectedObject>, PerceptionError> {
    let request = ChatRequest::new(model, vec![ChatMessage::user(GROUNDING_PROMPT).with_image(image)]);
    let response = gateway.chat_with_image(&request, transcript)?;
    parse_grounding_response(&response.content)
}

/// Parses `name: x_min, y_min, x_max, y_max` lines.
///
/// Blank lines, code fences and list bullets are skipped, brackets around the
/// numbers are allowed, and a lone `none` means an empty table.
pub fn parse_grounding_response(text: &str) -> Result<Vec<DetectedObject>, PerceptionError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim().trim_start_matches(['-', '*', '•']).trim();
        if line.is_empty() || line.starts_with("```") || line.eq_ignore_ascii_case("none") {
            continue;
        }
        let fail = |reason: String| PerceptionError::ResponseParse { line: i + 1, reason };
        let (name, coords) =
            line.rsplit_once(':').ok_or_else(|| fail(format!("expected `name: box`, got `{line}`")))?;
        let name = canonical_object(name.trim().trim_matches(['"', '\'', '`']))
            .ok_or_else(|| fail(format!("`{}` is not a valid object name", name.trim())))?;
        let numbers: Vec<f64> = coords
            .trim()
            .trim_matches(['[', ']', '(', ')'])
            .split(',')
            .map(|n| n.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| fail(format!("bad coordinate: {e}")))?;
        let [x0, y0, x1, y1] = numbers[..] else {
            return Err(fail(format!("expected 4 coordinates, got {}", numbers.len())));
        };
        if !numbers.iter().all(|v| v.is_finite()) {
            return Err(fail("non-finite coordinate".into()));
        }
        let bbox = BoundingBox::new(x0, y0, x1, y1)
            .ok_or_else(|| fail(format!("box ({x0}, {y0}, {x1}, {y1}) has no area")))?;
        out.push(DetectedObject { name, bbox, world_position: None });
    }
    Ok(out)
}

/// Sets each detection's world position from its box center.
pub fn ground_detections(
    detections: &[DetectedObject],
    camera: &CameraModel,
) -> Result<Vec<DetectedObject>, PerceptionError> {
    detections
        .iter()
        .map(|d| {
            let w = pixel_to_world(camera, d.bbox.center())?;
            Ok(DetectedObject { world_position: Some(w), ..d.clone() })
        })
        .collect()
}

/// Case-folded, with one trailing `s` removed.
pub fn match_key(token: &str) -> String {
    let lower = token.trim().to_lowercase();
    match lower.strip_suffix('s') {
        Some(stem) if !stem.is_empty() => stem.to_string(),
        _ => lower,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityReport {
    pub required: BTreeSet<String>,
    /// Detected captions.
    pub present: BTreeSet<String>,
    pub missing: BTreeSet<String>,
    pub available: bool,
}

pub fn check_availability(required: &[String], detections: &[DetectedObject]) -> AvailabilityReport {
    let present: BTreeSet<String> = detections.iter().map(|d| d.name.clone()).collect();
    let keys: BTreeSet<String> = present.iter().map(|p| match_key(p)).collect();
    let missing: BTreeSet<String> = required.iter().filter(|r| !keys.contains(&match_key(r))).cloned().collect();
    AvailabilityReport { required: required.iter().cloned().collect(), present, available: missing.is_empty(), missing }
}

/// One scene's contribution to [`VisionMetrics`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneScore {
    pub list_correct: bool,
    /// Per required ingredient: was its caption right?
    pub captions: BTreeMap<String, bool>,
}

impl SceneScore {
    pub fn captions_correct(&self) -> usize {
        self.captions.values().filter(|c| **c).count()
    }
}

/// The list is right when the detected caption set equals the true set. A
/// required ingredient's caption is right when it appears exactly once if
/// truly present and not at all if absent; a duplicate means some other
/// object was given its caption.
pub fn score_scene(ground_truth: &[String], required: &[String], detections: &[DetectedObject]) -> SceneScore {
    let truth: BTreeSet<String> = ground_truth.iter().map(|n| match_key(n)).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for d in detections {
        *counts.entry(match_key(&d.name)).or_default() += 1;
    }
    let detected: BTreeSet<String> = counts.keys().cloned().collect();
    let list_correct = detected == truth && counts.values().all(|&c| c == 1);
    let captions = required
        .iter()
        .map(|r| {
            let key = match_key(r);
            let seen = counts.get(&key).copied().unwrap_or(0);
            let ok = if truth.contains(&key) { seen == 1 } else { seen == 0 };
            (r.clone(), ok)
        })
        .collect();
    SceneScore { list_correct, captions }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VisionMetrics {
    pub scenes: usize,
    pub list_accuracy: f64,
    pub caption_accuracy: f64,
}

impl VisionMetrics {
    /// List accuracy over scenes; caption accuracy over (scene, ingredient) pairs.
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a SceneScore>) -> Self {
        let (mut n, mut lists, mut right, mut pairs) = (0usize, 0usize, 0usize, 0usize);
        for s in scores {
            n += 1;
            lists += usize::from(s.list_correct);
            right += s.captions_correct();
            pairs += s.captions.len();
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self { scenes: n, list_accuracy: ratio(lists, n), caption_accuracy: ratio(right, pairs) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelPoint;
    use crate::kitchen::{SimObject, WorldState};
    use crate::scene::{fixture_camera, slot, DEFAULT_BOARD, DEFAULT_BOWL, DEFAULT_GRIPPER_HOME, DEFAULT_TOOL_HOME};

    fn scene(names: &[&str]) -> Scene {
        let objects = names.iter().enumerate().map(|(i, n)| SimObject::ingredient(*n, slot(i)));
        let world =
            WorldState::new(DEFAULT_BOARD, DEFAULT_BOWL, DEFAULT_GRIPPER_HOME, DEFAULT_TOOL_HOME, objects).unwrap();
        Scene { id: "t".into(), camera: fixture_camera(), world, image: None }
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn names(d: &[DetectedObject]) -> Vec<&str> {
        d.iter().map(|d| d.name.as_str()).collect()
    }

    #[test]
    fn clean_detection() {
        let s = scene(&["pepper", "tomato"]);
        let d = detect_objects_sim(&s, &[], &ErrorInjection::default(), &mut ErrorInjection::default().scene_rng(0))
            .unwrap();
        assert_eq!(names(&d), ["pepper", "tomato"]);
    }

    #[test]
    fn miss_rate_one_drops_everything() {
        let s = scene(&["pepper", "tomato"]);
        let inj = ErrorInjection::new(1.0, 0.0, 3).unwrap();
        assert!(detect_objects_sim(&s, &[], &inj, &mut inj.scene_rng(0)).unwrap().is_empty());
    }

    #[test]
    fn seeded_drops_follow_the_draw_order() {
        let s = scene(&["apple", "banana", "grape", "pear"]);
        let inj = ErrorInjection::new(0.5, 0.0, 42).unwrap();
        let got = detect_objects_sim(&s, &[], &inj, &mut inj.scene_rng(7)).unwrap();
        // replay the documented draw sequence by hand
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let want: Vec<&str> =
            ["apple", "banana", "grape", "pear"].into_iter().filter(|_| rng.random::<f64>() >= 0.5).collect();
        assert_eq!(names(&got), want);
        assert_eq!(got, detect_objects_sim(&s, &[], &inj, &mut inj.scene_rng(7)).unwrap());
    }

    #[test]
    fn mislabel_uses_an_absent_caption() {
        let s = scene(&["cucumber", "tomato"]);
        let inj = ErrorInjection::new(0.0, 1.0, 1).unwrap();
        let required = strings(&["cucumber", "tomato", "pepper"]);
        let d = detect_objects_sim(&s, &required, &inj, &mut inj.scene_rng(0)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.iter().filter(|o| o.name == "pepper").count(), 1);
        let score = score_scene(&s.ground_truth(), &required, &d);
        assert!(!score.list_correct);
        assert_eq!(score.captions_correct(), 1);
    }

    #[test]
    fn grounding_recovers_positions() {
        let s = scene(&["pepper", "tomato", "cucumber"]);
        let d = detect_objects_sim(&s, &[], &ErrorInjection::default(), &mut ErrorInjection::default().scene_rng(0))
            .unwrap();
        for g in ground_detections(&d, &s.camera).unwrap() {
            let truth = s.world.position_of(&g.name).unwrap();
            assert!(g.world_position.unwrap().distance(&truth) < 1e-6);
        }
    }

    #[test]
    fn identity_camera_grounding() {
        let d = DetectedObject {
            name: "x".into(),
            bbox: BoundingBox::centered(PixelPoint::new(0.3, -0.2), 0.1, 0.1).unwrap(),
            world_position: None,
        };
        let g = ground_detections(&[d], &CameraModel::identity()).unwrap();
        let w = g[0].world_position.unwrap();
        assert!(w.distance(&WorldPoint::new(0.3, -0.2, 1.0)) < 1e-12);
    }

    #[test]
    fn availability_set_difference() {
        let required = strings(&["cucumber", "tomato", "pepper"]);
        let d: Vec<DetectedObject> = ["cucumbers", "tomato"]
            .iter()
            .map(|n| DetectedObject {
                name: n.to_string(),
                bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                world_position: None,
            })
            .collect();
        let r = check_availability(&required, &d);
        assert_eq!(r.missing, BTreeSet::from(["pepper".to_string()]));
        assert!(!r.available);
        assert!(check_availability(&strings(&["cucumber"]), &d).available);
    }

    #[test]
    fn scoring_rules() {
        let truth = strings(&["a", "b", "c"]);
        let det = |n: &[&str]| -> Vec<DetectedObject> {
            n.iter()
                .map(|n| DetectedObject {
                    name: n.to_string(),
                    bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                    world_position: None,
                })
                .collect()
        };
        let perfect = score_scene(&truth, &truth, &det(&["a", "b", "c"]));
        assert!(perfect.list_correct);
        assert_eq!(perfect.captions_correct(), 3);
        let dropped = score_scene(&truth, &truth, &det(&["a", "c"]));
        assert!(!dropped.list_correct);
        assert_eq!(dropped.captions, BTreeMap::from([("a".into(), true), ("b".into(), false), ("c".into(), true)]));
        let m = VisionMetrics::from_scores([&perfect, &dropped]);
        assert_eq!(m.list_accuracy, 0.5);
        assert!((m.caption_accuracy - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn grounding_parser() {
        let text = "```\n- pepper: 10, 20, 30, 40\nBell Pepper: [1.5, 2, 3, 4]\n\n```";
        let d = parse_grounding_response(text).unwrap();
        assert_eq!(names(&d), ["pepper", "bell_pepper"]);
        assert_eq!(d[1].bbox, BoundingBox::new(1.5, 2.0, 3.0, 4.0).unwrap());
        assert!(parse_grounding_response("none").unwrap().is_empty());
        for bad in ["pepper 1 2 3 4", "pepper: 1, 2, 3", "pepper: 5, 5, 5, 9", "pepper: a, b, c, d", "3x: 1,2,3,4"] {
            assert!(
                matches!(parse_grounding_response(bad), Err(PerceptionError::ResponseParse { line: 1, .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn injection_rates_validated() {
        assert!(ErrorInjection::new(1.5, 0.0, 0).is_err());
        assert!(ErrorInjection::new(0.0, -0.1, 0).is_err());
    }
}
