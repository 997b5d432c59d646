//! Evaluation campaigns and the file-level commands behind the CLI.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_lang::{parse_program, validate_against_scene, SceneReport, ValidationError};
use crate::gateway::Transcript;
use crate::geometry::{round_trip_residual, CameraModel, GeometryError};
use crate::kitchen::{execute_program, Execution};
use crate::orchestrator::{Outcome, Pipeline, Stage};
use crate::perception::{score_scene, SceneScore, VisionMetrics};
use crate::rag::Recipe;
use crate::scene::{scene_for_recipe, Scene, SceneLoadError};

/// Exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when the geometry residual check fails.
pub const EXIT_GEOMETRY: i32 = 1;
/// Residual bound for `geom-check`, meters.
pub const GEOMETRY_TOLERANCE: f64 = 1e-6;

/// Request phrasings; `{}` is the lowercase recipe name. Each one is checked
/// to retrieve its recipe under the fallback embedder, which some wordings
/// (e.g. with "for") do not.
pub const PHRASINGS: [&str; 12] = [
    "please make me a {}",
    "Could you prepare a {}?",
    "I would like a {}.",
    "Could you make me a {}?",
    "I'm hungry, can you make a {}?",
    "Can I get a {}?",
    "Prepare a {}, please.",
    "Let's have a {} today.",
    "Cook me a {}.",
    "I want to eat a {}.",
    "Would you fix me a {}?",
    "How about a {}?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: usize,
    /// Request text or scene id.
    pub case: String,
    pub recipe: String,
    /// Recipe name for code generation; `complete` or `missing` for vision.
    pub group: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list_correct: Option<bool>,
    #[serde(default)]
    pub captions_correct: usize,
    #[serde(default)]
    pub captions_total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub rows: usize,
    pub success_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub overall: GroupAggregate,
    pub by_group: BTreeMap<String, GroupAggregate>,
}

fn aggregate_group<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> GroupAggregate {
    let (mut n, mut ok, mut scored, mut lists, mut right, mut pairs) = (0, 0, 0, 0, 0, 0);
    for r in rows {
        n += 1;
        ok += usize::from(r.success);
        if let Some(l) = r.list_correct {
            scored += 1;
            lists += usize::from(l);
        }
        right += r.captions_correct;
        pairs += r.captions_total;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    GroupAggregate {
        rows: n,
        success_rate: ratio(ok, n),
        list_accuracy: (scored > 0).then(|| ratio(lists, scored)),
        caption_accuracy: (pairs > 0).then(|| ratio(right, pairs)),
    }
}

pub fn aggregate(rows: &[EvalRow]) -> Aggregates {
    let groups: BTreeSet<&str> = rows.iter().map(|r| r.group.as_str()).collect();
    Aggregates {
        overall: aggregate_group(rows),
        by_group: groups
            .into_iter()
            .map(|g| (g.to_string(), aggregate_group(rows.iter().filter(|r| r.group == g))))
            .collect(),
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report parse error: {0}")]
    Parse(String),
    #[error("report aggregates do not match its rows")]
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub campaign: String,
    /// How success and the metrics were operationalized for this run.
    pub notes: Vec<String>,
    pub config: serde_json::Value,
    pub rows: Vec<EvalRow>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    fn new(campaign: &str, notes: Vec<String>, config: serde_json::Value, rows: Vec<EvalRow>) -> Self {
        let aggregates = aggregate(&rows);
        Self { campaign: campaign.to_string(), notes, config, rows, aggregates }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Parses a report and checks its aggregates against its rows.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let r: Self = serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))?;
        if aggregate(&r.rows) != r.aggregates {
            return Err(ReportError::Inconsistent);
        }
        Ok(r)
    }

    pub fn rows_jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("row serializes") + "\n").collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "campaign: {}", self.campaign);
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let _ = writeln!(out, "{:<24} {:>6} {:>10} {:>10} {:>10}", "group", "rows", "success", "list", "caption");
        let mut line = |name: &str, g: &GroupAggregate| {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>10} {:>10} {:>10}",
                name,
                g.rows,
                pct(Some(g.success_rate)),
                pct(g.list_accuracy),
                pct(g.caption_accuracy)
            );
        };
        for (name, g) in &self.aggregates.by_group {
            line(name, g);
        }
        line("overall", &self.aggregates.overall);
        out
    }
}

fn outcome_stage(o: &Outcome) -> Option<String> {
    let stage = match o {
        Outcome::Completed => return None,
        Outcome::Refused { .. } => "availability",
        Outcome::PlanParseFailed { .. } => "plan",
        Outcome::CodeParseFailed { .. } => "codegen",
        Outcome::ExecutionFailed { .. } => "execute",
        Outcome::GoalNotMet { .. } => "goal",
        Outcome::BackendFailed { stage, .. } => match stage {
            Stage::Retrieve => "retrieve",
            Stage::Perceive => "perceive",
            Stage::Plan => "plan",
            Stage::Codegen => "codegen",
        },
    };
    Some(stage.to_string())
}

/// Requests for the code-generation campaign: `n / 3` per recipe in corpus
/// order, with the remainder going to the first recipe, each phrased with a
/// seeded draw from [`PHRASINGS`].
pub fn codegen_requests(recipes: &[Recipe], n: usize, seed: u64) -> Vec<(String, String)> {
    if recipes.is_empty() {
        return Vec::new();
    }
    let per = n / recipes.len();
    let extra = n % recipes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (i, r) in recipes.iter().enumerate() {
        let count = per + if i == 0 { extra } else { 0 };
        for _ in 0..count {
            let template = PHRASINGS[rng.random_range(0..PHRASINGS.len())];
            out.push((r.name.clone(), template.replace("{}", &r.name.to_lowercase())));
        }
    }
    out
}

/// Runs each request on a complete scene for its recipe. Success means the
/// session completed: parsed, validated and, when execution is on, executed
/// to the recipe goal.
pub fn eval_codegen(pipeline: &Pipeline, requests: &[(String, String)]) -> EvalReport {
    let scenes: BTreeMap<String, Scene> = pipeline
        .store()
        .recipes()
        .map(|r| (r.name.clone(), scene_for_recipe(r.name.to_lowercase().replace(' ', "_"), r, &[], &[])))
        .collect();
    let mut rows = Vec::with_capacity(requests.len());
    for (i, (recipe, request)) in requests.iter().enumerate() {
        let (outcome, stage) = match scenes.get(recipe) {
            Some(scene) => {
                let trace = pipeline.handle_request_at(request, scene, i as u64);
                let o = trace.outcome().clone();
                (o.label().to_string(), outcome_stage(&o))
            }
            None => ("unknown_recipe".to_string(), Some("setup".to_string())),
        };
        rows.push(EvalRow {
            id: i + 1,
            case: request.clone(),
            recipe: recipe.clone(),
            group: recipe.clone(),
            success: stage.is_none(),
            outcome,
            failed_stage: stage,
            list_correct: None,
            captions_correct: 0,
            captions_total: 0,
        });
    }
    let mut notes = vec![if pipeline.config().pipeline.execute {
        "success = plan and program parse, validate against the scene, execute, and meet the recipe goal".to_string()
    } else {
        "success = plan and program parse and validate against the scene (execution disabled)".to_string()
    }];
    let mut per_recipe: BTreeMap<&str, usize> = BTreeMap::new();
    for (recipe, _) in requests {
        *per_recipe.entry(recipe.as_str()).or_default() += 1;
    }
    if per_recipe.values().min() != per_recipe.values().max() {
        notes.push("requests are not split evenly across recipes".to_string());
    }
    EvalReport::new("eval-codegen", notes, config_snapshot(pipeline), rows)
}

fn config_snapshot(pipeline: &Pipeline) -> serde_json::Value {
    serde_json::to_value(pipeline.config()).expect("config serializes")
}

/// One vision-campaign scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub recipe: String,
    pub complete: bool,
    /// Ingredient left out of a generated scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed: Option<String>,
    /// Scene document; when absent the scene is generated from the recipe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    #[serde(default, rename = "scene")]
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("manifest entry `{0}` names an unknown recipe `{1}`")]
    UnknownRecipe(String, String),
    #[error("manifest entry `{0}`: {1}")]
    Scene(String, SceneLoadError),
    #[error("manifest entry `{0}` removes `{1}`, which the recipe does not use")]
    BadRemoval(String, String),
}

impl SceneManifest {
    /// `n` scenes cycling through the recipes; the first half complete, the
    /// second half each missing one seeded-random ingredient.
    pub fn generate(recipes: &[Recipe], n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half = n.div_ceil(2);
        let scenes = (0..n)
            .map(|i| {
                let r = &recipes[i % recipes.len()];
                let complete = i < half;
                let removed = (!complete).then(|| r.ingredients[rng.random_range(0..r.ingredients.len())].clone());
                let tag = if complete { "complete" } else { "missing" };
                ManifestEntry {
                    id: format!("scene-{:05}-{tag}", i + 1),
                    recipe: r.name.clone(),
                    complete,
                    removed,
                    path: None,
                }
            })
            .collect();
        Self { scenes }
    }

    pub fn from_toml(text: &str) -> Result<Self, ManifestError> {
        toml::from_str(text).map_err(|e| ManifestError::Parse(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Loads or builds every scene. Paths resolve against `base_dir`.
    pub fn resolve<'a>(
        &self,
        recipes: impl Fn(&str) -> Option<&'a Recipe>,
        base_dir: Option<&Path>,
    ) -> Result<Vec<(ManifestEntry, &'a Recipe, Scene)>, ManifestError> {
        let mut out = Vec::with_capacity(self.scenes.len());
        for e in &self.scenes {
            let recipe =
                recipes(&e.recipe).ok_or_else(|| ManifestError::UnknownRecipe(e.id.clone(), e.recipe.clone()))?;
            let scene = match &e.path {
                Some(p) => {
                    let full = base_dir.map_or(p.clone(), |d| d.join(p));
                    Scene::load(&full).map_err(|err| ManifestError::Scene(e.id.clone(), err))?
                }
                None => {
                    let omit: Vec<&str> = e.removed.iter().map(String::as_str).collect();
                    if let Some(r) = omit.first().filter(|r| !recipe.ingredients.iter().any(|i| i == *r)) {
                        return Err(ManifestError::BadRemoval(e.id.clone(), r.to_string()));
                    }
                    scene_for_recipe(e.id.clone(), recipe, &omit, &[])
                }
            };
            out.push((e.clone(), recipe, scene));
        }
        Ok(out)
    }
}

/// Detects and scores every manifest scene with the pipeline's vision
/// settings; scene `i` draws faults from seed `config.seed + i`.
pub fn eval_vision(pipeline: &Pipeline, scenes: &[(ManifestEntry, &Recipe, Scene)]) -> EvalReport {
    let mut rows = Vec::with_capacity(scenes.len());
    for (i, (entry, recipe, scene)) in scenes.iter().enumerate() {
        let mut transcript = Transcript::new();
        let detected = pipeline.detect(scene, &recipe.ingredients, i as u64, &mut transcript);
        let group = if entry.complete { "complete" } else { "missing" }.to_string();
        let row = match detected {
            Ok(d) => {
                let s: SceneScore = score_scene(&scene.ground_truth(), &recipe.ingredients, &d);
                EvalRow {
                    id: i + 1,
                    case: entry.id.clone(),
                    recipe: recipe.name.clone(),
                    group,
                    outcome: "scored".into(),
                    failed_stage: None,
                    success: true,
                    list_correct: Some(s.list_correct),
                    captions_correct: s.captions_correct(),
                    captions_total: s.captions.len(),
                }
            }
            Err(e) => EvalRow {
                id: i + 1,
                case: entry.id.clone(),
                recipe: recipe.name.clone(),
                group,
                outcome: format!("error: {e}"),
                failed_stage: Some("perceive".into()),
                success: false,
                list_correct: Some(false),
                captions_correct: 0,
                captions_total: recipe.ingredients.len(),
            },
        };
        rows.push(row);
    }
    let notes = vec![
        "list accuracy: detected caption set equals the true object set".to_string(),
        "caption accuracy: per required ingredient, detected exactly once if present and never if absent".to_string(),
        "perception errors count as incorrect lists and captions".to_string(),
    ];
    EvalReport::new("eval-vision", notes, config_snapshot(pipeline), rows)
}

/// Metrics of one report group, in [`VisionMetrics`] form.
pub fn group_metrics(report: &EvalReport, group: &str) -> Option<VisionMetrics> {
    let g = report.aggregates.by_group.get(group)?;
    Some(VisionMetrics {
        scenes: g.rows,
        list_accuracy: g.list_accuracy.unwrap_or(0.0),
        caption_accuracy: g.caption_accuracy.unwrap_or(0.0),
    })
}

#[derive(Debug, Error)]
pub enum SimExecError {
    #[error("{0}")]
    Parse(ValidationError),
    #[error("{} scene validation error(s)", .0.violations.len())]
    Validation(SceneReport),
}

/// Parses, validates against the scene's objects, then executes.
pub fn sim_exec(source: &str, scene: &Scene) -> Result<Execution, SimExecError> {
    let program = parse_program(source).map_err(SimExecError::Parse)?;
    let known: BTreeSet<String> = scene.world.objects.keys().cloned().collect();
    let report = validate_against_scene(&program, &known);
    if !report.is_clean() {
        return Err(SimExecError::Validation(report));
    }
    Ok(execute_program(&scene.world, &program))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomCheck {
    pub max_residual: f64,
    pub grid_points: usize,
    pub passed: bool,
}

pub const GEOM_GRID_STEPS: usize = 21;

pub fn geom_check(model: &CameraModel) -> Result<GeomCheck, GeometryError> {
    let max_residual = round_trip_residual(model, GEOM_GRID_STEPS)?;
    Ok(GeomCheck {
        max_residual,
        grid_points: GEOM_GRID_STEPS * GEOM_GRID_STEPS,
        passed: max_residual < GEOMETRY_TOLERANCE,
    })
}
