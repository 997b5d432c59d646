//! The request workflow: retrieve, perceive, gate, plan, generate code,
//! validate, execute and check the goal, all recorded in a [`SessionTrace`].

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_lang::{
    parse_plan, parse_program, validate_against_scene, ActionProgram, ApiFunction, PlanDocument, SceneReport,
    ValidationError, PLAN_END_TAG, PLAN_START_TAG,
};
use crate::gateway::{
    BackendConfig, ChatMessage, ChatRequest, Gateway, GatewayError, ImageRef, MockScenario, RemoteConfig, RetryPolicy,
    Transcript, TranscriptEntry,
};
use crate::kitchen::{execute_program, ExecutionFailure, Location, TraceEvent, WorldState};
use crate::perception::{
    check_availability, detect_objects_remote, detect_objects_sim, ground_detections, AvailabilityReport,
    DetectedObject, ErrorInjection, PerceptionError,
};
use crate::rag::{fixture_recipes, load_recipes, Preparation, Recipe, RecipeStore, RetrievalResult};
use crate::scene::Scene;

const PLANNER_V1: &str = include_str!("../assets/prompts/planner_v1.txt");
const CODEGEN_V1: &str = include_str!("../assets/prompts/codegen_v1.txt");
const MOCK_SALADS: &str = include_str!("../assets/mock_salads.toml");

const PLANNER_SLOTS: [&str; 7] = ["request", "recipe_name", "ingredients", "steps", "objects", "start_tag", "end_tag"];
const CODEGEN_SLOTS: [&str; 4] = ["api", "example_plan", "example_code", "plan"];

/// The worked example shown to the code generator.
pub const EXAMPLE_PLAN: &str = "[start of plan]
1. Move the gripper arm to the pepper and grasp it.
2. Carry the pepper to the cutting board and release it.
3. Move the tool arm to the cutting board.
4. Cut the pepper and put the pieces in the bowl.
[end of plan]";

pub const EXAMPLE_CODE: &str = "move_to_object('gripper', 'pepper')
grasp('gripper', 'pepper')
move_to_object('gripper', 'cutting_board')
open_gripper('gripper')
move_to_object('tool', 'cutting_board')
cut('tool', 'pepper')
put('tool', 'pepper')";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })
}

/// Prompt templates with `{{name}}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    planner: String,
    codegen: String,
}

impl Templates {
    pub fn builtin() -> Self {
        Self::new(PLANNER_V1.to_string(), CODEGEN_V1.to_string()).expect("shipped templates are complete")
    }

    /// Every slot must appear and no unknown slot may.
    pub fn new(planner: String, codegen: String) -> Result<Self, ConfigError> {
        check_slots("planner", &planner, &PLANNER_SLOTS)?;
        check_slots("codegen", &codegen, &CODEGEN_SLOTS)?;
        Ok(Self { planner, codegen })
    }
}

fn check_slots(which: &str, template: &str, slots: &[&str]) -> Result<(), ConfigError> {
    let mut rest = template;
    let mut found = BTreeSet::new();
    while let Some(i) = rest.find("{{") {
        let after = &rest[i + 2..];
        let Some(j) = after.find("}}") else {
            return Err(ConfigError::Invalid(format!("{which} template has an unclosed `{{{{`")));
        };
        let name = &after[..j];
        if !slots.contains(&name) {
            return Err(ConfigError::Invalid(format!("{which} template has unknown slot `{name}`")));
        }
        found.insert(name);
        rest = &after[j + 2..];
    }
    if let Some(missing) = slots.iter().find(|s| !found.contains(*s)) {
        return Err(ConfigError::Invalid(format!("{which} template lacks slot `{missing}`")));
    }
    Ok(())
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// One line per API function: signature, then description.
pub fn api_reference() -> String {
    ApiFunction::ALL.iter().map(|f| format!("- {}: {}", f.signature(), f.description())).collect::<Vec<_>>().join("\n")
}

pub fn render_planner_prompt(templates: &Templates, request: &str, recipe: &Recipe, objects: &[String]) -> String {
    let steps: Vec<String> = recipe.steps.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect();
    fill(
        &templates.planner,
        &[
            ("request", request.trim()),
            ("recipe_name", &recipe.name),
            ("ingredients", &recipe.ingredients.join(", ")),
            ("steps", &steps.join("\n")),
            ("objects", &objects.join(", ")),
            ("start_tag", PLAN_START_TAG),
            ("end_tag", PLAN_END_TAG),
        ],
    )
}

pub fn render_codegen_prompt(templates: &Templates, plan: &PlanDocument) -> String {
    fill(
        &templates.codegen,
        &[
            ("api", &api_reference()),
            ("example_plan", EXAMPLE_PLAN),
            ("example_code", EXAMPLE_CODE),
            ("plan", &plan.to_text()),
        ],
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "remote" => Ok(BackendKind::Remote),
            other => Err(format!("unknown backend `{other}` (expected mock or remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    pub planner_model: String,
    pub codegen_model: String,
    #[serde(default)]
    pub vision_model: Option<String>,
    #[serde(default)]
    pub embedding_model: Option<String>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    RetryPolicy::default().retries
}

fn default_backoff() -> u64 {
    RetryPolicy::default().backoff_ms
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisionSource {
    /// Simulator ground truth with optional injected faults.
    #[default]
    Sim,
    Vlm,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionSection {
    #[serde(default)]
    pub source: VisionSource,
    #[serde(default)]
    pub miss_rate: f64,
    #[serde(default)]
    pub mislabel_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    /// Extra planner attempts when the plan fails to parse.
    #[serde(default)]
    pub plan_retries: u32,
    /// When false, sessions stop after validation.
    #[serde(default = "yes")]
    pub execute: bool,
    #[serde(default)]
    pub recipes: Option<PathBuf>,
    #[serde(default)]
    pub planner_template: Option<PathBuf>,
    #[serde(default)]
    pub codegen_template: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { plan_retries: 0, execute: true, recipes: None, planner_template: None, codegen_template: None }
    }
}

/// Relative paths inside are resolved against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mock_scenario: Option<PathBuf>,
    #[serde(default)]
    pub remote: Option<RemoteSection>,
    #[serde(default)]
    pub vision: VisionSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        if let Some(dir) = base_dir {
            for p in [
                &mut c.mock_scenario,
                &mut c.pipeline.recipes,
                &mut c.pipeline.planner_template,
                &mut c.pipeline.codegen_template,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        c.injection()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&read(path)?, path.parent())
    }

    pub fn injection(&self) -> Result<ErrorInjection, ConfigError> {
        ErrorInjection::new(self.vision.miss_rate, self.vision.mislabel_rate, self.seed)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn gateway(&self) -> Result<Gateway, ConfigError> {
        match self.backend {
            BackendKind::Mock => {
                let text = match &self.mock_scenario {
                    Some(p) => read(p)?,
                    None => MOCK_SALADS.to_string(),
                };
                let scenario = MockScenario::from_toml(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(Gateway::mock(scenario))
            }
            BackendKind::Remote => {
                let r = self
                    .remote
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("backend = \"remote\" needs a [remote] table".into()))?;
                Gateway::new(BackendConfig::Remote(RemoteConfig {
                    base_url: r.base_url.clone(),
                    api_key_env: r.api_key_env.clone(),
                    timeout_secs: r.timeout_secs,
                    retry: RetryPolicy { retries: r.retries, backoff_ms: r.backoff_ms },
                    embedding_model: r.embedding_model.clone(),
                }))
                .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    fn models(&self) -> Result<Models, ConfigError> {
        match (self.backend, &self.remote) {
            (BackendKind::Remote, Some(r)) => {
                if self.vision.source == VisionSource::Vlm && r.vision_model.is_none() {
                    return Err(ConfigError::Invalid("vision source vlm needs remote.vision_model".into()));
                }
                Ok(Models {
                    planner: r.planner_model.clone(),
                    codegen: r.codegen_model.clone(),
                    vision: r.vision_model.clone().unwrap_or_default(),
                })
            }
            _ => Ok(Models {
                planner: "mock-planner".into(),
                codegen: "mock-codegen".into(),
                vision: "mock-vision".into(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
struct Models {
    planner: String,
    codegen: String,
    vision: String,
}

/// Which bowl contents a finished recipe requires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub items: Vec<(String, Preparation)>,
    pub mixed: bool,
}

impl GoalSpec {
    pub fn from_recipe(recipe: &Recipe) -> Self {
        Self {
            items: recipe.ingredients.iter().map(|i| (i.clone(), recipe.preparation_of(i))).collect(),
            mixed: recipe.mix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalReport {
    pub satisfied: bool,
    pub diagnostics: Vec<String>,
}

pub fn goal_check(w: &WorldState, goal: &GoalSpec) -> GoalReport {
    let mut diagnostics = Vec::new();
    for (name, prep) in &goal.items {
        if *prep == Preparation::Pour {
            if !w.bowl_contents.iter().any(|c| c == name) {
                diagnostics.push(format!("{name} has not been poured into the bowl"));
            }
            continue;
        }
        let Some(obj) = w.objects.get(name) else {
            diagnostics.push(format!("{name} is not in the scene"));
            continue;
        };
        if obj.location != Location::Bowl {
            diagnostics.push(format!("{name} is at {:?}, not in the bowl", obj.location));
        } else if *prep == Preparation::Cut && !obj.state.is_cut() {
            diagnostics.push(format!("{name} is in the bowl but not cut"));
        } else if *prep == Preparation::Whole && obj.state.is_cut() {
            diagnostics.push(format!("{name} should be whole but was cut"));
        }
    }
    if w.bowl_mixed != goal.mixed {
        let want = if goal.mixed { "mixed" } else { "left unmixed" };
        diagnostics.push(format!("bowl should be {want}"));
    }
    GoalReport { satisfied: diagnostics.is_empty(), diagnostics }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieve,
    Perceive,
    Plan,
    Codegen,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Retrieve => "retrieve",
            Stage::Perceive => "perceive",
            Stage::Plan => "plan",
            Stage::Codegen => "codegen",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Refused { missing: Vec<String> },
    PlanParseFailed { error: ValidationError },
    CodeParseFailed { errors: Vec<ValidationError> },
    ExecutionFailed { call_index: usize, error: String },
    GoalNotMet { diagnostics: Vec<String> },
    BackendFailed { stage: Stage, error: String },
}

impl Outcome {
    /// Process exit status for this outcome.
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Completed => 0,
            Outcome::Refused { .. } => 3,
            Outcome::PlanParseFailed { .. } => 4,
            Outcome::CodeParseFailed { .. } => 5,
            Outcome::ExecutionFailed { .. } => 6,
            Outcome::GoalNotMet { .. } => 7,
            Outcome::BackendFailed { .. } => 8,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Refused { .. } => "refused",
            Outcome::PlanParseFailed { .. } => "plan_parse_failed",
            Outcome::CodeParseFailed { .. } => "code_parse_failed",
            Outcome::ExecutionFailed { .. } => "execution_failed",
            Outcome::GoalNotMet { .. } => "goal_not_met",
            Outcome::BackendFailed { .. } => "backend_failed",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Completed => f.write_str("completed"),
            Outcome::Refused { missing } => write!(f, "refused: missing {}", missing.join(", ")),
            Outcome::PlanParseFailed { error } => write!(f, "plan parse failed: {error}"),
            Outcome::CodeParseFailed { errors } => {
                let all: Vec<String> = errors.iter().map(ToString::to_string).collect();
                write!(f, "code rejected: {}", all.join("; "))
            }
            Outcome::ExecutionFailed { call_index, error } => {
                write!(f, "execution failed at call {call_index}: {error}")
            }
            Outcome::GoalNotMet { diagnostics } => write!(f, "goal not met: {}", diagnostics.join("; ")),
            Outcome::BackendFailed { stage, error } => write!(f, "{stage} backend failed: {error}"),
        }
    }
}

/// One line of a session trace.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Request { text: String },
    InitialState { scene_id: String, state: WorldState },
    Retrieval { results: Vec<RetrievalResult> },
    Detection { objects: Vec<DetectedObject> },
    Availability { report: AvailabilityReport },
    Prompt { stage: Stage, text: String },
    ModelCall { entry: TranscriptEntry },
    Plan { plan: PlanDocument },
    ParseError { stage: Stage, error: ValidationError },
    Program { source: String, program: ActionProgram },
    SceneValidation { report: SceneReport },
    Execution { event: TraceEvent },
    ExecutionFailure { failure: ExecutionFailure },
    GoalCheck { report: GoalReport },
    FinalState { state: WorldState },
    Outcome { outcome: Outcome },
}

/// Append-only record of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    records: Vec<TraceRecord>,
}

impl SessionTrace {
    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn outcome(&self) -> &Outcome {
        self.records
            .iter()
            .rev()
            .find_map(|r| match r {
                TraceRecord::Outcome { outcome } => Some(outcome),
                _ => None,
            })
            .expect("finished sessions carry an outcome")
    }

    pub fn initial_state(&self) -> &WorldState {
        self.records
            .iter()
            .find_map(|r| match r {
                TraceRecord::InitialState { state, .. } => Some(state),
                _ => None,
            })
            .expect("sessions start with the initial state")
    }

    pub fn final_state(&self) -> &WorldState {
        self.records
            .iter()
            .rev()
            .find_map(|r| match r {
                TraceRecord::FinalState { state } => Some(state),
                _ => None,
            })
            .expect("finished sessions carry a final state")
    }

    pub fn transcript(&self) -> Vec<&TranscriptEntry> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::ModelCall { entry } => Some(entry),
                _ => None,
            })
            .collect()
    }

    pub fn program(&self) -> Option<&ActionProgram> {
        self.records.iter().find_map(|r| match r {
            TraceRecord::Program { program, .. } => Some(program),
            _ => None,
        })
    }

    pub fn retrieved(&self) -> Option<&RetrievalResult> {
        self.records.iter().find_map(|r| match r {
            TraceRecord::Retrieval { results } => results.first(),
            _ => None,
        })
    }

    pub fn execution_events(&self) -> Vec<&TraceEvent> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Execution { event } => Some(event),
                _ => None,
            })
            .collect()
    }

    /// Stage of the first model call of each kind, in call order.
    pub fn prompt_stages(&self) -> Vec<Stage> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Prompt { stage, .. } => Some(*stage),
                _ => None,
            })
            .collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records =
            text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

struct Session {
    records: Vec<TraceRecord>,
    transcript: Transcript,
    synced: usize,
}

impl Session {
    fn log(&mut self, record: TraceRecord) {
        self.sync();
        self.records.push(record);
    }

    fn sync(&mut self) {
        for entry in &self.transcript.entries()[self.synced..] {
            self.records.push(TraceRecord::ModelCall { entry: entry.clone() });
        }
        self.synced = self.transcript.len();
    }
}

/// A configured pipeline: gateway, indexed recipes and templates.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    store: RecipeStore,
    templates: Templates,
    models: Models,
    injection: ErrorInjection,
    setup: Transcript,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, ConfigError> {
        let gateway = config.gateway()?;
        Self::with_gateway(config, gateway)
    }

    /// Uses `gateway` instead of the one the config describes.
    pub fn with_gateway(config: PipelineConfig, gateway: Gateway) -> Result<Self, ConfigError> {
        let recipes = match &config.pipeline.recipes {
            Some(p) => load_recipes(&read(p)?).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => fixture_recipes(),
        };
        let templates = match (&config.pipeline.planner_template, &config.pipeline.codegen_template) {
            (None, None) => Templates::builtin(),
            (p, c) => Templates::new(
                p.as_deref().map_or(Ok(PLANNER_V1.to_string()), read)?,
                c.as_deref().map_or(Ok(CODEGEN_V1.to_string()), read)?,
            )?,
        };
        let models = config.models()?;
        let injection = config.injection()?;
        let mut setup = Transcript::new();
        let store = RecipeStore::index(recipes, gateway.clone(), &mut setup)
            .map_err(|e| ConfigError::Invalid(format!("indexing recipes: {e}")))?;
        Ok(Self { config, gateway, store, templates, models, injection, setup })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &RecipeStore {
        &self.store
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    /// Model calls made while building the pipeline (recipe indexing).
    pub fn setup_transcript(&self) -> &Transcript {
        &self.setup
    }

    pub fn handle_request(&self, request: &str, scene: &Scene) -> SessionTrace {
        self.handle_request_at(request, scene, 0)
    }

    /// `scene_index` offsets the perception seed so batches draw independent faults.
    pub fn handle_request_at(&self, request: &str, scene: &Scene, scene_index: u64) -> SessionTrace {
        let mut s = Session { records: Vec::new(), transcript: Transcript::new(), synced: 0 };
        s.log(TraceRecord::Request { text: request.to_string() });
        s.log(TraceRecord::InitialState { scene_id: scene.id.clone(), state: scene.world.clone() });
        let (outcome, state) = self.run(&mut s, request, scene, scene_index);
        s.log(TraceRecord::FinalState { state });
        s.log(TraceRecord::Outcome { outcome });
        SessionTrace { records: s.records }
    }

    fn run(&self, s: &mut Session, request: &str, scene: &Scene, scene_index: u64) -> (Outcome, WorldState) {
        let unchanged = |o: Outcome| (o, scene.world.clone());
        let backend = |stage: Stage, e: &dyn fmt::Display| Outcome::BackendFailed { stage, error: e.to_string() };

        let hits = match self.store.retrieve(request, 1, &mut s.transcript) {
            Ok(h) => h,
            Err(e) => return unchanged(backend(Stage::Retrieve, &e)),
        };
        let recipe = hits[0].recipe.clone();
        s.log(TraceRecord::Retrieval { results: hits });

        let detections = match self.perceive(s, scene, &recipe, scene_index) {
            Ok(d) => d,
            Err(e) => return unchanged(backend(Stage::Perceive, &e)),
        };
        s.log(TraceRecord::Detection { objects: detections.clone() });
        let report = check_availability(&recipe.ingredients, &detections);
        s.log(TraceRecord::Availability { report: report.clone() });
        if !report.available {
            return unchanged(Outcome::Refused { missing: report.missing.into_iter().collect() });
        }

        let objects: Vec<String> = report.present.iter().cloned().collect();
        let plan = match self.plan(s, request, &recipe, &objects) {
            Ok(p) => p,
            Err(o) => return unchanged(o),
        };

        let prompt = render_codegen_prompt(&self.templates, &plan);
        s.log(TraceRecord::Prompt { stage: Stage::Codegen, text: prompt.clone() });
        let code = match self.chat(&self.models.codegen, prompt, &mut s.transcript) {
            Ok(c) => c,
            Err(e) => return unchanged(backend(Stage::Codegen, &e)),
        };
        let program = match parse_program(&code) {
            Ok(p) => p,
            Err(error) => {
                s.log(TraceRecord::ParseError { stage: Stage::Codegen, error: error.clone() });
                return unchanged(Outcome::CodeParseFailed { errors: vec![error] });
            }
        };
        s.log(TraceRecord::Program { source: code, program: program.clone() });
        let known: BTreeSet<String> = objects.into_iter().collect();
        let scene_report = validate_against_scene(&program, &known);
        s.log(TraceRecord::SceneValidation { report: scene_report.clone() });
        if !scene_report.is_clean() {
            return unchanged(Outcome::CodeParseFailed { errors: scene_report.violations });
        }
        if !self.config.pipeline.execute {
            return unchanged(Outcome::Completed);
        }

        let run = execute_program(&scene.world, &program);
        for event in run.trace {
            s.log(TraceRecord::Execution { event });
        }
        if let Some(failure) = run.failure {
            let outcome = Outcome::ExecutionFailed { call_index: failure.call_index, error: failure.error.to_string() };
            s.log(TraceRecord::ExecutionFailure { failure });
            return (outcome, run.state);
        }
        let goal = goal_check(&run.state, &GoalSpec::from_recipe(&recipe));
        s.log(TraceRecord::GoalCheck { report: goal.clone() });
        if goal.satisfied {
            (Outcome::Completed, run.state)
        } else {
            (Outcome::GoalNotMet { diagnostics: goal.diagnostics }, run.state)
        }
    }

    fn perceive(
        &self,
        s: &mut Session,
        scene: &Scene,
        recipe: &Recipe,
        scene_index: u64,
    ) -> Result<Vec<DetectedObject>, PerceptionError> {
        let raw = self.detect(scene, &recipe.ingredients, scene_index, &mut s.transcript)?;
        ground_detections(&raw, &scene.camera)
    }

    /// Runs the configured detector on a scene, without grounding.
    pub fn detect(
        &self,
        scene: &Scene,
        required: &[String],
        scene_index: u64,
        transcript: &mut Transcript,
    ) -> Result<Vec<DetectedObject>, PerceptionError> {
        match self.config.vision.source {
            VisionSource::Sim => {
                let mut rng = self.injection.scene_rng(scene_index);
                detect_objects_sim(scene, required, &self.injection, &mut rng)
            }
            VisionSource::Vlm => {
                let image = match &scene.image {
                    Some(p) => ImageRef::Path(p.clone()),
                    None => ImageRef::Scene(scene.id.clone()),
                };
                detect_objects_remote(&self.gateway, &self.models.vision, image, transcript)
            }
        }
    }

    fn plan(
        &self,
        s: &mut Session,
        request: &str,
        recipe: &Recipe,
        objects: &[String],
    ) -> Result<PlanDocument, Outcome> {
        let prompt = render_planner_prompt(&self.templates, request, recipe, objects);
        let mut attempt = 0;
        loop {
            s.log(TraceRecord::Prompt { stage: Stage::Plan, text: prompt.clone() });
            let text = self
                .chat(&self.models.planner, prompt.clone(), &mut s.transcript)
                .map_err(|e| Outcome::BackendFailed { stage: Stage::Plan, error: e.to_string() })?;
            match parse_plan(&text) {
                Ok(plan) => {
                    s.log(TraceRecord::Plan { plan: plan.clone() });
                    return Ok(plan);
                }
                Err(error) => {
                    s.log(TraceRecord::ParseError { stage: Stage::Plan, error: error.clone() });
                    if attempt >= self.config.pipeline.plan_retries {
                        return Err(Outcome::PlanParseFailed { error });
                    }
                    attempt += 1;
                }
            }
        }
    }

    fn chat(&self, model: &str, prompt: String, transcript: &mut Transcript) -> Result<String, GatewayError> {
        let request = ChatRequest::new(model, vec![ChatMessage::user(prompt)]);
        Ok(self.gateway.chat(&request, transcript)?.content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_lang::{serialize_program, PLAN_END_TAG};
    use crate::gateway::MockRule;
    use crate::kitchen::{ObjectState, BOWL};
    use crate::scene::scene_for_recipe;

    fn pipeline() -> Pipeline {
        Pipeline::new(PipelineConfig::default()).unwrap()
    }

    fn veg() -> Recipe {
        fixture_recipes().remove(0)
    }

    #[test]
    fn planner_prompt_structure() {
        let r = veg();
        let objects = r.ingredients.clone();
        let p = render_planner_prompt(&Templates::builtin(), "salad please", &r, &objects);
        assert!(p.contains(PLAN_START_TAG) && p.contains(PLAN_END_TAG));
        assert!(p.contains("semantic planner"));
        for i in &r.ingredients {
            assert!(p.contains(i.as_str()));
        }
        assert!(!p.contains("{{"));
        assert_eq!(p, render_planner_prompt(&Templates::builtin(), "salad please", &r, &objects));
    }

    #[test]
    fn codegen_prompt_structure() {
        let plan = parse_plan(EXAMPLE_PLAN).unwrap();
        let p = render_codegen_prompt(&Templates::builtin(), &plan);
        for f in ApiFunction::ALL {
            assert!(p.contains(f.name()), "{}", f.name());
        }
        assert!(!p.contains("semantic planner"));
        assert_eq!(p.matches("Example code:").count(), 1);
        assert_eq!(p.matches(EXAMPLE_CODE).count(), 1);
        assert_eq!(p, render_codegen_prompt(&Templates::builtin(), &plan));
    }

    #[test]
    fn worked_example_parses() {
        let prog = parse_program(EXAMPLE_CODE).unwrap();
        assert_eq!(prog.len(), 7);
        assert_eq!(serialize_program(&prog), EXAMPLE_CODE);
        assert_eq!(parse_plan(EXAMPLE_PLAN).unwrap().steps.len(), 4);
    }

    #[test]
    fn template_slots_are_checked() {
        assert!(Templates::new("no slots".into(), CODEGEN_V1.into()).is_err());
        let extra = format!("{PLANNER_V1}{{{{bogus}}}}");
        assert!(Templates::new(extra, CODEGEN_V1.into()).is_err());
    }

    #[test]
    fn vegetable_salad_completes() {
        let r = veg();
        let scene = scene_for_recipe("veg", &r, &[], &[]);
        let trace = pipeline().handle_request("please make me a vegetable salad", &scene);
        assert_eq!(trace.outcome(), &Outcome::Completed, "{}", trace.outcome());
        let w = trace.final_state();
        for i in &r.ingredients {
            assert_eq!(w.objects[i].location, Location::Bowl);
            assert_eq!(w.objects[i].state, ObjectState::Mixed { cut: true });
        }
        assert!(w.bowl_mixed);
        assert_eq!(trace.prompt_stages(), [Stage::Plan, Stage::Codegen]);
    }

    #[test]
    fn every_fixture_salad_completes() {
        let p = pipeline();
        for r in fixture_recipes() {
            let scene = scene_for_recipe(r.name.clone(), &r, &[], &["onion"]);
            let trace = p.handle_request(&r.canonical_request(), &scene);
            assert_eq!(trace.outcome(), &Outcome::Completed, "{}: {}", r.name, trace.outcome());
        }
    }

    #[test]
    fn missing_ingredient_refuses_without_planning() {
        let r = veg();
        let scene = scene_for_recipe("veg", &r, &["pepper"], &[]);
        let trace = pipeline().handle_request("please make me a vegetable salad", &scene);
        assert_eq!(trace.outcome(), &Outcome::Refused { missing: vec!["pepper".into()] });
        assert_eq!(trace.final_state(), &scene.world);
        assert!(trace.prompt_stages().is_empty());
        assert!(trace.transcript().iter().all(|e| e.operation == crate::gateway::Operation::Embed));
    }

    fn scripted(rules: Vec<MockRule>) -> Pipeline {
        let mut base = MockScenario::from_toml(MOCK_SALADS).unwrap();
        let mut all = rules;
        all.append(&mut base.rules);
        Pipeline::with_gateway(PipelineConfig::default(), Gateway::mock(MockScenario::new(all, ""))).unwrap()
    }

    #[test]
    fn unknown_function_is_a_code_failure() {
        let p = scripted(vec![MockRule::contains("code generator", "make_soup('gripper', 'pot')")]);
        let scene = scene_for_recipe("veg", &veg(), &[], &[]);
        let trace = p.handle_request("please make me a vegetable salad", &scene);
        assert!(matches!(trace.outcome(), Outcome::CodeParseFailed { .. }));
        assert_eq!(trace.outcome().exit_code(), 5);
        assert_eq!(trace.final_state(), &scene.world);
    }

    #[test]
    fn untagged_plan_fails_and_retries_when_asked() {
        let rule = || MockRule::contains("semantic planner", "1. just do it");
        let scene = scene_for_recipe("veg", &veg(), &[], &[]);
        let trace = scripted(vec![rule()]).handle_request("vegetable salad", &scene);
        assert!(matches!(trace.outcome(), Outcome::PlanParseFailed { .. }));
        assert_eq!(trace.prompt_stages(), [Stage::Plan]);

        let mut config = PipelineConfig::default();
        config.pipeline.plan_retries = 2;
        let mut base = MockScenario::from_toml(MOCK_SALADS).unwrap();
        base.rules.insert(0, rule());
        let p = Pipeline::with_gateway(config, Gateway::mock(base)).unwrap();
        assert_eq!(p.handle_request("vegetable salad", &scene).prompt_stages(), [Stage::Plan; 3]);
    }

    #[test]
    fn failing_call_reports_its_index() {
        let p = scripted(vec![MockRule::contains("code generator", "grasp('gripper', 'cucumber')")]);
        let scene = scene_for_recipe("veg", &veg(), &[], &[]);
        let trace = p.handle_request("vegetable salad", &scene);
        assert!(matches!(trace.outcome(), Outcome::ExecutionFailed { call_index: 1, .. }), "{}", trace.outcome());
    }

    #[test]
    fn incomplete_program_misses_the_goal() {
        let p = scripted(vec![MockRule::contains("code generator", EXAMPLE_CODE.replace("pepper", "cucumber"))]);
        let scene = scene_for_recipe("veg", &veg(), &[], &[]);
        let Outcome::GoalNotMet { diagnostics } = p.handle_request("vegetable salad", &scene).outcome().clone() else {
            panic!("expected GoalNotMet");
        };
        assert!(diagnostics.iter().any(|d| d.starts_with("tomato")));
        assert!(diagnostics.iter().any(|d| d.contains("mixed")));
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let scene = scene_for_recipe("veg", &veg(), &[], &[]);
        let trace = pipeline().handle_request("vegetable salad", &scene);
        let back = SessionTrace::from_jsonl(&trace.to_jsonl()).unwrap();
        assert_eq!(back.outcome(), trace.outcome());
        assert_eq!(back.final_state(), trace.final_state());
        assert_eq!(back.records().len(), trace.records().len());
    }

    #[test]
    fn goal_check_cases() {
        let r = veg();
        let goal = GoalSpec::from_recipe(&r);
        let scene = scene_for_recipe("veg", &r, &[], &[]);
        let mut w = scene.world.clone();
        for i in &r.ingredients {
            let o = w.objects.get_mut(i).unwrap();
            o.location = Location::Bowl;
            o.state = ObjectState::Mixed { cut: true };
        }
        w.bowl_mixed = true;
        assert!(goal_check(&w, &goal).satisfied);
        w.bowl_mixed = false;
        assert!(!goal_check(&w, &goal).satisfied);
        w.bowl_mixed = true;
        w.objects.get_mut("tomato").unwrap().location = scene.world.objects["tomato"].location;
        let report = goal_check(&w, &goal);
        assert_eq!(report.diagnostics.len(), 1);
        assert!(report.diagnostics[0].starts_with("tomato"));
        assert!(w.objects.contains_key(BOWL));
    }

    #[test]
    fn config_parsing() {
        let c = PipelineConfig::from_toml(
            "backend = \"mock\"\nseed = 7\n[vision]\nmiss_rate = 0.2\n[pipeline]\nrecipes = \"r.toml\"\n",
            Some(Path::new("/cfg")),
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.pipeline.recipes.as_deref(), Some(Path::new("/cfg/r.toml")));
        assert!(PipelineConfig::from_toml("[vision]\nmiss_rate = 2.0\n", None).is_err());
        assert!(PipelineConfig::from_toml("bogus = 1\n", None).is_err());
        let remote = PipelineConfig { backend: BackendKind::Remote, ..PipelineConfig::default() };
        assert!(Pipeline::new(remote).is_err());
    }
}
