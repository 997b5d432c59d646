//! Recipe corpus, embedding index and top-k retrieval.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_lang::canonical_object;
use crate::gateway::{cosine, Gateway, GatewayError, Transcript};

const FIXTURE_RECIPES: &str = include_str!("../assets/recipes.toml");

/// How an ingredient ends up in the bowl.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preparation {
    /// Cut on the board, then moved to the bowl.
    #[default]
    Cut,
    /// Poured from a container of the same name.
    Pour,
    /// Placed in the bowl uncut by the gripper.
    Whole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub ingredients: Vec<String>,
    pub steps: Vec<String>,
    /// Ingredients absent from the map are cut.
    #[serde(default)]
    pub preparation: BTreeMap<String, Preparation>,
    /// Whether the bowl must be tossed at the end.
    #[serde(default = "default_mix")]
    pub mix: bool,
}

fn default_mix() -> bool {
    true
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecipeError {
    #[error("recipe parse error: {0}")]
    Parse(String),
    #[error("duplicate recipe name `{0}`")]
    DuplicateName(String),
    #[error("recipe store is empty")]
    EmptyStore,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding failed: {0}")]
    Embed(#[from] GatewayError),
}

impl Recipe {
    /// Validates and canonicalizes ingredient tokens.
    pub fn new(
        name: impl Into<String>,
        ingredients: Vec<String>,
        steps: Vec<String>,
        preparation: BTreeMap<String, Preparation>,
        mix: bool,
    ) -> Result<Self, RecipeError> {
        let name = name.into().trim().to_string();
        let err = |m: String| Err(RecipeError::Parse(m));
        if name.is_empty() {
            return err("recipe name is empty".into());
        }
        if ingredients.is_empty() {
            return err(format!("recipe `{name}` has no ingredients"));
        }
        if steps.iter().all(|s| s.trim().is_empty()) {
            return err(format!("recipe `{name}` has no steps"));
        }
        let mut tokens = Vec::with_capacity(ingredients.len());
        let mut seen = BTreeSet::new();
        for raw in &ingredients {
            let Some(t) = canonical_object(raw) else {
                return err(format!("recipe `{name}`: `{raw}` is not a valid ingredient token"));
            };
            if !seen.insert(t.clone()) {
                return err(format!("recipe `{name}` lists `{t}` twice"));
            }
            tokens.push(t);
        }
        let mut prep = BTreeMap::new();
        for (raw, p) in preparation {
            match canonical_object(&raw) {
                Some(t) if seen.contains(&t) => {
                    prep.insert(t, p);
                }
                _ => return err(format!("recipe `{name}`: preparation names unknown ingredient `{raw}`")),
            }
        }
        Ok(Self { name, ingredients: tokens, steps, preparation: prep, mix })
    }

    pub fn preparation_of(&self, ingredient: &str) -> Preparation {
        self.preparation.get(ingredient).copied().unwrap_or_default()
    }

    /// Text that gets embedded: name, ingredients, then steps.
    pub fn indexed_text(&self) -> String {
        let mut parts = vec![self.name.clone(), self.ingredients.join(" ")];
        parts.extend(self.steps.iter().cloned());
        parts.join("\n")
    }

    /// The plain request that should retrieve this recipe.
    pub fn canonical_request(&self) -> String {
        format!("please make me a {}", self.name.to_lowercase())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeFile {
    #[serde(default)]
    recipe: Vec<Recipe>,
}

/// Parses a TOML document of `[[recipe]]` tables.
pub fn load_recipes(text: &str) -> Result<Vec<Recipe>, RecipeError> {
    let file: RecipeFile = toml::from_str(text).map_err(|e| RecipeError::Parse(e.message().to_string()))?;
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(file.recipe.len());
    for r in file.recipe {
        let r = Recipe::new(r.name, r.ingredients, r.steps, r.preparation, r.mix)?;
        if !names.insert(r.name.to_lowercase()) {
            return Err(RecipeError::DuplicateName(r.name));
        }
        out.push(r);
    }
    Ok(out)
}

/// The three shipped salads.
pub fn fixture_recipes() -> Vec<Recipe> {
    load_recipes(FIXTURE_RECIPES).expect("fixture corpus parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub recipe: Recipe,
    pub score: f64,
}

/// Immutable once built.
#[derive(Debug, Clone)]
pub struct RecipeStore {
    entries: Vec<(Recipe, Vec<f64>)>,
    embedder: Gateway,
}

impl RecipeStore {
    /// Embeds every recipe's [`Recipe::indexed_text`] in one call.
    pub fn index(recipes: Vec<Recipe>, embedder: Gateway, transcript: &mut Transcript) -> Result<Self, RecipeError> {
        if recipes.is_empty() {
            return Ok(Self { entries: Vec::new(), embedder });
        }
        let texts: Vec<String> = recipes.iter().map(Recipe::indexed_text).collect();
        let vectors = embedder.embed(&texts, transcript)?;
        Ok(Self { entries: recipes.into_iter().zip(vectors).collect(), embedder })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn recipes(&self) -> impl Iterator<Item = &Recipe> {
        self.entries.iter().map(|(r, _)| r)
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|(_, v)| v.as_slice())
    }

    pub fn get(&self, name: &str) -> Option<&Recipe> {
        self.recipes().find(|r| r.name.eq_ignore_ascii_case(name))
    }

    /// Top-k by cosine, best first; equal scores order by name.
    pub fn retrieve(
        &self,
        query: &str,
        k: usize,
        transcript: &mut Transcript,
    ) -> Result<Vec<RetrievalResult>, RecipeError> {
        if k == 0 {
            return Err(RecipeError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(RecipeError::EmptyStore);
        }
        let q = self.embedder.embed(&[query.to_string()], transcript)?.remove(0);
        let mut scored: Vec<RetrievalResult> =
            self.entries.iter().map(|(r, v)| RetrievalResult { recipe: r.clone(), score: cosine(&q, v) }).collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.recipe.name.cmp(&b.recipe.name)));
        scored.truncate(k);
        Ok(scored)
    }
}
