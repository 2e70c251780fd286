//! Closed-world vocabulary and caption templates.
//!
//! The laboratory's text side is deliberately tiny: a fixed word list covering
//! every caption template plus a block of reserved class-name slots
//! (`object00` … `object31`). Class names are ordinary vocabulary entries, so
//! swapping the class token inside a tuned prompt context — the mechanism that
//! lets prompts tuned on base classes transfer to novel ones — needs no
//! special casing.
//!
//! A [`TemplateSpec`] is a caption pattern with exactly one `[class]` hole.
//! Each synthetic domain nominates the template that matches its flavor
//! (texture-like domains caption as `"[class] texture."`, and so on), mirroring
//! how photographic benchmarks pair datasets with hand-written prompts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Number of reserved class-name slots in the standard vocabulary.
pub const MAX_CLASS_SLOTS: usize = 32;

/// Fixed word list shared by every caption template.
const TEMPLATE_WORDS: [&str; 13] = [
    "a",
    "photo",
    "of",
    "type",
    "pet",
    "flower",
    "food",
    "aircraft",
    "texture",
    "centered",
    "satellite",
    "person",
    "doing",
];

/// A closed vocabulary mapping tokens to contiguous ids.
///
/// Id 0 is a reserved padding slot that the tokenizer never emits; it exists
/// so that id 0 is never a meaningful word.
#[derive(Debug, Clone)]
pub struct Vocab {
    ids: BTreeMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// The standard laboratory vocabulary: padding, template words, and all
    /// reserved class slots. Deterministic — every caller sees identical ids.
    pub fn standard() -> Self {
        let mut tokens = vec!["<pad>".to_string()];
        tokens.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        for i in 0..MAX_CLASS_SLOTS {
            tokens.push(class_slot_name(i));
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { ids, tokens }
    }

    /// Number of entries (the embedding-table height).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when the vocabulary is empty (never the case for [`standard`]).
    ///
    /// [`standard`]: Vocab::standard
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Looks up a single token.
    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown token {token:?}")))
    }

    /// Tokenizes a caption: lowercase, strip `,`/`.`, split on whitespace.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.to_lowercase().replace([',', '.'], " ");
        let mut out = Vec::new();
        for word in cleaned.split_whitespace() {
            out.push(self.id(word)?);
        }
        if out.is_empty() {
            return Err(Error::config(format!("caption {text:?} tokenizes to nothing")));
        }
        Ok(out)
    }

    /// Token string for an id (panics on out-of-range ids — internal misuse).
    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }
}

/// Name of the `i`-th reserved class slot (`object00`, `object01`, …).
pub fn class_slot_name(i: usize) -> String {
    format!("object{i:02}")
}

/// A caption pattern with exactly one `[class]` hole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    id: String,
    pattern: String,
}

impl TemplateSpec {
    /// Validates the pattern: exactly one `[class]` placeholder.
    pub fn new(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let pattern = pattern.into();
        let holes = pattern.matches("[class]").count();
        if holes != 1 {
            return Err(Error::config(format!(
                "template {id:?} must contain exactly one [class] placeholder, found {holes}"
            )));
        }
        Ok(TemplateSpec { id, pattern })
    }

    /// Stable identifier used in configuration files.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// The raw pattern including the `[class]` hole.
    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Substitutes the class name into the hole.
    pub fn render(&self, class_name: &str) -> String {
        self.pattern.replace("[class]", class_name)
    }

    /// The built-in template library, one pattern per domain flavor.
    pub fn library() -> Vec<TemplateSpec> {
        [
            ("plain", "a photo of a [class]."),
            ("pets", "a photo of a [class], a type of pet."),
            ("flowers", "a photo of a [class], a type of flower."),
            ("food", "a photo of [class], a type of food."),
            ("aircraft", "a photo of a [class], a type of aircraft."),
            ("texture", "[class] texture."),
            ("satellite", "a centered satellite photo of [class]."),
            ("action", "a photo of a person doing [class]."),
        ]
        .into_iter()
        .map(|(id, p)| TemplateSpec::new(id, p).expect("built-in template is valid"))
        .collect()
    }

    /// Looks up a built-in template by id.
    pub fn by_id(id: &str) -> Result<TemplateSpec> {
        Self::library()
            .into_iter()
            .find(|t| t.id == id)
            .ok_or_else(|| {
                let known: Vec<String> =
                    Self::library().iter().map(|t| t.id.clone()).collect();
                Error::config(format!("unknown template {id:?}; known: {known:?}"))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocab_is_deterministic_and_padded() {
        let v1 = Vocab::standard();
        let v2 = Vocab::standard();
        assert_eq!(v1.len(), v2.len());
        assert_eq!(v1.len(), 1 + TEMPLATE_WORDS.len() + MAX_CLASS_SLOTS);
        assert_eq!(v1.token(0), "<pad>");
        for i in 0..v1.len() as u32 {
            assert_eq!(v1.id(v1.token(i)).unwrap(), v2.id(v2.token(i)).unwrap());
        }
    }

    #[test]
    fn every_library_template_renders_and_tokenizes() {
        let vocab = Vocab::standard();
        for t in TemplateSpec::library() {
            for slot in 0..MAX_CLASS_SLOTS {
                let caption = t.render(&class_slot_name(slot));
                let ids = vocab.tokenize(&caption).unwrap();
                assert!(!ids.is_empty());
                // The class token must survive tokenization verbatim.
                let class_id = vocab.id(&class_slot_name(slot)).unwrap();
                assert!(ids.contains(&class_id), "template {} lost the class token", t.id());
            }
        }
    }

    #[test]
    fn template_requires_exactly_one_hole() {
        assert!(TemplateSpec::new("none", "a photo.").is_err());
        assert!(TemplateSpec::new("two", "[class] and [class].").is_err());
        assert!(TemplateSpec::new("one", "a [class].").is_ok());
    }

    #[test]
    fn unknown_template_and_token_are_config_errors() {
        let e = TemplateSpec::by_id("imagenet").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = Vocab::standard().tokenize("a daguerreotype of a cat").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn render_is_case_and_punctuation_tolerant_downstream() {
        let v = Vocab::standard();
        let t = TemplateSpec::by_id("pets").unwrap();
        let ids = v.tokenize(&t.render("object03")).unwrap();
        // "a photo of a object03 , a type of pet ." -> 9 tokens after cleanup
        assert_eq!(ids.len(), 9);
    }
}
