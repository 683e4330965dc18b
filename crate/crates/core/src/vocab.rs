//! Concept vocabularies.
//!
//! A vocabulary is an ordered list of personal-data concepts. Its order is the
//! file order and fixes the column order of every score matrix and weight
//! vector built from it. Vocabularies are compiled into one prompt sentence per
//! concept, which is what the text encoder sees.
//!
//! The on-disk format is UTF-8 JSON Lines, one concept per line:
//!
//! ```text
//! {"id":"browsing-behaviour","name":"browsing behavior","description":"Information about browsing behavior.","level":3,"parent_id":"behavioural","examples":[]}
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Hierarchy depth, 1..=4, or 0 for a flat vocabulary.
    #[serde(default)]
    pub level: u8,
    #[serde(default)]
    pub parent_id: Option<String>,
    #[serde(default)]
    pub examples: Vec<String>,
}

impl Concept {
    pub fn new(id: impl Into<String>, name: impl Into<String>, description: impl Into<String>) -> Self {
        Concept {
            id: id.into(),
            name: name.into(),
            description: description.into(),
            level: 0,
            parent_id: None,
            examples: Vec::new(),
        }
    }
}

/// How a concept is turned into a sentence for the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateStyle {
    /// `<name>: <description>`
    Description,
    /// `<name>: information about <name>`
    InformationAbout,
    /// `<name>: <description>, e.g. <examples>`
    DescriptionWithExamples,
}

impl FromStr for TemplateStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "description" => Ok(TemplateStyle::Description),
            "information-about" | "info" => Ok(TemplateStyle::InformationAbout),
            "description-with-examples" | "examples" => Ok(TemplateStyle::DescriptionWithExamples),
            other => Err(Error::InvalidInput(format!("unknown template style `{other}`"))),
        }
    }
}

impl fmt::Display for TemplateStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateStyle::Description => "description",
            TemplateStyle::InformationAbout => "information-about",
            TemplateStyle::DescriptionWithExamples => "description-with-examples",
        })
    }
}

/// Which concepts of a hierarchical vocabulary form the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Third-level concepts, plus second-level concepts without third-level
    /// children; fourth-level names are folded into their parent's description.
    #[serde(alias = "hierarchy")]
    HierarchyRule,
    /// Every concept, ignoring the hierarchy.
    Flat,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchy" | "hierarchy-rule" => Ok(SelectionMode::HierarchyRule),
            "flat" => Ok(SelectionMode::Flat),
            other => Err(Error::InvalidInput(format!("unknown selection mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSentence {
    pub concept_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    concepts: Vec<Concept>,
    template_style: TemplateStyle,
    source_tag: String,
    content_hash: String,
}

impl ConceptVocabulary {
    /// Validates `concepts` and builds a vocabulary in the given order.
    pub fn new(
        concepts: Vec<Concept>,
        template_style: TemplateStyle,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let lines: Vec<usize> = (1..=concepts.len()).collect();
        validate(&concepts, &lines).map_err(|(line, msg)| Error::Vocabulary(format!("concept {line}: {msg}")))?;
        Ok(Self::from_validated(concepts, template_style, source_tag.into()))
    }

    fn from_validated(concepts: Vec<Concept>, template_style: TemplateStyle, source_tag: String) -> Self {
        let mut vocab = ConceptVocabulary {
            concepts,
            template_style,
            source_tag,
            content_hash: String::new(),
        };
        vocab.content_hash = prompts_hash(&compile_prompts(&vocab));
        vocab
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn template_style(&self) -> TemplateStyle {
        self.template_style
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// SHA-256 over the compiled prompt sentences.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn concept_ids(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.id.clone()).collect()
    }

    /// Same concepts under a different template.
    pub fn with_template(&self, template_style: TemplateStyle) -> Self {
        Self::from_validated(self.concepts.clone(), template_style, self.source_tag.clone())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for c in &self.concepts {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Loads a JSON Lines vocabulary. The source tag is the file stem.
pub fn load_vocabulary(path: &Path, template_style: TemplateStyle) -> Result<ConceptVocabulary> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source_tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_vocabulary(std::io::BufReader::new(file), path, template_style, source_tag)
}

/// Parses vocabulary records from any reader; `path` is only used in error messages.
pub fn parse_vocabulary(
    reader: impl BufRead,
    path: &Path,
    template_style: TemplateStyle,
    source_tag: impl Into<String>,
) -> Result<ConceptVocabulary> {
    let mut concepts = Vec::new();
    let mut lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let concept: Concept = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("malformed record: {e}"),
        })?;
        concepts.push(concept);
        lines.push(line_no);
    }
    validate(&concepts, &lines).map_err(|(line, message)| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })?;
    Ok(ConceptVocabulary::from_validated(concepts, template_style, source_tag.into()))
}

fn validate(concepts: &[Concept], lines: &[usize]) -> std::result::Result<(), (usize, String)> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (c, &line) in concepts.iter().zip(lines) {
        if c.id.is_empty() {
            return Err((line, "empty id".into()));
        }
        if c.name.trim().is_empty() {
            return Err((line, format!("empty name for concept `{}`", c.id)));
        }
        if c.level > 4 {
            return Err((line, format!("level {} outside 0..=4", c.level)));
        }
        if let Some(first) = seen.insert(&c.id, line) {
            return Err((line, format!("duplicate id `{}` (first seen on line {first})", c.id)));
        }
    }
    let levels: HashMap<&str, u8> = concepts.iter().map(|c| (c.id.as_str(), c.level)).collect();
    for (c, &line) in concepts.iter().zip(lines) {
        let Some(parent) = &c.parent_id else { continue };
        match levels.get(parent.as_str()) {
            None => return Err((line, format!("dangling parent_id `{parent}`"))),
            Some(&pl) if c.level == 0 || pl + 1 != c.level => {
                return Err((
                    line,
                    format!("parent `{parent}` has level {pl}, child `{}` has level {}", c.id, c.level),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Reduces a vocabulary to its bottleneck concepts.
pub fn select_bottleneck(vocab: &ConceptVocabulary, mode: SelectionMode) -> Result<ConceptVocabulary> {
    match mode {
        SelectionMode::Flat => Ok(vocab.clone()),
        SelectionMode::HierarchyRule => select_by_hierarchy(vocab),
    }
}

fn select_by_hierarchy(vocab: &ConceptVocabulary) -> Result<ConceptVocabulary> {
    if let Some(c) = vocab.concepts.iter().find(|c| c.level == 0) {
        return Err(Error::Vocabulary(format!(
            "hierarchy selection needs levels 1..=4, concept `{}` is flat",
            c.id
        )));
    }
    let mut children: HashMap<&str, Vec<&Concept>> = HashMap::new();
    for c in &vocab.concepts {
        if let Some(p) = &c.parent_id {
            children.entry(p.as_str()).or_default().push(c);
        }
    }
    let has_level3_child: HashSet<&str> = vocab
        .concepts
        .iter()
        .filter(|c| c.level == 3)
        .filter_map(|c| c.parent_id.as_deref())
        .collect();

    let mut selected = Vec::new();
    for c in &vocab.concepts {
        let keep = match c.level {
            3 => true,
            2 => !has_level3_child.contains(c.id.as_str()),
            _ => false,
        };
        if !keep {
            continue;
        }
        let mut concept = c.clone();
        concept.parent_id = None;
        let folded: Vec<&str> = children
            .get(c.id.as_str())
            .map(|kids| kids.iter().filter(|k| k.level == 4).map(|k| k.name.as_str()).collect())
            .unwrap_or_default();
        fold_examples(&mut concept, &folded);
        selected.push(concept);
    }
    Ok(ConceptVocabulary::from_validated(
        selected,
        vocab.template_style,
        vocab.source_tag.clone(),
    ))
}

/// Appends `(e.g., a, b)` for child names the description does not mention yet.
fn fold_examples(concept: &mut Concept, child_names: &[&str]) {
    let lower = concept.description.to_lowercase();
    let missing: Vec<&str> = child_names
        .iter()
        .copied()
        .filter(|n| !lower.contains(&n.to_lowercase()))
        .collect();
    for name in child_names {
        if !concept.examples.iter().any(|e| e.eq_ignore_ascii_case(name)) {
            concept.examples.push((*name).to_string());
        }
    }
    if missing.is_empty() {
        return;
    }
    let list = missing.join(", ");
    let desc = concept.description.trim_end();
    let (body, stop) = match desc.strip_suffix('.') {
        Some(stem) => (stem, "."),
        None => (desc, ""),
    };
    // extend a trailing example group instead of opening a second one
    let open_group = body
        .strip_suffix(')')
        .filter(|inner| inner.rfind("(e.g.").is_some_and(|at| !inner[at..].contains(')')));
    concept.description = if desc.is_empty() {
        format!("(e.g., {list})")
    } else if let Some(inner) = open_group {
        format!("{inner}, {list}){stop}")
    } else {
        format!("{body} (e.g., {list}){stop}")
    };
}

/// One sentence per concept, in vocabulary order.
pub fn compile_prompts(vocab: &ConceptVocabulary) -> Vec<PromptSentence> {
    vocab
        .concepts
        .iter()
        .map(|c| PromptSentence {
            concept_id: c.id.clone(),
            text: render_prompt(c, vocab.template_style),
        })
        .collect()
}

fn render_prompt(c: &Concept, style: TemplateStyle) -> String {
    let info = || format!("{}: information about {}", c.name, c.name);
    match style {
        TemplateStyle::InformationAbout => info(),
        TemplateStyle::Description if c.description.trim().is_empty() => info(),
        TemplateStyle::Description => format!("{}: {}", c.name, c.description),
        TemplateStyle::DescriptionWithExamples => {
            let base = if c.description.trim().is_empty() {
                info()
            } else {
                format!("{}: {}", c.name, c.description)
            };
            let lower = base.to_lowercase();
            let fresh: Vec<&str> = c
                .examples
                .iter()
                .map(String::as_str)
                .filter(|e| !lower.contains(&e.to_lowercase()))
                .collect();
            if fresh.is_empty() {
                base
            } else {
                format!("{}, e.g. {}", base.trim_end_matches('.'), fresh.join(", "))
            }
        }
    }
}

/// Digest of a compiled prompt list; equal digests mean identical sentences.
pub fn prompts_hash(prompts: &[PromptSentence]) -> String {
    let mut buf = Vec::new();
    for p in prompts {
        buf.extend_from_slice(p.concept_id.as_bytes());
        buf.push(0x1f);
        buf.extend_from_slice(p.text.as_bytes());
        buf.push(0x1e);
    }
    sha256_hex(&buf)
}

pub fn write_prompts(path: &Path, prompts: &[PromptSentence]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in prompts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut prompts = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PromptSentence = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if p.text.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "empty prompt text".into(),
            });
        }
        prompts.push(p);
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ConceptVocabulary> {
        parse_vocabulary(text.as_bytes(), Path::new("test.jsonl"), TemplateStyle::Description, "test")
    }

    fn node(id: &str, name: &str, desc: &str, level: u8, parent: Option<&str>) -> Concept {
        Concept {
            id: id.into(),
            name: name.into(),
            description: desc.into(),
            level,
            parent_id: parent.map(Into::into),
            examples: vec![],
        }
    }

    #[test]
    fn minimal_file() {
        let v = parse(r#"{"id":"a","name":"A","description":"d"}"#).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.source_tag(), "test");
    }

    #[test]
    fn duplicate_id_names_second_line() {
        let err = parse(concat!(
            r#"{"id":"a","name":"A","description":"d"}"#,
            "\n",
            r#"{"id":"a","name":"B","description":"e"}"#
        ))
        .unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("duplicate id"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_parent_and_empty_name_and_malformed() {
        let e = parse(r#"{"id":"a","name":"A","level":2,"parent_id":"zzz"}"#).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, ref message, .. } if message.contains("dangling")));
        let e = parse("\n{\"id\":\"a\",\"name\":\"  \"}").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, ref message, .. } if message.contains("empty name")));
        let e = parse("{not json}").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, ref message, .. } if message.contains("malformed")));
    }

    #[test]
    fn parent_level_must_be_one_less() {
        let e = parse(concat!(
            r#"{"id":"p","name":"P","level":1}"#,
            "\n",
            r#"{"id":"c","name":"C","level":3,"parent_id":"p"}"#
        ))
        .unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn order_is_file_order() {
        let v = parse(concat!(
            r#"{"id":"z","name":"Z"}"#,
            "\n",
            r#"{"id":"a","name":"A"}"#
        ))
        .unwrap();
        assert_eq!(v.concept_ids(), vec!["z", "a"]);
    }

    fn hierarchy() -> ConceptVocabulary {
        ConceptVocabulary::new(
            vec![
                node("external", "external", "", 1, None),
                node("behavioural", "behavioral", "Information about behavior.", 2, Some("external")),
                node(
                    "browsing",
                    "browsing behavior",
                    "Information about browsing behavior.",
                    3,
                    Some("behavioural"),
                ),
                node("browser-history", "browser history", "", 4, Some("browsing")),
                node("referral", "browsing referrals", "", 4, Some("browsing")),
                node("citizenship", "citizenship", "Information about citizenship.", 2, Some("external")),
            ],
            TemplateStyle::Description,
            "dpv-pd",
        )
        .unwrap()
    }

    #[test]
    fn hierarchy_rule_folds_fourth_level() {
        let v = select_bottleneck(&hierarchy(), SelectionMode::HierarchyRule).unwrap();
        assert_eq!(v.concept_ids(), vec!["browsing", "citizenship"]);
        assert_eq!(
            v.concepts()[0].description,
            "Information about browsing behavior (e.g., browser history, browsing referrals)."
        );
        assert_eq!(v.concepts()[1].description, "Information about citizenship.");
    }

    #[test]
    fn folding_skips_names_already_present() {
        let mut c = node("b", "browsing behavior", "Browsing (e.g. Browser History).", 3, None);
        fold_examples(&mut c, &["browser history", "referrals"]);
        assert_eq!(c.description, "Browsing (e.g. Browser History, referrals).");
        let mut c = node("b", "b", "has browser history", 3, None);
        fold_examples(&mut c, &["Browser History"]);
        assert_eq!(c.description, "has browser history");
    }

    #[test]
    fn hierarchy_rule_rejects_flat() {
        let v = parse(r#"{"id":"a","name":"A"}"#).unwrap();
        assert!(matches!(
            select_bottleneck(&v, SelectionMode::HierarchyRule),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn flat_mode_is_identity() {
        let v = hierarchy();
        assert_eq!(select_bottleneck(&v, SelectionMode::Flat).unwrap(), v);
    }

    #[test]
    fn templates() {
        let mut c = node("v", "vehicle", "Vehicle information", 0, None);
        c.examples = vec!["license plate".into(), "car".into()];
        assert_eq!(
            render_prompt(&c, TemplateStyle::DescriptionWithExamples),
            "vehicle: Vehicle information, e.g. license plate, car"
        );
        let bt = node("bt", "blood type", "", 0, None);
        assert_eq!(
            render_prompt(&bt, TemplateStyle::InformationAbout),
            "blood type: information about blood type"
        );
        let x = node("x", "x", "", 0, None);
        assert_eq!(render_prompt(&x, TemplateStyle::Description), "x: information about x");
    }

    #[test]
    fn examples_already_in_description_are_not_repeated() {
        let mut c = node("b", "browsing", "Browsing (e.g. Browser History).", 0, None);
        c.examples = vec!["browser history".into(), "referrals".into()];
        assert_eq!(
            render_prompt(&c, TemplateStyle::DescriptionWithExamples),
            "browsing: Browsing (e.g. Browser History), e.g. referrals"
        );
        c.examples.pop();
        assert_eq!(
            render_prompt(&c, TemplateStyle::DescriptionWithExamples),
            "browsing: Browsing (e.g. Browser History)."
        );
    }

    #[test]
    fn hash_tracks_sentences() {
        let v = hierarchy();
        let same = hierarchy();
        assert_eq!(v.content_hash(), same.content_hash());
        let other = v.with_template(TemplateStyle::InformationAbout);
        assert_ne!(v.content_hash(), other.content_hash());
    }

    #[test]
    fn prompts_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        let prompts = compile_prompts(&hierarchy());
        write_prompts(&path, &prompts).unwrap();
        assert_eq!(read_prompts(&path).unwrap(), prompts);
    }
}
