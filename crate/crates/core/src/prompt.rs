//! Prompt templates and deterministic rendering.
//!
//! A template file holds an instruction, a line containing only `---`, and a
//! body with `{{placeholder}}` markers. Rendering is a pure function of its
//! inputs. Products with a display image get an `<image>` marker right after
//! their text block; the image references travel out of band in
//! [`RenderedPrompt::image_refs`], in the same order as the markers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Product, Query};
use crate::error::{Error, Result};

pub const IMAGE_MARKER: &str = "<image>";
pub const EMPTY_HISTORY: &str = "(no purchase history)";
/// Sentence fragment every reasoning-style summary instruction contains.
pub const REASONING_DEMAND: &str = "reason step by step";
pub const DEFAULT_CHAR_BUDGET: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Instruction,
    HistoryBlock,
    QueryText,
    CandidateBlock,
    Demonstration,
    PerspectivesList,
    DescriptionText,
}

impl Placeholder {
    pub const ALL: [Placeholder; 7] = [
        Placeholder::Instruction,
        Placeholder::HistoryBlock,
        Placeholder::QueryText,
        Placeholder::CandidateBlock,
        Placeholder::Demonstration,
        Placeholder::PerspectivesList,
        Placeholder::DescriptionText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Instruction => "instruction",
            Placeholder::HistoryBlock => "history_block",
            Placeholder::QueryText => "query_text",
            Placeholder::CandidateBlock => "candidate_block",
            Placeholder::Demonstration => "demonstration",
            Placeholder::PerspectivesList => "perspectives_list",
            Placeholder::DescriptionText => "description_text",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub instruction: String,
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(template_id: &str, source: &str) -> Result<Self> {
        let err = |message: String| Error::Template {
            template: template_id.to_string(),
            message,
        };
        let (instruction, body) = match source.split_once("\n---\n") {
            Some((inst, body)) => (inst.trim().to_string(), body),
            None => (String::new(), source),
        };
        let body = body.trim_end_matches('\n');

        let mut segments = Vec::new();
        let mut rest = body;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                segments.push(Segment::Literal(rest[..start].to_string()));
            }
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| err("unclosed placeholder".into()))?;
            let name = after[..end].trim();
            let slot = Placeholder::from_name(name)
                .ok_or_else(|| err(format!("unknown placeholder {name:?}")))?;
            segments.push(Segment::Slot(slot));
            rest = &after[end + 2..];
        }
        if rest.contains("}}") {
            return Err(err("stray '}}'".into()));
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        let tpl = PromptTemplate {
            template_id: template_id.to_string(),
            instruction,
            segments,
        };
        if tpl.uses(Placeholder::Instruction) && tpl.instruction.is_empty() {
            return Err(err(
                "uses {{instruction}} but has no instruction section".into()
            ));
        }
        Ok(tpl)
    }

    pub fn uses(&self, p: Placeholder) -> bool {
        self.segments.contains(&Segment::Slot(p))
    }

    /// Fill every slot from `bindings`. The instruction slot is bound from
    /// the template itself unless overridden.
    pub fn render(&self, bindings: &BTreeMap<Placeholder, String>) -> Result<String> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(Placeholder::Instruction)
                    if !bindings.contains_key(&Placeholder::Instruction) =>
                {
                    out.push_str(&self.instruction)
                }
                Segment::Slot(p) => {
                    let v = bindings.get(p).ok_or_else(|| Error::Template {
                        template: self.template_id.clone(),
                        message: format!("unbound placeholder {p}"),
                    })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub image_refs: Vec<String>,
}

impl RenderedPrompt {
    pub fn check_budget(&self, budget: usize) -> Result<()> {
        let len = self.text.chars().count();
        if len > budget {
            return Err(Error::PromptTooLong { len, budget });
        }
        Ok(())
    }
}

/// Built-in templates and per-dataset demonstrations.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
    demos: BTreeMap<String, String>,
    pub char_budget: usize,
}

pub const RERANK: &str = "rerank";
pub const PERSPECTIVE: &str = "perspective";
pub const SUMMARY: &str = "summary";
pub const SUMMARY_DIRECT: &str = "summary_direct";
pub const SUMMARY_REASONING: &str = "summary_reasoning";

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    (RERANK, include_str!("../templates/rerank.tpl")),
    (PERSPECTIVE, include_str!("../templates/perspective.tpl")),
    (SUMMARY, include_str!("../templates/summary.tpl")),
    (
        SUMMARY_DIRECT,
        include_str!("../templates/summary_direct.tpl"),
    ),
    (
        SUMMARY_REASONING,
        include_str!("../templates/summary_reasoning.tpl"),
    ),
];

const BUILTIN_DEMOS: &[(&str, &str)] = &[
    (
        "default.perspective",
        include_str!("../templates/demos/default.perspective.txt"),
    ),
    (
        "default.summary",
        include_str!("../templates/demos/default.summary.txt"),
    ),
    (
        "office.perspective",
        include_str!("../templates/demos/office.perspective.txt"),
    ),
    (
        "office.summary",
        include_str!("../templates/demos/office.summary.txt"),
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemoKind {
    Perspective,
    Summary,
}

impl DemoKind {
    fn suffix(self) -> &'static str {
        match self {
            DemoKind::Perspective => "perspective",
            DemoKind::Summary => "summary",
        }
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN_TEMPLATES
            .iter()
            .map(|(id, src)| {
                let t = PromptTemplate::parse(id, src).expect("built-in template parses");
                (id.to_string(), t)
            })
            .collect();
        let demos = BUILTIN_DEMOS
            .iter()
            .map(|(k, v)| (k.to_string(), v.trim_end().to_string()))
            .collect();
        TemplateSet {
            templates,
            demos,
            char_budget: DEFAULT_CHAR_BUDGET,
        }
    }

    /// Built-ins overridden by `*.tpl` files and `demos/*.txt` in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut set = Self::builtin();
        let read_dir = |d: &Path| std::fs::read_dir(d).map_err(|e| Error::io(d, e));
        for entry in read_dir(dir)? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("tpl") {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let src = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates
                    .insert(id.to_string(), PromptTemplate::parse(id, &src)?);
            }
        }
        let demo_dir = dir.join("demos");
        if demo_dir.is_dir() {
            for entry in read_dir(&demo_dir)? {
                let path = entry.map_err(|e| Error::io(&demo_dir, e))?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                    let key = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default();
                    let src = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    set.demos
                        .insert(key.to_string(), src.trim_end().to_string());
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates.get(id).ok_or_else(|| Error::UnknownId {
            kind: "template",
            id: id.to_string(),
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    /// The dataset's own demonstration, falling back to the default one.
    pub fn demonstration(&self, dataset: &str, kind: DemoKind) -> &str {
        let key = format!("{}.{}", dataset.to_lowercase(), kind.suffix());
        self.demos
            .get(&key)
            .or_else(|| self.demos.get(&format!("default.{}", kind.suffix())))
            .map(String::as_str)
            .unwrap_or_default()
    }
}

/// Product text in fixed field order plus its image reference.
pub fn render_product_block(p: &Product, use_summary: bool) -> (String, Option<String>) {
    let brand = if p.brand.trim().is_empty() {
        "unknown"
    } else {
        p.brand.trim()
    };
    let category = if p.category.is_empty() {
        "unknown".to_string()
    } else {
        p.category.join(" > ")
    };
    let mut text = format!(
        "Product ID: {}\nTitle: {}\nBrand: {}\nCategory: {}\nDescription: {}",
        p.product_id,
        p.title.trim(),
        brand,
        category,
        p.description_for(use_summary).trim(),
    );
    if p.image_ref.is_some() {
        text.push('\n');
        text.push_str(IMAGE_MARKER);
    }
    (text, p.image_ref.clone())
}

fn product_text_only(p: &Product, use_summary: bool) -> String {
    let (text, image) = render_product_block(p, use_summary);
    match image {
        Some(_) => text.trim_end_matches(IMAGE_MARKER).trim_end().to_string(),
        None => text,
    }
}

/// The candidate-scoring prompt. `history` must already be chronological.
pub fn render_rerank_prompt(
    history: &[&Product],
    query: &Query,
    candidate: &Product,
    tpl: &PromptTemplate,
    use_summary: bool,
    char_budget: usize,
) -> Result<RenderedPrompt> {
    let mut image_refs = Vec::new();
    let history_block = if history.is_empty() {
        EMPTY_HISTORY.to_string()
    } else {
        let blocks: Vec<String> = history
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (text, image) = render_product_block(p, use_summary);
                image_refs.extend(image);
                format!("[{}]\n{}", i + 1, text)
            })
            .collect();
        blocks.join("\n\n")
    };
    let (candidate_block, image) = render_product_block(candidate, use_summary);
    image_refs.extend(image);

    let bindings = BTreeMap::from([
        (Placeholder::HistoryBlock, history_block),
        (Placeholder::QueryText, query.text.clone()),
        (Placeholder::CandidateBlock, candidate_block),
    ]);
    let prompt = RenderedPrompt {
        text: tpl.render(&bindings)?,
        image_refs,
    };
    prompt.check_budget(char_budget)?;
    Ok(prompt)
}

/// Perspective extraction prompt: instruction, one demonstration, then the
/// query and product text. Text-only, so no image markers.
pub fn render_perspective_prompt(
    query: &Query,
    product: &Product,
    demo: &str,
    tpl: &PromptTemplate,
    char_budget: usize,
) -> Result<RenderedPrompt> {
    if demo.trim().is_empty() {
        return Err(Error::InvalidInput(
            "demonstration must be non-empty".into(),
        ));
    }
    let bindings = BTreeMap::from([
        (Placeholder::Demonstration, demo.trim_end().to_string()),
        (Placeholder::QueryText, query.text.clone()),
        (
            Placeholder::CandidateBlock,
            product_text_only(product, false),
        ),
    ]);
    let prompt = RenderedPrompt {
        text: tpl.render(&bindings)?,
        image_refs: Vec::new(),
    };
    prompt.check_budget(char_budget)?;
    Ok(prompt)
}

/// Summary generation prompt. Perspectives and the demonstration are only
/// required when the template has slots for them.
pub fn render_summary_prompt(
    product: &Product,
    perspectives: &[String],
    demo: &str,
    tpl: &PromptTemplate,
    char_budget: usize,
) -> Result<RenderedPrompt> {
    if tpl.uses(Placeholder::PerspectivesList) && perspectives.is_empty() {
        return Err(Error::InvalidInput(
            "perspectives list must be non-empty".into(),
        ));
    }
    if tpl.uses(Placeholder::Demonstration) && demo.trim().is_empty() {
        return Err(Error::InvalidInput(
            "demonstration must be non-empty".into(),
        ));
    }
    let list = perspectives
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {}", i + 1, p))
        .collect::<Vec<_>>()
        .join("\n");
    let bindings = BTreeMap::from([
        (Placeholder::PerspectivesList, list),
        (Placeholder::Demonstration, demo.trim_end().to_string()),
        (
            Placeholder::DescriptionText,
            product.description.trim().to_string(),
        ),
        (
            Placeholder::CandidateBlock,
            product_text_only(product, false),
        ),
    ]);
    let prompt = RenderedPrompt {
        text: tpl.render(&bindings)?,
        image_refs: Vec::new(),
    };
    prompt.check_budget(char_budget)?;
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product(id: &str, image: bool) -> Product {
        Product {
            product_id: id.into(),
            title: format!("Title {id}"),
            brand: "Acme".into(),
            category: vec!["Office Products".into(), "Paper".into()],
            description: format!("Description of {id}."),
            summary: None,
            image_ref: image.then(|| format!("img/{id}.jpg")),
        }
    }

    fn query() -> Query {
        Query::new("q1", "office products paper").unwrap()
    }

    #[test]
    fn template_parse_errors() {
        assert!(PromptTemplate::parse("t", "a {{nope}} b").is_err());
        assert!(PromptTemplate::parse("t", "a {{query_text b").is_err());
        assert!(PromptTemplate::parse("t", "a }} b").is_err());
        assert!(PromptTemplate::parse("t", "{{instruction}} only").is_err());
        let t =
            PromptTemplate::parse("t", "inst\n---\n{{instruction}}: {{query_text}}!\n").unwrap();
        assert!(t.uses(Placeholder::QueryText));
        let out = t
            .render(&BTreeMap::from([(Placeholder::QueryText, "x".to_string())]))
            .unwrap();
        assert_eq!(out, "inst: x!");
        assert!(t.render(&BTreeMap::new()).is_err());
    }

    #[test]
    fn product_block_fields() {
        let (text, image) = render_product_block(&product("P1", true), false);
        assert_eq!(
            text,
            "Product ID: P1\nTitle: Title P1\nBrand: Acme\nCategory: Office Products > Paper\nDescription: Description of P1.\n<image>"
        );
        assert_eq!(image.as_deref(), Some("img/P1.jpg"));
        assert_eq!(text.lines().filter(|l| l.contains(": ")).count(), 5);
    }

    #[test]
    fn product_block_uses_summary() {
        let mut p = product("P1", false);
        p.summary = Some("short".into());
        let (text, _) = render_product_block(&p, true);
        assert!(text.ends_with("Description: short"));
        let (text, _) = render_product_block(&p, false);
        assert!(text.ends_with("Description: Description of P1."));
    }

    #[test]
    fn empty_brand_is_unknown() {
        let mut p = product("P1", false);
        p.brand = String::new();
        let (text, _) = render_product_block(&p, false);
        assert!(text.contains("\nBrand: unknown\n"));
    }

    #[test]
    fn rerank_empty_history() {
        let set = TemplateSet::builtin();
        let p = render_rerank_prompt(
            &[],
            &query(),
            &product("C", false),
            set.get(RERANK).unwrap(),
            false,
            8192,
        )
        .unwrap();
        assert!(p.text.contains(EMPTY_HISTORY));
        assert!(p.image_refs.is_empty());
    }

    #[test]
    fn rerank_history_order_and_images() {
        let set = TemplateSet::builtin();
        let h1 = product("H1", true);
        let h2 = product("H2", false);
        let c = product("C", true);
        let p = render_rerank_prompt(
            &[&h1, &h2],
            &query(),
            &c,
            set.get(RERANK).unwrap(),
            false,
            8192,
        )
        .unwrap();
        assert_eq!(p.text.matches("Product ID: ").count(), 3);
        assert_eq!(p.image_refs, ["img/H1.jpg", "img/C.jpg"]);
        assert_eq!(p.text.matches(IMAGE_MARKER).count(), p.image_refs.len());
        let i1 = p.text.find("Product ID: H1").unwrap();
        let i2 = p.text.find("Product ID: H2").unwrap();
        let iq = p.text.find("Search query: ").unwrap();
        let ic = p.text.find("Product ID: C").unwrap();
        assert!(i1 < i2 && i2 < iq && iq < ic);
        assert!(p.text.contains("\"yes\" or \"no\""));
        let again = render_rerank_prompt(
            &[&h1, &h2],
            &query(),
            &c,
            set.get(RERANK).unwrap(),
            false,
            8192,
        )
        .unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn budget_fails_loudly() {
        let set = TemplateSet::builtin();
        let err = render_rerank_prompt(
            &[],
            &query(),
            &product("C", false),
            set.get(RERANK).unwrap(),
            false,
            50,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PromptTooLong { budget: 50, .. }));
    }

    #[test]
    fn perspective_prompt_contains_demo_once() {
        let set = TemplateSet::builtin();
        let tpl = set.get(PERSPECTIVE).unwrap();
        let demo = set.demonstration("office", DemoKind::Perspective);
        let p = render_perspective_prompt(&query(), &product("A", true), demo, tpl, 8192).unwrap();
        assert_eq!(p.text.matches(demo).count(), 1);
        assert!(p.image_refs.is_empty());
        assert!(render_perspective_prompt(&query(), &product("A", false), "", tpl, 8192).is_err());

        let q = render_perspective_prompt(&query(), &product("B", true), demo, tpl, 8192).unwrap();
        let a_norm = p.text.replace('A', "B");
        assert_eq!(a_norm, q.text.replace('A', "B"));
    }

    #[test]
    fn summary_prompt_lists_perspectives() {
        let set = TemplateSet::builtin();
        let tpl = set.get(SUMMARY).unwrap();
        let demo = set.demonstration("office", DemoKind::Summary);
        let persp: Vec<String> = (0..20).map(|i| format!("perspective {i:02}")).collect();
        let p = render_summary_prompt(&product("A", false), &persp, demo, tpl, 8192).unwrap();
        let mut last = 0;
        for (i, name) in persp.iter().enumerate() {
            let line = format!("{}. {}", i + 1, name);
            let at = p.text.find(&line).unwrap();
            assert!(at >= last);
            last = at;
        }
        assert!(p.text.contains(REASONING_DEMAND));
        assert_eq!(p.text.matches(demo).count(), 1);
        assert!(p.text.contains("\"SUMMARY:\""));

        let one =
            render_summary_prompt(&product("A", false), &persp[..1], demo, tpl, 8192).unwrap();
        assert!(one.text.contains("1. perspective 00"));
        assert!(!one.text.contains("2. "));
        assert!(render_summary_prompt(&product("A", false), &[], demo, tpl, 8192).is_err());
    }

    #[test]
    fn ablation_templates_render() {
        let set = TemplateSet::builtin();
        let direct = render_summary_prompt(
            &product("A", false),
            &[],
            "",
            set.get(SUMMARY_DIRECT).unwrap(),
            8192,
        )
        .unwrap();
        assert!(!direct.text.contains(REASONING_DEMAND));
        let demo = set.demonstration("office", DemoKind::Summary);
        let reasoning = render_summary_prompt(
            &product("A", false),
            &[],
            demo,
            set.get(SUMMARY_REASONING).unwrap(),
            8192,
        )
        .unwrap();
        assert!(reasoning.text.contains(REASONING_DEMAND));
    }

    #[test]
    fn demo_fallback() {
        let set = TemplateSet::builtin();
        assert!(set
            .demonstration("office", DemoKind::Perspective)
            .contains("cardstock"));
        assert_eq!(
            set.demonstration("sports", DemoKind::Summary),
            set.demonstration("default", DemoKind::Summary)
        );
    }
}
