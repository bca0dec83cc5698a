//! Knowledge-triplet datasets: JSON-lines ingestion, prompt templating,
//! token-span alignment, model-knows filtering, and val/test splitting.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::BpeTokenizer;
use crate::error::{Error, Result};
use crate::lens::rank_of;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Factual,
    Commonsense,
    Linguistic,
    Bias,
}

impl Default for Category {
    fn default() -> Self {
        Category::Factual
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Demo {
    pub prompt: String,
    pub answer: String,
}

/// One (subject, relation, object) record with its prompt template.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KnowledgeTriplet {
    pub subject: String,
    pub relation_id: String,
    /// Must contain the `{subject}` placeholder exactly once and not end in
    /// whitespace, so next-token prediction of the object is grammatical.
    pub template: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relation_hint_tokens: Vec<String>,
    #[serde(default)]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demos: Vec<Demo>,
    /// Explicit relation-token positions, overriding the complement rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_span_hint: Option<Vec<usize>>,
}

impl KnowledgeTriplet {
    fn validate(&self) -> std::result::Result<(), String> {
        let occurrences = self.template.matches("{subject}").count();
        if occurrences != 1 {
            return Err(format!(
                "template must contain `{{subject}}` exactly once, found {occurrences}"
            ));
        }
        if self.template.trim_end() != self.template {
            return Err("template must not end in whitespace".to_owned());
        }
        if self.subject.trim().is_empty() {
            return Err("empty subject".to_owned());
        }
        if self.object.trim().is_empty() {
            return Err("empty object".to_owned());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    pub seed: u64,
    pub d_val: Vec<usize>,
    pub d_test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KnowledgeDataset {
    pub records: Vec<KnowledgeTriplet>,
    pub category: Category,
    pub dataset_id: String,
    pub splits: Option<Splits>,
}

impl KnowledgeDataset {
    /// Loads a JSON-lines file; malformed lines report their line number,
    /// duplicate (subject, relation) pairs are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let dataset_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_owned());
        Self::from_jsonl(&text, dataset_id)
    }

    pub fn from_jsonl(text: &str, dataset_id: String) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: KnowledgeTriplet =
                serde_json::from_str(line).map_err(|e| Error::Dataset {
                    line: lineno,
                    msg: e.to_string(),
                })?;
            record.validate().map_err(|msg| Error::Dataset {
                line: lineno,
                msg,
            })?;
            if !seen.insert((record.subject.clone(), record.relation_id.clone())) {
                return Err(Error::Dataset {
                    line: lineno,
                    msg: format!(
                        "duplicate record for ({}, {})",
                        record.subject, record.relation_id
                    ),
                });
            }
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::Dataset {
                line: 0,
                msg: "dataset has no records".to_owned(),
            });
        }
        let category = records[0].category.unwrap_or_default();
        Ok(KnowledgeDataset {
            records,
            category,
            dataset_id,
            splits: None,
        })
    }

    pub fn filter_relation(&self, relation_id: &str) -> Result<Self> {
        let records: Vec<KnowledgeTriplet> = self
            .records
            .iter()
            .filter(|r| r.relation_id == relation_id)
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(Error::invalid(format!(
                "no records with relation `{relation_id}` in dataset `{}`",
                self.dataset_id
            )));
        }
        Ok(KnowledgeDataset {
            records,
            category: self.category,
            dataset_id: format!("{}:{relation_id}", self.dataset_id),
            splits: None,
        })
    }

    /// Deterministic 1:1 val/test split (validation gets the extra record
    /// for odd counts). Indices are stored sorted.
    pub fn split(&mut self, seed: u64) -> &Splits {
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let val_len = n.div_ceil(2);
        let mut d_val: Vec<usize> = order[..val_len].to_vec();
        let mut d_test: Vec<usize> = order[val_len..].to_vec();
        d_val.sort_unstable();
        d_test.sort_unstable();
        self.splits = Some(Splits { seed, d_val, d_test });
        self.splits.as_ref().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
    All,
}

/// Renders the zero-shot prompt (placeholder substituted, subject trimmed,
/// no trailing whitespace).
pub fn render_prompt(triplet: &KnowledgeTriplet) -> String {
    triplet
        .template
        .replace("{subject}", triplet.subject.trim())
}

/// Renders the in-context prompt: each demo as `prompt answer`, one per
/// line, followed by the zero-shot prompt.
pub fn render_prompt_icl(triplet: &KnowledgeTriplet) -> String {
    let mut out = String::new();
    for demo in &triplet.demos {
        out.push_str(demo.prompt.trim_end());
        out.push(' ');
        out.push_str(demo.answer.trim());
        out.push('\n');
    }
    out.push_str(&render_prompt(triplet));
    out
}

/// A tokenized prompt with aligned subject/relation spans and the target's
/// first token.
#[derive(Debug, Clone)]
pub struct TokenizedPrompt {
    pub tokens: Vec<u32>,
    /// Half-open token index range covering the subject.
    pub subject_span: (usize, usize),
    /// Relation token positions (complement rule or explicit hint).
    pub relation_span: Vec<usize>,
    pub target_first_token: u32,
    pub text: String,
    pub triplet: KnowledgeTriplet,
}

impl TokenizedPrompt {
    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn last_subject_position(&self) -> usize {
        self.subject_span.1 - 1
    }
}

/// Tokenizes a rendered prompt and aligns the subject span (the contiguous
/// token run whose decoded bytes cover the subject occurrence, allowing one
/// leading space). The relation span defaults to all other prompt positions
/// except a sentence-initial article; for in-context prompts it is restricted
/// to the final query line. Fails if the subject is absent, appears more
/// than once, or crosses token boundaries.
pub fn tokenize_align(
    tokenizer: &BpeTokenizer,
    triplet: &KnowledgeTriplet,
    icl: bool,
) -> Result<TokenizedPrompt> {
    triplet
        .validate()
        .map_err(|msg| Error::Dataset { line: 0, msg })?;
    let text = if icl {
        render_prompt_icl(triplet)
    } else {
        render_prompt(triplet)
    };
    let subject = triplet.subject.trim();
    let count = text.matches(subject).count();
    if count != 1 {
        return Err(Error::invalid(format!(
            "subject `{subject}` occurs {count} times in prompt `{text}`"
        )));
    }
    let tokens = tokenizer.encode(&text)?;
    if tokens.is_empty() {
        return Err(Error::invalid("prompt tokenized to nothing"));
    }

    // byte offsets per token
    let mut offsets = Vec::with_capacity(tokens.len() + 1);
    offsets.push(0usize);
    for &t in &tokens {
        offsets.push(offsets.last().unwrap() + tokenizer.token_byte_len(t)?);
    }

    let sub_start = text.find(subject).unwrap();
    let sub_end = sub_start + subject.len();
    // allow the span to start at the leading space of a space-prefixed token
    let lo = if sub_start > 0 && text.as_bytes()[sub_start - 1] == b' ' {
        sub_start - 1
    } else {
        sub_start
    };

    let mut first = None;
    let mut last = None;
    for i in 0..tokens.len() {
        let (s, e) = (offsets[i], offsets[i + 1]);
        if s < sub_end && e > sub_start {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::invalid(format!(
            "subject `{subject}` not covered by any token"
        )));
    };
    if offsets[first] < lo || offsets[last + 1] > sub_end {
        return Err(Error::invalid(format!(
            "subject `{subject}` is not a contiguous token span in `{text}`"
        )));
    }
    let subject_span = (first, last + 1);

    let relation_span = if let Some(hint) = &triplet.relation_span_hint {
        for &p in hint {
            if p >= tokens.len() {
                return Err(Error::invalid(format!(
                    "relation_span_hint position {p} out of bounds"
                )));
            }
            if p >= subject_span.0 && p < subject_span.1 {
                return Err(Error::invalid(
                    "relation_span_hint overlaps the subject span",
                ));
            }
        }
        hint.clone()
    } else {
        // query region: after the last newline-bearing token (in-context
        // demos count as neither subject nor relation)
        let query_start = (0..tokens.len())
            .rev()
            .find(|&i| tokenizer.token_text(tokens[i]).unwrap_or_default().contains('\n'))
            .map(|i| i + 1)
            .unwrap_or(0);
        let mut span = Vec::new();
        for p in query_start..tokens.len() {
            if p >= subject_span.0 && p < subject_span.1 {
                continue;
            }
            if p == query_start {
                let word = tokenizer.token_text(tokens[p]).unwrap_or_default();
                let w = word.trim();
                if ["the", "a", "an"].contains(&w.to_ascii_lowercase().as_str()) {
                    continue;
                }
            }
            span.push(p);
        }
        span
    };

    let target_first_token = tokenizer.first_token(&format!(" {}", triplet.object.trim()))?;
    Ok(TokenizedPrompt {
        tokens,
        subject_span,
        relation_span,
        target_first_token,
        text,
        triplet: triplet.clone(),
    })
}

/// Tokenizes the selected split, skipping (with a warning) records whose
/// subject span cannot be aligned.
pub fn tokenize_split(
    tokenizer: &BpeTokenizer,
    dataset: &KnowledgeDataset,
    split: Split,
    icl: bool,
) -> Result<Vec<TokenizedPrompt>> {
    let indices: Vec<usize> = match (split, &dataset.splits) {
        (Split::All, _) => (0..dataset.records.len()).collect(),
        (Split::Val, Some(s)) => s.d_val.clone(),
        (Split::Test, Some(s)) => s.d_test.clone(),
        (Split::Val | Split::Test, None) => {
            return Err(Error::invalid("dataset has no splits; call split(seed) first"))
        }
    };
    let mut out = Vec::with_capacity(indices.len());
    for idx in indices {
        match tokenize_align(tokenizer, &dataset.records[idx], icl) {
            Ok(p) => out.push(p),
            Err(e) => log::warn!(
                "skipping record ({}, {}): {e}",
                dataset.records[idx].subject,
                dataset.records[idx].relation_id
            ),
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no records tokenized successfully"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct RetentionRow {
    pub category: Category,
    pub relation_id: String,
    pub total: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetentionReport {
    pub k: usize,
    pub rows: Vec<RetentionRow>,
}

/// Keeps records whose target ranks within the top `k` next-token
/// predictions of the full model; reports per-relation retention counts.
pub fn filter_known(
    model: &Model,
    tokenizer: &BpeTokenizer,
    dataset: &KnowledgeDataset,
    k: usize,
) -> Result<(KnowledgeDataset, RetentionReport)> {
    use rayon::prelude::*;
    let prompts: Vec<(usize, TokenizedPrompt)> = dataset
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| match tokenize_align(tokenizer, r, false) {
            Ok(p) => Some((i, p)),
            Err(e) => {
                log::warn!("skipping record ({}, {}): {e}", r.subject, r.relation_id);
                None
            }
        })
        .collect();
    let known: Vec<(usize, bool)> = prompts
        .par_iter()
        .map(|(i, p)| {
            let (logits, _) = model.run_full(&p.tokens)?;
            let rank = rank_of(logits.row(logits.nrows() - 1), p.target_first_token);
            Ok((*i, rank <= k))
        })
        .collect::<Result<_>>()?;

    let kept_idx: HashSet<usize> = known
        .iter()
        .filter_map(|&(i, keep)| keep.then_some(i))
        .collect();
    let mut rows: Vec<RetentionRow> = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        let row = match rows.iter_mut().find(|row| row.relation_id == r.relation_id) {
            Some(row) => row,
            None => {
                rows.push(RetentionRow {
                    category: r.category.unwrap_or(dataset.category),
                    relation_id: r.relation_id.clone(),
                    total: 0,
                    kept: 0,
                });
                rows.last_mut().unwrap()
            }
        };
        row.total += 1;
        if kept_idx.contains(&i) {
            row.kept += 1;
        }
    }

    let records: Vec<KnowledgeTriplet> = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| kept_idx.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    if records.is_empty() {
        log::warn!("no record passed the model-knows gate (k={k})");
    }
    Ok((
        KnowledgeDataset {
            records,
            category: dataset.category,
            dataset_id: dataset.dataset_id.clone(),
            splits: None,
        },
        RetentionReport { k, rows },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixtures() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
    }

    fn fixture_tokenizer() -> BpeTokenizer {
        BpeTokenizer::from_files(
            fixtures().join("tokenizer/vocab.json"),
            fixtures().join("tokenizer/merges.txt"),
        )
        .unwrap()
    }

    fn france() -> KnowledgeTriplet {
        KnowledgeTriplet {
            subject: "France".to_owned(),
            relation_id: "country_language".to_owned(),
            template: "The official language of {subject} is".to_owned(),
            object: "French".to_owned(),
            relation_hint_tokens: vec!["language".to_owned()],
            category: Some(Category::Factual),
            demos: vec![],
            relation_span_hint: None,
        }
    }

    #[test]
    fn renders_spec_example() {
        assert_eq!(render_prompt(&france()), "The official language of France is");
        let mut spaced = france();
        spaced.subject = "  France ".to_owned();
        assert_eq!(render_prompt(&spaced), "The official language of France is");
    }

    #[test]
    fn loads_single_record_line() {
        let line = r#"{"subject":"France","relation_id":"country_language","template":"The official language of {subject} is","object":"French","relation_hint_tokens":["language"]}"#;
        let ds = KnowledgeDataset::from_jsonl(line, "t".to_owned()).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].object, "French");
    }

    #[test]
    fn rejects_template_without_placeholder_with_line_number() {
        let text = "\n".to_owned()
            + r#"{"subject":"France","relation_id":"r","template":"The capital is","object":"Paris"}"#;
        let err = KnowledgeDataset::from_jsonl(&text, "t".to_owned()).unwrap_err();
        match err {
            Error::Dataset { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("{subject}"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_empty_objects() {
        let line = r#"{"subject":"France","relation_id":"r","template":"X {subject} is","object":"Paris"}"#;
        let text = format!("{line}\n{line}");
        assert!(matches!(
            KnowledgeDataset::from_jsonl(&text, "t".to_owned()),
            Err(Error::Dataset { line: 2, .. })
        ));
        let empty_obj = r#"{"subject":"France","relation_id":"r","template":"X {subject} is","object":"  "}"#;
        assert!(KnowledgeDataset::from_jsonl(empty_obj, "t".to_owned()).is_err());
    }

    #[test]
    fn aligns_subject_span_and_target() {
        let tok = fixture_tokenizer();
        let p = tokenize_align(&tok, &france(), false).unwrap();
        // " France" is a single token in the fixture vocabulary
        assert_eq!(p.subject_span.1 - p.subject_span.0, 1);
        let decoded = tok
            .decode(&p.tokens[p.subject_span.0..p.subject_span.1])
            .unwrap();
        assert_eq!(decoded.trim_start(), "France");
        assert_eq!(
            p.target_first_token,
            tok.encode(" French").unwrap()[0]
        );
        // complement rule: leading "The" excluded, subject excluded
        assert!(!p.relation_span.contains(&0));
        assert!(!p.relation_span.contains(&p.subject_span.0));
        assert_eq!(
            p.relation_span.len(),
            p.tokens.len() - 2 // minus "The" and the 1-token subject
        );
    }

    #[test]
    fn multi_token_subject_span() {
        let tok = fixture_tokenizer();
        let mut t = france();
        t.subject = "South Korea".to_owned();
        t.template = "The capital of {subject} is".to_owned();
        let p = tokenize_align(&tok, &t, false).unwrap();
        assert_eq!(p.subject_span.1 - p.subject_span.0, 2);
        let decoded = tok
            .decode(&p.tokens[p.subject_span.0..p.subject_span.1])
            .unwrap();
        assert_eq!(decoded.trim_start(), "South Korea");
    }

    #[test]
    fn subject_must_occur_exactly_once() {
        let tok = fixture_tokenizer();
        let mut t = france();
        t.template = "{subject} is near France, and the language of".to_owned();
        // subject "France" now occurs twice in the rendered prompt
        assert!(tokenize_align(&tok, &t, false).is_err());
    }

    #[test]
    fn icl_rendering_and_spans() {
        let tok = fixture_tokenizer();
        let mut t = france();
        t.subject = "tall".to_owned();
        t.relation_id = "adj_comparative".to_owned();
        t.template = "The comparative form of {subject} is".to_owned();
        t.object = "taller".to_owned();
        t.demos = vec![Demo {
            prompt: "The comparative form of small is".to_owned(),
            answer: "smaller".to_owned(),
        }];
        let text = render_prompt_icl(&t);
        assert_eq!(
            text,
            "The comparative form of small is smaller\nThe comparative form of tall is"
        );
        let p = tokenize_align(&tok, &t, true).unwrap();
        // all relation positions live in the query line
        let newline_pos = (0..p.tokens.len())
            .find(|&i| tok.token_text(p.tokens[i]).unwrap().contains('\n'))
            .unwrap();
        assert!(p.relation_span.iter().all(|&pos| pos > newline_pos));
        assert!(p.subject_span.0 > newline_pos);
    }

    #[test]
    fn uniform_logit_model_retains_almost_nothing() {
        let tok = fixture_tokenizer();
        let (config, weights) = crate::synthetic::uniform_logit_model(tok.vocab_size());
        let model = crate::model::Model::new(config, weights).unwrap();
        let lines: Vec<String> = [
            ("France", "Paris"),
            ("Germany", "Berlin"),
            ("Italy", "Rome"),
            ("Japan", "Tokyo"),
        ]
        .iter()
        .map(|(s, o)| {
            format!(
                r#"{{"subject":"{s}","relation_id":"country_capital_city","template":"The capital of {{subject}} is","object":"{o}"}}"#
            )
        })
        .collect();
        let ds = KnowledgeDataset::from_jsonl(&lines.join("\n"), "caps".to_owned()).unwrap();
        let (kept, report) = filter_known(&model, &tok, &ds, 10).unwrap();
        // uniform logits rank by token id; fact tokens sit far above id 10
        let retention = kept.records.len() as f64 / ds.records.len() as f64;
        assert!(retention < 0.05, "retention {retention}");
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].relation_id, "country_capital_city");
        assert_eq!(report.rows[0].total, 4);
        assert_eq!(report.rows[0].kept, 0);

        // k = vocab_size retains everything
        let (kept, _) = filter_known(&model, &tok, &ds, tok.vocab_size()).unwrap();
        assert_eq!(kept.records.len(), 4);
    }

    #[test]
    fn split_is_deterministic_and_balanced() {
        let tok_lines: Vec<String> = (0..9)
            .map(|i| {
                format!(
                    r#"{{"subject":"S{i}","relation_id":"r","template":"X {{subject}} is","object":"O{i}"}}"#
                )
            })
            .collect();
        let text = tok_lines.join("\n");
        let mut ds = KnowledgeDataset::from_jsonl(&text, "t".to_owned()).unwrap();
        let s1 = ds.split(42).clone();
        let mut ds2 = KnowledgeDataset::from_jsonl(&text, "t".to_owned()).unwrap();
        let s2 = ds2.split(42).clone();
        assert_eq!(s1, s2);
        assert_eq!(s1.d_val.len(), 5);
        assert_eq!(s1.d_test.len(), 4);
        let all: HashSet<usize> = s1.d_val.iter().chain(&s1.d_test).copied().collect();
        assert_eq!(all.len(), 9);
        let s3 = ds.split(43).clone();
        assert_ne!(s1.d_val, s3.d_val);
    }
}
