//! Caption hallucination scoring (sentence- and instance-level) with
//! synonym-aware object extraction, and binary-VQA scoring with yes as the
//! positive class. All file formats here are line-oriented tab-separated
//! text; see the parser doc comments for the exact column order.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Canonical object categories plus a surface-phrase synonym map.
///
/// Phrases match case-insensitively after punctuation stripping; multi-word
/// phrases win over shorter ones at the same position. Plural forms belong
/// in the synonym list, there is no stemming.
#[derive(Clone, Debug)]
pub struct ObjectVocabulary {
    names: Vec<String>,
    phrase_to_object: HashMap<String, usize>,
    max_phrase_words: usize,
}

fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

impl ObjectVocabulary {
    /// Builds the vocabulary from `(canonical name, synonym phrases)` pairs.
    /// The canonical name always matches itself.
    pub fn new(objects: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut names = Vec::with_capacity(objects.len());
        let mut phrase_to_object = HashMap::new();
        let mut max_phrase_words = 1;
        for (id, (name, synonyms)) in objects.into_iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "object {id} has an empty name"
                )));
            }
            names.push(name.clone());
            for phrase in std::iter::once(name).chain(synonyms) {
                let words = normalize_words(&phrase);
                if words.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "object {id} has an empty synonym phrase"
                    )));
                }
                max_phrase_words = max_phrase_words.max(words.len());
                let key = words.join(" ");
                if let Some(&other) = phrase_to_object.get(&key) {
                    if other != id {
                        return Err(Error::InvalidArgument(format!(
                            "phrase '{key}' maps to both object {other} and object {id}"
                        )));
                    }
                } else {
                    phrase_to_object.insert(key, id);
                }
            }
        }
        Ok(ObjectVocabulary {
            names,
            phrase_to_object,
            max_phrase_words,
        })
    }

    pub fn object_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    /// Parses the tab-separated vocabulary format: one object per line,
    /// `name<TAB>synonym<TAB>synonym...`; `#` lines are comments.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut objects = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let name = fields
                .next()
                .ok_or_else(|| Error::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: "missing object name".to_string(),
                })?
                .to_string();
            let synonyms: Vec<String> = fields.map(|s| s.to_string()).collect();
            objects.push((name, synonyms));
        }
        ObjectVocabulary::new(objects).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Ordered object mentions in a caption: greedy longest-match scan over the
/// normalized word sequence, consuming matched words left to right; repeated
/// mentions each count.
pub fn extract_objects(caption: &str, vocab: &ObjectVocabulary) -> Vec<usize> {
    let words = normalize_words(caption);
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let mut matched = false;
        let longest = vocab.max_phrase_words.min(words.len() - i);
        for len in (1..=longest).rev() {
            let key = words[i..i + len].join(" ");
            if let Some(&id) = vocab.phrase_to_object.get(&key) {
                mentions.push(id);
                i += len;
                matched = true;
                break;
            }
        }
        if !matched {
            i += 1;
        }
    }
    mentions
}

/// One caption with its grounded object set.
#[derive(Clone, Debug)]
pub struct CaptionRecord {
    pub id: u64,
    pub caption: String,
    pub gold_objects: BTreeSet<usize>,
}

/// Per-caption extraction detail.
#[derive(Clone, Debug)]
pub struct CaptionDetail {
    pub id: u64,
    pub mentioned: Vec<usize>,
    pub hallucinated: Vec<usize>,
}

/// Corpus-level caption hallucination scores.
#[derive(Clone, Debug)]
pub struct ChairReport {
    /// Fraction of captions with at least one hallucinated mention.
    pub chair_s: f64,
    /// Hallucinated mentions over all object mentions; 0 when nothing is mentioned.
    pub chair_i: f64,
    pub caption_count: usize,
    pub total_mentions: usize,
    pub hallucinated_mentions: usize,
    pub captions_with_hallucination: usize,
    pub details: Vec<CaptionDetail>,
}

pub fn chair_scores(captions: &[CaptionRecord], vocab: &ObjectVocabulary) -> Result<ChairReport> {
    if captions.is_empty() {
        return Err(Error::InvalidArgument(
            "caption corpus must not be empty".to_string(),
        ));
    }
    let mut total_mentions = 0usize;
    let mut hallucinated_mentions = 0usize;
    let mut captions_with_hallucination = 0usize;
    let mut details = Vec::with_capacity(captions.len());
    for record in captions {
        let mentioned = extract_objects(&record.caption, vocab);
        let hallucinated: Vec<usize> = mentioned
            .iter()
            .copied()
            .filter(|id| !record.gold_objects.contains(id))
            .collect();
        total_mentions += mentioned.len();
        hallucinated_mentions += hallucinated.len();
        if !hallucinated.is_empty() {
            captions_with_hallucination += 1;
        }
        details.push(CaptionDetail {
            id: record.id,
            mentioned,
            hallucinated,
        });
    }
    let chair_s = captions_with_hallucination as f64 / captions.len() as f64;
    let chair_i = if total_mentions == 0 {
        0.0
    } else {
        hallucinated_mentions as f64 / total_mentions as f64
    };
    Ok(ChairReport {
        chair_s,
        chair_i,
        caption_count: captions.len(),
        total_mentions,
        hallucinated_mentions,
        captions_with_hallucination,
        details,
    })
}

/// Parsed binary answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Answer {
    Yes,
    No,
    Unparsable,
}

impl Answer {
    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::Unparsable => "unparsable",
        }
    }
}

/// Case-insensitive binary-answer parse: a leading yes/no token wins,
/// otherwise the first occurrence of either word; anything else is
/// unparsable and will count against the model.
pub fn parse_answer(response: &str) -> Answer {
    let words = normalize_words(response);
    match words.first().map(String::as_str) {
        Some("yes") => return Answer::Yes,
        Some("no") => return Answer::No,
        _ => {}
    }
    for w in &words {
        match w.as_str() {
            "yes" => return Answer::Yes,
            "no" => return Answer::No,
            _ => {}
        }
    }
    Answer::Unparsable
}

/// Binary-VQA scores with yes as the positive class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PopeReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub unparsable: usize,
}

/// Scores parsed answers against gold yes/no labels. An unparsable answer is
/// never correct: with gold yes it counts as a false negative, with gold no
/// it counts against accuracy without becoming a false positive.
pub fn pope_scores(predictions: &[Answer], gold: &[bool]) -> Result<PopeReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot score an empty answer set".to_string(),
        ));
    }
    if predictions.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "got {} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_, mut unparsable) = (0usize, 0, 0, 0, 0);
    for (&pred, &is_yes) in predictions.iter().zip(gold.iter()) {
        match (pred, is_yes) {
            (Answer::Yes, true) => tp += 1,
            (Answer::Yes, false) => fp += 1,
            (Answer::No, false) => tn += 1,
            (Answer::No, true) => fn_ += 1,
            (Answer::Unparsable, true) => {
                fn_ += 1;
                unparsable += 1;
            }
            (Answer::Unparsable, false) => unparsable += 1,
        }
    }
    let n = predictions.len() as f64;
    let accuracy = (tp + tn) as f64 / n;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeReport {
        accuracy,
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
        unparsable,
    })
}

/// Parses the caption file format: `id<TAB>caption<TAB>gold,ids` per line,
/// `#` lines are comments, the gold column may be empty.
pub fn parse_caption_file(text: &str, path: &str) -> Result<Vec<CaptionRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: lineno + 1,
            message: format!("bad caption id '{}'", fields[0]),
        })?;
        let mut gold_objects = BTreeSet::new();
        if !fields[2].is_empty() {
            for part in fields[2].split(',') {
                let obj: usize = part.parse().map_err(|_| Error::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: format!("bad gold object id '{part}'"),
                })?;
                gold_objects.insert(obj);
            }
        }
        records.push(CaptionRecord {
            id,
            caption: fields[1].to_string(),
            gold_objects,
        });
    }
    Ok(records)
}

/// One polled question with the model's raw response.
#[derive(Clone, Debug)]
pub struct PopeRecord {
    pub id: u64,
    pub question: String,
    pub gold_yes: bool,
    pub response: String,
}

/// Parses the polled-answer file format:
/// `id<TAB>question<TAB>gold(yes|no)<TAB>response` per line.
pub fn parse_pope_file(text: &str, path: &str) -> Result<Vec<PopeRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                message: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: lineno + 1,
            message: format!("bad record id '{}'", fields[0]),
        })?;
        let gold_yes = match fields[2] {
            "yes" => true,
            "no" => false,
            other => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: format!("gold label must be yes or no, got '{other}'"),
                })
            }
        };
        records.push(PopeRecord {
            id,
            question: fields[1].to_string(),
            gold_yes,
            response: fields[3].to_string(),
        });
    }
    Ok(records)
}
