//! Slotted-rule extraction, clustering and vocabulary construction.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::{affinity_propagation, AffinityConfig, Clustering, SimilarityMatrix};
use crate::align::lcs_len;
use crate::error::{Error, Result};
use crate::syntax::{MultiSpanAlignment, Segment};
use crate::tags::{Action, RuleElement, SlottedRule, Span, TagAssignment};

/// Turns an aligned phrase into a rule: every covered piece becomes a slot
/// and every uncovered token stays a literal.
pub fn extract_rule(alignment: &MultiSpanAlignment) -> SlottedRule {
    SlottedRule::new(
        alignment
            .segments
            .iter()
            .map(|s| match s {
                Segment::Covered { .. } => RuleElement::Slot,
                Segment::Literal(t) => RuleElement::Literal(t.clone()),
            })
            .collect(),
    )
}

/// Normalized token-level LCS distance `1 - 2·LCS(a, b) / (|a| + |b|)`.
///
/// A slot is a single element that only matches another slot.
pub fn rule_distance(a: &SlottedRule, b: &SlottedRule) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 0.0;
    }
    1.0 - 2.0 * lcs_len(a.elements(), b.elements()) as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedRule {
    pub rule: SlottedRule,
    pub count: usize,
}

/// Counts rule instances; output is sorted by descending count, then rule.
pub fn count_rules<'a, I>(rules: I) -> Vec<ExtractedRule>
where
    I: IntoIterator<Item = &'a SlottedRule>,
{
    let mut counts: HashMap<&SlottedRule, usize> = HashMap::new();
    for r in rules {
        *counts.entry(r).or_default() += 1;
    }
    let mut out: Vec<ExtractedRule> = counts
        .into_iter()
        .map(|(rule, count)| ExtractedRule {
            rule: rule.clone(),
            count,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.rule.cmp(&b.rule)));
    out
}

/// Clustered non-glue rules.
#[derive(Debug, Clone)]
pub struct RuleClusters {
    pub points: Vec<ExtractedRule>,
    pub clustering: Clustering,
}

impl RuleClusters {
    /// `(exemplar, members)` point indices, exemplars in ascending order.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        self.clustering
            .exemplars()
            .into_iter()
            .map(|e| (e, self.clustering.members(e)))
            .collect()
    }
}

/// Similarity matrix of negative rule distances with median preference.
pub fn similarity_matrix(rules: &[SlottedRule]) -> SimilarityMatrix {
    SimilarityMatrix::from_fn(rules.len(), |i, k| -rule_distance(&rules[i], &rules[k]))
}

/// Clusters every rule that carries a literal. The null rule and pure-slot
/// glue rules stay out of clustering.
pub fn cluster_rules(extracted: &[ExtractedRule], cfg: &AffinityConfig) -> RuleClusters {
    let points: Vec<ExtractedRule> = extracted
        .iter()
        .filter(|e| !e.rule.is_null() && !e.rule.is_glue())
        .cloned()
        .collect();
    let rules: Vec<SlottedRule> = points.iter().map(|p| p.rule.clone()).collect();
    let clustering = affinity_propagation(&similarity_matrix(&rules), cfg);
    if !clustering.converged {
        log::warn!(
            "affinity propagation stopped after {} iterations without converging",
            clustering.iterations
        );
    }
    RuleClusters { points, clustering }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: usize,
    #[serde(with = "rule_strings")]
    pub elements: SlottedRule,
    pub count: usize,
}

pub(crate) mod rule_strings {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &SlottedRule, s: S) -> Result<S::Ok, S::Error> {
        r.to_strings().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SlottedRule, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        SlottedRule::parse(&v.join(" ")).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    rules: Vec<VocabEntry>,
    glue: BTreeMap<usize, usize>,
    remap: Vec<(String, usize)>,
}

/// The rule inventory a tagger predicts over. Id 0 is the null rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleVocabulary {
    entries: Vec<VocabEntry>,
    glue: BTreeMap<usize, usize>,
    remap: BTreeMap<SlottedRule, usize>,
    index: HashMap<SlottedRule, usize>,
}

impl RuleVocabulary {
    /// `{∅}` plus glue rules for `1..=max_glue` slots.
    pub fn with_glue(max_glue: usize) -> Self {
        let mut v = Self {
            entries: Vec::new(),
            glue: BTreeMap::new(),
            remap: BTreeMap::new(),
            index: HashMap::new(),
        };
        v.push(SlottedRule::null(), 0);
        for k in 1..=max_glue.max(1) {
            let id = v.push(SlottedRule::glue(k), 0);
            v.glue.insert(k, id);
        }
        v
    }

    fn push(&mut self, rule: SlottedRule, count: usize) -> usize {
        let id = self.entries.len();
        self.index.insert(rule.clone(), id);
        self.entries.push(VocabEntry {
            id,
            elements: rule,
            count,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn rule(&self, id: usize) -> Result<&SlottedRule> {
        self.entries
            .get(id)
            .map(|e| &e.elements)
            .ok_or(Error::UnknownRuleId(id))
    }

    pub fn rules(&self) -> impl Iterator<Item = &SlottedRule> {
        self.entries.iter().map(|e| &e.elements)
    }

    pub fn id_of(&self, rule: &SlottedRule) -> Option<usize> {
        self.index.get(rule).copied()
    }

    /// Glue rule id for `k` slots; the null rule for `k = 0`.
    pub fn glue_id(&self, k: usize) -> Option<usize> {
        if k == 0 {
            Some(0)
        } else {
            self.glue.get(&k).copied()
        }
    }

    pub fn max_slots(&self) -> usize {
        self.rules().map(SlottedRule::slot_count).max().unwrap_or(0)
    }

    /// Vocabulary id for a raw extracted rule.
    pub fn remap_id(&self, raw: &SlottedRule) -> Option<usize> {
        if raw.is_null() {
            return Some(0);
        }
        self.remap
            .get(raw)
            .copied()
            .or_else(|| self.id_of(raw))
            .or_else(|| raw.is_glue().then(|| self.glue_id(raw.slot_count())).flatten())
    }

    pub fn remap_pairs(&self) -> impl Iterator<Item = (&SlottedRule, usize)> {
        self.remap.iter().map(|(r, &id)| (r, id))
    }

    /// Rewrites every raw rule in `tags` to its vocabulary rule. Spans are kept
    /// because remapping preserves slot counts.
    pub fn remap_tags(&self, tags: &TagAssignment) -> Result<TagAssignment> {
        let rules = tags
            .rules
            .iter()
            .map(|r| {
                let id = self.remap_id(r).ok_or_else(|| Error::UnknownRule(r.to_string()))?;
                Ok(self.entries[id].elements.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let spans = rules
            .iter()
            .zip(&tags.spans)
            .map(|(r, s)| if r.slot_count() == s.len() { s.clone() } else { Vec::new() })
            .collect();
        Ok(TagAssignment {
            actions: tags.actions.clone(),
            rules,
            spans,
        })
    }

    pub fn encode_tags(&self, id: &str, tags: &TagAssignment) -> Result<TagRecord> {
        let rules = tags
            .rules
            .iter()
            .map(|r| self.id_of(r).ok_or_else(|| Error::UnknownRule(r.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(TagRecord {
            id: id.to_owned(),
            actions: tags.actions.clone(),
            rules,
            spans: tags.spans.clone(),
        })
    }

    pub fn decode_tags(&self, rec: &TagRecord) -> Result<TagAssignment> {
        let rules = rec
            .rules
            .iter()
            .map(|&id| self.rule(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(TagAssignment {
            actions: rec.actions.clone(),
            rules,
            spans: rec.spans.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            rules: self.entries.clone(),
            glue: self.glue.clone(),
            remap: self.remap.iter().map(|(r, &id)| (r.to_string(), id)).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        let mut v = Self {
            entries: Vec::new(),
            glue: file.glue,
            remap: BTreeMap::new(),
            index: HashMap::new(),
        };
        for (i, e) in file.rules.into_iter().enumerate() {
            if e.id != i {
                return Err(Error::Config(format!("rule ids must be dense, found {} at {i}", e.id)));
            }
            v.index.insert(e.elements.clone(), i);
            v.entries.push(e);
        }
        if v.entries.first().is_none_or(|e| !e.elements.is_null()) {
            return Err(Error::Config("rule 0 must be the null rule".into()));
        }
        for (raw, id) in file.remap {
            if id >= v.entries.len() {
                return Err(Error::UnknownRuleId(id));
            }
            v.remap.insert(SlottedRule::parse(&raw)?, id);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Serialized [`TagAssignment`] with rule ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    pub id: String,
    pub actions: Vec<Action>,
    pub rules: Vec<usize>,
    pub spans: Vec<Vec<Span>>,
}

/// Drops clusters covering less than `threshold` of all rule instances and
/// assembles the vocabulary.
///
/// Members of a dropped cluster map to the glue rule of their own slot count.
/// Members of a kept cluster map to its exemplar, unless the slot counts
/// differ, in which case they also fall back to glue. `min_glue` forces glue
/// rules up to that many slots even if none were observed.
pub fn filter_clusters(
    clusters: &RuleClusters,
    extracted: &[ExtractedRule],
    threshold: f64,
    min_glue: usize,
) -> RuleVocabulary {
    let total: usize = extracted.iter().map(|e| e.count).sum();
    let max_k = extracted.iter().map(|e| e.rule.slot_count()).max().unwrap_or(0);
    let mut vocab = RuleVocabulary::with_glue(max_k.max(min_glue));

    let mut kept: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    for (exemplar, members) in clusters.groups() {
        let share_count: usize = members.iter().map(|&i| clusters.points[i].count).sum();
        let share = if total == 0 {
            0.0
        } else {
            share_count as f64 / total as f64
        };
        if share < threshold {
            dropped.extend(members);
        } else {
            kept.push((exemplar, members, share_count));
        }
    }
    kept.sort_by(|a, b| {
        b.2.cmp(&a.2)
            .then_with(|| clusters.points[a.0].rule.cmp(&clusters.points[b.0].rule))
    });

    let mut counts = vec![0usize; vocab.len()];
    let mut remap = BTreeMap::new();
    for (exemplar, members, _) in &kept {
        let ex_rule = &clusters.points[*exemplar].rule;
        let ex_id = vocab.push(ex_rule.clone(), 0);
        counts.push(0);
        for &m in members {
            let p = &clusters.points[m];
            let id = if p.rule.slot_count() == ex_rule.slot_count() {
                ex_id
            } else {
                vocab.glue_id(p.rule.slot_count()).expect("glue covers observed slot counts")
            };
            counts[id] += p.count;
            remap.insert(p.rule.clone(), id);
        }
    }
    for &m in &dropped {
        let p = &clusters.points[m];
        let id = vocab.glue_id(p.rule.slot_count()).expect("glue covers observed slot counts");
        counts[id] += p.count;
        remap.insert(p.rule.clone(), id);
    }
    for e in extracted.iter().filter(|e| e.rule.is_glue() || e.rule.is_null()) {
        let id = vocab.glue_id(e.rule.slot_count()).expect("glue covers observed slot counts");
        counts[id] += e.count;
        remap.insert(e.rule.clone(), id);
    }
    for (entry, c) in vocab.entries.iter_mut().zip(counts) {
        entry.count = c;
    }
    vocab.remap = remap;
    vocab
}

/// Cluster then filter.
pub fn build_vocabulary(
    extracted: &[ExtractedRule],
    threshold: f64,
    min_glue: usize,
    cfg: &AffinityConfig,
) -> RuleVocabulary {
    let clusters = cluster_rules(extracted, cfg);
    filter_clusters(&clusters, extracted, threshold, min_glue)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> SlottedRule {
        SlottedRule::parse(s).unwrap()
    }

    fn ex(s: &str, count: usize) -> ExtractedRule {
        ExtractedRule { rule: r(s), count }
    }

    #[test]
    fn rule_from_alignment() {
        let a = MultiSpanAlignment {
            spans: vec![Span::new(4, 4)],
            covered_chars: 5,
            uncovered: vec![vec!["the".into()]],
            segments: vec![
                Segment::Literal("the".into()),
                Segment::Covered {
                    span: Span::new(4, 4),
                    len: 1,
                },
            ],
        };
        assert_eq!(extract_rule(&a), r("the <SL>"));
        let full = MultiSpanAlignment {
            segments: vec![Segment::Covered {
                span: Span::new(1, 2),
                len: 2,
            }],
            ..Default::default()
        };
        assert_eq!(extract_rule(&full), SlottedRule::glue(1));
    }

    #[test]
    fn distances() {
        assert!((rule_distance(&r("besides ␣"), &r("besides ␣ ␣")) - 0.2).abs() < 1e-12);
        assert_eq!(rule_distance(&r("besides ␣"), &r("besides ␣")), 0.0);
        assert!((rule_distance(&r("of ␣"), &r("the ␣")) - 0.5).abs() < 1e-12);
        assert_eq!(rule_distance(&r("okay"), &r("␣")), 1.0);
    }

    #[test]
    fn counting_orders_by_frequency() {
        let rules = [r("of ␣"), r("␣"), r("of ␣")];
        let c = count_rules(rules.iter());
        assert_eq!(c[0], ex("of ␣", 2));
        assert_eq!(c[1], ex("␣", 1));
    }

    #[test]
    fn of_and_to_groups() {
        let pts = [r("of ␣"), r("of ␣ ␣"), r("to ␣")];
        let s = similarity_matrix(&pts);
        assert!((s.get(0, 0) + 0.5).abs() < 1e-12);
        let c = affinity_propagation(&s, &AffinityConfig::default());
        let ex = c.exemplars();
        // Net similarity of the chosen exemplar set must match the exhaustive optimum.
        let best = (1u32..8)
            .map(|m| {
                let e: Vec<usize> = (0..3).filter(|i| m & (1 << i) != 0).collect();
                s.net_similarity(&e)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((s.net_similarity(&ex) - best).abs() < 1e-9);
        // One and two clusters tie at -1.2 here, so only optimality is pinned.
        assert!(ex.iter().all(|&e| c.exemplar_of[e] == e));
        assert_eq!(c.exemplar_of[0], c.exemplar_of[1]);
    }

    #[test]
    fn in_addition_to_remaps_to_exemplar() {
        let extracted = vec![
            ex("in addition ␣", 40),
            ex("in addition to ␣", 3),
            ex("in addition , ␣", 2),
            ex("of ␣", 30),
            ex("of the ␣", 2),
            ex("of all ␣", 2),
            ex("␣", 100),
        ];
        let v = build_vocabulary(&extracted, 0.0, 1, &AffinityConfig::default());
        let target = v.id_of(&r("in addition ␣")).expect("exemplar kept");
        assert_eq!(v.remap_id(&r("in addition to ␣")), Some(target));
        assert_eq!(v.remap_id(&r("of the ␣")), v.id_of(&r("of ␣")));
        assert_eq!(v.remap_id(&r("␣")), Some(1));
    }

    #[test]
    fn threshold_drops_rare_cluster_to_glue() {
        let extracted = vec![
            ex("besides ␣", 70),
            ex("besides just ␣", 1),
            ex("also besides ␣", 1),
            ex("other than ␣", 25),
            ex("other than just ␣", 1),
            ex("anything other than ␣", 1),
            ex("according to ␣ ␣", 5),
            ex("according ␣ ␣", 1),
            ex("largely according to ␣ ␣", 1),
        ];
        let v = build_vocabulary(&extracted, 0.1, 1, &AffinityConfig::default());
        let glue2 = v.glue_id(2).unwrap();
        assert_eq!(v.remap_id(&r("according to ␣ ␣")), Some(glue2));
        assert!(v.id_of(&r("according to ␣ ␣")).is_none());
        assert!(v.id_of(&r("besides ␣")).is_some());
        assert!(v.id_of(&r("other than ␣")).is_some());

        let none = build_vocabulary(&extracted, 0.0, 1, &AffinityConfig::default());
        assert!(none.id_of(&r("according to ␣ ␣")).is_some());
        assert!(none.len() > v.len());
    }

    #[test]
    fn slot_count_is_preserved_by_remap() {
        let extracted = vec![ex("of ␣", 50), ex("of ␣ ␣", 1), ex("of the ␣", 1), ex("to ␣", 20)];
        let v = build_vocabulary(&extracted, 0.0, 1, &AffinityConfig::default());
        for e in &extracted {
            let id = v.remap_id(&e.rule).unwrap();
            assert_eq!(v.rule(id).unwrap().slot_count(), e.rule.slot_count(), "{}", e.rule);
        }
    }

    #[test]
    fn empty_extraction_gives_minimal_vocab() {
        let v = build_vocabulary(&[], 0.005, 1, &AffinityConfig::default());
        assert_eq!(v.len(), 2);
        assert!(v.rule(0).unwrap().is_null());
        assert_eq!(v.rule(1).unwrap(), &SlottedRule::glue(1));
    }

    #[test]
    fn json_round_trip() {
        let extracted = vec![ex("besides ␣", 5), ex("␣ and ␣", 3), ex("␣", 9)];
        let v = build_vocabulary(&extracted, 0.0, 3, &AffinityConfig::default());
        let back = RuleVocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(v.to_json().unwrap().contains("\"<SL>\""));
    }

    #[test]
    fn tag_records_resolve_against_vocab() {
        let v = build_vocabulary(&[ex("besides ␣", 5)], 0.0, 1, &AffinityConfig::default());
        let tags = crate::tags::fixtures::federer_tags();
        let rec = v.encode_tags("federer", &tags).unwrap();
        assert_eq!(v.decode_tags(&rec).unwrap(), tags);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains(r#""actions":["K","D","K","K","K","K","K"]"#));
        assert!(json.contains("[[3,3]]"));
    }
}
