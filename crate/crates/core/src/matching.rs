//! Threshold-gated term matching against the knowledge base tables, the
//! pill contraindication checks, and category re-labeling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::kb::{KbError, KnowledgeBase, Partition, Table};
use crate::lm::{Backend, BackendError, CompletionAction, Prompt};

pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const STRICT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    /// Used by the symptom assessor.
    pub default_threshold: f64,
    /// Used by the medicine interpreter when re-validating terms.
    pub strict_threshold: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            default_threshold: DEFAULT_THRESHOLD,
            strict_threshold: STRICT_THRESHOLD,
        }
    }
}

impl MatchThresholds {
    pub fn is_valid(&self) -> bool {
        0.0 < self.default_threshold && self.default_threshold <= self.strict_threshold && self.strict_threshold <= 1.0
    }
}

/// Lowercases and collapses runs of whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn edit_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let distance = strsim::levenshtein(a, b);
    // single division keeps e.g. 3/5 bit-identical to the literal 0.6
    (longest - distance) as f64 / longest as f64
}

/// Similarity in [0, 1]: the better of whole-string and best token-pair
/// normalized edit similarity.
pub fn similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (normalize(a), normalize(b));
    if a == b {
        return 1.0;
    }
    let whole = edit_similarity(&a, &b);
    let best_token = a
        .split(' ')
        .filter(|t| !t.is_empty())
        .flat_map(|ta| {
            b.split(' ')
                .filter(|t| !t.is_empty())
                .map(move |tb| edit_similarity(ta, tb))
        })
        .fold(0.0, f64::max);
    whole.max(best_token)
}

fn round4<S: Serializer>(score: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((score * 10_000.0).round() / 10_000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMatch {
    /// Canonical term of the searched table.
    pub term: String,
    #[serde(serialize_with = "round4")]
    pub score: f64,
    /// Alias string that produced the hit, when it was not the term itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub query: String,
    pub table: Table,
    pub matches: Vec<TermMatch>,
    pub threshold_used: f64,
}

impl MatchResult {
    pub fn terms(&self) -> Vec<&str> {
        self.matches.iter().map(|m| m.term.as_str()).collect()
    }

    pub fn is_ambiguous(&self) -> bool {
        self.matches.len() > 1
    }
}

/// Matches `query` against one table. An exact (normalized) hit is returned
/// alone; otherwise every term scoring at least `threshold`, best first,
/// ties broken by term.
pub fn find_most_similar(kb: &KnowledgeBase, table: Table, query: &str, threshold: f64) -> MatchResult {
    // (canonical term, candidate string, alias?)
    let mut candidates: Vec<(&str, &str, bool)> = kb
        .entries(table)
        .iter()
        .map(|e| (e.term.as_str(), e.term.as_str(), false))
        .collect();
    if table == Table::MedicationsAndDiseases {
        candidates.extend(
            kb.aliases()
                .iter()
                .map(|a| (a.category.as_str(), a.alias.as_str(), true)),
        );
    }

    let key = normalize(query);
    let exact = candidates.iter().find(|(_, s, _)| normalize(s) == key);
    let matches = if let Some(&(term, s, via_alias)) = exact {
        vec![TermMatch {
            term: term.to_string(),
            score: 1.0,
            alias: via_alias.then(|| s.to_string()),
        }]
    } else {
        let mut best: BTreeMap<&str, TermMatch> = BTreeMap::new();
        for &(term, s, via_alias) in &candidates {
            let score = similarity(query, s);
            if score < threshold {
                continue;
            }
            let better = best.get(term).is_none_or(|m| score > m.score);
            if better {
                best.insert(
                    term,
                    TermMatch {
                        term: term.to_string(),
                        score,
                        alias: via_alias.then(|| s.to_string()),
                    },
                );
            }
        }
        let mut matches: Vec<TermMatch> = best.into_values().collect();
        matches.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.term.cmp(&y.term)));
        matches
    };

    MatchResult {
        query: query.to_string(),
        table,
        matches,
        threshold_used: threshold,
    }
}

pub fn find_most_similar_word_allergies(kb: &KnowledgeBase, term: &str, threshold: f64) -> MatchResult {
    find_most_similar(kb, Table::Allergies, term, threshold)
}

pub fn find_most_similar_word_regular_medications_and_diseases(
    kb: &KnowledgeBase,
    term: &str,
    threshold: f64,
) -> MatchResult {
    find_most_similar(kb, Table::MedicationsAndDiseases, term, threshold)
}

pub fn check_pill_contraindicating_allergies<S: AsRef<str>>(
    kb: &KnowledgeBase,
    matched_allergy_terms: &[S],
    condition_answers: &BTreeMap<String, bool>,
) -> Result<Partition, KbError> {
    kb.partition_restricted(matched_allergy_terms, condition_answers, Some(Table::Allergies))
}

pub fn check_pill_contraindicating_medications_and_diseases<S: AsRef<str>>(
    kb: &KnowledgeBase,
    matched_terms: &[S],
    condition_answers: &BTreeMap<String, bool>,
) -> Result<Partition, KbError> {
    kb.partition_restricted(matched_terms, condition_answers, Some(Table::MedicationsAndDiseases))
}

pub const CLASSIFY_TASK: &str = "classify_contraindication";

/// Re-labels `term` onto a canonical category of the medications and
/// diseases table. The alias table is consulted first; the backend, when
/// given, only for terms the table does not know.
pub fn classify_contraindication(
    kb: &KnowledgeBase,
    term: &str,
    backend: Option<&dyn Backend>,
) -> Result<Option<String>, BackendError> {
    if let Some(entry) = kb.entry(term) {
        return Ok((entry.table == Table::MedicationsAndDiseases).then(|| entry.term.clone()));
    }
    if let Some(category) = kb.alias_category(term) {
        return Ok(Some(category.to_string()));
    }
    let Some(backend) = backend else {
        return Ok(None);
    };

    let categories = kb.terms(Table::MedicationsAndDiseases);
    let prompt = Prompt::task(
        "symptom_assessor",
        CLASSIFY_TASK,
        format!(
            "If the input term is a type of one of these categories, output that category, otherwise output None.\nCategories: {}\nTerm: {}",
            categories.join("; "),
            term
        ),
    )
    .with_context("term", term)
    .with_context("categories", categories.join("; "));
    let completion = backend.complete(&prompt)?;
    let CompletionAction::Utterance { text } = completion.action else {
        return Err(BackendError::ContractViolation(
            "classification must be a plain utterance".into(),
        ));
    };
    let answer = text.trim();
    if answer.eq_ignore_ascii_case("none") || answer.is_empty() {
        return Ok(None);
    }
    match kb.entry(answer) {
        Some(entry) if entry.table == Table::MedicationsAndDiseases => Ok(Some(entry.term.clone())),
        _ => Err(BackendError::ContractViolation(format!(
            "`{answer}` is not a known category"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::load_kb;
    use proptest::prelude::*;

    fn kb() -> KnowledgeBase {
        load_kb(include_str!("../../../fixtures/kb/ecp_kb.yaml")).unwrap()
    }

    // Independent oracle: textbook recursive Levenshtein with memoization.
    fn oracle_distance(a: &[char], b: &[char]) -> usize {
        fn go(a: &[char], b: &[char], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            if let Some(&d) = memo.get(&(a.len(), b.len())) {
                return d;
            }
            let cost = usize::from(a[0] != b[0]);
            let d = (go(&a[1..], b, memo) + 1)
                .min(go(a, &b[1..], memo) + 1)
                .min(go(&a[1..], &b[1..], memo) + cost);
            memo.insert((a.len(), b.len()), d);
            d
        }
        go(a, b, &mut BTreeMap::new())
    }

    fn oracle_similarity(a: &str, b: &str) -> f64 {
        let (a, b) = (normalize(a), normalize(b));
        let sim = |x: &str, y: &str| {
            let (x, y): (Vec<char>, Vec<char>) = (x.chars().collect(), y.chars().collect());
            let n = x.len().max(y.len());
            if n == 0 {
                1.0
            } else {
                (n - oracle_distance(&x, &y)) as f64 / n as f64
            }
        };
        let mut best = sim(&a, &b);
        for ta in a.split_whitespace() {
            for tb in b.split_whitespace() {
                best = best.max(sim(ta, tb));
            }
        }
        best
    }

    #[test]
    fn identity_and_hand_computed_values() {
        assert_eq!(similarity("asthma", "asthma"), 1.0);
        assert_eq!(similarity("  Asthma ", "asthma"), 1.0);
        // one insertion over six characters
        assert_eq!(similarity("astma", "asthma"), 5.0 / 6.0);
        assert_eq!(similarity("lactose", "lactose monohydrate"), 1.0);
        // whole-string part alone: distance 12 over 19 characters
        assert!((edit_similarity("lactose", "lactose monohydrate") - 7.0 / 19.0).abs() < 1e-12);
        assert_eq!(similarity("", ""), 1.0);
        assert_eq!(similarity("", "asthma"), 0.0);
    }

    #[test]
    fn astma_at_strict_threshold() {
        let r = find_most_similar_word_regular_medications_and_diseases(&kb(), "astma", 0.8);
        assert_eq!(r.terms(), ["Asthma"]);
        assert_eq!(r.threshold_used, 0.8);
    }

    #[test]
    fn starch_is_ambiguous() {
        let r = find_most_similar_word_allergies(&kb(), "starch", 0.6);
        assert_eq!(r.terms(), ["corn starch", "potato starch"]);
        assert!(r.is_ambiguous());
    }

    #[test]
    fn exact_term_wins_over_token_hits() {
        let r = find_most_similar_word_allergies(&kb(), "Potato starch", 0.8);
        assert_eq!(r.terms(), ["potato starch"]);
    }

    #[test]
    fn blue_has_no_allergy_match() {
        let kb = kb();
        // brute force: best score against every allergy term stays below 0.6
        let best = kb
            .terms(Table::Allergies)
            .iter()
            .map(|t| oracle_similarity("blue", t))
            .fold(0.0, f64::max);
        assert!(best < 0.6, "{best}");
        assert!(find_most_similar_word_allergies(&kb, "blue", 0.6).matches.is_empty());
    }

    #[test]
    fn crohns_hits_alias() {
        let kb = kb();
        let best_alias = kb
            .aliases()
            .iter()
            .map(|a| (oracle_similarity("crohns", &a.alias), a.category.clone()))
            .max_by(|x, y| x.0.total_cmp(&y.0))
            .unwrap();
        assert!(best_alias.0 >= 0.6);
        let r = find_most_similar_word_regular_medications_and_diseases(&kb, "crohns", 0.6);
        assert_eq!(r.terms(), [best_alias.1.as_str()]);
        assert_eq!(r.matches[0].alias.as_deref(), Some("Crohn's disease"));
    }

    #[test]
    fn strict_threshold_one_rejects_non_members() {
        let r = find_most_similar_word_regular_medications_and_diseases(&kb(), "astma", 1.0);
        assert!(r.matches.is_empty());
        let r = find_most_similar_word_regular_medications_and_diseases(&kb(), "Asthma", 0.6);
        assert_eq!(r.terms(), ["Asthma"]);
    }

    #[test]
    fn check_tools_follow_conditions() {
        let kb = kb();
        let yes = BTreeMap::from([("lactose monohydrate".to_string(), true)]);
        let no = BTreeMap::from([("lactose monohydrate".to_string(), false)]);
        let p = check_pill_contraindicating_allergies(&kb, &["lactose monohydrate"], &yes).unwrap();
        assert_eq!(p.excluded_ids(), ["levonor-15", "ulipra-30"]);
        let p = check_pill_contraindicating_allergies(&kb, &["lactose monohydrate"], &no).unwrap();
        assert!(p.excluded.is_empty());
        let p = check_pill_contraindicating_allergies::<&str>(&kb, &[], &BTreeMap::new()).unwrap();
        assert_eq!(p.safe.len(), 3);

        let gluco = BTreeMap::from([("Asthma".to_string(), true)]);
        let p = check_pill_contraindicating_medications_and_diseases(&kb, &["Asthma"], &gluco).unwrap();
        assert_eq!(p.excluded_ids(), ["ulipra-30"]);
        let p = check_pill_contraindicating_medications_and_diseases(
            &kb,
            &["Severe Malabsorption Disorder"],
            &BTreeMap::new(),
        )
        .unwrap();
        let expected: Vec<&str> = kb
            .products
            .iter()
            .filter(|p| {
                p.contraindicating_conditions
                    .iter()
                    .any(|c| c == "Severe Malabsorption Disorder")
            })
            .map(|p| p.id.as_str())
            .collect();
        assert_eq!(p.excluded_ids(), expected);
        // allergy terms are not accepted by the conditions check
        assert!(check_pill_contraindicating_medications_and_diseases(&kb, &["talc"], &BTreeMap::new()).is_err());
    }

    #[test]
    fn classification_via_alias_table() {
        let kb = kb();
        assert_eq!(
            classify_contraindication(&kb, "Celiac disease", None)
                .unwrap()
                .as_deref(),
            Some("Severe Malabsorption Disorder")
        );
        assert_eq!(
            classify_contraindication(&kb, "Severe Malabsorption Disorder", None)
                .unwrap()
                .as_deref(),
            Some("Severe Malabsorption Disorder")
        );
        assert_eq!(classify_contraindication(&kb, "blue car", None).unwrap(), None);
        assert_eq!(classify_contraindication(&kb, "talc", None).unwrap(), None);
    }

    #[test]
    fn scores_serialize_to_four_places() {
        let r = find_most_similar_word_regular_medications_and_diseases(&kb(), "astma", 0.8);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"score\":0.8333"), "{json}");
    }

    fn table_strategy() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec("[a-z]{1,8}( [a-z]{1,8})?", 1..12)
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_and_bounded(a in "[a-zA-Z ]{0,14}", b in "[a-zA-Z ]{0,14}") {
            let s = similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, similarity(&b, &a));
            prop_assert_eq!(similarity(&a, &a), 1.0);
        }

        #[test]
        fn similarity_agrees_with_oracle(a in "[a-z ]{0,12}", b in "[a-z ]{0,12}") {
            prop_assert!((similarity(&a, &b) - oracle_similarity(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn raising_threshold_never_adds_matches(query in "[a-z]{1,8}", table in table_strategy()) {
            let doc = format!(
                "id: p\nallergies:\n{}",
                table.iter().enumerate()
                    .map(|(i, t)| format!("  - {{term: '{t} {i}', kind: allergy}}\n"))
                    .collect::<String>()
            );
            let kb = load_kb(&doc).unwrap();
            let loose = find_most_similar_word_allergies(&kb, &query, DEFAULT_THRESHOLD);
            let strict = find_most_similar_word_allergies(&kb, &query, STRICT_THRESHOLD);
            for m in &strict.matches {
                prop_assert!(loose.terms().contains(&m.term.as_str()));
            }
            for r in [&loose, &strict] {
                prop_assert!(r.matches.iter().all(|m| m.score >= r.threshold_used));
                prop_assert!(r.matches.windows(2).all(|w| w[0].score >= w[1].score));
            }
        }
    }
}
