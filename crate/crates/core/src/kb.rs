//! ECP knowledge base: products, the two contraindication tables, and the
//! alias table used for re-labeling lay or specific terms onto categories.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::normalize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KbError {
    #[error("syntax error in knowledge base: {0}")]
    Syntax(String),
    #[error("product `{product}` references unknown {table} term `{term}`")]
    DanglingReference {
        product: String,
        table: Table,
        term: String,
    },
    #[error("term `{term}` appears more than once (in {first} and {second})")]
    DuplicateTerm { term: String, first: Table, second: Table },
    #[error("duplicate product `{0}`")]
    DuplicateProduct(String),
    #[error("alias `{alias}` maps to unknown category `{category}`")]
    UnknownCategory { alias: String, category: String },
    #[error("alias `{0}` collides with a canonical term or another alias")]
    DuplicateAlias(String),
    #[error("term `{0}` has an empty condition")]
    EmptyCondition(String),
    #[error("`{0}` is not a canonical term of the {1} table")]
    UnknownTerm(String, Table),
    #[error("conditional term `{term}` needs an answer: {condition}")]
    UnansweredCondition { term: String, condition: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    #[default]
    Allergies,
    MedicationsAndDiseases,
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Table::Allergies => "allergies",
            Table::MedicationsAndDiseases => "medications_and_diseases",
        })
    }
}

impl std::str::FromStr for Table {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allergies" => Ok(Table::Allergies),
            "medications_and_diseases" | "medications" => Ok(Table::MedicationsAndDiseases),
            other => Err(format!("unknown table `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Allergy,
    Disease,
    Medication,
    State,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContraindicationEntry {
    pub term: String,
    #[serde(skip)]
    pub table: Table,
    pub kind: EntryKind,
    /// Qualifier that must hold for the contraindication to apply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    /// Key of the follow-up prompt that resolves the condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_question: Option<String>,
}

impl ContraindicationEntry {
    pub fn is_conditional(&self) -> bool {
        self.condition.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryAlias {
    pub alias: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Product {
    pub id: String,
    pub name: String,
    pub active_substance: String,
    #[serde(default)]
    pub excipients: Vec<String>,
    #[serde(default)]
    pub contraindicating_allergies: Vec<String>,
    #[serde(default)]
    pub contraindicating_conditions: Vec<String>,
}

impl Product {
    fn contraindicated_by(&self, term: &str) -> bool {
        self.contraindicating_allergies
            .iter()
            .chain(&self.contraindicating_conditions)
            .any(|t| t == term)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct KbDocument {
    id: String,
    #[serde(default)]
    products: Vec<Product>,
    #[serde(default)]
    allergies: Vec<ContraindicationEntry>,
    #[serde(default)]
    medications_and_diseases: Vec<ContraindicationEntry>,
    #[serde(default)]
    aliases: Vec<CategoryAlias>,
}

/// Immutable once loaded; share it behind an `Arc`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub id: String,
    pub products: Vec<Product>,
    allergies: Vec<ContraindicationEntry>,
    medications_and_diseases: Vec<ContraindicationEntry>,
    aliases: Vec<CategoryAlias>,
    by_normalized: HashMap<String, (Table, usize)>,
}

pub fn load_kb(document: &str) -> Result<KnowledgeBase, KbError> {
    let doc: KbDocument = serde_yaml::from_str(document).map_err(|e| KbError::Syntax(e.to_string()))?;
    KnowledgeBase::from_document(doc)
}

impl KnowledgeBase {
    pub fn empty(id: &str) -> Self {
        Self::from_document(KbDocument {
            id: id.to_string(),
            products: vec![],
            allergies: vec![],
            medications_and_diseases: vec![],
            aliases: vec![],
        })
        .expect("empty kb is valid")
    }

    fn from_document(mut doc: KbDocument) -> Result<Self, KbError> {
        let mut by_normalized: HashMap<String, (Table, usize)> = HashMap::new();
        for (table, entries) in [
            (Table::Allergies, &mut doc.allergies),
            (Table::MedicationsAndDiseases, &mut doc.medications_and_diseases),
        ] {
            for (i, entry) in entries.iter_mut().enumerate() {
                entry.table = table;
                if entry.condition.as_deref().is_some_and(|c| c.trim().is_empty()) {
                    return Err(KbError::EmptyCondition(entry.term.clone()));
                }
                if let Some((first, _)) = by_normalized.insert(normalize(&entry.term), (table, i)) {
                    return Err(KbError::DuplicateTerm {
                        term: entry.term.clone(),
                        first,
                        second: table,
                    });
                }
            }
        }

        let mut alias_keys = HashSet::new();
        for alias in &doc.aliases {
            let category_ok = doc.medications_and_diseases.iter().any(|e| e.term == alias.category);
            if !category_ok {
                return Err(KbError::UnknownCategory {
                    alias: alias.alias.clone(),
                    category: alias.category.clone(),
                });
            }
            let key = normalize(&alias.alias);
            if by_normalized.contains_key(&key) || !alias_keys.insert(key) {
                return Err(KbError::DuplicateAlias(alias.alias.clone()));
            }
        }

        let mut names = HashSet::new();
        let mut ids = HashSet::new();
        for product in &doc.products {
            if !names.insert(product.name.as_str()) || !ids.insert(product.id.as_str()) {
                return Err(KbError::DuplicateProduct(product.name.clone()));
            }
            let allergy_refs = product
                .excipients
                .iter()
                .chain(&product.contraindicating_allergies)
                .map(|t| (t, Table::Allergies));
            let condition_refs = product
                .contraindicating_conditions
                .iter()
                .map(|t| (t, Table::MedicationsAndDiseases));
            for (term, table) in allergy_refs.chain(condition_refs) {
                let entries = match table {
                    Table::Allergies => &doc.allergies,
                    Table::MedicationsAndDiseases => &doc.medications_and_diseases,
                };
                if !entries.iter().any(|e| &e.term == term) {
                    return Err(KbError::DanglingReference {
                        product: product.name.clone(),
                        table,
                        term: term.clone(),
                    });
                }
            }
        }

        Ok(Self {
            id: doc.id,
            products: doc.products,
            allergies: doc.allergies,
            medications_and_diseases: doc.medications_and_diseases,
            aliases: doc.aliases,
            by_normalized,
        })
    }

    pub fn entries(&self, table: Table) -> &[ContraindicationEntry] {
        match table {
            Table::Allergies => &self.allergies,
            Table::MedicationsAndDiseases => &self.medications_and_diseases,
        }
    }

    /// Canonical terms of a table, in file order.
    pub fn terms(&self, table: Table) -> Vec<&str> {
        self.entries(table).iter().map(|e| e.term.as_str()).collect()
    }

    pub fn aliases(&self) -> &[CategoryAlias] {
        &self.aliases
    }

    /// Looks a canonical term up by its normalized spelling, in either table.
    pub fn entry(&self, term: &str) -> Option<&ContraindicationEntry> {
        self.by_normalized
            .get(&normalize(term))
            .map(|&(table, i)| &self.entries(table)[i])
    }

    pub fn alias_category(&self, term: &str) -> Option<&str> {
        let key = normalize(term);
        self.aliases
            .iter()
            .find(|a| normalize(&a.alias) == key)
            .map(|a| a.category.as_str())
    }

    pub fn product(&self, id: &str) -> Option<&Product> {
        self.products.iter().find(|p| p.id == id)
    }

    /// Partitions all products into safe and excluded for a set of canonical
    /// terms. A conditional term acts only when its answer is `true`.
    pub fn products_excluded_by<S: AsRef<str>>(
        &self,
        matched_terms: &[S],
        condition_answers: &BTreeMap<String, bool>,
    ) -> Result<Partition, KbError> {
        self.partition_restricted(matched_terms, condition_answers, None)
    }

    pub(crate) fn partition_restricted<S: AsRef<str>>(
        &self,
        matched_terms: &[S],
        condition_answers: &BTreeMap<String, bool>,
        table: Option<Table>,
    ) -> Result<Partition, KbError> {
        let mut active: Vec<&str> = Vec::new();
        for term in matched_terms {
            let term = term.as_ref();
            let entry = self
                .entry(term)
                .filter(|e| table.is_none_or(|t| e.table == t))
                .ok_or_else(|| KbError::UnknownTerm(term.to_string(), table.unwrap_or(Table::Allergies)))?;
            if let Some(condition) = &entry.condition {
                match condition_answers.get(&entry.term) {
                    None => {
                        return Err(KbError::UnansweredCondition {
                            term: entry.term.clone(),
                            condition: condition.clone(),
                        })
                    }
                    Some(false) => continue,
                    Some(true) => {}
                }
            }
            if !active.contains(&entry.term.as_str()) {
                active.push(entry.term.as_str());
            }
        }

        let mut partition = Partition::default();
        for product in &self.products {
            let reasons: Vec<String> = active
                .iter()
                .filter(|t| product.contraindicated_by(t))
                .map(|t| t.to_string())
                .collect();
            let product_ref = ProductRef::from(product);
            if reasons.is_empty() {
                partition.safe.push(product_ref);
            } else {
                partition.excluded.push(Exclusion {
                    product: product_ref,
                    reasons,
                });
            }
        }
        Ok(partition)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProductRef {
    pub id: String,
    pub name: String,
}

impl From<&Product> for ProductRef {
    fn from(p: &Product) -> Self {
        Self {
            id: p.id.clone(),
            name: p.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub product: ProductRef,
    /// Canonical terms responsible, in the order they were supplied.
    pub reasons: Vec<String>,
}

/// Every product lands in exactly one of `safe` or `excluded`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Partition {
    pub safe: Vec<ProductRef>,
    pub excluded: Vec<Exclusion>,
}

impl Partition {
    pub fn safe_ids(&self) -> Vec<&str> {
        self.safe.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn excluded_ids(&self) -> Vec<&str> {
        self.excluded.iter().map(|e| e.product.id.as_str()).collect()
    }

    /// Product is excluded when either side excludes it; reasons are merged.
    pub fn merge(&self, other: &Partition, product_order: &[Product]) -> Partition {
        let mut out = Partition::default();
        for product in product_order {
            let mut reasons: Vec<String> = Vec::new();
            for side in [self, other] {
                if let Some(ex) = side.excluded.iter().find(|e| e.product.id == product.id) {
                    for r in &ex.reasons {
                        if !reasons.contains(r) {
                            reasons.push(r.clone());
                        }
                    }
                }
            }
            if reasons.is_empty() {
                out.safe.push(ProductRef::from(product));
            } else {
                out.excluded.push(Exclusion {
                    product: ProductRef::from(product),
                    reasons,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> KnowledgeBase {
        load_kb(include_str!("../../../fixtures/kb/ecp_kb.yaml")).unwrap()
    }

    fn answers(pairs: &[(&str, bool)]) -> BTreeMap<String, bool> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn fixture_loads_with_expected_shape() {
        let kb = fixture();
        assert_eq!(kb.products.len(), 3);
        assert_eq!(kb.terms(Table::Allergies).len(), 12);
        assert_eq!(kb.terms(Table::MedicationsAndDiseases).len(), 10);
        assert!(kb.terms(Table::Allergies).contains(&"lactose monohydrate"));
    }

    #[test]
    fn terms_are_duplicate_free() {
        let kb = fixture();
        for table in [Table::Allergies, Table::MedicationsAndDiseases] {
            let terms = kb.terms(table);
            let set: HashSet<_> = terms.iter().collect();
            assert_eq!(set.len(), terms.len());
        }
    }

    #[test]
    fn empty_document_is_an_empty_kb() {
        let kb = load_kb("id: empty\n").unwrap();
        assert!(kb.products.is_empty());
        assert!(kb.terms(Table::Allergies).is_empty());
        let p = kb.products_excluded_by::<&str>(&[], &BTreeMap::new()).unwrap();
        assert_eq!(p, Partition::default());
    }

    #[test]
    fn dangling_allergy_reference() {
        let doc = r#"
id: bad
products:
  - id: p
    name: P
    active_substance: x
    contraindicating_allergies: [xyzzy]
"#;
        assert_eq!(
            load_kb(doc),
            Err(KbError::DanglingReference {
                product: "P".into(),
                table: Table::Allergies,
                term: "xyzzy".into()
            })
        );
    }

    #[test]
    fn cross_table_duplicates_rejected() {
        let doc = r#"
id: bad
allergies:
  - {term: Asthma, kind: allergy}
medications_and_diseases:
  - {term: asthma, kind: disease}
"#;
        assert!(matches!(load_kb(doc), Err(KbError::DuplicateTerm { .. })));
    }

    #[test]
    fn alias_must_point_at_condition_term() {
        let doc = r#"
id: bad
medications_and_diseases:
  - {term: Asthma, kind: disease}
aliases:
  - {alias: wheeze, category: Porphyria}
"#;
        assert!(matches!(load_kb(doc), Err(KbError::UnknownCategory { .. })));
    }

    #[test]
    fn no_terms_means_all_safe() {
        let kb = fixture();
        let p = kb.products_excluded_by::<&str>(&[], &BTreeMap::new()).unwrap();
        assert_eq!(p.safe.len(), 3);
        assert!(p.excluded.is_empty());
    }

    #[test]
    fn asthma_answered_false_excludes_nothing() {
        let kb = fixture();
        let p = kb
            .products_excluded_by(&["Asthma"], &answers(&[("Asthma", false)]))
            .unwrap();
        assert!(p.excluded.is_empty());
    }

    #[test]
    fn unanswered_condition_is_an_error() {
        let kb = fixture();
        assert!(matches!(
            kb.products_excluded_by(&["Asthma"], &BTreeMap::new()),
            Err(KbError::UnansweredCondition { term, .. }) if term == "Asthma"
        ));
    }

    #[test]
    fn lactose_exclusion_matches_brute_force() {
        let kb = fixture();
        let p = kb
            .products_excluded_by(&["lactose monohydrate"], &answers(&[("lactose monohydrate", true)]))
            .unwrap();
        // exhaustive over (product, term): excluded iff the product lists the term
        let expected: Vec<&str> = kb
            .products
            .iter()
            .filter(|prod| {
                prod.contraindicating_allergies
                    .iter()
                    .any(|a| a == "lactose monohydrate")
            })
            .map(|prod| prod.id.as_str())
            .collect();
        assert_eq!(p.excluded_ids(), expected);
        assert!(!expected.is_empty() && expected.len() < kb.products.len());
        for ex in &p.excluded {
            assert_eq!(ex.reasons, ["lactose monohydrate"]);
        }
    }

    #[test]
    fn unknown_term_rejected() {
        let kb = fixture();
        assert!(matches!(
            kb.products_excluded_by(&["blue car"], &BTreeMap::new()),
            Err(KbError::UnknownTerm(..))
        ));
    }
}
