//! Class labels and label sets.

use std::fmt;

/// One class: a dense index plus a display name.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassLabel {
    pub id: usize,
    pub name: String,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)
    }
}

/// Ordered set of class labels with dense ids `0..k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<ClassLabel>,
}

impl LabelSet {
    /// Builds a label set from names; ids follow the given order.
    /// Panics if names repeat — a label set with duplicates is meaningless.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        let labels: Vec<ClassLabel> = names
            .iter()
            .enumerate()
            .map(|(id, n)| ClassLabel {
                id,
                name: n.as_ref().to_string(),
            })
            .collect();
        for i in 0..labels.len() {
            for j in (i + 1)..labels.len() {
                assert_ne!(labels[i].name, labels[j].name, "duplicate class name");
            }
        }
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, id: usize) -> &ClassLabel {
        &self.labels[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassLabel> {
        self.labels.iter().find(|l| l.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassLabel> {
        self.labels.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }
}

impl Default for LabelSet {
    /// The three-class chest-radiograph layout.
    fn default() -> Self {
        LabelSet::from_names(&["COVID-19", "NORMAL", "VIRAL_PNEUMONIA"])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_set_is_three_dense_classes() {
        let set = LabelSet::default();
        assert_eq!(set.len(), 3);
        assert_eq!(set.get(0).name, "COVID-19");
        assert_eq!(set.get(2).id, 2);
        assert_eq!(set.by_name("NORMAL").unwrap().id, 1);
        assert!(set.by_name("BACTERIAL").is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate class name")]
    fn duplicate_names_rejected() {
        LabelSet::from_names(&["A", "A"]);
    }
}
