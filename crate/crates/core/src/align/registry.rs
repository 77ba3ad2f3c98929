use std::collections::HashMap;

use crate::error::{Error, Result};

/// Organ keys of the structured-annotation schema, in the order it lists them.
pub const DEFAULT_ORGANS: [&str; 39] = [
    "Adrenal gland",
    "Aorta",
    "Brain",
    "Breast",
    "Clavicle",
    "Colon",
    "Esophagus",
    "Femur",
    "Gallbladder",
    "Gluteus muscles",
    "Great vessels",
    "Heart",
    "Hip/Pelvis",
    "Humerus",
    "Iliopsoas",
    "Inferior vena cava",
    "Kidney",
    "Liver",
    "Lung",
    "Lymph nodes",
    "Pancreas",
    "Paraspinal muscles",
    "Pericardium",
    "Pleura",
    "Portal vein and splenic vein",
    "Prostate",
    "Pulmonary vessels",
    "Ribs",
    "Scapula",
    "Skull",
    "Small intestine",
    "Spinal cord",
    "Spine/Vertebrae",
    "Spleen",
    "Sternum",
    "Stomach",
    "Thyroid gland",
    "Trachea",
    "Urinary bladder",
];

/// Key reserved for the study-level note.
pub const GENERAL_KEY: &str = "general";

/// Ordered organ vocabulary. The order fixes how composed text lists organs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrganRegistry {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for OrganRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_ORGANS.iter().map(|s| s.to_string())).expect("built-in registry is valid")
    }
}

impl OrganRegistry {
    pub fn new(names: impl IntoIterator<Item = String>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() || n == GENERAL_KEY {
                return Err(Error::config(format!("invalid organ name `{n}`")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate organ name `{n}`")));
            }
        }
        Ok(OrganRegistry { names, index })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_order_is_alphabetical() {
        let r = OrganRegistry::default();
        let mut sorted = r.names().to_vec();
        sorted.sort();
        assert_eq!(sorted, r.names());
        assert_eq!(r.index_of("Liver"), Some(17));
    }

    #[test]
    fn rejects_duplicates_and_reserved_key() {
        assert!(OrganRegistry::new(["A".to_string(), "A".to_string()]).is_err());
        assert!(OrganRegistry::new(["general".to_string()]).is_err());
    }
}
