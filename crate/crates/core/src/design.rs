//! Build regression design mappings from stratum-label components.
//!
//! Stratum labels are opaque strings formed by joining covariate levels with
//! `|` (e.g. `F|30-39|Wallonia`). The core estimators never look inside a
//! label; this module is the one place that splits labels, turning a list of
//! named components and terms into a [`RegressionSpec`].
//!
//! Terms are component names (`"age"`) for main effects or colon-joined names
//! (`"sex:age"`) for full-factorial indicator interactions. Levels are coded
//! with reference-cell indicators; the reference level of each component is
//! the first level encountered in table order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Link, RegressionSpec, StratumTable};

/// Declarative model description, e.g. parsed from a model config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignConfig {
    #[serde(default = "default_link")]
    pub link: Link,
    /// Names of the `|`-separated label components, in order.
    pub components: Vec<String>,
    /// Main effects and interactions over component names.
    pub terms: Vec<String>,
}

fn default_link() -> Link {
    Link::Logit
}

impl DesignConfig {
    /// Resolve the config against a stratum table into a fitted-model spec.
    ///
    /// Every table label must split into exactly `components.len()` parts.
    /// The returned design maps each table label to its h(z) vector; labels
    /// outside the table get no mapping.
    pub fn build(&self, table: &StratumTable) -> Result<RegressionSpec> {
        if self.components.is_empty() {
            return Err(Error::Input("model config lists no components".into()));
        }
        if self.terms.is_empty() {
            return Err(Error::Input("model config lists no terms".into()));
        }

        let n_comp = self.components.len();
        let mut level_index: Vec<Vec<String>> = vec![Vec::new(); n_comp];
        let mut split_labels: Vec<(String, Vec<usize>)> = Vec::with_capacity(table.len());

        for (label, _) in table.iter() {
            let parts: Vec<&str> = label.split('|').collect();
            if parts.len() != n_comp {
                return Err(Error::Input(format!(
                    "stratum label `{label}` has {} component(s), model config declares {}",
                    parts.len(),
                    n_comp
                )));
            }
            let mut idxs = Vec::with_capacity(n_comp);
            for (c, part) in parts.iter().enumerate() {
                let levels = &mut level_index[c];
                let idx = match levels.iter().position(|l| l == part) {
                    Some(i) => i,
                    None => {
                        levels.push(part.to_string());
                        levels.len() - 1
                    }
                };
                idxs.push(idx);
            }
            split_labels.push((label.to_string(), idxs));
        }

        // Each term expands into indicator columns over non-reference levels.
        // A column is described by (component, level) pairs whose indicators
        // are multiplied together.
        let mut columns: Vec<Vec<(usize, usize)>> = Vec::new();
        for term in &self.terms {
            let comp_ids: Vec<usize> = term
                .split(':')
                .map(|name| {
                    self.components.iter().position(|c| c == name).ok_or_else(|| {
                        Error::Input(format!(
                            "term `{term}` references unknown component `{name}`"
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let mut dup = comp_ids.clone();
            dup.sort_unstable();
            dup.dedup();
            if dup.len() != comp_ids.len() {
                return Err(Error::Input(format!(
                    "term `{term}` repeats a component"
                )));
            }
            // Cartesian product of non-reference levels across the term's components.
            let mut partial: Vec<Vec<(usize, usize)>> = vec![Vec::new()];
            for &c in &comp_ids {
                let n_levels = level_index[c].len();
                let mut next = Vec::new();
                for combo in &partial {
                    for level in 1..n_levels {
                        let mut ext = combo.clone();
                        ext.push((c, level));
                        next.push(ext);
                    }
                }
                partial = next;
            }
            columns.extend(partial);
        }

        let p = 1 + columns.len();
        let mut map: HashMap<String, Vec<f64>> = HashMap::with_capacity(split_labels.len());
        for (label, idxs) in &split_labels {
            let mut h = Vec::with_capacity(p);
            h.push(1.0);
            for col in &columns {
                let on = col.iter().all(|&(c, level)| idxs[c] == level);
                h.push(if on { 1.0 } else { 0.0 });
            }
            map.insert(label.clone(), h);
        }

        Ok(RegressionSpec::new(self.link, p, move |label: &str| {
            map.get(label).cloned()
        }))
    }
}
