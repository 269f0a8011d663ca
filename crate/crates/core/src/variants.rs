//! The ablation ladder as named, pluggable model configurations.

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};

/// A named way of switching components on or off in a base configuration.
pub trait AblationVariant: Send + Sync {
    fn name(&self) -> &str;
    fn description(&self) -> &str;
    fn configure(&self, base: &ModelConfig) -> ModelConfig;
}

/// A variant defined by three switches: style diversification, DFE on every
/// stage, and the adversarial domain head.
pub struct Toggles {
    pub name: &'static str,
    pub description: &'static str,
    pub dda: bool,
    pub dfe: bool,
    pub domain_head: bool,
}

impl AblationVariant for Toggles {
    fn name(&self) -> &str {
        self.name
    }

    fn description(&self) -> &str {
        self.description
    }

    fn configure(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            dda: self.dda,
            dfe: vec![self.dfe; base.widths.len()],
            domain_head: self.domain_head,
            ..base.clone()
        }
    }
}

/// Variants in registration order.
pub struct Registry {
    variants: Vec<Box<dyn AblationVariant>>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry { variants: Vec::new() }
    }

    /// The four-step ladder: baseline, +DDA, +DDA+DFE, full.
    pub fn ladder() -> Self {
        let mut r = Registry::empty();
        for (name, description, dda, dfe, domain_head) in [
            ("baseline", "plain CNN with binary cross-entropy", false, false, false),
            ("dda", "baseline + style diversification", true, false, false),
            ("dda_dfe", "baseline + style diversification + dynamic feature extractor", true, true, false),
            ("full", "all components including the adversarial domain head", true, true, true),
        ] {
            r.register(Box::new(Toggles {
                name,
                description,
                dda,
                dfe,
                domain_head,
            }))
            .unwrap();
        }
        r
    }

    pub fn register(&mut self, variant: Box<dyn AblationVariant>) -> Result<()> {
        if self.get(variant.name()).is_ok() {
            return Err(Error::InvalidArgument(format!("variant `{}` already registered", variant.name())));
        }
        self.variants.push(variant);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&dyn AblationVariant> {
        self.variants
            .iter()
            .find(|v| v.name() == name)
            .map(|v| v.as_ref())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant `{name}` (known: {})",
                    self.names().collect::<Vec<_>>().join(", ")
                ))
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.variants.iter().map(|v| v.name())
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn AblationVariant> {
        self.variants.iter().map(|v| v.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_is_monotone() {
        let r = Registry::ladder();
        assert_eq!(r.names().collect::<Vec<_>>(), ["baseline", "dda", "dda_dfe", "full"]);
        let base = ModelConfig::default();
        let flags: Vec<(bool, bool, bool)> = r
            .iter()
            .map(|v| {
                let c = v.configure(&base);
                (c.dda, c.any_dfe(), c.domain_head)
            })
            .collect();
        assert_eq!(
            flags,
            [(false, false, false), (true, false, false), (true, true, false), (true, true, true)]
        );
        assert!(r.get("nope").is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut r = Registry::ladder();
        let dup = Toggles {
            name: "full",
            description: "",
            dda: true,
            dfe: true,
            domain_head: true,
        };
        assert!(r.register(Box::new(dup)).is_err());
    }
}
