//! Name-keyed factories for interchangeable strategies (proxies, oracles,
//! perturbers, scripted policies). Implementations are selected at runtime
//! from configuration or command-line flags.

use std::collections::BTreeMap;
use std::fmt;

/// String settings handed to a factory, e.g. `addr=127.0.0.1:7000`.
pub type Settings = BTreeMap<String, String>;

pub type Factory<T> = Box<dyn Fn(&Settings) -> Result<Box<T>, RegistryError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("no {kind} named `{name}` (available: {available})")]
    Unknown {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("{kind} `{name}`: missing setting `{key}`")]
    MissingSetting {
        kind: &'static str,
        name: String,
        key: String,
    },
    #[error("{kind} `{name}`: bad setting `{key}`: {reason}")]
    BadSetting {
        kind: &'static str,
        name: String,
        key: String,
        reason: String,
    },
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            factories: BTreeMap::new(),
        }
    }

    /// Registers a factory, replacing any previous one with the same name.
    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&Settings) -> Result<Box<T>, RegistryError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_owned(), Box::new(factory));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, settings: &Settings) -> Result<Box<T>, RegistryError> {
        match self.factories.get(name) {
            Some(factory) => factory(settings),
            None => Err(RegistryError::Unknown {
                kind: self.kind,
                name: name.to_owned(),
                available: self.names().collect::<Vec<_>>().join(", "),
            }),
        }
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.factories.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Reads a required setting.
pub fn required<'a>(kind: &'static str, name: &str, settings: &'a Settings, key: &str) -> Result<&'a str, RegistryError> {
    settings
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| RegistryError::MissingSetting {
            kind,
            name: name.to_owned(),
            key: key.to_owned(),
        })
}

/// Reads and parses an optional setting.
pub fn parsed<V: std::str::FromStr>(kind: &'static str, name: &str, settings: &Settings, key: &str, default: V) -> Result<V, RegistryError>
where
    V::Err: fmt::Display,
{
    match settings.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|e: V::Err| RegistryError::BadSetting {
            kind,
            name: name.to_owned(),
            key: key.to_owned(),
            reason: e.to_string(),
        }),
    }
}
