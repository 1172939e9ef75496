//! Name-keyed factories for interchangeable strategies (optimizers, decode
//! strategies, prototype samplers, ...). Each family exposes a `registry()`
//! function returning a [`Registry`] populated with its built-in variants;
//! configs and the CLI select a variant by name.

use std::collections::BTreeMap;

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub type Factory<T> = fn(&KeyValues) -> Result<Box<T>>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<T>) -> &mut Self {
        self.entries.insert(name, factory);
        self
    }

    pub fn with(mut self, name: &'static str, factory: Factory<T>) -> Self {
        self.register(name, factory);
        self
    }

    pub fn create(&self, name: &str, options: &KeyValues) -> Result<Box<T>> {
        let factory = self.entries.get(name).ok_or_else(|| Error::Lookup {
            what: self.kind,
            name: name.to_string(),
        })?;
        factory(options)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}
