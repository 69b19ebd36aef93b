//! Flat dotted-key JSON configs (`{"weights.alpha": 0.1, "epochs": 50}`),
//! layered over a typed default.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// Flattens nested objects into `a.b.c` keys. Arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

pub fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Config of type `T` assembled from its defaults, an optional file and
/// explicit overrides, in increasing precedence.
pub struct Layered<T> {
    flat: Map<String, Value>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Serialize + DeserializeOwned + Default> Layered<T> {
    pub fn new() -> Self {
        let defaults = serde_json::to_value(T::default()).expect("defaults serialize");
        Layered {
            flat: flatten(&defaults),
            _marker: std::marker::PhantomData,
        }
    }

    /// Applies a config file. A missing or malformed file is a usage error.
    pub fn file(mut self, path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(self) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !value.is_object() {
            return Err(Failure::Usage(format!("config {} must be a JSON object", path.display())));
        }
        for (key, v) in flatten(&value) {
            self = self.set(&key, v)?;
        }
        Ok(self)
    }

    pub fn set(mut self, key: &str, value: impl Into<Value>) -> Result<Self, Failure> {
        if !self.flat.contains_key(key) {
            return Err(Failure::Usage(format!("unknown config key `{key}`")));
        }
        self.flat.insert(key.to_string(), value.into());
        Ok(self)
    }

    pub fn set_opt<V: Into<Value>>(self, key: &str, value: Option<V>) -> Result<Self, Failure> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(self),
        }
    }

    pub fn build(&self) -> Result<T, Failure> {
        serde_json::from_value(unflatten(&self.flat)).map_err(|e| Failure::Usage(format!("invalid config: {e}")))
    }
}

/// The flat form of a resolved config, as written next to run outputs.
pub fn to_flat<T: Serialize>(config: &T) -> Value {
    Value::Object(flatten(&serde_json::to_value(config).expect("configs serialize")))
}
