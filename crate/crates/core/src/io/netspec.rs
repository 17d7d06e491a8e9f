//! JSON network descriptions.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::graph::{LayerSpec, NetworkGraph};

#[derive(Serialize)]
struct Document<'a> {
    name: &'a str,
    layers: &'a [LayerSpec],
}

#[derive(Deserialize)]
struct RawDocument {
    name: String,
    layers: Vec<Value>,
}

/// Parse a JSON network description. `origin` labels errors.
pub fn parse_netspec(text: &str, origin: &Path) -> Result<NetworkGraph> {
    let raw: RawDocument = serde_json::from_str(text)
        .map_err(|e| Error::format(origin, format!("{} at line {} column {}", e, e.line(), e.column())))?;
    let mut layers = Vec::with_capacity(raw.layers.len());
    for (i, value) in raw.layers.into_iter().enumerate() {
        let name = value
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{i}"));
        let spec: LayerSpec = serde_json::from_value(value.clone()).map_err(|e| Error::layer(&name, e.to_string()))?;
        reject_unknown_fields(&value, &spec)?;
        layers.push(spec);
    }
    NetworkGraph::new(raw.name, layers)
}

fn reject_unknown_fields(value: &Value, spec: &LayerSpec) -> Result<()> {
    let given: BTreeSet<&String> = value.as_object().map(|o| o.keys().collect()).unwrap_or_default();
    let known = serde_json::to_value(spec).expect("layer specs serialize");
    let known: BTreeSet<&String> = known.as_object().expect("object").keys().collect();
    if let Some(extra) = given.difference(&known).next() {
        return Err(Error::layer(
            &spec.name,
            format!("unknown field `{extra}` for type `{}`", spec.kind.type_name()),
        ));
    }
    Ok(())
}

pub fn load_netspec(path: &Path) -> Result<NetworkGraph> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not valid UTF-8"))?;
    parse_netspec(&text, path)
}

/// Canonical form: layers in declaration order, every parameter explicit.
pub fn serialize_netspec(graph: &NetworkGraph) -> String {
    let doc = Document {
        name: graph.name(),
        layers: graph.layers(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("network specs serialize");
    text.push('\n');
    text
}

pub fn save_netspec(graph: &NetworkGraph, path: &Path) -> Result<()> {
    write_atomic(path, serialize_netspec(graph).as_bytes())
}
