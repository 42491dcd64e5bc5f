//! Run configuration assembly: defaults, then `RAE_WORKSPACE`, then a JSON
//! config file, then dotted `--key=value` overrides. Every key is checked
//! against the default configuration tree so typos fail with a suggestion.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rae::workflow::RunConfig;
use serde_json::{Map, Value};

pub const WORKSPACE_ENV: &str = "RAE_WORKSPACE";

pub fn default_tree() -> Value {
    serde_json::to_value(RunConfig::default()).expect("default config serializes")
}

/// Every leaf key of the default tree with its default value.
pub fn leaf_keys() -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", &default_tree(), &mut out);
    out
}

/// Help text listing every configuration key with its default.
pub fn keys_help() -> String {
    let mut s = String::from(
        "Configuration keys (override with --KEY=VALUE; values parse as JSON, else as strings):\n",
    );
    for (k, v) in leaf_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!(
        "\nThe workspace defaults to ${WORKSPACE_ENV} when set, else ./workspace.\n"
    ));
    s
}

fn all_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push(key.clone());
            all_paths(child, &key, out);
        }
    }
}

fn suggestion(bad: &str) -> String {
    let mut paths = Vec::new();
    all_paths(&default_tree(), "", &mut paths);
    let leaf = bad.rsplit('.').next().unwrap_or(bad);
    let best = paths
        .iter()
        .map(|p| {
            let p_leaf = p.rsplit('.').next().unwrap_or(p);
            let score = strsim::jaro_winkler(bad, p).max(strsim::jaro_winkler(leaf, p_leaf) * 0.98);
            (score, p)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((score, p)) if score > 0.7 => format!("; did you mean `{p}`?"),
        _ => String::new(),
    }
}

fn unknown_key(path: &str) -> anyhow::Error {
    anyhow!("unknown config key `{path}`{}", suggestion(path))
}

/// Checks that every object key of `given` exists at the same place in the
/// defaults. Subtrees whose default is not an object (lists, optional values,
/// enums) are accepted as whole values and checked by deserialization.
fn check_keys(defaults: &Value, given: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(d), Value::Object(g)) = (defaults, given) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match d.get(k) {
                Some(dv) => check_keys(dv, v, &path)?,
                None if d.is_empty() => {}
                None => return Err(unknown_key(&path)),
            }
        }
    }
    Ok(())
}

fn deep_merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `--key=value` (or `key=value`).
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{arg}` must have the form --key=value"))?;
    if key.is_empty() {
        bail!("override `{arg}` has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted path. Object segments must exist in the defaults; numeric
/// segments index existing list elements (or append at the end).
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let defaults = default_tree();
    let segments: Vec<&str> = key.split('.').collect();
    let mut node = root;
    let mut dnode = Some(&defaults);
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let path = segments[..=i].join(".");
        if let Ok(idx) = seg.parse::<usize>() {
            let list = node
                .as_array_mut()
                .ok_or_else(|| anyhow!("`{}` is not a list", segments[..i].join(".")))?;
            if idx == list.len() {
                list.push(Value::Object(Map::new()));
            }
            let len = list.len();
            let slot = list
                .get_mut(idx)
                .ok_or_else(|| anyhow!("index {idx} out of range for `{}` (length {len})", segments[..i].join(".")))?;
            dnode = None;
            if last {
                *slot = value;
                return Ok(());
            }
            node = slot;
            continue;
        }
        let d_child = match dnode {
            Some(Value::Object(d)) => match d.get(*seg) {
                Some(c) => Some(c),
                None => return Err(unknown_key(&path)),
            },
            _ => None,
        };
        dnode = d_child;
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{}` is not an object", segments[..i].join(".")))?;
        if last {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        node = obj.entry(seg.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

pub fn workspace_default() -> Option<String> {
    std::env::var(WORKSPACE_ENV).ok().filter(|w| !w.is_empty())
}

/// Builds the tree of a run configuration from its sources.
pub fn assemble_tree(file: Option<&Path>, overrides: &[String]) -> Result<Value> {
    let defaults = default_tree();
    let mut tree = defaults.clone();
    if let Some(ws) = workspace_default() {
        tree["workspace"] = Value::String(ws);
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let given: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !given.is_object() {
            bail!("config {} must be a JSON object", path.display());
        }
        check_keys(&defaults, &given, "")?;
        deep_merge(&mut tree, given);
    }
    for arg in overrides {
        let (key, value) = parse_override(arg)?;
        set_path(&mut tree, &key, value)?;
    }
    Ok(tree)
}

pub fn from_tree(tree: Value) -> Result<RunConfig> {
    let config: RunConfig = serde_json::from_value(tree).context("invalid configuration")?;
    config.validate()?;
    Ok(config)
}

pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    from_tree(assemble_tree(file, overrides)?)
}
