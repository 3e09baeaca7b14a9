//! Run manifests: enough to re-run a command and get the same bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use otrack_core::config::{parse_kv, render_kv};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Canonical arguments after the binary name, paths made absolute and
    /// `--config` dropped in favour of `config`.
    pub args: Vec<String>,
    /// Effective configuration as `key = value` text.
    pub config: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("command".into(), self.command.clone()),
            ("version".into(), self.version.clone()),
        ];
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
        }
        for (k, a) in self.args.iter().enumerate() {
            pairs.push((format!("arg.{k}"), a.clone()));
        }
        for (k, v) in parse_kv(&self.config).expect("config snapshot is rendered key = value text") {
            pairs.push((format!("config.{k}"), v));
        }
        for (k, o) in self.outputs.iter().enumerate() {
            pairs.push((format!("output.{k}"), o.clone()));
        }
        render_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| kv.get(k).cloned().with_context(|| format!("manifest lacks `{k}`"));
        let indexed = |prefix: &str| -> Result<Vec<String>> {
            let mut items: Vec<(usize, String)> = Vec::new();
            for (k, v) in &kv {
                if let Some(i) = k.strip_prefix(prefix) {
                    items.push((i.parse().with_context(|| format!("bad manifest key `{k}`"))?, v.clone()));
                }
            }
            items.sort();
            if items.iter().enumerate().any(|(i, (k, _))| i != *k) {
                bail!("manifest `{prefix}N` keys are not contiguous");
            }
            Ok(items.into_iter().map(|(_, v)| v).collect())
        };
        let config = render_kv(
            kv.iter()
                .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k, v.clone()))),
        );
        Ok(Self {
            command: get("command")?,
            version: get("version")?,
            seed: kv.get("seed").map(|s| s.parse()).transpose().context("manifest seed")?,
            args: indexed("arg.")?,
            config,
            outputs: indexed("output.")?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(FILE_NAME) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
