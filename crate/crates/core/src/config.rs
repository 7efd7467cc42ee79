//! Flat UTF-8 `key = value` configuration files with optional sections.
//!
//! ```text
//! # comment
//! seeds = 0,1,2
//! [uda]
//! iterations = 2000
//! [arm active]
//! strategy = active
//! ```
//!
//! A section header is `[kind]` or `[kind name]`. Keys before the first
//! header belong to the root section.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::acquisition::{AcquisitionConfig, Strategy};
use crate::datasets::ToyShapesConfig;
use crate::error::{io_err, Error, Result};
use crate::uda::UdaConfig;
use crate::weak::WeakDaConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Section {
    pub kind: String,
    pub name: Option<String>,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Document {
    pub root: Section,
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::default();
        let mut current: Option<Section> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header")))?;
                let mut parts = inner.split_whitespace();
                let kind = parts
                    .next()
                    .ok_or_else(|| Error::Config(format!("line {line_no}: empty section header")))?
                    .to_string();
                let name = parts.next().map(str::to_string);
                if parts.next().is_some() {
                    return Err(Error::Config(format!("line {line_no}: section header has extra words")));
                }
                if let Some(s) = current.take() {
                    doc.sections.push(s);
                }
                current = Some(Section { kind, name, line: line_no, entries: Vec::new() });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value, got {line:?}")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            let entry = Entry { key: key.to_string(), value: value.trim().to_string(), line: line_no };
            match &mut current {
                Some(s) => s.entries.push(entry),
                None => doc.root.entries.push(entry),
            }
        }
        if let Some(s) = current {
            doc.sections.push(s);
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn sections_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.kind == kind)
    }

    pub fn section(&self, kind: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.kind == kind)
    }
}

pub fn parse_value<T: FromStr>(entry: &Entry) -> Result<T> {
    entry.value.parse().map_err(|_| {
        Error::Config(format!("line {}: cannot parse {} = {:?}", entry.line, entry.key, entry.value))
    })
}

fn parse_bool(entry: &Entry) -> Result<bool> {
    match entry.value.as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {}: {} expects true/false", entry.line, entry.key))),
    }
}

/// A configuration struct settable key by key.
pub trait KeyValue {
    /// Returns `Ok(false)` for an unknown key.
    fn set(&mut self, entry: &Entry) -> Result<bool>;
    /// Every key with its current value, in a stable order.
    fn pairs(&self) -> Vec<(&'static str, String)>;

    fn apply(&mut self, section: &Section) -> Result<()> {
        for e in &section.entries {
            if !self.set(e)? {
                return Err(Error::Config(format!("line {}: unknown key {:?}", e.line, e.key)));
            }
        }
        Ok(())
    }

    fn to_kv(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl KeyValue for UdaConfig {
    fn set(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "iterations" => self.iterations = parse_value(e)?,
            "batch_source" => self.batch_source = parse_value(e)?,
            "batch_target" => self.batch_target = parse_value(e)?,
            "lr_G" | "lr_g" => self.lr_g = parse_value(e)?,
            "momentum" => self.momentum = parse_value(e)?,
            "weight_decay" => self.weight_decay = parse_value(e)?,
            "lr_D" | "lr_d" => self.lr_d = parse_value(e)?,
            "lambda_adv" => self.lambda_adv = parse_value(e)?,
            "seed" => self.seed = parse_value(e)?,
            "width" => self.width = parse_value(e)?,
            "disc_width" => self.disc_width = parse_value(e)?,
            "poly_power" => self.poly_power = parse_value(e)?,
            "aux_head" => self.aux_head = parse_bool(e)?,
            "aux_weight" => self.aux_weight = parse_value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("iterations", self.iterations.to_string()),
            ("batch_source", self.batch_source.to_string()),
            ("batch_target", self.batch_target.to_string()),
            ("lr_G", self.lr_g.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_D", self.lr_d.to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("seed", self.seed.to_string()),
            ("width", self.width.to_string()),
            ("disc_width", self.disc_width.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("aux_head", self.aux_head.to_string()),
            ("aux_weight", self.aux_weight.to_string()),
        ]
    }
}

impl KeyValue for WeakDaConfig {
    fn set(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "target_label_dir" => self.target_label_dir = Some(PathBuf::from(&e.value)),
            "oracle_weight" => self.oracle_weight = parse_value(e)?,
            "pseudo_weight" => self.pseudo_weight = parse_value(e)?,
            _ => return self.base.set(e),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.base.pairs();
        if let Some(dir) = &self.target_label_dir {
            out.push(("target_label_dir", dir.display().to_string()));
        }
        out.push(("oracle_weight", self.oracle_weight.to_string()));
        out.push(("pseudo_weight", self.pseudo_weight.to_string()));
        out
    }
}

impl KeyValue for AcquisitionConfig {
    fn set(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "strategy" => self.strategy = e.value.parse::<Strategy>()?,
            "K" | "k" => self.k = parse_value(e)?,
            "points_per_patch" => self.points_per_patch = parse_value(e)?,
            "seed" => self.seed = parse_value(e)?,
            "grid_m" => self.grid_m = parse_value(e)?,
            "grid_n" => self.grid_n = parse_value(e)?,
            "pseudo_dense" => self.pseudo_dense = parse_bool(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("strategy", self.strategy.to_string()),
            ("K", self.k.to_string()),
            ("points_per_patch", self.points_per_patch.to_string()),
            ("seed", self.seed.to_string()),
            ("grid_m", self.grid_m.to_string()),
            ("grid_n", self.grid_n.to_string()),
            ("pseudo_dense", self.pseudo_dense.to_string()),
        ]
    }
}

impl KeyValue for ToyShapesConfig {
    fn set(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "seed" => self.seed = parse_value(e)?,
            "n_source" => self.n_source = parse_value(e)?,
            "n_target" => self.n_target = parse_value(e)?,
            "n_val" => self.n_val = parse_value(e)?,
            "height" => self.height = parse_value(e)?,
            "width" => self.width = parse_value(e)?,
            "hue_shift" => self.gap.hue_shift = parse_value(e)?,
            "noise_sigma" => self.gap.noise_sigma = parse_value(e)?,
            "texture_strength" => self.gap.texture_strength = parse_value(e)?,
            "blur_radius" => self.gap.blur_radius = parse_value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("n_source", self.n_source.to_string()),
            ("n_target", self.n_target.to_string()),
            ("n_val", self.n_val.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("hue_shift", self.gap.hue_shift.to_string()),
            ("noise_sigma", self.gap.noise_sigma.to_string()),
            ("texture_strength", self.gap.texture_strength.to_string()),
            ("blur_radius", self.gap.blur_radius.to_string()),
        ]
    }
}

/// Parses a whole file as the root section of one config struct.
pub fn load_flat<T: KeyValue + Default>(path: impl AsRef<Path>) -> Result<T> {
    let doc = Document::load(path.as_ref())?;
    if let Some(s) = doc.sections.first() {
        return Err(Error::Config(format!("line {}: sections are not allowed here", s.line)));
    }
    let mut cfg = T::default();
    cfg.apply(&doc.root)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_root_and_sections() {
        let doc = Document::parse("a = 1\n# c\n\n[uda]\niterations = 5\n[arm active]\nstrategy=active\n").unwrap();
        assert_eq!(doc.root.get("a").unwrap().value, "1");
        assert_eq!(doc.sections.len(), 2);
        assert_eq!(doc.sections[1].name.as_deref(), Some("active"));
        assert_eq!(doc.sections[1].get("strategy").unwrap().line, 7);
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let err = Document::parse("a = 1\nbroken\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(Document::parse("[arm a b]\n").is_err());
        assert!(Document::parse("[arm\n").is_err());
    }

    #[test]
    fn uda_round_trip_and_unknown_keys() {
        let mut cfg = UdaConfig { iterations: 17, lambda_adv: 0.25, aux_head: true, ..Default::default() };
        cfg.seed = 9;
        let text = cfg.to_kv();
        let mut back = UdaConfig::default();
        back.apply(&Document::parse(&text).unwrap().root).unwrap();
        assert_eq!(back, cfg);
        let mut c = UdaConfig::default();
        let err = c.apply(&Document::parse("itrations = 3\n").unwrap().root).unwrap_err();
        assert!(err.to_string().contains("itrations"));
        let err = c.apply(&Document::parse("iterations = many\n").unwrap().root).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn acquisition_keys() {
        let mut a = AcquisitionConfig::default();
        a.apply(&Document::parse("strategy = random\nK = 3\npseudo_dense = false\n").unwrap().root).unwrap();
        assert_eq!((a.strategy, a.k, a.pseudo_dense), (Strategy::Random, 3, false));
    }
}
