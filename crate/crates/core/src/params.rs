//! Named parameter tensors and their on-disk manifest.
//!
//! Models expose their parameters through [`Parameterized`]; the manifest
//! is a JSON file listing every parameter next to one tensor dump per entry.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{dump_tensor, load_tensor, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "flaresim-params";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trainable weight.
    Learned,
    /// Non-trainable state such as running statistics.
    Buffer,
}

/// How a parameter is filled by [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    shape: Vec<usize>,
    pub data: Vec<f64>,
    kind: ParamKind,
    init: Init,
}

impl Param {
    pub fn new(shape: Vec<usize>, kind: ParamKind, init: Init) -> Self {
        let n = shape.iter().product();
        let value = if init == Init::Ones { 1.0 } else { 0.0 };
        Self {
            shape,
            data: vec![value; n],
            kind,
            init,
        }
    }

    pub fn learned(shape: Vec<usize>, init: Init) -> Self {
        Self::new(shape, ParamKind::Learned, init)
    }

    pub fn buffer(shape: Vec<usize>, init: Init) -> Self {
        Self::new(shape, ParamKind::Buffer, init)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn init(&self) -> Init {
        self.init
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameterized {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

impl Parameterized for Param {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((prefix.to_owned(), self));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((prefix.to_owned(), self));
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, item) in self.iter().enumerate() {
            item.params(&join_name(prefix, &i.to_string()), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.params_mut(&join_name(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`Parameterized`] for a struct by visiting the listed fields
/// in order, each under its field name.
#[macro_export]
macro_rules! impl_parameterized {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Parameterized for $ty {
            fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::params::Param)>) {
                $( $crate::params::Parameterized::params(
                    &self.$field, &$crate::params::join_name(prefix, stringify!($field)), out); )*
            }
            fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::params::Param)>) {
                $( $crate::params::Parameterized::params_mut(
                    &mut self.$field, &$crate::params::join_name(prefix, stringify!($field)), out); )*
            }
        }
    };
}

/// Deterministic initialization in visiting order. Uniform draws are
/// rounded to `f32` so a dump and reload reproduce them exactly.
pub fn init_params(model: &mut impl Parameterized, rng: &mut SeededRng) {
    for (_, p) in model.named_params_mut() {
        match p.init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                for v in p.data.iter_mut() {
                    *v = rng.uniform(-bound, bound) as f32 as f64;
                }
            }
            Init::Zeros => p.data.fill(0.0),
            Init::Ones => p.data.fill(1.0),
        }
    }
}

/// Zeroes every learned parameter; buffers keep their values.
pub fn zero_learned(model: &mut impl Parameterized) {
    for (_, p) in model.named_params_mut() {
        if p.kind == ParamKind::Learned {
            p.data.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Architecture description needed to rebuild the model.
    pub meta: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::TensorFormat(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT || m.version != 1 {
            return Err(Error::TensorFormat(format!(
                "{}: unsupported manifest {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }
}

/// Writes one tensor dump per parameter plus the manifest into `dir`.
pub fn save_params(
    model: &impl Parameterized,
    meta: serde_json::Value,
    dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, p) in model.named_params() {
        let file = format!("{name}.fftd");
        let shape = if p.shape.is_empty() {
            vec![1]
        } else {
            p.shape.clone()
        };
        dump_tensor(dir.join(&file), &Tensor::from_f64(shape, &p.data)?)?;
        entries.push(ManifestEntry {
            name,
            shape: p.shape.clone(),
            kind: p.kind,
            file,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_owned(),
        version: 1,
        meta,
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let tmp = crate::image::tmp_sibling(&path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Fills `model` from a manifest directory. Every parameter must be present
/// with a matching shape, and the manifest may not list unknown names.
pub fn load_params(model: &mut impl Parameterized, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    load_params_from(model, &manifest, dir)
}

pub fn load_params_from(
    model: &mut impl Parameterized,
    manifest: &Manifest,
    dir: &Path,
) -> Result<()> {
    let by_name: BTreeMap<&str, &ManifestEntry> = manifest
        .params
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    if by_name.len() != manifest.params.len() {
        return Err(Error::TensorFormat(
            "manifest lists a parameter twice".into(),
        ));
    }
    let mut seen = HashSet::new();
    for (name, p) in model.named_params_mut() {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::TensorFormat(format!("manifest is missing parameter {name}")))?;
        if entry.shape != p.shape {
            return Err(Error::shape(
                format!("{name} {:?}", p.shape),
                format!("{:?}", entry.shape),
            ));
        }
        if Path::new(&entry.file).components().count() != 1 {
            return Err(Error::TensorFormat(format!(
                "{name}: file must be a plain name, got {}",
                entry.file
            )));
        }
        let t = load_tensor(dir.join(&entry.file))?;
        if t.len() != p.len() {
            return Err(Error::shape(format!("{name}: {} values", p.len()), t.len()));
        }
        let values = t.to_f64();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::TensorFormat(format!("{name}: non-finite value")));
        }
        p.data = values;
        seen.insert(name);
    }
    if let Some(extra) = manifest.params.iter().find(|e| !seen.contains(&e.name)) {
        return Err(Error::TensorFormat(format!(
            "manifest lists unknown parameter {}",
            extra.name
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Toy {
        weight: Param,
        stats: Vec<Param>,
    }

    impl_parameterized!(Toy { weight, stats });

    fn toy() -> Toy {
        Toy {
            weight: Param::learned(vec![2, 3], Init::Uniform { fan_in: 3 }),
            stats: vec![
                Param::buffer(vec![2], Init::Ones),
                Param::learned(vec![2], Init::Zeros),
            ],
        }
    }

    #[test]
    fn names_follow_fields() {
        let t = toy();
        let names: Vec<String> = t.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "stats.0", "stats.1"]);
        assert_eq!(t.param_count(), 10);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let (mut a, mut b) = (toy(), toy());
        init_params(&mut a, &mut SeededRng::new(3));
        init_params(&mut b, &mut SeededRng::new(3));
        assert_eq!(a, b);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.weight.data.iter().all(|v| v.abs() <= bound));
        assert_eq!(a.stats[0].data, [1.0, 1.0]);
        zero_learned(&mut a);
        assert!(a.weight.data.iter().all(|&v| v == 0.0));
        assert_eq!(a.stats[0].data, [1.0, 1.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = toy();
        init_params(&mut a, &mut SeededRng::new(4));
        save_params(&a, serde_json::json!({"k": 1}), dir.path()).unwrap();
        let mut b = toy();
        load_params(&mut b, dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(Manifest::read(dir.path()).unwrap().meta["k"], 1);
    }

    #[test]
    fn load_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let a = toy();
        save_params(&a, serde_json::Value::Null, dir.path()).unwrap();
        let mut wrong = Toy {
            weight: Param::learned(vec![3, 2], Init::Zeros),
            ..toy()
        };
        assert!(matches!(
            load_params(&mut wrong, dir.path()),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut short = Toy {
            stats: vec![Param::buffer(vec![2], Init::Ones)],
            ..toy()
        };
        assert!(load_params(&mut short, dir.path()).is_err());
        let mut longer = Toy {
            stats: vec![Param::buffer(vec![2], Init::Ones); 3],
            ..toy()
        };
        assert!(load_params(&mut longer, dir.path()).is_err());
    }
}
