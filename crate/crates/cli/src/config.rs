//! The JSON run configuration and its validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use flaresim::metrics::LossWeights;
use flaresim::netblocks::ModelConfig;
use flaresim::optics::{circular_aperture, PsfSampling};
use flaresim::svrender::CompositeRecipe;
use flaresim::zernike::{AnchorGrid, TurbulenceConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsSection {
    /// Pupil samples per side.
    pub grid_size: usize,
    pub radius_frac: f64,
    pub kernel_size: usize,
    pub fft_size: usize,
    pub anchor_rows: usize,
    pub anchor_cols: usize,
}

impl Default for OpticsSection {
    fn default() -> Self {
        Self {
            grid_size: 64,
            radius_frac: 1.0,
            kernel_size: 33,
            fft_size: 128,
            anchor_rows: 3,
            anchor_cols: 3,
        }
    }
}

impl OpticsSection {
    pub fn sampling(&self) -> PsfSampling {
        PsfSampling {
            kernel_size: self.kernel_size,
            fft_size: self.fft_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSection {
    /// Number of basis kernels kept from the decomposition.
    pub rank: usize,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self { rank: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Output resolution of synthesized pairs.
    pub height: usize,
    pub width: usize,
    pub flare: bool,
    pub background: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            flare: true,
            background: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub peak: f64,
    pub mask_threshold: f64,
    /// Gamma applied when decoding evaluated PNGs; 1 scores encoded values.
    pub decode_gamma: f64,
    pub loss_weights: LossWeights,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            peak: 1.0,
            mask_threshold: 0.5,
            decode_gamma: 1.0,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub optics: OpticsSection,
    pub turbulence: TurbulenceConfig,
    pub basis: BasisSection,
    pub augment: AugmentSection,
    pub composite: CompositeRecipe,
    pub model: ModelConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Checks every section; a failure names the offending key.
    pub fn validate(&self) -> Result<(), String> {
        let o = &self.optics;
        let ctx = |key: &str, e: flaresim::Error| format!("{key}: {e}");
        if o.grid_size < 8 {
            return Err(format!(
                "optics.grid_size: must be >= 8, got {}",
                o.grid_size
            ));
        }
        circular_aperture(o.grid_size, o.radius_frac).map_err(|e| ctx("optics.radius_frac", e))?;
        if o.fft_size < o.grid_size {
            return Err(format!(
                "optics.fft_size: must be >= grid_size ({}), got {}",
                o.grid_size, o.fft_size
            ));
        }
        if o.kernel_size == 0 || o.kernel_size > o.fft_size {
            return Err(format!(
                "optics.kernel_size: must be in 1..={}, got {}",
                o.fft_size, o.kernel_size
            ));
        }
        let a = &self.augment;
        if a.height == 0 || a.width == 0 {
            return Err("augment.height/width: must be > 0".into());
        }
        let anchors = AnchorGrid::new(o.anchor_rows, o.anchor_cols, a.height, a.width)
            .map_err(|e| ctx("optics.anchor_rows/anchor_cols", e))?;
        if self.basis.rank == 0 || self.basis.rank > anchors.len() {
            return Err(format!(
                "basis.rank: must be in 1..={}, got {}",
                anchors.len(),
                self.basis.rank
            ));
        }
        self.turbulence
            .validate()
            .map_err(|e| ctx("turbulence", e))?;
        self.composite.validate().map_err(|e| ctx("composite", e))?;
        self.model.validate().map_err(|e| ctx("model", e))?;
        let e = &self.eval;
        if !(e.peak > 0.0 && e.peak.is_finite()) {
            return Err(format!("eval.peak: must be > 0, got {}", e.peak));
        }
        if !(0.0..=1.0).contains(&e.mask_threshold) {
            return Err(format!(
                "eval.mask_threshold: must lie in [0, 1], got {}",
                e.mask_threshold
            ));
        }
        if !(e.decode_gamma > 0.0 && e.decode_gamma.is_finite()) {
            return Err(format!(
                "eval.decode_gamma: must be > 0, got {}",
                e.decode_gamma
            ));
        }
        e.loss_weights
            .validate()
            .map_err(|e| ctx("eval.loss_weights", e))?;
        Ok(())
    }

    pub fn anchors(&self) -> AnchorGrid {
        AnchorGrid::new(
            self.optics.anchor_rows,
            self.optics.anchor_cols,
            self.augment.height,
            self.augment.width,
        )
        .expect("validated")
    }
}

/// Sets `a.b.c` in a JSON tree. The value is parsed as JSON when possible
/// and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("--set expects KEY=VALUE, got {assignment:?}"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(format!("--set: empty key segment in {key:?}"));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("--set: {} is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = obj
            .entry(*part)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads the optional config file, applies `--set` overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, String> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let at = e.path().to_string();
        format!("config key {at}: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"optics": {"kernel_sise": 3}}"#).unwrap();
        let e = load(Some(&p), &[]).unwrap_err();
        assert!(e.contains("optics"), "{e}");
        assert!(e.contains("kernel_sise"), "{e}");
        std::fs::write(&p, r#"{"optics": {"kernel_size": "big"}}"#).unwrap();
        assert!(load(Some(&p), &[])
            .unwrap_err()
            .contains("optics.kernel_size"));
    }

    #[test]
    fn overrides_win() {
        let cfg = load(
            None,
            &[
                "optics.kernel_size=17".into(),
                "turbulence.base_sigma=0".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.optics.kernel_size, 17);
        assert_eq!(cfg.turbulence.base_sigma, 0.0);
        assert!(load(None, &["optics.kernel_size".into()]).is_err());
        assert!(load(None, &["basis.rank=100".into()])
            .unwrap_err()
            .starts_with("basis.rank"));
    }
}
