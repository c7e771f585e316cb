use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::IclConfig;
use crate::error::{Error, Result};
use crate::features::NetConfig;
use crate::ot::SinkhornConfig;
use crate::pose::RansacConfig;
use crate::scene::SceneSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Net,
    Icl,
    Regression,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Net => "net",
            Method::Icl => "icl",
            Method::Regression => "regression",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        !matches!(self, Method::Icl)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net" => Ok(Method::Net),
            "icl" => Ok(Method::Icl),
            "regression" => Ok(Method::Regression),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub rotation_thresholds_deg: Vec<f64>,
    pub translation_thresholds_m: Vec<f64>,
    /// `(angle_sigma_deg, footprint_sigma_m)` levels for the noise sweep.
    pub noise_levels: Vec<(f64, f64)>,
    /// Noise is clipped at this many sigmas during sweeps.
    pub noise_clip_factor: f64,
    pub overlap_levels: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rotation_thresholds_deg: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 45.0],
            translation_thresholds_m: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0],
            noise_levels: vec![(0.0, 0.0), (1.0, 0.02), (2.0, 0.04), (3.0, 0.06), (4.0, 0.08), (5.0, 0.1)],
            noise_clip_factor: 2.5,
            overlap_levels: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

/// Everything a CLI run depends on, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub scene: SceneSpec,
    pub ransac: RansacConfig,
    pub icl: IclConfig,
    pub sinkhorn: SinkhornConfig,
    /// Number of top matches handed to RANSAC, capped at `M·N`.
    pub top_k: usize,
    pub seed: u64,
    pub num_scenes: usize,
    pub method: Method,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::desk(),
            scene: SceneSpec::default(),
            ransac: RansacConfig::default(),
            icl: IclConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            top_k: 200,
            seed: 0,
            num_scenes: 200,
            method: Method::Net,
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// The full-size network instead of the desk profile.
    pub fn full_profile() -> Self {
        Self {
            net: NetConfig::full(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.scene.noise.validate()?;
        self.ransac.validate()?;
        self.icl.validate()?;
        self.train.validate()?;
        if !(self.sinkhorn.lambda > 0.0) || self.sinkhorn.iterations == 0 {
            return Err(Error::Config("Sinkhorn needs lambda > 0 and iterations >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if !(self.scene.overlap > 0.0 && self.scene.overlap <= 1.0) {
            return Err(Error::Config("overlap must lie in (0, 1]".into()));
        }
        let (lo, hi) = self.scene.pose.rotation_deg;
        let (tlo, thi) = self.scene.pose.translation_m;
        if !(lo <= hi && tlo <= thi) {
            return Err(Error::Config("pose ranges must be ordered".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str, label: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            path: label.into(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.method = Method::Icl;
        cfg.scene.noise.angle_sigma = 1.25;
        let back = RunConfig::from_json(&cfg.to_json(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "method": "regression"}"#, Path::new("mem")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.method, Method::Regression);
        assert_eq!(cfg.net, NetConfig::desk());
        assert_eq!(cfg.top_k, 200);
    }

    #[test]
    fn invalid_documents_rejected() {
        assert!(RunConfig::from_json(r#"{"top_k": 0}"#, Path::new("mem")).is_err());
        assert!(RunConfig::from_json(r#"{"method": "magic"}"#, Path::new("mem")).is_err());
        assert!(matches!(
            RunConfig::from_json("{", Path::new("mem")),
            Err(Error::Json { .. })
        ));
    }
}
