//! Registration pipelines, per-scene benchmarking, and robustness sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{icl_register, regression_register};
use crate::error::{Error, Result};
use crate::features::{Forward, TrunkParams};
use crate::harness::config::{Method, RunConfig};
use crate::harness::metrics::{quartiles, recall_curve, Quartiles, RecallPoint};
use crate::ot::{cost_matrix, sinkhorn_robust, topk, CostMatrix, MatchList, MatchWeightMatrix, SinkhornConfig};
use crate::plucker::{rotation_error, translation_error, PluckerLine};
use crate::pose::{ransac_register, RansacConfig, RegistrationResult};
use crate::scene::{synth_scene, NoiseConfig, ScenePair, SceneSpec};

/// Wall-clock seconds spent in each stage of one registration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub features_s: f64,
    pub matching_s: f64,
    pub pose_s: f64,
}

impl Timing {
    pub fn total(&self) -> f64 {
        self.features_s + self.matching_s + self.pose_s
    }
}

/// Trained parameters available to a run.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub net: Option<TrunkParams>,
    pub regression: Option<TrunkParams>,
}

impl Models {
    fn for_method(&self, method: Method) -> Result<Option<&TrunkParams>> {
        let p = match method {
            Method::Icl => return Ok(None),
            Method::Net => self.net.as_ref(),
            Method::Regression => self.regression.as_ref(),
        };
        p.map(Some)
            .ok_or_else(|| Error::MissingCheckpoint(method.name().to_string()))
    }
}

/// Output of the learned matcher on one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NetMatch {
    pub cost: CostMatrix,
    pub w: MatchWeightMatrix,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub matches: MatchList,
}

/// Features, matchability, cost matrix, Sinkhorn, and the top `min(top_k, M·N)` entries.
pub fn net_match(
    src: &[PluckerLine],
    dst: &[PluckerLine],
    params: &TrunkParams,
    sinkhorn: &SinkhornConfig,
    top_k: usize,
    timing: &mut Timing,
) -> Result<NetMatch> {
    let t0 = Instant::now();
    let mut f = Forward::new(params, false);
    let fs0 = f.subspace_encode(src)?;
    let ft0 = f.subspace_encode(dst)?;
    let (fs, ft) = f.attention_embed(fs0, ft0);
    timing.features_s += t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let r = f.matchability(fs, ft);
    let s = f.matchability(ft, fs);
    let xs = f.project(fs)?;
    let xt = f.project(ft)?;
    let t = &f.tape;
    let cost = cost_matrix(t.value(xs), t.value(xt));
    let r: Vec<f64> = t.value(r).iter().copied().collect();
    let s: Vec<f64> = t.value(s).iter().copied().collect();
    let w = sinkhorn_robust(&cost, &r, &s, sinkhorn)?;
    let k = top_k.min(src.len() * dst.len());
    let matches = topk(&w, k)?;
    timing.matching_s += t1.elapsed().as_secs_f64();
    Ok(NetMatch { cost, w, r, s, matches })
}

/// Registers one pair with `method`. `ransac` is passed separately so callers can vary its seed.
pub fn register_with(
    method: Method,
    src: &[PluckerLine],
    dst: &[PluckerLine],
    cfg: &RunConfig,
    ransac: &RansacConfig,
    models: &Models,
) -> Result<(RegistrationResult, Timing)> {
    let params = models.for_method(method)?;
    let mut timing = Timing::default();
    let result = match (method, params) {
        (Method::Net, Some(p)) => {
            let m = net_match(src, dst, p, &cfg.sinkhorn, cfg.top_k, &mut timing)?;
            let t = Instant::now();
            let res = ransac_register(&m.matches, src, dst, ransac);
            timing.pose_s = t.elapsed().as_secs_f64();
            res?
        }
        (Method::Regression, Some(p)) => {
            let t = Instant::now();
            let res = regression_register(src, dst, p);
            timing.pose_s = t.elapsed().as_secs_f64();
            res?
        }
        _ => {
            let t = Instant::now();
            let res = icl_register(src, dst, &cfg.icl);
            timing.pose_s = t.elapsed().as_secs_f64();
            res?
        }
    };
    Ok((result, timing))
}

pub fn register(
    method: Method,
    src: &[PluckerLine],
    dst: &[PluckerLine],
    cfg: &RunConfig,
    models: &Models,
) -> Result<(RegistrationResult, Timing)> {
    register_with(method, src, dst, cfg, &cfg.ransac, models)
}

/// One registration attempt. Errors are `None` when the registration failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub method: Method,
    pub scene: usize,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_m: Option<f64>,
    pub failure: Option<String>,
    /// Wall-clock, so it is kept out of the JSON report and written to `timings.csv` only.
    #[serde(skip)]
    pub timing: Timing,
}

impl SceneRow {
    pub fn rotation_or_inf(&self) -> f64 {
        self.rotation_error_deg.unwrap_or(f64::INFINITY)
    }

    pub fn translation_or_inf(&self) -> f64 {
        self.translation_error_m.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub scenes: usize,
    pub failures: usize,
    /// Failures enter as infinite errors (serialized as `null`).
    pub rotation_deg: Option<Quartiles>,
    pub translation_m: Option<Quartiles>,
    pub rotation_recall: Vec<RecallPoint>,
    pub translation_recall: Vec<RecallPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub rows: Vec<SceneRow>,
    pub summaries: Vec<MethodSummary>,
}

fn scene_ransac(cfg: &RunConfig, index: usize) -> RansacConfig {
    RansacConfig {
        seed: cfg.ransac.seed.wrapping_add(index as u64),
        ..cfg.ransac
    }
}

/// Evaluates every method on every scene. Scenes run in parallel; the report
/// depends only on the inputs. Per-scene failures become failure rows.
pub fn run_benchmark(
    label: &str,
    scenes: &[ScenePair],
    methods: &[Method],
    cfg: &RunConfig,
    models: &Models,
) -> Result<BenchmarkReport> {
    cfg.validate()?;
    for &m in methods {
        models.for_method(m)?;
    }
    let mut rows = Vec::with_capacity(scenes.len() * methods.len());
    for &method in methods {
        let per_scene: Vec<SceneRow> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, sc)| {
                let ransac = scene_ransac(cfg, i);
                match register_with(method, &sc.source, &sc.target, cfg, &ransac, models) {
                    Ok((res, timing)) => SceneRow {
                        method,
                        scene: i,
                        rotation_error_deg: Some(rotation_error(&sc.gt_pose.rotation, &res.pose.rotation)),
                        translation_error_m: Some(translation_error(&sc.gt_pose.translation, &res.pose.translation)),
                        failure: None,
                        timing,
                    },
                    Err(e) => SceneRow {
                        method,
                        scene: i,
                        rotation_error_deg: None,
                        translation_error_m: None,
                        failure: Some(e.to_string()),
                        timing: Timing::default(),
                    },
                }
            })
            .collect();
        rows.extend(per_scene);
    }
    let summaries = methods.iter().map(|&m| summarize(m, &rows, cfg)).collect();
    Ok(BenchmarkReport {
        label: label.to_string(),
        rows,
        summaries,
    })
}

fn summarize(method: Method, rows: &[SceneRow], cfg: &RunConfig) -> MethodSummary {
    let mine: Vec<&SceneRow> = rows.iter().filter(|r| r.method == method).collect();
    let rot: Vec<f64> = mine.iter().map(|r| r.rotation_or_inf()).collect();
    let tr: Vec<f64> = mine.iter().map(|r| r.translation_or_inf()).collect();
    MethodSummary {
        method,
        scenes: mine.len(),
        failures: mine.iter().filter(|r| r.failure.is_some()).count(),
        rotation_deg: quartiles(&rot),
        translation_m: quartiles(&tr),
        rotation_recall: recall_curve(&rot, &cfg.bench.rotation_thresholds_deg),
        translation_recall: recall_curve(&tr, &cfg.bench.translation_thresholds_m),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "inf".to_string(), |v| format!("{v:.17e}"))
}

impl BenchmarkReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-scene errors; failed registrations show `inf` and the error message.
    pub fn scenes_csv(&self) -> String {
        let mut s = String::from("method,scene,rotation_error_deg,translation_error_m,failure\n");
        for r in &self.rows {
            let failure = r.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method.name(),
                r.scene,
                fmt_opt(r.rotation_error_deg),
                fmt_opt(r.translation_error_m),
                failure
            ));
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("method,scene,features_s,matching_s,pose_s,total_s\n");
        for r in &self.rows {
            let t = &r.timing;
            s.push_str(&format!(
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                r.method.name(),
                r.scene,
                t.features_s,
                t.matching_s,
                t.pose_s,
                t.total()
            ));
        }
        s
    }

    /// `method,threshold,recall` rows for rotation (`translation = false`) or translation.
    pub fn recall_csv(&self, translation: bool) -> String {
        let unit = if translation { "threshold_m" } else { "threshold_deg" };
        let mut s = format!("method,{unit},recall\n");
        for m in &self.summaries {
            let curve = if translation { &m.translation_recall } else { &m.rotation_recall };
            for p in curve {
                s.push_str(&format!("{},{},{:.17e}\n", m.method.name(), p.threshold, p.recall));
            }
        }
        s
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        use crate::harness::io::write_text;
        write_text(&dir.join("report.json"), &self.to_json())?;
        write_text(&dir.join("scenes.csv"), &self.scenes_csv())?;
        write_text(&dir.join("timings.csv"), &self.timings_csv())?;
        write_text(&dir.join("recall_rotation.csv"), &self.recall_csv(false))?;
        write_text(&dir.join("recall_translation.csv"), &self.recall_csv(true))
    }
}

/// `count` scenes of `spec`; scene `i` uses stream `i` of `seed`.
pub fn synth_scenes(spec: &SceneSpec, seed: u64, count: usize) -> Result<Vec<ScenePair>> {
    (0..count)
        .into_par_iter()
        .map(|i| synth_scene(spec, seed, i as u64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub angle_sigma_deg: f64,
    pub footprint_sigma_m: f64,
    pub overlap: f64,
    pub report: BenchmarkReport,
}

/// One benchmark per noise level. All levels share the seed, so they see the
/// same line sets, poses, and subsets, with noise draws scaled by the level.
pub fn noise_sweep(cfg: &RunConfig, methods: &[Method], models: &Models) -> Result<Vec<SweepPoint>> {
    cfg.bench
        .noise_levels
        .iter()
        .map(|&(a, f)| {
            let spec = SceneSpec {
                noise: NoiseConfig::gaussian(a, f, cfg.bench.noise_clip_factor),
                ..cfg.scene
            };
            let scenes = synth_scenes(&spec, cfg.seed, cfg.num_scenes)?;
            let label = format!("noise a={a} f={f}");
            Ok(SweepPoint {
                angle_sigma_deg: a,
                footprint_sigma_m: f,
                overlap: spec.overlap,
                report: run_benchmark(&label, &scenes, methods, cfg, models)?,
            })
        })
        .collect()
}

/// One benchmark per overlap level, common seed across levels.
pub fn overlap_sweep(cfg: &RunConfig, methods: &[Method], models: &Models) -> Result<Vec<SweepPoint>> {
    cfg.bench
        .overlap_levels
        .iter()
        .map(|&overlap| {
            let spec = SceneSpec { overlap, ..cfg.scene };
            let scenes = synth_scenes(&spec, cfg.seed, cfg.num_scenes)?;
            Ok(SweepPoint {
                angle_sigma_deg: spec.noise.angle_sigma,
                footprint_sigma_m: spec.noise.footprint_sigma,
                overlap,
                report: run_benchmark(&format!("overlap {overlap}"), &scenes, methods, cfg, models)?,
            })
        })
        .collect()
}

/// Median errors per sweep point: `angle_sigma_deg,footprint_sigma_m,overlap,method,failures,median_rotation_deg,median_translation_m`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(
        "angle_sigma_deg,footprint_sigma_m,overlap,method,failures,median_rotation_deg,median_translation_m\n",
    );
    for p in points {
        for m in &p.report.summaries {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.angle_sigma_deg,
                p.footprint_sigma_m,
                p.overlap,
                m.method.name(),
                m.failures,
                fmt_opt(m.rotation_deg.map(|q| q.median).filter(|v| v.is_finite())),
                fmt_opt(m.translation_m.map(|q| q.median).filter(|v| v.is_finite())),
            ));
        }
    }
    s
}

/// Writes each point's report under `dir/<index>_<label>/` plus `dir/sweep.csv`.
pub fn write_sweep(dir: &std::path::Path, points: &[SweepPoint]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        let name: String = p
            .report
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
            .collect();
        p.report.write(&dir.join(format!("{i:02}_{name}")))?;
    }
    crate::harness::io::write_text(&dir.join("sweep.csv"), &sweep_csv(points))
}

/// Upper end of the per-axis rotation range whose scenes have the requested
/// median rotation angle. Bisection over a common seed, so the median is monotone in the bound.
pub fn calibrate_rotation_range(spec: &SceneSpec, seed: u64, count: usize, target_median_deg: f64) -> Result<f64> {
    let median_for = |hi: f64| -> Result<f64> {
        let s = SceneSpec {
            pose: crate::scene::PoseRanges {
                rotation_deg: (0.0, hi),
                ..spec.pose
            },
            ..*spec
        };
        let angles: Vec<f64> = synth_scenes(&s, seed, count)?
            .iter()
            .map(|sc| sc.gt_pose.rotation_angle_deg())
            .collect();
        Ok(crate::harness::metrics::median(&angles).unwrap_or(0.0))
    };
    let (mut lo, mut hi) = (0.0, 180.0);
    if median_for(hi)? < target_median_deg {
        return Err(Error::Config(format!("median rotation {target_median_deg} is out of reach")));
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if median_for(mid)? < target_median_deg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
