//! Text and JSON file formats.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plucker::{from_endpoints, PluckerLine, RigidTransform};
use crate::pose::RegistrationResult;
use crate::scene::ScenePair;

pub const LINESET_MAGIC: &str = "PLUECKER_LINES";
pub const LINESET_VERSION: &str = "v1";

/// Renders lines as `PLK` records with 17 significant digits.
pub fn format_lineset(lines: &[PluckerLine]) -> String {
    let mut s = format!("{LINESET_MAGIC} {LINESET_VERSION} {}\n", lines.len());
    for l in lines {
        s.push_str("PLK");
        for x in l.to_array() {
            s.push_str(&format!(" {x:.16e}"));
        }
        s.push('\n');
    }
    s
}

/// Parses a line-set file. Blank lines and `#` comments are skipped; `label`
/// names the source in error messages.
pub fn parse_lineset(text: &str, label: &str) -> Result<Vec<PluckerLine>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: label.to_string(),
        line,
        msg,
    };
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = rows.next().ok_or_else(|| err(1, "empty file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != LINESET_MAGIC {
        return Err(err(hline, format!("expected `{LINESET_MAGIC} {LINESET_VERSION} <count>`")));
    }
    if parts[1] != LINESET_VERSION {
        return Err(err(hline, format!("unsupported version `{}`", parts[1])));
    }
    let count: usize = parts[2]
        .parse()
        .map_err(|_| err(hline, format!("bad count `{}`", parts[2])))?;

    let mut lines = Vec::with_capacity(count);
    let mut last = hline;
    for (ln, row) in rows {
        last = ln;
        let fields: Vec<&str> = row.split_whitespace().collect();
        let kind = fields[0];
        if fields.len() != 7 {
            return Err(err(ln, format!("expected 6 numbers after `{kind}`, found {}", fields.len() - 1)));
        }
        let mut x = [0.0; 6];
        for (k, f) in fields[1..].iter().enumerate() {
            x[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(ln, format!("bad number `{f}`")))?;
        }
        let a = Vector3::new(x[0], x[1], x[2]);
        let b = Vector3::new(x[3], x[4], x[5]);
        let line = match kind {
            "PLK" => PluckerLine::from_stored(x),
            "SEG" => from_endpoints(&a, &b),
            other => return Err(err(ln, format!("unknown record `{other}`"))),
        }
        .map_err(|e| err(ln, e.to_string()))?;
        lines.push(line);
    }
    if lines.len() != count {
        return Err(err(last, format!("header announces {count} records, found {}", lines.len())));
    }
    Ok(lines)
}

pub fn read_lineset(path: &Path) -> Result<Vec<PluckerLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lineset(&text, &path.display().to_string())
}

pub fn write_lineset(path: &Path, lines: &[PluckerLine]) -> Result<()> {
    std::fs::write(path, format_lineset(lines)).map_err(|e| Error::io(path, e))
}

pub fn scene_to_json(scene: &ScenePair) -> String {
    serde_json::to_string_pretty(scene).expect("scene serializes")
}

pub fn read_scene(path: &Path) -> Result<ScenePair> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scene: ScenePair = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    scene.check_matches()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &ScenePair) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path, e))
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.json")
}

/// All `*.json` files of a directory, sorted by name.
pub fn list_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_scene_dir(dir: &Path) -> Result<Vec<ScenePair>> {
    list_scenes(dir)?.iter().map(|p| read_scene(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    /// Row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// `[w, x, y, z]`, `w >= 0`.
    pub quaternion: [f64; 4],
    pub inlier_pairs: Vec<(usize, usize)>,
    pub score_sum: f64,
    pub hypothesis_count: usize,
}

impl From<&RegistrationResult> for RegistrationRecord {
    fn from(r: &RegistrationResult) -> Self {
        let g = &r.pose;
        Self {
            rotation: crate::scene::pose_serde::to_row_major(&g.rotation),
            translation: [g.translation.x, g.translation.y, g.translation.z],
            quaternion: g.quaternion(),
            inlier_pairs: r.inlier_pairs.clone(),
            score_sum: r.score_sum,
            hypothesis_count: r.hypothesis_count,
        }
    }
}

impl RegistrationRecord {
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(
            nalgebra::Matrix3::from_row_slice(&self.rotation),
            Vector3::from(self.translation),
        )
    }
}

pub fn registration_to_json(r: &RegistrationResult) -> String {
    serde_json::to_string_pretty(&RegistrationRecord::from(r)).expect("record serializes")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plucker::from_point_direction;
    use crate::scene::{synth_scene, SceneSpec};

    #[test]
    fn lineset_round_trip_is_exact() {
        let scene = synth_scene(&SceneSpec::default(), 5, 0).unwrap();
        let text = format_lineset(&scene.source);
        let back = parse_lineset(&text, "mem").unwrap();
        assert_eq!(back, scene.source);
        assert_eq!(format_lineset(&back), text);
    }

    #[test]
    fn segments_are_converted() {
        let text = "PLUECKER_LINES v1 2\n# comment\nSEG 0 0 0 2 0 0\n\nPLK 0 0 1 1 0 0\n";
        let ls = parse_lineset(text, "mem").unwrap();
        let want = from_point_direction(&Vector3::zeros(), &Vector3::x()).unwrap();
        assert_eq!(ls[0], want);
        assert_eq!(ls[1].moment(), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn errors_name_the_line() {
        let bad_header = "PLUECKER_LINEZ v1 1\nPLK 1 0 0 0 0 0\n";
        match parse_lineset(bad_header, "f.txt") {
            Err(Error::Parse { path, line, .. }) => assert_eq!((path.as_str(), line), ("f.txt", 1)),
            other => panic!("{other:?}"),
        }
        let short = "PLUECKER_LINES v1 2\nPLK 1 0 0 0 0 0\nPLK 1 0 0 0 0\n";
        assert!(matches!(parse_lineset(short, "f"), Err(Error::Parse { line: 3, .. })));
        let count = "PLUECKER_LINES v1 3\nPLK 1 0 0 0 0 0\n";
        assert!(matches!(parse_lineset(count, "f"), Err(Error::Parse { line: 2, .. })));
        let not_line = "PLUECKER_LINES v1 1\nPLK 1 0 0 1 0 0\n";
        assert!(matches!(parse_lineset(not_line, "f"), Err(Error::Parse { line: 2, .. })));
        let seg = "PLUECKER_LINES v1 1\nSEG 1 1 1 1 1 1\n";
        assert!(matches!(parse_lineset(seg, "f"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn scene_round_trip() {
        let scene = synth_scene(&SceneSpec::default(), 6, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(scene_file_name(2));
        write_scene(&p, &scene).unwrap();
        assert_eq!(read_scene(&p).unwrap(), scene);
        assert_eq!(list_scenes(dir.path()).unwrap(), vec![p]);
    }

    #[test]
    fn registration_record_round_trip() {
        let g = RigidTransform::from_axis_angle(&Vector3::new(0.0, 0.6, 0.8), 0.3, Vector3::new(1.0, -2.0, 0.5));
        let r = RegistrationResult {
            pose: g,
            inlier_pairs: vec![(0, 1), (4, 2)],
            score_sum: 0.125,
            hypothesis_count: 7,
        };
        let rec: RegistrationRecord = serde_json::from_str(&registration_to_json(&r)).unwrap();
        assert_eq!(rec.pose(), g);
        assert_eq!(rec.inlier_pairs, r.inlier_pairs);
        assert!(rec.quaternion[0] >= 0.0);
    }
}
