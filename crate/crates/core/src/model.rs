//! Static head geometry, deformation units and the landmark correspondence.
//!
//! Model file layout (UTF-8, `#` comment lines ignored):
//!
//! ```text
//! VERTICES
//! x y z
//! TRIANGLES
//! i j k
//! SHAPE_UNITS
//! unit <name>
//! target <vertex> <dx> <dy> <dz>
//! ACTION_UNITS
//! unit <name>
//! target <vertex> <dx> <dy> <dz>
//! ```
//!
//! Correspondence files hold `<fp68_index> <vertex_index>` lines, optionally
//! followed by `interp <fp68_index> <vertex> <weight> ...` rules that place the
//! landmarks without a direct vertex.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Number of landmarks in the FP68 layout.
pub const FP68_LEN: usize = 68;
/// Number of landmark-to-vertex pairs in a correspondence.
pub const CORRESPONDENCE_LEN: usize = 37;

const BUNDLED_MODEL: &str = include_str!("../data/candide3_emotion.model");
const BUNDLED_CORRESPONDENCE: &str = include_str!("../data/fp68_default.corr");

/// A named linear vertex deformation, scaled by one coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationUnit {
    pub name: String,
    pub targets: Vec<(usize, Vector3<f64>)>,
}

impl DeformationUnit {
    /// FACS ids encoded in a leading `AU<id>/<id>...` token of the name.
    ///
    /// `"AU26/27 jaw drop"` yields `[26, 27]`; names without the prefix yield
    /// an empty list.
    pub fn facs_ids(&self) -> Vec<u32> {
        let Some(first) = self.name.split_whitespace().next() else {
            return Vec::new();
        };
        let Some(ids) = first.strip_prefix("AU") else {
            return Vec::new();
        };
        ids.split('/').filter_map(|s| s.parse().ok()).collect()
    }

    pub fn displacement(&self, vertex: usize) -> Option<&Vector3<f64>> {
        self.targets
            .iter()
            .find(|(v, _)| *v == vertex)
            .map(|(_, d)| d)
    }
}

/// Candide-style head: static vertex cloud plus shape and action units.
#[derive(Debug, Clone, PartialEq)]
pub struct CandideModel {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub shape_units: Vec<DeformationUnit>,
    pub action_units: Vec<DeformationUnit>,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Vertices,
    Triangles,
    ShapeUnits,
    ActionUnits,
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("expected a number, got {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("expected an index, got {tok:?}")))
}

/// Lines that carry content, with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let l = raw.trim();
        (!l.is_empty() && !l.starts_with('#')).then_some((i + 1, l))
    })
}

impl CandideModel {
    pub fn dim_shape(&self) -> usize {
        self.shape_units.len()
    }

    pub fn dim_action(&self) -> usize {
        self.action_units.len()
    }

    /// The model shipped with the crate (15 shape units, 8 action units).
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_MODEL).expect("bundled model is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut section = Section::None;
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut shape_units: Vec<DeformationUnit> = Vec::new();
        let mut action_units: Vec<DeformationUnit> = Vec::new();

        for (ln, line) in content_lines(text) {
            match line {
                "VERTICES" => section = Section::Vertices,
                "TRIANGLES" => section = Section::Triangles,
                "SHAPE_UNITS" => section = Section::ShapeUnits,
                "ACTION_UNITS" => section = Section::ActionUnits,
                _ => {
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    match section {
                        Section::None => {
                            return Err(Error::parse(ln, "content before any section header"))
                        }
                        Section::Vertices => {
                            if toks.len() != 3 {
                                return Err(Error::parse(ln, "vertex needs 3 coordinates"));
                            }
                            vertices.push(Point3::new(
                                parse_f64(toks[0], ln)?,
                                parse_f64(toks[1], ln)?,
                                parse_f64(toks[2], ln)?,
                            ));
                        }
                        Section::Triangles => {
                            if toks.len() != 3 {
                                return Err(Error::parse(ln, "triangle needs 3 indices"));
                            }
                            triangles.push([
                                parse_usize(toks[0], ln)?,
                                parse_usize(toks[1], ln)?,
                                parse_usize(toks[2], ln)?,
                            ]);
                        }
                        Section::ShapeUnits | Section::ActionUnits => {
                            let units = if section == Section::ShapeUnits {
                                &mut shape_units
                            } else {
                                &mut action_units
                            };
                            match toks[0] {
                                "unit" => {
                                    let name = line["unit".len()..].trim();
                                    if name.is_empty() {
                                        return Err(Error::parse(ln, "unit without a name"));
                                    }
                                    units.push(DeformationUnit {
                                        name: name.to_string(),
                                        targets: Vec::new(),
                                    });
                                }
                                "target" => {
                                    if toks.len() != 5 {
                                        return Err(Error::parse(
                                            ln,
                                            "target needs a vertex index and 3 components",
                                        ));
                                    }
                                    let unit = units.last_mut().ok_or_else(|| {
                                        Error::parse(ln, "target before any unit line")
                                    })?;
                                    unit.targets.push((
                                        parse_usize(toks[1], ln)?,
                                        Vector3::new(
                                            parse_f64(toks[2], ln)?,
                                            parse_f64(toks[3], ln)?,
                                            parse_f64(toks[4], ln)?,
                                        ),
                                    ));
                                }
                                other => {
                                    return Err(Error::parse(
                                        ln,
                                        format!("unexpected keyword {other:?}"),
                                    ))
                                }
                            }
                        }
                    }
                }
            }
        }

        let model = CandideModel {
            vertices,
            triangles,
            shape_units,
            action_units,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if n == 0 {
            return Err(Error::InvalidModel("no vertices".into()));
        }
        for (i, p) in self.vertices.iter().enumerate() {
            if p.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(Error::InvalidModel(format!(
                    "vertex {i} lies outside the cube [-1, 1]^3"
                )));
            }
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= n) {
                return Err(Error::InvalidModel(format!(
                    "triangle {t}: vertex index out of range ({bad} >= {n})"
                )));
            }
        }
        for unit in self.shape_units.iter().chain(&self.action_units) {
            if unit.targets.is_empty() {
                return Err(Error::InvalidModel(format!(
                    "unit {:?} has no targets",
                    unit.name
                )));
            }
            let mut seen = BTreeSet::new();
            for (v, _) in &unit.targets {
                if *v >= n {
                    return Err(Error::InvalidModel(format!(
                        "unit {:?}: vertex index out of range ({v} >= {n})",
                        unit.name
                    )));
                }
                if !seen.insert(*v) {
                    return Err(Error::InvalidModel(format!(
                        "unit {:?}: vertex {v} repeated",
                        unit.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serializes into the text format accepted by [`CandideModel::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("VERTICES\n");
        for p in &self.vertices {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
        }
        out.push_str("TRIANGLES\n");
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        for (header, units) in [
            ("SHAPE_UNITS", &self.shape_units),
            ("ACTION_UNITS", &self.action_units),
        ] {
            out.push_str(header);
            out.push('\n');
            for u in units {
                let _ = writeln!(out, "unit {}", u.name);
                for (v, d) in &u.targets {
                    let _ = writeln!(out, "target {} {} {} {}", v, d.x, d.y, d.z);
                }
            }
        }
        out
    }

    /// Vertices after applying shape and action coefficients in model space.
    pub fn deformed_vertices(&self, a_shape: &[f64], a_action: &[f64]) -> Result<Vec<Point3<f64>>> {
        check_len("shape coefficients", self.dim_shape(), a_shape.len())?;
        check_len("action coefficients", self.dim_action(), a_action.len())?;
        let mut out = self.vertices.clone();
        for (unit, &c) in self
            .shape_units
            .iter()
            .zip(a_shape)
            .chain(self.action_units.iter().zip(a_action))
        {
            if c == 0.0 {
                continue;
            }
            for (v, d) in &unit.targets {
                out[*v] += d * c;
            }
        }
        Ok(out)
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { what, expected, got });
    }
    Ok(())
}

/// Barycentric placement of a landmark that has no vertex of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub landmark: usize,
    pub weights: Vec<(usize, f64)>,
}

/// The 37 landmark/vertex pairs and the active index sets derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// `(fp68_index, vertex_index)` in file order.
    pub pairs: Vec<(usize, usize)>,
    pub interpolations: Vec<Interpolation>,
    /// Vertices touched by no deformation unit.
    pub core: Vec<usize>,
    /// Core vertices that have a landmark.
    pub global: Vec<usize>,
    /// `global` joined with every shape-unit vertex.
    pub global_deform: Vec<usize>,
    /// Active landmark indices, aligned with `active_3d`.
    pub active_2d: Vec<usize>,
    /// Active vertex indices, aligned with `active_2d`.
    pub active_3d: Vec<usize>,
}

impl Correspondence {
    pub fn bundled(model: &CandideModel) -> Self {
        Self::parse(BUNDLED_CORRESPONDENCE, model).expect("bundled correspondence is valid")
    }

    pub fn load(path: impl AsRef<Path>, model: &CandideModel) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, model)
    }

    pub fn parse(text: &str, model: &CandideModel) -> Result<Self> {
        let nv = model.vertices.len();
        let mut pairs = Vec::new();
        let mut interpolations = Vec::new();
        for (ln, line) in content_lines(text) {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "interp" {
                if toks.len() < 4 || toks.len() % 2 != 0 {
                    return Err(Error::parse(
                        ln,
                        "interp needs a landmark and (vertex, weight) pairs",
                    ));
                }
                let landmark = parse_usize(toks[1], ln)?;
                let mut weights = Vec::new();
                for pair in toks[2..].chunks(2) {
                    weights.push((parse_usize(pair[0], ln)?, parse_f64(pair[1], ln)?));
                }
                interpolations.push(Interpolation { landmark, weights });
            } else {
                if toks.len() != 2 {
                    return Err(Error::parse(ln, "expected `<fp68_index> <vertex_index>`"));
                }
                pairs.push((parse_usize(toks[0], ln)?, parse_usize(toks[1], ln)?));
            }
        }

        if pairs.len() != CORRESPONDENCE_LEN {
            return Err(Error::InvalidCorrespondence(format!(
                "expected {CORRESPONDENCE_LEN} pairs, got {}",
                pairs.len()
            )));
        }
        let mut seen_lm = BTreeSet::new();
        let mut seen_v = BTreeSet::new();
        for &(lm, v) in &pairs {
            if lm >= FP68_LEN {
                return Err(Error::InvalidCorrespondence(format!(
                    "landmark index out of range: {lm}"
                )));
            }
            if v >= nv {
                return Err(Error::InvalidCorrespondence(format!(
                    "vertex index not in model: {v}"
                )));
            }
            if !seen_lm.insert(lm) {
                return Err(Error::InvalidCorrespondence(format!(
                    "duplicate landmark index {lm}"
                )));
            }
            if !seen_v.insert(v) {
                return Err(Error::InvalidCorrespondence(format!(
                    "duplicate vertex index {v}"
                )));
            }
        }
        for rule in &interpolations {
            if rule.landmark >= FP68_LEN {
                return Err(Error::InvalidCorrespondence(format!(
                    "landmark index out of range: {}",
                    rule.landmark
                )));
            }
            if !seen_lm.insert(rule.landmark) {
                return Err(Error::InvalidCorrespondence(format!(
                    "duplicate landmark index {}",
                    rule.landmark
                )));
            }
            if let Some((v, _)) = rule.weights.iter().find(|(v, _)| *v >= nv) {
                return Err(Error::InvalidCorrespondence(format!(
                    "vertex index not in model: {v}"
                )));
            }
            let sum: f64 = rule.weights.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidCorrespondence(format!(
                    "interpolation weights for landmark {} sum to {sum}",
                    rule.landmark
                )));
            }
        }

        let mut deformed = vec![false; nv];
        for unit in model.shape_units.iter().chain(&model.action_units) {
            for (v, _) in &unit.targets {
                deformed[*v] = true;
            }
        }
        let core: Vec<usize> = (0..nv).filter(|&v| !deformed[v]).collect();
        let global: Vec<usize> = core.iter().copied().filter(|v| seen_v.contains(v)).collect();
        let mut gd: BTreeSet<usize> = global.iter().copied().collect();
        for unit in &model.shape_units {
            gd.extend(unit.targets.iter().map(|(v, _)| *v));
        }
        let global_deform: Vec<usize> = gd.iter().copied().collect();
        let (active_2d, active_3d): (Vec<usize>, Vec<usize>) = pairs
            .iter()
            .filter(|(_, v)| gd.contains(v))
            .copied()
            .unzip();

        Ok(Correspondence {
            pairs,
            interpolations,
            core,
            global,
            global_deform,
            active_2d,
            active_3d,
        })
    }

    /// Number of active points, `N_s`.
    pub fn n_active(&self) -> usize {
        self.active_2d.len()
    }

    /// True when pairs and interpolation rules together place all 68 landmarks.
    pub fn is_complete(&self) -> bool {
        self.pairs.len() + self.interpolations.len() == FP68_LEN
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (lm, v) in &self.pairs {
            let _ = writeln!(out, "{lm} {v}");
        }
        for rule in &self.interpolations {
            let _ = write!(out, "interp {}", rule.landmark);
            for (v, w) in &rule.weights {
                let _ = write!(out, " {v} {w}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
# toy
VERTICES
0 0 0
1 0 0
0 1 0
TRIANGLES
0 1 2
SHAPE_UNITS
unit width
target 1 0.5 0 0
ACTION_UNITS
unit AU26/27 jaw drop
target 2 0 0.25 0
";

    #[test]
    fn parses_minimal_model() {
        let m = CandideModel::parse(TOY).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.triangles.len(), 1);
        assert_eq!(m.dim_shape(), 1);
        assert_eq!(m.dim_action(), 1);
        assert_eq!(m.action_units[0].name, "AU26/27 jaw drop");
        assert_eq!(m.action_units[0].facs_ids(), vec![26, 27]);
        assert!(m.shape_units[0].facs_ids().is_empty());
    }

    #[test]
    fn triangle_out_of_range() {
        let text = TOY.replace("0 1 2", "0 1 99");
        let err = CandideModel::parse(&text).unwrap_err().to_string();
        assert!(err.contains("index out of range"), "{err}");
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = TOY.replace("1 0 0\n", "1 zero 0\n");
        match CandideModel::parse(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vertex_outside_cube_rejected() {
        let text = TOY.replace("0 1 0\n", "0 1.5 0\n");
        assert!(matches!(
            CandideModel::parse(&text),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn repeated_target_rejected() {
        let text = TOY.replace(
            "target 1 0.5 0 0\n",
            "target 1 0.5 0 0\ntarget 1 0.1 0 0\n",
        );
        let err = CandideModel::parse(&text).unwrap_err().to_string();
        assert!(err.contains("repeated"), "{err}");
    }

    #[test]
    fn bundled_model_matches_declared_vertex_count() {
        let declared: usize = BUNDLED_MODEL
            .lines()
            .find_map(|l| l.strip_prefix("# vertices:"))
            .expect("header declares vertex count")
            .trim()
            .parse()
            .unwrap();
        let m = CandideModel::bundled();
        assert_eq!(m.vertices.len(), declared);
        assert_eq!(m.dim_shape(), 15);
        assert_eq!(m.dim_action(), 8);
    }

    #[test]
    fn bundled_correspondence_is_fully_active() {
        let m = CandideModel::bundled();
        let c = Correspondence::bundled(&m);
        assert_eq!(c.pairs.len(), 37);
        assert_eq!(c.n_active(), 37);
        assert_eq!(c.active_2d.len(), c.active_3d.len());
        assert!(c.is_complete());
        for &g in &c.global {
            assert!(c.core.contains(&g));
            assert!(c.global_deform.contains(&g));
        }
    }

    #[test]
    fn correspondence_errors() {
        let m = CandideModel::bundled();
        let good = BUNDLED_CORRESPONDENCE;
        let pair_lines: Vec<&str> = good
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("interp"))
            .collect();

        let short = pair_lines[..36].join("\n");
        let err = Correspondence::parse(&short, &m).unwrap_err().to_string();
        assert!(err.contains("expected 37 pairs"), "{err}");

        let mut bad_lm = pair_lines.clone();
        let v = bad_lm[0].split_whitespace().nth(1).unwrap().to_string();
        let replaced = format!("68 {v}");
        bad_lm[0] = &replaced;
        let err = Correspondence::parse(&bad_lm.join("\n"), &m)
            .unwrap_err()
            .to_string();
        assert!(err.contains("landmark index out of range"), "{err}");

        let mut dup = pair_lines.clone();
        dup[1] = dup[0];
        let err = Correspondence::parse(&dup.join("\n"), &m)
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "{err}");

        let mut bad_v = pair_lines.clone();
        let lm = bad_v[0].split_whitespace().next().unwrap().to_string();
        let replaced = format!("{lm} 999");
        bad_v[0] = &replaced;
        let err = Correspondence::parse(&bad_v.join("\n"), &m)
            .unwrap_err()
            .to_string();
        assert!(err.contains("not in model"), "{err}");
    }

    #[test]
    fn zero_coefficients_leave_vertices_unchanged() {
        let m = CandideModel::bundled();
        let v = m
            .deformed_vertices(&vec![0.0; m.dim_shape()], &vec![0.0; m.dim_action()])
            .unwrap();
        assert_eq!(v, m.vertices);
    }

    #[test]
    fn text_round_trip_is_identity() {
        let m = CandideModel::bundled();
        let again = CandideModel::parse(&m.to_text()).unwrap();
        assert_eq!(m, again);
        let c = Correspondence::bundled(&m);
        assert_eq!(Correspondence::parse(&c.to_text(), &m).unwrap(), c);
    }
}
