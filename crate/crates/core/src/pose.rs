//! Sparse pose data model: skeleton definitions, keypoint instances, COCO
//! ingestion and editing.
//!
//! Coordinates are continuous pixel units with the origin at the top-left
//! corner, x to the right and y downward. A keypoint is valid iff `v >= 1`;
//! `v = 1` and `v = 2` behave identically everywhere except serialization.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

const AP10K_JSON: &str = include_str!("../assets/ap10k.json");
const COCO_HUMAN_JSON: &str = include_str!("../assets/coco_human.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SkeletonFile {
    name: String,
    keypoints: Vec<String>,
    edges: Vec<[usize; 2]>,
    oks_sigmas: Vec<f64>,
    colors: Vec<[u8; 3]>,
}

/// Keypoint vocabulary and topology shared by every pose of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonFile", into = "SkeletonFile")]
pub struct SkeletonSpec {
    name: String,
    keypoint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    oks_sigmas: Vec<f64>,
    render_colors: Vec<[u8; 3]>,
}

impl TryFrom<SkeletonFile> for SkeletonSpec {
    type Error = Error;

    fn try_from(f: SkeletonFile) -> Result<Self> {
        SkeletonSpec::new(
            f.name,
            f.keypoints,
            f.edges.into_iter().map(|[i, j]| (i, j)).collect(),
            f.oks_sigmas,
            f.colors,
        )
    }
}

impl From<SkeletonSpec> for SkeletonFile {
    fn from(s: SkeletonSpec) -> Self {
        SkeletonFile {
            name: s.name,
            keypoints: s.keypoint_names,
            edges: s.edges.into_iter().map(|(i, j)| [i, j]).collect(),
            oks_sigmas: s.oks_sigmas,
            colors: s.render_colors,
        }
    }
}

impl SkeletonSpec {
    pub fn new(
        name: impl Into<String>,
        keypoint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        oks_sigmas: Vec<f64>,
        render_colors: Vec<[u8; 3]>,
    ) -> Result<Self> {
        let n = keypoint_names.len();
        if n == 0 {
            return Err(Error::InvalidSkeleton("no keypoints".into()));
        }
        if oks_sigmas.len() != n {
            return Err(Error::InvalidSkeleton(format!(
                "{} oks sigmas for {n} keypoints",
                oks_sigmas.len()
            )));
        }
        if render_colors.len() != n {
            return Err(Error::InvalidSkeleton(format!(
                "{} colors for {n} keypoints",
                render_colors.len()
            )));
        }
        if let Some(s) = oks_sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidSkeleton(format!("oks sigma {s} is not positive")));
        }
        let mut names = HashSet::new();
        for name in &keypoint_names {
            if !names.insert(name.as_str()) {
                return Err(Error::InvalidSkeleton(format!("duplicate keypoint name {name:?}")));
            }
        }
        let mut seen = HashSet::new();
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(Error::InvalidSkeleton(format!(
                    "edge ({i}, {j}) out of range for {n} keypoints"
                )));
            }
            if i == j {
                return Err(Error::InvalidSkeleton(format!("self-loop edge ({i}, {j})")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::InvalidSkeleton(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(Self {
            name: name.into(),
            keypoint_names,
            edges,
            oks_sigmas,
            render_colors,
        })
    }

    /// The bundled 17-keypoint mammal definition.
    pub fn ap10k() -> Self {
        Self::from_json(AP10K_JSON).expect("bundled ap10k skeleton is valid")
    }

    /// The bundled 17-keypoint COCO human definition.
    pub fn coco_human() -> Self {
        Self::from_json(COCO_HUMAN_JSON).expect("bundled coco_human skeleton is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(text)?;
        Self::try_from(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serialization cannot fail")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn keypoint_names(&self) -> &[String] {
        &self.keypoint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn oks_sigmas(&self) -> &[f64] {
        &self.oks_sigmas
    }

    pub fn render_colors(&self) -> &[[u8; 3]] {
        &self.render_colors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| n == name)
    }
}

/// Loads and validates a skeleton definition file.
pub fn load_skeleton_spec(path: impl AsRef<Path>) -> Result<SkeletonSpec> {
    SkeletonSpec::from_json(&read_to_string(path.as_ref())?)
}

/// Built-in skeleton by name (`ap10k`, `coco_human`), otherwise a file path.
pub fn resolve_skeleton(name_or_path: &str) -> Result<SkeletonSpec> {
    match name_or_path {
        "ap10k" => Ok(SkeletonSpec::ap10k()),
        "coco_human" => Ok(SkeletonSpec::coco_human()),
        path => load_skeleton_spec(path),
    }
}

/// One labeled keypoint. Serialized as `[x, y, v]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64, u8)", into = "(f64, f64, u8)")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Result<Self> {
        if v > 2 {
            return Err(Error::InvalidPose(format!("visibility {v} not in {{0, 1, 2}}")));
        }
        Ok(Self { x, y, v })
    }

    pub fn visible(x: f64, y: f64) -> Self {
        Self { x, y, v: 2 }
    }

    pub fn absent() -> Self {
        Self { x: 0.0, y: 0.0, v: 0 }
    }

    pub fn v(&self) -> u8 {
        self.v
    }

    pub fn is_valid(&self) -> bool {
        self.v >= 1
    }
}

impl TryFrom<(f64, f64, u8)> for Keypoint {
    type Error = Error;

    fn try_from((x, y, v): (f64, f64, u8)) -> Result<Self> {
        Keypoint::new(x, y, v)
    }
}

impl From<Keypoint> for (f64, f64, u8) {
    fn from(k: Keypoint) -> Self {
        (k.x, k.y, k.v)
    }
}

/// Keypoints of a single object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseInstance {
    pub keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

impl PoseInstance {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Self {
            keypoints,
            bbox: None,
            area: None,
        }
    }

    pub fn num_valid(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_valid()).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.keypoints
            .iter()
            .enumerate()
            .filter(|(_, k)| k.is_valid())
            .map(|(i, _)| i)
    }

    /// Bounding box `(x, y, w, h)` of the valid keypoints, if any.
    pub fn keypoint_bbox(&self) -> Option<[f64; 4]> {
        let mut it = self.keypoints.iter().filter(|k| k.is_valid());
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for k in it {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        Some([x0, y0, x1 - x0, y1 - y0])
    }

    /// Object scale used by OKS: the annotated area, else the keypoint bbox area.
    pub fn scale_area(&self) -> Option<f64> {
        self.area
            .or_else(|| self.bbox.map(|b| b[2] * b[3]))
            .or_else(|| self.keypoint_bbox().map(|b| b[2] * b[3]))
            .filter(|a| *a > 0.0)
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.keypoints.len() != n {
            return Err(Error::InvalidPose(format!(
                "instance has {} keypoints, skeleton has {n}",
                self.keypoints.len()
            )));
        }
        for (i, k) in self.keypoints.iter().enumerate() {
            if k.is_valid() && !(k.x.is_finite() && k.y.is_finite()) {
                return Err(Error::InvalidPose(format!("keypoint {i} has non-finite coordinates")));
            }
        }
        Ok(())
    }
}

/// All pose instances of one image, the condition before rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub category: Option<String>,
    pub instances: Vec<PoseInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
}

impl PoseSet {
    pub fn new(image_size: (usize, usize), instances: Vec<PoseInstance>) -> Self {
        Self {
            image_size,
            caption: None,
            category: None,
            instances,
            image_id: None,
        }
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    /// Checks the type invariants against `spec`.
    pub fn validate(&self, spec: &SkeletonSpec) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::InvalidPose(format!("image size {h}x{w} below 8x8")));
        }
        for inst in &self.instances {
            inst.check(spec.num_keypoints())?;
        }
        Ok(())
    }

    /// Keypoint indices valid in at least one instance, ascending.
    pub fn valid_keypoints(&self) -> Vec<usize> {
        let mut any = BTreeMap::new();
        for inst in &self.instances {
            for i in inst.valid_indices() {
                any.insert(i, ());
            }
        }
        any.into_keys().collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_to_string(path.as_ref())?)
    }
}

/// Serializes a pose document. Coordinates use the shortest decimal form that
/// parses back to the same `f64`, so `PoseSet::from_json` inverts this exactly.
pub fn serialize_pose(pose_set: &PoseSet) -> String {
    serde_json::to_string_pretty(pose_set).expect("pose serialization cannot fail")
}

/// An editing operation on a single instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PoseEdit {
    Move { index: usize, dx: f64, dy: f64 },
    SetVisibility { index: usize, v: u8 },
    Affine { scale: f64, tx: f64, ty: f64 },
}

/// Applies `edit` and returns the edited copy; `pose` is left untouched.
pub fn edit_pose(pose: &PoseInstance, edit: PoseEdit) -> Result<PoseInstance> {
    let n = pose.keypoints.len();
    let mut out = pose.clone();
    match edit {
        PoseEdit::Move { index, dx, dy } => {
            let k = out
                .keypoints
                .get_mut(index)
                .ok_or_else(|| Error::InvalidEdit(format!("keypoint index {index} >= {n}")))?;
            k.x += dx;
            k.y += dy;
        }
        PoseEdit::SetVisibility { index, v } => {
            if index >= n {
                return Err(Error::InvalidEdit(format!("keypoint index {index} >= {n}")));
            }
            if v > 2 {
                return Err(Error::InvalidEdit(format!("visibility {v} not in {{0, 1, 2}}")));
            }
            out.keypoints[index].v = v;
        }
        PoseEdit::Affine { scale, tx, ty } => {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::InvalidEdit(format!("affine scale {scale} must be positive")));
            }
            for k in out.keypoints.iter_mut().filter(|k| k.is_valid()) {
                k.x = scale * k.x + tx;
                k.y = scale * k.y + ty;
            }
            if let Some(b) = out.bbox.as_mut() {
                *b = [scale * b[0] + tx, scale * b[1] + ty, scale * b[2], scale * b[3]];
            }
            if let Some(a) = out.area.as_mut() {
                *a *= scale * scale;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    width: usize,
    height: usize,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    keypoints: Vec<f64>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    category_id: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Parses COCO keypoint annotations into one `PoseSet` per image, in the
/// order of the `images` array.
pub fn parse_coco_keypoints(path: impl AsRef<Path>, spec: &SkeletonSpec) -> Result<Vec<PoseSet>> {
    parse_coco_str(&read_to_string(path.as_ref())?, spec)
}

pub fn parse_coco_str(text: &str, spec: &SkeletonSpec) -> Result<Vec<PoseSet>> {
    let coco: CocoFile = serde_json::from_str(text)?;
    let n = spec.num_keypoints();
    let categories: BTreeMap<u64, &str> =
        coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut order = BTreeMap::new();
    let mut sets: Vec<PoseSet> = coco
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            order.insert(img.id, i);
            PoseSet {
                image_size: (img.height, img.width),
                caption: img.caption.clone(),
                category: None,
                instances: Vec::new(),
                image_id: Some(img.id),
            }
        })
        .collect();
    for ann in &coco.annotations {
        let describe = || match ann.id {
            Some(id) => format!("annotation {id}"),
            None => format!("annotation for image {}", ann.image_id),
        };
        if ann.keypoints.len() != 3 * n {
            return Err(Error::InvalidAnnotation(format!(
                "{}: keypoints array has length {}, expected {}",
                describe(),
                ann.keypoints.len(),
                3 * n
            )));
        }
        let &slot = order.get(&ann.image_id).ok_or_else(|| {
            Error::InvalidAnnotation(format!("{}: no image with id {}", describe(), ann.image_id))
        })?;
        let keypoints = ann
            .keypoints
            .chunks_exact(3)
            .map(|c| {
                let v = c[2];
                if v != 0.0 && v != 1.0 && v != 2.0 {
                    return Err(Error::InvalidAnnotation(format!(
                        "{}: visibility {v} not in {{0, 1, 2}}",
                        describe()
                    )));
                }
                Keypoint::new(c[0], c[1], v as u8)
            })
            .collect::<Result<Vec<_>>>()?;
        let set = &mut sets[slot];
        if set.category.is_none() {
            set.category = ann
                .category_id
                .and_then(|c| categories.get(&c))
                .map(|s| s.to_string());
        }
        set.instances.push(PoseInstance {
            keypoints,
            bbox: ann.bbox,
            area: ann.area,
        });
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point_spec() -> SkeletonSpec {
        SkeletonSpec::new(
            "pair",
            vec!["a".into(), "b".into()],
            vec![(0, 1)],
            vec![0.05, 0.05],
            vec![[255, 0, 0], [0, 255, 0]],
        )
        .unwrap()
    }

    #[test]
    fn bundled_ap10k_spec() {
        let spec = SkeletonSpec::ap10k();
        assert_eq!(spec.num_keypoints(), 17);
        for name in ["nose", "neck", "root of tail"] {
            assert!(spec.index_of(name).is_some(), "{name}");
        }
        assert_eq!(spec.keypoint_names()[0], "left eye");
        assert_eq!(spec.keypoint_names()[16], "right back paw");
        assert_eq!(SkeletonSpec::coco_human().num_keypoints(), 17);
    }

    #[test]
    fn self_loop_rejected() {
        let err = SkeletonSpec::new(
            "bad",
            (0..4).map(|i| format!("k{i}")).collect(),
            vec![(3, 3)],
            vec![0.1; 4],
            vec![[0, 0, 0]; 4],
        )
        .unwrap_err();
        assert!(err.to_string().contains("self-loop"), "{err}");
    }

    #[test]
    fn minimal_spec_is_valid() {
        assert_eq!(two_point_spec().num_keypoints(), 2);
    }

    #[test]
    fn spec_invariant_violations() {
        let names = || vec!["a".to_string(), "b".to_string()];
        let colors = || vec![[0u8; 3]; 2];
        assert!(SkeletonSpec::new("x", names(), vec![(0, 2)], vec![0.1; 2], colors()).is_err());
        assert!(SkeletonSpec::new("x", names(), vec![(0, 1), (1, 0)], vec![0.1; 2], colors())
            .is_err());
        assert!(SkeletonSpec::new("x", names(), vec![], vec![0.1, 0.0], colors()).is_err());
        assert!(SkeletonSpec::new("x", names(), vec![], vec![0.1], colors()).is_err());
        assert!(SkeletonSpec::new("x", vec!["a".into(), "a".into()], vec![], vec![0.1; 2], colors())
            .is_err());
        assert!(SkeletonSpec::new("x", vec![], vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn skeleton_json_round_trip() {
        let spec = SkeletonSpec::ap10k();
        assert_eq!(SkeletonSpec::from_json(&spec.to_json()).unwrap(), spec);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, spec.to_json()).unwrap();
        assert_eq!(load_skeleton_spec(&path).unwrap(), spec);
    }

    fn coco_doc(kpts: &[f64]) -> String {
        let kp = serde_json::to_string(kpts).unwrap();
        format!(
            r#"{{"images": [{{"id": 7, "width": 64, "height": 48}}, {{"id": 9, "width": 32, "height": 32}}],
                "annotations": [
                  {{"id": 1, "image_id": 7, "keypoints": {kp}, "category_id": 3, "area": 100.0}},
                  {{"id": 2, "image_id": 7, "keypoints": {kp}, "category_id": 3}}
                ],
                "categories": [{{"id": 3, "name": "dog"}}]}}"#
        )
    }

    #[test]
    fn coco_grouping_by_image() {
        let spec = SkeletonSpec::ap10k();
        let mut kpts = vec![0.0; 51];
        kpts[0] = 10.0;
        kpts[1] = 12.0;
        kpts[2] = 2.0;
        let sets = parse_coco_str(&coco_doc(&kpts), &spec).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].image_size, (48, 64));
        assert_eq!(sets[0].instances.len(), 2);
        assert_eq!(sets[0].instances[0].keypoints.len(), 17);
        assert_eq!(sets[0].instances[0].keypoints[0], Keypoint::visible(10.0, 12.0));
        assert_eq!(sets[0].instances[0].keypoints[1].v(), 0);
        assert_eq!(sets[0].category.as_deref(), Some("dog"));
        assert_eq!(sets[0].instances[0].area, Some(100.0));
        assert!(sets[1].instances.is_empty());
    }

    #[test]
    fn coco_bad_length() {
        let spec = SkeletonSpec::ap10k();
        let err = parse_coco_str(&coco_doc(&vec![0.0; 50]), &spec).unwrap_err();
        assert!(err.to_string().contains("length 50"), "{err}");
    }

    #[test]
    fn coco_missing_image() {
        let spec = two_point_spec();
        let doc = r#"{"images": [], "annotations": [{"image_id": 4, "keypoints": [0,0,0,0,0,0]}]}"#;
        let err = parse_coco_str(doc, &spec).unwrap_err();
        assert!(err.to_string().contains("no image with id 4"), "{err}");
    }

    fn inst() -> PoseInstance {
        PoseInstance::new(vec![
            Keypoint::visible(5.0, 5.0),
            Keypoint::new(1.0, 2.0, 1).unwrap(),
            Keypoint::absent(),
            Keypoint::visible(20.0, 30.0),
        ])
    }

    #[test]
    fn move_edit() {
        let p = inst();
        let q = edit_pose(&p, PoseEdit::Move { index: 0, dx: 10.0, dy: 0.0 }).unwrap();
        assert_eq!(q.keypoints[0], Keypoint::visible(15.0, 5.0));
        assert_eq!(p.keypoints[0], Keypoint::visible(5.0, 5.0));
        assert_eq!(&q.keypoints[1..], &p.keypoints[1..]);
    }

    #[test]
    fn affine_edit() {
        let q = edit_pose(&inst(), PoseEdit::Affine { scale: 2.0, tx: 0.0, ty: 0.0 }).unwrap();
        assert_eq!(q.keypoints[0], Keypoint::visible(10.0, 10.0));
        assert_eq!(q.keypoints[2], Keypoint::absent());
        let id = edit_pose(&inst(), PoseEdit::Affine { scale: 1.0, tx: 0.0, ty: 0.0 }).unwrap();
        assert_eq!(id, inst());
    }

    #[test]
    fn edit_errors() {
        let p = inst();
        assert!(edit_pose(&p, PoseEdit::Move { index: 4, dx: 0.0, dy: 0.0 }).is_err());
        assert!(edit_pose(&p, PoseEdit::SetVisibility { index: 0, v: 3 }).is_err());
        assert!(edit_pose(&p, PoseEdit::SetVisibility { index: 9, v: 0 }).is_err());
        assert!(edit_pose(&p, PoseEdit::Affine { scale: 0.0, tx: 0.0, ty: 0.0 }).is_err());
        assert!(edit_pose(&p, PoseEdit::Affine { scale: -1.0, tx: 0.0, ty: 0.0 }).is_err());
    }

    #[test]
    fn set_visibility_edit() {
        let q = edit_pose(&inst(), PoseEdit::SetVisibility { index: 3, v: 0 }).unwrap();
        assert!(!q.keypoints[3].is_valid());
        assert_eq!(q.num_valid(), 2);
    }

    #[test]
    fn pose_document_round_trip() {
        let mut set = PoseSet::new((48, 64), vec![inst()]);
        set.caption = Some("A photo of dog.".into());
        let text = serialize_pose(&set);
        assert_eq!(PoseSet::from_json(&text).unwrap(), set);

        let empty = PoseSet::new((32, 32), vec![]);
        let text = serialize_pose(&empty);
        assert!(text.contains("\"instances\": []"));
        assert_eq!(PoseSet::from_json(&text).unwrap(), empty);
    }

    #[test]
    fn invalid_visibility_rejected_on_parse() {
        let doc = r#"{"image_size": [16, 16], "instances": [{"keypoints": [[1.0, 2.0, 5]]}]}"#;
        assert!(PoseSet::from_json(doc).is_err());
    }

    #[test]
    fn validate_pose_set() {
        let spec = two_point_spec();
        let ok = PoseSet::new(
            (16, 16),
            vec![PoseInstance::new(vec![Keypoint::visible(-3.0, 40.0), Keypoint::absent()])],
        );
        ok.validate(&spec).unwrap();
        let small = PoseSet::new((4, 16), vec![]);
        assert!(small.validate(&spec).is_err());
        let wrong_n = PoseSet::new((16, 16), vec![inst()]);
        assert!(wrong_n.validate(&spec).is_err());
        let nan = PoseSet::new(
            (16, 16),
            vec![PoseInstance::new(vec![Keypoint::visible(f64::NAN, 0.0), Keypoint::absent()])],
        );
        assert!(nan.validate(&spec).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn keypoint() -> impl Strategy<Value = Keypoint> {
            (-1e4f64..1e4, -1e4f64..1e4, 0u8..3).prop_map(|(x, y, v)| Keypoint::new(x, y, v).unwrap())
        }

        fn pose_set() -> impl Strategy<Value = PoseSet> {
            (
                8usize..512,
                8usize..512,
                proptest::collection::vec(proptest::collection::vec(keypoint(), 5), 0..4),
                proptest::option::of("[a-z ]{0,12}"),
            )
                .prop_map(|(h, w, insts, caption)| {
                    let mut set = PoseSet::new(
                        (h, w),
                        insts.into_iter().map(PoseInstance::new).collect(),
                    );
                    set.caption = caption;
                    set
                })
        }

        proptest! {
            #[test]
            fn serialize_parse_identity(set in pose_set()) {
                prop_assert_eq!(PoseSet::from_json(&serialize_pose(&set)).unwrap(), set);
            }

            #[test]
            fn moves_compose_additively(
                kps in proptest::collection::vec(keypoint(), 5),
                i in 0usize..5,
                a in -50f64..50.0, b in -50f64..50.0, c in -50f64..50.0, d in -50f64..50.0,
            ) {
                let p = PoseInstance::new(kps);
                let twice = edit_pose(&edit_pose(&p, PoseEdit::Move { index: i, dx: a, dy: b }).unwrap(),
                    PoseEdit::Move { index: i, dx: c, dy: d }).unwrap();
                let once = edit_pose(&p, PoseEdit::Move { index: i, dx: a + c, dy: b + d }).unwrap();
                prop_assert!((twice.keypoints[i].x - once.keypoints[i].x).abs() < 1e-9);
                prop_assert!((twice.keypoints[i].y - once.keypoints[i].y).abs() < 1e-9);
                prop_assert_eq!(twice.keypoints.len(), p.keypoints.len());
            }
        }
    }
}
