//! Hard-coverage rasterization of pose skeletons.
//!
//! Pixel `(row, col)` samples the continuous point `(x = col, y = row)` after
//! scaling pose coordinates from the pose image size to the output size. A
//! pixel is covered by a keypoint disk when its squared distance to the
//! keypoint is at most `point_radius²`, and by an edge when its distance to the
//! segment is at most `line_width / 2`. No anti-aliasing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{PoseSet, SkeletonSpec};

/// OpenPose limb palette, indexed by edge.
pub const OPENPOSE_PALETTE: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    pub point_radius: f64,
    pub line_width: f64,
}

impl RenderStyle {
    /// `max(1, round(H / 64))` for both radius and width.
    pub fn for_height(height: usize) -> Self {
        let r = ((height as f64 / 64.0).round()).max(1.0);
        Self {
            point_radius: r,
            line_width: r,
        }
    }
}

/// Which primitive owns each pixel after painting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    Background,
    Edge(usize),
    Keypoint(usize),
}

/// Per-pixel owner map, row-major.
///
/// Encoded as `0` for background, `1 + e` for edge `e`, and
/// `1 + num_edges + i` for keypoint `i`, which is also the row index into the
/// fill table used by the differentiable renderer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub num_edges: usize,
    pub num_keypoints: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn owner(&self, row: usize, col: usize) -> Owner {
        decode(self.labels[row * self.width + col], self.num_edges)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    /// Number of distinct fill rows: background, edges, keypoints.
    pub fn table_rows(&self) -> usize {
        1 + self.num_edges + self.num_keypoints
    }
}

fn decode(label: u32, num_edges: usize) -> Owner {
    let l = label as usize;
    if l == 0 {
        Owner::Background
    } else if l <= num_edges {
        Owner::Edge(l - 1)
    } else {
        Owner::Keypoint(l - 1 - num_edges)
    }
}

fn scaled_range(lo: f64, hi: f64, limit: usize) -> Option<(usize, usize)> {
    let lo = lo.ceil().max(0.0);
    let hi = hi.floor().min(limit as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// Squared distance from `p` to segment `a`-`b`.
pub(crate) fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - qx) * (p.0 - qx) + (p.1 - qy) * (p.1 - qy)
}

/// Paints every instance in list order: valid edges first, then valid
/// keypoint disks in index order. Later primitives overwrite earlier ones.
pub fn rasterize_labels(
    pose_set: &PoseSet,
    spec: &SkeletonSpec,
    out_size: (usize, usize),
    style: RenderStyle,
) -> Result<LabelMap> {
    let (h, w) = out_size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("output size {h}x{w} must be positive")));
    }
    pose_set.validate(spec)?;
    let sx = w as f64 / pose_set.width() as f64;
    let sy = h as f64 / pose_set.height() as f64;
    let num_edges = spec.edges().len();
    let mut labels = vec![0u32; h * w];
    let half = style.line_width / 2.0;
    let half2 = half * half;
    let r = style.point_radius;
    let r2 = r * r;

    for inst in &pose_set.instances {
        let pt = |i: usize| (inst.keypoints[i].x * sx, inst.keypoints[i].y * sy);
        for (e, &(i, j)) in spec.edges().iter().enumerate() {
            if !(inst.keypoints[i].is_valid() && inst.keypoints[j].is_valid()) {
                continue;
            }
            let (a, b) = (pt(i), pt(j));
            let Some((r0, r1)) = scaled_range(a.1.min(b.1) - half, a.1.max(b.1) + half, h) else {
                continue;
            };
            let Some((c0, c1)) = scaled_range(a.0.min(b.0) - half, a.0.max(b.0) + half, w) else {
                continue;
            };
            for row in r0..=r1 {
                for col in c0..=c1 {
                    if segment_dist2((col as f64, row as f64), a, b) <= half2 {
                        labels[row * w + col] = 1 + e as u32;
                    }
                }
            }
        }
        for i in inst.valid_indices() {
            let (x, y) = pt(i);
            let Some((r0, r1)) = scaled_range(y - r, y + r, h) else {
                continue;
            };
            let Some((c0, c1)) = scaled_range(x - r, x + r, w) else {
                continue;
            };
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let (dx, dy) = (col as f64 - x, row as f64 - y);
                    if dx * dx + dy * dy <= r2 {
                        labels[row * w + col] = (1 + num_edges + i) as u32;
                    }
                }
            }
        }
    }
    Ok(LabelMap {
        height: h,
        width: w,
        num_edges,
        num_keypoints: spec.num_keypoints(),
        labels,
    })
}

/// An `H x W x C'` condition image, row-major with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPoseImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spec_name: String,
    pub data: Vec<f32>,
}

impl SpatialPoseImage {
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }
}

/// Fills a label map from a per-owner fill table.
pub fn fill_labels(
    labels: &LabelMap,
    channels: usize,
    spec_name: &str,
    fill: impl Fn(Owner) -> Vec<f32>,
) -> SpatialPoseImage {
    let table: Vec<Vec<f32>> = (0..labels.table_rows() as u32)
        .map(|l| fill(decode(l, labels.num_edges)))
        .collect();
    let mut data = Vec::with_capacity(labels.labels.len() * channels);
    for &l in &labels.labels {
        data.extend_from_slice(&table[l as usize]);
    }
    SpatialPoseImage {
        height: labels.height,
        width: labels.width,
        channels,
        spec_name: spec_name.to_string(),
        data,
    }
}

/// Renders the spatial-pose representation: skeleton edges carry the all-ones
/// vector and keypoint disks carry their row of `e_kpt` (`N x C'`, row-major).
pub fn render_spatial_pose(
    pose_set: &PoseSet,
    spec: &SkeletonSpec,
    e_kpt: &[f32],
    channels: usize,
    out_size: (usize, usize),
    style: RenderStyle,
) -> Result<SpatialPoseImage> {
    let n = spec.num_keypoints();
    if channels == 0 || e_kpt.len() != n * channels {
        return Err(Error::Shape(format!(
            "keypoint embeddings have {} values, expected {n} x {channels}",
            e_kpt.len()
        )));
    }
    let labels = rasterize_labels(pose_set, spec, out_size, style)?;
    Ok(fill_labels(&labels, channels, spec.name(), |owner| match owner {
        Owner::Background => vec![0.0; channels],
        Owner::Edge(_) => vec![1.0; channels],
        Owner::Keypoint(i) => e_kpt[i * channels..(i + 1) * channels].to_vec(),
    }))
}

/// Baseline OpenPose-style rendering: keypoints in the skeleton's colors,
/// edges in the OpenPose palette, scaled to `[0, 1]`.
pub fn render_openpose_rgb(
    pose_set: &PoseSet,
    spec: &SkeletonSpec,
    out_size: (usize, usize),
    style: RenderStyle,
) -> Result<SpatialPoseImage> {
    let labels = rasterize_labels(pose_set, spec, out_size, style)?;
    let rgb = |c: [u8; 3]| c.iter().map(|&v| v as f32 / 255.0).collect::<Vec<_>>();
    Ok(fill_labels(&labels, 3, spec.name(), |owner| match owner {
        Owner::Background => vec![0.0; 3],
        Owner::Edge(e) => rgb(OPENPOSE_PALETTE[e % OPENPOSE_PALETTE.len()]),
        Owner::Keypoint(i) => rgb(spec.render_colors()[i]),
    }))
}
