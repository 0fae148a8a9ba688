//! Spatial-pose representation: frozen seed vectors, the embedding module,
//! condition rasterization and Gaussian keypoint heatmaps.

pub mod embed;
pub mod heatmap;
pub mod raster;
pub mod seed;

pub use embed::{seed_tensor, SpatialPoseEmbedding};
pub use heatmap::{render_heatmaps, HeatmapStack};
pub use raster::{
    rasterize_labels, render_openpose_rgb, render_spatial_pose, LabelMap, Owner, RenderStyle,
    SpatialPoseImage, OPENPOSE_PALETTE,
};
pub use seed::{init_seed, EmbeddingSeed, InitMode};

use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Differentiable counterpart of [`render_spatial_pose`]: looks up each pixel
/// owner in the fill table `[0; 1 (per edge); e_kpt]`, so gradients reach
/// `e_kpt` through the keypoint-disk pixels only. Returns `B x C' x H x W`.
pub fn render_condition(labels: &[&LabelMap], e_kpt: &Tensor) -> Result<Tensor> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty condition batch".into()))?;
    let (h, w) = (first.height, first.width);
    let (n, c) = e_kpt.size2()?;
    if labels.iter().any(|l| {
        l.height != h || l.width != w || l.num_keypoints != n as usize || l.num_edges != first.num_edges
    }) {
        return Err(Error::Shape("label maps in a batch must share size and skeleton".into()));
    }
    let opts = (e_kpt.kind(), e_kpt.device());
    let table = Tensor::cat(
        &[
            Tensor::zeros([1, c], opts),
            Tensor::ones([first.num_edges as i64, c], opts),
            e_kpt.shallow_clone(),
        ],
        0,
    );
    let idx: Vec<i64> = labels
        .iter()
        .flat_map(|l| l.labels.iter().map(|&v| v as i64))
        .collect();
    let idx = Tensor::from_slice(&idx).to_device(e_kpt.device());
    Ok(table
        .index_select(0, &idx)
        .reshape([labels.len() as i64, h as i64, w as i64, c])
        .permute([0, 3, 1, 2])
        .contiguous())
}

/// Converts a rendered image into a `1 x C' x H x W` tensor.
pub fn image_to_tensor(img: &SpatialPoseImage, kind: Kind) -> Tensor {
    Tensor::from_slice(&img.data)
        .reshape([1, img.height as i64, img.width as i64, img.channels as i64])
        .permute([0, 3, 1, 2])
        .to_kind(kind)
        .contiguous()
}
