//! Group inference at the network resolution, mapped back to input size.

use super::checkpoint::has_running_stats;
use super::network::{forward_group, Network};
use super::train::MAX_GROUP_BATCH;
use crate::error::Result;
use crate::image_io::{resize_bilinear, ImageGroup};
use crate::tensor::{BnMode, Tensor};

/// Eval mode when every batch norm has running statistics, otherwise
/// statistics of the group itself.
pub fn inference_mode(net: &mut Network<f32>) -> BnMode {
    if has_running_stats(net) {
        BnMode::Eval
    } else {
        log::warn!("network has no running statistics; normalising with group statistics");
        BnMode::Train
    }
}

/// Saliency maps (`1×H×W`, each at its image's size) for every image of
/// `group`. Groups larger than 14 images are processed in consecutive chunks.
pub fn predict_group(net: &Network<f32>, group: &ImageGroup, mode: BnMode) -> Result<Vec<Tensor<f32>>> {
    let r = net.config.resolution;
    let mut maps = Vec::with_capacity(group.len());
    let indices: Vec<usize> = (0..group.len()).collect();
    for chunk in indices.chunks(MAX_GROUP_BATCH) {
        let sub = ImageGroup {
            name: group.name.clone(),
            names: chunk.iter().map(|&i| group.names[i].clone()).collect(),
            images: chunk.iter().map(|&i| group.images[i].clone()).collect(),
            masks: vec![None; chunk.len()],
        };
        let batch = sub.to_batch(r)?;
        let out = forward_group(net, &batch, mode)?;
        let fin = out.final_maps().value();
        for (k, &i) in chunk.iter().enumerate() {
            let m = Tensor::new(&[1, r, r], fin.data()[k * r * r..(k + 1) * r * r].to_vec())?;
            let (h, w) = group.size_of(i);
            maps.push(resize_bilinear(&m, h, w)?.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Ok(maps)
}
