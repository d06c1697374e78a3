use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::icp::{IcpModel, Stage};
use crate::lwta::{Pass, SampleMode};
use crate::samplers::{RngState, Temperature};
use crate::tensor::{Tape, Tensor};

/// Feature maps of one convolutional LWTA layer for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub layer: String,
    pub blocks: usize,
    pub competitors: usize,
    /// `[H, W, B·U]` layer output.
    pub maps: Tensor,
    /// `[H, W]` number of blocks with more than one nonzero map at each position.
    pub overlap: Tensor,
    pub overlap_count: usize,
    pub files: Vec<PathBuf>,
}

/// Writes a binary (P5) PGM image; values are min-max scaled to `0..=255`,
/// constant images become black.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Counts, per position, the blocks in which more than one competitor is nonzero.
pub fn block_overlap(maps: &Tensor, blocks: usize, competitors: usize) -> (Tensor, usize) {
    let (h, w) = (maps.shape()[0], maps.shape()[1]);
    let mut overlap = vec![0.0; h * w];
    let mut total = 0;
    for (pos, px) in maps.data().chunks(blocks * competitors).enumerate() {
        let n = px.chunks(competitors).filter(|blk| blk.iter().filter(|&&v| v != 0.0).count() > 1).count();
        overlap[pos] = n as f64;
        total += n;
    }
    (Tensor::from_parts(vec![h, w], overlap), total)
}

/// Runs one discrete pass on `image` (`[H, W, C]` or `[1, H, W, C]`) and
/// exports every map of backbone LWTA layer `layer_index` as a PGM image,
/// plus the block-overlap map. With `out_dir = None` nothing is written.
pub fn feature_map_export(
    model: &IcpModel,
    image: &Tensor,
    layer_index: usize,
    out_dir: Option<&Path>,
    rng: &mut RngState,
) -> Result<FeatureMaps> {
    let layers: Vec<&Stage> =
        model.backbone.iter().filter(|s| matches!(s, Stage::Dense(_) | Stage::Conv(_))).collect();
    let core = match layers.get(layer_index) {
        Some(Stage::Conv(l)) => &l.core,
        Some(_) => return Err(Error::contract(format!("layer {layer_index} is not a convolutional LWTA layer"))),
        None => return Err(Error::contract(format!("layer {layer_index} out of range ({} layers)", layers.len()))),
    };
    let x = match image.ndim() {
        3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(Error::contract(format!("expected one [H, W, C] image, got {:?}", image.shape()))),
    };
    let tape = Tape::no_grad();
    let pass = Pass::new(&tape, &model.store, SampleMode::Discrete, Temperature::new(0.67)?);
    let enc = model.encode(&pass, tape.constant(x), rng)?;
    let out = enc.samples[layer_index].output.value();
    let (h, w, k) = (out.shape()[1], out.shape()[2], out.shape()[3]);
    let maps = out.reshape(&[h, w, k])?;
    let (overlap, overlap_count) = block_overlap(&maps, core.blocks, core.competitors);
    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = core.name.replace('.', "_");
        for m in 0..k {
            let vals: Vec<f64> = maps.data().iter().skip(m).step_by(k).copied().collect();
            let path = dir.join(format!("{name}_b{}_u{}.pgm", m / core.competitors, m % core.competitors));
            write_pgm(&path, w, h, &vals)?;
            files.push(path);
        }
        let path = dir.join(format!("{name}_overlap.pgm"));
        write_pgm(&path, w, h, overlap.data())?;
        files.push(path);
    }
    Ok(FeatureMaps {
        layer: core.name.clone(),
        blocks: core.blocks,
        competitors: core.competitors,
        maps,
        overlap,
        overlap_count,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 2, 1, &[-1.0, 3.0]).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
        write_pgm(&p, 1, 1, &[5.0]).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n1 1\n255\n\x00");
    }

    #[test]
    fn overlap_counts_blocks_with_two_live_maps() {
        // one position, two blocks of two: [1, 2 | 0, 3]
        let m = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 0.0, 3.0]).unwrap();
        let (map, n) = block_overlap(&m, 2, 2);
        assert_eq!(n, 1);
        assert_eq!(map.data(), &[1.0]);
    }

    #[test]
    fn unwritable_dir_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        let err = write_pgm(&file.join("a.pgm"), 1, 1, &[0.0]).unwrap_err();
        assert!(err.to_string().contains("f/a.pgm"), "{err}");
    }
}
