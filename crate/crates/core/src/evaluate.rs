//! Inference on single images and full-reference evaluation of a directory.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::enhancer::{forward, Checkpoint, EnhancementTrace};
use crate::error::{Result, SimiError};
use crate::imageio::{from_unit_tensor, load_image, save_image, to_unit_tensor, RawImage};
use crate::metrics::{psnr, ssim, ImageScore, MetricReport};
use crate::nn::{Real, Tensor};
use crate::trainer::list_images;

pub fn enhance_with_trace<T: Real>(img: &RawImage, ckpt: &Checkpoint<T>) -> Result<(RawImage, EnhancementTrace<T>)> {
    let trace = forward(&to_unit_tensor::<T>(img)?, &ckpt.store, &ckpt.config)?;
    Ok((from_unit_tensor(trace.output())?, trace))
}

pub fn enhance_image<T: Real>(img: &RawImage, ckpt: &Checkpoint<T>) -> Result<RawImage> {
    enhance_with_trace(img, ckpt).map(|(out, _)| out)
}

/// Writes `I_{i}.png` for every stage image (`I_0` is the input) and
/// `L1_{i}.png` / `L2_{i}.png` for every stage's curve maps, `i` from 1.
pub fn dump_trace<T: Real>(trace: &EnhancementTrace<T>, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, t: &Tensor<T>| -> Result<()> {
        let path = dir.join(name);
        save_image(&from_unit_tensor(t)?, &path)?;
        written.push(path);
        Ok(())
    };
    for (i, img) in trace.images.iter().enumerate() {
        put(format!("I_{i}.png"), img)?;
    }
    for (i, c) in trace.curves.iter().enumerate() {
        put(format!("L1_{}.png", i + 1), &c.illumination)?;
        put(format!("L2_{}.png", i + 1), &c.structure)?;
    }
    Ok(written)
}

/// Pairs every image in `low_dir` with the file of the same name in
/// `ref_dir`. Scores are listed in file-name order.
pub fn pair_by_name(low_dir: &Path, ref_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let lows = list_images(low_dir)?;
    if lows.is_empty() {
        return Err(SimiError::EmptyDataset(low_dir.to_path_buf()));
    }
    lows.into_iter()
        .map(|low| {
            let reference = ref_dir.join(low.file_name().expect("listed files have names"));
            if reference.is_file() {
                Ok((low, reference))
            } else {
                Err(SimiError::FileNotFound(reference))
            }
        })
        .collect()
}

pub fn evaluate_dirs<T: Real + Send + Sync>(
    ckpt: &Checkpoint<T>,
    low_dir: impl AsRef<Path>,
    ref_dir: impl AsRef<Path>,
) -> Result<MetricReport> {
    let pairs = pair_by_name(low_dir.as_ref(), ref_dir.as_ref())?;
    let scores = pairs
        .par_iter()
        .map(|(low, reference)| {
            let out = enhance_image(&load_image(low)?, ckpt)?;
            let reference = load_image(reference)?;
            Ok(ImageScore {
                name: low.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                psnr: psnr(&out, &reference)?,
                ssim: ssim(&out, &reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_scores(scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhancer::{init_params, EnhancerConfig};

    fn tiny() -> Checkpoint<f32> {
        let config = EnhancerConfig { stages: 2, feature_channels: 4, ..Default::default() };
        Checkpoint { store: init_params(&config, 3).unwrap(), config }
    }

    #[test]
    fn trace_dump_names() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::from_fn(12, 12, |x, y| [(x * 5) as u8, (y * 5) as u8, 20]);
        let (out, trace) = enhance_with_trace(&img, &tiny()).unwrap();
        assert_eq!(out.dims(), (12, 12));
        let files = dump_trace(&trace, dir.path()).unwrap();
        assert_eq!(files.len(), 3 + 2 * 2);
        for name in ["I_0.png", "I_2.png", "L1_1.png", "L2_2.png"] {
            assert!(dir.path().join(name).is_file(), "{name}");
        }
    }

    #[test]
    fn pairing_requires_matching_reference() {
        let (low, refs) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let img = RawImage::filled(16, 16, [10, 20, 30]);
        save_image(&img, low.path().join("a.png")).unwrap();
        assert!(matches!(pair_by_name(low.path(), refs.path()), Err(SimiError::FileNotFound(_))));
        save_image(&img, refs.path().join("a.png")).unwrap();
        let report = evaluate_dirs(&tiny(), low.path(), refs.path()).unwrap();
        assert_eq!(report.images.len(), 1);
        assert_eq!(report.mean_psnr, report.images[0].psnr);
    }
}
