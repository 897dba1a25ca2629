//! Corpus I/O and the shared infer-and-overlay pipeline.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use morseuq::grids::{load_binary, load_scalar, warn_if_outside_unit};
use morseuq::inferpost::{mc_inference, McConfig, StructureEstimate};
use morseuq::morse::skeletonize;
use morseuq::probdmt::SamplerConfig;
use morseuq::regressor::RegressorParams;
use morseuq::{BinaryGrid, ScalarGrid};

pub const IMAGE_FILE: &str = "image.grd";
pub const LIKELIHOOD_FILE: &str = "likelihood.grd";
pub const GT_FILE: &str = "gt.grd";

#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub id: String,
    pub image: ScalarGrid,
    pub likelihood: ScalarGrid,
    pub gt: Option<BinaryGrid>,
}

/// Reads one case directory. A missing image falls back to the
/// likelihood; a missing ground truth is allowed.
pub fn load_case(dir: &Path) -> Result<LoadedCase> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let likelihood = read_scalar(&dir.join(LIKELIHOOD_FILE))?;
    warn_if_outside_unit("likelihood", &likelihood);
    let image_path = dir.join(IMAGE_FILE);
    let image = if image_path.exists() {
        read_scalar(&image_path)?
    } else {
        log::warn!("{id}: no {IMAGE_FILE}, using the likelihood as image");
        likelihood.clone()
    };
    image.same_dims(&likelihood)?;
    let gt_path = dir.join(GT_FILE);
    let gt = if gt_path.exists() {
        let gt = read_binary(&gt_path)?;
        gt.same_dims(&likelihood)?;
        Some(gt)
    } else {
        None
    };
    Ok(LoadedCase {
        id,
        image,
        likelihood,
        gt,
    })
}

/// All subdirectories holding a likelihood, sorted by name.
pub fn load_corpus(dir: &Path) -> Result<Vec<LoadedCase>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LIKELIHOOD_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("corpus {} contains no case directories", dir.display());
    }
    dirs.iter().map(|d| load_case(d)).collect()
}

pub fn read_scalar(path: &Path) -> Result<ScalarGrid> {
    load_scalar(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_binary(path: &Path) -> Result<BinaryGrid> {
    load_binary(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, l)| {
            let l = l?;
            serde_json::from_str(&l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Skeleton plus MC inference for one case.
pub fn estimate_case(
    params: &RegressorParams<f32>,
    case: &LoadedCase,
    sampler: &SamplerConfig,
    mc: &McConfig,
    bg: f64,
) -> Result<Vec<StructureEstimate>> {
    if params.rank != case.likelihood.rank() {
        bail!(
            "model expects rank {} grids, case {} has rank {}",
            params.rank,
            case.id,
            case.likelihood.rank()
        );
    }
    let skel = skeletonize(&case.likelihood, bg);
    Ok(mc_inference(params, &skel, &case.image, &case.likelihood, sampler, mc)?)
}
