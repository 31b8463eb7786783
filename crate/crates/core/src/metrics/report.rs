use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    fid, intra_lpips, intra_style_loss, kid, mean_clip_score, mean_giqa, nonoverlapping_views, perceptual_distance,
    style_loss, ClipConvention, FeatureExtractor, JointEmbedder, MetricsError, DEFAULT_GIQA_CEILING,
};
use crate::codec::{read_image, sha256_hex};
use crate::conditioning::fnv1a;
use crate::tensor::Tensor3;

/// Which scores to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub clip: bool,
    pub intra: bool,
    pub fid: bool,
    pub kid: bool,
    pub giqa: bool,
}

impl ScoreSet {
    pub fn all() -> Self {
        Self {
            clip: true,
            intra: true,
            fid: true,
            kid: true,
            giqa: true,
        }
    }

    /// Comma-separated subset of `clip,intra,fid,kid,giqa`, or `all`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut s = Self {
            clip: false,
            intra: false,
            fid: false,
            kid: false,
            giqa: false,
        };
        for item in list.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match item {
                "all" => s = Self::all(),
                "clip" => s.clip = true,
                "intra" => s.intra = true,
                "fid" => s.fid = true,
                "kid" => s.kid = true,
                "giqa" => s.giqa = true,
                other => return Err(format!("unknown score {other:?}")),
            }
        }
        if s == Self::parse_none() {
            return Err("no scores selected".into());
        }
        Ok(s)
    }

    fn parse_none() -> Self {
        Self {
            clip: false,
            intra: false,
            fid: false,
            kid: false,
            giqa: false,
        }
    }
}

/// Pluggable backends; `None` marks a missing plugin.
#[derive(Clone, Copy, Default)]
pub struct Extractors<'a> {
    pub perceptual: Option<&'a dyn FeatureExtractor>,
    pub style: Option<&'a dyn FeatureExtractor>,
    pub embedding: Option<&'a dyn FeatureExtractor>,
    pub clip: Option<&'a dyn JointEmbedder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub view_px: usize,
    pub scores: ScoreSet,
    pub seed: u64,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub giqa_k: usize,
    pub giqa_ceiling: f64,
    pub clip_convention: ClipConvention,
}

impl EvalOptions {
    pub fn new(view_px: usize) -> Self {
        Self {
            view_px,
            scores: ScoreSet::all(),
            seed: 0,
            kid_subset_size: 100,
            kid_subsets: 10,
            giqa_k: 5,
            giqa_ceiling: DEFAULT_GIQA_CEILING,
            clip_convention: ClipConvention::Percent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub images: usize,
    pub crops_per_image: Vec<usize>,
    pub pairs_per_image: Vec<usize>,
    pub reference_images: usize,
    pub reference_id: String,
    pub seed: u64,
    pub view_px: usize,
    pub clip_convention: ClipConvention,
    pub giqa_variant: String,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub extractors: Vec<String>,
}

/// Raw score values. I-StyleL, KID and mGIQA are conventionally shown
/// multiplied by 1000; see [`ScoreReport::table_row`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mclip: Option<f64>,
    pub i_lpips: Option<f64>,
    pub i_style_l: Option<f64>,
    pub fid: Option<f64>,
    pub kid: Option<f64>,
    pub mgiqa: Option<f64>,
    pub scaled_by_1000_in_tables: Vec<String>,
    pub protocol: Protocol,
    pub skipped: Vec<String>,
}

impl ScoreReport {
    /// `mCLIP I-LPIPS I-StyleL FID KID mGIQA` with the table scaling.
    pub fn table_row(&self) -> String {
        let f = |v: Option<f64>, scale: f64| v.map_or("-".to_string(), |x| format!("{:.3}", x * scale));
        format!(
            "{} {} {} {} {} {}",
            f(self.mclip, 1.0),
            f(self.i_lpips, 1.0),
            f(self.i_style_l, 1e3),
            f(self.fid, 1.0),
            f(self.kid, 1e3),
            f(self.mgiqa, 1e3)
        )
    }
}

/// On-disk cache of per-image feature rows keyed by file hash and
/// extractor name. Records are `u32` rows, `u32` cols, `f32` values.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub dir: PathBuf,
}

impl FeatureCache {
    fn path(&self, file_hash: &str, extractor: &str) -> PathBuf {
        self.dir.join(format!("{file_hash}-{:016x}.f32", fnv1a(extractor.as_bytes())))
    }

    pub fn get(&self, file_hash: &str, extractor: &str) -> Option<Vec<Vec<f64>>> {
        let bytes = fs::read(self.path(file_hash, extractor)).ok()?;
        let word = |i: usize| u32::from_le_bytes(bytes.get(4 * i..4 * i + 4)?.try_into().ok()?).try_into().ok();
        let (rows, cols): (usize, usize) = (word(0)?, word(1)?);
        let body = bytes.get(8..)?;
        if body.len() != rows * cols * 4 {
            return None;
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Some(vals.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
    }

    pub fn put(&self, file_hash: &str, extractor: &str, rows: &[Vec<f64>]) -> Result<(), MetricsError> {
        fs::create_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        let cols = rows.first().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(8 + rows.len() * cols * 4);
        out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for v in rows.iter().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let path = self.path(file_hash, extractor);
        fs::write(&path, out).map_err(|e| io_err(&path, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> MetricsError {
    MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct LoadedImage {
    hash: String,
    pixels: Tensor3<f64>,
}

fn load_dir(dir: &Path) -> Result<Vec<LoadedImage>, MetricsError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(MetricsError::EmptyDir(dir.display().to_string()));
    }
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| io_err(p, e))?;
            Ok(LoadedImage {
                hash: sha256_hex(&bytes),
                pixels: read_image(p)?.to_unit(),
            })
        })
        .collect()
}

fn crops_of(img: &Tensor3<f64>, view_px: usize) -> Result<Vec<Tensor3<f64>>, MetricsError> {
    if img.height == view_px && img.width == view_px {
        return Ok(vec![img.clone()]);
    }
    nonoverlapping_views(img, view_px)
}

fn embed_rows(
    images: &[LoadedImage],
    view_px: usize,
    extractor: &dyn FeatureExtractor,
    cache: Option<&FeatureCache>,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    let name = format!("{}@{view_px}", extractor.name());
    let mut rows = Vec::new();
    for img in images {
        if let Some(hit) = cache.and_then(|c| c.get(&img.hash, &name)) {
            rows.extend(hit);
            continue;
        }
        let r: Vec<Vec<f64>> = crops_of(&img.pixels, view_px)?.iter().map(|c| extractor.embed(c)).collect();
        if let Some(c) = cache {
            c.put(&img.hash, &name, &r)?;
        }
        rows.extend(r);
    }
    Ok(rows)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Scores a directory of generated panoramas against a directory of
/// reference squares. Scores whose extractor is missing are listed in the
/// error together with the partial report.
pub fn evaluate_run(
    generated_dir: &Path,
    reference_dir: &Path,
    prompt: &str,
    extractors: &Extractors<'_>,
    options: &EvalOptions,
    cache: Option<&FeatureCache>,
) -> Result<ScoreReport, MetricsError> {
    let generated = load_dir(generated_dir)?;
    let scores = options.scores;
    let needs_ref = scores.fid || scores.kid || scores.giqa;
    let reference = if needs_ref { load_dir(reference_dir)? } else { Vec::new() };
    let view = options.view_px;
    let mut skipped = Vec::new();
    let mut crops_per_image = Vec::new();
    let mut pairs_per_image = Vec::new();

    let (mut i_lpips, mut i_style_l) = (None, None);
    if scores.intra {
        let mut lp = Vec::new();
        let mut st = Vec::new();
        for img in &generated {
            if let Some(e) = extractors.perceptual {
                let s = intra_lpips(&img.pixels, view, e)?;
                crops_per_image.push(s.crops);
                pairs_per_image.push(s.pairs);
                lp.push(s.value);
            }
            if let Some(e) = extractors.style {
                st.push(intra_style_loss(&img.pixels, view, e)?.value);
            }
        }
        match extractors.perceptual {
            Some(_) => i_lpips = Some(mean(&lp)),
            None => skipped.push("I-LPIPS".to_string()),
        }
        match extractors.style {
            Some(_) => i_style_l = Some(mean(&st)),
            None => skipped.push("I-StyleL".to_string()),
        }
    }

    let (mut fid_v, mut kid_v, mut giqa_v) = (None, None, None);
    if needs_ref {
        match extractors.embedding {
            Some(e) => {
                let g = embed_rows(&generated, view, e, cache)?;
                let r = embed_rows(&reference, view, e, cache)?;
                if scores.fid {
                    fid_v = Some(fid(&g, &r)?);
                }
                if scores.kid {
                    let m = options.kid_subset_size.min(g.len()).min(r.len());
                    kid_v = Some(kid(&g, &r, m, options.kid_subsets, options.seed)?.mean);
                }
                if scores.giqa {
                    let k = options.giqa_k.min(r.len().saturating_sub(1)).max(1);
                    giqa_v = Some(mean_giqa(&g, &r, k, options.giqa_ceiling)?);
                }
            }
            None => {
                for (on, name) in [(scores.fid, "FID"), (scores.kid, "KID"), (scores.giqa, "mGIQA")] {
                    if on {
                        skipped.push(name.to_string());
                    }
                }
            }
        }
    }

    let mut mclip = None;
    if scores.clip {
        match extractors.clip {
            Some(c) => {
                let imgs: Vec<Tensor3<f64>> = generated.iter().map(|i| i.pixels.clone()).collect();
                mclip = Some(mean_clip_score(&imgs, prompt, c, view, options.seed, options.clip_convention)?);
            }
            None => skipped.push("mCLIP".to_string()),
        }
    }

    let mut names = Vec::new();
    for (label, e) in [
        ("perceptual", extractors.perceptual),
        ("style", extractors.style),
        ("embedding", extractors.embedding),
    ] {
        if let Some(e) = e {
            names.push(format!("{label}={}", e.name()));
        }
    }
    if let Some(c) = extractors.clip {
        names.push(format!("clip={}", c.name()));
    }
    let report = ScoreReport {
        mclip,
        i_lpips,
        i_style_l,
        fid: fid_v,
        kid: kid_v,
        mgiqa: giqa_v,
        scaled_by_1000_in_tables: vec!["I-StyleL".into(), "KID".into(), "mGIQA".into()],
        protocol: Protocol {
            images: generated.len(),
            crops_per_image,
            pairs_per_image,
            reference_images: reference.len(),
            reference_id: reference_dir.display().to_string(),
            seed: options.seed,
            view_px: view,
            clip_convention: options.clip_convention,
            giqa_variant: "knn".into(),
            kid_subset_size: options.kid_subset_size,
            kid_subsets: options.kid_subsets,
            extractors: names,
        },
        skipped: skipped.clone(),
    };
    if skipped.is_empty() {
        Ok(report)
    } else {
        Err(MetricsError::MissingExtractor {
            skipped,
            report: Box::new(report),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub fid: f64,
    pub kid: f64,
    pub lpips: f64,
    pub style: f64,
    pub pairs: usize,
}

/// Scores of a reference set against itself: FID and KID between two
/// seeded random halves, LPIPS and style loss over random image pairs.
pub fn baseline_self_comparison(
    images: &[Tensor3<f64>],
    embedding: &dyn FeatureExtractor,
    perceptual: &dyn FeatureExtractor,
    style: &dyn FeatureExtractor,
    pairs: usize,
    seed: u64,
) -> Result<BaselineReport, MetricsError> {
    if images.len() < 4 {
        return Err(MetricsError::TooFewSamples {
            needed: 4,
            got: images.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let half = images.len() / 2;
    let emb = |idx: &[usize]| idx.iter().map(|&i| embedding.embed(&images[i])).collect::<Vec<_>>();
    let (a, b) = (emb(&order[..half]), emb(&order[half..2 * half]));
    let fid_v = fid(&a, &b)?;
    let kid_v = kid(&a, &b, half.min(100), 10, seed)?.mean;
    let mut lp = 0.0;
    let mut st = 0.0;
    for _ in 0..pairs {
        let i = rng.random_range(0..images.len());
        let mut j = rng.random_range(0..images.len() - 1);
        if j >= i {
            j += 1;
        }
        lp += perceptual_distance(&perceptual.feature_maps(&images[i]), &perceptual.feature_maps(&images[j]));
        st += style_loss(&style.feature_maps(&images[i]), &style.feature_maps(&images[j]));
    }
    Ok(BaselineReport {
        fid: fid_v,
        kid: kid_v,
        lpips: lp / pairs.max(1) as f64,
        style: st / pairs.max(1) as f64,
        pairs,
    })
}
