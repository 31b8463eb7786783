use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use mad_core::backbone::train::{train_toy, StripeDataset, TrainConfig};
use mad_core::backbone::weights::{bundled_toy, load_weights, save_weights};
use mad_core::backbone::{AttnBlockDescriptor, NoisePredictor, ToyDenoiser, ToyDenoiserConfig};
use mad_core::codec::{write_image, write_latent, write_manifest, CodecError, DecoderSpec, LatentSnapshot, RunManifest};
use mad_core::codec::{load_manifest, read_image};
use mad_core::conditioning::{ToyEmbedder, ToyEmbedderConfig};
use mad_core::mad::MergeProbe;
use mad_core::metrics::{
    evaluate_run, EvalOptions, Extractors, FeatureCache, MetricsError, RandomConvConfig, RandomConvExtractor,
    ScoreReport, ScoreSet, ToyClip,
};
use mad_core::sampler::{fit_exponent, runtime_profile, BenchMode, NoiseSchedule, RuntimeRow, StepObserver};
use mad_core::tensor::Tensor3;
use mad_core::tiling::TilingError;
use mad_core::{
    generate_panorama, plan_views, GenerationMode, MadOptions, MergeSchedule, PanoramaRequest, PanoramaSpec,
    SamplerConfig, SamplerError, SamplerMode, Scalar, StagePreset,
};
use serde::Serialize;

use crate::config::{AblateArgs, BenchArgs, EvalArgs, GenArgs, ReplayArgs, TrainArgs};
use crate::{CliError, Global};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

impl Precision {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(CliError::Config(format!("unknown precision {other:?}; use f32 or f64"))),
        }
    }
}

/// A fully resolved generation setup.
#[derive(Debug, Clone)]
struct Resolved {
    request: PanoramaRequest,
    precision: Precision,
    weights: Option<PathBuf>,
    dump_latents: bool,
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn compute_err(e: impl std::fmt::Display) -> CliError {
    CliError::Compute(e.to_string())
}

/// Errors raised before the first step are configuration errors.
fn sampler_err(e: SamplerError) -> CliError {
    match e {
        SamplerError::AtStep { .. } | SamplerError::Replay(_) | SamplerError::Degenerate { .. } => compute_err(e),
        SamplerError::Codec(CodecError::Io { .. }) => compute_err(e),
        _ => config_err(e),
    }
}

fn resolve(g: &GenArgs) -> Result<Resolved, CliError> {
    let backbone = g.backbone.as_deref().unwrap_or("toy");
    if backbone != "toy" {
        return Err(CliError::Config(format!("backbone {backbone:?} is not available; only \"toy\" ships")));
    }
    let prompt = g
        .prompt
        .clone()
        .ok_or_else(|| CliError::Config("a prompt is required (--prompt)".into()))?;
    let scale = g.latent_scale.unwrap_or(8);
    let (height, width) = (g.height.unwrap_or(512), g.width.unwrap_or(3072));
    if scale == 0 || height % scale != 0 || width % scale != 0 {
        return Err(CliError::Config(format!("{height}x{width} is not a multiple of the latent scale {scale}")));
    }
    let view = g.view.unwrap_or((height / scale).min(width / scale));
    let spec = PanoramaSpec {
        image_height: height,
        image_width: width,
        latent_scale: scale,
        latent_channels: 4,
        view_size: view,
        stride: g.stride.unwrap_or((view / 4).max(1)),
        strict: g.strict,
    };
    let mode = match g.scheduler.as_deref().unwrap_or("ddim") {
        "ddim" => SamplerMode::Ddim,
        "lcm" => SamplerMode::Consistency,
        other => return Err(CliError::Config(format!("unknown scheduler {other:?}; use ddim or lcm"))),
    };
    let steps = g.steps.unwrap_or(if mode == SamplerMode::Ddim { 50 } else { 4 });
    let tau = g.tau.unwrap_or(if mode == SamplerMode::Ddim { 15.min(steps) } else { steps / 2 });
    let preset: StagePreset = g.blocks.as_deref().unwrap_or("all").parse().map_err(config_err)?;
    let gen_mode = match g.mode.as_deref().unwrap_or("joint") {
        "joint" => GenerationMode::Joint,
        "direct-long" => GenerationMode::DirectLong,
        other => return Err(CliError::Config(format!("unknown mode {other:?}; use joint or direct-long"))),
    };
    let decoder = match g.decoder.as_deref().unwrap_or("toy") {
        "toy" => DecoderSpec::toy(scale),
        "external-vae" => {
            return Err(CliError::Config(
                "decoder external-vae is not available in this build; use --decoder toy".into(),
            ))
        }
        other => return Err(CliError::Config(format!("unknown decoder {other:?}"))),
    };
    let sampler = SamplerConfig {
        mode,
        steps,
        guidance_scale: g.guidance.unwrap_or(7.5),
        eta: g.eta.unwrap_or(0.0),
        seed: g.seed.unwrap_or(0),
        schedule: NoiseSchedule::default(),
        ..SamplerConfig::default()
    };
    sampler.validate().map_err(config_err)?;
    let mut mad = MadOptions::default();
    if let Some(cap) = g.token_cap {
        mad.token_cap = Some(cap);
    }
    let request = PanoramaRequest {
        spec,
        prompt,
        schedule: MergeSchedule::new(tau, preset, steps).map_err(config_err)?,
        sampler,
        mad,
        mode: gen_mode,
        decoder,
    };
    request.layout().map_err(sampler_err)?;
    Ok(Resolved {
        request,
        precision: Precision::parse(g.precision.as_deref().unwrap_or("f32"))?,
        weights: g.weights.clone(),
        dump_latents: g.dump_latents,
    })
}

fn load_net<S: Scalar>(weights: Option<&Path>) -> Result<ToyDenoiser<S>, CliError> {
    match weights {
        Some(path) => load_weights(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display()))),
        None => Ok(bundled_toy()),
    }
}

fn embedder<S: Scalar>() -> ToyEmbedder<S> {
    ToyEmbedder::new(ToyEmbedderConfig::default())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Compute(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Compute(format!("{}: {e}", path.display())))
}

fn slug(text: &str) -> String {
    let mut s: String = text
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    let s = s.trim_matches('-');
    let s: String = s.chars().take(40).collect();
    if s.is_empty() {
        "run".into()
    } else {
        s
    }
}

fn stem(request: &PanoramaRequest) -> String {
    format!("{}-s{}-tau{}", slug(&request.prompt), request.sampler.seed, request.schedule.tau)
}

/// Writes every step's latent as `step_NNN.madlat`.
struct LatentDump {
    dir: PathBuf,
    error: Option<CodecError>,
}

impl<S: Scalar> MergeProbe<S> for LatentDump {
    fn merged(&mut self, _: usize, _: &AttnBlockDescriptor, _: &mad_core::tiling::ViewStack<S>) {}
}

impl<S: Scalar> StepObserver<S> for LatentDump {
    fn step_done(&mut self, step: usize, latent: &Tensor3<S>) {
        if self.error.is_none() {
            let path = self.dir.join(format!("step_{step:03}.madlat"));
            self.error = write_latent(&LatentSnapshot::new(step, latent), &path).err();
        }
    }
}

struct Target {
    request: PanoramaRequest,
    /// Path of the image and manifest below `images/` and `manifests/`.
    name: String,
}

fn generate_targets<S: Scalar>(
    global: &Global,
    targets: &[Target],
    weights: Option<&Path>,
    dump_latents: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let net = load_net::<S>(weights)?;
    let emb = embedder::<S>();
    let paths = Mutex::new(vec![PathBuf::new(); targets.len()]);
    parallel_for(global.jobs, targets.len(), |i| {
        let t = &targets[i];
        let image_path = global.out.join("images").join(format!("{}.png", t.name));
        let manifest_path = global.out.join("manifests").join(format!("{}.json", t.name));
        for p in [&image_path, &manifest_path] {
            create_dir(p.parent().expect("joined path"))?;
        }
        let mut dump = dump_latents.then(|| LatentDump {
            dir: global.out.join("latents").join(&t.name),
            error: None,
        });
        if let Some(d) = &dump {
            create_dir(&d.dir)?;
        }
        let observer = dump.as_mut().map(|d| d as &mut dyn StepObserver<S>);
        let g = generate_panorama(&t.request, &net, &emb, observer).map_err(sampler_err)?;
        if let Some(e) = dump.and_then(|d| d.error) {
            return Err(compute_err(e));
        }
        write_image(&g.image, &image_path).map_err(compute_err)?;
        let mut manifest = g.manifest;
        manifest.image_path = Some(format!("images/{}.png", t.name));
        write_manifest(&manifest, &manifest_path).map_err(compute_err)?;
        paths.lock().expect("lock")[i] = image_path;
        Ok(())
    })?;
    Ok(paths.into_inner().expect("lock"))
}

fn run_targets(global: &Global, r: &Resolved, targets: &[Target]) -> Result<Vec<PathBuf>, CliError> {
    let w = r.weights.as_deref();
    match r.precision {
        Precision::F32 => generate_targets::<f32>(global, targets, w, r.dump_latents),
        Precision::F64 => generate_targets::<f64>(global, targets, w, r.dump_latents),
    }
}

/// Runs `f(0..n)` on at most `jobs` threads; stops at the first error.
fn parallel_for(jobs: usize, n: usize, f: impl Fn(usize) -> Result<(), CliError> + Sync) -> Result<(), CliError> {
    let next = AtomicUsize::new(0);
    let failure = Mutex::new(None);
    thread::scope(|s| {
        for _ in 0..jobs.min(n).max(1) {
            s.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                if let Err(e) = f(i) {
                    failure.lock().expect("lock").get_or_insert(e);
                    break;
                }
            });
        }
    });
    failure.into_inner().expect("lock").map_or(Ok(()), Err)
}

pub fn generate(global: &Global, g: GenArgs) -> Result<(), CliError> {
    let r = resolve(&g)?;
    let target = Target {
        name: stem(&r.request),
        request: r.request.clone(),
    };
    let paths = run_targets(global, &r, &[target])?;
    println!("{}", paths[0].display());
    Ok(())
}

fn first_image_height(dir: &Path) -> Result<usize, CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    entries.sort();
    let first = entries
        .first()
        .ok_or_else(|| CliError::Config(format!("no PNG images in {}", dir.display())))?;
    Ok(read_image(first).map_err(compute_err)?.height)
}

/// Pools crops down to at most 64 pixels before the random convolutions.
fn extractor_for(view_px: usize) -> RandomConvExtractor {
    let mut pool = 1;
    while view_px / (pool * 2) >= 32 && view_px / pool > 64 {
        pool *= 2;
    }
    RandomConvExtractor::new(RandomConvConfig {
        input_pool: pool,
        ..RandomConvConfig::default()
    })
}

/// Scores one directory and writes `reports/<name>.json`. Returns the
/// report, or the partial report and skipped scores when an extractor is
/// missing.
fn score_dir(
    global: &Global,
    generated: &Path,
    e: &EvalArgs,
    default_scores: &str,
    caption: &str,
    name: &str,
) -> Result<(ScoreReport, Vec<String>), CliError> {
    let scores = ScoreSet::parse(e.scores.as_deref().unwrap_or(default_scores)).map_err(CliError::Config)?;
    let reference = match (&e.reference, scores.fid || scores.kid || scores.giqa) {
        (Some(r), _) => r.clone(),
        (None, false) => generated.to_path_buf(),
        (None, true) => return Err(CliError::Config("fid, kid and giqa need --reference".into())),
    };
    let view_px = match e.view_px {
        Some(v) => v,
        None => first_image_height(generated)?,
    };
    let extractor = match e.extractor.as_deref().unwrap_or("random-conv") {
        "random-conv" => Some(extractor_for(view_px)),
        "none" => None,
        other => return Err(CliError::Config(format!("unknown extractor {other:?}"))),
    };
    let clip = match e.clip.as_deref().unwrap_or("toy") {
        "toy" => Some(ToyClip {
            image: extractor_for(view_px),
            seed: 0,
        }),
        "none" => None,
        other => return Err(CliError::Config(format!("unknown clip embedder {other:?}"))),
    };
    let ext = extractor.as_ref().map(|x| x as &dyn mad_core::metrics::FeatureExtractor);
    let extractors = Extractors {
        perceptual: ext,
        style: ext,
        embedding: ext,
        clip: clip.as_ref().map(|c| c as &dyn mad_core::metrics::JointEmbedder),
    };
    let mut options = EvalOptions::new(view_px);
    options.scores = scores;
    options.seed = e.eval_seed.unwrap_or(0);
    if let Some(k) = e.kid_subset_size {
        options.kid_subset_size = k;
    }
    let cache = FeatureCache {
        dir: global.out.join("features"),
    };
    let (report, skipped) = match evaluate_run(generated, &reference, caption, &extractors, &options, Some(&cache)) {
        Ok(r) => (r, Vec::new()),
        Err(MetricsError::MissingExtractor { skipped, report }) => (*report, skipped),
        Err(MetricsError::EmptyDir(d)) => return Err(CliError::Config(format!("no images found in {d}"))),
        Err(other) => return Err(compute_err(other)),
    };
    let json = serde_json::to_string_pretty(&report).map_err(compute_err)?;
    write_text(&global.out.join("reports").join(format!("{name}.json")), &json)?;
    Ok((report, skipped))
}

const TABLE_HEADER: &str = "mCLIP I-LPIPS I-StyleL(x1e3) FID KID(x1e3) mGIQA(x1e3)";

fn missing(skipped: &[String]) -> CliError {
    CliError::Config(format!("missing extractor; skipped scores: {}", skipped.join(", ")))
}

pub fn evaluate(global: &Global, e: EvalArgs) -> Result<(), CliError> {
    let generated = e.generated.clone().unwrap_or_else(|| global.out.join("images"));
    let caption = e.caption.clone().unwrap_or_default();
    let wants_clip = ScoreSet::parse(e.scores.as_deref().unwrap_or("all")).map_err(CliError::Config)?.clip;
    if wants_clip && caption.is_empty() {
        return Err(CliError::Config("mCLIP needs --caption".into()));
    }
    let name = e.name.clone().unwrap_or_else(|| "evaluation".into());
    let (report, skipped) = score_dir(global, &generated, &e, "all", &caption, &name)?;
    println!("{TABLE_HEADER}");
    println!("{}", report.table_row());
    println!("{}", global.out.join("reports").join(format!("{name}.json")).display());
    if skipped.is_empty() {
        Ok(())
    } else {
        Err(missing(&skipped))
    }
}

#[derive(Serialize)]
struct AblationRow {
    value: String,
    images: usize,
    report: ScoreReport,
}

pub fn ablate(global: &Global, a: AblateArgs, g: GenArgs, e: EvalArgs) -> Result<(), CliError> {
    let sweep = a
        .sweep
        .as_deref()
        .ok_or_else(|| CliError::Config("--sweep is required, e.g. tau=0,5,15".into()))?;
    let (key, list) = sweep
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("sweep {sweep:?} is not key=v1,v2,...")))?;
    let values: Vec<&str> = list.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config("the sweep lists no values".into()));
    }
    let base = resolve(&g)?;
    let seeds = a.seeds.unwrap_or(4);
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let steps = base.request.sampler.steps;
    let mut settings = Vec::new();
    for v in &values {
        let mut req = base.request.clone();
        req.schedule = match key {
            "tau" => {
                let tau: usize = v.parse().map_err(|_| CliError::Config(format!("tau {v:?} is not a count")))?;
                let preset: StagePreset = g.blocks.as_deref().unwrap_or("all").parse().map_err(config_err)?;
                MergeSchedule::new(tau, preset, steps).map_err(config_err)?
            }
            "blocks" => {
                let preset: StagePreset = v.parse().map_err(config_err)?;
                MergeSchedule::new(req.schedule.tau, preset, steps).map_err(config_err)?
            }
            other => return Err(CliError::Config(format!("cannot sweep {other:?}; use tau or blocks"))),
        };
        settings.push((v.to_string(), req));
    }
    let mut targets = Vec::new();
    for (v, req) in &settings {
        for k in 0..seeds {
            let mut r = req.clone();
            r.sampler.seed = base.request.sampler.seed + k;
            targets.push(Target {
                name: format!("ablate-{key}-{v}/{}", stem(&r)),
                request: r,
            });
        }
    }
    run_targets(global, &base, &targets)?;

    let caption = e.caption.clone().unwrap_or_else(|| base.request.prompt.clone());
    let default_scores = if e.reference.is_some() { "all" } else { "clip,intra" };
    let mut rows = Vec::new();
    let mut all_skipped = Vec::new();
    let mut table = format!("| {key} | {} |\n|---|---|---|---|---|---|---|\n", TABLE_HEADER.replace(' ', " | "));
    println!("{key:>8} {TABLE_HEADER}");
    for (v, _) in &settings {
        let dir = global.out.join("images").join(format!("ablate-{key}-{v}"));
        let (report, skipped) = score_dir(global, &dir, &e, default_scores, &caption, &format!("ablate-{key}-{v}"))?;
        println!("{v:>8} {}", report.table_row());
        table.push_str(&format!("| {v} | {} |\n", report.table_row().replace(' ', " | ")));
        all_skipped.extend(skipped);
        rows.push(AblationRow {
            value: v.clone(),
            images: seeds as usize,
            report,
        });
    }
    let reports = global.out.join("reports");
    write_text(&reports.join(format!("ablate-{key}.md")), &table)?;
    write_text(
        &reports.join(format!("ablate-{key}.json")),
        &serde_json::to_string_pretty(&rows).map_err(compute_err)?,
    )?;
    all_skipped.sort();
    all_skipped.dedup();
    if all_skipped.is_empty() {
        Ok(())
    } else {
        Err(missing(&all_skipped))
    }
}

#[derive(Serialize)]
struct BenchReport {
    rows: Vec<RuntimeRow>,
    time_exponents: Vec<(BenchMode, f64)>,
    attention_flop_exponents: Vec<(BenchMode, f64)>,
}

fn parse_mode(s: &str) -> Result<BenchMode, CliError> {
    match s {
        "direct-long" => Ok(BenchMode::DirectLong),
        "joint-tau0" => Ok(BenchMode::JointTau0),
        "joint-tau-full" => Ok(BenchMode::JointTauFull),
        other => Err(CliError::Config(format!("unknown bench mode {other:?}"))),
    }
}

pub fn bench(global: &Global, b: BenchArgs, g: GenArgs) -> Result<(), CliError> {
    let list = b
        .widths
        .as_deref()
        .ok_or_else(|| CliError::Config("--widths is required, e.g. 512,1024,2048".into()))?;
    let widths_px = list
        .split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|_| CliError::Config(format!("width {w:?} is not a number"))))
        .collect::<Result<Vec<_>, _>>()?;
    let modes = match b.modes.as_deref() {
        Some(m) => m.split(',').map(|s| parse_mode(s.trim())).collect::<Result<Vec<_>, _>>()?,
        None => BenchMode::ALL.to_vec(),
    };
    let mut g = g;
    g.prompt.get_or_insert_with(|| "benchmark".into());
    g.width = Some(*widths_px.iter().max().unwrap_or(&0));
    let r = resolve(&g)?;
    let scale = r.request.spec.latent_scale;
    let mut widths = Vec::new();
    for &w in &widths_px {
        if w % scale != 0 {
            return Err(CliError::Config(format!("width {w} is not a multiple of the latent scale {scale}")));
        }
        let mut spec = r.request.spec.clone();
        spec.image_width = w;
        plan_views(&spec, spec.orientation()).map_err(|e: TilingError| CliError::Config(format!("width {w}: {e}")))?;
        widths.push(w / scale);
    }
    let repeats = b.repeats.unwrap_or(3);
    let rows = match r.precision {
        Precision::F32 => {
            let net = load_net::<f32>(r.weights.as_deref())?;
            runtime_profile(&r.request, &net, &embedder(), &widths, &modes, repeats)
        }
        Precision::F64 => {
            let net = load_net::<f64>(r.weights.as_deref())?;
            runtime_profile(&r.request, &net, &embedder(), &widths, &modes, repeats)
        }
    }
    .map_err(sampler_err)?;
    println!("{:>8} {:>15} {:>6} {:>12} {:>16}", "width", "mode", "views", "s/step", "attn FLOPs");
    for row in &rows {
        println!(
            "{:>8} {:>15} {:>6} {:>12.4} {:>16}",
            row.width * scale,
            format!("{:?}", row.mode),
            row.views,
            row.seconds_per_step,
            row.attention_flops
        );
    }
    let mut report = BenchReport {
        rows: rows.clone(),
        time_exponents: Vec::new(),
        attention_flop_exponents: Vec::new(),
    };
    if widths.len() >= 2 {
        for &m in &modes {
            let sel: Vec<&RuntimeRow> = rows.iter().filter(|r| r.mode == m).collect();
            let xs: Vec<f64> = sel.iter().map(|r| r.width as f64).collect();
            let t = fit_exponent(&xs, &sel.iter().map(|r| r.seconds_per_step).collect::<Vec<_>>());
            let f = fit_exponent(&xs, &sel.iter().map(|r| r.attention_flops as f64).collect::<Vec<_>>());
            println!("{m:?}: time exponent {t:.3}, attention FLOP exponent {f:.3}");
            report.time_exponents.push((m, t));
            report.attention_flop_exponents.push((m, f));
        }
    }
    let path = global.out.join("reports").join("bench.json");
    write_text(&path, &serde_json::to_string_pretty(&report).map_err(compute_err)?)?;
    println!("{}", path.display());
    Ok(())
}

pub fn train(global: &Global, t: TrainArgs) -> Result<(), CliError> {
    let config = match t.arch.as_deref().unwrap_or("desk") {
        "desk" => ToyDenoiserConfig::desk(),
        "default" => ToyDenoiserConfig::default(),
        other => return Err(CliError::Config(format!("unknown architecture {other:?}"))),
    };
    let seed = t.seed.unwrap_or(0);
    let mut net = ToyDenoiser::<f32>::new(config, seed).map_err(config_err)?;
    let cfg = TrainConfig {
        steps: t.steps.unwrap_or(5000),
        batch: t.batch.unwrap_or(4),
        learning_rate: t.learning_rate.unwrap_or(2e-3),
        seed,
        ..TrainConfig::default()
    };
    let size = t.size.unwrap_or(16);
    if size % net.spatial_multiple() != 0 {
        return Err(CliError::Config(format!("size {size} must be a multiple of {}", net.spatial_multiple())));
    }
    let data = StripeDataset::new(size, config.latent_channels);
    let report =
        train_toy(&mut net, &embedder::<f32>(), &NoiseSchedule::default(), &data, &cfg).map_err(compute_err)?;
    let out = t.output.unwrap_or_else(|| global.out.join("weights").join("toy-stripes.madw"));
    if let Some(parent) = out.parent() {
        create_dir(parent)?;
    }
    save_weights(&net, &out).map_err(compute_err)?;
    let head = report.losses.iter().take(50).sum::<f64>() / report.losses.len().clamp(1, 50) as f64;
    println!("loss {head:.4} -> {:.4} over {} steps", report.tail_loss(50), cfg.steps);
    println!("{}", out.display());
    Ok(())
}

pub fn replay(global: &Global, r: ReplayArgs) -> Result<(), CliError> {
    let path = r
        .manifest
        .ok_or_else(|| CliError::Config("--manifest is required".into()))?;
    let manifest: RunManifest = load_manifest(&path).map_err(config_err)?;
    let weights = r.weights.as_deref();
    let image = match manifest.backbone.scalar.as_str() {
        "f32" => {
            let net = load_net::<f32>(weights)?;
            mad_core::sampler::replay(&manifest, &net, &embedder()).map(|g| g.image)
        }
        "f64" => {
            let net = load_net::<f64>(weights)?;
            mad_core::sampler::replay(&manifest, &net, &embedder()).map(|g| g.image)
        }
        other => return Err(CliError::Config(format!("manifest names unknown scalar {other:?}"))),
    }
    .map_err(|e| match e {
        SamplerError::Replay(m) => CliError::Compute(format!("replay mismatch: {m}")),
        other => sampler_err(other),
    })?;
    let name = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    let out = global.out.join("images").join(format!("{name}-replay.png"));
    create_dir(out.parent().expect("joined path"))?;
    write_image(&image, &out).map_err(compute_err)?;
    println!("{}", out.display());
    Ok(())
}
