use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dipt_core::backbone::Backbone;
use dipt_core::container;
use dipt_core::datagen::{find_pngs, make_stream, read_png, save_png};
use dipt_core::error::Error;
use dipt_core::experiment::{pretrain_backbone, run_method, Aggregate, ExperimentConfig, Method, MethodRun};
use dipt_core::fourier::{average_amplitude, style_augment, Planes};
use dipt_core::metrics::Report;
use dipt_core::prompts::{Prompt, PromptBank, PromptKind};
use dipt_core::trainer::{evaluate, evaluate_fixed};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fail::{CliError, CliResult};
use crate::Common;

/// Where every subcommand reads and writes below the output root.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn checkpoint(&self) -> PathBuf {
        self.root.join("pretrain").join("backbone.dipt")
    }

    fn method_dir(&self, m: Method) -> PathBuf {
        self.root.join(m.name())
    }

    fn seed_file(&self, m: Method, seed: u64, ext: &str) -> PathBuf {
        self.method_dir(m).join(format!("seed{seed}.{ext}"))
    }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.include_heldout_ftu |= common.include_heldout_ftu;
    Ok(cfg)
}

fn seeds(common: &Common, cfg: &ExperimentConfig) -> Vec<u64> {
    common.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_bytes(path, to_json(value).as_bytes())
}

fn require(path: &Path, hint: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            hint,
        })
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn load_backbone(cfg: &ExperimentConfig, path: &Path, hint: &'static str) -> CliResult<Backbone> {
    require(path, hint)?;
    let file = File::open(path).map_err(io_err(path))?;
    Ok(Backbone::from_checkpoint(cfg.backbone.clone(), BufReader::new(file))?)
}

#[derive(Serialize)]
struct PretrainSummary {
    pretrain_acc: f64,
    seed: u64,
    epoch_losses: Vec<f32>,
    checkpoint: PathBuf,
}

pub fn pretrain(common: &Common) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.pretrain_seed = seed;
    }
    let layout = Layout { root: cfg.out_dir.clone() };
    let (model, report) = pretrain_backbone(&cfg)?;
    let checkpoint = layout.checkpoint();
    write_bytes(&checkpoint, &model.params.to_bytes())?;
    let summary = PretrainSummary {
        pretrain_acc: report.train_accuracy,
        seed: cfg.pretrain_seed,
        epoch_losses: report.epoch_losses,
        checkpoint,
    };
    write_json(&layout.root.join("pretrain").join("summary.json"), &summary)?;
    print!("{}", to_json(&summary));
    Ok(())
}

pub fn run(common: &Common, method: Method) -> CliResult<()> {
    let cfg = load_config(common)?;
    let layout = Layout { root: cfg.out_dir.clone() };
    let pretrained = load_backbone(&cfg, &layout.checkpoint(), "run `dipt pretrain` first")?;
    for seed in seeds(common, &cfg) {
        let (run, report) = run_method(&cfg, &pretrained, method, seed)?;
        write_bytes(&layout.seed_file(method, seed, "dipt"), &run.model().params.to_bytes())?;
        match &run {
            MethodRun::Ours(dil) => {
                write_bytes(&layout.seed_file(method, seed, "bank"), &dil.bank.to_bytes())?;
                write_json(&layout.seed_file(method, seed, "bank.json"), &dil.bank.sidecar(&cfg.backbone))?;
            }
            MethodRun::Seqft(seq) => {
                let tensors = [seq.dip.named_tensors("dip"), seq.dsp.named_tensors("dsp")].concat();
                let bytes = container::encode(tensors.iter().map(|(n, t)| (n.as_str(), *t)));
                write_bytes(&layout.seed_file(method, seed, "prompts"), &bytes)?;
            }
        }
        let path = layout.seed_file(method, seed, "json");
        write_json(&path, &report)?;
        eprintln!(
            "{} seed {seed}: acc {:.4} bwt {:.4} il {:.4} ftu {:.4} ms {:.4} -> {}",
            method.name(),
            report.acc_last[..report.n].iter().sum::<f64>() / report.n as f64,
            report.bwt,
            report.il,
            report.ftu,
            report.ms,
            path.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalResult {
    method: Method,
    seed: u64,
    domains: Vec<String>,
    accuracy: Vec<f64>,
}

pub fn eval(common: &Common, method: Method) -> CliResult<()> {
    let cfg = load_config(common)?;
    let layout = Layout { root: cfg.out_dir.clone() };
    let mut results = Vec::new();
    for seed in seeds(common, &cfg) {
        let hint = "run `dipt run` for this seed first";
        let model = load_backbone(&cfg, &layout.seed_file(method, seed, "dipt"), hint)?;
        let stream = make_stream(&cfg.stream, seed)?;
        let columns = (0..stream.num_domains()).map(|j| stream.test_split(j).expect("column"));
        let accuracy = match method {
            Method::Ours => {
                let path = layout.seed_file(method, seed, "bank");
                require(&path, hint)?;
                let bank = PromptBank::from_bytes(&cfg.backbone, &read(&path)?)?;
                columns.map(|d| evaluate(&model, &bank, d)).collect::<Result<Vec<_>, _>>()?
            }
            Method::Seqft => {
                let path = layout.seed_file(method, seed, "prompts");
                require(&path, hint)?;
                let tensors: BTreeMap<_, _> = container::read_tensors(read(&path)?.as_slice())
                    .map_err(Error::from)?
                    .into_iter()
                    .collect();
                let load = |kind, prefix| {
                    Prompt::from_tensors(kind, &cfg.backbone, prefix, &tensors)?
                        .ok_or_else(|| Error::Data(format!("{} lacks the {prefix} prompt", path.display())))
                };
                let dip = load(PromptKind::Dip, "dip")?;
                let dsp = load(PromptKind::Dsp, "dsp")?;
                columns
                    .map(|d| evaluate_fixed(&model, Some(&dip), Some(&dsp), d))
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        results.push(EvalResult {
            method,
            seed,
            domains: stream.domain_names(),
            accuracy,
        });
    }
    print!("{}", to_json(&results));
    Ok(())
}

fn is_seed_report(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.starts_with("seed") && name.ends_with(".json") && !name.ends_with(".bank.json")
}

fn sorted_dir(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    paths.sort();
    Ok(paths)
}

fn seed_reports(dir: &Path) -> CliResult<Vec<Report>> {
    let mut reports = Vec::new();
    for path in sorted_dir(dir)?.into_iter().filter(|p| is_seed_report(p)) {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let report = serde_json::from_str(&text)
            .map_err(|e| CliError::Core(Error::Data(format!("{}: {e}", path.display()))))?;
        reports.push(report);
    }
    Ok(reports)
}

pub fn report(dir: &Path) -> CliResult<()> {
    require(dir, "run `dipt run` first")?;
    let label = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut rows = Vec::new();
    let own = seed_reports(dir)?;
    if !own.is_empty() {
        rows.push((label(dir), Aggregate::from_reports(&own)?));
    }
    for sub in sorted_dir(dir)?.into_iter().filter(|p| p.is_dir()) {
        let reports = seed_reports(&sub)?;
        if !reports.is_empty() {
            rows.push((label(&sub), Aggregate::from_reports(&reports)?));
        }
    }
    if rows.is_empty() {
        return Err(CliError::Empty(format!("no seed reports under {}", dir.display())));
    }
    print!("{}", Aggregate::table(&rows));
    let doc: BTreeMap<_, _> = rows.into_iter().collect();
    write_json(&dir.join("aggregate.json"), &doc)
}

#[derive(Serialize)]
struct KeySource {
    index: usize,
    source: PathBuf,
    dims: (usize, usize, usize),
}

#[derive(Serialize)]
struct AugmentEntry {
    source: PathBuf,
    output: PathBuf,
    lambda: Vec<f32>,
    keys: Vec<usize>,
}

#[derive(Serialize)]
struct AugmentFailure {
    source: PathBuf,
    error: String,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    keys: Vec<KeySource>,
    entries: Vec<AugmentEntry>,
    failures: Vec<AugmentFailure>,
}

/// A directory gives one key (its mean amplitude); a bank file gives all of
/// its stored keys in order.
fn load_keys(path: &Path, first_index: usize) -> CliResult<Vec<Planes>> {
    require(path, "expected a PNG directory or a bank file")?;
    if path.is_dir() {
        let images = find_pngs(path)?.iter().map(|p| read_png(p)).collect::<Result<Vec<_>, _>>()?;
        if images.is_empty() {
            return Err(CliError::Empty(format!("no PNGs under key directory {}", path.display())));
        }
        return Ok(vec![average_amplitude(&images, first_index).map_err(Error::from)?.amplitude]);
    }
    let tensors = container::read_tensors(read(path)?.as_slice()).map_err(Error::from)?;
    let keys: Vec<Planes> = tensors
        .into_iter()
        .filter(|(name, _)| name.starts_with("key"))
        .filter_map(|(_, t)| match *t.shape() {
            [c, h, w] => Planes::new(c, h, w, t.data().to_vec()),
            _ => None,
        })
        .collect();
    if keys.is_empty() {
        return Err(CliError::Empty(format!("no keys in {}", path.display())));
    }
    Ok(keys)
}

pub fn augment(input: &Path, key_paths: &[PathBuf], out: &Path, seed: u64) -> CliResult<()> {
    let mut keys = Vec::new();
    let mut sources = Vec::new();
    for path in key_paths {
        for planes in load_keys(path, keys.len() + 1)? {
            sources.push(KeySource {
                index: keys.len(),
                source: path.clone(),
                dims: planes.dims(),
            });
            keys.push(planes);
        }
    }
    if keys.iter().any(|k| k.dims() != keys[0].dims()) {
        return Err(CliError::Config("all keys must share one shape".into()));
    }
    require(input, "expected an input PNG directory")?;
    let files = find_pngs(input)?;
    if files.is_empty() {
        return Err(CliError::Empty(format!("no PNGs under {}", input.display())));
    }
    let key_refs: Vec<&Planes> = keys.iter().collect();
    let (kh, kw, kc) = keys[0].dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest {
        seed,
        keys: sources,
        entries: Vec::new(),
        failures: Vec::new(),
    };
    for file in &files {
        let rel = file.strip_prefix(input).unwrap_or(file).to_path_buf();
        let outcome = read_png(file).and_then(|img| {
            if img.dims() != (kh, kw, kc) {
                return Err(Error::Shape {
                    context: "augment input".into(),
                    expected: format!("{kh}x{kw}x{kc} to match the keys"),
                    actual: format!("{:?}", img.dims()),
                });
            }
            let (styled, lambda) = style_augment(&img, &key_refs, &mut rng)?;
            let target = out.join(&rel);
            if let Some(dir) = target.parent() {
                fs::create_dir_all(dir).map_err(|source| Error::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            save_png(&styled, &target)?;
            Ok(lambda)
        });
        match outcome {
            Ok(lambda) => manifest.entries.push(AugmentEntry {
                source: rel.clone(),
                output: rel,
                keys: (0..lambda.len()).collect(),
                lambda,
            }),
            Err(e) => {
                eprintln!("dipt: {}: {e}", file.display());
                manifest.failures.push(AugmentFailure {
                    source: rel,
                    error: e.to_string(),
                });
            }
        }
    }
    write_json(&out.join("manifest.json"), &manifest)?;
    match manifest.failures.len() {
        0 => Ok(()),
        failed => Err(CliError::Partial {
            failed,
            total: files.len(),
        }),
    }
}

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    mean: f64,
    l2: f64,
}

#[derive(Serialize)]
struct BankInfo {
    time_step: usize,
    bytes: usize,
    tensors: Vec<TensorInfo>,
    sidecar: Option<serde_json::Value>,
}

pub fn inspect_bank(path: &Path) -> CliResult<()> {
    require(path, "run `dipt run --method ours` first")?;
    let bytes = read(path)?;
    let tensors = container::read_tensors(bytes.as_slice()).map_err(Error::from)?;
    let infos: Vec<TensorInfo> = tensors
        .iter()
        .map(|(name, t)| {
            let data = t.data();
            TensorInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
                mean: data.iter().map(|&v| v as f64).sum::<f64>() / data.len().max(1) as f64,
                l2: data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(),
            }
        })
        .collect();
    let mut sidecar_path = path.as_os_str().to_owned();
    sidecar_path.push(".json");
    let sidecar = fs::read_to_string(PathBuf::from(sidecar_path))
        .ok()
        .and_then(|text| serde_json::from_str(&text).ok());
    let info = BankInfo {
        time_step: infos.iter().filter(|t| t.name.starts_with("key")).count(),
        bytes: bytes.len(),
        tensors: infos,
        sidecar,
    };
    print!("{}", to_json(&info));
    Ok(())
}
