//! Batch commands behind the `fastcaps` binary.
//!
//! Every command writes line-oriented `key=value` output to the given writer
//! and is deterministic in its inputs, configuration and seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::accel::{routing_cycle_report, throughput_estimate, Schedule};
use crate::capsnet::{infer, tiny_spec, CapsNetModel, CapsNetSpec, CapsScalar, Inference, RoutingMode};
use crate::error::{Error, Result};
use crate::fxp::Fx16;
use crate::io::{
    load_idx_images, load_idx_labels, load_masks, load_model, parse_config, save_idx_images, save_masks, save_model,
    Arith, RunConfig, LAYER_NAMES,
};
use crate::pruning::{
    compression_report, propagate_dead_structures, prune, DeadStructure, Granularity, LayerMask, LayerStack,
    NetTopology, PruneLayer, Pruner,
};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(
    name = "fastcaps",
    version,
    about = "Capsule network pruning, inference and latency modeling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Run configuration (`key = value` lines); defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generated weights when no weight file is given.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Routing implementation: reference or optimized [config default: reference].
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Arithmetic: real or fx16 [config default: real].
    #[arg(long, global = true)]
    pub arith: Option<String>,
    /// Agreement batch size for optimized routing [config default: 10].
    #[arg(long, global = true)]
    pub fact: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune conv kernels, propagate dead structure, write weights and masks.
    Prune {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Classify IDX images.
    Infer {
        /// Weight container; random MNIST weights from --seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Also run the other routing mode and print the agreement rate.
        #[arg(long)]
        compare: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Routing cycle report and frames-per-second estimate.
    Latency {
        /// Weight container; only its shapes are used. MNIST when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Structural statistics of LAKP and KP over a sparsity sweep.
    ComparePruners {
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Comma-separated sparsities applied to every layer.
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,0.9")]
        sparsity: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Write seeded random weights (uniform in [-0.1, 0.1]).
    GenWeights {
        #[arg(long)]
        out: PathBuf,
        /// Architecture: mnist or tiny.
        #[arg(long, default_value = "mnist")]
        arch: String,
        #[arg(long)]
        zero_bias: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write seeded random images (and optionally labels) as IDX files.
    GenImages {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels_out: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Configuration file plus command-line overrides.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &common.mode {
        cfg.mode = m.parse().map_err(Error::InvalidArgument)?;
    }
    if let Some(a) = &common.arith {
        cfg.arith = a.parse().map_err(Error::InvalidArgument)?;
    }
    if let Some(f) = common.fact {
        if f == 0 {
            return Err(Error::InvalidArgument("--fact must be at least 1".into()));
        }
        cfg.fact = f;
    }
    Ok(cfg)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Prune {
            weights,
            out_weights,
            out_mask,
            common,
        } => cmd_prune(&weights, &resolve_config(&common)?, &out_weights, &out_mask, out),
        Command::Infer {
            weights,
            mask,
            images,
            labels,
            compare,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let model = model_or_random(weights.as_deref(), &cfg, common.seed)?;
            cmd_infer(&model, mask.as_deref(), &images, labels.as_deref(), &cfg, compare, out)
        }
        Command::Latency { weights, mask, common } => {
            let cfg = resolve_config(&common)?;
            let spec = match weights {
                Some(p) => *load_model(p, routing_config(&cfg))?.spec(),
                None => with_routing(CapsNetSpec::mnist(), &cfg),
            };
            cmd_latency(&spec, mask.as_deref(), &cfg, out)
        }
        Command::ComparePruners {
            weights,
            sparsity,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let model = model_or_random(weights.as_deref(), &cfg, common.seed)?;
            cmd_compare_pruners(&model, &sparsity, &cfg, out)
        }
        Command::GenWeights {
            out: path,
            arch,
            zero_bias,
            common,
        } => {
            let spec = match arch.as_str() {
                "mnist" => CapsNetSpec::mnist(),
                "tiny" => tiny_spec(),
                other => return Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
            };
            let mut model = CapsNetModel::random(spec, common.seed)?;
            if zero_bias {
                model = model.without_bias();
            }
            save_model(&path, &model)?;
            writeln_out(out, format!("wrote={}", path.display()))?;
            writeln_out(out, format!("routing_weight_count={}", model.routing_weight_count()))
        }
        Command::GenImages {
            out: path,
            labels_out,
            count,
            size,
            common,
        } => {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed);
            let pixels: Vec<u8> = (0..count * size * size).map(|_| rng.gen()).collect();
            save_idx_images(&path, count, size, size, &pixels)?;
            if let Some(lp) = labels_out {
                let labels: Vec<u8> = (0..count).map(|_| rng.gen_range(0..10)).collect();
                crate::io::save_idx_labels(&lp, &labels)?;
            }
            writeln_out(out, format!("wrote={}", path.display()))
        }
    }
}

fn writeln_out(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn routing_config(cfg: &RunConfig) -> crate::capsnet::RoutingConfig {
    crate::capsnet::RoutingConfig {
        iters: cfg.routing_iters,
        ..Default::default()
    }
}

fn with_routing(mut spec: CapsNetSpec, cfg: &RunConfig) -> CapsNetSpec {
    spec.routing = routing_config(cfg);
    spec
}

fn model_or_random(weights: Option<&Path>, cfg: &RunConfig, seed: u64) -> Result<CapsNetModel<f64>> {
    match weights {
        Some(p) => load_model(p, routing_config(cfg)),
        None => CapsNetModel::random(with_routing(CapsNetSpec::mnist(), cfg), seed),
    }
}

/// The prunable conv stack of a model with the configured sparsities.
pub fn layer_stack(model: &CapsNetModel<f64>, sparsity: [f64; 2], granularity: [Granularity; 2]) -> Result<LayerStack> {
    let caps_dim = model.spec().primary.caps_dim;
    let weights = [model.conv1().kernels().clone(), model.primary().kernels().clone()];
    let layers = (0..2)
        .map(|i| match granularity[i] {
            Granularity::Kernel => PruneLayer::kernels(LAYER_NAMES[i], weights[i].clone(), sparsity[i]),
            Granularity::CapsuleGroup => {
                let group = if i == 1 { caps_dim } else { 1 };
                PruneLayer::capsule_groups(LAYER_NAMES[i], weights[i].clone(), sparsity[i], group)
            }
        })
        .collect();
    LayerStack::new(layers)
}

fn structure(model: &CapsNetModel<f64>, masks: &[LayerMask]) -> Result<DeadStructure> {
    propagate_dead_structures(masks, &NetTopology::from_spec(model.spec()))
}

/// Prunes, propagates and writes the masked weights plus the mask file.
pub fn cmd_prune(
    weights_in: &Path,
    cfg: &RunConfig,
    weights_out: &Path,
    mask_out: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(weights_in, routing_config(cfg))?;
    let stack = layer_stack(&model, cfg.sparsity, cfg.granularity)?;
    let outcome = prune(&stack, cfg.pruner)?;
    let dead = structure(&model, &outcome.masks)?;
    let pruned = model.apply_structure(&dead)?;
    save_model(weights_out, &pruned)?;
    save_masks(mask_out, &outcome.masks)?;
    let report = compression_report(&outcome.masks, model.spec())?;
    writeln_out(out, format!("pruner={}", cfg.pruner))?;
    for (name, m) in LAYER_NAMES.iter().zip(&outcome.masks) {
        writeln_out(
            out,
            format!(
                "layer={name};granularity={};units={}/{}",
                m.granularity(),
                m.survivors(),
                m.unit_count()
            ),
        )?;
    }
    writeln_out(
        out,
        format!("capsules: {} -> {}", report.capsules_total, report.survived_capsules),
    )?;
    for line in report.to_kv_lines() {
        writeln_out(out, line)?;
    }
    Ok(())
}

/// The model a mask file describes: dead weights zeroed, dead channels and
/// capsules removed.
pub fn masked_model(model: &CapsNetModel<f64>, mask: Option<&Path>) -> Result<CapsNetModel<f64>> {
    let Some(path) = mask else {
        return Ok(model.clone());
    };
    let masks = load_masks(path)?;
    let dead = structure(model, &masks)?;
    model.apply_structure(&dead)?.compact(&dead)
}

fn classify<T: CapsScalar>(model: &CapsNetModel<T>, images: &[Tensor<T>], mode: RoutingMode) -> Result<Vec<Inference>> {
    images.par_iter().map(|img| infer(img, model, mode)).collect()
}

fn classify_arith(
    model: &CapsNetModel<f64>,
    images: &[Tensor<f64>],
    mode: RoutingMode,
    cfg: &RunConfig,
) -> Result<Vec<Inference>> {
    match cfg.arith {
        Arith::Real => classify(model, images, mode),
        Arith::Fx16 => {
            let fmt = cfg.format();
            let q: Vec<Tensor<Fx16>> = images.iter().map(|t| t.quantize(fmt)).collect();
            classify(&model.quantize(fmt), &q, mode)
        }
    }
}

/// Classifies every image of an IDX file.
pub fn cmd_infer(
    model: &CapsNetModel<f64>,
    mask: Option<&Path>,
    images: &Path,
    labels: Option<&Path>,
    cfg: &RunConfig,
    compare: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let model = masked_model(model, mask)?;
    let batch = load_idx_images(images)?;
    let labels = labels.map(load_idx_labels).transpose()?;
    let [n, h, w] = *batch.dims() else {
        unreachable!("IDX images are rank 3")
    };
    if let Some(l) = &labels {
        if l.len() != n {
            return Err(Error::InvalidArgument(format!("{} labels for {n} images", l.len())));
        }
    }
    let imgs: Vec<Tensor<f64>> = batch
        .data()
        .chunks(h * w)
        .map(|c| Tensor::from_vec(vec![1, h, w], c.to_vec()))
        .collect::<Result<_>>()?;
    let mode = cfg.routing_mode();
    let results = classify_arith(&model, &imgs, mode, cfg)?;

    writeln_out(out, format!("mode={};arith={}", mode, cfg.arith))?;
    for (i, r) in results.iter().enumerate() {
        let norms: Vec<String> = r.caps_norms.iter().map(|x| format!("{x:.6}")).collect();
        writeln_out(out, format!("image={i};class={};norms={}", r.class, norms.join(",")))?;
    }
    if let Some(l) = &labels {
        let correct = results
            .iter()
            .zip(l)
            .filter(|(r, &y)| r.class == usize::from(y))
            .count();
        writeln_out(out, format!("accuracy={:.6}", rate(correct, n)))?;
    }
    if compare {
        let other = match mode {
            RoutingMode::Reference => RoutingMode::Optimized { fact: cfg.fact },
            RoutingMode::Optimized { .. } => RoutingMode::Reference,
        };
        let second = classify_arith(&model, &imgs, other, cfg)?;
        let same = results.iter().zip(&second).filter(|(a, b)| a.class == b.class).count();
        writeln_out(out, format!("agreement={:.6}", rate(same, n)))?;
    }
    Ok(())
}

fn rate(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Cycle report of the (optionally pruned) network and FPS estimates.
pub fn cmd_latency(spec: &CapsNetSpec, mask: Option<&Path>, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dead = match mask {
        Some(p) => Some(propagate_dead_structures(
            &load_masks(p)?,
            &NetTopology::from_spec(spec),
        )?),
        None => None,
    };
    let routed = dead.as_ref().map_or(*spec, |d| d.reduced_spec(spec));
    let pe = cfg.pe_array();
    let report = routing_cycle_report(&routed, &cfg.costs, &pe, cfg.fact)?;
    write!(out, "{}", report.to_table()).map_err(|e| Error::io("<stdout>", e))?;
    for line in report.to_kv_lines() {
        writeln_out(out, line)?;
    }
    let fps =
        |dead: Option<&DeadStructure>, s| throughput_estimate(spec, dead, &cfg.costs, &pe, cfg.fact, cfg.clock_hz, s);
    let base = fps(dead.as_ref(), Schedule::Baseline)?;
    let opt = fps(dead.as_ref(), Schedule::Optimized)?;
    let original = fps(None, Schedule::Baseline)?;
    writeln_out(out, format!("capsules={}", routed.in_caps()))?;
    writeln_out(out, format!("clock_hz={}", cfg.clock_hz))?;
    writeln_out(out, format!("fps_baseline={:.2}", base.fps))?;
    writeln_out(out, format!("fps_optimized={:.2}", opt.fps))?;
    writeln_out(out, format!("fps_ratio={:.3}", opt.fps / base.fps))?;
    writeln_out(out, format!("fps_original={:.2}", original.fps))?;
    writeln_out(out, format!("speedup_vs_original={:.2}", opt.fps / original.fps))
}

/// Kernel and capsule survival of LAKP and KP at each sparsity.
pub fn cmd_compare_pruners(
    model: &CapsNetModel<f64>,
    sparsities: &[f64],
    cfg: &RunConfig,
    out: &mut dyn Write,
) -> Result<()> {
    writeln_out(
        out,
        "sparsity,method,conv1_units,primary_units,capsules,survived_weight_pct,overlap",
    )?;
    for &s in sparsities {
        let stack = layer_stack(model, [s, s], cfg.granularity)?;
        let lakp = prune(&stack, Pruner::LookAhead)?;
        let kp = prune(&stack, Pruner::Magnitude)?;
        let overlap = pruned_overlap(&lakp.masks, &kp.masks);
        for (name, outcome) in [("lakp", &lakp), ("kp", &kp)] {
            let units: Vec<String> = outcome
                .masks
                .iter()
                .map(|m| format!("{}/{}", m.survivors(), m.unit_count()))
                .collect();
            let (caps, pct) = match compression_report(&outcome.masks, model.spec()) {
                Ok(r) => (r.survived_capsules.to_string(), format!("{:.4}", r.survived_weight_pct)),
                Err(Error::NetworkSevered { .. }) => ("severed".into(), "0".into()),
                Err(e) => return Err(e),
            };
            writeln_out(
                out,
                format!("{s},{name},{},{},{caps},{pct},{overlap:.4}", units[0], units[1]),
            )?;
        }
    }
    Ok(())
}

/// Jaccard similarity of the pruned unit sets (1 when both are empty).
pub fn pruned_overlap(a: &[LayerMask], b: &[LayerMask]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.units().iter().zip(y.units()) {
            inter += usize::from(!p && !q);
            union += usize::from(!p || !q);
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
