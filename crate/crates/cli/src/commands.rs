use std::io::Read;
use std::path::{Path, PathBuf};

use drm_core::analysis::{
    head_score_stats, variance_explained, weight_correlation, write_correlation_csv,
    write_head_stats_csv, write_variance_csv, write_weights_csv, AttributeWeights,
};
use drm_core::dataio::{read_dataset, read_header, sidecar_path, write_diffs, StoredDataset};
use drm_core::decompose::basis::BASIS_MAGIC;
use drm_core::decompose::{
    accumulate_parallel, build_basis, covariance, eigendecompose, read_basis, write_basis,
    BasisSource, RewardBasis, TopH,
};
use drm_core::eval::{
    ablation_sweep, pairwise_accuracy, per_head_report, split_for_repetition, EvalProtocol,
};
use drm_core::heads::{random_heads, train_single_head, TrainConfig};
use drm_core::synth::{gen_world, WorldSpec};
use drm_core::{adapt_basis, run_adaptation_protocol, DrmError, EmbeddingDiffDataset, Result};
use serde::Serialize;
use serde_json::Value;

use crate::config::ConfigEcho;
use crate::{
    AblateArgs, AdaptArgs, AnalyzeArgs, Cli, Command, ConvertArgs, DataSelection, EvalArgs,
    GenArgs, InspectArgs, PcaArgs, PerHeadArgs, RandomArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(a, echo(cli, a), cli.seed),
        Command::Convert(a) => convert(a, echo(cli, a)),
        Command::Pca(a) => pca(a, echo(cli, a)),
        Command::TrainSingle(a) => train(a, echo(cli, a), cli.seed),
        Command::RandomHeads(a) => random(a, echo(cli, a), cli.seed),
        Command::Adapt(a) => adapt(a, echo(cli, a), cli.seed),
        Command::Eval(a) => eval(a, echo(cli, a), cli.seed),
        Command::PerHead(a) => per_head(a, echo(cli, a)),
        Command::Ablate(a) => ablate(a, echo(cli, a), cli.seed),
        Command::Analyze(a) => analyze(a, echo(cli, a), cli.seed),
        Command::Inspect(a) => inspect(a),
    }
}

fn echo(cli: &Cli, args: &impl Serialize) -> ConfigEcho {
    ConfigEcho::new(cli.command.name(), cli.seed, cli.threads, args)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DrmError + '_ {
    move |source| DrmError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// `payload` serialized as an object with the config echo under `config`.
fn with_config(echo: &ConfigEcho, payload: &impl Serialize) -> Result<Value> {
    let mut v = serde_json::to_value(payload)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("config".into(), serde_json::to_value(echo)?);
            Ok(v)
        }
        _ => Ok(serde_json::json!({ "config": echo, "result": v })),
    }
}

fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

/// Config echo next to a binary artifact, with optional extra fields.
fn write_echo(out: &Path, echo: &ConfigEcho, extra: Option<Value>) -> Result<()> {
    let mut v = serde_json::json!({ "config": echo });
    if let (Some(Value::Object(e)), Value::Object(map)) = (extra, &mut v) {
        map.extend(e);
    }
    write_json(&echo_path(out), &v)
}

fn load_data(path: &Path, selection: &DataSelection) -> Result<EmbeddingDiffDataset> {
    let data = read_dataset(path)?.into_diffs()?;
    let Some(split) = selection.split else {
        return Ok(data);
    };
    let meta = data.meta().ok_or_else(|| {
        DrmError::Validation(format!(
            "{} has no metadata sidecar to select a split from",
            path.display()
        ))
    })?;
    let keep: Vec<usize> = (0..meta.len())
        .filter(|&i| meta[i].split == split)
        .collect();
    if keep.is_empty() {
        return Err(DrmError::EmptyDataset(format!(
            "no {split:?} records in {}",
            path.display()
        )));
    }
    Ok(data.subset(&keep))
}

fn load_pair(
    basis: &Path,
    data: &Path,
    selection: &DataSelection,
) -> Result<(RewardBasis, EmbeddingDiffDataset)> {
    let basis = read_basis(basis)?;
    let data = load_data(data, selection)?;
    if basis.d() != data.d() {
        return Err(DrmError::Validation(format!(
            "basis dimension {} does not match data dimension {}",
            basis.d(),
            data.d()
        )));
    }
    Ok((basis, data))
}

fn protocol(
    seed: u64,
    n_adapt: usize,
    seeds: usize,
    tie: f64,
    adapt: &crate::AdaptFlags,
) -> Result<EvalProtocol> {
    let p = EvalProtocol {
        n_adapt,
        n_seeds: seeds,
        tie_value: tie,
        seed,
        adapt: adapt.config(),
    };
    p.validate()?;
    Ok(p)
}

fn gen(a: &GenArgs, echo: ConfigEcho, seed: u64) -> Result<()> {
    let spec = WorldSpec {
        seed,
        d: a.d,
        k: a.k,
        n_per_attr: a.n,
        attr_scales: a
            .scales
            .clone()
            .unwrap_or_else(|| (0..a.k).map(|i| (a.k - i) as f64).collect()),
        noise_sigma: a.noise,
        beta: a.beta,
    };
    let (data, truth) = gen_world(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let diffs = a.out.join("diffs.drme");
    write_diffs(&data, &diffs)?;
    write_echo(&diffs, &echo, None)?;
    write_json(
        &a.out.join("ground_truth.json"),
        &with_config(&echo, &truth)?,
    )?;
    log::info!(
        "wrote {} records of d = {} to {}",
        data.len(),
        data.d(),
        diffs.display()
    );
    Ok(())
}

fn convert(a: &ConvertArgs, echo: ConfigEcho) -> Result<()> {
    let pairs = match read_dataset(&a.input)? {
        StoredDataset::Pairs(p) => p,
        StoredDataset::Diffs(_) => {
            return Err(DrmError::Validation(format!(
                "{} already holds diff vectors",
                a.input.display()
            )))
        }
    };
    let diffs = pairs.to_diffs()?;
    write_diffs(&diffs, &a.out)?;
    write_echo(&a.out, &echo, None)
}

fn pca(a: &PcaArgs, echo: ConfigEcho) -> Result<()> {
    if a.heads == 0 || a.chunk == 0 {
        return Err(DrmError::Validation(
            "heads and chunk must be positive".into(),
        ));
    }
    let data = load_data(&a.input, &a.selection)?;
    if a.heads > data.d() {
        return Err(DrmError::Validation(format!(
            "asked for {} distinct heads in dimension {}",
            a.heads,
            data.d()
        )));
    }
    let acc = accumulate_parallel(&data, a.chunk)?;
    let pairs = eigendecompose(&covariance(&acc, !a.no_center)?, TopH::All)?;
    let calibration = (!a.no_calibrate).then_some(&data);
    let mut basis = build_basis(&pairs, a.heads, calibration)?;
    let fractions = variance_explained(&pairs.values)?;
    basis.set_spectrum(pairs.values.clone());
    log::info!(
        "{} heads from {} records; top {} components explain {:.4} of the variance",
        basis.len(),
        data.len(),
        a.heads,
        fractions[a.heads - 1]
    );
    write_basis(&basis, &a.out)?;
    write_echo(
        &a.out,
        &echo,
        Some(
            serde_json::json!({ "n_records": data.len(), "variance_explained": fractions[a.heads - 1] }),
        ),
    )
}

fn train(a: &TrainArgs, echo: ConfigEcho, seed: u64) -> Result<()> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        l2: a.l2,
        seed,
        init: a.init,
    };
    cfg.validate()?;
    let data = load_data(&a.input, &a.selection)?;
    let outcome = train_single_head(&data, &cfg)?;
    let head = outcome.unit_head()?;
    let accuracy = pairwise_accuracy(&head, &data, None, 0.5)?;
    log::info!(
        "final nll {:.6}, training accuracy {accuracy:.4}",
        outcome.loss_curve.last().unwrap_or(&f64::NAN)
    );
    write_basis(
        &RewardBasis::from_head(&head, BasisSource::Trained)?,
        &a.out,
    )?;
    write_echo(
        &a.out,
        &echo,
        Some(serde_json::json!({ "loss_curve": outcome.loss_curve, "train_accuracy": accuracy })),
    )
}

fn random(a: &RandomArgs, echo: ConfigEcho, seed: u64) -> Result<()> {
    let basis = random_heads(seed, a.count, a.d, a.dist)?;
    write_basis(&basis, &a.out)?;
    write_echo(&a.out, &echo, None)
}

#[derive(Serialize)]
struct AdaptOutput {
    attribute: Option<String>,
    result: Value,
    /// Accuracy of the combined head on the records left out of adaptation.
    holdout_accuracy: Option<f64>,
    n_holdout: usize,
}

fn adapt(a: &AdaptArgs, echo: ConfigEcho, seed: u64) -> Result<()> {
    let (basis, data) = load_pair(&a.basis, &a.data, &a.selection)?;
    let pool: Vec<usize> = match &a.attribute {
        Some(attr) => data
            .attribute_groups()?
            .remove(attr)
            .ok_or_else(|| DrmError::Validation(format!("no records with attribute `{attr}`")))?,
        None => (0..data.len()).collect(),
    };
    let label = a.attribute.clone().unwrap_or_default();
    let (adapt_idx, rest) = match a.n_adapt {
        Some(n) if n == 0 || n > pool.len() => {
            return Err(DrmError::InsufficientData {
                attribute: label,
                available: pool.len(),
                required: n,
            })
        }
        Some(n) => {
            let p = protocol(seed, n, 1, 0.5, &a.adapt)?;
            split_for_repetition(&pool, n, p.sub_seed(&label, 0))
        }
        None => (pool, Vec::new()),
    };
    let result = adapt_basis(&basis, &data.subset(&adapt_idx), &a.adapt.config())?;
    let holdout_accuracy = if rest.is_empty() {
        None
    } else {
        Some(pairwise_accuracy(
            &result.combined,
            &data.subset(&rest),
            Some(&result.normalizer),
            0.5,
        )?)
    };
    let out = AdaptOutput {
        attribute: a.attribute.clone(),
        result: result.to_json_value()?,
        holdout_accuracy,
        n_holdout: rest.len(),
    };
    write_json(&a.out, &with_config(&echo, &out)?)
}

fn eval(a: &EvalArgs, echo: ConfigEcho, seed: u64) -> Result<()> {
    let p = protocol(seed, a.n_adapt, a.seeds, a.tie, &a.adapt)?;
    let (basis, data) = load_pair(&a.basis, &a.data, &a.selection)?;
    let report = run_adaptation_protocol(&basis, &data, &p)?;
    for (attr, r) in &report.per_attribute {
        log::info!("{attr}: {:.4} ± {:.4}", r.mean, r.std);
    }
    let value = with_config(&echo, &report)?;
    write_json(&a.out, &value)?;
    if let Some(csv) = &a.csv {
        report.write_csv(csv)?;
    }
    Ok(())
}

fn per_head(a: &PerHeadArgs, echo: ConfigEcho) -> Result<()> {
    let (basis, data) = load_pair(&a.basis, &a.data, &a.selection)?;
    let report = per_head_report(&basis, &data, a.top, a.tie)?;
    let value = with_config(&echo, &report)?;
    write_json(&a.out, &value)?;
    if let Some(csv) = &a.csv {
        report.write_csv(csv)?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs, echo: ConfigEcho, seed: u64) -> Result<()> {
    let first_n = a.n_values.first().copied().unwrap_or(1);
    let p = protocol(seed, first_n, a.seeds, a.tie, &a.adapt)?;
    let (basis, data) = load_pair(&a.basis, &a.data, &a.selection)?;
    let grid = ablation_sweep(&basis, &data, &a.n_values, &a.h_values, &p)?;
    let value = with_config(&echo, &grid)?;
    write_json(&a.out, &value)?;
    if let Some(csv) = &a.csv {
        grid.write_csv(csv)?;
    }
    Ok(())
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Serialize)]
struct AnalysisSummary {
    n_heads: usize,
    variance_explained: Option<Vec<f64>>,
    attributes: Vec<String>,
    correlation: Vec<Vec<f64>>,
    outlier_heads: Vec<usize>,
    overall_accuracy: f64,
}

fn analyze(a: &AnalyzeArgs, echo: ConfigEcho, seed: u64) -> Result<()> {
    let p = protocol(seed, a.n_adapt, a.seeds, 0.5, &a.adapt)?;
    let (basis, data) = load_pair(&a.basis, &a.data, &a.selection)?;
    let report = run_adaptation_protocol(&basis, &data, &p)?;
    let weights: Vec<AttributeWeights> = report
        .per_attribute
        .iter()
        .map(|(attr, r)| AttributeWeights {
            attribute: attr.clone(),
            k: r.mean_weights.clone(),
        })
        .collect();
    let corr = weight_correlation(&weights)?;
    let stats = head_score_stats(&basis, &data)?;
    let spectrum: Option<Vec<f64>> = basis.spectrum().map(<[f64]>::to_vec).or_else(|| {
        let distinct: Option<Vec<f64>> = (0..basis.len())
            .step_by(2)
            .map(|h| basis.eigenvalue_of(h))
            .collect();
        distinct.filter(|v| !v.is_empty())
    });

    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let variance = match &spectrum {
        Some(s) => {
            write_variance_csv(a.out.join("variance.csv"), s)?;
            Some(variance_explained(s)?)
        }
        None => {
            log::warn!("basis carries no eigenvalues; skipping variance.csv");
            None
        }
    };
    for w in &weights {
        write_weights_csv(
            a.out
                .join(format!("weights_{}.csv", file_safe(&w.attribute))),
            &basis,
            w,
        )?;
    }
    write_correlation_csv(a.out.join("correlation.csv"), &corr)?;
    write_head_stats_csv(a.out.join("head_stats.csv"), &stats)?;
    let summary = AnalysisSummary {
        n_heads: basis.len(),
        variance_explained: variance,
        attributes: corr.attributes.clone(),
        correlation: corr.r.clone(),
        outlier_heads: stats.iter().filter(|s| s.outlier).map(|s| s.head).collect(),
        overall_accuracy: report.overall,
    };
    write_json(&a.out.join("analysis.json"), &with_config(&echo, &summary)?)
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let mut magic = [0u8; 4];
    let mut f = std::fs::File::open(&a.input).map_err(io_err(&a.input))?;
    let n = f.read(&mut magic).map_err(io_err(&a.input))?;
    let value = if n == 4 && magic == BASIS_MAGIC {
        let b = read_basis(&a.input)?;
        serde_json::json!({
            "kind": "basis",
            "d": b.d(),
            "n_heads": b.len(),
            "source": b.source(),
            "norm_policy": b.norm_policy(),
            "has_spectrum": b.spectrum().is_some(),
            "eigenvalues": (0..b.len()).map(|h| b.eigenvalue_of(h)).collect::<Vec<_>>(),
        })
    } else {
        let header = read_header(&a.input)?;
        let sidecar = sidecar_path(&a.input);
        serde_json::json!({
            "kind": "embeddings",
            "header": header,
            "sidecar": sidecar.exists().then(|| sidecar.display().to_string()),
        })
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}
