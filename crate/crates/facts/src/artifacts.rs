//! Model, mixture and slice-report files. Each artifact is a JSON header
//! plus FSMX blocks for the dense parts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use facts_core::amplify::{AmplifiedModel, Architecture, DenseLayer, ModelSnapshot, SweepEntry};
use facts_core::linalg::Matrix;
use facts_core::slicing::{Component, CovarianceKind, SliceMixture, SliceReport};
use serde::{Deserialize, Serialize};

use crate::dataio::{create_dir, read_json, write_json, MatrixFile};
use crate::error::{Error, Result};

pub const MODEL_FILE: &str = "model.json";
pub const MIXTURE_FILE: &str = "mixtures.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_CSV_HEADER: [&str; 6] = ["class", "slice_id", "rank", "accuracy", "size", "member_ids_topk"];
/// Separator between ids inside the `member_ids_topk` column.
pub const ID_SEPARATOR: char = ';';

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerHeader {
    inputs: usize,
    outputs: usize,
    weight: String,
    bias: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    architecture: Architecture,
    lambda: f64,
    epoch: usize,
    train_accuracy: f64,
    sigma_amco: Option<f64>,
    seed: u64,
    layers: Vec<LayerHeader>,
    lambda_star: f64,
    sweep_log: Vec<SweepEntry>,
}

/// Writes `model.json` and per-layer weight/bias blocks into `dir`.
pub fn save_model(dir: &Path, model: &AmplifiedModel) -> Result<PathBuf> {
    create_dir(dir)?;
    let s = &model.snapshot;
    let mut layers = Vec::with_capacity(s.layers.len());
    for (i, l) in s.layers.iter().enumerate() {
        let weight = format!("layer{i}_weight.fsmx");
        let bias = format!("layer{i}_bias.fsmx");
        MatrixFile::new(l.outputs, l.inputs, l.weight.clone())?.write(&dir.join(&weight))?;
        MatrixFile::new(1, l.outputs, l.bias.clone())?.write(&dir.join(&bias))?;
        layers.push(LayerHeader {
            inputs: l.inputs,
            outputs: l.outputs,
            weight,
            bias,
        });
    }
    let header = ModelHeader {
        version: 1,
        architecture: s.architecture,
        lambda: s.lambda,
        epoch: s.epoch,
        train_accuracy: s.train_accuracy,
        sigma_amco: s.sigma_amco,
        seed: s.seed,
        layers,
        lambda_star: model.lambda_star,
        sweep_log: model.sweep_log.clone(),
    };
    let path = dir.join(MODEL_FILE);
    write_json(&path, &header)?;
    Ok(path)
}

/// Reads a model directory (or a `model.json` path).
pub fn load_model(path: &Path) -> Result<AmplifiedModel> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MODEL_FILE))
    } else {
        (crate::dataio::base_dir(path), path.to_path_buf())
    };
    let h: ModelHeader = read_json(&file)?;
    let mut layers = Vec::with_capacity(h.layers.len());
    for (i, l) in h.layers.iter().enumerate() {
        let w = MatrixFile::read_expect(&dir.join(&l.weight), &format!("layer{i} weight"), l.outputs, Some(l.inputs))?;
        let b = MatrixFile::read_expect(&dir.join(&l.bias), &format!("layer{i} bias"), 1, Some(l.outputs))?;
        layers.push(DenseLayer {
            inputs: l.inputs,
            outputs: l.outputs,
            weight: w.data().to_vec(),
            bias: b.data().to_vec(),
        });
    }
    for pair in layers.windows(2) {
        if pair[0].outputs != pair[1].inputs {
            return Err(Error::Invalid(format!("{}: layer widths do not chain", file.display())));
        }
    }
    Ok(AmplifiedModel {
        snapshot: ModelSnapshot {
            architecture: h.architecture,
            layers,
            lambda: h.lambda,
            epoch: h.epoch,
            train_accuracy: h.train_accuracy,
            sigma_amco: h.sigma_amco,
            seed: h.seed,
        },
        lambda_star: h.lambda_star,
        sweep_log: h.sweep_log,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureHeader {
    class_label: usize,
    alpha: f64,
    cov_p: CovarianceKind,
    k_hat: usize,
    logit_dim: usize,
    embed_dim: usize,
    weights: Vec<f64>,
    frozen: Vec<bool>,
    converged: bool,
    fit_log: Vec<f64>,
    blocks: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixturesFile {
    version: u32,
    classes: Vec<MixtureHeader>,
}

/// Stacks per-component rows (`k` blocks of `rows_each` rows).
fn stack(parts: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<MatrixFile> {
    let rows: Vec<Vec<f32>> = parts.map(|r| r.into_iter().map(|v| v as f32).collect()).collect();
    MatrixFile::from_rows(&rows, cols)
}

/// Writes every class mixture. Means and covariances are stored in f32;
/// weights and the fit log keep full precision in the JSON header.
pub fn save_mixtures(dir: &Path, mixtures: &[SliceMixture]) -> Result<PathBuf> {
    create_dir(dir)?;
    let mut classes = Vec::with_capacity(mixtures.len());
    for m in mixtures {
        let c = m.class_label;
        let (dp, dc) = (m.logit_dim(), m.embed_dim());
        let mut blocks = BTreeMap::new();
        let mut put = |name: &str, block: MatrixFile| -> Result<()> {
            let file = format!("class{c}_{name}.fsmx");
            block.write(&dir.join(&file))?;
            blocks.insert(name.to_string(), file);
            Ok(())
        };
        put("mu_p", stack(m.components.iter().map(|x| x.mu_p.clone()), dp)?)?;
        put(
            "sigma_p",
            stack(
                m.components.iter().flat_map(|x| x.sigma_p.iter_rows().map(<[f64]>::to_vec).collect::<Vec<_>>()),
                dp,
            )?,
        )?;
        put("mu_c", stack(m.components.iter().map(|x| x.mu_c.clone()), dc)?)?;
        put("sigma_c", stack(m.components.iter().map(|x| x.sigma_c_diag.clone()), dc)?)?;
        classes.push(MixtureHeader {
            class_label: c,
            alpha: m.alpha,
            cov_p: m.cov_p,
            k_hat: m.k_hat(),
            logit_dim: dp,
            embed_dim: dc,
            weights: m.weights.clone(),
            frozen: m.components.iter().map(|x| x.frozen).collect(),
            converged: m.converged,
            fit_log: m.fit_log.clone(),
            blocks,
        });
    }
    let path = dir.join(MIXTURE_FILE);
    write_json(&path, &MixturesFile { version: 1, classes })?;
    Ok(path)
}

pub fn load_mixtures(dir: &Path) -> Result<Vec<SliceMixture>> {
    let file: MixturesFile = read_json(&dir.join(MIXTURE_FILE))?;
    file.classes
        .into_iter()
        .map(|h| {
            let block = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
                let f = h
                    .blocks
                    .get(name)
                    .ok_or_else(|| Error::MissingBlock(format!("class {} {name}", h.class_label)))?;
                Ok(MatrixFile::read_expect(&dir.join(f), name, rows, Some(cols))?.to_matrix())
            };
            let (k, dp, dc) = (h.k_hat, h.logit_dim, h.embed_dim);
            let mu_p = block("mu_p", k, dp)?;
            let sigma_p = block("sigma_p", k * dp, dp)?;
            let mu_c = block("mu_c", k, dc)?;
            let sigma_c = block("sigma_c", k, dc)?;
            if h.weights.len() != k || h.frozen.len() != k {
                return Err(Error::Invalid(format!("class {} mixture header has inconsistent lengths", h.class_label)));
            }
            let components = (0..k)
                .map(|j| Component {
                    mu_p: mu_p.row(j).to_vec(),
                    sigma_p: Matrix::from_vec(dp, dp, sigma_p.as_slice()[j * dp * dp..(j + 1) * dp * dp].to_vec()),
                    mu_c: mu_c.row(j).to_vec(),
                    sigma_c_diag: sigma_c.row(j).to_vec(),
                    frozen: h.frozen[j],
                })
                .collect();
            Ok(SliceMixture {
                class_label: h.class_label,
                alpha: h.alpha,
                cov_p: h.cov_p,
                weights: h.weights,
                components,
                fit_log: h.fit_log,
                converged: h.converged,
            })
        })
        .collect()
}

/// Writes `report.json` (full member orderings) and the flat `report.csv`.
pub fn save_report(dir: &Path, report: &SliceReport) -> Result<(PathBuf, PathBuf)> {
    create_dir(dir)?;
    let json = dir.join(REPORT_JSON);
    write_json(&json, report)?;
    let csv_path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(Error::csv(&csv_path))?;
    w.write_record(REPORT_CSV_HEADER).map_err(Error::csv(&csv_path))?;
    for s in &report.slices {
        let ids = s.top_k.join(&ID_SEPARATOR.to_string());
        w.write_record([
            s.class_label.to_string(),
            s.slice_id.to_string(),
            s.rank.to_string(),
            s.accuracy.to_string(),
            s.size.to_string(),
            ids,
        ])
        .map_err(Error::csv(&csv_path))?;
    }
    w.flush().map_err(Error::io(&csv_path))?;
    Ok((json, csv_path))
}

/// Reads a report from `report.json` or from a directory containing it.
pub fn load_report(path: &Path) -> Result<SliceReport> {
    let file = if path.is_dir() { path.join(REPORT_JSON) } else { path.to_path_buf() };
    if !fs::metadata(&file).map_err(Error::io(&file))?.is_file() {
        return Err(Error::Invalid(format!("{} is not a file", file.display())));
    }
    read_json(&file)
}
