use std::path::{Path, PathBuf};

use log::{info, warn};
use mldfm::ident::{check_identification, IdentificationReport};
use mldfm::montecarlo::run_experiment_with_workers;
use mldfm::mse::{chi_square_quantile, estimate_avar, AvarEstimate, Variant};
use mldfm::panel::{Design, GroupStructure, PanelData};
use mldfm::pc::{pc_extract, Estimator, FactorEstimate};
use mldfm::sls::sls_estimate;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::ConfigFile;
use crate::failure::{CliResult, Failure};
use crate::manifest::{to_json, ManifestBuilder};
use crate::table_io::{format_number, numbered, one_based, read_matrix, write_matrix, write_text};

/// Tolerance of the identification report written by `estimate`.
const IDENT_TOL: f64 = 1e-8;
/// Level of the marginal intervals written by `mse`.
const REGION_ALPHA: f64 = 0.05;

fn prepare_output(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::input(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let cfg = ConfigFile::load(config)?;
    let spec = cfg.design(seed)?;
    prepare_output(out)?;
    let manifest = ManifestBuilder::start("simulate", config, out, spec.seed);
    let design = Design::generate(spec)?;
    let panel = design.simulate(design.spec.seed)?;
    let structure = panel.structure();
    let labels = structure.factor_labels();
    let series = numbered("series", structure.n());

    write_matrix(
        &out.join("panel.csv"),
        "t",
        &one_based(panel.t()),
        &series,
        panel.y(),
    )?;
    write_matrix(
        &out.join("true_factors.csv"),
        "t",
        &one_based(panel.t()),
        &labels,
        &design.factors.f,
    )?;
    write_matrix(
        &out.join("true_loadings.csv"),
        "series",
        &series,
        &labels,
        &design.loadings.lambda,
    )?;
    write_matrix(
        &out.join("sigma_eps.csv"),
        "series",
        &series,
        &series,
        &design.sigma_eps,
    )?;
    manifest.finish(&[
        "panel.csv",
        "true_factors.csv",
        "true_loadings.csv",
        "sigma_eps.csv",
    ])?;
    info!(
        "simulated a {}×{} panel into {}",
        panel.t(),
        panel.n(),
        out.display()
    );
    Ok(())
}

fn load_panel(path: &Path, structure: GroupStructure) -> CliResult<PanelData> {
    let data = read_matrix(path)?;
    if data.values.ncols() != structure.n() {
        return Err(Failure::input(format!(
            "{}: {} series but the configured group_sizes add up to {}",
            path.display(),
            data.values.ncols(),
            structure.n()
        )));
    }
    Ok(PanelData::new(data.values, structure)?)
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    method: Estimator,
    iterations: usize,
    converged: bool,
    rss_trace: &'a [f64],
    warnings: &'a [String],
    identification: IdentificationReport,
}

pub fn estimate(
    panel_path: &Path,
    method: Option<Estimator>,
    config: &Path,
    out: &Path,
) -> CliResult<()> {
    let cfg = ConfigFile::load(config)?;
    let method = cfg.estimator(method)?;
    let panel = load_panel(panel_path, cfg.structure()?)?;
    prepare_output(out)?;
    let manifest = ManifestBuilder::start("estimate", config, out, cfg.seed);

    let (est, labels, identification) = match method {
        Estimator::Pc => {
            let r = panel.structure().r();
            let est = pc_extract(&panel, r)?;
            let report = check_identification(&est.f_hat, &[], &est.lambda_hat, &[], IDENT_TOL);
            let labels = GroupStructure::pooled(panel.n(), r)?.factor_labels();
            (est, labels, report)
        }
        Estimator::Sls => {
            let ml = sls_estimate(&panel, &cfg.sls)?;
            if !ml.converged {
                warn!(
                    "SLS stopped after {} iterations without converging",
                    ml.iterations
                );
            }
            let report = check_identification(
                &ml.g_hat,
                &ml.l_hat,
                &ml.lambda_g_hat,
                &ml.lambda_l_hat,
                IDENT_TOL,
            );
            (
                ml.to_factor_estimate(),
                panel.structure().factor_labels(),
                report,
            )
        }
    };

    let series = numbered("series", panel.n());
    write_matrix(
        &out.join("factors.csv"),
        "t",
        &one_based(panel.t()),
        &labels,
        &est.f_hat,
    )?;
    write_matrix(
        &out.join("loadings.csv"),
        "series",
        &series,
        &labels,
        &est.lambda_hat,
    )?;
    let diagnostics = Diagnostics {
        method,
        iterations: est.iterations,
        converged: est.converged,
        rss_trace: &est.rss_trace,
        warnings: &est.warnings,
        identification,
    };
    write_text(&out.join("diagnostics.json"), &to_json(&diagnostics))?;
    manifest.finish(&["factors.csv", "loadings.csv", "diagnostics.json"])?;
    Ok(())
}

pub struct MseInputs {
    pub panel: PathBuf,
    pub factors: PathBuf,
    pub loadings: PathBuf,
    pub variant: Variant,
    pub method: Option<Estimator>,
}

pub fn mse(inputs: &MseInputs, config: &Path, out: &Path) -> CliResult<()> {
    if inputs.variant == Variant::True {
        return Err(Failure::input(
            "variant TRUE needs the data-generating covariance; choose hr, hrs, fpr or fprs",
        ));
    }
    let cfg = ConfigFile::load(config)?;
    let method = cfg.estimator(inputs.method)?;
    let options = cfg.mse_options()?;
    let panel = load_panel(&inputs.panel, cfg.structure()?)?;
    let factors = read_matrix(&inputs.factors)?;
    let loadings = read_matrix(&inputs.loadings)?;
    if factors.values.nrows() != panel.t() {
        return Err(Failure::input(format!(
            "{}: {} periods but the panel has {}",
            inputs.factors.display(),
            factors.values.nrows(),
            panel.t()
        )));
    }
    if loadings.values.nrows() != panel.n() || loadings.values.ncols() != factors.values.ncols() {
        return Err(Failure::input(format!(
            "{}: loadings are {}×{}, expected {}×{}",
            inputs.loadings.display(),
            loadings.values.nrows(),
            loadings.values.ncols(),
            panel.n(),
            factors.values.ncols()
        )));
    }
    prepare_output(out)?;
    let manifest = ManifestBuilder::start("mse", config, out, options.subsample.seed);

    let est = FactorEstimate {
        f_hat: factors.values,
        lambda_hat: loadings.values,
        estimator: method,
        iterations: 0,
        rss_trace: Vec::new(),
        converged: true,
        warnings: Vec::new(),
    };
    let avars = estimate_avar(&panel, &est, inputs.variant, &options)?;

    write_text(&out.join("avar.csv"), &avar_csv(&avars))?;
    write_text(&out.join("avar.json"), &to_json(&avars))?;
    let z2 = chi_square_quantile(1, 1.0 - REGION_ALPHA)?;
    let r = factors.columns.len();
    let half_widths = DMatrix::from_fn(avars.len(), r, |t, k| {
        (z2 * avars[t].value[(k, k)].max(0.0)).sqrt()
    });
    write_matrix(
        &out.join("regions.csv"),
        "t",
        &one_based(avars.len()),
        &factors.columns,
        &half_widths,
    )?;
    manifest.finish(&["avar.csv", "avar.json", "regions.csv"])?;
    Ok(())
}

/// Long format: one row per (period, i, j) entry, all indices one-based.
fn avar_csv(avars: &[AvarEstimate]) -> String {
    let mut out = String::from("variant,t,i,j,value\n");
    for (s, a) in avars.iter().enumerate() {
        let t = a.t.unwrap_or(s) + 1;
        for i in 0..a.value.nrows() {
            for j in 0..a.value.ncols() {
                out.push_str(&format!(
                    "{},{t},{},{},{}\n",
                    a.variant,
                    i + 1,
                    j + 1,
                    format_number(a.value[(i, j)])
                ));
            }
        }
    }
    out
}

pub fn montecarlo(config: &Path, out: &Path, workers: usize, seed: Option<u64>) -> CliResult<()> {
    let cfg = ConfigFile::load(config)?;
    let m = cfg
        .m
        .ok_or_else(|| Failure::input("missing key `M` (number of replications)"))?;
    let experiment = cfg.experiment(seed, m)?;
    prepare_output(out)?;
    let manifest = ManifestBuilder::start("montecarlo", config, out, experiment.seed);
    info!("running {m} replications on {workers} workers");
    let result = run_experiment_with_workers(&experiment, workers)?;
    if result.failures > 0 {
        warn!("{} of {} replications failed", result.failures, m);
    }
    write_text(&out.join("table.csv"), &result.table().to_csv_string())?;
    write_text(&out.join("histograms.json"), &to_json(&result.histograms))?;
    write_text(&out.join("result.json"), &to_json(&result))?;
    manifest.finish(&["table.csv", "histograms.json", "result.json"])?;
    info!("finished in {:.1} s", result.runtime_seconds);
    Ok(())
}

/// Renders a `table.csv` as aligned plain text.
pub fn report(table: &Path) -> CliResult<String> {
    let shown = table.display();
    let mut reader = csv::ReaderBuilder::new()
        .from_path(table)
        .map_err(|e| Failure::input(format!("cannot read {shown}: {e}")))?;
    let mut rows = vec![reader
        .headers()
        .map_err(|e| Failure::input(format!("{shown}: {e}")))?
        .iter()
        .map(|h| {
            if h == "factor" {
                String::new()
            } else {
                h.to_string()
            }
        })
        .collect::<Vec<_>>()];
    for record in reader.records() {
        let record = record.map_err(|e| Failure::input(format!("{shown}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = vec![format!("({})", &record[0])];
        for field in record.iter().skip(1) {
            if field.is_empty() {
                row.push(String::new());
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Failure::input(format!("{shown}: line {line}: `{field}` is not a number"))
                })?;
                // avoid printing "-0.0000" for tiny negatives
                let v = if v.abs() < 5e-5 { 0.0 } else { v };
                row.push(format!("{v:.4}"));
            }
        }
        rows.push(row);
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut text = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
    }
    Ok(text)
}
