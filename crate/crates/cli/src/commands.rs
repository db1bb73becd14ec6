use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rdstrata::balance::{balance_table, recommend_bandwidths, BalanceReport, BandwidthStatus};
use rdstrata::data::{filter_bandwidth, read_dataset, Dataset};
use rdstrata::diagnostics::{self, DiagnosticsReport};
use rdstrata::estimands::{
    estimate_all, wald_iv_estimate, write_tables_csv, EstimandKind, EstimandTable, Target,
};
use rdstrata::kernel::RngStream;
use rdstrata::strata::{
    read_draws_jsonl, run_chain, write_draws_jsonl, Design, DrawsHeader, StrataDraw,
};
use rdstrata::synth::{generate, SynthConfig, SynthTruth};
use serde::{Deserialize, Serialize};

use crate::output::{
    ensure_dir, h_label, read_json, sha256_hex, stage_seed, write_bytes, write_csv, write_json,
    Provenance,
};
use crate::{CliError, RunConfig};

const STAGE_BALANCE: u64 = 1;
const STAGE_FIT: u64 = 2;
const STAGE_ESTIMATE: u64 = 3;
const STAGE_DIAGNOSE: u64 = 4;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub data_path: PathBuf,
    pub prov: Provenance,
}

impl Context {
    pub fn new(cfg: RunConfig, config_dir: PathBuf, out: PathBuf) -> Result<Self, CliError> {
        ensure_dir(&out)?;
        let data_path = cfg.data_path(&config_dir, &out);
        let prov = Provenance::new(&cfg)?;
        Ok(Self {
            cfg,
            out,
            data_path,
            prov,
        })
    }

    /// The dataset and the SHA-256 of its file.
    fn load_data(&self) -> Result<(Dataset, String), CliError> {
        let bytes = fs::read(&self.data_path).map_err(|e| {
            CliError::MissingInput(format!("data file {}: {e}", self.data_path.display()))
        })?;
        let data = read_dataset(
            bytes.as_slice(),
            &self.cfg.covariate_spec(),
            self.cfg.data.threshold,
            self.cfg.data.scale,
        )?;
        Ok((data, sha256_hex(&bytes)))
    }
}

#[derive(Serialize, Deserialize)]
struct TruthBody {
    synth: SynthConfig,
    truth: SynthTruth,
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let synth = ctx
        .cfg
        .synth_config()
        .ok_or_else(|| CliError::Config("simulate: section missing from config".into()))?;
    let (data, truth) = generate(&synth)?;
    write_csv(&ctx.out.join("data.csv"), &ctx.prov, |buf| {
        data.write_csv(buf)
    })?;
    write_json(
        &ctx.out.join("truth.json"),
        &ctx.prov,
        &TruthBody { synth, truth },
    )?;
    eprintln!(
        "simulate: wrote {} units to {}",
        data.len(),
        ctx.out.join("data.csv").display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BalanceBody {
    dataset_sha256: String,
    floor: f64,
    recommended: Vec<f64>,
    report: BalanceReport,
}

pub fn balance(ctx: &Context) -> Result<(), CliError> {
    let (data, digest) = ctx.load_data()?;
    let b = &ctx.cfg.balance;
    let report = balance_table(
        &data,
        &ctx.cfg.bandwidths,
        &b.priors,
        b.chain(),
        stage_seed(ctx.cfg.seed, STAGE_BALANCE),
    )?;
    for s in report
        .bandwidths
        .iter()
        .filter(|s| s.status == BandwidthStatus::InsufficientOverlap)
    {
        eprintln!(
            "balance: h={} has a single eligibility arm and is flagged",
            s.h
        );
    }
    let recommended = recommend_bandwidths(&report, b.floor);
    write_csv(&ctx.out.join("balance.csv"), &ctx.prov, |buf| {
        report.write_csv(buf)
    })?;
    write_json(
        &ctx.out.join("balance.json"),
        &ctx.prov,
        &BalanceBody {
            dataset_sha256: digest,
            floor: b.floor,
            recommended,
            report,
        },
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainEntry {
    file: String,
    stream: u64,
    draws: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitRun {
    h: f64,
    dir: String,
    n_units: usize,
    n_ineligible: usize,
    n_eligible: usize,
    chains: Vec<ChainEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    dataset_sha256: String,
    runs: Vec<FitRun>,
}

pub fn fit(ctx: &Context) -> Result<(), CliError> {
    let (data, digest) = ctx.load_data()?;
    let s = &ctx.cfg.strata;
    let seed = stage_seed(ctx.cfg.seed, STAGE_FIT);
    let subsets: Vec<Dataset> = ctx
        .cfg
        .bandwidths
        .iter()
        .map(|&h| filter_bandwidth(&data, h))
        .collect::<Result<_, _>>()?;
    let designs: Vec<Design> = subsets.iter().map(|d| Design::new(d, s.variant)).collect();
    let jobs: Vec<(usize, usize)> = (0..subsets.len())
        .flat_map(|k| (0..s.chains).map(move |c| (k, c)))
        .collect();
    let results: Vec<Vec<StrataDraw>> = jobs
        .par_iter()
        .map(|&(k, c)| {
            let mut rng = RngStream::new(seed, stream_id(k, c));
            run_chain(&mut rng, &designs[k], s.priors, s.chain()).map_err(|e| {
                CliError::from(e).with_context(&format!("fit h={}", ctx.cfg.bandwidths[k]))
            })
        })
        .collect::<Result<_, _>>()?;

    let mut runs = Vec::new();
    for (k, &h) in ctx.cfg.bandwidths.iter().enumerate() {
        let dir = h_label(h);
        let (n_ineligible, n_eligible) = subsets[k].arm_sizes();
        let mut chains = Vec::new();
        for c in 0..s.chains {
            let draws = &results[k * s.chains + c];
            let header = DrawsHeader {
                variant: s.variant,
                priors: s.priors,
                chain: s.chain(),
                seed: ctx.cfg.seed,
                stream: stream_id(k, c),
                bandwidth: Some(h),
                dataset_digest: digest.clone(),
                n_units: subsets[k].len(),
                config_digest: Some(ctx.prov.config_sha256.clone()),
            };
            let mut buf = Vec::new();
            write_draws_jsonl(&mut buf, &header, draws)?;
            let file = format!("{dir}/chain{c}.jsonl");
            write_bytes(&ctx.out.join("fit").join(&file), &buf)?;
            chains.push(ChainEntry {
                file,
                stream: header.stream,
                draws: draws.len(),
            });
        }
        runs.push(FitRun {
            h,
            dir,
            n_units: subsets[k].len(),
            n_ineligible,
            n_eligible,
            chains,
        });
    }
    write_json(
        &ctx.out.join("fit/manifest.json"),
        &ctx.prov,
        &Manifest {
            dataset_sha256: digest,
            runs,
        },
    )?;
    Ok(())
}

fn stream_id(k: usize, c: usize) -> u64 {
    1000 * k as u64 + c as u64
}

impl CliError {
    fn with_context(self, what: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{what}: {m}")),
            CliError::MissingInput(m) => CliError::MissingInput(format!("{what}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{what}: {m}")),
        }
    }
}

/// Fitted chains of one bandwidth with the matching data subset.
struct LoadedRun {
    h: f64,
    chains: Vec<Vec<StrataDraw>>,
    design: Design,
    subset: Dataset,
}

fn load_fit(ctx: &Context) -> Result<Vec<LoadedRun>, CliError> {
    let manifest_path = ctx.out.join("fit/manifest.json");
    if !manifest_path.exists() {
        return Err(CliError::MissingInput(format!(
            "no draws at {}; run `fit` first",
            manifest_path.display()
        )));
    }
    let manifest = read_json::<Manifest>(&manifest_path)?;
    if manifest.provenance.config_sha256 != ctx.prov.config_sha256 {
        return Err(CliError::Config(format!(
            "draws were fitted under config {} but the current config is {}",
            manifest.provenance.config_sha256, ctx.prov.config_sha256
        )));
    }
    let (data, digest) = ctx.load_data()?;
    if digest != manifest.body.dataset_sha256 {
        return Err(CliError::MissingInput(
            "data file changed since `fit`".into(),
        ));
    }
    let mut runs = Vec::new();
    for run in &manifest.body.runs {
        let mut chains = Vec::new();
        let mut variant = ctx.cfg.strata.variant;
        for entry in &run.chains {
            let path = ctx.out.join("fit").join(&entry.file);
            let file = fs::File::open(&path)
                .map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
            let (header, draws) = read_draws_jsonl(BufReader::new(file))?;
            if header.n_units != run.n_units {
                return Err(CliError::MissingInput(format!(
                    "{}: unit count mismatch",
                    path.display()
                )));
            }
            variant = header.variant;
            chains.push(draws);
        }
        let subset = filter_bandwidth(&data, run.h)?;
        let design = Design::new(&subset, variant);
        runs.push(LoadedRun {
            h: run.h,
            chains,
            design,
            subset,
        });
    }
    Ok(runs)
}

#[derive(Serialize, Deserialize)]
struct WaldEntry {
    h: f64,
    estimate: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct EstimateBody {
    interval: String,
    tables: Vec<EstimandTable>,
    wald: Vec<WaldEntry>,
}

pub fn estimate(ctx: &Context) -> Result<(), CliError> {
    let runs = load_fit(ctx)?;
    let base = stage_seed(ctx.cfg.seed, STAGE_ESTIMATE);
    let mut tables = Vec::new();
    let mut wald = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        let pooled: Vec<StrataDraw> = run.chains.iter().flatten().cloned().collect();
        let table = estimate_all(
            &pooled,
            &run.design,
            Some(run.h),
            stage_seed(base, k as u64),
        )
        .map_err(|e| CliError::from(e).with_context(&format!("estimate h={}", run.h)))?;
        tables.push(table);
        wald.push(WaldEntry {
            h: run.h,
            estimate: wald_iv_estimate(&run.subset).ok(),
        });
    }
    write_csv(&ctx.out.join("estimates.csv"), &ctx.prov, |buf| {
        write_tables_csv(&tables, buf)
    })?;
    let body = EstimateBody {
        interval:
            "median with equal-tailed 95% interval; quantiles interpolate order statistics linearly"
                .into(),
        tables,
        wald,
    };
    write_json(&ctx.out.join("estimates.json"), &ctx.prov, &body)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DiagnoseRun {
    h: f64,
    report: DiagnosticsReport,
}

#[derive(Serialize, Deserialize)]
struct DiagnoseBody {
    runs: Vec<DiagnoseRun>,
}

pub fn diagnose(ctx: &Context) -> Result<(), CliError> {
    let runs = load_fit(ctx)?;
    let base = stage_seed(ctx.cfg.seed, STAGE_DIAGNOSE);
    let mut out = Vec::new();
    for (k, run) in runs.iter().enumerate() {
        let report = diagnostics::diagnose(&run.chains, &run.design, stage_seed(base, k as u64))
            .map_err(|e| CliError::from(e).with_context(&format!("diagnose h={}", run.h)))?;
        for w in &report.warnings {
            eprintln!("diagnose: h={}: {w}", run.h);
        }
        out.push(DiagnoseRun { h: run.h, report });
    }
    write_csv(&ctx.out.join("ppc.csv"), &ctx.prov, |buf| {
        buf.extend_from_slice(b"h,group,measure,pppv,n_used,n_skipped\n");
        for r in &out {
            for row in &r.report.ppc.rows {
                let p = row.pppv.map(|p| p.to_string()).unwrap_or_default();
                let line = format!(
                    "{},{},{},{},{},{}\n",
                    r.h,
                    row.group,
                    row.measure.name(),
                    p,
                    row.n_used,
                    row.n_skipped
                );
                buf.extend_from_slice(line.as_bytes());
            }
        }
        Ok(())
    })?;
    write_json(
        &ctx.out.join("diagnostics.json"),
        &ctx.prov,
        &DiagnoseBody { runs: out },
    )?;
    Ok(())
}

fn read_optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_json::<T>(path)?.body))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let balance: Option<BalanceBody> = read_optional(&ctx.out.join("balance.json"))?;
    let estimates: Option<EstimateBody> = read_optional(&ctx.out.join("estimates.json"))?;
    let diag: Option<DiagnoseBody> = read_optional(&ctx.out.join("diagnostics.json"))?;
    if balance.is_none() && estimates.is_none() && diag.is_none() {
        return Err(CliError::MissingInput(format!(
            "no balance, estimate or diagnose outputs in {}",
            ctx.out.display()
        )));
    }
    let mut md = String::new();
    let _ = writeln!(md, "# rdstrata report\n");
    let _ = writeln!(
        md,
        "config sha256 `{}`, seed {}\n",
        ctx.prov.config_sha256, ctx.prov.seed
    );

    if let Some(b) = &balance {
        let _ = writeln!(md, "## Covariate balance\n");
        let _ = writeln!(
            md,
            "| h | n | ineligible | eligible | min zero probability |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|");
        for s in &b.report.bandwidths {
            let min = match s.status {
                BandwidthStatus::Ok => fmt_opt(s.min_zero_prob),
                BandwidthStatus::InsufficientOverlap => "insufficient overlap".into(),
            };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                s.h, s.n, s.n_ineligible, s.n_eligible, min
            );
        }
        let rec: Vec<String> = b.recommended.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            md,
            "\nBandwidths with every zero probability at least {}: {}\n",
            b.floor,
            if rec.is_empty() {
                "none".to_string()
            } else {
                rec.join(", ")
            }
        );
    }

    if let Some(e) = &estimates {
        let _ = writeln!(md, "## Estimands\n");
        let _ = writeln!(md, "Posterior medians with equal-tailed 95% intervals.\n");
        for (t, w) in e.tables.iter().zip(&e.wald) {
            let _ = writeln!(md, "### h = {}\n", t.bandwidth.unwrap_or(w.h));
            let _ = writeln!(
                md,
                "| target | population | sample | population at threshold |"
            );
            let _ = writeln!(md, "|---|---|---|---|");
            for target in Target::ALL {
                let cells: Vec<String> = [
                    EstimandKind::PopWithin,
                    EstimandKind::SampleAvg,
                    EstimandKind::PopAtS0,
                ]
                .iter()
                .map(|&k| match t.get(k, target).summary {
                    Some(s) => format!("{:.3} ({:.3}, {:.3})", s.median, s.ci_low, s.ci_high),
                    None => "n/a".into(),
                })
                .collect();
                let _ = writeln!(md, "| {} | {} |", target.name(), cells.join(" | "));
            }
            let _ = writeln!(md, "\nWald ratio: {}\n", fmt_opt(w.estimate));
        }
    }

    if let Some(d) = &diag {
        let _ = writeln!(md, "## Diagnostics\n");
        for r in &d.runs {
            let _ = writeln!(md, "### h = {}\n", r.h);
            let max_rhat = r
                .report
                .rhat
                .iter()
                .map(|e| e.rhat.unwrap_or(f64::INFINITY))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
            let min_p = r
                .report
                .cvm
                .iter()
                .map(|e| e.p_value)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
            let _ = writeln!(
                md,
                "Largest R-hat: {}. Smallest stationarity p-value: {}.\n",
                fmt_opt(max_rhat),
                fmt_opt(min_p)
            );
            let _ = writeln!(md, "| group | signal | noise | SNR |");
            let _ = writeln!(md, "|---|---|---|---|");
            for g in ["CA", "AA", "union"] {
                let cells: Vec<String> = rdstrata::diagnostics::Measure::ALL
                    .iter()
                    .map(|&m| fmt_opt(r.report.ppc.get(g, m).and_then(|row| row.pppv)))
                    .collect();
                let _ = writeln!(md, "| {g} | {} |", cells.join(" | "));
            }
            for w in &r.report.warnings {
                let _ = writeln!(md, "\nWarning: {w}");
            }
            let _ = writeln!(md);
        }
    }
    write_bytes(&ctx.out.join("report.md"), md.as_bytes())
}
