use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use projkit::projection::{self, cluster_draws};
use projkit::reference::io::{export_reference, format_f64, ingest_draws, read_draws_ndjson};
use projkit::reference::{LinearConfig, ReferenceBuilder, ReferenceModel, SpcConfig, TauPrior};
use projkit::search::build_path;
use projkit::simdata::{generate_toy, Task, ToyConfig};
use projkit::theory::{self, VerifyConfig};
use projkit::validation::{
    cv_varsel as run_cv, eval_test, relative_utility, select_size, CvOptions, RefSource, Scheme,
};
use projkit::{Error, Family, SearchConfig, SearchMethod, SizeRule};

use crate::files::{self, digest, Manifest};
use crate::{usage, CheckFailed, RefInputs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn manifest<C: Serialize>(command: &'static str, seed: u64, config: C, inputs: Vec<files::InputDigest>) -> Manifest<C> {
    Manifest { command, tool_version: VERSION, seed, config, inputs }
}

fn parse<T: std::str::FromStr<Err = Error>>(flag: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| usage(format!("--{flag}: {e}")))
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub p: usize,
    #[arg(long = "p-rel")]
    pub p_rel: usize,
    #[arg(long)]
    pub rho: f64,
    /// regression or classification.
    #[arg(long, default_value = "regression")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn simulate(a: &SimulateArgs, seed: u64) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    if a.p == 0 {
        return Err(usage("--p must be positive"));
    }
    if a.p_rel > a.p {
        return Err(usage(format!("--p-rel ({}) must not exceed --p ({})", a.p_rel, a.p)));
    }
    if !(0.0..1.0).contains(&a.rho) {
        return Err(usage(format!("--rho must lie in [0, 1), got {}", a.rho)));
    }
    let task: Task = parse("task", &a.task)?;
    let cfg = ToyConfig { n: a.n, p: a.p, p_rel: a.p_rel, rho: a.rho, seed, task };
    let data = generate_toy(&cfg)?;
    let out = files::create_dir(&a.out)?;
    let names: Vec<String> = (1..=a.p).map(|j| format!("x{j}")).collect();
    files::write_matrix(&out.join("X.csv"), &names, &data.x)?;
    files::write_matrix(&out.join("y.csv"), &["y".to_string()], &DMatrix::from_column_slice(a.n, 1, &data.y))?;
    files::write_matrix(&out.join("f.csv"), &["f".to_string()], &DMatrix::from_column_slice(a.n, 1, &data.f))?;
    files::write_manifest(&out, &manifest("simulate", seed, &cfg, Vec::new()))
}

#[derive(Debug, Args)]
pub struct FitRefArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// gaussian or bernoulli.
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    /// spc (supervised principal components) or linear (all raw features).
    #[arg(long, default_value = "spc")]
    pub kind: String,
    #[arg(long = "n-draws", default_value_t = 4000)]
    pub n_draws: usize,
    #[arg(long = "n-components", default_value_t = 3)]
    pub n_components: usize,
    /// Screening thresholds tried by cross-validation.
    #[arg(long = "n-gamma", default_value_t = 7)]
    pub n_gamma: usize,
    #[arg(long = "cv-folds", default_value_t = 5)]
    pub cv_folds: usize,
    /// Fixed prior scale; by default the scale is marginalized over a grid.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Recipe stored as `reference.json`, enough to refit the reference exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RefRecipe {
    Spc { family: String, config: SpcConfig, x_sha256: String, y_sha256: String },
    Linear { family: String, config: LinearConfig, x_sha256: String, y_sha256: String },
}

impl RefRecipe {
    fn family(&self) -> Result<Family> {
        let name = match self {
            RefRecipe::Spc { family, .. } | RefRecipe::Linear { family, .. } => family,
        };
        Ok(name.parse()?)
    }

    fn digests(&self) -> (&str, &str) {
        match self {
            RefRecipe::Spc { x_sha256, y_sha256, .. } | RefRecipe::Linear { x_sha256, y_sha256, .. } => {
                (x_sha256, y_sha256)
            }
        }
    }

    fn builder(&self) -> &dyn ReferenceBuilder {
        match self {
            RefRecipe::Spc { config, .. } => config,
            RefRecipe::Linear { config, .. } => config,
        }
    }
}

pub fn fit_ref(a: &FitRefArgs, seed: u64) -> Result<()> {
    let family: Family = parse("family", &a.family)?;
    if a.n_draws == 0 {
        return Err(usage("--n-draws must be positive"));
    }
    let tau = match a.tau {
        Some(t) if !(t > 0.0 && t.is_finite()) => return Err(usage(format!("--tau must be positive, got {t}"))),
        Some(t) => TauPrior::Fixed(t),
        None => TauPrior::default(),
    };
    let (_, x) = files::read_features(&a.x)?;
    let y = files::read_response(&a.y)?;
    files::check_rows(&x, &y)?;
    let inputs = vec![digest("x", &a.x)?, digest("y", &a.y)?];
    let (xs, ys) = (inputs[0].sha256.clone(), inputs[1].sha256.clone());
    let name = family.name().to_string();
    let recipe = match a.kind.as_str() {
        "spc" => {
            if a.n_components == 0 || a.n_gamma == 0 || a.cv_folds < 2 {
                return Err(usage("--n-components and --n-gamma must be positive and --cv-folds at least 2"));
            }
            let config = SpcConfig {
                n_components: a.n_components,
                n_gamma: a.n_gamma,
                cv_folds: a.cv_folds,
                n_draws: a.n_draws,
                seed,
                tau,
            };
            RefRecipe::Spc { family: name, config, x_sha256: xs, y_sha256: ys }
        }
        "linear" => {
            let config = LinearConfig { tau, n_draws: a.n_draws, seed };
            RefRecipe::Linear { family: name, config, x_sha256: xs, y_sha256: ys }
        }
        other => return Err(usage(format!("--kind must be spc or linear, got '{other}'"))),
    };
    let model = recipe.builder().build(&x, &y, family)?;
    let out = files::create_dir(&a.out)?;
    export_reference(&model, &out)?;
    files::write_json(&out.join("reference.json"), &recipe)?;
    files::write_manifest(&out, &manifest("fit-ref", seed, &recipe, inputs))
}

/// Reference loaded for a downstream command.
struct Loaded {
    names: Vec<String>,
    x: DMatrix<f64>,
    y: Vec<f64>,
    family: Family,
    model: ReferenceModel,
    recipe: Option<RefRecipe>,
    inputs: Vec<files::InputDigest>,
}

fn load(r: &RefInputs) -> Result<Loaded> {
    let (names, x) = files::read_features(&r.x)?;
    let y = files::read_response(&r.y)?;
    files::check_rows(&x, &y)?;
    let design = r.reference.join("design.csv");
    let draws = r.reference.join("draws.ndjson");
    let mut inputs = vec![digest("x", &r.x)?, digest("y", &r.y)?, digest("design", &design)?, digest("draws", &draws)?];
    let recipe_path = r.reference.join("reference.json");
    if recipe_path.exists() {
        let text = std::fs::read_to_string(&recipe_path).map_err(Error::from)?;
        let recipe: RefRecipe = serde_json::from_str(&text)
            .map_err(Error::from)
            .with_context(|| format!("parsing {}", recipe_path.display()))?;
        inputs.push(digest("reference", &recipe_path)?);
        let family = recipe.family()?;
        if let Some(f) = &r.family {
            if parse::<Family>("family", f)? != family {
                return Err(usage(format!("--family {f} differs from the reference family {}", family.name())));
            }
        }
        let (xs, ys) = recipe.digests();
        if xs != inputs[0].sha256 || ys != inputs[1].sha256 {
            return Err(Error::Parse("--x/--y differ from the data the reference was fitted to".into()).into());
        }
        let model = recipe.builder().build(&x, &y, family)?;
        let (betas, _) = read_draws_ndjson(&draws, family)?;
        if &betas != model.draws.betas() {
            return Err(Error::Parse(format!("{} does not match the refitted reference", draws.display())).into());
        }
        Ok(Loaded { names, x, y, family, model, recipe: Some(recipe), inputs })
    } else {
        let f = r.family.as_deref().ok_or_else(|| usage("--family is required for externally produced draws"))?;
        let family: Family = parse("family", f)?;
        let model = ingest_draws(&design, &draws, family)?;
        Ok(Loaded { names, x, y, family, model, recipe: None, inputs })
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// l1 or forward.
    #[arg(long, default_value = "l1")]
    pub method: String,
    #[arg(long = "max-size", default_value_t = 20)]
    pub max_size: usize,
    /// Elastic-net mixing for the l1 ordering.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub nlambda: usize,
    /// Keep the penalized coefficients instead of reprojecting each prefix.
    #[arg(long = "no-relax")]
    pub no_relax: bool,
    /// Ridge added to the submodel projections.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    #[arg(long = "clusters-select", default_value_t = 1)]
    pub clusters_select: usize,
    #[arg(long = "clusters-predict", default_value_t = 20)]
    pub clusters_predict: usize,
}

impl SearchArgs {
    fn config(&self) -> Result<SearchConfig> {
        if self.clusters_select == 0 || self.clusters_predict == 0 {
            return Err(usage("--clusters-select and --clusters-predict must be positive"));
        }
        let method: SearchMethod = parse("method", &self.method)?;
        Ok(SearchConfig {
            method,
            alpha: self.alpha,
            nlambda: self.nlambda,
            max_size: self.max_size,
            relax: !self.no_relax,
            relax_ridge: self.ridge,
            ..SearchConfig::default()
        })
    }
}

#[derive(Debug, Serialize)]
struct SelectionConfig<'a> {
    search: &'a SearchConfig,
    clusters_select: usize,
    clusters_predict: usize,
    reference: Option<&'a RefRecipe>,
}

#[derive(Debug, Args)]
pub struct VarselArgs {
    #[command(flatten)]
    pub inputs: RefInputs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Optional test features for evaluating every size.
    #[arg(long = "x-test", requires = "y_test")]
    pub x_test: Option<PathBuf>,
    #[arg(long = "y-test", requires = "x_test")]
    pub y_test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn varsel(a: &VarselArgs, seed: u64) -> Result<()> {
    let search = a.search.config()?;
    let mut l = load(&a.inputs)?;
    let s = l.model.draws.n_draws();
    let ref_select = cluster_draws(&l.model.draws, l.family, a.search.clusters_select.min(s), seed)?;
    let ref_predict = cluster_draws(&l.model.draws, l.family, a.search.clusters_predict.min(s), seed)?;
    let path = build_path(&l.x, &ref_select, &ref_predict, &search)?;
    let out = files::create_dir(&a.out)?;
    files::write_path(&out.join("path.csv"), &l.names, &path)?;
    files::write_coefficients(&out.join("coefficients.csv"), &l.names, &path.submodels)?;
    if let (Some(xt), Some(yt)) = (&a.x_test, &a.y_test) {
        let (test_names, x_test) = files::read_features(xt)?;
        if test_names != l.names {
            return Err(Error::Parse("test features differ in columns from training features".into()).into());
        }
        let y_test = files::read_response(yt)?;
        files::check_rows(&x_test, &y_test)?;
        l.inputs.push(digest("x_test", xt)?);
        l.inputs.push(digest("y_test", yt)?);
        let ev = eval_test(&path, &l.model, &x_test, &y_test)?;
        let mut rows: Vec<Vec<String>> = (0..ev.mlpd.len())
            .map(|k| {
                vec![
                    k.to_string(),
                    format_f64(ev.delta_mlpd[k]),
                    format_f64(ev.delta_se[k]),
                    format_f64(ev.mlpd[k]),
                    format_f64(ev.mlpd_se[k]),
                ]
            })
            .collect();
        rows.push(vec![
            "reference".into(),
            "0".into(),
            "0".into(),
            format_f64(ev.ref_mlpd),
            format_f64(ev.ref_mlpd_se),
        ]);
        files::write_table(&out.join("test.csv"), &["k", "delta_mlpd", "se", "mlpd", "se_abs"], &rows)?;
    }
    let config = SelectionConfig {
        search: &search,
        clusters_select: a.search.clusters_select,
        clusters_predict: a.search.clusters_predict,
        reference: l.recipe.as_ref(),
    };
    files::write_manifest(&out, &manifest("varsel", seed, config, l.inputs))
}

#[derive(Debug, Args)]
pub struct CvVarselArgs {
    #[command(flatten)]
    pub inputs: RefInputs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// loo, kfold:K or subsample:M (M leave-one-out points).
    #[arg(long, default_value = "loo")]
    pub scheme: String,
    /// ref-1se or best-1se.
    #[arg(long, default_value = "ref-1se")]
    pub rule: String,
    /// Search once on the full data instead of inside every fold.
    #[arg(long = "search-once")]
    pub search_once: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_scheme(s: &str, seed: u64) -> Result<Scheme> {
    let bad = || usage(format!("--scheme must be loo, kfold:K or subsample:M, got '{s}'"));
    let count = |v: &str| v.parse::<usize>().map_err(|_| bad());
    match s.split_once(':') {
        None if s == "loo" => Ok(Scheme::Loo),
        Some(("kfold", k)) => Ok(Scheme::KFold(count(k)?)),
        Some(("subsample", m)) => Ok(Scheme::LooSubsample { m: count(m)?, seed }),
        _ => Err(bad()),
    }
}

#[derive(Debug, Serialize)]
struct Selection {
    rule: SizeRule,
    size: usize,
    features: Vec<String>,
    ref_1se: usize,
    best_1se: usize,
}

pub fn cv_varsel(a: &CvVarselArgs, seed: u64) -> Result<()> {
    let search = a.search.config()?;
    let scheme = parse_scheme(&a.scheme, seed)?;
    let rule: SizeRule = parse("rule", &a.rule)?;
    let l = load(&a.inputs)?;
    let opts = CvOptions {
        scheme,
        search: search.clone(),
        clusters_select: a.search.clusters_select,
        clusters_predict: a.search.clusters_predict,
        seed,
        search_per_fold: !a.search_once,
    };
    let source = match (&scheme, &l.recipe) {
        (Scheme::KFold(_), Some(recipe)) => RefSource::Builder(recipe.builder()),
        (Scheme::KFold(_), None) => return Err(usage("--scheme kfold needs a reference directory written by fit-ref")),
        _ => RefSource::Model(&l.model),
    };
    let res = run_cv(&l.x, &l.y, l.family, source, &opts)?;
    let full = relative_utility(&res.pointwise.with_reference_row())?;
    let last = full.n_sizes() - 1;
    let n_bad = res.khat.as_ref().map(|k| k.iter().filter(|v| **v > 0.7).count());
    let bad_col = n_bad.map_or(String::new(), |c| c.to_string());
    let mut rows: Vec<Vec<String>> = (0..res.summary.n_sizes())
        .map(|k| {
            vec![
                k.to_string(),
                format_f64(res.summary.delta_mean[k]),
                format_f64(res.summary.delta_se[k]),
                format_f64(res.summary.abs_mean[k]),
                format_f64(res.summary.abs_se[k]),
                bad_col.clone(),
            ]
        })
        .collect();
    rows.push(vec![
        "full".into(),
        format_f64(full.delta_mean[last]),
        format_f64(full.delta_se[last]),
        format_f64(full.abs_mean[last]),
        format_f64(full.abs_se[last]),
        bad_col,
    ]);
    let out = files::create_dir(&a.out)?;
    files::write_table(&out.join("table.csv"), &["k", "delta_mlpd", "se", "mlpd", "se_abs", "n_khat_gt_07"], &rows)?;
    files::write_path(&out.join("path.csv"), &l.names, &res.path)?;
    files::write_coefficients(&out.join("coefficients.csv"), &l.names, &res.path.submodels)?;
    let size = select_size(&res.summary, rule);
    let selection = Selection {
        rule,
        size,
        features: res.path.order[..size].iter().map(|&j| l.names[j].clone()).collect(),
        ref_1se: select_size(&res.summary, SizeRule::Ref1se),
        best_1se: select_size(&res.summary, SizeRule::Best1se),
    };
    files::write_json(&out.join("selection.json"), &selection)?;
    if res.failed_folds > 0 {
        log::warn!("{} fold(s) failed and were left out", res.failed_folds);
    }

    #[derive(Serialize)]
    struct CvConfig<'a> {
        #[serde(flatten)]
        selection: SelectionConfig<'a>,
        scheme: &'a str,
        rule: SizeRule,
        search_per_fold: bool,
    }
    let config = CvConfig {
        selection: SelectionConfig {
            search: &search,
            clusters_select: a.search.clusters_select,
            clusters_predict: a.search.clusters_predict,
            reference: l.recipe.as_ref(),
        },
        scheme: &a.scheme,
        rule,
        search_per_fold: !a.search_once,
    };
    files::write_manifest(&out, &manifest("cv-varsel", seed, config, l.inputs))
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub inputs: RefInputs,
    /// Comma-separated feature names.
    #[arg(long, conflicts_with = "size")]
    pub features: Option<String>,
    /// Use the first `size` features of the ordering in `--path`.
    #[arg(long, requires = "path")]
    pub size: Option<usize>,
    /// `path.csv` written by varsel or cv-varsel.
    #[arg(long)]
    pub path: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn feature_indices(names: &[String], wanted: &[String]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| names.iter().position(|n| n == w).ok_or_else(|| usage(format!("unknown feature '{w}'"))))
        .collect()
}

pub fn project(a: &ProjectArgs, seed: u64) -> Result<()> {
    if a.clusters == 0 {
        return Err(usage("--clusters must be positive"));
    }
    if !(a.ridge >= 0.0) {
        return Err(usage("--ridge must be nonnegative"));
    }
    let mut l = load(&a.inputs)?;
    let wanted: Vec<String> = match (&a.features, a.size, &a.path) {
        (Some(list), None, _) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        (None, Some(k), Some(path)) => {
            let order = files::read_path_order(path)?;
            l.inputs.push(digest("path", path)?);
            if k > order.len() {
                return Err(usage(format!("--size {k} exceeds the {} features in {}", order.len(), path.display())));
            }
            order[..k].to_vec()
        }
        _ => return Err(usage("give either --features or --size with --path")),
    };
    let idx = feature_indices(&l.names, &wanted)?;
    let s = l.model.draws.n_draws();
    let reference = cluster_draws(&l.model.draws, l.family, a.clusters.min(s), seed)?;
    let sub = projection::project(&l.x, &idx, &reference, a.ridge)?;
    let out = files::create_dir(&a.out)?;
    files::write_coefficients(&out.join("coefficients.csv"), &l.names, [&sub])?;
    let summary = serde_json::json!({
        "features": wanted,
        "clusters": sub.n_clusters(),
        "loss": sub.loss,
    });
    files::write_json(&out.join("projection.json"), &summary)?;
    let config = serde_json::json!({
        "features": wanted,
        "clusters": a.clusters,
        "ridge": a.ridge,
        "reference": l.recipe,
    });
    files::write_manifest(&out, &manifest("project", seed, config, l.inputs))
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Random instances for the exact identities.
    #[arg(long, default_value_t = 1000)]
    pub instances: usize,
    /// Instances compared against Monte Carlo.
    #[arg(long = "mc-instances", default_value_t = 20)]
    pub mc_instances: usize,
    #[arg(long = "mc-replications", default_value_t = 100_000)]
    pub mc_replications: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct TheoryConfig {
    instances: usize,
    mc_instances: usize,
    mc_replications: usize,
}

pub fn theory_check(a: &TheoryArgs, seed: u64) -> Result<()> {
    if a.instances == 0 {
        return Err(usage("--instances must be positive"));
    }
    if a.mc_instances > 0 && a.mc_replications < 100 {
        return Err(usage("--mc-replications must be at least 100"));
    }
    let cfg =
        VerifyConfig { instances: a.instances, mc_instances: a.mc_instances, mc_replications: a.mc_replications, seed };
    let rows = theory::verify(&cfg)?;
    let out = files::create_dir(&a.out)?;
    theory::write_report_csv(&out.join("report.csv"), &rows)?;
    let config =
        TheoryConfig { instances: a.instances, mc_instances: a.mc_instances, mc_replications: a.mc_replications };
    files::write_manifest(&out, &manifest("theory-check", seed, config, Vec::new()))?;
    for r in &rows {
        let status = if r.passed { "ok" } else { "FAILED" };
        println!(
            "{}: max {} (tolerance {}) {status}",
            r.identity,
            format_f64(r.max_abs_discrepancy),
            format_f64(r.tolerance)
        );
    }
    if let Some(r) = rows.iter().find(|r| !r.passed) {
        return Err(CheckFailed(format!("check '{}' exceeded its tolerance", r.identity)).into());
    }
    Ok(())
}
