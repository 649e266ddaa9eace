//! Pipeline stages. Each reads its upstream artifacts, checks that they
//! belong together, and writes its own artifacts plus a manifest record.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use e11_core::corpus::{
    activity_filter, apply_filters, build_timeline, group_by_user, read_posts, write_posts, Cohort, DropSummary,
    JoiningRule, Post, TimelineRecord, UserTimeline,
};
use e11_core::efa::{
    bartlett, correlation_matrix_named, factor_scores, fit_efa, kmo, parallel_analysis, top_loadings_report,
    write_top_loadings_csv, BartlettResult, EfaModel, FactorScoreMatrix, KmoResult, ParallelAnalysis,
    ParallelAnalysisConfig,
};
use e11_core::embedder::{provider_from_config, Embedder, EmbeddingProviderConfig, ProviderKind, VectorCache};
use e11_core::forecast::{months_before_sweep, spearman, AucCurve, CvConfig};
use e11_core::itembank::{load_item_bank, ItemBank};
use e11_core::linalg::Matrix;
use e11_core::profiles::{aggregate_mean, compare_groups, FactorTTest, GroupProfile, TTestVariant};
use e11_core::scorer::{score_corpus, ItemScoreMatrix, ItemVectors};
use e11_core::trend::{randomize_t0, trajectory, Composite, CompositeMode, LoessConfig, Pooling, TrajectorySeries};
use e11_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::{require_file, ControlT0, GroupBy, Loaded};
use crate::exit::{config_err, data_err, dependency_err, Context, Failure};
use crate::workspace::*;

pub fn run_stage(stage: Stage, loaded: &Loaded) -> Result<String, Failure> {
    let mut run = Run::start(loaded, stage.name())?;
    let summary = match stage {
        Stage::Ingest => ingest(&mut run),
        Stage::Score => score(&mut run),
        Stage::EfaFit => efa_fit(&mut run),
        Stage::EfaScore => efa_score(&mut run),
        Stage::Profile => profile(&mut run),
        Stage::Forecast => forecast(&mut run),
        Stage::Trend => trend(&mut run),
    }
    .context(stage.name())?;
    run.finish()?;
    Ok(summary)
}

pub fn load_posts(path: &Path) -> Result<Vec<Post>, Failure> {
    let f = File::open(path).map_err(|e| dependency_err(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_posts(BufReader::new(f), false).context(path.display())?.posts)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| dependency_err(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| dependency_err(format!("malformed {} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Rebuilds timelines from their records, keeping only posts in `keep`.
pub fn load_timelines(path: &Path, posts: &[Post], keep: &HashSet<&str>) -> Result<Vec<UserTimeline>, Failure> {
    let records: Vec<TimelineRecord> = read_jsonl(path)?;
    let by_id: HashMap<&str, &Post> = posts.iter().map(|p| (p.id.as_str(), p)).collect();
    records
        .into_iter()
        .map(|r| {
            let posts = r
                .post_ids
                .iter()
                .filter(|id| keep.contains(id.as_str()))
                .map(|id| {
                    by_id.get(id.as_str()).map(|p| (*p).clone()).ok_or_else(|| {
                        dependency_err(format!("timeline of `{}` names unknown post `{id}`; rerun ingest", r.user))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(UserTimeline { user: r.user, posts, t0: r.t0, cohort: r.cohort })
        })
        .collect()
}

fn load_bank(run: &mut Run) -> Result<ItemBank, Failure> {
    match &run.loaded.config.paths.item_bank {
        None => Ok(ItemBank::canonical()),
        Some(_) => {
            let path = require_file(run.loaded, &run.loaded.config.paths.item_bank, "item_bank")?;
            run.external("item_bank", &path)?;
            load_item_bank(&path).map_err(|e| config_err(format!("item bank {}: {e}", path.display())))
        }
    }
}

fn load_model(run: &mut Run) -> Result<EfaModel<f64>, Failure> {
    let path = run.input(EFA_MODEL)?;
    let model = EfaModel::<f64>::load(&path)?;
    run.fingerprint("model", model.fingerprint());
    Ok(model)
}

/// Factor scores checked against the current model.
fn load_factor_scores(run: &mut Run) -> Result<FactorScoreMatrix<f64>, Failure> {
    let model = load_model(run)?;
    let path = run.input(FACTOR_SCORES)?;
    let fs = FactorScoreMatrix::<f64>::load(&path)?;
    if fs.model_fingerprint != model.fingerprint() {
        return Err(Error::FingerprintMismatch {
            what: format!("{} (model in {}); rerun efa-score", FACTOR_SCORES.file, EFA_MODEL.file),
            expected: model.fingerprint(),
            found: fs.model_fingerprint,
        }
        .into());
    }
    Ok(fs)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records_read: usize,
    pub malformed: usize,
    pub malformed_examples: Vec<String>,
    pub filters: DropSummary,
    pub joiners: usize,
    pub controls: usize,
    pub inactive_users: usize,
}

fn ingest(run: &mut Run) -> Result<String, Failure> {
    let cfg = &run.loaded.config;
    let corpus = require_file(run.loaded, &cfg.paths.corpus, "corpus")?;
    run.external("corpus", &corpus)?;
    let f = File::open(&corpus).map_err(|e| config_err(format!("cannot open {}: {e}", corpus.display())))?;
    let outcome = read_posts(BufReader::new(f), cfg.ingest.lenient).context(corpus.display())?;
    let malformed = outcome.errors.len();
    let records_read = outcome.posts.len() + malformed;
    let malformed_examples = outcome.errors.iter().take(10).map(|e| e.to_string()).collect();
    let (kept, drops) = apply_filters(outcome.posts, &cfg.filters)?;
    if kept.is_empty() {
        return Err(data_err(format!("no posts survive the filters ({records_read} read)")));
    }

    let targets = &cfg.ingest.target_forums;
    let (joiners, controls): (BTreeMap<String, Vec<Post>>, BTreeMap<String, Vec<Post>>) =
        group_by_user(kept.iter().cloned()).into_iter().partition(|(_, ps)| ps.iter().any(|p| targets.contains(&p.forum)));
    let mut records = Vec::new();
    let mut inactive = 0;
    let mut counts = [0usize; 2];
    for (cohort, users, rule) in [
        (Cohort::Joiner, joiners, &cfg.ingest.joiner_activity),
        (Cohort::Control, controls, &cfg.ingest.control_activity),
    ] {
        let active = match rule {
            Some(rule) => activity_filter(&users, rule)?,
            None => users.keys().cloned().collect::<BTreeSet<_>>(),
        };
        inactive += users.len() - active.len();
        let jr = JoiningRule { target_forums: targets.clone(), cohort };
        for (user, posts) in users {
            if active.contains(&user) {
                records.push(build_timeline(posts, &jr)?.record());
                counts[(cohort == Cohort::Control) as usize] += 1;
            }
        }
    }
    records.sort_by(|a, b| a.user.cmp(&b.user));

    let mut posts_bytes = Vec::new();
    write_posts(&mut posts_bytes, &kept)?;
    run.write(POSTS.file, &posts_bytes)?;
    run.write(TIMELINES.file, &jsonl_bytes(&records))?;
    let summary = IngestSummary {
        records_read,
        malformed,
        malformed_examples,
        filters: drops,
        joiners: counts[0],
        controls: counts[1],
        inactive_users: inactive,
    };
    run.write_json(INGEST_SUMMARY.file, &summary)?;
    Ok(format!(
        "{} of {records_read} records kept; {} joiners, {} controls",
        kept.len(),
        summary.joiners,
        summary.controls
    ))
}

/// Passes calls through and keeps every returned vector.
struct Recording<'a> {
    inner: &'a dyn Embedder,
    cache: Mutex<VectorCache>,
}

impl Embedder for Recording<'_> {
    fn embed_batch(&self, texts: &[&str]) -> e11_core::Result<Vec<Vec<f32>>> {
        let out = self.inner.embed_batch(texts)?;
        let mut cache = self.cache.lock().expect("cache lock");
        for (t, v) in texts.iter().zip(&out) {
            cache.insert_text(t, v.clone())?;
        }
        Ok(out)
    }
}

fn provider_config(run: &mut Run) -> Result<EmbeddingProviderConfig, Failure> {
    let ecfg = run.loaded.embedder();
    if ecfg.kind == ProviderKind::FileCache {
        let path = ecfg.path.clone().expect("validated");
        if !path.is_file() {
            return Err(dependency_err(format!(
                "embedding cache {} does not exist; run score once with the http provider and paths.cache set",
                path.display()
            )));
        }
        run.external("cache", &path)?;
    }
    Ok(ecfg)
}

fn score(run: &mut Run) -> Result<String, Failure> {
    let posts = load_posts(&run.input(POSTS)?)?;
    let bank = load_bank(run)?;
    let ecfg = provider_config(run)?;
    let base = provider_from_config(&ecfg)?;
    let record_to: Option<PathBuf> = match (ecfg.kind, &run.loaded.config.paths.cache) {
        (ProviderKind::Http, Some(p)) => Some(run.loaded.resolve(p)),
        _ => None,
    };
    let recording = record_to.as_ref().map(|_| Recording { inner: base.as_ref(), cache: Mutex::new(VectorCache::new(0)) });
    let provider: &dyn Embedder = match &recording {
        Some(r) => r,
        None => base.as_ref(),
    };

    let items = ItemVectors::encode(&bank, provider, &ecfg).context("embedding item texts")?;
    let outcome = score_corpus(&posts, &items, provider, &ecfg, &run.loaded.config.scoring)?;
    run.fingerprint("bank", bank.fingerprint());
    run.fingerprint("provider", ecfg.provider_tag());

    let mut bytes = Vec::new();
    outcome.matrix.write_to(&mut bytes)?;
    run.write(ITEM_SCORES.file, &bytes)?;
    let skipped: Vec<BTreeMap<&str, &str>> = outcome
        .skipped
        .iter()
        .map(|(id, why)| BTreeMap::from([("post_id", id.as_str()), ("reason", why.as_str())]))
        .collect();
    run.write_json(SCORE_SKIPPED.file, &skipped)?;
    if let (Some(path), Some(rec)) = (record_to, recording) {
        let cache = rec.cache.into_inner().expect("cache lock");
        let mut merged = if path.is_file() { VectorCache::load(&path)? } else { VectorCache::new(0) };
        for (k, v) in cache.entries() {
            merged.insert(*k, v.to_vec())?;
        }
        merged.save(&path)?;
    }
    Ok(format!(
        "{} posts x {} items, {} skipped",
        outcome.matrix.rows(),
        outcome.matrix.cols(),
        outcome.skipped.len()
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EfaDiagnostics {
    pub n: usize,
    pub p: usize,
    pub kmo: KmoResult<f64>,
    pub bartlett: BartlettResult<f64>,
    /// Absent when `k` was fixed by configuration.
    pub parallel_analysis: Option<ParallelAnalysis<f64>>,
    pub k: usize,
    pub k_source: String,
    pub item_ids: Vec<String>,
}

fn efa_fit(run: &mut Run) -> Result<String, Failure> {
    let scores = ItemScoreMatrix::load(&run.input(ITEM_SCORES)?)?;
    let bank = load_bank(run)?;
    scores.check_bank(&bank).context(format!("{} was scored against another bank; rerun score", ITEM_SCORES.file))?;
    let cfg = &run.loaded.config;
    let x: Matrix<f64> = scores.to_matrix();
    let r = correlation_matrix_named(&x, &scores.item_ids)?;
    let kmo_r = kmo(&r)?;
    let bart = bartlett(&r)?;
    let (k, pa, source) = match cfg.efa.k_override {
        Some(k) => (k, None, "override"),
        None => {
            let pa_cfg = ParallelAnalysisConfig { iters: cfg.efa.iters, quantile: cfg.efa.quantile, seed: cfg.seed };
            let pa = parallel_analysis(&x, &pa_cfg)?;
            (pa.k, Some(pa), "parallel_analysis")
        }
    };
    if k == 0 {
        return Err(data_err("parallel analysis retained no factors; set efa.k_override to force a fit"));
    }
    let mut model = fit_efa(&x, &scores.item_ids, k, &cfg.efa.options())?.with_bank_fingerprint(bank.fingerprint());
    if let Some(names) = &cfg.efa.factor_names {
        if names.len() != k {
            return Err(config_err(format!("efa.factor_names has {} names but {k} factors were retained", names.len())));
        }
        model = model.with_factor_names(names.clone()).map_err(|e| config_err(e.to_string()))?;
    }
    run.fingerprint("bank", bank.fingerprint());
    run.fingerprint("model", model.fingerprint());
    run.write(EFA_MODEL.file, model.to_json_string()?.as_bytes())?;
    let diag = EfaDiagnostics {
        n: x.rows(),
        p: x.cols(),
        kmo: kmo_r,
        bartlett: bart,
        parallel_analysis: pa,
        k,
        k_source: source.into(),
        item_ids: scores.item_ids.clone(),
    };
    run.write_json(EFA_DIAGNOSTICS.file, &diag)?;
    let top = top_loadings_report(&model, cfg.efa.top_items.min(x.cols()), Some(&bank))?;
    let mut csv = Vec::new();
    write_top_loadings_csv(&mut csv, &top)?;
    run.write(TOP_LOADINGS.file, &csv)?;
    Ok(format!("k = {k} ({source}), KMO = {:.3}, n = {}", diag.kmo.overall, diag.n))
}

fn efa_score(run: &mut Run) -> Result<String, Failure> {
    let model = load_model(run)?;
    let scores = ItemScoreMatrix::load(&run.input(ITEM_SCORES)?)?;
    let bank = load_bank(run)?;
    let checks = [
        (format!("item bank of {} vs configured bank", EFA_MODEL.file), bank.fingerprint(), &model.bank_fingerprint),
        (format!("item bank of {} vs {}", ITEM_SCORES.file, EFA_MODEL.file), model.bank_fingerprint.clone(), &scores.bank_fingerprint),
    ];
    for (what, expected, found) in checks {
        if &expected != found {
            return Err(Error::FingerprintMismatch { what, expected, found: found.clone() }.into());
        }
    }
    let x: Matrix<f64> = scores.to_matrix();
    let fs = factor_scores(&x, &scores.item_ids, &scores.post_ids, &model)?;
    let mut bytes = Vec::new();
    fs.write_to(&mut bytes)?;
    run.write(FACTOR_SCORES.file, &bytes)?;
    Ok(format!("{} posts x {} factors", fs.rows(), fs.k()))
}

fn select_rows(m: &Matrix<f64>, rows: &[usize]) -> Matrix<f64> {
    Matrix::from_fn(rows.len(), m.cols(), |i, j| m[(rows[i], j)])
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Comparison {
    pub a_label: String,
    pub a_forums: BTreeSet<String>,
    pub n_a: usize,
    pub b_label: String,
    pub b_forums: BTreeSet<String>,
    pub n_b: usize,
    pub variant: TTestVariant,
    pub tests: Vec<FactorTTest>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProfilesArtifact {
    pub group_by: GroupBy,
    pub factor_names: Vec<String>,
    pub model_fingerprint: String,
    pub profiles: Vec<GroupProfile<f64>>,
    pub compare: Option<Comparison>,
}

fn profile(run: &mut Run) -> Result<String, Failure> {
    let fs = load_factor_scores(run)?;
    let posts = load_posts(&run.input(POSTS)?)?;
    let cfg = &run.loaded.config.profile;
    let by_id: HashMap<&str, &Post> = posts.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut scored = Vec::with_capacity(fs.rows());
    for id in &fs.post_ids {
        let p = by_id.get(id.as_str()).ok_or_else(|| {
            dependency_err(format!("scored post `{id}` is not in {}; rerun score", POSTS.file))
        })?;
        scored.push(*p);
    }

    let cohort_of: HashMap<String, Cohort> = if cfg.group_by == GroupBy::Cohort {
        let recs: Vec<TimelineRecord> = read_jsonl(&run.input(TIMELINES)?)?;
        recs.into_iter().map(|r| (r.user, r.cohort)).collect()
    } else {
        HashMap::new()
    };
    let keyed: Vec<(usize, String)> = scored
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let key = match cfg.group_by {
                GroupBy::Forum => Some(p.forum.clone()),
                GroupBy::User => Some(p.user.clone()),
                GroupBy::Cohort => cohort_of.get(&p.user).map(|c| match c {
                    Cohort::Joiner => "joiner".to_string(),
                    Cohort::Control => "control".to_string(),
                }),
            };
            key.map(|k| (i, k))
        })
        .collect();
    if keyed.is_empty() {
        return Err(data_err("no scored posts fall in any group"));
    }
    let rows: Vec<usize> = keyed.iter().map(|(i, _)| *i).collect();
    let keys: Vec<String> = keyed.into_iter().map(|(_, k)| k).collect();
    let profiles = aggregate_mean(&select_rows(&fs.scores, &rows), &keys)?;

    let compare = match &cfg.compare {
        None => None,
        Some(c) => {
            let pick = |forums: &BTreeSet<String>| -> Vec<usize> {
                scored.iter().enumerate().filter(|(_, p)| forums.contains(&p.forum)).map(|(i, _)| i).collect()
            };
            let (ra, rb) = (pick(&c.a_forums), pick(&c.b_forums));
            for (label, r) in [(&c.a_label, &ra), (&c.b_label, &rb)] {
                if r.len() < 2 {
                    return Err(data_err(format!("comparison group `{label}` has {} scored posts, need >= 2", r.len())));
                }
            }
            let tests = compare_groups(&select_rows(&fs.scores, &ra), &select_rows(&fs.scores, &rb), &fs.factor_names, cfg.ttest)?;
            Some(Comparison {
                a_label: c.a_label.clone(),
                a_forums: c.a_forums.clone(),
                n_a: ra.len(),
                b_label: c.b_label.clone(),
                b_forums: c.b_forums.clone(),
                n_b: rb.len(),
                variant: cfg.ttest,
                tests,
            })
        }
    };
    let n_groups = profiles.len();
    let art = ProfilesArtifact {
        group_by: cfg.group_by,
        factor_names: fs.factor_names.clone(),
        model_fingerprint: fs.model_fingerprint.clone(),
        profiles,
        compare,
    };
    run.write_json(PROFILES.file, &art)?;
    Ok(format!("{n_groups} groups{}", if art.compare.is_some() { ", with comparison" } else { "" }))
}

/// Posts, factor scores and timelines restricted to scored posts.
fn user_inputs(run: &mut Run) -> Result<(FactorScoreMatrix<f64>, Vec<UserTimeline>), Failure> {
    let fs = load_factor_scores(run)?;
    let posts = load_posts(&run.input(POSTS)?)?;
    let keep: HashSet<&str> = fs.post_ids.iter().map(String::as_str).collect();
    let timelines = load_timelines(&run.input(TIMELINES)?, &posts, &keep)?;
    if timelines.is_empty() {
        return Err(data_err(format!("{} lists no users", TIMELINES.file)));
    }
    Ok((fs, timelines))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ForecastArtifact {
    pub factor_names: Vec<String>,
    pub model_fingerprint: String,
    pub cv: CvConfig,
    /// Rank correlation of offset and mean AUC over offsets with an AUC.
    pub spearman_offset_auc: Option<f64>,
    pub curve: AucCurve<f64>,
}

fn forecast(run: &mut Run) -> Result<String, Failure> {
    let (fs, timelines) = user_inputs(run)?;
    let cv = run.loaded.cv();
    let curve = months_before_sweep(&timelines, &fs, &run.loaded.config.forecast.offsets, &cv)?;
    let have: Vec<(f64, f64)> =
        curve.points.iter().filter_map(|p| p.auc_mean.map(|a| (p.months_before as f64, a))).collect();
    if have.is_empty() {
        let reason = curve.points[0].missing_reason.clone().unwrap_or_default();
        return Err(data_err(format!("no offset supports cross-validation: {reason}")));
    }
    let spearman_offset_auc = (have.len() >= 2).then(|| {
        let (a, b): (Vec<f64>, Vec<f64>) = have.iter().copied().unzip();
        spearman(&a, &b)
    });
    let n_points = curve.points.len();
    let art = ForecastArtifact {
        factor_names: fs.factor_names.clone(),
        model_fingerprint: fs.model_fingerprint.clone(),
        cv,
        spearman_offset_auc,
        curve,
    };
    run.write_json(FORECAST.file, &art)?;
    Ok(format!("{} of {n_points} offsets with an AUC", have.len()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrendArtifact {
    pub model_fingerprint: String,
    pub composite: Composite<f64>,
    pub loess: LoessConfig,
    pub pooling: Pooling,
    pub control_t0: ControlT0,
    pub series: Vec<TrajectorySeries<f64>>,
}

fn trend(run: &mut Run) -> Result<String, Failure> {
    let (fs, timelines) = user_inputs(run)?;
    let cfg = &run.loaded.config.trend;
    if let CompositeMode::Factor(name) = &cfg.composite {
        if fs.column_index(name).is_none() {
            return Err(config_err(format!("trend.composite names unknown factor `{name}`")));
        }
    }
    let composite = Composite::fit(&fs, cfg.composite.clone())?;
    let mut joiners: Vec<UserTimeline> =
        timelines.iter().filter(|t| t.cohort == Cohort::Joiner && t.t0.is_some() && !t.posts.is_empty()).cloned().collect();
    let mut controls: Vec<UserTimeline> =
        timelines.into_iter().filter(|t| t.cohort == Cohort::Control && !t.posts.is_empty()).collect();
    if cfg.control_t0 == ControlT0::Random {
        randomize_t0(&mut controls, cfg.seed.unwrap_or(run.loaded.config.seed));
    }
    controls.retain(|t| t.t0.is_some());
    joiners.sort_by(|a, b| a.user.cmp(&b.user));
    let mut series = Vec::new();
    for (name, group) in [("joiner", &joiners), ("control", &controls)] {
        if group.is_empty() {
            continue;
        }
        series.push(trajectory(name, group, &fs, &composite, &cfg.loess, cfg.pooling).context(format!("{name} cohort"))?);
    }
    if series.is_empty() {
        return Err(data_err("no users with a t0 in either cohort"));
    }
    let summary = series.iter().map(|s| format!("{}: {} points", s.cohort, s.points.len())).collect::<Vec<_>>().join(", ");
    let art = TrendArtifact {
        model_fingerprint: fs.model_fingerprint.clone(),
        composite,
        loess: cfg.loess.clone(),
        pooling: cfg.pooling,
        control_t0: cfg.control_t0,
        series,
    };
    run.write_json(TREND.file, &art)?;
    Ok(summary)
}
