use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use xmrag_core::adapter::load_params;
use xmrag_core::corpus::{load_corpus_with, read_feature_matrix};
use xmrag_core::eval::{
    bench_retrieval, coverage_of_records, coverage_rate, lexical_topk_baseline, plant_corpus,
    random_instance, recall_at_k, BenchMode, BenchSpec, EvalReport, PlantSpec, RandomSpec,
};
use xmrag_core::generation::{
    build_prompt_for, generate_image, GenerationResponse, HttpMllmClient, MllmClient, ReplayMllmClient,
    MLLM_API_KEY_ENV,
};
use xmrag_core::joint::joint_retrieve_with;
use xmrag_core::query::{
    attach_embeddings, decompose_llm, decompose_rule_based, HttpLlmClient, LlmClient, ReplayLlmClient,
    LLM_API_KEY_ENV,
};
use xmrag_core::{joint_retrieve, rank_dense, Corpus, JointOptions, ParetoResult, Query, Subquery};

use crate::config::{Decomposer, EngineConfig};
use crate::error::CliError;

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize, Clone, Copy)]
struct TokenRange {
    min: usize,
    max: usize,
}

#[derive(Serialize)]
struct IndexSummary {
    records: usize,
    vocabulary: usize,
    postings: usize,
    vision_tokens: Option<TokenRange>,
    feature_dim: Option<usize>,
    errors: Vec<String>,
}

pub fn index(config: &EngineConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let manifest = match manifest {
        Some(m) => m,
        None => config.manifest()?.to_path_buf(),
    };
    let corpus = load_corpus_with(&manifest, config.matching)?;
    let mut errors = Vec::new();
    let mut dims = std::collections::BTreeSet::new();
    let mut tokens: Option<TokenRange> = None;
    for i in 0..corpus.len() {
        let id = &corpus.record(i).id;
        let path = corpus.feature_path(i).expect("file-backed corpus");
        match read_feature_matrix(&path) {
            Ok(m) => {
                dims.insert(m.cols());
                let r = m.rows();
                tokens = Some(tokens.map_or(TokenRange { min: r, max: r }, |t| TokenRange {
                    min: t.min.min(r),
                    max: t.max.max(r),
                }));
            }
            Err(e) => errors.push(format!("{id}: {e}")),
        }
    }
    if dims.len() > 1 {
        errors.push(format!("feature widths differ across records: {dims:?}"));
    }
    let summary = IndexSummary {
        records: corpus.len(),
        vocabulary: corpus.vocabulary_size(),
        postings: corpus.index_entries().map(|(_, p)| p.len()).sum(),
        vision_tokens: tokens,
        feature_dim: (dims.len() == 1).then(|| *dims.first().unwrap()),
        errors,
    };
    eprintln!(
        "{} records, {} distinct tokens",
        summary.records, summary.vocabulary
    );
    print_json(&summary)?;
    if let Some(out) = out {
        write_json(&out, &summary)?;
    }
    if summary.errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{} validation errors",
            summary.errors.len()
        )))
    }
}

fn llm_client(config: &EngineConfig, replay: Option<&Path>) -> Result<Box<dyn LlmClient>, CliError> {
    if let Some(path) = replay {
        return Ok(Box::new(ReplayLlmClient::from_caption_file(path)?));
    }
    if config.offline {
        return Err(CliError::usage(
            "LLM decomposition needs the network; pass --llm-replay or drop --offline",
        ));
    }
    if std::env::var_os(LLM_API_KEY_ENV).is_none() {
        return Err(CliError::usage(format!("{LLM_API_KEY_ENV} is not set")));
    }
    Ok(Box::new(HttpLlmClient::from_env(config.llm.clone())?))
}

fn subqueries(config: &EngineConfig, raw: &str, replay: Option<&Path>) -> Result<Vec<Subquery>, CliError> {
    Ok(match config.decomposer {
        Decomposer::Rules => decompose_rule_based(raw)?,
        Decomposer::Llm => decompose_llm(raw, llm_client(config, replay)?.as_ref())?,
    })
}

#[derive(Serialize)]
struct Decomposition<'a> {
    query: &'a str,
    decomposer: Decomposer,
    subqueries: Vec<String>,
}

pub fn decompose(config: &EngineConfig, raw: &str, llm_replay: Option<PathBuf>) -> Result<(), CliError> {
    let subs = subqueries(config, raw, llm_replay.as_deref())?;
    print_json(&Decomposition {
        query: raw,
        decomposer: config.decomposer,
        subqueries: subs.into_iter().map(|s| s.text).collect(),
    })
}

#[derive(Args)]
pub struct QueryArgs {
    pub query: String,
    /// Use these subqueries instead of decomposing the query. Repeatable.
    #[arg(long = "subquery")]
    pub subqueries: Vec<String>,
    /// XMRG file with one unit embedding row per subquery.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub llm_replay: Option<PathBuf>,
}

struct Retrieval {
    corpus: Corpus,
    query: Query,
    result: ParetoResult,
}

fn retrieval(config: &EngineConfig, args: &QueryArgs) -> Result<Retrieval, CliError> {
    let subs = if args.subqueries.is_empty() {
        subqueries(config, &args.query, args.llm_replay.as_deref())?
    } else {
        args.subqueries.iter().map(Subquery::new).collect()
    };
    let query = Query::new(args.query.clone(), subs)?;
    let embeddings = args
        .embeddings
        .as_deref()
        .ok_or_else(|| CliError::usage("--embeddings is required for dense scoring"))?;
    let query = attach_embeddings(&query, embeddings)?;
    let corpus = load_corpus_with(config.manifest()?, config.matching)?;
    let params = load_params(config.adapter()?)?;
    let options = JointOptions {
        beta: config.beta,
        resolution: config.grid_resolution,
    };
    let result = joint_retrieve(&corpus, &query, &params, options)?;
    if let (Some(beta), Some(bound)) = (config.beta, result.bound) {
        if beta >= bound.beta_max {
            eprintln!(
                "warning: beta {beta} >= beta_max {:.6} for this candidate set; dominated images may be selected",
                bound.beta_max
            );
        }
    }
    Ok(Retrieval {
        corpus,
        query,
        result,
    })
}

pub fn retrieve(config: &EngineConfig, args: &QueryArgs) -> Result<(), CliError> {
    let r = retrieval(config, args)?;
    if r.result.is_no_match() {
        log::info!("no caption matches any subquery");
    }
    print_json(&r.result.report(&r.query, !config.offline))
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    /// Directory for the generated image and its provenance record.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON `{"response_id", "image_b64"}` returned instead of calling the service.
    #[arg(long)]
    pub mllm_replay: Option<PathBuf>,
}

#[derive(Deserialize)]
struct CannedResponse {
    response_id: String,
    image_b64: String,
}

pub fn generate(config: &EngineConfig, args: &GenerateArgs) -> Result<(), CliError> {
    let r = retrieval(config, &args.query)?;
    let prompt = build_prompt_for(&r.corpus, &r.query, &r.result)?;
    if config.offline {
        println!("{}", prompt.rendered);
        return Ok(());
    }
    let client: Box<dyn MllmClient> = match &args.mllm_replay {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
            let canned: CannedResponse = serde_json::from_str(&text)?;
            let image = BASE64
                .decode(canned.image_b64.as_bytes())
                .map_err(|e| CliError::data(format!("image_b64: {e}")))?;
            Box::new(ReplayMllmClient::new().with_response(
                prompt.rendered.clone(),
                GenerationResponse {
                    response_id: canned.response_id,
                    image,
                },
            ))
        }
        None => {
            if std::env::var_os(MLLM_API_KEY_ENV).is_none() {
                return Err(CliError::usage(format!("{MLLM_API_KEY_ENV} is not set")));
            }
            Box::new(HttpMllmClient::from_env(config.mllm.clone())?)
        }
    };
    let output = generate_image(&prompt, Some(client.as_ref()), &config.mllm)?;
    fs::create_dir_all(&args.out_dir)?;
    let image_path = args.out_dir.join("generated.png");
    fs::write(&image_path, output.image.unwrap_or_default())?;
    write_json(&args.out_dir.join("provenance.json"), &output.provenance)?;
    println!("{}", image_path.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(subcommand)]
    pub suite: EvalSuite,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum EvalSuite {
    /// Recall@K of dense ranking on a query file with known truth ids.
    Recall {
        /// JSON Lines: {raw, subqueries, truth, embeddings}.
        queries: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Generate a planted corpus and check that every truth is found.
    Planted {
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        records: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
    /// Coverage of the Pareto set against lexical top-k on random corpora.
    Coverage {
        #[arg(long, default_value_t = 200)]
        corpora: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
}

#[derive(Deserialize)]
struct QueryLine {
    raw: String,
    subqueries: Vec<String>,
    truth: String,
    embeddings: PathBuf,
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<(), CliError> {
    eprint!("{}", report.to_table());
    match out {
        Some(path) => write_json(path, report),
        None => print_json(report),
    }
}

pub fn eval(config: &EngineConfig, args: &EvalArgs) -> Result<(), CliError> {
    let report = match &args.suite {
        EvalSuite::Recall { queries, k } => eval_recall(config, queries, *k)?,
        EvalSuite::Planted {
            queries,
            n,
            records,
            dim,
        } => eval_planted(
            config,
            PlantSpec {
                queries: *queries,
                n: *n,
                records: *records,
                dim: *dim,
                seed: config.seed,
                ..PlantSpec::default()
            },
        )?,
        EvalSuite::Coverage { corpora, k } => eval_coverage(config, *corpora, *k)?,
    };
    emit_report(&report, args.out.as_deref())
}

fn eval_recall(config: &EngineConfig, queries: &Path, k: usize) -> Result<EvalReport, CliError> {
    let corpus = load_corpus_with(config.manifest()?, config.matching)?;
    let params = load_params(config.adapter()?)?;
    let text = fs::read_to_string(queries)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", queries.display())))?;
    let base = queries.parent().unwrap_or(Path::new("."));
    let mut per_query = Vec::new();
    let mut forwards = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let q: QueryLine = serde_json::from_str(line)
            .map_err(|e| CliError::data(format!("{} line {}: {e}", queries.display(), i + 1)))?;
        let query = attach_embeddings(
            &Query::from_texts(q.raw, &q.subqueries)?,
            base.join(&q.embeddings),
        )?;
        let ranking = rank_dense(&corpus, &query, &params, k)?;
        forwards += ranking.dense_forwards;
        let ids: Vec<String> = ranking.ids().into_iter().map(str::to_string).collect();
        per_query.push(recall_at_k(&[ids], &[q.truth], k)?);
    }
    let mut report = EvalReport::new(
        format!("recall@{k}"),
        per_query,
        serde_json::json!({ "k": k, "records": corpus.len() }),
    );
    report.counters.insert("dense_forwards".into(), forwards as f64);
    Ok(report)
}

fn eval_planted(config: &EngineConfig, spec: PlantSpec) -> Result<EvalReport, CliError> {
    let planted = plant_corpus(spec)?;
    let options = JointOptions {
        beta: config.beta,
        resolution: config.grid_resolution,
    };
    let mut per_query = Vec::new();
    let mut exact = 0usize;
    let (mut dense_forwards, mut hybrid_forwards) = (0, 0);
    for pq in &planted.queries {
        let ranking = rank_dense(&planted.corpus, &pq.query, &planted.params, 1)?;
        dense_forwards += ranking.dense_forwards;
        let ids: Vec<String> = ranking.ids().into_iter().map(str::to_string).collect();
        per_query.push(recall_at_k(&[ids], std::slice::from_ref(&pq.truth), 1)?);
        let joint = joint_retrieve(&planted.corpus, &pq.query, &planted.params, options)?;
        hybrid_forwards += joint.counters.dense_forwards;
        if joint.ids() == [pq.truth.as_str()] {
            exact += 1;
        }
    }
    let mut report = EvalReport::new("recall@1", per_query, serde_json::to_value(spec)?);
    report.counters = BTreeMap::from([
        ("pareto_equals_truth".into(), exact as f64),
        ("dense_forwards".into(), dense_forwards as f64),
        ("hybrid_forwards".into(), hybrid_forwards as f64),
    ]);
    Ok(report)
}

fn eval_coverage(config: &EngineConfig, corpora: usize, k: usize) -> Result<EvalReport, CliError> {
    if k == 0 || corpora == 0 {
        return Err(CliError::usage("--corpora and --k must be >= 1"));
    }
    let options = JointOptions {
        beta: config.beta,
        resolution: config.grid_resolution,
    };
    let mut per_query = Vec::new();
    let (mut baseline_sum, mut geq, mut gt) = (0.0, 0, 0);
    for i in 0..corpora as u64 {
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i);
        let inst = random_instance(RandomSpec {
            n: 2 + (i as usize % 4),
            records: 50 + (i as usize * 37) % 151,
            seed,
            ..RandomSpec::default()
        })?;
        let result = joint_retrieve_with(&inst.corpus, &inst.query, &inst.scores, options)?;
        let ours = coverage_rate(&result, &inst.query)?;
        let base = coverage_of_records(
            &inst.corpus,
            &inst.query,
            &lexical_topk_baseline(&inst.corpus, &inst.query, k),
        );
        baseline_sum += base;
        geq += usize::from(ours >= base);
        gt += usize::from(ours > base);
        per_query.push(ours);
    }
    let mut report = EvalReport::new(
        "coverage_rate",
        per_query,
        serde_json::json!({ "corpora": corpora, "baseline_k": k, "seed": config.seed }),
    );
    report.counters = BTreeMap::from([
        ("baseline_mean".into(), baseline_sum / corpora as f64),
        ("joint_geq_baseline".into(), geq as f64),
        ("joint_gt_baseline".into(), gt as f64),
    ]);
    Ok(report)
}

#[derive(Args)]
pub struct BenchArgs {
    /// Corpus sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1_000usize, 10_000])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub queries: usize,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Share of records matching at least one subquery.
    #[arg(long, default_value_t = 0.04)]
    pub match_rate: f64,
    /// Directory for per-mode CSV files and the JSON report.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn bench(config: &EngineConfig, args: &BenchArgs) -> Result<(), CliError> {
    let spec = BenchSpec {
        sizes: args.sizes.clone(),
        queries: args.queries,
        n: args.n,
        match_rate: args.match_rate,
        seed: config.seed,
        ..BenchSpec::default()
    };
    let report = bench_retrieval(&spec)?;
    eprint!("{}", report.to_table());
    for v in &report.violations {
        eprintln!("violation: {v}");
    }
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        for &size in &spec.sizes {
            for mode in BenchMode::ALL {
                fs::write(
                    dir.join(format!("{}_{size}.csv", mode.name())),
                    report.to_csv(mode, size),
                )?;
            }
        }
        write_json(&dir.join("bench.json"), &report)?;
    }
    print_json(&serde_json::json!({
        "summaries": report.summaries,
        "violations": report.violations,
    }))?;
    if report.violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::data(format!(
            "{} counter violations",
            report.violations.len()
        )))
    }
}
