use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use weaklayout::cage::{posterior, ThetaParams, ThetaSnapshot};
use weaklayout::config::{parse_override, parse_pairs, FlatConfig};
use weaklayout::document::{parse_documents, split_corpus, write_corpus, Corpus, CorpusSplit, SplitFractions, SplitManifest};
use weaklayout::eval::{compare, score, DeltaTable, EvalReport};
use weaklayout::features::{forward, FeatureVector, PhiParams, PhiSnapshot};
use weaklayout::lf::{build_label_matrix, diagnostics, parse_lf_suite, suite_to_json, LabelMatrix, LabelingFunction, RowKey};
use weaklayout::synth::{generate, run_sweep, SweepPlan, SynthSpec};
use weaklayout::train::{train, TrainConfig, TrainedModel, TrainingData};

use crate::output::{manifest_beside, Manifest, Staged};
use crate::{Cli, Command, Overrides, SplitArgs, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { corpus, output } => ingest(cli, corpus, output.as_deref()),
        Command::LfApply {
            corpus,
            lfs,
            output,
            overrides,
        } => lf_apply(cli, corpus, lfs, output.as_deref(), overrides),
        Command::LfReport { matrix, gold, output } => lf_report(cli, matrix, gold.as_deref(), output.as_deref()),
        Command::Train(args) => cmd_train(cli, args),
        Command::Predict {
            model,
            corpus,
            part,
            fuse,
            output,
        } => cmd_predict(cli, model, corpus, part, *fuse, output.as_deref()),
        Command::Eval {
            gold,
            pred,
            baseline,
            mask,
            output,
        } => cmd_eval(cli, gold, pred, baseline.as_deref(), mask, output.as_deref()),
        Command::Synth(args) => cmd_synth(cli, args),
        Command::Sweep {
            synth,
            overrides,
            labeled,
            unlabeled,
            seeds,
            validation,
            test,
        } => {
            let mut plan = SweepPlan::default();
            for (k, v) in [("labeled", labeled), ("unlabeled", unlabeled), ("seeds", seeds)] {
                if let Some(v) = v {
                    plan.set(k, v)?;
                }
            }
            if let Some(v) = validation {
                plan.validation = *v;
            }
            if let Some(v) = test {
                plan.test = *v;
            }
            cmd_sweep(cli, synth, overrides, plan)
        }
        Command::RunAll {
            corpus,
            lfs,
            synth,
            synth_args,
            split,
            overrides,
            supervised_only,
            compare_baseline,
        } => {
            let source = if *synth {
                Source::Synth(synth_args.clone())
            } else {
                match (corpus, lfs) {
                    (Some(c), Some(l)) => Source::Files(c.clone(), l.clone()),
                    _ => bail!("run-all needs --corpus and --lfs, or --synth"),
                }
            };
            run_all(cli, source, split, overrides, *supervised_only, *compare_baseline)
        }
    }
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

/// Fails with a filesystem error before any work starts.
fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(io::Error::new(io::ErrorKind::NotFound, format!("{}: no such file", path.display())).into());
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    require_file(path)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_documents(BufReader::new(file)).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_suite(path: &Path, corpus: &Corpus) -> Result<Vec<LabelingFunction>> {
    require_file(path)?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_lf_suite(&bytes, &corpus.classes).with_context(|| format!("LF suite {}", path.display()))
}

fn load_matrix(path: &Path) -> Result<LabelMatrix> {
    require_file(path)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    LabelMatrix::read(BufReader::new(file)).with_context(|| format!("reading label matrix {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require_file(path)?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn apply_overrides<C: FlatConfig>(cfg: &mut C, file: Option<&Path>, sets: &[String]) -> Result<()> {
    if let Some(path) = file {
        require_file(path)?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_all(&parse_pairs(&text)?)
            .with_context(|| format!("config {}", path.display()))?;
    }
    for s in sets {
        let (k, v) = parse_override(s)?;
        cfg.set(&k, &v)?;
    }
    Ok(())
}

fn train_config(cli: &Cli, overrides: &Overrides, supervised_only: bool) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    apply_overrides(&mut cfg, cli.config.as_deref(), &overrides.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if supervised_only {
        cfg = cfg.supervised_only();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_spec(cli: &Cli, args: &SynthArgs) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    apply_overrides(&mut spec, args.spec.as_deref(), &args.spec_set)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn corpus_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_corpus(corpus, &mut buf)?;
    Ok(buf)
}

fn matrix_bytes(matrix: &LabelMatrix) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    matrix.write(&mut buf)?;
    Ok(buf)
}

fn summary_line(corpus: &Corpus) -> String {
    format!(
        "{} docs, {} tokens, {} classes",
        corpus.documents.len(),
        corpus.n_tokens(),
        corpus.classes.len()
    )
}

fn ingest(cli: &Cli, path: &Path, output: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(path)?;
    let out = output.map_or_else(|| cli.out_dir.join("corpus.jsonl"), Path::to_path_buf);
    let mut staged = Staged::default();
    staged.add(&out, corpus_bytes(&corpus)?);
    let mut m = Manifest::new("ingest");
    m.input(path)?;
    let base = out.parent().unwrap_or(Path::new("")).to_path_buf();
    m.stage(&mut staged, &base, manifest_beside(&out))?;
    staged.commit()?;
    say(cli, summary_line(&corpus));
    Ok(())
}

fn lf_apply(cli: &Cli, corpus_path: &Path, lfs_path: &Path, output: Option<&Path>, overrides: &Overrides) -> Result<()> {
    require_file(corpus_path)?;
    require_file(lfs_path)?;
    let corpus = load_corpus(corpus_path)?;
    let lfs = load_suite(lfs_path, &corpus)?;
    let cfg = train_config(cli, overrides, false)?;
    let matrix = build_label_matrix(&lfs, &corpus, &cfg.context()?)?;
    let out = output.map_or_else(|| cli.out_dir.join("matrix.jsonl"), Path::to_path_buf);
    let mut staged = Staged::default();
    staged.add(&out, matrix_bytes(&matrix)?);
    let mut m = Manifest::new("lf-apply");
    m.input(corpus_path)?;
    m.input(lfs_path)?;
    m.config(vec![
        ("context_window", cfg.context_window.to_string()),
        ("context_radius", cfg.context_radius.to_string()),
    ]);
    let base = out.parent().unwrap_or(Path::new("")).to_path_buf();
    m.stage(&mut staged, &base, manifest_beside(&out))?;
    staged.commit()?;
    say(
        cli,
        format!("{} rows x {} LFs", matrix.n_instances(), matrix.n_lfs()),
    );
    Ok(())
}

/// Gold labels aligned with the matrix rows.
fn gold_for_rows(rows: &[RowKey], corpus: &Corpus) -> Result<Vec<Option<usize>>> {
    let by_key = gold_map(corpus);
    rows.iter()
        .map(|r| match by_key.get(&(r.doc.clone(), r.token)) {
            Some(g) => Ok(*g),
            None => bail!("matrix row ({}, {}) is not in the gold corpus", r.doc, r.token),
        })
        .collect()
}

fn gold_map(corpus: &Corpus) -> HashMap<(String, usize), Option<usize>> {
    corpus
        .documents
        .iter()
        .flat_map(|d| {
            d.tokens
                .iter()
                .enumerate()
                .map(move |(t, tok)| ((d.doc_id.clone(), t), tok.gold))
        })
        .collect()
}

fn lf_report(cli: &Cli, matrix_path: &Path, gold: Option<&Path>, output: Option<&Path>) -> Result<()> {
    require_file(matrix_path)?;
    if let Some(g) = gold {
        require_file(g)?;
    }
    let matrix = load_matrix(matrix_path)?;
    let gold_rows = match gold {
        Some(g) => {
            let corpus = load_corpus(g)?;
            if corpus.classes != matrix.classes {
                bail!("gold corpus classes differ from the matrix classes");
            }
            Some(gold_for_rows(&matrix.rows, &corpus)?)
        }
        None => None,
    };
    let report = diagnostics(&matrix, gold_rows.as_deref())?;
    println!("{report}");
    for id in report.silent_lfs() {
        eprintln!("warning: LF `{id}` never fires");
    }
    if let Some(out) = output {
        let mut staged = Staged::default();
        staged.add_json(out, &report)?;
        let mut m = Manifest::new("lf-report");
        m.input(matrix_path)?;
        if let Some(g) = gold {
            m.input(g)?;
        }
        let base = out.parent().unwrap_or(Path::new("")).to_path_buf();
        m.stage(&mut staged, &base, manifest_beside(out))?;
        staged.commit()?;
    }
    let _ = cli;
    Ok(())
}

/// Rejects a matrix that does not belong to this corpus and suite.
fn check_matrix(matrix: &LabelMatrix, lfs: &[LabelingFunction], corpus: &Corpus) -> Result<()> {
    let ids: Vec<&str> = lfs.iter().map(|l| l.id.as_str()).collect();
    if matrix.lf_ids.iter().map(String::as_str).ne(ids.iter().copied()) {
        bail!("label matrix LFs do not match the suite");
    }
    if matrix.classes != corpus.classes {
        bail!("label matrix classes differ from the corpus");
    }
    let instances = corpus.instances();
    if instances.len() != matrix.n_instances()
        || instances
            .iter()
            .zip(&matrix.rows)
            .any(|(r, k)| corpus.documents[r.doc].doc_id != k.doc || r.token != k.token)
    {
        bail!("label matrix rows do not follow the corpus instances");
    }
    Ok(())
}

fn make_split(corpus: &Corpus, args: &SplitArgs, seed: u64) -> Result<CorpusSplit> {
    match &args.split {
        Some(path) => {
            let manifest: SplitManifest = read_json(path)?;
            Ok(CorpusSplit::from_manifest(&manifest, corpus)?)
        }
        None => Ok(split_corpus(
            corpus,
            SplitFractions {
                labeled: args.labeled,
                validation: args.validation,
                test: args.test,
            },
            seed,
        )?),
    }
}

#[derive(Serialize)]
struct BeliefRecord<'a> {
    id: &'a str,
    q: f64,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    epochs: usize,
    best_epoch: usize,
    best_val_f1: f64,
    labeled_docs: usize,
    unlabeled_docs: usize,
    validation_docs: usize,
    test_docs: usize,
    beliefs: Vec<BeliefRecord<'a>>,
}

fn history_tsv(model: &TrainedModel) -> String {
    let mut s = String::from("epoch\tce\tgm\tkl\tqg\ttotal\tval_f1\n");
    for h in &model.history {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            h.epoch, h.loss.ce, h.loss.gm, h.loss.kl, h.loss.qg, h.loss.total, h.val_f1
        ));
    }
    s
}

/// Stages the model bundle files under `dir`.
fn stage_bundle(
    staged: &mut Staged,
    dir: &Path,
    model: &TrainedModel,
    lfs: &[LabelingFunction],
    split: &CorpusSplit,
    corpus: &Corpus,
) -> Result<()> {
    staged.add_json(dir.join("theta.json"), &ThetaSnapshot::capture(&model.theta, &model.lf_ids, &model.classes))?;
    staged.add_json(dir.join("phi.json"), &PhiSnapshot::capture(&model.phi, &model.classes))?;
    staged.add(dir.join("lfs.json"), suite_to_json(lfs, &model.classes)?);
    staged.add(dir.join("config.txt"), model.config.to_flat());
    staged.add(dir.join("history.tsv"), history_tsv(model));
    staged.add_json(dir.join("split.json"), &split.to_manifest(corpus))?;
    let summary = TrainSummary {
        epochs: model.history.len(),
        best_epoch: model.best_epoch,
        best_val_f1: model.history.get(model.best_epoch).map_or(0.0, |h| h.val_f1),
        labeled_docs: split.labeled_docs.len(),
        unlabeled_docs: split.unlabeled_docs.len(),
        validation_docs: split.validation_docs.len(),
        test_docs: split.test_docs.len(),
        beliefs: model
            .lf_ids
            .iter()
            .zip(model.beliefs.values())
            .map(|(id, &q)| BeliefRecord { id, q })
            .collect(),
    };
    staged.add_json(dir.join("summary.json"), &summary)
}

struct Prepared {
    matrix: LabelMatrix,
    split: CorpusSplit,
    features: Vec<FeatureVector>,
}

fn prepare(corpus: &Corpus, lfs: &[LabelingFunction], matrix: Option<LabelMatrix>, split: &SplitArgs, cfg: &TrainConfig) -> Result<Prepared> {
    let params = cfg.context()?;
    let matrix = match matrix {
        Some(m) => {
            check_matrix(&m, lfs, corpus)?;
            m
        }
        None => build_label_matrix(lfs, corpus, &params)?,
    };
    let split = make_split(corpus, split, cfg.seed)?;
    let features = cfg.featurizer()?.featurize_corpus(corpus, &params)?;
    Ok(Prepared { matrix, split, features })
}

fn fit(corpus: &Corpus, p: &Prepared, cfg: &TrainConfig) -> Result<TrainedModel> {
    let labels = p.split.training_labels(&corpus.gold_labels());
    Ok(train(
        &TrainingData {
            features: &p.features,
            matrix: &p.matrix,
            labels: &labels,
            split: &p.split,
        },
        cfg,
    )?)
}

fn describe(model: &TrainedModel) -> String {
    format!(
        "trained {} epochs, best epoch {} (validation macro-F1 {:.4})",
        model.history.len(),
        model.best_epoch,
        model.history.get(model.best_epoch).map_or(0.0, |h| h.val_f1)
    )
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    require_file(&args.corpus)?;
    require_file(&args.lfs)?;
    if let Some(p) = &args.matrix {
        require_file(p)?;
    }
    if let Some(p) = &args.split.split {
        require_file(p)?;
    }
    let cfg = train_config(cli, &args.overrides, args.supervised_only)?;
    let corpus = load_corpus(&args.corpus)?;
    let lfs = load_suite(&args.lfs, &corpus)?;
    let matrix = args.matrix.as_deref().map(load_matrix).transpose()?;
    let prepared = prepare(&corpus, &lfs, matrix, &args.split, &cfg)?;
    let model = fit(&corpus, &prepared, &cfg)?;

    let dir = args.output.clone().unwrap_or_else(|| cli.out_dir.join("model"));
    let mut staged = Staged::default();
    stage_bundle(&mut staged, &dir, &model, &lfs, &prepared.split, &corpus)?;
    let mut m = Manifest::new("train");
    m.input(&args.corpus)?;
    m.input(&args.lfs)?;
    for p in [&args.matrix, &args.split.split].into_iter().flatten() {
        m.input(p)?;
    }
    m.seed = Some(cfg.seed);
    m.config(cfg.entries());
    m.stage(&mut staged, &dir, dir.join("manifest.json"))?;
    staged.commit()?;
    say(cli, describe(&model));
    Ok(())
}

/// A model bundle read back from disk.
struct Bundle {
    phi: PhiParams,
    theta: ThetaParams,
    lfs: Vec<LabelingFunction>,
    config: TrainConfig,
    split: SplitManifest,
}

fn load_bundle(dir: &Path, corpus: &Corpus) -> Result<Bundle> {
    if !dir.is_dir() {
        return Err(io::Error::new(io::ErrorKind::NotFound, format!("{}: no such model directory", dir.display())).into());
    }
    let phi_snap: PhiSnapshot = read_json(&dir.join("phi.json"))?;
    let phi = phi_snap.restore(&corpus.classes).context("phi.json")?;
    let lfs = load_suite(&dir.join("lfs.json"), corpus)?;
    let theta_snap: ThetaSnapshot = read_json(&dir.join("theta.json"))?;
    let refs: Vec<(String, usize)> = lfs.iter().map(|l| (l.id.clone(), l.class)).collect();
    let theta = theta_snap.restore(&refs, &corpus.classes).context("theta.json")?;
    let mut config = TrainConfig::default();
    apply_overrides(&mut config, Some(&dir.join("config.txt")), &[])?;
    let split: SplitManifest = read_json(&dir.join("split.json"))?;
    Ok(Bundle {
        phi,
        theta,
        lfs,
        config,
        split,
    })
}

#[derive(Serialize, Deserialize)]
struct PredictionsHeader {
    predictions: bool,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    doc: String,
    token: usize,
    label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    probs: Vec<f64>,
}

fn part_rows(split: &CorpusSplit, part: &str, n: usize) -> Result<Vec<usize>> {
    Ok(match part {
        "all" => (0..n).collect(),
        "labeled" => split.labeled.clone(),
        "unlabeled" => split.unlabeled.clone(),
        "validation" => split.validation.clone(),
        "test" => split.test.clone(),
        other => bail!("unknown part `{other}`; expected all, labeled, unlabeled, validation or test"),
    })
}

struct Predictions {
    classes: Vec<String>,
    rows: Vec<(RowKey, usize, Vec<f64>)>,
}

impl Predictions {
    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&PredictionsHeader {
            predictions: true,
            classes: self.classes.clone(),
        })?;
        out.push(b'\n');
        for (key, label, probs) in &self.rows {
            serde_json::to_writer(
                &mut out,
                &PredictionRow {
                    doc: key.doc.clone(),
                    token: key.token,
                    label: self.classes[label - 1].clone(),
                    probs: probs.clone(),
                },
            )?;
            out.push(b'\n');
        }
        Ok(out)
    }
}

fn predict_rows(
    corpus: &Corpus,
    features: &[FeatureVector],
    phi: &PhiParams,
    fused: Option<(&ThetaParams, &LabelMatrix)>,
    rows: &[usize],
) -> Result<Predictions> {
    let instances = corpus.instances();
    let mut out = Vec::with_capacity(rows.len());
    for &i in rows {
        let mut dist = forward(phi, &features[i])?;
        if let Some((theta, matrix)) = fused {
            let l = matrix.row(i);
            if l.iter().any(|&v| v != 0) {
                dist = dist.average(&posterior(theta, l));
            }
        }
        let r = instances[i];
        out.push((
            RowKey {
                doc: corpus.documents[r.doc].doc_id.clone(),
                token: r.token,
            },
            dist.argmax(),
            dist.probs().to_vec(),
        ));
    }
    Ok(Predictions {
        classes: corpus.classes.names().to_vec(),
        rows: out,
    })
}

fn cmd_predict(cli: &Cli, model: &Path, corpus_path: &Path, part: &str, fuse: bool, output: Option<&Path>) -> Result<()> {
    require_file(corpus_path)?;
    let corpus = load_corpus(corpus_path)?;
    let bundle = load_bundle(model, &corpus)?;
    let params = bundle.config.context()?;
    let split = CorpusSplit::from_manifest(&bundle.split, &corpus).context("bundle split does not fit this corpus");
    let rows = if part == "all" {
        (0..corpus.n_tokens()).collect()
    } else {
        part_rows(&split?, part, corpus.n_tokens())?
    };
    let features = bundle.config.featurizer()?.featurize_corpus(&corpus, &params)?;
    let matrix = if fuse {
        Some(build_label_matrix(&bundle.lfs, &corpus, &params)?)
    } else {
        None
    };
    let preds = predict_rows(
        &corpus,
        &features,
        &bundle.phi,
        matrix.as_ref().map(|m| (&bundle.theta, m)),
        &rows,
    )?;
    let out = output.map_or_else(|| cli.out_dir.join("predictions.jsonl"), Path::to_path_buf);
    let mut staged = Staged::default();
    staged.add(&out, preds.to_bytes()?);
    let mut m = Manifest::new("predict");
    m.input(corpus_path)?;
    for f in ["phi.json", "theta.json", "lfs.json", "config.txt", "split.json"] {
        m.input(&model.join(f))?;
    }
    m.config(vec![("part", part.to_string()), ("fuse", fuse.to_string())]);
    let base = out.parent().unwrap_or(Path::new("")).to_path_buf();
    m.stage(&mut staged, &base, manifest_beside(&out))?;
    staged.commit()?;
    say(cli, format!("{} predictions", preds.rows.len()));
    Ok(())
}

/// Labels keyed by (doc id, token index), with the class list they use.
struct LabelSet {
    classes: Vec<String>,
    order: Vec<(String, usize)>,
    labels: HashMap<(String, usize), usize>,
}

fn load_labels(path: &Path) -> Result<LabelSet> {
    require_file(path)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first)?;
    let header: serde_json::Value =
        serde_json::from_str(first.trim()).with_context(|| format!("{}: line 1 is not JSON", path.display()))?;
    if header.get("predictions").is_none() {
        let corpus = load_corpus(path)?;
        let mut order = Vec::new();
        let mut labels = HashMap::new();
        for r in corpus.instances() {
            let d = &corpus.documents[r.doc];
            if let Some(g) = d.tokens[r.token].gold {
                let key = (d.doc_id.clone(), r.token);
                order.push(key.clone());
                labels.insert(key, g);
            }
        }
        return Ok(LabelSet {
            classes: corpus.classes.names().to_vec(),
            order,
            labels,
        });
    }
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let head: PredictionsHeader = serde_json::from_str(&lines.next().transpose()?.unwrap_or_default())?;
    let mut order = Vec::new();
    let mut labels = HashMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 2))?;
        let Some(k) = head.classes.iter().position(|c| *c == row.label) else {
            bail!("{}: line {}: unknown class `{}`", path.display(), i + 2, row.label);
        };
        let key = (row.doc, row.token);
        if labels.insert(key.clone(), k + 1).is_some() {
            bail!("{}: line {}: duplicate row ({}, {})", path.display(), i + 2, key.0, key.1);
        }
        order.push(key);
    }
    Ok(LabelSet {
        classes: head.classes,
        order,
        labels,
    })
}

/// Scores `pred` on its rows against `gold`.
fn score_against(gold: &LabelSet, pred: &LabelSet) -> Result<EvalReport> {
    if gold.classes != pred.classes {
        bail!("gold and predictions use different class lists");
    }
    let mut g = Vec::with_capacity(pred.order.len());
    let mut p = Vec::with_capacity(pred.order.len());
    for key in &pred.order {
        let Some(&gl) = gold.labels.get(key) else {
            bail!("no gold label for ({}, {})", key.0, key.1);
        };
        g.push(gl);
        p.push(pred.labels[key]);
    }
    Ok(score(&g, &p, &weaklayout::document::ClassVocab::new(gold.classes.clone())?)?)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    report: &'a EvalReport,
    masked: Vec<String>,
    masked_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<&'a DeltaTable>,
}

fn render_eval(report: &EvalReport, mask: &[String], delta: Option<&DeltaTable>) -> Result<(String, Vec<u8>)> {
    for c in mask {
        if !report.classes.contains(c) {
            bail!("cannot mask unknown class `{c}`");
        }
    }
    let refs: Vec<&str> = mask.iter().map(String::as_str).collect();
    let masked = report.macro_f1_excluding(&refs);
    let mut text = report.to_string();
    if !mask.is_empty() {
        text.push_str(&format!("\nmacro-F1 without {}: {:.4}", mask.join(","), masked));
    }
    if let Some(d) = delta {
        text.push_str(&format!("\n\n{d}"));
    }
    text.push('\n');
    let mut json = serde_json::to_vec_pretty(&EvalOutput {
        report,
        masked: mask.to_vec(),
        masked_macro_f1: masked,
        delta,
    })?;
    json.push(b'\n');
    Ok((text, json))
}

fn cmd_eval(cli: &Cli, gold: &Path, pred: &Path, baseline: Option<&Path>, mask: &[String], output: Option<&Path>) -> Result<()> {
    for p in [Some(gold), Some(pred), baseline].into_iter().flatten() {
        require_file(p)?;
    }
    let gold_set = load_labels(gold)?;
    let report = score_against(&gold_set, &load_labels(pred)?)?;
    let delta = match baseline {
        Some(b) => Some(compare(&score_against(&gold_set, &load_labels(b)?)?, &report)?),
        None => None,
    };
    let (text, json) = render_eval(&report, mask, delta.as_ref())?;
    let out = output.map_or_else(|| cli.out_dir.join("eval.json"), Path::to_path_buf);
    let mut staged = Staged::default();
    staged.add(&out, json);
    let mut m = Manifest::new("eval");
    for p in [Some(gold), Some(pred), baseline].into_iter().flatten() {
        m.input(p)?;
    }
    let base = out.parent().unwrap_or(Path::new("")).to_path_buf();
    m.stage(&mut staged, &base, manifest_beside(&out))?;
    staged.commit()?;
    if !cli.quiet {
        print!("{text}");
    }
    Ok(())
}

fn spec_inputs(m: &mut Manifest, args: &SynthArgs) -> Result<()> {
    if let Some(p) = &args.spec {
        m.input(p)?;
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let spec = synth_spec(cli, args)?;
    let cfg = train_config(cli, &Overrides::default(), false)?;
    let out = generate(&spec, &cfg.context()?)?;
    let dir = &cli.out_dir;
    let mut staged = Staged::default();
    staged.add(dir.join("corpus.jsonl"), corpus_bytes(&out.corpus)?);
    staged.add(dir.join("lfs.json"), suite_to_json(&out.lfs, &out.corpus.classes)?);
    staged.add_json(dir.join("calibration.json"), &out.calibration)?;
    staged.add(dir.join("spec.txt"), spec.to_flat());
    let mut m = Manifest::new("synth");
    spec_inputs(&mut m, args)?;
    m.seed = Some(spec.seed);
    m.config(spec.entries());
    m.stage(&mut staged, dir, dir.join("manifest.json"))?;
    staged.commit()?;
    say(cli, summary_line(&out.corpus));
    for c in &out.calibration {
        say(
            cli,
            format!(
                "{}: coverage {:.3} (target {:.3}), precision {:.3} (target {:.3})",
                c.id, c.coverage, c.target_coverage, c.precision, c.target_precision
            ),
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepOutput<'a> {
    plan: &'a SweepPlan,
    cells: &'a [weaklayout::synth::SweepCell],
    summary: Vec<weaklayout::synth::SweepSummary>,
}

fn cmd_sweep(cli: &Cli, args: &SynthArgs, overrides: &Overrides, plan: SweepPlan) -> Result<()> {
    let spec = synth_spec(cli, args)?;
    let cfg = train_config(cli, overrides, false)?;
    plan.validate()?;
    let out = generate(&spec, &cfg.context()?)?;
    let result = run_sweep(&out.corpus, &out.lfs, &plan, &cfg)?;
    let dir = &cli.out_dir;
    let mut staged = Staged::default();
    staged.add_json(
        dir.join("sweep.json"),
        &SweepOutput {
            plan: &plan,
            cells: &result.cells,
            summary: result.summary(),
        },
    )?;
    staged.add(dir.join("sweep.txt"), format!("{result}\n"));
    let mut m = Manifest::new("sweep");
    spec_inputs(&mut m, args)?;
    if let Some(p) = &cli.config {
        m.input(p)?;
    }
    m.seed = Some(spec.seed);
    m.config(spec.entries());
    m.config(cfg.entries());
    m.config(plan.entries());
    m.stage(&mut staged, dir, dir.join("manifest.json"))?;
    staged.commit()?;
    if !cli.quiet {
        println!("{result}");
    }
    Ok(())
}

enum Source {
    Files(PathBuf, PathBuf),
    Synth(SynthArgs),
}

fn run_all(
    cli: &Cli,
    source: Source,
    split: &SplitArgs,
    overrides: &Overrides,
    supervised_only: bool,
    compare_baseline: bool,
) -> Result<()> {
    if let Source::Files(c, l) = &source {
        require_file(c)?;
        require_file(l)?;
    }
    if let Some(p) = &split.split {
        require_file(p)?;
    }
    let cfg = train_config(cli, overrides, supervised_only)?;
    let mut m = Manifest::new("run-all");
    let (corpus, lfs) = match &source {
        Source::Files(c, l) => {
            m.input(c)?;
            m.input(l)?;
            let corpus = load_corpus(c)?;
            let lfs = load_suite(l, &corpus)?;
            (corpus, lfs)
        }
        Source::Synth(args) => {
            let spec = synth_spec(cli, args)?;
            spec_inputs(&mut m, args)?;
            m.config(spec.entries());
            let out = generate(&spec, &cfg.context()?)?;
            (out.corpus, out.lfs)
        }
    };
    say(cli, summary_line(&corpus));

    let prepared = prepare(&corpus, &lfs, None, split, &cfg)?;
    let gold = corpus.gold_labels();
    let lf_diag = diagnostics(&prepared.matrix, Some(&gold))?;
    for id in lf_diag.silent_lfs() {
        eprintln!("warning: LF `{id}` never fires");
    }
    let model = fit(&corpus, &prepared, &cfg)?;
    say(cli, describe(&model));

    let test_rows = &prepared.split.test;
    let preds = predict_rows(&corpus, &prepared.features, &model.phi, None, test_rows)?;
    let gold_set = labels_of(&corpus, &preds);
    let report = score_against(&gold_set, &to_label_set(&preds))?;
    let delta = if compare_baseline && !cfg.is_supervised_only() {
        let base_cfg = cfg.clone().supervised_only();
        let base = fit(&corpus, &prepared, &base_cfg)?;
        let base_preds = predict_rows(&corpus, &prepared.features, &base.phi, None, test_rows)?;
        Some(compare(&score_against(&gold_set, &to_label_set(&base_preds))?, &report)?)
    } else {
        None
    };
    let (text, json) = render_eval(&report, &[], delta.as_ref())?;

    let dir = &cli.out_dir;
    let mut staged = Staged::default();
    staged.add(dir.join("corpus.jsonl"), corpus_bytes(&corpus)?);
    staged.add(dir.join("lfs.json"), suite_to_json(&lfs, &corpus.classes)?);
    staged.add(dir.join("matrix.jsonl"), matrix_bytes(&prepared.matrix)?);
    staged.add(dir.join("lf_report.txt"), format!("{lf_diag}\n"));
    stage_bundle(&mut staged, &dir.join("model"), &model, &lfs, &prepared.split, &corpus)?;
    staged.add(dir.join("predictions.jsonl"), preds.to_bytes()?);
    staged.add(dir.join("eval.txt"), text.clone());
    staged.add(dir.join("eval.json"), json);
    m.seed = Some(cfg.seed);
    m.config(cfg.entries());
    m.stage(&mut staged, dir, dir.join("manifest.json"))?;
    staged.commit()?;
    if !cli.quiet {
        print!("{text}");
    }
    Ok(())
}

fn to_label_set(p: &Predictions) -> LabelSet {
    let order: Vec<(String, usize)> = p.rows.iter().map(|(k, _, _)| (k.doc.clone(), k.token)).collect();
    let labels = p
        .rows
        .iter()
        .map(|(k, l, _)| ((k.doc.clone(), k.token), *l))
        .collect();
    LabelSet {
        classes: p.classes.clone(),
        order,
        labels,
    }
}

/// Gold labels of the predicted rows.
fn labels_of(corpus: &Corpus, p: &Predictions) -> LabelSet {
    let gold = gold_map(corpus);
    let mut order = Vec::new();
    let mut labels = HashMap::new();
    for (k, _, _) in &p.rows {
        let key = (k.doc.clone(), k.token);
        if let Some(Some(g)) = gold.get(&key) {
            order.push(key.clone());
            labels.insert(key, *g);
        }
    }
    LabelSet {
        classes: corpus.classes.names().to_vec(),
        order,
        labels,
    }
}
