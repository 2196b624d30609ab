use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cfdebias::causal::{Checkpoint, Mode};
use cfdebias::config::KvConfig;
use cfdebias::dataset::{
    load_dataset, read_canonical, to_canonical_jsonl, FieldMap, KeyMode, PriorTable, QASample,
    Split,
};
use cfdebias::encoders::ImageSource;
use cfdebias::evaluator::{self, EvalReport, TypeMapping};
use cfdebias::resplit;
use cfdebias::synth::{self, SynthConfig};
use cfdebias::tensor::run_suite;
use cfdebias::trainer::{self, metrics_csv, TrainConfig};
use cfdebias::Error;

use crate::run::{ensure_dir, manifest_beside, path_of, required, Run};

const MANIFEST: &str = "run_manifest.json";

fn field_map(spec: &str, run: &mut Run) -> Result<FieldMap> {
    if let Some(m) = FieldMap::by_name(spec) {
        return Ok(m);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "`{spec}` is neither a field-map preset (canonical, slake, radvqa) nor a file"
        ))
        .into());
    }
    let cfg = KvConfig::load(path)?;
    let map = FieldMap::from_config(&cfg)?;
    cfg.reject_unknown()?;
    run.inputs.add(path)?;
    Ok(map)
}

/// `SPLIT=PATH` or bare `PATH`.
fn parse_input(item: &str) -> Result<(Option<Split>, PathBuf)> {
    match item.split_once('=') {
        Some((split, path)) => Ok((Some(split.parse()?), PathBuf::from(path))),
        None => Ok((None, PathBuf::from(item))),
    }
}

pub fn ingest(cfg: &KvConfig, out: &Path) -> Result<()> {
    let mut run = Run::new("ingest", cfg);
    let inputs = required(cfg, "ingest.input", "--input")?.to_string();
    let fields = cfg
        .get_str("ingest.fields")
        .unwrap_or("canonical")
        .to_string();
    let inline = cfg.section("fields");
    cfg.reject_unknown()?;
    let map = if inline.is_empty() {
        field_map(&fields, &mut run)?
    } else {
        FieldMap::from_config(&KvConfig::from_pairs(inline))?
    };

    let mut samples: Vec<QASample> = Vec::new();
    let mut skipped = String::from("file,record,reason\n");
    for item in inputs.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (split, path) = parse_input(item)?;
        run.inputs.add(&path)?;
        let report = load_dataset(&path, &map)?;
        for (i, reason) in &report.skipped {
            let _ = writeln!(
                skipped,
                "{},{},{}",
                path.display(),
                i,
                reason.replace(',', ";")
            );
        }
        eprintln!(
            "{}: {} records kept, {} skipped",
            path.display(),
            report.samples.len(),
            report.skip_count()
        );
        samples.extend(report.samples.into_iter().map(|s| match split {
            Some(sp) => s.with_split(sp),
            None => s,
        }));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = samples.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::Parse {
            context: "ingest".into(),
            message: format!("duplicate sample id `{}`", dup.id),
        }
        .into());
    }

    ensure_dir(out)?;
    run.emit(
        &out.join("data.jsonl"),
        to_canonical_jsonl(&samples).as_bytes(),
    )?;
    run.emit(&out.join("skipped.csv"), skipped.as_bytes())?;
    run.write_manifest(&out.join(MANIFEST))?;
    println!(
        "{} samples written to {}",
        samples.len(),
        out.join("data.jsonl").display()
    );
    Ok(())
}

pub fn resplit(cfg: &KvConfig, out: &Path) -> Result<()> {
    let mut run = Run::new("resplit", cfg);
    let input = PathBuf::from(required(cfg, "resplit.input", "--input")?);
    let fraction: f64 = cfg.get_or("resplit.test_fraction", 0.3)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    cfg.reject_unknown()?;
    run.seed = Some(seed);
    run.config
        .insert("resplit.test_fraction".into(), fraction.to_string());
    run.inputs.add(&input)?;

    let samples = read_canonical(&input)?;
    let (result, report) = resplit::resplit(&samples, fraction, seed)?;
    let (train, test) = result.apply(&samples);

    ensure_dir(out)?;
    run.emit(
        &out.join("train.jsonl"),
        to_canonical_jsonl(&train).as_bytes(),
    )?;
    run.emit(
        &out.join("test.jsonl"),
        to_canonical_jsonl(&test).as_bytes(),
    )?;
    let stats = serde_json::to_string_pretty(&result.stats)? + "\n";
    run.emit(&out.join("stats.json"), stats.as_bytes())?;
    run.emit(&out.join("report.csv"), report.to_csv().as_bytes())?;
    run.emit(&out.join("report.svg"), report.to_svg().as_bytes())?;
    run.write_manifest(&out.join(MANIFEST))?;
    let st = &result.stats;
    println!(
        "train {} / test {} samples; test fraction {:.3} (target {:.3}); {} groups moved by coverage repair",
        train.len(),
        test.len(),
        st.test_fraction_achieved,
        st.test_fraction_target,
        st.repaired_group_count
    );
    Ok(())
}

pub fn synth(cfg: &KvConfig, out: &Path) -> Result<()> {
    let sc = SynthConfig::from_config(cfg)?;
    cfg.reject_unknown()?;
    let mut run = Run::new("synth", &sc.to_config());
    run.seed = Some(sc.seed);
    let corpus = synth::generate(&sc)?;

    ensure_dir(out)?;
    run.emit(
        &out.join("train.jsonl"),
        to_canonical_jsonl(&corpus.train.samples).as_bytes(),
    )?;
    run.emit(
        &out.join("test.jsonl"),
        to_canonical_jsonl(&corpus.test.samples).as_bytes(),
    )?;
    let mut features = corpus.train.feature_jsonl();
    features.push_str(&corpus.test.feature_jsonl());
    run.emit(&out.join("features.jsonl"), features.as_bytes())?;
    run.write_manifest(&out.join(MANIFEST))?;
    println!(
        "{} train / {} test samples; snr {:.4}, image-only Bayes accuracy {:.3}",
        sc.n_train,
        sc.n_test,
        sc.snr,
        sc.image_bayes_accuracy()
    );
    Ok(())
}

fn image_source(
    features: Option<&Path>,
    root: Option<&Path>,
    run: &mut Run,
) -> Result<ImageSource> {
    let mut src = ImageSource::new();
    if let Some(f) = features {
        src.load_features(f)?;
        run.inputs.add(f)?;
    }
    if let Some(r) = root {
        src = src.with_pixel_root(r);
    }
    Ok(src)
}

pub fn train(cfg: &KvConfig, out: &Path) -> Result<()> {
    let tc = TrainConfig::from_config(cfg)?;
    cfg.reject_unknown()?;
    let data = tc.train_data.clone().ok_or_else(|| {
        Error::Config("missing `train.data` (set it in the config or pass --data)".into())
    })?;
    let mut run = Run::new("train", &tc.to_config());
    run.seed = Some(tc.seed);
    run.inputs.add(&data)?;
    let images = image_source(tc.features.as_deref(), tc.image_root.as_deref(), &mut run)?;
    let samples: Vec<QASample> = read_canonical(&data)?
        .into_iter()
        .filter(|s| s.split != Split::Test)
        .collect();

    let outcome = trainer::train(&tc, &samples, &images)?;
    ensure_dir(out)?;
    outcome.checkpoint.save(out)?;
    for f in [
        "manifest.txt",
        "params.bin",
        "question_vocab.txt",
        "answer_vocab.txt",
    ] {
        run.outputs.push(out.join(f));
    }
    run.emit(
        &out.join("metrics.csv"),
        metrics_csv(&outcome.metrics).as_bytes(),
    )?;
    run.write_manifest(&out.join(MANIFEST))?;
    if let Some(m) = outcome.metrics.last() {
        println!(
            "trained {} samples for {} epochs: final loss {:.4}, biased train accuracy {:.3}",
            samples.len(),
            m.epoch,
            m.loss,
            m.acc_biased
        );
    }
    Ok(())
}

/// Samples to score: `test`, `train`, `all`, or `auto` (the test split when
/// the file labels one, otherwise everything).
fn select(samples: Vec<QASample>, which: &str) -> Result<Vec<QASample>> {
    let keep = |sp: Split| {
        samples
            .iter()
            .filter(|s| s.split == sp)
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok(match which {
        "all" => samples,
        "test" => keep(Split::Test),
        "train" => keep(Split::Train),
        "auto" if samples.iter().any(|s| s.split == Split::Test) => keep(Split::Test),
        "auto" => samples,
        other => {
            return Err(Error::Config(format!(
                "eval.split must be auto, all, train or test, got `{other}`"
            ))
            .into())
        }
    })
}

fn type_mapping(cfg: &KvConfig, run: &mut Run) -> Result<TypeMapping> {
    match path_of(cfg, "eval.types") {
        Some(p) => {
            let tcfg = KvConfig::load(&p)?;
            let m = TypeMapping::from_config(&tcfg)?;
            tcfg.reject_unknown()?;
            run.inputs.add(&p)?;
            Ok(m)
        }
        None => Ok(TypeMapping::from_config(cfg)?),
    }
}

pub fn eval(cfg: &KvConfig, out: &Path) -> Result<()> {
    let mut run = Run::new("eval", cfg);
    let data = PathBuf::from(required(cfg, "eval.data", "--data")?);
    let mode = cfg.get_str("eval.mode").unwrap_or("debiased").to_string();
    let which = cfg.get_str("eval.split").unwrap_or("auto").to_string();
    let dataset = cfg
        .get_str("eval.dataset")
        .map(str::to_string)
        .unwrap_or_else(|| {
            data.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    let mapping = type_mapping(cfg, &mut run)?;
    run.inputs.add(&data)?;
    let samples = select(read_canonical(&data)?, &which)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("no `{which}` samples in {}", data.display())).into());
    }

    let report = if mode == "prior_only" || mode == "prior" {
        let train_path = PathBuf::from(required(cfg, "eval.train", "--train")?);
        let key: KeyMode = cfg.get_or("eval.key", KeyMode::ExactQuestion)?;
        cfg.reject_unknown()?;
        run.inputs.add(&train_path)?;
        let train: Vec<QASample> = read_canonical(&train_path)?
            .into_iter()
            .filter(|s| s.split != Split::Test)
            .collect();
        evaluator::prior_only_baseline(&train, &samples, key, &mapping, &dataset)?
    } else {
        let mode: Mode = mode.parse()?;
        let ckpt = PathBuf::from(required(cfg, "eval.ckpt", "--ckpt")?);
        let features = path_of(cfg, "eval.features");
        let root = path_of(cfg, "eval.image_root");
        cfg.reject_unknown()?;
        run.inputs.add(&ckpt)?;
        let images = image_source(features.as_deref(), root.as_deref(), &mut run)?;
        let ck = Checkpoint::load(&ckpt)?;
        evaluator::evaluate(&ck, &samples, &images, mode, &mapping, &dataset)?
    };

    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    run.emit(out, report.to_json().as_bytes())?;
    run.write_manifest(&manifest_beside(out))?;
    for (row, acc) in report.rows() {
        println!("{row:<10} {:>6} {:.4}", acc.count, acc.accuracy);
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(EvalReport::from_json(&text, &path.display().to_string())?)
}

pub fn compare(cfg: &KvConfig, out: &Path) -> Result<()> {
    let mut run = Run::new("compare", cfg);
    let biased = PathBuf::from(required(cfg, "compare.biased", "--biased")?);
    let debiased = PathBuf::from(required(cfg, "compare.debiased", "--debiased")?);
    cfg.reject_unknown()?;
    run.inputs.add(&biased)?;
    run.inputs.add(&debiased)?;
    let cmp = evaluator::compare(&read_report(&biased)?, &read_report(&debiased)?);

    ensure_dir(out)?;
    run.emit(&out.join("comparison.csv"), cmp.to_csv().as_bytes())?;
    let md = cmp.to_markdown();
    run.emit(&out.join("comparison.md"), md.as_bytes())?;
    run.emit(&out.join("comparison.json"), cmp.to_json().as_bytes())?;
    run.write_manifest(&out.join(MANIFEST))?;
    print!("{md}");
    Ok(())
}

pub fn explain(cfg: &KvConfig, out: &Path) -> Result<()> {
    let mut run = Run::new("explain", cfg);
    let ckpt = PathBuf::from(required(cfg, "explain.ckpt", "--ckpt")?);
    let data = PathBuf::from(required(cfg, "explain.data", "--data")?);
    let features = path_of(cfg, "explain.features");
    let root = path_of(cfg, "explain.image_root");
    let ids: Vec<String> = cfg
        .get_str("explain.ids")
        .map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();
    let top: usize = cfg.get_or("explain.top", 5)?;
    let limit: usize = cfg.get_or("explain.limit", 10)?;
    cfg.reject_unknown()?;
    run.inputs.add(&ckpt)?;
    run.inputs.add(&data)?;
    let images = image_source(features.as_deref(), root.as_deref(), &mut run)?;
    let ck = Checkpoint::load(&ckpt)?;
    let samples = read_canonical(&data)?;

    let chosen: Vec<&QASample> = if ids.is_empty() {
        samples.iter().take(limit).collect()
    } else {
        ids.iter()
            .map(|id| {
                samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("no sample with id `{id}`")))
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let mut text = String::new();
    for s in chosen {
        let e = evaluator::explain(&ck, s, &images, top)?;
        text.push_str(&serde_json::to_string(&e)?);
        text.push('\n');
        println!(
            "{}: biased `{}` -> debiased `{}` (truth `{}`)",
            e.id, e.biased_prediction, e.debiased_prediction, e.answer
        );
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    run.emit(out, text.as_bytes())?;
    run.write_manifest(&manifest_beside(out))?;
    Ok(())
}

pub fn audit(cfg: &KvConfig, out: &Path) -> Result<()> {
    let mut run = Run::new("audit", cfg);
    let data = PathBuf::from(required(cfg, "audit.data", "--data")?);
    let key: KeyMode = cfg.get_or("audit.key", KeyMode::ExactQuestion)?;
    let fields = cfg
        .get_str("audit.fields")
        .unwrap_or("canonical")
        .to_string();
    let top: usize = cfg.get_or("audit.top", 10)?;
    let split: Option<Split> = cfg.get("audit.split")?;
    cfg.reject_unknown()?;
    let map = field_map(&fields, &mut run)?;
    run.inputs.add(&data)?;
    let samples: Vec<QASample> = load_dataset(&data, &map)?
        .samples
        .into_iter()
        .map(|s| match split {
            Some(sp) => s.with_split(sp),
            None => s,
        })
        .collect();
    let table = PriorTable::build(&samples, key);

    ensure_dir(out)?;
    run.emit(&out.join("prior.csv"), table.to_csv().as_bytes())?;
    run.write_manifest(&out.join(MANIFEST))?;

    let mut rows: Vec<(usize, &str, Split, String, String)> = table
        .keys()
        .filter_map(|(k, sp)| {
            let (ans, d) = table.dominance(k, sp)?;
            Some((d.top + d.rest, k, sp, ans, d.to_string()))
        })
        .collect();
    rows.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    for (n, k, sp, ans, ratio) in rows.into_iter().take(top) {
        println!("{ratio:>9}  {n:>6}  {sp:<10} {ans:<12} {k}");
    }
    Ok(())
}

pub fn gradcheck(cfg: &KvConfig, out: Option<&Path>) -> Result<bool> {
    let seed: u64 = cfg.get_or("seed", 0)?;
    let cases: usize = cfg.get_or("gradcheck.cases", 120)?;
    cfg.reject_unknown()?;
    let report = run_suite(seed, cases)?;
    let passed = report.passed();
    println!(
        "gradcheck seed {seed}: {} networks, {} coordinates checked, {} kink probes skipped; max rel. error {:.3e} ({})",
        report.cases.len(),
        report.checked(),
        report.skipped_kinks(),
        report.max_rel_err(),
        if passed { "pass" } else { "FAIL" }
    );
    if let Some(w) = report.worst() {
        println!("worst: case {} ({})", w.index, w.network.name());
    }
    if let Some(out) = out {
        let mut run = Run::new("gradcheck", cfg);
        run.seed = Some(seed);
        let cases_json: Vec<serde_json::Value> = report
            .cases
            .iter()
            .map(|c| {
                serde_json::json!({
                    "index": c.index,
                    "network": c.network.name(),
                    "max_rel_err": c.report.max_rel_err,
                    "checked": c.report.checked,
                    "skipped_kinks": c.report.skipped_kinks,
                })
            })
            .collect();
        let body = serde_json::json!({
            "seed": seed,
            "max_rel_err": report.max_rel_err(),
            "passed": passed,
            "cases": cases_json,
        });
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        run.emit(
            out,
            (serde_json::to_string_pretty(&body)? + "\n").as_bytes(),
        )?;
        run.write_manifest(&manifest_beside(out))?;
    }
    Ok(passed)
}
