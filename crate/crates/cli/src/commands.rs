use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::info;

use extsumm::corpus::{
    build_dataset, corpus_stats, load_corpus, load_labeled_corpus, read_jsonl, synth_corpus, write_jsonl,
    BuildOptions, Dataset, Instance, ProductRecord, Split, SynthOptions,
};
use extsumm::decoder::{generate_all, GenerationRecord};
use extsumm::labeling::label_sentences;
use extsumm::metrics::{evaluate, export_heatmap};
use extsumm::model::{Model, ModelConfig};
use extsumm::trainer::{train, vocab_from_instances};

use crate::config::RunConfig;

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn write_records<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, |w| Ok(write_jsonl(w, items)?))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn write_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    for split in Split::ALL {
        let records: Vec<_> = ds.split(split).iter().map(Instance::to_record).collect();
        write_records(&cfg.paths.split_file(split), &records)?;
    }
    let stats = corpus_stats(&ds.train, &ds.dev, &ds.test);
    write_json(&cfg.paths.data_dir.join("stats.json"), &stats)?;
    info!(
        "wrote {} train / {} dev / {} test instances to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

pub fn build_corpus(cfg: &RunConfig) -> Result<()> {
    let products_path = cfg
        .paths
        .products
        .as_deref()
        .ok_or_else(|| anyhow!("invalid config key `paths.products`: required by build-corpus"))?;
    require(products_path, "product file")?;
    let schema = cfg.category_schema()?;
    let products: Vec<ProductRecord> = read_jsonl(products_path)?;
    let opts = BuildOptions {
        min_fragment_chars: cfg.build.min_fragment_chars,
        max_fragment_chars: cfg.build.max_fragment_chars,
        limits: cfg.limits,
        ratios: cfg.ratios,
        skip_empty: cfg.build.skip_empty,
        exec: cfg.execution,
    };
    let ds = build_dataset(&products, &schema, cfg.seed, &opts)?;
    write_dataset(cfg, &ds)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let schema = cfg.category_schema()?;
    let opts = SynthOptions {
        ratios: cfg.ratios,
        separator: cfg.limits.separator,
        max_sentences_per_aspect: cfg.synth.max_sentences_per_aspect,
    };
    let corpus = synth_corpus(cfg.seed, cfg.synth.products, &schema, &opts);
    write_records(&cfg.paths.data_dir.join("products.jsonl"), &corpus.products)?;
    write_dataset(cfg, &corpus.dataset())
}

pub fn label(cfg: &RunConfig) -> Result<()> {
    let schema = cfg.category_schema()?;
    let present: Vec<Split> = Split::ALL
        .into_iter()
        .filter(|s| cfg.paths.split_file(*s).is_file())
        .collect();
    if present.is_empty() {
        bail!("no split files in {}", cfg.paths.data_dir.display());
    }
    for split in present {
        let instances = load_corpus(&cfg.paths.split_file(split), split, &schema, &cfg.limits)?;
        let mut records = Vec::with_capacity(instances.len());
        let mut positives = 0;
        for inst in &instances {
            let set = label_sentences(&inst.sentences, &inst.summary, cfg.label.threshold)?;
            positives += set.positives().count();
            records.push(inst.to_record().with_labels(&set));
        }
        write_records(&cfg.paths.labeled_file(split), &records)?;
        info!("{split}: labeled {} instances, {positives} positive sentences", records.len());
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let train_path = cfg.paths.labeled_file(Split::Train);
    let dev_path = cfg.paths.split_file(Split::Dev);
    require(&train_path, "labeled training file (run `label` first)")?;
    require(&dev_path, "dev file")?;
    let schema = cfg.category_schema()?;

    let labeled = load_labeled_corpus(&train_path, Split::Train, &schema, &cfg.limits)?;
    let mut train_set = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    for (i, (inst, set)) in labeled.into_iter().enumerate() {
        let set = set.ok_or_else(|| anyhow!("{}: line {} has no labels", train_path.display(), i + 1))?;
        train_set.push(inst);
        labels.push(set);
    }
    let dev = load_corpus(&dev_path, Split::Dev, &schema, &cfg.limits)?;

    let vocab = vocab_from_instances(&train_set, cfg.limits.separator);
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        num_aspects: schema.len(),
        ..cfg.model.clone()
    };
    let mut model = Model::new(model_cfg, vocab, schema, cfg.limits.separator)?;
    if let Some(dir) = cfg.paths.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let report = train(&mut model, &train_set, &labels, &dev, &cfg.train, Some(&cfg.paths.checkpoint))?;
    write_json(&cfg.paths.train_report, &report)?;
    info!(
        "best dev perplexity {:.4} at step {}; checkpoint {}",
        report.best_perplexity,
        report.best_step,
        cfg.paths.checkpoint.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    require(&cfg.paths.checkpoint, "checkpoint")?;
    Ok(Model::load(&cfg.paths.checkpoint)?)
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let input = cfg.paths.split_file(cfg.split);
    require(&input, "input file")?;
    let model = load_model(cfg)?;
    let instances = load_corpus(&input, cfg.split, model.schema(), &cfg.limits)?;
    let records = generate_all(&model, &instances, &cfg.decode, cfg.mode, cfg.execution)?;
    write_records(&cfg.paths.generations, &records)?;
    info!("wrote {} generations to {}", records.len(), cfg.paths.generations.display());
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let refs_path = cfg.paths.split_file(cfg.split);
    require(&cfg.paths.generations, "generations file")?;
    require(&refs_path, "reference file")?;
    let schema = cfg.category_schema()?;
    let generations: Vec<GenerationRecord> = read_jsonl(&cfg.paths.generations)?;
    let references = load_corpus(&refs_path, cfg.split, &schema, &cfg.limits)?;
    let report = evaluate(&generations, &references, cfg.diversity, cfg.execution)?;
    write_json(&cfg.paths.report, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn heatmap(cfg: &RunConfig) -> Result<()> {
    let input = cfg.paths.split_file(cfg.split);
    require(&input, "input file")?;
    let model = load_model(cfg)?;
    let instances = load_corpus(&input, cfg.split, model.schema(), &cfg.limits)?;
    let inst = match &cfg.heatmap.product_id {
        Some(id) => instances
            .iter()
            .find(|i| &i.product_id == id)
            .ok_or_else(|| anyhow!("invalid config key `heatmap.product_id`: {id:?} not in {}", input.display()))?,
        None => instances
            .first()
            .ok_or_else(|| anyhow!("{} is empty", input.display()))?,
    };
    let aspect = match &cfg.heatmap.aspect {
        Some(name) => model
            .schema()
            .aspect(name)
            .ok_or_else(|| anyhow!("invalid config key `heatmap.aspect`: {name:?} not in the model's schema"))?
            .clone(),
        None => inst.aspect.clone(),
    };
    let map = export_heatmap(&model, inst, &aspect)?;
    write_atomic(&cfg.paths.heatmap, |w| Ok(map.write_csv(w)?))?;
    info!(
        "heat map of {} / {} ({} sentences) written to {}",
        map.product_id,
        map.aspect,
        map.rows.len(),
        cfg.paths.heatmap.display()
    );
    Ok(())
}
