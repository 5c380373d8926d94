use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use rcor::data::{
    check_dimensions, parse_record, parse_record_raw, read_records, validate_record, write_records, Metric,
};
use rcor::embedding::{
    build_class_embeddings, localize, read_class_embeddings, read_embedding_records, write_class_embeddings,
    EmbeddingOptions,
};
use rcor::fusion::{run_pipeline, FullWeightMode, SelectionStrategy};
use rcor::metrics::{delta_report, mean_class_iou};
use rcor::prior::{fit_prior_from_records, run_pipeline_with_prior, PriorOrder, PriorSet, PriorTable};
use rcor::synth::{generate_world, Regime, WorldConfig};

use crate::failure::{self, create, lines, open, CliResult, Failure};
use crate::predictions::{read_predictions, tally_predictions, PredictionLine};

/// Lines handed to the thread pool at a time; output order is preserved.
const CHUNK: usize = 2048;

pub fn validate(manifest: &Path, records: &Path) -> CliResult {
    let manifest = failure::manifest(manifest)?;
    let mut out = create(None)?;
    let (mut n, mut with_errors, mut with_warnings) = (0usize, 0usize, 0usize);
    for item in lines(records)? {
        let (no, line) = item?;
        n += 1;
        match parse_record_raw(&line, no) {
            Ok(r) => {
                let report = validate_record(&r, &manifest);
                with_errors += report.has_errors() as usize;
                with_warnings += (!report.has_errors() && report.has_warnings()) as usize;
                write!(out, "{report}")?;
            }
            Err(e) => {
                with_errors += 1;
                writeln!(out, "line {no}: error: {e}")?;
            }
        }
    }
    writeln!(
        out,
        "{n} records: {with_errors} with errors, {with_warnings} with warnings only"
    )?;
    out.flush()?;
    if with_errors > 0 {
        return Err(Failure::contract(format!(
            "{with_errors} of {n} records failed validation"
        )));
    }
    Ok(())
}

pub fn fuse(
    manifest: &Path,
    records: &Path,
    strategy: SelectionStrategy,
    mode: FullWeightMode,
    prior: Option<(&[PriorTable], PriorOrder)>,
    out: Option<&Path>,
) -> CliResult {
    let manifest = failure::manifest(manifest)?;
    if let Some((tables, _)) = prior {
        if let Some(t) = tables.iter().find(|t| t.num_classes() != manifest.num_classes()) {
            return Err(Failure::contract(format!(
                "prior for `{}` has {} classes, manifest has {}",
                t.field_name,
                t.num_classes(),
                manifest.num_classes()
            )));
        }
    }
    let process = |no: usize, line: &str| -> CliResult<String> {
        let at_line = |e: rcor::Error| {
            let f = Failure::from(e);
            Failure {
                message: format!("line {no}: {}", f.message),
                ..f
            }
        };
        let r = parse_record(line, no).map_err(at_line)?;
        check_dimensions(&r, &manifest).map_err(at_line)?;
        let preds = match prior {
            None => run_pipeline(&r, strategy, mode),
            Some((tables, order)) => run_pipeline_with_prior(&r, strategy, mode, tables, order),
        }
        .map_err(at_line)?;
        Ok(PredictionLine::new(&r, &manifest, &preds).to_line())
    };

    let mut w = create(out)?;
    let mut input = lines(records)?;
    let mut chunk = Vec::with_capacity(CHUNK);
    let mut total = 0usize;
    loop {
        chunk.clear();
        for item in input.by_ref().take(CHUNK) {
            chunk.push(item?);
        }
        if chunk.is_empty() {
            break;
        }
        let done: Vec<CliResult<String>> = chunk.par_iter().map(|(no, line)| process(*no, line)).collect();
        for line in done {
            writeln!(w, "{}", line?)?;
        }
        total += chunk.len();
    }
    w.flush()?;
    log::info!("wrote predictions for {total} records ({strategy}, full weight {mode})");
    Ok(())
}

pub fn eval(predictions: &Path, manifest: &Path, metric: Option<Metric>, json: bool) -> CliResult {
    let manifest = failure::manifest(manifest)?;
    let metric = metric.unwrap_or(manifest.metric);
    let (methods, tallies) = tally_predictions(predictions, Some(manifest.num_classes()))?;
    let mut values = BTreeMap::new();
    let mut overall = BTreeMap::new();
    let mut images = 0;
    for m in &methods {
        let tally = &tallies[m];
        images = tally.len();
        values.insert(m.clone(), tally.value(metric)?);
        if metric == Metric::WorstGroup {
            overall.insert(m.clone(), tally.worst_group()?.1);
        }
    }

    let mut out = create(None)?;
    if json {
        let mut doc = json!({ "metric": metric, "images": images, "methods": values });
        if metric == Metric::WorstGroup {
            doc["overall"] = json!(overall);
        }
        writeln!(out, "{doc}")?;
    } else {
        writeln!(out, "{metric} accuracy over {images} images (%)")?;
        for m in &methods {
            write!(out, "{m:<8} {:>6.2}", 100.0 * values[m])?;
            if let Some(o) = overall.get(m) {
                write!(out, "  (overall {:.2})", 100.0 * o)?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn report(baseline: &Path, candidate: &Path, metric: Metric, baseline_method: Option<&str>) -> CliResult {
    let (_, base) = read_predictions(baseline)?;
    let (methods, cand) = read_predictions(candidate)?;
    let mut report = delta_report(metric, &base, &cand, baseline_method)?;
    report.rows.sort_by_key(|r| methods.iter().position(|m| *m == r.method));
    let mut out = create(None)?;
    write!(out, "{}", report.to_markdown())?;
    out.flush()?;
    Ok(())
}

pub fn embed(input: &Path, k: usize, filter_text: bool, max_images: Option<usize>, out: &Path) -> CliResult {
    let records = read_embedding_records(open(input)?)?;
    let opts = EmbeddingOptions {
        k,
        filter_text,
        max_images,
    };
    let embeddings = build_class_embeddings(&records, &opts)?;
    for e in &embeddings {
        if e.k_used < k {
            log::info!("class {}: only {} images available (k = {k})", e.class_id, e.k_used);
        }
    }
    write_class_embeddings(create(Some(out))?, &embeddings)?;
    Ok(())
}

pub fn localize_boxes(queries: &Path, input: &Path, out: Option<&Path>) -> CliResult {
    let queries: BTreeMap<usize, Vec<f32>> = read_class_embeddings(open(queries)?)?
        .into_iter()
        .map(|e| (e.class_id, e.vector))
        .collect();
    let records = read_embedding_records(open(input)?)?;
    let picks = records
        .par_iter()
        .map(|r| {
            let q = queries.get(&r.class_id).ok_or_else(|| {
                Failure::contract(format!("no prototype for class {} (`{}`)", r.class_id, r.image_id))
            })?;
            Ok(localize(r, q)?)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut pairs: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for (r, p) in records.iter().zip(&picks) {
        if let (Some(chosen), Some(gt)) = (p.bbox, r.gt_box) {
            pairs.entry(r.class_id).or_default().push((chosen, gt));
        }
    }

    let mut w = create(out)?;
    for p in &picks {
        writeln!(w, "{}", serde_json::to_string(p).expect("localizations serialize"))?;
    }
    w.flush()?;
    drop(w);

    if !pairs.is_empty() {
        let table = mean_class_iou(&pairs);
        // keep stdout clean when it already carries the selections
        let mut t: Box<dyn Write> = if out.is_some() {
            create(None)?
        } else {
            Box::new(std::io::stderr())
        };
        writeln!(t, "class\tmean IoU (%)")?;
        for (c, v) in &table {
            writeln!(t, "{c}\t{v:.2}")?;
        }
        let mean = table.values().sum::<f64>() / table.len() as f64;
        writeln!(t, "mean\t{mean:.2}")?;
        t.flush()?;
    }
    Ok(())
}

pub fn prior_fit(records: &Path, manifest: &Path, fields: &[String], alpha: f64, out: &Path) -> CliResult {
    let manifest = failure::manifest(manifest)?;
    let records = read_records(open(records)?, Some(&manifest))?;
    let tables = fields
        .iter()
        .map(|f| fit_prior_from_records(&records, manifest.num_classes(), f, alpha))
        .collect::<rcor::Result<Vec<_>>>()?;
    let mut w = create(Some(out))?;
    serde_json::to_writer_pretty(&mut w, &PriorSet { tables }).map_err(|e| Failure::contract(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn load_priors(path: &Path, fields: &[String]) -> CliResult<Vec<PriorTable>> {
    let set: PriorSet = serde_json::from_str(&failure::read_to_string(path)?)
        .map_err(|e| Failure::contract(format!("{}: {e}", path.display())))?;
    Ok(set.select(fields)?)
}

pub fn synth(regime: Regime, seed: u64, n: usize, dir: &Path) -> CliResult {
    let cfg = WorldConfig::preset(regime, seed, n);
    let world = generate_world(&cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, world.manifest.to_json()).map_err(|e| Failure::io(&path, e))?;
    for (name, split) in [("train.jsonl", &world.train), ("test.jsonl", &world.test)] {
        write_records(create(Some(&dir.join(name)))?, split)?;
    }
    log::info!("wrote {n} train and {n} test records to {}", dir.display());
    Ok(())
}
