use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use harmonizer_core::dataio::{
    self, alignment_report_csv, generate_synthetic, load_dataset, load_model, read_fmap, read_image, read_rater_dir,
    read_response_log, save_dataset, save_model, write_gray_png, write_json, write_response_log, Reject,
};
use harmonizer_core::decisions::{decision_alignment, decision_curve, model_decision, AlignmentMethod};
use harmonizer_core::explain::smooth_for_viz;
use harmonizer_core::harmonize::{self, calibrate_lambda1, history_csv, Batch, HarmonizeConfig};
use harmonizer_core::metrics::{self, alignment_score, center_bias_baseline, downscale_raters, interrater_ceiling};
use harmonizer_core::stimuli::{generate_stimuli, StimulusOptions, StimulusSource};
use harmonizer_core::{
    Architecture, Category, DecisionCurve, GrayImage, ImageRaters, ImportanceMap, Model, Response, StimulusManifest,
    SyntheticDataset, SyntheticSpec, Tensor, TrialResponse,
};
use serde_json::{json, Value};

use crate::failure::Failure;
use crate::{CeilingArgs, CurvesArgs, EvaluateArgs, Method, ReportArgs, StimuliArgs, SynthArgs, TrainArgs};

type Outcome = Result<Value, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn data_err(msg: impl Into<String>) -> Failure {
    Failure::Data(msg.into())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    Ok(dataio::write_bytes(path, text.as_bytes())?)
}

/// `name=path`, or a bare path named after its parent directory.
fn named_path(spec: &str) -> (String, PathBuf) {
    if let Some((name, path)) = spec.split_once('=') {
        return (name.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    (name, path)
}

fn check_names(names: &[String]) -> Result<(), Failure> {
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty() || n.contains(['/', '\\']) || !seen.insert(n) {
            return Err(invalid(format!(
                "model names must be unique path-free labels, got {n:?}"
            )));
        }
    }
    Ok(())
}

/// Every `.fmap` in `dir`, keyed by file stem.
fn read_map_dir(dir: &Path) -> Result<Vec<ImportanceMap>, Failure> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| data_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fmap"))
        .collect();
    paths.sort();
    let maps = paths.iter().map(|p| read_fmap(p)).collect::<Result<Vec<_>, _>>()?;
    if maps.is_empty() {
        return Err(data_err(format!("{}: no .fmap files", dir.display())));
    }
    Ok(maps)
}

/// One sub-directory of rater maps per image, in name order.
fn read_rater_tree(dir: &Path) -> Result<Vec<ImageRaters>, Failure> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| data_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    subdirs
        .iter()
        .map(|d| {
            let id = d
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(read_rater_dir(d, &id)?)
        })
        .collect()
}

/// Rater-mean maps for the validation split, falling back to each image's
/// stored map when it has no raters.
fn human_means(data: &SyntheticDataset) -> Vec<ImportanceMap> {
    let groups: BTreeMap<&str, &ImageRaters> = data.raters.iter().map(|g| (g.image_id.as_str(), g)).collect();
    data.val
        .iter()
        .filter_map(|s| {
            let from_raters = groups.get(s.id.as_str()).and_then(|g| {
                let maps: Vec<&ImportanceMap> = g.raters.iter().map(|r| &r.map).collect();
                ImportanceMap::mean_of(s.id.clone(), &maps)
            });
            from_raters.or_else(|| s.human_map.clone())
        })
        .collect()
}

fn animal_set(data: &SyntheticDataset) -> BTreeSet<usize> {
    data.index.animal_classes.iter().copied().collect()
}

fn category_of(label: usize, animals: &BTreeSet<usize>) -> Category {
    if animals.contains(&label) {
        Category::Animal
    } else {
        Category::NonAnimal
    }
}

pub fn synth(a: &SynthArgs, seed: u64) -> Outcome {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => dataio::read_json(p)?,
        None => SyntheticSpec::default(),
    };
    spec.seed = seed;
    if let Some(v) = a.train {
        spec.train = v;
    }
    if let Some(v) = a.val {
        spec.val = v;
    }
    if let Some(v) = a.raters {
        spec.raters = v;
    }
    if let Some(v) = a.rho {
        spec.rho_spur = v;
    }
    let data = generate_synthetic(&spec)?;
    save_dataset(&a.out, &data)?;
    Ok(json!({
        "command": "synth",
        "out": a.out.display().to_string(),
        "train": data.train.len(),
        "val": data.val.len(),
        "raters_per_image": spec.raters,
        "animal_classes": data.index.animal_classes,
    }))
}

pub fn train(a: &TrainArgs, seed: u64) -> Outcome {
    let data = load_dataset(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
            HarmonizeConfig::parse(&text)?
        }
        None => HarmonizeConfig::desk(0.3, seed),
    };
    cfg.seed = seed;
    if let Some(v) = a.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = a.pyramid_levels {
        cfg.pyramid_levels = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
        cfg.warmup_epochs = cfg.warmup_epochs.min(v);
    }
    cfg.validate()?;
    if a.width == 0 {
        return Err(invalid("--width must be >= 1"));
    }
    let first = data
        .train
        .first()
        .ok_or_else(|| data_err("dataset has no training samples"))?;
    let shape = first.image.shape().to_vec();
    if shape[1] != shape[2] {
        return Err(data_err(format!("images must be square, got {shape:?}")));
    }
    let arch = Architecture::toy_convnet(shape[0], shape[1], a.width, data.index.spec.classes);
    let model = Model::init(arch, seed)?;
    if a.calibrate && cfg.lambda1 > 0.0 {
        let refs: Vec<_> = data.train.iter().take(cfg.batch).collect();
        let batch = Batch::from_samples(&refs, model.classes(), cfg.label_smoothing, cfg.pyramid_levels)?;
        cfg.lambda1 = calibrate_lambda1(&model, &batch, &cfg)?;
    }
    let fit = harmonize::fit(&model, &data.train, &data.val, &cfg)?;
    save_model(&a.out.join("model.hmdl"), &fit.model)?;
    write_text(&a.out.join("history.csv"), &history_csv(&fit.history))?;
    let last = fit.history.last();
    let summary = json!({
        "command": "train",
        "params": fit.model.num_params(),
        "lambda1": cfg.lambda1,
        "val_accuracy": last.map(|r| r.top1),
        "val_alignment_raw": last.map(|r| r.val_alignment),
    });
    write_json(&a.out.join("train.json"), &json!({ "config": cfg, "summary": summary }))?;
    Ok(summary)
}

pub fn ceiling(a: &CeilingArgs, seed: u64) -> Outcome {
    let groups = match (&a.data, &a.raters) {
        (Some(d), None) => load_dataset(d)?.raters,
        (None, Some(r)) => read_rater_tree(r)?,
        _ => return Err(invalid("pass exactly one of --data or --raters")),
    };
    let est = interrater_ceiling(&groups, a.splits, seed)?;
    write_json(&a.out.join("ceiling.json"), &est)?;
    Ok(json!({
        "command": "ceiling",
        "ceiling": est.ceiling,
        "images": est.n_images,
        "splits": est.n_splits,
        "excluded_images": est.excluded_images,
    }))
}

pub fn evaluate(a: &EvaluateArgs, seed: u64) -> Outcome {
    let data = a.data.as_deref().map(load_dataset).transpose()?;
    let human = match (&a.human_maps, &data) {
        (Some(dir), _) => read_map_dir(dir)?,
        (None, Some(d)) => human_means(d),
        (None, None) => return Err(invalid("human maps need --human-maps or --data")),
    };
    let ceiling = match (a.ceiling, &a.raters, &data) {
        (Some(c), _, _) => json!({ "ceiling": c, "source": "flag" }),
        (None, Some(dir), _) => {
            let groups = downscale_raters(&read_rater_tree(dir)?, a.scale)?;
            serde_json::to_value(interrater_ceiling(&groups, a.splits, seed)?).expect("estimate serializes")
        }
        (None, None, Some(d)) => {
            let groups = downscale_raters(&d.raters, a.scale)?;
            serde_json::to_value(interrater_ceiling(&groups, a.splits, seed)?).expect("estimate serializes")
        }
        (None, None, None) => return Err(invalid("ceiling needs --ceiling, --raters or --data")),
    };
    let c = ceiling["ceiling"].as_f64().expect("ceiling is a number");
    let model_maps = match (&a.model, &a.model_maps, &data) {
        (_, Some(dir), _) => read_map_dir(dir)?,
        (Some(p), None, Some(d)) => harmonize::saliency_maps(&load_model(p)?, &d.val)?,
        (Some(_), None, None) => return Err(invalid("--model needs --data for its input images")),
        (None, None, _) => return Err(invalid("model maps need --model or --model-maps")),
    };
    let opts = metrics::AlignmentOptions {
        scale_factor: a.scale,
        bootstrap: a.bootstrap,
        seed,
    };
    let report = alignment_score(&human, &model_maps, c, opts)?;
    let human_scaled = human
        .iter()
        .map(|m| harmonizer_core::pyramid::downscale(m, a.scale))
        .collect::<Result<Vec<_>, _>>()?;
    let center = center_bias_baseline(&human_scaled, c).ok();
    if a.save_maps {
        for m in &model_maps {
            dataio::write_fmap(&a.out.join("maps").join(format!("{}.fmap", m.image_id)), m)?;
        }
    }
    write_text(&a.out.join("alignment.csv"), &alignment_report_csv(&report))?;
    write_json(
        &a.out.join("alignment.json"),
        &json!({ "report": report, "ceiling": ceiling, "center_bias": center }),
    )?;
    Ok(json!({
        "command": "evaluate-alignment",
        "images": report.per_image.len(),
        "ceiling": c,
        "raw": report.raw_mean,
        "normalized": report.normalized_mean,
        "bootstrap_std": report.bootstrap_std,
        "scale": report.scale_factor,
    }))
}

pub fn stimuli(a: &StimuliArgs, seed: u64) -> Outcome {
    if !(a.tau >= 0.0 && a.tau.is_finite()) {
        return Err(invalid(format!("--tau must be finite and >= 0, got {}", a.tau)));
    }
    let data = load_dataset(&a.data)?;
    let animals = animal_set(&data);
    let external: Option<BTreeMap<String, ImportanceMap>> = a
        .maps
        .as_deref()
        .map(read_map_dir)
        .transpose()?
        .map(|v| v.into_iter().map(|m| (m.image_id.clone(), m)).collect());
    let mut sources = Vec::with_capacity(data.val.len());
    let mut missing = Vec::new();
    for s in &data.val {
        let map = match &external {
            Some(maps) => maps.get(&s.id).cloned(),
            None => s.human_map.clone(),
        };
        let Some(mut map) = map else {
            missing.push(s.id.clone());
            continue;
        };
        map.image_id = s.id.clone();
        sources.push(StimulusSource {
            image_id: s.id.clone(),
            image: GrayImage::from_tensor(&s.image)?,
            map,
            category: category_of(s.label, &animals),
        });
    }
    if !missing.is_empty() {
        return Err(data_err(format!("no importance map for: {}", missing.join(", "))));
    }
    let opts = StimulusOptions {
        n_levels: a.levels,
        tau_scale: a.tau,
        out_size: (a.size > 0).then_some(a.size),
        seed,
    };
    let set = generate_stimuli(&sources, &opts)?;
    for (e, img) in set.manifest.entries.iter().zip(&set.images) {
        write_gray_png(&a.out.join(&e.path), img, false)?;
    }
    write_json(&a.out.join("manifest.json"), &set.manifest)?;
    Ok(json!({
        "command": "generate-stimuli",
        "images": sources.len(),
        "levels": set.manifest.levels.len(),
        "stimuli": set.manifest.entries.len(),
        "manifest": a.out.join("manifest.json").display().to_string(),
    }))
}

/// Runs a model on every stimulus and logs its choices like a participant.
fn model_trials(
    name: &str,
    model: &Model,
    manifest: &StimulusManifest,
    stim_dir: &Path,
    animals: &BTreeSet<usize>,
) -> Result<Vec<TrialResponse>, Failure> {
    let input = &model.arch.input;
    if input.len() != 3 || input[0] != 1 {
        return Err(data_err(format!("model {name} does not take single-channel images")));
    }
    let (h, w) = (input[1], input[2]);
    let mut out = Vec::with_capacity(manifest.entries.len());
    for chunk in manifest.entries.chunks(64) {
        let mut pixels = Vec::with_capacity(chunk.len() * h * w);
        for e in chunk {
            let img = GrayImage::from_tensor(&read_image(&stim_dir.join(&e.path))?)?;
            pixels.extend(img.resized(w, h).values);
        }
        let x = Tensor::new(vec![chunk.len(), 1, h, w], pixels).map_err(|e| data_err(e.to_string()))?;
        let logits = model.logits(&x).map_err(|e| data_err(e.to_string()))?;
        let c = model.classes();
        for (i, e) in chunk.iter().enumerate() {
            let choice = model_decision(&logits.values()[i * c..(i + 1) * c], animals)?;
            out.push(TrialResponse {
                participant_id: name.to_string(),
                image_id: e.image_id.clone(),
                level: e.level,
                response: Response::from(choice),
                rt_ms: 0.0,
                fixation_ms: dataio::FIXATION_RANGE_MS.0,
                timestamp: 0.0,
            });
        }
    }
    Ok(out)
}

pub fn curves(a: &CurvesArgs) -> Outcome {
    let manifest = StimulusManifest::read(&a.manifest)?;
    let stim_dir = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let method = match a.method {
        Method::Spearman => AlignmentMethod::Spearman,
        Method::AreaBetween => AlignmentMethod::AreaBetween,
    };
    let mut rejects: Vec<(String, Reject)> = Vec::new();
    let mut human_trials = Vec::new();
    for p in &a.responses {
        let log = read_response_log(p)?;
        human_trials.extend(log.trials);
        let file = p
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        rejects.extend(log.rejects.into_iter().map(|r| (file.clone(), r)));
    }
    let human = if a.responses.is_empty() {
        None
    } else {
        let c = decision_curve(&human_trials, &manifest)?;
        write_text(&a.out.join("curves").join("human.csv"), &c.to_csv())?;
        Some(c)
    };
    let models: Vec<(String, PathBuf)> = a.model.iter().map(|s| named_path(s)).collect();
    check_names(&models.iter().map(|m| m.0.clone()).collect::<Vec<_>>())?;
    if !models.is_empty() && a.data.is_none() {
        return Err(invalid("model decisions need --data for the animal class set"));
    }
    if models.iter().any(|(n, _)| n == "human") {
        return Err(invalid("\"human\" is reserved for the pooled response logs"));
    }
    let animals = match &a.data {
        Some(d) => dataio::read_json::<dataio::DatasetIndex>(&d.join("dataset.json"))?
            .animal_classes
            .into_iter()
            .collect(),
        None => BTreeSet::new(),
    };
    let mut per_model = serde_json::Map::new();
    for (name, path) in &models {
        let model = load_model(path)?;
        let trials = model_trials(name, &model, &manifest, &stim_dir, &animals)?;
        write_response_log(&a.out.join("logs").join(format!("{name}.jsonl")), &trials)?;
        let curve = decision_curve(&trials, &manifest)?;
        write_text(&a.out.join("curves").join(format!("{name}.csv")), &curve.to_csv())?;
        let alignment = human.as_ref().map(|h| decision_alignment(h, &curve, method));
        per_model.insert(
            name.clone(),
            json!({
                "curve": curve,
                "alignment": alignment.as_ref().and_then(|r| r.as_ref().ok()),
                "alignment_error": alignment.and_then(|r| r.err()).map(|e| e.to_string()),
            }),
        );
    }
    let reject_list: Vec<Value> = rejects
        .iter()
        .map(|(file, r)| json!({ "file": file, "line": r.line, "reason": r.reason, "text": r.text }))
        .collect();
    write_json(&a.out.join("rejects.json"), &reject_list)?;
    let status = |c: &DecisionCurve| serde_json::to_value(c.status).expect("status serializes");
    write_json(
        &a.out.join("decisions.json"),
        &json!({
            "method": a.method.to_possible_value_name(),
            "human": human,
            "models": per_model,
        }),
    )?;
    Ok(json!({
        "command": "decision-curves",
        "levels": manifest.levels.len(),
        "human_trials": human_trials.len(),
        "rejects": reject_list.len(),
        "human_status": human.as_ref().map(status),
        "models": models.iter().map(|m| m.0.clone()).collect::<Vec<_>>(),
    }))
}

trait ValueName {
    fn to_possible_value_name(&self) -> String;
}

impl ValueName for Method {
    fn to_possible_value_name(&self) -> String {
        use clap::ValueEnum;
        self.to_possible_value()
            .expect("no skipped variants")
            .get_name()
            .to_string()
    }
}

/// Map rescaled to its peak, blurred, and enlarged for viewing.
fn heatmap(map: &ImportanceMap, sigma: f64, zoom: usize) -> Result<GrayImage, Failure> {
    let s = smooth_for_viz(map, sigma)?;
    let peak = s.max();
    let vals: Vec<f64> = s
        .values()
        .iter()
        .map(|v| if peak > 0.0 { v / peak } else { 0.0 })
        .collect();
    Ok(GrayImage::new(s.width(), s.height(), vals)?.resized(s.width() * zoom, s.height() * zoom))
}

pub fn report(a: &ReportArgs, seed: u64) -> Outcome {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(invalid(format!("--sigma must be finite and >= 0, got {}", a.sigma)));
    }
    let data = load_dataset(&a.data)?;
    let human = human_means(&data);
    let ceiling = interrater_ceiling(&downscale_raters(&data.raters, a.scale)?, a.splits, seed)?;
    let models: Vec<(String, PathBuf)> = a.model.iter().map(|s| named_path(s)).collect();
    check_names(&models.iter().map(|m| m.0.clone()).collect::<Vec<_>>())?;
    let decisions: Option<Value> = a.decisions.as_deref().map(dataio::read_json).transpose()?;
    let zoom = 8;
    let shown: Vec<&harmonize::TrainSample> = data.val.iter().take(a.heatmaps).collect();
    let mut files = Vec::new();
    for (s, h) in shown.iter().zip(&human) {
        let img = GrayImage::from_tensor(&s.image)?;
        let rel = format!("heatmaps/{}_image.png", s.id);
        write_gray_png(
            &a.out.join(&rel),
            &img.resized(img.width * zoom, img.height * zoom),
            false,
        )?;
        files.push(rel);
        let rel = format!("heatmaps/{}_human.png", s.id);
        write_gray_png(&a.out.join(&rel), &heatmap(h, a.sigma, zoom)?, false)?;
        files.push(rel);
    }
    let mut csv = String::from("model,accuracy,alignment,alignment_std,decision_alignment\n");
    let mut rows = Vec::new();
    for (name, path) in &models {
        let model = load_model(path)?;
        let acc = harmonize::accuracy(&model, &data.val)?;
        let maps = harmonize::saliency_maps(&model, &data.val)?;
        let opts = metrics::AlignmentOptions {
            scale_factor: a.scale,
            seed,
            ..Default::default()
        };
        let rep = alignment_score(&human, &maps, ceiling.ceiling, opts)?;
        let dec = decisions
            .as_ref()
            .and_then(|d| d["models"][name.as_str()]["alignment"].as_f64());
        csv.push_str(&format!(
            "{name},{acc},{},{},{}\n",
            rep.normalized_mean,
            rep.bootstrap_std,
            dec.map(|v| v.to_string()).unwrap_or_default()
        ));
        for (s, m) in shown.iter().zip(&maps) {
            let rel = format!("heatmaps/{}_{name}.png", s.id);
            write_gray_png(&a.out.join(&rel), &heatmap(m, a.sigma, zoom)?, false)?;
            files.push(rel);
        }
        rows.push(json!({
            "model": name,
            "accuracy": acc,
            "alignment": rep.normalized_mean,
            "alignment_std": rep.bootstrap_std,
            "decision_alignment": dec,
        }));
    }
    write_text(&a.out.join("scatter.csv"), &csv)?;
    write_json(
        &a.out.join("report.json"),
        &json!({ "ceiling": ceiling.ceiling, "scale": a.scale, "models": rows, "heatmaps": files }),
    )?;
    Ok(json!({
        "command": "report",
        "ceiling": ceiling.ceiling,
        "models": rows,
        "heatmaps": files.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_paths() {
        assert_eq!(
            named_path("base=runs/a/model.hmdl"),
            ("base".into(), PathBuf::from("runs/a/model.hmdl"))
        );
        assert_eq!(named_path("runs/harm/model.hmdl").0, "harm");
        assert!(check_names(&["a".into(), "a".into()]).is_err());
        assert!(check_names(&["a/b".into()]).is_err());
    }
}
