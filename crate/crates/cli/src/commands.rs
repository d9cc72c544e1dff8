//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;
use shapefuse::eval::{self, MetricCurve};
use shapefuse::gp::refine_model;
use shapefuse::io::{read_mesh, write_mesh};
use shapefuse::kernel::{build_universal_covariance, classify_vertices, sample_gpmm_with};
use shapefuse::nicp::{nicp_register, shared_landmark_pairs};
use shapefuse::regression::{
    build_regression_fused_model, fit_regression, predict_full_shape, synthesize_param_pairs, FaceCrop,
};
use shapefuse::store;
use shapefuse::synth::SyntheticWorld;
use shapefuse::{fit_pdm, ShapeModel, TriMesh};

use crate::registry::{load_meshes, ArtifactKind, MeshSet, Registry};
use crate::report::RunReport;
use crate::settings::*;
use crate::{Cli, CliError, Command, Metric};

pub fn run(cli: &Cli, argv: &[String]) -> Result<(), CliError> {
    if let Command::Replay(a) = &cli.command {
        return replay(&a.report);
    }
    let mut reg = Registry::open(&cli.registry)?;
    let cfg = cli.config.as_deref();
    let name = command_name(&cli.command);
    let mut report = RunReport::new(name, argv, cli.jobs, cfg);
    let tag = match &cli.command {
        Command::Synth(a) => synth(&mut reg, cfg, a, &mut report)?,
        Command::BuildPdm(a) => build_pdm(&mut reg, cfg, a, &mut report)?,
        Command::Register(a) => register(&reg, cfg, a, &mut report)?,
        Command::CombineReg(a) => combine_reg(&mut reg, cfg, a, &mut report)?,
        Command::CombineGp(a) => combine_gp(&mut reg, cfg, a, &mut report)?,
        Command::Refine(a) => refine(&mut reg, cfg, a, &mut report)?,
        Command::PredictHead(a) => predict_head(&reg, a, &mut report)?,
        Command::Sample(a) => sample(&mut reg, cfg, a, &mut report)?,
        Command::Evaluate(a) => evaluate(&reg, cfg, a, &mut report)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    let path = report.write(&reg, &tag)?;
    eprintln!("report: {}", path.display());
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::BuildPdm(_) => "build-pdm",
        Command::Register(_) => "register",
        Command::CombineReg(_) => "combine-reg",
        Command::CombineGp(_) => "combine-gp",
        Command::Refine(_) => "refine",
        Command::PredictHead(_) => "predict-head",
        Command::Sample(_) => "sample",
        Command::Evaluate(_) => "evaluate",
        Command::Replay(_) => "replay",
    }
}

fn meshes_input(reg: &Registry, source: &str, report: &mut RunReport) -> Result<MeshSet, CliError> {
    let set = load_meshes(reg, source)?;
    report.input(reg, source);
    Ok(set)
}

fn pdm_input(reg: &Registry, id: &str, report: &mut RunReport) -> Result<ShapeModel, CliError> {
    let m = reg.load_pdm(id)?;
    report.input(reg, id);
    Ok(m)
}

fn mesh_file(path: &Path, report: &mut RunReport) -> Result<TriMesh, CliError> {
    let m = read_mesh(path, None)?;
    report.file(path)?;
    Ok(m)
}

/// Face mask from a mesh-set attachment (`face_mask.json`) or a JSON file.
fn face_mask(reg: &Registry, source: Option<&str>, report: &mut RunReport) -> Result<Option<Vec<usize>>, CliError> {
    let Some(src) = source else { return Ok(None) };
    let value = if reg.entries().contains_key(src) {
        report.input(reg, src);
        reg.load_attachment(src, "face_mask.json")?
    } else {
        report.file(Path::new(src))?;
        store::read_json(Path::new(src))?
    };
    let mask: Vec<usize> =
        serde_json::from_value(value).map_err(|e| CliError::usage(format!("face mask `{src}`: {e}")))?;
    Ok(Some(mask))
}

fn synth(
    reg: &mut Registry,
    cfg: Option<&Path>,
    a: &crate::SynthArgs,
    report: &mut RunReport,
) -> Result<String, CliError> {
    let mut s: SynthSettings = load(cfg, "synth")?;
    flag(&mut s.seed, a.seed);
    flag(&mut s.n_heads, a.n_heads);
    flag(&mut s.n_faces, a.n_faces);
    flag(&mut s.world.n_vertices, a.n_vertices);
    flag(&mut s.world.n_face_vertices, a.n_face_vertices);
    report.config = serde_json::to_value(&s)?;

    let mut master = ChaCha8Rng::seed_from_u64(s.seed);
    let world_seed = master.next_u64();
    let heads_seed = master.next_u64();
    let faces_seed = master.next_u64();
    report.seeds = [("seed", s.seed), ("world", world_seed), ("heads", heads_seed), ("faces", faces_seed)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();

    let world = SyntheticWorld::generate(&s.world, world_seed)?;
    let heads = world.sample_population(s.n_heads, heads_seed).heads;
    let faces = world.sample_population(s.n_faces, faces_seed).faces;
    let truth = json!({
        "seed": s.seed,
        "world_seed": world_seed,
        "config": s.world,
        "mode_kinds": world.mode_kinds,
        "latent_sd": world.latent_sd.as_slice(),
        "true_eigenvalues": world.true_eigenvalues.as_slice(),
        "coupling_map": world.coupling_map.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    let out = &a.out;
    let ids = [format!("{out}-heads"), format!("{out}-faces"), format!("{out}-templates")];
    let h = reg.save_mesh_set(&ids[0], &heads, &[], &[])?;
    report.outputs.insert(ids[0].clone(), h);
    let h = reg.save_mesh_set(&ids[1], &faces, &[], &[])?;
    report.outputs.insert(ids[1].clone(), h);
    let h = reg.save_mesh_set(
        &ids[2],
        &[world.head_template.clone(), world.face_template.clone()],
        &[],
        &[("ground_truth.json", truth), ("face_mask.json", json!(world.face_mask))],
    )?;
    report.outputs.insert(ids[2].clone(), h);
    for (id, model) in [(format!("{out}-head-truth"), &world.head_model), (format!("{out}-face-truth"), &world.face_model)] {
        let h = reg.save_pdm(&id, model)?;
        report.outputs.insert(id, h);
    }
    Ok(out.clone())
}

fn build_pdm(
    reg: &mut Registry,
    cfg: Option<&Path>,
    a: &crate::BuildPdmArgs,
    report: &mut RunReport,
) -> Result<String, CliError> {
    let mut s: BuildPdmSettings = load(cfg, "build-pdm")?;
    if a.components.is_some() {
        s.components = a.components;
    }
    report.config = serde_json::to_value(&s)?;
    let set = meshes_input(reg, &a.meshes, report)?;
    let n = s.components.unwrap_or(set.meshes.len().saturating_sub(1));
    let model = fit_pdm(&set.meshes, n)?;
    report.notes.insert("components".into(), json!(model.n_components()));
    report.notes.insert("total_variance".into(), json!(model.total_variance()));
    let h = reg.save_pdm(&a.out, &model)?;
    report.outputs.insert(a.out.clone(), h);
    Ok(a.out.clone())
}

fn register(reg: &Registry, cfg: Option<&Path>, a: &crate::RegisterArgs, report: &mut RunReport) -> Result<String, CliError> {
    let s: RegisterSettings = load(cfg, "register")?;
    report.config = serde_json::to_value(&s)?;
    let template = mesh_file(&a.template, report)?;
    let target = mesh_file(&a.target, report)?;
    let mut nicp = s.nicp;
    if nicp.landmark_pairs.is_empty() {
        nicp.landmark_pairs = shared_landmark_pairs(&template, &target);
    }
    let r = nicp_register(&template, &target, &nicp)?;
    write_mesh(&a.out, &r.deformed)?;
    let residuals = a.out.with_extension("residuals.json");
    store::write_json(&residuals, &r.residuals)?;
    report.file(&a.out)?;
    report.file(&residuals)?;
    report.notes.insert("rms_residual".into(), json!(r.rms_residual()));
    report.notes.insert("levels".into(), serde_json::to_value(&r.levels)?);
    let _ = reg;
    Ok(a.out.file_stem().unwrap_or_default().to_string_lossy().into_owned())
}

fn combine_reg(
    reg: &mut Registry,
    cfg: Option<&Path>,
    a: &crate::CombineRegArgs,
    report: &mut RunReport,
) -> Result<String, CliError> {
    let mut s: CombineRegSettings = load(cfg, "combine-reg")?;
    flag(&mut s.seed, a.seed);
    flag(&mut s.ridge, a.ridge);
    flag(&mut s.crop, a.crop);
    if a.n_pairs.is_some() {
        s.n_pairs = a.n_pairs;
    }
    if a.components.is_some() {
        s.components = a.components;
    }
    let head = pdm_input(reg, &a.head_model, report)?;
    let face = pdm_input(reg, &a.face_model, report)?;
    let faces = meshes_input(reg, &a.faces, report)?;
    let mask = face_mask(reg, a.face_mask.as_deref(), report)?;
    if s.fusion.merge.face_mask.is_none() {
        s.fusion.merge.face_mask = mask.clone();
    }
    let n_pairs = *s.n_pairs.get_or_insert(10 * face.n_components());
    let components = *s.components.get_or_insert(faces.meshes.len().saturating_sub(1));
    report.config = serde_json::to_value(&s)?;
    report.seeds.insert("seed".into(), s.seed);

    let crop = match s.crop {
        CropMode::Nicp => FaceCrop::Nicp(s.crop_nicp.clone()),
        CropMode::Mask => FaceCrop::VertexMask(mask.ok_or_else(|| CliError::usage("--crop mask needs --face-mask"))?),
    };
    let pairs = synthesize_param_pairs(&head, &face, &crop, n_pairs, s.seed, s.retries)?;
    let map = fit_regression(&head, &face, &pairs, s.ridge)?;
    let template = match &a.template {
        Some(p) => mesh_file(p, report)?,
        None => head.mean_mesh(),
    };
    let fused = build_regression_fused_model(&head, &face, &map, &faces.meshes, &template, &s.fusion, components)?;
    report.notes.insert("pairs".into(), json!(pairs.n_r()));
    report.notes.insert("resampled_draws".into(), json!(pairs.resampled));
    report.notes.insert("skipped_faces".into(), json!(fused.skipped));
    let map_id = format!("{}-map", a.out);
    let h = reg.save_map(&map_id, &map)?;
    report.outputs.insert(map_id, h);
    let h = reg.save_pdm(&a.out, &fused.model)?;
    report.outputs.insert(a.out.clone(), h);
    Ok(a.out.clone())
}

fn combine_gp(
    reg: &mut Registry,
    cfg: Option<&Path>,
    a: &crate::CombineGpArgs,
    report: &mut RunReport,
) -> Result<String, CliError> {
    let mut s: CombineGpSettings = load(cfg, "combine-gp")?;
    if a.face_cap.is_some() {
        s.face_cap = a.face_cap;
    }
    let head = pdm_input(reg, &a.head_model, report)?;
    let face = pdm_input(reg, &a.face_model, report)?;
    let template = match &a.template {
        Some(p) => mesh_file(p, report)?,
        None => head.mean_mesh(),
    };
    let face_mean = face.mean_mesh();
    let cap = *s.face_cap.get_or_insert(0.01 * template.bbox_diagonal());
    report.config = serde_json::to_value(&s)?;
    let labels = classify_vertices(&template, &face_mean, cap)?;
    let cov = build_universal_covariance(&head, &head.mean_mesh(), &face, &face_mean, &template, &labels, &s.blend)?;
    report.notes.insert("face_vertices".into(), json!(labels.face_count()));
    report.notes.insert("numerical_rank".into(), json!(cov.numerical_rank()?));
    report.notes.insert("repair".into(), serde_json::to_value(cov.repair)?);
    let h = reg.save_covariance(&a.out, &cov)?;
    report.outputs.insert(a.out.clone(), h);
    Ok(a.out.clone())
}

fn refine(reg: &mut Registry, cfg: Option<&Path>, a: &crate::RefineArgs, report: &mut RunReport) -> Result<String, CliError> {
    let mut s: RefineSettings = load(cfg, "refine")?;
    if a.truncation.is_some() {
        s.truncation = a.truncation;
    }
    if a.components.is_some() {
        s.components = a.components;
    }
    let cov = reg.load_covariance(&a.covariance)?;
    report.input(reg, &a.covariance);
    let scans = meshes_input(reg, &a.scans, report)?;
    let mask = face_mask(reg, a.face_mask.as_deref(), report)?;
    if let Some(merge) = s.refine.face_align.as_mut() {
        if merge.face_mask.is_none() {
            merge.face_mask = mask;
        }
    }
    let k = match s.truncation {
        Some(k) => k,
        None => cov.numerical_rank()?,
    };
    s.truncation = Some(k);
    let n = scans.meshes.len();
    let max_skips = (s.refine.max_skip_fraction * n as f64).floor() as usize;
    let components = *s.components.get_or_insert(n.saturating_sub(max_skips + 1).max(1));
    report.config = serde_json::to_value(&s)?;
    let refined = refine_model(&cov, k, &scans.meshes, &s.refine, components)?;
    report.notes.insert("skipped_scans".into(), json!(refined.skipped));

    let h = reg.save_pdm(&a.out, &refined.model)?;
    report.outputs.insert(a.out.clone(), h);
    let recon_id = format!("{}-reconstructions", a.out);
    let h = reg.save_mesh_set(&recon_id, &refined.reconstructions, &[], &[])?;
    report.outputs.insert(recon_id, h);
    let dir = reg.root().join(crate::registry::REPORTS);
    std::fs::create_dir_all(&dir)?;
    let audit = dir.join(format!("refine-{}.audit.jsonl", a.out));
    let mut text = refined.audit.join("\n");
    text.push('\n');
    std::fs::write(&audit, text)?;
    report.file(&audit)?;
    Ok(a.out.clone())
}

fn predict_head(reg: &Registry, a: &crate::PredictHeadArgs, report: &mut RunReport) -> Result<String, CliError> {
    let head = pdm_input(reg, &a.head_model, report)?;
    let face = pdm_input(reg, &a.face_model, report)?;
    let map = reg.load_map(&a.map)?;
    report.input(reg, &a.map);
    let face_mesh = mesh_file(&a.face, report)?;
    let predicted = predict_full_shape(&head, &face, &map, &face_mesh)?;
    write_mesh(&a.out, &predicted)?;
    report.file(&a.out)?;
    Ok(a.out.file_stem().unwrap_or_default().to_string_lossy().into_owned())
}

fn sample(reg: &mut Registry, cfg: Option<&Path>, a: &crate::SampleArgs, report: &mut RunReport) -> Result<String, CliError> {
    let mut s: SampleSettings = load(cfg, "sample")?;
    flag(&mut s.n, a.n);
    flag(&mut s.seed, a.seed);
    report.config = serde_json::to_value(&s)?;
    report.seeds.insert("seed".into(), s.seed);
    let stream = |k: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(k as u64);
        rng
    };
    let kind = reg.entry(&a.model)?.kind;
    let meshes: Vec<TriMesh> = match kind {
        ArtifactKind::Pdm => {
            let model = pdm_input(reg, &a.model, report)?;
            (0..s.n)
                .map(|k| model.sample(&model.random_params_with(&mut stream(k), s.clamp_3sigma)))
                .collect::<shapefuse::Result<_>>()?
        }
        ArtifactKind::Covariance => {
            let cov = reg.load_covariance(&a.model)?;
            report.input(reg, &a.model);
            let rank = cov.numerical_rank()?;
            (0..s.n)
                .map(|k| {
                    let mut rng = stream(k);
                    let z: Vec<f64> = (0..rank)
                        .map(|_| {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            if s.clamp_3sigma { v.clamp(-3.0, 3.0) } else { v }
                        })
                        .collect();
                    sample_gpmm_with(cov.template(), &cov, &z)
                })
                .collect::<shapefuse::Result<_>>()?
        }
        other => return Err(CliError::usage(format!("cannot sample from a {other:?} entry"))),
    };
    let h = reg.save_mesh_set(&a.out, &meshes, &[], &[])?;
    report.outputs.insert(a.out.clone(), h);
    Ok(a.out.clone())
}

fn default_grid(s: &EvaluateSettings, max: usize) -> Vec<usize> {
    match &s.grid {
        Some(g) => g.clone(),
        None => (1..=s.max_components.unwrap_or(max).min(max)).collect(),
    }
}

fn read_error_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut errors = Vec::new();
    let mut norms = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("error") {
            continue;
        }
        let bad = || CliError::usage(format!("{}:{}: expected `error,normalizer`", path.display(), line_no + 1));
        let mut cols = line.split(',');
        let e: f64 = cols.next().and_then(|c| c.trim().parse().ok()).ok_or_else(bad)?;
        let d: f64 = cols.next().and_then(|c| c.trim().parse().ok()).ok_or_else(bad)?;
        errors.push(e);
        norms.push(d);
    }
    Ok((errors, norms))
}

fn required<'a>(value: &'a Option<String>, flag: &str, metric: &str) -> Result<&'a str, CliError> {
    value.as_deref().ok_or_else(|| CliError::usage(format!("--metric {metric} needs {flag}")))
}

fn evaluate(reg: &Registry, cfg: Option<&Path>, a: &crate::EvaluateArgs, report: &mut RunReport) -> Result<String, CliError> {
    let mut s: EvaluateSettings = load(cfg, "evaluate")?;
    if a.grid.is_some() {
        s.grid = a.grid.clone();
    }
    if a.max_components.is_some() {
        s.max_components = a.max_components;
    }
    flag(&mut s.samples, a.samples);
    flag(&mut s.seed, a.seed);
    flag(&mut s.threshold, a.threshold);
    report.config = serde_json::to_value(&s)?;
    report.config["metric"] = serde_json::to_value(a.metric)?;

    let model = |report: &mut RunReport| -> Result<ShapeModel, CliError> {
        let id = a.model.as_deref().ok_or_else(|| CliError::usage("this metric needs --model"))?;
        pdm_input(reg, id, report)
    };
    let (csv, tag) = match a.metric {
        Metric::Compactness => {
            let m = model(report)?;
            let max = s.max_components.unwrap_or(m.n_components());
            (eval::compactness(&m, max)?.to_csv(), a.model.clone().unwrap_or_default())
        }
        Metric::Generalization => {
            let test = meshes_input(reg, required(&a.test, "--test", "generalization")?, report)?;
            let curve: MetricCurve = if a.cohort_models.is_empty() {
                let m = model(report)?;
                let grid = default_grid(&s, m.n_components());
                eval::generalization(&m, &test.meshes, &grid)?
            } else {
                let mut models = BTreeMap::new();
                for spec in &a.cohort_models {
                    let (label, id) = spec
                        .split_once('=')
                        .ok_or_else(|| CliError::usage(format!("--cohort-model `{spec}`: expected label=entry")))?;
                    models.insert(label.to_string(), pdm_input(reg, id, report)?);
                }
                if test.cohorts.len() != test.meshes.len() {
                    return Err(CliError::usage("cohort generalization needs a test set with cohort labels"));
                }
                let labelled: Vec<(String, TriMesh)> =
                    test.cohorts.iter().cloned().zip(test.meshes.iter().cloned()).collect();
                let max = models.values().map(|m| m.n_components()).min().unwrap_or(0);
                eval::generalization_by_cohort(&models, &labelled, &default_grid(&s, max))?
            };
            (curve.to_csv(), a.model.clone().unwrap_or_else(|| "cohorts".into()))
        }
        Metric::Specificity => {
            let m = model(report)?;
            let refs = meshes_input(reg, required(&a.reference, "--reference", "specificity")?, report)?;
            let grid = default_grid(&s, m.n_components());
            report.seeds.insert("seed".into(), s.seed);
            let curve = eval::specificity_with(&m, &refs.meshes, &grid, s.samples, s.seed, s.search)?;
            (curve.to_csv(), a.model.clone().unwrap_or_default())
        }
        Metric::Ced => {
            let (errors, norms) = match &a.errors {
                Some(path) => {
                    report.file(path)?;
                    read_error_csv(path)?
                }
                None => {
                    let pred = meshes_input(reg, required(&a.predictions, "--predictions", "ced")?, report)?;
                    let truth = meshes_input(reg, required(&a.ground_truth, "--ground-truth", "ced")?, report)?;
                    if pred.meshes.len() != truth.meshes.len() {
                        return Err(CliError::usage("--predictions and --ground-truth differ in length"));
                    }
                    let mut errors = Vec::new();
                    let mut norms = Vec::new();
                    for (p, t) in pred.meshes.iter().zip(&truth.meshes) {
                        errors.push(p.mean_distance_to(t)?);
                        norms.push(eval::landmark_distance(p, &s.eye_left, &s.eye_right)?);
                    }
                    let items: BTreeMap<&str, f64> =
                        pred.names.iter().map(String::as_str).zip(errors.iter().zip(&norms).map(|(e, d)| e / d)).collect();
                    report.notes.insert("normalized_errors".into(), json!(items));
                    (errors, norms)
                }
            };
            let r = eval::ced_auc(&errors, &norms, s.threshold)?;
            report.notes.insert("auc".into(), json!(r.auc));
            report.notes.insert("failure_rate".into(), json!(r.failure_rate));
            let csv = format!("# auc: {}\n# failure_rate: {}\n{}", r.auc, r.failure_rate, r.curve.to_csv());
            (csv, "ced".to_string())
        }
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            report.file(path)?;
        }
        None => {
            print!("{csv}");
            report.notes.insert("stdout_sha256".into(), json!(store::sha256_hex(csv.as_bytes())));
        }
    }
    let metric = serde_json::to_value(a.metric)?;
    Ok(format!("{}-{tag}", metric.as_str().unwrap_or("metric")))
}

fn replay(path: &Path) -> Result<(), CliError> {
    let old: RunReport = store::read_json(path)?;
    let exe = std::env::current_exe()?;
    let status = std::process::Command::new(exe).args(&old.argv).status()?;
    if !status.success() {
        return Err(CliError::usage(format!("replayed command exited with {status}")));
    }
    let new: RunReport = store::read_json(path)?;
    let mut diffs = Vec::new();
    for (what, a, b) in [("output", &old.outputs, &new.outputs), ("file", &old.files, &new.files)] {
        for (k, h) in a {
            if b.get(k) != Some(h) {
                diffs.push(format!("{what} {k}"));
            }
        }
    }
    if !diffs.is_empty() {
        return Err(CliError::usage(format!("replay changed: {}", diffs.join(", "))));
    }
    eprintln!("replay reproduced {} outputs and {} files", old.outputs.len(), old.files.len());
    Ok(())
}
