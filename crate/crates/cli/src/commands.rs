use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use tfseg::bls3d::{refine, RefineConfig};
use tfseg::evalseg::{evaluate, load_labels, report_to_table, save_labels, TableFormat};
use tfseg::featpipe::{merge_stacks, plan_for, toy_extract, ExtractionPlan};
use tfseg::isoray::{render, render_slice_overlay, save_png, Camera, RenderSettings};
use tfseg::simquery::{connected_components_filter, label_volume, scaled_similarity, AnnotationSet, ClassDef, KeepComponents};
use tfseg::synthgen::{gen_phantom, gen_sphere, gen_step_edge, gen_torus, three_class_phantom, PhantomSpec};
use tfseg::volgrid::{
    load_feature_stack, load_feature_volume, load_similarity_volume, load_volume, save_feature_stack,
    save_feature_volume_as, save_similarity_volume, save_volume, FeatureDtype, Resolution,
};
use tfseg::{Axis, Dims, SimilarityVolume};

use crate::annotations::{self, AnnotationFile};
use crate::error::{data, usage, CliError};
use crate::{Cli, Command, EvalArgs, ExtractArgs, Format, LabelArgs, MergeArgs, RefineArgs, RenderArgs, ServeArgs, SimArgs, SynthArgs, SynthKind};

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    match cli.cmd {
        Command::Synth(a) => synth(a),
        Command::ExtractToy(a) => extract(a),
        Command::Merge(a) => merge(a),
        Command::Sim(a) => sim(a),
        Command::Refine(a) => refine_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Label(a) => label(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a, cli.threads),
    }
}

fn set_threads(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))?;
    Ok(())
}

fn parse_triple<T: std::str::FromStr>(s: &str, what: &str) -> Result<[T; 3], CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || usage(format!("{what}: expected three comma-separated numbers, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<T> = parts.iter().map(|p| p.parse::<T>().map_err(|_| bad())).collect::<Result<_, _>>()?;
    let mut it = v.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

fn parse_dims(s: &str) -> Result<Dims, CliError> {
    let d = if s.contains(',') {
        Dims(parse_triple::<usize>(s, "--dim")?)
    } else {
        let n: usize = s.parse().map_err(|_| usage(format!("--dim: bad value `{s}`")))?;
        Dims::cube(n)
    };
    if d.0.contains(&0) {
        return Err(usage("--dim must be positive"));
    }
    Ok(d)
}

fn parse_axis(s: &str) -> Result<Axis, CliError> {
    s.parse().map_err(|e: String| usage(e))
}

fn parse_dtype(s: &str) -> Result<FeatureDtype, CliError> {
    match s {
        "f32" => Ok(FeatureDtype::F32),
        "f16" => Ok(FeatureDtype::F16),
        _ => Err(usage(format!("dtype `{s}`: expected f32 or f16"))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))
}

fn default_labels_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_labels.json"))
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let d = parse_dims(&a.dim)?;
    let short = *d.0.iter().min().unwrap() as f32;
    let center = match &a.center {
        Some(c) => parse_triple::<f32>(c, "--center")?,
        None => d.0.map(|n| (n as f32 - 1.0) / 2.0),
    };
    let labels_path = a.labels.clone().unwrap_or_else(|| default_labels_path(&a.out));
    let (v, labels) = match a.kind {
        SynthKind::Sphere => {
            let r = a.radius.unwrap_or(0.3 * short);
            let (v, l) = gen_sphere(d, center, r, a.inside, a.outside, a.smooth)?;
            (v, Some(l))
        }
        SynthKind::Torus => {
            let major = a.major.unwrap_or(0.27 * short);
            let minor = a.minor.unwrap_or(0.1 * short);
            let (v, l) = gen_torus(d, center, major, minor, parse_axis(&a.axis)?, a.inside, a.outside, a.smooth)?;
            (v, Some(l))
        }
        SynthKind::Phantom => {
            let spec: PhantomSpec = match &a.spec {
                Some(p) => read_json(p)?,
                None => PhantomSpec {
                    smooth: a.smooth,
                    ..three_class_phantom(d)
                },
            };
            let (v, l) = gen_phantom(d, &spec)?;
            (v, Some(l))
        }
        SynthKind::Edge => {
            let axis = parse_axis(&a.axis)?;
            let pos = a.position.unwrap_or(d[axis.index()] as f32 / 2.0);
            (gen_step_edge(d, axis, pos, a.lo, a.hi, a.noise, a.seed)?, None)
        }
    };
    save_volume(&v, &a.out)?;
    let mut report = json!({"volume": a.out, "dims": d});
    if let Some(l) = labels {
        save_labels(&l, &labels_path)?;
        let counts: serde_json::Map<String, serde_json::Value> = l
            .class_names
            .iter()
            .map(|(id, name)| (name.clone(), json!({"id": id, "voxels": l.count(*id)})))
            .collect();
        report["labels"] = json!(labels_path);
        report["classes"] = json!(counts);
    }
    print_json(&report);
    Ok(())
}

fn stack_path(dir: &Path, name: &str, axis: Axis) -> PathBuf {
    dir.join(format!("{name}.{}.fstk", ["x", "y", "z"][axis.index()]))
}

fn extract(a: ExtractArgs) -> Result<(), CliError> {
    let v = load_volume(&a.volume)?;
    let dtype = parse_dtype(&a.dtype)?;
    let plan = plan_for(v.dims, a.resize, a.patch)?;
    let stacks = toy_extract(&v, &plan)?;
    ensure_dir(&a.out)?;
    let name = a.name.unwrap_or_else(|| v.name.clone());
    let mut files = vec![];
    for (axis, s) in Axis::ALL.into_iter().zip(stacks) {
        let p = stack_path(&a.out, &name, axis);
        save_feature_stack(&s.with_dtype(dtype), &p)?;
        files.push(p);
    }
    let plan = plan.with_feature_dim(tfseg::featpipe::TOY_FEATURE_DIM);
    let plan_path = a.out.join("plan.json");
    fs::write(&plan_path, serde_json::to_vec_pretty(&plan)?)?;
    print_json(&json!({"stacks": files, "plan": plan_path, "target_feature_dims": plan.target_feature_dims}));
    Ok(())
}

fn find_stack_name(dir: &Path) -> Result<String, CliError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".x.fstk")).map(str::to_string))
        .collect();
    names.sort();
    match names.len() {
        1 => Ok(names.remove(0)),
        0 => Err(data(format!("no *.x.fstk in {}", dir.display()))),
        _ => Err(usage(format!("several stack sets in {}; pass --name", dir.display()))),
    }
}

fn merge(a: MergeArgs) -> Result<(), CliError> {
    let name = match a.name {
        Some(n) => n,
        None => find_stack_name(&a.dir)?,
    };
    let target = match &a.target {
        Some(t) => Dims(parse_triple::<usize>(t, "--target")?),
        None => {
            let plan: ExtractionPlan = read_json(&a.dir.join("plan.json"))?;
            plan.target_feature_dims
        }
    };
    let [fx, fy, fz] = Axis::ALL.map(|ax| load_feature_stack(&stack_path(&a.dir, &name, ax)));
    let fv = merge_stacks(&fx?, &fy?, &fz?, target)?;
    save_feature_volume_as(&fv, &a.out, parse_dtype(&a.dtype)?)?;
    print_json(&json!({"features": a.out, "dims": fv.dims, "source_dims": fv.source_dims, "feature_dim": fv.feature_dim}));
    Ok(())
}

fn sim_path(dir: &Path, id: u32, refined: bool) -> PathBuf {
    if refined {
        dir.join(format!("class_{id}_refined.svol"))
    } else {
        dir.join(format!("class_{id}.svol"))
    }
}

fn sim(a: SimArgs) -> Result<(), CliError> {
    let ann = annotations::load(&a.annotations)?;
    let fv = load_feature_volume(&a.features)?;
    ensure_dir(&a.out)?;
    let mut out = vec![];
    for c in &ann.classes {
        if c.points.is_empty() {
            return Err(data(format!("class {} has no annotation points", c.class.id)));
        }
        let mut set = AnnotationSet::new(c.class.id);
        set.add_all(&c.points, &fv)?;
        let s = scaled_similarity(&set, &fv, c.class.proximity)?;
        let p = sim_path(&a.out, c.class.id, false);
        save_similarity_volume(&s, &p)?;
        let above = s.data().iter().filter(|&&v| v >= c.class.iso_value).count();
        out.push(json!({"id": c.class.id, "name": c.class.name, "path": p, "dims": s.dims, "above_iso": above}));
    }
    print_json(&json!({"classes": out}));
    Ok(())
}

fn refine_cmd(a: RefineArgs) -> Result<(), CliError> {
    let mut cfg: RefineConfig = match &a.config {
        Some(p) => read_json(p).map_err(|e| usage(e.to_string()))?,
        None => RefineConfig::default(),
    };
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.sigma_spatial {
        cfg.sigma_spatial = v;
    }
    if let Some(v) = a.sigma_luma {
        cfg.sigma_luma = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.resolution {
        cfg.target_resolution = v;
    }
    cfg.validate()?;
    let low = load_similarity_volume(&a.sim, a.class_id)?;
    let v = load_volume(&a.volume)?;
    let r = refine(&low, &v, &cfg)?;
    let out = SimilarityVolume::new(r.volume.dims, r.volume.data().to_vec(), Resolution::Refined, a.class_id)?;
    save_similarity_volume(&out, &a.out)?;
    print_json(&json!({
        "refined": a.out,
        "dims": out.dims,
        "crop": {"lo": r.crop.lo, "hi": r.crop.hi},
        "vertices": r.stats.vertices,
        "iterations": r.stats.iterations,
        "converged": r.stats.converged,
        "residual": r.stats.residuals.last(),
    }));
    Ok(())
}

/// Class definitions with their displayed maps (refined when present).
fn load_class_maps(ann: &AnnotationFile, dir: &Path) -> Result<Vec<(ClassDef, SimilarityVolume, AnnotationSet)>, CliError> {
    let mut out = vec![];
    for c in &ann.classes {
        let id = c.class.id;
        let refined = sim_path(dir, id, true);
        let p = if refined.exists() { refined } else { sim_path(dir, id, false) };
        let s = load_similarity_volume(&p, id)?;
        let mut set = AnnotationSet::new(id);
        if let Some(bad) = c.points.iter().find(|p| p.iter().any(|&v| v < 0)) {
            return Err(data(format!("negative annotation point {bad:?}")));
        }
        set.extend_points(c.points.iter().map(|p| p.map(|v| v as u32)));
        out.push((c.class.clone(), s, set));
    }
    Ok(out)
}

fn render_cmd(a: RenderArgs) -> Result<(), CliError> {
    let v = load_volume(&a.volume)?;
    let ann = annotations::load(&a.annotations)?;
    let maps = load_class_maps(&ann, &a.sims)?;
    let img = match &a.slice {
        Some(spec) => {
            let (ax, idx) = spec
                .split_once(':')
                .ok_or_else(|| usage(format!("--slice `{spec}`: expected axis:index")))?;
            let axis = parse_axis(ax)?;
            let index: usize = idx.parse().map_err(|_| usage(format!("--slice index `{idx}`")))?;
            let layers: Vec<_> = maps.iter().filter(|(c, _, _)| c.visible).map(|(c, s, set)| (c, s, set)).collect();
            render_slice_overlay(&v, axis, index, &layers)?
        }
        None => {
            let cam = match &a.cam {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
                    let cam: Camera = serde_json::from_str(&text).map_err(|e| usage(format!("camera {}: {e}", p.display())))?;
                    cam.validate()?;
                    cam
                }
                None => Camera::overview(v.dims, a.width, a.height),
            };
            let settings: RenderSettings = match &a.settings {
                Some(p) => read_json(p).map_err(|e| usage(e.to_string()))?,
                None => RenderSettings::default(),
            };
            let layers: Vec<_> = maps.iter().map(|(c, s, _)| (c, s)).collect();
            render(&layers, v.dims, &cam, &settings)?
        }
    };
    save_png(&img, &a.out)?;
    print_json(&json!({"image": a.out, "width": img.width(), "height": img.height()}));
    Ok(())
}

fn label(a: LabelArgs) -> Result<(), CliError> {
    let v = load_volume(&a.volume)?;
    let ann = annotations::load(&a.annotations)?;
    let maps = load_class_maps(&ann, &a.sims)?;
    let resampled: Vec<SimilarityVolume> = maps
        .iter()
        .map(|(_, s, _)| if s.dims == v.dims { s.clone() } else { s.resample(v.dims) })
        .collect();
    let pairs: Vec<(&ClassDef, &SimilarityVolume)> = maps.iter().map(|(c, _, _)| c).zip(&resampled).collect();
    let mut labels = label_volume(&pairs)?;
    for ((c, _, set), ann) in maps.iter().zip(&ann.classes) {
        if !c.cc_filter || ann.points.is_empty() {
            continue;
        }
        let mask = labels.mask(c.id);
        let seeds: Vec<[usize; 3]> = set.points().iter().map(|p| p.map(|v| v as usize)).collect();
        let keep = connected_components_filter(&mask, v.dims, &KeepComponents::Containing(seeds))?;
        for (l, (m, k)) in labels.labels.iter_mut().zip(mask.iter().zip(&keep)) {
            if *m && !*k {
                *l = 0;
            }
        }
    }
    save_labels(&labels, &a.out)?;
    let counts: Vec<_> = ann
        .classes
        .iter()
        .map(|c| json!({"id": c.class.id, "name": c.class.name, "voxels": labels.count(c.class.id)}))
        .collect();
    print_json(&json!({"labels": a.out, "dims": labels.dims, "classes": counts}));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let pred = load_labels(&a.pred)?;
    let gt = load_labels(&a.gt)?;
    let mut report = evaluate(&pred, &gt, a.include_background)?;
    report.annotations_per_class = a.annotations_per_class;
    let fmt = match a.format {
        Format::Json => TableFormat::Json,
        Format::Csv => TableFormat::Csv,
        Format::Markdown => TableFormat::Markdown,
    };
    let text = report_to_table(&report, fmt);
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    Ok(())
}

fn serve(a: ServeArgs, threads: Option<usize>) -> Result<(), CliError> {
    let registry = tfserve::Registry::from_dir(&a.volumes)?;
    if registry.ids().next().is_none() {
        return Err(data(format!("no volumes in {}", a.volumes.display())));
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| usage(format!("bind {}: {e}", a.addr)))?;
        eprintln!("tfseg: serving {} volume(s) on http://{}", registry.ids().count(), listener.local_addr()?);
        let state = tfserve::AppState::new(registry, a.data_dir);
        tfserve::serve(listener, state).await?;
        Ok(())
    })
}
