use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use adapter_lens::adapters::LayerSpan;
use adapter_lens::analysis::{
    ablation_sweep, collect_probe_data_all_layers, collect_property_reps, intervention_sweep, k_grid, logit_lens,
    n_features_grid, norm_profile, pca_alignment, probe_sweep, AlignmentReport, ProbeSweep,
};
use adapter_lens::checkpoint;
use adapter_lens::corpus::{generate_language_pair, LanguagePair};
use adapter_lens::training::{adapt, pretrain, LogRecord};
use adapter_lens::{Adapters32, Params32};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{hash_json, ExperimentConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SynthGen,
    Pretrain,
    Adapt,
    Lens,
    Norms,
    Ablate,
    Probe,
    Intervene,
    PcaAlign,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Lens => "lens",
            Command::Norms => "norms",
            Command::Ablate => "ablate",
            Command::Probe => "probe",
            Command::Intervene => "intervene",
            Command::PcaAlign => "pca-align",
            Command::Report => "report",
        }
    }
}

/// Where each stage of an experiment lives under the output root. Stage
/// directories are keyed by the hash of the configuration sections that
/// determine their contents, so later stages find earlier ones.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub config: ExperimentConfig,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, config: ExperimentConfig) -> Self {
        Self {
            root: root.into(),
            config,
        }
    }

    pub fn config_hash(&self) -> String {
        hash_json(&self.config)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join(format!("corpus-{}", hash_json(&self.config.corpus)))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        let c = &self.config;
        self.root.join(format!("pretrain-{}", hash_json(&(&c.model, &c.corpus, &c.pretrain))))
    }

    pub fn adapt_dir(&self) -> PathBuf {
        let c = &self.config;
        self.root.join(format!("adapt-{}", hash_json(&(&c.model, &c.corpus, &c.pretrain, &c.adapt))))
    }

    pub fn analysis_dir(&self, command: Command) -> PathBuf {
        self.root.join(format!("{}-{}", command.name(), self.config_hash()))
    }

    pub fn base_stem(&self) -> PathBuf {
        self.pretrain_dir().join("base")
    }

    pub fn adapter_stem(&self) -> PathBuf {
        self.adapt_dir().join("adapters")
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

/// What a successful command reports on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutput {
    pub command: String,
    pub run_dir: PathBuf,
    pub outputs: Vec<String>,
    pub summary: Value,
}

impl RunOutput {
    pub fn to_json(&self) -> Value {
        json!({
            "status": "ok",
            "command": self.command,
            "run_dir": self.run_dir,
            "outputs": self.outputs,
            "summary": self.summary,
        })
    }
}

pub fn run(command: Command, layout: &Layout) -> Result<RunOutput, CliError> {
    match command {
        Command::SynthGen => synth_gen(layout),
        Command::Pretrain => run_pretrain(layout),
        Command::Adapt => run_adapt(layout),
        _ => run_analyses(command, layout),
    }
}

/// Collects the files a command writes into its run directory.
struct RunDir<'a> {
    layout: &'a Layout,
    command: Command,
    dir: PathBuf,
    outputs: Vec<String>,
}

impl<'a> RunDir<'a> {
    fn create(layout: &'a Layout, command: Command, dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)?;
        let mut rd = Self {
            layout,
            command,
            dir,
            outputs: Vec::new(),
        };
        rd.write("config.json", &layout.config.to_pretty_json())?;
        Ok(rd)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)?;
        self.outputs.push(self.layout.relative(&path));
        Ok(())
    }

    fn document(&mut self, name: &str, provenance: &Value, result: Value) -> Result<(), CliError> {
        let doc = json!({
            "command": self.command.name(),
            "config_hash": self.layout.config_hash(),
            "config": self.layout.config,
            "provenance": provenance,
            "timestamp": timestamp(),
            "result": result,
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Other(e.to_string()))?;
        self.write(name, &text)
    }

    fn finish(self, summary: Value) -> RunOutput {
        RunOutput {
            command: self.command.name().to_string(),
            run_dir: self.dir,
            outputs: self.outputs,
            summary,
        }
    }
}

fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("{secs}")
}

fn to_value<S: Serialize>(v: &S) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn language_pair(cfg: &ExperimentConfig) -> Result<LanguagePair, CliError> {
    Ok(generate_language_pair(cfg.corpus.seed, &cfg.corpus.pair)?)
}

fn seeds(cfg: &ExperimentConfig) -> Value {
    json!({
        "corpus": cfg.corpus.seed,
        "pretrain": cfg.pretrain.seed,
        "adapt": cfg.adapt.train.seed,
        "analysis": cfg.analysis.seed,
    })
}

fn provenance(layout: &Layout, pair: &LanguagePair, checkpoints: &[(&str, &Path)]) -> Result<Value, CliError> {
    let mut ck = serde_json::Map::new();
    for (name, stem) in checkpoints {
        ck.insert(
            name.to_string(),
            json!({
                "path": layout.relative(stem),
                "sha256": checkpoint::checkpoint_hash(stem)?,
            }),
        );
    }
    Ok(json!({
        "corpus_hash": pair.content_hash(),
        "checkpoints": ck,
        "seeds": seeds(&layout.config),
    }))
}

fn log_csv(log: &[LogRecord]) -> String {
    let mut s = String::from("step,train_loss,val_ppl,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.train_loss, r.val_ppl, r.lr));
    }
    s
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

fn progress(phase: &'static str) -> impl FnMut(&LogRecord) {
    move |r: &LogRecord| {
        eprintln!(
            "[{phase}] step {:>6}  train_loss {:>8.4}  val_ppl {:>10.4}  lr {:.2e}",
            r.step, r.train_loss, r.val_ppl, r.lr
        )
    }
}

fn synth_gen(layout: &Layout) -> Result<RunOutput, CliError> {
    let pair = language_pair(&layout.config)?;
    let mut rd = RunDir::create(layout, Command::SynthGen, layout.corpus_dir())?;
    pair.save(&rd.dir)?;
    for f in ["spec.json", "source.train.txt", "source.val.txt", "target.train.txt", "target.val.txt"] {
        rd.outputs.push(layout.relative(&rd.dir.join(f)));
    }
    let result = json!({
        "corpus_hash": pair.content_hash(),
        "source_train_tokens": pair.source.train.n_tokens(),
        "source_val_tokens": pair.source.val.n_tokens(),
        "target_train_tokens": pair.target.train.n_tokens(),
        "target_val_tokens": pair.target.val.n_tokens(),
        "shared_tokens": pair.target.spec.shared_tokens.len(),
    });
    let prov = provenance(layout, &pair, &[])?;
    rd.document("synth-gen.json", &prov, result.clone())?;
    Ok(rd.finish(result))
}

fn run_pretrain(layout: &Layout) -> Result<RunOutput, CliError> {
    let cfg = &layout.config;
    let pair = language_pair(cfg)?;
    let mix = (cfg.pretrain.mix_fraction > 0.0).then_some(&pair.target.train);
    let out = pretrain::<f32>(&cfg.pretrain, &cfg.model, &pair.source.train, &pair.source.val, mix, progress("pretrain"))?;
    let mut rd = RunDir::create(layout, Command::Pretrain, layout.pretrain_dir())?;
    let stem = layout.base_stem();
    checkpoint::save_model(&out.params, &stem)?;
    rd.outputs.push(layout.relative(&stem.with_extension("json")));
    rd.outputs.push(layout.relative(&stem.with_extension("bin")));
    rd.write("log.csv", &log_csv(&out.log))?;
    rd.write("train_losses.csv", &losses_csv(&out.train_losses))?;
    let mut best = out.best.clone();
    best.path = layout.relative(&stem);
    let result = json!({ "best": best, "log": out.log });
    let prov = provenance(layout, &pair, &[("base", &stem)])?;
    rd.document("pretrain.json", &prov, result)?;
    Ok(rd.finish(json!({ "best_step": best.step, "val_ppl": best.validation_perplexity })))
}

fn require(stem: &Path) -> Result<(), CliError> {
    if checkpoint::exists(stem) {
        Ok(())
    } else {
        Err(CliError::MissingCheckpoint(stem.with_extension("json")))
    }
}

fn run_adapt(layout: &Layout) -> Result<RunOutput, CliError> {
    let cfg = &layout.config;
    let base_stem = layout.base_stem();
    require(&base_stem)?;
    let base = checkpoint::load_model::<f32>(&base_stem)?;
    if base.config != cfg.model {
        return Err(CliError::Other("base checkpoint does not match model config".into()));
    }
    let pair = language_pair(cfg)?;
    let out = adapt(&cfg.adapt.train, &base, &cfg.adapt.adapter, &pair.target.train, &pair.target.val, progress("adapt"))?;
    let mut rd = RunDir::create(layout, Command::Adapt, layout.adapt_dir())?;
    let stem = layout.adapter_stem();
    checkpoint::save_adapters(&out.adapters, &out.params, &stem)?;
    rd.outputs.push(layout.relative(&stem.with_extension("json")));
    rd.outputs.push(layout.relative(&stem.with_extension("bin")));
    rd.write("log.csv", &log_csv(&out.log))?;
    rd.write("train_losses.csv", &losses_csv(&out.train_losses))?;
    let mut best = out.best.clone();
    best.path = layout.relative(&stem);
    let result = json!({
        "best": best,
        "log": out.log,
        "adapter_parameters": out.adapters.n_parameters(),
    });
    let prov = provenance(layout, &pair, &[("base", &base_stem), ("adapters", &stem)])?;
    rd.document("adapt.json", &prov, result)?;
    Ok(rd.finish(json!({ "best_step": best.step, "val_ppl": best.validation_perplexity })))
}

/// Everything an analysis needs: both checkpoints, the corpus, and the
/// evaluation windows.
struct Loaded {
    pair: LanguagePair,
    base: Params32,
    adapters: Adapters32,
    adapted: Params32,
    target_windows: Vec<Vec<u32>>,
    source_windows: Vec<Vec<u32>>,
    provenance: Value,
}

fn load(layout: &Layout) -> Result<Loaded, CliError> {
    let cfg = &layout.config;
    let (base_stem, ad_stem) = (layout.base_stem(), layout.adapter_stem());
    require(&base_stem)?;
    require(&ad_stem)?;
    let base = checkpoint::load_model::<f32>(&base_stem)?;
    let (adapters, adapted) = checkpoint::load_adapters(&ad_stem, &base)?;
    let pair = language_pair(cfg)?;
    let windows = |c: &adapter_lens::corpus::Corpus| {
        let mut w = c.chunks(cfg.analysis.window_len);
        if let Some(m) = cfg.analysis.max_windows {
            w.truncate(m);
        }
        w
    };
    let target_windows = windows(&pair.target.val);
    let source_windows = windows(&pair.source.val);
    if target_windows.is_empty() {
        return Err(CliError::Other("no analysis windows: validation split shorter than analysis.window_len".into()));
    }
    let provenance = provenance(layout, &pair, &[("base", &base_stem), ("adapters", &ad_stem)])?;
    Ok(Loaded {
        pair,
        base,
        adapters,
        adapted,
        target_windows,
        source_windows,
        provenance,
    })
}

/// One analysis: its JSON result, CSV tables, and stdout summary.
struct Section {
    name: &'static str,
    result: Value,
    tables: Vec<(String, String)>,
    summary: Value,
}

fn lens(layout: &Layout, l: &Loaded) -> Result<Section, CliError> {
    let table = l.pair.lang_id_table();
    let view = l.adapters.view();
    let r = logit_lens(&l.adapted, Some(&view), &l.target_windows, &table, &layout.config.analysis.lens)?;
    let fractions: Vec<f64> = r.layers.iter().map(|x| x.fraction_target).collect();
    Ok(Section {
        name: "lens",
        result: to_value(&r),
        tables: vec![("lens.csv".into(), r.to_csv())],
        summary: json!({ "fraction_target": fractions }),
    })
}

fn norms(layout: &Layout, l: &Loaded) -> Result<Section, CliError> {
    let a = &layout.config.analysis;
    let view = l.adapters.view();
    let r = norm_profile(&l.adapted, Some(&view), &l.target_windows, a.norm_tokens, a.seed)?;
    let adapter: Vec<f64> = r.layers.iter().map(|x| x.adapter_out).collect();
    Ok(Section {
        name: "norms",
        result: to_value(&r),
        tables: vec![("norms.csv".into(), r.to_csv())],
        summary: json!({ "adapter_out": adapter }),
    })
}

fn ablate(layout: &Layout, l: &Loaded) -> Result<Section, CliError> {
    let spans: Option<Vec<LayerSpan>> = layout
        .config
        .analysis
        .ablation_spans
        .as_ref()
        .map(|s| s.iter().map(|&[a, b]| LayerSpan::new(a, b)).collect());
    let r = ablation_sweep(&l.adapted, &l.adapters, &l.target_windows, spans.as_deref())?;
    Ok(Section {
        name: "ablation",
        result: to_value(&r),
        tables: vec![("ablation.csv".into(), r.to_csv())],
        summary: json!({ "full_ppl": r.full_ppl, "single_layer_delta_ppl": r.single_layer_deltas() }),
    })
}

fn probe_data_sweep(layout: &Layout, l: &Loaded, ks: &[usize]) -> Result<ProbeSweep, CliError> {
    let a = &layout.config.analysis;
    let data = collect_probe_data_all_layers(
        &l.adapted,
        &l.adapters,
        &l.target_windows,
        a.negative_case,
        a.probe_per_class,
        a.seed,
    )?;
    Ok(probe_sweep(&data, ks, a.seed, &a.logistic)?)
}

fn probe(layout: &Layout, l: &Loaded) -> Result<Section, CliError> {
    let ks = layout
        .config
        .analysis
        .probe_ks
        .clone()
        .unwrap_or_else(|| k_grid(layout.config.model.d_model));
    let r = probe_data_sweep(layout, l, &ks)?;
    let k1: Vec<Option<f64>> = (1..=layout.config.model.n_layers).map(|layer| r.accuracy(layer, ks[0])).collect();
    Ok(Section {
        name: "probe",
        result: to_value(&r),
        tables: vec![("probe.csv".into(), r.to_csv())],
        summary: json!({ "k": ks[0], "accuracy": k1 }),
    })
}

fn intervene(layout: &Layout, l: &Loaded) -> Result<Section, CliError> {
    let a = &layout.config.analysis;
    let rankings = probe_data_sweep(layout, l, &[])?.rankings;
    let grid = a
        .intervention_features
        .clone()
        .unwrap_or_else(|| n_features_grid(l.adapters.output_dim()));
    let r = intervention_sweep(
        &l.adapted,
        &l.adapters,
        &l.target_windows,
        &rankings,
        &grid,
        &a.intervention_modes,
        a.intervention_scope,
        a.seed,
    )?;
    Ok(Section {
        name: "intervention",
        result: json!({ "report": r, "rankings": rankings }),
        tables: vec![("intervention.csv".into(), r.to_csv())],
        summary: json!({ "baseline_ppl": r.baseline_ppl, "entries": r.entries.len() }),
    })
}

fn pca_align(layout: &Layout, l: &Loaded) -> Result<Section, CliError> {
    let a = &layout.config.analysis;
    let layers: Vec<usize> = (1..=layout.config.model.n_layers).collect();
    let view = l.adapters.view();
    let mut reports: Vec<AlignmentReport> = Vec::new();
    for &prop in &a.pca_properties {
        let src = collect_property_reps(
            &l.base,
            None,
            &l.source_windows,
            &l.pair.source.spec,
            prop,
            &layers,
            a.pca_tokens,
            a.seed,
        )?;
        let tgt = collect_property_reps(
            &l.adapted,
            Some(&view),
            &l.target_windows,
            &l.pair.target.spec,
            prop,
            &layers,
            a.pca_tokens,
            a.seed,
        )?;
        for (s, t) in src.iter().zip(&tgt) {
            reports.push(pca_alignment(s, t)?);
        }
    }
    let mut cos = String::from("property,layer,pc1_pc1,pc1_pc2,pc2_pc1,pc2_pc2,n_source,n_target\n");
    let mut points = String::from("property,layer,x,y,class\n");
    for r in &reports {
        let prop = to_value(&r.property);
        let prop = prop.as_str().unwrap_or_default();
        let c = r.cosines;
        cos.push_str(&format!(
            "{prop},{},{},{},{},{},{},{}\n",
            r.layer, c[0][0], c[0][1], c[1][0], c[1][1], r.n_source, r.n_target
        ));
        for p in &r.projected {
            points.push_str(&format!("{prop},{},{},{},{}\n", r.layer, p.x, p.y, p.class));
        }
    }
    let diag: Vec<Value> = reports
        .iter()
        .map(|r| json!({ "property": r.property, "layer": r.layer, "pc1": r.cosines[0][0], "pc2": r.cosines[1][1] }))
        .collect();
    Ok(Section {
        name: "pca_alignment",
        result: to_value(&reports),
        tables: vec![("pca_cosines.csv".into(), cos), ("pca_points.csv".into(), points)],
        summary: json!({ "cosines": diag }),
    })
}

fn run_analyses(command: Command, layout: &Layout) -> Result<RunOutput, CliError> {
    let loaded = load(layout)?;
    type Analysis = fn(&Layout, &Loaded) -> Result<Section, CliError>;
    let analyses: Vec<Analysis> = match command {
        Command::Lens => vec![lens],
        Command::Norms => vec![norms],
        Command::Ablate => vec![ablate],
        Command::Probe => vec![probe],
        Command::Intervene => vec![intervene],
        Command::PcaAlign => vec![pca_align],
        Command::Report => vec![lens, norms, ablate, probe, intervene, pca_align],
        Command::SynthGen | Command::Pretrain | Command::Adapt => unreachable!("handled by run"),
    };
    let mut rd = RunDir::create(layout, command, layout.analysis_dir(command))?;
    let mut results = serde_json::Map::new();
    let mut summary = serde_json::Map::new();
    for f in analyses {
        let s = f(layout, &loaded)?;
        eprintln!("[{}] {} done", command.name(), s.name);
        for (name, text) in &s.tables {
            rd.write(name, text)?;
        }
        results.insert(s.name.to_string(), s.result);
        summary.insert(s.name.to_string(), s.summary);
    }
    let result = if results.len() == 1 {
        results.into_iter().next().expect("one entry").1
    } else {
        Value::Object(results)
    };
    let summary = if summary.len() == 1 {
        summary.into_iter().next().expect("one entry").1
    } else {
        Value::Object(summary)
    };
    rd.document(&format!("{}.json", command.name()), &loaded.provenance, result)?;
    Ok(rd.finish(summary))
}
