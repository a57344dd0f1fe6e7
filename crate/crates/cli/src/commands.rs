use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use promptlens_core::causalsim::{run_synth, SynthRunConfig};
use promptlens_core::config::{load_toml, to_toml, RunConfig, VocabPaths};
use promptlens_core::dnet::DisentangleNet;
use promptlens_core::embstore::{read_embedding_set, EmbeddingSet};
use promptlens_core::evalkit::{
    export_report, export_representations, isd_probe_manifest, probe_eval, probe_train, prompt_sweep,
    template_manifest, EvalReport, ReportFormat, Template,
};
use promptlens_core::fsio::write_atomic;
use promptlens_core::pairgrad::{check_case, random_case};
use promptlens_core::promptgen::{plan_manifest, read_class_list, AugmentCombo, ManifestRow, Vocabulary};
use promptlens_core::trainer::train;
use promptlens_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    BankCommand, Command, ConfigArgs, EvalCommand, EvalInputs, ExportCommand, GradcheckArgs, PlanArgs,
    ProbeArgs, RepsArgs, SynthArgs, SynthCommand, TemplatesArgs, TrainArgs, VocabArgs, ZsArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Bank(BankCommand::Plan(a)) => bank_plan(a),
        Command::Bank(BankCommand::Templates(a)) => bank_templates(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(EvalCommand::Zs(a)) => eval_zs(a),
        Command::Eval(EvalCommand::Probe(a)) => eval_probe(a),
        Command::Synth(SynthCommand::Run(a)) => synth_run(a),
        Command::Export(ExportCommand::Reps(a)) => export_reps(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Config(a) => show_config(a),
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn vocabulary(args: &VocabArgs) -> Result<Vocabulary> {
    let base = run_config(args.config.as_deref())?.vocab;
    VocabPaths {
        adjectives: args.adjectives.clone().or(base.adjectives),
        styles: args.styles.clone().or(base.styles),
        synonyms: args.synonyms.clone().or(base.synonyms),
    }
    .load()
}

fn stdout_error(e: std::io::Error) -> Error {
    Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    }
}

fn emit_manifest(rows: &[ManifestRow], out: Option<&Path>) -> Result<()> {
    let mut bytes = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut bytes, r).expect("manifest rows serialize");
        bytes.push(b'\n');
    }
    match out {
        Some(p) => write_atomic(p, &bytes),
        None => std::io::stdout().lock().write_all(&bytes).map_err(stdout_error),
    }
}

fn bank_plan(a: PlanArgs) -> Result<()> {
    let vocab = vocabulary(&a.vocab)?;
    let combo: AugmentCombo = a.combo.parse()?;
    let classes = read_class_list(&a.classes)?;
    let rows = plan_manifest(&vocab, &classes, combo)?;
    emit_manifest(&rows, a.out.as_deref())?;
    eprintln!("{} prompts for {} classes ({combo})", rows.len(), classes.len());
    Ok(())
}

fn bank_templates(a: TemplatesArgs) -> Result<()> {
    let classes = read_class_list(&a.classes)?;
    let rows = if a.template.eq_ignore_ascii_case("ISD") {
        isd_probe_manifest(&vocabulary(&a.vocab)?, &classes)
    } else {
        let t: Template = a.template.parse().map_err(|_| {
            Error::Config(format!("unknown template {:?} (expected C, PC, CP or ISD)", a.template))
        })?;
        template_manifest(&classes, t)
    };
    emit_manifest(&rows, a.out.as_deref())
}

/// `net.clapnet` becomes `net.seed3.clapnet`.
fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    path.with_file_name(name)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config(a.config.as_deref())?.train;
    if let Some(tau) = a.tau {
        cfg.tau = tau;
    }
    if let Some(lr) = a.lr {
        cfg.adam.lr = lr;
    }
    if let Some(n) = a.max_steps {
        cfg.max_steps = n;
    }
    if a.batch_classes.is_some() {
        cfg.batch_classes = a.batch_classes;
    }
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    let bank = read_embedding_set(&a.bank)?;
    let several = cfg.seeds.len() > 1;
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let (net, log) = train(&bank, &cfg, seed)?;
        let out = if several { seeded_path(&a.out, seed) } else { a.out.clone() };
        net.save(&out)?;
        if let Some(log_path) = &a.log {
            let path = if several { seeded_path(log_path, seed) } else { log_path.clone() };
            write_atomic(&path, log.to_json().as_bytes())?;
        }
        let s = log.summary();
        let final_loss = s.final_loss.unwrap_or(s.initial_loss);
        eprintln!(
            "seed {seed}: loss {:.4} -> {:.4}, stopped at step {} ({:?}), {:.1}s, wrote {}",
            s.initial_loss,
            final_loss,
            s.stop_step,
            s.stop_reason,
            started.elapsed().as_secs_f64(),
            out.display()
        );
    }
    Ok(())
}

fn load_net(spec: &str) -> Result<Option<DisentangleNet>> {
    if spec.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        DisentangleNet::load(Path::new(spec)).map(Some)
    }
}

struct EvalSetup {
    net: Option<DisentangleNet>,
    images: EmbeddingSet,
    texts: [EmbeddingSet; 3],
    apply_to_text: bool,
    dataset: String,
    config: RunConfig,
}

fn eval_setup(a: &EvalInputs) -> Result<EvalSetup> {
    let config = run_config(a.config.as_deref())?;
    Ok(EvalSetup {
        net: load_net(&a.net)?,
        images: read_embedding_set(&a.images)?,
        texts: [
            read_embedding_set(&a.class_texts_c)?,
            read_embedding_set(&a.class_texts_pc)?,
            read_embedding_set(&a.class_texts_cp)?,
        ],
        apply_to_text: config.eval.apply_to_text && !a.raw_text_anchors,
        dataset: a.dataset.clone().unwrap_or_else(|| config.eval.dataset.clone()),
        config,
    })
}

impl EvalSetup {
    fn sweep(&self) -> Result<promptlens_core::evalkit::TemplateScores> {
        let pairs: Vec<(Template, &EmbeddingSet)> = Template::ALL.into_iter().zip(self.texts.iter()).collect();
        prompt_sweep(self.net.as_ref(), &self.images, &pairs, self.apply_to_text)
    }
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => export_report(report, p, ReportFormat::from_path(p)),
        None => {
            let text = serde_json::to_string_pretty(report).expect("report serializes");
            writeln!(std::io::stdout().lock(), "{text}").map_err(stdout_error)
        }
    }
}

fn eval_zs(a: ZsArgs) -> Result<()> {
    let setup = eval_setup(&a.inputs)?;
    let report = EvalReport::new(setup.dataset.clone(), setup.sweep()?, None, None);
    emit_report(&report, a.inputs.report.as_deref())
}

fn eval_probe(a: ProbeArgs) -> Result<()> {
    let setup = eval_setup(&a.inputs)?;
    let mut probe_cfg = setup.config.eval.probe.clone();
    if let Some(seed) = a.seed {
        probe_cfg.seed = seed;
    }
    let scores = setup.sweep()?;
    let net = setup.net.as_ref();
    let (lin_c_clf, _) = probe_train(&setup.texts[0], net, &probe_cfg)?;
    let lin_c = probe_eval(&lin_c_clf, net, &setup.images)?;
    let isd_texts = read_embedding_set(&a.probe_train)?;
    let (lin_isd_clf, _) = probe_train(&isd_texts, net, &probe_cfg)?;
    let lin_isd = probe_eval(&lin_isd_clf, net, &setup.images)?;
    let report = EvalReport::new(setup.dataset.clone(), scores, Some(lin_c), Some(lin_isd)).with_probe(probe_cfg);
    emit_report(&report, a.inputs.report.as_deref())
}

fn synth_run(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthRunConfig = match &a.config {
        Some(p) => load_toml(p)?,
        None => SynthRunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.causal.seed = seed;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    let started = Instant::now();
    let outcome = run_synth(&cfg)?;
    write_atomic(&a.report, outcome.report.to_json().as_bytes())?;
    if let Some(p) = &a.net {
        outcome.net.save(p)?;
    }
    if let Some(p) = &a.log {
        write_atomic(p, outcome.log.to_json().as_bytes())?;
    }
    let r = &outcome.report;
    eprintln!(
        "content R2 {:.3}, style R2 {:.3}, gap {:.3} (raw embedding gap {:.3}), {:.1}s",
        r.content_r2,
        r.style_r2,
        r.gap,
        r.baseline_gap,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn export_reps(a: RepsArgs) -> Result<()> {
    let net = load_net(&a.net)?;
    let set = read_embedding_set(&a.set)?;
    export_representations(net.as_ref(), &set, &a.out)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.instances == 0 || a.max_k < 1 || a.max_d < 2 {
        return Err(Error::Invalid("need at least one instance, max-k >= 1 and max-d >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(0));
    let mut worst = 0.0f64;
    for _ in 0..a.instances {
        let case = random_case(&mut rng, a.max_k, a.max_d)?;
        worst = worst.max(check_case(&case)?.max_rel_error);
    }
    println!("max relative error {worst:.3e} over {} instances", a.instances);
    if worst > a.tol {
        return Err(Error::Invalid(format!("gradient check failed: {worst:.3e} > {:.0e}", a.tol)));
    }
    Ok(())
}

fn show_config(a: ConfigArgs) -> Result<()> {
    let text = if a.synth {
        let cfg: SynthRunConfig = match &a.config {
            Some(p) => load_toml(p)?,
            None => SynthRunConfig::default(),
        };
        to_toml(&cfg)
    } else {
        run_config(a.config.as_deref())?.to_toml_string()
    };
    std::io::stdout().lock().write_all(text.as_bytes()).map_err(stdout_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_suffix() {
        assert_eq!(seeded_path(Path::new("out/net.clapnet"), 2), PathBuf::from("out/net.seed2.clapnet"));
        assert_eq!(seeded_path(Path::new("log"), 0), PathBuf::from("log.seed0"));
    }

    #[test]
    fn none_means_no_network() {
        assert!(load_net("none").unwrap().is_none());
        assert!(load_net("NONE").unwrap().is_none());
        assert!(load_net("/nonexistent/net.clapnet").unwrap_err().is_io());
    }
}
