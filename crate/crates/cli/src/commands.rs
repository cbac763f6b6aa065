use std::fs;
use std::path::{Path, PathBuf};

use refcat::charis::Backends;
use refcat::dit::{Checkpoint, TextCondition};
use refcat::flow::sample as euler_sample;
use refcat::synthdata::{
    build_corpus, decode_latent, encode_latent, encode_pairs, load_manifest, prompt_text,
    prompt_tokens, write_corpus, Context, Pose,
};
use refcat::train::{
    self, curve_csv, evaluate, gradcheck as run_gradcheck, AblationAxis, EvalItem, EvalRecord,
    EvalSummary, Runtime,
};
use refcat::{Error, Result};
use serde::Serialize;

use crate::config::{RunConfig, SNAPSHOT_FILE};
use crate::Common;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write(path, text)
}

/// A prepared invocation: effective config, output directory, workers.
struct Session {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
}

impl Session {
    fn open(common: &Common, flags: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            cfg.set_seed(seed);
        }
        flags(&mut cfg);
        let cfg = cfg.apply_overrides(&common.overrides)?;
        let workers = match common.workers {
            Some(0) => return Err(Error::Config("--workers must be at least 1".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Session {
            cfg,
            out: common.out.clone(),
            workers,
        })
    }

    /// Creates the output directory and writes the config snapshot; refuses
    /// to write into an input directory.
    fn prepare(&self, inputs: &[&Path]) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        let out = self.out.canonicalize().map_err(|e| io_err(&self.out, e))?;
        for input in inputs {
            if input.canonicalize().ok().as_deref() == Some(out.as_path()) {
                return Err(Error::Config(format!(
                    "--out must differ from input {}",
                    input.display()
                )));
            }
        }
        write(&self.out.join(SNAPSHOT_FILE), self.cfg.to_toml()?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn backends(&self) -> Result<Backends> {
        self.cfg.backends.build()
    }
}

pub fn gen_data(common: &Common, subjects: Option<usize>, pairs: Option<usize>) -> Result<()> {
    let s = Session::open(common, |c| {
        if let Some(n) = subjects {
            c.corpus.subjects = n;
        }
        if let Some(n) = pairs {
            c.corpus.pairs_per_subject = n;
        }
    })?;
    s.cfg.corpus.validate()?;
    s.prepare(&[])?;
    let corpus = build_corpus(&s.cfg.corpus, &s.backends()?, s.workers)?;
    write_corpus(&s.out, &corpus)?;
    eprintln!(
        "retained {} of {} candidate pairs from {} subjects",
        corpus.retained_count(),
        corpus.candidates.len(),
        corpus.subjects.len()
    );
    Ok(())
}

fn eval_items(root: &Path) -> Result<Vec<EvalItem>> {
    load_manifest(root)?
        .iter()
        .map(|r| EvalItem::from_record(root, r))
        .collect()
}

#[derive(Serialize)]
struct EvalReport<'a> {
    summary: &'a EvalSummary,
    records: &'a [EvalRecord],
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn eval_csv(records: &[EvalRecord], summary: &EvalSummary) -> String {
    let mut s =
        String::from("pair_id,s_id,s_prompt,s_color,s_quality,s_diversity,charis,color_gt\n");
    for r in records {
        let c = &r.charis;
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6}\n",
            r.pair_id,
            cell(c.id),
            cell(c.prompt),
            cell(c.color),
            cell(c.quality),
            cell(c.diversity),
            c.composite,
            r.color_gt.score
        ));
    }
    s.push_str(&format!(
        "mean,{},{},{},{},{},{:.6},{:.6}\n",
        cell(summary.id),
        cell(summary.prompt),
        cell(summary.color),
        cell(summary.quality),
        cell(summary.diversity),
        summary.composite,
        summary.color_gt
    ));
    s
}

fn write_eval(s: &Session, records: &[EvalRecord], summary: &EvalSummary) -> Result<()> {
    write_json(&s.path("eval.json"), &EvalReport { summary, records })?;
    write(&s.path("eval.csv"), eval_csv(records, summary))
}

pub fn train(common: &Common, data: &Path, eval_data: Option<&Path>) -> Result<()> {
    let s = Session::open(common, |_| {})?;
    s.cfg.train.validate()?;
    let mut inputs = vec![data];
    inputs.extend(eval_data);
    s.prepare(&inputs)?;
    let pairs = encode_pairs(data, &load_manifest(data)?)?;
    let out_dir = s.out.clone();
    let mut save = |step: usize, ck: &Checkpoint| ck.save(&out_dir.join(format!("ckpt-{step}")));
    let mut rt = Runtime::with_workers(s.workers);
    rt.on_checkpoint = Some(&mut save);
    let outcome = match train::train(&pairs, &s.cfg.train, &mut rt) {
        Ok(o) => o,
        Err(Error::Diverged { step, last_good }) => {
            last_good.save(&s.path("ckpt-last-good"))?;
            return Err(Error::Diverged { step, last_good });
        }
        Err(e) => return Err(e),
    };
    let mut record = outcome.record;
    outcome.checkpoint.save(&s.path("ckpt-final"))?;
    write(&s.path("base_curve.csv"), curve_csv(&record.base_curve))?;
    write(&s.path("curve.csv"), curve_csv(&record.curve))?;
    if let Some(root) = eval_data {
        let (records, summary) = evaluate(
            &eval_items(root)?,
            &outcome.checkpoint,
            &s.cfg.eval,
            &s.backends()?,
            s.workers,
        )?;
        write_eval(&s, &records, &summary)?;
        record.eval = Some(summary);
    }
    write_json(&s.path("run.json"), &record)?;
    eprintln!(
        "probe loss {:.5} -> {:.5} over {} adapter steps ({:.1?})",
        record.probe_initial.loss,
        record.probe_final.loss,
        record.curve.len(),
        record.wall_clock
    );
    Ok(())
}

pub fn ablate(
    common: &Common,
    data: &Path,
    axis: AblationAxis,
    eval_data: Option<&Path>,
) -> Result<()> {
    let s = Session::open(common, |_| {})?;
    s.cfg.train.validate()?;
    let mut inputs = vec![data];
    inputs.extend(eval_data);
    s.prepare(&inputs)?;
    let pairs = encode_pairs(data, &load_manifest(data)?)?;
    let items = eval_items(eval_data.unwrap_or(data))?;
    let result = train::ablate(
        &pairs,
        &items,
        &s.cfg.train,
        axis,
        &s.cfg.eval,
        &s.backends()?,
        s.workers,
    )?;
    for (name, run) in &result.runs {
        let dir = s.path(name);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write(&dir.join("curve.csv"), curve_csv(&run.curve))?;
    }
    write(&s.path("ablation.csv"), result.table_csv())?;
    write_json(&s.path("ablation.json"), &result)?;
    eprint!("{}", result.table_csv());
    Ok(())
}

pub fn sample(
    common: &Common,
    checkpoint: &Path,
    reference: &Path,
    pose: Option<Pose>,
    context: Option<Context>,
) -> Result<()> {
    let s = Session::open(common, |c| {
        if let Some(p) = pose {
            c.sample.pose = p;
        }
        if let Some(x) = context {
            c.sample.context = x;
        }
    })?;
    s.cfg.eval.sampler.validate()?;
    s.prepare(&[checkpoint, reference])?;
    let ck = Checkpoint::load(checkpoint)?;
    let image = image::open(reference)
        .map_err(|e| Error::Format {
            path: reference.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let latent = encode_latent(&image)?;
    let (pose, context) = (s.cfg.sample.pose, s.cfg.sample.context);
    let tokens = prompt_tokens(pose, context, ck.params.config().text_tokens)?;
    let dit = refcat::dit::Dit::new(&ck.params, ck.lora.as_ref())?;
    let z = euler_sample(
        &latent,
        &TextCondition::Tokens(tokens),
        &dit,
        &s.cfg.eval.sampler,
    )?;
    let out = decode_latent(&z, image.width())?;
    let path = s.path("sample.png");
    out.save(&path).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    eprintln!("wrote {} ({})", path.display(), prompt_text(pose, context));
    Ok(())
}

pub fn eval(common: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let s = Session::open(common, |_| {})?;
    s.prepare(&[data, checkpoint])?;
    let ck = Checkpoint::load(checkpoint)?;
    let (records, summary) = evaluate(
        &eval_items(data)?,
        &ck,
        &s.cfg.eval,
        &s.backends()?,
        s.workers,
    )?;
    write_eval(&s, &records, &summary)?;
    eprintln!(
        "{} pairs: composite {:.4}, colour on ground-truth regions {:.4}",
        summary.pairs, summary.composite, summary.color_gt
    );
    Ok(())
}

pub fn gradcheck(common: &Common) -> Result<()> {
    let s = Session::open(common, |_| {})?;
    s.prepare(&[])?;
    let report = run_gradcheck(&s.cfg.gradcheck.model, s.cfg.gradcheck.seed)?;
    write_json(&s.path("gradcheck.json"), &report)?;
    for g in report.base.iter().chain(&report.lora) {
        eprintln!(
            "{:<32} max_rel {:.3e} {}",
            g.name,
            g.max_rel_err,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    report.ensure()
}
