use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tvq::config::{existing, writable, RunConfig};
use tvq::corpus::{load_corpus, load_embeddings, load_vocab, Vocabulary};
use tvq::dataset::BowDataset;
use tvq::eval::evaluate;
use tvq::format::Container;
use tvq::seq::{decode_sequence, positional_histogram, train_ar, ArFile, ArMode, SeqPair, SequenceDataset};
use tvq::synth::{identity_autoencoder, planted_corpus, regime_sequences, PlantedConfig, RegimeConfig, WordPlacement};
use tvq::topic::{train_topic_model, ThetaMode, TopicFile, TopicModel};
use tvq::vq::{build_conceptual_vocab, train_vqvae, VqConfig, VqModel};
use tvq::{Error, Result};

#[derive(Parser)]
#[command(name = "tvq", version, about = "Topic modeling over vector-quantized embeddings")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the VQ autoencoder and codebook on an embedding table.
    PretrainVq(PretrainArgs),
    /// Write the conceptual bag-of-words dataset for a corpus.
    Encode(EncodeArgs),
    /// Train a topic model on an encoded dataset.
    Train(TrainArgs),
    /// Print the top words of every topic.
    Topics(TopicsArgs),
    /// Sample documents or code sequences.
    Sample(SampleArgs),
    /// Train the autoregressive prior over code sequences.
    TrainAr(TrainArArgs),
    /// Write the evaluation report.
    Eval(EvalArgs),
    /// Write a synthetic dataset.
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output `TVQM` file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_codes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    codebook_lr: Option<f64>,
    #[arg(long)]
    expansion: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    /// Output JSON-lines dataset.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    expansion: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    /// Output `TVQT` file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_topics: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct TopicsArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Also write the listing with the resolved config as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    Bow,
    Seq,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "bow")]
    mode: SampleMode,
    /// `uniform`, `onehot:K` or comma-separated proportions.
    #[arg(long, default_value = "uniform")]
    theta: String,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    ar: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    n_words: usize,
    #[arg(long, default_value_t = 1)]
    n_samples: usize,
    /// Decode sampled sequences through the VQ decoder.
    #[arg(long)]
    decode: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    Frozen,
    Unconditioned,
}

#[derive(Args)]
struct TrainArArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    /// Topic model to start from (joint) or condition on (frozen).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output `TVQA` file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where joint mode writes the updated topic model.
    #[arg(long)]
    topic_out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    n_topics: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    topic_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Reference corpus for coherence.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ar: Option<PathBuf>,
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    npmi_top: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Planted,
    Regime,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    n_topics: Option<usize>,
    #[arg(long)]
    n_codes: Option<usize>,
    #[arg(long)]
    n_words: Option<usize>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    doc_len: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    blend: bool,
    #[arg(long)]
    n_regimes: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn base_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::input(format!("--config: {} does not exist", p.display())));
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, seed.map(Some));
    cfg.resolve_seed();
    Ok(cfg)
}

/// Writes `c` with the resolved config appended as a `run_config` section.
fn save_container(mut c: Container, cfg: &RunConfig, path: &Path) -> Result<()> {
    c.push_json("run_config", &cfg.echo());
    c.save(path)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serialises");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn load_vq(flag: &str, path: &Option<PathBuf>) -> Result<VqModel> {
    VqModel::load(existing(flag, path)?)
}

fn pretrain_vq(a: PretrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg, Some(a.seed))?;
    set_path(&mut cfg.paths.vocab, a.vocab);
    set_path(&mut cfg.paths.embeddings, a.embeddings);
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.vq.n_codes, a.n_codes);
    set(&mut cfg.vq.epochs, a.epochs);
    set(&mut cfg.vq.latent_dim, a.latent);
    set(&mut cfg.vq.batch_size, a.batch_size);
    set(&mut cfg.vq.lr, a.lr);
    set(&mut cfg.vq.codebook_lr, a.codebook_lr);
    set(&mut cfg.expansion, a.expansion);
    let vocab_p = existing("vocab", &cfg.paths.vocab)?;
    let emb_p = existing("embeddings", &cfg.paths.embeddings)?;
    let out = writable("out", &cfg.paths.out)?;

    let vocab = load_vocab(vocab_p)?;
    let emb = load_embeddings(emb_p, &vocab)?;
    if vocab.len() < cfg.vq.n_codes {
        log::warn!("{} words for {} codes", vocab.len(), cfg.vq.n_codes);
    }
    let trained = train_vqvae(&emb, &cfg.vq)?;
    if let Some(last) = trained.trace.last() {
        log::info!("final loss {:.6}, dead codes {}", last.total, last.dead_codes);
    }
    let model = VqModel::new(trained.autoencoder, trained.codebook, cfg.vq.clone(), cfg.expansion, &vocab);
    save_container(model.to_container(), &cfg, out)
}

fn encode(a: EncodeArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg, None)?;
    set_path(&mut cfg.paths.vocab, a.vocab);
    set_path(&mut cfg.paths.corpus, a.corpus);
    set_path(&mut cfg.paths.embeddings, a.embeddings);
    set_path(&mut cfg.paths.vq, a.vq);
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.expansion, a.expansion);
    let vocab_p = existing("vocab", &cfg.paths.vocab)?;
    let corpus_p = existing("corpus", &cfg.paths.corpus)?;
    let emb_p = existing("embeddings", &cfg.paths.embeddings)?;
    let vq_p = existing("vq", &cfg.paths.vq)?;
    let out = writable("out", &cfg.paths.out)?;

    let vocab = load_vocab(vocab_p)?;
    let vq = VqModel::load(vq_p)?;
    vq.check_vocab(&vocab)?;
    let emb = load_embeddings(emb_p, &vocab)?;
    let corpus = load_corpus(corpus_p, &vocab)?;
    let cv = build_conceptual_vocab(&vocab, &emb, &vq.autoencoder, &vq.codebook, cfg.expansion)?;
    BowDataset::encode(&corpus, &vocab, &cv, cfg.echo())?.save(out)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg, Some(a.seed))?;
    set_path(&mut cfg.paths.data, a.data);
    set_path(&mut cfg.paths.vocab, a.vocab);
    set_path(&mut cfg.paths.vq, a.vq);
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.topic.n_topics, a.n_topics);
    set(&mut cfg.topic.epochs, a.epochs);
    set(&mut cfg.topic.lr, a.lr);
    set(&mut cfg.topic.batch_size, a.batch_size);
    let data_p = existing("data", &cfg.paths.data)?;
    let vocab_p = existing("vocab", &cfg.paths.vocab)?;
    let vq_p = existing("vq", &cfg.paths.vq)?;
    let out = writable("out", &cfg.paths.out)?;

    let vocab = load_vocab(vocab_p)?;
    let vq = VqModel::load(vq_p)?;
    vq.check_vocab(&vocab)?;
    let ds = BowDataset::load(data_p)?;
    ds.check_vocab(&vocab)?;
    ds.check_codebook(&vq.codebook.hash())?;
    let trained = train_topic_model(&ds.pairs(), vq.codebook.rho_hat(), vocab.len(), &cfg.topic)?;
    if let Some(last) = trained.trace.last() {
        log::info!("final loss {:.6}", last.total());
    }
    let file = TopicFile::new(trained.model, cfg.topic.clone(), Some(&vocab), &vq.codebook);
    save_container(file.to_container(), &cfg, out)?;
    match trained.diverged {
        Some(msg) => Err(Error::numeric(format!("{msg}; last finite model written to {}", out.display()))),
        None => Ok(()),
    }
}

fn topics(a: TopicsArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg, None)?;
    set_path(&mut cfg.paths.model, a.model);
    set_path(&mut cfg.paths.vocab, a.vocab);
    set_path(&mut cfg.paths.vq, a.vq);
    set_path(&mut cfg.paths.out, a.out);
    let model_p = existing("model", &cfg.paths.model)?;
    let vocab_p = existing("vocab", &cfg.paths.vocab)?;
    let vq_p = existing("vq", &cfg.paths.vq)?;
    let out = cfg.paths.out.as_ref().map(|_| writable("out", &cfg.paths.out)).transpose()?;

    let vocab = load_vocab(vocab_p)?;
    let vq = VqModel::load(vq_p)?;
    let tf = TopicFile::load(model_p, Some(&vocab), &vq.codebook)?;
    let n = if a.top > vocab.len() {
        log::warn!("--top {} clipped to the vocabulary size {}", a.top, vocab.len());
        vocab.len()
    } else {
        a.top
    };
    let mut listing = Vec::new();
    for k in 0..tf.model.n_topics() {
        let words: Vec<&str> = tf
            .model
            .top_words(k, n)?
            .into_iter()
            .map(|w| vocab.token(w).expect("id within vocabulary"))
            .collect();
        println!("topic {k}: {}", words.join(" "));
        listing.push(words.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }
    if let Some(out) = out {
        write_json(out, &json!({ "config": cfg.echo(), "top": n, "topics": listing }))?;
    }
    Ok(())
}

fn parse_theta(spec: &str, k: usize) -> Result<Vec<f64>> {
    let bad = || Error::input(format!("--theta {spec}: expected uniform, onehot:K or {k} comma-separated weights"));
    if spec == "uniform" {
        return Ok(vec![1.0 / k as f64; k]);
    }
    if let Some(i) = spec.strip_prefix("onehot:") {
        let i: usize = i.parse().map_err(|_| bad())?;
        if i >= k {
            return Err(Error::input(format!("--theta {spec}: topic {i} outside 0..{k}")));
        }
        let mut t = vec![0.0; k];
        t[i] = 1.0;
        return Ok(t);
    }
    let w: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let total: f64 = w.iter().sum();
    if w.len() != k || w.iter().any(|x| !(*x >= 0.0)) || !(total > 0.0) {
        return Err(bad());
    }
    Ok(w.iter().map(|x| x / total).collect())
}

fn sample(a: SampleArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg, a.seed)?;
    set_path(&mut cfg.paths.model, a.model);
    set_path(&mut cfg.paths.vocab, a.vocab);
    set_path(&mut cfg.paths.vq, a.vq);
    set_path(&mut cfg.paths.ar, a.ar);
    set_path(&mut cfg.paths.out, a.out);
    let out = writable("out", &cfg.paths.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let mut lines = Vec::with_capacity(a.n_samples + 1);
    match a.mode {
        SampleMode::Bow => {
            let model_p = existing("model", &cfg.paths.model)?;
            let vocab_p = existing("vocab", &cfg.paths.vocab)?;
            let vq_p = existing("vq", &cfg.paths.vq)?;
            if a.n_words == 0 {
                return Err(Error::input("--n-words must be at least 1"));
            }
            let vocab = load_vocab(vocab_p)?;
            let vq = VqModel::load(vq_p)?;
            let tf = TopicFile::load(model_p, Some(&vocab), &vq.codebook)?;
            let theta = parse_theta(&a.theta, tf.model.n_topics())?;
            lines.push(json!({ "config": cfg.echo(), "mode": "bow", "theta": theta }));
            for _ in 0..a.n_samples {
                let doc = tf.model.sample_bow(&theta, a.n_words, &mut rng)?;
                let tokens: Vec<&str> = doc.words.iter().map(|&w| vocab.token(w).expect("sampled id")).collect();
                lines.push(json!({ "tokens": tokens, "words": doc.words, "topics": doc.topics }));
            }
        }
        SampleMode::Seq => {
            let ar_p = existing("ar", &cfg.paths.ar)?;
            let vq_p = existing("vq", &cfg.paths.vq)?;
            let vq = VqModel::load(vq_p)?;
            let ar = ArFile::load(ar_p)?;
            let topic = match &cfg.paths.model {
                Some(_) => Some(TopicFile::load(existing("model", &cfg.paths.model)?, None, &vq.codebook)?.model),
                None => None,
            };
            ar.check_topic(topic.as_ref())?;
            if ar.header.n_codes != vq.codebook.n_codes() {
                return Err(Error::Compatibility(format!(
                    "prior has {} codes, codebook has {}",
                    ar.header.n_codes,
                    vq.codebook.n_codes()
                )));
            }
            let theta = match (&topic, ar.prior.is_conditioned()) {
                (Some(m), true) => Some(parse_theta(&a.theta, m.n_topics())?),
                _ => None,
            };
            lines.push(json!({ "config": cfg.echo(), "mode": "seq", "theta": theta }));
            for _ in 0..a.n_samples {
                let cond = topic.as_ref().zip(theta.as_deref());
                let s = ar.prior.sample_sequence(cond, &mut rng)?;
                let mut line = json!({ "indices": s.sequence.indices, "log_probs": s.log_probs });
                if a.decode {
                    line["decoded"] = json!(decode_sequence(&s.sequence, &vq.codebook, &vq.autoencoder)?);
                }
                lines.push(line);
            }
        }
    }
    write_lines(out, &lines)
}

fn seq_pairs(ds: &SequenceDataset) -> Result<Vec<SeqPair>> {
    ds.sequences
        .iter()
        .map(|s| Ok((s.clone(), positional_histogram(s, ds.n_codes)?)))
        .collect()
}

fn train_ar_cmd(a: TrainArArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg, Some(a.seed))?;
    set_path(&mut cfg.paths.sequences, a.sequences);
    set_path(&mut cfg.paths.vq, a.vq);
    set_path(&mut cfg.paths.model, a.model);
    set_path(&mut cfg.paths.ar, a.out);
    set(&mut cfg.topic.n_topics, a.n_topics);
    set(
        &mut cfg.ar.mode,
        a.mode.map(|m| match m {
            ModeArg::Joint => ArMode::Joint,
            ModeArg::Frozen => ArMode::Frozen,
            ModeArg::Unconditioned => ArMode::Unconditioned,
        }),
    );
    set(&mut cfg.ar.window, a.window);
    set(&mut cfg.ar.width, a.width);
    set(&mut cfg.ar.epochs, a.epochs);
    set(&mut cfg.ar.lr, a.lr);
    set(&mut cfg.ar.topic_lr, a.topic_lr);
    set(&mut cfg.ar.batch_size, a.batch_size);
    let seq_p = existing("sequences", &cfg.paths.sequences)?;
    let vq_p = existing("vq", &cfg.paths.vq)?;
    let out = writable("out", &cfg.paths.ar)?;
    let model_p = match cfg.ar.mode {
        ArMode::Frozen => Some(existing("model", &cfg.paths.model)?),
        ArMode::Joint => cfg.paths.model.as_ref().map(|_| existing("model", &cfg.paths.model)).transpose()?,
        ArMode::Unconditioned => None,
    };
    let topic_out = match cfg.ar.mode {
        ArMode::Joint => Some(writable("topic-out", &a.topic_out)?),
        _ => None,
    };

    let vq = VqModel::load(vq_p)?;
    let ds = SequenceDataset::load(seq_p)?;
    if ds.n_codes != vq.codebook.n_codes() {
        return Err(Error::Compatibility(format!(
            "sequences use {} codes, codebook has {}",
            ds.n_codes,
            vq.codebook.n_codes()
        )));
    }
    let topic = match (cfg.ar.mode, model_p) {
        (ArMode::Unconditioned, _) => None,
        (_, Some(p)) => Some(TopicFile::load(p, None, &vq.codebook)?.model),
        (_, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.ar.seed);
            Some(TopicModel::new(
                cfg.topic.n_topics,
                vq.codebook.rho_hat(),
                0,
                cfg.topic.prior_concentration,
                &mut rng,
            )?)
        }
    };
    let trained = train_ar(&seq_pairs(&ds)?, ds.n_codes, topic, &cfg.ar)?;
    if let Some(last) = trained.trace.last() {
        log::info!("final kl {:.6} codes {:.6} ar {:.6}", last.kl, last.codes, last.ar);
    }
    let ar = ArFile::new(trained.prior, cfg.ar.clone(), trained.topic.as_ref());
    save_container(ar.to_container(), &cfg, out)?;
    if let (Some(p), Some(m)) = (topic_out, trained.topic) {
        let tf = TopicFile::new(m, cfg.topic.clone(), None, &vq.codebook);
        save_container(tf.to_container(), &cfg, p)?;
    }
    Ok(())
}

fn ar_report(cfg: &RunConfig, vq: Option<&VqModel>, vocab: Option<&Vocabulary>) -> Result<serde_json::Value> {
    let ar_p = existing("ar", &cfg.paths.ar)?;
    let seq_p = existing("sequences", &cfg.paths.sequences)?;
    let vq = vq.ok_or_else(|| Error::input("missing required path --vq"))?;
    let ar = ArFile::load(ar_p)?;
    let topic = match (&cfg.paths.model, ar.prior.is_conditioned()) {
        (Some(_), true) => Some(TopicFile::load(existing("model", &cfg.paths.model)?, vocab, &vq.codebook)?.model),
        _ => None,
    };
    ar.check_topic(topic.as_ref())?;
    let ds = SequenceDataset::load(seq_p)?;
    if ds.n_codes != ar.header.n_codes || ds.length != ar.header.length {
        return Err(Error::Compatibility(format!(
            "sequences are {}x{} codes, prior expects {}x{}",
            ds.length, ds.n_codes, ar.header.length, ar.header.n_codes
        )));
    }
    let mut total = 0.0;
    for (s, c) in seq_pairs(&ds)? {
        total += match &topic {
            Some(m) => {
                let th = m.infer_theta(&c, ThetaMode::Deterministic)?.theta;
                ar.prior.ar_nll(&s, Some((m, &th)))?
            }
            None => ar.prior.ar_nll(&s, None)?,
        };
    }
    Ok(json!({
        "nll_nats_per_position": total / ds.len() as f64,
        "n_sequences": ds.len(),
        "conditioned": topic.is_some(),
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg, a.seed)?;
    set_path(&mut cfg.paths.model, a.model);
    set_path(&mut cfg.paths.vq, a.vq);
    set_path(&mut cfg.paths.vocab, a.vocab);
    set_path(&mut cfg.paths.corpus, a.corpus);
    set_path(&mut cfg.paths.data, a.data);
    set_path(&mut cfg.paths.ar, a.ar);
    set_path(&mut cfg.paths.sequences, a.sequences);
    set_path(&mut cfg.paths.out, a.out);
    set(&mut cfg.metrics.npmi_top, a.npmi_top);
    set(&mut cfg.metrics.clusters, a.clusters.map(Some));
    if cfg.paths.data.is_none() && cfg.paths.ar.is_none() {
        return Err(Error::input("nothing to evaluate: give --data or --ar"));
    }
    let out = writable("out", &cfg.paths.out)?;
    let vq = cfg.paths.vq.as_ref().map(|_| load_vq("vq", &cfg.paths.vq)).transpose()?;
    let seed = cfg.seed.unwrap_or(0);
    let mut report = json!({ "config": cfg.echo(), "seed": seed });

    if cfg.paths.data.is_some() {
        let data_p = existing("data", &cfg.paths.data)?;
        let model_p = existing("model", &cfg.paths.model)?;
        let vocab_p = existing("vocab", &cfg.paths.vocab)?;
        let corpus_p = existing("corpus", &cfg.paths.corpus)?;
        let vq = vq.as_ref().ok_or_else(|| Error::input("missing required path --vq"))?;
        let vocab = load_vocab(vocab_p)?;
        let tf = TopicFile::load(model_p, Some(&vocab), &vq.codebook)?;
        let ds = BowDataset::load(data_p)?;
        ds.check_vocab(&vocab)?;
        ds.check_codebook(&vq.codebook.hash())?;
        let corpus = load_corpus(corpus_p, &vocab)?;
        let hists: Vec<_> = ds.usable().into_iter().map(|i| ds.codes(i)).collect();
        let labels = ds.labels();
        let r = evaluate(&tf.model, &corpus, &hists, labels.as_deref(), &cfg.metrics, seed)?;
        log::info!("TC {:.4} TD {:.4} TQ {:.4}", r.tc, r.td, r.tq);
        report["topics"] = json!(r);
    }
    if cfg.paths.ar.is_some() {
        report["ar"] = ar_report(&cfg, vq.as_ref(), None)?;
    }
    write_json(out, &report)
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    if !a.out_dir.is_dir() {
        return Err(Error::input(format!("--out-dir: {} is not a directory", a.out_dir.display())));
    }
    let dir = &a.out_dir;
    match a.kind {
        SynthKind::Planted => {
            let mut pc = PlantedConfig { seed: a.seed, ..PlantedConfig::default() };
            set(&mut pc.n_topics, a.n_topics);
            set(&mut pc.n_codes, a.n_codes);
            set(&mut pc.n_words, a.n_words);
            set(&mut pc.n_docs, a.n_docs);
            set(&mut pc.doc_len, a.doc_len);
            set(&mut pc.dim, a.dim);
            if a.blend {
                pc.placement = WordPlacement::Blend;
            }
            let p = planted_corpus(&pc)?;
            p.vocab.save(&dir.join("vocab.txt"))?;
            p.corpus.save(&dir.join("corpus.jsonl"))?;
            p.embeddings.save(&dir.join("embeddings.bin"))?;
            let vq_cfg = VqConfig {
                n_codes: pc.n_codes,
                latent_dim: pc.dim,
                hidden: Vec::new(),
                epochs: 0,
                seed: a.seed,
                ..VqConfig::default()
            };
            let oracle = VqModel::new(identity_autoencoder(pc.dim), p.codebook.clone(), vq_cfg, 5, &p.vocab);
            let mut c = oracle.to_container();
            c.push_json("synth_config", &pc);
            c.save(&dir.join("oracle.tvqm"))?;
            let top: Vec<Vec<&str>> = p
                .top_words(10)
                .iter()
                .map(|t| t.iter().map(|&w| p.vocab.token(w).expect("planted id")).collect())
                .collect();
            write_json(
                &dir.join("truth.json"),
                &json!({ "config": pc, "top_words": top, "word_topic": p.word_topic }),
            )
        }
        SynthKind::Regime => {
            let mut rc = RegimeConfig { seed: a.seed, ..RegimeConfig::default() };
            set(&mut rc.n_regimes, a.n_regimes);
            set(&mut rc.n_codes, a.n_codes);
            set(&mut rc.length, a.length);
            set(&mut rc.n_train, a.n_train);
            set(&mut rc.n_test, a.n_test);
            set(&mut rc.dim, a.dim);
            let d = regime_sequences(&rc)?;
            for (name, seqs) in [("train", &d.train), ("test", &d.test)] {
                SequenceDataset {
                    n_codes: rc.n_codes,
                    length: rc.length,
                    ids: (0..seqs.len()).map(|i| format!("{name}{i}")).collect(),
                    sequences: seqs.clone(),
                }
                .save(&dir.join(format!("{name}.jsonl")))?;
            }
            let code_names = Vocabulary::new((0..rc.n_codes).map(|i| format!("c{i}")).collect())?;
            let vq_cfg = VqConfig {
                n_codes: rc.n_codes,
                latent_dim: rc.dim,
                hidden: Vec::new(),
                epochs: 0,
                seed: a.seed,
                ..VqConfig::default()
            };
            let oracle = VqModel::new(identity_autoencoder(rc.dim), d.codebook.clone(), vq_cfg, 1, &code_names);
            let mut c = oracle.to_container();
            c.push_json("synth_config", &rc);
            c.save(&dir.join("codebook.tvqm"))?;
            write_json(
                &dir.join("regimes.json"),
                &json!({ "config": rc, "train": d.train_regimes, "test": d.test_regimes }),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::PretrainVq(a) => pretrain_vq(a),
        Cmd::Encode(a) => encode(a),
        Cmd::Train(a) => train(a),
        Cmd::Topics(a) => topics(a),
        Cmd::Sample(a) => sample(a),
        Cmd::TrainAr(a) => train_ar_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::GenSynth(a) => gen_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
