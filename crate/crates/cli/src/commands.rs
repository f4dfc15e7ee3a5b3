use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use backpack::config::RunConfig;
use backpack::control::{self, GenerateSettings, InterventionSpec, Pronouns};
use backpack::corpus::{pack_blocks, split_blocks, SyntheticLexicon, Vocabulary, WordKind, BOS};
use backpack::eval::{self, ClozeCase, ClozeOptions, PromptTemplate};
use backpack::model::{count_params, Architecture, Backpack, LanguageModel, TokenId, Trainable, TransformerLm};
use backpack::trainer::{write_loss_csv, Checkpoint, Trainer};
use backpack::{Error, Result};

use super::*;

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {
        writeln!(std::io::stdout().lock(), $($t)*)?
    };
}

const BIAS_PROMPTS: &str = include_str!("../data/bias_prompts.txt");
const WORD_PROMPTS: &str = include_str!("../data/word_prompts.txt");

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Ppl(a) => ppl(a),
        Command::Cloze(a) => cloze(a),
        Command::Senses(a) => senses(a),
        Command::Compose(a) => compose(a),
        Command::Stability(a) => stability(a),
        Command::Simlex(a) => simlex(a),
        Command::Bias(a) => bias(a),
        Command::Amplify(a) => amplify(a),
        Command::Generate(a) => generate(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
        Command::Params(a) => params(a),
    }
}

/// Either architecture, restored from a checkpoint.
enum AnyModel {
    Backpack(Backpack<f32>),
    Baseline(TransformerLm<f32>),
}

impl AnyModel {
    fn lm(&self) -> &dyn LanguageModel<f32> {
        match self {
            Self::Backpack(m) => m,
            Self::Baseline(m) => m,
        }
    }
}

struct Loaded {
    model: AnyModel,
    vocab: Vocabulary,
}

impl Loaded {
    fn open(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let vocab = ck
            .vocab()?
            .ok_or_else(|| Error::Checkpoint(format!("{} carries no vocabulary", path.display())))?;
        let model = match ck.architecture()? {
            Architecture::Backpack => AnyModel::Backpack(ck.restore()?),
            Architecture::Baseline => AnyModel::Baseline(ck.restore()?),
        };
        Ok(Self { model, vocab })
    }

    fn backpack(path: &Path) -> Result<(Backpack<f32>, Vocabulary)> {
        let l = Self::open(path)?;
        match l.model {
            AnyModel::Backpack(m) => Ok((m, l.vocab)),
            AnyModel::Baseline(_) => Err(Error::Checkpoint(format!(
                "{} is a baseline checkpoint; this command needs a backpack",
                path.display()
            ))),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn prompts_or(path: Option<&PathBuf>, default: &str) -> Result<Vec<PromptTemplate>> {
    match path {
        Some(p) => PromptTemplate::parse_lines(&read_text(p)?),
        None => PromptTemplate::parse_lines(default),
    }
}

/// A rule file if `arg` names an existing file, otherwise inline rules.
fn spec_text(arg: &str) -> Result<String> {
    let p = Path::new(arg);
    if p.is_file() {
        read_text(p)
    } else {
        Ok(arg.replace(';', "\n"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn header(w: &mut impl Write, lines: &str) -> Result<()> {
    for l in lines.lines() {
        writeln!(w, "# {l}")?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let text = read_text(&a.corpus)?;
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_text(&read_text(p)?)?;
    }
    for s in &a.sets {
        cfg.set_pair(s)?;
    }
    if let Some(seed) = a.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let vocab = match &resume {
        Some(ck) => ck
            .vocab()?
            .ok_or_else(|| Error::Checkpoint("resume checkpoint carries no vocabulary".into()))?,
        None => Vocabulary::build(&text)?,
    };
    cfg.model.vocab_size = vocab.len();
    cfg.validate()?;
    cfg.model.validate()?;
    if let Some(ck) = &resume {
        if ck.architecture()? != cfg.arch || ck.config()? != cfg.model {
            return Err(Error::Config("resume checkpoint does not match the configured model".into()));
        }
    }
    let unknown = vocab.unknown_chars(&text);
    if !unknown.is_empty() {
        log::warn!("{} corpus characters are outside the vocabulary and map to unk", unknown.len());
    }
    let blocks = pack_blocks(&vocab.encode(&text), cfg.block_size, cfg.seed)?;
    let splits = split_blocks(blocks, cfg.splits)?;
    log::info!(
        "{} characters, vocabulary {}, blocks train {} dev {} test {}",
        text.chars().count(),
        vocab.len(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    );
    fs::create_dir_all(&a.out)?;
    match cfg.arch {
        Architecture::Backpack => train_arch::<Backpack<f32>>(&cfg, &vocab, &splits, resume.as_ref(), &a.out),
        Architecture::Baseline => train_arch::<TransformerLm<f32>>(&cfg, &vocab, &splits, resume.as_ref(), &a.out),
    }
}

fn train_arch<M: Trainable<f32>>(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    splits: &backpack::corpus::Splits,
    resume: Option<&Checkpoint>,
    out: &Path,
) -> Result<()> {
    let mut trainer = match resume {
        Some(ck) => Trainer::<f32, M>::resume(ck, cfg.train.clone())?,
        None => Trainer::new(M::from_config(cfg.model.clone(), cfg.seed)?, cfg.train.clone())?,
    };
    let start = trainer.step;
    trainer.run_until(cfg.train.total_steps, splits)?;
    let tag = |ck: Checkpoint| {
        cfg.to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .fold(ck.with_vocab(vocab), |ck, (k, v)| ck.with_meta(&format!("run.{k}"), v))
    };
    tag(trainer.checkpoint()).save(out.join("last.ckpt"))?;
    if let Some(step) = trainer.diverged() {
        log::warn!("training diverged at step {step}");
    }
    let done = trainer.finish()?;
    tag(Checkpoint::from_model(&done.best).with_meta("step", done.best_step)).save(out.join("best.ckpt"))?;

    let effective = cfg.to_text();
    fs::write(out.join("config.txt"), &effective)?;
    let mut w = create(&out.join("loss.csv"))?;
    header(&mut w, &effective)?;
    write_loss_csv(&done.curve, &mut w)?;
    w.flush()?;
    vocab.write_to(create(&out.join("vocab.tsv"))?)?;

    let test_ppl = eval::perplexity(&done.best, &splits.test)?;
    out!(
        "steps {start}..{} best step {} dev loss {:.4} test perplexity {:.4}",
        done.curve.last().map_or(start, |r| r.step),
        done.best_step,
        done.best_dev_loss,
        test_ppl
    );
    Ok(())
}

fn ppl(a: PplArgs) -> Result<()> {
    let l = Loaded::open(&a.ck.checkpoint)?;
    let lm = l.model.lm();
    let block = a.block_size.unwrap_or(lm.config().context_length);
    let text = read_text(&a.text)?;
    let unknown = l.vocab.unknown_chars(&text);
    if !unknown.is_empty() {
        log::warn!("{} characters are outside the vocabulary and map to unk", unknown.len());
    }
    let blocks = pack_blocks(&l.vocab.encode(&text), block, 0)?;
    let loss = eval::mean_block_loss(lm, &blocks)?;
    out!("blocks {} tokens {} loss {loss:.6} perplexity {:.6}", blocks.len(), blocks.num_tokens(), loss.exp());
    Ok(())
}

fn cloze(a: ClozeArgs) -> Result<()> {
    let l = Loaded::open(&a.ck.checkpoint)?;
    let cases = ClozeCase::read_all(BufReader::new(File::open(&a.cases)?))?;
    if cases.is_empty() {
        return Err(Error::Eval("no cloze cases".into()));
    }
    let opts = ClozeOptions {
        beam_width: a.beam,
        ..ClozeOptions::default()
    };
    let (mut top1, mut top3) = (0, 0);
    out!("prefix\tmasked\tending\tbest\ttop1\ttop3");
    for case in &cases {
        let o = eval::run_cloze(l.model.lm(), &l.vocab, case, opts)?;
        top1 += o.top1 as usize;
        top3 += o.top3 as usize;
        let best = o.predictions.first().map_or("", |p| p.0.as_str());
        out!("{}\t{}\t{}\t{best}\t{}\t{}", case.prefix, case.masked, case.ending, o.top1, o.top3);
    }
    let n = cases.len() as f64;
    out!("# cases {} top1 {:.4} top3 {:.4}", cases.len(), top1 as f64 / n, top3 as f64 / n);
    Ok(())
}

fn char_id(vocab: &Vocabulary, c: char) -> Result<TokenId> {
    vocab.id(c).ok_or_else(|| Error::Vocab(format!("character {c:?} not in vocabulary")))
}

fn senses(a: SensesArgs) -> Result<()> {
    let (model, vocab) = Loaded::backpack(&a.ck.checkpoint)?;
    let id = char_id(&vocab, a.ch)?;
    for l in 0..model.config().num_senses {
        let top = control::sense_projection_topk(&model, id, l, a.topk)?;
        let mut line = format!("sense {l}:");
        for (t, s) in top {
            let c = vocab.char_of(t).map_or_else(|| format!("#{t}"), String::from);
            let _ = write!(line, " {c}({s:.3})");
        }
        out!("{line}");
    }
    Ok(())
}

fn compose(a: ComposeArgs) -> Result<()> {
    let (model, vocab) = Loaded::backpack(&a.ck.checkpoint)?;
    let prompts = prompts_or(a.prompts.as_ref(), WORD_PROMPTS)?;
    let len = eval::word_ids(&vocab, &a.word)?.len();
    let mut all = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let (ids, start) = p.encode(&vocab, &a.word)?;
        let ratios = eval::composition_ratio(&model, &ids, start, len)?;
        out!("{}", p.fill(&a.word).0);
        for (l, r) in ratios.iter().enumerate() {
            out!("  sense {l}: {}", fmt_ratios(r));
        }
        all.push(ratios);
    }
    if all.len() >= 2 {
        let (means, devs) = eval::ratio_deviations(&all);
        out!("mean over {} prompts", all.len());
        for (l, (m, d)) in means.iter().zip(&devs).enumerate() {
            out!("  sense {l}: {} max deviation {d:.4}", fmt_ratios(m));
        }
    }
    Ok(())
}

fn fmt_ratios(r: &[f64]) -> String {
    r.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn read_words(path: &Path) -> Result<Vec<(String, WordKind)>> {
    let mut out = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: n + 1, msg };
        let (w, k) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected word<TAB>type".into()))?;
        out.push((w.trim().to_string(), k.parse().map_err(|e: Error| parse_err(e.to_string()))?));
    }
    Ok(out)
}

fn stability(a: StabilityArgs) -> Result<()> {
    let (model, vocab) = Loaded::backpack(&a.ck.checkpoint)?;
    let words = read_words(&a.words)?;
    let prompts = prompts_or(a.prompts.as_ref(), WORD_PROMPTS)?;
    let report = eval::stability_report(&model, &vocab, &words, &prompts)?;
    let mut summary = Vec::new();
    report.write_csv(&mut summary)?;
    std::io::stdout().lock().write_all(&summary)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let about = format!(
            "checkpoint={}\nwords={}\nprompts={}",
            a.ck.checkpoint.display(),
            words.len(),
            prompts.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join(" | ")
        );
        let mut w = create(&dir.join("stability.csv"))?;
        header(&mut w, &about)?;
        report.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&dir.join("stability_words.csv"))?;
        header(&mut w, &about)?;
        report.write_word_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn simlex(a: SimlexArgs) -> Result<()> {
    let (model, vocab) = Loaded::backpack(&a.ck.checkpoint)?;
    let pairs = eval::read_word_pairs(BufReader::new(File::open(&a.pairs)?))?;
    let bank = model.sense_bank()?;
    let prompts = a.prompts.as_deref().map(read_text).transpose()?;
    let prompts = prompts.as_deref().map(PromptTemplate::parse_lines).transpose()?;
    let report = eval::lexical_similarity(&pairs, |w| {
        let ids = eval::word_ids(&vocab, w)?;
        match &prompts {
            Some(ps) => {
                let contexts = ps.iter().map(|p| p.encode(&vocab, w)).collect::<Result<Vec<_>>>()?;
                eval::compose_word_sense(&model, &bank, &ids, &contexts)
            }
            None => eval::word_vec_average(&bank, &ids),
        }
    })?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    std::io::stdout().lock().write_all(&csv)?;
    if let Some(best) = report.best_sense {
        out!("# best sense {best}");
    }
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        let mode = if prompts.is_some() { "composed" } else { "averaged" };
        header(&mut w, &format!("checkpoint={}\npairs={}\nrepresentation={mode}", a.ck.checkpoint.display(), pairs.len()))?;
        w.write_all(&csv)?;
        w.flush()?;
    }
    Ok(())
}

fn bias(a: BiasArgs) -> Result<()> {
    let (model, vocab) = Loaded::backpack(&a.ck.checkpoint)?;
    let prompts = prompts_or(a.prompts.as_ref(), BIAS_PROMPTS)?;
    let pronouns = Pronouns::from_chars(&vocab, a.he, a.she)?;
    let spec_src = a.spec.as_deref().map(spec_text).transpose()?;
    out!("word\tbefore\tafter");
    for word in &a.words {
        let spec = spec_src.as_deref().map(|s| control::bias_spec(s, &vocab, word)).transpose()?;
        let r = control::bias_report(&model, &vocab, word, &prompts, pronouns, spec.as_ref())?;
        let after = r.mean_after().map_or(String::new(), |x| x.to_string());
        out!("{word}\t{}\t{after}", r.mean_before());
    }
    if a.rank {
        out!("sense\tpronoun_distance");
        for (l, s) in control::bias_sense_ranking(&model, pronouns.he, pronouns.she)? {
            out!("{l}\t{s}");
        }
        let mut ids = Vec::new();
        for w in &a.words {
            ids.extend(eval::word_ids(&vocab, w)?);
        }
        out!("sense\tword_pronoun_gap");
        for (l, s) in control::token_bias_ranking(&model, &ids, pronouns.he, pronouns.she)? {
            out!("{l}\t{s}");
        }
    }
    Ok(())
}

fn amplify(a: AmplifyArgs) -> Result<()> {
    let (model, vocab) = Loaded::backpack(&a.ck.checkpoint)?;
    let mut ids = vec![BOS];
    ids.extend(vocab.encode_strict(&a.prompt)?);
    let probes: Vec<TokenId> = a.probes.chars().map(|c| char_id(&vocab, c)).collect::<Result<_>>()?;
    let ratios = control::amplification_ratio_eval(&model, &ids, a.span_start + 1, &a.multipliers, &probes)?;
    out!("probe\tratio");
    for (c, r) in a.probes.chars().zip(ratios) {
        out!("{c}\t{r}");
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (model, vocab) = Loaded::backpack(&a.ck.checkpoint)?;
    let prompt = vocab.encode_strict(&a.prompt)?;
    let spec = a.spec.as_deref().map(spec_text).transpose()?;
    let spec = spec.as_deref().map(InterventionSpec::parse).transpose()?;
    let settings = GenerateSettings {
        max_new_tokens: a.max_new_tokens,
        temperature: a.temperature,
        seed: a.seed,
        top: 1,
    };
    let out = control::generate(&model, &prompt, &settings, spec.as_ref(), Some(&vocab))?;
    out!("{}{}", a.prompt, vocab.decode(&out.tokens));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let state = Arc::new(backpack_server::AppState::load(&a.ck.checkpoint)?);
    log::info!(
        "loaded {} (sha256 {})",
        a.ck.checkpoint.display(),
        state.checkpoint_sha256
    );
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(backpack_server::serve(a.addr, state))?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let lex = match a.lexicon {
        Lexicon::Standard => SyntheticLexicon::standard(a.seed),
        Lexicon::TwoTopic => SyntheticLexicon::two_topic(a.seed),
        Lexicon::Gendered => SyntheticLexicon::gendered(a.seed),
    };
    let corpus = lex.generate(a.sentences, a.seed)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("corpus.txt"), &corpus.text)?;
    let about = format!("lexicon={:?}\nseed={}\nsentences={}", a.lexicon, a.seed, a.sentences).to_lowercase();
    let mut w = create(&a.out.join("annotations.tsv"))?;
    header(&mut w, &about)?;
    writeln!(w, "start\tlen\tword\ttype")?;
    for an in &corpus.annotations {
        writeln!(w, "{}\t{}\t{}\t{}", an.start, an.len, lex.words[an.word].text, an.kind)?;
    }
    w.flush()?;
    let mut w = create(&a.out.join("lexicon.tsv"))?;
    header(&mut w, &about)?;
    writeln!(w, "word\ttype\tclass")?;
    for word in &lex.words {
        writeln!(w, "{}\t{}\t{}", word.text, word.kind, word.class)?;
    }
    w.flush()?;
    out!(
        "{} sentences, {} characters, {} annotated words",
        a.sentences,
        corpus.text.chars().count(),
        corpus.annotations.len()
    );
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_text(&read_text(p)?)?;
    }
    for s in &a.sets {
        cfg.set_pair(s)?;
    }
    cfg.model.vocab_size = a.vocab_size;
    cfg.model.validate()?;
    for arch in [Architecture::Backpack, Architecture::Baseline] {
        out!("{arch}\t{}", count_params(&cfg.model, arch));
    }
    Ok(())
}
