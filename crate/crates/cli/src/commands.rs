use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use textguard::cloak::{self, Format};
use textguard::harness::{self, Corpus, ExperimentConfig, ExperimentReport, SynthSpec};
use textguard::scorer::{NGramConfig, NGramModel};
use textguard::tokenizer::train_bpe;
use textguard::{Execution, InvisibleCatalog, Vocabulary};

use crate::failure::{harness_kind, scorer_kind, tokenizer_kind, Classify, Failure, Kind, Outcome};
use crate::settings::FormatChoice;

/// Documents of every input: JSONL files contribute one per line, any other
/// file counts as a single document.
pub fn read_texts(paths: &[PathBuf]) -> Outcome<Vec<String>> {
    let mut texts = Vec::new();
    for p in paths {
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("jsonl")) {
            let corpus = Corpus::load_jsonl(p).map_err(|e| Failure::new(harness_kind(&e), e).context(p.display().to_string()))?;
            texts.extend(corpus.documents.into_iter().map(|d| d.text));
        } else {
            texts.push(fs::read_to_string(p).io(format!("reading {}", p.display()))?);
        }
    }
    if texts.is_empty() {
        return Err(Failure::config("no training documents"));
    }
    Ok(texts)
}

fn write(path: &Path, contents: &str) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).io(format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).io(format!("writing {}", path.display()))
}

/// Printable ASCII and line-ending whitespace, so any plain ASCII file encodes.
fn ascii_alphabet() -> String {
    let mut s: String = (' '..='~').flat_map(|c| [c, ' ']).collect();
    s.push_str("\n\t\r\n");
    s
}

pub fn train_tokenizer(corpus: &[PathBuf], merges: usize, ascii: bool, out: &Path) -> Outcome<()> {
    let mut texts = read_texts(corpus)?;
    if ascii {
        texts.push(ascii_alphabet());
    }
    let vocab = train_bpe(&texts, merges).map_err(|e| Failure::new(Kind::Config, e))?;
    write(out, &vocab.to_json())?;
    info!("vocabulary of {} tokens ({} merges) written to {}", vocab.len(), vocab.merge_count(), out.display());
    Ok(())
}

pub fn train_scorer(corpus: &[PathBuf], vocab: &Path, order: usize, alpha: f64, out: &Path) -> Outcome<()> {
    let vocab = Vocabulary::load(vocab)
        .map_err(|e| Failure::new(tokenizer_kind(&e), e).context(format!("vocabulary {}", vocab.display())))?;
    let texts = read_texts(corpus)?;
    let seqs = texts
        .iter()
        .map(|t| vocab.encode(t).map(|s| s.ids))
        .collect::<Result<Vec<_>, _>>()
        .kind(Kind::Config, "encoding the corpus")?;
    let config = NGramConfig::new(vocab.len()).with_order(order).with_alpha(alpha);
    let model = NGramModel::fit(config, &seqs, 1.0, "corpus").map_err(|e| Failure::new(scorer_kind(&e), e))?;
    write(out, &model.to_json())?;
    info!("order-{order} model over {} documents written to {}", seqs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportBundle<'a> {
    config: &'a ExperimentConfig,
    report: &'a ExperimentReport,
}

pub fn evaluate(config: &ExperimentConfig, out_dir: &Path) -> Outcome<ExperimentReport> {
    let wrap = |e: harness::HarnessError| Failure::new(harness_kind(&e), e);
    config.validate().map_err(wrap)?;
    let report = if config.continual.stages > 1 {
        harness::run_continual(config)
    } else {
        harness::run_protection_experiment(config)
    }
    .map_err(wrap)?;
    let bundle = ReportBundle { config, report: &report };
    let path = out_dir.join("report.json");
    write(&path, &(serde_json::to_string_pretty(&bundle).expect("reports serialize") + "\n"))?;
    info!("max sample-level AUC {:.4}; report written to {}", report.max_auc(), path.display());
    Ok(report)
}

pub fn strip(input: &Path, out: &Path, format: FormatChoice) -> Outcome<()> {
    let source = fs::read_to_string(input).io(format!("reading {}", input.display()))?;
    let format = if format.is_html(input) { Format::Html } else { Format::Text };
    let stripped = cloak::strip_guard(&source, format, &InvisibleCatalog::default())
        .kind(Kind::Plan, format!("stripping {}", input.display()))?;
    write(out, &stripped)
}

pub fn synth(spec: &SynthSpec, out: &Path) -> Outcome<()> {
    let corpus = harness::synth_corpus(spec).map_err(|e| Failure::new(harness_kind(&e), e))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).io(format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(out).io(format!("creating {}", out.display()))?;
    corpus.write_jsonl(BufWriter::new(file)).map_err(|e| Failure::new(harness_kind(&e), e))?;
    info!("{} documents written to {}", corpus.len(), out.display());
    Ok(())
}

/// `--jobs 1` runs sequentially; otherwise a pool of that many threads.
pub fn execution(jobs: Option<usize>) -> Outcome<Execution> {
    match jobs {
        Some(0) => Err(Failure::config("--jobs must be >= 1")),
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .kind(Kind::Config, "configuring the thread pool")?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}
