use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use textguard::cloak::{self, NodePlan};
use textguard::perturb::{self, BudgetReport, GuardConfig, PerturbationPlan, PlanWarning, Proxy};
use textguard::rng::doc_seed;
use textguard::scorer::{NGramModel, RemoteScorer, RemoteScorerConfig};
use textguard::{Execution, InvisibleCatalog, Vocabulary};

use crate::failure::{perturb_kind, scorer_kind, tokenizer_kind, Classify, Failure, Kind, Outcome};
use crate::settings::ProtectSettings;

#[derive(Serialize)]
#[serde(untagged)]
enum Planned {
    Text { plan: PerturbationPlan, warnings: Vec<PlanWarning>, report: Option<BudgetReport> },
    Html { nodes: Vec<NodePlan> },
}

#[derive(Serialize)]
struct Sidecar<'a> {
    input: String,
    output: String,
    format: &'static str,
    config: &'a ProtectSettings,
    #[serde(flatten)]
    planned: Planned,
}

enum Scorer {
    None,
    NGram(NGramModel),
    Remote(RemoteScorer),
}

impl Scorer {
    fn proxy(&self) -> Proxy<'_> {
        match self {
            Scorer::None => Proxy::None,
            Scorer::NGram(m) => Proxy::NGram(m),
            Scorer::Remote(r) => Proxy::Scorer(r),
        }
    }
}

fn document_name(path: &Path) -> Outcome<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| Failure::config(format!("{} has no UTF-8 file name", path.display())))
}

/// Protects every input into `out_dir`, writing `<name>` and `<name>.plan.json`.
pub fn run(inputs: &[PathBuf], settings: &ProtectSettings, out_dir: &Path, exec: Execution) -> Outcome<()> {
    settings.validate()?;
    let mut names: Vec<String> = inputs.iter().map(|p| document_name(p)).collect::<Outcome<_>>()?;
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Failure::config("two inputs share a file name"));
    }
    let vocab = match &settings.vocab {
        Some(p) if settings.budget > 0.0 => Some(
            Vocabulary::load(p)
                .map_err(|e| Failure::new(tokenizer_kind(&e), e).context(format!("vocabulary {}", p.display())))?,
        ),
        _ => None,
    };
    let scorer = match (&settings.proxy_model, &settings.remote_endpoint) {
        _ if settings.budget == 0.0 || !settings.strategy.needs_scores() => Scorer::None,
        (Some(p), _) => Scorer::NGram(
            NGramModel::load(p)
                .map_err(|e| Failure::new(scorer_kind(&e), e).context(format!("proxy model {}", p.display())))?,
        ),
        (None, Some(url)) => Scorer::Remote(
            RemoteScorer::new(RemoteScorerConfig::new(url.clone()), vocab.clone())
                .map_err(|e| Failure::new(Kind::Config, e))?,
        ),
        (None, None) => Scorer::None,
    };
    fs::create_dir_all(out_dir).io(format!("creating {}", out_dir.display()))?;
    exec.try_map(inputs, |path| {
        protect_one(path, settings, vocab.as_ref(), &scorer, out_dir).map_err(|f| f.context(path.display().to_string()))
    })?;
    Ok(())
}

fn protect_one(
    path: &Path,
    settings: &ProtectSettings,
    vocab: Option<&Vocabulary>,
    scorer: &Scorer,
    out_dir: &Path,
) -> Outcome<()> {
    let name = document_name(path)?;
    let source = fs::read_to_string(path).io("reading input")?;
    let html = settings.format.is_html(path);
    let catalog = InvisibleCatalog::default();
    let (output, planned) = match vocab {
        None => {
            warn!("{name}: budget 0, copying unchanged");
            let planned = if html {
                Planned::Html { nodes: Vec::new() }
            } else {
                Planned::Text { plan: PerturbationPlan::default(), warnings: vec![PlanWarning::ZeroBudget], report: None }
            };
            (source.clone(), planned)
        }
        Some(vocab) => {
            let cfg = GuardConfig {
                strategy: settings.strategy,
                budget: settings.budget,
                seed: doc_seed(settings.seed, &name),
                invisible_mode: settings.mode,
                tau: settings.tau,
                batch_size: settings.batch_size,
                cand_k: settings.cand_k,
                catalog: catalog.clone(),
                ..GuardConfig::default()
            };
            let done = if html {
                protect_html(&source, &cfg, vocab, scorer, settings.min_tokens)?
            } else {
                protect_text(&source, &cfg, vocab, scorer)?
            };
            verify(&source, &done.0, html, settings, &catalog)?;
            done
        }
    };
    let out_path = out_dir.join(&name);
    fs::write(&out_path, &output).io(format!("writing {}", out_path.display()))?;
    let sidecar = Sidecar {
        input: path.display().to_string(),
        output: out_path.display().to_string(),
        format: if html { "html" } else { "text" },
        config: settings,
        planned,
    };
    let plan_path = out_dir.join(format!("{name}.plan.json"));
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecars serialize");
    fs::write(&plan_path, json + "\n").io(format!("writing {}", plan_path.display()))?;
    info!("{name}: wrote {}", out_path.display());
    Ok(())
}

fn protect_text(
    text: &str,
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    scorer: &Scorer,
) -> Outcome<(String, Planned)> {
    let seq = vocab.encode(text).map_err(|e| Failure::new(Kind::Plan, e))?;
    let outcome = perturb::plan(cfg, vocab, &seq, scorer.proxy()).map_err(|e| Failure::new(perturb_kind(&e), e))?;
    let guarded = perturb::apply_plan(text, &seq, &outcome.plan, vocab, cfg.invisible_mode, cfg.strategy, &cfg.catalog)
        .map_err(|e| Failure::new(Kind::Plan, e))?;
    for w in &outcome.warnings {
        warn!("plan warning: {w:?}");
    }
    let report = guarded.budget_report(&seq, cfg.budget, &cfg.catalog);
    let output = guarded.guarded_html.clone().unwrap_or_else(|| guarded.guarded_plain_text.clone());
    Ok((output, Planned::Text { plan: outcome.plan, warnings: outcome.warnings, report: Some(report) }))
}

fn protect_html(
    html: &str,
    cfg: &GuardConfig,
    vocab: &Vocabulary,
    scorer: &Scorer,
    min_tokens: usize,
) -> Outcome<(String, Planned)> {
    let protected = cloak::protect_html(html, cfg, vocab, scorer.proxy(), min_tokens).map_err(|e| {
        let kind = match &e {
            cloak::CloakError::Parse(_) => Kind::Config,
            cloak::CloakError::Node { source, .. } => perturb_kind(source),
            _ => Kind::Plan,
        };
        Failure::new(kind, e)
    })?;
    for n in &protected.nodes {
        for w in &n.outcome.warnings {
            warn!("text node {}: plan warning: {w:?}", n.node);
        }
    }
    Ok((protected.doc.into_string(), Planned::Html { nodes: protected.nodes }))
}

/// Checks what a reader sees is unchanged before anything is written.
fn verify(source: &str, output: &str, html: bool, settings: &ProtectSettings, catalog: &InvisibleCatalog) -> Outcome<()> {
    let plan_err = |msg: String| Failure::new(Kind::Plan, anyhow::anyhow!(msg));
    if html || settings.mode != perturb::InvisibleMode::Chars {
        let expected = if html {
            cloak::visible_text(source, catalog).map_err(|e| Failure::new(Kind::Config, e))?
        } else {
            catalog.strip(source)
        };
        let got = cloak::visible_text(output, catalog).map_err(|e| Failure::new(Kind::Plan, e))?;
        if got != expected {
            return Err(plan_err("visible text changed after protection".into()));
        }
    } else if !perturb::multiset_contains(&catalog.strip(output), source) {
        return Err(plan_err("protected text lost characters of the original".into()));
    }
    Ok(())
}
