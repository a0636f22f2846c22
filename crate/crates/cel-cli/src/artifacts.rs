//! On-disk run artifacts: metrics log, JSON summary, ID-map sidecars, and
//! test-split exports. Every file is written atomically.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use cel_core::dataset::{write_id_map, Interaction, InteractionStore};
use cel_core::error::CelError;
use cel_core::eval;
use cel_core::fsutil::atomic_write;
use cel_core::model::{EmbeddingModel, InteractionScorer};
use cel_core::trainer::RunReport;

/// Directory a command writes its artifacts into; created up front.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path)
            .with_context(|| format!("creating output directory {}", path.display()))?;
        Ok(OutDir { root: path.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        atomic_write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Test metrics of one trained model.
#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub mse: f64,
    /// `None` when the test split has only one rating class.
    pub auc: Option<f64>,
    /// Test interactions evaluated.
    pub evaluated: usize,
    /// Test interactions dropped because their user or item never occurs in
    /// the training split.
    pub skipped_unseen: usize,
}

/// Evaluates a model on the test rows whose user and item both occur in the
/// training split. Returns the kept rows alongside the metrics so they can
/// be exported for stand-alone re-evaluation; `None` when nothing is left.
pub fn evaluate<S: InteractionScorer>(
    model: &EmbeddingModel,
    scorer: &S,
    train: &InteractionStore,
    test: &[Interaction],
    auc_threshold: f64,
) -> Result<(Option<TestReport>, Vec<Interaction>)> {
    let kept = eval::filter_unseen(train, test);
    if kept.is_empty() {
        return Ok((None, kept));
    }
    let skipped_unseen = test.len() - kept.len();
    let predict = |u: u32, j: u32| model.predict(scorer, u, j);
    let mse = eval::mse(&predict, &kept)?;
    let auc = match eval::auc(&predict, &kept, auc_threshold) {
        Ok(v) => Some(v),
        Err(CelError::SingleClass) => None,
        Err(e) => return Err(e.into()),
    };
    Ok((Some(TestReport { mse, auc, evaluated: kept.len(), skipped_unseen }), kept))
}

/// One cross-validation fold (a plain holdout run is fold 0).
#[derive(Debug, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub checkpoint: String,
    pub final_train_loss: f64,
    pub m_q: usize,
    pub elapsed_ms: u64,
    pub test: Option<TestReport>,
}

/// `summary.json` payload shared by the training-style commands.
#[derive(Serialize)]
pub struct TrainSummary<'a> {
    pub command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_checkpoint: Option<String>,
    pub data: String,
    pub n_users: usize,
    pub n_items: usize,
    pub interactions: usize,
    pub m_star: usize,
    pub config: &'a cel_core::config::RunConfig,
    pub folds: Vec<FoldSummary>,
    pub mean_test_mse: Option<f64>,
    pub std_test_mse: Option<f64>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Some((mean, var.sqrt()))
}

/// Renders per-fold training logs as plot-ready `key=value` lines.
pub fn metrics_text(reports: &[(usize, RunReport)]) -> String {
    let mut out = String::new();
    for (fold, report) in reports {
        for e in &report.events {
            out.push_str(&format!(
                "fold={fold} step={} phase={} loss={} mq={} wall_ms={}\n",
                e.step, e.phase, e.loss, e.m_q, e.wall_ms
            ));
        }
    }
    out
}

pub fn write_summary<T: Serialize>(out: &OutDir, summary: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    out.write("summary.json", text.as_bytes())
}

pub fn write_maps(out: &OutDir, store: &InteractionStore) -> Result<()> {
    write_id_map(&store.id_maps().users, out.path("users.map"))
        .context("writing users.map")?;
    write_id_map(&store.id_maps().items, out.path("items.map"))
        .context("writing items.map")?;
    Ok(())
}

/// Exports interactions as CSV with raw IDs, ready for `eval --data`.
pub fn write_interactions_csv(
    out: &OutDir,
    name: &str,
    store: &InteractionStore,
    rows: &[Interaction],
) -> Result<()> {
    let maps = store.id_maps();
    let has_ts = rows.iter().any(|r| r.timestamp.is_some());
    let mut text =
        String::from(if has_ts { "user,item,rating,timestamp\n" } else { "user,item,rating\n" });
    for r in rows {
        let user = maps.users.raw(r.user);
        let item = maps.items.raw(r.item);
        if has_ts {
            let ts = r.timestamp.unwrap_or(0);
            text.push_str(&format!("{user},{item},{},{ts}\n", r.rating));
        } else {
            text.push_str(&format!("{user},{item},{}\n", r.rating));
        }
    }
    out.write(name, text.as_bytes())
}
