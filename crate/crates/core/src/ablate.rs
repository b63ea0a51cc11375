//! Variant sweeps under one seed and budget, cached by config hash.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{atomic_write, effective_config};
use crate::config::{AblationVariant, Config};
use crate::corpus::{sha256, Utterance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSettings};
use crate::parallel::Exec;
use crate::train::Trainer;

pub const ROW_FILE: &str = "row.json";
pub const TABLE_TEXT: &str = "ablation.txt";
pub const TABLE_RECORDS: &str = "ablation.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Name as requested.
    pub name: String,
    pub variant: String,
    pub fsq_dim: usize,
    pub config_hash: String,
    pub ok: bool,
    pub error: Option<String>,
    pub final_train_loss: Option<f64>,
    pub flow_loss: Option<f64>,
    pub null_flow_loss: Option<f64>,
    pub stop_accuracy: Option<f64>,
    pub generation_mse: Option<f64>,
    pub heldout_flow_loss: Option<f64>,
    pub heldout_generation_mse: Option<f64>,
    pub train_seconds: f64,
    #[serde(default)]
    pub cached: bool,
}

/// SHA-256 (hex) of the effective config text.
pub fn config_hash(config: &Config) -> String {
    sha256(effective_config(config).to_text().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct AblationInputs<'a> {
    pub base: &'a Config,
    pub corpus: &'a [Utterance],
    /// Longer utterances never seen in training.
    pub heldout: &'a [Utterance],
    pub eval: EvalSettings,
    pub exec: Exec,
}

fn run_variant(inputs: &AblationInputs, config: &Config, dir: &Path, row: &mut AblationRow) -> Result<()> {
    let started = Instant::now();
    let mut trainer = Trainer::new(config, inputs.corpus, inputs.exec)?;
    let mut last = None;
    trainer.run(dir, None, |m| last = Some(m.total))?;
    row.train_seconds = started.elapsed().as_secs_f64();
    row.final_train_loss = last;
    let r = evaluate(&trainer.model, inputs.corpus, &inputs.eval)?;
    row.flow_loss = Some(r.flow_loss);
    row.null_flow_loss = Some(r.null_flow_loss);
    row.stop_accuracy = Some(r.stop_accuracy);
    row.generation_mse = r.generation_mse;
    if !inputs.heldout.is_empty() {
        let h = evaluate(&trainer.model, inputs.heldout, &inputs.eval)?;
        row.heldout_flow_loss = Some(h.flow_loss);
        row.heldout_generation_mse = h.generation_mse;
    }
    Ok(())
}

/// Trains and evaluates every named variant under `out/runs/<hash>`. A
/// variant whose config hash already has a finished row is not rerun. A
/// failing variant is recorded in its row and does not stop the others.
pub fn run_ablation(
    inputs: &AblationInputs,
    names: &[String],
    out: &Path,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if names.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    let variants = names
        .iter()
        .map(|n| {
            n.parse::<AblationVariant>().map_err(|e| Error::ConfigInvalid {
                key: "variants".into(),
                msg: e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(names.len());
    for (name, variant) in names.iter().zip(variants) {
        let mut config = inputs.base.clone();
        config.train.ablation_variant = variant;
        let hash = config_hash(&config);
        let dir = out.join("runs").join(&hash[..16]);
        let cached_row = dir.join(ROW_FILE);
        let row = if cached_row.exists() {
            let mut row: AblationRow = serde_json::from_slice(&fs::read(&cached_row)?)?;
            row.name = name.clone();
            row.cached = true;
            row
        } else {
            let mut row = AblationRow {
                name: name.clone(),
                variant: variant.to_string(),
                fsq_dim: variant.apply(&config.model).fsq_dim,
                config_hash: hash,
                ok: true,
                error: None,
                final_train_loss: None,
                flow_loss: None,
                null_flow_loss: None,
                stop_accuracy: None,
                generation_mse: None,
                heldout_flow_loss: None,
                heldout_generation_mse: None,
                train_seconds: 0.0,
                cached: false,
            };
            match run_variant(inputs, &config, &dir, &mut row) {
                Ok(()) => atomic_write(&cached_row, &serde_json::to_vec_pretty(&row)?)?,
                Err(e) => {
                    row.ok = false;
                    row.error = Some(e.to_string());
                }
            }
            row
        };
        on_row(&row);
        rows.push(row);
    }
    write_table(out, &rows)?;
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.5}"));
    let mut s = format!(
        "{:<20} {:<22} {:>4} {:>9} {:>9} {:>8} {:>9} {:>9} {:>9}\n",
        "name", "variant", "fsq", "flow", "null", "stop_acc", "gen_mse", "ho_flow", "ho_gen"
    );
    for r in rows {
        if !r.ok {
            s.push_str(&format!(
                "{:<20} {:<22} FAILED: {}\n",
                r.name,
                r.variant,
                r.error.as_deref().unwrap_or("")
            ));
            continue;
        }
        let fsq = if r.variant == "no_fsq" || r.variant == "no_ralm" {
            "-".to_string()
        } else {
            r.fsq_dim.to_string()
        };
        s.push_str(&format!(
            "{:<20} {:<22} {:>4} {:>9} {:>9} {:>8} {:>9} {:>9} {:>9}\n",
            r.name,
            r.variant,
            fsq,
            opt(r.flow_loss),
            opt(r.null_flow_loss),
            opt(r.stop_accuracy),
            opt(r.generation_mse),
            opt(r.heldout_flow_loss),
            opt(r.heldout_generation_mse),
        ));
    }
    s
}

fn write_table(out: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(out)?;
    atomic_write(&out.join(TABLE_TEXT), format_table(rows).as_bytes())?;
    let mut lines = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    atomic_write(&out.join(TABLE_RECORDS), &lines)
}
