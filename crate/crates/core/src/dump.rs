//! Per-utterance export of skeleton and residual hiddens for offline
//! dimensionality reduction.
//!
//! `out_dir/index.jsonl` lists one [`DumpRecord`] per utterance; each points
//! at a named-tensor archive holding `skeleton_up`, `residual`, `pre_q` and
//! `lattice_vec`, all `patches × width`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{archive_bytes, atomic_write};
use crate::corpus::Utterance;
use crate::error::Result;
use crate::model::TtsModel;

pub const DUMP_INDEX: &str = "index.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
    pub patches: usize,
    pub file: String,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn dump_hiddens(model: &TtsModel, corpus: &[Utterance], out_dir: &Path) -> Result<Vec<DumpRecord>> {
    fs::create_dir_all(out_dir)?;
    let p = model.patch_size();
    let mut records = Vec::with_capacity(corpus.len());
    for (i, u) in corpus.iter().enumerate() {
        let (frames, _) = u.padded(p);
        let out = model.backbone.evaluate(&model.params, &u.tokens(), &frames)?;
        let file = format!("{:05}_{}.stns", i, file_stem(&u.id));
        let bytes = archive_bytes([
            ("skeleton_up", &out.skeleton_up),
            ("residual", &out.residual),
            ("pre_q", &out.pre_q),
            ("lattice_vec", &out.lattice_vec),
        ]);
        atomic_write(&out_dir.join(&file), &bytes)?;
        records.push(DumpRecord {
            id: u.id.clone(),
            text: u.text.clone(),
            label: u.label.clone(),
            patches: out.skeleton_up.rows(),
            file,
        });
    }
    let mut index = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut index, r)?;
        index.write_all(b"\n")?;
    }
    atomic_write(&out_dir.join(DUMP_INDEX), &index)?;
    Ok(records)
}
