//! Named-tensor archives and checkpoint directories.
//!
//! A checkpoint directory holds `config.txt`, `params.bin`, and for training
//! runs `optim.bin` plus `trainer.json`. Directories are staged next to the
//! target and swapped in with a rename, so a crash never leaves a partial
//! checkpoint under the final name. Saving the same state twice produces the
//! same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::TtsModel;
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STNS";
const VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.txt";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const TRAINER_FILE: &str = "trainer.json";

pub fn archive_bytes<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_archive(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("not a tensor archive"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported archive version {version}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    parse_archive(&fs::read(path)?, path)
}

/// Writes via a sibling temp file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a whole directory of files, replacing `dir` only once every file
/// is on disk.
pub fn write_dir_atomically(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{name}.partial"));
    let retired = parent.join(format!(".{name}.old"));
    for stale in [&staging, &retired] {
        if stale.exists() {
            fs::remove_dir_all(stale)?;
        }
    }
    fs::create_dir_all(&staging)?;
    for (file, bytes) in files {
        fs::write(staging.join(file), bytes)?;
    }
    if dir.exists() {
        fs::rename(dir, &retired)?;
    }
    fs::rename(&staging, dir)?;
    if retired.exists() {
        fs::remove_dir_all(&retired)?;
    }
    Ok(())
}

pub fn params_bytes(params: &ParamStore) -> Vec<u8> {
    archive_bytes(params.iter().map(|(_, n, t)| (n, t)))
}

/// Copies archived values into `params`, requiring the same names and shapes.
pub fn load_params_into(params: &mut ParamStore, entries: Vec<(String, Tensor)>, path: &Path) -> Result<()> {
    if entries.len() != params.len() {
        let have: std::collections::BTreeSet<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        let want: std::collections::BTreeSet<&str> = params.names().iter().map(String::as_str).collect();
        let missing: Vec<_> = want.difference(&have).collect();
        let extra: Vec<_> = have.difference(&want).collect();
        return Err(Error::Mismatch(format!(
            "{}: parameter set differs (missing {missing:?}, unexpected {extra:?})",
            path.display()
        )));
    }
    for (name, t) in entries {
        let id = params
            .id(&name)
            .ok_or_else(|| Error::Mismatch(format!("{}: unexpected parameter `{name}`", path.display())))?;
        let want = params.tensor(id).shape();
        if t.shape() != want {
            return Err(Error::Mismatch(format!(
                "{}: `{name}` has shape {:?}, model expects {want:?}",
                path.display(),
                t.shape()
            )));
        }
        *params.tensor_mut(id) = t;
    }
    Ok(())
}

/// Bookkeeping needed to resume a run exactly.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub optimizer_updates: u64,
}

/// Keys whose values differ between two configurations, as
/// `(key, left, right)`.
pub fn config_diff(a: &Config, b: &Config) -> Vec<(String, String, String)> {
    let split = |c: &Config| -> Vec<(String, String)> {
        c.to_text()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    };
    split(a)
        .into_iter()
        .zip(split(b))
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, y)| (x.0, x.1, y.1))
        .collect()
}

/// Configuration as stored with a model: the variant's overrides applied.
pub fn effective_config(config: &Config) -> Config {
    let mut c = config.clone();
    c.model = c.train.ablation_variant.apply(&c.model);
    c
}

pub fn save_checkpoint(
    dir: &Path,
    config: &Config,
    model: &TtsModel,
    optim: Option<(&AdamW, &TrainerState)>,
) -> Result<()> {
    let config = effective_config(config);
    let mut files = vec![
        (CONFIG_FILE, config.to_text().into_bytes()),
        (PARAMS_FILE, params_bytes(&model.params)),
    ];
    if let Some((opt, trainer)) = optim {
        let names = model.params.names();
        let mut entries: Vec<(String, &Tensor)> = Vec::with_capacity(2 * names.len());
        for (i, n) in names.iter().enumerate() {
            entries.push((format!("m.{n}"), &opt.m[i]));
            entries.push((format!("v.{n}"), &opt.v[i]));
        }
        files.push((OPTIM_FILE, archive_bytes(entries.iter().map(|(n, t)| (n.as_str(), *t)))));
        let mut json = serde_json::to_vec_pretty(trainer)?;
        json.push(b'\n');
        files.push((TRAINER_FILE, json));
    }
    write_dir_atomically(dir, &files)
}

#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub config: Config,
    pub model: TtsModel,
    pub optim: Option<(AdamW, TrainerState)>,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let config = Config::load(&dir.join(CONFIG_FILE))?;
    let mut model = TtsModel::new(&config.model, config.train.ablation_variant, config.train.seed)?;
    let params_path = dir.join(PARAMS_FILE);
    load_params_into(&mut model.params, read_archive(&params_path)?, &params_path)?;

    let optim_path = dir.join(OPTIM_FILE);
    let optim = if optim_path.exists() {
        let trainer: TrainerState = serde_json::from_slice(&fs::read(dir.join(TRAINER_FILE))?)?;
        let t = &config.train;
        let mut opt = AdamW::new(&model.params, t.beta1, t.beta2, t.weight_decay);
        opt.t = trainer.optimizer_updates;
        let mut m_store = ParamStore::default();
        let mut v_store = ParamStore::default();
        for (_, n, t) in model.params.iter() {
            m_store.insert(format!("m.{n}"), Tensor::zeros(t.rows(), t.cols()));
            v_store.insert(format!("v.{n}"), Tensor::zeros(t.rows(), t.cols()));
        }
        let (m_entries, v_entries): (Vec<_>, Vec<_>) = read_archive(&optim_path)?
            .into_iter()
            .partition(|(n, _)| n.starts_with("m."));
        load_params_into(&mut m_store, m_entries, &optim_path)?;
        load_params_into(&mut v_store, v_entries, &optim_path)?;
        opt.m = m_store.iter().map(|(_, _, t)| t.clone()).collect();
        opt.v = v_store.iter().map(|(_, _, t)| t.clone()).collect();
        Some((opt, trainer))
    } else {
        None
    };
    Ok(LoadedCheckpoint { config, model, optim })
}

/// Just the model, for inference.
pub fn load_model(dir: &Path) -> Result<TtsModel> {
    let config = Config::load(&dir.join(CONFIG_FILE))?;
    let mut model = TtsModel::new(&config.model, config.train.ablation_variant, config.train.seed)?;
    let path = dir.join(PARAMS_FILE);
    load_params_into(&mut model.params, read_archive(&path)?, &path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_and_corruption() {
        let a = Tensor::from_vec(2, 2, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]);
        let b = Tensor::zeros(0, 3);
        let bytes = archive_bytes([("a", &a), ("b.c", &b)]);
        let back = parse_archive(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b.c".to_string(), b)]);
        assert_eq!(archive_bytes(back.iter().map(|(n, t)| (n.as_str(), t))), bytes);

        assert!(matches!(
            parse_archive(&bytes[..bytes.len() - 1], Path::new("x")),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_archive(&extra, Path::new("x")).is_err());
        assert!(parse_archive(b"nope", Path::new("x")).is_err());
    }

    #[test]
    fn directory_swap_replaces_contents() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        write_dir_atomically(&dir, &[("a", b"1".to_vec()), ("b", b"2".to_vec())]).unwrap();
        write_dir_atomically(&dir, &[("a", b"3".to_vec())]).unwrap();
        assert_eq!(fs::read(dir.join("a")).unwrap(), b"3");
        assert!(!dir.join("b").exists());
        let leftovers: Vec<_> = fs::read_dir(tmp.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn diff_lists_changed_keys() {
        let a = Config::default();
        let mut b = a.clone();
        b.model.fsq_levels = 7;
        b.train.seed = 3;
        let d = config_diff(&a, &b);
        let keys: Vec<_> = d.iter().map(|x| x.0.as_str()).collect();
        assert_eq!(keys, vec!["fsq_levels", "seed"]);
        assert_eq!(d[0].1, "9");
        assert_eq!(d[0].2, "7");
    }
}
