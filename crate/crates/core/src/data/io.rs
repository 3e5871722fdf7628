use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, PatientTrajectory, Provenance};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Record {
    t_len: usize,
    x: Vec<Vec<f64>>,
    a: Vec<Vec<u8>>,
    y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    k: usize,
    covariate_dim: usize,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

/// Sidecar path holding dataset-level metadata: `<path>.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes one JSON object per patient plus the metadata sidecar.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in &ds.patients {
        let rec = Record {
            t_len: p.len(),
            x: p.x.clone(),
            a: p.a.clone(),
            y: p.y.clone(),
            z: p.z.clone(),
            group: p.group,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = Meta {
        k: ds.k,
        covariate_dim: ds.covariate_dim,
        provenance: ds.provenance.clone(),
        config: ds.config.clone(),
    };
    let mpath = meta_path(path);
    let bytes = serde_json::to_vec_pretty(&meta)?;
    std::fs::write(&mpath, bytes).map_err(|e| Error::io(&mpath, e))
}

/// Reads a dataset written by [`save_dataset`]. Without a sidecar, `k` and
/// the covariate dimension are taken from the first record.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut patients = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.t_len != rec.y.len() {
            return Err(parse_err(
                line_no,
                format!("t_len is {} but y has {} entries", rec.t_len, rec.y.len()),
            ));
        }
        patients.push(PatientTrajectory {
            x: rec.x,
            a: rec.a,
            y: rec.y,
            z: rec.z,
            group: rec.group,
        });
    }

    let mpath = meta_path(path);
    let meta = if mpath.exists() {
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        serde_json::from_str::<Meta>(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: e.line(),
            message: e.to_string(),
        })?
    } else {
        let first = patients.first();
        Meta {
            k: first.and_then(|p| p.a.first()).map_or(0, Vec::len),
            covariate_dim: first.and_then(|p| p.x.first()).map_or(0, Vec::len),
            provenance: Provenance::default(),
            config: None,
        }
    };
    let mut ds = Dataset::new(patients, meta.k, meta.covariate_dim, meta.provenance)?;
    ds.config = meta.config;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_dataset;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut ds = toy_dataset(&[3, 4, 2], 3, 8);
        ds.patients[1].group = Some(2);
        ds.provenance = Provenance {
            generator: "toy".into(),
            config_hash: "abc".into(),
            seed: 8,
        };
        ds.config = Some(serde_json::json!({"n": 3}));
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&toy_dataset(&[3, 4, 2], 2, 1), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 20]).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"t_len\":2,\"x\":[[0.5],[1.0]],\"a\":[[1],[0]],\"y\":[0.1,0.2],\"extra\":{\"v\":1}}\n",
        )
        .unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!((ds.len(), ds.k, ds.covariate_dim), (1, 1, 1));
        assert_eq!(ds.patients[0].a, vec![vec![1], vec![0]]);
    }
}
