//! Binary checkpoints: "GLRC" magic, little-endian header, f32 tensors in
//! declared order, plus a JSON metadata sidecar.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use glrec::numkit::DenseMatrix;
use glrec::student::StudentModel;
use glrec::teacher::TeacherModel;
use glrec::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"GLRC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
}

impl ModelKind {
    fn to_byte(self) -> u8 {
        match self {
            ModelKind::Teacher => 0,
            ModelKind::Student => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ModelKind::Teacher),
            1 => Ok(ModelKind::Student),
            other => Err(Error::Data(format!("unknown model kind byte {other}"))),
        }
    }
}

/// In-memory checkpoint contents. `layers` is the graph depth L for a
/// teacher and the MLP depth L' for a student; `weights` is empty for a
/// teacher and holds W_1..W_L' for a student.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub user_count: usize,
    pub item_count: usize,
    pub dim: usize,
    pub layers: usize,
    pub leaky_slope: f32,
    pub embeddings: DenseMatrix,
    pub weights: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub validation_metric: f64,
    #[serde(default)]
    pub layer_average: bool,
}

impl Checkpoint {
    pub fn from_teacher(model: &TeacherModel) -> Self {
        Checkpoint {
            kind: ModelKind::Teacher,
            user_count: model.user_count,
            item_count: model.item_count,
            dim: model.embeddings.cols,
            layers: model.layer_count,
            leaky_slope: 0.0,
            embeddings: model.embeddings.clone(),
            weights: Vec::new(),
        }
    }

    pub fn from_student(model: &StudentModel) -> Self {
        Checkpoint {
            kind: ModelKind::Student,
            user_count: model.user_count,
            item_count: model.item_count,
            dim: model.dim(),
            layers: model.weights.len(),
            leaky_slope: model.leaky_slope as f32,
            embeddings: model.embeddings.clone(),
            weights: model.weights.clone(),
        }
    }

    /// Rebuild a runnable student. Fails on teacher checkpoints.
    pub fn into_student(self) -> Result<StudentModel> {
        if self.kind != ModelKind::Student {
            return Err(Error::Data("checkpoint does not hold a student".into()));
        }
        StudentModel::from_parts(
            self.user_count,
            self.item_count,
            self.embeddings,
            self.weights,
            self.leaky_slope as f64,
        )
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &DenseMatrix) {
    for &v in &m.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(ckpt.kind.to_byte());
    out.extend_from_slice(&(ckpt.user_count as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.item_count as u64).to_le_bytes());
    out.extend_from_slice(&(ckpt.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.layers as u32).to_le_bytes());
    out.extend_from_slice(&ckpt.leaky_slope.to_le_bytes());
    write_matrix(&mut out, &ckpt.embeddings);
    for w in &ckpt.weights {
        write_matrix(&mut out, w);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn read_exact_n(data: &[u8], pos: &mut usize, n: usize) -> Result<Vec<u8>> {
    if *pos + n > data.len() {
        return Err(Error::Data("checkpoint truncated".into()));
    }
    let out = data[*pos..*pos + n].to_vec();
    *pos += n;
    Ok(out)
}

fn read_matrix(data: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<DenseMatrix> {
    let bytes = read_exact_n(data, pos, rows * cols * 4)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DenseMatrix::from_vec(rows, cols, values)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let magic = read_exact_n(&data, &mut pos, 4)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact_n(&data, &mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let kind = ModelKind::from_byte(read_exact_n(&data, &mut pos, 1)?[0])?;
    let user_count = u64::from_le_bytes(read_exact_n(&data, &mut pos, 8)?.try_into().unwrap()) as usize;
    let item_count = u64::from_le_bytes(read_exact_n(&data, &mut pos, 8)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(read_exact_n(&data, &mut pos, 4)?.try_into().unwrap()) as usize;
    let layers = u32::from_le_bytes(read_exact_n(&data, &mut pos, 4)?.try_into().unwrap()) as usize;
    let leaky_slope = f32::from_le_bytes(read_exact_n(&data, &mut pos, 4)?.try_into().unwrap());
    let nodes = user_count + item_count;
    let embeddings = read_matrix(&data, &mut pos, nodes, dim)?;
    let mut weights = Vec::new();
    if kind == ModelKind::Student {
        for _ in 0..layers {
            weights.push(read_matrix(&data, &mut pos, dim, dim)?);
        }
    }
    if pos != data.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            data.len() - pos
        )));
    }
    Ok(Checkpoint {
        kind,
        user_count,
        item_count,
        dim,
        layers,
        leaky_slope,
        embeddings,
        weights,
    })
}

pub fn meta_path(ckpt_path: &Path) -> PathBuf {
    let mut name = ckpt_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    ckpt_path.with_file_name(name)
}

pub fn save_meta(ckpt_path: &Path, meta: &Meta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Data(format!("meta serialization: {e}")))?;
    std::fs::write(meta_path(ckpt_path), text)?;
    Ok(())
}

pub fn load_meta(ckpt_path: &Path) -> Result<Meta> {
    let text = std::fs::read_to_string(meta_path(ckpt_path))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("meta parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use glrec::numkit::{xavier_init, Rng};

    fn sample_student_ckpt() -> Checkpoint {
        let mut rng = Rng::new(3);
        Checkpoint {
            kind: ModelKind::Student,
            user_count: 3,
            item_count: 4,
            dim: 5,
            layers: 2,
            leaky_slope: 0.01,
            embeddings: xavier_init(7, 5, &mut rng).unwrap(),
            weights: vec![
                xavier_init(5, 5, &mut rng).unwrap(),
                xavier_init(5, 5, &mut rng).unwrap(),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_student_ckpt();
        save(&path, &ckpt).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load(&path).unwrap();
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &loaded).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE12345").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn truncated_tensor_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_student_ckpt()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &sample_student_ckpt()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn meta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = Meta {
            config_hash: "abc123".into(),
            seed: 7,
            epoch: 12,
            validation_metric: 0.42,
            layer_average: false,
        };
        save_meta(&path, &meta).unwrap();
        let loaded = load_meta(&path).unwrap();
        assert_eq!(loaded.config_hash, meta.config_hash);
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.epoch, 12);
    }
}
