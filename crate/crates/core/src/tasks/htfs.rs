//! HTFS v1: a JSON manifest plus one little-endian binary file per task.
//!
//! Task file layout:
//!
//! ```text
//! "HTFS" | u32 M | u32 N | u32 K | u32 KQ | M × u32 D_m
//! support: for m in 0..M { N·K·D_m f32 }   (class-major, then shot)
//!          N·K u32 labels
//! query:   same layout with KQ in place of K
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{compute_config_vector, ConfigVector, HtdSpec, LabeledSample, TaskError, TaskInstance};

pub const HTFS_MAGIC: [u8; 4] = *b"HTFS";
pub const HTFS_VERSION: &str = "htfs-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub file: String,
    pub type_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub modality_dims: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
    pub task_types: Vec<Vec<u8>>,
    pub tasks: Vec<ManifestTask>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_set(buf: &mut Vec<u8>, samples: &[LabeledSample], modalities: usize) {
    for m in 0..modalities {
        for s in samples {
            for &v in &s.modalities[m] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    for s in samples {
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
    }
}

fn encode_task(spec: &HtdSpec, task: &TaskInstance) -> Vec<u8> {
    let m = spec.modalities();
    let mut buf = Vec::new();
    buf.extend_from_slice(&HTFS_MAGIC);
    for v in [m, spec.n_way, spec.k_shot, spec.k_query] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &d in &spec.modality_dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    write_set(&mut buf, &task.support, m);
    write_set(&mut buf, &task.query, m);
    buf
}

/// Writes `manifest.json` and `task_XXXXX.htfs` files into `dir`.
/// Values are stored as 32-bit floats.
pub fn save_meta_dataset(dir: &Path, spec: &HtdSpec, tasks: &[TaskInstance]) -> Result<PathBuf, TaskError> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let file = format!("task_{i:05}.htfs");
        let path = dir.join(&file);
        fs::write(&path, encode_task(spec, task)).map_err(io_err(&path))?;
        entries.push(ManifestTask {
            file,
            type_id: task.type_id,
        });
    }
    let manifest = Manifest {
        version: HTFS_VERSION.to_string(),
        m: spec.modalities(),
        modality_dims: spec.modality_dims.clone(),
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        k_query: spec.k_query,
        task_types: spec.task_types.iter().map(ConfigVector::bits).collect(),
        tasks: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| TaskError::Manifest {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn f32(&mut self) -> f64 {
        let v = f32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        f64::from(v)
    }

    fn set(&mut self, count: usize, dims: &[usize]) -> Vec<LabeledSample> {
        let mut samples: Vec<LabeledSample> = (0..count)
            .map(|_| LabeledSample {
                modalities: Vec::with_capacity(dims.len()),
                label: 0,
            })
            .collect();
        for &d in dims {
            for s in &mut samples {
                s.modalities.push((0..d).map(|_| self.f32()).collect());
            }
        }
        for s in &mut samples {
            s.label = self.u32() as usize;
        }
        samples
    }
}

fn decode_task(path: &Path, bytes: &[u8], spec: &HtdSpec) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>), TaskError> {
    let format = |reason: String| TaskError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let m = spec.modalities();
    let header = 4 + 16 + 4 * m;
    if bytes.len() < 4 || bytes[..4] != HTFS_MAGIC {
        return Err(format("bad magic number, expected \"HTFS\"".into()));
    }
    if bytes.len() < header {
        return Err(TaskError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let fields = [r.u32(), r.u32(), r.u32(), r.u32()].map(|v| v as usize);
    let expected_fields = [m, spec.n_way, spec.k_shot, spec.k_query];
    if fields != expected_fields {
        return Err(format(format!(
            "header (M, N, K, KQ) = {fields:?} disagrees with manifest {expected_fields:?}"
        )));
    }
    let dims: Vec<usize> = (0..m).map(|_| r.u32() as usize).collect();
    if dims != spec.modality_dims {
        return Err(format(format!(
            "modality dims {dims:?} disagree with manifest {:?}",
            spec.modality_dims
        )));
    }
    let per_sample: usize = dims.iter().sum::<usize>() * 4 + 4;
    let n_support = spec.n_way * spec.k_shot;
    let n_query = spec.n_way * spec.k_query;
    let expected = header + per_sample * (n_support + n_query);
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(TaskError::Truncated {
                path: path.to_path_buf(),
                expected,
                found: bytes.len(),
            });
        }
        return Err(format(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let support = r.set(n_support, &dims);
    let query = r.set(n_query, &dims);
    check_episode(path, spec, &support, &query)?;
    Ok((support, query))
}

fn check_episode(
    path: &Path,
    spec: &HtdSpec,
    support: &[LabeledSample],
    query: &[LabeledSample],
) -> Result<(), TaskError> {
    let mut per_class = vec![0usize; spec.n_way];
    for s in support.iter().chain(query) {
        if s.label >= spec.n_way {
            return Err(TaskError::Format {
                path: path.to_path_buf(),
                reason: format!("label {} out of range for {}-way tasks", s.label, spec.n_way),
            });
        }
    }
    for s in support {
        per_class[s.label] += 1;
    }
    if per_class.iter().any(|&c| c != spec.k_shot) {
        return Err(TaskError::Format {
            path: path.to_path_buf(),
            reason: format!("support class counts {per_class:?}, expected {} each", spec.k_shot),
        });
    }
    Ok(())
}

/// Reads a manifest and all task files it lists, recomputing each task's
/// configuration vector with `epsilon` and checking it against the declared
/// task type.
pub fn load_meta_dataset(manifest_path: &Path, epsilon: f64) -> Result<(HtdSpec, Vec<TaskInstance>), TaskError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| TaskError::Manifest {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let format = |reason: String| TaskError::Format {
        path: manifest_path.to_path_buf(),
        reason,
    };
    if manifest.version != HTFS_VERSION {
        return Err(format(format!("unsupported version `{}`", manifest.version)));
    }
    if manifest.m != manifest.modality_dims.len() {
        return Err(format(format!(
            "M = {} but {} modality dims listed",
            manifest.m,
            manifest.modality_dims.len()
        )));
    }
    if manifest.task_types.iter().flatten().any(|&b| b > 1) {
        return Err(format("task type masks must contain only 0 and 1".into()));
    }
    let spec = HtdSpec::new(
        manifest.modality_dims.clone(),
        manifest.task_types.iter().map(|b| ConfigVector::from_bits(b)).collect(),
        manifest.n_way,
        manifest.k_shot,
        manifest.k_query,
    )?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let declared = spec
            .task_types
            .get(entry.type_id)
            .ok_or_else(|| format(format!("{}: unknown type_id {}", entry.file, entry.type_id)))?;
        let path = base.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let (support, query) = decode_task(&path, &bytes, &spec)?;
        let config = compute_config_vector(&support, epsilon)?;
        if &config != declared {
            return Err(TaskError::ConfigMismatch {
                task: path.display().to_string(),
                computed: config,
                declared: declared.clone(),
            });
        }
        tasks.push(TaskInstance {
            support,
            query,
            config,
            type_id: entry.type_id,
        });
    }
    Ok((spec, tasks))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tasks::{make_class_bank, parse_task_types, PrototypeMode, Split, TaskSampler};

    fn dataset(dir: &Path, n: usize) -> (HtdSpec, Vec<TaskInstance>, PathBuf) {
        let spec = HtdSpec::new(vec![4, 3], parse_task_types("X1,X2,X1+X2", 2).unwrap(), 3, 2, 2).unwrap();
        let bank = make_class_bank(&[4, 3], 12, 1.0, PrototypeMode::Independent, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut s = TaskSampler::new(spec.clone(), bank, Split::Train, 0.3, 0.1, 1).unwrap();
        let tasks: Vec<_> = (0..n).map(|_| s.sample().unwrap()).collect();
        let manifest = save_meta_dataset(dir, &spec, &tasks).unwrap();
        (spec, tasks, manifest)
    }

    #[test]
    fn round_trip_matches_up_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, tasks, manifest) = dataset(dir.path(), 6);
        let (loaded_spec, loaded) = load_meta_dataset(&manifest, 0.1).unwrap();
        assert_eq!(loaded_spec, spec);
        assert_eq!(loaded.len(), tasks.len());
        for (a, b) in tasks.iter().zip(&loaded) {
            assert_eq!((a.type_id, &a.config), (b.type_id, &b.config));
            for (x, y) in a.support.iter().chain(&a.query).zip(b.support.iter().chain(&b.query)) {
                assert_eq!(x.label, y.label);
                for (u, v) in x.modalities.iter().flatten().zip(y.modalities.iter().flatten()) {
                    assert_eq!(*u as f32 as f64, *v);
                }
            }
        }
    }

    #[test]
    fn truncated_file_names_path_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, manifest) = dataset(dir.path(), 2);
        let file = dir.path().join("task_00001.htfs");
        let bytes = fs::read(&file).unwrap();
        fs::write(&file, &bytes[..bytes.len() - 5]).unwrap();
        match load_meta_dataset(&manifest, 0.1).unwrap_err() {
            TaskError::Truncated { path, expected, found } => {
                assert_eq!(path, file);
                assert_eq!(expected, bytes.len());
                assert_eq!(found, bytes.len() - 5);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, manifest) = dataset(dir.path(), 1);
        let file = dir.path().join("task_00000.htfs");
        let mut bytes = fs::read(&file).unwrap();
        bytes[0] = b'X';
        fs::write(&file, bytes).unwrap();
        assert!(matches!(load_meta_dataset(&manifest, 0.1), Err(TaskError::Format { .. })));
    }

    #[test]
    fn declared_type_must_match_data() {
        let dir = tempfile::tempdir().unwrap();
        let (_, tasks, manifest) = dataset(dir.path(), 8);
        let single = tasks.iter().position(|t| t.type_id != 2).unwrap();
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
        m.tasks[single].type_id = 2;
        fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_meta_dataset(&manifest, 0.1), Err(TaskError::ConfigMismatch { .. })));
    }

    #[test]
    fn manifest_keys() {
        let dir = tempfile::tempdir().unwrap();
        let (_, _, manifest) = dataset(dir.path(), 1);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
        for key in ["version", "M", "modality_dims", "n_way", "k_shot", "k_query", "task_types", "tasks"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["version"], "htfs-1");
        assert_eq!(v["task_types"], serde_json::json!([[1, 0], [0, 1], [1, 1]]));
    }
}
