//! On-disk dataset format: a JSON manifest plus headerless little-endian f32
//! payloads (row-major), and the in-memory [`FeatureMatrix`].

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const FEATURES_FILE: &str = "features.bin";
pub const ACTIVATIONS_FILE: &str = "activations.bin";
pub const LOGITS_FILE: &str = "logits.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Id,
    Wild,
    LabeledId,
    LabeledOod,
}

impl Role {
    /// Ground-truth OOD label when the role carries one (1 = OOD).
    pub fn truth(self) -> Option<u8> {
        match self {
            Role::Id | Role::LabeledId => Some(0),
            Role::LabeledOod => Some(1),
            Role::Wild => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Id => "ID",
            Role::Wild => "WILD",
            Role::LabeledId => "LABELED_ID",
            Role::LabeledOod => "LABELED_OOD",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ID" => Some(Role::Id),
            "WILD" => Some(Role::Wild),
            "LABELED_ID" => Some(Role::LabeledId),
            "LABELED_OOD" => Some(Role::LabeledOod),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub role: Role,
    pub row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_row: Option<usize>,
}

impl SampleRecord {
    pub fn new(sample_id: impl Into<String>, role: Role, row: usize) -> Self {
        SampleRecord {
            sample_id: sample_id.into(),
            role,
            row,
            lat: None,
            lon: None,
            class_label: None,
            logits_row: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor_shape: Option<(usize, usize, usize)>,
    pub samples: Vec<SampleRecord>,
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_file: Option<String>,
}

impl DatasetManifest {
    pub fn for_features(samples: Vec<SampleRecord>, feature_dim: usize) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            feature_dim: Some(feature_dim),
            tensor_shape: None,
            samples,
            data_file: FEATURES_FILE.to_string(),
            logit_dim: None,
            logits_file: None,
        }
    }

    pub fn for_tensors(samples: Vec<SampleRecord>, shape: (usize, usize, usize)) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            feature_dim: None,
            tensor_shape: Some(shape),
            samples,
            data_file: ACTIVATIONS_FILE.to_string(),
            logit_dim: None,
            logits_file: None,
        }
    }

    /// Number of f32 values per payload record.
    pub fn record_size(&self) -> usize {
        match (self.feature_dim, self.tensor_shape) {
            (Some(f), _) => f,
            (None, Some((c, h, w))) => c * h * w,
            (None, None) => 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedManifest(m));
        if self.version < 1 {
            return bad(format!("unsupported version {}", self.version));
        }
        match (self.feature_dim, self.tensor_shape) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("exactly one of feature_dim / tensor_shape must be set".into())
            }
            (Some(0), None) => return bad("feature_dim must be positive".into()),
            (None, Some((c, h, w))) if c == 0 || h == 0 || w == 0 => {
                return bad("tensor_shape entries must be positive".into())
            }
            _ => {}
        }
        if self.logit_dim == Some(0) {
            return bad("logit_dim must be positive".into());
        }
        let n = self.samples.len();
        let mut rows = vec![false; n];
        let mut ids = HashSet::with_capacity(n);
        for s in &self.samples {
            if s.row >= n {
                return bad(format!("sample {:?} row {} out of range", s.sample_id, s.row));
            }
            if std::mem::replace(&mut rows[s.row], true) {
                return bad(format!("row {} used twice", s.row));
            }
            if !ids.insert(s.sample_id.as_str()) {
                return bad(format!("duplicate sample_id {:?}", s.sample_id));
            }
            if let Some(lat) = s.lat {
                if !(-90.0..=90.0).contains(&lat) {
                    return bad(format!("sample {:?} latitude {lat} out of range", s.sample_id));
                }
            }
            if let Some(lon) = s.lon {
                if !(-180.0..=180.0).contains(&lon) {
                    return bad(format!("sample {:?} longitude {lon} out of range", s.sample_id));
                }
            }
        }
        Ok(())
    }
}

/// Dense row-major matrix of f32 feature vectors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch {
                expected: n_rows * n_cols,
                found: values.len(),
            });
        }
        Ok(FeatureMatrix {
            n_rows,
            n_cols,
            values,
        })
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        FeatureMatrix {
            n_rows,
            n_cols,
            values: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(n_cols: usize, rows: &[R]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(FeatureMatrix {
            n_rows: rows.len(),
            n_cols,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            n_rows: idx.len(),
            n_cols: self.n_cols,
            values,
        }
    }

    /// Every (row, col) holding NaN or infinity.
    pub fn non_finite(&self) -> Vec<(usize, usize)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| (i / self.n_cols.max(1), i % self.n_cols.max(1)))
            .collect()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Where a row of a combined matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Id,
    Wild,
}

/// Stack ID rows above WILD rows, tagging each row with its origin.
pub fn concat(id_set: &FeatureMatrix, wild_set: &FeatureMatrix) -> Result<(FeatureMatrix, Vec<Origin>)> {
    if id_set.n_cols != wild_set.n_cols {
        return Err(Error::DimensionMismatch {
            expected: id_set.n_cols,
            found: wild_set.n_cols,
        });
    }
    let mut values = Vec::with_capacity(id_set.values.len() + wild_set.values.len());
    values.extend_from_slice(&id_set.values);
    values.extend_from_slice(&wild_set.values);
    let mut origin = vec![Origin::Id; id_set.n_rows];
    origin.extend(std::iter::repeat_n(Origin::Wild, wild_set.n_rows));
    Ok((
        FeatureMatrix {
            n_rows: id_set.n_rows + wild_set.n_rows,
            n_cols: id_set.n_cols,
            values,
        },
        origin,
    ))
}

fn manifest_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

pub fn read_manifest(manifest_path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedManifest(format!("{}: {e}", manifest_path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Read `n_records × record_size` f32 values; record `r` of the result is
/// payload record `rows[r]`.
fn read_payload(path: &Path, n_records: usize, record_size: usize, rows: &[usize]) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (n_records * record_size * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let raw: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut values = Vec::with_capacity(raw.len());
    for &r in rows {
        values.extend_from_slice(&raw[r * record_size..(r + 1) * record_size]);
    }
    FeatureMatrix::new(rows.len(), record_size, values)
}

fn reject_non_finite(m: &FeatureMatrix, payload_rows: &[usize]) -> Result<()> {
    let bad = m.non_finite();
    if let Some(&(row, col)) = bad.first() {
        let mut offending: Vec<usize> = bad.iter().map(|&(r, _)| payload_rows[r]).collect();
        offending.dedup();
        return Err(Error::NonFiniteValue {
            row: payload_rows[row],
            col,
            offending_rows: offending,
        });
    }
    Ok(())
}

/// Load a manifest and its payload. Row `i` of the matrix belongs to
/// `manifest.samples[i]`. Works for both pooled and raw-tensor manifests; for
/// the latter each row holds the flattened `C·H·W` tensor.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, FeatureMatrix)> {
    let manifest = read_manifest(manifest_path)?;
    let payload = manifest_dir(manifest_path).join(&manifest.data_file);
    let rows: Vec<usize> = manifest.samples.iter().map(|s| s.row).collect();
    let matrix = read_payload(&payload, manifest.len(), manifest.record_size(), &rows)?;
    reject_non_finite(&matrix, &rows)?;
    Ok((manifest, matrix))
}

/// Load the optional logits payload, aligned with `manifest.samples`.
/// Returns `Ok(None)` when the manifest declares no logits.
pub fn load_logits(manifest: &DatasetManifest, manifest_path: &Path) -> Result<Option<FeatureMatrix>> {
    let Some(logit_dim) = manifest.logit_dim else {
        return Ok(None);
    };
    let file = manifest.logits_file.as_deref().unwrap_or(LOGITS_FILE);
    let missing = manifest.samples.iter().filter(|s| s.logits_row.is_none()).count();
    if missing > 0 {
        return Err(Error::MissingLogits(missing));
    }
    let rows: Vec<usize> = manifest.samples.iter().filter_map(|s| s.logits_row).collect();
    let path = manifest_dir(manifest_path).join(file);
    let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len() as usize;
    let n_records = len / (4 * logit_dim);
    if rows.iter().any(|&r| r >= n_records) {
        return Err(Error::MalformedManifest("logits_row out of range".into()));
    }
    let m = read_payload(&path, n_records, logit_dim, &rows)?;
    reject_non_finite(&m, &rows)?;
    Ok(Some(m))
}

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = manifest_dir(path);
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Write `manifest.json` and its payload into `dir`. Payload records are
/// written at each sample's `row` index. When `logits` is given it must be
/// aligned with `manifest.samples` and is written in sample order.
pub fn write_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    matrix: &FeatureMatrix,
    logits: Option<&FeatureMatrix>,
) -> Result<PathBuf> {
    manifest.validate()?;
    if matrix.n_rows() != manifest.len() || matrix.n_cols() != manifest.record_size() {
        return Err(Error::DimensionMismatch {
            expected: manifest.len() * manifest.record_size(),
            found: matrix.n_rows() * matrix.n_cols(),
        });
    }
    let mut manifest = manifest.clone();
    let mut payload = vec![0u8; matrix.values.len() * 4];
    let rec = matrix.n_cols() * 4;
    for (i, s) in manifest.samples.iter().enumerate() {
        let dst = &mut payload[s.row * rec..(s.row + 1) * rec];
        for (d, v) in dst.chunks_exact_mut(4).zip(matrix.row(i)) {
            d.copy_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join(&manifest.data_file), &payload)?;
    if let Some(l) = logits {
        if l.n_rows() != manifest.len() {
            return Err(Error::DimensionMismatch {
                expected: manifest.len(),
                found: l.n_rows(),
            });
        }
        manifest.logit_dim = Some(l.n_cols());
        let file = manifest
            .logits_file
            .get_or_insert_with(|| LOGITS_FILE.to_string())
            .clone();
        for (i, s) in manifest.samples.iter_mut().enumerate() {
            s.logits_row = Some(i);
        }
        write_atomic(&dir.join(file), &l.to_le_bytes())?;
    }
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Import a CSV with header `sample_id[,lat,lon],f0,..,f{F-1}`, writing a
/// manifest and payload into `out_dir`.
pub fn import_csv(csv_path: &Path, role: Role, out_dir: &Path) -> Result<(DatasetManifest, FeatureMatrix)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(csv_path)
        .map_err(|e| Error::HeaderMismatch(e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::HeaderMismatch(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("sample_id") {
        return Err(Error::HeaderMismatch("first column must be sample_id".into()));
    }
    let has_coords = header.get(1).map(String::as_str) == Some("lat");
    if has_coords && header.get(2).map(String::as_str) != Some("lon") {
        return Err(Error::HeaderMismatch("lat must be followed by lon".into()));
    }
    let first_feature = if has_coords { 3 } else { 1 };
    let dim = header.len() - first_feature;
    if dim == 0 {
        return Err(Error::HeaderMismatch("no feature columns".into()));
    }
    for (j, h) in header[first_feature..].iter().enumerate() {
        if *h != format!("f{j}") {
            return Err(Error::HeaderMismatch(format!("expected f{j}, found {h:?}")));
        }
    }

    let parse_f64 = |s: &str, line: usize| -> Result<Option<f64>> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| Error::HeaderMismatch(format!("line {line}: {e}")))
    };

    let mut samples = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::HeaderMismatch(e.to_string()))?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let mut s = SampleRecord::new(record[0].trim(), role, i);
        if has_coords {
            s.lat = parse_f64(&record[1], line)?;
            s.lon = parse_f64(&record[2], line)?;
        }
        for field in record.iter().skip(first_feature) {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|e| Error::HeaderMismatch(format!("line {line}: {e}")))?;
            values.push(v);
        }
        samples.push(s);
    }
    let matrix = FeatureMatrix::new(samples.len(), dim, values)?;
    reject_non_finite(&matrix, &(0..matrix.n_rows()).collect::<Vec<_>>())?;
    let manifest = DatasetManifest::for_features(samples, dim);
    write_dataset(out_dir, &manifest, &matrix, None)?;
    Ok((manifest, matrix))
}

/// Inverse of [`import_csv`]. Coordinates columns are written when any sample has them.
pub fn export_csv(path: &Path, manifest: &DatasetManifest, matrix: &FeatureMatrix) -> Result<()> {
    let coords = manifest.samples.iter().any(|s| s.lat.is_some() || s.lon.is_some());
    let mut out = String::from("sample_id");
    if coords {
        out.push_str(",lat,lon");
    }
    for j in 0..matrix.n_cols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (s, row) in manifest.samples.iter().zip(matrix.rows()) {
        out.push_str(&s.sample_id);
        if coords {
            out.push_str(&format!(",{},{}", opt(s.lat), opt(s.lon)));
        }
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
