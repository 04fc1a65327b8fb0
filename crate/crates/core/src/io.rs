//! Delimited-text ingestion and output.
//!
//! Dataset directory layout:
//!
//! ```text
//! embeddings/<modality>.csv   subject_id,e0,...,e(D-1)   absent row = modality missing
//! subjects.csv                subject_id,cohort_year,infancy_vac,sex
//! labels.csv                  subject_id,fc_peak,y1,fc_retention,y2
//! split.csv                   subject_id,fold            (optional)
//! ```
//!
//! Subjects are aligned by `subject_id`, never by row order, and the cohort
//! is always ordered by id.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Cohort, Fold, Modality, ModalityMatrix, Priming, Sex, SubjectRecord, MISSING_LABEL, N_MODALITIES};
use crate::error::{Error, Result};
use crate::features::{parse_column_name, stratified_split, FeatureTable, LabelRow, RawModalityTable, RawTimepoint, DEFAULT_FRACTIONS};
use crate::tensor::Tensor2;

pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const FEATURES_DIR: &str = "features";

pub fn embedding_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(EMBEDDINGS_DIR).join(format!("{}.csv", m.name()))
}

pub fn feature_path(dir: &Path, m: Modality) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{}.csv", m.name()))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn parse_err(path: &Path, line: u64, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: display(path),
        line,
        column,
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, line, 0, format!("{other:?}")),
    }
}

/// Header plus records with their 1-based line numbers.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    records: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let header = rdr
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            records.push((line, rec));
        }
        Ok(Table {
            path: path.to_path_buf(),
            header,
            records,
        })
    }

    fn expect_header(&self, expected: &[&str]) -> Result<()> {
        if self.header.len() < expected.len()
            || self.header.iter().zip(expected).any(|(a, b)| a != b)
        {
            return Err(parse_err(
                &self.path,
                1,
                1,
                format!("expected header starting {expected:?}, got {:?}", self.header),
            ));
        }
        Ok(())
    }

    fn field<'a>(&self, line: u64, rec: &'a csv::StringRecord, col: usize) -> Result<&'a str> {
        rec.get(col)
            .map(str::trim)
            .ok_or_else(|| parse_err(&self.path, line, col + 1, "missing field"))
    }

    fn number(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<f64> {
        let s = self.field(line, rec, col)?;
        let v: f64 = s
            .parse()
            .map_err(|_| parse_err(&self.path, line, col + 1, format!("'{s}' is not a number")))?;
        if !v.is_finite() {
            return Err(parse_err(&self.path, line, col + 1, format!("non-finite value '{s}'")));
        }
        Ok(v)
    }

    fn parsed<T: std::str::FromStr<Err = Error>>(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<T> {
        let s = self.field(line, rec, col)?;
        s.parse()
            .map_err(|e: Error| parse_err(&self.path, line, col + 1, e.to_string()))
    }

    fn subject_id(&self, line: u64, rec: &csv::StringRecord, seen: &mut BTreeSet<String>) -> Result<String> {
        let id = self.field(line, rec, 0)?;
        if id.is_empty() {
            return Err(parse_err(&self.path, line, 1, "empty subject_id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(parse_err(&self.path, line, 1, format!("duplicate subject_id '{id}'")));
        }
        Ok(id.to_string())
    }

    fn width_check(&self, line: u64, rec: &csv::StringRecord) -> Result<()> {
        if rec.len() != self.header.len() {
            return Err(parse_err(
                &self.path,
                line,
                rec.len().min(self.header.len()) + 1,
                format!("{} fields, header has {}", rec.len(), self.header.len()),
            ));
        }
        Ok(())
    }
}

/// Numeric rows keyed by subject id, with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyedMatrix {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl KeyedMatrix {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }
}

/// Any `subject_id,<numeric columns...>` file.
pub fn read_keyed_matrix(path: &Path) -> Result<KeyedMatrix> {
    let t = Table::read(path)?;
    t.expect_header(&["subject_id"])?;
    let columns = t.header[1..].to_vec();
    let mut seen = BTreeSet::new();
    let mut rows = BTreeMap::new();
    for (line, rec) in &t.records {
        t.width_check(*line, rec)?;
        let id = t.subject_id(*line, rec, &mut seen)?;
        let values = (1..rec.len()).map(|c| t.number(*line, rec, c)).collect::<Result<Vec<_>>>()?;
        rows.insert(id, values);
    }
    Ok(KeyedMatrix { columns, rows })
}

/// Embedding file: columns must be exactly `e0..e(D-1)`.
pub fn read_embeddings(path: &Path) -> Result<KeyedMatrix> {
    let m = read_keyed_matrix(path)?;
    for (j, c) in m.columns.iter().enumerate() {
        if *c != format!("e{j}") {
            return Err(parse_err(path, 1, j + 2, format!("expected column 'e{j}', found '{c}'")));
        }
    }
    if m.columns.is_empty() {
        return Err(parse_err(path, 1, 2, "no embedding columns"));
    }
    Ok(m)
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_keyed_matrix(path: &Path, m: &KeyedMatrix) -> Result<()> {
    let mut header = vec!["subject_id".to_string()];
    header.extend(m.columns.iter().cloned());
    write_csv(
        path,
        &header,
        m.rows.iter().map(|(id, r)| {
            let mut rec = vec![id.clone()];
            rec.extend(r.iter().map(|&v| fmt_f64(v)));
            rec
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub id: String,
    pub cohort_year: Option<i32>,
    pub infancy_vac: Priming,
    pub sex: Sex,
}

pub fn read_subjects(path: &Path) -> Result<BTreeMap<String, SubjectMeta>> {
    let t = Table::read(path)?;
    t.expect_header(&["subject_id", "cohort_year", "infancy_vac", "sex"])?;
    let mut seen = BTreeSet::new();
    let mut out = BTreeMap::new();
    for (line, rec) in &t.records {
        t.width_check(*line, rec)?;
        let id = t.subject_id(*line, rec, &mut seen)?;
        let year = t.field(*line, rec, 1)?;
        let cohort_year = if year.is_empty() {
            None
        } else {
            Some(year.parse().map_err(|_| parse_err(&t.path, *line, 2, format!("bad cohort_year '{year}'")))?)
        };
        out.insert(
            id.clone(),
            SubjectMeta {
                id,
                cohort_year,
                infancy_vac: t.parsed(*line, rec, 2)?,
                sex: t.parsed(*line, rec, 3)?,
            },
        );
    }
    Ok(out)
}

pub fn write_subjects(path: &Path, subjects: &[SubjectMeta]) -> Result<()> {
    let header: Vec<String> = ["subject_id", "cohort_year", "infancy_vac", "sex"].map(String::from).to_vec();
    write_csv(
        path,
        &header,
        subjects.iter().map(|s| {
            vec![
                s.id.clone(),
                s.cohort_year.map_or(String::new(), |y| y.to_string()),
                s.infancy_vac.code().to_string(),
                s.sex.code().to_string(),
            ]
        }),
    )
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, LabelRow>> {
    let t = Table::read(path)?;
    t.expect_header(&["subject_id", "fc_peak", "y1", "fc_retention", "y2"])?;
    let mut seen = BTreeSet::new();
    let mut out = BTreeMap::new();
    for (line, rec) in &t.records {
        t.width_check(*line, rec)?;
        let id = t.subject_id(*line, rec, &mut seen)?;
        let fc_peak = t.number(*line, rec, 1)?;
        let y1: u8 = match t.field(*line, rec, 2)? {
            "0" => 0,
            "1" => 1,
            s => return Err(parse_err(&t.path, *line, 3, format!("y1 must be 0 or 1, got '{s}'"))),
        };
        let fc_retention = if t.field(*line, rec, 3)?.is_empty() {
            None
        } else {
            Some(t.number(*line, rec, 3)?)
        };
        let y2: i8 = match t.field(*line, rec, 4)? {
            "0" => 0,
            "1" => 1,
            "-1" => MISSING_LABEL,
            s => return Err(parse_err(&t.path, *line, 5, format!("y2 must be -1, 0 or 1, got '{s}'"))),
        };
        if (y2 == MISSING_LABEL) != fc_retention.is_none() {
            return Err(parse_err(&t.path, *line, 5, "y2 = -1 exactly when fc_retention is empty"));
        }
        out.insert(
            id.clone(),
            LabelRow {
                subject_id: id,
                fc_peak,
                y1,
                fc_retention,
                y2,
            },
        );
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[LabelRow]) -> Result<()> {
    let header: Vec<String> = ["subject_id", "fc_peak", "y1", "fc_retention", "y2"].map(String::from).to_vec();
    write_csv(
        path,
        &header,
        labels.iter().map(|l| {
            vec![
                l.subject_id.clone(),
                fmt_f64(l.fc_peak),
                l.y1.to_string(),
                l.fc_retention.map_or(String::new(), fmt_f64),
                l.y2.to_string(),
            ]
        }),
    )
}

pub fn read_split(path: &Path) -> Result<BTreeMap<String, Fold>> {
    let t = Table::read(path)?;
    t.expect_header(&["subject_id", "fold"])?;
    let mut seen = BTreeSet::new();
    let mut out = BTreeMap::new();
    for (line, rec) in &t.records {
        t.width_check(*line, rec)?;
        let id = t.subject_id(*line, rec, &mut seen)?;
        out.insert(id, t.parsed(*line, rec, 1)?);
    }
    Ok(out)
}

pub fn write_split(path: &Path, ids: &[String], folds: &[Fold]) -> Result<()> {
    let header: Vec<String> = ["subject_id", "fold"].map(String::from).to_vec();
    write_csv(
        path,
        &header,
        ids.iter().zip(folds).map(|(id, f)| vec![id.clone(), f.name().to_string()]),
    )
}

/// Where the fold assignment of a loaded cohort came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSource {
    File,
    Stratified { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub labels: Vec<LabelRow>,
    pub split_source: SplitSource,
}

/// Joins metadata, labels, optional split and four keyed blocks into a
/// cohort of the labeled subjects.
pub fn assemble_cohort(
    meta: &BTreeMap<String, SubjectMeta>,
    labels: &BTreeMap<String, LabelRow>,
    split: Option<&BTreeMap<String, Fold>>,
    blocks: [KeyedMatrix; N_MODALITIES],
    split_seed: u64,
) -> Result<LoadedCohort> {
    let ids: Vec<&String> = labels.keys().collect();
    let no_meta: Vec<&str> = ids.iter().filter(|id| !meta.contains_key(**id)).map(|s| s.as_str()).collect();
    if !no_meta.is_empty() {
        return Err(Error::data(format!("labeled subjects without metadata: {}", no_meta.join(", "))));
    }
    for (m, block) in blocks.iter().enumerate() {
        let orphans: Vec<&str> = block.rows.keys().filter(|k| !labels.contains_key(*k)).map(|s| s.as_str()).collect();
        if !orphans.is_empty() {
            return Err(Error::data(format!(
                "{} rows for subjects absent from the label table: {}",
                Modality::from_index(m),
                orphans.join(", ")
            )));
        }
    }
    let no_modality: Vec<&str> = ids
        .iter()
        .filter(|id| blocks.iter().all(|b| !b.rows.contains_key(**id)))
        .map(|s| s.as_str())
        .collect();
    if !no_modality.is_empty() {
        return Err(Error::data(format!("subjects with no modality: {}", no_modality.join(", "))));
    }

    let y1: Vec<u8> = ids.iter().map(|id| labels[*id].y1).collect();
    let (folds, split_source) = match split {
        Some(s) => {
            let missing: Vec<&str> = ids.iter().filter(|id| !s.contains_key(**id)).map(|s| s.as_str()).collect();
            if !missing.is_empty() {
                return Err(Error::data(format!("subjects without a fold: {}", missing.join(", "))));
            }
            (ids.iter().map(|id| s[*id]).collect(), SplitSource::File)
        }
        None => (
            stratified_split(&y1, DEFAULT_FRACTIONS, split_seed)?,
            SplitSource::Stratified { seed: split_seed },
        ),
    };

    let n = ids.len();
    let modalities = {
        let mut mats = Vec::with_capacity(N_MODALITIES);
        for (m, block) in blocks.iter().enumerate() {
            let d = block.dim();
            let mut values = vec![0.0; n * d];
            for (i, id) in ids.iter().enumerate() {
                if let Some(r) = block.rows.get(*id) {
                    values[i * d..(i + 1) * d].copy_from_slice(r);
                }
            }
            mats.push(ModalityMatrix {
                modality: Modality::from_index(m),
                values: Tensor2::new(n, d, values)?,
            });
        }
        let mut it = mats.into_iter();
        std::array::from_fn(|_| it.next().expect("four blocks"))
    };
    let subjects = ids
        .iter()
        .zip(&folds)
        .map(|(id, &fold)| {
            let md = &meta[*id];
            let l = &labels[*id];
            SubjectRecord {
                id: (*id).clone(),
                cohort_year: md.cohort_year,
                infancy_vac: md.infancy_vac,
                sex: md.sex,
                y1: l.y1,
                y2: l.y2,
                present: std::array::from_fn(|m| blocks[m].rows.contains_key(*id)),
                fold,
            }
        })
        .collect();
    Ok(LoadedCohort {
        cohort: Cohort::new(subjects, modalities)?,
        labels: labels.values().cloned().collect(),
        split_source,
    })
}

/// Every input file of a dataset directory that exists, for digests.
pub fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = Modality::ALL.iter().map(|&m| embedding_path(dir, m)).collect();
    files.extend(Modality::ALL.iter().map(|&m| feature_path(dir, m)));
    files.extend([SUBJECTS_FILE, LABELS_FILE, SPLIT_FILE].map(|f| dir.join(f)));
    files.into_iter().filter(|p| p.exists()).collect()
}

type Tables = (BTreeMap<String, SubjectMeta>, BTreeMap<String, LabelRow>, Option<BTreeMap<String, Fold>>);

fn read_tables(dir: &Path) -> Result<Tables> {
    let meta = read_subjects(&dir.join(SUBJECTS_FILE))?;
    let labels = read_labels(&dir.join(LABELS_FILE))?;
    let split_path = dir.join(SPLIT_FILE);
    let split = if split_path.exists() { Some(read_split(&split_path)?) } else { None };
    Ok((meta, labels, split))
}

/// Loads the prepared feature tables of a dataset directory in place of
/// embeddings. Dimensions may differ between modalities.
pub fn load_feature_dataset(dir: &Path, split_seed: u64) -> Result<LoadedCohort> {
    let (meta, labels, split) = read_tables(dir)?;
    let mut blocks = Vec::with_capacity(N_MODALITIES);
    for m in Modality::ALL {
        blocks.push(read_keyed_matrix(&feature_path(dir, m))?);
    }
    let mut it = blocks.into_iter();
    let blocks = std::array::from_fn(|_| it.next().expect("four blocks"));
    assemble_cohort(&meta, &labels, split.as_ref(), blocks, split_seed)
}

/// Loads a dataset directory. Embedding dimensions must agree across
/// modalities and with `expected_dim` when given.
pub fn load_dataset(dir: &Path, expected_dim: Option<usize>, split_seed: u64) -> Result<LoadedCohort> {
    let (meta, labels, split) = read_tables(dir)?;
    let mut blocks = Vec::with_capacity(N_MODALITIES);
    for m in Modality::ALL {
        let path = embedding_path(dir, m);
        let block = read_embeddings(&path)?;
        if let Some(d) = expected_dim {
            if block.dim() != d {
                return Err(Error::data(format!("{}: embedding dim {} but expected {d}", display(&path), block.dim())));
            }
        }
        blocks.push(block);
    }
    let d0 = blocks[0].dim();
    if let Some(b) = blocks.iter().find(|b| b.dim() != d0) {
        return Err(Error::data(format!("embedding dims disagree across modalities ({d0} vs {})", b.dim())));
    }
    let mut it = blocks.into_iter();
    let blocks = std::array::from_fn(|_| it.next().expect("four blocks"));
    assemble_cohort(&meta, &labels, split.as_ref(), blocks, split_seed)
}

/// Writes a cohort in the dataset layout. Absent modalities get no row.
pub fn write_dataset(dir: &Path, cohort: &Cohort, labels: &[LabelRow]) -> Result<()> {
    for (m, mat) in cohort.modalities.iter().enumerate() {
        let d = mat.dim();
        let rows = cohort
            .subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.present[m])
            .map(|(i, s)| (s.id.clone(), mat.values.row(i).to_vec()))
            .collect();
        write_keyed_matrix(
            &embedding_path(dir, Modality::from_index(m)),
            &KeyedMatrix {
                columns: (0..d).map(|j| format!("e{j}")).collect(),
                rows,
            },
        )?;
    }
    let meta: Vec<SubjectMeta> = cohort
        .subjects
        .iter()
        .map(|s| SubjectMeta {
            id: s.id.clone(),
            cohort_year: s.cohort_year,
            infancy_vac: s.infancy_vac,
            sex: s.sex,
        })
        .collect();
    write_subjects(&dir.join(SUBJECTS_FILE), &meta)?;
    write_labels(&dir.join(LABELS_FILE), labels)?;
    let ids: Vec<String> = cohort.subjects.iter().map(|s| s.id.clone()).collect();
    let folds: Vec<Fold> = cohort.subjects.iter().map(|s| s.fold).collect();
    write_split(&dir.join(SPLIT_FILE), &ids, &folds)
}

/// Raw per-timepoint files named `<modality>_d<day>.csv`, gathered per
/// modality. Unrecognized file names are ignored.
pub fn read_raw_dir(dir: &Path) -> Result<[RawModalityTable; N_MODALITIES]> {
    let mut tables = Modality::ALL.map(RawModalityTable::new);
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let Some((name, day)) = parse_column_name(stem) else { continue };
        let Ok(modality) = name.parse::<Modality>() else { continue };
        let m = read_keyed_matrix(&path)?;
        tables[modality.index()].timepoints.insert(
            day,
            RawTimepoint {
                feature_names: m.columns,
                rows: m.rows,
            },
        );
    }
    Ok(tables)
}

pub fn feature_table_to_keyed(t: &FeatureTable) -> KeyedMatrix {
    KeyedMatrix {
        columns: t.columns.clone(),
        rows: t.subjects.iter().cloned().zip(t.rows.iter().cloned()).collect(),
    }
}
