//! Per-class Dice similarity coefficient and Table-style aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::volume::{class_name, LabelMap, CLASS_LABELS, MAX_CLASS};

/// How to score a class that is absent from both prediction and ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// No value; the case is left out of that class's statistics.
    #[default]
    Absent,
    /// Perfect agreement, 1.0.
    One,
}

/// Voxel counts `(|P ∩ G|, |P|, |G|)` for `class`.
pub fn overlap_counts(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<(usize, usize, usize)> {
    if pred.extents() != gt.extents() {
        return Err(Error::Shape(format!(
            "prediction extents {:?} differ from ground truth {:?}",
            pred.extents(),
            gt.extents()
        )));
    }
    let (mut both, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok((both, p, g))
}

/// `2|P ∩ G| / (|P| + |G|)`, or `None` when the class is in neither map.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<Option<f64>> {
    dsc_with(pred, gt, class, EmptyPolicy::Absent)
}

pub fn dsc_with(pred: &LabelMap, gt: &LabelMap, class: u8, policy: EmptyPolicy) -> Result<Option<f64>> {
    let (both, p, g) = overlap_counts(pred, gt, class)?;
    if p + g == 0 {
        return Ok(match policy {
            EmptyPolicy::Absent => None,
            EmptyPolicy::One => Some(1.0),
        });
    }
    Ok(Some(2.0 * both as f64 / (p + g) as f64))
}

/// Scores of one case, keyed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseDice {
    pub case_id: String,
    pub scores: BTreeMap<u8, Option<f64>>,
}

impl CaseDice {
    pub fn new(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            scores: BTreeMap::new(),
        }
    }

    pub fn with(mut self, class: u8, value: Option<f64>) -> Self {
        self.scores.insert(class, value);
        self
    }
}

/// Score the foreground classes `1..=MAX_CLASS` of one case.
pub fn case_dice(case_id: impl Into<String>, pred: &LabelMap, gt: &LabelMap, policy: EmptyPolicy) -> Result<CaseDice> {
    let mut case = CaseDice::new(case_id);
    for class in 1..=MAX_CLASS {
        case.scores.insert(class, dsc_with(pred, gt, class, policy)?);
    }
    Ok(case)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    /// `(case_id, value)` for every case where the class was scored.
    pub values: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub per_case: Vec<CaseDice>,
    pub per_class: BTreeMap<u8, ClassSummary>,
    /// Mean of the per-class means.
    pub overall_mean: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Per-class mean and sample SD over present values; classes with no present
/// value are not reported.
pub fn aggregate(cases: &[CaseDice]) -> Result<DiceReport> {
    if cases.is_empty() {
        return Err(Error::Invalid("cannot aggregate an empty list of cases".into()));
    }
    let mut collected: BTreeMap<u8, Vec<(String, f64)>> = BTreeMap::new();
    for case in cases {
        for (&class, value) in &case.scores {
            if let Some(v) = *value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!(
                        "case {} class {class}: DSC {v} outside [0, 1]",
                        case.case_id
                    )));
                }
                collected.entry(class).or_default().push((case.case_id.clone(), v));
            }
        }
    }
    if collected.is_empty() {
        return Err(Error::Invalid("no case has a scored class".into()));
    }
    let per_class: BTreeMap<u8, ClassSummary> = collected
        .into_iter()
        .map(|(class, values)| {
            let raw: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
            let (mean, sd) = mean_sd(&raw);
            (class, ClassSummary { mean, sd, values })
        })
        .collect();
    let overall_mean = per_class.values().map(|s| s.mean).sum::<f64>() / per_class.len() as f64;
    Ok(DiceReport {
        per_case: cases.to_vec(),
        per_class,
        overall_mean,
    })
}

fn display_label(class: u8) -> String {
    CLASS_LABELS
        .get(class as usize)
        .map_or_else(|| format!("Class {class}"), |s| s.to_string())
}

impl DiceReport {
    /// Markdown table with one `mean ± sd` row per class and an overall row.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Label | Dice Score |\n|---|---|\n");
        for (&class, s) in &self.per_class {
            out.push_str(&format!("| {} | {:.2} ± {:.2} |\n", display_label(class), s.mean, s.sd));
        }
        out.push_str(&format!("| Mean | {:.2} |\n", self.overall_mean));
        out
    }

    /// Per-case CSV: `case_id,class_id,class_name,dsc`, one row per present value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        for case in &self.per_case {
            for (&class, value) in &case.scores {
                if let Some(dsc) = *value {
                    w.serialize(DiceRow {
                        case_id: case.case_id.clone(),
                        class_id: class,
                        class_name: class_name(class as usize).to_string(),
                        dsc,
                    })?;
                }
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// One `<class_name>.csv` per reported class with header `case_id,dsc`,
    /// holding the raw values behind a box plot.
    pub fn write_box_plot_data(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        for (&class, s) in &self.per_class {
            let path = dir.join(format!("{}.csv", class_name(class as usize)));
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(&path)?;
            w.write_record(["case_id", "dsc"])?;
            for (case, v) in &s.values {
                w.write_record([case.as_str(), &v.to_string()])?;
            }
            w.flush().map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DiceRow {
    case_id: String,
    class_id: u8,
    class_name: String,
    dsc: f64,
}

/// Read a per-case CSV written by [`DiceReport::write_csv`], keeping case order.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<CaseDice>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut cases: Vec<CaseDice> = Vec::new();
    for row in rdr.deserialize() {
        let row: DiceRow = row?;
        match cases.iter_mut().find(|c| c.case_id == row.case_id) {
            Some(c) => {
                c.scores.insert(row.class_id, Some(row.dsc));
            }
            None => cases.push(CaseDice::new(row.case_id).with(row.class_id, Some(row.dsc))),
        }
    }
    Ok(cases)
}

pub fn load_csv(path: &Path) -> Result<Vec<CaseDice>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_csv(file)
}
