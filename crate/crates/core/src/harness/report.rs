use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::run::ResultRecord;
use crate::data::DatasetName;
use crate::error::{Error, Result};
use crate::nets::Paradigm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportStyle {
    Table,
    Curves,
}

impl std::str::FromStr for ReportStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportStyle::Table),
            "curves" => Ok(ReportStyle::Curves),
            other => Err(Error::Config(format!("unknown report style `{other}` (table|curves)"))),
        }
    }
}

/// Mean and sample standard deviation of a group of runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Zero for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Contract("cannot summarize an empty group".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, std, n })
}

fn trim_decimals(s: String, min: usize) -> String {
    let Some(dot) = s.find('.') else { return s };
    let keep = s.trim_end_matches('0').len().max(dot + 1 + min);
    s[..keep].to_string()
}

/// `0.52(±0.020)`: mean to at most four decimals, std to three.
pub fn format_auc(s: &Summary) -> String {
    format!("{}(±{:.3})", trim_decimals(format!("{:.4}", s.mean), 2), s.std)
}

/// Fractions rendered as percentages, e.g. `96.67(±2.11)`.
pub fn format_accuracy(s: &Summary) -> String {
    format!("{:.2}(±{:.2})", 100.0 * s.mean, 100.0 * s.std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricCells {
    pub train_accuracy: Summary,
    pub test_accuracy: Summary,
    pub mia_auc: Summary,
}

impl MetricCells {
    fn of(group: &[&ResultRecord]) -> Result<Self> {
        let pick = |f: fn(&ResultRecord) -> f64| summarize(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        Ok(Self {
            train_accuracy: pick(|r| r.train_accuracy)?,
            test_accuracy: pick(|r| r.test_accuracy)?,
            mia_auc: pick(|r| r.mia_auc)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    /// One entry per column paradigm; `None` where no run exists.
    pub cells: Vec<Option<MetricCells>>,
}

/// Rows are configurations; each paradigm contributes train accuracy, test
/// accuracy and attack AUC columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub dataset: DatasetName,
    pub paradigms: Vec<Paradigm>,
    pub rows: Vec<TableRow>,
}

fn shared_dataset(records: &[ResultRecord]) -> Result<DatasetName> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("report requested for an empty selection".into()))?;
    if let Some(other) = records.iter().find(|r| r.dataset != first.dataset) {
        return Err(Error::Contract(format!(
            "report mixes datasets {} and {}",
            first.dataset, other.dataset
        )));
    }
    Ok(first.dataset)
}

pub fn table(records: &[ResultRecord]) -> Result<Table> {
    let dataset = shared_dataset(records)?;
    let paradigms: Vec<Paradigm> = [Paradigm::Ann, Paradigm::Snn]
        .into_iter()
        .filter(|p| records.iter().any(|r| r.paradigm == *p))
        .collect();
    let surrogates: BTreeSet<String> = records
        .iter()
        .filter_map(|r| r.surrogate.map(|s| s.to_string()))
        .collect();
    let split_surrogates = surrogates.len() > 1;
    let row_label = |r: &ResultRecord| {
        let quant = r.quant_label();
        match r.surrogate {
            Some(s) if split_surrogates => format!("{quant} {s}"),
            _ => quant,
        }
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let label = row_label(r);
        if !order.contains(&label) {
            order.push(label.clone());
        }
        let col = paradigms
            .iter()
            .position(|p| *p == r.paradigm)
            .expect("paradigm listed");
        groups.entry((label, col)).or_default().push(r);
    }
    let rows = order
        .into_iter()
        .map(|label| {
            let cells = (0..paradigms.len())
                .map(|col| {
                    groups
                        .get(&(label.clone(), col))
                        .map(|g| MetricCells::of(g))
                        .transpose()
                })
                .collect::<Result<_>>()?;
            Ok(TableRow { label, cells })
        })
        .collect::<Result<_>>()?;
    Ok(Table {
        dataset,
        paradigms,
        rows,
    })
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut header = vec!["config".to_string()];
        for p in &self.paradigms {
            header.extend([
                format!("{p} train acc"),
                format!("{p} test acc"),
                format!("{p} MIA AUC"),
            ]);
        }
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.label.clone()];
            for cell in &row.cells {
                match cell {
                    Some(c) => line.extend([
                        format_accuracy(&c.train_accuracy),
                        format_accuracy(&c.test_accuracy),
                        format_auc(&c.mia_auc),
                    ]),
                    None => line.extend(std::iter::repeat_n("-".to_string(), 3)),
                }
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        writeln!(f, "{}", self.dataset)?;
        for line in &lines {
            let padded: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            writeln!(f, "{}", padded.join("  ").trim_end())?;
        }
        Ok(())
    }
}

/// Aggregate over seeds for one (paradigm, bits, threshold) point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub paradigm: Paradigm,
    pub bits: u32,
    pub threshold: f64,
    pub runs: usize,
    pub test_accuracy: f64,
    pub test_accuracy_std: f64,
    pub mia_auc: f64,
    pub mia_auc_std: f64,
}

/// Accuracy and AUC against the state quantizer threshold, one series per bit
/// width. Records without a state quantizer are ignored.
pub fn curves(records: &[ResultRecord]) -> Result<Vec<CurvePoint>> {
    shared_dataset(records)?;
    let mut groups: BTreeMap<(Paradigm, u32, u64), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        if let Some(bits) = r.quant.state_bits {
            groups
                .entry((r.paradigm, bits, r.quant.threshold.to_bits()))
                .or_default()
                .push(r);
        }
    }
    if groups.is_empty() {
        return Err(Error::Contract("no records with a state quantizer to plot".into()));
    }
    let mut points = groups
        .into_iter()
        .map(|((paradigm, bits, threshold), g)| {
            let acc = summarize(&g.iter().map(|r| r.test_accuracy).collect::<Vec<_>>())?;
            let auc = summarize(&g.iter().map(|r| r.mia_auc).collect::<Vec<_>>())?;
            Ok(CurvePoint {
                paradigm,
                bits,
                threshold: f64::from_bits(threshold),
                runs: g.len(),
                test_accuracy: acc.mean,
                test_accuracy_std: acc.std,
                mia_auc: auc.mean,
                mia_auc_std: auc.std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| {
        (a.paradigm, a.bits)
            .cmp(&(b.paradigm, b.bits))
            .then(a.threshold.total_cmp(&b.threshold))
    });
    Ok(points)
}

pub fn curves_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

pub fn report(records: &[ResultRecord], style: ReportStyle) -> Result<String> {
    match style {
        ReportStyle::Table => Ok(table(records)?.to_string()),
        ReportStyle::Curves => curves_csv(&curves(records)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting() {
        let s = summarize(&[0.50, 0.52, 0.54]).unwrap();
        assert_eq!(format_auc(&s), "0.52(±0.020)");
        let s = summarize(&[0.5728]).unwrap();
        assert_eq!(format_auc(&s), "0.5728(±0.000)");
        let s = summarize(&[1.0, 1.0]).unwrap();
        assert_eq!(format_accuracy(&s), "100.00(±0.00)");
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn trimming() {
        assert_eq!(trim_decimals("0.7700".into(), 2), "0.77");
        assert_eq!(trim_decimals("0.5000".into(), 2), "0.50");
        assert_eq!(trim_decimals("0.5534".into(), 2), "0.5534");
        assert_eq!(trim_decimals("0.5530".into(), 2), "0.553");
    }
}
