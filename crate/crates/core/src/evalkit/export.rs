use std::path::Path;

use super::EvalReport;
use crate::dnet::{self, DisentangleNet};
use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// From the file extension; JSON unless it ends in `.csv`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

const CSV_HEADER: [&str; 11] = [
    "dataset", "C", "PC", "CP", "mean", "delta", "range", "lin_C", "lin_ISD", "delta_ISD", "delta_C",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

fn two_dp(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.2}"))
}

/// JSON keeps full precision; CSV rounds to two decimals, one row per report.
pub fn export_reports(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => {
            let mut b = if reports.len() == 1 {
                serde_json::to_vec_pretty(&reports[0])
            } else {
                serde_json::to_vec_pretty(reports)
            }
            .expect("report serializes");
            b.push(b'\n');
            b
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in reports {
                let t = &r.per_template;
                let mut row = vec![r.dataset.clone()];
                row.extend(
                    [Some(t.c), Some(t.pc), Some(t.cp), Some(r.mean), Some(r.delta), Some(r.range)]
                        .into_iter()
                        .chain([r.lin_c, r.lin_isd, r.delta_isd, r.delta_c])
                        .map(two_dp),
                );
                w.write_record(&row).map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?
        }
    };
    fsio::write_atomic(path, &bytes)
}

pub fn export_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    export_reports(std::slice::from_ref(report), path, format)
}

/// CSV of `f(rows)` with columns `id,label,r_0..r_{D-1}`.
pub fn export_representations(net: Option<&DisentangleNet>, set: &EmbeddingSet, path: &Path) -> Result<()> {
    let reps = dnet::apply(net, &set.to_tensor())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..reps.cols()).map(|j| format!("r_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, m) in set.meta().iter().enumerate() {
        let mut row = vec![m.id.clone(), m.label.to_string()];
        row.extend(reps.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    fsio::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_problem;
    use super::super::TemplateScores;
    use super::*;
    use crate::dnet::DNetConfig;

    fn report() -> EvalReport {
        EvalReport::new(
            "ArtPainting",
            TemplateScores { c: 96.4, pc: 97.4, cp: 92.0 },
            Some(94.5),
            None,
        )
    }

    #[test]
    fn json_keeps_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        export_report(&report(), &p, ReportFormat::from_path(&p)).unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        assert_eq!(back, report());
        assert_eq!(back.delta.to_bits(), report().delta.to_bits());
    }

    #[test]
    fn csv_rounds_to_two_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        assert_eq!(ReportFormat::from_path(&p), ReportFormat::Csv);
        export_reports(&[report(), report()], &p, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset,C,PC,CP,mean,delta,range,lin_C,lin_ISD,delta_ISD,delta_C");
        assert_eq!(lines[1], "ArtPainting,96.40,97.40,92.00,95.27,2.35,5.40,94.50,,,-1.90");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn representations_at_init_are_raw() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reps.csv");
        let (images, _) = random_problem(8, 3, 12, 5);
        let net = DisentangleNet::init(DNetConfig::new(5, 5)).unwrap();
        export_representations(Some(&net), &images, &p).unwrap();
        let mut r = csv::Reader::from_path(&p).unwrap();
        assert_eq!(r.headers().unwrap().len(), 7);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 12);
        for (i, rec) in rows.iter().enumerate() {
            assert_eq!(&rec[0], images.meta()[i].id);
            for j in 0..5 {
                let v: f64 = rec[2 + j].parse().unwrap();
                assert_eq!(v, images.row(i)[j] as f64);
            }
        }
    }

    #[test]
    fn downsampled_width() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reps.csv");
        let (images, _) = random_problem(9, 2, 4, 6);
        let net = DisentangleNet::init(DNetConfig::new(6, 3)).unwrap();
        export_representations(Some(&net), &images, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "id,label,r_0,r_1,r_2");
    }
}
