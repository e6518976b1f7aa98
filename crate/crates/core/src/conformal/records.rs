//! Calibration record CSV: header `item_id,prob_0,...,prob_{K-1},label`,
//! with label `-1` for an out-of-domain item.

use std::io::{Read, Write};

use crate::error::{check_dim, invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub item_id: String,
    pub probs: Vec<f64>,
    pub label: Option<usize>,
}

pub fn write_calibration_records<W: Write>(out: W, records: &[CalibrationRecord]) -> Result<()> {
    let k = records.first().map_or(0, |r| r.probs.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["item_id".to_string()];
    header.extend((0..k).map(|i| format!("prob_{i}")));
    header.push("label".into());
    w.write_record(&header)?;
    for r in records {
        check_dim(k, r.probs.len())?;
        let mut row = vec![r.item_id.clone()];
        row.extend(r.probs.iter().map(|p| p.to_string()));
        row.push(r.label.map_or_else(|| "-1".to_string(), |y| y.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_calibration_records<R: Read>(input: R) -> Result<Vec<CalibrationRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let n = header.len();
    let expected_probs: Vec<String> = (0..n.saturating_sub(2)).map(|i| format!("prob_{i}")).collect();
    if n < 3
        || &header[0] != "item_id"
        || &header[n - 1] != "label"
        || header
            .iter()
            .skip(1)
            .take(n - 2)
            .ne(expected_probs.iter().map(String::as_str))
    {
        return Err(Error::Format(
            "calibration header must be item_id,prob_0..prob_{K-1},label".into(),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let probs = (1..n - 1)
            .map(|i| {
                row[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("prob_{}: {e}", i - 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let label: i64 = row[n - 1]
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("label: {e}")))?;
        let label = match label {
            -1 => None,
            y if y >= 0 && (y as usize) < n - 2 => Some(y as usize),
            y => return Err(invalid(format!("label {y} outside class range"))),
        };
        out.push(CalibrationRecord {
            item_id: row[0].to_string(),
            probs,
            label,
        });
    }
    Ok(out)
}
