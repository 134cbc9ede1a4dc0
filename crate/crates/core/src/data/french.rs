use std::io::{Cursor, Read};

use chrono::NaiveDate;
use nalgebra::DMatrix;

use super::{DataError, DatasetId, ReturnPanel};

const MISSING_SENTINELS: [f64; 2] = [-99.99, -999.0];

/// Text of the first CSV member of a zip archive, or the bytes themselves if
/// they are not a zip archive.
pub fn extract_csv_text(bytes: &[u8]) -> Result<String, DataError> {
    if !bytes.starts_with(b"PK\x03\x04") {
        return Ok(String::from_utf8_lossy(bytes).into_owned());
    }
    let zip_err = |e: zip::result::ZipError| DataError::Serialization(format!("zip: {e}"));
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).map_err(zip_err)?;
    let index = (0..archive.len())
        .find(|&i| {
            archive
                .name_for_index(i)
                .is_some_and(|n| n.to_ascii_lowercase().ends_with(".csv"))
        })
        .unwrap_or(0);
    let mut file = archive.by_index(index).map_err(zip_err)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)
        .map_err(|e| DataError::Serialization(format!("zip: {e}")))?;
    Ok(String::from_utf8_lossy(&raw).into_owned())
}

struct Section {
    title: String,
    columns: Vec<String>,
    dates: Vec<NaiveDate>,
    rows: Vec<Vec<f64>>,
}

fn is_date_key(tok: &str) -> bool {
    tok.len() == 8 && tok.bytes().all(|b| b.is_ascii_digit())
}

/// Percent string to decimal, rounded once.
fn percent_to_decimal(tok: &str) -> Option<f64> {
    let pct: f64 = tok.parse().ok()?;
    if MISSING_SENTINELS.contains(&pct) {
        return Some(f64::NAN);
    }
    format!("{tok}e-2").parse().ok()
}

fn sections(text: &str) -> Result<Vec<Section>, DataError> {
    let mut out: Vec<Section> = Vec::new();
    let mut last_title = String::new();
    let mut open = false;
    for (i, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if let Some(header) = line.strip_prefix(',') {
            out.push(Section {
                title: std::mem::take(&mut last_title),
                columns: header.split(',').map(|c| c.trim().to_string()).collect(),
                dates: Vec::new(),
                rows: Vec::new(),
            });
            open = true;
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or("");
        if open && is_date_key(first) {
            let section = out.last_mut().expect("open section exists");
            let malformed = |reason: String| DataError::MalformedRow {
                line: i + 1,
                reason,
            };
            let date = NaiveDate::parse_from_str(first, "%Y%m%d")
                .map_err(|_| malformed(format!("bad date '{first}'")))?;
            let row: Vec<f64> = fields
                .map(|tok| {
                    percent_to_decimal(tok).ok_or_else(|| malformed(format!("bad value '{tok}'")))
                })
                .collect::<Result<_, _>>()?;
            if row.len() != section.columns.len() {
                return Err(malformed(format!(
                    "{} values, expected {}",
                    row.len(),
                    section.columns.len()
                )));
            }
            section.dates.push(date);
            section.rows.push(row);
        } else {
            open = false;
            if !line.is_empty() {
                last_title = line.to_string();
            }
        }
    }
    Ok(out)
}

fn section_panel(section: Section) -> Result<ReturnPanel, DataError> {
    let n = section.columns.len();
    let flat: Vec<f64> = section.rows.into_iter().flatten().collect();
    let values = DMatrix::from_row_slice(section.dates.len(), n, &flat);
    ReturnPanel::new(section.dates, section.columns, values)
}

/// Parse a French data library daily file. The average value-weighted block is
/// used when the file has several; otherwise the first block. Percent returns
/// become decimals and the library's missing sentinels become `NaN`.
pub fn parse_french_daily(text: &str, id: &DatasetId) -> Result<ReturnPanel, DataError> {
    let mut all = sections(text)?;
    all.retain(|s| !s.dates.is_empty());
    if all.is_empty() {
        return Err(DataError::MalformedHeader(format!(
            "{id}: no daily data block found"
        )));
    }
    let idx = all
        .iter()
        .position(|s| s.title.to_ascii_lowercase().contains("value weighted"))
        .unwrap_or(0);
    let section = all.swap_remove(idx);
    if let Some(expected) = id.expected_columns {
        if section.columns.len() != expected {
            return Err(DataError::ColumnCountMismatch {
                dataset: id.name.clone(),
                expected,
                found: section.columns.len(),
            });
        }
    }
    section_panel(section)
}

/// Parse the daily factor file, dropping the risk-free column.
pub fn parse_french_factors(text: &str) -> Result<ReturnPanel, DataError> {
    let id = DatasetId::factors();
    let unchecked = DatasetId {
        expected_columns: None,
        ..id.clone()
    };
    let panel = parse_french_daily(text, &unchecked)?;
    let keep: Vec<usize> = (0..panel.n_assets())
        .filter(|&c| !panel.assets[c].eq_ignore_ascii_case("RF"))
        .collect();
    let expected = id.expected_columns.unwrap_or(keep.len());
    if keep.len() != expected {
        return Err(DataError::ColumnCountMismatch {
            dataset: id.name,
            expected,
            found: keep.len(),
        });
    }
    Ok(panel.select_assets(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DataSource;
    use std::io::Write;

    const SAMPLE: &str = "This file was created using the 202401 CRSP database.\r\n\
\r\n\
  Average Value Weighted Returns -- Daily\r\n\
,SMALL LoBM,ME1 BM2,BIG HiBM\r\n\
19630701,   0.56,  -0.23,   1.10\r\n\
19630702,   0.10, -99.99,  -0.05\r\n\
19630703,  -0.30,   0.00,  -999\r\n\
\r\n\
  Average Equal Weighted Returns -- Daily\r\n\
,SMALL LoBM,ME1 BM2,BIG HiBM\r\n\
19630701,   9.00,   9.00,   9.00\r\n";

    fn id3() -> DatasetId {
        DatasetId {
            expected_columns: Some(3),
            ..DatasetId::custom("T3", DataSource::Path("x.csv".into()))
        }
    }

    #[test]
    fn parses_value_weighted_block() {
        let p = parse_french_daily(SAMPLE, &id3()).unwrap();
        assert_eq!(p.assets, vec!["SMALL LoBM", "ME1 BM2", "BIG HiBM"]);
        assert_eq!(p.n_dates(), 3);
        assert_eq!(p.dates[0], NaiveDate::from_ymd_opt(1963, 7, 1).unwrap());
        assert_eq!(p.values[(0, 0)], 0.0056);
        assert_eq!(p.values[(0, 1)], -0.0023);
        assert!(p.values[(1, 1)].is_nan());
        assert!(p.values[(2, 2)].is_nan());
        assert_eq!(p.n_missing(), 2);
    }

    #[test]
    fn falls_back_to_first_block() {
        let text = ",Mkt-RF,SMB,RF\n20200102,1.00,-0.50,0.01\n";
        let p = parse_french_daily(text, &DatasetId::custom("f", DataSource::Path("f".into())))
            .unwrap();
        assert_eq!(p.values[(0, 0)], 0.01);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_french_daily("", &id3()),
            Err(DataError::MalformedHeader(_))
        ));
        let id = DatasetId {
            expected_columns: Some(25),
            ..id3()
        };
        assert!(matches!(
            parse_french_daily(SAMPLE, &id),
            Err(DataError::ColumnCountMismatch {
                expected: 25,
                found: 3,
                ..
            })
        ));
        let ragged = ",a,b\n20200101,1.0\n";
        assert!(matches!(
            parse_french_daily(ragged, &id3()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn factors_drop_risk_free() {
        let text = "header text\n\n,Mkt-RF,SMB,HML,RMW,CMA,RF\n20200102,0.86,-0.97,-0.35,-0.13,-0.21,0.006\n";
        let f = parse_french_factors(text).unwrap();
        assert_eq!(f.assets, vec!["Mkt-RF", "SMB", "HML", "RMW", "CMA"]);
        assert_eq!(f.values[(0, 0)], 0.0086);
    }

    #[test]
    fn round_trip_preserves_decimal_values() {
        let p = parse_french_daily(SAMPLE, &id3()).unwrap();
        let back = ReturnPanel::from_csv_str(&p.to_csv_string().unwrap()).unwrap();
        assert!(p
            .to_csv_string()
            .unwrap()
            .contains("1963-07-01,0.0056,-0.0023,0.011"));
        for (a, b) in p.values.iter().zip(back.values.iter()) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn reads_csv_from_zip() {
        let mut buf = Cursor::new(Vec::new());
        {
            let mut zw = zip::ZipWriter::new(&mut buf);
            zw.start_file("F_CSV.csv", zip::write::SimpleFileOptions::default())
                .unwrap();
            zw.write_all(SAMPLE.as_bytes()).unwrap();
            zw.finish().unwrap();
        }
        let text = extract_csv_text(buf.get_ref()).unwrap();
        assert_eq!(text, SAMPLE);
        assert_eq!(extract_csv_text(b"plain").unwrap(), "plain");
    }
}
