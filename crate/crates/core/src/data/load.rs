//! CSV ingestion of interaction logs.

use std::path::Path;

use crate::data::RawInteraction;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct LoadOutcome {
    pub interactions: Vec<RawInteraction>,
    pub malformed: usize,
}

/// Reads `userId,itemId,rating[,timestamp]` rows. A header line is detected
/// by an unparseable rating field and skipped. Malformed data rows are
/// counted and dropped; more than 1% of them fails the whole load.
pub fn load_interactions(path: &Path) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut interactions = Vec::new();
    let mut malformed = 0usize;
    let mut data_rows = 0usize;
    for (row_ix, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("csv parse: {e}")))?;
        if record.len() == 1 && record.get(0).map(|s| s.trim().is_empty()) == Some(true) {
            continue;
        }
        let parsed = parse_record(&record);
        if row_ix == 0 && parsed.is_none() && looks_like_header(&record) {
            continue;
        }
        data_rows += 1;
        match parsed {
            Some(r) => interactions.push(r),
            None => malformed += 1,
        }
    }
    if data_rows > 0 && malformed as f64 / data_rows as f64 > 0.01 {
        return Err(Error::Format(format!(
            "{malformed} malformed rows out of {data_rows} exceeds 1%"
        )));
    }
    Ok(LoadOutcome {
        interactions,
        malformed,
    })
}

fn parse_record(record: &csv::StringRecord) -> Option<RawInteraction> {
    if record.len() < 3 {
        return None;
    }
    let user_id = record.get(0)?.trim();
    let item_id = record.get(1)?.trim();
    if user_id.is_empty() || item_id.is_empty() {
        return None;
    }
    let rating: f64 = record.get(2)?.trim().parse().ok()?;
    if !rating.is_finite() {
        return None;
    }
    let timestamp = match record.get(3) {
        Some(t) if !t.trim().is_empty() => Some(t.trim().parse::<i64>().ok()?),
        _ => None,
    };
    Some(RawInteraction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        timestamp,
    })
}

fn looks_like_header(record: &csv::StringRecord) -> bool {
    record.len() >= 3 && record.get(2).map(|s| s.trim().parse::<f64>().is_err()) == Some(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn well_formed_rows_load() {
        let (_d, p) = write_file("1,10,4.0,111\n2,20,3.5,222\n1,30,5.0,333\n");
        let out = load_interactions(&p).unwrap();
        assert_eq!(out.interactions.len(), 3);
        assert_eq!(out.malformed, 0);
        assert_eq!(out.interactions[0].user_id, "1");
        assert_eq!(out.interactions[1].rating, 3.5);
        assert_eq!(out.interactions[2].timestamp, Some(333));
    }

    #[test]
    fn header_is_detected_and_skipped() {
        let (_d, p) = write_file("userId,movieId,rating,timestamp\n1,10,4.0,111\n");
        let out = load_interactions(&p).unwrap();
        assert_eq!(out.interactions.len(), 1);
        assert_eq!(out.malformed, 0);
    }

    #[test]
    fn header_only_file_is_empty_not_an_error() {
        let (_d, p) = write_file("userId,movieId,rating,timestamp\n");
        let out = load_interactions(&p).unwrap();
        assert!(out.interactions.is_empty());
        assert_eq!(out.malformed, 0);
    }

    #[test]
    fn one_malformed_row_among_1000_is_tolerated() {
        let mut content = String::new();
        for i in 0..999 {
            content.push_str(&format!("{},{},4.5,{}\n", i % 50, i % 200, i));
        }
        content.push_str("7,13,not_a_rating,5\n");
        let (_d, p) = write_file(&content);
        let out = load_interactions(&p).unwrap();
        assert_eq!(out.interactions.len(), 999);
        assert_eq!(out.malformed, 1);
    }

    #[test]
    fn too_many_malformed_rows_fail() {
        let content = "1,10,4.0\n2,20,bad\n3,30,bad\n4,40,4.0\n";
        let (_d, p) = write_file(content);
        assert!(matches!(load_interactions(&p), Err(Error::Format(_))));
    }

    #[test]
    fn timestamps_are_optional() {
        let (_d, p) = write_file("1,10,4.0\n2,20,3.0,99\n");
        let out = load_interactions(&p).unwrap();
        assert_eq!(out.interactions[0].timestamp, None);
        assert_eq!(out.interactions[1].timestamp, Some(99));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_interactions(Path::new("/nonexistent/file.csv")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
        assert!(err.to_string().contains("/nonexistent/file.csv"));
    }
}
