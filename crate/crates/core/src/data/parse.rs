use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use super::{DataError, InteractionLog, RawRecord};

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T, DataError> {
    s.trim().parse().map_err(|_| DataError::Malformed {
        line,
        reason: format!("{what} {s:?} is not an integer"),
    })
}

/// Parses a MovieLens `UserID::MovieID::Rating::Timestamp` file. Every rating
/// is an implicit positive.
pub fn parse_movielens(path: impl AsRef<Path>) -> Result<InteractionLog, DataError> {
    let path = path.as_ref();
    parse_movielens_reader(open(path)?).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn parse_movielens_reader<R: Read>(reader: R) -> Result<InteractionLog, DataError> {
    let mut raw: Vec<RawRecord> = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| DataError::Io {
            path: Default::default(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() != 4 {
            return Err(DataError::Malformed {
                line: line_no,
                reason: format!("expected 4 '::'-separated fields, found {}", parts.len()),
            });
        }
        let user: u64 = field(parts[0], "user id", line_no)?;
        let item: u64 = field(parts[1], "movie id", line_no)?;
        let _rating: i64 = field(parts[2], "rating", line_no)?;
        let ts: i64 = field(parts[3], "timestamp", line_no)?;
        raw.push((user, item, ts, 1));
    }
    Ok(InteractionLog::from_raw(&raw))
}

/// Parses `user<TAB>item<TAB>timestamp[<TAB>label]` lines. Missing labels
/// default to 1; `#` starts a comment line.
pub fn parse_tsv(path: impl AsRef<Path>) -> Result<InteractionLog, DataError> {
    parse_tsv_reader(open(path.as_ref())?)
}

pub fn parse_tsv_reader<R: Read>(reader: R) -> Result<InteractionLog, DataError> {
    let mut raw: Vec<RawRecord> = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| DataError::Io {
            path: Default::default(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split('\t').collect();
        if parts.len() != 3 && parts.len() != 4 {
            return Err(DataError::Malformed {
                line: line_no,
                reason: format!("expected 3 or 4 tab-separated fields, found {}", parts.len()),
            });
        }
        let user = field(parts[0], "user id", line_no)?;
        let item = field(parts[1], "item id", line_no)?;
        let ts = field(parts[2], "timestamp", line_no)?;
        let label: u8 = match parts.get(3) {
            Some(l) => field(l, "label", line_no)?,
            None => 1,
        };
        if label > 1 {
            return Err(DataError::Malformed {
                line: line_no,
                reason: format!("label {label} is not 0 or 1"),
            });
        }
        raw.push((user, item, ts, label));
    }
    Ok(InteractionLog::from_raw(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn movielens_line() {
        let log = parse_movielens_reader("1::1193::5::978300760\n".as_bytes()).unwrap();
        assert_eq!(log.len(), 1);
        let r = log.records[0];
        assert_eq!(log.user_raw[r.user as usize], 1);
        assert_eq!(log.item_raw[r.item as usize], 1193);
        assert_eq!(r.timestamp, 978300760);
        assert_eq!(r.label, 1);
    }

    #[test]
    fn empty_input_gives_empty_log() {
        let log = parse_movielens_reader("".as_bytes()).unwrap();
        assert!(log.is_empty());
        assert_eq!(log.n_users(), 0);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let err = parse_movielens_reader("1::2::3::4\n1::x::3::4\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, .. }), "{err}");
        let err = parse_movielens_reader("1::2::3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 1, .. }), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = parse_movielens("/definitely/not/here.dat").unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn tsv_with_and_without_labels() {
        let log = parse_tsv_reader("# comment\n5\t9\t100\n5\t8\t101\t0\n".as_bytes()).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.records[0].label, 1);
        assert_eq!(log.records[1].label, 0);
        assert!(parse_tsv_reader("5\t9\n".as_bytes()).is_err());
        assert!(parse_tsv_reader("5\t9\t1\t2\n".as_bytes()).is_err());
    }
}
