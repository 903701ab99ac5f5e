use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, GroupAssignment, Interaction, InteractionLog};
use crate::tensor::{read_container, write_container, Tensor};

/// Largest integer an `f64` represents exactly.
const MAX_EXACT: u64 = 1 << 53;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn column<T: Copy>(values: &[T], f: impl Fn(T) -> f64) -> Tensor {
    Tensor::column(values.iter().map(|&v| f(v)).collect())
}

/// Writes a preprocessed log as a tensor container with columns `user`,
/// `item`, `timestamp`, `label`, `user_raw` and `item_raw`.
pub fn save_dataset(path: &Path, log: &InteractionLog) -> Result<(), DataError> {
    let too_big = |v: u64| v >= MAX_EXACT;
    if log.user_raw.iter().chain(&log.item_raw).any(|&v| too_big(v))
        || log
            .records
            .iter()
            .any(|r| r.timestamp.unsigned_abs() >= MAX_EXACT)
    {
        return Err(DataError::Invalid(
            "ids and timestamps must be below 2^53 to be stored".into(),
        ));
    }
    let recs = &log.records;
    let tensors = vec![
        ("user".to_string(), column(recs, |r| r.user as f64)),
        ("item".to_string(), column(recs, |r| r.item as f64)),
        ("timestamp".to_string(), column(recs, |r| r.timestamp as f64)),
        ("label".to_string(), column(recs, |r| r.label as f64)),
        ("user_raw".to_string(), column(&log.user_raw, |v| v as f64)),
        ("item_raw".to_string(), column(&log.item_raw, |v| v as f64)),
    ];
    let file = File::create(path).map_err(io_err(path))?;
    write_container(BufWriter::new(file), &tensors)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<InteractionLog, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let tensors = read_container(BufReader::new(file))?;
    let get = |name: &str| -> Result<&[f64], DataError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data())
            .ok_or_else(|| DataError::Invalid(format!("dataset is missing column {name:?}")))
    };
    let (users, items, times, labels) = (get("user")?, get("item")?, get("timestamp")?, get("label")?);
    if [items.len(), times.len(), labels.len()]
        .iter()
        .any(|&n| n != users.len())
    {
        return Err(DataError::Invalid("dataset columns differ in length".into()));
    }
    let user_raw: Vec<u64> = get("user_raw")?.iter().map(|&v| v as u64).collect();
    let item_raw: Vec<u64> = get("item_raw")?.iter().map(|&v| v as u64).collect();
    let records: Vec<Interaction> = (0..users.len())
        .map(|k| Interaction {
            user: users[k] as u32,
            item: items[k] as u32,
            timestamp: times[k] as i64,
            label: labels[k] as u8,
        })
        .collect();
    if records
        .iter()
        .any(|r| r.user as usize >= user_raw.len() || r.item as usize >= item_raw.len())
    {
        return Err(DataError::Invalid("dataset id out of range".into()));
    }
    Ok(InteractionLog {
        records,
        user_raw,
        item_raw,
    })
}

/// One line of a group sidecar file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub user: u32,
    pub attribute: String,
    pub group: usize,
}

/// Writes one JSON object per user.
pub fn write_group_sidecar(path: &Path, assignment: &GroupAssignment) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (user, &group) in assignment.groups.iter().enumerate() {
        let rec = GroupRecord {
            user: user as u32,
            attribute: assignment.attribute.clone(),
            group,
        };
        let line = serde_json::to_string(&rec).expect("group record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a sidecar back; every user in `[0, n)` must appear exactly once.
pub fn read_group_sidecar(path: &Path) -> Result<GroupAssignment, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut recs = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroupRecord = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: k + 1,
            reason: e.to_string(),
        })?;
        recs.push(rec);
    }
    let attribute = recs
        .first()
        .map(|r| r.attribute.clone())
        .ok_or(DataError::EmptyDataset)?;
    let n = recs.len();
    let mut groups = vec![usize::MAX; n];
    for r in &recs {
        let u = r.user as usize;
        if u >= n || groups[u] != usize::MAX {
            return Err(DataError::Invalid(format!(
                "sidecar user {} is duplicated or out of range",
                r.user
            )));
        }
        groups[u] = r.group;
    }
    let n_groups = groups.iter().max().map_or(0, |&g| g + 1);
    let mut sizes = vec![0; n_groups];
    for &g in &groups {
        sizes[g] += 1;
    }
    Ok(GroupAssignment {
        attribute,
        groups,
        sizes,
    })
}
