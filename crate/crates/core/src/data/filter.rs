use super::{DataError, InteractionLog};

/// Iteratively drops users and items with fewer than `k` positive records
/// until every survivor has at least `k`, then re-densifies ids.
pub fn k_core_filter(log: &InteractionLog, k: u32) -> Result<InteractionLog, DataError> {
    if k == 0 {
        return Err(DataError::Invalid("k must be at least 1".into()));
    }
    let k = k as usize;
    let mut user_alive = vec![true; log.n_users()];
    let mut item_alive = vec![true; log.n_items()];
    loop {
        let mut user_count = vec![0usize; log.n_users()];
        let mut item_count = vec![0usize; log.n_items()];
        for r in &log.records {
            if r.label == 1 && user_alive[r.user as usize] && item_alive[r.item as usize] {
                user_count[r.user as usize] += 1;
                item_count[r.item as usize] += 1;
            }
        }
        let mut changed = false;
        for (alive, &c) in user_alive.iter_mut().zip(&user_count) {
            if *alive && c < k {
                *alive = false;
                changed = true;
            }
        }
        for (alive, &c) in item_alive.iter_mut().zip(&item_count) {
            if *alive && c < k {
                *alive = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let raw: Vec<_> = log
        .to_raw()
        .into_iter()
        .zip(&log.records)
        .filter(|(_, r)| user_alive[r.user as usize] && item_alive[r.item as usize])
        .map(|(raw, _)| raw)
        .collect();
    if raw.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(InteractionLog::from_raw(&raw))
}
