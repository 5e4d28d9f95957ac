use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};

/// Hold out each user's most recent target-behavior interaction as the test
/// item and the second most recent as the validation item; everything else
/// stays in train.
///
/// Two guards keep the held-out items out of the training signal:
/// - earlier target-behavior interactions with the test or validation item
///   are removed from the training target sequence, and
/// - non-target interactions with the test item at or after the test
///   interaction's time are removed (they would hand the answer to the
///   encoder of another behavior).
pub fn leave_one_out_split(dataset: &Dataset) -> Result<DatasetSplit> {
    let target = dataset.meta.target_behavior;
    let behavior_count = dataset.behavior_count();
    let mut train = Vec::with_capacity(dataset.users.len());
    let mut validation_item = Vec::with_capacity(dataset.users.len());
    let mut test_item = Vec::with_capacity(dataset.users.len());
    let mut validation_time = Vec::with_capacity(dataset.users.len());
    let mut test_time = Vec::with_capacity(dataset.users.len());

    for user in &dataset.users {
        let tseq = &user.sequences[target];
        if tseq.len() < 3 {
            return Err(Error::Data(format!(
                "user `{}` has only {} target-behavior interactions (need >= 3 to split)",
                dataset.meta.user_ids[user.user_index],
                tseq.len()
            )));
        }
        let (test, t_time) = tseq[tseq.len() - 1];
        let (valid, v_time) = tseq[tseq.len() - 2];

        let mut history = user.clone();
        let kept_target: Vec<(usize, i64)> = tseq[..tseq.len() - 2]
            .iter()
            .copied()
            .filter(|&(item, _)| item != test && item != valid)
            .collect();
        history.sequences[target] = kept_target;
        for (b, seq) in history.sequences.iter_mut().enumerate() {
            if b == target {
                continue;
            }
            seq.retain(|&(item, t)| !(item == test && t >= t_time));
        }

        train.push(history);
        validation_item.push(valid);
        test_item.push(test);
        validation_time.push(v_time);
        test_time.push(t_time);
    }

    Ok(DatasetSplit {
        train,
        validation_item,
        test_item,
        validation_time,
        test_time,
        item_count: dataset.meta.item_count,
        behavior_count,
        user_count: dataset.users.len(),
        target_behavior: target,
    })
}
