//! Corpus manufacture, training loops, restoration and objective evaluation.

pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod fixtures;
pub mod restore;
pub mod train;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub use corpus::{
    degrade_corpus, recipe_for, CorpusOptions, CorpusOutput, PairedEntry, PairedManifest,
    PatternChoice,
};
pub use eval::{
    evaluate, logmel_l2, snr_proxy, word_errors, AsrHook, CommandAsr, EvalReport, EvalRow, MeanCi,
    SystemAggregate,
};
pub use fixtures::{
    fixture_degraded, fixture_noises, fixture_pairs, fixture_utterances, write_fixture_corpus,
    FixturePaths,
};
pub use restore::{restore, Restorer};
pub use train::{
    degraded_feature_id, prepare_pairs, train_cleaner, train_vocoder, vocoder_inputs, LossRecord,
    TrainConfig, TrainLog, TrainingPair, VocoderStage,
};

use crate::error::Result;

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Maps `f` over `items` on up to `workers` threads. Results keep input order and the
/// first error (by index) wins, so the output never depends on scheduling.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}
