//! Fixtures shared by the benchmarks.

use yunlu_core::audio::{assemble_sequence, AssembledSequence, AudioFeatureTable, UNK};
use yunlu_core::{AudioEncoder, ParamStore, Rng};

/// A random feature table over `vocab` tokens named `t0..`, plus `<unk>`.
pub fn feature_table(rng: &mut Rng, vocab: usize, d_a: usize) -> AudioFeatureTable {
    let tokens = (0..vocab).map(|i| format!("t{i}")).chain([UNK.to_string()]).collect();
    AudioFeatureTable::new("bench", tokens, rng.normal_tensor(vec![vocab + 1, d_a], 1.0)).expect("valid table")
}

/// `batch` sentences of `len` characters.
pub fn sentences(rng: &mut Rng, table: &AudioFeatureTable, batch: usize, len: usize, l_max: usize) -> Vec<AssembledSequence> {
    let vocab = table.len() - 1;
    (0..batch)
        .map(|_| {
            let s: Vec<String> = (0..len).map(|_| format!("t{}", rng.below(vocab))).collect();
            assemble_sequence(&s, table, l_max, true).expect("known tokens")
        })
        .collect()
}

pub struct EncoderFixture {
    pub encoder: AudioEncoder,
    pub store: ParamStore,
    pub batch: Vec<AssembledSequence>,
}

pub fn encoder_fixture(d: usize, heads: usize, layers: usize, batch: usize, len: usize) -> EncoderFixture {
    let (d_a, l_max) = (24, 16);
    let mut rng = Rng::new(1);
    let mut store = ParamStore::new();
    let encoder = AudioEncoder::new(&mut store, &mut rng, "audio", d_a, d, heads, layers, l_max).expect("valid dims");
    let table = feature_table(&mut rng, 200, d_a);
    let batch = sentences(&mut rng, &table, batch, len, l_max);
    EncoderFixture { encoder, store, batch }
}
