//! Planted-signal synthetic corpora.
//!
//! Every sample has a class `y`. Three independent channels may reveal it:
//!
//! * audio: the two hemistich-final characters share rhyme class `y`; when the
//!   channel is off they are drawn from two different rhyme classes, so
//!   "do they rhyme" tells the model whether to trust the rhyme;
//! * vision: the latent's per-channel mean is shifted by a class prototype;
//! * text: the embedding carries a class prototype on top of noise.
//!
//! Which channels are on is decided per sample. Under
//! [`Presence::Complementary`] audio and vision cover disjoint arcs of one
//! shared uniform draw (so they rarely overlap and each one is needed), and text
//! is an independent coin flip. The signal strengths are the probabilities
//! that each channel is on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use super::manifest::{Manifest, ManifestHeader, SampleRecord, Split};
use crate::audio::{AudioFeatureTable, UNK};
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Presence {
    /// Audio on `[0, s_a)`, vision on `[s_a, s_a + s_v)` modulo 1, text
    /// independent.
    #[default]
    Complementary,
    /// Three independent coin flips.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub vocab: usize,
    pub sentence_len: usize,
    pub rhyme_classes: usize,
    pub tone_classes: usize,
    /// Acoustic feature width, shared by every dialect.
    pub d_a: usize,
    pub rhyme_dims: usize,
    pub tone_dims: usize,
    pub dialects: Vec<String>,
    /// 0 gives identical tables for every dialect. Scales both the rotation
    /// angles and the additive noise.
    pub dialect_distortion: f64,
    /// Fraction of the vocabulary each dialect fails to distinguish: those
    /// characters keep only their tone subvector. Dialect `i` loses the
    /// characters whose hidden rank, scaled to `[0, 1)`, falls in
    /// `[i·q, (i+1)·q)`, so the losses never overlap.
    pub dialect_erasure: f64,
    pub classes: usize,
    pub task: TaskKind,
    pub audio_signal: f64,
    pub visual_signal: f64,
    pub text_signal: f64,
    pub presence: Presence,
    pub latent: [usize; 3],
    pub visual_amplitude: f64,
    pub d_text: usize,
    pub text_amplitude: f64,
    pub text_noise: f64,
    /// Multi-label only: probability of each extra label.
    pub extra_label_prob: f64,
    pub regions: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 2000,
            val: 400,
            test: 400,
            vocab: 200,
            sentence_len: 7,
            rhyme_classes: 8,
            tone_classes: 2,
            d_a: 24,
            rhyme_dims: 8,
            tone_dims: 4,
            dialects: vec!["mandarin".into(), "cantonese".into()],
            dialect_distortion: 0.2,
            dialect_erasure: 0.0,
            classes: 5,
            task: TaskKind::SingleLabel,
            audio_signal: 0.9,
            visual_signal: 0.5,
            text_signal: 0.4,
            presence: Presence::Complementary,
            latent: [4, 8, 8],
            visual_amplitude: 1.0,
            d_text: 32,
            text_amplitude: 3.0,
            text_noise: 0.5,
            extra_label_prob: 0.15,
            regions: vec!["north".into(), "south".into()],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("audio_signal", self.audio_signal),
            ("visual_signal", self.visual_signal),
            ("text_signal", self.text_signal),
            ("dialect_distortion", self.dialect_distortion),
            ("dialect_erasure", self.dialect_erasure),
            ("extra_label_prob", self.extra_label_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("visual_amplitude", self.visual_amplitude),
            ("text_amplitude", self.text_amplitude),
            ("text_noise", self.text_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.rhyme_classes < self.classes.max(2) {
            return bad(format!(
                "{} rhyme classes cannot carry {} labels",
                self.rhyme_classes, self.classes
            ));
        }
        if self.vocab < 2 * self.rhyme_classes {
            return bad(format!("vocabulary of {} leaves some rhyme class with fewer than 2 characters", self.vocab));
        }
        if self.tone_classes == 0 {
            return bad("tone_classes must be positive".into());
        }
        if self.sentence_len < 2 {
            return bad(format!("sentences need at least 2 characters, got {}", self.sentence_len));
        }
        if self.rhyme_dims == 0 || self.rhyme_dims + self.tone_dims > self.d_a {
            return bad(format!(
                "rhyme ({}) and tone ({}) subvectors do not fit in d_a={}",
                self.rhyme_dims, self.tone_dims, self.d_a
            ));
        }
        if self.dialects.is_empty() {
            return bad("at least one dialect is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = self.dialects.iter().find(|d| !seen.insert(d.as_str())) {
            return bad(format!("dialect {d} listed twice"));
        }
        if self.dialect_erasure * self.dialects.len() as f64 > 1.0 {
            return bad("dialect erasure ranges overlap".into());
        }
        if self.latent.contains(&0) || self.d_text == 0 {
            return bad("latent and text geometries must be positive".into());
        }
        if self.train + self.val + self.test == 0 {
            return bad("corpus would be empty".into());
        }
        Ok(())
    }

    pub fn token(c: usize) -> String {
        format!("c{c:04}")
    }

    /// Rhyme class of a generated character token.
    pub fn rhyme_of(&self, token: &str) -> Option<usize> {
        let c: usize = token.strip_prefix('c')?.parse().ok()?;
        (c < self.vocab).then_some(c % self.rhyme_classes)
    }

    /// Positions of the two hemistich-final characters.
    pub fn hemistich_ends(n: usize) -> (usize, usize) {
        (n.div_ceil(2) - 1, n - 1)
    }

    /// The class prototypes that the generator plants. Fully determined by
    /// the seed.
    pub fn planted(&self) -> Result<Planted> {
        self.validate()?;
        let mut rng = Rng::new(self.seed).fork();
        let rhyme = rng.normal_tensor(vec![self.rhyme_classes, self.rhyme_dims], 1.5);
        let tone = rng.normal_tensor(vec![self.tone_classes, self.tone_dims.max(1)], 1.0);
        let c = self.latent[0];
        let mut visual = Tensor::zeros(vec![self.classes, c]);
        for y in 0..self.classes {
            let row = &mut visual.data_mut()[y * c..(y + 1) * c];
            if self.classes <= 2 * c {
                row[(y / 2) % c] = if y % 2 == 0 { 1.0 } else { -1.0 };
            } else {
                let v: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                for (r, x) in row.iter_mut().zip(v) {
                    *r = x / n;
                }
            }
        }
        let mut text = rng.normal_tensor(vec![self.classes, self.d_text], 1.0);
        for y in 0..self.classes {
            let row = &mut text.data_mut()[y * self.d_text..(y + 1) * self.d_text];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Planted {
            rhyme,
            tone,
            visual,
            text,
        })
    }
}

/// Class prototypes. `visual` and `text` rows have unit norm; the generator
/// scales them by the configured amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    /// `[R×rhyme_dims]`
    pub rhyme: Tensor,
    /// `[tone_classes×tone_dims]`
    pub tone: Tensor,
    /// `[M×C]`
    pub visual: Tensor,
    /// `[M×d_text]`
    pub text: Tensor,
}

/// Which channels carried the label for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelsOn {
    pub audio: bool,
    pub vision: bool,
    pub text: bool,
    pub text_plain: bool,
}

fn draw_presence(spec: &SynthSpec, rng: &mut Rng) -> ChannelsOn {
    let (audio, vision, text) = match spec.presence {
        Presence::Complementary => {
            let u = rng.uniform();
            let shifted = (u - spec.audio_signal).rem_euclid(1.0);
            (u < spec.audio_signal, shifted < spec.visual_signal, rng.bernoulli(spec.text_signal))
        }
        Presence::Independent => (
            rng.bernoulli(spec.audio_signal),
            rng.bernoulli(spec.visual_signal),
            rng.bernoulli(spec.text_signal),
        ),
    };
    let plain_draw = rng.bernoulli(0.5);
    ChannelsOn {
        audio,
        vision,
        text,
        text_plain: text && plain_draw,
    }
}

/// Rotates pairs of coordinates of `v` in place.
fn givens(v: &mut [f64], rotations: &[(usize, usize, f64)]) {
    for &(i, j, theta) in rotations {
        let (c, s) = (theta.cos(), theta.sin());
        let (a, b) = (v[i], v[j]);
        v[i] = c * a - s * b;
        v[j] = s * a + c * b;
    }
}

fn build_tables(spec: &SynthSpec, planted: &Planted, rng: &mut Rng) -> Result<BTreeMap<String, AudioFeatureTable>> {
    let (rd, td) = (spec.rhyme_dims, spec.tone_dims);
    let structured = rd + td;
    let mut base = Tensor::zeros(vec![spec.vocab, spec.d_a]);
    for c in 0..spec.vocab {
        let row = &mut base.data_mut()[c * spec.d_a..(c + 1) * spec.d_a];
        row[..rd].copy_from_slice(planted.rhyme.row(c % spec.rhyme_classes));
        if td > 0 {
            row[rd..structured].copy_from_slice(planted.tone.row((c / spec.rhyme_classes) % spec.tone_classes));
        }
        for x in &mut row[structured..] {
            *x = rng.normal();
        }
    }

    // A random ranking of the characters; dialect erasure takes contiguous
    // slices of it.
    let mut order: Vec<usize> = (0..spec.vocab).collect();
    rng.shuffle(&mut order);
    let mut hidden = vec![0.0; spec.vocab];
    for (rank, &c) in order.iter().enumerate() {
        hidden[c] = rank as f64 / spec.vocab as f64;
    }
    let mut tokens: Vec<String> = (0..spec.vocab).map(SynthSpec::token).collect();
    tokens.push(UNK.to_string());
    let mut tables = BTreeMap::new();
    for (k, name) in spec.dialects.iter().enumerate() {
        let mut drng = rng.fork();
        let rotations: Vec<(usize, usize, f64)> = (0..structured)
            .map(|_| {
                let i = drng.below(structured);
                let j = (i + 1 + drng.below(structured.max(2) - 1)) % structured;
                let theta = spec.dialect_distortion * std::f64::consts::FRAC_PI_2 * (2.0 * drng.uniform() - 1.0);
                (i, j, theta)
            })
            .filter(|&(i, j, _)| i != j)
            .collect();
        let noise = 0.3 * spec.dialect_distortion;
        let lo = k as f64 * spec.dialect_erasure;
        let hi = lo + spec.dialect_erasure;
        let mut m = Tensor::zeros(vec![spec.vocab + 1, spec.d_a]);
        for (c, &h) in hidden.iter().enumerate() {
            let mut row = base.row(c).to_vec();
            // Erased characters keep only their tone part and get no private
            // noise, so nothing left in the row identifies them.
            let erased = h >= lo && h < hi;
            if erased {
                row[..rd].fill(0.0);
                row[structured..].fill(0.0);
            }
            if spec.dialect_distortion > 0.0 {
                givens(&mut row[..structured], &rotations);
                for x in &mut row {
                    let z = drng.normal();
                    if !erased {
                        *x += noise * z;
                    }
                }
            }
            m.data_mut()[c * spec.d_a..(c + 1) * spec.d_a].copy_from_slice(&row);
        }
        tables.insert(name.clone(), AudioFeatureTable::new(name.clone(), tokens.clone(), m)?);
    }
    Ok(tables)
}

/// Builds a corpus in memory. Samples are ordered train, then val, then test.
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus> {
    Ok(synth_generate_traced(spec)?.0)
}

/// Like [`synth_generate`], also returning which channels carried the label
/// for each sample.
pub fn synth_generate_traced(spec: &SynthSpec) -> Result<(Corpus, Vec<ChannelsOn>)> {
    let planted = spec.planted()?;
    let mut master = Rng::new(spec.seed);
    let _ = master.fork();
    let mut table_rng = master.fork();
    let mut rng = master.fork();
    let tables = build_tables(spec, &planted, &mut table_rng)?;

    let n = spec.sentence_len;
    let (p1, p2) = SynthSpec::hemistich_ends(n);
    let r = spec.rhyme_classes;
    // Characters of rhyme class k are k, k + R, k + 2R, ...
    let pick_with_rhyme = |rng: &mut Rng, k: usize| {
        let count = (spec.vocab - k).div_ceil(r);
        k + r * rng.below(count)
    };
    let [ch, hh, ww] = spec.latent;
    let pixels = hh * ww;
    let total = spec.train + spec.val + spec.test;
    let mut samples = Vec::with_capacity(total);
    let mut latents = Vec::with_capacity(total);
    let mut text = Vec::with_capacity(total);
    let mut text_plain = Vec::with_capacity(total);
    let mut trace = Vec::with_capacity(total);

    for i in 0..total {
        let split = if i < spec.train {
            Split::Train
        } else if i < spec.train + spec.val {
            Split::Val
        } else {
            Split::Test
        };
        let y = rng.below(spec.classes);
        let on = draw_presence(spec, &mut rng);

        let mut chars: Vec<usize> = (0..n).map(|_| rng.below(spec.vocab)).collect();
        if on.audio {
            chars[p1] = pick_with_rhyme(&mut rng, y);
            chars[p2] = pick_with_rhyme(&mut rng, y);
        } else {
            let r1 = rng.below(r);
            let r2 = (r1 + 1 + rng.below(r - 1)) % r;
            chars[p1] = pick_with_rhyme(&mut rng, r1);
            chars[p2] = pick_with_rhyme(&mut rng, r2);
        }

        let mut labels = vec![y];
        if spec.task == TaskKind::MultiLabel {
            for k in 0..spec.classes {
                if k != y && rng.bernoulli(spec.extra_label_prob) {
                    labels.push(k);
                }
            }
            labels.sort_unstable();
        }

        let mut lat = rng.normal_tensor(vec![ch, hh, ww], 1.0);
        if on.vision {
            let shift = planted.visual.row(y);
            for (c, s) in shift.iter().enumerate() {
                for v in &mut lat.data_mut()[c * pixels..(c + 1) * pixels] {
                    *v += spec.visual_amplitude * s;
                }
            }
        }

        let embed = |carries: bool, rng: &mut Rng| {
            let mut t = rng.normal_tensor(vec![spec.d_text], spec.text_noise);
            if carries {
                for &k in &labels {
                    for (v, p) in t.data_mut().iter_mut().zip(planted.text.row(k)) {
                        *v += spec.text_amplitude * p;
                    }
                }
            }
            t
        };
        let t_enh = embed(on.text, &mut rng);
        let t_plain = embed(on.text_plain, &mut rng);

        let region = (!spec.regions.is_empty()).then(|| spec.regions[rng.below(spec.regions.len())].clone());
        let (label, labels) = match spec.task {
            TaskKind::SingleLabel => (Some(y), None),
            TaskKind::MultiLabel => (None, Some(labels)),
        };
        samples.push(SampleRecord {
            id: format!("s{i:05}"),
            chars: chars.into_iter().map(SynthSpec::token).collect(),
            label,
            labels,
            region,
            split,
        });
        latents.push(lat);
        text.push(t_enh);
        text_plain.push(t_plain);
        trace.push(on);
    }

    let header = ManifestHeader {
        task: spec.task,
        classes: spec.classes,
        dialects: spec.dialects.iter().map(|d| (d.clone(), spec.d_a)).collect(),
        latent: spec.latent,
        d_text: spec.d_text,
    };
    let corpus = Corpus {
        manifest: Manifest { header, samples },
        tables,
        latents,
        text,
        text_plain: Some(text_plain),
    };
    corpus.validate()?;
    Ok((corpus, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train: 60,
            val: 20,
            test: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_distortion_gives_identical_tables() {
        let c = synth_generate(&SynthSpec {
            dialect_distortion: 0.0,
            ..small()
        })
        .unwrap();
        let m = c.tables["mandarin"].matrix();
        assert!(m.bit_eq(c.tables["cantonese"].matrix()));
    }

    #[test]
    fn rhyme_structure_reveals_label_when_audio_is_on() {
        let spec = small();
        let (c, on) = synth_generate_traced(&spec).unwrap();
        let (p1, p2) = SynthSpec::hemistich_ends(spec.sentence_len);
        for (s, on) in c.manifest.samples.iter().zip(on) {
            let r1 = spec.rhyme_of(&s.chars[p1]).unwrap();
            let r2 = spec.rhyme_of(&s.chars[p2]).unwrap();
            assert_eq!(r1 == r2, on.audio);
            if on.audio {
                assert_eq!(Some(r1), s.label);
            }
        }
    }

    #[test]
    fn complementary_presence_arcs() {
        let spec = SynthSpec {
            audio_signal: 0.7,
            visual_signal: 0.3,
            ..small()
        };
        let (_, on) = synth_generate_traced(&spec).unwrap();
        assert!(on.iter().all(|o| o.audio != o.vision));
        assert!(on.iter().all(|o| !o.text_plain || o.text));
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SynthSpec { audio_signal: -0.1, ..small() },
            SynthSpec { text_signal: 1.5, ..small() },
            SynthSpec { rhyme_classes: 3, ..small() },
            SynthSpec { vocab: 10, ..small() },
            SynthSpec { dialect_erasure: 0.6, ..small() },
            SynthSpec { sentence_len: 1, ..small() },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn multilabel_rows_include_primary() {
        let spec = SynthSpec {
            task: TaskKind::MultiLabel,
            classes: 12,
            rhyme_classes: 12,
            vocab: 120,
            ..small()
        };
        let c = synth_generate(&spec).unwrap();
        assert!(c.manifest.samples.iter().all(|s| s.label.is_none() && !s.labels.as_ref().unwrap().is_empty()));
    }
}
