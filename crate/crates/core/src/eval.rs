//! Objective metrics and benchmark reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::codec::CodecModel;
use crate::content::{decode_phonemes, extract_features, ContentEncoderModel, FeatureBackend};
use crate::error::{Error, Result, StageContext};
use crate::pipeline::{Diagnostics, ModelBundle, ReconstructOptions};
use crate::speaker::{l1_distance, SpeakerEmbedding, SvEmbedder};
use crate::synthcorpus::{Corpus, ManifestRow, Split};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over the reference length, in percent.
pub fn phoneme_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference sequence".into()));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Speaker embedding of a waveform through its quantized codec frames.
pub fn sv_embed_waveform(
    waveform: &[f64],
    codec: &CodecModel,
    embedder: &dyn SvEmbedder,
) -> Result<SpeakerEmbedding> {
    embedder.embed(&codec.encode(waveform)?.quantized.frames)
}

/// L1 distance between the speaker embeddings of two waveforms.
pub fn speaker_similarity(
    a: &[f64],
    b: &[f64],
    codec: &CodecModel,
    embedder: &dyn SvEmbedder,
) -> Result<f64> {
    let ea = sv_embed_waveform(a, codec, embedder)?;
    let eb = sv_embed_waveform(b, codec, embedder)?;
    Ok(l1_distance(&ea.vector, &eb.vector))
}

/// Share of hypotheses equal to their reference, in percent.
pub fn word_accuracy_proxy<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::shape("hypotheses", references.len(), hypotheses.len()));
    }
    if references.is_empty() {
        return Ok(0.0);
    }
    let hits = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(100.0 * hits as f64 / references.len() as f64)
}

/// Oracle recognition of a waveform (no enhancement).
pub fn recognize(
    oracle: &ContentEncoderModel,
    backend: &dyn FeatureBackend,
    waveform: &[f64],
) -> Result<Vec<usize>> {
    let feats = extract_features(waveform, backend)?;
    Ok(decode_phonemes(&oracle.posteriorgram(&feats)?))
}

pub const SYSTEM_NORMAL: &str = "normal";
pub const SYSTEM_DYSARTHRIC: &str = "dysarthric";
pub const SYSTEM_FULL: &str = "diff-dsr";
pub const SYSTEM_ABLATION: &str = "diff-dsr-ab";
pub const SYSTEMS: [&str; 4] = [SYSTEM_NORMAL, SYSTEM_DYSARTHRIC, SYSTEM_FULL, SYSTEM_ABLATION];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub system: String,
    pub speaker: String,
    pub per: f64,
    pub word_acc_proxy: f64,
    /// Mean L1 between speaker embeddings of the system output and the
    /// dysarthric input; absent for the input itself.
    pub sv_l1: Option<f64>,
    pub utterances: usize,
}

/// Same- versus cross-speaker distance for one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub system: String,
    pub id: String,
    pub speaker: String,
    pub other_speaker: String,
    pub same_l1: f64,
    pub cross_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceRecord {
    pub system: String,
    pub id: String,
    pub speaker: String,
    pub reference: String,
    pub hypothesis: String,
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub rows: Vec<EvalRow>,
    pub pairs: Vec<PairRecord>,
    pub utterances: Vec<UtteranceRecord>,
}

/// Reference values for context only; they are not reproduced here.
const PAPER_ROWS: &[(&str, [Option<f64>; 4], [Option<f64>; 4], [Option<f64>; 4])] = &[
    (
        "Original Speech",
        [None; 4],
        [Some(7.4), Some(29.3), Some(43.0), Some(62.0)],
        [None; 4],
    ),
    (
        "Diff-DSR (WavLM)",
        [Some(61.3), Some(40.3), Some(37.1), Some(33.4)],
        [Some(34.6), Some(43.3), Some(62.0), Some(78.7)],
        [Some(1.075), Some(1.070), Some(0.973), Some(0.955)],
    ),
    (
        "Diff-DSR(ab)",
        [None; 4],
        [None; 4],
        [Some(1.073), Some(1.071), Some(0.976), Some(0.958)],
    ),
];
const PAPER_SPEAKERS: [&str; 4] = ["M12", "F02", "M16", "F04"];

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or(String::new(), |x| format!("{x:.digits$}"))
}

impl EvalReport {
    pub fn row(&self, system: &str, speaker: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.system == system && r.speaker == speaker)
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.rows.iter().map(|r| r.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Corpus-level PER and accuracy of one system across speakers.
    pub fn system_totals(&self, system: &str) -> Result<(f64, f64)> {
        let mut edits = 0usize;
        let mut len = 0usize;
        let mut hits = 0usize;
        let mut n = 0usize;
        for u in self.utterances.iter().filter(|u| u.system == system) {
            let r: Vec<&str> = u.reference.split_whitespace().collect();
            let h: Vec<&str> = u.hypothesis.split_whitespace().collect();
            edits += edit_distance(&r, &h);
            len += r.len();
            hits += usize::from(r == h);
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument(format!("no utterances for system {system:?}")));
        }
        Ok((100.0 * edits as f64 / len as f64, 100.0 * hits as f64 / n as f64))
    }

    /// Fraction of pairs where the same-speaker distance is smaller.
    pub fn pair_win_rate(&self, system: &str) -> f64 {
        let pairs: Vec<&PairRecord> = self.pairs.iter().filter(|p| p.system == system).collect();
        if pairs.is_empty() {
            return 0.0;
        }
        pairs.iter().filter(|p| p.same_l1 < p.cross_l1).count() as f64 / pairs.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("system,speaker,per,word_acc_proxy,sv_l1,source\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.2},{:.2},{},measured",
                r.system,
                r.speaker,
                r.per,
                r.word_acc_proxy,
                opt(r.sv_l1, 4)
            );
        }
        for (system, per, acc, l1) in PAPER_ROWS {
            for (i, spk) in PAPER_SPEAKERS.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{system},{spk},{},{},{},paper",
                    opt(per[i], 1),
                    opt(acc[i], 1),
                    opt(l1[i], 3)
                );
            }
        }
        s
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("system,id,speaker,other_speaker,same_l1,cross_l1\n");
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                p.system, p.id, p.speaker, p.other_speaker, p.same_l1, p.cross_l1
            );
        }
        s
    }

    /// Writes `report.csv`, `pairs.csv` and `utterances.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("pairs.csv"), self.pairs_csv())?;
        let mut lines = String::new();
        for u in &self.utterances {
            lines.push_str(&serde_json::to_string(u)?);
            lines.push('\n');
        }
        fs::write(dir.join("utterances.jsonl"), lines)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkOptions {
    /// Dysarthric utterances to evaluate, spread across speakers; 0 = all.
    pub max_utterances: usize,
    pub seed: u64,
}

/// Dysarthric rows of a split, interleaved across speakers and truncated.
pub fn benchmark_rows(corpus: &Corpus, split: Split, max: usize) -> Vec<ManifestRow> {
    let mut by_speaker: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
    for r in corpus.split(split).iter().filter(|r| r.severity > 0.0) {
        by_speaker.entry(&r.speaker_id).or_default().push(r);
    }
    let longest = by_speaker.values().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..longest {
        for rows in by_speaker.values() {
            if let Some(r) = rows.get(i) {
                out.push((*r).clone());
            }
        }
    }
    if max > 0 {
        out.truncate(max);
    }
    out
}

fn normal_counterpart<'a>(corpus: &'a Corpus, row: &ManifestRow) -> Option<&'a ManifestRow> {
    let base = row.id.rsplit_once('_')?.0;
    let id = format!("{base}_s000");
    corpus.all_rows().map(|(_, r)| r).find(|r| r.id == id)
}

struct Accum {
    edits: usize,
    len: usize,
    hits: usize,
    n: usize,
    l1: f64,
    l1_n: usize,
}

/// Evaluates the normal originals, the dysarthric inputs and both
/// reconstruction systems per speaker on the dysarthric rows of a split.
pub fn run_benchmark(
    bundle: &ModelBundle,
    corpus: &Corpus,
    split: Split,
    opts: &BenchmarkOptions,
) -> Result<EvalReport> {
    let oracle = bundle.oracle().stage("oracle")?;
    let backend = bundle.backend.as_ref();
    let rows = benchmark_rows(corpus, split, opts.max_utterances);
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {} has no dysarthric utterances",
            split.name()
        )));
    }
    let embed = |w: &[f64]| sv_embed_waveform(w, &bundle.codec, bundle.embedder.as_ref());
    let inputs: Vec<Vec<f64>> = rows.iter().map(|r| corpus.audio(r)).collect::<Result<_>>()?;
    let input_emb: Vec<SpeakerEmbedding> = inputs.iter().map(|w| embed(w)).collect::<Result<_>>()?;

    // Cross-speaker partner: the next evaluated row from a different speaker.
    let partner = |i: usize| -> Option<usize> {
        (1..rows.len())
            .map(|k| (i + k) % rows.len())
            .find(|&j| rows[j].speaker_id != rows[i].speaker_id)
    };

    let mut acc: BTreeMap<(String, String), Accum> = BTreeMap::new();
    let mut pairs = Vec::new();
    let mut utterances = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let reference = corpus.phonemes(row);
        let ref_text = corpus.inventory.render(&reference);
        let mut outputs: Vec<(&str, Vec<f64>, Option<Diagnostics>)> = Vec::new();
        if let Some(n) = normal_counterpart(corpus, row) {
            outputs.push((SYSTEM_NORMAL, corpus.audio(n)?, None));
        }
        outputs.push((SYSTEM_DYSARTHRIC, inputs[i].clone(), None));
        for (system, normalize) in [(SYSTEM_FULL, true), (SYSTEM_ABLATION, false)] {
            let rec = bundle
                .reconstruct(
                    &inputs[i],
                    &ReconstructOptions {
                        seed: opts.seed.wrapping_add(i as u64),
                        normalize,
                        sampler: None,
                    },
                )
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", row.id)))
                .stage("reconstruct")?;
            outputs.push((system, rec.waveform, Some(rec.diagnostics)));
        }
        for (system, wave, diagnostics) in outputs {
            let hyp = recognize(&oracle, backend, &wave)?;
            let a = acc
                .entry((system.to_string(), row.speaker_id.clone()))
                .or_insert(Accum { edits: 0, len: 0, hits: 0, n: 0, l1: 0.0, l1_n: 0 });
            a.edits += edit_distance(&reference, &hyp);
            a.len += reference.len();
            a.hits += usize::from(hyp == reference);
            a.n += 1;
            if system != SYSTEM_DYSARTHRIC {
                let e = embed(&wave)?;
                let same = l1_distance(&e.vector, &input_emb[i].vector);
                a.l1 += same;
                a.l1_n += 1;
                if diagnostics.is_some() {
                    if let Some(j) = partner(i) {
                        pairs.push(PairRecord {
                            system: system.to_string(),
                            id: row.id.clone(),
                            speaker: row.speaker_id.clone(),
                            other_speaker: rows[j].speaker_id.clone(),
                            same_l1: same,
                            cross_l1: l1_distance(&e.vector, &input_emb[j].vector),
                        });
                    }
                }
            }
            utterances.push(UtteranceRecord {
                system: system.to_string(),
                id: row.id.clone(),
                speaker: row.speaker_id.clone(),
                reference: ref_text.clone(),
                hypothesis: corpus.inventory.render(&hyp),
                diagnostics,
            });
        }
        log::info!("evaluated {} ({}/{})", row.id, i + 1, rows.len());
    }
    let mut out_rows = Vec::new();
    for system in SYSTEMS {
        for ((sys, spk), a) in &acc {
            if sys == system {
                out_rows.push(EvalRow {
                    system: sys.clone(),
                    speaker: spk.clone(),
                    per: 100.0 * a.edits as f64 / a.len.max(1) as f64,
                    word_acc_proxy: 100.0 * a.hits as f64 / a.n.max(1) as f64,
                    sv_l1: (a.l1_n > 0).then(|| a.l1 / a.l1_n as f64),
                    utterances: a.n,
                });
            }
        }
    }
    Ok(EvalReport {
        split: split.name().to_string(),
        rows: out_rows,
        pairs,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_examples() {
        assert_eq!(phoneme_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        let p = phoneme_error_rate(&['a', 'b', 'c'], &['a', 'c']).unwrap();
        assert!((p - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(phoneme_error_rate(&[1, 2], &[]).unwrap(), 100.0);
        assert!(phoneme_error_rate::<u8>(&[], &[1]).is_err());
    }

    #[test]
    fn word_accuracy_counts_exact_matches() {
        let refs = vec![vec![1, 2], vec![3], vec![4, 5]];
        let hyps = vec![vec![1, 2], vec![3, 3], vec![4, 5]];
        assert!((word_accuracy_proxy(&hyps, &refs).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!(word_accuracy_proxy(&hyps[..1], &refs).is_err());
    }

    #[test]
    fn csv_has_measured_rows_then_paper_footer() {
        let report = EvalReport {
            split: "test".into(),
            rows: vec![EvalRow {
                system: SYSTEM_FULL.into(),
                speaker: "spk0".into(),
                per: 12.5,
                word_acc_proxy: 50.0,
                sv_l1: Some(0.25),
                utterances: 2,
            }],
            pairs: vec![],
            utterances: vec![],
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "system,speaker,per,word_acc_proxy,sv_l1,source");
        assert_eq!(lines[1], "diff-dsr,spk0,12.50,50.00,0.2500,measured");
        assert!(lines[2..].iter().all(|l| l.ends_with(",paper")));
        assert!(csv.contains("Diff-DSR (WavLM),M12,61.3,34.6,1.075,paper"));
    }
}
