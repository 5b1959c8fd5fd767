//! Per-clip classification and anomaly detection over trained models.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::anomaly::{
    detect_conflicts, detect_illegal_transition, detect_rare_motions, AnomalyEvent, AnomalyThresholds,
};
use crate::codebook::{ClipDocument, CorpusReader, GridSpec};
use crate::error::{Error, Result};
use crate::fusion::{fuse_classify, FusionConfig};
use crate::gp::{ConflictRegressors, GpMulticlass};
use crate::hdphmm::TransitionMatrix;
use crate::representation::{ClipFeature, FeatureMap};

pub const LABELS_SCHEMA: &str = "labels/1";

/// Which detectors run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detectors {
    pub rare_motion: bool,
    pub conflict: bool,
    pub illegal_transition: bool,
}

impl Default for Detectors {
    fn default() -> Self {
        Detectors { rare_motion: true, conflict: true, illegal_transition: true }
    }
}

/// Output for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub clip_id: u64,
    /// Classifier distribution over the model's classes.
    pub p: Vec<f64>,
    pub gp_label: usize,
    pub label: usize,
    pub energies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipOutcome {
    pub label: LabelRecord,
    pub events: Vec<AnomalyEvent>,
}

/// Classifier plus transition model, fusing one clip at a time.
#[derive(Debug, Clone)]
pub struct FusedClassifier {
    pub gp: GpMulticlass,
    pub transition: TransitionMatrix,
    pub fusion: FusionConfig,
    prev: Option<usize>,
}

impl FusedClassifier {
    pub fn new(gp: GpMulticlass, transition: TransitionMatrix, fusion: FusionConfig) -> Result<Self> {
        fusion.validate()?;
        if let Some(&c) = gp.classes.iter().find(|&&c| c >= transition.n_states()) {
            return Err(Error::invalid(format!(
                "class {c} outside the {}-state transition matrix",
                transition.n_states()
            )));
        }
        Ok(FusedClassifier { gp, transition, fusion, prev: None })
    }

    /// Forget the previous state, as at the start of a new stream.
    pub fn reset(&mut self) {
        self.prev = None;
    }

    pub fn previous_state(&self) -> Option<usize> {
        self.prev
    }

    /// Label the next clip from its feature vector.
    pub fn classify(&mut self, clip_id: u64, c: &[f64]) -> Result<LabelRecord> {
        let p = self.gp.predict(c)?;
        let gp_label = self.gp.classes[GpMulticlass::argmax(&p)];
        let fused = fuse_classify(&p, &self.gp.classes, self.prev, &self.transition, &self.fusion)?;
        self.prev = Some(fused.state);
        Ok(LabelRecord { clip_id, p, gp_label, label: fused.state, energies: fused.energies })
    }
}

/// Trained, immutable models plus the previous fused state.
#[derive(Debug, Clone)]
pub struct StreamProcessor {
    pub grid: GridSpec,
    pub features: FeatureMap,
    pub classifier: FusedClassifier,
    pub regressors: Option<ConflictRegressors>,
    pub thresholds: AnomalyThresholds,
    pub detectors: Detectors,
}

impl StreamProcessor {
    pub fn new(
        grid: GridSpec,
        features: FeatureMap,
        classifier: FusedClassifier,
        regressors: Option<ConflictRegressors>,
        thresholds: AnomalyThresholds,
    ) -> Result<Self> {
        thresholds.validate()?;
        if classifier.gp.dim() != features.dim() {
            return Err(Error::invalid(format!(
                "classifier expects {} features but there are {} activity word sets",
                classifier.gp.dim(),
                features.dim()
            )));
        }
        if let Some(r) = &regressors {
            if r.dim() != features.dim() {
                return Err(Error::invalid(format!(
                    "{} conflict regressors for {} activity word sets",
                    r.dim(),
                    features.dim()
                )));
            }
        }
        Ok(StreamProcessor { grid, features, classifier, regressors, thresholds, detectors: Detectors::default() })
    }

    pub fn with_detectors(mut self, detectors: Detectors) -> Self {
        self.detectors = detectors;
        self
    }

    pub fn reset(&mut self) {
        self.classifier.reset();
    }

    pub fn process(&mut self, clip: &ClipDocument) -> Result<ClipOutcome> {
        let feature = self.features.feature(clip);
        self.process_feature(clip, &feature)
    }

    /// Classify a clip whose feature is already known.
    pub fn process_feature(&mut self, clip: &ClipDocument, feature: &ClipFeature) -> Result<ClipOutcome> {
        let prev = self.classifier.previous_state();
        let label = self.classifier.classify(clip.clip_id, &feature.c)?;
        let mut events = Vec::new();
        if self.detectors.rare_motion {
            events.extend(detect_rare_motions(feature, &self.grid, &self.thresholds)?);
        }
        if self.detectors.conflict {
            if let Some(r) = &self.regressors {
                events.extend(detect_conflicts(clip, feature, self.features.word_sets(), r, &self.grid, &self.thresholds)?);
            }
        }
        if self.detectors.illegal_transition {
            if let Some(prev) = prev {
                let m = &self.classifier.transition;
                events.extend(detect_illegal_transition(clip.clip_id, prev, label.label, m, &self.thresholds)?);
            }
        }
        Ok(ClipOutcome { label, events })
    }

    /// Process clips in order.
    pub fn run_batch(&mut self, clips: &[ClipDocument]) -> Result<Vec<ClipOutcome>> {
        clips.iter().map(|c| self.process(c)).collect()
    }

    /// Read clips one at a time from a corpus stream, handing each outcome
    /// to `sink` before the next clip is read.
    pub fn run_stream<R: BufRead>(
        &mut self,
        reader: &mut CorpusReader<R>,
        mut sink: impl FnMut(&ClipOutcome) -> Result<()>,
    ) -> Result<usize> {
        if reader.grid != self.grid {
            return Err(Error::invalid("corpus grid differs from the model grid"));
        }
        let mut n = 0;
        while let Some(clip) = reader.next_clip()? {
            let out = self.process(&clip)?;
            sink(&out)?;
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Corpus;
    use crate::gp::{CgOptions, GpTraining, KernelSpec, RegressorTraining};
    use crate::representation::ActivityWordSet;

    /// Two word sets, two states alternating in runs; state 0 uses words
    /// 0..4 and state 1 words 4..8.
    fn setup() -> (StreamProcessor, Corpus) {
        let grid = GridSpec::new(32, 16).unwrap().with_cell_size(8).unwrap();
        let sets = vec![
            ActivityWordSet { activity_id: 0, words: vec![0, 1, 2, 3], covered_mass: 1.0 },
            ActivityWordSet { activity_id: 1, words: vec![4, 5, 6, 7], covered_mass: 1.0 },
        ];
        let map = FeatureMap::new(sets, grid.codebook_size()).unwrap();
        let mut corpus = Corpus::new(grid, 75).unwrap();
        let mut states = Vec::new();
        for t in 0..40u64 {
            let s = ((t / 5) % 2) as u32;
            let mut words: Vec<u32> = (0..40).map(|i| s * 4 + (i % 4)).collect();
            words.extend((0..(t % 3) as u32).map(|i| 4 - 4 * s + i));
            if t == 17 {
                words.extend(vec![40u32; 60]);
            }
            corpus.push(ClipDocument { clip_id: t, frame_start: t * 75, frame_end: t * 75 + 75, words }).unwrap();
            states.push(s as usize);
        }
        let x: Vec<Vec<f64>> = corpus.clips.iter().map(|c| map.feature(c).c).collect();
        let gp = GpMulticlass::fit(
            &x,
            &states,
            &GpTraining { init: KernelSpec::rbf(2.0, 0.3), optimize: false, cg: CgOptions::default() },
        )
        .unwrap();
        let reg = ConflictRegressors::fit(
            &x,
            &RegressorTraining { init: KernelSpec::rbf(0.5, 0.3).with_noise(0.02), optimize: false, cg: CgOptions::default() },
        )
        .unwrap();
        let m = TransitionMatrix::from_sequence(&states, 2, 0.5).unwrap();
        let classifier = FusedClassifier::new(gp, m, FusionConfig::default()).unwrap();
        let p = StreamProcessor::new(grid, map, classifier, Some(reg), AnomalyThresholds::default()).unwrap();
        (p, corpus)
    }

    #[test]
    fn batch_matches_stream() {
        let (mut p, corpus) = setup();
        let batch = p.run_batch(&corpus.clips).unwrap();
        let mut buf = Vec::new();
        corpus.write_to(&mut buf).unwrap();
        let mut reader = CorpusReader::new(std::io::Cursor::new(buf), "mem").unwrap();
        p.reset();
        let mut streamed = Vec::new();
        let n = p.run_stream(&mut reader, |o| {
            streamed.push(o.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(n, corpus.len());
        assert_eq!(batch, streamed);
    }

    #[test]
    fn labels_follow_states_and_rare_clip_flagged() {
        let (mut p, corpus) = setup();
        let out = p.run_batch(&corpus.clips).unwrap();
        for (t, o) in out.iter().enumerate() {
            assert_eq!(o.label.label, (t / 5) % 2, "clip {t}");
            assert!((o.label.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let rare: Vec<u64> = out
            .iter()
            .flat_map(|o| &o.events)
            .filter(|e| e.kind == crate::anomaly::AnomalyKind::RareMotion)
            .map(|e| e.clip_id)
            .collect();
        assert_eq!(rare, vec![17]);
    }

    #[test]
    fn disabling_a_detector_leaves_others_alone() {
        let (p, corpus) = setup();
        let all = p.clone().run_batch(&corpus.clips).unwrap();
        for mask in 0..8u8 {
            let d = Detectors { rare_motion: mask & 1 != 0, conflict: mask & 2 != 0, illegal_transition: mask & 4 != 0 };
            let part = p.clone().with_detectors(d).run_batch(&corpus.clips).unwrap();
            for (a, b) in all.iter().zip(&part) {
                assert_eq!(a.label, b.label);
                let keep = |e: &&AnomalyEvent| match e.kind {
                    crate::anomaly::AnomalyKind::RareMotion => d.rare_motion,
                    crate::anomaly::AnomalyKind::ConflictingActivity => d.conflict,
                    crate::anomaly::AnomalyKind::IllegalTransition => d.illegal_transition,
                };
                let expect: Vec<&AnomalyEvent> = a.events.iter().filter(keep).collect();
                assert_eq!(expect, b.events.iter().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn mismatched_models_rejected() {
        let (p, _) = setup();
        let small = TransitionMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(FusedClassifier::new(p.classifier.gp.clone(), small, FusionConfig::default()).is_err());
        let (other, _) = setup();
        let mut three = other.features.word_sets().to_vec();
        three.push(ActivityWordSet { activity_id: 2, words: vec![9], covered_mass: 1.0 });
        let map = FeatureMap::new(three, p.grid.codebook_size()).unwrap();
        assert!(StreamProcessor::new(p.grid, map, p.classifier, None, AnomalyThresholds::default()).is_err());
    }
}
