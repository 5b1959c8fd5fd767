//! Clip documents and the JSON Lines corpus format.
//!
//! The first line is a header object carrying the grid and clip length; each
//! following line is one clip `{clip_id, frame_start, frame_end, words}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GridSpec, VisualWord, N_DIRECTIONS};
use crate::error::{Error, Result};

pub const CORPUS_SCHEMA: &str = "corpus/1";

/// One clip treated as a bag of visual-word indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipDocument {
    pub clip_id: u64,
    pub frame_start: u64,
    pub frame_end: u64,
    pub words: Vec<u32>,
}

impl ClipDocument {
    pub fn n_frames(&self) -> u64 {
        self.frame_end - self.frame_start
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub schema: String,
    pub frame_width: u32,
    pub frame_height: u32,
    pub cell_size: u32,
    pub n_directions: u32,
    pub clip_length: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub grid: GridSpec,
    pub clip_length: u32,
    pub clips: Vec<ClipDocument>,
    pub config_hash: Option<String>,
}

impl Corpus {
    pub fn new(grid: GridSpec, clip_length: u32) -> Result<Self> {
        grid.validate()?;
        if clip_length == 0 {
            return Err(Error::invalid("clip_length must be at least 1"));
        }
        Ok(Corpus { grid, clip_length, clips: Vec::new(), config_hash: None })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.clips.iter().map(|c| c.words.len()).sum()
    }

    pub fn codebook_size(&self) -> usize {
        self.grid.codebook_size()
    }

    /// Append a clip, enforcing id order, frame contiguity and word range.
    pub fn push(&mut self, clip: ClipDocument) -> Result<()> {
        check_clip(&clip, self.clips.last(), &self.grid, self.clip_length)?;
        self.clips.push(clip);
        Ok(())
    }

    /// Check every corpus invariant.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.clip_length == 0 {
            return Err(Error::invalid("clip_length must be at least 1"));
        }
        let mut prev: Option<&ClipDocument> = None;
        for c in &self.clips {
            check_clip(c, prev, &self.grid, self.clip_length)?;
            prev = Some(c);
        }
        Ok(())
    }

    /// Sub-corpus of the clips at positions `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Corpus {
        Corpus {
            grid: self.grid,
            clip_length: self.clip_length,
            clips: self.clips[range].to_vec(),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn header(&self) -> CorpusHeader {
        CorpusHeader {
            schema: CORPUS_SCHEMA.to_string(),
            frame_width: self.grid.frame_width,
            frame_height: self.grid.frame_height,
            cell_size: self.grid.cell_size,
            n_directions: self.grid.n_directions,
            clip_length: self.clip_length,
            magnitude_threshold: Some(self.grid.magnitude_threshold),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<corpus writer>", e);
        serde_json::to_writer(&mut w, &self.header())?;
        w.write_all(b"\n").map_err(io)?;
        for c in &self.clips {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| relabel_io(e, path))
    }

    pub fn read_from<R: BufRead>(reader: R, source: &str) -> Result<Corpus> {
        let mut r = CorpusReader::new(reader, source)?;
        let mut corpus = Corpus {
            grid: r.grid,
            clip_length: r.clip_length,
            clips: Vec::new(),
            config_hash: r.header.config_hash.clone(),
        };
        while let Some(c) = r.next_clip()? {
            corpus.clips.push(c);
        }
        Ok(corpus)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Corpus> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Corpus::read_from(BufReader::new(f), &path.display().to_string())
    }
}

fn relabel_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

fn check_clip(clip: &ClipDocument, prev: Option<&ClipDocument>, grid: &GridSpec, clip_length: u32) -> Result<()> {
    let id = clip.clip_id;
    if clip.frame_end <= clip.frame_start {
        return Err(Error::invalid(format!("clip {id}: empty frame range")));
    }
    if clip.n_frames() > clip_length as u64 {
        return Err(Error::invalid(format!(
            "clip {id}: spans {} frames, clip_length is {clip_length}",
            clip.n_frames()
        )));
    }
    if let Some(p) = prev {
        if clip.clip_id <= p.clip_id {
            return Err(Error::invalid(format!("clip {id}: ids must strictly increase (previous {})", p.clip_id)));
        }
        if clip.frame_start != p.frame_end {
            return Err(Error::invalid(format!(
                "clip {id}: starts at frame {} but previous clip ends at {}",
                clip.frame_start, p.frame_end
            )));
        }
        if p.n_frames() != clip_length as u64 {
            return Err(Error::invalid(format!("clip {id}: follows a partial clip")));
        }
    }
    let v = grid.codebook_size();
    if let Some(w) = clip.words.iter().find(|&&w| w as usize >= v) {
        return Err(Error::invalid(format!("clip {id}: word index {w} outside codebook of size {v}")));
    }
    Ok(())
}

/// Incremental corpus reader; validates each clip as it is read.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    source: String,
    line_no: usize,
    pub header: CorpusHeader,
    pub grid: GridSpec,
    pub clip_length: u32,
    last: Option<ClipDocument>,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R, source: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let mut line_no = 0;
        let parse_err = |line: usize, msg: String| Error::Parse { path: source.to_string(), line, msg };
        let header_line = loop {
            line_no += 1;
            match lines.next() {
                None => return Err(parse_err(line_no, "missing corpus header".into())),
                Some(Err(e)) => return Err(Error::io(source, e)),
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => break l,
            }
        };
        let header: CorpusHeader =
            serde_json::from_str(&header_line).map_err(|e| parse_err(line_no, format!("bad header: {e}")))?;
        if header.schema != CORPUS_SCHEMA {
            return Err(Error::Schema { expected: CORPUS_SCHEMA.into(), found: header.schema });
        }
        if header.n_directions != N_DIRECTIONS {
            return Err(parse_err(line_no, format!("n_directions must be {N_DIRECTIONS}")));
        }
        if header.clip_length == 0 {
            return Err(parse_err(line_no, "clip_length must be at least 1".into()));
        }
        let grid = GridSpec {
            frame_width: header.frame_width,
            frame_height: header.frame_height,
            cell_size: header.cell_size,
            n_directions: header.n_directions,
            magnitude_threshold: header.magnitude_threshold.unwrap_or(1.0),
        };
        grid.validate().map_err(|e| parse_err(line_no, e.to_string()))?;
        Ok(CorpusReader {
            lines,
            source: source.to_string(),
            line_no,
            clip_length: header.clip_length,
            header,
            grid,
            last: None,
        })
    }

    pub fn next_clip(&mut self) -> Result<Option<ClipDocument>> {
        loop {
            self.line_no += 1;
            let line = match self.lines.next() {
                None => return Ok(None),
                Some(Err(e)) => return Err(Error::io(&self.source, e)),
                Some(Ok(l)) => l,
            };
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { path: self.source.clone(), line: self.line_no, msg };
            let clip: ClipDocument = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            check_clip(&clip, self.last.as_ref(), &self.grid, self.clip_length).map_err(|e| err(e.to_string()))?;
            self.last = Some(clip.clone());
            return Ok(Some(clip));
        }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<ClipDocument>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_clip().transpose()
    }
}

/// Group per-frame word bags into consecutive clips of `clip_length` frames.
///
/// A trailing partial clip is kept only when it spans at least half a clip.
pub fn segment_clips(frames: &[Vec<VisualWord>], clip_length: u32, grid: GridSpec) -> Result<Corpus> {
    let mut corpus = Corpus::new(grid, clip_length)?;
    let cl = clip_length as usize;
    for (i, chunk) in frames.chunks(cl).enumerate() {
        if chunk.len() < cl && 2 * chunk.len() < cl {
            break;
        }
        let start = (i * cl) as u64;
        let words = chunk.iter().flat_map(|f| f.iter().map(|w| w.0)).collect();
        corpus.push(ClipDocument {
            clip_id: i as u64,
            frame_start: start,
            frame_end: start + chunk.len() as u64,
            words,
        })?;
    }
    Ok(corpus)
}
