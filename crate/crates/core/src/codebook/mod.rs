//! Visual-word codebook: grid layout, direction binning and flow quantization.
//!
//! A word is a (cell, direction) pair. Cells are `cell_size`-pixel squares
//! tiling the frame from the top-left corner; pixels in a partial border cell
//! are ignored. Directions are 8 bins of 45 degrees, bin 0 pointing along +x
//! and bins increasing counterclockwise as seen on screen (image y grows
//! downward, so the angle is measured on `(dx, -dy)`).

mod corpus;
mod flow;

pub use corpus::{segment_clips, ClipDocument, Corpus, CorpusHeader, CorpusReader, CORPUS_SCHEMA};
pub use flow::{decode_flo, encode_flo, read_flo, FlowField, FLO_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of quantized motion directions.
pub const N_DIRECTIONS: u32 = 8;

fn default_cell_size() -> u32 {
    8
}

fn default_directions() -> u32 {
    N_DIRECTIONS
}

fn default_threshold() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub frame_width: u32,
    pub frame_height: u32,
    #[serde(default = "default_cell_size")]
    pub cell_size: u32,
    #[serde(default = "default_directions")]
    pub n_directions: u32,
    /// Minimum averaged flow magnitude (pixels/frame) for a cell to emit a word.
    #[serde(default = "default_threshold")]
    pub magnitude_threshold: f64,
}

impl GridSpec {
    pub fn new(frame_width: u32, frame_height: u32) -> Result<Self> {
        let grid = GridSpec {
            frame_width,
            frame_height,
            cell_size: default_cell_size(),
            n_directions: N_DIRECTIONS,
            magnitude_threshold: default_threshold(),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_cell_size(mut self, cell_size: u32) -> Result<Self> {
        self.cell_size = cell_size;
        self.validate()?;
        Ok(self)
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        self.magnitude_threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_size == 0 {
            return Err(Error::invalid("cell_size must be positive"));
        }
        if self.n_directions != N_DIRECTIONS {
            return Err(Error::invalid(format!(
                "n_directions must be {N_DIRECTIONS}, got {}",
                self.n_directions
            )));
        }
        if self.frame_width < self.cell_size || self.frame_height < self.cell_size {
            return Err(Error::invalid(format!(
                "frame {}x{} smaller than one {}-pixel cell",
                self.frame_width, self.frame_height, self.cell_size
            )));
        }
        if !(self.magnitude_threshold.is_finite() && self.magnitude_threshold >= 0.0) {
            return Err(Error::invalid("magnitude_threshold must be finite and non-negative"));
        }
        // Keep codebook indices inside u32.
        if (self.n_cols() as u64) * (self.n_rows() as u64) * (N_DIRECTIONS as u64) > u32::MAX as u64 {
            return Err(Error::invalid("codebook too large"));
        }
        Ok(())
    }

    pub fn n_cols(&self) -> u32 {
        self.frame_width / self.cell_size
    }

    pub fn n_rows(&self) -> u32 {
        self.frame_height / self.cell_size
    }

    pub fn n_cells(&self) -> usize {
        self.n_cols() as usize * self.n_rows() as usize
    }

    pub fn codebook_size(&self) -> usize {
        self.n_cells() * self.n_directions as usize
    }

    pub fn encode(&self, cell_x: u32, cell_y: u32, direction: u32) -> Result<VisualWord> {
        if cell_x >= self.n_cols() || cell_y >= self.n_rows() || direction >= self.n_directions {
            return Err(Error::invalid(format!(
                "word coordinates ({cell_x}, {cell_y}, {direction}) outside grid"
            )));
        }
        Ok(VisualWord((cell_y * self.n_cols() + cell_x) * self.n_directions + direction))
    }

    pub fn decode(&self, word: VisualWord) -> Result<WordCoords> {
        if word.0 as usize >= self.codebook_size() {
            return Err(Error::invalid(format!(
                "word index {} outside codebook of size {}",
                word.0,
                self.codebook_size()
            )));
        }
        let direction = word.0 % self.n_directions;
        let cell = word.0 / self.n_directions;
        Ok(WordCoords { cell_x: cell % self.n_cols(), cell_y: cell / self.n_cols(), direction })
    }
}

/// Index of a visual word in `[0, codebook_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VisualWord(pub u32);

impl VisualWord {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordCoords {
    pub cell_x: u32,
    pub cell_y: u32,
    pub direction: u32,
}

/// Direction bin for an angle in degrees (counterclockwise from +x).
///
/// Angles exactly on a boundary between two bins go to the lower bin index,
/// so 337.5 degrees (between bins 7 and 0) maps to 0.
pub fn direction_bin_deg(angle_deg: f64) -> u32 {
    let a = angle_deg.rem_euclid(360.0);
    let x = a / 45.0;
    let lo = x.floor();
    let frac = x - lo;
    let lo = lo as u32 % N_DIRECTIONS;
    let hi = (lo + 1) % N_DIRECTIONS;
    if frac < 0.5 {
        lo
    } else if frac > 0.5 {
        hi
    } else {
        lo.min(hi)
    }
}

/// Direction bin of a flow vector in image coordinates (y down).
pub fn direction_bin(dx: f64, dy: f64) -> u32 {
    direction_bin_deg((-dy).atan2(dx).to_degrees())
}

/// Average the flow inside each full cell and emit one word per cell whose
/// mean magnitude exceeds the grid threshold. Words come out in cell order.
pub fn quantize_flow(field: &FlowField, grid: &GridSpec) -> Result<Vec<VisualWord>> {
    grid.validate()?;
    if field.width() != grid.frame_width || field.height() != grid.frame_height {
        return Err(Error::invalid(format!(
            "flow field is {}x{}, grid expects {}x{}",
            field.width(),
            field.height(),
            grid.frame_width,
            grid.frame_height
        )));
    }
    let cs = grid.cell_size as usize;
    let width = grid.frame_width as usize;
    let per_cell = (cs * cs) as f64;
    let mut words = Vec::new();
    for cy in 0..grid.n_rows() {
        for cx in 0..grid.n_cols() {
            let (mut sx, mut sy) = (0.0f64, 0.0f64);
            let y0 = cy as usize * cs;
            let x0 = cx as usize * cs;
            for y in y0..y0 + cs {
                let row = &field.vectors()[y * width + x0..y * width + x0 + cs];
                for v in row {
                    sx += v[0] as f64;
                    sy += v[1] as f64;
                }
            }
            let (mx, my) = (sx / per_cell, sy / per_cell);
            if mx.hypot(my) > grid.magnitude_threshold {
                words.push(grid.encode(cx, cy, direction_bin(mx, my))?);
            }
        }
    }
    Ok(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn codebook_sizes_for_standard_frames() {
        assert_eq!(GridSpec::new(360, 288).unwrap().codebook_size(), 12960);
        assert_eq!(GridSpec::new(720, 480).unwrap().codebook_size(), 43200);
    }

    #[test]
    fn partial_border_cells_are_dropped() {
        let g = GridSpec::new(20, 17).unwrap();
        assert_eq!((g.n_cols(), g.n_rows()), (2, 2));
        assert_eq!(g.codebook_size(), 32);
    }

    #[test]
    fn rejects_frames_smaller_than_a_cell() {
        assert!(GridSpec::new(7, 100).is_err());
        assert!(GridSpec::new(64, 64).unwrap().with_cell_size(0).is_err());
    }

    #[test]
    fn axis_directions() {
        assert_eq!(direction_bin(3.0, 0.0), 0);
        assert_eq!(direction_bin(0.0, -2.0), 2); // up on screen
        assert_eq!(direction_bin(-1.0, 0.0), 4);
        assert_eq!(direction_bin(0.0, 5.0), 6); // down on screen
        assert_eq!(direction_bin(1.0, -1.0), 1);
    }

    #[test]
    fn boundaries_go_to_lower_bin() {
        assert_eq!(direction_bin_deg(22.5), 0);
        assert_eq!(direction_bin_deg(67.5), 1);
        assert_eq!(direction_bin_deg(337.5), 0);
        assert_eq!(direction_bin_deg(-22.5), 0);
        assert_eq!(direction_bin_deg(292.5), 6);
        assert_eq!(direction_bin_deg(22.6), 1);
    }

    #[test]
    fn zero_flow_gives_no_words() {
        let g = GridSpec::new(32, 16).unwrap();
        let f = FlowField::new(32, 16, vec![[0.0, 0.0]; 32 * 16]).unwrap();
        assert!(quantize_flow(&f, &g).unwrap().is_empty());
    }

    #[test]
    fn single_moving_cell() {
        let g = GridSpec::new(32, 16).unwrap();
        let mut v = vec![[0.0f32, 0.0]; 32 * 16];
        // cell (2, 1) covers x in 16..24, y in 8..16
        for y in 8..16 {
            for x in 16..24 {
                v[y * 32 + x] = [3.0, 0.0];
            }
        }
        let f = FlowField::new(32, 16, v).unwrap();
        let words = quantize_flow(&f, &g).unwrap();
        assert_eq!(words, vec![g.encode(2, 1, 0).unwrap()]);
        let c = g.decode(words[0]).unwrap();
        assert_eq!((c.cell_x, c.cell_y, c.direction), (2, 1, 0));
    }

    #[test]
    fn magnitude_must_exceed_threshold() {
        let g = GridSpec::new(8, 8).unwrap();
        let f = FlowField::new(8, 8, vec![[1.0, 0.0]; 64]).unwrap();
        assert!(quantize_flow(&f, &g).unwrap().is_empty());
        let g = g.with_threshold(0.5).unwrap();
        assert_eq!(quantize_flow(&f, &g).unwrap().len(), 1);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let g = GridSpec::new(16, 16).unwrap();
        let f = FlowField::new(8, 8, vec![[0.0, 0.0]; 64]).unwrap();
        assert!(quantize_flow(&f, &g).is_err());
    }

    #[test]
    fn decode_out_of_range() {
        let g = GridSpec::new(16, 16).unwrap();
        assert!(g.decode(VisualWord(32)).is_err());
        assert!(g.encode(2, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_bijection(w in 8u32..400, h in 8u32..300, idx in any::<u32>()) {
            let g = GridSpec::new(w, h).unwrap();
            let word = VisualWord(idx % g.codebook_size() as u32);
            let c = g.decode(word).unwrap();
            prop_assert_eq!(g.encode(c.cell_x, c.cell_y, c.direction).unwrap(), word);
        }

        #[test]
        fn binning_is_total(angle in -1e4f64..1e4) {
            prop_assert!(direction_bin_deg(angle) < N_DIRECTIONS);
        }

        #[test]
        fn bin_centers_are_stable(k in 0u32..8, jitter in -22.4f64..22.4) {
            prop_assert_eq!(direction_bin_deg(k as f64 * 45.0 + jitter), k);
        }
    }
}
