use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    /// Frames of the video covered, excluding tail padding.
    pub length: usize,
    /// Leading frames shared with the previous segment.
    pub overlap: usize,
}

/// Fixed-length windows over a video. The last window may run past the end;
/// its missing frames are filled by repeating the final frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub segments: Vec<Segment>,
    pub segment_len: usize,
    pub overlap: usize,
    pub total_frames: usize,
}

impl SegmentPlan {
    pub fn new(total_frames: usize, segment_len: usize, overlap: usize) -> Result<Self> {
        if segment_len == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        if overlap >= segment_len {
            return Err(Error::Config(format!(
                "overlap {overlap} must be smaller than segment length {segment_len}"
            )));
        }
        if total_frames == 0 {
            return Err(Error::Data("video has no frames".into()));
        }
        let stride = segment_len - overlap;
        let mut segments = Vec::new();
        let mut start = 0;
        loop {
            let length = segment_len.min(total_frames - start);
            let ov = if segments.is_empty() { 0 } else { overlap };
            segments.push(Segment {
                start,
                length,
                overlap: ov,
            });
            if start + segment_len >= total_frames {
                break;
            }
            start += stride;
        }
        Ok(SegmentPlan {
            segments,
            segment_len,
            overlap,
            total_frames,
        })
    }

    /// Non-overlapping plan for training; the length must divide evenly.
    pub fn training(total_frames: usize, segment_len: usize) -> Result<Self> {
        if segment_len == 0 || total_frames == 0 || total_frames % segment_len != 0 {
            return Err(Error::Data(format!(
                "video of {total_frames} frames is not a multiple of segment length {segment_len}"
            )));
        }
        Self::new(total_frames, segment_len, 0)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Source frame index for each of the `segment_len` slots of segment `k`.
    pub fn frame_indices(&self, k: usize) -> Vec<usize> {
        let s = self.segments[k];
        (0..self.segment_len)
            .map(|j| (s.start + j).min(self.total_frames - 1))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_one_on_24_frames() {
        let p = SegmentPlan::new(24, 8, 1).unwrap();
        let starts: Vec<usize> = p.segments.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![0, 7, 14, 21]);
        assert_eq!(p.segments[3].length, 3);
        assert_eq!(p.frame_indices(3), vec![21, 22, 23, 23, 23, 23, 23, 23]);
        assert_eq!(p.segments[0].overlap, 0);
        assert!(p.segments[1..].iter().all(|s| s.overlap == 1));
    }

    #[test]
    fn single_segment_when_short() {
        let p = SegmentPlan::new(5, 8, 1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.segments[0].length, 5);
    }

    #[test]
    fn training_plan_requires_multiple() {
        assert!(SegmentPlan::training(16, 8).is_ok());
        assert!(matches!(SegmentPlan::training(12, 8), Err(Error::Data(_))));
    }

    #[test]
    fn overlap_must_be_smaller() {
        assert!(SegmentPlan::new(10, 4, 4).is_err());
    }
}
