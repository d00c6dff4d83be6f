use crate::error::{Error, Result};
use crate::tensor::FrameStack;

fn channel_moments(video: &FrameStack, ch: usize) -> (f64, f64) {
    let c = video.dim(3);
    let count = (video.numel() / c) as f64;
    let mean = video.data().iter().skip(ch).step_by(c).sum::<f64>() / count;
    let var = video
        .data()
        .iter()
        .skip(ch)
        .step_by(c)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    (mean, var)
}

/// Matches each channel's mean and variance over the whole video to `reference`.
/// A constant output channel is only shifted to the reference mean.
pub fn color_correct(output: &FrameStack, reference: &FrameStack) -> Result<FrameStack> {
    if output.shape() != reference.shape() || output.rank() != 4 {
        return Err(Error::shape("color_correct", output.shape(), reference.shape()));
    }
    let c = output.dim(3);
    let mut out = output.clone();
    for ch in 0..c {
        let (mo, vo) = channel_moments(output, ch);
        let (mr, vr) = channel_moments(reference, ch);
        let gain = if vo > 0.0 { (vr / vo).sqrt() } else { 0.0 };
        for v in out.data_mut().iter_mut().skip(ch).step_by(c) {
            *v = if vo > 0.0 { (*v - mo) * gain + mr } else { *v - mo + mr };
        }
    }
    Ok(out)
}
