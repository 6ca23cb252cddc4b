//! Motion latents: assembly, flattening, 4→5 interpolation, and file I/O.
//!
//! Run with `cargo run --example motion_windows`.

use teller::motion::{
    assemble, flatten_window, interpolate_4_to_5, MotionClip, MotionLatent, MotionWindow,
};

fn main() -> teller::Result<()> {
    // a frame is 21 keypoint deformations, 3 pose rows, 1 expression offset
    let mut deformations = [[0.0f32; 3]; 21];
    deformations[0] = [0.01, -0.02, 0.005];
    let pose = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let frame = assemble(deformations, pose, [0.001, 0.0, -0.004])?;
    println!("one frame flattens to {} values", frame.flatten().len());

    // windows pair four 20 Hz frames with one 200ms audio chunk
    let frames: Vec<MotionLatent> = (0..4)
        .map(|i| {
            let mut f = frame.clone();
            f.expression_offset[0] = i as f32 * 0.01;
            f
        })
        .collect();
    let window = MotionWindow::new(frames, 20.0)?;
    println!("window of 4 flattens to {} values", flatten_window(&window).len());

    // linear resampling to the 25 fps output rate, endpoints preserved
    let five = interpolate_4_to_5(&window)?;
    println!(
        "interpolated to {} frames at {} Hz; first offset {:.3}, last {:.3}",
        five.frames.len(),
        five.frame_rate_hz,
        five.frames[0].expression_offset[0],
        five.frames[4].expression_offset[0],
    );

    // binary container round trip
    let dir = std::env::temp_dir().join("teller_motion_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("clip.tmlt");
    MotionClip::new(five.frames.clone(), five.frame_rate_hz).save(&path)?;
    let back = MotionClip::load(&path)?;
    println!("round-tripped {} frames through {}", back.frames.len(), path.display());
    Ok(())
}
