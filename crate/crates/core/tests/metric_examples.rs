use stab_core::flow::FallbackFlow;
use stab_core::metrics::{accumulated_flow, cropping_ratio, distortion_value};
use stab_core::raster::Raster;
use stab_core::synth::{pan_clip, Canvas};
use stab_core::Frame;

const SIDE: usize = 96;

/// Frame whose pixel `p` shows the canvas at `map(p)`.
fn render(canvas: &Canvas, map: impl Fn(f64, f64) -> (f64, f64)) -> Frame {
    let r = Raster::from_fn(SIDE, SIDE, 3, |y, x, c| {
        let (u, v) = map(x as f64, y as f64);
        canvas.color(u, v)[c]
    });
    Frame::new(r).unwrap()
}

fn inputs(canvas: &Canvas, n: usize) -> Vec<Frame> {
    (0..n).map(|k| render(canvas, |x, y| (x + 2.0 * k as f64, y))).collect()
}

const CENTER: f64 = (SIDE as f64 - 1.0) / 2.0;

#[test]
fn cropped_and_upscaled_output_scores_its_crop() {
    let canvas = Canvas::random(21);
    let input = inputs(&canvas, 4);
    let output: Vec<Frame> = (0..4)
        .map(|k| {
            render(&canvas, |x, y| {
                (CENTER + 0.8 * (x - CENTER) + 2.0 * k as f64, CENTER + 0.8 * (y - CENTER))
            })
        })
        .collect();
    let c = cropping_ratio(&input, &output, &FallbackFlow::default(), 0).unwrap();
    assert!((c - 0.8).abs() < 0.01, "cropping {c}");
}

#[test]
fn horizontal_stretch_shows_as_distortion() {
    let canvas = Canvas::random(22);
    let input = inputs(&canvas, 3);
    let output: Vec<Frame> = (0..3)
        .map(|k| render(&canvas, |x, y| (CENTER + (x - CENTER) / 1.25 + 2.0 * k as f64, y)))
        .collect();
    let d = distortion_value(&input, &output, &FallbackFlow::default(), 0).unwrap();
    assert!((d - 0.8).abs() < 0.01, "distortion {d}");
}

#[test]
fn global_translation_leaves_cropping_and_distortion_alone() {
    let canvas = Canvas::random(23);
    let input = inputs(&canvas, 4);
    let shifted: Vec<Frame> = (0..4)
        .map(|k| render(&canvas, |x, y| (x + 2.0 * k as f64 - 3.0, y + 2.0)))
        .collect();
    let fb = FallbackFlow::default();
    let c = cropping_ratio(&input, &shifted, &fb, 0).unwrap();
    let d = distortion_value(&input, &shifted, &fb, 0).unwrap();
    assert!((c - 1.0).abs() < 1e-3, "cropping {c}");
    assert!((d - 1.0).abs() < 5e-3, "distortion {d}");
}

#[test]
fn steady_pan_accumulates_its_speed() {
    let clip = pan_clip(&Canvas::random(24), 6, SIDE, SIDE, (1.0, 0.0));
    let a = accumulated_flow(&clip.frames, &FallbackFlow::default()).unwrap();
    let expected = 1.0 / (2.0 * (SIDE * SIDE) as f64).sqrt();
    assert!((a / expected - 1.0).abs() < 0.05, "{a} vs {expected}");
}

#[test]
fn static_video_has_no_motion() {
    let clip = pan_clip(&Canvas::random(25), 4, SIDE, SIDE, (0.0, 0.0));
    assert_eq!(accumulated_flow(&clip.frames, &FallbackFlow::default()).unwrap(), 0.0);
}
