use ignition::render::{render, CameraParams, Frame, FrameSize};
use ignition::track::{Point, TrackSpec, DEFAULT_DS};
use ignition::vehicle::CarState;
use rand::Rng;

/// A pose near the track: anywhere along it, up to 3 m past either edge,
/// heading within ±0.4 rad of the local tangent.
pub fn random_state(track: &TrackSpec, rng: &mut impl Rng) -> CarState {
    let k = rng.gen_range(0..track.len());
    let tangent = track.tangent(k);
    let c = track.sample(k);
    let offset = rng.gen_range(-(track.width / 2.0 + 3.0)..=track.width / 2.0 + 3.0);
    let position = Point::new(c.x - offset * tangent.sin(), c.y + offset * tangent.cos());
    CarState::at_rest(position, tangent + rng.gen_range(-0.4..=0.4))
}

/// The track rebuilt in the car's frame (car at the origin facing +x) and
/// its reflection across the car's heading axis. In this frame the
/// reflection is a sign flip of y, which floating point represents exactly.
pub fn car_frame_pair(track: &TrackSpec, state: &CarState) -> (TrackSpec, TrackSpec, CarState) {
    let (sin, cos) = state.heading.sin_cos();
    let local: Vec<Point> = track
        .control_points
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - state.x, p.y - state.y);
            Point::new(dx * cos + dy * sin, -dx * sin + dy * cos)
        })
        .collect();
    let mirrored: Vec<Point> = local.iter().map(|p| Point::new(p.x, -p.y)).collect();
    let a = TrackSpec::build(&track.name, &local, track.width, DEFAULT_DS).expect("local track");
    let b = TrackSpec::build(&track.name, &mirrored, track.width, DEFAULT_DS).expect("mirrored track");
    (a, b, CarState { x: 0.0, y: 0.0, heading: 0.0, ..*state })
}

/// Noise-free frames of the world and of the mirrored world from the same pose.
pub fn mirror_frames(track: &TrackSpec, state: &CarState, size: FrameSize) -> (Frame, Frame) {
    let (world, mirrored, car) = car_frame_pair(track, state);
    let cam = CameraParams::default().noiseless();
    (render(&world, &car, &cam, size, 0).unwrap(), render(&mirrored, &car, &cam, size, 0).unwrap())
}
