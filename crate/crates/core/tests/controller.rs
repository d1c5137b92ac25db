use ignition::controller::{drive, DriveConfig, Driver};
use ignition::oracle::{run_oracle_lap, OracleParams, DEFAULT_LAP_STEP_BUDGET};
use ignition::track::{bundled_track, BUNDLED_TRACKS};
use ignition::vehicle::{CarParams, PHYSICS_DT};

#[test]
fn oracle_in_the_loop_laps_every_bundled_track_without_help() {
    for name in BUNDLED_TRACKS {
        let track = bundled_track(name).unwrap();
        let (car, op) = (CarParams::default(), OracleParams::default());
        let lap_s = run_oracle_lap(&track, &car, &op, DEFAULT_LAP_STEP_BUDGET).unwrap().len() as f64 * PHYSICS_DT;
        let cfg = DriveConfig { duration_s: (lap_s * 1.3).ceil(), seed: 1, ..Default::default() };
        let out = drive(Driver::Oracle, &track, &car, &op, &cfg, None).unwrap();
        println!("{name}: 100 Hz lap {lap_s:.1}s, 10 Hz {:?}", out.report);
        assert!(out.report.laps_completed >= 1.0, "{name}: {:?}", out.report);
        assert_eq!(out.report.interventions, 0, "{name}");
        assert_eq!(out.report.off_track_time_s, 0.0, "{name}");
        assert!(out.report.accel_agreement > 0.99 && out.report.mean_abs_steer_error_deg < 1e-9);
    }
}
