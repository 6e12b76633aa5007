use pushplan::control::{track, TrackConfig};
use pushplan::geom2d::Pose2;
use pushplan::harness::generate_scene;
use pushplan::planner::{plan, PlanParams};
use pushplan::scalar::wrap_angle;
use pushplan::simulator::{DisturbanceSchedule, WorldState};

#[test]
fn planned_and_tracked_episode_ends_in_the_goal() {
    for seed in 0..2 {
        let mut scene = generate_scene(4, seed).unwrap();
        scene.slider.mu_p = 0.1;
        let params = PlanParams { seed, ..PlanParams::default() };
        let p = plan(&scene.plan_task(params.clone()).unwrap()).unwrap();
        assert!(p.success);
        let world = scene.world().unwrap();
        let cfg = TrackConfig {
            plan_dt: params.tau_lqr,
            ..TrackConfig::default()
        };
        let log = track(&world, WorldState::initial(&world, p.states[0]), &p, &cfg, &DisturbanceSchedule::default()).unwrap();
        assert!(log.fault.is_none());
        let end: Pose2<f64> = log.final_state.slider.pose;
        let g = &scene.goal;
        assert!((end.x - g.center.x).abs() <= g.tolerance[0], "{end:?}");
        assert!((end.y - g.center.y).abs() <= g.tolerance[1], "{end:?}");
        assert!(wrap_angle(end.theta - g.center.theta).abs() <= g.tolerance[2], "{end:?}");
    }
}
