use std::f64::consts::PI;

use dforge_core::fusion::OccupancyGrid;
use dforge_core::pose::{rotation_residual, CameraPose};
use dforge_core::trajectory::{
    check_feasible, read_trajectory, resample_trajectory, select_director, synthesize_orbit,
    synthesize_trajectory, write_trajectory, DirectorPolicy, MotionKind, MotionPrimitive,
    Trajectory, TrajectorySpec,
};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn composite(primitives: Vec<MotionPrimitive>, n_frames: usize, start: CameraPose) -> Trajectory {
    synthesize_trajectory(&TrajectorySpec {
        primitives,
        n_frames,
        start,
        orbit_center: None,
        orbit_radius: None,
    })
    .unwrap()
}

fn file_bytes(t: &Trajectory) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, t).unwrap();
    buf
}

fn non_orbit_kind() -> impl Strategy<Value = MotionKind> {
    (0usize..12).prop_map(|i| MotionKind::ALL[i])
}

fn start_pose() -> impl Strategy<Value = CameraPose> {
    (
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64),
        (-1.0..1.0f64, -1.0..1.0f64, 0.2..1.0f64),
        -3.0..3.0f64,
    )
        .prop_map(|(p, axis, angle)| {
            let mut pose = CameraPose::at(Vector3::new(p.0, p.1, p.2));
            let axis = nalgebra::Unit::new_normalize(Vector3::new(axis.0, axis.1, axis.2));
            pose.rotation = Rotation3::from_axis_angle(&axis, angle).into_inner();
            pose
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composite_trajectories_round_trip_and_stay_rigid(
        kinds in prop::collection::vec((non_orbit_kind(), 0.05..1.5f64), 1..4),
        extra in 0usize..30,
        start in start_pose(),
    ) {
        let primitives: Vec<_> = kinds.iter().map(|&(k, m)| MotionPrimitive::new(k, m)).collect();
        let n = primitives.len() + 1 + extra;
        let t = composite(primitives, n, start.clone());
        prop_assert_eq!(t.len(), n);
        prop_assert_eq!(&t.poses[0], &start);
        for p in &t.poses {
            prop_assert!(rotation_residual(&p.rotation) < 1e-9);
        }
        let bytes = file_bytes(&t);
        let back = read_trajectory(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back.poses, &t.poses);
        prop_assert_eq!(file_bytes(&back), bytes);
        prop_assert_eq!(t.recipe.build().unwrap().poses, t.poses);
    }

    #[test]
    fn single_translation_moves_along_the_start_axis(
        axis in 0usize..6,
        magnitude in 0.1..3.0f64,
        n in 2usize..40,
        start in start_pose(),
    ) {
        let kind = MotionKind::ALL[axis];
        let t = composite(vec![MotionPrimitive::new(kind, magnitude)], n, start.clone());
        let local = start.rotation.transpose() * (t.poses[n - 1].position - start.position);
        let mut want = Vector3::zeros();
        want[axis / 2] = if axis % 2 == 0 { magnitude } else { -magnitude };
        prop_assert!((local - want).norm() < 1e-9);
        for p in &t.poses {
            prop_assert!((p.rotation - start.rotation).norm() < 1e-12);
        }
    }

    #[test]
    fn single_primitive_is_selected_back(
        kind in non_orbit_kind(),
        magnitude in 0.05..1.0f64,
        start in start_pose(),
    ) {
        let t = composite(vec![MotionPrimitive::new(kind, magnitude)], 2, start);
        let sel = select_director(&t.poses[0], &t.poses[1], &DirectorPolicy::default()).unwrap();
        prop_assert_eq!(sel.kind, kind);
        prop_assert!((sel.magnitude - magnitude).abs() < 1e-9);
    }

    #[test]
    fn resampled_orbit_keeps_radius_and_endpoints(
        radius in 0.5..4.0f64,
        sweep in 0.3..6.2f64,
        n in 3usize..30,
        m in 2usize..80,
    ) {
        let center = Vector3::new(0.2, -0.1, 0.4);
        let orbit = synthesize_orbit(&center, radius, sweep, 0.3, n).unwrap();
        let r = resample_trajectory(&orbit, m).unwrap();
        prop_assert_eq!(r.len(), m);
        prop_assert_eq!(&r.poses[0], &orbit.poses[0]);
        prop_assert_eq!(&r.poses[m - 1], &orbit.poses[n - 1]);
        for p in &r.poses {
            let d = p.position - center;
            prop_assert!((d.xy().norm() - radius).abs() < 1e-9 * radius);
            prop_assert!(d.z.abs() < 1e-9);
        }
    }
}

#[test]
fn orbit_selects_orbit_when_the_scene_is_large() {
    let policy = DirectorPolicy {
        scene_diagonal: 4.0,
        ..DirectorPolicy::default()
    };
    let t = synthesize_orbit(&Vector3::zeros(), 1.0, PI / 2.0, 0.0, 5).unwrap();
    for w in t.poses.windows(2) {
        let sel = select_director(&w[0], &w[1], &policy).unwrap();
        assert_eq!(sel.kind, MotionKind::Orbit);
        assert!((sel.magnitude - PI / 8.0).abs() < 1e-9);
    }
}

fn random_grid(rng: &mut ChaCha8Rng) -> OccupancyGrid {
    let mut grid = OccupancyGrid::empty(Vector3::new(-1.0, -1.0, -1.0), 0.1, [20, 20, 20]);
    for _ in 0..rng.random_range(1..40) {
        let (i, j, k) = (
            rng.random_range(0..20),
            rng.random_range(0..20),
            rng.random_range(0..20),
        );
        grid.set(i, j, k, true);
    }
    grid
}

#[test]
fn feasibility_agrees_with_dense_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..40 {
        let grid = random_grid(&mut rng);
        let start = CameraPose::at(Vector3::new(
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.9..0.9),
            rng.random_range(-0.9..0.9),
        ));
        let kind = MotionKind::ALL[rng.random_range(0..6)];
        let n = rng.random_range(2..12);
        let t = composite(
            vec![MotionPrimitive::new(kind, rng.random_range(0.2..1.2))],
            n,
            start,
        );
        let margin = rng.random_range(0.0..0.15);
        let report = check_feasible(&t, &grid, margin);

        // Dense oracle: fine samples along every segment, attributed the same way.
        let mut first = None;
        let mut min_clear = f64::MAX;
        'outer: for i in 0..n {
            let a = t.poses[i].position;
            let b = t.poses.get(i + 1).map_or(a, |p| p.position);
            for s in 0..=200 {
                let p = a + (b - a) * (s as f64 / 200.0);
                let c = grid.clearance_brute_force(&p);
                min_clear = min_clear.min(c);
                if grid.is_occupied_at(&p) || c < margin {
                    first = Some(if s == 200 && i + 1 < n { i + 1 } else { i });
                    break 'outer;
                }
            }
        }
        // The implementation samples a voxel apart, so it can only miss
        // violations that lie within one voxel of a sampled point.
        if let Some(f) = report.first_violation_frame {
            assert!(
                first.is_some_and(|o| o <= f),
                "reported {f}, oracle {first:?}"
            );
        }
        if first.is_none() {
            assert!(report.feasible);
            assert!(report.min_clearance >= min_clear - 1e-12);
        }
    }
}

#[test]
fn path_through_an_occupied_voxel_is_infeasible() {
    let mut grid = OccupancyGrid::empty(Vector3::new(-1.0, -1.0, -1.0), 0.1, [20, 20, 20]);
    grid.set(15, 10, 10, true);
    let mut start = CameraPose::at(Vector3::new(-0.95, 0.05, 0.05));
    start.rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), PI / 2.0).into_inner();
    let t = composite(
        vec![MotionPrimitive::new(MotionKind::TransZPos, 1.9)],
        5,
        start,
    );
    let report = check_feasible(&t, &grid, 0.0);
    assert!(!report.feasible);
    assert_eq!(report.first_violation_frame, Some(3));
    let empty = OccupancyGrid::empty(Vector3::new(-1.0, -1.0, -1.0), 0.1, [20, 20, 20]);
    assert!(check_feasible(&t, &empty, 0.5).feasible);
}
