//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! with the measured values before asserting.

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use occugrasp::data::{
    generate_dataset, generate_sample, input_points, load_dataset, save_sample, LabelConfig, ObservationConfig,
};
use occugrasp::eval::{aggregate, evaluate, metrics_csv, EvalConfig};
use occugrasp::geometry::{default_endpoints, quat_to_matrix, slerp_frames, Quaternion, RotationMatrix, Vec3};
use occugrasp::grasp::{collision_filter, pose_nms, GraspPose, GripperSpec};
use occugrasp::io::write_ckpt1;
use occugrasp::model::{InferOptions, Model, ModelConfig, QueryMode, DENSE_CELLS};
use occugrasp::nn::{check_gradients, random_indices, random_readout, LearnableMap, MapKind, Tape, Tensor, FD_STEP};
use occugrasp::occupancy::{build_region, Candidate, GraspRegionSpec};
use occugrasp::pointcloud::{voxel_key, VoxelKey};
use occugrasp::rng;
use occugrasp::study::{paired_ordering, Study, StudyBudget, StudyOutcome, Variant};
use occugrasp::train::{loss_gradient_check, train, TrainConfig, TrainScene, TrainState};
use occugrasp::triplane::{bilinear_taps, GroupProjection, OpCounters};

fn report(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_unit_quaternion(r: &mut rng::Rng) -> Quaternion {
    let mut g = || -> f64 { StandardNormal.sample(r) };
    Quaternion::new(g(), g(), g(), g()).normalized()
}

fn max_abs_diff(a: &RotationMatrix, b: &[[f64; 3]; 3]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((a.0[(i, j)] - v).abs());
        }
    }
    m
}

#[test]
#[allow(clippy::approx_constant)]
fn criterion_1_frame_geometry() {
    let start = Instant::now();
    let (q1, q2) = default_endpoints();
    let k1 = slerp_frames(&q1, &q2, 1).unwrap();
    let single = k1.k() == 1 && k1.quaternions[0].to_array() == q1.to_array();

    let k2 = slerp_frames(&q1, &q2, 2).unwrap();
    let want = [0.70711, 0.40825, 0.40825, 0.40825];
    let mid = k2.quaternions[1].to_array();
    let half_step = mid.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-5);

    let ident = max_abs_diff(
        &quat_to_matrix(&Quaternion::new(1.0, 0.0, 0.0, 0.0)).unwrap(),
        &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    );
    let flip = max_abs_diff(
        &quat_to_matrix(&Quaternion::new(0.0, 1.0, 0.0, 0.0)).unwrap(),
        &[[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
    );

    let mut r = rng::seeded(1);
    let mut worst_orth: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    for _ in 0..10_000 {
        let m = quat_to_matrix(&random_unit_quaternion(&mut r)).unwrap();
        let rtr = m.0.transpose() * m.0;
        worst_orth = worst_orth.max((rtr - nalgebra::Matrix3::identity()).abs().max());
        worst_det = worst_det.max((m.0.determinant() - 1.0).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass =
        single && half_step && ident == 0.0 && flip == 0.0 && worst_orth < 1e-9 && worst_det < 1e-9 && secs < 5.0;
    report(
        1,
        pass,
        format!("K=1 {single}, K=2 mid {mid:.5?}, |RᵀR-I| {worst_orth:.1e}, |det-1| {worst_det:.1e}, {secs:.2}s"),
    );
    assert!(pass);
}

fn map_check(kind: MapKind, shape: &[usize], seed: u64) -> f64 {
    let map = LearnableMap::init(kind, seed);
    let mut r = rng::seeded(seed + 1);
    let n = shape.iter().product();
    let input = Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let idx = random_indices(map.params.len(), 25, seed + 2);
    check_gradients(&map.params, &idx, FD_STEP, |tape: &mut Tape, p: &[f64]| {
        let mut m = map.clone();
        m.params = p.to_vec();
        let x = tape.input(input.clone());
        let y = m.forward_on(tape, x, 0)?;
        random_readout(tape, y, seed + 3)
    })
    .unwrap()
    .worst
}

#[test]
fn criterion_2_gradients() {
    let start = Instant::now();
    let mlp = map_check(MapKind::Mlp { widths: vec![6, 8, 5, 2] }, &[10, 6], 31);
    let plane = map_check(MapKind::PlaneEncoder { c_in: 4, hidden: 5, c_out: 3 }, &[4, 6, 7], 32);

    let cfg = ModelConfig { directions: 8, ..ModelConfig::tiny() };
    let model = Model::new(cfg, 33).unwrap();
    let sample = generate_sample(34, &ObservationConfig::default(), cfg.pad(), cfg.region.v).unwrap();
    let labels = LabelConfig { points: 256, pool: 4, affordance_points: 16, directions: 8, ..Default::default() };
    let scene = TrainScene::label(&sample, &labels).unwrap();
    let tc = TrainConfig { steps: 0, batch: 1, candidates: 2, occ_samples: 256, labels, ..Default::default() };
    let idx = random_indices(model.param_count(), 20, 35);
    let e2e = loss_gradient_check(&model, &scene, &tc, 36, &idx, FD_STEP).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let pass = mlp < 1e-4 && plane < 1e-4 && e2e.worst < 1e-4 && secs < 60.0;
    report(
        2,
        pass,
        format!(
            "worst relative error mlp {mlp:.1e}, plane encoder {plane:.1e}, end-to-end {:.1e} ({} significant of {}), {secs:.1}s",
            e2e.worst, e2e.significant, e2e.checked
        ),
    );
    assert!(pass);
}

fn random_rotation(r: &mut rng::Rng) -> RotationMatrix {
    quat_to_matrix(&random_unit_quaternion(r)).unwrap()
}

fn random_point(r: &mut rng::Rng, half: f64) -> Vec3 {
    Vec3::new(r.random_range(-half..half), r.random_range(-half..half), r.random_range(-half..half))
}

/// Every voxel of a box around all candidates, kept when some cylinder
/// contains its centre.
fn region_oracle(cands: &[Candidate], spec: &GraspRegionSpec) -> HashSet<VoxelKey> {
    let reach = spec.reach() + spec.v;
    let lo = cands.iter().fold(Vec3::repeat(f64::INFINITY), |a, c| a.inf(&c.point)) - Vec3::repeat(reach);
    let hi = cands.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, c| a.sup(&c.point)) + Vec3::repeat(reach);
    let first = lo.map(|x| (x / spec.v).floor() as i64);
    let last = hi.map(|x| (x / spec.v).ceil() as i64);
    let mut out = HashSet::new();
    for i in first.x..=last.x {
        for j in first.y..=last.y {
            for k in first.z..=last.z {
                let c = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * spec.v;
                if cands.iter().any(|cd| {
                    let l = cd.rotation.0.transpose() * (c - cd.point);
                    l.x.hypot(l.y) <= spec.r && l.z >= spec.d_min && l.z <= spec.d_max
                }) {
                    out.insert([i, j, k]);
                }
            }
        }
    }
    out
}

fn region_matches(r: &mut rng::Rng) -> bool {
    let spec = GraspRegionSpec::default();
    let n = r.random_range(1..6);
    let cands: Vec<Candidate> =
        (0..n).map(|_| Candidate { point: random_point(r, 0.08), rotation: random_rotation(r) }).collect();
    let region = build_region(&cands, &spec, 1 << 20).unwrap();
    let got: HashSet<VoxelKey> = region.voxels.iter().copied().collect();
    let owners_ok = region.centers.iter().zip(&region.owner).all(|(c, &o)| {
        let d = |i: usize| (cands[i].point - c).norm();
        (0..n).all(|i| d(o) <= d(i))
    });
    got.len() == region.len() && got == region_oracle(&cands, &spec) && owners_ok
}

/// Cell of every point found by scanning the cell edges.
fn binning_matches(r: &mut rng::Rng) -> bool {
    let n = r.random_range(1..40);
    let points: Vec<Vec3> = (0..n).map(|_| random_point(r, 0.2)).collect();
    let rot = random_rotation(r);
    let (h, w) = (r.random_range(2..9), r.random_range(2..9));
    let pad = r.random_range(0.0..0.05);
    let proj = GroupProjection::new(&points, &rot, 0, (h, w), pad, &OpCounters::default()).unwrap();
    let rotated: Vec<Vec3> = points.iter().map(|p| rot.0 * p).collect();
    let lo = rotated.iter().fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p)) - Vec3::repeat(pad);
    let hi = rotated.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p)) + Vec3::repeat(pad);
    let scan = |x: f64, cells: usize| (0..cells).rev().find(|&c| x >= c as f64 / cells as f64).unwrap_or(0);
    (0..3).all(|plane| {
        let (a, b) = [(1, 2), (0, 2), (0, 1)][plane];
        rotated.iter().enumerate().all(|(i, p)| {
            let norm = |x: usize| if hi[x] > lo[x] { (p[x] - lo[x]) / (hi[x] - lo[x]) } else { 0.5 };
            let (u, v) = (norm(a), norm(b));
            proj.cells[plane][i] == scan(v, h) * w + scan(u, w)
        })
    })
}

/// Tent-weighted sum over every cell centre, with the query clamped to the
/// centre lattice.
fn bilinear_matches(r: &mut rng::Rng) -> bool {
    let (c, h, w) = (r.random_range(1..4), r.random_range(2..7), r.random_range(2..7));
    let data: Vec<f64> = (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    let queries: Vec<(f64, f64)> = (0..8).map(|_| (r.random_range(0.0..=1.0), r.random_range(0.0..=1.0))).collect();
    let mut tape = Tape::new();
    let plane = tape.input(Tensor::new(vec![c, h, w], data.clone()).unwrap());
    let taps = queries.iter().map(|&(u, v)| bilinear_taps(u, v, h, w)).collect();
    let out = tape.bilinear(plane, taps).unwrap();
    let got = tape.value(out).clone();
    queries.iter().enumerate().all(|(q, &(u, v))| {
        let x = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let y = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        (0..c).all(|ch| {
            let mut s = 0.0;
            for row in 0..h {
                for col in 0..w {
                    let t = (1.0 - (x - col as f64).abs()).max(0.0) * (1.0 - (y - row as f64).abs()).max(0.0);
                    s += t * data[ch * h * w + row * w + col];
                }
            }
            (got.data[q * c + ch] - s).abs() < 1e-12
        })
    })
}

fn random_pose(r: &mut rng::Rng, half: f64) -> GraspPose {
    GraspPose {
        point: random_point(r, half),
        rotation: random_rotation(r),
        rot_idx: r.random_range(0..12),
        depth_idx: r.random_range(0..4),
        width: r.random_range(0.01..0.1),
        score: (r.random_range(0..6) as f64) / 5.0,
    }
}

/// Removes the best remaining pose and everything near it until none or
/// `top` are left; ties go to the lower index.
fn nms_matches(r: &mut rng::Rng) -> bool {
    let n = r.random_range(1..30);
    let poses: Vec<GraspPose> = (0..n).map(|_| random_pose(r, 0.05)).collect();
    let radius = r.random_range(0.0..0.06);
    let top = r.random_range(1..12);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut want = Vec::new();
    while !remaining.is_empty() && want.len() < top {
        let best =
            *remaining.iter().max_by(|&&a, &&b| poses[a].score.total_cmp(&poses[b].score).then(b.cmp(&a))).unwrap();
        want.push(poses[best]);
        remaining.retain(|&i| (poses[i].point - poses[best].point).norm() >= radius);
    }
    pose_nms(&poses, radius, top) == want
}

/// A pose collides when some occupied voxel outside the closing volume
/// holds a body sample.
fn collision_matches(r: &mut rng::Rng) -> bool {
    let gripper = GripperSpec::default();
    let voxel = 0.01;
    let occupied: HashSet<VoxelKey> =
        (0..r.random_range(0..60)).map(|_| voxel_key(&random_point(r, 0.06), voxel)).collect();
    let poses: Vec<GraspPose> = (0..r.random_range(1..8)).map(|_| random_pose(r, 0.04)).collect();
    let want: Vec<GraspPose> = poses
        .iter()
        .filter(|p| {
            let samples: Vec<Vec3> =
                gripper.slabs(p.width).iter().flat_map(|s| s.samples(voxel / 2.0)).map(|l| p.to_world(&l)).collect();
            !occupied.iter().any(|k| {
                let c = Vec3::new(k[0] as f64 + 0.5, k[1] as f64 + 0.5, k[2] as f64 + 0.5) * voxel;
                !gripper.in_closing_volume(&p.to_local(&c), p.width, voxel)
                    && samples.iter().any(|s| (0..3).all(|a| (s[a] / voxel).floor() as i64 == k[a]))
            })
        })
        .copied()
        .collect();
    collision_filter(&poses, &occupied, &gripper, voxel) == want
}

#[test]
fn criterion_3_brute_force_oracles() {
    let mut r = rng::seeded(3);
    let trials = 25;
    let mut counts = Vec::new();
    type Check = fn(&mut rng::Rng) -> bool;
    let checks: [(&str, Check); 5] = [
        ("region", region_matches),
        ("binning", binning_matches),
        ("bilinear", bilinear_matches),
        ("nms", nms_matches),
        ("collision", collision_matches),
    ];
    for (name, check) in checks {
        counts.push((name, (0..trials).filter(|_| check(&mut r)).count()));
    }
    let pass = counts.iter().all(|&(_, c)| c == trials);
    let detail = counts.iter().map(|(n, c)| format!("{n} {c}/{trials}")).collect::<Vec<_>>().join(", ");
    report(3, pass, detail);
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn criterion_4_local_region_budget() {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg, 4).unwrap();
    let samples = generate_dataset(40, 20, &ObservationConfig::default(), cfg.pad(), cfg.region.v).unwrap();
    let limit = DENSE_CELLS.pow(3) / 5;
    let mut largest = 0;
    let (mut local, mut dense) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        let points = input_points(s, 1024).unwrap();
        let opts = InferOptions { candidates: 1024, seed: i as u64, ..Default::default() };
        let l = model.infer(&points, &opts, &OpCounters::default()).unwrap();
        let d = model
            .infer(&points, &InferOptions { mode: QueryMode::Dense(DENSE_CELLS), ..opts }, &OpCounters::default())
            .unwrap();
        largest = largest.max(l.queried_voxels);
        local.push(l.times.query);
        dense.push(d.times.query);
    }
    let (ml, md) = (median(local), median(dense));
    let pass = largest <= limit && ml < md;
    report(4, pass, format!("largest region {largest} <= {limit}, median query {ml:.3}s local vs {md:.3}s dense"));
    assert!(pass);
}

#[test]
fn criterion_5_occupancy_quality() {
    let budget = StudyBudget::full();
    let mut study = Study::new(budget);
    let model = study.train_variant(Variant::Base, 0).unwrap();
    let cfg = EvalConfig { occupancy_only: true, points: budget.train.labels.points, ..budget.eval };
    let test = study.test_set(0, Variant::Base.condition()).unwrap();
    let occ = aggregate(&evaluate(&model, test, &cfg).unwrap()).occupancy.unwrap();
    let pass = occ.iou >= 0.5 && occ.f1 >= 0.6;
    report(
        5,
        pass,
        format!(
            "IOU {:.3} (>= 0.5), F1 {:.3} (>= 0.6) on {} held-out scenes after {} steps on {}",
            occ.iou, occ.f1, budget.test_scenes, budget.train.steps, budget.train_scenes
        ),
    );
    assert!(pass);
}

fn end_to_end_bytes() -> (Vec<u8>, String) {
    let cfg = ModelConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    for (i, s) in
        generate_dataset(90, 3, &ObservationConfig::default(), cfg.pad(), cfg.region.v).unwrap().iter().enumerate()
    {
        save_sample(dir.path(), i, s).unwrap();
    }
    let samples = load_dataset(dir.path()).unwrap();
    let labels =
        LabelConfig { points: 512, pool: 4, affordance_points: 32, directions: cfg.directions, gripper: cfg.gripper };
    let scenes: Vec<TrainScene> = samples[..2].iter().map(|s| TrainScene::label(s, &labels).unwrap()).collect();
    let mut model = Model::new(cfg, 9).unwrap();
    let mut state = TrainState::new(&model);
    let tc = TrainConfig { steps: 5, seed: 9, labels, ..Default::default() };
    train(&mut model, &mut state, &scenes, &tc, |_, _| {}).unwrap();
    let ckpt = write_ckpt1(&model.checkpoint(Some(state.adam)));
    let ec = EvalConfig { points: 512, candidates: 256, seed: 9, ..Default::default() };
    let rows = evaluate(&model, &samples[2..], &ec).unwrap();
    (ckpt, metrics_csv(&rows, &[("seed", "9".into())]))
}

#[test]
fn criterion_9_reproducible_runs() {
    let (c1, m1) = end_to_end_bytes();
    let (c2, m2) = end_to_end_bytes();
    let pass = c1 == c2 && m1 == m2;
    report(
        9,
        pass,
        format!("checkpoint {} bytes identical {}, metrics CSV identical {}", c1.len(), c1 == c2, m1 == m2),
    );
    assert!(pass);
}

/// Per-variant budget of the comparisons (reduced from [`StudyBudget::full`]).
fn study_budget() -> StudyBudget {
    let mut b = StudyBudget::full();
    b.train.steps = 400;
    b.train_scenes = 16;
    b.test_scenes = 8;
    b
}

#[test]
fn criteria_6_to_8_variant_study() {
    let seeds = 0..5u64;
    let mut study = Study::new(study_budget());
    let mut runs: Vec<StudyOutcome> = Vec::new();
    for seed in seeds.clone() {
        for v in Variant::ALL {
            let o = study.run(v, seed).unwrap();
            println!(
                "  seed {seed} {:<16} reference IOU {:.3} AP {:.3} noisy IOU {}",
                v.name(),
                o.iou(),
                o.matched.ap,
                o.noisy_iou().map_or("-".into(), |x| format!("{x:.3}"))
            );
            runs.push(o);
        }
    }
    let of = |v: Variant| -> Vec<StudyOutcome> { runs.iter().filter(|o| o.variant == v).copied().collect() };
    let base = of(Variant::Base);
    let n = base.len();

    let ap = paired_ordering(&base, &of(Variant::NoOccupancy), |o| o.matched.ap);
    let groups = paired_ordering(&base, &of(Variant::SingleGroup), StudyOutcome::iou);
    let density = paired_ordering(&base, &of(Variant::NoDensity), StudyOutcome::iou);
    let ok6 = [ap, groups, density].iter().all(|c| c.0 >= 4);
    let line =
        |name: &str, c: (usize, usize, f64, f64)| format!("{name} {}/{} (mean {:.3} vs {:.3})", c.0, c.1, c.2, c.3);
    report(
        6,
        ok6,
        format!(
            "{}; {}; {}",
            line("AP occupancy >= none", ap),
            line("IOU K=3 >= K=1", groups),
            line("IOU density >= none", density)
        ),
    );

    let multi = paired_ordering(&of(Variant::MultiView), &base, StudyOutcome::iou);
    let ok7 = multi.2 >= multi.3;
    report(
        7,
        ok7,
        format!("mean IOU {} views {:.3} vs single view {:.3}", occugrasp::study::STUDY_VIEWS, multi.2, multi.3),
    );

    let clean = base.iter().map(StudyOutcome::iou).sum::<f64>() / n as f64;
    let noisy = base.iter().map(|o| o.noisy_iou().unwrap()).sum::<f64>() / n as f64;
    let aug = of(Variant::NoiseAugmented).iter().map(StudyOutcome::iou).sum::<f64>() / n as f64;
    let drop = clean - noisy;
    let ok8 = drop > 0.0 && aug - noisy >= drop / 2.0;
    report(8, ok8, format!("mean IOU clean {clean:.3}, noisy {noisy:.3}, noise-augmented on noisy {aug:.3} (recovers {:.0}% of the drop)", 100.0 * (aug - noisy) / drop.max(1e-12)));

    assert!(ok6 && ok7 && ok8);
}
