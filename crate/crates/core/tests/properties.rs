use std::f64::consts::PI;

use proptest::prelude::*;

use relifusion::autodiff::Tape;
use relifusion::bev::{lift_splat, voxelize, DepthBins, GridConfig, LiftGeometry};
use relifusion::corruption::{drop_object_points, limit_fov, CorruptionKind, CorruptionSpec};
use relifusion::fusion::{Direction, Fusion, FusionConfig, FusionMode};
use relifusion::geometry::{bev_iou, normalize_yaw, Box3D};
use relifusion::head::{nms, Detection};
use relifusion::metrics::average_precision;
use relifusion::nn::{ParamStore, Params};
use relifusion::reliability::contrastive_loss_value;
use relifusion::rng::rng_from;
use relifusion::scene::{sample_lidar, PointCloud, ViewGeometry};
use relifusion::tensor::Tensor;

fn arb_box() -> impl Strategy<Value = Box3D> {
    (-8.0..8.0f64, -8.0..8.0f64, 0.4..4.0f64, 0.4..6.0f64, -PI..PI).prop_map(|(x, y, w, l, yaw)| Box3D {
        center: [x, y, 0.8],
        size: [w, l, 1.6],
        yaw,
        class_id: 0,
        velocity: [0.0, 0.0],
    })
}

fn rigid(b: &Box3D, phi: f64, t: [f64; 2]) -> Box3D {
    let (s, c) = phi.sin_cos();
    let [x, y, z] = b.center;
    Box3D {
        center: [c * x - s * y + t[0], s * x + c * y + t[1], z],
        yaw: normalize_yaw(b.yaw + phi),
        ..b.clone()
    }
}

fn cloud_from(raw: &[(f64, f64, f64, u8)]) -> PointCloud {
    PointCloud::new(
        raw.iter()
            .map(|&(x, y, z, i)| [x as f32, y as f32, z as f32, i as f32 / 256.0])
            .collect(),
    )
}

fn arb_points(n: usize) -> impl Strategy<Value = Vec<(f64, f64, f64, u8)>> {
    prop::collection::vec((-14.0..14.0f64, -14.0..14.0f64, -0.5..3.5f64, any::<u8>()), 0..n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 1..12), 1..8)) {
        let width = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().cycle().take(width).copied()).collect();
        let tape = Tape::new();
        let s = tape.leaf(Tensor::matrix(rows.len(), width, data).unwrap()).softmax_rows().unwrap().tensor();
        for r in 0..rows.len() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sigmoid_open_interval_and_gelu_bounds(xs in prop::collection::vec(-30.0..30.0f64, 1..40)) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs.clone()).unwrap());
        let sig = x.sigmoid().unwrap().tensor();
        let gelu = x.gelu().unwrap().tensor();
        for (i, &v) in xs.iter().enumerate() {
            let s = sig.data()[i];
            prop_assert!(s > 0.0 && s < 1.0, "sigmoid({v}) = {s}");
            let g = gelu.data()[i];
            prop_assert!(g > v.min(0.0) - 0.2 && g <= v.max(0.0), "gelu({v}) = {g}");
        }
    }

    #[test]
    fn iou_symmetric_and_rigid_invariant(a in arb_box(), b in arb_box(), phi in -PI..PI, tx in -20.0..20.0f64, ty in -20.0..20.0f64) {
        let ab = bev_iou(&a, &b).unwrap();
        prop_assert!((ab - bev_iou(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        let moved = bev_iou(&rigid(&a, phi, [tx, ty]), &rigid(&b, phi, [tx, ty])).unwrap();
        prop_assert!((ab - moved).abs() < 1e-9, "{ab} vs {moved}");
    }

    #[test]
    fn nms_survivors_do_not_overlap(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..12), thr in 0.1..0.9f64) {
        let dets: Vec<Detection> = boxes.into_iter().map(|(bbox, score)| Detection { bbox, class_id: 0, score }).collect();
        let kept = nms(dets, thr);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(bev_iou(&kept[i].bbox, &kept[j].bbox).unwrap() < thr);
            }
        }
    }

    #[test]
    fn ap_ignores_detection_order(
        dets in prop::collection::vec(arb_box(), 0..6),
        gt in prop::collection::vec(arb_box(), 0..4),
        seed in any::<u64>(),
    ) {
        // distinct scores so ranking is fully determined
        let scored: Vec<(f64, Box3D)> = dets.into_iter().enumerate().map(|(i, b)| (1.0 - i as f64 * 0.1, b)).collect();
        let mut shuffled = scored.clone();
        let mut rng = rng_from(seed);
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let (x, y) = (average_precision(&scored, &gt, 0.5), average_precision(&shuffled, &gt, 0.5));
        prop_assert_eq!(x, y);
        if let Some(v) = x {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn voxelize_ignores_point_order(raw in arb_points(200), seed in any::<u64>()) {
        let cloud = cloud_from(&raw);
        let mut perm = raw.clone();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng_from(seed));
        let cfg = GridConfig::default();
        prop_assert_eq!(voxelize(&cloud, &cfg).unwrap().features, voxelize(&cloud_from(&perm), &cfg).unwrap().features);
    }

    #[test]
    fn nested_fov_equals_intersection(raw in arb_points(200), a in -PI..PI, b in -PI..PI, f1 in 0.0..1.0f64, f2 in 0.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let inner_lo = lo + (hi - lo) * f1.min(f2);
        let inner_hi = lo + (hi - lo) * f1.max(f2);
        let cloud = cloud_from(&raw);
        let twice = limit_fov(&limit_fov(&cloud, lo, hi).unwrap(), inner_lo, inner_hi).unwrap();
        prop_assert_eq!(twice, limit_fov(&cloud, inner_lo, inner_hi).unwrap());
    }

    #[test]
    fn fov_severity_monotone(w1 in 0.0..2.0 * PI, w2 in 0.0..2.0 * PI) {
        let spec = |w: f64| CorruptionSpec::new(CorruptionKind::LimitedFov { theta_min: -w / 2.0, theta_max: w / 2.0 }, 0).unwrap();
        let (narrow, wide) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        let (s_narrow, s_wide) = (spec(narrow).severity(), spec(wide).severity());
        prop_assert!((0.0..=1.0).contains(&s_narrow) && (0.0..=1.0).contains(&s_wide));
        prop_assert!(s_narrow >= s_wide);
    }

    #[test]
    fn object_drop_exact_count(boxes in prop::collection::vec(arb_box(), 1..4), rate in 0.0..=1.0f64, seed in any::<u64>()) {
        let cloud = sample_lidar(&boxes, 600, 0.0, seed);
        let inside = |c: &PointCloud, b: &Box3D| c.points.iter().filter(|p| b.contains([p[0] as f64, p[1] as f64, p[2] as f64], 0.0)).count();
        let dropped = drop_object_points(&cloud, &boxes, rate, seed).unwrap();
        prop_assert!(dropped.len() <= cloud.len());
        prop_assert_eq!(&dropped, &drop_object_points(&cloud, &boxes, rate, seed).unwrap());
        // exact counts hold for boxes that overlap no other box
        for (k, b) in boxes.iter().enumerate() {
            if boxes[..k].iter().any(|o| bev_iou(o, b).unwrap() > 0.0) || boxes[k + 1..].iter().any(|o| bev_iou(o, b).unwrap() > 0.0) {
                continue;
            }
            let n = inside(&cloud, b);
            prop_assert_eq!(inside(&dropped, b), n - (rate * n as f64).floor() as usize);
        }
    }

    #[test]
    fn tagged_points_lie_in_their_box(boxes in prop::collection::vec(arb_box(), 0..4), seed in any::<u64>()) {
        let cloud = sample_lidar(&boxes, 400, 0.05, seed);
        for (p, tag) in cloud.points.iter().zip(&cloud.box_tags) {
            if let Some(k) = tag {
                prop_assert!(boxes[*k as usize].contains([p[0] as f64, p[1] as f64, p[2] as f64], 1e-6));
            }
        }
    }

    #[test]
    fn every_azimuth_has_one_view(az in -10.0..10.0f64) {
        let v = ViewGeometry::view_of_azimuth(az);
        prop_assert!(v < 6);
        let offset = normalize_yaw(az - ViewGeometry::view_center(v));
        prop_assert!((-PI / 6.0 - 1e-12..PI / 6.0 + 1e-12).contains(&offset));
    }

    #[test]
    fn contrastive_nonnegative_and_monotone_in_diagonal(sims in prop::collection::vec(-0.45..0.95f64, 2..5), drop in 0.01..0.5f64) {
        // lidar row i = s_i·e_i + sqrt(1 - s_i²)·e_{k+i}; camera row j = e_j, so
        // similarities are diag(s) with zero off-diagonals.
        let k = sims.len();
        let build = |s: &[f64]| {
            let mut l = vec![0.0; k * 2 * k];
            for (i, &v) in s.iter().enumerate() {
                l[i * 2 * k + i] = v;
                l[i * 2 * k + k + i] = (1.0 - v * v).sqrt();
            }
            Tensor::matrix(k, 2 * k, l).unwrap()
        };
        let mut cam = vec![0.0; k * 2 * k];
        for j in 0..k {
            cam[j * 2 * k + j] = 1.0;
        }
        let cam = Tensor::matrix(k, 2 * k, cam).unwrap();
        let base = contrastive_loss_value(&build(&sims), &cam, 0.07).unwrap();
        prop_assert!(base >= 0.0);
        let mut lower = sims.clone();
        lower[0] -= drop;
        prop_assert!(contrastive_loss_value(&build(&lower), &cam, 0.07).unwrap() > base);
    }

    #[test]
    fn splat_conserves_mass(seed in any::<u64>()) {
        use rand::Rng;
        let view = ViewGeometry::default();
        let geom = LiftGeometry::new(&view, &DepthBins::default(), &GridConfig::default()).unwrap();
        let mut rng = rng_from(seed);
        let [c, h, w] = view.view_shape();
        let views: Vec<Tensor> = (0..6)
            .map(|_| Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let bins = DepthBins::default().count;
        let mut depth = Vec::with_capacity(geom.columns() * bins);
        for _ in 0..geom.columns() {
            let raw: Vec<f64> = (0..bins).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            depth.extend(raw.iter().map(|v| v / total));
        }
        let depth = Tensor::new(&[geom.columns(), bins], depth).unwrap();
        let lifted: f64 = views.iter().map(|v| v.sum()).sum::<f64>() / h as f64;
        let g = lift_splat(&views, &depth, &geom).unwrap();
        prop_assert!((g.features.sum() - lifted).abs() < 1e-9 * lifted.max(1.0), "{} vs {lifted}", g.features.sum());
    }

    #[test]
    fn fusion_linear_in_each_confidence(seed in any::<u64>(), c_l in 0.0..1.0f64, c_c in 0.0..1.0f64) {
        use rand::Rng;
        let grid = GridConfig::square(8.0, 3);
        let fusion = Fusion::new(FusionConfig { mode: FusionMode::CwMca, d_k: 4, ..FusionConfig::default() }, 3, &grid).unwrap();
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed);
        fusion.init(&mut store, &mut rng);
        let mut tokens = || Tensor::new(&[9, 3], (0..27).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let (lidar, camera) = (tokens(), tokens());
        let tape = Tape::new();
        let p = Params::new(&tape, &store);
        let (l, c) = (tape.leaf(lidar), tape.leaf(camera));
        let s = |v: f64| tape.leaf(Tensor::scalar(v));
        let l2c = |conf: f64| fusion.cross_attend(&p, c, l, s(conf), Direction::LidarToCamera).unwrap().tensor();
        let c2l = |conf: f64| fusion.cross_attend(&p, l, c, s(conf), Direction::CameraToLidar).unwrap().tensor();
        prop_assert_eq!(l2c(2.0 * c_l), l2c(c_l).map(|v| 2.0 * v));
        prop_assert_eq!(c2l(2.0 * c_c), c2l(c_c).map(|v| 2.0 * v));
        let fused = fusion.forward(&p, l, c, s(c_l), s(c_c)).unwrap().tensor();
        let (a, b) = (l2c(c_l), c2l(c_c));
        let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        prop_assert_eq!(fused.data(), &sum[..]);
    }
}
