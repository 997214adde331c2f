use cags::geometry::Camera;
use cags::linalg::*;
use cags::scene::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> SceneConfig {
    SceneConfig {
        resolution: 40,
        mesh_resolution: 8,
        frames: 12,
        oracle_gaussians: 256,
        ..SceneConfig::default()
    }
}

/// Nearest hit along the ray through pixel (x, y), as (depth, triangle).
/// Barycentric coordinates must be ≥ −slack.
fn ray_cast(
    mesh: &BlendshapeMesh,
    verts: &[Vec3],
    cam: &Camera,
    x: usize,
    y: usize,
    slack: f64,
) -> Option<(f64, usize)> {
    let origin = cam.center();
    let d_view = [(x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy, 1.0];
    let dir = mat3t_vec(&cam.rotation, d_view);
    let mut best: Option<(f64, usize)> = None;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| verts[i]);
        let (e1, e2) = (sub3(b, a), sub3(c, a));
        let p = cross3(dir, e2);
        let det = dot3(e1, p);
        if det.abs() < 1e-14 {
            continue;
        }
        let s = sub3(origin, a);
        let u = dot3(s, p) / det;
        let q = cross3(s, e1);
        let v = dot3(dir, q) / det;
        let depth = dot3(e2, q) / det;
        if u < -slack || v < -slack || u + v > 1.0 + slack || depth <= 0.0 {
            continue;
        }
        if best.is_none_or(|(d, _)| depth < d) {
            best = Some((depth, t));
        }
    }
    best
}

fn rigid_at(mesh: &BlendshapeMesh, hit: Option<(f64, usize)>) -> bool {
    hit.is_some_and(|(_, t)| mesh.is_rigid_triangle(t))
}

#[test]
fn mask_matches_ray_cast_oracle() {
    let cfg = small();
    let mesh = make_head_scene(&cfg).unwrap();
    let psis = expression_trajectory(&cfg);
    let cam = default_camera(cfg.resolution).unwrap();
    let mut rigid_pixels = 0;
    let mut ambiguous = 0;
    for psi in psis.iter().step_by(3) {
        let verts = deform_mesh(&mesh, psi).unwrap();
        let mask = rigid_mask(&mesh, &verts, &cam);
        assert_eq!(mask.len(), cfg.resolution * cfg.resolution);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let m = mask[y * cam.width + x];
                assert!(m == 0.0 || m == 1.0);
                let strict = rigid_at(&mesh, ray_cast(&mesh, &verts, &cam, x, y, 0.0));
                if (m == 1.0) == strict {
                    rigid_pixels += strict as usize;
                    continue;
                }
                // disagreement is only allowed where the ray grazes an edge
                let loose = rigid_at(&mesh, ray_cast(&mesh, &verts, &cam, x, y, 1e-7));
                let tight = rigid_at(&mesh, ray_cast(&mesh, &verts, &cam, x, y, -1e-7));
                assert_ne!(loose, tight, "pixel ({x}, {y}) disagrees away from any edge");
                ambiguous += 1;
            }
        }
    }
    assert!(rigid_pixels > 0);
    assert!(ambiguous <= 4, "{ambiguous} edge pixels disagree");
}

#[test]
fn last_fifth_is_held_out() {
    for n in [1, 4, 5, 10, 11, 12] {
        let cfg = SceneConfig {
            frames: n,
            resolution: 16,
            ..small()
        };
        let mesh = make_head_scene(&cfg).unwrap();
        let oracle = OracleField::generate(&mesh, &cfg).unwrap();
        let cam = default_camera(cfg.resolution).unwrap();
        let frames = oracle_render_dataset(&mesh, &oracle, &cfg, &[cam]).unwrap();
        assert_eq!(frames.len(), n);
        let n_test = (n as f64 * 0.2).ceil() as usize;
        assert_eq!(cfg.test_frames(), n_test);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.index, i);
            assert_eq!(f.test, i >= n - n_test);
            assert_eq!(f.psi.len(), cfg.expression_dim);
            assert_eq!(f.image.len(), 16 * 16 * 3);
            assert_eq!(f.mask.len(), 16 * 16);
        }
    }
}

#[test]
fn dataset_regeneration_is_bit_identical() {
    let cfg = SceneConfig {
        oracle_detail: 1.0,
        ..small()
    };
    let a = build_dataset(&cfg).unwrap();
    let b = build_dataset(&cfg).unwrap();
    assert_eq!(a.mesh, b.mesh);
    assert_eq!(a.frames, b.frames);
    let other = build_dataset(&SceneConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.frames[3].image, other.frames[3].image);
}

#[test]
fn rest_frame_equals_oracle_render() {
    for detail in [0.0, 1.0] {
        let cfg = SceneConfig {
            oracle_detail: detail,
            ..small()
        };
        let data = build_dataset(&cfg).unwrap();
        let rest = vec![0.0; cfg.expression_dim];
        assert_eq!(data.frames[0].psi, rest);
        let cam = default_camera(cfg.resolution).unwrap();
        let img = data.oracle.render(&data.mesh, &rest, &cam, data.background).unwrap();
        assert_eq!(img.rgb, data.frames[0].image);
        assert!(img.rgb.iter().any(|&v| v > 0.05));
    }
}

#[test]
fn rigid_set_moves_rigidly_under_any_expression() {
    let cfg = small();
    let mesh = make_head_scene(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let r = &mesh.rigid_vertices;
    for _ in 0..20 {
        let psi: Vec<f64> = (0..cfg.expression_dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let d = deform_mesh(&mesh, &psi).unwrap();
        for (i, &a) in r.iter().enumerate() {
            for &b in &r[i + 1..] {
                let before = norm3(sub3(mesh.vertices_rest[a], mesh.vertices_rest[b]));
                let after = norm3(sub3(d[a], d[b]));
                assert!((before - after).abs() <= 1e-12 * before, "{before} vs {after}");
            }
        }
    }
}

#[test]
fn mesh_structure_is_valid() {
    let mesh = make_head_scene(&small()).unwrap();
    let v = mesh.vertices_rest.len();
    assert!(mesh.triangles.iter().flatten().all(|&i| i < v));
    assert_eq!(mesh.uv.len(), v);
    assert!(mesh
        .uv
        .iter()
        .all(|t| (0.0..=1.0).contains(&t[0]) && (0.0..=1.0).contains(&t[1])));
    assert!((norm3(mesh.jaw_axis) - 1.0).abs() < 1e-15);
    assert_eq!(mesh.blendshapes.len(), 8);
    assert!(mesh.blendshapes.iter().all(|b| b.len() == v));
    assert!(mesh.rigid_vertices.windows(2).all(|w| w[0] < w[1]));
    assert!((0..mesh.triangles.len()).any(|t| mesh.is_rigid_triangle(t)));
    assert!(matches!(deform_mesh(&mesh, &[0.0; 3]), Err(cags::Error::Dimension(_))));
    let bad = SceneConfig {
        expression_dim: 6,
        ..small()
    };
    assert!(matches!(make_head_scene(&bad), Err(cags::Error::Config(_))));
}
