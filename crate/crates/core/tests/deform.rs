use cags::autodiff::{Graph, ParamStore, Tensor};
use cags::deform::*;
use cags::linalg::{axis_angle, mat3_vec, quat_mul, rotmat_to_quat, Quat, Vec3};
use cags::model::{Model, ModelConfig};
use cags::scene::{self, BlendshapeMesh, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quad_mesh() -> BlendshapeMesh {
    let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
    BlendshapeMesh {
        uv: v.iter().map(|p| [p[0], p[1]]).collect(),
        vertices_rest: v,
        triangles: vec![[0, 1, 2], [0, 2, 3]],
        blendshapes: vec![],
        rigid_vertices: vec![],
        jaw_pivot: [0.0; 3],
        jaw_axis: [1.0, 0.0, 0.0],
        expression_dim: 1,
    }
}

fn head() -> (SceneConfig, BlendshapeMesh) {
    let cfg = SceneConfig {
        mesh_resolution: 8,
        ..SceneConfig::default()
    };
    let mesh = scene::make_head_scene(&cfg).unwrap();
    (cfg, mesh)
}

fn fusion(mode: ConditioningMode, tokens: usize) -> FusionConfig {
    FusionConfig {
        mode,
        expression_dim: 16,
        tokens,
        d_k: 8,
        d_v: 6,
        pe_frequencies: 6,
        hidden: vec![16, 16],
    }
}

#[test]
fn positional_encoding_values() {
    let z = positional_encoding([0.0; 3], 6);
    assert_eq!(z.len(), 39);
    assert_eq!(pe_width(6), 39);
    for c in 0..3 {
        let block = &z[c * 13..(c + 1) * 13];
        assert_eq!(block[0], 0.0);
        for k in 0..6 {
            assert_eq!(block[1 + 2 * k], 0.0);
            assert_eq!(block[2 + 2 * k], 1.0);
        }
    }
    let one = positional_encoding([1.0, 0.0, 0.0], 6);
    for k in 0..6 {
        assert!(one[1 + 2 * k].abs() < 1e-12);
        let expect = if k == 0 { -1.0 } else { 1.0 };
        assert!((one[2 + 2 * k] - expect).abs() < 1e-12);
    }
    let half = positional_encoding([0.5, 0.0, 0.0], 6);
    assert!((half[1] - (std::f64::consts::PI * 0.5).sin()).abs() < 1e-15);
}

#[test]
fn tokenize_round_trip_and_errors() {
    let psi: Vec<f64> = (0..16).map(f64::from).collect();
    let t = tokenize_expression(&psi, 4).unwrap();
    assert_eq!(t.shape(), &[4, 4]);
    assert_eq!(t.row(2), &[8.0, 9.0, 10.0, 11.0]);
    assert_eq!(t.data(), psi.as_slice());
    assert!(tokenize_expression(&[0.0; 16], 4)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(matches!(tokenize_expression(&psi, 3), Err(cags::Error::Config(_))));
}

fn attention_setup(tokens: usize, seed: u64) -> (ParamStore, FusionParams, Tensor, Tensor) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = FusionParams::init(fusion(ConditioningMode::CrossAttention, tokens), &mut store, &mut rng).unwrap();
    let pe = Tensor::new(&[5, 39], (0..5 * 39).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let psi: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (store, params, pe, tokenize_expression(&psi, tokens).unwrap())
}

#[test]
fn single_token_attention_is_identity_weight() {
    let (store, params, pe, tokens) = attention_setup(1, 3);
    let mut g = Graph::new();
    let pe_v = g.constant(pe).unwrap();
    let tok_v = g.constant(tokens.clone()).unwrap();
    let out = cross_attention(&mut g, &store, pe_v, tok_v, &params).unwrap();
    assert!(g.value(out.weights).data().iter().all(|&w| w == 1.0));
    let v = cags::autodiff::matmul(&tokens, store.value(params.w_v.unwrap())).unwrap();
    for i in 0..5 {
        assert_eq!(g.value(out.context).row(i), v.row(0));
    }
}

#[test]
fn zero_query_gives_uniform_weights() {
    let (store, params, _, tokens) = attention_setup(4, 4);
    let mut g = Graph::new();
    let pe_v = g.constant(Tensor::zeros(&[3, 39])).unwrap();
    let tok_v = g.constant(tokens.clone()).unwrap();
    let out = cross_attention(&mut g, &store, pe_v, tok_v, &params).unwrap();
    assert!(g.value(out.weights).data().iter().all(|&w| (w - 0.25).abs() < 1e-15));
    let v = cags::autodiff::matmul(&tokens, store.value(params.w_v.unwrap())).unwrap();
    for j in 0..6 {
        let mean = (0..4).map(|t| v.at2(t, j)).sum::<f64>() / 4.0;
        assert!((g.value(out.context).at2(0, j) - mean).abs() < 1e-14);
    }
}

#[test]
fn two_token_attention_matches_hand_softmax() {
    // d_pe = 3 (no frequencies), d_tok = 1, d_k = 1, d_v = 1
    let cfg = FusionConfig {
        mode: ConditioningMode::CrossAttention,
        expression_dim: 2,
        tokens: 2,
        d_k: 1,
        d_v: 1,
        pe_frequencies: 0,
        hidden: vec![],
    };
    let mut store = ParamStore::new();
    let params = FusionParams::init(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    store.get_mut(params.w_q.unwrap()).value = Tensor::new(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
    store.get_mut(params.w_k.unwrap()).value = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    store.get_mut(params.w_v.unwrap()).value = Tensor::new(&[1, 1], vec![2.0]).unwrap();
    let mut g = Graph::new();
    let pe = g.constant(Tensor::new(&[1, 3], vec![2.0, 0.0, 0.0]).unwrap()).unwrap();
    let tok = g.constant(Tensor::new(&[2, 1], vec![0.5, -1.0]).unwrap()).unwrap();
    let out = cross_attention(&mut g, &store, pe, tok, &params).unwrap();
    // q = 2, k = (0.5, -1), scores = (1, -2), v = (1, -2)
    let e0 = 1f64.exp();
    let e1 = (-2f64).exp();
    let w0 = e0 / (e0 + e1);
    let w1 = e1 / (e0 + e1);
    let w = g.value(out.weights).data();
    assert!((w[0] - w0).abs() < 1e-15 && (w[1] - w1).abs() < 1e-15);
    assert!((g.value(out.context).data()[0] - (w0 * 1.0 + w1 * -2.0)).abs() < 1e-15);
}

#[test]
fn attention_rows_are_distributions() {
    for seed in 0..20 {
        let (store, params, pe, tokens) = attention_setup(4, seed);
        let mut g = Graph::new();
        let pe_v = g.constant(pe.map(|v| v * 5.0)).unwrap();
        let tok_v = g.constant(tokens).unwrap();
        let out = cross_attention(&mut g, &store, pe_v, tok_v, &params).unwrap();
        let w = g.value(out.weights);
        for i in 0..5 {
            let row = w.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }
}

#[test]
fn fresh_head_predicts_zero_offsets() {
    for mode in [ConditioningMode::CrossAttention, ConditioningMode::ConcatBaseline] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = FusionParams::init(fusion(mode, 4), &mut store, &mut rng).unwrap();
        let pe = Tensor::new(&[7, 39], (0..7 * 39).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let psi: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let (off, att) = offsets_for_expression(&mut g, &store, &pe, &psi, &params).unwrap();
        assert_eq!(g.value(off).shape(), &[7, OFFSET_WIDTH]);
        assert!(g.value(off).data().iter().all(|&v| v == 0.0));
        assert_eq!(att.is_some(), mode == ConditioningMode::CrossAttention);
    }
}

#[test]
fn offsets_permute_with_gaussians() {
    let (mut store, params, pe, _) = attention_setup(4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (w, b) = *params.mlp.last().unwrap();
    for id in [w, b] {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let psi: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let perm = [3, 0, 4, 1, 2];
    let permuted = Tensor::new(&[5, 39], perm.iter().flat_map(|&i| pe.row(i).to_vec()).collect()).unwrap();
    let mut g = Graph::new();
    let (a, _) = offsets_for_expression(&mut g, &store, &pe, &psi, &params).unwrap();
    let (p, _) = offsets_for_expression(&mut g, &store, &permuted, &psi, &params).unwrap();
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(g.value(p).row(row), g.value(a).row(src));
    }
}

#[test]
fn offset_norm_gradient_matches_finite_differences() {
    let (mut store, params, pe, _) = attention_setup(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (w, b) = *params.mlp.last().unwrap();
    for id in [w, b] {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let psi: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |store: &ParamStore| -> (Graph, cags::autodiff::Var) {
        let mut g = Graph::new();
        let (off, _) = offsets_for_expression(&mut g, store, &pe, &psi, &params).unwrap();
        let dmu = g.slice_cols(off, 0, 3).unwrap();
        let sq = g.square(dmu).unwrap();
        let s = g.sum(sq).unwrap();
        (g, s)
    };
    store.zero_grad();
    let (g, s) = objective(&store);
    g.backward(s, &mut store).unwrap();
    let h = 1e-5;
    for id in params.ids() {
        let len = store.value(id).len();
        for j in (0..len).step_by((len / 12).max(1)) {
            let analytic = store.get(id).grad.data()[j];
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let (g1, s1) = objective(&store);
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let (g2, s2) = objective(&store);
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (g1.value(s1).data()[0] - g2.value(s2).data()[0]) / (2.0 * h);
            let err = cags::gradcheck::relative_error(analytic, numeric);
            assert!(err < 1e-4, "{} [{j}]: {analytic} vs {numeric}", store.get(id).name);
        }
    }
}

fn random_offsets(n: usize, seed: u64, bound: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        &[n, OFFSET_WIDTH],
        (0..n * OFFSET_WIDTH).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .unwrap()
}

fn random_field(n: usize, seed: u64) -> (Vec<Quat>, Vec<Vec3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                1.0,
            ]
        })
        .collect();
    let ls = (0..n)
        .map(|_| {
            [
                rng.gen_range(-4.0..-2.0),
                rng.gen_range(-4.0..-2.0),
                rng.gen_range(-4.0..-2.0),
            ]
        })
        .collect();
    (rot, ls)
}

fn normalized(q: Quat) -> Quat {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

#[test]
fn zero_offsets_on_rest_mesh_is_identity() {
    let (_, mesh) = head();
    let anchors = init_anchors_uv(&mesh, 256).unwrap();
    let binding = AnchorBinding::new(&mesh, anchors).unwrap();
    let (rot, ls) = random_field(binding.len(), 1);
    let mut cache = PoseCache::new(&mesh);
    let zeros = Tensor::zeros(&[binding.len(), OFFSET_WIDTH]);
    let (posed, _) = pose_gaussians(
        &binding,
        &rot,
        &ls,
        &mesh,
        &mesh.vertices_rest,
        Some(&zeros),
        &mut cache,
    )
    .unwrap();
    for i in 0..binding.len() {
        for k in 0..3 {
            assert!((posed.mu[i][k] - binding.canonical_positions[i][k]).abs() < 1e-15);
        }
        let r = normalized(rot[i]);
        for k in 0..4 {
            assert!(
                (posed.rotation[i][k] - r[k]).abs() < 1e-12,
                "{:?} vs {:?}",
                posed.rotation[i],
                r
            );
        }
        assert_eq!(posed.log_scale[i], ls[i]);
    }
}

#[test]
fn rigid_translation_and_rotation_are_equivariant() {
    let (_, mesh) = head();
    let anchors = init_anchors_uv(&mesh, 200).unwrap();
    let binding = AnchorBinding::new(&mesh, anchors).unwrap();
    let n = binding.len();
    let (rot, ls) = random_field(n, 2);
    let offsets = random_offsets(n, 3, 0.05);
    let mut psi = vec![0.0; mesh.expression_dim];
    psi[0] = 0.4;
    psi[mesh.jaw_channel()] = 0.2;
    let deformed = scene::deform_mesh(&mesh, &psi).unwrap();
    let mut cache = PoseCache::new(&mesh);
    let (base, _) = pose_gaussians(&binding, &rot, &ls, &mesh, &deformed, Some(&offsets), &mut cache).unwrap();

    let t = [0.3, -1.2, 0.7];
    let moved: Vec<Vec3> = deformed
        .iter()
        .map(|v| [v[0] + t[0], v[1] + t[1], v[2] + t[2]])
        .collect();
    let (tr, _) = pose_gaussians(
        &binding,
        &rot,
        &ls,
        &mesh,
        &moved,
        Some(&offsets),
        &mut PoseCache::new(&mesh),
    )
    .unwrap();
    for i in 0..n {
        for (k, tk) in t.iter().enumerate() {
            assert!((tr.mu[i][k] - base.mu[i][k] - tk).abs() < 1e-12);
        }
        assert_eq!(tr.log_scale[i], base.log_scale[i]);
    }

    let q = axis_angle(cags::linalg::normalize3([0.2, 1.0, -0.4]).unwrap(), 1.1);
    let q_quat = rotmat_to_quat(&q);
    let rotated: Vec<Vec3> = deformed.iter().map(|v| mat3_vec(&q, *v)).collect();
    let (rr, _) = pose_gaussians(
        &binding,
        &rot,
        &ls,
        &mesh,
        &rotated,
        Some(&offsets),
        &mut PoseCache::new(&mesh),
    )
    .unwrap();
    for i in 0..n {
        let expect = mat3_vec(&q, base.mu[i]);
        for k in 0..3 {
            assert!((rr.mu[i][k] - expect[k]).abs() < 1e-12, "{:?} vs {expect:?}", rr.mu[i]);
        }
        let er = quat_mul(q_quat, base.rotation[i]);
        let same = (0..4).all(|k| (rr.rotation[i][k] - er[k]).abs() < 1e-9);
        let flipped = (0..4).all(|k| (rr.rotation[i][k] + er[k]).abs() < 1e-9);
        assert!(same || flipped, "{:?} vs {:?}", rr.rotation[i], er);
    }
}

#[test]
fn scales_stay_positive_for_any_finite_offset() {
    let (_, mesh) = head();
    let binding = AnchorBinding::new(&mesh, init_anchors_uv(&mesh, 64).unwrap()).unwrap();
    let (rot, ls) = random_field(binding.len(), 4);
    let offsets = random_offsets(binding.len(), 5, 50.0);
    let (posed, _) = pose_gaussians(
        &binding,
        &rot,
        &ls,
        &mesh,
        &mesh.vertices_rest,
        Some(&offsets),
        &mut PoseCache::new(&mesh),
    )
    .unwrap();
    for s in &posed.log_scale {
        assert!(s.iter().all(|v| v.is_finite() && v.exp() > 0.0));
    }
}

#[test]
fn degenerate_triangle_freezes_its_primitives() {
    let mesh = quad_mesh();
    let anchors = vec![
        SurfaceAnchor {
            triangle: 0,
            barycentric: [0.2, 0.5, 0.3],
            normal_offset: 0.1,
        },
        SurfaceAnchor {
            triangle: 1,
            barycentric: [0.3, 0.3, 0.4],
            normal_offset: 0.0,
        },
    ];
    let binding = AnchorBinding::new(&mesh, anchors).unwrap();
    let (rot, ls) = random_field(2, 6);
    let mut cache = PoseCache::new(&mesh);
    let lifted: Vec<Vec3> = mesh.vertices_rest.iter().map(|v| [v[0], v[1], v[2] + 1.0]).collect();
    let (first, _) = pose_gaussians(&binding, &rot, &ls, &mesh, &lifted, None, &mut cache).unwrap();
    assert_eq!(cache.degenerate_events, 0);
    // collapse vertex 1 onto vertex 0: triangle 0 loses its area, triangle 1 is untouched
    let mut collapsed = lifted.clone();
    collapsed[1] = collapsed[0];
    let (second, _) = pose_gaussians(&binding, &rot, &ls, &mesh, &collapsed, None, &mut cache).unwrap();
    assert_eq!(cache.degenerate_events, 1);
    assert_eq!(second.mu[0], first.mu[0]);
    assert_eq!(second.rotation[0], first.rotation[0]);
    assert_eq!(second.mu[1], first.mu[1]);
    assert!(second.mu.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn uv_init_single_triangle_and_tie_break() {
    let mut tri = quad_mesh();
    tri.vertices_rest = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
    tri.uv = vec![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]];
    tri.triangles = vec![[0, 1, 2]];
    let a = init_anchors_uv(&tri, 4).unwrap();
    assert_eq!(a.len(), 4);
    for x in &a {
        x.validate(1).unwrap();
    }

    let quad = quad_mesh();
    let a = init_anchors_uv(&quad, 64).unwrap();
    assert_eq!(a.len(), 64);
    for (idx, anchor) in a.iter().enumerate() {
        let (i, j) = (idx % 8, idx / 8);
        if i == j {
            assert_eq!(
                anchor.triangle, 0,
                "diagonal sample ({i},{j}) must go to the lower index"
            );
        }
    }
}

#[test]
fn uv_init_on_quad_reproduces_bilinear_grid() {
    let quad = quad_mesh();
    let anchors = init_anchors_uv(&quad, 64).unwrap();
    let binding = AnchorBinding::new(&quad, anchors).unwrap();
    for (idx, p) in binding.canonical_positions.iter().enumerate() {
        let (i, j) = (idx % 8, idx / 8);
        let expect = [(i as f64 + 0.5) / 8.0, (j as f64 + 0.5) / 8.0, 0.0];
        for k in 0..3 {
            assert!((p[k] - expect[k]).abs() < 1e-12, "{p:?} vs {expect:?}");
        }
    }
    let empty = BlendshapeMesh { uv: vec![], ..quad };
    assert!(matches!(init_anchors_uv(&empty, 16), Err(cags::Error::Config(_))));
}

#[test]
fn fresh_model_renders_like_the_anchored_field() {
    let (cfg, mesh) = head();
    let model_cfg = ModelConfig {
        gaussians: 400,
        ..ModelConfig::default()
    };
    let (model, _) = Model::new(&mesh, &model_cfg, cfg.tokens).unwrap();
    let cam = scene::default_camera(32).unwrap();
    let traj = scene::expression_trajectory(&cfg);
    for psi in [&traj[0], &traj[37], &traj[120]] {
        let fwd = model
            .forward(&mesh, psi, &cam, [0.2, 0.1, 0.0], &mut PoseCache::new(&mesh))
            .unwrap();
        let raw = model
            .render_anchored(&mesh, psi, &cam, [0.2, 0.1, 0.0], &mut PoseCache::new(&mesh))
            .unwrap();
        assert_eq!(fwd.image.rgb, raw.rgb);
        assert!(fwd.offsets().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn anchor_validation_rejects_bad_input() {
    let quad = quad_mesh();
    let bad_tri = SurfaceAnchor {
        triangle: 5,
        barycentric: [1.0, 0.0, 0.0],
        normal_offset: 0.0,
    };
    assert!(matches!(
        AnchorBinding::new(&quad, vec![bad_tri]),
        Err(cags::Error::Dimension(_))
    ));
    let bad_bary = SurfaceAnchor {
        triangle: 0,
        barycentric: [0.7, 0.7, -0.4],
        normal_offset: 0.0,
    };
    assert!(matches!(
        AnchorBinding::new(&quad, vec![bad_bary]),
        Err(cags::Error::Contract(_))
    ));
}
