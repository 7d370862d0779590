use hdrv::global_align::{compose_global_flow, make_offset_bases, FlowField};
use hdrv::metrics::psnr_mu;
use hdrv::radiometry::{merge_stack_to_hdr, simulate_exposure_stack, DEFAULT_GAMMA};
use hdrv::reconstruct::{
    fuse_aligned, reconstruct_frame, reconstruct_frames, window, AlignedNeighbor, FrameResult, ReconstructionConfig,
};
use hdrv::synth::{SceneKind, SceneSequence, SyntheticScene};

fn render(scene: &SyntheticScene, bits: u32, noise: f64) -> SceneSequence {
    scene.render_sequence(&[-3, 0], bits, noise, DEFAULT_GAMMA, 5).unwrap()
}

fn aligned() -> ReconstructionConfig {
    ReconstructionConfig::default()
}

fn unaligned() -> ReconstructionConfig {
    ReconstructionConfig {
        align: false,
        ..Default::default()
    }
}

fn mean_psnr(results: &[FrameResult], seq: &SceneSequence) -> f64 {
    let total: f64 = results.iter().zip(&seq.truths).map(|(r, t)| psnr_mu(&r.hdr, t).unwrap()).sum();
    total / results.len() as f64
}

#[test]
fn static_scene_matches_stack_merge() {
    let mut scene = SyntheticScene::new(SceneKind::GlobalMotion, 96, 96, 5, 41);
    scene.camera_step = (0.0, 0.0);
    let seq = render(&scene, 16, 0.0);
    let results = reconstruct_frames(&seq.frames, &aligned()).unwrap();
    for (i, r) in results.iter().enumerate() {
        let stack = simulate_exposure_stack(&seq.truths[i], &[-3, 0], 16, 0.0, DEFAULT_GAMMA, 0).unwrap();
        let merged = merge_stack_to_hdr(&stack).unwrap();
        let mut checked = 0;
        for p in 0..merged.data().len() {
            let unclipped = stack.shots().iter().all(|(_, img)| {
                let z = img.data()[p];
                z > 0.0 && z < 1.0
            });
            if !unclipped {
                continue;
            }
            let (a, b) = (r.hdr.data()[p], merged.data()[p]);
            assert!((a - b).abs() <= 0.01 * b, "frame {i} sample {p}: {a} vs {b}");
            checked += 1;
        }
        assert!(checked > merged.data().len() / 2);
    }
}

#[test]
fn global_shift_pipeline() {
    let mut scene = SyntheticScene::new(SceneKind::GlobalMotion, 160, 160, 5, 42);
    scene.camera_step = (3.0, 0.0);
    let seq = render(&scene, 8, 0.002);
    let with = reconstruct_frames(&seq.frames, &aligned()).unwrap();
    let without = reconstruct_frames(&seq.frames, &unaligned()).unwrap();
    let bases = make_offset_bases(160, 160).unwrap();
    for i in 1..4 {
        let (u, v) = scene.background_flow(i, i - 1);
        let truth = FlowField::from_fn(160, 160, |_, _| (u as f32, v as f32)).unwrap();
        let fitted = compose_global_flow(&with[i].global_alpha_prev, &bases);
        let epe = fitted.mean_endpoint_error(&truth, 8).unwrap();
        assert!(epe < 0.5, "frame {i}: residual {epe}");
    }
    let gain = mean_psnr(&with, &seq) - mean_psnr(&without, &seq);
    assert!(gain >= 3.0, "gain {gain} dB");
}

#[test]
fn duplicate_neighbors_reduce_to_identity_fusion() {
    let scene = SyntheticScene::new(SceneKind::LocalMotion, 96, 96, 3, 43);
    let seq = render(&scene, 8, 0.0);
    let cur = &seq.frames[1];
    let r = reconstruct_frame(cur, cur, cur, &aligned()).unwrap();
    let expected = fuse_aligned(cur, &[AlignedNeighbor::unaligned(cur), AlignedNeighbor::unaligned(cur)]).unwrap();
    assert!(r.hdr.max_abs_diff(&expected).unwrap() < 1e-6);
}

#[test]
fn windowing_and_independence() {
    let scene = SyntheticScene::new(SceneKind::FullMotion, 64, 64, 8, 44);
    let seq = render(&scene, 8, 0.002);
    let results = reconstruct_frames(&seq.frames, &aligned()).unwrap();
    assert_eq!(results.len(), 8);
    let interior = (0..8).filter(|&i| {
        let (p, n) = window(i, 8);
        p + 1 == i && n == i + 1
    });
    assert_eq!(interior.count(), 6);
    for (i, r) in results.iter().enumerate() {
        let (p, n) = window(i, 8);
        let single = reconstruct_frame(&seq.frames[p], &seq.frames[i], &seq.frames[n], &aligned()).unwrap();
        assert_eq!(single.hdr, r.hdr, "frame {i}");
    }
}

#[test]
fn deterministic_across_pools() {
    let scene = SyntheticScene::new(SceneKind::FullMotion, 80, 80, 4, 45);
    let seq = render(&scene, 8, 0.002);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| reconstruct_frames(&seq.frames, &aligned()).unwrap())
    };
    let one = run(1);
    for threads in [2, 5] {
        let other = run(threads);
        for (a, b) in one.iter().zip(&other) {
            assert_eq!(a.hdr, b.hdr);
            assert_eq!(a.global_alpha_prev, b.global_alpha_prev);
        }
    }
}

#[test]
fn swapping_neighbors_is_symmetric() {
    let scene = SyntheticScene::new(SceneKind::GlobalMotion, 96, 96, 3, 46);
    let seq = render(&scene, 8, 0.0);
    let (p, c, n) = (&seq.frames[0], &seq.frames[1], &seq.frames[2]);
    let fwd = reconstruct_frame(p, c, n, &aligned()).unwrap();
    let back = reconstruct_frame(n, c, p, &aligned()).unwrap();
    let mad: f64 = fwd
        .hdr
        .data()
        .iter()
        .zip(back.hdr.data())
        .map(|(a, b)| f64::from((a - b).abs()))
        .sum::<f64>()
        / fwd.hdr.data().len() as f64;
    assert!(mad < 1e-4, "mean abs difference {mad}");
}

#[test]
fn output_is_finite_and_nonnegative() {
    let scene = SyntheticScene::new(SceneKind::FullMotion, 64, 64, 4, 47);
    let seq = render(&scene, 8, 0.01);
    for r in reconstruct_frames(&seq.frames, &aligned()).unwrap() {
        assert!(r.hdr.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
