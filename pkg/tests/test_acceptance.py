"""Acceptance criteria 1-12. Each test records one PASS/FAIL line (printed,
and repeated in the session summary) before asserting.

Criterion 11 trains the default desk configuration for 200 epochs; deselect
it with ``-m "not slow"``.
"""

import dataclasses
import time

import numpy as np
import pytest
from scipy import integrate, stats

import test_encoder
import test_field
import test_losses
import test_prsamp
import test_recon
import test_render
from acceptance_report import record
from oracles import central_diff, depth_metrics_loop, rel_err, ssim_loop

from monorf.checkpoint import load_checkpoint, save_checkpoint
from monorf.encoder import encode
from monorf.geometry import pixel_grid, pixel_rays, project_points
from monorf.losses import reproj_loss
from monorf.metrics import depth_metrics, occ_metrics, psnr, ssim
from monorf.model import LossSwitches, loss_and_grads, ray_forward, render_view
from monorf.prsamp import kl_1d_gauss, prsom_update, sample_points
from monorf.recon import SchemeConfig, VolumeSpec, fuse_avg, fuse_min, marching_cubes, occupancy_from_tsdf
from monorf.recon import reconstruct
from monorf.render import composite
from monorf.scenegen import default_camera, default_scene, default_sequence, render_gt
from monorf.train import ModelState, TrainConfig, make_batch, train

T_NEAR, T_FAR = 0.2, 25.0


def test_c01_sample_count(tiny_model):
    rng = np.random.default_rng(1)
    r = 1000
    # means anywhere (including outside the bounds), widths from tiny to huge
    means = rng.uniform(-5.0, 35.0, (r, 4))
    stds = np.exp(rng.uniform(np.log(1e-4), np.log(50.0), (r, 4)))
    t0 = time.perf_counter()
    s = sample_points(means, stds, 8, T_NEAR, T_FAR, rng=rng)
    ok = s.distances.shape == (r, 64) and bool(np.all(np.diff(s.distances, axis=1) > 0))
    ok &= bool(np.all((s.distances >= T_NEAR) & (s.distances <= T_FAR)))

    # count the points the full pipeline actually hands to the density
    cfg = dataclasses.replace(tiny_model, samples_per_gaussian=8, field=dataclasses.replace(tiny_model.field, n_gaussians=4))
    state = ModelState.fresh(cfg, 0)
    grid, _ = encode(state.params, cfg.encoder, rng.uniform(size=(24, 32, 3)).astype(np.float32),
                     default_camera(32, 24, 24.0))
    dirs = rng.normal(size=(r, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    seen = []

    def density(points):
        seen.append(points.shape)
        return np.zeros(points.shape[:-1])

    noise = (rng.standard_normal((r, 4, 8)), rng.random((r, 32)))
    fw = ray_forward(state.params, cfg, grid, np.zeros((r, 3)), dirs, noise=noise, density_fn=density,
                     keep_cache=False)
    elapsed = time.perf_counter() - t0
    ok &= seen == [(r, 64, 3)] and fw.sigmas.shape == (r, 64) and elapsed < 1.0
    record(1, ok, f"{r} rays -> {s.distances.shape[1]} samples/ray, field evaluations {seen[0][:2]}, {elapsed:.2f} s")
    assert ok


def test_c02_rendering_algebra():
    rng = np.random.default_rng(2)
    n_inst = 10_000
    t0 = time.perf_counter()
    worst_sum = worst_insert = 0.0
    monotone = depth_ok = True
    for i in range(n_inst):
        d, s, c = test_render.random_ray(rng, n=int(rng.integers(1, 65)), sigma_scale=float(rng.uniform(0.01, 20)))
        out = composite(d, s, c, T_NEAR)
        worst_sum = max(worst_sum, abs(out.weight_sum - (1 - out.transmittance[-1])))
        monotone &= bool(np.all(np.diff(out.transmittance) <= 0))
        b = composite(*test_render.insert_zero_density(rng, d, s, c), T_NEAR)
        worst_insert = max(worst_insert, abs(out.depth - b.depth), float(np.abs(out.color - b.color).max()),
                           abs(out.weight_sum - b.weight_sum))
        # opaque oracle density: a step to a huge value at the true depth
        dd = np.sort(rng.uniform(T_NEAR, T_FAR, 64)) + 1e-6 * np.arange(64)
        true = rng.uniform(dd[0], dd[-1])
        o = composite(dd, np.where(dd >= true, 1e4, 0.0), np.zeros((64, 3)), T_NEAR)
        depth_ok &= abs(o.depth - true) <= np.diff(np.concatenate([[T_NEAR], dd])).max()
    elapsed = time.perf_counter() - t0
    ok = worst_sum < 1e-6 and monotone and worst_insert < 1e-6 and depth_ok and elapsed < 10
    record(2, ok, f"{n_inst} instances: max|sum w - (1-T)| {worst_sum:.1e}, T monotone {monotone}, "
                  f"insertion {worst_insert:.1e}, opaque depth within spacing {depth_ok}, {elapsed:.1f} s")
    assert ok


PER_OP = [
    ("field", test_field.field_grad_error, ()),
    ("mixture head", test_field.mixture_grad_error, ()),
    ("conv stride 2", test_encoder.conv_grad_error, (2, "constant", "constant")),
    ("conv edge/wrap", test_encoder.conv_grad_error, (1, "edge", "wrap")),
    ("encode", test_encoder.encode_grad_error, ()),
    ("sample_features", test_encoder.sample_features_grad_error, ()),
    ("composite", test_render.composite_grad_error, (True,)),
    ("rgb loss", test_losses.rgb_grad_error, ()),
    ("reproj loss", test_losses.reproj_grad_error, ()),
    ("kl", test_prsamp.kl_grad_error, ()),
    ("gauss+surface", test_prsamp.sampling_grad_error, ("depth",)),
    ("gauss+surface (mixture)", test_prsamp.sampling_grad_error, ("mixture",)),
]


def test_c03_gradient_suite(tiny_dataset, tiny_model):
    t0 = time.perf_counter()
    per_op = {name: max(fn(np.random.default_rng(seed), *args) for seed in range(100)) for name, fn, args in PER_OP}

    # end-to-end through encoder, mixture, sampling, field, compositing and all losses
    cfg = dataclasses.replace(tiny_model, surface_grad="depth")
    combos = [LossSwitches(), LossSwitches(True, False, False), LossSwitches(False, True, False),
              LossSwitches(False, False, True)]
    tc = TrainConfig(rays_per_batch=24, seed=7)
    names = ("enc.p0.w", "enc.s1.w", "field.0.w", "field.2.b", "gauss.0.w", "gauss.2.b")
    worst_e2e = 0.0
    base = ModelState.fresh(cfg, 3).params
    for inst in range(100):
        rng = np.random.default_rng([inst, 99])
        params = {k: (v + rng.normal(scale=0.05, size=v.shape)).astype(np.float64) for k, v in base.items()}
        batch, noise, _ = make_batch(tiny_dataset.train, tiny_dataset.camera, tc, cfg, inst, 0)
        _, _, frozen = loss_and_grads(params, cfg, batch, noise=noise)
        sw = combos[inst % 4]
        _, grads, _ = loss_and_grads(params, cfg, batch, noise=noise, frozen=frozen, switches=sw)

        def f():
            # the four terms of l_total, differenced term by term
            r = loss_and_grads(params, cfg, batch, noise=noise, frozen=frozen, switches=sw, need_grads=False)[0]
            return np.array([r.l_rgb, r.l_reproj, r.l_gauss, r.l_surface])

        for name in names:
            arr = params[name]
            idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
            num = central_diff(f, arr, idx, 1e-6)
            if abs(num) < 1e-8 and abs(grads[name][idx]) < 1e-8:
                continue
            worst_e2e = max(worst_e2e, rel_err(grads[name][idx], num, 1e-7))
    elapsed = time.perf_counter() - t0
    worst_op = max(per_op, key=per_op.get)
    ok = all(v < 1e-4 for v in per_op.values()) and worst_e2e < 1e-3 and elapsed < 120
    record(3, ok, f"per-op max rel err {per_op[worst_op]:.1e} ({worst_op}) over {len(PER_OP)} ops x 100 seeds; "
                  f"end-to-end {worst_e2e:.1e} over 100 instances; {elapsed:.0f} s")
    assert ok


def test_c04_kl():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        mu, mu2 = rng.uniform(-5, 5, 2)
        s, s2 = rng.uniform(0.3, 3.0, 2)
        p, q = stats.norm(mu, s), stats.norm(mu2, s2)
        num, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), mu - 12 * s, mu + 12 * s,
                                limit=200)
        worst = max(worst, abs(kl_1d_gauss(mu, s, mu2, s2) - num))
    unit = abs(kl_1d_gauss(0.0, 1.0, 1.0, 1.0) - 0.5)
    ok = worst < 1e-3 and unit < 1e-12
    record(4, ok, f"max |closed form - quadrature| {worst:.1e} over 100 pairs; |KL(N(0,1)||N(1,1)) - 0.5| {unit:.0e}")
    assert ok


def test_c05_prsom_moves_to_surface():
    rng = np.random.default_rng(5)
    depth = 13.7
    density = test_prsamp.surface_density(np.array([depth]))
    means = np.array([[5.16, 10.12, 15.08, 20.04]])
    stds = np.full((1, 4), 3.0)
    errs = [np.abs(means - depth).min()]
    for _ in range(10):
        s = sample_points(means, stds, 8, T_NEAR, T_FAR, rng=rng)
        out = composite(s.distances, density(s.distances), np.zeros(s.distances.shape + (3,)), T_NEAR)
        means, stds, _ = prsom_update(means, stds, s.distances, out.alphas)
        errs.append(np.abs(means - depth).min())
    final = errs[-1]
    ok = final < 2 * 0.05 and final < errs[0]
    record(5, ok, f"closest mean error {errs[0]:.3f} -> {final:.4f} m after 10 iterations (bound 0.1)")
    assert ok


def test_c06_reprojection_zero_optimum():
    # 3x the default resolution: at 64x48 the bilinear texture residual alone
    # is ~2e-3 (see the decisions notes)
    scene, seq = default_scene(0), default_sequence()
    K = default_camera(192, 144, 144.0)
    losses, increases = [], True
    for j in range(1, len(seq.trajectory)):
        ps, pt = seq.trajectory[j], seq.trajectory[j - 1]
        src, d_src, ids_s = render_gt(scene, K, ps, return_ids=True)
        tgt, d_tgt, ids_t = render_gt(scene, K, pt, return_ids=True)
        pix = pixel_grid(K).reshape(-1, 2)
        o, d = pixel_rays(K, ps, pix)
        depth = d_src.reshape(-1)
        world = o + d * depth[:, None]
        uv, _, inb = project_points(K, pt, world)
        rng_t = np.linalg.norm(world - pt.translation, axis=1)
        # keep pixels whose whole bilinear footprint in the target shows the same surface
        x0 = np.clip(np.floor(uv[:, 0]).astype(int), 0, K.width - 2)
        y0 = np.clip(np.floor(uv[:, 1]).astype(int), 0, K.height - 2)
        same = (depth > 0) & inb
        for dy in (0, 1):
            for dx in (0, 1):
                same &= (ids_t[y0 + dy, x0 + dx] == ids_s.reshape(-1)) & (
                    np.abs(d_tgt[y0 + dy, x0 + dx] - rng_t) < 0.05 * rng_t)
        ones = np.ones_like(depth)
        base = reproj_loss(pix, o, d, depth, ones, src, tgt, pt, K, mask=same)
        losses.append(base.loss)
        gy, gx = np.gradient(src.mean(axis=2))
        textured = same & (np.hypot(gx, gy).reshape(-1) > 0.02)
        for factor in (0.9, 1.1):
            pert = np.where(textured, depth * factor, depth)
            _, _, inb_p = project_points(K, pt, o + d * pert[:, None])
            keep = textured & inb_p
            a = reproj_loss(pix, o, d, depth, ones, src, tgt, pt, K, mask=keep).loss
            b = reproj_loss(pix, o, d, pert, ones, src, tgt, pt, K, mask=keep).loss
            increases &= b > a
    ok = max(losses) <= 1e-3 and increases
    record(6, ok, f"GT-depth L_reproj max {max(losses):.1e} over {len(losses)} frame pairs at 192x144; "
                  f"+-10% on textured pixels strictly increases it: {increases}")
    assert ok


def test_c07_fusion_oracle():
    rng = np.random.default_rng(7)
    exact = avg_ok = True
    for _ in range(50):
        vols = test_recon.random_stack(rng, int(rng.integers(1, 6)))
        fused = fuse_min(vols)
        ref = test_recon.fuse_min_loop(vols)
        exact &= np.array_equal(fused.valid, np.isfinite(ref)) and np.array_equal(fused.values[fused.valid],
                                                                                   ref[fused.valid])
        favg = fuse_avg(vols)
        w = np.stack([np.where(v.valid, v.weights, 0.0) for v in vols])
        num = (w * np.stack([v.values for v in vols])).sum(0)
        den = w.sum(0)
        avg_ok &= np.array_equal(favg.valid, den > 0) and np.allclose(favg.values[den > 0], (num / np.where(
            den > 0, den, 1))[den > 0], rtol=1e-12, atol=1e-15)
    ok = exact and avg_ok
    record(7, ok, f"min-abs fusion equals the loop oracle on 50 stacks: {exact}; weighted average matches: {avg_ok}")
    assert ok


def test_c08_occupancy_rule():
    rng = np.random.default_rng(8)
    ok = True
    for _ in range(5):
        vol = test_recon.random_stack(rng, 1, trunc=6.0)[0]
        cam = rng.uniform(-3, 3, 3)
        occ = occupancy_from_tsdf(vol, cam, 0.25, 4.0)
        ok &= np.array_equal(occ.occupied, test_recon.occupancy_loop(vol, cam, 0.25, 4.0))
    record(8, ok, "V < min(0.25 d, 4.0) equals the per-voxel loop on 5 volumes")
    assert ok


def test_c09_marching_cubes_sphere():
    vol, spec = test_recon.sphere_volume()
    mesh = marching_cubes(vol)
    dist = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 1.0).max()
    ok = len(mesh.vertices) > 0 and mesh.is_closed() and mesh.euler_characteristic == 2 and dist <= 0.5 * spec.voxel_size
    record(9, ok, f"closed {mesh.is_closed()}, Euler {mesh.euler_characteristic}, max vertex distance "
                  f"{dist:.4f} (half voxel {0.5 * spec.voxel_size:.4f})")
    assert ok


def test_c10_metric_oracles():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        gt = rng.uniform(0.5, 100.0, (20, 30))
        gt[rng.uniform(size=gt.shape) < 0.1] = 0
        pred = gt * rng.uniform(0.6, 1.6, gt.shape) + rng.uniform(0, 2, gt.shape)
        m = depth_metrics(pred, gt, cap=80.0)
        for k, v in depth_metrics_loop(pred, gt, 80.0).items():
            worst = max(worst, abs(getattr(m, k) - v) / max(1.0, abs(v)))
        a = rng.uniform(size=(16, 18, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - ssim_loop(a, b)))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        worst = max(worst, abs(psnr(a, b) - 10 * np.log10(1 / mse)))
        p, g = rng.uniform(size=(6, 7, 8)) < 0.4, rng.uniform(size=(6, 7, 8)) < 0.5
        tp = sum(1 for x, y in zip(p.ravel(), g.ravel()) if x and y)
        union = sum(1 for x, y in zip(p.ravel(), g.ravel()) if x or y)
        worst = max(worst, abs(occ_metrics(p, g).iou - tp / union))
    g = np.linspace(1, 50, 100)
    scaled = depth_metrics(1.2 * g, g)
    img = rng.uniform(0, 0.9, (16, 16, 3))
    db = psnr(img, img + 0.1)
    worked = abs(scaled.abs_rel - 0.2) < 1e-12 and scaled.d1 == 100.0 and abs(db - 20.0) < 1e-10
    ok = worst < 1e-10 and worked
    record(10, ok, f"max deviation from brute force {worst:.1e}; 1.2*gt -> AbsRel {scaled.abs_rel:.15f}, "
                   f"d1 {scaled.d1}; mse 0.01 -> {db:.12f} dB")
    assert ok


@pytest.mark.slow
def test_c11_desk_experiment(tmp_path):
    from monorf.cli import cmd_gen_data, evaluate, gt_occupancy
    from monorf.config import Config
    from monorf.scenegen import load_dataset

    cfg = Config()
    t0 = time.perf_counter()
    cmd_gen_data(cfg, tmp_path / "data")
    ds = load_dataset(tmp_path / "data")
    model, tc = cfg.model(), cfg.train()
    early = {}

    def keep_epoch_3(st):
        if st.epoch == 3:
            early["state"] = st.copy()

    state, _ = train(ds, model, tc, checkpoint_fn=keep_epoch_3, threads=1)
    minutes = (time.perf_counter() - t0) / 60

    inp = ds.train[0]
    grid, _ = encode(state.params, model.encoder, inp.rgb, ds.camera)

    def predict(f):
        v = render_view(state.params, model, inp.rgb, ds.camera, inp.pose, f.pose, seed=cfg.seed, stream=f.index,
                        grid=grid)
        return v.depth, v.rgb, v.valid

    report = evaluate(cfg, ds, predict)
    per_pose = [(r["abs_rel"], r["d1"]) for r in report["heldout"]]
    depth_ok = len(per_pose) == 3 and all(a <= 0.10 and d >= 85 for a, d in per_pose)

    scheme = cfg.scheme()
    rec = reconstruct(state.params, model, inp.rgb, ds.camera, inp.pose, scheme, seed=cfg.seed, threads=1)
    occ = occ_metrics(rec.occupancy, gt_occupancy(cfg, ds))

    # bit-for-bit at any thread count: the first epochs of training and the reconstruction
    short, _ = train(ds, model, dataclasses.replace(tc, epochs=3), threads=8)
    rec8 = reconstruct(state.params, model, inp.rgb, ds.camera, inp.pose, scheme, seed=cfg.seed, threads=8)
    threads_ok = short.equals(early["state"]) and np.array_equal(rec.tsdf.values, rec8.tsdf.values) and \
        np.array_equal(rec.occupancy.occupied, rec8.occupancy.occupied)

    ok = minutes <= 20 and depth_ok and occ.iou >= 0.5 and threads_ok
    record(11, ok, "train {:.1f} min; held-out (AbsRel, d1) {}; IoU {:.3f} (P {:.3f}, R {:.3f}) over {} poses; "
                   "threads 1 == 8: {}".format(minutes, [(round(a, 3), round(d, 1)) for a, d in per_pose],
                                               occ.iou, occ.precision, occ.recall, len(rec.poses), threads_ok))
    assert ok


def test_c12_determinism_and_persistence(tmp_path, tiny_dataset, tiny_model):
    tc = TrainConfig(epochs=4, steps_per_epoch=2, rays_per_batch=48, seed=3)
    full, _ = train(tiny_dataset, tiny_model, tc)

    save_checkpoint(tmp_path / "a.bin", full, {"note": "x"}, 3)
    back, _ = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(tmp_path / "b.bin", back, {"note": "x"}, 3)
    roundtrip = back.equals(full) and (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    half, _ = train(tiny_dataset, tiny_model, dataclasses.replace(tc, epochs=2))
    save_checkpoint(tmp_path / "half.bin", half, {}, 3)
    resumed, _ = train(tiny_dataset, tiny_model, tc, state=load_checkpoint(tmp_path / "half.bin")[0])
    resume_ok = resumed.equals(full)

    eight, _ = train(tiny_dataset, tiny_model, tc, threads=8)
    f0, f1 = tiny_dataset.train[0], tiny_dataset.train[1]
    views = [render_view(full.params, tiny_model, f0.rgb, tiny_dataset.camera, f0.pose, f1.pose, seed=1, threads=t)
             for t in (1, 8)]
    scheme = SchemeConfig(max_dist=1.0, volume=VolumeSpec((-3.2, -1.6, 0.0), 0.4, (16, 8, 16)))
    recs = [reconstruct(full.params, tiny_model, f0.rgb, tiny_dataset.camera, f0.pose, scheme, seed=1, threads=t)
            for t in (1, 8)]
    threads_ok = eight.equals(full) and np.array_equal(views[0].depth, views[1].depth) and \
        np.array_equal(views[0].rgb, views[1].rgb) and np.array_equal(recs[0].tsdf.values, recs[1].tsdf.values) and \
        np.array_equal(recs[0].mesh.vertices, recs[1].mesh.vertices)

    ok = roundtrip and resume_ok and threads_ok
    record(12, ok, f"checkpoint round trip bit-exact {roundtrip}; resume == uninterrupted {resume_ok}; "
                   f"threads 1 == 8 (train, render, reconstruct) {threads_ok}")
    assert ok
