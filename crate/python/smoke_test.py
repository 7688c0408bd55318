"""Smoke test for the sure_py extension module.

Build and install the module first, for example with
    maturin develop -m crates/python/Cargo.toml --release
then run
    python python/smoke_test.py
"""

import math
import os
import random
import tempfile

import sure_py


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def check_scalar_functions():
    nll = sure_py.evidential_nll(0.0, 0.0, 1.0, 2.0, 1.0)
    want = 0.5 * math.log(math.pi) - 2 * math.log(4) + 2.5 * math.log(4) + math.lgamma(2) - math.lgamma(2.5)
    assert close(nll, want), (nll, want)
    assert close(sure_py.evidential_reg(0.5, 0.1, 1.0, 2.0, 1.0), 1.6)
    assert sure_py.predictive_moments(0.1, 1.0, 2.0, 0.5) == (0.1, 0.5, 0.5)
    assert abs(sure_py.focal_loss(0.5) - 0.043322) < 1e-6
    assert sure_py.focal_loss(1.0) == 0.0
    assert close(sure_py.spearman([1, 2, 3, 4], [2, 4, 6, 8]), 1.0)
    try:
        sure_py.predictive_moments(0.0, 1.0, 0.5, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("kappa <= 1 must be rejected")


def check_filter_and_ransac():
    rng = random.Random(0)
    ua = [rng.random() for _ in range(100)]
    ue = [rng.random() for _ in range(100)]
    kept = sure_py.filter_indices(ua, ue, 0.95, 0.95)
    assert 90 <= len(kept) <= 100 and kept == sorted(kept)

    h = [[1.05, 0.02, 3.0], [-0.01, 0.98, -2.0], [1e-4, 0.0, 1.0]]

    def warp(x, y):
        w = h[2][0] * x + h[2][1] * y + h[2][2]
        return ((h[0][0] * x + h[0][1] * y + h[0][2]) / w, (h[1][0] * x + h[1][1] * y + h[1][2]) / w)

    src = [(rng.uniform(0, 256), rng.uniform(0, 256)) for _ in range(60)]
    dst = [warp(x, y) for x, y in src]
    fit = sure_py.ransac_homography(src, dst)
    assert fit is not None
    est, inliers = fit
    assert all(inliers)
    for r in range(3):
        for c in range(3):
            assert abs(est[r][c] - h[r][c]) < 1e-6, (est, h)


def check_model():
    image_a, image_b, h_true = sure_py.generate_pair(5, 64, "easy")
    assert len(image_a) == 64 and len(image_a[0]) == 64
    assert len(h_true) == 3

    model = sure_py.Model(seed=0)
    assert model.num_parameters > 0
    losses = model.fit_synthetic(4, "easy", base_seed=1, epochs=2)
    assert len(losses) == 2 and all(math.isfinite(v) for v in losses)

    matches = model.match_images(image_a, image_b, filter=False)
    for m in matches:
        assert m.u_a > 0 and m.u_e > 0
        assert 0 <= m.xb < 64 and 0 <= m.yb < 64
    filtered = model.match_images(image_a, image_b)
    assert len(filtered) <= len(matches)

    aucs, mean_epe, rho = model.evaluate_synthetic(3, "easy")
    assert len(aucs) == 3 and all(0.0 <= a <= 1.0 for a in aucs)
    assert rho is None or -1.0 <= rho <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        loaded = sure_py.Model.load(path)
        assert loaded.config_json == model.config_json
        again = loaded.match_images(image_a, image_b, filter=False)
        assert [(m.xb, m.yb) for m in again] == [(m.xb, m.yb) for m in matches]

        with open(path, "r+b") as f:
            f.seek(100)
            byte = f.read(1)
            f.seek(100)
            f.write(bytes([byte[0] ^ 0xFF]))
        try:
            sure_py.Model.load(path)
        except sure_py.CheckpointError:
            pass
        else:
            raise AssertionError("corrupt checkpoint must be rejected")


if __name__ == "__main__":
    check_scalar_functions()
    check_filter_and_ransac()
    check_model()
    print("sure_py smoke test passed")
