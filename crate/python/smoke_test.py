"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation -e crates/python
then run with pytest or as a script.
"""

import math
import os
import tempfile

import fhdun


def test_sampling_and_adjoint_round_trip():
    img = fhdun.scene(64, seed=3)
    op = fhdun.SamplingOperator(1.0, block=32, seed=1)
    y = op.sample(img)
    assert (y.width, y.height, y.num_blocks, y.m) == (64, 64, 4, 1024)
    back = op.adjoint(y)
    assert fhdun.psnr(img, back) >= 80.0


def test_measurement_file_round_trip():
    op = fhdun.SamplingOperator(0.10, seed=7)
    y = op.sample(fhdun.scene(96, seed=1))
    assert (y.num_blocks, y.m) == (9, 102)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "y.csm")
        y.save(path)
        z = fhdun.Measurement.load(path)
    assert z.m == 102
    assert all(abs(a - b) < 1e-6 for a, b in zip(y.values, z.values))


def test_solvers():
    img = fhdun.scene(32, seed=4)
    op = fhdun.SamplingOperator(0.25, seed=2)
    y = op.sample(img)
    base = fhdun.psnr(img, op.adjoint(y))
    r = fhdun.fista(y, op, lam=0.02, max_iters=100)
    assert fhdun.psnr(img, r.image) > base + 5.0
    assert len(r.objective) == r.iterations + 1
    ista = fhdun.ista(y, op, lam=0.02, max_iters=20, tol=0.0)
    assert all(b <= a + 1e-8 for a, b in zip(ista.objective, ista.objective[1:]))


def test_scalar_helpers():
    assert fhdun.soft_threshold([1.5, -1.5, 0.3], 1.0) == [0.5, -0.5, 0.0]
    t, beta = fhdun.fista_momentum(1.0)
    assert abs(t - (1 + math.sqrt(5)) / 2) < 1e-12 and beta == 0.0
    channels = fhdun.unshuffle([[1, 2], [3, 4]], 2)
    assert channels == [[[1.0]], [[2.0]], [[3.0]], [[4.0]]]


def test_model_reconstructs_and_saves():
    model = fhdun.Model.tiny(0.25, phases=2, seed=5)
    assert model.phases == 2 and model.num_parameters > 0
    op = model.sampling_operator()
    y = op.sample(fhdun.scene(40, seed=6))
    rec = model.reconstruct(y)
    assert len(rec.image) == 40 and len(rec.image[0]) == 40
    assert len(rec.phase_images) == 2
    assert all(0.0 <= b < 1.0 for per in rec.betas for b in per)
    assert all(r > 0.0 for per in rec.rhos for r in per)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.fhdun")
        model.save(path)
        again = fhdun.Model.load(path).reconstruct(y)
    assert again.image == rec.image


def test_errors_surface_as_exceptions():
    for bad in (lambda: fhdun.SamplingOperator(0.0),
                lambda: fhdun.soft_threshold([1.0], -1.0),
                lambda: fhdun.psnr([[0.0]], [[0.0, 1.0]])):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")
    try:
        fhdun.Measurement.load("/nonexistent/y.csm")
    except OSError:
        pass
    else:
        raise AssertionError("expected OSError")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
