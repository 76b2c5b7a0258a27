"""Quick oracle suites run by ``densepcr selftest``."""
from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import oracles
from . import tensor as T
from .model import DensePCRModel, ModelConfig, dense_reconstruct, direct_fc_decoder_params, forward_pyramid
from .pointset import chamfer, emd_approx, emd_exact, farthest_point_sample


def pyramid_loss(model: DensePCRModel, image, gts, lambdas=(1.0, 1.0, 1.0)) -> T.Tensor:
    pc1, pc2, pc3 = forward_pyramid(image, model)
    e, _ = emd_approx(pc1, gts[0])
    terms = [T.scale(e, lambdas[0]), T.scale(chamfer(pc2, gts[1]), lambdas[1]),
             T.scale(chamfer(pc3, gts[2]), lambdas[2])]
    return T.add(T.add(terms[0], terms[1]), terms[2])


def suite_chamfer(rng) -> str:
    worst = 0.0
    for _ in range(200):
        a, b = rng.normal(size=(rng.integers(1, 65), 3)), rng.normal(size=(rng.integers(1, 65), 3))
        ref = oracles.chamfer_bruteforce(a, b)
        worst = max(worst, abs(chamfer(a, b).item() - ref) / max(ref, 1e-300))
    assert worst < 1e-12, f"relative error {worst:.3g}"
    return f"200 pairs, max rel err {worst:.1e}"


def suite_emd(rng) -> str:
    for _ in range(20):
        n = int(rng.integers(1, 7))
        a, b = rng.random((n, 3)), rng.random((n, 3))
        exact, _ = emd_exact(a, b)
        assert abs(exact - oracles.emd_enumerate(a, b)) < 1e-12, "exact EMD differs from enumeration"
    worst = 0.0
    for _ in range(20):
        a, b = rng.random((64, 3)), rng.random((64, 3))
        exact, _ = emd_exact(a, b)
        approx, _ = emd_approx(a, b)
        assert approx.item() >= exact - 1e-9, "auction beat the exact optimum"
        worst = max(worst, approx.item() / exact - 1.0)
    assert worst <= 0.01, f"auction gap {worst:.3g}"
    return f"enumeration n<=6 exact; auction gap <= {worst:.1e} at n=64"


def suite_fps(rng) -> str:
    for _ in range(20):
        pts = rng.random((int(rng.integers(5, 40)), 3))
        k = int(rng.integers(1, len(pts) + 1))
        got = farthest_point_sample(pts, k).tolist()
        assert got == oracles.fps_bruteforce(pts, k), "FPS order differs from brute force"
    return "20 clouds match brute-force max-min scan"


def op_cases(rng) -> dict[str, tuple[Callable[[], T.Tensor], list]]:
    """Scalar probes, one per differentiable op; every probe is a fixed function of its leaves."""
    def leaf(*shape):
        return T.Tensor(rng.normal(size=shape), requires_grad=True)

    def probe(t: T.Tensor, weights: np.ndarray) -> T.Tensor:
        return T.sum_all(T.mul(t, T.Tensor(weights)))

    x, w, b = leaf(5, 4), leaf(4, 3), leaf(3)
    y = leaf(5, 4)
    img, k, kb = leaf(3, 7, 7), leaf(2, 3, 3, 3), leaf(2)
    pa, pb = leaf(6, 3), leaf(9, 3)
    qa, qb = leaf(6, 3), leaf(6, 3)
    wt = {s: rng.normal(size=s) for s in [(5, 3), (5, 4), (4,), (5, 8), (18, 3), (2, 4, 4), (4, 5)]}
    idx = np.array([4, 0, 4, 2])
    return {
        "affine": (lambda: probe(T.affine(x, w, b), wt[(5, 3)]), [x, w, b]),
        "relu": (lambda: probe(T.relu(x), wt[(5, 4)]), [x]),
        "max_over_rows": (lambda: probe(T.max_over_rows(x)[0], wt[(4,)]), [x]),
        "segment_max": (lambda: probe(T.segment_max(T.reshape(x, (4, 5)), 2)[0], wt[(4, 5)][:2]), [x]),
        "concat_cols": (lambda: probe(T.concat_cols([x, y]), wt[(5, 8)]), [x, y]),
        "tile_rows": (lambda: probe(T.tile_rows(pa, 3), wt[(18, 3)]), [pa]),
        "gather_rows": (lambda: probe(T.gather_rows(x, idx), wt[(4, 5)][:, :4]), [x]),
        "conv2d": (lambda: probe(T.conv2d(img, k, kb, stride=2, padding=1), wt[(2, 4, 4)]), [img, k, kb]),
        "add": (lambda: probe(T.add(x, y), wt[(5, 4)]), [x, y]),
        "sub": (lambda: probe(T.sub(x, y), wt[(5, 4)]), [x, y]),
        "mul": (lambda: probe(T.mul(x, y), wt[(5, 4)]), [x, y]),
        "scale": (lambda: probe(T.scale(x, -2.5), wt[(5, 4)]), [x]),
        "reshape": (lambda: probe(T.reshape(x, (4, 5)), wt[(4, 5)]), [x]),
        "chamfer": (lambda: chamfer(pa, pb), [pa, pb]),
        "emd_approx": (lambda: emd_approx(qa, qb)[0], [qa, qb]),
    }


def check_case(make: Callable[[], T.Tensor], leaves: list, **kw) -> tuple[float, int, int]:
    with T.tape():
        loss = make()
        T.backward(loss)
    grads = [t.grad.copy() for t in leaves]
    return oracles.gradient_check(lambda: make().item(), [t.data for t in leaves], grads, **kw)


def end_to_end_check(cfg: ModelConfig, rng, per_tensor: int = 1, seed: int = 0) -> tuple[float, int, int]:
    """Finite differences through image -> sparse -> mid -> dense with all three losses.

    ``per_tensor`` random entries of every parameter tensor are probed; entries
    on a switch (argmax, ReLU, neighbourhood, assignment) are skipped.  Biases
    get small random values first: at zero they park every ReLU fed by a
    zero relative coordinate exactly on its kink.
    """
    model = DensePCRModel.init(cfg, seed)
    for name, t in model.params.items():
        if name.endswith(".b"):
            t.data[...] = rng.normal(scale=0.05, size=t.shape)
    image = rng.random((3, cfg.image_size, cfg.image_size))
    gts = [rng.random((n, 3)) - 0.5 for n in cfg.resolutions()]
    with T.tape():
        loss = pyramid_loss(model, image, gts)
        T.backward(loss)
    names = list(model.params)
    return oracles.gradient_check(
        lambda: pyramid_loss(model, image, gts).item(), [model[n].data for n in names],
        [model[n].grad.copy() for n in names], max_entries=per_tensor, skip_kinks=True, rng=rng)


def suite_gradients(rng) -> str:
    errs = {name: check_case(make, leaves)[0] for name, (make, leaves) in op_cases(rng).items()}
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-6, f"{worst} rel err {errs[worst]:.3g}"
    err, checked, skipped = end_to_end_check(ModelConfig.desk(), rng)
    assert err < 1e-4, f"desk pyramid rel err {err:.3g}"
    assert checked >= 2 * skipped, f"too many switching entries ({skipped} of {checked + skipped})"
    return (f"{len(errs)} ops, worst {errs[worst]:.1e} ({worst}); desk pyramid {err:.1e} "
            f"over {checked} entries ({skipped} at switches)")


def suite_ladder(rng) -> str:
    cfg = ModelConfig.paper()
    model = DensePCRModel.init(cfg, 0)
    pcs = forward_pyramid(rng.random((3, 128, 128)), model)
    sizes = tuple(p.shape[0] for p in pcs)
    assert sizes == (1024, 4096, 16384), f"ladder {sizes}"
    _, bundle = dense_reconstruct(pcs[0], model, 2, return_features=True)
    assert bundle.aggregated.shape == (4096, 132), f"aggregated {bundle.aggregated.shape}"
    return f"paper preset ladder {sizes}, aggregated width {bundle.aggregated.shape[1]}"


def suite_params(rng) -> str:
    cfg = ModelConfig.paper()
    model = DensePCRModel.init(cfg, 0)
    pyramid = sum(model.count_params(s) for s in ("sparse_decoder", "dense_stage2", "dense_stage3"))
    direct = direct_fc_decoder_params(cfg.latent_dim, cfg.decoder_hidden, cfg.resolutions()[2])
    assert 3 * pyramid <= direct, f"pyramid {pyramid} vs direct {direct}"
    return f"pyramidal decoder {pyramid:,} vs direct FC {direct:,} (ratio {pyramid / direct:.3f})"


SUITES = [
    ("chamfer-oracle", suite_chamfer),
    ("emd-oracle", suite_emd),
    ("fps-oracle", suite_fps),
    ("finite-differences", suite_gradients),
    ("shape-ladder", suite_ladder),
    ("parameter-ratio", suite_params),
]


def run(seed: int = 0, echo=print) -> bool:
    ok = True
    for name, fn in SUITES:
        t0 = time.perf_counter()
        try:
            detail = fn(np.random.default_rng(seed))
            verdict = "PASS"
        except Exception as exc:  # report every suite, then fail overall
            detail, verdict, ok = f"{type(exc).__name__}: {exc}", "FAIL", False
        echo(f"{verdict} {name:<20} {time.perf_counter() - t0:6.1f}s  {detail}")
    return ok
