"""The finite-difference suite run by ``rangevit gradcheck``.

Every differentiable operation is checked on a small random instance in
64-bit, followed by the whole toy network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, ops
from .gradcheck import GradReport, check_gradients
from .model import CropPoints, ModelConfig, RangeViT
from .objective import focal_loss, lovasz_softmax, total_loss
from .pointops import KernelDisposition, kpconv, radius_neighbors
from .projection import sample_points

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
# a smaller step makes it unlikely that one of the network's thousands of
# LeakyReLU/ReLU inputs crosses zero inside the difference stencil
END_TO_END_STEP = 1e-6


@dataclass
class SuiteResult:
    report: GradReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tolerance)


def _leaf(rng, shape, scale=1.0, shift=0.0):
    return Tensor(shift + scale * rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _projected(make_out, rng):
    """Scalar loss sum(out * R) with a fixed random R."""
    probe = Tensor(rng.standard_normal(make_out().shape))
    return lambda: ops.sum(ops.mul(make_out(), probe))


def _op_cases(rng) -> dict[str, tuple[Callable[[], Tensor], dict]]:
    cases: dict = {}

    x = _leaf(rng, (2, 3, 6, 7))
    w = _leaf(rng, (4, 3, 3, 3), 0.3)
    b = _leaf(rng, (4,))
    cases["conv2d"] = (lambda: ops.conv2d(x, w, b, stride=(1, 2), padding=(2, 1), dilation=(2, 1)),
                       {"x": x, "w": w, "b": b})

    xp = _leaf(rng, (1, 2, 8, 12))
    cases["avg_pool2d"] = (lambda: ops.avg_pool2d(xp, (3, 5), (2, 4), (1, 2)), {"x": xp})

    xs = _leaf(rng, (1, 12, 3, 2))
    cases["pixel_shuffle"] = (lambda: ops.pixel_shuffle(xs, 2, 3), {"x": xs})

    fm = _leaf(rng, (3, 5, 6))
    coords = np.column_stack([rng.uniform(-0.5, 5.5, 9), rng.uniform(-0.5, 6.5, 9)]) + 1e-3
    cases["bilinear_sample"] = (lambda: ops.bilinear_sample(fm, coords), {"map": fm})

    xl = _leaf(rng, (4, 6))
    gl, bl = _leaf(rng, (6,), 0.2, 1.0), _leaf(rng, (6,), 0.2)
    cases["layer_norm"] = (lambda: ops.layer_norm(xl, gl, bl), {"x": xl, "w": gl, "b": bl})

    xb = _leaf(rng, (3, 4, 2, 2))
    gb, bb = _leaf(rng, (4,), 0.2, 1.0), _leaf(rng, (4,), 0.2)
    rm, rv = np.zeros(4), np.ones(4)
    cases["batch_norm"] = (lambda: ops.batch_norm(xb, gb, bb, rm, rv, training=True), {"x": xb, "w": gb, "b": bb})

    xa = _leaf(rng, (2, 3, 4))
    ya = _leaf(rng, (2, 4, 5))
    cases["matmul"] = (lambda: ops.matmul(xa, ya), {"a": xa, "b": ya})

    xe = _leaf(rng, (5, 4))
    cases["elementwise"] = (lambda: ops.add(ops.gelu(xe), ops.mul(ops.leaky_relu(xe), ops.exp(ops.mul(xe, 0.3)))),
                            {"x": xe})

    xsm = _leaf(rng, (3, 5))
    cases["softmax"] = (lambda: ops.add(ops.softmax(xsm), ops.log_softmax(xsm)), {"x": xsm})

    block = {
        "ln1.weight": (8,), "ln1.bias": (8,), "ln2.weight": (8,), "ln2.bias": (8,),
        "attn.qkv.weight": (24, 8), "attn.qkv.bias": (24,), "attn.proj.weight": (8, 8),
        "attn.proj.bias": (8,), "ffn.fc1.weight": (16, 8), "ffn.fc1.bias": (16,),
        "ffn.fc2.weight": (8, 16), "ffn.fc2.bias": (8,),
    }
    bp = {k: _leaf(rng, s, 0.3, 1.0 if k.endswith("n1.weight") or k.endswith("n2.weight") else 0.0)
          for k, s in block.items()}
    xt = _leaf(rng, (1, 5, 8))
    cases["attention_block"] = (lambda: ops.attention_block(xt, bp, 2), {"x": xt, **bp})

    pts = rng.uniform(-1.5, 1.5, (12, 3))
    kernel = KernelDisposition.default()
    nb = radius_neighbors(pts, pts, kernel.sigma)
    infl = kernel.influences(pts, nb)
    fk, wk = _leaf(rng, (12, 3)), _leaf(rng, (15, 3, 2), 0.3)
    cases["kpconv"] = (lambda: kpconv(fk, wk, nb, infl), {"f": fk, "w": wk})

    pix = np.column_stack([rng.uniform(0, 5, 7), rng.uniform(0, 6, 7)]) + 1e-3
    fm2 = _leaf(rng, (2, 5, 6))
    valid = np.array([1, 1, 0, 1, 1, 1, 0], dtype=bool)
    cases["unproject"] = (lambda: sample_points(fm2, pix, valid), {"map": fm2})

    return cases


def _loss_cases(rng) -> dict[str, tuple[Callable[[], Tensor], dict]]:
    labels = np.array([1, 2, 3, 1, 2, 0])
    logits = _leaf(rng, (6, 3))
    raw = rng.uniform(0.05, 1.0, (6, 3))
    probs = Tensor(raw / raw.sum(axis=1, keepdims=True), requires_grad=True, dtype=np.float64)
    return {
        "focal_loss": (lambda: focal_loss(logits, labels), {"logits": logits}),
        "lovasz_softmax": (lambda: lovasz_softmax(probs, labels), {"probs": probs}),
        "total_loss": (lambda: total_loss(logits, labels), {"logits": logits}),
    }


def toy_problem(seed: int = 0, num_points: int = 20, config: ModelConfig | None = None):
    """Float64 toy network, one random crop, clustered points and labels.

    Vector parameters (biases and norm affines) are jittered away from
    their 0/1 initial values: a zero bias on a zero-filled pixel sits
    exactly on a LeakyReLU kink, where finite differences are meaningless.
    """
    cfg = config or ModelConfig.toy()
    rng = np.random.default_rng(seed)
    model = RangeViT(cfg, seed=seed, dtype=np.float64)
    for _, t in model.params.items():
        if t.ndim == 1:
            t.data += 0.1 * rng.standard_normal(t.shape)
    h, w = cfg.crop_height, cfg.crop_width
    crop = np.zeros((cfg.in_channels, h, w))
    occupied = rng.uniform(size=(h, w)) < 0.8
    crop[0] = np.where(occupied, rng.uniform(2, 30, (h, w)), 0)
    crop[1:] = np.where(occupied, rng.standard_normal((cfg.in_channels - 1, h, w)), 0)
    coords = rng.normal(0, 1.0, (num_points, 3))
    pixels = np.column_stack([rng.uniform(0, h, num_points), rng.uniform(0, w, num_points)])
    labels = rng.integers(1, cfg.num_classes + 1, num_points)
    filled = crop[:, occupied]
    model.params.buffers["input.mean"][:] = filled.mean(axis=1)
    model.params.buffers["input.std"][:] = filled.std(axis=1)
    return model, crop, CropPoints(coords, pixels), labels


def end_to_end_check(seed: int = 0, max_entries: int = 3, num_points: int = 20) -> GradReport:
    model, crop, points, labels = toy_problem(seed, num_points)
    x = model.normalize_input(crop)
    tensors = dict(model.params.items())
    return check_gradients(lambda: total_loss(model.point_logits(model.feature_maps(x), [points]), labels),
                           tensors, name="end_to_end", step=END_TO_END_STEP, max_entries=max_entries,
                           rng=np.random.default_rng(seed))


def refiner_check(seed: int = 0, num_points: int = 10) -> GradReport:
    model, _, points, _ = toy_problem(seed, num_points)
    rng = np.random.default_rng(seed + 1)
    feats = _leaf(rng, (num_points, model.config.hidden_dim))
    tensors = {"features": feats, **model.params.group("refiner")}
    nb, h = points.geometry(model.kernel, model.config.max_neighbors)
    fn = _projected(lambda: model.refine(feats, nb, h), rng)
    return check_gradients(fn, tensors, name="refine_3d", rng=rng)


def run_suite(seed: int = 0, end_to_end_entries: int = 3) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (make_out, tensors) in _op_cases(rng).items():
        fn = _projected(make_out, rng)
        results.append(SuiteResult(check_gradients(fn, tensors, name=name, rng=rng), OP_TOLERANCE))
    for name, (fn, tensors) in _loss_cases(rng).items():
        results.append(SuiteResult(check_gradients(fn, tensors, name=name, rng=rng), OP_TOLERANCE))
    results.append(SuiteResult(refiner_check(seed), OP_TOLERANCE))
    results.append(SuiteResult(end_to_end_check(seed, end_to_end_entries), END_TO_END_TOLERANCE))
    return results
