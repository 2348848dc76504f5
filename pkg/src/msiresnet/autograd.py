"""Tape-based reverse mode over whole layers, and a finite-difference checker.

``forward_record`` runs a model and keeps, per top-level layer, the cache
its backward rule needs. ``backward`` walks that tape in reverse and
returns gradients for every parameter. ``grad_check`` compares those
gradients against central differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError, ShapeError, StateError
from .layers import ForwardContext
from .tensor import make_rng


@dataclass
class TapeNode:
    name: str
    layer: object
    cache: object
    output_shape: tuple


@dataclass
class Tape:
    mode: str
    input_shape: tuple
    output_shape: tuple = None
    nodes: list = field(default_factory=list)
    consumed: bool = False

    def shapes(self):
        return [(n.name, n.output_shape) for n in self.nodes]


def forward_record(model, x, mode=None, rng=None):
    """Run ``model`` on ``x`` and return ``(output, tape)``.

    ``mode`` defaults to the model's own mode flag. Dropout draws from
    ``rng`` when given, otherwise from ``model.rng``.
    """
    mode = mode or getattr(model, "mode", "eval")
    if mode not in ("train", "eval"):
        raise InvalidSpecError(f"mode must be 'train' or 'eval', got {mode!r}")
    expected = getattr(model, "input_shape", None)
    if expected is not None and tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"model expects input [N, {', '.join(map(str, expected))}], got {list(x.shape)}", 0)
    if rng is None:
        rng = getattr(model, "rng", None)
    ctx = ForwardContext(train=mode == "train", rng=rng)
    tape = Tape(mode, x.shape)
    for i, (name, layer) in enumerate(model.layers):
        try:
            y, cache = layer.forward(x, ctx)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({name}): {e}", i) from e
        tape.nodes.append(TapeNode(name, layer, cache, y.shape))
        x = y
    tape.output_shape = x.shape
    return x, tape


def backward(tape, loss_grad, return_input_grad=False):
    """Propagate ``loss_grad`` (dLoss/dOutput) back through ``tape``.

    Returns a dict of parameter gradients keyed like
    ``model.named_parameters()``; with ``return_input_grad`` also the
    gradient with respect to the model input. A tape can be consumed once.
    """
    if tape.consumed:
        raise StateError("backward already ran on this tape")
    if tape.mode != "train":
        raise StateError("backward requires a tape recorded in train mode")
    loss_grad = np.asarray(loss_grad)
    if loss_grad.shape != tuple(tape.output_shape):
        raise ShapeError(f"loss gradient shape {loss_grad.shape} != output shape {tuple(tape.output_shape)}")
    tape.consumed = True
    grads = {}
    dy = loss_grad
    for node in reversed(tape.nodes):
        dy, g = node.layer.backward(dy, node.cache)
        for k, v in g.items():
            grads[f"{node.name}.{k}"] = v
    for node in tape.nodes:
        params = node.layer.named_parameters(f"{node.name}.")
        for k, p in params.items():
            if k not in grads:
                raise StateError(f"no gradient produced for parameter {k}")
            if grads[k].shape != p.shape:
                raise StateError(f"gradient for {k} has shape {grads[k].shape}, parameter has {p.shape}")
    if return_input_grad:
        return grads, dy
    return grads


def sum_objective():
    """Loss = sum of all outputs."""
    return lambda out: (float(out.sum()), np.ones_like(out))


def projection_objective(shape, seed=0):
    """Loss = <out, R> for a fixed random R; exercises every output element differently."""
    r = make_rng(seed).standard_normal(shape)
    return lambda out: (float((out * r).sum()), r.astype(out.dtype))


@dataclass
class GradReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    kinks: dict = field(default_factory=dict)  # elements skipped for sitting on a kink

    @property
    def passed(self):
        return not self.failures and all(e < self.tolerance for e in self.max_rel_error.values())

    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def table(self):
        lines = [f"{'tensor':<48} {'checked':>8} {'kinks':>6} {'max_rel_err':>12}  status"]
        for name, err in self.max_rel_error.items():
            ok = err < self.tolerance and not any(f.startswith(name + "[") for f in self.failures)
            lines.append(f"{name:<48} {self.checked[name]:>8} {self.kinks.get(name, 0):>6} "
                         f"{err:>12.3e}  {'pass' if ok else 'FAIL'}")
        lines.extend(f"non-finite: {f}" for f in self.failures)
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _branches(tape):
    """Every discrete choice made in a forward pass: ReLU masks, max-pool argmax."""
    found = []

    def walk(c):
        if isinstance(c, np.ndarray):
            if c.dtype == bool or np.issubdtype(c.dtype, np.integer):
                found.append(c)
        elif isinstance(c, (tuple, list)):
            for item in c:
                walk(item)

    for node in tape.nodes:
        walk(node.cache)
    return found


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


KINK_RETRIES = 3  # each retry shrinks the step tenfold


def grad_check(model, x, loss, tolerance=1e-4, mode="train", seed=0, sample=200, check_input=True):
    """Compare analytic gradients with central finite differences.

    ``loss`` maps the model output to ``(value, dvalue/doutput)``. Tensors
    larger than ``sample`` elements are checked on a seeded random subset
    of ``sample`` elements. Every forward pass reuses the same dropout
    seed, so the masks match the analytic pass. Batchnorm running buffers
    are restored afterwards.

    The step is ``1e-5 * max(1, |theta|)``. When the perturbed passes take a
    different ReLU or max-pool branch than the unperturbed one, the difference
    quotient straddles a kink and says nothing about the derivative; the step
    is then shrunk tenfold, up to ``KINK_RETRIES`` times. Elements still
    straddling a kink after that are counted in ``report.kinks`` and skipped.
    """
    saved = {k: v.copy() for k, v in model.named_buffers().items()}
    buffers = model.named_buffers()

    def objective(inp):
        out, tape = forward_record(model, inp, mode, rng=make_rng(seed))
        return loss(out)[0], _branches(tape)

    try:
        out, tape = forward_record(model, x, mode, rng=make_rng(seed))
        base = _branches(tape)
        _, dout = loss(out)
        grads, dx = backward(tape, dout, return_input_grad=True)

        targets = [(k, p, grads[k]) for k, p in model.named_parameters().items()]
        x = x.copy()
        if check_input:
            targets.append(("input", x, dx))

        pick = make_rng(seed + 1)
        report = GradReport(tolerance)
        for name, value, analytic in targets:
            flat = value.reshape(-1)
            if flat.size <= sample:
                idx = np.arange(flat.size)
            else:
                idx = np.sort(pick.choice(flat.size, size=sample, replace=False))
            a_flat = analytic.reshape(-1)
            worst = 0.0
            kinks = 0
            for i in idx:
                orig = flat[i]
                h = 1e-5 * max(1.0, abs(orig))
                for _ in range(KINK_RETRIES + 1):
                    flat[i] = orig + h
                    lp, bp = objective(x)
                    flat[i] = orig - h
                    lm, bm = objective(x)
                    flat[i] = orig
                    smooth = _same_branches(bp, base) and _same_branches(bm, base)
                    if smooth:
                        break
                    h /= 10.0
                if not smooth:
                    kinks += 1
                    continue
                numeric = (lp - lm) / (2 * h)
                a = a_flat[i]
                if not (np.isfinite(a) and np.isfinite(numeric)):
                    report.failures.append(f"{name}[{i}] analytic={a} numeric={numeric}")
                    continue
                worst = max(worst, relative_error(a, numeric))
            report.max_rel_error[name] = worst
            report.checked[name] = len(idx) - kinks
            if kinks:
                report.kinks[name] = kinks
    finally:
        for k, v in saved.items():
            buffers[k][...] = v
    return report
