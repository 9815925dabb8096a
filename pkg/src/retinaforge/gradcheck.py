"""Finite-difference verification of every layer's analytic gradients.

The oracle is a plain central difference of the forward pass, run in
float64; it never touches the tape machinery it is checking. The relative
error of an element pair (a, n) is |a - n| / max(|a|, |n|, 1), so tiny
gradients are held to an absolute 1e-4.
"""

import numpy as np

from . import layers as L
from .engine import ParamStore, Tape, Tensor, backward

STEP = 1e-3
TOLERANCE = 1e-4


def numeric_gradient(f, arrays, step=STEP):
    """Central finite differences of scalar f w.r.t. each array, elementwise.

    Arrays are perturbed in place and restored; everything runs in the
    arrays' own dtype (use float64 inputs for oracle-grade precision).
    """
    grads = []
    for arr in arrays:
        g = np.empty_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _check(build, arrays, watched_tensors):
    """Run build() under a tape, backprop, and FD-check every array."""
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    analytic = [t.grad.copy() for t in watched_tensors]
    numeric = numeric_gradient(lambda: float(build().data), arrays)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _tensors(rng, *shapes):
    out = []
    for shape in shapes:
        t = Tensor((rng.random(shape) - 0.5).astype(np.float64))
        t.watched = True
        out.append(t)
    return out


def _well_separated(rng, shape, gap=0.01):
    # distinct values with pairwise gaps > 2*STEP so max-pool FD stays valid
    n = int(np.prod(shape))
    vals = (np.arange(n, dtype=np.float64) - n / 2) * gap * 2
    return Tensor(rng.permutation(vals).reshape(shape))


def check_conv2d(rng):
    x, w, b = _tensors(rng, (2, 5, 4, 3), (3, 3, 3, 2), (2,))
    return _check(lambda: L.tensor_sum(L.conv2d(x, w, b)), [x.data, w.data, b.data], [x, w, b])


def check_conv1x1(rng):
    x, w, b = _tensors(rng, (2, 4, 4, 3), (1, 1, 3, 2), (2,))
    return _check(lambda: L.tensor_sum(L.conv2d(x, w, b)), [x.data, w.data, b.data], [x, w, b])


def check_transposed_conv2d(rng):
    x, w, b = _tensors(rng, (2, 3, 4, 3), (2, 2, 3, 2), (2,))
    return _check(
        lambda: L.tensor_sum(L.transposed_conv2d(x, w, b)), [x.data, w.data, b.data], [x, w, b]
    )


def check_max_pool2d(rng):
    x = _well_separated(rng, (2, 4, 6, 2))
    x.watched = True
    return _check(lambda: L.tensor_sum(L.max_pool2d(x)), [x.data], [x])


def check_relu(rng):
    x = Tensor(rng.random((2, 4, 4, 3)) - 0.5)
    x.data[np.abs(x.data) < 0.01] = 0.1  # keep FD away from the kink
    x.watched = True
    return _check(lambda: L.tensor_sum(L.relu(x)), [x.data], [x])


def check_sigmoid(rng):
    (x,) = _tensors(rng, (2, 4, 4, 2))
    return _check(lambda: L.tensor_sum(L.sigmoid(x)), [x.data], [x])


def check_dropout(rng):
    (x,) = _tensors(rng, (2, 4, 4, 3))
    seed = int(rng.integers(1 << 31))

    def build():
        # identical mask on every evaluation so FD sees a fixed linear map
        return L.tensor_sum(L.dropout(x, 0.3, True, np.random.default_rng(seed)))

    return _check(build, [x.data], [x])


def check_concat_channels(rng):
    a, b = _tensors(rng, (2, 3, 3, 2), (2, 3, 3, 3))
    return _check(lambda: L.tensor_sum(L.concat_channels(a, b)), [a.data, b.data], [a, b])


def check_bce_loss(rng):
    pred = Tensor(rng.uniform(0.1, 0.9, (2, 4, 4, 1)))
    pred.watched = True
    target = Tensor(rng.integers(0, 2, (2, 4, 4, 1)).astype(np.float64))
    return _check(lambda: L.bce_loss(pred, target), [pred.data], [pred])


LAYER_CHECKS = {
    "conv2d": check_conv2d,
    "conv2d_1x1": check_conv1x1,
    "transposed_conv2d": check_transposed_conv2d,
    "max_pool2d": check_max_pool2d,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "dropout": check_dropout,
    "concat_channels": check_concat_channels,
    "bce_loss": check_bce_loss,
}


def _fd_safe(probes):
    """Reject graphs where a +-STEP perturbation could cross a kink or tie.

    Each probe carries the margin its intermediate value keeps from the
    nearest non-differentiable point and a worst-case bound on how far a
    single perturbed scalar can move that value (from the L1 gains of the
    layers in between). Central differences are only trusted when the
    margin clearly dominates the possible shift.
    """
    for kind, val, shift in probes:
        safe = 2.5 * shift + 1e-9
        if kind == "relu" and np.min(np.abs(val)) < safe:
            return False
        if kind == "pool":
            n, h, w, c = val.shape
            v = val.reshape(n, h // 2, 2, w // 2, 2, c)
            v = v.transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4)
            top2 = np.sort(v, axis=1)[:, -2:]
            if np.min(top2[:, 1] - top2[:, 0]) < 2 * safe:
                return False
        if kind == "bce" and np.min(np.minimum(val, 1.0 - val)) < max(safe, 1e-5):
            return False
    return True


def random_composition(rng):
    """A randomly wired 3-layer graph ending in a scalar loss.

    Returns (build, arrays, tensors) suitable for _check; build() records
    kink-adjacent intermediates into its probes list for _fd_safe.
    """
    c = int(rng.integers(1, 4))
    x = Tensor(rng.uniform(-0.5, 0.5, (2, 4, 4, c)))
    x.watched = True
    store = ParamStore()
    tensors = [x]
    arrays = [x.data]
    plan = []

    cur_c, cur_h, cur_w = c, 4, 4
    for step_i in range(3):
        options = ["conv3", "conv1", "relu", "sigmoid", "dropout", "concat"]
        if cur_h % 2 == 0 and cur_w % 2 == 0 and min(cur_h, cur_w) >= 4:
            options.append("pool")
        if max(cur_h, cur_w) <= 8:
            options.append("upconv")
        kind = options[int(rng.integers(len(options)))]
        spec = {"kind": kind}
        if kind in ("conv3", "conv1"):
            k = 3 if kind == "conv3" else 1
            c_out = int(rng.integers(1, 4))
            w = store.add(f"w{step_i}", rng.uniform(-0.5, 0.5, (k, k, cur_c, c_out)))
            b = store.add(f"b{step_i}", rng.uniform(-0.1, 0.1, c_out))
            spec.update(w=w, b=b)
            tensors += [w, b]
            arrays += [w.data, b.data]
            cur_c = c_out
        elif kind == "upconv":
            c_out = int(rng.integers(1, 4))
            w = store.add(f"w{step_i}", rng.uniform(-0.5, 0.5, (2, 2, cur_c, c_out)))
            b = store.add(f"b{step_i}", rng.uniform(-0.1, 0.1, c_out))
            spec.update(w=w, b=b)
            tensors += [w, b]
            arrays += [w.data, b.data]
            cur_c, cur_h, cur_w = c_out, cur_h * 2, cur_w * 2
        elif kind == "pool":
            cur_h, cur_w = cur_h // 2, cur_w // 2
        elif kind == "dropout":
            spec["seed"] = int(rng.integers(1 << 31))
        elif kind == "concat":
            side = Tensor(rng.uniform(-0.5, 0.5, (2, cur_h, cur_w, 2)))
            side.watched = True
            spec["side"] = side
            tensors.append(side)
            arrays.append(side.data)
            cur_c += 2
        plan.append(spec)

    use_bce = bool(rng.integers(2))
    target = Tensor(rng.integers(0, 2, (2, cur_h, cur_w, cur_c)).astype(np.float64))
    probes = []

    def build():
        # terms tracks, per perturbation source (input, each weight/bias,
        # each concat side), how far one +-STEP scalar can move the current
        # activation; layer L1 gains scale earlier sources forward
        probes.clear()
        terms = [1.0]
        h = x
        for spec in plan:
            kind = spec["kind"]
            if kind in ("conv3", "conv1"):
                wd = spec["w"].data
                gain = float(np.abs(wd).sum(axis=(0, 1, 2)).max())
                a_in = float(np.abs(h.data).max())
                h = L.conv2d(h, spec["w"], spec["b"])
                terms = [t * gain for t in terms] + [a_in + 1.0]
            elif kind == "upconv":
                wd = spec["w"].data
                gain = float(np.abs(wd).sum(axis=2).max())
                a_in = float(np.abs(h.data).max())
                h = L.transposed_conv2d(h, spec["w"], spec["b"])
                terms = [t * gain for t in terms] + [a_in + 1.0]
            elif kind == "pool":
                probes.append(("pool", h.data, STEP * sum(terms)))
                h = L.max_pool2d(h)
            elif kind == "relu":
                probes.append(("relu", h.data, STEP * sum(terms)))
                h = L.relu(h)
            elif kind == "sigmoid":
                h = L.sigmoid(h)
                terms = [t * 0.25 for t in terms]
            elif kind == "dropout":
                h = L.dropout(h, 0.3, True, np.random.default_rng(spec["seed"]))
                terms = [t / 0.7 for t in terms]
            elif kind == "concat":
                h = L.concat_channels(h, spec["side"])
                terms = terms + [1.0]
        if use_bce:
            p = L.sigmoid(h)
            probes.append(("bce", p.data, STEP * 0.25 * sum(terms)))
            return L.bce_loss(p, target)
        return L.tensor_sum(h)

    return build, arrays, tensors, probes


def run_suite(seed=0, composition_trials=100, corrupt=False):
    """Run every layer check plus random compositions.

    Returns {check name: max relative error}. ``corrupt`` deliberately skews
    one analytic gradient so callers can confirm the suite actually bites.
    """
    results = {}
    rng = np.random.default_rng(seed)
    for name, fn in LAYER_CHECKS.items():
        results[name] = fn(rng)

    worst = 0.0
    for _ in range(composition_trials):
        for _attempt in range(200):
            build, arrays, tensors, probes = random_composition(rng)
            build()
            if _fd_safe(probes):
                break
        else:
            raise RuntimeError("could not sample an FD-safe composition")
        err = _check(build, arrays, tensors)
        worst = max(worst, err)
    results["compositions"] = worst

    if corrupt:
        (x,) = _tensors(rng, (2, 4, 4, 2))
        with Tape() as tape:
            loss = L.tensor_sum(L.sigmoid(x))
        backward(tape, loss)
        analytic = 2.0 * x.grad  # simulated backward bug
        numeric = numeric_gradient(lambda: float(L.tensor_sum(L.sigmoid(x)).data), [x.data])[0]
        results["corrupted_sigmoid"] = relative_error(analytic, numeric)
    return results


def suite_passed(results, tolerance=TOLERANCE):
    return all(err < tolerance for err in results.values())
