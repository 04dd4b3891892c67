import math

import numpy as np
from scipy.spatial.transform import Rotation

from crossmodal.geometry import Calibration
from crossmodal.tensor import Tensor, backward
from crossmodal.transfer import VisionPointMatcher, vpm_forward, vpm_loss


def numeric_grad(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = fn(*arrays)
            arr[idx] = old - h
            down = fn(*arrays)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, arrays, h=1e-5):
    """Max relative error between tape gradients and finite differences.

    ``build`` maps leaf Tensors to a scalar Tensor; it is re-run on plain
    copies for the numeric side.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    backward(loss)
    work = [a.copy() for a in arrays]
    numeric = numeric_grad(lambda *xs: float(build(*[Tensor(x) for x in xs]).data), work, h)
    return max(relative_error(l.grad, n) for l, n in zip(leaves, numeric))


def hand_ce_dice(logits, labels, c, smooth=1.0):
    """Scalar-loop reference for cross-entropy plus soft dice."""
    rows = [(row, y) for row, y in zip(logits, labels) if 0 <= y < c]
    probs = []
    ce = 0.0
    for row, y in rows:
        m = max(row)
        z = sum(math.exp(x - m) for x in row)
        p = [math.exp(x - m) / z for x in row]
        probs.append(p)
        ce -= math.log(p[y])
    ce /= len(rows)
    dices = []
    for k in range(c):
        count = sum(1 for _, y in rows if y == k)
        if count == 0:
            continue
        inter = sum(p[k] for p, (_, y) in zip(probs, rows) if y == k)
        total = sum(p[k] for p in probs)
        dices.append(1 - (2 * inter + smooth) / (total + count + smooth))
    return ce + sum(dices) / len(dices)


def vpm_gradcheck(seed, r=4, dim=8, heads=2):
    rng = np.random.default_rng(seed)
    vpm = VisionPointMatcher(dim, heads=heads, seed=seed)
    for _, p in vpm.named_parameters():
        p.data += rng.normal(0, 0.1, p.shape)
    names = [n for n, _ in vpm.named_parameters()]
    labels = rng.integers(0, 2, r)

    def build(img, pts, *ps):
        for n, p in zip(names, ps):
            setattr(vpm, n, p)
        return vpm_loss(vpm_forward(img, pts, vpm), labels)

    arrays = [rng.normal(size=(r, dim)), rng.normal(size=(r, dim))] + [p.data.copy() for p in vpm.parameters()]
    return gradcheck(build, arrays)


def random_cal(rng, w=64, h=48):
    ext = np.eye(4)
    ext[:3, :3] = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
    ext[:3, 3] = rng.normal(0, 2, 3)
    f = rng.uniform(20, 120)
    k = np.array([[f, 0, rng.uniform(0, w - 1)], [0, f * rng.uniform(0.8, 1.2), rng.uniform(0, h - 1)], [0, 0, 1]])
    return Calibration(k, ext, w, h)


def homogeneous_oracle(xyz, cals, depth_min=1e-3):
    """Brute force: compose P = K [R|t] per camera and divide by the third row."""
    rows = []
    xh = np.hstack([xyz, np.ones((len(xyz), 1))])
    for k, cal in enumerate(cals):
        p = cal.intrinsic @ cal.extrinsic[:3, :]
        for i, x in enumerate(xh):
            q = p @ x
            if q[2] <= depth_min:
                continue
            uf, vf = q[0] / q[2], q[1] / q[2]
            u, v = int(np.floor(uf + 0.5)), int(np.floor(vf + 0.5))
            if 0 <= u < cal.width and 0 <= v < cal.height:
                rows.append((i, k, u, v, q[2], uf, vf))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def _weighted(out, rng):
    """Scalar probe: a fixed random linear functional of ``out``."""
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _away_from_zero(rng, shape, low=0.1):
    x = rng.uniform(low, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def primitive_case(name, rng):
    """(build, arrays) for one random configuration of a differentiable primitive."""
    from crossmodal import tensor as T

    n, m, k = (int(v) for v in rng.integers(1, 7, size=3))
    seed = int(rng.integers(2**32))

    def probe(out):
        return _weighted(out, np.random.default_rng(seed))

    x = rng.normal(size=(n, m))
    y = rng.normal(size=(n, m))
    rng_index = rng.integers(-1, n, size=int(rng.integers(1, 12)))
    pick_index = rng.integers(0, m, size=n)
    cases = {
        "add": (lambda a, b: probe(a + b), [x, y]),
        "sub": (lambda a, b: probe(a - b), [x, y]),
        "mul": (lambda a, b: probe(a * b), [x, y]),
        "div": (lambda a, b: probe(a / b), [x, _away_from_zero(rng, (n, m), 0.5)]),
        "neg": (lambda a: probe(-a), [x]),
        "bias_add": (lambda a, b: probe(a + b), [x, rng.normal(size=m)]),
        "scalar_mul": (lambda a, s: probe(a * s), [x, np.array(rng.normal())]),
        "exp": (lambda a: probe(T.exp(a)), [x]),
        "log": (lambda a: probe(T.log(a)), [rng.uniform(0.3, 3.0, size=(n, m))]),
        "relu": (lambda a: probe(T.relu(a)), [_away_from_zero(rng, (n, m))]),
        "tanh": (lambda a: probe(T.tanh(a)), [x]),
        "sigmoid": (lambda a: probe(T.sigmoid(a)), [3 * x]),
        "sum_axis0": (lambda a: probe(T.sum_(a, axis=0)), [x]),
        "sum_axis1": (lambda a: probe(T.sum_(a, axis=1)), [x]),
        "mean": (lambda a: probe(T.mean(a, axis=1)), [x]),
        "reshape": (lambda a: probe(T.reshape(a, (m, n))), [x]),
        "transpose": (lambda a: probe(T.transpose(a)), [x]),
        "matmul": (lambda a, b: probe(a @ b), [x, rng.normal(size=(m, k))]),
        "concat_cols": (lambda a, b: probe(T.concat_cols([a, b])), [x, rng.normal(size=(n, k))]),
        "cols": (lambda a: probe(T.cols(a, 0, max(1, m // 2))), [x]),
        "gather_rows": (lambda a: probe(T.gather_rows(a, rng_index)), [x]),
        "pick": (lambda a: probe(T.pick(a, pick_index)), [x]),
        "softmax_rows": (lambda a: probe(T.softmax_rows(a)), [x]),
        "log_softmax_rows": (lambda a: probe(T.log_softmax_rows(a)), [x]),
        "l2_normalize_rows": (lambda a: probe(T.l2_normalize_rows(a)), [x + np.sign(x)]),
    }
    return cases[name]


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "bias_add", "scalar_mul", "exp", "log", "relu", "tanh", "sigmoid",
    "sum_axis0", "sum_axis1", "mean", "reshape", "transpose", "matmul", "concat_cols", "cols",
    "gather_rows", "pick", "softmax_rows", "log_softmax_rows", "l2_normalize_rows",
)


# acceptance bookkeeping: one line per criterion, printed in the terminal summary
CRITERIA: dict[int, str] = {}


class criterion:
    """Context manager that records PASS/FAIL for a numbered criterion.

    Put the measured values into ``.detail`` before asserting so they show
    up on the summary line either way.
    """

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"[{status}] criterion {self.number}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        CRITERIA[self.number] = line
        print(line)
        return False
