"""Independent oracles shared by the test modules."""

import math

import numpy as np

from samclr import tensor as T
from samclr.tensor import Tape, Tensor


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar f() w.r.t. each array (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = f()
            arr[idx] = orig - h
            down = f()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def check_op_grad(build, shapes, rng, h=1e-5):
    """Reverse-mode vs finite-difference gradients of sum(build(*inputs) * probe)."""
    inputs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    with Tape():
        probe_shape = build(*inputs).shape
    probe = rng.normal(size=probe_shape)

    def f():
        return float((build(*[Tensor(t.data) for t in inputs]).data * probe).sum())

    from samclr import tensor as T
    with Tape() as tape:
        out = build(*inputs)
        loss = T.sum(T.mul(out, Tensor(probe)))
        tape.backward(loss)
    numeric = numeric_grad(f, [t.data for t in inputs], h)
    return max(rel_err(t.grad, g) for t, g in zip(inputs, numeric))


def nt_xent_reference(z, tau):
    """Double-loop NT-Xent over ordered positive pairs (2i, 2i+1), pure Python math."""
    m = len(z)
    rows = [[float(v) for v in row] for row in z]

    def sim(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        return dot / (na * nb)

    total = 0.0
    for i in range(m):
        j = i + 1 if i % 2 == 0 else i - 1
        terms = [sim(rows[i], rows[k]) / tau for k in range(m) if k != i]
        top = max(terms)
        denom = top + math.log(sum(math.exp(t - top) for t in terms))
        total += denom - sim(rows[i], rows[j]) / tau
    return total / m


def random_mask(rng, width, height, max_side=None):
    """Random filled rectangle or ellipse, at least one pixel set."""
    from samclr.masks import RegionMask
    max_side = max_side or max(width, height)
    w = int(rng.integers(1, min(width, max_side) + 1))
    h = int(rng.integers(1, min(height, max_side) + 1))
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    bitmap = np.zeros((height, width), dtype=bool)
    if rng.random() < 0.5:
        bitmap[y0:y0 + h, x0:x0 + w] = True
    else:
        ys, xs = np.mgrid[0:h, 0:w] + 0.5
        inside = ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2 <= 1
        inside[h // 2, w // 2] = True
        bitmap[y0:y0 + h, x0:x0 + w] = inside
    return RegionMask(bitmap)


def random_region_set(rng, width, height, max_regions=5, image_id="img"):
    from samclr.masks import RegionSet
    n = int(rng.integers(1, max_regions + 1))
    return RegionSet(image_id, [random_mask(rng, width, height) for _ in range(n)])


# Twenty-plus randomized shape configurations across all differentiable ops.
GRADIENT_CASES = [
    ("add", lambda a, b: T.add(a, b), [(3, 4), (3, 4)]),
    ("add_bias", lambda a, b: T.add(a, b), [(5, 3), (1, 3)]),
    ("sub", lambda a, b: T.sub(a, b), [(2, 3, 2), (2, 3, 2)]),
    ("mul", lambda a, b: T.mul(a, b), [(4, 2), (4, 2)]),
    ("mul_scalar", lambda a, b: T.mul(a, b), [(3, 3), ()]),
    ("neg", T.neg, [(6,)]),
    ("scale", lambda a: T.scale(a, -1.7), [(2, 5)]),
    ("relu", T.relu, [(4, 5)]),
    ("matmul_1", T.matmul, [(1, 1), (1, 1)]),
    ("matmul_2", T.matmul, [(2, 7), (7, 3)]),
    ("matmul_3", T.matmul, [(6, 2), (2, 6)]),
    ("transpose", T.transpose, [(3, 5)]),
    ("conv_1x1", lambda x, k: T.conv2d(x, k, 1), [(1, 3, 4, 4), (2, 3, 1, 1)]),
    ("conv_s2", lambda x, k: T.conv2d(x, k, 2), [(2, 3, 9, 9), (4, 3, 3, 3)]),
    ("conv_rect", lambda x, k: T.conv2d(x, k, 1), [(1, 2, 5, 7), (2, 2, 2, 3)]),
    ("conv_s3", lambda x, k: T.conv2d(x, k, 3), [(3, 1, 10, 8), (2, 1, 4, 2)]),
    ("gap", T.global_avg_pool, [(3, 2, 3, 3)]),
    ("gap_1x1", T.global_avg_pool, [(2, 4, 1, 1)]),
    ("l2norm_rows", T.l2_normalize, [(3, 6)]),
    ("l2norm_vec", T.l2_normalize, [(5,)]),
    ("mean", T.mean, [(4, 3)]),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    ("lse", T.logsumexp_rows, [(5, 4)]),
    ("lse_exclude", lambda a: T.logsumexp_rows(a, exclude=np.eye(4, dtype=bool)), [(4, 4)]),
    ("pick", lambda a: T.pick(a, np.array([1, 0, 3, 2])), [(4, 4)]),
    ("sum", T.sum, [(2, 3, 4)]),
    ("elementwise_mul", lambda a, b: T.elementwise("mul", a, b), [(3, 2), (3, 2)]),
]
