"""Independent reference implementations used as oracles by the tests.

Everything here is written the slow, obvious way (explicit loops, direct
cosine sums, central finite differences) precisely so it shares no code with
the package under test.
"""

import math

import numpy as np
import torch


def brute_force_dct2(patch: np.ndarray) -> np.ndarray:
    """Direct O(p^4) orthonormal 2D DCT-II of a single p x p patch."""
    p = patch.shape[0]
    assert patch.shape == (p, p)
    out = np.zeros((p, p), dtype=np.float64)
    for u in range(p):
        for v in range(p):
            au = math.sqrt(1.0 / p) if u == 0 else math.sqrt(2.0 / p)
            av = math.sqrt(1.0 / p) if v == 0 else math.sqrt(2.0 / p)
            s = 0.0
            for i in range(p):
                for j in range(p):
                    s += (patch[i, j]
                          * math.cos((2 * i + 1) * u * math.pi / (2 * p))
                          * math.cos((2 * j + 1) * v * math.pi / (2 * p)))
            out[u, v] = au * av * s
    return out


def brute_force_idct2(coeffs: np.ndarray) -> np.ndarray:
    """Direct inverse of brute_force_dct2 (orthonormal DCT-III sum)."""
    p = coeffs.shape[0]
    out = np.zeros((p, p), dtype=np.float64)
    for i in range(p):
        for j in range(p):
            s = 0.0
            for u in range(p):
                for v in range(p):
                    au = math.sqrt(1.0 / p) if u == 0 else math.sqrt(2.0 / p)
                    av = math.sqrt(1.0 / p) if v == 0 else math.sqrt(2.0 / p)
                    s += (au * av * coeffs[u, v]
                          * math.cos((2 * i + 1) * u * math.pi / (2 * p))
                          * math.cos((2 * j + 1) * v * math.pi / (2 * p)))
            out[i, j] = s
    return out


def zigzag_by_sorting(p: int) -> list:
    """Zigzag order derived independently: sort by diagonal, alternate direction."""
    pairs = [(u, v) for u in range(p) for v in range(p)]
    return sorted(pairs, key=lambda uv: (uv[0] + uv[1],
                                         uv[0] if (uv[0] + uv[1]) % 2 else -uv[0]))


def adaptive_windows(n: int, g: int) -> list:
    """(start, end) index windows used by adaptive pooling."""
    return [(math.floor(i * n / g), math.ceil((i + 1) * n / g)) for i in range(g)]


def window_average(grid: np.ndarray, g: int) -> np.ndarray:
    """Mean over adaptive windows of a (C, h, w) array -> (C, g, g)."""
    c, h, w = grid.shape
    out = np.zeros((c, g, g), dtype=np.float64)
    for ci in range(c):
        for yi, (y0, y1) in enumerate(adaptive_windows(h, g)):
            for xi, (x0, x1) in enumerate(adaptive_windows(w, g)):
                out[ci, yi, xi] = grid[ci, y0:y1, x0:x1].mean()
    return out


def window_max(grid: np.ndarray, g: int) -> np.ndarray:
    c, h, w = grid.shape
    out = np.zeros((c, g, g), dtype=np.float64)
    for ci in range(c):
        for yi, (y0, y1) in enumerate(adaptive_windows(h, g)):
            for xi, (x0, x1) in enumerate(adaptive_windows(w, g)):
                out[ci, yi, xi] = grid[ci, y0:y1, x0:x1].max()
    return out


def gram_by_loops(regions: np.ndarray) -> np.ndarray:
    """(n, c) region rows -> (n, n) pairwise dot products via scalar loops."""
    n, c = regions.shape
    out = np.zeros((n, n), dtype=np.float64)
    for a in range(n):
        for b in range(n):
            s = 0.0
            for k in range(c):
                s += regions[a, k] * regions[b, k]
            out[a, b] = s
    return out


def mse_by_loops(a: np.ndarray, b: np.ndarray) -> float:
    fa, fb = a.reshape(-1), b.reshape(-1)
    assert fa.shape == fb.shape
    return float(sum((x - y) ** 2 for x, y in zip(fa, fb)) / len(fa))


def dice_loss_by_loops(fg: np.ndarray, target: np.ndarray, eps: float,
                       clamp: float = 1e-7) -> float:
    """Per-sample foreground Dice loss, batch mean. fg, target: (B, H, W)."""
    losses = []
    for b in range(fg.shape[0]):
        inter = psum = gsum = 0.0
        for y in range(fg.shape[1]):
            for x in range(fg.shape[2]):
                p = min(max(fg[b, y, x], clamp), 1.0 - clamp)
                t = float(target[b, y, x])
                inter += p * t
                psum += p
                gsum += t
        losses.append(1.0 - (2.0 * inter + eps) / (psum + gsum + eps))
    return float(np.mean(losses))


def ce_by_loops(probs: np.ndarray, labels: np.ndarray, clamp: float = 1e-7) -> float:
    """Pixel-mean cross entropy from probabilities. probs: (B, K, H, W)."""
    total, count = 0.0, 0
    for b in range(probs.shape[0]):
        for y in range(probs.shape[2]):
            for x in range(probs.shape[3]):
                p = min(max(probs[b, labels[b, y, x], y, x], clamp), 1.0 - clamp)
                total += -math.log(p)
                count += 1
    return total / count


def central_difference(fn, x: torch.Tensor, index: tuple, eps: float = 1e-6) -> float:
    """Two-sided finite-difference derivative of a scalar fn at one coordinate."""
    with torch.no_grad():
        plus = x.clone()
        plus[index] += eps
        minus = x.clone()
        minus[index] -= eps
    return (fn(plus) - fn(minus)) / (2.0 * eps)


def check_gradient(fn, x: torch.Tensor, rng: np.random.Generator,
                   n_coords: int = 6, eps: float = 1e-6, rtol: float = 1e-4) -> None:
    """Compare autograd gradients of scalar fn against central differences.

    ``x`` must be a float64 leaf tensor. A handful of randomly chosen
    coordinates are probed; relative error is measured against the larger of
    the two magnitudes with an absolute floor.
    """
    assert x.dtype == torch.float64
    leaf = x.clone().requires_grad_(True)
    fn(leaf).backward()
    grad = leaf.grad
    assert grad is not None, "no gradient flowed to the input"
    flat_count = x.numel()
    picks = rng.choice(flat_count, size=min(n_coords, flat_count), replace=False)
    for flat in picks:
        index = np.unravel_index(int(flat), x.shape)
        numeric = central_difference(lambda t: float(fn(t).detach()), x, index, eps)
        analytic = float(grad[index])
        scale = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / scale <= rtol, (
            f"gradient mismatch at {index}: numeric {numeric}, analytic {analytic}")


def check_parameter_gradient(module: torch.nn.Module, make_loss,
                             rng: np.random.Generator, n_params: int = 8,
                             eps: float = 1e-6, rtol: float = 1e-4) -> None:
    """FD-check gradients w.r.t. randomly sampled parameter coordinates.

    ``make_loss`` is a zero-argument callable returning the scalar loss
    tensor; the module must be float64.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    make_loss().backward()
    order = rng.permutation(len(params))[:n_params]
    for pi in order:
        name, p = params[int(pi)]
        assert p.dtype == torch.float64, f"{name} is not float64"
        flat = int(rng.integers(p.numel()))
        index = np.unravel_index(flat, p.shape)
        with torch.no_grad():
            p[index] += eps
            up = float(make_loss())
            p[index] -= 2 * eps
            down = float(make_loss())
            p[index] += eps
        numeric = (up - down) / (2 * eps)
        analytic = 0.0 if p.grad is None else float(p.grad[index])
        scale = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / scale <= rtol, (
            f"parameter gradient mismatch for {name}{index}: "
            f"numeric {numeric}, analytic {analytic}")
