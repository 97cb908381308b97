"""Slow, obviously-correct reference implementations used only by the tests."""

import math

import numpy as np


def winding_number(x, y, vertices):
    """Sunday's crossing-direction winding number of point (x, y)."""
    wn = 0
    n = len(vertices)
    for k in range(n):
        ax, ay = vertices[k]
        bx, by = vertices[(k + 1) % n]
        cross = (bx - ax) * (y - ay) - (x - ax) * (by - ay)
        if ay <= y:
            if by > y and cross > 0:
                wn += 1
        elif by <= y and cross < 0:
            wn -= 1
    return wn


def rasterize_bruteforce(polygons, width, height):
    mask = np.zeros((height, width), dtype=np.uint8)
    for i in range(height):
        for j in range(width):
            if any(winding_number(j + 0.5, i + 0.5, [tuple(v) for v in p]) != 0 for p in polygons):
                mask[i, j] = 1
    return mask


def random_star_polygon(rng, center, r_min, r_max, n_min=3, n_max=12):
    """Star-shaped (hence simple) polygon with vertices sorted by angle."""
    n = int(rng.integers(n_min, n_max + 1))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    radii = rng.uniform(r_min, r_max, size=n)
    cx, cy = center
    return np.c_[cx + radii * np.cos(angles), cy + radii * np.sin(angles)]


def ellipse_bruteforce(ellipses, size):
    mask = np.zeros((size, size), dtype=np.uint8)
    for i in range(size):
        for j in range(size):
            x, y = j + 0.5, i + 0.5
            for e in ellipses:
                dx, dy = x - e["cx"], y - e["cy"]
                u = dx * math.cos(e["theta"]) + dy * math.sin(e["theta"])
                v = -dx * math.sin(e["theta"]) + dy * math.cos(e["theta"])
                if (u / e["a"]) ** 2 + (v / e["b"]) ** 2 <= 1.0:
                    mask[i, j] = 1
                    break
    return mask


def set_count_scores(pred, truth):
    """IoU and Dice from explicit coordinate sets."""
    p = {(i, j) for i, j in zip(*np.nonzero(pred))}
    t = {(i, j) for i, j in zip(*np.nonzero(truth))}
    inter, union = len(p & t), len(p | t)
    iou = 1.0 if union == 0 else inter / union
    dice = 1.0 if len(p) + len(t) == 0 else 2 * inter / (len(p) + len(t))
    return iou, dice


def gradient_check(seed=0, n_params=20, step=1e-3):
    """Relative errors between autograd and central differences, in float64."""
    import torch

    from styleaug.segnet import SegNetConfig, build_model, forward
    from styleaug.trainer import compute_loss

    model = build_model(SegNetConfig.preset("tiny", seed=seed)).double()
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 16, 16, generator=g) < 0.4).double()

    def loss_fn():
        return compute_loss(forward(model, x, "eval"), y)

    model.zero_grad()
    loss_fn().backward()
    params = list(model.named_parameters())
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[k]
            idx = np.unravel_index(flat - offsets[k], p.shape)
            analytic = float(p.grad[idx])
            orig = float(p[idx])
            p[idx] = orig + step
            up = float(loss_fn())
            p[idx] = orig - step
            down = float(loss_fn())
            p[idx] = orig
            numeric = (up - down) / (2 * step)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            errors.append((abs(analytic - numeric) / scale, name, analytic, numeric))
    return errors
