"""Small torch helpers shared by the network modules."""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed global torch seed without disturbing the caller's stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def deterministic_mode(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def image_batch_to_tensor(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def mask_batch_to_tensor(masks) -> torch.Tensor:
    arr = np.stack([np.asarray(m, dtype=np.float32) for m in masks])
    return torch.from_numpy(arr)


def tensor_to_images(x: torch.Tensor) -> list[np.ndarray]:
    arr = x.detach().cpu().float().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a) for a in arr]


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
