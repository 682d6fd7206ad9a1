"""Forward-pass throughput measurement with per-block time accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad


class Timer:
    """Accumulates wall time per category; fed to the model's forward."""

    def __init__(self):
        self.totals = {}

    def add(self, key: str, seconds: float) -> None:
        self.totals[key] = self.totals.get(key, 0.0) + seconds


@dataclass
class BenchReport:
    images_per_second: float
    seconds_per_image: float
    shares: dict  # category -> percent of accounted forward time
    repeats: int

    def rows(self):
        out = [
            ("images_per_second", f"{self.images_per_second:.4f}"),
            ("seconds_per_image", f"{self.seconds_per_image:.4f}"),
            ("repeats", str(self.repeats)),
        ]
        out += [(f"share_{k}", f"{v:.2f}") for k, v in self.shares.items()]
        return out


def run_bench(model, repeats: int = 3, batch_size: int = 1, seed: int = 0) -> BenchReport:
    h, w = model.cfg.input_size
    rng = np.random.default_rng(seed)
    images = Tensor(rng.uniform(-1.0, 1.0, size=(batch_size, 3, h, w)).astype(model.dtype))
    timer = Timer()
    with no_grad():
        model.forward(images, timer=Timer())  # warm-up, not measured
        t0 = time.perf_counter()
        for _ in range(repeats):
            model.forward(images, timer=timer)
        elapsed = time.perf_counter() - t0
    accounted = sum(timer.totals.values())
    shares = {k: 100.0 * v / accounted for k, v in sorted(timer.totals.items())}
    n_images = repeats * batch_size
    return BenchReport(
        images_per_second=n_images / elapsed,
        seconds_per_image=elapsed / n_images,
        shares=shares,
        repeats=repeats,
    )


def format_bench(report: BenchReport) -> str:
    lines = ["key\tvalue"]
    lines += [f"{k}\t{v}" for k, v in report.rows()]
    return "\n".join(lines) + "\n"
