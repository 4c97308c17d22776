"""Compute-cost arithmetic for early-exit retrieval, plus a wall-clock bench.

The closed-form side reproduces the published per-variant GFLOP figures
from four constants: a 24-layer vision tower at 162.03 GFLOPs total,
13.3 GFLOPs of text encoding, 2.45 GFLOPs of routing overhead, and a
49.5/50.5 simple/complex traffic split. Layer cost is treated as uniform
(162.03/24 each), which is the only reading that matches the published
table. The projection extrapolates those savings to a production photo
workload; grid carbon intensity is a parameter (0.124 kg/kWh back-derived
from the published tonnage).
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass
from statistics import median

from icar.errors import ContractError


@dataclass(frozen=True)
class CostParams:
    vision_total_gflops: float = 162.03
    vision_layers: int = 24
    text_gflops: float = 13.3
    routing_gflops: float = 2.45
    p_simple: float = 0.495
    p_complex: float = 0.505

    def __post_init__(self):
        if abs(self.p_simple + self.p_complex - 1.0) > 1e-9:
            raise ContractError(
                f"p_simple + p_complex must be 1, got "
                f"{self.p_simple + self.p_complex}"
            )
        if min(self.p_simple, self.p_complex) < 0.0:
            raise ContractError("complexity probabilities must be >= 0")
        if self.vision_layers < 1:
            raise ContractError(
                f"vision_layers must be >= 1, got {self.vision_layers}"
            )
        for name in ("vision_total_gflops", "text_gflops", "routing_gflops"):
            if getattr(self, name) <= 0.0:
                raise ContractError(f"{name} must be > 0")


@dataclass(frozen=True)
class ProjectionParams:
    daily_images: float = 6e9
    throughput_img_per_s: float = 500.0
    gpu_power_kw: float = 0.5
    pue: float = 1.10
    days_per_year: float = 365.0
    grid_intensity_kg_per_kwh: float = 0.124
    savings_fraction: float = 0.20

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0.0:
                raise ContractError(f"{name} must be > 0")


def per_layer_gflops(params: CostParams = CostParams()) -> float:
    return params.vision_total_gflops / params.vision_layers


def expected_gflops(params: CostParams, exit_layer: int) -> float:
    """Traffic-weighted cost of the routed system with early exit at k.

    Simple images run k of L vision layers, complex ones all L; every
    image pays routing and text costs.
    """
    k, layers = exit_layer, params.vision_layers
    if not 1 <= k <= layers:
        raise ContractError(
            f"exit_layer must lie in [1, {layers}], got {k}"
        )
    vision = params.vision_total_gflops
    return (params.p_simple * (k / layers) * vision
            + params.p_complex * vision
            + params.routing_gflops + params.text_gflops)


def baseline_gflops(params: CostParams = CostParams()) -> float:
    """Full-depth dual-encoder cost: no routing stage to pay for."""
    return params.vision_total_gflops + params.text_gflops


def speedup_estimate(params: CostParams, exit_layer: int) -> float:
    return baseline_gflops(params) / expected_gflops(params, exit_layer)


def production_projection(params: ProjectionParams = ProjectionParams()) -> dict:
    """Fleet-scale savings estimate from the GFLOP reduction.

    GPU-hours follow from daily volume over sustained throughput; energy
    multiplies by device power and datacenter PUE; the savings fraction is
    the share of that energy the early exits remove.
    """
    daily_gpu_hours = params.daily_images / params.throughput_img_per_s / 3600.0
    annual_kwh = (daily_gpu_hours * params.gpu_power_kw * params.pue
                  * params.days_per_year)
    annual_kwh_saved = annual_kwh * params.savings_fraction
    return {
        "daily_gpu_hours": daily_gpu_hours,
        "daily_gpu_hours_saved": daily_gpu_hours * params.savings_fraction,
        "annual_kwh": annual_kwh,
        "annual_kwh_saved": annual_kwh_saved,
        "annual_co2_tonnes_saved":
            annual_kwh_saved * params.grid_intensity_kg_per_kwh / 1000.0,
    }


def measure_throughput(encode_fn, images, warmup: int = 10,
                       repetitions: int = 3) -> dict:
    """Wall-clock images/second for an encoder over several repetitions.

    ``encode_fn(image)`` must return the number of layers it ran, which
    feeds the layers-used histogram (counted once; repetitions only affect
    timing). Warmup calls are excluded from timing. Reports the median
    rate over repetitions plus the max-min spread (None for a single
    repetition).
    """
    images = list(images)
    if not images:
        raise ContractError("cannot benchmark an empty dataset")
    if repetitions < 1:
        raise ContractError(f"repetitions must be >= 1, got {repetitions}")
    if warmup < 0:
        raise ContractError(f"warmup must be >= 0, got {warmup}")
    for i in range(warmup):
        encode_fn(images[i % len(images)])
    histogram = Counter()
    rates = []
    for rep in range(repetitions):
        start = time.perf_counter()
        layers = [encode_fn(image) for image in images]
        elapsed = time.perf_counter() - start
        rates.append(len(images) / elapsed)
        if rep == 0:
            histogram.update(int(v) for v in layers)
    return {
        "images_per_second": median(rates),
        "spread": max(rates) - min(rates) if repetitions > 1 else None,
        "rates": rates,
        "layers_histogram": dict(sorted(histogram.items())),
        "n_images": len(images),
    }
