"""Effective-number class weighting and the weighted sampling stream.

Each class of size n is weighted by the reciprocal of its effective number
E_n = (1 - beta^n) / (1 - beta), normalized so the weights of the populated
classes sum to their count. The sampler draws record indices with replacement,
each record carrying its class weight, so with beta close to 1 rare classes
surface as often as common ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import SamplerError
from .manifest import SampleRecord

# above this beta the closed form loses precision; sum the geometric series
_SUMMATION_BETA = 1.0 - 1e-6
_SUMMATION_MAX_TERMS = 10_000_000


def effective_number(n: int, beta: float) -> float:
    """E_n = (1 - beta^n) / (1 - beta), computed stably for beta near 1."""
    if n < 1:
        raise SamplerError(f"class size must be >= 1, got {n}")
    if not 0.0 <= beta < 1.0:
        raise SamplerError(f"beta must be in [0, 1), got {beta}")
    if beta == 0.0:
        return 1.0
    if beta >= _SUMMATION_BETA and n <= _SUMMATION_MAX_TERMS:
        total = 0.0
        term = 1.0
        for _ in range(n):
            total += term
            term *= beta
        return total
    # 1 - beta^n = -expm1(n * log(beta)), accurate for beta^n near 1
    return -math.expm1(n * math.log(beta)) / (1.0 - beta)


@dataclass(frozen=True)
class ClassWeights:
    """Per-class sampling weights derived from effective numbers.

    Zero-count classes get weight 0 and are excluded from normalization; the
    populated classes' weights sum to their number.
    """
    codes: tuple[str, ...]
    beta: float
    counts: tuple[int, ...]
    effective: tuple[float, ...]
    weight: tuple[float, ...]

    def weight_of(self, code: str) -> float:
        return self.weight[self.codes.index(code)]


def compute_class_weights(counts: dict[str, int] | Sequence[int], beta: float,
                          codes: Sequence[str] | None = None) -> ClassWeights:
    if isinstance(counts, dict):
        codes = tuple(counts.keys())
        count_list = [counts[c] for c in codes]
    else:
        count_list = list(counts)
        codes = tuple(codes) if codes is not None else tuple(str(i) for i in range(len(count_list)))
    if len(codes) != len(count_list):
        raise SamplerError("codes and counts length mismatch")
    if any(c < 0 for c in count_list):
        raise SamplerError("class counts must be >= 0")
    populated = [i for i, c in enumerate(count_list) if c > 0]
    if not populated:
        raise SamplerError("all class counts are zero")
    eff = [effective_number(c, beta) if c > 0 else 0.0 for c in count_list]
    inv = [1.0 / eff[i] for i in populated]
    norm = len(populated) / sum(inv)
    weights = [0.0] * len(count_list)
    for i, v in zip(populated, inv):
        weights[i] = v * norm
    return ClassWeights(
        codes=codes,
        beta=beta,
        counts=tuple(count_list),
        effective=tuple(eff),
        weight=tuple(weights),
    )


def record_probabilities(records: Sequence[SampleRecord], weights: ClassWeights) -> np.ndarray:
    """Per-record draw probabilities: proportional to the record's class weight."""
    if not records:
        raise SamplerError("no records to sample from")
    w = np.array([weights.weight_of(r.label) for r in records], dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise SamplerError("all candidate records have zero sampling weight")
    return w / total


def weighted_sample_stream(records: Sequence[SampleRecord], weights: ClassWeights,
                           seed: int, chunk: int = 8192) -> Iterator[int]:
    """Infinite stream of record indices, sampled with replacement under `seed`.

    Each consumer must own its own stream; streams are stateful generators.
    """
    probs = record_probabilities(records, weights)
    rng = np.random.default_rng(seed)
    n = len(records)
    while True:
        yield from rng.choice(n, size=chunk, p=probs).tolist()
