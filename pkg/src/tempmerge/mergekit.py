"""Uniform parameter averaging and weight-change analysis."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .encoder import TENSOR_NAMES, EncoderParams


class MergeError(ValueError):
    pass


def _check_compatible(models: Sequence[EncoderParams]) -> None:
    ref = models[0]
    for i, m in enumerate(models[1:], 1):
        if m.vocab_hash != ref.vocab_hash:
            raise MergeError(f"vocab mismatch in tensor 'embed': model {i} vocab hash "
                             f"{m.vocab_hash[:12] or '<none>'} != {ref.vocab_hash[:12] or '<none>'}")
        for name in TENSOR_NAMES:
            a, b = ref.tensors()[name], m.tensors()[name]
            if a.shape != b.shape:
                raise MergeError(f"shape mismatch in tensor '{name}': model {i} has {b.shape}, "
                                 f"expected {a.shape}")


def _pairwise_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if len(arrays) == 1:
        return arrays[0].copy()
    mid = len(arrays) // 2
    return _pairwise_sum(arrays[:mid]) + _pairwise_sum(arrays[mid:])


def merge_average(models: Sequence[EncoderParams]) -> EncoderParams:
    """Elementwise mean of every tensor, summed pairwise in member order."""
    if len(models) == 0:
        raise MergeError("nothing to merge")
    _check_compatible(models)
    k = len(models)
    merged = {name: _pairwise_sum([m.tensors()[name] for m in models]) / k for name in TENSOR_NAMES}
    return EncoderParams(merged["embed"], merged["proj_w"], merged["proj_b"], models[0].vocab_hash)


def merge_sequence(models: Sequence[EncoderParams]) -> List[EncoderParams]:
    """Prefix merges: element ``j`` averages the first ``j + 1`` models.

    Callers supply the order (most to least frequent specifier for the
    merge-count curve).
    """
    if len(models) == 0:
        raise MergeError("empty merge sequence")
    return [merge_average(models[: j + 1]) for j in range(len(models))]


def weight_change(base: EncoderParams, tuned: EncoderParams) -> Tuple[float, Dict[str, float]]:
    """Sum over tensors of ``||tuned - base||_F``, plus the per-tensor terms."""
    per = {}
    for name in TENSOR_NAMES:
        a, b = base.tensors()[name], tuned.tensors()[name]
        if a.shape != b.shape:
            raise MergeError(f"shape mismatch in tensor '{name}': {b.shape} vs {a.shape}")
        per[name] = float(np.linalg.norm((b - a).ravel()))
    return float(sum(per.values())), per


@dataclass
class MergeReport:
    members: List[str]
    member_change: Dict[str, float]
    member_tensor_change: Dict[str, Dict[str, float]]
    merged_change: float
    merged_tensor_change: Dict[str, float]
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_member_change(self) -> float:
        return float(np.mean([self.member_change[m] for m in self.members]))

    def convex(self, slack: float = 1e-9) -> bool:
        """Merged change never exceeds the members' mean change (triangle inequality)."""
        return self.merged_change <= self.mean_member_change * (1 + slack) + slack

    def assert_convex(self) -> None:
        if not self.convex():
            raise MergeError(f"norm convexity violated: merged {self.merged_change!r} > "
                             f"mean of members {self.mean_member_change!r}")

    def to_text(self) -> str:
        lines = [f"members = {','.join(self.members)}"]
        for m in self.members:
            lines.append(f"change.{m} = {self.member_change[m]:.6f}")
        lines.append(f"change.mean_members = {self.mean_member_change:.6f}")
        lines.append(f"change.merged = {self.merged_change:.6f}")
        for k, v in self.extra.items():
            lines.append(f"change.{k} = {v:.6f}")
        lines.append(f"convex = {str(self.convex()).lower()}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "tensor", "magnitude"])
        for m in self.members:
            for t in TENSOR_NAMES:
                w.writerow([m, t, f"{self.member_tensor_change[m][t]:.10g}"])
        for t in TENSOR_NAMES:
            w.writerow(["merged", t, f"{self.merged_tensor_change[t]:.10g}"])
        return buf.getvalue()


def merge_report(base: EncoderParams, members: Dict[str, EncoderParams],
                 merged: EncoderParams) -> MergeReport:
    names = list(members)
    totals, tensors = {}, {}
    for n in names:
        totals[n], tensors[n] = weight_change(base, members[n])
    mtot, mten = weight_change(base, merged)
    return MergeReport(names, totals, tensors, mtot, mten)
