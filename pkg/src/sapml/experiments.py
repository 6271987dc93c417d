"""Configurations and analyses for the reference experiments: sine regression
comparisons, structure matching over the task families, pruning and the
convolutional smoke run."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .harness import Checkpoint, RunConfig, report_strengths
from .tasks import enumerate_task_families

# inner learning rates: the MAML convention for full-weight learners, and a
# larger step for SAP whose adaptable parameters sit behind softmax weights
INNER_LR = {"sap": 0.05, "maml": 0.01, "tnet": 0.01}
OUTER_LR = 0.001

# intrinsic operations of the sine template and the family parameter they model
STRUCTURE_POOL = ["identity", "scalar_scale", "scalar_shift"]
INTRINSIC_OPS = {
    "input scale": ("O1", "scalar_scale", "frequency"),
    "input shift": ("O1", "scalar_shift", "phase"),
    "output scale": ("O4", "scalar_scale", "amplitude"),
    "output shift": ("O4", "scalar_shift", "offset"),
}


def sine_config(learner: str, seed: int, total_tasks: int = 70000, order: str = "second", **overrides) -> RunConfig:
    """5-shot sine regression on the 1-40-40-1 backbone, T=1 for training, tested at T=1 and T=10."""
    base = dict(task="sine", learner=learner, sizes=[1, 40, 40, 1], svd_ranks=[5, 10, 15], k_shot=5, n_query=50,
                inner_lr=INNER_LR[learner], outer_lr=OUTER_LR, inner_steps=1, meta_batch=4, order=order,
                total_train_tasks=total_tasks, validate_every=2500, val_tasks=500, test_tasks=2000,
                test_steps=[1, 10], seed=seed)
    base.update(overrides)
    return RunConfig(**base)


def structure_config(family: str, seed: int, total_tasks: int = 10000, **overrides) -> RunConfig:
    """20-shot family regression, T=1, with only the intrinsic operations at the input and output."""
    base = dict(task="family", family=family, learner="sap", sizes=[1, 40, 40, 1], k_shot=20, n_query=50,
                pools=[STRUCTURE_POOL, [], [], STRUCTURE_POOL], inner_lr=INNER_LR["sap"], outer_lr=OUTER_LR,
                inner_steps=1, meta_batch=4, total_train_tasks=total_tasks, validate_every=2500, val_tasks=500,
                test_tasks=500, test_steps=[1], seed=seed)
    base.update(overrides)
    return RunConfig(**base)


def image_config(seed: int, total_tasks: int = 5000, **overrides) -> RunConfig:
    """2-way 1-shot 8x8 synthetic images with the default convolutional pools."""
    base = dict(task="image", learner="sap", n_way=2, k_shot=1, n_query=15, side=8, channels=8, blocks=2,
                inner_lr=0.5, outer_lr=OUTER_LR, inner_steps=1, meta_batch=4, total_train_tasks=total_tasks,
                validate_every=1000, val_tasks=200, test_tasks=500, test_steps=[1], seed=seed)
    base.update(overrides)
    return RunConfig(**base)


@dataclass
class StructureResult:
    op: str
    mean_with: float
    mean_without: float
    t_stat: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05 and self.mean_with > self.mean_without


def intrinsic_strengths(ckpt: Checkpoint) -> dict[str, float]:
    table = {(r.op_set, r.op): r.mean for r in report_strengths(ckpt)}
    return {name: table[(s, op)] for name, (s, op, _) in INTRINSIC_OPS.items()}


def structure_matching(runs: list[tuple[str, dict[str, float]]]) -> list[StructureResult]:
    """One-sided two-sample t-test per intrinsic operation: strength in runs whose
    family varies the matching parameter versus runs whose family does not."""
    out = []
    for name, (_, _, param) in INTRINSIC_OPS.items():
        with_op = [s[name] for fam, s in runs if param in fam.split("+")]
        without = [s[name] for fam, s in runs if param not in fam.split("+")]
        t, p = stats.ttest_ind(with_op, without, alternative="greater")
        out.append(StructureResult(name, float(np.mean(with_op)), float(np.mean(without)), float(t), float(p)))
    return out


def family_names() -> list[str]:
    return [f.name for f in enumerate_task_families()]


__all__ = [
    "INNER_LR", "OUTER_LR", "STRUCTURE_POOL", "INTRINSIC_OPS", "sine_config", "structure_config", "image_config",
    "StructureResult", "intrinsic_strengths", "structure_matching", "family_names",
]
