"""Target-driven sanitization.

Each round re-measures the target's influence on the current model,
standardizes it over training instances labeled with the target's current
(adversarial) prediction, removes every such instance whose anomaly score
exceeds the round's cutoff, and retrains.  The loop ends when the target's
prediction changes, when a removal would push the total removed past
``max_removed_fraction`` of the original training set (that removal is not
applied), or after ``max_iterations`` rounds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigError
from .influence import GAS, EstimatorConfig, batch_influence
from .robust import anomaly_scores
from .trainer import BatchLog, CheckpointStore, TrainConfig, derive_seed, train

log = logging.getLogger(__name__)

MITIGATED = "mitigated"
SAFEGUARD_TRIPPED = "safeguard_tripped"
MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class MitigationConfig:
    initial_cutoff: float = 3.0
    anneal_step: float = 0.25
    anneal_step_count: int = 4
    max_removed_fraction: float = 0.1
    max_iterations: int = 50
    estimator: EstimatorConfig = GAS
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.initial_cutoff > 0:
            raise ConfigError("initial_cutoff: must be > 0")
        if self.anneal_step < 0:
            raise ConfigError("anneal_step: must be >= 0")
        if self.anneal_step_count < 1:
            raise ConfigError("anneal_step_count: must be >= 1")
        if not 0 < self.max_removed_fraction <= 1:
            raise ConfigError("max_removed_fraction: must be in (0, 1]")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations: must be >= 1")


def cutoff_at(l: int, config: MitigationConfig) -> float:
    """zeta_l = zeta_initial - psi * floor(l / step_count)."""
    if l < 0:
        raise ValueError("iteration index must be >= 0")
    return config.initial_cutoff - config.anneal_step * (l // config.anneal_step_count)


@dataclass
class MitigationRound:
    cutoff: float
    removed_ids: list[int]
    target_loss: float
    target_pred: int
    train_size: int


@dataclass
class MitigationOutcome:
    status: str
    adversarial_label: int
    rounds: list[MitigationRound]
    final_size: int
    final_params: np.ndarray
    store: CheckpointStore
    dataset: Dataset
    batch_log: BatchLog | None = None
    attempted_ids: list[int] = field(default_factory=list)  # removal refused by the safeguard

    @property
    def iterations(self) -> int:
        return len(self.rounds)

    @property
    def removed_ids(self) -> list[int]:
        return [i for r in self.rounds for i in r.removed_ids]

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "adversarial_label": self.adversarial_label,
            "iterations": [asdict(r) for r in self.rounds],
            "final_size": self.final_size,
            "removed_total": len(self.removed_ids),
            "safeguard_refused": self.attempted_ids,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def mitigate(store: CheckpointStore, dataset: Dataset, target_x, config: MitigationConfig,
             true_label: int | None = None, batch_log: BatchLog | None = None) -> MitigationOutcome:
    """Sanitize ``dataset`` until the target's current prediction changes.

    ``true_label`` is optional defender knowledge: when the target is
    already predicted as that label there is nothing to do.
    """
    spec = store.spec
    target_x = np.asarray(target_x, dtype=np.float64)
    y_adv = int(nn.predict(spec, store.final, target_x)[0])
    n_orig = len(dataset)
    budget = config.max_removed_fraction * n_orig
    current, cur_store, cur_log = dataset, store, batch_log
    rounds: list[MitigationRound] = []
    if true_label is not None and y_adv == int(true_label):
        return MitigationOutcome(MITIGATED, y_adv, rounds, n_orig, store.final, store, dataset, batch_log)

    removed_total = 0
    status = MAX_ITERATIONS
    refused: list[int] = []
    for l in range(config.max_iterations):
        v = batch_influence(cur_store, current, target_x, [-1], config.estimator, cur_log)[0].values
        sc = anomaly_scores(v, current.y == y_adv, class_label=y_adv)
        zeta = cutoff_at(l, config)
        ids = current.ids[sc.index]
        over = sc.scores > zeta
        if over.any():
            chosen = np.sort(ids[over])
        else:
            chosen = ids[np.lexsort((ids, -sc.scores))[:1]]
        if removed_total + chosen.size > budget:
            status = SAFEGUARD_TRIPPED
            refused = [int(i) for i in chosen]
            log.info("safeguard: removing %d more would exceed %.3g of %d", chosen.size,
                     config.max_removed_fraction, n_orig)
            break
        current = current.without_ids(chosen)
        removed_total += chosen.size
        seed = derive_seed(config.train.seed, l + 1)
        params, cur_store, cur_log = train(spec, current, config.train.with_seed(seed))
        pred = int(nn.predict(spec, params, target_x)[0])
        tloss = float(nn.example_losses(spec, params, target_x, [y_adv])[0])
        rounds.append(MitigationRound(float(zeta), [int(i) for i in chosen], tloss, pred, len(current)))
        log.info("round %d: cutoff %.3g removed %d -> pred %d", l, zeta, chosen.size, pred)
        if pred != y_adv:
            status = MITIGATED
            break
    return MitigationOutcome(status, y_adv, rounds, len(current), cur_store.final, cur_store, current,
                             cur_log, refused)
