"""Two-group permutation testing on the parameters of fitted sequence models.

Each group is fitted by next-step prediction starting from a model pretrained on
both groups together. The test statistic is the distance between the two fitted
parameter vectors; its null distribution comes from refitting after shuffling
group membership (sizes preserved).
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError
from .train import train_group_model

log = logging.getLogger(__name__)

HIST_BINS = 30


@dataclass
class PermutationConfig:
    n_permutations: int = 200
    alpha: float = 0.05
    seed: int = 0
    pretrain_epochs: int = 20
    finetune_epochs: int = 5
    threads: int = 1

    def __post_init__(self):
        if self.n_permutations < 1:
            raise DomainError("n_permutations must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if self.threads < 1:
            raise DomainError("threads must be >= 1")


@dataclass
class GroupTestResult:
    sigma_observed: float
    null_samples: np.ndarray
    p_value: float
    seeds: list = field(default_factory=list)
    alpha: float = 0.05

    @property
    def rejected(self):
        return self.p_value < self.alpha


class PermutationError(RuntimeError):
    """Fitting failed inside one permutation; ``index`` is the permutation number."""

    def __init__(self, index, cause):
        self.index = index
        super().__init__(f"permutation {index} failed: {cause}")


def model_distance(theta1, theta2):
    """Euclidean distance between comparison vectors (normalized convex weights, then real weights)."""
    if theta1.index_map() != theta2.index_map():
        raise DomainError("models have different parameter layouts")
    return float(np.linalg.norm(theta1.comparison_vector() - theta2.comparison_vector()))


def permutation_p_value(sigma, null_samples):
    """Add-one rank p-value ``(1 + #{null >= sigma}) / (1 + n)``."""
    null_samples = np.asarray(null_samples, dtype=float)
    return (1.0 + np.count_nonzero(null_samples >= sigma)) / (1.0 + null_samples.size)


def permutation_seeds(master_seed, n):
    """Independent 64-bit seeds, one per permutation, derived from the master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _fit_pair(config, sgd, start, group_a, group_b):
    theta_a = train_group_model(config, group_a, sgd, params=start)
    theta_b = train_group_model(config, group_b, sgd, params=start)
    return model_distance(theta_a, theta_b)


def permutation_test(group_a, group_b, config, sgd, perm):
    """Permutation test of ``H0: both groups come from one distribution``.

    Parameters
    ----------
    group_a, group_b : list of ManifoldSequence
    config : NetConfig
        Architecture of the group models. Only the block weights are fitted;
        head parameters stay at their pretrained values.
    sgd : SgdConfig
        Optimizer settings for fine-tuning (``epochs`` is replaced by
        ``perm.finetune_epochs``; pretraining uses ``perm.pretrain_epochs``).
    perm : PermutationConfig

    Returns
    -------
    GroupTestResult
    """
    if not group_a or not group_b:
        raise DomainError("both groups must be non-empty")
    pooled = list(group_a) + list(group_b)
    n_a = len(group_a)
    start = train_group_model(config, pooled, replace(sgd, epochs=perm.pretrain_epochs, seed=perm.seed))
    tune = replace(sgd, epochs=perm.finetune_epochs, seed=perm.seed)
    sigma = _fit_pair(config, tune, start, group_a, group_b)

    seeds = permutation_seeds(perm.seed, perm.n_permutations)

    def one(index):
        order = np.random.default_rng(seeds[index]).permutation(len(pooled))
        try:
            return _fit_pair(config, replace(tune, seed=seeds[index]), start,
                             [pooled[i] for i in order[:n_a]], [pooled[i] for i in order[n_a:]])
        except Exception as exc:
            raise PermutationError(index, exc) from exc

    if perm.threads > 1:
        with ThreadPoolExecutor(perm.threads) as pool:
            null = list(pool.map(one, range(perm.n_permutations)))
    else:
        null = [one(i) for i in range(perm.n_permutations)]
    null = np.array(null)
    p = permutation_p_value(sigma, null)
    log.info("sigma %.6g p %.4f", sigma, p)
    return GroupTestResult(sigma, null, p, seeds, perm.alpha)


def null_summary(result, bins=HIST_BINS):
    """Histogram of the null samples: (edges, counts, marker) with the marker at the observed statistic."""
    null = np.asarray(result.null_samples, dtype=float)
    lo, hi = float(null.min()), float(null.max())
    if hi == lo:
        hi = lo + 1.0 if lo == 0 else lo + abs(lo) * 1e-9
    counts, edges = np.histogram(null, bins=bins, range=(lo, hi))
    return edges, counts, result.sigma_observed


def write_result_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "seed", "sigma_null"])
        for i, (seed, s) in enumerate(zip(result.seeds, result.null_samples)):
            w.writerow([i, seed, repr(float(s))])
        w.writerow(["summary", "sigma_observed", "p_value"])
        w.writerow(["summary", repr(float(result.sigma_observed)), repr(float(result.p_value))])


def write_histogram_csv(result, path, bins=HIST_BINS):
    edges, counts, marker = null_summary(result, bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow(["marker", repr(float(marker)), ""])
