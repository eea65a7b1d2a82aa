"""Sign-flip sensitivity analysis of the linear graph channel.

For a linear-activation convolution stack read out by mean pooling and a
linear scorer, negating one node's input features changes the logit by a
closed-form amount.  This module computes that closed form, the matching
Cauchy-Schwarz bound, and the minimum feature norm a flip of the predicted
class implies, then checks all three against the actual forward pass.  A
verification campaign over random instances is the entry point the CLI uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Param
from .dump_io import MemeDump
from .errors import ConfigError, DegenerateClassifierError, DomainError
from .model import predict
from .reference_graph import (
    GcnParams,
    ReferenceGraph,
    build_reference_graph,
    gcn_forward,
    graph_readout,
    propagation_matrix,
)

__all__ = [
    "TheoremInstance",
    "CheckResult",
    "TheoremReport",
    "CampaignReport",
    "product_weights",
    "column_mass",
    "logit_of",
    "delta_l_closed_form",
    "delta_l_empirical",
    "cs_bound",
    "discriminative_threshold",
    "verify_theorem",
    "random_instance",
    "run_campaign",
]

REL_TOL = 1e-9
ABS_SLACK = 1e-12


@dataclass
class TheoremInstance:
    """One concrete setting: graph, linear convolution stack, scorer, node.

    The analysis only holds for the identity activation and a shared feature
    width (no input projections); anything else is rejected outright.
    """

    graph: ReferenceGraph
    gcn: GcnParams
    scorer: np.ndarray  # (d_g,) readout direction
    v0: int

    def __post_init__(self):
        if self.gcn.activation != "identity":
            raise ConfigError(
                f"the sign-flip analysis requires the identity activation, "
                f"got {self.gcn.activation!r}")
        if self.gcn.token_projection is not None:
            raise ConfigError("the sign-flip analysis does not cover input projections")
        self.scorer = np.asarray(self.scorer, dtype=np.float64)
        if self.scorer.shape != (self.gcn.graph_dim,):
            raise ConfigError(
                f"scorer has shape {self.scorer.shape}, layers expect ({self.gcn.graph_dim},)")
        if not (0 <= self.v0 < self.graph.n_nodes):
            raise DomainError(f"node {self.v0} outside 0..{self.graph.n_nodes - 1}")

    @property
    def delta(self) -> np.ndarray:
        """The feature change a sign flip of node v0 applies: -2 x_v0."""
        return -2.0 * self.graph.features[self.v0]

    def flipped_graph(self) -> ReferenceGraph:
        """Same graph with node v0's input features negated."""
        tokens = self.graph.token_features.copy()
        patches = self.graph.patch_features.copy()
        if self.v0 < self.graph.n_tokens:
            tokens[self.v0] = -tokens[self.v0]
        else:
            patches[self.v0 - self.graph.n_tokens] = -patches[self.v0 - self.graph.n_tokens]
        return replace(self.graph, token_features=tokens, patch_features=patches)


def product_weights(gcn: GcnParams) -> np.ndarray:
    """Product of the layer weights in application order."""
    out = np.eye(gcn.graph_dim)
    for layer in gcn.layers:
        out = out @ layer.data
    return out


def column_mass(propagation: np.ndarray, n_layers: int, v0: int) -> float:
    """Total weight the stacked propagation assigns to node v0: 1^T A^K e_v0.

    Strictly positive: self-loops keep every diagonal entry of A^K positive.
    """
    weights = np.ones(propagation.shape[0])
    for _ in range(n_layers):
        weights = weights @ propagation
    return float(weights[v0])


def logit_of(graph: ReferenceGraph, gcn: GcnParams, scorer: np.ndarray,
             propagation: np.ndarray | None = None) -> float:
    """Scorer applied to the graph readout, via the actual forward pass."""
    readout = graph_readout(gcn_forward(graph, gcn, propagation=propagation))
    return float(readout.data @ np.asarray(scorer, dtype=np.float64))


def delta_l_closed_form(instance: TheoremInstance,
                        propagation: np.ndarray | None = None) -> float:
    if propagation is None:
        propagation = propagation_matrix(instance.graph)
    coef = column_mass(propagation, instance.gcn.n_layers, instance.v0)
    direction = product_weights(instance.gcn) @ instance.scorer
    return coef * float(instance.delta @ direction) / instance.graph.n_nodes


def delta_l_empirical(instance: TheoremInstance,
                      propagation: np.ndarray | None = None) -> tuple[float, float, float]:
    """(logit before, logit after, difference) from two real forward passes."""
    if propagation is None:
        propagation = propagation_matrix(instance.graph)
    before = logit_of(instance.graph, instance.gcn, instance.scorer, propagation)
    after = logit_of(instance.flipped_graph(), instance.gcn, instance.scorer, propagation)
    return before, after, after - before


def cs_bound(instance: TheoremInstance, propagation: np.ndarray | None = None) -> float:
    """Cauchy-Schwarz ceiling on |delta l|: coef/n * ||delta|| * ||P u||."""
    if propagation is None:
        propagation = propagation_matrix(instance.graph)
    coef = column_mass(propagation, instance.gcn.n_layers, instance.v0)
    direction = product_weights(instance.gcn) @ instance.scorer
    norm_delta = float(np.linalg.norm(instance.delta))
    norm_dir = float(np.linalg.norm(direction))
    return coef / instance.graph.n_nodes * norm_delta * norm_dir


def discriminative_threshold(instance: TheoremInstance, logit: float,
                             propagation: np.ndarray | None = None) -> float:
    """Minimum ||delta|| a class flip implies: n |l| / (coef * ||P u||)."""
    if propagation is None:
        propagation = propagation_matrix(instance.graph)
    coef = column_mass(propagation, instance.gcn.n_layers, instance.v0)
    direction = product_weights(instance.gcn) @ instance.scorer
    norm_dir = float(np.linalg.norm(direction))
    if norm_dir == 0.0:
        raise DegenerateClassifierError(
            "the scorer is orthogonal to every weight product direction; "
            "no feature change can move the logit")
    return instance.graph.n_nodes * abs(logit) / (coef * norm_dir)


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float  # positive means slack, negative means violation


@dataclass
class TheoremReport:
    v0: int
    logit_before: float
    logit_after: float
    delta_l_closed: float
    delta_l_empirical: float
    bound: float
    threshold: float | None
    flip_occurred: bool
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "v0": self.v0,
            "logit_before": self.logit_before,
            "logit_after": self.logit_after,
            "delta_l_closed": self.delta_l_closed,
            "delta_l_empirical": self.delta_l_empirical,
            "bound": self.bound,
            "threshold": self.threshold,
            "flip_occurred": self.flip_occurred,
            "checks": [{"name": c.name, "passed": c.passed, "residual": c.residual}
                       for c in self.checks],
            "ok": self.ok,
        }


def verify_theorem(instance: TheoremInstance) -> TheoremReport:
    """Run all three checks on one instance.

    closed_form_matches_empirical: the closed form equals the double-forward
    difference to relative tolerance.  cauchy_schwarz_bound: |delta l| never
    exceeds the ceiling.  flip_implies_norm_above_threshold: whenever the
    predicted class changes, ||delta|| clears the threshold (vacuously true
    when no flip happens or the scorer is degenerate).
    """
    propagation = propagation_matrix(instance.graph)
    closed = delta_l_closed_form(instance, propagation)
    before, after, empirical = delta_l_empirical(instance, propagation)
    bound = cs_bound(instance, propagation)
    flip = predict(before) != predict(after)

    checks = []
    scale = max(1.0, abs(closed), abs(empirical))
    checks.append(CheckResult(
        "closed_form_matches_empirical",
        abs(closed - empirical) <= REL_TOL * scale,
        REL_TOL * scale - abs(closed - empirical)))
    checks.append(CheckResult(
        "cauchy_schwarz_bound",
        abs(closed) <= bound + ABS_SLACK,
        bound + ABS_SLACK - abs(closed)))
    threshold = None
    try:
        threshold = discriminative_threshold(instance, before, propagation)
    except DegenerateClassifierError:
        # a degenerate scorer cannot move the logit, so no flip can occur
        checks.append(CheckResult("flip_implies_norm_above_threshold", not flip,
                                  0.0 if not flip else -np.inf))
    else:
        if flip:
            margin = float(np.linalg.norm(instance.delta)) - threshold
            checks.append(CheckResult(
                "flip_implies_norm_above_threshold",
                margin > -ABS_SLACK * max(1.0, threshold),
                margin))
        else:
            checks.append(CheckResult("flip_implies_norm_above_threshold", True, 0.0))
    return TheoremReport(
        v0=instance.v0,
        logit_before=before,
        logit_after=after,
        delta_l_closed=closed,
        delta_l_empirical=empirical,
        bound=bound,
        threshold=threshold,
        flip_occurred=flip,
        checks=checks,
    )


def random_instance(rng: np.random.Generator, n_t: int | None = None,
                    grid_rows: int | None = None, grid_cols: int | None = None,
                    d_g: int | None = None, k_layers: int | None = None,
                    k_ref: int | None = None) -> TheoremInstance:
    """A random small instance; unset sizes are drawn from modest ranges."""
    n_t = int(rng.integers(1, 9)) if n_t is None else n_t
    grid_rows = int(rng.integers(1, 4)) if grid_rows is None else grid_rows
    grid_cols = int(rng.integers(1, 4)) if grid_cols is None else grid_cols
    d_g = int(rng.integers(2, 7)) if d_g is None else d_g
    k_layers = int(rng.integers(1, 4)) if k_layers is None else k_layers
    k_ref = int(rng.integers(1, 5)) if k_ref is None else k_ref

    n_v = grid_rows * grid_cols
    n_pos = n_t + n_v
    attention = rng.random((n_pos, n_pos))
    attention /= attention.sum(axis=1, keepdims=True)
    dump = MemeDump(
        id=f"instance-{rng.integers(1 << 30)}",
        label=-1,
        grid_rows=grid_rows,
        grid_cols=grid_cols,
        prompt_len=n_pos,
        text_range=(n_v, n_pos - 1),
        patch_range=(0, n_v - 1),
        token_embeddings=rng.standard_normal((n_t, d_g)),
        patch_embeddings=rng.standard_normal((n_v, d_g)),
        llm_state=rng.standard_normal(d_g),
        attention=attention,
    )
    graph = build_reference_graph(dump, k_ref)
    layers = [Param(rng.standard_normal((d_g, d_g)) / np.sqrt(d_g)) for _ in range(k_layers)]
    gcn = GcnParams(layers=layers, activation="identity")
    scorer = rng.standard_normal(d_g)
    v0 = int(rng.integers(graph.n_nodes))
    return TheoremInstance(graph=graph, gcn=gcn, scorer=scorer, v0=v0)


@dataclass
class CampaignReport:
    trials: int
    seed: int
    failures: list[dict] = field(default_factory=list)
    flips: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"trials": self.trials, "seed": self.seed, "flips": self.flips,
                "failures": self.failures, "ok": self.ok}


def run_campaign(trials: int, seed: int = 0) -> CampaignReport:
    """Verify `trials` seeded random instances; collects every failed check."""
    if trials < 1:
        raise ConfigError(f"trials must be at least 1, got {trials}")
    rng = np.random.default_rng(seed)
    report = CampaignReport(trials=trials, seed=seed)
    for trial in range(trials):
        instance = random_instance(rng)
        result = verify_theorem(instance)
        if result.flip_occurred:
            report.flips += 1
        for check in result.checks:
            if not check.passed:
                report.failures.append({
                    "trial": trial,
                    "check": check.name,
                    "residual": check.residual,
                    "v0": instance.v0,
                    "n_nodes": instance.graph.n_nodes,
                })
    return report
