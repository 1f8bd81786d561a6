"""Physical prior graphs and the static branch of the residual stream.

Adjacency orientation: ``A[src, dst] == 1`` means ``src`` physically
influences ``dst``. Message passing therefore aggregates node ``j`` from
column ``j`` (``S = A^T X``), so a target node gathers from its sources.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, SchemaError, ShapeError
from .layers import Params, linear, uniform, zeros
from .tensor import Tensor

ROLES = ("actuator", "state", "target")


@dataclass
class PriorGraph:
    names: list[str]
    roles: list[str]
    adjacency: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        C = len(self.names)
        if len(self.roles) != C:
            raise ContractError(f"{len(self.roles)} roles for {C} variables")
        bad = [r for r in self.roles if r not in ROLES]
        if bad:
            raise ContractError(f"unknown roles {bad}; expected one of {ROLES}")
        if self.adjacency.shape != (C, C):
            raise ShapeError(f"adjacency {self.adjacency.shape} for {C} variables")
        if not np.isin(self.adjacency, (0.0, 1.0)).all():
            raise ContractError("prior adjacency must be binary")
        if np.any(np.diag(self.adjacency) != 0):
            raise ContractError("prior adjacency must have a zero diagonal")

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def target(self) -> int:
        return self.roles.index("target")

    def edges(self) -> list[tuple[int, int]]:
        src, dst = np.nonzero(self.adjacency)
        return [(int(s), int(d)) for s, d in zip(src, dst)]

    def validate(self) -> None:
        """Check the construction-protocol invariants beyond shape and binarity."""
        if self.roles.count("target") != 1:
            raise ContractError("exactly one variable must have role 'target'")
        if self.adjacency[:, self.target].sum() < 1:
            raise ContractError("prior has no edge into the target variable")

    def zeros_like(self) -> "PriorGraph":
        return PriorGraph(list(self.names), list(self.roles), np.zeros_like(self.adjacency))

    def shuffled(self, rng: np.random.Generator, max_tries: int = 100) -> "PriorGraph":
        """Relabel nodes with a random permutation (degree sequence kept, topology moved)."""
        A = self.adjacency
        C = self.n_vars
        for _ in range(max_tries):
            perm = rng.permutation(C)
            B = A[np.ix_(perm, perm)]
            if not np.array_equal(B, A):
                return PriorGraph(list(self.names), list(self.roles), B)
        raise ContractError("could not find a permutation that changes the prior")

    # -- json -----------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "variables": [{"name": n, "role": r} for n, r in zip(self.names, self.roles)],
            "edges": [[self.names[s], self.names[d]] for s, d in self.edges()],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PriorGraph":
        try:
            names = [v["name"] for v in doc["variables"]]
            roles = [v["role"] for v in doc["variables"]]
            raw_edges = doc["edges"]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed prior document: {exc}") from exc
        index = {n: i for i, n in enumerate(names)}
        A = np.zeros((len(names), len(names)))
        for e in raw_edges:
            s, d = (index[v] if isinstance(v, str) else int(v) for v in e)
            A[s, d] = 1.0
        return cls(names, roles, A)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PriorGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_prior(roles: list[str], confirmed_edges=(), names: list[str] | None = None) -> PriorGraph:
    """Actuators feed the target; confirmed state edges are added; no self-loops."""
    C = len(roles)
    names = list(names) if names is not None else [f"v{i}" for i in range(C)]
    if roles.count("target") != 1:
        raise ContractError("exactly one variable must have role 'target'")
    tgt = roles.index("target")
    A = np.zeros((C, C))
    for i, r in enumerate(roles):
        if r == "actuator":
            A[i, tgt] = 1.0
    for s, d in confirmed_edges:
        if not (0 <= s < C and 0 <= d < C):
            raise ContractError(f"edge ({s}, {d}) references unknown variable")
        if s == d:
            raise ContractError(f"self-loop ({s}, {s}) is not allowed in a prior")
        A[s, d] = 1.0
    prior = PriorGraph(names, list(roles), A)
    prior.validate()
    return prior


class StaticBranch:
    def __init__(self, n_nodes: int, d_model: int, rng: np.random.Generator,
                 node_dim: int = 16, lambda_init: float = 0.0):
        if d_model % 2:
            raise ConfigError(f"d_model must be even, got {d_model}")
        self.n_nodes = n_nodes
        self.d_model = d_model
        self.params = Params()
        self.params.add("E", Tensor(rng.normal(0.0, 1.0, (n_nodes, node_dim)), requires_grad=True))
        self.params.add("raw_lambda", Tensor(float(lambda_init), requires_grad=True))
        self.params.add("W_s", uniform(rng, (d_model, d_model // 2), d_model, ""))
        self.params.add("b_s", zeros((d_model // 2,), ""))

    @property
    def lam(self) -> float:
        return float(T._sigmoid_np(self.params["raw_lambda"].data))


def learned_adjacency(E: Tensor) -> Tensor:
    return T.softmax_rows(T.relu(E @ E.T))


def static_adjacency(state: StaticBranch, prior: PriorGraph) -> Tensor:
    """lam * A_prior + (1 - lam) * softmax(relu(E E^T)), lam = sigmoid(raw_lambda)."""
    p = state.params
    if prior.n_vars != state.n_nodes:
        raise ShapeError(f"prior has {prior.n_vars} nodes, branch has {state.n_nodes}")
    lam = T.sigmoid(p["raw_lambda"])
    return lam * Tensor(prior.adjacency) + (1.0 - lam) * learned_adjacency(p["E"])


def static_context(x_emb, A_s: Tensor, state: StaticBranch) -> Tensor:
    """Aggregate over the graph then project: (..., C, D) -> (..., C, D/2)."""
    x_emb = T.as_tensor(x_emb)
    D = x_emb.shape[-1]
    if D % 2:
        raise ConfigError(f"feature width must be even, got {D}")
    if x_emb.shape[-2] != A_s.shape[0]:
        raise ShapeError(f"features {x_emb.shape} vs adjacency {A_s.shape}")
    agg = T.swapaxes(T.swapaxes(x_emb, -1, -2) @ A_s, -1, -2)
    return linear(agg, state.params["W_s"], state.params["b_s"])
