"""Multi-branch MLP banks, the task modulator, and per-session fusion.

This is the heart of the package.  During training every MLP stage is a
bank of N parallel affine branches whose outputs are combined with convex
weights produced by a small modulator from the one-hot task prior:

    y = sum_k w2[k] * L2_k( gelu( sum_j w1[j] * L1_j(x) ) )

Because each bank is linear in its parameters, the weighted combination
can be collapsed once per task session into a single affine map,

    W_new = sum_j w[j] * W_j      b_new = sum_j w[j] * b_j

after which inference runs a plain two-layer MLP whose cost no longer
depends on the number of branches or tasks.  The collapse is exact up to
float rounding, which the tests pin down.

Banks of size one are static: softmax over a single logit is identically
1, so such banks carry no modulator head and contribute no modulation
parameters or compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from taskfuse import tensor as T
from taskfuse.tensor import ContractError, DimensionError, Tensor

__all__ = [
    "TASK_NAMES",
    "TaskPrior",
    "task_prior",
    "Affine",
    "LinearBank",
    "ModulatorParams",
    "BranchMLPParams",
    "FusedAffine",
    "FusedMLP",
    "init_branch_mlp",
    "tsm_weights",
    "drmlp_forward_train",
    "fuse_bank",
    "drmlp_fuse",
    "fused_mlp_forward",
    "weight_similarity",
]

# Fixed one-hot slots; the order is part of the checkpoint contract.
TASK_NAMES = ("denoise", "derain", "dehaze", "deblur", "enhance", "blind")


@dataclass
class TaskPrior:
    """One-hot task selector over K slots."""

    z: Tensor
    task_name: str

    def __post_init__(self):
        data = self.z.data
        if data.ndim != 1:
            raise ContractError(f"task prior must be a vector, got shape {self.z.shape}")
        ones = np.flatnonzero(data == 1.0)
        if len(ones) != 1 or np.count_nonzero(data) != 1:
            raise ContractError(f"task prior must be one-hot, got {data.tolist()}")

    @property
    def index(self) -> int:
        return int(np.argmax(self.z.data))


def task_prior(name: str, num_tasks: int = len(TASK_NAMES)) -> TaskPrior:
    """Map a task name to its fixed standard-basis vector."""
    if name not in TASK_NAMES:
        raise ContractError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    idx = TASK_NAMES.index(name)
    if idx >= num_tasks:
        raise ContractError(f"task {name!r} is outside the configured {num_tasks} slots")
    z = np.zeros(num_tasks, dtype=np.float32)
    z[idx] = 1.0
    return TaskPrior(z=Tensor(z), task_name=name)


@dataclass
class Affine:
    weight: Tensor
    bias: Tensor


@dataclass
class LinearBank:
    """N parallel affine maps sharing one (d_out, d_in) shape."""

    branches: list[Affine]

    def __post_init__(self):
        if not self.branches:
            raise DimensionError("a bank needs at least one branch")
        shape = self.branches[0].weight.shape
        for br in self.branches:
            if br.weight.shape != shape:
                raise DimensionError(
                    f"bank branches disagree: {shape} vs {br.weight.shape}"
                )

    @property
    def size(self) -> int:
        return len(self.branches)


@dataclass
class ModulatorParams:
    """Two-layer heads turning the task prior into per-bank branch logits.

    A head is (Affine, Affine): prior -> hidden -> N logits.  Banks of
    size one have no head (their weight is the constant [1.0]).
    """

    bank1: tuple[Affine, Affine] | None
    bank2: tuple[Affine, Affine] | None


@dataclass
class BranchMLPParams:
    bank1: LinearBank
    bank2: LinearBank
    modulator: ModulatorParams


@dataclass
class FusedAffine:
    """A single affine map equivalent to one collapsed bank."""

    weight: Tensor
    bias: Tensor


@dataclass
class FusedMLP:
    fc1: FusedAffine
    fc2: FusedAffine


def _init_affine(rng: np.random.Generator, d_out: int, d_in: int, zero: bool = False) -> Affine:
    if zero:
        w = np.zeros((d_out, d_in), dtype=np.float32)
    else:
        w = (rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)).astype(np.float32)
    return Affine(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True),
    )


def _init_head(rng, num_tasks: int, n: int) -> tuple[Affine, Affine] | None:
    if n == 1:
        return None
    hidden = 4 * num_tasks
    # zero-init of the final layer makes every task start at uniform weights
    return (
        _init_affine(rng, hidden, num_tasks),
        _init_affine(rng, n, hidden, zero=True),
    )


def init_branch_mlp(
    rng: np.random.Generator,
    channels: int,
    expansion: int,
    bank_sizes: tuple[int, int],
    num_tasks: int,
) -> BranchMLPParams:
    """Independent fan-in-scaled init per branch; modulator heads per bank."""
    n1, n2 = bank_sizes
    d_mid = expansion * channels
    bank1 = LinearBank([_init_affine(rng, d_mid, channels) for _ in range(n1)])
    bank2 = LinearBank([_init_affine(rng, channels, d_mid) for _ in range(n2)])
    modulator = ModulatorParams(
        bank1=_init_head(rng, num_tasks, n1),
        bank2=_init_head(rng, num_tasks, n2),
    )
    return BranchMLPParams(bank1=bank1, bank2=bank2, modulator=modulator)


def _head_weights(z: TaskPrior, head: tuple[Affine, Affine] | None, n: int) -> Tensor:
    if head is None:
        return Tensor(np.ones(n, dtype=np.float32))
    a, b = head
    logits = T.linear(T.linear(z.z, a.weight, a.bias), b.weight, b.bias)
    return T.softmax(logits)


def tsm_weights(z: TaskPrior, p: "BranchMLPParams | ModulatorParams", bank_sizes=None):
    """Simplex weight vectors (w1, w2) for the two banks under prior `z`.

    Accepts either the full MLP parameters or a bare modulator plus
    explicit bank sizes.
    """
    if isinstance(p, BranchMLPParams):
        mod = p.modulator
        n1, n2 = p.bank1.size, p.bank2.size
    else:
        mod = p
        if bank_sizes is None:
            raise ContractError("bank_sizes required when passing a bare modulator")
        n1, n2 = bank_sizes
    return _head_weights(z, mod.bank1, n1), _head_weights(z, mod.bank2, n2)


def drmlp_forward_train(x: Tensor, p: BranchMLPParams, w1: Tensor, w2: Tensor) -> Tensor:
    """Training-path forward: every branch evaluated, outputs mixed by w1/w2."""
    if w1.data.shape != (p.bank1.size,) or w2.data.shape != (p.bank2.size,):
        raise DimensionError(
            f"branch weights {w1.shape}/{w2.shape} do not match bank sizes "
            f"({p.bank1.size}, {p.bank2.size})"
        )
    h = T.weighted_sum([T.linear(x, br.weight, br.bias) for br in p.bank1.branches], w1)
    g = T.gelu(h)
    return T.weighted_sum([T.linear(g, br.weight, br.bias) for br in p.bank2.branches], w2)


def fuse_bank(bank: LinearBank, w: Tensor) -> FusedAffine:
    """Collapse a bank into the single affine map sum_j w[j] * branch_j."""
    if w.data.shape != (bank.size,):
        raise DimensionError(f"weight vector {w.shape} does not match bank of size {bank.size}")
    wt = w.data.astype(np.float64)
    weight = np.zeros(bank.branches[0].weight.shape, dtype=np.float64)
    bias = np.zeros(bank.branches[0].bias.shape, dtype=np.float64)
    for wj, br in zip(wt, bank.branches):
        weight += wj * br.weight.data
        bias += wj * br.bias.data
    return FusedAffine(weight=Tensor(weight), bias=Tensor(bias))


def drmlp_fuse(p: BranchMLPParams, z: TaskPrior) -> FusedMLP:
    """One-time collapse of both banks under the prior's modulation weights."""
    w1, w2 = tsm_weights(z, p)
    return FusedMLP(fc1=fuse_bank(p.bank1, w1), fc2=fuse_bank(p.bank2, w2))


def fused_mlp_forward(x: Tensor, m: FusedMLP) -> Tensor:
    return T.linear(T.gelu(T.linear(x, m.fc1.weight, m.fc1.bias)), m.fc2.weight, m.fc2.bias)


def weight_similarity(fused: list[FusedMLP], bank: int) -> np.ndarray:
    """Pairwise cosine similarity of collapsed weights across task fusions.

    `bank` selects stage 1 or 2.  Entries for zero-norm weights are NaN.
    """
    if bank not in (1, 2):
        raise ContractError(f"bank index must be 1 or 2, got {bank}")
    mats = [
        (m.fc1 if bank == 1 else m.fc2).weight.data.astype(np.float64).reshape(-1)
        for m in fused
    ]
    k = len(mats)
    norms = [np.linalg.norm(v) for v in mats]
    sim = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(k):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            if i == j:
                sim[i, j] = 1.0
            else:
                sim[i, j] = float(np.dot(mats[i], mats[j]) / (norms[i] * norms[j]))
    return sim
