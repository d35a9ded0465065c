"""Budgeted incremental classifier heads over a growing class registry.

All heads share the same frozen-feature inputs and the same replay regime:
every timestep trains on everything downloaded so far, with a hard cap on
optimizer iterations. Parametric heads (linear, small MLP) warm-start across
timesteps; centroid and nearest-neighbor heads need no iterations at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .curation import SamplerState
from .errors import TrainingError
from .features import l2_normalize

BUDGET_MULTIPLIERS = {"tight": 0.5, "normal": 1.0, "relaxed": 4.0}
METHODS = ("linear", "mlp", "ncm", "knn")


@dataclass(frozen=True)
class BudgetProfile:
    kind: str
    reference_size: int
    batch_size: int

    def __post_init__(self):
        if self.kind not in BUDGET_MULTIPLIERS:
            raise TrainingError(f"unknown budget kind {self.kind!r}")
        if self.reference_size < 1 or self.batch_size < 1:
            raise TrainingError("reference_size and batch_size must be >= 1")


def compute_budget(profile: BudgetProfile) -> int:
    """Iterations per timestep: one reference-epoch's steps, scaled by kind."""
    base = math.ceil(profile.reference_size / profile.batch_size)
    return max(1, math.ceil(base * BUDGET_MULTIPLIERS[profile.kind]))


class ClassRegistry:
    """Dense class indices assigned in first-seen order, never reassigned."""

    def __init__(self):
        self._index: dict[str, int] = {}
        self._names: list[str] = []

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index_of(self, name: str) -> int:
        return self._index[name]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def add(self, names: Sequence[str]) -> list[int]:
        out = []
        for name in names:
            if name in self._index:
                raise TrainingError(f"class {name!r} already registered")
            self._index[name] = len(self._names)
            self._names.append(name)
            out.append(self._index[name])
        return out

    def extend_new(self, names: Sequence[str]) -> list[str]:
        """Register only the names not yet present; returns them in order."""
        fresh = [n for n in names if n not in self._index]
        # preserve first occurrence order, drop repeats inside the input
        seen: set[str] = set()
        fresh = [n for n in fresh if not (n in seen or seen.add(n))]
        self.add(fresh)
        return fresh


class ReplayStore:
    """Append-only pool of labeled features accumulated across timesteps."""

    def __init__(self, dim: int):
        self.dim = dim
        self._chunks: list[np.ndarray] = []
        self._label_chunks: list[np.ndarray] = []
        self._cached: tuple[np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return int(sum(len(c) for c in self._chunks))

    def extend(self, vectors: np.ndarray, class_indices: np.ndarray) -> None:
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise TrainingError(f"store expects (*, {self.dim}) features, got {vectors.shape}")
        if len(vectors) != len(class_indices):
            raise TrainingError("vectors and labels differ in length")
        self._chunks.append(vectors)
        self._label_chunks.append(np.asarray(class_indices, dtype=np.int64))
        self._cached = None

    def all(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cached is None:
            if not self._chunks:
                self._cached = (
                    np.empty((0, self.dim), dtype=np.float32),
                    np.empty((0,), dtype=np.int64),
                )
            else:
                self._cached = (np.vstack(self._chunks), np.concatenate(self._label_chunks))
        return self._cached


class _Adam:
    """Adam over a list of parameter arrays, one moment pair per array."""

    def __init__(self, params: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def grow_rows(self, param_index: int, rows: int) -> None:
        for store in (self.m, self.v):
            old = store[param_index]
            shape = (rows,) + old.shape[1:]
            store[param_index] = np.vstack([old, np.zeros(shape, dtype=old.dtype)]) if old.ndim > 1 else np.concatenate([old, np.zeros(rows, dtype=old.dtype)])


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and d(loss)/d(logits) for integer class targets."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = len(targets)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = -float(log_probs[np.arange(n), targets].mean())
    dlogits = probs
    dlogits[np.arange(n), targets] -= 1.0
    return loss, dlogits / n


def linear_loss_and_grad(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy loss of a linear head and its analytic gradients."""
    logits = x @ weights.T + bias
    loss, dlogits = softmax_cross_entropy(logits, y)
    return loss, dlogits.T @ x, dlogits.sum(axis=0)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 512
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # static (unbudgeted) mode only:
    max_steps: int = 10_000
    plateau_every: int = 50
    plateau_patience: int = 10
    plateau_decay: float = 0.1


class LinearHead:
    """Single linear layer trained with Adam on softmax cross-entropy."""

    kind = "linear"

    def __init__(self, dim: int, num_classes: int = 0, config: TrainConfig | None = None):
        self.dim = dim
        self.config = config or TrainConfig()
        self.weights = np.zeros((num_classes, dim), dtype=np.float64)
        self.bias = np.zeros(num_classes, dtype=np.float64)
        self.optimizer = _Adam([self.weights, self.bias], lr=self.config.lr, betas=self.config.betas, eps=self.config.eps)
        self.step_count = 0

    @property
    def num_classes(self) -> int:
        return len(self.bias)

    def expand(self, new_classes: int) -> None:
        if new_classes == 0:
            return
        self.weights = np.vstack([self.weights, np.zeros((new_classes, self.dim))])
        self.bias = np.concatenate([self.bias, np.zeros(new_classes)])
        self.optimizer.grow_rows(0, new_classes)
        self.optimizer.grow_rows(1, new_classes)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias

    def train_step(self, x: np.ndarray, y: np.ndarray) -> float:
        loss, dw, db = linear_loss_and_grad(self.weights, self.bias, x, y)
        self.optimizer.step([self.weights, self.bias], [dw, db])
        self.step_count += 1
        return loss

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}


class MLPHead:
    """Two hidden layers (512, 256) with rectifier units and 0.5 dropout."""

    kind = "mlp"
    HIDDEN = (512, 256)
    DROPOUT = 0.5

    def __init__(self, dim: int, num_classes: int = 0, config: TrainConfig | None = None, seed: int = 0):
        self.dim = dim
        self.config = config or TrainConfig()
        rng = np.random.default_rng(seed)
        h1, h2 = self.HIDDEN
        self.w1 = rng.standard_normal((h1, dim)) * math.sqrt(2.0 / dim)
        self.b1 = np.zeros(h1)
        self.w2 = rng.standard_normal((h2, h1)) * math.sqrt(2.0 / h1)
        self.b2 = np.zeros(h2)
        self.w3 = np.zeros((num_classes, h2))
        self.b3 = np.zeros(num_classes)
        self._dropout_rng = np.random.default_rng(seed + 1)
        self.optimizer = _Adam(self._params(), lr=self.config.lr, betas=self.config.betas, eps=self.config.eps)
        self.step_count = 0

    def _params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    @property
    def num_classes(self) -> int:
        return len(self.b3)

    def expand(self, new_classes: int) -> None:
        if new_classes == 0:
            return
        self.w3 = np.vstack([self.w3, np.zeros((new_classes, self.HIDDEN[1]))])
        self.b3 = np.concatenate([self.b3, np.zeros(new_classes)])
        self.optimizer.grow_rows(4, new_classes)
        self.optimizer.grow_rows(5, new_classes)

    def _forward(self, x: np.ndarray, training: bool) -> tuple[np.ndarray, tuple]:
        a1 = np.maximum(x @ self.w1.T + self.b1, 0.0)
        mask1 = None
        if training:
            mask1 = self._dropout_rng.random(a1.shape) >= self.DROPOUT
            a1 = a1 * mask1 / (1.0 - self.DROPOUT)
        a2 = np.maximum(a1 @ self.w2.T + self.b2, 0.0)
        mask2 = None
        if training:
            mask2 = self._dropout_rng.random(a2.shape) >= self.DROPOUT
            a2 = a2 * mask2 / (1.0 - self.DROPOUT)
        logits = a2 @ self.w3.T + self.b3
        return logits, (x, a1, mask1, a2, mask2)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x, training=False)[0]

    def train_step(self, x: np.ndarray, y: np.ndarray) -> float:
        logits, (x0, a1, mask1, a2, mask2) = self._forward(x, training=True)
        loss, dlogits = softmax_cross_entropy(logits, y)
        dw3 = dlogits.T @ a2
        db3 = dlogits.sum(axis=0)
        da2 = dlogits @ self.w3
        da2 *= mask2 / (1.0 - self.DROPOUT)
        da2[a2 <= 0.0] = 0.0
        dw2 = da2.T @ a1
        db2 = da2.sum(axis=0)
        da1 = da2 @ self.w2
        da1 *= mask1 / (1.0 - self.DROPOUT)
        da1[a1 <= 0.0] = 0.0
        dw1 = da1.T @ x0
        db1 = da1.sum(axis=0)
        self.optimizer.step(self._params(), [dw1, db1, dw2, db2, dw3, db3])
        self.step_count += 1
        return loss

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "w3": self.w3, "b3": self.b3}


def expand_head(head: LinearHead | MLPHead, registry: ClassRegistry, new_categories: Sequence[str]) -> None:
    """Register new classes and append zero-initialized output rows.

    Existing parameters are untouched, so predictions over old classes are
    unchanged for any input whose winning logit is positive.
    """
    registry.add(list(new_categories))
    head.expand(len(new_categories))
    if head.num_classes != len(registry):
        raise TrainingError(
            f"head rows ({head.num_classes}) out of sync with registry ({len(registry)})"
        )


def train_head(
    head: LinearHead | MLPHead,
    store: ReplayStore,
    budget: int | None,
    config: TrainConfig | None = None,
) -> LinearHead | MLPHead:
    """Run class-balanced optimizer steps over the full replay pool.

    With a budget, exactly that many steps run and the learning rate stays
    fixed. With ``budget=None`` (static mode) training runs up to
    ``max_steps`` with a reduce-on-plateau schedule over the running
    training loss.
    """
    config = config or head.config
    x_all, y_all = store.all()
    if len(x_all) == 0:
        raise TrainingError("replay store is empty")
    if x_all.shape[1] != head.dim:
        raise TrainingError(f"feature dim {x_all.shape[1]} does not match head dim {head.dim}")
    if int(y_all.max()) >= head.num_classes:
        raise TrainingError("store contains labels outside the head's classes")

    x_all = x_all.astype(np.float64)
    sampler = SamplerState(y_all.tolist(), seed=config.seed)

    if budget is not None:
        if budget < 1:
            raise TrainingError("budget must be >= 1")
        for _ in range(budget):
            batch = sampler.draw(config.batch_size)
            head.train_step(x_all[batch], y_all[batch])
        return head

    lr0 = head.optimizer.lr
    window: list[float] = []
    best = math.inf
    stale = 0
    for step in range(1, config.max_steps + 1):
        batch = sampler.draw(config.batch_size)
        window.append(head.train_step(x_all[batch], y_all[batch]))
        if step % config.plateau_every == 0:
            running = float(np.mean(window))
            window.clear()
            if running < best - 1e-6:
                best = running
                stale = 0
            else:
                stale += 1
                if stale >= config.plateau_patience:
                    head.optimizer.lr *= config.plateau_decay
                    stale = 0
                    if head.optimizer.lr < lr0 * 1e-4:
                        break
    return head


class NCMState:
    """Per-class running mean of unit-normalized features."""

    def __init__(self, dim: int, num_classes: int = 0):
        self.dim = dim
        self.sums = np.zeros((num_classes, dim), dtype=np.float64)
        self.counts = np.zeros(num_classes, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def expand(self, new_classes: int) -> None:
        if new_classes:
            self.sums = np.vstack([self.sums, np.zeros((new_classes, self.dim))])
            self.counts = np.concatenate([self.counts, np.zeros(new_classes, dtype=np.int64)])

    def update(self, vectors: np.ndarray, class_indices: np.ndarray) -> None:
        unit = l2_normalize(np.asarray(vectors, dtype=np.float64))
        for row, cls in zip(unit, np.asarray(class_indices, dtype=np.int64)):
            self.sums[cls] += row
            self.counts[cls] += 1

    def means(self) -> np.ndarray:
        if np.any(self.counts == 0):
            missing = int(np.argmin(self.counts))
            raise TrainingError(f"class index {missing} has no samples; mean undefined")
        return self.sums / self.counts[:, None]


def fit_ncm(store: ReplayStore, num_classes: int) -> NCMState:
    """Batch-fit class means from the full store; equals incremental feeding."""
    state = NCMState(dim=store.dim, num_classes=num_classes)
    x, y = store.all()
    if len(x) == 0:
        raise TrainingError("replay store is empty")
    state.update(x, y)
    state.means()  # raises if any registered class is unrepresented
    return state


def _cosine_argmax(candidates: np.ndarray, queries: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
    """Index (or label) of the cosine-nearest candidate per query row.

    Exact ties resolve to the lowest class index, which for unlabeled
    candidate sets is the candidate's own position.
    """
    sims = l2_normalize(queries) @ l2_normalize(candidates).T
    if labels is None:
        return np.argmax(sims, axis=1)
    out = np.empty(len(queries), dtype=np.int64)
    for i, row in enumerate(sims):
        best = row.max()
        out[i] = labels[row == best].min()
    return out


def predict_linear(head: LinearHead | MLPHead, x: np.ndarray) -> np.ndarray:
    if x.shape[1] != head.dim:
        raise TrainingError(f"query dim {x.shape[1]} does not match head dim {head.dim}")
    return np.argmax(head.logits(np.asarray(x, dtype=np.float64)), axis=1)


def predict_ncm(state: NCMState, x: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Nearest class mean; cosine by default, euclidean behind the flag."""
    if x.shape[1] != state.dim:
        raise TrainingError(f"query dim {x.shape[1]} does not match means dim {state.dim}")
    means = state.means()
    x = np.asarray(x, dtype=np.float64)
    if metric == "cosine":
        return _cosine_argmax(means, x)
    if metric == "euclidean":
        distances = np.linalg.norm(x[:, None, :] - means[None, :, :], axis=2)
        return np.argmin(distances, axis=1)
    raise TrainingError(f"unknown NCM metric {metric!r}")


def predict_knn(store: ReplayStore, x: np.ndarray) -> np.ndarray:
    """Single-nearest-neighbor labels under cosine distance, exhaustive scan."""
    ref_x, ref_y = store.all()
    if len(ref_x) == 0:
        raise TrainingError("replay store is empty")
    if x.shape[1] != store.dim:
        raise TrainingError(f"query dim {x.shape[1]} does not match store dim {store.dim}")
    out = np.empty(len(x), dtype=np.int64)
    unit_ref = l2_normalize(ref_x.astype(np.float64))
    unit_q = l2_normalize(np.asarray(x, dtype=np.float64))
    block = 1024
    for start in range(0, len(unit_q), block):
        sims = unit_q[start : start + block] @ unit_ref.T
        best = sims.max(axis=1)
        for i, row in enumerate(sims):
            out[start + i] = ref_y[row == best[i]].min()
    return out


class LearnerState:
    """Everything the continual loop carries between timesteps."""

    def __init__(self, dim: int, method: str, config: TrainConfig | None = None, seed: int = 0):
        if method not in METHODS:
            raise TrainingError(f"unknown method {method!r}; expected one of {METHODS}")
        self.dim = dim
        self.method = method
        self.seed = seed
        self.config = config or TrainConfig(seed=seed)
        self.registry = ClassRegistry()
        self.store = ReplayStore(dim)
        self.head: LinearHead | MLPHead | None = None
        if method == "linear":
            self.head = LinearHead(dim, config=self.config)
        elif method == "mlp":
            self.head = MLPHead(dim, config=self.config, seed=seed)
        self.ncm: NCMState | None = NCMState(dim) if method == "ncm" else None
        self.ncm_metric = "cosine"
        self.timesteps_seen = 0

    def run_timestep(
        self,
        categories: Sequence[str],
        vectors: np.ndarray,
        labels: Sequence[str],
        budget: int | None,
    ) -> dict:
        """Ingest one timestep's pool and update the classifier under budget.

        Centroid and neighbor methods ignore the iteration budget entirely.
        Returns a small summary (classes, store size, iterations used).
        """
        new = [c for c in categories if c not in self.registry]
        if self.head is not None:
            expand_head(self.head, self.registry, new)
        else:
            self.registry.add(new)
            if self.ncm is not None:
                self.ncm.expand(len(new))

        unknown = [name for name in labels if name not in self.registry]
        if unknown:
            raise TrainingError(f"labels outside cumulative registry: {sorted(set(unknown))[:3]}")
        class_indices = np.asarray([self.registry.index_of(name) for name in labels], dtype=np.int64)
        self.store.extend(vectors, class_indices)

        iterations = 0
        if self.head is not None:
            before = self.head.step_count
            step_config = TrainConfig(**{**self.config.__dict__, "seed": self._timestep_seed()})
            train_head(self.head, self.store, budget, step_config)
            iterations = self.head.step_count - before
        elif self.ncm is not None:
            self.ncm.update(vectors, class_indices)

        self.timesteps_seen += 1
        return {
            "timestep": self.timesteps_seen,
            "classes": len(self.registry),
            "store_size": len(self.store),
            "iterations": iterations,
        }

    def _timestep_seed(self) -> int:
        # Derived per timestep so a resumed run draws identical batches.
        return (self.seed * 1_000_003 + self.timesteps_seen + 1) % (2**31)

    def predict(self, x: np.ndarray) -> list[str]:
        x = np.asarray(x, dtype=np.float64)
        if self.method in ("linear", "mlp"):
            idx = predict_linear(self.head, x)
        elif self.method == "ncm":
            idx = predict_ncm(self.ncm, x, metric=self.ncm_metric)
        else:
            idx = predict_knn(self.store, x)
        names = self.registry.names
        return [names[i] for i in idx]
