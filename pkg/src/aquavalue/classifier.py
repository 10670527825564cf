"""Per-date exercise/continuation classifiers.

Each decision date gets its own small feed-forward network trained on
the states labeled by an LSMC stopping rule: exercised states are the
positive class, continuing states the negative class.  Batches are
class-balanced by resampling the (much rarer) exercise states, and the
batch count is chosen so each continuation state is seen once.

The networks are implemented directly on numpy so training is
bit-reproducible from the seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .farm import FarmParams, cumulative_feed_cost
from .lsmc import STOCHASTIC, StoppingOutcome, discounted_payoff, feed_factor, state_features
from .model import PathSet

_BN_EPS = 1e-3
_ADAM_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults follow the network's design
    (Adam, constant learning rate, 128 + 128 balanced batches)."""

    batch_size: int = 128
    learning_rate: float = 1e-3
    bn_momentum: float = 0.99
    seed: int = 0
    passes: int = 1  # sweeps over the training data per date
    min_batches: int = 0  # extra sweeps on dates with little data


@dataclass
class LabeledSets:
    """Per-date exercise/continuation states in regression coordinates.

    ``exercise[k]`` / ``cont[k]`` hold the states of paths that stopped
    at / after date k; paths already stopped before k appear in neither.
    Keys run over the interior decision dates 1..N-1.
    """

    dim: int
    n_steps: int
    exercise: dict[int, np.ndarray]
    cont: dict[int, np.ndarray]


def build_labeled_sets(paths: PathSet, stops: StoppingOutcome, dim: int | None = None) -> LabeledSets:
    """Partition path states by the stopping decision taken on them."""
    dim = dim or paths.dim
    n = paths.grid.n_steps
    exercise: dict[int, np.ndarray] = {}
    cont: dict[int, np.ndarray] = {}
    idx = stops.stop_index
    for k in range(1, n):
        x = state_features(paths, k, dim)
        exercise[k] = x[idx == k]
        cont[k] = x[idx > k]
    return LabeledSets(dim=dim, n_steps=n, exercise=exercise, cont=cont)


class Mlp:
    """Batch-norm / dense ReLU stack ending in a 2-way softmax.

    Layers: BN, dense 16d (relu), dense 32d (relu), dense 16d (relu),
    BN, dense 2 (softmax).  Output index 1 is the exercise probability.
    """

    def __init__(self, dim: int, rng: np.random.Generator,
                 lr: float = 1e-3, bn_momentum: float = 0.99):
        self.dim = dim
        self.lr = lr
        self.mom = bn_momentum
        sizes = [dim, 16 * dim, 32 * dim, 16 * dim, 2]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        # batch-norm layers sit before dense 0 and after dense 2
        self.bn_gamma = [np.ones(dim), np.ones(sizes[3])]
        self.bn_beta = [np.zeros(dim), np.zeros(sizes[3])]
        self.bn_mean = [np.zeros(dim), np.zeros(sizes[3])]
        self.bn_var = [np.ones(dim), np.ones(sizes[3])]
        self._adam_t = 0
        self._adam_m = [np.zeros_like(p) for p in self._params()]
        self._adam_v = [np.zeros_like(p) for p in self._params()]

    def _params(self):
        return self.weights + self.biases + self.bn_gamma + self.bn_beta

    def _set_params(self, params):
        nw = len(self.weights)
        self.weights = params[:nw]
        self.biases = params[nw : 2 * nw]
        self.bn_gamma = params[2 * nw : 2 * nw + 2]
        self.bn_beta = params[2 * nw + 2 :]

    def _bn_forward(self, i, x, training):
        if training:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.bn_mean[i] = self.mom * self.bn_mean[i] + (1 - self.mom) * mu
            self.bn_var[i] = self.mom * self.bn_var[i] + (1 - self.mom) * var
        else:
            mu, var = self.bn_mean[i], self.bn_var[i]
        inv = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (x - mu) * inv
        return self.bn_gamma[i] * xhat + self.bn_beta[i], (xhat, inv)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities (continue, exercise) using the frozen
        running batch-norm statistics; a pure function of the weights."""
        h, _ = self._bn_forward(0, x, training=False)
        for w, b in zip(self.weights[:3], self.biases[:3]):
            h = np.maximum(h @ w + b, 0.0)
        h, _ = self._bn_forward(1, h, training=False)
        logits = h @ self.weights[3] + self.biases[3]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def train_step(self, x: np.ndarray, labels: np.ndarray) -> float:
        """One Adam update on a batch; returns the cross-entropy loss."""
        m = x.shape[0]
        # forward
        a0, (xhat0, inv0) = self._bn_forward(0, x, training=True)
        pre, act = [], [a0]
        h = a0
        for w, b in zip(self.weights[:3], self.biases[:3]):
            z = h @ w + b
            h = np.maximum(z, 0.0)
            pre.append(z)
            act.append(h)
        a4, (xhat1, inv1) = self._bn_forward(1, h, training=True)
        logits = a4 @ self.weights[3] + self.biases[3]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        probs = expz / expz.sum(axis=1, keepdims=True)
        loss = -np.mean(shifted[np.arange(m), labels] - np.log(expz.sum(axis=1)))

        # backward
        dlogits = probs.copy()
        dlogits[np.arange(m), labels] -= 1.0
        dlogits /= m
        dw3 = a4.T @ dlogits
        db3 = dlogits.sum(axis=0)
        da4 = dlogits @ self.weights[3].T
        dh, dg1, dbeta1 = _bn_backward(da4, xhat1, inv1, self.bn_gamma[1])
        grads_w, grads_b = [None] * 3, [None] * 3
        for i in (2, 1, 0):
            dz = dh * (pre[i] > 0)
            grads_w[i] = act[i].T @ dz
            grads_b[i] = dz.sum(axis=0)
            dh = dz @ self.weights[i].T
        _, dg0, dbeta0 = _bn_backward(dh, xhat0, inv0, self.bn_gamma[0])

        grads = (
            grads_w + [dw3] + grads_b + [db3] + [dg0, dg1] + [dbeta0, dbeta1]
        )
        self._adam(grads)
        return float(loss)

    def _adam(self, grads, beta1=0.9, beta2=0.999):
        self._adam_t += 1
        t = self._adam_t
        params = self._params()
        new = []
        for p, g, m, v in zip(params, grads, self._adam_m, self._adam_v):
            m[...] = beta1 * m + (1 - beta1) * g
            v[...] = beta2 * v + (1 - beta2) * g * g
            mhat = m / (1 - beta1**t)
            vhat = v / (1 - beta2**t)
            new.append(p - self.lr * mhat / (np.sqrt(vhat) + _ADAM_EPS))
        self._set_params(new)

    def recalibrate_stats(self, x_cont: np.ndarray, x_exercise: np.ndarray) -> None:
        """Replace the running batch-norm statistics by exact moments of
        the class-balanced training distribution.

        The exponentially-weighted running statistics only converge after
        many batches; with a few hundred batches per date they are still
        biased toward their initialization, which would shift every
        inference-time decision relative to training.
        """

        def balanced_moments(a, b):
            mean = 0.5 * (a.mean(axis=0) + b.mean(axis=0))
            second = 0.5 * ((a * a).mean(axis=0) + (b * b).mean(axis=0))
            return mean, second - mean**2

        self.bn_mean[0], self.bn_var[0] = balanced_moments(x_cont, x_exercise)

        def hidden(x):
            h, _ = self._bn_forward(0, x, training=False)
            for w, b in zip(self.weights[:3], self.biases[:3]):
                h = np.maximum(h @ w + b, 0.0)
            return h

        self.bn_mean[1], self.bn_var[1] = balanced_moments(
            hidden(x_cont), hidden(x_exercise)
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        for i in range(2):
            out[f"bn{i}_gamma"] = self.bn_gamma[i]
            out[f"bn{i}_beta"] = self.bn_beta[i]
            out[f"bn{i}_mean"] = self.bn_mean[i]
            out[f"bn{i}_var"] = self.bn_var[i]
        return out

    @classmethod
    def from_state_arrays(cls, dim: int, arrays: dict[str, np.ndarray]) -> "Mlp":
        net = cls(dim, np.random.default_rng(0))
        net.weights = [np.asarray(arrays[f"w{i}"]) for i in range(4)]
        net.biases = [np.asarray(arrays[f"b{i}"]) for i in range(4)]
        net.bn_gamma = [np.asarray(arrays[f"bn{i}_gamma"]) for i in range(2)]
        net.bn_beta = [np.asarray(arrays[f"bn{i}_beta"]) for i in range(2)]
        net.bn_mean = [np.asarray(arrays[f"bn{i}_mean"]) for i in range(2)]
        net.bn_var = [np.asarray(arrays[f"bn{i}_var"]) for i in range(2)]
        return net


def _bn_backward(dy, xhat, inv, gamma):
    m = dy.shape[0]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


@dataclass
class ClassifierRule:
    """One trained network per interior decision date.

    ``nets[k]`` is None on dates with no exercised training states; the
    rule then always continues there.
    """

    dim: int
    n_steps: int
    nets: dict[int, Mlp | None]
    train_seed: int
    config: TrainConfig
    metadata: dict = field(default_factory=dict)


def balanced_batches(n_cont: int, n_exercise: int, batch_size: int,
                     rng: np.random.Generator, passes: int = 1):
    """Yield (continuation indices, exercise indices) per batch.

    Per pass, ceil(max(n_cont, n_exercise) / b) batches: one shuffled
    sweep over the larger class (wrapping the last batch so every batch
    holds exactly ``batch_size`` of each class) while the smaller class
    is resampled with replacement.
    """
    n_batches = math.ceil(max(n_cont, n_exercise) / batch_size)

    def sweep(n):
        perm = rng.permutation(n)
        tiled = np.concatenate([perm, perm[: max(0, n_batches * batch_size - n)]])
        return tiled

    for _ in range(passes):
        c_sweep = sweep(n_cont) if n_cont >= n_exercise else None
        e_sweep = sweep(n_exercise) if n_exercise > n_cont else None
        for i in range(n_batches):
            lo = i * batch_size
            if c_sweep is not None:
                c_idx = c_sweep[lo : lo + batch_size]
                e_idx = rng.integers(0, n_exercise, size=batch_size)
            else:
                e_idx = e_sweep[lo : lo + batch_size]
                c_idx = rng.integers(0, n_cont, size=batch_size)
            yield c_idx, e_idx


def train(sets: LabeledSets, cfg: TrainConfig) -> ClassifierRule:
    """Train one network per date on the labeled state sets."""
    nets: dict[int, Mlp | None] = {}
    meta: dict[int, dict] = {}
    for k in range(1, sets.n_steps):
        ex, co = sets.exercise[k], sets.cont[k]
        if len(ex) == 0:
            nets[k] = None  # no observed exercise: always continue
            continue
        if len(co) == 0:
            raise ValueError(f"date {k}: empty continuation set")
        rng = np.random.default_rng([cfg.seed, k])
        net = Mlp(sets.dim, rng, lr=cfg.learning_rate, bn_momentum=cfg.bn_momentum)
        per_pass = math.ceil(max(len(co), len(ex)) / cfg.batch_size)
        passes = max(cfg.passes, math.ceil(cfg.min_batches / per_pass))
        labels = np.concatenate(
            [np.zeros(cfg.batch_size, dtype=int), np.ones(cfg.batch_size, dtype=int)]
        )
        loss = math.nan
        n_batches = 0
        for c_idx, e_idx in balanced_batches(len(co), len(ex), cfg.batch_size, rng, passes):
            x = np.concatenate([co[c_idx], ex[e_idx]])
            loss = net.train_step(x, labels)
            if not math.isfinite(loss):
                raise ArithmeticError(
                    f"date {k}: non-finite loss after {n_batches} batches "
                    f"(lr={cfg.learning_rate}, seed={cfg.seed})"
                )
            n_batches += 1
        net.recalibrate_stats(co, ex)
        nets[k] = net
        meta[k] = {"batches": n_batches, "final_loss": loss,
                   "n_exercise": len(ex), "n_cont": len(co)}
    return ClassifierRule(
        dim=sets.dim, n_steps=sets.n_steps, nets=nets,
        train_seed=cfg.seed, config=cfg, metadata=meta,
    )


def exercise_probability(rule: ClassifierRule, k: int, x: np.ndarray) -> np.ndarray:
    """P(exercise) at date k for states x of shape (m, dim)."""
    x = np.atleast_2d(x)
    if x.shape[1] != rule.dim:
        raise ValueError(f"state dim {x.shape[1]} != rule dim {rule.dim}")
    net = rule.nets.get(k)
    if net is None:
        return np.zeros(x.shape[0])
    return net.predict(x)[:, 1]


def decide(rule: ClassifierRule, k: int, x: np.ndarray):
    """Stop/continue decision (ties stop) with the exercise probability."""
    p = exercise_probability(rule, k, x)
    return p >= 0.5, p


def evaluate_classifier(
    rule: ClassifierRule,
    fresh_paths: PathSet,
    fp: FarmParams,
    r: float,
    discount_at_upper: bool = False,
) -> StoppingOutcome:
    """Value of the classifier stopping rule under the stochastic-feed
    objective on fresh validation paths."""
    if fresh_paths.dim != 4:
        raise ValueError("evaluation requires 4-dim paths")
    payoff = discounted_payoff(fresh_paths, fp, r)
    cf = cumulative_feed_cost(
        fp, r, feed_factor(fresh_paths, STOCHASTIC), fresh_paths.grid, discount_at_upper
    )
    n = fresh_paths.grid.n_steps
    stop_index = np.full(fresh_paths.n_paths, n)
    alive = np.ones(fresh_paths.n_paths, dtype=bool)
    for k in range(1, n):
        if rule.nets.get(k) is None or not alive.any():
            continue
        x = state_features(fresh_paths, k, rule.dim)[alive]
        stop_here, _ = decide(rule, k, x)
        who = np.flatnonzero(alive)[stop_here]
        stop_index[who] = k
        alive[who] = False
    rows = np.arange(fresh_paths.n_paths)
    values = payoff[rows, stop_index] - cf[rows, stop_index]
    return StoppingOutcome.from_values(stop_index, values)


def save_rule(rule: ClassifierRule, path) -> None:
    """Serialize a classifier rule to an .npz container with a JSON
    manifest under the key ``meta``."""
    arrays = {}
    for k, net in rule.nets.items():
        if net is None:
            continue
        for name, arr in net.state_arrays().items():
            arrays[f"date{k}/{name}"] = arr
    meta = {
        "dim": rule.dim,
        "n_steps": rule.n_steps,
        "train_seed": rule.train_seed,
        "config": {
            "batch_size": rule.config.batch_size,
            "learning_rate": rule.config.learning_rate,
            "bn_momentum": rule.config.bn_momentum,
            "seed": rule.config.seed,
            "passes": rule.config.passes,
            "min_batches": rule.config.min_batches,
        },
        "dates": sorted(k for k, n in rule.nets.items() if n is not None),
        "metadata": rule.metadata,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_rule(path) -> ClassifierRule:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]))
        nets: dict[int, Mlp | None] = {k: None for k in range(1, meta["n_steps"])}
        for k in meta["dates"]:
            prefix = f"date{k}/"
            arrays = {
                name[len(prefix):]: data[name]
                for name in data.files
                if name.startswith(prefix)
            }
            nets[k] = Mlp.from_state_arrays(meta["dim"], arrays)
    return ClassifierRule(
        dim=meta["dim"],
        n_steps=meta["n_steps"],
        nets=nets,
        train_seed=meta["train_seed"],
        config=TrainConfig(**meta["config"]),
        metadata={int(k): v for k, v in meta.get("metadata", {}).items()},
    )
